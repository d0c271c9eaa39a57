use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraView, Intrinsics, Pose};

pub const RIG_SCHEMA_VERSION: u32 = 1;

/// Cameras sharing one world frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Rig {
    pub views: Vec<CameraView>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ViewRecord {
    id: usize,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
    omega: f64,
    /// Rows of the view-to-world matrix `[R | t]`.
    pose: [[f64; 4]; 3],
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RigRecord {
    version: u32,
    views: Vec<ViewRecord>,
}

impl Rig {
    pub fn new(views: Vec<CameraView>) -> Result<Self> {
        let rig = Self { views };
        rig.validate()?;
        Ok(rig)
    }

    pub fn validate(&self) -> Result<()> {
        if self.views.len() < 2 {
            return Err(Error::Config(format!(
                "a rig needs at least 2 views, got {}",
                self.views.len()
            )));
        }
        let first = &self.views[0].intrinsics;
        for v in &self.views {
            v.intrinsics.validate()?;
            Pose::new(v.pose.rotation, v.pose.translation)?;
            if (v.intrinsics.width, v.intrinsics.height) != (first.width, first.height) {
                return Err(Error::Config("all views of a rig must share an image size".into()));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    pub fn width(&self) -> usize {
        self.views[0].intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.views[0].intrinsics.height
    }

    /// Four cameras on a cross around the origin, all aimed at a point
    /// `focus` meters ahead. Pairwise baselines range from 0.25 to 0.45 m.
    pub fn cross(width: usize, height: usize, omega: f64, focus: f64) -> Result<Self> {
        let intr = Intrinsics::from_fov(width, height, omega)?;
        let eyes = [
            Vector3::new(-0.20, 0.0, 0.0),
            Vector3::new(0.25, 0.0, 0.0),
            Vector3::new(0.0, -0.15, 0.0),
            Vector3::new(0.05, 0.20, 0.0),
        ];
        let target = Vector3::new(0.0, 0.0, focus);
        let views = eyes
            .iter()
            .enumerate()
            .map(|(id, &eye)| CameraView {
                id,
                intrinsics: intr,
                pose: Pose::look_at(eye, target, Vector3::new(0.0, 1.0, 0.0)),
            })
            .collect();
        Self::new(views)
    }

    /// `n` copies of one camera at the origin.
    pub fn identity(n: usize, width: usize, height: usize, omega: f64) -> Result<Self> {
        let intr = Intrinsics::from_fov(width, height, omega)?;
        Self::new(
            (0..n)
                .map(|id| CameraView {
                    id,
                    intrinsics: intr,
                    pose: Pose::identity(),
                })
                .collect(),
        )
    }

    pub fn to_json(&self) -> String {
        let rec = RigRecord {
            version: RIG_SCHEMA_VERSION,
            views: self
                .views
                .iter()
                .map(|v| {
                    let (r, t) = (&v.pose.rotation, &v.pose.translation);
                    let row = |i: usize| [r[(i, 0)], r[(i, 1)], r[(i, 2)], t[i]];
                    let k = &v.intrinsics;
                    ViewRecord {
                        id: v.id,
                        fx: k.fx,
                        fy: k.fy,
                        cx: k.cx,
                        cy: k.cy,
                        width: k.width,
                        height: k.height,
                        omega: k.omega,
                        pose: [row(0), row(1), row(2)],
                    }
                })
                .collect(),
        };
        serde_json::to_string_pretty(&rec).expect("rig serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let rec: RigRecord = serde_json::from_str(text).map_err(|e| Error::Config(format!("rig: {e}")))?;
        if rec.version != RIG_SCHEMA_VERSION {
            return Err(Error::Config(format!("unsupported rig schema version {}", rec.version)));
        }
        let views = rec
            .views
            .into_iter()
            .map(|v| {
                let intrinsics = Intrinsics::new(v.fx, v.fy, v.cx, v.cy, v.width, v.height, v.omega)?;
                let p = v.pose;
                let rotation = Matrix3::new(
                    p[0][0], p[0][1], p[0][2], p[1][0], p[1][1], p[1][2], p[2][0], p[2][1], p[2][2],
                );
                let pose = Pose::new(rotation, Vector3::new(p[0][3], p[1][3], p[2][3]))?;
                Ok(CameraView {
                    id: v.id,
                    intrinsics,
                    pose,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(views)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
