//! Parametric scenes and a ray-casting renderer.
//!
//! Albedo comes from solid (3-D) textures evaluated at the hit point and
//! shading from a fixed ambient + directional light, so the color of a
//! surface point is the same from every camera.

use nalgebra::{Matrix3, Rotation3, Vector2, Vector3};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::frame::ColorImage;
use crate::geometry::{CameraView, DepthMap};

/// One sinusoidal component of a solid texture.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Wave {
    /// Wave vector in radians per meter.
    pub k: [f64; 3],
    pub phase: f64,
    pub amplitude: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolidTexture {
    pub base: [f64; 3],
    pub waves: Vec<Wave>,
}

impl SolidTexture {
    pub fn flat(rgb: [f64; 3]) -> Self {
        Self {
            base: rgb,
            waves: Vec::new(),
        }
    }

    pub fn albedo(&self, p: &Vector3<f64>) -> [f64; 3] {
        let mut c = self.base;
        for w in &self.waves {
            let s = (w.k[0] * p.x + w.k[1] * p.y + w.k[2] * p.z + w.phase).sin();
            for ch in 0..3 {
                c[ch] += w.amplitude[ch] * s;
            }
        }
        c.map(|v| v.clamp(0.02, 0.98))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    /// Infinite plane through `point`.
    Plane { point: [f64; 3], normal: [f64; 3] },
    Sphere { center: [f64; 3], radius: f64 },
    /// Box rotated by `yaw` radians about the world y axis.
    Cuboid { center: [f64; 3], half: [f64; 3], yaw: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub texture: SolidTexture,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lighting {
    pub ambient: f64,
    pub diffuse: f64,
    /// Direction light travels in, world frame.
    pub direction: [f64; 3],
}

impl Default for Lighting {
    fn default() -> Self {
        Self {
            ambient: 0.6,
            diffuse: 0.4,
            direction: [0.3, 0.5, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub primitives: Vec<Primitive>,
    pub lighting: Lighting,
}

struct Hit {
    t: f64,
    normal: Vector3<f64>,
}

fn v3(a: [f64; 3]) -> Vector3<f64> {
    Vector3::new(a[0], a[1], a[2])
}

impl Shape {
    /// Nearest hit with `t > 0` of the ray `o + t·d`.
    fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<Hit> {
        const T_MIN: f64 = 1e-9;
        match self {
            Shape::Plane { point, normal } => {
                let n = v3(*normal).normalize();
                let denom = n.dot(d);
                if denom.abs() < 1e-12 {
                    return None;
                }
                let t = n.dot(&(v3(*point) - o)) / denom;
                (t > T_MIN).then(|| Hit {
                    t,
                    normal: if denom > 0.0 { -n } else { n },
                })
            }
            Shape::Sphere { center, radius } => {
                let oc = o - v3(*center);
                let a = d.dot(d);
                let b = oc.dot(d);
                let c = oc.dot(&oc) - radius * radius;
                let disc = b * b - a * c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let t = [(-b - sq) / a, (-b + sq) / a].into_iter().find(|&t| t > T_MIN)?;
                Some(Hit {
                    t,
                    normal: (o + d * t - v3(*center)) / *radius,
                })
            }
            Shape::Cuboid { center, half, yaw } => {
                let rot = Rotation3::from_axis_angle(&Vector3::y_axis(), *yaw);
                let lo = rot.inverse() * (o - v3(*center));
                let ld = rot.inverse() * d;
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                let (mut axis0, mut axis1) = (0, 0);
                for a in 0..3 {
                    if ld[a].abs() < 1e-15 {
                        if lo[a].abs() > half[a] {
                            return None;
                        }
                        continue;
                    }
                    let ta = (-half[a] - lo[a]) / ld[a];
                    let tb = (half[a] - lo[a]) / ld[a];
                    let (near, far) = if ta < tb { (ta, tb) } else { (tb, ta) };
                    if near > t0 {
                        t0 = near;
                        axis0 = a;
                    }
                    if far < t1 {
                        t1 = far;
                        axis1 = a;
                    }
                }
                if t0 > t1 || t1 <= T_MIN {
                    return None;
                }
                let (t, axis) = if t0 > T_MIN { (t0, axis0) } else { (t1, axis1) };
                let mut n = Vector3::zeros();
                n[axis] = (lo[axis] + ld[axis] * t).signum();
                Some(Hit { t, normal: rot * n })
            }
        }
    }
}

impl Scene {
    /// Nearest hit along a world ray: `(t, primitive index, unit normal)`.
    fn cast(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, usize, Vector3<f64>)> {
        let mut best: Option<(f64, usize, Vector3<f64>)> = None;
        for (i, p) in self.primitives.iter().enumerate() {
            if let Some(h) = p.shape.intersect(o, d) {
                if best.as_ref().is_none_or(|b| h.t < b.0) {
                    best = Some((h.t, i, h.normal));
                }
            }
        }
        best
    }

    fn shade(&self, prim: usize, p: &Vector3<f64>, n: &Vector3<f64>) -> [f64; 3] {
        let l = &self.lighting;
        let toward_light = -v3(l.direction).normalize();
        let lambert = n.dot(&toward_light).max(0.0);
        let k = l.ambient + l.diffuse * lambert;
        self.primitives[prim].texture.albedo(p).map(|a| (a * k).clamp(0.0, 1.0))
    }
}

/// Renders z-depth (0 where nothing is hit) and color with
/// `supersample²` color samples per pixel.
pub fn render_view(scene: &Scene, view: &CameraView, supersample: usize) -> (DepthMap, ColorImage) {
    let intr = &view.intrinsics;
    let (w, h) = (intr.width, intr.height);
    let rot: Matrix3<f64> = view.pose.rotation;
    let origin = view.pose.translation;
    let ss = supersample.max(1);
    let rows: Vec<(Vec<f64>, Vec<[f64; 3]>)> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut depth = Vec::with_capacity(w);
            let mut color = Vec::with_capacity(w);
            for x in 0..w {
                // Camera rays have unit z, so the hit parameter is z-depth.
                let ray = |px: f64, py: f64| rot * intr.ray(Vector2::new(px, py));
                let d = scene
                    .cast(&origin, &ray(x as f64, y as f64))
                    .map_or(0.0, |(t, _, _)| t);
                depth.push(d);
                let mut acc = [0.0; 3];
                for sy in 0..ss {
                    for sx in 0..ss {
                        let ox = (sx as f64 + 0.5) / ss as f64 - 0.5;
                        let oy = (sy as f64 + 0.5) / ss as f64 - 0.5;
                        let dir = ray(x as f64 + ox, y as f64 + oy);
                        if let Some((t, i, n)) = scene.cast(&origin, &dir) {
                            let c = scene.shade(i, &(origin + dir * t), &n);
                            for ch in 0..3 {
                                acc[ch] += c[ch];
                            }
                        }
                    }
                }
                color.push(acc.map(|v| v / (ss * ss) as f64));
            }
            (depth, color)
        })
        .collect();
    let mut dm = DepthMap::zeros(w, h);
    let mut img = ColorImage::zeros(w, h);
    for (y, (d, c)) in rows.into_iter().enumerate() {
        dm.data[y * w..(y + 1) * w].copy_from_slice(&d);
        img.data[y * w..(y + 1) * w].copy_from_slice(&c);
    }
    (dm, img)
}

/// Knobs of the random scene generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    /// Range of the back wall's distance from the rig, meters.
    pub wall_depth: [f64; 2],
    /// Range of object center distances in front of the wall, meters.
    pub object_gap: [f64; 2],
    pub min_objects: usize,
    pub max_objects: usize,
    /// Range of texture wavelengths, meters.
    pub wavelength: [f64; 2],
    pub waves: usize,
    pub amplitude: f64,
    /// Per-primitive albedo offset range around a scene-wide base color.
    pub base_spread: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            wall_depth: [2.0, 2.6],
            object_gap: [0.15, 0.45],
            min_objects: 3,
            max_objects: 5,
            wavelength: [0.2, 0.45],
            waves: 4,
            amplitude: 0.1,
            base_spread: 0.1,
        }
    }
}

fn random_texture<R: Rng + ?Sized>(spec: &SceneSpec, scene_base: [f64; 3], rng: &mut R) -> SolidTexture {
    let b = spec.base_spread;
    let base = scene_base.map(|c| c + rng.gen_range(-b..=b));
    let waves = (0..spec.waves)
        .map(|_| {
            let dir = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
                .try_normalize(1e-6)
                .unwrap_or_else(Vector3::x);
            let lambda = rng.gen_range(spec.wavelength[0]..=spec.wavelength[1]);
            let k = dir * (std::f64::consts::TAU / lambda);
            let a = spec.amplitude;
            Wave {
                k: [k.x, k.y, k.z],
                phase: rng.gen_range(0.0..std::f64::consts::TAU),
                amplitude: [rng.gen_range(-a..=a), rng.gen_range(-a..=a), rng.gen_range(-a..=a)],
            }
        })
        .collect();
    SolidTexture { base, waves }
}

/// Random scene: a back wall, a floor and a few spheres and boxes in front
/// of a rig at the origin looking along +z.
pub fn random_scene<R: Rng + ?Sized>(spec: &SceneSpec, rng: &mut R) -> Scene {
    let mut primitives = Vec::new();
    let scene_base = [rng.gen_range(0.35..0.65), rng.gen_range(0.35..0.65), rng.gen_range(0.35..0.65)];
    let wall_z = rng.gen_range(spec.wall_depth[0]..=spec.wall_depth[1]);
    let tilt = Vector3::new(rng.gen_range(-0.25..0.25), rng.gen_range(-0.15..0.15), -1.0);
    primitives.push(Primitive {
        shape: Shape::Plane {
            point: [0.0, 0.0, wall_z],
            normal: [tilt.x, tilt.y, tilt.z],
        },
        texture: random_texture(spec, scene_base, rng),
    });
    primitives.push(Primitive {
        shape: Shape::Plane {
            point: [0.0, rng.gen_range(0.45..0.65), 0.0],
            normal: [0.0, -1.0, rng.gen_range(-0.1..0.1)],
        },
        texture: random_texture(spec, scene_base, rng),
    });
    let count = rng.gen_range(spec.min_objects..=spec.max_objects.max(spec.min_objects));
    for _ in 0..count {
        let z = wall_z - rng.gen_range(spec.object_gap[0]..=spec.object_gap[1]);
        let spread = 0.35 * z;
        let center = [rng.gen_range(-spread..spread), rng.gen_range(-0.6 * spread..0.6 * spread), z];
        let shape = if rng.gen_bool(0.5) {
            Shape::Sphere {
                center,
                radius: rng.gen_range(0.12..0.3),
            }
        } else {
            Shape::Cuboid {
                center,
                half: [rng.gen_range(0.08..0.25), rng.gen_range(0.08..0.25), rng.gen_range(0.08..0.25)],
                yaw: rng.gen_range(-0.8..0.8),
            }
        };
        primitives.push(Primitive {
            shape,
            texture: random_texture(spec, scene_base, rng),
        });
    }
    Scene {
        primitives,
        lighting: Lighting::default(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::Rig;
    use crate::geometry::{CameraView, Intrinsics, Pose};

    fn front_view() -> CameraView {
        CameraView {
            id: 0,
            intrinsics: Intrinsics::from_fov(16, 12, 0.5).unwrap(),
            pose: Pose::identity(),
        }
    }

    fn scene(prims: Vec<Shape>) -> Scene {
        Scene {
            primitives: prims
                .into_iter()
                .map(|shape| Primitive {
                    shape,
                    texture: SolidTexture::flat([0.5; 3]),
                })
                .collect(),
            lighting: Lighting::default(),
        }
    }

    #[test]
    fn frontal_plane_gives_constant_depth() {
        let s = scene(vec![Shape::Plane {
            point: [0.0, 0.0, 2.0],
            normal: [0.0, 0.0, -1.0],
        }]);
        let (d, c) = render_view(&s, &front_view(), 2);
        assert!(d.data.iter().all(|&v| (v - 2.0).abs() < 1e-12));
        let first = c.data[0];
        assert!(c.data.iter().all(|&p| p == first));
    }

    #[test]
    fn empty_scene_gives_zero_depth() {
        let (d, c) = render_view(&scene(vec![]), &front_view(), 1);
        assert_eq!(d.valid_count(), 0);
        assert!(c.data.iter().all(|&p| p == [0.0; 3]));
    }

    #[test]
    fn sphere_center_depth() {
        let view = CameraView {
            id: 0,
            intrinsics: Intrinsics::from_fov(17, 17, 0.5).unwrap(),
            pose: Pose::identity(),
        };
        let s = scene(vec![Shape::Sphere {
            center: [0.0, 0.0, 2.0],
            radius: 0.5,
        }]);
        let (d, _) = render_view(&s, &view, 1);
        assert!((d.get(8, 8) - 1.5).abs() < 1e-12);
    }

    #[test]
    fn cuboid_front_face_depth() {
        let s = scene(vec![Shape::Cuboid {
            center: [0.0, 0.0, 2.0],
            half: [5.0, 5.0, 0.25],
            yaw: 0.0,
        }]);
        let (d, _) = render_view(&s, &front_view(), 1);
        assert!(d.data.iter().all(|&v| (v - 1.75).abs() < 1e-12));
    }

    #[test]
    fn random_scenes_fill_the_cross_rig() {
        let rig = Rig::cross(32, 32, 0.45, 1.6).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        use rand::SeedableRng;
        for _ in 0..5 {
            let s = random_scene(&SceneSpec::default(), &mut rng);
            for v in &rig.views {
                let (d, _) = render_view(&s, v, 1);
                assert!(d.valid_count() == 32 * 32);
                assert!(d.data.iter().all(|&z| z > 0.2 && z < 3.5));
            }
        }
    }
}
