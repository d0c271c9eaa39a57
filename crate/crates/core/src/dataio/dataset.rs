//! On-disk synthetic datasets.
//!
//! ```text
//! root/
//!   manifest.json
//!   rig.json
//!   scene_0000/
//!     scene.json
//!     view_0/{depth.pfm, color.ppm, mask.pgm, gt_depth.pfm}
//!     ...
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::formats::{read_pfm, read_pgm, read_ppm, write_pfm, write_pgm, write_ppm};
use super::noise::{corrupt, NoiseSpec};
use super::rig::Rig;
use super::scene::{random_scene, render_view, Scene, SceneSpec};
use crate::error::{Error, Result};
use crate::frame::{Frame, Mask};
use crate::geometry::{DepthMap, DEFAULT_DEPTH_THRESHOLD};

pub const MANIFEST_VERSION: u32 = 1;

/// Everything that determines a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub scenes: usize,
    /// Cameras used from the cross rig, 2 to 4.
    pub views: usize,
    pub width: usize,
    pub height: usize,
    /// Horizontal half field of view, radians.
    pub omega: f64,
    /// Distance of the point the rig converges on, meters.
    pub focus: f64,
    pub depth_threshold: f64,
    /// Color samples per pixel along each axis.
    pub supersample: usize,
    pub seed: u64,
    pub noise: NoiseSpec,
    pub scene: SceneSpec,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            scenes: 50,
            views: 4,
            width: 64,
            height: 64,
            omega: 0.45,
            focus: 1.6,
            depth_threshold: DEFAULT_DEPTH_THRESHOLD,
            supersample: 3,
            seed: 0,
            noise: NoiseSpec::default(),
            scene: SceneSpec::default(),
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        self.noise.validate()?;
        if !(2..=4).contains(&self.views) {
            return Err(Error::Config(format!("views must be between 2 and 4, got {}", self.views)));
        }
        if self.width == 0 || self.height == 0 || self.supersample == 0 {
            return Err(Error::Config("image size and supersampling must be nonzero".into()));
        }
        if !(self.depth_threshold > 0.0) {
            return Err(Error::Config("depth_threshold must be positive".into()));
        }
        Ok(())
    }

    pub fn rig(&self) -> Result<Rig> {
        let mut rig = Rig::cross(self.width, self.height, self.omega, self.focus)?;
        rig.views.truncate(self.views);
        rig.validate()?;
        Ok(rig)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneEntry {
    pub dir: String,
    pub seed: u64,
    /// SHA-256 over the scene's files in write order.
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub rig: String,
    pub views: usize,
    pub spec: DatasetSpec,
    pub scenes: Vec<SceneEntry>,
}

/// Noisy frames (with clean color) and ground-truth depth for every view.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub frames: Vec<Frame>,
    pub gt: Vec<DepthMap>,
}

fn thresholded(mut d: DepthMap, threshold: f64) -> DepthMap {
    d.threshold(threshold);
    d
}

/// Renders one sample in memory.
pub fn synthesize_sample(spec: &DatasetSpec, rig: &Rig, scene_seed: u64) -> Result<Sample> {
    synthesize(spec, rig, scene_seed).map(|(_, s)| s)
}

fn synthesize(spec: &DatasetSpec, rig: &Rig, scene_seed: u64) -> Result<(Scene, Sample)> {
    let mut rng = ChaCha8Rng::seed_from_u64(scene_seed);
    let scene = random_scene(&spec.scene, &mut rng);
    let mut frames = Vec::with_capacity(rig.len());
    let mut gt = Vec::with_capacity(rig.len());
    for view in &rig.views {
        let (depth, color) = render_view(&scene, view, spec.supersample);
        let depth = thresholded(depth, spec.depth_threshold);
        let mut noise_rng = ChaCha8Rng::seed_from_u64(scene_seed ^ spec.noise.seed.rotate_left(32));
        noise_rng.set_stream(view.id as u64);
        let noisy = corrupt(&depth, &spec.noise, &view.intrinsics, spec.depth_threshold, &mut noise_rng);
        // Round-trip color through 8 bits so memory matches disk.
        let color = super::formats::decode_ppm(&super::formats::encode_ppm(&color)).expect("valid ppm");
        frames.push(Frame::new(color, noisy)?);
        gt.push(depth);
    }
    Ok((scene, Sample { frames, gt }))
}

/// Per-scene seeds drawn from `spec.seed`, in scene order.
pub fn scene_seeds(spec: &DatasetSpec) -> Vec<u64> {
    let mut seeds = ChaCha8Rng::seed_from_u64(spec.seed);
    (0..spec.scenes).map(|_| seeds.gen()).collect()
}

/// The samples [`generate_dataset`] would write, kept in memory.
pub fn generate_samples(spec: &DatasetSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    let rig = spec.rig()?;
    scene_seeds(spec).into_iter().map(|s| synthesize_sample(spec, &rig, s)).collect()
}

fn write_hashed(path: &Path, hasher: &mut Sha256, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    write(path)?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    hasher.update(&bytes);
    Ok(())
}

/// Writes `spec.scenes` samples under `root` and returns the manifest.
pub fn generate_dataset(root: &Path, spec: &DatasetSpec) -> Result<Manifest> {
    spec.validate()?;
    let rig = spec.rig()?;
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    rig.save(&root.join("rig.json"))?;
    let mut scenes = Vec::with_capacity(spec.scenes);
    for (i, scene_seed) in scene_seeds(spec).into_iter().enumerate() {
        let (scene, sample) = synthesize(spec, &rig, scene_seed)?;
        let dir = format!("scene_{i:04}");
        let sdir = root.join(&dir);
        let mut hasher = Sha256::new();
        fs::create_dir_all(&sdir).map_err(|e| Error::io(&sdir, e))?;
        let scene_json = serde_json::to_string_pretty(&scene).expect("scene serializes");
        write_hashed(&sdir.join("scene.json"), &mut hasher, |p| {
            fs::write(p, &scene_json).map_err(|e| Error::io(p, e))
        })?;
        for (v, (frame, gt)) in sample.frames.iter().zip(&sample.gt).enumerate() {
            let vdir = sdir.join(format!("view_{v}"));
            fs::create_dir_all(&vdir).map_err(|e| Error::io(&vdir, e))?;
            write_hashed(&vdir.join("depth.pfm"), &mut hasher, |p| write_pfm(p, &frame.depth))?;
            write_hashed(&vdir.join("color.ppm"), &mut hasher, |p| write_ppm(p, &frame.color))?;
            write_hashed(&vdir.join("mask.pgm"), &mut hasher, |p| write_pgm(p, &frame.mask))?;
            write_hashed(&vdir.join("gt_depth.pfm"), &mut hasher, |p| write_pfm(p, gt))?;
        }
        log::debug!("wrote {dir}");
        scenes.push(SceneEntry {
            dir,
            seed: scene_seed,
            sha256: hex::encode(hasher.finalize()),
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        rig: "rig.json".into(),
        views: rig.len(),
        spec: spec.clone(),
        scenes,
    };
    let path = root.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// A generated dataset opened for reading.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub rig: Rig,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::format(&path, format!("unsupported version {}", manifest.version)));
        }
        let rig = Rig::load(&root.join(&manifest.rig))?;
        if rig.len() != manifest.views {
            return Err(Error::format(&path, "view count disagrees with the rig"));
        }
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
            rig,
        })
    }

    pub fn len(&self) -> usize {
        self.manifest.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.scenes.is_empty()
    }

    pub fn scene_dir(&self, i: usize) -> PathBuf {
        self.root.join(&self.manifest.scenes[i].dir)
    }

    pub fn sample(&self, i: usize) -> Result<Sample> {
        let dir = self.scene_dir(i);
        let mut frames = Vec::with_capacity(self.rig.len());
        let mut gt = Vec::with_capacity(self.rig.len());
        for v in 0..self.rig.len() {
            let vdir = dir.join(format!("view_{v}"));
            let depth = read_pfm(&vdir.join("depth.pfm"))?;
            let color = read_ppm(&vdir.join("color.ppm"))?;
            let mask_path = vdir.join("mask.pgm");
            let mask: Mask = read_pgm(&mask_path)?;
            let frame = Frame::new(color, depth)?;
            if frame.mask != mask {
                return Err(Error::format(&mask_path, "mask disagrees with depth"));
            }
            if (frame.width(), frame.height()) != (self.rig.width(), self.rig.height()) {
                return Err(Error::format(&vdir, "image size disagrees with the rig"));
            }
            frames.push(frame);
            gt.push(read_pfm(&vdir.join("gt_depth.pfm"))?);
        }
        Ok(Sample { frames, gt })
    }

    pub fn samples(&self) -> Result<Vec<Sample>> {
        (0..self.len()).map(|i| self.sample(i)).collect()
    }
}
