//! Partial-convolution encoder/decoder that maps a noisy depth map to a
//! denoised one.
//!
//! Layout for base width `b` (all convolutions partial, ELU after each but
//! the last):
//!
//! ```text
//! enc1  1 → b            full res     (skip s1)
//! enc2  b → 2b  stride 2
//! enc3  2b → 2b
//! enc4  2b → 2b          1/2          (skip s2)
//! enc5  2b → 4b stride 2
//! enc6  4b → 4b
//! enc7  4b → 4b          1/4          (skip s3)
//! enc8  4b → 8b stride 2
//! enc9  8b → 8b          1/8
//! res1, res2             x + conv(elu(conv(elu(x))))
//! dec1  8b → 8b
//! up ×2, dec2 8b → 4b, concat s3, dec3 1×1 8b → 4b
//! up ×2, dec4 4b → 2b, concat s2, dec5 1×1 4b → 2b
//! up ×2, dec6 2b → b,  concat s1, dec7 1×1 2b → b
//! dec8  b → b
//! dec9  b → 1            linear
//! ```
//!
//! Depth enters divided by `depth_threshold` and leaves multiplied by it.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{DepthMap, DEFAULT_DEPTH_THRESHOLD};
use crate::nn::{checkpoint, Graph, NodeId, ParamStore, PartialConv, Real, Tensor};

const ELU_ALPHA: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub base_channels: usize,
    pub height: usize,
    pub width: usize,
    /// Depths beyond this (meters) are treated as invalid.
    pub depth_threshold: f64,
    pub kernel_size: usize,
    /// Seed of the weight initialization.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            base_channels: 16,
            height: 64,
            width: 64,
            depth_threshold: DEFAULT_DEPTH_THRESHOLD,
            kernel_size: 3,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        check_size(self.height, self.width)?;
        if self.base_channels < 4 {
            return Err(Error::Config(format!(
                "base_channels must be at least 4, got {}",
                self.base_channels
            )));
        }
        if self.kernel_size % 2 == 0 || self.kernel_size == 0 {
            return Err(Error::Config(format!("kernel_size must be odd, got {}", self.kernel_size)));
        }
        if !(self.depth_threshold > 0.0 && self.depth_threshold.is_finite()) {
            return Err(Error::Config(format!(
                "depth_threshold must be positive, got {}",
                self.depth_threshold
            )));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("model config serializes")
    }
}

fn check_size(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || h % 8 != 0 || w % 8 != 0 {
        return Err(Error::Config(format!(
            "input size {h}x{w} must be a positive multiple of 8"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone)]
struct Layers {
    enc: [PartialConv; 9],
    res: [[PartialConv; 2]; 2],
    dec: [PartialConv; 9],
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    layers: Layers,
}

/// Handles into a graph built by [`Model::forward_graph`].
#[derive(Debug, Clone, Copy)]
pub struct ForwardNodes {
    pub input: NodeId,
    /// Predicted depth in meters, before clamping.
    pub depth: NodeId,
}

impl<T: Real> Model<T> {
    pub fn build(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let b = config.base_channels;
        let k = config.kernel_size;
        let mut conv = |name: &str, ci: usize, co: usize, k: usize, s: usize| {
            PartialConv::new(&mut params, name, ci, co, k, s, &mut rng)
        };
        let enc = [
            conv("enc1", 1, b, k, 1)?,
            conv("enc2", b, 2 * b, k, 2)?,
            conv("enc3", 2 * b, 2 * b, k, 1)?,
            conv("enc4", 2 * b, 2 * b, k, 1)?,
            conv("enc5", 2 * b, 4 * b, k, 2)?,
            conv("enc6", 4 * b, 4 * b, k, 1)?,
            conv("enc7", 4 * b, 4 * b, k, 1)?,
            conv("enc8", 4 * b, 8 * b, k, 2)?,
            conv("enc9", 8 * b, 8 * b, k, 1)?,
        ];
        let res = [
            [conv("res1a", 8 * b, 8 * b, k, 1)?, conv("res1b", 8 * b, 8 * b, k, 1)?],
            [conv("res2a", 8 * b, 8 * b, k, 1)?, conv("res2b", 8 * b, 8 * b, k, 1)?],
        ];
        let dec = [
            conv("dec1", 8 * b, 8 * b, k, 1)?,
            conv("dec2", 8 * b, 4 * b, k, 1)?,
            conv("dec3", 8 * b, 4 * b, 1, 1)?,
            conv("dec4", 4 * b, 2 * b, k, 1)?,
            conv("dec5", 4 * b, 2 * b, 1, 1)?,
            conv("dec6", 2 * b, b, k, 1)?,
            conv("dec7", 2 * b, b, 1, 1)?,
            conv("dec8", b, b, k, 1)?,
            conv("dec9", b, 1, k, 1)?,
        ];
        Ok(Self {
            config: config.clone(),
            params,
            layers: Layers { enc, res, dec },
        })
    }

    /// Same architecture and weights in another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            layers: self.layers.clone(),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    /// Channel count after each of the nine encoder layers.
    pub fn encoder_channels(&self) -> Vec<usize> {
        self.layers.enc.iter().map(|l| l.c_out).collect()
    }

    /// Records the network on `g`. `depth` is an `N×1×H×W` batch in meters
    /// with zeros marking missing measurements.
    pub fn forward_graph(&self, g: &mut Graph<T>, depth: &Tensor<T>, requires_grad: bool) -> Result<ForwardNodes> {
        let [n, c, h, w] = depth.shape();
        if c != 1 || n == 0 {
            return Err(Error::Config(format!("expected an N×1×H×W depth batch, got {:?}", depth.shape())));
        }
        check_size(h, w)?;
        if !depth.is_finite() {
            return Err(Error::NonFinite("input depth contains NaN or infinity".into()));
        }
        let thr = self.config.depth_threshold;
        let inv = T::of(1.0 / thr);
        let mut scaled = Vec::with_capacity(depth.numel());
        let mut mask = Vec::with_capacity(depth.numel());
        for &d in depth.data() {
            let ok = d > T::zero() && d.as_f64() <= thr;
            scaled.push(if ok { d * inv } else { T::zero() });
            mask.push(if ok { T::one() } else { T::zero() });
        }
        let input = g.masked_input(
            Tensor::from_vec(depth.shape(), scaled)?,
            Tensor::from_vec([n, 1, h, w], mask)?,
            requires_grad,
        )?;
        let p = &self.params;
        let l = &self.layers;
        let conv_elu = |g: &mut Graph<T>, x: NodeId, layer: &PartialConv| -> Result<NodeId> {
            let y = g.partial_conv(p, x, layer)?;
            Ok(g.elu(y, ELU_ALPHA))
        };

        let mut x = input;
        let mut skips = Vec::with_capacity(3);
        for (i, layer) in l.enc.iter().enumerate() {
            x = conv_elu(g, x, layer)?;
            if matches!(i, 0 | 3 | 6) {
                skips.push(x);
            }
        }
        for [a, b] in &l.res {
            let t = g.elu(x, ELU_ALPHA);
            let t = g.partial_conv(p, t, a)?;
            let t = g.elu(t, ELU_ALPHA);
            let t = g.partial_conv(p, t, b)?;
            x = g.add(x, t)?;
        }
        x = conv_elu(g, x, &l.dec[0])?;
        for (stage, skip) in skips.iter().rev().enumerate() {
            x = g.upsample(x, 2);
            x = conv_elu(g, x, &l.dec[1 + 2 * stage])?;
            if g.value(x).shape()[2..] != g.value(*skip).shape()[2..] {
                return Err(Error::Config("skip connection resolution mismatch".into()));
            }
            x = g.concat(x, *skip)?;
            x = conv_elu(g, x, &l.dec[2 + 2 * stage])?;
        }
        x = conv_elu(g, x, &l.dec[7])?;
        let raw = g.partial_conv(p, x, &l.dec[8])?;
        let depth = g.scale(raw, thr);
        Ok(ForwardNodes { input, depth })
    }

    /// Denoised depth, clamped to `[0, depth_threshold]`; pixels the network
    /// leaves invalid are 0.
    pub fn predict(&self, depth: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let nodes = self.forward_graph(&mut g, depth, false)?;
        let thr = T::of(self.config.depth_threshold);
        let mask = g.mask(nodes.depth);
        let data = g
            .value(nodes.depth)
            .data()
            .iter()
            .zip(mask.data())
            .map(|(&d, &m)| if m > T::zero() { d.max(T::zero()).min(thr) } else { T::zero() })
            .collect();
        Tensor::from_vec(depth.shape(), data)
    }
}

/// Stacks depth maps into an `N×1×H×W` tensor.
pub fn depth_batch<T: Real>(maps: &[&DepthMap]) -> Result<Tensor<T>> {
    let first = maps.first().ok_or_else(|| Error::Config("empty depth batch".into()))?;
    let (w, h) = (first.width, first.height);
    let mut data = Vec::with_capacity(maps.len() * w * h);
    for m in maps {
        if (m.width, m.height) != (w, h) {
            return Err(Error::Config("depth maps in a batch must share a size".into()));
        }
        data.extend(m.data.iter().map(|&d| T::of(d)));
    }
    Tensor::from_vec([maps.len(), 1, h, w], data)
}

/// Splits an `N×1×H×W` tensor back into depth maps.
pub fn unbatch<T: Real>(t: &Tensor<T>) -> Vec<DepthMap> {
    let [n, _, h, w] = t.shape();
    (0..n)
        .map(|s| DepthMap {
            width: w,
            height: h,
            data: t.data()[s * h * w..(s + 1) * h * w].iter().map(|v| v.as_f64()).collect(),
        })
        .collect()
}

impl Model<f32> {
    /// Denoises single maps at f32 precision.
    pub fn denoise(&self, depth: &DepthMap) -> Result<DepthMap> {
        let t = depth_batch::<f32>(&[depth])?;
        Ok(unbatch(&self.predict(&t)?).remove(0))
    }

    /// Writes the parameters to `path` and the config to the sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(&self.params, path)?;
        let side = sidecar_path(path);
        fs::write(&side, self.config.to_toml()).map_err(|e| Error::io(&side, e))
    }

    /// Loads a checkpoint. Without a sidecar, the base width is read off the
    /// first layer and other fields keep their defaults.
    pub fn load(path: &Path) -> Result<Self> {
        let arrays = checkpoint::read_arrays(path)?;
        let side = sidecar_path(path);
        let config = if side.exists() {
            let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
            ModelConfig::from_toml(&text)?
        } else {
            let first = arrays
                .iter()
                .find(|a| a.name == "enc1.weight")
                .ok_or_else(|| Error::format(path, "no enc1.weight array"))?;
            ModelConfig {
                base_channels: first.shape[0],
                kernel_size: first.shape[3],
                ..ModelConfig::default()
            }
        };
        let mut model = Self::build(&config)?;
        checkpoint::load_into(&mut model.params, &arrays, path)?;
        Ok(model)
    }
}

/// `model.bin` → `model.cfg`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("cfg")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            base_channels: 4,
            height: 16,
            width: 16,
            ..ModelConfig::default()
        }
    }

    fn noisy_batch(n: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * h * w)
            .map(|_| if rng.gen_bool(0.4) { rng.gen_range(0.5..2.5) } else { 0.0 })
            .collect();
        Tensor::from_vec([n, 1, h, w], data).unwrap()
    }

    #[test]
    fn output_shape_matches_input() {
        let m = Model::<f32>::build(&ModelConfig::default()).unwrap();
        let x = noisy_batch(1, 64, 64, 0).cast::<f32>();
        assert_eq!(m.predict(&x).unwrap().shape(), [1, 1, 64, 64]);
        assert_eq!(m.encoder_channels(), vec![16, 32, 32, 32, 64, 64, 64, 128, 128]);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = ModelConfig {
            height: 60,
            ..ModelConfig::default()
        };
        assert!(matches!(Model::<f32>::build(&bad), Err(Error::Config(_))));
        let bad = ModelConfig {
            base_channels: 2,
            ..ModelConfig::default()
        };
        assert!(Model::<f32>::build(&bad).is_err());
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Model::<f32>::build(&tiny()).unwrap();
        let b = Model::<f32>::build(&tiny()).unwrap();
        assert_eq!(a.parameter_count(), b.parameter_count());
        for (p, q) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(p.value, q.value);
        }
    }

    #[test]
    fn nan_input_is_rejected() {
        let m = Model::<f64>::build(&tiny()).unwrap();
        let mut x = noisy_batch(1, 16, 16, 1);
        x.data_mut()[3] = f64::NAN;
        assert!(matches!(m.predict(&x), Err(Error::NonFinite(_))));
    }

    #[test]
    fn empty_mask_gives_zero_output() {
        let m = Model::<f64>::build(&tiny()).unwrap();
        let y = m.predict(&Tensor::zeros([1, 1, 16, 16])).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn untrained_outputs_are_finite() {
        let m = Model::<f32>::build(&tiny()).unwrap();
        for seed in 0..100 {
            let y = m.predict(&noisy_batch(1, 16, 16, seed).cast()).unwrap();
            assert!(y.is_finite());
            assert!(y.data().iter().all(|&v| (0.0..=3.0).contains(&v)));
        }
    }

    #[test]
    fn weights_transfer_to_a_larger_input() {
        let m = Model::<f32>::build(&ModelConfig::default()).unwrap();
        let y = m.predict(&noisy_batch(1, 96, 96, 2).cast()).unwrap();
        assert_eq!(y.shape(), [1, 1, 96, 96]);
    }

    #[test]
    fn checkpoint_round_trip_with_and_without_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let cfg = ModelConfig {
            seed: 9,
            ..tiny()
        };
        let m = Model::<f32>::build(&cfg).unwrap();
        m.save(&path).unwrap();
        let back = Model::load(&path).unwrap();
        assert_eq!(back.config, cfg);
        fs::remove_file(sidecar_path(&path)).unwrap();
        let back = Model::load(&path).unwrap();
        assert_eq!(back.config.base_channels, 4);
        for (p, q) in m.params.iter().zip(back.params.iter()) {
            assert_eq!(p.value, q.value);
        }
    }

    #[test]
    fn end_to_end_gradient_matches_finite_differences() {
        let mut model = Model::<f64>::build(&tiny()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for p in model.params.iter_mut() {
            if p.name.ends_with(".bias") {
                p.value.data_mut().iter_mut().for_each(|b| *b = rng.gen_range(-0.1..0.1));
            }
        }
        let x = noisy_batch(2, 16, 16, 4);
        let r: Vec<f64> = (0..x.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss = |m: &Model<f64>| -> f64 {
            let mut g = Graph::new();
            let n = m.forward_graph(&mut g, &x, false).unwrap();
            g.value(n.depth).data().iter().zip(&r).map(|(a, b)| a * b).sum()
        };
        let mut g = Graph::new();
        let nodes = model.forward_graph(&mut g, &x, false).unwrap();
        let up = Tensor::from_vec(x.shape(), r.clone()).unwrap();
        g.backward_with(&mut model.params, nodes.depth, up).unwrap();
        let h = 1e-5;
        let mut checked = 0;
        let ids: Vec<_> = (0..model.params.len()).map(crate::nn::ParamId).collect();
        for id in ids {
            let n = model.params.get(id).value.numel();
            let grad = model.params.get(id).grad.clone();
            for i in (0..n).step_by((n / 6).max(1)) {
                let orig = model.params.get(id).value.data()[i];
                model.params.get_mut(id).value.data_mut()[i] = orig + h;
                let fp = loss(&model);
                model.params.get_mut(id).value.data_mut()[i] = orig - h;
                let fm = loss(&model);
                model.params.get_mut(id).value.data_mut()[i] = orig;
                let num = (fp - fm) / (2.0 * h);
                let ana = grad.data()[i];
                let scale = num.abs().max(ana.abs()).max(1e-4);
                assert!(
                    (num - ana).abs() / scale < 1e-3,
                    "{}[{i}]: analytic {ana} numeric {num}",
                    model.params.get(id).name
                );
                checked += 1;
            }
        }
        assert!(checked > 100);
    }
}
