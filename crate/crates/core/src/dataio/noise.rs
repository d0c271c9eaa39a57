use nalgebra::Vector2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{DepthMap, Intrinsics};

/// Sensor corruption model: random dropout plus zero-mean Gaussian noise
/// along the viewing ray with standard deviation
/// `sigma_base + sigma_slope · d²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSpec {
    pub dropout_rate: f64,
    pub sigma_base: f64,
    pub sigma_slope: f64,
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            dropout_rate: 0.6,
            sigma_base: 0.002,
            sigma_slope: 0.003,
            seed: 0,
        }
    }
}

impl NoiseSpec {
    pub fn none() -> Self {
        Self {
            dropout_rate: 0.0,
            sigma_base: 0.0,
            sigma_slope: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout_rate {} outside [0, 1)", self.dropout_rate)));
        }
        if !(self.sigma_base >= 0.0 && self.sigma_slope >= 0.0) {
            return Err(Error::Config("noise sigmas must be non-negative".into()));
        }
        Ok(())
    }

    pub fn sigma(&self, depth: f64) -> f64 {
        self.sigma_base + self.sigma_slope * depth * depth
    }
}

/// Corrupts a clean depth map. Pixels that become non-positive or exceed
/// `threshold` are marked invalid (0).
pub fn corrupt<R: Rng + ?Sized>(
    clean: &DepthMap,
    spec: &NoiseSpec,
    intr: &Intrinsics,
    threshold: f64,
    rng: &mut R,
) -> DepthMap {
    let mut out = DepthMap::zeros(clean.width, clean.height);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    for y in 0..clean.height {
        for x in 0..clean.width {
            let d = clean.get(x, y);
            if d <= 0.0 {
                continue;
            }
            // Draw both numbers unconditionally so the stream does not
            // depend on earlier outcomes.
            let u: f64 = rng.gen();
            let n: f64 = std_normal.sample(rng);
            if u < spec.dropout_rate {
                continue;
            }
            let ray_len = intr.ray(Vector2::new(x as f64, y as f64)).norm();
            let z = d + spec.sigma(d) * n / ray_len;
            if z > 0.0 && z <= threshold {
                out.set(x, y, z);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn intr(n: usize) -> Intrinsics {
        Intrinsics::from_fov(n, n, 0.45).unwrap()
    }

    #[test]
    fn zero_spec_is_identity() {
        let d = DepthMap::filled(8, 8, 1.7);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(corrupt(&d, &NoiseSpec::none(), &intr(8), 3.0, &mut rng), d);
    }

    #[test]
    fn dropout_fraction() {
        let d = DepthMap::filled(320, 320, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = corrupt(&d, &NoiseSpec::default(), &intr(320), 3.0, &mut rng);
        let frac = out.valid_count() as f64 / (320.0 * 320.0);
        assert!((frac - 0.4).abs() < 0.02, "{frac}");
    }

    #[test]
    fn ray_noise_std_at_two_meters() {
        // Residuals measured along the ray.
        let n = 320;
        let k = intr(n);
        let d = DepthMap::filled(n, n, 2.0);
        let spec = NoiseSpec {
            dropout_rate: 0.0,
            ..NoiseSpec::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let out = corrupt(&d, &spec, &k, 3.0, &mut rng);
        let mut sum = 0.0;
        let mut sq = 0.0;
        for y in 0..n {
            for x in 0..n {
                let r = (out.get(x, y) - 2.0) * k.ray(Vector2::new(x as f64, y as f64)).norm();
                sum += r;
                sq += r * r;
            }
        }
        let m = (n * n) as f64;
        let std = (sq / m - (sum / m).powi(2)).sqrt();
        assert!((std / spec.sigma(2.0) - 1.0).abs() < 0.05, "{std}");
    }

    #[test]
    fn outputs_stay_in_range() {
        let d = DepthMap::filled(64, 64, 2.95);
        let spec = NoiseSpec {
            sigma_base: 0.5,
            ..NoiseSpec::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = corrupt(&d, &spec, &intr(64), 3.0, &mut rng);
        assert!(out.data.iter().all(|&z| (0.0..=3.0).contains(&z)));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let bad = NoiseSpec {
            dropout_rate: 1.0,
            ..NoiseSpec::default()
        };
        assert!(bad.validate().is_err());
        let bad = NoiseSpec {
            sigma_slope: -1.0,
            ..NoiseSpec::default()
        };
        assert!(bad.validate().is_err());
    }
}
