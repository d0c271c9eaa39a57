//! Training objectives with robust penalties, masks and analytic gradients.
//!
//! All image losses are means over their valid pixels so the term weights
//! stay meaningful across resolutions and sparsity levels. A loss with no
//! valid pixel evaluates to 0 and reports `valid == 0`.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{ColorImage, Mask};
use crate::geometry::{compute_normals, normals_backward, DepthMap, Intrinsics};

/// SSIM stabilizers for colors in `[0, 1]`.
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub tukey_c: f64,
    pub berhu_fraction: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.85,
            lambda2: 0.1,
            lambda3: 0.05,
            alpha: 0.85,
            gamma: 0.447,
            tukey_c: 2.2,
            berhu_fraction: 0.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let sum = self.lambda1 + self.lambda2 + self.lambda3;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("loss weights sum to {sum}, expected 1")));
        }
        if [self.lambda1, self.lambda2, self.lambda3].iter().any(|l| *l < 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        // alpha at the closed ends is allowed so that the pure color and pure
        // structural losses can be selected.
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.gamma > 0.0 && self.tukey_c > 0.0) {
            return Err(Error::Config("gamma and tukey_c must be positive".into()));
        }
        if !(self.berhu_fraction > 0.0 && self.berhu_fraction < 1.0) {
            return Err(Error::Config("berhu_fraction outside (0, 1)".into()));
        }
        Ok(())
    }

    /// The given term weights rescaled to sum to one.
    pub fn with_lambdas(self, l1: f64, l2: f64, l3: f64) -> Self {
        let s = l1 + l2 + l3;
        Self {
            lambda1: l1 / s,
            lambda2: l2 / s,
            lambda3: l3 / s,
            ..self
        }
    }
}

/// A scalar loss with its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Loss<G> {
    pub value: f64,
    pub grad: G,
    /// Number of pixels that entered the mean.
    pub valid: usize,
}

impl<G> Loss<G> {
    /// True when no pixel was valid and the value defaulted to 0.
    pub fn is_empty(&self) -> bool {
        self.valid == 0
    }
}

#[inline]
pub fn charbonnier(x: f64, gamma: f64) -> f64 {
    (x * x + gamma * gamma).sqrt()
}

/// Tukey biweight rho-function; saturates at `c²/6` for `|x| ≥ c`.
#[inline]
pub fn tukey(x: f64, c: f64) -> f64 {
    if x.abs() >= c {
        c * c / 6.0
    } else {
        let u = 1.0 - (x / c).powi(2);
        c * c / 6.0 * (1.0 - u * u * u)
    }
}

#[inline]
pub fn tukey_derivative(x: f64, c: f64) -> f64 {
    if x.abs() >= c {
        0.0
    } else {
        let u = 1.0 - (x / c).powi(2);
        x * u * u
    }
}

/// Reverse Huber: `|r|` up to the border `c`, `(r² + c²) / 2c` beyond.
#[inline]
pub fn berhu(r: f64, c: f64) -> f64 {
    let a = r.abs();
    if a <= c {
        a
    } else {
        (r * r + c * c) / (2.0 * c)
    }
}

fn check_same_size(a: &ColorImage, b: &ColorImage, m: &Mask) {
    assert!(
        a.width == b.width && a.height == b.height && m.width == a.width && m.height == a.height,
        "image and mask sizes differ"
    );
}

/// Charbonnier penalty of the per-pixel L1 color error, averaged over
/// pixels where `valid` is set. The gradient is with respect to `pred`.
pub fn color_loss(
    target: &ColorImage,
    pred: &ColorImage,
    valid: &Mask,
    gamma: f64,
) -> Loss<Vec<[f64; 3]>> {
    check_same_size(target, pred, valid);
    let n = valid.count();
    let mut grad = vec![[0.0; 3]; pred.data.len()];
    if n == 0 {
        return Loss { value: 0.0, grad, valid: 0 };
    }
    let inv_n = 1.0 / n as f64;
    let mut sum = 0.0;
    for i in 0..pred.data.len() {
        if !valid.data[i] {
            continue;
        }
        let t = target.data[i];
        let p = pred.data[i];
        let e = [t[0] - p[0], t[1] - p[1], t[2] - p[2]];
        let x = e[0].abs() + e[1].abs() + e[2].abs();
        let rho = charbonnier(x, gamma);
        sum += rho;
        let s = x / rho * inv_n;
        for k in 0..3 {
            grad[i][k] = -s * e[k].signum() * (e[k] != 0.0) as u8 as f64;
        }
    }
    Loss { value: sum * inv_n, grad, valid: n }
}

/// Per-pixel SSIM of 3×3 windows, averaged across channels. Returns `None`
/// for pixels whose window leaves the image or touches an unset `gate`
/// pixel.
pub fn ssim_map(a: &ColorImage, b: &ColorImage, gate: &Mask) -> Vec<Option<f64>> {
    let (w, h) = (a.width, a.height);
    let mut out = vec![None; w * h];
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            if let Some(win) = Window::gather(a, b, gate, x, y) {
                let s: f64 = (0..3).map(|k| win.ssim(k).0).sum::<f64>() / 3.0;
                out[y * w + x] = Some(s);
            }
        }
    }
    out
}

struct Window {
    idx: [usize; 9],
    a: [[f64; 3]; 9],
    b: [[f64; 3]; 9],
}

struct SsimParts {
    s: f64,
    d_mu_b: f64,
    d_sab: f64,
    d_sbb: f64,
    mu_a: f64,
    mu_b: f64,
}

impl Window {
    fn gather(a: &ColorImage, b: &ColorImage, gate: &Mask, x: usize, y: usize) -> Option<Self> {
        let w = a.width;
        let mut win = Window {
            idx: [0; 9],
            a: [[0.0; 3]; 9],
            b: [[0.0; 3]; 9],
        };
        let mut j = 0;
        for yy in y - 1..=y + 1 {
            for xx in x - 1..=x + 1 {
                let i = yy * w + xx;
                if !gate.data[i] {
                    return None;
                }
                win.idx[j] = i;
                win.a[j] = a.data[i];
                win.b[j] = b.data[i];
                j += 1;
            }
        }
        Some(win)
    }

    /// SSIM of channel `k` and its partials with respect to the window
    /// statistics of `b`.
    fn ssim(&self, k: usize) -> (f64, SsimParts) {
        let n = 9.0;
        let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for j in 0..9 {
            let (x, y) = (self.a[j][k], self.b[j][k]);
            ma += x;
            mb += y;
            saa += x * x;
            sbb += y * y;
            sab += x * y;
        }
        ma /= n;
        mb /= n;
        let var_a = saa / n - ma * ma;
        let var_b = sbb / n - mb * mb;
        let cov = sab / n - ma * mb;
        let a1 = 2.0 * ma * mb + SSIM_C1;
        let a2 = 2.0 * cov + SSIM_C2;
        let b1 = ma * ma + mb * mb + SSIM_C1;
        let b2 = var_a + var_b + SSIM_C2;
        let s = a1 * a2 / (b1 * b2);
        let parts = SsimParts {
            s,
            d_mu_b: 2.0 * ma * a2 / (b1 * b2) - s * 2.0 * mb / b1,
            d_sab: 2.0 * a1 / (b1 * b2),
            d_sbb: -s / b2,
            mu_a: ma,
            mu_b: mb,
        };
        (s, parts)
    }
}

/// `0.5 · mean φ(1 − SSIM)` over pixels set in `valid` whose 3×3 window is
/// fully covered by `gate`. Gradient with respect to `pred`.
pub fn structural_loss(
    target: &ColorImage,
    pred: &ColorImage,
    valid: &Mask,
    gate: &Mask,
    tukey_c: f64,
) -> Loss<Vec<[f64; 3]>> {
    check_same_size(target, pred, valid);
    let (w, h) = (pred.width, pred.height);
    let mut grad = vec![[0.0; 3]; w * h];
    let mut windows = Vec::new();
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            if !valid.data[y * w + x] {
                continue;
            }
            if let Some(win) = Window::gather(target, pred, gate, x, y) {
                windows.push(win);
            }
        }
    }
    let n = windows.len();
    if n == 0 {
        return Loss { value: 0.0, grad, valid: 0 };
    }
    let scale = 0.5 / n as f64;
    let mut sum = 0.0;
    for win in &windows {
        let stats: Vec<SsimParts> = (0..3).map(|k| win.ssim(k).1).collect();
        let s = stats.iter().map(|p| p.s).sum::<f64>() / 3.0;
        let x = 1.0 - s;
        sum += tukey(x, tukey_c);
        // d loss / d s for this pixel, shared by the three channels
        let g_s = -tukey_derivative(x, tukey_c) * scale / 3.0;
        if g_s == 0.0 {
            continue;
        }
        for (k, p) in stats.iter().enumerate() {
            for j in 0..9 {
                let a = win.a[j][k];
                let b = win.b[j][k];
                let d = (p.d_mu_b + p.d_sab * (a - p.mu_a) + p.d_sbb * 2.0 * (b - p.mu_b)) / 9.0;
                grad[win.idx[j]][k] += g_s * d;
            }
        }
    }
    Loss { value: sum * scale, grad, valid: n }
}

/// Photometric loss `(1 − α)·L_col + α·L_str` together with both parts.
#[derive(Debug, Clone)]
pub struct Photometric {
    pub color: f64,
    pub structural: f64,
    pub loss: Loss<Vec<[f64; 3]>>,
}

/// `target_masked` is `M_splat ⊙ I`; `valid` is the target's validity mask
/// and `splat_mask` the coverage of the synthesized image.
pub fn photometric_loss(
    target_masked: &ColorImage,
    pred: &ColorImage,
    valid: &Mask,
    splat_mask: &Mask,
    weights: &LossWeights,
) -> Photometric {
    let both = valid.and(splat_mask);
    let col = color_loss(target_masked, pred, &both, weights.gamma);
    let st = structural_loss(target_masked, pred, &both, splat_mask, weights.tukey_c);
    let a = weights.alpha;
    let grad = col
        .grad
        .iter()
        .zip(&st.grad)
        .map(|(c, s)| {
            [
                (1.0 - a) * c[0] + a * s[0],
                (1.0 - a) * c[1] + a * s[1],
                (1.0 - a) * c[2] + a * s[2],
            ]
        })
        .collect();
    Photometric {
        color: col.value,
        structural: st.value,
        loss: Loss {
            value: (1.0 - a) * col.value + a * st.value,
            grad,
            valid: col.valid,
        },
    }
}

/// One view's contribution to the depth loss.
#[derive(Debug, Clone, Copy)]
pub struct DepthPair<'a> {
    pub measured: &'a DepthMap,
    pub predicted: &'a DepthMap,
    pub mask: &'a Mask,
}

/// Largest masked residual `|D − D̃|` over a batch and where it occurs.
fn max_residual(pairs: &[DepthPair<'_>]) -> (usize, f64, Option<(usize, usize, f64)>) {
    let mut n = 0usize;
    let mut max_abs = 0.0f64;
    let mut argmax = None;
    for (b, p) in pairs.iter().enumerate() {
        for i in 0..p.predicted.data.len() {
            if !p.mask.data[i] {
                continue;
            }
            n += 1;
            let r = p.measured.data[i] - p.predicted.data[i];
            if r.abs() > max_abs {
                max_abs = r.abs();
                argmax = Some((b, i, r));
            }
        }
    }
    (n, max_abs, argmax)
}

/// The BerHu border `fraction · max|r|` of a batch.
pub fn berhu_border(pairs: &[DepthPair<'_>], fraction: f64) -> f64 {
    fraction * max_residual(pairs).1
}

/// BerHu penalty with a fixed border `c`, and `d/dc` of its value.
fn berhu_fixed(pairs: &[DepthPair<'_>], c: f64) -> (Loss<Vec<Vec<f64>>>, f64) {
    let mut grad: Vec<Vec<f64>> = pairs.iter().map(|p| vec![0.0; p.predicted.data.len()]).collect();
    let n: usize = pairs.iter().map(|p| p.mask.count()).sum();
    if n == 0 || c == 0.0 {
        return (Loss { value: 0.0, grad, valid: n }, 0.0);
    }
    let inv_n = 1.0 / n as f64;
    let mut sum = 0.0;
    let mut d_c = 0.0;
    for (b, p) in pairs.iter().enumerate() {
        for i in 0..p.predicted.data.len() {
            if !p.mask.data[i] {
                continue;
            }
            let r = p.measured.data[i] - p.predicted.data[i];
            sum += berhu(r, c);
            // d r / d prediction = -1
            let d_r = if r.abs() <= c { r.signum() * (r != 0.0) as u8 as f64 } else { r / c };
            grad[b][i] -= d_r * inv_n;
            if r.abs() > c {
                d_c += (0.5 - r * r / (2.0 * c * c)) * inv_n;
            }
        }
    }
    (Loss { value: sum * inv_n, grad, valid: n }, d_c)
}

/// BerHu penalty of `r = M ⊙ (D − D̃)` with a given border `c`. The
/// gradient treats `c` as a constant.
pub fn berhu_depth_loss_with_border(pairs: &[DepthPair<'_>], c: f64) -> Loss<Vec<Vec<f64>>> {
    berhu_fixed(pairs, c).0
}

/// BerHu penalty of `r = M ⊙ (D − D̃)` over a batch, with the border set to
/// `fraction · max|r|` across the whole batch. The gradient (one vector per
/// pair, with respect to the prediction) includes the border's dependence
/// on the largest residual.
pub fn berhu_depth_loss(pairs: &[DepthPair<'_>], fraction: f64) -> Loss<Vec<Vec<f64>>> {
    let (_, max_abs, argmax) = max_residual(pairs);
    let (mut loss, d_c) = berhu_fixed(pairs, fraction * max_abs);
    if let Some((b, i, r)) = argmax {
        if d_c != 0.0 {
            loss.grad[b][i] -= d_c * fraction * r.signum();
        }
    }
    loss
}

/// Surface smoothness: `1 − mean_p Σ_{p'∈N8(p)} |⟨n(p), n(p')⟩| / G(p)`
/// over pixels set in `mask` with a valid normal and at least one valid
/// neighbor normal. Gradient with respect to `depth`.
pub fn surface_loss(depth: &DepthMap, intr: &Intrinsics, mask: &Mask) -> Loss<Vec<f64>> {
    let (w, h) = (depth.width, depth.height);
    let normals = compute_normals(depth, intr);
    let mut centers = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !mask.data[y * w + x] || normals.get(x, y).is_none() {
                continue;
            }
            let mut nb = Vec::with_capacity(8);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let (xx, yy) = (x as i64 + dx, y as i64 + dy);
                    if xx < 0 || yy < 0 || xx >= w as i64 || yy >= h as i64 {
                        continue;
                    }
                    let j = yy as usize * w + xx as usize;
                    if normals.normals[j].is_some() {
                        nb.push(j);
                    }
                }
            }
            if !nb.is_empty() {
                centers.push((y * w + x, nb));
            }
        }
    }
    let n = centers.len();
    if n == 0 {
        return Loss { value: 0.0, grad: vec![0.0; w * h], valid: 0 };
    }
    let inv_n = 1.0 / n as f64;
    let mut acc = 0.0;
    let mut g_n = vec![Vector3::zeros(); w * h];
    for (i, nb) in &centers {
        let ni = normals.normals[*i].unwrap();
        let inv_g = 1.0 / nb.len() as f64;
        let mut s = 0.0;
        for &j in nb {
            let nj = normals.normals[j].unwrap();
            let dot = ni.dot(&nj);
            s += dot.abs();
            let sg = -dot.signum() * inv_g * inv_n;
            g_n[*i] += nj * sg;
            g_n[j] += ni * sg;
        }
        acc += s * inv_g;
    }
    let grad = normals_backward(depth, intr, &g_n);
    Loss { value: 1.0 - acc * inv_n, grad, valid: n }
}

/// Per-term values of one evaluation of the training objective.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub l_col: f64,
    pub l_str: f64,
    pub l_ph: f64,
    pub l_depth: f64,
    pub l_surface: f64,
    pub l_total: f64,
    pub valid_pixel_count: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub alpha: f64,
}

/// Photometric terms of one target view.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TargetTerms {
    pub l_col: f64,
    pub l_str: f64,
    pub l_ph: f64,
    pub valid: usize,
}

/// Averages the per-target photometric terms and forms
/// `L_total = λ1·L_ph + λ2·L_depth + λ3·L_surface`.
pub fn total_loss(
    targets: &[TargetTerms],
    l_depth: f64,
    l_surface: f64,
    weights: &LossWeights,
) -> LossReport {
    let nt = targets.len().max(1) as f64;
    // Fold from +0 so an empty list gives 0 rather than -0.
    let mean = |f: fn(&TargetTerms) -> f64| targets.iter().map(f).fold(0.0, |a, b| a + b) / nt;
    let (l_col, l_str, l_ph) = (mean(|t| t.l_col), mean(|t| t.l_str), mean(|t| t.l_ph));
    LossReport {
        l_col,
        l_str,
        l_ph,
        l_depth,
        l_surface,
        l_total: weights.lambda1 * l_ph + weights.lambda2 * l_depth + weights.lambda3 * l_surface,
        valid_pixel_count: targets.iter().map(|t| t.valid).sum(),
        lambda1: weights.lambda1,
        lambda2: weights.lambda2,
        lambda3: weights.lambda3,
        alpha: weights.alpha,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> ColorImage {
        let mut img = ColorImage::zeros(w, h);
        for c in img.data.iter_mut() {
            *c = [rng.gen(), rng.gen(), rng.gen()];
        }
        img
    }

    fn rand_mask(rng: &mut ChaCha8Rng, w: usize, h: usize, p: f64) -> Mask {
        let mut m = Mask::new(w, h, false);
        for v in m.data.iter_mut() {
            *v = rng.gen_bool(p);
        }
        m
    }

    #[test]
    fn charbonnier_values() {
        assert_relative_eq!(charbonnier(0.0, 0.447), 0.447, epsilon = 1e-12);
        assert_relative_eq!(charbonnier(1.0, 0.447), 1.095357932367315, epsilon = 1e-12);
        assert_eq!(charbonnier(-0.3, 0.447), charbonnier(0.3, 0.447));
    }

    #[test]
    fn tukey_values() {
        assert_eq!(tukey(0.0, 2.2), 0.0);
        assert_relative_eq!(tukey(2.2, 2.2), 2.2 * 2.2 / 6.0, epsilon = 1e-12);
        assert_relative_eq!(tukey(-5.0, 2.2), 0.806666666666667, epsilon = 1e-12);
        assert_eq!(tukey_derivative(3.0, 2.2), 0.0);
        assert_eq!(tukey_derivative(-3.0, 2.2), 0.0);
        // derivative consistent with the function inside the support
        let h = 1e-6;
        for &x in &[-2.0, -0.7, 0.3, 1.9] {
            let fd = (tukey(x + h, 2.2) - tukey(x - h, 2.2)) / (2.0 * h);
            assert_relative_eq!(fd, tukey_derivative(x, 2.2), epsilon = 1e-8);
        }
    }

    #[test]
    fn berhu_branches() {
        assert_eq!(berhu(0.5, 1.0), 0.5);
        assert_eq!(berhu(2.0, 1.0), 2.5);
        assert_eq!(berhu(1.0, 1.0), 1.0);
        assert_relative_eq!(berhu(1.0 + 1e-12, 1.0), 1.0, epsilon = 1e-9);
        // one-sided derivatives at the border: both equal 1
        let h = 1e-7;
        let left = (berhu(1.0, 1.0) - berhu(1.0 - h, 1.0)) / h;
        let right = (berhu(1.0 + h, 1.0) - berhu(1.0, 1.0)) / h;
        assert_relative_eq!(left, 1.0, epsilon = 1e-6);
        assert_relative_eq!(right, 1.0, epsilon = 1e-6);
    }

    #[test]
    fn color_loss_fixtures() {
        let img = ColorImage::filled(4, 4, [0.3, 0.6, 0.2]);
        let m = Mask::new(4, 4, true);
        let l = color_loss(&img, &img, &m, 0.447);
        assert_relative_eq!(l.value, 0.447, epsilon = 1e-12);

        let mut m1 = Mask::new(4, 4, false);
        m1.data[5] = true;
        let mut pred = img.clone();
        pred.data[5][0] -= 0.3;
        let l = color_loss(&img, &pred, &m1, 0.447);
        // reference from mpmath: sqrt(0.09 + 0.447^2)
        assert_relative_eq!(l.value, 0.538339112456080, epsilon = 1e-12);

        let empty = color_loss(&img, &pred, &Mask::new(4, 4, false), 0.447);
        assert!(empty.is_empty());
        assert_eq!(empty.value, 0.0);
    }

    #[test]
    fn structural_loss_zero_on_identical_images() {
        let img = ColorImage::filled(6, 6, [0.4, 0.4, 0.4]);
        let m = Mask::new(6, 6, true);
        let l = structural_loss(&img, &img, &m, &m, 2.2);
        assert!(l.value.abs() < 1e-9);
        assert_eq!(l.valid, 16);
    }

    #[test]
    fn structural_loss_orders_noise_above_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_image(&mut rng, 12, 12);
        let b = rand_image(&mut rng, 12, 12);
        let m = Mask::new(12, 12, true);
        let same = structural_loss(&a, &a, &m, &m, 2.2).value;
        let diff = structural_loss(&a, &b, &m, &m, 2.2).value;
        assert!(diff > same + 0.05);
        assert!(diff <= 0.5 * 2.2 * 2.2 / 6.0);
    }

    #[test]
    fn partial_ssim_windows_are_skipped() {
        let img = ColorImage::filled(5, 5, [0.5; 3]);
        let mut gate = Mask::new(5, 5, true);
        gate.data[0] = false;
        let map = ssim_map(&img, &img, &gate);
        assert!(map[6].is_none()); // window of (1,1) touches (0,0)
        assert!(map[12].is_some());
    }

    #[test]
    fn photometric_mixing_endpoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_image(&mut rng, 8, 8);
        let b = rand_image(&mut rng, 8, 8);
        let m = rand_mask(&mut rng, 8, 8, 0.8);
        let s = Mask::new(8, 8, true);
        let base = LossWeights::default();
        let both = m.and(&s);
        let col = color_loss(&a, &b, &both, base.gamma).value;
        let st = structural_loss(&a, &b, &both, &s, base.tukey_c).value;
        let p0 = photometric_loss(&a, &b, &m, &s, &LossWeights { alpha: 0.0, ..base });
        let p1 = photometric_loss(&a, &b, &m, &s, &LossWeights { alpha: 1.0, ..base });
        assert_eq!(p0.loss.value, col);
        assert_eq!(p1.loss.value, st);
        let pd = photometric_loss(&a, &b, &m, &s, &base);
        assert_relative_eq!(pd.loss.value, 0.15 * col + 0.85 * st, epsilon = 1e-12);
    }

    #[test]
    fn masked_pixels_get_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_image(&mut rng, 10, 10);
        let b = rand_image(&mut rng, 10, 10);
        let m = rand_mask(&mut rng, 10, 10, 0.7);
        let s = rand_mask(&mut rng, 10, 10, 0.9);
        let p = photometric_loss(&a, &b, &m, &s, &LossWeights::default());
        for i in 0..100 {
            if !s.data[i] {
                assert_eq!(p.loss.grad[i], [0.0; 3]);
            }
        }
    }

    fn check_image_grad(
        f: impl Fn(&ColorImage) -> Loss<Vec<[f64; 3]>>,
        img: &ColorImage,
    ) {
        let an = f(img).grad;
        let h = 1e-5;
        for i in 0..img.data.len() {
            for k in 0..3 {
                let mut p = img.clone();
                p.data[i][k] += h;
                let mut m = img.clone();
                m.data[i][k] -= h;
                let fd = (f(&p).value - f(&m).value) / (2.0 * h);
                let g = an[i][k];
                assert!(
                    (fd - g).abs() <= 1e-4 * fd.abs().max(g.abs()).max(1e-4),
                    "pixel {i} ch {k}: fd {fd} vs {g}"
                );
            }
        }
    }

    #[test]
    fn color_loss_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = rand_image(&mut rng, 6, 6);
        let b = rand_image(&mut rng, 6, 6);
        let m = rand_mask(&mut rng, 6, 6, 0.7);
        check_image_grad(|p| color_loss(&a, p, &m, 0.447), &b);
    }

    #[test]
    fn structural_loss_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = rand_image(&mut rng, 7, 7);
        let b = rand_image(&mut rng, 7, 7);
        let m = rand_mask(&mut rng, 7, 7, 0.8);
        let gate = Mask::new(7, 7, true);
        check_image_grad(|p| structural_loss(&a, p, &m, &gate, 2.2), &b);
    }

    #[test]
    fn photometric_loss_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = rand_image(&mut rng, 7, 7);
        let b = rand_image(&mut rng, 7, 7);
        let m = rand_mask(&mut rng, 7, 7, 0.8);
        let s = rand_mask(&mut rng, 7, 7, 0.9);
        let am = a.masked(&s);
        check_image_grad(|p| photometric_loss(&am, p, &m, &s, &LossWeights::default()).loss, &b);
    }

    fn check_berhu_grad(eval: impl Fn(&[DepthPair<'_>]) -> Loss<Vec<Vec<f64>>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mk = |rng: &mut ChaCha8Rng| {
            let mut d = DepthMap::zeros(5, 5);
            for v in d.data.iter_mut() {
                *v = rng.gen_range(0.5..2.5);
            }
            d
        };
        let meas = [mk(&mut rng), mk(&mut rng)];
        let pred = [mk(&mut rng), mk(&mut rng)];
        let masks = [rand_mask(&mut rng, 5, 5, 0.8), rand_mask(&mut rng, 5, 5, 0.8)];
        let run = |pred: &[DepthMap; 2]| {
            let pairs: Vec<_> = (0..2)
                .map(|b| DepthPair { measured: &meas[b], predicted: &pred[b], mask: &masks[b] })
                .collect();
            eval(&pairs)
        };
        let an = run(&pred).grad;
        let h = 1e-6;
        for b in 0..2 {
            for i in 0..25 {
                let mut p = pred.clone();
                p[b].data[i] += h;
                let mut m = pred.clone();
                m[b].data[i] -= h;
                let fd = (run(&p).value - run(&m).value) / (2.0 * h);
                assert!((fd - an[b][i]).abs() < 1e-6, "{b}/{i}: {fd} vs {}", an[b][i]);
            }
        }
    }

    #[test]
    fn berhu_loss_gradient_includes_border() {
        check_berhu_grad(|pairs| berhu_depth_loss(pairs, 0.2));
    }

    #[test]
    fn berhu_fixed_border_gradient() {
        check_berhu_grad(|pairs| berhu_depth_loss_with_border(pairs, 0.3));
    }

    #[test]
    fn border_is_a_fraction_of_the_batch_max() {
        let meas = DepthMap::from_vec(3, 1, vec![1.0, 2.0, 3.0]).unwrap();
        let pred = DepthMap::from_vec(3, 1, vec![1.5, 2.0, 1.0]).unwrap();
        let m = Mask::new(3, 1, true);
        let pairs = [DepthPair { measured: &meas, predicted: &pred, mask: &m }];
        assert!((berhu_border(&pairs, 0.2) - 0.4).abs() < 1e-15);
        let a = berhu_depth_loss(&pairs, 0.2);
        let b = berhu_depth_loss_with_border(&pairs, 0.4);
        assert_eq!(a.value, b.value);
        assert_eq!(a.grad[0][..2], b.grad[0][..2]);
    }

    #[test]
    fn berhu_loss_fixtures() {
        let meas = DepthMap::from_vec(2, 1, vec![1.0, 1.0]).unwrap();
        let pred = DepthMap::from_vec(2, 1, vec![1.0, 1.0]).unwrap();
        let m = Mask::new(2, 1, true);
        let l = berhu_depth_loss(&[DepthPair { measured: &meas, predicted: &pred, mask: &m }], 0.2);
        assert_eq!(l.value, 0.0);
        let none = Mask::new(2, 1, false);
        let l = berhu_depth_loss(&[DepthPair { measured: &meas, predicted: &pred, mask: &none }], 0.2);
        assert!(l.is_empty());
    }

    fn plane(intr: &Intrinsics, n: Vector3<f64>, off: f64) -> DepthMap {
        let mut d = DepthMap::zeros(intr.width, intr.height);
        for y in 0..intr.height {
            for x in 0..intr.width {
                let ray = intr.ray(nalgebra::Vector2::new(x as f64, y as f64));
                d.set(x, y, off / n.dot(&ray));
            }
        }
        d
    }

    #[test]
    fn surface_loss_zero_on_plane() {
        let k = Intrinsics::from_fov(16, 16, 0.5).unwrap();
        let d = plane(&k, Vector3::new(0.3, -0.2, 1.0).normalize(), 1.5);
        let l = surface_loss(&d, &k, &Mask::new(16, 16, true));
        assert!(l.value.abs() < 1e-9, "{}", l.value);
    }

    #[test]
    fn surface_loss_prefers_smooth_depth() {
        let k = Intrinsics::from_fov(16, 16, 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let clean = plane(&k, Vector3::new(0.1, 0.2, 1.0).normalize(), 1.5);
        let mut noisy = clean.clone();
        for v in noisy.data.iter_mut() {
            *v += rng.gen_range(-0.02..0.02);
        }
        // 3x3 box smoothing of the noisy map
        let mut smooth = noisy.clone();
        for y in 1..15 {
            for x in 1..15 {
                let mut s = 0.0;
                for dy in 0..3 {
                    for dx in 0..3 {
                        s += noisy.get(x + dx - 1, y + dy - 1);
                    }
                }
                smooth.set(x, y, s / 9.0);
            }
        }
        let m = Mask::new(16, 16, true);
        let ln = surface_loss(&noisy, &k, &m).value;
        let ls = surface_loss(&smooth, &k, &m).value;
        assert!(ln > ls, "{ln} vs {ls}");
        assert!((0.0..=1.0).contains(&ln));
    }

    #[test]
    fn surface_loss_gradient() {
        let k = Intrinsics::from_fov(7, 7, 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut d = DepthMap::zeros(7, 7);
        for v in d.data.iter_mut() {
            *v = if rng.gen_bool(0.85) { rng.gen_range(1.0..1.3) } else { 0.0 };
        }
        let m = Mask::from_depth(&d);
        let an = surface_loss(&d, &k, &m).grad;
        let h = 1e-6;
        for i in 0..49 {
            if d.data[i] == 0.0 {
                continue;
            }
            let mut p = d.clone();
            p.data[i] += h;
            let mut q = d.clone();
            q.data[i] -= h;
            let fd = (surface_loss(&p, &k, &m).value - surface_loss(&q, &k, &m).value) / (2.0 * h);
            assert!((fd - an[i]).abs() <= 1e-4 * fd.abs().max(an[i].abs()).max(1e-3), "{i}: {fd} vs {}", an[i]);
        }
    }

    #[test]
    fn total_loss_combination() {
        let t = [
            TargetTerms { l_col: 0.5, l_str: 0.1, l_ph: 0.2, valid: 10 },
            TargetTerms { l_col: 0.7, l_str: 0.3, l_ph: 0.4, valid: 12 },
        ];
        let w = LossWeights::default().with_lambdas(1.0, 0.0, 0.0);
        let r = total_loss(&t, 0.9, 0.8, &w);
        assert_relative_eq!(r.l_total, r.l_ph, epsilon = 1e-15);
        let d = LossWeights::default();
        assert_eq!((d.lambda1, d.lambda2, d.lambda3), (0.85, 0.1, 0.05));
        let r = total_loss(&t, 0.9, 0.8, &d);
        assert_relative_eq!(r.l_total, 0.85 * 0.3 + 0.1 * 0.9 + 0.05 * 0.8, epsilon = 1e-12);
        assert_eq!(r.valid_pixel_count, 22);
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        let bad = LossWeights { lambda1: 0.9, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn losses_nonnegative_and_bounded(seed in 0u64..300) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = rand_image(&mut rng, 8, 8);
            let b = rand_image(&mut rng, 8, 8);
            let m = rand_mask(&mut rng, 8, 8, 0.7);
            let s = rand_mask(&mut rng, 8, 8, 0.9);
            let w = LossWeights::default();
            let p = photometric_loss(&a, &b, &m, &s, &w);
            prop_assert!(p.color >= 0.0 && p.color.is_finite());
            prop_assert!(p.structural >= 0.0 && p.structural <= 0.5 * w.tukey_c.powi(2) / 6.0 + 1e-12);
            let k = Intrinsics::from_fov(8, 8, 0.5).unwrap();
            let mut d = DepthMap::zeros(8, 8);
            for v in d.data.iter_mut() { *v = if rng.gen_bool(0.8) { rng.gen_range(0.5..3.0) } else { 0.0 }; }
            let sl = surface_loss(&d, &k, &Mask::from_depth(&d)).value;
            prop_assert!((-1e-12..=1.0 + 1e-12).contains(&sl));
        }
    }
}
