//! Differentiable forward splatting.
//!
//! Every valid source pixel is reprojected into the target view and its
//! color, weighted by the pixel confidence and a bilinear kernel, is
//! scattered onto the four integer neighbors of the landing position. The
//! same weights are accumulated into a weight map, and the target image is
//! the weighted average `color_accum / (weight_accum + eps)`.
//!
//! The forward pass records one [`Contribution`] per splatted pixel so that
//! [`splat_backward`] can route gradients to source colors and depths:
//! through the bilinear weights' dependence on the landing position, the
//! landing position's dependence on depth, and the depth confidence.

use nalgebra::{Vector2, Vector3};

use crate::error::{Error, Result};
use crate::frame::{ColorImage, Mask};
use crate::geometry::{
    depth_confidence, radial_confidence, CameraView, ConfidenceParams, DepthMap, Intrinsics, Pose,
};

/// Normalization stabilizer for double-precision buffers.
pub const DEFAULT_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplatOptions {
    pub confidence: ConfidenceParams,
    pub epsilon: f64,
    /// Diagnostic z-test: drop contributions landing more than this many
    /// meters behind the nearest one on the same target pixel. Not
    /// differentiable; off by default.
    pub zbuffer_tolerance: Option<f64>,
    /// Keep per-contribution state for [`splat_backward`].
    pub retain_state: bool,
}

impl Default for SplatOptions {
    fn default() -> Self {
        Self {
            confidence: ConfidenceParams::default(),
            epsilon: DEFAULT_EPSILON,
            zbuffer_tolerance: None,
            retain_state: true,
        }
    }
}

/// A view contributing color to the target.
#[derive(Debug, Clone, Copy)]
pub struct SplatSource<'a> {
    pub color: &'a ColorImage,
    pub depth: &'a DepthMap,
    pub view: &'a CameraView,
}

/// One splatted source pixel.
#[derive(Debug, Clone, Copy)]
pub struct Contribution {
    pub source: usize,
    pub pixel: usize,
    pub landing: Vector2<f64>,
    pub landing_depth: f64,
    /// Pixel confidence `w_c = w_d · w_r`.
    pub confidence: f64,
}

/// Accumulated (unnormalized) color and weight of a target view.
#[derive(Debug, Clone)]
pub struct SplatBuffer {
    pub width: usize,
    pub height: usize,
    pub color_accum: Vec<[f64; 3]>,
    pub weight_accum: Vec<f64>,
    pub epsilon: f64,
    contributions: Option<Vec<Contribution>>,
}

impl SplatBuffer {
    pub fn new(width: usize, height: usize, epsilon: f64) -> Self {
        Self {
            width,
            height,
            color_accum: vec![[0.0; 3]; width * height],
            weight_accum: vec![0.0; width * height],
            epsilon,
            contributions: None,
        }
    }

    pub fn for_view(view: &CameraView, epsilon: f64) -> Self {
        Self::new(view.intrinsics.width, view.intrinsics.height, epsilon)
    }

    pub fn contributions(&self) -> Option<&[Contribution]> {
        self.contributions.as_deref()
    }

    /// `Î = color_accum ⊘ (weight_accum ⊕ ε)`.
    pub fn normalized(&self) -> ColorImage {
        let data = self
            .color_accum
            .iter()
            .zip(&self.weight_accum)
            .map(|(c, &w)| {
                let s = 1.0 / (w + self.epsilon);
                [c[0] * s, c[1] * s, c[2] * s]
            })
            .collect();
        ColorImage {
            width: self.width,
            height: self.height,
            data,
        }
    }

    /// Pixels that received any splatted weight.
    pub fn coverage(&self) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            data: self.weight_accum.iter().map(|&w| w > 0.0).collect(),
        }
    }
}

/// Bilinear taps `(index, weight, d weight/du, d weight/dv)` of a landing
/// position, with taps outside the image dropped.
#[inline]
fn bilinear_taps(landing: Vector2<f64>, width: usize, height: usize) -> [(Option<usize>, f64, f64, f64); 4] {
    let x0 = landing.x.floor();
    let y0 = landing.y.floor();
    let ax = landing.x - x0;
    let ay = landing.y - y0;
    let idx = |dx: f64, dy: f64| -> Option<usize> {
        let x = x0 + dx;
        let y = y0 + dy;
        if x >= 0.0 && y >= 0.0 && x < width as f64 && y < height as f64 {
            Some(y as usize * width + x as usize)
        } else {
            None
        }
    };
    [
        (idx(0.0, 0.0), (1.0 - ax) * (1.0 - ay), -(1.0 - ay), -(1.0 - ax)),
        (idx(1.0, 0.0), ax * (1.0 - ay), 1.0 - ay, -ax),
        (idx(0.0, 1.0), (1.0 - ax) * ay, -ay, 1.0 - ax),
        (idx(1.0, 1.0), ax * ay, ay, ax),
    ]
}

struct Landing {
    landing: Vector2<f64>,
    point: Vector3<f64>,
}

#[inline]
fn land(
    pixel: Vector2<f64>,
    depth: f64,
    intr_s: &Intrinsics,
    rel: &Pose,
    intr_t: &Intrinsics,
) -> Option<Landing> {
    let point = rel.apply(&(intr_s.ray(pixel) * depth));
    if !(point.z > 0.0) {
        return None;
    }
    Some(Landing {
        landing: Vector2::new(
            intr_t.fx * point.x / point.z + intr_t.cx,
            intr_t.fy * point.y / point.z + intr_t.cy,
        ),
        point,
    })
}

fn check_dims(src: &SplatSource<'_>) -> Result<()> {
    let intr = &src.view.intrinsics;
    if src.color.width != src.depth.width
        || src.color.height != src.depth.height
        || src.depth.width != intr.width
        || src.depth.height != intr.height
    {
        return Err(Error::Config(format!(
            "source view {}: color {}x{}, depth {}x{}, intrinsics {}x{} disagree",
            src.view.id,
            src.color.width,
            src.color.height,
            src.depth.width,
            src.depth.height,
            intr.width,
            intr.height
        )));
    }
    Ok(())
}

/// Splat one source view into `buf`. `source_index` tags the recorded
/// contributions.
pub fn splat_one(
    src: &SplatSource<'_>,
    source_index: usize,
    target: &CameraView,
    buf: &mut SplatBuffer,
    opts: &SplatOptions,
) -> Result<()> {
    check_dims(src)?;
    let intr_t = &target.intrinsics;
    if buf.width != intr_t.width || buf.height != intr_t.height {
        return Err(Error::Config(format!(
            "splat buffer {}x{} does not match target view {}x{}",
            buf.width, buf.height, intr_t.width, intr_t.height
        )));
    }
    let intr_s = &src.view.intrinsics;
    let rel = src.view.relative_to(target);
    let w = src.depth.width;
    if opts.retain_state && buf.contributions.is_none() {
        buf.contributions = Some(Vec::new());
    }
    for (i, &d) in src.depth.data.iter().enumerate() {
        if !(d > 0.0) {
            continue;
        }
        let pixel = Vector2::new((i % w) as f64, (i / w) as f64);
        let Some(l) = land(pixel, d, intr_s, &rel, intr_t) else {
            continue;
        };
        let wr = if opts.confidence.radial {
            radial_confidence(pixel, intr_s)
        } else {
            1.0
        };
        let wc = depth_confidence(d, &opts.confidence) * wr;
        let c = src.color.data[i];
        let mut any = false;
        for (tap, wb, _, _) in bilinear_taps(l.landing, buf.width, buf.height) {
            if let Some(q) = tap {
                let wgt = wc * wb;
                let acc = &mut buf.color_accum[q];
                acc[0] += wgt * c[0];
                acc[1] += wgt * c[1];
                acc[2] += wgt * c[2];
                buf.weight_accum[q] += wgt;
                any = true;
            }
        }
        if any {
            if let Some(list) = buf.contributions.as_mut() {
                list.push(Contribution {
                    source: source_index,
                    pixel: i,
                    landing: l.landing,
                    landing_depth: l.point.z,
                    confidence: wc,
                });
            }
        }
    }
    Ok(())
}

/// Normalized synthesized view with its weight map and coverage mask.
#[derive(Debug, Clone)]
pub struct Splatted {
    pub image: ColorImage,
    pub weights: Vec<f64>,
    pub mask: Mask,
    pub epsilon: f64,
    contributions: Option<Vec<Contribution>>,
    confidence: ConfidenceParams,
}

impl Splatted {
    pub fn contributions(&self) -> Option<&[Contribution]> {
        self.contributions.as_deref()
    }

    /// Drops the retained forward state.
    pub fn discard_state(&mut self) {
        self.contributions = None;
    }
}

fn apply_zbuffer(
    sources: &[SplatSource<'_>],
    target: &CameraView,
    opts: &SplatOptions,
    tolerance: f64,
) -> Result<SplatBuffer> {
    // Pass 1: nearest landing depth per target pixel.
    let intr_t = &target.intrinsics;
    let (tw, th) = (intr_t.width, intr_t.height);
    let mut nearest = vec![f64::INFINITY; tw * th];
    let mut probe = SplatBuffer::new(tw, th, opts.epsilon);
    let probe_opts = SplatOptions {
        retain_state: true,
        ..*opts
    };
    for (s, src) in sources.iter().enumerate() {
        splat_one(src, s, target, &mut probe, &probe_opts)?;
    }
    let contribs = probe.contributions.take().unwrap_or_default();
    for c in &contribs {
        for (tap, _, _, _) in bilinear_taps(c.landing, tw, th) {
            if let Some(q) = tap {
                nearest[q] = nearest[q].min(c.landing_depth);
            }
        }
    }
    // Pass 2: re-accumulate only visible taps.
    let mut buf = SplatBuffer::new(tw, th, opts.epsilon);
    for c in &contribs {
        let col = sources[c.source].color.data[c.pixel];
        for (tap, wb, _, _) in bilinear_taps(c.landing, tw, th) {
            if let Some(q) = tap {
                if c.landing_depth > nearest[q] + tolerance {
                    continue;
                }
                let wgt = c.confidence * wb;
                for k in 0..3 {
                    buf.color_accum[q][k] += wgt * col[k];
                }
                buf.weight_accum[q] += wgt;
            }
        }
    }
    Ok(buf)
}

/// Splat all sources into a zero-initialized buffer for `target` and
/// normalize.
pub fn splat_many(
    sources: &[SplatSource<'_>],
    target: &CameraView,
    opts: &SplatOptions,
) -> Result<Splatted> {
    if sources.is_empty() {
        return Err(Error::Config("splatting needs at least one source view".into()));
    }
    if sources.iter().any(|s| s.view.id == target.id) {
        return Err(Error::Config(format!(
            "target view {} is also listed as a source",
            target.id
        )));
    }
    if !(opts.epsilon > 0.0) {
        return Err(Error::Config("epsilon must be positive".into()));
    }
    let buf = if let Some(tol) = opts.zbuffer_tolerance {
        apply_zbuffer(sources, target, opts, tol)?
    } else {
        let mut buf = SplatBuffer::for_view(target, opts.epsilon);
        for (s, src) in sources.iter().enumerate() {
            splat_one(src, s, target, &mut buf, opts)?;
        }
        buf
    };
    Ok(Splatted {
        image: buf.normalized(),
        mask: buf.coverage(),
        weights: buf.weight_accum,
        epsilon: buf.epsilon,
        contributions: buf.contributions,
        confidence: opts.confidence,
    })
}

/// Gradients of a scalar loss with respect to one source view.
#[derive(Debug, Clone, PartialEq)]
pub struct SplatGradients {
    pub d_depth: Vec<f64>,
    pub d_color: Vec<[f64; 3]>,
}

/// Back-propagate `upstream = dL/dÎ` (one RGB triple per target pixel)
/// to every source depth and color.
pub fn splat_backward(
    sources: &[SplatSource<'_>],
    target: &CameraView,
    splatted: &Splatted,
    upstream: &[[f64; 3]],
) -> Result<Vec<SplatGradients>> {
    let contribs = splatted.contributions.as_ref().ok_or_else(|| {
        Error::Usage("splat_backward needs the retained forward state".into())
    })?;
    let intr_t = &target.intrinsics;
    let (tw, th) = (intr_t.width, intr_t.height);
    if upstream.len() != tw * th {
        return Err(Error::Config(format!(
            "upstream gradient has {} pixels, expected {}",
            upstream.len(),
            tw * th
        )));
    }
    // dL/dA (per channel) and dL/dW at every target pixel.
    let mut g_acc = vec![[0.0; 3]; tw * th];
    let mut g_w = vec![0.0; tw * th];
    for q in 0..tw * th {
        let inv = 1.0 / (splatted.weights[q] + splatted.epsilon);
        let g = upstream[q];
        let img = splatted.image.data[q];
        g_acc[q] = [g[0] * inv, g[1] * inv, g[2] * inv];
        g_w[q] = -(g[0] * img[0] + g[1] * img[1] + g[2] * img[2]) * inv;
    }

    let mut grads: Vec<SplatGradients> = sources
        .iter()
        .map(|s| SplatGradients {
            d_depth: vec![0.0; s.depth.data.len()],
            d_color: vec![[0.0; 3]; s.color.data.len()],
        })
        .collect();
    let rels: Vec<Pose> = sources.iter().map(|s| s.view.relative_to(target)).collect();
    let sigma = splatted.confidence.sigma_d;

    for c in contribs {
        let src = &sources[c.source];
        let intr_s = &src.view.intrinsics;
        let w = src.depth.width;
        let pixel = Vector2::new((c.pixel % w) as f64, (c.pixel / w) as f64);
        let col = src.color.data[c.pixel];
        let ray_t = rels[c.source].rotation * intr_s.ray(pixel);
        let d = src.depth.data[c.pixel];
        let p = rels[c.source].apply(&(intr_s.ray(pixel) * d));
        // d landing / d depth
        let du = intr_t.fx * (ray_t.x * p.z - p.x * ray_t.z) / (p.z * p.z);
        let dv = intr_t.fy * (ray_t.y * p.z - p.y * ray_t.z) / (p.z * p.z);
        let dwc = -c.confidence / sigma;

        let mut g_depth = 0.0;
        let g_col = &mut grads[c.source].d_color[c.pixel];
        for (tap, wb, dwb_du, dwb_dv) in bilinear_taps(c.landing, tw, th) {
            let Some(q) = tap else { continue };
            let ga = g_acc[q];
            let wgt = c.confidence * wb;
            g_col[0] += wgt * ga[0];
            g_col[1] += wgt * ga[1];
            g_col[2] += wgt * ga[2];
            // dL / d(w_c · w_b) at this tap
            let e = ga[0] * col[0] + ga[1] * col[1] + ga[2] * col[2] + g_w[q];
            g_depth += e * (dwc * wb + c.confidence * (dwb_du * du + dwb_dv * dv));
        }
        grads[c.source].d_depth[c.pixel] += g_depth;
    }
    Ok(grads)
}

/// Peak signal-to-noise ratio in dB between two images over `mask`, for
/// colors in `[0, 1]`.
pub fn psnr(a: &ColorImage, b: &ColorImage, mask: &Mask) -> f64 {
    let mut se = 0.0;
    let mut n = 0usize;
    for i in 0..a.data.len() {
        if !mask.data[i] {
            continue;
        }
        for k in 0..3 {
            let e = a.data[i][k] - b.data[i][k];
            se += e * e;
        }
        n += 3;
    }
    if n == 0 {
        return f64::NAN;
    }
    let mse = se / n as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Intrinsics;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn intr(w: usize, h: usize) -> Intrinsics {
        Intrinsics::from_fov(w, h, 0.5).unwrap()
    }

    fn cam(id: usize, intr: Intrinsics, pose: Pose) -> CameraView {
        CameraView {
            id,
            intrinsics: intr,
            pose,
        }
    }

    #[test]
    fn single_pixel_on_integer_landing() {
        let k = intr(32, 32);
        let src = cam(0, k, Pose::identity());
        let tgt = cam(1, k, Pose::identity());
        let mut depth = DepthMap::zeros(32, 32);
        depth.set(10, 20, 1.7);
        let color = ColorImage::filled(32, 32, [0.2, 0.5, 0.9]);
        let out = splat_many(
            &[SplatSource { color: &color, depth: &depth, view: &src }],
            &tgt,
            &SplatOptions::default(),
        )
        .unwrap();
        assert_eq!(out.mask.count(), 1);
        let q = 20 * 32 + 10;
        let c = out.image.data[q];
        for k in 0..3 {
            assert_relative_eq!(c[k], [0.2, 0.5, 0.9][k], max_relative = 1e-6);
        }
    }

    #[test]
    fn half_pixel_landing_splits_weight() {
        // shift the target so pixel (10, 20) lands at (10.5, 20)
        let k = intr(32, 32);
        let d = 2.0;
        let dx = 0.5 / k.fx * d;
        let src = cam(0, k, Pose::identity());
        let tgt = cam(1, k, Pose::from_translation(Vector3::new(-dx, 0.0, 0.0)));
        let mut depth = DepthMap::zeros(32, 32);
        depth.set(10, 20, d);
        let color = ColorImage::filled(32, 32, [1.0, 1.0, 1.0]);
        let opts = SplatOptions::default();
        let mut buf = SplatBuffer::for_view(&tgt, opts.epsilon);
        splat_one(&SplatSource { color: &color, depth: &depth, view: &src }, 0, &tgt, &mut buf, &opts).unwrap();
        let wc = crate::geometry::pixel_confidence(Vector2::new(10.0, 20.0), d, &k, &opts.confidence);
        assert_relative_eq!(buf.weight_accum[20 * 32 + 10], 0.5 * wc, epsilon = 1e-9);
        assert_relative_eq!(buf.weight_accum[20 * 32 + 11], 0.5 * wc, epsilon = 1e-9);
        let total: f64 = buf.weight_accum.iter().sum();
        assert_relative_eq!(total, wc, epsilon = 1e-9);
    }

    #[test]
    fn two_sources_weighted_average() {
        let k = intr(16, 16);
        let tgt = cam(9, k, Pose::identity());
        let s1 = cam(1, k, Pose::identity());
        let s2 = cam(2, k, Pose::identity());
        let mut d1 = DepthMap::zeros(16, 16);
        d1.set(5, 5, 1.0);
        let mut d2 = DepthMap::zeros(16, 16);
        d2.set(5, 5, 2.5);
        let c1 = ColorImage::filled(16, 16, [0.9, 0.1, 0.4]);
        let c2 = ColorImage::filled(16, 16, [0.1, 0.8, 0.2]);
        let opts = SplatOptions::default();
        let out = splat_many(
            &[
                SplatSource { color: &c1, depth: &d1, view: &s1 },
                SplatSource { color: &c2, depth: &d2, view: &s2 },
            ],
            &tgt,
            &opts,
        )
        .unwrap();
        let px = Vector2::new(5.0, 5.0);
        let w1 = crate::geometry::pixel_confidence(px, 1.0, &k, &opts.confidence);
        let w2 = crate::geometry::pixel_confidence(px, 2.5, &k, &opts.confidence);
        let got = out.image.get(5, 5);
        for ch in 0..3 {
            let want = (w1 * c1.data[0][ch] + w2 * c2.data[0][ch]) / (w1 + w2 + opts.epsilon);
            assert_relative_eq!(got[ch], want, epsilon = 1e-12);
        }
    }

    #[test]
    fn empty_source_list_and_target_in_sources() {
        let k = intr(8, 8);
        let t = cam(0, k, Pose::identity());
        assert!(matches!(splat_many(&[], &t, &SplatOptions::default()), Err(Error::Config(_))));
        let d = DepthMap::filled(8, 8, 1.0);
        let c = ColorImage::zeros(8, 8);
        let r = splat_many(&[SplatSource { color: &c, depth: &d, view: &t }], &t, &SplatOptions::default());
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn dimension_mismatch_is_config_error() {
        let k = intr(8, 8);
        let t = cam(0, k, Pose::identity());
        let s = cam(1, k, Pose::identity());
        let d = DepthMap::filled(8, 8, 1.0);
        let c = ColorImage::zeros(7, 8);
        let r = splat_many(&[SplatSource { color: &c, depth: &d, view: &s }], &t, &SplatOptions::default());
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn no_valid_depth_gives_empty_output() {
        let k = intr(8, 8);
        let t = cam(0, k, Pose::identity());
        let s = cam(1, k, Pose::identity());
        let d = DepthMap::zeros(8, 8);
        let c = ColorImage::filled(8, 8, [1.0, 0.0, 0.0]);
        let out = splat_many(&[SplatSource { color: &c, depth: &d, view: &s }], &t, &SplatOptions::default()).unwrap();
        assert_eq!(out.mask.count(), 0);
        assert!(out.image.data.iter().all(|c| *c == [0.0; 3]));
    }

    #[test]
    fn backward_without_state_is_usage_error() {
        let k = intr(8, 8);
        let t = cam(0, k, Pose::identity());
        let s = cam(1, k, Pose::identity());
        let d = DepthMap::filled(8, 8, 1.0);
        let c = ColorImage::zeros(8, 8);
        let srcs = [SplatSource { color: &c, depth: &d, view: &s }];
        let mut out = splat_many(&srcs, &t, &SplatOptions::default()).unwrap();
        out.discard_state();
        let up = vec![[0.0; 3]; 64];
        assert!(matches!(splat_backward(&srcs, &t, &out, &up), Err(Error::Usage(_))));
    }

    #[test]
    fn color_gradient_is_one_for_single_integer_contributor() {
        let k = intr(8, 8);
        let t = cam(0, k, Pose::identity());
        let s = cam(1, k, Pose::identity());
        let mut d = DepthMap::zeros(8, 8);
        d.set(3, 4, 1.0);
        let c = ColorImage::filled(8, 8, [0.3, 0.3, 0.3]);
        let srcs = [SplatSource { color: &c, depth: &d, view: &s }];
        let out = splat_many(&srcs, &t, &SplatOptions::default()).unwrap();
        let mut up = vec![[0.0; 3]; 64];
        up[4 * 8 + 3] = [1.0, 0.0, 0.0];
        let g = splat_backward(&srcs, &t, &out, &up).unwrap();
        assert_relative_eq!(g[0].d_color[4 * 8 + 3][0], 1.0, max_relative = 1e-6);
        assert_eq!(g[0].d_color[4 * 8 + 3][1], 0.0);
    }

    #[test]
    fn zbuffer_mode_keeps_front_surface() {
        let k = intr(8, 8);
        let t = cam(0, k, Pose::identity());
        let s1 = cam(1, k, Pose::identity());
        let s2 = cam(2, k, Pose::identity());
        let near = DepthMap::filled(8, 8, 1.0);
        let far = DepthMap::filled(8, 8, 2.5);
        let red = ColorImage::filled(8, 8, [1.0, 0.0, 0.0]);
        let blue = ColorImage::filled(8, 8, [0.0, 0.0, 1.0]);
        let srcs = [
            SplatSource { color: &red, depth: &near, view: &s1 },
            SplatSource { color: &blue, depth: &far, view: &s2 },
        ];
        let opts = SplatOptions { zbuffer_tolerance: Some(0.1), ..Default::default() };
        let out = splat_many(&srcs, &t, &opts).unwrap();
        let c = out.image.get(4, 4);
        assert!(c[0] > 0.99 && c[2] < 1e-9);
        let blended = splat_many(&srcs, &t, &SplatOptions::default()).unwrap();
        assert!(blended.image.get(4, 4)[2] > 0.1);
    }

    /// Random two-view scene for gradient and invariant checks.
    fn random_scene(seed: u64, n: usize) -> (Vec<DepthMap>, Vec<ColorImage>, Vec<CameraView>, CameraView) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = Intrinsics::from_fov(n, n, 0.6).unwrap();
        let target = cam(0, k, Pose::identity());
        let views = vec![
            cam(1, k, Pose::from_axis_angle(Vector3::new(0.0, 1.0, 0.0), 0.05, Vector3::new(-0.1, 0.02, 0.0))),
            cam(2, k, Pose::from_axis_angle(Vector3::new(1.0, 0.0, 0.0), -0.04, Vector3::new(0.08, -0.05, 0.03))),
        ];
        let mut depths = Vec::new();
        let mut colors = Vec::new();
        for _ in 0..2 {
            let mut d = DepthMap::zeros(n, n);
            let mut c = ColorImage::zeros(n, n);
            for i in 0..n * n {
                if rng.gen_bool(0.85) {
                    d.data[i] = rng.gen_range(1.0..1.5);
                }
                c.data[i] = [rng.gen(), rng.gen(), rng.gen()];
            }
            depths.push(d);
            colors.push(c);
        }
        (depths, colors, views, target)
    }

    #[test]
    fn backward_matches_finite_differences() {
        let n = 8;
        let (depths, colors, views, target) = random_scene(11, n);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let weights: Vec<[f64; 3]> = (0..n * n).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect();
        let opts = SplatOptions::default();
        let objective = |depths: &[DepthMap], colors: &[ColorImage]| -> f64 {
            let srcs: Vec<_> = (0..2).map(|s| SplatSource { color: &colors[s], depth: &depths[s], view: &views[s] }).collect();
            let out = splat_many(&srcs, &target, &opts).unwrap();
            out.image.data.iter().zip(&weights).map(|(c, w)| c[0] * w[0] + c[1] * w[1] + c[2] * w[2]).sum()
        };
        let srcs: Vec<_> = (0..2).map(|s| SplatSource { color: &colors[s], depth: &depths[s], view: &views[s] }).collect();
        let out = splat_many(&srcs, &target, &opts).unwrap();
        let grads = splat_backward(&srcs, &target, &out, &weights).unwrap();
        let h = 1e-5;
        let mut checked = 0;
        for s in 0..2 {
            for i in 0..n * n {
                if depths[s].data[i] == 0.0 {
                    assert_eq!(grads[s].d_depth[i], 0.0);
                    continue;
                }
                let mut p = depths.clone();
                p[s].data[i] += h;
                let mut m = depths.clone();
                m[s].data[i] -= h;
                let fd = (objective(&p, &colors) - objective(&m, &colors)) / (2.0 * h);
                let an = grads[s].d_depth[i];
                if an != 0.0 || fd.abs() > 1e-9 {
                    assert!((fd - an).abs() <= 1e-4 * an.abs().max(fd.abs()).max(1e-3), "depth {s}/{i}: fd {fd} an {an}");
                    checked += 1;
                }
                for ch in 0..3 {
                    let mut p = colors.clone();
                    p[s].data[i][ch] += h;
                    let mut m = colors.clone();
                    m[s].data[i][ch] -= h;
                    let fd = (objective(&depths, &p) - objective(&depths, &m)) / (2.0 * h);
                    let an = grads[s].d_color[i][ch];
                    assert!((fd - an).abs() <= 1e-4 * an.abs().max(fd.abs()).max(1e-3), "color {s}/{i}/{ch}");
                }
            }
        }
        assert!(checked > 20);
    }

    proptest! {
        #[test]
        fn output_is_convex_combination_and_weight_conserved(seed in 0u64..500) {
            let n = 10;
            let (depths, colors, views, target) = random_scene(seed, n);
            let opts = SplatOptions::default();
            let srcs: Vec<_> = (0..2).map(|s| SplatSource { color: &colors[s], depth: &depths[s], view: &views[s] }).collect();
            let out = splat_many(&srcs, &target, &opts).unwrap();
            let (mut lo, mut hi) = ([f64::INFINITY; 3], [f64::NEG_INFINITY; 3]);
            for s in 0..2 {
                for i in 0..n * n {
                    if depths[s].data[i] > 0.0 {
                        for ch in 0..3 {
                            lo[ch] = lo[ch].min(colors[s].data[i][ch]);
                            hi[ch] = hi[ch].max(colors[s].data[i][ch]);
                        }
                    }
                }
            }
            for (i, c) in out.image.data.iter().enumerate() {
                if !out.mask.data[i] { continue; }
                let shrink = out.weights[i] / (out.weights[i] + opts.epsilon);
                for ch in 0..3 {
                    prop_assert!(c[ch] <= hi[ch] + 1e-12);
                    prop_assert!(c[ch] >= lo[ch] * shrink - 1e-12);
                }
            }
            // in-bounds bilinear mass times confidence
            let mut expected = 0.0;
            for c in out.contributions().unwrap() {
                for (tap, wb, _, _) in bilinear_taps(c.landing, n, n) {
                    if tap.is_some() { expected += c.confidence * wb; }
                }
            }
            let total: f64 = out.weights.iter().sum();
            prop_assert!((total - expected).abs() < 1e-9 * expected.max(1.0));
            // determinism
            let again = splat_many(&srcs, &target, &opts).unwrap();
            prop_assert_eq!(&again.weights, &out.weights);
        }
    }
}
