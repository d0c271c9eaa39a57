//! Central finite-difference checks of every analytic gradient, in double
//! precision. Used by the `gradcheck` command and the test suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataio::{synthesize_sample, DatasetSpec, Rig};
use crate::frame::{ColorImage, Mask};
use crate::geometry::{DepthMap, Intrinsics};
use crate::losses::{
    berhu_depth_loss, berhu_depth_loss_with_border, color_loss, photometric_loss, structural_loss, surface_loss,
    DepthPair, LossWeights,
};
use crate::model::{Model, ModelConfig};
use crate::nn::{Graph, NodeId, ParamId, ParamStore, PartialConv, Tensor};
use crate::splat::{splat_backward, splat_many, SplatOptions, SplatSource};
use crate::trainer::{batch_gradients, Mode, TrainConfig};

/// Finite-difference step.
pub const STEP: f64 = 1e-5;
/// Per-element tolerance for single operators.
pub const ELEMENT_TOLERANCE: f64 = 1e-4;
/// Tolerance for whole-network checks.
pub const END_TO_END_TOLERANCE: f64 = 1e-3;
/// Gradients smaller than this are compared in absolute terms.
const FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub module: &'static str,
    pub name: String,
    pub elements: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Compares `analytic[i]` with the central difference of `f(i, ±STEP)` for
/// every `i` in `indices`.
fn compare(
    module: &'static str,
    name: impl Into<String>,
    tolerance: f64,
    analytic: &[f64],
    indices: impl IntoIterator<Item = usize>,
    mut f: impl FnMut(usize, f64) -> f64,
) -> CheckResult {
    let mut worst = 0.0f64;
    let mut elements = 0;
    for i in indices {
        let numeric = (f(i, STEP) - f(i, -STEP)) / (2.0 * STEP);
        worst = worst.max(relative_error(analytic[i], numeric));
        elements += 1;
    }
    CheckResult {
        module,
        name: name.into(),
        elements,
        max_rel_err: worst,
        tolerance,
    }
}

fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> ColorImage {
    let mut img = ColorImage::zeros(w, h);
    for c in img.data.iter_mut() {
        *c = [rng.gen(), rng.gen(), rng.gen()];
    }
    img
}

fn random_mask(rng: &mut ChaCha8Rng, w: usize, h: usize, p: f64) -> Mask {
    let mut m = Mask::new(w, h, true);
    for v in m.data.iter_mut() {
        *v = rng.gen_bool(p);
    }
    m
}

fn flat(img: &ColorImage) -> Vec<f64> {
    img.data.iter().flatten().copied().collect()
}

fn nudge(img: &ColorImage, i: usize, d: f64) -> ColorImage {
    let mut out = img.clone();
    out.data[i / 3][i % 3] += d;
    out
}

/// Splatting: gradients of `Σ r ⊙ Î` with respect to source depths and
/// colors.
pub fn check_splat() -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (w, h) = (8, 8);
    let rig = Rig::cross(w, h, 0.45, 1.6).expect("valid rig");
    let depths: Vec<DepthMap> = (0..2)
        .map(|_| {
            let mut d = DepthMap::zeros(w, h);
            for v in d.data.iter_mut() {
                *v = if rng.gen_bool(0.85) { rng.gen_range(1.4..1.8) } else { 0.0 };
            }
            d
        })
        .collect();
    let colors: Vec<ColorImage> = (0..2).map(|_| random_image(&mut rng, w, h)).collect();
    let r: Vec<[f64; 3]> = (0..w * h).map(|_| [rng.gen_range(-1.0..1.0), rng.gen(), rng.gen()]).collect();
    let target = &rig.views[0];
    let opts = SplatOptions::default();
    let value = |depths: &[DepthMap], colors: &[ColorImage]| {
        let sources: Vec<_> = (0..2)
            .map(|s| SplatSource { color: &colors[s], depth: &depths[s], view: &rig.views[s + 1] })
            .collect();
        let out = splat_many(&sources, target, &SplatOptions { retain_state: false, ..opts }).expect("splat");
        out.image.data.iter().zip(&r).map(|(c, g)| c[0] * g[0] + c[1] * g[1] + c[2] * g[2]).sum::<f64>()
    };
    let sources: Vec<_> = (0..2)
        .map(|s| SplatSource { color: &colors[s], depth: &depths[s], view: &rig.views[s + 1] })
        .collect();
    let out = splat_many(&sources, target, &opts).expect("splat");
    let grads = splat_backward(&sources, target, &out, &r).expect("backward");
    let mut results = Vec::new();
    for s in 0..2 {
        let valid: Vec<usize> = (0..w * h).filter(|&i| depths[s].data[i] > 0.0).collect();
        results.push(compare("splat", format!("splat_many d/depth[{s}]"), ELEMENT_TOLERANCE, &grads[s].d_depth, valid, |i, d| {
            let mut ds = depths.clone();
            ds[s].data[i] += d;
            value(&ds, &colors)
        }));
        let an: Vec<f64> = grads[s].d_color.iter().flatten().copied().collect();
        results.push(compare("splat", format!("splat_many d/color[{s}]"), ELEMENT_TOLERANCE, &an, 0..an.len(), |i, d| {
            let mut cs = colors.clone();
            cs[s] = nudge(&cs[s], i, d);
            value(&depths, &cs)
        }));
    }
    results
}

fn plane_depth(intr: &Intrinsics, rng: &mut ChaCha8Rng, noise: f64) -> DepthMap {
    let (a, b) = (rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2));
    let mut d = DepthMap::zeros(intr.width, intr.height);
    for y in 0..intr.height {
        for x in 0..intr.width {
            let u = (x as f64 - intr.cx) / intr.fx;
            let v = (y as f64 - intr.cy) / intr.fy;
            d.set(x, y, 1.5 / (1.0 - a * u - b * v) + rng.gen_range(-noise..=noise));
        }
    }
    d
}

/// Every training loss against its inputs.
pub fn check_losses() -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (w, h) = (7, 6);
    let target = random_image(&mut rng, w, h);
    let pred = random_image(&mut rng, w, h);
    let valid = random_mask(&mut rng, w, h, 0.8);
    let mut gate = Mask::new(w, h, true);
    gate.data[0] = false;
    let wts = LossWeights::default();
    let an_pred = flat(&pred);
    let n = an_pred.len();
    let mut results = Vec::new();

    let g = flat_grad(&color_loss(&target, &pred, &valid, wts.gamma).grad);
    results.push(compare("losses", "color_loss", ELEMENT_TOLERANCE, &g, 0..n, |i, d| {
        color_loss(&target, &nudge(&pred, i, d), &valid, wts.gamma).value
    }));
    let g = flat_grad(&structural_loss(&target, &pred, &valid, &gate, wts.tukey_c).grad);
    results.push(compare("losses", "structural_loss", ELEMENT_TOLERANCE, &g, 0..n, |i, d| {
        structural_loss(&target, &nudge(&pred, i, d), &valid, &gate, wts.tukey_c).value
    }));
    let g = flat_grad(&photometric_loss(&target, &pred, &valid, &gate, &wts).loss.grad);
    results.push(compare("losses", "photometric_loss", ELEMENT_TOLERANCE, &g, 0..n, |i, d| {
        photometric_loss(&target, &nudge(&pred, i, d), &valid, &gate, &wts).loss.value
    }));

    let intr = Intrinsics::from_fov(w, h, 0.5).expect("intrinsics");
    let measured: Vec<DepthMap> = (0..2).map(|_| plane_depth(&intr, &mut rng, 0.05)).collect();
    let predicted: Vec<DepthMap> = (0..2).map(|_| plane_depth(&intr, &mut rng, 0.05)).collect();
    let masks: Vec<Mask> = (0..2).map(|_| random_mask(&mut rng, w, h, 0.7)).collect();
    let np = w * h;
    let berhu_value = |pred: &[DepthMap], fixed: Option<f64>| {
        let pairs: Vec<_> = (0..2)
            .map(|b| DepthPair { measured: &measured[b], predicted: &pred[b], mask: &masks[b] })
            .collect();
        match fixed {
            Some(c) => berhu_depth_loss_with_border(&pairs, c),
            None => berhu_depth_loss(&pairs, wts.berhu_fraction),
        }
    };
    for (name, fixed) in [("berhu_depth_loss", None), ("berhu_depth_loss_with_border", Some(0.03))] {
        let g: Vec<f64> = berhu_value(&predicted, fixed).grad.concat();
        results.push(compare("losses", name, ELEMENT_TOLERANCE, &g, 0..2 * np, |i, d| {
            let mut p = predicted.clone();
            p[i / np].data[i % np] += d;
            berhu_value(&p, fixed).value
        }));
    }

    let depth = plane_depth(&intr, &mut rng, 0.02);
    let m = random_mask(&mut rng, w, h, 0.9);
    let g = surface_loss(&depth, &intr, &m).grad;
    results.push(compare("losses", "surface_loss", ELEMENT_TOLERANCE, &g, 0..np, |i, d| {
        let mut p = depth.clone();
        p.data[i] += d;
        surface_loss(&p, &intr, &m).value
    }));
    results
}

fn flat_grad(g: &[[f64; 3]]) -> Vec<f64> {
    g.iter().flatten().copied().collect()
}

type Build = dyn Fn(&mut Graph<f64>, &ParamStore<f64>, NodeId) -> NodeId;

fn random_tensor(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape")
}

fn random_mask_tensor(shape: [usize; 4], keep: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| if rng.gen_bool(keep) { 1.0 } else { 0.0 }).collect()).expect("shape")
}

fn graph_value(build: &Build, store: &ParamStore<f64>, x: &Tensor<f64>, mask: &Tensor<f64>, r: &[f64]) -> f64 {
    let mut g = Graph::new();
    let xi = g.masked_input(x.clone(), mask.clone(), false).expect("mask shape");
    let y = build(&mut g, store, xi);
    g.value(y).data().iter().zip(r).map(|(a, b)| a * b).sum()
}

/// Checks input and parameter gradients of `Σ r ⊙ build(x)`.
fn check_graph(name: &str, build: &Build, store: &mut ParamStore<f64>, x: &Tensor<f64>, mask: &Tensor<f64>, rng: &mut ChaCha8Rng) -> Vec<CheckResult> {
    let mut g = Graph::new();
    let xi = g.masked_input(x.clone(), mask.clone(), true).expect("mask shape");
    let y = build(&mut g, store, xi);
    let r: Vec<f64> = (0..g.value(y).numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    store.zero_grad();
    g.backward_with(store, y, Tensor::from_vec(g.value(y).shape(), r.clone()).expect("shape"))
        .expect("backward");
    let dx = g.grad(xi).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
    let mut out = vec![compare("nn", format!("{name} d/input"), ELEMENT_TOLERANCE, dx.data(), 0..x.numel(), |i, d| {
        let mut xp = x.clone();
        xp.data_mut()[i] += d;
        graph_value(build, store, &xp, mask, &r)
    })];
    let grads: Vec<(String, Tensor<f64>)> = store.iter().map(|p| (p.name.clone(), p.grad.clone())).collect();
    for (pi, (pname, grad)) in grads.iter().enumerate() {
        out.push(compare("nn", format!("{name} d/{pname}"), ELEMENT_TOLERANCE, grad.data(), 0..grad.numel(), |i, d| {
            let orig = store.get(ParamId(pi)).value.data()[i];
            store.get_mut(ParamId(pi)).value.data_mut()[i] = orig + d;
            let v = graph_value(build, store, x, mask, &r);
            store.get_mut(ParamId(pi)).value.data_mut()[i] = orig;
            v
        }));
    }
    out
}

fn layer(store: &mut ParamStore<f64>, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize, rng: &mut ChaCha8Rng) -> PartialConv {
    let l = PartialConv::new(store, name, c_in, c_out, k, stride, rng).expect("odd kernel");
    for b in store.get_mut(l.bias).value.data_mut() {
        *b = rng.gen_range(-0.5..0.5);
    }
    l
}

/// Partial convolutions and every elementwise layer.
pub fn check_nn() -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut results = Vec::new();
    for (k, stride) in [(3, 1), (3, 2), (1, 1)] {
        let mut store = ParamStore::new();
        let l = layer(&mut store, "conv", 2, 3, k, stride, &mut rng);
        let x = random_tensor([2, 2, 6, 6], &mut rng);
        let m = random_mask_tensor([2, 1, 6, 6], 0.6, &mut rng);
        let build = move |g: &mut Graph<f64>, s: &ParamStore<f64>, x: NodeId| g.partial_conv(s, x, &l).expect("conv");
        results.extend(check_graph(&format!("partial_conv k{k} s{stride}"), &build, &mut store, &x, &m, &mut rng));
    }
    let mut store = ParamStore::new();
    let a = layer(&mut store, "a", 2, 2, 3, 1, &mut rng);
    let b = layer(&mut store, "b", 2, 3, 3, 2, &mut rng);
    let c = layer(&mut store, "c", 5, 1, 1, 1, &mut rng);
    let x = random_tensor([1, 2, 8, 8], &mut rng);
    let m = random_mask_tensor([1, 1, 8, 8], 0.7, &mut rng);
    let build = move |g: &mut Graph<f64>, s: &ParamStore<f64>, x: NodeId| {
        let h = g.partial_conv(s, x, &a).expect("conv");
        let h = g.elu(h, 1.0);
        let r = g.add(h, x).expect("add");
        let r = g.mul(r, h).expect("mul");
        let r = g.scale(r, 0.7);
        let d = g.partial_conv(s, r, &b).expect("conv");
        let d = g.elu(d, 1.0);
        let u = g.upsample(d, 2);
        let cat = g.concat(u, r).expect("concat");
        g.partial_conv(s, cat, &c).expect("conv")
    };
    results.extend(check_graph("elu/add/mul/scale/upsample/concat", &build, &mut store, &x, &m, &mut rng));
    results
}

/// `count` parameter indices spread over every tensor of `store`.
fn sample_params(store: &ParamStore<f64>, count: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = store.iter().enumerate().map(|(p, t)| (p, rng.gen_range(0..t.value.numel()))).collect();
    let sizes: Vec<usize> = store.iter().map(|p| p.value.numel()).collect();
    while out.len() < count {
        let p = rng.gen_range(0..sizes.len());
        out.push((p, rng.gen_range(0..sizes[p])));
    }
    out
}

fn tiny_model() -> Model<f64> {
    Model::build(&ModelConfig {
        base_channels: 4,
        height: 16,
        width: 16,
        seed: 5,
        ..ModelConfig::default()
    })
    .expect("tiny config")
}

/// The whole network, and the training objective through splatting and
/// every loss, against sampled parameters.
pub fn check_model() -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut model = tiny_model();
    let n = 2 * 16 * 16;
    let x = Tensor::from_vec(
        [2, 1, 16, 16],
        (0..n).map(|_| if rng.gen_bool(0.5) { rng.gen_range(0.5..2.5) } else { 0.0 }).collect(),
    )
    .expect("shape");
    let r: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let value = |model: &Model<f64>| {
        let mut g = Graph::new();
        let nodes = model.forward_graph(&mut g, &x, false).expect("forward");
        g.value(nodes.depth).data().iter().zip(&r).map(|(a, b)| a * b).sum::<f64>()
    };
    let mut g = Graph::new();
    let nodes = model.forward_graph(&mut g, &x, false).expect("forward");
    model.params.zero_grad();
    g.backward_with(&mut model.params, nodes.depth, Tensor::from_vec(x.shape(), r.clone()).expect("shape"))
        .expect("backward");
    let picks = sample_params(&model.params, 200, &mut rng);
    let mut results = vec![param_check("model", "network d/params", &mut model, &picks, value)];

    // Training objective without the depth term, whose border is held
    // constant by the trainer. One sample and one target view keep the
    // splatted points clear of bilinear kinks within a step.
    let spec = DatasetSpec {
        width: 16,
        height: 16,
        supersample: 1,
        ..DatasetSpec::default()
    };
    let rig = spec.rig().expect("rig");
    let samples: Vec<_> = (0..1).map(|s| synthesize_sample(&spec, &rig, 40 + s).expect("sample")).collect();
    let batch: Vec<_> = samples.iter().collect();
    let cfg = TrainConfig { mode: Mode::Pn, ..TrainConfig::default() };
    let w = cfg.effective_weights();
    let opts = cfg.splat_options();
    let targets = [0];
    let mut model = tiny_model();
    model.params.zero_grad();
    batch_gradients(&mut model, &batch, &rig, &w, cfg.mode, &opts, &targets).expect("pass");
    let picks = sample_params(&model.params, 60, &mut rng);
    results.push(param_check("model", "training objective d/params", &mut model, &picks, |m| {
        let mut m = m.clone();
        batch_gradients(&mut m, &batch, &rig, &w, cfg.mode, &opts, &targets).expect("pass").report.l_total
    }));
    results
}

fn param_check(
    module: &'static str,
    name: &str,
    model: &mut Model<f64>,
    picks: &[(usize, usize)],
    value: impl Fn(&Model<f64>) -> f64,
) -> CheckResult {
    let analytic: Vec<f64> = picks.iter().map(|&(p, i)| model.params.get(ParamId(p)).grad.data()[i]).collect();
    compare(module, name, END_TO_END_TOLERANCE, &analytic, 0..picks.len(), |k, d| {
        let (p, i) = picks[k];
        let orig = model.params.get(ParamId(p)).value.data()[i];
        model.params.get_mut(ParamId(p)).value.data_mut()[i] = orig + d;
        let v = value(model);
        model.params.get_mut(ParamId(p)).value.data_mut()[i] = orig;
        v
    })
}

/// Modules accepted by [`run`].
pub const MODULES: [&str; 4] = ["splat", "losses", "nn", "model"];

pub fn run(module: &str) -> Option<Vec<CheckResult>> {
    match module {
        "splat" => Some(check_splat()),
        "losses" => Some(check_losses()),
        "nn" => Some(check_nn()),
        "model" => Some(check_model()),
        "all" => Some(MODULES.iter().flat_map(|m| run(m).unwrap_or_default()).collect()),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_all(results: Vec<CheckResult>) {
        assert!(!results.is_empty());
        for r in results {
            assert!(r.elements > 0, "{}: nothing checked", r.name);
            assert!(r.passed(), "{} {}: {:.3e}", r.module, r.name, r.max_rel_err);
        }
    }

    #[test]
    fn splat_gradients() {
        assert_all(check_splat());
    }

    #[test]
    fn loss_gradients() {
        assert_all(check_losses());
    }

    #[test]
    fn nn_gradients() {
        assert_all(check_nn());
    }

    #[test]
    fn model_gradients() {
        assert_all(check_model());
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.0001) - 1e-4 / 1.0001).abs() < 1e-12);
        assert!(relative_error(1e-9, 2e-9) < 1e-2);
    }
}
