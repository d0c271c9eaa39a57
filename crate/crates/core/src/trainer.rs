//! Self-supervised training loop, inference and the ablation harness.

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::formats::{read_pfm, write_pfm, write_pgm};
use crate::dataio::{Dataset, Rig, Sample};
use crate::error::{Error, Result};
use crate::frame::{ColorImage, Mask};
use crate::geometry::{ConfidenceParams, DepthMap};
use crate::losses::{
    berhu_border, berhu_depth_loss_with_border, photometric_loss, surface_loss, total_loss, DepthPair, LossReport, LossWeights, TargetTerms,
};
use crate::metrics::{EvalReport, Evaluator};
use crate::model::{depth_batch, unbatch, Model, ModelConfig};
use crate::nn::{Adam, AdamConfig, Graph, Real, Tensor};
use crate::splat::{splat_backward, splat_many, SplatOptions, SplatSource};

/// Which loss terms are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    /// Reconstruct the noisy input; nothing is splatted.
    #[serde(rename = "AE")]
    Ae,
    #[serde(rename = "P")]
    P,
    #[serde(rename = "PD")]
    Pd,
    #[serde(rename = "PN")]
    Pn,
    #[serde(rename = "PDN")]
    Pdn,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::Ae, Mode::P, Mode::Pd, Mode::Pn, Mode::Pdn];

    /// Row label of the ablation table.
    pub fn label(self) -> &'static str {
        match self {
            Mode::Ae => "AE",
            Mode::P => "P-only",
            Mode::Pd => "P+D",
            Mode::Pn => "P+N",
            Mode::Pdn => "P+D+N",
        }
    }

    /// Short name used for flags and directories.
    pub fn key(self) -> &'static str {
        match self {
            Mode::Ae => "AE",
            Mode::P => "P",
            Mode::Pd => "PD",
            Mode::Pn => "PN",
            Mode::Pdn => "PDN",
        }
    }

    pub fn photometric(self) -> bool {
        self != Mode::Ae
    }

    /// `base` with inactive terms zeroed and the rest rescaled to sum to 1.
    /// The autoencoder keeps only the depth term.
    pub fn weights(self, base: &LossWeights) -> LossWeights {
        let (l1, l2, l3) = (base.lambda1, base.lambda2, base.lambda3);
        match self {
            Mode::Ae => base.with_lambdas(0.0, 1.0, 0.0),
            Mode::P => base.with_lambdas(1.0, 0.0, 0.0),
            Mode::Pd => base.with_lambdas(l1, l2, 0.0),
            Mode::Pn => base.with_lambdas(l1, 0.0, l3),
            Mode::Pdn => base.with_lambdas(l1, l2, l3),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s.chars().filter(|c| !matches!(c, '+' | '-' | '_')).collect();
        match norm.to_ascii_uppercase().as_str() {
            "AE" => Ok(Mode::Ae),
            "P" | "PONLY" => Ok(Mode::P),
            "PD" => Ok(Mode::Pd),
            "PN" => Ok(Mode::Pn),
            "PDN" => Ok(Mode::Pdn),
            _ => Err(Error::Usage(format!("unknown mode {s:?}; expected AE, P, PD, PN or PDN"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub iterations: usize,
    pub batch_size: usize,
    /// Seeds the weights and the batch order.
    pub seed: u64,
    /// Write a checkpoint every this many iterations; 0 disables.
    pub checkpoint_every: usize,
    pub adam: AdamConfig,
    pub loss: LossWeights,
    pub model: ModelConfig,
    /// Depth scale of the splatting confidence, meters.
    pub sigma_d: f64,
    pub radial_confidence: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let c = ConfidenceParams::default();
        Self {
            mode: Mode::Pdn,
            iterations: 1500,
            batch_size: 2,
            seed: 0,
            checkpoint_every: 0,
            adam: AdamConfig::default(),
            loss: LossWeights::default(),
            model: ModelConfig::default(),
            sigma_d: c.sigma_d,
            radial_confidence: c.radial,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.sigma_d > 0.0) {
            return Err(Error::Config("sigma_d must be positive".into()));
        }
        self.adam.validate()?;
        self.loss.validate()?;
        self.model.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(format!("train config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("train config serializes")
    }

    /// Loss weights after applying the mode.
    pub fn effective_weights(&self) -> LossWeights {
        self.mode.weights(&self.loss)
    }

    pub fn splat_options(&self) -> SplatOptions {
        SplatOptions {
            confidence: ConfidenceParams {
                sigma_d: self.sigma_d,
                radial: self.radial_confidence,
            },
            ..SplatOptions::default()
        }
    }
}

/// Loss values of one pass and the synthesized target images, ordered by
/// sample and then by target.
#[derive(Debug, Clone)]
pub struct BatchPass {
    pub report: LossReport,
    pub synthesized: Vec<ColorImage>,
}

fn mask_of<T: Real>(t: &Tensor<T>) -> Vec<Mask> {
    let [n, _, h, w] = t.shape();
    (0..n)
        .map(|s| Mask {
            width: w,
            height: h,
            data: t.data()[s * h * w..(s + 1) * h * w].iter().map(|&v| v > T::zero()).collect(),
        })
        .collect()
}

/// Runs the network on every view of `batch`, evaluates the loss and adds
/// its gradient to the parameter gradients. Only views listed in `targets`
/// serve as photometric targets; the photometric mean is still taken over
/// all `B·V` targets so passes over disjoint target sets add up.
pub fn batch_gradients<T: Real>(
    model: &mut Model<T>,
    batch: &[&Sample],
    rig: &Rig,
    weights: &LossWeights,
    mode: Mode,
    opts: &SplatOptions,
    targets: &[usize],
) -> Result<BatchPass> {
    let v = rig.len();
    if batch.iter().any(|s| s.frames.len() != v) {
        return Err(Error::Config(format!("every sample must have {v} views to match the rig")));
    }
    let inputs: Vec<&DepthMap> = batch.iter().flat_map(|s| s.frames.iter().map(|f| &f.depth)).collect();
    let tensor = depth_batch::<T>(&inputs)?;
    let mut g = Graph::new();
    let nodes = model.forward_graph(&mut g, &tensor, false)?;
    let out_masks = mask_of(&g.mask(nodes.depth));
    let mut pred = unbatch(g.value(nodes.depth));
    for (p, m) in pred.iter_mut().zip(&out_masks) {
        for (d, &ok) in p.data.iter_mut().zip(&m.data) {
            if !ok {
                *d = 0.0;
            }
        }
    }
    let n = pred.len();
    let npix = tensor.sample_len();
    let mut grad = vec![0.0f64; n * npix];

    let mut terms = Vec::new();
    let mut synthesized = Vec::new();
    if mode.photometric() {
        let scale = weights.lambda1 / n as f64;
        for (b, sample) in batch.iter().enumerate() {
            for &t in targets {
                let others: Vec<usize> = (0..v).filter(|&s| s != t).collect();
                let sources: Vec<SplatSource<'_>> = others
                    .iter()
                    .map(|&s| SplatSource {
                        color: &sample.frames[s].color,
                        depth: &pred[b * v + s],
                        view: &rig.views[s],
                    })
                    .collect();
                let splatted = splat_many(&sources, &rig.views[t], opts)?;
                let frame = &sample.frames[t];
                let target = frame.color.masked(&splatted.mask);
                let ph = photometric_loss(&target, &splatted.image, &frame.mask, &splatted.mask, weights);
                if scale != 0.0 {
                    let upstream: Vec<[f64; 3]> =
                        ph.loss.grad.iter().map(|c| [c[0] * scale, c[1] * scale, c[2] * scale]).collect();
                    let sg = splat_backward(&sources, &rig.views[t], &splatted, &upstream)?;
                    for (&s, gs) in others.iter().zip(&sg) {
                        let off = (b * v + s) * npix;
                        for (acc, d) in grad[off..off + npix].iter_mut().zip(&gs.d_depth) {
                            *acc += d;
                        }
                    }
                }
                terms.push(TargetTerms {
                    l_col: ph.color,
                    l_str: ph.structural,
                    l_ph: ph.loss.value,
                    valid: ph.loss.valid,
                });
                synthesized.push(splatted.image);
            }
        }
    }

    let mut l_depth = 0.0;
    if weights.lambda2 > 0.0 {
        let valid: Vec<Mask> = inputs
            .iter()
            .zip(&out_masks)
            .map(|(d, m)| Mask::from_depth(d).and(m))
            .collect();
        let pairs: Vec<DepthPair<'_>> = (0..n)
            .map(|i| DepthPair {
                measured: inputs[i],
                predicted: &pred[i],
                mask: &valid[i],
            })
            .collect();
        // The border is held fixed; differentiating it rewards a larger
        // worst residual.
        let c = berhu_border(&pairs, weights.berhu_fraction);
        let loss = berhu_depth_loss_with_border(&pairs, c);
        l_depth = loss.value;
        for (i, gi) in loss.grad.iter().enumerate() {
            for (acc, d) in grad[i * npix..(i + 1) * npix].iter_mut().zip(gi) {
                *acc += weights.lambda2 * d;
            }
        }
    }

    let mut l_surface = 0.0;
    if weights.lambda3 > 0.0 {
        let scale = weights.lambda3 / n as f64;
        for i in 0..n {
            let view = &rig.views[i % v];
            let loss = surface_loss(&pred[i], &view.intrinsics, &out_masks[i]);
            l_surface += loss.value / n as f64;
            for (acc, d) in grad[i * npix..(i + 1) * npix].iter_mut().zip(&loss.grad) {
                *acc += scale * d;
            }
        }
    }

    let mut report = total_loss(&terms, l_depth, l_surface, weights);
    // Photometric terms are averaged over every view of the batch.
    if !terms.is_empty() {
        let k = terms.len() as f64 / n as f64;
        report.l_col *= k;
        report.l_str *= k;
        report.l_ph *= k;
        report.l_total = weights.lambda1 * report.l_ph + weights.lambda2 * l_depth + weights.lambda3 * l_surface;
    }
    let upstream = Tensor::from_vec(tensor.shape(), grad.into_iter().map(T::of).collect())?;
    g.backward_with(&mut model.params, nodes.depth, upstream)?;
    Ok(BatchPass { report, synthesized })
}

/// Result of [`train_step`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub report: LossReport,
    /// False when the step was skipped because of a non-finite value.
    pub applied: bool,
}

/// One optimizer step on a batch, with every view serving as a target.
pub fn train_step<T: Real>(
    model: &mut Model<T>,
    adam: &mut Adam<T>,
    batch: &[&Sample],
    rig: &Rig,
    config: &TrainConfig,
) -> Result<StepOutcome> {
    model.params.zero_grad();
    let targets: Vec<usize> = (0..rig.len()).collect();
    let weights = config.effective_weights();
    let pass = batch_gradients(model, batch, rig, &weights, config.mode, &config.splat_options(), &targets)?;
    let report = pass.report;
    if !report.l_total.is_finite() || !model.params.grads_finite() {
        log::warn!("non-finite loss or gradient; skipping step");
        return Ok(StepOutcome { report, applied: false });
    }
    match adam.step(&mut model.params) {
        Ok(()) => Ok(StepOutcome { report, applied: true }),
        Err(Error::NonFinite(msg)) => {
            log::warn!("skipping step: {msg}");
            Ok(StepOutcome { report, applied: false })
        }
        Err(e) => Err(e),
    }
}

pub const LOSS_LOG_HEADER: &str = "iteration,l_col,l_str,l_ph,l_depth,l_surface,l_total";
pub const FINAL_CHECKPOINT: &str = "model.bin";

fn log_row(it: usize, r: &LossReport) -> String {
    format!(
        "{it},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}",
        r.l_col, r.l_str, r.l_ph, r.l_depth, r.l_surface, r.l_total
    )
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub loss_log: PathBuf,
    pub steps_applied: usize,
    pub steps_skipped: usize,
    pub losses: Vec<LossReport>,
}

/// Model settings for `rig`'s image size, seeded by the run.
pub fn model_config_for(config: &TrainConfig, rig: &Rig) -> ModelConfig {
    ModelConfig {
        height: rig.height(),
        width: rig.width(),
        seed: config.seed,
        ..config.model.clone()
    }
}

/// Trains on `dataset`, writing under `out`:
/// `train_config.toml`, `loss.csv`, `checkpoints/iter_NNNNNN.bin` and the
/// final `model.bin`.
pub fn train(dataset: &Dataset, config: &TrainConfig, out: &Path) -> Result<TrainSummary> {
    config.validate()?;
    if dataset.is_empty() && config.iterations > 0 {
        return Err(Error::Config("cannot train on an empty dataset".into()));
    }
    let samples = dataset.samples()?;
    train_on(&samples, &dataset.rig, config, out)
}

/// [`train`] on samples already in memory.
pub fn train_on(samples: &[Sample], rig: &Rig, config: &TrainConfig, out: &Path) -> Result<TrainSummary> {
    config.validate()?;
    let mcfg = model_config_for(config, rig);
    let mut model = Model::<f32>::build(&mcfg)?;
    let mut adam = Adam::new(config.adam, &model.params);
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let cfg_path = out.join("train_config.toml");
    let resolved = TrainConfig {
        model: mcfg,
        ..config.clone()
    };
    fs::write(&cfg_path, resolved.to_toml()).map_err(|e| Error::io(&cfg_path, e))?;

    let log_path = out.join("loss.csv");
    let file = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let io = |e| Error::io(&log_path, e);
    writeln!(log, "{LOSS_LOG_HEADER}").map_err(io)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut cursor = order.len();
    let (mut applied, mut skipped) = (0, 0);
    let mut losses = Vec::with_capacity(config.iterations);
    for it in 1..=config.iterations {
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&samples[order[cursor]]);
            cursor += 1;
        }
        let step = train_step(&mut model, &mut adam, &batch, rig, config)?;
        if step.applied {
            applied += 1;
        } else {
            skipped += 1;
        }
        writeln!(log, "{}", log_row(it, &step.report)).map_err(io)?;
        if it % 50 == 0 {
            log::info!("iteration {it}: total {:.5}", step.report.l_total);
        }
        losses.push(step.report);
        if config.checkpoint_every > 0 && it % config.checkpoint_every == 0 {
            let dir = out.join("checkpoints");
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            model.save(&dir.join(format!("iter_{it:06}.bin")))?;
        }
    }
    log.flush().map_err(io)?;
    let checkpoint = out.join(FINAL_CHECKPOINT);
    model.save(&checkpoint)?;
    Ok(TrainSummary {
        checkpoint,
        loss_log: log_path,
        steps_applied: applied,
        steps_skipped: skipped,
        losses,
    })
}

/// Denoises every view of a sample in one batch.
pub fn denoise_sample(model: &Model<f32>, sample: &Sample) -> Result<Vec<DepthMap>> {
    let maps: Vec<&DepthMap> = sample.frames.iter().map(|f| &f.depth).collect();
    Ok(unbatch(&model.predict(&depth_batch::<f32>(&maps)?)?))
}

/// Reads a PFM, denoises it and writes the result; optionally writes the
/// output validity mask as PGM.
pub fn denoise_file(input: &Path, checkpoint: &Path, output: &Path, mask_out: Option<&Path>) -> Result<DepthMap> {
    let model = Model::<f32>::load(checkpoint)?;
    let depth = read_pfm(input)?;
    if depth.width % 8 != 0 || depth.height % 8 != 0 {
        return Err(Error::Config(format!(
            "{}: size {}x{} is not divisible by 8, which the network requires",
            input.display(),
            depth.width,
            depth.height
        )));
    }
    let out = model.denoise(&depth)?;
    write_pfm(output, &out)?;
    if let Some(m) = mask_out {
        write_pgm(m, &Mask::from_depth(&out))?;
    }
    Ok(out)
}

/// Per-scene MAE in meters over pixels valid in the noisy input.
pub fn scene_mae(pred: &[DepthMap], sample: &Sample) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for ((p, f), gt) in pred.iter().zip(&sample.frames).zip(&sample.gt) {
        for i in 0..gt.data.len() {
            if f.mask.data[i] && gt.data[i] > 0.0 {
                sum += (p.data[i] - gt.data[i]).abs();
                n += 1;
            }
        }
    }
    sum / n as f64
}

/// Accumulates an [`EvalReport`] over samples, scoring pixels valid in the
/// noisy input.
pub fn evaluate_predictions(preds: &[Vec<DepthMap>], samples: &[Sample], rig: &Rig, plane_radius: f64) -> EvalReport {
    let mut ev = Evaluator::new(plane_radius);
    for (pred, sample) in preds.iter().zip(samples) {
        for (v, (p, (f, gt))) in pred.iter().zip(sample.frames.iter().zip(&sample.gt)).enumerate() {
            ev.add(p, gt, &rig.views[v].intrinsics, Some(&f.mask));
        }
    }
    ev.report()
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub mode: Mode,
    pub report: EvalReport,
    pub per_scene_mae: Vec<f64>,
}

/// Plane-fit radius for evaluation at the default 64×64 scale, meters.
/// Neighboring pixels are several centimeters apart there.
pub const EVAL_PLANE_RADIUS: f64 = 0.1;

/// Trains every mode with the same seed and scores it on `test`.
/// Writes `<out>/<mode>/...` for each run and `<out>/ablation.csv`.
pub fn ablate(train_set: &[Sample], test: &[Sample], rig: &Rig, config: &TrainConfig, out: &Path) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(Mode::ALL.len());
    for mode in Mode::ALL {
        let cfg = TrainConfig {
            mode,
            ..config.clone()
        };
        let summary = train_on(train_set, rig, &cfg, &out.join(mode.key()))?;
        let model = Model::<f32>::load(&summary.checkpoint)?;
        let preds = test.iter().map(|s| denoise_sample(&model, s)).collect::<Result<Vec<_>>>()?;
        let per_scene_mae = preds.iter().zip(test).map(|(p, s)| scene_mae(p, s)).collect();
        let report = evaluate_predictions(&preds, test, rig, EVAL_PLANE_RADIUS);
        log::info!("{}: MAE {:.2} mm", mode.label(), report.mae_mm);
        rows.push(AblationRow {
            mode,
            report,
            per_scene_mae,
        });
    }
    let path = out.join("ablation.csv");
    fs::write(&path, ablation_csv(&rows)).map_err(|e| Error::io(&path, e))?;
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from(EvalReport::CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.report.csv_row(r.mode.label()));
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{synthesize_sample, DatasetSpec};

    fn tiny() -> (DatasetSpec, Rig, Vec<Sample>) {
        let spec = DatasetSpec {
            width: 16,
            height: 16,
            supersample: 1,
            ..DatasetSpec::default()
        };
        let rig = spec.rig().unwrap();
        let samples = (0..2).map(|s| synthesize_sample(&spec, &rig, 100 + s).unwrap()).collect();
        (spec, rig, samples)
    }

    fn tiny_config(mode: Mode) -> TrainConfig {
        TrainConfig {
            mode,
            iterations: 3,
            model: ModelConfig {
                base_channels: 4,
                height: 16,
                width: 16,
                ..ModelConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    fn grads(model: &Model<f64>) -> Vec<f64> {
        model.params.iter().flat_map(|p| p.grad.data().to_vec()).collect()
    }

    #[test]
    fn defaults() {
        let c = TrainConfig::default();
        assert_eq!((c.adam.lr, c.adam.beta1, c.adam.beta2, c.batch_size), (2e-4, 0.9, 0.99, 2));
        let back = TrainConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert!(TrainConfig::from_toml("bogus = 1").is_err());
    }

    #[test]
    fn modes_parse_and_label() {
        let labels: Vec<_> = Mode::ALL.iter().map(|m| m.label()).collect();
        assert_eq!(labels, ["AE", "P-only", "P+D", "P+N", "P+D+N"]);
        for m in Mode::ALL {
            assert_eq!(m.key().parse::<Mode>().unwrap(), m);
            assert_eq!(m.label().parse::<Mode>().unwrap(), m);
        }
        assert!("PX".parse::<Mode>().is_err());
    }

    #[test]
    fn mode_weights_renormalize() {
        let base = LossWeights::default();
        for m in Mode::ALL {
            let w = m.weights(&base);
            assert!((w.lambda1 + w.lambda2 + w.lambda3 - 1.0).abs() < 1e-12);
            w.validate().unwrap();
        }
        let pd = Mode::Pd.weights(&base);
        assert!((pd.lambda1 - 0.85 / 0.95).abs() < 1e-12 && pd.lambda3 == 0.0);
        let ae = Mode::Ae.weights(&base);
        assert_eq!((ae.lambda1, ae.lambda2, ae.lambda3), (0.0, 1.0, 0.0));
    }

    #[test]
    fn target_passes_add_up() {
        let (_, rig, samples) = tiny();
        let cfg = tiny_config(Mode::Pdn);
        let mut model = Model::<f64>::build(&model_config_for(&cfg, &rig)).unwrap();
        let batch: Vec<&Sample> = samples.iter().collect();
        let w = LossWeights::default().with_lambdas(1.0, 0.0, 0.0);
        let opts = cfg.splat_options();

        model.params.zero_grad();
        let both = batch_gradients(&mut model, &batch, &rig, &w, Mode::P, &opts, &[0, 1]).unwrap();
        let g_both = grads(&model);
        let mut sum = vec![0.0; g_both.len()];
        let mut l = 0.0;
        for t in [0, 1] {
            model.params.zero_grad();
            l += batch_gradients(&mut model, &batch, &rig, &w, Mode::P, &opts, &[t]).unwrap().report.l_total;
            for (s, g) in sum.iter_mut().zip(grads(&model)) {
                *s += g;
            }
        }
        assert!((both.report.l_total - l).abs() < 1e-12 * l.abs().max(1.0));
        let scale = g_both.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        assert!(scale > 0.0);
        for (a, b) in g_both.iter().zip(&sum) {
            assert!((a - b).abs() <= 1e-12 * scale, "{a} vs {b}");
        }
    }

    #[test]
    fn photometric_path_is_shared_across_modes() {
        let (_, rig, samples) = tiny();
        let cfg = tiny_config(Mode::Pdn);
        let mut model = Model::<f64>::build(&model_config_for(&cfg, &rig)).unwrap();
        let batch: Vec<&Sample> = samples.iter().collect();
        let opts = cfg.splat_options();
        let all: Vec<usize> = (0..rig.len()).collect();
        let reference = batch_gradients(&mut model, &batch, &rig, &Mode::P.weights(&cfg.loss), Mode::P, &opts, &all)
            .unwrap()
            .synthesized;
        assert_eq!(reference.len(), 2 * rig.len());
        for m in [Mode::Pd, Mode::Pn, Mode::Pdn] {
            let got = batch_gradients(&mut model, &batch, &rig, &m.weights(&cfg.loss), m, &opts, &all).unwrap();
            assert_eq!(got.synthesized, reference);
        }
        let ae = batch_gradients(&mut model, &batch, &rig, &Mode::Ae.weights(&cfg.loss), Mode::Ae, &opts, &all).unwrap();
        assert!(ae.synthesized.is_empty());
        assert_eq!(ae.report.l_ph, 0.0);
        assert!(ae.report.l_depth > 0.0);
    }

    #[test]
    fn zero_photometric_weights_equal_p_only() {
        let (_, rig, samples) = tiny();
        let cfg = tiny_config(Mode::Pdn);
        let batch: Vec<&Sample> = samples.iter().collect();
        let all: Vec<usize> = (0..rig.len()).collect();
        let opts = cfg.splat_options();
        let run = |mode: Mode, w: LossWeights| {
            let mut model = Model::<f64>::build(&model_config_for(&cfg, &rig)).unwrap();
            let r = batch_gradients(&mut model, &batch, &rig, &w, mode, &opts, &all).unwrap().report;
            (r, grads(&model))
        };
        let only_ph = LossWeights::default().with_lambdas(1.0, 0.0, 0.0);
        assert_eq!(run(Mode::Pdn, only_ph), run(Mode::P, Mode::P.weights(&LossWeights::default())));
    }

    #[test]
    fn one_adam_step_per_batch() {
        let (_, rig, samples) = tiny();
        let cfg = tiny_config(Mode::Pdn);
        let mut model = Model::<f32>::build(&model_config_for(&cfg, &rig)).unwrap();
        let mut adam = Adam::new(cfg.adam, &model.params);
        let batch: Vec<&Sample> = samples.iter().collect();
        let out = train_step(&mut model, &mut adam, &batch, &rig, &cfg).unwrap();
        assert!(out.applied && out.report.l_total.is_finite());
        assert_eq!(adam.steps_taken(), 1);
    }

    #[test]
    fn training_is_deterministic() {
        let (_, rig, samples) = tiny();
        let cfg = tiny_config(Mode::Pdn);
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let sa = train_on(&samples, &rig, &cfg, a.path()).unwrap();
        train_on(&samples, &rig, &cfg, b.path()).unwrap();
        assert_eq!(sa.steps_applied, 3);
        let la = fs::read(a.path().join("loss.csv")).unwrap();
        assert_eq!(la, fs::read(b.path().join("loss.csv")).unwrap());
        assert_eq!(String::from_utf8(la).unwrap().lines().count(), 4);
        assert_eq!(
            fs::read(a.path().join(FINAL_CHECKPOINT)).unwrap(),
            fs::read(b.path().join(FINAL_CHECKPOINT)).unwrap()
        );
    }

    #[test]
    fn zero_iterations_writes_initial_checkpoint() {
        let (_, rig, samples) = tiny();
        let cfg = TrainConfig {
            iterations: 0,
            checkpoint_every: 1,
            ..tiny_config(Mode::Pdn)
        };
        let dir = tempfile::tempdir().unwrap();
        let s = train_on(&samples, &rig, &cfg, dir.path()).unwrap();
        let fresh = Model::<f32>::build(&model_config_for(&cfg, &rig)).unwrap();
        let loaded = Model::<f32>::load(&s.checkpoint).unwrap();
        assert_eq!(loaded.params.iter().next().unwrap().value, fresh.params.iter().next().unwrap().value);
        assert!(!dir.path().join("checkpoints").exists());
    }

    #[test]
    fn denoised_zeros_follow_the_mask() {
        let (_, rig, samples) = tiny();
        let cfg = tiny_config(Mode::Pdn);
        let model = Model::<f32>::build(&model_config_for(&cfg, &rig)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("m.bin");
        model.save(&ckpt).unwrap();
        let input = dir.path().join("in.pfm");
        write_pfm(&input, &samples[0].frames[0].depth).unwrap();
        let out = denoise_file(&input, &ckpt, &dir.path().join("out.pfm"), None).unwrap();
        let mut g = Graph::new();
        let t = depth_batch::<f32>(&[&samples[0].frames[0].depth]).unwrap();
        let nodes = model.forward_graph(&mut g, &t, false).unwrap();
        let m = mask_of(&g.mask(nodes.depth)).remove(0);
        for (d, ok) in out.data.iter().zip(&m.data) {
            if !ok {
                assert_eq!(*d, 0.0);
            }
        }

        let odd = dir.path().join("odd.pfm");
        write_pfm(&odd, &DepthMap::filled(12, 16, 1.0)).unwrap();
        let err = denoise_file(&odd, &ckpt, &dir.path().join("x.pfm"), None).unwrap_err();
        assert!(err.to_string().contains("divisible by 8"));
    }
}
