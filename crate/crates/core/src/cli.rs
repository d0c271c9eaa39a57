//! Command-line front end. Every command prints its resolved configuration
//! before doing any work.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::dataio::formats::{read_pfm, read_pgm, write_pfm};
use crate::dataio::{generate_dataset, Dataset, DatasetSpec, Rig, Sample};
use crate::error::{Error, Result};
use crate::frame::Mask;
use crate::geometry::{DepthMap, Intrinsics};
use crate::gradcheck;
use crate::metrics::{EvalReport, Evaluator};
use crate::model::Model;
use crate::trainer::{self, ablate, ablation_csv, denoise_file, denoise_sample, Mode, TrainConfig, EVAL_PLANE_RADIUS};

pub const THREADS_ENV: &str = "SPLATDENOISE_THREADS";

#[derive(Debug, Parser)]
#[command(name = "splatdenoise", version, about = "Self-supervised multi-view depth denoising")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-view RGB-D dataset.
    Synth(SynthArgs),
    /// Train a denoiser on a dataset.
    Train(TrainArgs),
    /// Denoise a depth map, or every view of a dataset.
    Denoise(DenoiseArgs),
    /// Score predicted depth maps against ground truth.
    Eval(EvalArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Train every loss configuration and tabulate held-out errors.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Dataset settings file (TOML); flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub scenes: Option<usize>,
    #[arg(long)]
    pub views: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    /// Noise overrides as `key=value` pairs separated by commas, e.g.
    /// `dropout_rate=0.5,sigma_slope=0.004`.
    #[arg(long)]
    pub noise: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Training settings file (TOML); flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// AE, P, PD, PN or PDN.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DenoiseArgs {
    /// A PFM depth map, or a dataset directory.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Output PFM, or a directory when the input is a dataset.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the output validity mask (single maps only).
    #[arg(long)]
    pub mask_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground truth: a dataset directory or a directory of PFM files.
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Rig file; defaults to `rig.json` in the ground-truth directory.
    #[arg(long)]
    pub rig: Option<PathBuf>,
    /// Half field of view for maps without a rig file.
    #[arg(long, default_value_t = 0.45)]
    pub omega: f64,
    /// Neighborhood radius of the point-to-plane error, meters.
    #[arg(long, default_value_t = EVAL_PLANE_RADIUS)]
    pub plane_radius: f64,
    /// Row label in the report.
    #[arg(long, default_value = "pred")]
    pub label: String,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// splat, losses, nn, model or all.
    #[arg(long, default_value = "all")]
    pub module: String,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Held-out dataset; without it the last `--holdout` scenes of
    /// `--data` are held out.
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub holdout: usize,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn echo<T: Serialize>(what: &str, value: &T) {
    let text = toml::to_string(value).expect("configuration serializes");
    println!("# {what}\n{text}");
}

/// Applies `key=value` pairs on top of `base`.
fn overlay<T: Serialize + DeserializeOwned>(base: &T, pairs: &str) -> Result<T> {
    let mut table = toml::Table::try_from(base).map_err(|e| Error::Config(e.to_string()))?;
    let text = pairs.split(',').filter(|p| !p.trim().is_empty()).collect::<Vec<_>>().join("\n");
    let extra: toml::Table = toml::from_str(&text).map_err(|e| Error::Usage(format!("bad override list {pairs:?}: {e}")))?;
    for (k, v) in extra {
        if !table.contains_key(&k) {
            return Err(Error::Usage(format!("unknown setting {k:?}")));
        }
        table.insert(k, v);
    }
    toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::Usage(e.to_string()))
}

pub fn synth(args: &SynthArgs) -> Result<PathBuf> {
    let mut spec = match &args.config {
        Some(p) => toml::from_str(&read_text(p)?).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
        None => DatasetSpec::default(),
    };
    if let Some(v) = args.scenes {
        spec.scenes = v;
    }
    if let Some(v) = args.views {
        spec.views = v;
    }
    if let Some(v) = args.width {
        spec.width = v;
    }
    if let Some(v) = args.height {
        spec.height = v;
    }
    if let Some(v) = args.seed {
        spec.seed = v;
    }
    if let Some(n) = &args.noise {
        spec.noise = overlay(&spec.noise, n)?;
    }
    spec.validate().map_err(|e| Error::Usage(e.to_string()))?;
    echo("dataset", &spec);
    generate_dataset(&args.out, &spec)?;
    let path = args.out.join("manifest.json");
    println!("manifest: {}", path.display());
    Ok(path)
}

fn load_train_config(path: Option<&Path>, mode: Option<&str>) -> Result<TrainConfig> {
    let (mut cfg, file_mode) = match path {
        Some(p) => {
            let text = read_text(p)?;
            let table: toml::Table = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            let cfg = TrainConfig::from_toml(&text)?;
            (cfg, table.contains_key("mode"))
        }
        None => (TrainConfig::default(), false),
    };
    if let Some(m) = mode {
        let m: Mode = m.parse()?;
        if file_mode && m != cfg.mode {
            return Err(Error::Usage(format!(
                "--mode {} conflicts with mode {} in the config file",
                m.key(),
                cfg.mode.key()
            )));
        }
        cfg.mode = m;
    }
    Ok(cfg)
}

pub fn train(args: &TrainArgs) -> Result<PathBuf> {
    let mut cfg = load_train_config(args.config.as_deref(), args.mode.as_deref())?;
    if let Some(v) = args.iterations {
        cfg.iterations = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.lr {
        cfg.adam.lr = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.checkpoint_every {
        cfg.checkpoint_every = v;
    }
    cfg.validate().map_err(|e| Error::Usage(e.to_string()))?;
    let data = Dataset::open(&args.data)?;
    let resolved = TrainConfig {
        model: trainer::model_config_for(&cfg, &data.rig),
        ..cfg.clone()
    };
    echo("training", &resolved);
    let summary = trainer::train(&data, &cfg, &args.out)?;
    println!(
        "steps applied: {}, skipped: {}\ncheckpoint: {}\nloss log: {}",
        summary.steps_applied,
        summary.steps_skipped,
        summary.checkpoint.display(),
        summary.loss_log.display()
    );
    Ok(summary.checkpoint)
}

pub fn denoise(args: &DenoiseArgs) -> Result<()> {
    #[derive(Serialize)]
    struct Resolved<'a> {
        input: &'a Path,
        checkpoint: &'a Path,
        output: &'a Path,
        mask_out: Option<&'a Path>,
    }
    echo(
        "denoise",
        &Resolved {
            input: &args.input,
            checkpoint: &args.ckpt,
            output: &args.out,
            mask_out: args.mask_out.as_deref(),
        },
    );
    if args.input.join("manifest.json").exists() {
        if args.mask_out.is_some() {
            return Err(Error::Usage("--mask-out applies to single depth maps only".into()));
        }
        let data = Dataset::open(&args.input)?;
        let model = Model::<f32>::load(&args.ckpt)?;
        fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
        data.rig.save(&args.out.join("rig.json"))?;
        for i in 0..data.len() {
            let sample = data.sample(i)?;
            let preds = denoise_sample(&model, &sample)?;
            for (v, p) in preds.iter().enumerate() {
                let dir = args.out.join(&data.manifest.scenes[i].dir).join(format!("view_{v}"));
                fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                write_pfm(&dir.join("depth.pfm"), p)?;
            }
        }
        println!("denoised {} scenes into {}", data.len(), args.out.display());
    } else {
        if !args.input.exists() {
            return Err(Error::io(&args.input, std::io::ErrorKind::NotFound.into()));
        }
        denoise_file(&args.input, &args.ckpt, &args.out, args.mask_out.as_deref())?;
        println!("wrote {}", args.out.display());
    }
    Ok(())
}

/// All `.pfm` files under `root`, as sorted relative paths.
fn pfm_files(root: &Path) -> Result<Vec<PathBuf>> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else if path.extension().is_some_and(|e| e == "pfm") {
                out.push(path.strip_prefix(root).expect("under root").to_path_buf());
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(root, root, &mut out)?;
    out.sort();
    Ok(out)
}

/// View index from a `view_N` parent directory, else 0.
fn view_index(rel: &Path) -> usize {
    rel.parent()
        .and_then(|p| p.file_name())
        .and_then(|n| n.to_str())
        .and_then(|n| n.strip_prefix("view_"))
        .and_then(|n| n.parse().ok())
        .unwrap_or(0)
}

fn check_same_size(pred: &DepthMap, gt: &DepthMap, path: &Path) -> Result<()> {
    if (pred.width, pred.height) != (gt.width, gt.height) {
        return Err(Error::format(path, "prediction and ground truth differ in size"));
    }
    Ok(())
}

pub fn eval(args: &EvalArgs) -> Result<EvalReport> {
    echo("eval", &EvalEcho::from(args));
    let mut ev = Evaluator::new(args.plane_radius);
    if args.gt.join("manifest.json").exists() {
        // Dataset ground truth, scored on pixels valid in the noisy input.
        let data = Dataset::open(&args.gt)?;
        let rig = match &args.rig {
            Some(p) => Rig::load(p)?,
            None => data.rig.clone(),
        };
        for (i, scene) in data.manifest.scenes.iter().enumerate() {
            for v in 0..rig.len() {
                let vdir = data.scene_dir(i).join(format!("view_{v}"));
                let gt = read_pfm(&vdir.join("gt_depth.pfm"))?;
                let mask: Mask = read_pgm(&vdir.join("mask.pgm"))?;
                let ppath = args.pred.join(&scene.dir).join(format!("view_{v}")).join("depth.pfm");
                let pred = read_pfm(&ppath)?;
                check_same_size(&pred, &gt, &ppath)?;
                ev.add(&pred, &gt, &rig.views[v].intrinsics, Some(&mask));
            }
        }
    } else {
        let rig_path = args.rig.clone().unwrap_or_else(|| args.gt.join("rig.json"));
        let rig = if rig_path.exists() { Some(Rig::load(&rig_path)?) } else { None };
        let files = pfm_files(&args.gt)?;
        if files.is_empty() {
            return Err(Error::Usage(format!("no .pfm files under {}", args.gt.display())));
        }
        for rel in files {
            let gt = read_pfm(&args.gt.join(&rel))?;
            let ppath = args.pred.join(&rel);
            let pred = read_pfm(&ppath)?;
            check_same_size(&pred, &gt, &ppath)?;
            let intr = match &rig {
                Some(r) => r.views.get(view_index(&rel)).map(|v| v.intrinsics).ok_or_else(|| {
                    Error::Config(format!("{}: no view {} in the rig", rel.display(), view_index(&rel)))
                })?,
                None => Intrinsics::from_fov(gt.width, gt.height, args.omega)?,
            };
            ev.add(&pred, &gt, &intr, None);
        }
    }
    let report = ev.report();
    let csv = format!("{}\n{}\n", EvalReport::CSV_HEADER, report.csv_row(&args.label));
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(&args.out, csv).map_err(|e| Error::io(&args.out, e))?;
    print!("{}", EvalReport::table(&[(&args.label, report)]));
    Ok(report)
}

#[derive(Serialize)]
struct EvalEcho {
    pred: PathBuf,
    gt: PathBuf,
    out: PathBuf,
    rig: Option<PathBuf>,
    omega: f64,
    plane_radius: f64,
    label: String,
}

impl From<&EvalArgs> for EvalEcho {
    fn from(a: &EvalArgs) -> Self {
        Self {
            pred: a.pred.clone(),
            gt: a.gt.clone(),
            out: a.out.clone(),
            rig: a.rig.clone(),
            omega: a.omega,
            plane_radius: a.plane_radius,
            label: a.label.clone(),
        }
    }
}

pub fn gradcheck(args: &GradcheckArgs) -> Result<()> {
    #[derive(Serialize)]
    struct Resolved<'a> {
        module: &'a str,
        step: f64,
        element_tolerance: f64,
        end_to_end_tolerance: f64,
    }
    echo(
        "gradcheck",
        &Resolved {
            module: &args.module,
            step: gradcheck::STEP,
            element_tolerance: gradcheck::ELEMENT_TOLERANCE,
            end_to_end_tolerance: gradcheck::END_TO_END_TOLERANCE,
        },
    );
    let results = gradcheck::run(&args.module).ok_or_else(|| {
        Error::Usage(format!(
            "unknown module {:?}; expected one of {} or all",
            args.module,
            gradcheck::MODULES.join(", ")
        ))
    })?;
    let mut failed = 0;
    for r in &results {
        println!(
            "{:<4} {:<7} {:<48} n={:<5} max rel err {:.2e} (tol {:.0e})",
            if r.passed() { "ok" } else { "FAIL" },
            r.module,
            r.name,
            r.elements,
            r.max_rel_err,
            r.tolerance
        );
        failed += usize::from(!r.passed());
    }
    if failed > 0 {
        return Err(Error::GradCheck(format!("{failed} of {} checks failed", results.len())));
    }
    println!("all {} checks passed", results.len());
    Ok(())
}

pub fn ablate_cmd(args: &AblateArgs) -> Result<Vec<trainer::AblationRow>> {
    let mut cfg = load_train_config(args.config.as_deref(), None)?;
    if let Some(v) = args.iterations {
        cfg.iterations = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    cfg.validate().map_err(|e| Error::Usage(e.to_string()))?;
    let data = Dataset::open(&args.data)?;
    let all = data.samples()?;
    let (train_set, test): (Vec<Sample>, Vec<Sample>) = match &args.test {
        Some(p) => {
            let t = Dataset::open(p)?;
            if t.rig != data.rig {
                return Err(Error::Config("training and held-out datasets use different rigs".into()));
            }
            (all, t.samples()?)
        }
        None => {
            if args.holdout == 0 || args.holdout >= all.len() {
                return Err(Error::Usage(format!(
                    "--holdout {} must leave both training and held-out scenes out of {}",
                    args.holdout,
                    all.len()
                )));
            }
            let mut all = all;
            let test = all.split_off(all.len() - args.holdout);
            (all, test)
        }
    };
    echo(
        "ablation",
        &TrainConfig {
            model: trainer::model_config_for(&cfg, &data.rig),
            ..cfg.clone()
        },
    );
    println!("training scenes: {}, held-out scenes: {}", train_set.len(), test.len());
    let rows = ablate(&train_set, &test, &data.rig, &cfg, &args.out)?;
    let table: Vec<(&str, EvalReport)> = rows.iter().map(|r| (r.mode.label(), r.report)).collect();
    print!("{}", EvalReport::table(&table));
    debug_assert_eq!(ablation_csv(&rows).lines().count(), rows.len() + 1);
    println!("table: {}", args.out.join("ablation.csv").display());
    Ok(rows)
}

/// Caps the worker pool from `SPLATDENOISE_THREADS` (0 or unset: automatic).
pub fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .map_err(|_| Error::Usage(format!("{THREADS_ENV} must be a non-negative integer, got {v:?}")))?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    configure_threads()?;
    match &cli.command {
        Command::Synth(a) => synth(a).map(drop),
        Command::Train(a) => train(a).map(drop),
        Command::Denoise(a) => denoise(a),
        Command::Eval(a) => eval(a).map(drop),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Ablate(a) => ablate_cmd(a).map(drop),
    }
}

/// Entry point of the binary.
pub fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Usage(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn unknown_flags_are_rejected() {
        assert!(Cli::try_parse_from(["splatdenoise", "synth", "--out", "x", "--bogus", "1"]).is_err());
        assert!(Cli::try_parse_from(["splatdenoise", "synth", "--out", "x", "--scenes", "0"]).is_ok());
    }

    #[test]
    fn noise_overrides() {
        let n = overlay(&crate::dataio::NoiseSpec::default(), "dropout_rate=0.5,sigma_slope=0.004").unwrap();
        assert_eq!((n.dropout_rate, n.sigma_slope, n.sigma_base), (0.5, 0.004, 0.002));
        assert!(overlay(&n, "nope=1").is_err());
        assert!(overlay(&n, "dropout_rate=").is_err());
    }

    #[test]
    fn mode_conflicts_with_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.toml");
        fs::write(&p, "mode = \"PD\"\n").unwrap();
        assert_eq!(load_train_config(Some(&p), Some("PD")).unwrap().mode, Mode::Pd);
        assert!(matches!(load_train_config(Some(&p), Some("AE")), Err(Error::Usage(_))));
        fs::write(&p, "iterations = 7\n").unwrap();
        let c = load_train_config(Some(&p), Some("PN")).unwrap();
        assert_eq!((c.mode, c.iterations), (Mode::Pn, 7));
    }

    #[test]
    fn view_index_from_path() {
        assert_eq!(view_index(Path::new("scene_0000/view_3/depth.pfm")), 3);
        assert_eq!(view_index(Path::new("a.pfm")), 0);
    }
}
