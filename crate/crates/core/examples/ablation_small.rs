//! Trains all five loss configurations briefly and prints the held-out
//! comparison table.
//!
//! `cargo run --release --example ablation_small -- [ITERATIONS]`

use splatdenoise::dataio::{generate_samples, DatasetSpec};
use splatdenoise::metrics::EvalReport;
use splatdenoise::trainer::{ablate, TrainConfig};

fn main() -> splatdenoise::Result<()> {
    let iterations = std::env::args().nth(1).map_or(20, |a| a.parse().expect("iteration count"));
    let spec = DatasetSpec { scenes: 6, ..DatasetSpec::default() };
    let rig = spec.rig()?;
    let mut train = generate_samples(&spec)?;
    let test = train.split_off(4);
    let config = TrainConfig { iterations, ..TrainConfig::default() };
    let rows = ablate(&train, &test, &rig, &config, &std::env::temp_dir().join("splatdenoise_ablation"))?;
    let table: Vec<(&str, EvalReport)> = rows.iter().map(|r| (r.mode.label(), r.report)).collect();
    print!("{}", EvalReport::table(&table));
    Ok(())
}
