//! Trains the denoiser for a few iterations on freshly synthesized scenes
//! and compares it with the raw input on a held-out scene.
//!
//! `cargo run --release --example train_tiny -- [ITERATIONS] [MODE]`

use splatdenoise::dataio::{generate_samples, DatasetSpec};
use splatdenoise::model::Model;
use splatdenoise::trainer::{denoise_sample, scene_mae, train_on, Mode, TrainConfig};

fn main() -> splatdenoise::Result<()> {
    let mut args = std::env::args().skip(1);
    let iterations = args.next().map_or(Ok(40), |a| a.parse()).expect("iteration count");
    let mode: Mode = args.next().map_or(Ok(Mode::Pdn), |a| a.parse())?;

    let spec = DatasetSpec { scenes: 6, ..DatasetSpec::default() };
    let rig = spec.rig()?;
    let mut samples = generate_samples(&spec)?;
    let held_out = samples.pop().expect("six scenes");

    let config = TrainConfig { mode, iterations, ..TrainConfig::default() };
    let out = std::env::temp_dir().join("splatdenoise_train_tiny");
    let summary = train_on(&samples, &rig, &config, &out)?;
    for (it, r) in summary.losses.iter().enumerate().step_by((iterations / 8).max(1)) {
        println!("iter {it:4}: total {:.5}  photometric {:.5}  depth {:.5}", r.l_total, r.l_ph, r.l_depth);
    }

    let model = Model::<f32>::load(&summary.checkpoint)?;
    let preds = denoise_sample(&model, &held_out)?;
    let raw: Vec<_> = held_out.frames.iter().map(|f| f.depth.clone()).collect();
    println!(
        "{mode} held-out MAE: raw {:.2} mm, denoised {:.2} mm",
        1e3 * scene_mae(&raw, &held_out),
        1e3 * scene_mae(&preds, &held_out)
    );
    Ok(())
}
