//! Writes a small synthetic dataset and reads one scene back.
//!
//! `cargo run --example synth_dataset -- [OUT_DIR]`

use std::path::PathBuf;

use splatdenoise::dataio::{generate_dataset, Dataset, DatasetSpec};

fn main() -> splatdenoise::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("splatdenoise_synth"));
    let spec = DatasetSpec { scenes: 3, ..DatasetSpec::default() };
    let manifest = generate_dataset(&out, &spec)?;
    println!("{} scenes under {}", manifest.scenes.len(), out.display());

    let data = Dataset::open(&out)?;
    let sample = data.sample(0)?;
    for (v, (f, gt)) in sample.frames.iter().zip(&sample.gt).enumerate() {
        let (mut err, mut n) = (0.0, 0);
        for (a, b) in f.depth.data.iter().zip(&gt.data) {
            if *a > 0.0 && *b > 0.0 {
                err += (a - b).abs();
                n += 1;
            }
        }
        println!("view {v}: {:5} valid input pixels, noise MAE {:.2} mm", n, 1e3 * err / n as f64);
    }
    Ok(())
}
