//! Scores the raw input and a grid of bilateral filters with the full set
//! of depth, normal and point-to-plane metrics.

use splatdenoise::dataio::{generate_samples, DatasetSpec};
use splatdenoise::geometry::DepthMap;
use splatdenoise::metrics::{bilateral_filter, EvalReport};
use splatdenoise::trainer::{evaluate_predictions, EVAL_PLANE_RADIUS};

fn main() -> splatdenoise::Result<()> {
    let spec = DatasetSpec { scenes: 4, seed: 2, ..DatasetSpec::default() };
    let rig = spec.rig()?;
    let samples = generate_samples(&spec)?;
    let raw: Vec<Vec<DepthMap>> = samples.iter().map(|s| s.frames.iter().map(|f| f.depth.clone()).collect()).collect();

    let mut rows = vec![("raw".to_string(), evaluate_predictions(&raw, &samples, &rig, EVAL_PLANE_RADIUS))];
    for ss in [1.0, 2.0, 3.0] {
        for sr in [0.01, 0.03, 0.1] {
            let filtered: Vec<Vec<DepthMap>> =
                raw.iter().map(|views| views.iter().map(|d| bilateral_filter(d, ss, sr)).collect()).collect();
            rows.push((format!("bilateral {ss}px {sr}m"), evaluate_predictions(&filtered, &samples, &rig, EVAL_PLANE_RADIUS)));
        }
    }
    let table: Vec<(&str, EvalReport)> = rows.iter().map(|(n, r)| (n.as_str(), *r)).collect();
    print!("{}", EvalReport::table(&table));
    Ok(())
}
