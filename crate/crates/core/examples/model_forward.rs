//! Builds the denoising network, prints its layout and runs it on a noisy
//! depth map.

use splatdenoise::dataio::{synthesize_sample, DatasetSpec};
use splatdenoise::model::{Model, ModelConfig};

fn main() -> splatdenoise::Result<()> {
    let model = Model::<f32>::build(&ModelConfig::default())?;
    println!("parameters: {}", model.parameter_count());
    println!("encoder channels: {:?}", model.encoder_channels());

    let spec = DatasetSpec::default();
    let sample = synthesize_sample(&spec, &spec.rig()?, 0)?;
    let input = &sample.frames[0].depth;
    let out = model.denoise(input)?;
    println!(
        "input valid {} of {}, output valid {} (untrained, mean {:.3} m)",
        input.valid_count(),
        input.data.len(),
        out.valid_count(),
        out.data.iter().sum::<f64>() / out.valid_count().max(1) as f64
    );

    // No linear layer, so the same weights run at other sizes.
    let bigger = Model::<f32>::build(&ModelConfig { height: 96, width: 96, ..ModelConfig::default() })?;
    println!("96x96 model has the same parameter count: {}", bigger.parameter_count() == model.parameter_count());
    Ok(())
}
