//! Evaluates each loss term on a noisy sample against its own splatted
//! reconstruction.

use splatdenoise::dataio::{synthesize_sample, DatasetSpec};
use splatdenoise::frame::Mask;
use splatdenoise::losses::{berhu_depth_loss, photometric_loss, surface_loss, DepthPair, LossWeights};
use splatdenoise::splat::{splat_many, SplatOptions, SplatSource};

fn main() -> splatdenoise::Result<()> {
    let spec = DatasetSpec::default();
    let rig = spec.rig()?;
    let sample = synthesize_sample(&spec, &rig, 3)?;
    let weights = LossWeights::default();
    let opts = SplatOptions { retain_state: false, ..SplatOptions::default() };

    for (name, depths) in [("noisy", sample.frames.iter().map(|f| &f.depth).collect::<Vec<_>>()), ("clean", sample.gt.iter().collect())] {
        let sources: Vec<SplatSource<'_>> = (1..rig.len())
            .map(|s| SplatSource { color: &sample.frames[s].color, depth: depths[s], view: &rig.views[s] })
            .collect();
        let out = splat_many(&sources, &rig.views[0], &opts)?;
        let target = sample.frames[0].color.masked(&out.mask);
        let ph = photometric_loss(&target, &out.image, &sample.frames[0].mask, &out.mask, &weights);
        let surf = surface_loss(depths[0], &rig.views[0].intrinsics, &Mask::from_depth(depths[0]));
        println!(
            "{name:>5} depth: color {:.5}  structural {:.5}  photometric {:.5}  surface {:.5}",
            ph.color, ph.structural, ph.loss.value, surf.value
        );
    }

    let masks: Vec<Mask> = sample.frames.iter().map(|f| f.mask.clone()).collect();
    let pairs: Vec<DepthPair<'_>> = (0..rig.len())
        .map(|v| DepthPair { measured: &sample.frames[v].depth, predicted: &sample.gt[v], mask: &masks[v] })
        .collect();
    let b = berhu_depth_loss(&pairs, weights.berhu_fraction);
    println!("BerHu between noisy input and ground truth: {:.6} over {} pixels", b.value, b.valid);
    Ok(())
}
