//! Synthesizes every view of a rendered scene from the other three by
//! forward splatting the ground-truth depth, and reports the PSNR.

use splatdenoise::dataio::{synthesize_sample, DatasetSpec};
use splatdenoise::frame::Mask;
use splatdenoise::splat::{psnr, splat_many, SplatOptions, SplatSource};

fn main() -> splatdenoise::Result<()> {
    let spec = DatasetSpec::default();
    let rig = spec.rig()?;
    let sample = synthesize_sample(&spec, &rig, 7)?;
    let opts = SplatOptions { retain_state: false, ..SplatOptions::default() };
    for t in 0..rig.len() {
        let sources: Vec<SplatSource<'_>> = (0..rig.len())
            .filter(|&s| s != t)
            .map(|s| SplatSource {
                color: &sample.frames[s].color,
                depth: &sample.gt[s],
                view: &rig.views[s],
            })
            .collect();
        let out = splat_many(&sources, &rig.views[t], &opts)?;
        let covered = out.mask.and(&Mask::from_depth(&sample.gt[t]));
        println!(
            "view {t}: coverage {:5.1}%  PSNR {:.2} dB",
            100.0 * covered.count() as f64 / (rig.width() * rig.height()) as f64,
            psnr(&out.image, &sample.frames[t].color, &covered)
        );
    }
    Ok(())
}
