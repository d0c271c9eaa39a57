//! Reprojects a pixel between two cameras of the cross rig and prints the
//! per-pixel confidences.

use nalgebra::Vector2;
use splatdenoise::dataio::Rig;
use splatdenoise::geometry::{depth_confidence, radial_confidence, transfer_with, ConfidenceParams};

fn main() -> splatdenoise::Result<()> {
    let rig = Rig::cross(64, 64, 0.45, 1.6)?;
    let (src, dst) = (&rig.views[1], &rig.views[0]);
    let rel = src.relative_to(dst);
    let params = ConfidenceParams::default();
    for (px, d) in [((32.0, 32.0), 1.6), ((10.0, 50.0), 2.2), ((60.0, 4.0), 0.8)] {
        let p = Vector2::new(px.0, px.1);
        match transfer_with(p, d, &src.intrinsics, &rel, &dst.intrinsics) {
            Ok(t) => println!(
                "({:5.1},{:5.1}) at {d:.2} m -> ({:6.2},{:6.2}) at {:.3} m  w_d {:.3}  w_r {:.3}",
                p.x,
                p.y,
                t.pixel.x,
                t.pixel.y,
                t.depth,
                depth_confidence(d, &params),
                radial_confidence(p, &src.intrinsics)
            ),
            Err(e) => println!("({:.1},{:.1}): {e}", p.x, p.y),
        }
    }
    Ok(())
}
