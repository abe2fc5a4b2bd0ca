//! Forward-backward flow consistency as an occlusion detector, checked
//! against the renderer's analytic visibility.

use drift::sampler::occlusion_mask;
use drift::scene::{render, SceneSpec};
use drift::{OCC_ALPHA1, OCC_ALPHA2};

fn main() -> Result<(), drift::DriftError> {
    let spec = SceneSpec::one_moving_plane(64, 96);
    let (t, _) = render(&spec)?;

    let estimated = occlusion_mask(&t.flow_fwd, &t.flow_bwd, OCC_ALPHA1, OCC_ALPHA2)?;
    let analytic = &t.occlusion_fwd;

    let total = 64 * 96;
    println!(
        "estimated visible {:.3}, analytic visible {:.3}, IoU {:.4}",
        estimated.count() as f64 / total as f64,
        analytic.count() as f64 / total as f64,
        estimated.iou(analytic)
    );

    // where they disagree, if anywhere
    let mut disagreements = 0;
    for y in 0..64 {
        for x in 0..96 {
            if estimated.get(y, x) != analytic.get(y, x) {
                disagreements += 1;
            }
        }
    }
    println!("{disagreements} disagreeing pixels");

    println!("visibility map ('#' visible, '.' occluded, left edge + object trail):");
    for r in 0..16 {
        let mut line = String::new();
        for c in 0..48 {
            let y = r * 64 / 16;
            let x = c * 96 / 48;
            line.push(if estimated.get(y, x) { '#' } else { '.' });
        }
        println!("  {line}");
    }

    // tightening alpha2 toward zero flags slightly more of the frame
    for alpha2 in [0.5, 0.05, 0.005] {
        let m = occlusion_mask(&t.flow_fwd, &t.flow_bwd, OCC_ALPHA1, alpha2)?;
        println!(
            "alpha2 {alpha2:<6} -> visible fraction {:.4}",
            m.count() as f64 / total as f64
        );
    }
    Ok(())
}
