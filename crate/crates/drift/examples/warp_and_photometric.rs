//! Backward-warps frame t+1 into frame t two ways (by observed flow, and by
//! depth + ego-motion) and scores the reconstructions photometrically.
//! With ground-truth geometry both residuals collapse; corrupting the depth
//! makes the motion-based warp miss and the loss respond.

use drift::loss::photometric_loss;
use drift::sampler::{warp_by_flow, warp_by_motion};
use drift::scene::{perturb_depth, render, SceneSpec};
use drift::SceneFlowField;

fn main() -> Result<(), drift::DriftError> {
    let spec = SceneSpec::static_two_plane(64, 96);
    let (t, t1) = render(&spec)?;
    let no_motion = SceneFlowField::zeros(64, 96);

    // keep windows away from frame borders where warps leave the image
    let margin = drift::MaskMap::from_fn(64, 96, |y, x| {
        let o = t.flow_fwd.get(y, x);
        let (tx, ty) = (x as f64 + o.x, y as f64 + o.y);
        (2.0..=93.0).contains(&tx) && (2.0..=61.0).contains(&ty)
    });

    let (synth_flow, ok_flow) = warp_by_flow(&t1.image, &t.flow_fwd)?;
    let mask = t.occlusion_fwd.and(&ok_flow).and(&margin).erode(1);
    let by_flow = photometric_loss(&t.image, &synth_flow, &mask)?;

    let (synth_motion, ok_motion) =
        warp_by_motion(&t1.image, &t.depth, &no_motion, &spec.ego_motion, &spec.camera)?;
    let mask_m = t.occlusion_fwd.and(&ok_motion).and(&margin).erode(1);
    let by_motion = photometric_loss(&t.image, &synth_motion, &mask_m)?;

    println!("photometric loss with true geometry:");
    println!("  warp by observed flow   {:.3e} over {} px", by_flow.value, by_flow.pixels);
    println!("  warp by depth + motion  {:.3e} over {} px", by_motion.value, by_motion.pixels);

    for sigma in [0.02, 0.1, 0.3] {
        let bad = perturb_depth(&t.depth, sigma, 11)?;
        let (synth, ok) = warp_by_motion(&t1.image, &bad, &no_motion, &spec.ego_motion, &spec.camera)?;
        let m = t.occlusion_fwd.and(&ok).and(&margin).erode(1);
        let loss = photometric_loss(&t.image, &synth, &m)?;
        println!("  depth noise sigma {sigma:<4} -> {:.4}", loss.value);
    }
    Ok(())
}
