//! Standard error statistics on controlled predictions: depth metrics with
//! and without median scaling, flow endpoint error and outlier rates, and
//! the combined disparity-domain scene-flow outlier fraction.

use drift::field::{DepthMap, FlowField, MaskMap};
use drift::metrics::{depth_metrics, flow_metrics, sceneflow_metrics, EvalCrop};
use drift::scene::{perturb_depth, perturb_flow, render, SceneSpec};

fn main() -> Result<(), drift::DriftError> {
    let spec = SceneSpec::static_two_plane(64, 96);
    let (t, t1) = render(&spec)?;

    // a biased prediction: 10% scale error plus noise
    let scaled = DepthMap::from_fn(64, 96, |y, x, _| 1.1 * t.depth.get(y, x))?;
    let pred = perturb_depth(&scaled, 0.05, 5)?;

    let plain = depth_metrics(&pred, &t.depth, 80.0, false, None)?;
    let rescaled = depth_metrics(&pred, &t.depth, 80.0, true, None)?;
    println!("depth, 10% scale bias + 5% noise:");
    println!("  raw          AbsRel {:.4}  RMSE {:.3}  delta1 {:.3}", plain.abs_rel, plain.rmse, plain.delta1);
    println!("  median-scaled AbsRel {:.4}  RMSE {:.3}  delta1 {:.3}", rescaled.abs_rel, rescaled.rmse, rescaled.delta1);

    let cropped = depth_metrics(&pred, &t.depth, 80.0, false, Some(EvalCrop::garg()))?;
    println!("  garg crop    AbsRel {:.4}", cropped.abs_rel);

    let pred_flow = perturb_flow(&t.flow_fwd, 1.5, 9)?;
    let valid = MaskMap::new_filled(64, 96, true);
    let fm = flow_metrics(&pred_flow, &t.flow_fwd, &valid)?;
    println!("flow, 1.5 px noise: EPE {:.3} px, F1 outliers {:.3}", fm.epe, fm.f1_all);

    // a second-frame depth prediction plus the flow prediction feed the
    // scene-flow outlier measure; scale plays the role of focal*baseline
    let pred_next = perturb_depth(&t1.depth, 0.05, 6)?;
    let bad_flow = {
        let mut f = FlowField::zeros(64, 96);
        for y in 0..64 {
            for x in 0..96 {
                f.set(y, x, pred_flow.get(y, x) * 1.4);
            }
        }
        f
    };
    let sm = sceneflow_metrics(
        &pred, &t.depth, &pred_next, &t1.depth, &bad_flow, &t.flow_fwd, &valid, 385.0,
    )?;
    println!(
        "scene flow: D1 {:.3}  D2 {:.3}  F1 {:.3}  SF1 {:.3}",
        sm.d1_all, sm.d2_all, sm.f1_all, sm.sf1_all
    );
    Ok(())
}
