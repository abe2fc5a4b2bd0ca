//! Depth refinement end to end: corrupt the observed flow, triangulate a
//! rough depth seed from it, then descend on the self-supervised objective.
//! Prints the trace as it tightens and the before/after accuracy.

use drift::field::{DepthMap, Field, MaskMap};
use drift::optim::{init_from_triangulation, run, ObjectiveInputs, OptimizerConfig, TermToggles};
use drift::scene::{perturb_flow, render, SceneSpec};
use drift::triangulate::triangulate_depth_map;
use drift::TAU_PARALLAX;

fn abs_rel(pred: &DepthMap, gt: &DepthMap, on: &MaskMap) -> f64 {
    let mut acc = 0.0;
    let mut n = 0;
    for y in 0..gt.height() {
        for x in 0..gt.width() {
            if on.get(y, x) && pred.is_valid(y, x) {
                acc += (pred.get(y, x) - gt.get(y, x)).abs() / gt.get(y, x);
                n += 1;
            }
        }
    }
    acc / n as f64
}

fn main() -> Result<(), drift::DriftError> {
    let spec = SceneSpec::static_two_plane(64, 96);
    let (t, t1) = render(&spec)?;

    let mask = {
        let inside = MaskMap::from_fn(64, 96, |y, x| {
            let o = t.flow_fwd.get(y, x);
            let (tx, ty) = (x as f64 + o.x, y as f64 + o.y);
            tx >= 1.0 && ty >= 1.0 && tx <= 94.0 && ty <= 62.0
        });
        t.same_surface_mask(&t1).and(&inside).erode(1)
    };

    // the optimizer only ever sees this degraded flow
    let observed = perturb_flow(&t.flow_fwd, 0.3, 42)?;
    let tri = triangulate_depth_map(&observed, &spec.ego_motion, &spec.camera, TAU_PARALLAX)?;
    let fill = DepthMap::dense(Field::from_fn(64, 96, 1, |_, _, _| 6.0))?;
    let state = init_from_triangulation(&tri, &fill)?;
    println!(
        "seed from noisy triangulation: AbsRel {:.4}",
        abs_rel(&state.depth_map()?, &t.depth, &mask)
    );

    let inputs = ObjectiveInputs {
        image_t: &t.image,
        image_next: &t1.image,
        pose: &spec.ego_motion,
        intrinsics: &spec.camera,
        mask: &mask,
        flow_ref: Some(&observed),
        flow_ref_bwd: None,
        depth_next_ref: None,
        gt_depth: None,
        gt_flow: None,
        gt_sceneflow: None,
        gt_normals: None,
    };
    let mut terms = TermToggles::self_supervised();
    terms.opt_mot = true;
    let cfg = OptimizerConfig {
        max_iterations: 400,
        tolerance: 1e-12,
        optimize_scene_flow: false,
        terms,
        ..OptimizerConfig::default()
    };

    let out = run(state, &inputs, &cfg)?;
    for row in out.trace.iter().step_by(50) {
        println!(
            "iter {:>4}  objective {:.6}  |grad| {:.3e}",
            row.iteration, row.weighted_total, row.grad_norm
        );
    }
    let last = out.trace.last().unwrap();
    println!("iter {:>4}  objective {:.6}  |grad| {:.3e}", last.iteration, last.weighted_total, last.grad_norm);
    println!(
        "stopped after {} iterations ({:?}): AbsRel {:.4}",
        out.trace.len(),
        out.stop,
        abs_rel(&out.state.depth_map()?, &t.depth, &mask)
    );
    Ok(())
}
