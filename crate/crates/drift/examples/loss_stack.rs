//! Evaluates every loss term of the objective at the ground-truth state and
//! again after corrupting the depth, printing the weighted breakdown. The
//! supervised and consistency terms sit at numerical zero on ground truth;
//! only the photometric terms and smoothness carry intrinsic residue.

use drift::field::{Field, MaskMap};
use drift::loss::{LossWeights, MaskedLoss};
use drift::optim::{objective, ObjectiveInputs, TermToggles, VariationalState};
use drift::scene::{perturb_depth, render, RenderedFrame, SceneSpec};

fn co_visible(t: &RenderedFrame, partner: &RenderedFrame) -> MaskMap {
    let (h, w) = (t.depth.height(), t.depth.width());
    let inside = MaskMap::from_fn(h, w, |y, x| {
        let o = t.flow_fwd.get(y, x);
        let (tx, ty) = (x as f64 + o.x, y as f64 + o.y);
        tx >= 1.0 && ty >= 1.0 && tx <= (w - 2) as f64 && ty <= (h - 2) as f64
    });
    t.same_surface_mask(partner).and(&inside).erode(1)
}

fn main() -> Result<(), drift::DriftError> {
    let spec = SceneSpec::one_moving_plane(48, 64);
    let (t, t1) = render(&spec)?;
    let mask = co_visible(&t, &t1);

    let gt_log_depth = Field::from_fn(48, 64, 1, |y, x, _| t.depth.get(y, x).ln());
    let gt_state = VariationalState::new(gt_log_depth, t.sceneflow_fwd.clone())?;

    let noisy = perturb_depth(&t.depth, 0.15, 3)?;
    let bad_log_depth = Field::from_fn(48, 64, 1, |y, x, _| noisy.get(y, x).ln());
    let bad_state = VariationalState::new(bad_log_depth, t.sceneflow_fwd.clone())?;

    let inputs = ObjectiveInputs {
        image_t: &t.image,
        image_next: &t1.image,
        pose: &spec.ego_motion,
        intrinsics: &spec.camera,
        mask: &mask,
        flow_ref: Some(&t.flow_fwd),
        flow_ref_bwd: Some(&t.flow_bwd),
        depth_next_ref: Some(&t1.depth),
        gt_depth: Some(&t.depth),
        gt_flow: Some(&t.flow_fwd),
        gt_sceneflow: Some(&t.sceneflow_fwd),
        gt_normals: Some(&t.normals),
    };

    let weights = LossWeights::default();
    let at_gt = objective(&gt_state, &inputs, &TermToggles::all(), &weights)?;
    let at_bad = objective(&bad_state, &inputs, &TermToggles::all(), &weights)?;

    println!("{:<14} {:>14} {:>10} {:>14}  kind", "term", "at truth", "weight", "15% depth err");
    for (term, gt_val) in at_gt.terms() {
        let bad_val = at_bad.get(term).map_or(f64::NAN, |m: MaskedLoss| m.value);
        println!(
            "{:<14} {:>14.3e} {:>10} {:>14.3e}  {:?}",
            term.name(),
            gt_val.value,
            term.weight(&weights),
            bad_val,
            term.kind()
        );
    }
    println!(
        "weighted total  {:.6e} -> {:.6e}",
        at_gt.weighted_total(),
        at_bad.weighted_total()
    );
    Ok(())
}
