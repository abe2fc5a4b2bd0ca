//! Built-in invariant suite behind `drift selftest`. Each check re-derives
//! an expected result from scratch (closed forms, double loops, finite
//! differences, analytic scene oracles) and compares the library against it.

use std::panic::{catch_unwind, AssertUnwindSafe};

use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::field::{DepthMap, Field, MaskMap, SceneFlowField};
use crate::io::{TensorData, TensorFile};
use crate::loss::{
    consistency_rev_flow, smoothness_loss, LossWeights,
};
use crate::metrics::depth_metrics;
use crate::optim::{
    gradient, objective, run, ObjectiveInputs, OptimizerConfig, TermToggles, VariationalState,
};
use crate::sampler::{flow_to_coords, occlusion_mask};
use crate::scene::{perturb_depth, render, RenderedFrame, SceneSpec};
use crate::triangulate::{triangulate_depth_map, triangulate_pixel};
use crate::{Image, OCC_ALPHA1, OCC_ALPHA2, TAU_PARALLAX};

type CheckResult = std::result::Result<(), String>;

pub struct CheckOutcome {
    pub name: &'static str,
    pub detail: CheckResult,
}

fn fail(msg: impl Into<String>) -> CheckResult {
    Err(msg.into())
}

fn ensure(cond: bool, msg: impl Into<String>) -> CheckResult {
    if cond {
        Ok(())
    } else {
        fail(msg)
    }
}

/// Pixels whose reference warp stays `margin` px inside the partner frame.
fn interior(t: &RenderedFrame, margin: f64) -> MaskMap {
    let (h, w) = (t.depth.height(), t.depth.width());
    MaskMap::from_fn(h, w, |y, x| {
        let o = t.flow_fwd.get(y, x);
        let (tx, ty) = (x as f64 + o.x, y as f64 + o.y);
        tx >= margin && ty >= margin && tx <= (w - 1) as f64 - margin && ty <= (h - 1) as f64 - margin
    })
}

fn abs_rel(pred: &DepthMap, gt: &DepthMap, on: &MaskMap) -> f64 {
    let mut acc = 0.0;
    let mut n = 0usize;
    for y in 0..gt.height() {
        for x in 0..gt.width() {
            if on.get(y, x) && pred.is_valid(y, x) && gt.is_valid(y, x) {
                acc += (pred.get(y, x) - gt.get(y, x)).abs() / gt.get(y, x);
                n += 1;
            }
        }
    }
    if n == 0 {
        f64::INFINITY
    } else {
        acc / n as f64
    }
}

fn check_triangulation_static() -> CheckResult {
    let spec = SceneSpec::static_two_plane(64, 96);
    let (t, _) = render(&spec).map_err(|e| e.to_string())?;
    let tri = triangulate_depth_map(&t.flow_fwd, &spec.ego_motion, &spec.camera, TAU_PARALLAX)
        .map_err(|e| e.to_string())?;
    let frac = tri.validity.count() as f64 / (64.0 * 96.0);
    ensure(frac >= 0.99, format!("valid fraction {frac}"))?;
    let e = abs_rel(&tri.depth, &t.depth, &tri.validity);
    ensure(e < 1e-6, format!("static AbsRel {e}"))
}

fn check_triangulation_dynamic_failure() -> CheckResult {
    let spec = SceneSpec::one_moving_plane(64, 96);
    let (t, _) = render(&spec).map_err(|e| e.to_string())?;
    let tri = triangulate_depth_map(&t.flow_fwd, &spec.ego_motion, &spec.camera, TAU_PARALLAX)
        .map_err(|e| e.to_string())?;
    // the validity gate drops the whole moving region (negative solved
    // depth), so the closed form is scored before gating there
    let mut moving_px = 0usize;
    let mut moving_valid = 0usize;
    let mut e_mov = 0.0;
    for y in 0..64 {
        for x in 0..96 {
            if t.sceneflow_fwd.get(y, x).norm() > 0.0 {
                moving_px += 1;
                moving_valid += tri.validity.get(y, x) as usize;
                let (d, _) = triangulate_pixel(
                    Vector2::new(x as f64, y as f64),
                    t.flow_fwd.get(y, x),
                    &spec.ego_motion,
                    &spec.camera,
                );
                e_mov += (d - t.depth.get(y, x)).abs() / t.depth.get(y, x);
            }
        }
    }
    ensure(moving_px > 0, "scene has no moving pixels")?;
    let e_mov = e_mov / moving_px as f64;
    ensure(
        moving_valid == 0,
        format!("{moving_valid} impossible depths passed the gate"),
    )?;
    let still = MaskMap::from_fn(64, 96, |y, x| {
        t.sceneflow_fwd.get(y, x).norm() == 0.0 && tri.validity.get(y, x)
    });
    let e_still = abs_rel(&tri.depth, &t.depth, &still);
    ensure(
        e_mov >= 10.0 * e_still,
        format!("moving AbsRel {e_mov} vs static {e_still}"),
    )
}

fn check_losses_zero_at_ground_truth() -> CheckResult {
    let spec = SceneSpec::one_moving_plane(48, 64);
    let (t, t1) = render(&spec).map_err(|e| e.to_string())?;
    let mask = t.same_surface_mask(&t1).and(&interior(&t, 1.0)).erode(1);
    let ld = Field::from_fn(48, 64, 1, |y, x, _| t.depth.get(y, x).ln());
    let state = VariationalState::new(ld, t.sceneflow_fwd.clone()).map_err(|e| e.to_string())?;
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
    let mut terms = TermToggles::all();
    terms.smoothness = false;
    terms.normal_cosine = false;
    let report = objective(&state, &inputs, &terms, &LossWeights::default())
        .map_err(|e| e.to_string())?;
    for (term, v) in report.terms() {
        ensure(v.value < 1e-6, format!("{} = {} at ground truth", term.name(), v.value))?;
    }
    Ok(())
}

fn check_smoothness_ramp() -> CheckResult {
    // constant image, depth d = 2 + x/10: edge weight 1, per-step gap 0.1,
    // mean over the x-differences only, normalized by the mean depth
    let (h, w) = (5, 11);
    let depth = DepthMap::from_fn(h, w, |_, x, _| 2.0 + x as f64 / 10.0).map_err(|e| e.to_string())?;
    let image = Image::from_fn(h, w, 1, |_, _, _| 0.5);
    let got = smoothness_loss(&depth, &image).map_err(|e| e.to_string())?;
    let mean = depth.values.mean();
    let expect = 0.1 / mean;
    ensure(
        (got.value - expect).abs() < 1e-12,
        format!("ramp smoothness {} vs closed form {expect}", got.value),
    )
}

fn check_gradient_finite_differences() -> CheckResult {
    let spec = SceneSpec::static_two_plane(24, 32);
    let (t, t1) = render(&spec).map_err(|e| e.to_string())?;
    let mask = t.same_surface_mask(&t1).and(&interior(&t, 2.0)).erode(1);
    let noisy = perturb_depth(&t.depth, 0.04, 5).map_err(|e| e.to_string())?;
    let ld = Field::from_fn(24, 32, 1, |y, x, _| noisy.get(y, x).max(0.5).ln());
    let state = VariationalState::new(ld, SceneFlowField::zeros(24, 32)).map_err(|e| e.to_string())?;
    let inputs = ObjectiveInputs {
        image_t: &t.image,
        image_next: &t1.image,
        pose: &spec.ego_motion,
        intrinsics: &spec.camera,
        mask: &mask,
        flow_ref: None,
        flow_ref_bwd: None,
        depth_next_ref: None,
        gt_depth: None,
        gt_flow: None,
        gt_sceneflow: None,
        gt_normals: None,
    };
    let terms = TermToggles::self_supervised();
    let weights = LossWeights::default();
    let (_, grad) = gradient(&state, &inputs, &terms, &weights).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let h_fd = 1e-5;
    let mut bad = 0;
    for _ in 0..12 {
        let y = rng.gen_range(0..24);
        let x = rng.gen_range(0..32);
        let analytic = grad.log_depth.get(y, x, 0);
        let mut plus = state.clone();
        let mut minus = state.clone();
        let v = state.log_depth.get(y, x, 0);
        plus.log_depth.set(y, x, 0, v + h_fd);
        minus.log_depth.set(y, x, 0, v - h_fd);
        let f = |s: &VariationalState| {
            objective(s, &inputs, &terms, &weights).map(|r| r.weighted_total())
        };
        let fd = (f(&plus).map_err(|e| e.to_string())? - f(&minus).map_err(|e| e.to_string())?)
            / (2.0 * h_fd);
        let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-6);
        if rel >= 1e-4 {
            bad += 1;
        }
    }
    ensure(bad <= 1, format!("{bad}/12 params disagreed with finite differences"))
}

fn check_occlusion_masks() -> CheckResult {
    let spec = SceneSpec::one_moving_plane(48, 64);
    let (t, _t1) = render(&spec).map_err(|e| e.to_string())?;
    let est = occlusion_mask(&t.flow_fwd, &t.flow_bwd, OCC_ALPHA1, OCC_ALPHA2)
        .map_err(|e| e.to_string())?;
    let iou = est.iou(&t.occlusion_fwd);
    ensure(iou >= 0.9, format!("occlusion IoU {iou}"))?;
    let mask = t.occlusion_fwd.and(&interior(&t, 0.0));
    let loss = consistency_rev_flow(&t.flow_fwd, &t.flow_bwd, &flow_to_coords(&t.flow_fwd), &mask)
        .map_err(|e| e.to_string())?;
    ensure(loss.value < 1e-6, format!("reverse-flow loss {} on co-visible", loss.value))
}

fn check_metrics_against_double_loop() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..20 {
        let gt = DepthMap::from_fn(4, 4, |_, _, _| rng.gen_range(1.0..60.0)).map_err(|e| e.to_string())?;
        let pred =
            DepthMap::from_fn(4, 4, |y, x, _| gt.get(y, x) * rng.gen_range(0.6..1.6)).map_err(|e| e.to_string())?;
        let m = depth_metrics(&pred, &gt, 80.0, false, None).map_err(|e| e.to_string())?;
        // brute-force re-derivation
        let mut absrel = 0.0;
        let mut d1 = 0usize;
        for y in 0..4 {
            for x in 0..4 {
                let (p, g) = (pred.get(y, x), gt.get(y, x));
                absrel += (p - g).abs() / g;
                let r = (p / g).max(g / p);
                if r < 1.25 {
                    d1 += 1;
                }
            }
        }
        absrel /= 16.0;
        ensure(
            (m.abs_rel - absrel).abs() < 1e-12,
            format!("AbsRel {} vs oracle {absrel}", m.abs_rel),
        )?;
        ensure(
            (m.delta1 - d1 as f64 / 16.0).abs() < 1e-12,
            format!("delta1 {} vs oracle {}", m.delta1, d1 as f64 / 16.0),
        )?;
    }
    // boundary: pred exactly 1.25x ground truth fails the strict bound
    let gt = DepthMap::from_fn(2, 2, |_, _, _| 4.0).map_err(|e| e.to_string())?;
    let pred = DepthMap::from_fn(2, 2, |_, _, _| 5.0).map_err(|e| e.to_string())?;
    let m = depth_metrics(&pred, &gt, 80.0, false, None).map_err(|e| e.to_string())?;
    ensure(m.delta1 == 0.0, format!("delta1 at the 1.25 boundary is {}", m.delta1))
}

fn check_tensor_round_trip() -> CheckResult {
    let vals: Vec<f32> = vec![0.0, -0.0, 1.5, f32::INFINITY, f32::from_bits(0x7fc0_0042), -2.25e-41];
    let t = TensorFile::new(vec![3, 2], TensorData::F32(vals.clone())).map_err(|e| e.to_string())?;
    let back = TensorFile::from_bytes(&t.to_bytes()).map_err(|e| e.to_string())?;
    let TensorData::F32(got) = back.data else {
        return fail("dtype changed in round trip");
    };
    for (a, b) in vals.iter().zip(&got) {
        ensure(a.to_bits() == b.to_bits(), format!("bits {:#x} vs {:#x}", a.to_bits(), b.to_bits()))?;
    }
    ensure(back.dims == vec![3, 2], "dims changed in round trip")
}

fn check_optimizer_descends() -> CheckResult {
    let spec = SceneSpec::static_two_plane(24, 32);
    let (t, t1) = render(&spec).map_err(|e| e.to_string())?;
    let mask = t.same_surface_mask(&t1).and(&interior(&t, 2.0)).erode(1);
    let noisy = perturb_depth(&t.depth, 0.3, 9).map_err(|e| e.to_string())?;
    let ld = Field::from_fn(24, 32, 1, |y, x, _| noisy.get(y, x).max(0.5).ln());
    let state = VariationalState::new(ld, SceneFlowField::zeros(24, 32)).map_err(|e| e.to_string())?;
    let inputs = ObjectiveInputs {
        image_t: &t.image,
        image_next: &t1.image,
        pose: &spec.ego_motion,
        intrinsics: &spec.camera,
        mask: &mask,
        flow_ref: None,
        flow_ref_bwd: None,
        depth_next_ref: None,
        gt_depth: None,
        gt_flow: None,
        gt_sceneflow: None,
        gt_normals: None,
    };
    let cfg = OptimizerConfig {
        max_iterations: 120,
        optimize_scene_flow: false,
        ..OptimizerConfig::default()
    };
    let out = run(state, &inputs, &cfg).map_err(|e| e.to_string())?;
    let first = out.trace.first().unwrap().weighted_total;
    let last = out.trace.last().unwrap().weighted_total;
    ensure(
        last < 0.8 * first,
        format!("objective went {first} -> {last} in {} iterations", out.trace.len()),
    )
}

fn check_run_determinism() -> CheckResult {
    let spec = SceneSpec::static_two_plane(16, 24);
    let (t, t1) = render(&spec).map_err(|e| e.to_string())?;
    let mask = t.same_surface_mask(&t1).and(&interior(&t, 2.0)).erode(1);
    let once = || -> Result<Vec<u64>, String> {
        let noisy = perturb_depth(&t.depth, 0.1, 3).map_err(|e| e.to_string())?;
        let ld = Field::from_fn(16, 24, 1, |y, x, _| noisy.get(y, x).max(0.5).ln());
        let state = VariationalState::new(ld, SceneFlowField::zeros(16, 24)).map_err(|e| e.to_string())?;
        let inputs = ObjectiveInputs {
            image_t: &t.image,
            image_next: &t1.image,
            pose: &spec.ego_motion,
            intrinsics: &spec.camera,
            mask: &mask,
            flow_ref: None,
            flow_ref_bwd: None,
            depth_next_ref: None,
            gt_depth: None,
            gt_flow: None,
            gt_sceneflow: None,
            gt_normals: None,
        };
        let cfg = OptimizerConfig {
            max_iterations: 12,
            optimize_scene_flow: false,
            ..OptimizerConfig::default()
        };
        let out = run(state, &inputs, &cfg).map_err(|e| e.to_string())?;
        Ok(out
            .trace
            .iter()
            .map(|r| r.weighted_total.to_bits())
            .chain(out.state.log_depth.data().iter().map(|v| v.to_bits()))
            .collect())
    };
    let a = once()?;
    let b = once()?;
    ensure(a == b, "repeated runs differ bitwise")
}

fn check_projection_cycle() -> CheckResult {
    // backproject∘project is the identity for points in front of the camera
    let k = crate::geom::Intrinsics::new(120.0, 110.0, 31.5, 23.5).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let pix = Vector2::new(rng.gen_range(0.0..63.0), rng.gen_range(0.0..47.0));
        let d = rng.gen_range(0.5..50.0);
        let p = crate::geom::backproject(pix, d, &k).map_err(|e| e.to_string())?;
        let back = crate::geom::project(p, &k).map_err(|e| e.to_string())?;
        ensure(
            (back - pix).norm() < 1e-9,
            format!("projection cycle drift {}", (back - pix).norm()),
        )?;
    }
    Ok(())
}

pub fn run_checks() -> Vec<CheckOutcome> {
    let checks: Vec<(&'static str, fn() -> CheckResult)> = vec![
        ("projection_cycle", check_projection_cycle),
        ("triangulation_static_exact", check_triangulation_static),
        ("triangulation_dynamic_failure", check_triangulation_dynamic_failure),
        ("losses_zero_at_ground_truth", check_losses_zero_at_ground_truth),
        ("smoothness_ramp_closed_form", check_smoothness_ramp),
        ("gradient_finite_differences", check_gradient_finite_differences),
        ("occlusion_masks", check_occlusion_masks),
        ("metrics_double_loop", check_metrics_against_double_loop),
        ("tensor_round_trip", check_tensor_round_trip),
        ("optimizer_descends", check_optimizer_descends),
        ("run_determinism", check_run_determinism),
    ];
    checks
        .into_iter()
        .map(|(name, f)| CheckOutcome {
            name,
            detail: catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
                let msg = p
                    .downcast_ref::<&str>()
                    .map(|s| s.to_string())
                    .or_else(|| p.downcast_ref::<String>().cloned())
                    .unwrap_or_else(|| "panic".into());
                fail(format!("panicked: {msg}"))
            }),
        })
        .collect()
}

/// Prints one line per check and returns the number of failures.
pub fn run_selftest(out: &mut dyn std::io::Write) -> std::io::Result<usize> {
    let outcomes = run_checks();
    let total = outcomes.len();
    let mut failures = 0;
    for check in outcomes {
        match &check.detail {
            Ok(()) => writeln!(out, "pass {}", check.name)?,
            Err(msg) => {
                failures += 1;
                writeln!(out, "FAIL {}: {msg}", check.name)?;
            }
        }
    }
    writeln!(out, "selftest: {total} checks, {failures} failed")?;
    Ok(failures)
}
