//! Closed-form per-pixel depth from optical flow and relative camera pose.
//!
//! For pixel x with flow o under pose (R, t), the reprojection residual
//! x' × K(R(d·K⁻¹x) + t) with x' = (x+o, 1) is linear in depth:
//! a·d + b, where a = x' × (K·R·K⁻¹·x̃) and b = x' × (K·t). The least-squares
//! depth is d* = −(a·b)/(a·a), and ‖a‖ acts as a parallax score.
//!
//! Dynamic objects violate the static-scene assumption behind this solve, so
//! their pixels come back with systematically wrong depths. That is expected
//! behavior the caller must handle via the validity mask and downstream
//! refinement, not an error.

use nalgebra::{Vector2, Vector3};

use crate::error::{DriftError, Result};
use crate::field::{DepthMap, Field, FlowField, MaskMap};
use crate::geom::{Intrinsics, PoseTransform};

/// Dense triangulation output: least-squares depth, per-pixel parallax score
/// ‖a‖, and the validity mask (parallax above threshold and positive depth).
#[derive(Debug, Clone)]
pub struct TriangulationResult {
    pub depth: DepthMap,
    pub parallax: Field,
    pub validity: MaskMap,
}

/// Per-pixel closed-form solve. Returns (d*, parallax); the pixel is only
/// usable when parallax ≥ tau and d* > 0, which [`triangulate_depth_map`]
/// turns into a mask.
pub fn triangulate_pixel(
    x: Vector2<f64>,
    o: Vector2<f64>,
    pose: &PoseTransform,
    k: &Intrinsics,
) -> (f64, f64) {
    let km = k.matrix();
    let x_h = Vector3::new(x.x, x.y, 1.0);
    let x_next = Vector3::new(x.x + o.x, x.y + o.y, 1.0);
    let a = x_next.cross(&(km * pose.rotation * k.inverse_matrix() * x_h));
    let b = x_next.cross(&(km * pose.translation));
    let aa = a.dot(&a);
    let parallax = aa.sqrt();
    let depth = if aa > 0.0 { -a.dot(&b) / aa } else { f64::NAN };
    (depth, parallax)
}

/// Applies [`triangulate_pixel`] at every pixel of the flow field.
///
/// `tau_parallax` is the minimum ‖a‖ for a usable solve; [`TAU_PARALLAX`] is
/// the default. Invalid pixels keep their raw d* in `parallax`-adjacent
/// diagnostics but store 0 in the depth map when the solve was not finite.
pub fn triangulate_depth_map(
    flow: &FlowField,
    pose: &PoseTransform,
    k: &Intrinsics,
    tau_parallax: f64,
) -> Result<TriangulationResult> {
    let (h, w) = (flow.height(), flow.width());
    if h == 0 || w == 0 {
        return Err(DriftError::invalid("empty flow field"));
    }
    if !(tau_parallax.is_finite() && tau_parallax >= 0.0) {
        return Err(DriftError::invalid("tau_parallax must be non-negative"));
    }
    let mut depth = Field::zeros(h, w, 1);
    let mut parallax = Field::zeros(h, w, 1);
    let mut validity = MaskMap::new_filled(h, w, false);
    for y in 0..h {
        for x in 0..w {
            let pix = Vector2::new(x as f64, y as f64);
            let (d, p) = triangulate_pixel(pix, flow.get(y, x), pose, k);
            parallax.set(y, x, 0, p);
            let ok = p >= tau_parallax && d.is_finite() && d > 0.0;
            depth.set(y, x, 0, if d.is_finite() { d } else { 0.0 });
            validity.set(y, x, ok);
        }
    }
    let depth = DepthMap::new(depth, validity.clone())?;
    Ok(TriangulationResult {
        depth,
        parallax,
        validity,
    })
}
