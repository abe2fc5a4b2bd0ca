//! Differentiable bilinear sampling, view synthesis by flow or by motion,
//! and forward-backward occlusion masks.
//!
//! Sampling convention: a coordinate is in bounds when 0 ≤ x ≤ W−1 and
//! 0 ≤ y ≤ H−1 (pixel centers at integers). Out-of-bounds samples return 0
//! with mask false. The interpolation cell is [floor(x), floor(x)+1] clamped
//! to the grid, which makes the coordinate derivative right-sided at integer
//! kinks and well defined on the last row/column.

use nalgebra::Vector2;

use crate::error::{DriftError, Result};
use crate::field::{Field, FlowField, Image, MaskMap};
use crate::geom::{flow_from_motion, Intrinsics, PoseTransform};
use crate::field::{DepthMap, SceneFlowField};

/// Interpolation cell for one sample location.
#[derive(Debug, Clone, Copy)]
struct Cell {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
    fx: f64,
    fy: f64,
}

#[inline]
fn cell(h: usize, w: usize, x: f64, y: f64) -> Option<Cell> {
    if !(x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64) {
        return None;
    }
    let (x0, x1, fx) = if w >= 2 {
        let x0 = (x.floor() as usize).min(w - 2);
        (x0, x0 + 1, x - x0 as f64)
    } else {
        (0, 0, 0.0)
    };
    let (y0, y1, fy) = if h >= 2 {
        let y0 = (y.floor() as usize).min(h - 2);
        (y0, y0 + 1, y - y0 as f64)
    } else {
        (0, 0, 0.0)
    };
    Some(Cell {
        x0,
        y0,
        x1,
        y1,
        fx,
        fy,
    })
}

/// Samples every component of `field` at one real-valued location.
/// Returns up to 3 component values and whether the location was in bounds.
#[inline]
pub fn sample_at(field: &Field, x: f64, y: f64) -> ([f64; 3], bool) {
    let mut out = [0.0; 3];
    let Some(c) = cell(field.height(), field.width(), x, y) else {
        return (out, false);
    };
    let (w00, w10) = ((1.0 - c.fy) * (1.0 - c.fx), (1.0 - c.fy) * c.fx);
    let (w01, w11) = (c.fy * (1.0 - c.fx), c.fy * c.fx);
    let p00 = field.pixel(c.y0, c.x0);
    let p10 = field.pixel(c.y0, c.x1);
    let p01 = field.pixel(c.y1, c.x0);
    let p11 = field.pixel(c.y1, c.x1);
    for i in 0..field.comps() {
        out[i] = w00 * p00[i] + w10 * p10[i] + w01 * p01[i] + w11 * p11[i];
    }
    (out, true)
}

/// Coordinate derivative of [`sample_at`]: (∂value/∂x, ∂value/∂y) per
/// component. Right-sided at integer coordinates by cell construction.
#[inline]
pub fn sample_grad_at(field: &Field, x: f64, y: f64) -> ([Vector2<f64>; 3], bool) {
    let mut out = [Vector2::zeros(); 3];
    let Some(c) = cell(field.height(), field.width(), x, y) else {
        return (out, false);
    };
    let p00 = field.pixel(c.y0, c.x0);
    let p10 = field.pixel(c.y0, c.x1);
    let p01 = field.pixel(c.y1, c.x0);
    let p11 = field.pixel(c.y1, c.x1);
    for i in 0..field.comps() {
        let dx = (1.0 - c.fy) * (p10[i] - p00[i]) + c.fy * (p11[i] - p01[i]);
        let dy = (1.0 - c.fx) * (p01[i] - p00[i]) + c.fx * (p11[i] - p10[i]);
        out[i] = Vector2::new(dx, dy);
    }
    (out, true)
}

/// Dense bilinear sampling of `field` at per-pixel coordinates.
/// `coords` must have 2 components (x, y); output has the grid of `coords`
/// and the components of `field`.
pub fn bilinear_sample(field: &Field, coords: &Field) -> Result<(Field, MaskMap)> {
    if coords.comps() != 2 {
        return Err(DriftError::invalid("coords field needs 2 components"));
    }
    let (h, w) = (coords.height(), coords.width());
    let mut out = Field::zeros(h, w, field.comps());
    let mut mask = MaskMap::new_filled(h, w, false);
    for y in 0..h {
        for x in 0..w {
            let p = coords.pixel(y, x);
            let (v, ok) = sample_at(field, p[0], p[1]);
            if ok {
                for i in 0..field.comps() {
                    out.set(y, x, i, v[i]);
                }
                mask.set(y, x, true);
            }
        }
    }
    Ok((out, mask))
}

/// Backward pass of [`bilinear_sample`]: given the upstream cotangent of the
/// sampled output, returns the gradient w.r.t. the coordinates (per output
/// pixel) and w.r.t. the source field (scattered to the 4 tap pixels).
pub fn bilinear_sample_grad(
    field: &Field,
    coords: &Field,
    upstream: &Field,
) -> Result<(Field, Field)> {
    if coords.comps() != 2 {
        return Err(DriftError::invalid("coords field needs 2 components"));
    }
    if upstream.height() != coords.height()
        || upstream.width() != coords.width()
        || upstream.comps() != field.comps()
    {
        return Err(DriftError::ShapeMismatch {
            context: "bilinear_sample_grad".into(),
            expected: format!(
                "{}x{}x{}",
                coords.height(),
                coords.width(),
                field.comps()
            ),
            got: format!(
                "{}x{}x{}",
                upstream.height(),
                upstream.width(),
                upstream.comps()
            ),
        });
    }
    let mut d_coords = Field::zeros(coords.height(), coords.width(), 2);
    let mut d_field = Field::zeros(field.height(), field.width(), field.comps());
    for y in 0..coords.height() {
        for x in 0..coords.width() {
            let p = coords.pixel(y, x);
            let Some(c) = cell(field.height(), field.width(), p[0], p[1]) else {
                continue;
            };
            let up = upstream.pixel(y, x);
            let p00 = field.pixel(c.y0, c.x0);
            let p10 = field.pixel(c.y0, c.x1);
            let p01 = field.pixel(c.y1, c.x0);
            let p11 = field.pixel(c.y1, c.x1);
            let mut gx = 0.0;
            let mut gy = 0.0;
            for i in 0..field.comps() {
                gx += up[i] * ((1.0 - c.fy) * (p10[i] - p00[i]) + c.fy * (p11[i] - p01[i]));
                gy += up[i] * ((1.0 - c.fx) * (p01[i] - p00[i]) + c.fx * (p11[i] - p10[i]));
            }
            d_coords.set(y, x, 0, gx);
            d_coords.set(y, x, 1, gy);
            let (w00, w10) = ((1.0 - c.fy) * (1.0 - c.fx), (1.0 - c.fy) * c.fx);
            let (w01, w11) = (c.fy * (1.0 - c.fx), c.fy * c.fx);
            for i in 0..field.comps() {
                d_field.add(c.y0, c.x0, i, w00 * up[i]);
                d_field.add(c.y0, c.x1, i, w10 * up[i]);
                d_field.add(c.y1, c.x0, i, w01 * up[i]);
                d_field.add(c.y1, c.x1, i, w11 * up[i]);
            }
        }
    }
    Ok((d_coords, d_field))
}

/// Per-pixel sample coordinates x + o for a flow field.
pub fn flow_to_coords(flow: &FlowField) -> Field {
    Field::from_fn(flow.height(), flow.width(), 2, |y, x, c| {
        let o = flow.values.pixel(y, x);
        if c == 0 {
            x as f64 + o[0]
        } else {
            y as f64 + o[1]
        }
    })
}

/// Synthesizes the frame-t view from the next image: Î(x) = I_next⟨x + o⟩.
pub fn warp_by_flow(i_next: &Image, flow: &FlowField) -> Result<(Image, MaskMap)> {
    if i_next.height() != flow.height() || i_next.width() != flow.width() {
        return Err(DriftError::ShapeMismatch {
            context: "warp_by_flow".into(),
            expected: format!("{}x{}", i_next.height(), i_next.width()),
            got: format!("{}x{}", flow.height(), flow.width()),
        });
    }
    let coords = flow_to_coords(flow);
    let (values, mask) = bilinear_sample(&i_next.values, &coords)?;
    Ok((Image { values }, mask))
}

/// Synthesizes the frame-t view by projecting depth + scene flow through the
/// pose and sampling the next image there. Exactly the composition of
/// [`flow_from_motion`] and [`warp_by_flow`]; behind-camera and out-of-bounds
/// pixels are masked false.
pub fn warp_by_motion(
    i_next: &Image,
    depth: &DepthMap,
    sceneflow: &SceneFlowField,
    pose: &PoseTransform,
    k: &Intrinsics,
) -> Result<(Image, MaskMap)> {
    if i_next.height() != depth.height() || i_next.width() != depth.width() {
        return Err(DriftError::ShapeMismatch {
            context: "warp_by_motion".into(),
            expected: format!("{}x{}", i_next.height(), i_next.width()),
            got: format!("{}x{}", depth.height(), depth.width()),
        });
    }
    let (flow, valid) = flow_from_motion(depth, sceneflow, pose, k)?;
    let (img, in_bounds) = warp_by_flow(i_next, &flow)?;
    Ok((img, valid.and(&in_bounds)))
}

/// Forward-backward occlusion check. A pixel is visible when the round-trip
/// flow residual is small relative to the flow magnitudes:
/// ‖o_f + o_b⟨x+o_f⟩‖² < alpha1·(‖o_f‖² + ‖o_b⟨x+o_f⟩‖²) + alpha2,
/// and x + o_f lands inside the image.
pub fn occlusion_mask(
    flow_fwd: &FlowField,
    flow_bwd: &FlowField,
    alpha1: f64,
    alpha2: f64,
) -> Result<MaskMap> {
    if flow_fwd.height() != flow_bwd.height() || flow_fwd.width() != flow_bwd.width() {
        return Err(DriftError::ShapeMismatch {
            context: "occlusion_mask".into(),
            expected: format!("{}x{}", flow_fwd.height(), flow_fwd.width()),
            got: format!("{}x{}", flow_bwd.height(), flow_bwd.width()),
        });
    }
    let (h, w) = (flow_fwd.height(), flow_fwd.width());
    let mut mask = MaskMap::new_filled(h, w, false);
    for y in 0..h {
        for x in 0..w {
            let of = flow_fwd.get(y, x);
            let (ob, ok) = sample_at(&flow_bwd.values, x as f64 + of.x, y as f64 + of.y);
            if !ok {
                continue;
            }
            let ob = Vector2::new(ob[0], ob[1]);
            let residual = (of + ob).norm_squared();
            let bound = alpha1 * (of.norm_squared() + ob.norm_squared()) + alpha2;
            mask.set(y, x, residual < bound);
        }
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{OCC_ALPHA1, OCC_ALPHA2};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn smooth_image(h: usize, w: usize) -> Image {
        Image::from_fn(h, w, 1, |y, x, _| {
            0.5 + 0.3 * ((x as f64) / 3.0).sin() * ((y as f64) / 4.0).cos()
        })
    }

    #[test]
    fn identity_coords_is_bit_exact_identity() {
        let img = smooth_image(7, 9);
        let coords = Field::from_fn(7, 9, 2, |y, x, c| if c == 0 { x as f64 } else { y as f64 });
        let (out, mask) = bilinear_sample(&img.values, &coords).unwrap();
        assert_eq!(mask.count(), 63);
        assert_eq!(out.data(), img.values.data());
    }

    #[test]
    fn midpoint_of_two_pixels() {
        let f = Field::from_vec(1, 2, 1, vec![0.0, 1.0]).unwrap();
        let (v, ok) = sample_at(&f, 0.5, 0.0);
        assert!(ok);
        assert_relative_eq!(v[0], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn out_of_bounds_returns_zero_and_false() {
        let f = Field::from_vec(1, 2, 1, vec![3.0, 4.0]).unwrap();
        for (x, y) in [(-0.01, 0.0), (1.01, 0.0), (0.5, 0.5), (0.5, -0.5)] {
            let (v, ok) = sample_at(&f, x, y);
            assert!(!ok);
            assert_eq!(v[0], 0.0);
        }
    }

    #[test]
    fn sample_stays_in_neighbor_hull() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let img = Image::from_fn(6, 8, 1, |_, _, _| rng.gen::<f64>());
        for _ in 0..500 {
            let x = rng.gen::<f64>() * 7.0;
            let y = rng.gen::<f64>() * 5.0;
            let (v, ok) = sample_at(&img.values, x, y);
            assert!(ok);
            let (x0, y0) = (x.floor().min(6.0) as usize, y.floor().min(4.0) as usize);
            let vals = [
                img.get(y0, x0, 0),
                img.get(y0, x0 + 1, 0),
                img.get(y0 + 1, x0, 0),
                img.get(y0 + 1, x0 + 1, 0),
            ];
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(v[0] >= lo - 1e-12 && v[0] <= hi + 1e-12);
        }
    }

    #[test]
    fn grad_zero_on_constant_image() {
        let f = Field::from_fn(4, 4, 1, |_, _, _| 0.7);
        let (g, ok) = sample_grad_at(&f, 1.3, 2.6);
        assert!(ok);
        assert_eq!(g[0], Vector2::zeros());
    }

    #[test]
    fn grad_of_linear_ramp() {
        let f = Field::from_vec(1, 2, 1, vec![0.0, 1.0]).unwrap();
        let (g, ok) = sample_grad_at(&f, 0.25, 0.0);
        assert!(ok);
        assert_relative_eq!(g[0].x, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn grad_matches_central_differences_off_kinks() {
        let img = smooth_image(9, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = 1e-4;
        for _ in 0..200 {
            // keep 0.1 away from integer kinks so both FD probes share a cell
            let x = rng.gen_range(0..10) as f64 + rng.gen_range(0.1..0.9);
            let y = rng.gen_range(0..8) as f64 + rng.gen_range(0.1..0.9);
            let (g, ok) = sample_grad_at(&img.values, x, y);
            assert!(ok);
            let fd_x = (sample_at(&img.values, x + h, y).0[0] - sample_at(&img.values, x - h, y).0[0]) / (2.0 * h);
            let fd_y = (sample_at(&img.values, x, y + h).0[0] - sample_at(&img.values, x, y - h).0[0]) / (2.0 * h);
            let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1e-9);
            assert!(rel(g[0].x, fd_x) < 1e-4, "dx {} vs {}", g[0].x, fd_x);
            assert!(rel(g[0].y, fd_y) < 1e-4, "dy {} vs {}", g[0].y, fd_y);
        }
    }

    #[test]
    fn grad_scatter_conserves_upstream_mass() {
        let img = smooth_image(5, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let coords = Field::from_fn(5, 6, 2, |_, _, c| {
            if c == 0 {
                rng.gen_range(0.0..5.0)
            } else {
                rng.gen_range(0.0..4.0)
            }
        });
        let upstream = Field::from_fn(5, 6, 1, |y, x, _| 1.0 + 0.1 * (y * 6 + x) as f64);
        let (_, d_field) = bilinear_sample_grad(&img.values, &coords, &upstream).unwrap();
        let total_up: f64 = upstream.data().iter().sum();
        let total_scatter: f64 = d_field.data().iter().sum();
        // the 4 cell weights always sum to 1, so mass is conserved in bounds
        assert_relative_eq!(total_scatter, total_up, epsilon = 1e-9);
    }

    #[test]
    fn warp_zero_flow_is_identity() {
        let img = smooth_image(5, 7);
        let (out, mask) = warp_by_flow(&img, &FlowField::zeros(5, 7)).unwrap();
        assert_eq!(out.values.data(), img.values.data());
        assert_eq!(mask.count(), 35);
    }

    #[test]
    fn warp_integer_shift_moves_ramp() {
        let img = Image::from_fn(2, 4, 1, |_, x, _| x as f64 / 10.0);
        let flow = FlowField::from_fn(2, 4, |_, _| Vector2::new(1.0, 0.0));
        let (out, mask) = warp_by_flow(&img, &flow).unwrap();
        for y in 0..2 {
            for x in 0..3 {
                assert!(mask.get(y, x));
                assert_relative_eq!(out.get(y, x, 0), (x + 1) as f64 / 10.0);
            }
            assert!(!mask.get(y, 3));
            assert_eq!(out.get(y, 3, 0), 0.0);
        }
    }

    #[test]
    fn warp_by_motion_identity_setup() {
        let img = smooth_image(4, 5);
        let depth = DepthMap::from_fn(4, 5, |_, _, _| 2.5).unwrap();
        let s = SceneFlowField::zeros(4, 5);
        let k = Intrinsics::new(40.0, 40.0, 2.0, 1.5).unwrap();
        let (out, mask) =
            warp_by_motion(&img, &depth, &s, &PoseTransform::identity(), &k).unwrap();
        assert_eq!(out.values.data(), img.values.data());
        assert_eq!(mask.count(), 20);
    }

    #[test]
    fn warp_by_motion_equals_flow_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let img = smooth_image(6, 8);
        let depth = DepthMap::from_fn(6, 8, |_, _, _| 4.0 + rng.gen::<f64>()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let s = SceneFlowField::from_fn(6, 8, |_, _| {
            nalgebra::Vector3::new(rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()) * 0.05
        });
        let k = Intrinsics::new(30.0, 32.0, 3.5, 2.5).unwrap();
        let pose = PoseTransform::from_axis_angle(
            nalgebra::Vector3::new(0.0, 0.01, 0.0),
            nalgebra::Vector3::new(-0.05, 0.0, 0.02),
        );
        let (direct, m1) = warp_by_motion(&img, &depth, &s, &pose, &k).unwrap();
        let (flow, mv) = flow_from_motion(&depth, &s, &pose, &k).unwrap();
        let (via_flow, m2) = warp_by_flow(&img, &flow).unwrap();
        for (a, b) in direct.values.data().iter().zip(via_flow.values.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(m1, mv.and(&m2));
    }

    #[test]
    fn occlusion_consistent_pair_all_visible() {
        let fwd = FlowField::from_fn(8, 8, |_, _| Vector2::new(1.25, -0.5));
        let bwd = FlowField::from_fn(8, 8, |_, _| Vector2::new(-1.25, 0.5));
        let mask = occlusion_mask(&fwd, &bwd, OCC_ALPHA1, OCC_ALPHA2).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let in_bounds = (x as f64 + 1.25) <= 7.0 && (y as f64 - 0.5) >= 0.0;
                assert_eq!(mask.get(y, x), in_bounds, "at ({y},{x})");
            }
        }
    }

    #[test]
    fn occlusion_threshold_algebra_with_zero_backward() {
        // with o_b = 0: visible iff ‖o_f‖²(1 − alpha1) < alpha2
        let limit = (OCC_ALPHA2 / (1.0 - OCC_ALPHA1)).sqrt();
        for (mag, expect) in [(limit * 0.98, true), (limit * 1.02, false)] {
            let fwd = FlowField::from_fn(4, 40, |_, _| Vector2::new(mag, 0.0));
            let bwd = FlowField::from_fn(4, 40, |_, _| Vector2::new(0.0, 0.0));
            let mask = occlusion_mask(&fwd, &bwd, OCC_ALPHA1, OCC_ALPHA2).unwrap();
            assert_eq!(mask.get(2, 10), expect, "magnitude {mag}");
        }
    }
}
