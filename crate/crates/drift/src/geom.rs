//! Pinhole camera model, rigid transforms, and the dense projection
//! operations everything else builds on.
//!
//! Coordinate conventions (used across the whole crate):
//! pixel centers at integer coordinates, origin top-left, x right, y down;
//! camera frame right-handed with z forward, so depth is the camera-frame
//! z-coordinate.

use nalgebra::{Matrix3, Vector2, Vector3};

use crate::error::{DriftError, Result};
use crate::field::{DepthMap, Field, FlowField, MaskMap, NormalMap, SceneFlowField};
use crate::EPSILON_Z;

/// Pinhole intrinsics; no distortion model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        let k = Intrinsics { fx, fy, cx, cy };
        if !(fx.is_finite() && fy.is_finite() && cx.is_finite() && cy.is_finite()) {
            return Err(DriftError::invalid("intrinsics must be finite"));
        }
        if fx <= 0.0 || fy <= 0.0 {
            return Err(DriftError::invalid("focal lengths must be positive"));
        }
        Ok(k)
    }

    /// Unit-depth viewing ray through pixel `x`: K⁻¹·(x, y, 1).
    #[inline]
    pub fn ray(&self, x: Vector2<f64>) -> Vector3<f64> {
        Vector3::new((x.x - self.cx) / self.fx, (x.y - self.cy) / self.fy, 1.0)
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn inverse_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }
}

/// Rigid transform X ↦ R·X + t mapping frame-t camera coordinates of a
/// static point into frame-t+1 camera coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl PoseTransform {
    pub fn identity() -> Self {
        PoseTransform {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Validates orthonormality and det = +1 within 1e-9.
    pub fn from_parts(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let t = PoseTransform {
            rotation,
            translation,
        };
        t.validate()?;
        Ok(t)
    }

    /// Rotation given as a scaled axis (angle = vector norm, radians).
    pub fn from_axis_angle(axis_angle: Vector3<f64>, translation: Vector3<f64>) -> Self {
        let rotation = nalgebra::Rotation3::from_scaled_axis(axis_angle);
        PoseTransform {
            rotation: *rotation.matrix(),
            translation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        let gram = r.transpose() * r;
        let mut worst: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((gram[(i, j)] - target).abs());
            }
        }
        if worst > 1e-9 {
            return Err(DriftError::invalid(format!(
                "rotation not orthonormal, max |RᵀR - I| = {worst:.3e}"
            )));
        }
        if (r.determinant() - 1.0).abs() > 1e-9 {
            return Err(DriftError::invalid("rotation determinant must be +1"));
        }
        if !self.translation.iter().all(|v| v.is_finite()) {
            return Err(DriftError::invalid("translation must be finite"));
        }
        Ok(())
    }

    #[inline]
    pub fn apply(&self, x: Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    pub fn inverse(&self) -> PoseTransform {
        let rt = self.rotation.transpose();
        PoseTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn compose_after(&self, first: &PoseTransform) -> PoseTransform {
        PoseTransform {
            rotation: self.rotation * first.rotation,
            translation: self.rotation * first.translation + self.translation,
        }
    }
}

/// Lifts pixel `x` with depth `d` to the camera-frame point d·K⁻¹·(x,y,1).
pub fn backproject(x: Vector2<f64>, d: f64, k: &Intrinsics) -> Result<Vector3<f64>> {
    if !(d.is_finite() && d > 0.0) {
        return Err(DriftError::invalid(format!("depth must be positive, got {d}")));
    }
    Ok(k.ray(x) * d)
}

/// Perspective projection with division; points at or behind z = epsilon_z
/// are rejected.
pub fn project(p: Vector3<f64>, k: &Intrinsics) -> Result<Vector2<f64>> {
    if !(p.z > EPSILON_Z) {
        return Err(DriftError::BehindCamera(format!(
            "z = {} ≤ {}",
            p.z, EPSILON_Z
        )));
    }
    Ok(Vector2::new(
        k.fx * p.x / p.z + k.cx,
        k.fy * p.y / p.z + k.cy,
    ))
}

/// Dense motion-to-flow projection: lifts every valid pixel with its depth,
/// adds scene flow, applies the pose, reprojects, and subtracts the pixel
/// coordinate. Pixels with invalid depth or a transformed point at or behind
/// z = epsilon_z come back masked out with zero flow.
pub fn flow_from_motion(
    depth: &DepthMap,
    sceneflow: &SceneFlowField,
    pose: &PoseTransform,
    k: &Intrinsics,
) -> Result<(FlowField, MaskMap)> {
    if depth.height() != sceneflow.height() || depth.width() != sceneflow.width() {
        return Err(DriftError::ShapeMismatch {
            context: "flow_from_motion".into(),
            expected: format!("{}x{}", depth.height(), depth.width()),
            got: format!("{}x{}", sceneflow.height(), sceneflow.width()),
        });
    }
    let (h, w) = (depth.height(), depth.width());
    let mut flow = FlowField::zeros(h, w);
    let mut mask = MaskMap::new_filled(h, w, false);
    for y in 0..h {
        for x in 0..w {
            if !depth.is_valid(y, x) {
                continue;
            }
            let pix = Vector2::new(x as f64, y as f64);
            let p = k.ray(pix) * depth.get(y, x) + sceneflow.get(y, x);
            let q = pose.apply(p);
            if q.z > EPSILON_Z {
                let proj = Vector2::new(k.fx * q.x / q.z + k.cx, k.fy * q.y / q.z + k.cy);
                flow.set(y, x, proj - pix);
                mask.set(y, x, true);
            }
        }
    }
    Ok((flow, mask))
}

/// Surface normals from forward differences of backprojected points.
///
/// n = (X_{u+1,v} − X_{u,v}) × (X_{u,v+1} − X_{u,v}), unit length, oriented
/// so the z-component is non-negative. The final row and column replicate
/// their last interior neighbor. Pixels touching invalid depth, or with a
/// degenerate cross product, are flagged invalid.
pub fn compute_normals(depth: &DepthMap, k: &Intrinsics) -> Result<NormalMap> {
    let (h, w) = (depth.height(), depth.width());
    if h < 2 || w < 2 {
        return Err(DriftError::invalid(
            "compute_normals needs at least a 2x2 depth map",
        ));
    }
    let mut values = Field::zeros(h, w, 3);
    let mut validity = MaskMap::new_filled(h, w, false);
    let point = |y: usize, x: usize| -> Vector3<f64> {
        k.ray(Vector2::new(x as f64, y as f64)) * depth.get(y, x)
    };
    for y in 0..h - 1 {
        for x in 0..w - 1 {
            if !(depth.is_valid(y, x) && depth.is_valid(y, x + 1) && depth.is_valid(y + 1, x)) {
                continue;
            }
            let p = point(y, x);
            let du = point(y, x + 1) - p;
            let dv = point(y + 1, x) - p;
            let mut c = du.cross(&dv);
            let n = c.norm();
            if n == 0.0 || !n.is_finite() {
                continue;
            }
            if c.z < 0.0 {
                c = -c;
            }
            c /= c.norm();
            for i in 0..3 {
                values.set(y, x, i, c[i]);
            }
            validity.set(y, x, true);
        }
    }
    for y in 0..h - 1 {
        for i in 0..3 {
            let v = values.get(y, w - 2, i);
            values.set(y, w - 1, i, v);
        }
        validity.set(y, w - 1, validity.get(y, w - 2));
    }
    for x in 0..w {
        let sx = if x == w - 1 { w - 2 } else { x };
        for i in 0..3 {
            let v = values.get(h - 2, sx, i);
            values.set(h - 1, x, i, v);
        }
        validity.set(h - 1, x, validity.get(h - 2, sx));
    }
    NormalMap::new(values, validity)
}
