//! Dense per-pixel storage shared by every module.
//!
//! One flat buffer type, [`Field`], backs all typed maps (depth, flow, scene
//! flow, images, normals). Data is row-major with interleaved components, so
//! a single bilinear kernel and a single serializer cover every field kind.

use nalgebra::{Vector2, Vector3};

use crate::error::{DriftError, Result};

/// Row-major dense grid of `comps` interleaved f64 components per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    height: usize,
    width: usize,
    comps: usize,
    data: Vec<f64>,
}

impl Field {
    pub fn zeros(height: usize, width: usize, comps: usize) -> Self {
        assert!(comps >= 1 && comps <= 3, "1..=3 components supported");
        Field {
            height,
            width,
            comps,
            data: vec![0.0; height * width * comps],
        }
    }

    pub fn from_vec(height: usize, width: usize, comps: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * comps {
            return Err(DriftError::ShapeMismatch {
                context: "Field::from_vec".into(),
                expected: format!("{} values", height * width * comps),
                got: format!("{}", data.len()),
            });
        }
        Ok(Field {
            height,
            width,
            comps,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, comps: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut out = Field::zeros(height, width, comps);
        for y in 0..height {
            for x in 0..width {
                for c in 0..comps {
                    let v = f(y, x, c);
                    out.data[(y * width + x) * comps + c] = v;
                }
            }
        }
        out
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn comps(&self) -> usize {
        self.comps
    }

    pub fn len_pixels(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn idx(&self, y: usize, x: usize) -> usize {
        debug_assert!(y < self.height && x < self.width);
        (y * self.width + x) * self.comps
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        debug_assert!(c < self.comps);
        self.data[self.idx(y, x) + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        debug_assert!(c < self.comps);
        let i = self.idx(y, x) + c;
        self.data[i] = v;
    }

    #[inline]
    pub fn add(&mut self, y: usize, x: usize, c: usize, v: f64) {
        let i = self.idx(y, x) + c;
        self.data[i] += v;
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let i = self.idx(y, x);
        &self.data[i..i + self.comps]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn same_shape(&self, other: &Field) -> bool {
        self.height == other.height && self.width == other.width && self.comps == other.comps
    }

    pub fn same_grid(&self, other: &Field) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Mean over every stored component.
    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        stable_sum(&self.data) / self.data.len() as f64
    }
}

/// Fixed-order pairwise summation. Deterministic for a given slice and more
/// accurate than a running sum on long reductions.
pub fn stable_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        2 => values[0] + values[1],
        n => {
            let mid = n / 2;
            stable_sum(&values[..mid]) + stable_sum(&values[mid..])
        }
    }
}

/// Boolean per-pixel mask; `true` marks a usable pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskMap {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl MaskMap {
    pub fn new_filled(height: usize, width: usize, value: bool) -> Self {
        MaskMap {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut m = MaskMap::new_filled(height, width, false);
        for y in 0..height {
            for x in 0..width {
                m.data[y * width + x] = f(y, x);
            }
        }
        m
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn same_shape(&self, other: &MaskMap) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Pixelwise conjunction.
    pub fn and(&self, other: &MaskMap) -> MaskMap {
        assert!(self.same_shape(other));
        MaskMap {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a && b)
                .collect(),
        }
    }

    /// Intersection-over-union against another mask of the same shape.
    pub fn iou(&self, other: &MaskMap) -> f64 {
        assert!(self.same_shape(other));
        let mut inter = 0usize;
        let mut union = 0usize;
        for (a, b) in self.data.iter().zip(&other.data) {
            if *a && *b {
                inter += 1;
            }
            if *a || *b {
                union += 1;
            }
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Keeps a pixel only when every in-bounds neighbor within Chebyshev
    /// distance `radius` is set. Used to pull test masks away from surface
    /// boundaries so windowed statistics see only trusted pixels.
    pub fn erode(&self, radius: usize) -> MaskMap {
        let r = radius as isize;
        MaskMap::from_fn(self.height, self.width, |y, x| {
            if !self.get(y, x) {
                return false;
            }
            for dy in -r..=r {
                for dx in -r..=r {
                    let ny = y as isize + dy;
                    let nx = x as isize + dx;
                    if ny >= 0 && nx >= 0 && (ny as usize) < self.height && (nx as usize) < self.width {
                        if !self.get(ny as usize, nx as usize) {
                            return false;
                        }
                    }
                }
            }
            true
        })
    }
}

/// Per-pixel positive depth in meters plus a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub values: Field,
    pub validity: MaskMap,
}

impl DepthMap {
    pub fn new(values: Field, validity: MaskMap) -> Result<Self> {
        if values.comps() != 1 {
            return Err(DriftError::invalid("DepthMap needs a 1-component field"));
        }
        if values.height() != validity.height() || values.width() != validity.width() {
            return Err(DriftError::ShapeMismatch {
                context: "DepthMap::new".into(),
                expected: format!("{}x{}", values.height(), values.width()),
                got: format!("{}x{}", validity.height(), validity.width()),
            });
        }
        let d = DepthMap { values, validity };
        d.check_valid_values()?;
        Ok(d)
    }

    /// Dense map, every pixel valid.
    pub fn dense(values: Field) -> Result<Self> {
        let validity = MaskMap::new_filled(values.height(), values.width(), true);
        DepthMap::new(values, validity)
    }

    pub fn from_fn(height: usize, width: usize, f: impl FnMut(usize, usize, usize) -> f64) -> Result<Self> {
        DepthMap::dense(Field::from_fn(height, width, 1, f))
    }

    fn check_valid_values(&self) -> Result<()> {
        for y in 0..self.height() {
            for x in 0..self.width() {
                if self.validity.get(y, x) {
                    let d = self.values.get(y, x, 0);
                    if !(d.is_finite() && d > 0.0) {
                        return Err(DriftError::invalid(format!(
                            "depth at ({y},{x}) is {d}, valid depths must be positive and finite"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.values.height()
    }

    pub fn width(&self) -> usize {
        self.values.width()
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values.get(y, x, 0)
    }

    #[inline]
    pub fn is_valid(&self, y: usize, x: usize) -> bool {
        self.validity.get(y, x)
    }
}

/// Per-pixel 2D optical flow in pixels: frame-t pixel `x` maps to `x + flow`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub values: Field,
}

impl FlowField {
    pub fn zeros(height: usize, width: usize) -> Self {
        FlowField {
            values: Field::zeros(height, width, 2),
        }
    }

    pub fn new(values: Field) -> Result<Self> {
        if values.comps() != 2 {
            return Err(DriftError::invalid("FlowField needs a 2-component field"));
        }
        if !values.all_finite() {
            return Err(DriftError::invalid("FlowField values must be finite"));
        }
        Ok(FlowField { values })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> Vector2<f64>) -> Self {
        FlowField {
            values: Field::from_fn(height, width, 2, |y, x, c| f(y, x)[c]),
        }
    }

    pub fn height(&self) -> usize {
        self.values.height()
    }

    pub fn width(&self) -> usize {
        self.values.width()
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> Vector2<f64> {
        let p = self.values.pixel(y, x);
        Vector2::new(p[0], p[1])
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: Vector2<f64>) {
        self.values.set(y, x, 0, v.x);
        self.values.set(y, x, 1, v.y);
    }
}

/// Per-pixel 3D motion in meters, in the frame-t camera coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneFlowField {
    pub values: Field,
}

impl SceneFlowField {
    pub fn zeros(height: usize, width: usize) -> Self {
        SceneFlowField {
            values: Field::zeros(height, width, 3),
        }
    }

    pub fn new(values: Field) -> Result<Self> {
        if values.comps() != 3 {
            return Err(DriftError::invalid("SceneFlowField needs a 3-component field"));
        }
        if !values.all_finite() {
            return Err(DriftError::invalid("SceneFlowField values must be finite"));
        }
        Ok(SceneFlowField { values })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> Vector3<f64>) -> Self {
        SceneFlowField {
            values: Field::from_fn(height, width, 3, |y, x, c| f(y, x)[c]),
        }
    }

    pub fn height(&self) -> usize {
        self.values.height()
    }

    pub fn width(&self) -> usize {
        self.values.width()
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> Vector3<f64> {
        let p = self.values.pixel(y, x);
        Vector3::new(p[0], p[1], p[2])
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: Vector3<f64>) {
        for c in 0..3 {
            self.values.set(y, x, c, v[c]);
        }
    }
}

/// Intensity image, 1 or 3 channels, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub values: Field,
}

impl Image {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        assert!(channels == 1 || channels == 3, "1 or 3 channels");
        Image {
            values: Field::zeros(height, width, channels),
        }
    }

    pub fn new(values: Field) -> Result<Self> {
        if values.comps() != 1 && values.comps() != 3 {
            return Err(DriftError::invalid("Image needs 1 or 3 channels"));
        }
        for &v in values.data() {
            if !(v.is_finite() && (0.0..=1.0).contains(&v)) {
                return Err(DriftError::invalid(format!(
                    "image intensity {v} outside [0,1]"
                )));
            }
        }
        Ok(Image { values })
    }

    pub fn from_fn(height: usize, width: usize, channels: usize, f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        assert!(channels == 1 || channels == 3);
        Image {
            values: Field::from_fn(height, width, channels, f),
        }
    }

    pub fn height(&self) -> usize {
        self.values.height()
    }

    pub fn width(&self) -> usize {
        self.values.width()
    }

    pub fn channels(&self) -> usize {
        self.values.comps()
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.values.get(y, x, c)
    }
}

/// Unit surface normals in the camera frame plus validity.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalMap {
    pub values: Field,
    pub validity: MaskMap,
}

impl NormalMap {
    pub fn new(values: Field, validity: MaskMap) -> Result<Self> {
        if values.comps() != 3 {
            return Err(DriftError::invalid("NormalMap needs a 3-component field"));
        }
        if values.height() != validity.height() || values.width() != validity.width() {
            return Err(DriftError::ShapeMismatch {
                context: "NormalMap::new".into(),
                expected: format!("{}x{}", values.height(), values.width()),
                got: format!("{}x{}", validity.height(), validity.width()),
            });
        }
        Ok(NormalMap { values, validity })
    }

    pub fn height(&self) -> usize {
        self.values.height()
    }

    pub fn width(&self) -> usize {
        self.values.width()
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> Vector3<f64> {
        let p = self.values.pixel(y, x);
        Vector3::new(p[0], p[1], p[2])
    }

    #[inline]
    pub fn is_valid(&self, y: usize, x: usize) -> bool {
        self.validity.get(y, x)
    }
}
