//! On-disk formats: the DRFT tensor container, KITTI-style 16-bit PNGs,
//! flat key=value records, optimization trace CSVs, and the TOML run
//! configuration.
//!
//! Every writer is the inverse of its reader up to documented quantization;
//! the tensor container round-trips bit-exactly. Nothing here depends on
//! wall-clock time or environment, so artifacts are byte-reproducible.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DriftError, Result};
use crate::field::{DepthMap, Field, FlowField, Image, MaskMap};
use crate::geom::{Intrinsics, PoseTransform};
use crate::loss::{LossReport, LossWeights};
use crate::metrics::EvalCrop;
use crate::optim::{OptimizerConfig, TermToggles, TraceRow};
use crate::scene::SceneSpec;
use crate::{OCC_ALPHA1, OCC_ALPHA2, TAU_PARALLAX};

const MAGIC: &[u8; 4] = b"DRFT";
const VERSION: u16 = 1;

/// Payload of a [`TensorFile`].
#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    Bool(Vec<bool>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::Bool(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Row-major binary tensor: magic, version, dtype, rank, dims, payload, all
/// little-endian.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub dims: Vec<u32>,
    pub data: TensorData,
}

impl TensorFile {
    pub fn new(dims: Vec<u32>, data: TensorData) -> Result<TensorFile> {
        let expect: u64 = dims.iter().map(|&d| d as u64).product();
        if expect != data.len() as u64 {
            return Err(DriftError::invalid(format!(
                "tensor payload holds {} elements but dims {:?} require {}",
                data.len(),
                dims,
                expect
            )));
        }
        if dims.len() > u8::MAX as usize {
            return Err(DriftError::invalid("tensor rank exceeds 255"));
        }
        Ok(TensorFile { dims, data })
    }

    /// [h, w, c] float tensor from a field (f64 narrowed to f32).
    pub fn from_field(f: &Field) -> TensorFile {
        let data = f.data().iter().map(|&v| v as f32).collect();
        TensorFile {
            dims: vec![f.height() as u32, f.width() as u32, f.comps() as u32],
            data: TensorData::F32(data),
        }
    }

    /// [h, w] boolean tensor from a mask.
    pub fn from_mask(m: &MaskMap) -> TensorFile {
        TensorFile {
            dims: vec![m.height() as u32, m.width() as u32],
            data: TensorData::Bool(m.data().to_vec()),
        }
    }

    /// Interprets a rank-2 or rank-3 float tensor as a field.
    pub fn to_field(&self) -> Result<Field> {
        let TensorData::F32(vals) = &self.data else {
            return Err(DriftError::format("expected a float tensor"));
        };
        let (h, w, c) = match self.dims.as_slice() {
            [h, w] => (*h, *w, 1),
            [h, w, c] => (*h, *w, *c),
            other => {
                return Err(DriftError::format(format!(
                    "expected rank 2 or 3 tensor, got dims {other:?}"
                )))
            }
        };
        Field::from_vec(
            h as usize,
            w as usize,
            c as usize,
            vals.iter().map(|&v| v as f64).collect(),
        )
    }

    pub fn to_mask(&self) -> Result<MaskMap> {
        let TensorData::Bool(vals) = &self.data else {
            return Err(DriftError::format("expected a boolean tensor"));
        };
        let [h, w] = self.dims.as_slice() else {
            return Err(DriftError::format(format!(
                "expected rank 2 mask tensor, got dims {:?}",
                self.dims
            )));
        };
        let (h, w) = (*h as usize, *w as usize);
        let mut i = 0;
        Ok(MaskMap::from_fn(h, w, |_, _| {
            let v = vals[i];
            i += 1;
            v
        }))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(16 + self.data.len() * 4);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.push(match self.data {
            TensorData::F32(_) => 0,
            TensorData::Bool(_) => 1,
        });
        buf.push(self.dims.len() as u8);
        for d in &self.dims {
            buf.extend_from_slice(&d.to_le_bytes());
        }
        match &self.data {
            TensorData::F32(vals) => {
                for v in vals {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
            TensorData::Bool(vals) => buf.extend(vals.iter().map(|&b| b as u8)),
        }
        buf
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<TensorFile> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<TensorFile> {
        let take = |off: usize, n: usize| -> Result<&[u8]> {
            bytes
                .get(off..off + n)
                .ok_or_else(|| DriftError::format("tensor file truncated"))
        };
        if take(0, 4)? != MAGIC {
            return Err(DriftError::format("bad tensor magic, expected DRFT"));
        }
        let version = u16::from_le_bytes(take(4, 2)?.try_into().unwrap());
        if version != VERSION {
            return Err(DriftError::format(format!("unsupported tensor version {version}")));
        }
        let dtype = take(6, 1)?[0];
        let rank = take(7, 1)?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for i in 0..rank {
            dims.push(u32::from_le_bytes(take(8 + 4 * i, 4)?.try_into().unwrap()));
        }
        let off = 8 + 4 * rank;
        let count: u64 = dims.iter().map(|&d| d as u64).product();
        let count = usize::try_from(count).map_err(|_| DriftError::format("tensor too large"))?;
        let payload = &bytes[off.min(bytes.len())..];
        let data = match dtype {
            0 => {
                if payload.len() != count * 4 {
                    return Err(DriftError::format(format!(
                        "float payload is {} bytes, dims {:?} require {}",
                        payload.len(),
                        dims,
                        count * 4
                    )));
                }
                TensorData::F32(
                    payload
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                )
            }
            1 => {
                if payload.len() != count {
                    return Err(DriftError::format(format!(
                        "bool payload is {} bytes, dims {:?} require {}",
                        payload.len(),
                        dims,
                        count
                    )));
                }
                let mut vals = Vec::with_capacity(count);
                for &b in payload {
                    match b {
                        0 => vals.push(false),
                        1 => vals.push(true),
                        other => {
                            return Err(DriftError::format(format!(
                                "bool tensor byte must be 0 or 1, got {other}"
                            )))
                        }
                    }
                }
                TensorData::Bool(vals)
            }
            other => return Err(DriftError::format(format!("unknown tensor dtype {other}"))),
        };
        TensorFile::new(dims, data)
    }
}

/// Depth in the tensor container: one float channel, 0 marks invalid.
pub fn write_depth_drft(path: impl AsRef<Path>, depth: &DepthMap) -> Result<()> {
    let vals = Field::from_fn(depth.height(), depth.width(), 1, |y, x, _| {
        if depth.is_valid(y, x) {
            depth.get(y, x)
        } else {
            0.0
        }
    });
    TensorFile::from_field(&vals).write(path)
}

pub fn read_depth_drft(path: impl AsRef<Path>) -> Result<DepthMap> {
    let f = TensorFile::read(path)?.to_field()?;
    if f.comps() != 1 {
        return Err(DriftError::format("depth tensor must have 1 component"));
    }
    let validity = MaskMap::from_fn(f.height(), f.width(), |y, x| f.get(y, x, 0) > 0.0);
    DepthMap::new(f, validity)
}

fn png_open(path: impl AsRef<Path>) -> Result<image::DynamicImage> {
    image::open(path.as_ref()).map_err(|e| DriftError::format(format!("png read: {e}")))
}

fn png_save<P: image::PixelWithColorType>(
    path: impl AsRef<Path>,
    buf: &image::ImageBuffer<P, Vec<P::Subpixel>>,
) -> Result<()>
where
    [P::Subpixel]: image::EncodableLayout,
{
    buf.save_with_format(path.as_ref(), image::ImageFormat::Png)
        .map_err(|e| DriftError::format(format!("png write: {e}")))
}

/// KITTI optical-flow encoding: 16-bit RGB where u = (c1 − 2^15)/64,
/// v = (c2 − 2^15)/64 and c3 > 0 marks validity.
pub fn write_kitti_flow_png(
    path: impl AsRef<Path>,
    flow: &FlowField,
    valid: &MaskMap,
) -> Result<()> {
    if flow.height() != valid.height() || flow.width() != valid.width() {
        return Err(DriftError::invalid("flow/validity shape mismatch"));
    }
    let quantize = |v: f64| -> u16 {
        let q = (v * 64.0 + 32768.0).round();
        q.clamp(0.0, 65535.0) as u16
    };
    let buf = image::ImageBuffer::from_fn(flow.width() as u32, flow.height() as u32, |x, y| {
        let o = flow.get(y as usize, x as usize);
        image::Rgb([
            quantize(o.x),
            quantize(o.y),
            valid.get(y as usize, x as usize) as u16,
        ])
    });
    png_save(path, &buf)
}

pub fn read_kitti_flow_png(path: impl AsRef<Path>) -> Result<(FlowField, MaskMap)> {
    let image::DynamicImage::ImageRgb16(buf) = png_open(path)? else {
        return Err(DriftError::format("flow png must be 16-bit RGB"));
    };
    let (w, h) = (buf.width() as usize, buf.height() as usize);
    let flow = FlowField::from_fn(h, w, |y, x| {
        let p = buf.get_pixel(x as u32, y as u32);
        nalgebra::Vector2::new(
            (p[0] as f64 - 32768.0) / 64.0,
            (p[1] as f64 - 32768.0) / 64.0,
        )
    });
    let valid = MaskMap::from_fn(h, w, |y, x| buf.get_pixel(x as u32, y as u32)[2] > 0);
    Ok((flow, valid))
}

/// Depth as 16-bit gray PNG: value = depth·256, 0 marks invalid. Valid
/// depths that quantize to 0 (below 1/512 m) or overflow 255 m collapse to
/// the invalid/saturated codes.
pub fn write_depth_png16(path: impl AsRef<Path>, depth: &DepthMap) -> Result<()> {
    let buf = image::ImageBuffer::from_fn(depth.width() as u32, depth.height() as u32, |x, y| {
        let v = if depth.is_valid(y as usize, x as usize) {
            (depth.get(y as usize, x as usize) * 256.0).round().clamp(0.0, 65535.0) as u16
        } else {
            0
        };
        image::Luma([v])
    });
    png_save(path, &buf)
}

pub fn read_depth_png16(path: impl AsRef<Path>) -> Result<DepthMap> {
    let image::DynamicImage::ImageLuma16(buf) = png_open(path)? else {
        return Err(DriftError::format("depth png must be 16-bit single-channel"));
    };
    let (w, h) = (buf.width() as usize, buf.height() as usize);
    let values = Field::from_fn(h, w, 1, |y, x, _| {
        buf.get_pixel(x as u32, y as u32)[0] as f64 / 256.0
    });
    let validity = MaskMap::from_fn(h, w, |y, x| buf.get_pixel(x as u32, y as u32)[0] > 0);
    DepthMap::new(values, validity)
}

/// Grayscale [0,1] image as 16-bit PNG.
pub fn write_image_png16(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    if img.channels() != 1 {
        return Err(DriftError::invalid("png16 image writer expects 1 channel"));
    }
    let buf = image::ImageBuffer::from_fn(img.width() as u32, img.height() as u32, |x, y| {
        let v = (img.get(y as usize, x as usize, 0) * 65535.0).round().clamp(0.0, 65535.0);
        image::Luma([v as u16])
    });
    png_save(path, &buf)
}

pub fn read_image_png16(path: impl AsRef<Path>) -> Result<Image> {
    let image::DynamicImage::ImageLuma16(buf) = png_open(path)? else {
        return Err(DriftError::format("image png must be 16-bit single-channel"));
    };
    let (w, h) = (buf.width() as usize, buf.height() as usize);
    Ok(Image::from_fn(h, w, 1, |y, x, _| {
        buf.get_pixel(x as u32, y as u32)[0] as f64 / 65535.0
    }))
}

pub fn write_mask_png(path: impl AsRef<Path>, mask: &MaskMap) -> Result<()> {
    let buf = image::ImageBuffer::from_fn(mask.width() as u32, mask.height() as u32, |x, y| {
        image::Luma([if mask.get(y as usize, x as usize) { 255u8 } else { 0 }])
    });
    png_save(path, &buf)
}

pub fn read_mask_png(path: impl AsRef<Path>) -> Result<MaskMap> {
    let image::DynamicImage::ImageLuma8(buf) = png_open(path)? else {
        return Err(DriftError::format("mask png must be 8-bit single-channel"));
    };
    let (w, h) = (buf.width() as usize, buf.height() as usize);
    Ok(MaskMap::from_fn(h, w, |y, x| buf.get_pixel(x as u32, y as u32)[0] > 0))
}

/// Shortest decimal that round-trips the exact f64.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// Writes `key=value` lines, keys sorted. Diff-friendly and parser-free.
pub fn write_record(path: impl AsRef<Path>, entries: &BTreeMap<String, String>) -> Result<()> {
    let mut out = String::new();
    for (k, v) in entries {
        if k.contains('=') || k.contains('\n') || v.contains('\n') {
            return Err(DriftError::invalid(format!("record key/value must be single-line: {k}")));
        }
        out.push_str(k);
        out.push('=');
        out.push_str(v);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_record(path: impl AsRef<Path>) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path)?;
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(DriftError::format(format!("record line {} lacks '=': {line}", i + 1)));
        };
        map.insert(k.to_string(), v.to_string());
    }
    Ok(map)
}

/// Record view of a loss evaluation: unweighted term values, per-term pixel
/// counts, and the weighted total.
pub fn record_from_report(report: &LossReport) -> BTreeMap<String, String> {
    let mut map = BTreeMap::new();
    for (term, v) in report.terms() {
        map.insert(term.name().to_string(), fmt_f64(v.value));
        map.insert(format!("{}_pixels", term.name()), v.pixels.to_string());
    }
    map.insert("weighted_total".into(), fmt_f64(report.weighted_total()));
    map
}

/// One CSV row per iteration: the unweighted terms, the weighted objective,
/// and the gradient norm.
pub fn write_trace_csv(path: impl AsRef<Path>, trace: &[TraceRow]) -> Result<()> {
    let mut out = String::from("iteration");
    if let Some(first) = trace.first() {
        for (term, _) in &first.terms {
            out.push(',');
            out.push_str(term.name());
        }
    }
    out.push_str(",weighted_total,grad_norm\n");
    for row in trace {
        out.push_str(&row.iteration.to_string());
        for (_, v) in &row.terms {
            out.push(',');
            out.push_str(&fmt_f64(*v));
        }
        out.push(',');
        out.push_str(&fmt_f64(row.weighted_total));
        out.push(',');
        out.push_str(&fmt_f64(row.grad_norm));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Which procedural scene to build and at what resolution.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub kind: String,
    pub height: usize,
    pub width: usize,
}

impl SceneConfig {
    pub fn to_spec(&self) -> Result<SceneSpec> {
        match self.kind.as_str() {
            "static_two_plane" => Ok(SceneSpec::static_two_plane(self.height, self.width)),
            "one_moving_plane" => Ok(SceneSpec::one_moving_plane(self.height, self.width)),
            other => Err(DriftError::invalid(format!(
                "unknown scene kind {other:?}; expected static_two_plane or one_moving_plane"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraConfig {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraConfig {
    pub fn to_intrinsics(&self) -> Result<Intrinsics> {
        Intrinsics::new(self.fx, self.fy, self.cx, self.cy)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EgoConfig {
    pub axis_angle: [f64; 3],
    pub translation: [f64; 3],
}

impl EgoConfig {
    pub fn to_pose(&self) -> PoseTransform {
        PoseTransform::from_axis_angle(
            nalgebra::Vector3::from_column_slice(&self.axis_angle),
            nalgebra::Vector3::from_column_slice(&self.translation),
        )
    }
}

/// File inputs for subcommands that read fields instead of rendering a
/// scene. Tensor paths use the DRFT container; `.png` paths use the matching
/// PNG codec.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InputPaths {
    pub image_t: Option<String>,
    pub image_next: Option<String>,
    pub flow_fwd: Option<String>,
    pub flow_bwd: Option<String>,
    pub depth: Option<String>,
    pub depth_next: Option<String>,
    pub sceneflow: Option<String>,
    pub pred_depth: Option<String>,
    pub gt_depth: Option<String>,
    pub pred_depth_next: Option<String>,
    pub gt_depth_next: Option<String>,
    pub pred_flow: Option<String>,
    pub gt_flow: Option<String>,
    pub valid_mask: Option<String>,
}

/// Loss-term switches, mirroring the optimizer toggles.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TermsConfig {
    pub photo_mot: bool,
    pub photo_opt: bool,
    pub smoothness: bool,
    pub depth_huber: bool,
    pub flow_l1: bool,
    pub sceneflow_l1: bool,
    pub normal_cosine: bool,
    pub opt_mot: bool,
    pub rev_opt: bool,
    pub rev_mot: bool,
    pub reproj_depth: bool,
}

impl Default for TermsConfig {
    fn default() -> Self {
        let t = TermToggles::default();
        TermsConfig {
            photo_mot: t.photo_mot,
            photo_opt: t.photo_opt,
            smoothness: t.smoothness,
            depth_huber: t.depth_huber,
            flow_l1: t.flow_l1,
            sceneflow_l1: t.sceneflow_l1,
            normal_cosine: t.normal_cosine,
            opt_mot: t.opt_mot,
            rev_opt: t.rev_opt,
            rev_mot: t.rev_mot,
            reproj_depth: t.reproj_depth,
        }
    }
}

impl TermsConfig {
    pub fn to_toggles(&self) -> TermToggles {
        TermToggles {
            photo_mot: self.photo_mot,
            photo_opt: self.photo_opt,
            smoothness: self.smoothness,
            depth_huber: self.depth_huber,
            flow_l1: self.flow_l1,
            sceneflow_l1: self.sceneflow_l1,
            normal_cosine: self.normal_cosine,
            opt_mot: self.opt_mot,
            rev_opt: self.rev_opt,
            rev_mot: self.rev_mot,
            reproj_depth: self.reproj_depth,
        }
    }
}

/// Loss weights. `lambda_reproj_unassigned` is accepted and carried for
/// config compatibility but attaches to no loss term.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeightsConfig {
    pub lambda_depth: f64,
    pub lambda_opt: f64,
    pub lambda_scn: f64,
    pub lambda_nrm: f64,
    pub lambda_smth: f64,
    pub lambda_mot_opt: f64,
    pub lambda_rev_opt: f64,
    pub lambda_rev_mot: f64,
    pub lambda_reproj_depth: f64,
    pub lambda_reproj_unassigned: f64,
    pub lambda_s: f64,
}

impl Default for WeightsConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        WeightsConfig {
            lambda_depth: w.lambda_depth,
            lambda_opt: w.lambda_opt,
            lambda_scn: w.lambda_scn,
            lambda_nrm: w.lambda_nrm,
            lambda_smth: w.lambda_smth,
            lambda_mot_opt: w.lambda_mot_opt,
            lambda_rev_opt: w.lambda_rev_opt,
            lambda_rev_mot: w.lambda_rev_mot,
            lambda_reproj_depth: w.lambda_reproj_depth,
            lambda_reproj_unassigned: 1.0,
            lambda_s: w.lambda_s,
        }
    }
}

impl WeightsConfig {
    pub fn to_weights(&self) -> LossWeights {
        LossWeights {
            lambda_depth: self.lambda_depth,
            lambda_opt: self.lambda_opt,
            lambda_scn: self.lambda_scn,
            lambda_nrm: self.lambda_nrm,
            lambda_smth: self.lambda_smth,
            lambda_mot_opt: self.lambda_mot_opt,
            lambda_rev_opt: self.lambda_rev_opt,
            lambda_rev_mot: self.lambda_rev_mot,
            lambda_reproj_depth: self.lambda_reproj_depth,
            lambda_s: self.lambda_s,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSettings {
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub max_iterations: usize,
    pub tolerance: f64,
    pub patience: usize,
    pub grad_tolerance: f64,
    pub mask_refresh_iters: usize,
    pub refresh_occlusion_mask: bool,
    pub optimize_depth: bool,
    pub optimize_scene_flow: bool,
    /// "triangulation" seeds depth from the reference flow, "constant" from
    /// `init_fill_depth`.
    pub init: String,
    pub init_fill_depth: f64,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        let c = OptimizerConfig::default();
        OptimizerSettings {
            step_size: c.step_size,
            beta1: c.beta1,
            beta2: c.beta2,
            epsilon: c.epsilon,
            max_iterations: c.max_iterations,
            tolerance: c.tolerance,
            patience: c.patience,
            grad_tolerance: c.grad_tolerance,
            mask_refresh_iters: c.mask_refresh_iters,
            refresh_occlusion_mask: c.refresh_occlusion_mask,
            optimize_depth: c.optimize_depth,
            optimize_scene_flow: c.optimize_scene_flow,
            init: "triangulation".into(),
            init_fill_depth: 5.0,
        }
    }
}

impl OptimizerSettings {
    pub fn to_config(&self, terms: TermToggles, weights: LossWeights) -> OptimizerConfig {
        OptimizerConfig {
            step_size: self.step_size,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            max_iterations: self.max_iterations,
            tolerance: self.tolerance,
            patience: self.patience,
            grad_tolerance: self.grad_tolerance,
            mask_refresh_iters: self.mask_refresh_iters,
            refresh_occlusion_mask: self.refresh_occlusion_mask,
            optimize_depth: self.optimize_depth,
            optimize_scene_flow: self.optimize_scene_flow,
            terms,
            weights,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskConstants {
    pub alpha1: f64,
    pub alpha2: f64,
    pub tau_parallax: f64,
}

impl Default for MaskConstants {
    fn default() -> Self {
        MaskConstants {
            alpha1: OCC_ALPHA1,
            alpha2: OCC_ALPHA2,
            tau_parallax: TAU_PARALLAX,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricSettings {
    pub cap: f64,
    pub median_scale: bool,
    pub garg_crop: bool,
    pub crop: Option<[f64; 4]>,
    pub disparity_scale: f64,
}

impl Default for MetricSettings {
    fn default() -> Self {
        MetricSettings {
            cap: 80.0,
            median_scale: false,
            garg_crop: false,
            crop: None,
            disparity_scale: 1.0,
        }
    }
}

impl MetricSettings {
    pub fn eval_crop(&self) -> Result<Option<EvalCrop>> {
        if let Some([top, bottom, left, right]) = self.crop {
            if self.garg_crop {
                return Err(DriftError::invalid("set either garg_crop or an explicit crop, not both"));
            }
            let c = EvalCrop { top, bottom, left, right };
            c.validate()?;
            return Ok(Some(c));
        }
        Ok(if self.garg_crop { Some(EvalCrop::garg()) } else { None })
    }
}

/// The full experiment description. Unknown keys anywhere are rejected.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub scene: Option<SceneConfig>,
    pub camera: Option<CameraConfig>,
    pub ego: Option<EgoConfig>,
    pub inputs: InputPaths,
    pub terms: TermsConfig,
    pub weights: WeightsConfig,
    pub optimizer: OptimizerSettings,
    pub masks: MaskConstants,
    pub metrics: MetricSettings,
    pub output_dir: Option<String>,
    pub seed: Option<u64>,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<RunConfig> {
        toml::from_str(text).map_err(|e| DriftError::invalid(format!("config: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("RunConfig serializes")
    }
}
