//! Supervised, self-supervised and consistency losses, plus the mixed-batch
//! total composition.
//!
//! All masked losses normalize by the number of pixels that actually
//! entered the reduction (not image area) and report that count; reductions
//! are fixed-order pairwise sums, so values are bit-reproducible.

use std::collections::BTreeMap;

use nalgebra::Vector2;

use crate::error::{DriftError, Result};
use crate::field::{stable_sum, DepthMap, Field, FlowField, Image, MaskMap, NormalMap, SceneFlowField};
use crate::geom::{flow_from_motion, Intrinsics, PoseTransform};
use crate::sampler::sample_at;
use crate::{ALPHA_SSIM, EPSILON_Z, HUBER_BETA};

/// SSIM stabilizers on unit-range intensities.
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// A masked reduction: the mean and how many pixels produced it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskedLoss {
    pub value: f64,
    pub pixels: usize,
}

fn masked_mean(contributions: Vec<f64>, what: &str) -> Result<MaskedLoss> {
    if contributions.is_empty() {
        return Err(DriftError::EmptyMask(what.into()));
    }
    Ok(MaskedLoss {
        value: stable_sum(&contributions) / contributions.len() as f64,
        pixels: contributions.len(),
    })
}

/// Reflect-101 index for borderless windowed statistics (..2 1 0 1 2..).
#[inline]
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    debug_assert!(n >= 1);
    if n == 1 {
        return 0;
    }
    let p = (2 * n - 2) as isize;
    let mut m = i.rem_euclid(p);
    if m >= n as isize {
        m = p - m;
    }
    m as usize
}

/// 3×3 mean pooling with reflection padding, per component.
pub(crate) fn pool3(f: &Field) -> Field {
    let (h, w, c) = (f.height(), f.width(), f.comps());
    let mut out = Field::zeros(h, w, c);
    for y in 0..h {
        for x in 0..w {
            for k in 0..c {
                let mut acc = 0.0;
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        acc += f.get(reflect(y as isize + dy, h), reflect(x as isize + dx, w), k);
                    }
                }
                out.set(y, x, k, acc / 9.0);
            }
        }
    }
    out
}

/// Adjoint of [`pool3`]: scatters cotangents through the same reflected taps.
pub(crate) fn pool3_adjoint(g: &Field) -> Field {
    let (h, w, c) = (g.height(), g.width(), g.comps());
    let mut out = Field::zeros(h, w, c);
    for y in 0..h {
        for x in 0..w {
            for k in 0..c {
                let v = g.get(y, x, k) / 9.0;
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        out.add(reflect(y as isize + dy, h), reflect(x as isize + dx, w), k, v);
                    }
                }
            }
        }
    }
    out
}

/// Per-pixel, per-channel structural similarity from 3×3 block statistics.
pub(crate) fn ssim_map(a: &Image, b: &Image) -> Field {
    let mu_a = pool3(&a.values);
    let mu_b = pool3(&b.values);
    let aa = Field::from_fn(a.height(), a.width(), a.channels(), |y, x, c| {
        a.get(y, x, c) * a.get(y, x, c)
    });
    let bb = Field::from_fn(a.height(), a.width(), a.channels(), |y, x, c| {
        b.get(y, x, c) * b.get(y, x, c)
    });
    let ab = Field::from_fn(a.height(), a.width(), a.channels(), |y, x, c| {
        a.get(y, x, c) * b.get(y, x, c)
    });
    let m_aa = pool3(&aa);
    let m_bb = pool3(&bb);
    let m_ab = pool3(&ab);
    Field::from_fn(a.height(), a.width(), a.channels(), |y, x, c| {
        let (ma, mb) = (mu_a.get(y, x, c), mu_b.get(y, x, c));
        let va = m_aa.get(y, x, c) - ma * ma;
        let vb = m_bb.get(y, x, c) - mb * mb;
        let cov = m_ab.get(y, x, c) - ma * mb;
        ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
            / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2))
    })
}

/// Blended SSIM + L1 photometric error, averaged over channels then over
/// masked pixels: alpha·(1−SSIM)/2 + (1−alpha)·|target − synth|.
pub fn photometric_loss_with(
    target: &Image,
    synth: &Image,
    mask: &MaskMap,
    alpha_ssim: f64,
) -> Result<MaskedLoss> {
    if !target.values.same_shape(&synth.values) {
        return Err(DriftError::ShapeMismatch {
            context: "photometric_loss".into(),
            expected: format!("{}x{}x{}", target.height(), target.width(), target.channels()),
            got: format!("{}x{}x{}", synth.height(), synth.width(), synth.channels()),
        });
    }
    if mask.height() != target.height() || mask.width() != target.width() {
        return Err(DriftError::invalid("photometric_loss: mask shape mismatch"));
    }
    if !(0.0..=1.0).contains(&alpha_ssim) {
        return Err(DriftError::invalid("alpha_ssim must be in [0,1]"));
    }
    let ssim = ssim_map(target, synth);
    let channels = target.channels() as f64;
    let mut vals = Vec::new();
    for y in 0..target.height() {
        for x in 0..target.width() {
            if !mask.get(y, x) {
                continue;
            }
            let mut acc = 0.0;
            for c in 0..target.channels() {
                let l1 = (target.get(y, x, c) - synth.get(y, x, c)).abs();
                acc += alpha_ssim * (1.0 - ssim.get(y, x, c)) / 2.0 + (1.0 - alpha_ssim) * l1;
            }
            vals.push(acc / channels);
        }
    }
    masked_mean(vals, "photometric_loss")
}

/// [`photometric_loss_with`] at the default SSIM blend [`ALPHA_SSIM`].
pub fn photometric_loss(target: &Image, synth: &Image, mask: &MaskMap) -> Result<MaskedLoss> {
    photometric_loss_with(target, synth, mask, ALPHA_SSIM)
}

/// Edge-aware first-order smoothness of mean-normalized depth:
/// per axis, the mean over forward differences of |∂d*|·exp(−|∂I|), image
/// gradients averaged over channels. Requires a dense valid depth map.
pub fn smoothness_loss(depth: &DepthMap, image: &Image) -> Result<MaskedLoss> {
    let (h, w) = (depth.height(), depth.width());
    if image.height() != h || image.width() != w {
        return Err(DriftError::invalid("smoothness_loss: image shape mismatch"));
    }
    if depth.validity.count() != h * w {
        return Err(DriftError::invalid("smoothness_loss needs a dense valid depth map"));
    }
    let mean = depth.values.mean();
    if !(mean > 0.0) {
        return Err(DriftError::invalid("smoothness_loss: mean depth must be positive"));
    }
    let ch = image.channels() as f64;
    let mut dx_terms = Vec::with_capacity(h * (w - 1));
    let mut dy_terms = Vec::with_capacity((h - 1) * w);
    for y in 0..h {
        for x in 0..w - 1 {
            let dd = (depth.get(y, x + 1) - depth.get(y, x)) / mean;
            let mut di = 0.0;
            for c in 0..image.channels() {
                di += (image.get(y, x + 1, c) - image.get(y, x, c)).abs();
            }
            dx_terms.push(dd.abs() * (-di / ch).exp());
        }
    }
    for y in 0..h - 1 {
        for x in 0..w {
            let dd = (depth.get(y + 1, x) - depth.get(y, x)) / mean;
            let mut di = 0.0;
            for c in 0..image.channels() {
                di += (image.get(y + 1, x, c) - image.get(y, x, c)).abs();
            }
            dy_terms.push(dd.abs() * (-di / ch).exp());
        }
    }
    let x_mean = if dx_terms.is_empty() { 0.0 } else { stable_sum(&dx_terms) / dx_terms.len() as f64 };
    let y_mean = if dy_terms.is_empty() { 0.0 } else { stable_sum(&dy_terms) / dy_terms.len() as f64 };
    Ok(MaskedLoss {
        value: x_mean + y_mean,
        pixels: h * w,
    })
}

/// Huber penalty on depth error with transition `beta` (meters):
/// 0.5·e²/beta for |e| < beta, |e| − beta/2 beyond.
pub fn huber_depth_loss_with(
    pred: &DepthMap,
    gt: &DepthMap,
    mask: &MaskMap,
    beta: f64,
) -> Result<MaskedLoss> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(DriftError::invalid("huber_depth_loss: shape mismatch"));
    }
    if !(beta > 0.0) {
        return Err(DriftError::invalid("huber beta must be positive"));
    }
    let mut vals = Vec::new();
    for y in 0..pred.height() {
        for x in 0..pred.width() {
            if !mask.get(y, x) {
                continue;
            }
            if !pred.is_valid(y, x) || !gt.is_valid(y, x) {
                return Err(DriftError::invalid(format!(
                    "huber_depth_loss: masked pixel ({y},{x}) is invalid in an input map"
                )));
            }
            let e = pred.get(y, x) - gt.get(y, x);
            vals.push(if e.abs() < beta {
                0.5 * e * e / beta
            } else {
                e.abs() - 0.5 * beta
            });
        }
    }
    masked_mean(vals, "huber_depth_loss")
}

/// [`huber_depth_loss_with`] at the default transition [`HUBER_BETA`].
pub fn huber_depth_loss(pred: &DepthMap, gt: &DepthMap, mask: &MaskMap) -> Result<MaskedLoss> {
    huber_depth_loss_with(pred, gt, mask, HUBER_BETA)
}

/// Masked mean of the per-pixel L1 norm of the component-wise difference.
/// Works for any field pair of matching shape (flow, scene flow, ...).
pub fn l1_field_loss(pred: &Field, gt: &Field, mask: &MaskMap) -> Result<MaskedLoss> {
    if !pred.same_shape(gt) {
        return Err(DriftError::ShapeMismatch {
            context: "l1_field_loss".into(),
            expected: format!("{}x{}x{}", pred.height(), pred.width(), pred.comps()),
            got: format!("{}x{}x{}", gt.height(), gt.width(), gt.comps()),
        });
    }
    let mut vals = Vec::new();
    for y in 0..pred.height() {
        for x in 0..pred.width() {
            if !mask.get(y, x) {
                continue;
            }
            let a = pred.pixel(y, x);
            let b = gt.pixel(y, x);
            vals.push((0..pred.comps()).map(|c| (a[c] - b[c]).abs()).sum());
        }
    }
    masked_mean(vals, "l1_field_loss")
}

/// Cosine misalignment (1 − n̂·n/(‖n̂‖‖n‖))/2 averaged over masked pixels.
pub fn normal_loss(pred: &NormalMap, gt: &NormalMap, mask: &MaskMap) -> Result<MaskedLoss> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(DriftError::invalid("normal_loss: shape mismatch"));
    }
    let mut vals = Vec::new();
    for y in 0..pred.height() {
        for x in 0..pred.width() {
            if !mask.get(y, x) {
                continue;
            }
            let a = pred.get(y, x);
            let b = gt.get(y, x);
            let (na, nb) = (a.norm(), b.norm());
            if !pred.is_valid(y, x) || !gt.is_valid(y, x) || na == 0.0 || nb == 0.0 {
                return Err(DriftError::invalid(format!(
                    "normal_loss: masked pixel ({y},{x}) has no usable normal"
                )));
            }
            vals.push((1.0 - a.dot(&b) / (na * nb)) / 2.0);
        }
    }
    masked_mean(vals, "normal_loss")
}

/// Flow-vs-motion agreement: masked mean L1 between a predicted flow field
/// and the motion-projected flow of (depth, scene flow, pose). Pixels whose
/// motion projection is undefined (invalid depth, behind camera) are
/// excluded from the mean.
pub fn consistency_opt_mot(
    flow_pred: &FlowField,
    depth: &DepthMap,
    sceneflow: &SceneFlowField,
    pose: &PoseTransform,
    k: &Intrinsics,
    mask: &MaskMap,
) -> Result<MaskedLoss> {
    if flow_pred.height() != depth.height() || flow_pred.width() != depth.width() {
        return Err(DriftError::invalid("consistency_opt_mot: shape mismatch"));
    }
    let (motion_flow, motion_ok) = flow_from_motion(depth, sceneflow, pose, k)?;
    let mut vals = Vec::new();
    for y in 0..flow_pred.height() {
        for x in 0..flow_pred.width() {
            if !mask.get(y, x) || !motion_ok.get(y, x) {
                continue;
            }
            let d = flow_pred.get(y, x) - motion_flow.get(y, x);
            vals.push(d.x.abs() + d.y.abs());
        }
    }
    masked_mean(vals, "consistency_opt_mot")
}

/// Forward-backward flow cancellation: masked mean L1 of
/// O_t(x) + O_next⟨warp_coords(x)⟩. The same kernel serves the flow-warp
/// variant (coords = x + ô) and the motion-warp variant (coords from the
/// motion projection); out-of-bounds samples are excluded from the mean.
pub fn consistency_rev_flow(
    flow_t: &FlowField,
    flow_next: &FlowField,
    warp_coords: &Field,
    mask: &MaskMap,
) -> Result<MaskedLoss> {
    if warp_coords.comps() != 2
        || warp_coords.height() != flow_t.height()
        || warp_coords.width() != flow_t.width()
    {
        return Err(DriftError::invalid("consistency_rev_flow: coords shape mismatch"));
    }
    let mut vals = Vec::new();
    for y in 0..flow_t.height() {
        for x in 0..flow_t.width() {
            if !mask.get(y, x) {
                continue;
            }
            let c = warp_coords.pixel(y, x);
            let (sampled, ok) = sample_at(&flow_next.values, c[0], c[1]);
            if !ok {
                continue;
            }
            let s = flow_t.get(y, x) + Vector2::new(sampled[0], sampled[1]);
            vals.push(s.x.abs() + s.y.abs());
        }
    }
    masked_mean(vals, "consistency_rev_flow")
}

/// Depth reprojection agreement, compared in the frame-(t+1) camera: the
/// transformed range [T(d_t·K⁻¹x + s_t)]_z of every masked pixel against the
/// next depth map sampled at the motion-warped coordinates. The comparison
/// happens in the second camera's frame precisely so the loss vanishes on
/// consistent ground truth. Pixels warping out of bounds, behind the camera,
/// or onto an interpolation stencil with invalid depth are excluded.
pub fn consistency_reproj_depth(
    depth_t: &DepthMap,
    depth_next: &DepthMap,
    sceneflow_t: &SceneFlowField,
    pose: &PoseTransform,
    k: &Intrinsics,
    mask: &MaskMap,
) -> Result<MaskedLoss> {
    if depth_t.height() != depth_next.height()
        || depth_t.width() != depth_next.width()
        || depth_t.height() != sceneflow_t.height()
        || depth_t.width() != sceneflow_t.width()
    {
        return Err(DriftError::invalid("consistency_reproj_depth: shape mismatch"));
    }
    let next_validity = Field::from_fn(depth_next.height(), depth_next.width(), 1, |y, x, _| {
        if depth_next.is_valid(y, x) {
            1.0
        } else {
            0.0
        }
    });
    let mut vals = Vec::new();
    for y in 0..depth_t.height() {
        for x in 0..depth_t.width() {
            if !mask.get(y, x) || !depth_t.is_valid(y, x) {
                continue;
            }
            let pix = Vector2::new(x as f64, y as f64);
            let p = k.ray(pix) * depth_t.get(y, x) + sceneflow_t.get(y, x);
            let q = pose.apply(p);
            if q.z <= EPSILON_Z {
                continue;
            }
            let cx = k.fx * q.x / q.z + k.cx;
            let cy = k.fy * q.y / q.z + k.cy;
            let (sampled, ok) = sample_at(&depth_next.values, cx, cy);
            if !ok {
                continue;
            }
            let (valid_frac, _) = sample_at(&next_validity, cx, cy);
            if valid_frac[0] < 1.0 - 1e-12 {
                continue;
            }
            vals.push((q.z - sampled[0]).abs());
        }
    }
    masked_mean(vals, "consistency_reproj_depth")
}

/// Per-term weights of the total loss. Defaults are the standard operating
/// point; `lambda_s` balances the synthetic (fully labeled) batch.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub lambda_depth: f64,
    pub lambda_opt: f64,
    pub lambda_scn: f64,
    pub lambda_nrm: f64,
    pub lambda_smth: f64,
    pub lambda_mot_opt: f64,
    pub lambda_rev_opt: f64,
    pub lambda_rev_mot: f64,
    pub lambda_reproj_depth: f64,
    pub lambda_s: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_depth: 5.0,
            lambda_opt: 0.1,
            lambda_scn: 2.0,
            lambda_nrm: 0.05,
            lambda_smth: 1e-4,
            lambda_mot_opt: 0.2,
            lambda_rev_opt: 0.1,
            lambda_rev_mot: 0.1,
            lambda_reproj_depth: 0.005,
            lambda_s: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_depth", self.lambda_depth),
            ("lambda_opt", self.lambda_opt),
            ("lambda_scn", self.lambda_scn),
            ("lambda_nrm", self.lambda_nrm),
            ("lambda_smth", self.lambda_smth),
            ("lambda_mot_opt", self.lambda_mot_opt),
            ("lambda_rev_opt", self.lambda_rev_opt),
            ("lambda_rev_mot", self.lambda_rev_mot),
            ("lambda_reproj_depth", self.lambda_reproj_depth),
            ("lambda_s", self.lambda_s),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(DriftError::invalid(format!("{name} must be ≥ 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Identity of one loss term in a report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum LossTerm {
    PhotoOpt,
    PhotoMot,
    Smoothness,
    DepthHuber,
    FlowL1,
    SceneFlowL1,
    NormalCosine,
    OptMot,
    RevOpt,
    RevMot,
    ReprojDepth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    SelfSupervised,
    Supervised,
    Consistency,
}

impl LossTerm {
    pub const ALL: [LossTerm; 11] = [
        LossTerm::PhotoOpt,
        LossTerm::PhotoMot,
        LossTerm::Smoothness,
        LossTerm::DepthHuber,
        LossTerm::FlowL1,
        LossTerm::SceneFlowL1,
        LossTerm::NormalCosine,
        LossTerm::OptMot,
        LossTerm::RevOpt,
        LossTerm::RevMot,
        LossTerm::ReprojDepth,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossTerm::PhotoOpt => "photo_opt",
            LossTerm::PhotoMot => "photo_mot",
            LossTerm::Smoothness => "smoothness",
            LossTerm::DepthHuber => "depth_huber",
            LossTerm::FlowL1 => "flow_l1",
            LossTerm::SceneFlowL1 => "sceneflow_l1",
            LossTerm::NormalCosine => "normal_cosine",
            LossTerm::OptMot => "opt_mot",
            LossTerm::RevOpt => "rev_opt",
            LossTerm::RevMot => "rev_mot",
            LossTerm::ReprojDepth => "reproj_depth",
        }
    }

    pub fn kind(self) -> LossKind {
        match self {
            LossTerm::PhotoOpt | LossTerm::PhotoMot | LossTerm::Smoothness => LossKind::SelfSupervised,
            LossTerm::DepthHuber | LossTerm::FlowL1 | LossTerm::SceneFlowL1 | LossTerm::NormalCosine => {
                LossKind::Supervised
            }
            LossTerm::OptMot | LossTerm::RevOpt | LossTerm::RevMot | LossTerm::ReprojDepth => {
                LossKind::Consistency
            }
        }
    }

    /// Multiplier applied when summing a report (photometric terms carry
    /// implicit weight 1).
    pub fn weight(self, w: &LossWeights) -> f64 {
        match self {
            LossTerm::PhotoOpt | LossTerm::PhotoMot => 1.0,
            LossTerm::Smoothness => w.lambda_smth,
            LossTerm::DepthHuber => w.lambda_depth,
            LossTerm::FlowL1 => w.lambda_opt,
            LossTerm::SceneFlowL1 => w.lambda_scn,
            LossTerm::NormalCosine => w.lambda_nrm,
            LossTerm::OptMot => w.lambda_mot_opt,
            LossTerm::RevOpt => w.lambda_rev_opt,
            LossTerm::RevMot => w.lambda_rev_mot,
            LossTerm::ReprojDepth => w.lambda_reproj_depth,
        }
    }
}

/// Unweighted term values with their pixel counts, plus the weighted sum.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    terms: BTreeMap<LossTerm, MaskedLoss>,
    weighted_total: f64,
}

impl LossReport {
    pub fn new(terms: BTreeMap<LossTerm, MaskedLoss>, weights: &LossWeights) -> LossReport {
        let parts: Vec<f64> = terms
            .iter()
            .map(|(term, v)| term.weight(weights) * v.value)
            .collect();
        LossReport {
            terms,
            weighted_total: stable_sum(&parts),
        }
    }

    pub fn get(&self, term: LossTerm) -> Option<MaskedLoss> {
        self.terms.get(&term).copied()
    }

    pub fn terms(&self) -> impl Iterator<Item = (LossTerm, MaskedLoss)> + '_ {
        self.terms.iter().map(|(t, v)| (*t, *v))
    }

    pub fn weighted_total(&self) -> f64 {
        self.weighted_total
    }

    /// Weighted sum over the terms of one kind.
    pub fn kind_total(&self, kind: LossKind, weights: &LossWeights) -> f64 {
        let parts: Vec<f64> = self
            .terms
            .iter()
            .filter(|(t, _)| t.kind() == kind)
            .map(|(t, v)| t.weight(weights) * v.value)
            .collect();
        stable_sum(&parts)
    }
}

/// Mixed-batch composition: self-supervised + consistency terms of the real
/// batch, plus lambda_s times the fully-weighted synthetic batch. Real data
/// has no labels, so supervised terms in the real report are an error.
pub fn total_loss(real: &LossReport, synth: &LossReport, w: &LossWeights) -> Result<f64> {
    w.validate()?;
    for (term, _) in real.terms() {
        if term.kind() == LossKind::Supervised {
            return Err(DriftError::invalid(format!(
                "real batch carries supervised term {}",
                term.name()
            )));
        }
    }
    let real_part = real.kind_total(LossKind::SelfSupervised, w) + real.kind_total(LossKind::Consistency, w);
    let synth_part = synth.kind_total(LossKind::Supervised, w)
        + synth.kind_total(LossKind::SelfSupervised, w)
        + synth.kind_total(LossKind::Consistency, w);
    Ok(real_part + w.lambda_s * synth_part)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::{flow_to_coords, warp_by_flow};
    use crate::scene::{render, SceneSpec};
    use approx::assert_relative_eq;
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn full(h: usize, w: usize) -> MaskMap {
        MaskMap::new_filled(h, w, true)
    }

    #[test]
    fn photometric_identical_is_zero() {
        let img = Image::from_fn(6, 7, 1, |y, x, _| 0.1 + 0.01 * (y * 7 + x) as f64);
        let l = photometric_loss(&img, &img, &full(6, 7)).unwrap();
        assert_eq!(l.value, 0.0);
        assert_eq!(l.pixels, 42);
    }

    #[test]
    fn photometric_pure_l1_contrast() {
        let a = Image::from_fn(4, 4, 1, |_, _, _| 0.0);
        let b = Image::from_fn(4, 4, 1, |_, _, _| 1.0);
        let l = photometric_loss_with(&a, &b, &full(4, 4), 0.0).unwrap();
        assert_relative_eq!(l.value, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn photometric_empty_mask_errors() {
        let img = Image::from_fn(3, 3, 1, |_, _, _| 0.5);
        assert!(matches!(
            photometric_loss(&img, &img, &MaskMap::new_filled(3, 3, false)),
            Err(DriftError::EmptyMask(_))
        ));
    }

    #[test]
    fn photometric_matches_brute_force_ssim_on_patch() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a = Image::from_fn(5, 5, 1, |_, _, _| rng.gen::<f64>());
        let b = Image::from_fn(5, 5, 1, |_, _, _| rng.gen::<f64>());
        let got = photometric_loss(&a, &b, &full(5, 5)).unwrap().value;

        // independent per-definition computation
        let reflect_i = |i: isize, n: isize| -> usize {
            let p = 2 * n - 2;
            let mut m = i.rem_euclid(p);
            if m >= n {
                m = p - m;
            }
            m as usize
        };
        let mut total = 0.0;
        for y in 0..5isize {
            for x in 0..5isize {
                let mut wa = [0.0; 9];
                let mut wb = [0.0; 9];
                let mut idx = 0;
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        wa[idx] = a.get(reflect_i(y + dy, 5), reflect_i(x + dx, 5), 0);
                        wb[idx] = b.get(reflect_i(y + dy, 5), reflect_i(x + dx, 5), 0);
                        idx += 1;
                    }
                }
                let mean = |v: &[f64; 9]| v.iter().sum::<f64>() / 9.0;
                let (ma, mb) = (mean(&wa), mean(&wb));
                let va = wa.iter().map(|v| v * v).sum::<f64>() / 9.0 - ma * ma;
                let vb = wb.iter().map(|v| v * v).sum::<f64>() / 9.0 - mb * mb;
                let cov = wa.iter().zip(&wb).map(|(p, q)| p * q).sum::<f64>() / 9.0 - ma * mb;
                let ssim = ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
                let l1 = (a.get(y as usize, x as usize, 0) - b.get(y as usize, x as usize, 0)).abs();
                total += ALPHA_SSIM * (1.0 - ssim) / 2.0 + (1.0 - ALPHA_SSIM) * l1;
            }
        }
        assert!((got - total / 25.0).abs() < 1e-10);
    }

    #[test]
    fn smoothness_constant_depth_is_zero() {
        let d = DepthMap::from_fn(5, 6, |_, _, _| 3.0).unwrap();
        let img = Image::from_fn(5, 6, 1, |y, x, _| ((y + x) % 2) as f64);
        assert_eq!(smoothness_loss(&d, &img).unwrap().value, 0.0);
    }

    #[test]
    fn smoothness_ramp_closed_form() {
        let slope = 0.01;
        let d = DepthMap::from_fn(8, 10, |_, x, _| 4.0 + slope * x as f64).unwrap();
        let img = Image::from_fn(8, 10, 1, |_, _, _| 0.5);
        let mean = d.values.mean();
        let l = smoothness_loss(&d, &img).unwrap();
        assert_relative_eq!(l.value, slope / mean, epsilon = 1e-12);
    }

    #[test]
    fn smoothness_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = DepthMap::from_fn(6, 7, |_, _, _| 2.0 + rng.gen::<f64>()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = Image::from_fn(6, 7, 1, |_, _, _| rng.gen::<f64>());
        let got = smoothness_loss(&d, &img).unwrap().value;
        let mean = d.values.data().iter().sum::<f64>() / 42.0;
        let mut sx = 0.0;
        for y in 0..6 {
            for x in 0..6 {
                let dd = ((d.get(y, x + 1) - d.get(y, x)) / mean).abs();
                sx += dd * (-(img.get(y, x + 1, 0) - img.get(y, x, 0)).abs()).exp();
            }
        }
        let mut sy = 0.0;
        for y in 0..5 {
            for x in 0..7 {
                let dd = ((d.get(y + 1, x) - d.get(y, x)) / mean).abs();
                sy += dd * (-(img.get(y + 1, x, 0) - img.get(y, x, 0)).abs()).exp();
            }
        }
        assert!((got - (sx / 36.0 + sy / 35.0)).abs() < 1e-12);
    }

    #[test]
    fn huber_branches() {
        let gt = DepthMap::from_fn(1, 1, |_, _, _| 2.0).unwrap();
        let near = DepthMap::from_fn(1, 1, |_, _, _| 2.5).unwrap();
        let far = DepthMap::from_fn(1, 1, |_, _, _| 5.0).unwrap();
        assert_eq!(huber_depth_loss(&gt, &gt, &full(1, 1)).unwrap().value, 0.0);
        assert_relative_eq!(
            huber_depth_loss(&near, &gt, &full(1, 1)).unwrap().value,
            0.125,
            epsilon = 1e-15
        );
        assert_relative_eq!(
            huber_depth_loss(&far, &gt, &full(1, 1)).unwrap().value,
            2.5,
            epsilon = 1e-15
        );
    }

    #[test]
    fn l1_field_examples_and_oracle() {
        let a = FlowField::from_fn(1, 1, |_, _| Vector2::new(3.0, -4.0));
        let b = FlowField::zeros(1, 1);
        let l = l1_field_loss(&a.values, &b.values, &full(1, 1)).unwrap();
        assert_relative_eq!(l.value, 7.0, epsilon = 1e-15);
        assert_eq!(
            l1_field_loss(&a.values, &a.values, &full(1, 1)).unwrap().value,
            0.0
        );

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = Field::from_fn(4, 5, 3, |_, _, _| rng.gen::<f64>() - 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let q = Field::from_fn(4, 5, 3, |_, _, _| rng.gen::<f64>() - 0.5);
        let got = l1_field_loss(&p, &q, &full(4, 5)).unwrap().value;
        let mut acc = 0.0;
        for y in 0..4 {
            for x in 0..5 {
                for c in 0..3 {
                    acc += (p.get(y, x, c) - q.get(y, x, c)).abs();
                }
            }
        }
        assert!((got - acc / 20.0).abs() < 1e-12);
    }

    fn const_normals(h: usize, w: usize, n: Vector3<f64>) -> NormalMap {
        NormalMap::new(
            Field::from_fn(h, w, 3, |_, _, c| n[c]),
            MaskMap::new_filled(h, w, true),
        )
        .unwrap()
    }

    #[test]
    fn normal_loss_alignment_cases() {
        let up = const_normals(3, 3, Vector3::z());
        let down = const_normals(3, 3, -Vector3::z());
        let side = const_normals(3, 3, Vector3::x());
        assert_eq!(normal_loss(&up, &up, &full(3, 3)).unwrap().value, 0.0);
        assert_relative_eq!(normal_loss(&down, &up, &full(3, 3)).unwrap().value, 1.0);
        assert_relative_eq!(normal_loss(&side, &up, &full(3, 3)).unwrap().value, 0.5);
    }

    #[test]
    fn normal_loss_rejects_zero_vectors() {
        let up = const_normals(2, 2, Vector3::z());
        let zero = const_normals(2, 2, Vector3::zeros());
        assert!(normal_loss(&zero, &up, &full(2, 2)).is_err());
    }

    #[test]
    fn opt_mot_zero_and_offset() {
        let d = DepthMap::from_fn(4, 5, |_, _, _| 6.0).unwrap();
        let s = SceneFlowField::zeros(4, 5);
        let k = Intrinsics::new(50.0, 50.0, 2.0, 1.5).unwrap();
        let pose = PoseTransform::from_axis_angle(Vector3::zeros(), Vector3::new(-0.3, 0.0, 0.0));
        let (motion_flow, _) = flow_from_motion(&d, &s, &pose, &k).unwrap();
        let l = consistency_opt_mot(&motion_flow, &d, &s, &pose, &k, &full(4, 5)).unwrap();
        assert_eq!(l.value, 0.0);

        let delta = 0.37;
        let shifted = FlowField::from_fn(4, 5, |y, x| {
            motion_flow.get(y, x) + Vector2::new(delta, 0.0)
        });
        let l = consistency_opt_mot(&shifted, &d, &s, &pose, &k, &full(4, 5)).unwrap();
        assert_relative_eq!(l.value, delta, epsilon = 1e-12);
    }

    #[test]
    fn rev_flow_cancellation_and_l1_of_forward() {
        let o = Vector2::new(1.5, -0.75);
        let fwd = FlowField::from_fn(6, 8, |_, _| o);
        let bwd = FlowField::from_fn(6, 8, |_, _| -o);
        let coords = flow_to_coords(&fwd);
        let l = consistency_rev_flow(&fwd, &bwd, &coords, &full(6, 8)).unwrap();
        assert_eq!(l.value, 0.0);

        let zero = FlowField::zeros(6, 8);
        let l = consistency_rev_flow(&fwd, &zero, &coords, &full(6, 8)).unwrap();
        assert_relative_eq!(l.value, o.x.abs() + o.y.abs(), epsilon = 1e-12);
    }

    #[test]
    fn reproj_depth_identity_and_uniform_inflation() {
        let d = DepthMap::from_fn(5, 6, |_, _, _| 4.0).unwrap();
        let s = SceneFlowField::zeros(5, 6);
        let k = Intrinsics::new(40.0, 40.0, 2.5, 2.0).unwrap();
        let idt = PoseTransform::identity();
        let l = consistency_reproj_depth(&d, &d, &s, &idt, &k, &full(5, 6)).unwrap();
        assert_eq!(l.value, 0.0);

        let inflated = DepthMap::from_fn(5, 6, |_, _, _| 5.0).unwrap();
        let l = consistency_reproj_depth(&inflated, &d, &s, &idt, &k, &full(5, 6)).unwrap();
        assert_relative_eq!(l.value, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_on_ground_truth_consistency_suite() {
        let spec = SceneSpec::one_moving_plane(48, 64);
        let (t, t1) = render(&spec).unwrap();
        let trusted = t.same_surface_mask(&t1);
        assert!(trusted.count() > 1000);

        let l = consistency_opt_mot(
            &t.flow_fwd,
            &t.depth,
            &t.sceneflow_fwd,
            &spec.ego_motion,
            &spec.camera,
            &trusted,
        )
        .unwrap();
        assert!(l.value < 1e-9, "opt_mot on GT = {}", l.value);

        let coords = flow_to_coords(&t.flow_fwd);
        let l = consistency_rev_flow(&t.flow_fwd, &t.flow_bwd, &coords, &trusted).unwrap();
        assert!(l.value < 1e-6, "rev_flow on GT = {}", l.value);

        let l = consistency_reproj_depth(
            &t.depth,
            &t1.depth,
            &t.sceneflow_fwd,
            &spec.ego_motion,
            &spec.camera,
            &trusted,
        )
        .unwrap();
        assert!(l.value < 1e-6, "reproj_depth on GT = {}", l.value);
    }

    #[test]
    fn zero_on_ground_truth_photometric_via_exact_correspondences() {
        // static_two_plane has integer ground-truth flow, so resampling the
        // next frame at the true correspondences is an exact lookup.
        let spec = SceneSpec::static_two_plane(48, 64);
        let (t, t1) = render(&spec).unwrap();
        let (synth, warp_ok) = warp_by_flow(&t1.image, &t.flow_fwd).unwrap();
        // erode so every 3×3 SSIM window sees only trusted resamples
        let mask = t.same_surface_mask(&t1).and(&warp_ok).erode(1);
        assert!(mask.count() > 800);
        let l = photometric_loss(&t.image, &synth, &mask).unwrap();
        assert!(l.value < 1e-6, "photometric on GT = {}", l.value);
    }

    #[test]
    fn report_total_matches_weighted_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let w = LossWeights::default();
        let mut terms = BTreeMap::new();
        for term in LossTerm::ALL {
            terms.insert(
                term,
                MaskedLoss {
                    value: rng.gen::<f64>(),
                    pixels: 100,
                },
            );
        }
        let report = LossReport::new(terms.clone(), &w);
        let by_hand: f64 = terms.iter().map(|(t, v)| t.weight(&w) * v.value).sum();
        assert!((report.weighted_total() - by_hand).abs() < 1e-12);
    }

    #[test]
    fn total_loss_composition() {
        let w = LossWeights::default();
        let zero_terms = |terms: &[LossTerm]| {
            let mut m = BTreeMap::new();
            for &t in terms {
                m.insert(t, MaskedLoss { value: 0.0, pixels: 1 });
            }
            LossReport::new(m, &w)
        };
        let self_const = [
            LossTerm::PhotoOpt,
            LossTerm::Smoothness,
            LossTerm::OptMot,
            LossTerm::RevOpt,
        ];
        let all_zero = total_loss(&zero_terms(&self_const), &zero_terms(&LossTerm::ALL), &w).unwrap();
        assert_eq!(all_zero, 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let mut real_terms = BTreeMap::new();
        for &t in &self_const {
            real_terms.insert(t, MaskedLoss { value: rng.gen::<f64>(), pixels: 9 });
        }
        let mut synth_terms = BTreeMap::new();
        for t in LossTerm::ALL {
            synth_terms.insert(t, MaskedLoss { value: rng.gen::<f64>(), pixels: 9 });
        }
        let real = LossReport::new(real_terms.clone(), &w);
        let synth = LossReport::new(synth_terms.clone(), &w);

        let mut w0 = w.clone();
        w0.lambda_s = 0.0;
        let real_only = total_loss(&real, &synth, &w0).unwrap();
        let real_sum: f64 = real_terms.iter().map(|(t, v)| t.weight(&w0) * v.value).sum();
        assert!((real_only - real_sum).abs() < 1e-12);

        let total = total_loss(&real, &synth, &w).unwrap();
        let synth_sum: f64 = synth_terms.iter().map(|(t, v)| t.weight(&w) * v.value).sum();
        assert!((total - (real_sum + w.lambda_s * synth_sum)).abs() < 1e-12);

        // doubling one weight doubles exactly that term's contribution
        let mut w2 = w.clone();
        w2.lambda_mot_opt *= 2.0;
        let real2 = LossReport::new(real_terms.clone(), &w2);
        let synth2 = LossReport::new(synth_terms.clone(), &w2);
        let total2 = total_loss(&real2, &synth2, &w2).unwrap();
        let bump = w.lambda_mot_opt
            * (real_terms[&LossTerm::OptMot].value
                + w.lambda_s * synth_terms[&LossTerm::OptMot].value);
        assert!((total2 - total - bump).abs() < 1e-12);
    }

    #[test]
    fn total_loss_rejects_labeled_real_batch() {
        let w = LossWeights::default();
        let mut terms = BTreeMap::new();
        terms.insert(LossTerm::DepthHuber, MaskedLoss { value: 0.1, pixels: 4 });
        let real = LossReport::new(terms, &w);
        let synth = LossReport::new(BTreeMap::new(), &w);
        assert!(total_loss(&real, &synth, &w).is_err());
    }

    #[test]
    fn losses_are_deterministic_across_runs() {
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        let a = Image::from_fn(16, 16, 1, |_, _, _| rng.gen::<f64>());
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let b = Image::from_fn(16, 16, 1, |_, _, _| rng.gen::<f64>());
        let mask = MaskMap::from_fn(16, 16, |y, x| (y + x) % 3 != 0);
        let l1 = photometric_loss(&a, &b, &mask).unwrap();
        let l2 = photometric_loss(&a, &b, &mask).unwrap();
        assert_eq!(l1.value.to_bits(), l2.value.to_bits());
    }
}
