//! Depth, optical-flow, and scene-flow evaluation metrics.
//!
//! All thresholds are strict inequalities; a prediction sitting exactly on a
//! threshold does not count as an outlier and does not satisfy a delta bound.
//! Reductions are fixed-order pairwise sums.

use crate::error::{DriftError, Result};
use crate::field::{stable_sum, DepthMap, FlowField, MaskMap};

/// Fractional evaluation rectangle; pixel (y,x) is inside iff
/// floor(top·H) ≤ y < floor(bottom·H) and floor(left·W) ≤ x < floor(right·W).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalCrop {
    pub top: f64,
    pub bottom: f64,
    pub left: f64,
    pub right: f64,
}

impl EvalCrop {
    /// The conventional outdoor-benchmark crop for monocular depth.
    pub fn garg() -> EvalCrop {
        EvalCrop {
            top: 0.40810811,
            bottom: 0.99189189,
            left: 0.03594771,
            right: 0.96405229,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.top)
            && (0.0..=1.0).contains(&self.bottom)
            && (0.0..=1.0).contains(&self.left)
            && (0.0..=1.0).contains(&self.right)
            && self.top < self.bottom
            && self.left < self.right;
        if !ok {
            return Err(DriftError::invalid(
                "EvalCrop fractions must lie in [0,1] with top<bottom, left<right",
            ));
        }
        Ok(())
    }

    fn contains(&self, y: usize, x: usize, h: usize, w: usize) -> bool {
        let y0 = (self.top * h as f64).floor() as usize;
        let y1 = (self.bottom * h as f64).floor() as usize;
        let x0 = (self.left * w as f64).floor() as usize;
        let x1 = (self.right * w as f64).floor() as usize;
        y >= y0 && y < y1 && x >= x0 && x < x1
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
}

impl DepthMetrics {
    pub fn pairs(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("abs_rel", self.abs_rel),
            ("sq_rel", self.sq_rel),
            ("rmse", self.rmse),
            ("rmse_log", self.rmse_log),
            ("delta1", self.delta1),
            ("delta2", self.delta2),
            ("delta3", self.delta3),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowMetrics {
    pub epe: f64,
    pub f1_all: f64,
}

impl FlowMetrics {
    pub fn pairs(&self) -> Vec<(&'static str, f64)> {
        vec![("epe", self.epe), ("f1_all", self.f1_all)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneFlowMetrics {
    pub d1_all: f64,
    pub d2_all: f64,
    pub f1_all: f64,
    pub sf1_all: f64,
}

impl SceneFlowMetrics {
    pub fn pairs(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("d1_all", self.d1_all),
            ("d2_all", self.d2_all),
            ("f1_all", self.f1_all),
            ("sf1_all", self.sf1_all),
        ]
    }
}

fn median(values: &[f64]) -> f64 {
    debug_assert!(!values.is_empty());
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Standard depth error statistics over pixels valid in both maps with
/// 0 < gt ≤ cap, optionally restricted to a fractional crop. With
/// `median_scale` the prediction is first multiplied by
/// median(gt)/median(pred) computed over the evaluation pixels.
pub fn depth_metrics(
    pred: &DepthMap,
    gt: &DepthMap,
    cap: f64,
    median_scale: bool,
    crop: Option<EvalCrop>,
) -> Result<DepthMetrics> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(DriftError::invalid("depth_metrics: shape mismatch"));
    }
    if !(cap > 0.0) {
        return Err(DriftError::invalid("depth cap must be positive"));
    }
    if let Some(c) = crop {
        c.validate()?;
    }
    let (h, w) = (pred.height(), pred.width());
    let mut p = Vec::new();
    let mut g = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !pred.is_valid(y, x) || !gt.is_valid(y, x) {
                continue;
            }
            let gv = gt.get(y, x);
            if !(gv > 0.0 && gv <= cap) {
                continue;
            }
            if let Some(c) = crop {
                if !c.contains(y, x, h, w) {
                    continue;
                }
            }
            p.push(pred.get(y, x));
            g.push(gv);
        }
    }
    if p.is_empty() {
        return Err(DriftError::EmptyMask("depth_metrics".into()));
    }
    if median_scale {
        let s = median(&g) / median(&p);
        for v in &mut p {
            *v *= s;
        }
    }
    let n = p.len() as f64;
    let mut abs_rel = Vec::with_capacity(p.len());
    let mut sq_rel = Vec::with_capacity(p.len());
    let mut sq = Vec::with_capacity(p.len());
    let mut sq_log = Vec::with_capacity(p.len());
    let mut hit = [0usize; 3];
    for (pv, gv) in p.iter().zip(&g) {
        let e = pv - gv;
        abs_rel.push(e.abs() / gv);
        sq_rel.push(e * e / gv);
        sq.push(e * e);
        let dl = pv.ln() - gv.ln();
        sq_log.push(dl * dl);
        let ratio = (pv / gv).max(gv / pv);
        let mut bound = 1.25;
        for h in &mut hit {
            if ratio < bound {
                *h += 1;
            }
            bound *= 1.25;
        }
    }
    Ok(DepthMetrics {
        abs_rel: stable_sum(&abs_rel) / n,
        sq_rel: stable_sum(&sq_rel) / n,
        rmse: (stable_sum(&sq) / n).sqrt(),
        rmse_log: (stable_sum(&sq_log) / n).sqrt(),
        delta1: hit[0] as f64 / n,
        delta2: hit[1] as f64 / n,
        delta3: hit[2] as f64 / n,
    })
}

fn flow_outlier(err: f64, gt_mag: f64) -> bool {
    err > 3.0 && err > 0.05 * gt_mag
}

/// Endpoint error and the >3px-and->5% outlier fraction over valid pixels.
pub fn flow_metrics(pred: &FlowField, gt: &FlowField, valid: &MaskMap) -> Result<FlowMetrics> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(DriftError::invalid("flow_metrics: shape mismatch"));
    }
    let mut epe = Vec::new();
    let mut outliers = 0usize;
    for y in 0..pred.height() {
        for x in 0..pred.width() {
            if !valid.get(y, x) {
                continue;
            }
            let err = (pred.get(y, x) - gt.get(y, x)).norm();
            if flow_outlier(err, gt.get(y, x).norm()) {
                outliers += 1;
            }
            epe.push(err);
        }
    }
    if epe.is_empty() {
        return Err(DriftError::EmptyMask("flow_metrics".into()));
    }
    let n = epe.len() as f64;
    Ok(FlowMetrics {
        epe: stable_sum(&epe) / n,
        f1_all: outliers as f64 / n,
    })
}

/// Disparity-domain scene-flow outlier fractions. Depths convert to
/// disparities as disparity_scale/depth; the caller supplies the
/// second-frame depth maps already warped into frame t (the usual D2
/// convention). A pixel is an SF outlier if it fails any of D1, D2, F1.
#[allow(clippy::too_many_arguments)]
pub fn sceneflow_metrics(
    depth_t_pred: &DepthMap,
    depth_t_gt: &DepthMap,
    depth_t1_pred: &DepthMap,
    depth_t1_gt: &DepthMap,
    flow_pred: &FlowField,
    flow_gt: &FlowField,
    valid: &MaskMap,
    disparity_scale: f64,
) -> Result<SceneFlowMetrics> {
    if !(disparity_scale > 0.0) {
        return Err(DriftError::invalid("disparity_scale must be positive"));
    }
    let (h, w) = (depth_t_pred.height(), depth_t_pred.width());
    let same = |dh: usize, dw: usize| dh == h && dw == w;
    if !same(depth_t_gt.height(), depth_t_gt.width())
        || !same(depth_t1_pred.height(), depth_t1_pred.width())
        || !same(depth_t1_gt.height(), depth_t1_gt.width())
        || !same(flow_pred.height(), flow_pred.width())
        || !same(flow_gt.height(), flow_gt.width())
    {
        return Err(DriftError::invalid("sceneflow_metrics: shape mismatch"));
    }
    let mut n = 0usize;
    let (mut d1, mut d2, mut f1, mut sf1) = (0usize, 0usize, 0usize, 0usize);
    for y in 0..h {
        for x in 0..w {
            if !valid.get(y, x)
                || !depth_t_pred.is_valid(y, x)
                || !depth_t_gt.is_valid(y, x)
                || !depth_t1_pred.is_valid(y, x)
                || !depth_t1_gt.is_valid(y, x)
            {
                continue;
            }
            n += 1;
            let disp = |d: f64| disparity_scale / d;
            let d1_err = (disp(depth_t_pred.get(y, x)) - disp(depth_t_gt.get(y, x))).abs();
            let d1_out = d1_err > 3.0 && d1_err > 0.05 * disp(depth_t_gt.get(y, x));
            let d2_err = (disp(depth_t1_pred.get(y, x)) - disp(depth_t1_gt.get(y, x))).abs();
            let d2_out = d2_err > 3.0 && d2_err > 0.05 * disp(depth_t1_gt.get(y, x));
            let f_err = (flow_pred.get(y, x) - flow_gt.get(y, x)).norm();
            let f_out = flow_outlier(f_err, flow_gt.get(y, x).norm());
            d1 += d1_out as usize;
            d2 += d2_out as usize;
            f1 += f_out as usize;
            sf1 += (d1_out || d2_out || f_out) as usize;
        }
    }
    if n == 0 {
        return Err(DriftError::EmptyMask("sceneflow_metrics".into()));
    }
    let n = n as f64;
    Ok(SceneFlowMetrics {
        d1_all: d1 as f64 / n,
        d2_all: d2 as f64 / n,
        f1_all: f1 as f64 / n,
        sf1_all: sf1 as f64 / n,
    })
}
