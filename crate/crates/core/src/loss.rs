//! Training objective: confidence-weighted pointmap regression, contrastive
//! descriptor matching for static and dynamic pairs, and balanced visibility
//! cross-entropy. Every term comes with its gradient with respect to the
//! network outputs; `Model::backward` carries it the rest of the way.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{norm_factor_masked, GeomError, MatchKind, PointMapBundle, DEFAULT_STATIC_EPS};
use crate::model::{DescriptorMap, ForwardOutputs, ViewGrads};
use crate::pairs::MatchSet;
use crate::sampling::{bilinear_taps, gather, scatter, Taps};
use crate::scene::ScenePairSample;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("point map has no valid pixels")]
    EmptyPointMap,
    #[error("no positive pairs of the requested kind")]
    EmptyMatchSet,
    #[error("no labelled pixels")]
    EmptyLabels,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid loss config: {0}")]
    InvalidConfig(String),
}

impl From<GeomError> for LossError {
    fn from(e: GeomError) -> Self {
        match e {
            GeomError::EmptyPointMap => LossError::EmptyPointMap,
            other => LossError::ShapeMismatch(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the static matching term.
    pub alpha: f64,
    /// Weight of the dynamic matching term.
    pub beta: f64,
    /// Weight of the visibility term.
    pub gamma: f64,
    /// Inverse temperature applied to descriptor dot products.
    pub tau: f64,
    /// Log-confidence penalty inside the regression term.
    pub conf_alpha: f64,
    pub eps_dynamic: f64,
    /// Scale each positive's matching term by `min(C1, C2)` over the mean.
    pub confidence_weighted_matching: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.075,
            beta: 0.075,
            gamma: 1.0,
            tau: 1.0 / 0.07,
            conf_alpha: 0.2,
            eps_dynamic: DEFAULT_STATIC_EPS,
            confidence_weighted_matching: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.tau > 0.0) {
            return Err(LossError::InvalidConfig(format!("tau must be positive, got {}", self.tau)));
        }
        for (name, w) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("conf_alpha", self.conf_alpha),
        ] {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(LossError::InvalidConfig(format!("{name} must be a finite non-negative weight")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub conf: f64,
    pub match_static: f64,
    pub match_dynamic: f64,
    pub vis: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn combine(conf: f64, match_static: f64, match_dynamic: f64, vis: f64, cfg: &LossConfig) -> Self {
        LossBreakdown {
            conf,
            match_static,
            match_dynamic,
            vis,
            total: conf + cfg.alpha * match_static + cfg.beta * match_dynamic + cfg.gamma * vis,
        }
    }
}

/// Regression error at one pixel after normalizing each map by its mean
/// distance over its own valid set.
pub fn regr_loss(pred: &PointMapBundle, gt: &PointMapBundle, pixel: usize) -> Result<f64, LossError> {
    check_same_shape(pred, gt)?;
    if pixel >= pred.len() || !pred.valid[pixel] || !gt.valid[pixel] {
        return Err(LossError::ShapeMismatch(format!("pixel {pixel} is not valid in both maps")));
    }
    let z = norm_factor_masked(&pred.points, &pred.valid)?;
    let zh = norm_factor_masked(&gt.points, &gt.valid)?;
    Ok((pred.points[pixel] / z - gt.points[pixel] / zh).norm())
}

/// Confidence-weighted regression summed over both views' valid pixels.
/// Confidences are read from the predicted bundles.
pub fn conf_loss(pred: [&PointMapBundle; 2], gt: [&PointMapBundle; 2], conf_alpha: f64) -> Result<f64, LossError> {
    let mut total = 0.0;
    for v in 0..2 {
        check_same_shape(pred[v], gt[v])?;
        let points: Vec<f64> = pred[v].points.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
        total += conf_view(&points, &pred[v].confidence, &pred[v].valid, gt[v], conf_alpha, None)?;
    }
    Ok(total)
}

fn check_same_shape(a: &PointMapBundle, b: &PointMapBundle) -> Result<(), LossError> {
    if a.width != b.width || a.height != b.height || a.len() != b.len() {
        return Err(LossError::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

/// One view of the confidence-weighted regression. `points` is flat `N×3`.
/// Pixels count when valid in both `pred_valid` and the ground truth.
fn conf_view(
    points: &[f64],
    confidence: &[f64],
    pred_valid: &[bool],
    gt: &PointMapBundle,
    conf_alpha: f64,
    grads: Option<(&mut [f64], &mut [f64])>,
) -> Result<f64, LossError> {
    let n = gt.len();
    let pts: Vec<Vector3<f64>> = points.chunks_exact(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect();
    let z = norm_factor_masked(&pts, pred_valid)?;
    let zh = norm_factor_masked(&gt.points, &gt.valid)?;
    let n_pred = pred_valid.iter().filter(|v| **v).count() as f64;

    let mut loss = 0.0;
    // direction of each residual, weighted by confidence, for the backward pass
    let mut dirs: Vec<(usize, Vector3<f64>)> = Vec::new();
    let mut dz = 0.0;
    let want_grads = grads.is_some();
    let mut dconf = vec![0.0; if want_grads { n } else { 0 }];
    for i in 0..n {
        if !(pred_valid[i] && gt.valid[i]) {
            continue;
        }
        let c = confidence[i];
        let u = pts[i] / z - gt.points[i] / zh;
        let l = u.norm();
        loss += c * l - conf_alpha * c.ln();
        if want_grads {
            dconf[i] = l - conf_alpha / c;
            if l > 0.0 {
                let d = u * (c / l);
                dz -= d.dot(&pts[i]) / (z * z);
                dirs.push((i, d / z));
            }
        }
    }
    if let Some((gp, gc)) = grads {
        for (g, d) in gc.iter_mut().zip(&dconf) {
            *g += d;
        }
        for (i, d) in dirs {
            for k in 0..3 {
                gp[3 * i + k] += d[k];
            }
        }
        // the normalizer depends on every valid predicted point
        for i in 0..n {
            if !pred_valid[i] {
                continue;
            }
            let norm = pts[i].norm();
            if norm > 0.0 {
                let s = dz / (n_pred * norm);
                for k in 0..3 {
                    gp[3 * i + k] += s * pts[i][k];
                }
            }
        }
    }
    Ok(loss)
}

fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

struct MatchGrads<'a> {
    desc1: &'a mut [f64],
    desc2: &'a mut [f64],
    conf1: &'a mut [f64],
    conf2: &'a mut [f64],
}

/// Symmetric contrastive loss over the positives of one kind. Each view's
/// candidate set is its positive pixels followed by its negatives.
pub fn infonce_match(
    d1: &DescriptorMap,
    d2: &DescriptorMap,
    matches: &MatchSet,
    kind: MatchKind,
    tau: f64,
) -> Result<f64, LossError> {
    infonce_core(d1, d2, matches, kind, tau, None, None)
}

/// Like [`infonce_match`] but scales each positive's term by
/// `min(C1, C2) / mean(min(C1, C2))`.
pub fn infonce_match_weighted(
    d1: &DescriptorMap,
    d2: &DescriptorMap,
    conf: [&[f64]; 2],
    matches: &MatchSet,
    kind: MatchKind,
    tau: f64,
) -> Result<f64, LossError> {
    infonce_core(d1, d2, matches, kind, tau, Some(conf), None)
}

fn infonce_core(
    d1: &DescriptorMap,
    d2: &DescriptorMap,
    matches: &MatchSet,
    kind: MatchKind,
    tau: f64,
    conf: Option<[&[f64]; 2]>,
    grads: Option<MatchGrads<'_>>,
) -> Result<f64, LossError> {
    if d1.dim != d2.dim || d1.width != d2.width || d1.height != d2.height {
        return Err(LossError::ShapeMismatch("descriptor maps differ in shape".into()));
    }
    let (w, h, dim) = (d1.width, d1.height, d1.dim);
    let pos: Vec<_> = matches.filtered(kind).collect();
    if pos.is_empty() {
        return Err(LossError::EmptyMatchSet);
    }
    let np = pos.len();
    let taps1: Vec<Taps> = pos
        .iter()
        .map(|p| p.pixel1)
        .chain(matches.negatives1.iter().copied())
        .map(|px| bilinear_taps(px, w, h))
        .collect();
    let taps2: Vec<Taps> = pos
        .iter()
        .map(|p| p.pixel2)
        .chain(matches.negatives2.iter().copied())
        .map(|px| bilinear_taps(px, w, h))
        .collect();
    let (n1, n2) = (taps1.len(), taps2.len());
    let f1: Vec<f64> = taps1.iter().flat_map(|t| gather(&d1.data, dim, t)).collect();
    let f2: Vec<f64> = taps2.iter().flat_map(|t| gather(&d2.data, dim, t)).collect();
    let mut s = vec![0.0; n1 * n2];
    crate::nn::matmul(n1, dim, n2, &f1, false, &f2, true, 0.0, &mut s);
    for v in s.iter_mut() {
        *v *= tau;
    }

    // per-positive terms and the softmax columns/rows they need
    let mut terms = vec![0.0; np];
    let mut col_soft: Vec<Vec<f64>> = Vec::with_capacity(np);
    let mut row_soft: Vec<Vec<f64>> = Vec::with_capacity(np);
    let mut col = vec![0.0; n1];
    for p in 0..np {
        for (k, c) in col.iter_mut().enumerate() {
            *c = s[k * n2 + p];
        }
        let row = &s[p * n2..(p + 1) * n2];
        let lse_c = logsumexp(&col);
        let lse_r = logsumexp(row);
        terms[p] = (lse_c - s[p * n2 + p]) + (lse_r - s[p * n2 + p]);
        if grads.is_some() {
            col_soft.push(col.iter().map(|x| (x - lse_c).exp()).collect());
            row_soft.push(row.iter().map(|x| (x - lse_r).exp()).collect());
        }
    }

    // optional confidence weights
    let mut weights = vec![1.0; np];
    let mut raw = Vec::new();
    let mut mean = 1.0;
    if let Some([c1, c2]) = conf {
        raw = pos
            .iter()
            .enumerate()
            .map(|(p, _)| {
                let a = taps1[p].iter().map(|&(i, wt)| wt * c1[i]).sum::<f64>();
                let b = taps2[p].iter().map(|&(i, wt)| wt * c2[i]).sum::<f64>();
                (a, b)
            })
            .collect::<Vec<_>>();
        mean = raw.iter().map(|(a, b)| a.min(*b)).sum::<f64>() / np as f64;
        for (wp, (a, b)) in weights.iter_mut().zip(&raw) {
            *wp = a.min(*b) / mean;
        }
    }
    let loss: f64 = terms.iter().zip(&weights).map(|(t, w)| t * w).sum();

    if let Some(g) = grads {
        let mut gs = vec![0.0; n1 * n2];
        for p in 0..np {
            let wp = weights[p];
            for k in 0..n1 {
                gs[k * n2 + p] += wp * col_soft[p][k];
            }
            for k in 0..n2 {
                gs[p * n2 + k] += wp * row_soft[p][k];
            }
            gs[p * n2 + p] -= 2.0 * wp;
        }
        for v in gs.iter_mut() {
            *v *= tau;
        }
        let mut gf1 = vec![0.0; n1 * dim];
        let mut gf2 = vec![0.0; n2 * dim];
        crate::nn::matmul(n1, n2, dim, &gs, false, &f2, false, 0.0, &mut gf1);
        crate::nn::matmul(n2, n1, dim, &gs, true, &f1, false, 0.0, &mut gf2);
        for (t, gv) in taps1.iter().zip(gf1.chunks_exact(dim)) {
            scatter(g.desc1, dim, t, gv);
        }
        for (t, gv) in taps2.iter().zip(gf2.chunks_exact(dim)) {
            scatter(g.desc2, dim, t, gv);
        }
        if conf.is_some() {
            // L = Σ m_p ℓ_p / mean(m)
            let weighted: f64 = raw.iter().zip(&terms).map(|((a, b), t)| a.min(*b) * t).sum();
            for p in 0..np {
                let dm = terms[p] / mean - weighted / (np as f64 * mean * mean);
                let (a, b) = raw[p];
                if a <= b {
                    for &(i, wt) in &taps1[p] {
                        g.conf1[i] += dm * wt;
                    }
                } else {
                    for &(i, wt) in &taps2[p] {
                        g.conf2[i] += dm * wt;
                    }
                }
            }
        }
    }
    Ok(loss)
}

/// Class-balanced binary cross-entropy over both views' labelled pixels.
/// `true` marks a pixel whose point is visible in the other view. Each
/// present class is weighted `N / (K·N_class)` over `K` present classes, and
/// the result is the mean over labelled pixels.
pub fn vis_ce_loss(
    logits1: &[f64],
    logits2: &[f64],
    labels1: &[Option<bool>],
    labels2: &[Option<bool>],
) -> Result<f64, LossError> {
    vis_core(logits1, logits2, labels1, labels2, None)
}

fn vis_core(
    logits1: &[f64],
    logits2: &[f64],
    labels1: &[Option<bool>],
    labels2: &[Option<bool>],
    grads: Option<[&mut [f64]; 2]>,
) -> Result<f64, LossError> {
    if logits1.len() != labels1.len() || logits2.len() != labels2.len() {
        return Err(LossError::ShapeMismatch("logits and labels differ in length".into()));
    }
    let all = labels1.iter().chain(labels2).flatten();
    let n_pos = all.clone().filter(|y| **y).count();
    let n = all.count();
    if n == 0 {
        return Err(LossError::EmptyLabels);
    }
    let n_neg = n - n_pos;
    let k = (n_pos > 0) as usize + (n_neg > 0) as usize;
    let w_pos = if n_pos > 0 { n as f64 / (k * n_pos) as f64 } else { 0.0 };
    let w_neg = if n_neg > 0 { n as f64 / (k * n_neg) as f64 } else { 0.0 };

    let mut loss = 0.0;
    let mut grads = grads;
    for (v, (logits, labels)) in [(logits1, labels1), (logits2, labels2)].into_iter().enumerate() {
        for (i, (&x, y)) in logits.iter().zip(labels.iter()).enumerate() {
            let Some(y) = *y else { continue };
            let (wt, t) = if y { (w_pos, 1.0) } else { (w_neg, 0.0) };
            // softplus(x) - t·x, stable for large |x|
            let bce = x.max(0.0) - t * x + (-x.abs()).exp().ln_1p();
            loss += wt * bce;
            if let Some(g) = grads.as_mut() {
                let sig = 1.0 / (1.0 + (-x).exp());
                g[v][i] += wt * (sig - t) / n as f64;
            }
        }
    }
    Ok(loss / n as f64)
}

/// Predicted pointmaps wrapped as bundles in the first view's frame, masked
/// by the ground-truth validity.
pub fn predicted_bundles(outputs: &ForwardOutputs, sample: &ScenePairSample) -> Result<[PointMapBundle; 2], LossError> {
    let make = |v: usize, gt: &PointMapBundle| -> Result<PointMapBundle, LossError> {
        let o = &outputs.views[v];
        let pts = o.points.chunks_exact(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect();
        let mut b = PointMapBundle::new(outputs.width, outputs.height, pts, gt.valid.clone(), 1)?;
        b.confidence = o.confidence.clone();
        Ok(b)
    };
    Ok([make(0, &sample.gt_points1)?, make(1, &sample.gt_points2)?])
}

pub fn total_loss(
    outputs: &ForwardOutputs,
    sample: &ScenePairSample,
    matches: &MatchSet,
    cfg: &LossConfig,
) -> Result<LossBreakdown, LossError> {
    total_core(outputs, sample, matches, cfg, None)
}

/// Total loss plus its gradient with respect to both views' outputs.
pub fn total_loss_with_grads(
    outputs: &ForwardOutputs,
    sample: &ScenePairSample,
    matches: &MatchSet,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, [ViewGrads; 2]), LossError> {
    let pixels = outputs.width * outputs.height;
    let dim = outputs.views[0].descriptors.dim;
    let mut grads = [ViewGrads::zeros(pixels, dim), ViewGrads::zeros(pixels, dim)];
    let b = total_core(outputs, sample, matches, cfg, Some(&mut grads))?;
    Ok((b, grads))
}

fn total_core(
    outputs: &ForwardOutputs,
    sample: &ScenePairSample,
    matches: &MatchSet,
    cfg: &LossConfig,
    mut grads: Option<&mut [ViewGrads; 2]>,
) -> Result<LossBreakdown, LossError> {
    cfg.validate()?;
    let pixels = outputs.width * outputs.height;
    if sample.width() != outputs.width || sample.height() != outputs.height {
        return Err(LossError::ShapeMismatch("outputs and sample differ in resolution".into()));
    }
    let gts = [&sample.gt_points1, &sample.gt_points2];

    let mut conf = 0.0;
    for v in 0..2 {
        let o = &outputs.views[v];
        let valid = &gts[v].valid;
        let g = grads.as_mut().map(|g| {
            let gv = &mut g[v];
            (gv.points.as_mut_slice(), gv.confidence.as_mut_slice())
        });
        conf += conf_view(&o.points, &o.confidence, valid, gts[v], cfg.conf_alpha, g)?;
    }
    debug_assert_eq!(gts[0].len(), pixels);

    let mut match_terms = [0.0; 2];
    for (slot, (kind, weight)) in [(MatchKind::Static, cfg.alpha), (MatchKind::Dynamic, cfg.beta)]
        .into_iter()
        .enumerate()
    {
        if matches.count(kind) == 0 {
            continue;
        }
        let conf_maps = [outputs.views[0].confidence.as_slice(), outputs.views[1].confidence.as_slice()];
        let conf_arg = cfg.confidence_weighted_matching.then_some(conf_maps);
        let (d1, d2) = (&outputs.views[0].descriptors, &outputs.views[1].descriptors);
        // Gradients are accumulated scaled by the term weight, so compute
        // into scratch buffers when a weight other than one applies.
        match grads.as_mut() {
            Some(g) if weight != 0.0 => {
                let mut sd1 = vec![0.0; g[0].descriptors.len()];
                let mut sd2 = vec![0.0; g[1].descriptors.len()];
                let mut sc1 = vec![0.0; pixels];
                let mut sc2 = vec![0.0; pixels];
                match_terms[slot] = infonce_core(
                    d1,
                    d2,
                    matches,
                    kind,
                    cfg.tau,
                    conf_arg,
                    Some(MatchGrads {
                        desc1: &mut sd1,
                        desc2: &mut sd2,
                        conf1: &mut sc1,
                        conf2: &mut sc2,
                    }),
                )?;
                axpy(&mut g[0].descriptors, weight, &sd1);
                axpy(&mut g[1].descriptors, weight, &sd2);
                axpy(&mut g[0].confidence, weight, &sc1);
                axpy(&mut g[1].confidence, weight, &sc2);
            }
            _ => {
                match_terms[slot] = infonce_core(d1, d2, matches, kind, cfg.tau, conf_arg, None)?;
            }
        }
    }

    let (l1, l2) = (&outputs.views[0].vis_logits, &outputs.views[1].vis_logits);
    let vis = match grads.as_mut() {
        Some(g) if cfg.gamma != 0.0 => {
            let mut s1 = vec![0.0; pixels];
            let mut s2 = vec![0.0; pixels];
            let v = vis_core(l1, l2, &sample.vis_labels1, &sample.vis_labels2, Some([&mut s1, &mut s2]))?;
            axpy(&mut g[0].vis_logits, cfg.gamma, &s1);
            axpy(&mut g[1].vis_logits, cfg.gamma, &s2);
            v
        }
        _ => vis_core(l1, l2, &sample.vis_labels1, &sample.vis_labels2, None)?,
    };

    Ok(LossBreakdown::combine(conf, match_terms[0], match_terms[1], vis, cfg))
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}
