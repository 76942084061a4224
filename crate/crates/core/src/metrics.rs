//! Tracking metrics: position accuracy averaged over pixel thresholds,
//! occlusion accuracy, and 3D accuracy after median scaling.
//!
//! Entries with `valid = false` never count, and neither does the query
//! frame itself. Position and 3D metrics only look at entries whose ground
//! truth is visible.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::Camera;
use crate::scene::GroundTruthTrack;
use crate::track::Trajectory;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("nothing to evaluate")]
    EmptyEval,
    #[error("predicted 3D point has zero norm")]
    ZeroNormPrediction,
    #[error("prediction and ground truth disagree: {0}")]
    QueryMismatch(String),
    #[error("invalid eval config: {0}")]
    InvalidConfig(String),
    #[error("unknown scale estimator '{0}'")]
    UnknownScale(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OaAveraging {
    /// One mean over every (track, frame) entry of every video.
    Pooled,
    /// Mean of per-video accuracies.
    PerVideo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub delta_thresholds: Vec<f64>,
    /// Resolution at which pixel errors are measured; `None` keeps the
    /// native resolution (written `"native"` in config files).
    #[serde(with = "resolution")]
    pub eval_resolution: Option<[usize; 2]>,
    pub apd_thresholds: Vec<f64>,
    /// Share of the image diagonal a track must travel to count as dynamic.
    pub dynamic_split_fraction: f64,
    pub visibility_threshold: f64,
    pub oa_averaging: OaAveraging,
    /// Registered scale estimator for the 3D metric.
    pub median_scaling: String,
}

mod resolution {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Size([usize; 2]),
        Name(String),
    }

    pub fn serialize<S: Serializer>(v: &Option<[usize; 2]>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(wh) => Repr::Size(*wh),
            None => Repr::Name("native".into()),
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<[usize; 2]>, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Size(wh) => Ok(Some(wh)),
            Repr::Name(n) if n == "native" => Ok(None),
            Repr::Name(n) => Err(serde::de::Error::custom(format!("eval_resolution must be [w, h] or \"native\", got \"{n}\""))),
        }
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            delta_thresholds: vec![1.0, 2.0, 4.0, 8.0, 16.0],
            eval_resolution: Some([256, 256]),
            apd_thresholds: vec![0.1, 0.3, 0.5, 1.0],
            dynamic_split_fraction: 0.1,
            visibility_threshold: 0.5,
            oa_averaging: OaAveraging::Pooled,
            median_scaling: "median-ratio".into(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), MetricsError> {
        for (name, th) in [("delta_thresholds", &self.delta_thresholds), ("apd_thresholds", &self.apd_thresholds)] {
            if th.is_empty() || th.iter().any(|t| !(*t > 0.0)) || th.windows(2).any(|w| w[0] >= w[1]) {
                return Err(MetricsError::InvalidConfig(format!("{name} must be positive and strictly ascending")));
            }
        }
        if let Some([w, h]) = self.eval_resolution {
            if w == 0 || h == 0 {
                return Err(MetricsError::InvalidConfig("eval_resolution must be nonzero".into()));
            }
        }
        scale_estimator(&self.median_scaling)?;
        Ok(())
    }
}

/// Ground truth of one query as the metrics see it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalTrack {
    pub query_frame: usize,
    pub pixels: Vec<[f64; 2]>,
    pub visible: Vec<bool>,
    /// Positions in the query camera frame, when 3D ground truth exists.
    pub points3d: Option<Vec<[f64; 3]>>,
}

impl EvalTrack {
    pub fn from_ground_truth(gt: &GroundTruthTrack, query_frame: usize, cameras: &[Camera]) -> Self {
        let qcam = &cameras[query_frame];
        EvalTrack {
            query_frame,
            pixels: gt.pixels.iter().map(|p| p.map(|p| [p.x, p.y]).unwrap_or([f64::NAN; 2])).collect(),
            visible: gt.visible.clone(),
            points3d: Some(
                gt.world
                    .iter()
                    .map(|w| {
                        let p = qcam.world_to_camera(w);
                        [p.x, p.y, p.z]
                    })
                    .collect(),
            ),
        }
    }
}

fn check_pairing(pred: &[Trajectory], gt: &[EvalTrack]) -> Result<(), MetricsError> {
    if pred.len() != gt.len() {
        return Err(MetricsError::QueryMismatch(format!("{} predictions for {} tracks", pred.len(), gt.len())));
    }
    for (i, (p, g)) in pred.iter().zip(gt).enumerate() {
        if p.query.query_frame != g.query_frame {
            return Err(MetricsError::QueryMismatch(format!(
                "track {i}: query frame {} vs {}",
                p.query.query_frame, g.query_frame
            )));
        }
        if p.points.len() != g.visible.len() || g.pixels.len() != g.visible.len() {
            return Err(MetricsError::QueryMismatch(format!("track {i}: frame counts differ")));
        }
    }
    Ok(())
}

/// Entries that take part in evaluation: valid, and not the query frame.
fn scored(p: &Trajectory, g: &EvalTrack, t: usize) -> bool {
    p.points[t].valid && t != g.query_frame
}

/// Hit counts per threshold over GT-visible entries.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DeltaCounts {
    pub hits: Vec<usize>,
    pub total: usize,
}

impl DeltaCounts {
    pub fn merge(&mut self, other: &DeltaCounts) {
        if self.hits.is_empty() {
            self.hits = vec![0; other.hits.len()];
        }
        for (a, b) in self.hits.iter_mut().zip(&other.hits) {
            *a += b;
        }
        self.total += other.total;
    }

    pub fn result(&self) -> Result<DeltaResult, MetricsError> {
        if self.total == 0 {
            return Err(MetricsError::EmptyEval);
        }
        let per_threshold: Vec<f64> = self.hits.iter().map(|h| 100.0 * *h as f64 / self.total as f64).collect();
        let average = per_threshold.iter().sum::<f64>() / per_threshold.len() as f64;
        Ok(DeltaResult {
            per_threshold,
            average,
            count: self.total,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaResult {
    pub per_threshold: Vec<f64>,
    pub average: f64,
    pub count: usize,
}

/// Threshold hit counts restricted to entries whose separation from the
/// query frame satisfies `keep`.
pub fn delta_counts<F: Fn(usize) -> bool>(
    pred: &[Trajectory],
    gt: &[EvalTrack],
    native: [usize; 2],
    cfg: &EvalConfig,
    keep: F,
) -> Result<DeltaCounts, MetricsError> {
    check_pairing(pred, gt)?;
    let [sx, sy] = match cfg.eval_resolution {
        Some([w, h]) => [w as f64 / native[0] as f64, h as f64 / native[1] as f64],
        None => [1.0, 1.0],
    };
    let mut c = DeltaCounts {
        hits: vec![0; cfg.delta_thresholds.len()],
        total: 0,
    };
    for (p, g) in pred.iter().zip(gt) {
        for t in 0..g.visible.len() {
            if !scored(p, g, t) || !g.visible[t] || !keep(t.abs_diff(g.query_frame)) {
                continue;
            }
            let dx = (p.points[t].pixel[0] - g.pixels[t][0]) * sx;
            let dy = (p.points[t].pixel[1] - g.pixels[t][1]) * sy;
            let err = (dx * dx + dy * dy).sqrt();
            c.total += 1;
            for (h, th) in c.hits.iter_mut().zip(&cfg.delta_thresholds) {
                if err <= *th {
                    *h += 1;
                }
            }
        }
    }
    Ok(c)
}

/// Percentage of visible entries within each pixel threshold, and their mean.
pub fn delta_avg(pred: &[Trajectory], gt: &[EvalTrack], native: [usize; 2], cfg: &EvalConfig) -> Result<DeltaResult, MetricsError> {
    delta_counts(pred, gt, native, cfg, |_| true)?.result()
}

/// Correct and total visibility decisions.
pub fn occlusion_counts(pred: &[Trajectory], gt: &[EvalTrack], cfg: &EvalConfig) -> Result<(usize, usize), MetricsError> {
    check_pairing(pred, gt)?;
    let mut correct = 0;
    let mut total = 0;
    for (p, g) in pred.iter().zip(gt) {
        for t in 0..g.visible.len() {
            if !scored(p, g, t) {
                continue;
            }
            total += 1;
            if p.points[t].visible(cfg.visibility_threshold) == g.visible[t] {
                correct += 1;
            }
        }
    }
    Ok((correct, total))
}

pub fn occlusion_accuracy(pred: &[Trajectory], gt: &[EvalTrack], cfg: &EvalConfig) -> Result<f64, MetricsError> {
    let (c, n) = occlusion_counts(pred, gt, cfg)?;
    if n == 0 {
        return Err(MetricsError::EmptyEval);
    }
    Ok(100.0 * c as f64 / n as f64)
}

/// Accuracy of always answering with the more common visibility label.
pub fn majority_baseline(pred: &[Trajectory], gt: &[EvalTrack]) -> Result<f64, MetricsError> {
    check_pairing(pred, gt)?;
    let (mut vis, mut n) = (0usize, 0usize);
    for (p, g) in pred.iter().zip(gt) {
        for t in 0..g.visible.len() {
            if scored(p, g, t) {
                n += 1;
                vis += g.visible[t] as usize;
            }
        }
    }
    if n == 0 {
        return Err(MetricsError::EmptyEval);
    }
    Ok(100.0 * vis.max(n - vis) as f64 / n as f64)
}

/// Global scale that maps predicted 3D points onto ground truth.
pub trait ScaleEstimator: Send + Sync {
    fn name(&self) -> &'static str;
    /// `pairs` holds `(‖gt‖, ‖pred‖)` with nonzero predicted norms.
    fn scale(&self, pairs: &[(f64, f64)]) -> f64;
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median of per-point norm ratios.
pub struct MedianRatio;

impl ScaleEstimator for MedianRatio {
    fn name(&self) -> &'static str {
        "median-ratio"
    }

    fn scale(&self, pairs: &[(f64, f64)]) -> f64 {
        median(pairs.iter().map(|(g, p)| g / p).collect())
    }
}

/// Ratio of the median norms.
pub struct RatioOfMedians;

impl ScaleEstimator for RatioOfMedians {
    fn name(&self) -> &'static str {
        "ratio-of-medians"
    }

    fn scale(&self, pairs: &[(f64, f64)]) -> f64 {
        median(pairs.iter().map(|p| p.0).collect()) / median(pairs.iter().map(|p| p.1).collect())
    }
}

fn scale_registry() -> &'static BTreeMap<&'static str, Box<dyn ScaleEstimator>> {
    static REG: OnceLock<BTreeMap<&'static str, Box<dyn ScaleEstimator>>> = OnceLock::new();
    REG.get_or_init(|| {
        let all: Vec<Box<dyn ScaleEstimator>> = vec![Box::new(MedianRatio), Box::new(RatioOfMedians)];
        all.into_iter().map(|s| (s.name(), s)).collect()
    })
}

pub fn scale_estimator(name: &str) -> Result<&'static dyn ScaleEstimator, MetricsError> {
    scale_registry()
        .get(name)
        .map(|b| b.as_ref())
        .ok_or_else(|| MetricsError::UnknownScale(name.into()))
}

/// Points within each distance threshold after scaling, with the scale used.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ApdCounts {
    pub hits: Vec<usize>,
    pub total: usize,
    pub scale: f64,
}

pub fn apd_counts(pred: &[Trajectory], gt: &[EvalTrack], cfg: &EvalConfig) -> Result<ApdCounts, MetricsError> {
    check_pairing(pred, gt)?;
    let est = scale_estimator(&cfg.median_scaling)?;
    // a scored entry without a 3D prediction counts as a miss
    let mut pts: Vec<(Option<[f64; 3]>, [f64; 3])> = Vec::new();
    for (p, g) in pred.iter().zip(gt) {
        let Some(g3) = &g.points3d else { continue };
        for (t, (&vis, &gp)) in g.visible.iter().zip(g3).enumerate() {
            if vis && scored(p, g, t) {
                pts.push((p.points[t].point3d, gp));
            }
        }
    }
    if pts.is_empty() {
        return Err(MetricsError::EmptyEval);
    }
    let norm = |v: &[f64; 3]| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    let mut pairs = Vec::with_capacity(pts.len());
    for (p, g) in &pts {
        let Some(p) = p else { continue };
        let n = norm(p);
        if n == 0.0 {
            return Err(MetricsError::ZeroNormPrediction);
        }
        pairs.push((norm(g), n));
    }
    let s = if pairs.is_empty() { 1.0 } else { est.scale(&pairs) };
    let mut hits = vec![0; cfg.apd_thresholds.len()];
    for (p, g) in &pts {
        let Some(p) = p else { continue };
        let d = norm(&[s * p[0] - g[0], s * p[1] - g[1], s * p[2] - g[2]]);
        for (h, th) in hits.iter_mut().zip(&cfg.apd_thresholds) {
            if d <= *th {
                *h += 1;
            }
        }
    }
    Ok(ApdCounts {
        hits,
        total: pts.len(),
        scale: s,
    })
}

fn apd_from_counts(c: &ApdCounts) -> f64 {
    let k = c.hits.len() as f64;
    c.hits.iter().map(|h| 100.0 * *h as f64 / c.total as f64).sum::<f64>() / k
}

/// Average over distance thresholds of the share of visible points within
/// the threshold, after one global rescaling of the predictions.
pub fn apd(pred: &[Trajectory], gt: &[EvalTrack], cfg: &EvalConfig) -> Result<f64, MetricsError> {
    Ok(apd_from_counts(&apd_counts(pred, gt, cfg)?))
}

/// Indices of tracks that travel at least `fraction` of the image diagonal
/// between any two visible frames. Videos with any camera motion contribute
/// nothing.
pub fn dynamic_split(gt: &[EvalTrack], cameras: &[Camera], cfg: &EvalConfig) -> Vec<usize> {
    let Some(c0) = cameras.first() else { return Vec::new() };
    let still = cameras
        .iter()
        .all(|c| c.rotation == c0.rotation && c.translation == c0.translation && c.intrinsics == c0.intrinsics);
    if !still {
        return Vec::new();
    }
    let limit = cfg.dynamic_split_fraction * c0.diagonal();
    gt.iter()
        .enumerate()
        .filter(|(_, g)| {
            let vis: Vec<&[f64; 2]> = g.pixels.iter().zip(&g.visible).filter(|(_, v)| **v).map(|(p, _)| p).collect();
            vis.iter().enumerate().any(|(i, a)| {
                vis[i + 1..].iter().any(|b| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt() >= limit)
            })
        })
        .map(|(i, _)| i)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    All,
    Dynamic,
    Static,
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "all" => Ok(Split::All),
            "dynamic" => Ok(Split::Dynamic),
            "static" => Ok(Split::Static),
            other => Err(format!("unknown split '{other}', expected all, dynamic or static")),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::All => "all",
            Split::Dynamic => "dynamic",
            Split::Static => "static",
        })
    }
}

/// One video's predictions, ground truth and cameras.
#[derive(Debug, Clone)]
pub struct EvalVideo {
    pub width: usize,
    pub height: usize,
    pub cameras: Vec<Camera>,
    pub gt: Vec<EvalTrack>,
    pub pred: Vec<Trajectory>,
}

impl EvalVideo {
    /// Track indices of a split. The static split holds every track outside
    /// the dynamic split.
    pub fn split_indices(&self, split: Split, cfg: &EvalConfig) -> Vec<usize> {
        match split {
            Split::All => (0..self.gt.len()).collect(),
            Split::Dynamic => dynamic_split(&self.gt, &self.cameras, cfg),
            Split::Static => {
                let dynamic = dynamic_split(&self.gt, &self.cameras, cfg);
                (0..self.gt.len()).filter(|i| !dynamic.contains(i)).collect()
            }
        }
    }

    fn subset(&self, idx: &[usize]) -> (Vec<Trajectory>, Vec<EvalTrack>) {
        (
            idx.iter().map(|&i| self.pred[i].clone()).collect(),
            idx.iter().map(|&i| self.gt[i].clone()).collect(),
        )
    }
}

/// Metrics of one split, pooled over videos. Absent values mean the split
/// had nothing to score, which is different from a score of zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub delta_avg: Option<f64>,
    /// Pixel thresholds, aligned with `per_threshold`.
    pub thresholds: Vec<f64>,
    pub per_threshold: Vec<f64>,
    pub occlusion_accuracy: Option<f64>,
    pub majority_baseline: Option<f64>,
    pub apd: Option<f64>,
    pub tracks: usize,
    pub frames: usize,
    pub visible_points: usize,
}

impl EvalReport {
    pub fn is_absent(&self) -> bool {
        self.tracks == 0
    }

    /// `key = value` lines; absent metrics are written as `absent`.
    pub fn to_kv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "absent".into());
        let mut s = String::new();
        let _ = writeln!(s, "split = {}", self.split);
        let _ = writeln!(s, "tracks = {}", self.tracks);
        let _ = writeln!(s, "frames = {}", self.frames);
        let _ = writeln!(s, "visible_points = {}", self.visible_points);
        let _ = writeln!(s, "delta_avg = {}", opt(self.delta_avg));
        for (t, v) in self.thresholds.iter().zip(&self.per_threshold) {
            let _ = writeln!(s, "delta_{t} = {v:.6}");
        }
        let _ = writeln!(s, "occlusion_accuracy = {}", opt(self.occlusion_accuracy));
        let _ = writeln!(s, "majority_baseline = {}", opt(self.majority_baseline));
        let _ = writeln!(s, "apd = {}", opt(self.apd));
        s
    }
}

/// Pool metrics over videos for one split. APD is scaled per video; OA is
/// pooled or averaged per video according to the config.
pub fn evaluate(videos: &[EvalVideo], split: Split, cfg: &EvalConfig) -> Result<EvalReport, MetricsError> {
    evaluate_filtered(videos, split, cfg, |_| true)
}

/// Like [`evaluate`], with position accuracy restricted to entries whose
/// frame separation from the query satisfies `keep`.
pub fn evaluate_filtered<F: Fn(usize) -> bool>(
    videos: &[EvalVideo],
    split: Split,
    cfg: &EvalConfig,
    keep: F,
) -> Result<EvalReport, MetricsError> {
    cfg.validate()?;
    let mut delta = DeltaCounts::default();
    let (mut oa_c, mut oa_n) = (0usize, 0usize);
    let mut oa_per_video = Vec::new();
    let (mut maj_vis, mut maj_n) = (0usize, 0usize);
    let mut apd_hits = vec![0usize; cfg.apd_thresholds.len()];
    let mut apd_total = 0usize;
    let mut tracks = 0;
    for v in videos {
        let idx = v.split_indices(split, cfg);
        if idx.is_empty() {
            continue;
        }
        tracks += idx.len();
        let (pred, gt) = v.subset(&idx);
        delta.merge(&delta_counts(&pred, &gt, [v.width, v.height], cfg, &keep)?);
        let (c, n) = occlusion_counts(&pred, &gt, cfg)?;
        oa_c += c;
        oa_n += n;
        if n > 0 {
            oa_per_video.push(100.0 * c as f64 / n as f64);
        }
        for (p, g) in pred.iter().zip(&gt) {
            for t in 0..g.visible.len() {
                if scored(p, g, t) {
                    maj_n += 1;
                    maj_vis += g.visible[t] as usize;
                }
            }
        }
        let has_3d = pred.iter().any(|p| p.points.iter().any(|q| q.point3d.is_some()));
        if has_3d {
            match apd_counts(&pred, &gt, cfg) {
                Ok(a) => {
                    for (x, y) in apd_hits.iter_mut().zip(&a.hits) {
                        *x += y;
                    }
                    apd_total += a.total;
                }
                Err(MetricsError::EmptyEval) => {}
                Err(e) => return Err(e),
            }
        }
    }
    let delta_res = if delta.total > 0 { Some(delta.result()?) } else { None };
    let oa = match cfg.oa_averaging {
        OaAveraging::Pooled => (oa_n > 0).then(|| 100.0 * oa_c as f64 / oa_n as f64),
        OaAveraging::PerVideo => {
            (!oa_per_video.is_empty()).then(|| oa_per_video.iter().sum::<f64>() / oa_per_video.len() as f64)
        }
    };
    let apd = (apd_total > 0).then(|| {
        apd_from_counts(&ApdCounts {
            hits: apd_hits,
            total: apd_total,
            scale: 1.0,
        })
    });
    Ok(EvalReport {
        split,
        delta_avg: delta_res.as_ref().map(|d| d.average),
        thresholds: cfg.delta_thresholds.clone(),
        per_threshold: delta_res.as_ref().map(|d| d.per_threshold.clone()).unwrap_or_default(),
        occlusion_accuracy: oa,
        majority_baseline: (maj_n > 0).then(|| 100.0 * maj_vis.max(maj_n - maj_vis) as f64 / maj_n as f64),
        apd,
        tracks,
        frames: oa_n,
        visible_points: delta.total,
    })
}

/// `(lo, hi, delta_avg)` of one separation bucket; `hi` is `None` for the
/// open last bucket and `delta_avg` is `None` when nothing is scored.
pub type SeparationBucket = (usize, Option<usize>, Option<f64>);

/// Position accuracy bucketed by frame separation `|t - t_q|`. Buckets are
/// half-open `[edges[i], edges[i+1])`, the last one unbounded.
pub fn delta_by_separation(
    videos: &[EvalVideo],
    split: Split,
    cfg: &EvalConfig,
    edges: &[usize],
) -> Result<Vec<SeparationBucket>, MetricsError> {
    let mut out = Vec::new();
    for (i, &lo) in edges.iter().enumerate() {
        let hi = edges.get(i + 1).copied();
        let r = evaluate_filtered(videos, split, cfg, |s| s >= lo && hi.is_none_or(|h| s < h))?;
        out.push((lo, hi, r.delta_avg));
    }
    Ok(out)
}
