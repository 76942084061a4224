//! Query sampling and ground-truth assembly for evaluation videos.

use anyhow::{bail, Result};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use corrtrack_core::geom::DEFAULT_STATIC_EPS;
use corrtrack_core::metrics::{EvalTrack, EvalVideo};
use corrtrack_core::scene::{ground_truth_track, GroundTruthTrack, Scene};
use corrtrack_core::track::{tracker_mode, CorrespondenceSource, TrackConfig, TrackQuery, Trajectory, Video};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QueryConfig {
    pub per_video: usize,
    /// Share of queries drawn from moving objects.
    pub dynamic_share: f64,
    /// Only surfels first seen in one of these frames are queried.
    pub query_frames: Vec<usize>,
    pub seed: u64,
}

impl Default for QueryConfig {
    fn default() -> Self {
        QueryConfig {
            per_video: 64,
            dynamic_share: 0.5,
            query_frames: vec![0],
            seed: 0,
        }
    }
}

/// Ground-truth tracks and their queries for one video.
#[derive(Debug, Clone)]
pub struct QuerySet {
    pub tracks: Vec<GroundTruthTrack>,
    pub queries: Vec<TrackQuery>,
}

/// Pick surfels to track: each is queried at its first visible frame, at its
/// exact projection there.
pub fn sample_queries(scene: &Scene, video: &Video, cfg: &QueryConfig) -> Result<QuerySet> {
    if !(0.0..=1.0).contains(&cfg.dynamic_share) {
        bail!("dynamic_share must lie in [0, 1]");
    }
    let mut dynamic = Vec::new();
    let mut stat = Vec::new();
    for id in 0..scene.num_surfels() {
        let gt = ground_truth_track(scene, &video.frames, id, DEFAULT_STATIC_EPS);
        let Some(tq) = gt.first_visible() else { continue };
        if !cfg.query_frames.contains(&tq) {
            continue;
        }
        if scene.owner(id).is_some() {
            dynamic.push(gt);
        } else {
            stat.push(gt);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ scene.spec.seed.rotate_left(17));
    let want_dyn = ((cfg.per_video as f64 * cfg.dynamic_share).round() as usize).min(dynamic.len());
    let want_static = (cfg.per_video - want_dyn).min(stat.len());
    let mut tracks = Vec::new();
    for (pool, n) in [(&dynamic, want_dyn), (&stat, want_static)] {
        let mut idx = index::sample(&mut rng, pool.len(), n).into_vec();
        idx.sort_unstable();
        tracks.extend(idx.into_iter().map(|i| pool[i].clone()));
    }
    let queries = tracks
        .iter()
        .map(|gt| {
            let tq = gt.first_visible().expect("visible somewhere");
            let p = gt.pixels[tq].expect("visible implies projected");
            TrackQuery {
                query_frame: tq,
                pixel: [p.x, p.y],
            }
        })
        .collect();
    Ok(QuerySet { tracks, queries })
}

/// Track every query of a video and pair the result with ground truth.
pub fn eval_video(
    scene: &Scene,
    video: &Video,
    set: &QuerySet,
    source: &dyn CorrespondenceSource,
    mode: &str,
    cfg: &TrackConfig,
) -> Result<EvalVideo> {
    let pred = tracker_mode(mode)?.run(video, source, &set.queries, cfg)?;
    Ok(pair_with_ground_truth(scene, set, pred))
}

pub fn pair_with_ground_truth(scene: &Scene, set: &QuerySet, pred: Vec<Trajectory>) -> EvalVideo {
    let gt = set
        .tracks
        .iter()
        .zip(&set.queries)
        .map(|(g, q)| EvalTrack::from_ground_truth(g, q.query_frame, &scene.cameras))
        .collect();
    EvalVideo {
        width: scene.spec.width,
        height: scene.spec.height,
        cameras: scene.cameras.clone(),
        gt,
        pred,
    }
}
