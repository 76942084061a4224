//! Training-pair sampling: stride-weighted frame pairs and match sets with a
//! controlled fraction of dynamic correspondences.

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::MatchKind;
use crate::scene::ScenePairSample;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PairError {
    #[error("invalid stride schedule: {0}")]
    InvalidSchedule(String),
    #[error("no stride in {strides:?} fits a video of {num_frames} frames")]
    NoFeasibleStride { strides: Vec<usize>, num_frames: usize },
    #[error("dynamic ratio {0} outside [0, 1]")]
    InvalidRatio(f64),
    #[error("budget must be at least 1")]
    ZeroBudget,
    #[error("frame pair shares no visible surfel")]
    NoPositives,
}

/// Strictly increasing list of frame gaps.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct StrideSchedule {
    strides: Vec<usize>,
}

impl StrideSchedule {
    pub fn new(strides: Vec<usize>) -> Result<Self, PairError> {
        if strides.is_empty() {
            return Err(PairError::InvalidSchedule("empty".into()));
        }
        if strides[0] == 0 {
            return Err(PairError::InvalidSchedule("strides must be at least 1".into()));
        }
        if strides.windows(2).any(|w| w[0] >= w[1]) {
            return Err(PairError::InvalidSchedule("strides must be strictly increasing".into()));
        }
        Ok(StrideSchedule { strides })
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    /// Long-video schedule: 10 to 170 in steps of 20.
    pub fn long_video() -> Self {
        Self::new((10..=170).step_by(20).collect()).unwrap()
    }

    /// Short-video schedule: 10 to 90 in steps of 10.
    pub fn short_video() -> Self {
        Self::new((10..=90).step_by(10).collect()).unwrap()
    }
}

impl TryFrom<Vec<usize>> for StrideSchedule {
    type Error = PairError;
    fn try_from(v: Vec<usize>) -> Result<Self, Self::Error> {
        StrideSchedule::new(v)
    }
}

impl From<StrideSchedule> for Vec<usize> {
    fn from(s: StrideSchedule) -> Self {
        s.strides
    }
}

/// Draw a frame pair `(t1, t1 + s)`: the stride `s` is chosen with probability
/// proportional to its value among strides that fit, then `t1` is uniform.
pub fn sample_pair_indices<R: Rng + ?Sized>(
    num_frames: usize,
    schedule: &StrideSchedule,
    rng: &mut R,
) -> Result<(usize, usize), PairError> {
    let feasible: Vec<usize> = schedule.strides().iter().copied().filter(|&s| s < num_frames).collect();
    if feasible.is_empty() {
        return Err(PairError::NoFeasibleStride {
            strides: schedule.strides().to_vec(),
            num_frames,
        });
    }
    let dist = WeightedIndex::new(&feasible).expect("positive weights");
    let s = feasible[dist.sample(rng)];
    let t1 = rng.gen_range(0..num_frames - s);
    Ok((t1, t1 + s))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PositivePair {
    /// `(x, y)` pixel coordinates in each view.
    pub pixel1: [f64; 2],
    pub pixel2: [f64; 2],
    pub kind: MatchKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchSet {
    pub positives: Vec<PositivePair>,
    /// Pixels without a cross-frame match, per view.
    pub negatives1: Vec<[f64; 2]>,
    pub negatives2: Vec<[f64; 2]>,
    /// Achieved fraction of dynamic positives.
    pub r_actual: f64,
}

impl MatchSet {
    pub fn count(&self, kind: MatchKind) -> usize {
        self.positives.iter().filter(|p| p.kind == kind).count()
    }

    pub fn filtered(&self, kind: MatchKind) -> impl Iterator<Item = &PositivePair> {
        self.positives.iter().filter(move |p| p.kind == kind)
    }
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// Choose how many dynamic and static positives to take from pools of the
/// given sizes.
///
/// With ample pools the dynamic count is `round(r·budget)`. When one pool runs
/// short it is taken whole and the other pool contributes only as many pairs
/// as keep the short kind's share at or below its target; for `r` of exactly
/// 0 or 1 the other pool is never touched. If that leaves nothing while some
/// pool is non-empty (only possible for `r` strictly inside (0, 1)), the
/// non-empty pool is used alone.
pub fn allocate_counts(dynamic_pool: usize, static_pool: usize, r: f64, budget: usize) -> (usize, usize) {
    let want_dyn = round_half_up(r * budget as f64).min(budget);
    let want_static = budget - want_dyn;
    let (k, m) = if want_dyn <= dynamic_pool && want_static <= static_pool {
        (want_dyn, want_static)
    } else if want_dyn > dynamic_pool {
        let k = dynamic_pool;
        let m = if r >= 1.0 {
            0
        } else {
            let needed = (k as f64 * (1.0 - r) / r).ceil();
            let needed = if needed.is_finite() { needed as usize } else { usize::MAX };
            needed.min(static_pool).min(budget - k)
        };
        (k, m)
    } else {
        let m = static_pool;
        let k = if r <= 0.0 {
            0
        } else {
            let needed = (m as f64 * r / (1.0 - r)).ceil();
            let needed = if needed.is_finite() { needed as usize } else { usize::MAX };
            needed.min(dynamic_pool).min(budget - m)
        };
        (k, m)
    };
    if k + m == 0 && r > 0.0 && r < 1.0 {
        return (dynamic_pool.min(budget), static_pool.min(budget - dynamic_pool.min(budget)));
    }
    (k, m)
}

fn xy(idx: usize, width: usize) -> [f64; 2] {
    [(idx % width) as f64, (idx / width) as f64]
}

fn pick<R: Rng + ?Sized>(rng: &mut R, len: usize, amount: usize) -> Vec<usize> {
    let mut v = index::sample(rng, len, amount.min(len)).into_vec();
    v.sort_unstable();
    v
}

/// Sample positives at dynamic ratio `r` and pad the shortfall against
/// `budget` with unmatched pixels from each view.
pub fn build_match_set<R: Rng + ?Sized>(
    pair: &ScenePairSample,
    r: f64,
    budget: usize,
    rng: &mut R,
) -> Result<MatchSet, PairError> {
    if !(0.0..=1.0).contains(&r) {
        return Err(PairError::InvalidRatio(r));
    }
    if budget == 0 {
        return Err(PairError::ZeroBudget);
    }
    if pair.correspondences.is_empty() {
        return Err(PairError::NoPositives);
    }
    let w = pair.width();
    let dynamic: Vec<_> = pair.correspondences.iter().filter(|c| c.kind == MatchKind::Dynamic).collect();
    let stat: Vec<_> = pair.correspondences.iter().filter(|c| c.kind == MatchKind::Static).collect();
    let (k, m) = allocate_counts(dynamic.len(), stat.len(), r, budget);

    let mut positives = Vec::with_capacity(k + m);
    for (pool, count) in [(&dynamic, k), (&stat, m)] {
        for i in pick(rng, pool.len(), count) {
            let c = pool[i];
            positives.push(PositivePair {
                pixel1: xy(c.pixel1, w),
                pixel2: xy(c.pixel2, w),
                kind: c.kind,
            });
        }
    }

    let n_neg = budget.saturating_sub(positives.len());
    let npix = pair.frame1.num_pixels();
    let mut matched1 = vec![false; npix];
    let mut matched2 = vec![false; npix];
    for c in &pair.correspondences {
        matched1[c.pixel1] = true;
        matched2[c.pixel2] = true;
    }
    let mut negatives = |matched: &[bool]| -> Vec<[f64; 2]> {
        let free: Vec<usize> = (0..npix).filter(|&i| !matched[i]).collect();
        pick(rng, free.len(), n_neg).into_iter().map(|i| xy(free[i], w)).collect()
    };
    let negatives1 = negatives(&matched1);
    let negatives2 = negatives(&matched2);

    let r_actual = if positives.is_empty() { 0.0 } else { k as f64 / positives.len() as f64 };
    Ok(MatchSet {
        positives,
        negatives1,
        negatives2,
        r_actual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::DEFAULT_STATIC_EPS;
    use crate::scene::{generate_scene, ground_truth_pair, SceneSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn schedule_validation() {
        assert!(StrideSchedule::new(vec![]).is_err());
        assert!(StrideSchedule::new(vec![0, 1]).is_err());
        assert!(StrideSchedule::new(vec![3, 3]).is_err());
        assert!(StrideSchedule::new(vec![5, 2]).is_err());
        assert_eq!(StrideSchedule::long_video().strides(), &[10, 30, 50, 70, 90, 110, 130, 150, 170]);
        assert_eq!(StrideSchedule::short_video().strides(), &[10, 20, 30, 40, 50, 60, 70, 80, 90]);
    }

    #[test]
    fn stride_frequencies_proportional() {
        let sched = StrideSchedule::new(vec![1, 2, 3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n = 60_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            let (a, b) = sample_pair_indices(100, &sched, &mut rng).unwrap();
            assert!(b < 100);
            counts[b - a - 1] += 1;
        }
        for (i, &c) in counts.iter().enumerate() {
            let p = (i + 1) as f64 / 6.0;
            let sigma = (n as f64 * p * (1.0 - p)).sqrt();
            assert!((c as f64 - n as f64 * p).abs() < 3.0 * sigma, "stride {} count {c}", i + 1);
        }
    }

    #[test]
    fn single_stride() {
        let sched = StrideSchedule::new(vec![10]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..500 {
            let (a, b) = sample_pair_indices(48, &sched, &mut rng).unwrap();
            assert_eq!(b - a, 10);
            assert!(b < 48);
        }
    }

    #[test]
    fn infeasible_strides_filtered() {
        let sched = StrideSchedule::long_video();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 40_000;
        let mut c10 = 0usize;
        for _ in 0..n {
            let (a, b) = sample_pair_indices(48, &sched, &mut rng).unwrap();
            match b - a {
                10 => c10 += 1,
                30 => {}
                s => panic!("unexpected stride {s}"),
            }
        }
        // renormalized weights 10/40 and 30/40
        let p = 0.25;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((c10 as f64 - n as f64 * p).abs() < 3.0 * sigma);
        assert!(matches!(
            sample_pair_indices(10, &sched, &mut rng),
            Err(PairError::NoFeasibleStride { .. })
        ));
    }

    /// Exhaustive search: the short pool is used whole, the short kind never
    /// exceeds its target share, and the achieved ratio is closest to `r`
    /// (ties go to more positives).
    fn allocation_oracle(nd: usize, ns: usize, r: f64, budget: usize) -> (usize, usize) {
        let want = ((r * budget as f64) + 0.5).floor() as usize;
        if want <= nd && budget - want <= ns {
            return (want, budget - want);
        }
        let mut best: Option<(usize, usize)> = None;
        for k in 0..=nd.min(budget) {
            for m in 0..=ns.min(budget - k) {
                let n = k + m;
                if n == 0 {
                    continue;
                }
                let frac = k as f64 / n as f64;
                let ok = if want > nd { k == nd && frac <= r + 1e-12 } else { m == ns && frac >= r - 1e-12 };
                if !ok {
                    continue;
                }
                let better = match best {
                    None => true,
                    Some((bk, bm)) => {
                        let bf = bk as f64 / (bk + bm) as f64;
                        let (d, bd) = ((frac - r).abs(), (bf - r).abs());
                        d < bd - 1e-15 || ((d - bd).abs() <= 1e-15 && n > bk + bm)
                    }
                };
                if better {
                    best = Some((k, m));
                }
            }
        }
        // no allocation honours the share bound: both pools are short, take both
        best.unwrap_or((nd.min(budget), ns.min(budget - nd.min(budget))))
    }

    #[test]
    fn allocation_examples() {
        assert_eq!(allocate_counts(10_000, 10_000, 0.95, 4096), (3891, 205));
        assert_eq!(allocate_counts(100, 100, 0.95, 4096), (100, 6));
        assert_eq!(allocate_counts(100, 100, 0.0, 4096), (0, 100));
        assert_eq!(allocate_counts(100, 100, 1.0, 4096), (100, 0));
        assert_eq!(allocate_counts(0, 50, 1.0, 64), (0, 0));
        assert_eq!(allocate_counts(0, 50, 0.5, 64), (0, 50));
        let (k, m) = allocate_counts(100, 100, 0.95, 4096);
        assert!((k as f64 / (k + m) as f64 - 0.943).abs() < 1e-3);
    }

    #[test]
    fn allocation_matches_oracle() {
        for nd in [0usize, 1, 3, 17, 100] {
            for ns in [0usize, 2, 9, 100] {
                for r in [0.05, 0.3, 0.5, 0.95] {
                    for budget in [1usize, 8, 50, 256] {
                        let got = allocate_counts(nd, ns, r, budget);
                        if got.0 + got.1 == 0 || nd == 0 || ns == 0 {
                            continue;
                        }
                        assert_eq!(got, allocation_oracle(nd, ns, r, budget), "nd={nd} ns={ns} r={r} b={budget}");
                    }
                }
            }
        }
    }

    fn pair(seed: u64) -> ScenePairSample {
        let spec = SceneSpec {
            seed,
            num_frames: 20,
            ..SceneSpec::default()
        };
        let scene = generate_scene(&spec).unwrap();
        ground_truth_pair(&scene, 2, 17, DEFAULT_STATIC_EPS).unwrap()
    }

    #[test]
    fn match_set_properties() {
        let p = pair(3);
        for r in [0.0, 0.5, 0.95, 1.0] {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let ms = build_match_set(&p, r, 512, &mut rng).unwrap();
            if r == 0.0 {
                assert!(ms.positives.iter().all(|q| q.kind == MatchKind::Static));
            }
            if r == 1.0 {
                assert!(ms.positives.iter().all(|q| q.kind == MatchKind::Dynamic));
            }
            let dynamic = ms.count(MatchKind::Dynamic);
            assert_eq!(ms.r_actual, dynamic as f64 / ms.positives.len() as f64);
            // kinds agree with the ground-truth labels
            for q in &ms.positives {
                let idx = q.pixel1[1] as usize * p.width() + q.pixel1[0] as usize;
                let c = p.correspondences.iter().find(|c| c.pixel1 == idx).unwrap();
                assert_eq!(c.kind, q.kind);
            }
            // negatives never coincide with a matched pixel of the same view
            for n in &ms.negatives1 {
                assert!(!ms.positives.iter().any(|q| q.pixel1 == *n));
            }
            for n in &ms.negatives2 {
                assert!(!ms.positives.iter().any(|q| q.pixel2 == *n));
            }
            assert!(ms.positives.len() + ms.negatives1.len() <= 512);
            let again = build_match_set(&p, r, 512, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
            assert_eq!(ms, again);
        }
    }

    #[test]
    fn match_set_errors() {
        let p = pair(4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(build_match_set(&p, 1.5, 10, &mut rng), Err(PairError::InvalidRatio(1.5)));
        assert_eq!(build_match_set(&p, 0.5, 0, &mut rng), Err(PairError::ZeroBudget));
        let mut empty = p.clone();
        empty.correspondences.clear();
        assert_eq!(build_match_set(&empty, 0.5, 10, &mut rng), Err(PairError::NoPositives));
    }
}
