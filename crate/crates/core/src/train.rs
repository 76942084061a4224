//! Reverse-mode gradients of the total loss, Adam updates and the training
//! loop over synthetic scenes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::loss::{total_loss, total_loss_with_grads, LossBreakdown, LossConfig, LossError};
use crate::model::{ArchConfig, Model, ModelError, ModelParams};
use crate::pairs::{build_match_set, sample_pair_indices, MatchSet, PairError, StrideSchedule};
use crate::scene::{ground_truth_pair, Scene, SceneError, ScenePairSample};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Pair(#[from] PairError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
}

/// Loss and gradient for one pair. The gradient has the layout of `params`.
pub fn backward(
    params: &ModelParams,
    sample: &ScenePairSample,
    matches: &MatchSet,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, ModelParams), TrainError> {
    let model = Model::new(params);
    let img1 = &sample.frame1.image;
    let img2 = &sample.frame2.image;
    let (outputs, cache) = model.forward_with_cache(img1, img2, sample.width(), sample.height())?;
    let (breakdown, out_grads) = total_loss_with_grads(&outputs, sample, matches, cfg)?;
    Ok((breakdown, model.backward(&outputs, &cache, &out_grads)))
}

/// Loss only, without building a gradient.
pub fn evaluate_loss(
    params: &ModelParams,
    sample: &ScenePairSample,
    matches: &MatchSet,
    cfg: &LossConfig,
) -> Result<LossBreakdown, TrainError> {
    let outputs = Model::new(params).forward(&sample.frame1.image, &sample.frame2.image, sample.width(), sample.height())?;
    Ok(total_loss(&outputs, sample, matches, cfg)?)
}

/// Largest relative error between the analytic gradient and fourth-order
/// central differences over every parameter. The denominator is floored at `floor`
/// so entries that are zero up to rounding do not dominate.
pub fn gradient_check(
    params: &ModelParams,
    sample: &ScenePairSample,
    matches: &MatchSet,
    cfg: &LossConfig,
    step: f64,
    floor: f64,
) -> Result<GradientCheck, TrainError> {
    let (_, analytic) = backward(params, sample, matches, cfg)?;
    let mut probe = params.clone();
    let mut worst = GradientCheck::default();
    let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
    let grads = analytic.named_tensors();
    for (t, name) in names.iter().enumerate() {
        let len = grads[t].1.len();
        for i in 0..len {
            let orig = tensor_value(&probe, t, i);
            let mut at = |offset: f64| -> Result<f64, TrainError> {
                set_tensor_value(&mut probe, t, i, orig + offset);
                Ok(evaluate_loss(&probe, sample, matches, cfg)?.total)
            };
            let (u1, d1, u2, d2) = (at(step)?, at(-step)?, at(2.0 * step)?, at(-2.0 * step)?);
            set_tensor_value(&mut probe, t, i, orig);
            let numeric = (8.0 * (u1 - d1) - (u2 - d2)) / (12.0 * step);
            let a = grads[t].1.data[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            worst.checked += 1;
            if rel > worst.max_rel_error {
                worst.max_rel_error = rel;
                worst.worst_entry = format!("{name}[{i}]");
                worst.analytic = a;
                worst.numeric = numeric;
            }
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradientCheck {
    pub max_rel_error: f64,
    pub worst_entry: String,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

fn tensor_value(p: &ModelParams, t: usize, i: usize) -> f64 {
    p.named_tensors()[t].1.data[i]
}

fn set_tensor_value(p: &mut ModelParams, t: usize, i: usize, v: f64) {
    p.named_tensors_mut()[t].1.data[i] = v;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, shaped like the parameters.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    m: ModelParams,
    v: ModelParams,
}

impl Adam {
    pub fn new(params: &ModelParams, config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    /// Apply one bias-corrected update. Encoder tensors are skipped when the
    /// encoder is frozen.
    pub fn update(&mut self, params: &mut ModelParams, grads: &ModelParams, lr: f64) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        let frozen = params.frozen_encoder;
        let g = grads.named_tensors();
        let m = self.m.named_tensors_mut();
        let v = self.v.named_tensors_mut();
        for ((((name, p), (_, g)), (_, m)), (_, v)) in params.named_tensors_mut().into_iter().zip(g).zip(m).zip(v) {
            if frozen && ModelParams::is_encoder_tensor(&name) {
                continue;
            }
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = beta1 * m.data[i] + (1.0 - beta1) * gi;
                v.data[i] = beta2 * v.data[i] + (1.0 - beta2) * gi * gi;
                let mh = m.data[i] / c1;
                let vh = v.data[i] / c2;
                p.data[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

/// A pair with its sampled match set.
#[derive(Debug, Clone)]
pub struct TrainPair {
    pub sample: ScenePairSample,
    pub matches: MatchSet,
}

/// One optimizer step on the batch-averaged gradient. Returns the mean loss.
pub fn train_step(
    params: &mut ModelParams,
    batch: &[TrainPair],
    opt: &mut Adam,
    cfg: &LossConfig,
    lr: f64,
) -> Result<LossBreakdown, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let mut acc = params.zeros_like();
    let mut mean = LossBreakdown::default();
    // fixed summation order keeps the update independent of scheduling
    for pair in batch {
        let (b, g) = backward(params, &pair.sample, &pair.matches, cfg)?;
        for ((_, a), (_, gt)) in acc.named_tensors_mut().into_iter().zip(g.named_tensors()) {
            for (x, y) in a.data.iter_mut().zip(&gt.data) {
                *x += y;
            }
        }
        mean.conf += b.conf;
        mean.match_static += b.match_static;
        mean.match_dynamic += b.match_dynamic;
        mean.vis += b.vis;
        mean.total += b.total;
    }
    let k = batch.len() as f64;
    for (_, a) in acc.named_tensors_mut() {
        a.data.iter_mut().for_each(|x| *x /= k);
    }
    mean.conf /= k;
    mean.match_static /= k;
    mean.match_dynamic /= k;
    mean.vis /= k;
    mean.total /= k;
    if lr != 0.0 {
        opt.update(params, &acc, lr);
    }
    Ok(mean)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub strides: StrideSchedule,
    /// Target fraction of dynamic positives.
    pub ratio: f64,
    /// Positives plus padding negatives per pair.
    pub budget: usize,
    pub frozen_encoder: bool,
    pub loss: LossConfig,
    pub arch: ArchConfig,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            steps: 600,
            batch_size: 4,
            lr: 1e-3,
            strides: StrideSchedule::long_video(),
            ratio: 0.95,
            budget: 384,
            frozen_encoder: false,
            loss: LossConfig::default(),
            arch: ArchConfig::default(),
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(0.0..=1.0).contains(&self.ratio) {
            return Err(TrainError::Pair(PairError::InvalidRatio(self.ratio)));
        }
        if self.batch_size == 0 {
            return Err(TrainError::EmptyBatch);
        }
        if self.budget == 0 {
            return Err(TrainError::Pair(PairError::ZeroBudget));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(TrainError::InvalidConfig(format!("lr must be finite and non-negative, got {}", self.lr)));
        }
        self.loss.validate()?;
        self.arch.validate()?;
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    pub loss: LossBreakdown,
    pub lr: f64,
    /// Mean achieved dynamic fraction over the batch.
    pub r_actual: f64,
    pub strides: Vec<usize>,
}

/// Draw one training pair: a scene, a stride-weighted frame pair and a match
/// set at the configured ratio.
pub fn sample_train_pair<R: Rng + ?Sized>(scenes: &[Scene], cfg: &TrainConfig, rng: &mut R) -> Result<TrainPair, TrainError> {
    let scene = &scenes[rng.gen_range(0..scenes.len())];
    let (t1, t2) = sample_pair_indices(scene.num_frames(), &cfg.strides, rng)?;
    let sample = ground_truth_pair(scene, t1, t2, cfg.loss.eps_dynamic)?;
    let matches = build_match_set(&sample, cfg.ratio, cfg.budget, rng)?;
    Ok(TrainPair { sample, matches })
}

/// Run `cfg.steps` optimizer steps from `init`. `on_step` sees every record
/// together with the parameters after that step.
pub fn train<F>(
    scenes: &[Scene],
    init: ModelParams,
    cfg: &TrainConfig,
    mut on_step: F,
) -> Result<(ModelParams, Vec<TrainRecord>), TrainError>
where
    F: FnMut(&TrainRecord, &ModelParams),
{
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(TrainError::InvalidConfig("no training scenes".into()));
    }
    let mut params = init;
    params.frozen_encoder = cfg.frozen_encoder;
    let mut opt = Adam::new(&params, cfg.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = (0..cfg.batch_size)
            .map(|_| sample_train_pair(scenes, cfg, &mut rng))
            .collect::<Result<Vec<_>, _>>()?;
        let loss = train_step(&mut params, &batch, &mut opt, &cfg.loss, cfg.lr)?;
        let record = TrainRecord {
            step,
            loss,
            lr: cfg.lr,
            r_actual: batch.iter().map(|p| p.matches.r_actual).sum::<f64>() / batch.len() as f64,
            strides: batch.iter().map(|p| p.sample.stride()).collect(),
        };
        on_step(&record, &params);
        log.push(record);
    }
    Ok((params, log))
}
