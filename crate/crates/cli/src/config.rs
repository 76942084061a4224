//! Run configuration, read from TOML and patched by command-line flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use corrtrack_core::metrics::EvalConfig;
use corrtrack_core::scene::{CameraPath, SceneSpec};
use corrtrack_core::track::TrackConfig;
use corrtrack_core::train::TrainConfig;

use crate::evalset::QueryConfig;

/// A family of scenes: `count` seeds starting at `first_seed`, cycling
/// through `camera_paths`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSet {
    pub first_seed: u64,
    pub count: usize,
    pub camera_paths: Vec<CameraPath>,
    /// Template for every other scene field; its seed is ignored.
    pub spec: SceneSpec,
}

impl Default for SceneSet {
    fn default() -> Self {
        SceneSet {
            first_seed: 0,
            count: 8,
            camera_paths: vec![CameraPath::Static, CameraPath::Pan { velocity: [0.02, 0.0, 0.0] }],
            spec: SceneSpec::default(),
        }
    }
}

impl SceneSet {
    pub fn specs(&self) -> Vec<SceneSpec> {
        (0..self.count)
            .map(|i| SceneSpec {
                seed: self.first_seed + i as u64,
                camera_path: if self.camera_paths.is_empty() {
                    self.spec.camera_path
                } else {
                    self.camera_paths[i % self.camera_paths.len()]
                },
                ..self.spec.clone()
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub root: PathBuf,
    pub train: SceneSet,
    pub eval: SceneSet,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            root: PathBuf::from("data"),
            train: SceneSet::default(),
            eval: SceneSet {
                first_seed: 1000,
                count: 4,
                ..SceneSet::default()
            },
        }
    }
}

impl DataConfig {
    pub fn train_dir(&self) -> PathBuf {
        self.root.join("train")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackSection {
    /// Registered tracker mode.
    pub mode: String,
    /// Checkpoint to track with; defaults to `<out>/checkpoint.bt`.
    pub checkpoint: Option<PathBuf>,
    pub oracle: bool,
    /// Registered feature sampler.
    pub sampling: String,
    /// Registered intrinsics source for the lifted mode.
    pub intrinsics: String,
    pub workers: usize,
    pub visibility_threshold: f64,
}

impl TrackSection {
    pub fn tracker(&self) -> TrackConfig {
        TrackConfig {
            sampling: self.sampling.clone(),
            intrinsics: self.intrinsics.clone(),
            workers: self.workers,
            visibility_threshold: self.visibility_threshold,
        }
    }
}

impl Default for TrackSection {
    fn default() -> Self {
        TrackSection {
            mode: "2d".into(),
            checkpoint: None,
            oracle: false,
            sampling: TrackConfig::default().sampling,
            intrinsics: TrackConfig::default().intrinsics,
            workers: 1,
            visibility_threshold: TrackConfig::default().visibility_threshold,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblateAxis {
    Ratio,
    Stride,
}

impl std::str::FromStr for AblateAxis {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "ratio" => Ok(AblateAxis::Ratio),
            "stride" => Ok(AblateAxis::Stride),
            other => Err(format!("unknown axis '{other}', expected ratio or stride")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    pub axis: AblateAxis,
    /// Ratios as numbers, or stride schedule names from `schedules`.
    pub values: Vec<String>,
    pub schedules: BTreeMap<String, Vec<usize>>,
    /// Lower edges of the `|t - t_q|` buckets.
    pub separation_edges: Vec<usize>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig {
            axis: AblateAxis::Ratio,
            values: ["0", "0.5", "0.95", "1"].map(String::from).to_vec(),
            schedules: BTreeMap::from([
                ("short".to_string(), (1..=9).collect()),
                ("long".to_string(), vec![1, 5, 10, 15, 20, 25, 30, 35, 40]),
            ]),
            separation_edges: vec![1, 10, 20, 30],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub pairs: usize,
    pub repeats: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig { pairs: 16, repeats: 3 }
    }
}

/// Everything a command needs. The top-level `seed` drives training,
/// initialization and query sampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    /// Worker threads for scene generation and ablation cells.
    pub workers: usize,
    /// Write a checkpoint every this many steps (0 disables).
    pub checkpoint_every: usize,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub queries: QueryConfig,
    pub track: TrackSection,
    pub eval: EvalConfig,
    pub ablate: AblateConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("runs"),
            workers: 1,
            checkpoint_every: 0,
            data: DataConfig::default(),
            train: TrainConfig::default(),
            queries: QueryConfig::default(),
            track: TrackSection::default(),
            eval: EvalConfig::default(),
            ablate: AblateConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.eval.validate()?;
        for set in [&self.data.train, &self.data.eval] {
            for spec in set.specs() {
                spec.validate()?;
            }
        }
        let (a, b) = (&self.data.train, &self.data.eval);
        if a.count > 0 && b.count > 0 && a.first_seed < b.first_seed + b.count as u64 && b.first_seed < a.first_seed + a.count as u64 {
            bail!("data.train and data.eval seed ranges overlap; set data.eval.first_seed");
        }
        if !(0.0..=1.0).contains(&self.queries.dynamic_share) {
            bail!("queries.dynamic_share must lie in [0, 1]");
        }
        corrtrack_core::track::tracker_mode(&self.track.mode)?;
        corrtrack_core::track::feature_sampler(&self.track.sampling)?;
        corrtrack_core::track::intrinsics_source(&self.track.intrinsics)?;
        Ok(())
    }

    /// Training settings with the run seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn query_config(&self) -> QueryConfig {
        QueryConfig {
            seed: self.seed,
            ..self.queries.clone()
        }
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.track.checkpoint.clone().unwrap_or_else(|| self.out.join("checkpoint.bt"))
    }
}
