//! Implementations behind the `corrtrack` subcommands.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use corrtrack_core::metrics::{delta_by_separation, evaluate, EvalConfig, EvalReport, EvalVideo, SeparationBucket, Split};
use corrtrack_core::model::{init_params, ModelParams};
use corrtrack_core::pairs::StrideSchedule;
use corrtrack_core::scene::{generate_scene, Scene, SceneSpec};
use corrtrack_core::track::{tracker_mode, CorrespondenceSource, ModelSource, OracleSource, TrackConfig, Video};
use corrtrack_core::train::{sample_train_pair, train, train_step, Adam, TrainConfig, TrainRecord};

use crate::config::{AblateAxis, RunConfig};
use crate::evalset::{pair_with_ground_truth, sample_queries, QueryConfig, QuerySet};
use crate::io;

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    Ok(rayon::ThreadPoolBuilder::new().num_threads(workers.max(1)).build()?)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Render and write the training and evaluation scene sets.
pub fn cmd_gen(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let jobs: Vec<(PathBuf, SceneSpec)> = [(cfg.data.train_dir(), &cfg.data.train), (cfg.data.eval_dir(), &cfg.data.eval)]
        .into_iter()
        .flat_map(|(dir, set)| set.specs().into_iter().map(move |s| (dir.clone(), s)))
        .collect();
    pool(cfg.workers)?.install(|| {
        jobs.par_iter()
            .map(|(dir, spec)| {
                create_dir(dir)?;
                io::save_scene(dir, spec)
            })
            .collect()
    })
}

/// Scenes of a dataset split, rebuilt from their manifests. The on-disk
/// cameras must agree with the regenerated ones.
pub fn load_scenes(dir: &Path) -> Result<Vec<Scene>> {
    let entries = io::list_scenes(dir).with_context(|| format!("no dataset at {}; run `corrtrack gen` first", dir.display()))?;
    if entries.is_empty() {
        bail!("no scene directories under {}", dir.display());
    }
    entries
        .iter()
        .map(|(_, path)| {
            let m = io::load_manifest(path)?;
            let scene = generate_scene(&m.spec)?;
            if scene.cameras != m.cameras {
                bail!("{}: cameras differ from the regenerated scene", path.display());
            }
            Ok(scene)
        })
        .collect()
}

/// An evaluation video with its ground truth and queries.
pub struct EvalItem {
    pub seed: u64,
    pub scene: Scene,
    pub video: Video,
    pub queries: QuerySet,
}

pub fn load_eval_items(dir: &Path, qcfg: &QueryConfig) -> Result<Vec<EvalItem>> {
    let entries = io::list_scenes(dir).with_context(|| format!("no dataset at {}; run `corrtrack gen` first", dir.display()))?;
    entries
        .iter()
        .map(|(seed, path)| {
            let (m, video) = io::load_scene(path)?;
            let scene = generate_scene(&m.spec)?;
            let queries = sample_queries(&scene, &video, qcfg)?;
            Ok(EvalItem {
                seed: *seed,
                scene,
                video,
                queries,
            })
        })
        .collect()
}

/// Build eval items straight from specs, without touching disk.
pub fn eval_items_from_specs(specs: &[SceneSpec], qcfg: &QueryConfig) -> Result<Vec<EvalItem>> {
    specs
        .iter()
        .map(|spec| {
            let scene = generate_scene(spec)?;
            let video = Video::from_scene(&scene)?;
            let queries = sample_queries(&scene, &video, qcfg)?;
            Ok(EvalItem {
                seed: spec.seed,
                scene,
                video,
                queries,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub steps: usize,
    pub initial_total: Option<f64>,
    pub final_total: Option<f64>,
}

/// Train from scratch on the training split and write the checkpoint and a
/// JSON-lines log to the output directory.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    let scenes = load_scenes(&cfg.data.train_dir())?;
    create_dir(&cfg.out)?;
    fs::write(cfg.out.join("run_config.toml"), cfg.to_toml()?)?;
    let tcfg = cfg.train_config();
    let init = init_params(tcfg.seed, &tcfg.arch)?;
    let log_path = cfg.out.join("train_log.jsonl");
    let mut log = std::io::BufWriter::new(fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?);
    let mut write_err: Option<anyhow::Error> = None;
    let (params, records) = train(&scenes, init, &tcfg, |rec, params| {
        if write_err.is_some() {
            return;
        }
        let res = (|| -> Result<()> {
            writeln!(log, "{}", serde_json::to_string(rec)?)?;
            if cfg.checkpoint_every > 0 && (rec.step + 1) % cfg.checkpoint_every == 0 {
                io::save_checkpoint(&cfg.out.join(format!("checkpoint_{}.bt", rec.step + 1)), params)?;
            }
            Ok(())
        })();
        if let Err(e) = res {
            write_err = Some(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e);
    }
    log.flush()?;
    let checkpoint = cfg.out.join("checkpoint.bt");
    io::save_checkpoint(&checkpoint, &params)?;
    Ok(TrainSummary {
        checkpoint,
        steps: records.len(),
        initial_total: records.first().map(|r| r.loss.total),
        final_total: records.last().map(|r| r.loss.total),
    })
}

/// Oracle or checkpoint-backed correspondence source, with a label for reports.
pub fn make_source(cfg: &RunConfig) -> Result<(Box<dyn CorrespondenceSource>, String)> {
    if cfg.track.oracle {
        return Ok((Box::new(OracleSource::default()), "oracle".into()));
    }
    let path = cfg.checkpoint_path();
    let params = io::load_checkpoint(&path, Some(&cfg.train.arch)).with_context(|| format!("loading {}", path.display()))?;
    let label = path.file_stem().and_then(|s| s.to_str()).unwrap_or("model").to_string();
    Ok((Box::new(ModelSource { params }), label))
}

fn tracks_csv(dir: &Path, seed: u64) -> PathBuf {
    dir.join(format!("scene_{seed}.csv"))
}

/// Track the sampled queries of every evaluation video and write one CSV per
/// video under `<out>/tracks`.
pub fn cmd_track(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let items = load_eval_items(&cfg.data.eval_dir(), &cfg.query_config())?;
    let (source, _) = make_source(cfg)?;
    let mode = tracker_mode(&cfg.track.mode)?;
    let dir = cfg.out.join("tracks");
    create_dir(&dir)?;
    let tcfg = cfg.track.tracker();
    let mut out = Vec::new();
    for item in &items {
        let trajs = mode.run(&item.video, source.as_ref(), &item.queries.queries, &tcfg)?;
        let path = tracks_csv(&dir, item.seed);
        io::write_trajectories(&path, &trajs)?;
        out.push(path);
    }
    Ok(out)
}

/// Score predicted CSVs in `pred_dir` against regenerated ground truth and
/// write a key-value report per split plus rows in `eval.csv`.
pub fn cmd_eval(cfg: &RunConfig, pred_dir: &Path, splits: &[Split], model: &str) -> Result<Vec<EvalReport>> {
    let items = load_eval_items(&cfg.data.eval_dir(), &cfg.query_config())?;
    let mut videos = Vec::with_capacity(items.len());
    for item in &items {
        let pred = io::read_trajectories(&tracks_csv(pred_dir, item.seed))?;
        if pred.len() != item.queries.queries.len() {
            bail!(
                "scene {}: {} predicted tracks for {} queries",
                item.seed,
                pred.len(),
                item.queries.queries.len()
            );
        }
        for (i, (p, q)) in pred.iter().zip(&item.queries.queries).enumerate() {
            if p.query.query_frame != q.query_frame || p.query.pixel != q.pixel {
                bail!("scene {} query {i}: prediction does not start at the sampled query", item.seed);
            }
        }
        videos.push(pair_with_ground_truth(&item.scene, &item.queries, pred));
    }
    create_dir(&cfg.out)?;
    let dataset = cfg.data.eval_dir().display().to_string();
    let mut reports = Vec::new();
    let csv_path = cfg.out.join("eval.csv");
    let mut csv = String::new();
    if !csv_path.exists() {
        csv.push_str(&eval_csv_header(&cfg.eval));
    }
    for &split in splits {
        let r = evaluate(&videos, split, &cfg.eval)?;
        fs::write(cfg.out.join(format!("eval_{split}.txt")), r.to_kv())?;
        csv.push_str(&eval_csv_row(&dataset, model, &r, cfg.eval.delta_thresholds.len()));
        reports.push(r);
    }
    fs::OpenOptions::new().create(true).append(true).open(&csv_path)?.write_all(csv.as_bytes())?;
    Ok(reports)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

fn eval_csv_header(e: &EvalConfig) -> String {
    let mut h = String::from("dataset,split,model,delta_avg");
    for t in &e.delta_thresholds {
        h.push_str(&format!(",delta_{t}"));
    }
    h.push_str(",occlusion_accuracy,majority_baseline,apd,tracks,frames,visible_points\n");
    h
}

fn eval_csv_row(dataset: &str, model: &str, r: &EvalReport, nthr: usize) -> String {
    let mut row = format!("{dataset},{},{model},{}", r.split, opt(r.delta_avg));
    for i in 0..nthr {
        row.push(',');
        row.push_str(&opt(r.per_threshold.get(i).copied()));
    }
    row.push_str(&format!(
        ",{},{},{},{},{},{}\n",
        opt(r.occlusion_accuracy),
        opt(r.majority_baseline),
        opt(r.apd),
        r.tracks,
        r.frames,
        r.visible_points
    ));
    row
}

/// Track every eval item with `source` and pair the result with ground truth.
pub fn track_items(items: &[EvalItem], source: &dyn CorrespondenceSource, mode: &str, tcfg: &TrackConfig) -> Result<Vec<EvalVideo>> {
    let mode = tracker_mode(mode)?;
    items
        .iter()
        .map(|it| {
            let pred = mode.run(&it.video, source, &it.queries.queries, tcfg)?;
            Ok(pair_with_ground_truth(&it.scene, &it.queries, pred))
        })
        .collect()
}

/// Outcome of one train-and-evaluate cell.
#[derive(Debug, Clone)]
pub struct CellResult {
    pub label: String,
    pub params: ModelParams,
    pub log: Vec<TrainRecord>,
    pub all: EvalReport,
    pub dynamic: EvalReport,
    pub r#static: EvalReport,
    /// `(lo, hi, delta_avg)` per separation bucket, for each split.
    pub buckets: Vec<(Split, Vec<SeparationBucket>)>,
}

pub fn run_cell(
    label: &str,
    scenes: &[Scene],
    items: &[EvalItem],
    tcfg: &TrainConfig,
    cfg: &RunConfig,
) -> Result<CellResult> {
    let init = init_params(tcfg.seed, &tcfg.arch)?;
    let (params, log) = train(scenes, init, tcfg, |_, _| {})?;
    let source = ModelSource { params };
    let videos = track_items(items, &source, "2d", &cfg.track.tracker())?;
    Ok(CellResult {
        label: label.to_string(),
        all: evaluate(&videos, Split::All, &cfg.eval)?,
        dynamic: evaluate(&videos, Split::Dynamic, &cfg.eval)?,
        r#static: evaluate(&videos, Split::Static, &cfg.eval)?,
        buckets: [Split::All, Split::Dynamic, Split::Static]
            .into_iter()
            .map(|split| Ok((split, delta_by_separation(&videos, split, &cfg.eval, &cfg.ablate.separation_edges)?)))
            .collect::<Result<_>>()?,
        params: source.params,
        log,
    })
}

/// Training config for one ablation value.
pub fn ablation_train_config(cfg: &RunConfig, axis: AblateAxis, value: &str) -> Result<TrainConfig> {
    let mut t = cfg.train_config();
    match axis {
        AblateAxis::Ratio => {
            t.ratio = value.parse().map_err(|_| anyhow!("ratio value '{value}' is not a number"))?;
        }
        AblateAxis::Stride => {
            let s = cfg
                .ablate
                .schedules
                .get(value)
                .ok_or_else(|| anyhow!("no stride schedule named '{value}' in ablate.schedules"))?;
            t.strides = StrideSchedule::new(s.clone())?;
        }
    }
    t.validate()?;
    Ok(t)
}

/// One full train-and-evaluate run per ablation value, fanned out over the
/// configured workers. Writes `<out>/ablate_<axis>.csv` and the
/// per-separation buckets next to it.
pub fn cmd_ablate(cfg: &RunConfig) -> Result<Vec<CellResult>> {
    let scenes = load_scenes(&cfg.data.train_dir())?;
    let items = load_eval_items(&cfg.data.eval_dir(), &cfg.query_config())?;
    let axis = cfg.ablate.axis;
    let cells: Vec<(String, TrainConfig)> = cfg
        .ablate
        .values
        .iter()
        .map(|v| Ok((v.clone(), ablation_train_config(cfg, axis, v)?)))
        .collect::<Result<_>>()?;
    let results: Vec<CellResult> = pool(cfg.workers)?.install(|| {
        cells
            .par_iter()
            .map(|(v, t)| run_cell(v, &scenes, &items, t, cfg))
            .collect::<Result<_>>()
    })?;
    create_dir(&cfg.out)?;
    let name = match axis {
        AblateAxis::Ratio => "ratio",
        AblateAxis::Stride => "stride",
    };
    let mut main = String::from("axis,value,delta_all,delta_dynamic,delta_static,oa_all,majority_all,tracks_all,tracks_dynamic\n");
    let mut buckets = String::from("axis,value,split,sep_lo,sep_hi,delta_avg\n");
    for r in &results {
        main.push_str(&format!(
            "{name},{},{},{},{},{},{},{},{}\n",
            r.label,
            opt(r.all.delta_avg),
            opt(r.dynamic.delta_avg),
            opt(r.r#static.delta_avg),
            opt(r.all.occlusion_accuracy),
            opt(r.all.majority_baseline),
            r.all.tracks,
            r.dynamic.tracks
        ));
        for (split, rows) in &r.buckets {
            for (lo, hi, d) in rows {
                buckets.push_str(&format!(
                    "{name},{},{split},{lo},{},{}\n",
                    r.label,
                    hi.map(|h| h.to_string()).unwrap_or_default(),
                    opt(*d)
                ));
            }
        }
    }
    fs::write(cfg.out.join(format!("ablate_{name}.csv")), main)?;
    fs::write(cfg.out.join(format!("ablate_{name}_buckets.csv")), buckets)?;
    Ok(results)
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub pairs: usize,
    pub repeats: usize,
    pub width: usize,
    pub height: usize,
    pub parameters: usize,
    pub seconds_per_batch: f64,
    pub seconds_per_pair: f64,
}

/// Wall-clock of one optimizer step (forward, backward, update) on a batch
/// of `bench.pairs` training pairs.
pub fn cmd_bench(cfg: &RunConfig) -> Result<BenchReport> {
    let tcfg = cfg.train_config();
    let specs = cfg.data.train.specs();
    let scenes: Vec<Scene> = specs.iter().take(2).map(generate_scene).collect::<Result<_, _>>()?;
    if scenes.is_empty() {
        bail!("bench needs at least one training scene");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let batch = (0..cfg.bench.pairs)
        .map(|_| sample_train_pair(&scenes, &tcfg, &mut rng))
        .collect::<Result<Vec<_>, _>>()?;
    let mut params = init_params(tcfg.seed, &tcfg.arch)?;
    let mut opt = Adam::new(&params, tcfg.adam);
    let repeats = cfg.bench.repeats.max(1);
    let start = Instant::now();
    for _ in 0..repeats {
        train_step(&mut params, &batch, &mut opt, &tcfg.loss, tcfg.lr)?;
    }
    let per_batch = start.elapsed().as_secs_f64() / repeats as f64;
    Ok(BenchReport {
        pairs: cfg.bench.pairs,
        repeats,
        width: scenes[0].spec.width,
        height: scenes[0].spec.height,
        parameters: params.num_parameters(),
        seconds_per_batch: per_batch,
        seconds_per_pair: per_batch / cfg.bench.pairs.max(1) as f64,
    })
}
