use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use corrtrack_core::model::{init_params, ArchConfig};
use corrtrack_core::pairs::StrideSchedule;
use corrtrack_core::scene::{generate_scene, CameraPath, Scene, SceneSpec};
use corrtrack_core::train::{evaluate_loss, sample_train_pair, train, train_step, Adam, TrainConfig, TrainPair};

fn toy_scenes() -> Vec<Scene> {
    (0..2)
        .map(|i| {
            generate_scene(&SceneSpec {
                seed: 40 + i,
                num_frames: 10,
                width: 24,
                height: 16,
                num_static_points: 900,
                num_objects: 3,
                camera_path: if i == 0 {
                    CameraPath::Static
                } else {
                    CameraPath::Pan { velocity: [0.02, 0.0, 0.0] }
                },
                ..SceneSpec::default()
            })
            .unwrap()
        })
        .collect()
}

fn toy_config() -> TrainConfig {
    TrainConfig {
        arch: ArchConfig::tiny(),
        strides: StrideSchedule::new(vec![1, 2, 4]).unwrap(),
        budget: 48,
        lr: 3e-3,
        ..TrainConfig::default()
    }
}

fn mean_total(params: &corrtrack_core::model::ModelParams, pairs: &[TrainPair], cfg: &TrainConfig) -> f64 {
    pairs
        .iter()
        .map(|p| evaluate_loss(params, &p.sample, &p.matches, &cfg.loss).unwrap().total)
        .sum::<f64>()
        / pairs.len() as f64
}

#[test]
fn fixed_pair_set_loss_drops() {
    let scenes = toy_scenes();
    let cfg = toy_config();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let pairs: Vec<TrainPair> = (0..20).map(|_| sample_train_pair(&scenes, &cfg, &mut rng).unwrap()).collect();
    let mut params = init_params(1, &cfg.arch).unwrap();
    let before = mean_total(&params, &pairs, &cfg);
    let mut opt = Adam::new(&params, cfg.adam);
    for step in 0..500 {
        let start = (step * 4) % pairs.len();
        train_step(&mut params, &pairs[start..start + 4], &mut opt, &cfg.loss, cfg.lr).unwrap();
    }
    let after = mean_total(&params, &pairs, &cfg);
    assert!(after < before, "loss {before} -> {after}");
}

#[test]
fn training_is_deterministic() {
    let scenes = toy_scenes();
    let cfg = TrainConfig { steps: 8, ..toy_config() };
    let run = || train(&scenes, init_params(3, &cfg.arch).unwrap(), &cfg, |_, _| {}).unwrap();
    let (a, la) = run();
    let (b, lb) = run();
    assert_eq!(a, b);
    assert_eq!(la, lb);
}

#[test]
fn zero_steps_returns_init() {
    let scenes = toy_scenes();
    let cfg = TrainConfig { steps: 0, ..toy_config() };
    let init = init_params(9, &cfg.arch).unwrap();
    let (p, log) = train(&scenes, init.clone(), &cfg, |_, _| {}).unwrap();
    assert_eq!(p, init);
    assert!(log.is_empty());
}

#[test]
fn ratio_changes_what_is_learned() {
    let scenes = toy_scenes();
    let base = TrainConfig { steps: 5, ..toy_config() };
    let at = |ratio: f64| {
        let cfg = TrainConfig { ratio, ..base.clone() };
        train(&scenes, init_params(3, &cfg.arch).unwrap(), &cfg, |_, _| {}).unwrap()
    };
    let (p0, l0) = at(0.0);
    let (p1, l1) = at(0.95);
    assert_ne!(p0, p1);
    assert!(l0.iter().all(|r| r.r_actual == 0.0));
    assert!(l1.iter().map(|r| r.r_actual).sum::<f64>() / l1.len() as f64 > 0.5);
}
