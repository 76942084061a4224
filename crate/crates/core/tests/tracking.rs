use corrtrack_core::metrics::{evaluate, EvalConfig, EvalTrack, EvalVideo, Split};
use corrtrack_core::geom::DEFAULT_STATIC_EPS;
use corrtrack_core::scene::{generate_scene, ground_truth_track, CameraPath, SceneSpec};
use corrtrack_core::track::{tracker_mode, OracleSource, TrackConfig, TrackQuery, Video};

fn eval_setup(camera_path: CameraPath, seed: u64) -> (Video, Vec<TrackQuery>, Vec<EvalTrack>) {
    let scene = generate_scene(&SceneSpec {
        seed,
        num_frames: 16,
        width: 40,
        height: 30,
        num_static_points: 2500,
        num_objects: 4,
        camera_path,
        ..SceneSpec::default()
    })
    .unwrap();
    let video = Video::from_scene(&scene).unwrap();
    let mut queries = Vec::new();
    let mut gt = Vec::new();
    for id in (0..scene.num_surfels()).step_by(7) {
        let track = ground_truth_track(&scene, &video.frames, id, DEFAULT_STATIC_EPS);
        let Some(px) = track.pixels[0].filter(|_| track.visible[0]) else {
            continue;
        };
        queries.push(TrackQuery {
            query_frame: 0,
            pixel: [px.x, px.y],
        });
        gt.push(EvalTrack::from_ground_truth(&track, 0, &video.cameras));
        if gt.len() == 60 {
            break;
        }
    }
    (video, queries, gt)
}

#[test]
fn oracle_tracks_score_perfectly_at_native_resolution() {
    let cfg = EvalConfig {
        eval_resolution: None,
        ..EvalConfig::default()
    };
    let tcfg = TrackConfig {
        sampling: "nearest".into(),
        ..TrackConfig::default()
    };
    let mut videos = Vec::new();
    for (i, cam) in [CameraPath::Static, CameraPath::Pan { velocity: [0.02, 0.0, 0.0] }].into_iter().enumerate() {
        let (video, queries, gt) = eval_setup(cam, 70 + i as u64);
        let pred = tracker_mode("2d").unwrap().run(&video, &OracleSource::default(), &queries, &tcfg).unwrap();
        videos.push(EvalVideo {
            width: video.width(),
            height: video.height(),
            cameras: video.cameras.clone(),
            gt,
            pred,
        });
    }
    let r = evaluate(&videos, Split::All, &cfg).unwrap();
    assert_eq!(r.delta_avg, Some(100.0));
    assert_eq!(r.occlusion_accuracy, Some(100.0));
}

#[test]
fn worker_count_does_not_change_tracks() {
    let (video, queries, _) = eval_setup(CameraPath::Arc { velocity: [0.01, 0.0, 0.0], yaw_rate: 0.005 }, 90);
    let run = |workers| {
        let tcfg = TrackConfig {
            workers,
            ..TrackConfig::default()
        };
        tracker_mode("3d-lifted").unwrap().run(&video, &OracleSource::default(), &queries, &tcfg).unwrap()
    };
    assert_eq!(run(1), run(3));
}
