//! The inference path: checkpoint → predictor → samples, using this crate only.

use ecam_core::checkpoint::Checkpoint;
use ecam_core::data::TrajectoryWindow;
use ecam_core::gridmap::{Homography, OccupancyMap, OBSTACLE};
use ecam_core::model::{ModelConfig, Predictor};
use ecam_core::Vec2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn manifest_has_no_training_dependencies() {
    let toml = include_str!("../Cargo.toml");
    for banned in ["ecam-train", "rayon", "ecam-synth"] {
        assert!(!toml.contains(banned), "core depends on {banned}");
    }
}

#[test]
fn checkpoint_round_trip_predicts_identically() {
    let mut map = OccupancyMap::open(60, 60, Homography::scaling(10.0)).unwrap();
    for c in 0..60 {
        map.set_cell(c, 30, OBSTACLE);
    }
    let model = Predictor::new(ModelConfig::default(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    Checkpoint::new(&model).save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap().predictor().unwrap();
    assert_eq!(loaded, model);

    let pts: Vec<Vec2> = (0..20).map(|t| Vec2::new(0.5 + 0.25 * t as f64, 1.0)).collect();
    let w = TrajectoryWindow {
        ped_id: 0,
        scene_label: "s".into(),
        start_frame: 0,
        past: pts[..8].to_vec(),
        future: pts[8..].to_vec(),
    };
    let a = model.predict(&w, Some(&map), 5, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let b = loaded.predict(&w, Some(&map), 5, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 5);
    assert!(a.iter().all(|s| s.len() == 12 && s.iter().all(|p| p.is_finite())));
}
