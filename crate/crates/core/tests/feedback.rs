mod common;

use common::*;
use postermaker::fgdetect::{self, DetectorTrainConfig};
use postermaker::pipeline::detector_examples;
use postermaker::trainer::{self, Stage};

#[test]
fn zero_lambda_reward_matches_stage_two_and_detector_stays_fixed() {
    let dir = tempfile::tempdir().unwrap();
    let synth = small_synth();
    let data = dataset(dir.path(), "train", 16, &synth);
    postermaker::datasynth::write_dataset(dir.path(), 8, "pairs", 4, &synth, true).unwrap();

    let s1 = trainer::run_stage(&stage(Stage::One, &data, &dir.path().join("s1"), None, 2)).unwrap();
    let s2 = trainer::run_stage(&stage(Stage::Two, &data, &dir.path().join("s2"), Some(s1.checkpoint.clone()), 2)).unwrap();

    let examples = detector_examples(&dir.path().join("pairs")).unwrap();
    let dc = DetectorTrainConfig { steps: 5, batch_size: 4, ..DetectorTrainConfig::default() };
    let (det, _) = fgdetect::train_detector(&examples, &dc).unwrap();
    let det_path = dir.path().join("detector.ckpt");
    diffcore::save_checkpoint(&det, &det_path).unwrap();
    let det_bytes = std::fs::read(&det_path).unwrap();

    let init = Some(s2.checkpoint.clone());
    let control = trainer::run_stage(&stage(Stage::Two, &data, &dir.path().join("control"), init.clone(), 3)).unwrap();
    let mut zero = stage(Stage::Reward, &data, &dir.path().join("zero"), init.clone(), 3);
    zero.lambda = 0.0;
    zero.detector = Some(det_path.clone());
    let zero = trainer::run_stage(&zero).unwrap();
    assert_eq!(zero.losses, control.losses);
    for (name, p) in control.params.iter() {
        assert_eq!(zero.params.get(name).unwrap(), &p.value, "{name}");
    }

    let mut reward = stage(Stage::Reward, &data, &dir.path().join("reward"), init, 3);
    reward.lambda = 0.5;
    reward.skip_threshold = 0.0;
    reward.detector = Some(det_path.clone());
    let reward = trainer::run_stage(&reward).unwrap();
    assert_ne!(reward.losses, control.losses);
    for (name, p) in control.params.iter() {
        if !name.starts_with("scene.") {
            assert_eq!(reward.params.get(name).unwrap(), &p.value, "{name}");
        }
    }
    assert!(reward.params.names().all(|n| !n.starts_with("detector.")));
    assert_eq!(std::fs::read(&det_path).unwrap(), det_bytes);
}

#[test]
fn reward_stage_without_detector_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), "train", 4, &small_synth());
    let mut cfg = stage(Stage::Reward, &data, &dir.path().join("r"), None, 1);
    cfg.lambda = 0.1;
    assert!(trainer::run_stage(&cfg).unwrap_err().is_validation());
    cfg.detector = Some(dir.path().join("absent.ckpt"));
    assert!(trainer::run_stage(&cfg).unwrap_err().is_validation());
}
