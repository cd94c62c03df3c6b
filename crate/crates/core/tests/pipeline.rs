use atd_core::image::{degrade, Image};
use atd_core::metrics::{evaluate, ChannelMode};
use atd_core::train::{synthetic_dataset, train_micro, TrainConfig};
use atd_core::{AtdModel, Branches, Checkpoint, ModelConfig};

fn short_run(branches: Branches) -> TrainConfig {
    let mut cfg = TrainConfig {
        steps: 20,
        patch: 16,
        ..TrainConfig::default()
    };
    cfg.model.branches = branches;
    cfg
}

#[test]
fn training_lowers_loss_and_checkpoints_reload() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = short_run(Branches::full());
    let data = synthetic_dataset(&cfg).unwrap();
    let out = train_micro(&cfg, &data, Some(dir.path())).unwrap();
    assert_eq!(out.log.len(), 20);
    assert!(out.final_loss().unwrap() < out.initial_loss().unwrap());
    assert!(out.model.store.iter().all(|p| p.value.is_finite()));

    let reloaded = Checkpoint::load(&dir.path().join("final.atdc")).unwrap().into_model().unwrap();
    let lq = data[0].lq.to_tensor();
    assert_eq!(out.model.infer(&lq).unwrap().data(), reloaded.infer(&lq).unwrap().data());
    let log = std::fs::read_to_string(dir.path().join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 20);
}

#[test]
fn every_branch_set_restores_odd_sizes() {
    for name in ["baseline", "tdca", "acmsa", "full"] {
        let config = ModelConfig {
            branches: Branches::from_name(name).unwrap(),
            ..ModelConfig::micro()
        };
        let model = AtdModel::new(config, 5).unwrap();
        let hq = Image::from_fn(22, 18, 3, |y, x, c| ((y + 2 * x + c) % 11) as f32 / 10.0).unwrap();
        let lq = degrade(&hq, 2).unwrap();
        let sr = Image::from_tensor(&model.infer(&lq.to_tensor()).unwrap()).unwrap();
        assert_eq!((sr.height, sr.width, sr.channels), (22, 18, 3), "{name}");
        let m = evaluate(&sr.quantized(), &hq, ChannelMode::YChannel, 0).unwrap();
        assert!(m.psnr_db.is_finite() && (0.0..=1.0).contains(&m.ssim.abs()), "{name}");
    }
}

#[test]
fn branch_ablation_changes_parameter_count() {
    let count = |name: &str| {
        let config = ModelConfig {
            branches: Branches::from_name(name).unwrap(),
            ..ModelConfig::micro()
        };
        AtdModel::new(config, 0).unwrap().store.num_scalars()
    };
    assert!(count("baseline") < count("tdca"));
    assert!(count("tdca") < count("full"));
}
