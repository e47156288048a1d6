mod common;

use std::fs;

use common::{tiny_spec, tiny_train_config};
use resfuse::checkpoint::{load_into, Checkpoint};
use resfuse::dataset::{generate_cases, split_cases, Dataset};
use resfuse::fusion::FusionVariant;
use resfuse::network::{DualBranchSegNet, ModelConfig};
use resfuse::optim::AdamConfig;
use resfuse::phantom::PhantomSpec;
use resfuse::train::{best_path, train, TrainConfig, Trainer};

#[test]
fn zero_epochs_writes_the_initial_model() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    Dataset::generate(&data, &tiny_spec(), 4, 1).unwrap();
    let mut cfg = tiny_train_config(&data, dir.path().join("m.rfck"));
    cfg.epochs = 0;
    cfg.log = Some(dir.path().join("log.jsonl"));
    let outcome = train(&cfg).unwrap();
    assert!(outcome.records.is_empty());
    let saved = Checkpoint::load(&cfg.out).unwrap();
    assert_eq!(saved.training.epoch, 0);
    assert_eq!(saved.optimizer.state.step, 0);
    assert_eq!(
        saved.net,
        DualBranchSegNet::build(cfg.model_config()).unwrap()
    );
    assert!(best_path(&cfg.out).exists());
    assert_eq!(fs::read_to_string(cfg.log.unwrap()).unwrap(), "");
}

#[test]
fn determinism_and_persistence() {
    let dir = tempfile::tempdir().unwrap();
    let d = common::determinism(dir.path(), 2);
    assert!(d.same_seed_identical);
    assert!(d.thread_count_irrelevant);
    assert!(d.save_load_save_identical);
    assert!(d.resume_matches);
}

#[test]
fn metrics_log_has_one_json_line_per_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    Dataset::generate(&data, &tiny_spec(), 4, 2).unwrap();
    let mut cfg = tiny_train_config(&data, dir.path().join("m.rfck"));
    cfg.log = Some(dir.path().join("logs/train.jsonl"));
    let outcome = train(&cfg).unwrap();
    let text = fs::read_to_string(cfg.log.as_ref().unwrap()).unwrap();
    let lines: Vec<serde_json::Value> = text
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), cfg.epochs);
    for (i, (line, record)) in lines.iter().zip(&outcome.records).enumerate() {
        assert_eq!(line["epoch"], i + 1);
        assert_eq!(line["split"], "val");
        for key in ["dsc", "recall", "loss", "wall_ms"] {
            assert!(line.get(key).is_some(), "missing {key}");
        }
        let dsc = line["dsc"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&dsc));
        assert_eq!(dsc, record.dsc);
    }
    let best = Checkpoint::load(best_path(&cfg.out)).unwrap();
    let top = outcome
        .records
        .iter()
        .map(|r| r.dsc)
        .fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(best.training.best_val_dsc, Some(top));
}

#[test]
fn load_into_other_depth_fails_without_changes() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.rfck");
    let trainer = Trainer::new(
        ModelConfig {
            levels: 2,
            base_channels: 2,
            ..ModelConfig::default()
        },
        AdamConfig::default(),
        false,
        2,
    )
    .unwrap();
    trainer.state.save(&path).unwrap();
    let mut other = DualBranchSegNet::<f32>::build(ModelConfig {
        levels: 3,
        base_channels: 2,
        ..ModelConfig::default()
    })
    .unwrap();
    let before = other.clone();
    assert!(load_into(&mut other, &fs::read(&path).unwrap()).is_err());
    assert_eq!(other, before);
}

#[test]
fn memorizes_a_single_case() {
    let spec = PhantomSpec {
        size: [16, 16, 16],
        ..tiny_spec()
    };
    let case = generate_cases(&spec, 1, 12).unwrap();
    let mut trainer = Trainer::new(
        ModelConfig {
            levels: 2,
            base_channels: 4,
            seed: 1,
            ..ModelConfig::default()
        },
        AdamConfig {
            lr: 1e-2,
            ..AdamConfig::default()
        },
        false,
        1,
    )
    .unwrap();
    for _ in 0..150 {
        trainer.train_epoch(&case).unwrap();
    }
    let report = trainer.evaluate(&case).unwrap();
    assert!(report.dsc > 0.95, "train DSC {}", report.dsc);
}

#[test]
fn post_only_requires_plain_variant() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        post_only: true,
        variant: FusionVariant::DirectAdd,
        ..tiny_train_config(dir.path(), dir.path().join("m.rfck"))
    };
    assert!(train(&cfg).is_err());
}

/// The full-size training run: 160 default phantoms, weighted fusion,
/// 30 epochs. Takes about 15 minutes on one core.
#[test]
#[ignore]
fn weighted_model_reaches_070_val_dsc_in_30_epochs() {
    let cases = generate_cases(&PhantomSpec::default(), 160, 7).unwrap();
    let (train_set, val_set) = split_cases(cases);
    let mut trainer =
        Trainer::new(ModelConfig::default(), AdamConfig::default(), false, 2).unwrap();
    let records = trainer
        .run(&train_set, &val_set, 30, |_, _, _| Ok(()))
        .unwrap();
    let last = records.last().unwrap();
    assert!(last.dsc > 0.70, "val DSC {}", last.dsc);
}
