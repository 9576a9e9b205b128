//! Training loop behaviour on small simulated sets.

use std::path::Path;

use doalab::autodiff::{load_checkpoint, save_checkpoint};
use doalab::experiment::{
    cmd_eval, cmd_simulate, cmd_train, EpochLog, EvalArgs, ExperimentConfig, Split, TrainArgs,
};
use doalab::model::{Model, Variant};
use serde_json::json;

/// 3 s scenes, a two-channel residual stem and a one-module temporal net.
fn micro_experiment(dir: &Path, variant: Variant, train_scenes: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig { seed: 17, data_dir: dir.join("data"), run_dir: dir.join("run"), ..Default::default() };
    cfg.data.scene.duration_s = 3.0;
    cfg.data.scene.utterance_s = [1.0, 2.0];
    cfg.data.scene.gap_s = [0.2, 0.5];
    cfg.data.rir.max_order = 2;
    cfg.data.train_minutes = train_scenes as f64 * 3.0 / 60.0;
    cfg.data.val_minutes = 0.1;
    cfg.data.test_minutes = 0.1;
    cfg.model.variant = variant;
    cfg.model.base_channels = 2;
    cfg.model.tcn_channels = 8;
    cfg.model.tcn_blocks = 1;
    cfg.model.tcn_modules_per_block = 1;
    cfg.model.tcn_kernels = vec![3];
    cfg.model.angle_dim = 4;
    cfg.train.chunk_s = 3.0;
    cfg.train.batch_size = 5;
    cfg
}

fn read_log(path: &Path) -> Vec<EpochLog> {
    std::fs::read_to_string(path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn one_epoch_writes_a_loadable_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = micro_experiment(dir.path(), Variant::Adoa, 10);
    cfg.train.epochs = 1;
    cmd_simulate(&cfg).unwrap();
    let s = cmd_train(&cfg, &TrainArgs::default()).unwrap();
    assert_eq!(s.epochs.len(), 1);
    assert_eq!(s.epochs[0].steps, 2);
    assert!(s.epochs[0].val_pimae_deg.is_some());
    let ck = load_checkpoint(&s.best_checkpoint).unwrap();
    assert_eq!(ck.meta["epoch"], 1);
    assert_eq!(ck.store.params().len(), Model::new(cfg.model.clone()).unwrap().init::<f32>(0).params().len());
    let out = dir.path().join("eval");
    let args = EvalArgs { checkpoint: Some(s.best_checkpoint), split: Split::Test, out_dir: out.clone(), passthrough: false };
    let e = cmd_eval(&cfg, &args).unwrap();
    assert!(e.report.pimae_deg.is_finite());
}

#[test]
fn overfits_five_utterances() {
    for variant in [Variant::Mdoa, Variant::Adoa] {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = micro_experiment(dir.path(), variant, 5);
        cfg.train.epochs = 200;
        cfg.train.validate = false;
        cfg.train.adam.lr = 3e-3;
        cmd_simulate(&cfg).unwrap();
        let s = cmd_train(&cfg, &TrainArgs::default()).unwrap();
        assert_eq!(s.epochs.last().unwrap().steps, 200);
        let first = s.epochs[0].loss;
        let best = s.epochs.iter().map(|e| e.loss).fold(f64::INFINITY, f64::min);
        assert!(best <= 0.5 * first, "{variant:?}: loss {first} fell only to {best}");
    }
}

#[test]
fn resume_continues_bit_identically() {
    for variant in [Variant::Adoa, Variant::Mdoa] {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = micro_experiment(&dir.path().join("a"), variant, 10);
        cfg.train.epochs = 3;
        cmd_simulate(&cfg).unwrap();
        cmd_train(&cfg, &TrainArgs::default()).unwrap();
        let straight = read_log(&cfg.run_dir.join("train_log.jsonl"));

        let mut split = cfg.clone();
        split.run_dir = dir.path().join("b");
        split.train.epochs = 2;
        cmd_train(&split, &TrainArgs::default()).unwrap();
        split.train.epochs = 3;
        let resumed = cmd_train(&split, &TrainArgs { resume: Some(split.run_dir.join("last.ckpt")) }).unwrap();
        assert_eq!(resumed.epochs.len(), 1);
        assert_eq!(resumed.epochs[0].loss.to_bits(), straight[2].loss.to_bits(), "{variant:?}");
        assert_eq!(read_log(&split.run_dir.join("train_log.jsonl")).len(), 3);
        assert_eq!(
            std::fs::read(cfg.run_dir.join("last.ckpt")).unwrap(),
            std::fs::read(split.run_dir.join("last.ckpt")).unwrap()
        );
    }
}

#[test]
fn resume_rejects_a_different_model() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = micro_experiment(dir.path(), Variant::Adoa, 5);
    cfg.train.epochs = 1;
    cfg.train.validate = false;
    cmd_simulate(&cfg).unwrap();
    cmd_train(&cfg, &TrainArgs::default()).unwrap();
    let mut other = cfg.clone();
    other.model.tcn_channels = 10;
    other.train.epochs = 2;
    let err = cmd_train(&other, &TrainArgs { resume: Some(cfg.run_dir.join("last.ckpt")) }).unwrap_err();
    assert_eq!(err.kind(), "validation");
}

#[test]
fn untrained_mdoa_is_no_worse_than_random_slots() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = micro_experiment(dir.path(), Variant::Mdoa, 1);
    cfg.data.test_minutes = 1.0;
    cfg.eval.baseline_trials = 400;
    cmd_simulate(&cfg).unwrap();
    let model = Model::new(cfg.model.clone()).unwrap();
    let ck = dir.path().join("init.ckpt");
    save_checkpoint(&ck, &model.init::<f32>(3), None, json!({ "model": cfg.model })).unwrap();
    let args = EvalArgs { checkpoint: Some(ck), split: Split::Test, out_dir: dir.path().join("eval"), passthrough: false };
    let e = cmd_eval(&cfg, &args).unwrap();
    let b = e.baseline.unwrap();
    // two standard deviations of the per-trial spread of the random picks
    assert!(e.report.acc >= b.acc_mean - 2.0 * b.acc_std, "untrained {} vs random {} ± {}", e.report.acc, b.acc_mean, b.acc_std);
}
