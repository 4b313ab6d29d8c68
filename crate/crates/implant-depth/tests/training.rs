use std::fs;
use std::path::Path;

use implant_depth::checkpoint::{Checkpoint, ModelConfig};
use implant_depth::core::idpnet::IdpConfig;
use implant_depth::core::phantom::{generate_phantom, PhantomConfig};
use implant_depth::core::pipeline::PipelineConfig;
use implant_depth::core::schedule::{AugmentFlags, OptimizerKind, TrainConfig};
use implant_depth::core::PatientRecord;
use implant_depth::trainer::{checkpoint_dir, train_stage, StageSpec, StepRecord, TrainOptions, DUMP_FILE, LOG_FILE};
use implant_depth::HarnessError;

fn records(n: u64) -> Vec<PatientRecord> {
    (0..n).map(|s| generate_phantom(&PhantomConfig::desk(), s).unwrap()).collect()
}

/// A narrow network keeps many-epoch runs fast.
fn spec(train: TrainConfig) -> StageSpec {
    StageSpec { train, model: ModelConfig::Idpnet(IdpConfig::uniform(2)), pipeline: PipelineConfig::desk() }
}

fn log(dir: &Path) -> Vec<StepRecord> {
    fs::read_to_string(dir.join(LOG_FILE)).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn identical_runs_have_identical_histories() {
    let data = records(3);
    let s = spec(TrainConfig { epochs: 3, lr_drop_epochs: vec![2], seed: 5, ..TrainConfig::idpnet() });
    let dir = tempfile::tempdir().unwrap();
    let a = train_stage(&s, &data, &dir.path().join("a"), &TrainOptions::default()).unwrap();
    let b = train_stage(&s, &data, &dir.path().join("b"), &TrainOptions::default()).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(log(&dir.path().join("a")), log(&dir.path().join("b")));
    assert_eq!(a.params, b.params);
}

#[test]
fn resume_matches_the_uninterrupted_run() {
    let data = records(2);
    let s = spec(TrainConfig { epochs: 12, lr_drop_epochs: vec![11], optimizer: OptimizerKind::Adam, ..TrainConfig::idpnet() });
    let dir = tempfile::tempdir().unwrap();
    let (full, part) = (dir.path().join("full"), dir.path().join("part"));
    let opts = TrainOptions { checkpoint_every: 10, resume: None };
    let whole = train_stage(&s, &data, &full, &opts).unwrap();

    // A fresh directory holding the full log; resuming drops the lines from epoch 10 on.
    fs::create_dir_all(&part).unwrap();
    fs::copy(full.join(LOG_FILE), part.join(LOG_FILE)).unwrap();
    let ckpt = Checkpoint::load(&checkpoint_dir(&full, 10)).unwrap();
    assert_eq!(ckpt.epoch, 10);
    let resumed = train_stage(&s, &data, &part, &TrainOptions { checkpoint_every: 10, resume: Some(ckpt) }).unwrap();

    assert_eq!(resumed.history[10].first_step_loss.to_bits(), whole.history[10].first_step_loss.to_bits());
    assert_eq!(resumed.history, whole.history);
    assert_eq!(log(&part), log(&full));
}

#[test]
fn resume_rejects_a_different_config() {
    let data = records(2);
    let s = spec(TrainConfig { epochs: 2, lr_drop_epochs: vec![], ..TrainConfig::idpnet() });
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_stage(&s, &data, dir.path(), &TrainOptions::default()).unwrap();
    let other = spec(TrainConfig { base_lr: 5e-4, ..s.train.clone() });
    let e = train_stage(&other, &data, dir.path(), &TrainOptions { checkpoint_every: 0, resume: Some(ckpt) }).unwrap_err();
    assert_eq!(e.category(), "mismatch");
}

#[test]
fn disabling_the_texture_loss_zeroes_its_term() {
    let data = records(2);
    let s = spec(TrainConfig { epochs: 2, lr_drop_epochs: vec![], enable_tpl: false, ..TrainConfig::idpnet() });
    let dir = tempfile::tempdir().unwrap();
    train_stage(&s, &data, dir.path(), &TrainOptions::default()).unwrap();
    let steps = log(dir.path());
    assert_eq!(steps.len(), 4);
    for r in &steps {
        assert_eq!(r.terms["l_tpl"], 0.0);
        assert!((r.loss - r.terms["l_reg"] - r.terms["l_tiou"]).abs() < 1e-12);
    }
}

#[test]
fn divergence_writes_a_dump() {
    let data = records(2);
    let s = spec(TrainConfig { epochs: 3, lr_drop_epochs: vec![], base_lr: 1e300, ..TrainConfig::idpnet() });
    let dir = tempfile::tempdir().unwrap();
    match train_stage(&s, &data, dir.path(), &TrainOptions::default()) {
        Err(e @ HarnessError::Diverged { .. }) => {
            assert_eq!(e.exit_code(), 5);
            let HarnessError::Diverged { batch, dump, .. } = e else { unreachable!() };
            assert_eq!(dump, dir.path().join(DUMP_FILE));
            let body: serde_json::Value = serde_json::from_str(&fs::read_to_string(&dump).unwrap()).unwrap();
            assert_eq!(body["batch"], serde_json::json!(batch));
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn overfit_smoke_halves_the_loss() {
    let data = records(4);
    let augment = AugmentFlags { crop: false, scale: false, flip: false };
    let train = TrainConfig { optimizer: OptimizerKind::Adam, epochs: 50, lr_drop_epochs: vec![], augment, ..TrainConfig::idpnet() };
    let s = StageSpec { model: ModelConfig::Idpnet(IdpConfig::desk()), ..spec(train) };
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_stage(&s, &data, dir.path(), &TrainOptions::default()).unwrap();
    let (first, last) = (&ckpt.history[0], ckpt.history.last().unwrap());
    assert_eq!(ckpt.history.iter().map(|h| h.steps).sum::<usize>(), 200);
    assert!(last.mean_terms["l_total"] < 0.5 * first.mean_terms["l_total"], "{} -> {}", first.mean_terms["l_total"], last.mean_terms["l_total"]);
}
