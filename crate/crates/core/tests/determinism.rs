//! Reproducibility: same seed, same run; persisted models predict exactly as
//! in memory; an interrupted and resumed run matches an uninterrupted one.

mod common;

use std::fs;
use std::path::Path;

use common::{small_model, small_splits, stage_config};
use molang::data::Dataset;
use molang::model::{CheckpointMeta, Model};
use molang::train::stages::{LAST_CKPT, METRICS_LOG};
use molang::train::{
    eval_recognition, finetune, pretrain_mmp, train_contrastive, Stage, StageOutcome, TrainOptions,
};

fn data() -> (Dataset, Dataset) {
    small_splits(6, 40, 11)
}

fn contrastive(train: &Dataset, epochs: u64, opts: &TrainOptions) -> StageOutcome {
    train_contrastive(
        train,
        &small_model(),
        None,
        &stage_config(Stage::Contrastive, epochs, 16),
        opts,
    )
    .unwrap()
}

#[test]
fn same_seed_same_records_and_parameters() {
    let (train, _) = data();
    let a = contrastive(&train, 2, &TrainOptions::default());
    let b = contrastive(&train, 2, &TrainOptions::default());
    assert_eq!(a.records, b.records);
    assert_eq!(a.model.store.checksum(), b.model.store.checksum());

    let mut other = stage_config(Stage::Contrastive, 2, 16);
    other.seed = 1;
    let c = train_contrastive(
        &train,
        &small_model(),
        None,
        &other,
        &TrainOptions::default(),
    )
    .unwrap();
    assert_ne!(a.model.store.checksum(), c.model.store.checksum());
}

#[test]
fn saved_model_predicts_bit_identically() {
    let (train, test) = data();
    let model = contrastive(&train, 1, &TrainOptions::default()).model;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.moln");
    let meta = CheckpointMeta {
        stage: "contrastive".into(),
        seed: 0,
        epoch: 1,
        ..Default::default()
    };
    model.save(&path, &meta).unwrap();
    let (loaded, got_meta) = Model::<f32>::load(&path).unwrap();
    assert_eq!(got_meta, meta);
    assert_eq!(loaded.store.checksum(), model.store.checksum());
    assert_eq!(loaded.temperature(), model.temperature());

    let frames: Vec<&[f32]> = test.items.iter().map(|i| i.frames.as_slice()).collect();
    let a = model.embed_motion(&frames, 7).unwrap();
    let b = loaded.embed_motion(&frames, 7).unwrap();
    assert_eq!(a.data(), b.data());
    let labels = test.labels();
    assert_eq!(
        model.embed_texts(&labels, 3).unwrap().data(),
        loaded.embed_texts(&labels, 3).unwrap().data()
    );
}

#[test]
fn evaluation_leaves_the_model_untouched() {
    let (train, test) = data();
    let model = contrastive(&train, 1, &TrainOptions::default()).model;
    let before = model.store.checksum();
    eval_recognition(&model, &test, &test.labels()).unwrap();
    assert_eq!(model.store.checksum(), before);
}

fn interrupted<F>(run: F, dir: &Path, total: u64, cut: u64) -> StageOutcome
where
    F: Fn(&TrainOptions) -> StageOutcome,
{
    let first = run(&TrainOptions {
        out_dir: Some(dir.into()),
        stop_after: Some(cut),
        ..Default::default()
    });
    assert_eq!(first.report.epochs, cut);
    let resumed = run(&TrainOptions {
        out_dir: Some(dir.into()),
        resume: true,
        ..Default::default()
    });
    assert_eq!(resumed.report.epochs, total);
    resumed
}

fn assert_same_run(a: &StageOutcome, b: &StageOutcome, da: &Path, db: &Path) {
    assert_eq!(a.records, b.records);
    assert_eq!(a.model.store.checksum(), b.model.store.checksum());
    assert_eq!(a.report.without_timing(), b.report.without_timing());
    assert_eq!(
        fs::read(da.join(METRICS_LOG)).unwrap(),
        fs::read(db.join(METRICS_LOG)).unwrap()
    );
    assert_eq!(
        fs::read(da.join(LAST_CKPT)).unwrap(),
        fs::read(db.join(LAST_CKPT)).unwrap()
    );
}

#[test]
fn resume_reproduces_every_stage() {
    let (train, _) = data();
    let tmp = tempfile::tempdir().unwrap();
    let dir = |n: &str| tmp.path().join(n);

    let pre = |opts: &TrainOptions| {
        pretrain_mmp(
            &train,
            &small_model(),
            &stage_config(Stage::MmpPretrain, 3, 16),
            opts,
        )
        .unwrap()
    };
    let whole = pre(&TrainOptions::in_dir(dir("pre_whole")));
    let cut = interrupted(pre, &dir("pre_cut"), 3, 1);
    assert_same_run(&whole, &cut, &dir("pre_whole"), &dir("pre_cut"));

    let con = |opts: &TrainOptions| contrastive(&train, 3, opts);
    let whole_c = con(&TrainOptions::in_dir(dir("con_whole")));
    let cut_c = interrupted(con, &dir("con_cut"), 3, 2);
    assert_same_run(&whole_c, &cut_c, &dir("con_whole"), &dir("con_cut"));

    let ft = |opts: &TrainOptions| {
        finetune(
            &train,
            whole_c.model.clone(),
            &stage_config(Stage::Finetune, 2, 16),
            opts,
        )
        .unwrap()
    };
    let whole_f = ft(&TrainOptions::in_dir(dir("ft_whole")));
    let cut_f = interrupted(ft, &dir("ft_cut"), 2, 1);
    assert_same_run(&whole_f, &cut_f, &dir("ft_whole"), &dir("ft_cut"));
}

#[test]
fn resume_refuses_a_different_configuration() {
    let (train, _) = data();
    let tmp = tempfile::tempdir().unwrap();
    let opts = TrainOptions {
        out_dir: Some(tmp.path().into()),
        stop_after: Some(1),
        ..Default::default()
    };
    contrastive(&train, 2, &opts);
    let mut cfg = stage_config(Stage::Contrastive, 2, 8);
    let resume = TrainOptions {
        out_dir: Some(tmp.path().into()),
        resume: true,
        ..Default::default()
    };
    assert!(train_contrastive(&train, &small_model(), None, &cfg, &resume).is_err());
    cfg.batch_size = 16;
    cfg.seed = 9;
    assert!(train_contrastive(&train, &small_model(), None, &cfg, &resume).is_err());
}

#[test]
fn zero_epoch_finetune_returns_its_input() {
    let (train, _) = data();
    let model = contrastive(&train, 1, &TrainOptions::default()).model;
    let out = finetune(
        &train,
        model.clone(),
        &stage_config(Stage::Finetune, 0, 16),
        &TrainOptions::default(),
    )
    .unwrap();
    assert!(out.records.is_empty());
    assert_eq!(out.model.store.checksum(), model.store.checksum());
}
