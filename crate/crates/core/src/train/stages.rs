//! The training loop shared by all stages, with per-epoch checkpointing and
//! exact resume.
//!
//! Randomness comes from `stream_rng(seed, epoch, 0)` for the epoch shuffle
//! and `stream_rng(seed, epoch, step + 1)` for masking and dropout inside a
//! step, so a run resumed from an epoch boundary replays the same draws.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::config::{Stage, StageConfig};
use super::metrics::{
    epoch_means, json_fingerprint, read_json, read_jsonl, write_json, write_jsonl, MetricsReport,
    StepRecord,
};
use crate::data::{collate, Batch, Dataset, Item};
use crate::model::{stream_rng, CheckpointMeta, Model, ModelConfig};
use crate::nn::optim::Adam;
use crate::nn::{checkpoint, Graph, Tensor};
use crate::objectives::{clamp_temperature, cstar_loss, mmp_loss};
use crate::text::Vocab;
use crate::{Error, Result, MAX_FRAMES};

pub const LAST_CKPT: &str = "last.moln";
pub const BEST_CKPT: &str = "best.moln";
pub const OPTIM_STATE: &str = "optim.moln";
pub const STATE_FILE: &str = "state.json";
pub const METRICS_LOG: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";

/// Where and how a stage run persists itself.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Output directory for checkpoints and logs; `None` keeps everything in memory.
    pub out_dir: Option<PathBuf>,
    /// Continue from the state in `out_dir` if there is one.
    pub resume: bool,
    /// Return after this many completed epochs, as if interrupted.
    pub stop_after: Option<u64>,
    /// Print one line per epoch to stderr.
    pub progress: bool,
}

impl TrainOptions {
    pub fn in_dir(dir: impl Into<PathBuf>) -> Self {
        TrainOptions {
            out_dir: Some(dir.into()),
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub model: Model<f32>,
    pub records: Vec<StepRecord>,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ResumeState {
    stage: Stage,
    seed: u64,
    epochs_completed: u64,
    best_loss: Option<f64>,
    best_epoch: Option<u64>,
    adam_step: u64,
    config_fingerprint: String,
    data_fingerprint: String,
}

/// Self-supervised masked motion prediction on the motion encoder alone.
pub fn pretrain_mmp(
    data: &Dataset,
    model_config: &ModelConfig,
    cfg: &StageConfig,
    opts: &TrainOptions,
) -> Result<StageOutcome> {
    expect_stage(cfg, Stage::MmpPretrain)?;
    if !cfg.masking && !cfg.mmp_all_valid {
        return Err(Error::Config(
            "masked motion pretraining needs masking or mmp_all_valid".into(),
        ));
    }
    let model = Model::motion_only(model_config, cfg.seed)?;
    run_stage(model, data, None, cfg, opts)
}

/// Joint contrastive training of both encoders. The vocabulary is built from
/// the training texts; `motion_init` (a pretrained motion encoder) is optional.
pub fn train_contrastive(
    data: &Dataset,
    model_config: &ModelConfig,
    motion_init: Option<&Model<f32>>,
    cfg: &StageConfig,
    opts: &TrainOptions,
) -> Result<StageOutcome> {
    expect_stage(cfg, Stage::Contrastive)?;
    let texts: Vec<String> = data.items.iter().map(|i| i.text.clone()).collect();
    let vocab = Vocab::build(&texts, 1)?;
    let mut model = Model::with_text(model_config, vocab, cfg.seed)?;
    if let Some(init) = motion_init {
        model.copy_motion_from(init)?;
    }
    run_stage(model, data, Some(texts), cfg, opts)
}

/// Continues contrastive training with each item's class label as its text.
/// Labels outside the checkpoint vocabulary tokenize to UNK.
pub fn finetune(
    data: &Dataset,
    model: Model<f32>,
    cfg: &StageConfig,
    opts: &TrainOptions,
) -> Result<StageOutcome> {
    expect_stage(cfg, Stage::Finetune)?;
    model
        .text_tower()
        .map_err(|_| Error::Config("finetuning needs a contrastive-stage checkpoint".into()))?;
    let texts = data
        .items
        .iter()
        .map(|i| {
            i.label.clone().ok_or_else(|| {
                Error::InvalidArgument(format!("item from {} has no label", i.source))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    run_stage(model, data, Some(texts), cfg, opts)
}

fn expect_stage(cfg: &StageConfig, stage: Stage) -> Result<()> {
    cfg.validate()?;
    if cfg.stage != stage {
        return Err(Error::Config(format!(
            "expected a {stage} config, got {}",
            cfg.stage
        )));
    }
    Ok(())
}

fn epoch_batches(n: usize, cfg: &StageConfig, epoch: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(cfg.seed, epoch, 0));
    order
        .chunks(cfg.batch_size)
        .map(<[usize]>::to_vec)
        .collect()
}

fn collate_items(items: &[&Item]) -> Result<Batch> {
    let frames: Vec<&[f32]> = items.iter().map(|i| i.frames.as_slice()).collect();
    collate(&frames, MAX_FRAMES)
}

fn stage_fingerprint(model: &Model<f32>, cfg: &StageConfig) -> String {
    json_fingerprint(&(&model.config, cfg))
}

fn save_optim(path: &Path, model: &Model<f32>, adam: &Adam<f32>) -> Result<()> {
    let names: Vec<(String, String)> = model
        .store
        .iter()
        .map(|(_, p)| (format!("m.{}", p.name), format!("v.{}", p.name)))
        .collect();
    let mut tensors: Vec<(&str, &Tensor<f32>)> = Vec::new();
    for ((id, _), (m, v)) in model.store.iter().zip(&names) {
        tensors.push((m, adam.first_moment(id)));
        tensors.push((v, adam.second_moment(id)));
    }
    checkpoint::save(path, tensors)
}

fn load_optim(path: &Path, model: &Model<f32>, cfg: &StageConfig, step: u64) -> Result<Adam<f32>> {
    let tensors = checkpoint::load(path)?;
    let mut map: std::collections::HashMap<String, Tensor<f32>> = tensors.into_iter().collect();
    let mut m = Vec::new();
    let mut v = Vec::new();
    for (_, p) in model.store.iter() {
        for (prefix, dst) in [("m", &mut m), ("v", &mut v)] {
            let key = format!("{prefix}.{}", p.name);
            dst.push(
                map.remove(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("{} lacks {key}", path.display())))?,
            );
        }
    }
    Adam::restore(&model.store, cfg.schedule.lr(0), cfg.adam, step, m, v)
}

struct Resumed {
    model: Model<f32>,
    adam: Adam<f32>,
    state: ResumeState,
    records: Vec<StepRecord>,
}

fn try_resume(
    dir: &Path,
    fresh: &Model<f32>,
    cfg: &StageConfig,
    config_fp: &str,
    data_fp: &str,
) -> Result<Option<Resumed>> {
    let state_path = dir.join(STATE_FILE);
    if !state_path.exists() {
        return Ok(None);
    }
    let state: ResumeState = read_json(&state_path)?;
    if state.stage != cfg.stage || state.seed != cfg.seed || state.config_fingerprint != config_fp {
        return Err(Error::Config(format!(
            "{} was written by a different configuration; refusing to resume",
            state_path.display()
        )));
    }
    if state.data_fingerprint != data_fp {
        return Err(Error::Config(format!(
            "{} was written for different data",
            state_path.display()
        )));
    }
    let (model, _) = Model::load(&dir.join(LAST_CKPT))?;
    if model.text.as_ref().map(|t| &t.vocab) != fresh.text.as_ref().map(|t| &t.vocab) {
        return Err(Error::Config(
            "checkpoint vocabulary does not match the training texts".into(),
        ));
    }
    let adam = load_optim(&dir.join(OPTIM_STATE), &model, cfg, state.adam_step)?;
    let mut records: Vec<StepRecord> = read_jsonl(&dir.join(METRICS_LOG))?;
    records.retain(|r| r.epoch < state.epochs_completed);
    Ok(Some(Resumed {
        model,
        adam,
        state,
        records,
    }))
}

/// Runs `cfg.epochs` epochs over `data`. `texts` selects the contrastive
/// objective (one text per item); `None` trains masked motion prediction.
fn run_stage(
    fresh: Model<f32>,
    data: &Dataset,
    texts: Option<Vec<String>>,
    cfg: &StageConfig,
    opts: &TrainOptions,
) -> Result<StageOutcome> {
    let started = Instant::now();
    if data.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let config_fp = stage_fingerprint(&fresh, cfg);
    let tokens = match &texts {
        Some(t) => Some(fresh.tokenize(t)?),
        None => None,
    };
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let resumed = match (&opts.out_dir, opts.resume) {
        (Some(dir), true) => try_resume(dir, &fresh, cfg, &config_fp, &data.fingerprint)?,
        _ => None,
    };
    let (mut model, mut adam, mut state, mut records) = match resumed {
        Some(r) => (r.model, r.adam, r.state, r.records),
        None => {
            let adam = Adam::new(&fresh.store, cfg.schedule.lr(0), cfg.adam);
            let state = ResumeState {
                stage: cfg.stage,
                seed: cfg.seed,
                epochs_completed: 0,
                best_loss: None,
                best_epoch: None,
                adam_step: 0,
                config_fingerprint: config_fp.clone(),
                data_fingerprint: data.fingerprint.clone(),
            };
            (fresh, adam, state, Vec::new())
        }
    };

    let stage = cfg.stage.name();
    while state.epochs_completed < cfg.epochs {
        if opts.stop_after.is_some_and(|k| state.epochs_completed >= k) {
            break;
        }
        let epoch = state.epochs_completed;
        adam.lr = cfg.schedule.lr(epoch);
        let first_record = records.len();
        for (step, idx) in epoch_batches(data.len(), cfg, epoch)
            .into_iter()
            .enumerate()
        {
            let mut rng = stream_rng(cfg.seed, epoch, step as u64 + 1);
            let items: Vec<&Item> = idx.iter().map(|&i| &data.items[i]).collect();
            let mut batch = collate_items(&items)?;
            if cfg.masking {
                batch.apply_masking(&mut rng)?;
            }
            let diag = |e: Error| match e {
                Error::NonFinite(m) => {
                    Error::NonFinite(format!("{stage} epoch {epoch} step {step}: {m}"))
                }
                other => other,
            };
            let step_result = (|| -> Result<_> {
                let mut g = Graph::new(&model.store, true);
                let out = model.motion.forward(&mut g, &batch, false, &mut rng)?;
                let (loss, breakdown) = match &tokens {
                    None => {
                        let l = mmp_loss(&mut g, out.reconstruction, &batch, cfg.mmp_all_valid)?;
                        let v = g.value(l).data()[0] as f64;
                        let b = crate::objectives::LossBreakdown {
                            total: v,
                            contrastive_m2t: 0.0,
                            contrastive_t2m: 0.0,
                            recon: v,
                            alpha: 1.0,
                        };
                        (l, b)
                    }
                    Some(tokens) => {
                        let tower = model.text_tower()?;
                        let ids: Vec<Vec<usize>> = idx.iter().map(|&i| tokens[i].clone()).collect();
                        let text = tower.encoder.forward(&mut g, &ids, false, &mut rng)?;
                        let scale = g.param(tower.logit_scale);
                        let recon = (cfg.alpha > 0.0).then_some((out.reconstruction, &batch));
                        let c = cstar_loss(
                            &mut g,
                            out.projected,
                            text.projected,
                            scale,
                            recon,
                            cfg.alpha,
                        )?;
                        (c.total, c.breakdown(&g, cfg.alpha))
                    }
                };
                if !breakdown.total.is_finite() {
                    return Err(Error::NonFinite(format!("loss is {}", breakdown.total)));
                }
                Ok((g.backward(loss)?, breakdown))
            })();
            let (grads, breakdown) = step_result.map_err(diag)?;
            adam.step(&mut model.store, &grads).map_err(diag)?;
            if let Some(t) = &model.text {
                clamp_temperature(&mut model.store, t.logit_scale);
            }
            records.push(StepRecord {
                stage: stage.to_string(),
                epoch,
                step: step as u64,
                lr: adam.lr,
                batch: idx.len(),
                total: breakdown.total,
                contrastive_m2t: breakdown.contrastive_m2t,
                contrastive_t2m: breakdown.contrastive_t2m,
                recon: breakdown.recon,
                alpha: breakdown.alpha,
                tau: model.temperature(),
            });
        }
        let mean = epoch_means(&records[first_record..])[0].total;
        state.epochs_completed += 1;
        state.adam_step = adam.step_count();
        let improved = state.best_loss.is_none_or(|b| mean < b);
        if improved {
            state.best_loss = Some(mean);
            state.best_epoch = Some(epoch);
        }
        if opts.progress {
            let tau = model
                .temperature()
                .map(|t| format!(" tau {t:.4}"))
                .unwrap_or_default();
            eprintln!(
                "[{stage}] epoch {}/{} loss {mean:.6} lr {:.3e}{tau}",
                epoch + 1,
                cfg.epochs,
                adam.lr
            );
        }
        if let Some(dir) = &opts.out_dir {
            let meta = checkpoint_meta(cfg, state.epochs_completed, &data.fingerprint, mean);
            model.save(&dir.join(LAST_CKPT), &meta)?;
            if improved {
                model.save(&dir.join(BEST_CKPT), &meta)?;
            }
            save_optim(&dir.join(OPTIM_STATE), &model, &adam)?;
            write_jsonl(&dir.join(METRICS_LOG), &records)?;
            write_json(&dir.join(STATE_FILE), &state)?;
        }
    }

    if let Some(dir) = &opts.out_dir {
        if state.epochs_completed == 0 {
            let meta = checkpoint_meta(cfg, 0, &data.fingerprint, f64::NAN);
            model.save(&dir.join(LAST_CKPT), &meta)?;
            write_jsonl(&dir.join(METRICS_LOG), &records)?;
        }
    }
    let report = MetricsReport {
        stage: stage.to_string(),
        seed: cfg.seed,
        epochs: state.epochs_completed,
        epoch_losses: epoch_means(&records),
        best_epoch: state.best_epoch,
        tau: model.temperature(),
        recognition_accuracy: None,
        retrieval_top1: None,
        retrieval_top3: None,
        config_fingerprint: config_fp,
        data_fingerprint: data.fingerprint.clone(),
        wall_clock_s: started.elapsed().as_secs_f64(),
    };
    if let Some(dir) = &opts.out_dir {
        write_json(&dir.join(SUMMARY_FILE), &report)?;
    }
    Ok(StageOutcome {
        model,
        records,
        report,
    })
}

fn checkpoint_meta(cfg: &StageConfig, epoch: u64, data_fp: &str, loss: f64) -> CheckpointMeta {
    CheckpointMeta {
        stage: cfg.stage.name().into(),
        seed: cfg.seed,
        epoch,
        data_fingerprint: data_fp.into(),
        metrics: if loss.is_finite() {
            serde_json::json!({ "epoch_loss": loss })
        } else {
            serde_json::Value::Null
        },
    }
}
