//! The {MMP, GCB, CstAR} toggle grid.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::config::{Stage, StageConfig, Toggles};
use super::eval::{build_retrieval_questions, eval_recognition, eval_retrieval};
use super::stages::{pretrain_mmp, train_contrastive, TrainOptions};
use crate::data::Dataset;
use crate::model::{Model, ModelConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub model: ModelConfig,
    pub pretrain: StageConfig,
    pub contrastive: StageConfig,
    pub retrieval_labels: usize,
    pub retrieval_questions: usize,
}

/// One trained and evaluated grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub toggles: Toggles,
    pub seed: u64,
    /// Whether the contrastive stage started from a pretrained motion encoder.
    pub pretrained: bool,
    pub alpha: f64,
    pub accuracy: f64,
    pub top1: f64,
    pub top3: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationMean {
    pub toggles: Toggles,
    pub seeds: usize,
    pub accuracy: f64,
    pub top1: f64,
    pub top3: f64,
}

impl AblationTable {
    /// Seed-averaged metrics per toggle combination, in grid order.
    pub fn means(&self) -> Vec<AblationMean> {
        let mut out: Vec<AblationMean> = Vec::new();
        for r in &self.rows {
            match out.iter_mut().find(|m| m.toggles == r.toggles) {
                Some(m) => {
                    m.seeds += 1;
                    m.accuracy += r.accuracy;
                    m.top1 += r.top1;
                    m.top3 += r.top3;
                }
                None => out.push(AblationMean {
                    toggles: r.toggles,
                    seeds: 1,
                    accuracy: r.accuracy,
                    top1: r.top1,
                    top3: r.top3,
                }),
            }
        }
        for m in &mut out {
            let n = m.seeds as f64;
            m.accuracy /= n;
            m.top1 /= n;
            m.top3 /= n;
        }
        out
    }

    pub fn mean_for(&self, toggles: Toggles) -> Option<AblationMean> {
        self.means().into_iter().find(|m| m.toggles == toggles)
    }

    /// One line per toggle combination: `mmp,gcb,cstar,seeds,accuracy,top1,top3`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("mmp,gcb,cstar,seeds,accuracy,top1,top3\n");
        for m in self.means() {
            let t = m.toggles;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                u8::from(t.mmp),
                u8::from(t.gcb),
                u8::from(t.cstar),
                m.seeds,
                m.accuracy,
                m.top1,
                m.top3
            );
        }
        s
    }

    /// Fixed-width table with check marks for enabled components.
    pub fn to_table(&self) -> String {
        let mark = |b: bool| if b { "✓" } else { "-" };
        let mut s = String::from(" MMP  GCB  CstAR | accuracy   top-1   top-3\n");
        s.push_str("-----------------+--------------------------\n");
        for m in self.means() {
            let t = m.toggles;
            let _ = writeln!(
                s,
                "  {}    {}     {}   |  {:6.2}%  {:6.2}%  {:6.2}%",
                mark(t.mmp),
                mark(t.gcb),
                mark(t.cstar),
                100.0 * m.accuracy,
                100.0 * m.top1,
                100.0 * m.top3
            );
        }
        s
    }
}

/// Trains and evaluates every toggle combination for every seed. Pretrained
/// encoders are shared between cells that differ only in the CstAR toggle.
pub fn ablation_run(
    train: &Dataset,
    test: &Dataset,
    base: &AblationConfig,
    grid: &[Toggles],
    seeds: &[u64],
    progress: bool,
) -> Result<AblationTable> {
    if grid.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidArgument(
            "ablation needs at least one toggle set and one seed".into(),
        ));
    }
    if base.pretrain.stage != Stage::MmpPretrain || base.contrastive.stage != Stage::Contrastive {
        return Err(Error::Config(
            "ablation stage configs are in the wrong order".into(),
        ));
    }
    let labels = test.labels();
    let mut pretrained: HashMap<(bool, u64), Model<f32>> = HashMap::new();
    let mut rows = Vec::new();
    let opts = TrainOptions {
        progress,
        ..Default::default()
    };
    for &seed in seeds {
        let questions =
            build_retrieval_questions(test, base.retrieval_labels, base.retrieval_questions, seed)?;
        for &t in grid {
            let mut model_cfg = base.model.clone();
            model_cfg.motion.use_gcb = t.gcb;
            if t.mmp && !pretrained.contains_key(&(t.gcb, seed)) {
                let cfg = StageConfig {
                    seed,
                    ..base.pretrain.clone()
                };
                let out = pretrain_mmp(train, &model_cfg, &cfg, &opts)?;
                pretrained.insert((t.gcb, seed), out.model);
            }
            let init = if t.mmp {
                pretrained.get(&(t.gcb, seed))
            } else {
                None
            };
            let alpha = if t.cstar { base.contrastive.alpha } else { 0.0 };
            let cfg = StageConfig {
                seed,
                alpha,
                ..base.contrastive.clone()
            };
            let model = train_contrastive(train, &model_cfg, init, &cfg, &opts)?.model;
            let rec = eval_recognition(&model, test, &labels)?;
            let ret = eval_retrieval(&model, test, &questions)?;
            if progress {
                eprintln!(
                    "[ablation] seed {seed} mmp={} gcb={} cstar={} accuracy {:.4} top1 {:.4} top3 {:.4}",
                    t.mmp, t.gcb, t.cstar, rec.accuracy, ret.top1, ret.top3
                );
            }
            rows.push(AblationRow {
                toggles: t,
                seed,
                pretrained: init.is_some(),
                alpha,
                accuracy: rec.accuracy,
                top1: ret.top1,
                top3: ret.top3,
            });
        }
    }
    Ok(AblationTable { rows })
}
