use serde::{Deserialize, Serialize};

use crate::nn::optim::{AdamConfig, CosineSchedule};
use crate::objectives::DEFAULT_ALPHA;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    MmpPretrain,
    Contrastive,
    Finetune,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::MmpPretrain => "mmp_pretrain",
            Stage::Contrastive => "contrastive",
            Stage::Finetune => "finetune",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Everything one training stage needs besides the model and the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: Stage,
    pub epochs: u64,
    pub batch_size: usize,
    pub seed: u64,
    /// Mask one span per item on every training step.
    pub masking: bool,
    /// Reconstruction weight in the contrastive loss; 0 turns it off.
    pub alpha: f64,
    /// MMP loss over every valid frame instead of only the masked ones.
    pub mmp_all_valid: bool,
    pub schedule: CosineSchedule,
    pub adam: AdamConfig,
}

impl StageConfig {
    /// Desk-scale defaults for a stage.
    pub fn desk(stage: Stage) -> Self {
        let epochs = match stage {
            Stage::MmpPretrain => 50,
            Stage::Contrastive => 100,
            Stage::Finetune => 30,
        };
        StageConfig {
            stage,
            epochs,
            batch_size: if stage == Stage::MmpPretrain { 32 } else { 64 },
            seed: 0,
            masking: true,
            alpha: DEFAULT_ALPHA,
            mmp_all_valid: false,
            schedule: CosineSchedule::default(),
            adam: AdamConfig::default(),
        }
    }

    /// Full-scale hyperparameters (batch 512 for pretraining).
    pub fn paper(stage: Stage) -> Self {
        StageConfig {
            batch_size: if stage == Stage::MmpPretrain { 512 } else { 64 },
            ..StageConfig::desk(stage)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!(
                "alpha must be non-negative, got {}",
                self.alpha
            )));
        }
        self.schedule.validate()
    }
}

/// Ablation switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Toggles {
    pub mmp: bool,
    pub gcb: bool,
    pub cstar: bool,
}

impl Toggles {
    pub const FULL: Toggles = Toggles {
        mmp: true,
        gcb: true,
        cstar: true,
    };

    /// The eight combinations, all-off first, all-on last.
    pub fn grid() -> Vec<Toggles> {
        (0..8u8)
            .map(|i| Toggles {
                mmp: i & 4 != 0,
                gcb: i & 2 != 0,
                cstar: i & 1 != 0,
            })
            .collect()
    }
}
