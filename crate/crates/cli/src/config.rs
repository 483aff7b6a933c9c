//! Run configuration: built-in defaults, overlaid by a JSON config file,
//! overlaid by command-line flags. The resolved value is written verbatim
//! into every output directory.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use molang::model::ModelConfig;
use molang::motion::Preset;
use molang::train::{Stage, StageConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Recursively overlays `over` onto `base`. Objects merge key by key; any
/// other value replaces.
pub fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

pub fn read_config_file(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let v: Value = serde_json::from_str(&text)
        .with_context(|| format!("parsing config {}", path.display()))?;
    if !v.is_object() {
        bail!("config {} must be a JSON object", path.display());
    }
    Ok(v)
}

/// Preset named by the flag, else by the file, else desk.
pub fn pick_preset(flag: Option<Preset>, file: Option<&Value>) -> Result<Preset> {
    if let Some(p) = flag {
        return Ok(p);
    }
    match file.and_then(|f| f.get("preset")) {
        Some(v) => serde_json::from_value(v.clone()).context("config field `preset`"),
        None => Ok(Preset::Desk),
    }
}

/// Serialises `defaults`, overlays the file and deserialises the result,
/// so unknown keys in the file are reported.
pub fn resolve<T: Serialize + DeserializeOwned>(defaults: &T, file: Option<Value>) -> Result<T> {
    let mut v = serde_json::to_value(defaults).expect("defaults serialise");
    if let Some(f) = file {
        merge(&mut v, f);
    }
    serde_json::from_value(v).context("invalid configuration")
}

pub fn stage_defaults(preset: Preset, stage: Stage) -> StageConfig {
    match preset {
        Preset::Desk => StageConfig::desk(stage),
        Preset::Paper => StageConfig::paper(stage),
    }
}

/// Fully resolved configuration of a training command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRun {
    pub preset: Preset,
    pub model: ModelConfig,
    pub stage: StageConfig,
    pub data: PathBuf,
    pub out: PathBuf,
    /// Pretrained motion encoder for the contrastive stage.
    #[serde(default)]
    pub motion_ckpt: Option<PathBuf>,
    /// Contrastive checkpoint to finetune.
    #[serde(default)]
    pub ckpt: Option<PathBuf>,
}

/// Fully resolved configuration of the ablation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateRun {
    pub preset: Preset,
    pub model: ModelConfig,
    pub pretrain: StageConfig,
    pub contrastive: StageConfig,
    pub train: PathBuf,
    pub test: PathBuf,
    pub out: PathBuf,
    pub grid: Vec<String>,
    pub seeds: Vec<u64>,
    pub retrieval_labels: usize,
    pub retrieval_questions: usize,
}

/// What gets written as `config.json` next to the outputs.
#[derive(Debug, Serialize)]
pub struct Provenance<'a, C: Serialize> {
    pub command: &'a str,
    pub version: &'a str,
    pub config: &'a C,
    pub data_fingerprints: Vec<(String, String)>,
}

pub fn write_provenance<C: Serialize>(
    dir: &Path,
    command: &str,
    config: &C,
    fingerprints: Vec<(String, String)>,
) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let p = Provenance {
        command,
        version: env!("CARGO_PKG_VERSION"),
        config,
        data_fingerprints: fingerprints,
    };
    let path = dir.join("config.json");
    let text = serde_json::to_string_pretty(&p)? + "\n";
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}
