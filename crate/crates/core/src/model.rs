//! The trainable bundle: motion encoder, optional text encoder with its
//! vocabulary, and the learnable temperature, plus checkpoint persistence.
//!
//! A checkpoint is a binary tensor file (`*.moln`) and a JSON sidecar next to
//! it (same stem, `.json`) holding the config, vocabulary and metadata.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{collate, Batch};
use crate::geom::SkeletonGraph;
use crate::motion::{MotionEncoder, MotionEncoderConfig, MotionOutput, Preset};
use crate::nn::{checkpoint, Graph, ParamId, ParamStore, Real, Tensor};
use crate::objectives::{add_temperature, temperature, TAU_INIT};
use crate::text::{TextEncoder, TextEncoderConfig, Vocab};
use crate::{Error, Result, MAX_FRAMES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub motion: MotionEncoderConfig,
    pub text: TextEncoderConfig,
    pub tau_init: f64,
}

impl ModelConfig {
    pub fn preset(p: Preset) -> Self {
        ModelConfig {
            motion: MotionEncoderConfig::preset(p),
            text: TextEncoderConfig::preset(p),
            tau_init: TAU_INIT,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.motion.validate()?;
        self.text.validate()?;
        if self.motion.projection_dim != self.text.projection_dim {
            return Err(Error::Config(format!(
                "motion projection {} and text projection {} differ",
                self.motion.projection_dim, self.text.projection_dim
            )));
        }
        Ok(())
    }
}

/// Text half of the model; absent for motion-only pretraining.
#[derive(Debug, Clone)]
pub struct TextTower {
    pub encoder: TextEncoder,
    pub vocab: Vocab,
    pub logit_scale: ParamId,
}

#[derive(Debug, Clone)]
pub struct Model<T: Real = f32> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub motion: MotionEncoder,
    pub text: Option<TextTower>,
}

/// Training metadata carried in the sidecar.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: String,
    pub seed: u64,
    pub epoch: u64,
    #[serde(default)]
    pub data_fingerprint: String,
    #[serde(default)]
    pub metrics: serde_json::Value,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    format: String,
    config: ModelConfig,
    has_text: bool,
    vocab: Option<Vocab>,
    pretrained_source: Option<String>,
    parameter_count: usize,
    meta: CheckpointMeta,
}

const SIDECAR_FORMAT: &str = "molang-checkpoint-1";

pub fn sidecar_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("json")
}

impl<T: Real> Model<T> {
    /// Motion encoder only, initialised from `seed`.
    pub fn motion_only(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let motion = MotionEncoder::new(
            &mut store,
            &config.motion,
            &SkeletonGraph::smpl22(),
            &mut rng,
        )?;
        Ok(Model {
            config: config.clone(),
            store,
            motion,
            text: None,
        })
    }

    /// Both towers and the temperature, initialised from `seed`.
    pub fn with_text(config: &ModelConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        let mut m = Model::motion_only(config, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let encoder = TextEncoder::new(&mut m.store, &config.text, vocab.len(), &mut rng)?;
        let logit_scale = add_temperature(&mut m.store, config.tau_init)?;
        m.text = Some(TextTower {
            encoder,
            vocab,
            logit_scale,
        });
        Ok(m)
    }

    pub fn text_tower(&self) -> Result<&TextTower> {
        self.text
            .as_ref()
            .ok_or_else(|| Error::Config("model has no text encoder".into()))
    }

    pub fn temperature(&self) -> Option<f64> {
        self.text
            .as_ref()
            .map(|t| temperature(&self.store, t.logit_scale))
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            store: self.store.cast(),
            motion: self.motion.clone(),
            text: self.text.clone(),
        }
    }

    /// Tokenizes `texts` with the model's vocabulary and length limit.
    pub fn tokenize(&self, texts: &[impl AsRef<str>]) -> Result<Vec<Vec<usize>>> {
        let t = self.text_tower()?;
        texts
            .iter()
            .map(|s| t.vocab.tokenize(s.as_ref(), self.config.text.max_tokens))
            .collect()
    }

    /// Unit-norm motion projections `[n, p]` in evaluation mode.
    pub fn embed_motion(&self, clips: &[&[f32]], batch_size: usize) -> Result<Tensor<f64>> {
        let mut rows = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for chunk in clips.chunks(batch_size.max(1)) {
            let batch = collate(chunk, MAX_FRAMES.min(self.config.motion.max_len))?;
            let mut g = Graph::new(&self.store, false);
            let out = self.motion.forward(&mut g, &batch, false, &mut rng)?;
            rows.extend(g.value(out.projected).data().iter().map(|v| v.as_f64()));
        }
        let p = self.config.motion.projection_dim;
        Tensor::new(vec![clips.len(), p], rows)
    }

    /// Motion forward on a prepared batch in evaluation mode.
    pub fn motion_forward<'s>(
        &'s self,
        g: &mut Graph<'s, T>,
        batch: &Batch,
        padded: bool,
    ) -> Result<MotionOutput> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        self.motion.forward(g, batch, padded, &mut rng)
    }

    /// Unit-norm text projections `[n, p]` in evaluation mode.
    pub fn embed_texts(&self, texts: &[impl AsRef<str>], batch_size: usize) -> Result<Tensor<f64>> {
        let tower = self.text_tower()?;
        let ids = self.tokenize(texts)?;
        let mut rows = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for chunk in ids.chunks(batch_size.max(1)) {
            let mut g = Graph::new(&self.store, false);
            let out = tower.encoder.forward(&mut g, chunk, false, &mut rng)?;
            rows.extend(g.value(out.projected).data().iter().map(|v| v.as_f64()));
        }
        Tensor::new(vec![texts.len(), self.config.text.projection_dim], rows)
    }

    /// Marks every parameter whose name starts with `prefix` as (not) trainable.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        let ids: Vec<ParamId> = self
            .store
            .iter()
            .filter(|(_, p)| p.name.starts_with(prefix))
            .map(|(id, _)| id)
            .collect();
        for id in ids {
            self.store.get_mut(id).trainable = trainable;
        }
    }
}

impl Model<f32> {
    pub fn save(&self, path: &Path, meta: &CheckpointMeta) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        checkpoint::save_store(path, &self.store)?;
        let sidecar = Sidecar {
            format: SIDECAR_FORMAT.into(),
            config: self.config.clone(),
            has_text: self.text.is_some(),
            vocab: self.text.as_ref().map(|t| t.vocab.clone()),
            pretrained_source: None,
            parameter_count: self.store.num_scalars(),
            meta: meta.clone(),
        };
        let side = sidecar_path(path);
        let text = serde_json::to_string_pretty(&sidecar).expect("sidecar serialises");
        fs::write(&side, text).map_err(|e| Error::io(&side, e))
    }

    /// Reads a checkpoint and its sidecar into a freshly built model.
    pub fn load(path: &Path) -> Result<(Self, CheckpointMeta)> {
        let side = sidecar_path(path);
        let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let sidecar: Sidecar =
            serde_json::from_str(&text).map_err(|e| Error::json(side.display().to_string(), &e))?;
        if sidecar.format != SIDECAR_FORMAT {
            return Err(Error::Checkpoint(format!(
                "unknown sidecar format {:?}",
                sidecar.format
            )));
        }
        let mut model = match (sidecar.has_text, sidecar.vocab) {
            (true, Some(vocab)) => Model::with_text(&sidecar.config, vocab, 0)?,
            (false, _) => Model::motion_only(&sidecar.config, 0)?,
            (true, None) => {
                return Err(Error::Checkpoint(
                    "sidecar has a text encoder but no vocabulary".into(),
                ))
            }
        };
        let tensors = checkpoint::load(path)?;
        checkpoint::assign(&mut model.store, tensors)?;
        Ok((model, sidecar.meta))
    }

    /// Copies every motion-encoder tensor of a checkpoint into this model.
    pub fn load_motion_from(&mut self, path: &Path) -> Result<()> {
        let (src, _) = Model::load(path)?;
        self.copy_motion_from(&src)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Copies every motion-encoder tensor of `src`; the motion configs must match.
    pub fn copy_motion_from(&mut self, src: &Model<f32>) -> Result<()> {
        if src.config.motion != self.config.motion {
            return Err(Error::Config(
                "motion encoder config of the initialisation does not match the model being trained".into(),
            ));
        }
        for (_, p) in src
            .store
            .iter()
            .filter(|(_, p)| p.name.starts_with("motion."))
        {
            let id = self
                .store
                .id(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("model has no parameter {}", p.name)))?;
            self.store.get_mut(id).value = p.value.clone();
        }
        Ok(())
    }
}

/// Deterministic per-purpose random stream: `(seed, epoch, step)`.
pub fn stream_rng(seed: u64, epoch: u64, step: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream((epoch << 32) | (step & 0xffff_ffff));
    r
}

/// Draws a `u64` seed from any RNG, for sub-streams.
pub fn child_seed<R: Rng + ?Sized>(rng: &mut R) -> u64 {
    rng.random()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        let mut c = ModelConfig::preset(Preset::Desk);
        c.motion.layers = 2;
        c.motion.gcb_after_layer = 1;
        c.motion.model_dim = 16;
        c.motion.ffn_dim = 16;
        c.motion.projection_dim = 8;
        c.motion.gcb_joint_dim = 2;
        c.text.layers = 1;
        c.text.model_dim = 16;
        c.text.ffn_dim = 16;
        c.text.projection_dim = 8;
        c
    }

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let vocab = Vocab::build(&["a b c"], 1).unwrap();
        let m = Model::<f32>::with_text(&tiny(), vocab, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.moln");
        let meta = CheckpointMeta {
            stage: "contrastive".into(),
            seed: 3,
            epoch: 7,
            ..Default::default()
        };
        m.save(&p, &meta).unwrap();
        let (back, meta2) = Model::load(&p).unwrap();
        assert_eq!(meta2, meta);
        assert_eq!(back.store.checksum(), m.store.checksum());
        let clip = vec![0.3f32; 5 * crate::FRAME_DIM];
        let a = m.embed_motion(&[&clip], 4).unwrap();
        let b = back.embed_motion(&[&clip], 4).unwrap();
        assert!(a
            .data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
        let ta = m.embed_texts(&["a b"], 4).unwrap();
        let tb = back.embed_texts(&["a b"], 4).unwrap();
        assert_eq!(ta, tb);
    }

    #[test]
    fn projection_dims_must_agree() {
        let mut c = tiny();
        c.text.projection_dim = 4;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }
}
