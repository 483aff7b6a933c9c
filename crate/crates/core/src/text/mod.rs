//! Word tokenizer and the transformer text encoder.

mod vocab;

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use vocab::{words, Vocab, CLS, PAD, SEP, UNK};

use crate::motion::Preset;
use crate::nn::layers::{Embedding, LayerNorm, Linear, TransformerBlock};
use crate::nn::{AttnLayout, Graph, ParamStore, Real, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextEncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub max_tokens: usize,
    pub projection_dim: usize,
}

impl TextEncoderConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Paper => TextEncoderConfig {
                layers: 12,
                heads: 12,
                model_dim: 768,
                ffn_dim: 3072,
                dropout: 0.1,
                max_tokens: 32,
                projection_dim: 768,
            },
            Preset::Desk => TextEncoderConfig {
                layers: 2,
                heads: 4,
                model_dim: 64,
                ffn_dim: 128,
                dropout: 0.1,
                max_tokens: 32,
                projection_dim: 64,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.model_dim == 0 || self.ffn_dim == 0 || self.projection_dim == 0
        {
            return Err(Error::Config("text encoder sizes must be positive".into()));
        }
        if self.heads == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "text model_dim {} is not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        if self.max_tokens < 2 {
            return Err(Error::Config("max_tokens must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    pub fn num_params(&self, vocab_size: usize) -> usize {
        let d = self.model_dim;
        vocab_size * d
            + self.max_tokens * d
            + self.layers * TransformerBlock::num_params(d, self.ffn_dim)
            + 2 * d
            + Linear::num_params(d, self.projection_dim)
    }
}

#[derive(Debug, Clone)]
pub struct TextOutput {
    pub states: Var,
    pub cls: Var,
    pub projected: Var,
}

#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub config: TextEncoderConfig,
    pub vocab_size: usize,
    pub token: Embedding,
    pub position: Embedding,
    pub blocks: Vec<TransformerBlock>,
    pub final_norm: LayerNorm,
    pub projection: Linear,
}

impl TextEncoder {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        config: &TextEncoderConfig,
        vocab_size: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        let token = Embedding::new(store, "text.token", vocab_size, d, rng)?;
        let position = Embedding::new(store, "text.position", config.max_tokens, d, rng)?;
        let blocks = (0..config.layers)
            .map(|l| {
                TransformerBlock::new(
                    store,
                    &format!("text.layers.{l}"),
                    d,
                    config.heads,
                    config.ffn_dim,
                    config.dropout,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        Ok(TextEncoder {
            config: config.clone(),
            vocab_size,
            token,
            position,
            blocks,
            final_norm: LayerNorm::new(store, "text.final_norm", d)?,
            projection: Linear::new(store, "text.projection", d, config.projection_dim, rng)?,
        })
    }

    /// Encodes tokenized sequences (as produced by [`Vocab::tokenize`]).
    /// Packed mode drops PAD tokens; padded mode keeps them as masked keys.
    pub fn forward<T: Real, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<'_, T>,
        ids: &[Vec<usize>],
        padded: bool,
        rng: &mut R,
    ) -> Result<TextOutput> {
        if ids.is_empty() {
            return Err(Error::InvalidArgument("no text to encode".into()));
        }
        let mut flat = Vec::new();
        let mut positions = Vec::new();
        let mut cls_rows = Vec::new();
        let mut lens = Vec::new();
        let mut valid = Vec::new();
        let width = ids[0].len();
        for seq in ids {
            if seq.len() > self.config.max_tokens || seq.first() != Some(&CLS) {
                return Err(Error::shape(
                    "text_tokens",
                    &[seq.len()],
                    &[self.config.max_tokens],
                ));
            }
            if padded && seq.len() != width {
                return Err(Error::shape("text_tokens", &[seq.len()], &[width]));
            }
            let keep = if padded {
                seq.len()
            } else {
                seq.iter().take_while(|&&t| t != PAD).count()
            };
            cls_rows.push(flat.len());
            for (p, &t) in seq[..keep].iter().enumerate() {
                if t >= self.vocab_size {
                    return Err(Error::InvalidArgument(format!(
                        "token id {t} outside vocabulary of {}",
                        self.vocab_size
                    )));
                }
                flat.push(t);
                positions.push(p);
                valid.push(t != PAD);
            }
            lens.push(keep);
        }
        let layout = Rc::new(if padded {
            AttnLayout::padded(ids.len(), width, valid)?
        } else {
            AttnLayout::packed(&lens)
        });
        let tok = self.token.forward(g, Rc::new(flat))?;
        let pos = self.position.forward(g, Rc::new(positions))?;
        let mut x = g.add(tok, pos)?;
        for block in &self.blocks {
            x = block.forward(g, x, &layout, rng)?;
        }
        let states = self.final_norm.forward(g, x)?;
        let cls = g.gather_rows(states, Rc::new(cls_rows))?;
        let p = self.projection.forward(g, cls)?;
        let projected = g.l2_normalize(p)?;
        Ok(TextOutput {
            states,
            cls,
            projected,
        })
    }
}
