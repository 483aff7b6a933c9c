//! Layers built on the tape.
//!
//! A layer only remembers the [`ParamId`]s it registered; values live in the
//! [`ParamStore`]. Constructors take the store, a dot-path prefix and an RNG
//! for initialisation.

use std::rc::Rc;

use rand::Rng;

use super::init::{normal, truncated_normal, INIT_STD};
use super::{AttnLayout, Graph, ParamId, ParamStore, Real, Tensor, Var};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add(
            format!("{name}.weight"),
            truncated_normal(&[in_dim, out_dim], INIT_STD, rng),
        )?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]))?;
        Ok(Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        g.linear(x, w, Some(b))
    }

    pub fn num_params(in_dim: usize, out_dim: usize) -> usize {
        in_dim * out_dim + out_dim
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        let gamma = store.add(format!("{name}.weight"), Tensor::full(&[dim], T::one()))?;
        let beta = store.add(format!("{name}.bias"), Tensor::zeros(&[dim]))?;
        Ok(LayerNorm { gamma, beta })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (gm, bt) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm(x, gm, bt)
    }
}

#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: ParamId,
    pub rows: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        rows: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let table = store.add(
            format!("{name}.weight"),
            normal(&[rows, dim], INIT_STD, rng),
        )?;
        Ok(Embedding { table, rows, dim })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, ids: Rc<Vec<usize>>) -> Result<Var> {
        let t = g.param(self.table);
        g.gather_rows(t, ids)
    }
}

/// Multi-head self-attention with a fused QKV projection.
#[derive(Debug, Clone)]
pub struct MultiHeadSelfAttention {
    pub qkv: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadSelfAttention {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "model width {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(MultiHeadSelfAttention {
            qkv: Linear::new(store, &format!("{name}.qkv"), dim, 3 * dim, rng)?,
            out: Linear::new(store, &format!("{name}.out"), dim, dim, rng)?,
            heads,
        })
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        layout: &Rc<AttnLayout>,
    ) -> Result<Var> {
        let qkv = self.qkv.forward(g, x)?;
        let ctx = g.attention(qkv, layout, self.heads)?;
        self.out.forward(g, ctx)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(FeedForward {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, rng)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }
}

/// Pre-norm residual block: `x + MHSA(LN(x))`, then `x + FFN(LN(x))`.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadSelfAttention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
    pub dropout: f64,
}

impl TransformerBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_dim: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(TransformerBlock {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim)?,
            attn: MultiHeadSelfAttention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, ffn_dim, rng)?,
            dropout,
        })
    }

    pub fn forward<T: Real, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        layout: &Rc<AttnLayout>,
        rng: &mut R,
    ) -> Result<Var> {
        let h = self.ln1.forward(g, x)?;
        let h = self.attn.forward(g, h, layout)?;
        let h = g.dropout(h, self.dropout, rng)?;
        let x = g.add(x, h)?;
        let h = self.ln2.forward(g, x)?;
        let h = self.ffn.forward(g, h)?;
        let h = g.dropout(h, self.dropout, rng)?;
        g.add(x, h)
    }

    /// Scalar count of one block, for analytic parameter-count checks.
    pub fn num_params(dim: usize, ffn_dim: usize) -> usize {
        4 * dim
            + Linear::num_params(dim, 3 * dim)
            + Linear::num_params(dim, dim)
            + Linear::num_params(dim, ffn_dim)
            + Linear::num_params(ffn_dim, dim)
    }
}
