//! Transformer motion encoder with a graph convolutional bottleneck.
//!
//! Input tokens are `[CLS, frame_1, ..., frame_T]`; each token is the sum of
//! a content vector (the learned CLS vector or a linear map of the 132-d
//! frame), a learned absolute position embedding and a learned two-entry
//! validity embedding. Items are run either packed (each sequence exactly
//! `1 + T` rows, no padding) or padded to `1 + max_frames` rows with key
//! masking; both give the same result for valid rows.

mod gcb;

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use gcb::Gcb;

use crate::data::Batch;
use crate::geom::SkeletonGraph;
use crate::nn::init::{normal, INIT_STD};
use crate::nn::layers::{Embedding, LayerNorm, Linear, TransformerBlock};
use crate::nn::{AttnLayout, Graph, ParamId, ParamStore, Real, Tensor, Var};
use crate::{Error, Result, FRAME_DIM, MAX_FRAMES, NUM_JOINTS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Paper,
    Desk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionEncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub max_len: usize,
    /// The bottleneck runs after this many transformer layers.
    pub gcb_after_layer: usize,
    pub gcb_joint_dim: usize,
    pub use_gcb: bool,
    pub projection_dim: usize,
}

impl MotionEncoderConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Paper => MotionEncoderConfig {
                layers: 10,
                heads: 12,
                model_dim: 768,
                ffn_dim: 1024,
                dropout: 0.1,
                max_len: MAX_FRAMES,
                gcb_after_layer: 4,
                gcb_joint_dim: 32,
                use_gcb: true,
                projection_dim: 768,
            },
            Preset::Desk => MotionEncoderConfig {
                layers: 4,
                heads: 4,
                model_dim: 64,
                ffn_dim: 128,
                dropout: 0.1,
                max_len: MAX_FRAMES,
                gcb_after_layer: 2,
                gcb_joint_dim: 8,
                use_gcb: true,
                projection_dim: 64,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.model_dim == 0 || self.ffn_dim == 0 || self.projection_dim == 0
        {
            return Err(Error::Config(
                "motion encoder sizes must be positive".into(),
            ));
        }
        if self.heads == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "motion model_dim {} is not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        if self.use_gcb && !(1..self.layers).contains(&self.gcb_after_layer) {
            return Err(Error::Config(format!(
                "gcb_after_layer must lie in 1..{}, got {}",
                self.layers, self.gcb_after_layer
            )));
        }
        if self.use_gcb && self.gcb_joint_dim == 0 {
            return Err(Error::Config("gcb_joint_dim must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be positive".into()));
        }
        Ok(())
    }

    /// Closed-form scalar count of the encoder built from this config.
    pub fn num_params(&self) -> usize {
        let d = self.model_dim;
        let mut n = Linear::num_params(FRAME_DIM, d)
            + d
            + (self.max_len + 1) * d
            + 2 * d
            + self.layers * TransformerBlock::num_params(d, self.ffn_dim)
            + 2 * d
            + Linear::num_params(d, self.projection_dim)
            + Linear::num_params(d, FRAME_DIM);
        if self.use_gcb {
            n += Gcb::num_params(d, NUM_JOINTS, self.gcb_joint_dim);
        }
        n
    }
}

/// How batch rows map onto token rows for one forward pass.
#[derive(Debug, Clone)]
pub struct TokenPlan {
    pub layout: Rc<AttnLayout>,
    /// For each token row: 0 for CLS, `1 + r` for frame row `r` of the frame input.
    pub content: Rc<Vec<usize>>,
    pub positions: Rc<Vec<usize>>,
    pub segments: Rc<Vec<usize>>,
    /// Token row of each item's CLS.
    pub cls_rows: Rc<Vec<usize>>,
    /// Token rows holding frames (valid or padding), in frame-input order.
    pub frame_rows: Rc<Vec<usize>>,
    /// Token rows of valid frames, item-major.
    pub valid_frame_rows: Rc<Vec<usize>>,
    /// Frame-input rows, each an index into the batch's `B * max_frames` frames.
    pub frame_sources: Vec<usize>,
}

impl TokenPlan {
    pub fn new(batch: &Batch, padded: bool) -> Self {
        let tm = batch.max_frames();
        let mut content = Vec::new();
        let mut positions = Vec::new();
        let mut segments = Vec::new();
        let mut cls_rows = Vec::new();
        let mut frame_rows = Vec::new();
        let mut valid_frame_rows = Vec::new();
        let mut frame_sources = Vec::new();
        let mut seq_lens = Vec::new();
        let mut valid_keys = Vec::new();
        for (b, &len) in batch.lengths().iter().enumerate() {
            let frames = if padded { tm } else { len };
            cls_rows.push(content.len());
            content.push(0);
            positions.push(0);
            segments.push(1);
            valid_keys.push(true);
            for t in 0..frames {
                let row = content.len();
                frame_rows.push(row);
                if t < len {
                    valid_frame_rows.push(row);
                }
                content.push(1 + frame_sources.len());
                frame_sources.push(b * tm + t);
                positions.push(t + 1);
                segments.push(usize::from(t < len));
                valid_keys.push(t < len);
            }
            seq_lens.push(1 + frames);
        }
        let layout = if padded {
            AttnLayout::padded(batch.len(), 1 + tm, valid_keys).expect("consistent sizes")
        } else {
            AttnLayout::packed(&seq_lens)
        };
        TokenPlan {
            layout: Rc::new(layout),
            content: Rc::new(content),
            positions: Rc::new(positions),
            segments: Rc::new(segments),
            cls_rows: Rc::new(cls_rows),
            frame_rows: Rc::new(frame_rows),
            valid_frame_rows: Rc::new(valid_frame_rows),
            frame_sources,
        }
    }

    pub fn rows(&self) -> usize {
        self.content.len()
    }
}

/// Tape handles produced by one motion forward pass.
#[derive(Debug, Clone)]
pub struct MotionOutput {
    /// Final hidden states, one row per token.
    pub states: Var,
    /// `[B, d]` CLS states.
    pub cls: Var,
    /// `[B, p]` unit-norm projections.
    pub projected: Var,
    /// `[F, 132]` reconstructions of the valid frames, item-major.
    pub reconstruction: Var,
    pub plan: TokenPlan,
}

#[derive(Debug, Clone)]
pub struct MotionEncoder {
    pub config: MotionEncoderConfig,
    pub frame_embed: Linear,
    pub cls: ParamId,
    pub position: Embedding,
    pub segment: Embedding,
    pub blocks: Vec<TransformerBlock>,
    pub gcb: Option<Gcb>,
    pub final_norm: LayerNorm,
    pub projection: Linear,
    pub reconstruction: Linear,
}

impl MotionEncoder {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        config: &MotionEncoderConfig,
        skeleton: &SkeletonGraph,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if skeleton.num_joints() != NUM_JOINTS {
            return Err(Error::Config(format!(
                "skeleton has {} joints, the encoder expects {NUM_JOINTS}",
                skeleton.num_joints()
            )));
        }
        let d = config.model_dim;
        let frame_embed = Linear::new(store, "motion.frame_embed", FRAME_DIM, d, rng)?;
        let cls = store.add("motion.cls", normal(&[1, d], INIT_STD, rng))?;
        let position = Embedding::new(store, "motion.position", config.max_len + 1, d, rng)?;
        let segment = Embedding::new(store, "motion.segment", 2, d, rng)?;
        let mut blocks = Vec::with_capacity(config.layers);
        let mut gcb = None;
        for l in 0..config.layers {
            blocks.push(TransformerBlock::new(
                store,
                &format!("motion.layers.{l}"),
                d,
                config.heads,
                config.ffn_dim,
                config.dropout,
                rng,
            )?);
            if config.use_gcb && l + 1 == config.gcb_after_layer {
                gcb = Some(Gcb::new(
                    store,
                    "motion.gcb",
                    d,
                    config.gcb_joint_dim,
                    skeleton.adjacency(),
                    rng,
                )?);
            }
        }
        Ok(MotionEncoder {
            config: config.clone(),
            frame_embed,
            cls,
            position,
            segment,
            blocks,
            gcb,
            final_norm: LayerNorm::new(store, "motion.final_norm", d)?,
            projection: Linear::new(store, "motion.projection", d, config.projection_dim, rng)?,
            reconstruction: Linear::new(store, "motion.reconstruction", d, FRAME_DIM, rng)?,
        })
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.max_frames() > self.config.max_len {
            return Err(Error::shape(
                "motion_batch",
                &[batch.len(), batch.max_frames(), FRAME_DIM],
                &[batch.len(), self.config.max_len, FRAME_DIM],
            ));
        }
        Ok(())
    }

    /// Token embeddings `[rows, d]` for the plan's layout.
    pub fn embed<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        batch: &Batch,
        plan: &TokenPlan,
    ) -> Result<Var> {
        self.check_batch(batch)?;
        let motion = batch.motion();
        let mut frames = Vec::with_capacity(plan.frame_sources.len() * FRAME_DIM);
        for &src in &plan.frame_sources {
            frames.extend(
                motion[src * FRAME_DIM..(src + 1) * FRAME_DIM]
                    .iter()
                    .map(|&v| T::lit(v as f64)),
            );
        }
        let content = if frames.is_empty() {
            let c = g.param(self.cls);
            g.gather_rows(c, Rc::clone(&plan.content))?
        } else {
            let x = g.input(Tensor::new(
                vec![plan.frame_sources.len(), FRAME_DIM],
                frames,
            )?);
            let f = self.frame_embed.forward(g, x)?;
            let c = g.param(self.cls);
            let table = g.concat_rows(c, f)?;
            g.gather_rows(table, Rc::clone(&plan.content))?
        };
        let pos = self.position.forward(g, Rc::clone(&plan.positions))?;
        let seg = self.segment.forward(g, Rc::clone(&plan.segments))?;
        let x = g.add(content, pos)?;
        g.add(x, seg)
    }

    /// Runs the GCB on frame rows only; CLS rows are copied through.
    fn apply_gcb<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        gcb: &Gcb,
        x: Var,
        plan: &TokenPlan,
    ) -> Result<Var> {
        if plan.frame_rows.is_empty() {
            return Ok(x);
        }
        let cls = g.gather_rows(x, Rc::clone(&plan.cls_rows))?;
        let frames = g.gather_rows(x, Rc::clone(&plan.frame_rows))?;
        let frames = gcb.forward(g, frames)?;
        let table = g.concat_rows(cls, frames)?;
        let n_cls = plan.cls_rows.len();
        let mut back = vec![0; plan.rows()];
        for (i, &r) in plan.cls_rows.iter().enumerate() {
            back[r] = i;
        }
        for (i, &r) in plan.frame_rows.iter().enumerate() {
            back[r] = n_cls + i;
        }
        g.gather_rows(table, Rc::new(back))
    }

    /// Full forward pass. Masking, if any, must already be applied to `batch`.
    pub fn forward<T: Real, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<'_, T>,
        batch: &Batch,
        padded: bool,
        rng: &mut R,
    ) -> Result<MotionOutput> {
        let plan = TokenPlan::new(batch, padded);
        let mut x = self.embed(g, batch, &plan)?;
        for (l, block) in self.blocks.iter().enumerate() {
            x = block.forward(g, x, &plan.layout, rng)?;
            if let Some(gcb) = &self.gcb {
                if l + 1 == self.config.gcb_after_layer {
                    x = self.apply_gcb(g, gcb, x, &plan)?;
                }
            }
        }
        let states = self.final_norm.forward(g, x)?;
        let cls = g.gather_rows(states, Rc::clone(&plan.cls_rows))?;
        let p = self.projection.forward(g, cls)?;
        let projected = g.l2_normalize(p)?;
        let frames = g.gather_rows(states, Rc::clone(&plan.valid_frame_rows))?;
        let reconstruction = self.reconstruction.forward(g, frames)?;
        Ok(MotionOutput {
            states,
            cls,
            projected,
            reconstruction,
            plan,
        })
    }

    /// CLS state after the layer that feeds the bottleneck, before and after it,
    /// for checking that the bottleneck leaves CLS untouched.
    pub fn cls_around_gcb<T: Real, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<'_, T>,
        batch: &Batch,
        rng: &mut R,
    ) -> Result<Option<(Var, Var)>> {
        let Some(gcb) = &self.gcb else {
            return Ok(None);
        };
        let plan = TokenPlan::new(batch, false);
        let mut x = self.embed(g, batch, &plan)?;
        for block in &self.blocks[..self.config.gcb_after_layer] {
            x = block.forward(g, x, &plan.layout, rng)?;
        }
        let before = g.gather_rows(x, Rc::clone(&plan.cls_rows))?;
        let y = self.apply_gcb(g, gcb, x, &plan)?;
        let after = g.gather_rows(y, Rc::clone(&plan.cls_rows))?;
        Ok(Some((before, after)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::collate;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> MotionEncoderConfig {
        MotionEncoderConfig {
            layers: 2,
            heads: 2,
            model_dim: 16,
            ffn_dim: 24,
            dropout: 0.0,
            max_len: 12,
            gcb_after_layer: 1,
            gcb_joint_dim: 2,
            use_gcb: true,
            projection_dim: 8,
        }
    }

    #[test]
    fn parameter_count_matches_config() {
        for cfg in [
            tiny(),
            MotionEncoderConfig::preset(Preset::Desk),
            MotionEncoderConfig {
                use_gcb: false,
                ..MotionEncoderConfig::preset(Preset::Desk)
            },
        ] {
            let mut store = ParamStore::<f32>::new();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            MotionEncoder::new(&mut store, &cfg, &SkeletonGraph::smpl22(), &mut rng).unwrap();
            assert_eq!(store.num_scalars(), cfg.num_params());
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = [
            MotionEncoderConfig { heads: 3, ..tiny() },
            MotionEncoderConfig {
                gcb_after_layer: 2,
                ..tiny()
            },
            MotionEncoderConfig {
                gcb_after_layer: 0,
                ..tiny()
            },
        ];
        for cfg in bad {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        }
        MotionEncoderConfig {
            gcb_after_layer: 0,
            use_gcb: false,
            ..tiny()
        }
        .validate()
        .unwrap();
    }

    #[test]
    fn projection_is_unit_norm_and_shapes_hold() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc =
            MotionEncoder::new(&mut store, &tiny(), &SkeletonGraph::smpl22(), &mut rng).unwrap();
        let a: Vec<f32> = (0..3 * FRAME_DIM).map(|i| (i as f32 * 0.1).sin()).collect();
        let b: Vec<f32> = (0..12 * FRAME_DIM)
            .map(|i| (i as f32 * 0.07).cos())
            .collect();
        let batch = collate(&[&a, &b], 12).unwrap();
        let mut g = Graph::new(&store, false);
        let out = enc.forward(&mut g, &batch, true, &mut rng).unwrap();
        assert_eq!(g.shape(out.states), &[2 * 13, 16]);
        assert_eq!(g.shape(out.reconstruction), &[15, FRAME_DIM]);
        for r in 0..2 {
            let n: f32 = g.value(out.projected).row(r).iter().map(|v| v * v).sum();
            assert!((n.sqrt() - 1.0).abs() < 1e-6);
        }
    }
}
