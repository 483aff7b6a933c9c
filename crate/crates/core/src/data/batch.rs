use rand::Rng;

use super::mask::{apply_mask, sample_mask_span, MaskSpan};
use crate::{Error, Result, FRAME_DIM};

/// Zero-padded motion for `B` items plus the bookkeeping the encoders and
/// losses need. Validity is a prefix: item `b` owns frames `0..lengths[b]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    max_frames: usize,
    lengths: Vec<usize>,
    /// Encoder input, `B * max_frames * FRAME_DIM`; noise inside mask spans.
    motion: Vec<f32>,
    /// Clean motion with the same layout.
    target: Vec<f32>,
    spans: Vec<Option<MaskSpan>>,
    /// Token id sequences, one per item, when the batch is paired with text.
    pub tokens: Option<Vec<Vec<usize>>>,
    /// Class index per item, when known.
    pub labels: Vec<Option<usize>>,
}

impl Batch {
    pub fn max_frames(&self) -> usize {
        self.max_frames
    }

    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn spans(&self) -> &[Option<MaskSpan>] {
        &self.spans
    }

    pub fn motion(&self) -> &[f32] {
        &self.motion
    }

    pub fn target(&self) -> &[f32] {
        &self.target
    }

    /// `B * max_frames` validity flags.
    pub fn validity(&self) -> Vec<bool> {
        self.lengths
            .iter()
            .flat_map(|&l| (0..self.max_frames).map(move |t| t < l))
            .collect()
    }

    /// Valid input frames of item `b`.
    pub fn item_motion(&self, b: usize) -> &[f32] {
        let base = b * self.max_frames * FRAME_DIM;
        &self.motion[base..base + self.lengths[b] * FRAME_DIM]
    }

    pub fn item_target(&self, b: usize) -> &[f32] {
        let base = b * self.max_frames * FRAME_DIM;
        &self.target[base..base + self.lengths[b] * FRAME_DIM]
    }

    /// Samples and applies one span per item. Replaces any earlier masking.
    pub fn apply_masking<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        self.motion.copy_from_slice(&self.target);
        for b in 0..self.len() {
            let span = sample_mask_span(self.lengths[b], rng)?;
            let base = b * self.max_frames * FRAME_DIM;
            apply_mask(
                &mut self.motion[base..base + self.lengths[b] * FRAME_DIM],
                span,
                rng,
            )?;
            self.spans[b] = Some(span);
        }
        Ok(())
    }

    pub fn clear_masking(&mut self) {
        self.motion.copy_from_slice(&self.target);
        self.spans.iter_mut().for_each(|s| *s = None);
    }
}

/// Pads each clip (flat `T * FRAME_DIM` frames) to `max_frames` with zeros.
pub fn collate(clips: &[&[f32]], max_frames: usize) -> Result<Batch> {
    if clips.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot collate an empty batch".into(),
        ));
    }
    let mut motion = vec![0.0f32; clips.len() * max_frames * FRAME_DIM];
    let mut lengths = Vec::with_capacity(clips.len());
    for (b, c) in clips.iter().enumerate() {
        if c.is_empty() || c.len() % FRAME_DIM != 0 {
            return Err(Error::InvalidArgument(format!(
                "item {b} has {} scalars, not a positive multiple of {FRAME_DIM}",
                c.len()
            )));
        }
        let t = c.len() / FRAME_DIM;
        if t > max_frames {
            return Err(Error::InvalidArgument(format!(
                "item {b} has {t} frames, more than the maximum {max_frames}"
            )));
        }
        let base = b * max_frames * FRAME_DIM;
        motion[base..base + c.len()].copy_from_slice(c);
        lengths.push(t);
    }
    Ok(Batch {
        max_frames,
        target: motion.clone(),
        motion,
        spans: vec![None; clips.len()],
        tokens: None,
        labels: vec![None; clips.len()],
        lengths,
    })
}
