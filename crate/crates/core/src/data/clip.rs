use serde::{Deserialize, Serialize};

use crate::geom::{interpolate_pose, Pose};
use crate::{Error, Result, FRAME_DIM};

/// A text label over the half-open frame range `[start, end)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub start: usize,
    pub end: usize,
    pub text: String,
}

/// A motion sequence: `T` frames of 22 joint rotations in 6D form, joint-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ClipFile", into = "ClipFile")]
pub struct MotionClip {
    fps: f64,
    frames: Vec<f32>,
    annotations: Vec<Annotation>,
}

/// On-disk layout of a clip.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClipFile {
    fps: f64,
    frames: Vec<Vec<f32>>,
    annotations: Vec<Annotation>,
}

impl TryFrom<ClipFile> for MotionClip {
    type Error = Error;

    fn try_from(f: ClipFile) -> Result<Self> {
        if let Some((i, row)) = f
            .frames
            .iter()
            .enumerate()
            .find(|(_, r)| r.len() != FRAME_DIM)
        {
            return Err(Error::InvalidArgument(format!(
                "frame {i} has {} values, expected {FRAME_DIM}",
                row.len()
            )));
        }
        MotionClip::new(f.fps, f.frames.concat(), f.annotations)
    }
}

impl From<MotionClip> for ClipFile {
    fn from(c: MotionClip) -> Self {
        ClipFile {
            fps: c.fps,
            frames: c.frames.chunks(FRAME_DIM).map(<[f32]>::to_vec).collect(),
            annotations: c.annotations,
        }
    }
}

impl MotionClip {
    pub fn new(fps: f64, frames: Vec<f32>, annotations: Vec<Annotation>) -> Result<Self> {
        if !(fps > 0.0 && fps.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "fps must be positive, got {fps}"
            )));
        }
        if frames.is_empty() || !frames.len().is_multiple_of(FRAME_DIM) {
            return Err(Error::InvalidArgument(format!(
                "frame data of length {} is not a positive multiple of {FRAME_DIM}",
                frames.len()
            )));
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("clip frame data".into()));
        }
        let t = frames.len() / FRAME_DIM;
        for a in &annotations {
            if a.start >= a.end || a.end > t {
                return Err(Error::InvalidArgument(format!(
                    "annotation [{}, {}) outside clip of {t} frames",
                    a.start, a.end
                )));
            }
        }
        Ok(MotionClip {
            fps,
            frames,
            annotations,
        })
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len() / FRAME_DIM
    }

    /// Flat `T * FRAME_DIM` frame data.
    pub fn frames(&self) -> &[f32] {
        &self.frames
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.frames[t * FRAME_DIM..(t + 1) * FRAME_DIM]
    }

    pub fn annotations(&self) -> &[Annotation] {
        &self.annotations
    }

    /// Frames `[start, end)` with annotations clipped to the range and shifted.
    pub fn slice(&self, start: usize, end: usize) -> Result<MotionClip> {
        if start >= end || end > self.num_frames() {
            return Err(Error::InvalidArgument(format!(
                "slice [{start}, {end}) outside clip of {} frames",
                self.num_frames()
            )));
        }
        let annotations = self
            .annotations
            .iter()
            .filter(|a| a.start < end && a.end > start)
            .map(|a| Annotation {
                start: a.start.max(start) - start,
                end: a.end.min(end) - start,
                text: a.text.clone(),
            })
            .collect();
        MotionClip::new(
            self.fps,
            self.frames[start * FRAME_DIM..end * FRAME_DIM].to_vec(),
            annotations,
        )
    }
}

/// Resamples to `target_fps` by linear blending in 6D space.
///
/// Output frame `i` sits at source time `i * fps / target_fps` (in source
/// frames); times past the last frame hold the last frame.
pub fn resample(clip: &MotionClip, target_fps: f64) -> Result<MotionClip> {
    if !(target_fps > 0.0 && target_fps.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "target fps must be positive, got {target_fps}"
        )));
    }
    if clip.fps == target_fps {
        return Ok(clip.clone());
    }
    let t_in = clip.num_frames();
    let ratio = target_fps / clip.fps;
    let t_out = ((t_in as f64 * ratio).round() as usize).max(1);
    let mut frames = Vec::with_capacity(t_out * FRAME_DIM);
    for i in 0..t_out {
        let src = (i as f64 / ratio).min((t_in - 1) as f64);
        let lo = src.floor() as usize;
        let frac = src - lo as f64;
        if frac == 0.0 {
            frames.extend_from_slice(clip.frame(lo));
        } else {
            let a = Pose::from_frame(clip.frame(lo))?;
            let b = Pose::from_frame(clip.frame(lo + 1))?;
            frames.extend(interpolate_pose(&a, &b, frac)?.to_frame());
        }
    }
    let scale = |f: usize| ((f as f64 * ratio).round() as usize).min(t_out);
    let annotations = clip
        .annotations
        .iter()
        .map(|a| {
            let start = scale(a.start).min(t_out - 1);
            Annotation {
                start,
                end: scale(a.end).max(start + 1),
                text: a.text.clone(),
            }
        })
        .collect();
    MotionClip::new(target_fps, frames, annotations)
}

/// Splits into consecutive windows of at most `max_frames`; each window keeps
/// the annotations overlapping it.
pub fn split_windows(clip: &MotionClip, max_frames: usize) -> Result<Vec<MotionClip>> {
    if max_frames == 0 {
        return Err(Error::InvalidArgument(
            "window length must be positive".into(),
        ));
    }
    let t = clip.num_frames();
    if t <= max_frames {
        return Ok(vec![clip.clone()]);
    }
    (0..t)
        .step_by(max_frames)
        .map(|s| clip.slice(s, (s + max_frames).min(t)))
        .collect()
}
