//! Procedural motion-language benchmark.
//!
//! Each class is a small "joint program": a list of axis-angle trajectories
//! `bias + amp * sin(2π f t + phase) + rate * t` on named joints. Clips draw
//! amplitude, frequency, phase, rate and length per clip, add per-frame
//! rotation jitter on every joint, and carry one annotation covering the
//! whole clip with a phrase drawn from the class templates.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use super::clip::{Annotation, MotionClip};
use super::io::{Fingerprinter, Manifest, ManifestEntry, Split};
use crate::geom::{axis_angle_to_matrix, matrix_to_6d, SkeletonGraph};
use crate::{Error, Result, NUM_JOINTS, ROT_DIM};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointTerm {
    pub joint: String,
    /// Rotation axis in the parent frame; normalised on use.
    pub axis: [f64; 3],
    #[serde(default)]
    pub bias: f64,
    /// Amplitude range in radians.
    #[serde(default)]
    pub amplitude: [f64; 2],
    /// Frequency range in Hz.
    #[serde(default)]
    pub frequency: [f64; 2],
    #[serde(default = "full_phase")]
    pub phase: [f64; 2],
    /// Constant angular rate range in rad/s.
    #[serde(default)]
    pub rate: [f64; 2],
}

fn full_phase() -> [f64; 2] {
    [0.0, 2.0 * PI]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    /// Class label; also used as the recognition label text.
    pub name: String,
    pub templates: Vec<String>,
    pub program: Vec<JointTerm>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub classes: Vec<ClassSpec>,
    #[serde(default = "defaults::clips_per_class")]
    pub clips_per_class: usize,
    #[serde(default = "defaults::min_frames")]
    pub min_frames: usize,
    #[serde(default = "defaults::max_frames")]
    pub max_frames: usize,
    #[serde(default = "defaults::fps")]
    pub fps: f64,
    /// Standard deviation of the per-frame axis-angle jitter, radians.
    #[serde(default = "defaults::jitter")]
    pub jitter_std: f64,
    #[serde(default = "defaults::test_fraction")]
    pub test_fraction: f64,
}

mod defaults {
    pub fn clips_per_class() -> usize {
        100
    }
    pub fn min_frames() -> usize {
        30
    }
    pub fn max_frames() -> usize {
        150
    }
    pub fn fps() -> f64 {
        30.0
    }
    pub fn jitter() -> f64 {
        0.05
    }
    pub fn test_fraction() -> f64 {
        0.2
    }
}

fn term(joint: &str, axis: [f64; 3], bias: f64, amp: [f64; 2], freq: [f64; 2]) -> JointTerm {
    JointTerm {
        joint: joint.into(),
        axis,
        bias,
        amplitude: amp,
        frequency: freq,
        phase: full_phase(),
        rate: [0.0, 0.0],
    }
}

fn class(name: &str, templates: [&str; 3], program: Vec<JointTerm>) -> ClassSpec {
    let mut t = vec![name.to_string()];
    t.extend(templates.iter().map(|s| s.to_string()));
    ClassSpec {
        name: name.into(),
        templates: t,
        program,
    }
}

const X: [f64; 3] = [1.0, 0.0, 0.0];
const Y: [f64; 3] = [0.0, 1.0, 0.0];
const Z: [f64; 3] = [0.0, 0.0, 1.0];

impl Default for SynthSpec {
    /// Eight kinematically distinct classes with four phrasings each.
    fn default() -> Self {
        let slow = [0.3, 0.6];
        let fast = [1.5, 2.5];
        let classes = vec![
            class(
                "raise right arm",
                [
                    "a person raises the right arm",
                    "lifting right hand up",
                    "right arm goes up",
                ],
                vec![
                    term("right_shoulder", Z, -0.7, [0.5, 0.7], slow),
                    term("right_elbow", Z, -0.1, [0.0, 0.1], slow),
                ],
            ),
            class(
                "raise left arm",
                [
                    "a person raises the left arm",
                    "lifting left hand up",
                    "left arm goes up",
                ],
                vec![
                    term("left_shoulder", Z, 0.7, [0.5, 0.7], slow),
                    term("left_elbow", Z, 0.1, [0.0, 0.1], slow),
                ],
            ),
            class(
                "wave",
                [
                    "a person waves hello",
                    "waving a hand",
                    "someone waves the right hand",
                ],
                vec![
                    term("right_shoulder", Z, -1.3, [0.05, 0.15], slow),
                    term("right_elbow", Y, 0.9, [0.4, 0.6], fast),
                    term("right_wrist", Z, 0.0, [0.1, 0.3], fast),
                ],
            ),
            class(
                "squat",
                [
                    "a person squats down",
                    "bending both knees to crouch",
                    "doing squats",
                ],
                vec![
                    term("left_hip", X, -0.6, [0.4, 0.6], slow),
                    term("right_hip", X, -0.6, [0.4, 0.6], slow),
                    term("left_knee", X, 1.0, [0.6, 0.9], slow),
                    term("right_knee", X, 1.0, [0.6, 0.9], slow),
                    term("spine1", X, 0.2, [0.1, 0.2], slow),
                ],
            ),
            class(
                "kick",
                [
                    "a person kicks with the right leg",
                    "kicking forward",
                    "someone kicks a ball",
                ],
                vec![
                    term("right_hip", X, -0.5, [0.6, 0.9], [0.8, 1.2]),
                    term("right_knee", X, 0.5, [0.4, 0.6], [0.8, 1.2]),
                    term("left_shoulder", Z, 0.3, [0.1, 0.2], [0.8, 1.2]),
                ],
            ),
            class(
                "turn",
                [
                    "a person turns around",
                    "turning in place",
                    "spinning the body around",
                ],
                vec![JointTerm {
                    rate: [1.5, 2.5],
                    ..term("pelvis", Y, 0.0, [0.0, 0.1], slow)
                }],
            ),
            class(
                "jump in place",
                [
                    "a person jumps up and down",
                    "jumping on the spot",
                    "hopping in place",
                ],
                vec![
                    term("left_hip", X, -0.3, [0.2, 0.3], fast),
                    term("right_hip", X, -0.3, [0.2, 0.3], fast),
                    term("left_knee", X, 0.5, [0.3, 0.5], fast),
                    term("right_knee", X, 0.5, [0.3, 0.5], fast),
                    term("left_shoulder", Z, 0.6, [0.3, 0.5], fast),
                    term("right_shoulder", Z, -0.6, [0.3, 0.5], fast),
                ],
            ),
            class(
                "bow",
                [
                    "a person bows forward",
                    "bending the upper body in a bow",
                    "taking a bow",
                ],
                vec![
                    term("spine1", X, 0.35, [0.25, 0.35], slow),
                    term("spine2", X, 0.3, [0.2, 0.3], slow),
                    term("spine3", X, 0.2, [0.1, 0.2], slow),
                    term("neck", X, 0.2, [0.1, 0.2], slow),
                ],
            ),
        ];
        SynthSpec {
            classes,
            clips_per_class: defaults::clips_per_class(),
            min_frames: defaults::min_frames(),
            max_frames: defaults::max_frames(),
            fps: defaults::fps(),
            jitter_std: defaults::jitter(),
            test_fraction: defaults::test_fraction(),
        }
    }
}

fn ordered(r: [f64; 2], what: &str, class: &str) -> Result<()> {
    if r[0] <= r[1] && r.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidSpec(format!(
            "class {class:?}: {what} range {r:?} is not ordered"
        )))
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(Error::InvalidSpec(format!(
                "need at least 2 classes, got {}",
                self.classes.len()
            )));
        }
        let skel = SkeletonGraph::smpl22();
        let mut names = std::collections::HashSet::new();
        for c in &self.classes {
            if !names.insert(&c.name) {
                return Err(Error::InvalidSpec(format!("duplicate class {:?}", c.name)));
            }
            if c.templates.len() < 3 {
                return Err(Error::InvalidSpec(format!(
                    "class {:?} has {} templates, need at least 3",
                    c.name,
                    c.templates.len()
                )));
            }
            for t in &c.program {
                if skel.index_of(&t.joint).is_none() {
                    return Err(Error::InvalidSpec(format!(
                        "class {:?}: unknown joint {:?}",
                        c.name, t.joint
                    )));
                }
                let n = t.axis.iter().map(|a| a * a).sum::<f64>().sqrt();
                if !(n > 1e-9 && n.is_finite()) {
                    return Err(Error::InvalidSpec(format!(
                        "class {:?}: zero axis on {}",
                        c.name, t.joint
                    )));
                }
                ordered(t.amplitude, "amplitude", &c.name)?;
                ordered(t.frequency, "frequency", &c.name)?;
                ordered(t.phase, "phase", &c.name)?;
                ordered(t.rate, "rate", &c.name)?;
            }
        }
        if self.clips_per_class < 2 {
            return Err(Error::InvalidSpec("need at least 2 clips per class".into()));
        }
        if self.min_frames == 0 || self.min_frames > self.max_frames {
            return Err(Error::InvalidSpec(format!(
                "bad frame range {}..={}",
                self.min_frames, self.max_frames
            )));
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return Err(Error::InvalidSpec(format!(
                "fps must be positive, got {}",
                self.fps
            )));
        }
        if !(self.jitter_std >= 0.0 && self.jitter_std.is_finite()) {
            return Err(Error::InvalidSpec(format!(
                "bad jitter {}",
                self.jitter_std
            )));
        }
        let n_test = self.test_count();
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0)
            || n_test == 0
            || n_test >= self.clips_per_class
        {
            return Err(Error::InvalidSpec(format!(
                "test fraction {} leaves an empty split with {} clips per class",
                self.test_fraction, self.clips_per_class
            )));
        }
        Ok(())
    }

    /// Test clips per class.
    pub fn test_count(&self) -> usize {
        (self.clips_per_class as f64 * self.test_fraction).round() as usize
    }

    pub fn label_texts(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }
}

/// Generated clips plus the two manifests that reference them.
#[derive(Debug, Clone)]
pub struct SynthDataset {
    /// `(relative path, clip)` in generation order.
    pub clips: Vec<(String, MotionClip)>,
    pub train: Manifest,
    pub test: Manifest,
}

impl SynthDataset {
    pub fn clip(&self, path: &str) -> Option<&MotionClip> {
        self.clips.iter().find(|(p, _)| p == path).map(|(_, c)| c)
    }
}

struct ResolvedTerm {
    joint: usize,
    axis: [f64; 3],
    bias: f64,
    amp: f64,
    omega: f64,
    phase: f64,
    rate: f64,
}

fn uniform<R: Rng>(rng: &mut R, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

fn generate_clip<R: Rng>(
    spec: &SynthSpec,
    class: &ClassSpec,
    skel: &SkeletonGraph,
    rng: &mut R,
) -> Result<MotionClip> {
    let t_len = rng.random_range(spec.min_frames..=spec.max_frames);
    let terms: Vec<ResolvedTerm> = class
        .program
        .iter()
        .map(|t| {
            let n = t.axis.iter().map(|a| a * a).sum::<f64>().sqrt();
            ResolvedTerm {
                joint: skel.index_of(&t.joint).expect("validated"),
                axis: t.axis.map(|a| a / n),
                bias: t.bias,
                amp: uniform(rng, t.amplitude),
                omega: 2.0 * PI * uniform(rng, t.frequency),
                phase: uniform(rng, t.phase),
                rate: uniform(rng, t.rate),
            }
        })
        .collect();
    let jitter =
        Normal::new(0.0, spec.jitter_std).map_err(|e| Error::InvalidSpec(e.to_string()))?;
    let mut frames = Vec::with_capacity(t_len * NUM_JOINTS * ROT_DIM);
    for f in 0..t_len {
        let time = f as f64 / spec.fps;
        let mut aa = [[0.0f64; 3]; NUM_JOINTS];
        for t in &terms {
            let angle = t.bias + t.amp * (t.omega * time + t.phase).sin() + t.rate * time;
            for k in 0..3 {
                aa[t.joint][k] += angle * t.axis[k];
            }
        }
        for v in aa.iter_mut() {
            for c in v.iter_mut() {
                *c += jitter.sample(rng);
            }
            let r = axis_angle_to_matrix(*v)?;
            frames.extend(matrix_to_6d(&r).0.iter().map(|&x| x as f32));
        }
    }
    let text = class.templates.choose(rng).expect("validated").clone();
    MotionClip::new(
        spec.fps,
        frames,
        vec![Annotation {
            start: 0,
            end: t_len,
            text,
        }],
    )
}

/// Pure function of `(spec, seed)`: clips, and stratified train/test manifests.
pub fn synth_generate(spec: &SynthSpec, seed: u64) -> Result<SynthDataset> {
    spec.validate()?;
    let skel = SkeletonGraph::smpl22();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut clips = Vec::new();
    let mut train = Vec::new();
    let mut test = Vec::new();
    let n_test = spec.test_count();
    for (ci, class) in spec.classes.iter().enumerate() {
        let mut order: Vec<usize> = (0..spec.clips_per_class).collect();
        order.shuffle(&mut rng);
        let mut is_test = vec![false; spec.clips_per_class];
        for &i in &order[..n_test] {
            is_test[i] = true;
        }
        for (i, &held_out) in is_test.iter().enumerate() {
            let clip = generate_clip(spec, class, &skel, &mut rng)?;
            let path = format!("clips/c{ci:02}_{i:04}.json");
            let entry = ManifestEntry {
                path: path.clone(),
                annotation: 0,
                label: Some(class.name.clone()),
            };
            if held_out {
                test.push((entry, clips.len()))
            } else {
                train.push((entry, clips.len()))
            }
            clips.push((path, clip));
        }
    }
    let manifest = |split, entries: Vec<(ManifestEntry, usize)>| {
        let mut fp = Fingerprinter::default();
        for (_, idx) in &entries {
            fp.add(&clips[*idx].1);
        }
        Manifest {
            split,
            fingerprint: fp.finish(),
            entries: entries.into_iter().map(|(e, _)| e).collect(),
        }
    };
    let train = manifest(Split::Train, train);
    let test = manifest(Split::Test, test);
    Ok(SynthDataset { clips, train, test })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSpec {
        SynthSpec {
            clips_per_class: 5,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn default_spec_counts() {
        let spec = SynthSpec::default();
        spec.validate().unwrap();
        assert_eq!(spec.classes.len(), 8);
        assert!(spec
            .classes
            .iter()
            .all(|c| c.templates.len() == 4 && c.templates[0] == c.name));
        assert_eq!(spec.test_count(), 20);
    }

    #[test]
    fn generation_is_deterministic_and_stratified() {
        let a = synth_generate(&small(), 11).unwrap();
        let b = synth_generate(&small(), 11).unwrap();
        assert_eq!(a.train.to_jsonl(), b.train.to_jsonl());
        assert_eq!(a.test.to_jsonl(), b.test.to_jsonl());
        let c = synth_generate(&small(), 12).unwrap();
        assert_ne!(a.train.fingerprint, c.train.fingerprint);
        assert_eq!(a.clips.len(), 40);
        assert_eq!(a.test.entries.len(), 8);
        for class in &small().classes {
            let n = a
                .test
                .entries
                .iter()
                .filter(|e| e.label.as_deref() == Some(&class.name))
                .count();
            assert_eq!(n, 1);
        }
        let train_paths: std::collections::HashSet<_> =
            a.train.entries.iter().map(|e| &e.path).collect();
        assert!(a
            .test
            .entries
            .iter()
            .all(|e| !train_paths.contains(&e.path)));
    }

    #[test]
    fn rejects_bad_specs() {
        let mut s = small();
        s.classes.truncate(1);
        assert!(matches!(synth_generate(&s, 0), Err(Error::InvalidSpec(_))));
        let mut s = small();
        s.classes[0].program[0].joint = "tail".into();
        assert!(matches!(s.validate(), Err(Error::InvalidSpec(_))));
        let mut s = small();
        s.classes[1].templates.truncate(2);
        assert!(matches!(s.validate(), Err(Error::InvalidSpec(_))));
    }
}
