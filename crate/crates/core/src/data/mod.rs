//! Motion clips, frame-rate normalisation, masking, batching, file formats
//! and the synthetic benchmark.

mod batch;
mod clip;
pub mod io;
mod mask;
pub mod synth;

use std::path::Path;

pub use batch::{collate, Batch};
pub use clip::{resample, split_windows, Annotation, MotionClip};
pub use io::{load_clip, load_manifest, save_clip, save_manifest, Manifest, ManifestEntry, Split};
pub use mask::{apply_mask, sample_mask_span, MaskSpan, MAX_SPAN};
pub use synth::{synth_generate, SynthDataset, SynthSpec};

use crate::{Error, Result, MAX_FRAMES, TARGET_FPS};

/// Annotation text that marks a non-action segment; such segments are skipped.
pub const TRANSITION: &str = "transition";

/// One training or evaluation sample: at most `MAX_FRAMES` frames at 30 fps
/// and the text of the annotation it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    pub frames: Vec<f32>,
    pub text: String,
    pub label: Option<String>,
    /// Manifest path the item was cut from.
    pub source: String,
}

impl Item {
    pub fn num_frames(&self) -> usize {
        self.frames.len() / crate::FRAME_DIM
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub items: Vec<Item>,
    pub fingerprint: String,
}

/// Normalises a clip and cuts the annotated segment into items.
pub fn prepare_items(clip: &MotionClip, entry: &ManifestEntry) -> Result<Vec<Item>> {
    let clip = resample(clip, TARGET_FPS)?;
    let ann = clip.annotations().get(entry.annotation).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "{}: annotation {} does not exist ({} present)",
            entry.path,
            entry.annotation,
            clip.annotations().len()
        ))
    })?;
    if ann.text.trim().eq_ignore_ascii_case(TRANSITION) {
        return Ok(Vec::new());
    }
    let text = ann.text.clone();
    let segment = clip.slice(ann.start, ann.end)?;
    Ok(split_windows(&segment, MAX_FRAMES)?
        .into_iter()
        .map(|w| Item {
            frames: w.frames().to_vec(),
            text: text.clone(),
            label: entry.label.clone(),
            source: entry.path.clone(),
        })
        .collect())
}

impl Dataset {
    fn build(
        manifest: &Manifest,
        mut clip_for: impl FnMut(&str) -> Result<MotionClip>,
    ) -> Result<Self> {
        let mut fp = io::Fingerprinter::default();
        let mut items = Vec::new();
        for e in &manifest.entries {
            let clip = clip_for(&e.path)?;
            fp.add(&clip);
            items.extend(prepare_items(&clip, e)?);
        }
        let fingerprint = fp.finish();
        if fingerprint != manifest.fingerprint {
            return Err(Error::Config(format!(
                "manifest fingerprint {} does not match clip data {}",
                manifest.fingerprint, fingerprint
            )));
        }
        if items.is_empty() {
            return Err(Error::InvalidArgument("dataset has no usable items".into()));
        }
        Ok(Dataset { items, fingerprint })
    }

    /// Loads a manifest and every clip it references, verifying the fingerprint.
    pub fn load(manifest_path: &Path) -> Result<Self> {
        Dataset::load_with_workers(manifest_path, 1)
    }

    /// Like [`Dataset::load`], reading clip files on up to `workers` threads.
    /// Item order is the manifest order whatever the worker count.
    pub fn load_with_workers(manifest_path: &Path, workers: usize) -> Result<Self> {
        let manifest = load_manifest(manifest_path)?;
        let root = io::manifest_root(manifest_path);
        let paths: Vec<&str> = manifest.entries.iter().map(|e| e.path.as_str()).collect();
        let mut unique = paths.clone();
        unique.sort_unstable();
        unique.dedup();
        let workers = workers.clamp(1, unique.len().max(1));
        let chunk = unique.len().div_ceil(workers).max(1);
        let loaded: Vec<Result<Vec<MotionClip>>> = std::thread::scope(|s| {
            let handles: Vec<_> = unique
                .chunks(chunk)
                .map(|part| {
                    s.spawn(|| {
                        part.iter()
                            .map(|p| load_clip(&root.join(p)))
                            .collect::<Result<Vec<_>>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("clip loader panicked"))
                .collect()
        });
        let mut clips = std::collections::HashMap::with_capacity(unique.len());
        for (part, res) in unique.chunks(chunk).zip(loaded) {
            clips.extend(part.iter().copied().zip(res?));
        }
        Dataset::build(&manifest, |p| Ok(clips[p].clone()))
    }

    pub fn from_synth(ds: &SynthDataset, split: Split) -> Result<Self> {
        let manifest = match split {
            Split::Train => &ds.train,
            Split::Test => &ds.test,
        };
        Dataset::build(manifest, |p| {
            ds.clip(p).cloned().ok_or_else(|| {
                Error::InvalidArgument(format!("clip {p} missing from synthetic set"))
            })
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Distinct labels in order of first appearance.
    pub fn labels(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for l in self.items.iter().filter_map(|i| i.label.as_ref()) {
            if !out.contains(l) {
                out.push(l.clone());
            }
        }
        out
    }

    /// Keeps the first `n` items of each label, preserving order.
    pub fn take_per_label(&self, n: usize) -> Dataset {
        let mut seen = std::collections::HashMap::<Option<String>, usize>::new();
        let items = self
            .items
            .iter()
            .filter(|it| {
                let c = seen.entry(it.label.clone()).or_default();
                *c += 1;
                *c <= n
            })
            .cloned()
            .collect();
        Dataset {
            items,
            fingerprint: self.fingerprint.clone(),
        }
    }
}

/// Writes clips and manifests under `dir` (`clips/`, `train.jsonl`, `test.jsonl`).
pub fn write_synth(dir: &Path, ds: &SynthDataset) -> Result<()> {
    let clips_dir = dir.join("clips");
    std::fs::create_dir_all(&clips_dir).map_err(|e| Error::io(&clips_dir, e))?;
    for (path, clip) in &ds.clips {
        save_clip(&dir.join(path), clip)?;
    }
    save_manifest(&dir.join("train.jsonl"), &ds.train)?;
    save_manifest(&dir.join("test.jsonl"), &ds.test)
}
