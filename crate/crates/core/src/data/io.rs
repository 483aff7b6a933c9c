//! Clip files and JSON-lines manifests.
//!
//! A manifest starts with a header line `{"split", "fingerprint", "count"}`
//! followed by `count` entry lines `{"path", "annotation", "label"?}`. Paths
//! are relative to the manifest's directory. The fingerprint is the SHA-256
//! of the canonical bytes of every referenced clip, in entry order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::clip::MotionClip;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub path: String,
    /// Index into the clip's annotation list.
    pub annotation: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub split: Split,
    pub fingerprint: String,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    split: Split,
    fingerprint: String,
    count: usize,
}

/// The byte form that is written to disk and hashed.
pub fn canonical_clip_bytes(clip: &MotionClip) -> Vec<u8> {
    serde_json::to_vec(clip).expect("clip serialisation cannot fail")
}

pub fn parse_clip(bytes: &[u8], source_name: &str) -> Result<MotionClip> {
    serde_json::from_slice(bytes).map_err(|e| Error::json(source_name, &e))
}

pub fn save_clip(path: &Path, clip: &MotionClip) -> Result<()> {
    fs::write(path, canonical_clip_bytes(clip)).map_err(|e| Error::io(path, e))
}

pub fn load_clip(path: &Path) -> Result<MotionClip> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_clip(&bytes, &path.display().to_string())
}

/// Incremental fingerprint over clips in entry order.
#[derive(Default)]
pub struct Fingerprinter(Sha256);

impl Fingerprinter {
    /// Hashes the clip's content in a fixed little-endian binary layout:
    /// fps, frame count, frame values, then each annotation.
    pub fn add(&mut self, clip: &MotionClip) {
        self.0.update(clip.fps().to_le_bytes());
        self.0.update((clip.num_frames() as u64).to_le_bytes());
        let mut buf = Vec::with_capacity(clip.frames().len() * 4);
        for v in clip.frames() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        self.0.update(&buf);
        self.0
            .update((clip.annotations().len() as u64).to_le_bytes());
        for a in clip.annotations() {
            self.0.update((a.start as u64).to_le_bytes());
            self.0.update((a.end as u64).to_le_bytes());
            self.0.update((a.text.len() as u64).to_le_bytes());
            self.0.update(a.text.as_bytes());
        }
    }

    pub fn finish(self) -> String {
        hex::encode(self.0.finalize())
    }
}

impl Manifest {
    pub fn to_jsonl(&self) -> String {
        let header = Header {
            split: self.split,
            fingerprint: self.fingerprint.clone(),
            count: self.entries.len(),
        };
        let mut out = serde_json::to_string(&header).expect("header serialises");
        out.push('\n');
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("entry serialises"));
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str, source_name: &str) -> Result<Manifest> {
        let at_line = |line: usize, e: serde_json::Error| Error::Parse {
            source_name: source_name.to_string(),
            line,
            column: e.column(),
            message: e.to_string(),
        };
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines.next().ok_or_else(|| Error::Parse {
            source_name: source_name.to_string(),
            line: 1,
            column: 1,
            message: "empty manifest".into(),
        })?;
        let header: Header = serde_json::from_str(first).map_err(|e| at_line(1, e))?;
        let mut entries = Vec::with_capacity(header.count);
        for (i, line) in lines {
            entries.push(serde_json::from_str(line).map_err(|e| at_line(i + 1, e))?);
        }
        if entries.len() != header.count {
            return Err(Error::Parse {
                source_name: source_name.to_string(),
                line: text.lines().count() + 1,
                column: 1,
                message: format!(
                    "header promises {} entries, found {}",
                    header.count,
                    entries.len()
                ),
            });
        }
        Ok(Manifest {
            split: header.split,
            fingerprint: header.fingerprint,
            entries,
        })
    }

    /// Recomputes the fingerprint from the clip files under `root`.
    pub fn compute_fingerprint(&self, root: &Path) -> Result<String> {
        let mut fp = Fingerprinter::default();
        for e in &self.entries {
            fp.add(&load_clip(&root.join(&e.path))?);
        }
        Ok(fp.finish())
    }
}

pub fn save_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    fs::write(path, manifest.to_jsonl()).map_err(|e| Error::io(path, e))
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Manifest::parse(&text, &path.display().to_string())
}

/// Directory that manifest paths are relative to.
pub fn manifest_root(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}
