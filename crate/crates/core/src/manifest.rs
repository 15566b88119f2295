//! The JSON dataset index: one entry per video with its weak label, split
//! and (for synthetic data) the ground-truth corruption events.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::synth::{CorruptionEvent, CorruptionKind};

/// Bag-level label obtained without manual tagging. Serialized as `0`/`1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum WeakLabel {
    Normal,
    Corrupted,
}

impl WeakLabel {
    pub fn is_corrupted(self) -> bool {
        self == WeakLabel::Corrupted
    }

    pub fn as_f64(self) -> f64 {
        match self {
            WeakLabel::Normal => 0.0,
            WeakLabel::Corrupted => 1.0,
        }
    }
}

impl From<bool> for WeakLabel {
    fn from(corrupted: bool) -> Self {
        if corrupted {
            WeakLabel::Corrupted
        } else {
            WeakLabel::Normal
        }
    }
}

impl Serialize for WeakLabel {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_u8(self.is_corrupted() as u8)
    }
}

impl<'de> Deserialize<'de> for WeakLabel {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match u8::deserialize(d)? {
            0 => Ok(WeakLabel::Normal),
            1 => Ok(WeakLabel::Corrupted),
            other => Err(serde::de::Error::custom(format!("label must be 0 or 1, got {other}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Video location, relative to the manifest's directory unless absolute.
    pub path: String,
    pub label: WeakLabel,
    pub split: Split,
    #[serde(default)]
    pub events: Vec<CorruptionEvent>,
}

impl ManifestEntry {
    /// Kinds of the events that overlap frames `[start, end)`, deduplicated, in
    /// declaration order.
    pub fn kinds_in_range(&self, start: usize, end: usize) -> Vec<CorruptionKind> {
        let mut kinds = Vec::new();
        for e in &self.events {
            if e.start < end && e.start + e.duration > start && !kinds.contains(&e.kind) {
                kinds.push(e.kind);
            }
        }
        kinds
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    #[serde(default = "default_version")]
    pub version: u32,
    pub videos: Vec<ManifestEntry>,
}

fn default_version() -> u32 {
    1
}

impl DatasetManifest {
    pub fn new(videos: Vec<ManifestEntry>) -> Self {
        Self { version: 1, videos }
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for v in &self.videos {
            if !seen.insert(v.path.as_str()) {
                return Err(Error::Config(format!("duplicate manifest path '{}'", v.path)));
            }
            for e in &v.events {
                if e.duration == 0 {
                    return Err(Error::Config(format!("zero-duration event in '{}'", v.path)));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: DatasetManifest =
            serde_json::from_str(text).map_err(|e| Error::Format(format!("manifest: {e}")))?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::formats::write_bytes(path, self.to_json().as_bytes())
    }

    pub fn resolve(manifest_path: &Path, entry: &ManifestEntry) -> PathBuf {
        let p = Path::new(&entry.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            manifest_path.parent().unwrap_or(Path::new(".")).join(p)
        }
    }

    pub fn count(&self, label: WeakLabel) -> usize {
        self.videos.iter().filter(|v| v.label == label).count()
    }
}
