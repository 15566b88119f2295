//! Glue between the stages: manifest videos to labeled feature sets, models
//! and baselines to score tables, and reports to files.
//!
//! A feature directory holds, per split, `{split}.wmil` with the descriptors
//! and `{split}.json` with one [`BagMeta`] per bag in the same order.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::energy::{video_segment_scores, EnergyConfig};
use crate::error::{Error, Result};
use crate::eval::{Granularity, MetricsReport, ScoreRow, ScoreTable, ThresholdResult};
use crate::features::{extract_video_features, FeatureBag};
use crate::formats::{read_features, read_video, write_bytes, write_features};
use crate::manifest::{DatasetManifest, ManifestEntry, Split, WeakLabel};
use crate::model::{LabeledBag, Model};
use crate::synth::CorruptionKind;
use crate::video::{BagGeometry, Video, FRAME_SIDE};

/// Provenance and labels of one bag.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BagMeta {
    pub id: String,
    pub source: String,
    pub start_frame: usize,
    /// Weak label inherited from the source video; used for training.
    pub label: WeakLabel,
    /// Whether a corruption event overlaps the bag; used for evaluation.
    pub corrupted: bool,
    pub kinds: Vec<CorruptionKind>,
    pub split: Split,
}

impl BagMeta {
    fn for_range(entry: &ManifestEntry, start: usize, end: usize) -> Self {
        let kinds = entry.kinds_in_range(start, end);
        Self {
            id: format!("{}@{start}", entry.path),
            source: entry.path.clone(),
            start_frame: start,
            label: entry.label,
            corrupted: !kinds.is_empty(),
            kinds,
            split: entry.split,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureSet {
    pub bags: Vec<FeatureBag>,
    pub meta: Vec<BagMeta>,
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.bags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bags.is_empty()
    }

    /// Describes every complete bag of `video` (any resolution).
    pub fn push_video(&mut self, video: Video, entry: &ManifestEntry, geometry: BagGeometry) -> Result<()> {
        let bags = extract_video_features(video, &entry.path, geometry)?;
        for (bag, (start, end)) in bags.into_iter().zip(geometry.bag_ranges(usize::MAX)) {
            self.meta.push(BagMeta::for_range(entry, start, end));
            self.bags.push(bag);
        }
        Ok(())
    }

    pub fn labeled(&self) -> Vec<LabeledBag<'_>> {
        self.bags.iter().zip(&self.meta).map(|(b, m)| (b, m.label)).collect()
    }

    pub fn extend(&mut self, other: FeatureSet) {
        self.bags.extend(other.bags);
        self.meta.extend(other.meta);
    }

    pub fn save(&self, dir: impl AsRef<Path>, split: Split) -> Result<()> {
        let (wmil, json) = set_paths(dir.as_ref(), split);
        write_features(&wmil, &self.bags)?;
        let mut text = serde_json::to_string_pretty(&self.meta).expect("metadata serializes");
        text.push('\n');
        write_bytes(&json, text.as_bytes())
    }

    pub fn load(dir: impl AsRef<Path>, split: Split) -> Result<Self> {
        let (wmil, json) = set_paths(dir.as_ref(), split);
        let text = std::fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
        let meta: Vec<BagMeta> =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", json.display())))?;
        let file = read_features(&wmil)?;
        if file.n_bags as usize != meta.len() {
            return Err(Error::Format(format!(
                "{} holds {} bags but {} lists {}",
                wmil.display(),
                file.n_bags,
                json.display(),
                meta.len()
            )));
        }
        let mut bags = file.into_bags("")?;
        for (b, m) in bags.iter_mut().zip(&meta) {
            b.id = m.id.clone();
        }
        Ok(Self { bags, meta })
    }
}

fn set_paths(dir: &Path, split: Split) -> (PathBuf, PathBuf) {
    (dir.join(format!("{split}.wmil")), dir.join(format!("{split}.json")))
}

/// Reads every video of a manifest and returns the feature set of each split.
pub fn extract_manifest(manifest_path: &Path, geometry: BagGeometry) -> Result<BTreeMap<Split, FeatureSet>> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let mut out: BTreeMap<Split, FeatureSet> = BTreeMap::new();
    for entry in &manifest.videos {
        let video = read_video(DatasetManifest::resolve(manifest_path, entry))?;
        out.entry(entry.split).or_default().push_video(video, entry, geometry)?;
    }
    Ok(out)
}

/// Attaches externally computed bags to a manifest: bag `i` of the file
/// describes video `i` and inherits its label, split and event kinds.
pub fn attach_imported(manifest: &DatasetManifest, bags: Vec<FeatureBag>) -> Result<BTreeMap<Split, FeatureSet>> {
    if bags.len() != manifest.videos.len() {
        return Err(Error::Config(format!(
            "imported file holds {} bags but the manifest lists {} videos",
            bags.len(),
            manifest.videos.len()
        )));
    }
    let mut out: BTreeMap<Split, FeatureSet> = BTreeMap::new();
    for (mut bag, entry) in bags.into_iter().zip(&manifest.videos) {
        let meta = BagMeta::for_range(entry, 0, usize::MAX);
        bag.id = meta.id.clone();
        let set = out.entry(entry.split).or_default();
        set.bags.push(bag);
        set.meta.push(meta);
    }
    Ok(out)
}

/// Scores every bag with the model's segment scorer. Rows are marked
/// corrupted by ground-truth event overlap.
pub fn score_set(model: &Model, set: &FeatureSet) -> Result<ScoreTable> {
    if let Some(b) = set.bags.iter().find(|b| b.dim() != model.head.in_dim()) {
        return Err(Error::Shape(format!(
            "bag {} has dim {}, model expects {}",
            b.id,
            b.dim(),
            model.head.in_dim()
        )));
    }
    let rows = set
        .bags
        .iter()
        .zip(&set.meta)
        .map(|(b, m)| ScoreRow::new(m.id.clone(), m.corrupted, model.head.score_bag(b)?, m.kinds.clone()))
        .collect::<Result<Vec<_>>>()?;
    ScoreTable::new(rows)
}

/// Energy-baseline rows for one video: segment scores are negated minimum
/// frame scores so that higher means more anomalous.
pub fn energy_rows(video: &Video, entry: &ManifestEntry, geometry: BagGeometry, config: &EnergyConfig) -> Result<Vec<ScoreRow>> {
    video_segment_scores(video, geometry, config)?
        .into_iter()
        .map(|(start, segs)| {
            let meta = BagMeta::for_range(entry, start, start + geometry.bag_len);
            ScoreRow::new(meta.id, meta.corrupted, segs, meta.kinds)
        })
        .collect()
}

/// Energy-baseline table over the manifest videos accepted by `select`.
pub fn energy_table(
    manifest_path: &Path,
    select: impl Fn(&ManifestEntry) -> bool,
    geometry: BagGeometry,
    config: &EnergyConfig,
) -> Result<ScoreTable> {
    config.validate()?;
    let manifest = DatasetManifest::load(manifest_path)?;
    let mut rows = Vec::new();
    for entry in manifest.videos.iter().filter(|e| select(e)) {
        let video = read_video(DatasetManifest::resolve(manifest_path, entry))?.resized(FRAME_SIDE, FRAME_SIDE)?;
        rows.extend(energy_rows(&video, entry, geometry, config)?);
    }
    ScoreTable::new(rows)
}

/// Persisted output of threshold tuning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdReport {
    pub version: u32,
    pub threshold: f64,
    pub achieved_fpr: f64,
    pub target_fpr: f64,
    pub granularity: Granularity,
    pub n_clean: usize,
}

impl ThresholdReport {
    pub fn new(r: &ThresholdResult, n_clean: usize) -> Self {
        Self {
            version: 1,
            threshold: r.t,
            achieved_fpr: r.achieved_fpr,
            target_fpr: r.target_fpr,
            granularity: r.granularity,
            n_clean,
        }
    }

    pub fn result(&self) -> ThresholdResult {
        ThresholdResult {
            t: self.threshold,
            achieved_fpr: self.achieved_fpr,
            target_fpr: self.target_fpr,
            granularity: self.granularity,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(text).map_err(|e| Error::Format(format!("threshold report: {e}")))?;
        if r.version != 1 {
            return Err(Error::Format(format!("unsupported threshold report version {}", r.version)));
        }
        if !r.threshold.is_finite() {
            return Err(Error::Format("threshold must be finite".into()));
        }
        Ok(r)
    }
}

/// Writes `metrics.csv`, `roc.csv` and `per_kind.csv` into `dir`.
pub fn write_report(dir: impl AsRef<Path>, report: &MetricsReport) -> Result<()> {
    let dir = dir.as_ref();
    write_bytes(dir.join("metrics.csv"), report.metrics_csv().as_bytes())?;
    write_bytes(dir.join("roc.csv"), report.roc_csv().as_bytes())?;
    write_bytes(dir.join("per_kind.csv"), report.per_kind_csv().as_bytes())
}
