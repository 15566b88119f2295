//! Bag scoring, false-positive-constrained thresholds, Recall@FPR, ROC/AUC
//! and the per-corruption breakdown.
//!
//! A bag is flagged when its maximum segment score is strictly greater than
//! the threshold `t`. The threshold is the smallest observed clean score whose
//! false-positive rate `#{clean > t} / N` is at most the target.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::CorruptionKind;

pub const DEFAULT_TARGET_FPR: f64 = 0.001;

/// One scored bag. `corrupted` marks membership in the set of bags that
/// truly contain a corruption.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub bag_id: String,
    pub corrupted: bool,
    pub score: f64,
    pub segment_scores: Vec<f64>,
    #[serde(default)]
    pub kinds: Vec<CorruptionKind>,
}

impl ScoreRow {
    pub fn new(bag_id: impl Into<String>, corrupted: bool, segment_scores: Vec<f64>, kinds: Vec<CorruptionKind>) -> Result<Self> {
        let score = bag_score(&segment_scores)?;
        Ok(Self {
            bag_id: bag_id.into(),
            corrupted,
            score,
            segment_scores,
            kinds,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub rows: Vec<ScoreRow>,
}

impl ScoreTable {
    pub fn new(rows: Vec<ScoreRow>) -> Result<Self> {
        if let Some(r) = rows.iter().find(|r| !r.score.is_finite()) {
            return Err(Error::Numeric(format!("bag {} has a non-finite score", r.bag_id)));
        }
        Ok(Self { rows })
    }

    /// Scores of the clean units at the requested granularity.
    pub fn clean_scores(&self, granularity: Granularity) -> Vec<f64> {
        let clean = self.rows.iter().filter(|r| !r.corrupted);
        match granularity {
            Granularity::Bag => clean.map(|r| r.score).collect(),
            Granularity::Segment => clean.flat_map(|r| r.segment_scores.iter().copied()).collect(),
        }
    }

    pub fn n_corrupted(&self) -> usize {
        self.rows.iter().filter(|r| r.corrupted).count()
    }

    pub fn n_clean(&self) -> usize {
        self.rows.len() - self.n_corrupted()
    }
}

/// Maximum over segment scores.
pub fn bag_score(segment_scores: &[f64]) -> Result<f64> {
    segment_scores
        .iter()
        .copied()
        .reduce(f64::max)
        .ok_or_else(|| Error::EmptyInput("bag has no segments".into()))
}

/// `h_t(B) = 1` iff `max_i f(i) > t`.
pub fn flags(segment_scores: &[f64], t: f64) -> bool {
    segment_scores.iter().any(|&s| s > t)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    #[default]
    Bag,
    Segment,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdResult {
    pub t: f64,
    pub achieved_fpr: f64,
    pub target_fpr: f64,
    pub granularity: Granularity,
}

/// Smallest observed clean score `t` with `#{s > t} / N ≤ target_fpr`.
pub fn tune_threshold(clean: &[f64], target_fpr: f64, granularity: Granularity) -> Result<ThresholdResult> {
    if clean.is_empty() {
        return Err(Error::EmptyInput("no clean scores to tune on".into()));
    }
    if !(0.0..=1.0).contains(&target_fpr) {
        return Err(Error::Config(format!("target FPR {target_fpr} outside [0, 1]")));
    }
    if let Some(s) = clean.iter().find(|s| !s.is_finite()) {
        return Err(Error::Numeric(format!("non-finite clean score {s}")));
    }
    let mut sorted = clean.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mut i = 0;
    while i < n {
        let v = sorted[i];
        let mut j = i;
        while j < n && sorted[j] == v {
            j += 1;
        }
        let fpr = (n - j) as f64 / n as f64;
        if fpr <= target_fpr {
            return Ok(ThresholdResult {
                t: v,
                achieved_fpr: fpr,
                target_fpr,
                granularity,
            });
        }
        i = j;
    }
    unreachable!("the maximum score always has zero false positives")
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecallResult {
    pub recall: f64,
    /// Indices (into the table) of corrupted bags that were flagged.
    pub true_positives: Vec<usize>,
    /// Indices of clean bags that were not flagged.
    pub true_negatives: Vec<usize>,
    pub false_positives: usize,
    pub false_negatives: usize,
}

pub fn recall_at_threshold(table: &ScoreTable, t: f64) -> Result<RecallResult> {
    let n_pos = table.n_corrupted();
    if n_pos == 0 {
        return Err(Error::UndefinedMetric("recall needs at least one corrupted bag".into()));
    }
    let mut tp = Vec::new();
    let mut tn = Vec::new();
    let mut fp = 0;
    for (i, r) in table.rows.iter().enumerate() {
        match (r.corrupted, r.score > t) {
            (true, true) => tp.push(i),
            (false, false) => tn.push(i),
            (false, true) => fp += 1,
            (true, false) => {}
        }
    }
    Ok(RecallResult {
        recall: tp.len() as f64 / n_pos as f64,
        false_negatives: n_pos - tp.len(),
        true_positives: tp,
        true_negatives: tn,
        false_positives: fp,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Units strictly above this value are flagged.
    pub threshold: f64,
}

/// ROC points from sweeping every distinct score (descending) plus the
/// `(0,0)` and `(1,1)` endpoints, and the trapezoidal area under them.
pub fn roc_auc(table: &ScoreTable) -> Result<(Vec<RocPoint>, f64)> {
    let n_pos = table.n_corrupted();
    let n_neg = table.n_clean();
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("ROC needs both corrupted and clean bags".into()));
    }
    let mut scored: Vec<(f64, bool)> = table.rows.iter().map(|r| (r.score, r.corrupted)).collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (p, n) = (n_pos as f64, n_neg as f64);
    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < scored.len() {
        let v = scored[i].0;
        // Threshold v flags everything strictly above it: the counts so far.
        points.push(RocPoint {
            fpr: fp as f64 / n,
            tpr: tp as f64 / p,
            threshold: v,
        });
        while i < scored.len() && scored[i].0 == v {
            if scored[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
    }
    points.push(RocPoint {
        fpr: 1.0,
        tpr: 1.0,
        threshold: f64::NEG_INFINITY,
    });
    let auc = points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum();
    Ok((points, auc))
}

/// Recall within each corruption kind; a bag counts toward every kind it
/// contains. Kinds with no bags are absent from the map.
pub fn per_kind_report(table: &ScoreTable, t: f64) -> BTreeMap<CorruptionKind, KindRecall> {
    let mut out: BTreeMap<CorruptionKind, KindRecall> = BTreeMap::new();
    for r in table.rows.iter().filter(|r| r.corrupted) {
        for &k in &r.kinds {
            let e = out.entry(k).or_default();
            e.bags += 1;
            if r.score > t {
                e.detected += 1;
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KindRecall {
    pub bags: usize,
    pub detected: usize,
}

impl KindRecall {
    pub fn recall(&self) -> f64 {
        self.detected as f64 / self.bags as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub model: String,
    pub threshold: ThresholdResult,
    pub recall_at_fpr: f64,
    pub auc: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    pub per_kind: BTreeMap<CorruptionKind, KindRecall>,
    pub roc: Vec<RocPoint>,
}

impl MetricsReport {
    pub fn build(model: &str, table: &ScoreTable, threshold: ThresholdResult) -> Result<Self> {
        let rec = recall_at_threshold(table, threshold.t)?;
        let (roc, auc) = roc_auc(table)?;
        Ok(Self {
            model: model.to_string(),
            threshold,
            recall_at_fpr: rec.recall,
            auc,
            tp: rec.true_positives.len(),
            fp: rec.false_positives,
            tn: rec.true_negatives.len(),
            fn_: rec.false_negatives,
            per_kind: per_kind_report(table, threshold.t),
            roc,
        })
    }

    /// `metric,name,value` rows; `name` is the model tag.
    pub fn metrics_csv(&self) -> String {
        let mut s = String::from("metric,name,value\n");
        let m = &self.model;
        let mut row = |k: &str, v: String| {
            let _ = writeln!(s, "{k},{m},{v}");
        };
        row("recall_at_fpr", fmt_f64(self.recall_at_fpr));
        row("auc", fmt_f64(self.auc));
        row("threshold", fmt_f64(self.threshold.t));
        row("target_fpr", fmt_f64(self.threshold.target_fpr));
        row("achieved_fpr", fmt_f64(self.threshold.achieved_fpr));
        row("tp", self.tp.to_string());
        row("fp", self.fp.to_string());
        row("tn", self.tn.to_string());
        row("fn", self.fn_.to_string());
        for (k, r) in &self.per_kind {
            row(&format!("recall.{k}"), fmt_f64(r.recall()));
        }
        s
    }

    /// `fpr,tpr,threshold` rows in sweep order.
    pub fn roc_csv(&self) -> String {
        let mut s = String::from("fpr,tpr,threshold\n");
        for p in &self.roc {
            let _ = writeln!(s, "{},{},{}", fmt_f64(p.fpr), fmt_f64(p.tpr), fmt_f64(p.threshold));
        }
        s
    }

    pub fn per_kind_csv(&self) -> String {
        let mut s = String::from("kind,bags,detected,recall\n");
        for (k, r) in &self.per_kind {
            let _ = writeln!(s, "{k},{},{},{}", r.bags, r.detected, fmt_f64(r.recall()));
        }
        s
    }
}

/// Shortest round-trip decimal form; infinities as `inf`/`-inf`.
pub fn fmt_f64(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{v:?}")
    }
}
