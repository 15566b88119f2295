//! Adagrad and Adam, balanced batch sampling, and the epoch loop with
//! validation-based model selection.
//!
//! Random streams derived from the training seed: `[0]` initializes the
//! model, `[1]` drives batch sampling and dropout. A step draws the batch
//! first, then the dropout masks bag by bag in batch order.

use std::fmt::Write as _;
use std::io::Cursor;
use std::path::Path;
use std::time::Instant;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{decode_checkpoint, encode_checkpoint};
use crate::error::{Error, Result};
use crate::eval::{roc_auc, tune_threshold, Granularity, ScoreRow, ScoreTable, DEFAULT_TARGET_FPR};
use crate::features::FeatureBag;
use crate::formats::{read_bytes, read_magic, read_u32, write_bytes, FORMAT_VERSION};
use crate::model::{
    attention_backward, deep_mil_backward, DropoutMask, GradientSet, LabeledBag, Model, ModelKind, PairMasks,
    DEFAULT_ATTENTION_DIM, DEFAULT_DROPOUT, DEFAULT_HIDDEN, DEFAULT_LAMBDA,
};
use crate::rng::{derive_seed, SplitMix64};

pub const ADAGRAD_LR: f64 = 0.1;
pub const ADAGRAD_EPS: f64 = 1e-8;
pub const ADAM_LR: f64 = 1e-3;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const DEFAULT_PAIRS: usize = 30;
pub const DEFAULT_EPOCHS: usize = 30;
pub const STATE_MAGIC: &[u8; 4] = b"WMRS";

fn check_shapes(params: &[&mut [f64]], grads: &GradientSet, slots: &[Vec<f64>]) -> Result<()> {
    let ok = params.len() == grads.tensors.len()
        && params.len() == slots.len()
        && params
            .iter()
            .zip(&grads.tensors)
            .zip(slots)
            .all(|((p, g), s)| p.len() == g.len() && p.len() == s.len());
    if ok {
        Ok(())
    } else {
        Err(Error::Shape("parameter, gradient and optimizer shapes differ".into()))
    }
}

fn zeros_like(params: &[&[f64]]) -> Vec<Vec<f64>> {
    params.iter().map(|t| vec![0.0; t.len()]).collect()
}

/// Elementwise `G += g²; θ −= lr·g/(√G + eps)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdagradState {
    pub lr: f64,
    pub eps: f64,
    pub accum: Vec<Vec<f64>>,
}

impl AdagradState {
    pub fn new(params: &[&[f64]], lr: f64, eps: f64) -> Self {
        Self {
            lr,
            eps,
            accum: zeros_like(params),
        }
    }

    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &GradientSet) -> Result<()> {
        check_shapes(params, grads, &self.accum)?;
        for ((p, g), acc) in params.iter_mut().zip(&grads.tensors).zip(&mut self.accum) {
            for ((theta, &gi), a) in p.iter_mut().zip(g).zip(acc.iter_mut()) {
                *a += gi * gi;
                *theta -= self.lr * gi / (a.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Bias-corrected Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &[&[f64]], lr: f64) -> Self {
        Self {
            lr,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            t: 0,
            m: zeros_like(params),
            v: zeros_like(params),
        }
    }

    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &GradientSet) -> Result<()> {
        check_shapes(params, grads, &self.m)?;
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, g), m), v) in params.iter_mut().zip(&grads.tensors).zip(&mut self.m).zip(&mut self.v) {
            for (((theta, &gi), mi), vi) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *theta -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adagrad,
    Adam,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Optimizer {
    Adagrad(AdagradState),
    Adam(AdamState),
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, model: &Model, lr: f64) -> Self {
        let params = model.tensors();
        match kind {
            OptimizerKind::Adagrad => Optimizer::Adagrad(AdagradState::new(&params, lr, ADAGRAD_EPS)),
            OptimizerKind::Adam => Optimizer::Adam(AdamState::new(&params, lr)),
        }
    }

    pub fn step(&mut self, model: &mut Model, grads: &GradientSet) -> Result<()> {
        let mut params = model.tensors_mut();
        match self {
            Optimizer::Adagrad(s) => s.step(&mut params, grads),
            Optimizer::Adam(s) => s.step(&mut params, grads),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionMetric {
    #[default]
    ValAuc,
    ValRecallAtFpr,
}

fn default_version() -> u32 {
    1
}
fn default_epochs() -> usize {
    DEFAULT_EPOCHS
}
fn default_pairs() -> usize {
    DEFAULT_PAIRS
}
fn default_lambda() -> f64 {
    DEFAULT_LAMBDA
}
fn default_dropout() -> f64 {
    DEFAULT_DROPOUT
}
fn default_hidden() -> Vec<usize> {
    DEFAULT_HIDDEN.to_vec()
}
fn default_attention_dim() -> usize {
    DEFAULT_ATTENTION_DIM
}
fn default_target_fpr() -> f64 {
    DEFAULT_TARGET_FPR
}
fn default_model() -> ModelKind {
    ModelKind::DeepMil
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_version")]
    pub version: u32,
    #[serde(default = "default_model")]
    pub model: ModelKind,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    /// Corrupted bags per batch; each is paired with one normal bag.
    #[serde(default = "default_pairs")]
    pub pairs_per_batch: usize,
    /// Defaults to one pass over the corrupted training bags in expectation.
    #[serde(default)]
    pub batches_per_epoch: Option<usize>,
    /// Defaults to Adagrad for Deep MIL and Adam for attention.
    #[serde(default)]
    pub optimizer: Option<OptimizerKind>,
    #[serde(default)]
    pub lr: Option<f64>,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_attention_dim")]
    pub attention_dim: usize,
    #[serde(default)]
    pub selection: SelectionMetric,
    /// FPR target for the validation Recall@FPR column.
    #[serde(default = "default_target_fpr")]
    pub val_target_fpr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            version: 1,
            model: ModelKind::DeepMil,
            epochs: DEFAULT_EPOCHS,
            seed: 0,
            pairs_per_batch: DEFAULT_PAIRS,
            batches_per_epoch: None,
            optimizer: None,
            lr: None,
            lambda: DEFAULT_LAMBDA,
            dropout: DEFAULT_DROPOUT,
            hidden: DEFAULT_HIDDEN.to_vec(),
            attention_dim: DEFAULT_ATTENTION_DIM,
            selection: SelectionMetric::ValAuc,
            val_target_fpr: DEFAULT_TARGET_FPR,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.version != 1 {
            return bad(format!("unsupported train config version {}", self.version));
        }
        if self.pairs_per_batch == 0 {
            return bad("pairs_per_batch must be positive".into());
        }
        if self.batches_per_epoch == Some(0) {
            return bad("batches_per_epoch must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda {} must be finite and nonnegative", self.lambda));
        }
        if let Some(lr) = self.lr {
            if !(lr >= 0.0 && lr.is_finite()) {
                return bad(format!("learning rate {lr} must be finite and nonnegative"));
            }
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden layer sizes must be nonempty and positive".into());
        }
        if self.model == ModelKind::Attention && self.attention_dim == 0 {
            return bad("attention_dim must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.val_target_fpr) {
            return bad(format!("val_target_fpr {} outside [0, 1]", self.val_target_fpr));
        }
        Ok(())
    }

    pub fn optimizer_kind(&self) -> OptimizerKind {
        self.optimizer.unwrap_or(match self.model {
            ModelKind::DeepMil => OptimizerKind::Adagrad,
            ModelKind::Attention => OptimizerKind::Adam,
        })
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr.unwrap_or(match self.optimizer_kind() {
            OptimizerKind::Adagrad => ADAGRAD_LR,
            OptimizerKind::Adam => ADAM_LR,
        })
    }

    pub fn init_model(&self, in_dim: usize) -> Result<Model> {
        let att = (self.model == ModelKind::Attention).then_some(self.attention_dim);
        Model::init(in_dim, &self.hidden, att, &mut SplitMix64::new(derive_seed(self.seed, &[0])))
    }
}

fn draw(pool: usize, k: usize, rng: &mut SplitMix64) -> Vec<usize> {
    if pool >= k {
        // Partial Fisher-Yates: the first k slots are a uniform k-permutation.
        let mut idx: Vec<usize> = (0..pool).collect();
        for i in 0..k {
            let j = i + rng.below((pool - i) as u64) as usize;
            idx.swap(i, j);
        }
        idx.truncate(k);
        idx
    } else {
        (0..k).map(|_| rng.below(pool as u64) as usize).collect()
    }
}

/// `k` (corrupted, normal) index pairs, corrupted drawn first, paired by
/// draw order. Pools of at least `k` are sampled without replacement.
pub fn sample_batch(n_corrupted: usize, n_normal: usize, k: usize, rng: &mut SplitMix64) -> Result<Vec<(usize, usize)>> {
    if n_corrupted == 0 || n_normal == 0 {
        return Err(Error::Config(format!(
            "need bags of both labels, have {n_corrupted} corrupted and {n_normal} normal"
        )));
    }
    let a = draw(n_corrupted, k, rng);
    let n = draw(n_normal, k, rng);
    Ok(a.into_iter().zip(n).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_auc: f64,
    pub val_recall_at_fpr: f64,
    pub wall_ms: u64,
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from("epoch,mean_loss,val_auc,val_recall_at_fpr,wall_ms\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{:?},{:?},{:?},{}",
            r.epoch, r.mean_loss, r.val_auc, r.val_recall_at_fpr, r.wall_ms
        );
    }
    s
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub epochs_done: usize,
    pub rng: SplitMix64,
    pub model: Model,
    pub optimizer: Optimizer,
    pub best: Model,
    pub best_epoch: usize,
    pub best_metric: f64,
    pub log: Vec<LogRow>,
}

impl TrainState {
    /// `"WMRS" | u32 version | u32 epochs_done | u64 rng | u32 best_epoch |
    /// f64 best_metric | u8 optimizer | u64 adam_t | u64 n_slots | f64 × n_slots |
    /// u64 len + WMCK current | u64 len + WMCK best | u32 n_rows | rows`.
    pub fn encode(&self) -> Vec<u8> {
        let mut o = Vec::new();
        o.extend_from_slice(STATE_MAGIC);
        o.write_u32::<LittleEndian>(FORMAT_VERSION).unwrap();
        o.write_u32::<LittleEndian>(self.epochs_done as u32).unwrap();
        o.write_u64::<LittleEndian>(self.rng.state()).unwrap();
        o.write_u32::<LittleEndian>(self.best_epoch as u32).unwrap();
        o.write_f64::<LittleEndian>(self.best_metric).unwrap();
        let (tag, t, slots): (u8, u64, Vec<f64>) = match &self.optimizer {
            Optimizer::Adagrad(s) => (0, 0, s.accum.iter().flatten().copied().collect()),
            Optimizer::Adam(s) => (1, s.t, s.m.iter().chain(&s.v).flatten().copied().collect()),
        };
        o.push(tag);
        o.write_u64::<LittleEndian>(t).unwrap();
        let lr = match &self.optimizer {
            Optimizer::Adagrad(s) => s.lr,
            Optimizer::Adam(s) => s.lr,
        };
        o.write_f64::<LittleEndian>(lr).unwrap();
        o.write_u64::<LittleEndian>(slots.len() as u64).unwrap();
        for v in slots {
            o.write_f64::<LittleEndian>(v).unwrap();
        }
        for m in [&self.model, &self.best] {
            let b = encode_checkpoint(m);
            o.write_u64::<LittleEndian>(b.len() as u64).unwrap();
            o.extend_from_slice(&b);
        }
        o.write_u32::<LittleEndian>(self.log.len() as u32).unwrap();
        for r in &self.log {
            o.write_u32::<LittleEndian>(r.epoch as u32).unwrap();
            o.write_f64::<LittleEndian>(r.mean_loss).unwrap();
            o.write_f64::<LittleEndian>(r.val_auc).unwrap();
            o.write_f64::<LittleEndian>(r.val_recall_at_fpr).unwrap();
            o.write_u64::<LittleEndian>(r.wall_ms).unwrap();
        }
        o
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let short = |_| Error::Corrupt("truncated training state".into());
        let mut cur = Cursor::new(bytes);
        read_magic(&mut cur, STATE_MAGIC)?;
        if read_u32(&mut cur)? != FORMAT_VERSION {
            return Err(Error::Format("unsupported training state version".into()));
        }
        let epochs_done = read_u32(&mut cur)? as usize;
        let rng = SplitMix64::new(cur.read_u64::<LittleEndian>().map_err(short)?);
        let best_epoch = read_u32(&mut cur)? as usize;
        let best_metric = cur.read_f64::<LittleEndian>().map_err(short)?;
        let tag = cur.read_u8().map_err(short)?;
        let t = cur.read_u64::<LittleEndian>().map_err(short)?;
        let lr = cur.read_f64::<LittleEndian>().map_err(short)?;
        let n_slots = cur.read_u64::<LittleEndian>().map_err(short)? as usize;
        if n_slots > bytes.len() / 8 {
            return Err(Error::Corrupt("optimizer state larger than file".into()));
        }
        let slots = (0..n_slots)
            .map(|_| cur.read_f64::<LittleEndian>().map_err(short))
            .collect::<Result<Vec<_>>>()?;
        let mut models = Vec::with_capacity(2);
        for _ in 0..2 {
            let len = cur.read_u64::<LittleEndian>().map_err(short)? as usize;
            let pos = cur.position() as usize;
            let end = pos.checked_add(len).filter(|&e| e <= bytes.len()).ok_or_else(|| Error::Corrupt("truncated training state".into()))?;
            models.push(decode_checkpoint(&bytes[pos..end])?);
            cur.set_position(end as u64);
        }
        let best = models.pop().unwrap();
        let model = models.pop().unwrap();
        let n_rows = read_u32(&mut cur)? as usize;
        let mut log = Vec::with_capacity(n_rows.min(bytes.len()));
        for _ in 0..n_rows {
            log.push(LogRow {
                epoch: read_u32(&mut cur)? as usize,
                mean_loss: cur.read_f64::<LittleEndian>().map_err(short)?,
                val_auc: cur.read_f64::<LittleEndian>().map_err(short)?,
                val_recall_at_fpr: cur.read_f64::<LittleEndian>().map_err(short)?,
                wall_ms: cur.read_u64::<LittleEndian>().map_err(short)?,
            });
        }
        if cur.position() as usize != bytes.len() {
            return Err(Error::Corrupt("trailing bytes after training state".into()));
        }
        let shapes = model.tensors();
        let n_params = model.n_params();
        let unflatten = |flat: &[f64]| -> Vec<Vec<f64>> {
            let mut off = 0;
            shapes
                .iter()
                .map(|t| {
                    let v = flat[off..off + t.len()].to_vec();
                    off += t.len();
                    v
                })
                .collect()
        };
        let optimizer = match tag {
            0 if n_slots == n_params => Optimizer::Adagrad(AdagradState {
                lr,
                eps: ADAGRAD_EPS,
                accum: unflatten(&slots),
            }),
            1 if n_slots == 2 * n_params => {
                let mut s = AdamState::new(&shapes, lr);
                s.t = t;
                s.m = unflatten(&slots[..n_params]);
                s.v = unflatten(&slots[n_params..]);
                Optimizer::Adam(s)
            }
            _ => return Err(Error::Corrupt("optimizer state does not match the model".into())),
        };
        Ok(Self {
            epochs_done,
            rng,
            model,
            optimizer,
            best,
            best_epoch,
            best_metric,
            log,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_bytes(path, &self.encode())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&read_bytes(path)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub best: Model,
    /// 0 means no epoch ran and `best` is the initialization.
    pub best_epoch: usize,
    pub best_metric: f64,
    pub last: Model,
    pub log: Vec<LogRow>,
}

/// Validation AUC and Recall@FPR of a model; bags are scored by their
/// maximum segment score.
pub fn validation_metrics(model: &Model, val: &[LabeledBag<'_>], target_fpr: f64) -> Result<(f64, f64)> {
    let rows = val
        .iter()
        .map(|(bag, label)| ScoreRow::new(bag.id.clone(), label.is_corrupted(), model.head.score_bag(bag)?, vec![]))
        .collect::<Result<Vec<_>>>()?;
    let table = ScoreTable::new(rows)?;
    let (_, auc) = roc_auc(&table)?;
    let th = tune_threshold(&table.clean_scores(Granularity::Bag), target_fpr, Granularity::Bag)?;
    let recall = crate::eval::recall_at_threshold(&table, th.t)?.recall;
    Ok((auc, recall))
}

pub struct Trainer<'a> {
    config: TrainConfig,
    corrupted: Vec<&'a FeatureBag>,
    normal: Vec<&'a FeatureBag>,
    val: Vec<LabeledBag<'a>>,
    state: TrainState,
}

fn split_labels<'a>(bags: &[LabeledBag<'a>]) -> (Vec<&'a FeatureBag>, Vec<&'a FeatureBag>) {
    let mut c = Vec::new();
    let mut n = Vec::new();
    for &(b, l) in bags {
        if l.is_corrupted() {
            c.push(b);
        } else {
            n.push(b);
        }
    }
    (c, n)
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, train: &[LabeledBag<'a>], val: &[LabeledBag<'a>]) -> Result<Self> {
        config.validate()?;
        let in_dim = check_splits(train, val)?;
        let model = config.init_model(in_dim)?;
        let optimizer = Optimizer::new(config.optimizer_kind(), &model, config.learning_rate());
        let state = TrainState {
            epochs_done: 0,
            rng: SplitMix64::new(derive_seed(config.seed, &[1])),
            best: model.clone(),
            model,
            optimizer,
            best_epoch: 0,
            best_metric: f64::NEG_INFINITY,
            log: Vec::new(),
        };
        Self::resume(config, train, val, state)
    }

    pub fn resume(config: TrainConfig, train: &[LabeledBag<'a>], val: &[LabeledBag<'a>], state: TrainState) -> Result<Self> {
        config.validate()?;
        let in_dim = check_splits(train, val)?;
        if state.model.head.in_dim() != in_dim || state.model.kind() != config.model {
            return Err(Error::Config("training state does not match the data or model kind".into()));
        }
        let (corrupted, normal) = split_labels(train);
        Ok(Self {
            config,
            corrupted,
            normal,
            val: val.to_vec(),
            state,
        })
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.config
            .batches_per_epoch
            .unwrap_or_else(|| self.corrupted.len().div_ceil(self.config.pairs_per_batch))
    }

    fn step(&mut self) -> Result<f64> {
        let k = self.config.pairs_per_batch;
        let rate = self.config.dropout;
        let st = &mut self.state;
        let pairs = sample_batch(self.corrupted.len(), self.normal.len(), k, &mut st.rng)?;
        let (loss, grads) = match self.config.model {
            ModelKind::DeepMil => {
                let bags: Vec<_> = pairs.iter().map(|&(a, n)| (self.corrupted[a], self.normal[n])).collect();
                let masks: Vec<PairMasks> = bags
                    .iter()
                    .map(|(a, n)| {
                        let ma = DropoutMask::sample_bag(&st.model.head, rate, a.n_segments(), &mut st.rng);
                        let mn = DropoutMask::sample_bag(&st.model.head, rate, n.n_segments(), &mut st.rng);
                        (ma, mn)
                    })
                    .collect();
                deep_mil_backward(&bags, &st.model, self.config.lambda, Some(&masks))?
            }
            ModelKind::Attention => {
                use crate::manifest::WeakLabel;
                let bags: Vec<LabeledBag<'_>> = pairs
                    .iter()
                    .flat_map(|&(a, n)| [(self.corrupted[a], WeakLabel::Corrupted), (self.normal[n], WeakLabel::Normal)])
                    .collect();
                let masks: Vec<Vec<DropoutMask>> = bags
                    .iter()
                    .map(|(b, _)| DropoutMask::sample_bag(&st.model.head, rate, b.n_segments(), &mut st.rng))
                    .collect();
                attention_backward(&bags, &st.model, self.config.lambda, Some(&masks))?
            }
        };
        if !loss.is_finite() || grads.tensors.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::Divergence(format!(
                "non-finite loss {loss} in epoch {}",
                st.epochs_done + 1
            )));
        }
        st.optimizer.step(&mut st.model, &grads)?;
        if st.model.tensors().iter().any(|t| t.iter().any(|v| !v.is_finite())) {
            return Err(Error::Divergence(format!(
                "non-finite parameters after a step in epoch {}",
                st.epochs_done + 1
            )));
        }
        Ok(loss)
    }

    pub fn run_epoch(&mut self) -> Result<()> {
        let started = Instant::now();
        let n = self.batches_per_epoch();
        let mut total = 0.0;
        for _ in 0..n {
            total += self.step()?;
        }
        let (auc, recall) = validation_metrics(&self.state.model, &self.val, self.config.val_target_fpr).map_err(|e| match e {
            Error::Numeric(m) => Error::Divergence(m),
            other => other,
        })?;
        let st = &mut self.state;
        st.epochs_done += 1;
        let metric = match self.config.selection {
            SelectionMetric::ValAuc => auc,
            SelectionMetric::ValRecallAtFpr => recall,
        };
        if metric > st.best_metric {
            st.best_metric = metric;
            st.best_epoch = st.epochs_done;
            st.best = st.model.clone();
        }
        st.log.push(LogRow {
            epoch: st.epochs_done,
            mean_loss: total / n as f64,
            val_auc: auc,
            val_recall_at_fpr: recall,
            wall_ms: started.elapsed().as_millis() as u64,
        });
        Ok(())
    }

    /// Runs epochs until `config.epochs` have completed in total.
    pub fn run(&mut self) -> Result<()> {
        while self.state.epochs_done < self.config.epochs {
            self.run_epoch()?;
        }
        Ok(())
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    pub fn into_outcome(self) -> TrainOutcome {
        let s = self.state;
        TrainOutcome {
            best: s.best,
            best_epoch: s.best_epoch,
            best_metric: s.best_metric,
            last: s.model,
            log: s.log,
        }
    }
}

fn check_splits(train: &[LabeledBag<'_>], val: &[LabeledBag<'_>]) -> Result<usize> {
    for (name, set) in [("train", train), ("validation", val)] {
        let c = set.iter().filter(|(_, l)| l.is_corrupted()).count();
        if c == 0 || c == set.len() {
            return Err(Error::Config(format!("{name} split needs bags of both labels")));
        }
    }
    let dim = train[0].0.dim();
    if let Some((b, _)) = train.iter().chain(val).find(|(b, _)| b.dim() != dim) {
        return Err(Error::Shape(format!("bag {} has dim {}, expected {dim}", b.id, b.dim())));
    }
    Ok(dim)
}

/// Trains from scratch and returns the validation-selected model.
pub fn train(config: &TrainConfig, train: &[LabeledBag<'_>], val: &[LabeledBag<'_>]) -> Result<TrainOutcome> {
    let mut t = Trainer::new(config.clone(), train, val)?;
    t.run()?;
    Ok(t.into_outcome())
}
