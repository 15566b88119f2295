//! Segment scoring head, the MIL ranking objective, attention pooling, and
//! their exact gradients.
//!
//! The scoring function is a fully connected network with ReLU hidden layers
//! and a single sigmoid output, `in_dim → 512 → 32 → 1` by default. Two
//! training objectives share it:
//!
//! * Deep MIL: for each (corrupted, normal) bag pair the hinge
//!   `max(0, 1 − max_a f + max_n f)`, averaged over pairs, plus
//!   `λ·Σ‖W‖²_F` over the weight matrices.
//! * Attention MIL: the last hidden layer's outputs `h_k` are pooled with
//!   `a = softmax_k(wᵀ tanh(V h_k))`, `z = Σ a_k h_k`, and the output layer
//!   applied to `z` gives a bag probability trained with binary cross-entropy.
//!
//! Subgradient conventions: the hinge passes no gradient when it is exactly
//! zero, a bag maximum routes gradient only to its first maximal segment, and
//! ReLU has derivative 0 at 0.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureBag;
use crate::manifest::WeakLabel;
use crate::rng::SplitMix64;

pub const DEFAULT_HIDDEN: [usize; 2] = [512, 32];
pub const DEFAULT_LAMBDA: f64 = 1e-3;
pub const DEFAULT_DROPOUT: f64 = 0.6;
pub const DEFAULT_ATTENTION_DIM: usize = 16;
const BCE_CLAMP: f64 = 1e-12;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// A fully connected layer; `weights` is `n_out × n_in`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub n_in: usize,
    pub n_out: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Self {
            n_in,
            n_out,
            weights: vec![0.0; n_in * n_out],
            bias: vec![0.0; n_out],
        }
    }

    /// Glorot-uniform weights drawn row-major, zero biases.
    pub fn glorot(n_in: usize, n_out: usize, rng: &mut SplitMix64) -> Self {
        let limit = (6.0 / (n_in + n_out) as f64).sqrt();
        let weights = (0..n_in * n_out).map(|_| rng.uniform(-limit, limit)).collect();
        Self {
            n_in,
            n_out,
            weights,
            bias: vec![0.0; n_out],
        }
    }

    pub fn row(&self, o: usize) -> &[f64] {
        &self.weights[o * self.n_in..(o + 1) * self.n_in]
    }

    /// `out[s] = W·x[s] + b` for `n` inputs stored contiguously.
    pub fn forward_batch(&self, xs: &[f64], n: usize, out: &mut [f64]) {
        debug_assert_eq!(xs.len(), n * self.n_in);
        debug_assert_eq!(out.len(), n * self.n_out);
        const TILE: usize = 8;
        for s0 in (0..n).step_by(TILE) {
            let s1 = (s0 + TILE).min(n);
            for o in 0..self.n_out {
                let w = self.row(o);
                for s in s0..s1 {
                    out[s * self.n_out + o] = dot(w, &xs[s * self.n_in..(s + 1) * self.n_in]) + self.bias[o];
                }
            }
        }
    }
}

/// Per-unit multipliers for the hidden activations of one segment:
/// 0 for dropped units, `1/(1 − rate)` for kept ones.
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutMask {
    pub layers: Vec<Vec<f64>>,
}

impl DropoutMask {
    pub fn sample(head: &FcHead, rate: f64, rng: &mut SplitMix64) -> Self {
        let keep = 1.0 / (1.0 - rate);
        let layers = head.layers[..head.layers.len() - 1]
            .iter()
            .map(|l| {
                (0..l.n_out)
                    .map(|_| if rng.next_f64() < rate { 0.0 } else { keep })
                    .collect()
            })
            .collect();
        Self { layers }
    }

    /// One mask per segment, drawn in segment order.
    pub fn sample_bag(head: &FcHead, rate: f64, n_segments: usize, rng: &mut SplitMix64) -> Vec<Self> {
        (0..n_segments).map(|_| Self::sample(head, rate, rng)).collect()
    }
}

/// The segment scoring network.
#[derive(Clone, Debug, PartialEq)]
pub struct FcHead {
    pub layers: Vec<Dense>,
}

/// Hidden-layer values of every segment of one bag.
#[derive(Clone, Debug)]
pub struct BagTrace {
    pub n: usize,
    /// Pre-activations of each hidden layer, `n × width`.
    pub pre: Vec<Vec<f64>>,
    /// `relu(pre) · mask` of each hidden layer, `n × width`.
    pub act: Vec<Vec<f64>>,
    /// Sigmoid outputs, one per segment.
    pub scores: Vec<f64>,
}

impl FcHead {
    /// Layer sizes `dims[0] → dims[1] → … → 1` (the last entry must be 1).
    pub fn zeros(dims: &[usize]) -> Result<Self> {
        Self::check_dims(dims)?;
        Ok(Self {
            layers: dims.windows(2).map(|d| Dense::zeros(d[0], d[1])).collect(),
        })
    }

    pub fn glorot(dims: &[usize], rng: &mut SplitMix64) -> Result<Self> {
        Self::check_dims(dims)?;
        Ok(Self {
            layers: dims.windows(2).map(|d| Dense::glorot(d[0], d[1], rng)).collect(),
        })
    }

    fn check_dims(dims: &[usize]) -> Result<()> {
        if dims.len() < 2 || dims.contains(&0) || *dims.last().unwrap() != 1 {
            return Err(Error::Config(format!(
                "head dims {dims:?} must be nonzero and end in 1"
            )));
        }
        Ok(())
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.layers[0].n_in];
        d.extend(self.layers.iter().map(|l| l.n_out));
        d
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].n_in
    }

    pub fn output_layer(&self) -> &Dense {
        self.layers.last().unwrap()
    }

    /// Width of the last hidden layer, or the input width for a single layer.
    pub fn embed_dim(&self) -> usize {
        self.output_layer().n_in
    }

    fn n_hidden(&self) -> usize {
        self.layers.len() - 1
    }

    /// Runs every segment of a bag through the head.
    pub fn trace_bag(&self, bag: &FeatureBag, masks: Option<&[DropoutMask]>) -> Result<BagTrace> {
        if bag.dim() != self.in_dim() {
            return Err(Error::Shape(format!(
                "bag {} has dim {}, head expects {}",
                bag.id,
                bag.dim(),
                self.in_dim()
            )));
        }
        if let Some(m) = masks {
            if m.len() != bag.n_segments() {
                return Err(Error::Shape(format!(
                    "{} dropout masks for {} segments",
                    m.len(),
                    bag.n_segments()
                )));
            }
        }
        let n = bag.n_segments();
        let mut pre = Vec::with_capacity(self.n_hidden());
        let mut act: Vec<Vec<f64>> = Vec::with_capacity(self.n_hidden());
        for (l, layer) in self.layers[..self.n_hidden()].iter().enumerate() {
            let input = if l == 0 { bag.values() } else { &act[l - 1] };
            let mut p = vec![0.0; n * layer.n_out];
            layer.forward_batch(input, n, &mut p);
            let mut a: Vec<f64> = p.iter().map(|&v| v.max(0.0)).collect();
            if let Some(masks) = masks {
                for (s, row) in a.chunks_exact_mut(layer.n_out).enumerate() {
                    for (v, m) in row.iter_mut().zip(&masks[s].layers[l]) {
                        *v *= m;
                    }
                }
            }
            pre.push(p);
            act.push(a);
        }
        let last = self.output_layer();
        let input = act.last().map(Vec::as_slice).unwrap_or(bag.values());
        let mut logits = vec![0.0; n];
        last.forward_batch(input, n, &mut logits);
        let scores = logits.into_iter().map(sigmoid).collect();
        Ok(BagTrace { n, pre, act, scores })
    }

    /// Inference-mode scores of every segment.
    pub fn score_bag(&self, bag: &FeatureBag) -> Result<Vec<f64>> {
        Ok(self.trace_bag(bag, None)?.scores)
    }

    /// Accumulates parameter gradients for one segment given `delta`, the
    /// gradient with respect to layer `top`'s pre-activation.
    #[allow(clippy::too_many_arguments)]
    fn backprop_segment(
        &self,
        top: usize,
        mut delta: Vec<f64>,
        x: &[f64],
        trace: &BagTrace,
        seg: usize,
        masks: Option<&[DropoutMask]>,
        grads: &mut GradientSet,
    ) {
        for l in (0..=top).rev() {
            let layer = &self.layers[l];
            let input = if l == 0 {
                x
            } else {
                let w = self.layers[l - 1].n_out;
                &trace.act[l - 1][seg * w..(seg + 1) * w]
            };
            {
                let gw = &mut grads.tensors[2 * l];
                for (o, &d) in delta.iter().enumerate() {
                    if d != 0.0 {
                        axpy(d, input, &mut gw[o * layer.n_in..(o + 1) * layer.n_in]);
                    }
                }
            }
            for (gb, &d) in grads.tensors[2 * l + 1].iter_mut().zip(&delta) {
                *gb += d;
            }
            if l == 0 {
                break;
            }
            let mut below = vec![0.0; layer.n_in];
            for (o, &d) in delta.iter().enumerate() {
                if d != 0.0 {
                    axpy(d, layer.row(o), &mut below);
                }
            }
            let w = layer.n_in;
            let pre = &trace.pre[l - 1][seg * w..(seg + 1) * w];
            for (i, b) in below.iter_mut().enumerate() {
                let m = masks.map_or(1.0, |m| m[seg].layers[l - 1][i]);
                *b = if pre[i] > 0.0 { *b * m } else { 0.0 };
            }
            delta = below;
        }
    }

    fn weight_norm_sq(&self) -> f64 {
        self.layers.iter().map(|l| l.weights.iter().map(|w| w * w).sum::<f64>()).sum()
    }
}

/// Score of one segment: `σ(W_L · relu(… relu(W_1 x + b_1) …) + b_L)`, with
/// inverted dropout on the hidden activations when a mask is supplied.
pub fn fc_forward(head: &FcHead, x: &[f64], mask: Option<&DropoutMask>) -> Result<f64> {
    if x.len() != head.in_dim() {
        return Err(Error::Shape(format!(
            "input has dim {}, head expects {}",
            x.len(),
            head.in_dim()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite input feature".into()));
    }
    let mut h = x.to_vec();
    for (l, layer) in head.layers.iter().enumerate() {
        let mut out = vec![0.0; layer.n_out];
        layer.forward_batch(&h, 1, &mut out);
        if l + 1 < head.layers.len() {
            for (i, v) in out.iter_mut().enumerate() {
                *v = v.max(0.0) * mask.map_or(1.0, |m| m.layers[l][i]);
            }
        }
        h = out;
    }
    Ok(sigmoid(h[0]))
}

/// Attention pooling parameters: `V` is `L × M`, `w` has length `L`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionHead {
    pub l: usize,
    pub m: usize,
    pub v: Vec<f64>,
    pub w: Vec<f64>,
}

impl AttentionHead {
    pub fn glorot(l: usize, m: usize, rng: &mut SplitMix64) -> Self {
        let lim_v = (6.0 / (l + m) as f64).sqrt();
        let v = (0..l * m).map(|_| rng.uniform(-lim_v, lim_v)).collect();
        let lim_w = (6.0 / (l + 1) as f64).sqrt();
        let w = (0..l).map(|_| rng.uniform(-lim_w, lim_w)).collect();
        Self { l, m, v, w }
    }

    fn tanh_proj(&self, h: &[f64]) -> Vec<f64> {
        (0..self.l)
            .map(|r| dot(&self.v[r * self.m..(r + 1) * self.m], h).tanh())
            .collect()
    }
}

/// Softmax attention over instance embeddings `hs` (`K × M`, row-major).
///
/// Returns the pooled vector `z` and the weights `a`. Logits are shifted by
/// their maximum before exponentiation.
pub fn attention_pool(hs: &[f64], k: usize, att: &AttentionHead) -> Result<(Vec<f64>, Vec<f64>)> {
    if k == 0 {
        return Err(Error::EmptyInput("attention over an empty bag".into()));
    }
    if hs.len() != k * att.m {
        return Err(Error::Shape(format!(
            "{} values for {k} instances of dim {}",
            hs.len(),
            att.m
        )));
    }
    let logits: Vec<f64> = hs
        .chunks_exact(att.m)
        .map(|h| dot(&att.w, &att.tanh_proj(h)))
        .collect();
    let a = softmax(&logits);
    let mut z = vec![0.0; att.m];
    for (h, &ak) in hs.chunks_exact(att.m).zip(&a) {
        axpy(ak, h, &mut z);
    }
    Ok((z, a))
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&e| (e - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `max(0, 1 − max(scores_a) + max(scores_n))`.
pub fn ranking_hinge_loss(scores_a: &[f64], scores_n: &[f64]) -> Result<f64> {
    let (_, max_a) = argmax(scores_a)?;
    let (_, max_n) = argmax(scores_n)?;
    Ok((1.0 - max_a + max_n).max(0.0))
}

/// First index of the maximum.
pub fn argmax(xs: &[f64]) -> Result<(usize, f64)> {
    let mut it = xs.iter().copied().enumerate();
    let first = it
        .next()
        .ok_or_else(|| Error::EmptyInput("max over an empty bag".into()))?;
    Ok(it.fold(first, |best, (i, v)| if v > best.1 { (i, v) } else { best }))
}

/// Binary cross-entropy of `σ(clf · z)` against the bag label.
pub fn attention_bag_loss(z: &[f64], label: WeakLabel, clf: &Dense) -> Result<f64> {
    if clf.n_out != 1 || z.len() != clf.n_in {
        return Err(Error::Shape(format!(
            "classifier {}→{} cannot score a pooled vector of dim {}",
            clf.n_in,
            clf.n_out,
            z.len()
        )));
    }
    let p = sigmoid(dot(&clf.weights, z) + clf.bias[0]);
    Ok(bce(p, label.as_f64()))
}

fn bce(p: f64, y: f64) -> f64 {
    let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// One tensor per parameter tensor of a [`Model`], in [`Model::tensors`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet {
    pub tensors: Vec<Vec<f64>>,
}

impl GradientSet {
    pub fn zeros_like(model: &Model) -> Self {
        Self {
            tensors: model.tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tensors.iter().flatten().copied().collect()
    }

    pub fn is_zero(&self) -> bool {
        self.tensors.iter().flatten().all(|&g| g == 0.0)
    }
}

/// Which MIL training objective a model uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    DeepMil,
    Attention,
}

/// The scoring head plus, for attention MIL, the pooling parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub head: FcHead,
    pub attention: Option<AttentionHead>,
}

impl Model {
    pub fn deep_mil(head: FcHead) -> Self {
        Self { head, attention: None }
    }

    /// Glorot-initialized model: head `in_dim → hidden… → 1`, optionally with
    /// an attention block of width `attention_dim` over the last hidden layer.
    pub fn init(in_dim: usize, hidden: &[usize], attention_dim: Option<usize>, rng: &mut SplitMix64) -> Result<Self> {
        let mut dims = vec![in_dim];
        dims.extend_from_slice(hidden);
        dims.push(1);
        let head = FcHead::glorot(&dims, rng)?;
        let attention = match attention_dim {
            None => None,
            Some(l) => {
                if hidden.is_empty() || l == 0 {
                    return Err(Error::Config("attention needs a hidden layer and L > 0".into()));
                }
                Some(AttentionHead::glorot(l, head.embed_dim(), rng))
            }
        };
        Ok(Self { head, attention })
    }

    pub fn kind(&self) -> ModelKind {
        if self.attention.is_some() {
            ModelKind::Attention
        } else {
            ModelKind::DeepMil
        }
    }

    /// Parameter tensors: per layer weights then bias, then `V` and `w` of
    /// the attention block when present.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut t: Vec<&[f64]> = Vec::new();
        for l in &self.head.layers {
            t.push(&l.weights);
            t.push(&l.bias);
        }
        if let Some(a) = &self.attention {
            t.push(&a.v);
            t.push(&a.w);
        }
        t
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut t: Vec<&mut [f64]> = Vec::new();
        for l in &mut self.head.layers {
            t.push(&mut l.weights);
            t.push(&mut l.bias);
        }
        if let Some(a) = &mut self.attention {
            t.push(&mut a.v);
            t.push(&mut a.w);
        }
        t
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn add_weight_decay(&self, lambda: f64, grads: &mut GradientSet) {
        if lambda == 0.0 {
            return;
        }
        for (l, layer) in self.head.layers.iter().enumerate() {
            for (g, w) in grads.tensors[2 * l].iter_mut().zip(&layer.weights) {
                *g += 2.0 * lambda * w;
            }
        }
    }

    fn attention_head(&self) -> Result<&AttentionHead> {
        self.attention
            .as_ref()
            .ok_or_else(|| Error::Config("model has no attention block".into()))
    }

    /// Bag probability of the attention model, or the max segment score of a
    /// Deep MIL model.
    pub fn bag_probability(&self, bag: &FeatureBag) -> Result<f64> {
        let trace = self.head.trace_bag(bag, None)?;
        match &self.attention {
            None => Ok(argmax(&trace.scores)?.1),
            Some(att) => {
                let hs = trace.act.last().unwrap();
                let (z, _) = attention_pool(hs, trace.n, att)?;
                let clf = self.head.output_layer();
                Ok(sigmoid(dot(&clf.weights, &z) + clf.bias[0]))
            }
        }
    }
}

/// A (corrupted bag, normal bag) training pair.
pub type BagPair<'a> = (&'a FeatureBag, &'a FeatureBag);

/// Dropout masks for both bags of a pair.
pub type PairMasks = (Vec<DropoutMask>, Vec<DropoutMask>);

fn check_batch(n: usize) -> Result<()> {
    if n == 0 {
        Err(Error::EmptyInput("empty batch".into()))
    } else {
        Ok(())
    }
}

/// `(1/z)·Σ_j HL_j + λ·Σ‖W‖²_F` over the pairs, in inference mode.
pub fn batch_objective(pairs: &[BagPair<'_>], head: &FcHead, lambda: f64) -> Result<f64> {
    let model = Model::deep_mil(head.clone());
    Ok(deep_mil_step(pairs, &model, lambda, None, false)?.0)
}

/// The Deep MIL objective and its gradient. `masks`, when given, holds one
/// entry per pair and fixes the dropout pattern.
pub fn deep_mil_backward(
    pairs: &[BagPair<'_>],
    model: &Model,
    lambda: f64,
    masks: Option<&[PairMasks]>,
) -> Result<(f64, GradientSet)> {
    let (loss, grads) = deep_mil_step(pairs, model, lambda, masks, true)?;
    Ok((loss, grads.expect("gradients requested")))
}

/// The Deep MIL objective alone (used by finite-difference checks).
pub fn deep_mil_objective(pairs: &[BagPair<'_>], model: &Model, lambda: f64, masks: Option<&[PairMasks]>) -> Result<f64> {
    Ok(deep_mil_step(pairs, model, lambda, masks, false)?.0)
}

fn deep_mil_step(
    pairs: &[BagPair<'_>],
    model: &Model,
    lambda: f64,
    masks: Option<&[PairMasks]>,
    want_grad: bool,
) -> Result<(f64, Option<GradientSet>)> {
    check_batch(pairs.len())?;
    let head = &model.head;
    let z = pairs.len() as f64;
    let mut grads = want_grad.then(|| GradientSet::zeros_like(model));
    let mut hinge_sum = 0.0;
    for (j, (bag_a, bag_n)) in pairs.iter().enumerate() {
        let (mask_a, mask_n) = match masks {
            Some(m) => (Some(m[j].0.as_slice()), Some(m[j].1.as_slice())),
            None => (None, None),
        };
        let trace_a = head.trace_bag(bag_a, mask_a)?;
        let trace_n = head.trace_bag(bag_n, mask_n)?;
        let (ia, sa) = argmax(&trace_a.scores)?;
        let (in_, sn) = argmax(&trace_n.scores)?;
        let margin = 1.0 - sa + sn;
        if margin > 0.0 {
            hinge_sum += margin;
            if let Some(g) = grads.as_mut() {
                let top = head.layers.len() - 1;
                let da = -1.0 / z * sa * (1.0 - sa);
                let dn = 1.0 / z * sn * (1.0 - sn);
                head.backprop_segment(top, vec![da], bag_a.segment(ia), &trace_a, ia, mask_a, g);
                head.backprop_segment(top, vec![dn], bag_n.segment(in_), &trace_n, in_, mask_n, g);
            }
        }
    }
    let loss = hinge_sum / z + lambda * head.weight_norm_sq();
    if let Some(g) = grads.as_mut() {
        model.add_weight_decay(lambda, g);
    }
    Ok((loss, grads))
}

/// A bag with its weak label for attention training.
pub type LabeledBag<'a> = (&'a FeatureBag, WeakLabel);

/// Mean bag-level cross-entropy through attention pooling plus `λ·Σ‖W‖²_F`.
pub fn attention_objective(
    bags: &[LabeledBag<'_>],
    model: &Model,
    lambda: f64,
    masks: Option<&[Vec<DropoutMask>]>,
) -> Result<f64> {
    Ok(attention_step(bags, model, lambda, masks, false)?.0)
}

pub fn attention_backward(
    bags: &[LabeledBag<'_>],
    model: &Model,
    lambda: f64,
    masks: Option<&[Vec<DropoutMask>]>,
) -> Result<(f64, GradientSet)> {
    let (loss, grads) = attention_step(bags, model, lambda, masks, true)?;
    Ok((loss, grads.expect("gradients requested")))
}

fn attention_step(
    bags: &[LabeledBag<'_>],
    model: &Model,
    lambda: f64,
    masks: Option<&[Vec<DropoutMask>]>,
    want_grad: bool,
) -> Result<(f64, Option<GradientSet>)> {
    check_batch(bags.len())?;
    let att = model.attention_head()?;
    let head = &model.head;
    if head.layers.len() < 2 {
        return Err(Error::Config("attention needs at least one hidden layer".into()));
    }
    let clf = head.output_layer();
    let n_att_tensor = 2 * head.layers.len();
    let count = bags.len() as f64;
    let mut grads = want_grad.then(|| GradientSet::zeros_like(model));
    let mut bce_sum = 0.0;
    for (b, &(bag, label)) in bags.iter().enumerate() {
        let mask = masks.map(|m| m[b].as_slice());
        let trace = head.trace_bag(bag, mask)?;
        let hs = trace.act.last().unwrap();
        let (z, a) = attention_pool(hs, trace.n, att)?;
        let p = sigmoid(dot(&clf.weights, &z) + clf.bias[0]);
        let y = label.as_f64();
        bce_sum += bce(p, y);
        let Some(g) = grads.as_mut() else { continue };
        if !(BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&p) {
            continue;
        }
        let du = (p - y) / count;
        let top = head.layers.len() - 1;
        axpy(du, &z, &mut g.tensors[2 * top]);
        g.tensors[2 * top + 1][0] += du;
        let dz: Vec<f64> = clf.weights.iter().map(|w| du * w).collect();

        let m = att.m;
        let ga: Vec<f64> = hs.chunks_exact(m).map(|h| dot(&dz, h)).collect();
        let mean_ga: f64 = a.iter().zip(&ga).map(|(ak, gk)| ak * gk).sum();
        for k in 0..trace.n {
            let h = &hs[k * m..(k + 1) * m];
            let mut dh: Vec<f64> = dz.iter().map(|d| a[k] * d).collect();
            let de = a[k] * (ga[k] - mean_ga);
            if de != 0.0 {
                let t = att.tanh_proj(h);
                axpy(de, &t, &mut g.tensors[n_att_tensor + 1]);
                for (r, tr) in t.iter().enumerate() {
                    let dpre = de * att.w[r] * (1.0 - tr * tr);
                    let row = r * m..(r + 1) * m;
                    axpy(dpre, h, &mut g.tensors[n_att_tensor][row.clone()]);
                    axpy(dpre, &att.v[row], &mut dh);
                }
            }
            // Into the last hidden layer's pre-activation.
            let hl = head.layers.len() - 2;
            let pre = &trace.pre[hl][k * m..(k + 1) * m];
            for (i, d) in dh.iter_mut().enumerate() {
                let mk = mask.map_or(1.0, |mm| mm[k].layers[hl][i]);
                *d = if pre[i] > 0.0 { *d * mk } else { 0.0 };
            }
            if dh.iter().any(|&d| d != 0.0) {
                head.backprop_segment(hl, dh, bag.segment(k), &trace, k, mask, g);
            }
        }
    }
    let loss = bce_sum / count + lambda * head.weight_norm_sq();
    if let Some(g) = grads.as_mut() {
        model.add_weight_decay(lambda, g);
    }
    Ok((loss, grads))
}
