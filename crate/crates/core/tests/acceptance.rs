//! Acceptance criteria 1–10. Each test writes one `criterion N [PASS|FAIL]`
//! line straight to stderr so it shows up even when output is captured.

use std::io::Write as _;
use std::sync::OnceLock;
use std::time::Instant;

use weakmil::energy::EnergyConfig;
use weakmil::eval::{recall_at_threshold, roc_auc, tune_threshold, Granularity, MetricsReport, ScoreRow, ScoreTable};
use weakmil::model::{
    argmax, attention_backward, attention_objective, attention_pool, batch_objective, deep_mil_backward,
    deep_mil_objective, ranking_hinge_loss, AttentionHead, DropoutMask, FcHead, LabeledBag, Model, PairMasks,
};
use weakmil::pipeline::{energy_rows, score_set, FeatureSet};
use weakmil::synth::{plan_dataset, CorruptionKind, GeneratorConfig};
use weakmil::{encode_checkpoint, features, train, BagGeometry, FeatureBag, Split, SplitMix64, TrainConfig, WeakLabel};

fn report(n: u32, name: &str, pass: bool, detail: &str) {
    let tag = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {n:>2} [{tag}] {name}: {detail}");
}

fn random_bag(id: &str, k: usize, dim: usize, rng: &mut SplitMix64) -> FeatureBag {
    FeatureBag::new(id, k, dim, (0..k * dim).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
}

// ---------------------------------------------------------------- criterion 1

const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;
const KINK_GUARD: f64 = 1e-3;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Central differences of `f` with respect to every parameter of `model`.
fn numeric_grad(model: &Model, f: impl Fn(&Model) -> f64) -> Vec<f64> {
    let mut m = model.clone();
    let sizes: Vec<usize> = model.tensors().iter().map(|t| t.len()).collect();
    let mut out = Vec::new();
    for (ti, &len) in sizes.iter().enumerate() {
        for i in 0..len {
            let orig = m.tensors()[ti][i];
            m.tensors_mut()[ti][i] = orig + FD_STEP;
            let up = f(&m);
            m.tensors_mut()[ti][i] = orig - FD_STEP;
            let down = f(&m);
            m.tensors_mut()[ti][i] = orig;
            out.push((up - down) / (2.0 * FD_STEP));
        }
    }
    out
}

/// True when some ReLU pre-activation, bag maximum or hinge sits within the
/// guard band of its kink, where finite differences straddle two pieces.
fn near_kink(head: &FcHead, bags: &[(&FeatureBag, Option<&[DropoutMask]>)], ranking: bool) -> bool {
    let mut maxima = Vec::new();
    for (bag, mask) in bags {
        let t = head.trace_bag(bag, *mask).unwrap();
        if t.pre.iter().flatten().any(|z| z.abs() < KINK_GUARD) {
            return true;
        }
        let (i, top) = argmax(&t.scores).unwrap();
        if ranking && t.scores.iter().enumerate().any(|(j, s)| j != i && top - s < KINK_GUARD) {
            return true;
        }
        maxima.push(top);
    }
    ranking && maxima.chunks(2).any(|p| (1.0 - p[0] + p[1]).abs() < KINK_GUARD)
}

#[test]
fn criterion_01_gradient_exactness() {
    let started = Instant::now();
    let mut rng = SplitMix64::new(0x6EAD);
    let (mut worst, mut redraws, mut failures) = (0.0f64, 0usize, 0usize);
    let mut done = 0;
    while done < 100 {
        let in_dim = 1 + rng.below(16) as usize;
        let hidden = vec![1 + rng.below(8) as usize, 1 + rng.below(8) as usize];
        let attention = done % 2 == 1;
        let l = 1 + rng.below(8) as usize;
        let mut model = Model::init(in_dim, &hidden, attention.then_some(l), &mut rng).unwrap();
        for t in model.tensors_mut() {
            for v in t.iter_mut() {
                *v += rng.uniform(-0.3, 0.3);
            }
        }
        let lambda = [0.0, 1e-3, 0.1][rng.below(3) as usize];
        let n_bags = 1 + rng.below(3) as usize;
        let bags: Vec<FeatureBag> = (0..2 * n_bags)
            .map(|i| random_bag(&format!("b{i}"), 1 + rng.below(5) as usize, in_dim, &mut rng))
            .collect();
        let masks: Option<Vec<Vec<DropoutMask>>> = (rng.below(2) == 0).then(|| {
            bags.iter()
                .map(|b| DropoutMask::sample_bag(&model.head, 0.5, b.n_segments(), &mut rng))
                .collect()
        });
        let with_masks: Vec<(&FeatureBag, Option<&[DropoutMask]>)> = bags
            .iter()
            .enumerate()
            .map(|(i, b)| (b, masks.as_ref().map(|m| m[i].as_slice())))
            .collect();
        if near_kink(&model.head, &with_masks, !attention) {
            redraws += 1;
            continue;
        }
        let (analytic, numeric) = if attention {
            let labeled: Vec<LabeledBag<'_>> = bags
                .iter()
                .enumerate()
                .map(|(i, b)| (b, WeakLabel::from(i % 2 == 0)))
                .collect();
            let m = masks.as_deref();
            let (_, g) = attention_backward(&labeled, &model, lambda, m).unwrap();
            (g.flat(), numeric_grad(&model, |mm| attention_objective(&labeled, mm, lambda, m).unwrap()))
        } else {
            let pairs: Vec<(&FeatureBag, &FeatureBag)> = bags.chunks(2).map(|p| (&p[0], &p[1])).collect();
            let pm: Option<Vec<PairMasks>> = masks
                .as_ref()
                .map(|m| m.chunks(2).map(|p| (p[0].clone(), p[1].clone())).collect());
            let pm = pm.as_deref();
            let (_, g) = deep_mil_backward(&pairs, &model, lambda, pm).unwrap();
            (g.flat(), numeric_grad(&model, |mm| deep_mil_objective(&pairs, mm, lambda, pm).unwrap()))
        };
        let e = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| rel_err(*a, *n))
            .fold(0.0, f64::max);
        worst = worst.max(e);
        if e > FD_TOL {
            failures += 1;
        }
        done += 1;
    }
    let secs = started.elapsed().as_secs_f64();
    let pass = failures == 0 && secs <= 30.0;
    report(
        1,
        "gradient exactness",
        pass,
        &format!("100 configs (50 deep MIL, 50 attention), worst rel err {worst:.2e} (tol {FD_TOL:e}), {failures} over tol, {redraws} near-kink redraws, {secs:.2}s (limit 30s)"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 2

#[test]
fn criterion_02_hinge_table() {
    let mut ok = ranking_hinge_loss(&[1.0, 0.2], &[0.0]).unwrap() == 0.0;
    for s in [0.0, 0.25, 0.5, 0.9, 1.0] {
        ok &= ranking_hinge_loss(&[s, s / 3.0], &[s]).unwrap() == 1.0;
    }
    ok &= ranking_hinge_loss(&[0.3], &[0.8, 0.1]).unwrap() == 1.5;

    // Head 4→12→4→1: 48 + 48 + 4 = 100 weights of 0.1. With output bias −1000
    // the zero bag scores exactly 0; the bag of 10000s scores exactly 1.
    let mut head = FcHead::zeros(&[4, 12, 4, 1]).unwrap();
    for l in &mut head.layers {
        l.weights.iter_mut().for_each(|w| *w = 0.1);
    }
    head.layers[2].bias[0] = -1000.0;
    let n_weights: usize = head.layers.iter().map(|l| l.weights.len()).sum();
    let hot = FeatureBag::new("hot", 2, 4, vec![10000.0; 8]).unwrap();
    let cold = FeatureBag::new("cold", 3, 4, vec![0.0; 12]).unwrap();
    ok &= n_weights == 100;
    ok &= batch_objective(&[(&hot, &cold), (&hot, &cold)], &head, 0.0).unwrap() == 0.0;
    let reg = batch_objective(&[(&hot, &cold)], &head, 1.0).unwrap();
    ok &= (reg - 1.0).abs() <= 1e-12;

    // Shifted identity head: f(x) = σ(x) for x > −100, so the pair (σ⁻¹(0.3), σ⁻¹(0.8)) has HL = 1.5.
    let mut id = FcHead::zeros(&[1, 1, 1, 1]).unwrap();
    for l in &mut id.layers {
        l.weights[0] = 1.0;
    }
    id.layers[0].bias[0] = 100.0;
    id.layers[2].bias[0] = -100.0;
    let logit = |p: f64| (p / (1.0 - p)).ln();
    let a = FeatureBag::new("a", 1, 1, vec![logit(0.3)]).unwrap();
    let n = FeatureBag::new("n", 1, 1, vec![logit(0.8)]).unwrap();
    let single = batch_objective(&[(&a, &n)], &id, 0.0).unwrap();
    ok &= (single - 1.5).abs() <= 1e-14;

    report(
        2,
        "hinge and batch objective table",
        ok,
        &format!("hinge 0/1/1.5 exact; separated batch 0; regularizer {reg}; single pair {single}"),
    );
    assert!(ok);
}

// ---------------------------------------------------------------- criterion 3

// Two-pass softmax without max shifting and explicit index loops.
fn naive_pool(hs: &[Vec<f64>], v: &[Vec<f64>], w: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut logits = vec![0.0; hs.len()];
    for (k, h) in hs.iter().enumerate() {
        for r in 0..w.len() {
            let mut s = 0.0;
            for j in 0..h.len() {
                s += v[r][j] * h[j];
            }
            logits[k] += w[r] * s.tanh();
        }
    }
    let mut denom = 0.0;
    for &x in &logits {
        denom += x.exp();
    }
    let a: Vec<f64> = logits.iter().map(|x| x.exp() / denom).collect();
    let mut z = vec![0.0; hs[0].len()];
    for (k, h) in hs.iter().enumerate() {
        for j in 0..h.len() {
            z[j] += a[k] * h[j];
        }
    }
    (z, a)
}

#[test]
fn criterion_03_attention_pooling() {
    let mut rng = SplitMix64::new(33);
    let mut worst_sum = 0.0f64;
    let mut worst_oracle = 0.0f64;
    let mut ok = true;
    for _ in 0..100 {
        let k = 1 + rng.below(8) as usize;
        let m = 1 + rng.below(16) as usize;
        let l = 1 + rng.below(8) as usize;
        let att = AttentionHead::glorot(l, m, &mut rng);
        let hs: Vec<Vec<f64>> = (0..k).map(|_| (0..m).map(|_| rng.uniform(0.0, 2.0)).collect()).collect();
        let flat: Vec<f64> = hs.iter().flatten().copied().collect();
        let (z, a) = attention_pool(&flat, k, &att).unwrap();
        let v: Vec<Vec<f64>> = att.v.chunks(m).map(|r| r.to_vec()).collect();
        let (zo, ao) = naive_pool(&hs, &v, &att.w);
        worst_sum = worst_sum.max((a.iter().sum::<f64>() - 1.0).abs());
        for (x, y) in z.iter().zip(&zo).chain(a.iter().zip(&ao)) {
            worst_oracle = worst_oracle.max((x - y).abs());
        }
        ok &= a.iter().all(|&x| x > 0.0);

        let same: Vec<f64> = (0..k).flat_map(|_| hs[0].iter().copied()).collect();
        let (_, a_sym) = attention_pool(&same, k, &att).unwrap();
        ok &= a_sym.iter().all(|x| (x - 1.0 / k as f64).abs() <= 1e-12);

        let (z1, a1) = attention_pool(&hs[0], 1, &att).unwrap();
        ok &= a1 == vec![1.0] && z1 == hs[0];
    }
    ok &= worst_sum <= 1e-12 && worst_oracle <= 1e-12;
    report(
        3,
        "attention pooling",
        ok,
        &format!("100 cases, max |Σa−1| {worst_sum:.1e}, max oracle diff {worst_oracle:.1e} (tol 1e-12), K=1 and symmetry exact"),
    );
    assert!(ok);
}

// ---------------------------------------------------------------- criterion 4

fn brute_threshold(clean: &[f64], target: f64) -> f64 {
    let n = clean.len() as f64;
    clean
        .iter()
        .copied()
        .filter(|&t| clean.iter().filter(|&&s| s > t).count() as f64 / n <= target)
        .fold(f64::INFINITY, f64::min)
}

#[test]
fn criterion_04_threshold_tuner() {
    let started = Instant::now();
    let mut rng = SplitMix64::new(44);
    let targets = [0.0, 1e-3, 1e-2, 0.1, 0.5];
    let mut mismatches = 0;
    for i in 0..1000 {
        let n = 1 + rng.below(300) as usize;
        let levels = 2 + rng.below(100);
        let clean: Vec<f64> = (0..n).map(|_| rng.below(levels) as f64 / levels as f64).collect();
        let target = targets[i % targets.len()];
        let r = tune_threshold(&clean, target, Granularity::Bag).unwrap();
        if r.t != brute_threshold(&clean, target) || r.achieved_fpr > target {
            mismatches += 1;
        }
    }
    let ten: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
    let example = tune_threshold(&ten, 0.10, Granularity::Bag).unwrap();
    let secs = started.elapsed().as_secs_f64();
    let pass = mismatches == 0 && example.t == 0.9 && secs <= 10.0;
    report(
        4,
        "threshold tuner vs brute force",
        pass,
        &format!("1000 instances, {mismatches} mismatches; 10-bag example t = {}; {secs:.2}s (limit 10s)", example.t),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 5

#[test]
fn criterion_05_auc_vs_mann_whitney() {
    let mut rng = SplitMix64::new(55);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = 2 + rng.below(199) as usize;
        let levels = 1 + rng.below(40);
        let mut rows: Vec<(f64, bool)> = (0..n).map(|_| (rng.below(levels) as f64, rng.below(2) == 0)).collect();
        rows[0].1 = true;
        rows[1].1 = false;
        let table = ScoreTable::new(
            rows.iter()
                .enumerate()
                .map(|(i, &(s, c))| ScoreRow::new(format!("{i}"), c, vec![s], vec![]).unwrap())
                .collect(),
        )
        .unwrap();
        let auc = roc_auc(&table).unwrap().1;
        let (mut num, mut np, mut nn) = (0.0, 0.0, 0.0);
        for &(p, cp) in &rows {
            if !cp {
                nn += 1.0;
                continue;
            }
            np += 1.0;
            for &(q, cq) in &rows {
                if !cq {
                    num += if p > q { 1.0 } else if p == q { 0.5 } else { 0.0 };
                }
            }
        }
        worst = worst.max((auc - num / (np * nn)).abs());
    }
    let pass = worst <= 1e-12;
    report(5, "AUC vs Mann-Whitney", pass, &format!("100 tables, max diff {worst:.1e} (tol 1e-12)"));
    assert!(pass);
}

// ------------------------------------------------------------ criteria 6, 8, 9

const GEOMETRY: BagGeometry = BagGeometry { bag_len: 512, seg_len: 16 };
const E2E_TARGET_FPR: f64 = 0.01;

struct Sets {
    train: FeatureSet,
    val: FeatureSet,
    test: FeatureSet,
    energy_off: Vec<ScoreRow>,
    energy_on: Vec<ScoreRow>,
}

/// Renders every planned video in memory and describes it; test videos are
/// also scored by both energy baselines.
fn build_sets(config: &GeneratorConfig, with_energy: bool) -> Sets {
    let mut sets = Sets {
        train: FeatureSet::default(),
        val: FeatureSet::default(),
        test: FeatureSet::default(),
        energy_off: vec![],
        energy_on: vec![],
    };
    let off = EnergyConfig::default();
    let on = EnergyConfig { normalize: true, ..off };
    for plan in plan_dataset(config).unwrap() {
        let video = plan.render().unwrap();
        let entry = &plan.entry;
        if with_energy && entry.split == Split::Test {
            sets.energy_off.extend(energy_rows(&video, entry, GEOMETRY, &off).unwrap());
            sets.energy_on.extend(energy_rows(&video, entry, GEOMETRY, &on).unwrap());
        }
        let target = match entry.split {
            Split::Train => &mut sets.train,
            Split::Validation => &mut sets.val,
            Split::Test => &mut sets.test,
        };
        target.push_video(video, entry, GEOMETRY).unwrap();
    }
    sets
}

struct E2E {
    secs: f64,
    n: [usize; 3],
    report: MetricsReport,
    checkpoint: Vec<u8>,
    energy_off: MetricsReport,
    energy_on: MetricsReport,
    best_epoch: usize,
}

/// Quickstart-scale run: 100+100 training, 50+50 validation and 100+100 test
/// videos of 512 frames, default training settings, seed 7.
fn run_e2e() -> E2E {
    let started = Instant::now();
    let gen = GeneratorConfig {
        n_corrupted: 250,
        n_normal: 250,
        validation_fraction: 0.2,
        test_fraction: 0.4,
        seed: 7,
        ..GeneratorConfig::default()
    };
    let sets = build_sets(&gen, true);
    let cfg = TrainConfig { seed: 7, ..TrainConfig::default() };
    let out = train(&cfg, &sets.train.labeled(), &sets.val.labeled()).unwrap();
    let table = score_set(&out.best, &sets.test).unwrap();
    let th = tune_threshold(&table.clean_scores(Granularity::Bag), E2E_TARGET_FPR, Granularity::Bag).unwrap();
    let report = MetricsReport::build("deep-mil", &table, th).unwrap();
    let secs = started.elapsed().as_secs_f64();

    let energy = |rows: Vec<ScoreRow>, tag: &str| {
        let t = ScoreTable::new(rows).unwrap();
        let th = tune_threshold(&t.clean_scores(Granularity::Bag), E2E_TARGET_FPR, Granularity::Bag).unwrap();
        MetricsReport::build(tag, &t, th).unwrap()
    };
    E2E {
        secs,
        n: [sets.train.len(), sets.val.len(), sets.test.len()],
        report,
        checkpoint: encode_checkpoint(&out.best),
        energy_off: energy(sets.energy_off, "energy"),
        energy_on: energy(sets.energy_on, "energy"),
        best_epoch: out.best_epoch,
    }
}

fn e2e() -> &'static E2E {
    static RUN: OnceLock<E2E> = OnceLock::new();
    RUN.get_or_init(run_e2e)
}

#[test]
fn criterion_06_end_to_end() {
    let r = e2e();
    let m = &r.report;
    let pass = m.auc >= 0.95 && m.recall_at_fpr >= 0.5 && m.threshold.achieved_fpr <= E2E_TARGET_FPR && r.secs <= 300.0;
    report(
        6,
        "end-to-end desk-scale run",
        pass,
        &format!(
            "bags train/val/test {:?}; test AUC {:.4} (>= 0.95); recall {:.3} (>= 0.5) at FPR {:.4} (<= 0.01); best epoch {}; {:.1}s (limit 300s)",
            r.n, m.auc, m.recall_at_fpr, m.threshold.achieved_fpr, r.best_epoch, r.secs
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_08_baseline_ordering() {
    let r = e2e();
    let deep = r.report.recall_at_fpr;
    let (off, on) = (r.energy_off.recall_at_fpr, r.energy_on.recall_at_fpr);
    let pass = deep > off && deep > on;
    report(
        8,
        "deep MIL beats energy baseline",
        pass,
        &format!(
            "recall at target FPR {E2E_TARGET_FPR}: deep MIL {deep:.3} (FPR {:.3}), energy {off:.3} (FPR {:.3}), normalized energy {on:.3} (FPR {:.3})",
            r.report.threshold.achieved_fpr, r.energy_off.threshold.achieved_fpr, r.energy_on.threshold.achieved_fpr
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_09_determinism() {
    let first = e2e();
    let second = run_e2e();
    let same_ckpt = first.checkpoint == second.checkpoint;
    let same_metrics = first.report.metrics_csv() == second.report.metrics_csv();
    let same_roc = first.report.roc_csv() == second.report.roc_csv();
    let pass = same_ckpt && same_metrics && same_roc;
    report(
        9,
        "determinism",
        pass,
        &format!(
            "checkpoint identical: {same_ckpt} ({} bytes), metrics.csv identical: {same_metrics}, roc.csv identical: {same_roc}",
            first.checkpoint.len()
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 7

#[test]
fn criterion_07_novel_corruption() {
    let held_out = [CorruptionKind::HalfScreen, CorruptionKind::BottomSplit];
    let train_gen = GeneratorConfig {
        n_corrupted: 150,
        n_normal: 150,
        validation_fraction: 1.0 / 3.0,
        test_fraction: 0.0,
        seed: 71,
        kinds: CorruptionKind::ALL.into_iter().filter(|k| !held_out.contains(k)).collect(),
        ..GeneratorConfig::default()
    };
    let test_gen = GeneratorConfig {
        n_corrupted: 50,
        n_normal: 200,
        validation_fraction: 0.0,
        test_fraction: 1.0,
        seed: 72,
        kinds: vec![CorruptionKind::HalfScreen],
        ..GeneratorConfig::default()
    };
    let train_sets = build_sets(&train_gen, false);
    let no_held_out = train_sets
        .train
        .meta
        .iter()
        .chain(&train_sets.val.meta)
        .all(|m| m.kinds.iter().all(|k| !held_out.contains(k)));
    let test = build_sets(&test_gen, false).test;
    let cfg = TrainConfig { seed: 7, ..TrainConfig::default() };
    let out = train(&cfg, &train_sets.train.labeled(), &train_sets.val.labeled()).unwrap();
    let table = score_set(&out.best, &test).unwrap();
    let n_clean = table.n_clean();
    let th = tune_threshold(&table.clean_scores(Granularity::Bag), 0.0, Granularity::Bag).unwrap();
    let rec = recall_at_threshold(&table, th.t).unwrap();
    let half: Vec<&ScoreRow> = table.rows.iter().filter(|r| r.kinds.contains(&CorruptionKind::HalfScreen)).collect();
    let flagged = half.iter().filter(|r| r.score > th.t).count();
    let frac = flagged as f64 / half.len() as f64;
    let pass = no_held_out && n_clean == 200 && rec.false_positives == 0 && frac >= 0.8;
    report(
        7,
        "novel corruption (HalfScreen held out)",
        pass,
        &format!(
            "held-out kinds absent from training: {no_held_out}; HalfScreen flagged {flagged}/{} = {frac:.3} (>= 0.8); false positives {}/{n_clean} clean bags",
            half.len(),
            rec.false_positives
        ),
    );
    assert!(pass);
}

// --------------------------------------------------------------- criterion 10

#[test]
fn criterion_10_throughput() {
    let gen = GeneratorConfig { n_corrupted: 1, n_normal: 1, ..GeneratorConfig::default() };
    let plan = &plan_dataset(&gen).unwrap()[0];
    let video = plan.render().unwrap();
    let model = Model::init(features::BUILTIN_DIM, &[512, 32], None, &mut SplitMix64::new(1)).unwrap();
    let started = Instant::now();
    let bags = features::extract_video_features(video, "bench", GEOMETRY).unwrap();
    let mut top = 0.0f64;
    for b in &bags {
        top = top.max(model.head.score_bag(b).unwrap().into_iter().fold(0.0, f64::max));
    }
    let secs = started.elapsed().as_secs_f64();
    let fps = GEOMETRY.bag_len as f64 * bags.len() as f64 / secs;
    let per_day = fps * 86_400.0;
    report(
        10,
        "throughput (informational)",
        true,
        &format!(
            "{fps:.0} frames/s of 112x112 video, features + FC forward, one core ({per_day:.2e} frames/day; bar 25 frames/s {})",
            if fps >= 25.0 { "met" } else { "not met" }
        ),
    );
    assert!(top.is_finite());
}
