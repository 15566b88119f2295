use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use weakmil::energy::EnergyConfig;
use weakmil::eval::{Granularity, ThresholdResult};
use weakmil::optim::log_csv;
use weakmil::pipeline::{
    attach_imported, energy_table, extract_manifest, score_set, write_report, FeatureSet, ThresholdReport,
};
use weakmil::{
    generate_dataset, load_checkpoint, read_features, save_checkpoint, tune_threshold, DatasetManifest, Error,
    GeneratorConfig, MetricsReport, Model, ModelKind, Result, Split, TrainConfig, TrainState, Trainer, WeakLabel,
};

use crate::{EnergyArgs, EvalArgs, Extractor, FeaturesArgs, SynthArgs, TrainArgs, TuneArgs};

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    weakmil::formats::write_bytes(path, text.as_bytes())
}

fn parse_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    if value.get("version").is_none() {
        return Err(Error::Config(format!("{}: missing `version` field", path.display())));
    }
    serde_json::from_value(value).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn check_fpr(target: f64) -> Result<()> {
    if (0.0..=1.0).contains(&target) {
        Ok(())
    } else {
        Err(Error::Config(format!("target FPR {target} outside [0, 1]")))
    }
}

pub fn synth(args: SynthArgs) -> Result<()> {
    let mut config: GeneratorConfig = parse_config(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    config.validate()?;
    let manifest = generate_dataset(&config, &args.out)?;
    println!("wrote {} videos to {}", manifest.videos.len(), args.out.display());
    Ok(())
}

pub fn features(args: FeaturesArgs) -> Result<()> {
    let geometry = args.geometry.geometry()?;
    let sets: BTreeMap<Split, FeatureSet> = match (args.extractor, &args.from) {
        (Extractor::Builtin, None) => extract_manifest(&args.manifest, geometry)?,
        (Extractor::Builtin, Some(_)) => {
            return Err(Error::Config("--from is only valid with --extractor import".into()));
        }
        (Extractor::Import, None) => return Err(Error::Config("--extractor import needs --from".into())),
        (Extractor::Import, Some(from)) => {
            let manifest = DatasetManifest::load(&args.manifest)?;
            let bags = read_features(from)?.into_bags("")?;
            attach_imported(&manifest, bags)?
        }
    };
    for (split, set) in &sets {
        set.save(&args.out, *split)?;
        println!("{split}: {} bags", set.len());
    }
    Ok(())
}

fn train_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut c = match &args.config {
        Some(p) => parse_config(p)?,
        None => TrainConfig::default(),
    };
    if let Some(m) = args.model {
        c.model = m.into();
    }
    if let Some(s) = args.seed {
        c.seed = s;
    }
    if let Some(e) = args.epochs {
        c.epochs = e;
    }
    if let Some(o) = args.optimizer {
        c.optimizer = Some(o.into());
    }
    if args.lr.is_some() {
        c.lr = args.lr;
    }
    if let Some(l) = args.lambda {
        c.lambda = l;
    }
    if let Some(d) = args.dropout {
        c.dropout = d;
    }
    if let Some(p) = args.pairs_per_batch {
        c.pairs_per_batch = p;
    }
    c.validate()?;
    Ok(c)
}

pub fn train(args: TrainArgs) -> Result<()> {
    let config = train_config(&args)?;
    let train_set = FeatureSet::load(&args.features, Split::Train)?;
    let val_set = FeatureSet::load(&args.features, Split::Validation)?;
    let (tr, va) = (train_set.labeled(), val_set.labeled());
    let mut trainer = match &args.resume {
        Some(p) => Trainer::resume(config.clone(), &tr, &va, TrainState::load(p)?)?,
        None => Trainer::new(config.clone(), &tr, &va)?,
    };
    trainer.run()?;
    let state = trainer.into_state();
    let out = &args.out;
    save_checkpoint(out.join("model.wmck"), &state.best)?;
    save_checkpoint(out.join("last.wmck"), &state.model)?;
    state.save(out.join("state.wmrs"))?;
    write_text(&out.join("train_log.csv"), &log_csv(&state.log))?;
    let mut cfg = serde_json::to_string_pretty(&config).expect("config serializes");
    cfg.push('\n');
    write_text(&out.join("train_config.json"), &cfg)?;
    println!(
        "best epoch {} (validation metric {:.4}) of {}",
        state.best_epoch, state.best_metric, state.epochs_done
    );
    Ok(())
}

fn model_tag(model: &Model) -> &'static str {
    match model.kind() {
        ModelKind::DeepMil => "deep-mil",
        ModelKind::Attention => "attention",
    }
}

fn normal_bags(set: FeatureSet) -> FeatureSet {
    let (bags, meta) = set
        .bags
        .into_iter()
        .zip(set.meta)
        .filter(|(_, m)| m.label == WeakLabel::Normal)
        .unzip();
    FeatureSet { bags, meta }
}

pub fn tune(args: TuneArgs) -> Result<()> {
    check_fpr(args.target_fpr)?;
    let model = load_checkpoint(&args.checkpoint)?;
    let clean = normal_bags(FeatureSet::load(&args.clean, args.split.into())?);
    let table = score_set(&model, &clean)?;
    let granularity: Granularity = args.granularity.into();
    let result = tune_threshold(&table.clean_scores(granularity), args.target_fpr, granularity)?;
    let report = ThresholdReport::new(&result, clean.len());
    write_text(&args.out, &report.to_json())?;
    println!(
        "threshold {:?} achieved FPR {} on {} clean bags",
        result.t,
        result.achieved_fpr,
        clean.len()
    );
    Ok(())
}

fn read_threshold(arg: &str) -> Result<ThresholdResult> {
    if let Ok(t) = arg.parse::<f64>() {
        if !t.is_finite() {
            return Err(Error::Config(format!("threshold {arg} must be finite")));
        }
        return Ok(ThresholdResult {
            t,
            achieved_fpr: f64::NAN,
            target_fpr: f64::NAN,
            granularity: Granularity::Bag,
        });
    }
    ThresholdReport::from_json(&read_text(Path::new(arg))?).map(|r| r.result())
}

/// Fills the FPR fields of a bare numeric threshold from the evaluated table.
fn complete(mut th: ThresholdResult, table: &weakmil::ScoreTable) -> ThresholdResult {
    if th.achieved_fpr.is_nan() {
        let clean = table.clean_scores(th.granularity);
        let fpr = clean.iter().filter(|&&s| s > th.t).count() as f64 / clean.len().max(1) as f64;
        th.achieved_fpr = fpr;
        th.target_fpr = fpr;
    }
    th
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let th = read_threshold(&args.threshold)?;
    let model = load_checkpoint(&args.checkpoint)?;
    let set = FeatureSet::load(&args.test, args.split.into())?;
    let table = score_set(&model, &set)?;
    let report = MetricsReport::build(model_tag(&model), &table, complete(th, &table))?;
    write_report(&args.out, &report)?;
    println!("recall {} auc {} at threshold {:?}", report.recall_at_fpr, report.auc, report.threshold.t);
    Ok(())
}

pub fn energy(args: EnergyArgs) -> Result<()> {
    check_fpr(args.target_fpr)?;
    let geometry = args.geometry.geometry()?;
    let config = EnergyConfig {
        patch: args.patch,
        k: args.k,
        window: args.window,
        normalize: args.normalize,
        crop: args.crop,
    };
    config.validate()?;
    let (tune_split, eval_split): (Split, Split) = (args.tune_split.into(), args.split.into());
    let clean = energy_table(
        &args.manifest,
        |e| e.split == tune_split && e.label == WeakLabel::Normal,
        geometry,
        &config,
    )?;
    let th = tune_threshold(&clean.clean_scores(Granularity::Bag), args.target_fpr, Granularity::Bag)?;
    let table = energy_table(&args.manifest, |e| e.split == eval_split, geometry, &config)?;
    let report = MetricsReport::build("energy", &table, th)?;
    write_report(&args.out, &report)?;
    println!("recall {} auc {} at threshold {:?}", report.recall_at_fpr, report.auc, th.t);
    Ok(())
}
