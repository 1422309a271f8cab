//! Subcommand implementations. Each reads files named by the resolved
//! config and writes its artifacts plus `resolved_config.toml` into the
//! output directory.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use myopia_core::cohort::{
    cohort_stats, model_label, read_manifest, split, synth_cohort, valid_pairs, write_manifest,
    write_stats_csv, Cohort, SequenceSample, SplitSpec,
};
use myopia_core::eval::{
    average_rows, evaluate, linear_baseline, logistic_baseline, parse_grid, roc_auc,
    subgroup_eval, threshold_sweep, write_json, write_metrics_csv, write_roc_csv,
    write_sweep_csv, EvalRecord, MetricsRow, SubgroupKey,
};
use myopia_core::explain::{grad_cam, guided_backprop, write_overlays, Method};
use myopia_core::imaging::{
    crop_scale, preprocess, quality_filter, quality_metrics, read_png, write_enhanced_png,
    write_png, Preprocessed,
};
use myopia_core::mmpn::{write_log_csv, Mmpn, PredictionResult, SeqItem};
use rayon::prelude::*;
use serde::Serialize;

use crate::args::Command;
use crate::config::{prepare_out_dir, require_file, ExplainMethod, RunConfig};
use crate::data::{
    load_inputs, load_samples, prediction_rows, read_predictions, records, write_predictions,
};
use crate::error::{CliError, CliResult};

pub const MANIFEST: &str = "manifest.csv";
pub const CHECKPOINT: &str = "model.ckpt";

pub fn run(command: &Command, config: &RunConfig) -> CliResult<()> {
    let out = config.out_dir()?.to_path_buf();
    match command {
        Command::Synth(_) => synth(config, &out),
        Command::Preprocess(_) => preprocess_images(config, &out),
        Command::Split(_) => split_cohort(config, &out),
        Command::Stats(_) => stats(config, &out),
        Command::Train(_) => train(config, &out),
        Command::Eval(_) => eval(config, &out),
        Command::Predict(_) => predict(config, &out),
        Command::Sweep(_) => sweep(config, &out),
        Command::Explain(_) => explain(config, &out),
    }?;
    prepare_out_dir(&out, command.name(), config)
}

fn pool(config: &RunConfig) -> CliResult<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(config.jobs)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {} workers: {e}", config.jobs)))
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(myopia_core::Error::from)?;
    for r in rows {
        w.serialize(r).map_err(myopia_core::Error::from)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

fn read_cohort(path: &Path) -> CliResult<Cohort> {
    require_file(path)?;
    Ok(read_manifest(path)?)
}

/// Batched inference; batches run on the pool and results keep item order.
fn predict_items(
    model: &Mmpn,
    items: &[SeqItem],
    config: &RunConfig,
) -> CliResult<Vec<PredictionResult>> {
    let refs: Vec<&SeqItem> = items.iter().collect();
    let bs = config.schedule.batch_eval;
    let batches: Vec<myopia_core::Result<Vec<PredictionResult>>> =
        pool(config)?.install(|| refs.par_chunks(bs).map(|c| model.predict_batch(c)).collect());
    let mut out = Vec::with_capacity(items.len());
    for b in batches {
        out.extend(b?);
    }
    Ok(out)
}

fn synth(config: &RunConfig, out: &Path) -> CliResult<()> {
    let sc = synth_cohort(&config.synth, config.seed)?;
    let cohort = sc.cohort();
    for (i, s) in cohort.subjects.iter().enumerate() {
        for (&year, v) in &s.visits {
            if let Some(r) = &v.image_ref {
                write_png(&out.join(r), &sc.render(i, year)?)?;
            }
        }
    }
    write_manifest(&out.join(MANIFEST), &cohort)?;
    eprintln!("synth: {} subjects written to {}", cohort.subjects.len(), out.display());
    Ok(())
}

#[derive(Serialize)]
struct QualityRow {
    subject_id: String,
    visit_year: usize,
    image_path: String,
    hp_fraction: f64,
    lp_fraction: f64,
    rb_difference: i64,
    accepted: bool,
    failures: String,
}

fn preprocess_images(config: &RunConfig, out: &Path) -> CliResult<()> {
    let manifest = config.manifest()?;
    let root = config.image_root(manifest)?;
    let mut cohort = read_cohort(manifest)?;
    let jobs: Vec<(usize, usize, String)> = cohort
        .subjects
        .iter()
        .enumerate()
        .flat_map(|(i, s)| {
            s.visits
                .iter()
                .filter_map(move |(&y, v)| v.image_ref.clone().map(|r| (i, y, r)))
        })
        .collect();
    let pc = &config.preprocess;
    let results: Vec<CliResult<QualityRow>> = pool(config)?.install(|| {
        jobs.par_iter()
            .map(|(i, y, r)| {
                let raw = read_png(&root.join(r))?;
                let metrics = quality_metrics(&crop_scale(&raw, pc.side)?);
                let verdict = quality_filter(&metrics, &pc.thresholds);
                let accepted = match preprocess(&raw, pc)? {
                    Preprocessed::Accepted(img) => {
                        write_enhanced_png(&out.join(r), &img)?;
                        true
                    }
                    Preprocessed::Rejected { .. } => false,
                };
                Ok(QualityRow {
                    subject_id: cohort.subjects[*i].subject_id.clone(),
                    visit_year: *y,
                    image_path: r.clone(),
                    hp_fraction: metrics.hp_fraction,
                    lp_fraction: metrics.lp_fraction,
                    rb_difference: metrics.rb_difference,
                    accepted,
                    failures: verdict.codes(),
                })
            })
            .collect()
    });
    let rows = results.into_iter().collect::<CliResult<Vec<_>>>()?;
    let mut rejected = 0;
    for ((i, y, _), row) in jobs.iter().zip(&rows) {
        if !row.accepted {
            rejected += 1;
            if let Some(v) = cohort.subjects[*i].visits.get_mut(y) {
                v.image_ref = None;
            }
        }
    }
    create_dir(out)?;
    write_csv(&out.join("quality.csv"), &rows)?;
    write_manifest(&out.join(MANIFEST), &cohort)?;
    eprintln!("preprocess: {} of {} images accepted", rows.len() - rejected, rows.len());
    Ok(())
}

fn subset(cohort: &Cohort, ids: &BTreeSet<&str>) -> Cohort {
    Cohort {
        subjects: cohort
            .subjects
            .iter()
            .filter(|s| ids.contains(s.subject_id.as_str()))
            .cloned()
            .collect(),
    }
}

#[derive(Serialize)]
struct SplitRow<'a> {
    subject_id: &'a str,
    split: &'a str,
    baseline_myopic: bool,
}

fn prevalence(samples: &[SequenceSample]) -> f64 {
    100.0 * samples.iter().filter(|s| s.baseline_myopic).count() as f64 / samples.len().max(1) as f64
}

fn split_cohort(config: &RunConfig, out: &Path) -> CliResult<()> {
    let cohort = read_cohort(config.manifest()?)?;
    let samples = myopia_core::cohort::build_samples(&cohort, config.n, config.m)?;
    let (train, val) = split(&samples, &SplitSpec::new(config.seed))?;
    fn ids(s: &[SequenceSample]) -> BTreeSet<&str> {
        s.iter().map(|x| x.subject_id.as_str()).collect()
    }
    create_dir(out)?;
    write_manifest(&out.join("train.csv"), &subset(&cohort, &ids(&train)))?;
    write_manifest(&out.join("val.csv"), &subset(&cohort, &ids(&val)))?;
    let rows: Vec<SplitRow> = train
        .iter()
        .map(|s| (s, "train"))
        .chain(val.iter().map(|s| (s, "validation")))
        .map(|(s, split)| SplitRow {
            subject_id: &s.subject_id,
            split,
            baseline_myopic: s.baseline_myopic,
        })
        .collect();
    write_csv(&out.join("split.csv"), &rows)?;
    eprintln!(
        "split {}: {} train ({:.1}% myopic), {} validation ({:.1}% myopic)",
        model_label(config.n, config.m),
        train.len(),
        prevalence(&train),
        val.len(),
        prevalence(&val)
    );
    Ok(())
}

fn stats(config: &RunConfig, out: &Path) -> CliResult<()> {
    let mut inputs: Vec<(&str, PathBuf)> = Vec::new();
    let first = config.manifest()?.to_path_buf();
    match &config.paths.val_manifest {
        Some(v) => {
            inputs.push(("Train", first));
            inputs.push(("Validation", v.clone()));
        }
        None => inputs.push(("All", first)),
    }
    let mut rows = Vec::new();
    for (label, path) in &inputs {
        let cohort = read_cohort(path)?;
        for (n, m) in valid_pairs() {
            let samples = myopia_core::cohort::build_samples(&cohort, n, m)?;
            if !samples.is_empty() {
                rows.push(cohort_stats(&samples, label)?);
            }
        }
    }
    create_dir(out)?;
    write_stats_csv(&out.join("stats.csv"), &rows)?;
    Ok(())
}

fn train(config: &RunConfig, out: &Path) -> CliResult<()> {
    let manifest = config.manifest()?;
    let root = config.image_root(manifest)?;
    let (n, m) = (config.n, config.m);
    let (_, train_items) = load_samples(&read_cohort(manifest)?, &root, n, m)?;
    let val_items = match &config.paths.val_manifest {
        Some(v) => load_samples(&read_cohort(v)?, &root, n, m)?.1,
        None => Vec::new(),
    };
    let mut model = Mmpn::new(config.model_config(), config.seed)?;
    eprintln!(
        "train {}: {} train, {} validation samples, {} parameters",
        model_label(n, m),
        train_items.len(),
        val_items.len(),
        model.parameter_count()
    );
    let log = model.train(&train_items, &val_items, &config.schedule, config.seed, |l| {
        let val = l.val_mae.map_or_else(String::new, |v| format!(" val_mae {v:.4}"));
        eprintln!(
            "epoch {:>3} [{} phase {}] lr {:e} loss {:.5} mae {:.4}{val}",
            l.epoch, l.stage, l.phase, l.lr, l.train_loss, l.train_mae
        );
    })?;
    create_dir(out)?;
    model.save(&out.join(CHECKPOINT))?;
    write_log_csv(&out.join("train_log.csv"), &log)?;
    Ok(())
}

fn checkpoints(config: &RunConfig) -> CliResult<&[PathBuf]> {
    let c = &config.paths.checkpoints;
    if c.is_empty() {
        return Err(CliError::Usage("a checkpoint is required (--checkpoint)".into()));
    }
    for p in c {
        require_file(p)?;
    }
    Ok(c)
}

/// Linear SER and logistic risk models on the last input SER, fitted on
/// `train` and applied to `eval`.
fn baseline_records(train: &[SequenceSample], eval: &[SequenceSample]) -> CliResult<Vec<EvalRecord>> {
    let x = |s: &[SequenceSample]| s.iter().map(|v| *v.input_sers.last().expect("n ≥ 1")).collect::<Vec<_>>();
    let xt = x(train);
    let m = train[0].m;
    let fits = (0..m)
        .map(|j| linear_baseline(&xt, &train.iter().map(|s| s.target_sers[j]).collect::<Vec<_>>()))
        .collect::<myopia_core::Result<Vec<_>>>()?;
    let lm = logistic_baseline(&xt, &train.iter().map(|s| s.label_myopia).collect::<Vec<_>>())?;
    let lh = logistic_baseline(&xt, &train.iter().map(|s| s.label_high_myopia).collect::<Vec<_>>())?;
    Ok(eval
        .iter()
        .zip(x(eval))
        .map(|(s, xi)| EvalRecord {
            sample_id: s.id(),
            sex: s.sex,
            baseline_myopic: s.baseline_myopic,
            pred_sers: fits.iter().map(|f| f.predict(xi)).collect(),
            true_sers: s.target_sers.clone(),
            p_myopia: lm.probability(xi),
            p_high_myopia: lh.probability(xi),
            label_myopia: s.label_myopia,
            label_high_myopia: s.label_high_myopia,
        })
        .collect())
}

type ScoreLabel = fn(&EvalRecord) -> (f64, bool);

fn write_rocs(out: &Path, label: &str, recs: &[EvalRecord]) -> CliResult<()> {
    let curves: [(&str, ScoreLabel); 2] = [
        ("myopia", |r| (r.p_myopia, r.label_myopia)),
        ("high_myopia", |r| (r.p_high_myopia, r.label_high_myopia)),
    ];
    for (name, f) in curves {
        let (scores, labels): (Vec<f64>, Vec<bool>) = recs.iter().map(f).unzip();
        match roc_auc(&scores, &labels) {
            Ok(roc) => write_roc_csv(&out.join(format!("roc_{label}_{name}.csv")), &roc)?,
            Err(e) => eprintln!("eval {label}: no {name} ROC curve ({e})"),
        }
    }
    Ok(())
}

fn eval(config: &RunConfig, out: &Path) -> CliResult<()> {
    let manifest = config.manifest()?;
    let root = config.image_root(manifest)?;
    let cohort = read_cohort(manifest)?;
    let baseline_cohort = config
        .paths
        .baseline_manifest
        .as_deref()
        .map(read_cohort)
        .transpose()?;
    create_dir(out)?;
    let mut rows = Vec::new();
    let mut baselines = Vec::new();
    for path in checkpoints(config)? {
        let model = Mmpn::load(path)?;
        let (n, m) = (model.config.n, model.config.m);
        let label = model_label(n, m);
        let (samples, items) = load_samples(&cohort, &root, n, m)?;
        let preds = predict_items(&model, &items, config)?;
        let meta: Vec<_> = samples.iter().map(|s| (s.sex, s.baseline_myopic)).collect();
        let prows = prediction_rows(&meta, &items, &preds);
        write_predictions(&out.join(format!("predictions_{label}.csv")), &prows)?;
        let recs = records(&prows)?;
        let metrics = evaluate(&recs)?;
        eprintln!(
            "eval {label}: N {} MAE {:.4} myopia AUC {}",
            metrics.count,
            metrics.mae,
            metrics.myopia.threshold.auc.map_or("undefined".into(), |a| format!("{a:.4}"))
        );
        write_rocs(out, &label, &recs)?;
        let subgroups = [SubgroupKey::Sex, SubgroupKey::BaselineMyopic]
            .into_iter()
            .map(|k| subgroup_eval(&recs, k))
            .collect::<myopia_core::Result<Vec<_>>>()?;
        write_json(&out.join(format!("subgroups_{label}.json")), &subgroups)?;
        rows.push(MetricsRow {
            model: label.clone(),
            weighting: String::new(),
            metrics,
        });
        if let Some(bc) = &baseline_cohort {
            let train = myopia_core::cohort::build_samples(bc, n, m)?;
            if train.is_empty() {
                return Err(CliError::Data(format!("baseline manifest has no {label} samples")));
            }
            let recs = baseline_records(&train, &samples)?;
            baselines.push(MetricsRow {
                model: format!("Baseline {label}"),
                weighting: String::new(),
                metrics: evaluate(&recs)?,
            });
        }
    }
    let mut all = rows.clone();
    if rows.len() > 1 {
        all.extend(average_rows(&rows));
    }
    all.extend(baselines);
    write_metrics_csv(&out.join("metrics.csv"), &all)?;
    write_json(&out.join("metrics.json"), &all)?;
    Ok(())
}

fn single_checkpoint(config: &RunConfig) -> CliResult<Mmpn> {
    match checkpoints(config)? {
        [p] => Ok(Mmpn::load(p)?),
        _ => Err(CliError::Usage("exactly one checkpoint is required".into())),
    }
}

fn predict(config: &RunConfig, out: &Path) -> CliResult<()> {
    let model = single_checkpoint(config)?;
    let manifest = config.manifest()?;
    let root = config.image_root(manifest)?;
    let inputs = load_inputs(&read_cohort(manifest)?, &root, model.config.n, model.config.m)?;
    let (meta, items): (Vec<_>, Vec<_>) = inputs.into_iter().map(|(s, b, i)| ((s, b), i)).unzip();
    let preds = predict_items(&model, &items, config)?;
    create_dir(out)?;
    write_predictions(&out.join("predictions.csv"), &prediction_rows(&meta, &items, &preds))?;
    eprintln!("predict: {} subjects", items.len());
    Ok(())
}

fn sweep(config: &RunConfig, out: &Path) -> CliResult<()> {
    let path = config
        .paths
        .predictions
        .as_deref()
        .ok_or_else(|| CliError::Usage("a predictions CSV is required (--predictions)".into()))?;
    require_file(path)?;
    let recs = records(&read_predictions(path)?)?;
    if recs.is_empty() {
        return Err(CliError::Data(format!("{} has no labelled predictions", path.display())));
    }
    let pred: Vec<f64> = recs.iter().map(EvalRecord::final_pred).collect();
    let truth: Vec<f64> = recs.iter().map(|r| *r.true_sers.last().expect("m ≥ 1")).collect();
    let s = threshold_sweep(&pred, &truth, &parse_grid(&config.sweep_grid)?)?;
    create_dir(out)?;
    write_sweep_csv(&out.join("sweep.csv"), &s)?;
    eprintln!("sweep: minimum accuracy {:.4} at cutoff {:.1}", s.argmin.1, s.argmin.0);
    Ok(())
}

#[derive(Serialize)]
struct HeatmapRow {
    sample_id: String,
    year: usize,
    target: String,
    method: String,
    all_zero: bool,
    path: String,
}

fn explain(config: &RunConfig, out: &Path) -> CliResult<()> {
    let model = single_checkpoint(config)?;
    let manifest = config.manifest()?;
    let root = config.image_root(manifest)?;
    let target = config.explain_target()?;
    let inputs = load_inputs(&read_cohort(manifest)?, &root, model.config.n, model.config.m)?;
    let ids = &config.explain.ids;
    let chosen: Vec<&SeqItem> = if ids.is_empty() {
        inputs.iter().map(|x| &x.2).take(config.explain.limit).collect()
    } else {
        ids.iter()
            .map(|id| {
                inputs
                    .iter()
                    .map(|x| &x.2)
                    .find(|i| &i.id == id || i.id.split('_').next() == Some(id.as_str()))
                    .ok_or_else(|| CliError::Data(format!("no sample {id} with the required images")))
            })
            .collect::<CliResult<_>>()?
    };
    create_dir(out)?;
    let mut rows = Vec::new();
    for item in chosen {
        for &m in &config.explain.methods {
            let (method, maps) = match m {
                ExplainMethod::Gradcam => (Method::GradCam, grad_cam(&model, item, target)?),
                ExplainMethod::Guided => (Method::GuidedBackprop, guided_backprop(&model, item, target)?),
            };
            let paths = write_overlays(out, item, &maps, target, method)?;
            for (h, p) in maps.iter().zip(paths) {
                if h.all_zero {
                    eprintln!("explain: {} year {} {method} map is all zero", item.id, h.year);
                }
                rows.push(HeatmapRow {
                    sample_id: item.id.clone(),
                    year: h.year,
                    target: target.to_string(),
                    method: method.to_string(),
                    all_zero: h.all_zero,
                    path: p.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default(),
                });
            }
        }
    }
    write_csv(&out.join("heatmaps.csv"), &rows)?;
    eprintln!("explain: {} overlays", rows.len());
    Ok(())
}
