//! Manifest and image loading; the predictions CSV.

use std::path::Path;

use myopia_core::cohort::{build_samples, model_label, Cohort, SequenceSample, Sex};
use myopia_core::domain::{is_high_myopic, is_myopic, Ser};
use myopia_core::eval::EvalRecord;
use myopia_core::imaging::read_enhanced_png;
use myopia_core::mmpn::{PredictionResult, SeqItem};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Complete nPm samples of `cohort` with their images read from `root`.
pub fn load_samples(
    cohort: &Cohort,
    root: &Path,
    n: usize,
    m: usize,
) -> CliResult<(Vec<SequenceSample>, Vec<SeqItem>)> {
    let samples = build_samples(cohort, n, m)?;
    if samples.is_empty() {
        return Err(CliError::Data(format!(
            "manifest has no complete {} samples",
            model_label(n, m)
        )));
    }
    let items = samples
        .iter()
        .map(|s| {
            let images = s
                .input_images()
                .into_iter()
                .map(|r| read_enhanced_png(&root.join(r)))
                .collect::<myopia_core::Result<Vec<_>>>()?;
            Ok(SeqItem::from_sample(s, images))
        })
        .collect::<CliResult<Vec<_>>>()?;
    Ok((samples, items))
}

/// Per-subject inputs for inference: every subject imaged in years
/// `0..n`. Targets are attached when all `m` future refractions exist.
pub fn load_inputs(cohort: &Cohort, root: &Path, n: usize, m: usize) -> CliResult<Vec<(Sex, bool, SeqItem)>> {
    let mut out = Vec::new();
    'subjects: for s in &cohort.subjects {
        let mut images = Vec::with_capacity(n);
        let mut sers = Vec::with_capacity(n);
        for y in 0..n {
            match s.visits.get(&y) {
                Some(v) if v.image_ref.is_some() => {
                    images.push(read_enhanced_png(&root.join(v.image_ref.as_deref().unwrap_or_default()))?);
                    sers.push(v.ser());
                }
                _ => continue 'subjects,
            }
        }
        let targets: Option<Vec<f64>> = (n..n + m).map(|y| s.visits.get(&y).map(|v| v.ser())).collect();
        let targets = targets.unwrap_or_default();
        let last = targets.last().map(|&v| Ser::new(v)).transpose()?;
        out.push((
            s.sex,
            is_myopic(Ser::new(sers[0])?),
            SeqItem {
                id: format!("{}_{}", s.subject_id, model_label(n, m)),
                images,
                input_sers: sers,
                target_sers: targets,
                label_myopia: last.is_some_and(is_myopic),
                label_high_myopia: last.is_some_and(is_high_myopic),
            },
        ));
    }
    if out.is_empty() {
        return Err(CliError::Data(format!("no subject has images for years 0..{n}")));
    }
    Ok(out)
}

/// One row per sample and forecast year.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub sample_id: String,
    pub sex: Sex,
    pub baseline_myopic: bool,
    /// 1-based forecast year.
    pub horizon: usize,
    pub pred_ser: f64,
    pub true_ser: Option<f64>,
    pub p_myopia: f64,
    pub p_high_myopia: f64,
    pub label_myopia: Option<bool>,
    pub label_high_myopia: Option<bool>,
}

pub fn prediction_rows(meta: &[(Sex, bool)], items: &[SeqItem], preds: &[PredictionResult]) -> Vec<PredictionRow> {
    let mut rows = Vec::new();
    for ((&(sex, baseline_myopic), item), p) in meta.iter().zip(items).zip(preds) {
        let known = !item.target_sers.is_empty();
        for (j, &pred) in p.predicted_sers.iter().enumerate() {
            rows.push(PredictionRow {
                sample_id: item.id.clone(),
                sex,
                baseline_myopic,
                horizon: j + 1,
                pred_ser: pred,
                true_ser: item.target_sers.get(j).copied(),
                p_myopia: p.p_myopia,
                p_high_myopia: p.p_high_myopia,
                label_myopia: known.then_some(item.label_myopia),
                label_high_myopia: known.then_some(item.label_high_myopia),
            });
        }
    }
    rows
}

pub fn write_predictions(path: &Path, rows: &[PredictionRow]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(myopia_core::Error::from)?;
    for r in rows {
        w.serialize(r).map_err(myopia_core::Error::from)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn read_predictions(path: &Path) -> CliResult<Vec<PredictionRow>> {
    let mut r = csv::Reader::from_path(path).map_err(myopia_core::Error::from)?;
    r.deserialize()
        .enumerate()
        .map(|(i, row)| {
            row.map_err(|e| CliError::Data(format!("{} row {}: {e}", path.display(), i + 2)))
        })
        .collect()
}

/// Groups rows back into per-sample records; samples without ground truth
/// are skipped.
pub fn records(rows: &[PredictionRow]) -> CliResult<Vec<EvalRecord>> {
    let mut out: Vec<EvalRecord> = Vec::new();
    for r in rows {
        let (Some(t), Some(lm), Some(lh)) = (r.true_ser, r.label_myopia, r.label_high_myopia) else {
            continue;
        };
        match out.last_mut() {
            Some(rec) if rec.sample_id == r.sample_id => {
                if r.horizon != rec.pred_sers.len() + 1 {
                    return Err(CliError::Data(format!("{}: horizons out of order", r.sample_id)));
                }
                rec.pred_sers.push(r.pred_ser);
                rec.true_sers.push(t);
            }
            _ => {
                if r.horizon != 1 {
                    return Err(CliError::Data(format!("{}: first horizon is {}", r.sample_id, r.horizon)));
                }
                out.push(EvalRecord {
                    sample_id: r.sample_id.clone(),
                    sex: r.sex,
                    baseline_myopic: r.baseline_myopic,
                    pred_sers: vec![r.pred_ser],
                    true_sers: vec![t],
                    p_myopia: r.p_myopia,
                    p_high_myopia: r.p_high_myopia,
                    label_myopia: lm,
                    label_high_myopia: lh,
                })
            }
        }
    }
    Ok(out)
}
