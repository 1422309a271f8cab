//! Regression and classification metrics, ROC analysis, the threshold
//! classifier and its sweep, subgroup analysis and simple baselines.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cohort::Sex;
use crate::domain::{HIGH_MYOPIA_CUTOFF, MYOPIA_CUTOFF};
use crate::error::{Error, Result};

fn check_lengths(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Eval(format!("{what}: length mismatch {a} vs {b}")));
    }
    if a == 0 {
        return Err(Error::Eval(format!("{what}: empty input")));
    }
    Ok(())
}

pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_lengths(pred.len(), truth.len(), "mae")?;
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

/// Coefficient of determination; an error when the truth is constant.
pub fn r2(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_lengths(pred.len(), truth.len(), "r2")?;
    let mean = truth.iter().sum::<f64>() / truth.len() as f64;
    let ss_tot: f64 = truth.iter().map(|t| (t - mean) * (t - mean)).sum();
    if ss_tot == 0.0 {
        return Err(Error::Eval("r2 undefined: truth has zero variance".into()));
    }
    let ss_res: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn from_predictions(pred: &[bool], labels: &[bool]) -> Result<Self> {
        check_lengths(pred.len(), labels.len(), "confusion")?;
        let mut c = Self::default();
        for (&p, &l) in pred.iter().zip(labels) {
            match (p, l) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> Option<f64> {
        ratio(self.tp + self.tn, self.total())
    }

    /// `None` when there are no positive labels.
    pub fn sensitivity(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// `None` when there are no negative labels.
    pub fn specificity(&self) -> Option<f64> {
        ratio(self.tn, self.tn + self.fp)
    }
}

fn ratio(a: usize, b: usize) -> Option<f64> {
    (b > 0).then(|| a as f64 / b as f64)
}

/// Positive iff `score ≥ threshold`.
pub fn confusion(scores: &[f64], labels: &[bool], threshold: f64) -> Result<Confusion> {
    let pred: Vec<bool> = scores.iter().map(|&s| s >= threshold).collect();
    Confusion::from_predictions(&pred, labels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// `(fpr, tpr)` from `(0, 0)` to `(1, 1)`.
    pub points: Vec<(f64, f64)>,
    /// Score threshold reaching each point (`+∞` for the origin).
    pub thresholds: Vec<f64>,
    pub auc: f64,
}

fn class_counts(labels: &[bool]) -> Result<(u64, u64)> {
    let p = labels.iter().filter(|&&l| l).count() as u64;
    let n = labels.len() as u64 - p;
    if p == 0 || n == 0 {
        return Err(Error::Eval("ROC needs both positive and negative labels".into()));
    }
    Ok((p, n))
}

fn check_scores(scores: &[f64], labels: &[bool]) -> Result<()> {
    check_lengths(scores.len(), labels.len(), "roc")?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Eval("scores contain NaN".into()));
    }
    Ok(())
}

/// Twice the Mann–Whitney U of positives over negatives, ties counted ½.
fn twice_u(scores: &[f64], labels: &[bool]) -> u64 {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut u2 = 0u64;
    let mut neg_below = 0u64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let pos = order[i..j].iter().filter(|&&k| labels[k]).count() as u64;
        let neg = (j - i) as u64 - pos;
        u2 += pos * (2 * neg_below + neg);
        neg_below += neg;
        i = j;
    }
    u2
}

/// Rank-statistic AUC: fraction of positive-negative pairs ranked correctly.
pub fn mann_whitney_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_scores(scores, labels)?;
    let (p, n) = class_counts(labels)?;
    Ok(twice_u(scores, labels) as f64 / (2 * p * n) as f64)
}

/// ROC over every distinct score; AUC by the trapezoidal rule.
///
/// The area is accumulated in integer count space, where it equals the
/// Mann–Whitney statistic exactly; the two are cross-checked.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<RocCurve> {
    check_scores(scores, labels)?;
    let (p, n) = class_counts(labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let mut thresholds = vec![f64::INFINITY];
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut area2 = 0u64;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        area2 += (fp - fp0) * (tp + tp0);
        points.push((fp as f64 / n as f64, tp as f64 / p as f64));
        thresholds.push(s);
    }
    let u2 = twice_u(scores, labels);
    if u2 != area2 {
        return Err(Error::Eval(format!(
            "trapezoidal area {area2} disagrees with rank statistic {u2}"
        )));
    }
    Ok(RocCurve {
        points,
        thresholds,
        auc: area2 as f64 / (2 * p * n) as f64,
    })
}

/// A refraction cutoff: myopia is `≤ −0.5`, high myopia `< −6.0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Cutoff {
    AtMost(f64),
    Below(f64),
}

impl Cutoff {
    pub const MYOPIA: Cutoff = Cutoff::AtMost(MYOPIA_CUTOFF);
    pub const HIGH_MYOPIA: Cutoff = Cutoff::Below(HIGH_MYOPIA_CUTOFF);
}

pub fn threshold_classify(pred_ser: f64, cutoff: Cutoff) -> bool {
    match cutoff {
        Cutoff::AtMost(x) => pred_ser <= x,
        Cutoff::Below(x) => pred_ser < x,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    /// `(cutoff, accuracy)` per grid value.
    pub points: Vec<(f64, f64)>,
    /// The lowest point of the curve; the first on ties.
    pub argmin: (f64, f64),
}

/// Accuracy of thresholded predictions against thresholded truth for each
/// inclusive cutoff in `grid`.
pub fn threshold_sweep(pred: &[f64], truth: &[f64], grid: &[f64]) -> Result<Sweep> {
    check_lengths(pred.len(), truth.len(), "sweep")?;
    if grid.is_empty() {
        return Err(Error::Eval("sweep grid is empty".into()));
    }
    let points: Vec<(f64, f64)> = grid
        .iter()
        .map(|&x| {
            let c = Cutoff::AtMost(x);
            let hits = pred
                .iter()
                .zip(truth)
                .filter(|(&p, &t)| threshold_classify(p, c) == threshold_classify(t, c))
                .count();
            (x, hits as f64 / pred.len() as f64)
        })
        .collect();
    let argmin = points
        .iter()
        .copied()
        .fold(points[0], |best, p| if p.1 < best.1 { p } else { best });
    Ok(Sweep { points, argmin })
}

/// Parses `start:end:step` into an inclusive grid, values rounded to 1e-10.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = spec.split(':').collect();
    let bad = || Error::Config(format!("grid must be start:end:step, got {spec:?}"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let nums: Vec<f64> = parts
        .iter()
        .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
        .collect::<Result<_>>()?;
    let (start, end, step) = (nums[0], nums[1], nums[2]);
    if !(step > 0.0) || !start.is_finite() || !end.is_finite() || end < start {
        return Err(bad());
    }
    let count = ((end - start) / step + 1e-9).floor() as usize + 1;
    if count > 1_000_000 {
        return Err(Error::Config(format!("grid {spec:?} has too many points")));
    }
    Ok((0..count)
        .map(|i| ((start + i as f64 * step) * 1e10).round() / 1e10)
        .collect())
}

/// Per-sample model output alongside the ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub sample_id: String,
    pub sex: Sex,
    pub baseline_myopic: bool,
    pub pred_sers: Vec<f64>,
    pub true_sers: Vec<f64>,
    pub p_myopia: f64,
    pub p_high_myopia: f64,
    pub label_myopia: bool,
    pub label_high_myopia: bool,
}

impl EvalRecord {
    pub fn final_pred(&self) -> f64 {
        *self.pred_sers.last().expect("non-empty prediction")
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub accuracy: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub auc: Option<f64>,
}

impl BinaryMetrics {
    pub fn from_confusion(c: &Confusion, auc: Option<f64>) -> Self {
        Self {
            accuracy: c.accuracy(),
            sensitivity: c.sensitivity(),
            specificity: c.specificity(),
            auc,
        }
    }
}

/// Trained-classifier and threshold-classifier results for one label.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RiskMetrics {
    pub trained: BinaryMetrics,
    pub threshold: BinaryMetrics,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub count: usize,
    pub mae: f64,
    /// `None` when the truth has zero variance.
    pub r2: Option<f64>,
    /// MAE per forecast year.
    pub mae_by_year: Vec<f64>,
    pub myopia: RiskMetrics,
    pub high_myopia: RiskMetrics,
}

fn risk_metrics(probs: &[f64], final_preds: &[f64], labels: &[bool], cutoff: Cutoff) -> Result<RiskMetrics> {
    let trained = confusion(probs, labels, 0.5)?;
    let auc = roc_auc(probs, labels).ok().map(|r| r.auc);
    let thr: Vec<bool> = final_preds.iter().map(|&p| threshold_classify(p, cutoff)).collect();
    let threshold = Confusion::from_predictions(&thr, labels)?;
    let thr_auc = roc_auc(&final_preds.iter().map(|p| -p).collect::<Vec<_>>(), labels)
        .ok()
        .map(|r| r.auc);
    Ok(RiskMetrics {
        trained: BinaryMetrics::from_confusion(&trained, auc),
        threshold: BinaryMetrics::from_confusion(&threshold, thr_auc),
    })
}

/// Full metric set. Regression metrics pool every forecast year;
/// classification uses the final horizon year. Trained-classifier labels
/// are probabilities thresholded at 0.5; threshold-classifier AUC ranks
/// samples by negated final predicted SER.
pub fn evaluate(records: &[EvalRecord]) -> Result<Metrics> {
    let first = records
        .first()
        .ok_or_else(|| Error::Eval("no records to evaluate".into()))?;
    let m = first.true_sers.len();
    if records
        .iter()
        .any(|r| r.pred_sers.len() != m || r.true_sers.len() != m || m == 0)
    {
        return Err(Error::Eval("records disagree on the forecast horizon".into()));
    }
    let pred: Vec<f64> = records.iter().flat_map(|r| r.pred_sers.iter().copied()).collect();
    let truth: Vec<f64> = records.iter().flat_map(|r| r.true_sers.iter().copied()).collect();
    let mae_by_year = (0..m)
        .map(|j| {
            let p: Vec<f64> = records.iter().map(|r| r.pred_sers[j]).collect();
            let t: Vec<f64> = records.iter().map(|r| r.true_sers[j]).collect();
            mae(&p, &t)
        })
        .collect::<Result<_>>()?;
    let finals: Vec<f64> = records.iter().map(EvalRecord::final_pred).collect();
    let col = |f: fn(&EvalRecord) -> f64| records.iter().map(f).collect::<Vec<_>>();
    let lab = |f: fn(&EvalRecord) -> bool| records.iter().map(f).collect::<Vec<_>>();
    Ok(Metrics {
        count: records.len(),
        mae: mae(&pred, &truth)?,
        r2: r2(&pred, &truth).ok(),
        mae_by_year,
        myopia: risk_metrics(&col(|r| r.p_myopia), &finals, &lab(|r| r.label_myopia), Cutoff::MYOPIA)?,
        high_myopia: risk_metrics(
            &col(|r| r.p_high_myopia),
            &finals,
            &lab(|r| r.label_high_myopia),
            Cutoff::HIGH_MYOPIA,
        )?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubgroupKey {
    Sex,
    BaselineMyopic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupResult {
    pub group: String,
    pub metrics: Metrics,
    /// `((pred + true) / 2, pred − true)` for every forecast year.
    pub bland_altman: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupReport {
    pub key: SubgroupKey,
    pub groups: Vec<GroupResult>,
    pub warnings: Vec<String>,
}

pub fn bland_altman(records: &[EvalRecord]) -> Vec<(f64, f64)> {
    records
        .iter()
        .flat_map(|r| r.pred_sers.iter().zip(&r.true_sers).map(|(p, t)| ((p + t) / 2.0, p - t)))
        .collect()
}

pub fn subgroup_eval(records: &[EvalRecord], key: SubgroupKey) -> Result<SubgroupReport> {
    let names: &[&str] = match key {
        SubgroupKey::Sex => &["M", "F"],
        SubgroupKey::BaselineMyopic => &["myopic", "non_myopic"],
    };
    let group_of = |r: &EvalRecord| -> &str {
        match key {
            SubgroupKey::Sex => match r.sex {
                Sex::M => "M",
                Sex::F => "F",
            },
            SubgroupKey::BaselineMyopic => {
                if r.baseline_myopic {
                    "myopic"
                } else {
                    "non_myopic"
                }
            }
        }
    };
    let mut buckets: BTreeMap<&str, Vec<EvalRecord>> = BTreeMap::new();
    for r in records {
        buckets.entry(group_of(r)).or_default().push(r.clone());
    }
    let mut groups = Vec::new();
    let mut warnings = Vec::new();
    for &name in names {
        match buckets.get(name) {
            Some(rs) => groups.push(GroupResult {
                group: name.to_string(),
                metrics: evaluate(rs)?,
                bland_altman: bland_altman(rs),
            }),
            None => warnings.push(format!("group {name} is empty and was omitted")),
        }
    }
    Ok(SubgroupReport {
        key,
        groups,
        warnings,
    })
}

// Baselines on baseline SER.

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    /// Training MAE.
    pub mae: f64,
}

impl LinearFit {
    pub fn predict(&self, x: f64) -> f64 {
        self.intercept + self.slope * x
    }
}

fn check_regressor(x: &[f64], n_other: usize, what: &str) -> Result<(f64, f64)> {
    check_lengths(x.len(), n_other, what)?;
    if x.len() < 3 {
        return Err(Error::Eval(format!("{what} needs at least 3 points")));
    }
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / x.len() as f64;
    if !(var > 0.0) {
        return Err(Error::Eval(format!("{what}: regressor has zero variance")));
    }
    Ok((mean, var.sqrt()))
}

/// Ordinary least squares `y ≈ a + b·x`.
pub fn linear_baseline(x: &[f64], y: &[f64]) -> Result<LinearFit> {
    let (mx, _) = check_regressor(x, y.len(), "linear baseline")?;
    let my = y.iter().sum::<f64>() / y.len() as f64;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let pred: Vec<f64> = x.iter().map(|v| intercept + slope * v).collect();
    Ok(LinearFit {
        slope,
        intercept,
        mae: mae(&pred, y)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogisticFit {
    pub weight: f64,
    pub bias: f64,
    pub steps: usize,
    /// Training-set metrics at probability 0.5.
    pub metrics: BinaryMetrics,
}

impl LogisticFit {
    pub fn probability(&self, x: f64) -> f64 {
        1.0 / (1.0 + (-(self.weight * x + self.bias)).exp())
    }
}

pub const LOGISTIC_TOL: f64 = 1e-10;
pub const LOGISTIC_MAX_STEPS: usize = 100_000;

/// Logistic regression by full-batch gradient descent on the mean log
/// loss, with the regressor standardized internally. Stops when the loss
/// changes by less than 1e-10 or after 10⁵ steps.
pub fn logistic_baseline(x: &[f64], labels: &[bool]) -> Result<LogisticFit> {
    let (mx, sx) = check_regressor(x, labels.len(), "logistic baseline")?;
    let z: Vec<f64> = x.iter().map(|v| (v - mx) / sx).collect();
    let y: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect();
    let k = z.len() as f64;
    let (mut w, mut b) = (0.0f64, 0.0f64);
    let lr = 1.0;
    let loss = |w: f64, b: f64| {
        z.iter()
            .zip(&y)
            .map(|(&zi, &yi)| {
                let t = w * zi + b;
                // log(1 + e^t) − y·t, stable for large |t|.
                t.max(0.0) + (-t.abs()).exp().ln_1p() - yi * t
            })
            .sum::<f64>()
            / k
    };
    let mut prev = loss(w, b);
    let mut steps = 0;
    while steps < LOGISTIC_MAX_STEPS {
        let (mut gw, mut gb) = (0.0, 0.0);
        for (&zi, &yi) in z.iter().zip(&y) {
            let p = 1.0 / (1.0 + (-(w * zi + b)).exp());
            gw += (p - yi) * zi;
            gb += p - yi;
        }
        w -= lr * gw / k;
        b -= lr * gb / k;
        steps += 1;
        let now = loss(w, b);
        if (prev - now).abs() < LOGISTIC_TOL {
            break;
        }
        prev = now;
    }
    let weight = w / sx;
    let bias = b - w * mx / sx;
    let fit = LogisticFit {
        weight,
        bias,
        steps,
        metrics: BinaryMetrics::default(),
    };
    let probs: Vec<f64> = x.iter().map(|&v| fit.probability(v)).collect();
    let c = confusion(&probs, labels, 0.5)?;
    let auc = roc_auc(&probs, labels).ok().map(|r| r.auc);
    Ok(LogisticFit {
        metrics: BinaryMetrics::from_confusion(&c, auc),
        ..fit
    })
}

// Reports.

pub const METRICS_HEADER: [&str; 19] = [
    "Model",
    "N",
    "MAE /D",
    "R2",
    "Myopia Trained Accuracy",
    "Myopia Trained Sensitivity",
    "Myopia Trained Specificity",
    "Myopia Trained AUC",
    "Myopia Threshold Accuracy",
    "Myopia Threshold Sensitivity",
    "Myopia Threshold Specificity",
    "High Myopia Trained Accuracy",
    "High Myopia Trained Sensitivity",
    "High Myopia Trained Specificity",
    "High Myopia Trained AUC",
    "High Myopia Threshold Accuracy",
    "High Myopia Threshold Sensitivity",
    "High Myopia Threshold Specificity",
    "Weighting",
];

/// Marker written for metrics with an empty denominator.
pub const UNDEFINED: &str = "undefined";

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| UNDEFINED.to_string(), |x| format!("{x}"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub model: String,
    pub weighting: String,
    pub metrics: Metrics,
}

impl MetricsRow {
    fn cells(&self) -> Vec<String> {
        let m = &self.metrics;
        let b = |x: &BinaryMetrics, auc: bool| {
            let mut v = vec![cell(x.accuracy), cell(x.sensitivity), cell(x.specificity)];
            if auc {
                v.push(cell(x.auc));
            }
            v
        };
        let mut out = vec![self.model.clone(), m.count.to_string(), format!("{}", m.mae), cell(m.r2)];
        out.extend(b(&m.myopia.trained, true));
        out.extend(b(&m.myopia.threshold, false));
        out.extend(b(&m.high_myopia.trained, true));
        out.extend(b(&m.high_myopia.threshold, false));
        out.push(self.weighting.clone());
        out
    }
}

fn avg(values: &[(Option<f64>, f64)]) -> Option<f64> {
    let defined: Vec<(f64, f64)> = values.iter().filter_map(|&(v, w)| v.map(|x| (x, w))).collect();
    let wsum: f64 = defined.iter().map(|d| d.1).sum();
    (wsum > 0.0).then(|| defined.iter().map(|(x, w)| x * w).sum::<f64>() / wsum)
}

/// Averages over model rows: by row (`unweighted`) and by sample count
/// (`weighted`). Undefined cells are skipped.
pub fn average_rows(rows: &[MetricsRow]) -> Vec<MetricsRow> {
    if rows.is_empty() {
        return Vec::new();
    }
    [("unweighted", false), ("weighted", true)]
        .into_iter()
        .map(|(name, weighted)| {
            let w = |r: &MetricsRow| if weighted { r.metrics.count as f64 } else { 1.0 };
            let pick = |f: &dyn Fn(&Metrics) -> Option<f64>| {
                avg(&rows.iter().map(|r| (f(&r.metrics), w(r))).collect::<Vec<_>>())
            };
            let bin = |f: &dyn Fn(&Metrics) -> &BinaryMetrics| BinaryMetrics {
                accuracy: pick(&|m| f(m).accuracy),
                sensitivity: pick(&|m| f(m).sensitivity),
                specificity: pick(&|m| f(m).specificity),
                auc: pick(&|m| f(m).auc),
            };
            MetricsRow {
                model: "Avg/y".into(),
                weighting: name.into(),
                metrics: Metrics {
                    count: rows.iter().map(|r| r.metrics.count).sum(),
                    mae: pick(&|m| Some(m.mae)).unwrap_or(f64::NAN),
                    r2: pick(&|m| m.r2),
                    mae_by_year: Vec::new(),
                    myopia: RiskMetrics {
                        trained: bin(&|m| &m.myopia.trained),
                        threshold: bin(&|m| &m.myopia.threshold),
                    },
                    high_myopia: RiskMetrics {
                        trained: bin(&|m| &m.high_myopia.trained),
                        threshold: bin(&|m| &m.high_myopia.threshold),
                    },
                },
            }
        })
        .collect()
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(METRICS_HEADER)?;
    for r in rows {
        w.write_record(r.cells())?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n").map_err(|e| Error::io(path, e))
}

pub fn write_roc_csv(path: &Path, roc: &RocCurve) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["threshold", "fpr", "tpr"])?;
    for (t, (x, y)) in roc.thresholds.iter().zip(&roc.points) {
        w.write_record([t.to_string(), x.to_string(), y.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_sweep_csv(path: &Path, sweep: &Sweep) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["cutoff", "accuracy", "is_min"])?;
    for &(x, a) in &sweep.points {
        let is_min = x == sweep.argmin.0;
        w.write_record([format!("{x:.1}"), a.to_string(), is_min.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
