//! Longitudinal subject records, nPm sequence samples, stratified splits,
//! cohort statistics and the synthetic cohort generator.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::domain::{
    classify_ser, is_high_myopic, is_myopic, spherical_equivalent, MyopiaCategory, Refraction, Ser,
};
use crate::error::{Error, Result};
use crate::imaging::RawImage;
use crate::seeding::{child_seed, substream};
use crate::synth::{render_fundus, FundusParams};

/// Annual visits are indexed `0..YEARS`.
pub const YEARS: usize = 6;
pub const DAYS_PER_YEAR: f64 = 365.25;
pub const TRAIN_FRACTION: f64 = 5.0 / 6.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Sex {
    M,
    F,
}

impl fmt::Display for Sex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::M => "M",
            Self::F => "F",
        })
    }
}

impl std::str::FromStr for Sex {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "M" | "m" => Ok(Self::M),
            "F" | "f" => Ok(Self::F),
            other => Err(Error::Cohort(format!("sex must be M or F, got {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Visit {
    /// Image path relative to the image root; `None` when not photographed.
    pub image_ref: Option<String>,
    pub refraction: Refraction,
    pub al_mm: Option<f64>,
    pub ct_um: Option<f64>,
}

impl Visit {
    pub fn ser(&self) -> f64 {
        self.refraction.sphere + self.refraction.cylinder / 2.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub sex: Sex,
    pub age_days_at_baseline: f64,
    pub visits: BTreeMap<usize, Visit>,
}

impl SubjectRecord {
    pub fn validate(&self) -> Result<()> {
        if self.subject_id.is_empty() {
            return Err(Error::Cohort("empty subject id".into()));
        }
        if self.visits.is_empty() {
            return Err(Error::Cohort(format!("subject {} has no visits", self.subject_id)));
        }
        if let Some(&y) = self.visits.keys().find(|&&y| y >= YEARS) {
            return Err(Error::Cohort(format!(
                "subject {}: visit year {y} outside 0..{YEARS}",
                self.subject_id
            )));
        }
        for v in self.visits.values() {
            v.refraction.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Cohort {
    pub subjects: Vec<SubjectRecord>,
}

/// One nPm instance: `n` observed years predicting the following `m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceSample {
    pub subject_id: String,
    pub n: usize,
    pub m: usize,
    pub sex: Sex,
    /// Age at the last input visit.
    pub age_days: f64,
    pub baseline_myopic: bool,
    pub input_visits: Vec<Visit>,
    pub input_sers: Vec<f64>,
    pub target_sers: Vec<f64>,
    pub label_myopia: bool,
    pub label_high_myopia: bool,
}

impl SequenceSample {
    pub fn id(&self) -> String {
        format!("{}_{}p{}", self.subject_id, self.n, self.m)
    }

    pub fn input_images(&self) -> Vec<&str> {
        self.input_visits
            .iter()
            .map(|v| v.image_ref.as_deref().unwrap_or_default())
            .collect()
    }

    pub fn last_input(&self) -> &Visit {
        self.input_visits.last().expect("n ≥ 1")
    }

    pub fn final_target(&self) -> f64 {
        *self.target_sers.last().expect("m ≥ 1")
    }
}

pub fn check_pair(n: usize, m: usize) -> Result<()> {
    if n >= 1 && m >= 1 && n + m <= YEARS {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "({n}, {m}) is not a valid nPm pair: need n ≥ 1, m ≥ 1, n + m ≤ {YEARS}"
        )))
    }
}

/// The 15 `(n, m)` pairs with `n ∈ 1..=5`, `m ∈ 1..=6−n`.
pub fn valid_pairs() -> Vec<(usize, usize)> {
    (1..YEARS)
        .flat_map(|n| (1..=YEARS - n).map(move |m| (n, m)))
        .collect()
}

pub fn model_label(n: usize, m: usize) -> String {
    format!("{n}p{m}")
}

/// One sample per subject that has imaged visits for years `0..n` and
/// refractions for every year `n..n+m`. Subjects with gaps are skipped.
pub fn build_samples(cohort: &Cohort, n: usize, m: usize) -> Result<Vec<SequenceSample>> {
    check_pair(n, m)?;
    let mut out = Vec::new();
    'subjects: for s in &cohort.subjects {
        let mut inputs = Vec::with_capacity(n);
        for y in 0..n {
            match s.visits.get(&y) {
                Some(v) if v.image_ref.as_deref().is_some_and(|r| !r.is_empty()) => {
                    inputs.push(v.clone())
                }
                _ => continue 'subjects,
            }
        }
        let mut targets = Vec::with_capacity(m);
        for y in n..n + m {
            match s.visits.get(&y) {
                Some(v) => targets.push(spherical_equivalent(&v.refraction)?.value()),
                None => continue 'subjects,
            }
        }
        let input_sers = inputs
            .iter()
            .map(|v| spherical_equivalent(&v.refraction).map(Ser::value))
            .collect::<Result<Vec<_>>>()?;
        let last = Ser::new(*targets.last().expect("m ≥ 1"))?;
        out.push(SequenceSample {
            subject_id: s.subject_id.clone(),
            n,
            m,
            sex: s.sex,
            age_days: s.age_days_at_baseline + DAYS_PER_YEAR * (n - 1) as f64,
            baseline_myopic: is_myopic(Ser::new(input_sers[0])?),
            input_visits: inputs,
            input_sers,
            target_sers: targets,
            label_myopia: is_myopic(last),
            label_high_myopia: is_high_myopic(last),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seed: u64,
    pub train_fraction: f64,
}

impl SplitSpec {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            train_fraction: TRAIN_FRACTION,
        }
    }
}

/// Subject-level split stratified by baseline myopia. Within each stratum
/// `round(fraction · subjects)` go to training.
pub fn split(
    samples: &[SequenceSample],
    spec: &SplitSpec,
) -> Result<(Vec<SequenceSample>, Vec<SequenceSample>)> {
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train fraction must lie in (0, 1), got {}",
            spec.train_fraction
        )));
    }
    if samples.is_empty() {
        return Err(Error::Cohort("cannot split an empty sample set".into()));
    }
    let mut strata: BTreeMap<bool, BTreeSet<&str>> = BTreeMap::new();
    for s in samples {
        strata.entry(s.baseline_myopic).or_default().insert(&s.subject_id);
    }
    let mut rng = substream(spec.seed, "split");
    let mut train_ids = BTreeSet::new();
    for ids in strata.values() {
        let mut ids: Vec<&str> = ids.iter().copied().collect();
        ids.shuffle(&mut rng);
        let k = (spec.train_fraction * ids.len() as f64).round() as usize;
        train_ids.extend(ids.into_iter().take(k));
    }
    let (train, val) = samples
        .iter()
        .cloned()
        .partition(|s| train_ids.contains(s.subject_id.as_str()));
    Ok((train, val))
}

/// One row of the baseline characteristics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsRow {
    #[serde(rename = "Split")]
    pub split: String,
    #[serde(rename = "Model")]
    pub model: String,
    #[serde(rename = "Num")]
    pub count: usize,
    #[serde(rename = "Age (d)")]
    pub age_days: f64,
    #[serde(rename = "Sex (M%)")]
    pub male_pct: f64,
    #[serde(rename = "DS (D)")]
    pub ds: f64,
    #[serde(rename = "DC (D)")]
    pub dc: f64,
    #[serde(rename = "Axis (°)")]
    pub axis: f64,
    #[serde(rename = "CT (μm)")]
    pub ct: Option<f64>,
    #[serde(rename = "AL (mm)")]
    pub al: Option<f64>,
    #[serde(rename = "SER(D)")]
    pub ser: f64,
    #[serde(rename = "Mild Myopia")]
    pub mild_pct: f64,
    #[serde(rename = "Moderate and High Myopia")]
    pub moderate_high_pct: f64,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut s, mut k) = (0.0, 0usize);
    for x in xs {
        s += x;
        k += 1;
    }
    (k > 0).then(|| s / k as f64)
}

/// Arithmetic means over the last input visit of each sample.
pub fn cohort_stats(samples: &[SequenceSample], split: &str) -> Result<StatsRow> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Cohort("statistics of an empty sample set".into()))?;
    let k = samples.len() as f64;
    let pct = |f: &dyn Fn(&SequenceSample) -> bool| {
        100.0 * samples.iter().filter(|s| f(s)).count() as f64 / k
    };
    let visits = || samples.iter().map(|s| s.last_input());
    let category = |s: &SequenceSample| classify_ser(Ser::new(s.last_input().ser()).expect("finite"));
    Ok(StatsRow {
        split: split.to_string(),
        model: model_label(first.n, first.m),
        count: samples.len(),
        age_days: mean(samples.iter().map(|s| s.age_days)).unwrap_or_default(),
        male_pct: pct(&|s| s.sex == Sex::M),
        ds: mean(visits().map(|v| v.refraction.sphere)).unwrap_or_default(),
        dc: mean(visits().map(|v| v.refraction.cylinder)).unwrap_or_default(),
        axis: mean(visits().map(|v| v.refraction.axis)).unwrap_or_default(),
        ct: mean(visits().filter_map(|v| v.ct_um)),
        al: mean(visits().filter_map(|v| v.al_mm)),
        ser: mean(visits().map(Visit::ser)).unwrap_or_default(),
        mild_pct: pct(&|s| category(s) == MyopiaCategory::LowMyopia),
        moderate_high_pct: pct(&|s| {
            matches!(category(s), MyopiaCategory::ModerateMyopia | MyopiaCategory::HighMyopia)
        }),
    })
}

pub fn write_stats_csv(path: &Path, rows: &[StatsRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Manifest CSV

pub const MANIFEST_HEADER: [&str; 10] = [
    "subject_id",
    "sex",
    "age_days_at_baseline",
    "visit_year",
    "image_path",
    "sphere_d",
    "cylinder_d",
    "axis_deg",
    "al_mm",
    "ct_um",
];

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    subject_id: String,
    sex: String,
    age_days_at_baseline: f64,
    visit_year: usize,
    image_path: String,
    sphere_d: f64,
    cylinder_d: f64,
    axis_deg: f64,
    al_mm: Option<f64>,
    ct_um: Option<f64>,
}

pub fn write_manifest(path: &Path, cohort: &Cohort) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for s in &cohort.subjects {
        for (&year, v) in &s.visits {
            w.serialize(ManifestRow {
                subject_id: s.subject_id.clone(),
                sex: s.sex.to_string(),
                age_days_at_baseline: s.age_days_at_baseline,
                visit_year: year,
                image_path: v.image_ref.clone().unwrap_or_default(),
                sphere_d: v.refraction.sphere,
                cylinder_d: v.refraction.cylinder,
                axis_deg: v.refraction.axis,
                al_mm: v.al_mm,
                ct_um: v.ct_um,
            })?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Parses and validates a manifest. Errors name the 1-based line.
pub fn read_manifest(path: &Path) -> Result<Cohort> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(file)
}

pub fn parse_manifest(input: impl std::io::Read) -> Result<Cohort> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers().map_err(|e| Error::Manifest {
        row: 1,
        message: e.to_string(),
    })?;
    if header.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
        return Err(Error::Manifest {
            row: 1,
            message: format!(
                "header must be {}, got {}",
                MANIFEST_HEADER.join(","),
                header.iter().collect::<Vec<_>>().join(",")
            ),
        });
    }
    let mut subjects: Vec<SubjectRecord> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for (i, rec) in r.deserialize::<ManifestRow>().enumerate() {
        let line = i + 2;
        let bad = |message: String| Error::Manifest { row: line, message };
        let row = rec.map_err(|e| bad(e.to_string()))?;
        if row.subject_id.trim().is_empty() {
            return Err(bad("empty subject_id".into()));
        }
        let sex: Sex = row.sex.parse().map_err(|e: Error| bad(e.to_string()))?;
        if !row.age_days_at_baseline.is_finite() || row.age_days_at_baseline < 0.0 {
            return Err(bad(format!("invalid age {}", row.age_days_at_baseline)));
        }
        if row.visit_year >= YEARS {
            return Err(bad(format!("visit_year {} outside 0..{YEARS}", row.visit_year)));
        }
        let refraction = Refraction::new(row.sphere_d, row.cylinder_d, row.axis_deg)
            .map_err(|e| bad(e.to_string()))?;
        for (name, v) in [("al_mm", row.al_mm), ("ct_um", row.ct_um)] {
            if v.is_some_and(|x| !x.is_finite() || x <= 0.0) {
                return Err(bad(format!("{name} must be positive")));
            }
        }
        let visit = Visit {
            image_ref: (!row.image_path.is_empty()).then_some(row.image_path),
            refraction,
            al_mm: row.al_mm,
            ct_um: row.ct_um,
        };
        let k = *index.entry(row.subject_id.clone()).or_insert_with(|| {
            subjects.push(SubjectRecord {
                subject_id: row.subject_id.clone(),
                sex,
                age_days_at_baseline: row.age_days_at_baseline,
                visits: BTreeMap::new(),
            });
            subjects.len() - 1
        });
        let s = &mut subjects[k];
        if s.sex != sex || s.age_days_at_baseline != row.age_days_at_baseline {
            return Err(bad(format!(
                "subject {} has inconsistent sex or baseline age",
                s.subject_id
            )));
        }
        if s.visits.insert(row.visit_year, visit).is_some() {
            return Err(bad(format!(
                "duplicate visit year {} for subject {}",
                row.visit_year, s.subject_id
            )));
        }
    }
    if subjects.is_empty() {
        return Err(Error::Manifest {
            row: 1,
            message: "manifest has no rows".into(),
        });
    }
    Ok(Cohort { subjects })
}

// ---------------------------------------------------------------------------
// Synthetic cohort

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthParams {
    pub subjects: usize,
    pub baseline_mean: f64,
    pub baseline_sd: f64,
    /// Slow progressors, D/yr: mean and sd.
    pub slow_rate: (f64, f64),
    /// Fast progressors, D/yr: mean and sd.
    pub fast_rate: (f64, f64),
    /// Probability of drawing from the fast component.
    pub fast_weight: f64,
    pub sigma_obs: f64,
    pub image_side: usize,
    pub biometry: bool,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            subjects: 600,
            baseline_mean: 1.0,
            baseline_sd: 1.0,
            slow_rate: (0.2, 0.1),
            fast_rate: (1.0, 0.2),
            fast_weight: 0.3,
            sigma_obs: 0.1,
            image_side: 64,
            biometry: true,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        let finite_sd = |x: f64| x.is_finite() && x >= 0.0;
        if self.subjects == 0 {
            return Err(Error::Config("synthetic cohort needs at least one subject".into()));
        }
        if !(0.0..=1.0).contains(&self.fast_weight) {
            return Err(Error::Config(format!("fast_weight {} outside [0, 1]", self.fast_weight)));
        }
        if ![self.baseline_sd, self.slow_rate.1, self.fast_rate.1, self.sigma_obs]
            .into_iter()
            .all(finite_sd)
            || ![self.baseline_mean, self.slow_rate.0, self.fast_rate.0]
                .iter()
                .all(|x| x.is_finite())
        {
            return Err(Error::Config("synthetic cohort moments must be finite, sds ≥ 0".into()));
        }
        if self.image_side < crate::imaging::MIN_SIDE {
            return Err(Error::Config(format!("image side {} too small", self.image_side)));
        }
        Ok(())
    }
}

/// Latent generator state kept alongside each record.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSubject {
    pub record: SubjectRecord,
    pub rate: f64,
    pub right_eye: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCohort {
    pub params: SynthParams,
    pub seed: u64,
    pub subjects: Vec<SynthSubject>,
}

fn normal(mean: f64, sd: f64) -> Normal<f64> {
    Normal::new(mean, sd).expect("validated moments")
}

/// Draws subjects with `SER_{t+1} = SER_t − rate + ε`. Image references
/// are `images/{subject}_y{year}.png`; pixels come from [`SynthCohort::render`].
pub fn synth_cohort(params: &SynthParams, seed: u64) -> Result<SynthCohort> {
    params.validate()?;
    let mut rng = substream(seed, "synth");
    let width = params.subjects.to_string().len().max(4);
    let mut subjects = Vec::with_capacity(params.subjects);
    for i in 0..params.subjects {
        let id = format!("S{:0width$}", i + 1);
        let sex = if rng.random_bool(0.5) { Sex::M } else { Sex::F };
        let age = normal(2600.0, 120.0).sample(&mut rng).round().max(1000.0);
        let (mu, sd) = if rng.random_bool(params.fast_weight) {
            params.fast_rate
        } else {
            params.slow_rate
        };
        let rate = normal(mu, sd).sample(&mut rng);
        let right_eye = rng.random_bool(0.5);
        let cyl_base = -normal(0.45, 0.25).sample(&mut rng).abs();
        let axis = rng.random_range(0.0..180.0);
        let ct = normal(540.0, 30.0).sample(&mut rng);
        let al0 = normal(22.8, 0.6).sample(&mut rng);
        let mut ser = normal(params.baseline_mean, params.baseline_sd).sample(&mut rng);
        let ser0 = ser;
        let mut visits = BTreeMap::new();
        for year in 0..YEARS {
            if year > 0 {
                ser = ser - rate + normal(0.0, params.sigma_obs).sample(&mut rng);
            }
            let cylinder = (cyl_base + normal(0.0, 0.05).sample(&mut rng)).min(0.0);
            let refraction = Refraction::new(ser - cylinder / 2.0, cylinder, axis)?;
            let (al_mm, ct_um) = if params.biometry {
                let al = al0 + 0.35 * (ser0 - ser) + normal(0.0, 0.02).sample(&mut rng);
                (Some(al), Some(ct + normal(0.0, 2.0).sample(&mut rng)))
            } else {
                (None, None)
            };
            visits.insert(
                year,
                Visit {
                    image_ref: Some(format!("images/{id}_y{year}.png")),
                    refraction,
                    al_mm,
                    ct_um,
                },
            );
        }
        subjects.push(SynthSubject {
            record: SubjectRecord {
                subject_id: id,
                sex,
                age_days_at_baseline: age,
                visits,
            },
            rate,
            right_eye,
        });
    }
    Ok(SynthCohort {
        params: params.clone(),
        seed,
        subjects,
    })
}

impl SynthCohort {
    pub fn cohort(&self) -> Cohort {
        Cohort {
            subjects: self.subjects.iter().map(|s| s.record.clone()).collect(),
        }
    }

    /// Fundus photograph of subject `i` at `year`; independent of other
    /// subjects, so images may be rendered in any order or in parallel.
    pub fn render(&self, i: usize, year: usize) -> Result<RawImage> {
        let s = &self.subjects[i];
        let visit = s.record.visits.get(&year).ok_or_else(|| {
            Error::Cohort(format!("subject {} has no year {year}", s.record.subject_id))
        })?;
        let p = FundusParams {
            ser: visit.ser(),
            rate: s.rate,
            right_eye: s.right_eye,
        };
        let seed = child_seed(self.seed, &format!("{}/{year}", s.record.subject_id));
        render_fundus(&p, self.params.image_side, seed)
    }
}
