//! Segmentation validity (Dice global / per-case) and uncertainty reliability
//! (ECE, negative-log ECE, uncertainty-error overlap) metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Floor applied to ECE before taking `-ln`.
pub const ECE_FLOOR: f64 = 1e-12;
pub const DEFAULT_ECE_BINS: usize = 10;

/// One evaluated slice. All vectors are row-major over the same pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub case_id: usize,
    pub pred: Vec<u8>,
    pub truth: Vec<u8>,
    /// Fused uncertainty per pixel, in `(0, 1]`.
    pub uncertainty: Vec<f64>,
    /// Probability of the predicted class per pixel.
    pub confidence: Vec<f64>,
}

impl EvalRecord {
    pub fn new(
        case_id: usize,
        pred: Vec<u8>,
        truth: Vec<u8>,
        uncertainty: Vec<f64>,
        confidence: Vec<f64>,
    ) -> Result<Self> {
        let n = pred.len();
        if truth.len() != n || uncertainty.len() != n || confidence.len() != n {
            return Err(shape_err("evaluation record grids differ in size"));
        }
        if uncertainty.iter().any(|u| !(*u > 0.0 && *u <= 1.0)) {
            return Err(Error::Domain("uncertainty outside (0, 1]".into()));
        }
        if confidence.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::Domain("confidence outside [0, 1]".into()));
        }
        Ok(Self {
            case_id,
            pred,
            truth,
            uncertainty,
            confidence,
        })
    }

    pub fn error_mask(&self) -> Vec<u8> {
        self.pred
            .iter()
            .zip(&self.truth)
            .map(|(p, t)| u8::from(p != t))
            .collect()
    }
}

fn overlap_counts(pred: &[u8], truth: &[u8]) -> (usize, usize, usize) {
    let mut inter = 0;
    let mut p = 0;
    let mut t = 0;
    for (a, b) in pred.iter().zip(truth) {
        let (a, b) = (*a != 0, *b != 0);
        inter += usize::from(a && b);
        p += usize::from(a);
        t += usize::from(b);
    }
    (inter, p, t)
}

fn dice_from_counts(inter: usize, p: usize, t: usize) -> f64 {
    if p + t == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (p + t) as f64
    }
}

/// `2|P∩T| / (|P| + |T|)`; two empty masks score 1.
pub fn dice_score(pred: &[u8], truth: &[u8]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(shape_err(format!("masks of {} and {} pixels", pred.len(), truth.len())));
    }
    let (i, p, t) = overlap_counts(pred, truth);
    Ok(dice_from_counts(i, p, t))
}

/// Mean of per-slice Dice.
pub fn dgs(records: &[EvalRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::EmptyInput("no slices to score".into()));
    }
    let mut total = 0.0;
    for r in records {
        total += dice_score(&r.pred, &r.truth)?;
    }
    Ok(total / records.len() as f64)
}

/// Mean over cases of the Dice computed on each case's pooled pixels.
pub fn dcs(records: &[EvalRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::EmptyInput("no cases to score".into()));
    }
    let mut cases: BTreeMap<usize, (usize, usize, usize)> = BTreeMap::new();
    for r in records {
        if r.pred.len() != r.truth.len() {
            return Err(shape_err("prediction and truth differ in size"));
        }
        let (i, p, t) = overlap_counts(&r.pred, &r.truth);
        let e = cases.entry(r.case_id).or_default();
        e.0 += i;
        e.1 += p;
        e.2 += t;
    }
    let total: f64 = cases.values().map(|(i, p, t)| dice_from_counts(*i, *p, *t)).sum();
    Ok(total / cases.len() as f64)
}

/// Expected calibration error over `(confidence, correct)` pairs with
/// `n_bins` equal-width bins on `[0, 1]`.
pub fn ece_pairs(confidence: &[f64], correct: &[bool], n_bins: usize) -> Result<f64> {
    if confidence.len() != correct.len() {
        return Err(shape_err("confidence and correctness differ in length"));
    }
    if confidence.is_empty() {
        return Err(Error::EmptyInput("no predictions to calibrate".into()));
    }
    if n_bins == 0 {
        return Err(Error::Config("ECE needs at least one bin".into()));
    }
    let mut count = vec![0usize; n_bins];
    let mut conf_sum = vec![0.0; n_bins];
    let mut hits = vec![0usize; n_bins];
    for (c, ok) in confidence.iter().zip(correct) {
        if !(0.0..=1.0).contains(c) {
            return Err(Error::Domain(format!("confidence {c} outside [0, 1]")));
        }
        let b = ((c * n_bins as f64) as usize).min(n_bins - 1);
        count[b] += 1;
        conf_sum[b] += c;
        hits[b] += usize::from(*ok);
    }
    let m = confidence.len() as f64;
    Ok((0..n_bins)
        .filter(|b| count[*b] > 0)
        .map(|b| {
            let n = count[b] as f64;
            (n / m) * (hits[b] as f64 / n - conf_sum[b] / n).abs()
        })
        .sum())
}

/// Pixel-level ECE pooled over all records.
pub fn ece(records: &[EvalRecord], n_bins: usize) -> Result<f64> {
    let conf: Vec<f64> = records.iter().flat_map(|r| r.confidence.iter().copied()).collect();
    let correct: Vec<bool> = records
        .iter()
        .flat_map(|r| r.pred.iter().zip(&r.truth).map(|(p, t)| p == t))
        .collect();
    ece_pairs(&conf, &correct, n_bins)
}

pub fn neg_log_ece(ece: f64) -> f64 {
    -ece.max(ECE_FLOOR).ln()
}

/// Thresholds swept by [`ueo`]: 0.01, 0.02, …, 0.99.
pub fn ueo_thresholds() -> impl Iterator<Item = f64> {
    (1..=99).map(|i| i as f64 / 100.0)
}

/// Uncertainty-error overlap: the uncertainty map is min-max normalized and
/// the best Dice between `u > τ` and the error mask over the threshold sweep
/// is returned.
pub fn ueo(uncertainty: &[f64], errors: &[u8]) -> Result<f64> {
    if uncertainty.len() != errors.len() {
        return Err(shape_err("uncertainty and error maps differ in size"));
    }
    if uncertainty.is_empty() {
        return Err(Error::EmptyInput("empty uncertainty map".into()));
    }
    let lo = uncertainty.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = uncertainty.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let norm: Vec<f64> = if span > 0.0 {
        uncertainty.iter().map(|u| (u - lo) / span).collect()
    } else {
        vec![0.0; uncertainty.len()]
    };
    let mut best: f64 = 0.0;
    let mut thresholded = vec![0u8; norm.len()];
    for tau in ueo_thresholds() {
        for (t, u) in thresholded.iter_mut().zip(&norm) {
            *t = u8::from(*u > tau);
        }
        best = best.max(dice_score(&thresholded, errors)?);
    }
    Ok(best)
}

/// Mean over cases of [`ueo`] computed on each case's pooled pixels.
pub fn ueo_by_case(records: &[EvalRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::EmptyInput("no cases to score".into()));
    }
    let mut cases: BTreeMap<usize, (Vec<f64>, Vec<u8>)> = BTreeMap::new();
    for r in records {
        let e = cases.entry(r.case_id).or_default();
        e.0.extend_from_slice(&r.uncertainty);
        e.1.extend(r.error_mask());
    }
    let mut total = 0.0;
    for (u, err) in cases.values() {
        total += ueo(u, err)?;
    }
    Ok(total / cases.len() as f64)
}

/// Pearson correlation between per-case predicted and true volumes.
pub fn volume_correlation(predicted: &[f64], truth: &[f64]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(shape_err("volume vectors differ in length"));
    }
    if predicted.len() < 2 {
        return Err(Error::DegenerateCorrelation("need at least two cases".into()));
    }
    let n = predicted.len() as f64;
    let mx = predicted.iter().sum::<f64>() / n;
    let my = truth.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in predicted.iter().zip(truth) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::DegenerateCorrelation("constant volume vector".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Per-case (predicted, true) lesion pixel counts, ordered by case id.
pub fn case_volumes(records: &[EvalRecord]) -> (Vec<f64>, Vec<f64>) {
    let mut cases: BTreeMap<usize, (f64, f64)> = BTreeMap::new();
    for r in records {
        let e = cases.entry(r.case_id).or_default();
        e.0 += r.pred.iter().filter(|v| **v != 0).count() as f64;
        e.1 += r.truth.iter().filter(|v| **v != 0).count() as f64;
    }
    cases.values().copied().unzip()
}

/// Column order of [`MetricsReport::csv_row`].
pub const CSV_COLUMNS: [&str; 14] = [
    "run_id",
    "fusion",
    "perturb_kind",
    "perturb_param",
    "dgs",
    "dcs",
    "ece",
    "neg_log_ece",
    "ueo",
    "mean_u_fused",
    "mean_u_nc",
    "mean_u_art",
    "mean_u_pv",
    "mean_u_de",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub run_id: String,
    pub fusion: String,
    pub perturb_kind: String,
    pub perturb_param: String,
    pub dgs: f64,
    pub dcs: f64,
    pub ece: f64,
    pub neg_log_ece: f64,
    pub ueo: f64,
    pub pearson_r: Option<f64>,
    pub mean_u_fused: f64,
    /// Mean per-phase uncertainty in NC, ART, PV, DE order; `None` when the
    /// phase was never present.
    pub mean_u_phase: [Option<f64>; 4],
    pub n_slices: usize,
    pub n_cases: usize,
    pub present_min: usize,
    pub present_max: usize,
    pub seed: u64,
    pub config_hash: String,
}

fn fmt_f(v: f64) -> String {
    format!("{v:.6}")
}

impl MetricsReport {
    pub fn csv_header() -> String {
        CSV_COLUMNS.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cols = vec![
            self.run_id.clone(),
            self.fusion.clone(),
            self.perturb_kind.clone(),
            self.perturb_param.clone(),
            fmt_f(self.dgs),
            fmt_f(self.dcs),
            fmt_f(self.ece),
            fmt_f(self.neg_log_ece),
            fmt_f(self.ueo),
            fmt_f(self.mean_u_fused),
        ];
        cols.extend(
            self.mean_u_phase
                .iter()
                .map(|u| u.map(fmt_f).unwrap_or_else(|| "nan".to_string())),
        );
        cols.join(",")
    }
}
