//! Subjective-logic opinions over `N` categories.
//!
//! Evidence `e` maps to a Dirichlet `α = e + 1`, which maps to an opinion
//! `b = (α - 1) / S`, `u = N / S` with `S = Σα`. Opinions from several experts
//! are fused with the reduced Dempster rule, whose focal sets are the
//! singletons plus the whole frame.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Tolerance on `Σb + u = 1`.
pub const NORMALIZATION_TOL: f64 = 1e-9;

/// Conflict at or above `1 - TOTAL_CONFLICT_EPS` cannot be renormalized.
pub const TOTAL_CONFLICT_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategorySet {
    labels: Vec<String>,
}

impl CategorySet {
    pub fn new(labels: Vec<String>) -> Result<Self> {
        if labels.len() < 2 {
            return Err(Error::Config(format!(
                "need at least 2 categories, got {}",
                labels.len()
            )));
        }
        Ok(Self { labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }
}

impl Default for CategorySet {
    fn default() -> Self {
        Self {
            labels: vec!["background".to_string(), "HCC".to_string()],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DirichletParams {
    alphas: Vec<f64>,
}

impl DirichletParams {
    pub fn new(alphas: Vec<f64>) -> Result<Self> {
        if alphas.len() < 2 {
            return Err(Error::InvalidEvidence(format!(
                "need at least 2 categories, got {}",
                alphas.len()
            )));
        }
        if let Some(a) = alphas.iter().find(|a| !a.is_finite() || **a < 1.0) {
            return Err(Error::InvalidEvidence(format!(
                "Dirichlet parameter {a} is not a finite value >= 1"
            )));
        }
        Ok(Self { alphas })
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn n_categories(&self) -> usize {
        self.alphas.len()
    }

    /// Dirichlet strength `S = Σα`.
    pub fn strength(&self) -> f64 {
        self.alphas.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Opinion {
    beliefs: Vec<f64>,
    uncertainty: f64,
}

impl Opinion {
    pub fn new(beliefs: Vec<f64>, uncertainty: f64) -> Result<Self> {
        if beliefs.len() < 2 {
            return Err(Error::InvalidOpinion(format!(
                "need at least 2 categories, got {}",
                beliefs.len()
            )));
        }
        if beliefs.iter().any(|b| !b.is_finite() || *b < 0.0)
            || !uncertainty.is_finite()
            || uncertainty < 0.0
        {
            return Err(Error::InvalidOpinion(
                "masses must be finite and non-negative".into(),
            ));
        }
        let total = beliefs.iter().sum::<f64>() + uncertainty;
        if (total - 1.0).abs() > NORMALIZATION_TOL {
            return Err(Error::InvalidOpinion(format!(
                "masses sum to {total}, expected 1"
            )));
        }
        Ok(Self {
            beliefs,
            uncertainty,
        })
    }

    /// All mass on the whole frame: no evidence for any category.
    pub fn vacuous(n_categories: usize) -> Self {
        Self {
            beliefs: vec![0.0; n_categories],
            uncertainty: 1.0,
        }
    }

    pub fn beliefs(&self) -> &[f64] {
        &self.beliefs
    }

    pub fn uncertainty(&self) -> f64 {
        self.uncertainty
    }

    pub fn n_categories(&self) -> usize {
        self.beliefs.len()
    }

    pub fn combine(&self, other: &Opinion) -> Result<Opinion> {
        combine(self, other)
    }
}

pub fn evidence_to_alpha(evidence: &[f64]) -> Result<DirichletParams> {
    if let Some(e) = evidence.iter().find(|e| !e.is_finite() || **e < 0.0) {
        return Err(Error::InvalidEvidence(format!(
            "evidence {e} is not a finite non-negative value"
        )));
    }
    DirichletParams::new(evidence.iter().map(|e| e + 1.0).collect())
}

pub fn alpha_to_opinion(params: &DirichletParams) -> Opinion {
    let s = params.strength();
    Opinion {
        beliefs: params.alphas.iter().map(|a| (a - 1.0) / s).collect(),
        uncertainty: params.n_categories() as f64 / s,
    }
}

/// Mean of the Dirichlet: `p = α / S`.
pub fn expected_probability(params: &DirichletParams) -> Vec<f64> {
    let s = params.strength();
    params.alphas.iter().map(|a| a / s).collect()
}

/// Inverse of [`alpha_to_opinion`]. Requires `u > 0`.
pub fn opinion_to_alpha(op: &Opinion) -> Result<DirichletParams> {
    if op.uncertainty <= 0.0 {
        return Err(Error::DegenerateOpinion);
    }
    let s = op.n_categories() as f64 / op.uncertainty;
    DirichletParams::new(op.beliefs.iter().map(|b| b * s + 1.0).collect())
}

/// Prediction of an opinion, `p = b + u / N`: the Dirichlet mean of the
/// parameters reconstructed from the opinion.
pub fn fused_prediction(op: &Opinion) -> Result<Vec<f64>> {
    if op.uncertainty <= 0.0 {
        return Err(Error::DegenerateOpinion);
    }
    let share = op.uncertainty / op.n_categories() as f64;
    Ok(op.beliefs.iter().map(|b| b + share).collect())
}

/// Mass assigned to contradictory category pairs, `Σ_{n≠m} b1_n b2_m`.
pub fn conflict(a: &Opinion, b: &Opinion) -> Result<f64> {
    check_same_n(a, b)?;
    Ok(conflict_raw(&a.beliefs, &b.beliefs))
}

pub fn combine(a: &Opinion, b: &Opinion) -> Result<Opinion> {
    check_same_n(a, b)?;
    let mut beliefs = vec![0.0; a.n_categories()];
    let uncertainty = combine_raw(
        &a.beliefs,
        a.uncertainty,
        &b.beliefs,
        b.uncertainty,
        &mut beliefs,
    )?;
    Ok(Opinion {
        beliefs,
        uncertainty,
    })
}

/// Left fold of [`combine`] in list order.
pub fn combine_many(opinions: &[Opinion]) -> Result<Opinion> {
    let (first, rest) = opinions.split_first().ok_or(Error::EmptyFusion)?;
    rest.iter().try_fold(first.clone(), |acc, op| combine(&acc, op))
}

fn check_same_n(a: &Opinion, b: &Opinion) -> Result<()> {
    if a.n_categories() != b.n_categories() {
        return Err(shape_err(format!(
            "opinions over {} and {} categories",
            a.n_categories(),
            b.n_categories()
        )));
    }
    Ok(())
}

pub(crate) fn conflict_raw(b1: &[f64], b2: &[f64]) -> f64 {
    let mut c = 0.0;
    for (n1, x) in b1.iter().enumerate() {
        for (n2, y) in b2.iter().enumerate() {
            if n1 != n2 {
                c += x * y;
            }
        }
    }
    c
}

/// Reduced Dempster rule on raw masses; writes fused beliefs into `out` and
/// returns the fused uncertainty.
pub(crate) fn combine_raw(b1: &[f64], u1: f64, b2: &[f64], u2: f64, out: &mut [f64]) -> Result<f64> {
    let c = conflict_raw(b1, b2);
    if c >= 1.0 - TOTAL_CONFLICT_EPS {
        return Err(Error::TotalConflict(c));
    }
    let scale = 1.0 / (1.0 - c);
    for ((o, x), y) in out.iter_mut().zip(b1).zip(b2) {
        *o = scale * (x * y + x * u2 + y * u1);
    }
    Ok(scale * u1 * u2)
}

/// Reverse pass of [`combine_raw`]. Given the inputs and the gradients of
/// some objective w.r.t. the fused beliefs and uncertainty, accumulates the
/// gradients w.r.t. both input opinions.
#[allow(clippy::too_many_arguments)]
pub(crate) fn combine_raw_backward(
    b1: &[f64],
    u1: f64,
    b2: &[f64],
    u2: f64,
    grad_b: &[f64],
    grad_u: f64,
    grad_b1: &mut [f64],
    grad_u1: &mut f64,
    grad_b2: &mut [f64],
    grad_u2: &mut f64,
) {
    let c = conflict_raw(b1, b2);
    let k = 1.0 - c;
    let sum1: f64 = b1.iter().sum();
    let sum2: f64 = b2.iter().sum();
    // d(out)/dK = -out/K for every fused mass
    let mut grad_k = -grad_u * u1 * u2 / (k * k);
    for n in 0..b1.len() {
        let num = b1[n] * b2[n] + b1[n] * u2 + b2[n] * u1;
        grad_k -= grad_b[n] * num / (k * k);
    }
    let grad_c = -grad_k;
    for n in 0..b1.len() {
        let g_num = grad_b[n] / k;
        grad_b1[n] += g_num * (b2[n] + u2) + grad_c * (sum2 - b2[n]);
        grad_b2[n] += g_num * (b1[n] + u1) + grad_c * (sum1 - b1[n]);
        *grad_u1 += g_num * b2[n];
        *grad_u2 += g_num * b1[n];
    }
    *grad_u1 += grad_u * u2 / k;
    *grad_u2 += grad_u * u1 / k;
}

/// Per-pixel, per-category evidence, stored category-major
/// (`data[n * H * W + i * W + j]`).
#[derive(Debug, Clone, PartialEq)]
pub struct EvidenceMap {
    pub n_categories: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl EvidenceMap {
    pub fn new(n_categories: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n_categories * height * width {
            return Err(shape_err(format!(
                "evidence map {n_categories}x{height}x{width} given {} values",
                data.len()
            )));
        }
        if let Some(e) = data.iter().find(|e| !e.is_finite() || **e < 0.0) {
            return Err(Error::InvalidEvidence(format!(
                "evidence {e} is not a finite non-negative value"
            )));
        }
        Ok(Self {
            n_categories,
            height,
            width,
            data,
        })
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn at(&self, n: usize, i: usize, j: usize) -> f64 {
        self.data[n * self.pixels() + i * self.width + j]
    }
}

/// An `H × W` field of opinions sharing the same `N`, category-major like
/// [`EvidenceMap`].
#[derive(Debug, Clone, PartialEq)]
pub struct OpinionGrid {
    pub n_categories: usize,
    pub height: usize,
    pub width: usize,
    pub beliefs: Vec<f64>,
    pub uncertainty: Vec<f64>,
}

impl OpinionGrid {
    pub fn vacuous(n_categories: usize, height: usize, width: usize) -> Self {
        Self {
            n_categories,
            height,
            width,
            beliefs: vec![0.0; n_categories * height * width],
            uncertainty: vec![1.0; height * width],
        }
    }

    pub fn from_evidence(evidence: &EvidenceMap) -> Self {
        let px = evidence.pixels();
        let nc = evidence.n_categories;
        let mut grid = Self::vacuous(nc, evidence.height, evidence.width);
        for p in 0..px {
            let s: f64 = (0..nc).map(|n| evidence.data[n * px + p]).sum::<f64>() + nc as f64;
            for n in 0..nc {
                grid.beliefs[n * px + p] = evidence.data[n * px + p] / s;
            }
            grid.uncertainty[p] = nc as f64 / s;
        }
        grid
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn get(&self, i: usize, j: usize) -> Opinion {
        let p = i * self.width + j;
        self.opinion_at(p)
    }

    pub(crate) fn opinion_at(&self, p: usize) -> Opinion {
        let px = self.pixels();
        Opinion {
            beliefs: (0..self.n_categories).map(|n| self.beliefs[n * px + p]).collect(),
            uncertainty: self.uncertainty[p],
        }
    }

    pub(crate) fn beliefs_at(&self, p: usize, out: &mut [f64]) {
        let px = self.pixels();
        for (n, o) in out.iter_mut().enumerate() {
            *o = self.beliefs[n * px + p];
        }
    }

    fn check_compatible(&self, other: &OpinionGrid) -> Result<()> {
        if (self.n_categories, self.height, self.width)
            != (other.n_categories, other.height, other.width)
        {
            return Err(shape_err(format!(
                "opinion grids {}x{}x{} and {}x{}x{}",
                self.n_categories,
                self.height,
                self.width,
                other.n_categories,
                other.height,
                other.width
            )));
        }
        Ok(())
    }

    /// Pixel-wise reduced Dempster combination.
    pub fn combine(&self, other: &OpinionGrid) -> Result<OpinionGrid> {
        self.check_compatible(other)?;
        let px = self.pixels();
        let nc = self.n_categories;
        let mut out = OpinionGrid::vacuous(nc, self.height, self.width);
        let (mut b1, mut b2, mut bo) = (vec![0.0; nc], vec![0.0; nc], vec![0.0; nc]);
        for p in 0..px {
            self.beliefs_at(p, &mut b1);
            other.beliefs_at(p, &mut b2);
            out.uncertainty[p] =
                combine_raw(&b1, self.uncertainty[p], &b2, other.uncertainty[p], &mut bo)?;
            for n in 0..nc {
                out.beliefs[n * px + p] = bo[n];
            }
        }
        Ok(out)
    }

    /// Left fold of [`OpinionGrid::combine`].
    pub fn combine_many(grids: &[&OpinionGrid]) -> Result<OpinionGrid> {
        let (first, rest) = grids.split_first().ok_or(Error::EmptyFusion)?;
        rest.iter()
            .try_fold((*first).clone(), |acc, g| acc.combine(g))
    }

    /// Arithmetic mean of beliefs and uncertainties, renormalized per pixel.
    pub fn average(grids: &[&OpinionGrid]) -> Result<OpinionGrid> {
        let (first, rest) = grids.split_first().ok_or(Error::EmptyFusion)?;
        for g in rest {
            first.check_compatible(g)?;
        }
        let k = grids.len() as f64;
        let mut out = (*first).clone();
        for g in rest {
            for (o, x) in out.beliefs.iter_mut().zip(&g.beliefs) {
                *o += x;
            }
            for (o, x) in out.uncertainty.iter_mut().zip(&g.uncertainty) {
                *o += x;
            }
        }
        let px = out.pixels();
        for p in 0..px {
            let mut total = out.uncertainty[p] / k;
            for n in 0..out.n_categories {
                total += out.beliefs[n * px + p] / k;
            }
            let scale = 1.0 / (k * total);
            out.uncertainty[p] *= scale;
            for n in 0..out.n_categories {
                out.beliefs[n * px + p] *= scale;
            }
        }
        Ok(out)
    }

    /// Per-pixel `p = b + u / N`, category-major.
    pub fn prediction(&self) -> Result<Vec<f64>> {
        let px = self.pixels();
        let nc = self.n_categories as f64;
        if self.uncertainty.iter().any(|u| *u <= 0.0) {
            return Err(Error::DegenerateOpinion);
        }
        Ok(self
            .beliefs
            .iter()
            .enumerate()
            .map(|(idx, b)| b + self.uncertainty[idx % px] / nc)
            .collect())
    }

    /// Dirichlet parameters reconstructed from each pixel's opinion,
    /// category-major.
    pub fn to_alphas(&self) -> Result<Vec<f64>> {
        let px = self.pixels();
        let nc = self.n_categories as f64;
        if self.uncertainty.iter().any(|u| *u <= 0.0) {
            return Err(Error::DegenerateOpinion);
        }
        Ok(self
            .beliefs
            .iter()
            .enumerate()
            .map(|(idx, b)| b * nc / self.uncertainty[idx % px] + 1.0)
            .collect())
    }

    /// Hard label per pixel (argmax of beliefs; ties go to the lower index).
    pub fn argmax(&self) -> Vec<usize> {
        let px = self.pixels();
        (0..px)
            .map(|p| {
                let mut best = 0;
                for n in 1..self.n_categories {
                    if self.beliefs[n * px + p] > self.beliefs[best * px + p] {
                        best = n;
                    }
                }
                best
            })
            .collect()
    }
}
