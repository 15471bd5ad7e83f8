//! Training objective: soft Dice plus the closed-form Dirichlet expectation of
//! cross-entropy, applied to every phase expert and to the fused opinion.
//!
//! All grids here are category-major flat slices (`v[n * H * W + pixel]`),
//! matching [`EvidenceMap`]. Sums run in a fixed order so loss values are
//! reproducible bit-for-bit.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::opinion::{combine_raw, combine_raw_backward, EvidenceMap};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Weight of the averaged phase-wise term.
    pub lambda_p: f64,
    /// Weight of the mixture-wise (fused) term.
    pub lambda_m: f64,
    /// Smoothing constant of the soft Dice ratio.
    pub dice_smooth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_p: 0.5,
            lambda_m: 1.0,
            dice_smooth: 1e-5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_p >= 0.0 && self.lambda_m >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if !(self.dice_smooth > 0.0) {
            return Err(Error::Config("dice smoothing must be positive".into()));
        }
        Ok(())
    }
}

/// Per-pixel class labels; the one-hot vector of pixel `p` has its 1 at
/// `labels[p]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthGrid {
    pub n_categories: usize,
    pub height: usize,
    pub width: usize,
    pub labels: Vec<usize>,
}

impl GroundTruthGrid {
    pub fn new(n_categories: usize, height: usize, width: usize, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(shape_err(format!(
                "label grid {height}x{width} given {} labels",
                labels.len()
            )));
        }
        if let Some(l) = labels.iter().find(|l| **l >= n_categories) {
            return Err(Error::Config(format!(
                "label {l} outside {n_categories} categories"
            )));
        }
        Ok(Self {
            n_categories,
            height,
            width,
            labels,
        })
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    fn expect_len(&self, what: &str, len: usize) -> Result<()> {
        let want = self.n_categories * self.pixels();
        if len != want {
            return Err(shape_err(format!("{what} has {len} values, expected {want}")));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// special functions
// ---------------------------------------------------------------------------

const SHIFT_TO: f64 = 6.0;

/// Digamma ψ(x) for `x > 0`.
pub fn digamma(x: f64) -> Result<f64> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(Error::Domain(format!("digamma undefined at {x}")));
    }
    Ok(digamma_unchecked(x))
}

/// Trigamma ψ'(x) for `x > 0`.
pub fn trigamma(x: f64) -> Result<f64> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(Error::Domain(format!("trigamma undefined at {x}")));
    }
    Ok(trigamma_unchecked(x))
}

pub(crate) fn digamma_unchecked(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < SHIFT_TO {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    // Bernoulli series through x^-12
    let series = inv2
        * (1.0 / 12.0
            - inv2
                * (1.0 / 120.0
                    - inv2
                        * (1.0 / 252.0
                            - inv2 * (1.0 / 240.0 - inv2 * (1.0 / 132.0 - inv2 * (691.0 / 32760.0))))));
    acc + x.ln() - 0.5 * inv - series
}

pub(crate) fn trigamma_unchecked(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < SHIFT_TO {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let series = inv
        * inv2
        * (1.0 / 6.0
            - inv2
                * (1.0 / 30.0
                    - inv2
                        * (1.0 / 42.0
                            - inv2
                                * (1.0 / 30.0
                                    - inv2 * (5.0 / 66.0 - inv2 * (691.0 / 2730.0 - inv2 * (7.0 / 6.0)))))));
    acc + inv + 0.5 * inv2 + series
}

// ---------------------------------------------------------------------------
// loss values
// ---------------------------------------------------------------------------

/// `Σ_pixels ψ(S) - ψ(α_t)` where `t` is the true class.
pub fn evidence_loss(y: &GroundTruthGrid, alphas: &[f64]) -> Result<f64> {
    y.expect_len("alpha grid", alphas.len())?;
    if let Some(a) = alphas.iter().find(|a| !(**a >= 1.0) || !a.is_finite()) {
        return Err(Error::InvalidEvidence(format!("Dirichlet parameter {a} < 1")));
    }
    let px = y.pixels();
    let mut total = 0.0;
    for (p, &t) in y.labels.iter().enumerate() {
        let s: f64 = (0..y.n_categories).map(|n| alphas[n * px + p]).sum();
        total += digamma_unchecked(s) - digamma_unchecked(alphas[t * px + p]);
    }
    Ok(total)
}

/// [`evidence_loss`] divided by the pixel count, for reporting.
pub fn evidence_loss_mean(y: &GroundTruthGrid, alphas: &[f64]) -> Result<f64> {
    Ok(evidence_loss(y, alphas)? / y.pixels() as f64)
}

/// Class-averaged smooth soft Dice loss over probabilities `p`.
pub fn dice_loss(y: &GroundTruthGrid, p: &[f64], smooth: f64) -> Result<f64> {
    y.expect_len("probability grid", p.len())?;
    let (inter, pred, truth) = dice_sums(y, p);
    let nc = y.n_categories as f64;
    let mut ratio = 0.0;
    for n in 0..y.n_categories {
        ratio += (2.0 * inter[n] + smooth) / (truth[n] + pred[n] + smooth);
    }
    Ok(1.0 - ratio / nc)
}

fn dice_sums(y: &GroundTruthGrid, p: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let px = y.pixels();
    let nc = y.n_categories;
    let mut inter = vec![0.0; nc];
    let mut pred = vec![0.0; nc];
    let mut truth = vec![0.0; nc];
    for n in 0..nc {
        for (q, &t) in y.labels.iter().enumerate() {
            let v = p[n * px + q];
            pred[n] += v;
            if t == n {
                inter[n] += v;
                truth[n] += 1.0;
            }
        }
    }
    (inter, pred, truth)
}

/// `L_γ = dice_loss + evidence_loss`.
pub fn combined_loss(y: &GroundTruthGrid, p: &[f64], alphas: &[f64], smooth: f64) -> Result<f64> {
    Ok(dice_loss(y, p, smooth)? + evidence_loss(y, alphas)?)
}

/// `(λ_p / |S|) Σ_s L_γ(y, p^s, α^s) + λ_m L_γ(y, p, α)`.
pub fn total_loss(
    y: &GroundTruthGrid,
    per_phase: &[(&[f64], &[f64])],
    fused: (&[f64], &[f64]),
    weights: &LossWeights,
) -> Result<f64> {
    Ok(total_loss_parts(y, per_phase, fused, weights)?.total)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub total: f64,
    /// Weighted phase-wise contribution, `(λ_p / |S|) Σ_s L_γ`.
    pub phase_term: f64,
    /// Weighted mixture-wise contribution, `λ_m L_γ`.
    pub mixture_term: f64,
}

pub fn total_loss_parts(
    y: &GroundTruthGrid,
    per_phase: &[(&[f64], &[f64])],
    fused: (&[f64], &[f64]),
    weights: &LossWeights,
) -> Result<LossParts> {
    if per_phase.is_empty() {
        return Err(Error::EmptyFusion);
    }
    let mut phase_sum = 0.0;
    for (p, a) in per_phase {
        phase_sum += combined_loss(y, p, a, weights.dice_smooth)?;
    }
    let phase_term = weights.lambda_p / per_phase.len() as f64 * phase_sum;
    let mixture_term = weights.lambda_m * combined_loss(y, fused.0, fused.1, weights.dice_smooth)?;
    Ok(LossParts {
        total: phase_term + mixture_term,
        phase_term,
        mixture_term,
    })
}

// ---------------------------------------------------------------------------
// gradients w.r.t. evidence
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct LossGradients {
    pub parts: LossParts,
    /// `∂L/∂e` for each input evidence map, same layout as the map.
    pub grads: Vec<Vec<f64>>,
}

/// Gradient of the soft Dice loss w.r.t. every probability value.
fn dice_grad(y: &GroundTruthGrid, p: &[f64], smooth: f64) -> (f64, Vec<f64>) {
    let px = y.pixels();
    let nc = y.n_categories;
    let (inter, pred, truth) = dice_sums(y, p);
    let mut ratio = 0.0;
    let mut grad = vec![0.0; p.len()];
    for n in 0..nc {
        let den = truth[n] + pred[n] + smooth;
        let num = 2.0 * inter[n] + smooth;
        ratio += num / den;
        let common = num / (den * den);
        for (q, &t) in y.labels.iter().enumerate() {
            let hit = if t == n { 2.0 / den } else { 0.0 };
            grad[n * px + q] = -(hit - common) / nc as f64;
        }
    }
    (1.0 - ratio / nc as f64, grad)
}

/// Full objective and its analytic gradient w.r.t. the evidence of every
/// present phase. Phases are fused in the order given.
pub fn loss_gradients(
    y: &GroundTruthGrid,
    evidence: &[&EvidenceMap],
    weights: &LossWeights,
) -> Result<LossGradients> {
    weights.validate()?;
    if evidence.is_empty() {
        return Err(Error::EmptyFusion);
    }
    let nc = y.n_categories;
    let px = y.pixels();
    for e in evidence {
        if (e.n_categories, e.height, e.width) != (nc, y.height, y.width) {
            return Err(shape_err(format!(
                "evidence map {}x{}x{} vs ground truth {}x{}x{}",
                e.n_categories, e.height, e.width, nc, y.height, y.width
            )));
        }
    }
    let n_phases = evidence.len();
    let phase_w = weights.lambda_p / n_phases as f64;
    let nc_f = nc as f64;

    let mut grads = Vec::with_capacity(n_phases);
    let mut phase_sum = 0.0;

    // phase-wise terms: p^s = α/S, evidence loss on α = e + 1
    for e in evidence {
        let mut probs = vec![0.0; nc * px];
        let mut strength = vec![0.0; px];
        for (p, s) in strength.iter_mut().enumerate() {
            *s = (0..nc).map(|n| e.data[n * px + p] + 1.0).sum();
            for n in 0..nc {
                probs[n * px + p] = (e.data[n * px + p] + 1.0) / *s;
            }
        }
        let (dice, g_prob) = dice_grad(y, &probs, weights.dice_smooth);
        let mut ev = 0.0;
        let mut g = vec![0.0; nc * px];
        for (p, &t) in y.labels.iter().enumerate() {
            let s = strength[p];
            let a_t = e.data[t * px + p] + 1.0;
            ev += digamma_unchecked(s) - digamma_unchecked(a_t);
            let tri_s = trigamma_unchecked(s);
            let dot: f64 = (0..nc).map(|n| g_prob[n * px + p] * probs[n * px + p]).sum();
            for n in 0..nc {
                let mut ga = (g_prob[n * px + p] - dot) / s + tri_s;
                if n == t {
                    ga -= trigamma_unchecked(a_t);
                }
                g[n * px + p] = phase_w * ga;
            }
        }
        phase_sum += dice + ev;
        grads.push(g);
    }

    // mixture-wise term through the fold of the combination rule
    let mut beliefs: Vec<Vec<f64>> = Vec::with_capacity(n_phases);
    let mut uncert: Vec<Vec<f64>> = Vec::with_capacity(n_phases);
    for e in evidence {
        let mut b = vec![0.0; nc * px];
        let mut u = vec![0.0; px];
        for p in 0..px {
            let s: f64 = (0..nc).map(|n| e.data[n * px + p]).sum::<f64>() + nc_f;
            for n in 0..nc {
                b[n * px + p] = e.data[n * px + p] / s;
            }
            u[p] = nc_f / s;
        }
        beliefs.push(b);
        uncert.push(u);
    }

    // acc[k] = phase_0 ⊕ … ⊕ phase_k, kept per pixel for the reverse pass
    let mut acc_b: Vec<Vec<f64>> = vec![beliefs[0].clone()];
    let mut acc_u: Vec<Vec<f64>> = vec![uncert[0].clone()];
    let (mut b1, mut b2, mut bo) = (vec![0.0; nc], vec![0.0; nc], vec![0.0; nc]);
    for k in 1..n_phases {
        let mut nb = vec![0.0; nc * px];
        let mut nu = vec![0.0; px];
        for p in 0..px {
            for n in 0..nc {
                b1[n] = acc_b[k - 1][n * px + p];
                b2[n] = beliefs[k][n * px + p];
            }
            nu[p] = combine_raw(&b1, acc_u[k - 1][p], &b2, uncert[k][p], &mut bo)?;
            for n in 0..nc {
                nb[n * px + p] = bo[n];
            }
        }
        acc_b.push(nb);
        acc_u.push(nu);
    }
    let fused_b = &acc_b[n_phases - 1];
    let fused_u = &acc_u[n_phases - 1];
    if fused_u.iter().any(|u| *u <= 0.0) {
        return Err(Error::DegenerateOpinion);
    }
    let fused_p: Vec<f64> = (0..nc * px).map(|i| fused_b[i] + fused_u[i % px] / nc_f).collect();
    let (fused_dice, g_fp) = dice_grad(y, &fused_p, weights.dice_smooth);
    let mut fused_ev = 0.0;
    let mut g_b = vec![0.0; nc * px];
    let mut g_u = vec![0.0; px];
    for (p, &t) in y.labels.iter().enumerate() {
        let u = fused_u[p];
        let s = nc_f / u;
        let a_t = fused_b[t * px + p] * s + 1.0;
        fused_ev += digamma_unchecked(s) - digamma_unchecked(a_t);
        let tri_a = trigamma_unchecked(a_t);
        let tri_s = trigamma_unchecked(s);
        let mut gu = (nc_f / (u * u)) * (fused_b[t * px + p] * tri_a - tri_s);
        for n in 0..nc {
            let mut gb = g_fp[n * px + p];
            gu += g_fp[n * px + p] / nc_f;
            if n == t {
                gb -= tri_a * s;
            }
            g_b[n * px + p] = weights.lambda_m * gb;
        }
        g_u[p] = weights.lambda_m * gu;
    }

    // reverse through the fold: (g_b, g_u) holds the gradient w.r.t. acc[k]
    let mut gb_in = vec![0.0; nc];
    let mut g1 = vec![0.0; nc];
    let mut g2 = vec![0.0; nc];
    let mut phase_gb: Vec<Vec<f64>> = vec![vec![0.0; nc * px]; n_phases];
    let mut phase_gu: Vec<Vec<f64>> = vec![vec![0.0; px]; n_phases];
    for k in (1..n_phases).rev() {
        let mut next_gb = vec![0.0; nc * px];
        let mut next_gu = vec![0.0; px];
        for p in 0..px {
            for n in 0..nc {
                b1[n] = acc_b[k - 1][n * px + p];
                b2[n] = beliefs[k][n * px + p];
                gb_in[n] = g_b[n * px + p];
            }
            g1.iter_mut().for_each(|v| *v = 0.0);
            g2.iter_mut().for_each(|v| *v = 0.0);
            let (mut gu1, mut gu2) = (0.0, 0.0);
            combine_raw_backward(
                &b1,
                acc_u[k - 1][p],
                &b2,
                uncert[k][p],
                &gb_in,
                g_u[p],
                &mut g1,
                &mut gu1,
                &mut g2,
                &mut gu2,
            );
            for n in 0..nc {
                next_gb[n * px + p] = g1[n];
                phase_gb[k][n * px + p] = g2[n];
            }
            next_gu[p] = gu1;
            phase_gu[k][p] = gu2;
        }
        g_b = next_gb;
        g_u = next_gu;
    }
    phase_gb[0] = g_b;
    phase_gu[0] = g_u;

    // opinion -> evidence: b = e/S, u = N/S
    for (k, e) in evidence.iter().enumerate() {
        for p in 0..px {
            let s: f64 = (0..nc).map(|n| e.data[n * px + p]).sum::<f64>() + nc_f;
            let dot: f64 = (0..nc)
                .map(|n| phase_gb[k][n * px + p] * beliefs[k][n * px + p])
                .sum::<f64>()
                + phase_gu[k][p] * uncert[k][p];
            for n in 0..nc {
                grads[k][n * px + p] += (phase_gb[k][n * px + p] - dot) / s;
            }
        }
    }

    let phase_term = phase_w * phase_sum;
    let mixture_term = weights.lambda_m * (fused_dice + fused_ev);
    Ok(LossGradients {
        parts: LossParts {
            total: phase_term + mixture_term,
            phase_term,
            mixture_term,
        },
        grads,
    })
}
