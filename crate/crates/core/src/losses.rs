//! InfoNCE and similarity-regulated (SRCL) contrastive losses with analytic
//! gradients.
//!
//! Similarities are cosines of the raw embedding rows, so both losses are
//! invariant to rescaling any row by a positive constant. Gradients are
//! returned with respect to the unnormalized embeddings.
//!
//! SRCL multiplies each negative's `exp(s/τ)` term by a regulation weight.
//! This is evaluated as a softmax whose negative logits carry an offset of
//! `ln w`, and the weights are treated as constants during differentiation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, log_sum_exp, normalize_rows, Matrix};
use crate::regulator::WeightMatrix;

/// Which modality plays the anchor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    AToB,
    BToA,
    SymmetricSum,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub temperature: f64,
    pub direction: Direction,
}

impl LossConfig {
    pub fn new(temperature: f64, direction: Direction) -> Result<Self> {
        let cfg = Self {
            temperature,
            direction,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "temperature {} must be finite and positive",
                self.temperature
            )));
        }
        Ok(())
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: 0.1,
            direction: Direction::SymmetricSum,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    /// Mean of `per_anchor`.
    pub value: f64,
    pub grad_a: Matrix,
    pub grad_b: Matrix,
    /// Loss term of each anchor; with a symmetric direction, entry `i` is the
    /// sum of anchor `i`'s terms in both directions.
    pub per_anchor: Vec<f64>,
}

struct Directional {
    per_anchor: Vec<f64>,
    grad_anchor: Matrix,
    grad_cand: Matrix,
}

fn check_batch(emb_a: &Matrix, emb_b: &Matrix) -> Result<()> {
    if emb_a.rows() != emb_b.rows() || emb_a.cols() != emb_b.cols() {
        return Err(Error::Shape(format!(
            "embedding batches {:?} and {:?}",
            emb_a.shape(),
            emb_b.shape()
        )));
    }
    if emb_a.rows() < 2 {
        return Err(Error::InvalidParameter(
            "contrastive loss needs at least two pairs".into(),
        ));
    }
    Ok(())
}

/// Back-propagate through row normalization: for `û = u/‖u‖`,
/// `∂L/∂u = (g − (g·û) û) / ‖u‖`.
fn unnormalize_grad(grad_unit: &mut Matrix, unit: &Matrix, norms: &[f64]) {
    for i in 0..unit.rows() {
        let u = unit.row(i);
        let g = grad_unit.row(i);
        let proj = dot(g, u);
        let n = norms[i];
        let row = grad_unit.row_mut(i);
        for (gk, uk) in row.iter_mut().zip(u) {
            *gk = (*gk - proj * uk) / n;
        }
    }
}

fn directional(
    anchors: &Matrix,
    cands: &Matrix,
    weights: Option<&WeightMatrix>,
    tau: f64,
) -> Result<Directional> {
    let n = anchors.rows();
    let (ua, na) = normalize_rows(anchors)?;
    let (uc, nc) = normalize_rows(cands)?;
    let sims = ua.matmul_t(&uc)?;

    // coef(i, j) = ∂L/∂s_ij, with the 1/N batch mean folded in.
    let mut coef = Matrix::zeros(n, n);
    let mut per_anchor = Vec::with_capacity(n);
    let mut logits = vec![0.0; n];
    for i in 0..n {
        for (j, z) in logits.iter_mut().enumerate() {
            let s = sims.get(i, j) / tau;
            *z = match weights {
                Some(w) if i != j => {
                    if w.is_removed(i, j) {
                        f64::NEG_INFINITY
                    } else {
                        s + w.get(i, j).ln()
                    }
                }
                _ => s,
            };
        }
        let lse = log_sum_exp(&logits)?;
        per_anchor.push(lse - logits[i]);
        for (j, &z) in logits.iter().enumerate() {
            let p = (z - lse).exp();
            let target = if i == j { 1.0 } else { 0.0 };
            coef.set(i, j, (p - target) / (tau * n as f64));
        }
    }

    let d = anchors.cols();
    let mut grad_anchor = Matrix::zeros(n, d);
    let mut grad_cand = Matrix::zeros(n, d);
    for i in 0..n {
        for j in 0..n {
            let c = coef.get(i, j);
            if c == 0.0 {
                continue;
            }
            let (ai, cj) = (ua.row(i), uc.row(j));
            for k in 0..d {
                grad_anchor.as_mut_slice()[i * d + k] += c * cj[k];
                grad_cand.as_mut_slice()[j * d + k] += c * ai[k];
            }
        }
    }
    unnormalize_grad(&mut grad_anchor, &ua, &na);
    unnormalize_grad(&mut grad_cand, &uc, &nc);
    if !grad_anchor.is_finite() || !grad_cand.is_finite() {
        return Err(Error::NonFinite("contrastive loss gradient".into()));
    }
    Ok(Directional {
        per_anchor,
        grad_anchor,
        grad_cand,
    })
}

fn combine(parts: Vec<(Directional, bool)>, n: usize, d: usize) -> LossOutput {
    let mut per_anchor = vec![0.0; n];
    let mut grad_a = Matrix::zeros(n, d);
    let mut grad_b = Matrix::zeros(n, d);
    for (part, a_is_anchor) in parts {
        for (acc, v) in per_anchor.iter_mut().zip(&part.per_anchor) {
            *acc += v;
        }
        let (ga, gb) = if a_is_anchor {
            (&part.grad_anchor, &part.grad_cand)
        } else {
            (&part.grad_cand, &part.grad_anchor)
        };
        for (acc, v) in grad_a.as_mut_slice().iter_mut().zip(ga.as_slice()) {
            *acc += v;
        }
        for (acc, v) in grad_b.as_mut_slice().iter_mut().zip(gb.as_slice()) {
            *acc += v;
        }
    }
    let value = per_anchor.iter().sum::<f64>() / n as f64;
    LossOutput {
        value,
        grad_a,
        grad_b,
        per_anchor,
    }
}

fn evaluate(
    emb_a: &Matrix,
    emb_b: &Matrix,
    weights_ab: Option<&WeightMatrix>,
    weights_ba: Option<&WeightMatrix>,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    cfg.validate()?;
    check_batch(emb_a, emb_b)?;
    let tau = cfg.temperature;
    let mut parts = Vec::with_capacity(2);
    if matches!(cfg.direction, Direction::AToB | Direction::SymmetricSum) {
        parts.push((directional(emb_a, emb_b, weights_ab, tau)?, true));
    }
    if matches!(cfg.direction, Direction::BToA | Direction::SymmetricSum) {
        parts.push((directional(emb_b, emb_a, weights_ba, tau)?, false));
    }
    Ok(combine(parts, emb_a.rows(), emb_a.cols()))
}

/// InfoNCE over in-batch negatives, averaged over anchors.
pub fn info_nce(emb_a: &Matrix, emb_b: &Matrix, cfg: &LossConfig) -> Result<LossOutput> {
    evaluate(emb_a, emb_b, None, None, cfg)
}

/// Tolerance on a weight row's mean accepted by the SRCL losses.
pub const ROW_MEAN_TOLERANCE: f64 = 1e-6;

fn check_weights(w: &WeightMatrix, n: usize) -> Result<()> {
    if w.rows() != n || w.cols() != n {
        return Err(Error::Shape(format!(
            "{}x{} weights for a batch of {n}",
            w.rows(),
            w.cols()
        )));
    }
    for i in 0..n {
        for (j, v) in w.row_negatives(i) {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "weight ({i}, {j}) = {v} must be finite and positive"
                )));
            }
        }
    }
    let dev = w.max_row_mean_deviation();
    if dev > ROW_MEAN_TOLERANCE {
        return Err(Error::Condition(format!(
            "weight row mean deviates from 1 by {dev:e}"
        )));
    }
    Ok(())
}

/// SRCL with one weight matrix indexed `[anchor][candidate]`. With a
/// symmetric direction the same matrix regulates both directions.
pub fn srcl(
    emb_a: &Matrix,
    emb_b: &Matrix,
    weights: &WeightMatrix,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    check_weights(weights, emb_a.rows())?;
    evaluate(emb_a, emb_b, Some(weights), Some(weights), cfg)
}

/// Sum of the a→b SRCL loss regulated by `weights_ab` and the b→a loss
/// regulated by `weights_ba`. `cfg.direction` is ignored.
pub fn srcl_symmetric(
    emb_a: &Matrix,
    emb_b: &Matrix,
    weights_ab: &WeightMatrix,
    weights_ba: &WeightMatrix,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    check_weights(weights_ab, emb_a.rows())?;
    check_weights(weights_ba, emb_a.rows())?;
    let cfg = LossConfig {
        direction: Direction::SymmetricSum,
        ..*cfg
    };
    evaluate(emb_a, emb_b, Some(weights_ab), Some(weights_ba), &cfg)
}
