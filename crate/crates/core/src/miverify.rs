//! Exact mutual-information oracles on discrete joints and numerical checks
//! of the InfoNCE bounds.
//!
//! Every check plugs the true density ratio `r(x, y) = p(y|x) / p(y)` in as
//! the critic, so a failure points at the inequality rather than at a
//! learned model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};
use crate::regulator::{check_condition1, check_condition2, weights_from_similarity, WeightMatrix};
use crate::synth::{sample_batch_with_dependence, DiscreteJoint};

/// `Σ p(x,y) log[p(x,y) / (p(x) p(y))]` in nats, skipping empty cells.
pub fn exact_mi(joint: &DiscreteJoint) -> f64 {
    let mut total = 0.0;
    for x in 0..joint.nx() {
        for y in 0..joint.ny() {
            let p = joint.p(x, y);
            if p > 0.0 {
                total += p * (p / (joint.px()[x] * joint.py()[y])).ln();
            }
        }
    }
    total.max(0.0)
}

/// MI of the negative process: `X ~ p(x)`, `Y ~ q(·|x)` with
/// `q = η p(y|x) + (1 − η) p(y)`. The marginal of `Y` is still `p(y)`.
pub fn negative_process_mi(joint: &DiscreteJoint, dep_rate: f64) -> f64 {
    let mut total = 0.0;
    for x in 0..joint.nx() {
        let q = joint.negative_conditional(x, dep_rate);
        for (y, &qy) in q.iter().enumerate() {
            if qy > 0.0 {
                total += joint.px()[x] * qy * (qy / joint.py()[y]).ln();
            }
        }
    }
    total.max(0.0)
}

/// Tolerance on `Σ_y p(y) r(x, y) = 1`.
pub const RATIO_NORMALIZATION_TOL: f64 = 1e-12;

/// Precomputed density ratios of a joint.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityRatioOracle {
    joint: DiscreteJoint,
    ratio: Vec<f64>,
}

impl DensityRatioOracle {
    pub fn new(joint: &DiscreteJoint) -> Result<Self> {
        let (nx, ny) = (joint.nx(), joint.ny());
        let mut ratio = vec![0.0; nx * ny];
        for x in 0..nx {
            for y in 0..ny {
                ratio[x * ny + y] = joint.p(x, y) / (joint.px()[x] * joint.py()[y]);
            }
            let norm: f64 = (0..ny).map(|y| joint.py()[y] * ratio[x * ny + y]).sum();
            if (norm - 1.0).abs() > RATIO_NORMALIZATION_TOL {
                return Err(Error::Condition(format!(
                    "ratio normalization for x = {x} is {norm}"
                )));
            }
        }
        Ok(Self {
            joint: joint.clone(),
            ratio,
        })
    }

    pub fn joint(&self) -> &DiscreteJoint {
        &self.joint
    }

    #[inline]
    pub fn ratio(&self, x: usize, y: usize) -> f64 {
        self.ratio[x * self.joint.ny() + y]
    }

    /// Largest `|Σ_y p(y) r(x, y) − 1|` over anchors.
    pub fn normalization_error(&self) -> f64 {
        (0..self.joint.nx())
            .map(|x| {
                let s: f64 = (0..self.joint.ny())
                    .map(|y| self.joint.py()[y] * self.ratio(x, y))
                    .sum();
                (s - 1.0).abs()
            })
            .fold(0.0, f64::max)
    }

    /// Per-anchor InfoNCE loss with the ratio as critic.
    fn loss(&self, x: usize, ys: &[usize]) -> f64 {
        let pos = self.ratio(x, ys[0]);
        let denom: f64 = ys.iter().map(|&y| self.ratio(x, y)).sum();
        -(pos / denom).ln()
    }
}

/// How a batch's negatives are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeSampling {
    /// Independent draws from the marginal `p(y)`.
    Iid,
    /// `N` joint pairs with pairwise distinct anchors; negatives are the
    /// other pairs' `y`. Needs `N ≤ |X|`.
    Distinct,
}

/// Mean and standard error of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
}

impl Estimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = pairwise_sum(xs) / n;
        let var = if xs.len() > 1 {
            let sq: Vec<f64> = xs.iter().map(|v| (v - mean) * (v - mean)).collect();
            pairwise_sum(&sq) / (n - 1.0)
        } else {
            0.0
        };
        Self {
            mean,
            stderr: (var / n).sqrt(),
        }
    }
}

fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 32 {
        return xs.iter().sum();
    }
    let (a, b) = xs.split_at(xs.len() / 2);
    pairwise_sum(a) + pairwise_sum(b)
}

/// One checked inequality `lhs ≤ rhs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub check: String,
    pub n: usize,
    pub dep_rate: f64,
    pub n_batches: usize,
    pub loss_estimate: Estimate,
    pub mi_pos: f64,
    pub mi_neg_expect: f64,
    /// `log N − L̂`.
    pub lhs: f64,
    /// Bound plus the three-sigma allowance.
    pub rhs: f64,
    /// `lhs − rhs`; the check passes when this is `≤ 0`.
    pub gap: f64,
    /// `mi_pos − mi_neg_expect − (log N − L̂)`, the bound's slack.
    pub slack: f64,
    pub applicable: bool,
    pub holds: bool,
    pub note: Option<String>,
}

fn sample_distinct(joint: &DiscreteJoint, n: usize, rng: &mut Rng) -> Result<(usize, Vec<usize>)> {
    if n > joint.nx() {
        return Err(Error::InvalidParameter(format!(
            "{n} distinct anchors from an alphabet of {}",
            joint.nx()
        )));
    }
    let mut used = vec![false; joint.nx()];
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    while xs.len() < n {
        let (x, y) = joint.sample(rng);
        if !used[x] {
            used[x] = true;
            xs.push(x);
            ys.push(y);
        }
    }
    Ok((xs[0], ys))
}

fn three_sigma_report(
    check: &str,
    n: usize,
    dep_rate: f64,
    losses: &[f64],
    mi_pos: f64,
    mi_neg: f64,
) -> BoundReport {
    let est = Estimate::from_samples(losses);
    let lhs = (n as f64).ln() - est.mean;
    let rhs = mi_pos - mi_neg + 3.0 * est.stderr;
    // Closed-form cells have zero spread; allow rounding in that case.
    let gap = lhs - rhs;
    BoundReport {
        check: check.into(),
        n,
        dep_rate,
        n_batches: losses.len(),
        loss_estimate: est,
        mi_pos,
        mi_neg_expect: mi_neg,
        lhs,
        rhs,
        gap,
        slack: mi_pos - mi_neg - lhs,
        applicable: true,
        holds: gap <= 1e-9,
        note: None,
    }
}

/// Monte Carlo check of `log N − L ≤ I(X; Y)`.
pub fn verify_mi_bound(
    joint: &DiscreteJoint,
    n: usize,
    n_batches: usize,
    sampling: NegativeSampling,
    rng: &mut Rng,
) -> Result<BoundReport> {
    if n < 2 {
        return Err(Error::InvalidParameter(format!("batch size {n} < 2")));
    }
    if n_batches == 0 {
        return Err(Error::Empty("Monte Carlo batches"));
    }
    let oracle = DensityRatioOracle::new(joint)?;
    let mut losses = Vec::with_capacity(n_batches);
    for _ in 0..n_batches {
        let (x, ys) = match sampling {
            NegativeSampling::Iid => {
                let b = sample_batch_with_dependence(joint, n, 0.0, rng)?;
                (b.x, b.ys)
            }
            NegativeSampling::Distinct => sample_distinct(joint, n, rng)?,
        };
        losses.push(oracle.loss(x, &ys));
    }
    let mi = exact_mi(joint);
    Ok(three_sigma_report("mi_bound", n, 0.0, &losses, mi, 0.0))
}

/// Largest dependent share for which false negatives still count as a
/// minority of the negatives.
pub const MINORITY_SHARE: f64 = 0.5;

/// Whether the premise of the dependent-negative bound holds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PremiseCheck {
    /// Smallest `E_{p(y|x)} r − E_{q(y|x)} r` over anchors: the expected
    /// positive ratio must dominate the expected negative ratio.
    pub min_margin: f64,
    /// `η ≤ 1/2`: dependent negatives are a minority.
    pub minority: bool,
    pub holds: bool,
}

pub fn margin_premise(joint: &DiscreteJoint, dep_rate: f64) -> Result<PremiseCheck> {
    let oracle = DensityRatioOracle::new(joint)?;
    let mut min_margin = f64::INFINITY;
    for x in 0..joint.nx() {
        let pos = joint.conditional(x);
        let neg = joint.negative_conditional(x, dep_rate);
        let e_pos: f64 = (0..joint.ny()).map(|y| pos[y] * oracle.ratio(x, y)).sum();
        let e_neg: f64 = (0..joint.ny()).map(|y| neg[y] * oracle.ratio(x, y)).sum();
        min_margin = min_margin.min(e_pos - e_neg);
    }
    let minority = dep_rate <= MINORITY_SHARE;
    Ok(PremiseCheck {
        min_margin,
        minority,
        holds: minority && min_margin >= -1e-12,
    })
}

/// Monte Carlo check of `log N − L ≤ I(X; Y) − I(X; Y_neg)` with a share
/// `dep_rate` of negatives drawn from `p(y|x)`.
pub fn verify_dependent_bound(
    joint: &DiscreteJoint,
    n: usize,
    dep_rate: f64,
    n_batches: usize,
    rng: &mut Rng,
) -> Result<BoundReport> {
    if n < 2 {
        return Err(Error::InvalidParameter(format!("batch size {n} < 2")));
    }
    if n_batches == 0 {
        return Err(Error::Empty("Monte Carlo batches"));
    }
    let premise = margin_premise(joint, dep_rate)?;
    let mi_pos = exact_mi(joint);
    let mi_neg = negative_process_mi(joint, dep_rate);
    if !premise.holds {
        let reason = if premise.minority {
            "expected negative ratio exceeds the positive ratio"
        } else {
            "dependent negatives are not a minority"
        };
        return Ok(BoundReport {
            check: "dependent_bound".into(),
            n,
            dep_rate,
            n_batches: 0,
            loss_estimate: Estimate {
                mean: f64::NAN,
                stderr: f64::NAN,
            },
            mi_pos,
            mi_neg_expect: mi_neg,
            lhs: f64::NAN,
            rhs: f64::NAN,
            gap: f64::NAN,
            slack: f64::NAN,
            applicable: false,
            holds: false,
            note: Some(format!("premise fails: {reason} (margin {})", premise.min_margin)),
        });
    }
    let oracle = DensityRatioOracle::new(joint)?;
    let mut losses = Vec::with_capacity(n_batches);
    for _ in 0..n_batches {
        let b = sample_batch_with_dependence(joint, n, dep_rate, rng)?;
        losses.push(oracle.loss(b.x, &b.ys));
    }
    Ok(three_sigma_report("dependent_bound", n, dep_rate, &losses, mi_pos, mi_neg))
}

/// Both sides of `E_x E_q log r ≤ E_x log E_q r`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JensenReport {
    pub dep_rate: f64,
    pub lhs: f64,
    pub rhs: f64,
    /// Monte Carlo estimate of `lhs`, as a cross-check on the summation.
    pub lhs_monte_carlo: Estimate,
    /// `r(x, ·)` is constant on the support of `q(·|x)` for every `x`.
    pub constant_ratio: bool,
    pub holds: bool,
}

pub fn verify_jensen_step(
    joint: &DiscreteJoint,
    dep_rate: f64,
    n_samples: usize,
    rng: &mut Rng,
) -> Result<JensenReport> {
    if !(0.0..=1.0).contains(&dep_rate) {
        return Err(Error::InvalidParameter(format!("dependence rate {dep_rate}")));
    }
    let oracle = DensityRatioOracle::new(joint)?;
    let (mut lhs, mut rhs) = (0.0, 0.0);
    let mut constant_ratio = true;
    for x in 0..joint.nx() {
        let q = joint.negative_conditional(x, dep_rate);
        let px = joint.px()[x];
        let mut e_log = 0.0;
        let mut e = 0.0;
        let mut seen: Option<f64> = None;
        for (y, &qy) in q.iter().enumerate() {
            if qy > 0.0 {
                let r = oracle.ratio(x, y);
                e_log += qy * r.ln();
                e += qy * r;
                match seen {
                    None => seen = Some(r),
                    Some(s) if (s - r).abs() > 1e-12 * s.abs().max(1.0) => constant_ratio = false,
                    _ => {}
                }
            }
        }
        lhs += px * e_log;
        rhs += px * e.ln();
    }
    let mut logs = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let x = rng.categorical(joint.px());
        let y = rng.categorical(&joint.negative_conditional(x, dep_rate));
        logs.push(oracle.ratio(x, y).ln());
    }
    let lhs_monte_carlo = if n_samples > 0 {
        Estimate::from_samples(&logs)
    } else {
        Estimate {
            mean: f64::NAN,
            stderr: f64::NAN,
        }
    };
    let holds = if constant_ratio {
        (lhs - rhs).abs() <= 1e-12
    } else {
        lhs < rhs
    };
    Ok(JensenReport {
        dep_rate,
        lhs,
        rhs,
        lhs_monte_carlo,
        constant_ratio,
        holds,
    })
}

/// How negative weights are derived from the oracle ratios of a row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightsRule {
    Uniform,
    /// The regulator's rule with the ratio as similarity.
    InverseRatio,
    /// Weights proportional to the ratio; violates Condition 1.
    SignFlipped,
}

fn row_weights(rule: WeightsRule, ratios: &[f64]) -> Result<Vec<f64>> {
    // Slot 0 stands for the positive and is ignored by the weight matrix.
    let mut row = vec![1.0];
    row.extend_from_slice(ratios);
    let m = Matrix::from_vec(1, row.len(), row)?;
    let w = match rule {
        WeightsRule::Uniform => WeightMatrix::uniform(1, m.cols()),
        WeightsRule::InverseRatio => weights_from_similarity(&m, 1.0, 0.0)?,
        WeightsRule::SignFlipped => WeightMatrix::normalized(&m)?,
    };
    if check_condition2(&w) > 1e-9 {
        return Err(Error::Condition(format!(
            "row mean deviates by {}",
            check_condition2(&w)
        )));
    }
    Ok(w.row_negatives(0).map(|(_, v)| v).collect())
}

/// Controllability of the negative-process MI under weighted negatives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllabilityReport {
    pub rule: WeightsRule,
    pub dep_rate: f64,
    pub n_negatives: usize,
    /// `E log(1/w)` over anchors and negative rows, by exhaustive
    /// enumeration of the rows.
    pub predicted_mi_neg: f64,
    /// Exact MI of the negative process.
    pub target_mi_neg: f64,
    pub residual: f64,
    /// The same prediction with weights normalized by the population mean
    /// `E_q[1/r]` instead of the row mean.
    pub population_predicted: f64,
    pub population_residual: f64,
    /// `E[mean_j w_j r_j]` and `E[mean_j r_j]` over rows.
    pub weighted_ratio: f64,
    pub unweighted_ratio: f64,
    /// Largest per-row covariance between weights and ratios.
    pub max_covariance: f64,
    pub premise_holds: bool,
    pub monte_carlo_predicted: Estimate,
}

/// Largest number of enumerated negative rows per anchor.
const MAX_ENUMERATION: usize = 1 << 20;

/// Enumerate every negative row of `n_negatives` symbols for each anchor,
/// build weights with `rule`, verify Conditions 1 and 2 on each row, and
/// compare `E log(1/w)` to the negative-process MI.
pub fn verify_controllability(
    joint: &DiscreteJoint,
    dep_rate: f64,
    rule: WeightsRule,
    n_negatives: usize,
    n_samples: usize,
    rng: &mut Rng,
) -> Result<ControllabilityReport> {
    if n_negatives < 2 {
        return Err(Error::InvalidParameter(
            "controllability needs at least two negatives per row".into(),
        ));
    }
    if !(0.0..=1.0).contains(&dep_rate) {
        return Err(Error::InvalidParameter(format!("dependence rate {dep_rate}")));
    }
    let ny = joint.ny();
    let rows = (ny as f64).powi(n_negatives as i32);
    if rows > MAX_ENUMERATION as f64 {
        return Err(Error::InvalidParameter(format!(
            "{ny}^{n_negatives} rows exceed the enumeration limit"
        )));
    }
    let oracle = DensityRatioOracle::new(joint)?;
    if (0..joint.nx()).any(|x| (0..ny).any(|y| oracle.ratio(x, y) <= 0.0)) {
        return Err(Error::InvalidParameter(
            "inverse-ratio weights need a joint with full support".into(),
        ));
    }
    let rows = rows as usize;
    let mut predicted = 0.0;
    let mut weighted = 0.0;
    let mut unweighted = 0.0;
    let mut max_cov = f64::NEG_INFINITY;
    let mut premise_holds = true;
    let mut ys = vec![0usize; n_negatives];
    let mut ratios = vec![0.0; n_negatives];
    // Conditions are checked on every row before any expectation is used.
    let mut row_terms: Vec<(f64, f64, f64, f64)> = Vec::with_capacity(rows * joint.nx());
    for x in 0..joint.nx() {
        let q = joint.negative_conditional(x, dep_rate);
        for code in 0..rows {
            let mut c = code;
            let mut prob = joint.px()[x];
            for slot in ys.iter_mut() {
                *slot = c % ny;
                c /= ny;
                prob *= q[*slot];
            }
            for (r, &y) in ratios.iter_mut().zip(&ys) {
                *r = oracle.ratio(x, y);
            }
            let w = row_weights(rule, &ratios)?;
            let cov = check_condition1(&w, &ratios)?;
            if cov > 1e-12 {
                return Err(Error::Condition(format!(
                    "weights covary positively with the ratio (covariance {cov}) for anchor {x}"
                )));
            }
            max_cov = max_cov.max(cov);
            let k = n_negatives as f64;
            let mean_log_inv: f64 = w.iter().map(|v| -v.ln()).sum::<f64>() / k;
            let mean_wr: f64 = w.iter().zip(&ratios).map(|(a, b)| a * b).sum::<f64>() / k;
            let mean_r: f64 = ratios.iter().sum::<f64>() / k;
            premise_holds &= mean_wr <= mean_r + 1e-12;
            row_terms.push((prob, mean_log_inv, mean_wr, mean_r));
        }
    }
    for (prob, log_inv, wr, r) in row_terms {
        predicted += prob * log_inv;
        weighted += prob * wr;
        unweighted += prob * r;
    }
    let target = negative_process_mi(joint, dep_rate);
    let mut population = 0.0;
    for x in 0..joint.nx() {
        let q = joint.negative_conditional(x, dep_rate);
        let term = match rule {
            WeightsRule::Uniform => 0.0,
            WeightsRule::InverseRatio => {
                let e_inv: f64 = (0..ny).map(|y| q[y] / oracle.ratio(x, y)).sum();
                (0..ny).map(|y| q[y] * (oracle.ratio(x, y) * e_inv).ln()).sum()
            }
            WeightsRule::SignFlipped => {
                let e: f64 = (0..ny).map(|y| q[y] * oracle.ratio(x, y)).sum();
                (0..ny).map(|y| q[y] * (e / oracle.ratio(x, y)).ln()).sum()
            }
        };
        population += joint.px()[x] * term;
    }
    let mut samples = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let x = rng.categorical(joint.px());
        let q = joint.negative_conditional(x, dep_rate);
        for (r, slot) in ratios.iter_mut().zip(ys.iter_mut()) {
            *slot = rng.categorical(&q);
            *r = oracle.ratio(x, *slot);
        }
        let w = row_weights(rule, &ratios)?;
        samples.push(w.iter().map(|v| -v.ln()).sum::<f64>() / n_negatives as f64);
    }
    let monte_carlo_predicted = if n_samples > 0 {
        Estimate::from_samples(&samples)
    } else {
        Estimate {
            mean: f64::NAN,
            stderr: f64::NAN,
        }
    };
    Ok(ControllabilityReport {
        rule,
        dep_rate,
        n_negatives,
        predicted_mi_neg: predicted,
        target_mi_neg: target,
        residual: predicted - target,
        population_predicted: population,
        population_residual: population - target,
        weighted_ratio: weighted,
        unweighted_ratio: unweighted,
        max_covariance: max_cov,
        premise_holds,
        monte_carlo_predicted,
    })
}
