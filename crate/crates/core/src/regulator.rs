//! Regulation weights for in-batch negatives.
//!
//! Teacher and student cosine similarities are exponentiated, blended with a
//! coefficient `α` that decays over training, inverted, and normalized so
//! every anchor's negatives average to exactly one weight. Inversion makes the
//! weights anti-correlated with similarity (Condition 1); the normalization is
//! Condition 2.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Per-anchor weights over negatives, indexed `[anchor][candidate]`.
///
/// Slot `(i, i)` is the positive and carries no weight. Negatives can be
/// removed outright (threshold masking); removed slots are excluded from
/// losses and from the row mean.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    rows: usize,
    cols: usize,
    w: Vec<f64>,
    removed: Vec<bool>,
}

impl WeightMatrix {
    pub fn uniform(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            w: vec![1.0; rows * cols],
            removed: vec![false; rows * cols],
        }
    }

    /// Wrap raw values as weights without normalizing. Diagonal entries are
    /// ignored.
    pub fn from_matrix(m: Matrix) -> Result<Self> {
        let (rows, cols) = m.shape();
        Ok(Self {
            rows,
            cols,
            w: m.into_vec(),
            removed: vec![false; rows * cols],
        })
    }

    /// Divide each row's negatives by their mean. Every off-diagonal entry
    /// must be positive.
    pub fn normalized(raw: &Matrix) -> Result<Self> {
        let mut out = Self::from_matrix(raw.clone())?;
        for i in 0..out.rows {
            let (sum, count) = out
                .row_negatives(i)
                .fold((0.0, 0usize), |(s, c), (_, v)| (s + v, c + 1));
            if count == 0 {
                return Err(Error::InvalidParameter(format!("row {i} has no negatives")));
            }
            if let Some((j, v)) = out.row_negatives(i).find(|&(_, v)| !(v > 0.0)) {
                return Err(Error::InvalidParameter(format!(
                    "raw weight ({i}, {j}) = {v} is not positive"
                )));
            }
            let mean = sum / count as f64;
            for j in 0..out.cols {
                if i != j {
                    out.w[i * out.cols + j] /= mean;
                }
            }
        }
        Ok(out)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.w[i * self.cols + j]
    }

    #[inline]
    pub fn is_removed(&self, i: usize, j: usize) -> bool {
        self.removed[i * self.cols + j]
    }

    /// Active negatives of anchor `i` as `(candidate, weight)`.
    pub fn row_negatives(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        (0..self.cols)
            .filter(move |&j| j != i && !self.is_removed(i, j))
            .map(move |j| (j, self.get(i, j)))
    }

    /// Largest `|mean − 1|` over rows that still have active negatives.
    pub fn max_row_mean_deviation(&self) -> f64 {
        (0..self.rows)
            .filter_map(|i| {
                let (s, c) = self
                    .row_negatives(i)
                    .fold((0.0, 0usize), |(s, c), (_, v)| (s + v, c + 1));
                (c > 0).then(|| (s / c as f64 - 1.0).abs())
            })
            .fold(0.0, f64::max)
    }

    /// Remove every negative whose weight is below `threshold` and rescale
    /// the survivors of each row back to mean one. Rows left without
    /// negatives are reported in the second element.
    pub fn mask_below(&self, threshold: f64) -> (WeightMatrix, Vec<usize>) {
        let mut out = self.clone();
        let mut emptied = Vec::new();
        for i in 0..self.rows {
            let mut sum = 0.0;
            let mut count = 0usize;
            for j in (0..self.cols).filter(|&j| j != i) {
                let k = i * self.cols + j;
                if out.removed[k] || out.w[k] < threshold {
                    out.removed[k] = true;
                } else {
                    sum += out.w[k];
                    count += 1;
                }
            }
            if count == 0 {
                emptied.push(i);
                continue;
            }
            let mean = sum / count as f64;
            for j in (0..self.cols).filter(|&j| j != i) {
                let k = i * self.cols + j;
                if !out.removed[k] {
                    out.w[k] /= mean;
                }
            }
        }
        (out, emptied)
    }

    pub fn transpose(&self) -> WeightMatrix {
        let mut out = WeightMatrix::uniform(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.w[j * self.rows + i] = self.get(i, j);
                out.removed[j * self.rows + i] = self.is_removed(i, j);
            }
        }
        out
    }
}

/// Blending schedule for the teacher coefficient `α`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AlphaSchedule {
    /// `α = 1 − step/total`.
    #[default]
    Linear,
    /// Piecewise-linear through `(fraction_of_training, α)` knots. Knots
    /// start at `(0, 1)`, end at `(1, 0)`, and never increase `α`.
    Piecewise { knots: Vec<(f64, f64)> },
    /// Fixed `α`, for ablations.
    Constant { value: f64 },
}

impl AlphaSchedule {
    pub fn validate(&self) -> Result<()> {
        match self {
            AlphaSchedule::Linear => Ok(()),
            AlphaSchedule::Constant { value } => {
                if (0.0..=1.0).contains(value) {
                    Ok(())
                } else {
                    Err(Error::InvalidParameter(format!("alpha {value} outside [0, 1]")))
                }
            }
            AlphaSchedule::Piecewise { knots } => {
                let bad = |msg: &str| Err(Error::InvalidParameter(format!("alpha knots: {msg}")));
                if knots.len() < 2 {
                    return bad("need at least two knots");
                }
                if knots[0] != (0.0, 1.0) || *knots.last().unwrap() != (1.0, 0.0) {
                    return bad("must start at (0, 1) and end at (1, 0)");
                }
                for pair in knots.windows(2) {
                    let ((x0, a0), (x1, a1)) = (pair[0], pair[1]);
                    if !(x1 > x0) {
                        return bad("fractions must increase strictly");
                    }
                    if a1 > a0 {
                        return bad("alpha must not increase");
                    }
                }
                Ok(())
            }
        }
    }
}

/// `α` at `step` of a run of `total_steps`.
pub fn alpha_at(schedule: &AlphaSchedule, step: usize, total_steps: usize) -> Result<f64> {
    if step > total_steps {
        return Err(Error::InvalidParameter(format!(
            "step {step} beyond total {total_steps}"
        )));
    }
    let t = if total_steps == 0 {
        0.0
    } else {
        step as f64 / total_steps as f64
    };
    Ok(match schedule {
        AlphaSchedule::Linear => 1.0 - t,
        AlphaSchedule::Constant { value } => *value,
        AlphaSchedule::Piecewise { knots } => {
            let k = knots
                .windows(2)
                .position(|w| t <= w[1].0)
                .unwrap_or(knots.len() - 2);
            let ((x0, a0), (x1, a1)) = (knots[k], knots[k + 1]);
            (a0 + (a1 - a0) * (t - x0) / (x1 - x0)).clamp(a1, a0)
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegulatorConfig {
    /// Scale applied before normalization. Cancels under mean-one
    /// normalization; kept so alternative normalizations can use it.
    pub delta: f64,
    pub alpha_schedule: AlphaSchedule,
    /// Lower clamp on blended similarities before inversion.
    pub weight_floor: f64,
    /// Divide cosines by the loss temperature before exponentiating.
    pub use_temperature_in_weights: bool,
}

impl Default for RegulatorConfig {
    fn default() -> Self {
        Self {
            delta: 1.0,
            alpha_schedule: AlphaSchedule::Linear,
            weight_floor: 1e-6,
            use_temperature_in_weights: false,
        }
    }
}

impl RegulatorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::InvalidParameter(format!("delta {}", self.delta)));
        }
        if !(self.weight_floor >= 0.0 && self.weight_floor.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "weight_floor {}",
                self.weight_floor
            )));
        }
        self.alpha_schedule.validate()
    }
}

/// Elementwise `α·teacher + (1 − α)·student`.
pub fn blended_similarity(teacher: &Matrix, student: &Matrix, alpha: f64) -> Result<Matrix> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidParameter(format!("alpha {alpha} outside [0, 1]")));
    }
    if teacher.shape() != student.shape() {
        return Err(Error::Shape(format!(
            "teacher {:?} vs student {:?}",
            teacher.shape(),
            student.shape()
        )));
    }
    let data = teacher
        .as_slice()
        .iter()
        .zip(student.as_slice())
        .map(|(t, s)| alpha * t + (1.0 - alpha) * s)
        .collect();
    Matrix::from_vec(teacher.rows(), teacher.cols(), data)
}

/// Mean-one weights inversely proportional to the blended similarity:
/// `raw = δ / max(s, floor)`, then each row divided by its mean over
/// negatives.
pub fn weights_from_similarity(s: &Matrix, delta: f64, floor: f64) -> Result<WeightMatrix> {
    if let Some(v) = s.as_slice().iter().find(|&&v| !(v > 0.0)) {
        return Err(Error::InvalidParameter(format!(
            "similarity {v} is not positive"
        )));
    }
    let raw = s.map(|v| delta / v.max(floor));
    WeightMatrix::normalized(&raw)
}

/// Population covariance `(1/K) Σ (w − w̄)(f − f̄)` of aligned rows.
pub fn check_condition1(w_row: &[f64], f_row: &[f64]) -> Result<f64> {
    if w_row.len() != f_row.len() {
        return Err(Error::Shape(format!(
            "rows of length {} and {}",
            w_row.len(),
            f_row.len()
        )));
    }
    if w_row.len() < 2 {
        return Err(Error::InvalidParameter(
            "covariance needs at least two negatives".into(),
        ));
    }
    let k = w_row.len() as f64;
    let wm = w_row.iter().sum::<f64>() / k;
    let fm = f_row.iter().sum::<f64>() / k;
    Ok(w_row
        .iter()
        .zip(f_row)
        .map(|(w, f)| (w - wm) * (f - fm))
        .sum::<f64>()
        / k)
}

/// Largest deviation of a row mean from one.
pub fn check_condition2(weights: &WeightMatrix) -> f64 {
    weights.max_row_mean_deviation()
}

/// Weights for both contrast directions at one training step.
#[derive(Debug, Clone)]
pub struct StepWeights {
    pub alpha: f64,
    /// Blended similarity, `[anchor in a][candidate in b]`.
    pub similarity: Matrix,
    pub a_to_b: WeightMatrix,
    pub b_to_a: WeightMatrix,
}

/// Turn teacher and student cosine matrices (rows: modality a, columns:
/// modality b) into regulation weights for both directions.
pub fn regulation_weights(
    cfg: &RegulatorConfig,
    teacher_cos: &Matrix,
    student_cos: &Matrix,
    step: usize,
    total_steps: usize,
    temperature: f64,
) -> Result<StepWeights> {
    let alpha = alpha_at(&cfg.alpha_schedule, step, total_steps)?;
    let scale = if cfg.use_temperature_in_weights {
        1.0 / temperature
    } else {
        1.0
    };
    let teacher = teacher_cos.map(|c| (c * scale).exp());
    let student = student_cos.map(|c| (c * scale).exp());
    let similarity = blended_similarity(&teacher, &student, alpha)?;
    let a_to_b = weights_from_similarity(&similarity, cfg.delta, cfg.weight_floor)?;
    let b_to_a = weights_from_similarity(&similarity.transpose(), cfg.delta, cfg.weight_floor)?;
    Ok(StepWeights {
        alpha,
        similarity,
        a_to_b,
        b_to_a,
    })
}
