//! Retrieval metrics, weight statistics and the threshold-masking sweep.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{cosine_matrix, Matrix, Rng};
use crate::regulator::{RegulatorConfig, WeightMatrix};
use crate::synth::{World, WorldSpec};
use crate::trainer::{
    split_means, train_student_with, EncoderPair, TeacherHandle, TrainConfig, TrainOptions,
    TrainerState,
};

pub const DEFAULT_KS: [usize; 3] = [1, 5, 10];

/// Recall at each requested cutoff for one retrieval direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recall {
    pub k: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub n_queries: usize,
    pub a_to_b: Vec<Recall>,
    pub b_to_a: Vec<Recall>,
}

impl RetrievalReport {
    fn lookup(list: &[Recall], k: usize) -> Option<f64> {
        list.iter().find(|r| r.k == k).map(|r| r.value)
    }

    pub fn a_to_b_at(&self, k: usize) -> Option<f64> {
        Self::lookup(&self.a_to_b, k)
    }

    pub fn b_to_a_at(&self, k: usize) -> Option<f64> {
        Self::lookup(&self.b_to_a, k)
    }

    /// Average of the two directions' R@1.
    pub fn mean_r1(&self) -> f64 {
        0.5 * (self.a_to_b_at(1).unwrap_or(f64::NAN) + self.b_to_a_at(1).unwrap_or(f64::NAN))
    }
}

/// Rank (0-based) of `target` in `scores` sorted descending, ties going to
/// the lower index.
fn rank_of(scores: &[f64], target: usize) -> usize {
    let t = scores[target];
    scores
        .iter()
        .enumerate()
        .filter(|&(j, &s)| s > t || (s == t && j < target))
        .count()
}

/// Fraction of queries whose true match is among the top-`k` gallery items
/// by cosine similarity, for each `k` in `ks`.
pub fn recall_at_k(
    query: &Matrix,
    gallery: &Matrix,
    truth: &[usize],
    ks: &[usize],
) -> Result<Vec<Recall>> {
    if truth.len() != query.rows() {
        return Err(Error::Shape(format!(
            "{} ground-truth indices for {} queries",
            truth.len(),
            query.rows()
        )));
    }
    if query.rows() == 0 {
        return Err(Error::Empty("query set"));
    }
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > gallery.rows()) {
        return Err(Error::InvalidParameter(format!(
            "k = {k} with a gallery of {}",
            gallery.rows()
        )));
    }
    if let Some(&t) = truth.iter().find(|&&t| t >= gallery.rows()) {
        return Err(Error::InvalidParameter(format!("ground truth index {t}")));
    }
    let sims = cosine_matrix(query, gallery)?;
    Ok(recall_from_sims(&sims, truth, ks))
}

fn recall_from_sims(sims: &Matrix, truth: &[usize], ks: &[usize]) -> Vec<Recall> {
    let ranks: Vec<usize> = truth
        .iter()
        .enumerate()
        .map(|(i, &t)| rank_of(sims.row(i), t))
        .collect();
    let n = ranks.len() as f64;
    ks.iter()
        .map(|&k| Recall {
            k,
            value: ranks.iter().filter(|&&r| r < k).count() as f64 / n,
        })
        .collect()
}

/// Both retrieval directions over aligned embeddings (row `i` of `a`
/// matches row `i` of `b`). Cutoffs larger than the gallery are dropped.
pub fn retrieval_report(emb_a: &Matrix, emb_b: &Matrix, ks: &[usize]) -> Result<RetrievalReport> {
    let n = emb_a.rows();
    let ks: Vec<usize> = ks.iter().copied().filter(|&k| k <= n).collect();
    let truth: Vec<usize> = (0..n).collect();
    Ok(RetrievalReport {
        n_queries: n,
        a_to_b: recall_at_k(emb_a, emb_b, &truth, &ks)?,
        b_to_a: recall_at_k(emb_b, emb_a, &truth, &ks)?,
    })
}

/// Stream used to draw validation sets, disjoint from the training streams.
const VALIDATION_STREAM: u64 = 7;

/// Evaluate encoders on a held-out clean set of `size` distinct concepts.
/// The set depends only on the world and `seed`.
pub fn evaluate(
    encoders: &EncoderPair,
    world: &World,
    size: usize,
    seed: u64,
) -> Result<RetrievalReport> {
    let mut rng = Rng::new(seed).fork(VALIDATION_STREAM);
    let val = world.validation_set(size.min(world.spec().n_concepts), &mut rng)?;
    let (ea, eb) = encoders.embed(&val)?;
    retrieval_report(&ea, &eb, &DEFAULT_KS)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub threshold: f64,
    pub report: RetrievalReport,
    pub skipped_rows: usize,
    /// Set when training failed for this threshold; the report is then
    /// computed on whatever the run reached before failing.
    pub failure: Option<String>,
}

/// Retrain a student per threshold from the same seed, removing negatives
/// whose weight falls below the threshold, and evaluate each run.
pub fn threshold_mask_sweep(
    world: &WorldSpec,
    teacher: &TeacherHandle,
    cfg: &TrainConfig,
    regulator: &RegulatorConfig,
    thresholds: &[f64],
    val_size: usize,
) -> Result<Vec<SweepPoint>> {
    if thresholds.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::InvalidParameter("thresholds must be ascending".into()));
    }
    if let Some(t) = thresholds.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::InvalidParameter(format!("threshold {t} outside [0, 1]")));
    }
    let w = World::new(world.clone())?;
    let mut points = Vec::with_capacity(thresholds.len());
    for &threshold in thresholds {
        let options = TrainOptions {
            mask_threshold: (threshold > 0.0).then_some(threshold),
        };
        let mut state = TrainerState::new(world, Some(teacher.clone()), cfg.clone(), regulator.clone())?;
        let failure = match state.run(&w, &options) {
            Ok(()) => None,
            Err(e @ Error::Diverged { .. }) => Some(e.to_string()),
            Err(e) => return Err(e),
        };
        let report = evaluate(&state.student, &w, val_size, cfg.seed)?;
        points.push(SweepPoint {
            threshold,
            report,
            skipped_rows: state.skipped_rows,
            failure,
        });
    }
    Ok(points)
}

/// Convenience wrapper: train a single student with an optional mask.
pub fn train_masked(
    world: &WorldSpec,
    teacher: &TeacherHandle,
    cfg: &TrainConfig,
    regulator: &RegulatorConfig,
    threshold: Option<f64>,
) -> Result<TrainerState> {
    train_student_with(
        world,
        teacher,
        cfg,
        regulator,
        &TrainOptions {
            mask_threshold: threshold,
        },
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightHistogram {
    /// `counts.len() + 1` ascending edges from 0 to the largest weight seen;
    /// the last bin is closed on the right.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub n_batches: usize,
    pub total: u64,
    pub mean_false_neg: Option<f64>,
    pub mean_true_neg: Option<f64>,
}

impl WeightHistogram {
    /// Share of weights inside `[lo, hi]`, counting whole bins whose
    /// centers fall in the interval.
    pub fn mass_between(&self, lo: f64, hi: f64) -> f64 {
        let inside: u64 = self
            .counts
            .iter()
            .enumerate()
            .filter(|&(b, _)| {
                let c = 0.5 * (self.edges[b] + self.edges[b + 1]);
                c >= lo && c <= hi
            })
            .map(|(_, &c)| c)
            .sum();
        inside as f64 / self.total.max(1) as f64
    }
}

/// Histogram of the a-to-b regulation weights the trained `state` would emit
/// on `n_batches` fresh batches. Runs without a regulator yield unit weights.
pub fn weight_histogram(
    state: &TrainerState,
    world: &World,
    n_batches: usize,
    bins: usize,
    rng: &mut Rng,
) -> Result<WeightHistogram> {
    if bins == 0 {
        return Err(Error::InvalidParameter("zero histogram bins".into()));
    }
    let mut values = Vec::new();
    let (mut fs, mut fc, mut ts, mut tc) = (0.0, 0.0, 0.0, 0.0);
    for _ in 0..n_batches {
        let batch = world.sample_batch(state.config.batch, rng)?;
        let (ea, eb) = state.student.embed(&batch)?;
        let w = match state.step_weights(&batch, &ea, &eb)? {
            Some((_, wab, _)) => wab,
            None => WeightMatrix::uniform(batch.len(), batch.len()),
        };
        let (f, t) = split_means(&w, &batch);
        let n_f = (0..batch.len())
            .flat_map(|i| (0..batch.len()).map(move |j| (i, j)))
            .filter(|&(i, j)| batch.false_negative(i, j))
            .count() as f64;
        let n_t = (batch.len() * (batch.len() - 1)) as f64 - n_f;
        if let Some(f) = f {
            fs += f * n_f;
            fc += n_f;
        }
        if let Some(t) = t {
            ts += t * n_t;
            tc += n_t;
        }
        for i in 0..w.rows() {
            values.extend(w.row_negatives(i).map(|(_, v)| v));
        }
    }
    let w_max = values.iter().copied().fold(0.0f64, f64::max);
    let top = if w_max > 0.0 { w_max } else { 1.0 };
    let edges: Vec<f64> = (0..=bins).map(|b| top * b as f64 / bins as f64).collect();
    let mut counts = vec![0u64; bins];
    for v in &values {
        let b = ((v / top) * bins as f64) as usize;
        counts[b.min(bins - 1)] += 1;
    }
    Ok(WeightHistogram {
        edges,
        counts,
        n_batches,
        total: values.len() as u64,
        mean_false_neg: (fc > 0.0).then(|| fs / fc),
        mean_true_neg: (tc > 0.0).then(|| ts / tc),
    })
}
