//! Ground-truth worlds.
//!
//! Two kinds: small discrete joints whose mutual information is exactly
//! computable, and a continuous two-modality embedding world in which
//! in-batch false negatives are injected at a known rate and recorded in a
//! ground-truth mask.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

/// Largest alphabet accepted by [`DiscreteJoint`].
pub const MAX_ALPHABET: usize = 64;

/// Exact joint probability table `p(x, y)` over small alphabets.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteJoint {
    nx: usize,
    ny: usize,
    table: Vec<f64>,
    px: Vec<f64>,
    py: Vec<f64>,
}

impl DiscreteJoint {
    pub fn new(table: &[Vec<f64>]) -> Result<Self> {
        let nx = table.len();
        let ny = table.first().map_or(0, Vec::len);
        if nx == 0 || ny == 0 || nx > MAX_ALPHABET || ny > MAX_ALPHABET {
            return Err(Error::Shape(format!(
                "joint alphabets {nx}x{ny}, must be within 1..={MAX_ALPHABET}"
            )));
        }
        if table.iter().any(|r| r.len() != ny) {
            return Err(Error::Shape("ragged joint table".into()));
        }
        let flat: Vec<f64> = table.concat();
        if flat.iter().any(|&p| !p.is_finite() || p < 0.0) {
            return Err(Error::InvalidParameter(
                "joint entries must be finite and nonnegative".into(),
            ));
        }
        let total: f64 = flat.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidParameter(format!(
                "joint sums to {total}, expected 1"
            )));
        }
        let px: Vec<f64> = table.iter().map(|r| r.iter().sum()).collect();
        let py: Vec<f64> = (0..ny).map(|y| table.iter().map(|r| r[y]).sum()).collect();
        if px.iter().chain(&py).any(|&m| m <= 0.0) {
            return Err(Error::InvalidParameter(
                "joint has a symbol with zero marginal probability".into(),
            ));
        }
        Ok(Self {
            nx,
            ny,
            table: flat,
            px,
            py,
        })
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    #[inline]
    pub fn p(&self, x: usize, y: usize) -> f64 {
        self.table[x * self.ny + y]
    }

    pub fn px(&self) -> &[f64] {
        &self.px
    }

    pub fn py(&self) -> &[f64] {
        &self.py
    }

    /// `p(y | x)` as a vector over `y`.
    pub fn conditional(&self, x: usize) -> Vec<f64> {
        (0..self.ny).map(|y| self.p(x, y) / self.px[x]).collect()
    }

    /// `q(y | x) = η p(y | x) + (1 − η) p(y)`: the law of a negative for
    /// anchor `x` when a fraction `η` of negatives depend on the anchor.
    pub fn negative_conditional(&self, x: usize, dep_rate: f64) -> Vec<f64> {
        self.conditional(x)
            .iter()
            .zip(&self.py)
            .map(|(c, m)| dep_rate * c + (1.0 - dep_rate) * m)
            .collect()
    }

    pub fn is_factorizable(&self, tol: f64) -> bool {
        (0..self.nx).all(|x| (0..self.ny).all(|y| (self.p(x, y) - self.px[x] * self.py[y]).abs() <= tol))
    }

    pub fn sample(&self, rng: &mut Rng) -> (usize, usize) {
        let k = rng.categorical(&self.table);
        (k / self.ny, k % self.ny)
    }
}

/// Binary symmetric joint `[[p/2, (1−p)/2], [(1−p)/2, p/2]]`.
pub fn make_bsc_joint(p_agree: f64) -> Result<DiscreteJoint> {
    if !(p_agree > 0.0 && p_agree < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "p_agree = {p_agree} must lie in (0, 1)"
        )));
    }
    let a = p_agree / 2.0;
    let b = (1.0 - p_agree) / 2.0;
    DiscreteJoint::new(&[vec![a, b], vec![b, a]])
}

/// Diagonal joint with `p(x, x) = 1/k`; its mutual information is `ln k`.
pub fn make_deterministic_joint(k: usize) -> Result<DiscreteJoint> {
    if k < 2 {
        return Err(Error::InvalidParameter(format!("alphabet size {k} < 2")));
    }
    let rows: Vec<Vec<f64>> = (0..k)
        .map(|x| (0..k).map(|y| if x == y { 1.0 / k as f64 } else { 0.0 }).collect())
        .collect();
    DiscreteJoint::new(&rows)
}

/// One contrastive draw from a discrete world: an anchor symbol `x` and
/// candidate symbols `ys`, where `ys[0]` is the positive.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteBatch {
    pub x: usize,
    pub ys: Vec<usize>,
}

impl DiscreteBatch {
    pub fn positive(&self) -> usize {
        self.ys[0]
    }

    pub fn negatives(&self) -> &[usize] {
        &self.ys[1..]
    }
}

/// Draw an anchor/positive pair from `joint` and `n - 1` negatives. Each
/// negative comes from `p(y | x_anchor)` with probability `dep_rate`, else
/// from the marginal `p(y)`.
pub fn sample_batch_with_dependence(
    joint: &DiscreteJoint,
    n: usize,
    dep_rate: f64,
    rng: &mut Rng,
) -> Result<DiscreteBatch> {
    if n < 2 {
        return Err(Error::InvalidParameter(format!("batch size {n} < 2")));
    }
    if !(0.0..=1.0).contains(&dep_rate) {
        return Err(Error::InvalidParameter(format!(
            "dependence rate {dep_rate} outside [0, 1]"
        )));
    }
    let (x, y0) = joint.sample(rng);
    let cond = joint.conditional(x);
    let mut ys = Vec::with_capacity(n);
    ys.push(y0);
    for _ in 1..n {
        let y = if dep_rate > 0.0 && rng.bernoulli(dep_rate) {
            rng.categorical(&cond)
        } else {
            rng.categorical(joint.py())
        };
        ys.push(y);
    }
    Ok(DiscreteBatch { x, ys })
}

/// Parameters of a continuous two-modality world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldSpec {
    pub n_concepts: usize,
    /// Raw dimension of modality a.
    pub dim_a: usize,
    /// Raw dimension of modality b.
    pub dim_b: usize,
    /// Dimension of the shared concept latent both modalities render.
    pub latent_dim: usize,
    /// Dimension of a per-pair instance latent rendered into both modalities.
    /// It is shared by the two halves of a training pair but carries no
    /// concept information, so it is a shortcut for telling apart two pairs
    /// of the same concept.
    pub instance_dim: usize,
    /// Scale of the instance latent relative to the concept latent.
    pub instance_scale: f64,
    /// Standard deviation of the isotropic additive noise on raw inputs.
    pub emb_noise: f64,
    /// Probability that a batch slot reuses a concept already in the batch.
    pub false_neg_rate: f64,
    /// Fraction of reused slots that blend the reused concept with another.
    pub partial_overlap: f64,
    /// Seed for the concept prototypes and modality maps.
    pub seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            n_concepts: 256,
            dim_a: 32,
            dim_b: 32,
            latent_dim: 16,
            instance_dim: 8,
            instance_scale: 0.4,
            emb_noise: 0.3,
            false_neg_rate: 0.3,
            partial_overlap: 0.5,
            seed: 0,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_concepts == 0 || self.dim_a == 0 || self.dim_b == 0 || self.latent_dim == 0 {
            return Err(Error::InvalidParameter(
                "world dimensions and concept count must be positive".into(),
            ));
        }
        if !(self.instance_scale >= 0.0 && self.instance_scale.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "instance_scale = {}",
                self.instance_scale
            )));
        }
        if !(self.emb_noise >= 0.0 && self.emb_noise.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "emb_noise = {}",
                self.emb_noise
            )));
        }
        if !(0.0..1.0).contains(&self.false_neg_rate) {
            return Err(Error::InvalidParameter(format!(
                "false_neg_rate = {} must lie in [0, 1)",
                self.false_neg_rate
            )));
        }
        if !(0.0..=1.0).contains(&self.partial_overlap) {
            return Err(Error::InvalidParameter(format!(
                "partial_overlap = {} must lie in [0, 1]",
                self.partial_overlap
            )));
        }
        if self.n_concepts < 2 && self.false_neg_rate > 0.0 {
            return Err(Error::InvalidParameter(
                "false negatives need at least two concepts".into(),
            ));
        }
        Ok(())
    }

    /// The same world with false-negative injection switched off.
    pub fn clean(&self) -> Self {
        Self {
            false_neg_rate: 0.0,
            ..self.clone()
        }
    }
}

/// Concepts rendered in one batch slot: a single concept, or an even blend
/// of two.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotConcept {
    pub primary: usize,
    pub secondary: Option<usize>,
}

impl SlotConcept {
    pub fn overlaps(&self, other: &SlotConcept) -> bool {
        let mine = [Some(self.primary), self.secondary];
        let theirs = [Some(other.primary), other.secondary];
        mine.iter()
            .flatten()
            .any(|c| theirs.iter().flatten().any(|d| c == d))
    }
}

/// One mini-batch of paired raw inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    pub raw_a: Matrix,
    pub raw_b: Matrix,
    pub concepts: Vec<SlotConcept>,
    /// Row-major `N x N`; entry `(i, j)` is true when candidate `j` shares a
    /// concept with anchor `i`. The diagonal is always false.
    pub is_false_negative: Vec<bool>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    #[inline]
    pub fn false_negative(&self, i: usize, j: usize) -> bool {
        self.is_false_negative[i * self.len() + j]
    }

    fn mask_from_concepts(concepts: &[SlotConcept]) -> Vec<bool> {
        let n = concepts.len();
        let mut mask = vec![false; n * n];
        for i in 0..n {
            for j in 0..n {
                mask[i * n + j] = i != j && concepts[i].overlaps(&concepts[j]);
            }
        }
        mask
    }
}

/// A materialized world: concept latents rendered into both modalities by
/// fixed random linear maps.
#[derive(Debug, Clone)]
pub struct World {
    spec: WorldSpec,
    proto_a: Matrix,
    proto_b: Matrix,
    /// Instance maps, absent when `instance_dim` is 0.
    inst: Option<(Matrix, Matrix)>,
}

impl World {
    pub fn new(spec: WorldSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = Rng::new(spec.seed);
        let latent = Matrix::from_fn(spec.n_concepts, spec.latent_dim, |_, _| rng.normal());
        let scale = 1.0 / (spec.latent_dim as f64).sqrt();
        let map_a = Matrix::from_fn(spec.dim_a, spec.latent_dim, |_, _| rng.normal() * scale);
        let map_b = Matrix::from_fn(spec.dim_b, spec.latent_dim, |_, _| rng.normal() * scale);
        let proto_a = latent.matmul_t(&map_a)?;
        let proto_b = latent.matmul_t(&map_b)?;
        for (name, protos) in [("a", &proto_a), ("b", &proto_b)] {
            for i in 0..protos.rows() {
                for j in 0..i {
                    if protos.row(i) == protos.row(j) {
                        return Err(Error::Degenerate(format!(
                            "modality {name} prototypes {i} and {j} coincide"
                        )));
                    }
                }
            }
        }
        let k = spec.instance_dim;
        let inst = (k > 0).then(|| {
            let iscale = 1.0 / (k as f64).sqrt();
            let a = Matrix::from_fn(spec.dim_a, k, |_, _| rng.normal() * iscale);
            let b = Matrix::from_fn(spec.dim_b, k, |_, _| rng.normal() * iscale);
            (a, b)
        });
        Ok(Self {
            spec,
            proto_a,
            proto_b,
            inst,
        })
    }

    pub fn spec(&self) -> &WorldSpec {
        &self.spec
    }

    pub fn prototype_a(&self, c: usize) -> &[f64] {
        self.proto_a.row(c)
    }

    pub fn prototype_b(&self, c: usize) -> &[f64] {
        self.proto_b.row(c)
    }

    /// Noise-free rendering of a slot in both modalities.
    pub fn slot_prototypes(&self, slot: &SlotConcept) -> (Vec<f64>, Vec<f64>) {
        match slot.secondary {
            None => (
                self.prototype_a(slot.primary).to_vec(),
                self.prototype_b(slot.primary).to_vec(),
            ),
            Some(other) => {
                let blend = |p: &[f64], q: &[f64]| -> Vec<f64> {
                    p.iter().zip(q).map(|(u, v)| 0.5 * u + 0.5 * v).collect()
                };
                (
                    blend(self.prototype_a(slot.primary), self.prototype_a(other)),
                    blend(self.prototype_b(slot.primary), self.prototype_b(other)),
                )
            }
        }
    }

    /// Add `instance_scale * map * u` to `dst`.
    fn add_instance(&self, map: &Matrix, u: &[f64], dst: &mut [f64]) {
        let g = self.spec.instance_scale;
        for (r, d) in dst.iter_mut().enumerate() {
            *d += g * map.row(r).iter().zip(u).map(|(m, x)| m * x).sum::<f64>();
        }
    }

    /// Render slots with noise. Training pairs share one instance latent
    /// across modalities; with `shared_instance` false each modality draws
    /// its own, so the pair agrees on the concept only.
    fn render(&self, concepts: Vec<SlotConcept>, shared_instance: bool, rng: &mut Rng) -> PairBatch {
        let n = concepts.len();
        let sigma = self.spec.emb_noise;
        let mut raw_a = Matrix::zeros(n, self.spec.dim_a);
        let mut raw_b = Matrix::zeros(n, self.spec.dim_b);
        for (i, slot) in concepts.iter().enumerate() {
            let (pa, pb) = self.slot_prototypes(slot);
            for (dst, src) in raw_a.row_mut(i).iter_mut().zip(&pa) {
                *dst = src + sigma * rng.normal();
            }
            for (dst, src) in raw_b.row_mut(i).iter_mut().zip(&pb) {
                *dst = src + sigma * rng.normal();
            }
            if let Some((inst_a, inst_b)) = &self.inst {
                let k = inst_a.cols();
                let u: Vec<f64> = (0..k).map(|_| rng.normal()).collect();
                self.add_instance(inst_a, &u, raw_a.row_mut(i));
                let u = if shared_instance {
                    u
                } else {
                    (0..k).map(|_| rng.normal()).collect()
                };
                self.add_instance(inst_b, &u, raw_b.row_mut(i));
            }
        }
        let is_false_negative = PairBatch::mask_from_concepts(&concepts);
        PairBatch {
            raw_a,
            raw_b,
            concepts,
            is_false_negative,
        }
    }

    fn other_concept(&self, not: usize, rng: &mut Rng) -> usize {
        let k = rng.below(self.spec.n_concepts - 1);
        if k >= not {
            k + 1
        } else {
            k
        }
    }

    /// Draw one training batch of `n` pairs.
    ///
    /// Slot 0 takes a uniformly random concept. Every later slot, with
    /// probability `false_neg_rate`, copies the primary concept of a uniformly
    /// chosen earlier slot; a fraction `partial_overlap` of those copies is
    /// blended 50/50 with a second, different concept. Otherwise the slot
    /// draws a fresh uniform concept (which may still collide by chance; the
    /// mask records every overlap).
    pub fn sample_batch(&self, n: usize, rng: &mut Rng) -> Result<PairBatch> {
        if n < 2 {
            return Err(Error::InvalidParameter(format!("batch size {n} < 2")));
        }
        let rho = self.spec.false_neg_rate;
        let kappa = self.spec.partial_overlap;
        let mut concepts: Vec<SlotConcept> = Vec::with_capacity(n);
        for k in 0..n {
            let slot = if k > 0 && rho > 0.0 && rng.bernoulli(rho) {
                let base = concepts[rng.below(k)].primary;
                if kappa > 0.0 && rng.bernoulli(kappa) {
                    SlotConcept {
                        primary: base,
                        secondary: Some(self.other_concept(base, rng)),
                    }
                } else {
                    SlotConcept {
                        primary: base,
                        secondary: None,
                    }
                }
            } else {
                SlotConcept {
                    primary: rng.below(self.spec.n_concepts),
                    secondary: None,
                }
            };
            concepts.push(slot);
        }
        Ok(self.render(concepts, true, rng))
    }

    /// Held-out evaluation pairs: `n` distinct concepts, no blending, fresh
    /// noise, and independent instance latents per modality, so retrieval
    /// succeeds only through concept content. Pair `i`'s true match is index
    /// `i` in the other modality.
    pub fn validation_set(&self, n: usize, rng: &mut Rng) -> Result<PairBatch> {
        if n == 0 || n > self.spec.n_concepts {
            return Err(Error::InvalidParameter(format!(
                "validation size {n} must be within 1..={}",
                self.spec.n_concepts
            )));
        }
        let mut ids: Vec<usize> = (0..self.spec.n_concepts).collect();
        for i in 0..n {
            let j = i + rng.below(ids.len() - i);
            ids.swap(i, j);
        }
        let concepts = ids[..n]
            .iter()
            .map(|&c| SlotConcept {
                primary: c,
                secondary: None,
            })
            .collect();
        Ok(self.render(concepts, false, rng))
    }

    /// Endless stream of training batches.
    pub fn stream(&self, batch: usize, rng: Rng) -> BatchStream<'_> {
        BatchStream {
            world: self,
            batch,
            rng,
        }
    }
}

/// Iterator over training batches of a [`World`].
pub struct BatchStream<'w> {
    world: &'w World,
    batch: usize,
    rng: Rng,
}

impl Iterator for BatchStream<'_> {
    type Item = Result<PairBatch>;

    fn next(&mut self) -> Option<Self::Item> {
        Some(self.world.sample_batch(self.batch, &mut self.rng))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(rho: f64, kappa: f64) -> WorldSpec {
        WorldSpec {
            n_concepts: 64,
            dim_a: 12,
            dim_b: 10,
            latent_dim: 6,
            false_neg_rate: rho,
            partial_overlap: kappa,
            ..WorldSpec::default()
        }
    }

    #[test]
    fn joint_validation() {
        assert!(DiscreteJoint::new(&[vec![0.5, 0.5]]).is_ok());
        assert!(DiscreteJoint::new(&[vec![0.5, 0.4]]).is_err());
        assert!(DiscreteJoint::new(&[vec![0.5, -0.1], vec![0.3, 0.3]]).is_err());
        assert!(DiscreteJoint::new(&[vec![0.5, 0.0], vec![0.5, 0.0]]).is_err());
        assert!(DiscreteJoint::new(&[vec![0.5], vec![0.25, 0.25]]).is_err());
        let big = vec![vec![1.0 / 65.0; 65]; 1];
        assert!(DiscreteJoint::new(&big).is_err());
    }

    #[test]
    fn bsc_and_deterministic_tables() {
        let j = make_bsc_joint(0.8).unwrap();
        assert_eq!(j.p(0, 0), 0.4);
        assert!((j.p(0, 1) - 0.1).abs() < 1e-15);
        assert_eq!(j.py(), &[0.5, 0.5]);
        assert!(make_bsc_joint(1.0).is_err());
        let d = make_deterministic_joint(4).unwrap();
        assert_eq!(d.conditional(2), vec![0.0, 0.0, 1.0, 0.0]);
        assert!(make_deterministic_joint(1).is_err());
        let indep = DiscreteJoint::new(&[vec![0.12, 0.28], vec![0.18, 0.42]]).unwrap();
        assert!(indep.is_factorizable(1e-12));
        assert!(!j.is_factorizable(1e-12));
    }

    #[test]
    fn negative_conditional_mixes() {
        let j = make_bsc_joint(0.8).unwrap();
        let q = j.negative_conditional(0, 0.3);
        // 0.3 * 0.8 + 0.7 * 0.5 and 0.3 * 0.2 + 0.7 * 0.5
        assert!((q[0] - 0.59).abs() < 1e-15);
        assert!((q[1] - 0.41).abs() < 1e-15);
        assert_eq!(j.negative_conditional(1, 0.0), j.py().to_vec());
    }

    #[test]
    fn fully_dependent_deterministic_negatives_copy_positive() {
        let d = make_deterministic_joint(4).unwrap();
        let mut rng = Rng::new(1);
        for _ in 0..200 {
            let b = sample_batch_with_dependence(&d, 8, 1.0, &mut rng).unwrap();
            assert!(b.negatives().iter().all(|&y| y == b.positive()));
            assert_eq!(b.x, b.positive());
        }
        assert!(sample_batch_with_dependence(&d, 1, 0.0, &mut rng).is_err());
        assert!(sample_batch_with_dependence(&d, 4, 1.5, &mut rng).is_err());
    }

    #[test]
    fn dependent_negative_frequencies_match_mixture() {
        let j = make_bsc_joint(0.8).unwrap();
        let mut rng = Rng::new(2);
        let (mut agree, mut total) = (0usize, 0usize);
        for _ in 0..20_000 {
            let b = sample_batch_with_dependence(&j, 5, 0.3, &mut rng).unwrap();
            agree += b.negatives().iter().filter(|&&y| y == b.x).count();
            total += 4;
        }
        let f = agree as f64 / total as f64;
        // q(y = x | x) = 0.59; sd of the mean ≈ 0.0024
        assert!((f - 0.59).abs() < 0.01, "{f}");
    }

    #[test]
    fn clean_world_rarely_collides() {
        let s = WorldSpec {
            n_concepts: 4096,
            ..spec(0.0, 0.0)
        };
        let w = World::new(s).unwrap();
        let mut rng = Rng::new(3);
        let n = 8;
        let trials = 2000;
        let clean = (0..trials)
            .filter(|_| !w.sample_batch(n, &mut rng).unwrap().is_false_negative.contains(&true))
            .count();
        // Birthday bound: P(no collision) ≥ 1 − N²/n_concepts ≈ 0.984.
        assert!(clean as f64 / trials as f64 >= 1.0 - (n * n) as f64 / 4096.0 - 0.01);
    }

    #[test]
    fn mask_matches_concepts() {
        let w = World::new(spec(0.4, 0.5)).unwrap();
        let mut rng = Rng::new(4);
        for _ in 0..50 {
            let b = w.sample_batch(16, &mut rng).unwrap();
            for i in 0..16 {
                assert!(!b.false_negative(i, i));
                for j in 0..16 {
                    assert_eq!(b.false_negative(i, j), b.false_negative(j, i));
                    if i != j {
                        assert_eq!(b.false_negative(i, j), b.concepts[i].overlaps(&b.concepts[j]));
                    }
                }
            }
        }
    }

    #[test]
    fn rows_with_false_negatives_match_index_process() {
        // Re-simulate only the concept bookkeeping, independently of the
        // rendering code, and compare the share of rows holding at least one
        // false negative.
        let (rho, kappa, n, nc) = (0.3, 0.5, 64, 256);
        let w = World::new(WorldSpec {
            n_concepts: nc,
            ..spec(rho, kappa)
        })
        .unwrap();
        let trials = 400;
        let mut rng = Rng::new(5);
        let mut gen_share = 0.0;
        for _ in 0..trials {
            let b = w.sample_batch(n, &mut rng).unwrap();
            gen_share += (0..n)
                .filter(|&i| (0..n).any(|j| b.false_negative(i, j)))
                .count() as f64
                / n as f64;
        }
        let mut rng = Rng::new(6);
        let mut sim_share = 0.0;
        for _ in 0..trials {
            let mut sets: Vec<Vec<usize>> = Vec::new();
            for k in 0..n {
                let u = rng.uniform();
                let set = if k > 0 && u < rho {
                    let base = sets[(rng.uniform() * k as f64) as usize][0];
                    if rng.uniform() < kappa {
                        let mut other = (rng.uniform() * (nc - 1) as f64) as usize;
                        if other >= base {
                            other += 1;
                        }
                        vec![base, other]
                    } else {
                        vec![base]
                    }
                } else {
                    vec![(rng.uniform() * nc as f64) as usize]
                };
                sets.push(set);
            }
            sim_share += (0..n)
                .filter(|&i| (0..n).any(|j| j != i && sets[i].iter().any(|c| sets[j].contains(c))))
                .count() as f64
                / n as f64;
        }
        let (g, s) = (gen_share / trials as f64, sim_share / trials as f64);
        assert!((g - s).abs() < 0.02, "generator {g}, simulation {s}");
        assert!(g > 0.3 && g < 0.8, "{g}");
    }

    #[test]
    fn blend_is_midpoint_of_prototypes() {
        let w = World::new(spec(0.3, 1.0)).unwrap();
        let slot = SlotConcept {
            primary: 3,
            secondary: Some(9),
        };
        let (a, b) = w.slot_prototypes(&slot);
        for (k, v) in a.iter().enumerate() {
            assert!((v - 0.5 * (w.prototype_a(3)[k] + w.prototype_a(9)[k])).abs() < 1e-15);
        }
        for (k, v) in b.iter().enumerate() {
            assert!((v - 0.5 * (w.prototype_b(3)[k] + w.prototype_b(9)[k])).abs() < 1e-15);
        }
    }

    #[test]
    fn clean_noise_free_world_renders_prototypes() {
        let w = World::new(WorldSpec {
            emb_noise: 0.0,
            instance_dim: 0,
            ..spec(0.5, 0.0)
        })
        .unwrap();
        let batch = w.sample_batch(16, &mut Rng::new(2)).unwrap();
        for (i, slot) in batch.concepts.iter().enumerate() {
            assert_eq!(batch.raw_a.row(i), w.prototype_a(slot.primary));
            assert_eq!(batch.raw_b.row(i), w.prototype_b(slot.primary));
        }
    }

    #[test]
    fn stream_is_deterministic() {
        let w = World::new(spec(0.3, 0.5)).unwrap();
        let a: Vec<PairBatch> = w.stream(8, Rng::new(9)).take(5).map(|b| b.unwrap()).collect();
        let b: Vec<PairBatch> = w.stream(8, Rng::new(9)).take(5).map(|b| b.unwrap()).collect();
        assert_eq!(a, b);
        let c: Vec<PairBatch> = w.stream(8, Rng::new(10)).take(5).map(|b| b.unwrap()).collect();
        assert_ne!(a, c);
    }

    #[test]
    fn spec_validation() {
        assert!(spec(1.0, 0.0).validate().is_err());
        assert!(spec(0.3, 1.5).validate().is_err());
        let one = WorldSpec {
            n_concepts: 1,
            ..spec(0.2, 0.0)
        };
        assert!(one.validate().is_err());
        assert!(WorldSpec { false_neg_rate: 0.0, ..one }.validate().is_ok());
        assert_eq!(spec(0.3, 0.5).clean().false_neg_rate, 0.0);
    }

    #[test]
    fn validation_set_has_distinct_concepts() {
        let w = World::new(spec(0.3, 0.5)).unwrap();
        let v = w.validation_set(64, &mut Rng::new(1)).unwrap();
        assert!(!v.is_false_negative.contains(&true));
        assert!(v.concepts.iter().all(|c| c.secondary.is_none()));
        assert!(w.validation_set(65, &mut Rng::new(1)).is_err());
    }
}
