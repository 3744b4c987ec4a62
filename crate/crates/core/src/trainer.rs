//! Two-encoder contrastive training on a synthetic world.
//!
//! A teacher pair is trained with InfoNCE on the clean (false-negative free)
//! version of a world and frozen. Students are then trained on the noisy
//! world either with plain InfoNCE or with SRCL, whose weights come from a
//! blend of teacher and student similarities.

use std::io::{Read, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{info_nce, srcl_symmetric, Direction, LossConfig};
use crate::numerics::{cosine_matrix, Matrix, Rng};
use crate::regulator::{regulation_weights, RegulatorConfig, WeightMatrix};
use crate::synth::{PairBatch, World, WorldSpec};

/// Dense layer `y = W x + b` with `W` stored `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Affine {
    fn init(out: usize, inp: usize, scale: f64, rng: &mut Rng) -> Self {
        Self {
            weight: Matrix::from_fn(out, inp, |_, _| rng.uniform_range(-scale, scale)),
            bias: vec![0.0; out],
        }
    }

    fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut y = x.matmul_t(&self.weight)?;
        for i in 0..y.rows() {
            for (v, b) in y.row_mut(i).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        Ok(y)
    }

    /// Accumulate parameter gradients for upstream gradient `g` at input `x`
    /// and return the gradient with respect to `x`.
    fn backward(&self, x: &Matrix, g: &Matrix, grad: &mut Affine) -> Matrix {
        let (out, inp) = self.weight.shape();
        for i in 0..x.rows() {
            let (xi, gi) = (x.row(i), g.row(i));
            for o in 0..out {
                let go = gi[o];
                grad.bias[o] += go;
                let row = grad.weight.row_mut(o);
                for k in 0..inp {
                    row[k] += go * xi[k];
                }
            }
        }
        let mut dx = Matrix::zeros(x.rows(), inp);
        for i in 0..x.rows() {
            let gi = g.row(i);
            let dxi = dx.row_mut(i);
            for o in 0..out {
                let go = gi[o];
                for (d, w) in dxi.iter_mut().zip(self.weight.row(o)) {
                    *d += go * w;
                }
            }
        }
        dx
    }

    fn zeros_like(&self) -> Self {
        let (o, i) = self.weight.shape();
        Self {
            weight: Matrix::zeros(o, i),
            bias: vec![0.0; o],
        }
    }

    fn param_count(&self) -> usize {
        self.weight.as_slice().len() + self.bias.len()
    }
}

/// One modality's encoder: an affine map, optionally preceded by a `tanh`
/// hidden layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub hidden: Option<Affine>,
    pub output: Affine,
}

struct EncoderCache {
    input: Matrix,
    hidden_act: Option<Matrix>,
}

impl Encoder {
    pub fn init(dim_in: usize, spec: &EncoderSpec, rng: &mut Rng) -> Self {
        let scale = spec.init_scale;
        match spec.hidden_dim {
            0 => Self {
                hidden: None,
                output: Affine::init(spec.emb_dim, dim_in, scale, rng),
            },
            h => Self {
                hidden: Some(Affine::init(h, dim_in, scale, rng)),
                output: Affine::init(spec.emb_dim, h, scale, rng),
            },
        }
    }

    pub fn encode(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward(x)?.0)
    }

    fn forward(&self, x: &Matrix) -> Result<(Matrix, EncoderCache)> {
        match &self.hidden {
            None => Ok((
                self.output.forward(x)?,
                EncoderCache {
                    input: x.clone(),
                    hidden_act: None,
                },
            )),
            Some(h) => {
                let act = h.forward(x)?.map(f64::tanh);
                let y = self.output.forward(&act)?;
                Ok((
                    y,
                    EncoderCache {
                        input: x.clone(),
                        hidden_act: Some(act),
                    },
                ))
            }
        }
    }

    fn backward(&self, cache: &EncoderCache, g: &Matrix) -> Encoder {
        let mut grad = self.zeros_like();
        match (&self.hidden, &cache.hidden_act) {
            (Some(h), Some(act)) => {
                let mut dact = self.output.backward(act, g, &mut grad.output);
                for (d, a) in dact.as_mut_slice().iter_mut().zip(act.as_slice()) {
                    *d *= 1.0 - a * a;
                }
                h.backward(&cache.input, &dact, grad.hidden.as_mut().unwrap());
            }
            _ => {
                self.output.backward(&cache.input, g, &mut grad.output);
            }
        }
        grad
    }

    fn zeros_like(&self) -> Self {
        Self {
            hidden: self.hidden.as_ref().map(Affine::zeros_like),
            output: self.output.zeros_like(),
        }
    }

    fn layers(&self) -> impl Iterator<Item = &Affine> {
        self.hidden.iter().chain(std::iter::once(&self.output))
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Affine> {
        self.hidden.iter_mut().chain(std::iter::once(&mut self.output))
    }

    pub fn param_count(&self) -> usize {
        self.layers().map(Affine::param_count).sum()
    }

    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        for layer in self.layers() {
            out.extend_from_slice(layer.weight.as_slice());
            out.extend_from_slice(&layer.bias);
        }
    }

    /// Overwrite parameters from `src`, returning the unread tail.
    pub fn unflatten_from<'a>(&mut self, mut src: &'a [f64]) -> &'a [f64] {
        for layer in self.layers_mut() {
            let n = layer.weight.as_slice().len();
            layer.weight.as_mut_slice().copy_from_slice(&src[..n]);
            src = &src[n..];
            let m = layer.bias.len();
            layer.bias.copy_from_slice(&src[..m]);
            src = &src[m..];
        }
        src
    }
}

/// Encoders for both modalities.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderPair {
    pub a: Encoder,
    pub b: Encoder,
}

impl EncoderPair {
    pub fn init(world: &WorldSpec, spec: &EncoderSpec, rng: &mut Rng) -> Self {
        let a = Encoder::init(world.dim_a, spec, rng);
        let b = Encoder::init(world.dim_b, spec, rng);
        Self { a, b }
    }

    pub fn embed(&self, batch: &PairBatch) -> Result<(Matrix, Matrix)> {
        Ok((self.a.encode(&batch.raw_a)?, self.b.encode(&batch.raw_b)?))
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.a.param_count() + self.b.param_count());
        self.a.flatten_into(&mut v);
        self.b.flatten_into(&mut v);
        v
    }

    pub fn unflatten(&mut self, src: &[f64]) {
        let rest = self.a.unflatten_from(src);
        let rest = self.b.unflatten_from(rest);
        debug_assert!(rest.is_empty());
    }

    /// FNV-1a over the little-endian parameter bytes.
    pub fn checksum(&self) -> u64 {
        self.flatten()
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
                (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
            })
    }
}

/// Encoder architecture shared by teacher and student.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSpec {
    pub emb_dim: usize,
    /// Width of the `tanh` hidden layer; 0 means a single affine map.
    pub hidden_dim: usize,
    /// Initial parameters are uniform in `[-init_scale, init_scale]`.
    pub init_scale: f64,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self {
            emb_dim: 16,
            hidden_dim: 0,
            init_scale: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Infonce,
    Srcl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub temperature: f64,
    pub loss: LossKind,
    pub seed: u64,
    pub encoder: EncoderSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 64,
            lr: 0.5,
            momentum: 0.9,
            temperature: 0.1,
            loss: LossKind::Srcl,
            seed: 0,
            encoder: EncoderSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.batch < 2 {
            return bad(format!("batch {} < 2", self.batch));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature {}", self.temperature));
        }
        if self.encoder.emb_dim == 0 || !(self.encoder.init_scale > 0.0) {
            return bad("encoder needs positive emb_dim and init_scale".into());
        }
        Ok(())
    }

    fn loss_config(&self) -> LossConfig {
        LossConfig {
            temperature: self.temperature,
            direction: Direction::SymmetricSum,
        }
    }
}

/// Classic heavy-ball update: `v ← μ v + g`, `p ← p − η v`.
pub fn sgd_step(
    params: &mut [f64],
    grads: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::Shape(format!(
            "{} params, {} grads, {} velocity entries",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    if let Some(k) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient entry {k}")));
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

/// Frozen encoders trained on clean data. Cheap to clone and share.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherHandle {
    encoders: Arc<EncoderPair>,
    final_loss: f64,
}

impl TeacherHandle {
    pub fn new(encoders: EncoderPair, final_loss: f64) -> Self {
        Self {
            encoders: Arc::new(encoders),
            final_loss,
        }
    }

    pub fn encoders(&self) -> &EncoderPair {
        &self.encoders
    }

    pub fn final_loss(&self) -> f64 {
        self.final_loss
    }

    pub fn checksum(&self) -> u64 {
        self.encoders.checksum()
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub step: usize,
    pub loss: f64,
    pub alpha: Option<f64>,
    pub mean_false_neg_weight: Option<f64>,
    pub mean_true_neg_weight: Option<f64>,
}

/// Knobs that alter a training run beyond its [`TrainConfig`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainOptions {
    /// Drop negatives whose regulation weight falls below this value.
    pub mask_threshold: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainerState {
    pub config: TrainConfig,
    pub regulator: RegulatorConfig,
    pub student: EncoderPair,
    pub teacher: Option<TeacherHandle>,
    pub velocity: Vec<f64>,
    pub step: usize,
    pub history: Vec<HistoryRow>,
    /// Anchor rows that lost every negative to masking, summed over steps.
    pub skipped_rows: usize,
}

const INIT_STREAM: u64 = 0;
const BATCH_STREAM: u64 = 1;

impl TrainerState {
    pub fn new(
        world: &WorldSpec,
        teacher: Option<TeacherHandle>,
        config: TrainConfig,
        regulator: RegulatorConfig,
    ) -> Result<Self> {
        config.validate()?;
        regulator.validate()?;
        let mut rng = Rng::new(config.seed).fork(INIT_STREAM);
        let student = EncoderPair::init(world, &config.encoder, &mut rng);
        let velocity = vec![0.0; student.flatten().len()];
        Ok(Self {
            config,
            regulator,
            student,
            teacher,
            velocity,
            step: 0,
            history: Vec::new(),
            skipped_rows: 0,
        })
    }

    /// Regulation weights for `batch` at the current step, or `None` when
    /// the run uses plain InfoNCE.
    pub fn step_weights(
        &self,
        batch: &PairBatch,
        emb_a: &Matrix,
        emb_b: &Matrix,
    ) -> Result<Option<(f64, WeightMatrix, WeightMatrix)>> {
        if self.config.loss == LossKind::Infonce {
            return Ok(None);
        }
        let student_cos = cosine_matrix(emb_a, emb_b)?;
        let teacher_cos = match &self.teacher {
            Some(t) => {
                let (ta, tb) = t.encoders().embed(batch)?;
                cosine_matrix(&ta, &tb)?
            }
            None => student_cos.clone(),
        };
        let sw = regulation_weights(
            &self.regulator,
            &teacher_cos,
            &student_cos,
            self.step,
            self.config.steps,
            self.config.temperature,
        )?;
        Ok(Some((sw.alpha, sw.a_to_b, sw.b_to_a)))
    }

    /// One optimization step on `batch`.
    pub fn train_step(&mut self, batch: &PairBatch, options: &TrainOptions) -> Result<HistoryRow> {
        let (out_a, cache_a) = self.student.a.forward(&batch.raw_a)?;
        let (out_b, cache_b) = self.student.b.forward(&batch.raw_b)?;
        let loss_cfg = self.config.loss_config();
        let weights = self.step_weights(batch, &out_a, &out_b)?;
        let (loss, row) = match weights {
            None => {
                let loss = info_nce(&out_a, &out_b, &loss_cfg);
                (loss, HistoryRow {
                    step: self.step,
                    loss: f64::NAN,
                    alpha: None,
                    mean_false_neg_weight: None,
                    mean_true_neg_weight: None,
                })
            }
            Some((alpha, mut wab, mut wba)) => {
                if let Some(theta) = options.mask_threshold {
                    let (m_ab, e_ab) = wab.mask_below(theta);
                    let (m_ba, e_ba) = wba.mask_below(theta);
                    self.skipped_rows += e_ab.len() + e_ba.len();
                    wab = m_ab;
                    wba = m_ba;
                }
                let (fn_mean, tn_mean) = split_means(&wab, batch);
                let loss = srcl_symmetric(&out_a, &out_b, &wab, &wba, &loss_cfg);
                (loss, HistoryRow {
                    step: self.step,
                    loss: f64::NAN,
                    alpha: Some(alpha),
                    mean_false_neg_weight: fn_mean,
                    mean_true_neg_weight: tn_mean,
                })
            }
        };
        let loss = loss.map_err(|e| match e {
            Error::NonFinite(reason) => Error::Diverged {
                step: self.step,
                reason,
            },
            other => other,
        })?;
        if !loss.value.is_finite() {
            return Err(Error::Diverged {
                step: self.step,
                reason: format!("loss {}", loss.value),
            });
        }
        let ga = self.student.a.backward(&cache_a, &loss.grad_a);
        let gb = self.student.b.backward(&cache_b, &loss.grad_b);
        let grads = EncoderPair { a: ga, b: gb }.flatten();
        let mut params = self.student.flatten();
        sgd_step(
            &mut params,
            &grads,
            &mut self.velocity,
            self.config.lr,
            self.config.momentum,
        )
        .map_err(|e| Error::Diverged {
            step: self.step,
            reason: e.to_string(),
        })?;
        self.student.unflatten(&params);
        let row = HistoryRow {
            loss: loss.value,
            ..row
        };
        self.history.push(row.clone());
        self.step += 1;
        Ok(row)
    }

    pub fn run(&mut self, world: &World, options: &TrainOptions) -> Result<()> {
        let rng = Rng::new(self.config.seed).fork(BATCH_STREAM);
        let remaining = self.config.steps.saturating_sub(self.step);
        for batch in world.stream(self.config.batch, rng).take(remaining) {
            self.train_step(&batch?, options)?;
        }
        Ok(())
    }
}

/// Mean weight over ground-truth false-negative slots and over true-negative
/// slots of `w`.
pub fn split_means(w: &WeightMatrix, batch: &PairBatch) -> (Option<f64>, Option<f64>) {
    let (mut fs, mut fc, mut ts, mut tc) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..w.rows() {
        for (j, v) in w.row_negatives(i) {
            if batch.false_negative(i, j) {
                fs += v;
                fc += 1;
            } else {
                ts += v;
                tc += 1;
            }
        }
    }
    let mean = |s: f64, c: usize| (c > 0).then(|| s / c as f64);
    (mean(fs, fc), mean(ts, tc))
}

/// Train a teacher with InfoNCE on a clean world and freeze it.
pub fn train_teacher(world_clean: &WorldSpec, cfg: &TrainConfig) -> Result<TeacherHandle> {
    if world_clean.false_neg_rate != 0.0 {
        return Err(Error::InvalidParameter(
            "teacher must be trained on a world without injected false negatives".into(),
        ));
    }
    let world = World::new(world_clean.clone())?;
    let cfg = TrainConfig {
        loss: LossKind::Infonce,
        ..cfg.clone()
    };
    let mut state = TrainerState::new(world_clean, None, cfg, RegulatorConfig::default())?;
    state.run(&world, &TrainOptions::default())?;
    let final_loss = state.history.last().map_or(f64::NAN, |r| r.loss);
    Ok(TeacherHandle::new(state.student, final_loss))
}

/// Train a student on `world`. With `LossKind::Infonce` the teacher and the
/// regulator are never consulted.
pub fn train_student(
    world: &WorldSpec,
    teacher: &TeacherHandle,
    cfg: &TrainConfig,
    regulator: &RegulatorConfig,
) -> Result<TrainerState> {
    train_student_with(world, teacher, cfg, regulator, &TrainOptions::default())
}

pub fn train_student_with(
    world: &WorldSpec,
    teacher: &TeacherHandle,
    cfg: &TrainConfig,
    regulator: &RegulatorConfig,
    options: &TrainOptions,
) -> Result<TrainerState> {
    let w = World::new(world.clone())?;
    let mut state = TrainerState::new(world, Some(teacher.clone()), cfg.clone(), regulator.clone())?;
    state.run(&w, options)?;
    Ok(state)
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"SRCLCKPT";
const CHECKPOINT_VERSION: u32 = 1;

/// Serialize an encoder pair.
///
/// Layout, all integers `u32` little-endian, all reals `f64` little-endian:
/// the 8 magic bytes `SRCLCKPT`, a format version (1), the encoder count (2,
/// modality a then b), then per encoder its layer count followed by each
/// layer (input side first) as `rows`, `cols`, `rows*cols` row-major
/// weights and `rows` biases.
pub fn write_checkpoint<W: Write>(pair: &EncoderPair, mut out: W) -> Result<()> {
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&2u32.to_le_bytes())?;
    for enc in [&pair.a, &pair.b] {
        let layers: Vec<&Affine> = enc.layers().collect();
        out.write_all(&(layers.len() as u32).to_le_bytes())?;
        for layer in layers {
            let (r, c) = layer.weight.shape();
            out.write_all(&(r as u32).to_le_bytes())?;
            out.write_all(&(c as u32).to_le_bytes())?;
            for v in layer.weight.as_slice().iter().chain(&layer.bias) {
                out.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<EncoderPair> {
    fn u32_of<R: Read>(r: &mut R) -> Result<u32> {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }
    fn f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
        let mut buf = vec![0u8; n * 8];
        r.read_exact(&mut buf)?;
        Ok(buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad magic bytes".into()));
    }
    let version = u32_of(&mut input)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    if u32_of(&mut input)? != 2 {
        return Err(Error::Format("expected two encoders".into()));
    }
    let mut encs = Vec::with_capacity(2);
    for _ in 0..2 {
        let n_layers = u32_of(&mut input)? as usize;
        if !(1..=2).contains(&n_layers) {
            return Err(Error::Format(format!("{n_layers} layers")));
        }
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let r = u32_of(&mut input)? as usize;
            let c = u32_of(&mut input)? as usize;
            let weight = Matrix::from_vec(r, c, f64s(&mut input, r * c)?)
                .map_err(|e| Error::Format(e.to_string()))?;
            let bias = f64s(&mut input, r)?;
            layers.push(Affine { weight, bias });
        }
        let output = layers.pop().unwrap();
        encs.push(Encoder {
            hidden: layers.pop(),
            output,
        });
    }
    let b = encs.pop().unwrap();
    let a = encs.pop().unwrap();
    Ok(EncoderPair { a, b })
}
