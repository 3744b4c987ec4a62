//! The five subcommands. Each returns the report it produced; artifacts go
//! to the resolved output directory.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use srcl_core::eval::{evaluate, threshold_mask_sweep, weight_histogram, WeightHistogram};
use srcl_core::trainer::{
    read_checkpoint, train_student, train_teacher, write_checkpoint, EncoderPair, HistoryRow,
    LossKind, TeacherHandle, TrainerState,
};
use srcl_core::{Error, Rng, World};

use crate::config::{ConfigError, ExperimentConfig};
use crate::report::{Provenance, Report};
use crate::verify;

pub const EXIT_OK: i32 = 0;
pub const EXIT_ASSERTION: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(#[from] ConfigError),
    #[error("checkpoint not found: {0}")]
    MissingCheckpoint(PathBuf),
    #[error("{0}")]
    Assertion(String),
    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Core(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Diverged { step, reason } => CliError::Diverged { step, reason },
            Error::Io(io) => CliError::Io(io),
            other => CliError::Core(other),
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Io(std::io::Error::other(e))
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Assertion(_) | CliError::Diverged { .. } => EXIT_ASSERTION,
            CliError::Config(_) | CliError::MissingCheckpoint(_) | CliError::Io(_) => EXIT_CONFIG,
            CliError::Core(Error::InvalidParameter(_)) => EXIT_CONFIG,
            CliError::Core(_) => EXIT_ASSERTION,
        }
    }
}

/// Where a run writes its artifacts.
#[derive(Debug, Clone)]
pub struct Ctx {
    pub cfg: ExperimentConfig,
    pub out_dir: PathBuf,
}

impl Ctx {
    pub fn new(cfg: ExperimentConfig) -> Result<Self, CliError> {
        let out_dir = cfg.resolved_output_dir();
        fs::create_dir_all(&out_dir)?;
        Ok(Self { cfg, out_dir })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }
}

pub fn verify_bounds(ctx: &Ctx, stdout: &mut dyn Write) -> Result<Report, CliError> {
    let cfg = &ctx.cfg.verify;
    let mut report = Report::new(&Provenance::new("verify-bounds", &ctx.cfg, cfg.seed));
    let outcome = verify::run_all(cfg, &mut report)?;
    report.write_to(&mut *stdout)?;
    report.save(&ctx.path("verify_bounds.jsonl"))?;
    if !outcome.passed() {
        let f = &outcome.failures[0];
        return Err(CliError::Assertion(format!(
            "{} failing cell(s); first: {}: {}",
            outcome.failures.len(),
            f.cell,
            f.reason
        )));
    }
    Ok(report)
}

pub fn gradcheck(ctx: &Ctx, corrupt: bool, stdout: &mut dyn Write) -> Result<Report, CliError> {
    let cfg = &ctx.cfg.verify;
    let mut report = Report::new(&Provenance::new("gradcheck", &ctx.cfg, cfg.seed));
    let records = verify::gradcheck(cfg, corrupt)?;
    for r in &records {
        report.push("gradcheck", r);
    }
    let worst = |loss| {
        records
            .iter()
            .filter(|r| r.loss == loss)
            .map(|r| r.max_rel_error)
            .fold(0.0, f64::max)
    };
    let failed = records.iter().filter(|r| !r.passed).count();
    report.push(
        "summary",
        &serde_json::json!({
            "instances": records.len(),
            "failed": failed,
            "max_rel_error_infonce": worst(verify::AuditedLoss::Infonce),
            "max_rel_error_srcl": worst(verify::AuditedLoss::Srcl),
            "tolerance": cfg.gradcheck_tolerance,
        }),
    );
    report.write_to(&mut *stdout)?;
    report.save(&ctx.path("gradcheck.jsonl"))?;
    if failed > 0 {
        let first = records.iter().find(|r| !r.passed).unwrap();
        return Err(CliError::Assertion(format!(
            "{failed} gradient check(s) above tolerance; first: {:?} instance {} error {:e}",
            first.loss, first.instance, first.max_rel_error
        )));
    }
    Ok(report)
}

fn save_checkpoint(pair: &EncoderPair, path: &Path) -> Result<(), CliError> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    write_checkpoint(pair, &mut f)?;
    f.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<EncoderPair, CliError> {
    if !path.is_file() {
        return Err(CliError::MissingCheckpoint(path.to_path_buf()));
    }
    let f = std::io::BufReader::new(fs::File::open(path)?);
    read_checkpoint(f).map_err(|e| match e {
        Error::Format(m) => CliError::Config(ConfigError::Io(format!("{}: {m}", path.display()))),
        other => other.into(),
    })
}

pub fn write_history(rows: &[HistoryRow], path: &Path) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "loss", "alpha", "mean_false_neg_weight", "mean_true_neg_weight"])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.step.to_string(),
            r.loss.to_string(),
            opt(r.alpha),
            opt(r.mean_false_neg_weight),
            opt(r.mean_true_neg_weight),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn teacher_for(ctx: &Ctx) -> Result<TeacherHandle, CliError> {
    Ok(train_teacher(&ctx.cfg.world.clean(), &ctx.cfg.train)?)
}

#[derive(Serialize)]
struct ModelSummary<'a> {
    role: &'a str,
    checkpoint: String,
    checksum: String,
    final_loss: f64,
    retrieval: srcl_core::eval::RetrievalReport,
}

pub fn train(ctx: &Ctx) -> Result<Report, CliError> {
    let cfg = &ctx.cfg;
    let mut report = Report::new(&Provenance::new("train", cfg, cfg.train.seed));
    let world = World::new(cfg.world.clone())?;
    let teacher = teacher_for(ctx)?;
    save_checkpoint(teacher.encoders(), &ctx.path("teacher.ckpt"))?;
    report.push(
        "model",
        &ModelSummary {
            role: "teacher",
            checkpoint: "teacher.ckpt".into(),
            checksum: format!("{:016x}", teacher.checksum()),
            final_loss: teacher.final_loss(),
            retrieval: evaluate(teacher.encoders(), &world, cfg.eval.val_size, cfg.train.seed)?,
        },
    );
    let state = train_student(&cfg.world, &teacher, &cfg.train, &cfg.regulator)?;
    save_checkpoint(&state.student, &ctx.path("student.ckpt"))?;
    write_history(&state.history, &ctx.path("history.csv"))?;
    report.push(
        "model",
        &ModelSummary {
            role: "student",
            checkpoint: "student.ckpt".into(),
            checksum: format!("{:016x}", state.student.checksum()),
            final_loss: state.history.last().map_or(f64::NAN, |r| r.loss),
            retrieval: evaluate(&state.student, &world, cfg.eval.val_size, cfg.train.seed)?,
        },
    );
    report.save(&ctx.path("train.jsonl"))?;
    Ok(report)
}

fn write_histogram(h: &WeightHistogram, path: &Path) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["bin_lo", "bin_hi", "count"])?;
    for (b, c) in h.counts.iter().enumerate() {
        w.write_record([h.edges[b].to_string(), h.edges[b + 1].to_string(), c.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// One batch of a-to-b weights as an `N x N` grid; positives are blank.
fn write_weight_sample(state: &TrainerState, world: &World, rng: &mut Rng, path: &Path) -> Result<(), CliError> {
    let batch = world.sample_batch(state.config.batch, rng)?;
    let (ea, eb) = state.student.embed(&batch)?;
    let n = batch.len();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record((0..n).map(|j| format!("c{j}")))?;
    let weights = state.step_weights(&batch, &ea, &eb)?;
    for i in 0..n {
        w.write_record((0..n).map(|j| match (&weights, i == j) {
            (_, true) => String::new(),
            (Some((_, wab, _)), false) => wab.get(i, j).to_string(),
            (None, false) => "1".into(),
        }))?;
    }
    w.flush()?;
    Ok(())
}

const HISTOGRAM_STREAM: u64 = 11;

pub fn eval(ctx: &Ctx, checkpoint: &Path) -> Result<Report, CliError> {
    let cfg = &ctx.cfg;
    let pair = load_checkpoint(checkpoint)?;
    let mut report = Report::new(&Provenance::new("eval", cfg, cfg.train.seed));
    let world = World::new(cfg.world.clone())?;
    let retrieval = evaluate(&pair, &world, cfg.eval.val_size, cfg.train.seed)?;
    report.push(
        "retrieval",
        &serde_json::json!({
            "checkpoint": checkpoint.file_name().map(|s| s.to_string_lossy().into_owned()),
            "checksum": format!("{:016x}", pair.checksum()),
            "report": retrieval,
        }),
    );
    // At the end of the schedule the regulator reads only the live model,
    // so the checkpoint doubles as the teacher here.
    let mut state = TrainerState::new(
        &cfg.world,
        Some(TeacherHandle::new(pair.clone(), f64::NAN)),
        cfg.train.clone(),
        cfg.regulator.clone(),
    )?;
    state.student = pair;
    state.step = cfg.train.steps;
    let mut rng = Rng::new(cfg.train.seed).fork(HISTOGRAM_STREAM);
    let hist = weight_histogram(&state, &world, cfg.eval.histogram_batches, cfg.eval.histogram_bins, &mut rng)?;
    report.push(
        "weight_histogram",
        &serde_json::json!({
            "regulated": cfg.train.loss == LossKind::Srcl,
            "mass_0.8_1.2": hist.mass_between(0.8, 1.2),
            "histogram": hist,
        }),
    );
    write_histogram(&hist, &ctx.path("weights_hist.csv"))?;
    write_weight_sample(&state, &world, &mut rng, &ctx.path("weights_sample.csv"))?;
    report.save(&ctx.path("eval.jsonl"))?;
    Ok(report)
}

pub fn sweep(ctx: &Ctx) -> Result<Report, CliError> {
    let cfg = &ctx.cfg;
    let mut report = Report::new(&Provenance::new("sweep", cfg, cfg.train.seed));
    let teacher = teacher_for(ctx)?;
    let points = threshold_mask_sweep(
        &cfg.world,
        &teacher,
        &cfg.train,
        &cfg.regulator,
        &cfg.eval.thresholds,
        cfg.eval.val_size,
    )?;
    let mut w = csv::Writer::from_path(ctx.path("sweep.csv"))?;
    w.write_record(["threshold", "r_at_1_ab", "r_at_1_ba", "skipped_rows"])?;
    for p in &points {
        w.write_record([
            p.threshold.to_string(),
            p.report.a_to_b_at(1).unwrap_or(f64::NAN).to_string(),
            p.report.b_to_a_at(1).unwrap_or(f64::NAN).to_string(),
            p.skipped_rows.to_string(),
        ])?;
        report.push("sweep_point", p);
    }
    w.flush()?;
    report.save(&ctx.path("sweep.jsonl"))?;
    Ok(report)
}
