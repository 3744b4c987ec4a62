//! Acceptance suite. Each criterion prints one `PASS`/`FAIL` line; the
//! process exits non-zero if any criterion fails.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use srcl_cli::config::{ExperimentConfig, VerifyConfig};
use srcl_cli::report::{Provenance, Report};
use srcl_cli::verify::{self, Outcome};
use srcl_core::eval::{evaluate, threshold_mask_sweep, weight_histogram};
use srcl_core::losses::{info_nce, srcl};
use srcl_core::regulator::{
    blended_similarity, check_condition1, check_condition2, weights_from_similarity,
};
use srcl_core::trainer::{train_student, train_teacher, LossKind, TeacherHandle, TrainConfig};
use srcl_core::{Direction, LossConfig, Matrix, Rng, World, WorldSpec};

const SEEDS: u64 = 10;

struct Verdict {
    passed: bool,
    detail: String,
}

impl Verdict {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self {
            passed,
            detail: detail.into(),
        }
    }
}

fn within(elapsed: Duration, budget_secs: u64) -> bool {
    elapsed <= Duration::from_secs(budget_secs)
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// Random regulator inputs: exp-cosine teacher and student grids, a random
/// blend and a batch size in 4..=128.
fn random_invocation(rng: &mut Rng) -> Matrix {
    let n = 4 + rng.below(125);
    let teacher = Matrix::from_fn(n, n, |_, _| rng.uniform_range(-1.0, 1.0).exp());
    let student = Matrix::from_fn(n, n, |_, _| rng.uniform_range(-1.0, 1.0).exp());
    let alpha = rng.uniform();
    blended_similarity(&teacher, &student, alpha).unwrap()
}

fn condition2() -> Verdict {
    let t0 = Instant::now();
    let mut rng = Rng::new(101);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let s = random_invocation(&mut rng);
        let w = weights_from_similarity(&s, 1.0, 1e-6).unwrap();
        worst = worst.max(check_condition2(&w));
    }
    let dt = t0.elapsed();
    Verdict::new(
        worst < 1e-9 && within(dt, 10),
        format!("max row-mean deviation {worst:.3e} in {dt:.2?}"),
    )
}

fn condition1() -> Verdict {
    let t0 = Instant::now();
    let mut rng = Rng::new(102);
    let (mut rows, mut violations, mut max_cov) = (0usize, 0usize, f64::NEG_INFINITY);
    for inv in 0..1000 {
        let mut s = random_invocation(&mut rng);
        // Every tenth invocation gets a constant row to exercise the zero case.
        if inv % 10 == 0 {
            let v = s.get(0, 1);
            s.row_mut(0).iter_mut().for_each(|x| *x = v);
        }
        let w = weights_from_similarity(&s, 1.0, 1e-6).unwrap();
        for i in 0..s.rows() {
            let (wr, fr): (Vec<f64>, Vec<f64>) =
                w.row_negatives(i).map(|(j, v)| (v, s.get(i, j))).unzip();
            let cov = check_condition1(&wr, &fr).unwrap();
            let constant = fr.iter().all(|&f| f == fr[0]);
            let ok = if constant { cov.abs() <= 1e-12 } else { cov < 0.0 };
            if !ok {
                violations += 1;
            }
            if !constant {
                max_cov = max_cov.max(cov);
            }
            rows += 1;
        }
    }
    let dt = t0.elapsed();
    Verdict::new(
        violations == 0 && within(dt, 10),
        format!("{rows} rows, {violations} violations, max covariance {max_cov:.3e}, {dt:.2?}"),
    )
}

type GridRunner = fn(&VerifyConfig, &mut Report, &mut Outcome) -> Result<(), srcl_core::Error>;

fn grid(run: GridRunner, budget_secs: u64) -> (Verdict, Outcome) {
    let cfg = ExperimentConfig::default();
    let mut report = Report::new(&Provenance::new("acceptance", &cfg, cfg.verify.seed));
    let mut out = Outcome::default();
    let t0 = Instant::now();
    let res = run(&cfg.verify, &mut report, &mut out);
    let dt = t0.elapsed();
    let cells = report.lines().len() - 1;
    let verdict = match res {
        Err(e) => Verdict::new(false, format!("error: {e}")),
        Ok(()) => Verdict::new(
            out.passed() && within(dt, budget_secs),
            format!(
                "{cells} cells, {} failures {:?}, {dt:.2?}",
                out.failures.len(),
                out.failures.iter().map(|f| &f.cell).collect::<Vec<_>>()
            ),
        ),
    };
    (verdict, out)
}

fn mi_bound() -> Verdict {
    grid(verify::run_mi_bound, 120).0
}

fn dependent_bound() -> Verdict {
    let (mut v, out) = grid(verify::run_dependent_bound, 120);
    let flagged = out
        .inapplicable
        .iter()
        .any(|c| c.contains("deterministic") && c.contains("0.9"));
    v.passed &= flagged;
    v.detail = format!("{}; inapplicable {:?}", v.detail, out.inapplicable);
    v
}

fn jensen() -> Verdict {
    grid(verify::run_jensen, 120).0
}

fn controllability() -> Verdict {
    grid(verify::run_controllability, 120).0
}

fn gradients() -> Verdict {
    let cfg = VerifyConfig::default();
    let t0 = Instant::now();
    let records = match verify::gradcheck(&cfg, false) {
        Ok(r) => r,
        Err(e) => return Verdict::new(false, format!("error: {e}")),
    };
    let dt = t0.elapsed();
    let per_loss = |kind| records.iter().filter(|r| r.loss == kind).count();
    let worst = records.iter().map(|r| r.max_rel_error).fold(0.0f64, f64::max);
    let n_inf = per_loss(verify::AuditedLoss::Infonce);
    let n_srcl = per_loss(verify::AuditedLoss::Srcl);
    Verdict::new(
        worst < 1e-4 && n_inf == 100 && n_srcl == 100 && within(dt, 30),
        format!("{n_inf}+{n_srcl} instances, max relative error {worst:.3e}, {dt:.2?}"),
    )
}

fn reduction() -> Verdict {
    let mut rng = Rng::new(108);
    let mut worst = 0.0f64;
    for b in 0..1000 {
        let n = 2 + rng.below(31);
        let d = 1 + rng.below(32);
        let a = Matrix::from_fn(n, d, |_, _| rng.normal());
        let bm = Matrix::from_fn(n, d, |_, _| rng.normal());
        let temperature = [0.05, 0.1, 0.5, 1.0][b % 4];
        let direction = [Direction::AToB, Direction::BToA][b % 2];
        let cfg = LossConfig::new(temperature, direction).unwrap();
        let w = srcl_core::WeightMatrix::uniform(n, n);
        let x = info_nce(&a, &bm, &cfg).unwrap();
        let y = srcl(&a, &bm, &w, &cfg).unwrap();
        worst = worst
            .max((x.value - y.value).abs())
            .max(x.grad_a.max_abs_diff(&y.grad_a))
            .max(x.grad_b.max_abs_diff(&y.grad_b));
    }
    Verdict::new(worst < 1e-12, format!("max |difference| {worst:.3e} over 1000 batches"))
}

struct SeedSetup {
    world: WorldSpec,
    cfg: TrainConfig,
    teacher: TeacherHandle,
}

fn seed_setup(base: &ExperimentConfig, seed: u64) -> SeedSetup {
    let world = WorldSpec {
        seed,
        ..base.world.clone()
    };
    let cfg = TrainConfig {
        seed,
        ..base.train.clone()
    };
    let teacher = train_teacher(&world.clean(), &cfg).unwrap();
    SeedSetup {
        world,
        cfg,
        teacher,
    }
}

fn srcl_vs_infonce(base: &ExperimentConfig, setups: &[SeedSetup], elapsed_teachers: Duration) -> Verdict {
    let t0 = Instant::now();
    let (mut wins, mut total) = (0, 0.0);
    let mut cells = Vec::new();
    for s in setups {
        let w = World::new(s.world.clone()).unwrap();
        let reg = &base.regulator;
        let regulated = train_student(&s.world, &s.teacher, &s.cfg, reg).unwrap();
        let plain = TrainConfig {
            loss: LossKind::Infonce,
            ..s.cfg.clone()
        };
        let baseline = train_student(&s.world, &s.teacher, &plain, reg).unwrap();
        let r_s = evaluate(&regulated.student, &w, base.eval.val_size, s.cfg.seed).unwrap().mean_r1();
        let r_i = evaluate(&baseline.student, &w, base.eval.val_size, s.cfg.seed).unwrap().mean_r1();
        if r_s > r_i {
            wins += 1;
        }
        total += r_s - r_i;
        cells.push(format!("{:+.3}", r_s - r_i));
    }
    let dt = t0.elapsed() + elapsed_teachers;
    let mean = total / setups.len() as f64;
    Verdict::new(
        wins >= 8 && mean > 0.0 && within(dt, 600),
        format!("{wins}/{SEEDS} wins, mean gain {mean:+.4} [{}], {dt:.1?}", cells.join(" ")),
    )
}

fn sweep_shape(base: &ExperimentConfig, setups: &[SeedSetup]) -> Verdict {
    let mut interior = 0;
    let mut peaks = Vec::new();
    for s in setups {
        let pts = threshold_mask_sweep(
            &s.world,
            &s.teacher,
            &s.cfg,
            &base.regulator,
            &base.eval.thresholds,
            base.eval.val_size,
        )
        .unwrap();
        let r: Vec<f64> = pts.iter().map(|p| p.report.mean_r1()).collect();
        let best = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let at = r.iter().position(|&v| v == best).unwrap();
        if best > r[0] && best > r[r.len() - 1] {
            interior += 1;
        }
        peaks.push(format!("{:.1}", base.eval.thresholds[at]));
    }
    Verdict::new(
        interior >= 7,
        format!("interior maximum in {interior}/{SEEDS} seeds, peaks at [{}]", peaks.join(" ")),
    )
}

fn discrimination() -> Verdict {
    let base = ExperimentConfig::load(&workspace_root().join("configs/separable.toml"), &[]).unwrap();
    let mut ok = 0;
    let mut gaps = Vec::new();
    for seed in 0..SEEDS {
        let world = WorldSpec {
            seed,
            false_neg_rate: 0.3,
            ..base.world.clone()
        };
        let cfg = TrainConfig {
            seed,
            ..base.train.clone()
        };
        let teacher = train_teacher(&world.clean(), &cfg).unwrap();
        let state = train_student(&world, &teacher, &cfg, &base.regulator).unwrap();
        let w = World::new(world.clone()).unwrap();
        let mut rng = Rng::new(seed).fork(11);
        let h = weight_histogram(&state, &w, base.eval.histogram_batches, base.eval.histogram_bins, &mut rng)
            .unwrap();
        match (h.mean_false_neg, h.mean_true_neg) {
            (Some(f), Some(t)) => {
                if f < t {
                    ok += 1;
                }
                gaps.push(format!("{:.3}", t - f));
            }
            _ => gaps.push("n/a".into()),
        }
    }
    Verdict::new(
        ok == SEEDS,
        format!("false-negative mean below true-negative mean in {ok}/{SEEDS} seeds, gaps [{}]", gaps.join(" ")),
    )
}

fn run_cli(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_srcl"))
        .args(args)
        .env("SRCL_OUTPUT_DIR", dir)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "srcl {args:?} exited with {}: {}",
            out.status,
            String::from_utf8_lossy(&out.stderr)
        ))
    }
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| {
            let name = p.file_name().unwrap().to_string_lossy().into_owned();
            (name, std::fs::read(&p).unwrap())
        })
        .collect();
    files.sort();
    files
}

fn determinism() -> Verdict {
    let scratch = std::env::temp_dir().join(format!("srcl-acceptance-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&scratch);
    let quick = [
        "--set", "train.steps=200",
        "--set", "verify.n_batches=2000",
        "--set", "verify.jensen_samples=2000",
        "--set", "verify.controllability_samples=500",
        "--set", "eval.histogram_batches=10",
        "--set", "eval.thresholds=[0.0, 0.3, 0.6]",
    ];
    let mut runs = Vec::new();
    for run in 0..2 {
        let dir = scratch.join(format!("run{run}"));
        std::fs::create_dir_all(&dir).unwrap();
        let ckpt = dir.join("student.ckpt");
        let ckpt = ckpt.to_str().unwrap();
        let steps: [Vec<&str>; 5] = [
            vec!["verify-bounds"],
            vec!["gradcheck"],
            vec!["train"],
            vec!["eval", "--checkpoint", ckpt],
            vec!["sweep"],
        ];
        for s in steps {
            let args: Vec<&str> = s.iter().copied().chain(quick).collect();
            if let Err(e) = run_cli(&dir, &args) {
                return Verdict::new(false, e);
            }
        }
        runs.push(snapshot(&dir));
    }
    let _ = std::fs::remove_dir_all(&scratch);
    let names: Vec<&str> = runs[0].iter().map(|(n, _)| n.as_str()).collect();
    let differing: Vec<&str> = runs[0]
        .iter()
        .zip(&runs[1])
        .filter(|(a, b)| a != b)
        .map(|(a, _)| a.0.as_str())
        .collect();
    Verdict::new(
        runs[0].len() == runs[1].len() && differing.is_empty() && !names.is_empty(),
        format!("{} files compared {:?}, differing {:?}", names.len(), names, differing),
    )
}

fn report(id: usize, name: &str, v: &Verdict) {
    let tag = if v.passed { "PASS" } else { "FAIL" };
    println!("criterion {id:>2} {tag} {name}: {}", v.detail);
}

fn main() {
    // Honor `cargo test -- --list` and filters that do not name this suite.
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    if let Some(filter) = args.iter().find(|a| !a.starts_with('-')) {
        if !"acceptance".contains(filter.as_str()) {
            return;
        }
    }

    let mut failed = 0;
    let mut record = |id, name, v: Verdict| {
        report(id, name, &v);
        if !v.passed {
            failed += 1;
        }
    };
    record(1, "mean-one weights", condition2());
    record(2, "anti-correlated weights", condition1());
    record(3, "positive-pair bound", mi_bound());
    record(4, "negative-process bound", dependent_bound());
    record(5, "jensen step", jensen());
    record(6, "controllability", controllability());
    record(7, "gradient audit", gradients());
    record(8, "unit-weight reduction", reduction());

    let base = ExperimentConfig::default();
    let t0 = Instant::now();
    let setups: Vec<SeedSetup> = (0..SEEDS).map(|s| seed_setup(&base, s)).collect();
    let teachers = t0.elapsed();
    record(9, "regulated beats plain contrastive", srcl_vs_infonce(&base, &setups, teachers));
    record(10, "threshold sweep shape", sweep_shape(&base, &setups));
    record(11, "false-negative discrimination", discrimination());
    record(12, "determinism", determinism());

    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all 12 acceptance criteria passed");
}
