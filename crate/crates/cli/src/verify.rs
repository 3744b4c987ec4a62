//! The bound-verification grid and the loss gradient audit.

use serde::Serialize;
use srcl_core::losses::{info_nce, srcl, srcl_symmetric};
use srcl_core::miverify::{
    verify_controllability, verify_mi_bound, verify_dependent_bound, verify_jensen_step, NegativeSampling,
    WeightsRule,
};
use srcl_core::numerics::{grad_check, Matrix, Rng};
use srcl_core::regulator::weights_from_similarity;
use srcl_core::synth::{make_bsc_joint, make_deterministic_joint, DiscreteJoint};
use srcl_core::{Direction, Error, LossConfig};

use crate::config::VerifyConfig;
use crate::report::Report;

/// A four-symbol joint with full support and a dominant diagonal.
pub fn four_symbol_joint() -> DiscreteJoint {
    DiscreteJoint::new(&[
        vec![0.16, 0.04, 0.03, 0.02],
        vec![0.02, 0.20, 0.02, 0.01],
        vec![0.03, 0.02, 0.18, 0.02],
        vec![0.04, 0.01, 0.02, 0.18],
    ])
    .expect("valid joint")
}

pub fn independent_joint() -> DiscreteJoint {
    DiscreteJoint::new(&[vec![0.12, 0.28], vec![0.18, 0.42]]).expect("valid joint")
}

/// A failed assertion, named by the cell it came from.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Failure {
    pub cell: String,
    pub reason: String,
}

#[derive(Debug, Default)]
pub struct Outcome {
    pub failures: Vec<Failure>,
    pub inapplicable: Vec<String>,
}

impl Outcome {
    fn fail(&mut self, cell: String, reason: String) {
        self.failures.push(Failure { cell, reason });
    }

    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

#[derive(Serialize)]
struct Cell<'a, T: Serialize> {
    cell: &'a str,
    joint: &'a str,
    #[serde(flatten)]
    report: &'a T,
}

fn bsc_name(p: f64) -> String {
    format!("bsc({p})")
}

/// Every cell gets its own RNG stream so cells can be rerun in isolation.
struct Streams {
    root: Rng,
    next: u64,
}

impl Streams {
    fn next(&mut self) -> Rng {
        self.next += 1;
        self.root.fork(self.next)
    }
}

pub fn run_mi_bound(cfg: &VerifyConfig, report: &mut Report, out: &mut Outcome) -> Result<(), Error> {
    let mut streams = Streams {
        root: Rng::new(cfg.seed),
        next: 0,
    };
    for &p in &cfg.bsc {
        let joint = make_bsc_joint(p)?;
        let name = bsc_name(p);
        let mut slacks: Vec<(usize, f64, f64)> = Vec::new();
        for &n in &cfg.mi_bound_batch_sizes {
            let rep = verify_mi_bound(&joint, n, cfg.n_batches, NegativeSampling::Iid, &mut streams.next())?;
            let cell = format!("mi_bound {name} N={n}");
            if !rep.holds {
                out.fail(cell.clone(), format!("log N - L = {} exceeds I + 3se = {}", rep.lhs, rep.rhs));
            }
            slacks.push((n, rep.slack, rep.loss_estimate.stderr));
            report.push("mi_bound", &Cell { cell: &cell, joint: &name, report: &rep });
        }
        for w in slacks.windows(2) {
            let ((n0, s0, e0), (n1, s1, e1)) = (w[0], w[1]);
            if s1 > s0 + 3.0 * (e0 + e1) {
                out.fail(
                    format!("mi_bound {name} slack N={n0}->{n1}"),
                    format!("slack grew from {s0} to {s1}"),
                );
            }
        }
    }
    let det = make_deterministic_joint(4)?;
    let rep = verify_mi_bound(&det, 4, cfg.n_batches.min(10_000), NegativeSampling::Distinct, &mut streams.next())?;
    let cell = "mi_bound deterministic(4) N=4 distinct";
    if rep.slack.abs() > 1e-9 {
        out.fail(cell.into(), format!("closed-form cell not tight: slack {}", rep.slack));
    }
    report.push("mi_bound", &Cell { cell, joint: "deterministic(4)", report: &rep });
    Ok(())
}

pub fn run_dependent_bound(cfg: &VerifyConfig, report: &mut Report, out: &mut Outcome) -> Result<(), Error> {
    let mut streams = Streams {
        root: Rng::new(cfg.seed).fork(1 << 20),
        next: 0,
    };
    let joint = make_bsc_joint(cfg.dependent_bsc)?;
    let name = bsc_name(cfg.dependent_bsc);
    let mut cells: Vec<(DiscreteJoint, String, f64, usize)> = Vec::new();
    for &eta in &cfg.dependent_rates {
        for &n in &cfg.dependent_batch_sizes {
            cells.push((joint.clone(), name.clone(), eta, n));
        }
    }
    if cfg.dependent_inapplicable_cell {
        cells.push((make_deterministic_joint(4)?, "deterministic(4)".into(), 0.9, 8));
    }
    for (joint, name, eta, n) in cells {
        let rep = verify_dependent_bound(&joint, n, eta, cfg.n_batches, &mut streams.next())?;
        let cell = format!("dependent_bound {name} eta={eta} N={n}");
        if !rep.applicable {
            out.inapplicable.push(cell.clone());
        } else if !rep.holds {
            out.fail(
                cell.clone(),
                format!("log N - L = {} exceeds MI-P - MI-N + 3se = {}", rep.lhs, rep.rhs),
            );
        }
        report.push("dependent_bound", &Cell { cell: &cell, joint: &name, report: &rep });
    }
    Ok(())
}

fn jensen_joints(cfg: &VerifyConfig) -> Result<Vec<(String, DiscreteJoint)>, Error> {
    let mut joints: Vec<(String, DiscreteJoint)> = Vec::new();
    for &p in &cfg.bsc {
        joints.push((bsc_name(p), make_bsc_joint(p)?));
    }
    joints.push(("deterministic(4)".into(), make_deterministic_joint(4)?));
    joints.push(("four_symbol".into(), four_symbol_joint()));
    joints.push(("independent".into(), independent_joint()));
    Ok(joints)
}

pub fn run_jensen(cfg: &VerifyConfig, report: &mut Report, out: &mut Outcome) -> Result<(), Error> {
    let mut streams = Streams {
        root: Rng::new(cfg.seed).fork(2 << 20),
        next: 0,
    };
    for (name, joint) in jensen_joints(cfg)? {
        for &eta in &cfg.jensen_dep_rates {
            let rep = verify_jensen_step(&joint, eta, cfg.jensen_samples, &mut streams.next())?;
            let cell = format!("jensen {name} eta={eta}");
            if !rep.holds {
                out.fail(
                    cell.clone(),
                    format!(
                        "lhs {} rhs {} (constant ratio: {})",
                        rep.lhs, rep.rhs, rep.constant_ratio
                    ),
                );
            }
            report.push("jensen", &Cell { cell: &cell, joint: &name, report: &rep });
        }
    }
    Ok(())
}

pub fn run_controllability(
    cfg: &VerifyConfig,
    report: &mut Report,
    out: &mut Outcome,
) -> Result<(), Error> {
    let mut streams = Streams {
        root: Rng::new(cfg.seed).fork(3 << 20),
        next: 0,
    };
    let joints = [
        (bsc_name(cfg.dependent_bsc), make_bsc_joint(cfg.dependent_bsc)?),
        ("four_symbol".to_string(), four_symbol_joint()),
    ];
    for (name, joint) in &joints {
        for &k in &cfg.controllability_negatives {
            for &eta in &cfg.controllability_dep_rates {
                let cell = format!("controllability {name} eta={eta} negatives={k}");
                let rep = match verify_controllability(
                    joint,
                    eta,
                    WeightsRule::InverseRatio,
                    k,
                    cfg.controllability_samples,
                    &mut streams.next(),
                ) {
                    Ok(r) => r,
                    Err(e) => {
                        out.fail(cell, e.to_string());
                        continue;
                    }
                };
                if !rep.premise_holds || rep.weighted_ratio > rep.unweighted_ratio + 1e-12 {
                    out.fail(cell.clone(), "weighted premise E[w r] <= E[r] violated".into());
                }
                // The optimum holds by construction when every negative is
                // drawn from p(y|x): then E_q[1/r] = 1 on full support.
                let enforced = eta == 1.0;
                if enforced && rep.population_residual.abs() >= cfg.residual_tolerance {
                    out.fail(
                        cell.clone(),
                        format!("residual {} at the enforced optimum", rep.population_residual),
                    );
                }
                #[derive(Serialize)]
                struct WithFlag<'a, T: Serialize> {
                    optimum_enforced: bool,
                    #[serde(flatten)]
                    inner: &'a T,
                }
                report.push(
                    "controllability",
                    &Cell {
                        cell: &cell,
                        joint: name,
                        report: &WithFlag {
                            optimum_enforced: enforced,
                            inner: &rep,
                        },
                    },
                );
            }
        }
    }
    // Guard: sign-flipped weights must be turned away by Condition 1.
    let cell = "controllability guard sign_flipped";
    let guard = verify_controllability(
        &joints[0].1,
        0.3,
        WeightsRule::SignFlipped,
        3,
        0,
        &mut streams.next(),
    );
    let rejected = matches!(guard, Err(Error::Condition(_)));
    if !rejected {
        out.fail(cell.into(), "sign-flipped weights were accepted".into());
    }
    report.push(
        "controllability_guard",
        &serde_json::json!({ "cell": cell, "rejected": rejected }),
    );
    Ok(())
}

/// Run the whole grid.
pub fn run_all(cfg: &VerifyConfig, report: &mut Report) -> Result<Outcome, Error> {
    let mut out = Outcome::default();
    run_mi_bound(cfg, report, &mut out)?;
    run_dependent_bound(cfg, report, &mut out)?;
    run_jensen(cfg, report, &mut out)?;
    run_controllability(cfg, report, &mut out)?;
    report.push(
        "summary",
        &serde_json::json!({
            "passed": out.passed(),
            "failures": out.failures,
            "inapplicable": out.inapplicable,
        }),
    );
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditedLoss {
    Infonce,
    Srcl,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckRecord {
    pub loss: AuditedLoss,
    pub instance: usize,
    pub n: usize,
    pub d: usize,
    pub temperature: f64,
    pub direction: Direction,
    pub max_rel_error: f64,
    pub passed: bool,
}

const DIRECTIONS: [Direction; 3] = [Direction::AToB, Direction::BToA, Direction::SymmetricSum];
const SIZES: [usize; 3] = [4, 8, 16];
const DIMS: [usize; 2] = [8, 32];
const FD_STEP: f64 = 1e-5;

/// Compare analytic loss gradients with central differences on random
/// batches. `corrupt` perturbs the analytic gradient, to prove the audit can
/// fail.
pub fn gradcheck(cfg: &VerifyConfig, corrupt: bool) -> Result<Vec<GradcheckRecord>, Error> {
    let mut rng = Rng::new(cfg.seed).fork(4 << 20);
    let mut records = Vec::new();
    for loss in [AuditedLoss::Infonce, AuditedLoss::Srcl] {
        for instance in 0..cfg.gradcheck_instances {
            let n = SIZES[rng.below(SIZES.len())];
            let d = DIMS[rng.below(DIMS.len())];
            let temperature = cfg.gradcheck_temperatures[instance % cfg.gradcheck_temperatures.len()];
            let direction = DIRECTIONS[instance % DIRECTIONS.len()];
            let a = Matrix::from_fn(n, d, |_, _| rng.normal());
            let b = Matrix::from_fn(n, d, |_, _| rng.normal());
            let sim = Matrix::from_fn(n, n, |_, _| rng.uniform_range(-1.0, 1.0).exp());
            let w_ab = weights_from_similarity(&sim, 1.0, 1e-6)?;
            let w_ba = weights_from_similarity(&sim.transpose(), 1.0, 1e-6)?;
            let lc = LossConfig::new(temperature, direction)?;
            let eval = |a: &Matrix, b: &Matrix| match (loss, direction) {
                (AuditedLoss::Infonce, _) => info_nce(a, b, &lc),
                (AuditedLoss::Srcl, Direction::SymmetricSum) => srcl_symmetric(a, b, &w_ab, &w_ba, &lc),
                (AuditedLoss::Srcl, Direction::AToB) => srcl(a, b, &w_ab, &lc),
                (AuditedLoss::Srcl, Direction::BToA) => srcl(a, b, &w_ba, &lc),
            };
            let out = eval(&a, &b)?;
            let mut analytic: Vec<f64> = out.grad_a.as_slice().to_vec();
            analytic.extend_from_slice(out.grad_b.as_slice());
            if corrupt {
                analytic[0] += 1.0;
            }
            let mut point: Vec<f64> = a.as_slice().to_vec();
            point.extend_from_slice(b.as_slice());
            let split = n * d;
            let f = |p: &[f64]| {
                let pa = Matrix::from_vec(n, d, p[..split].to_vec()).expect("finite");
                let pb = Matrix::from_vec(n, d, p[split..].to_vec()).expect("finite");
                eval(&pa, &pb).map(|o| o.value).unwrap_or(f64::NAN)
            };
            let err = grad_check(f, &analytic, &point, FD_STEP)?;
            records.push(GradcheckRecord {
                loss,
                instance,
                n,
                d,
                temperature,
                direction,
                max_rel_error: err,
                passed: err < cfg.gradcheck_tolerance,
            });
        }
    }
    Ok(records)
}
