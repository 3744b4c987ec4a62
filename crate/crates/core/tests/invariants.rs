use proptest::prelude::*;
use srcl_core::losses::{info_nce, srcl, srcl_symmetric};
use srcl_core::regulator::{alpha_at, check_condition1, weights_from_similarity};
use srcl_core::{AlphaSchedule, Direction, LossConfig, Matrix, Rng, WeightMatrix, World, WorldSpec};

fn random_pair(seed: u64, n: usize, d: usize) -> (Matrix, Matrix) {
    let mut rng = Rng::new(seed);
    let a = Matrix::from_fn(n, d, |_, _| rng.normal());
    let b = Matrix::from_fn(n, d, |_, _| rng.normal());
    (a, b)
}

fn exp_cos_grid(seed: u64, n: usize) -> Matrix {
    let mut rng = Rng::new(seed);
    Matrix::from_fn(n, n, |_, _| rng.uniform_range(-1.0, 1.0).exp())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn weights_are_positive_and_mean_one(seed in any::<u64>(), n in 2usize..64) {
        let w = weights_from_similarity(&exp_cos_grid(seed, n), 1.0, 1e-6).unwrap();
        prop_assert!(w.max_row_mean_deviation() < 1e-12);
        for i in 0..n {
            prop_assert!(w.row_negatives(i).all(|(_, v)| v > 0.0 && v.is_finite()));
        }
    }

    #[test]
    fn weights_never_correlate_with_similarity(seed in any::<u64>(), n in 3usize..48) {
        let s = exp_cos_grid(seed, n);
        let w = weights_from_similarity(&s, 1.0, 1e-6).unwrap();
        for i in 0..n {
            let (wr, fr): (Vec<f64>, Vec<f64>) =
                w.row_negatives(i).map(|(j, v)| (v, s.get(i, j))).unzip();
            prop_assert!(check_condition1(&wr, &fr).unwrap() < 0.0);
        }
    }

    #[test]
    fn unit_weights_reduce_to_info_nce(seed in any::<u64>(), n in 2usize..24, d in 1usize..16, tau in 0.05f64..1.0) {
        let (a, b) = random_pair(seed, n, d);
        let cfg = LossConfig::new(tau, Direction::SymmetricSum).unwrap();
        let u = WeightMatrix::uniform(n, n);
        let x = info_nce(&a, &b, &cfg).unwrap();
        let y = srcl_symmetric(&a, &b, &u, &u, &cfg).unwrap();
        prop_assert!((x.value - y.value).abs() < 1e-12);
        prop_assert!(x.grad_a.max_abs_diff(&y.grad_a) < 1e-12);
    }

    #[test]
    fn per_anchor_loss_is_nonnegative(seed in any::<u64>(), n in 2usize..24, d in 1usize..16, tau in 0.05f64..1.0) {
        let (a, b) = random_pair(seed, n, d);
        let w = weights_from_similarity(&exp_cos_grid(seed ^ 0x5eed, n), 1.0, 1e-6).unwrap();
        let cfg = LossConfig::new(tau, Direction::AToB).unwrap();
        let out = srcl(&a, &b, &w, &cfg).unwrap();
        prop_assert!(out.per_anchor.iter().all(|&l| l >= 0.0));
        let mean = out.per_anchor.iter().sum::<f64>() / n as f64;
        prop_assert!((out.value - mean).abs() < 1e-12);
    }

    #[test]
    fn loss_ignores_row_scale(seed in any::<u64>(), n in 2usize..16, row in 0usize..16, scale in 0.01f64..100.0) {
        let (a, b) = random_pair(seed, n, 6);
        let mut scaled = a.clone();
        let r = row % n;
        scaled.row_mut(r).iter_mut().for_each(|v| *v *= scale);
        let cfg = LossConfig::new(0.1, Direction::SymmetricSum).unwrap();
        let x = info_nce(&a, &b, &cfg).unwrap().value;
        let y = info_nce(&scaled, &b, &cfg).unwrap().value;
        prop_assert!((x - y).abs() < 1e-10 * x.abs().max(1.0));
    }

    #[test]
    fn linear_alpha_stays_in_range_and_decreases(total in 1usize..5000) {
        let mut prev = f64::INFINITY;
        for step in (0..=total).step_by((total / 50).max(1)) {
            let a = alpha_at(&AlphaSchedule::Linear, step, total).unwrap();
            prop_assert!((0.0..=1.0).contains(&a));
            prop_assert!(a <= prev);
            prev = a;
        }
        prop_assert_eq!(alpha_at(&AlphaSchedule::Linear, 0, total).unwrap(), 1.0);
        prop_assert_eq!(alpha_at(&AlphaSchedule::Linear, total, total).unwrap(), 0.0);
    }

    #[test]
    fn batch_masks_follow_concept_overlap(seed in any::<u64>(), rho in 0.0f64..0.9, kappa in 0.0f64..1.0) {
        let world = World::new(WorldSpec {
            n_concepts: 16,
            false_neg_rate: rho,
            partial_overlap: kappa,
            seed: 3,
            ..WorldSpec::default()
        })
        .unwrap();
        let batch = world.sample_batch(12, &mut Rng::new(seed)).unwrap();
        for i in 0..batch.len() {
            prop_assert!(!batch.false_negative(i, i));
            for j in 0..batch.len() {
                prop_assert_eq!(batch.false_negative(i, j), batch.false_negative(j, i));
                if i != j {
                    let overlap = batch.concepts[i].overlaps(&batch.concepts[j]);
                    prop_assert_eq!(batch.false_negative(i, j), overlap);
                }
            }
        }
    }
}
