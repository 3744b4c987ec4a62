//! SRCL vs InfoNCE over ten paired seeds on the default world.
//!
//! `cargo run --release --example calibrate -- [emb_noise] [instance_scale] [steps]`

use srcl_core::eval::evaluate;
use srcl_core::trainer::{train_student, train_teacher, LossKind, TrainConfig};
use srcl_core::{RegulatorConfig, World, WorldSpec};

fn main() {
    let args: Vec<f64> = std::env::args()
        .skip(1)
        .map(|a| a.parse().expect("numeric argument"))
        .collect();
    let defaults = WorldSpec::default();
    let noise = args.first().copied().unwrap_or(defaults.emb_noise);
    let iscale = args.get(1).copied().unwrap_or(defaults.instance_scale);
    let steps = args.get(2).map_or(TrainConfig::default().steps, |&s| s as usize);
    let reg = RegulatorConfig::default();
    let (mut wins, mut diff) = (0, 0.0);
    for seed in 0..10u64 {
        let world = WorldSpec {
            seed,
            emb_noise: noise,
            instance_scale: iscale,
            ..WorldSpec::default()
        };
        let cfg = TrainConfig {
            seed,
            steps,
            ..TrainConfig::default()
        };
        let teacher = train_teacher(&world.clean(), &cfg).unwrap();
        let w = World::new(world.clone()).unwrap();
        let r_t = evaluate(teacher.encoders(), &w, 256, seed).unwrap().mean_r1();
        let s = train_student(&world, &teacher, &cfg, &reg).unwrap();
        let plain = TrainConfig {
            loss: LossKind::Infonce,
            ..cfg.clone()
        };
        let i = train_student(&world, &teacher, &plain, &reg).unwrap();
        let r_s = evaluate(&s.student, &w, 256, seed).unwrap().mean_r1();
        let r_i = evaluate(&i.student, &w, 256, seed).unwrap().mean_r1();
        if r_s > r_i {
            wins += 1;
        }
        diff += r_s - r_i;
        println!("seed {seed}: teacher {r_t:.4} srcl {r_s:.4} infonce {r_i:.4}");
    }
    println!("srcl wins {wins}/10, mean gain {:+.4}", diff / 10.0);
}
