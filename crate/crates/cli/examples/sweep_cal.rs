//! Threshold-mask sweep over ten seeds on the default world.
//!
//! `cargo run --release --example sweep_cal -- [steps]`

use srcl_core::eval::threshold_mask_sweep;
use srcl_core::trainer::{train_teacher, TrainConfig};
use srcl_core::{RegulatorConfig, WorldSpec};

fn main() {
    let steps = std::env::args()
        .nth(1)
        .map_or(TrainConfig::default().steps, |s| s.parse().expect("step count"));
    let thresholds: Vec<f64> = (0..8).map(|i| i as f64 / 10.0).collect();
    let mut interior = 0;
    for seed in 0..10u64 {
        let world = WorldSpec {
            seed,
            ..WorldSpec::default()
        };
        let cfg = TrainConfig {
            seed,
            steps,
            ..TrainConfig::default()
        };
        let teacher = train_teacher(&world.clean(), &cfg).unwrap();
        let pts = threshold_mask_sweep(&world, &teacher, &cfg, &RegulatorConfig::default(), &thresholds, 256)
            .unwrap();
        let r: Vec<f64> = pts.iter().map(|p| p.report.mean_r1()).collect();
        let best = r.iter().copied().fold(f64::MIN, f64::max);
        let ok = best > r[0] && best > r[r.len() - 1];
        if ok {
            interior += 1;
        }
        let curve: Vec<String> = r.iter().map(|v| format!("{v:.3}")).collect();
        let skipped: Vec<usize> = pts.iter().map(|p| p.skipped_rows).collect();
        println!("seed {seed}: {} skipped {skipped:?} interior {ok}", curve.join(" "));
    }
    println!("interior maximum in {interior}/10 seeds");
}
