//! Times desk-scale training steps to size the default architecture.

use std::time::Instant;

use agecycle::synthetic::{build_dataset, SyntheticConfig};
use agecycle::trainer::{step_rng, train_step, TrainConfig, TrainState};

fn main() {
    let mut cfg = TrainConfig::desk();
    let args: Vec<String> = std::env::args().collect();
    if let Some(w) = args.get(1) {
        cfg.gen_base_width = w.parse().unwrap();
    }
    if let Some(w) = args.get(2) {
        let base: usize = w.parse().unwrap();
        cfg.disc_widths = [base, base * 2, base * 4, base * 8, base * 16, base * 16];
    }
    cfg.seed = 5;
    let data = build_dataset(&SyntheticConfig {
        n_subjects: 24,
        n_groups: 4,
        resolution: 64,
        seed: 1,
    })
    .unwrap();

    let mut state: TrainState<f32> = TrainState::init(&cfg).unwrap();
    // Warm up + calibration.
    let mut rng = step_rng(cfg.seed, 0);
    let batch = data.sample_pair_batch(cfg.batch_size, true, &mut rng).unwrap();
    train_step(&mut state, &batch).unwrap();

    let steps = 10;
    let start = Instant::now();
    for s in 1..=steps {
        let mut rng = step_rng(cfg.seed, s);
        let batch = data
            .sample_pair_batch(cfg.batch_size, true, &mut rng)
            .unwrap();
        train_step(&mut state, &batch).unwrap();
    }
    let elapsed = start.elapsed().as_secs_f64();
    let per_step = elapsed / steps as f64;
    println!(
        "gen_base={} disc={:?}: {per_step:.3} s/step -> 2010 steps ≈ {:.1} min",
        cfg.gen_base_width,
        cfg.disc_widths,
        per_step * 2010.0 / 60.0
    );
}
