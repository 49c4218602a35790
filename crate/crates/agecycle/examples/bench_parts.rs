//! Per-component timing of one desk-scale training step.

use std::time::Instant;

use agecycle::synthetic::{build_dataset, SyntheticConfig};
use agecycle::trainer::{progression_cycle, step_rng, PreparedBatch, TrainConfig, TrainState};

fn main() {
    let cfg = TrainConfig::desk();
    let data = build_dataset(&SyntheticConfig {
        n_subjects: 24,
        n_groups: 4,
        resolution: 64,
        seed: 1,
    })
    .unwrap();
    let state: TrainState<f32> = TrainState::init(&cfg).unwrap();
    let mut rng = step_rng(5, 0);
    let batch = data.sample_pair_batch(24, true, &mut rng).unwrap();
    let prepared = PreparedBatch::from_batch(&batch);

    let reps = 10;

    let t = Instant::now();
    for _ in 0..reps {
        let _ = state.g_p.infer(&prepared.young, &prepared.old_conds).unwrap();
    }
    println!("gen infer:      {:.4} s", t.elapsed().as_secs_f64() / reps as f64);

    let t = Instant::now();
    for _ in 0..reps {
        let _ = state.g_p.forward(&prepared.young, &prepared.old_conds).unwrap();
    }
    println!("gen fwd+cache:  {:.4} s", t.elapsed().as_secs_f64() / reps as f64);

    let fwd = state.g_p.forward(&prepared.young, &prepared.old_conds).unwrap();
    let d_fused = prepared.young.clone();
    let t = Instant::now();
    for _ in 0..reps {
        let mut grads = state.g_p.zero_grads();
        let _ = state.g_p.backward(&fwd, &d_fused, None, &mut grads, true);
    }
    println!("gen backward:   {:.4} s", t.elapsed().as_secs_f64() / reps as f64);

    let t = Instant::now();
    for _ in 0..reps {
        let _ = state.d_p.forward(&prepared.young).unwrap();
    }
    println!("disc forward:   {:.4} s", t.elapsed().as_secs_f64() / reps as f64);

    let dfwd = state.d_p.forward(&prepared.young).unwrap();
    let dpatch = dfwd.out.patch.clone();
    let t = Instant::now();
    for _ in 0..reps {
        let mut grads = state.d_p.zero_grads();
        let _ = state.d_p.backward(&dfwd, Some(&dpatch), None, &mut grads, false);
    }
    println!("disc backward:  {:.4} s", t.elapsed().as_secs_f64() / reps as f64);

    let t = Instant::now();
    for _ in 0..reps {
        let _ = progression_cycle(&state, &prepared).unwrap();
    }
    println!("full cycle fwd: {:.4} s", t.elapsed().as_secs_f64() / reps as f64);
}
