//! Progression-cycle loss values must match an independent straight-line
//! recomputation of the fusion, adversarial, reconstruction, activation and
//! age terms, written here with plain loops in double precision.

use agecycle::data::OrderedPairBatch;
use agecycle::synthetic::{build_dataset, SyntheticConfig};
use agecycle::trainer::{progression_cycle, step_rng, PreparedBatch, TrainConfig, TrainState};
use ndarray::{Array2, Array4};

fn tiny_state() -> TrainState<f64> {
    let cfg = TrainConfig {
        batch_size: 2,
        resolution: 64,
        n_groups: 4,
        seed: 21,
        gen_base_width: 2,
        gen_res_blocks: 1,
        disc_widths: [2, 2, 2, 2, 2, 2],
        ..TrainConfig::default()
    };
    TrainState::init(&cfg).unwrap()
}

fn fixed_batch() -> OrderedPairBatch {
    let data = build_dataset(&SyntheticConfig {
        n_subjects: 3,
        n_groups: 4,
        resolution: 64,
        seed: 5,
    })
    .unwrap();
    let mut rng = step_rng(77, 0);
    data.sample_pair_batch(2, true, &mut rng).unwrap()
}

fn mean_sq_vs(map: &Array4<f64>, target: f64) -> f64 {
    let mut s = 0.0;
    for &v in map.iter() {
        s += (v - target) * (v - target);
    }
    s / map.len() as f64
}

fn l1_mean(a: &Array4<f64>, b: &Array4<f64>) -> f64 {
    let mut s = 0.0;
    for (&x, &y) in a.iter().zip(b.iter()) {
        s += (x - y).abs();
    }
    s / a.len() as f64
}

fn rms_per_mask_mean(masks: &Array4<f64>) -> f64 {
    let (b, c, h, w) = masks.dim();
    let mut total = 0.0;
    for bi in 0..b {
        let mut ss = 0.0;
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let v = masks[(bi, ci, i, j)];
                    ss += v * v;
                }
            }
        }
        total += (ss / (c * h * w) as f64).sqrt();
    }
    total / b as f64
}

fn sq_l2_rows_mean(pred: &Array2<f64>, target: &Array2<f64>) -> f64 {
    let (b, n) = pred.dim();
    let mut total = 0.0;
    for bi in 0..b {
        for ni in 0..n {
            let d = pred[(bi, ni)] - target[(bi, ni)];
            total += d * d;
        }
    }
    total / b as f64
}

#[test]
fn progression_cycle_matches_straight_line_recomputation() {
    let state = tiny_state();
    let batch = fixed_batch();
    let prepared = PreparedBatch::from_batch(&batch);

    let (fwd, losses) = progression_cycle(&state, &prepared).unwrap();

    // Straight-line recomputation. The generator and discriminator forward
    // primitives are shared; every loss reduction below is re-derived with
    // plain loops.
    let young = &prepared.young;
    let old = &prepared.old;
    let young_conds = &prepared.young_conds;
    let old_conds = &prepared.old_conds;

    // Fused output per the mask blend, recomputed pixel by pixel.
    let primary = state.g_p.forward(young, old_conds).unwrap();
    let (b, c, h, w) = young.dim();
    let mut fused = Array4::<f64>::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let a = primary.out.attention[(bi, 0, i, j)];
                    fused[(bi, ci, i, j)] = a * young[(bi, ci, i, j)]
                        + (1.0 - a) * primary.out.rgb[(bi, ci, i, j)];
                }
            }
        }
    }
    let max_fuse_err = fused
        .iter()
        .zip(primary.out.fused.iter())
        .map(|(&a, &b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    assert!(max_fuse_err < 1e-12, "fusion mismatch {max_fuse_err}");

    let recon_pass = state.g_r.forward(&fused, young_conds).unwrap();
    let d_fake = state.d_p.infer(&fused).unwrap();
    let d_real = state.d_p.infer(old).unwrap();
    let d_young = state.d_p.infer(young).unwrap();

    let gan_d = mean_sq_vs(&d_real.patch, 1.0) + mean_sq_vs(&d_fake.patch, 0.0);
    let gan_g = mean_sq_vs(&d_fake.patch, 1.0);
    let recon = l1_mean(&recon_pass.out.fused, young);
    let actv = 0.5
        * (rms_per_mask_mean(&primary.out.attention)
            + rms_per_mask_mean(&recon_pass.out.attention));
    let reg_fake = sq_l2_rows_mean(&d_fake.age, old_conds);
    let reg_real = sq_l2_rows_mean(&d_young.age, young_conds);

    let tol = 1e-6;
    assert!((losses.gan_d - gan_d).abs() < tol, "gan_d {} vs {gan_d}", losses.gan_d);
    assert!((losses.gan_g - gan_g).abs() < tol, "gan_g {} vs {gan_g}", losses.gan_g);
    assert!((losses.recon - recon).abs() < tol, "recon {} vs {recon}", losses.recon);
    assert!((losses.actv - actv).abs() < tol, "actv {} vs {actv}", losses.actv);
    assert!(
        (losses.reg_fake - reg_fake).abs() < tol,
        "reg_fake {} vs {reg_fake}",
        losses.reg_fake
    );
    assert!(
        (losses.reg_real - reg_real).abs() < tol,
        "reg_real {} vs {reg_real}",
        losses.reg_real
    );

    // The cycle's cached discriminator outputs agree with fresh passes.
    let max_patch_err = fwd
        .d_fake
        .out
        .patch
        .iter()
        .zip(d_fake.patch.iter())
        .map(|(&a, &b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    assert!(max_patch_err < 1e-12);
}
