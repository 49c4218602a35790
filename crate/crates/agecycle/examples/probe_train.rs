//! Desk-scale training probe: trains for a configurable number of epochs and
//! prints the end-to-end verification metrics.

use agecycle::data::split_by_subject;
use agecycle::data::Dataset;
use agecycle::eval::{evaluate_model, EvalOptions, OracleBackend};
use agecycle::eval::oracle::OracleTrainOptions;
use agecycle::synthetic::{build_dataset, wrinkle_energy, SyntheticConfig};
use agecycle::trainer::{fit, load_checkpoint, TrainConfig, TrainState};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(6);
    let mode = args.get(2).map(|s| s.as_str()).unwrap_or("full");

    let mut cfg = TrainConfig::desk();
    cfg.epochs = epochs;
    match mode {
        "full" => {}
        "noatt" => cfg.use_attention = false,
        "unordered" => cfg.ordered_input = false,
        "noactv" => cfg.lambda_actv_override = Some(0.0),
        other => panic!("unknown mode {other}"),
    }
    if let Some(g) = args.get(3) {
        cfg.attention_gain = g.parse().unwrap();
    }
    if let Some(f) = args.get(4) {
        cfg.fake_age_updates_d = f.parse().unwrap();
    }

    let synth = SyntheticConfig::default();
    let all = build_dataset(&synth).unwrap();
    let (train_recs, test_recs) = split_by_subject(&all.records, cfg.train_fraction, cfg.seed).unwrap();
    let index: std::collections::HashMap<&std::path::Path, usize> = all
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| (r.image_path.as_path(), i))
        .collect();
    let pick = |recs: &[agecycle::data::FaceRecord]| -> Dataset {
        let images = recs
            .iter()
            .map(|r| all.images[index[r.image_path.as_path()]].clone())
            .collect();
        Dataset::new(recs.to_vec(), images, all.n_groups).unwrap()
    };
    let train = pick(&train_recs);
    let test = pick(&test_recs);
    println!("train {} test {}", train.len(), test.len());

    let out = tempfile::tempdir().unwrap();
    let t0 = std::time::Instant::now();
    let outcome = fit(&cfg, &train, out.path(), None).unwrap();
    println!(
        "trained {} steps in {:.1} min; final report: {:?}",
        outcome.steps,
        t0.elapsed().as_secs_f64() / 60.0,
        outcome.final_report
    );
    println!("weights: {:?}", outcome.weights);

    let state: TrainState<f32> = load_checkpoint(&outcome.checkpoint_path).unwrap();

    // Oracle on the train split, evaluation on a test subsample.
    let scheme = synth.scheme();
    let backend = OracleBackend::train(&train, &scheme, &OracleTrainOptions::default()).unwrap();
    let sub = Dataset::new(
        test.records.iter().take(120).cloned().collect(),
        test.images.iter().take(120).cloned().collect(),
        test.n_groups,
    )
    .unwrap();
    let report = evaluate_model(
        &state.g_p,
        &state.g_r,
        &sub,
        &scheme,
        &backend,
        &EvalOptions::default(),
    )
    .unwrap();
    println!("{}", report.table());

    // Wrinkle-energy monotonicity along progression sequences.
    let n = test.n_groups;
    let mut ok = 0usize;
    let mut total = 0usize;
    for (img, rec) in sub.images.iter().zip(sub.records.iter()) {
        if rec.group >= n - 1 {
            continue;
        }
        let mut energies = vec![wrinkle_energy(img)];
        for t in rec.group + 1..n {
            let batch = agecycle::data::stack_images(&[img]);
            let conds = agecycle::data::condition_rows(&[t], n).unwrap();
            let out = state.g_p.infer(&batch, &conds).unwrap();
            let translated = out.fused.index_axis(ndarray::Axis(0), 0).to_owned();
            energies.push(wrinkle_energy(&translated));
        }
        total += 1;
        if energies.windows(2).all(|w| w[1] > w[0]) {
            ok += 1;
        }
    }
    println!(
        "wrinkle monotonicity: {ok}/{total} = {:.3}",
        ok as f64 / total as f64
    );
}
