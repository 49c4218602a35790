use std::path::{Path, PathBuf};

use agecycle::data::{
    self, load_image, read_manifest, scan_age_encoded_dir, split_by_subject, Dataset, FaceRecord,
    GroupScheme, Image,
};
use agecycle::eval::{
    evaluate_model, remote_estimator_client, EstimatorBackend, EvalOptions, OracleBackend,
    RemoteOptions,
};
use agecycle::eval::oracle::OracleTrainOptions;
use agecycle::generator::Generator;
use agecycle::synthetic::{materialize, SyntheticConfig};
use agecycle::trainer::{fit, load_checkpoint, TrainConfig, TrainState};
use anyhow::{bail, Context, Result};
use sha2::{Digest, Sha256};

use crate::config::FileConfig;
use crate::{BackendKind, Direction, EvalArgs, SchemeKind, SynthArgs, TrainArgs, TranslateArgs};

fn scheme_for(kind: SchemeKind, groups: usize) -> Result<GroupScheme> {
    Ok(match kind {
        SchemeKind::Decades => GroupScheme::uniform_decades(groups)?,
        SchemeKind::Morph => GroupScheme::morph(),
        SchemeKind::Utkface => GroupScheme::utkface(),
    })
}

fn load_records(
    data: &Path,
    age_encoded: bool,
    scheme: &GroupScheme,
) -> Result<(Vec<FaceRecord>, PathBuf)> {
    if age_encoded {
        let records = scan_age_encoded_dir(data, scheme)?;
        Ok((records, data.to_path_buf()))
    } else {
        let records = read_manifest(data, scheme)?;
        let base = data
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        Ok((records, base))
    }
}

/// Stable digest of the record list (subject, path, age per line).
fn dataset_digest(records: &[FaceRecord]) -> String {
    let mut hasher = Sha256::new();
    for r in records {
        hasher.update(r.subject_id.as_bytes());
        hasher.update(b",");
        hasher.update(r.image_path.to_string_lossy().as_bytes());
        hasher.update(b",");
        hasher.update(r.age_years.to_string().as_bytes());
        hasher.update(b"\n");
    }
    format!("{:x}", hasher.finalize())
}

pub fn synth_data(args: SynthArgs) -> Result<()> {
    let cfg = SyntheticConfig {
        n_subjects: args.subjects,
        n_groups: args.groups,
        resolution: args.resolution,
        seed: args.seed,
    };
    let manifest = materialize(&cfg, &args.out)?;
    println!(
        "wrote {} images and {}",
        args.subjects * args.groups,
        manifest.display()
    );
    Ok(())
}

fn train_config_from(args: &TrainArgs) -> Result<TrainConfig> {
    let file = match &args.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    let mut cfg = file.into_train_config()?;
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = args.resolution {
        cfg.resolution = v;
    }
    if let Some(v) = args.groups {
        cfg.n_groups = v;
    }
    if args.no_attention {
        cfg.use_attention = false;
    }
    if args.unordered_input {
        cfg.ordered_input = false;
    }
    if let Some(v) = args.lambda_actv {
        cfg.lambda_actv_override = Some(v);
    }
    Ok(cfg)
}

pub fn train(args: TrainArgs) -> Result<()> {
    let cfg = train_config_from(&args)?;
    cfg.validate()?;
    let scheme = scheme_for(args.scheme, cfg.n_groups)?;
    if scheme.n_groups() != cfg.n_groups {
        bail!(
            "scheme has {} groups but config asks for {}",
            scheme.n_groups(),
            cfg.n_groups
        );
    }
    let (records, base) = load_records(&args.data, args.age_encoded, &scheme)?;
    let digest = dataset_digest(&records);
    let (train_recs, test_recs) = split_by_subject(&records, cfg.train_fraction, cfg.seed)?;
    log::info!(
        "loaded {} records ({} train / {} test subjects-disjoint)",
        records.len(),
        train_recs.len(),
        test_recs.len()
    );
    let train_set = Dataset::load(train_recs, &base, cfg.resolution, cfg.n_groups)?;

    let outcome = fit(&cfg, &train_set, &args.out, args.resume.as_deref())?;
    let manifest = serde_json::json!({
        "tool_version": env!("CARGO_PKG_VERSION"),
        "config": cfg,
        "checkpoint": outcome.checkpoint_path,
        "dataset": args.data,
        "dataset_hash": digest,
        "steps": outcome.steps,
        "final_report": outcome.final_report,
        "weights": outcome.weights,
        "loss_log": args.out.join("losses.jsonl"),
        "metrics": serde_json::Value::Null,
    });
    let manifest_path = args.out.join("run_manifest.json");
    std::fs::write(&manifest_path, serde_json::to_vec_pretty(&manifest)?)
        .with_context(|| format!("writing {}", manifest_path.display()))?;
    println!(
        "checkpoint: {}\nmanifest:   {}",
        outcome.checkpoint_path.display(),
        manifest_path.display()
    );
    Ok(())
}

fn collect_inputs(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(input)
        .with_context(|| format!("reading {}", input.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|s| s.to_str())
                .map(|s| matches!(s.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
                .unwrap_or(false)
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no images found under {}", input.display());
    }
    Ok(paths)
}

fn draw_red_border(img: &mut image::RgbImage, x0: u32, y0: u32, size: u32) {
    let red = image::Rgb([255u8, 0, 0]);
    for t in 0..2u32 {
        for x in x0..x0 + size {
            img.put_pixel(x, y0 + t, red);
            img.put_pixel(x, y0 + size - 1 - t, red);
        }
        for y in y0..y0 + size {
            img.put_pixel(x0 + t, y, red);
            img.put_pixel(x0 + size - 1 - t, y, red);
        }
    }
}

fn mask_to_gray(mask: &ndarray::ArrayView2<f32>) -> image::GrayImage {
    let (h, w) = mask.dim();
    let mut out = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = (mask[(y, x)] * 255.0).round().clamp(0.0, 255.0) as u8;
            out.put_pixel(x as u32, y as u32, image::Luma([v]));
        }
    }
    out
}

pub fn translate(args: TranslateArgs) -> Result<()> {
    if args.targets.is_empty() {
        bail!("--targets must list at least one group");
    }
    let state: TrainState<f32> = load_checkpoint(&args.checkpoint)?;
    let cfg = &state.config;
    let n = cfg.n_groups;
    if args.source_group >= n {
        bail!("--source-group {} out of range for {n} groups", args.source_group);
    }
    for &t in &args.targets {
        if t >= n {
            bail!("target group {t} out of range for {n} groups");
        }
        match args.direction {
            Direction::Progress if t <= args.source_group => bail!(
                "progression requires target > source, but target {t} <= source {}",
                args.source_group
            ),
            Direction::Regress if t >= args.source_group => bail!(
                "regression requires target < source, but target {t} >= source {}",
                args.source_group
            ),
            _ => {}
        }
    }
    let generator: &Generator<f32> = match args.direction {
        Direction::Progress => &state.g_p,
        Direction::Regress => &state.g_r,
    };

    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let res = cfg.resolution;
    let gap = 2usize;
    let inputs = collect_inputs(&args.input)?;
    for path in inputs {
        let img = load_image(&path, res)?;
        // One batch: the input replicated once per target group.
        let images: Vec<&Image> = args.targets.iter().map(|_| &img).collect();
        let batch = data::stack_images(&images);
        let conds = data::condition_rows(&args.targets, n)?;
        let out = generator.infer(&batch, &conds)?;

        let cols = 1 + args.targets.len();
        let rows = if args.export_attention { 2 } else { 1 };
        let width = (cols * res + (cols - 1) * gap) as u32;
        let height = (rows * res + (rows - 1) * gap) as u32;
        let mut grid = image::RgbImage::from_pixel(width, height, image::Rgb([0, 0, 0]));

        let paste_rgb = |grid: &mut image::RgbImage, panel: &image::RgbImage, col: usize, row: usize| {
            let x0 = (col * (res + gap)) as u32;
            let y0 = (row * (res + gap)) as u32;
            for (x, y, p) in panel.enumerate_pixels() {
                grid.put_pixel(x0 + x, y0 + y, *p);
            }
        };

        paste_rgb(&mut grid, &data::to_rgb8(&img), 0, 0);
        draw_red_border(&mut grid, 0, 0, res as u32);
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("image")
            .to_string();
        for (i, &t) in args.targets.iter().enumerate() {
            let panel = out.fused.index_axis(ndarray::Axis(0), i).to_owned();
            paste_rgb(&mut grid, &data::to_rgb8(&panel), 1 + i, 0);
            if args.export_attention {
                let mask = out.attention.index_axis(ndarray::Axis(0), i);
                let mask2 = mask.index_axis(ndarray::Axis(0), 0);
                let gray = mask_to_gray(&mask2);
                // Grid row: attention rendered under its output panel.
                let x0 = ((1 + i) * (res + gap)) as u32;
                let y0 = (res + gap) as u32;
                for (x, y, p) in gray.enumerate_pixels() {
                    let v = p.0[0];
                    grid.put_pixel(x0 + x, y0 + y, image::Rgb([v, v, v]));
                }
                let mask_path = args.out.join(format!("{stem}_att_g{t}.png"));
                gray.save(&mask_path)
                    .with_context(|| format!("writing {}", mask_path.display()))?;
            }
        }
        if args.export_attention {
            // Input panel retains everything: an all-white mask.
            let y0 = (res + gap) as u32;
            for y in 0..res as u32 {
                for x in 0..res as u32 {
                    grid.put_pixel(x, y0 + y, image::Rgb([255, 255, 255]));
                }
            }
        }
        let dirname = match args.direction {
            Direction::Progress => "progress",
            Direction::Regress => "regress",
        };
        let grid_path = args.out.join(format!("{stem}_{dirname}.png"));
        grid.save(&grid_path)
            .with_context(|| format!("writing {}", grid_path.display()))?;
        println!("{}", grid_path.display());
    }
    Ok(())
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let state: TrainState<f32> = load_checkpoint(&args.checkpoint)?;
    let cfg = state.config.clone();
    let scheme = scheme_for(args.scheme, cfg.n_groups)?;
    if scheme.n_groups() != cfg.n_groups {
        bail!(
            "scheme has {} groups but the checkpoint was trained with {}",
            scheme.n_groups(),
            cfg.n_groups
        );
    }
    let (records, base) = load_records(&args.data, args.age_encoded, &scheme)?;
    let digest = dataset_digest(&records);
    // Reproduce the training split so evaluation sees held-out subjects.
    let (train_recs, test_recs) = split_by_subject(&records, cfg.train_fraction, cfg.seed)?;
    if test_recs.is_empty() {
        bail!("the subject split left no test records");
    }
    let test = Dataset::load(test_recs, &base, cfg.resolution, cfg.n_groups)?;

    let opts = EvalOptions {
        threshold: args.threshold,
        batch_size: cfg.batch_size,
    };
    let report = match args.backend {
        BackendKind::Oracle => {
            let train = Dataset::load(train_recs, &base, cfg.resolution, cfg.n_groups)?;
            let backend = OracleBackend::train(&train, &scheme, &OracleTrainOptions::default())?;
            evaluate_model(&state.g_p, &state.g_r, &test, &scheme, &backend, &opts)?
        }
        BackendKind::Remote => {
            let endpoint = args
                .endpoint
                .as_deref()
                .ok_or_else(|| anyhow::anyhow!("--backend remote requires --endpoint"))?;
            let backend = remote_estimator_client(endpoint, RemoteOptions::default());
            let _probe: &dyn EstimatorBackend = &backend;
            evaluate_model(&state.g_p, &state.g_r, &test, &scheme, &backend, &opts)?
        }
    };

    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let envelope = serde_json::json!({
        "tool_version": env!("CARGO_PKG_VERSION"),
        "checkpoint": args.checkpoint,
        "dataset": args.data,
        "dataset_hash": digest,
        "config": cfg,
        "report": report,
    });
    let json_path = args.out.join("eval_report.json");
    std::fs::write(&json_path, serde_json::to_vec_pretty(&envelope)?)
        .with_context(|| format!("writing {}", json_path.display()))?;
    let table_path = args.out.join("eval_report.txt");
    std::fs::write(&table_path, report.table())
        .with_context(|| format!("writing {}", table_path.display()))?;
    print!("{}", report.table());
    println!("report: {}", json_path.display());
    Ok(())
}
