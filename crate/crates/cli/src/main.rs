mod config;
mod data;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use ratlesnet::gradcheck::{self, ModelCheck, REL_TOLERANCE};
use ratlesnet::metrics::{evaluate_cohort, paired_permutation_test, remove_islands_fill_holes, DEFAULT_ITERATIONS};
use ratlesnet::model::{Checkpoint, Model, ModelConfig};
use ratlesnet::nn::Mode;
use ratlesnet::phantom::{generate_cohort, write_cohort, PhantomSpec};
use ratlesnet::train::{majority_vote, EpochRecord, Trainer};
use ratlesnet::volume::{normalize, pad_to_multiple, read_volume, write_mask, Mask};
use ratlesnet::Error;
use serde::Serialize;

use config::{ConfigError, RunConfig};

#[derive(Parser)]
#[command(name = "ratlesnet", version, about = "Volumetric lesion segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum BnMode {
    Train,
    Eval,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort of image/label pairs.
    Phantom {
        #[arg(long, default_value_t = 48)]
        count: usize,
        /// Depth,height,width in voxels.
        #[arg(long, value_delimiter = ',', default_values_t = [16, 32, 32])]
        dims: Vec<usize>,
        /// Voxel size in mm along depth,height,width.
        #[arg(long, value_delimiter = ',', default_values_t = [1.0, 0.117, 0.117])]
        spacing: Vec<f64>,
        #[arg(long, default_value_t = 0.0)]
        sham_fraction: f64,
        #[arg(long, default_value_t = 3)]
        blobs: usize,
        #[arg(long, default_value_t = 0.5)]
        gain: f64,
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train independent runs; run i uses seed + i.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        runs: usize,
        #[arg(long)]
        train_dir: Option<PathBuf>,
        #[arg(long)]
        val_dir: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from `state.ckpt` in each run directory when present.
        #[arg(long)]
        resume: bool,
    },
    /// Segment a volume, or every image_<id>.nii in a directory.
    Infer {
        /// One checkpoint, or three for a majority vote.
        #[arg(long, value_delimiter = ',', required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Switch::On)]
        postproc: Switch,
        #[arg(long)]
        threshold: Option<usize>,
        /// Fails unless every checkpoint was trained with this model config.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Score predictions against ground truth.
    Eval {
        #[arg(long)]
        pred_dir: PathBuf,
        #[arg(long)]
        gt_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Second prediction set for paired permutation tests.
        #[arg(long)]
        compare: Option<PathBuf>,
        #[arg(long, default_value = "pred")]
        pred_prefix: String,
        #[arg(long, default_value = "label")]
        gt_prefix: String,
        #[arg(long, default_value_t = DEFAULT_ITERATIONS)]
        iterations: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print parameter count, receptive field and layer table.
    Summary {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        variant: Option<String>,
    },
    /// Finite-difference check of every operation and of the model.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        variant: Option<String>,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        /// Sampled entries per parameter array; 0 checks every entry.
        #[arg(long, default_value_t = 8)]
        entries: usize,
        #[arg(long, default_value_t = 8)]
        side: usize,
        #[arg(long, value_enum, default_value_t = BnMode::Train)]
        mode: BnMode,
        #[arg(long, default_value_t = gradcheck::FD_STEP)]
        step: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also check one random direction per parameter array.
        #[arg(long)]
        directional: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Phantom {
            count,
            dims,
            spacing,
            sham_fraction,
            blobs,
            gain,
            noise,
            seed,
            out,
        } => (|| {
            let (Ok(dims), Ok(spacing)) = (<[usize; 3]>::try_from(dims), <[f64; 3]>::try_from(spacing)) else {
                bail!(ConfigError("--dims and --spacing take three comma-separated values".into()));
            };
            let template = PhantomSpec {
                dims,
                spacing,
                lesion_blobs: blobs,
                lesion_intensity_gain: gain,
                noise_sigma: noise,
                seed,
            };
            cmd_phantom(count, &template, sham_fraction, seed, &out)
        })(),
        Command::Train {
            config,
            runs,
            train_dir,
            val_dir,
            out,
            epochs,
            learning_rate,
            seed,
            resume,
        } => (|| {
            let mut cfg = RunConfig::load_or_default(config.as_deref())?;
            cfg.paths.train_dir = train_dir.or(cfg.paths.train_dir);
            cfg.paths.val_dir = val_dir.or(cfg.paths.val_dir);
            cfg.paths.out_dir = out.or(cfg.paths.out_dir);
            cfg.train.epochs = epochs.unwrap_or(cfg.train.epochs);
            cfg.train.learning_rate = learning_rate.unwrap_or(cfg.train.learning_rate);
            cfg.train.seed = seed.unwrap_or(cfg.train.seed);
            cfg.train.validate()?;
            cmd_train(&cfg, runs, resume)
        })(),
        Command::Infer {
            checkpoints,
            input,
            out,
            postproc,
            threshold,
            config,
        } => cmd_infer(&checkpoints, &input, &out, postproc, threshold, config.as_deref()),
        Command::Eval {
            pred_dir,
            gt_dir,
            out,
            compare,
            pred_prefix,
            gt_prefix,
            iterations,
            seed,
        } => cmd_eval(&pred_dir, &gt_dir, &out, compare.as_deref(), &pred_prefix, &gt_prefix, iterations, seed),
        Command::Summary { config, variant } => {
            model_config(config.as_deref(), variant.as_deref()).and_then(|cfg| cmd_summary(&cfg))
        }
        Command::Gradcheck {
            config,
            variant,
            trials,
            entries,
            side,
            mode,
            step,
            seed,
            directional,
        } => model_config(config.as_deref(), variant.as_deref()).and_then(|cfg| {
            let opts = ModelCheck {
                input_side: side,
                entries_per_param: (entries > 0).then_some(entries),
                seed,
                mode: match mode {
                    BnMode::Train => Mode::Train,
                    BnMode::Eval => Mode::Eval,
                },
                step,
                prefix: None,
                directional,
            };
            cmd_gradcheck(&cfg, trials, &opts)
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, kind) = classify(&e);
            let msg = message(&e).replace('\n', " ");
            eprintln!("error: kind={kind} code={code} message={msg:?}");
            ExitCode::from(code)
        }
    }
}

/// Exit code and kind: 2 configuration, 3 data, 4 numerical failure.
fn classify(e: &anyhow::Error) -> (u8, &'static str) {
    for cause in e.chain() {
        if cause.is::<ConfigError>() {
            return (2, "config");
        }
        if let Some(err) = cause.downcast_ref::<Error>() {
            return match err {
                Error::Config(_) => (2, "config"),
                Error::Numerical(_) => (4, "numerical"),
                _ => (3, "data"),
            };
        }
    }
    (3, "data")
}

/// Context messages down to the first library error, whose own text
/// already includes its cause.
fn message(e: &anyhow::Error) -> String {
    let mut parts = Vec::new();
    for cause in e.chain() {
        parts.push(cause.to_string());
        if cause.is::<Error>() {
            break;
        }
    }
    parts.join(": ")
}

fn model_config(path: Option<&Path>, variant: Option<&str>) -> anyhow::Result<ModelConfig> {
    match variant {
        Some(v) => Ok(ratlesnet::model::ablation_variant(v)?),
        None => Ok(RunConfig::load_or_default(path)?.model.resolve()?),
    }
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn create_dir(path: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn cmd_phantom(count: usize, template: &PhantomSpec, sham_fraction: f64, seed: u64, out: &Path) -> anyhow::Result<()> {
    let items = generate_cohort(count, template, sham_fraction, seed)?;
    write_cohort(&items, out)?;
    println!("wrote {} phantoms to {}", items.len(), out.display());
    Ok(())
}

fn cmd_train(cfg: &RunConfig, runs: usize, resume: bool) -> anyhow::Result<()> {
    if runs < 1 {
        bail!(ConfigError("--runs must be at least 1".into()));
    }
    let model_cfg = cfg.model.resolve()?;
    let (Some(train_dir), Some(out_dir)) = (&cfg.paths.train_dir, &cfg.paths.out_dir) else {
        bail!(ConfigError("paths.train_dir and paths.out_dir are required for training".into()));
    };
    let multiple = model_cfg.size_multiple();
    let train_set = data::samples(train_dir, multiple)?;
    let val_set = match &cfg.paths.val_dir {
        Some(d) => data::samples(d, multiple)?,
        None => Vec::new(),
    };
    create_dir(out_dir)?;
    write(&out_dir.join("config.json"), &serde_json::to_string_pretty(cfg)?)?;

    for run in 0..runs {
        let dir = out_dir.join(format!("run_{run}"));
        create_dir(&dir)?;
        let mut tcfg = cfg.train.clone();
        tcfg.seed = cfg.train.seed + run as u64;
        let state = dir.join("state.ckpt");
        let mut trainer = if resume && state.exists() {
            Trainer::resume(&Checkpoint::load(&state)?, tcfg.clone())?
        } else {
            Trainer::new(Model::build(&model_cfg, tcfg.seed)?, tcfg.clone())?
        };
        trainer
            .train(&train_set, &val_set, |t, rec| {
                let cell = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.5}"));
                println!(
                    "run {run} epoch {} train_loss {:.5} val_loss {} val_dice {}",
                    rec.epoch,
                    rec.train_loss,
                    cell(rec.val_loss),
                    cell(rec.val_dice)
                );
                t.checkpoint().save(&state)
            })
            .with_context(|| format!("run {run}"))?;

        let mut csv = format!("{}\n", EpochRecord::CSV_HEADER);
        for r in trainer.history() {
            writeln!(csv, "{}", r.csv_row())?;
        }
        write(&dir.join("metrics.csv"), &csv)?;
        trainer.model().save(dir.join("last.ckpt"))?;
        trainer.best_model()?.save(dir.join("best.ckpt"))?;
        trainer.checkpoint().save(&state)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct Sidecar<'a> {
    input: &'a Path,
    checkpoints: &'a [PathBuf],
    postproc: bool,
    threshold: usize,
    original_dims: [usize; 3],
    pad_low: [usize; 3],
    pad_high: [usize; 3],
    lesion_voxels: usize,
}

fn cmd_infer(
    checkpoints: &[PathBuf],
    input: &Path,
    out: &Path,
    postproc: Switch,
    threshold: Option<usize>,
    config: Option<&Path>,
) -> anyhow::Result<()> {
    if ![1, 3].contains(&checkpoints.len()) {
        bail!(ConfigError(format!("expected 1 or 3 checkpoints, got {}", checkpoints.len())));
    }
    let expected = config.map(|p| RunConfig::load(p).and_then(|c| Ok(c.model.resolve()?))).transpose()?;
    let threshold = threshold.unwrap_or(ratlesnet::metrics::DEFAULT_THRESHOLD);
    let mut models = checkpoints
        .iter()
        .map(|p| {
            let m = Model::load(p)?;
            if let Some(cfg) = &expected {
                if m.config() != cfg {
                    bail!(ConfigError(format!("{} was trained with a different model config", p.display())));
                }
            }
            Ok(m)
        })
        .collect::<anyhow::Result<Vec<_>>>()?;

    let jobs: Vec<(PathBuf, PathBuf)> = if input.is_dir() {
        create_dir(out)?;
        data::list(input, "image")?
            .into_iter()
            .map(|(id, p)| (p, out.join(format!("pred_{id}.nii"))))
            .collect()
    } else {
        vec![(input.to_path_buf(), out.to_path_buf())]
    };
    for (src, dst) in jobs {
        let volume = read_volume(&src)?;
        let x = normalize(&volume);
        let (_, pad) = pad_to_multiple(&x, models[0].config().size_multiple());
        let masks = models
            .iter_mut()
            .map(|m| m.predict_mask(&x))
            .collect::<ratlesnet::Result<Vec<Mask>>>()
            .with_context(|| format!("segmenting {}", src.display()))?;
        let mut mask = if masks.len() == 3 { majority_vote(&masks)? } else { masks[0].clone() };
        if postproc == Switch::On {
            mask = remove_islands_fill_holes(&mask, threshold);
        }
        write_mask(&mask, &dst)?;
        let sidecar = Sidecar {
            input: &src,
            checkpoints,
            postproc: postproc == Switch::On,
            threshold,
            original_dims: pad.original,
            pad_low: pad.low,
            pad_high: pad.high,
            lesion_voxels: mask.count(),
        };
        write(&dst.with_extension("json"), &serde_json::to_string_pretty(&sidecar)?)?;
        println!("{} -> {} ({} lesion voxels)", src.display(), dst.display(), mask.count());
    }
    Ok(())
}

/// Keeps the ids present in both sets; any id missing from either is an error.
fn matched(preds: Vec<(String, Mask)>, gts: &[(String, Mask)], what: &str) -> anyhow::Result<Vec<(String, Mask)>> {
    let pred_ids: Vec<&String> = preds.iter().map(|(id, _)| id).collect();
    let gt_ids: Vec<&String> = gts.iter().map(|(id, _)| id).collect();
    if pred_ids != gt_ids {
        let missing: Vec<&&String> = gt_ids.iter().filter(|id| !pred_ids.contains(id)).collect();
        let extra: Vec<&&String> = pred_ids.iter().filter(|id| !gt_ids.contains(id)).collect();
        bail!(Error::Contract(format!("{what}: unmatched ids, missing {missing:?}, unexpected {extra:?}")));
    }
    Ok(preds)
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    pred_dir: &Path,
    gt_dir: &Path,
    out: &Path,
    compare: Option<&Path>,
    pred_prefix: &str,
    gt_prefix: &str,
    iterations: usize,
    seed: u64,
) -> anyhow::Result<()> {
    let gts = data::masks(gt_dir, gt_prefix)?;
    if gts.is_empty() {
        bail!(Error::Contract(format!("no {gt_prefix}_<id>.nii files in {}", gt_dir.display())));
    }
    let preds = matched(data::masks(pred_dir, pred_prefix)?, &gts, "predictions")?;
    let eval = evaluate_cohort(&preds, &gts)?;
    create_dir(out)?;
    write(&out.join("metrics.csv"), &eval.items_csv())?;
    write(&out.join("summary.csv"), &eval.summary_csv())?;
    print!("{}", eval.summary_csv());

    if let Some(other_dir) = compare {
        let other = matched(data::masks(other_dir, pred_prefix)?, &gts, "comparison predictions")?;
        let other_eval = evaluate_cohort(&other, &gts)?;
        write(&out.join("compare_metrics.csv"), &other_eval.items_csv())?;
        write(&out.join("compare_summary.csv"), &other_eval.summary_csv())?;
        let mut csv = String::from("metric,n,p_value\n");
        type Pick = fn(&ratlesnet::metrics::MetricReport) -> Option<f64>;
        let metrics: [(&str, Pick); 3] = [
            ("dice", |r| Some(r.dice)),
            ("compactness", |r| r.compactness),
            ("hausdorff_mm", |r| r.hausdorff_mm),
        ];
        for (name, pick) in metrics {
            let (x, y): (Vec<f64>, Vec<f64>) = eval
                .reports
                .iter()
                .zip(&other_eval.reports)
                .filter_map(|(a, b)| Some((pick(a)?, pick(b)?)))
                .unzip();
            let p = if x.len() >= 2 {
                paired_permutation_test(&x, &y, iterations, seed)?.to_string()
            } else {
                String::new()
            };
            writeln!(csv, "{name},{},{p}", x.len())?;
        }
        write(&out.join("pvalues.csv"), &csv)?;
        print!("{csv}");
    }
    Ok(())
}

/// Published figures for this architecture disagree with each other, so the
/// summary reports the computed values next to both instead of asserting one.
const RF_NOTE: &str = "note: published descriptions of this architecture quote a receptive field of 76 voxels \
in one place and 72 voxels (halved to 36) in another; the figures above come from the layer \
recurrence and are not adjusted to match either";

fn cmd_summary(cfg: &ModelConfig) -> anyhow::Result<()> {
    let model = Model::build(cfg, 0)?;
    print!("{}", model.summary());
    println!("{RF_NOTE}");
    Ok(())
}

fn cmd_gradcheck(cfg: &ModelConfig, trials: usize, opts: &ModelCheck) -> anyhow::Result<()> {
    let mut worst: f64 = 0.0;
    println!("operations ({trials} random cases each, step {:e})", gradcheck::FD_STEP);
    for r in gradcheck::check_ops(trials, opts.seed)? {
        println!("  {:<22} max rel err {:.3e}", r.op, r.max_rel_err);
        worst = worst.max(r.max_rel_err);
    }
    let s = opts.input_side;
    println!(
        "model on 1x{}x{s}x{s}x{s} ({:?} mode, step {:e}, {} entries per array)",
        cfg.input_channels,
        opts.mode,
        opts.step,
        opts.entries_per_param.map_or("all".to_string(), |k| k.to_string())
    );
    for g in gradcheck::check_model(cfg, opts)? {
        println!("  {:<28} {:>5} checked  max rel err {:.3e}", g.name, g.checked, g.max_rel_err);
        worst = worst.max(g.max_rel_err);
    }
    println!("max relative error {worst:.3e} (tolerance {REL_TOLERANCE:e})");
    if worst.is_nan() || worst >= REL_TOLERANCE {
        bail!(Error::Numerical(format!(
            "gradient check failed: max relative error {worst:.3e} >= {REL_TOLERANCE:e}"
        )));
    }
    Ok(())
}
