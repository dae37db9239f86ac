//! `crseg` command line: dataset generation, semi-supervised training,
//! best-threshold evaluation, prediction dumps, and log plots.
//!
//! Exit codes: 0 success, 1 usage, 2 configuration error, 3 data-format
//! error.

mod plot;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crseg::data::{
    generate_synthetic_dataset, load_dataset, make_split, save_dataset, DatasetSplit, ImageSample,
    SynthConfig, Task,
};
use crseg::eval::{default_thresholds, evaluate_model};
use crseg::network::{build_crseg, load_checkpoint, save_checkpoint, CrSegConfig};
use crseg::trainer::{train, TrainConfig};
use crseg::Error;

#[derive(Parser)]
#[command(name = "crseg", version, about = "Semi-supervised crack/road segmentation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic crack or road dataset.
    GenData(GenDataArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Sweep thresholds for a checkpoint over a labeled dataset.
    Eval(EvalArgs),
    /// Write per-image probability maps and binarized masks.
    Predict(PredictArgs),
    /// Render loss/MIOU curves from training logs.
    PlotLog(PlotLogArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// crack | road
    #[arg(long, default_value = "crack")]
    task: String,
    /// Number of images.
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Square image size in pixels.
    #[arg(long, default_value_t = 128)]
    size: usize,
    /// Target mean foreground fraction.
    #[arg(long, default_value_t = 0.02)]
    fg_target: f64,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
}

/// Every TrainConfig key is also a CLI override; values use the same syntax
/// as the config file.
#[derive(Args, Default)]
struct Overrides {
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    lr0: Option<String>,
    #[arg(long)]
    lr_drop_every: Option<String>,
    #[arg(long)]
    lr_drop_factor: Option<String>,
    #[arg(long)]
    momentum: Option<String>,
    #[arg(long)]
    lambda_wd: Option<String>,
    #[arg(long)]
    batch_labeled: Option<String>,
    #[arg(long)]
    batch_unlabeled: Option<String>,
    #[arg(long)]
    crop_size: Option<String>,
    #[arg(long)]
    min_overlap_fraction: Option<String>,
    #[arg(long)]
    tau: Option<String>,
    #[arg(long)]
    alpha_conf: Option<String>,
    #[arg(long)]
    alpha_exp: Option<String>,
    /// Comma-separated subset of 1..=5.
    #[arg(long)]
    contrast_stages: Option<String>,
    /// semi | sup_only
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    label_fraction: Option<String>,
    #[arg(long)]
    base_width: Option<String>,
    #[arg(long)]
    embed_dim: Option<String>,
    #[arg(long)]
    neg_bank_size: Option<String>,
    /// as_printed | inverse_frequency | uniform
    #[arg(long)]
    balance_weighting: Option<String>,
    #[arg(long)]
    exclusive_denominator: Option<String>,
    /// sum | mean
    #[arg(long)]
    construction_reduction: Option<String>,
    #[arg(long)]
    weight_contrast: Option<String>,
    #[arg(long)]
    weight_balance: Option<String>,
    #[arg(long)]
    weight_construction: Option<String>,
    #[arg(long)]
    train_full_image: Option<String>,
    #[arg(long)]
    crop_jitter: Option<String>,
    #[arg(long)]
    val_every: Option<String>,
    #[arg(long)]
    checkpoint_every: Option<String>,
}

impl Overrides {
    fn apply(&self, cfg: &mut TrainConfig) -> Result<(), Error> {
        let entries: [(&str, &Option<String>); 30] = [
            ("epochs", &self.epochs),
            ("lr0", &self.lr0),
            ("lr_drop_every", &self.lr_drop_every),
            ("lr_drop_factor", &self.lr_drop_factor),
            ("momentum", &self.momentum),
            ("lambda_wd", &self.lambda_wd),
            ("batch_labeled", &self.batch_labeled),
            ("batch_unlabeled", &self.batch_unlabeled),
            ("crop_size", &self.crop_size),
            ("min_overlap_fraction", &self.min_overlap_fraction),
            ("tau", &self.tau),
            ("alpha_conf", &self.alpha_conf),
            ("alpha_exp", &self.alpha_exp),
            ("contrast_stages", &self.contrast_stages),
            ("mode", &self.mode),
            ("seed", &self.seed),
            ("label_fraction", &self.label_fraction),
            ("base_width", &self.base_width),
            ("embed_dim", &self.embed_dim),
            ("neg_bank_size", &self.neg_bank_size),
            ("balance_weighting", &self.balance_weighting),
            ("exclusive_denominator", &self.exclusive_denominator),
            ("construction_reduction", &self.construction_reduction),
            ("weight_contrast", &self.weight_contrast),
            ("weight_balance", &self.weight_balance),
            ("weight_construction", &self.weight_construction),
            ("train_full_image", &self.train_full_image),
            ("crop_jitter", &self.crop_jitter),
            ("val_every", &self.val_every),
            ("checkpoint_every", &self.checkpoint_every),
        ];
        for (key, value) in entries {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        Ok(())
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Flat key = value config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training dataset directory (from gen-data).
    #[arg(long)]
    data: PathBuf,
    /// Held-out labeled dataset for per-epoch validation MIOU.
    #[arg(long)]
    val_data: Option<PathBuf>,
    /// Output directory for logs and checkpoints.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Labeled dataset directory to score.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated thresholds in (0,1); default 0.05..0.95 step 0.05.
    #[arg(long)]
    thresholds: Option<String>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Binarization threshold for the mask PNGs.
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
}

#[derive(Args)]
struct PlotLogArgs {
    /// train_log.csv produced by `train`.
    #[arg(long)]
    log: PathBuf,
    /// val.csv produced by `train` (defaults to a sibling of --log).
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints its own usage/help text
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            let code = match err {
                Error::Config(_) | Error::Argument(_) => 2,
                Error::Format { .. } | Error::Image { .. } | Error::Io { .. } => 3,
            };
            ExitCode::from(code)
        }
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::GenData(args) => gen_data(args),
        Command::Train(args) => train_cmd(args),
        Command::Eval(args) => eval_cmd(args),
        Command::Predict(args) => predict_cmd(args),
        Command::PlotLog(args) => plot_log_cmd(args),
    }
}

fn ensure_dir(path: &Path) -> Result<(), Error> {
    fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })
}

fn gen_data(args: GenDataArgs) -> Result<(), Error> {
    let task: Task = args.task.parse().map_err(|_| {
        Error::Config(format!("task must be crack|road, got '{}'", args.task))
    })?;
    let cfg = SynthConfig {
        image_size: args.size,
        foreground_fraction_target: args.fg_target,
        task,
        n_images: args.n,
        noise_level: args.noise,
        seed: args.seed,
    };
    let samples = generate_synthetic_dataset(&cfg)?;
    ensure_dir(&args.out)?;
    save_dataset(&samples, &args.out)?;
    println!(
        "wrote {} {} images ({}x{}) to {}",
        samples.len(),
        args.task,
        args.size,
        args.size,
        args.out.display()
    );
    Ok(())
}

/// Labeled pool comes from mask-bearing samples; maskless samples always
/// land in the unlabeled pool.
fn split_dataset(samples: &[ImageSample], cfg: &TrainConfig) -> Result<DatasetSplit, Error> {
    let with_mask: Vec<String> = samples
        .iter()
        .filter(|s| s.labeled())
        .map(|s| s.id.clone())
        .collect();
    let without_mask: Vec<String> = samples
        .iter()
        .filter(|s| !s.labeled())
        .map(|s| s.id.clone())
        .collect();
    if with_mask.is_empty() {
        return Err(Error::Config(
            "dataset has no labeled samples to draw the labeled pool from".into(),
        ));
    }
    let mut split = make_split(&with_mask, cfg.label_fraction, cfg.seed)?;
    split.unlabeled_ids.extend(without_mask);
    Ok(split)
}

fn train_cmd(args: TrainArgs) -> Result<(), Error> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            TrainConfig::from_text(&text)?
        }
        None => TrainConfig::default(),
    };
    args.overrides.apply(&mut cfg)?;
    cfg.validate()?;

    let samples = load_dataset(&args.data)?;
    if samples.is_empty() {
        return Err(Error::Config(format!(
            "dataset at {} is empty",
            args.data.display()
        )));
    }
    let val_samples = match &args.val_data {
        Some(dir) => load_dataset(dir)?,
        None => Vec::new(),
    };
    let split = split_dataset(&samples, &cfg)?;

    let in_channels = samples[0].channels();
    let mut model = build_crseg(
        &CrSegConfig {
            in_channels,
            base_width: cfg.base_width,
            embed_dim: cfg.embed_dim,
            ..CrSegConfig::default()
        },
        cfg.seed,
    )?;

    ensure_dir(&args.out)?;
    let resolved = args.out.join("config_resolved.cfg");
    fs::write(&resolved, cfg.to_text()).map_err(|e| Error::Io {
        path: resolved,
        source: e,
    })?;
    let mut split_rows = String::from("id\tpool\n");
    for id in &split.labeled_ids {
        split_rows.push_str(&format!("{id}\tlabeled\n"));
    }
    for id in &split.unlabeled_ids {
        split_rows.push_str(&format!("{id}\tunlabeled\n"));
    }
    let split_path = args.out.join("split.tsv");
    fs::write(&split_path, split_rows).map_err(|e| Error::Io {
        path: split_path,
        source: e,
    })?;

    let log = train(&mut model, &samples, &split, &val_samples, &cfg, Some(&args.out))?;

    log.write_csv(&args.out.join("train_log.csv"))?;
    log.write_val_csv(&args.out.join("val.csv"))?;
    save_checkpoint(&model, &args.out.join("checkpoint_final.ckpt"))?;

    let last = log.steps.last().expect("at least one step");
    println!(
        "trained {} epochs ({} steps); final total loss {:.6}; outputs in {}",
        cfg.epochs,
        log.steps.len(),
        last.breakdown.total,
        args.out.display()
    );
    if let Some((epoch, miou)) = log.val_miou.last() {
        println!("final validation best-MIOU {:.4} (epoch {})", miou, epoch);
    }
    Ok(())
}

fn parse_thresholds(arg: &Option<String>) -> Result<Vec<f64>, Error> {
    match arg {
        None => Ok(default_thresholds()),
        Some(list) => list
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Config(format!("bad threshold '{s}'")))
            })
            .collect(),
    }
}

fn eval_cmd(args: EvalArgs) -> Result<(), Error> {
    let model = load_checkpoint(&args.checkpoint)?;
    let samples = load_dataset(&args.data)?;
    let thresholds = parse_thresholds(&args.thresholds)?;
    let report = evaluate_model(&model, &samples, &thresholds)?;
    ensure_dir(&args.out)?;
    report.write_csv(&args.out.join("report.csv"), &args.out.join("summary.csv"))?;
    println!(
        "best_threshold={} best_miou={:.6} ({} thresholds, {} images)",
        report.best_threshold,
        report.best_miou,
        report.thresholds.len(),
        samples.iter().filter(|s| s.labeled()).count()
    );
    Ok(())
}

fn predict_cmd(args: PredictArgs) -> Result<(), Error> {
    if !(args.threshold > 0.0 && args.threshold < 1.0) {
        return Err(Error::Config(format!(
            "threshold must lie in (0, 1), got {}",
            args.threshold
        )));
    }
    let model = load_checkpoint(&args.checkpoint)?;
    let samples = load_dataset(&args.data)?;
    ensure_dir(&args.out)?;
    for sample in &samples {
        let prob = model.predict(&sample.image)?;
        let (h, w) = prob.dim();
        let mut prob_png = image::GrayImage::new(w as u32, h as u32);
        let mut mask_png = image::GrayImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let p = prob[[y, x]];
                prob_png.put_pixel(
                    x as u32,
                    y as u32,
                    image::Luma([(p * 255.0).round().clamp(0.0, 255.0) as u8]),
                );
                mask_png.put_pixel(
                    x as u32,
                    y as u32,
                    image::Luma([if f64::from(p) >= args.threshold { 255 } else { 0 }]),
                );
            }
        }
        let prob_path = args.out.join(format!("{}_prob.png", sample.id));
        prob_png.save(&prob_path).map_err(|e| Error::Image {
            path: prob_path,
            source: e,
        })?;
        let mask_path = args.out.join(format!("{}_mask.png", sample.id));
        mask_png.save(&mask_path).map_err(|e| Error::Image {
            path: mask_path,
            source: e,
        })?;
    }
    println!(
        "wrote {} probability/mask pairs to {}",
        samples.len(),
        args.out.display()
    );
    Ok(())
}

fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>), Error> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })?;
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::Format {
            path: path.into(),
            msg: "empty csv".into(),
        })?
        .split(',')
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: Result<Vec<f64>, Error> = line
            .split(',')
            .map(|v| {
                v.parse::<f64>().map_err(|_| Error::Format {
                    path: path.into(),
                    msg: format!("row {}: bad number '{v}'", i + 2),
                })
            })
            .collect();
        let row = row?;
        if row.len() != header.len() {
            return Err(Error::Format {
                path: path.into(),
                msg: format!("row {}: wrong column count", i + 2),
            });
        }
        rows.push(row);
    }
    Ok((header, rows))
}

fn plot_log_cmd(args: PlotLogArgs) -> Result<(), Error> {
    let (header, rows) = read_csv(&args.log)?;
    let col = |name: &str| header.iter().position(|h| h == name);
    let (Some(step_i), Some(total_i), Some(contrast_i), Some(balance_i), Some(cons_i)) = (
        col("step"),
        col("total"),
        col("contrast"),
        col("balance"),
        col("construction"),
    ) else {
        return Err(Error::Format {
            path: args.log.clone(),
            msg: "missing expected train_log columns".into(),
        });
    };
    if rows.is_empty() {
        return Err(Error::Format {
            path: args.log.clone(),
            msg: "no rows to plot".into(),
        });
    }

    ensure_dir(&args.out)?;
    let series = |idx: usize, label: &str, color: [u8; 3]| plot::Series {
        label: label.into(),
        color,
        points: rows.iter().map(|r| (r[step_i], r[idx])).collect(),
    };
    let losses = vec![
        series(total_i, "total", [20, 20, 20]),
        series(contrast_i, "contrast", [214, 69, 65]),
        series(balance_i, "balance", [31, 119, 180]),
        series(cons_i, "construction", [44, 160, 44]),
    ];
    let loss_path = args.out.join("losses.png");
    plot::render_chart(&losses, &loss_path).map_err(|msg| Error::Format {
        path: loss_path.clone(),
        msg,
    })?;

    let val_path = args
        .val
        .clone()
        .unwrap_or_else(|| args.log.with_file_name("val.csv"));
    if val_path.exists() {
        let (vh, vrows) = read_csv(&val_path)?;
        let (Some(e_i), Some(m_i)) = (
            vh.iter().position(|h| h == "epoch"),
            vh.iter().position(|h| h == "miou"),
        ) else {
            return Err(Error::Format {
                path: val_path.clone(),
                msg: "missing epoch/miou columns".into(),
            });
        };
        if !vrows.is_empty() {
            let miou = vec![plot::Series {
                label: "val best-MIOU".into(),
                color: [148, 103, 189],
                points: vrows.iter().map(|r| (r[e_i], r[m_i])).collect(),
            }];
            let miou_path = args.out.join("miou.png");
            plot::render_chart(&miou, &miou_path).map_err(|msg| Error::Format {
                path: miou_path.clone(),
                msg,
            })?;
        }
    }
    println!("wrote plots to {}", args.out.display());
    Ok(())
}
