//! Experiment driver: dataset generation, training, evaluation, diagnostics
//! and seeded A/B comparisons, all reproducible from a config file.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 runtime error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use condet::analysis;
use condet::config::ExperimentConfig;
use condet::detector::DetectorModel;
use condet::error::Error;
use condet::evaluation::{format_ap_table, size_stratified_ap, write_metrics_csv, SizeCutoffs};
use condet::inference::write_detections_csv;
use condet::synthdata::{dump_split, Split};
use condet::tensor::checkpoint;
use condet::tensor::rng::Rng;
use condet::trainer::{detect_on_split, write_loss_curve, Trainer};
use condet::{evaluation, Result, Scalar};

#[derive(Parser)]
#[command(name = "condet", version, about = "Single-shot detection experiments on synthetic occlusion scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the train/val/test splits as PGM images plus annotation CSVs.
    GenerateData {
        /// Experiment config file (dotted.key = value lines).
        #[arg(long)]
        config: PathBuf,
        /// Output directory; one subdirectory per split.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes the checkpoint and a <out>.loss.csv curve.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        /// Train the single-stage counterpart (alpha = 0, one regression
        /// stage) instead of the consistent objective.
        #[arg(long)]
        baseline: bool,
    },
    /// Run inference on a split, write detections + metrics, print the AP table.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// train, val or test.
        #[arg(long)]
        split: Split,
        /// Directory for detections_<split>.csv and metrics_<split>.csv.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Emit IoU-shift and score-vs-IoU diagnostics (CSV + SVG).
    Analyze {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "val")]
        split: Split,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Train baseline and consistent models over several seeds and compare
    /// validation AP.
    Ab {
        #[arg(long)]
        config: PathBuf,
        /// Seeds 0..n, each training one baseline and one consistent model.
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Config(_)) => {
            eprintln!("{e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(3)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenerateData { config, out } => cmd_generate_data(&config, &out),
        Command::Train { config, out, baseline } => cmd_train(&config, &out, baseline),
        Command::Evaluate { config, ckpt, split, out } => cmd_evaluate(&config, &ckpt, split, &out),
        Command::Analyze { config, ckpt, split, out } => cmd_analyze(&config, &ckpt, split, &out),
        Command::Ab { config, seeds, out } => cmd_ab(&config, seeds, &out),
    }
}

fn split_count(cfg: &ExperimentConfig<Scalar>, split: Split) -> usize {
    match split {
        Split::Train => cfg.data.train_count,
        Split::Val => cfg.data.val_count,
        Split::Test => cfg.data.test_count,
    }
}

fn cmd_generate_data(config: &Path, out: &Path) -> Result<()> {
    let cfg = ExperimentConfig::<Scalar>::load(config)?;
    for split in [Split::Train, Split::Val, Split::Test] {
        let count = split_count(&cfg, split);
        let boxes = dump_split(&cfg.scene, split, count, out)?;
        println!("{}: {count} images, {boxes} boxes", split.dir_name());
    }
    Ok(())
}

fn cmd_train(config: &Path, out: &Path, baseline: bool) -> Result<()> {
    let mut cfg = ExperimentConfig::<Scalar>::load(config)?;
    if baseline {
        cfg = cfg.to_baseline();
    }
    let steps = cfg.trainer.steps;
    let mut trainer = Trainer::new(cfg)?;
    let log = trainer.run()?;
    checkpoint::save(out, &trainer.model.params)?;
    let loss_path = out.with_extension("loss.csv");
    write_loss_curve(&loss_path, &log)?;
    let last = log.last().expect("steps >= 1");
    println!(
        "trained {steps} steps ({} parameters), final loss {:.6}",
        trainer.model.param_count(),
        last.total
    );
    println!("checkpoint: {}", out.display());
    println!("loss curve: {}", loss_path.display());
    Ok(())
}

/// Builds the model matching the checkpoint: a checkpoint without a
/// second regression head loads as the baseline variant of the config.
fn load_model(
    cfg: &ExperimentConfig<Scalar>,
    ckpt: &Path,
) -> Result<(DetectorModel<Scalar>, ExperimentConfig<Scalar>)> {
    let records = checkpoint::load(ckpt)?;
    let has_second = records.iter().any(|r| r.name.starts_with("reg_stage2"));
    let eff = if has_second { cfg.clone() } else { cfg.to_baseline() };
    let mut rng = Rng::derive(0, 0);
    let mut model = DetectorModel::new(eff.model.clone(), eff.anchors.clone(), &mut rng)?;
    checkpoint::load_into(ckpt, &mut model.params)?;
    Ok((model, eff))
}

fn cmd_evaluate(config: &Path, ckpt: &Path, split: Split, out: &Path) -> Result<()> {
    let cfg = ExperimentConfig::<Scalar>::load(config)?;
    let (model, eff) = load_model(&cfg, ckpt)?;
    let count = split_count(&eff, split);
    let run = detect_on_split(&model, &eff, split, count)?;
    let gts: Vec<Vec<(condet::BBox, usize)>> =
        run.scenes.iter().map(|s| s.gts.clone()).collect();
    let result = evaluation::evaluate(&run.detections, &gts, eff.scene.num_classes)?;

    std::fs::create_dir_all(out)?;
    let det_rows: Vec<(usize, Vec<condet::Detection>)> =
        run.detections.into_iter().enumerate().collect();
    let det_path = out.join(format!("detections_{}.csv", split.dir_name()));
    write_detections_csv(&det_path, &det_rows)?;
    let metrics_path = out.join(format!("metrics_{}.csv", split.dir_name()));
    write_metrics_csv(&metrics_path, &result)?;

    print!("{}", format_ap_table(&result));
    let sizes = size_stratified_ap(
        &det_rows.iter().map(|(_, d)| d.clone()).collect::<Vec<_>>(),
        &gts,
        eff.scene.num_classes,
        SizeCutoffs::for_image_side(eff.scene.image_side),
    )?;
    let fmt = |v: Option<Scalar>| match v {
        Some(v) => format!("{:.1}", v * 100.0),
        None => "n/a".to_string(),
    };
    println!(
        "AP_S {}  AP_M {}  AP_L {}",
        fmt(sizes.small),
        fmt(sizes.medium),
        fmt(sizes.large)
    );
    println!("metrics: {}", metrics_path.display());
    println!("detections: {}", det_path.display());
    Ok(())
}

fn cmd_analyze(config: &Path, ckpt: &Path, split: Split, out: &Path) -> Result<()> {
    let cfg = ExperimentConfig::<Scalar>::load(config)?;
    let (model, eff) = load_model(&cfg, ckpt)?;
    let count = split_count(&eff, split);
    std::fs::create_dir_all(out)?;

    let shift = analysis::quantize_pairs(&analysis::iou_shift_on_split(
        &model, &eff, split, count,
    )?);
    analysis::write_samples_csv(&out.join("iou_shift_samples.csv"), "iou_before,iou_after", &shift)?;
    std::fs::write(
        out.join("iou_shift_scatter.svg"),
        analysis::scatter_svg(&shift, "IoU before vs after regression", "IoU before", "IoU after"),
    )?;

    let scores = analysis::quantize_pairs(&analysis::score_iou_samples_on_split(
        &model, &eff, split, count,
    )?);
    analysis::write_samples_csv(&out.join("score_iou_samples.csv"), "iou,score", &scores)?;

    let (score_bins, shift_bins) = analysis::score_vs_iou_on_split(&model, &eff, split, count)?;
    analysis::write_binstats_csv(&out.join("score_by_iou_bins.csv"), &score_bins)?;
    analysis::write_binstats_csv(&out.join("iou_shift_bins.csv"), &shift_bins)?;
    std::fs::write(
        out.join("score_by_iou.svg"),
        analysis::bin_means_svg(&score_bins, "Score by detection IoU", "IoU", "score"),
    )?;
    std::fs::write(
        out.join("iou_shift_means.svg"),
        analysis::bin_means_svg(&shift_bins, "Output IoU by input IoU", "IoU before", "IoU after"),
    )?;

    println!(
        "analyzed {count} {} images: {} anchor pairs, {} detections",
        split.dir_name(),
        shift.len(),
        scores.len()
    );
    println!("outputs in {}", out.display());
    Ok(())
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn cmd_ab(config: &Path, seeds: u64, out: &Path) -> Result<()> {
    if seeds == 0 {
        return Err(Error::config("ab needs at least one seed"));
    }
    let cfg = ExperimentConfig::<Scalar>::load(config)?;
    std::fs::create_dir_all(out)?;
    let mut rows = Vec::new();
    for seed in 0..seeds {
        let mut consistent_cfg = cfg.clone();
        consistent_cfg.trainer.seed = seed;
        let baseline_cfg = consistent_cfg.to_baseline();

        let mut baseline = Trainer::new(baseline_cfg.clone())?;
        baseline.run()?;
        let ap_b = condet::trainer::evaluate_split(
            &baseline.model,
            &baseline_cfg,
            Split::Val,
            baseline_cfg.data.val_count,
        )?
        .ap;

        let mut consistent = Trainer::new(consistent_cfg.clone())?;
        consistent.run()?;
        let ap_c = condet::trainer::evaluate_split(
            &consistent.model,
            &consistent_cfg,
            Split::Val,
            consistent_cfg.data.val_count,
        )?
        .ap;

        println!(
            "seed {seed}: baseline AP {:.4}  consistent AP {:.4}  delta {:+.4}",
            ap_b,
            ap_c,
            ap_c - ap_b
        );
        rows.push((seed, ap_b, ap_c));
    }

    let mut b: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let mut c: Vec<f64> = rows.iter().map(|r| r.2).collect();
    let mut d: Vec<f64> = rows.iter().map(|r| r.2 - r.1).collect();
    let (mb, mc, md) = (median(&mut b), median(&mut c), median(&mut d));

    let path = out.join("ab_comparison.csv");
    let mut text = String::from("seed,baseline_ap,consistent_ap,delta\n");
    for (seed, ap_b, ap_c) in &rows {
        text.push_str(&format!("{seed},{ap_b},{ap_c},{}\n", ap_c - ap_b));
    }
    text.push_str(&format!("median,{mb},{mc},{md}\n"));
    std::fs::write(&path, text)?;

    println!("median: baseline AP {mb:.4}  consistent AP {mc:.4}  delta {md:+.4}");
    println!("table: {}", path.display());
    Ok(())
}
