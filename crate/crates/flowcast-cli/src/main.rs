//! Command-line surface for the forecasting pipeline: synthetic data
//! generation, training, evaluation, augmentation inspection, and the
//! whole-model gradient check.
//!
//! Machine-readable output (JSON, CSV) goes to stdout or files; logs go to
//! stderr. Exit codes: 0 success, 1 domain error, 2 usage error.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use flowcast::data::{
    load_dataset, make_windows, save_dataset, split_chronological, synth_generate, FlowDataset,
    Sample, SynthSpec,
};
use flowcast::train::{
    cluster_snapshot, evaluate, inspect_augmentation, run_joint_gradcheck, train,
    write_assignments_csv, write_history_csv, Checkpoint, RunConfig,
};

#[derive(Parser)]
#[command(
    name = "flowcast",
    about = "Traffic-flow forecasting with heterogeneity-aware self-supervision",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic grid-flow dataset with planted regimes.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        rows: usize,
        #[arg(long, default_value_t = 8)]
        cols: usize,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[arg(long, default_value_t = 2)]
        regimes: usize,
        #[arg(long, default_value_t = 0.6)]
        noise: f64,
        #[arg(long, default_value_t = 60)]
        interval_minutes: usize,
    },
    /// Train on a dataset directory and write checkpoint + reports.
    Train {
        /// JSON run configuration; omitted keys take defaults.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the validation or test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = ["val", "test"])]
        split: String,
    },
    /// Dump relevance, similarity, and perturbation-probability diagnostics.
    AugmentInspect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of the joint loss on a mini instance.
    Gradcheck {
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    // clap exits with code 2 on usage errors by itself
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Synth {
            out,
            seed,
            rows,
            cols,
            steps,
            regimes,
            noise,
            interval_minutes,
        } => {
            let spec = SynthSpec {
                rows,
                cols,
                num_steps: steps,
                interval_minutes,
                regimes,
                noise_level: noise,
            };
            let (dataset, labels) = synth_generate(&spec, seed)?;
            save_dataset(&out, &dataset, Some(&labels))?;
            log::info!(
                "wrote {} steps over {}x{} regions to {}",
                steps,
                rows,
                cols,
                out.display()
            );
            Ok(())
        }
        Command::Train { config, data, out } => {
            let text = std::fs::read_to_string(&config)
                .with_context(|| format!("reading config {}", config.display()))?;
            let config = RunConfig::from_json(&text)?;
            let dataset = load_dataset(&data)?;
            std::fs::create_dir_all(&out)
                .with_context(|| format!("creating {}", out.display()))?;

            let result = train(&config, &dataset)?;
            write_history_csv(&out.join("history.csv"), &result.history)?;
            result.checkpoint.save(&out.join("checkpoint.bin"))?;

            let (samples, split) = windows_of(&result.checkpoint, &dataset);
            let metrics = evaluate(&result.checkpoint, &dataset, &samples[split.test.clone()])?;
            std::fs::write(
                out.join("metrics.json"),
                serde_json::to_vec_pretty(&metrics)?,
            )
            .with_context(|| "writing metrics.json")?;

            let snapshot =
                cluster_snapshot(&result.checkpoint, &dataset, &samples[split.val.clone()])?;
            write_assignments_csv(&out.join("assignments.csv"), &snapshot.assignment)?;
            log::info!(
                "finished {} epochs; test MAE in {:.4} out {:.4}",
                result.history.len(),
                metrics.mae_in,
                metrics.mae_out
            );
            Ok(())
        }
        Command::Eval {
            checkpoint,
            data,
            split,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let dataset = load_dataset(&data)?;
            let (samples, ranges) = windows_of(&ckpt, &dataset);
            let range = if split == "val" { ranges.val } else { ranges.test };
            if range.is_empty() {
                bail!("the {split} split is empty for this dataset");
            }
            let metrics = evaluate(&ckpt, &dataset, &samples[range])?;
            println!("{}", serde_json::to_string_pretty(&metrics)?);
            Ok(())
        }
        Command::AugmentInspect {
            checkpoint,
            data,
            out,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let dataset = load_dataset(&data)?;
            let (samples, ranges) = windows_of(&ckpt, &dataset);
            let range = if ranges.val.is_empty() { ranges.train } else { ranges.val };
            if range.is_empty() {
                bail!("dataset yields no samples to inspect");
            }
            let sample = &samples[range.start];
            std::fs::create_dir_all(&out)?;
            write_inspection(&ckpt, &dataset, sample, &out)?;
            log::info!("wrote augmentation diagnostics to {}", out.display());
            Ok(())
        }
        Command::Gradcheck { seed } => {
            let report = run_joint_gradcheck(seed, 1e-5)?;
            println!(
                "max relative error {:.3e} over {} entries (worst: {}[{}])",
                report.max_rel_error,
                report.entries_checked,
                report.worst_param,
                report.worst_entry
            );
            Ok(())
        }
    }
}

fn windows_of(ckpt: &Checkpoint, dataset: &FlowDataset) -> (Vec<Sample>, flowcast::data::SplitRanges) {
    let spd = ckpt
        .config
        .steps_per_day
        .unwrap_or_else(|| dataset.steps_per_day());
    let samples = make_windows(
        dataset,
        ckpt.config.recent_steps,
        ckpt.config.daily_steps,
        spd,
    );
    let split = split_chronological(samples.len());
    (samples, split)
}

fn write_inspection(
    ckpt: &Checkpoint,
    dataset: &FlowDataset,
    sample: &Sample,
    out: &Path,
) -> Result<()> {
    let inspection = inspect_augmentation(ckpt, dataset, sample)?;

    // relevance: rows = trailing window steps, columns = regions
    let mut text = String::new();
    let n = inspection.relevance.n;
    write_header(&mut text, "step", n);
    for t in 0..inspection.relevance.t1 {
        write!(text, "{t}")?;
        for r in 0..n {
            write!(text, ",{}", inspection.relevance.at(t, r))?;
        }
        text.push('\n');
    }
    std::fs::write(out.join("relevance.csv"), &text)?;

    text.clear();
    write_header(&mut text, "region", n);
    for m in 0..n {
        write!(text, "{m}")?;
        for r in 0..n {
            write!(text, ",{}", inspection.similarity.at(m, r))?;
        }
        text.push('\n');
    }
    std::fs::write(out.join("similarity.csv"), &text)?;

    std::fs::write(
        out.join("mask_prob_hist.csv"),
        histogram_csv(&inspection.mask_probabilities),
    )?;
    std::fs::write(
        out.join("removal_prob_hist.csv"),
        histogram_csv(&inspection.removal_probabilities),
    )?;
    let addition: Vec<f64> = inspection
        .addition_probabilities
        .iter()
        .map(|(_, p)| *p)
        .collect();
    std::fs::write(out.join("addition_prob_hist.csv"), histogram_csv(&addition))?;
    Ok(())
}

fn write_header(text: &mut String, label: &str, n: usize) {
    text.push_str(label);
    for r in 0..n {
        let _ = write!(text, ",r{r}");
    }
    text.push('\n');
}

fn histogram_csv(values: &[f64]) -> String {
    const BINS: usize = 20;
    let mut out = String::from("bin_lo,bin_hi,count\n");
    if values.is_empty() {
        return out;
    }
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / BINS as f64 } else { 1.0 };
    let mut counts = [0usize; BINS];
    for v in values {
        let idx = (((v - lo) / width) as usize).min(BINS - 1);
        counts[idx] += 1;
    }
    for (i, c) in counts.iter().enumerate() {
        let _ = writeln!(
            out,
            "{},{},{}",
            lo + i as f64 * width,
            lo + (i + 1) as f64 * width,
            c
        );
    }
    out
}
