//! Command-line front end: dataset generation, training, evaluation,
//! rollout heatmaps and cost reports. Exit codes: 0 success, 1 runtime
//! failure, 2 usage or configuration error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use vidtr::cost::{compare_report, flops_estimate};
use vidtr::harness::{
    evaluate, gen_moving_dot, gen_static_shape, load_cache, save_cache, train, CombineMode,
    Dataset, Task, ViewSpec,
};
use vidtr::model::{Model, ModelConfig};
use vidtr::rollout::{accumulate, class_slices, combine, render, threshold_top, RolloutMode};
use vidtr::runconfig::RunConfig;
use vidtr::{Error, Result};

#[derive(Parser)]
#[command(
    name = "vidtr",
    version,
    about = "Video transformers with separable space-time attention, on synthetic clips"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset cache (train + test splits).
    GenData {
        /// moving_dot or static_shape.
        #[arg(long)]
        task: String,
        /// Generator seed; defaults to VIDTR_SEED, then 0.
        #[arg(long)]
        seed: Option<u64>,
        /// Total clips; splits 4:1 into train and test.
        #[arg(long, default_value_t = 1000)]
        n: usize,
        /// Cache directory to create.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write checkpoint, metrics and the resolved config.
    Train {
        /// key=value config file; see README for the grammar.
        #[arg(long)]
        config: PathBuf,
        /// Dataset cache directory (from gen-data).
        #[arg(long)]
        data: PathBuf,
        /// Run directory to create.
        #[arg(long)]
        out: PathBuf,
        /// Override one config key, e.g. --set lr=0.003. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Evaluate a checkpoint with multi-view ensembling.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset cache directory.
        #[arg(long)]
        data: PathBuf,
        /// Views as TxS: T temporal samples, S spatial crops (1 or 3).
        #[arg(long, default_value = "1x1")]
        views: String,
        /// How views merge: probs (softmax then average) or logits.
        #[arg(long, default_value = "probs")]
        combine: String,
        /// Which split to score: test or train.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Render attention-rollout heatmaps for one clip.
    Rollout {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset cache directory supplying the clip.
        #[arg(long)]
        data: PathBuf,
        /// Index into the chosen split.
        #[arg(long = "clip-index", default_value_t = 0)]
        clip_index: usize,
        /// Output directory for per-frame PGMs and the mask CSV.
        #[arg(long)]
        out: PathBuf,
        /// Fraction of grid cells to highlight.
        #[arg(long, default_value_t = 0.30)]
        fraction: f64,
        /// Average each affinity with identity before multiplying layers.
        #[arg(long = "residual-adjust")]
        residual_adjust: bool,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Analytic cost report for one or more model configurations.
    Cost {
        /// Preset name (toy, vidtr-s, vidtr-m, vidtr-l, c-vidtr-s,
        /// c-vidtr-m) or a config file path. Repeatable; the first is
        /// the baseline for reduction percentages.
        #[arg(long, required = true)]
        config: Vec<String>,
        /// Also write cost.txt and cost.csv here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { task, seed, n, out } => cmd_gen_data(&task, seed, n, &out),
        Command::Train { config, data, out, set } => cmd_train(&config, &data, &out, &set),
        Command::Eval { checkpoint, data, views, combine, split } => {
            cmd_eval(&checkpoint, &data, &views, &combine, &split)
        }
        Command::Rollout {
            checkpoint,
            data,
            clip_index,
            out,
            fraction,
            residual_adjust,
            split,
        } => cmd_rollout(&checkpoint, &data, clip_index, &out, fraction, residual_adjust, &split),
        Command::Cost { config, out } => cmd_cost(&config, out.as_deref()),
    }
}

/// VIDTR_SEED is the fallback when no flag or config key names a seed.
fn env_seed() -> Result<Option<u64>> {
    match std::env::var("VIDTR_SEED") {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("VIDTR_SEED `{s}` is not an unsigned integer"))),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(Error::Config(format!("VIDTR_SEED: {e}"))),
    }
}

fn parse_sets(sets: &[String]) -> Result<Vec<(String, String)>> {
    sets.iter()
        .map(|s| {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set `{s}` is not key=value")))?;
            Ok((k.trim().to_string(), v.trim().to_string()))
        })
        .collect()
}

fn pick_split<'a>(train: &'a Dataset, test: &'a Dataset, split: &str) -> Result<&'a Dataset> {
    match split {
        "train" => Ok(train),
        "test" => Ok(test),
        other => Err(Error::Config(format!("unknown split `{other}`"))),
    }
}

fn cmd_gen_data(task: &str, seed: Option<u64>, n: usize, out: &Path) -> Result<()> {
    let task = Task::parse(task)?;
    let seed = match seed {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    };
    let (train_set, test_set) = match task {
        Task::MovingDot => gen_moving_dot(seed, n)?,
        Task::StaticShape => gen_static_shape(seed, n)?,
    };
    save_cache(out, &train_set, &test_set)?;
    println!(
        "wrote {} train / {} test {} clips (seed {seed}) to {}",
        train_set.len(),
        test_set.len(),
        task.name(),
        out.display()
    );
    Ok(())
}

fn cmd_train(config: &Path, data: &Path, out: &Path, sets: &[String]) -> Result<()> {
    let text = fs::read_to_string(config)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", config.display())))?;
    let overrides = parse_sets(sets)?;
    let rc = RunConfig::resolve(Some(&text), &overrides, env_seed()?)?;
    let (train_set, test_set) = load_cache(data)?;
    let mut model = Model::build(rc.model.clone(), rc.seed())?;
    fs::create_dir_all(out)?;
    // Echo first so even a diverged run records what it ran.
    fs::write(out.join("config.txt"), rc.resolved())?;
    let report = train(&mut model, &train_set, Some(&test_set), &rc.train, None)?;
    fs::write(out.join("metrics.csv"), &report.metrics_csv)?;
    model.save(out.join("model.ckpt"))?;
    println!(
        "trained {} epochs; final train loss {:.6}",
        report.epochs_run, report.final_train_loss
    );
    if let Some(acc) = report.final_test_accuracy {
        println!("final test accuracy {acc:.4}");
    }
    println!("artifacts in {}", out.display());
    Ok(())
}

fn cmd_eval(checkpoint: &Path, data: &Path, views: &str, combine: &str, split: &str) -> Result<()> {
    let model = Model::load(checkpoint)?;
    let views = ViewSpec::parse(views)?;
    let mode = CombineMode::parse(combine)?;
    let (train_set, test_set) = load_cache(data)?;
    let ds = pick_split(&train_set, &test_set, split)?;
    let report = evaluate(&model, ds, views, mode)?;
    println!("accuracy {:.4}", report.accuracy);
    println!("mean loss {:.6}", report.mean_loss);
    for (class, (c, t)) in report
        .per_class_correct
        .iter()
        .zip(&report.per_class_total)
        .enumerate()
    {
        println!("class {class}: {c}/{t}");
    }
    Ok(())
}

fn cmd_rollout(
    checkpoint: &Path,
    data: &Path,
    clip_index: usize,
    out: &Path,
    fraction: f64,
    residual_adjust: bool,
    split: &str,
) -> Result<()> {
    let model = Model::load(checkpoint)?;
    let (train_set, test_set) = load_cache(data)?;
    let ds = pick_split(&train_set, &test_set, split)?;
    if clip_index >= ds.len() {
        return Err(Error::Invalid {
            op: "rollout",
            msg: format!("clip index {clip_index} out of range ({} clips)", ds.len()),
        });
    }
    let fwd = model.forward(&ds.clips[clip_index])?;
    let mode = if residual_adjust {
        RolloutMode::ResidualAdjusted
    } else {
        RolloutMode::Plain
    };
    let masks = accumulate(&fwd.attention, mode)?;
    let (mask_t, mask_s) = class_slices(&masks)?;
    let joint_mask = combine(&mask_t, &mask_s)?;
    let selected = threshold_top(&joint_mask, fraction)?;
    let geom = model.config().geom();
    render(&joint_mask, &selected, &geom, out)?;
    let logits = fwd.logits.data();
    let predicted = (0..logits.len())
        .max_by(|&a, &b| logits[a].partial_cmp(&logits[b]).unwrap())
        .unwrap_or(0);
    println!(
        "clip {clip_index} (label {}, predicted {predicted}): {} frames, {} of {} cells highlighted",
        ds.labels[clip_index],
        geom.frame_blocks(),
        selected.iter().filter(|&&s| s).count(),
        selected.len(),
    );
    println!("wrote heatmaps and mask.csv to {}", out.display());
    Ok(())
}

/// Each --config is a preset name or a path to a key=value file.
fn cost_config(arg: &str) -> Result<(ModelConfig, String)> {
    if let Ok(cfg) = ModelConfig::preset(arg) {
        return Ok((cfg, arg.to_string()));
    }
    let path = Path::new(arg);
    if !path.exists() {
        return Err(Error::Config(format!(
            "`{arg}` is neither a preset name nor a config file"
        )));
    }
    let text = fs::read_to_string(path)?;
    let rc = RunConfig::resolve(Some(&text), &[], None)?;
    let label = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| arg.to_string());
    Ok((rc.model, label))
}

fn cmd_cost(configs: &[String], out: Option<&Path>) -> Result<()> {
    let mut reports = Vec::new();
    for arg in configs {
        let (cfg, label) = cost_config(arg)?;
        reports.push(flops_estimate(&cfg, &label)?);
    }
    let cmp = compare_report(&reports)?;
    print!("{}", cmp.text);
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("cost.txt"), &cmp.text)?;
        fs::write(dir.join("cost.csv"), &cmp.csv)?;
        println!("wrote cost.txt and cost.csv to {}", dir.display());
    }
    Ok(())
}
