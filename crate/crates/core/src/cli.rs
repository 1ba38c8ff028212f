//! Command-line interface: `train`, `sample`, `mask`, `ablate`, `eval`, `export-data`.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure,
//! 1 anything else (I/O, internal).

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::experiment::{
    condition_leakage, load_training_data, probe_accuracy, smoothed, train_model, vocab_for,
};
use crate::marloop::{generate, Conditions, GenerateOptions};
use crate::raster::Image;
use crate::seqmask::{
    ablation_policy, build_attention_mask, dump_mask, reachability, AttentionPolicy, SegmentLayout,
};
use crate::synthdata::{export_dataset, make_dataset, Jitter};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "selfctl", version, about = "Masked autoregressive generation with self-control attention")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model from a TOML run config.
    Train(TrainArgs),
    /// Generate images from a checkpoint.
    Sample(SampleArgs),
    /// Print the attention mask of a layout under a policy.
    Mask(MaskArgs),
    /// Train every ablation option and tabulate loss, probe accuracy and leakage.
    Ablate(AblateArgs),
    /// Score a checkpoint's generations with the shape/color probe.
    Eval(EvalArgs),
    /// Write the synthetic dataset to a directory.
    ExportData(ExportArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    pub config: PathBuf,
    /// Override `train.steps`.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Override `paths.out_dir`.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub text: Option<String>,
    /// PNG condition image; omitted means the null image condition.
    #[arg(long)]
    pub cond_image: Option<PathBuf>,
    /// Number of generation steps.
    #[arg(long, default_value_t = 8)]
    pub k: usize,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    #[arg(long, default_value_t = 1.0)]
    pub guidance: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Write an n×n grid of samples instead of a single image.
    #[arg(long)]
    pub grid: Option<usize>,
}

#[derive(Debug, Args)]
pub struct MaskArgs {
    /// Segment lengths `text,imgcond,gen`.
    #[arg(long)]
    pub layout: SegmentLayout,
    /// Modes `text,imgcond,gen,cross`, each causal or bidirectional.
    #[arg(long, conflicts_with = "option", required_unless_present = "option")]
    pub policy: Option<AttentionPolicy>,
    /// Ablation option 1..=8.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=8))]
    pub option: Option<u8>,
    /// Also print the depth-d reachability matrix.
    #[arg(long)]
    pub reach: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    pub config: PathBuf,
    /// Override `train.steps`.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Override `eval.samples`.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Restrict to these options (comma separated); default all eight.
    #[arg(long, value_delimiter = ',', value_parser = clap::value_parser!(u8).range(1..=8))]
    pub options: Vec<u8>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub samples: usize,
    #[arg(long, default_value_t = 8)]
    pub k: usize,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    #[arg(long, default_value_t = 1.0)]
    pub guidance: f64,
    #[arg(long, default_value_t = 1234)]
    pub seed: u64,
    /// Also score the same checkpoint with both conditions nulled.
    #[arg(long)]
    pub with_null: bool,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 900)]
    pub size: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

/// Exit code for a failed command.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::NonFinite(_) => EXIT_NUMERICAL,
        Error::InvalidLayout(_)
        | Error::InvalidPolicy(_)
        | Error::InvalidArgument(_)
        | Error::Shape(_)
        | Error::Config(_)
        | Error::Path { .. }
        | Error::Checkpoint(_) => EXIT_USAGE,
        _ => EXIT_FAILURE,
    }
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let mut stdout = std::io::stdout().lock();
    match run(cli.command, &mut stdout) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::Train(a) => cmd_train(&a, out),
        Command::Sample(a) => cmd_sample(&a, out),
        Command::Mask(a) => cmd_mask(&a, out),
        Command::Ablate(a) => cmd_ablate(&a, out),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::ExportData(a) => cmd_export(&a, out),
    }
}

fn load_config(path: &Path, steps: Option<usize>) -> Result<RunConfig> {
    if !path.is_file() {
        return Err(Error::path(path, "config file not found"));
    }
    let mut cfg = RunConfig::load(path)?;
    if let Some(steps) = steps {
        cfg.train.steps = steps;
        cfg.validate()?;
    }
    Ok(cfg)
}

fn cmd_train(args: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg = load_config(&args.config, args.steps)?;
    if let Some(dir) = &args.out_dir {
        cfg.paths.out_dir = dir.clone();
    }
    let dir = cfg.paths.out_dir.clone();
    fs::create_dir_all(&dir).map_err(|e| Error::path(&dir, e))?;
    fs::write(dir.join("config.toml"), cfg.to_toml()?).map_err(|e| Error::path(&dir, e))?;

    let samples = load_training_data(&cfg)?;
    vocab_for(&samples).save(&dir.join("vocab.txt"))?;

    let log_path = dir.join("metrics.log");
    let mut log = BufWriter::new(fs::File::create(&log_path).map_err(|e| Error::path(&log_path, e))?);
    let (log_every, ckpt_every) = (cfg.train.log_every, cfg.train.checkpoint_every);
    let (model, losses) = train_model(&cfg, &samples, None, |step, loss, model| {
        writeln!(log, "step={step} loss={loss}")?;
        if log_every > 0 && step % log_every == 0 {
            log.flush()?;
        }
        if ckpt_every > 0 && step % ckpt_every == 0 {
            checkpoint::save(model, step, &dir.join(format!("checkpoint_{step:06}.ckpt")))?;
        }
        Ok(())
    })?;
    log.flush()?;
    let final_path = dir.join("model.ckpt");
    checkpoint::save(&model, losses.len(), &final_path)?;
    let smooth = smoothed(&losses, cfg.train.smoothing_window);
    writeln!(
        out,
        "trained {} steps; smoothed loss {:.6}; checkpoint {}",
        losses.len(),
        smooth.last().copied().unwrap_or(f64::NAN),
        final_path.display()
    )?;
    Ok(())
}

fn cmd_sample(args: &SampleArgs, out: &mut dyn Write) -> Result<()> {
    let (model, _) = checkpoint::load(&args.checkpoint)?;
    let spec = model.config().image.clone();
    let cond_image = match &args.cond_image {
        Some(path) => {
            if spec.cond_channels == 0 {
                return Err(Error::Config("model has no image-condition segment".into()));
            }
            let img = Image::load_png(path, spec.cond_channels)?;
            if (img.height, img.width) != (spec.height, spec.width) {
                return Err(Error::path(
                    path,
                    format!(
                        "condition image is {}x{}, checkpoint expects {}x{}",
                        img.height, img.width, spec.height, spec.width
                    ),
                ));
            }
            Some(img)
        }
        None => None,
    };
    let count = match args.grid {
        Some(0) => return Err(Error::InvalidArgument("--grid must be at least 1".into())),
        Some(n) => n * n,
        None => 1,
    };
    let opts = GenerateOptions {
        steps: args.k,
        temperature: args.temperature,
        guidance_scale: args.guidance,
    };
    let request = Conditions::new(args.text.as_deref(), cond_image);
    let requests = vec![request; count];
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let images = generate(&model, &requests, &opts, &mut rng)?;
    let image = match args.grid {
        Some(n) => Image::tile(&images, n)?,
        None => images.into_iter().next().expect("one image requested"),
    };
    image.save_png(&args.out)?;
    writeln!(out, "wrote {}", args.out.display())?;
    Ok(())
}

fn cmd_mask(args: &MaskArgs, out: &mut dyn Write) -> Result<()> {
    let policy = match (args.policy, args.option) {
        (Some(p), _) => p,
        (None, Some(o)) => ablation_policy(o)?,
        (None, None) => return Err(Error::InvalidArgument("pass --policy or --option".into())),
    };
    let mask = build_attention_mask(&args.layout, &policy);
    write!(out, "{}", dump_mask(&args.layout, &policy, &mask))?;
    if let Some(depth) = args.reach {
        let reach = reachability(&mask, depth)?;
        writeln!(out, "reach depth={depth}")?;
        for row in reach.dump_rows() {
            writeln!(out, "{row}")?;
        }
    }
    Ok(())
}

/// One row of the ablation table.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub option: u8,
    pub policy: AttentionPolicy,
    pub outcome: std::result::Result<AblationMetrics, String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AblationMetrics {
    pub smoothed_loss: f64,
    pub probe_accuracy: f64,
    pub leakage: f64,
}

fn ablate_one(cfg: &RunConfig, samples: &[crate::synthdata::Sample], policy: AttentionPolicy) -> Result<AblationMetrics> {
    let (model, losses) = train_model(cfg, samples, Some(policy), |_, _, _| Ok(()))?;
    let smooth = smoothed(&losses, cfg.train.smoothing_window);
    let probe = probe_accuracy(&model, cfg.eval.samples, &cfg.eval.generate_options(), cfg.eval.seed, false)?;
    let leakage = condition_leakage(&model, &samples[0], 4, cfg.eval.seed)?;
    Ok(AblationMetrics {
        smoothed_loss: smooth.last().copied().unwrap_or(f64::NAN),
        probe_accuracy: probe.accuracy(),
        leakage,
    })
}

/// Trains each requested option with the config's seed and budget.
pub fn run_ablation(cfg: &RunConfig, options: &[u8]) -> Result<Vec<AblationRow>> {
    let samples = load_training_data(cfg)?;
    if samples.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    options
        .iter()
        .map(|&option| {
            let policy = ablation_policy(option)?;
            let outcome = ablate_one(cfg, &samples, policy).map_err(|e| e.to_string());
            Ok(AblationRow { option, policy, outcome })
        })
        .collect()
}

pub fn format_ablation(rows: &[AblationRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<6} {:<13} {:<13} {:<13} {:<13} {:>12} {:>10} {:>10}",
        "option", "text", "imgcond", "gen", "cross", "loss", "probe_acc", "leakage"
    );
    for row in rows {
        let p = &row.policy;
        let _ = write!(
            s,
            "{:<6} {:<13} {:<13} {:<13} {:<13} ",
            row.option,
            p.text_mode.as_str(),
            p.imgcond_mode.as_str(),
            p.gen_mode.as_str(),
            p.cross_mode.as_str()
        );
        let _ = match &row.outcome {
            Ok(m) => writeln!(s, "{:>12.6} {:>10.3} {:>10.3e}", m.smoothed_loss, m.probe_accuracy, m.leakage),
            Err(msg) => writeln!(s, "FAILED: {msg}"),
        };
    }
    let _ = writeln!(
        s,
        "\nloss: final moving-average training loss. probe_acc: fraction of generated\n\
         samples whose color and shape match the requested class. leakage: max |gradient|\n\
         of condition-position outputs w.r.t. generated-token inputs.\n\
         FID and IS are not reported: image-quality reference values do not exist at\n\
         this scale, so those columns are omitted."
    );
    s
}

fn cmd_ablate(args: &AblateArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg = load_config(&args.config, args.steps)?;
    if let Some(n) = args.samples {
        cfg.eval.samples = n;
    }
    let options: Vec<u8> = if args.options.is_empty() { (1..=8).collect() } else { args.options.clone() };
    let rows = run_ablation(&cfg, &options)?;
    let table = format_ablation(&rows);
    fs::create_dir_all(&cfg.paths.out_dir).map_err(|e| Error::path(&cfg.paths.out_dir, e))?;
    let path = cfg.paths.out_dir.join("ablation.txt");
    fs::write(&path, &table).map_err(|e| Error::path(&path, e))?;
    write!(out, "{table}")?;
    Ok(())
}

fn cmd_eval(args: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let (model, step) = checkpoint::load(&args.checkpoint)?;
    let opts = GenerateOptions {
        steps: args.k,
        temperature: args.temperature,
        guidance_scale: args.guidance,
    };
    let cond = probe_accuracy(&model, args.samples, &opts, args.seed, false)?;
    writeln!(out, "step={step} conditional_accuracy={:.4} ({}/{})", cond.accuracy(), cond.hits, cond.total)?;
    if args.with_null {
        let null = probe_accuracy(&model, args.samples, &opts, args.seed, true)?;
        writeln!(out, "step={step} null_accuracy={:.4} ({}/{})", null.accuracy(), null.hits, null.total)?;
    }
    Ok(())
}

fn cmd_export(args: &ExportArgs, out: &mut dyn Write) -> Result<()> {
    let samples = make_dataset(args.size, args.seed, Jitter::default())?;
    export_dataset(&args.out, &samples)?;
    writeln!(out, "wrote {} samples to {}", samples.len(), args.out.display())?;
    Ok(())
}
