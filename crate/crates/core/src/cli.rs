//! Command-line surface: dataset generation, training, inference,
//! evaluation, gradient checking, and the ablation harness.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::gradcheck;
use crate::iam::FusionMode;
use crate::io::{pfm, ppm, sample, weights_file};
use crate::metrics::{self, EvalReport};
use crate::model::{self, ModelConfig};
use crate::preprocess::{build_input, tone_map};
use crate::synth::{gen_synthetic, SynthConfig};
use crate::training::{self, Dataset, TrainConfig};
use crate::weights::Weights;

#[derive(Parser)]
#[command(
    name = "msanet",
    about = "Multi-scale sampling and aggregation network for multi-exposure HDR fusion",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-exposure dataset.
    GenSynth(GenSynthArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Run the model on one sample directory.
    Infer(InferArgs),
    /// Evaluate a model against ground truth over a dataset.
    Eval(EvalArgs),
    /// Verify reverse-mode gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Train and evaluate an ablation variant.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct GenSynthArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    count: usize,
    /// Square image side, divisible by 4.
    #[arg(long, default_value_t = 32)]
    size: usize,
    /// Maximum foreground translation in pixels.
    #[arg(long, default_value_t = 3)]
    max_shift: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args, Clone)]
struct ModelFlags {
    /// Feature channels C.
    #[arg(long, default_value_t = 16)]
    channels: usize,
    /// Sampled candidates per pixel N (1 = plain warp).
    #[arg(long, default_value_t = 3)]
    samples: usize,
    /// Group wavelet blocks G.
    #[arg(long, default_value_t = 3)]
    groups: usize,
    /// Cross-scale fusion: mask, add or concat.
    #[arg(long, default_value = "mask")]
    fusion: String,
    /// Align at the finest scale only.
    #[arg(long, default_value_t = false)]
    single_scale: bool,
    /// Run the merge blocks in the spatial domain instead of the wavelet
    /// domain.
    #[arg(long, default_value_t = false)]
    no_dwt: bool,
}

impl ModelFlags {
    fn to_config(&self) -> Result<ModelConfig> {
        let config = ModelConfig {
            channels: self.channels,
            num_samples: self.samples,
            num_groups: self.groups,
            fusion_mode: FusionMode::parse(&self.fusion)?,
            multiscale: !self.single_scale,
            use_dwt: !self.no_dwt,
            ..ModelConfig::default()
        };
        config.validate()?;
        Ok(config)
    }
}

#[derive(Args, Clone)]
struct TrainFlags {
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long, default_value_t = 250)]
    epochs: usize,
    /// Hard cap on optimizer steps.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value_t = 2e-4)]
    lr_max: f64,
    #[arg(long, default_value_t = 1e-6)]
    lr_min: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Stop when the running mean loss falls below this.
    #[arg(long)]
    loss_target: Option<f64>,
    /// key=value overrides, one per line (batch, epochs, lr_max, lr_min,
    /// seed, weight_decay, loss_target).
    #[arg(long)]
    config: Option<PathBuf>,
}

impl TrainFlags {
    fn to_config(&self, patch: usize) -> Result<TrainConfig> {
        let mut config = TrainConfig {
            batch_size: self.batch,
            patch,
            lr_max: self.lr_max,
            lr_min: self.lr_min,
            epochs: self.epochs,
            seed: self.seed,
            loss_target: self.loss_target,
            ..TrainConfig::default()
        };
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)?;
            for (lineno, line) in text.lines().enumerate() {
                let line = line.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let (key, value) = line.split_once('=').ok_or_else(|| {
                    Error::Usage(format!(
                        "{}:{}: expected key=value",
                        path.display(),
                        lineno + 1
                    ))
                })?;
                let (key, value) = (key.trim(), value.trim());
                let parse_err = |what: &str| {
                    Error::Usage(format!(
                        "{}:{}: unparseable {what} {value:?}",
                        path.display(),
                        lineno + 1
                    ))
                };
                match key {
                    "batch" => config.batch_size = value.parse().map_err(|_| parse_err(key))?,
                    "epochs" => config.epochs = value.parse().map_err(|_| parse_err(key))?,
                    "lr_max" => config.lr_max = value.parse().map_err(|_| parse_err(key))?,
                    "lr_min" => config.lr_min = value.parse().map_err(|_| parse_err(key))?,
                    "seed" => config.seed = value.parse().map_err(|_| parse_err(key))?,
                    "weight_decay" => {
                        config.weight_decay = value.parse().map_err(|_| parse_err(key))?
                    }
                    "loss_target" => {
                        config.loss_target = Some(value.parse().map_err(|_| parse_err(key))?)
                    }
                    other => {
                        return Err(Error::Usage(format!(
                            "{}:{}: unknown key {other:?}",
                            path.display(),
                            lineno + 1
                        )))
                    }
                }
            }
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory of sample subdirectories.
    #[arg(long)]
    data: PathBuf,
    /// Output weight file path.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    weights: PathBuf,
    /// Sample directory with LDR images and exposures.txt.
    #[arg(long)]
    sample: PathBuf,
    /// Output HDR estimate (PFM).
    #[arg(long)]
    out: PathBuf,
    /// Optional tone-mapped preview (PPM).
    #[arg(long)]
    tonemapped: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Report output path.
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Per-op relative error tolerance; the full model runs at 10x.
    #[arg(long, default_value_t = 1e-3)]
    tol: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct AblateArgs {
    /// Fusion mode under test: mask, add or concat.
    #[arg(long)]
    mode: String,
    #[arg(long)]
    data: PathBuf,
    /// Held-out evaluation directory (defaults to the training data).
    #[arg(long)]
    eval_data: Option<PathBuf>,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    train: TrainFlags,
}

/// Refuse to write onto any of the inputs.
fn ensure_not_input(out: &Path, inputs: &[&Path]) -> Result<()> {
    let canon_out = out.canonicalize().unwrap_or_else(|_| out.to_path_buf());
    for input in inputs {
        let canon_in = input.canonicalize().unwrap_or_else(|_| input.to_path_buf());
        if canon_out == canon_in || canon_out.starts_with(&canon_in) {
            return Err(Error::WouldOverwriteInput(out.to_path_buf()));
        }
    }
    Ok(())
}

fn patch_of_dataset(dataset: &Dataset) -> usize {
    dataset.samples[0].0.images[0].shape().h
}

fn run_training(
    data: &Path,
    model_config: &ModelConfig,
    flags: &TrainFlags,
) -> Result<(Weights<f32>, training::TrainOutcome)> {
    let dataset = Dataset::load(data)?;
    let config = flags.to_config(patch_of_dataset(&dataset))?;
    let step_cap = flags.steps;
    let mut last_print = std::time::Instant::now();
    let outcome = training::train(&dataset, model_config, &config, |step, loss, _| {
        if last_print.elapsed().as_secs() >= 5 {
            eprintln!("step {step}: loss {loss:.5}");
            last_print = std::time::Instant::now();
        }
        step_cap.map_or(true, |cap| step + 1 < cap)
    })?;
    let mut weights = outcome.weights.clone();
    model::attach_meta(&mut weights, model_config)?;
    Ok((weights, outcome))
}

fn evaluate_dataset(weights: &Weights<f32>, config: &ModelConfig, data: &Path) -> Result<EvalReport> {
    let mut report = EvalReport::default();
    for dir in sample::list_samples(data)? {
        let (stack, gt) = sample::read_sample(&dir)?;
        let input = build_input(&stack, config.gamma)?;
        let pred = model::infer(weights, &input, config)?;
        let scores = metrics::evaluate_pair(&pred, &gt.map(|v| v.min(1.0)), config.mu)?;
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        report.push(name, scores);
    }
    Ok(report)
}

fn load_model(path: &Path) -> Result<(Weights<f32>, ModelConfig)> {
    let weights = weights_file::load_weights(path)?;
    let config = model::config_from_meta(&weights).ok_or_else(|| {
        Error::Structure(format!(
            "{} carries no model configuration entry",
            path.display()
        ))
    })?;
    Ok((weights, config))
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenSynth(args) => {
            let config = SynthConfig {
                count: args.count,
                size: args.size,
                max_shift: args.max_shift,
                seed: args.seed,
            };
            gen_synthetic(&args.out, &config)?;
            println!(
                "wrote {} samples of {}x{} to {}",
                args.count,
                args.size,
                args.size,
                args.out.display()
            );
        }
        Command::Train(args) => {
            ensure_not_input(&args.out, &[&args.data])?;
            let model_config = args.model.to_config()?;
            let (weights, outcome) = run_training(&args.data, &model_config, &args.train)?;
            weights_file::save_weights(&args.out, &weights)?;
            let sidecar = args.out.with_extension("train.txt");
            std::fs::write(
                &sidecar,
                format!(
                    "steps={}\nfinal_loss={:.6}\nlr={:.3e}\nseed={}\n",
                    outcome.steps,
                    outcome.losses.last().copied().unwrap_or(f32::NAN),
                    outcome.final_lr,
                    args.train.seed,
                ),
            )?;
            println!(
                "trained {} steps, final loss {:.5}, weights at {}",
                outcome.steps,
                outcome.losses.last().copied().unwrap_or(f32::NAN),
                args.out.display()
            );
        }
        Command::Infer(args) => {
            ensure_not_input(&args.out, &[&args.sample, &args.weights])?;
            let (weights, config) = load_model(&args.weights)?;
            let (stack, _) = sample::read_sample(&args.sample)?;
            let input = build_input(&stack, config.gamma)?;
            let pred = model::infer(&weights, &input, &config)?;
            pfm::write_pfm(&args.out, &pred)?;
            if let Some(preview) = &args.tonemapped {
                ensure_not_input(preview, &[&args.sample, &args.weights])?;
                ppm::write_ppm(preview, &tone_map(&pred, config.mu)?)?;
            }
            println!("wrote {}", args.out.display());
        }
        Command::Eval(args) => {
            ensure_not_input(&args.report, &[&args.data, &args.weights])?;
            let (weights, config) = load_model(&args.weights)?;
            let report = evaluate_dataset(&weights, &config, &args.data)?;
            std::fs::write(&args.report, report.to_text())?;
            let mean = report.mean();
            println!(
                "mean psnr_mu={:.4} psnr_l={:.4} ssim_mu={:.6} ssim_l={:.6}",
                mean.psnr_mu, mean.psnr_l, mean.ssim_mu, mean.ssim_l
            );
        }
        Command::Gradcheck(args) => {
            let results = gradcheck::run_suite(args.seed, args.tol)?;
            let mut failed = 0;
            for r in &results {
                println!("{r}");
                if !r.pass() {
                    failed += 1;
                }
            }
            if failed > 0 {
                return Err(Error::Invariant(format!(
                    "{failed} of {} gradient checks failed",
                    results.len()
                )));
            }
            println!("all {} gradient checks passed", results.len());
        }
        Command::Ablate(args) => {
            let model_config = ModelConfig {
                fusion_mode: FusionMode::parse(&args.mode)?,
                ..args.model.to_config()?
            };
            let (weights, outcome) = run_training(&args.data, &model_config, &args.train)?;
            let eval_dir = args.eval_data.as_ref().unwrap_or(&args.data);
            let report = evaluate_dataset(&weights, &model_config, eval_dir)?;
            let mean = report.mean();
            println!(
                "mode={} multiscale={} dwt={} steps={} psnr_mu={:.4} ssim_mu={:.6}",
                model_config.fusion_mode.name(),
                model_config.multiscale,
                model_config.use_dwt,
                outcome.steps,
                mean.psnr_mu,
                mean.ssim_mu
            );
        }
    }
    Ok(())
}

/// Entry point: returns the process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(err) => {
            // clap prints help/version on stdout with code 0, usage errors
            // on stderr with code 2.
            let _ = err.print();
            return err.exit_code();
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err}");
            1
        }
    }
}
