//! Command-line front end: `train`, `generate`, `mix` and `eval`.

pub mod config;
pub mod error;
pub mod extractor;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use candle_core::Device;
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scmis::checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint};
use scmis::dataio::{
    load_dataset, read_depth_native, read_label, read_label_native, read_rgb_native, sample_noise, write_depth,
    write_rgb, Split,
};
use scmis::losses::class_weights;
use scmis::metrics::{fid, miou, ConfusionMatrix, DepthAccumulator};
use scmis::mixer::{mix_dataset, MixSpec, Modality};
use scmis::trainer::{ClassWeightMode, LossLog, Trainer};

use crate::config::{DiscInit, RunConfig};
use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "scmis", version, about = "Semantic RGB-D image synthesis")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a generator/discriminator pair.
    Train(TrainArgs),
    /// Generate an RGB image and depth map from a label map.
    Generate(GenerateArgs),
    /// Build a mixed real/generated copy of a dataset.
    Mix(MixArgs),
    /// Evaluate generated or predicted data.
    #[command(subcommand)]
    Eval(EvalCommand),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Continue from a checkpoint; its stored configuration is used, except
    /// for `train.max_steps`.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set train.batch_size=4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Write the merged configuration to this file and exit.
    #[arg(long, value_name = "FILE")]
    pub dump_config: Option<PathBuf>,
    /// Also write every step's loss components to this CSV file.
    #[arg(long, value_name = "FILE")]
    pub dump_loss_breakdown: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Label PNG (8-bit, 255 = void); resized to the model's resolution.
    #[arg(long)]
    pub label: PathBuf,
    /// Noise seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory for `rgb.png` and `depth.png`.
    #[arg(long)]
    pub out: PathBuf,
    /// Use the raw generator weights instead of the moving average.
    #[arg(long)]
    pub live: bool,
}

#[derive(Debug, Args)]
pub struct MixArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Dataset root in the training layout.
    #[arg(long)]
    pub data: PathBuf,
    /// Fraction of the classes present in each image to replace.
    #[arg(long)]
    pub ratio: f64,
    /// rgb, depth or rgbd.
    #[arg(long)]
    pub modality: Modality,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Subcommand)]
pub enum EvalCommand {
    /// Fréchet distance between the feature statistics of two image sets.
    Fid {
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        fake: PathBuf,
        /// Extractor weights; defaults to `$SCMIS_CACHE/fid_extractor.json`.
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// AbsRel, RMSE and SqRel between depth PNGs with matching names.
    Depth {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value_t = 10.0)]
        max_depth: f32,
    },
    /// Mean IoU between label PNGs with matching names.
    Miou {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        classes: usize,
    },
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn dispatch(command: Command) -> CliResult<()> {
    match command {
        Command::Train(args) => train(args),
        Command::Generate(args) => generate(args),
        Command::Mix(args) => mix(args),
        Command::Eval(EvalCommand::Fid { real, fake, weights }) => eval_fid(&real, &fake, weights.as_deref()),
        Command::Eval(EvalCommand::Depth { pred, gt, max_depth }) => eval_depth(&pred, &gt, max_depth),
        Command::Eval(EvalCommand::Miou { pred, gt, classes }) => eval_miou(&pred, &gt, classes),
    }
}

fn train(args: TrainArgs) -> CliResult<()> {
    let cfg = RunConfig::load(args.config.as_deref(), &args.overrides)?;
    if let Some(path) = &args.dump_config {
        write_file(path, cfg.to_toml()?.as_bytes())?;
        return Ok(());
    }
    let root = cfg.data_root()?;
    let device = Device::Cpu;
    let mut trainer = match &args.resume {
        Some(ckpt) => {
            let mut t = load_checkpoint(ckpt, &device)?;
            t.set_max_steps(cfg.train.max_steps);
            log::info!("resumed {} at step {}", ckpt.display(), t.step());
            t
        }
        None => {
            let t = Trainer::new(cfg.trainer_config(), &device)?;
            if cfg.disc.init == DiscInit::Pretrained {
                let weights = cfg.disc.weights.as_deref().expect("validated");
                let n = read_checkpoint(weights)?.load_backbone(&t)?;
                log::info!("initialized {n} backbone arrays from {}", weights.display());
            }
            t
        }
    };
    let tcfg = trainer.config().clone();
    let data = load_dataset(root, Split::Train, tcfg.generator.num_classes)?;
    if tcfg.loss.class_weights == ClassWeightMode::Dataset {
        let labels = (0..data.len())
            .map(|i| data.load(i, tcfg.generator.image_size, tcfg.max_depth_m).map(|s| s.label))
            .collect::<scmis::Result<Vec<_>>>()?;
        trainer.set_global_class_weights(Some(class_weights(&labels)?));
    }

    let out_dir = &cfg.train.out_dir;
    std::fs::create_dir_all(out_dir).map_err(|e| CliError::Failed(format!("{}: {e}", out_dir.display())))?;
    let jsonl = out_dir.join("losses.jsonl");
    let csv = args.dump_loss_breakdown.as_deref();
    let mut log = if args.resume.is_some() {
        LossLog::append(Some(&jsonl), csv)?
    } else {
        LossLog::create(Some(&jsonl), csv)?
    };
    let every = tcfg.train.ckpt_every;
    log::info!("training on {} samples up to step {}", data.len(), tcfg.train.max_steps);
    trainer.run(&data, |t, stats| {
        log.record(stats)?;
        let done = t.step();
        if every > 0 && done % every == 0 {
            save_checkpoint(t, &out_dir.join(format!("step_{done:08}.ckpt")))?;
            log.flush()?;
        }
        if done % 50 == 0 {
            log::info!("step {done}: loss_g {:.4} loss_d {:.4}", stats.loss_g, stats.loss_d);
        }
        Ok(true)
    })?;
    log.flush()?;
    save_checkpoint(&trainer, &out_dir.join("last.ckpt"))?;
    Ok(())
}

fn generate(args: GenerateArgs) -> CliResult<()> {
    let trainer = load_checkpoint(&args.ckpt, &Device::Cpu)?;
    let generator = if args.live { trainer.generator() } else { trainer.ema() };
    let cfg = generator.config();
    let (h, w) = cfg.image_size;
    let label = read_label(&args.label, h, w, cfg.num_classes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let noise = sample_noise(&mut rng, cfg.noise_channels, h, w, generator.dtype(), generator.device())?;
    let pair = generator.generate(&label, &noise, trainer.config().max_depth_m)?;
    write_rgb(&args.out.join("rgb.png"), &pair.rgb)?;
    write_depth(&args.out.join("depth.png"), &pair.depth)?;
    Ok(())
}

fn mix(args: MixArgs) -> CliResult<()> {
    let spec = MixSpec {
        ratio: args.ratio,
        modality: args.modality,
        seed: args.seed,
    };
    spec.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let trainer = load_checkpoint(&args.ckpt, &Device::Cpu)?;
    let cfg = trainer.config();
    let data = load_dataset(&args.data, Split::Train, cfg.generator.num_classes)?;
    let manifest = mix_dataset(&data, trainer.ema(), &spec, cfg.max_depth_m, &args.out)?;
    for f in &manifest.failures {
        eprintln!("failed {}: {}", f.name, f.error);
    }
    if !manifest.failures.is_empty() {
        return Err(CliError::Failed(format!(
            "{} of {} samples failed",
            manifest.failures.len(),
            manifest.failures.len() + manifest.samples.len()
        )));
    }
    Ok(())
}

fn eval_fid(real: &Path, fake: &Path, weights: Option<&Path>) -> CliResult<()> {
    let loaded = extractor::load(&extractor::resolve(weights)?)?;
    let read = |dir: &Path| -> CliResult<Vec<_>> {
        png_files(dir)?
            .iter()
            .map(|p| read_rgb_native(p).map_err(CliError::from))
            .collect()
    };
    let (real_imgs, fake_imgs) = (read(real)?, read(fake)?);
    let value = fid(&real_imgs, &fake_imgs, loaded.extractor.as_ref())?;
    print_json(&serde_json::json!({
        "fid": value,
        "real": real_imgs.len(),
        "fake": fake_imgs.len(),
        "weights": loaded.path,
        "weights_sha256": loaded.sha256,
    }))
}

fn eval_depth(pred: &Path, gt: &Path, max_depth: f32) -> CliResult<()> {
    if !(max_depth > 0.0) {
        return Err(CliError::Config(format!("--max-depth must be positive, got {max_depth}")));
    }
    let mut acc = DepthAccumulator::default();
    let pairs = paired_files(pred, gt)?;
    for (p, g) in &pairs {
        acc.add(&read_depth_native(p, max_depth)?, &read_depth_native(g, max_depth)?)?;
    }
    let m = acc.finish()?;
    print_json(&serde_json::json!({
        "abs_rel": m.abs_rel,
        "rmse": m.rmse,
        "sq_rel": m.sq_rel,
        "images": pairs.len(),
    }))
}

fn eval_miou(pred: &Path, gt: &Path, classes: usize) -> CliResult<()> {
    if classes == 0 || classes > 255 {
        return Err(CliError::Config(format!("--classes must be in 1..=255, got {classes}")));
    }
    let mut conf = ConfusionMatrix::new(classes);
    let pairs = paired_files(pred, gt)?;
    for (p, g) in &pairs {
        conf.add(&read_label_native(g, classes)?, &read_label_native(p, classes)?)?;
    }
    print_json(&serde_json::json!({
        "miou": miou(&conf)?,
        "iou": conf.iou(),
        "images": pairs.len(),
    }))
}

fn print_json(v: &serde_json::Value) -> CliResult<()> {
    println!("{}", serde_json::to_string_pretty(v).expect("json values serialize"));
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Failed(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))
}

/// Sorted PNG files of a directory.
fn png_files(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::Config(format!("{}: {e}", dir.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::Config(format!("no PNG files in {}", dir.display())));
    }
    Ok(files)
}

/// Pairs every prediction with the ground-truth file of the same name.
fn paired_files(pred: &Path, gt: &Path) -> CliResult<Vec<(PathBuf, PathBuf)>> {
    png_files(pred)?
        .into_iter()
        .map(|p| {
            let g = gt.join(p.file_name().expect("listed files have names"));
            if g.is_file() {
                Ok((p, g))
            } else {
                Err(CliError::Config(format!("no ground truth {} for {}", g.display(), p.display())))
            }
        })
        .collect()
}
