//! Command-line front end. [`run`] parses arguments and dispatches; it never
//! exits the process, so it can be driven from tests.

mod pgm;
mod synth;

pub use pgm::{encode_pgm, mask_image, spectrogram_image, write_pgm};
pub use synth::{default_recipes, gen_synthetic, synth_clip, ClassRecipe, SyntheticSpec};

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::Config;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::finetune::{evaluate, finetune_loop, Classifier, ClassifierHead, FinetuneConfig, FinetuneOutcome};
use crate::maskgen::{build_mask_plan_with, GridShape, MaskMode};
use crate::model::{Checkpoint, Encoder};
use crate::pretrain::{pretrain_loop, LoopOutput, TrainState, STATE_FILE};
use crate::seed;
use crate::spectro::{read_wav, MelFrontend};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

pub const SUBCOMMANDS: [&str; 7] = ["pretrain", "finetune", "eval", "probe", "masks", "gen-data", "dump-spec"];

pub const CLASSIFIER_FILE: &str = "classifier.bin";
pub const CONFIG_FILE: &str = "config.txt";

#[derive(Debug, Parser)]
#[command(name = "ajepa", about = "Joint-embedding predictive pretraining for audio spectrograms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// `key = value` configuration file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Self-supervised pretraining on every .wav under --data.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
        /// Continue from the checkpoint in --out.
        #[arg(long)]
        resume: bool,
        /// Stop after this many total steps.
        #[arg(long)]
        max_steps: Option<u64>,
    },
    /// Fine-tune encoder and head on the training split.
    Finetune {
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint holding an `encoder` (pretraining or fine-tuning output).
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
        /// Train only the head.
        #[arg(long)]
        freeze_encoder: bool,
        /// Regularized-masking ratio; overrides the config.
        #[arg(long)]
        rm_ratio: Option<f64>,
        #[arg(long)]
        epochs: Option<u64>,
    },
    /// Linear probe on frozen features; random encoder without --init.
    Probe {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Accuracy and mAP of a fine-tuned classifier.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        common: Common,
        /// Which clips to score: eval, train or all.
        #[arg(long, default_value = "eval")]
        split: String,
    },
    /// Sample one mask plan and draw it.
    Masks {
        #[arg(long, default_value = "8x8")]
        grid: GridShape,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        step: u64,
        #[arg(long, default_value_t = 2000)]
        total_steps: u64,
        /// Force `block` or `tf` instead of drawing from the curriculum.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "masks.pgm")]
        out: PathBuf,
    },
    /// Write a synthetic labeled dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 50)]
        clips_per_class: usize,
        #[arg(long, default_value_t = 2.0)]
        duration: f64,
        /// White-noise level in dB relative to full scale.
        #[arg(long, default_value_t = -30.0, allow_negative_numbers = true)]
        noise_db: f64,
        #[arg(long, conflicts_with = "noise_db")]
        no_noise: bool,
        #[arg(long)]
        multi_label: bool,
    },
    /// Draw the log-Mel spectrogram of a WAV file as a PGM image.
    DumpSpec {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

/// Parses `argv` (program name first) and runs the command. Returns the
/// process exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            if e.kind() == clap::error::ErrorKind::InvalidSubcommand {
                eprintln!("available subcommands: {}", SUBCOMMANDS.join(", "));
            }
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    match path {
        Some(p) => Config::load(p),
        None => Ok(Config::default()),
    }
}

fn save_config(cfg: &Config, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join(CONFIG_FILE);
    std::fs::write(&path, cfg.to_text()).map_err(|e| Error::io(&path, e))
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Pretrain {
            data,
            out,
            common,
            resume,
            max_steps,
        } => cmd_pretrain(&data, &out, &common, resume, max_steps),
        Command::Finetune {
            data,
            init,
            out,
            common,
            freeze_encoder,
            rm_ratio,
            epochs,
        } => {
            let cfg = load_config(common.config.as_deref())?;
            let mut ft = cfg.finetune.clone();
            ft.freeze_encoder = freeze_encoder;
            if let Some(r) = rm_ratio {
                ft.rm.ratio = r;
            }
            if let Some(e) = epochs {
                ft.epochs = e;
            }
            let outcome = train_classifier(&cfg, &ft, &data, Some(&init), &out, common.seed)?;
            report_last(&outcome, "finetune");
            Ok(())
        }
        Command::Probe {
            data,
            init,
            out,
            common,
        } => {
            let cfg = load_config(common.config.as_deref())?;
            let outcome = train_classifier(&cfg, &cfg.probe, &data, init.as_deref(), &out, common.seed)?;
            report_last(&outcome, "probe");
            Ok(())
        }
        Command::Eval {
            data,
            ckpt,
            common,
            split,
        } => cmd_eval(&data, &ckpt, &common, &split),
        Command::Masks {
            grid,
            seed: seed_value,
            step,
            total_steps,
            mode,
            config,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let mut sched = cfg.pretrain.curriculum.clone();
            sched.total_steps = total_steps;
            sched.validate()?;
            let forced = match mode.as_deref() {
                None => None,
                Some("block") => Some(MaskMode::Block),
                Some("tf") => Some(MaskMode::TimeFrequency),
                Some(other) => return Err(Error::Config(format!("unknown mask mode `{other}`"))),
            };
            let mut rng = seed::stream(seed_value, "masks", step);
            let plan = build_mask_plan_with(grid, &cfg.pretrain.sampler, forced, step, &sched, &mut rng)?;
            print!("{}", plan.to_text());
            write_pgm(&out, &mask_image(&plan, 8))
        }
        Command::GenData {
            out,
            seed: seed_value,
            classes,
            clips_per_class,
            duration,
            noise_db,
            no_noise,
            multi_label,
        } => {
            let mut spec = SyntheticSpec::new(classes, clips_per_class, seed_value);
            spec.duration_s = duration;
            spec.noise_db = (!no_noise).then_some(noise_db);
            spec.multi_label = multi_label;
            let n = gen_synthetic(&spec, &out)?;
            println!("wrote {n} clips to {}", out.display());
            Ok(())
        }
        Command::DumpSpec { input, out, config } => {
            let cfg = load_config(config.as_deref())?;
            let frontend = MelFrontend::new(&cfg.pretrain.frontend)?;
            let frames = frontend.log_mel_frames(&read_wav(&input)?)?;
            write_pgm(&out, &spectrogram_image(&frames))
        }
    }
}

fn cmd_pretrain(data: &Path, out: &Path, common: &Common, resume: bool, max_steps: Option<u64>) -> Result<()> {
    let cfg = load_config(common.config.as_deref())?;
    let settings = &cfg.pretrain;
    let frontend = MelFrontend::new(&settings.frontend)?;
    let dataset = Dataset::load_unlabeled(data, &frontend)?;
    if dataset.is_empty() {
        return Err(Error::EmptyInput("no .wav files in the data directory"));
    }
    let mut state = if resume && out.join(STATE_FILE).exists() {
        let s = TrainState::load(settings, out)?;
        if s.seed != common.seed {
            return Err(Error::Config(format!(
                "checkpoint was trained with seed {}, not {}",
                s.seed, common.seed
            )));
        }
        s
    } else {
        TrainState::new(settings, common.seed)?
    };
    save_config(&cfg, out)?;
    let per_epoch = (dataset.len() / settings.optim.batch_size).max(1) as u64;
    let (epochs, cap) = if cfg.epochs == 0 {
        (settings.optim.total_steps.div_ceil(per_epoch), settings.optim.total_steps)
    } else {
        (cfg.epochs, u64::MAX)
    };
    let cap = max_steps.map_or(cap, |m| m.min(cap));
    let records = pretrain_loop(
        &mut state,
        &dataset,
        settings,
        epochs,
        &LoopOutput {
            dir: Some(out.to_path_buf()),
            max_steps: Some(cap),
        },
    )?;
    match records.last() {
        Some(r) => println!("pretrain: {} steps, final step {} loss {:.6}", records.len(), r.step, r.loss),
        None => println!("pretrain: nothing to do at step {}", state.step),
    }
    Ok(())
}

fn load_encoder(cfg: &Config, grid: GridShape, init: Option<&Path>, seed_value: u64) -> Result<Encoder<f32>> {
    let mut encoder = Encoder::new(&cfg.pretrain.model, grid, &mut seed::stream(seed_value, "init", 0))?;
    if let Some(path) = init {
        Checkpoint::load(path)?.load_store("encoder", &mut encoder.params)?;
    }
    Ok(encoder)
}

fn train_classifier(
    cfg: &Config,
    ft: &FinetuneConfig,
    data: &Path,
    init: Option<&Path>,
    out: &Path,
    seed_value: u64,
) -> Result<FinetuneOutcome> {
    let fe = &cfg.pretrain.frontend;
    let dataset = Dataset::load_labeled(data, &MelFrontend::new(fe)?)?;
    let (train, eval) = dataset.split(cfg.eval_fraction, seed_value);
    let (rows, cols) = fe.grid();
    let encoder = load_encoder(cfg, GridShape::new(rows, cols), init, seed_value)?;
    save_config(cfg, out)?;
    let outcome = finetune_loop(encoder, &train, &eval, fe, ft, seed_value, Some(out))?;
    outcome.model.to_checkpoint().save(&out.join(CLASSIFIER_FILE))?;
    Ok(outcome)
}

fn report_last(outcome: &FinetuneOutcome, what: &str) {
    if let Some(r) = outcome.records.last() {
        println!(
            "{what}: epoch {} train_loss {:.6} eval_accuracy {:.4} eval_map {:.4}",
            r.epoch, r.train_loss, r.eval_accuracy, r.eval_map
        );
    }
}

fn cmd_eval(data: &Path, ckpt: &Path, common: &Common, split: &str) -> Result<()> {
    let cfg = load_config(common.config.as_deref())?;
    let fe = &cfg.pretrain.frontend;
    let dataset = Dataset::load_labeled(data, &MelFrontend::new(fe)?)?;
    let (train, eval) = dataset.split(cfg.eval_fraction, common.seed);
    let subset = match split {
        "eval" => eval,
        "train" => train,
        "all" => dataset,
        other => return Err(Error::Config(format!("unknown split `{other}`"))),
    };
    let (rows, cols) = fe.grid();
    let encoder = load_encoder(&cfg, GridShape::new(rows, cols), None, common.seed)?;
    let head = ClassifierHead::new(encoder.embed_dim(), subset.n_classes(), &mut seed::stream(0, "head", 0));
    let mut model = Classifier { encoder, head };
    model.load_checkpoint(&Checkpoint::load(ckpt)?)?;
    let r = evaluate(&model, &subset, fe)?;
    println!("accuracy {:.4} map {:.4} clips {}", r.accuracy, r.map, subset.len());
    Ok(())
}
