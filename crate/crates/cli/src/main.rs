//! `postermaker` command line: data synthesis, glyph dictionaries, staged
//! training, generation, evaluation and self-checks.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use serde::Deserialize;

use postermaker::datasynth::{self, Annotation, SynthConfig};
use postermaker::fgdetect::{self, DetectorTrainConfig};
use postermaker::genmodel::{self, CondBatch};
use postermaker::glyphrep;
use postermaker::image::{Mask, RgbImage};
use postermaker::pipeline::{self, PipelineConfig};
use postermaker::trainer::{self, EvalConfig, EvalMode, StageConfig};

#[derive(Parser)]
#[command(name = "postermaker", version, about = "Poster generation toolkit")]
struct Cli {
    /// Worker threads for data and evaluation (falls back to PM_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic poster split.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write clean/extended pairs for the detector.
        #[arg(long)]
        extensions: bool,
        #[arg(long, default_value = "train")]
        split: String,
        /// JSON synthesis settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        alphabet_size: Option<usize>,
        #[arg(long)]
        no_text: bool,
    },
    /// Encode every glyph into a feature dictionary.
    BuildGlyphDict {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        alphabet_size: usize,
        #[arg(long, default_value_t = glyphrep::FEATURE_DIM)]
        dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        font_seed: u64,
        /// Take the glyph encoder from a trained checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run a training stage (or detector training) from a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Generate one poster.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Annotation JSON; the input image and mask default to its sibling files.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 28)]
        steps: usize,
        #[arg(long, default_value_t = 5.0)]
        cfg: f64,
        #[arg(long, value_enum, default_value_t = Mode::Scene)]
        mode: Mode,
    },
    /// Generate for a dataset split and write a metrics report.
    Evaluate {
        /// Generator checkpoint; omit with --identity to score the ground truth.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        detector: Option<PathBuf>,
        #[arg(long)]
        identity: bool,
        #[arg(long, value_enum, default_value_t = Mode::Text)]
        mode: Mode,
        #[arg(long, default_value_t = 28)]
        steps: usize,
        #[arg(long, default_value_t = 5.0)]
        cfg: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Finite-difference check of every primitive and the full flow loss.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Paired char- and line-level stage-1 runs; prints the comparison JSON.
    Ablation {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Mode {
    Text,
    Scene,
}

impl From<Mode> for EvalMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Text => EvalMode::Text,
            Mode::Scene => EvalMode::Scene,
        }
    }
}

/// Detector training job, selected by `"stage": "detector"` in a train config.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DetectorJob {
    #[allow(dead_code)]
    stage: String,
    data_dir: PathBuf,
    out_dir: PathBuf,
    #[serde(flatten)]
    train: DetectorTrainConfig,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let bytes = std::fs::read(path).map_err(|e| postermaker::Error::Input(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| postermaker::Error::Config(format!("{}: {e}", path.display())).into())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_vec_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn set_threads(flag: Option<usize>) -> anyhow::Result<()> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var("PM_THREADS") {
            Ok(v) => Some(v.parse().map_err(|_| postermaker::Error::Config(format!("PM_THREADS={v:?} is not a count")))?),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        if n == 0 {
            return Err(postermaker::Error::Config("thread count must be positive".into()).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn sibling(spec: &Path, suffix: &str) -> PathBuf {
    let stem = spec.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    spec.with_file_name(format!("{stem}{suffix}"))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    set_threads(cli.threads)?;
    match cli.command {
        Command::SynthData { out, count, seed, extensions, split, config, alphabet_size, no_text } => {
            let mut cfg: SynthConfig = match config {
                Some(p) => read_json(&p)?,
                None => SynthConfig::default(),
            };
            if let Some(k) = alphabet_size {
                cfg.alphabet_size = k;
            }
            if no_text {
                cfg.with_text = false;
            }
            if count == 0 {
                bail!(postermaker::Error::Config("count must be positive".into()));
            }
            let m = datasynth::write_dataset(&out, count, &split, seed, &cfg, extensions)?;
            println!("wrote {} samples to {} ({} seeds rejected)", m.entries.len(), out.join(&split).display(), m.rejected.len());
        }
        Command::BuildGlyphDict { out, alphabet_size, dim, seed, font_seed, checkpoint } => {
            if alphabet_size == 0 || alphabet_size > glyphrep::MAX_ALPHABET {
                bail!(postermaker::Error::Config(format!("alphabet size must be 1..={}", glyphrep::MAX_ALPHABET)));
            }
            let store = match checkpoint {
                Some(p) => trainer::load_model(&p)?.0,
                None => {
                    let mut s = diffcore::ParamStore::new();
                    glyphrep::init_encoder::<f32>(&mut s, seed, dim)?;
                    s
                }
            };
            let alphabet = glyphrep::render_alphabet(alphabet_size, font_seed, glyphrep::GLYPH_SIZE)?;
            let table = glyphrep::build_glyph_table(&alphabet, &store)?;
            table.save(&out)?;
            println!("wrote {} glyph features of dim {} to {}", table.len(), table.dim, out.display());
        }
        Command::Train { config } => {
            let value: serde_json::Value = read_json(&config)?;
            if value.get("stage").and_then(|s| s.as_str()) == Some("detector") {
                let job: DetectorJob =
                    serde_json::from_value(value).map_err(|e| postermaker::Error::Config(format!("{}: {e}", config.display())))?;
                let examples = pipeline::detector_examples(&job.data_dir)?;
                let (ps, report) = fgdetect::train_detector(&examples, &job.train)?;
                std::fs::create_dir_all(&job.out_dir)?;
                diffcore::save_checkpoint(&ps, job.out_dir.join("detector.ckpt"))?;
                write_json(&job.out_dir.join("report.json"), &report)?;
                println!("{}", serde_json::to_string_pretty(&report.validation)?);
            } else {
                let cfg: StageConfig =
                    serde_json::from_value(value).map_err(|e| postermaker::Error::Config(format!("{}: {e}", config.display())))?;
                let outcome = trainer::run_stage(&cfg)?;
                println!(
                    "stage {} done: {} steps, final loss {:.5}, checkpoint {}",
                    cfg.stage.name(),
                    cfg.steps,
                    outcome.losses.last().copied().unwrap_or(f64::NAN),
                    outcome.checkpoint.display()
                );
            }
        }
        Command::Generate { checkpoint, spec, out, image, mask, seed, steps, cfg, mode } => {
            let ann: Annotation = read_json(&spec)?;
            let image = RgbImage::load_png(image.unwrap_or_else(|| sibling(&spec, ".png")))?;
            let mask = Mask::load_png(mask.unwrap_or_else(|| sibling(&spec, ".mask.png")))?;
            let (ps, meta) = trainer::load_model(&checkpoint)?;
            let sample = datasynth::PosterSample {
                seed: ann.seed,
                image,
                subject_mask: mask,
                prompt_tokens: ann.prompt_tokens.clone(),
                text: ann.text_spec(),
                excluded_boxes: ann.excluded_boxes.clone(),
                fg_extended: None,
                true_mask: None,
            };
            sample.text.validate(meta.model.alphabet_size)?;
            let bundle = trainer::eval_bundle(&sample, mode.into())?;
            let cb = CondBatch::from_bundles(&[bundle], vec![1.0], &meta.model, true, true)?;
            let img = genmodel::sample(&ps, &meta.model, &cb, steps, cfg, &[seed])?;
            let shape = img.shape()[1..].to_vec();
            RgbImage::from_array(&img.reshape(&shape)?)?.save_png(&out)?;
            println!("wrote {}", out.display());
        }
        Command::Evaluate { checkpoint, data, report, detector, identity, mode, steps, cfg, seed, limit } => {
            let samples = datasynth::load_split(&data)?;
            let det = detector.as_deref().map(trainer::load_detector).transpose()?;
            let ec = EvalConfig { mode: mode.into(), steps, cfg_scale: cfg, seed, max_samples: limit.unwrap_or(usize::MAX), ..EvalConfig::default() };
            let rep = if identity {
                let m = datasynth::read_manifest(&data)?;
                let mc = genmodel::ModelConfig {
                    alphabet_size: m.config.alphabet_size,
                    image_size: m.config.image_size,
                    font_seed: m.config.font_seed,
                    ..genmodel::ModelConfig::default()
                };
                let picked: Vec<&datasynth::PosterSample> =
                    samples.iter().map(|s| &s.sample).filter(|s| !s.text.lines.is_empty()).take(ec.max_samples).collect();
                let images: Vec<RgbImage> = picked.iter().map(|s| s.image.clone()).collect();
                let hash = postermaker::evalharness::config_hash(&("identity", &m.config))?;
                trainer::score_images(&picked, &images, &mc, det.as_ref(), hash)?
            } else {
                let Some(ckpt) = checkpoint else {
                    bail!(postermaker::Error::Config("evaluate needs --checkpoint or --identity".into()));
                };
                pipeline::evaluate_checkpoint(&ckpt, &samples, &ec, det.as_ref())?
            };
            write_json(&report, &rep)?;
            println!("{}", serde_json::to_string_pretty(&rep)?);
        }
        Command::Gradcheck { seed } => {
            let mut checks = diffcore::gradcheck::run_primitive_suite(seed)?;
            checks.push(genmodel::flow_loss_gradcheck(seed)?);
            let mut failed = 0;
            for c in &checks {
                println!("{:<28} rel_err {:.3e}  {}", c.name, c.rel_err, if c.passed { "ok" } else { "FAIL" });
                failed += !c.passed as usize;
            }
            if failed > 0 {
                bail!("{failed} of {} gradient checks failed", checks.len());
            }
            println!("all {} gradient checks passed", checks.len());
        }
        Command::Ablation { config, out } => {
            let pc: PipelineConfig = read_json(&config)?;
            let report = pipeline::run_ablation(&pc)?;
            let out = out.unwrap_or_else(|| pc.work_dir.join("ablation.json"));
            write_json(&out, &report)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<postermaker::Error>() {
        Some(e) if e.is_validation() => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
