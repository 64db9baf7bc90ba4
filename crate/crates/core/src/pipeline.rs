//! End-to-end drivers chaining data synthesis, the training stages and
//! evaluation: the text-rendering run, the char/line ablation, the detector
//! and the feedback experiment.

use std::path::{Path, PathBuf};

use diffcore::ParamStore;
use serde::{Deserialize, Serialize};

use crate::datasynth::{self, LoadedSample, SynthConfig};
use crate::error::{Error, Result};
use crate::evalharness::MetricsReport;
use crate::fgdetect::{self, DetectorExample, DetectorReport, DetectorTrainConfig};
use crate::genmodel::ModelConfig;
use crate::glyphrep::Representation;
use crate::trainer::{self, EvalConfig, EvalMode, Stage, StageConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub work_dir: PathBuf,
    pub seed: u64,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train_count: usize,
    /// Text-free posters for inpainting pretraining.
    pub pretrain_count: usize,
    pub eval_count: usize,
    pub batch_size: usize,
    pub dropout_p: f64,
    pub base_steps: usize,
    pub inpaint_steps: usize,
    pub prefix_lr: f64,
    pub stage1_steps: usize,
    pub stage1_lr: f64,
    pub stage2_steps: usize,
    pub stage2_lr: f64,
    /// Share of stage-2 posters carrying an unmasked prop on the subject.
    pub stage2_prop_rate: f64,
    pub reward_steps: usize,
    pub lambda: f64,
    pub t1: usize,
    pub t_prime: usize,
    pub reward_batch: usize,
    pub detector_pairs: usize,
    pub detector: DetectorTrainConfig,
    pub feedback_eval_count: usize,
    pub eval: EvalConfig,
    /// Skip stages whose checkpoint already exists with an identical config.
    pub reuse: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            work_dir: PathBuf::from("runs/pipeline"),
            seed: 0,
            synth: SynthConfig::default(),
            model: ModelConfig::default(),
            train_count: 2000,
            pretrain_count: 1000,
            eval_count: 100,
            batch_size: 16,
            dropout_p: 0.1,
            base_steps: 500,
            inpaint_steps: 1000,
            prefix_lr: 3e-4,
            stage1_steps: 6000,
            stage1_lr: 3e-4,
            stage2_steps: 1000,
            stage2_lr: 1e-4,
            stage2_prop_rate: 0.3,
            reward_steps: 300,
            lambda: 0.0005,
            t1: 10,
            t_prime: 28,
            reward_batch: 2,
            detector_pairs: 2000,
            detector: DetectorTrainConfig::default(),
            feedback_eval_count: 200,
            eval: EvalConfig::default(),
            reuse: true,
        }
    }
}

impl PipelineConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig { alphabet_size: self.synth.alphabet_size, image_size: self.synth.image_size, font_seed: self.synth.font_seed, ..self.model.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.model_config().validate()?;
        if self.train_count == 0 || self.eval_count == 0 {
            return Err(Error::Config("train_count and eval_count must be positive".into()));
        }
        Ok(())
    }

    fn stage(&self, stage: Stage, data: &Path, out: &str, init: Option<PathBuf>, steps: usize, lr: f64) -> StageConfig {
        StageConfig {
            stage,
            steps,
            batch_size: self.batch_size,
            lr,
            dropout_p: self.dropout_p,
            lambda: self.lambda,
            t1: self.t1,
            t_prime: self.t_prime,
            cfg_scale: 1.0,
            alphabet_size: self.synth.alphabet_size,
            image_size: self.synth.image_size,
            seed: self.seed,
            data_dir: data.to_path_buf(),
            out_dir: self.work_dir.join(out),
            from_scratch: init.is_none(),
            representation: Representation::Char,
            init,
            detector: None,
            model: self.model_config(),
            log_every: 50,
            checkpoint_every: 0,
            reward_batch: self.reward_batch,
            skip_threshold: 0.3,
        }
    }
}

/// Write a dataset split unless one with the same settings is already there.
pub fn ensure_dataset(root: &Path, split: &str, count: usize, seed0: u64, cfg: &SynthConfig, extensions: bool) -> Result<PathBuf> {
    let dir = root.join(split);
    if let Ok(m) = datasynth::read_manifest(&dir) {
        let n = if extensions { count * 2 } else { count };
        if m.config == *cfg && m.seed0 == seed0 && m.extensions == extensions && m.entries.len() == n {
            return Ok(dir);
        }
    }
    datasynth::write_dataset(root, count, split, seed0, cfg, extensions)?;
    Ok(dir)
}

/// Run a stage, or reuse its finished checkpoint when the config matches.
pub fn run_or_reuse(cfg: &StageConfig, reuse: bool) -> Result<PathBuf> {
    let ckpt = cfg.out_dir.join("model.ckpt");
    if reuse && ckpt.exists() {
        if let Ok((_, meta)) = trainer::load_model(&ckpt) {
            let data_hash = crate::evalharness::config_hash(&datasynth::read_manifest(&cfg.data_dir)?)?;
            if meta.config.as_ref() == Some(cfg) && meta.data_hash == data_hash {
                log::info!("reusing {}", ckpt.display());
                return Ok(ckpt);
            }
        }
    }
    Ok(trainer::run_stage(cfg)?.checkpoint)
}

pub struct TextData {
    pub train: PathBuf,
    pub pretrain: PathBuf,
    pub eval: PathBuf,
}

pub fn text_datasets(pc: &PipelineConfig) -> Result<TextData> {
    let root = pc.work_dir.join("data");
    let train = ensure_dataset(&root, "train", pc.train_count, pc.seed, &pc.synth, false)?;
    let plain = SynthConfig { with_text: false, ..pc.synth.clone() };
    let pretrain = ensure_dataset(&root, "pretrain", pc.pretrain_count, pc.seed, &plain, false)?;
    let eval = ensure_dataset(&root, "eval", pc.eval_count, pc.seed, &pc.synth, false)?;
    Ok(TextData { train, pretrain, eval })
}

/// Base warmup, then branch copy and inpainting pretraining; returns the checkpoint.
pub fn run_prefix(pc: &PipelineConfig, data: &TextData) -> Result<PathBuf> {
    let base = pc.stage(Stage::Base, &data.train, "base", None, pc.base_steps, pc.prefix_lr);
    let base_ckpt = run_or_reuse(&base, pc.reuse)?;
    let inpaint = pc.stage(Stage::Inpaint, &data.pretrain, "inpaint", Some(base_ckpt), pc.inpaint_steps, pc.prefix_lr);
    run_or_reuse(&inpaint, pc.reuse)
}

pub fn stage1_config(pc: &PipelineConfig, data: &TextData, prefix: &Path, rep: Representation) -> StageConfig {
    let name = match rep {
        Representation::Char => "stage1-char",
        Representation::Line => "stage1-line",
    };
    StageConfig { representation: rep, ..pc.stage(Stage::One, &data.train, name, Some(prefix.to_path_buf()), pc.stage1_steps, pc.stage1_lr) }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ArmResult {
    pub checkpoint: PathBuf,
    pub metrics: MetricsReport,
}

pub fn evaluate_checkpoint(ckpt: &Path, eval: &[LoadedSample], ec: &EvalConfig, detector: Option<&ParamStore<f32>>) -> Result<MetricsReport> {
    let (ps, meta) = trainer::load_model(ckpt)?;
    Ok(trainer::evaluate_model(&ps, &meta.model, eval, ec, detector)?.0)
}

#[derive(Serialize, Deserialize)]
struct CachedEval {
    key: String,
    metrics: MetricsReport,
}

/// Evaluate `{out_dir}/model.ckpt` on a split, writing `{out_dir}/eval.json`;
/// an existing report is reused when stage, eval and data settings all match.
fn cached_eval(
    cfg: &StageConfig,
    ec: &EvalConfig,
    eval_dir: &Path,
    detector: Option<(&ParamStore<f32>, &DetectorTrainConfig)>,
    reuse: bool,
) -> Result<MetricsReport> {
    let manifest = datasynth::read_manifest(eval_dir)?;
    let key = crate::evalharness::config_hash(&(cfg, ec, &manifest, detector.map(|d| d.1)))?;
    let path = cfg.out_dir.join("eval.json");
    if reuse {
        if let Ok(bytes) = std::fs::read(&path) {
            if let Ok(c) = serde_json::from_slice::<CachedEval>(&bytes) {
                if c.key == key {
                    return Ok(c.metrics);
                }
            }
        }
    }
    let eval = datasynth::load_split(eval_dir)?;
    let metrics = evaluate_checkpoint(&cfg.out_dir.join("model.ckpt"), &eval, ec, detector.map(|d| d.0))?;
    crate::image::write_file(&path, &serde_json::to_vec_pretty(&CachedEval { key, metrics: metrics.clone() })?)?;
    Ok(metrics)
}

/// Stage-1 run for one representation, evaluated on the held-out split.
pub fn run_text_arm(pc: &PipelineConfig, data: &TextData, prefix: &Path, rep: Representation) -> Result<ArmResult> {
    let cfg = stage1_config(pc, data, prefix, rep);
    let ckpt = run_or_reuse(&cfg, pc.reuse)?;
    let ec = EvalConfig { mode: EvalMode::Text, ..pc.eval.clone() };
    let metrics = cached_eval(&cfg, &ec, &data.eval, None, pc.reuse)?;
    Ok(ArmResult { checkpoint: ckpt, metrics })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationReport {
    pub char: ArmResult,
    pub line: ArmResult,
    pub sen_acc_gap: f64,
    pub ned_gap: f64,
    /// Fields of the two stage configs that differ.
    pub config_diff: Vec<String>,
}

pub fn config_diff(a: &StageConfig, b: &StageConfig) -> Result<Vec<String>> {
    let (va, vb) = (serde_json::to_value(a)?, serde_json::to_value(b)?);
    let mut out = Vec::new();
    if let (Some(ma), Some(mb)) = (va.as_object(), vb.as_object()) {
        for (k, x) in ma {
            if mb.get(k) != Some(x) {
                out.push(k.clone());
            }
        }
    }
    Ok(out)
}

/// Paired char- and line-level stage-1 runs from one shared prefix.
pub fn run_ablation(pc: &PipelineConfig) -> Result<AblationReport> {
    pc.validate()?;
    let data = text_datasets(pc)?;
    let prefix = run_prefix(pc, &data)?;
    let char = run_text_arm(pc, &data, &prefix, Representation::Char)?;
    let line = run_text_arm(pc, &data, &prefix, Representation::Line)?;
    let mut diff = config_diff(
        &stage1_config(pc, &data, &prefix, Representation::Char),
        &stage1_config(pc, &data, &prefix, Representation::Line),
    )?;
    diff.retain(|k| k != "out_dir");
    Ok(AblationReport {
        sen_acc_gap: char.metrics.sen_acc - line.metrics.sen_acc,
        ned_gap: char.metrics.ned - line.metrics.ned,
        char,
        line,
        config_diff: diff,
    })
}

/// Extension pairs as detector examples; each pair is one split group.
pub fn detector_examples(dir: &Path) -> Result<Vec<DetectorExample>> {
    let m = datasynth::read_manifest(dir)?;
    let data = datasynth::load_split(dir)?;
    data.iter()
        .zip(&m.entries)
        .map(|(d, e)| DetectorExample::from_sample(&d.sample, e.pair.unwrap_or(0)))
        .collect()
}

pub fn run_detector(pc: &PipelineConfig) -> Result<(PathBuf, DetectorReport)> {
    let root = pc.work_dir.join("data");
    let dir = ensure_dataset(&root, "pairs", pc.detector_pairs, pc.seed, &pc.synth, true)?;
    let out = pc.work_dir.join("detector");
    let ckpt = out.join("detector.ckpt");
    let report_path = out.join("report.json");
    let key = (pc.detector.clone(), crate::evalharness::config_hash(&datasynth::read_manifest(&dir)?)?);
    if pc.reuse && ckpt.exists() {
        if let Ok(bytes) = std::fs::read(out.join("config.json")) {
            if serde_json::from_slice::<(DetectorTrainConfig, String)>(&bytes).ok().as_ref() == Some(&key) {
                let report = serde_json::from_slice(&std::fs::read(&report_path)?)?;
                return Ok((ckpt, report));
            }
        }
    }
    let examples = detector_examples(&dir)?;
    let (ps, report) = fgdetect::train_detector(&examples, &pc.detector)?;
    std::fs::create_dir_all(&out)?;
    diffcore::save_checkpoint(&ps, &ckpt)?;
    crate::image::write_file(out.join("config.json"), &serde_json::to_vec_pretty(&key)?)?;
    crate::image::write_file(&report_path, &serde_json::to_vec_pretty(&report)?)?;
    Ok((ckpt, report))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FeedbackReport {
    pub control: ArmResult,
    pub reward: ArmResult,
    pub detector: DetectorReport,
}

/// Stage 2 from a stage-1 checkpoint, then paired reward (`lambda`) and
/// control (`lambda = 0`) fine-tunes scored on a fixed held-out set.
pub fn run_feedback_experiment(pc: &PipelineConfig, stage1: &Path) -> Result<FeedbackReport> {
    pc.validate()?;
    let (det_path, det_report) = run_detector(pc)?;
    let root = pc.work_dir.join("data");
    let synth2 = SynthConfig { prop_rate: pc.stage2_prop_rate, ..pc.synth.clone() };
    let train2 = ensure_dataset(&root, "stage2", pc.train_count, pc.seed, &synth2, false)?;
    let eval2 = ensure_dataset(&root, "eval-fb", pc.feedback_eval_count, pc.seed + 1, &pc.synth, false)?;
    let s2 = pc.stage(Stage::Two, &train2, "stage2", Some(stage1.to_path_buf()), pc.stage2_steps, pc.stage2_lr);
    let s2_ckpt = run_or_reuse(&s2, pc.reuse)?;
    let reward_cfg = |lambda: f64, name: &str| StageConfig {
        lambda,
        detector: Some(det_path.clone()),
        ..pc.stage(Stage::Reward, &train2, name, Some(s2_ckpt.clone()), pc.reward_steps, pc.stage2_lr)
    };
    let detector = trainer::load_detector(&det_path)?;
    let ec = EvalConfig { mode: EvalMode::Scene, ..pc.eval.clone() };
    let arm = |lambda: f64, name: &str| -> Result<ArmResult> {
        let cfg = reward_cfg(lambda, name);
        let ckpt = run_or_reuse(&cfg, pc.reuse)?;
        let metrics = cached_eval(&cfg, &ec, &eval2, Some((&detector, &pc.detector)), pc.reuse)?;
        Ok(ArmResult { checkpoint: ckpt, metrics })
    };
    let control = arm(0.0, "reward-control")?;
    let reward = arm(pc.lambda, "reward")?;
    Ok(FeedbackReport { control, reward, detector: det_report })
}
