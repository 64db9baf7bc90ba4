//! Staged training: base warmup, scene inpainting pretraining, text rendering
//! (stage 1), scene generation (stage 2) and reward fine-tuning, plus
//! held-out evaluation of a trained generator.

use std::path::{Path, PathBuf};
use std::time::Instant;

use diffcore::{load_checkpoint, save_checkpoint, AdamW, AdamWConfig, Array, CounterRng, Graph, ParamStore};
use serde::{Deserialize, Serialize};

use crate::datasynth::{self, LoadedSample, PosterSample, SynthConfig};
use crate::error::{input_err, Error, Result};
use crate::evalharness::{self, MetricsReport};
use crate::feedback::{self, FeedbackConfig};
use crate::fgdetect;
use crate::genmodel::{self, CondBatch, ControlBundle, ModelConfig};
use crate::glyphrep::{Representation, TextSpec};
use crate::image::{Mask, PixelRect, RgbImage};

/// Training stage. Serialized as `"base"`, `"inpaint"`, `1`, `2` or `"reward"`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "StageRepr", into = "StageRepr")]
pub enum Stage {
    Base,
    Inpaint,
    One,
    Two,
    Reward,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum StageRepr {
    Num(u64),
    Name(String),
}

impl TryFrom<StageRepr> for Stage {
    type Error = String;
    fn try_from(r: StageRepr) -> std::result::Result<Self, String> {
        match r {
            StageRepr::Num(1) => Ok(Stage::One),
            StageRepr::Num(2) => Ok(Stage::Two),
            StageRepr::Name(s) => s.parse(),
            StageRepr::Num(n) => Err(format!("unknown stage {n}")),
        }
    }
}

impl From<Stage> for StageRepr {
    fn from(s: Stage) -> Self {
        match s {
            Stage::One => StageRepr::Num(1),
            Stage::Two => StageRepr::Num(2),
            other => StageRepr::Name(other.name().into()),
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(match s {
            "base" => Stage::Base,
            "inpaint" => Stage::Inpaint,
            "1" | "stage1" => Stage::One,
            "2" | "stage2" => Stage::Two,
            "reward" => Stage::Reward,
            _ => return Err(format!("unknown stage {s:?}")),
        })
    }
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Base => "base",
            Stage::Inpaint => "inpaint",
            Stage::One => "1",
            Stage::Two => "2",
            Stage::Reward => "reward",
        }
    }

    /// Parameter namespaces updated by this stage.
    pub fn trainable_prefixes(self, freeze_glyph: bool) -> Vec<&'static str> {
        match self {
            Stage::Base => vec!["base."],
            Stage::Inpaint | Stage::Two | Stage::Reward => vec!["scene."],
            Stage::One if freeze_glyph => vec!["text.", "adapter."],
            Stage::One => vec!["text.", "adapter.", "glyph."],
        }
    }

    pub fn uses_text(self) -> bool {
        matches!(self, Stage::One | Stage::Two | Stage::Reward)
    }

    pub fn uses_scene(self) -> bool {
        self != Stage::Base
    }

    /// Stage whose checkpoint must precede this one.
    pub fn requires(self) -> Option<Stage> {
        match self {
            Stage::Base => None,
            Stage::Inpaint => Some(Stage::Base),
            Stage::One => Some(Stage::Inpaint),
            Stage::Two => Some(Stage::One),
            Stage::Reward => Some(Stage::Two),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    pub stage: Stage,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub dropout_p: f64,
    pub lambda: f64,
    pub t1: usize,
    #[serde(rename = "T_prime")]
    pub t_prime: usize,
    pub cfg_scale: f64,
    pub alphabet_size: usize,
    pub image_size: usize,
    pub seed: u64,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub from_scratch: bool,
    pub representation: Representation,
    /// Checkpoint to continue from.
    pub init: Option<PathBuf>,
    /// Frozen extension detector (reward stage).
    pub detector: Option<PathBuf>,
    /// Architecture; `alphabet_size`, `image_size` and `representation` above take precedence.
    pub model: ModelConfig,
    pub log_every: usize,
    /// Intermediate checkpoint period; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub reward_batch: usize,
    pub skip_threshold: f64,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            stage: Stage::One,
            steps: 3000,
            batch_size: 16,
            lr: 1e-4,
            dropout_p: 0.1,
            lambda: 0.0005,
            t1: 10,
            t_prime: 28,
            cfg_scale: 1.0,
            alphabet_size: 16,
            image_size: 64,
            seed: 0,
            data_dir: PathBuf::from("data/train"),
            out_dir: PathBuf::from("runs/stage1"),
            from_scratch: false,
            representation: Representation::Char,
            init: None,
            detector: None,
            model: ModelConfig::default(),
            log_every: 50,
            checkpoint_every: 0,
            reward_batch: 2,
            skip_threshold: 0.3,
        }
    }
}

impl StageConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            alphabet_size: self.alphabet_size,
            image_size: self.image_size,
            representation: self.representation,
            ..self.model.clone()
        }
    }

    pub fn feedback(&self) -> FeedbackConfig {
        FeedbackConfig {
            t1: self.t1,
            lambda: self.lambda,
            skip_threshold: self.skip_threshold,
            t_prime: self.t_prime,
            cfg_scale: self.cfg_scale,
            reward_batch: self.reward_batch,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("dropout_p must lie in [0, 1], got {}", self.dropout_p)));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be positive".into()));
        }
        if self.stage == Stage::Reward {
            self.feedback().validate()?;
            if self.lambda > 0.0 && self.detector.is_none() {
                return Err(Error::Config("reward stage needs a detector checkpoint".into()));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------- inputs

/// Zero-weight regions for text that is not trained on, and the same regions as a mask.
#[derive(Clone, Debug, PartialEq)]
pub struct LossMask {
    /// 1 where the flow loss applies.
    pub weight: Mask,
    pub excluded: Mask,
}

impl LossMask {
    pub fn to_array(&self) -> Array<f32> {
        self.weight.to_array()
    }
}

pub fn mask_untrained_text(sample: &PosterSample) -> LossMask {
    let (w, h) = (sample.image.width, sample.image.height);
    let mut excluded = Mask::new(w, h);
    for b in &sample.excluded_boxes {
        excluded.fill_rect(&b.to_pixels(w, h), true);
    }
    LossMask { weight: excluded.invert(), excluded }
}

/// One training example for a stage.
#[derive(Clone, Debug)]
pub struct StageInput {
    pub bundle: ControlBundle,
    pub loss: LossMask,
    /// Target image `[H, W, 3]` in `[-1, 1]`.
    pub image: Array<f32>,
    pub subject: Mask,
}

fn text_box_mask(spec: &TextSpec, w: usize, h: usize) -> Result<Mask> {
    let mut m = Mask::new(w, h);
    for line in &spec.lines {
        if !line.bbox.is_valid() || !line.bbox.within_unit() {
            return input_err(format!("text box {:?} lies outside the image", line.bbox));
        }
        m.fill_rect(&line.bbox.to_pixels(w, h), true);
    }
    Ok(m)
}

/// Holes shaped like text lines for inpainting pretraining.
fn random_line_holes(w: usize, h: usize, rng: &mut CounterRng) -> Mask {
    let mut m = Mask::new(w, h);
    for _ in 0..1 + rng.below(3) {
        let hh = 8 + rng.below(3) * 2;
        let ww = (16 + rng.below(33)).min(w - 1);
        let x0 = rng.below(w - ww);
        let y0 = rng.below(h - hh);
        m.fill_rect(&PixelRect { x0, y0, x1: x0 + ww, y1: y0 + hh }, true);
    }
    m
}

pub fn masked_image(image: &Array<f32>, known: &Mask) -> Array<f32> {
    let mut out = image.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        if known.data[i / 3] == 0 {
            *v = 0.0;
        }
    }
    out
}

/// Known region and loss weights for `sample` in `stage`; `None` when the
/// sample carries nothing to learn for that stage.
pub fn make_stage_inputs(sample: &PosterSample, stage: Stage, rng: &mut CounterRng) -> Result<Option<StageInput>> {
    let (w, h) = (sample.image.width, sample.image.height);
    let loss = mask_untrained_text(sample);
    let known = match stage {
        Stage::Base => Mask::full(w, h),
        Stage::Inpaint => {
            if rng.bernoulli(0.5) {
                sample.subject_mask.union(&loss.excluded)
            } else {
                random_line_holes(w, h, rng).invert().union(&loss.excluded)
            }
        }
        Stage::One => {
            if sample.text.lines.is_empty() {
                log::warn!("sample {} has no text; skipped for stage 1", sample.seed);
                return Ok(None);
            }
            text_box_mask(&sample.text, w, h)?.invert().union(&loss.excluded)
        }
        Stage::Two | Stage::Reward => {
            text_box_mask(&sample.text, w, h)?;
            sample.subject_mask.union(&loss.excluded)
        }
    };
    let image = sample.image.to_array::<f32>();
    let bundle = ControlBundle {
        text: sample.text.clone(),
        text_dropped: false,
        prompt_ids: sample.prompt_tokens.clone(),
        prompt_dropped: false,
        masked_image: masked_image(&image, &known),
        known_mask: known,
    };
    Ok(Some(StageInput { bundle, loss, image, subject: sample.subject_mask.clone() }))
}

/// Independently drop text and prompt with probability `p`.
pub fn apply_condition_dropout(mut bundle: ControlBundle, p: f64, rng: &mut CounterRng) -> ControlBundle {
    bundle.text_dropped = rng.bernoulli(p);
    bundle.prompt_dropped = rng.bernoulli(p);
    bundle
}

// ---------------------------------------------------------------- checkpoints

/// Metadata stored next to a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub stages: Vec<Stage>,
    pub config: Option<StageConfig>,
    pub config_hash: String,
    pub steps: usize,
    /// Hash of the training split's manifest.
    #[serde(default)]
    pub data_hash: String,
}

pub fn sidecar_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("json")
}

pub fn save_model(ps: &ParamStore<f32>, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    save_checkpoint(ps, path)?;
    crate::image::write_file(sidecar_path(path), &serde_json::to_vec_pretty(meta)?)
}

pub fn load_model(path: &Path) -> Result<(ParamStore<f32>, CheckpointMeta)> {
    if !path.exists() {
        return input_err(format!("missing checkpoint {}", path.display()));
    }
    let ps = load_checkpoint(path)?;
    let side = sidecar_path(path);
    let meta: CheckpointMeta = serde_json::from_slice(&std::fs::read(&side).map_err(|e| {
        Error::Input(format!("missing checkpoint metadata {}: {e}", side.display()))
    })?)?;
    Ok((ps, meta))
}

pub fn load_detector(path: &Path) -> Result<ParamStore<f32>> {
    if !path.exists() {
        return input_err(format!("missing detector checkpoint {}", path.display()));
    }
    let mut ps: ParamStore<f32> = load_checkpoint(path)?;
    if !ps.names().any(|n| n.starts_with("detector.")) {
        return input_err(format!("{} holds no detector parameters", path.display()));
    }
    ps.freeze_all();
    Ok(ps)
}

// ---------------------------------------------------------------- training loop

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub loss: f64,
    pub denoise: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reward: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    pub secs: f64,
}

#[derive(Clone, Debug)]
pub struct StageOutcome {
    pub checkpoint: PathBuf,
    pub losses: Vec<f64>,
    pub log: Vec<LogEntry>,
    pub params: ParamStore<f32>,
    pub meta: CheckpointMeta,
}

fn check_data(cfg: &StageConfig, mc: &ModelConfig, synth: &SynthConfig) -> Result<()> {
    if synth.image_size != mc.image_size || synth.alphabet_size != mc.alphabet_size || synth.font_seed != mc.font_seed {
        return Err(Error::Config(format!(
            "dataset {} (image {}, alphabet {}, font {}) does not match the model (image {}, alphabet {}, font {})",
            cfg.data_dir.display(),
            synth.image_size,
            synth.alphabet_size,
            synth.font_seed,
            mc.image_size,
            mc.alphabet_size,
            mc.font_seed
        )));
    }
    Ok(())
}

fn initial_params(cfg: &StageConfig, mc: &ModelConfig) -> Result<(ParamStore<f32>, Vec<Stage>)> {
    let need = cfg.stage.requires();
    let (mut ps, stages) = match &cfg.init {
        Some(path) => {
            let (ps, meta) = load_model(path)?;
            if meta.model != (ModelConfig { representation: meta.model.representation, ..mc.clone() }) {
                return Err(Error::Config(format!("checkpoint {} was built for a different architecture", path.display())));
            }
            if let Some(n) = need {
                if !meta.stages.contains(&n) && !cfg.from_scratch {
                    return Err(Error::Config(format!(
                        "stage {} needs a checkpoint that completed stage {} (pass from_scratch to override)",
                        cfg.stage.name(),
                        n.name()
                    )));
                }
            }
            (ps, meta.stages)
        }
        None => {
            if let Some(n) = need {
                if !cfg.from_scratch {
                    return Err(Error::Config(format!(
                        "stage {} needs a stage {} checkpoint (set init, or from_scratch)",
                        cfg.stage.name(),
                        n.name()
                    )));
                }
            }
            (genmodel::init_model::<f32>(mc, cfg.seed)?, Vec::new())
        }
    };
    if cfg.stage == Stage::Inpaint && !stages.contains(&Stage::Inpaint) {
        genmodel::copy_base_into_branches(&mut ps, mc)?;
    }
    ps.freeze_all();
    for p in cfg.stage.trainable_prefixes(mc.freeze_glyph_encoder) {
        ps.set_trainable_prefix(p, true);
    }
    Ok((ps, stages))
}

/// Draw one batch of stage inputs with per-sample dropout.
pub fn draw_batch(data: &[LoadedSample], cfg: &StageConfig, step: usize) -> Result<Vec<StageInput>> {
    let mut rng = CounterRng::derive(cfg.seed, "batch", &[step as u64]);
    let mut out = Vec::with_capacity(cfg.batch_size);
    let mut misses = 0;
    while out.len() < cfg.batch_size {
        let s = &data[rng.below(data.len())].sample;
        match make_stage_inputs(s, cfg.stage, &mut rng)? {
            Some(mut inp) => {
                inp.bundle = apply_condition_dropout(inp.bundle, cfg.dropout_p, &mut rng);
                out.push(inp);
            }
            None => {
                misses += 1;
                if misses > 20 * cfg.batch_size {
                    return input_err("dataset has no usable samples for this stage");
                }
            }
        }
    }
    Ok(out)
}

struct StepResult {
    loss: f64,
    denoise: f64,
    reward: Option<(f64, f64)>,
}

fn train_step(
    ps: &mut ParamStore<f32>,
    opt: &mut AdamW<f32>,
    cfg: &StageConfig,
    mc: &ModelConfig,
    bitmaps: &Array<f32>,
    batch: &[StageInput],
    detector: Option<&ParamStore<f32>>,
    step: usize,
) -> Result<StepResult> {
    let stage = cfg.stage;
    let mut g = Graph::new();
    let feats = if stage.uses_text() { Some(genmodel::glyph_features(&mut g, ps, bitmaps)?) } else { None };
    let bundles: Vec<ControlBundle> = batch.iter().map(|b| b.bundle.clone()).collect();
    let cb = CondBatch::from_bundles(&bundles, vec![0.0; batch.len()], mc, stage.uses_text(), stage.uses_scene())?;
    let x0 = genmodel::stack_arrays(&batch.iter().map(|b| b.image.clone()).collect::<Vec<_>>())?;
    let weight = genmodel::stack_arrays(&batch.iter().map(|b| b.loss.to_array()).collect::<Vec<_>>())?;
    let mut noise_rng = CounterRng::derive(cfg.seed, "noise", &[step as u64]);
    let denoise = genmodel::flow_loss(&mut g, ps, mc, &x0, &cb, feats, Some(&weight), &mut noise_rng)?;
    let denoise_v = g.value(denoise).item() as f64;

    let mut reward = None;
    let mut total = denoise;
    if let (Stage::Reward, Some(det)) = (stage, detector) {
        if cfg.lambda > 0.0 {
            let fc = cfg.feedback();
            let k = fc.reward_batch.min(batch.len());
            let clean: Vec<ControlBundle> = bundles[..k]
                .iter()
                .map(|b| ControlBundle { text_dropped: false, prompt_dropped: false, ..b.clone() })
                .collect();
            let cb_r = CondBatch::from_bundles(&clean, vec![0.0; k], mc, true, true)?;
            let table = match feats {
                Some(f) => g.value(f).clone(),
                None => genmodel::glyph_table_array(ps, mc)?,
            };
            let mut rng = CounterRng::derive(cfg.seed, "reward", &[step as u64]);
            let roll = feedback::refl_rollout(&mut g, ps, mc, &cb_r, &table, feats, &fc, &mut rng)?;
            let subj: Vec<&Mask> = batch[..k].iter().map(|b| &b.subject).collect();
            let (rl, scores) = feedback::reward_loss(&mut g, det, roll.x0, &subj, fc.skip_threshold)?;
            let rv = g.value(rl).item() as f64;
            reward = Some((rv, scores.iter().sum::<f64>() / scores.len() as f64));
            total = feedback::total_loss(&mut g, denoise, Some(rl), cfg.lambda)?;
        }
    }
    let loss = g.value(total).item() as f64;
    if !loss.is_finite() {
        return Err(Error::Runtime(format!("non-finite loss at step {step}")));
    }
    let grads = g.backward(total)?.into_named(ps);
    opt.step(ps, &grads)?;
    Ok(StepResult { loss, denoise: denoise_v, reward })
}

/// Run one training stage; writes `{out_dir}/model.ckpt`, its sidecar and `train_log.jsonl`.
pub fn run_stage(cfg: &StageConfig) -> Result<StageOutcome> {
    cfg.validate()?;
    let mc = cfg.model_config();
    let data = datasynth::load_split(&cfg.data_dir).map_err(|e| match e {
        Error::Io(err) => Error::Input(format!("cannot read dataset {}: {err}", cfg.data_dir.display())),
        other => other,
    })?;
    if data.is_empty() {
        return input_err(format!("dataset {} is empty", cfg.data_dir.display()));
    }
    let manifest = datasynth::read_manifest(&cfg.data_dir)?;
    check_data(cfg, &mc, &manifest.config)?;
    let data_hash = evalharness::config_hash(&manifest)?;
    let detector = match (&cfg.detector, cfg.stage) {
        (Some(p), Stage::Reward) => Some(load_detector(p)?),
        _ => None,
    };
    let (mut ps, mut stages) = initial_params(cfg, &mc)?;
    let frozen_before = ps.clone();
    let bitmaps = genmodel::alphabet_bitmaps::<f32>(&mc)?;
    let mut opt = AdamW::new(AdamWConfig { lr: cfg.lr, ..AdamWConfig::default() });
    std::fs::create_dir_all(&cfg.out_dir)?;
    let ckpt = cfg.out_dir.join("model.ckpt");
    let config_hash = evalharness::config_hash(cfg)?;
    stages.push(cfg.stage);
    let make_meta = |steps: usize| CheckpointMeta {
        model: mc.clone(),
        stages: stages.clone(),
        config: Some(cfg.clone()),
        config_hash: config_hash.clone(),
        steps,
        data_hash: data_hash.clone(),
    };

    let start = Instant::now();
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut log = Vec::new();
    let mut lines = String::new();
    for step in 0..cfg.steps {
        let batch = draw_batch(&data, cfg, step)?;
        let r = train_step(&mut ps, &mut opt, cfg, &mc, &bitmaps, &batch, detector.as_ref(), step)?;
        losses.push(r.loss);
        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            let e = LogEntry {
                step,
                loss: r.loss,
                denoise: r.denoise,
                reward: r.reward.map(|x| x.0),
                score: r.reward.map(|x| x.1),
                secs: start.elapsed().as_secs_f64(),
            };
            log::info!("stage {} step {step} loss {:.5} ({:.0}s)", cfg.stage.name(), r.loss, e.secs);
            lines.push_str(&serde_json::to_string(&e)?);
            lines.push('\n');
            log.push(e);
        }
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 && step + 1 < cfg.steps {
            save_model(&ps, &make_meta(step + 1), &cfg.out_dir.join(format!("model-{:06}.ckpt", step + 1)))?;
        }
    }
    for (name, p) in frozen_before.iter() {
        if !p.trainable && ps.get(name)? != &p.value {
            return Err(Error::Runtime(format!("frozen parameter {name} changed during training")));
        }
    }
    let meta = make_meta(cfg.steps);
    save_model(&ps, &meta, &ckpt)?;
    crate::image::write_file(cfg.out_dir.join("train_log.jsonl"), lines.as_bytes())?;
    Ok(StageOutcome { checkpoint: ckpt, losses, log, params: ps, meta })
}

/// Stage 1 with one pooled token per line; everything else as in `cfg`.
pub fn run_line_level_baseline(cfg: &StageConfig) -> Result<StageOutcome> {
    if cfg.stage != Stage::One {
        return input_err("the line-level baseline is a stage-1 run");
    }
    run_stage(&StageConfig { representation: Representation::Line, ..cfg.clone() })
}

// ---------------------------------------------------------------- evaluation

/// How held-out conditions are built for generation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    /// Regenerate the text boxes; everything else is given.
    Text,
    /// Regenerate everything around the subject.
    Scene,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub mode: EvalMode,
    pub steps: usize,
    pub cfg_scale: f64,
    pub seed: u64,
    pub batch: usize,
    pub max_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { mode: EvalMode::Text, steps: 28, cfg_scale: 5.0, seed: 0, batch: 16, max_samples: usize::MAX }
    }
}

pub fn eval_bundle(sample: &PosterSample, mode: EvalMode) -> Result<ControlBundle> {
    let stage = match mode {
        EvalMode::Text => Stage::One,
        EvalMode::Scene => Stage::Two,
    };
    let mut rng = CounterRng::new(0, 0);
    make_stage_inputs(sample, stage, &mut rng)?
        .map(|i| i.bundle)
        .ok_or_else(|| Error::Input(format!("sample {} has no text to evaluate", sample.seed)))
}

/// Generate one image per sample under `ec`; noise is keyed by sample seed.
pub fn generate_for(ps: &ParamStore<f32>, mc: &ModelConfig, samples: &[&PosterSample], ec: &EvalConfig) -> Result<Vec<RgbImage>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(ec.batch.max(1)) {
        let bundles = chunk.iter().map(|s| eval_bundle(s, ec.mode)).collect::<Result<Vec<_>>>()?;
        let cb = CondBatch::from_bundles(&bundles, vec![1.0; chunk.len()], mc, true, true)?;
        let seeds: Vec<u64> = chunk.iter().map(|s| diffcore::rng::stream_id("eval", &[ec.seed, s.seed])).collect();
        let imgs = genmodel::sample(ps, mc, &cb, ec.steps, ec.cfg_scale, &seeds)?;
        let per = imgs.len() / chunk.len();
        let shape = &imgs.shape()[1..];
        for i in 0..chunk.len() {
            let a = Array::from_vec(shape, imgs.data()[i * per..(i + 1) * per].to_vec())?;
            out.push(RgbImage::from_array(&a)?);
        }
    }
    Ok(out)
}

/// Metrics of `images` against `samples`; detector scores feed the fg metrics when given.
pub fn score_images(
    samples: &[&PosterSample],
    images: &[RgbImage],
    mc: &ModelConfig,
    detector: Option<&ParamStore<f32>>,
    config_hash: String,
) -> Result<MetricsReport> {
    let glyphs = genmodel_glyphs(mc)?;
    let specs: Vec<&TextSpec> = samples.iter().map(|s| &s.text).collect();
    let (acc, ned, _) = evalharness::recognition_metrics(&specs, images, &glyphs)?;
    let (iou, _) = evalharness::text_iou_metrics(&specs, images, &glyphs)?;
    let inputs: Vec<RgbImage> = samples.iter().map(|s| s.image.clone()).collect();
    let masks: Vec<Mask> = samples.iter().map(|s| s.subject_mask.clone()).collect();
    let (ratio, mse) = match detector {
        Some(det) => {
            let imgs: Vec<&RgbImage> = images.iter().collect();
            let ms: Vec<&Mask> = masks.iter().collect();
            let scores = fgdetect::scores(det, &imgs, &ms)?;
            let (r, m) = evalharness::fg_metrics(&scores, &inputs, images, &masks)?;
            (Some(r), m)
        }
        None => (None, evalharness::fg_metrics(&vec![0.0; images.len()], &inputs, images, &masks)?.1),
    };
    Ok(MetricsReport {
        sen_acc: acc,
        ned,
        miou: iou.miou,
        iou_at_05: iou.iou_at_05,
        iou_at_07: iou.iou_at_07,
        fg_ext_ratio: ratio,
        fg_preserve_mse: mse,
        n_samples: samples.len(),
        n_lines: specs.iter().map(|s| s.lines.len()).sum(),
        config_hash,
        fid: None,
        clip_t: None,
    })
}

fn genmodel_glyphs(mc: &ModelConfig) -> Result<Vec<crate::glyphrep::GlyphBitmap>> {
    crate::glyphrep::render_alphabet(mc.alphabet_size, mc.font_seed, crate::glyphrep::GLYPH_SIZE)
}

/// Generate and score held-out samples that carry text.
pub fn evaluate_model(
    ps: &ParamStore<f32>,
    mc: &ModelConfig,
    data: &[LoadedSample],
    ec: &EvalConfig,
    detector: Option<&ParamStore<f32>>,
) -> Result<(MetricsReport, Vec<RgbImage>)> {
    let samples: Vec<&PosterSample> =
        data.iter().map(|d| &d.sample).filter(|s| !s.text.lines.is_empty()).take(ec.max_samples).collect();
    if samples.is_empty() {
        return input_err("no evaluable samples");
    }
    let images = generate_for(ps, mc, &samples, ec)?;
    let hash = evalharness::config_hash(&(mc, ec))?;
    Ok((score_images(&samples, &images, mc, detector, hash)?, images))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::glyphrep::TextLine;
    use crate::image::BBox;

    fn sample() -> PosterSample {
        datasynth::synth_sample(3, &SynthConfig::default())
            .or_else(|_| datasynth::synth_sample(4, &SynthConfig::default()))
            .unwrap()
    }

    #[test]
    fn stage_serde_forms() {
        for (s, j) in [(Stage::One, "1"), (Stage::Two, "2"), (Stage::Reward, "\"reward\""), (Stage::Base, "\"base\"")] {
            assert_eq!(serde_json::to_string(&s).unwrap(), j);
            assert_eq!(serde_json::from_str::<Stage>(j).unwrap(), s);
        }
        assert!(serde_json::from_str::<Stage>("3").is_err());
        let c: StageConfig = serde_json::from_str(r#"{"stage": 2, "T_prime": 20, "lambda": 0.0}"#).unwrap();
        assert_eq!((c.stage, c.t_prime), (Stage::Two, 20));
        assert!(serde_json::from_str::<StageConfig>(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn stage_two_keeps_only_subject() {
        let mut s = sample();
        s.excluded_boxes.clear();
        let inp = make_stage_inputs(&s, Stage::Two, &mut CounterRng::new(0, 0)).unwrap().unwrap();
        assert_eq!(inp.bundle.known_mask, s.subject_mask);
        for (i, v) in inp.bundle.masked_image.data().iter().enumerate() {
            if s.subject_mask.data[i / 3] == 0 {
                assert_eq!(*v, 0.0);
            } else {
                assert_eq!(*v, inp.image.data()[i]);
            }
        }
    }

    #[test]
    fn stage_one_unknown_region_is_the_text_box() {
        let mut s = sample();
        s.excluded_boxes.clear();
        // a box covering 10% of a 64x64 image: 32 x 12.8 -> use 40 x 10.24? pick 16 x 25.6; here 32 x 12.8 rounds, so use exact pixels
        s.text = TextSpec { lines: vec![TextLine { content: vec![1, 2], bbox: BBox::from_pixels(PixelRect { x0: 8, y0: 8, x1: 40, y1: 20 }, 64, 64) }] };
        let inp = make_stage_inputs(&s, Stage::One, &mut CounterRng::new(0, 0)).unwrap().unwrap();
        assert_eq!(64 * 64 - inp.bundle.known_mask.count(), 32 * 12);
        s.text.lines.clear();
        assert!(make_stage_inputs(&s, Stage::One, &mut CounterRng::new(0, 0)).unwrap().is_none());
        s.text = TextSpec { lines: vec![TextLine { content: vec![1], bbox: BBox::new(0.5, 0.5, 1.2, 0.6) }] };
        assert!(make_stage_inputs(&s, Stage::One, &mut CounterRng::new(0, 0)).is_err());
    }

    #[test]
    fn loss_mask_unions_excluded_boxes() {
        let mut s = sample();
        s.excluded_boxes.clear();
        assert_eq!(mask_untrained_text(&s).weight.count(), 64 * 64);
        let b = BBox::from_pixels(PixelRect { x0: 0, y0: 0, x1: 4, y1: 4 }, 64, 64);
        let c = BBox::from_pixels(PixelRect { x0: 2, y0: 2, x1: 6, y1: 6 }, 64, 64);
        s.excluded_boxes = vec![b, c, c];
        let m = mask_untrained_text(&s);
        assert_eq!(m.excluded.count(), 16 + 16 - 4);
        let inp = make_stage_inputs(&s, Stage::Two, &mut CounterRng::new(0, 0)).unwrap().unwrap();
        assert!(m.excluded.subset_of(&inp.bundle.known_mask));
    }

    #[test]
    fn dropout_frequencies() {
        let s = sample();
        let b = make_stage_inputs(&s, Stage::One, &mut CounterRng::new(0, 0)).unwrap().unwrap().bundle;
        let mut rng = CounterRng::new(5, 0);
        assert_eq!(apply_condition_dropout(b.clone(), 0.0, &mut rng), b);
        let all = apply_condition_dropout(b.clone(), 1.0, &mut rng);
        assert!(all.text_dropped && all.prompt_dropped);
        let (mut t, mut p, mut both) = (0, 0, 0);
        for _ in 0..10_000 {
            let d = apply_condition_dropout(b.clone(), 0.1, &mut rng);
            t += d.text_dropped as usize;
            p += d.prompt_dropped as usize;
            both += (d.text_dropped && d.prompt_dropped) as usize;
        }
        assert!((t as f64 / 1e4 - 0.1).abs() < 0.01, "{t}");
        assert!((p as f64 / 1e4 - 0.1).abs() < 0.01, "{p}");
        assert!((both as f64 / 1e4 - 0.01).abs() < 0.005, "{both}");
    }

    #[test]
    fn freeze_sets() {
        assert_eq!(Stage::One.trainable_prefixes(false), vec!["text.", "adapter.", "glyph."]);
        assert_eq!(Stage::One.trainable_prefixes(true), vec!["text.", "adapter."]);
        assert_eq!(Stage::Two.trainable_prefixes(false), vec!["scene."]);
        assert_eq!(Stage::Reward.trainable_prefixes(false), Stage::Two.trainable_prefixes(false));
    }
}
