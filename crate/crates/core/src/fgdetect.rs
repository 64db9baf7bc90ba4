//! Foreground-extension detector: a box-cropped convolutional encoder-decoder
//! predicts the intermediate subject mask, and a score head reads encoder
//! features together with `M_s`, `M_i` and `M_s - M_i`.

use diffcore::{sigmoid, AdamW, AdamWConfig, Array, CounterRng, Graph, ParamStore, Scalar, Var};
use serde::{Deserialize, Serialize};

use crate::datasynth::PosterSample;
use crate::error::{input_err, Error, Result};
use crate::image::{Mask, PixelRect, RgbImage};
use crate::nn::{self, Init};

/// Side of the square detector crop.
pub const CROP: usize = 32;
/// Crop side relative to the longer side of the subject box.
pub const CROP_SCALE: f64 = 1.5;
const IN_CH: usize = 5;

pub fn init_detector<T: Scalar>(seed: u64) -> Result<ParamStore<T>> {
    let mut store = ParamStore::new();
    let mut init = Init::new(&mut store, seed, "detector");
    init.conv("detector.e1a", 3, IN_CH, 16)?;
    init.conv("detector.e1b", 3, 16, 16)?;
    init.conv("detector.e2", 3, 16, 32)?;
    init.conv("detector.e3", 3, 32, 64)?;
    init.conv("detector.e4", 3, 64, 64)?;
    init.conv("detector.d3", 3, 128, 64)?;
    init.conv("detector.d2", 3, 96, 32)?;
    init.conv("detector.d1", 3, 48, 16)?;
    init.conv("detector.mask_head", 3, 16, 1)?;
    init.conv("detector.s1", 3, 35, 32)?;
    init.conv("detector.s2", 3, 32, 32)?;
    init.linear("detector.fc1", 32, 32)?;
    init.linear("detector.fc2", 32, 1)?;
    Ok(store)
}

/// Square window around the subject box, in pixel coordinates (may leave the image).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropWindow {
    pub x0: f64,
    pub y0: f64,
    pub side: f64,
}

impl CropWindow {
    pub fn around(r: &PixelRect) -> Self {
        let side = (CROP_SCALE * r.width().max(r.height()) as f64).max(8.0);
        let (cx, cy) = ((r.x0 + r.x1) as f64 / 2.0, (r.y0 + r.y1) as f64 / 2.0);
        CropWindow { x0: cx - side / 2.0, y0: cy - side / 2.0, side }
    }

    /// Source pixel for crop cell `(ox, oy)`, `None` outside the image.
    fn source(&self, ox: usize, oy: usize, w: usize, h: usize) -> Option<(usize, usize)> {
        let step = self.side / CROP as f64;
        let sx = (self.x0 + (ox as f64 + 0.5) * step).floor();
        let sy = (self.y0 + (oy as f64 + 0.5) * step).floor();
        (sx >= 0.0 && sy >= 0.0 && (sx as usize) < w && (sy as usize) < h).then(|| (sx as usize, sy as usize))
    }
}

/// Inputs of one detector batch.
pub struct DetectorBatch {
    pub windows: Vec<CropWindow>,
    /// `[B, H, W, 2]`: subject mask and box mask.
    pub masks: Array<f64>,
    /// `M_s` cropped `[B, CROP, CROP, 1]`.
    pub ms_crop: Array<f64>,
    pub size: (usize, usize),
}

impl DetectorBatch {
    pub fn new(subject_masks: &[&Mask]) -> Result<Self> {
        let first = subject_masks.first().ok_or_else(|| Error::Input("empty detector batch".into()))?;
        let (w, h) = (first.width, first.height);
        let mut masks = Array::zeros(&[subject_masks.len(), h, w, 2]);
        let mut windows = Vec::with_capacity(subject_masks.len());
        for (b, m) in subject_masks.iter().enumerate() {
            if m.width != w || m.height != h {
                return input_err("subject masks differ in size");
            }
            let r = m.bounding_rect().ok_or_else(|| Error::Input("empty subject mask".into()))?;
            windows.push(CropWindow::around(&r));
            for y in 0..h {
                for x in 0..w {
                    let i = ((b * h + y) * w + x) * 2;
                    masks.data_mut()[i] = m.get(x, y) as u8 as f64;
                    masks.data_mut()[i + 1] = r.contains(x, y) as u8 as f64;
                }
            }
        }
        let mut batch = DetectorBatch { windows, ms_crop: Array::zeros(&[0]), masks, size: (w, h) };
        let mut ms_crop = Array::zeros(&[subject_masks.len(), CROP, CROP, 1]);
        let idx = batch.crop_index(1);
        for (o, &i) in ms_crop.data_mut().iter_mut().zip(&idx) {
            *o = if i == usize::MAX { 0.0 } else { subject_masks[i / (w * h)].data[i % (w * h)] as f64 };
        }
        batch.ms_crop = ms_crop;
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    /// Flat source index into a `[B, H, W, channels]` tensor per crop element
    /// `[B, CROP, CROP, channels]`; `usize::MAX` marks padding. With
    /// `channels == 1` the index addresses pixels.
    fn crop_index(&self, channels: usize) -> Vec<usize> {
        let (w, h) = self.size;
        let mut idx = Vec::with_capacity(self.len() * CROP * CROP * channels);
        for (b, win) in self.windows.iter().enumerate() {
            for oy in 0..CROP {
                for ox in 0..CROP {
                    let src = win.source(ox, oy, w, h);
                    for c in 0..channels {
                        idx.push(match src {
                            Some((x, y)) => ((b * h + y) * w + x) * channels + c,
                            None => usize::MAX,
                        });
                    }
                }
            }
        }
        idx
    }
}

/// Nearest-neighbour crop of `x: [B, H, W, C]` to `[B, CROP, CROP, C]`, zero outside.
fn crop<T: Scalar>(g: &mut Graph<T>, x: Var, batch: &DetectorBatch) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let n: usize = s.iter().product();
    let flat = g.reshape(x, &[n])?;
    let zero = g.constant(Array::zeros(&[1]))?;
    let padded = g.concat(&[flat, zero], 0)?;
    let idx = batch.crop_index(s[3]).into_iter().map(|i| if i == usize::MAX { n } else { i }).collect();
    Ok(g.gather(padded, idx, &[batch.len(), CROP, CROP, s[3]])?)
}

pub struct DetectorOut {
    /// Score logit `[B, 1]`.
    pub logit: Var,
    /// Intermediate mask logits on the crop `[B, CROP, CROP, 1]`.
    pub mask_logit: Var,
    /// Intermediate mask on the crop.
    pub mi: Var,
    /// `M_s - M_i` on the crop.
    pub diff: Var,
}

fn conv_act<T: Scalar>(g: &mut Graph<T>, ps: &ParamStore<T>, name: &str, x: Var, stride: usize) -> Result<Var> {
    let h = nn::conv(g, ps, name, x, stride, 1)?;
    Ok(g.silu(h)?)
}

/// Detector forward on images `[B, H, W, 3]` in `[-1, 1]`.
pub fn detector_forward<T: Scalar>(g: &mut Graph<T>, ps: &ParamStore<T>, image: Var, batch: &DetectorBatch) -> Result<DetectorOut> {
    let s = g.shape(image).to_vec();
    if s.len() != 4 || s[0] != batch.len() || (s[2], s[1]) != batch.size || s[3] != 3 {
        return input_err(format!("detector image {s:?} does not match the mask batch"));
    }
    let masks = g.constant(batch.masks.cast())?;
    let full = g.concat(&[image, masks], 3)?;
    let x = crop(g, full, batch)?;

    let e1 = conv_act(g, ps, "detector.e1a", x, 1)?;
    let e1 = conv_act(g, ps, "detector.e1b", e1, 1)?;
    let e2 = conv_act(g, ps, "detector.e2", e1, 2)?;
    let e3 = conv_act(g, ps, "detector.e3", e2, 2)?;
    let e4 = conv_act(g, ps, "detector.e4", e3, 2)?;
    let u = g.upsample2d(e4, 2)?;
    let u = g.concat(&[u, e3], 3)?;
    let d3 = conv_act(g, ps, "detector.d3", u, 1)?;
    let u = g.upsample2d(d3, 2)?;
    let u = g.concat(&[u, e2], 3)?;
    let d2 = conv_act(g, ps, "detector.d2", u, 1)?;
    let u = g.upsample2d(d2, 2)?;
    let u = g.concat(&[u, e1], 3)?;
    let d1 = conv_act(g, ps, "detector.d1", u, 1)?;
    let mask_logit = nn::conv(g, ps, "detector.mask_head", d1, 1, 1)?;
    let mi = g.sigmoid(mask_logit)?;

    let ms = g.constant(batch.ms_crop.cast())?;
    let diff = g.sub(ms, mi)?;
    let pooled: Vec<Var> = [ms, mi, diff].iter().map(|&v| g.avg_pool2d(v, 2)).collect::<diffcore::Result<_>>()?;
    let feats = g.concat(&[e2, pooled[0], pooled[1], pooled[2]], 3)?;
    let h = conv_act(g, ps, "detector.s1", feats, 2)?;
    let h = conv_act(g, ps, "detector.s2", h, 2)?;
    let hs = g.shape(h).to_vec();
    let h = g.reshape(h, &[hs[0], hs[1] * hs[2], hs[3]])?;
    let h = g.mean_axis(h, 1)?;
    let h = nn::linear(g, ps, "detector.fc1", h)?;
    let h = g.silu(h)?;
    let logit = nn::linear(g, ps, "detector.fc2", h)?;
    Ok(DetectorOut { logit, mask_logit, mi, diff })
}

/// Paste crop-resolution values back onto the full image; zero outside the window.
pub fn paste_back(crop_vals: &Array<f32>, batch: &DetectorBatch) -> Vec<Array<f32>> {
    let (w, h) = batch.size;
    let mut out = Vec::with_capacity(batch.len());
    for (b, win) in batch.windows.iter().enumerate() {
        let step = win.side / CROP as f64;
        let mut full = Array::zeros(&[h, w]);
        for y in 0..h {
            for x in 0..w {
                let ox = ((x as f64 + 0.5 - win.x0) / step).floor();
                let oy = ((y as f64 + 0.5 - win.y0) / step).floor();
                if ox >= 0.0 && oy >= 0.0 && (ox as usize) < CROP && (oy as usize) < CROP {
                    full.data_mut()[y * w + x] = crop_vals.data()[(b * CROP + oy as usize) * CROP + ox as usize];
                }
            }
        }
        out.push(full);
    }
    out
}

pub fn images_array<T: Scalar>(images: &[&RgbImage]) -> Result<Array<T>> {
    let arrays: Vec<Array<T>> = images.iter().map(|i| i.to_array()).collect();
    crate::genmodel::stack_arrays(&arrays)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorPrediction {
    pub score: f64,
    /// Full-resolution intermediate mask `[H, W]`.
    pub mi: Array<f32>,
}

pub fn predict(ps: &ParamStore<f32>, images: &[&RgbImage], subject_masks: &[&Mask]) -> Result<Vec<DetectorPrediction>> {
    let batch = DetectorBatch::new(subject_masks)?;
    let mut g = Graph::new();
    let x = g.constant(images_array(images)?)?;
    let out = detector_forward(&mut g, ps, x, &batch)?;
    let full = paste_back(g.value(out.mi), &batch);
    Ok(g.value(out.logit)
        .data()
        .iter()
        .zip(full)
        .map(|(&l, mi)| DetectorPrediction { score: sigmoid(l as f64), mi })
        .collect())
}

/// Scores in chunks to bound memory.
pub fn scores(ps: &ParamStore<f32>, images: &[&RgbImage], subject_masks: &[&Mask]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(images.len());
    for (imgs, masks) in images.chunks(64).zip(subject_masks.chunks(64)) {
        out.extend(predict(ps, imgs, masks)?.into_iter().map(|p| p.score));
    }
    Ok(out)
}

// ---------------------------------------------------------------- training

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub mask_weight: f64,
    pub val_fraction: f64,
    pub seed: u64,
    /// Accept a dataset holding one label only (metrics degenerate).
    pub allow_single_class: bool,
}

impl Default for DetectorTrainConfig {
    fn default() -> Self {
        Self { steps: 1500, batch_size: 32, lr: 1e-3, mask_weight: 0.5, val_fraction: 0.1, seed: 0, allow_single_class: false }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub n: usize,
}

/// Precision / recall / F1 at 0.5. Undefined ratios are reported as 0.
pub fn binary_metrics(scores: &[f64], labels: &[bool]) -> BinaryMetrics {
    let (mut tp, mut fp, mut fneg, mut correct) = (0.0, 0.0, 0.0, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        let p = s > 0.5;
        match (p, l) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fneg += 1.0,
            _ => {}
        }
        correct += (p == l) as usize;
    }
    let ratio = |a: f64, b: f64| if b > 0.0 { a / b } else { 0.0 };
    let (precision, recall) = (ratio(tp, tp + fp), ratio(tp, tp + fneg));
    let f1 = ratio(2.0 * precision * recall, precision + recall);
    if tp + fp == 0.0 || tp + fneg == 0.0 {
        log::warn!("F1 undefined (no predicted or no actual positives); reporting 0 for undefined ratios");
    }
    BinaryMetrics { precision, recall, f1, accuracy: ratio(correct as f64, scores.len() as f64), n: scores.len() }
}

/// One labeled detector example.
#[derive(Clone, Debug)]
pub struct DetectorExample {
    pub image: RgbImage,
    pub subject_mask: Mask,
    pub true_mask: Mask,
    pub label: bool,
    /// Examples sharing a group (a clean/extended pair) land in the same split.
    pub group: usize,
}

impl DetectorExample {
    pub fn from_sample(s: &PosterSample, group: usize) -> Result<Self> {
        let label = s.fg_extended.ok_or_else(|| Error::Input("sample has no extension label".into()))?;
        Ok(Self {
            image: s.image.clone(),
            subject_mask: s.subject_mask.clone(),
            true_mask: s.true_mask.clone().unwrap_or_else(|| s.subject_mask.clone()),
            label,
            group,
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DetectorReport {
    pub validation: BinaryMetrics,
    pub train_groups: usize,
    pub val_groups: usize,
    pub mean_mask_error: f64,
    pub losses: Vec<(usize, f64)>,
}

/// Split groups deterministically; returns `(train, val)` example indices.
pub fn split_groups(examples: &[DetectorExample], val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut groups: Vec<usize> = examples.iter().map(|e| e.group).collect();
    groups.sort_unstable();
    groups.dedup();
    let mut rng = CounterRng::derive(seed, "detector-split", &[]);
    for i in (1..groups.len()).rev() {
        groups.swap(i, rng.below(i + 1));
    }
    let n_val = ((groups.len() as f64) * val_fraction).round() as usize;
    let val: std::collections::BTreeSet<usize> = groups[..n_val].iter().copied().collect();
    let (mut tr, mut va) = (Vec::new(), Vec::new());
    for (i, e) in examples.iter().enumerate() {
        if val.contains(&e.group) {
            va.push(i);
        } else {
            tr.push(i);
        }
    }
    (tr, va)
}

fn bce_logits<T: Scalar>(g: &mut Graph<T>, logits: Var, targets: Array<T>) -> Result<Var> {
    let y = g.constant(targets)?;
    let sp = g.softplus(logits)?;
    let yx = g.mul(y, logits)?;
    let l = g.sub(sp, yx)?;
    Ok(g.mean_all(l)?)
}

fn mask_crop_targets(batch: &DetectorBatch, masks: &[&Mask]) -> Array<f32> {
    let (w, h) = batch.size;
    let idx = batch.crop_index(1);
    let data = idx
        .iter()
        .map(|&i| if i == usize::MAX { 0.0 } else { masks[i / (w * h)].data[i % (w * h)] as f32 })
        .collect();
    Array::from_vec(&[batch.len(), CROP, CROP, 1], data).expect("mask targets")
}

pub fn detector_loss(
    g: &mut Graph<f32>,
    ps: &ParamStore<f32>,
    examples: &[&DetectorExample],
    mask_weight: f64,
) -> Result<Var> {
    let sm: Vec<&Mask> = examples.iter().map(|e| &e.subject_mask).collect();
    let batch = DetectorBatch::new(&sm)?;
    let imgs: Vec<&RgbImage> = examples.iter().map(|e| &e.image).collect();
    let x = g.constant(images_array(&imgs)?)?;
    let out = detector_forward(g, ps, x, &batch)?;
    let labels = Array::from_fn(&[examples.len(), 1], |i| examples[i].label as u8 as f32);
    let cls = bce_logits(g, out.logit, labels)?;
    let tm: Vec<&Mask> = examples.iter().map(|e| &e.true_mask).collect();
    let mloss = bce_logits(g, out.mask_logit, mask_crop_targets(&batch, &tm))?;
    let mloss = g.scale(mloss, mask_weight as f32)?;
    Ok(g.add(cls, mloss)?)
}

pub fn train_detector(examples: &[DetectorExample], cfg: &DetectorTrainConfig) -> Result<(ParamStore<f32>, DetectorReport)> {
    let pos = examples.iter().filter(|e| e.label).count();
    if examples.is_empty() {
        return input_err("empty detector dataset");
    }
    if (pos == 0 || pos == examples.len()) && !cfg.allow_single_class {
        return input_err("detector dataset holds a single class");
    }
    let (train, val) = split_groups(examples, cfg.val_fraction, cfg.seed);
    if train.is_empty() {
        return input_err("no training examples after the split");
    }
    let mut ps = init_detector::<f32>(cfg.seed)?;
    let mut opt = AdamW::new(AdamWConfig { lr: cfg.lr, ..AdamWConfig::default() });
    let mut losses = Vec::new();
    for step in 0..cfg.steps {
        let mut rng = CounterRng::derive(cfg.seed, "detector-batch", &[step as u64]);
        let batch: Vec<&DetectorExample> = (0..cfg.batch_size).map(|_| &examples[train[rng.below(train.len())]]).collect();
        let mut g = Graph::new();
        let loss = detector_loss(&mut g, &ps, &batch, cfg.mask_weight)?;
        let lv = g.value(loss).item() as f64;
        let grads = g.backward(loss)?.into_named(&ps);
        opt.step(&mut ps, &grads)?;
        if step % 50 == 0 || step + 1 == cfg.steps {
            log::info!("detector step {step} loss {lv:.4}");
            losses.push((step, lv));
        }
    }
    ps.freeze_all();
    let eval_idx = if val.is_empty() { &train } else { &val };
    let imgs: Vec<&RgbImage> = eval_idx.iter().map(|&i| &examples[i].image).collect();
    let masks: Vec<&Mask> = eval_idx.iter().map(|&i| &examples[i].subject_mask).collect();
    let mut scores_v = Vec::new();
    let mut mask_err = 0.0;
    for (ic, mc) in imgs.chunks(64).zip(masks.chunks(64)) {
        scores_v.extend(predict(&ps, ic, mc)?.into_iter().map(|p| p.score));
    }
    for &i in eval_idx {
        let e = &examples[i];
        if !e.label {
            let p = predict(&ps, &[&e.image], &[&e.subject_mask])?.remove(0);
            let err: f64 = p.mi.data().iter().zip(&e.subject_mask.data).map(|(&a, &b)| (a as f64 - b as f64).abs()).sum();
            mask_err += err / e.subject_mask.data.len() as f64;
        }
    }
    let n_clean = eval_idx.iter().filter(|&&i| !examples[i].label).count().max(1);
    let labels: Vec<bool> = eval_idx.iter().map(|&i| examples[i].label).collect();
    let report = DetectorReport {
        validation: binary_metrics(&scores_v, &labels),
        train_groups: train.len(),
        val_groups: val.len(),
        mean_mask_error: mask_err / n_clean as f64,
        losses,
    };
    Ok((ps, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasynth::{synth_extension_pair, SynthConfig};

    fn square_mask(x0: usize, y0: usize, s: usize) -> Mask {
        let mut m = Mask::new(64, 64);
        m.fill_rect(&PixelRect { x0, y0, x1: x0 + s, y1: y0 + s }, true);
        m
    }

    #[test]
    fn score_in_unit_interval_and_deterministic() {
        let ps = init_detector::<f32>(1).unwrap();
        let img = RgbImage::filled(64, 64, [100, 50, 200]);
        let m = square_mask(10, 12, 20);
        let a = predict(&ps, &[&img], &[&m]).unwrap();
        let b = predict(&ps, &[&img], &[&m]).unwrap();
        assert_eq!(a, b);
        assert!(a[0].score > 0.0 && a[0].score < 1.0);
        assert_eq!(a[0].mi.shape(), &[64, 64]);
    }

    #[test]
    fn difference_channel_zero_when_masks_agree_and_antisymmetric() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Array::from_fn(&[1, 4, 4, 1], |i| (i % 2) as f64)).unwrap();
        let b = g.constant(Array::from_fn(&[1, 4, 4, 1], |i| (i % 3 == 0) as u8 as f64)).unwrap();
        let d = g.sub(a, a).unwrap();
        assert!(g.value(d).data().iter().all(|&v| v == 0.0));
        let ab = g.sub(a, b).unwrap();
        let ba = g.sub(b, a).unwrap();
        assert!(g.value(ab).data().iter().zip(g.value(ba).data()).all(|(x, y)| *x == -*y));
    }

    #[test]
    fn pixels_outside_crop_do_not_matter() {
        let ps = init_detector::<f32>(2).unwrap();
        let m = square_mask(20, 20, 10);
        let mut img = RgbImage::filled(64, 64, [90, 90, 90]);
        let base = predict(&ps, &[&img], &[&m]).unwrap()[0].score;
        // window side 15 around center 25: pixels beyond x = 33 are outside
        for y in 0..64 {
            for x in 40..64 {
                img.put(x, y, [255, 0, 0]);
            }
        }
        assert_eq!(predict(&ps, &[&img], &[&m]).unwrap()[0].score, base);
        img.put(25, 25, [0, 255, 0]);
        assert_ne!(predict(&ps, &[&img], &[&m]).unwrap()[0].score, base);
    }

    #[test]
    fn parameter_count_near_target() {
        let n = init_detector::<f32>(0).unwrap().num_scalars();
        assert!((150_000..260_000).contains(&n), "{n}");
    }

    #[test]
    fn metrics_and_degenerate_sets() {
        let m = binary_metrics(&[0.9, 0.8, 0.2, 0.1], &[true, false, true, false]);
        assert_eq!((m.precision, m.recall, m.f1), (0.5, 0.5, 0.5));
        let all_neg = binary_metrics(&[0.1, 0.2], &[false, false]);
        assert_eq!(all_neg.f1, 0.0);

        let cfg = SynthConfig::default();
        let pair = synth_extension_pair(0, &cfg).unwrap();
        let ex = vec![DetectorExample::from_sample(&pair.clean, 0).unwrap(), DetectorExample::from_sample(&pair.clean, 1).unwrap()];
        let tc = DetectorTrainConfig { steps: 2, batch_size: 2, ..DetectorTrainConfig::default() };
        assert!(train_detector(&ex, &tc).is_err());
        let (_, rep) = train_detector(&ex, &DetectorTrainConfig { allow_single_class: true, ..tc }).unwrap();
        assert_eq!(rep.validation.f1, 0.0);
    }

    #[test]
    fn detector_gradient_matches_finite_differences() {
        let ps = init_detector::<f64>(3).unwrap();
        let m = square_mask(16, 18, 14);
        let batch = DetectorBatch::new(&[&m]).unwrap();
        let img = Array::from_fn(&[1, 64, 64, 3], |i| ((i * 37 % 101) as f64 / 50.0) - 1.0);
        let f = |p: &ParamStore<f64>| {
            let mut g = Graph::new();
            let x = g.constant(img.clone()).unwrap();
            let o = detector_forward(&mut g, p, x, &batch).unwrap();
            let l = g.sum_all(o.logit).unwrap();
            (g.value(l).item(), g)
        };
        let (_, mut g0) = f(&ps);
        let x = g0.constant(img.clone()).unwrap();
        let o = detector_forward(&mut g0, &ps, x, &batch).unwrap();
        let l = g0.sum_all(o.logit).unwrap();
        let grads = g0.backward(l).unwrap().into_named(&ps);
        for (name, k) in [("detector.e2.w", 17usize), ("detector.fc1.w", 5), ("detector.d2.w", 101)] {
            let mut p = ps.clone();
            let h = 1e-5;
            p.get_mut(name).unwrap().data_mut()[k] += h;
            let up = f(&p).0;
            p.get_mut(name).unwrap().data_mut()[k] -= 2.0 * h;
            let dn = f(&p).0;
            let fd = (up - dn) / (2.0 * h);
            let an = grads[name].data()[k];
            assert!((fd - an).abs() <= 1e-3 * fd.abs().max(an.abs()).max(1e-6), "{name}: {fd} vs {an}");
        }
    }
}
