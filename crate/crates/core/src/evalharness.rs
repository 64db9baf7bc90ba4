//! Template-matching OCR oracle and the poster metrics: sentence accuracy,
//! normalized edit distance, box IoU statistics and foreground checks.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{input_err, Result};
use crate::glyphrep::{ncc, GlyphBitmap};
use crate::image::{iou, BBox, Mask, PixelRect, RgbImage};

/// Cell sizes tried by the detection search.
pub const DETECT_CELLS: [usize; 3] = [6, 8, 10];
/// Minimum detection confidence for a string to count as present.
pub const DETECT_CONFIDENCE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OcrResult {
    pub s_pred: Vec<usize>,
    /// Best polarity-folded correlation per cell.
    pub scores: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub confidence: f64,
}

/// Area-average a square binary bitmap onto a `w x h` grid.
pub fn resample_glyph(g: &GlyphBitmap, w: usize, h: usize) -> Vec<f64> {
    let n = g.size as f64;
    let (sx, sy) = (n / w as f64, n / h as f64);
    let mut out = vec![0.0; w * h];
    for oy in 0..h {
        let (y0, y1) = (oy as f64 * sy, (oy + 1) as f64 * sy);
        for ox in 0..w {
            let (x0, x1) = (ox as f64 * sx, (ox + 1) as f64 * sx);
            let mut acc = 0.0;
            for py in y0.floor() as usize..(y1.ceil() as usize).min(g.size) {
                let wy = (y1.min(py as f64 + 1.0) - y0.max(py as f64)).max(0.0);
                for px in x0.floor() as usize..(x1.ceil() as usize).min(g.size) {
                    let wx = (x1.min(px as f64 + 1.0) - x0.max(px as f64)).max(0.0);
                    if g.get(px, py) {
                        acc += wx * wy;
                    }
                }
            }
            out[oy * w + ox] = acc / (sx * sy);
        }
    }
    out
}

/// Otsu threshold over values in `[0, 1]` (256 bins); returns the cut value.
pub fn otsu_threshold(values: &[f64]) -> f64 {
    let mut hist = [0usize; 256];
    for &v in values {
        hist[(v.clamp(0.0, 1.0) * 255.0).round() as usize] += 1;
    }
    let total = values.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0, mut best, mut cut) = (0.0, 0.0, -1.0, 0usize);
    for (i, &c) in hist.iter().enumerate() {
        w0 += c as f64;
        if w0 == 0.0 {
            continue;
        }
        let w1 = total - w0;
        if w1 == 0.0 {
            break;
        }
        sum0 += i as f64 * c as f64;
        let (m0, m1) = (sum0 / w0, (sum_all - sum0) / w1);
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if between > best {
            best = between;
            cut = i;
        }
    }
    (cut as f64 + 0.5) / 255.0
}

fn luminance_crop(img: &RgbImage, r: &PixelRect) -> Vec<f64> {
    let mut out = Vec::with_capacity(r.area());
    for y in r.y0..r.y1 {
        for x in r.x0..r.x1 {
            out.push(img.luminance(x, y));
        }
    }
    out
}

fn cell_bounds(k: usize, n: usize, len: usize) -> (usize, usize) {
    ((k * len + n / 2) / n, ((k + 1) * len + n / 2) / n)
}

fn sub_block(src: &[f64], stride: usize, x0: usize, x1: usize, y0: usize, y1: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity((x1 - x0) * (y1 - y0));
    for y in y0..y1 {
        out.extend_from_slice(&src[y * stride + x0..y * stride + x1]);
    }
    out
}

/// Read `n_chars` characters inside `bbox`: binarize the crop, split it into
/// equal cells and pick the template with the largest polarity-folded
/// correlation per cell. Ties go to the lowest char id.
pub fn ocr_recognize(img: &RgbImage, bbox: &BBox, glyphs: &[GlyphBitmap], n_chars: usize) -> Result<OcrResult> {
    if n_chars == 0 {
        return input_err("n_chars must be positive");
    }
    if glyphs.is_empty() {
        return input_err("no glyph templates");
    }
    let r = bbox.to_pixels(img.width, img.height);
    if r.area() == 0 {
        return input_err(format!("zero-area bbox {bbox:?}"));
    }
    let lum = luminance_crop(img, &r);
    let thr = otsu_threshold(&lum);
    let bin: Vec<f64> = lum.iter().map(|&v| (v > thr) as u8 as f64).collect();
    let (w, h) = (r.width(), r.height());
    let mut s_pred = Vec::with_capacity(n_chars);
    let mut scores = Vec::with_capacity(n_chars);
    for k in 0..n_chars {
        let (x0, x1) = cell_bounds(k, n_chars, w);
        if x1 <= x0 {
            s_pred.push(0);
            scores.push(0.0);
            continue;
        }
        let cell = sub_block(&bin, w, x0, x1, 0, h);
        let (mut best_id, mut best) = (glyphs[0].char_id, f64::NEG_INFINITY);
        for g in glyphs {
            let c = ncc(&cell, &resample_glyph(g, x1 - x0, h));
            let s = c.max(-c);
            if s > best {
                best = s;
                best_id = g.char_id;
            }
        }
        s_pred.push(best_id);
        scores.push(best);
    }
    Ok(OcrResult { s_pred, scores })
}

/// Exhaustive search for the placement of `s_gt` maximizing the mean
/// per-character grayscale correlation (folded over line polarity).
pub fn ocr_detect(img: &RgbImage, s_gt: &[usize], glyphs: &[GlyphBitmap]) -> Result<Detection> {
    if s_gt.is_empty() {
        return input_err("empty target string");
    }
    let lum = luminance_crop(img, &PixelRect { x0: 0, y0: 0, x1: img.width, y1: img.height });
    let mut best = Detection { bbox: BBox::new(0.0, 0.0, 1.0, 1.0), confidence: f64::NEG_INFINITY };
    for &cell in &DETECT_CELLS {
        let (w, h) = (cell * s_gt.len(), cell);
        if w > img.width || h > img.height {
            continue;
        }
        let mut templates = Vec::with_capacity(s_gt.len());
        for &c in s_gt {
            let g = glyphs.iter().find(|g| g.char_id == c);
            let Some(g) = g else { return input_err(format!("no template for char {c}")) };
            templates.push(resample_glyph(g, cell, cell));
        }
        for y0 in 0..=img.height - h {
            for x0 in 0..=img.width - w {
                let mut sum = 0.0;
                for (k, t) in templates.iter().enumerate() {
                    let cx = x0 + k * cell;
                    sum += ncc(&sub_block(&lum, img.width, cx, cx + cell, y0, y0 + h), t);
                }
                let mean = sum / s_gt.len() as f64;
                let score = mean.max(-mean);
                if score > best.confidence {
                    let r = PixelRect { x0, y0, x1: x0 + w, y1: y0 + h };
                    best = Detection { bbox: BBox::from_pixels(r, img.width, img.height), confidence: score };
                }
            }
        }
    }
    if best.confidence == f64::NEG_INFINITY {
        best.confidence = 0.0;
    }
    Ok(best)
}

pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + (x != y) as usize;
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `1 - lev / max(len)`; both empty is an error.
pub fn ned<T: PartialEq>(pred: &[T], gt: &[T]) -> Result<f64> {
    let m = pred.len().max(gt.len());
    if m == 0 {
        return input_err("ned of two empty strings");
    }
    Ok(1.0 - levenshtein(pred, gt) as f64 / m as f64)
}

pub fn sen_acc<T: PartialEq>(preds: &[Vec<T>], gts: &[Vec<T>]) -> Result<f64> {
    if preds.len() != gts.len() {
        return input_err(format!("{} predictions for {} references", preds.len(), gts.len()));
    }
    if preds.is_empty() {
        return input_err("sentence accuracy of an empty list");
    }
    Ok(preds.iter().zip(gts).filter(|(p, g)| p == g).count() as f64 / preds.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IouStats {
    pub miou: f64,
    pub iou_at_05: f64,
    pub iou_at_07: f64,
}

/// Mean IoU and fraction of IoUs strictly above 0.5 and 0.7.
pub fn iou_stats(ious: &[f64]) -> IouStats {
    if ious.is_empty() {
        return IouStats { miou: 0.0, iou_at_05: 0.0, iou_at_07: 0.0 };
    }
    let n = ious.len() as f64;
    IouStats {
        miou: ious.iter().sum::<f64>() / n,
        iou_at_05: ious.iter().filter(|&&v| v > 0.5).count() as f64 / n,
        iou_at_07: ious.iter().filter(|&&v| v > 0.7).count() as f64 / n,
    }
}

/// Per-line detection IoU against each generated image.
pub fn text_iou_metrics(
    specs: &[&crate::glyphrep::TextSpec],
    images: &[RgbImage],
    glyphs: &[GlyphBitmap],
) -> Result<(IouStats, Vec<f64>)> {
    use rayon::prelude::*;
    if specs.len() != images.len() {
        return input_err("spec and image counts differ");
    }
    let per: Vec<Result<Vec<f64>>> = specs
        .par_iter()
        .zip(images.par_iter())
        .map(|(s, img)| {
            s.lines.iter().map(|l| Ok(iou(&ocr_detect(img, &l.content, glyphs)?.bbox, &l.bbox))).collect()
        })
        .collect();
    let mut ious = Vec::new();
    for p in per {
        ious.extend(p?);
    }
    Ok((iou_stats(&ious), ious))
}

/// Fraction of detector scores above 0.5 and the mean per-sample squared error
/// inside the subject mask (images as `[-1, 1]` values).
pub fn fg_metrics(scores: &[f64], inputs: &[RgbImage], generated: &[RgbImage], masks: &[Mask]) -> Result<(f64, f64)> {
    if scores.len() != inputs.len() || inputs.len() != generated.len() || generated.len() != masks.len() {
        return input_err("foreground metric inputs differ in length");
    }
    if scores.is_empty() {
        return input_err("no samples for foreground metrics");
    }
    let ratio = scores.iter().filter(|&&s| s > 0.5).count() as f64 / scores.len() as f64;
    let mut total = 0.0;
    for ((a, b), m) in inputs.iter().zip(generated).zip(masks) {
        let (mut se, mut n) = (0.0, 0usize);
        for i in 0..m.data.len() {
            if m.data[i] == 0 {
                continue;
            }
            for c in 0..3 {
                let d = (a.data[3 * i + c] as f64 - b.data[3 * i + c] as f64) / 127.5;
                se += d * d;
            }
            n += 3;
        }
        total += if n > 0 { se / n as f64 } else { 0.0 };
    }
    Ok((ratio, total / scores.len() as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub sen_acc: f64,
    pub ned: f64,
    pub miou: f64,
    pub iou_at_05: f64,
    pub iou_at_07: f64,
    pub fg_ext_ratio: Option<f64>,
    pub fg_preserve_mse: f64,
    pub n_samples: usize,
    pub n_lines: usize,
    pub config_hash: String,
    pub fid: Option<f64>,
    pub clip_t: Option<f64>,
}

pub fn config_hash(value: &impl Serialize) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Recognition over every line: returns `(sen_acc, mean ned, per-line predictions)`.
pub fn recognition_metrics(
    specs: &[&crate::glyphrep::TextSpec],
    images: &[RgbImage],
    glyphs: &[GlyphBitmap],
) -> Result<(f64, f64, Vec<Vec<usize>>)> {
    use rayon::prelude::*;
    if specs.len() != images.len() {
        return input_err("spec and image counts differ");
    }
    let per: Vec<Result<Vec<(Vec<usize>, Vec<usize>)>>> = specs
        .par_iter()
        .zip(images.par_iter())
        .map(|(s, img)| {
            s.lines
                .iter()
                .map(|l| Ok((ocr_recognize(img, &l.bbox, glyphs, l.content.len())?.s_pred, l.content.clone())))
                .collect()
        })
        .collect();
    let (mut preds, mut gts) = (Vec::new(), Vec::new());
    for p in per {
        for (a, b) in p? {
            preds.push(a);
            gts.push(b);
        }
    }
    let acc = sen_acc(&preds, &gts)?;
    let mut total = 0.0;
    for (p, g) in preds.iter().zip(&gts) {
        total += ned(p, g)?;
    }
    Ok((acc, total / preds.len() as f64, preds))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasynth::{self, SynthConfig};
    use crate::glyphrep::{render_alphabet, GLYPH_SIZE};

    fn brute(a: &[u8], b: &[u8]) -> usize {
        match (a.split_first(), b.split_first()) {
            (None, _) => b.len(),
            (_, None) => a.len(),
            (Some((x, ra)), Some((y, rb))) => {
                let sub = brute(ra, rb) + (x != y) as usize;
                sub.min(brute(ra, b) + 1).min(brute(a, rb) + 1)
            }
        }
    }

    #[test]
    fn levenshtein_known_values() {
        assert_eq!(levenshtein(b"kitten", b"sitting"), 3);
        assert!((ned(b"kitten", b"sitting").unwrap() - 4.0 / 7.0).abs() < 1e-12);
        assert_eq!(ned(b"abc", b"abc").unwrap(), 1.0);
        assert_eq!(ned(b"", b"abc").unwrap(), 0.0);
        assert!(ned::<u8>(b"", b"").is_err());
        for (a, b) in [(&b"abca"[..], &b"cab"[..]), (b"", b"dd"), (b"abcd", b"dcba")] {
            assert_eq!(levenshtein(a, b), brute(a, b));
        }
    }

    #[test]
    fn sen_acc_contract() {
        assert_eq!(sen_acc(&[vec![1], vec![2]], &[vec![1], vec![2]]).unwrap(), 1.0);
        assert_eq!(sen_acc(&[vec![1], vec![3]], &[vec![1], vec![2]]).unwrap(), 0.5);
        assert!(sen_acc::<u8>(&[], &[]).is_err());
        assert!(sen_acc(&[vec![1]], &[]).is_err());
    }

    #[test]
    fn iou_stats_thresholds_are_strict() {
        let s = iou_stats(&[0.5, 0.7, 1.0, 0.0]);
        assert_eq!(s.iou_at_05, 0.5);
        assert_eq!(s.iou_at_07, 0.25);
        assert!((s.miou - 0.55).abs() < 1e-12);
    }

    #[test]
    fn otsu_splits_two_levels() {
        let v: Vec<f64> = (0..100).map(|i| if i % 3 == 0 { 0.1 } else { 0.6 }).collect();
        let t = otsu_threshold(&v);
        assert!(t > 0.1 && t < 0.6);
    }

    #[test]
    fn resample_identity_and_halving() {
        let g = &render_alphabet(4, 0, GLYPH_SIZE).unwrap()[2];
        let same = resample_glyph(g, 16, 16);
        assert!(same.iter().zip(&g.pixels).all(|(a, &b)| (a - b as f64).abs() < 1e-12));
        let half = resample_glyph(g, 8, 8);
        assert!((half.iter().sum::<f64>() * 4.0 - g.lit() as f64).abs() < 1e-9);
    }

    #[test]
    fn clean_renders_read_back_exactly() {
        let cfg = SynthConfig::default();
        let glyphs = render_alphabet(cfg.alphabet_size, cfg.font_seed, GLYPH_SIZE).unwrap();
        let mut lines = 0;
        for seed in 0..40 {
            let Ok(s) = datasynth::synth_sample(seed, &cfg) else { continue };
            for l in &s.text.lines {
                let r = ocr_recognize(&s.image, &l.bbox, &glyphs, l.content.len()).unwrap();
                assert_eq!(r.s_pred, l.content, "seed {seed}");
                assert!(r.scores.iter().all(|&v| (-1.0..=1.0 + 1e-12).contains(&v)));
                lines += 1;
            }
        }
        assert!(lines > 40);
    }

    #[test]
    fn detection_finds_clean_boxes_and_rejects_blank() {
        let cfg = SynthConfig::default();
        let glyphs = render_alphabet(cfg.alphabet_size, cfg.font_seed, GLYPH_SIZE).unwrap();
        let s = datasynth::synth_sample(3, &cfg).unwrap();
        for l in &s.text.lines {
            let d = ocr_detect(&s.image, &l.content, &glyphs).unwrap();
            assert!(iou(&d.bbox, &l.bbox) >= 0.9, "{:?} vs {:?}", d.bbox, l.bbox);
            assert!(d.confidence > 0.8);
        }
        let blank = RgbImage::filled(64, 64, [120, 130, 140]);
        let d = ocr_detect(&blank, &[1, 2, 3], &glyphs).unwrap();
        assert!(d.confidence < DETECT_CONFIDENCE);
    }

    #[test]
    fn recognition_rejects_bad_inputs() {
        let glyphs = render_alphabet(4, 0, GLYPH_SIZE).unwrap();
        let img = RgbImage::new(64, 64);
        assert!(ocr_recognize(&img, &BBox::new(0.1, 0.1, 0.1, 0.3), &glyphs, 2).is_err());
        assert!(ocr_recognize(&img, &BBox::new(0.1, 0.1, 0.4, 0.3), &glyphs, 0).is_err());
        // constant crop: every template ties at 0, lowest id wins
        let r = ocr_recognize(&img, &BBox::new(0.1, 0.1, 0.4, 0.3), &glyphs, 2).unwrap();
        assert_eq!(r.s_pred, vec![0, 0]);
    }

    #[test]
    fn fg_metric_cases() {
        let a = RgbImage::filled(4, 4, [10, 20, 30]);
        let m = Mask::full(4, 4);
        let (r, e) = fg_metrics(&[0.1], &[a.clone()], &[a.clone()], &[m.clone()]).unwrap();
        assert_eq!((r, e), (0.0, 0.0));
        let b = RgbImage::filled(4, 4, [10 + 51, 20, 30]);
        let (_, e) = fg_metrics(&[0.9], &[a], &[b], &[m]).unwrap();
        assert!((e - (0.4f64 * 0.4) / 3.0).abs() < 1e-12);
    }
}
