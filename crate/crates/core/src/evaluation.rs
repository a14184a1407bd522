//! Pointing game, mask binarization, IOU and segmentation mAP.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::model::{AttentionMask, Model};
use crate::raster::{write_gray, BinaryMask};
use crate::scenes::{BoundingBox, SceneSample, Shape};
use crate::tensor::Tensor;

pub const IOU_THRESHOLDS: [f64; 3] = [0.3, 0.4, 0.5];

/// How to pick among cells that share the maximum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TieBreak {
    #[default]
    Lowest,
    Random(u64),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointingResult {
    pub hits: Vec<bool>,
}

impl PointingResult {
    pub fn from_counts(hits: usize, misses: usize) -> Self {
        PointingResult { hits: std::iter::repeat(true).take(hits).chain(std::iter::repeat(false).take(misses)).collect() }
    }

    pub fn hit_count(&self) -> usize {
        self.hits.iter().filter(|&&h| h).count()
    }

    pub fn miss_count(&self) -> usize {
        self.hits.len() - self.hit_count()
    }

    pub fn accuracy(&self) -> f64 {
        if self.hits.is_empty() {
            return 0.0;
        }
        self.hit_count() as f64 / self.hits.len() as f64
    }

    pub fn to_json(&self) -> Value {
        json!({"pointing": {"hits": self.hit_count(), "misses": self.miss_count(), "accuracy": self.accuracy()}})
    }
}

/// Pixel `(x, y)` at the center of the chosen maximum cell.
pub fn point(mask: &AttentionMask, image_size: usize, tie: TieBreak, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let (r, c) = match tie {
        TieBreak::Lowest => mask.argmax(),
        TieBreak::Random(_) => {
            let d = mask.logits().data();
            let best = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let ties: Vec<usize> = (0..d.len()).filter(|&i| d[i] == best).collect();
            let i = ties[rng.gen_range(0..ties.len())];
            (i / mask.width(), i % mask.width())
        }
    };
    let dy = image_size as f64 / mask.height() as f64;
    let dx = image_size as f64 / mask.width() as f64;
    ((c as f64 + 0.5) * dx, (r as f64 + 0.5) * dy)
}

/// One pointing query: a phrase and the box it should land in.
#[derive(Debug, Clone, PartialEq)]
pub struct PointingRecord {
    pub scene: usize,
    pub phrase: Vec<String>,
    pub bbox: BoundingBox,
}

/// One record per object, phrased as in the captions ("a red circle").
pub fn pointing_records(scenes: &[SceneSample]) -> Vec<PointingRecord> {
    scenes
        .iter()
        .enumerate()
        .flat_map(|(i, s)| s.objects.iter().map(move |o| PointingRecord { scene: i, phrase: o.phrase(), bbox: o.bbox }))
        .collect()
}

/// Score masks against boxes.
pub fn pointing_from_masks(
    masks: &[(AttentionMask, BoundingBox)],
    image_size: usize,
    tie: TieBreak,
) -> PointingResult {
    let seed = match tie {
        TieBreak::Random(s) => s,
        TieBreak::Lowest => 0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hits = masks
        .iter()
        .map(|(m, b)| {
            let (x, y) = point(m, image_size, tie, &mut rng);
            b.contains(x, y)
        })
        .collect();
    PointingResult { hits }
}

pub fn pointing_game(model: &Model, scenes: &[SceneSample], tie: TieBreak) -> Result<PointingResult> {
    let size = model.config().image_size;
    let mut masks = Vec::new();
    for (i, s) in scenes.iter().enumerate() {
        let prepared = model.prepare_image(&s.image)?;
        for rec in pointing_records(std::slice::from_ref(s)) {
            let b = rec.bbox;
            if b.x1 >= size || b.y1 >= size || b.x0 > b.x1 || b.y0 > b.y1 {
                return Err(Error::Invalid(format!("scene {i}: box {b:?} outside the image")));
            }
            let code = model.encode_phrase(&rec.phrase)?;
            masks.push((prepared.mask(&code)?, b));
        }
    }
    Ok(pointing_from_masks(&masks, size, tie))
}

/// Expected accuracy of pointing at a uniformly random pixel: mean box area fraction.
pub fn random_baseline(scenes: &[SceneSample]) -> f64 {
    let recs = pointing_records(scenes);
    if recs.is_empty() {
        return 0.0;
    }
    let total: f64 = recs
        .iter()
        .map(|r| {
            let s = &scenes[r.scene].image;
            r.bbox.area() as f64 / (s.shape()[0] * s.shape()[1]) as f64
        })
        .sum();
    total / recs.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Threshold {
    /// Midpoint of the mask's value range.
    #[default]
    Midpoint,
    /// Half the value range, compared against absolute values.
    HalfRange,
}

/// Foreground `{A > θ}` and its mean attention (0 when empty).
pub fn binarize_mask(mask: &Tensor, rule: Threshold) -> Result<(BinaryMask, f64)> {
    if mask.rank() != 2 || mask.is_empty() {
        return Err(Error::shape("binarize_mask", &[mask.shape()]));
    }
    let d = mask.data();
    let lo = d.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let theta = match rule {
        Threshold::Midpoint => lo + 0.5 * (hi - lo),
        Threshold::HalfRange => 0.5 * (hi - lo),
    };
    let bits: Vec<bool> = d.iter().map(|&v| v > theta).collect();
    let fg: Vec<f64> = d.iter().zip(&bits).filter(|(_, &b)| b).map(|(&v, _)| v).collect();
    let score = if fg.is_empty() { 0.0 } else { fg.iter().sum::<f64>() / fg.len() as f64 };
    Ok((BinaryMask::new(mask.shape()[0], mask.shape()[1], bits)?, score))
}

pub fn iou(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape("iou", &[&pred.shape(), &gt.shape()]));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&a, &b) in pred.bits().iter().zip(gt.bits()) {
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

/// All-point interpolated AP of `(score, iou)` predictions at IOU threshold `t`.
///
/// Predictions are ranked by descending score (ties keep input order); a
/// prediction is relevant when its IOU reaches `t`. Returns 0 with no relevant
/// predictions.
pub fn average_precision(preds: &[(f64, f64)], t: f64) -> f64 {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].0.total_cmp(&preds[a].0));
    let relevant: Vec<bool> = order.iter().map(|&i| preds[i].1 >= t).collect();
    let total = relevant.iter().filter(|&&r| r).count();
    if total == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(relevant.len());
    let mut hits = 0;
    for (k, &r) in relevant.iter().enumerate() {
        hits += r as usize;
        precision.push(hits as f64 / (k + 1) as f64);
    }
    // interpolate: best precision at this rank or later
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    relevant.iter().zip(&precision).filter(|(&r, _)| r).map(|(_, &p)| p).sum::<f64>() / total as f64
}

fn threshold_key(t: f64) -> String {
    format!("{t:.1}")
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SegmentationResult {
    /// category → threshold key → AP
    pub per_category: BTreeMap<String, BTreeMap<String, f64>>,
    pub map: BTreeMap<String, f64>,
    pub avg_map: f64,
    /// Categories absent from every image.
    pub excluded: Vec<String>,
}

impl SegmentationResult {
    /// Aggregate per-category predictions; `None` marks an absent category.
    pub fn from_predictions(preds: &BTreeMap<String, Option<Vec<(f64, f64)>>>, thresholds: &[f64]) -> Self {
        let mut r = SegmentationResult::default();
        for (cat, p) in preds {
            match p {
                None => r.excluded.push(cat.clone()),
                Some(p) => {
                    let aps = thresholds.iter().map(|&t| (threshold_key(t), average_precision(p, t))).collect();
                    r.per_category.insert(cat.clone(), aps);
                }
            }
        }
        for &t in thresholds {
            let k = threshold_key(t);
            let vals: Vec<f64> = r.per_category.values().map(|m| m[&k]).collect();
            let m = if vals.is_empty() { 0.0 } else { vals.iter().sum::<f64>() / vals.len() as f64 };
            r.map.insert(k, m);
        }
        r.avg_map = if r.map.is_empty() { 0.0 } else { r.map.values().sum::<f64>() / r.map.len() as f64 };
        r
    }

    pub fn to_json(&self) -> Value {
        json!({"segmentation": {
            "per_category": self.per_category,
            "map": self.map,
            "avg_map": self.avg_map,
            "excluded": self.excluded,
        }})
    }
}

/// Category labels as single-token phrases, scored against merged per-image masks.
pub fn segmentation_map(
    model: &Model,
    scenes: &[SceneSample],
    thresholds: &[f64],
    rule: Threshold,
) -> Result<SegmentationResult> {
    let mut preds: BTreeMap<String, Option<Vec<(f64, f64)>>> = BTreeMap::new();
    let prepared = scenes.iter().map(|s| model.prepare_image(&s.image)).collect::<Result<Vec<_>>>()?;
    for &shape in Shape::ALL {
        let cat = shape.to_string();
        if !scenes.iter().any(|s| s.objects.iter().any(|o| o.shape == shape)) {
            preds.insert(cat, None);
            continue;
        }
        let code = model.encode_phrase(&[cat.as_str()])?;
        let mut list = Vec::with_capacity(scenes.len());
        for (s, p) in scenes.iter().zip(&prepared) {
            let mask = p.mask(&code)?;
            let (pred, score) = binarize_mask(mask.values(), rule)?;
            let (h, w) = (s.image.shape()[0], s.image.shape()[1]);
            let mut gt = BinaryMask::empty(h, w);
            for o in s.objects.iter().filter(|o| o.shape == shape) {
                gt.union_with(&o.mask)?;
            }
            let factor = h / mask.height();
            list.push((score, iou(&pred, &gt.max_pool(factor)?)?));
        }
        preds.insert(cat, Some(list));
    }
    Ok(SegmentationResult::from_predictions(&preds, thresholds))
}

/// Lowercase, alphanumerics kept, everything else collapsed to `-`.
pub fn slugify(phrase: &str) -> String {
    let mut out = String::new();
    for ch in phrase.to_lowercase().chars() {
        if ch.is_alphanumeric() {
            out.push(ch);
        } else if !out.ends_with('-') && !out.is_empty() {
            out.push('-');
        }
    }
    while out.ends_with('-') {
        out.pop();
    }
    if out.is_empty() {
        out.push_str("phrase");
    }
    out
}

/// Write one grayscale PGM per phrase; returns the file paths.
pub fn export_masks(model: &Model, image: &Tensor, phrases: &[String], dir: &Path) -> Result<Vec<PathBuf>> {
    if phrases.is_empty() {
        return Ok(Vec::new());
    }
    let prepared = model.prepare_image(image)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut used = BTreeMap::new();
    let mut out = Vec::new();
    for p in phrases {
        let tokens: Vec<&str> = p.split_whitespace().collect();
        let mask = prepared.mask(&model.encode_phrase(&tokens)?)?;
        let slug = slugify(p);
        let n = used.entry(slug.clone()).or_insert(0usize);
        let name = if *n == 0 { format!("{slug}.pgm") } else { format!("{slug}-{n}.pgm") };
        *n += 1;
        let path = dir.join(name);
        write_gray(&path, mask.values())?;
        out.push(path);
    }
    Ok(out)
}
