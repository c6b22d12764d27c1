//! Self-training: cross-entropy losses, pseudo labels, confidence weighting,
//! EMA teacher updates, class-balanced cropping and rare-class sampling.

use crate::contrast::LossValue;
use crate::error::{dim_err, Error, Result};
use crate::grid::{LabelGrid, IGNORE};
use crate::num::lse_unchecked;
use crate::rng::Rng;

/// Default confidence threshold for the pseudo-label weight.
pub const DEFAULT_ALPHA: f64 = 0.968;
/// Default EMA momentum.
pub const DEFAULT_BETA: f64 = 0.999;
/// Default number of random crop candidates.
pub const DEFAULT_CROP_TRIALS: usize = 10;
/// Default maximum share of a single class inside a scored crop.
pub const DEFAULT_CAT_MAX_RATIO: f64 = 0.75;

/// Per-pixel class probabilities (and their logs) on an `height x width` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbGrid {
    height: usize,
    width: usize,
    classes: usize,
    probs: Vec<f64>,
    log_probs: Vec<f64>,
}

impl ProbGrid {
    /// Softmax of per-pixel logits, `height * width * classes` values.
    pub fn from_logits(height: usize, width: usize, classes: usize, logits: &[f64]) -> Result<Self> {
        Self::check_dims(height, width, classes, logits.len())?;
        let mut log_probs = Vec::with_capacity(logits.len());
        for z in logits.chunks_exact(classes) {
            let lse = lse_unchecked(z);
            log_probs.extend(z.iter().map(|v| v - lse));
        }
        let probs = log_probs.iter().map(|l| l.exp()).collect();
        Ok(Self {
            height,
            width,
            classes,
            probs,
            log_probs,
        })
    }

    /// Explicit probabilities; each pixel must be non-negative and sum to 1.
    pub fn new(height: usize, width: usize, classes: usize, probs: Vec<f64>) -> Result<Self> {
        Self::check_dims(height, width, classes, probs.len())?;
        for (i, p) in probs.chunks_exact(classes).enumerate() {
            let sum: f64 = p.iter().sum();
            if p.iter().any(|&v| !(v >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Argument(format!("pixel {i} is not a probability vector")));
            }
        }
        let log_probs = probs.iter().map(|p| p.ln()).collect();
        Ok(Self {
            height,
            width,
            classes,
            probs,
            log_probs,
        })
    }

    fn check_dims(height: usize, width: usize, classes: usize, len: usize) -> Result<()> {
        if height == 0 || width == 0 || classes == 0 {
            return Err(Error::Argument("probability grid dimensions must be positive".into()));
        }
        if len != height * width * classes {
            return Err(dim_err("probability grid values", height * width * classes, len));
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pixel(&self, i: usize) -> &[f64] {
        &self.probs[i * self.classes..(i + 1) * self.classes]
    }

    pub fn log_pixel(&self, i: usize) -> &[f64] {
        &self.log_probs[i * self.classes..(i + 1) * self.classes]
    }

    pub fn max_prob(&self, i: usize) -> f64 {
        self.pixel(i).iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Sub-grid starting at `(top, left)`.
    pub fn crop(&self, b: &CropBox) -> Result<Self> {
        if b.top + b.height > self.height || b.left + b.width > self.width {
            return Err(Error::Argument("crop window outside the grid".into()));
        }
        let k = self.classes;
        let mut probs = Vec::with_capacity(b.height * b.width * k);
        let mut log_probs = Vec::with_capacity(b.height * b.width * k);
        for r in b.top..b.top + b.height {
            let start = (r * self.width + b.left) * k;
            let end = start + b.width * k;
            probs.extend_from_slice(&self.probs[start..end]);
            log_probs.extend_from_slice(&self.log_probs[start..end]);
        }
        Ok(Self {
            height: b.height,
            width: b.width,
            classes: k,
            probs,
            log_probs,
        })
    }
}

/// Cross-entropy against `labels`, averaged over non-IGNORE pixels.
///
/// Gradients are per pixel with respect to the logits, `(p - onehot) / N`;
/// IGNORE pixels get zero gradients. With every pixel ignored the loss is 0.
pub fn source_ce(probs: &ProbGrid, labels: &LabelGrid) -> Result<LossValue> {
    labels.same_shape(probs.height, probs.width)?;
    if labels.num_classes() > probs.classes {
        return Err(dim_err("class count", probs.classes, labels.num_classes()));
    }
    let valid = (0..labels.len()).filter(|&i| labels.get(i) != IGNORE).count();
    let mut grads = vec![vec![0.0; probs.classes]; probs.len()];
    if valid == 0 {
        return Ok(LossValue { value: 0.0, grads });
    }
    let n = valid as f64;
    let mut terms = Vec::with_capacity(valid);
    for (i, g) in grads.iter_mut().enumerate() {
        let Some(k) = labels.class_of(i) else { continue };
        terms.push(-probs.log_pixel(i)[k]);
        for (gj, p) in g.iter_mut().zip(probs.pixel(i)) {
            *gj = p / n;
        }
        g[k] -= 1.0 / n;
    }
    Ok(LossValue {
        value: crate::num::pairwise_sum(&terms) / n,
        grads,
    })
}

/// Per-pixel argmax; ties go to the lowest class index.
pub fn pseudo_labels(teacher: &ProbGrid) -> LabelGrid {
    let labels = (0..teacher.len())
        .map(|i| {
            let p = teacher.pixel(i);
            let mut best = 0;
            for (k, &v) in p.iter().enumerate().skip(1) {
                if v > p[best] {
                    best = k;
                }
            }
            best as u32
        })
        .collect();
    LabelGrid::new(teacher.height, teacher.width, teacher.classes, labels)
        .expect("argmax labels are in range")
}

/// Image-level confidence weight in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct ConfWeight(f64);

impl ConfWeight {
    pub fn new(w: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&w) {
            return Err(Error::Argument(format!("confidence weight {w} outside [0, 1]")));
        }
        Ok(Self(w))
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

/// Share of all `H * W` pixels whose maximum probability exceeds `alpha`.
pub fn confidence_weight(teacher: &ProbGrid, alpha: f64) -> Result<ConfWeight> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Argument(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let confident = (0..teacher.len()).filter(|&i| teacher.max_prob(i) > alpha).count();
    ConfWeight::new(confident as f64 / teacher.len() as f64)
}

/// `w`-scaled cross-entropy against pseudo labels.
pub fn target_ssl(student: &ProbGrid, pseudo: &LabelGrid, w: ConfWeight) -> Result<LossValue> {
    Ok(source_ce(student, pseudo)?.scaled(w.get()))
}

/// `teacher <- beta * teacher + (1 - beta) * student`, elementwise.
pub fn ema_update(teacher: &mut [f64], student: &[f64], beta: f64) -> Result<()> {
    if teacher.len() != student.len() {
        return Err(dim_err("parameter count", teacher.len(), student.len()));
    }
    if !(0.0..1.0).contains(&beta) {
        return Err(Error::Argument(format!("momentum must lie in [0, 1), got {beta}")));
    }
    for (t, s) in teacher.iter_mut().zip(student) {
        *t = beta * *t + (1.0 - beta) * s;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CropBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl CropBox {
    pub fn full(height: usize, width: usize) -> Self {
        Self {
            top: 0,
            left: 0,
            height,
            width,
        }
    }
}

fn check_crop(image_h: usize, image_w: usize, crop_h: usize, crop_w: usize) -> Result<()> {
    if crop_h == 0 || crop_w == 0 {
        return Err(Error::Argument("crop dimensions must be positive".into()));
    }
    if crop_h > image_h || crop_w > image_w {
        return Err(Error::Argument(format!(
            "crop {crop_h}x{crop_w} larger than image {image_h}x{image_w}"
        )));
    }
    Ok(())
}

/// Uniformly random `crop_h x crop_w` box inside the image.
pub fn random_crop_box(image_h: usize, image_w: usize, crop_h: usize, crop_w: usize, rng: &mut Rng) -> Result<CropBox> {
    check_crop(image_h, image_w, crop_h, crop_w)?;
    Ok(CropBox {
        top: rng.below(image_h - crop_h + 1),
        left: rng.below(image_w - crop_w + 1),
        height: crop_h,
        width: crop_w,
    })
}

/// `sum_c log(count_c)` over the classes present in the crop when the largest
/// class share is below `cat_max_ratio`, otherwise 0. IGNORE pixels are not
/// counted; a crop with no labelled pixel scores 0.
pub fn crop_score(labels: &LabelGrid, b: &CropBox, cat_max_ratio: f64) -> f64 {
    let mut counts = vec![0u64; labels.num_classes()];
    for r in b.top..b.top + b.height {
        for c in b.left..b.left + b.width {
            let l = labels.at(r, c);
            if l != IGNORE {
                counts[l as usize] += 1;
            }
        }
    }
    let total: u64 = counts.iter().sum();
    let max = counts.iter().copied().max().unwrap_or(0);
    if total == 0 || (max as f64 / total as f64) >= cat_max_ratio {
        return 0.0;
    }
    counts.iter().filter(|&&c| c > 0).map(|&c| (c as f64).ln()).sum()
}

/// Highest-scoring candidate; ties keep the earliest box. Returns the box and
/// its score.
pub fn select_crop(labels: &LabelGrid, candidates: &[CropBox], cat_max_ratio: f64) -> Result<(CropBox, f64)> {
    let mut best: Option<(CropBox, f64)> = None;
    let mut best_score = -1.0;
    for b in candidates {
        check_crop(labels.height(), labels.width(), b.height, b.width)?;
        if b.top + b.height > labels.height() || b.left + b.width > labels.width() {
            return Err(Error::Argument("candidate box outside the image".into()));
        }
        let score = crop_score(labels, b, cat_max_ratio);
        if score > best_score {
            best_score = score;
            best = Some((*b, score));
        }
    }
    best.ok_or_else(|| Error::Argument("no crop candidates".into()))
}

/// Class-balanced crop: the best of `trials` random boxes under [`crop_score`].
pub fn class_balanced_crop(
    labels: &LabelGrid,
    crop_h: usize,
    crop_w: usize,
    cat_max_ratio: f64,
    trials: usize,
    rng: &mut Rng,
) -> Result<CropBox> {
    if trials == 0 {
        return Err(Error::Argument("at least one crop trial is required".into()));
    }
    let candidates = (0..trials)
        .map(|_| random_crop_box(labels.height(), labels.width(), crop_h, crop_w, rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(select_crop(labels, &candidates, cat_max_ratio)?.0)
}

/// Source-image sampler that favours images containing rare classes.
///
/// Each image scores `-log f_r / T`, where `f_r` is the global pixel frequency
/// of the rarest class present in it; sampling probabilities are the softmax of
/// the scores.
#[derive(Clone, Debug)]
pub struct RareClassSampler {
    cumulative: Vec<f64>,
    probs: Vec<f64>,
}

impl RareClassSampler {
    pub fn new(per_image_counts: &[Vec<u64>], temperature: f64) -> Result<Self> {
        if per_image_counts.is_empty() {
            return Err(Error::Argument("empty source image set".into()));
        }
        if !(temperature > 0.0) {
            return Err(Error::Argument(format!("temperature must be positive, got {temperature}")));
        }
        let k = per_image_counts[0].len();
        if per_image_counts.iter().any(|c| c.len() != k) {
            return Err(Error::Dimension("images report differing class counts".into()));
        }
        let mut totals = vec![0u64; k];
        for img in per_image_counts {
            for (t, c) in totals.iter_mut().zip(img) {
                *t += c;
            }
        }
        let grand: u64 = totals.iter().sum();
        if grand == 0 {
            return Err(Error::Argument("no labelled source pixels".into()));
        }
        let freq: Vec<f64> = totals.iter().map(|&t| t as f64 / grand as f64).collect();
        let scores: Vec<f64> = per_image_counts
            .iter()
            .map(|img| {
                let rarest = img
                    .iter()
                    .zip(&freq)
                    .filter(|(&c, _)| c > 0)
                    .map(|(_, &f)| f)
                    .fold(1.0, f64::min);
                -rarest.ln() / temperature
            })
            .collect();
        let probs = crate::num::softmax(&scores);
        let mut acc = 0.0;
        let cumulative = probs
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        Ok(Self { cumulative, probs })
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probs
    }

    pub fn sample(&self, rng: &mut Rng) -> usize {
        let u = rng.uniform() * self.cumulative.last().copied().unwrap_or(1.0);
        self.cumulative
            .iter()
            .position(|&c| u < c)
            .unwrap_or(self.cumulative.len() - 1)
    }
}

/// One draw from [`RareClassSampler`].
pub fn rare_class_sample(per_image_counts: &[Vec<u64>], temperature: f64, rng: &mut Rng) -> Result<usize> {
    Ok(RareClassSampler::new(per_image_counts, temperature)?.sample(rng))
}
