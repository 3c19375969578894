//! Temporal label-change distance and segmentation accuracy.
//!
//! Mean IU averages `n_ii / (t_i + sum_j n_ji - n_ii)` over classes, where
//! `n_ij` counts pixels of true class `i` predicted as `j` and `t_i` is the
//! number of pixels of class `i`. Classes absent from both prediction and
//! ground truth have a zero denominator and are left out of the mean.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, shape_err, Error, Result};
use crate::stagenet::{full_forward, StageModel};
use crate::tensor::{argmax_channels, upsample_bilinear, Label, LabelMap, Tensor, IGNORE_LABEL};

/// Default boundary band radius for the `-bdry` metrics.
pub const DEFAULT_BAND_RADIUS: usize = 10;

/// Quantization levels of the raw-pixel difference baseline.
pub const PIXEL_QUANT_LEVELS: u32 = 32;

/// Fraction of pixels whose labels differ.
pub fn score_map_distance(a: &LabelMap, b: &LabelMap) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(shape_err!("label maps {:?} and {:?}", a.dims(), b.dims()));
    }
    let n = a.labels().len();
    if n == 0 {
        return Ok(0.0);
    }
    let changed = a
        .labels()
        .iter()
        .zip(b.labels())
        .filter(|(x, y)| x != y)
        .count();
    Ok(changed as f64 / n as f64)
}

/// `counts[i][j]` = pixels of true class `i` predicted as `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        Self {
            n_classes,
            counts: vec![0; n_classes * n_classes],
        }
    }

    /// Builds a matrix from row-major counts.
    pub fn from_counts(n_classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != n_classes * n_classes {
            return Err(shape_err!(
                "{} counts for {n_classes} classes",
                counts.len()
            ));
        }
        Ok(Self { n_classes, counts })
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.n_classes + pred]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one prediction/ground-truth pair; ground-truth pixels equal to
    /// `ignore` are skipped.
    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap, ignore: Label) -> Result<()> {
        if pred.dims() != gt.dims() {
            return Err(shape_err!(
                "prediction {:?} vs ground truth {:?}",
                pred.dims(),
                gt.dims()
            ));
        }
        let n = self.n_classes;
        for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
            if g == ignore {
                continue;
            }
            if g as usize >= n {
                return Err(Error::LabelOutOfRange {
                    label: g as u32,
                    n_classes: n,
                });
            }
            if p as usize >= n {
                return Err(Error::LabelOutOfRange {
                    label: p as u32,
                    n_classes: n,
                });
            }
            self.counts[g as usize * n + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.n_classes != self.n_classes {
            return Err(shape_err!(
                "merging {} and {} class matrices",
                self.n_classes,
                other.n_classes
            ));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Pixels of true class `i`.
    pub fn class_total(&self, i: usize) -> u64 {
        (0..self.n_classes).map(|j| self.get(i, j)).sum()
    }

    /// Pixels predicted as class `i`.
    pub fn predicted_total(&self, i: usize) -> u64 {
        (0..self.n_classes).map(|j| self.get(j, i)).sum()
    }

    /// Intersection over union of class `i`, `None` if the class is absent
    /// from both prediction and ground truth.
    pub fn class_iu(&self, i: usize) -> Option<f64> {
        let hit = self.get(i, i);
        let denom = self.class_total(i) + self.predicted_total(i) - hit;
        (denom > 0).then(|| hit as f64 / denom as f64)
    }
}

pub fn accumulate_confusion(
    pred: &LabelMap,
    gt: &LabelMap,
    n_classes: usize,
    ignore: Label,
) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(n_classes);
    cm.accumulate(pred, gt, ignore)?;
    Ok(cm)
}

pub fn mean_iu(cm: &ConfusionMatrix) -> Result<f64> {
    let (sum, count) = (0..cm.n_classes)
        .filter_map(|i| cm.class_iu(i))
        .fold((0.0, 0usize), |(s, n), iu| (s + iu, n + 1));
    if count == 0 {
        return Err(Error::Degenerate(
            "every class is absent; mean IU undefined",
        ));
    }
    Ok(sum / count as f64)
}

pub fn fw_iu(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Degenerate("empty confusion matrix; fwIU undefined"));
    }
    let weighted: f64 = (0..cm.n_classes)
        .map(|i| {
            let t = cm.class_total(i);
            if t == 0 {
                0.0
            } else {
                t as f64 * cm.class_iu(i).unwrap_or(0.0)
            }
        })
        .sum();
    Ok(weighted / total as f64)
}

/// Boolean per-pixel mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// Pixels within the boundary band of `gt`.
///
/// A boundary pixel has a 4-neighbour with a different label. A pixel is in
/// the band when its Chebyshev distance to the nearest boundary pixel is
/// below `radius`, so `radius = 1` selects the boundary pixels themselves.
pub fn boundary_band_mask(gt: &LabelMap, radius: usize) -> Result<Mask> {
    if radius == 0 {
        return Err(invalid!("band radius must be >= 1"));
    }
    let (h, w) = gt.dims();
    let mut boundary = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let l = gt.get(y, x);
            let differs = (y > 0 && gt.get(y - 1, x) != l)
                || (y + 1 < h && gt.get(y + 1, x) != l)
                || (x > 0 && gt.get(y, x - 1) != l)
                || (x + 1 < w && gt.get(y, x + 1) != l);
            boundary[y * w + x] = differs;
        }
    }
    // Square dilation with half-width radius - 1, done separably.
    let reach = radius - 1;
    let mut rows = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let lo = x.saturating_sub(reach);
            let hi = (x + reach).min(w - 1);
            rows[y * w + x] = (lo..=hi).any(|xx| boundary[y * w + xx]);
        }
    }
    let mut bits = vec![false; h * w];
    for y in 0..h {
        let lo = y.saturating_sub(reach);
        let hi = (y + reach).min(h - 1);
        for x in 0..w {
            bits[y * w + x] = (lo..=hi).any(|yy| rows[yy * w + x]);
        }
    }
    Ok(Mask {
        height: h,
        width: w,
        bits,
    })
}

/// Ground truth with every pixel outside `mask` set to the ignore value.
pub fn restrict_to_mask(gt: &LabelMap, mask: &Mask) -> Result<LabelMap> {
    if gt.dims() != mask.dims() {
        return Err(shape_err!(
            "mask {:?} vs labels {:?}",
            mask.dims(),
            gt.dims()
        ));
    }
    let labels = gt
        .labels()
        .iter()
        .zip(&mask.bits)
        .map(|(&l, &keep)| if keep { l } else { IGNORE_LABEL })
        .collect();
    LabelMap::new(gt.height(), gt.width(), labels)
}

/// Mean and population standard deviation of a difference series.
#[derive(Debug, Clone, PartialEq)]
pub struct DifferenceStats {
    pub mean: f64,
    pub stdev: f64,
    pub series: Vec<f64>,
}

impl DifferenceStats {
    pub fn from_series(series: Vec<f64>) -> Self {
        let n = series.len().max(1) as f64;
        let mean = series.iter().sum::<f64>() / n;
        let var = series.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self {
            mean,
            stdev: libm::sqrt(var),
            series,
        }
    }
}

/// Per-stage label-change statistics over consecutive frames plus the
/// quantized raw-pixel baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalProfile {
    pub pixels: DifferenceStats,
    pub stages: Vec<DifferenceStats>,
}

pub fn temporal_difference_profile<M: StageModel + ?Sized>(
    model: &M,
    frames: &[Tensor],
) -> Result<TemporalProfile> {
    if frames.len() < 2 {
        return Err(invalid!(
            "temporal profile needs at least 2 frames, got {}",
            frames.len()
        ));
    }
    let mut labels: Vec<Vec<LabelMap>> = Vec::with_capacity(frames.len());
    for frame in frames {
        let pass = full_forward(model, frame)?;
        labels.push(
            pass.stages
                .iter()
                .enumerate()
                .map(|(k, s)| {
                    argmax_channels(&upsample_bilinear(&s.score, model.downsample_factor(k))?)
                })
                .collect::<Result<Vec<_>>>()?,
        );
    }
    let stages = (0..model.stage_count())
        .map(|k| {
            let series = labels
                .windows(2)
                .map(|pair| score_map_distance(&pair[1][k], &pair[0][k]))
                .collect::<Result<Vec<_>>>()?;
            Ok(DifferenceStats::from_series(series))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TemporalProfile {
        pixels: pixel_difference_stats(frames, PIXEL_QUANT_LEVELS)?,
        stages,
    })
}

/// Fraction of pixels whose quantized intensity changes between consecutive
/// frames. Values are binned into `levels` equal bins over the sequence's
/// value range; a pixel changes if any channel changes bin.
pub fn pixel_difference_stats(frames: &[Tensor], levels: u32) -> Result<DifferenceStats> {
    if levels == 0 {
        return Err(invalid!("quantization needs at least one level"));
    }
    let Some(first) = frames.first() else {
        return Err(invalid!("no frames"));
    };
    if frames.iter().any(|f| f.dims() != first.dims()) {
        return Err(shape_err!("frames differ in shape"));
    }
    let (lo, hi) = frames
        .iter()
        .filter_map(Tensor::min_max)
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), (l, h)| {
            (a.min(l), b.max(h))
        });
    let span = hi - lo;
    let bin = |v: f32| -> u32 {
        if !(span > 0.0) {
            return 0;
        }
        let b = libm::floorf((v - lo) / span * levels as f32) as i64;
        b.clamp(0, levels as i64 - 1) as u32
    };
    let (c, h, w) = first.dims();
    let plane = h * w;
    let series = frames
        .windows(2)
        .map(|pair| {
            if plane == 0 {
                return 0.0;
            }
            let changed = (0..plane)
                .filter(|&p| {
                    (0..c).any(|ch| {
                        bin(pair[0].data()[ch * plane + p]) != bin(pair[1].data()[ch * plane + p])
                    })
                })
                .count();
            changed as f64 / plane as f64
        })
        .collect();
    Ok(DifferenceStats::from_series(series))
}
