//! Evaluation and analysis: grouped mIoU from an aggregated confusion
//! matrix, class-token cosine similarity, the ignored-label ratio, and a
//! background-shift diagnostic.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::label::{LabelMap, BACKGROUND, IGNORE_LABEL};
use crate::numerics::Tensor;
use crate::scenes::ClassSpan;

/// Where the background class is scored. The default follows the common
/// protocol: background accompanies the initial class group and the "all"
/// group.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupConvention {
    pub background_in_initial: bool,
    pub background_in_all: bool,
}

impl Default for GroupConvention {
    fn default() -> Self {
        Self {
            background_in_initial: true,
            background_in_all: true,
        }
    }
}

/// Class-id lists for the three reported groups.
#[derive(Debug, Clone)]
pub struct ClassGroups {
    pub initial: Vec<u8>,
    pub incremented: Vec<u8>,
    pub all: Vec<u8>,
}

impl ClassGroups {
    pub fn new(num_classes: usize, initial_count: usize, convention: GroupConvention) -> Self {
        let mut initial = Vec::new();
        if convention.background_in_initial {
            initial.push(BACKGROUND);
        }
        initial.extend(1..=initial_count as u8);
        let incremented: Vec<u8> = (initial_count as u8 + 1..=num_classes as u8).collect();
        let mut all = Vec::new();
        if convention.background_in_all {
            all.push(BACKGROUND);
        }
        all.extend(1..=num_classes as u8);
        Self {
            initial,
            incremented,
            all,
        }
    }
}

/// Per-class IoU and group means over an aggregated confusion matrix.
/// Classes absent from both predictions and ground truth across the whole
/// test set carry no IoU and are excluded from group means.
#[derive(Debug, Clone)]
pub struct IoUReport {
    pub per_class_iou: BTreeMap<u8, f64>,
    pub miou_initial: Option<f64>,
    pub miou_incremented: Option<f64>,
    pub miou_all: Option<f64>,
    /// Pixel counts, row = ground truth, column = prediction.
    pub confusion: Vec<u64>,
    pub num_labels: usize,
}

impl IoUReport {
    pub fn confusion_at(&self, gt: u8, pred: u8) -> u64 {
        self.confusion[gt as usize * self.num_labels + pred as usize]
    }
}

/// Argmax prediction map from a normalized prediction tensor; ties break to
/// the lowest class index, so background wins against freshly transferred
/// new-class tokens.
pub fn predict_labels(s: &Tensor) -> Result<LabelMap> {
    let (h, w, c) = match s.shape() {
        [h, w, c] if *c >= 1 => (*h, *w, *c),
        shape => {
            return Err(Error::ShapeMismatch(format!(
                "predict_labels: expected [H, W, classes], got {shape:?}"
            )))
        }
    };
    let data = s.data();
    let mut values = Vec::with_capacity(h * w);
    for pix in 0..h * w {
        let slice = &data[pix * c..(pix + 1) * c];
        let mut best = 0usize;
        let mut best_v = slice[0];
        for (i, &v) in slice.iter().enumerate().skip(1) {
            if v > best_v {
                best_v = v;
                best = i;
            }
        }
        values.push(best as u8);
    }
    LabelMap::from_values(h, w, values)
}

fn mean_over(classes: &[u8], per_class: &BTreeMap<u8, f64>) -> Option<f64> {
    let present: Vec<f64> = classes
        .iter()
        .filter_map(|c| per_class.get(c).copied())
        .collect();
    if present.is_empty() {
        None
    } else {
        Some(present.iter().sum::<f64>() / present.len() as f64)
    }
}

/// Grouped mIoU over a test set. `num_classes` is the total object-class
/// count of the scenario; predictions and ground truth must stay within it.
pub fn miou(
    predictions: &[LabelMap],
    ground_truth: &[LabelMap],
    num_classes: usize,
    groups: &ClassGroups,
) -> Result<IoUReport> {
    if predictions.is_empty() {
        return Err(Error::InvalidArgument("miou: empty test set".into()));
    }
    if predictions.len() != ground_truth.len() {
        return Err(Error::ShapeMismatch(format!(
            "miou: {} predictions vs {} ground-truth maps",
            predictions.len(),
            ground_truth.len()
        )));
    }
    let n = num_classes + 1;
    let mut confusion = vec![0u64; n * n];
    for (pred, gt) in predictions.iter().zip(ground_truth.iter()) {
        if !pred.same_shape(gt) {
            return Err(Error::ShapeMismatch("miou: scene shape mismatch".into()));
        }
        for (&p, &g) in pred.values().iter().zip(gt.values().iter()) {
            if p == IGNORE_LABEL || g == IGNORE_LABEL || p as usize >= n || g as usize >= n {
                return Err(Error::InvalidArgument(format!(
                    "miou: label outside 0..={num_classes} (pred {p}, gt {g})"
                )));
            }
            confusion[g as usize * n + p as usize] += 1;
        }
    }
    let mut per_class_iou = BTreeMap::new();
    for c in 0..n {
        let tp = confusion[c * n + c];
        let fp: u64 = (0..n).filter(|&g| g != c).map(|g| confusion[g * n + c]).sum();
        let fn_: u64 = (0..n).filter(|&p| p != c).map(|p| confusion[c * n + p]).sum();
        let denom = tp + fp + fn_;
        if denom > 0 {
            per_class_iou.insert(c as u8, tp as f64 / denom as f64);
        }
    }
    Ok(IoUReport {
        miou_initial: mean_over(&groups.initial, &per_class_iou),
        miou_incremented: mean_over(&groups.incremented, &per_class_iou),
        miou_all: mean_over(&groups.all, &per_class_iou),
        per_class_iou,
        confusion,
        num_labels: n,
    })
}

/// Mean cosine similarity x100 between class-token groups.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityReport {
    /// Ordered new-new pairs, self-pairs excluded; None with a single new class.
    pub new_new: Option<f64>,
    /// New tokens against the background token.
    pub new_background: f64,
    /// New tokens against old object-class tokens; None at the first step.
    pub new_old: Option<f64>,
}

pub fn token_similarity(tokens: &Tensor, n_new: usize) -> Result<SimilarityReport> {
    let (rows, d) = match tokens.shape() {
        [rows, d] => (*rows, *d),
        s => return Err(Error::ShapeMismatch(format!("token_similarity: {s:?}"))),
    };
    let n_objects = rows - 1;
    if n_new == 0 || n_new > n_objects {
        return Err(Error::InvalidArgument(format!(
            "token_similarity: n_new {n_new} incompatible with {n_objects} object classes"
        )));
    }
    let data = tokens.data();
    let mut norms = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &data[r * d..(r + 1) * d];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::Numerical(format!(
                "token_similarity: zero-norm token row {r}"
            )));
        }
        norms.push(norm);
    }
    // bit-identical rows score exactly 100 (cosine of a vector with itself
    // is 1; the fp division can land 1 ulp off on either side), and the
    // clamp keeps roundoff inside [-100, 100]
    let cos = |i: usize, j: usize| -> f64 {
        let a = &data[i * d..(i + 1) * d];
        let b = &data[j * d..(j + 1) * d];
        if a == b {
            return 100.0;
        }
        let dot: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
        (100.0 * dot / (norms[i] * norms[j])).clamp(-100.0, 100.0)
    };
    let new_lo = rows - n_new;
    let new_new = if n_new >= 2 {
        let mut sum = 0.0;
        let mut count = 0usize;
        for i in new_lo..rows {
            for j in new_lo..rows {
                if i != j {
                    sum += cos(i, j);
                    count += 1;
                }
            }
        }
        Some(sum / count as f64)
    } else {
        None
    };
    let new_background = {
        let sum: f64 = (new_lo..rows).map(|i| cos(i, 0)).sum();
        sum / n_new as f64
    };
    let n_old = n_objects - n_new;
    let new_old = if n_old > 0 {
        let mut sum = 0.0;
        for i in new_lo..rows {
            for j in 1..=n_old {
                sum += cos(i, j);
            }
        }
        Some(sum / (n_new * n_old) as f64)
    } else {
        None
    };
    Ok(SimilarityReport {
        new_new,
        new_background,
        new_old,
    })
}

/// Counts behind the ignored-label ratio so callers can aggregate across
/// scenes before dividing.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IgnoredLabelStats {
    /// Old-class pixels that naive pseudo-labeling sent to background.
    pub mispredicted: u64,
    /// Of those, pixels the selective map marked as ignore.
    pub ignored: u64,
}

impl IgnoredLabelStats {
    pub fn ratio(&self) -> Option<f64> {
        if self.mispredicted == 0 {
            None
        } else {
            Some(self.ignored as f64 / self.mispredicted as f64)
        }
    }

    pub fn accumulate(&mut self, other: IgnoredLabelStats) {
        self.mispredicted += other.mispredicted;
        self.ignored += other.ignored;
    }
}

pub fn ignored_label_stats(
    y_tilde: &LabelMap,
    y_bar: &LabelMap,
    full_labels: &LabelMap,
    old_classes: &ClassSpan,
) -> Result<IgnoredLabelStats> {
    if !y_tilde.same_shape(y_bar) || !y_tilde.same_shape(full_labels) {
        return Err(Error::ShapeMismatch("ignored_label_stats: map shapes differ".into()));
    }
    let mut stats = IgnoredLabelStats::default();
    for ((&tilde, &bar), &full) in y_tilde
        .values()
        .iter()
        .zip(y_bar.values().iter())
        .zip(full_labels.values().iter())
    {
        if old_classes.contains(full) && tilde == BACKGROUND {
            stats.mispredicted += 1;
            if bar == IGNORE_LABEL {
                stats.ignored += 1;
            }
        }
    }
    Ok(stats)
}

/// Among old-class pixels mispredicted as background by naive pseudo-labels,
/// the fraction the selective map excluded from training. Undefined (None)
/// when nothing was mispredicted.
pub fn ignored_label_ratio(
    y_tilde: &LabelMap,
    y_bar: &LabelMap,
    full_labels: &LabelMap,
    old_classes: &ClassSpan,
) -> Result<Option<f64>> {
    Ok(ignored_label_stats(y_tilde, y_bar, full_labels, old_classes)?.ratio())
}

/// Fraction of pixels of the given classes that the predictions collapsed
/// onto the background; None when the classes cover no pixels.
pub fn background_shift_rate(
    predictions: &[LabelMap],
    full_labels: &[LabelMap],
    classes: &ClassSpan,
) -> Result<Option<f64>> {
    if predictions.len() != full_labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "background_shift_rate: {} predictions vs {} label maps",
            predictions.len(),
            full_labels.len()
        )));
    }
    let mut total = 0u64;
    let mut shifted = 0u64;
    for (pred, full) in predictions.iter().zip(full_labels.iter()) {
        if !pred.same_shape(full) {
            return Err(Error::ShapeMismatch(
                "background_shift_rate: scene shape mismatch".into(),
            ));
        }
        for (&p, &g) in pred.values().iter().zip(full.values().iter()) {
            if classes.contains(g) {
                total += 1;
                if p == BACKGROUND {
                    shifted += 1;
                }
            }
        }
    }
    Ok(if total == 0 {
        None
    } else {
        Some(shifted as f64 / total as f64)
    })
}
