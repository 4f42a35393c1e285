//! Pseudo-labeling: naive confidence-thresholded labels, the object
//! identifier, the selective pseudo-label map, and the patch-resolution
//! downsampling that feeds the reliability map.

use crate::error::{Error, Result};
use crate::label::{LabelMap, BACKGROUND, IGNORE_LABEL};
use crate::numerics::{downsample_mean, Tensor};

/// Per-pixel binary flag: 1 where the old model's object-class mass exceeds
/// its background probability.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObjectIdentifierMap {
    height: usize,
    width: usize,
    values: Vec<bool>,
}

impl ObjectIdentifierMap {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, h: usize, w: usize) -> bool {
        self.values[h * self.width + w]
    }

    pub fn values(&self) -> &[bool] {
        &self.values
    }

    pub fn count_set(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }

    pub fn to_tensor(&self) -> Tensor {
        let data = self
            .values
            .iter()
            .map(|&v| if v { 1.0 } else { 0.0 })
            .collect();
        Tensor::new(vec![self.height, self.width], data).expect("binary values are finite")
    }
}

fn prediction_dims(s: &Tensor, name: &str) -> Result<(usize, usize, usize)> {
    match s.shape() {
        [h, w, c] if *c >= 1 => Ok((*h, *w, *c)),
        s => Err(Error::ShapeMismatch(format!(
            "{name}: prediction must be [H, W, classes], got {s:?}"
        ))),
    }
}

/// Naive pseudo-label map: ground-truth new-class labels are kept; elsewhere
/// a pixel takes the old model's argmax over old object classes when some old
/// object class clears the confidence threshold, and background otherwise.
///
/// The existence test and the argmax are evaluated independently. For
/// tau >= 0.5 at most one class can clear the threshold, so the argmax is
/// that class; for tau < 0.5 the argmax may name a different class than the
/// one that cleared it, by design.
pub fn pseudo_label(y_t: &LabelMap, s_old: &Tensor, tau: f64) -> Result<LabelMap> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "pseudo_label: tau must be in (0, 1), got {tau}"
        )));
    }
    let (h, w, c) = prediction_dims(s_old, "pseudo_label")?;
    if y_t.height() != h || y_t.width() != w {
        return Err(Error::ShapeMismatch(format!(
            "pseudo_label: labels {}x{} vs prediction {h}x{w}",
            y_t.height(),
            y_t.width()
        )));
    }
    let data = s_old.data();
    let mut values = Vec::with_capacity(h * w);
    for (pix, &y) in y_t.values().iter().enumerate() {
        if y != BACKGROUND {
            values.push(y);
            continue;
        }
        let slice = &data[pix * c..(pix + 1) * c];
        let mut exceeds = false;
        let mut best = 1usize;
        let mut best_p = f64::NEG_INFINITY;
        for (cls, &p) in slice.iter().enumerate().skip(1) {
            if p > tau {
                exceeds = true;
            }
            // strict '>' keeps the lowest class index on ties
            if p > best_p {
                best_p = p;
                best = cls;
            }
        }
        values.push(if exceeds { best as u8 } else { BACKGROUND });
    }
    LabelMap::from_values(h, w, values)
}

/// Object identifier: 1 where the background probability is strictly below
/// the summed old-object-class probability. The literal comparison is
/// computed; for normalized inputs it coincides with `S_bg < 0.5`.
pub fn object_identifier(s_old: &Tensor) -> Result<ObjectIdentifierMap> {
    let (h, w, c) = prediction_dims(s_old, "object_identifier")?;
    let data = s_old.data();
    let mut values = Vec::with_capacity(h * w);
    for pix in 0..h * w {
        let slice = &data[pix * c..(pix + 1) * c];
        let object_mass: f64 = slice[1..].iter().sum();
        values.push(slice[0] < object_mass);
    }
    Ok(ObjectIdentifierMap { height: h, width: w, values })
}

/// Selective pseudo-label map: keeps non-background pseudo-labels, keeps
/// background where the object identifier is clear, and marks the ambiguous
/// remainder as ignore.
pub fn selective_pseudo_label(
    y_tilde: &LabelMap,
    o: &ObjectIdentifierMap,
) -> Result<LabelMap> {
    if y_tilde.height() != o.height() || y_tilde.width() != o.width() {
        return Err(Error::ShapeMismatch(format!(
            "selective_pseudo_label: {}x{} vs {}x{}",
            y_tilde.height(),
            y_tilde.width(),
            o.height(),
            o.width()
        )));
    }
    let values = y_tilde
        .values()
        .iter()
        .zip(o.values().iter())
        .map(|(&y, &obj)| {
            if y != BACKGROUND {
                y
            } else if !obj {
                BACKGROUND
            } else {
                IGNORE_LABEL
            }
        })
        .collect();
    LabelMap::from_values(y_tilde.height(), y_tilde.width(), values)
}

/// Patch-resolution counterparts of a pseudo-label map and an old-model
/// prediction: block-center labels and renormalized block-mean probabilities.
pub fn downsample_labels_and_probs(
    y_bar: &LabelMap,
    s_old: &Tensor,
    patch: usize,
) -> Result<(LabelMap, Tensor)> {
    let y_hat = y_bar.downsample_center(patch)?;
    let mut s_hat = downsample_mean(s_old, patch)?;
    let c = *s_hat.shape().last().unwrap();
    // exact means of normalized slices already sum to 1; renormalize anyway
    for slice in s_hat.data_mut().chunks_mut(c) {
        let sum: f64 = slice.iter().sum();
        if sum > 0.0 {
            for v in slice.iter_mut() {
                *v /= sum;
            }
        }
    }
    Ok((y_hat, s_hat))
}
