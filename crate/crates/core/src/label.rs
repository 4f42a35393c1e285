//! Per-pixel (or per-patch) integer class labels.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Sentinel marking pixels excluded from training. Class ids are capped at
/// [`MAX_CLASS_ID`], so the sentinel can never collide with a real class.
pub const IGNORE_LABEL: u8 = 255;

/// Largest permitted object-class id.
pub const MAX_CLASS_ID: u8 = 200;

/// Background class id.
pub const BACKGROUND: u8 = 0;

/// Dense H x W grid of class labels. Values are the background (0), an
/// object-class id, or [`IGNORE_LABEL`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    values: Vec<u8>,
}

impl LabelMap {
    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        Self {
            height,
            width,
            values: vec![value; height * width],
        }
    }

    pub fn from_values(height: usize, width: usize, values: Vec<u8>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "label map {height}x{width} needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, h: usize, w: usize) -> u8 {
        self.values[h * self.width + w]
    }

    pub fn set(&mut self, h: usize, w: usize, value: u8) {
        self.values[h * self.width + w] = value;
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn same_shape(&self, other: &LabelMap) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn count(&self, value: u8) -> usize {
        self.values.iter().filter(|&&v| v == value).count()
    }

    /// Block-center downsampling: output cell (h, w) takes the label of the
    /// pixel at (h*factor + factor/2, w*factor + factor/2). Categorical labels
    /// cannot be averaged; the center pixel is a deterministic representative.
    pub fn downsample_center(&self, factor: usize) -> Result<LabelMap> {
        if factor == 0 {
            return Err(Error::InvalidArgument("downsample_center: factor 0".into()));
        }
        if !self.height.is_multiple_of(factor) || !self.width.is_multiple_of(factor) {
            return Err(Error::InvalidArgument(format!(
                "downsample_center: {}x{} not divisible by {factor}",
                self.height, self.width
            )));
        }
        let (oh, ow) = (self.height / factor, self.width / factor);
        let mut values = Vec::with_capacity(oh * ow);
        let off = factor / 2;
        for h in 0..oh {
            for w in 0..ow {
                values.push(self.get(h * factor + off, w * factor + off));
            }
        }
        LabelMap::from_values(oh, ow, values)
    }

    /// Labels as doubles, for the tensor container.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.values.iter().map(|&v| v as f64).collect();
        Tensor::new(vec![self.height, self.width], data).expect("label values are finite")
    }

    pub fn from_tensor(t: &Tensor) -> Result<LabelMap> {
        let (h, w) = match t.shape() {
            [h, w] => (*h, *w),
            s => {
                return Err(Error::ShapeMismatch(format!(
                    "label map from tensor: rank {} != 2",
                    s.len()
                )))
            }
        };
        let mut values = Vec::with_capacity(h * w);
        for &v in t.data() {
            if !(0.0..=255.0).contains(&v) || v.fract() != 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "label map from tensor: {v} is not a label"
                )));
            }
            values.push(v as u8);
        }
        LabelMap::from_values(h, w, values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn downsample_center_uniform_block() {
        let m = LabelMap::filled(4, 4, 3);
        let d = m.downsample_center(2).unwrap();
        assert!(d.values().iter().all(|&v| v == 3));
    }

    #[test]
    fn downsample_center_picks_ignore_at_center() {
        let mut m = LabelMap::filled(2, 2, 1);
        m.set(1, 1, IGNORE_LABEL);
        let d = m.downsample_center(2).unwrap();
        assert_eq!(d.get(0, 0), IGNORE_LABEL);
    }

    #[test]
    fn downsample_center_checkerboard_matches_index_oracle() {
        let mut m = LabelMap::filled(4, 4, 0);
        for h in 0..4 {
            for w in 0..4 {
                m.set(h, w, if (h + w) % 2 == 0 { 1 } else { 2 });
            }
        }
        let d = m.downsample_center(2).unwrap();
        for h in 0..2 {
            for w in 0..2 {
                // center of block (h, w) sits at (2h+1, 2w+1)
                let expect = m.get(2 * h + 1, 2 * w + 1);
                assert_eq!(d.get(h, w), expect);
            }
        }
    }

    #[test]
    fn downsample_center_rejects_non_divisible() {
        let m = LabelMap::filled(3, 4, 0);
        assert!(m.downsample_center(2).is_err());
    }

    #[test]
    fn tensor_round_trip() {
        let mut m = LabelMap::filled(2, 3, 0);
        m.set(0, 1, 4);
        m.set(1, 2, IGNORE_LABEL);
        let back = LabelMap::from_tensor(&m.to_tensor()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn from_tensor_rejects_fractional() {
        let t = Tensor::new(vec![1, 1], vec![1.5]).unwrap();
        assert!(LabelMap::from_tensor(&t).is_err());
    }
}
