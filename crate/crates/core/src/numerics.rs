//! Dense row-major f64 arrays plus the handful of kernels everything else
//! is built from: softmax, block down/up-sampling, matmul, and a central
//! finite-difference gradient checker.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Dense multi-dimensional array, row-major, double precision.
///
/// Public operations keep two invariants: `data.len()` equals the product of
/// `shape`, and every stored value is finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn shape_len(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape_len(&shape) != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                shape_len(&shape),
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical("non-finite value in tensor data".into()));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape_len(&shape);
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = shape_len(&shape);
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value at a full multi-index.
    pub fn at(&self, index: &[usize]) -> f64 {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (i, &ix) in index.iter().enumerate() {
            debug_assert!(ix < self.shape[i]);
            flat = flat * self.shape[i] + ix;
        }
        self.data[flat]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise sum with a matching-shape tensor, scaled: `self += alpha * other`.
    pub fn add_scaled(&mut self, other: &Tensor, alpha: f64) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "add_scaled: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        for v in &mut self.data {
            *v *= alpha;
        }
    }
}

/// Softmax over the last axis, max-subtracted for stability.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let shape = logits.shape().to_vec();
    let c = *shape
        .last()
        .ok_or_else(|| Error::InvalidArgument("softmax: rank-0 tensor".into()))?;
    if c == 0 {
        return Err(Error::InvalidArgument("softmax: empty last axis".into()));
    }
    let mut out = vec![0.0; logits.len()];
    for (slice_in, slice_out) in logits.data().chunks(c).zip(out.chunks_mut(c)) {
        let max = slice_in.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &v) in slice_out.iter_mut().zip(slice_in.iter()) {
            *o = (v - max).exp();
            sum += *o;
        }
        for o in slice_out.iter_mut() {
            *o /= sum;
        }
    }
    Tensor::new(shape, out)
}

/// Splits a shape into (H, W, trailing channel count).
fn spatial_dims(shape: &[usize], name: &str) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "{name}: need at least 2 dimensions, got shape {shape:?}"
        )));
    }
    let (h, w) = (shape[0], shape[1]);
    let ch = shape[2..].iter().product::<usize>().max(1);
    Ok((h, w, ch))
}

/// Block-mean downsampling of the two leading spatial axes by `factor`.
/// Trailing axes are treated as channels.
pub fn downsample_mean(x: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 0 {
        return Err(Error::InvalidArgument("downsample_mean: factor 0".into()));
    }
    let (h, w, ch) = spatial_dims(x.shape(), "downsample_mean")?;
    if h % factor != 0 || w % factor != 0 {
        return Err(Error::InvalidArgument(format!(
            "downsample_mean: {h}x{w} not divisible by {factor}"
        )));
    }
    let (oh, ow) = (h / factor, w / factor);
    let mut out = vec![0.0; oh * ow * ch];
    let data = x.data();
    let norm = 1.0 / (factor * factor) as f64;
    for bh in 0..oh {
        for bw in 0..ow {
            for dh in 0..factor {
                for dw in 0..factor {
                    let src = ((bh * factor + dh) * w + (bw * factor + dw)) * ch;
                    let dst = (bh * ow + bw) * ch;
                    for c in 0..ch {
                        out[dst + c] += data[src + c];
                    }
                }
            }
        }
    }
    for v in &mut out {
        *v *= norm;
    }
    let mut shape = x.shape().to_vec();
    shape[0] = oh;
    shape[1] = ow;
    Tensor::new(shape, out)
}

/// Nearest-neighbour upsampling of the two leading spatial axes: every input
/// cell is replicated over a `factor`x`factor` block.
pub fn upsample_nearest(x: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 0 {
        return Err(Error::InvalidArgument("upsample_nearest: factor 0".into()));
    }
    let (h, w, ch) = spatial_dims(x.shape(), "upsample_nearest")?;
    let (oh, ow) = (h * factor, w * factor);
    let mut out = vec![0.0; oh * ow * ch];
    let data = x.data();
    for ih in 0..oh {
        for iw in 0..ow {
            let src = ((ih / factor) * w + (iw / factor)) * ch;
            let dst = (ih * ow + iw) * ch;
            out[dst..dst + ch].copy_from_slice(&data[src..src + ch]);
        }
    }
    let mut shape = x.shape().to_vec();
    shape[0] = oh;
    shape[1] = ow;
    Tensor::new(shape, out)
}

/// `a [m,k] * b [k,n] -> [m,n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = match a.shape() {
        [m, k] => (*m, *k),
        s => return Err(Error::ShapeMismatch(format!("matmul lhs rank {}", s.len()))),
    };
    let (k2, n) = match b.shape() {
        [k2, n] => (*k2, *n),
        s => return Err(Error::ShapeMismatch(format!("matmul rhs rank {}", s.len()))),
    };
    if k != k2 {
        return Err(Error::ShapeMismatch(format!(
            "matmul inner dims {k} vs {k2}"
        )));
    }
    let mut out = vec![0.0; m * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        for l in 0..k {
            let av = ad[i * k + l];
            if av == 0.0 {
                continue;
            }
            let brow = &bd[l * n..(l + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Max over coordinates of the relative error between an analytic gradient
/// and central finite differences of `loss_fn` at `params`.
///
/// Relative error per coordinate: |cd - g| / max(1e-8, |cd| + |g|).
pub fn finite_diff_check<F>(
    loss_fn: F,
    analytic_grad: &Tensor,
    params: &Tensor,
    eps: f64,
) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    if eps <= 0.0 {
        return Err(Error::InvalidArgument("finite_diff_check: eps must be > 0".into()));
    }
    if analytic_grad.shape() != params.shape() {
        return Err(Error::ShapeMismatch(format!(
            "finite_diff_check: grad {:?} vs params {:?}",
            analytic_grad.shape(),
            params.shape()
        )));
    }
    let mut worst = 0.0f64;
    let mut probe = params.clone();
    for i in 0..params.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + eps;
        let up = loss_fn(&probe)?;
        probe.data[i] = orig - eps;
        let down = loss_fn(&probe)?;
        probe.data[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Numerical(format!(
                "finite_diff_check: non-finite loss at coordinate {i}"
            )));
        }
        let central = (up - down) / (2.0 * eps);
        let g = analytic_grad.data[i];
        let rel = (central - g).abs() / (central.abs() + g.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

// --- binary tensor container ----------------------------------------------
//
// magic "CLT1" | rank u32 LE | dims u64 LE x rank | row-major f64 LE payload

const MAGIC: &[u8; 4] = b"CLT1";

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Numerical(format!(
            "tensor container: bad magic {magic:?}"
        )));
    }
    let mut rank_buf = [0u8; 4];
    r.read_exact(&mut rank_buf)?;
    let rank = u32::from_le_bytes(rank_buf) as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut dim = [0u8; 8];
        r.read_exact(&mut dim)?;
        shape.push(u64::from_le_bytes(dim) as usize);
    }
    let n = shape_len(&shape);
    let mut data = Vec::with_capacity(n);
    let mut buf = [0u8; 8];
    for _ in 0..n {
        r.read_exact(&mut buf)?;
        data.push(f64::from_le_bytes(buf));
    }
    if !data.iter().all(|v| v.is_finite()) {
        return Err(Error::Numerical(
            "tensor container: non-finite payload".into(),
        ));
    }
    Tensor::new(shape, data)
}

pub fn save_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_tensor(&mut f, t)
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_tensor(&mut f)
}
