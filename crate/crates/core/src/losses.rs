//! Training objectives with analytic gradients with respect to the decoder
//! weights and the class tokens: masked cross-entropy on (selective)
//! pseudo-labels, reliability-weighted feature distillation, label-guided
//! output distillation on a refined teacher, the orthogonal token objective
//! with stop-gradient on non-new tokens, and their combination.

use crate::error::{Error, Result};
use crate::label::{LabelMap, BACKGROUND, IGNORE_LABEL};
use crate::model::{ForwardPass, ToySegmenter};
use crate::numerics::Tensor;
use crate::scenes::ClassSpan;

/// Probabilities are clamped below at this floor inside every log.
pub const PROB_FLOOR: f64 = 1e-12;

/// A scalar objective with its gradients for the live model's parameters.
#[derive(Debug, Clone)]
pub struct LossBundle {
    pub value: f64,
    pub grad_decoder: Tensor,
    pub grad_tokens: Tensor,
}

impl LossBundle {
    pub fn zeros_like(model: &ToySegmenter) -> Self {
        Self {
            value: 0.0,
            grad_decoder: Tensor::zeros(model.decoder().shape().to_vec()),
            grad_tokens: Tensor::zeros(model.tokens().shape().to_vec()),
        }
    }

    pub fn add(&mut self, other: &LossBundle) -> Result<()> {
        self.value += other.value;
        self.grad_decoder.add_scaled(&other.grad_decoder, 1.0)?;
        self.grad_tokens.add_scaled(&other.grad_tokens, 1.0)?;
        Ok(())
    }

    pub fn add_scaled(&mut self, other: &LossBundle, alpha: f64) -> Result<()> {
        self.value += alpha * other.value;
        self.grad_decoder.add_scaled(&other.grad_decoder, alpha)?;
        self.grad_tokens.add_scaled(&other.grad_tokens, alpha)?;
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        self.value *= alpha;
        self.grad_decoder.scale(alpha);
        self.grad_tokens.scale(alpha);
    }

    fn checked(self, what: &str) -> Result<Self> {
        if !self.value.is_finite() {
            return Err(Error::Numerical(format!("{what}: non-finite loss value")));
        }
        Ok(self)
    }
}

/// Weight of the orthogonal objective: a constant, or adaptively the ratio
/// of new to known object classes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OrthoWeight {
    Fixed(f64),
    Adaptive,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossCoefficients {
    pub lambda_lgkd: f64,
    pub lambda_ortho: OrthoWeight,
}

impl Default for LossCoefficients {
    fn default() -> Self {
        Self {
            lambda_lgkd: 25.0,
            lambda_ortho: OrthoWeight::Adaptive,
        }
    }
}

/// Coefficients with the adaptive weight resolved for a concrete step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResolvedCoefficients {
    pub lambda_lgkd: f64,
    pub lambda_ortho: f64,
}

impl LossCoefficients {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_lgkd < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "lambda_lgkd must be >= 0, got {}",
                self.lambda_lgkd
            )));
        }
        if let OrthoWeight::Fixed(v) = self.lambda_ortho {
            if v < 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "lambda_ortho must be >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// Resolves the adaptive weight to |C^t| / |C^{1:t}|.
    pub fn resolve(&self, n_new: usize, n_known_objects: usize) -> Result<ResolvedCoefficients> {
        self.validate()?;
        let lambda_ortho = match self.lambda_ortho {
            OrthoWeight::Fixed(v) => v,
            OrthoWeight::Adaptive => {
                if n_known_objects == 0 {
                    return Err(Error::InvalidArgument(
                        "adaptive lambda_ortho needs at least one known class".into(),
                    ));
                }
                n_new as f64 / n_known_objects as f64
            }
        };
        Ok(ResolvedCoefficients {
            lambda_lgkd: self.lambda_lgkd,
            lambda_ortho,
        })
    }
}

fn check_labels(y: &LabelMap, classes: usize, what: &str) -> Result<()> {
    for &v in y.values() {
        if v != IGNORE_LABEL && v as usize >= classes {
            return Err(Error::InvalidArgument(format!(
                "{what}: label {v} outside {classes} classes"
            )));
        }
    }
    Ok(())
}

/// Cross-entropy at the labeled class, averaged over ALL pixels; ignored
/// pixels contribute zero while still counting in the normalizer.
fn ce_term(probs: &Tensor, y: &LabelMap) -> Result<(f64, Tensor)> {
    let (h, w, c) = match probs.shape() {
        [h, w, c] => (*h, *w, *c),
        s => return Err(Error::ShapeMismatch(format!("ce: prediction {s:?}"))),
    };
    if y.height() != h || y.width() != w {
        return Err(Error::ShapeMismatch(format!(
            "ce: labels {}x{} vs prediction {h}x{w}",
            y.height(),
            y.width()
        )));
    }
    check_labels(y, c, "ce")?;
    let norm = 1.0 / (h * w) as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; probs.len()];
    let data = probs.data();
    for (pix, &label) in y.values().iter().enumerate() {
        if label == IGNORE_LABEL {
            continue;
        }
        let s = data[pix * c + label as usize];
        value -= norm * s.max(PROB_FLOOR).ln();
        if s > PROB_FLOOR {
            grad[pix * c + label as usize] = -norm / s;
        }
    }
    Ok((value, Tensor::new(probs.shape().to_vec(), grad)?))
}

/// Masked cross-entropy over (selective) pseudo-labels.
pub fn ce_loss(model: &ToySegmenter, pass: &ForwardPass, y_bar: &LabelMap) -> Result<LossBundle> {
    if y_bar.values().iter().all(|&v| v == IGNORE_LABEL) {
        eprintln!("warning: ce_loss saw a fully ignored label map; loss is 0");
        return Ok(LossBundle::zeros_like(model));
    }
    let (value, grad_s) = ce_term(&pass.probs, y_bar)?;
    let (grad_decoder, grad_tokens) = model.backprop(pass, Some(&grad_s), None)?;
    LossBundle {
        value,
        grad_decoder,
        grad_tokens,
    }
    .checked("ce_loss")
}

/// Patch reliability map: 1 on confidently old patches, 0 on new-class or
/// ignored patches, the old model's background probability on background
/// patches.
pub fn reliability_map(
    y_hat: &LabelMap,
    s_hat_old: &Tensor,
    old_classes: &ClassSpan,
    new_classes: &ClassSpan,
) -> Result<Tensor> {
    let (h, w, c) = match s_hat_old.shape() {
        [h, w, c] if *c >= 1 => (*h, *w, *c),
        s => return Err(Error::ShapeMismatch(format!("reliability_map: {s:?}"))),
    };
    if y_hat.height() != h || y_hat.width() != w {
        return Err(Error::ShapeMismatch(format!(
            "reliability_map: labels {}x{} vs prediction {h}x{w}",
            y_hat.height(),
            y_hat.width()
        )));
    }
    let data = s_hat_old.data();
    let mut out = Vec::with_capacity(h * w);
    for (pix, &label) in y_hat.values().iter().enumerate() {
        let v = if old_classes.contains(label) {
            1.0
        } else if new_classes.contains(label) || label == IGNORE_LABEL {
            0.0
        } else if label == BACKGROUND {
            data[pix * c]
        } else {
            return Err(Error::InvalidArgument(format!(
                "reliability_map: label {label} outside known class sets"
            )));
        };
        out.push(v);
    }
    Tensor::new(vec![h, w], out)
}

/// Reliability-weighted squared feature distance against the frozen old
/// features. Gradient flows to the live features only.
pub fn afd_loss(
    model: &ToySegmenter,
    pass: &ForwardPass,
    f_old: &Tensor,
    m: &Tensor,
) -> Result<LossBundle> {
    if f_old.shape() != pass.features.shape() {
        return Err(Error::ShapeMismatch(format!(
            "afd_loss: old features {:?} vs live {:?}",
            f_old.shape(),
            pass.features.shape()
        )));
    }
    let (hf, wf, d) = match pass.features.shape() {
        [hf, wf, d] => (*hf, *wf, *d),
        s => return Err(Error::ShapeMismatch(format!("afd_loss: features {s:?}"))),
    };
    if m.shape() != [hf, wf] {
        return Err(Error::ShapeMismatch(format!(
            "afd_loss: reliability {:?} vs patch grid {hf}x{wf}",
            m.shape()
        )));
    }
    if m.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::InvalidArgument(
            "afd_loss: reliability values must lie in [0, 1]".into(),
        ));
    }
    let norm = 1.0 / (hf * wf) as f64;
    let mut value = 0.0;
    let mut grad_f = vec![0.0; pass.features.len()];
    let fnew = pass.features.data();
    let fold = f_old.data();
    for (patch, &weight) in m.data().iter().enumerate() {
        if weight == 0.0 {
            continue;
        }
        let base = patch * d;
        let mut dist = 0.0;
        for k in 0..d {
            let diff = fnew[base + k] - fold[base + k];
            dist += diff * diff;
            grad_f[base + k] = 2.0 * norm * weight * diff;
        }
        value += norm * weight * dist;
    }
    let grad_f = Tensor::new(pass.features.shape().to_vec(), grad_f)?;
    let (grad_decoder, grad_tokens) = model.backprop(pass, None, Some(&grad_f))?;
    LossBundle {
        value,
        grad_decoder,
        grad_tokens,
    }
    .checked("afd_loss")
}

/// Refined teacher: extends the old prediction onto the current class axis,
/// rerouting the background probability to the ground-truth new class where
/// the pseudo-label names one.
pub fn refine_teacher(
    s_old: &Tensor,
    y_bar: &LabelMap,
    new_classes: &ClassSpan,
) -> Result<Tensor> {
    let (h, w, c_old) = match s_old.shape() {
        [h, w, c] if *c >= 1 => (*h, *w, *c),
        s => return Err(Error::ShapeMismatch(format!("refine_teacher: {s:?}"))),
    };
    if y_bar.height() != h || y_bar.width() != w {
        return Err(Error::ShapeMismatch(format!(
            "refine_teacher: labels {}x{} vs prediction {h}x{w}",
            y_bar.height(),
            y_bar.width()
        )));
    }
    let n_new = new_classes.len();
    if n_new == 0 {
        return Err(Error::InvalidArgument(
            "refine_teacher: need at least one new class".into(),
        ));
    }
    if new_classes.lo() as usize != c_old {
        return Err(Error::ShapeMismatch(format!(
            "refine_teacher: new classes start at {} but teacher has {c_old} channels",
            new_classes.lo()
        )));
    }
    let c_out = c_old + n_new;
    check_labels(y_bar, c_out, "refine_teacher")?;
    let data = s_old.data();
    let mut out = vec![0.0; h * w * c_out];
    for (pix, &label) in y_bar.values().iter().enumerate() {
        let src = &data[pix * c_old..(pix + 1) * c_old];
        let dst = &mut out[pix * c_out..(pix + 1) * c_out];
        dst[..c_old].copy_from_slice(src);
        // new-class entries stay 0 unless the label names one of them
        if new_classes.contains(label) {
            dst[label as usize] = src[0];
            dst[0] = 0.0;
        }
    }
    Tensor::new(vec![h, w, c_out], out)
}

/// Teacher extended with zero probability for the new classes; the plain
/// output-distillation target used when label guidance is disabled.
pub fn zero_extend_teacher(s_old: &Tensor, n_new: usize) -> Result<Tensor> {
    let (h, w, c_old) = match s_old.shape() {
        [h, w, c] if *c >= 1 => (*h, *w, *c),
        s => return Err(Error::ShapeMismatch(format!("zero_extend_teacher: {s:?}"))),
    };
    let c_out = c_old + n_new;
    let data = s_old.data();
    let mut out = vec![0.0; h * w * c_out];
    for pix in 0..h * w {
        out[pix * c_out..pix * c_out + c_old].copy_from_slice(&data[pix * c_old..(pix + 1) * c_old]);
    }
    Tensor::new(vec![h, w, c_out], out)
}

/// Output distillation against a (refined or zero-extended) teacher,
/// evaluated at pixel resolution.
pub fn lgkd_loss(
    model: &ToySegmenter,
    pass: &ForwardPass,
    teacher: &Tensor,
) -> Result<LossBundle> {
    if teacher.shape() != pass.probs.shape() {
        return Err(Error::ShapeMismatch(format!(
            "lgkd_loss: teacher {:?} vs student {:?}",
            teacher.shape(),
            pass.probs.shape()
        )));
    }
    let c = *pass.probs.shape().last().unwrap();
    let pixels = pass.probs.len() / c;
    let norm = 1.0 / pixels as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; pass.probs.len()];
    let q = teacher.data();
    let s = pass.probs.data();
    for i in 0..pass.probs.len() {
        if q[i] == 0.0 {
            continue;
        }
        value -= norm * q[i] * s[i].max(PROB_FLOOR).ln();
        if s[i] > PROB_FLOOR {
            grad[i] = -norm * q[i] / s[i];
        }
    }
    let grad_s = Tensor::new(pass.probs.shape().to_vec(), grad)?;
    let (grad_decoder, grad_tokens) = model.backprop(pass, Some(&grad_s), None)?;
    LossBundle {
        value,
        grad_decoder,
        grad_tokens,
    }
    .checked("lgkd_loss")
}

/// Mean absolute dot product between each new-class token and every other
/// token (background and all object classes). Differentiation treats the
/// second factor as constant, so old and background rows get exactly zero
/// gradient; the subgradient at a zero dot product is zero.
///
/// `tokens_frozen` supplies the stop-gradient side; training passes the live
/// tokens for both, the gradient checker holds the frozen side at the base
/// point while perturbing the live side.
pub fn ortho_value_frozen(
    tokens_live: &Tensor,
    tokens_frozen: &Tensor,
    n_new: usize,
) -> Result<f64> {
    let (rows, d) = match tokens_live.shape() {
        [rows, d] => (*rows, *d),
        s => return Err(Error::ShapeMismatch(format!("ortho: tokens {s:?}"))),
    };
    if tokens_frozen.shape() != [rows, d] {
        return Err(Error::ShapeMismatch(format!(
            "ortho: frozen tokens {:?} vs live {:?}",
            tokens_frozen.shape(),
            tokens_live.shape()
        )));
    }
    let n_objects = rows - 1;
    if n_new == 0 || n_new > n_objects {
        return Err(Error::InvalidArgument(format!(
            "ortho: n_new {n_new} incompatible with {n_objects} object classes"
        )));
    }
    let live = tokens_live.data();
    let frozen = tokens_frozen.data();
    let norm = 1.0 / (n_new * n_objects) as f64;
    let mut value = 0.0;
    for i in rows - n_new..rows {
        let ti = &live[i * d..(i + 1) * d];
        for j in 0..rows {
            if j == i {
                continue;
            }
            let tj = &frozen[j * d..(j + 1) * d];
            let mut dot = 0.0;
            for k in 0..d {
                dot += ti[k] * tj[k];
            }
            value += norm * dot.abs();
        }
    }
    Ok(value)
}

/// Orthogonal separation objective over the live model's tokens.
pub fn ortho_loss(model: &ToySegmenter, n_new: usize) -> Result<LossBundle> {
    let tokens = model.tokens();
    let value = ortho_value_frozen(tokens, tokens, n_new)?;
    let (rows, d) = (tokens.shape()[0], tokens.shape()[1]);
    let n_objects = rows - 1;
    let data = tokens.data();
    let norm = 1.0 / (n_new * n_objects) as f64;
    let mut grad = vec![0.0; rows * d];
    for i in rows - n_new..rows {
        let ti = &data[i * d..(i + 1) * d];
        for j in 0..rows {
            if j == i {
                continue;
            }
            let tj = &data[j * d..(j + 1) * d];
            let mut dot = 0.0;
            for k in 0..d {
                dot += ti[k] * tj[k];
            }
            if dot == 0.0 {
                continue;
            }
            let sign = if dot > 0.0 { 1.0 } else { -1.0 };
            let grow = &mut grad[i * d..(i + 1) * d];
            for k in 0..d {
                grow[k] += norm * sign * tj[k];
            }
        }
    }
    LossBundle {
        value,
        grad_decoder: Tensor::zeros(model.decoder().shape().to_vec()),
        grad_tokens: Tensor::new(vec![rows, d], grad)?,
    }
    .checked("ortho_loss")
}

/// Weighted combination of the output-distillation and orthogonal losses.
pub fn sep_loss(
    lgkd: &LossBundle,
    ortho: &LossBundle,
    coeffs: &ResolvedCoefficients,
) -> Result<LossBundle> {
    if coeffs.lambda_lgkd < 0.0 || coeffs.lambda_ortho < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "sep_loss: coefficients must be >= 0, got ({}, {})",
            coeffs.lambda_lgkd, coeffs.lambda_ortho
        )));
    }
    let mut out = LossBundle {
        value: 0.0,
        grad_decoder: Tensor::zeros(lgkd.grad_decoder.shape().to_vec()),
        grad_tokens: Tensor::zeros(lgkd.grad_tokens.shape().to_vec()),
    };
    out.add_scaled(lgkd, coeffs.lambda_lgkd)?;
    out.add_scaled(ortho, coeffs.lambda_ortho)?;
    out.checked("sep_loss")
}

/// Unweighted sum of the three objectives.
pub fn total_loss(ce: &LossBundle, afd: &LossBundle, sep: &LossBundle) -> Result<LossBundle> {
    let mut out = ce.clone();
    out.add(afd)?;
    out.add(sep)?;
    out.checked("total_loss")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelDims;
    use proptest::prelude::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    /// Identity embed, identity decoder with a zero bias row: F equals the
    /// pixel values.
    fn passthrough_model(d: usize, n_tokens: usize, token_rows: Vec<f64>) -> ToySegmenter {
        let mut eye = vec![0.0; d * d];
        for i in 0..d {
            eye[i * d + i] = 1.0;
        }
        let embed = Tensor::new(vec![d, d], eye.clone()).unwrap();
        let mut decoder_rows = eye;
        decoder_rows.extend(std::iter::repeat_n(0.0, d));
        let decoder = Tensor::new(vec![d + 1, d], decoder_rows).unwrap();
        let tokens = Tensor::new(vec![n_tokens, d], token_rows).unwrap();
        ToySegmenter::from_parts(embed, decoder, tokens, 1, (d as f64).sqrt()).unwrap()
    }

    fn uniform_model(d: usize, n_tokens: usize) -> ToySegmenter {
        passthrough_model(d, n_tokens, vec![0.25; n_tokens * d])
    }

    fn pass_for(model: &ToySegmenter, image: &Tensor) -> ForwardPass {
        model
            .forward_from_embed(&model.embed_image(image).unwrap())
            .unwrap()
    }

    #[test]
    fn ce_near_zero_for_confident_correct_prediction() {
        // strong background logit at a background-labeled pixel
        let model = passthrough_model(2, 2, vec![30.0, 0.0, 0.0, 30.0]);
        let image = Tensor::new(vec![1, 1, 2], vec![10.0, -10.0]).unwrap();
        let pass = pass_for(&model, &image);
        let y = LabelMap::filled(1, 1, BACKGROUND);
        let bundle = ce_loss(&model, &pass, &y).unwrap();
        assert!(bundle.value < 1e-6, "value {}", bundle.value);
    }

    #[test]
    fn ce_uniform_prediction_is_log_classes() {
        let model = uniform_model(2, 3);
        let image = Tensor::new(vec![2, 2, 2], vec![0.1; 8]).unwrap();
        let pass = pass_for(&model, &image);
        let y = LabelMap::filled(2, 2, 1);
        let bundle = ce_loss(&model, &pass, &y).unwrap();
        assert_close(bundle.value, 3f64.ln(), 1e-12);
    }

    #[test]
    fn ce_half_ignored_halves_the_value() {
        let model = uniform_model(2, 3);
        let image = Tensor::new(vec![1, 2, 2], vec![0.3, -0.2, 0.5, 0.1]).unwrap();
        let pass = pass_for(&model, &image);
        let y = LabelMap::from_values(1, 2, vec![1, IGNORE_LABEL]).unwrap();
        let bundle = ce_loss(&model, &pass, &y).unwrap();
        // normalizer spans all pixels, so one ignored pixel halves the mean
        assert_close(bundle.value, 3f64.ln() / 2.0, 1e-12);
    }

    #[test]
    fn ce_fully_ignored_is_zero_with_zero_gradients() {
        let model = uniform_model(2, 3);
        let image = Tensor::new(vec![1, 1, 2], vec![0.3, -0.2]).unwrap();
        let pass = pass_for(&model, &image);
        let y = LabelMap::filled(1, 1, IGNORE_LABEL);
        let bundle = ce_loss(&model, &pass, &y).unwrap();
        assert_eq!(bundle.value, 0.0);
        assert!(bundle.grad_decoder.data().iter().all(|&v| v == 0.0));
        assert!(bundle.grad_tokens.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ce_ignores_prediction_at_ignored_pixels() {
        // patch size 1: each pixel has its own prediction, so changing the
        // image at an ignored pixel changes S only there
        let model = uniform_model(2, 3);
        let image_a = Tensor::new(vec![1, 2, 2], vec![0.3, -0.2, 0.5, 0.1]).unwrap();
        let image_b = Tensor::new(vec![1, 2, 2], vec![0.3, -0.2, -2.0, 1.5]).unwrap();
        let y = LabelMap::from_values(1, 2, vec![1, IGNORE_LABEL]).unwrap();
        let a = ce_loss(&model, &pass_for(&model, &image_a), &y).unwrap();
        let b = ce_loss(&model, &pass_for(&model, &image_b), &y).unwrap();
        assert_eq!(a.value, b.value);
    }

    #[test]
    fn ce_rejects_out_of_range_label() {
        let model = uniform_model(2, 3);
        let image = Tensor::new(vec![1, 1, 2], vec![0.0, 0.0]).unwrap();
        let pass = pass_for(&model, &image);
        let y = LabelMap::filled(1, 1, 9);
        assert!(ce_loss(&model, &pass, &y).is_err());
    }

    #[test]
    fn reliability_branches() {
        let old = ClassSpan::new(1, 2);
        let new = ClassSpan::new(3, 3);
        let y = LabelMap::from_values(2, 2, vec![1, 3, IGNORE_LABEL, BACKGROUND]).unwrap();
        let mut s = Tensor::full(vec![2, 2, 3], 0.0);
        // background probability 0.83 at the background patch
        s.data_mut()[3 * 3] = 0.83;
        let m = reliability_map(&y, &s, &old, &new).unwrap();
        assert_eq!(m.data(), &[1.0, 0.0, 0.0, 0.83]);
    }

    #[test]
    fn reliability_rejects_unknown_label() {
        let y = LabelMap::filled(1, 1, 9);
        let s = Tensor::full(vec![1, 1, 3], 1.0 / 3.0);
        assert!(reliability_map(&y, &s, &ClassSpan::new(1, 2), &ClassSpan::new(3, 3)).is_err());
    }

    #[test]
    fn afd_zero_for_identical_features() {
        let model = uniform_model(2, 2);
        let image = Tensor::new(vec![2, 2, 2], vec![0.5; 8]).unwrap();
        let pass = pass_for(&model, &image);
        let m = Tensor::full(vec![2, 2], 1.0);
        let bundle = afd_loss(&model, &pass, &pass.features, &m).unwrap();
        assert_eq!(bundle.value, 0.0);
    }

    #[test]
    fn afd_fully_masked_is_zero_with_zero_gradients() {
        let model = uniform_model(2, 2);
        let image = Tensor::new(vec![2, 2, 2], vec![0.5; 8]).unwrap();
        let pass = pass_for(&model, &image);
        let f_old = Tensor::full(vec![2, 2, 2], -1.0);
        let m = Tensor::zeros(vec![2, 2]);
        let bundle = afd_loss(&model, &pass, &f_old, &m).unwrap();
        assert_eq!(bundle.value, 0.0);
        assert!(bundle.grad_decoder.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn afd_hand_case() {
        // 1x1 feature grid, difference (3, 4), weight 0.5 -> 0.5 * 25
        let model = uniform_model(2, 2);
        let image = Tensor::new(vec![1, 1, 2], vec![3.0, 4.0]).unwrap();
        let pass = pass_for(&model, &image);
        let f_old = Tensor::zeros(vec![1, 1, 2]);
        let m = Tensor::full(vec![1, 1], 0.5);
        let bundle = afd_loss(&model, &pass, &f_old, &m).unwrap();
        assert_close(bundle.value, 12.5, 1e-12);
    }

    #[test]
    fn afd_rejects_reliability_outside_unit_interval() {
        let model = uniform_model(2, 2);
        let image = Tensor::new(vec![1, 1, 2], vec![1.0, 1.0]).unwrap();
        let pass = pass_for(&model, &image);
        let f_old = Tensor::zeros(vec![1, 1, 2]);
        let m = Tensor::full(vec![1, 1], 1.5);
        assert!(afd_loss(&model, &pass, &f_old, &m).is_err());
    }

    #[test]
    fn afd_rejects_mismatched_feature_shapes() {
        let model = uniform_model(2, 2);
        let image = Tensor::new(vec![1, 1, 2], vec![1.0, 1.0]).unwrap();
        let pass = pass_for(&model, &image);
        let f_old = Tensor::zeros(vec![2, 2, 2]);
        let m = Tensor::full(vec![1, 1], 0.5);
        assert!(afd_loss(&model, &pass, &f_old, &m).is_err());
    }

    #[test]
    fn refine_background_pixel_copies_teacher() {
        let s_old = Tensor::new(vec![1, 1, 2], vec![0.6, 0.4]).unwrap();
        let y = LabelMap::filled(1, 1, BACKGROUND);
        let out = refine_teacher(&s_old, &y, &ClassSpan::new(2, 2)).unwrap();
        assert_eq!(out.data(), &[0.6, 0.4, 0.0]);
    }

    #[test]
    fn refine_new_class_pixel_moves_background_mass() {
        let s_old = Tensor::new(vec![1, 1, 2], vec![0.6, 0.4]).unwrap();
        let y = LabelMap::filled(1, 1, 2);
        let out = refine_teacher(&s_old, &y, &ClassSpan::new(2, 2)).unwrap();
        assert_eq!(out.data(), &[0.0, 0.4, 0.6]);
        assert_close(out.data().iter().sum::<f64>(), 1.0, 1e-15);
    }

    #[test]
    fn refine_old_class_pixel_keeps_mass_untouched() {
        let s_old = Tensor::new(vec![1, 1, 2], vec![0.3, 0.7]).unwrap();
        let y = LabelMap::filled(1, 1, 1);
        let out = refine_teacher(&s_old, &y, &ClassSpan::new(2, 2)).unwrap();
        assert_eq!(out.data(), &[0.3, 0.7, 0.0]);
    }

    #[test]
    fn refine_ignored_pixel_takes_otherwise_branch() {
        let s_old = Tensor::new(vec![1, 1, 2], vec![0.55, 0.45]).unwrap();
        let y = LabelMap::filled(1, 1, IGNORE_LABEL);
        let out = refine_teacher(&s_old, &y, &ClassSpan::new(2, 2)).unwrap();
        assert_eq!(out.data(), &[0.55, 0.45, 0.0]);
    }

    #[test]
    fn zero_extend_appends_zero_mass() {
        let s_old = Tensor::new(vec![1, 1, 2], vec![0.6, 0.4]).unwrap();
        let out = zero_extend_teacher(&s_old, 2).unwrap();
        assert_eq!(out.data(), &[0.6, 0.4, 0.0, 0.0]);
    }

    #[test]
    fn lgkd_matching_one_hot_is_near_zero() {
        let model = passthrough_model(2, 2, vec![30.0, 0.0, 0.0, 30.0]);
        let image = Tensor::new(vec![1, 1, 2], vec![10.0, -10.0]).unwrap();
        let pass = pass_for(&model, &image);
        let teacher = Tensor::new(vec![1, 1, 2], vec![1.0, 0.0]).unwrap();
        let bundle = lgkd_loss(&model, &pass, &teacher).unwrap();
        assert!(bundle.value < 1e-6);
    }

    #[test]
    fn lgkd_one_hot_teacher_uniform_student() {
        let model = uniform_model(2, 3);
        let image = Tensor::new(vec![1, 1, 2], vec![0.4, 0.2]).unwrap();
        let pass = pass_for(&model, &image);
        let teacher = Tensor::new(vec![1, 1, 3], vec![0.0, 1.0, 0.0]).unwrap();
        let bundle = lgkd_loss(&model, &pass, &teacher).unwrap();
        assert_close(bundle.value, 3f64.ln(), 1e-12);
    }

    #[test]
    fn lgkd_hand_sum() {
        let model = uniform_model(2, 3);
        let image = Tensor::new(vec![1, 1, 2], vec![0.0, 0.0]).unwrap();
        let pass = pass_for(&model, &image);
        let teacher = Tensor::new(vec![1, 1, 3], vec![0.0, 0.4, 0.6]).unwrap();
        let bundle = lgkd_loss(&model, &pass, &teacher).unwrap();
        // 0.4 ln 3 + 0.6 ln 3 = ln 3
        assert_close(bundle.value, 3f64.ln(), 1e-12);
    }

    #[test]
    fn ortho_zero_for_mutually_orthogonal_tokens() {
        let tokens = vec![
            1.0, 0.0, 0.0, //
            0.0, 1.0, 0.0, //
            0.0, 0.0, 1.0,
        ];
        let model = passthrough_model(3, 3, tokens);
        let bundle = ortho_loss(&model, 1).unwrap();
        assert_eq!(bundle.value, 0.0);
        assert!(bundle.grad_tokens.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ortho_after_background_transfer_hand_case() {
        // bg = e0, old = e1 (orthogonal), new = copy of bg (unit norm)
        let tokens = vec![
            1.0, 0.0, 0.0, //
            0.0, 1.0, 0.0, //
            1.0, 0.0, 0.0,
        ];
        let model = passthrough_model(3, 3, tokens);
        let bundle = ortho_loss(&model, 1).unwrap();
        // only the (new, background) pair contributes: ||t_b||^2 / (1 * 2)
        assert_close(bundle.value, 0.5, 1e-15);
        // gradient hits only the new row
        let g = bundle.grad_tokens.data();
        assert_eq!(&g[0..6], &[0.0; 6]);
        assert_close(g[6], 0.5, 1e-15);
        assert_eq!(g[7], 0.0);
        assert_eq!(g[8], 0.0);
    }

    #[test]
    fn ortho_gradient_zero_on_old_and_background_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = ToySegmenter::init(
            1,
            3,
            ModelDims {
                d_embed: 3,
                d_model: 4,
            },
            4,
            &mut rng,
        )
        .unwrap();
        let bundle = ortho_loss(&model, 2).unwrap();
        let d = model.d_model();
        let g = bundle.grad_tokens.data();
        // rows 0..3 are background + old classes
        assert!(g[..3 * d].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ortho_rejects_zero_new_classes() {
        let model = uniform_model(2, 3);
        assert!(ortho_loss(&model, 0).is_err());
        assert!(ortho_loss(&model, 5).is_err());
    }

    #[test]
    fn sep_combines_linearly() {
        let model = uniform_model(2, 3);
        let image = Tensor::new(vec![1, 1, 2], vec![0.0, 0.0]).unwrap();
        let pass = pass_for(&model, &image);
        let teacher = Tensor::new(vec![1, 1, 3], vec![0.2, 0.3, 0.5]).unwrap();
        let lgkd = lgkd_loss(&model, &pass, &teacher).unwrap();
        let ortho = ortho_loss(&model, 1).unwrap();
        let coeffs = ResolvedCoefficients {
            lambda_lgkd: 25.0,
            lambda_ortho: 0.2,
        };
        let sep = sep_loss(&lgkd, &ortho, &coeffs).unwrap();
        assert_close(sep.value, 25.0 * lgkd.value + 0.2 * ortho.value, 1e-12);
    }

    #[test]
    fn sep_rejects_negative_coefficients() {
        let model = uniform_model(2, 3);
        let zero = LossBundle::zeros_like(&model);
        let coeffs = ResolvedCoefficients {
            lambda_lgkd: -1.0,
            lambda_ortho: 0.0,
        };
        assert!(sep_loss(&zero, &zero, &coeffs).is_err());
    }

    #[test]
    fn sep_zero_coefficients_give_zero_bundle() {
        let model = uniform_model(2, 3);
        let image = Tensor::new(vec![1, 1, 2], vec![0.1, 0.2]).unwrap();
        let pass = pass_for(&model, &image);
        let teacher = Tensor::new(vec![1, 1, 3], vec![0.2, 0.3, 0.5]).unwrap();
        let lgkd = lgkd_loss(&model, &pass, &teacher).unwrap();
        let ortho = ortho_loss(&model, 1).unwrap();
        let sep = sep_loss(
            &lgkd,
            &ortho,
            &ResolvedCoefficients {
                lambda_lgkd: 0.0,
                lambda_ortho: 0.0,
            },
        )
        .unwrap();
        assert_eq!(sep.value, 0.0);
        assert!(sep.grad_tokens.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adaptive_lambda_matches_class_ratio() {
        let coeffs = LossCoefficients::default();
        // step 2 of "4-1": 1 new of 5 known
        let r = coeffs.resolve(1, 5).unwrap();
        assert_close(r.lambda_ortho, 0.2, 1e-15);
        // step 3: 1 of 6
        let r = coeffs.resolve(1, 6).unwrap();
        assert_close(r.lambda_ortho, 1.0 / 6.0, 1e-15);
    }

    #[test]
    fn lgkd_sweep_values_are_accepted() {
        for lambda in [5.0, 10.0, 20.0, 25.0, 50.0] {
            let coeffs = LossCoefficients {
                lambda_lgkd: lambda,
                lambda_ortho: OrthoWeight::Adaptive,
            };
            assert!(coeffs.resolve(1, 5).is_ok());
        }
    }

    #[test]
    fn total_is_plain_sum() {
        let model = uniform_model(2, 3);
        let image = Tensor::new(vec![1, 1, 2], vec![0.1, -0.4]).unwrap();
        let pass = pass_for(&model, &image);
        let y = LabelMap::filled(1, 1, 1);
        let ce = ce_loss(&model, &pass, &y).unwrap();
        let f_old = Tensor::zeros(vec![1, 1, 2]);
        let m = Tensor::full(vec![1, 1], 0.7);
        let afd = afd_loss(&model, &pass, &f_old, &m).unwrap();
        let teacher = Tensor::new(vec![1, 1, 3], vec![0.2, 0.3, 0.5]).unwrap();
        let lgkd = lgkd_loss(&model, &pass, &teacher).unwrap();
        let ortho = ortho_loss(&model, 1).unwrap();
        let sep = sep_loss(
            &lgkd,
            &ortho,
            &ResolvedCoefficients {
                lambda_lgkd: 25.0,
                lambda_ortho: 0.2,
            },
        )
        .unwrap();
        let total = total_loss(&ce, &afd, &sep).unwrap();
        assert_close(total.value, ce.value + afd.value + sep.value, 1e-15);
        for i in 0..total.grad_tokens.len() {
            let expect = ce.grad_tokens.data()[i] + afd.grad_tokens.data()[i] + sep.grad_tokens.data()[i];
            assert_close(total.grad_tokens.data()[i], expect, 1e-15);
        }
    }

    #[test]
    fn total_of_zero_bundles_is_zero() {
        let model = uniform_model(2, 3);
        let z = LossBundle::zeros_like(&model);
        let total = total_loss(&z, &z, &z).unwrap();
        assert_eq!(total.value, 0.0);
    }

    proptest! {
        // AFD with unit reliability equals the vanilla squared distance,
        // and each reliability entry scales its patch monotonically.
        #[test]
        fn afd_matches_unweighted_mse_and_is_monotone(
            img in proptest::collection::vec(-1.0f64..1.0, 8),
            fold in proptest::collection::vec(-1.0f64..1.0, 8),
            weights in proptest::collection::vec(0.0f64..1.0, 4),
        ) {
            let model = uniform_model(2, 2);
            let image = Tensor::new(vec![2, 2, 2], img).unwrap();
            let pass = pass_for(&model, &image);
            let f_old = Tensor::new(vec![2, 2, 2], fold).unwrap();
            let ones = Tensor::full(vec![2, 2], 1.0);
            let vanilla = afd_loss(&model, &pass, &f_old, &ones).unwrap().value;
            let mut oracle = 0.0;
            for (f, o) in pass.features.data().iter().zip(f_old.data().iter()) {
                oracle += (f - o) * (f - o);
            }
            oracle /= 4.0;
            prop_assert!((vanilla - oracle).abs() < 1e-12);

            let m = Tensor::new(vec![2, 2], weights.clone()).unwrap();
            let weighted = afd_loss(&model, &pass, &f_old, &m).unwrap().value;
            prop_assert!(weighted <= vanilla + 1e-12);
            // raising one weight never lowers the loss
            let mut bumped = weights;
            bumped[0] = (bumped[0] + 0.5).min(1.0);
            let m2 = Tensor::new(vec![2, 2], bumped).unwrap();
            let bumped_loss = afd_loss(&model, &pass, &f_old, &m2).unwrap().value;
            prop_assert!(bumped_loss + 1e-12 >= weighted);
        }

        // permuting old-class rows permutes nothing observable
        #[test]
        fn ortho_invariant_under_old_row_permutation(rows in proptest::collection::vec(-1.0f64..1.0, 12)) {
            // layout: bg, old1, old2, new
            let tokens = Tensor::new(vec![4, 3], rows.clone()).unwrap();
            let mut perm = rows;
            for k in 0..3 {
                perm.swap(3 + k, 6 + k); // swap old1 and old2
            }
            let permuted = Tensor::new(vec![4, 3], perm).unwrap();
            let a = ortho_value_frozen(&tokens, &tokens, 1).unwrap();
            let b = ortho_value_frozen(&permuted, &permuted, 1).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }

        // refined teacher conserves probability mass
        #[test]
        fn refine_conserves_mass(raw in proptest::collection::vec(1e-6f64..1.0, 3), label in 0u8..5) {
            let sum: f64 = raw.iter().sum();
            let dist: Vec<f64> = raw.iter().map(|v| v / sum).collect();
            let s_old = Tensor::new(vec![1, 1, 3], dist).unwrap();
            let label = if label == 4 { IGNORE_LABEL } else { label };
            let y = LabelMap::filled(1, 1, label);
            let out = refine_teacher(&s_old, &y, &ClassSpan::new(3, 3)).unwrap();
            let total: f64 = out.data().iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }
    }
}
