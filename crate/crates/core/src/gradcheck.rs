//! Finite-difference validation of every analytic gradient.
//!
//! Each trial draws a random small model, image, labels, teacher, old
//! features, and reliability map, then compares the packed (decoder, tokens)
//! gradient of every loss against central differences. The orthogonal loss
//! is differentiated with a stop-gradient on its second factor, so its value
//! function holds that side frozen at the base point while coordinates are
//! perturbed.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::label::{LabelMap, IGNORE_LABEL};
use crate::losses::{
    self, LossBundle, LossCoefficients, OrthoWeight, ResolvedCoefficients,
};
use crate::model::{ModelDims, ToySegmenter};
use crate::numerics::{finite_diff_check, Tensor};
use crate::scenes::ClassSpan;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Worst relative error seen per loss across all trials.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub ce: f64,
    pub afd: f64,
    pub lgkd: f64,
    pub ortho: f64,
    pub total: f64,
    pub trials: usize,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        [self.ce, self.afd, self.lgkd, self.ortho, self.total]
            .into_iter()
            .fold(0.0, f64::max)
    }

    pub fn rows(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("ce", self.ce),
            ("afd", self.afd),
            ("lgkd", self.lgkd),
            ("ortho", self.ortho),
            ("total", self.total),
        ]
    }
}

struct Trial {
    model: ToySegmenter,
    patch_embed: Tensor,
    labels: LabelMap,
    teacher: Tensor,
    f_old: Tensor,
    reliability: Tensor,
    n_new: usize,
    coeffs: ResolvedCoefficients,
}

fn pack(decoder: &Tensor, tokens: &Tensor) -> Tensor {
    let mut data = decoder.data().to_vec();
    data.extend_from_slice(tokens.data());
    Tensor::new(vec![data.len()], data).expect("packed params are finite")
}

fn unpack(params: &Tensor, like: &ToySegmenter) -> Result<ToySegmenter> {
    let nd = like.decoder().len();
    let decoder = Tensor::new(like.decoder().shape().to_vec(), params.data()[..nd].to_vec())?;
    let tokens = Tensor::new(like.tokens().shape().to_vec(), params.data()[nd..].to_vec())?;
    ToySegmenter::from_parts(
        like.embed_matrix().clone(),
        decoder,
        tokens,
        like.patch_size(),
        like.temperature(),
    )
}

fn random_trial(rng: &mut ChaCha8Rng) -> Result<Trial> {
    let dims = ModelDims {
        d_embed: rng.gen_range(3..=6),
        d_model: rng.gen_range(3..=6),
    };
    let n_old = rng.gen_range(1..=3usize);
    let n_new = rng.gen_range(1..=2usize);
    let patch = 2usize;
    let channels = 3usize;
    let size = 4usize; // 2x2 patch grid
    let classes = n_old + n_new + 1;

    // Keep every token pair away from the |dot| = 0 kink of the orthogonal
    // loss; central differences are meaningless across the kink.
    let model = loop {
        let candidate = ToySegmenter::init(patch, channels, dims, n_old + n_new, rng)?;
        let t = candidate.tokens();
        let d = dims.d_model;
        let rows = classes;
        let mut ok = true;
        'outer: for i in rows - n_new..rows {
            for j in 0..rows {
                if i == j {
                    continue;
                }
                let a = &t.data()[i * d..(i + 1) * d];
                let b = &t.data()[j * d..(j + 1) * d];
                let dot: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
                if dot.abs() < 1e-3 {
                    ok = false;
                    break 'outer;
                }
            }
        }
        if ok {
            break candidate;
        }
    };

    let image = Tensor::new(
        vec![size, size, channels],
        (0..size * size * channels)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect(),
    )?;
    let patch_embed = model.embed_image(&image)?;

    let mut labels = Vec::with_capacity(size * size);
    for i in 0..size * size {
        // mix of real labels and ignores, but never fully ignored
        if i > 0 && rng.gen_bool(0.2) {
            labels.push(IGNORE_LABEL);
        } else {
            labels.push(rng.gen_range(0..classes) as u8);
        }
    }
    let labels = LabelMap::from_values(size, size, labels)?;

    // teacher: random old-model distribution refined against the labels
    let c_old = n_old + 1;
    let mut teacher_raw = Vec::with_capacity(size * size * c_old);
    for _ in 0..size * size {
        let raw: Vec<f64> = (0..c_old).map(|_| rng.gen_range(1e-3..1.0)).collect();
        let sum: f64 = raw.iter().sum();
        teacher_raw.extend(raw.into_iter().map(|v| v / sum));
    }
    let s_old = Tensor::new(vec![size, size, c_old], teacher_raw)?;
    let new_span = ClassSpan::new(c_old as u8, (c_old + n_new - 1) as u8);
    let teacher = losses::refine_teacher(&s_old, &labels, &new_span)?;

    let pass = model.forward_from_embed(&patch_embed)?;
    let f_old = Tensor::new(
        pass.features.shape().to_vec(),
        (0..pass.features.len())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect(),
    )?;
    let grid = size / patch;
    let reliability = Tensor::new(
        vec![grid, grid],
        (0..grid * grid).map(|_| rng.gen_range(0.0..=1.0)).collect(),
    )?;

    let coeffs = LossCoefficients {
        lambda_lgkd: rng.gen_range(1.0..30.0),
        lambda_ortho: OrthoWeight::Adaptive,
    }
    .resolve(n_new, n_old + n_new)?;

    Ok(Trial {
        model,
        patch_embed,
        labels,
        teacher,
        f_old,
        reliability,
        n_new,
        coeffs,
    })
}

fn bundle_grad(trial: &Trial, bundle: &LossBundle) -> Tensor {
    let _ = trial;
    pack(&bundle.grad_decoder, &bundle.grad_tokens)
}

fn check_loss<V, G>(trial: &Trial, value_fn: V, bundle_fn: G) -> Result<f64>
where
    V: Fn(&ToySegmenter) -> Result<f64>,
    G: Fn(&ToySegmenter) -> Result<LossBundle>,
{
    let params = pack(trial.model.decoder(), trial.model.tokens());
    let bundle = bundle_fn(&trial.model)?;
    let grad = bundle_grad(trial, &bundle);
    finite_diff_check(
        |p| {
            let m = unpack(p, &trial.model)?;
            value_fn(&m)
        },
        &grad,
        &params,
        DEFAULT_EPS,
    )
}

/// Runs `trials` random configurations for every loss and the combined
/// objective, returning the worst relative errors.
pub fn run(trials: usize, seed: u64) -> Result<GradCheckReport> {
    if trials == 0 {
        return Err(Error::InvalidArgument("gradcheck: trials must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        ce: 0.0,
        afd: 0.0,
        lgkd: 0.0,
        ortho: 0.0,
        total: 0.0,
        trials,
    };
    for _ in 0..trials {
        let trial = random_trial(&mut rng)?;
        let base_tokens = trial.model.tokens().clone();

        let ce_err = check_loss(
            &trial,
            |m| {
                let pass = m.forward_from_embed(&trial.patch_embed)?;
                Ok(losses::ce_loss(m, &pass, &trial.labels)?.value)
            },
            |m| {
                let pass = m.forward_from_embed(&trial.patch_embed)?;
                losses::ce_loss(m, &pass, &trial.labels)
            },
        )?;
        report.ce = report.ce.max(ce_err);

        let afd_err = check_loss(
            &trial,
            |m| {
                let pass = m.forward_from_embed(&trial.patch_embed)?;
                Ok(losses::afd_loss(m, &pass, &trial.f_old, &trial.reliability)?.value)
            },
            |m| {
                let pass = m.forward_from_embed(&trial.patch_embed)?;
                losses::afd_loss(m, &pass, &trial.f_old, &trial.reliability)
            },
        )?;
        report.afd = report.afd.max(afd_err);

        let lgkd_err = check_loss(
            &trial,
            |m| {
                let pass = m.forward_from_embed(&trial.patch_embed)?;
                Ok(losses::lgkd_loss(m, &pass, &trial.teacher)?.value)
            },
            |m| {
                let pass = m.forward_from_embed(&trial.patch_embed)?;
                losses::lgkd_loss(m, &pass, &trial.teacher)
            },
        )?;
        report.lgkd = report.lgkd.max(lgkd_err);

        let ortho_err = check_loss(
            &trial,
            |m| losses::ortho_value_frozen(m.tokens(), &base_tokens, trial.n_new),
            |m| losses::ortho_loss(m, trial.n_new),
        )?;
        report.ortho = report.ortho.max(ortho_err);

        let total_err = check_loss(
            &trial,
            |m| {
                let pass = m.forward_from_embed(&trial.patch_embed)?;
                let ce = losses::ce_loss(m, &pass, &trial.labels)?.value;
                let afd = losses::afd_loss(m, &pass, &trial.f_old, &trial.reliability)?.value;
                let lgkd = losses::lgkd_loss(m, &pass, &trial.teacher)?.value;
                let ortho = losses::ortho_value_frozen(m.tokens(), &base_tokens, trial.n_new)?;
                Ok(ce + afd + trial.coeffs.lambda_lgkd * lgkd + trial.coeffs.lambda_ortho * ortho)
            },
            |m| {
                let pass = m.forward_from_embed(&trial.patch_embed)?;
                let ce = losses::ce_loss(m, &pass, &trial.labels)?;
                let afd = losses::afd_loss(m, &pass, &trial.f_old, &trial.reliability)?;
                let lgkd = losses::lgkd_loss(m, &pass, &trial.teacher)?;
                let ortho = losses::ortho_loss(m, trial.n_new)?;
                let sep = losses::sep_loss(&lgkd, &ortho, &trial.coeffs)?;
                losses::total_loss(&ce, &afd, &sep)
            },
        )?;
        report.total = report.total.max(total_err);
    }
    Ok(report)
}
