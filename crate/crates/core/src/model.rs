//! A minimal differentiable segmenter with class tokens.
//!
//! The pipeline is: flattened image patches -> frozen random projection
//! (`embed`) plus a constant channel -> learnable linear `decoder` -> patch
//! features F -> scaled dot products with the class `tokens` -> patch logits
//! -> nearest-replication to pixel resolution -> softmax prediction S. Only
//! `decoder` and `tokens` learn; the embedding is drawn once per run and
//! shared by the old and new models, so feature distillation between them
//! compares like with like.
//!
//! The constant channel acts as the decoder's bias row. Without it a
//! zero-signature background patch would produce identically zero features
//! and therefore frozen uniform logits that no parameter could change.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::{self, matmul, softmax, Tensor};

/// Hidden sizes; kept small so exhaustive finite-difference checks stay cheap.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub d_embed: usize,
    pub d_model: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            d_embed: 16,
            d_model: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToySegmenter {
    embed: Tensor,   // [P*P*ch, d_embed], frozen
    decoder: Tensor, // [d_embed + 1, d_model]; last row multiplies the constant channel
    tokens: Tensor,  // [K+1, d_model]; row 0 is the background token
    patch_size: usize,
    temperature: f64,
}

/// Intermediate results of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// Patch embeddings E, [Hf, Wf, d_embed].
    pub patch_embed: Tensor,
    /// Patch features F, [Hf, Wf, d_model].
    pub features: Tensor,
    /// Patch logits, [Hf, Wf, K+1].
    pub patch_logits: Tensor,
    /// Pixel-resolution prediction S, [H, W, K+1]; each slice sums to 1.
    pub probs: Tensor,
}

impl ToySegmenter {
    /// Fresh model at the base step with `n_object_classes` + background
    /// tokens. Tokens are N(0, 1/sqrt(D)); embed and decoder use matching
    /// fan-in scaling so initial logits are O(1).
    pub fn init<R: Rng>(
        patch_size: usize,
        feature_channels: usize,
        dims: ModelDims,
        n_object_classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let patch_dim = patch_size * patch_size * feature_channels;
        let embed = random_tensor(vec![patch_dim, dims.d_embed], (patch_dim as f64).sqrt().recip(), rng)?;
        let decoder = random_tensor(
            vec![dims.d_embed + 1, dims.d_model],
            ((dims.d_embed + 1) as f64).sqrt().recip(),
            rng,
        )?;
        let tokens = random_tensor(
            vec![n_object_classes + 1, dims.d_model],
            (dims.d_model as f64).sqrt().recip(),
            rng,
        )?;
        Self::from_parts(embed, decoder, tokens, patch_size, (dims.d_model as f64).sqrt())
    }

    pub fn from_parts(
        embed: Tensor,
        decoder: Tensor,
        tokens: Tensor,
        patch_size: usize,
        temperature: f64,
    ) -> Result<Self> {
        let d_model = match (embed.shape(), decoder.shape()) {
            ([_, de], [rows, dm]) if *rows == de + 1 => *dm,
            (e, d) => {
                return Err(Error::ShapeMismatch(format!(
                    "embed {e:?} incompatible with decoder {d:?} (decoder needs one extra row for the constant channel)"
                )))
            }
        };
        match tokens.shape() {
            [rows, dm] if *dm == d_model && *rows >= 1 => {}
            s => {
                return Err(Error::ShapeMismatch(format!(
                    "tokens {s:?} incompatible with decoder width {d_model}"
                )))
            }
        }
        if patch_size == 0 {
            return Err(Error::InvalidArgument("patch_size must be >= 1".into()));
        }
        if !temperature.is_finite() || temperature <= 0.0 {
            return Err(Error::InvalidArgument("temperature must be finite and > 0".into()));
        }
        Ok(Self {
            embed,
            decoder,
            tokens,
            patch_size,
            temperature,
        })
    }

    pub fn with_temperature(mut self, temperature: f64) -> Result<Self> {
        if !temperature.is_finite() || temperature <= 0.0 {
            return Err(Error::InvalidArgument("temperature must be finite and > 0".into()));
        }
        self.temperature = temperature;
        Ok(self)
    }

    pub fn embed_matrix(&self) -> &Tensor {
        &self.embed
    }

    pub fn decoder(&self) -> &Tensor {
        &self.decoder
    }

    pub fn decoder_mut(&mut self) -> &mut Tensor {
        &mut self.decoder
    }

    pub fn tokens(&self) -> &Tensor {
        &self.tokens
    }

    pub fn tokens_mut(&mut self) -> &mut Tensor {
        &mut self.tokens
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    /// Background token plus object tokens.
    pub fn num_tokens(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn num_object_classes(&self) -> usize {
        self.num_tokens() - 1
    }

    /// Width of the patch embedding fed to the decoder (projection plus the
    /// constant channel).
    pub fn d_embed(&self) -> usize {
        self.decoder.shape()[0]
    }

    pub fn d_model(&self) -> usize {
        self.decoder.shape()[1]
    }

    /// Flattens patches, projects them through the frozen embedding, and
    /// appends the constant channel. The result depends only on the image,
    /// so callers training over many epochs can compute it once per scene.
    pub fn embed_image(&self, image: &Tensor) -> Result<Tensor> {
        let (h, w, ch) = match image.shape() {
            [h, w, ch] => (*h, *w, *ch),
            s => {
                return Err(Error::ShapeMismatch(format!(
                    "image must be [H, W, ch], got {s:?}"
                )))
            }
        };
        let p = self.patch_size;
        if h % p != 0 || w % p != 0 {
            return Err(Error::ShapeMismatch(format!(
                "image {h}x{w} not divisible by patch size {p}"
            )));
        }
        let patch_dim = p * p * ch;
        if patch_dim != self.embed.shape()[0] {
            return Err(Error::ShapeMismatch(format!(
                "patch dim {patch_dim} does not match embed rows {}",
                self.embed.shape()[0]
            )));
        }
        let (hf, wf) = (h / p, w / p);
        let mut patches = vec![0.0; hf * wf * patch_dim];
        let data = image.data();
        for ph in 0..hf {
            for pw in 0..wf {
                let base = (ph * wf + pw) * patch_dim;
                for dy in 0..p {
                    let row = ((ph * p + dy) * w + pw * p) * ch;
                    let dst = base + dy * p * ch;
                    patches[dst..dst + p * ch].copy_from_slice(&data[row..row + p * ch]);
                }
            }
        }
        let flat = Tensor::new(vec![hf * wf, patch_dim], patches)?;
        let embedded = matmul(&flat, &self.embed)?;
        let de = self.embed.shape()[1];
        let mut data = Vec::with_capacity(hf * wf * (de + 1));
        for row in embedded.data().chunks(de) {
            data.extend_from_slice(row);
            data.push(1.0);
        }
        Tensor::new(vec![hf, wf, de + 1], data)
    }

    /// Forward pass from precomputed patch embeddings.
    pub fn forward_from_embed(&self, patch_embed: &Tensor) -> Result<ForwardPass> {
        let (hf, wf, de) = match patch_embed.shape() {
            [hf, wf, de] => (*hf, *wf, *de),
            s => {
                return Err(Error::ShapeMismatch(format!(
                    "patch embedding must be [Hf, Wf, D_embed], got {s:?}"
                )))
            }
        };
        if de != self.d_embed() {
            return Err(Error::ShapeMismatch(format!(
                "embedding width {de} != decoder input {}",
                self.d_embed()
            )));
        }
        let n = hf * wf;
        let d = self.d_model();
        let c = self.num_tokens();
        let e_flat = Tensor::new(vec![n, de], patch_embed.data().to_vec())?;
        let f_flat = matmul(&e_flat, &self.decoder)?;
        // logits[n][c] = F[n] . tokens[c] / temperature
        let mut logits = vec![0.0; n * c];
        let fd = f_flat.data();
        let td = self.tokens.data();
        let inv_t = 1.0 / self.temperature;
        for i in 0..n {
            let frow = &fd[i * d..(i + 1) * d];
            for cc in 0..c {
                let trow = &td[cc * d..(cc + 1) * d];
                let mut dot = 0.0;
                for k in 0..d {
                    dot += frow[k] * trow[k];
                }
                logits[i * c + cc] = dot * inv_t;
            }
        }
        let patch_logits = Tensor::new(vec![hf, wf, c], logits)?;
        // Softmax per patch, then replicate to pixels: replication copies
        // whole class slices, so this equals softmaxing the upsampled logits.
        let patch_probs = softmax(&patch_logits)?;
        let probs = numerics::upsample_nearest(&patch_probs, self.patch_size)?;
        Ok(ForwardPass {
            patch_embed: patch_embed.clone(),
            features: Tensor::new(vec![hf, wf, d], f_flat.data().to_vec())?,
            patch_logits,
            probs,
        })
    }

    /// Full forward: patch features F [Hf, Wf, D] and the pixel-resolution
    /// prediction S [H, W, K+1].
    pub fn forward(&self, image: &Tensor) -> Result<(Tensor, Tensor)> {
        let pass = self.forward_from_embed(&self.embed_image(image)?)?;
        Ok((pass.features, pass.probs))
    }

    /// Appends `n_new` token rows, each an exact copy of the background
    /// token (background token transfer). Everything else is unchanged.
    pub fn expand_for_new_classes(&self, n_new: usize) -> Result<ToySegmenter> {
        if n_new == 0 {
            return Err(Error::InvalidArgument(
                "expand_for_new_classes: n_new must be >= 1".into(),
            ));
        }
        let d = self.d_model();
        let rows = self.num_tokens();
        let mut data = self.tokens.data().to_vec();
        let background: Vec<f64> = data[0..d].to_vec();
        for _ in 0..n_new {
            data.extend_from_slice(&background);
        }
        let tokens = Tensor::new(vec![rows + n_new, d], data)?;
        Ok(ToySegmenter {
            embed: self.embed.clone(),
            decoder: self.decoder.clone(),
            tokens,
            patch_size: self.patch_size,
            temperature: self.temperature,
        })
    }

    /// Deep copy to serve as the frozen old model.
    pub fn snapshot(&self) -> ToySegmenter {
        self.clone()
    }

    /// Chains per-loss gradients back to the learnable parameters.
    ///
    /// `grad_probs` is dL/dS at pixel resolution; `grad_features` is a direct
    /// dL/dF contribution (feature distillation). Either may be absent.
    /// Returns (dL/d decoder, dL/d tokens).
    pub fn backprop(
        &self,
        pass: &ForwardPass,
        grad_probs: Option<&Tensor>,
        grad_features: Option<&Tensor>,
    ) -> Result<(Tensor, Tensor)> {
        let (hf, wf, d) = match pass.features.shape() {
            [hf, wf, d] => (*hf, *wf, *d),
            s => return Err(Error::ShapeMismatch(format!("features {s:?}"))),
        };
        let c = self.num_tokens();
        let n = hf * wf;
        let p = self.patch_size;
        let w_pix = wf * p;

        // dL/d patch logits, accumulated over the pixels of each patch.
        let mut d_logits = vec![0.0; n * c];
        if let Some(gs) = grad_probs {
            if gs.shape() != pass.probs.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "grad_probs {:?} vs probs {:?}",
                    gs.shape(),
                    pass.probs.shape()
                )));
            }
            let s = pass.probs.data();
            let g = gs.data();
            let h_pix = hf * p;
            for py in 0..h_pix {
                for px in 0..w_pix {
                    let pix = (py * w_pix + px) * c;
                    let srow = &s[pix..pix + c];
                    let grow = &g[pix..pix + c];
                    let mut dot = 0.0;
                    for k in 0..c {
                        dot += grow[k] * srow[k];
                    }
                    let patch = (py / p) * wf + px / p;
                    let drow = &mut d_logits[patch * c..(patch + 1) * c];
                    for k in 0..c {
                        drow[k] += srow[k] * (grow[k] - dot);
                    }
                }
            }
        }

        // dL/dF = d_logits . tokens / T (+ direct feature gradient).
        let mut d_features = vec![0.0; n * d];
        let td = self.tokens.data();
        let inv_t = 1.0 / self.temperature;
        for i in 0..n {
            let drow = &d_logits[i * c..(i + 1) * c];
            let frow = &mut d_features[i * d..(i + 1) * d];
            for cc in 0..c {
                let dv = drow[cc] * inv_t;
                if dv == 0.0 {
                    continue;
                }
                let trow = &td[cc * d..(cc + 1) * d];
                for k in 0..d {
                    frow[k] += dv * trow[k];
                }
            }
        }
        if let Some(gf) = grad_features {
            if gf.shape() != pass.features.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "grad_features {:?} vs features {:?}",
                    gf.shape(),
                    pass.features.shape()
                )));
            }
            for (a, b) in d_features.iter_mut().zip(gf.data().iter()) {
                *a += b;
            }
        }

        // dL/d tokens = d_logits^T . F / T.
        let mut d_tokens = vec![0.0; c * d];
        let fd = pass.features.data();
        for i in 0..n {
            let drow = &d_logits[i * c..(i + 1) * c];
            let frow = &fd[i * d..(i + 1) * d];
            for cc in 0..c {
                let dv = drow[cc] * inv_t;
                if dv == 0.0 {
                    continue;
                }
                let trow = &mut d_tokens[cc * d..(cc + 1) * d];
                for k in 0..d {
                    trow[k] += dv * frow[k];
                }
            }
        }

        // dL/d decoder = E^T . dL/dF.
        let de = self.d_embed();
        let mut d_decoder = vec![0.0; de * d];
        let ed = pass.patch_embed.data();
        for i in 0..n {
            let erow = &ed[i * de..(i + 1) * de];
            let frow = &d_features[i * d..(i + 1) * d];
            for e in 0..de {
                let ev = erow[e];
                if ev == 0.0 {
                    continue;
                }
                let drow = &mut d_decoder[e * d..(e + 1) * d];
                for k in 0..d {
                    drow[k] += ev * frow[k];
                }
            }
        }

        Ok((
            Tensor::new(vec![de, d], d_decoder)?,
            Tensor::new(vec![c, d], d_tokens)?,
        ))
    }
}

fn random_tensor<R: Rng>(shape: Vec<usize>, std: f64, rng: &mut R) -> Result<Tensor> {
    let normal =
        Normal::new(0.0, std).map_err(|e| Error::InvalidArgument(format!("init: {e}")))?;
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| normal.sample(rng)).collect();
    Tensor::new(shape, data)
}

// --- checkpoints ------------------------------------------------------------
//
// One tensor container per parameter plus a manifest listing names, shapes,
// and the step index.

const PARAM_NAMES: [&str; 3] = ["embed", "decoder", "tokens"];

pub fn save_checkpoint(dir: &Path, model: &ToySegmenter, step: usize) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let params = [&model.embed, &model.decoder, &model.tokens];
    let mut manifest = String::new();
    writeln!(manifest, "step = {step}").unwrap();
    writeln!(manifest, "patch_size = {}", model.patch_size).unwrap();
    writeln!(manifest, "temperature = {}", model.temperature).unwrap();
    for (name, tensor) in PARAM_NAMES.iter().zip(params.iter()) {
        let shape = tensor
            .shape()
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join("x");
        writeln!(manifest, "param = {name} shape = {shape} file = {name}.clt").unwrap();
        numerics::save_tensor(&dir.join(format!("{name}.clt")), tensor)?;
    }
    std::fs::write(dir.join("manifest.txt"), manifest)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(ToySegmenter, usize)> {
    let manifest = std::fs::read_to_string(dir.join("manifest.txt"))?;
    let mut step = None;
    let mut patch_size = None;
    let mut temperature = None;
    for line in manifest.lines() {
        let line = line.trim();
        if let Some(rest) = line.strip_prefix("step = ") {
            step = Some(rest.parse::<usize>().map_err(|e| {
                Error::Config(format!("checkpoint manifest: bad step '{rest}': {e}"))
            })?);
        } else if let Some(rest) = line.strip_prefix("patch_size = ") {
            patch_size = Some(rest.parse::<usize>().map_err(|e| {
                Error::Config(format!("checkpoint manifest: bad patch_size '{rest}': {e}"))
            })?);
        } else if let Some(rest) = line.strip_prefix("temperature = ") {
            temperature = Some(rest.parse::<f64>().map_err(|e| {
                Error::Config(format!("checkpoint manifest: bad temperature '{rest}': {e}"))
            })?);
        }
    }
    let step = step.ok_or_else(|| Error::Config("checkpoint manifest missing step".into()))?;
    let patch_size =
        patch_size.ok_or_else(|| Error::Config("checkpoint manifest missing patch_size".into()))?;
    let temperature = temperature
        .ok_or_else(|| Error::Config("checkpoint manifest missing temperature".into()))?;
    let embed = numerics::load_tensor(&dir.join("embed.clt"))?;
    let decoder = numerics::load_tensor(&dir.join("decoder.clt"))?;
    let tokens = numerics::load_tensor(&dir.join("tokens.clt"))?;
    let model = ToySegmenter::from_parts(embed, decoder, tokens, patch_size, temperature)?;
    Ok((model, step))
}
