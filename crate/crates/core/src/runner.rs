//! Continual-training driver: base-step training, old-model snapshotting,
//! background token transfer, incremental optimization of the full objective,
//! per-step evaluation, and the ablation grid.

use std::io::Write as IoWrite;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::config::{AblationFlags, LabConfig};
use crate::error::{Error, Result};
use crate::label::LabelMap;
use crate::labeling::{
    downsample_labels_and_probs, object_identifier, pseudo_label, selective_pseudo_label,
    ObjectIdentifierMap,
};
use crate::losses::{
    afd_loss, ce_loss, lgkd_loss, ortho_loss, refine_teacher, reliability_map,
    zero_extend_teacher, LossBundle, OrthoWeight,
};
use crate::metrics::{
    background_shift_rate, ignored_label_stats, miou, predict_labels, token_similarity,
    ClassGroups, IgnoredLabelStats, IoUReport, SimilarityReport,
};
use crate::model::{save_checkpoint, ModelDims, ToySegmenter};
use crate::numerics::Tensor;
use crate::scenes::{
    derive_seed, generate_eval_scene, generate_scene, scene_rng, streams, Scene, Setting,
};

/// Fixed all-class test set size per run.
pub const EVAL_SCENE_COUNT: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLoss {
    pub total: f64,
    pub ce: f64,
    pub afd: f64,
    pub sep: f64,
}

/// Everything measured after training one step.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub step: usize,
    pub iou: IoUReport,
    pub similarity: Option<SimilarityReport>,
    /// None at the base step; at incremental steps the ratio itself may
    /// still be undefined when nothing was mispredicted.
    pub ignored: Option<IgnoredLabelStats>,
    pub bg_shift_old: Option<f64>,
    pub bg_shift_new: Option<f64>,
    /// Oracle counter: training pixels whose true class lies in a future
    /// class set. Always zero under the disjoint protocol.
    pub future_class_pixels: u64,
    pub losses: Vec<EpochLoss>,
}

#[derive(Debug, Clone)]
pub struct RunRecord {
    pub config_hash: String,
    pub setting: Setting,
    pub seed: u64,
    pub steps: Vec<StepRecord>,
    pub wall_clock_secs: f64,
}

impl RunRecord {
    pub fn final_step(&self) -> &StepRecord {
        self.steps.last().expect("runs have at least one step")
    }
}

pub fn config_hash(cfg: &LabConfig) -> String {
    let digest = Sha256::digest(cfg.to_config_string().as_bytes());
    let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
    hex[..12].to_string()
}

// --- SGD ---------------------------------------------------------------------

/// SGD with momentum and weight decay over (decoder, tokens). The frozen
/// embedding is never touched, so neither update nor decay applies to it.
struct Sgd {
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    v_decoder: Tensor,
    v_tokens: Tensor,
}

impl Sgd {
    fn new(model: &ToySegmenter, lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            v_decoder: Tensor::zeros(model.decoder().shape().to_vec()),
            v_tokens: Tensor::zeros(model.tokens().shape().to_vec()),
        }
    }

    fn step(&mut self, model: &mut ToySegmenter, grads: &LossBundle) -> Result<()> {
        if grads.grad_decoder.shape() != self.v_decoder.shape()
            || grads.grad_tokens.shape() != self.v_tokens.shape()
        {
            return Err(Error::ShapeMismatch("sgd: gradient shape drift".into()));
        }
        apply_update(
            self.v_decoder.data_mut(),
            model.decoder_mut().data_mut(),
            grads.grad_decoder.data(),
            self.lr,
            self.momentum,
            self.weight_decay,
        );
        apply_update(
            self.v_tokens.data_mut(),
            model.tokens_mut().data_mut(),
            grads.grad_tokens.data(),
            self.lr,
            self.momentum,
            self.weight_decay,
        );
        Ok(())
    }
}

fn apply_update(v: &mut [f64], p: &mut [f64], g: &[f64], lr: f64, momentum: f64, wd: f64) {
    for i in 0..p.len() {
        v[i] = momentum * v[i] + g[i] + wd * p[i];
        p[i] -= lr * v[i];
    }
}

// --- scene preparation -------------------------------------------------------

/// The exact scene used at training position `index` of `step`; generation
/// is pure given the derived seed, so callers can regenerate any training
/// scene for inspection.
pub fn training_scene(cfg: &LabConfig, step: usize, index: usize) -> Result<Scene> {
    let spec = &cfg.scenario;
    let seed = derive_seed(
        spec.seed,
        streams::TRAIN_SCENES,
        ((step as u64) << 32) | index as u64,
    );
    generate_scene(spec, step, &mut scene_rng(seed))
}

fn step_scenes(cfg: &LabConfig, step: usize) -> Result<Vec<Scene>> {
    (0..cfg.scenario.scenes_per_step)
        .map(|i| training_scene(cfg, step, i))
        .collect()
}

fn eval_scenes(cfg: &LabConfig) -> Result<Vec<Scene>> {
    let spec = &cfg.scenario;
    (0..EVAL_SCENE_COUNT)
        .map(|i| {
            let seed = derive_seed(spec.seed, streams::EVAL_SCENES, i as u64);
            generate_eval_scene(spec, &mut scene_rng(seed))
        })
        .collect()
}

fn count_future_pixels(cfg: &LabConfig, scenes: &[Scene], step: usize) -> u64 {
    let future = cfg.scenario.future_classes(step);
    if future.is_empty() {
        return 0;
    }
    scenes
        .iter()
        .map(|s| {
            s.full_labels
                .values()
                .iter()
                .filter(|&&v| future.contains(v))
                .count() as u64
        })
        .sum()
}

// --- base step ----------------------------------------------------------------

struct BaseOutcome {
    model: ToySegmenter,
    losses: Vec<EpochLoss>,
    future_class_pixels: u64,
}

fn train_base_internal(cfg: &LabConfig) -> Result<BaseOutcome> {
    let spec = &cfg.scenario;
    let tc = &cfg.train;
    let mut init_rng = scene_rng(derive_seed(tc.seed, streams::MODEL_INIT, 0));
    let mut model = ToySegmenter::init(
        spec.patch_size,
        spec.feature_channels,
        ModelDims::default(),
        spec.schedule[0],
        &mut init_rng,
    )?;
    let scenes = step_scenes(cfg, 1)?;
    let future_class_pixels = count_future_pixels(cfg, &scenes, 1);
    let caches: Vec<(Tensor, LabelMap)> = scenes
        .iter()
        .map(|s| Ok((model.embed_image(&s.image)?, s.step_labels.clone())))
        .collect::<Result<_>>()?;
    drop(scenes);

    let mut opt = Sgd::new(&model, tc.lr_base, tc.momentum, tc.weight_decay);
    let mut shuffle_rng = scene_rng(derive_seed(tc.seed, streams::SHUFFLE, 1));
    let mut losses = Vec::with_capacity(tc.epochs_base);
    let n_scenes = caches.len() as f64;
    let mut training = || -> Result<()> {
        for _ in 0..tc.epochs_base {
            let mut order: Vec<usize> = (0..caches.len()).collect();
            order.shuffle(&mut shuffle_rng);
            let mut ce_sum = 0.0;
            for batch in order.chunks(tc.batch_size) {
                let mut acc = LossBundle::zeros_like(&model);
                for &i in batch {
                    let (embed, labels) = &caches[i];
                    let pass = model.forward_from_embed(embed)?;
                    let ce = ce_loss(&model, &pass, labels)?;
                    ce_sum += ce.value;
                    acc.add(&ce)?;
                }
                acc.scale(1.0 / batch.len() as f64);
                if !acc.value.is_finite() {
                    return Err(Error::Numerical("non-finite batch loss".into()));
                }
                opt.step(&mut model, &acc)?;
            }
            let mean = ce_sum / n_scenes;
            losses.push(EpochLoss {
                total: mean,
                ce: mean,
                afd: 0.0,
                sep: 0.0,
            });
        }
        Ok(())
    };
    training().map_err(diverged("base training"))?;
    Ok(BaseOutcome {
        model,
        losses,
        future_class_pixels,
    })
}

/// Numerical failures inside a training loop are divergence; anything else
/// passes through untouched.
fn diverged(what: &'static str) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Numerical(msg) => Error::Numerical(format!("{what} diverged: {msg}")),
        other => other,
    }
}

/// Trains the base-step model on plain cross-entropy; no old model exists,
/// so distillation and separation terms are exactly zero.
pub fn train_base_step(cfg: &LabConfig) -> Result<ToySegmenter> {
    cfg.validate()?;
    Ok(train_base_internal(cfg)?.model)
}

// --- incremental step ----------------------------------------------------------

struct SceneCache {
    embed: Tensor,
    train_labels: LabelMap,
    f_old: Tensor,
    reliability: Tensor,
    teacher: Tensor,
}

struct IncrementalOutcome {
    model: ToySegmenter,
    losses: Vec<EpochLoss>,
    ignored: IgnoredLabelStats,
    future_class_pixels: u64,
}

fn train_incremental_internal(
    model: &ToySegmenter,
    cfg: &LabConfig,
    step: usize,
) -> Result<IncrementalOutcome> {
    let spec = &cfg.scenario;
    let tc = &cfg.train;
    if step < 2 || step > spec.num_steps() {
        return Err(Error::InvalidArgument(format!(
            "incremental step {step} outside schedule of {} steps",
            spec.num_steps()
        )));
    }
    let n_new = spec.schedule[step - 1];
    let expected_tokens = spec.known_classes(step - 1).len() + 1;
    if model.num_tokens() != expected_tokens {
        return Err(Error::InvalidArgument(format!(
            "model has {} tokens but step {step} expects {expected_tokens} before expansion",
            model.num_tokens()
        )));
    }
    let old = model.snapshot();
    let mut live = model.expand_for_new_classes(n_new)?;

    let old_span = spec.old_classes(step);
    let new_span = spec.step_classes(step);
    let coeffs = tc
        .coefficients
        .resolve(n_new, spec.known_classes(step).len())?;

    let scenes = step_scenes(cfg, step)?;
    let future_class_pixels = count_future_pixels(cfg, &scenes, step);
    if spec.setting == Setting::Disjoint {
        debug_assert_eq!(future_class_pixels, 0, "disjoint protocol leaked future classes");
    }

    let mut ignored = IgnoredLabelStats::default();
    let mut caches = Vec::with_capacity(scenes.len());
    for scene in &scenes {
        let embed = live.embed_image(&scene.image)?;
        let old_pass = old.forward_from_embed(&embed)?;
        let s_old = &old_pass.probs;
        let y_tilde = pseudo_label(&scene.step_labels, s_old, tc.tau)?;
        let o = object_identifier(s_old)?;
        let y_sel = selective_pseudo_label(&y_tilde, &o)?;
        ignored.accumulate(ignored_label_stats(
            &y_tilde,
            &y_sel,
            &scene.full_labels,
            &old_span,
        )?);
        let train_labels = if tc.ablation.spl {
            y_sel.clone()
        } else {
            y_tilde
        };
        let reliability = if tc.ablation.afd {
            let (y_hat, s_hat) = downsample_labels_and_probs(&y_sel, s_old, spec.patch_size)?;
            reliability_map(&y_hat, &s_hat, &old_span, &new_span)?
        } else {
            let grid = spec.patch_grid();
            Tensor::full(vec![grid, grid], 1.0)
        };
        let teacher = if tc.ablation.sep {
            refine_teacher(s_old, &y_sel, &new_span)?
        } else {
            zero_extend_teacher(s_old, n_new)?
        };
        caches.push(SceneCache {
            embed,
            train_labels,
            f_old: old_pass.features,
            reliability,
            teacher,
        });
    }
    drop(scenes);

    let mut opt = Sgd::new(&live, tc.lr_incremental, tc.momentum, tc.weight_decay);
    let mut shuffle_rng = scene_rng(derive_seed(tc.seed, streams::SHUFFLE, step as u64));
    let mut losses = Vec::with_capacity(tc.epochs_incremental);
    let n_scenes = caches.len() as f64;
    let mut training = || -> Result<()> {
        for _ in 0..tc.epochs_incremental {
            let mut order: Vec<usize> = (0..caches.len()).collect();
            order.shuffle(&mut shuffle_rng);
            let mut ce_sum = 0.0;
            let mut afd_sum = 0.0;
            let mut sep_sum = 0.0;
            for batch in order.chunks(tc.batch_size) {
                let ortho = if tc.ablation.sep {
                    Some(ortho_loss(&live, n_new)?)
                } else {
                    None
                };
                let ortho_value = ortho.as_ref().map_or(0.0, |o| coeffs.lambda_ortho * o.value);
                let mut acc = LossBundle::zeros_like(&live);
                for &i in batch {
                    let cache = &caches[i];
                    let pass = live.forward_from_embed(&cache.embed)?;
                    let ce = ce_loss(&live, &pass, &cache.train_labels)?;
                    let afd = afd_loss(&live, &pass, &cache.f_old, &cache.reliability)?;
                    let lgkd = lgkd_loss(&live, &pass, &cache.teacher)?;
                    ce_sum += ce.value;
                    afd_sum += afd.value;
                    sep_sum += coeffs.lambda_lgkd * lgkd.value + ortho_value;
                    acc.add(&ce)?;
                    acc.add(&afd)?;
                    acc.add_scaled(&lgkd, coeffs.lambda_lgkd)?;
                }
                acc.scale(1.0 / batch.len() as f64);
                if let Some(o) = &ortho {
                    acc.add_scaled(o, coeffs.lambda_ortho)?;
                }
                if !acc.value.is_finite() {
                    return Err(Error::Numerical("non-finite batch loss".into()));
                }
                opt.step(&mut live, &acc)?;
            }
            losses.push(EpochLoss {
                total: (ce_sum + afd_sum + sep_sum) / n_scenes,
                ce: ce_sum / n_scenes,
                afd: afd_sum / n_scenes,
                sep: sep_sum / n_scenes,
            });
        }
        Ok(())
    };
    training().map_err(diverged("incremental training"))?;
    Ok(IncrementalOutcome {
        model: live,
        losses,
        ignored,
        future_class_pixels,
    })
}

/// One continual step: snapshot the old model, expand tokens by background
/// transfer, and optimize the configured objective on the step's scenes.
pub fn train_incremental_step(
    model: &ToySegmenter,
    cfg: &LabConfig,
    step: usize,
) -> Result<ToySegmenter> {
    cfg.validate()?;
    Ok(train_incremental_internal(model, cfg, step)?.model)
}

// --- evaluation ----------------------------------------------------------------

fn evaluate_step(
    model: &ToySegmenter,
    eval_embeds: &[Tensor],
    eval_labels: &[LabelMap],
    cfg: &LabConfig,
    step: usize,
) -> Result<(IoUReport, Option<f64>, Option<f64>)> {
    let spec = &cfg.scenario;
    let mut predictions = Vec::with_capacity(eval_embeds.len());
    for embed in eval_embeds {
        let pass = model.forward_from_embed(embed)?;
        predictions.push(predict_labels(&pass.probs)?);
    }
    let groups = ClassGroups::new(spec.num_classes, spec.schedule[0], cfg.train.convention);
    let report = miou(&predictions, eval_labels, spec.num_classes, &groups)?;
    let bg_old = background_shift_rate(&predictions, eval_labels, &spec.old_classes(step))?;
    let bg_new = background_shift_rate(&predictions, eval_labels, &spec.step_classes(step))?;
    Ok((report, bg_old, bg_new))
}

// --- full scenario ---------------------------------------------------------------

/// Runs the whole schedule: base training, then every incremental step, with
/// grouped mIoU on a fixed all-class test set after each step. With an output
/// directory, persists `record.csv`, `summary.txt`, the resolved config, and
/// per-step checkpoints.
pub fn run_scenario(cfg: &LabConfig, out_dir: Option<&Path>) -> Result<RunRecord> {
    cfg.validate()?;
    let start = Instant::now();
    let spec = &cfg.scenario;
    let hash = config_hash(cfg);

    let eval = eval_scenes(cfg)?;
    let base = train_base_internal(cfg)?;
    let mut model = base.model;
    let eval_embeds: Vec<Tensor> = eval
        .iter()
        .map(|s| model.embed_image(&s.image))
        .collect::<Result<_>>()?;
    let eval_labels: Vec<LabelMap> = eval.iter().map(|s| s.full_labels.clone()).collect();
    drop(eval);

    let mut steps = Vec::with_capacity(spec.num_steps());
    let (iou, bg_old, bg_new) = evaluate_step(&model, &eval_embeds, &eval_labels, cfg, 1)?;
    steps.push(StepRecord {
        step: 1,
        iou,
        similarity: None,
        ignored: None,
        bg_shift_old: bg_old,
        bg_shift_new: bg_new,
        future_class_pixels: base.future_class_pixels,
        losses: base.losses,
    });
    if let Some(dir) = out_dir {
        save_checkpoint(&dir.join("step_1"), &model, 1)?;
    }

    for step in 2..=spec.num_steps() {
        let outcome = train_incremental_internal(&model, cfg, step)?;
        model = outcome.model;
        let n_new = spec.schedule[step - 1];
        let similarity = token_similarity(model.tokens(), n_new)?;
        let (iou, bg_old, bg_new) = evaluate_step(&model, &eval_embeds, &eval_labels, cfg, step)?;
        steps.push(StepRecord {
            step,
            iou,
            similarity: Some(similarity),
            ignored: Some(outcome.ignored),
            bg_shift_old: bg_old,
            bg_shift_new: bg_new,
            future_class_pixels: outcome.future_class_pixels,
            losses: outcome.losses,
        });
        if let Some(dir) = out_dir {
            save_checkpoint(&dir.join(format!("step_{step}")), &model, step)?;
        }
    }

    let record = RunRecord {
        config_hash: hash,
        setting: spec.setting,
        seed: cfg.train.seed,
        steps,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("resolved_config.txt"), cfg.to_config_string())?;
        let mut csv = std::io::BufWriter::new(std::fs::File::create(dir.join("record.csv"))?);
        write_record_csv(&mut csv, &record)?;
        csv.flush()?;
        std::fs::write(dir.join("summary.txt"), summary_text(&record))?;
    }
    Ok(record)
}

// --- reporting -----------------------------------------------------------------

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v}"),
        None => "undefined".to_string(),
    }
}

/// One row per (run, step, metric, class-group); wall-clock is deliberately
/// excluded so identical runs produce byte-identical files.
pub fn write_record_csv<W: IoWrite>(w: &mut W, record: &RunRecord) -> Result<()> {
    writeln!(w, "config_hash,setting,seed,step,metric,group,value")?;
    let prefix = |step: usize| {
        format!(
            "{},{},{},{step}",
            record.config_hash,
            record.setting.as_str(),
            record.seed
        )
    };
    for s in &record.steps {
        let p = prefix(s.step);
        writeln!(w, "{p},miou,initial,{}", fmt_opt(s.iou.miou_initial))?;
        writeln!(w, "{p},miou,incremented,{}", fmt_opt(s.iou.miou_incremented))?;
        writeln!(w, "{p},miou,all,{}", fmt_opt(s.iou.miou_all))?;
        for (class, iou) in &s.iou.per_class_iou {
            writeln!(w, "{p},iou,class_{class},{iou}")?;
        }
        if let Some(sim) = &s.similarity {
            writeln!(w, "{p},token_sim_x100,new_new,{}", fmt_opt(sim.new_new))?;
            writeln!(w, "{p},token_sim_x100,new_bg,{}", fmt_opt(Some(sim.new_background)))?;
            writeln!(w, "{p},token_sim_x100,new_old,{}", fmt_opt(sim.new_old))?;
        }
        if let Some(stats) = &s.ignored {
            writeln!(w, "{p},ignored_label_ratio,train,{}", fmt_opt(stats.ratio()))?;
            writeln!(w, "{p},mispredicted_pixels,train,{}", stats.mispredicted)?;
        }
        writeln!(w, "{p},bg_shift_rate,old,{}", fmt_opt(s.bg_shift_old))?;
        writeln!(w, "{p},bg_shift_rate,new,{}", fmt_opt(s.bg_shift_new))?;
        writeln!(w, "{p},future_class_pixels,train,{}", s.future_class_pixels)?;
        for (e, loss) in s.losses.iter().enumerate() {
            let g = format!("epoch_{e:03}");
            writeln!(w, "{p},loss_total,{g},{}", loss.total)?;
            writeln!(w, "{p},loss_ce,{g},{}", loss.ce)?;
            writeln!(w, "{p},loss_afd,{g},{}", loss.afd)?;
            writeln!(w, "{p},loss_sep,{g},{}", loss.sep)?;
        }
    }
    Ok(())
}

pub fn summary_text(record: &RunRecord) -> String {
    use std::fmt::Write as _;
    let mut out = String::new();
    writeln!(out, "config_hash = {}", record.config_hash).unwrap();
    writeln!(out, "setting = {}", record.setting.as_str()).unwrap();
    writeln!(out, "seed = {}", record.seed).unwrap();
    writeln!(out, "steps = {}", record.steps.len()).unwrap();
    writeln!(out, "wall_clock_secs = {:.3}", record.wall_clock_secs).unwrap();
    for s in &record.steps {
        let k = s.step;
        writeln!(out, "step{k}.miou.initial = {}", fmt_opt(s.iou.miou_initial)).unwrap();
        writeln!(
            out,
            "step{k}.miou.incremented = {}",
            fmt_opt(s.iou.miou_incremented)
        )
        .unwrap();
        writeln!(out, "step{k}.miou.all = {}", fmt_opt(s.iou.miou_all)).unwrap();
        if let Some(sim) = &s.similarity {
            writeln!(
                out,
                "step{k}.token_sim_x100.new_bg = {}",
                fmt_opt(Some(sim.new_background))
            )
            .unwrap();
            writeln!(out, "step{k}.token_sim_x100.new_new = {}", fmt_opt(sim.new_new)).unwrap();
            writeln!(out, "step{k}.token_sim_x100.new_old = {}", fmt_opt(sim.new_old)).unwrap();
        }
        if let Some(stats) = &s.ignored {
            writeln!(
                out,
                "step{k}.ignored_label_ratio = {}",
                fmt_opt(stats.ratio())
            )
            .unwrap();
        }
        writeln!(out, "step{k}.bg_shift_rate.old = {}", fmt_opt(s.bg_shift_old)).unwrap();
        writeln!(out, "step{k}.bg_shift_rate.new = {}", fmt_opt(s.bg_shift_new)).unwrap();
        writeln!(
            out,
            "step{k}.future_class_pixels = {}",
            s.future_class_pixels
        )
        .unwrap();
        if let Some(last) = s.losses.last() {
            writeln!(out, "step{k}.final_loss_total = {}", last.total).unwrap();
        }
    }
    out
}

// --- ablation grid ---------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct AblationRun {
    pub label: String,
    pub seed: u64,
    pub record: RunRecord,
}

/// Every on/off combination of the three components, baseline first and the
/// full method last.
pub fn component_grid() -> Vec<AblationFlags> {
    let f = |spl, afd, sep| AblationFlags { spl, afd, sep };
    vec![
        f(false, false, false),
        f(true, false, false),
        f(false, true, false),
        f(false, false, true),
        f(true, true, false),
        f(true, false, true),
        f(false, true, true),
        f(true, true, true),
    ]
}

fn sweep_jobs(base: &LabConfig) -> Vec<(String, LabConfig)> {
    let mut jobs = Vec::new();
    for tau in [0.6, 0.7, 0.8] {
        let mut cfg = base.clone();
        cfg.train.ablation = AblationFlags::default();
        cfg.train.tau = tau;
        jobs.push((format!("tau{tau}"), cfg));
    }
    for lambda in [5.0, 10.0, 20.0, 25.0, 50.0] {
        let mut cfg = base.clone();
        cfg.train.ablation = AblationFlags::default();
        cfg.train.coefficients.lambda_lgkd = lambda;
        jobs.push((format!("lgkd{lambda}"), cfg));
    }
    for ortho in [
        OrthoWeight::Fixed(0.5),
        OrthoWeight::Fixed(0.1),
        OrthoWeight::Fixed(0.05),
        OrthoWeight::Fixed(0.01),
        OrthoWeight::Adaptive,
    ] {
        let mut cfg = base.clone();
        cfg.train.ablation = AblationFlags::default();
        cfg.train.coefficients.lambda_ortho = ortho;
        let label = match ortho {
            OrthoWeight::Fixed(v) => format!("ortho{v}"),
            OrthoWeight::Adaptive => "ortho-adaptive".to_string(),
        };
        jobs.push((label, cfg));
    }
    jobs
}

/// Runs the 8-row component grid (optionally plus the hyperparameter sweeps)
/// over `seeds`, in parallel; results come back in a fixed order.
pub fn run_ablation_grid(
    base: &LabConfig,
    seeds: &[u64],
    sweeps: bool,
) -> Result<Vec<AblationRun>> {
    base.validate()?;
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("ablation needs at least one seed".into()));
    }
    let mut jobs: Vec<(String, u64, LabConfig)> = Vec::new();
    let push_job = |label: String, cfg: &LabConfig, jobs: &mut Vec<(String, u64, LabConfig)>| {
        for &seed in seeds {
            let mut c = cfg.clone();
            c.scenario.seed = seed;
            c.train.seed = seed;
            jobs.push((label.clone(), seed, c));
        }
    };
    for flags in component_grid() {
        let mut cfg = base.clone();
        cfg.train.ablation = flags;
        push_job(format!("grid-{}", flags.label()), &cfg, &mut jobs);
    }
    if sweeps {
        for (label, cfg) in sweep_jobs(base) {
            push_job(label, &cfg, &mut jobs);
        }
    }
    jobs.par_iter()
        .map(|(label, seed, cfg)| {
            let record = run_scenario(cfg, None)?;
            Ok(AblationRun {
                label: label.clone(),
                seed: *seed,
                record,
            })
        })
        .collect()
}

/// One row per (setting, seed, step, group).
pub fn write_ablation_csv<W: IoWrite>(w: &mut W, runs: &[AblationRun]) -> Result<()> {
    writeln!(w, "setting,seed,step,group,miou")?;
    for run in runs {
        for step in &run.record.steps {
            for (group, value) in [
                ("initial", step.iou.miou_initial),
                ("incremented", step.iou.miou_incremented),
                ("all", step.iou.miou_all),
            ] {
                writeln!(
                    w,
                    "{},{},{},{group},{}",
                    run.label,
                    run.seed,
                    step.step,
                    fmt_opt(value)
                )?;
            }
        }
    }
    Ok(())
}

// --- inspect --------------------------------------------------------------------

/// Labeling-machinery maps for one scene against an old model; the data
/// analog of the pseudo-label visualization figures.
#[derive(Debug, Clone)]
pub struct InspectArtifacts {
    pub s_old: Tensor,
    pub pseudo: LabelMap,
    pub object_id: ObjectIdentifierMap,
    pub selective: LabelMap,
    pub reliability: Tensor,
    pub ignored_fraction: f64,
    pub object_fraction: f64,
}

pub fn inspect_scene(
    old_model: &ToySegmenter,
    image: &Tensor,
    step_labels: &LabelMap,
    tau: f64,
) -> Result<InspectArtifacts> {
    let (_, s_old) = old_model.forward(image)?;
    let pseudo = pseudo_label(step_labels, &s_old, tau)?;
    let object_id = object_identifier(&s_old)?;
    let selective = selective_pseudo_label(&pseudo, &object_id)?;
    let n_old = old_model.num_object_classes();
    let old_span = crate::scenes::ClassSpan::new(1, n_old as u8);
    // classes named by the labels but unknown to the old model count as new
    let max_label = step_labels
        .values()
        .iter()
        .filter(|&&v| v != crate::label::IGNORE_LABEL)
        .max()
        .copied()
        .unwrap_or(0);
    let new_span = if max_label as usize > n_old {
        crate::scenes::ClassSpan::new(n_old as u8 + 1, max_label)
    } else {
        crate::scenes::ClassSpan::empty()
    };
    let (y_hat, s_hat) = downsample_labels_and_probs(&selective, &s_old, old_model.patch_size())?;
    let reliability = reliability_map(&y_hat, &s_hat, &old_span, &new_span)?;
    let pixels = (selective.height() * selective.width()) as f64;
    let ignored_fraction = selective.count(crate::label::IGNORE_LABEL) as f64 / pixels;
    let object_fraction = object_id.count_set() as f64 / pixels;
    Ok(InspectArtifacts {
        s_old,
        pseudo,
        object_id,
        selective,
        reliability,
        ignored_fraction,
        object_fraction,
    })
}
