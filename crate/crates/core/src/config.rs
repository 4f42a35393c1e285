//! Plain-text `key = value` configuration covering the scenario and the
//! training setup. Keys match the field names exactly; unknown or duplicate
//! keys are errors. `#` starts a comment.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::losses::{LossCoefficients, OrthoWeight};
use crate::metrics::GroupConvention;
use crate::scenes::{ScenarioSpec, Setting};

/// Component toggles for the ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AblationFlags {
    pub spl: bool,
    pub afd: bool,
    pub sep: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self {
            spl: true,
            afd: true,
            sep: true,
        }
    }
}

impl AblationFlags {
    pub fn label(&self) -> String {
        let b = |v: bool| if v { '1' } else { '0' };
        format!("spl{}-afd{}-sep{}", b(self.spl), b(self.afd), b(self.sep))
    }
}

/// Optimization settings for base and incremental steps.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr_base: f64,
    pub lr_incremental: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs_base: usize,
    pub epochs_incremental: usize,
    pub batch_size: usize,
    pub tau: f64,
    pub coefficients: LossCoefficients,
    pub ablation: AblationFlags,
    pub convention: GroupConvention,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_base: 0.1,
            lr_incremental: 0.01,
            momentum: 0.9,
            weight_decay: 1e-5,
            epochs_base: 40,
            epochs_incremental: 40,
            batch_size: 16,
            tau: 0.7,
            coefficients: LossCoefficients::default(),
            ablation: AblationFlags::default(),
            convention: GroupConvention::default(),
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let lr_valid = |lr: f64| lr.is_finite() && lr > 0.0;
        if !lr_valid(self.lr_base) || !lr_valid(self.lr_incremental) {
            return Err(Error::Config("learning rates must be finite and > 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must be in [0, 1)".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::Config("tau must be in (0, 1)".into()));
        }
        self.coefficients.validate().map_err(|e| Error::Config(e.to_string()))
    }
}

/// Scenario plus training configuration; what a config file describes.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabConfig {
    pub scenario: ScenarioSpec,
    pub train: TrainConfig,
}

impl LabConfig {
    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.train.validate()
    }

    /// Canonical text form; parsing it back reproduces the config, and its
    /// hash identifies a run.
    pub fn to_config_string(&self) -> String {
        let s = &self.scenario;
        let t = &self.train;
        let mut out = String::new();
        let schedule = s
            .schedule
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(",");
        writeln!(out, "num_classes = {}", s.num_classes).unwrap();
        writeln!(out, "schedule = {schedule}").unwrap();
        writeln!(out, "setting = {}", s.setting.as_str()).unwrap();
        writeln!(out, "image_size = {}", s.image_size).unwrap();
        writeln!(out, "patch_size = {}", s.patch_size).unwrap();
        writeln!(out, "feature_channels = {}", s.feature_channels).unwrap();
        writeln!(out, "scenes_per_step = {}", s.scenes_per_step).unwrap();
        writeln!(out, "noise_sigma = {}", s.noise_sigma).unwrap();
        writeln!(out, "seed = {}", t.seed).unwrap();
        writeln!(out, "lr_base = {}", t.lr_base).unwrap();
        writeln!(out, "lr_incremental = {}", t.lr_incremental).unwrap();
        writeln!(out, "momentum = {}", t.momentum).unwrap();
        writeln!(out, "weight_decay = {}", t.weight_decay).unwrap();
        writeln!(out, "epochs_base = {}", t.epochs_base).unwrap();
        writeln!(out, "epochs_incremental = {}", t.epochs_incremental).unwrap();
        writeln!(out, "batch_size = {}", t.batch_size).unwrap();
        writeln!(out, "tau = {}", t.tau).unwrap();
        writeln!(out, "lambda_lgkd = {}", t.coefficients.lambda_lgkd).unwrap();
        match t.coefficients.lambda_ortho {
            OrthoWeight::Adaptive => writeln!(out, "lambda_ortho = adaptive").unwrap(),
            OrthoWeight::Fixed(v) => writeln!(out, "lambda_ortho = {v}").unwrap(),
        }
        writeln!(out, "spl = {}", on_off(t.ablation.spl)).unwrap();
        writeln!(out, "afd = {}", on_off(t.ablation.afd)).unwrap();
        writeln!(out, "sep = {}", on_off(t.ablation.sep)).unwrap();
        writeln!(out, "background_in_initial = {}", on_off(t.convention.background_in_initial)).unwrap();
        writeln!(out, "background_in_all = {}", on_off(t.convention.background_in_all)).unwrap();
        out
    }
}

fn on_off(v: bool) -> &'static str {
    if v {
        "on"
    } else {
        "off"
    }
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        other => Err(Error::Config(format!("{key}: expected on/off, got '{other}'"))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse::<T>()
        .map_err(|e| Error::Config(format!("{key}: cannot parse '{value}': {e}")))
}

/// Parses config text into a `LabConfig`, starting from defaults.
pub fn parse_config_str(text: &str) -> Result<LabConfig> {
    let mut cfg = LabConfig::default();
    let mut seen = BTreeSet::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected 'key = value'", lineno + 1))
        })?;
        let key = key.trim();
        let value = value.trim();
        if !seen.insert(key.to_string()) {
            return Err(Error::Config(format!("duplicate key '{key}'")));
        }
        match key {
            "num_classes" => cfg.scenario.num_classes = parse_num(key, value)?,
            "schedule" => {
                cfg.scenario.schedule = value
                    .split(',')
                    .map(|v| parse_num::<usize>(key, v.trim()))
                    .collect::<Result<Vec<_>>>()?;
            }
            "setting" => cfg.scenario.setting = Setting::parse(value)?,
            "image_size" => cfg.scenario.image_size = parse_num(key, value)?,
            "patch_size" => cfg.scenario.patch_size = parse_num(key, value)?,
            "feature_channels" => cfg.scenario.feature_channels = parse_num(key, value)?,
            "scenes_per_step" => cfg.scenario.scenes_per_step = parse_num(key, value)?,
            "noise_sigma" => cfg.scenario.noise_sigma = parse_num(key, value)?,
            "seed" => {
                let seed: u64 = parse_num(key, value)?;
                cfg.scenario.seed = seed;
                cfg.train.seed = seed;
            }
            "lr_base" => cfg.train.lr_base = parse_num(key, value)?,
            "lr_incremental" => cfg.train.lr_incremental = parse_num(key, value)?,
            "momentum" => cfg.train.momentum = parse_num(key, value)?,
            "weight_decay" => cfg.train.weight_decay = parse_num(key, value)?,
            "epochs_base" => cfg.train.epochs_base = parse_num(key, value)?,
            "epochs_incremental" => cfg.train.epochs_incremental = parse_num(key, value)?,
            "batch_size" => cfg.train.batch_size = parse_num(key, value)?,
            "tau" => cfg.train.tau = parse_num(key, value)?,
            "lambda_lgkd" => cfg.train.coefficients.lambda_lgkd = parse_num(key, value)?,
            "lambda_ortho" => {
                cfg.train.coefficients.lambda_ortho = if value == "adaptive" {
                    OrthoWeight::Adaptive
                } else {
                    OrthoWeight::Fixed(parse_num(key, value)?)
                };
            }
            "spl" => cfg.train.ablation.spl = parse_bool(key, value)?,
            "afd" => cfg.train.ablation.afd = parse_bool(key, value)?,
            "sep" => cfg.train.ablation.sep = parse_bool(key, value)?,
            "background_in_initial" => {
                cfg.train.convention.background_in_initial = parse_bool(key, value)?
            }
            "background_in_all" => {
                cfg.train.convention.background_in_all = parse_bool(key, value)?
            }
            unknown => {
                return Err(Error::Config(format!("unknown key '{unknown}'")));
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config_file(path: &Path) -> Result<LabConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_config_str(&text)
}
