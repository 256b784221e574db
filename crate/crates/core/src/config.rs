use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::data::CanvasPolicy;
use crate::error::{Error, Result};
use crate::loss::{LossConfig, LossMode};
use crate::train::TrainConfig;

/// Parses `key = value` lines. `#` starts a comment; blank lines are
/// ignored; a key may appear once.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let syntax = |msg: String| Error::ConfigSyntax { line: i + 1, msg };
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| syntax(format!("expected key = value, got `{line}`")))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(syntax("empty key".into()));
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(syntax(format!("`{k}` set twice")));
        }
    }
    Ok(out)
}

/// Settings shared by every workflow; defaults are the desk-scale values.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub batch_size: usize,
    /// Host and DataAug learning rate.
    pub lr: f64,
    /// Rotation classifier and Xlayer learning rate.
    pub aux_lr: f64,
    /// Lens learning rate for losses with a TAC term; TAC is a raw sum over
    /// channels and needs a much smaller step than the per-element means.
    pub lens_lr_tac: f64,
    /// Lens learning rate for MSE and MAE.
    pub lens_lr_mean: f64,
    pub momentum: f64,
    /// Training images used for the host and the DataAug host (0 = all).
    pub host_train_limit: usize,
    pub host_epochs: usize,
    /// Training images available to lens, classifier and Xlayer training
    /// (0 = all).
    pub aux_train_limit: usize,
    pub lens_steps: usize,
    pub rotclf_steps: usize,
    pub xlayer_steps: usize,
    /// Steps per learning-rate halving for the auxiliary trainers.
    pub aux_decay_steps: usize,
    pub groups: usize,
    pub lens_init_noise: f64,
    pub k: usize,
    pub d1: f64,
    pub canvas: CanvasPolicy,
    /// Test images used for evaluation and correlation (0 = all).
    pub test_limit: usize,
    pub eval_batch: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            batch_size: 64,
            lr: 0.03,
            aux_lr: 0.01,
            lens_lr_tac: 0.003,
            lens_lr_mean: 0.3,
            momentum: 0.9,
            host_train_limit: 30_000,
            host_epochs: 1,
            aux_train_limit: 20_000,
            lens_steps: 300,
            rotclf_steps: 300,
            xlayer_steps: 300,
            aux_decay_steps: 150,
            groups: 4,
            lens_init_noise: 0.01,
            k: 3,
            d1: 0.2,
            canvas: CanvasPolicy::PadToCanvas,
            test_limit: 2000,
            eval_batch: 128,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::config(format!("`{key}` cannot be `{v}`")))
}

impl RunConfig {
    pub fn from_map(map: &BTreeMap<String, String>) -> Result<RunConfig> {
        let mut c = RunConfig::default();
        for (k, v) in map {
            match k.as_str() {
                "seed" => c.seed = parse(k, v)?,
                "batch_size" => c.batch_size = parse(k, v)?,
                "lr" => c.lr = parse(k, v)?,
                "aux_lr" => c.aux_lr = parse(k, v)?,
                "lens_lr_tac" => c.lens_lr_tac = parse(k, v)?,
                "lens_lr_mean" => c.lens_lr_mean = parse(k, v)?,
                "momentum" => c.momentum = parse(k, v)?,
                "host_train_limit" => c.host_train_limit = parse(k, v)?,
                "host_epochs" => c.host_epochs = parse(k, v)?,
                "aux_train_limit" => c.aux_train_limit = parse(k, v)?,
                "lens_steps" => c.lens_steps = parse(k, v)?,
                "rotclf_steps" => c.rotclf_steps = parse(k, v)?,
                "xlayer_steps" => c.xlayer_steps = parse(k, v)?,
                "aux_decay_steps" => c.aux_decay_steps = parse(k, v)?,
                "groups" => c.groups = parse(k, v)?,
                "lens_init_noise" => c.lens_init_noise = parse(k, v)?,
                "k" => c.k = parse(k, v)?,
                "d1" => c.d1 = parse(k, v)?,
                "canvas" => {
                    c.canvas = match v.as_str() {
                        "pad" => CanvasPolicy::PadToCanvas,
                        "shrink" => CanvasPolicy::Shrink,
                        _ => return Err(Error::config(format!("`canvas` must be pad or shrink, got `{v}`"))),
                    }
                }
                "test_limit" => c.test_limit = parse(k, v)?,
                "eval_batch" => c.eval_batch = parse(k, v)?,
                other => return Err(Error::config(format!("unknown key `{other}`"))),
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_map(&parse_key_values(&text)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_batch == 0 || self.groups == 0 || self.aux_decay_steps == 0 {
            return Err(Error::config("batch sizes, groups and decay steps must be positive"));
        }
        if !(self.lens_init_noise >= 0.0) {
            return Err(Error::config("lens_init_noise must be non-negative"));
        }
        for lr in [self.aux_lr, self.lens_lr_tac, self.lens_lr_mean] {
            if !(lr > 0.0) {
                return Err(Error::config("learning rates must be positive"));
            }
        }
        self.train_config(1, LossMode::Tac).validate()
    }

    pub fn lens_lr(&self, mode: LossMode) -> f64 {
        match mode {
            LossMode::Mse | LossMode::Mae => self.lens_lr_mean,
            LossMode::Tac | LossMode::MseTac | LossMode::MaeTac => self.lens_lr_tac,
        }
    }

    pub fn loss(&self, mode: LossMode) -> LossConfig {
        LossConfig { k: self.k, d1: self.d1, mode }
    }

    /// Host training: whole epochs, halving every epoch.
    pub fn host_train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.host_epochs,
            batch_size: self.batch_size,
            initial_lr: self.lr,
            momentum: self.momentum,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }

    /// Step-capped training over `n` images starting at `lr` and halving
    /// every `aux_decay_steps` steps.
    pub fn aux_train_config(&self, n: usize, steps: usize, lr: f64, mode: LossMode) -> TrainConfig {
        let per_epoch = n.div_ceil(self.batch_size).max(1);
        TrainConfig {
            epochs: steps.div_ceil(per_epoch).max(1),
            max_steps: Some(steps),
            decay_period: self.aux_decay_steps as f64 / per_epoch as f64,
            initial_lr: lr,
            ..self.train_config(steps, mode)
        }
    }

    fn train_config(&self, steps: usize, mode: LossMode) -> TrainConfig {
        TrainConfig {
            epochs: 1,
            batch_size: self.batch_size,
            initial_lr: self.lr,
            decay: 0.5,
            decay_period: 1.0,
            momentum: self.momentum,
            seed: self.seed,
            max_steps: Some(steps),
            loss: self.loss(mode),
        }
    }
}
