//! Training configuration and the flat `key = value` config-file format.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::losses::{ClassWeighting, Reduction};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// Labeled branch + crop-pair contrastive branch.
    Semi,
    /// Labeled branch only.
    SupOnly,
}

impl std::str::FromStr for TrainMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "semi" => Ok(TrainMode::Semi),
            "sup_only" => Ok(TrainMode::SupOnly),
            other => Err(Error::Config(format!(
                "mode must be semi|sup_only, got '{other}'"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr0: f64,
    pub lr_drop_every: usize,
    pub lr_drop_factor: f64,
    pub momentum: f64,
    pub lambda_wd: f64,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub crop_size: usize,
    pub min_overlap_fraction: f64,
    pub tau: f64,
    pub alpha_conf: f64,
    pub alpha_exp: f64,
    /// 1-based stages whose embeddings join the contrastive term.
    pub contrast_stages: Vec<usize>,
    pub mode: TrainMode,
    pub seed: u64,
    pub label_fraction: f64,

    // network build knobs (consumed by the CLI when constructing the model)
    pub base_width: usize,
    pub embed_dim: usize,

    // loss plumbing
    pub neg_bank_size: usize,
    pub balance_weighting: ClassWeighting,
    pub exclusive_denominator: bool,
    pub construction_reduction: Reduction,
    /// Per-term multipliers for ablations; 1.0 everywhere by default.
    pub weight_contrast: f64,
    pub weight_balance: f64,
    pub weight_construction: f64,

    /// Train labeled images on the full image instead of one random crop.
    pub train_full_image: bool,
    /// Uniform brightness jitter applied independently to the two contexts
    /// of each unlabeled crop pair (0 disables).
    pub crop_jitter: f64,

    pub val_every: usize,
    /// Write a checkpoint every N epochs (0 = final only).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            lr0: 1e-3,
            lr_drop_every: 40,
            lr_drop_factor: 5.0,
            momentum: 0.9,
            lambda_wd: 2e-4,
            batch_labeled: 4,
            batch_unlabeled: 4,
            crop_size: 64,
            min_overlap_fraction: 0.25,
            tau: 0.1,
            alpha_conf: 0.75,
            alpha_exp: 2.0,
            contrast_stages: vec![1, 2, 3, 4, 5],
            mode: TrainMode::Semi,
            seed: 0,
            label_fraction: 0.035,
            base_width: 64,
            embed_dim: 32,
            neg_bank_size: 64,
            balance_weighting: ClassWeighting::AsPrinted,
            exclusive_denominator: false,
            construction_reduction: Reduction::Mean,
            weight_contrast: 1.0,
            weight_balance: 1.0,
            weight_construction: 1.0,
            train_full_image: false,
            crop_jitter: 0.0,
            val_every: 1,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.lr0 <= 0.0 {
            return Err(Error::Config("lr0 must be > 0".into()));
        }
        if self.lr_drop_every == 0 {
            return Err(Error::Config("lr_drop_every must be >= 1".into()));
        }
        if self.lr_drop_factor <= 1.0 {
            return Err(Error::Config("lr_drop_factor must be > 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if self.lambda_wd < 0.0 {
            return Err(Error::Config("lambda_wd must be >= 0".into()));
        }
        if self.batch_labeled == 0 {
            return Err(Error::Config("batch_labeled must be >= 1".into()));
        }
        if self.crop_size < 16 {
            return Err(Error::Config("crop_size must be >= 16".into()));
        }
        if !(self.min_overlap_fraction > 0.0 && self.min_overlap_fraction <= 1.0) {
            return Err(Error::Config(
                "min_overlap_fraction must lie in (0, 1]".into(),
            ));
        }
        if self.tau <= 0.0 {
            return Err(Error::Config("tau must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.alpha_conf) {
            return Err(Error::Config("alpha_conf must lie in [0, 1)".into()));
        }
        if self.alpha_exp < 0.0 {
            return Err(Error::Config("alpha_exp must be >= 0".into()));
        }
        if self.contrast_stages.is_empty()
            || self.contrast_stages.iter().any(|&s| !(1..=5).contains(&s))
        {
            return Err(Error::Config(
                "contrast_stages must be a nonempty subset of 1..=5".into(),
            ));
        }
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return Err(Error::Config("label_fraction must lie in (0, 1]".into()));
        }
        if self.neg_bank_size == 0 {
            return Err(Error::Config("neg_bank_size must be >= 1".into()));
        }
        if self.mode == TrainMode::Semi && self.batch_unlabeled == 0 {
            return Err(Error::Config(
                "semi mode needs batch_unlabeled >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Step-schedule learning rate: `lr0 / factor^(epoch / every)`.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        self.lr0 / self.lr_drop_factor.powi((epoch / self.lr_drop_every) as i32)
    }

    /// Parse a flat `key = value` config file ('#' starts a comment).
    pub fn from_text(text: &str) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        for (line_no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected 'key = value', got '{raw}'",
                    line_no + 1
                )));
            };
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply one `key = value` assignment (also used for CLI overrides).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("bad value for {key}: '{value}'")))
        }
        match key {
            "epochs" => self.epochs = parse(key, value)?,
            "lr0" => self.lr0 = parse(key, value)?,
            "lr_drop_every" => self.lr_drop_every = parse(key, value)?,
            "lr_drop_factor" => self.lr_drop_factor = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "lambda_wd" => self.lambda_wd = parse(key, value)?,
            "batch_labeled" => self.batch_labeled = parse(key, value)?,
            "batch_unlabeled" => self.batch_unlabeled = parse(key, value)?,
            "crop_size" => self.crop_size = parse(key, value)?,
            "min_overlap_fraction" => self.min_overlap_fraction = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "alpha_conf" => self.alpha_conf = parse(key, value)?,
            "alpha_exp" => self.alpha_exp = parse(key, value)?,
            "contrast_stages" => {
                self.contrast_stages = value
                    .split(',')
                    .map(|s| parse::<usize>(key, s.trim()))
                    .collect::<Result<_>>()?;
            }
            "mode" => self.mode = value.parse()?,
            "seed" => self.seed = parse(key, value)?,
            "label_fraction" => self.label_fraction = parse(key, value)?,
            "base_width" => self.base_width = parse(key, value)?,
            "embed_dim" => self.embed_dim = parse(key, value)?,
            "neg_bank_size" => self.neg_bank_size = parse(key, value)?,
            "balance_weighting" => {
                self.balance_weighting = match value {
                    "as_printed" => ClassWeighting::AsPrinted,
                    "inverse_frequency" => ClassWeighting::InverseFrequency,
                    "uniform" => ClassWeighting::Uniform,
                    other => {
                        return Err(Error::Config(format!(
                            "balance_weighting must be as_printed|inverse_frequency|uniform, got '{other}'"
                        )))
                    }
                }
            }
            "exclusive_denominator" => self.exclusive_denominator = parse(key, value)?,
            "construction_reduction" => {
                self.construction_reduction = match value {
                    "sum" => Reduction::Sum,
                    "mean" => Reduction::Mean,
                    other => {
                        return Err(Error::Config(format!(
                            "construction_reduction must be sum|mean, got '{other}'"
                        )))
                    }
                }
            }
            "weight_contrast" => self.weight_contrast = parse(key, value)?,
            "weight_balance" => self.weight_balance = parse(key, value)?,
            "weight_construction" => self.weight_construction = parse(key, value)?,
            "train_full_image" => self.train_full_image = parse(key, value)?,
            "crop_jitter" => self.crop_jitter = parse(key, value)?,
            "val_every" => self.val_every = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Serialize back to the flat file format (resolved-run provenance).
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "lr0 = {}", self.lr0);
        let _ = writeln!(s, "lr_drop_every = {}", self.lr_drop_every);
        let _ = writeln!(s, "lr_drop_factor = {}", self.lr_drop_factor);
        let _ = writeln!(s, "momentum = {}", self.momentum);
        let _ = writeln!(s, "lambda_wd = {}", self.lambda_wd);
        let _ = writeln!(s, "batch_labeled = {}", self.batch_labeled);
        let _ = writeln!(s, "batch_unlabeled = {}", self.batch_unlabeled);
        let _ = writeln!(s, "crop_size = {}", self.crop_size);
        let _ = writeln!(s, "min_overlap_fraction = {}", self.min_overlap_fraction);
        let _ = writeln!(s, "tau = {}", self.tau);
        let _ = writeln!(s, "alpha_conf = {}", self.alpha_conf);
        let _ = writeln!(s, "alpha_exp = {}", self.alpha_exp);
        let stages: Vec<String> = self.contrast_stages.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "contrast_stages = {}", stages.join(","));
        let _ = writeln!(
            s,
            "mode = {}",
            match self.mode {
                TrainMode::Semi => "semi",
                TrainMode::SupOnly => "sup_only",
            }
        );
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "label_fraction = {}", self.label_fraction);
        let _ = writeln!(s, "base_width = {}", self.base_width);
        let _ = writeln!(s, "embed_dim = {}", self.embed_dim);
        let _ = writeln!(s, "neg_bank_size = {}", self.neg_bank_size);
        let _ = writeln!(
            s,
            "balance_weighting = {}",
            match self.balance_weighting {
                ClassWeighting::AsPrinted => "as_printed",
                ClassWeighting::InverseFrequency => "inverse_frequency",
                ClassWeighting::Uniform => "uniform",
            }
        );
        let _ = writeln!(s, "exclusive_denominator = {}", self.exclusive_denominator);
        let _ = writeln!(
            s,
            "construction_reduction = {}",
            match self.construction_reduction {
                Reduction::Sum => "sum",
                Reduction::Mean => "mean",
            }
        );
        let _ = writeln!(s, "weight_contrast = {}", self.weight_contrast);
        let _ = writeln!(s, "weight_balance = {}", self.weight_balance);
        let _ = writeln!(s, "weight_construction = {}", self.weight_construction);
        let _ = writeln!(s, "train_full_image = {}", self.train_full_image);
        let _ = writeln!(s, "crop_jitter = {}", self.crop_jitter);
        let _ = writeln!(s, "val_every = {}", self.val_every);
        let _ = writeln!(s, "checkpoint_every = {}", self.checkpoint_every);
        s
    }
}
