//! Run configuration: `key=value` text with preset inheritance.
//!
//! A file may name a `preset`; the preset's values are applied first and every
//! other key in the file overrides them, regardless of line order.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::attention::AttentionMode;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: String,

    // model shape
    pub d_word: usize,
    pub d_img: usize,
    pub hidden: usize,
    pub l_max: usize,
    pub attention: AttentionMode,
    pub pos_attention: bool,

    // initialization
    pub lambda1_init: f64,
    pub pos_init_low: f64,
    pub pos_init_high: f64,
    pub emb_init: f64,

    pub bn_eps: f64,
    pub bn_momentum: f64,

    // objective
    pub lambda2: f64,
    pub margin: f64,
    pub neg_per_pos: usize,

    // optimization
    pub batch_size: usize,
    pub lr_embedding: f64,
    pub lr_other: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub val_fraction: f64,
    pub log_wall_time: bool,

    // inputs
    pub data: Option<String>,
    pub val_data: Option<String>,
    pub features: Option<String>,
    pub embeddings: Option<String>,
}

pub const PRESETS: [&str; 3] = ["visual7w", "vqa", "synthetic"];

/// Environment variable that, when set, replaces the configured seed.
pub const SEED_ENV: &str = "TVQA_SEED";

impl RunConfig {
    /// Full-scale settings for 4-choice groups.
    pub fn visual7w() -> Self {
        RunConfig {
            preset: "visual7w".into(),
            d_word: 300,
            d_img: 2048,
            hidden: 4096,
            l_max: 3,
            attention: AttentionMode::Triplet,
            pos_attention: true,
            lambda1_init: 0.5,
            pos_init_low: 0.0,
            pos_init_high: 2.0,
            emb_init: 0.05,
            bn_eps: 1e-5,
            bn_momentum: 0.9,
            lambda2: 0.5,
            margin: 0.2,
            neg_per_pos: 2,
            batch_size: 18,
            lr_embedding: 0.0002,
            lr_other: 0.0001,
            beta1: 0.9,
            beta2: 0.99,
            adam_eps: 1e-8,
            max_epochs: 20,
            patience: 5,
            seed: 0,
            val_fraction: 0.2,
            log_wall_time: true,
            data: None,
            val_data: None,
            features: None,
            embeddings: None,
        }
    }

    /// Full-scale settings for 18-choice groups.
    pub fn vqa() -> Self {
        RunConfig {
            preset: "vqa".into(),
            lambda2: 0.05,
            batch_size: 576,
            ..RunConfig::visual7w()
        }
    }

    /// Desk-scale settings for the planted synthetic corpus. Objective
    /// settings are inherited from `visual7w`.
    pub fn synthetic() -> Self {
        RunConfig {
            preset: "synthetic".into(),
            d_word: 8,
            d_img: 16,
            hidden: 32,
            batch_size: 8,
            lr_embedding: 0.01,
            lr_other: 0.01,
            max_epochs: 200,
            patience: 50,
            ..RunConfig::visual7w()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "visual7w" => Ok(RunConfig::visual7w()),
            "vqa" => Ok(RunConfig::vqa()),
            "synthetic" => Ok(RunConfig::synthetic()),
            other => Err(Error::Config(format!(
                "unknown preset '{other}' (expected one of {})",
                PRESETS.join(", ")
            ))),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got '{line}'", n + 1)))?;
            pairs.push((n + 1, k.trim().to_string(), v.trim().to_string()));
        }
        let presets: Vec<&(usize, String, String)> = pairs.iter().filter(|(_, k, _)| k == "preset").collect();
        let mut cfg = match presets.as_slice() {
            [] => RunConfig::visual7w(),
            [(_, _, name)] => RunConfig::preset(name)?,
            _ => return Err(Error::Config("preset given more than once".into())),
        };
        for (line, k, v) in &pairs {
            if k == "preset" {
                continue;
            }
            cfg.set(k, v).map_err(|e| Error::Config(format!("line {line}: {e}")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'")))
        }
        fn path(v: &str) -> Option<String> {
            (!v.is_empty()).then(|| v.to_string())
        }
        match key {
            "d_word" => self.d_word = num(key, value)?,
            "d_img" => self.d_img = num(key, value)?,
            "hidden" => self.hidden = num(key, value)?,
            "l_max" => self.l_max = num(key, value)?,
            "attention" => self.attention = value.parse()?,
            "pos_attention" => self.pos_attention = num(key, value)?,
            "lambda1_init" => self.lambda1_init = num(key, value)?,
            "pos_init_low" => self.pos_init_low = num(key, value)?,
            "pos_init_high" => self.pos_init_high = num(key, value)?,
            "emb_init" => self.emb_init = num(key, value)?,
            "bn_eps" => self.bn_eps = num(key, value)?,
            "bn_momentum" => self.bn_momentum = num(key, value)?,
            "lambda2" => self.lambda2 = num(key, value)?,
            "margin" => self.margin = num(key, value)?,
            "neg_per_pos" => self.neg_per_pos = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "lr_embedding" => self.lr_embedding = num(key, value)?,
            "lr_other" => self.lr_other = num(key, value)?,
            "beta1" => self.beta1 = num(key, value)?,
            "beta2" => self.beta2 = num(key, value)?,
            "adam_eps" => self.adam_eps = num(key, value)?,
            "max_epochs" => self.max_epochs = num(key, value)?,
            "patience" => self.patience = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "val_fraction" => self.val_fraction = num(key, value)?,
            "log_wall_time" => self.log_wall_time = num(key, value)?,
            "data" => self.data = path(value),
            "val_data" => self.val_data = path(value),
            "features" => self.features = path(value),
            "embeddings" => self.embeddings = path(value),
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.d_word == 0 || self.d_img == 0 || self.hidden == 0 {
            return fail("dimensions must be positive");
        }
        if self.l_max == 0 {
            return fail("l_max must be at least 1");
        }
        if self.margin.is_nan() || self.margin < 0.0 {
            return fail("margin must be >= 0");
        }
        if self.neg_per_pos == 0 {
            return fail("neg_per_pos must be >= 1");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1");
        }
        if self.patience > self.max_epochs {
            return fail("patience must not exceed max_epochs");
        }
        if !(self.lr_embedding >= 0.0 && self.lr_other >= 0.0) {
            return fail("learning rates must be >= 0");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("adam betas must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return fail("bn_momentum must lie in [0, 1]");
        }
        if !(self.bn_eps > 0.0 && self.adam_eps > 0.0) {
            return fail("epsilons must be positive");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return fail("val_fraction must lie in [0, 1)");
        }
        if self.pos_init_low.is_nan() || self.pos_init_high.is_nan() || self.pos_init_low > self.pos_init_high {
            return fail("pos_init_low must not exceed pos_init_high");
        }
        Ok(())
    }

    /// Applies a `TVQA_SEED` value, if any.
    pub fn override_seed(&mut self, env_value: Option<&str>) -> Result<()> {
        if let Some(v) = env_value {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}: cannot parse '{v}'")))?;
        }
        Ok(())
    }

    /// [`RunConfig::override_seed`] with the process environment.
    pub fn apply_seed_env(&mut self) -> Result<()> {
        self.override_seed(std::env::var(SEED_ENV).ok().as_deref())
    }

    /// Echo of every key, readable back by [`RunConfig::parse`].
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let opt = |p: &Option<String>| p.clone().unwrap_or_default();
        let _ = writeln!(s, "preset={}", self.preset);
        let _ = writeln!(s, "d_word={}", self.d_word);
        let _ = writeln!(s, "d_img={}", self.d_img);
        let _ = writeln!(s, "hidden={}", self.hidden);
        let _ = writeln!(s, "l_max={}", self.l_max);
        let _ = writeln!(s, "attention={}", self.attention);
        let _ = writeln!(s, "pos_attention={}", self.pos_attention);
        let _ = writeln!(s, "lambda1_init={}", self.lambda1_init);
        let _ = writeln!(s, "pos_init_low={}", self.pos_init_low);
        let _ = writeln!(s, "pos_init_high={}", self.pos_init_high);
        let _ = writeln!(s, "emb_init={}", self.emb_init);
        let _ = writeln!(s, "bn_eps={}", self.bn_eps);
        let _ = writeln!(s, "bn_momentum={}", self.bn_momentum);
        let _ = writeln!(s, "lambda2={}", self.lambda2);
        let _ = writeln!(s, "margin={}", self.margin);
        let _ = writeln!(s, "neg_per_pos={}", self.neg_per_pos);
        let _ = writeln!(s, "batch_size={}", self.batch_size);
        let _ = writeln!(s, "lr_embedding={}", self.lr_embedding);
        let _ = writeln!(s, "lr_other={}", self.lr_other);
        let _ = writeln!(s, "beta1={}", self.beta1);
        let _ = writeln!(s, "beta2={}", self.beta2);
        let _ = writeln!(s, "adam_eps={}", self.adam_eps);
        let _ = writeln!(s, "max_epochs={}", self.max_epochs);
        let _ = writeln!(s, "patience={}", self.patience);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "val_fraction={}", self.val_fraction);
        let _ = writeln!(s, "log_wall_time={}", self.log_wall_time);
        let _ = writeln!(s, "data={}", opt(&self.data));
        let _ = writeln!(s, "val_data={}", opt(&self.val_data));
        let _ = writeln!(s, "features={}", opt(&self.features));
        let _ = writeln!(s, "embeddings={}", opt(&self.embeddings));
        s
    }
}
