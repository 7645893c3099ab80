use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::ei::{EiConfig, MfActivation, DEFAULT_PRETRAINED_DIM};
use crate::error::{Error, Result};
use crate::relenc::{RelativeConfig, TimeMode};
use crate::sr::{Architecture, SrHyper};
use crate::Real;

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "REVAMP_SEED";

/// Default window length per dataset profile.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Profile {
    /// Long telecom-style sequences, N = 200.
    #[default]
    Telecom,
    /// Shorter app-usage sequences, N = 100.
    TalkingData,
}

impl Profile {
    pub fn max_len(self) -> usize {
        match self {
            Self::Telecom => 200,
            Self::TalkingData => 100,
        }
    }
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "telecom" => Ok(Self::Telecom),
            "talkingdata" => Ok(Self::TalkingData),
            other => Err(Error::Config(format!("unknown profile {other:?}"))),
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Telecom => "telecom",
            Self::TalkingData => "talkingdata",
        })
    }
}

/// Every knob of a two-phase run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub profile: Profile,
    pub dim: usize,
    /// Window length; `None` takes the profile default.
    pub max_len: Option<usize>,
    pub blocks: usize,
    pub heads: usize,
    pub clip_app: u16,
    pub clip_poi: u16,
    pub clip_time: u16,
    pub time_mode: TimeMode,
    pub use_app: bool,
    pub use_poi: bool,
    pub use_time: bool,
    pub use_abs: bool,
    pub gamma: Real,
    pub kappa: Real,
    pub lambda: Real,
    pub dropout: f64,
    pub ei_lr: f64,
    pub sr_lr: f64,
    pub ei_batch_size: usize,
    pub batch_size: usize,
    pub ei_epochs: usize,
    pub sr_epochs: usize,
    pub ei_activation: MfActivation,
    pub ei_early_stop: Option<f64>,
    pub pretrained: Option<PathBuf>,
    pub pretrained_dim: usize,
    pub min_checkins: usize,
    pub eval_negatives: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let ei = EiConfig::default();
        Self {
            profile: Profile::default(),
            dim: 64,
            max_len: None,
            blocks: 2,
            heads: 1,
            clip_app: 64,
            clip_poi: 64,
            clip_time: 64,
            time_mode: TimeMode::default(),
            use_app: true,
            use_poi: true,
            use_time: true,
            use_abs: true,
            gamma: ei.gamma,
            kappa: 0.5,
            lambda: 0.002,
            dropout: 0.2,
            ei_lr: ei.lr,
            sr_lr: 0.001,
            ei_batch_size: ei.batch_size,
            batch_size: 128,
            ei_epochs: ei.epochs,
            sr_epochs: 200,
            ei_activation: ei.activation,
            ei_early_stop: ei.early_stop,
            pretrained: None,
            pretrained_dim: DEFAULT_PRETRAINED_DIM,
            min_checkins: crate::data::MIN_CHECKINS,
            eval_negatives: 100,
            seed: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_optional<T: FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value == "none" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn show_optional<T: fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), T::to_string)
}

impl RunConfig {
    /// Parses flat `key = value` lines; `#` starts a comment and unset keys
    /// keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: n + 1,
                msg: format!("expected `key = value`, got {line:?}"),
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "profile" => self.profile = parse(key, v)?,
            "dim" => self.dim = parse(key, v)?,
            "max_len" => self.max_len = parse_optional(key, v)?,
            "blocks" => self.blocks = parse(key, v)?,
            "heads" => self.heads = parse(key, v)?,
            "clip_app" => self.clip_app = parse(key, v)?,
            "clip_poi" => self.clip_poi = parse(key, v)?,
            "clip_time" => self.clip_time = parse(key, v)?,
            "time_mode" => self.time_mode = parse(key, v)?,
            "use_app" => self.use_app = parse(key, v)?,
            "use_poi" => self.use_poi = parse(key, v)?,
            "use_time" => self.use_time = parse(key, v)?,
            "use_abs" => self.use_abs = parse(key, v)?,
            "gamma" => self.gamma = parse(key, v)?,
            "kappa" => self.kappa = parse(key, v)?,
            "lambda" => self.lambda = parse(key, v)?,
            "dropout" => self.dropout = parse(key, v)?,
            "ei_lr" => self.ei_lr = parse(key, v)?,
            "sr_lr" => self.sr_lr = parse(key, v)?,
            "ei_batch_size" => self.ei_batch_size = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "ei_epochs" => self.ei_epochs = parse(key, v)?,
            "sr_epochs" => self.sr_epochs = parse(key, v)?,
            "ei_activation" => self.ei_activation = parse(key, v)?,
            "ei_early_stop" => self.ei_early_stop = parse_optional(key, v)?,
            "pretrained" => self.pretrained = parse_optional(key, v)?,
            "pretrained_dim" => self.pretrained_dim = parse(key, v)?,
            "min_checkins" => self.min_checkins = parse(key, v)?,
            "eval_negatives" => self.eval_negatives = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies an explicit seed override such as the value of [`SEED_ENV`].
    pub fn override_seed(&mut self, value: Option<&str>) -> Result<()> {
        if let Some(v) = value {
            self.seed = parse(SEED_ENV, v.trim())?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("gamma", self.gamma), ("kappa", self.kappa), ("dropout", self.dropout)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda = {} must be a finite non-negative value", self.lambda)));
        }
        if self.dropout >= 1.0 {
            return Err(Error::Config("dropout must be below 1".into()));
        }
        for (name, v) in [
            ("dim", self.dim),
            ("blocks", self.blocks),
            ("heads", self.heads),
            ("batch_size", self.batch_size),
            ("ei_batch_size", self.ei_batch_size),
            ("eval_negatives", self.eval_negatives),
            ("max_len", self.max_len()),
            ("pretrained_dim", self.pretrained_dim),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!("dim {} is not divisible by {} heads", self.dim, self.heads)));
        }
        if self.min_checkins < 3 {
            return Err(Error::Config("min_checkins below 3 cannot support a three-way split".into()));
        }
        Ok(())
    }

    pub fn max_len(&self) -> usize {
        self.max_len.unwrap_or_else(|| self.profile.max_len())
    }

    pub fn relative(&self) -> RelativeConfig {
        RelativeConfig {
            clip_app: self.clip_app,
            clip_poi: self.clip_poi,
            clip_time: self.clip_time,
            time_mode: self.time_mode,
            use_app: self.use_app,
            use_poi: self.use_poi,
            use_time: self.use_time,
        }
    }

    pub fn architecture(&self, cardinalities: crate::data::Cardinalities) -> Architecture {
        Architecture {
            dim: self.dim,
            max_len: self.max_len(),
            blocks: self.blocks,
            heads: self.heads,
            num_pois: cardinalities.num_pois,
            num_app_categories: cardinalities.num_app_categories,
            num_poi_categories: cardinalities.num_poi_categories,
            relative: self.relative(),
            use_abs: self.use_abs,
        }
    }

    pub fn ei(&self) -> EiConfig {
        EiConfig {
            dim: self.dim,
            gamma: self.gamma,
            epochs: self.ei_epochs,
            lr: self.ei_lr,
            batch_size: self.ei_batch_size,
            seed: self.seed,
            activation: self.ei_activation,
            early_stop: self.ei_early_stop,
        }
    }

    pub fn hyper(&self) -> SrHyper {
        SrHyper {
            dropout: self.dropout,
            kappa: self.kappa,
            lambda: self.lambda,
        }
    }
}

/// Writes the same `key = value` form that [`RunConfig::parse`] reads.
impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let pretrained = self.pretrained.as_ref().map(|p| p.display().to_string());
        let rows: [(&str, String); 30] = [
            ("profile", self.profile.to_string()),
            ("dim", self.dim.to_string()),
            ("max_len", show_optional(&self.max_len)),
            ("blocks", self.blocks.to_string()),
            ("heads", self.heads.to_string()),
            ("clip_app", self.clip_app.to_string()),
            ("clip_poi", self.clip_poi.to_string()),
            ("clip_time", self.clip_time.to_string()),
            ("time_mode", self.time_mode.to_string()),
            ("use_app", self.use_app.to_string()),
            ("use_poi", self.use_poi.to_string()),
            ("use_time", self.use_time.to_string()),
            ("use_abs", self.use_abs.to_string()),
            ("gamma", self.gamma.to_string()),
            ("kappa", self.kappa.to_string()),
            ("lambda", self.lambda.to_string()),
            ("dropout", self.dropout.to_string()),
            ("ei_lr", self.ei_lr.to_string()),
            ("sr_lr", self.sr_lr.to_string()),
            ("ei_batch_size", self.ei_batch_size.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("ei_epochs", self.ei_epochs.to_string()),
            ("sr_epochs", self.sr_epochs.to_string()),
            ("ei_activation", self.ei_activation.to_string()),
            ("ei_early_stop", show_optional(&self.ei_early_stop)),
            ("pretrained", show_optional(&pretrained)),
            ("pretrained_dim", self.pretrained_dim.to_string()),
            ("min_checkins", self.min_checkins.to_string()),
            ("eval_negatives", self.eval_negatives.to_string()),
            ("seed", self.seed.to_string()),
        ];
        for (k, v) in rows {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}
