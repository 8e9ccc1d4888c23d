//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Model keys are the
//! ones listed by [`ModelConfig::to_pairs`]; the remaining keys are:
//!
//! | key | meaning | default |
//! |---|---|---|
//! | `steps` | training steps | 500 |
//! | `batch` | images per step | 4 |
//! | `lr` | Adam learning rate | 0.001 |
//! | `seed` | master seed | 0 |
//! | `label_dropout` | null-label probability while training | 0.1 |
//! | `log_every` | progress line interval on stderr, 0 for none | 50 |
//! | `timesteps` | diffusion steps | 1000 |
//! | `beta_start`, `beta_end` | linear beta range | 0.0001, 0.02 |
//! | `sample_steps` | respaced sampling steps | 50 |
//! | `cfg_scale` | guidance scale | 1.5 |
//! | `switch_threshold` | timestep below which causal blocks unmask, or `none` | none |
//! | `n_per_class` | images per class for `gen-data` | 64 |

use std::fs;
use std::path::Path;

use ledit_core::diffusion::{self, DiffusionSchedule, TrainConfig};
use ledit_core::{Error, ModelConfig, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub log_every: usize,
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub sample_steps: usize,
    pub cfg_scale: f64,
    pub switch_threshold: Option<usize>,
    pub n_per_class: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig {
                batch: 4,
                ..TrainConfig::default()
            },
            log_every: 50,
            timesteps: diffusion::DEFAULT_TIMESTEPS,
            beta_start: diffusion::DEFAULT_BETA_START,
            beta_end: diffusion::DEFAULT_BETA_END,
            sample_steps: 50,
            cfg_scale: 1.5,
            switch_threshold: None,
            n_per_class: 64,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{}` for `{key}`", value.trim())))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        if self.model.set(key, value)? {
            return Ok(());
        }
        match key {
            "steps" => self.train.steps = parse(key, value)?,
            "batch" => self.train.batch = parse(key, value)?,
            "lr" => self.train.lr = parse(key, value)?,
            "seed" => self.train.seed = parse(key, value)?,
            "label_dropout" => self.train.label_dropout = parse(key, value)?,
            "log_every" => self.log_every = parse(key, value)?,
            "timesteps" => self.timesteps = parse(key, value)?,
            "beta_start" => self.beta_start = parse(key, value)?,
            "beta_end" => self.beta_end = parse(key, value)?,
            "sample_steps" => self.sample_steps = parse(key, value)?,
            "cfg_scale" => self.cfg_scale = parse(key, value)?,
            "switch_threshold" => {
                self.switch_threshold = match value.trim() {
                    "none" | "" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "n_per_class" => self.n_per_class = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies a `key=value` assignment.
    pub fn set_assignment(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got `{assignment}`")))?;
        self.set(k, v)
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            cfg.set_assignment(line)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse_text(&fs::read_to_string(path)?)
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        diffusion::linear_schedule(self.timesteps, self.beta_start, self.beta_end)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.schedule()?;
        if self.sample_steps == 0 || self.sample_steps > self.timesteps {
            return Err(Error::Config(format!(
                "sample_steps {} must be in 1..={}",
                self.sample_steps, self.timesteps
            )));
        }
        if !self.cfg_scale.is_finite() {
            return Err(Error::Config("cfg_scale must be finite".into()));
        }
        if self.n_per_class == 0 {
            return Err(Error::Config("n_per_class must be positive".into()));
        }
        Ok(())
    }

    /// Every key with its current value, in a fixed order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.model.to_pairs() {
            out.push_str(&format!("{k} = {v}\n"));
        }
        let t = &self.train;
        let threshold = self.switch_threshold.map_or("none".to_string(), |v| v.to_string());
        for (k, v) in [
            ("steps", t.steps.to_string()),
            ("batch", t.batch.to_string()),
            ("lr", format!("{:?}", t.lr)),
            ("seed", t.seed.to_string()),
            ("label_dropout", format!("{:?}", t.label_dropout)),
            ("log_every", self.log_every.to_string()),
            ("timesteps", self.timesteps.to_string()),
            ("beta_start", format!("{:?}", self.beta_start)),
            ("beta_end", format!("{:?}", self.beta_end)),
            ("sample_steps", self.sample_steps.to_string()),
            ("cfg_scale", format!("{:?}", self.cfg_scale)),
            ("switch_threshold", threshold),
            ("n_per_class", self.n_per_class.to_string()),
        ] {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_roundtrip() {
        let mut cfg = RunConfig::default();
        cfg.set("switch_threshold", "100").unwrap();
        cfg.set("order", "ca_then_sa").unwrap();
        cfg.set("lr", "0.0005").unwrap();
        assert_eq!(RunConfig::parse_text(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn comments_and_errors() {
        let cfg = RunConfig::parse_text("# comment\n\ndepth = 4\nscan=a\n").unwrap();
        assert_eq!(cfg.model.depth, 4);
        let err = RunConfig::parse_text("depth = 4\nbogus = 1\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        assert!(RunConfig::parse_text("depth = four\n").is_err());
    }

    #[test]
    fn validation_catches_bad_values() {
        let mut cfg = RunConfig::default();
        cfg.set("depth", "3").unwrap();
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.set("beta_end", "0.00001").unwrap();
        assert!(cfg.validate().is_err());
        assert!(RunConfig::default().validate().is_ok());
    }
}
