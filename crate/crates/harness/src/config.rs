//! Run configuration: flat `key = value` text with dotted section keys.
//!
//! Grammar, one entry per line:
//!
//! ```text
//! # comment
//! key = value
//! ```
//!
//! Keys are the dotted names listed by [`RunConfig::entries`]. Unknown keys
//! are rejected. Lists are comma separated.

use std::path::{Path, PathBuf};

use raev2::decoder::DecoderConfig;
use raev2::dit::{DiTConfig, TrainConfig};
use raev2::encoders::{Aggregation, EncoderConfig, Recipe};
use raev2::guidance::{GuidanceMode, SamplerConfig};
use raev2::metrics::ProbeConfig;
use raev2::optim::TrainSchedule;
use sha2::{Digest, Sha256};

/// Version tag written into every CSV and checkpoint metadata.
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value for `{key}`: `{value}` ({reason})")]
    BadValue { key: String, value: String, reason: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    Mls,
    Mlr,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub experiment: String,
    pub seed: u64,
    pub output_dir: PathBuf,

    pub data_seed: u64,
    pub train_size: usize,
    pub eval_size: usize,
    pub classes: usize,
    pub image_size: usize,

    pub recipe: Recipe,
    pub enc_width: usize,
    pub enc_layers: usize,
    pub patch: usize,
    pub enc_train_steps: usize,
    pub enc_train_batch: usize,
    pub enc_lr: f64,

    pub scheme: Scheme,
    pub k: usize,
    /// Encoder whose latent is the REPA target; `None` uses the diffusion latent.
    pub repa_target: Option<Recipe>,

    pub dec_width: usize,
    pub dec_hidden: usize,
    pub dec_steps: usize,
    pub dec_batch: usize,
    pub dec_lr: f64,

    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub tap: usize,

    pub steps: u64,
    pub batch: usize,
    pub lambda_repa: f64,
    pub cfg_dropout: f64,
    pub lr: f64,
    pub final_lr: f64,
    /// Warmup length as a fraction of `steps`.
    pub warmup_frac: f64,
    pub ema_decay: f64,
    pub clip: f64,
    pub time_mu: f64,
    pub time_sigma: f64,

    pub sample_steps: usize,
    pub sample_seed: u64,
    pub guidance_modes: Vec<GuidanceMode>,
    pub guidance_w: Vec<f64>,
    pub guidance_interval: (f64, f64),

    /// Epochs between FD evaluations; 0 evaluates only at the end.
    pub eval_every_epochs: f64,
    pub eval_n: usize,
    pub ref_seed: u64,
    pub checkpoint_every: u64,
    pub probe_epochs: usize,
    pub probe_lr: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            experiment: "default".into(),
            seed: 0,
            output_dir: PathBuf::from("runs"),
            data_seed: 0,
            train_size: 8000,
            eval_size: 1024,
            classes: 8,
            image_size: 16,
            recipe: Recipe::Supervised,
            enc_width: 32,
            enc_layers: 8,
            patch: 4,
            enc_train_steps: 300,
            enc_train_batch: 64,
            enc_lr: 3e-3,
            scheme: Scheme::Mls,
            k: 1,
            repa_target: None,
            dec_width: 64,
            dec_hidden: 128,
            dec_steps: 6000,
            dec_batch: 32,
            dec_lr: 1e-3,
            depth: 4,
            width: 32,
            heads: 4,
            mlp_hidden: 64,
            tap: 1,
            steps: 20_000,
            batch: 16,
            lambda_repa: 0.5,
            cfg_dropout: 0.1,
            lr: 2e-4,
            final_lr: 2e-5,
            warmup_frac: 0.5,
            ema_decay: 0.9995,
            clip: 1.0,
            time_mu: 0.0,
            time_sigma: 1.0,
            sample_steps: 50,
            sample_seed: 1234,
            guidance_modes: GuidanceMode::ALL.to_vec(),
            guidance_w: vec![0.0, 0.25, 0.5, 1.0, 1.5, 2.0, 3.0],
            guidance_interval: (0.0, 1.0),
            eval_every_epochs: 1.0,
            eval_n: 1024,
            ref_seed: 1000,
            checkpoint_every: 0,
            probe_epochs: 30,
            probe_lr: 1e-2,
        }
    }
}

fn bad(key: &str, value: &str, reason: impl ToString) -> ConfigError {
    ConfigError::BadValue { key: key.into(), value: value.into(), reason: reason.to_string() }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| bad(key, value, e))
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Every key with its current value, in canonical order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("experiment", self.experiment.clone()),
            ("seed", self.seed.to_string()),
            ("output_dir", self.output_dir.display().to_string()),
            ("data.seed", self.data_seed.to_string()),
            ("data.train_size", self.train_size.to_string()),
            ("data.eval_size", self.eval_size.to_string()),
            ("data.classes", self.classes.to_string()),
            ("data.image_size", self.image_size.to_string()),
            ("encoder.recipe", self.recipe.to_string()),
            ("encoder.width", self.enc_width.to_string()),
            ("encoder.layers", self.enc_layers.to_string()),
            ("encoder.patch", self.patch.to_string()),
            ("encoder.train_steps", self.enc_train_steps.to_string()),
            ("encoder.train_batch", self.enc_train_batch.to_string()),
            ("encoder.lr", self.enc_lr.to_string()),
            ("agg.scheme", match self.scheme { Scheme::Mls => "mls", Scheme::Mlr => "mlr" }.into()),
            ("agg.k", self.k.to_string()),
            ("repa.target", self.repa_target.map_or("self".into(), |r| r.to_string())),
            ("decoder.width", self.dec_width.to_string()),
            ("decoder.hidden", self.dec_hidden.to_string()),
            ("decoder.steps", self.dec_steps.to_string()),
            ("decoder.batch", self.dec_batch.to_string()),
            ("decoder.lr", self.dec_lr.to_string()),
            ("model.depth", self.depth.to_string()),
            ("model.width", self.width.to_string()),
            ("model.heads", self.heads.to_string()),
            ("model.mlp_hidden", self.mlp_hidden.to_string()),
            ("model.tap", self.tap.to_string()),
            ("train.steps", self.steps.to_string()),
            ("train.batch", self.batch.to_string()),
            ("train.lambda_repa", self.lambda_repa.to_string()),
            ("train.cfg_dropout", self.cfg_dropout.to_string()),
            ("train.lr", self.lr.to_string()),
            ("train.final_lr", self.final_lr.to_string()),
            ("train.warmup_frac", self.warmup_frac.to_string()),
            ("train.ema_decay", self.ema_decay.to_string()),
            ("train.clip", self.clip.to_string()),
            ("train.time_mu", self.time_mu.to_string()),
            ("train.time_sigma", self.time_sigma.to_string()),
            ("sample.steps", self.sample_steps.to_string()),
            ("sample.seed", self.sample_seed.to_string()),
            ("guidance.modes", join(&self.guidance_modes)),
            ("guidance.w", join(&self.guidance_w)),
            ("guidance.interval", format!("{},{}", self.guidance_interval.0, self.guidance_interval.1)),
            ("eval.every_epochs", self.eval_every_epochs.to_string()),
            ("eval.n", self.eval_n.to_string()),
            ("eval.ref_seed", self.ref_seed.to_string()),
            ("eval.checkpoint_every", self.checkpoint_every.to_string()),
            ("probe.epochs", self.probe_epochs.to_string()),
            ("probe.lr", self.probe_lr.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        match key {
            "experiment" => self.experiment = v.into(),
            "seed" => self.seed = parse(key, v)?,
            "output_dir" => self.output_dir = PathBuf::from(v),
            "data.seed" => self.data_seed = parse(key, v)?,
            "data.train_size" => self.train_size = parse(key, v)?,
            "data.eval_size" => self.eval_size = parse(key, v)?,
            "data.classes" => self.classes = parse(key, v)?,
            "data.image_size" => self.image_size = parse(key, v)?,
            "encoder.recipe" => self.recipe = parse(key, v)?,
            "encoder.width" => self.enc_width = parse(key, v)?,
            "encoder.layers" => self.enc_layers = parse(key, v)?,
            "encoder.patch" => self.patch = parse(key, v)?,
            "encoder.train_steps" => self.enc_train_steps = parse(key, v)?,
            "encoder.train_batch" => self.enc_train_batch = parse(key, v)?,
            "encoder.lr" => self.enc_lr = parse(key, v)?,
            "agg.scheme" => {
                self.scheme = match v {
                    "mls" => Scheme::Mls,
                    "mlr" => Scheme::Mlr,
                    _ => return Err(bad(key, v, "expected mls or mlr")),
                }
            }
            "agg.k" => self.k = parse(key, v)?,
            "repa.target" => self.repa_target = if v == "self" { None } else { Some(parse(key, v)?) },
            "decoder.width" => self.dec_width = parse(key, v)?,
            "decoder.hidden" => self.dec_hidden = parse(key, v)?,
            "decoder.steps" => self.dec_steps = parse(key, v)?,
            "decoder.batch" => self.dec_batch = parse(key, v)?,
            "decoder.lr" => self.dec_lr = parse(key, v)?,
            "model.depth" => self.depth = parse(key, v)?,
            "model.width" => self.width = parse(key, v)?,
            "model.heads" => self.heads = parse(key, v)?,
            "model.mlp_hidden" => self.mlp_hidden = parse(key, v)?,
            "model.tap" => self.tap = parse(key, v)?,
            "train.steps" => self.steps = parse(key, v)?,
            "train.batch" => self.batch = parse(key, v)?,
            "train.lambda_repa" => self.lambda_repa = parse(key, v)?,
            "train.cfg_dropout" => self.cfg_dropout = parse(key, v)?,
            "train.lr" => self.lr = parse(key, v)?,
            "train.final_lr" => self.final_lr = parse(key, v)?,
            "train.warmup_frac" => self.warmup_frac = parse(key, v)?,
            "train.ema_decay" => self.ema_decay = parse(key, v)?,
            "train.clip" => self.clip = parse(key, v)?,
            "train.time_mu" => self.time_mu = parse(key, v)?,
            "train.time_sigma" => self.time_sigma = parse(key, v)?,
            "sample.steps" => self.sample_steps = parse(key, v)?,
            "sample.seed" => self.sample_seed = parse(key, v)?,
            "guidance.modes" => {
                self.guidance_modes =
                    v.split(',').map(|s| parse::<GuidanceMode>(key, s.trim())).collect::<Result<_, _>>()?
            }
            "guidance.w" => self.guidance_w = v.split(',').map(|s| parse(key, s.trim())).collect::<Result<_, _>>()?,
            "guidance.interval" => {
                let parts: Vec<f64> = v.split(',').map(|s| parse(key, s.trim())).collect::<Result<_, _>>()?;
                let [lo, hi] = parts[..] else { return Err(bad(key, v, "expected lo,hi")) };
                self.guidance_interval = (lo, hi);
            }
            "eval.every_epochs" => self.eval_every_epochs = parse(key, v)?,
            "eval.n" => self.eval_n = parse(key, v)?,
            "eval.ref_seed" => self.ref_seed = parse(key, v)?,
            "eval.checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "probe.epochs" => self.probe_epochs = parse(key, v)?,
            "probe.lr" => self.probe_lr = parse(key, v)?,
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(ConfigError::Syntax { line: i + 1, text: raw.into() });
            };
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut c = RunConfig::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| anyhow::anyhow!("reading config {}: {e}", path.display()))?;
        Ok(Self::from_text(&text)?)
    }

    /// Resolved `key = value` text, all keys, canonical order.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// `to_text` without `output_dir`, for artifacts that must not depend on
    /// where a run was written.
    pub fn portable_text(&self) -> String {
        self.entries().into_iter().filter(|(k, _)| *k != "output_dir").map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// SHA-256 over the resolved config, excluding `output_dir` (which does
    /// not affect results).
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.entries() {
            if k != "output_dir" {
                h.update(format!("{k}={v}\n").as_bytes());
            }
        }
        hex::encode(&h.finalize()[..8])
    }

    /// Hash over the keys that determine the encoder, latents and decoder.
    /// Runs that differ only in diffusion settings share a stage-1 build.
    pub fn stage1_hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.entries() {
            if k == "seed" || ["data.", "encoder.", "agg.", "repa.", "decoder."].iter().any(|p| k.starts_with(p)) {
                h.update(format!("{k}={v}\n").as_bytes());
            }
        }
        hex::encode(&h.finalize()[..8])
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |m: String| Err(ConfigError::Invalid(m));
        if self.classes < 2 {
            return inv(format!("data.classes must be >= 2, got {}", self.classes));
        }
        if self.k == 0 || self.k > self.enc_layers {
            return inv(format!("agg.k = {} outside [1, encoder.layers = {}]", self.k, self.enc_layers));
        }
        if self.eval_n < 2 || self.eval_size < 2 {
            return inv("eval.n and data.eval_size must be >= 2".into());
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return inv(format!("train.warmup_frac must be in [0, 1], got {}", self.warmup_frac));
        }
        if !(self.eval_every_epochs >= 0.0) {
            return inv("eval.every_epochs must be >= 0".into());
        }
        if self.repa_target.is_some() && self.lambda_repa == 0.0 {
            log::warn!("repa.target set but train.lambda_repa = 0");
        }
        self.encoder_config().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.dit_config().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train_config().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.sampler_config().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.decoder_config().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            image_size: self.image_size,
            patch: self.patch,
            width: self.enc_width,
            layers: self.enc_layers,
            train_steps: self.enc_train_steps,
            train_batch: self.enc_train_batch,
            train_lr: self.enc_lr,
        }
    }

    pub fn aggregation(&self) -> Aggregation {
        match self.scheme {
            Scheme::Mls => Aggregation::Mls { k: self.k },
            Scheme::Mlr => Aggregation::Mlr { k: self.k, seed: self.seed },
        }
    }

    pub fn decoder_config(&self) -> DecoderConfig {
        DecoderConfig {
            width: self.dec_width,
            hidden: self.dec_hidden,
            blocks: 2,
            steps: self.dec_steps,
            batch: self.dec_batch,
            lr: self.dec_lr,
            patch: self.patch,
        }
    }

    pub fn dit_config(&self) -> DiTConfig {
        let grid = self.image_size / self.patch.max(1);
        DiTConfig {
            depth: self.depth,
            width: self.width,
            heads: self.heads,
            mlp_hidden: self.mlp_hidden,
            tap: self.tap,
            classes: self.classes,
            tokens: grid * grid,
            channels: self.enc_width,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lambda_repa: self.lambda_repa,
            cfg_dropout_p: self.cfg_dropout,
            schedule: TrainSchedule {
                base_lr: self.lr,
                final_lr: self.final_lr,
                warmup_steps: (self.warmup_frac * self.steps as f64).round() as u64,
                decay_end_step: self.steps,
                max_grad_norm: self.clip,
                ema_decay: self.ema_decay,
            },
            time_mu: self.time_mu,
            time_sigma: self.time_sigma,
            batch: self.batch,
            seed: self.seed,
        }
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig { steps: self.sample_steps, seed: self.sample_seed, ..SamplerConfig::default() }
    }

    pub fn probe_config(&self) -> ProbeConfig {
        ProbeConfig { epochs: self.probe_epochs, lr: self.probe_lr }
    }

    pub fn steps_per_epoch(&self) -> u64 {
        raev2::optim::steps_per_epoch(self.train_size - self.train_size % self.classes, self.batch)
    }

    /// Step indices (after which) FD is evaluated; always includes the end.
    pub fn eval_steps(&self) -> Vec<u64> {
        let mut out = Vec::new();
        if self.eval_every_epochs > 0.0 {
            let every = ((self.eval_every_epochs * self.steps_per_epoch() as f64).round() as u64).max(1);
            out.extend((1..).map(|i| i * every).take_while(|&s| s < self.steps));
        }
        out.push(self.steps);
        out
    }

    /// Artifact header line: `# config_hash=…,seed=…,format=…`.
    pub fn provenance(&self) -> String {
        format!("# config_hash={},seed={},format={}", self.hash(), self.seed, FORMAT_VERSION)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.set("agg.scheme", "mlr").unwrap();
        c.set("guidance.w", "0, 1.5").unwrap();
        c.set("repa.target", "pos-enc").unwrap();
        let back = RunConfig::from_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn hash_ignores_output_dir_only() {
        let a = RunConfig::default();
        let b = RunConfig { output_dir: "elsewhere".into(), ..a.clone() };
        let c = RunConfig { seed: 1, ..a.clone() };
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn stage1_hash_tracks_stage1_keys() {
        let a = RunConfig::default();
        let b = RunConfig { lambda_repa: 0.0, steps: 10, ..a.clone() };
        assert_eq!(a.stage1_hash(), b.stage1_hash());
        assert_ne!(a.stage1_hash(), RunConfig { seed: 1, ..a.clone() }.stage1_hash());
        assert_ne!(a.stage1_hash(), RunConfig { k: 2, ..a.clone() }.stage1_hash());
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(RunConfig::from_text("nope = 1"), Err(ConfigError::UnknownKey(_))));
        assert!(matches!(RunConfig::from_text("seed 1"), Err(ConfigError::Syntax { line: 1, .. })));
        assert!(matches!(RunConfig::from_text("seed = x"), Err(ConfigError::BadValue { .. })));
        assert!(matches!(RunConfig::from_text("agg.k = 9"), Err(ConfigError::Invalid(_))));
        assert!(matches!(RunConfig::from_text("encoder.recipe = dino"), Err(ConfigError::BadValue { .. })));
    }

    #[test]
    fn comments_and_blank_lines() {
        let c = RunConfig::from_text("# header\n\nseed = 7  # trailing\n").unwrap();
        assert_eq!(c.seed, 7);
    }

    #[test]
    fn eval_schedule_ends_at_last_step() {
        let c = RunConfig { train_size: 800, batch: 16, steps: 120, eval_every_epochs: 1.0, ..Default::default() };
        assert_eq!(c.eval_steps(), vec![50, 100, 120]);
        let end = RunConfig { eval_every_epochs: 0.0, ..c };
        assert_eq!(end.eval_steps(), vec![120]);
    }
}
