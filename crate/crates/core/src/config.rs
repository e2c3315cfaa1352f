//! Plain-text run configuration.
//!
//! One `key = value` pair per line; `#` starts a comment. Missing keys keep
//! their defaults, unknown or repeated keys are rejected.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::generator::GeneratorConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Frame geometry is taken from the dataset at run time.
    pub generator: GeneratorConfig,
    pub disc_layers: usize,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    /// Iterations between panel dumps (0 disables them).
    pub plot_interval: u64,
    /// Iterations between periodic checkpoints (0 keeps only the final one).
    pub checkpoint_interval: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            generator: GeneratorConfig::default(),
            disc_layers: 2,
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
            plot_interval: 100,
            checkpoint_interval: 500,
        }
    }
}

fn parse<T: FromStr>(line: usize, key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("line {line}: invalid value {value:?} for {key}")))
}

impl RunConfig {
    pub const KEYS: [&'static str; 35] = [
        "num_layers",
        "hidden_channels",
        "tau",
        "context_len",
        "horizon_len",
        "encoder_depth",
        "disc_layers",
        "batch_size",
        "max_epochs",
        "max_iters",
        "eta0",
        "eta_decay_rate",
        "mode",
        "seed",
        "lr",
        "lr_decay_factor",
        "lr_decay_interval",
        "adam_beta1",
        "adam_beta2",
        "adam_eps",
        "alpha",
        "beta",
        "gamma",
        "gamma_warmup_iters",
        "num_sequences",
        "frames_per_sequence",
        "frame_size",
        "num_shapes",
        "sprite_size",
        "min_speed",
        "max_speed",
        "data_seed",
        "plot_interval",
        "checkpoint_interval",
        "frame_channels",
    ];

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        let mut seen = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let n = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {n}: expected key = value, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {n}: duplicate key {key}")));
            }
            c.set(n, key, value)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    fn set(&mut self, n: usize, key: &str, v: &str) -> Result<()> {
        let g = &mut self.generator;
        let t = &mut self.train;
        let s = &mut self.synth;
        match key {
            "num_layers" => g.num_layers = parse(n, key, v)?,
            "hidden_channels" => g.hidden_channels = parse(n, key, v)?,
            "tau" => g.tau = parse(n, key, v)?,
            "context_len" => {
                g.context_len = parse(n, key, v)?;
                s.context_len = g.context_len;
            }
            "horizon_len" => {
                g.horizon_len = parse(n, key, v)?;
                s.horizon_len = g.horizon_len;
            }
            "encoder_depth" => g.encoder_depth = parse(n, key, v)?,
            "frame_channels" => g.frame_channels = parse(n, key, v)?,
            "disc_layers" => self.disc_layers = parse(n, key, v)?,
            "batch_size" => t.batch_size = parse(n, key, v)?,
            "max_epochs" => t.max_epochs = parse(n, key, v)?,
            "max_iters" => t.max_iters = parse(n, key, v)?,
            "eta0" => t.eta0 = parse(n, key, v)?,
            "eta_decay_rate" => t.eta_decay_rate = parse(n, key, v)?,
            "mode" => t.mode = v.parse().map_err(|e| Error::Config(format!("line {n}: {e}")))?,
            "seed" => t.seed = parse(n, key, v)?,
            "lr" => t.adam.lr = parse(n, key, v)?,
            "lr_decay_factor" => t.adam.decay_factor = parse(n, key, v)?,
            "lr_decay_interval" => t.adam.decay_interval = parse(n, key, v)?,
            "adam_beta1" => t.adam.beta1 = parse(n, key, v)?,
            "adam_beta2" => t.adam.beta2 = parse(n, key, v)?,
            "adam_eps" => t.adam.eps = parse(n, key, v)?,
            "alpha" => t.weights.alpha = parse(n, key, v)?,
            "beta" => t.weights.beta = parse(n, key, v)?,
            "gamma" => t.weights.gamma = parse(n, key, v)?,
            "gamma_warmup_iters" => t.weights.gamma_warmup_iters = parse(n, key, v)?,
            "num_sequences" => s.num_sequences = parse(n, key, v)?,
            "frames_per_sequence" => s.frames_per_sequence = parse(n, key, v)?,
            "frame_size" => s.frame_size = parse(n, key, v)?,
            "num_shapes" => s.num_shapes = parse(n, key, v)?,
            "sprite_size" => s.sprite_size = parse(n, key, v)?,
            "min_speed" => s.min_speed = parse(n, key, v)?,
            "max_speed" => s.max_speed = parse(n, key, v)?,
            "data_seed" => s.seed = parse(n, key, v)?,
            "plot_interval" => self.plot_interval = parse(n, key, v)?,
            "checkpoint_interval" => self.checkpoint_interval = parse(n, key, v)?,
            _ => return Err(Error::Config(format!("line {n}: unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: Error| Error::Config(e.to_string());
        let g = &self.generator;
        if [g.num_layers, g.hidden_channels, g.tau, g.context_len, g.horizon_len, g.encoder_depth, g.frame_channels, self.disc_layers]
            .contains(&0)
        {
            return Err(Error::Config("network sizes must be positive".into()));
        }
        let b = self.train.adam.beta1;
        let b2 = self.train.adam.beta2;
        if !(0.0..1.0).contains(&b) || !(0.0..1.0).contains(&b2) || !(self.train.adam.eps > 0.0) || !(self.train.adam.lr > 0.0) {
            return Err(Error::Config("adam settings out of range".into()));
        }
        self.train.validate().map_err(wrap)?;
        self.synth.validate().map_err(wrap)
    }

    /// Generator configuration for frames of the given geometry.
    pub fn generator_for(&self, frame_shape: [usize; 3]) -> GeneratorConfig {
        GeneratorConfig {
            frame_channels: frame_shape[0],
            frame_height: frame_shape[1],
            frame_width: frame_shape[2],
            ..self.generator.clone()
        }
    }

    /// Text form that [`RunConfig::parse`] reads back to the same value.
    pub fn to_text(&self) -> String {
        let g = &self.generator;
        let t = &self.train;
        let s = &self.synth;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("num_layers", g.num_layers.to_string());
        kv("hidden_channels", g.hidden_channels.to_string());
        kv("tau", g.tau.to_string());
        kv("context_len", g.context_len.to_string());
        kv("horizon_len", g.horizon_len.to_string());
        kv("encoder_depth", g.encoder_depth.to_string());
        kv("frame_channels", g.frame_channels.to_string());
        kv("disc_layers", self.disc_layers.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("max_epochs", t.max_epochs.to_string());
        kv("max_iters", t.max_iters.to_string());
        kv("eta0", t.eta0.to_string());
        kv("eta_decay_rate", t.eta_decay_rate.to_string());
        kv("mode", t.mode.to_string());
        kv("seed", t.seed.to_string());
        kv("lr", t.adam.lr.to_string());
        kv("lr_decay_factor", t.adam.decay_factor.to_string());
        kv("lr_decay_interval", t.adam.decay_interval.to_string());
        kv("adam_beta1", t.adam.beta1.to_string());
        kv("adam_beta2", t.adam.beta2.to_string());
        kv("adam_eps", t.adam.eps.to_string());
        kv("alpha", t.weights.alpha.to_string());
        kv("beta", t.weights.beta.to_string());
        kv("gamma", t.weights.gamma.to_string());
        kv("gamma_warmup_iters", t.weights.gamma_warmup_iters.to_string());
        kv("num_sequences", s.num_sequences.to_string());
        kv("frames_per_sequence", s.frames_per_sequence.to_string());
        kv("frame_size", s.frame_size.to_string());
        kv("num_shapes", s.num_shapes.to_string());
        kv("sprite_size", s.sprite_size.to_string());
        kv("min_speed", s.min_speed.to_string());
        kv("max_speed", s.max_speed.to_string());
        kv("data_seed", s.seed.to_string());
        kv("plot_interval", self.plot_interval.to_string());
        kv("checkpoint_interval", self.checkpoint_interval.to_string());
        out
    }
}
