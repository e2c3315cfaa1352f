//! Alternating adversarial training.
//!
//! Each step (1) rolls the generator out under a fresh scheduled-sampling
//! mask, (2) updates the discriminator on real horizon frames against the
//! detached generated ones, and (3) updates the generator using logits from
//! the freshly updated discriminator on the non-detached frames. Modes
//! without an adversary skip (2) and the adversarial term.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{to_f32_precision, Checkpoint};
use crate::data::{BatchIterator, SequenceDataset};
use crate::discriminator::{discriminate_frames, DiscriminatorConfig};
use crate::error::{Error, Result};
use crate::generator::{eta_decay, frame_at, predict_sequence, GeneratorConfig, SamplingMask};
use crate::graph::{Graph, Var};
use crate::loss::{discriminator_loss, generator_loss, AblationMode, LossWeights};
use crate::optim::{AdamConfig, AdamState};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: u64,
    pub max_iters: u64,
    pub eta0: f64,
    pub eta_decay_rate: f64,
    pub mode: AblationMode,
    pub seed: u64,
    pub weights: LossWeights,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            max_epochs: 7,
            max_iters: 2000,
            eta0: 1.0,
            eta_decay_rate: 5e-4,
            mode: AblationMode::GanL1Mse,
            seed: 0,
            weights: LossWeights::default(),
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 || self.max_iters == 0 {
            return Err(Error::InvalidArgument("batch_size, max_epochs, and max_iters must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.eta0) || !(self.eta_decay_rate >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "eta0 must be in [0,1] and the decay rate nonnegative (got {}, {})",
                self.eta0, self.eta_decay_rate
            )));
        }
        self.weights.validate()
    }

    pub fn eta_at(&self, iteration: u64) -> f64 {
        eta_decay(self.eta0, self.eta_decay_rate, iteration)
    }

    /// Iterations the run will take on a dataset of `num_sequences`.
    pub fn total_iters(&self, num_sequences: usize) -> u64 {
        let per_epoch = (num_sequences / self.batch_size.max(1)) as u64;
        self.max_iters.min(per_epoch.saturating_mul(self.max_epochs))
    }
}

/// Random stream whose whole state is four words. Each draw seeds a fresh
/// ChaCha stream from the key and advances the key from that stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrainRng {
    key: [u64; 4],
}

impl TrainRng {
    pub fn from_seed(seed: u64) -> Self {
        let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0F_7A1A);
        TrainRng {
            key: std::array::from_fn(|_| r.next_u64()),
        }
    }

    pub fn from_state(key: [u64; 4]) -> Self {
        TrainRng { key }
    }

    pub fn state(&self) -> [u64; 4] {
        self.key
    }

    pub fn next_stream(&mut self) -> ChaCha8Rng {
        let mut seed = [0u8; 32];
        for (chunk, k) in seed.chunks_exact_mut(8).zip(self.key) {
            chunk.copy_from_slice(&k.to_le_bytes());
        }
        let mut r = ChaCha8Rng::from_seed(seed);
        self.key = std::array::from_fn(|_| r.next_u64());
        r
    }
}

/// Scalars reported for one training step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub iteration: u64,
    pub lr: f64,
    pub eta: f64,
    pub loss_gen: f64,
    pub loss_disc: f64,
    /// Active reconstruction terms (`α·MSE + β·L1` as the mode selects).
    pub reconstruction: f64,
    pub mse: f64,
    pub l1: f64,
    pub adversarial: f64,
}

impl StepStats {
    pub const CSV_HEADER: &'static str = "iter,lr,eta,loss_gen,loss_disc";

    pub fn log_line(&self) -> String {
        format!(
            "iter={} lr={} eta={} loss_gen={} loss_disc={}",
            self.iteration, self.lr, self.eta, self.loss_gen, self.loss_disc
        )
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.iteration, self.lr, self.eta, self.loss_gen, self.loss_disc
        )
    }
}

pub struct Trainer {
    pub gen_cfg: GeneratorConfig,
    pub disc_cfg: DiscriminatorConfig,
    pub cfg: TrainConfig,
    pub gen: ParamStore,
    pub disc: ParamStore,
    pub gen_opt: AdamState,
    pub disc_opt: AdamState,
    /// Completed steps; the next step runs at this index.
    pub iteration: u64,
    rng: TrainRng,
    last_pixel_attention: Option<Vec<Tensor>>,
}

/// Discriminator geometry matching a generator.
pub fn matching_discriminator(gen: &GeneratorConfig, num_layers: usize) -> DiscriminatorConfig {
    DiscriminatorConfig {
        num_layers,
        hidden_channels: gen.hidden_channels,
        tau: gen.tau,
        frame_channels: gen.frame_channels,
        frame_height: gen.frame_height,
        frame_width: gen.frame_width,
        encoder_depth: gen.encoder_depth,
    }
}

fn check_finite(v: f64, iteration: u64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { iteration })
    }
}

impl Trainer {
    pub fn new(gen_cfg: GeneratorConfig, disc_cfg: DiscriminatorConfig, cfg: TrainConfig) -> Result<Self> {
        gen_cfg.validate()?;
        cfg.validate()?;
        let mut init = ChaCha8Rng::seed_from_u64(cfg.seed);
        let gen = gen_cfg.init_params(&mut init);
        let disc = disc_cfg.init_params(&mut init);
        Ok(Trainer {
            gen_opt: AdamState::new(cfg.adam, &gen),
            disc_opt: AdamState::new(cfg.adam, &disc),
            gen,
            disc,
            gen_cfg,
            disc_cfg,
            rng: TrainRng::from_seed(cfg.seed),
            cfg,
            iteration: 0,
            last_pixel_attention: None,
        })
    }

    pub fn rng_state(&self) -> [u64; 4] {
        self.rng.state()
    }

    pub fn lr(&self) -> f64 {
        self.cfg.adam.lr_at(self.iteration)
    }

    pub fn eta(&self) -> f64 {
        self.cfg.eta_at(self.iteration)
    }

    /// Pixel attention of the most recent rollout, one `B×C×h×w` map per step.
    pub fn last_pixel_attention(&self) -> Option<&[Tensor]> {
        self.last_pixel_attention.as_deref()
    }

    /// One discriminator update on real vs. fake frame lists (each frame
    /// `B×c×H×W`). Returns the discriminator loss before the update.
    pub fn discriminator_step(&mut self, real: &[Tensor], fake: &[Tensor]) -> Result<f64> {
        let lr = self.lr();
        let mut g = Graph::new();
        let bound = self.disc.bind(&mut g, true);
        let real: Vec<Var> = real.iter().map(|t| g.constant(t.clone())).collect();
        let fake: Vec<Var> = fake.iter().map(|t| g.constant(t.clone())).collect();
        let lr_real = discriminate_frames(&mut g, &real, &bound, &self.disc_cfg)?;
        let lr_fake = discriminate_frames(&mut g, &fake, &bound, &self.disc_cfg)?;
        let loss = discriminator_loss(&mut g, lr_real, lr_fake)?;
        let value = check_finite(g.value(loss).item(), self.iteration)?;
        let grads = g.backward(loss)?;
        self.disc_opt.step(&mut self.disc, &grads, lr)?;
        Ok(value)
    }

    /// One full training step on a `B×(T+H)×c×H×W` batch.
    pub fn train_step(&mut self, batch: &Tensor) -> Result<StepStats> {
        let it = self.iteration;
        let lr = self.lr();
        let eta = self.eta();
        let horizon = self.gen_cfg.horizon_len;
        let context = self.gen_cfg.context_len;
        let b = batch.shape().first().copied().unwrap_or(0);
        let mask = SamplingMask::sample(eta, horizon, b, &mut self.rng.next_stream());

        let mut g = Graph::new();
        let gen_vars = self.gen.bind(&mut g, true);
        let rollout = predict_sequence(&mut g, batch, &mask, &gen_vars, &self.gen_cfg)?;
        self.last_pixel_attention = Some(rollout.pixel_attention.iter().map(|&v| g.value(v).clone()).collect());

        let truth: Vec<Tensor> = (0..self.gen_cfg.seq_len()).map(|t| frame_at(batch, t)).collect::<Result<_>>()?;
        let preds = &rollout.predictions[1..];
        let targets: Vec<Var> = truth[1..].iter().map(|t| g.constant(t.clone())).collect();

        let mode = self.cfg.mode;
        let mut loss_disc = 0.0;
        let fake_logits = if mode.uses_adversary() {
            let fake: Vec<Tensor> = rollout.horizon(&self.gen_cfg).iter().map(|&v| g.value(v).clone()).collect();
            loss_disc = self.discriminator_step(&truth[context..], &fake)?;
            let disc_vars = self.disc.bind(&mut g, false);
            Some(discriminate_frames(&mut g, rollout.horizon(&self.gen_cfg), &disc_vars, &self.disc_cfg)?)
        } else {
            None
        };

        let gamma = self.cfg.weights.gamma_at(it);
        let parts = generator_loss(&mut g, preds, &targets, fake_logits, &self.cfg.weights, gamma, mode)?;
        let loss_gen = check_finite(g.value(parts.total).item(), it)?;
        let grads = g.backward(parts.total)?;
        self.gen_opt.step(&mut self.gen, &grads, lr)?;
        self.iteration += 1;

        Ok(StepStats {
            iteration: it,
            lr,
            eta,
            loss_gen,
            loss_disc,
            reconstruction: parts.reconstruction.map_or(0.0, |v| g.value(v).item()),
            mse: g.value(parts.mse).item(),
            l1: g.value(parts.l1).item(),
            adversarial: parts.adversarial.map_or(0.0, |v| g.value(v).item()),
        })
    }

    /// Runs steps until `until` (exclusive) or the configured limit, taking
    /// batches in the deterministic order fixed by the seed. `on_step` sees
    /// each step's statistics after the update.
    pub fn run(
        &mut self,
        ds: &SequenceDataset,
        until: u64,
        mut on_step: impl FnMut(&mut Trainer, &StepStats) -> Result<()>,
    ) -> Result<()> {
        let end = until.min(self.cfg.total_iters(ds.len()));
        let mut batches = BatchIterator::starting_at(ds, self.cfg.batch_size, self.cfg.seed, self.iteration)?;
        while self.iteration < end {
            let batch = batches.batch_at(self.iteration)?;
            let stats = self.train_step(&batch.frames)?;
            on_step(self, &stats)?;
        }
        Ok(())
    }

    /// Rounds all live state to the precision a checkpoint stores, so that a
    /// run resumed from the checkpoint and the run that wrote it continue
    /// identically.
    pub fn snap_to_checkpoint_precision(&mut self) {
        for store in [&mut self.gen, &mut self.disc] {
            let names: Vec<String> = store.names().cloned().collect();
            for n in names {
                let t = store.get_mut(&n).expect("own name");
                *t = to_f32_precision(t);
            }
        }
        for opt in [&mut self.gen_opt, &mut self.disc_opt] {
            for t in opt.m.values_mut().chain(opt.v.values_mut()) {
                *t = to_f32_precision(t);
            }
        }
    }

    /// Snaps live state (see [`Self::snap_to_checkpoint_precision`]) and
    /// returns the checkpoint describing it.
    pub fn checkpoint(&mut self) -> Checkpoint {
        self.snap_to_checkpoint_precision();
        let gc = &self.gen_cfg;
        let dc = &self.disc_cfg;
        let meta = |v: &[usize]| Tensor::from_vec(v.iter().map(|&x| x as f64).collect());
        let mut entries = vec![
            (
                "meta.generator".to_string(),
                meta(&[
                    gc.num_layers,
                    gc.hidden_channels,
                    gc.tau,
                    gc.context_len,
                    gc.horizon_len,
                    gc.frame_channels,
                    gc.frame_height,
                    gc.frame_width,
                    gc.encoder_depth,
                ]),
            ),
            (
                "meta.discriminator".to_string(),
                meta(&[dc.num_layers, dc.hidden_channels, dc.tau, dc.encoder_depth]),
            ),
            (
                "meta.adam_steps".to_string(),
                meta(&[self.gen_opt.step as usize, self.disc_opt.step as usize]),
            ),
        ];
        for store in [&self.gen, &self.disc] {
            entries.extend(store.iter().map(|(k, v)| (k.clone(), v.clone())));
        }
        for (tag, opt) in [("gen", &self.gen_opt), ("disc", &self.disc_opt)] {
            entries.extend(opt.m.iter().map(|(k, v)| (format!("adam.{tag}.m/{k}"), v.clone())));
            entries.extend(opt.v.iter().map(|(k, v)| (format!("adam.{tag}.v/{k}"), v.clone())));
        }
        Checkpoint {
            iteration: self.iteration,
            rng_state: self.rng.state(),
            entries,
        }
    }

    /// Restores a trainer from `ckpt`. Network shapes come from the
    /// checkpoint; `cfg` supplies the optimisation settings.
    pub fn from_checkpoint(ckpt: &Checkpoint, cfg: TrainConfig) -> Result<Self> {
        let (gen_cfg, gen) = load_generator(ckpt)?;
        let dm = meta_values(ckpt, "meta.discriminator", 4)?;
        let disc_cfg = DiscriminatorConfig {
            num_layers: dm[0],
            hidden_channels: dm[1],
            tau: dm[2],
            encoder_depth: dm[3],
            frame_channels: gen_cfg.frame_channels,
            frame_height: gen_cfg.frame_height,
            frame_width: gen_cfg.frame_width,
        };
        let steps = meta_values(ckpt, "meta.adam_steps", 2)?;
        let mut t = Trainer::new(gen_cfg, disc_cfg, cfg)?;
        t.gen = gen;
        for name in t.disc.names().cloned().collect::<Vec<_>>() {
            let v = ckpt.get(&name)?;
            let slot = t.disc.get_mut(&name).expect("own name");
            v.same_shape(slot, "checkpoint")?;
            *slot = v.clone();
        }
        for (tag, opt, step) in [("gen", &mut t.gen_opt, steps[0]), ("disc", &mut t.disc_opt, steps[1])] {
            opt.step = step as u64;
            for (k, m) in opt.m.iter_mut() {
                *m = ckpt.get(&format!("adam.{tag}.m/{k}"))?.clone();
            }
            for (k, v) in opt.v.iter_mut() {
                *v = ckpt.get(&format!("adam.{tag}.v/{k}"))?.clone();
            }
        }
        t.iteration = ckpt.iteration;
        t.rng = TrainRng::from_state(ckpt.rng_state);
        Ok(t)
    }
}

fn meta_values(ckpt: &Checkpoint, name: &str, len: usize) -> Result<Vec<usize>> {
    let t = ckpt.get(name)?;
    if t.numel() != len || t.data().iter().any(|&v| v < 0.0 || v.fract() != 0.0) {
        return Err(Error::Malformed(format!("{name} should hold {len} nonnegative integers")));
    }
    Ok(t.data().iter().map(|&v| v as usize).collect())
}

/// Generator configuration and parameters stored in a checkpoint.
pub fn load_generator(ckpt: &Checkpoint) -> Result<(GeneratorConfig, ParamStore)> {
    let m = meta_values(ckpt, "meta.generator", 9)?;
    let cfg = GeneratorConfig {
        num_layers: m[0],
        hidden_channels: m[1],
        tau: m[2],
        context_len: m[3],
        horizon_len: m[4],
        frame_channels: m[5],
        frame_height: m[6],
        frame_width: m[7],
        encoder_depth: m[8],
    };
    cfg.validate().map_err(|e| Error::Malformed(format!("checkpoint generator config: {e}")))?;
    let mut store = cfg.init_params(&mut ChaCha8Rng::seed_from_u64(0));
    for name in store.names().cloned().collect::<Vec<_>>() {
        let v = ckpt.get(&name)?;
        let slot = store.get_mut(&name).expect("own name");
        v.same_shape(slot, "checkpoint")?;
        *slot = v.clone();
    }
    Ok((cfg, store))
}
