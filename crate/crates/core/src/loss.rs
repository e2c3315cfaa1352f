//! Reconstruction and adversarial objectives.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub fn mse_loss(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    let d = g.sub(pred, target).map_err(|e| e.in_stage("mse_loss"))?;
    let sq = g.mul(d, d)?;
    Ok(g.mean(sq))
}

pub fn l1_loss(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    let d = g.sub(pred, target).map_err(|e| e.in_stage("l1_loss"))?;
    let a = g.abs(d);
    Ok(g.mean(a))
}

/// Mean BCE of `logits` against a constant target label.
pub fn bce_loss(g: &mut Graph, logits: Var, target: f64) -> Result<Var> {
    let t = Tensor::full(g.shape(logits), target);
    g.bce_with_logits(logits, &t)
}

/// `BCE(real, 1) + BCE(fake, 0)`.
pub fn discriminator_loss(g: &mut Graph, real_logits: Var, fake_logits: Var) -> Result<Var> {
    let r = bce_loss(g, real_logits, 1.0)?;
    let f = bce_loss(g, fake_logits, 0.0)?;
    g.add(r, f)
}

/// `BCE(fake, 1)`: the generator wants its frames labelled real.
pub fn adversarial_loss(g: &mut Graph, fake_logits: Var) -> Result<Var> {
    bce_loss(g, fake_logits, 1.0)
}

/// Mean of a per-frame loss over paired frame lists.
fn mean_over_frames(
    g: &mut Graph,
    preds: &[Var],
    targets: &[Var],
    f: fn(&mut Graph, Var, Var) -> Result<Var>,
) -> Result<Var> {
    if preds.is_empty() || preds.len() != targets.len() {
        return Err(Error::InvalidArgument(format!(
            "need matching non-empty frame lists, got {} and {}",
            preds.len(),
            targets.len()
        )));
    }
    let mut acc = f(g, preds[0], targets[0])?;
    for (&p, &t) in preds.iter().zip(targets).skip(1) {
        let l = f(g, p, t)?;
        acc = g.add(acc, l)?;
    }
    Ok(g.scale(acc, 1.0 / preds.len() as f64))
}

/// Which terms of the generator objective are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AblationMode {
    L1,
    Gan,
    GanL1,
    GanL1Mse,
}

impl AblationMode {
    pub const ALL: [AblationMode; 4] = [AblationMode::L1, AblationMode::Gan, AblationMode::GanL1, AblationMode::GanL1Mse];

    pub fn uses_adversary(self) -> bool {
        self != AblationMode::L1
    }

    pub fn uses_l1(self) -> bool {
        self != AblationMode::Gan
    }

    pub fn uses_mse(self) -> bool {
        self == AblationMode::GanL1Mse
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AblationMode::L1 => "l1",
            AblationMode::Gan => "gan",
            AblationMode::GanL1 => "gan_l1",
            AblationMode::GanL1Mse => "gan_l1_mse",
        }
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['+', '-'], "_").as_str() {
            "l1" => Ok(AblationMode::L1),
            "gan" => Ok(AblationMode::Gan),
            "gan_l1" => Ok(AblationMode::GanL1),
            "gan_l1_mse" => Ok(AblationMode::GanL1Mse),
            _ => Err(Error::InvalidArgument(format!(
                "unknown mode {s:?} (expected l1, gan, gan_l1, or gan_l1_mse)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub gamma_warmup_iters: u64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 0.1,
            gamma: 0.01,
            gamma_warmup_iters: 1000,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.alpha, self.beta, self.gamma].iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidArgument(format!("loss weights must be finite and nonnegative: {self:?}")));
        }
        Ok(())
    }

    /// Adversarial weight after `iteration` steps of linear warm-up from 0.
    pub fn gamma_at(&self, iteration: u64) -> f64 {
        if self.gamma_warmup_iters == 0 {
            self.gamma
        } else {
            self.gamma * (iteration as f64 / self.gamma_warmup_iters as f64).min(1.0)
        }
    }
}

/// Graph handles of the generator objective and its parts.
#[derive(Clone, Copy, Debug)]
pub struct GeneratorLoss {
    pub total: Var,
    /// `α·MSE + β·L1` restricted to the active terms.
    pub reconstruction: Option<Var>,
    pub mse: Var,
    pub l1: Var,
    pub adversarial: Option<Var>,
}

/// `α·MSE + β·L1 + γ·L_adv`, keeping only the terms `mode` selects. `gamma`
/// is the effective (already warmed-up) adversarial weight. Reconstruction
/// terms average over the paired frame lists.
pub fn generator_loss(
    g: &mut Graph,
    preds: &[Var],
    targets: &[Var],
    fake_logits: Option<Var>,
    weights: &LossWeights,
    gamma: f64,
    mode: AblationMode,
) -> Result<GeneratorLoss> {
    let mse = mean_over_frames(g, preds, targets, mse_loss)?;
    let l1 = mean_over_frames(g, preds, targets, l1_loss)?;
    let mut recon = None;
    if mode.uses_mse() {
        recon = Some(g.scale(mse, weights.alpha));
    }
    if mode.uses_l1() {
        let t = g.scale(l1, weights.beta);
        recon = Some(match recon {
            Some(r) => g.add(r, t)?,
            None => t,
        });
    }
    let adversarial = if mode.uses_adversary() {
        let logits = fake_logits.ok_or_else(|| Error::InvalidArgument(format!("mode {mode} needs discriminator logits")))?;
        Some(adversarial_loss(g, logits)?)
    } else {
        None
    };
    let total = match (recon, adversarial) {
        (Some(r), Some(a)) => {
            let a = g.scale(a, gamma);
            g.add(r, a)?
        }
        (Some(r), None) => r,
        (None, Some(a)) => g.scale(a, gamma),
        (None, None) => unreachable!("every mode has at least one term"),
    };
    Ok(GeneratorLoss {
        total,
        reconstruction: recon,
        mse,
        l1,
        adversarial,
    })
}
