//! Training losses and evaluation metrics.
//!
//! The training objective mixes a two-sided clipped SDR loss on the speech
//! estimate `y` and the implied noise estimate `m = x − y` with the speaker
//! cross-entropy of the utterance-level posterior:
//!
//! ```text
//! L     = L_SDR + α · CE(z, ẑ)
//! L_SDR = −½ ( clip_β[SDR(s, y)] + clip_β[SDR(n, m)] )
//! clip_β[v] = β · tanh(v / β)
//! ```

use std::f64::consts::LN_10;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// SI-SDR value reported for a perfect (error-free) estimate.
pub const SI_SDR_CAP_DB: f64 = 100.0;
/// SI-SDR value reported for an estimate orthogonal to the reference.
pub const SI_SDR_FLOOR_DB: f64 = -100.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the speaker cross-entropy term.
    pub alpha: f64,
    /// Saturation level of the clipped SDR terms.
    pub beta: f64,
    pub eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 1.0,
            beta: 20.0,
            eps: 1e-8,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !(self.beta > 0.0) || !(self.eps > 0.0) {
            return Err(Error::Config(format!("loss parameters must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// Scalar parts of one loss evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    /// `clip_β[SDR(s, y)]`
    pub sdr_speech: f64,
    /// `clip_β[SDR(n, m)]`
    pub sdr_noise: f64,
    pub cross_entropy: f64,
}

impl LossBreakdown {
    /// Recombines the parts with mixing weight `alpha`.
    pub fn recombine(&self, alpha: f64) -> f64 {
        -0.5 * (self.sdr_speech + self.sdr_noise) + alpha * self.cross_entropy
    }

    pub fn sdr_loss(&self) -> f64 {
        -0.5 * (self.sdr_speech + self.sdr_noise)
    }

    /// Element-wise mean of several breakdowns.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let mut acc = LossBreakdown::default();
        for b in items {
            acc.total += b.total;
            acc.sdr_speech += b.sdr_speech;
            acc.sdr_noise += b.sdr_noise;
            acc.cross_entropy += b.cross_entropy;
        }
        LossBreakdown {
            total: acc.total / n,
            sdr_speech: acc.sdr_speech / n,
            sdr_noise: acc.sdr_noise / n,
            cross_entropy: acc.cross_entropy / n,
        }
    }
}

fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_lengths(op: &'static str, a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape(op, &[&[a.len()], &[b.len()]]));
    }
    Ok(())
}

/// `10·log10(‖s‖² / (‖s − y‖² + ε))` with ε = 1e-8.
pub fn sdr(reference: &[f64], estimate: &[f64]) -> Result<f64> {
    sdr_with_eps(reference, estimate, LossConfig::default().eps)
}

fn sdr_with_eps(reference: &[f64], estimate: &[f64], eps: f64) -> Result<f64> {
    check_lengths("sdr", reference, estimate)?;
    let s = energy(reference);
    if s == 0.0 {
        return Err(Error::InvalidInput("SDR is undefined for an all-zero reference".into()));
    }
    let err: f64 = reference.iter().zip(estimate).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(10.0 * (s / (err + eps)).log10())
}

/// Soft clipping `β·tanh(x/β)`.
pub fn clip(x: f64, beta: f64) -> f64 {
    beta * (x / beta).tanh()
}

/// Scale-invariant SDR in dB, saturating at ±100 dB.
pub fn si_sdr(reference: &[f64], estimate: &[f64]) -> Result<f64> {
    check_lengths("si-sdr", reference, estimate)?;
    let s = energy(reference);
    if s == 0.0 {
        return Err(Error::InvalidInput("SI-SDR is undefined for an all-zero reference".into()));
    }
    let gain = dot(estimate, reference) / s;
    let target_energy = gain * gain * s;
    let residual: f64 = estimate
        .iter()
        .zip(reference)
        .map(|(y, r)| (y - gain * r).powi(2))
        .sum();
    if target_energy == 0.0 {
        return Ok(SI_SDR_FLOOR_DB);
    }
    if residual == 0.0 {
        return Ok(SI_SDR_CAP_DB);
    }
    Ok((10.0 * (target_energy / residual).log10()).clamp(SI_SDR_FLOOR_DB, SI_SDR_CAP_DB))
}

/// `−ln max(ẑ[label], ε)` for a posterior on the simplex.
pub fn cross_entropy(label: usize, posterior: &[f64]) -> Result<f64> {
    let p = posterior.get(label).ok_or_else(|| {
        Error::InvalidInput(format!("speaker label {label} out of range for {} classes", posterior.len()))
    })?;
    Ok(-p.max(LossConfig::default().eps).ln())
}

/// Loss terms computed without a tape, for evaluation.
pub fn multitask_loss(
    clean: &[f64],
    estimate: &[f64],
    mixture: &[f64],
    label: Option<(usize, &[f64])>,
    config: &LossConfig,
) -> Result<LossBreakdown> {
    check_lengths("multitask-loss", clean, estimate)?;
    check_lengths("multitask-loss", clean, mixture)?;
    let noise: Vec<f64> = mixture.iter().zip(clean).map(|(x, s)| x - s).collect();
    let noise_est: Vec<f64> = mixture.iter().zip(estimate).map(|(x, y)| x - y).collect();
    degenerate_check(clean, &noise)?;
    let sdr_speech = clip(sdr_with_eps(clean, estimate, config.eps)?, config.beta);
    let sdr_noise = clip(sdr_with_eps(&noise, &noise_est, config.eps)?, config.beta);
    let cross_entropy = match label {
        Some((l, post)) => cross_entropy(l, post)?,
        None => 0.0,
    };
    let mut b = LossBreakdown {
        total: 0.0,
        sdr_speech,
        sdr_noise,
        cross_entropy,
    };
    b.total = b.recombine(config.alpha);
    Ok(b)
}

fn degenerate_check(clean: &[f64], noise: &[f64]) -> Result<()> {
    if energy(clean) == 0.0 {
        return Err(Error::InvalidInput("SDR loss: clean speech reference s is all zero".into()));
    }
    if energy(noise) == 0.0 {
        return Err(Error::InvalidInput("SDR loss: noise reference n = x − s is all zero".into()));
    }
    Ok(())
}

/// Tape variables of the clipped SDR loss.
#[derive(Clone, Copy, Debug)]
pub struct SdrLossVars {
    pub loss: Var,
    pub speech: Var,
    pub noise: Var,
}

// clip_β[10·log10(‖r‖² / (‖r − e‖² + ε))] with `r` fixed.
fn clipped_sdr_on_tape(tape: &mut Tape, reference: &[f64], estimate: Var, cfg: &LossConfig) -> Result<Var> {
    let r = tape.constant(Tensor::vector(reference));
    let err = tape.sub(r, estimate)?;
    let err = tape.square(err);
    let err = tape.sum(err);
    let err = tape.add_scalar(err, cfg.eps);
    let log_err = tape.log(err);
    let db = 10.0 / LN_10;
    let value = tape.scale(log_err, -db);
    let value = tape.add_scalar(value, db * energy(reference).ln());
    let squashed = tape.scale(value, 1.0 / cfg.beta);
    let squashed = tape.tanh(squashed);
    Ok(tape.scale(squashed, cfg.beta))
}

/// Differentiable two-sided clipped SDR loss of the estimate `y` (a vector
/// on `tape`) given clean speech `s` and mixture `x`; the noise reference is
/// `n = x − s`.
pub fn sdr_loss_on_tape(tape: &mut Tape, clean: &[f64], mixture: &[f64], estimate: Var, cfg: &LossConfig) -> Result<SdrLossVars> {
    check_lengths("sdr-loss", clean, mixture)?;
    if tape.shape(estimate) != [clean.len()] {
        return Err(Error::shape("sdr-loss", &[&[clean.len()], tape.shape(estimate)]));
    }
    let noise: Vec<f64> = mixture.iter().zip(clean).map(|(x, s)| x - s).collect();
    degenerate_check(clean, &noise)?;
    let speech = clipped_sdr_on_tape(tape, clean, estimate, cfg)?;
    let x = tape.constant(Tensor::vector(mixture));
    let noise_est = tape.sub(x, estimate)?;
    let noise_term = clipped_sdr_on_tape(tape, &noise, noise_est, cfg)?;
    let both = tape.add(speech, noise_term)?;
    let loss = tape.scale(both, -0.5);
    Ok(SdrLossVars {
        loss,
        speech,
        noise: noise_term,
    })
}

/// Differentiable `−ln max(ẑ[label], ε)` for a posterior vector on `tape`.
pub fn cross_entropy_on_tape(tape: &mut Tape, posterior: Var, label: usize, cfg: &LossConfig) -> Result<Var> {
    let classes = tape.value(posterior).len();
    if label >= classes {
        return Err(Error::InvalidInput(format!(
            "speaker label {label} out of range for {classes} classes"
        )));
    }
    let flat = tape.reshape(posterior, &[classes])?;
    let p = tape.slice(flat, 0, label, 1)?;
    let p = tape.clamp_min(p, cfg.eps);
    let lp = tape.log(p);
    Ok(tape.neg(lp))
}

/// Full objective on a tape; `speaker` carries the posterior variable and the
/// true label when the cross-entropy term is active.
pub fn multitask_loss_on_tape(
    tape: &mut Tape,
    clean: &[f64],
    mixture: &[f64],
    estimate: Var,
    speaker: Option<(Var, usize)>,
    cfg: &LossConfig,
) -> Result<(Var, LossBreakdown)> {
    let sdr = sdr_loss_on_tape(tape, clean, mixture, estimate, cfg)?;
    let (total, ce) = match speaker {
        Some((posterior, label)) => {
            let ce = cross_entropy_on_tape(tape, posterior, label, cfg)?;
            let weighted = tape.scale(ce, cfg.alpha);
            (tape.add(sdr.loss, weighted)?, tape.value(ce).item())
        }
        None => (sdr.loss, 0.0),
    };
    let breakdown = LossBreakdown {
        total: tape.value(total).item(),
        sdr_speech: tape.value(sdr.speech).item(),
        sdr_noise: tape.value(sdr.noise).item(),
        cross_entropy: ce,
    };
    Ok((total, breakdown))
}
