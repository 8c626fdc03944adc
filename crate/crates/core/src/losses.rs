//! Least-squares adversarial objectives, the acoustic regression term and
//! the dB power loss, both as plain functions and as graph nodes.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{Stft, StftConfig, COL_LOG_F0, N_ACOUSTIC};
use crate::tensor_nn::{Graph, Tensor, Var};

/// Target scores: `a` for fake pairs, `b` for real pairs, `c` for the
/// generator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LsganTargets {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

pub const TARGETS: LsganTargets = LsganTargets {
    a: -1.0,
    b: 1.0,
    c: 0.0,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PowerLossConfig {
    pub alpha: f64,
    pub window_ms: f64,
    pub stride_ms: f64,
    pub fft_size: usize,
}

impl Default for PowerLossConfig {
    fn default() -> Self {
        let s = StftConfig::POWER_LOSS;
        Self {
            alpha: 1e-3,
            window_ms: s.window_ms,
            stride_ms: s.stride_ms,
            fft_size: s.fft_size,
        }
    }
}

impl PowerLossConfig {
    pub fn stft_config(&self) -> StftConfig {
        StftConfig {
            window_ms: self.window_ms,
            stride_ms: self.stride_ms,
            fft_size: self.fft_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("power loss alpha must be positive, got {}", self.alpha)));
        }
        self.stft_config().validate()
    }
}

fn mean_sq_to(scores: &[f64], target: f64) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    scores.iter().map(|s| (s - target).powi(2)).sum::<f64>() / scores.len() as f64
}

/// `(1/3) E(D(x, x~) - b)^2 + (1/3) E(D(G, x~) - a)^2 + (1/3) E(D(x, x~r) - a)^2`.
pub fn d_loss_baseline(real: &[f64], fake: &[f64], unaligned: &[f64]) -> f64 {
    (mean_sq_to(real, TARGETS.b) + mean_sq_to(fake, TARGETS.a) + mean_sq_to(unaligned, TARGETS.a)) / 3.0
}

/// `E(D(G, x~) - c)^2`.
pub fn g_loss_baseline(fake: &[f64]) -> f64 {
    mean_sq_to(fake, TARGETS.c)
}

/// Four equally weighted terms: real, acoustic regression, fake, unaligned.
pub fn d_loss_acoustic(real: &[f64], fake: &[f64], unaligned: &[f64], acoustic_term: f64) -> f64 {
    (mean_sq_to(real, TARGETS.b) + acoustic_term + mean_sq_to(fake, TARGETS.a) + mean_sq_to(unaligned, TARGETS.a)) / 4.0
}

/// `(1/2) adversarial + (1/2) acoustic + power`; `power_term` already
/// carries its weight.
pub fn g_loss_acoustic(fake: &[f64], acoustic_term: f64, power_term: f64) -> f64 {
    0.5 * mean_sq_to(fake, TARGETS.c) + 0.5 * acoustic_term + power_term
}

/// Entry weights for the acoustic regression of `T x 277` frames: all ones
/// except the log-F0 column, which counts only on voiced frames.
pub fn acoustic_mask(voiced: &[bool]) -> Vec<f64> {
    let mut m = vec![1.0; voiced.len() * N_ACOUSTIC];
    for (t, &v) in voiced.iter().enumerate() {
        if !v {
            m[t * N_ACOUSTIC + COL_LOG_F0] = 0.0;
        }
    }
    m
}

/// Masked mean squared error between predicted and target rows of 277
/// values; the mean runs over unmasked entries.
pub fn acoustic_loss(pred: &[f64], target: &[f64], voiced: &[bool]) -> Result<f64> {
    if pred.len() != target.len() || pred.len() != voiced.len() * N_ACOUSTIC {
        return Err(Error::Shape(format!(
            "acoustic loss on {} predictions, {} targets, {} frames",
            pred.len(),
            target.len(),
            voiced.len()
        )));
    }
    let mask = acoustic_mask(voiced);
    let n: f64 = mask.iter().sum();
    if n == 0.0 {
        return Ok(0.0);
    }
    Ok(pred
        .iter()
        .zip(target)
        .zip(&mask)
        .map(|((p, t), m)| m * (p - t).powi(2))
        .sum::<f64>()
        / n)
}

/// `alpha * mean((Phi(x_hat) - Phi(x))^2)` over all time-frequency cells.
pub fn power_loss(x_hat: &[f64], x: &[f64], cfg: &PowerLossConfig) -> Result<f64> {
    if x_hat.len() != x.len() {
        return Err(Error::Alignment(x_hat.len(), x.len()));
    }
    let stft = Stft::new(cfg.stft_config())?;
    let a = stft.magnitude_db(x_hat).magnitude_db;
    let b = stft.magnitude_db(x).magnitude_db;
    if a.is_empty() {
        return Ok(0.0);
    }
    Ok(cfg.alpha * a.iter().zip(&b).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / a.len() as f64)
}

/// Graph node for `mean((scores - target)^2)`.
pub fn score_term(g: &mut Graph, scores: Var, target: f64) -> Result<Var> {
    let shape = g.shape(scores).to_vec();
    g.mse(scores, Arc::new(Tensor::full(&shape, target)))
}

/// Graph form of [`acoustic_loss`] for a `[B, T, 277]` prediction.
pub fn acoustic_term(g: &mut Graph, pred: Var, target: Arc<Tensor>, voiced: &[bool]) -> Result<Var> {
    g.masked_mse(pred, target, Some(Arc::new(acoustic_mask(voiced))))
}

/// dB spectrogram targets for the power loss, one per batch item.
pub fn power_targets(stft: &Stft, clean: &[Vec<f64>]) -> Vec<Vec<f64>> {
    clean.iter().map(|x| stft.magnitude_db(x).magnitude_db).collect()
}

/// Loss terms of one discriminator update.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DTerms {
    pub real: f64,
    pub fake: f64,
    pub unaligned: f64,
    pub acoustic: f64,
    pub total: f64,
}

/// Loss terms of one generator update.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GTerms {
    pub adversarial: f64,
    pub acoustic: f64,
    pub power: f64,
    pub total: f64,
}
