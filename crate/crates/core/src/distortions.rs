//! The four aggressive distortions and their random online composition.
//!
//! * whispering: LPC analysis with noise-excited resynthesis (all frames unvoiced)
//! * bandwidth reduction: anti-aliased decimation and interpolation back to 16 kHz
//! * chunk removal: zeroing random chunks inside speech regions
//! * clipping: clamping at a fraction of the utterance peak
//!
//! Every transform preserves the signal length so that clean targets stay
//! sample-aligned with their distorted inputs.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::audio_io::{default_speech_regions, SpeechRegions, Waveform, CANONICAL_RATE};
use crate::error::{Error, Result};
use crate::{par, rng};

pub const LPC_ORDER: usize = 18;
pub const LPC_FRAME: usize = 400;
pub const LPC_HOP: usize = 160;
/// Shortest removed chunk (10 ms).
pub const MIN_CHUNK: usize = 160;

/// Activation probability and severity menus of the online corruption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistortionConfig {
    pub activation_p: f64,
    pub clip_factors: Vec<f32>,
    pub resample_factors: Vec<usize>,
    pub max_chunks: usize,
    /// (mean, std) in seconds; one is picked per chunk by a fair coin.
    pub chunk_length_distributions: Vec<(f64, f64)>,
}

impl Default for DistortionConfig {
    fn default() -> Self {
        Self {
            activation_p: 0.4,
            clip_factors: vec![0.3, 0.4, 0.5],
            resample_factors: vec![2, 4, 8],
            max_chunks: 5,
            chunk_length_distributions: vec![(0.05, 0.025), (0.1, 0.05)],
        }
    }
}

impl DistortionConfig {
    pub fn with_p(p: f64) -> Self {
        Self {
            activation_p: p,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.activation_p) {
            return Err(Error::Config(format!(
                "activation_p {} outside [0, 1]",
                self.activation_p
            )));
        }
        if self.clip_factors.is_empty() || self.clip_factors.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
            return Err(Error::Config("clip factors must lie in (0, 1]".into()));
        }
        if self.resample_factors.is_empty() {
            return Err(Error::Config("resample factor menu is empty".into()));
        }
        for &f in &self.resample_factors {
            check_bandwidth_factor(f)?;
        }
        if self.max_chunks < 1 {
            return Err(Error::Config("max_chunks must be >= 1".into()));
        }
        if self.chunk_length_distributions.is_empty()
            || self
                .chunk_length_distributions
                .iter()
                .any(|&(m, s)| !(m > 0.0 && s >= 0.0))
        {
            return Err(Error::Config("invalid chunk length distributions".into()));
        }
        Ok(())
    }
}

/// One transform as applied, with everything needed to replay it exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "transform", rename_all = "snake_case")]
pub enum AppliedTransform {
    Whisper { seed: u64 },
    Bandwidth { factor: usize },
    ChunkRemoval { chunks: Vec<(usize, usize)> },
    Clip { factor: f32 },
}

impl AppliedTransform {
    pub fn id(&self) -> TransformId {
        match self {
            AppliedTransform::Whisper { .. } => TransformId::Whisper,
            AppliedTransform::Bandwidth { .. } => TransformId::Bandwidth,
            AppliedTransform::ChunkRemoval { .. } => TransformId::ChunkRemoval,
            AppliedTransform::Clip { .. } => TransformId::Clip,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformId {
    Whisper,
    Bandwidth,
    ChunkRemoval,
    Clip,
}

/// Application order of simultaneously active transforms.
pub const ORDER: [TransformId; 4] = [
    TransformId::Whisper,
    TransformId::Bandwidth,
    TransformId::ChunkRemoval,
    TransformId::Clip,
];

/// Transforms applied to one utterance, in application order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AppliedDistortions {
    pub transforms: Vec<AppliedTransform>,
}

impl AppliedDistortions {
    pub fn len(&self) -> usize {
        self.transforms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transforms.is_empty()
    }

    pub fn contains(&self, id: TransformId) -> bool {
        self.transforms.iter().any(|t| t.id() == id)
    }
}

// ---------------------------------------------------------------------------
// Filters
// ---------------------------------------------------------------------------

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..64 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < 1e-17 * sum {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Kaiser-windowed sinc low-pass with unit DC gain. `cutoff` and `transition`
/// are in cycles per sample; the stop band starts at `cutoff + transition / 2`.
pub fn kaiser_lowpass(cutoff: f64, transition: f64, atten_db: f64) -> Vec<f64> {
    let beta = if atten_db > 50.0 {
        0.1102 * (atten_db - 8.7)
    } else if atten_db >= 21.0 {
        0.5842 * (atten_db - 21.0).powf(0.4) + 0.07886 * (atten_db - 21.0)
    } else {
        0.0
    };
    let dw = 2.0 * std::f64::consts::PI * transition;
    let mut n = ((atten_db - 7.95) / (2.285 * dw)).ceil() as usize + 1;
    if n % 2 == 0 {
        n += 1;
    }
    let mid = (n / 2) as f64;
    let i0b = bessel_i0(beta);
    let mut h: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 - mid;
            let r = t / mid;
            2.0 * cutoff * sinc(2.0 * cutoff * t) * bessel_i0(beta * (1.0 - r * r).max(0.0).sqrt()) / i0b
        })
        .collect();
    let sum: f64 = h.iter().sum();
    h.iter_mut().for_each(|v| *v /= sum);
    h
}

pub fn check_bandwidth_factor(factor: usize) -> Result<()> {
    if !matches!(factor, 2 | 4 | 8) {
        return Err(Error::Config(format!(
            "bandwidth reduction factor {factor} not in {{2, 4, 8}}"
        )));
    }
    Ok(())
}

/// Decimate by `factor` behind an anti-aliasing filter, then interpolate back
/// to the original rate. Content above `8000 / factor` Hz is removed. The
/// output is scaled down if its peak would exceed 1.
pub fn reduce_bandwidth(w: &Waveform, factor: usize) -> Result<Waveform> {
    check_bandwidth_factor(factor)?;
    let x = w.to_f64();
    let n = x.len();
    let nyq_new = 0.5 / factor as f64;
    // Pass band to 80% of the new Nyquist, stop band from the new Nyquist on.
    let h = kaiser_lowpass(0.9 * nyq_new, 0.2 * nyq_new, 70.0);
    let c = (h.len() / 2) as isize;

    let m = n.div_ceil(factor);
    let low: Vec<f64> = (0..m)
        .map(|j| {
            let center = (j * factor) as isize;
            h.iter()
                .enumerate()
                .map(|(k, &hk)| {
                    let idx = center + c - k as isize;
                    if idx >= 0 && (idx as usize) < n {
                        hk * x[idx as usize]
                    } else {
                        0.0
                    }
                })
                .sum()
        })
        .collect();

    // Zero-stuffed upsampling: out[i] = factor * sum_j low[j] h[i - j*factor + c].
    let out: Vec<f64> = (0..n)
        .map(|i| {
            let lo = (i as isize - c).max(0) as usize;
            let hi = (i as isize + c).min(((m - 1) * factor) as isize);
            let mut acc = 0.0;
            let mut j = lo.div_ceil(factor);
            while (j * factor) as isize <= hi {
                let k = (i as isize - (j * factor) as isize + c) as usize;
                acc += low[j] * h[k];
                j += 1;
            }
            acc * factor as f64
        })
        .collect();
    // Filter ringing can push a near-full-scale input past 1; scale down
    // only then, as whisper does, so the result stays writable as PCM.
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let g = if peak > 1.0 { 1.0 / peak } else { 1.0 };
    Ok(Waveform::new(out.iter().map(|v| (v * g) as f32).collect(), w.sample_rate))
}

/// Windowed-sinc sample-rate conversion.
pub fn resample(w: &Waveform, target_rate: u32) -> Result<Waveform> {
    if target_rate == 0 || w.sample_rate == 0 {
        return Err(Error::Config("sample rates must be positive".into()));
    }
    if target_rate == w.sample_rate {
        return Ok(w.clone());
    }
    let ratio = w.sample_rate as f64 / target_rate as f64;
    let scale = (1.0 / ratio).min(1.0);
    let cutoff = 0.5 * scale * 0.95;
    let half_width = (16.0 / scale).ceil() as isize;
    let out_len = ((w.len() as f64) / ratio).round() as usize;
    let x = &w.samples;
    let samples = (0..out_len)
        .map(|m| {
            let pos = m as f64 * ratio;
            let base = pos.floor() as isize;
            let mut acc = 0.0;
            for i in base - half_width..=base + half_width {
                if i < 0 || i as usize >= x.len() {
                    continue;
                }
                let t = pos - i as f64;
                let win = 0.5 + 0.5 * (std::f64::consts::PI * t / (half_width as f64 + 1.0)).cos();
                acc += x[i as usize] as f64 * 2.0 * cutoff * sinc(2.0 * cutoff * t) * win;
            }
            acc as f32
        })
        .collect();
    Ok(Waveform::new(samples, target_rate))
}

// ---------------------------------------------------------------------------
// Whispering
// ---------------------------------------------------------------------------

/// LPC coefficients `a[1..=order]` of `A(z) = 1 + sum a_i z^-i` and the final
/// prediction error, by Levinson-Durbin recursion.
pub fn levinson(r: &[f64], order: usize) -> (Vec<f64>, f64) {
    let mut a = vec![0.0; order + 1];
    a[0] = 1.0;
    let mut err = r[0];
    if err <= 0.0 {
        return (vec![0.0; order], 0.0);
    }
    for i in 1..=order {
        let acc: f64 = (1..i).map(|j| a[j] * r[i - j]).sum::<f64>() + r[i];
        let k = -acc / err;
        let prev = a.clone();
        for j in 1..i {
            a[j] = prev[j] + k * prev[i - j];
        }
        a[i] = k;
        err *= 1.0 - k * k;
        if err <= 0.0 {
            err = 0.0;
            break;
        }
    }
    (a[1..].to_vec(), err)
}

/// Resynthesize with noise excitation, removing all voicing.
///
/// Order-18 LPC on 25 ms Hann frames every 10 ms; the excitation of each frame
/// is white noise scaled to the frame's prediction-error energy and the
/// all-pole synthesis filter runs continuously across frames.
pub fn whisper<R: Rng + ?Sized>(w: &Waveform, rng: &mut R) -> Waveform {
    let x = w.to_f64();
    let n = x.len();
    if n == 0 {
        return w.clone();
    }
    let window = crate::features::hann(LPC_FRAME);
    let win_energy: f64 = window.iter().map(|v| v * v).sum();
    // Gaussian lag window (~120 Hz) widens formant peaks so no harmonic survives.
    let lag_bw = 2.0 * std::f64::consts::PI * 120.0 / CANONICAL_RATE as f64;
    let lag_window: Vec<f64> = (0..=LPC_ORDER)
        .map(|i| (-0.5 * (lag_bw * i as f64).powi(2)).exp())
        .collect();

    let n_frames = n.div_ceil(LPC_HOP);
    let mut frame = vec![0.0; LPC_FRAME];
    let frames: Vec<(Vec<f64>, f64)> = (0..n_frames)
        .map(|t| {
            for (k, v) in frame.iter_mut().enumerate() {
                let idx = (t * LPC_HOP + k) as isize - (LPC_FRAME / 2) as isize;
                *v = if idx >= 0 && (idx as usize) < n {
                    x[idx as usize] * window[k]
                } else {
                    0.0
                };
            }
            let mut r: Vec<f64> = (0..=LPC_ORDER)
                .map(|lag| (0..LPC_FRAME - lag).map(|i| frame[i] * frame[i + lag]).sum::<f64>() * lag_window[lag])
                .collect();
            r[0] *= 1.0 + 1e-6;
            let (a, err) = levinson(&r, LPC_ORDER);
            (a, (err / win_energy).max(0.0).sqrt())
        })
        .collect();

    let mut y = vec![0.0f64; n];
    for i in 0..n {
        let t = ((i + LPC_HOP / 2) / LPC_HOP).min(n_frames - 1);
        let (a, gain) = &frames[t];
        let e: f64 = StandardNormal.sample(rng);
        let mut v = gain * e;
        for (k, ak) in a.iter().enumerate() {
            if i > k {
                v -= ak * y[i - k - 1];
            }
        }
        y[i] = v;
    }
    let peak = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let g = if peak > 1.0 { 1.0 / peak } else { 1.0 };
    Waveform::new(y.iter().map(|v| (v * g) as f32).collect(), w.sample_rate)
}

// ---------------------------------------------------------------------------
// Chunk removal and clipping
// ---------------------------------------------------------------------------

/// Draw the `(start, len)` chunks to zero: `k ~ U{1..max_chunks}`, a uniform
/// region and start per chunk, and a length from one of the Gaussians picked
/// by a fair coin, clamped to [10 ms, region end].
pub fn plan_chunks<R: Rng + ?Sized>(
    regions: &SpeechRegions,
    cfg: &DistortionConfig,
    sample_rate: u32,
    rng: &mut R,
) -> Vec<(usize, usize)> {
    if regions.is_empty() {
        return Vec::new();
    }
    let k = rng.random_range(1..=cfg.max_chunks);
    (0..k)
        .map(|_| {
            let (s, e) = regions.intervals[rng.random_range(0..regions.intervals.len())];
            let start = rng.random_range(s..e);
            let (mean, std) = cfg.chunk_length_distributions[rng.random_range(0..cfg.chunk_length_distributions.len())];
            let secs: f64 = Normal::new(mean, std).map(|d| d.sample(rng)).unwrap_or(mean);
            let len = (secs * sample_rate as f64).round().max(MIN_CHUNK as f64) as usize;
            (start, len.min(e - start))
        })
        .collect()
}

pub fn zero_chunks(w: &Waveform, chunks: &[(usize, usize)]) -> Waveform {
    let mut out = w.clone();
    for &(s, len) in chunks {
        let e = (s + len).min(out.len());
        out.samples[s.min(e)..e].iter_mut().for_each(|v| *v = 0.0);
    }
    out
}

/// Zero random chunks inside the given speech regions. Samples outside the
/// chunks are untouched; no regions means no change.
pub fn remove_chunks<R: Rng + ?Sized>(
    w: &Waveform,
    regions: &SpeechRegions,
    cfg: &DistortionConfig,
    rng: &mut R,
) -> (Waveform, Vec<(usize, usize)>) {
    let chunks = plan_chunks(regions, cfg, w.sample_rate, rng);
    (zero_chunks(w, &chunks), chunks)
}

/// Clamp at `factor` times the absolute peak.
pub fn clip(w: &Waveform, factor: f32) -> Waveform {
    let tau = factor * w.peak();
    Waveform::new(
        w.samples.iter().map(|&s| s.clamp(-tau, tau)).collect(),
        w.sample_rate,
    )
}

// ---------------------------------------------------------------------------
// Composition
// ---------------------------------------------------------------------------

/// Activate each transform independently with probability `p`, draw its
/// severity uniformly from the menu and apply the active ones in [`ORDER`].
pub fn compose_random<R: Rng + ?Sized>(
    w: &Waveform,
    cfg: &DistortionConfig,
    rng: &mut R,
) -> (Waveform, AppliedDistortions) {
    let active: [bool; 4] = std::array::from_fn(|_| rng.random::<f64>() < cfg.activation_p);
    let regions = if active[2] {
        default_speech_regions(w)
    } else {
        SpeechRegions::default()
    };
    let mut out = w.clone();
    let mut applied = AppliedDistortions::default();
    for (id, on) in ORDER.iter().zip(active) {
        if !on {
            continue;
        }
        let t = match id {
            TransformId::Whisper => AppliedTransform::Whisper { seed: rng.random() },
            TransformId::Bandwidth => AppliedTransform::Bandwidth {
                factor: cfg.resample_factors[rng.random_range(0..cfg.resample_factors.len())],
            },
            TransformId::ChunkRemoval => {
                let mut sub = rng::from_seed(rng.random());
                AppliedTransform::ChunkRemoval {
                    chunks: plan_chunks(&regions, cfg, w.sample_rate, &mut sub),
                }
            }
            TransformId::Clip => AppliedTransform::Clip {
                factor: cfg.clip_factors[rng.random_range(0..cfg.clip_factors.len())],
            },
        };
        out = apply(&out, &t);
        applied.transforms.push(t);
    }
    (out, applied)
}

/// Apply one recorded transform.
pub fn apply(w: &Waveform, t: &AppliedTransform) -> Waveform {
    match t {
        AppliedTransform::Whisper { seed } => whisper(w, &mut rng::from_seed(*seed)),
        AppliedTransform::Bandwidth { factor } => {
            reduce_bandwidth(w, *factor).expect("factor validated when drawn")
        }
        AppliedTransform::ChunkRemoval { chunks } => zero_chunks(w, chunks),
        AppliedTransform::Clip { factor } => clip(w, *factor),
    }
}

/// Re-apply a recorded composition; bit-identical to the original run.
pub fn replay(w: &Waveform, applied: &AppliedDistortions) -> Result<Waveform> {
    let mut out = w.clone();
    for t in &applied.transforms {
        if let AppliedTransform::Bandwidth { factor } = t {
            check_bandwidth_factor(*factor)?;
        }
        out = apply(&out, t);
    }
    Ok(out)
}

const HISTOGRAM_BLOCK: usize = 4096;

/// Relative frequency of 0..=4 simultaneously active transforms over `n`
/// independent activation draws.
pub fn activation_histogram<R: Rng + ?Sized>(n: usize, p: f64, rng: &mut R) -> [f64; 5] {
    assert!(n >= 1, "need at least one draw");
    let base: u64 = rng.random();
    let blocks = n.div_ceil(HISTOGRAM_BLOCK);
    let counts = par::map_range(blocks, |b| {
        let mut r = rng::stream(base, "activation-histogram", &[b as u64]);
        let len = HISTOGRAM_BLOCK.min(n - b * HISTOGRAM_BLOCK);
        let mut c = [0u64; 5];
        for _ in 0..len {
            let k = (0..4).filter(|_| r.random::<f64>() < p).count();
            c[k] += 1;
        }
        c
    });
    let mut total = [0u64; 5];
    for c in counts {
        for k in 0..5 {
            total[k] += c[k];
        }
    }
    total.map(|c| c as f64 / n as f64)
}

/// Probability mass of Binomial(4, p).
pub fn binomial4_pmf(p: f64) -> [f64; 5] {
    let choose = [1.0, 4.0, 6.0, 4.0, 1.0];
    std::array::from_fn(|k| choose[k] * p.powi(k as i32) * (1.0 - p).powi(4 - k as i32))
}
