//! Pseudo-speech generator used as a hermetic stand-in for a speech corpus.
//!
//! Each utterance alternates voiced segments (band-limited harmonic source
//! with a gliding F0, shaped by three formant resonators) with short
//! noise-excited fricatives, under a syllable-rate amplitude envelope,
//! framed by leading and trailing silence. A faint white noise floor covers
//! the whole utterance, as in any real recording; digital silence would
//! put log-spectral features on their floor.

use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::audio_io::{Waveform, CANONICAL_RATE};
use crate::par;
use crate::rng::{self, Rng};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub min_secs: f64,
    pub max_secs: f64,
    pub f0_min: f64,
    pub f0_max: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            min_secs: 1.5,
            max_secs: 3.0,
            f0_min: 80.0,
            f0_max: 300.0,
        }
    }
}

const FS: f64 = CANONICAL_RATE as f64;

/// Two-pole resonator with unit gain at its centre frequency.
struct Resonator {
    b0: f64,
    a1: f64,
    a2: f64,
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn new(freq: f64, bandwidth: f64) -> Self {
        let r = (-PI * bandwidth / FS).exp();
        let theta = 2.0 * PI * freq / FS;
        let a1 = -2.0 * r * theta.cos();
        let a2 = r * r;
        // |1 + a1 e^{-iw} + a2 e^{-2iw}| at w = theta.
        let re = 1.0 + a1 * theta.cos() + a2 * (2.0 * theta).cos();
        let im = -a1 * theta.sin() - a2 * (2.0 * theta).sin();
        Self {
            b0: (re * re + im * im).sqrt(),
            a1,
            a2,
            y1: 0.0,
            y2: 0.0,
        }
    }

    fn tick(&mut self, x: f64) -> f64 {
        let y = self.b0 * x - self.a1 * self.y1 - self.a2 * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

fn raised_cosine_edges(seg: &mut [f64], edge: usize) {
    let n = seg.len();
    let edge = edge.min(n / 2);
    for i in 0..edge {
        let g = 0.5 - 0.5 * (PI * i as f64 / edge as f64).cos();
        seg[i] *= g;
        seg[n - 1 - i] *= g;
    }
}

fn peak_normalize(seg: &mut [f64], target: f64) {
    let peak = seg.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        seg.iter_mut().for_each(|v| *v *= target / peak);
    }
}

fn voiced_segment(len: usize, f0_base: f64, cfg: &SynthConfig, rng: &mut Rng) -> Vec<f64> {
    let f0_start = (f0_base * rng.random_range(0.85..1.15)).clamp(cfg.f0_min, cfg.f0_max);
    let f0_end = (f0_base * rng.random_range(0.8..1.2)).clamp(cfg.f0_min, cfg.f0_max);
    let vib_rate = rng.random_range(3.0..6.0);
    let vib_depth = rng.random_range(0.0..0.03);
    let formants = [
        (rng.random_range(300.0..800.0), rng.random_range(60.0..120.0)),
        (rng.random_range(900.0..2200.0), rng.random_range(80.0..150.0)),
        (rng.random_range(2300.0..3200.0), rng.random_range(100.0..200.0)),
    ];
    let mut filters: Vec<Resonator> = formants.iter().map(|&(f, b)| Resonator::new(f, b)).collect();
    let mut phase = 0.0f64;
    let mut out = Vec::with_capacity(len);
    for i in 0..len {
        let u = i as f64 / len.max(1) as f64;
        let f0 = ((f0_start + (f0_end - f0_start) * u) * (1.0 + vib_depth * (2.0 * PI * vib_rate * i as f64 / FS).sin()))
            .clamp(cfg.f0_min, cfg.f0_max);
        phase = (phase + 2.0 * PI * f0 / FS) % (2.0 * PI);
        let harmonics = (7000.0 / f0) as usize;
        let mut s = 0.0;
        for k in 1..=harmonics {
            s += (k as f64 * phase).sin() / k as f64;
        }
        let mut y = s;
        for f in &mut filters {
            y = f.tick(y);
        }
        // Mix in the raw source so low harmonics are always present.
        out.push(y + 0.3 * s);
    }
    out
}

fn fricative_segment(len: usize, rng: &mut Rng) -> Vec<f64> {
    let mut f = Resonator::new(rng.random_range(3000.0..5500.0), rng.random_range(800.0..1500.0));
    (0..len)
        .map(|_| {
            let e: f64 = StandardNormal.sample(rng);
            f.tick(e)
        })
        .collect()
}

/// One pseudo-speech utterance at 16 kHz with speech peak in [0.5, 0.9].
pub fn synth_utterance(cfg: &SynthConfig, rng: &mut Rng) -> Waveform {
    let total = (rng.random_range(cfg.min_secs..=cfg.max_secs) * FS) as usize;
    let lead = (rng.random_range(0.10..0.25) * FS) as usize;
    let trail = (rng.random_range(0.10..0.25) * FS) as usize;
    let speech_len = total.saturating_sub(lead + trail);
    let f0_base = rng.random_range((cfg.f0_min * 1.25)..(cfg.f0_max * 0.75));

    let mut speech = Vec::with_capacity(speech_len);
    let mut voiced_next = true;
    while speech.len() < speech_len {
        let remaining = speech_len - speech.len();
        let mut seg = if voiced_next {
            let len = ((rng.random_range(0.15..0.40) * FS) as usize).min(remaining);
            let mut s = voiced_segment(len, f0_base, cfg, rng);
            peak_normalize(&mut s, rng.random_range(0.6..1.0));
            s
        } else {
            let len = ((rng.random_range(0.04..0.10) * FS) as usize).min(remaining);
            let mut s = fricative_segment(len, rng);
            peak_normalize(&mut s, rng.random_range(0.1..0.3));
            s
        };
        raised_cosine_edges(&mut seg, (0.015 * FS) as usize);
        speech.extend(seg);
        voiced_next = !voiced_next;
    }
    // Syllable-rate amplitude modulation.
    let am_rate = rng.random_range(3.0..6.0);
    let am_phase = rng.random_range(0.0..2.0 * PI);
    for (i, v) in speech.iter_mut().enumerate() {
        *v *= 0.8 + 0.2 * (2.0 * PI * am_rate * i as f64 / FS + am_phase).sin();
    }
    peak_normalize(&mut speech, rng.random_range(0.5..0.9));

    let noise_std = rng.random_range(2e-4..5e-4);
    let mut samples = vec![0.0; lead];
    samples.extend(speech);
    samples.resize(lead + speech_len + trail, 0.0);
    let samples = samples
        .into_iter()
        .map(|v| {
            let e: f64 = StandardNormal.sample(rng);
            (v + noise_std * e) as f32
        })
        .collect();
    Waveform::new(samples, CANONICAL_RATE)
}

/// File name of utterance `i`.
pub fn utterance_name(i: usize) -> String {
    format!("utt_{i:05}.wav")
}

/// `n` utterances, each from its own stream derived from `seed`.
pub fn synth_corpus(n: usize, seed: u64, cfg: &SynthConfig) -> Vec<(String, Waveform)> {
    par::map_range(n, |i| {
        let mut r = rng::stream(seed, "corpus", &[i as u64]);
        (utterance_name(i), synth_utterance(cfg, &mut r))
    })
}
