//! Acoustic features: the 277-dimensional per-frame target used by the
//! discriminator's regression branch, the dB spectrogram used by the power
//! loss, MFCCs and an autocorrelation F0 estimator.
//!
//! Frame layout of [`AcousticMatrix`] rows:
//!
//! | columns   | content                                   |
//! |-----------|-------------------------------------------|
//! | 0..257    | log-power spectrum (dB), 512-point FFT    |
//! | 257..273  | MFCC 1..=16 (c0 excluded)                 |
//! | 273       | ln F0 (0 when unvoiced)                   |
//! | 274       | voiced flag                               |
//! | 275       | ln frame RMS                              |
//! | 276       | zero-crossing rate                        |

use std::io::{Read, Write};
use std::path::Path;
use std::sync::{Arc, Mutex, OnceLock};

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::audio_io::{Waveform, CANONICAL_RATE};
use crate::error::{Error, Result};

pub const N_LPS: usize = 257;
pub const N_MFCC: usize = 16;
pub const N_ACOUSTIC: usize = N_LPS + N_MFCC + 4;
pub const COL_MFCC: usize = N_LPS;
pub const COL_LOG_F0: usize = N_LPS + N_MFCC;
pub const COL_VOICED: usize = COL_LOG_F0 + 1;
pub const COL_ENERGY: usize = COL_LOG_F0 + 2;
pub const COL_ZCR: usize = COL_LOG_F0 + 3;

/// Floor applied before every logarithm.
pub const LOG_FLOOR: f64 = 1e-10;

pub const LPS_FFT: usize = 512;
pub const FRAME_HOP: usize = 256;
pub const FRAME_STRIDE_MS: u32 = 16;
pub const N_MEL: usize = 40;
/// Window for F0 analysis: two periods of the 50 Hz lower bound.
pub const F0_WINDOW: usize = 640;
pub const F0_MIN_HZ: f64 = 50.0;
pub const F0_MAX_HZ: f64 = 400.0;
pub const VOICING_THRESHOLD: f64 = 0.3;
/// Frames quieter than this RMS (-60 dBFS) are never voiced.
pub const VOICING_RMS_FLOOR: f64 = 1e-3;

// ---------------------------------------------------------------------------
// FFT plumbing
// ---------------------------------------------------------------------------

fn planner() -> &'static Mutex<FftPlanner<f64>> {
    static PLANNER: OnceLock<Mutex<FftPlanner<f64>>> = OnceLock::new();
    PLANNER.get_or_init(|| Mutex::new(FftPlanner::new()))
}

pub(crate) fn fft_forward(n: usize) -> Arc<dyn Fft<f64>> {
    planner().lock().unwrap().plan_fft_forward(n)
}

pub(crate) fn fft_inverse(n: usize) -> Arc<dyn Fft<f64>> {
    planner().lock().unwrap().plan_fft_inverse(n)
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Reflect an index into `0..len` (mirror without repeating the edge sample).
pub fn reflect_index(j: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut m = j.rem_euclid(period);
    if m >= len as isize {
        m = period - m;
    }
    m as usize
}

/// Index of the `n`-th sample of frame `t`, for frames centred on `t * hop`
/// with reflection at the borders.
#[inline]
fn frame_index(t: usize, n: usize, hop: usize, win: usize, len: usize) -> usize {
    reflect_index((t * hop + n) as isize - (win / 2) as isize, len)
}

// ---------------------------------------------------------------------------
// dB spectrogram
// ---------------------------------------------------------------------------

/// Parameters of a dB-magnitude STFT.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StftConfig {
    pub window_ms: f64,
    pub stride_ms: f64,
    pub fft_size: usize,
}

impl StftConfig {
    /// 20 ms windows, 10 ms stride, 2048-point FFT.
    pub const POWER_LOSS: StftConfig = StftConfig {
        window_ms: 20.0,
        stride_ms: 10.0,
        fft_size: 2048,
    };

    pub fn window_samples(&self) -> usize {
        (self.window_ms * CANONICAL_RATE as f64 / 1000.0).round() as usize
    }

    pub fn stride_samples(&self) -> usize {
        (self.stride_ms * CANONICAL_RATE as f64 / 1000.0).round() as usize
    }

    pub fn n_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn n_frames(&self, len: usize) -> usize {
        len.div_ceil(self.stride_samples())
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride_ms <= 0.0 || self.window_ms < self.stride_ms {
            return Err(Error::Config(format!(
                "window {} ms must be >= stride {} ms > 0",
                self.window_ms, self.stride_ms
            )));
        }
        if self.fft_size < self.window_samples() {
            return Err(Error::Config(format!(
                "fft size {} shorter than window of {} samples",
                self.fft_size,
                self.window_samples()
            )));
        }
        Ok(())
    }
}

/// Frame-major dB magnitudes: `n_frames` rows of `n_bins` values.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrogramDb {
    pub n_frames: usize,
    pub n_bins: usize,
    pub magnitude_db: Vec<f64>,
}

impl SpectrogramDb {
    pub fn frame(&self, t: usize) -> &[f64] {
        &self.magnitude_db[t * self.n_bins..(t + 1) * self.n_bins]
    }
}

/// Reusable STFT with its window and FFT plans.
pub struct Stft {
    cfg: StftConfig,
    window: Vec<f64>,
    fwd: Arc<dyn Fft<f64>>,
}

/// Forward state kept for the backward pass of the dB spectrogram.
pub struct StftCache {
    spectra: Vec<Complex<f64>>,
}

impl Stft {
    pub fn new(cfg: StftConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            window: hann(cfg.window_samples()),
            fwd: fft_forward(cfg.fft_size),
            cfg,
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.cfg
    }

    /// One-sided complex spectra of every frame, frame-major.
    fn spectra(&self, x: &[f64]) -> Vec<Complex<f64>> {
        let (n_fft, hop, win) = (self.cfg.fft_size, self.cfg.stride_samples(), self.window.len());
        let frames = self.cfg.n_frames(x.len());
        let bins = self.cfg.n_bins();
        let mut out = Vec::with_capacity(frames * bins);
        let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
        for t in 0..frames {
            buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
            for n in 0..win {
                buf[n].re = x[frame_index(t, n, hop, win, x.len())] * self.window[n];
            }
            self.fwd.process(&mut buf);
            out.extend_from_slice(&buf[..bins]);
        }
        out
    }

    pub fn magnitude_db(&self, x: &[f64]) -> SpectrogramDb {
        self.magnitude_db_cached(x).0
    }

    pub fn magnitude_db_cached(&self, x: &[f64]) -> (SpectrogramDb, StftCache) {
        let spectra = if x.is_empty() { Vec::new() } else { self.spectra(x) };
        let magnitude_db = spectra
            .iter()
            .map(|c| 20.0 * c.norm().max(LOG_FLOOR).log10())
            .collect();
        let n_bins = self.cfg.n_bins();
        (
            SpectrogramDb {
                n_frames: spectra.len() / n_bins,
                n_bins,
                magnitude_db,
            },
            StftCache { spectra },
        )
    }

    /// Gradient with respect to the input signal given the gradient with
    /// respect to every dB cell. Cells at the floor carry no gradient.
    pub fn backward_db(&self, cache: &StftCache, grad_db: &[f64], len: usize) -> Vec<f64> {
        let (n_fft, hop, win) = (self.cfg.fft_size, self.cfg.stride_samples(), self.window.len());
        let bins = self.cfg.n_bins();
        let frames = cache.spectra.len() / bins;
        let mut gx = vec![0.0; len];
        let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
        let db_scale = 20.0 / std::f64::consts::LN_10;
        for t in 0..frames {
            buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
            for k in 0..bins {
                let c = cache.spectra[t * bins + k];
                let mag = c.norm();
                if mag <= LOG_FLOOR {
                    continue;
                }
                // d dB / d|X| = 20 / (ln 10 |X|); d|X| / dy_n = Re(conj(X) e^{-i w n}) / |X|.
                let a = grad_db[t * bins + k] * db_scale / (mag * mag);
                buf[k] = c.conj() * a;
            }
            self.fwd.process(&mut buf);
            for n in 0..win {
                gx[frame_index(t, n, hop, win, len)] += buf[n].re * self.window[n];
            }
        }
        gx
    }
}

/// dB-magnitude STFT of a canonical-rate waveform.
pub fn stft_magnitude_db(w: &Waveform, cfg: StftConfig) -> Result<SpectrogramDb> {
    if w.sample_rate != CANONICAL_RATE {
        return Err(Error::Config(format!(
            "expected {CANONICAL_RATE} Hz input, got {}",
            w.sample_rate
        )));
    }
    Ok(Stft::new(cfg)?.magnitude_db(&w.to_f64()))
}

// ---------------------------------------------------------------------------
// MFCC
// ---------------------------------------------------------------------------

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filterbank (`n_mel` x `n_fft/2+1`) spanning 0 Hz to Nyquist.
pub fn mel_filterbank(n_mel: usize, n_fft: usize, sample_rate: f64) -> Vec<Vec<f64>> {
    let bins = n_fft / 2 + 1;
    let top = hz_to_mel(sample_rate / 2.0);
    let edges: Vec<f64> = (0..n_mel + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_mel + 1) as f64))
        .collect();
    (0..n_mel)
        .map(|m| {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..bins)
                .map(|k| {
                    let f = k as f64 * sample_rate / n_fft as f64;
                    if f > lo && f < mid {
                        (f - lo) / (mid - lo)
                    } else if f >= mid && f < hi {
                        (hi - f) / (hi - mid)
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect()
}

fn lps_filterbank() -> &'static Vec<Vec<f64>> {
    static FB: OnceLock<Vec<Vec<f64>>> = OnceLock::new();
    FB.get_or_init(|| mel_filterbank(N_MEL, LPS_FFT, CANONICAL_RATE as f64))
}

/// Orthonormal DCT-II.
pub fn dct_ii_ortho(x: &[f64]) -> Vec<f64> {
    let m = x.len() as f64;
    (0..x.len())
        .map(|k| {
            let s = if k == 0 { (1.0 / m).sqrt() } else { (2.0 / m).sqrt() };
            s * x
                .iter()
                .enumerate()
                .map(|(i, &v)| v * (std::f64::consts::PI * k as f64 * (i as f64 + 0.5) / m).cos())
                .sum::<f64>()
        })
        .collect()
}

/// Cepstral coefficients 1..=16 of a natural-log mel spectrum.
pub fn mfcc_from_log_mel(log_mel: &[f64]) -> [f64; N_MFCC] {
    let c = dct_ii_ortho(log_mel);
    let mut out = [0.0; N_MFCC];
    out.copy_from_slice(&c[1..=N_MFCC]);
    out
}

/// 16 MFCCs (c0 excluded) from one 257-bin log-power frame in dB.
pub fn mfcc16(lps_frame: &[f64]) -> [f64; N_MFCC] {
    debug_assert_eq!(lps_frame.len(), N_LPS);
    let power: Vec<f64> = lps_frame.iter().map(|&db| 10f64.powf(db / 10.0)).collect();
    let log_mel: Vec<f64> = lps_filterbank()
        .iter()
        .map(|band| {
            let e: f64 = band.iter().zip(&power).map(|(w, p)| w * p).sum();
            e.max(LOG_FLOOR).ln()
        })
        .collect();
    mfcc_from_log_mel(&log_mel)
}

// ---------------------------------------------------------------------------
// F0
// ---------------------------------------------------------------------------

/// Result of F0 analysis on one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct F0Estimate {
    /// ln(F0 in Hz) when voiced, 0 otherwise.
    pub log_f0: f64,
    pub voiced: bool,
    /// Peak normalized autocorrelation in the search range.
    pub periodicity: f64,
}

impl F0Estimate {
    pub fn f0_hz(&self) -> Option<f64> {
        self.voiced.then(|| self.log_f0.exp())
    }
}

/// Order of the LPC inverse filter that flattens the spectral tilt of a frame
/// before the periodicity search.
pub const F0_WHITEN_ORDER: usize = 4;
/// Relative white-noise correction added to `r[0]` for that filter.
const F0_WHITEN_NOISE: f64 = 1e-2;

/// Residual of a low-order LPC inverse filter. Strongly low-pass noise has a
/// high short-lag autocorrelation that would otherwise pass as periodicity.
fn whiten(frame: &[f64]) -> Vec<f64> {
    let n = frame.len();
    let mut r: Vec<f64> = (0..=F0_WHITEN_ORDER)
        .map(|lag| (0..n - lag).map(|i| frame[i] * frame[i + lag]).sum())
        .collect();
    r[0] *= 1.0 + F0_WHITEN_NOISE;
    let (a, _) = crate::distortions::levinson(&r, F0_WHITEN_ORDER);
    (0..n)
        .map(|i| {
            let past: f64 = a
                .iter()
                .enumerate()
                .take_while(|(k, _)| *k < i)
                .map(|(k, ak)| ak * frame[i - k - 1])
                .sum();
            frame[i] + past
        })
        .collect()
}

/// Normalized-autocorrelation pitch estimator over 50-400 Hz.
///
/// The frame is first spectrally flattened by [`F0_WHITEN_ORDER`]-order
/// inverse filtering. A frame is voiced when the autocorrelation peak of the
/// residual exceeds 0.3 and the frame RMS is above [`VOICING_RMS_FLOOR`].
/// Among local maxima the shortest lag reaching 90% of the best one is taken,
/// then refined by parabolic interpolation.
pub fn estimate_f0(frame: &[f64], sample_rate: f64) -> F0Estimate {
    let unvoiced = |periodicity| F0Estimate {
        log_f0: 0.0,
        voiced: false,
        periodicity,
    };
    let n = frame.len();
    let min_lag = (sample_rate / F0_MAX_HZ).floor() as usize;
    let max_lag = (sample_rate / F0_MIN_HZ).ceil() as usize;
    if n < 2 * max_lag {
        return unvoiced(0.0);
    }
    let energy: f64 = frame.iter().map(|v| v * v).sum();
    let rms = (energy / n as f64).sqrt();
    if rms <= 0.0 {
        return unvoiced(0.0);
    }
    let r = normalized_autocorrelation(&whiten(frame), max_lag + 1);

    let mut peaks: Vec<usize> = Vec::new();
    for lag in min_lag.max(1)..=max_lag {
        if r[lag] > r[lag - 1] && r[lag] >= r[lag + 1] {
            peaks.push(lag);
        }
    }
    let best = peaks.iter().map(|&l| r[l]).fold(f64::NEG_INFINITY, f64::max);
    if peaks.is_empty() || best <= VOICING_THRESHOLD || rms <= VOICING_RMS_FLOOR {
        return unvoiced(best.max(0.0));
    }
    let lag = *peaks.iter().find(|&&l| r[l] >= 0.9 * best).unwrap();
    let (a, b, c) = (r[lag - 1], r[lag], r[lag + 1]);
    let denom = a - 2.0 * b + c;
    let shift = if denom.abs() > 1e-12 {
        (0.5 * (a - c) / denom).clamp(-0.5, 0.5)
    } else {
        0.0
    };
    let f0 = sample_rate / (lag as f64 + shift);
    F0Estimate {
        log_f0: f0.ln(),
        voiced: true,
        periodicity: best,
    }
}

/// `r[lag] = sum x[n] x[n+lag] / sqrt(sum x[n]^2 * sum x[n+lag]^2)` over the
/// overlapping part, for `lag in 0..=max_lag`.
fn normalized_autocorrelation(x: &[f64], max_lag: usize) -> Vec<f64> {
    let n = x.len();
    let size = (n + max_lag).next_power_of_two();
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    buf.resize(size, Complex::new(0.0, 0.0));
    fft_forward(size).process(&mut buf);
    buf.iter_mut().for_each(|c| *c = Complex::new(c.norm_sqr(), 0.0));
    fft_inverse(size).process(&mut buf);
    let mut prefix = vec![0.0; n + 1];
    for i in 0..n {
        prefix[i + 1] = prefix[i] + x[i] * x[i];
    }
    (0..=max_lag.min(n - 1))
        .map(|lag| {
            let e1 = prefix[n - lag];
            let e2 = prefix[n] - prefix[lag];
            let d = (e1 * e2).sqrt();
            if d > 0.0 {
                buf[lag].re / size as f64 / d
            } else {
                0.0
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Acoustic matrix
// ---------------------------------------------------------------------------

/// `n_frames` x 277 acoustic features at a 16 ms stride.
#[derive(Debug, Clone, PartialEq)]
pub struct AcousticMatrix {
    pub n_frames: usize,
    pub data: Vec<f64>,
}

impl AcousticMatrix {
    pub fn zeros(n_frames: usize) -> Self {
        Self {
            n_frames,
            data: vec![0.0; n_frames * N_ACOUSTIC],
        }
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * N_ACOUSTIC..(t + 1) * N_ACOUSTIC]
    }

    pub fn row_mut(&mut self, t: usize) -> &mut [f64] {
        &mut self.data[t * N_ACOUSTIC..(t + 1) * N_ACOUSTIC]
    }

    pub fn mfcc(&self, t: usize) -> &[f64] {
        &self.row(t)[COL_MFCC..COL_MFCC + N_MFCC]
    }

    pub fn voiced(&self, t: usize) -> bool {
        self.row(t)[COL_VOICED] > 0.5
    }

    pub fn f0_hz(&self, t: usize) -> Option<f64> {
        self.voiced(t).then(|| self.row(t)[COL_LOG_F0].exp())
    }

    pub fn column(&self, c: usize) -> impl Iterator<Item = f64> + '_ {
        (0..self.n_frames).map(move |t| self.data[t * N_ACOUSTIC + c])
    }

    /// Write the `GSEF` feature file: magic, version, frame count, dimension
    /// and stride (all u32 LE), then row-major f32 LE values.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(b"GSEF")?;
        for v in [1u32, self.n_frames as u32, N_ACOUSTIC as u32, FRAME_STRIDE_MS] {
            w.write_all(&v.to_le_bytes())?;
        }
        for &v in &self.data {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut head = [0u8; 20];
        r.read_exact(&mut head)?;
        if &head[..4] != b"GSEF" {
            return Err(Error::Data("bad feature file magic".into()));
        }
        let word = |i: usize| u32::from_le_bytes(head[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        let (version, n_frames, dims) = (word(0), word(1) as usize, word(2) as usize);
        if version != 1 || dims != N_ACOUSTIC {
            return Err(Error::Data(format!(
                "unsupported feature file version {version} / dims {dims}"
            )));
        }
        let mut raw = vec![0u8; n_frames * dims * 4];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        Ok(Self { n_frames, data })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(f)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// Number of 16 ms frames for a signal of `len` samples.
pub fn n_feature_frames(len: usize) -> usize {
    len.div_ceil(FRAME_HOP)
}

/// Extract the 277-dimensional acoustic matrix of a 16 kHz signal.
pub fn extract_acoustic_features(w: &Waveform) -> AcousticMatrix {
    extract_acoustic_features_f64(&w.to_f64())
}

pub fn extract_acoustic_features_f64(x: &[f64]) -> AcousticMatrix {
    let n_frames = n_feature_frames(x.len());
    let mut out = AcousticMatrix::zeros(n_frames);
    if x.is_empty() {
        return out;
    }
    let window = hann(LPS_FFT);
    let fwd = fft_forward(LPS_FFT);
    let mut buf = vec![Complex::new(0.0, 0.0); LPS_FFT];
    let mut raw = vec![0.0; LPS_FFT];
    let mut f0_frame = vec![0.0; F0_WINDOW];
    for t in 0..n_frames {
        for n in 0..LPS_FFT {
            raw[n] = x[frame_index(t, n, FRAME_HOP, LPS_FFT, x.len())];
            buf[n] = Complex::new(raw[n] * window[n], 0.0);
        }
        fwd.process(&mut buf);
        let row = out.row_mut(t);
        for k in 0..N_LPS {
            row[k] = 10.0 * buf[k].norm_sqr().max(LOG_FLOOR).log10();
        }
        let mfcc = mfcc16(&row[..N_LPS]);
        row[COL_MFCC..COL_MFCC + N_MFCC].copy_from_slice(&mfcc);

        for (n, v) in f0_frame.iter_mut().enumerate() {
            *v = x[frame_index(t, n, FRAME_HOP, F0_WINDOW, x.len())];
        }
        let f0 = estimate_f0(&f0_frame, CANONICAL_RATE as f64);
        row[COL_LOG_F0] = f0.log_f0;
        row[COL_VOICED] = if f0.voiced { 1.0 } else { 0.0 };

        let rms = (raw.iter().map(|v| v * v).sum::<f64>() / LPS_FFT as f64).sqrt();
        row[COL_ENERGY] = rms.max(LOG_FLOOR).ln();
        let crossings = raw.windows(2).filter(|p| p[0] * p[1] < 0.0).count();
        row[COL_ZCR] = crossings as f64 / (LPS_FFT - 1) as f64;
    }
    out
}
