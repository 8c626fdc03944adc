//! Objective quality metrics: mel cepstral distortion, F0 RMSE over
//! co-voiced frames and voiced/unvoiced disagreement, with corpus-level
//! aggregation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audio_io::{load_canonical, Waveform};
use crate::error::{Error, Result};
use crate::features::{extract_acoustic_features, AcousticMatrix};
use crate::par;

/// `10 / ln 10 * sqrt(2)`: MCD of a unit difference in one coefficient.
pub fn mcd_constant() -> f64 {
    10.0 / std::f64::consts::LN_10 * std::f64::consts::SQRT_2
}

fn check_aligned(a: &Waveform, b: &Waveform) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Alignment(a.len(), b.len()));
    }
    Ok(())
}

/// Mean over frames of `(10/ln 10) sqrt(2 sum_{d=1..16} (c_d - c'_d)^2)`.
pub fn mcd_from_features(a: &AcousticMatrix, b: &AcousticMatrix) -> Result<f64> {
    if a.n_frames != b.n_frames {
        return Err(Error::Alignment(a.n_frames, b.n_frames));
    }
    if a.n_frames == 0 {
        return Ok(0.0);
    }
    let k = 10.0 / std::f64::consts::LN_10;
    let total: f64 = (0..a.n_frames)
        .map(|t| {
            let d2: f64 = a.mfcc(t).iter().zip(b.mfcc(t)).map(|(x, y)| (x - y).powi(2)).sum();
            k * (2.0 * d2).sqrt()
        })
        .sum();
    Ok(total / a.n_frames as f64)
}

/// F0 RMSE in Hz over frames voiced in both; `None` without such frames.
pub fn f0_rmse_from_features(a: &AcousticMatrix, b: &AcousticMatrix) -> Result<Option<f64>> {
    if a.n_frames != b.n_frames {
        return Err(Error::Alignment(a.n_frames, b.n_frames));
    }
    let diffs: Vec<f64> = (0..a.n_frames)
        .filter_map(|t| Some(a.f0_hz(t)? - b.f0_hz(t)?))
        .collect();
    if diffs.is_empty() {
        return Ok(None);
    }
    Ok(Some((diffs.iter().map(|d| d * d).sum::<f64>() / diffs.len() as f64).sqrt()))
}

/// Percentage of frames whose voicing decisions differ.
pub fn uv_error_from_features(a: &AcousticMatrix, b: &AcousticMatrix) -> Result<f64> {
    if a.n_frames != b.n_frames {
        return Err(Error::Alignment(a.n_frames, b.n_frames));
    }
    if a.n_frames == 0 {
        return Ok(0.0);
    }
    let diff = (0..a.n_frames).filter(|&t| a.voiced(t) != b.voiced(t)).count();
    Ok(100.0 * diff as f64 / a.n_frames as f64)
}

pub fn mcd(reference: &Waveform, degraded: &Waveform) -> Result<f64> {
    check_aligned(reference, degraded)?;
    mcd_from_features(&extract_acoustic_features(reference), &extract_acoustic_features(degraded))
}

pub fn f0_rmse(reference: &Waveform, degraded: &Waveform) -> Result<Option<f64>> {
    check_aligned(reference, degraded)?;
    f0_rmse_from_features(&extract_acoustic_features(reference), &extract_acoustic_features(degraded))
}

pub fn uv_error(reference: &Waveform, degraded: &Waveform) -> Result<f64> {
    check_aligned(reference, degraded)?;
    uv_error_from_features(&extract_acoustic_features(reference), &extract_acoustic_features(degraded))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceMetrics {
    pub name: String,
    pub mcd_db: f64,
    pub f0_rmse_hz: Option<f64>,
    pub uv_error_pct: f64,
}

/// All three metrics for one aligned pair, extracting features once.
pub fn evaluate_pair(name: &str, reference: &Waveform, degraded: &Waveform) -> Result<UtteranceMetrics> {
    check_aligned(reference, degraded)?;
    let a = extract_acoustic_features(reference);
    let b = extract_acoustic_features(degraded);
    Ok(UtteranceMetrics {
        name: name.to_string(),
        mcd_db: mcd_from_features(&a, &b)?,
        f0_rmse_hz: f0_rmse_from_features(&a, &b)?,
        uv_error_pct: uv_error_from_features(&a, &b)?,
    })
}

/// Mean and sample standard deviation; the deviation needs two values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub n: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        let mean = (n > 0).then(|| values.iter().sum::<f64>() / n as f64);
        let std = (n >= 2).then(|| {
            let m = mean.unwrap();
            (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        });
        Self { mean, std, n }
    }

    fn cell(&self) -> String {
        match (self.mean, self.std) {
            (Some(m), Some(s)) => format!("{m:.2} ({s:.2})"),
            (Some(m), None) => format!("{m:.2}"),
            _ => "n/a".to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mcd_db: Summary,
    pub f0_rmse_hz: Summary,
    pub uv_error_pct: Summary,
    pub n_utterances: usize,
    pub utterances: Vec<UtteranceMetrics>,
}

impl MetricsReport {
    pub fn from_utterances(utterances: Vec<UtteranceMetrics>) -> Self {
        let mcd: Vec<f64> = utterances.iter().map(|u| u.mcd_db).collect();
        let f0: Vec<f64> = utterances.iter().filter_map(|u| u.f0_rmse_hz).collect();
        let uv: Vec<f64> = utterances.iter().map(|u| u.uv_error_pct).collect();
        Self {
            mcd_db: Summary::of(&mcd),
            f0_rmse_hz: Summary::of(&f0),
            uv_error_pct: Summary::of(&uv),
            n_utterances: utterances.len(),
            utterances,
        }
    }

    /// Plain-text table, standard deviations in parentheses.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<14} | {:<14} | {:<14}", "MCD [dB]", "RMSE [Hz]", "UV [%]");
        let _ = writeln!(
            s,
            "{:<14} | {:<14} | {:<14}",
            self.mcd_db.cell(),
            self.f0_rmse_hz.cell(),
            self.uv_error_pct.cell()
        );
        let _ = writeln!(s, "{} utterances", self.n_utterances);
        s
    }
}

/// Sorted `*.wav` files of a directory keyed by file name.
pub fn list_wavs(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let is_wav = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("wav"));
        if path.is_file() && is_wav {
            let name = path.file_name().unwrap().to_string_lossy().into_owned();
            out.insert(name, path);
        }
    }
    Ok(out)
}

/// Pair files by name and evaluate every pair.
pub fn evaluate_corpus(ref_dir: impl AsRef<Path>, deg_dir: impl AsRef<Path>) -> Result<MetricsReport> {
    let refs = list_wavs(ref_dir.as_ref())?;
    let degs = list_wavs(deg_dir.as_ref())?;
    let unmatched: Vec<&str> = refs
        .keys()
        .filter(|k| !degs.contains_key(*k))
        .chain(degs.keys().filter(|k| !refs.contains_key(*k)))
        .map(String::as_str)
        .collect();
    if !unmatched.is_empty() {
        return Err(Error::Pairing(unmatched.join(", ")));
    }
    if refs.is_empty() {
        return Err(Error::Data(format!("no .wav files in {}", ref_dir.as_ref().display())));
    }
    let pairs: Vec<(&String, &PathBuf)> = refs.iter().collect();
    let results = par::map(&pairs, |(name, path)| -> Result<UtteranceMetrics> {
        let a = load_canonical(path)?;
        let b = load_canonical(&degs[*name])?;
        evaluate_pair(name, &a, &b)
    });
    Ok(MetricsReport::from_utterances(results.into_iter().collect::<Result<_>>()?))
}
