//! Waveform container, WAV I/O, energy-based speech detection, silence
//! trimming and fixed-length chunking.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Canonical sample rate of every signal the models see.
pub const CANONICAL_RATE: u32 = 16_000;
/// Training chunk length (1.024 s at 16 kHz).
pub const CHUNK_LEN: usize = 16_384;

/// Mono signal with a sample rate. Samples are nominally in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        Self {
            samples,
            sample_rate,
        }
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Self {
        Self::new(vec![0.0; len], sample_rate)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn peak(&self) -> f32 {
        self.samples.iter().fold(0.0f32, |m, &s| m.max(s.abs()))
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Number of samples in `ms` milliseconds at this rate.
    pub fn ms_to_samples(&self, ms: f64) -> usize {
        (ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(Error::Config("sample rate must be positive".into()));
        }
        if let Some((index, &value)) = self
            .samples
            .iter()
            .enumerate()
            .find(|(_, s)| !s.is_finite())
        {
            return Err(Error::Range { index, value });
        }
        Ok(())
    }

    /// Scale down so that `max|x| <= 1`; signals already in range are untouched.
    pub fn normalized(mut self) -> Self {
        let peak = self.peak();
        if peak > 1.0 {
            let g = 1.0 / peak;
            self.samples.iter_mut().for_each(|s| *s *= g);
        }
        self
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.samples.iter().map(|&s| s as f64).collect()
    }
}

/// Half-open `[start, end)` sample ranges marked as speech, ascending and
/// non-overlapping.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpeechRegions {
    pub intervals: Vec<(usize, usize)>,
}

impl SpeechRegions {
    pub fn is_empty(&self) -> bool {
        self.intervals.is_empty()
    }

    pub fn speech_samples(&self) -> usize {
        self.intervals.iter().map(|(s, e)| e - s).sum()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.intervals.iter().any(|&(s, e)| (s..e).contains(&i))
    }
}

fn format_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    }
}

/// Read a PCM16 or float32 WAV file; multi-channel input keeps the first channel.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) if io.kind() == std::io::ErrorKind::NotFound => Error::Io(io),
        hound::Error::Unsupported => Error::Unsupported {
            path: path.to_path_buf(),
            msg: "unsupported WAV feature".into(),
        },
        other => format_err(path, other),
    })?;
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    let samples: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .step_by(channels)
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| format_err(path, e))?,
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .step_by(channels)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| format_err(path, e))?,
        (fmt, bits) => {
            return Err(Error::Unsupported {
                path: path.to_path_buf(),
                msg: format!("{fmt:?} with {bits} bits per sample"),
            })
        }
    };
    let w = Waveform::new(samples, spec.sample_rate);
    w.validate().map_err(|e| format_err(path, e))?;
    Ok(w)
}

/// Write a mono PCM16 WAV. Samples outside [-1, 1] are rejected.
pub fn write_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    w.validate()?;
    if let Some((index, &value)) = w
        .samples
        .iter()
        .enumerate()
        .find(|(_, s)| s.abs() > 1.0)
    {
        return Err(Error::Range { index, value });
    }
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let to_io = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::Io(io),
        other => Error::Io(std::io::Error::other(other.to_string())),
    };
    let mut writer = hound::WavWriter::create(path.as_ref(), spec).map_err(to_io)?;
    for &s in &w.samples {
        writer.write_sample(quantize_pcm16(s)).map_err(to_io)?;
    }
    writer.finalize().map_err(to_io)
}

pub fn quantize_pcm16(s: f32) -> i16 {
    (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// Read a WAV and bring it to the canonical format: mono, 16 kHz, peak <= 1.
pub fn load_canonical(path: impl AsRef<Path>) -> Result<Waveform> {
    let w = read_wav(path)?;
    let w = if w.sample_rate != CANONICAL_RATE {
        crate::distortions::resample(&w, CANONICAL_RATE)?
    } else {
        w
    };
    Ok(w.normalized())
}

/// Energy-based voice activity detection.
///
/// A frame of `frame_ms` is speech when its RMS lies within
/// `energy_threshold_db` of the loudest frame. Consecutive speech frames merge
/// into one interval. An all-silent signal yields no intervals.
pub fn detect_speech_regions(w: &Waveform, frame_ms: f64, energy_threshold_db: f64) -> SpeechRegions {
    let frame = w.ms_to_samples(frame_ms).max(1);
    let rms: Vec<f64> = w
        .samples
        .chunks(frame)
        .map(|c| (c.iter().map(|&s| (s as f64).powi(2)).sum::<f64>() / c.len() as f64).sqrt())
        .collect();
    let peak = rms.iter().cloned().fold(0.0, f64::max);
    if peak <= 0.0 {
        return SpeechRegions::default();
    }
    let floor = peak * 10f64.powf(-energy_threshold_db.abs() / 20.0);
    let mut intervals: Vec<(usize, usize)> = Vec::new();
    for (i, &r) in rms.iter().enumerate() {
        if r > floor {
            let start = i * frame;
            let end = ((i + 1) * frame).min(w.len());
            match intervals.last_mut() {
                Some(last) if last.1 == start => last.1 = end,
                _ => intervals.push((start, end)),
            }
        }
    }
    SpeechRegions { intervals }
}

/// Default VAD: 20 ms frames, 40 dB below the loudest frame.
pub fn default_speech_regions(w: &Waveform) -> SpeechRegions {
    detect_speech_regions(w, 20.0, 40.0)
}

/// Shorten every non-speech gap longer than `max_silence_ms` to exactly that
/// length. Leading silence keeps its tail, trailing silence keeps its head and
/// internal gaps keep equal halves next to the surrounding speech.
pub fn trim_silence(w: &Waveform, regions: &SpeechRegions, max_silence_ms: f64) -> Waveform {
    let max_gap = w.ms_to_samples(max_silence_ms);
    let n = w.len();
    let mut out = Vec::with_capacity(n);
    let mut cursor = 0usize;
    let n_regions = regions.intervals.len();
    for (k, &(s, e)) in regions.intervals.iter().enumerate() {
        let (s, e) = (s.min(n), e.min(n));
        let gap = &w.samples[cursor..s];
        if gap.len() > max_gap {
            if k == 0 {
                out.extend_from_slice(&gap[gap.len() - max_gap..]);
            } else {
                let head = max_gap / 2;
                let tail = max_gap - head;
                out.extend_from_slice(&gap[..head]);
                out.extend_from_slice(&gap[gap.len() - tail..]);
            }
        } else {
            out.extend_from_slice(gap);
        }
        out.extend_from_slice(&w.samples[s..e]);
        cursor = e;
    }
    let gap = &w.samples[cursor..];
    if gap.len() > max_gap {
        if n_regions == 0 {
            // No speech at all: keep a centred window of the allowed length.
            let start = (gap.len() - max_gap) / 2;
            out.extend_from_slice(&gap[start..start + max_gap]);
        } else {
            out.extend_from_slice(&gap[..max_gap]);
        }
    } else {
        out.extend_from_slice(gap);
    }
    Waveform::new(out, w.sample_rate)
}

/// Random contiguous chunk of exactly `length` samples; shorter inputs are
/// zero-padded at the end.
pub fn random_chunk<R: Rng + ?Sized>(w: &Waveform, length: usize, rng: &mut R) -> Waveform {
    if w.len() <= length {
        let mut s = w.samples.clone();
        s.resize(length, 0.0);
        return Waveform::new(s, w.sample_rate);
    }
    let start = rng.random_range(0..=w.len() - length);
    Waveform::new(w.samples[start..start + length].to_vec(), w.sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn silence_roundtrip() {
        let d = tmp();
        let p = d.path().join("z.wav");
        write_wav(&p, &Waveform::zeros(16000, 16000)).unwrap();
        let w = read_wav(&p).unwrap();
        assert_eq!(w.sample_rate, 16000);
        assert_eq!(w.samples, vec![0.0; 16000]);
    }

    #[test]
    fn full_scale_square_reads_back_at_max_code() {
        let d = tmp();
        let p = d.path().join("sq.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 16000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut wr = hound::WavWriter::create(&p, spec).unwrap();
        for i in 0..160 {
            wr.write_sample(if (i / 20) % 2 == 0 { 32767i16 } else { -32768 }).unwrap();
        }
        wr.finalize().unwrap();
        let w = read_wav(&p).unwrap();
        assert_eq!(w.samples[0], 32767.0 / 32768.0);
        assert_eq!(w.samples[20], -1.0);
    }

    #[test]
    fn float_wav_and_first_channel() {
        let d = tmp();
        let p = d.path().join("f.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 22050,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let mut wr = hound::WavWriter::create(&p, spec).unwrap();
        for i in 0..10 {
            wr.write_sample(i as f32 * 0.1).unwrap();
            wr.write_sample(-1.0f32).unwrap();
        }
        wr.finalize().unwrap();
        let w = read_wav(&p).unwrap();
        assert_eq!(w.sample_rate, 22050);
        assert_eq!(w.len(), 10);
        assert!((w.samples[3] - 0.3).abs() < 1e-7);
    }

    #[test]
    fn malformed_and_unsupported() {
        let d = tmp();
        let p = d.path().join("bad.wav");
        std::fs::write(&p, b"RIFF\x10\x00\x00\x00WAVEjunkjunk").unwrap();
        assert!(matches!(read_wav(&p), Err(Error::Format { .. })));

        let p = d.path().join("u8.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 8000,
            bits_per_sample: 8,
            sample_format: hound::SampleFormat::Int,
        };
        let mut wr = hound::WavWriter::create(&p, spec).unwrap();
        wr.write_sample(3i8).unwrap();
        wr.finalize().unwrap();
        assert!(matches!(read_wav(&p), Err(Error::Unsupported { .. })));
    }

    #[test]
    fn write_rejects_out_of_range() {
        let d = tmp();
        let w = Waveform::new(vec![0.0, 1.5], 16000);
        assert!(matches!(
            write_wav(d.path().join("x.wav"), &w),
            Err(Error::Range { index: 1, .. })
        ));
    }

    #[test]
    fn sine_roundtrip_correlation() {
        let d = tmp();
        let p = d.path().join("s.wav");
        let x: Vec<f32> = (0..16000)
            .map(|i| 0.8 * (2.0 * std::f32::consts::PI * 440.0 * i as f32 / 16000.0).sin())
            .collect();
        write_wav(&p, &Waveform::new(x.clone(), 16000)).unwrap();
        let y = read_wav(&p).unwrap().samples;
        let dot: f64 = x.iter().zip(&y).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        let nx: f64 = x.iter().map(|a| (*a as f64).powi(2)).sum::<f64>().sqrt();
        let ny: f64 = y.iter().map(|a| (*a as f64).powi(2)).sum::<f64>().sqrt();
        assert!(dot / (nx * ny) > 0.9999);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn roundtrip_within_quantization(seed in any::<u64>(), len in 1usize..2000) {
            let mut r = rng::from_seed(seed);
            let x: Vec<f32> = (0..len).map(|_| r.random_range(-1.0f32..=1.0)).collect();
            let d = tmp();
            let p = d.path().join("r.wav");
            write_wav(&p, &Waveform::new(x.clone(), 16000)).unwrap();
            let y = read_wav(&p).unwrap().samples;
            for (a, b) in x.iter().zip(&y) {
                prop_assert!((a - b).abs() <= 1.0 / 32768.0);
            }
        }

        #[test]
        fn chunk_reproducible(seed in any::<u64>(), len in 1usize..40000) {
            let w = Waveform::new((0..len).map(|i| i as f32).collect(), 16000);
            let a = random_chunk(&w, CHUNK_LEN, &mut rng::from_seed(seed));
            let b = random_chunk(&w, CHUNK_LEN, &mut rng::from_seed(seed));
            prop_assert_eq!(a.len(), CHUNK_LEN);
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn vad_cases() {
        assert!(default_speech_regions(&Waveform::zeros(16000, 16000)).is_empty());

        let c = Waveform::new(vec![1.0; 16000], 16000);
        assert_eq!(default_speech_regions(&c).intervals, vec![(0, 16000)]);

        let mut r = rng::from_seed(3);
        let mut s = vec![0.0f32; 8000];
        s.extend((0..8000).map(|_| r.random_range(-1.0f32..1.0)));
        let w = Waveform::new(s, 16000);
        // Frame-RMS oracle: the second half frames are loud, the first half silent.
        let regions = default_speech_regions(&w);
        assert_eq!(regions.intervals.len(), 1);
        let (a, b) = regions.intervals[0];
        assert!((a as i64 - 8000).abs() <= 320 && (b as i64 - 16000).abs() <= 320);
    }

    #[test]
    fn trim_internal_gap_to_exactly_100ms() {
        let mut s = vec![0.5f32; 8000];
        s.extend(vec![0.0; 16000]);
        s.extend(vec![-0.5; 8000]);
        let w = Waveform::new(s, 16000);
        let regions = SpeechRegions {
            intervals: vec![(0, 8000), (24000, 32000)],
        };
        let t = trim_silence(&w, &regions, 100.0);
        assert_eq!(t.len(), 16000 + 1600);
        assert!(t.samples[..8000].iter().all(|&x| x == 0.5));
        assert!(t.samples[8000..9600].iter().all(|&x| x == 0.0));
        assert!(t.samples[9600..].iter().all(|&x| x == -0.5));
    }

    #[test]
    fn trim_noop_and_outer_silence() {
        let mut s = vec![0.0f32; 800];
        s.extend(vec![0.3; 1000]);
        s.extend(vec![0.0; 800]);
        let w = Waveform::new(s, 16000);
        let r = SpeechRegions {
            intervals: vec![(800, 1800)],
        };
        assert_eq!(trim_silence(&w, &r, 100.0), w);

        // 2 s silence + 1 s speech + 2 s silence -> 1 s + at most 200 ms.
        let mut s = vec![0.0f32; 32000];
        s.extend(vec![0.3; 16000]);
        s.extend(vec![0.0; 32000]);
        let w = Waveform::new(s, 16000);
        let r = default_speech_regions(&w);
        let t = trim_silence(&w, &r, 100.0);
        assert!(t.len() >= 16000 && t.len() <= 16000 + 3200);
        assert_eq!(t.samples.iter().filter(|&&x| x == 0.3).count(), 16000);
    }

    #[test]
    fn chunk_cases() {
        let w = Waveform::new((0..CHUNK_LEN).map(|i| i as f32).collect(), 16000);
        assert_eq!(random_chunk(&w, CHUNK_LEN, &mut rng::from_seed(1)), w);

        let short = Waveform::new(vec![0.25; 1000], 16000);
        let c = random_chunk(&short, CHUNK_LEN, &mut rng::from_seed(1));
        assert!(c.samples[..1000].iter().all(|&x| x == 0.25));
        assert!(c.samples[1000..].iter().all(|&x| x == 0.0));

        // Slice membership: a ramp makes the offset recoverable from the first sample.
        let long = Waveform::new((0..2 * CHUNK_LEN).map(|i| i as f32).collect(), 16000);
        let c = random_chunk(&long, CHUNK_LEN, &mut rng::from_seed(9));
        let off = c.samples[0] as usize;
        assert_eq!(c.samples, long.samples[off..off + CHUNK_LEN]);
    }
}
