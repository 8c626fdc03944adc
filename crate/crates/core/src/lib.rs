//! Generalized speech enhancement with a conditional least-squares GAN.
//!
//! The crate covers the whole desk-scale pipeline: waveform I/O and silence
//! handling ([`audio_io`]), the four aggressive signal distortions and their
//! random online composition ([`distortions`]), acoustic feature extraction
//! ([`features`]), a small reverse-mode autodiff core ([`tensor_nn`]), the
//! generator/discriminator pair ([`segan`]), the adversarial and acoustic
//! objectives ([`losses`]), the two-stage trainer ([`trainer`]) and objective
//! evaluation ([`metrics`]). [`synth`] produces a pseudo-speech corpus so that
//! everything runs hermetically.

pub mod audio_io;
pub mod distortions;
pub mod error;
pub mod features;
pub mod gradsuite;
pub mod losses;
pub mod metrics;
pub mod par;
pub mod rng;
pub mod segan;
pub mod synth;
pub mod tensor_nn;
pub mod trainer;

pub use audio_io::{SpeechRegions, Waveform, CANONICAL_RATE, CHUNK_LEN};
pub use error::{Error, Result};
pub use features::{AcousticMatrix, N_ACOUSTIC};
