//! Desk-scale laboratory for transcription-free fine-tuning of a speech
//! separator against a frozen CTC recognizer.
//!
//! The pieces, bottom up:
//!
//! - [`tensor`]: dense f64 tensors with tape-based reverse-mode autodiff,
//!   an Adam optimizer, and a flat binary checkpoint container.
//! - [`signals`]: a fully synthetic corpus — tone-symbol utterances mixed
//!   with sparse-tap reverb and white noise under mixing/noise SNR
//!   controls — plus the SI-SDR measure.
//! - [`recognizer`]: a small CTC encoder over raw waveforms, its log-space
//!   CTC loss, greedy decoding, and from-scratch training.
//! - [`separator`]: a time-domain mask-based separator producing one
//!   estimate per speaker.
//! - [`losses`]: SI-SDR loss, encoder-difference (AE) loss, permutation
//!   solving, standard PIT, guided PIT, and the joint weighted loss.
//! - [`metrics`]: word edit distance, WER, CP-WER and ORC-WER with exact
//!   brute-force assignment solving.
//! - [`experiments`]: deterministic experiment orchestration — pretraining,
//!   fine-tuning arms, evaluation tables, sweeps, logit dumps — behind the
//!   `gpitlab` CLI.

pub mod experiments;
pub mod losses;
pub mod metrics;
mod permute;
pub mod recognizer;
pub mod separator;
pub mod signals;
pub mod tensor;
