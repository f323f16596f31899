//! Synthetic corpus generation and signal-level measures.
//!
//! Utterances are concatenations of tone-burst symbol templates, so a
//! recognizer is learnable from scratch. Mixtures follow the additive
//! model `x = sum_c conv(h_c, g_c * s_c) + noise`, with speaker gains set
//! by a mixing SNR relative to speaker 1 and white Gaussian noise scaled
//! by a noise SNR relative to the loudest scaled speaker. The reference
//! signal for training and evaluation is the gain-scaled dry source
//! (anechoic convention).

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SignalError {
    #[error("unknown symbol id {0}")]
    UnknownSymbol(u8),
    #[error("empty symbol sequence")]
    EmptySymbols,
    #[error("source {index} has zero power")]
    ZeroPowerSource { index: usize },
    #[error("reference signal has zero power")]
    ZeroReference,
    #[error("length mismatch: reference {reference}, estimate {estimate}")]
    LengthMismatch { reference: usize, estimate: usize },
    #[error("need at least 2 utterances to mix, got {0}")]
    TooFewSources(usize),
    #[error("wav export: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, SignalError>;

/// Epsilon in the SI-SDR denominator; caps the value near +83 dB for
/// unit-energy references.
pub const SISDR_EPS: f64 = 1e-8;

/// Printable token for a symbol id (`0 -> "a"`, `1 -> "b"`, ...).
pub fn symbol_token(id: u8) -> String {
    ((b'a' + id) as char).to_string()
}

/// Fixed bank of tone-burst symbol templates.
///
/// Template `k` is a sinusoid at a distinct base frequency under a
/// raised-cosine (Hann) amplitude envelope, `d_sym` samples long, peak
/// below 1.
#[derive(Debug, Clone)]
pub struct SymbolBank {
    templates: Vec<Vec<f64>>,
    fs: u32,
    d_sym: usize,
}

impl SymbolBank {
    pub fn new(k: usize, d_sym: usize, fs: u32) -> Self {
        assert!(k >= 1 && d_sym >= 2);
        let spacing = (fs as f64 / 2.0 * 0.9) / (k as f64 + 1.0);
        let templates = (0..k)
            .map(|sym| {
                let freq = spacing * (sym as f64 + 1.0);
                (0..d_sym)
                    .map(|i| {
                        let env = 0.5
                            * (1.0
                                - (2.0 * std::f64::consts::PI * i as f64 / (d_sym - 1) as f64)
                                    .cos());
                        0.85 * env * (2.0 * std::f64::consts::PI * freq * i as f64 / fs as f64).sin()
                    })
                    .collect()
            })
            .collect();
        Self { templates, fs, d_sym }
    }

    pub fn alphabet_size(&self) -> usize {
        self.templates.len()
    }

    pub fn symbol_duration(&self) -> usize {
        self.d_sym
    }

    pub fn sample_rate(&self) -> u32 {
        self.fs
    }

    pub fn template(&self, id: u8) -> Result<&[f64]> {
        self.templates
            .get(id as usize)
            .map(|t| t.as_slice())
            .ok_or(SignalError::UnknownSymbol(id))
    }
}

/// A symbol sequence and its deterministic waveform.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub symbols: Vec<u8>,
    pub waveform: Vec<f64>,
    pub speaker_id: usize,
}

/// Concatenate symbol templates into a waveform.
pub fn synth_utterance(symbols: &[u8], bank: &SymbolBank, speaker_id: usize) -> Result<Utterance> {
    if symbols.is_empty() {
        return Err(SignalError::EmptySymbols);
    }
    let mut waveform = Vec::with_capacity(symbols.len() * bank.symbol_duration());
    for &s in symbols {
        waveform.extend_from_slice(bank.template(s)?);
    }
    Ok(Utterance {
        symbols: symbols.to_vec(),
        waveform,
        speaker_id,
    })
}

/// Sparse-tap room impulse response. The first tap is always the unit
/// direct path at delay 0; reflection delays are strictly increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct Rir {
    taps: Vec<(usize, f64)>,
}

impl Rir {
    pub fn identity() -> Self {
        Self {
            taps: vec![(0, 1.0)],
        }
    }

    pub fn taps(&self) -> &[(usize, f64)] {
        &self.taps
    }

    pub fn max_delay(&self) -> usize {
        self.taps.last().map(|&(d, _)| d).unwrap_or(0)
    }

    /// Sparse convolution of `x`, written into a buffer of length `out_len`.
    pub fn convolve(&self, x: &[f64], out_len: usize) -> Vec<f64> {
        let mut out = vec![0.0; out_len];
        for &(delay, gain) in &self.taps {
            let n = x.len().min(out_len.saturating_sub(delay));
            let dst = &mut out[delay..delay + n];
            for (o, &v) in dst.iter_mut().zip(&x[..n]) {
                *o += gain * v;
            }
        }
        out
    }
}

/// Noise spectral shaping: a single-pole low-pass applied to the white
/// Gaussian source before energy normalization, approximating the
/// low-frequency character of ambient noise. `None` keeps the noise
/// white.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseShape {
    pub lowpass_hz: Option<f64>,
}

impl NoiseShape {
    pub fn white() -> Self {
        Self { lowpass_hz: None }
    }

    pub fn ambient_default() -> Self {
        Self {
            lowpass_hz: Some(250.0),
        }
    }
}

/// RIR sampling parameters, delays in samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RirSpec {
    pub reflections: usize,
    pub delay_range: (usize, usize),
    pub gain_range: (f64, f64),
}

impl RirSpec {
    /// Defaults at the given sample rate: delays 5-30 ms, gains 0.1-0.5.
    pub fn default_at(fs: u32) -> Self {
        Self {
            reflections: 3,
            delay_range: ((0.005 * fs as f64) as usize, (0.030 * fs as f64) as usize),
            gain_range: (0.1, 0.5),
        }
    }
}

/// Draw a RIR: unit direct path plus `reflections` taps with distinct
/// delays in `delay_range` and gains in `gain_range`.
pub fn sample_rir(rng: &mut ChaCha8Rng, spec: &RirSpec) -> Rir {
    let mut delays: Vec<usize> = Vec::with_capacity(spec.reflections);
    while delays.len() < spec.reflections {
        let d = rng.gen_range(spec.delay_range.0..=spec.delay_range.1);
        if d > 0 && !delays.contains(&d) {
            delays.push(d);
        }
    }
    delays.sort_unstable();
    let mut taps = vec![(0usize, 1.0)];
    for d in delays {
        taps.push((d, rng.gen_range(spec.gain_range.0..spec.gain_range.1)));
    }
    Rir { taps }
}

/// One synthetic mixture: the observed waveform, the gain-scaled dry
/// references, and everything needed to re-assemble `x` exactly.
#[derive(Debug, Clone)]
pub struct MixtureExample {
    pub x: Vec<f64>,
    pub refs: Vec<Vec<f64>>,
    pub rirs: Vec<Rir>,
    pub noise: Vec<f64>,
    pub gains: Vec<f64>,
    /// Sample offset of each dry utterance inside the mixture window.
    pub onsets: Vec<usize>,
    pub mixing_snr_db: f64,
    pub noise_snr_db: f64,
    pub fs: u32,
    pub seed: u64,
}

impl MixtureExample {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn speakers(&self) -> usize {
        self.refs.len()
    }

    /// Assemble a mixture from its parts: `x = sum_c conv(h_c, ref_c) + noise`.
    pub fn assemble(refs: &[Vec<f64>], rirs: &[Rir], noise: &[f64]) -> Vec<f64> {
        let len = noise.len();
        let mut x = noise.to_vec();
        for (r, h) in refs.iter().zip(rirs) {
            let image = h.convolve(r, len);
            for (o, v) in x.iter_mut().zip(image) {
                *o += v;
            }
        }
        x
    }

    /// Max absolute deviation of `x` from the re-assembled mixture.
    pub fn reconstruction_error(&self) -> f64 {
        let rebuilt = Self::assemble(&self.refs, &self.rirs, &self.noise);
        self.x
            .iter()
            .zip(&rebuilt)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

/// Mix utterances into a [`MixtureExample`].
///
/// Onsets are drawn so that every utterance lies inside the span of the
/// longest one (fully overlapped regime). Speaker 1 keeps unit gain;
/// every other speaker is scaled so the power ratio of speaker 1 to
/// speaker `c` is `mixing_snr_db`. White Gaussian noise is scaled so the
/// loudest scaled speaker to noise ratio is `noise_snr_db` exactly.
pub fn mix(
    utterances: &[Utterance],
    rirs: Vec<Rir>,
    mixing_snr_db: f64,
    noise_snr_db: f64,
    noise_shape: NoiseShape,
    fs: u32,
    rng: &mut ChaCha8Rng,
    seed: u64,
) -> Result<MixtureExample> {
    if utterances.len() < 2 {
        return Err(SignalError::TooFewSources(utterances.len()));
    }
    assert_eq!(utterances.len(), rirs.len());
    let c = utterances.len();

    let longest = (0..c)
        .max_by_key(|&i| utterances[i].waveform.len())
        .unwrap();
    let base_len = utterances[longest].waveform.len();
    let mut onsets = vec![0usize; c];
    for (i, u) in utterances.iter().enumerate() {
        if i != longest {
            onsets[i] = rng.gen_range(0..=(base_len - u.waveform.len()));
        }
    }

    let tail = rirs.iter().map(Rir::max_delay).max().unwrap_or(0);
    let len = base_len + tail;

    let mut dry: Vec<Vec<f64>> = Vec::with_capacity(c);
    for (u, &onset) in utterances.iter().zip(&onsets) {
        let mut s = vec![0.0; len];
        s[onset..onset + u.waveform.len()].copy_from_slice(&u.waveform);
        dry.push(s);
    }

    let powers: Vec<f64> = dry.iter().map(|s| energy(s)).collect();
    for (i, &p) in powers.iter().enumerate() {
        if p == 0.0 {
            return Err(SignalError::ZeroPowerSource { index: i });
        }
    }
    let ratio = 10f64.powf(mixing_snr_db / 10.0);
    let mut gains = vec![1.0; c];
    for i in 1..c {
        gains[i] = (powers[0] / (powers[i] * ratio)).sqrt();
    }

    let refs: Vec<Vec<f64>> = dry
        .iter()
        .zip(&gains)
        .map(|(s, &g)| s.iter().map(|v| g * v).collect())
        .collect();

    let loudest = refs.iter().map(|r| energy(r)).fold(0.0, f64::max);
    let noise_target = loudest * 10f64.powf(-noise_snr_db / 10.0);
    let mut noise: Vec<f64> = (0..len).map(|_| gaussian(rng)).collect();
    if let Some(cutoff) = noise_shape.lowpass_hz {
        let a = (-2.0 * std::f64::consts::PI * cutoff / fs as f64).exp();
        let mut state = 0.0;
        for v in noise.iter_mut() {
            state = a * state + (1.0 - a) * *v;
            *v = state;
        }
    }
    // exact energy normalization happens after shaping, so the stated
    // SNR holds regardless of the spectrum
    let scale = (noise_target / energy(&noise)).sqrt();
    for v in noise.iter_mut() {
        *v *= scale;
    }

    let x = MixtureExample::assemble(&refs, &rirs, &noise);
    Ok(MixtureExample {
        x,
        refs,
        rirs,
        noise,
        gains,
        onsets,
        mixing_snr_db,
        noise_snr_db,
        fs,
        seed,
    })
}

/// Standard normal via Box-Muller; draws exactly two uniforms.
fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Truncate all waveforms to at most `tsl_seconds`. The mixture identity
/// is preserved pointwise on the kept window; transcripts need no
/// adjustment, which is the point of the transcription-free setup.
pub fn truncate(example: &MixtureExample, tsl_seconds: f64) -> MixtureExample {
    assert!(tsl_seconds > 0.0);
    let keep = ((tsl_seconds * example.fs as f64).round() as usize).min(example.len());
    MixtureExample {
        x: example.x[..keep].to_vec(),
        refs: example.refs.iter().map(|r| r[..keep].to_vec()).collect(),
        rirs: example.rirs.clone(),
        noise: example.noise[..keep].to_vec(),
        gains: example.gains.clone(),
        onsets: example.onsets.clone(),
        mixing_snr_db: example.mixing_snr_db,
        noise_snr_db: example.noise_snr_db,
        fs: example.fs,
        seed: example.seed,
    }
}

/// Scale-invariant signal-to-distortion ratio in dB, higher is better.
///
/// Both signals are mean-centered; the estimate is projected onto the
/// reference and the residual counted as error:
/// `10*log10(|s_t|^2 / (|e|^2 + eps))`.
pub fn sisdr(reference: &[f64], estimate: &[f64]) -> Result<f64> {
    if reference.len() != estimate.len() {
        return Err(SignalError::LengthMismatch {
            reference: reference.len(),
            estimate: estimate.len(),
        });
    }
    let n = reference.len() as f64;
    let rmean = reference.iter().sum::<f64>() / n;
    let emean = estimate.iter().sum::<f64>() / n;
    let mut dot = 0.0;
    let mut rpow = 0.0;
    for (&r, &e) in reference.iter().zip(estimate) {
        let rc = r - rmean;
        let ec = e - emean;
        dot += rc * ec;
        rpow += rc * rc;
    }
    if rpow == 0.0 {
        return Err(SignalError::ZeroReference);
    }
    let alpha = dot / rpow;
    let mut target_pow = 0.0;
    let mut err_pow = 0.0;
    for (&r, &e) in reference.iter().zip(estimate) {
        let t = alpha * (r - rmean);
        let d = (e - emean) - t;
        target_pow += t * t;
        err_pow += d * d;
    }
    Ok(10.0 * (target_pow / (err_pow + SISDR_EPS)).log10())
}

// ---------------------------------------------------------------------------
// Dataset specification and deterministic item generation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    fn tag(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Valid => 2,
            Split::Test => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

/// Declarative description of one corpus split. Item `i` of epoch `e` is
/// a pure function of `(master_seed, split, i, e)` for the train split
/// and of `(master_seed, split, i)` otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub split: Split,
    pub items: usize,
    pub speakers: usize,
    pub seq_len: (usize, usize),
    pub mixing_snr_db: (f64, f64),
    pub noise_snr_db: (f64, f64),
    pub tsl_limit_s: Option<f64>,
    pub master_seed: u64,
    pub rir: RirSpec,
    pub noise_shape: NoiseShape,
}

/// Ground truth that must never reach the fine-tuning path: per-speaker
/// transcripts and onset positions, used only by evaluation and
/// recognizer training.
#[derive(Debug, Clone, PartialEq)]
pub struct ExampleMeta {
    pub transcripts: Vec<Vec<u8>>,
    /// Sample offset of each dry utterance inside the mixture window.
    pub onsets: Vec<usize>,
}

fn chacha_for(master_seed: u64, domain: u64, index: u64, epoch: u64) -> ChaCha8Rng {
    let mut seed = [0u8; 32];
    seed[0..8].copy_from_slice(&master_seed.to_le_bytes());
    seed[8..16].copy_from_slice(&domain.to_le_bytes());
    seed[16..24].copy_from_slice(&index.to_le_bytes());
    seed[24..32].copy_from_slice(&epoch.to_le_bytes());
    ChaCha8Rng::from_seed(seed)
}

fn fold_seed(master_seed: u64, domain: u64, index: u64, epoch: u64) -> u64 {
    // splitmix-style fold for the provenance field
    let mut z = master_seed
        .wrapping_mul(0x9e3779b97f4a7c15)
        .wrapping_add(domain)
        .wrapping_mul(0xbf58476d1ce4e5b9)
        .wrapping_add(index)
        .wrapping_mul(0x94d049bb133111eb)
        .wrapping_add(epoch);
    z ^= z >> 31;
    z
}

/// Generate item `index` of `epoch` under `spec`. Valid/test splits
/// ignore the epoch (static data); the train split is re-simulated
/// uniquely per epoch (dynamic mixing).
pub fn generate_mixture(
    bank: &SymbolBank,
    spec: &DatasetSpec,
    index: usize,
    epoch: usize,
) -> Result<(MixtureExample, ExampleMeta)> {
    let epoch_key = match spec.split {
        Split::Train => epoch as u64,
        _ => 0,
    };
    let mut rng = chacha_for(spec.master_seed, spec.split.tag(), index as u64, epoch_key);
    let k = bank.alphabet_size() as u8;

    let mut utterances = Vec::with_capacity(spec.speakers);
    for speaker in 0..spec.speakers {
        let n = rng.gen_range(spec.seq_len.0..=spec.seq_len.1);
        let symbols: Vec<u8> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        utterances.push(synth_utterance(&symbols, bank, speaker)?);
    }
    let rirs: Vec<Rir> = (0..spec.speakers)
        .map(|_| sample_rir(&mut rng, &spec.rir))
        .collect();
    let mixing_snr = rng.gen_range(spec.mixing_snr_db.0..=spec.mixing_snr_db.1);
    let noise_snr = rng.gen_range(spec.noise_snr_db.0..=spec.noise_snr_db.1);

    let seed = fold_seed(spec.master_seed, spec.split.tag(), index as u64, epoch_key);
    let transcripts = utterances.iter().map(|u| u.symbols.clone()).collect();
    let example = mix(
        &utterances,
        rirs,
        mixing_snr,
        noise_snr,
        spec.noise_shape,
        bank.sample_rate(),
        &mut rng,
        seed,
    )?;
    let example = match spec.tsl_limit_s {
        Some(limit) => truncate(&example, limit),
        None => example,
    };
    let onsets = example.onsets.clone();
    Ok((example, ExampleMeta { transcripts, onsets }))
}

/// Clean single-speaker utterance with a random amplitude in
/// `gain_range` and a random leading silence up to `max_onset` samples,
/// for recognizer training and held-out scoring. The onset jitter
/// decouples symbol boundaries from the analysis frame grid, matching
/// how references appear inside mixtures.
pub fn generate_clean(
    bank: &SymbolBank,
    master_seed: u64,
    split: Split,
    index: usize,
    epoch: usize,
    seq_len: (usize, usize),
    gain_range: (f64, f64),
    max_onset: usize,
) -> (Utterance, Vec<f64>) {
    let epoch_key = match split {
        Split::Train => epoch as u64,
        _ => 0,
    };
    // domain offset keeps clean items decorrelated from mixtures
    let mut rng = chacha_for(master_seed, 100 + split.tag(), index as u64, epoch_key);
    let k = bank.alphabet_size() as u8;
    let n = rng.gen_range(seq_len.0..=seq_len.1);
    let symbols: Vec<u8> = (0..n).map(|_| rng.gen_range(0..k)).collect();
    let utt = synth_utterance(&symbols, bank, 0).expect("alphabet symbols always valid");
    let gain = rng.gen_range(gain_range.0..=gain_range.1);
    let onset = rng.gen_range(0..=max_onset);
    let mut wave = vec![0.0; onset];
    wave.extend(utt.waveform.iter().map(|v| gain * v));
    (utt, wave)
}

/// PCM16 little-endian mono WAV export, for listening only; canonical
/// storage is always (spec, seed).
pub fn write_wav_pcm16(path: &Path, samples: &[f64], fs: u32) -> Result<()> {
    let io = |e: std::io::Error| SignalError::Io(e.to_string());
    let mut f = std::fs::File::create(path).map_err(io)?;
    let data_len = (samples.len() * 2) as u32;
    let mut header = Vec::with_capacity(44);
    header.extend_from_slice(b"RIFF");
    header.extend_from_slice(&(36 + data_len).to_le_bytes());
    header.extend_from_slice(b"WAVEfmt ");
    header.extend_from_slice(&16u32.to_le_bytes());
    header.extend_from_slice(&1u16.to_le_bytes()); // PCM
    header.extend_from_slice(&1u16.to_le_bytes()); // mono
    header.extend_from_slice(&fs.to_le_bytes());
    header.extend_from_slice(&(fs * 2).to_le_bytes());
    header.extend_from_slice(&2u16.to_le_bytes());
    header.extend_from_slice(&16u16.to_le_bytes());
    header.extend_from_slice(b"data");
    header.extend_from_slice(&data_len.to_le_bytes());
    f.write_all(&header).map_err(io)?;
    for &v in samples {
        let q = (v.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        f.write_all(&q.to_le_bytes()).map_err(io)?;
    }
    Ok(())
}
