//! Toy CTC recognizer over raw waveforms.
//!
//! The encoder maps a length-`L_x` waveform to an `L x N` logit sequence
//! through a strided conv frontend (window 256, hop 128 by default), two
//! tanh dense layers, and a linear projection. `N` is the alphabet size
//! plus one CTC blank (the last index). The CTC loss is the log-space
//! forward algorithm over the blank-augmented label sequence, built from
//! log-softmax and log-add-exp tape primitives so it is differentiable
//! end to end.

use thiserror::Error;

use crate::metrics;
use crate::signals::{generate_clean, Split, SymbolBank};
use crate::tensor::{
    adam_step, AdamConfig, AdamState, ParamSet, Tape, Tensor, TensorError, Var,
};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RecognizerError {
    #[error("input of {len} samples is shorter than one analysis window ({window})")]
    InputTooShort { len: usize, window: usize },
    #[error("target needs at least {needed} frames but only {frames} are available")]
    InfeasibleTarget { frames: usize, needed: usize },
    #[error("training diverged at step {step} (loss {loss}); seed {seed}")]
    Diverged { step: usize, loss: f64, seed: u64 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, RecognizerError>;

/// Architecture of one recognizer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecognizerConfig {
    pub alphabet: usize,
    pub window: usize,
    pub hop: usize,
    pub features: usize,
    pub hidden: usize,
    pub seed: u64,
}

impl RecognizerConfig {
    /// Output symbols including the blank.
    pub fn n_symbols(&self) -> usize {
        self.alphabet + 1
    }

    /// Blank id (last index).
    pub fn blank(&self) -> u8 {
        self.alphabet as u8
    }

    /// Frames produced for an input of `l_x` samples.
    pub fn frames(&self, l_x: usize) -> Result<usize> {
        if l_x < self.window {
            return Err(RecognizerError::InputTooShort {
                len: l_x,
                window: self.window,
            });
        }
        Ok((l_x - self.window) / self.hop + 1)
    }
}

/// Trained (or freshly initialized) recognizer parameters.
#[derive(Debug, Clone)]
pub struct RecognizerParams {
    pub cfg: RecognizerConfig,
    pub params: ParamSet,
}

fn uniform_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape, data).unwrap()
}

impl RecognizerParams {
    /// Deterministic fan-in-scaled initialization from the config seed.
    pub fn init(cfg: RecognizerConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (f, h, n) = (cfg.features, cfg.hidden, cfg.n_symbols());
        let mut params = ParamSet::new();
        params.push(
            "front.w",
            uniform_tensor(&mut rng, vec![f, 1, cfg.window], 1.0 / (cfg.window as f64).sqrt()),
        );
        params.push("d1.w", uniform_tensor(&mut rng, vec![f, h], 1.0 / (f as f64).sqrt()));
        params.push("d1.b", Tensor::zeros(vec![1, h]));
        params.push("d2.w", uniform_tensor(&mut rng, vec![h, h], 1.0 / (h as f64).sqrt()));
        params.push("d2.b", Tensor::zeros(vec![1, h]));
        params.push("out.w", uniform_tensor(&mut rng, vec![h, n], 1.0 / (h as f64).sqrt()));
        params.push("out.b", Tensor::zeros(vec![1, n]));
        Self { cfg, params }
    }

    /// Bind onto a tape. Frozen recognizers bind with `trainable = false`
    /// so no gradient ever reaches their parameters.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundRecognizer<'t> {
        BoundRecognizer {
            cfg: self.cfg,
            tape,
            vars: self.params.bind(tape, trainable),
        }
    }

    /// Logits for a plain waveform, off any caller tape.
    pub fn encode(&self, wave: &[f64]) -> Result<Tensor> {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, wave.len()], wave.to_vec())?);
        let bound = self.bind(&tape, false);
        Ok(bound.encode(x)?.value())
    }

    /// Checkpoint metadata describing this architecture.
    pub fn meta(&self) -> Vec<(String, String)> {
        vec![
            ("rec.alphabet".into(), self.cfg.alphabet.to_string()),
            ("rec.window".into(), self.cfg.window.to_string()),
            ("rec.hop".into(), self.cfg.hop.to_string()),
            ("rec.features".into(), self.cfg.features.to_string()),
            ("rec.hidden".into(), self.cfg.hidden.to_string()),
            ("rec.seed".into(), self.cfg.seed.to_string()),
        ]
    }

    /// Rebuild from checkpoint parts.
    pub fn from_parts(params: ParamSet, meta: &[(String, String)]) -> Result<Self> {
        let get = |key: &str| -> Result<u64> {
            meta.iter()
                .find(|(k, _)| k == key)
                .and_then(|(_, v)| v.parse().ok())
                .ok_or_else(|| {
                    RecognizerError::Tensor(TensorError::Checkpoint(format!(
                        "missing metadata {key}"
                    )))
                })
        };
        let cfg = RecognizerConfig {
            alphabet: get("rec.alphabet")? as usize,
            window: get("rec.window")? as usize,
            hop: get("rec.hop")? as usize,
            features: get("rec.features")? as usize,
            hidden: get("rec.hidden")? as usize,
            seed: get("rec.seed")?,
        };
        Ok(Self { cfg, params })
    }
}

/// Recognizer parameters bound to one tape.
pub struct BoundRecognizer<'t> {
    pub cfg: RecognizerConfig,
    tape: &'t Tape,
    pub vars: Vec<Var<'t>>,
}

/// `x @ w + b` with the bias broadcast over rows via a ones column.
fn dense<'t>(
    tape: &'t Tape,
    x: Var<'t>,
    w: Var<'t>,
    b: Var<'t>,
) -> std::result::Result<Var<'t>, TensorError> {
    let rows = x.shape()[0];
    let ones = tape.constant(Tensor::full(vec![rows, 1], 1.0));
    x.matmul(w)?.add(ones.matmul(b)?)
}

impl<'t> BoundRecognizer<'t> {
    /// Map a `[1, L_x]` waveform to `[L, N]` pre-softmax logits.
    pub fn encode(&self, x: Var<'t>) -> Result<Var<'t>> {
        let l_x = x.shape()[1];
        self.cfg.frames(l_x)?;
        let [front_w, d1w, d1b, d2w, d2b, ow, ob] = self.vars[..] else {
            unreachable!("recognizer always binds 7 parameters")
        };
        let frames = x.conv1d(front_w, self.cfg.hop)?.relu(); // [F, L]
        let feats = frames.transpose()?; // [L, F]
        let h1 = dense(self.tape, feats, d1w, d1b)?.tanh();
        let h2 = dense(self.tape, h1, d2w, d2b)?.tanh();
        let logits = dense(self.tape, h2, ow, ob)?; // [L, N]
        Ok(logits)
    }
}

/// Greedy CTC decoding: per-frame argmax (ties toward the lowest index),
/// collapse consecutive repeats, delete blanks.
pub fn greedy_decode(logits: &Tensor, blank: u8) -> Vec<u8> {
    let n = *logits.shape().last().expect("logits must be L x N");
    let frames = logits.numel() / n;
    let mut out = Vec::new();
    let mut prev: Option<u8> = None;
    for t in 0..frames {
        let row = &logits.data()[t * n..(t + 1) * n];
        let mut best = 0usize;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        let sym = best as u8;
        if Some(sym) != prev && sym != blank {
            out.push(sym);
        }
        prev = Some(sym);
    }
    out
}

/// Minimum frames a CTC alignment needs: one per label plus one separator
/// blank between adjacent repeats.
fn min_frames(target: &[u8]) -> usize {
    let repeats = target.windows(2).filter(|w| w[0] == w[1]).count();
    target.len() + repeats
}

/// Negative log-likelihood of `target` under the CTC model, via the
/// log-space forward algorithm on the blank-augmented label sequence.
/// Differentiable through `logits`.
pub fn ctc_loss<'t>(logits: Var<'t>, target: &[u8], blank: u8) -> Result<Var<'t>> {
    let shape = logits.shape();
    assert_eq!(shape.len(), 2, "logits must be L x N");
    let frames = shape[0];
    let needed = min_frames(target).max(1);
    if frames < needed {
        return Err(RecognizerError::InfeasibleTarget { frames, needed });
    }

    let lsm = logits.log_softmax(); // [L, N]
    // per-frame rows, sliced once
    let rows: Vec<Var> = (0..frames)
        .map(|t| lsm.slice(0, t, t + 1).expect("frame index in range"))
        .collect();
    let lp = |t: usize, sym: u8| -> Var<'t> {
        rows[t]
            .slice(1, sym as usize, sym as usize + 1)
            .expect("symbol index in range")
    };

    // blank-augmented labels: blank, t1, blank, t2, ..., blank
    let s_len = 2 * target.len() + 1;
    let label = |s: usize| -> u8 {
        if s % 2 == 0 {
            blank
        } else {
            target[(s - 1) / 2]
        }
    };

    let mut alpha: Vec<Option<Var>> = vec![None; s_len];
    alpha[0] = Some(lp(0, blank));
    if s_len > 1 {
        alpha[1] = Some(lp(0, label(1)));
    }
    for t in 1..frames {
        let mut next: Vec<Option<Var>> = vec![None; s_len];
        for s in 0..s_len {
            let mut pred = alpha[s];
            if s >= 1 {
                pred = combine(pred, alpha[s - 1])?;
            }
            if s >= 2 && label(s) != blank && label(s) != label(s - 2) {
                pred = combine(pred, alpha[s - 2])?;
            }
            next[s] = match pred {
                Some(p) => Some(p.add(lp(t, label(s))).map_err(TensorError::from)?),
                None => None,
            };
        }
        alpha = next;
    }

    let mut total = alpha[s_len - 1];
    if s_len >= 2 {
        total = combine(total, alpha[s_len - 2])?;
    }
    let total = total.expect("feasible target always reaches a final state");
    Ok(total.neg())
}

fn combine<'t>(a: Option<Var<'t>>, b: Option<Var<'t>>) -> Result<Option<Var<'t>>> {
    Ok(match (a, b) {
        (Some(x), Some(y)) => Some(x.logaddexp(y).map_err(TensorError::from)?),
        (Some(x), None) => Some(x),
        (None, Some(y)) => Some(y),
        (None, None) => None,
    })
}

/// Training schedule for a recognizer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecognizerTrainConfig {
    pub items: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seq_len: (usize, usize),
    pub gain_range: (f64, f64),
    /// Max leading-silence jitter in samples, so decoding is robust to
    /// frame-grid phase.
    pub max_onset: usize,
    pub held_out: usize,
    pub data_seed: u64,
}

impl Default for RecognizerTrainConfig {
    fn default() -> Self {
        Self {
            items: 384,
            epochs: 8,
            batch: 8,
            lr: 3e-3,
            seq_len: (3, 10),
            gain_range: (0.3, 1.0),
            max_onset: 800,
            held_out: 128,
            data_seed: 77,
        }
    }
}

/// Train a recognizer on clean single-speaker utterances with random
/// amplitudes; returns the trained parameters and the held-out clean WER.
/// The caller freezes the result.
pub fn train_recognizer(
    bank: &SymbolBank,
    cfg: RecognizerConfig,
    train: &RecognizerTrainConfig,
) -> Result<(RecognizerParams, f64)> {
    let mut rec = RecognizerParams::init(cfg);
    let mut adam = AdamState::new(AdamConfig::with_lr(train.lr), &rec.params);
    let mut step = 0usize;
    for epoch in 0..train.epochs {
        let mut batch_grads: Option<Vec<Tensor>> = None;
        let mut in_batch = 0usize;
        for i in 0..train.items {
            let (utt, wave) = generate_clean(
                bank,
                train.data_seed,
                Split::Train,
                i,
                epoch,
                train.seq_len,
                train.gain_range,
                train.max_onset,
            );
            let tape = Tape::new();
            let x = tape.constant(Tensor::new(vec![1, wave.len()], wave)?);
            let bound = rec.bind(&tape, true);
            let logits = bound.encode(x)?;
            let loss = ctc_loss(logits, &utt.symbols, cfg.blank())?;
            let loss_val = loss.item();
            if !loss_val.is_finite() {
                return Err(RecognizerError::Diverged {
                    step,
                    loss: loss_val,
                    seed: train.data_seed,
                });
            }
            tape.backward(loss)?;
            let grads = rec.params.grads(&bound.vars)?;
            match &mut batch_grads {
                None => batch_grads = Some(grads),
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&grads) {
                        for (av, gv) in a.data_mut().iter_mut().zip(g.data()) {
                            *av += gv;
                        }
                    }
                }
            }
            in_batch += 1;
            step += 1;
            if in_batch == train.batch || i + 1 == train.items {
                let mut grads = batch_grads.take().unwrap();
                let scale = 1.0 / in_batch as f64;
                for g in grads.iter_mut() {
                    for v in g.data_mut() {
                        *v *= scale;
                    }
                }
                adam_step(&mut rec.params, &grads, &mut adam)?;
                in_batch = 0;
            }
        }
    }
    let wer = clean_wer(bank, &rec, train)?;
    Ok((rec, wer))
}

/// Corpus-level WER of greedy decoding on held-out clean utterances.
pub fn clean_wer(
    bank: &SymbolBank,
    rec: &RecognizerParams,
    train: &RecognizerTrainConfig,
) -> Result<f64> {
    let mut errors = 0usize;
    let mut words = 0usize;
    for i in 0..train.held_out {
        let (utt, wave) = generate_clean(
            bank,
            train.data_seed,
            Split::Valid,
            i,
            0,
            train.seq_len,
            train.gain_range,
            train.max_onset,
        );
        let logits = rec.encode(&wave)?;
        let hyp = greedy_decode(&logits, rec.cfg.blank());
        let (e, _, _, _) = metrics::word_edit_distance(&utt.symbols, &hyp);
        errors += e;
        words += utt.symbols.len();
    }
    Ok(errors as f64 / words as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> RecognizerConfig {
        RecognizerConfig {
            alphabet: 8,
            window: 256,
            hop: 128,
            features: 8,
            hidden: 8,
            seed: 5,
        }
    }

    #[test]
    fn frame_formula() {
        let cfg = tiny_cfg();
        assert_eq!(cfg.frames(8000).unwrap(), 61);
        assert_eq!(cfg.frames(256).unwrap(), 1);
        assert!(matches!(
            cfg.frames(255),
            Err(RecognizerError::InputTooShort { .. })
        ));
    }

    #[test]
    fn encode_shape_and_determinism() {
        let cfg = tiny_cfg();
        let rec = RecognizerParams::init(cfg);
        let wave: Vec<f64> = (0..1000).map(|i| (i as f64 * 0.05).sin()).collect();
        let a = rec.encode(&wave).unwrap();
        let b = rec.encode(&wave).unwrap();
        assert_eq!(a.shape(), &[cfg.frames(1000).unwrap(), 9]);
        assert_eq!(a, b);
    }

    #[test]
    fn greedy_decode_collapses_and_separates() {
        // frames argmax: a a blank b b -> "a b"
        let blank = 2u8;
        let row = |sym: usize| {
            let mut r = vec![0.0; 3];
            r[sym] = 5.0;
            r
        };
        let mut data = Vec::new();
        for s in [0usize, 0, 2, 1, 1] {
            data.extend(row(s));
        }
        let logits = Tensor::new(vec![5, 3], data).unwrap();
        assert_eq!(greedy_decode(&logits, blank), vec![0, 1]);

        // all blanks
        let all_blank = Tensor::new(vec![3, 3], [row(2), row(2), row(2)].concat()).unwrap();
        assert_eq!(greedy_decode(&all_blank, blank), Vec::<u8>::new());

        // blank separates repeats: a blank a -> "a a"
        let aba = Tensor::new(vec![3, 3], [row(0), row(2), row(0)].concat()).unwrap();
        assert_eq!(greedy_decode(&aba, blank), vec![0, 0]);

        // argmax ties break toward the lowest index
        let tie = Tensor::new(vec![1, 3], vec![1.0, 1.0, 0.0]).unwrap();
        assert_eq!(greedy_decode(&tie, blank), vec![0]);
    }

    #[test]
    fn ctc_uniform_two_frame_case() {
        // N = 2 (symbol a=0 + blank=1), L = 2, uniform logits, target "a":
        // 3 of the 4 equally likely frame paths collapse to "a".
        let tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(vec![2, 2]), true);
        let loss = ctc_loss(logits, &[0], 1).unwrap();
        let expected = -(3.0f64 / 4.0).ln();
        assert!((loss.item() - expected).abs() < 1e-12, "got {}", loss.item());
    }

    #[test]
    fn ctc_empty_target_is_all_blank_path() {
        let tape = Tape::new();
        let t = Tensor::new(vec![3, 4], (0..12).map(|i| (i as f64 * 0.713).sin()).collect()).unwrap();
        let logits = tape.leaf(t.clone(), true);
        let loss = ctc_loss(logits, &[], 3).unwrap();
        // reference: -sum_t logsoftmax(row_t)[blank]
        let tape2 = Tape::new();
        let lsm = tape2.constant(t).log_softmax().value();
        let expected: f64 = -(0..3).map(|t| lsm.data()[t * 4 + 3]).sum::<f64>();
        assert!((loss.item() - expected).abs() < 1e-12);
    }

    #[test]
    fn ctc_infeasible_target_is_rejected() {
        let tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(vec![2, 3]));
        // "aa" needs 3 frames (repeat separator)
        let err = ctc_loss(logits, &[0, 0], 2).unwrap_err();
        assert!(matches!(err, RecognizerError::InfeasibleTarget { frames: 2, needed: 3 }));
    }

    /// Exhaustive CTC oracle: enumerate every frame path, collapse, and
    /// accumulate the probability of paths that collapse to the target.
    fn ctc_brute_force(logits: &Tensor, target: &[u8], blank: u8) -> f64 {
        let n = logits.shape()[1];
        let frames = logits.shape()[0];
        // per-frame softmax
        let mut probs = vec![0.0; frames * n];
        for t in 0..frames {
            let row = &logits.data()[t * n..(t + 1) * n];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&v| (v - m).exp()).sum();
            for i in 0..n {
                probs[t * n + i] = (row[i] - m).exp() / z;
            }
        }
        let mut total = 0.0;
        let mut path = vec![0usize; frames];
        loop {
            // collapse
            let mut collapsed = Vec::new();
            let mut prev = None;
            for &p in &path {
                if Some(p) != prev && p != blank as usize {
                    collapsed.push(p as u8);
                }
                prev = Some(p);
            }
            if collapsed == target {
                let mut p = 1.0;
                for (t, &sym) in path.iter().enumerate() {
                    p *= probs[t * n + sym];
                }
                total += p;
            }
            // next path in odometer order
            let mut t = 0;
            loop {
                if t == frames {
                    return -total.ln();
                }
                path[t] += 1;
                if path[t] < n {
                    break;
                }
                path[t] = 0;
                t += 1;
            }
        }
    }

    #[test]
    fn ctc_matches_exhaustive_enumeration() {
        // all instances with L <= 6 is large; sweep a deterministic grid
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for &(frames, n, tlen) in &[
            (2usize, 2usize, 1usize),
            (3, 2, 1),
            (4, 3, 2),
            (5, 3, 2),
            (5, 4, 3),
            (6, 4, 3),
            (6, 3, 2),
            (6, 2, 1),
            (4, 4, 0),
        ] {
            let blank = (n - 1) as u8;
            for _ in 0..4 {
                let logits = Tensor::new(
                    vec![frames, n],
                    (0..frames * n).map(|_| rng.gen_range(-2.0..2.0)).collect(),
                )
                .unwrap();
                let target: Vec<u8> = (0..tlen).map(|_| rng.gen_range(0..n as u8 - 1)).collect();
                if min_frames(&target) > frames {
                    continue;
                }
                let tape = Tape::new();
                let lv = tape.leaf(logits.clone(), true);
                let loss = ctc_loss(lv, &target, blank).unwrap();
                let expected = ctc_brute_force(&logits, &target, blank);
                assert!(
                    (loss.item() - expected).abs() < 1e-9,
                    "L={frames} N={n} target={target:?}: {} vs {expected}",
                    loss.item()
                );
                assert!(loss.item() >= 0.0);
            }
        }
    }

    #[test]
    fn ctc_gradient_passes_finite_differences() {
        use crate::tensor::grad_check;
        let x = Tensor::new(vec![4, 3], (0..12).map(|i| (i as f64 * 0.917).sin()).collect()).unwrap();
        let err = grad_check(
            |_, v| ctc_loss(v, &[0, 1], 2).expect("feasible"),
            &x,
            1e-6,
        );
        assert!(err <= 1e-5, "err = {err}");
    }
}
