//! Time-domain mask-based separator.
//!
//! A strided conv encoder lifts the mixture into `B` latent channels, a
//! small per-frame dense stack produces one sigmoid mask per speaker in
//! that latent space, and a shared transposed-conv decoder resynthesizes
//! each masked representation back to waveform length (overlap-add, then
//! pad or trim to the input length).

use thiserror::Error;

use crate::tensor::{ParamSet, Tape, Tensor, TensorError, Var};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SeparatorError {
    #[error("input of {len} samples is shorter than one encoder kernel ({kernel})")]
    InputTooShort { len: usize, kernel: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, SeparatorError>;

/// Architecture of the separator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeparatorConfig {
    pub kernel: usize,
    pub stride: usize,
    pub channels: usize,
    /// Dense layers in the mask net, sigmoid output layer included.
    pub mask_layers: usize,
    /// Width of the hidden mask layers.
    pub mask_hidden: usize,
    pub speakers: usize,
    pub seed: u64,
}

impl Default for SeparatorConfig {
    fn default() -> Self {
        Self {
            kernel: 16,
            stride: 8,
            channels: 64,
            mask_layers: 3,
            mask_hidden: 64,
            speakers: 2,
            seed: 1,
        }
    }
}

/// Separator parameters.
#[derive(Debug, Clone)]
pub struct SeparatorParams {
    pub cfg: SeparatorConfig,
    pub params: ParamSet,
}

fn uniform_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape, data).unwrap()
}

impl SeparatorParams {
    /// Deterministic fan-in-scaled initialization from the config seed.
    pub fn init(cfg: SeparatorConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let b = cfg.channels;
        let h = cfg.mask_hidden;
        let mut params = ParamSet::new();
        params.push("enc.w", uniform_tensor(&mut rng, vec![b, 1, cfg.kernel], cfg.kernel));
        let mut width = b;
        for layer in 0..cfg.mask_layers.saturating_sub(1) {
            params.push(
                format!("mask.{layer}.w"),
                uniform_tensor(&mut rng, vec![width, h], width),
            );
            params.push(format!("mask.{layer}.b"), Tensor::zeros(vec![1, h]));
            width = h;
        }
        params.push(
            "mask.out.w",
            uniform_tensor(&mut rng, vec![width, cfg.speakers * b], width),
        );
        params.push("mask.out.b", Tensor::zeros(vec![1, cfg.speakers * b]));
        params.push("dec.w", uniform_tensor(&mut rng, vec![b, 1, cfg.kernel], b));
        Self { cfg, params }
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundSeparator<'t> {
        BoundSeparator {
            cfg: self.cfg,
            tape,
            vars: self.params.bind(tape, trainable),
        }
    }

    /// Estimates for a plain waveform, off any caller tape.
    pub fn separate(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        let tape = Tape::new();
        let xv = tape.constant(Tensor::new(vec![1, x.len()], x.to_vec()).map_err(TensorError::from)?);
        let bound = self.bind(&tape, false);
        let ests = bound.forward(xv)?;
        Ok(ests.into_iter().map(|e| e.value().into_data()).collect())
    }

    pub fn meta(&self) -> Vec<(String, String)> {
        vec![
            ("sep.kernel".into(), self.cfg.kernel.to_string()),
            ("sep.stride".into(), self.cfg.stride.to_string()),
            ("sep.channels".into(), self.cfg.channels.to_string()),
            ("sep.mask_layers".into(), self.cfg.mask_layers.to_string()),
            ("sep.mask_hidden".into(), self.cfg.mask_hidden.to_string()),
            ("sep.speakers".into(), self.cfg.speakers.to_string()),
            ("sep.seed".into(), self.cfg.seed.to_string()),
        ]
    }

    pub fn from_parts(params: ParamSet, meta: &[(String, String)]) -> Result<Self> {
        let get = |key: &str| -> Result<u64> {
            meta.iter()
                .find(|(k, _)| k == key)
                .and_then(|(_, v)| v.parse().ok())
                .ok_or_else(|| {
                    SeparatorError::Tensor(TensorError::Checkpoint(format!(
                        "missing metadata {key}"
                    )))
                })
        };
        let cfg = SeparatorConfig {
            kernel: get("sep.kernel")? as usize,
            stride: get("sep.stride")? as usize,
            channels: get("sep.channels")? as usize,
            mask_layers: get("sep.mask_layers")? as usize,
            mask_hidden: get("sep.mask_hidden")? as usize,
            speakers: get("sep.speakers")? as usize,
            seed: get("sep.seed")?,
        };
        Ok(Self { cfg, params })
    }
}

/// Separator parameters bound to one tape.
pub struct BoundSeparator<'t> {
    pub cfg: SeparatorConfig,
    tape: &'t Tape,
    pub vars: Vec<Var<'t>>,
}

impl<'t> BoundSeparator<'t> {
    /// Mixture `[1, L]` to `C` estimates, each `[1, L]`.
    pub fn forward(&self, x: Var<'t>) -> Result<Vec<Var<'t>>> {
        let l = x.shape()[1];
        let cfg = &self.cfg;
        if l < cfg.kernel {
            return Err(SeparatorError::InputTooShort {
                len: l,
                kernel: cfg.kernel,
            });
        }
        let b = cfg.channels;
        let n_hidden = cfg.mask_layers.saturating_sub(1);
        let enc_w = self.vars[0];
        let dec_w = *self.vars.last().unwrap();
        let mask_out_w = self.vars[1 + 2 * n_hidden];
        let mask_out_b = self.vars[2 + 2 * n_hidden];

        let latent = x.conv1d(enc_w, cfg.stride)?.relu(); // [B, F]
        let feats = latent.transpose()?; // [F, B]
        let frames = feats.shape()[0];
        let ones = self.tape.constant(Tensor::full(vec![frames, 1], 1.0));

        let mut h = feats;
        for layer in 0..n_hidden {
            let w = self.vars[1 + 2 * layer];
            let bias = self.vars[2 + 2 * layer];
            h = h.matmul(w)?.add(ones.matmul(bias)?)?.tanh();
        }
        let masks = h
            .matmul(mask_out_w)?
            .add(ones.matmul(mask_out_b)?)?
            .sigmoid(); // [F, C*B]

        let mut ests = Vec::with_capacity(cfg.speakers);
        for c in 0..cfg.speakers {
            let mask_c = masks.slice(1, c * b, (c + 1) * b)?;
            let masked = feats.mul(mask_c)?.transpose()?; // [B, F]
            let mut y = masked.conv1d_transposed(dec_w, cfg.stride)?; // [1, (F-1)*s + P]
            let out_len = y.shape()[1];
            if out_len > l {
                y = y.slice(1, 0, l)?;
            } else if out_len < l {
                let pad = self.tape.constant(Tensor::zeros(vec![1, l - out_len]));
                y = self.tape.concat(&[y, pad], 1)?;
            }
            ests.push(y);
        }
        Ok(ests)
    }
}
