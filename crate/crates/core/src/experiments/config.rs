//! Experiment configuration: a flat `key = value` text format with typed
//! keys, strict unknown-key rejection, canonical serialization, and a
//! content hash that stamps every output artifact.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::ExperimentError;
use crate::recognizer::{RecognizerConfig, RecognizerTrainConfig};
use crate::separator::SeparatorConfig;
use crate::signals::{DatasetSpec, NoiseShape, RirSpec, Split, SymbolBank};

/// Full provenance of any run. Defaults follow the declared toy schedule;
/// every field is overridable from the config file.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub master_seed: u64,
    pub num_seeds: usize,
    pub out_dir: PathBuf,

    // corpus
    pub fs: u32,
    pub alphabet: usize,
    pub symbol_len: usize,
    pub speakers: usize,
    pub seq_len_min: usize,
    pub seq_len_max: usize,
    pub mix_snr_min: f64,
    pub mix_snr_max: f64,
    pub noise_snr_min: f64,
    pub noise_snr_max: f64,
    /// Single-pole low-pass cutoff shaping the noise toward ambient
    /// character; `None` keeps it white.
    pub noise_lowpass_hz: Option<f64>,
    pub rir_reflections: usize,
    pub rir_delay_min_ms: f64,
    pub rir_delay_max_ms: f64,
    pub rir_gain_min: f64,
    pub rir_gain_max: f64,
    pub train_items: usize,
    pub valid_items: usize,
    pub test_items: usize,
    /// Training-signal-length cap in seconds; `None` disables it.
    pub tsl_limit_s: Option<f64>,

    // schedules
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub pretrain_warm_epochs: usize,
    pub plateau_patience: usize,
    pub finetune_ates: usize,
    pub finetune_items: usize,
    pub finetune_lr: f64,
    pub batch_size: usize,
    pub alpha: f64,
    pub ae_on_log_probs: bool,

    // separator
    pub sep_kernel: usize,
    pub sep_stride: usize,
    pub sep_channels: usize,
    pub sep_mask_layers: usize,
    pub sep_mask_hidden: usize,

    // recognizers (A = fine-tuning embedding source, B = unseen evaluator)
    pub rec_window: usize,
    pub rec_hop: usize,
    pub rec_a_features: usize,
    pub rec_a_hidden: usize,
    pub rec_a_seed: u64,
    pub rec_b_features: usize,
    pub rec_b_hidden: usize,
    pub rec_b_seed: u64,
    pub rec_train_items: usize,
    pub rec_train_epochs: usize,
    pub rec_lr: f64,
    pub rec_batch: usize,
    pub rec_held_out: usize,
    pub rec_gain_min: f64,
    pub rec_gain_max: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            master_seed: 1,
            num_seeds: 5,
            out_dir: PathBuf::from("runs/default"),
            fs: 8000,
            alphabet: 8,
            symbol_len: 800,
            speakers: 2,
            seq_len_min: 3,
            seq_len_max: 10,
            mix_snr_min: 0.0,
            mix_snr_max: 5.0,
            noise_snr_min: -6.0,
            noise_snr_max: 3.0,
            noise_lowpass_hz: Some(250.0),
            rir_reflections: 3,
            rir_delay_min_ms: 5.0,
            rir_delay_max_ms: 30.0,
            rir_gain_min: 0.1,
            rir_gain_max: 0.5,
            train_items: 512,
            valid_items: 64,
            test_items: 128,
            tsl_limit_s: Some(1.0),
            pretrain_epochs: 40,
            pretrain_lr: 1e-2,
            pretrain_warm_epochs: 24,
            plateau_patience: 3,
            finetune_ates: 30,
            finetune_items: 256,
            finetune_lr: 1e-5,
            batch_size: 4,
            alpha: 0.0,
            ae_on_log_probs: false,
            sep_kernel: 16,
            sep_stride: 8,
            sep_channels: 64,
            sep_mask_layers: 3,
            sep_mask_hidden: 64,
            rec_window: 256,
            rec_hop: 128,
            rec_a_features: 32,
            rec_a_hidden: 32,
            rec_a_seed: 1001,
            rec_b_features: 28,
            rec_b_hidden: 40,
            rec_b_seed: 2002,
            rec_train_items: 384,
            rec_train_epochs: 8,
            rec_lr: 3e-3,
            rec_batch: 8,
            rec_held_out: 128,
            rec_gain_min: 0.3,
            rec_gain_max: 1.0,
        }
    }
}

macro_rules! config_keys {
    ($($key:literal => $field:ident : $kind:tt),+ $(,)?) => {
        impl ExperimentConfig {
            /// Canonical `key = value` serialization, declaration order.
            pub fn serialize(&self) -> String {
                let mut out = String::new();
                $(
                    out.push_str($key);
                    out.push_str(" = ");
                    out.push_str(&config_keys!(@fmt self, $field, $kind));
                    out.push('\n');
                )+
                out
            }

            fn apply(&mut self, key: &str, value: &str) -> Result<(), ExperimentError> {
                match key {
                    $($key => {
                        config_keys!(@parse self, $field, $kind, key, value);
                        Ok(())
                    })+
                    _ => Err(ExperimentError::Config(format!("unknown key {key:?}"))),
                }
            }
        }
    };
    (@fmt $s:ident, $field:ident, opt_f64) => {
        match $s.$field {
            Some(v) => format!("{v}"),
            None => "none".to_string(),
        }
    };
    (@fmt $s:ident, $field:ident, path) => { $s.$field.display().to_string() };
    (@fmt $s:ident, $field:ident, $kind:tt) => { format!("{}", $s.$field) };
    (@parse $s:ident, $field:ident, opt_f64, $key:ident, $value:ident) => {
        $s.$field = if $value == "none" {
            None
        } else {
            Some($value.parse().map_err(|_| {
                ExperimentError::Config(format!("key {}: bad value {:?}", $key, $value))
            })?)
        };
    };
    (@parse $s:ident, $field:ident, path, $key:ident, $value:ident) => {
        $s.$field = PathBuf::from($value);
    };
    (@parse $s:ident, $field:ident, $kind:tt, $key:ident, $value:ident) => {
        $s.$field = $value.parse().map_err(|_| {
            ExperimentError::Config(format!("key {}: bad value {:?}", $key, $value))
        })?;
    };
}

config_keys! {
    "master_seed" => master_seed: u64,
    "num_seeds" => num_seeds: usize,
    "out_dir" => out_dir: path,
    "fs" => fs: u32,
    "alphabet" => alphabet: usize,
    "symbol_len" => symbol_len: usize,
    "speakers" => speakers: usize,
    "seq_len_min" => seq_len_min: usize,
    "seq_len_max" => seq_len_max: usize,
    "mix_snr_min" => mix_snr_min: f64,
    "mix_snr_max" => mix_snr_max: f64,
    "noise_snr_min" => noise_snr_min: f64,
    "noise_snr_max" => noise_snr_max: f64,
    "noise_lowpass_hz" => noise_lowpass_hz: opt_f64,
    "rir_reflections" => rir_reflections: usize,
    "rir_delay_min_ms" => rir_delay_min_ms: f64,
    "rir_delay_max_ms" => rir_delay_max_ms: f64,
    "rir_gain_min" => rir_gain_min: f64,
    "rir_gain_max" => rir_gain_max: f64,
    "train_items" => train_items: usize,
    "valid_items" => valid_items: usize,
    "test_items" => test_items: usize,
    "tsl_limit_s" => tsl_limit_s: opt_f64,
    "pretrain_epochs" => pretrain_epochs: usize,
    "pretrain_lr" => pretrain_lr: f64,
    "pretrain_warm_epochs" => pretrain_warm_epochs: usize,
    "plateau_patience" => plateau_patience: usize,
    "finetune_ates" => finetune_ates: usize,
    "finetune_items" => finetune_items: usize,
    "finetune_lr" => finetune_lr: f64,
    "batch_size" => batch_size: usize,
    "alpha" => alpha: f64,
    "ae_on_log_probs" => ae_on_log_probs: bool,
    "sep_kernel" => sep_kernel: usize,
    "sep_stride" => sep_stride: usize,
    "sep_channels" => sep_channels: usize,
    "sep_mask_layers" => sep_mask_layers: usize,
    "sep_mask_hidden" => sep_mask_hidden: usize,
    "rec_window" => rec_window: usize,
    "rec_hop" => rec_hop: usize,
    "rec_a_features" => rec_a_features: usize,
    "rec_a_hidden" => rec_a_hidden: usize,
    "rec_a_seed" => rec_a_seed: u64,
    "rec_b_features" => rec_b_features: usize,
    "rec_b_hidden" => rec_b_hidden: usize,
    "rec_b_seed" => rec_b_seed: u64,
    "rec_train_items" => rec_train_items: usize,
    "rec_train_epochs" => rec_train_epochs: usize,
    "rec_lr" => rec_lr: f64,
    "rec_batch" => rec_batch: usize,
    "rec_held_out" => rec_held_out: usize,
    "rec_gain_min" => rec_gain_min: f64,
    "rec_gain_max" => rec_gain_max: f64,
}

impl ExperimentConfig {
    /// Parse the flat config format. Lines are `key = value`; blank lines
    /// and `#` comments are skipped; unknown keys are hard errors.
    pub fn parse(text: &str) -> Result<Self, ExperimentError> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ExperimentError::Config(format!(
                    "line {}: expected `key = value`, got {raw:?}",
                    lineno + 1
                )));
            };
            cfg.apply(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ExperimentError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Apply one `key=value` override.
    pub fn set(&mut self, assignment: &str) -> Result<(), ExperimentError> {
        let Some((key, value)) = assignment.split_once('=') else {
            return Err(ExperimentError::Config(format!(
                "override must be key=value, got {assignment:?}"
            )));
        };
        self.apply(key.trim(), value.trim())?;
        self.validate()
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |msg: String| Err(ExperimentError::Config(msg));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        if self.seq_len_min < 1 || self.seq_len_min > self.seq_len_max {
            return bad("seq_len range is empty".into());
        }
        if self.speakers < 2 {
            return bad("speakers must be >= 2".into());
        }
        if self.batch_size == 0 || self.num_seeds == 0 {
            return bad("batch_size and num_seeds must be positive".into());
        }
        if let Some(t) = self.tsl_limit_s {
            if t <= 0.0 {
                return bad("tsl_limit_s must be positive or none".into());
            }
        }
        Ok(())
    }

    /// First 16 hex chars of the SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.serialize().as_bytes());
        let digest = hasher.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Single-line form for CSV provenance comments.
    pub fn one_line(&self) -> String {
        self.serialize().trim_end().replace('\n', "; ")
    }

    pub fn bank(&self) -> SymbolBank {
        SymbolBank::new(self.alphabet, self.symbol_len, self.fs)
    }

    fn rir_spec(&self) -> RirSpec {
        RirSpec {
            reflections: self.rir_reflections,
            delay_range: (
                (self.rir_delay_min_ms / 1000.0 * self.fs as f64) as usize,
                (self.rir_delay_max_ms / 1000.0 * self.fs as f64) as usize,
            ),
            gain_range: (self.rir_gain_min, self.rir_gain_max),
        }
    }

    /// Dataset spec for one split under a per-run seed. Train items obey
    /// the TSL limit; valid/test are never truncated.
    pub fn dataset(&self, split: Split, run_seed: u64) -> DatasetSpec {
        let (items, tsl) = match split {
            Split::Train => (self.train_items, self.tsl_limit_s),
            Split::Valid => (self.valid_items, None),
            Split::Test => (self.test_items, None),
        };
        DatasetSpec {
            split,
            items,
            speakers: self.speakers,
            seq_len: (self.seq_len_min, self.seq_len_max),
            mixing_snr_db: (self.mix_snr_min, self.mix_snr_max),
            noise_snr_db: (self.noise_snr_min, self.noise_snr_max),
            tsl_limit_s: tsl,
            master_seed: run_seed,
            rir: self.rir_spec(),
            noise_shape: NoiseShape {
                lowpass_hz: self.noise_lowpass_hz,
            },
        }
    }

    pub fn separator(&self, run_seed: u64) -> SeparatorConfig {
        SeparatorConfig {
            kernel: self.sep_kernel,
            stride: self.sep_stride,
            channels: self.sep_channels,
            mask_layers: self.sep_mask_layers,
            mask_hidden: self.sep_mask_hidden,
            speakers: self.speakers,
            seed: run_seed,
        }
    }

    pub fn recognizer_a(&self) -> RecognizerConfig {
        RecognizerConfig {
            alphabet: self.alphabet,
            window: self.rec_window,
            hop: self.rec_hop,
            features: self.rec_a_features,
            hidden: self.rec_a_hidden,
            seed: self.rec_a_seed,
        }
    }

    pub fn recognizer_b(&self) -> RecognizerConfig {
        RecognizerConfig {
            alphabet: self.alphabet,
            window: self.rec_window,
            hop: self.rec_hop,
            features: self.rec_b_features,
            hidden: self.rec_b_hidden,
            seed: self.rec_b_seed,
        }
    }

    pub fn recognizer_training(&self) -> RecognizerTrainConfig {
        RecognizerTrainConfig {
            items: self.rec_train_items,
            epochs: self.rec_train_epochs,
            batch: self.rec_batch,
            lr: self.rec_lr,
            seq_len: (self.seq_len_min, self.seq_len_max),
            gain_range: (self.rec_gain_min, self.rec_gain_max),
            max_onset: self.symbol_len,
            held_out: self.rec_held_out,
            data_seed: self.rec_a_seed ^ self.rec_b_seed,
        }
    }

    /// Seed of run `index` in the multi-seed protocol.
    pub fn run_seed(&self, index: usize) -> u64 {
        self.master_seed.wrapping_add(index as u64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn serialize_parse_round_trip() {
        let cfg = ExperimentConfig::default();
        let text = cfg.serialize();
        let parsed = ExperimentConfig::parse(&text).unwrap();
        assert_eq!(parsed, cfg);
        assert_eq!(parsed.hash(), cfg.hash());
    }

    #[test]
    fn unknown_key_is_a_hard_error() {
        let err = ExperimentConfig::parse("bogus_key = 3\n").unwrap_err();
        assert!(err.to_string().contains("unknown key"));
    }

    #[test]
    fn bad_value_names_the_key() {
        let err = ExperimentConfig::parse("master_seed = banana\n").unwrap_err();
        assert!(err.to_string().contains("master_seed"));
    }

    #[test]
    fn optional_tsl_parses_none() {
        let cfg = ExperimentConfig::parse("tsl_limit_s = none\n").unwrap();
        assert_eq!(cfg.tsl_limit_s, None);
        let cfg = ExperimentConfig::parse("tsl_limit_s = 0.5\n").unwrap();
        assert_eq!(cfg.tsl_limit_s, Some(0.5));
    }

    #[test]
    fn overrides_and_hash_sensitivity() {
        let mut cfg = ExperimentConfig::default();
        let h0 = cfg.hash();
        cfg.set("alpha=0.4").unwrap();
        assert_eq!(cfg.alpha, 0.4);
        assert_ne!(cfg.hash(), h0);
        assert!(cfg.set("alpha=2.0").is_err());
    }

    #[test]
    fn comments_and_blank_lines_are_skipped() {
        let cfg = ExperimentConfig::parse("# a comment\n\nmaster_seed = 9\n").unwrap();
        assert_eq!(cfg.master_seed, 9);
    }
}
