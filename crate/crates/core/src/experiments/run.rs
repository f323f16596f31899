//! The experiment arc: recognizer training, separator pretraining with
//! dynamic mixing, the fine-tuning arms, evaluation tables, the weight
//! and signal-length sweeps, and encoder-output dumps.
//!
//! Every run is a pure function of its config and run seed. Commands
//! write provenance-stamped artifacts under the config's output
//! directory; reruns produce bit-identical bytes (wall-clock timing goes
//! to a separate file excluded from that guarantee).

use std::path::{Path, PathBuf};
use std::time::Instant;

use super::config::ExperimentConfig;
use super::csvio::{fmt_f64, write_csv, Provenance};
use super::table::{MetricsTable, TableRow, MIXTURE_LABEL, ORACLE_LABEL};
use super::ExperimentError;
use crate::losses::{
    gpit_loss, joint_loss, pit_loss, solve_permutation, AeInput, AePair, JointLossConfig,
    SisdrPair,
};
use crate::metrics::{cp_wer, orc_wer, EvalReport, ItemEval, RefUtterance};
use crate::recognizer::{greedy_decode, train_recognizer, RecognizerParams};
use crate::separator::SeparatorParams;
use crate::signals::{generate_mixture, sisdr, MixtureExample, Split};
use crate::tensor::{
    adam_step, load_checkpoint, save_checkpoint, AdamConfig, AdamState, Tape, Tensor,
};

type Result<T> = std::result::Result<T, ExperimentError>;

/// Fine-tuning arm selection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Arm {
    /// Continue the signal-level objective: PIT over negative SI-SDR.
    Sisdr,
    /// Encoder-difference loss applied under the SI-SDR-guided
    /// permutation.
    Ae,
    /// Weighted combination of the two at the guided permutation.
    Joint(f64),
}

impl Arm {
    pub fn dir_name(&self) -> String {
        match self {
            Arm::Sisdr => "sisdr".into(),
            Arm::Ae => "ae".into(),
            Arm::Joint(alpha) => format!("joint_{}", fmt_f64(*alpha)),
        }
    }
}

/// Which recognizer to evaluate with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecSelector {
    A,
    B,
}

impl RecSelector {
    pub fn file_name(&self) -> &'static str {
        match self {
            RecSelector::A => "recognizer_a.ckpt",
            RecSelector::B => "recognizer_b.ckpt",
        }
    }

    pub fn short(&self) -> &'static str {
        match self {
            RecSelector::A => "a",
            RecSelector::B => "b",
        }
    }
}

fn ae_input(cfg: &ExperimentConfig) -> AeInput {
    if cfg.ae_on_log_probs {
        AeInput::LogProbs
    } else {
        AeInput::Logits
    }
}

fn provenance(cfg: &ExperimentConfig, seed: u64) -> Provenance {
    Provenance {
        config_hash: cfg.hash(),
        seed,
        config_line: cfg.one_line(),
    }
}

fn seed_dir(cfg: &ExperimentConfig, run_seed: u64) -> PathBuf {
    cfg.out_dir.join(format!("seed_{run_seed}"))
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| ExperimentError::Io(format!("{}: {e}", path.display())))
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(ExperimentError::Missing(path.display().to_string()))
    }
}

// ---------------------------------------------------------------------------
// Checkpoint plumbing
// ---------------------------------------------------------------------------

fn base_meta(cfg: &ExperimentConfig, run_seed: u64) -> Vec<(String, String)> {
    vec![
        ("config_hash".into(), cfg.hash()),
        ("run_seed".into(), run_seed.to_string()),
        ("config_text".into(), cfg.one_line()),
    ]
}

pub fn save_separator_checkpoint(
    path: &Path,
    sep: &SeparatorParams,
    cfg: &ExperimentConfig,
    run_seed: u64,
    extra: &[(String, String)],
) -> Result<()> {
    let mut meta = base_meta(cfg, run_seed);
    meta.extend(sep.meta());
    meta.extend(extra.iter().cloned());
    save_checkpoint(path, &sep.params, &meta)?;
    Ok(())
}

pub fn load_separator_checkpoint(
    path: &Path,
) -> Result<(SeparatorParams, Vec<(String, String)>)> {
    require(path)?;
    let (params, meta) = load_checkpoint(path)?;
    let sep = SeparatorParams::from_parts(params, &meta)?;
    Ok((sep, meta))
}

pub fn save_recognizer_checkpoint(
    path: &Path,
    rec: &RecognizerParams,
    cfg: &ExperimentConfig,
    extra: &[(String, String)],
) -> Result<()> {
    let mut meta = base_meta(cfg, cfg.master_seed);
    meta.extend(rec.meta());
    meta.extend(extra.iter().cloned());
    save_checkpoint(path, &rec.params, &meta)?;
    Ok(())
}

pub fn load_recognizer_checkpoint(
    path: &Path,
) -> Result<(RecognizerParams, Vec<(String, String)>)> {
    require(path)?;
    let (params, meta) = load_checkpoint(path)?;
    let rec = RecognizerParams::from_parts(params, &meta)?;
    Ok((rec, meta))
}

fn meta_value<'m>(meta: &'m [(String, String)], key: &str) -> Option<&'m str> {
    meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
}

// ---------------------------------------------------------------------------
// Gradient batching
// ---------------------------------------------------------------------------

struct GradAccum {
    acc: Option<Vec<Tensor>>,
    count: usize,
}

impl GradAccum {
    fn new() -> Self {
        Self { acc: None, count: 0 }
    }

    fn add(&mut self, grads: Vec<Tensor>) {
        match &mut self.acc {
            None => self.acc = Some(grads),
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(&grads) {
                    for (av, gv) in a.data_mut().iter_mut().zip(g.data()) {
                        *av += gv;
                    }
                }
            }
        }
        self.count += 1;
    }

    fn take_mean(&mut self) -> Option<Vec<Tensor>> {
        let mut grads = self.acc.take()?;
        let scale = 1.0 / self.count as f64;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
        self.count = 0;
        Some(grads)
    }
}

// ---------------------------------------------------------------------------
// Recognizer training
// ---------------------------------------------------------------------------

pub struct RecognizerPair {
    pub a: RecognizerParams,
    pub b: RecognizerParams,
    pub clean_wer_a: f64,
    pub clean_wer_b: f64,
}

/// Train recognizers A (embedding source) and B (unseen evaluator) on
/// clean single-speaker utterances. Both are frozen afterwards.
pub fn train_recognizers(cfg: &ExperimentConfig) -> Result<RecognizerPair> {
    let bank = cfg.bank();
    let train = cfg.recognizer_training();
    let (a, clean_wer_a) = train_recognizer(&bank, cfg.recognizer_a(), &train)?;
    let (b, clean_wer_b) = train_recognizer(&bank, cfg.recognizer_b(), &train)?;
    Ok(RecognizerPair {
        a,
        b,
        clean_wer_a,
        clean_wer_b,
    })
}

// ---------------------------------------------------------------------------
// Separator pretraining
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_train_loss: f64,
    pub valid_sisdr_db: f64,
    pub lr: f64,
}

pub struct PretrainOutcome {
    pub separator: SeparatorParams,
    pub log: Vec<EpochLog>,
}

/// Mean best-permutation SI-SDR of the separator over the validation
/// split.
pub fn validation_sisdr(
    cfg: &ExperimentConfig,
    run_seed: u64,
    sep: &SeparatorParams,
) -> Result<f64> {
    let bank = cfg.bank();
    let spec = cfg.dataset(Split::Valid, run_seed);
    let mut total = 0.0;
    for i in 0..spec.items {
        let (ex, _) = generate_mixture(&bank, &spec, i, 0)?;
        let ests = sep.separate(&ex.x)?;
        let solved = solve_permutation(&ex.refs, &ests, &SisdrPair)?;
        total += -solved.guide_total / ex.speakers() as f64;
    }
    Ok(total / spec.items as f64)
}

/// Pretrain the separator with PIT over negative SI-SDR under dynamic
/// mixing. The learning rate halves on a `plateau_patience`-epoch
/// validation plateau once past the warm period.
pub fn pretrain(cfg: &ExperimentConfig, run_seed: u64) -> Result<PretrainOutcome> {
    let bank = cfg.bank();
    let spec = cfg.dataset(Split::Train, run_seed);
    let mut sep = SeparatorParams::init(cfg.separator(run_seed));
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.pretrain_lr), &sep.params);
    let mut log = Vec::with_capacity(cfg.pretrain_epochs);
    let mut best = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;

    for epoch in 0..cfg.pretrain_epochs {
        let mut accum = GradAccum::new();
        let mut epoch_loss = 0.0;
        for i in 0..spec.items {
            let (ex, _) = generate_mixture(&bank, &spec, i, epoch)?;
            let tape = Tape::new();
            let x = tape.constant(Tensor::new(vec![1, ex.len()], ex.x.clone())?);
            let bound = sep.bind(&tape, true);
            let ests = bound.forward(x)?;
            let (loss, _) = pit_loss(&tape, &ex.refs, &ests, &SisdrPair)?;
            let value = loss.item();
            if !value.is_finite() {
                return Err(ExperimentError::Diverged(format!(
                    "pretraining loss {value} at epoch {epoch} item {i}; run_seed {run_seed}, config {}",
                    cfg.hash()
                )));
            }
            epoch_loss += value;
            tape.backward(loss)?;
            accum.add(sep.params.grads(&bound.vars)?);
            if accum.count == cfg.batch_size || i + 1 == spec.items {
                let grads = accum.take_mean().expect("batch not empty");
                adam_step(&mut sep.params, &grads, &mut adam)?;
            }
        }
        let valid_sisdr_db = validation_sisdr(cfg, run_seed, &sep)?;
        log.push(EpochLog {
            epoch,
            mean_train_loss: epoch_loss / spec.items as f64,
            valid_sisdr_db,
            lr: adam.lr(),
        });
        if valid_sisdr_db > best {
            best = valid_sisdr_db;
            best_epoch = epoch;
        } else if epoch >= cfg.pretrain_warm_epochs
            && epoch - best_epoch >= cfg.plateau_patience
        {
            adam.set_lr(adam.lr() / 2.0);
            best_epoch = epoch;
        }
    }
    Ok(PretrainOutcome { separator: sep, log })
}

// ---------------------------------------------------------------------------
// Fine-tuning
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub ate: usize,
    pub step: usize,
    pub loss: f64,
}

pub struct FinetuneOutcome {
    pub separator: SeparatorParams,
    pub trace: Vec<StepLog>,
    /// Wall-clock seconds per additional training epoch (training steps
    /// only). Not deterministic; excluded from canonical artifacts.
    pub ate_seconds: Vec<f64>,
    pub checkpoints: Vec<PathBuf>,
}

/// Run additional training epochs from a pretrained separator. The
/// recognizer is taken by shared reference and never mutated; only audio
/// reaches this path (the train split provides no transcripts).
pub fn finetune(
    cfg: &ExperimentConfig,
    run_seed: u64,
    arm: Arm,
    pretrained: &SeparatorParams,
    recognizer_a: &RecognizerParams,
    save_dir: Option<&Path>,
) -> Result<FinetuneOutcome> {
    let bank = cfg.bank();
    let mut spec = cfg.dataset(Split::Train, run_seed);
    spec.items = cfg.finetune_items;
    let mut sep = pretrained.clone();
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.finetune_lr), &sep.params);
    let on = ae_input(cfg);
    let mut trace = Vec::new();
    let mut ate_seconds = Vec::with_capacity(cfg.finetune_ates);
    let mut checkpoints = Vec::new();
    if let Some(dir) = save_dir {
        ensure_dir(dir)?;
    }

    for ate in 0..cfg.finetune_ates {
        // dynamic mixing continues past the pretraining epochs
        let epoch = cfg.pretrain_epochs + ate;
        let started = Instant::now();
        let mut accum = GradAccum::new();
        let mut batch_loss = 0.0;
        let mut step = 0usize;
        for i in 0..spec.items {
            let (ex, _) = generate_mixture(&bank, &spec, i, epoch)?;
            let tape = Tape::new();
            let x = tape.constant(Tensor::new(vec![1, ex.len()], ex.x.clone())?);
            let bound = sep.bind(&tape, true);
            let ests = bound.forward(x)?;
            let loss = match arm {
                Arm::Sisdr => pit_loss(&tape, &ex.refs, &ests, &SisdrPair)?.0,
                Arm::Ae => {
                    let ae = AePair {
                        recognizer: recognizer_a,
                        on,
                    };
                    gpit_loss(&tape, &ex.refs, &ests, &SisdrPair, &ae)?.0
                }
                Arm::Joint(alpha) => {
                    let jcfg = JointLossConfig { alpha, ae_on: on };
                    joint_loss(&tape, &ex.refs, &ests, jcfg, recognizer_a)?.0
                }
            };
            let value = loss.item();
            if !value.is_finite() {
                return Err(ExperimentError::Diverged(format!(
                    "{} fine-tuning loss {value} at ate {ate} item {i}; run_seed {run_seed}, config {}",
                    arm.dir_name(),
                    cfg.hash()
                )));
            }
            batch_loss += value;
            tape.backward(loss)?;
            accum.add(sep.params.grads(&bound.vars)?);
            if accum.count == cfg.batch_size || i + 1 == spec.items {
                let n = accum.count;
                let grads = accum.take_mean().expect("batch not empty");
                adam_step(&mut sep.params, &grads, &mut adam)?;
                trace.push(StepLog {
                    ate,
                    step,
                    loss: batch_loss / n as f64,
                });
                batch_loss = 0.0;
                step += 1;
            }
        }
        ate_seconds.push(started.elapsed().as_secs_f64());
        if let Some(dir) = save_dir {
            let path = dir.join(format!("ate_{:03}.ckpt", ate + 1));
            save_separator_checkpoint(
                &path,
                &sep,
                cfg,
                run_seed,
                &[
                    ("arm".into(), arm.dir_name()),
                    ("ate".into(), (ate + 1).to_string()),
                ],
            )?;
            checkpoints.push(path);
        }
    }
    Ok(FinetuneOutcome {
        separator: sep,
        trace,
        ate_seconds,
        checkpoints,
    })
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// What to decode for one table row.
pub enum EvalSource<'a> {
    /// Clean per-speaker references (the WER floor).
    Oracle,
    /// The raw mixture duplicated to every channel.
    Mixture,
    Separated(&'a SeparatorParams),
}

fn decode(rec: &RecognizerParams, wave: &[f64]) -> Result<Vec<u8>> {
    let logits = rec.encode(wave)?;
    Ok(greedy_decode(&logits, rec.cfg.blank()))
}

fn onset_ranks(onsets: &[usize]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..onsets.len()).collect();
    order.sort_by_key(|&c| (onsets[c], c));
    let mut rank = vec![0usize; onsets.len()];
    for (r, &c) in order.iter().enumerate() {
        rank[c] = r;
    }
    rank
}

fn eval_item(
    ex: &MixtureExample,
    transcripts: &[Vec<u8>],
    onsets: &[usize],
    hyps: &[Vec<u8>],
    sisdr_db: f64,
) -> Result<ItemEval> {
    let cp = cp_wer(transcripts, hyps)?;
    let ranks = onset_ranks(onsets);
    let utterances: Vec<RefUtterance<u8>> = transcripts
        .iter()
        .enumerate()
        .map(|(c, tokens)| RefUtterance {
            speaker: c,
            onset_order: ranks[c],
            tokens: tokens.clone(),
        })
        .collect();
    let orc = orc_wer(&utterances, hyps)?;
    debug_assert_eq!(ex.speakers(), hyps.len());
    Ok(ItemEval { cp, orc, sisdr_db })
}

/// Decode and score one source over the test split.
pub fn evaluate(
    cfg: &ExperimentConfig,
    run_seed: u64,
    source: EvalSource,
    rec: &RecognizerParams,
) -> Result<EvalReport> {
    let bank = cfg.bank();
    let spec = cfg.dataset(Split::Test, run_seed);
    let mut report = EvalReport::default();
    for i in 0..spec.items {
        let (ex, meta) = generate_mixture(&bank, &spec, i, 0)?;
        let c = ex.speakers();
        let (hyps, sisdr_db) = match &source {
            EvalSource::Oracle => {
                let mut hyps = Vec::with_capacity(c);
                let mut si = 0.0;
                for r in &ex.refs {
                    hyps.push(decode(rec, r)?);
                    si += sisdr(r, r)?;
                }
                (hyps, si / c as f64)
            }
            EvalSource::Mixture => {
                let hyp = decode(rec, &ex.x)?;
                let mut si = 0.0;
                for r in &ex.refs {
                    si += sisdr(r, &ex.x)?;
                }
                (vec![hyp; c], si / c as f64)
            }
            EvalSource::Separated(sep) => {
                let ests = sep.separate(&ex.x)?;
                let solved = solve_permutation(&ex.refs, &ests, &SisdrPair)?;
                let si = -solved.guide_total / c as f64;
                let mut hyps = Vec::with_capacity(c);
                for est in &ests {
                    hyps.push(decode(rec, est)?);
                }
                (hyps, si)
            }
        };
        report.push(eval_item(&ex, &meta.transcripts, &meta.onsets, &hyps, sisdr_db)?);
    }
    Ok(report)
}

/// Oracle and mixture rows plus one row per labeled system.
pub fn metrics_table(
    cfg: &ExperimentConfig,
    run_seed: u64,
    systems: &[(String, &SeparatorParams)],
    rec: &RecognizerParams,
) -> Result<MetricsTable> {
    let mut table = MetricsTable::default();
    let oracle = evaluate(cfg, run_seed, EvalSource::Oracle, rec)?;
    table.push(TableRow::from_report(ORACLE_LABEL, &oracle));
    let mixture = evaluate(cfg, run_seed, EvalSource::Mixture, rec)?;
    table.push(TableRow::from_report(MIXTURE_LABEL, &mixture));
    for (label, sep) in systems {
        let report = evaluate(cfg, run_seed, EvalSource::Separated(sep), rec)?;
        table.push(TableRow::from_report(label.clone(), &report));
    }
    Ok(table)
}

// ---------------------------------------------------------------------------
// Commands (file-writing wrappers)
// ---------------------------------------------------------------------------

/// Write the dataset manifest: declarative split descriptions, no audio.
pub fn cmd_gen_data(cfg: &ExperimentConfig) -> Result<PathBuf> {
    ensure_dir(&cfg.out_dir)?;
    let mut rows = Vec::new();
    for split in [Split::Train, Split::Valid, Split::Test] {
        let spec = cfg.dataset(split, cfg.master_seed);
        rows.push(vec![
            split.name().to_string(),
            spec.items.to_string(),
            spec.speakers.to_string(),
            spec.seq_len.0.to_string(),
            spec.seq_len.1.to_string(),
            fmt_f64(spec.mixing_snr_db.0),
            fmt_f64(spec.mixing_snr_db.1),
            fmt_f64(spec.noise_snr_db.0),
            fmt_f64(spec.noise_snr_db.1),
            spec.tsl_limit_s.map(fmt_f64).unwrap_or_else(|| "none".into()),
            match split {
                Split::Train => "per_epoch".to_string(),
                _ => "static".to_string(),
            },
            spec.master_seed.to_string(),
        ]);
    }
    let path = cfg.out_dir.join("manifest.csv");
    write_csv(
        &path,
        &provenance(cfg, cfg.master_seed),
        &[
            "split",
            "items",
            "speakers",
            "seq_len_min",
            "seq_len_max",
            "mix_snr_min_db",
            "mix_snr_max_db",
            "noise_snr_min_db",
            "noise_snr_max_db",
            "tsl_limit_s",
            "regeneration",
            "seed",
        ],
        &rows,
    )?;
    Ok(path)
}

/// Train and store both recognizers with their clean WERs.
pub fn cmd_train_recognizers(cfg: &ExperimentConfig) -> Result<(PathBuf, PathBuf)> {
    ensure_dir(&cfg.out_dir)?;
    let pair = train_recognizers(cfg)?;
    let path_a = cfg.out_dir.join(RecSelector::A.file_name());
    let path_b = cfg.out_dir.join(RecSelector::B.file_name());
    save_recognizer_checkpoint(
        &path_a,
        &pair.a,
        cfg,
        &[
            ("role".into(), "a".into()),
            ("clean_wer".into(), fmt_f64(pair.clean_wer_a)),
        ],
    )?;
    save_recognizer_checkpoint(
        &path_b,
        &pair.b,
        cfg,
        &[
            ("role".into(), "b".into()),
            ("clean_wer".into(), fmt_f64(pair.clean_wer_b)),
        ],
    )?;
    write_csv(
        &cfg.out_dir.join("recognizers.csv"),
        &provenance(cfg, cfg.master_seed),
        &["recognizer", "clean_wer", "parameters"],
        &[
            vec![
                "a".into(),
                fmt_f64(pair.clean_wer_a),
                pair.a.params.numel().to_string(),
            ],
            vec![
                "b".into(),
                fmt_f64(pair.clean_wer_b),
                pair.b.params.numel().to_string(),
            ],
        ],
    )?;
    Ok((path_a, path_b))
}

fn load_recognizer_for(cfg: &ExperimentConfig, sel: RecSelector) -> Result<RecognizerParams> {
    let path = cfg.out_dir.join(sel.file_name());
    Ok(load_recognizer_checkpoint(&path)?.0)
}

/// Pretrain under the config's master seed; write the checkpoint and the
/// per-epoch log.
pub fn cmd_pretrain(cfg: &ExperimentConfig) -> Result<PathBuf> {
    cmd_pretrain_seed(cfg, cfg.master_seed)
}

pub fn cmd_pretrain_seed(cfg: &ExperimentConfig, run_seed: u64) -> Result<PathBuf> {
    let dir = seed_dir(cfg, run_seed);
    ensure_dir(&dir)?;
    let outcome = pretrain(cfg, run_seed)?;
    let path = dir.join("pretrained.ckpt");
    save_separator_checkpoint(&path, &outcome.separator, cfg, run_seed, &[])?;
    let rows: Vec<Vec<String>> = outcome
        .log
        .iter()
        .map(|l| {
            vec![
                l.epoch.to_string(),
                fmt_f64(l.mean_train_loss),
                fmt_f64(l.valid_sisdr_db),
                fmt_f64(l.lr),
            ]
        })
        .collect();
    write_csv(
        &dir.join("pretrain_log.csv"),
        &provenance(cfg, run_seed),
        &["epoch", "mean_train_loss", "valid_sisdr_db", "lr"],
        &rows,
    )?;
    Ok(path)
}

/// Load the pretrained separator for `run_seed` if its checkpoint exists
/// under a matching config hash, otherwise pretrain and store it.
pub fn load_or_pretrain(cfg: &ExperimentConfig, run_seed: u64) -> Result<SeparatorParams> {
    let path = seed_dir(cfg, run_seed).join("pretrained.ckpt");
    if path.exists() {
        let (sep, meta) = load_separator_checkpoint(&path)?;
        if meta_value(&meta, "config_hash") == Some(cfg.hash().as_str()) {
            return Ok(sep);
        }
    }
    cmd_pretrain_seed(cfg, run_seed)?;
    Ok(load_separator_checkpoint(&path)?.0)
}

/// Fine-tune one arm from the stored pretrained checkpoint; emit one
/// checkpoint per additional training epoch and the loss trace.
pub fn cmd_finetune(cfg: &ExperimentConfig, arm: Arm) -> Result<PathBuf> {
    let run_seed = cfg.master_seed;
    let pre_path = seed_dir(cfg, run_seed).join("pretrained.ckpt");
    require(&pre_path)?;
    let rec_path = cfg.out_dir.join(RecSelector::A.file_name());
    require(&rec_path)?;
    let (pretrained, _) = load_separator_checkpoint(&pre_path)?;
    let (rec_a, _) = load_recognizer_checkpoint(&rec_path)?;

    let dir = seed_dir(cfg, run_seed).join(format!("finetune_{}", arm.dir_name()));
    let outcome = finetune(cfg, run_seed, arm, &pretrained, &rec_a, Some(&dir))?;
    let rows: Vec<Vec<String>> = outcome
        .trace
        .iter()
        .map(|s| vec![s.ate.to_string(), s.step.to_string(), fmt_f64(s.loss)])
        .collect();
    write_csv(
        &dir.join("loss_trace.csv"),
        &provenance(cfg, run_seed),
        &["ate", "step", "mean_batch_loss"],
        &rows,
    )?;
    Ok(outcome
        .checkpoints
        .last()
        .cloned()
        .expect("at least one additional training epoch"))
}

/// Evaluate one separator checkpoint (plus the oracle and mixture rows)
/// with the selected recognizer; write the table CSV.
pub fn cmd_evaluate(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    rec_sel: RecSelector,
) -> Result<PathBuf> {
    let (sep, meta) = load_separator_checkpoint(checkpoint)?;
    let run_seed = meta_value(&meta, "run_seed")
        .and_then(|v| v.parse().ok())
        .unwrap_or(cfg.master_seed);
    let rec = load_recognizer_for(cfg, rec_sel)?;
    let label = checkpoint
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| "system".into());
    let arm = meta_value(&meta, "arm").unwrap_or("separated");
    let system_label = format!("{arm}_{label}");
    let table = metrics_table(cfg, run_seed, &[(system_label.clone(), &sep)], &rec)?;
    let out = cfg.out_dir.join(format!(
        "eval_{}_{}_rec{}.csv",
        arm,
        label,
        rec_sel.short()
    ));
    write_csv(
        &out,
        &provenance(cfg, run_seed),
        &MetricsTable::header(),
        &table.csv_rows()?,
    )?;
    Ok(out)
}

/// One joint fine-tuning arm per weight value over the multi-seed
/// protocol; rows of (seed, alpha, CP-WER, SI-SDR).
pub fn cmd_sweep_alpha(cfg: &ExperimentConfig, alphas: &[f64]) -> Result<PathBuf> {
    ensure_dir(&cfg.out_dir)?;
    let rec_a = load_recognizer_for(cfg, RecSelector::A)?;
    let mut rows = Vec::new();
    for idx in 0..cfg.num_seeds {
        let run_seed = cfg.run_seed(idx);
        let pretrained = load_or_pretrain(cfg, run_seed)?;
        for &alpha in alphas {
            let outcome = finetune(cfg, run_seed, Arm::Joint(alpha), &pretrained, &rec_a, None)?;
            let report = evaluate(
                cfg,
                run_seed,
                EvalSource::Separated(&outcome.separator),
                &rec_a,
            )?;
            rows.push(vec![
                run_seed.to_string(),
                fmt_f64(alpha),
                fmt_f64(report.cp_wer()),
                fmt_f64(report.mean_sisdr_db()),
            ]);
        }
    }
    let path = cfg.out_dir.join("sweep_alpha.csv");
    write_csv(
        &path,
        &provenance(cfg, cfg.master_seed),
        &["seed", "alpha", "cp_wer", "sisdr_db"],
        &rows,
    )?;
    Ok(path)
}

/// Fine-tune the AE arm under each training-signal-length limit; write
/// the metric CSV and a separate (non-canonical) timing CSV.
pub fn cmd_sweep_tsl(cfg: &ExperimentConfig, limits: &[f64]) -> Result<(PathBuf, PathBuf)> {
    ensure_dir(&cfg.out_dir)?;
    let rec_a = load_recognizer_for(cfg, RecSelector::A)?;
    let run_seed = cfg.master_seed;
    let pretrained = load_or_pretrain(cfg, run_seed)?;
    let mut rows = Vec::new();
    let mut timing_rows = Vec::new();
    for &limit in limits {
        let mut limited = cfg.clone();
        limited.tsl_limit_s = Some(limit);
        let outcome = finetune(&limited, run_seed, Arm::Ae, &pretrained, &rec_a, None)?;
        let report = evaluate(
            cfg,
            run_seed,
            EvalSource::Separated(&outcome.separator),
            &rec_a,
        )?;
        rows.push(vec![
            fmt_f64(limit),
            fmt_f64(report.cp_wer()),
            fmt_f64(report.orc_wer()),
            fmt_f64(report.mean_sisdr_db()),
        ]);
        let total: f64 = outcome.ate_seconds.iter().sum();
        timing_rows.push(vec![
            fmt_f64(limit),
            fmt_f64(total / outcome.ate_seconds.len() as f64),
            fmt_f64(total),
        ]);
    }
    let path = cfg.out_dir.join("sweep_tsl.csv");
    write_csv(
        &path,
        &provenance(cfg, run_seed),
        &["tsl_limit_s", "cp_wer", "orc_wer", "sisdr_db"],
        &rows,
    )?;
    // wall-clock measurements: inherently non-deterministic, kept out of
    // the canonical outputs
    let timing_path = cfg.out_dir.join("sweep_tsl_timing.csv");
    write_csv(
        &timing_path,
        &provenance(cfg, run_seed),
        &["tsl_limit_s", "mean_ate_seconds", "total_seconds"],
        &timing_rows,
    )?;
    Ok((path, timing_path))
}

/// Dump encoder outputs for one test item: the reference encoding and
/// the estimate encoding per speaker, with estimates aligned to
/// references by the SI-SDR-guided permutation.
pub fn cmd_dump_logits(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    rec_sel: RecSelector,
    item: usize,
) -> Result<Vec<PathBuf>> {
    let (sep, meta) = load_separator_checkpoint(checkpoint)?;
    let run_seed = meta_value(&meta, "run_seed")
        .and_then(|v| v.parse().ok())
        .unwrap_or(cfg.master_seed);
    let rec = load_recognizer_for(cfg, rec_sel)?;
    let bank = cfg.bank();
    let spec = cfg.dataset(Split::Test, run_seed);
    let (ex, _) = generate_mixture(&bank, &spec, item, 0)?;
    let ests = sep.separate(&ex.x)?;
    let solved = solve_permutation(&ex.refs, &ests, &SisdrPair)?;

    let dir = cfg.out_dir.join("logits");
    ensure_dir(&dir)?;
    let n = rec.cfg.n_symbols();
    let header: Vec<String> = (0..n).map(|i| format!("n{i}")).collect();
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut written = Vec::new();
    for c in 0..ex.speakers() {
        let est = &ests[solved.estimate_for_reference(c)];
        for (tag, wave) in [("ref", &ex.refs[c]), ("est", est)] {
            let logits = rec.encode(wave)?;
            let frames = logits.shape()[0];
            let rows: Vec<Vec<String>> = (0..frames)
                .map(|t| {
                    logits.data()[t * n..(t + 1) * n]
                        .iter()
                        .map(|&v| fmt_f64(v))
                        .collect()
                })
                .collect();
            let path = dir.join(format!("item{item:03}_s{c}_{tag}.csv"));
            write_csv(&path, &provenance(cfg, run_seed), &header_refs, &rows)?;
            written.push(path);
        }
    }
    Ok(written)
}
