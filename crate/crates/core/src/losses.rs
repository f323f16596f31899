//! The training loss stack: differentiable SI-SDR, the encoder-difference
//! (AE) loss against a frozen recognizer, exhaustive permutation solving,
//! standard PIT, guided PIT, and the joint weighted loss.
//!
//! Conventions, fixed so the algebraic identities hold exactly:
//!
//! - A *pair loss* maps one (reference, estimate) pair to a scalar.
//! - Permutations map estimate index to reference index; totals fold over
//!   reference index in ascending order, so identical pair values imply
//!   bit-identical totals across the PIT/GPIT/joint paths.
//! - The guide never carries gradient: permutations are solved on plain
//!   values and only the applied loss is built on the tape.
//! - PIT/GPIT/joint totals sum over speakers. The standalone
//!   [`loss_sisdr`] is the mean over speakers of negative SI-SDR.

use thiserror::Error;

use crate::permute::{factorial, permutations};
use crate::recognizer::{RecognizerError, RecognizerParams};
use crate::signals::SISDR_EPS;
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LossError {
    #[error("reference signal has zero power")]
    ZeroReference,
    #[error("pair length mismatch: reference {reference}, estimate {estimate}")]
    LengthMismatch { reference: usize, estimate: usize },
    #[error("source counts differ: {refs} references vs {ests} estimates")]
    CountMismatch { refs: usize, ests: usize },
    #[error("{got} sources exceed the factorial enumeration bound {bound}")]
    TooManySources { got: usize, bound: usize },
    #[error("alpha must lie in [0, 1], got {0}")]
    BadAlpha(f64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Recognizer(#[from] RecognizerError),
}

pub type Result<T> = std::result::Result<T, LossError>;

/// Factorial enumeration bound on the speaker count.
pub const MAX_SOURCES: usize = 6;

/// What the AE loss consumes from the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AeInput {
    /// Pre-softmax logits (default reading of the encoder output).
    #[default]
    Logits,
    /// Log-softmax applied to both encodings before the MSE.
    LogProbs,
}

/// One (reference, estimate) loss, computable both as a plain value and
/// on a tape. The default [`PairLoss::value`] evaluates the tape path on
/// a throwaway tape, so guide values are bit-identical to applied values.
pub trait PairLoss {
    fn on_tape<'t>(&self, tape: &'t Tape, reference: &[f64], estimate: Var<'t>) -> Result<Var<'t>>;

    fn value(&self, reference: &[f64], estimate: &[f64]) -> Result<f64> {
        let tape = Tape::new();
        let est = tape.constant(
            Tensor::new(vec![1, estimate.len()], estimate.to_vec()).map_err(TensorError::from)?,
        );
        Ok(self.on_tape(&tape, reference, est)?.item())
    }
}

/// Negative SI-SDR of a pair (lower is better).
#[derive(Debug, Clone, Copy, Default)]
pub struct SisdrPair;

impl PairLoss for SisdrPair {
    fn on_tape<'t>(&self, tape: &'t Tape, reference: &[f64], estimate: Var<'t>) -> Result<Var<'t>> {
        let est_len = estimate.numel();
        if reference.len() != est_len {
            return Err(LossError::LengthMismatch {
                reference: reference.len(),
                estimate: est_len,
            });
        }
        let n = reference.len() as f64;
        let rmean = reference.iter().sum::<f64>() / n;
        let centered: Vec<f64> = reference.iter().map(|&r| r - rmean).collect();
        let rpow: f64 = centered.iter().map(|v| v * v).sum();
        if rpow == 0.0 {
            return Err(LossError::ZeroReference);
        }
        let refv = tape.constant(Tensor::new(vec![1, reference.len()], centered)?);
        let est_centered = estimate.sub(estimate.mean())?;
        let dot = est_centered.mul(refv)?.sum();
        let alpha = dot.scale(1.0 / rpow);
        let target = alpha.mul(refv)?;
        let err = est_centered.sub(target)?;
        let num = target.square().sum();
        let den = err.square().sum().add(tape.scalar(SISDR_EPS))?;
        let sisdr_db = num.ln().sub(den.ln())?.scale(10.0 / std::f64::consts::LN_10);
        Ok(sisdr_db.neg())
    }
}

/// Mean squared difference of the frozen recognizer's encodings,
/// normalized by the `L x N` grid size. Gradient flows only into the
/// estimate; the recognizer binds non-trainable.
pub struct AePair<'r> {
    pub recognizer: &'r RecognizerParams,
    pub on: AeInput,
}

impl<'r> AePair<'r> {
    pub fn new(recognizer: &'r RecognizerParams) -> Self {
        Self {
            recognizer,
            on: AeInput::Logits,
        }
    }
}

impl PairLoss for AePair<'_> {
    fn on_tape<'t>(&self, tape: &'t Tape, reference: &[f64], estimate: Var<'t>) -> Result<Var<'t>> {
        let est_len = estimate.numel();
        if reference.len() != est_len {
            return Err(LossError::LengthMismatch {
                reference: reference.len(),
                estimate: est_len,
            });
        }
        let bound = self.recognizer.bind(tape, false);
        let est_logits = bound.encode(estimate)?;
        let ref_logits = tape.constant(self.recognizer.encode(reference)?);
        let (est_enc, ref_enc) = match self.on {
            AeInput::Logits => (est_logits, ref_logits),
            AeInput::LogProbs => (est_logits.log_softmax(), ref_logits.log_softmax()),
        };
        let grid = est_enc.numel() as f64;
        let diff = est_enc.sub(ref_enc)?;
        Ok(diff.square().sum().scale(1.0 / grid))
    }
}

/// Solved permutation: the chosen estimate-to-reference mapping, the
/// guide totals, and the full pair matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PermutationResult {
    /// `perm[e]` is the reference index estimate `e` is assigned to.
    pub perm: Vec<usize>,
    /// Guide total at the chosen permutation.
    pub guide_total: f64,
    /// Pair guide losses, row-major `[reference][estimate]`.
    pub pair_losses: Vec<f64>,
    /// Number of permutations considered (`C!`).
    pub n_permutations: usize,
}

impl PermutationResult {
    pub fn sources(&self) -> usize {
        self.perm.len()
    }

    /// Estimate assigned to reference `r`.
    pub fn estimate_for_reference(&self, r: usize) -> usize {
        self.perm.iter().position(|&rr| rr == r).expect("bijection")
    }

    pub fn pair(&self, reference: usize, estimate: usize) -> f64 {
        self.pair_losses[reference * self.sources() + estimate]
    }

    /// Total of a candidate permutation under the stored pair matrix,
    /// folded over reference index in ascending order.
    pub fn total_of(&self, perm: &[usize]) -> f64 {
        let c = self.sources();
        let mut inv = vec![0usize; c];
        for (e, &r) in perm.iter().enumerate() {
            inv[r] = e;
        }
        let mut total = 0.0;
        for (r, &e) in inv.iter().enumerate().take(c) {
            total += self.pair_losses[r * c + e];
        }
        total
    }
}

fn check_counts(refs: usize, ests: usize) -> Result<()> {
    if refs != ests {
        return Err(LossError::CountMismatch { refs, ests });
    }
    if refs > MAX_SOURCES {
        return Err(LossError::TooManySources {
            got: refs,
            bound: MAX_SOURCES,
        });
    }
    Ok(())
}

/// Choose the permutation minimizing the summed guide loss, by exhaustive
/// enumeration over all `C!` candidates. Ties break toward the
/// lexicographically smallest estimate-to-reference mapping.
pub fn solve_permutation(
    refs: &[Vec<f64>],
    ests: &[Vec<f64>],
    guide: &dyn PairLoss,
) -> Result<PermutationResult> {
    check_counts(refs.len(), ests.len())?;
    let c = refs.len();
    let mut pair = vec![0.0; c * c];
    for (r, reference) in refs.iter().enumerate() {
        for (e, estimate) in ests.iter().enumerate() {
            pair[r * c + e] = guide.value(reference, estimate)?;
        }
    }
    let mut best_perm: Option<Vec<usize>> = None;
    let mut best_total = f64::INFINITY;
    for perm in permutations(c) {
        let mut inv = vec![0usize; c];
        for (e, &r) in perm.iter().enumerate() {
            inv[r] = e;
        }
        let mut total = 0.0;
        for (r, &e) in inv.iter().enumerate() {
            total += pair[r * c + e];
        }
        if best_perm.is_none() || total < best_total {
            best_total = total;
            best_perm = Some(perm);
        }
    }
    Ok(PermutationResult {
        perm: best_perm.unwrap(),
        guide_total: best_total,
        pair_losses: pair,
        n_permutations: factorial(c),
    })
}

/// Fold pair losses on the tape at a fixed permutation, over reference
/// index in ascending order.
fn fold_at_perm<'t>(
    tape: &'t Tape,
    refs: &[Vec<f64>],
    ests: &[Var<'t>],
    perm: &[usize],
    loss: &dyn PairLoss,
) -> Result<Var<'t>> {
    let c = refs.len();
    let mut inv = vec![0usize; c];
    for (e, &r) in perm.iter().enumerate() {
        inv[r] = e;
    }
    let mut acc: Option<Var> = None;
    for (r, reference) in refs.iter().enumerate() {
        let term = loss.on_tape(tape, reference, ests[inv[r]])?;
        acc = Some(match acc {
            None => term,
            Some(a) => a.add(term).map_err(TensorError::from)?,
        });
    }
    Ok(acc.expect("at least one source"))
}

/// Mean over speakers of negative SI-SDR, channel-aligned (no permutation
/// solving). The differentiable twin of `signals::sisdr`.
pub fn loss_sisdr<'t>(tape: &'t Tape, refs: &[Vec<f64>], ests: &[Var<'t>]) -> Result<Var<'t>> {
    if refs.len() != ests.len() {
        return Err(LossError::CountMismatch {
            refs: refs.len(),
            ests: ests.len(),
        });
    }
    let mut acc: Option<Var> = None;
    for (reference, &est) in refs.iter().zip(ests) {
        let term = SisdrPair.on_tape(tape, reference, est)?;
        acc = Some(match acc {
            None => term,
            Some(a) => a.add(term).map_err(TensorError::from)?,
        });
    }
    Ok(acc.expect("at least one source").scale(1.0 / refs.len() as f64))
}

/// Summed AE loss over channel-aligned pairs (no permutation solving).
pub fn loss_ae<'t>(
    tape: &'t Tape,
    refs: &[Vec<f64>],
    ests: &[Var<'t>],
    recognizer: &RecognizerParams,
    on: AeInput,
) -> Result<Var<'t>> {
    if refs.len() != ests.len() {
        return Err(LossError::CountMismatch {
            refs: refs.len(),
            ests: ests.len(),
        });
    }
    let pair = AePair { recognizer, on };
    let identity: Vec<usize> = (0..refs.len()).collect();
    fold_at_perm(tape, refs, ests, &identity, &pair)
}

/// Guided PIT: solve the permutation with `guide` on plain values, then
/// build `applied` on the tape at that permutation. Gradient flows only
/// through the applied loss.
pub fn gpit_loss<'t>(
    tape: &'t Tape,
    refs: &[Vec<f64>],
    ests: &[Var<'t>],
    guide: &dyn PairLoss,
    applied: &dyn PairLoss,
) -> Result<(Var<'t>, PermutationResult)> {
    check_counts(refs.len(), ests.len())?;
    let est_values: Vec<Vec<f64>> = ests.iter().map(|e| e.value().into_data()).collect();
    let solved = solve_permutation(refs, &est_values, guide)?;
    let total = fold_at_perm(tape, refs, ests, &solved.perm, applied)?;
    Ok((total, solved))
}

/// Standard PIT: minimum over permutations of the summed loss itself
/// (guide equals applied). Pair losses are built on the tape once; the
/// returned value is the winning total.
pub fn pit_loss<'t>(
    tape: &'t Tape,
    refs: &[Vec<f64>],
    ests: &[Var<'t>],
    loss: &dyn PairLoss,
) -> Result<(Var<'t>, PermutationResult)> {
    check_counts(refs.len(), ests.len())?;
    let c = refs.len();
    let mut pair_vars: Vec<Var> = Vec::with_capacity(c * c);
    for reference in refs {
        for &est in ests {
            pair_vars.push(loss.on_tape(tape, reference, est)?);
        }
    }
    let pair: Vec<f64> = pair_vars.iter().map(Var::item).collect();
    let mut best_perm: Option<Vec<usize>> = None;
    let mut best_total = f64::INFINITY;
    for perm in permutations(c) {
        let mut inv = vec![0usize; c];
        for (e, &r) in perm.iter().enumerate() {
            inv[r] = e;
        }
        let mut total = 0.0;
        for (r, &e) in inv.iter().enumerate() {
            total += pair[r * c + e];
        }
        if best_perm.is_none() || total < best_total {
            best_total = total;
            best_perm = Some(perm);
        }
    }
    let perm = best_perm.unwrap();
    let mut inv = vec![0usize; c];
    for (e, &r) in perm.iter().enumerate() {
        inv[r] = e;
    }
    let mut acc: Option<Var> = None;
    for (r, &e) in inv.iter().enumerate() {
        let term = pair_vars[r * c + e];
        acc = Some(match acc {
            None => term,
            Some(a) => a.add(term).map_err(TensorError::from)?,
        });
    }
    Ok((
        acc.expect("at least one source"),
        PermutationResult {
            perm,
            guide_total: best_total,
            pair_losses: pair,
            n_permutations: factorial(c),
        },
    ))
}

/// Joint weighted loss configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointLossConfig {
    /// Weight of the SI-SDR term; `1 - alpha` weights the AE term.
    pub alpha: f64,
    pub ae_on: AeInput,
}

impl JointLossConfig {
    pub fn new(alpha: f64) -> Self {
        Self {
            alpha,
            ae_on: AeInput::Logits,
        }
    }
}

/// Joint loss: solve the permutation once with the SI-SDR guide, then
/// return `(1 - alpha) * AE + alpha * SISDR`, both summed over speakers
/// at that permutation. The endpoints collapse exactly: `alpha = 1`
/// equals PIT with SI-SDR, `alpha = 0` equals guided PIT with AE.
pub fn joint_loss<'t>(
    tape: &'t Tape,
    refs: &[Vec<f64>],
    ests: &[Var<'t>],
    cfg: JointLossConfig,
    recognizer: &RecognizerParams,
) -> Result<(Var<'t>, PermutationResult)> {
    if !(0.0..=1.0).contains(&cfg.alpha) {
        return Err(LossError::BadAlpha(cfg.alpha));
    }
    check_counts(refs.len(), ests.len())?;
    let est_values: Vec<Vec<f64>> = ests.iter().map(|e| e.value().into_data()).collect();
    let solved = solve_permutation(refs, &est_values, &SisdrPair)?;
    let ae = AePair {
        recognizer,
        on: cfg.ae_on,
    };
    let ae_total = fold_at_perm(tape, refs, ests, &solved.perm, &ae)?;
    let si_total = fold_at_perm(tape, refs, ests, &solved.perm, &SisdrPair)?;
    let joint = ae_total
        .scale(1.0 - cfg.alpha)
        .add(si_total.scale(cfg.alpha))
        .map_err(TensorError::from)?;
    Ok((joint, solved))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::recognizer::RecognizerConfig;
    use crate::signals::{sisdr, SymbolBank};
    use crate::tensor::grad_check;

    fn test_recognizer() -> RecognizerParams {
        RecognizerParams::init(RecognizerConfig {
            alphabet: 8,
            window: 64,
            hop: 32,
            features: 6,
            hidden: 6,
            seed: 42,
        })
    }

    fn tone(freq: f64, len: usize) -> Vec<f64> {
        (0..len)
            .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / 8000.0).sin())
            .collect()
    }

    fn on_tape<'t>(tape: &'t Tape, xs: &[Vec<f64>]) -> Vec<Var<'t>> {
        xs.iter()
            .map(|x| tape.constant(Tensor::new(vec![1, x.len()], x.clone()).unwrap()))
            .collect()
    }

    /// Test-only pair loss reading a fixed matrix; reference/estimate
    /// vectors carry their own indices in element 0.
    struct MatrixPair {
        matrix: Vec<Vec<f64>>,
    }

    impl PairLoss for MatrixPair {
        fn on_tape<'t>(
            &self,
            tape: &'t Tape,
            reference: &[f64],
            estimate: Var<'t>,
        ) -> Result<Var<'t>> {
            let r = reference[0] as usize;
            let e = estimate.value().data()[0] as usize;
            // keep the estimate in the graph with a zero-weight term
            let anchor = estimate.sum().scale(0.0);
            Ok(tape
                .scalar(self.matrix[r][e])
                .add(anchor)
                .map_err(TensorError::from)?)
        }
    }

    fn index_signals(c: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let refs: Vec<Vec<f64>> = (0..c).map(|i| vec![i as f64]).collect();
        (refs.clone(), refs)
    }

    #[test]
    fn loss_sisdr_matches_plain_sisdr() {
        let refs = vec![tone(500.0, 256), tone(900.0, 256)];
        let ests: Vec<Vec<f64>> = refs
            .iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .map(|(i, v)| v + 0.05 * (i as f64 * 0.91).cos())
                    .collect()
            })
            .collect();
        let tape = Tape::new();
        let est_vars = on_tape(&tape, &ests);
        let loss = loss_sisdr(&tape, &refs, &est_vars).unwrap();
        let expected =
            -(sisdr(&refs[0], &ests[0]).unwrap() + sisdr(&refs[1], &ests[1]).unwrap()) / 2.0;
        assert!((loss.item() - expected).abs() < 1e-10, "{} vs {expected}", loss.item());
    }

    #[test]
    fn loss_sisdr_at_truth_is_strongly_negative() {
        let refs = vec![tone(500.0, 400), tone(900.0, 400)];
        let tape = Tape::new();
        let est_vars = on_tape(&tape, &refs);
        let loss = loss_sisdr(&tape, &refs, &est_vars).unwrap();
        assert!(loss.item() <= -80.0, "got {}", loss.item());
    }

    #[test]
    fn loss_sisdr_is_scale_invariant() {
        // large error energy keeps the eps cap below the 1e-9 tolerance
        let refs = vec![tone(700.0, 16384)];
        let noisy: Vec<f64> = refs[0]
            .iter()
            .enumerate()
            .map(|(i, v)| v + 1.5 * (i as f64).cos())
            .collect();
        let tape = Tape::new();
        let base = loss_sisdr(&tape, &refs, &on_tape(&tape, &[noisy.clone()])).unwrap();
        for c in [0.1, 3.0] {
            let scaled: Vec<f64> = noisy.iter().map(|v| c * v).collect();
            let other = loss_sisdr(&tape, &refs, &on_tape(&tape, &[scaled])).unwrap();
            assert!((base.item() - other.item()).abs() < 1e-9);
        }
    }

    #[test]
    fn loss_sisdr_rejects_zero_reference() {
        let refs = vec![vec![0.0; 64]];
        let tape = Tape::new();
        let ests = on_tape(&tape, &[tone(500.0, 64)]);
        assert!(matches!(
            loss_sisdr(&tape, &refs, &ests),
            Err(LossError::ZeroReference)
        ));
    }

    #[test]
    fn ae_loss_zero_at_truth_and_constructed_case() {
        let rec = test_recognizer();
        let refs = vec![tone(450.0, 256), tone(1350.0, 256)];
        let tape = Tape::new();
        let ests = on_tape(&tape, &refs);
        let loss = loss_ae(&tape, &refs, &ests, &rec, AeInput::Logits).unwrap();
        assert_eq!(loss.item(), 0.0);
    }

    #[test]
    fn ae_constructed_difference_matches_hand_value() {
        // encoder difference [[1,0],[0,1]] over a 2x2 grid: sum of squares
        // 2, normalized by L*N=4, one speaker -> 0.5
        struct FixedDiff;
        impl PairLoss for FixedDiff {
            fn on_tape<'t>(
                &self,
                tape: &'t Tape,
                _reference: &[f64],
                _estimate: Var<'t>,
            ) -> Result<Var<'t>> {
                let diff = tape.constant(
                    Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
                );
                Ok(diff.square().sum().scale(1.0 / 4.0))
            }
        }
        let v = FixedDiff.value(&[0.0], &[0.0]).unwrap();
        assert_eq!(v, 0.5);
    }

    #[test]
    fn ae_gradient_reaches_estimates_but_not_recognizer() {
        let rec = test_recognizer();
        let reference = tone(450.0, 256);
        let estimate: Vec<f64> = tone(900.0, 256);
        let tape = Tape::new();
        let est = tape.leaf(Tensor::new(vec![1, 256], estimate).unwrap(), true);
        // bind the recognizer exactly as AePair does, then run the same math
        let bound = rec.bind(&tape, false);
        let est_logits = bound.encode(est).unwrap();
        let ref_logits = tape.constant(rec.encode(&reference).unwrap());
        let grid = est_logits.numel() as f64;
        let loss = est_logits
            .sub(ref_logits)
            .unwrap()
            .square()
            .sum()
            .scale(1.0 / grid);
        tape.backward(loss).unwrap();
        let g = est.grad().expect("estimate gradient must exist");
        assert!(g.all_finite());
        assert!(g.data().iter().any(|&v| v != 0.0));
        for v in &bound.vars {
            assert!(v.grad().is_none(), "frozen recognizer must not get gradients");
        }
    }

    #[test]
    fn solve_permutation_enumerated_example() {
        // pair matrix [[1,5],[4,2]]: identity total 3 beats swap total 9
        let (refs, ests) = index_signals(2);
        let guide = MatrixPair {
            matrix: vec![vec![1.0, 5.0], vec![4.0, 2.0]],
        };
        let solved = solve_permutation(&refs, &ests, &guide).unwrap();
        assert_eq!(solved.perm, vec![0, 1]);
        assert_eq!(solved.guide_total, 3.0);
        assert_eq!(solved.n_permutations, 2);
        assert_eq!(solved.pair(0, 1), 5.0);
        // optimality over every permutation
        for perm in [vec![0usize, 1], vec![1, 0]] {
            assert!(solved.guide_total <= solved.total_of(&perm));
        }
    }

    #[test]
    fn solve_permutation_prefers_swap_for_swapped_signals() {
        let s1 = tone(500.0, 300);
        let s2 = tone(1200.0, 300);
        let refs = vec![s1.clone(), s2.clone()];
        let ests = vec![s2, s1];
        let solved = solve_permutation(&refs, &ests, &SisdrPair).unwrap();
        assert_eq!(solved.perm, vec![1, 0]);
    }

    #[test]
    fn single_source_is_identity() {
        let refs = vec![tone(600.0, 200)];
        let solved = solve_permutation(&refs, &refs, &SisdrPair).unwrap();
        assert_eq!(solved.perm, vec![0]);
        assert_eq!(solved.n_permutations, 1);
    }

    #[test]
    fn pit_matrix_example_totals_three() {
        let (refs, ests) = index_signals(2);
        let loss = MatrixPair {
            matrix: vec![vec![1.0, 5.0], vec![4.0, 2.0]],
        };
        let tape = Tape::new();
        let est_vars = on_tape(&tape, &ests);
        let (total, solved) = pit_loss(&tape, &refs, &est_vars, &loss).unwrap();
        assert_eq!(total.item(), 3.0);
        assert_eq!(solved.perm, vec![0, 1]);
    }

    #[test]
    fn pit_is_invariant_under_estimate_order() {
        let s1 = tone(500.0, 300);
        let s2 = tone(1200.0, 300);
        let refs = vec![s1.clone(), s2.clone()];
        let tape = Tape::new();
        let fwd = pit_loss(&tape, &refs, &on_tape(&tape, &[s1.clone(), s2.clone()]), &SisdrPair)
            .unwrap()
            .0
            .item();
        let swapped = pit_loss(&tape, &refs, &on_tape(&tape, &[s2, s1]), &SisdrPair)
            .unwrap()
            .0
            .item();
        assert_eq!(fwd, swapped);
    }

    #[test]
    fn gpit_with_equal_guide_and_applied_is_pit_exactly() {
        let rec = test_recognizer();
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(314);
        for case in 0..100 {
            let len = 128 + (case % 3) * 32;
            let mk = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
                (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
            };
            let refs = vec![mk(&mut rng), mk(&mut rng)];
            let ests = vec![mk(&mut rng), mk(&mut rng)];
            let tape = Tape::new();
            let est_vars = on_tape(&tape, &ests);
            // SI-SDR as both guide and applied
            let (g_si, p_si) = gpit_loss(&tape, &refs, &est_vars, &SisdrPair, &SisdrPair).unwrap();
            let (p_total, p_perm) = pit_loss(&tape, &refs, &est_vars, &SisdrPair).unwrap();
            assert_eq!(g_si.item(), p_total.item(), "case {case}");
            assert_eq!(p_si.perm, p_perm.perm);
            // AE as both guide and applied (heavier; sample sparsely)
            if case % 25 == 0 {
                let ae = AePair::new(&rec);
                let (g_ae, pa) = gpit_loss(&tape, &refs, &est_vars, &ae, &ae).unwrap();
                let (p_ae, pb) = pit_loss(&tape, &refs, &est_vars, &ae).unwrap();
                assert_eq!(g_ae.item(), p_ae.item(), "case {case}");
                assert_eq!(pa.perm, pb.perm);
            }
        }
    }

    #[test]
    fn gpit_zero_at_truth_in_any_order() {
        let rec = test_recognizer();
        let s1 = tone(450.0, 256);
        let s2 = tone(1350.0, 256);
        let refs = vec![s1.clone(), s2.clone()];
        let tape = Tape::new();
        let swapped = on_tape(&tape, &[s2, s1]);
        let (loss, solved) =
            gpit_loss(&tape, &refs, &swapped, &SisdrPair, &AePair::new(&rec)).unwrap();
        assert_eq!(solved.perm, vec![1, 0]);
        assert_eq!(loss.item(), 0.0);
    }

    #[test]
    fn gpit_follows_guide_when_applied_disagrees() {
        // guide prefers identity, applied prefers swap: GPIT must return
        // the applied loss under the guide's permutation.
        let (refs, ests) = index_signals(2);
        let guide = MatrixPair {
            matrix: vec![vec![1.0, 5.0], vec![4.0, 2.0]], // identity: 3
        };
        let applied = MatrixPair {
            matrix: vec![vec![5.0, 1.0], vec![2.0, 4.0]], // swap: 3, identity: 9
        };
        let tape = Tape::new();
        let est_vars = on_tape(&tape, &ests);
        let (g, solved) = gpit_loss(&tape, &refs, &est_vars, &guide, &applied).unwrap();
        assert_eq!(solved.perm, vec![0, 1]);
        assert_eq!(g.item(), 9.0, "applied loss at the guide permutation");
        let (p, _) = pit_loss(&tape, &refs, &est_vars, &applied).unwrap();
        assert_eq!(p.item(), 3.0);
        assert_ne!(g.item(), p.item());
    }

    #[test]
    fn gpit_diverging_guide_and_applied_on_real_signals() {
        // swapped estimates with one grossly mis-scaled channel: the
        // scale-invariant guide still solves the content permutation
        // (swap), while the scale-sensitive encoder's pair distances can
        // invert and prefer the wrong pairing.
        let s1 = tone(450.0, 256);
        let s2 = tone(1350.0, 256);
        let refs = vec![s1.clone(), s2.clone()];
        let mut found = false;
        let amps = [0.001, 0.02, 5.0, 20.0, 50.0, 100.0];
        'search: for rec_seed in 0..24u64 {
            let rec = RecognizerParams::init(RecognizerConfig {
                alphabet: 8,
                window: 64,
                hop: 32,
                features: 6,
                hidden: 6,
                seed: rec_seed,
            });
            for &amp in &amps {
                let ests: Vec<Vec<f64>> =
                    vec![s2.iter().map(|v| amp * v).collect(), s1.clone()];
                let guide_perm = solve_permutation(&refs, &ests, &SisdrPair).unwrap();
                let ae = AePair::new(&rec);
                let ae_perm = solve_permutation(&refs, &ests, &ae).unwrap();
                if guide_perm.perm != ae_perm.perm {
                    found = true;
                    let tape = Tape::new();
                    let est_vars = on_tape(&tape, &ests);
                    let (g, solved) = gpit_loss(&tape, &refs, &est_vars, &SisdrPair, &ae).unwrap();
                    assert_eq!(solved.perm, guide_perm.perm);
                    // value is the AE total at the guide permutation, not
                    // the AE optimum
                    let expected = ae_perm.total_of(&guide_perm.perm);
                    assert!((g.item() - expected).abs() < 1e-12);
                    let (p, _) = pit_loss(&tape, &refs, &est_vars, &ae).unwrap();
                    assert_ne!(g.item(), p.item());
                    break 'search;
                }
            }
        }
        assert!(found, "no instance where guide and applied disagree");
    }

    #[test]
    fn joint_endpoints_collapse_exactly() {
        let rec = test_recognizer();
        let s1 = tone(500.0, 256);
        let s2 = tone(1100.0, 256);
        let refs = vec![s1.clone(), s2.clone()];
        let ests: Vec<Vec<f64>> = refs
            .iter()
            .map(|r| r.iter().enumerate().map(|(i, v)| 0.8 * v + 0.05 * (i as f64).sin()).collect())
            .collect();
        let tape = Tape::new();
        let est_vars = on_tape(&tape, &ests);

        let (j1, _) = joint_loss(&tape, &refs, &est_vars, JointLossConfig::new(1.0), &rec).unwrap();
        let (pit_si, _) = pit_loss(&tape, &refs, &est_vars, &SisdrPair).unwrap();
        assert_eq!(j1.item(), pit_si.item(), "alpha = 1 endpoint");

        let (j0, _) = joint_loss(&tape, &refs, &est_vars, JointLossConfig::new(0.0), &rec).unwrap();
        let (gpit_ae, _) =
            gpit_loss(&tape, &refs, &est_vars, &SisdrPair, &AePair::new(&rec)).unwrap();
        assert_eq!(j0.item(), gpit_ae.item(), "alpha = 0 endpoint");

        // alpha = 0.5 is the arithmetic mean of the endpoint values at the
        // same permutation
        let (j5, _) = joint_loss(&tape, &refs, &est_vars, JointLossConfig::new(0.5), &rec).unwrap();
        let expected = 0.5 * j0.item() + 0.5 * j1.item();
        assert!((j5.item() - expected).abs() < 1e-12);

        assert!(matches!(
            joint_loss(&tape, &refs, &est_vars, JointLossConfig::new(1.5), &rec),
            Err(LossError::BadAlpha(_))
        ));
    }

    #[test]
    fn sisdr_loss_gradient_passes_finite_differences() {
        let reference = tone(650.0, 48);
        let x = Tensor::new(
            vec![1, 48],
            (0..48).map(|i| 0.5 * (i as f64 * 0.37).sin() + 0.1).collect(),
        )
        .unwrap();
        let err = grad_check(
            |t, v| SisdrPair.on_tape(t, &reference, v).unwrap(),
            &x,
            1e-6,
        );
        assert!(err <= 1e-5, "err = {err}");
    }

    #[test]
    fn ae_loss_gradient_passes_finite_differences() {
        let rec = test_recognizer();
        let reference = tone(450.0, 96);
        let x = Tensor::new(
            vec![1, 96],
            (0..96).map(|i| 0.4 * (i as f64 * 0.23).sin()).collect(),
        )
        .unwrap();
        let err = grad_check(
            |t, v| {
                AePair::new(&rec)
                    .on_tape(t, &reference, v)
                    .expect("lengths match")
            },
            &x,
            1e-6,
        );
        assert!(err <= 1e-5, "err = {err}");
    }

    #[test]
    fn separator_losses_are_differentiable_end_to_end() {
        // miniature separator; every loss must deliver a finite gradient
        // to every parameter
        use crate::separator::{SeparatorConfig, SeparatorParams};
        let bank = SymbolBank::new(8, 16, 8000);
        let u1 = crate::signals::synth_utterance(&[0, 1, 2, 3], &bank, 0).unwrap();
        let u2 = crate::signals::synth_utterance(&[4, 5, 6, 7], &bank, 1).unwrap();
        let refs = vec![u1.waveform.clone(), u2.waveform.clone()];
        let mix: Vec<f64> = u1
            .waveform
            .iter()
            .zip(&u2.waveform)
            .map(|(a, b)| a + b)
            .collect();
        let sep = SeparatorParams::init(SeparatorConfig {
            kernel: 8,
            stride: 4,
            channels: 4,
            mask_layers: 2,
            mask_hidden: 4,
            speakers: 2,
            seed: 9,
        });
        let rec = RecognizerParams::init(RecognizerConfig {
            alphabet: 8,
            window: 16,
            hop: 8,
            features: 4,
            hidden: 4,
            seed: 17,
        });
        for which in ["pit_sisdr", "gpit_ae", "joint"] {
            let tape = Tape::new();
            let x = tape.constant(Tensor::new(vec![1, mix.len()], mix.clone()).unwrap());
            let bound = sep.bind(&tape, true);
            let ests = bound.forward(x).unwrap();
            let loss = match which {
                "pit_sisdr" => pit_loss(&tape, &refs, &ests, &SisdrPair).unwrap().0,
                "gpit_ae" => {
                    gpit_loss(&tape, &refs, &ests, &SisdrPair, &AePair::new(&rec))
                        .unwrap()
                        .0
                }
                _ => {
                    joint_loss(&tape, &refs, &ests, JointLossConfig::new(0.3), &rec)
                        .unwrap()
                        .0
                }
            };
            tape.backward(loss).unwrap();
            let grads = sep.params.grads(&bound.vars).unwrap();
            for (g, (name, _)) in grads.iter().zip(sep.params.entries()) {
                assert!(g.all_finite(), "{which}: non-finite gradient in {name}");
                assert!(
                    g.data().iter().any(|&v| v != 0.0),
                    "{which}: all-zero gradient in {name}"
                );
            }
        }
    }

    #[test]
    fn separator_sisdr_gradient_matches_finite_differences() {
        // miniature instance: x of length 64, B = 4
        use crate::separator::{SeparatorConfig, SeparatorParams};
        let sep = SeparatorParams::init(SeparatorConfig {
            kernel: 8,
            stride: 4,
            channels: 4,
            mask_layers: 2,
            mask_hidden: 4,
            speakers: 2,
            seed: 5,
        });
        let refs = vec![tone(700.0, 64), tone(1900.0, 64)];
        let mix: Vec<f64> = refs[0].iter().zip(&refs[1]).map(|(a, b)| a + b).collect();
        // check gradient w.r.t. one parameter tensor (the encoder kernel):
        // rebuild the separator with that tensor replaced by the probe
        let err = grad_check(
            |t, v| {
                let mut params = sep.params.clone();
                let enc = params.tensors_mut().next().unwrap();
                *enc = v.value();
                let probe = SeparatorParams {
                    cfg: sep.cfg,
                    params,
                };
                // splice the probe leaf in as the encoder kernel
                let x = t.constant(Tensor::new(vec![1, mix.len()], mix.clone()).unwrap());
                let mut bound = probe.bind(t, false);
                bound.vars[0] = v;
                let ests = bound.forward(x).unwrap();
                loss_sisdr(t, &refs, &ests).unwrap()
            },
            sep.params.get("enc.w").unwrap(),
            1e-6,
        );
        assert!(err <= 1e-5, "err = {err}");
    }
}
