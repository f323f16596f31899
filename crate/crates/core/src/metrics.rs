//! Multi-speaker ASR evaluation: word edit distance, WER, CP-WER and
//! ORC-WER with exact brute-force assignment solving.
//!
//! CP-WER minimizes over channel<->speaker permutations, so channel
//! switches are penalized. ORC-WER minimizes over assignments of each
//! reference utterance to one output channel (references concatenated in
//! onset order per channel), so a speaker split across channels is not
//! penalized. ORC-WER <= CP-WER always: with one utterance per speaker,
//! assignments strictly generalize permutations.
//!
//! Aggregates are corpus-level: total errors over total reference words,
//! never the mean of per-item ratios.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricError {
    #[error("empty reference")]
    EmptyReference,
    #[error("channel counts differ: {refs} references vs {hyps} hypotheses")]
    ChannelMismatch { refs: usize, hyps: usize },
    #[error("{what} count {got} exceeds the exhaustive-search bound {bound}")]
    TooLarge {
        what: &'static str,
        got: usize,
        bound: usize,
    },
    #[error("transcript parse: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, MetricError>;

/// Channel limit for permutation / assignment enumeration.
pub const MAX_CHANNELS: usize = 6;
/// Utterance limit for ORC assignment enumeration.
pub const MAX_UTTERANCES: usize = 8;

/// Minimal-cost alignment counts: `(errors, substitutions, insertions,
/// deletions)` with unit costs. When several alignments are minimal the
/// backtrace prefers match/substitution, then deletion, then insertion.
pub fn word_edit_distance<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> (usize, usize, usize, usize) {
    let n = reference.len();
    let m = hypothesis.len();
    // cell = (cost, s, i, d)
    let mut dp = vec![(0usize, 0usize, 0usize, 0usize); (n + 1) * (m + 1)];
    let idx = |i: usize, j: usize| i * (m + 1) + j;
    for j in 1..=m {
        dp[idx(0, j)] = (j, 0, j, 0);
    }
    for i in 1..=n {
        dp[idx(i, 0)] = (i, 0, 0, i);
        for j in 1..=m {
            let same = reference[i - 1] == hypothesis[j - 1];
            let diag = dp[idx(i - 1, j - 1)];
            let sub = (
                diag.0 + usize::from(!same),
                diag.1 + usize::from(!same),
                diag.2,
                diag.3,
            );
            let up = dp[idx(i - 1, j)];
            let del = (up.0 + 1, up.1, up.2, up.3 + 1);
            let left = dp[idx(i, j - 1)];
            let ins = (left.0 + 1, left.1, left.2 + 1, left.3);
            let mut best = sub;
            if del.0 < best.0 {
                best = del;
            }
            if ins.0 < best.0 {
                best = ins;
            }
            dp[idx(i, j)] = best;
        }
    }
    let (e, s, i, d) = dp[idx(n, m)];
    (e, s, i, d)
}

/// Word error rate: `errors / |reference|`. Empty references are an error.
pub fn wer<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(MetricError::EmptyReference);
    }
    let (errors, _, _, _) = word_edit_distance(reference, hypothesis);
    Ok(errors as f64 / reference.len() as f64)
}

use crate::permute::permutations;

/// Outcome of a CP-WER permutation solve.
#[derive(Debug, Clone, PartialEq)]
pub struct CpWerResult {
    /// `permutation[c]` is the hypothesis channel scored against
    /// reference speaker `c`.
    pub permutation: Vec<usize>,
    pub errors: usize,
    pub words: usize,
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
}

impl CpWerResult {
    pub fn wer(&self) -> f64 {
        self.errors as f64 / self.words as f64
    }
}

/// CP-WER: minimum over channel permutations of the summed edit errors,
/// over the total reference word count. Ties break toward the
/// lexicographically smallest permutation.
pub fn cp_wer<T: PartialEq>(refs: &[Vec<T>], hyps: &[Vec<T>]) -> Result<CpWerResult> {
    if refs.len() != hyps.len() {
        return Err(MetricError::ChannelMismatch {
            refs: refs.len(),
            hyps: hyps.len(),
        });
    }
    if refs.len() > MAX_CHANNELS {
        return Err(MetricError::TooLarge {
            what: "channels",
            got: refs.len(),
            bound: MAX_CHANNELS,
        });
    }
    let words: usize = refs.iter().map(Vec::len).sum();
    if words == 0 {
        return Err(MetricError::EmptyReference);
    }
    let c = refs.len();
    // pair costs once
    let mut pair = vec![(0usize, 0usize, 0usize, 0usize); c * c];
    for (r, rref) in refs.iter().enumerate() {
        for (h, hyp) in hyps.iter().enumerate() {
            pair[r * c + h] = word_edit_distance(rref, hyp);
        }
    }
    let mut best: Option<CpWerResult> = None;
    for perm in permutations(c) {
        let mut e = 0;
        let mut s = 0;
        let mut i = 0;
        let mut d = 0;
        for (r, &h) in perm.iter().enumerate() {
            let (pe, ps, pi, pd) = pair[r * c + h];
            e += pe;
            s += ps;
            i += pi;
            d += pd;
        }
        let better = match &best {
            None => true,
            Some(b) => e < b.errors,
        };
        if better {
            best = Some(CpWerResult {
                permutation: perm,
                errors: e,
                words,
                substitutions: s,
                insertions: i,
                deletions: d,
            });
        }
    }
    Ok(best.unwrap())
}

/// One reference utterance for ORC-WER scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct RefUtterance<T> {
    pub speaker: usize,
    /// Position in onset order; concatenation per channel sorts by this.
    pub onset_order: usize,
    pub tokens: Vec<T>,
}

/// Outcome of an ORC-WER assignment solve.
#[derive(Debug, Clone, PartialEq)]
pub struct OrcWerResult {
    /// `assignment[u]` is the channel utterance `u` was assigned to.
    pub assignment: Vec<usize>,
    pub errors: usize,
    pub words: usize,
}

impl OrcWerResult {
    pub fn wer(&self) -> f64 {
        self.errors as f64 / self.words as f64
    }
}

/// ORC-WER: minimum over assignments of reference utterances to channels.
/// Assigned references are concatenated in onset order per channel and
/// scored against that channel's hypothesis; unassigned channels count
/// their hypothesis words as insertions. Ties break toward the
/// lexicographically smallest assignment vector.
pub fn orc_wer<T: PartialEq + Clone>(
    ref_utterances: &[RefUtterance<T>],
    hyps: &[Vec<T>],
) -> Result<OrcWerResult> {
    if hyps.len() > MAX_CHANNELS {
        return Err(MetricError::TooLarge {
            what: "channels",
            got: hyps.len(),
            bound: MAX_CHANNELS,
        });
    }
    if ref_utterances.len() > MAX_UTTERANCES {
        return Err(MetricError::TooLarge {
            what: "utterances",
            got: ref_utterances.len(),
            bound: MAX_UTTERANCES,
        });
    }
    let words: usize = ref_utterances.iter().map(|u| u.tokens.len()).sum();
    if words == 0 || hyps.is_empty() {
        return Err(MetricError::EmptyReference);
    }
    let n_utt = ref_utterances.len();
    let n_ch = hyps.len();
    // onset order within the whole item; stable per channel
    let mut order: Vec<usize> = (0..n_utt).collect();
    order.sort_by_key(|&u| ref_utterances[u].onset_order);

    let mut assignment = vec![0usize; n_utt];
    let mut best: Option<OrcWerResult> = None;
    loop {
        let mut errors = 0;
        for (ch, hyp) in hyps.iter().enumerate() {
            let mut concat: Vec<T> = Vec::new();
            for &u in &order {
                if assignment[u] == ch {
                    concat.extend(ref_utterances[u].tokens.iter().cloned());
                }
            }
            let (e, _, _, _) = word_edit_distance(&concat, hyp);
            errors += e;
        }
        let better = match &best {
            None => true,
            Some(b) => errors < b.errors,
        };
        if better {
            best = Some(OrcWerResult {
                assignment: assignment.clone(),
                errors,
                words,
            });
        }
        // next assignment vector, odometer order (lexicographic)
        let mut i = n_utt;
        loop {
            if i == 0 {
                return Ok(best.unwrap());
            }
            i -= 1;
            assignment[i] += 1;
            if assignment[i] < n_ch {
                break;
            }
            assignment[i] = 0;
        }
    }
}

// ---------------------------------------------------------------------------
// Aggregate reporting
// ---------------------------------------------------------------------------

/// Per-item scores feeding an [`EvalReport`].
#[derive(Debug, Clone, PartialEq)]
pub struct ItemEval {
    pub cp: CpWerResult,
    pub orc: OrcWerResult,
    pub sisdr_db: f64,
}

/// Corpus-level evaluation summary.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub items: Vec<ItemEval>,
}

impl EvalReport {
    pub fn push(&mut self, item: ItemEval) {
        self.items.push(item);
    }

    /// Canonical aggregate: total errors over total reference words.
    pub fn cp_wer(&self) -> f64 {
        let e: usize = self.items.iter().map(|i| i.cp.errors).sum();
        let w: usize = self.items.iter().map(|i| i.cp.words).sum();
        e as f64 / w as f64
    }

    pub fn orc_wer(&self) -> f64 {
        let e: usize = self.items.iter().map(|i| i.orc.errors).sum();
        let w: usize = self.items.iter().map(|i| i.orc.words).sum();
        e as f64 / w as f64
    }

    /// Mean of per-item ratios, reported alongside the canonical form.
    pub fn cp_wer_mean_of_items(&self) -> f64 {
        let s: f64 = self.items.iter().map(|i| i.cp.wer()).sum();
        s / self.items.len() as f64
    }

    pub fn mean_sisdr_db(&self) -> f64 {
        let s: f64 = self.items.iter().map(|i| i.sisdr_db).sum();
        s / self.items.len() as f64
    }

    pub fn total_counts(&self) -> (usize, usize, usize) {
        let s = self.items.iter().map(|i| i.cp.substitutions).sum();
        let ins = self.items.iter().map(|i| i.cp.insertions).sum();
        let d = self.items.iter().map(|i| i.cp.deletions).sum();
        (s, ins, d)
    }
}

// ---------------------------------------------------------------------------
// Transcript interchange files
// ---------------------------------------------------------------------------

/// One line per channel, tokens space-separated.
pub fn format_hyp_lines(hyps: &[Vec<String>]) -> String {
    let mut out = String::new();
    for h in hyps {
        out.push_str(&h.join(" "));
        out.push('\n');
    }
    out
}

/// Parse the hypothesis interchange format.
pub fn parse_hyp_lines(text: &str) -> Vec<Vec<String>> {
    text.lines()
        .map(|l| l.split_whitespace().map(str::to_string).collect())
        .collect()
}

/// Reference lines additionally carry `speaker<TAB>onset_index<TAB>tokens`.
pub fn format_ref_lines(refs: &[RefUtterance<String>]) -> String {
    let mut out = String::new();
    for r in refs {
        out.push_str(&format!(
            "{}\t{}\t{}\n",
            r.speaker,
            r.onset_order,
            r.tokens.join(" ")
        ));
    }
    out
}

pub fn parse_ref_lines(text: &str) -> Result<Vec<RefUtterance<String>>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let mut parts = l.splitn(3, '\t');
            let speaker = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| MetricError::Parse(format!("bad speaker in {l:?}")))?;
            let onset_order = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| MetricError::Parse(format!("bad onset in {l:?}")))?;
            let tokens = parts
                .next()
                .map(|s| s.split_whitespace().map(str::to_string).collect())
                .unwrap_or_default();
            Ok(RefUtterance {
                speaker,
                onset_order,
                tokens,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn edit_distance_basics() {
        assert_eq!(word_edit_distance(&toks("a b c"), &toks("a b c")), (0, 0, 0, 0));
        assert_eq!(word_edit_distance(&toks("a b c"), &toks("a x c")), (1, 1, 0, 0));
        assert_eq!(word_edit_distance(&toks("a"), &toks("")), (1, 0, 0, 1));
        assert_eq!(word_edit_distance(&toks(""), &toks("a b")), (2, 0, 2, 0));
    }

    #[test]
    fn wer_basics() {
        assert_eq!(wer(&toks("a b c"), &toks("a b c")).unwrap(), 0.0);
        assert!((wer(&toks("a b c"), &toks("a x c")).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(wer(&toks("a b c"), &toks("")).unwrap(), 1.0);
        assert!(wer::<&str>(&[], &toks("a")).is_err());
    }

    #[test]
    fn cp_wer_permutation_symmetry() {
        let refs = vec![toks("a b"), toks("c")];
        let hyps = vec![toks("c"), toks("a b")];
        let r = cp_wer(&refs, &hyps).unwrap();
        assert_eq!(r.wer(), 0.0);
        assert_eq!(r.permutation, vec![1, 0]);

        let same = cp_wer(&refs, &refs).unwrap();
        assert_eq!(same.wer(), 0.0);
        assert_eq!(same.permutation, vec![0, 1]);
    }

    #[test]
    fn cp_vs_orc_worked_example() {
        // refs "a"/"b", hyps "a b"/"" -> CP-WER 1.0, ORC-WER 0.0
        let refs = vec![toks("a"), toks("b")];
        let hyps = vec![toks("a b"), toks("")];
        let cp = cp_wer(&refs, &hyps).unwrap();
        assert_eq!(cp.errors, 2);
        assert_eq!(cp.words, 2);
        assert_eq!(cp.wer(), 1.0);

        let utts = vec![
            RefUtterance { speaker: 0, onset_order: 0, tokens: toks("a") },
            RefUtterance { speaker: 1, onset_order: 1, tokens: toks("b") },
        ];
        let orc = orc_wer(&utts, &hyps).unwrap();
        assert_eq!(orc.wer(), 0.0);
        assert_eq!(orc.assignment, vec![0, 0]);
    }

    #[test]
    fn orc_equals_cp_when_channels_match_speakers() {
        let refs = vec![toks("a b c"), toks("d a")];
        let hyps = vec![toks("a x c"), toks("d a")];
        let cp = cp_wer(&refs, &hyps).unwrap();
        let utts: Vec<RefUtterance<&str>> = refs
            .iter()
            .enumerate()
            .map(|(i, t)| RefUtterance { speaker: i, onset_order: i, tokens: t.clone() })
            .collect();
        let orc = orc_wer(&utts, &hyps).unwrap();
        assert_eq!(orc.errors, cp.errors);
    }

    #[test]
    fn empty_references_are_errors() {
        let empty: Vec<Vec<&str>> = vec![vec![], vec![]];
        let hyps = vec![toks("a"), toks("")];
        assert!(matches!(cp_wer(&empty, &hyps), Err(MetricError::EmptyReference)));
        assert!(matches!(
            orc_wer::<&str>(&[], &hyps),
            Err(MetricError::EmptyReference)
        ));
    }

    #[test]
    fn aggregate_is_total_errors_over_total_words() {
        let mut report = EvalReport::default();
        // item 1: 1 error of 2 words; item 2: 0 of 4
        for (refs, hyps) in [
            (vec![toks("a"), toks("b")], vec![toks("a"), toks("c")]),
            (vec![toks("a b"), toks("c d")], vec![toks("a b"), toks("c d")]),
        ] {
            let cp = cp_wer(&refs, &hyps).unwrap();
            let utts: Vec<RefUtterance<&str>> = refs
                .iter()
                .enumerate()
                .map(|(i, t)| RefUtterance { speaker: i, onset_order: i, tokens: t.clone() })
                .collect();
            let orc = orc_wer(&utts, &hyps).unwrap();
            report.push(ItemEval { cp, orc, sisdr_db: 0.0 });
        }
        assert!((report.cp_wer() - 1.0 / 6.0).abs() < 1e-15);
        // mean of ratios differs: (0.5 + 0.0)/2 = 0.25
        assert!((report.cp_wer_mean_of_items() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn transcript_files_round_trip() {
        let hyps = vec![
            vec!["a".to_string(), "b".to_string()],
            vec![],
            vec!["c".to_string()],
        ];
        let text = format_hyp_lines(&hyps);
        assert_eq!(parse_hyp_lines(&text), hyps);

        let refs = vec![
            RefUtterance { speaker: 0, onset_order: 1, tokens: vec!["a".to_string()] },
            RefUtterance { speaker: 1, onset_order: 0, tokens: vec!["b".to_string(), "c".to_string()] },
        ];
        let text = format_ref_lines(&refs);
        assert_eq!(parse_ref_lines(&text).unwrap(), refs);
    }
}
