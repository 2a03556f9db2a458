//! BLEU and ROUGE-LSum over token-id sequences.

use std::collections::HashMap;

use crate::corpus::split_sentences;
use crate::error::{Error, Result};

pub const MAX_NGRAM: usize = 4;

/// Multiset of n-grams of one order range.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NgramCounts {
    counts: HashMap<Vec<u32>, usize>,
}

impl NgramCounts {
    /// Counts every n-gram of `tokens` with `min_n <= n <= max_n`.
    pub fn new(tokens: &[u32], min_n: usize, max_n: usize) -> Result<Self> {
        if min_n == 0 || min_n > max_n || max_n > MAX_NGRAM {
            return Err(Error::invalid(format!(
                "n-gram orders must satisfy 1 <= {min_n} <= {max_n} <= {MAX_NGRAM}"
            )));
        }
        let mut counts = HashMap::new();
        for n in min_n..=max_n {
            for gram in tokens.windows(n) {
                *counts.entry(gram.to_vec()).or_insert(0) += 1;
            }
        }
        Ok(Self { counts })
    }

    pub fn get(&self, gram: &[u32]) -> usize {
        self.counts.get(gram).copied().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[u32], usize)> {
        self.counts.iter().map(|(g, &c)| (g.as_slice(), c))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BleuConfig {
    pub max_n: usize,
    /// Add-one smoothing of the precisions of order two and up.
    pub smoothing: bool,
}

impl Default for BleuConfig {
    fn default() -> Self {
        Self {
            max_n: MAX_NGRAM,
            smoothing: false,
        }
    }
}

/// Sentence BLEU with clipped n-gram precisions and brevity penalty.
pub fn bleu(candidate: &[u32], reference: &[u32], config: BleuConfig) -> Result<f64> {
    if candidate.is_empty() {
        return Err(Error::invalid("BLEU candidate is empty"));
    }
    let max_n = config.max_n;
    if max_n == 0 || max_n > MAX_NGRAM {
        return Err(Error::invalid(format!(
            "max_n must be in 1..={MAX_NGRAM}, got {max_n}"
        )));
    }
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let cand = NgramCounts::new(candidate, n, n)?;
        let refs = NgramCounts::new(reference, n, n)?;
        let total = candidate.len().saturating_sub(n - 1);
        let matched: usize = cand.iter().map(|(g, c)| c.min(refs.get(g))).sum();
        let (num, den) = if config.smoothing && n > 1 {
            (matched as f64 + 1.0, total as f64 + 1.0)
        } else {
            (matched as f64, total as f64)
        };
        if num == 0.0 {
            return Ok(0.0);
        }
        log_sum += (num / den).ln();
    }
    let bp = (1.0 - reference.len() as f64 / candidate.len() as f64).min(0.0);
    Ok((log_sum / max_n as f64 + bp).exp())
}

fn lcs_table(a: &[u32], b: &[u32]) -> Vec<Vec<usize>> {
    let mut t = vec![vec![0; b.len() + 1]; a.len() + 1];
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            t[i][j] = if a[i - 1] == b[j - 1] {
                t[i - 1][j - 1] + 1
            } else {
                t[i - 1][j].max(t[i][j - 1])
            };
        }
    }
    t
}

pub fn lcs_len(a: &[u32], b: &[u32]) -> usize {
    lcs_table(a, b)[a.len()][b.len()]
}

/// Indices into `reference` of one longest common subsequence with `candidate`.
fn lcs_indices(reference: &[u32], candidate: &[u32]) -> Vec<usize> {
    let t = lcs_table(reference, candidate);
    let (mut i, mut j) = (reference.len(), candidate.len());
    let mut out = Vec::new();
    while i > 0 && j > 0 {
        if reference[i - 1] == candidate[j - 1] {
            out.push(i - 1);
            i -= 1;
            j -= 1;
        } else if t[i - 1][j] >= t[i][j - 1] {
            i -= 1;
        } else {
            j -= 1;
        }
    }
    out.reverse();
    out
}

/// Summary-level ROUGE-L F-measure. Sentences are delimited by
/// [`SENTENCE_SEPARATOR`](crate::corpus::SENTENCE_SEPARATOR). Each reference
/// sentence contributes the union of its LCS tokens against every candidate
/// sentence; hits are clipped by token counts on both sides.
pub fn rouge_lsum(candidate: &[u32], reference: &[u32]) -> Result<f64> {
    let cand = split_sentences(candidate);
    let refs = split_sentences(reference);
    if cand.is_empty() || refs.is_empty() {
        return Err(Error::invalid(
            "ROUGE-LSum needs at least one sentence on each side",
        ));
    }
    let mut ref_counts: HashMap<u32, usize> = HashMap::new();
    let mut cand_counts: HashMap<u32, usize> = HashMap::new();
    for &t in refs.iter().copied().flatten() {
        *ref_counts.entry(t).or_default() += 1;
    }
    for &t in cand.iter().copied().flatten() {
        *cand_counts.entry(t).or_default() += 1;
    }
    let ref_len: usize = refs.iter().map(|s| s.len()).sum();
    let cand_len: usize = cand.iter().map(|s| s.len()).sum();

    let mut hits = 0usize;
    for r in &refs {
        let mut union: Vec<usize> = cand.iter().flat_map(|c| lcs_indices(r, c)).collect();
        union.sort_unstable();
        union.dedup();
        for idx in union {
            let t = r[idx];
            let rc = ref_counts.get_mut(&t).expect("reference token counted");
            let cc = cand_counts.entry(t).or_default();
            if *rc > 0 && *cc > 0 {
                *rc -= 1;
                *cc -= 1;
                hits += 1;
            }
        }
    }
    if hits == 0 {
        return Ok(0.0);
    }
    let p = hits as f64 / cand_len as f64;
    let r = hits as f64 / ref_len as f64;
    Ok(2.0 * p * r / (p + r))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SENTENCE_SEPARATOR as SEP;

    fn unigram() -> BleuConfig {
        BleuConfig {
            max_n: 1,
            smoothing: false,
        }
    }

    #[test]
    fn bleu_brevity_example() {
        let got = bleu(&[1, 2], &[1, 2, 3], unigram()).unwrap();
        assert!((got - (-0.5f64).exp()).abs() < 1e-12);
        assert!((got - 0.6065).abs() < 1e-4);
    }

    #[test]
    fn bleu_perfect_and_disjoint() {
        let a: Vec<u32> = (0..20).collect();
        assert_eq!(bleu(&a, &a, BleuConfig::default()).unwrap(), 1.0);
        let b: Vec<u32> = (100..120).collect();
        assert_eq!(bleu(&a, &b, BleuConfig::default()).unwrap(), 0.0);
    }

    #[test]
    fn bleu_clips_repeated_tokens() {
        // 4 candidate unigrams, the reference holds one `7`: precision 1/4, no brevity penalty.
        let got = bleu(&[7, 7, 7, 7], &[7, 1, 2, 3], unigram()).unwrap();
        assert!((got - 0.25).abs() < 1e-12);
    }

    #[test]
    fn bleu_bigram_hand_computed() {
        // p1 = 4/4, p2 = 1/3 (only [1,2] matches), equal lengths.
        let got = bleu(
            &[1, 2, 4, 3],
            &[1, 2, 3, 4],
            BleuConfig {
                max_n: 2,
                smoothing: false,
            },
        )
        .unwrap();
        assert!((got - (1.0f64 / 3.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn bleu_smoothing_rescues_zero_higher_orders() {
        let cand = [1, 3, 2];
        let refs = [1, 2, 3];
        assert_eq!(
            bleu(
                &cand,
                &refs,
                BleuConfig {
                    max_n: 2,
                    smoothing: false
                }
            )
            .unwrap(),
            0.0
        );
        let smoothed = bleu(
            &cand,
            &refs,
            BleuConfig {
                max_n: 2,
                smoothing: true,
            },
        )
        .unwrap();
        assert!((smoothed - (1.0f64 * (1.0 / 3.0)).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn bleu_rejects_empty_candidate() {
        assert!(matches!(
            bleu(&[], &[1], BleuConfig::default()),
            Err(Error::InvalidArgument(_))
        ));
        assert!(bleu(
            &[1],
            &[1],
            BleuConfig {
                max_n: 5,
                smoothing: false
            }
        )
        .is_err());
    }

    #[test]
    fn rouge_single_sentence_example() {
        let got = rouge_lsum(&[1, 2, 4], &[1, 2, 3]).unwrap();
        assert!((got - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn rouge_perfect_and_disjoint() {
        let a = [1, 2, SEP, 3, 4, 5];
        assert_eq!(rouge_lsum(&a, &a).unwrap(), 1.0);
        assert_eq!(rouge_lsum(&[9, 8, SEP, 7], &a).unwrap(), 0.0);
    }

    #[test]
    fn rouge_union_across_candidate_sentences() {
        // Reference sentence [1,2,3,4]: LCS with [1,2] is {1,2}, with [3,4] is {3,4},
        // union covers all 4 reference tokens. P = 4/4, R = 4/4.
        assert_eq!(rouge_lsum(&[1, 2, SEP, 3, 4], &[1, 2, 3, 4]).unwrap(), 1.0);
        // Reversed sentence order: the union is still 4 hits, while plain LCS of
        // the concatenation would find only 2.
        assert_eq!(rouge_lsum(&[3, 4, SEP, 1, 2], &[1, 2, 3, 4]).unwrap(), 1.0);
        assert_eq!(lcs_len(&[3, 4, 1, 2], &[1, 2, 3, 4]), 2);
    }

    #[test]
    fn rouge_hits_are_clipped_by_counts() {
        // Both reference sentences match the single candidate `5`, but it can be used once.
        // hits = 1, P = 1/1, R = 1/2, F = 2/3.
        let got = rouge_lsum(&[5], &[5, SEP, 5]).unwrap();
        assert!((got - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn rouge_rejects_empty() {
        assert!(rouge_lsum(&[], &[1]).is_err());
        assert!(rouge_lsum(&[1], &[SEP]).is_err());
    }

    #[test]
    fn ngram_counts() {
        let c = NgramCounts::new(&[1, 1, 1], 1, 2).unwrap();
        assert_eq!(c.get(&[1]), 3);
        assert_eq!(c.get(&[1, 1]), 2);
        assert_eq!(c.len(), 2);
        assert!(NgramCounts::new(&[1], 0, 1).is_err());
        assert!(NgramCounts::new(&[1], 1, 5).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        const OOV: u32 = 1_000_000;

        fn seq() -> impl Strategy<Value = Vec<u32>> {
            proptest::collection::vec(0u32..6, 1..30)
        }

        proptest! {
            #[test]
            fn metrics_in_unit_interval(a in seq(), b in seq(), smoothing: bool) {
                let s = bleu(&a, &b, BleuConfig { max_n: 4, smoothing }).unwrap();
                prop_assert!((0.0..=1.0).contains(&s));
                let r = rouge_lsum(&a, &b).unwrap();
                prop_assert!((0.0..=1.0 + 1e-12).contains(&r));
            }

            #[test]
            fn oov_substitution_never_helps(a in seq(), b in seq(), idx in any::<prop::sample::Index>()) {
                let mut worse = a.clone();
                worse[idx.index(a.len())] = OOV;
                let cfg = BleuConfig::default();
                prop_assert!(bleu(&worse, &b, cfg).unwrap() <= bleu(&a, &b, cfg).unwrap() + 1e-12);
                prop_assert!(rouge_lsum(&worse, &b).unwrap() <= rouge_lsum(&a, &b).unwrap() + 1e-12);
            }

            #[test]
            fn lcs_is_symmetric(a in seq(), b in seq()) {
                prop_assert_eq!(lcs_len(&a, &b), lcs_len(&b, &a));
                prop_assert_eq!(lcs_indices(&a, &b).len(), lcs_len(&a, &b));
            }
        }
    }
}
