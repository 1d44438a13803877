//! BLEU and ROUGE-L over byte tokens, for reconstruction fidelity scoring.

use std::collections::HashMap;

const MAX_NGRAM: usize = 4;

fn ngram_counts(tokens: &[u8], n: usize) -> HashMap<&[u8], usize> {
    let mut counts: HashMap<&[u8], usize> = HashMap::new();
    for w in tokens.windows(n) {
        *counts.entry(w).or_insert(0) += 1;
    }
    counts
}

/// Sentence-level BLEU-4 with brevity penalty on byte tokens: geometric mean
/// of clipped n-gram precisions up to order min(4, candidate length). Any
/// zero precision gives 0. Two identical strings score 1.
pub fn bleu4(candidate: &[u8], reference: &[u8]) -> f64 {
    if candidate == reference {
        return 1.0;
    }
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let max_n = MAX_NGRAM.min(candidate.len()).min(reference.len());
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let cand = ngram_counts(candidate, n);
        let refc = ngram_counts(reference, n);
        let total: usize = cand.values().sum();
        let clipped: usize = cand
            .iter()
            .map(|(gram, &c)| c.min(refc.get(gram).copied().unwrap_or(0)))
            .sum();
        if clipped == 0 {
            return 0.0;
        }
        log_sum += (clipped as f64 / total as f64).ln();
    }
    let precision = (log_sum / max_n as f64).exp();
    let bp = if candidate.len() < reference.len() {
        (1.0 - reference.len() as f64 / candidate.len() as f64).exp()
    } else {
        1.0
    };
    bp * precision
}

fn lcs_len(a: &[u8], b: &[u8]) -> usize {
    let n = b.len();
    let mut prev = vec![0usize; n + 1];
    let mut curr = vec![0usize; n + 1];
    for &av in a {
        for (j, &bv) in b.iter().enumerate() {
            curr[j + 1] = if av == bv {
                prev[j] + 1
            } else {
                prev[j + 1].max(curr[j])
            };
        }
        std::mem::swap(&mut prev, &mut curr);
        curr[0] = 0;
    }
    prev[n]
}

/// ROUGE-L F1 on byte tokens (longest common subsequence).
pub fn rouge_l_f1(candidate: &[u8], reference: &[u8]) -> f64 {
    if candidate == reference {
        return 1.0;
    }
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(candidate, reference) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let p = lcs / candidate.len() as f64;
    let r = lcs / reference.len() as f64;
    2.0 * p * r / (p + r)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent n-gram precision oracle: nested-loop matching with
    /// explicit clip bookkeeping, no hash maps.
    fn bleu_oracle(cand: &[u8], refr: &[u8]) -> f64 {
        if cand == refr {
            return 1.0;
        }
        if cand.is_empty() || refr.is_empty() {
            return 0.0;
        }
        let max_n = 4usize.min(cand.len()).min(refr.len());
        let mut log_sum = 0.0;
        for n in 1..=max_n {
            let cand_grams: Vec<&[u8]> = cand.windows(n).collect();
            let ref_grams: Vec<&[u8]> = refr.windows(n).collect();
            let mut clipped = 0usize;
            let mut counted: Vec<&[u8]> = Vec::new();
            for gram in &cand_grams {
                if counted.contains(gram) {
                    continue;
                }
                counted.push(gram);
                let c_count = cand_grams.iter().filter(|g| g == &gram).count();
                let r_count = ref_grams.iter().filter(|g| g == &gram).count();
                clipped += c_count.min(r_count);
            }
            if clipped == 0 {
                return 0.0;
            }
            log_sum += (clipped as f64 / cand_grams.len() as f64).ln();
        }
        let precision = (log_sum / max_n as f64).exp();
        let bp = if cand.len() < refr.len() {
            (1.0 - refr.len() as f64 / cand.len() as f64).exp()
        } else {
            1.0
        };
        bp * precision
    }

    #[test]
    fn identical_strings_score_one() {
        assert_eq!(bleu4(b"the answer is 42", b"the answer is 42"), 1.0);
        assert_eq!(rouge_l_f1(b"the answer is 42", b"the answer is 42"), 1.0);
        assert_eq!(bleu4(b"", b""), 1.0);
        assert_eq!(rouge_l_f1(b"", b""), 1.0);
    }

    #[test]
    fn disjoint_strings_score_zero() {
        assert_eq!(bleu4(b"aaaa", b"bbbb"), 0.0);
        assert_eq!(rouge_l_f1(b"aaaa", b"bbbb"), 0.0);
    }

    #[test]
    fn matches_independent_oracle_on_fixed_pairs() {
        let pairs: &[(&[u8], &[u8])] = &[
            (b"add 3 and 4 to get 7.", b"add 3 and 4 to get 8."),
            (b"half of 14 is 7.", b"half of 14 is 7."),
            (b"the cat sat", b"the cat sat on the mat"),
            (b"abcabcabc", b"abcabc"),
            (b"hello world", b"world hello"),
        ];
        for (c, r) in pairs {
            let got = bleu4(c, r);
            let want = bleu_oracle(c, r);
            assert!(
                (got - want).abs() < 1e-12,
                "bleu mismatch on {:?}: {got} vs oracle {want}",
                String::from_utf8_lossy(c)
            );
        }
    }

    #[test]
    fn rouge_l_prefers_ordered_overlap() {
        // "abcd" vs "abxd": LCS = 3, P = R = 3/4, F1 = 3/4.
        let f1 = rouge_l_f1(b"abcd", b"abxd");
        assert!((f1 - 0.75).abs() < 1e-12);
    }

    #[test]
    fn bleu_is_permutation_sensitive() {
        let reference = b"one two three four five six";
        let shuffled = b"six five four three two one";
        assert!(bleu4(shuffled, reference) < 1.0);
        assert!(bleu4(reference, reference) == 1.0);
    }

    #[test]
    fn brevity_penalty_punishes_short_candidates() {
        let long_ref = b"a common prefix with a very long continuation here";
        let short_cand = b"a common prefix";
        let bleu = bleu4(short_cand, long_ref);
        let manual = bleu_oracle(short_cand, long_ref);
        assert!((bleu - manual).abs() < 1e-12);
        assert!(bleu < 1.0);
    }
}
