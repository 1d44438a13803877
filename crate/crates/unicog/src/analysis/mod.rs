//! Latent-space and surrogate-output analyses: reconstruction fidelity,
//! dimension overlap, activation amplification, trajectory distances,
//! failure-dimension statistics, and length-controlled ratios.

pub mod dtw;
pub mod textmetrics;

pub use dtw::{dtw_distance, pointwise_distance, DtwMetric};
pub use textmetrics::{bleu4, rouge_l_f1};

use crate::corpus::{detokenize, ReasoningSample};
use crate::error::{Error, Result};
use crate::latent::{encode_posterior, greedy_reconstruct, Trajectory};
use crate::latent::{decode_likelihood, decode_log_prob_rows};
use crate::model::UniCogModel;
use crate::rng::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::Path;

// ---------------------------------------------------------------------------
// Surrogate fidelity

#[derive(Clone, Debug, Serialize)]
pub struct PerplexityReport {
    pub per_sample: Vec<SamplePerplexity>,
    /// exp(mean per-token NLL) over all tokens of all samples.
    pub mean_perplexity: f64,
    pub token_count: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct SamplePerplexity {
    pub sample_id: String,
    pub perplexity: f64,
    pub tokens: usize,
}

/// Perplexity of each sample's sentences under the decoder, with every
/// sentence conditioned on its own posterior mean.
pub fn perplexity(model: &UniCogModel, samples: &[ReasoningSample]) -> Result<PerplexityReport> {
    if samples.is_empty() {
        return Err(Error::data("perplexity over an empty sample set"));
    }
    let mut per_sample = Vec::with_capacity(samples.len());
    let mut total_nll = 0.0;
    let mut total_tokens = 0usize;
    for sample in samples {
        let mut nll = 0.0;
        let mut tokens = 0usize;
        for seq in &sample.sentences {
            let mind = encode_posterior(model, seq)?;
            let dec = decode_likelihood(model, &mind.mu, seq)?;
            nll += dec.nll;
            tokens += seq.target_len();
        }
        if tokens == 0 {
            continue;
        }
        per_sample.push(SamplePerplexity {
            sample_id: sample.id.clone(),
            perplexity: (nll / tokens as f64).exp(),
            tokens,
        });
        total_nll += nll;
        total_tokens += tokens;
    }
    if total_tokens == 0 {
        return Err(Error::data("perplexity over samples with no tokens"));
    }
    Ok(PerplexityReport {
        per_sample,
        mean_perplexity: (total_nll / total_tokens as f64).exp(),
        token_count: total_tokens,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct ReconScore {
    pub sample_id: String,
    pub bleu: f64,
    pub rouge_l: f64,
    pub reconstruction: String,
    pub reference: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct ReconReport {
    pub per_sample: Vec<ReconScore>,
    pub mean_bleu: f64,
    pub mean_rouge_l: f64,
}

/// Greedy-reconstructs every sentence from its own posterior mean and scores
/// the joined text against the original (BLEU-4 and ROUGE-L on byte tokens).
pub fn reconstruction_scores(
    model: &UniCogModel,
    samples: &[ReasoningSample],
) -> Result<ReconReport> {
    if samples.is_empty() {
        return Err(Error::data("reconstruction over an empty sample set"));
    }
    let max_len = model.cfg.decoder.max_seq_len - model.cfg.latent.prefix_count;
    let mut per_sample = Vec::with_capacity(samples.len());
    let mut bleu_sum = 0.0;
    let mut rouge_sum = 0.0;
    for sample in samples {
        let mut recon_parts = Vec::with_capacity(sample.sentences.len());
        let mut ref_parts = Vec::with_capacity(sample.sentences.len());
        for seq in &sample.sentences {
            let mind = encode_posterior(model, seq)?;
            let out = greedy_reconstruct(model, &mind.mu, max_len)?;
            recon_parts.push(detokenize(&out).unwrap_or_default());
            ref_parts.push(detokenize(seq)?);
        }
        let reconstruction = recon_parts.join(" ");
        let reference = ref_parts.join(" ");
        let bleu = bleu4(reconstruction.as_bytes(), reference.as_bytes());
        let rouge = rouge_l_f1(reconstruction.as_bytes(), reference.as_bytes());
        bleu_sum += bleu;
        rouge_sum += rouge;
        per_sample.push(ReconScore {
            sample_id: sample.id.clone(),
            bleu,
            rouge_l: rouge,
            reconstruction,
            reference,
        });
    }
    let n = per_sample.len() as f64;
    Ok(ReconReport {
        mean_bleu: bleu_sum / n,
        mean_rouge_l: rouge_sum / n,
        per_sample,
    })
}

// ---------------------------------------------------------------------------
// Token-distribution KL against an external reference

/// One position of reference top-k token log-probabilities. Token ids use the
/// byte-level vocabulary, which is what "byte alignment" means here: position
/// `pos` indexes the target tokens of the sentence's own token sequence.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RefPosition {
    pub pos: usize,
    /// (token id, log-probability) pairs.
    pub top: Vec<(u32, f64)>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RefLogProbLine {
    pub sample_id: String,
    pub sentence_index: usize,
    pub positions: Vec<RefPosition>,
}

#[derive(Clone, Debug, Serialize)]
pub struct TokenKlReport {
    pub mean_kl: f64,
    pub positions: usize,
}

/// Mean KL(reference || surrogate) per position over the reference's listed
/// tokens, with residual probability mass lumped into an OTHER bucket.
pub fn token_kl(
    model: &UniCogModel,
    samples: &[ReasoningSample],
    reference_path: &Path,
) -> Result<TokenKlReport> {
    let by_id: BTreeMap<&str, &ReasoningSample> =
        samples.iter().map(|s| (s.id.as_str(), s)).collect();
    let file = std::fs::File::open(reference_path)
        .map_err(|e| Error::data(format!("cannot open {}: {e}", reference_path.display())))?;
    let reader = std::io::BufReader::new(file);

    let mut total_kl = 0.0;
    let mut positions = 0usize;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RefLogProbLine = serde_json::from_str(&line).map_err(|e| {
            Error::data(format!("{}: line {}: {e}", reference_path.display(), lineno + 1))
        })?;
        let sample = by_id.get(rec.sample_id.as_str()).ok_or_else(|| {
            Error::data(format!("reference names unknown sample {}", rec.sample_id))
        })?;
        let seq = sample.sentences.get(rec.sentence_index).ok_or_else(|| {
            Error::data(format!(
                "sample {} has no sentence {}",
                rec.sample_id, rec.sentence_index
            ))
        })?;
        let mind = encode_posterior(model, seq)?;
        let rows = decode_log_prob_rows(model, &mind.mu, seq)?;
        for p in &rec.positions {
            let row = rows.get(p.pos).ok_or_else(|| {
                Error::data(format!(
                    "position misalignment: {}:{} has {} target tokens, reference wants {}",
                    rec.sample_id,
                    rec.sentence_index,
                    rows.len(),
                    p.pos
                ))
            })?;
            let mut kl = 0.0;
            let mut p_mass = 0.0;
            let mut q_mass = 0.0;
            for &(tok, ref_lp) in &p.top {
                let q_lp = *row.get(tok as usize).ok_or_else(|| {
                    Error::data(format!(
                        "position misalignment: reference token id {tok} outside byte vocabulary"
                    ))
                })?;
                let p_tok = ref_lp.exp();
                kl += p_tok * (ref_lp - q_lp);
                p_mass += p_tok;
                q_mass += q_lp.exp();
            }
            let p_other = (1.0 - p_mass).max(0.0);
            let q_other = (1.0 - q_mass).max(f64::MIN_POSITIVE);
            if p_other > 1e-12 {
                kl += p_other * (p_other.ln() - q_other.ln());
            }
            total_kl += kl;
            positions += 1;
        }
    }
    if positions == 0 {
        return Err(Error::data("reference file holds no positions"));
    }
    Ok(TokenKlReport {
        mean_kl: total_kl / positions as f64,
        positions,
    })
}

// ---------------------------------------------------------------------------
// Dimension overlap

/// |A ∩ B| / min(|A|, |B|) over sorted index sets. Empty set is an error.
pub fn overlap_ratio(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::data("overlap of an empty support set"));
    }
    let inter = intersection_size(a, b);
    Ok(inter as f64 / a.len().min(b.len()) as f64)
}

/// |A ∩ B| / |A ∪ B| over sorted index sets. Empty set is an error.
pub fn jaccard(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::data("jaccard of an empty support set"));
    }
    let inter = intersection_size(a, b);
    let union = a.len() + b.len() - inter;
    Ok(inter as f64 / union as f64)
}

fn intersection_size(a: &[usize], b: &[usize]) -> usize {
    let (mut i, mut j, mut n) = (0usize, 0usize, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
        }
    }
    n
}

/// Union of all sentence supports of a solution.
pub fn solution_support(traj: &Trajectory) -> Vec<usize> {
    let mut set = std::collections::BTreeSet::new();
    for mind in &traj.minds {
        set.extend(mind.support.iter().copied());
    }
    set.into_iter().collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct OverlapReport {
    pub pair: (u8, u8),
    /// Mean |A ∩ B| / min(|A|,|B|) over cross pairs of solution supports.
    pub overlap_ratio: f64,
    /// Mean Jaccard over the same pairs, for transparency.
    pub jaccard: f64,
    /// Expected overlap of two independent random K-subsets: K/d.
    pub random_baseline: f64,
    /// Mean support sizes of the two groups.
    pub support_sizes: (f64, f64),
}

/// Overlap reports for every unordered pair of variant groups, computed on
/// per-solution union supports.
pub fn variant_overlap_reports(
    groups: &BTreeMap<u8, Vec<Trajectory>>,
    k: usize,
    d: usize,
) -> Result<Vec<OverlapReport>> {
    if groups.len() < 2 {
        return Err(Error::data("need at least two variant groups for overlap"));
    }
    let supports: BTreeMap<u8, Vec<Vec<usize>>> = groups
        .iter()
        .map(|(tag, trajs)| (*tag, trajs.iter().map(solution_support).collect()))
        .collect();
    let mean_size = |tag: u8| -> f64 {
        let s = &supports[&tag];
        s.iter().map(|x| x.len() as f64).sum::<f64>() / s.len() as f64
    };
    let tags: Vec<u8> = groups.keys().copied().collect();
    let mut out = Vec::new();
    for (i, &a) in tags.iter().enumerate() {
        for &b in &tags[i + 1..] {
            let mut acc_overlap = 0.0;
            let mut acc_jaccard = 0.0;
            let mut n = 0usize;
            for sa in &supports[&a] {
                for sb in &supports[&b] {
                    acc_overlap += overlap_ratio(sa, sb)?;
                    acc_jaccard += jaccard(sa, sb)?;
                    n += 1;
                }
            }
            out.push(OverlapReport {
                pair: (a, b),
                overlap_ratio: acc_overlap / n as f64,
                jaccard: acc_jaccard / n as f64,
                random_baseline: k as f64 / d as f64,
                support_sizes: (mean_size(a), mean_size(b)),
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize)]
pub struct OverlapBaseline {
    pub empirical_mean: f64,
    /// K/d.
    pub expected: f64,
    pub std_error: f64,
    pub draws: usize,
}

/// Monte-Carlo overlap of independent uniformly random K-subsets of 0..d.
pub fn random_overlap_baseline(d: usize, k: usize, draws: usize, seed: u64) -> OverlapBaseline {
    let mut rng = Rng::new(seed);
    let mut scratch = Vec::new();
    let mut member = vec![false; d];
    let mut sum = 0.0;
    let mut sumsq = 0.0;
    for _ in 0..draws {
        let a = rng.sample_indices(d, k, &mut scratch);
        for &i in &a {
            member[i] = true;
        }
        let b = rng.sample_indices(d, k, &mut scratch);
        let inter = b.iter().filter(|&&i| member[i]).count();
        for &i in &a {
            member[i] = false;
        }
        let ratio = inter as f64 / k as f64;
        sum += ratio;
        sumsq += ratio * ratio;
    }
    let mean = sum / draws as f64;
    let var = (sumsq / draws as f64 - mean * mean).max(0.0);
    OverlapBaseline {
        empirical_mean: mean,
        expected: k as f64 / d as f64,
        std_error: (var / draws as f64).sqrt(),
        draws,
    }
}

// ---------------------------------------------------------------------------
// Activation amplification

/// Mean over sentences of the mean active value of each latent.
pub fn trajectory_strength(traj: &Trajectory) -> f64 {
    if traj.minds.is_empty() {
        return 0.0;
    }
    traj.minds.iter().map(|m| m.mean_active()).sum::<f64>() / traj.minds.len() as f64
}

/// Ratio of mean trajectory strength, group over baseline.
pub fn amplification_ratio(group: &[Trajectory], baseline: &[Trajectory]) -> Result<f64> {
    if group.is_empty() || baseline.is_empty() {
        return Err(Error::data("amplification over an empty group"));
    }
    let g = group.iter().map(trajectory_strength).sum::<f64>() / group.len() as f64;
    let b = baseline.iter().map(trajectory_strength).sum::<f64>() / baseline.len() as f64;
    if b == 0.0 {
        return Err(Error::data("baseline activation strength is zero"));
    }
    Ok(g / b)
}

// ---------------------------------------------------------------------------
// Trajectory distance matrix

#[derive(Clone, Debug, Serialize)]
pub struct DistanceMatrix {
    pub tags: Vec<u8>,
    /// Mean pairwise DTW between groups; diagonal fixed at 0.
    pub raw: Vec<Vec<f64>>,
    /// Min-max normalized over off-diagonal entries.
    pub normalized: Vec<Vec<f64>>,
}

/// Mean pairwise DTW distance between every pair of variant groups, then
/// min-max normalization of the off-diagonal entries to [0, 1].
pub fn variant_distance_matrix(
    groups: &BTreeMap<u8, Vec<Trajectory>>,
    metric: DtwMetric,
) -> Result<DistanceMatrix> {
    if groups.len() < 2 {
        return Err(Error::data("need at least two variant groups for distances"));
    }
    for (tag, trajs) in groups {
        if trajs.is_empty() {
            return Err(Error::data(format!("variant group {tag} is empty")));
        }
    }
    let tags: Vec<u8> = groups.keys().copied().collect();
    let n = tags.len();
    let mut raw = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let ga = &groups[&tags[i]];
            let gb = &groups[&tags[j]];
            let mut acc = 0.0;
            let mut count = 0usize;
            for a in ga {
                for b in gb {
                    acc += dtw_distance(a, b, metric)?;
                    count += 1;
                }
            }
            let mean = acc / count as f64;
            raw[i][j] = mean;
            raw[j][i] = mean;
        }
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                lo = lo.min(raw[i][j]);
                hi = hi.max(raw[i][j]);
            }
        }
    }
    let span = hi - lo;
    let mut normalized = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            if i != j && span > 0.0 {
                normalized[i][j] = (raw[i][j] - lo) / span;
            }
        }
    }
    Ok(DistanceMatrix {
        tags,
        raw,
        normalized,
    })
}

// ---------------------------------------------------------------------------
// Failure-dimension statistics

#[derive(Clone, Debug, Serialize)]
pub struct DimensionStats {
    pub dim: usize,
    /// Fraction of sentence steps where the dimension is active.
    pub activation_ratio_correct: f64,
    pub activation_ratio_incorrect: f64,
    /// Mean value over the steps where the dimension is active.
    pub mean_strength_correct: f64,
    pub mean_strength_incorrect: f64,
    /// incorrect / correct mean strength; None when the dimension never
    /// activates in correct cases.
    pub strength_ratio: Option<f64>,
}

struct ClassAccum {
    steps: usize,
    active: Vec<usize>,
    strength: Vec<f64>,
}

impl ClassAccum {
    fn new(d: usize) -> Self {
        ClassAccum {
            steps: 0,
            active: vec![0; d],
            strength: vec![0.0; d],
        }
    }

    fn add(&mut self, traj: &Trajectory) {
        for mind in &traj.minds {
            self.steps += 1;
            for &i in &mind.support {
                self.active[i] += 1;
                self.strength[i] += mind.mu[i];
            }
        }
    }
}

/// Per-dimension activation and strength statistics split by correctness.
/// Dimensions active in at most `min_error_activation` of the incorrect-class
/// steps are filtered out; the rest are sorted by strength ratio descending
/// (dimensions lacking a correct-class baseline sort last).
pub fn error_dimension_stats(
    correct: &[&Trajectory],
    incorrect: &[&Trajectory],
    d: usize,
    min_error_activation: f64,
) -> Result<Vec<DimensionStats>> {
    if correct.is_empty() || incorrect.is_empty() {
        return Err(Error::data(
            "failure-dimension statistics need both correct and incorrect cases",
        ));
    }
    let mut acc_c = ClassAccum::new(d);
    let mut acc_i = ClassAccum::new(d);
    for t in correct {
        acc_c.add(t);
    }
    for t in incorrect {
        acc_i.add(t);
    }
    if acc_c.steps == 0 || acc_i.steps == 0 {
        return Err(Error::data("a correctness class has no sentence steps"));
    }
    let mut out = Vec::new();
    for dim in 0..d {
        let ratio_i = acc_i.active[dim] as f64 / acc_i.steps as f64;
        if ratio_i <= min_error_activation {
            continue;
        }
        let ratio_c = acc_c.active[dim] as f64 / acc_c.steps as f64;
        let mean_c = if acc_c.active[dim] > 0 {
            acc_c.strength[dim] / acc_c.active[dim] as f64
        } else {
            0.0
        };
        let mean_i = if acc_i.active[dim] > 0 {
            acc_i.strength[dim] / acc_i.active[dim] as f64
        } else {
            0.0
        };
        let strength_ratio = if mean_c > 0.0 { Some(mean_i / mean_c) } else { None };
        out.push(DimensionStats {
            dim,
            activation_ratio_correct: ratio_c,
            activation_ratio_incorrect: ratio_i,
            mean_strength_correct: mean_c,
            mean_strength_incorrect: mean_i,
            strength_ratio,
        });
    }
    out.sort_by(|a, b| match (b.strength_ratio, a.strength_ratio) {
        (Some(x), Some(y)) => x.partial_cmp(&y).unwrap().then(a.dim.cmp(&b.dim)),
        (Some(_), None) => std::cmp::Ordering::Greater,
        (None, Some(_)) => std::cmp::Ordering::Less,
        (None, None) => a.dim.cmp(&b.dim),
    });
    Ok(out)
}

// ---------------------------------------------------------------------------
// Length-controlled analysis

#[derive(Clone, Debug, Serialize)]
pub struct LengthBucket {
    /// Token-length interval [start, end).
    pub start: usize,
    pub end: usize,
    pub n_correct: usize,
    pub n_incorrect: usize,
    /// Mean incorrect strength over mean correct strength; None when a class
    /// is absent from the bucket.
    pub ratio: Option<f64>,
}

/// Error/correct activation-strength ratio within consecutive token-length
/// intervals. Buckets missing a class are reported with `ratio: None`.
pub fn length_bucket_ratio(
    items: &[(bool, usize, &Trajectory)],
    bucket_size: usize,
) -> Result<Vec<LengthBucket>> {
    if bucket_size == 0 {
        return Err(Error::config("bucket size must be positive"));
    }
    if items.is_empty() {
        return Err(Error::data("length analysis over an empty set"));
    }
    let max_len = items.iter().map(|(_, len, _)| *len).max().unwrap();
    let n_buckets = max_len / bucket_size + 1;
    let mut corr: Vec<Vec<f64>> = vec![Vec::new(); n_buckets];
    let mut inc: Vec<Vec<f64>> = vec![Vec::new(); n_buckets];
    for (is_correct, len, traj) in items {
        let b = len / bucket_size;
        let strength = trajectory_strength(traj);
        if *is_correct {
            corr[b].push(strength);
        } else {
            inc[b].push(strength);
        }
    }
    let mut out = Vec::new();
    let mut any_valid = false;
    for b in 0..n_buckets {
        if corr[b].is_empty() && inc[b].is_empty() {
            continue;
        }
        let ratio = if !corr[b].is_empty() && !inc[b].is_empty() {
            let mc = corr[b].iter().sum::<f64>() / corr[b].len() as f64;
            let mi = inc[b].iter().sum::<f64>() / inc[b].len() as f64;
            if mc > 0.0 {
                any_valid = true;
                Some(mi / mc)
            } else {
                None
            }
        } else {
            None
        };
        out.push(LengthBucket {
            start: b * bucket_size,
            end: (b + 1) * bucket_size,
            n_correct: corr[b].len(),
            n_incorrect: inc[b].len(),
            ratio,
        });
    }
    if !any_valid {
        return Err(Error::data(
            "no length bucket contains both correct and incorrect cases",
        ));
    }
    Ok(out)
}
