//! Latent-informed candidate prioritization: score candidate solutions by
//! latent activation strength, rank ascending (highest activation = most
//! likely incorrect = rank 1 = lowest weight), and aggregate answers by
//! weighted voting, with majority/length/perplexity baselines.

use crate::corpus::segment_and_tokenize;
use crate::error::{Error, Result};
use crate::latent::{decode_likelihood, encode_posterior_with_k, mean_mind, LatentMind};
use crate::model::UniCogModel;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreStrategy {
    /// (1/d) * sum of |mu_j| over all dimensions.
    MeanAbs,
    /// Largest activation.
    Max,
    /// Euclidean norm.
    L2,
    /// Sum of |mu_j| over the active dimensions only.
    ActivatedL1,
}

impl std::str::FromStr for ScoreStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "meanabs" => Ok(ScoreStrategy::MeanAbs),
            "max" => Ok(ScoreStrategy::Max),
            "l2" => Ok(ScoreStrategy::L2),
            "activated-l1" => Ok(ScoreStrategy::ActivatedL1),
            other => Err(Error::config(format!(
                "unknown strategy {other} (expected meanabs|max|l2|activated-l1)"
            ))),
        }
    }
}

/// Activation strength of a latent under the chosen strategy. All strategies
/// are 1-homogeneous: scaling mu by c > 0 scales the score by c.
pub fn activation_score(mind: &LatentMind, d: usize, strategy: ScoreStrategy) -> f64 {
    assert_eq!(mind.dim(), d, "latent dimensionality mismatch");
    match strategy {
        ScoreStrategy::MeanAbs => mind.mu.iter().map(|v| v.abs()).sum::<f64>() / d as f64,
        ScoreStrategy::Max => mind.mu.iter().cloned().fold(0.0f64, f64::max),
        ScoreStrategy::L2 => mind.mu.iter().map(|v| v * v).sum::<f64>().sqrt(),
        ScoreStrategy::ActivatedL1 => mind.support.iter().map(|&i| mind.mu[i].abs()).sum(),
    }
}

/// Ranks scores descending (rank 1 = highest score) and assigns weights
/// `1 + increment * (rank - 1)`, so the lowest score earns the largest
/// weight. Ties give the lower candidate index the lower rank.
pub fn rank_weights_with_increment(scores: &[f64], increment: f64) -> (Vec<usize>, Vec<f64>) {
    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("NaN score")
            .then(a.cmp(&b))
    });
    let mut ranks = vec![0usize; n];
    let mut weights = vec![0.0f64; n];
    for (pos, &idx) in order.iter().enumerate() {
        ranks[idx] = pos + 1;
        weights[idx] = 1.0 + increment * pos as f64;
    }
    (ranks, weights)
}

/// Standard rank weighting with the 0.5 increment.
pub fn rank_and_weight(scores: &[f64]) -> (Vec<usize>, Vec<f64>) {
    rank_weights_with_increment(scores, 0.5)
}

// ---------------------------------------------------------------------------
// Answer extraction

/// Canonicalizes an answer string: strips surrounding whitespace and dollar
/// signs, removes commas, and normalizes numeric forms (leading zeros,
/// trailing fractional zeros, bare "."). Non-numeric answers keep their text
/// with whitespace runs collapsed.
pub fn canonicalize_answer(s: &str) -> String {
    let s = s.trim().trim_matches('$').trim();
    let no_commas: String = s.chars().filter(|&c| c != ',').collect();
    if let Some(num) = canonicalize_number(&no_commas) {
        return num;
    }
    no_commas.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn canonicalize_number(s: &str) -> Option<String> {
    let re = regex::Regex::new(r"^([+-]?)(\d*)(?:\.(\d*))?(?:/(\d+))?$").unwrap();
    let caps = re.captures(s)?;
    let sign = caps.get(1).map_or("", |m| m.as_str());
    let int_part = caps.get(2).map_or("", |m| m.as_str());
    let frac_part = caps.get(3).map_or("", |m| m.as_str());
    let denom = caps.get(4).map(|m| m.as_str());
    if int_part.is_empty() && frac_part.is_empty() {
        return None;
    }
    let int_trimmed = int_part.trim_start_matches('0');
    let int_norm = if int_trimmed.is_empty() { "0" } else { int_trimmed };
    let frac_trimmed = frac_part.trim_end_matches('0');
    let mut out = String::new();
    if sign == "-" {
        out.push('-');
    }
    out.push_str(int_norm);
    if !frac_trimmed.is_empty() {
        out.push('.');
        out.push_str(frac_trimmed);
    }
    if let Some(den) = denom {
        let den_trimmed = den.trim_start_matches('0');
        out.push('/');
        out.push_str(if den_trimmed.is_empty() { "0" } else { den_trimmed });
    }
    // Normalize negative zero.
    if out == "-0" {
        out = "0".to_string();
    }
    Some(out)
}

fn last_boxed(text: &str) -> Option<String> {
    let marker = r"\boxed{";
    let start = text.rfind(marker)? + marker.len();
    let mut depth = 1usize;
    for (i, c) in text[start..].char_indices() {
        match c {
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(text[start..start + i].to_string());
                }
            }
            _ => {}
        }
    }
    None
}

const NUMBER_PATTERN: &str = r"[+-]?\d[\d,]*(?:\.\d+)?(?:/\d+)?";

/// Extracts a canonical answer: the last boxed expression, else the last
/// number in the final sentence, else the final sentence itself. An empty
/// solution maps to the empty string.
pub fn extract_answer(solution: &str) -> String {
    extract_answer_with(solution, None)
}

/// Like [`extract_answer`] with an optional override regex replacing the
/// default precedence rules (the last match in the solution wins).
pub fn extract_answer_with(solution: &str, override_regex: Option<&regex::Regex>) -> String {
    if let Some(re) = override_regex {
        if let Some(m) = re.find_iter(solution).last() {
            return canonicalize_answer(m.as_str());
        }
        return String::new();
    }
    if let Some(boxed) = last_boxed(solution) {
        return canonicalize_answer(&boxed);
    }
    let sentences = crate::corpus::segment_sentences(solution);
    let Some(final_sentence) = sentences.last() else {
        return String::new();
    };
    let number_re = regex::Regex::new(NUMBER_PATTERN).unwrap();
    if let Some(m) = number_re.find_iter(final_sentence).last() {
        return canonicalize_answer(m.as_str());
    }
    canonicalize_answer(final_sentence)
}

// ---------------------------------------------------------------------------
// Candidate sets

#[derive(Clone, Debug, Serialize)]
pub struct Candidate {
    pub index: usize,
    pub text: String,
    pub extracted_answer: String,
    #[serde(skip)]
    pub solution_latent: Option<LatentMind>,
    /// Activation strength under the configured strategy.
    pub score: f64,
    /// 1 = highest activation (most likely incorrect).
    pub rank: usize,
    /// 1 + 0.5 * (rank - 1).
    pub weight: f64,
    pub token_length: usize,
    pub perplexity: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct CandidateSet {
    pub problem_id: String,
    pub problem: String,
    pub gold_answer: Option<String>,
    pub candidates: Vec<Candidate>,
    pub chosen_answer: Option<String>,
    pub method: Option<String>,
}

#[derive(Deserialize)]
struct RawCandidate {
    text: Option<String>,
    #[serde(default)]
    answer: Option<String>,
}

#[derive(Deserialize)]
struct RawCandidateSet {
    problem_id: String,
    problem: String,
    #[serde(default)]
    gold_answer: Option<String>,
    candidates: Vec<RawCandidate>,
}

/// Reads candidate sets from JSONL:
/// `{problem_id, problem, gold_answer?, candidates: [{text, answer?}]}`.
/// Pre-extracted answers are honored (canonicalized); otherwise answers come
/// from [`extract_answer`]. Duplicate problem ids are an error.
pub fn read_candidate_sets(path: &Path) -> Result<Vec<CandidateSet>> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::data(format!("cannot open {}: {e}", path.display())))?;
    let reader = std::io::BufReader::new(file);
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawCandidateSet = serde_json::from_str(&line)
            .map_err(|e| Error::data(format!("{}: line {lineno}: {e}", path.display())))?;
        if !seen.insert(raw.problem_id.clone()) {
            return Err(Error::data(format!(
                "{}: line {lineno}: duplicate problem_id {}",
                path.display(),
                raw.problem_id
            )));
        }
        if raw.candidates.is_empty() {
            return Err(Error::data(format!(
                "{}: line {lineno}: problem {} has no candidates",
                path.display(),
                raw.problem_id
            )));
        }
        let mut candidates = Vec::with_capacity(raw.candidates.len());
        for (i, rc) in raw.candidates.into_iter().enumerate() {
            let text = rc.text.ok_or_else(|| {
                Error::data(format!(
                    "{}: line {lineno}: candidate {i} missing \"text\"",
                    path.display()
                ))
            })?;
            let extracted = match rc.answer {
                Some(a) => canonicalize_answer(&a),
                None => extract_answer(&text),
            };
            candidates.push(Candidate {
                index: i,
                text,
                extracted_answer: extracted,
                solution_latent: None,
                score: 0.0,
                rank: 0,
                weight: 0.0,
                token_length: 0,
                perplexity: None,
            });
        }
        out.push(CandidateSet {
            problem_id: raw.problem_id,
            problem: raw.problem,
            gold_answer: raw.gold_answer.map(|g| canonicalize_answer(&g)),
            candidates,
            chosen_answer: None,
            method: None,
        });
    }
    Ok(out)
}

pub fn write_candidate_sets(path: &Path, sets: &[CandidateSet]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for set in sets {
        serde_json::to_writer(&mut f, set)
            .map_err(|e| Error::runtime(format!("serialize candidate set: {e}")))?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

/// Fills latents, scores, ranks, weights, token lengths (and perplexities
/// when requested) for every candidate of a set, using the trained model.
/// `k_override` swaps the sparsity level for sweep runs.
pub fn score_candidates(
    model: &UniCogModel,
    set: &mut CandidateSet,
    strategy: ScoreStrategy,
    max_sentence_tokens: usize,
    with_perplexity: bool,
    k_override: Option<usize>,
) -> Result<()> {
    let d = model.cfg.latent.d;
    let k = k_override.unwrap_or(model.cfg.latent.k);
    for cand in &mut set.candidates {
        let sentences = segment_and_tokenize(&cand.text, max_sentence_tokens);
        if sentences.is_empty() {
            return Err(Error::data(format!(
                "problem {}: candidate {} is empty",
                set.problem_id, cand.index
            )));
        }
        let minds = sentences
            .iter()
            .map(|s| encode_posterior_with_k(model, s, k))
            .collect::<Result<Vec<_>>>()?;
        cand.token_length = sentences.iter().map(|s| s.ids.len()).sum();
        if with_perplexity {
            let mut nll = 0.0;
            let mut tokens = 0usize;
            for (seq, mind) in sentences.iter().zip(&minds) {
                nll += decode_likelihood(model, &mind.mu, seq)?.nll;
                tokens += seq.target_len();
            }
            cand.perplexity = Some((nll / tokens as f64).exp());
        }
        let solution_latent = mean_mind(&minds)?;
        cand.score = activation_score(&solution_latent, d, strategy);
        cand.solution_latent = Some(solution_latent);
    }
    apply_ranks(set);
    Ok(())
}

/// Recomputes ranks and weights from the candidates' scores.
pub fn apply_ranks(set: &mut CandidateSet) {
    let scores: Vec<f64> = set.candidates.iter().map(|c| c.score).collect();
    let (ranks, weights) = rank_and_weight(&scores);
    for (cand, (r, w)) in set.candidates.iter_mut().zip(ranks.into_iter().zip(weights)) {
        cand.rank = r;
        cand.weight = w;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AggregateMethod {
    /// Activation-rank weighted voting.
    WeightedVote,
    /// Self-consistency: plain majority voting.
    MajorityVote,
    /// Longer solutions earn higher weights.
    LengthRank,
    /// Lower-perplexity solutions earn higher weights.
    PerplexityRank,
}

impl std::str::FromStr for AggregateMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weighted" => Ok(AggregateMethod::WeightedVote),
            "sc" => Ok(AggregateMethod::MajorityVote),
            "lr" => Ok(AggregateMethod::LengthRank),
            "pr" => Ok(AggregateMethod::PerplexityRank),
            other => Err(Error::config(format!(
                "unknown method {other} (expected weighted|sc|lr|pr)"
            ))),
        }
    }
}

impl AggregateMethod {
    pub fn tag(&self) -> &'static str {
        match self {
            AggregateMethod::WeightedVote => "weighted",
            AggregateMethod::MajorityVote => "sc",
            AggregateMethod::LengthRank => "lr",
            AggregateMethod::PerplexityRank => "pr",
        }
    }
}

/// Per-candidate vote weights under a method.
fn method_weights(candidates: &[Candidate], method: AggregateMethod) -> Result<Vec<f64>> {
    match method {
        AggregateMethod::WeightedVote => Ok(candidates.iter().map(|c| c.weight).collect()),
        AggregateMethod::MajorityVote => Ok(vec![1.0; candidates.len()]),
        AggregateMethod::LengthRank => {
            // Longest solution = lowest score here = highest weight.
            let scores: Vec<f64> = candidates.iter().map(|c| -(c.token_length as f64)).collect();
            Ok(rank_and_weight(&scores).1)
        }
        AggregateMethod::PerplexityRank => {
            let scores: Vec<f64> = candidates
                .iter()
                .map(|c| {
                    c.perplexity.ok_or_else(|| {
                        Error::data(format!(
                            "candidate {} lacks perplexity, required by the pr method",
                            c.index
                        ))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(rank_and_weight(&scores).1)
        }
    }
}

/// Chooses the answer with the highest summed weight. Ties go to the answer
/// containing the single best candidate under the method (highest weight),
/// then to the lexicographically smallest answer.
pub fn aggregate(candidates: &[Candidate], method: AggregateMethod) -> Result<String> {
    if candidates.is_empty() {
        return Err(Error::data("aggregate over an empty candidate list"));
    }
    let weights = method_weights(candidates, method)?;
    let mut totals: HashMap<&str, f64> = HashMap::new();
    let mut best_single: HashMap<&str, f64> = HashMap::new();
    for (cand, &w) in candidates.iter().zip(&weights) {
        let a = cand.extracted_answer.as_str();
        *totals.entry(a).or_insert(0.0) += w;
        let best = best_single.entry(a).or_insert(f64::NEG_INFINITY);
        if w > *best {
            *best = w;
        }
    }
    let mut answers: Vec<&str> = totals.keys().copied().collect();
    answers.sort_unstable();
    let mut chosen = answers[0];
    for &a in &answers[1..] {
        let better = match totals[a].partial_cmp(&totals[chosen]).unwrap() {
            std::cmp::Ordering::Greater => true,
            std::cmp::Ordering::Less => false,
            std::cmp::Ordering::Equal => matches!(
                best_single[a].partial_cmp(&best_single[chosen]).unwrap(),
                std::cmp::Ordering::Greater
            ),
        };
        if better {
            chosen = a;
        }
    }
    Ok(chosen.to_string())
}

/// Applies a method to every set, filling `chosen_answer`; returns accuracy
/// against gold answers when every set carries one.
pub fn rerank_sets(sets: &mut [CandidateSet], method: AggregateMethod) -> Result<Option<f64>> {
    let mut correct = 0usize;
    let mut with_gold = 0usize;
    for set in sets.iter_mut() {
        let chosen = aggregate(&set.candidates, method)?;
        if let Some(gold) = &set.gold_answer {
            with_gold += 1;
            if &chosen == gold {
                correct += 1;
            }
        }
        set.chosen_answer = Some(chosen);
        set.method = Some(method.tag().to_string());
    }
    Ok(if with_gold == sets.len() && with_gold > 0 {
        Some(correct as f64 / with_gold as f64)
    } else {
        None
    })
}
