//! ROUGE evaluation: n-gram overlap and longest common subsequence.
//!
//! All three variants report precision, recall, and F1. ROUGE-1 and
//! ROUGE-2 count clipped n-gram matches (a candidate n-gram only scores
//! as often as the reference contains it); ROUGE-L measures the longest
//! common subsequence. Corpus scores are the componentwise mean of the
//! per-pair scores.

use std::collections::HashMap;
use std::fmt;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Precision/recall/F1 triple for one ROUGE variant.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl RougeScore {
    fn from_counts(matches: f64, candidate_total: f64, reference_total: f64) -> RougeScore {
        let precision = if candidate_total > 0.0 { matches / candidate_total } else { 0.0 };
        let recall = if reference_total > 0.0 { matches / reference_total } else { 0.0 };
        // 2PR/(P+R) reduced to 2m/(c+r): one division instead of three,
        // so scores with small-integer counts land on exact rationals.
        let f1 = if matches > 0.0 {
            2.0 * matches / (candidate_total + reference_total)
        } else {
            0.0
        };
        RougeScore { precision, recall, f1 }
    }
}

/// Which ROUGE variant to compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RougeVariant {
    #[serde(rename = "rouge1")]
    Rouge1,
    #[serde(rename = "rouge2")]
    Rouge2,
    #[serde(rename = "rougeL")]
    RougeL,
}

impl RougeVariant {
    pub const ALL: [RougeVariant; 3] = [RougeVariant::Rouge1, RougeVariant::Rouge2, RougeVariant::RougeL];

    pub fn score<T: Eq + Hash>(self, candidate: &[T], reference: &[T]) -> RougeScore {
        match self {
            RougeVariant::Rouge1 => rouge_n(candidate, reference, 1),
            RougeVariant::Rouge2 => rouge_n(candidate, reference, 2),
            RougeVariant::RougeL => rouge_l(candidate, reference),
        }
    }
}

impl fmt::Display for RougeVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RougeVariant::Rouge1 => write!(f, "rouge1"),
            RougeVariant::Rouge2 => write!(f, "rouge2"),
            RougeVariant::RougeL => write!(f, "rougeL"),
        }
    }
}

/// ROUGE-N with clipped counts. Sequences shorter than `n` contribute
/// zero n-grams, which scores as zero rather than an error.
pub fn rouge_n<T: Eq + Hash>(candidate: &[T], reference: &[T], n: usize) -> RougeScore {
    assert!(n > 0, "n-gram order must be positive");
    let cand_total = candidate.len().saturating_sub(n - 1);
    let ref_total = reference.len().saturating_sub(n - 1);
    if cand_total == 0 || ref_total == 0 {
        return RougeScore::from_counts(0.0, cand_total as f64, ref_total as f64);
    }
    let mut ref_counts: HashMap<&[T], usize> = HashMap::new();
    for gram in reference.windows(n) {
        *ref_counts.entry(gram).or_insert(0) += 1;
    }
    let mut matches = 0usize;
    for gram in candidate.windows(n) {
        if let Some(count) = ref_counts.get_mut(gram) {
            if *count > 0 {
                *count -= 1;
                matches += 1;
            }
        }
    }
    RougeScore::from_counts(matches as f64, cand_total as f64, ref_total as f64)
}

/// Length of the longest common subsequence, by dynamic programming.
pub fn lcs_length<T: Eq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut curr = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            curr[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(curr[j]) };
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[b.len()]
}

/// ROUGE-L: precision and recall of the longest common subsequence
/// against the candidate and reference lengths.
pub fn rouge_l<T: Eq + Hash>(candidate: &[T], reference: &[T]) -> RougeScore {
    let lcs = lcs_length(candidate, reference) as f64;
    RougeScore::from_counts(lcs, candidate.len() as f64, reference.len() as f64)
}

/// All three variants for every pair, averaged componentwise.
///
/// `pairs[i]` is `(candidate, reference)`. The result maps each variant
/// to the mean precision, recall, and F1 across pairs.
pub fn evaluate_corpus<T: Eq + Hash>(
    pairs: &[(Vec<T>, Vec<T>)],
) -> Result<Vec<(RougeVariant, RougeScore)>> {
    if pairs.is_empty() {
        return Err(Error::Contract("cannot evaluate an empty corpus".into()));
    }
    let mut out = Vec::with_capacity(RougeVariant::ALL.len());
    for variant in RougeVariant::ALL {
        let mut total = RougeScore::default();
        for (candidate, reference) in pairs {
            let s = variant.score(candidate, reference);
            total.precision += s.precision;
            total.recall += s.recall;
            total.f1 += s.f1;
        }
        let n = pairs.len() as f64;
        out.push((
            variant,
            RougeScore { precision: total.precision / n, recall: total.recall / n, f1: total.f1 / n },
        ));
    }
    Ok(out)
}
