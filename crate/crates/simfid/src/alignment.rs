//! Distance measures and similarity transforms that compare one simulated
//! setting against the reference corpus, plus the final score aggregation.
//!
//! All similarities live on a 0..=100 scale; 100 means indistinguishable from
//! the reference along that dimension.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Corpus;
use crate::lexical::{CategoryStats, LengthStats, MarkerStats};

#[derive(Debug, Error, PartialEq)]
pub enum AlignmentError {
    #[error("distribution mismatch: {0}")]
    DomainMismatch(String),
    #[error("no turn has support in both series")]
    NoComparableTurns,
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("every setting is at zero distance; min-max normalisation is undefined")]
    DegenerateRange,
    #[error("non-positive count: {0}")]
    NonPositiveCount(&'static str),
    #[error("reference marker rate is zero; relative rate difference is undefined")]
    ZeroReferenceRate,
    #[error("{0} turns lack labels (first: {1})")]
    MissingLabels(usize, String),
    #[error("setting `{0}` is missing dimension {1}")]
    IncompleteRow(String, Dimension),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, Hash)]
#[serde(rename_all = "snake_case")]
pub enum Dimension {
    Nep,
    Emotion,
    Diversity,
    Length,
    Markers,
}

impl Dimension {
    pub const ALL: [Dimension; 5] = [
        Dimension::Nep,
        Dimension::Emotion,
        Dimension::Diversity,
        Dimension::Length,
        Dimension::Markers,
    ];
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Dimension::Nep => "NEP",
            Dimension::Emotion => "Emotion",
            Dimension::Diversity => "Diversity",
            Dimension::Length => "Length",
            Dimension::Markers => "Markers",
        };
        write!(f, "{name}")
    }
}

/// Label distribution at one turn position. `support == 0` marks a turn with
/// no observations; its proportions are all zero and it is skipped during
/// comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnDistribution {
    pub proportions: Vec<f64>,
    pub support: usize,
}

impl TurnDistribution {
    pub fn is_empty(&self) -> bool {
        self.support == 0
    }
}

/// Per-turn label distributions for one setting, over a fixed label space and
/// turn horizon. Turn `t` of every conversation with at least `t` patient
/// turns contributes one observation to `turns[t - 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelProgressionSeries {
    pub label_space: Vec<String>,
    pub turns: Vec<TurnDistribution>,
}

impl LabelProgressionSeries {
    pub fn horizon(&self) -> usize {
        self.turns.len()
    }
}

/// Builds the per-turn label distribution series for a corpus.
///
/// `label_of(conversation_id, turn_index)` supplies the label of each patient
/// turn; `None` marks it missing. Labels listed in `exclude` are dropped and
/// the remaining mass re-normalised; a turn whose observations were all
/// excluded ends up empty. Fails if any in-horizon turn lacks a label or a
/// label falls outside `label_space`.
pub fn build_progression<F>(
    corpus: &Corpus,
    label_space: &[&str],
    horizon: usize,
    exclude: &[&str],
    label_of: F,
) -> Result<LabelProgressionSeries, AlignmentError>
where
    F: Fn(&str, usize) -> Option<String>,
{
    let kept: Vec<&str> = label_space
        .iter()
        .copied()
        .filter(|l| !exclude.contains(l))
        .collect();
    if kept.is_empty() {
        return Err(AlignmentError::DomainMismatch(
            "exclusion removes the entire label space".to_string(),
        ));
    }
    let index_of = |label: &str| kept.iter().position(|l| *l == label);
    let mut counts = vec![vec![0usize; kept.len()]; horizon];
    let mut missing: Vec<String> = Vec::new();
    for conv in &corpus.conversations {
        for (turn_index, _) in conv.patient_turns() {
            if turn_index > horizon {
                break;
            }
            let Some(label) = label_of(&conv.conversation_id, turn_index) else {
                missing.push(format!("{}#{turn_index}", conv.conversation_id));
                continue;
            };
            if exclude.contains(&label.as_str()) {
                continue;
            }
            match index_of(&label) {
                Some(i) => counts[turn_index - 1][i] += 1,
                None => {
                    return Err(AlignmentError::DomainMismatch(format!(
                        "label `{label}` not in label space"
                    )))
                }
            }
        }
    }
    if !missing.is_empty() {
        let first = missing[0].clone();
        return Err(AlignmentError::MissingLabels(missing.len(), first));
    }
    let turns = counts
        .into_iter()
        .map(|row| {
            let support: usize = row.iter().sum();
            let proportions = if support == 0 {
                vec![0.0; row.len()]
            } else {
                row.iter().map(|&c| c as f64 / support as f64).collect()
            };
            TurnDistribution {
                proportions,
                support,
            }
        })
        .collect();
    Ok(LabelProgressionSeries {
        label_space: kept.iter().map(|s| s.to_string()).collect(),
        turns,
    })
}

/// Jensen-Shannon divergence in bits between two distributions over the same
/// support. Symmetric, bounded to [0, 1].
pub fn jsd(p: &[f64], q: &[f64]) -> Result<f64, AlignmentError> {
    if p.len() != q.len() || p.is_empty() {
        return Err(AlignmentError::DomainMismatch(format!(
            "lengths {} vs {}",
            p.len(),
            q.len()
        )));
    }
    for dist in [p, q] {
        if dist.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
            return Err(AlignmentError::DomainMismatch(
                "probabilities outside [0, 1]".to_string(),
            ));
        }
        let sum: f64 = dist.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(AlignmentError::DomainMismatch(format!(
                "probabilities sum to {sum}"
            )));
        }
    }
    let mut div = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        let mi = 0.5 * (pi + qi);
        if pi > 0.0 {
            div += 0.5 * pi * (pi / mi).log2();
        }
        if qi > 0.0 {
            div += 0.5 * qi * (qi / mi).log2();
        }
    }
    Ok(div.clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgressionComparison {
    pub similarity: f64,
    /// 100/T_eff times the summed per-turn JSD.
    pub distance: f64,
    pub turns_compared: usize,
    /// Per turn position: `None` where either side had no support.
    pub per_turn_jsd: Vec<Option<f64>>,
}

/// Compares two progression series turn by turn. Turns empty on either side
/// are skipped and the divergence averaged over the remaining count.
pub fn progression_divergence(
    candidate: &LabelProgressionSeries,
    reference: &LabelProgressionSeries,
) -> Result<ProgressionComparison, AlignmentError> {
    if candidate.label_space != reference.label_space
        || candidate.horizon() != reference.horizon()
    {
        return Err(AlignmentError::DomainMismatch(
            "progression series have different label spaces or horizons".to_string(),
        ));
    }
    let mut per_turn = Vec::with_capacity(candidate.horizon());
    let mut total = 0.0;
    let mut compared = 0usize;
    for (c, r) in candidate.turns.iter().zip(&reference.turns) {
        if c.is_empty() || r.is_empty() {
            per_turn.push(None);
            continue;
        }
        let d = jsd(&c.proportions, &r.proportions)?;
        per_turn.push(Some(d));
        total += d;
        compared += 1;
    }
    if compared == 0 {
        return Err(AlignmentError::NoComparableTurns);
    }
    let distance = 100.0 * total / compared as f64;
    Ok(ProgressionComparison {
        similarity: 100.0 - distance,
        distance,
        turns_compared: compared,
        per_turn_jsd: per_turn,
    })
}

/// First Wasserstein distance between two empirical 1-D samples: the integral
/// of |CDF_a - CDF_b|. For equal sample sizes this equals the mean absolute
/// difference of sorted values.
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> Result<f64, AlignmentError> {
    if a.is_empty() || b.is_empty() {
        return Err(AlignmentError::EmptyInput("wasserstein_1d"));
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(f64::total_cmp);
    sb.sort_by(f64::total_cmp);
    let mut points: Vec<f64> = sa.iter().chain(sb.iter()).copied().collect();
    points.sort_by(f64::total_cmp);
    let mut distance = 0.0;
    let (mut ia, mut ib) = (0usize, 0usize);
    for pair in points.windows(2) {
        let (lo, hi) = (pair[0], pair[1]);
        while ia < sa.len() && sa[ia] <= lo {
            ia += 1;
        }
        while ib < sb.len() && sb[ib] <= lo {
            ib += 1;
        }
        let cdf_a = ia as f64 / sa.len() as f64;
        let cdf_b = ib as f64 / sb.len() as f64;
        distance += (cdf_a - cdf_b).abs() * (hi - lo);
    }
    Ok(distance)
}

/// Min-max normalises distances into similarities with the floor pinned at
/// zero: `100 * (d_max - d) / d_max`. The setting at `d_max` scores exactly 0
/// and lower distance always means higher similarity.
pub fn diversity_similarity(
    distances: &BTreeMap<String, f64>,
) -> Result<BTreeMap<String, f64>, AlignmentError> {
    if distances.is_empty() {
        return Err(AlignmentError::EmptyInput("diversity_similarity"));
    }
    let d_max = distances.values().copied().fold(f64::MIN, f64::max);
    if !(d_max > 0.0) {
        return Err(AlignmentError::DegenerateRange);
    }
    Ok(distances
        .iter()
        .map(|(k, &d)| (k.clone(), (100.0 * (d_max - d) / d_max).clamp(0.0, 100.0)))
        .collect())
}

fn log_ratio_similarity(candidate: f64, reference: f64) -> f64 {
    100.0 * (-(candidate / reference).ln().abs()).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LengthComparison {
    pub similarity: f64,
    pub words_per_message_similarity: f64,
    pub words_per_sentence_similarity: f64,
}

/// Length similarity: `100 * exp(-|ln(c_sim / c_ref)|)` per count, averaged
/// over words-per-message and words-per-sentence. Equal counts score 100; a
/// ratio and its reciprocal score the same.
pub fn length_similarity(
    candidate: &LengthStats,
    reference: &LengthStats,
) -> Result<LengthComparison, AlignmentError> {
    let counts = [
        candidate.words_per_message,
        candidate.words_per_sentence,
        reference.words_per_message,
        reference.words_per_sentence,
    ];
    if counts.iter().any(|&c| !(c > 0.0) || !c.is_finite()) {
        return Err(AlignmentError::NonPositiveCount("length_similarity"));
    }
    let wpm = log_ratio_similarity(candidate.words_per_message, reference.words_per_message);
    let wps = log_ratio_similarity(candidate.words_per_sentence, reference.words_per_sentence);
    Ok(LengthComparison {
        similarity: 0.5 * (wpm + wps),
        words_per_message_similarity: wpm,
        words_per_sentence_similarity: wps,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarkerComparison {
    pub similarity: f64,
    pub distance: f64,
    /// Percent difference of the overall per-1000-token rate, relative to the
    /// reference rate.
    pub rate_relative_diff: f64,
    /// Absolute difference of overall message prevalence, in percentage
    /// points.
    pub prevalence_abs_diff: f64,
}

/// Marker similarity: mean of the relative overall-rate difference and the
/// absolute overall-prevalence difference, subtracted from 100 and floored at
/// zero.
pub fn marker_similarity(
    candidate: &MarkerStats,
    reference: &MarkerStats,
) -> Result<MarkerComparison, AlignmentError> {
    marker_similarity_from_overall(&candidate.overall, &reference.overall)
}

pub fn marker_similarity_from_overall(
    candidate: &CategoryStats,
    reference: &CategoryStats,
) -> Result<MarkerComparison, AlignmentError> {
    if !(reference.rate_ptk > 0.0) {
        return Err(AlignmentError::ZeroReferenceRate);
    }
    let rate_relative_diff =
        100.0 * (candidate.rate_ptk - reference.rate_ptk).abs() / reference.rate_ptk;
    let prevalence_abs_diff = (candidate.prevalence_msg - reference.prevalence_msg).abs();
    let distance = 0.5 * (rate_relative_diff + prevalence_abs_diff);
    Ok(MarkerComparison {
        similarity: (100.0 - distance).max(0.0),
        distance,
        rate_relative_diff,
        prevalence_abs_diff,
    })
}

/// Dimension-specific diagnostics carried alongside each score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DimensionDetails {
    Progression {
        turns_compared: usize,
        mean_jsd: f64,
        excluded_labels: Vec<String>,
    },
    Diversity {
        distance: f64,
        max_distance: f64,
        score_mean: f64,
        score_std: f64,
        corpus_level_score: f64,
        conversations_included: usize,
        conversations_total: usize,
    },
    Length {
        words_per_message: f64,
        words_per_sentence: f64,
        reference_words_per_message: f64,
        reference_words_per_sentence: f64,
        words_per_message_similarity: f64,
        words_per_sentence_similarity: f64,
    },
    Markers {
        rate_ptk: f64,
        prevalence_msg: f64,
        reference_rate_ptk: f64,
        reference_prevalence_msg: f64,
        rate_relative_diff: f64,
        prevalence_abs_diff: f64,
        per_category: BTreeMap<String, CategoryStats>,
    },
    /// Placeholder for scores injected from precomputed tables.
    External {},
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimensionScore {
    pub dimension: Dimension,
    pub similarity: f64,
    pub details: DimensionDetails,
}

impl DimensionScore {
    pub fn external(dimension: Dimension, similarity: f64) -> Self {
        DimensionScore {
            dimension,
            similarity,
            details: DimensionDetails::External {},
        }
    }
}

pub type ScoreSet = BTreeMap<Dimension, DimensionScore>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub setting_id: String,
    pub overall: f64,
    pub scores: ScoreSet,
}

impl BenchmarkRow {
    pub fn similarity(&self, dimension: Dimension) -> f64 {
        self.scores[&dimension].similarity
    }
}

/// Rows sorted best-first: descending overall, setting id as tie-break.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub rows: Vec<BenchmarkRow>,
}

/// Overall score per setting is the unweighted mean of the five dimension
/// similarities. Every setting must carry all five.
pub fn aggregate_and_rank(
    scores: BTreeMap<String, ScoreSet>,
) -> Result<Ranking, AlignmentError> {
    if scores.is_empty() {
        return Err(AlignmentError::EmptyInput("aggregate_and_rank"));
    }
    let mut rows = Vec::with_capacity(scores.len());
    for (setting_id, set) in scores {
        for dim in Dimension::ALL {
            if !set.contains_key(&dim) {
                return Err(AlignmentError::IncompleteRow(setting_id, dim));
            }
        }
        let overall =
            Dimension::ALL.iter().map(|d| set[d].similarity).sum::<f64>() / Dimension::ALL.len() as f64;
        rows.push(BenchmarkRow {
            setting_id,
            overall,
            scores: set,
        });
    }
    rows.sort_by(|a, b| {
        b.overall
            .total_cmp(&a.overall)
            .then_with(|| a.setting_id.cmp(&b.setting_id))
    });
    Ok(Ranking { rows })
}
