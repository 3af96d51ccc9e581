//! Inter-annotator agreement statistics used to validate the automated turn
//! classifiers against human raters: percent agreement and Cohen's kappa for
//! the model-versus-majority comparison, Fleiss' kappa among the humans.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classify::{coarse_emotion, CoarseEmotion, EmotionLabel, NepLabel};

#[derive(Debug, Error, PartialEq)]
pub enum AgreementError {
    #[error("rating vectors have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("chance agreement is 1; kappa is undefined for these marginals")]
    DegenerateMarginals,
    #[error("items have unequal rater counts: {0}")]
    UnevenRaterCounts(String),
    #[error("duplicate rating for item `{0}` by rater `{1}`")]
    DuplicateRating(String, String),
    #[error("item `{0}`: label `{1}` is not valid for the {2} task")]
    InvalidLabel(String, String, String),
    #[error("item `{0}` has no rating from model rater `{1}`")]
    MissingModelLabel(String, String),
    #[error("no human ratings found (model rater id is `{0}`)")]
    NoHumanRaters(String),
}

/// Ratings indexed by item and rater. Items and raters are kept sorted so
/// every derived statistic is order-independent of the input file.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationMatrix {
    items: Vec<String>,
    raters: Vec<String>,
    labels: BTreeMap<(String, String), String>,
    label_space: Vec<String>,
}

impl AnnotationMatrix {
    pub fn from_records(
        records: impl IntoIterator<Item = (String, String, String)>,
    ) -> Result<Self, AgreementError> {
        let mut labels: BTreeMap<(String, String), String> = BTreeMap::new();
        let mut items: Vec<String> = Vec::new();
        let mut raters: Vec<String> = Vec::new();
        let mut space: Vec<String> = Vec::new();
        for (item, rater, label) in records {
            let key = (item.clone(), rater.clone());
            if labels.contains_key(&key) {
                return Err(AgreementError::DuplicateRating(item, rater));
            }
            if !items.contains(&item) {
                items.push(item);
            }
            if !raters.contains(&rater) {
                raters.push(rater);
            }
            if !space.contains(&label) {
                space.push(label.clone());
            }
            labels.insert(key, label);
        }
        if labels.is_empty() {
            return Err(AgreementError::EmptyInput("annotation matrix"));
        }
        items.sort();
        raters.sort();
        space.sort();
        Ok(AnnotationMatrix {
            items,
            raters,
            labels,
            label_space: space,
        })
    }

    pub fn items(&self) -> &[String] {
        &self.items
    }

    pub fn raters(&self) -> &[String] {
        &self.raters
    }

    pub fn label_space(&self) -> &[String] {
        &self.label_space
    }

    pub fn label(&self, item: &str, rater: &str) -> Option<&str> {
        self.labels
            .get(&(item.to_string(), rater.to_string()))
            .map(|s| s.as_str())
    }

    /// All ratings for one item, in rater order.
    pub fn ratings_for(&self, item: &str) -> Vec<&str> {
        self.raters
            .iter()
            .filter_map(|r| self.label(item, r))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum VoteOutcome {
    Winner(String),
    /// Labels sharing the top count, sorted.
    Tie(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MajorityResult {
    pub item_id: String,
    pub outcome: VoteOutcome,
    pub vote_counts: BTreeMap<String, usize>,
}

/// Per-item plurality vote. An item whose top count is shared is flagged as a
/// tie rather than silently resolved.
pub fn majority_vote(matrix: &AnnotationMatrix) -> Vec<MajorityResult> {
    matrix
        .items()
        .iter()
        .map(|item| {
            let mut counts: BTreeMap<String, usize> = BTreeMap::new();
            for label in matrix.ratings_for(item) {
                *counts.entry(label.to_string()).or_insert(0) += 1;
            }
            let top = counts.values().copied().max().unwrap_or(0);
            let leaders: Vec<String> = counts
                .iter()
                .filter(|(_, &c)| c == top)
                .map(|(l, _)| l.clone())
                .collect();
            let outcome = if leaders.len() == 1 {
                VoteOutcome::Winner(leaders.into_iter().next().expect("one leader"))
            } else {
                VoteOutcome::Tie(leaders)
            };
            MajorityResult {
                item_id: item.clone(),
                outcome,
                vote_counts: counts,
            }
        })
        .collect()
}

const DEGENERACY_EPS: f64 = 1e-12;

/// Cohen's kappa between two aligned rating vectors.
pub fn cohens_kappa<T: Ord>(a: &[T], b: &[T]) -> Result<f64, AgreementError> {
    if a.len() != b.len() {
        return Err(AgreementError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(AgreementError::EmptyInput("cohens_kappa"));
    }
    let n = a.len() as f64;
    let observed = a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / n;
    let mut counts_a: BTreeMap<&T, f64> = BTreeMap::new();
    let mut counts_b: BTreeMap<&T, f64> = BTreeMap::new();
    for x in a {
        *counts_a.entry(x).or_insert(0.0) += 1.0;
    }
    for y in b {
        *counts_b.entry(y).or_insert(0.0) += 1.0;
    }
    let expected: f64 = counts_a
        .iter()
        .map(|(label, ca)| ca / n * counts_b.get(label).copied().unwrap_or(0.0) / n)
        .sum();
    if 1.0 - expected < DEGENERACY_EPS {
        // chance agreement of 1 forces identical constant vectors
        return if 1.0 - observed < DEGENERACY_EPS {
            Ok(1.0)
        } else {
            Err(AgreementError::DegenerateMarginals)
        };
    }
    Ok((observed - expected) / (1.0 - expected))
}

/// Fleiss' kappa over a matrix in which every item has the same number of
/// raters (at least two).
pub fn fleiss_kappa(matrix: &AnnotationMatrix) -> Result<f64, AgreementError> {
    let per_item: Vec<Vec<&str>> = matrix
        .items()
        .iter()
        .map(|item| matrix.ratings_for(item))
        .collect();
    let n = per_item.first().map(|r| r.len()).unwrap_or(0);
    if n < 2 {
        return Err(AgreementError::UnevenRaterCounts(
            "every item needs at least two ratings".to_string(),
        ));
    }
    for (item, ratings) in matrix.items().iter().zip(&per_item) {
        if ratings.len() != n {
            return Err(AgreementError::UnevenRaterCounts(format!(
                "item `{item}` has {} ratings, expected {n}",
                ratings.len()
            )));
        }
    }
    let item_count = per_item.len() as f64;
    let rater_count = n as f64;
    let mut label_totals: BTreeMap<&str, f64> = BTreeMap::new();
    let mut mean_item_agreement = 0.0;
    for ratings in &per_item {
        let mut counts: BTreeMap<&str, f64> = BTreeMap::new();
        for &label in ratings {
            *counts.entry(label).or_insert(0.0) += 1.0;
            *label_totals.entry(label).or_insert(0.0) += 1.0;
        }
        let sum_sq: f64 = counts.values().map(|c| c * c).sum();
        mean_item_agreement +=
            (sum_sq - rater_count) / (rater_count * (rater_count - 1.0));
    }
    mean_item_agreement /= item_count;
    let expected: f64 = label_totals
        .values()
        .map(|total| {
            let p = total / (item_count * rater_count);
            p * p
        })
        .sum();
    if 1.0 - expected < DEGENERACY_EPS {
        // a single observed label means unanimous agreement everywhere
        return if 1.0 - mean_item_agreement < DEGENERACY_EPS {
            Ok(1.0)
        } else {
            Err(AgreementError::DegenerateMarginals)
        };
    }
    Ok((mean_item_agreement - expected) / (1.0 - expected))
}

/// Share of aligned positions with identical labels, as a percentage.
pub fn percent_agreement<T: PartialEq>(a: &[T], b: &[T]) -> Result<f64, AgreementError> {
    if a.len() != b.len() {
        return Err(AgreementError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(AgreementError::EmptyInput("percent_agreement"));
    }
    let matches = a.iter().zip(b).filter(|(x, y)| x == y).count();
    Ok(100.0 * matches as f64 / a.len() as f64)
}

/// Mean over items of the share of agreeing rater pairs.
pub fn mean_pairwise_agreement(matrix: &AnnotationMatrix) -> Result<f64, AgreementError> {
    let mut total = 0.0;
    let mut counted = 0usize;
    for item in matrix.items() {
        let ratings = matrix.ratings_for(item);
        if ratings.len() < 2 {
            continue;
        }
        let mut agree = 0usize;
        let mut pairs = 0usize;
        for i in 0..ratings.len() {
            for j in (i + 1)..ratings.len() {
                pairs += 1;
                if ratings[i] == ratings[j] {
                    agree += 1;
                }
            }
        }
        total += agree as f64 / pairs as f64;
        counted += 1;
    }
    if counted == 0 {
        return Err(AgreementError::EmptyInput("mean_pairwise_agreement"));
    }
    Ok(100.0 * total / counted as f64)
}

/// The three annotation tasks scored in the agreement study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgreementTask {
    /// Free-form labels; which of two simulated conversations is more
    /// human-like.
    Pairwise,
    /// Narrative-stage labels (P/T/C/F or full stage names).
    Nep,
    /// Emotion labels, compared at valence granularity.
    Emotion,
}

impl AgreementTask {
    pub fn name(self) -> &'static str {
        match self {
            AgreementTask::Pairwise => "pairwise",
            AgreementTask::Nep => "nep",
            AgreementTask::Emotion => "emotion",
        }
    }

    pub fn parse(text: &str) -> Option<AgreementTask> {
        match text.trim().to_lowercase().as_str() {
            "pairwise" => Some(AgreementTask::Pairwise),
            "nep" => Some(AgreementTask::Nep),
            "emotion" => Some(AgreementTask::Emotion),
            _ => None,
        }
    }
}

/// Agreement summary for one task, mirroring one row of the validation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskAgreement {
    pub task: AgreementTask,
    /// Model versus human majority vote.
    pub percent_agreement: f64,
    pub cohens_kappa: f64,
    /// Among human raters.
    pub fleiss_kappa: f64,
    pub mean_pairwise_agreement: f64,
    pub items_total: usize,
    pub items_excluded_other: usize,
    pub items_tied: usize,
    pub items_compared: usize,
    pub human_raters: usize,
}

fn normalise_label(
    task: AgreementTask,
    item: &str,
    label: &str,
) -> Result<String, AgreementError> {
    match task {
        AgreementTask::Pairwise => Ok(label.trim().to_string()),
        AgreementTask::Nep => NepLabel::parse_flexible(label)
            .map(|l| l.letter().to_string())
            .ok_or_else(|| {
                AgreementError::InvalidLabel(item.to_string(), label.to_string(), "nep".into())
            }),
        AgreementTask::Emotion => EmotionLabel::parse(label)
            .map(|l| l.name().to_string())
            .ok_or_else(|| {
                AgreementError::InvalidLabel(item.to_string(), label.to_string(), "emotion".into())
            }),
    }
}

/// Scores one task from raw `(item, rater, label)` records.
///
/// Human ratings feed Fleiss' kappa and mean pairwise agreement. The model
/// rating of each item is compared against the human majority with percent
/// agreement and Cohen's kappa; vote-tied items sit out that comparison.
/// Emotion labels are first collapsed to valence groups, and items where any
/// rater chose an emotion without a clear valence are excluded entirely.
pub fn evaluate_task(
    task: AgreementTask,
    records: impl IntoIterator<Item = (String, String, String)>,
    model_rater_id: &str,
) -> Result<TaskAgreement, AgreementError> {
    let mut human: Vec<(String, String, String)> = Vec::new();
    let mut model: BTreeMap<String, String> = BTreeMap::new();
    for (item, rater, label) in records {
        let label = normalise_label(task, &item, &label)?;
        if rater == model_rater_id {
            if model.insert(item.clone(), label).is_some() {
                return Err(AgreementError::DuplicateRating(item, rater));
            }
        } else {
            human.push((item, rater, label));
        }
    }
    if human.is_empty() {
        return Err(AgreementError::NoHumanRaters(model_rater_id.to_string()));
    }

    let mut excluded_other = 0usize;
    let items_total;
    let (human, model) = if task == AgreementTask::Emotion {
        // valence granularity: collapse labels, drop items with any
        // no-valence rating from either side
        let coarse_of = |label: &str| -> CoarseEmotion {
            coarse_emotion(EmotionLabel::parse(label).expect("label already validated"))
        };
        let mut no_valence: Vec<String> = Vec::new();
        for (item, _, label) in &human {
            if coarse_of(label) == CoarseEmotion::Other && !no_valence.contains(item) {
                no_valence.push(item.clone());
            }
        }
        for (item, label) in &model {
            if coarse_of(label) == CoarseEmotion::Other && !no_valence.contains(item) {
                no_valence.push(item.clone());
            }
        }
        let mut all_items: Vec<&String> = human.iter().map(|(i, _, _)| i).collect();
        all_items.sort();
        all_items.dedup();
        items_total = all_items.len();
        excluded_other = all_items
            .iter()
            .filter(|i| no_valence.contains(**i))
            .count();
        let human: Vec<(String, String, String)> = human
            .iter()
            .filter(|(item, _, _)| !no_valence.contains(item))
            .map(|(i, r, l)| (i.clone(), r.clone(), coarse_of(l).name().to_string()))
            .collect();
        let model: BTreeMap<String, String> = model
            .iter()
            .filter(|(item, _)| !no_valence.contains(item))
            .map(|(i, l)| (i.clone(), coarse_of(l).name().to_string()))
            .collect();
        (human, model)
    } else {
        let mut all_items: Vec<&String> = human.iter().map(|(i, _, _)| i).collect();
        all_items.sort();
        all_items.dedup();
        items_total = all_items.len();
        (human, model)
    };
    if human.is_empty() {
        return Err(AgreementError::EmptyInput(
            "all items were excluded from the task",
        ));
    }

    let matrix = AnnotationMatrix::from_records(human)?;
    let fleiss = fleiss_kappa(&matrix)?;
    let pairwise = mean_pairwise_agreement(&matrix)?;

    let votes = majority_vote(&matrix);
    let mut majority: Vec<String> = Vec::new();
    let mut model_labels: Vec<String> = Vec::new();
    let mut tied = 0usize;
    for vote in &votes {
        match &vote.outcome {
            VoteOutcome::Winner(label) => {
                let model_label = model.get(&vote.item_id).ok_or_else(|| {
                    AgreementError::MissingModelLabel(
                        vote.item_id.clone(),
                        model_rater_id.to_string(),
                    )
                })?;
                majority.push(label.clone());
                model_labels.push(model_label.clone());
            }
            VoteOutcome::Tie(_) => tied += 1,
        }
    }
    if majority.is_empty() {
        return Err(AgreementError::EmptyInput(
            "every item's majority vote was tied",
        ));
    }
    let percent = percent_agreement(&majority, &model_labels)?;
    let cohen = cohens_kappa(&majority, &model_labels)?;

    Ok(TaskAgreement {
        task,
        percent_agreement: percent,
        cohens_kappa: cohen,
        fleiss_kappa: fleiss,
        mean_pairwise_agreement: pairwise,
        items_total,
        items_excluded_other: excluded_other,
        items_tied: tied,
        items_compared: majority.len(),
        human_raters: matrix.raters().len(),
    })
}
