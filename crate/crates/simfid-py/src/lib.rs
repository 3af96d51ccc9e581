//! Python bindings for the core fidelity metrics: tokenisation, MTLD,
//! distribution distances, agreement statistics, and corpus loading.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use simfid::agreement::{self, AnnotationMatrix};
use simfid::alignment;
use simfid::classify::{coarse_emotion as coarse_of, EmotionLabel};
use simfid::corpus;
use simfid::lexical::{self, MarkerCategory, MarkerLexicon, TokenStream};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Lowercased word tokens; ellipses survive as `...`.
#[pyfunction]
fn tokenize(text: &str) -> Vec<String> {
    lexical::tokenize(text).tokens().to_vec()
}

/// Measure of textual lexical diversity over a token list.
/// Returns `(score, token_count, included)`.
#[pyfunction]
#[pyo3(signature = (tokens, threshold = 0.72, min_tokens = 100))]
fn mtld(tokens: Vec<String>, threshold: f64, min_tokens: usize) -> PyResult<(f64, usize, bool)> {
    let stream = TokenStream::new(tokens);
    let r = lexical::mtld(&stream, threshold, min_tokens).map_err(value_err)?;
    Ok((r.score, r.token_count, r.included))
}

/// Jensen-Shannon divergence in bits between two categorical distributions.
#[pyfunction]
fn jsd(p: Vec<f64>, q: Vec<f64>) -> PyResult<f64> {
    alignment::jsd(&p, &q).map_err(value_err)
}

/// First Wasserstein distance between two empirical 1-D samples.
#[pyfunction]
fn wasserstein_1d(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    alignment::wasserstein_1d(&a, &b).map_err(value_err)
}

/// Response-length similarity from pooled words-per-message and
/// words-per-sentence counts. Returns `(combined, wpm_sim, wps_sim)`.
#[pyfunction]
fn length_similarity(
    words_per_message: f64,
    words_per_sentence: f64,
    reference_words_per_message: f64,
    reference_words_per_sentence: f64,
) -> PyResult<(f64, f64, f64)> {
    let candidate = lexical::LengthStats {
        words_per_message,
        words_per_sentence,
        message_count: 0,
        token_count: 0,
        sentence_count: 0,
    };
    let reference = lexical::LengthStats {
        words_per_message: reference_words_per_message,
        words_per_sentence: reference_words_per_sentence,
        message_count: 0,
        token_count: 0,
        sentence_count: 0,
    };
    let cmp = alignment::length_similarity(&candidate, &reference).map_err(value_err)?;
    Ok((
        cmp.similarity,
        cmp.words_per_message_similarity,
        cmp.words_per_sentence_similarity,
    ))
}

/// Depression-marker similarity from overall rates (per 1000 tokens) and
/// message prevalences (percent).
/// Returns `(similarity, distance, rate_relative_diff, prevalence_abs_diff)`.
#[pyfunction]
fn marker_similarity(
    rate_ptk: f64,
    prevalence_msg: f64,
    reference_rate_ptk: f64,
    reference_prevalence_msg: f64,
) -> PyResult<(f64, f64, f64, f64)> {
    let candidate = lexical::CategoryStats {
        occurrences: 0,
        messages_with_marker: 0,
        rate_ptk,
        prevalence_msg,
    };
    let reference = lexical::CategoryStats {
        occurrences: 0,
        messages_with_marker: 0,
        rate_ptk: reference_rate_ptk,
        prevalence_msg: reference_prevalence_msg,
    };
    let cmp =
        alignment::marker_similarity_from_overall(&candidate, &reference).map_err(value_err)?;
    Ok((
        cmp.similarity,
        cmp.distance,
        cmp.rate_relative_diff,
        cmp.prevalence_abs_diff,
    ))
}

/// Min-max normalises per-setting distances into 0-100 similarities.
#[pyfunction]
fn diversity_similarity(distances: BTreeMap<String, f64>) -> PyResult<BTreeMap<String, f64>> {
    alignment::diversity_similarity(&distances).map_err(value_err)
}

/// Cohen's kappa between two aligned label lists.
#[pyfunction]
fn cohens_kappa(a: Vec<String>, b: Vec<String>) -> PyResult<f64> {
    agreement::cohens_kappa(&a, &b).map_err(value_err)
}

/// Fleiss' kappa over `(item_id, rater_id, label)` records; every item needs
/// the same number of raters.
#[pyfunction]
fn fleiss_kappa(records: Vec<(String, String, String)>) -> PyResult<f64> {
    let matrix = AnnotationMatrix::from_records(records).map_err(value_err)?;
    agreement::fleiss_kappa(&matrix).map_err(value_err)
}

/// Share of aligned positions with identical labels, in percent.
#[pyfunction]
fn percent_agreement(a: Vec<String>, b: Vec<String>) -> PyResult<f64> {
    agreement::percent_agreement(&a, &b).map_err(value_err)
}

/// Valence group of a fine-grained emotion label.
#[pyfunction]
fn coarse_emotion(label: &str) -> PyResult<String> {
    let parsed = EmotionLabel::parse(label)
        .ok_or_else(|| value_err(format!("unknown emotion label `{label}`")))?;
    Ok(coarse_of(parsed).name().to_string())
}

/// Marker statistics over messages with the built-in lexicon. Returns
/// `{category: (occurrences, messages_with_marker, rate_ptk, prevalence_msg)}`
/// with an extra `overall` entry.
#[pyfunction]
fn marker_stats(messages: Vec<String>) -> BTreeMap<String, (u64, u64, f64, f64)> {
    let lexicon = MarkerLexicon::default();
    let stats = lexical::marker_stats(messages.iter().map(|s| s.as_str()), &lexicon);
    let mut out = BTreeMap::new();
    for cat in MarkerCategory::ALL {
        let s = stats.category(cat);
        out.insert(
            cat.name().to_string(),
            (s.occurrences, s.messages_with_marker, s.rate_ptk, s.prevalence_msg),
        );
    }
    out.insert(
        "overall".to_string(),
        (
            stats.overall.occurrences,
            stats.overall.messages_with_marker,
            stats.overall.rate_ptk,
            stats.overall.prevalence_msg,
        ),
    );
    out
}

/// A loaded, validated conversation corpus.
#[pyclass(name = "Corpus")]
struct PyCorpus {
    inner: corpus::Corpus,
}

#[pymethods]
impl PyCorpus {
    /// Loads a corpus JSONL plus its profiles JSONL, validating ids and
    /// merging consecutive same-speaker messages.
    #[staticmethod]
    fn load(corpus_path: PathBuf, setting_id: &str, profiles_path: PathBuf) -> PyResult<Self> {
        let profiles = corpus::load_profiles(&profiles_path).map_err(value_err)?;
        let inner = corpus::load_corpus(&corpus_path, setting_id, &profiles).map_err(value_err)?;
        Ok(PyCorpus { inner })
    }

    #[getter]
    fn setting_id(&self) -> &str {
        &self.inner.setting_id
    }

    fn conversation_ids(&self) -> Vec<String> {
        self.inner
            .conversations
            .iter()
            .map(|c| c.conversation_id.clone())
            .collect()
    }

    /// Patient turn counts by conversation id.
    fn turn_counts(&self) -> BTreeMap<String, usize> {
        self.inner
            .conversations
            .iter()
            .map(|c| (c.conversation_id.clone(), c.turn_count))
            .collect()
    }

    fn patient_texts(&self) -> Vec<String> {
        self.inner
            .patient_texts()
            .into_iter()
            .map(str::to_string)
            .collect()
    }

    fn __len__(&self) -> usize {
        self.inner.conversations.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Corpus(setting_id={:?}, conversations={})",
            self.inner.setting_id,
            self.inner.conversations.len()
        )
    }
}

#[pymodule]
fn simfid_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(mtld, m)?)?;
    m.add_function(wrap_pyfunction!(jsd, m)?)?;
    m.add_function(wrap_pyfunction!(wasserstein_1d, m)?)?;
    m.add_function(wrap_pyfunction!(length_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(marker_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(diversity_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(cohens_kappa, m)?)?;
    m.add_function(wrap_pyfunction!(fleiss_kappa, m)?)?;
    m.add_function(wrap_pyfunction!(percent_agreement, m)?)?;
    m.add_function(wrap_pyfunction!(coarse_emotion, m)?)?;
    m.add_function(wrap_pyfunction!(marker_stats, m)?)?;
    m.add_class::<PyCorpus>()?;
    Ok(())
}
