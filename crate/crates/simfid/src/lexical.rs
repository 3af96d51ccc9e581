//! Lexical statistics over patient speech: tokenisation, MTLD lexical
//! diversity, response-length counts, and marker-lexicon rates.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LexicalError {
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("invalid lexicon: {0}")]
    InvalidLexicon(String),
}

/// Ordered lowercase tokens, as produced by [`tokenize`].
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TokenStream(Vec<String>);

impl TokenStream {
    pub fn new(tokens: Vec<String>) -> Self {
        TokenStream(tokens)
    }

    pub fn tokens(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn extend(&mut self, other: &TokenStream) {
        self.0.extend(other.0.iter().cloned());
    }
}

/// Lowercases and splits on whitespace, strips punctuation from token ends,
/// and keeps runs of three or more dots as a standalone `...` token.
/// Word-internal apostrophes and hyphens survive (`y'know`, `self-esteem`).
pub fn tokenize(text: &str) -> TokenStream {
    let mut tokens = Vec::new();
    for chunk in text.split_whitespace() {
        let lower = chunk.to_lowercase();
        split_ellipsis_runs(&lower, &mut tokens);
    }
    TokenStream(tokens)
}

/// Emits `...` for each run of >= 3 dots, stripping edge punctuation from the
/// segments in between.
fn split_ellipsis_runs(chunk: &str, out: &mut Vec<String>) {
    let mut segment_start = 0;
    let mut run_start = None;
    let mut run_len = 0;
    let flush = |seg: &str, out: &mut Vec<String>| {
        let word = seg.trim_matches(|c: char| !c.is_alphanumeric());
        if !word.is_empty() {
            out.push(word.to_string());
        }
    };
    for (idx, ch) in chunk.char_indices() {
        if ch == '.' {
            if run_start.is_none() {
                run_start = Some(idx);
                run_len = 0;
            }
            run_len += 1;
        } else {
            if let Some(start) = run_start.take() {
                if run_len >= 3 {
                    flush(&chunk[segment_start..start], out);
                    out.push("...".to_string());
                    segment_start = idx;
                }
            }
            run_len = 0;
        }
    }
    if let Some(start) = run_start {
        if run_len >= 3 {
            flush(&chunk[segment_start..start], out);
            out.push("...".to_string());
            return;
        }
    }
    flush(&chunk[segment_start..], out);
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MtldResult {
    pub score: f64,
    pub token_count: usize,
    /// Whether the stream meets the minimum-token floor for inclusion in
    /// distribution-level comparisons.
    pub included: bool,
}

/// Measure of textual lexical diversity: mean factor length computed forward
/// and backward, averaged.
///
/// A factor completes when the running type-token ratio drops to `threshold`
/// or below; the tail contributes a partial factor `(1 - ttr) / (1 -
/// threshold)`. A direction with zero factors (the ratio never reaches the
/// threshold and the tail is all distinct tokens) scores the token count
/// itself, the limit of an unbroken maximally diverse factor.
pub fn mtld(
    tokens: &TokenStream,
    threshold: f64,
    min_tokens: usize,
) -> Result<MtldResult, LexicalError> {
    if tokens.is_empty() {
        return Err(LexicalError::EmptyInput("mtld"));
    }
    debug_assert!(threshold > 0.0 && threshold < 1.0);
    let n = tokens.len() as f64;
    let forward = factor_count(tokens.tokens().iter(), threshold);
    let backward = factor_count(tokens.tokens().iter().rev(), threshold);
    let directional = |factors: f64| if factors == 0.0 { n } else { n / factors };
    Ok(MtldResult {
        score: 0.5 * (directional(forward) + directional(backward)),
        token_count: tokens.len(),
        included: tokens.len() >= min_tokens,
    })
}

pub(crate) fn factor_count<'a>(
    tokens: impl Iterator<Item = &'a String>,
    threshold: f64,
) -> f64 {
    let mut factors = 0.0;
    let mut seen: HashSet<&str> = HashSet::new();
    let mut total = 0usize;
    for token in tokens {
        total += 1;
        seen.insert(token.as_str());
        let ttr = seen.len() as f64 / total as f64;
        if ttr <= threshold {
            factors += 1.0;
            seen.clear();
            total = 0;
        }
    }
    if total > 0 {
        let ttr = seen.len() as f64 / total as f64;
        factors += (1.0 - ttr) / (1.0 - threshold);
    }
    factors
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LengthStats {
    pub words_per_message: f64,
    pub words_per_sentence: f64,
    pub message_count: usize,
    pub token_count: usize,
    pub sentence_count: usize,
}

/// Pooled length statistics over a set of messages: total words divided by
/// total messages and by total sentences.
pub fn length_stats<'a>(
    messages: impl IntoIterator<Item = &'a str>,
) -> Result<LengthStats, LexicalError> {
    let mut message_count = 0usize;
    let mut token_count = 0usize;
    let mut sentence_count = 0usize;
    for text in messages {
        message_count += 1;
        token_count += tokenize(text).len();
        sentence_count += count_sentences(text);
    }
    if message_count == 0 || token_count == 0 {
        return Err(LexicalError::EmptyInput("length_stats"));
    }
    Ok(LengthStats {
        words_per_message: token_count as f64 / message_count as f64,
        words_per_sentence: token_count as f64 / sentence_count as f64,
        message_count,
        token_count,
        sentence_count,
    })
}

/// Sentence count: number of terminator runs (`.`, `!`, `?`), plus one for a
/// trailing fragment that still contains a word character. Never below one.
pub fn count_sentences(text: &str) -> usize {
    let mut runs = 0usize;
    let mut in_run = false;
    let mut word_after_last_run = false;
    for ch in text.chars() {
        if ch == '.' || ch == '!' || ch == '?' {
            if !in_run {
                runs += 1;
                in_run = true;
            }
            word_after_last_run = false;
        } else {
            in_run = false;
            if ch.is_alphanumeric() {
                word_after_last_run = true;
            }
        }
    }
    let mut sentences = runs;
    if word_after_last_run || runs == 0 {
        sentences += 1;
    }
    sentences.max(1)
}

const DEFAULT_ABSOLUTIST: &[&str] = &[
    "absolutely",
    "all",
    "always",
    "complete",
    "completely",
    "constant",
    "constantly",
    "definitely",
    "entire",
    "ever",
    "every",
    "everyone",
    "everything",
    "full",
    "must",
    "never",
    "nothing",
    "totally",
    "whole",
];

const DEFAULT_DEPRESSIVE: &[&str] = &[
    "depression",
    "collapse",
    "stress",
    "suicide",
    "apastia",
    "anxious",
    "sad",
    "tired",
    "death",
    "lonely",
    "insomnia",
    "bad",
    "desperate",
    "give up",
    "low",
    "leave",
    "fear",
    "danger",
    "close",
    "sensitive",
    "lost",
    "shadow",
    "destroy",
    "suspect",
    "crash",
    "dark",
    "helpless",
    "guilt",
    "negative",
    "frustration",
    "nervous",
    "melancholy",
    "rubbish",
    "jump",
    "forget",
    "cut wrist",
    "edge",
    "haze",
    "antidepressant",
];

const DEFAULT_NONFLUENCY: &[&str] = &[
    "...",
    "uh",
    "um",
    "er",
    "ah",
    "eh",
    "oh",
    "hmm",
    "mm",
    "hm",
    "huh",
    "mmm",
    "mhm",
    "you know",
    "y'know",
    "i mean",
    "let's see",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MarkerCategory {
    Absolutist,
    Depressive,
    Nonfluency,
}

impl MarkerCategory {
    pub const ALL: [MarkerCategory; 3] = [
        MarkerCategory::Absolutist,
        MarkerCategory::Depressive,
        MarkerCategory::Nonfluency,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MarkerCategory::Absolutist => "absolutist",
            MarkerCategory::Depressive => "depressive",
            MarkerCategory::Nonfluency => "nonfluency",
        }
    }
}

#[derive(Debug, Deserialize)]
struct LexiconFile {
    absolutist: Vec<String>,
    depressive: Vec<String>,
    nonfluency: Vec<String>,
}

/// Marker entries per category, held as token sequences so multi-word entries
/// match across the same tokenisation the corpus text goes through.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkerLexicon {
    // Each category sorted longest sequence first so matching is greedy.
    entries: [Vec<Vec<String>>; 3],
    version: String,
}

impl Default for MarkerLexicon {
    fn default() -> Self {
        MarkerLexicon::new(DEFAULT_ABSOLUTIST, DEFAULT_DEPRESSIVE, DEFAULT_NONFLUENCY)
            .expect("built-in lexicon is valid")
    }
}

impl MarkerLexicon {
    pub fn new(
        absolutist: &[&str],
        depressive: &[&str],
        nonfluency: &[&str],
    ) -> Result<Self, LexicalError> {
        let categories = [absolutist, depressive, nonfluency];
        let mut entries: [Vec<Vec<String>>; 3] = [Vec::new(), Vec::new(), Vec::new()];
        for (cat, raw) in categories.iter().enumerate() {
            if raw.is_empty() {
                return Err(LexicalError::InvalidLexicon(format!(
                    "category `{}` is empty",
                    MarkerCategory::ALL[cat].name()
                )));
            }
            let mut set: BTreeSet<Vec<String>> = BTreeSet::new();
            for entry in *raw {
                let toks = tokenize(entry);
                if toks.is_empty() {
                    return Err(LexicalError::InvalidLexicon(format!(
                        "entry `{entry}` tokenises to nothing"
                    )));
                }
                set.insert(toks.tokens().to_vec());
            }
            let mut sorted: Vec<Vec<String>> = set.into_iter().collect();
            sorted.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));
            entries[cat] = sorted;
        }
        let version = lexicon_digest(&entries);
        Ok(MarkerLexicon { entries, version })
    }

    /// Loads `{"absolutist": [...], "depressive": [...], "nonfluency": [...]}`.
    pub fn from_json_file(path: &Path) -> Result<Self, LexicalError> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| LexicalError::InvalidLexicon(format!("{}: {e}", path.display())))?;
        let file: LexiconFile = serde_json::from_str(&raw)
            .map_err(|e| LexicalError::InvalidLexicon(format!("{}: {e}", path.display())))?;
        fn as_refs(v: &[String]) -> Vec<&str> {
            v.iter().map(|s| s.as_str()).collect()
        }
        MarkerLexicon::new(
            &as_refs(&file.absolutist),
            &as_refs(&file.depressive),
            &as_refs(&file.nonfluency),
        )
    }

    /// Content digest; identical lexicons hash identically regardless of
    /// entry order in the source.
    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn entries(&self, category: MarkerCategory) -> &[Vec<String>] {
        &self.entries[category as usize]
    }
}

fn lexicon_digest(entries: &[Vec<Vec<String>>; 3]) -> String {
    let mut hasher = Sha256::new();
    for cat in entries {
        for entry in cat {
            hasher.update(entry.join(" ").as_bytes());
            hasher.update([0u8]);
        }
        hasher.update([1u8]);
    }
    hex::encode(&hasher.finalize()[..8])
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CategoryStats {
    pub occurrences: u64,
    pub messages_with_marker: u64,
    /// Occurrences per 1000 tokens.
    pub rate_ptk: f64,
    /// Percentage of messages containing at least one marker.
    pub prevalence_msg: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MarkerStats {
    pub absolutist: CategoryStats,
    pub depressive: CategoryStats,
    pub nonfluency: CategoryStats,
    /// Occurrences sum across categories; prevalence counts messages with a
    /// marker from any category.
    pub overall: CategoryStats,
    pub token_count: u64,
    pub message_count: u64,
}

impl MarkerStats {
    pub fn category(&self, category: MarkerCategory) -> &CategoryStats {
        match category {
            MarkerCategory::Absolutist => &self.absolutist,
            MarkerCategory::Depressive => &self.depressive,
            MarkerCategory::Nonfluency => &self.nonfluency,
        }
    }
}

/// Counts marker occurrences per category with greedy longest-sequence,
/// non-overlapping matching inside each category. Categories are scanned
/// independently, so one token span can count toward several categories.
pub fn marker_stats<'a>(
    messages: impl IntoIterator<Item = &'a str>,
    lexicon: &MarkerLexicon,
) -> MarkerStats {
    // first-token index per category keeps the scan linear-ish
    let indexes: Vec<HashMap<&str, Vec<&Vec<String>>>> = MarkerCategory::ALL
        .iter()
        .map(|&cat| {
            let mut idx: HashMap<&str, Vec<&Vec<String>>> = HashMap::new();
            for entry in lexicon.entries(cat) {
                idx.entry(entry[0].as_str()).or_default().push(entry);
            }
            idx
        })
        .collect();

    let mut occurrences = [0u64; 3];
    let mut messages_with = [0u64; 3];
    let mut overall_messages_with = 0u64;
    let mut token_count = 0u64;
    let mut message_count = 0u64;

    for text in messages {
        message_count += 1;
        let tokens = tokenize(text);
        token_count += tokens.len() as u64;
        let toks = tokens.tokens();
        let mut any_hit = false;
        for (cat, index) in indexes.iter().enumerate() {
            let mut occ = 0u64;
            let mut i = 0usize;
            while i < toks.len() {
                let mut advanced = false;
                if let Some(candidates) = index.get(toks[i].as_str()) {
                    // candidates inherit the lexicon's longest-first order
                    for entry in candidates {
                        if toks[i..].len() >= entry.len()
                            && toks[i..i + entry.len()] == entry[..]
                        {
                            occ += 1;
                            i += entry.len();
                            advanced = true;
                            break;
                        }
                    }
                }
                if !advanced {
                    i += 1;
                }
            }
            occurrences[cat] += occ;
            if occ > 0 {
                messages_with[cat] += 1;
                any_hit = true;
            }
        }
        if any_hit {
            overall_messages_with += 1;
        }
    }

    let build = |occ: u64, with: u64| CategoryStats {
        occurrences: occ,
        messages_with_marker: with,
        rate_ptk: if token_count == 0 {
            0.0
        } else {
            1000.0 * occ as f64 / token_count as f64
        },
        prevalence_msg: if message_count == 0 {
            0.0
        } else {
            100.0 * with as f64 / message_count as f64
        },
    };

    MarkerStats {
        absolutist: build(occurrences[0], messages_with[0]),
        depressive: build(occurrences[1], messages_with[1]),
        nonfluency: build(occurrences[2], messages_with[2]),
        overall: build(occurrences.iter().sum(), overall_messages_with),
        token_count,
        message_count,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(text: &str) -> Vec<String> {
        tokenize(text).tokens().to_vec()
    }

    #[test]
    fn tokenize_strips_edge_punctuation_and_keeps_apostrophes() {
        assert_eq!(toks("I can't sleep."), ["i", "can't", "sleep"]);
        assert_eq!(toks("  Hello,   WORLD!! "), ["hello", "world"]);
        assert_eq!(toks("self-esteem (low)"), ["self-esteem", "low"]);
        assert_eq!(toks("y'know,"), ["y'know"]);
        assert_eq!(toks("goin'"), ["goin"]);
    }

    #[test]
    fn tokenize_keeps_long_dot_runs_as_ellipsis() {
        assert_eq!(toks("well... maybe"), ["well", "...", "maybe"]);
        assert_eq!(toks("well...maybe"), ["well", "...", "maybe"]);
        assert_eq!(toks("....."), ["..."]);
        assert_eq!(toks("hmm.. yes"), ["hmm", "yes"]);
        assert_eq!(toks("a...b...c"), ["a", "...", "b", "...", "c"]);
        assert_eq!(toks("wait..."), ["wait", "..."]);
    }

    #[test]
    fn tokenize_handles_degenerate_chunks() {
        assert!(toks("?!,;").is_empty());
        assert!(toks("").is_empty());
        assert_eq!(toks("42 4.5"), ["42", "4.5"]);
    }

    #[test]
    fn mtld_of_one_repeated_token_is_two() {
        let stream = TokenStream::new(vec!["word".to_string(); 50]);
        let r = mtld(&stream, 0.72, 100).unwrap();
        // each direction: first token starts a factor that completes at token 2
        assert!((r.score - 2.0).abs() < 1e-12, "score {}", r.score);
        assert_eq!(r.token_count, 50);
        assert!(!r.included);
    }

    #[test]
    fn mtld_all_unique_tokens_scores_token_count() {
        let stream = TokenStream::new((0..120).map(|i| format!("w{i}")).collect());
        let r = mtld(&stream, 0.72, 100).unwrap();
        assert!((r.score - 120.0).abs() < 1e-12);
        assert!(r.included);
    }

    #[test]
    fn mtld_rejects_empty_input() {
        assert_eq!(
            mtld(&TokenStream::default(), 0.72, 100),
            Err(LexicalError::EmptyInput("mtld"))
        );
    }

    #[test]
    fn mtld_inclusion_floor_is_inclusive() {
        let stream99 = TokenStream::new(vec!["w".to_string(); 99]);
        let stream100 = TokenStream::new(vec!["w".to_string(); 100]);
        assert!(!mtld(&stream99, 0.72, 100).unwrap().included);
        assert!(mtld(&stream100, 0.72, 100).unwrap().included);
    }

    #[test]
    fn mtld_directions_agree_on_palindromic_streams() {
        let half: Vec<String> = (0..40).map(|i| format!("w{}", i % 7)).collect();
        let mut stream: Vec<String> = half.clone();
        stream.extend(half.iter().rev().cloned());
        let fwd = factor_count(stream.iter(), 0.72);
        let bwd = factor_count(stream.iter().rev(), 0.72);
        assert!((fwd - bwd).abs() < 1e-12);
    }

    #[test]
    fn length_stats_counts_words_and_sentences() {
        let s = length_stats(["I am tired."]).unwrap();
        assert_eq!(s.token_count, 3);
        assert_eq!(s.sentence_count, 1);
        assert!((s.words_per_message - 3.0).abs() < 1e-12);
        assert!((s.words_per_sentence - 3.0).abs() < 1e-12);

        let s = length_stats(["One. Two two! Three?", "four"]).unwrap();
        assert_eq!(s.message_count, 2);
        assert_eq!(s.token_count, 5);
        assert_eq!(s.sentence_count, 4);
    }

    #[test]
    fn sentence_counting_edge_cases() {
        assert_eq!(count_sentences("no terminator"), 1);
        assert_eq!(count_sentences("Done."), 1);
        assert_eq!(count_sentences("Done... ok"), 2);
        assert_eq!(count_sentences("What?! Really?!"), 2);
        assert_eq!(count_sentences("...  "), 1);
        assert_eq!(count_sentences("a. b. c"), 3);
    }

    #[test]
    fn length_stats_rejects_empty_and_wordless_input() {
        assert!(length_stats([]).is_err());
        assert!(length_stats(["?!"]).is_err());
    }

    #[test]
    fn marker_counts_repeats_and_prevalence() {
        let lex = MarkerLexicon::default();
        let stats = marker_stats(["I always always fail"], &lex);
        assert_eq!(stats.absolutist.occurrences, 2);
        assert!((stats.absolutist.rate_ptk - 500.0).abs() < 1e-12);
        assert!((stats.absolutist.prevalence_msg - 100.0).abs() < 1e-12);
        assert_eq!(stats.overall.occurrences, 2);
    }

    #[test]
    fn marker_matches_phrases_and_ellipsis() {
        let lex = MarkerLexicon::default();
        let stats = marker_stats(["well... i mean, i want to give up, y'know"], &lex);
        assert_eq!(stats.nonfluency.occurrences, 3); // "...", "i mean", "y'know"
        assert_eq!(stats.depressive.occurrences, 1); // "give up"
        assert_eq!(stats.overall.occurrences, 4);
        assert_eq!(stats.overall.messages_with_marker, 1);
    }

    #[test]
    fn marker_categories_match_independently() {
        let lex = MarkerLexicon::default();
        // "never" is absolutist; "give up" is depressive; both fire on one span's worth of text
        let stats = marker_stats(["never give up"], &lex);
        assert_eq!(stats.absolutist.occurrences, 1);
        assert_eq!(stats.depressive.occurrences, 1);
        assert_eq!(
            stats.overall.occurrences,
            stats.absolutist.occurrences
                + stats.depressive.occurrences
                + stats.nonfluency.occurrences
        );
    }

    #[test]
    fn marker_matching_prefers_longest_entry() {
        let lex = MarkerLexicon::new(&["a", "a b"], &["x"], &["y"]).unwrap();
        let stats = marker_stats(["a b a"], &lex);
        // "a b" consumes the first two tokens, the final "a" matches alone
        assert_eq!(stats.absolutist.occurrences, 2);
    }

    #[test]
    fn marker_matches_do_not_overlap_within_category() {
        let lex = MarkerLexicon::new(&["a a"], &["x"], &["y"]).unwrap();
        let stats = marker_stats(["a a a"], &lex);
        assert_eq!(stats.absolutist.occurrences, 1);
    }

    #[test]
    fn lexicon_rejects_empty_categories_and_blank_entries() {
        assert!(MarkerLexicon::new(&[], &["x"], &["y"]).is_err());
        assert!(MarkerLexicon::new(&["?!"], &["x"], &["y"]).is_err());
    }

    #[test]
    fn lexicon_version_ignores_entry_order() {
        let a = MarkerLexicon::new(&["all", "never"], &["sad"], &["um"]).unwrap();
        let b = MarkerLexicon::new(&["never", "all"], &["sad"], &["um"]).unwrap();
        assert_eq!(a.version(), b.version());
        let c = MarkerLexicon::new(&["all"], &["sad"], &["um"]).unwrap();
        assert_ne!(a.version(), c.version());
    }

    #[test]
    fn default_lexicon_category_sizes() {
        let lex = MarkerLexicon::default();
        assert_eq!(lex.entries(MarkerCategory::Absolutist).len(), 19);
        assert_eq!(lex.entries(MarkerCategory::Depressive).len(), 39);
        assert_eq!(lex.entries(MarkerCategory::Nonfluency).len(), 17);
    }

    prop_compose! {
        fn arb_stream()(tokens in prop::collection::vec(0usize..50, 1..400)) -> Vec<String> {
            tokens.into_iter().map(|t| format!("t{t}")).collect()
        }
    }

    proptest! {
        #[test]
        fn mtld_is_invariant_under_token_relabeling(stream in arb_stream()) {
            let relabeled: Vec<String> = stream.iter().map(|t| format!("x-{t}-x")).collect();
            let a = mtld(&TokenStream::new(stream), 0.72, 100).unwrap();
            let b = mtld(&TokenStream::new(relabeled), 0.72, 100).unwrap();
            prop_assert!((a.score - b.score).abs() < 1e-12);
        }

        #[test]
        fn mtld_score_is_positive_and_finite(stream in arb_stream()) {
            let r = mtld(&TokenStream::new(stream), 0.72, 100).unwrap();
            prop_assert!(r.score.is_finite());
            prop_assert!(r.score > 0.0);
        }

        #[test]
        fn marker_rates_are_scale_invariant(reps in 1usize..5) {
            let lex = MarkerLexicon::default();
            let base = ["i always feel sad", "nothing helps", "we talked"];
            let mut messages: Vec<&str> = Vec::new();
            for _ in 0..reps {
                messages.extend_from_slice(&base);
            }
            let once = marker_stats(base.iter().copied(), &lex);
            let many = marker_stats(messages.iter().copied(), &lex);
            for cat in MarkerCategory::ALL {
                prop_assert!((once.category(cat).rate_ptk - many.category(cat).rate_ptk).abs() < 1e-9);
                prop_assert!((once.category(cat).prevalence_msg - many.category(cat).prevalence_msg).abs() < 1e-9);
            }
        }

        #[test]
        fn tokenize_never_emits_empty_or_uppercase(text in "\\PC{0,80}") {
            for t in tokenize(&text).tokens() {
                prop_assert!(!t.is_empty());
                let lowered = t.to_lowercase();
                prop_assert_eq!(lowered.as_str(), t.as_str());
                let has_word = t.chars().any(|c| c.is_alphanumeric());
                prop_assert!(has_word || t == "...");
            }
        }
    }
}
