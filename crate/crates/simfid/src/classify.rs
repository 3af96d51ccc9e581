//! Per-turn labelling of patient messages: narrative stage (P/T/C/F) and
//! dominant emotion, with an append-only JSONL cache so interrupted runs
//! resume without re-querying.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{Corpus, Speaker};
use crate::http::{ChatBackend, ChatMessage, ChatRole, TransportError};
use crate::lexical::tokenize;

#[derive(Debug, Error)]
pub enum ClassifyError {
    #[error("unparseable {task} response: {response:?}")]
    UnparseableResponse { task: &'static str, response: String },
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("label cache {path}: {detail}")]
    Cache { path: String, detail: String },
    #[error("conversation `{conversation_id}` turn {turn_index}: {source}")]
    AtTurn {
        conversation_id: String,
        turn_index: usize,
        source: Box<ClassifyError>,
    },
}

/// Narrative stage of a patient turn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum NepLabel {
    #[serde(rename = "P")]
    Problem,
    #[serde(rename = "T")]
    Transition,
    #[serde(rename = "C")]
    Change,
    #[serde(rename = "F")]
    Filler,
}

impl NepLabel {
    pub const ALL: [NepLabel; 4] = [
        NepLabel::Problem,
        NepLabel::Transition,
        NepLabel::Change,
        NepLabel::Filler,
    ];

    pub fn letter(self) -> &'static str {
        match self {
            NepLabel::Problem => "P",
            NepLabel::Transition => "T",
            NepLabel::Change => "C",
            NepLabel::Filler => "F",
        }
    }

    /// Accepts the letter or the stage name, any case.
    pub fn parse_flexible(text: &str) -> Option<NepLabel> {
        match text.trim().to_lowercase().as_str() {
            "p" | "problem" => Some(NepLabel::Problem),
            "t" | "transition" => Some(NepLabel::Transition),
            "c" | "change" => Some(NepLabel::Change),
            "f" | "filler" => Some(NepLabel::Filler),
            _ => None,
        }
    }
}

/// Label space in reporting order.
pub fn nep_label_space() -> Vec<&'static str> {
    NepLabel::ALL.iter().map(|l| l.letter()).collect()
}

/// Dominant emotion of a patient turn: the eight basic emotions plus neutral.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmotionLabel {
    Trust,
    Fear,
    Anger,
    Disgust,
    Joy,
    Anticipation,
    Sadness,
    Surprise,
    Neutral,
}

impl EmotionLabel {
    pub const ALL: [EmotionLabel; 9] = [
        EmotionLabel::Trust,
        EmotionLabel::Fear,
        EmotionLabel::Anger,
        EmotionLabel::Disgust,
        EmotionLabel::Joy,
        EmotionLabel::Anticipation,
        EmotionLabel::Sadness,
        EmotionLabel::Surprise,
        EmotionLabel::Neutral,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EmotionLabel::Trust => "trust",
            EmotionLabel::Fear => "fear",
            EmotionLabel::Anger => "anger",
            EmotionLabel::Disgust => "disgust",
            EmotionLabel::Joy => "joy",
            EmotionLabel::Anticipation => "anticipation",
            EmotionLabel::Sadness => "sadness",
            EmotionLabel::Surprise => "surprise",
            EmotionLabel::Neutral => "neutral",
        }
    }

    pub fn parse(text: &str) -> Option<EmotionLabel> {
        let t = text.trim().to_lowercase();
        EmotionLabel::ALL.iter().copied().find(|e| e.name() == t)
    }
}

/// Label space in reporting order.
pub fn emotion_label_space() -> Vec<&'static str> {
    EmotionLabel::ALL.iter().map(|l| l.name()).collect()
}

/// Valence group used when comparing annotators, where fine-grained emotion
/// agreement is too strict to be informative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoarseEmotion {
    Positive,
    Negative,
    Neutral,
    /// Emotions without a clear valence; items carrying one are excluded
    /// from coarse agreement.
    Other,
}

impl CoarseEmotion {
    pub fn name(self) -> &'static str {
        match self {
            CoarseEmotion::Positive => "positive",
            CoarseEmotion::Negative => "negative",
            CoarseEmotion::Neutral => "neutral",
            CoarseEmotion::Other => "other",
        }
    }
}

/// Total mapping from fine-grained emotion to valence group.
pub fn coarse_emotion(label: EmotionLabel) -> CoarseEmotion {
    match label {
        EmotionLabel::Trust | EmotionLabel::Joy | EmotionLabel::Anticipation => {
            CoarseEmotion::Positive
        }
        EmotionLabel::Fear | EmotionLabel::Sadness | EmotionLabel::Anger => CoarseEmotion::Negative,
        EmotionLabel::Neutral => CoarseEmotion::Neutral,
        EmotionLabel::Disgust | EmotionLabel::Surprise => CoarseEmotion::Other,
    }
}

/// One cached labelling decision for one patient turn.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnLabelRecord {
    pub conversation_id: String,
    pub turn_index: usize,
    pub nep: NepLabel,
    pub emotion: EmotionLabel,
    pub classifier_id: String,
    pub prompt_hash: String,
}

pub const NEP_PROMPT_TEMPLATE: &str = "\
You are a helpful AI assistant performing a linguistic analysis task for a research project on therapeutic conversations. This is for academic research, and the content may discuss mental health challenges.

Your task is to classify a SINGLE patient message from a therapy session into one of four categories:

P (Problem): The patient is expressing:
- Confusion, distress, or emotional pain
- Feeling stuck or helpless
- Describing problems without insight
- Negative emotions without perspective
- Complaints or struggles

T (Transition): The patient is showing:
- Beginning to reflect on their situation
- Gaining some perspective
- Starting to consider alternatives
- Expressing curiosity or questioning
- Moving from pure distress to thoughtful consideration

C (Change): The patient is demonstrating:
- Emotional resolution or acceptance
- Reframing their situation positively
- New insights or understanding
- Active problem-solving or planning
- Hope, empowerment, or growth mindset
- Clear perspective shift from the problem

F (Filler): The response is filler:
- Contains no meaningful therapeutic content and does not fit into P, T, or C categories
- Is small talk or neutral procedural social responses

Analyze the current patient message carefully, considering both the content and emotional tone, as well as the conversation history provided.

You must respond with ONLY a single letter: P, T, C, or F. Do not include any explanation or additional text.

Previous conversation history: {history}

Current patient message to classify:
{current_message}

Classification:";

pub const EMOTION_PROMPT_TEMPLATE: &str = "\
You are a helpful AI assistant performing a linguistic analysis task for a research project on therapeutic conversations. This is for academic research, and the content may discuss mental health challenges.

Your task is to identify the dominant emotion expressed in a SINGLE patient message from a therapy session.

Choose exactly one of the following labels:
- trust
- fear
- anger
- disgust
- joy
- anticipation
- sadness
- surprise
- neutral

Pick the label that best describes the overall emotional tone of the current message, considering the conversation history for context. Use neutral only when no emotion is clearly expressed.

You must respond with ONLY one word: the chosen label, exactly as written above. Do not include any explanation or additional text.

Previous conversation history: {history}

Current patient message to classify:
{current_message}

Emotion:";

pub fn render_prompt(template: &str, history: &str, current_message: &str) -> String {
    template
        .replace("{history}", history)
        .replace("{current_message}", current_message)
}

/// Digest binding cached labels to the exact prompt wording.
pub fn prompt_template_hash() -> String {
    let mut hasher = Sha256::new();
    hasher.update(NEP_PROMPT_TEMPLATE.as_bytes());
    hasher.update([0u8]);
    hasher.update(EMOTION_PROMPT_TEMPLATE.as_bytes());
    hex::encode(&hasher.finalize()[..8])
}

pub(crate) fn parse_nep_response(text: &str) -> Option<NepLabel> {
    let trimmed = text.trim();
    let mut chars = trimmed.chars();
    let first = chars.next()?;
    if chars.next().is_some() {
        return None;
    }
    match first.to_ascii_lowercase() {
        'p' => Some(NepLabel::Problem),
        't' => Some(NepLabel::Transition),
        'c' => Some(NepLabel::Change),
        'f' => Some(NepLabel::Filler),
        _ => None,
    }
}

pub(crate) fn parse_emotion_response(text: &str) -> Option<EmotionLabel> {
    EmotionLabel::parse(text)
}

/// Labels one patient turn given the rendered conversation history and the
/// message text. Implementations must be deterministic for a fixed input.
pub trait TurnLabeler: Send + Sync {
    fn classify_nep(&self, history: &str, current_message: &str)
        -> Result<NepLabel, ClassifyError>;
    fn classify_emotion(
        &self,
        history: &str,
        current_message: &str,
    ) -> Result<EmotionLabel, ClassifyError>;
    fn classifier_id(&self) -> String;
    fn prompt_hash(&self) -> String;
}

/// Classifier that prompts a chat backend at temperature zero and parses the
/// single-token verdict. An unparseable response is re-asked once.
pub struct PromptClassifier<B: ChatBackend> {
    backend: B,
    hash: String,
}

impl<B: ChatBackend> PromptClassifier<B> {
    pub fn new(backend: B) -> Self {
        PromptClassifier {
            backend,
            hash: prompt_template_hash(),
        }
    }

    fn ask<T>(
        &self,
        task: &'static str,
        template: &str,
        history: &str,
        current_message: &str,
        parse: impl Fn(&str) -> Option<T>,
    ) -> Result<T, ClassifyError> {
        let prompt = render_prompt(template, history, current_message);
        let messages = [ChatMessage::new(ChatRole::User, prompt)];
        let mut last = String::new();
        for _attempt in 0..2 {
            let response = self.backend.complete(&messages, 0.0, Some(8))?;
            if let Some(label) = parse(&response) {
                return Ok(label);
            }
            last = response;
        }
        Err(ClassifyError::UnparseableResponse {
            task,
            response: last,
        })
    }
}

impl<B: ChatBackend> TurnLabeler for PromptClassifier<B> {
    fn classify_nep(
        &self,
        history: &str,
        current_message: &str,
    ) -> Result<NepLabel, ClassifyError> {
        self.ask(
            "narrative stage",
            NEP_PROMPT_TEMPLATE,
            history,
            current_message,
            parse_nep_response,
        )
    }

    fn classify_emotion(
        &self,
        history: &str,
        current_message: &str,
    ) -> Result<EmotionLabel, ClassifyError> {
        self.ask(
            "emotion",
            EMOTION_PROMPT_TEMPLATE,
            history,
            current_message,
            parse_emotion_response,
        )
    }

    fn classifier_id(&self) -> String {
        self.backend.id()
    }

    fn prompt_hash(&self) -> String {
        self.hash.clone()
    }
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x100_0000_01b3);
    }
    hash
}

const STUB_RULES_VERSION: &str = "stub-rules-v1";

const STUB_FILLER: &[&str] = &[
    "hi", "hello", "hey", "thanks", "thank", "you", "okay", "ok", "sure", "yes", "yeah", "no",
    "bye", "goodbye", "good", "morning", "afternoon", "fine",
];
const STUB_CHANGE: &[&str] = &[
    "better",
    "hope",
    "hopeful",
    "plan",
    "planning",
    "learned",
    "realize",
    "realized",
    "improve",
    "improved",
    "grateful",
    "progress",
    "forward",
    "manage",
    "managed",
    "stronger",
];
const STUB_TRANSITION: &[&str] = &[
    "maybe",
    "wonder",
    "wondering",
    "perhaps",
    "think",
    "thinking",
    "curious",
    "question",
    "why",
    "consider",
    "considering",
    "reflect",
    "guess",
    "suppose",
];
const STUB_PROBLEM: &[&str] = &[
    "sad",
    "tired",
    "hopeless",
    "stuck",
    "anxious",
    "lonely",
    "empty",
    "worthless",
    "cry",
    "crying",
    "sleep",
    "insomnia",
    "pain",
    "hurt",
    "bad",
    "fear",
    "afraid",
    "scared",
    "depressed",
    "overwhelmed",
    "nothing",
    "never",
    "struggle",
    "struggling",
    "hard",
    "worse",
    "guilt",
    "guilty",
    "numb",
    "exhausted",
    "angry",
];

const STUB_EMOTIONS: &[(EmotionLabel, &[&str])] = &[
    (
        EmotionLabel::Sadness,
        &["sad", "cry", "crying", "lonely", "empty", "hopeless", "tired", "lost", "down"],
    ),
    (
        EmotionLabel::Fear,
        &["afraid", "scared", "fear", "anxious", "worry", "worried", "panic", "nervous"],
    ),
    (
        EmotionLabel::Anger,
        &["angry", "mad", "furious", "hate", "unfair", "frustrated"],
    ),
    (
        EmotionLabel::Joy,
        &["happy", "glad", "joy", "smile", "smiled", "laughed", "better"],
    ),
    (
        EmotionLabel::Trust,
        &["trust", "safe", "believe", "support", "supported"],
    ),
    (
        EmotionLabel::Anticipation,
        &["hope", "hoping", "forward", "plan", "planning", "tomorrow", "will"],
    ),
    (EmotionLabel::Disgust, &["disgust", "disgusting", "sick", "gross"]),
    (
        EmotionLabel::Surprise,
        &["surprised", "surprise", "sudden", "suddenly", "unexpected"],
    ),
];

/// Offline classifier driven by keyword tables, with a content-hash fallback
/// so any message gets a stable label without network access.
#[derive(Debug, Default, Clone, Copy)]
pub struct StubClassifier;

impl StubClassifier {
    fn nep_of(message: &str) -> NepLabel {
        let tokens = tokenize(message);
        if !tokens.is_empty()
            && tokens
                .tokens()
                .iter()
                .all(|t| STUB_FILLER.contains(&t.as_str()))
        {
            return NepLabel::Filler;
        }
        let any_in = |set: &[&str]| tokens.tokens().iter().any(|t| set.contains(&t.as_str()));
        if any_in(STUB_CHANGE) {
            return NepLabel::Change;
        }
        if any_in(STUB_TRANSITION) {
            return NepLabel::Transition;
        }
        if any_in(STUB_PROBLEM) {
            return NepLabel::Problem;
        }
        match fnv1a(message.as_bytes()) % 3 {
            0 => NepLabel::Problem,
            1 => NepLabel::Transition,
            _ => NepLabel::Change,
        }
    }

    fn emotion_of(message: &str) -> EmotionLabel {
        let tokens = tokenize(message);
        for (label, keywords) in STUB_EMOTIONS {
            if tokens
                .tokens()
                .iter()
                .any(|t| keywords.contains(&t.as_str()))
            {
                return *label;
            }
        }
        EmotionLabel::Neutral
    }
}

impl TurnLabeler for StubClassifier {
    fn classify_nep(
        &self,
        _history: &str,
        current_message: &str,
    ) -> Result<NepLabel, ClassifyError> {
        Ok(StubClassifier::nep_of(current_message))
    }

    fn classify_emotion(
        &self,
        _history: &str,
        current_message: &str,
    ) -> Result<EmotionLabel, ClassifyError> {
        Ok(StubClassifier::emotion_of(current_message))
    }

    fn classifier_id(&self) -> String {
        "stub-v1".to_string()
    }

    fn prompt_hash(&self) -> String {
        hex::encode(&Sha256::digest(STUB_RULES_VERSION.as_bytes())[..8])
    }
}

type LabelKey = (String, usize, String);

/// Append-only JSONL cache of turn labels, keyed by conversation, turn, and
/// classifier. Every append is flushed so an interrupted run loses at most
/// the line being written; a truncated final line is dropped on open.
#[derive(Debug)]
pub struct LabelStore {
    path: PathBuf,
    records: BTreeMap<LabelKey, TurnLabelRecord>,
    writer: Option<File>,
    recovered_partial_line: bool,
}

impl LabelStore {
    pub fn open(path: &Path) -> Result<Self, ClassifyError> {
        let path_str = path.display().to_string();
        let cache_err = |detail: String| ClassifyError::Cache {
            path: path_str.clone(),
            detail,
        };
        let mut records = BTreeMap::new();
        let mut recovered = false;
        if path.exists() {
            let raw = std::fs::read_to_string(path).map_err(|e| cache_err(e.to_string()))?;
            let mut good_bytes = 0usize;
            let chunks: Vec<&str> = raw.split('\n').collect();
            for (i, chunk) in chunks.iter().enumerate() {
                let is_last = i + 1 == chunks.len();
                if chunk.is_empty() {
                    continue;
                }
                match serde_json::from_str::<TurnLabelRecord>(chunk) {
                    Ok(record) => {
                        if is_last && !raw.ends_with('\n') {
                            // complete JSON but no newline: treat as good, repair below
                            recovered = true;
                        }
                        let key = (
                            record.conversation_id.clone(),
                            record.turn_index,
                            record.classifier_id.clone(),
                        );
                        if let Some(existing) = records.get(&key) {
                            if *existing != record {
                                return Err(cache_err(format!(
                                    "conflicting records for conversation `{}` turn {}",
                                    record.conversation_id, record.turn_index
                                )));
                            }
                        } else {
                            records.insert(key, record);
                        }
                        good_bytes += chunk.len() + 1;
                    }
                    Err(e) => {
                        if is_last && !raw.ends_with('\n') {
                            // interrupted write; drop the partial tail
                            recovered = true;
                        } else {
                            return Err(cache_err(format!("line {}: {e}", i + 1)));
                        }
                    }
                }
            }
            if recovered {
                let mut repaired = String::with_capacity(good_bytes);
                for record in records.values() {
                    repaired.push_str(
                        &serde_json::to_string(record).expect("label record serialises"),
                    );
                    repaired.push('\n');
                }
                std::fs::write(path, repaired).map_err(|e| cache_err(e.to_string()))?;
            }
        }
        Ok(LabelStore {
            path: path.to_path_buf(),
            records,
            writer: None,
            recovered_partial_line: recovered,
        })
    }

    /// True when opening dropped or repaired an interrupted final line.
    pub fn recovered_partial_line(&self) -> bool {
        self.recovered_partial_line
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn get(
        &self,
        conversation_id: &str,
        turn_index: usize,
        classifier_id: &str,
    ) -> Option<&TurnLabelRecord> {
        // allocation-free lookup would need a borrowed key type; scale is small
        self.records.get(&(
            conversation_id.to_string(),
            turn_index,
            classifier_id.to_string(),
        ))
    }

    pub fn records(&self) -> impl Iterator<Item = &TurnLabelRecord> {
        self.records.values()
    }

    /// Appends and flushes one record. Re-appending an identical record is a
    /// no-op; a conflicting one is an error.
    pub fn append(&mut self, record: TurnLabelRecord) -> Result<(), ClassifyError> {
        let path_str = self.path.display().to_string();
        let key = (
            record.conversation_id.clone(),
            record.turn_index,
            record.classifier_id.clone(),
        );
        if let Some(existing) = self.records.get(&key) {
            if *existing == record {
                return Ok(());
            }
            return Err(ClassifyError::Cache {
                path: path_str,
                detail: format!(
                    "conflicting record for conversation `{}` turn {}",
                    record.conversation_id, record.turn_index
                ),
            });
        }
        let cache_err = |detail: String| ClassifyError::Cache {
            path: path_str.clone(),
            detail,
        };
        if self.writer.is_none() {
            if let Some(parent) = self.path.parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent).map_err(|e| cache_err(e.to_string()))?;
                }
            }
            let file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&self.path)
                .map_err(|e| cache_err(e.to_string()))?;
            self.writer = Some(file);
        }
        let writer = self.writer.as_mut().expect("writer just initialised");
        let mut line = serde_json::to_string(&record).expect("label record serialises");
        line.push('\n');
        writer
            .write_all(line.as_bytes())
            .and_then(|_| writer.flush())
            .map_err(|e| ClassifyError::Cache {
                path: self.path.display().to_string(),
                detail: e.to_string(),
            })?;
        self.records.insert(key, record);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LabelProgress {
    /// Turns sent to the classifier during this call.
    pub queried: usize,
    /// Turns already present in the cache.
    pub reused: usize,
}

struct TurnJob {
    conversation_id: String,
    turn_index: usize,
    history: String,
    current_message: String,
}

fn pending_jobs(
    corpus: &Corpus,
    labeler: &dyn TurnLabeler,
    store: &LabelStore,
) -> Result<(Vec<TurnJob>, usize), ClassifyError> {
    let classifier_id = labeler.classifier_id();
    let prompt_hash = labeler.prompt_hash();
    let mut jobs = Vec::new();
    let mut reused = 0usize;
    for conv in &corpus.conversations {
        let mut turn_index = 0usize;
        let mut history = String::new();
        for message in &conv.messages {
            if message.speaker == Speaker::Patient {
                turn_index += 1;
                match store.get(&conv.conversation_id, turn_index, &classifier_id) {
                    Some(record) => {
                        if record.prompt_hash != prompt_hash {
                            return Err(ClassifyError::Cache {
                                path: store.path().display().to_string(),
                                detail: format!(
                                    "record for conversation `{}` turn {} was produced with \
                                     prompt hash {} but the current templates hash to {}; \
                                     clear the cache to relabel",
                                    conv.conversation_id, turn_index, record.prompt_hash,
                                    prompt_hash
                                ),
                            });
                        }
                        reused += 1;
                    }
                    None => jobs.push(TurnJob {
                        conversation_id: conv.conversation_id.clone(),
                        turn_index,
                        history: history.clone(),
                        current_message: message.text.clone(),
                    }),
                }
            }
            if !history.is_empty() {
                history.push('\n');
            }
            history.push_str(&format!("{}: {}", message.speaker, message.text));
        }
    }
    Ok((jobs, reused))
}

fn run_job(labeler: &dyn TurnLabeler, job: &TurnJob) -> Result<TurnLabelRecord, ClassifyError> {
    let at_turn = |source: ClassifyError| ClassifyError::AtTurn {
        conversation_id: job.conversation_id.clone(),
        turn_index: job.turn_index,
        source: Box::new(source),
    };
    let nep = labeler
        .classify_nep(&job.history, &job.current_message)
        .map_err(&at_turn)?;
    let emotion = labeler
        .classify_emotion(&job.history, &job.current_message)
        .map_err(&at_turn)?;
    Ok(TurnLabelRecord {
        conversation_id: job.conversation_id.clone(),
        turn_index: job.turn_index,
        nep,
        emotion,
        classifier_id: labeler.classifier_id(),
        prompt_hash: labeler.prompt_hash(),
    })
}

/// Labels every patient turn of `corpus` that is not already cached.
///
/// Completed turns are flushed to the store in corpus order regardless of
/// `in_flight`, so the cache file is reproducible and an interrupted run
/// resumes where it stopped. The first classifier error aborts the run after
/// persisting everything finished before it.
pub fn label_corpus(
    corpus: &Corpus,
    labeler: &dyn TurnLabeler,
    store: &mut LabelStore,
    in_flight: usize,
) -> Result<LabelProgress, ClassifyError> {
    let (jobs, reused) = pending_jobs(corpus, labeler, store)?;
    let mut progress = LabelProgress { queried: 0, reused };
    if jobs.is_empty() {
        return Ok(progress);
    }
    if in_flight <= 1 {
        for job in &jobs {
            let record = run_job(labeler, job)?;
            store.append(record)?;
            progress.queried += 1;
        }
        return Ok(progress);
    }

    let cursor = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let (sender, receiver) = mpsc::channel::<(usize, Result<TurnLabelRecord, ClassifyError>)>();
    let workers = in_flight.min(jobs.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            let sender = sender.clone();
            let jobs = &jobs;
            let cursor = &cursor;
            let stop = &stop;
            scope.spawn(move || loop {
                if stop.load(Ordering::Relaxed) {
                    break;
                }
                let index = cursor.fetch_add(1, Ordering::Relaxed);
                if index >= jobs.len() {
                    break;
                }
                let result = run_job(labeler, &jobs[index]);
                if sender.send((index, result)).is_err() {
                    break;
                }
            });
        }
        drop(sender);

        // write in job order so the cache file is deterministic
        let mut ready: BTreeMap<usize, TurnLabelRecord> = BTreeMap::new();
        let mut next_to_write = 0usize;
        let mut first_error: Option<ClassifyError> = None;
        for (index, result) in receiver.iter() {
            match result {
                Ok(record) => {
                    ready.insert(index, record);
                }
                Err(e) => {
                    stop.store(true, Ordering::Relaxed);
                    if first_error.is_none() {
                        first_error = Some(e);
                    }
                }
            }
            while let Some(record) = ready.remove(&next_to_write) {
                if let Err(e) = store.append(record) {
                    stop.store(true, Ordering::Relaxed);
                    if first_error.is_none() {
                        first_error = Some(e);
                    }
                    break;
                }
                progress.queried += 1;
                next_to_write += 1;
            }
        }
        match first_error {
            Some(e) => Err(e),
            None => Ok(()),
        }
    })?;
    Ok(progress)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{load_corpus, load_profiles};
    use std::sync::Mutex;

    #[test]
    fn nep_response_parsing_is_whitespace_and_case_tolerant() {
        assert_eq!(parse_nep_response("  T \n"), Some(NepLabel::Transition));
        assert_eq!(parse_nep_response("p"), Some(NepLabel::Problem));
        assert_eq!(parse_nep_response("C"), Some(NepLabel::Change));
        assert_eq!(parse_nep_response("Transition"), None);
        assert_eq!(parse_nep_response(""), None);
        assert_eq!(parse_nep_response("x"), None);
    }

    #[test]
    fn emotion_response_parsing_accepts_exact_labels_only() {
        assert_eq!(parse_emotion_response(" Sadness\n"), Some(EmotionLabel::Sadness));
        assert_eq!(parse_emotion_response("JOY"), Some(EmotionLabel::Joy));
        assert_eq!(parse_emotion_response("happy"), None);
        assert_eq!(parse_emotion_response("very sad"), None);
    }

    #[test]
    fn nep_flexible_parse_accepts_words() {
        assert_eq!(NepLabel::parse_flexible("Problem"), Some(NepLabel::Problem));
        assert_eq!(NepLabel::parse_flexible(" f "), Some(NepLabel::Filler));
        assert_eq!(NepLabel::parse_flexible("unknown"), None);
    }

    #[test]
    fn coarse_emotion_covers_all_labels() {
        use CoarseEmotion::*;
        let expected = [
            (EmotionLabel::Trust, Positive),
            (EmotionLabel::Joy, Positive),
            (EmotionLabel::Anticipation, Positive),
            (EmotionLabel::Fear, Negative),
            (EmotionLabel::Sadness, Negative),
            (EmotionLabel::Anger, Negative),
            (EmotionLabel::Neutral, Neutral),
            (EmotionLabel::Disgust, Other),
            (EmotionLabel::Surprise, Other),
        ];
        for (label, coarse) in expected {
            assert_eq!(coarse_emotion(label), coarse);
        }
    }

    #[test]
    fn render_prompt_fills_both_slots() {
        let p = render_prompt(NEP_PROMPT_TEMPLATE, "Therapist: hi", "I feel sad");
        assert!(p.contains("Previous conversation history: Therapist: hi"));
        assert!(p.contains("Current patient message to classify:\nI feel sad"));
        assert!(p.ends_with("Classification:"));
        assert!(!p.contains("{history}"));
        assert!(!p.contains("{current_message}"));
    }

    #[test]
    fn stub_is_deterministic_and_keyword_driven() {
        let stub = StubClassifier;
        let a = stub.classify_nep("", "I feel stuck and hopeless").unwrap();
        let b = stub.classify_nep("", "I feel stuck and hopeless").unwrap();
        assert_eq!(a, NepLabel::Problem);
        assert_eq!(a, b);
        assert_eq!(stub.classify_nep("", "hi, thanks!").unwrap(), NepLabel::Filler);
        assert_eq!(
            stub.classify_nep("", "maybe there is another way to see it").unwrap(),
            NepLabel::Transition
        );
        assert_eq!(
            stub.classify_nep("", "i made real progress this week").unwrap(),
            NepLabel::Change
        );
        assert_eq!(
            stub.classify_emotion("", "i cry every night").unwrap(),
            EmotionLabel::Sadness
        );
        assert_eq!(
            stub.classify_emotion("", "the meeting is at nine").unwrap(),
            EmotionLabel::Neutral
        );
    }

    /// Backend that replays scripted responses and counts requests.
    struct ScriptedBackend {
        responses: Mutex<Vec<String>>,
        calls: Mutex<usize>,
    }

    impl ScriptedBackend {
        fn new(responses: &[&str]) -> Self {
            ScriptedBackend {
                responses: Mutex::new(responses.iter().rev().map(|s| s.to_string()).collect()),
                calls: Mutex::new(0),
            }
        }

        fn call_count(&self) -> usize {
            *self.calls.lock().unwrap()
        }
    }

    impl ChatBackend for ScriptedBackend {
        fn complete(
            &self,
            _messages: &[ChatMessage],
            _temperature: f64,
            _max_tokens: Option<u32>,
        ) -> Result<String, TransportError> {
            *self.calls.lock().unwrap() += 1;
            self.responses
                .lock()
                .unwrap()
                .pop()
                .ok_or_else(|| TransportError::BadPayload("script exhausted".to_string()))
        }

        fn id(&self) -> String {
            "scripted".to_string()
        }
    }

    #[test]
    fn prompt_classifier_reasks_once_then_succeeds() {
        let classifier = PromptClassifier::new(ScriptedBackend::new(&["gibberish", " T "]));
        let label = classifier.classify_nep("", "msg").unwrap();
        assert_eq!(label, NepLabel::Transition);
        assert_eq!(classifier.backend.call_count(), 2);
    }

    #[test]
    fn prompt_classifier_gives_up_after_two_unparseable_responses() {
        let classifier = PromptClassifier::new(ScriptedBackend::new(&["what", "Transition"]));
        let err = classifier.classify_nep("", "msg").unwrap_err();
        match err {
            ClassifyError::UnparseableResponse { response, .. } => {
                assert_eq!(response, "Transition");
            }
            other => panic!("expected UnparseableResponse, got {other:?}"),
        }
        assert_eq!(classifier.backend.call_count(), 2);
    }

    fn record(conv: &str, turn: usize) -> TurnLabelRecord {
        TurnLabelRecord {
            conversation_id: conv.to_string(),
            turn_index: turn,
            nep: NepLabel::Problem,
            emotion: EmotionLabel::Sadness,
            classifier_id: "stub-v1".to_string(),
            prompt_hash: "abcd".to_string(),
        }
    }

    #[test]
    fn label_store_round_trips_and_recovers_truncated_tail() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.jsonl");
        {
            let mut store = LabelStore::open(&path).unwrap();
            store.append(record("c1", 1)).unwrap();
            store.append(record("c1", 2)).unwrap();
            // identical re-append is a no-op
            store.append(record("c1", 1)).unwrap();
            assert_eq!(store.len(), 2);
        }
        // simulate a crash mid-write
        let mut raw = std::fs::read_to_string(&path).unwrap();
        raw.push_str("{\"conversation_id\":\"c1\",\"turn_in");
        std::fs::write(&path, &raw).unwrap();

        let store = LabelStore::open(&path).unwrap();
        assert!(store.recovered_partial_line());
        assert_eq!(store.len(), 2);
        assert!(store.get("c1", 1, "stub-v1").is_some());
        // the partial tail is gone from disk
        let repaired = std::fs::read_to_string(&path).unwrap();
        assert!(repaired.ends_with('\n'));
        assert_eq!(repaired.lines().count(), 2);
    }

    #[test]
    fn label_store_rejects_conflicts_and_mid_file_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.jsonl");
        let mut store = LabelStore::open(&path).unwrap();
        store.append(record("c1", 1)).unwrap();
        let mut conflicting = record("c1", 1);
        conflicting.nep = NepLabel::Change;
        assert!(matches!(
            store.append(conflicting).unwrap_err(),
            ClassifyError::Cache { .. }
        ));
        drop(store);

        let good = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, format!("not json\n{good}")).unwrap();
        assert!(matches!(
            LabelStore::open(&path).unwrap_err(),
            ClassifyError::Cache { .. }
        ));
    }

    fn fixture_corpus(dir: &Path) -> Corpus {
        let profiles_path = dir.join("profiles.jsonl");
        std::fs::write(
            &profiles_path,
            "{\"profile_id\":\"p1\",\"attributes\":{}}\n",
        )
        .unwrap();
        let corpus_path = dir.join("corpus.jsonl");
        std::fs::write(
            &corpus_path,
            concat!(
                r#"{"conversation_id":"c1","profile_id":"p1","setting_id":"s","messages":["#,
                r#"{"speaker":"therapist","text":"how are you"},"#,
                r#"{"speaker":"patient","text":"i feel sad and stuck"},"#,
                r#"{"speaker":"therapist","text":"tell me more"},"#,
                r#"{"speaker":"patient","text":"maybe i could try"}]}"#,
                "\n",
                r#"{"conversation_id":"c2","profile_id":"p1","setting_id":"s","messages":["#,
                r#"{"speaker":"patient","text":"i made progress"}]}"#,
                "\n",
            ),
        )
        .unwrap();
        let profiles = load_profiles(&profiles_path).unwrap();
        load_corpus(&corpus_path, "s", &profiles).unwrap()
    }

    #[test]
    fn label_corpus_caches_and_resumes() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = fixture_corpus(dir.path());
        let path = dir.path().join("labels.jsonl");
        let stub = StubClassifier;

        let mut store = LabelStore::open(&path).unwrap();
        let first = label_corpus(&corpus, &stub, &mut store, 1).unwrap();
        assert_eq!(first.queried, 3);
        assert_eq!(first.reused, 0);
        drop(store);

        // repeat run: full cache hit, no queries
        let mut store = LabelStore::open(&path).unwrap();
        let second = label_corpus(&corpus, &stub, &mut store, 1).unwrap();
        assert_eq!(second.queried, 0);
        assert_eq!(second.reused, 3);

        // drop one record and resume: only the missing turn is queried
        let raw = std::fs::read_to_string(&path).unwrap();
        let kept: Vec<&str> = raw.lines().take(2).collect();
        std::fs::write(&path, format!("{}\n", kept.join("\n"))).unwrap();
        let mut store = LabelStore::open(&path).unwrap();
        let third = label_corpus(&corpus, &stub, &mut store, 1).unwrap();
        assert_eq!(third.queried, 1);
        assert_eq!(third.reused, 2);
    }

    #[test]
    fn label_corpus_parallel_matches_sequential_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = fixture_corpus(dir.path());
        let stub = StubClassifier;

        let seq_path = dir.path().join("seq.jsonl");
        let mut store = LabelStore::open(&seq_path).unwrap();
        label_corpus(&corpus, &stub, &mut store, 1).unwrap();
        drop(store);

        let par_path = dir.path().join("par.jsonl");
        let mut store = LabelStore::open(&par_path).unwrap();
        label_corpus(&corpus, &stub, &mut store, 4).unwrap();
        drop(store);

        assert_eq!(
            std::fs::read(&seq_path).unwrap(),
            std::fs::read(&par_path).unwrap()
        );
    }

    #[test]
    fn label_corpus_rejects_stale_prompt_hash() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = fixture_corpus(dir.path());
        let path = dir.path().join("labels.jsonl");
        let stub = StubClassifier;
        let mut stale = record("c1", 1);
        stale.prompt_hash = "0000".to_string();
        let mut store = LabelStore::open(&path).unwrap();
        store.append(stale).unwrap();
        assert!(matches!(
            label_corpus(&corpus, &stub, &mut store, 1).unwrap_err(),
            ClassifyError::Cache { .. }
        ));
    }

    /// Labeler that fails on one specific conversation.
    struct FailingLabeler {
        fail_on: String,
    }

    impl TurnLabeler for FailingLabeler {
        fn classify_nep(
            &self,
            _history: &str,
            current_message: &str,
        ) -> Result<NepLabel, ClassifyError> {
            if current_message.contains(&self.fail_on) {
                Err(ClassifyError::Transport(TransportError::BadPayload(
                    "boom".to_string(),
                )))
            } else {
                Ok(NepLabel::Problem)
            }
        }

        fn classify_emotion(
            &self,
            _history: &str,
            _current_message: &str,
        ) -> Result<EmotionLabel, ClassifyError> {
            Ok(EmotionLabel::Neutral)
        }

        fn classifier_id(&self) -> String {
            "failing".to_string()
        }

        fn prompt_hash(&self) -> String {
            "hash".to_string()
        }
    }

    #[test]
    fn label_corpus_persists_progress_before_erroring() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = fixture_corpus(dir.path());
        let path = dir.path().join("labels.jsonl");
        let labeler = FailingLabeler {
            fail_on: "maybe i could try".to_string(),
        };
        let mut store = LabelStore::open(&path).unwrap();
        let err = label_corpus(&corpus, &labeler, &mut store, 1).unwrap_err();
        match &err {
            ClassifyError::AtTurn {
                conversation_id,
                turn_index,
                ..
            } => {
                assert_eq!(conversation_id, "c1");
                assert_eq!(*turn_index, 2);
            }
            other => panic!("expected AtTurn, got {other:?}"),
        }
        drop(store);
        let store = LabelStore::open(&path).unwrap();
        assert_eq!(store.len(), 1);
        assert!(store.get("c1", 1, "failing").is_some());
    }
}
