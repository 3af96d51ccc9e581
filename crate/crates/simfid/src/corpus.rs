//! Conversation corpora: JSONL ingestion, canonicalisation, and profiles.
//!
//! A corpus file holds one conversation per line. Canonical form strictly
//! alternates speakers; consecutive messages by the same speaker are merged at
//! load time. A conversation's `turn_count` is its number of patient messages
//! after merging.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}:{line}: malformed JSON: {detail}")]
    Parse {
        path: String,
        line: usize,
        detail: String,
    },
    #[error("{path}:{line}: field `{field}`: {detail}")]
    Schema {
        path: String,
        line: usize,
        field: String,
        detail: String,
    },
    #[error("{path}:{line}: setting_id is `{found}`, expected `{expected}`")]
    SettingMismatch {
        path: String,
        line: usize,
        expected: String,
        found: String,
    },
    #[error("conversation `{0}` references unknown profile `{1}`")]
    DanglingProfile(String, String),
    #[error("duplicate conversation_id `{0}`")]
    DuplicateConversation(String),
    #[error("duplicate profile_id `{0}`")]
    DuplicateProfile(String),
    #[error("conversation `{0}` has no messages")]
    EmptyConversation(String),
    #[error("conversation `{0}` contains no patient messages")]
    NoPatientMessages(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    Patient,
    Therapist,
}

impl fmt::Display for Speaker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Speaker::Patient => write!(f, "Patient"),
            Speaker::Therapist => write!(f, "Therapist"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub speaker: Speaker,
    pub text: String,
    /// Ordinal of the first source message folded into this one. Not
    /// serialised; reconstructed on load.
    #[serde(skip)]
    pub raw_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conversation {
    pub conversation_id: String,
    pub profile_id: String,
    pub setting_id: String,
    pub messages: Vec<Message>,
    /// Patient message count after merging. Derived, not serialised.
    #[serde(skip)]
    pub turn_count: usize,
}

impl Conversation {
    /// Patient messages with their 1-based turn index.
    pub fn patient_turns(&self) -> Vec<(usize, &str)> {
        self.messages
            .iter()
            .filter(|m| m.speaker == Speaker::Patient)
            .enumerate()
            .map(|(i, m)| (i + 1, m.text.as_str()))
            .collect()
    }
}

/// Background sheet for one simulated patient. Attribute order is preserved
/// verbatim from the source file so prompts render the same way every run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientProfile {
    pub profile_id: String,
    pub attributes: IndexMap<String, String>,
}

/// Profiles keyed by id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ProfileSet {
    profiles: BTreeMap<String, PatientProfile>,
}

impl ProfileSet {
    pub fn new(profiles: impl IntoIterator<Item = PatientProfile>) -> Result<Self, CorpusError> {
        let mut map = BTreeMap::new();
        for p in profiles {
            if map.contains_key(&p.profile_id) {
                return Err(CorpusError::DuplicateProfile(p.profile_id));
            }
            map.insert(p.profile_id.clone(), p);
        }
        Ok(ProfileSet { profiles: map })
    }

    pub fn get(&self, profile_id: &str) -> Option<&PatientProfile> {
        self.profiles.get(profile_id)
    }

    pub fn contains(&self, profile_id: &str) -> bool {
        self.profiles.contains_key(profile_id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &PatientProfile> {
        self.profiles.values()
    }

    pub fn len(&self) -> usize {
        self.profiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.profiles.is_empty()
    }
}

/// All conversations of one setting plus the profiles they reference.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub setting_id: String,
    /// Sorted by `conversation_id`.
    pub conversations: Vec<Conversation>,
    pub profiles: ProfileSet,
}

impl Corpus {
    /// Every patient message text in corpus order.
    pub fn patient_texts(&self) -> Vec<&str> {
        self.conversations
            .iter()
            .flat_map(|c| {
                c.messages
                    .iter()
                    .filter(|m| m.speaker == Speaker::Patient)
                    .map(|m| m.text.as_str())
            })
            .collect()
    }

    pub fn conversation(&self, conversation_id: &str) -> Option<&Conversation> {
        self.conversations
            .binary_search_by(|c| c.conversation_id.as_str().cmp(conversation_id))
            .ok()
            .map(|i| &self.conversations[i])
    }
}

/// Folds consecutive same-speaker messages into one, joining texts with a
/// single space. The merged message keeps the first constituent's raw index.
pub fn merge_consecutive_turns(messages: Vec<Message>) -> Result<Vec<Message>, CorpusError> {
    if messages.is_empty() {
        return Err(CorpusError::EmptyConversation(String::new()));
    }
    let mut merged: Vec<Message> = Vec::with_capacity(messages.len());
    for msg in messages {
        match merged.last_mut() {
            Some(prev) if prev.speaker == msg.speaker => {
                prev.text.push(' ');
                prev.text.push_str(&msg.text);
            }
            _ => merged.push(msg),
        }
    }
    Ok(merged)
}

fn io_err(path: &Path, source: std::io::Error) -> CorpusError {
    CorpusError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Loads a profiles JSONL file: `{"profile_id": ..., "attributes": {...}}`.
pub fn load_profiles(path: &Path) -> Result<ProfileSet, CorpusError> {
    let raw = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let path_str = path.display().to_string();
    let mut profiles = Vec::new();
    for (idx, line) in raw.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(line).map_err(|e| CorpusError::Parse {
                path: path_str.clone(),
                line: line_no,
                detail: e.to_string(),
            })?;
        let profile_id = require_string(&value, "profile_id", &path_str, line_no)?;
        let attrs_value = value
            .get("attributes")
            .ok_or_else(|| schema(&path_str, line_no, "attributes", "missing"))?;
        let attrs_obj = attrs_value
            .as_object()
            .ok_or_else(|| schema(&path_str, line_no, "attributes", "expected an object"))?;
        let mut attributes = IndexMap::new();
        for (k, v) in attrs_obj {
            let text = v
                .as_str()
                .ok_or_else(|| schema(&path_str, line_no, "attributes", "values must be strings"))?;
            attributes.insert(k.clone(), text.to_string());
        }
        profiles.push(PatientProfile {
            profile_id,
            attributes,
        });
    }
    ProfileSet::new(profiles)
}

pub fn save_profiles(profiles: &ProfileSet, path: &Path) -> Result<(), CorpusError> {
    let mut out = String::new();
    for p in profiles.iter() {
        out.push_str(&serde_json::to_string(p).expect("profile serialises"));
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

fn schema(path: &str, line: usize, field: &str, detail: &str) -> CorpusError {
    CorpusError::Schema {
        path: path.to_string(),
        line,
        field: field.to_string(),
        detail: detail.to_string(),
    }
}

fn require_string(
    value: &serde_json::Value,
    field: &str,
    path: &str,
    line: usize,
) -> Result<String, CorpusError> {
    let v = value
        .get(field)
        .ok_or_else(|| schema(path, line, field, "missing"))?;
    let s = v
        .as_str()
        .ok_or_else(|| schema(path, line, field, "expected a string"))?;
    if s.is_empty() {
        return Err(schema(path, line, field, "must be non-empty"));
    }
    Ok(s.to_string())
}

/// Loads one setting's corpus, canonicalising every conversation.
///
/// Rejects: malformed lines, schema violations, a `setting_id` other than
/// `expected_setting`, unknown profiles, duplicate conversation ids, empty
/// conversations, and conversations in which the patient never speaks.
pub fn load_corpus(
    path: &Path,
    expected_setting: &str,
    profiles: &ProfileSet,
) -> Result<Corpus, CorpusError> {
    let raw = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let path_str = path.display().to_string();
    let mut conversations: Vec<Conversation> = Vec::new();
    let mut seen_ids: BTreeSet<String> = BTreeSet::new();
    for (idx, line) in raw.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(line).map_err(|e| CorpusError::Parse {
                path: path_str.clone(),
                line: line_no,
                detail: e.to_string(),
            })?;
        let conversation_id = require_string(&value, "conversation_id", &path_str, line_no)?;
        let profile_id = require_string(&value, "profile_id", &path_str, line_no)?;
        let setting_id = require_string(&value, "setting_id", &path_str, line_no)?;
        if setting_id != expected_setting {
            return Err(CorpusError::SettingMismatch {
                path: path_str.clone(),
                line: line_no,
                expected: expected_setting.to_string(),
                found: setting_id,
            });
        }
        if !profiles.contains(&profile_id) {
            return Err(CorpusError::DanglingProfile(conversation_id, profile_id));
        }
        if !seen_ids.insert(conversation_id.clone()) {
            return Err(CorpusError::DuplicateConversation(conversation_id));
        }
        let raw_messages = value
            .get("messages")
            .ok_or_else(|| schema(&path_str, line_no, "messages", "missing"))?
            .as_array()
            .ok_or_else(|| schema(&path_str, line_no, "messages", "expected an array"))?;
        if raw_messages.is_empty() {
            return Err(CorpusError::EmptyConversation(conversation_id));
        }
        let mut messages = Vec::with_capacity(raw_messages.len());
        for (raw_index, m) in raw_messages.iter().enumerate() {
            let speaker_str = require_string(m, "speaker", &path_str, line_no)?;
            let speaker = match speaker_str.to_lowercase().as_str() {
                "patient" => Speaker::Patient,
                "therapist" => Speaker::Therapist,
                other => {
                    return Err(schema(
                        &path_str,
                        line_no,
                        "speaker",
                        &format!("unknown speaker `{other}`"),
                    ))
                }
            };
            let text_value = m
                .get("text")
                .ok_or_else(|| schema(&path_str, line_no, "text", "missing"))?;
            let text = text_value
                .as_str()
                .ok_or_else(|| schema(&path_str, line_no, "text", "expected a string"))?
                .trim()
                .to_string();
            if text.is_empty() {
                return Err(schema(
                    &path_str,
                    line_no,
                    "text",
                    &format!("empty after trimming (message {raw_index})"),
                ));
            }
            messages.push(Message {
                speaker,
                text,
                raw_index,
            });
        }
        let messages = merge_consecutive_turns(messages)
            .map_err(|_| CorpusError::EmptyConversation(conversation_id.clone()))?;
        let turn_count = messages
            .iter()
            .filter(|m| m.speaker == Speaker::Patient)
            .count();
        if turn_count == 0 {
            return Err(CorpusError::NoPatientMessages(conversation_id));
        }
        conversations.push(Conversation {
            conversation_id,
            profile_id,
            setting_id,
            messages,
            turn_count,
        });
    }
    conversations.sort_by(|a, b| a.conversation_id.cmp(&b.conversation_id));
    let referenced: BTreeSet<&str> = conversations
        .iter()
        .map(|c| c.profile_id.as_str())
        .collect();
    let subset = ProfileSet::new(
        profiles
            .iter()
            .filter(|p| referenced.contains(p.profile_id.as_str()))
            .cloned(),
    )?;
    Ok(Corpus {
        setting_id: expected_setting.to_string(),
        conversations,
        profiles: subset,
    })
}

/// Writes a corpus as canonical JSONL, one conversation per line, sorted by
/// conversation id. Loading the result reproduces the corpus byte for byte.
pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<(), CorpusError> {
    let mut out = String::new();
    for conv in &corpus.conversations {
        out.push_str(&serde_json::to_string(conv).expect("conversation serialises"));
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CorpusError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| io_err(path, e))?;
        }
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
        f.write_all(bytes).map_err(|e| io_err(&tmp, e))?;
        f.flush().map_err(|e| io_err(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn msg(speaker: Speaker, text: &str, raw_index: usize) -> Message {
        Message {
            speaker,
            text: text.to_string(),
            raw_index,
        }
    }

    #[test]
    fn merge_folds_consecutive_same_speaker_runs() {
        let merged = merge_consecutive_turns(vec![
            msg(Speaker::Patient, "a", 0),
            msg(Speaker::Patient, "b", 1),
            msg(Speaker::Therapist, "c", 2),
        ])
        .unwrap();
        assert_eq!(merged.len(), 2);
        assert_eq!(merged[0].text, "a b");
        assert_eq!(merged[0].raw_index, 0);
        assert_eq!(merged[1].text, "c");
    }

    #[test]
    fn merge_rejects_empty_input() {
        assert!(matches!(
            merge_consecutive_turns(Vec::new()),
            Err(CorpusError::EmptyConversation(_))
        ));
    }

    fn write_profiles(dir: &Path) -> std::path::PathBuf {
        let p = dir.join("profiles.jsonl");
        let mut f = fs::File::create(&p).unwrap();
        writeln!(
            f,
            r#"{{"profile_id":"p1","attributes":{{"age":"34","zeta":"z","alpha":"a"}}}}"#
        )
        .unwrap();
        writeln!(f, r#"{{"profile_id":"p2","attributes":{{}}}}"#).unwrap();
        f.flush().unwrap();
        p
    }

    #[test]
    fn profiles_preserve_attribute_order() {
        let dir = tempfile::tempdir().unwrap();
        let profiles = load_profiles(&write_profiles(dir.path())).unwrap();
        let keys: Vec<&String> = profiles.get("p1").unwrap().attributes.keys().collect();
        assert_eq!(keys, ["age", "zeta", "alpha"]);
    }

    #[test]
    fn load_merges_and_counts_patient_turns() {
        let dir = tempfile::tempdir().unwrap();
        let profiles = load_profiles(&write_profiles(dir.path())).unwrap();
        let corpus_path = dir.path().join("c.jsonl");
        fs::write(
            &corpus_path,
            concat!(
                r#"{"conversation_id":"c2","profile_id":"p1","setting_id":"s","messages":["#,
                r#"{"speaker":"therapist","text":" hi "},"#,
                r#"{"speaker":"patient","text":"one"},"#,
                r#"{"speaker":"patient","text":"two"},"#,
                r#"{"speaker":"therapist","text":"ok"},"#,
                r#"{"speaker":"patient","text":"three"}]}"#,
                "\n",
                r#"{"conversation_id":"c1","profile_id":"p2","setting_id":"s","messages":["#,
                r#"{"speaker":"patient","text":"solo"}]}"#,
                "\n",
            ),
        )
        .unwrap();
        let corpus = load_corpus(&corpus_path, "s", &profiles).unwrap();
        assert_eq!(corpus.conversations.len(), 2);
        // sorted by conversation_id
        assert_eq!(corpus.conversations[0].conversation_id, "c1");
        let c2 = corpus.conversation("c2").unwrap();
        assert_eq!(c2.turn_count, 2);
        assert_eq!(c2.messages[0].text, "hi");
        assert_eq!(c2.messages[1].text, "one two");
        assert_eq!(c2.patient_turns(), vec![(1, "one two"), (2, "three")]);
        assert_eq!(corpus.profiles.len(), 2);
    }

    #[test]
    fn load_reports_schema_violations_with_line_and_field() {
        let dir = tempfile::tempdir().unwrap();
        let profiles = load_profiles(&write_profiles(dir.path())).unwrap();
        let corpus_path = dir.path().join("bad.jsonl");
        fs::write(
            &corpus_path,
            concat!(
                r#"{"conversation_id":"c1","profile_id":"p1","setting_id":"s","messages":[{"speaker":"patient","text":"x"}]}"#,
                "\n",
                r#"{"conversation_id":"c2","profile_id":"p1","setting_id":"s","messages":[{"text":"x"}]}"#,
                "\n",
            ),
        )
        .unwrap();
        let err = load_corpus(&corpus_path, "s", &profiles).unwrap_err();
        match err {
            CorpusError::Schema { line, field, .. } => {
                assert_eq!(line, 2);
                assert_eq!(field, "speaker");
            }
            other => panic!("expected Schema error, got {other:?}"),
        }
    }

    #[test]
    fn load_rejects_malformed_json_with_line() {
        let dir = tempfile::tempdir().unwrap();
        let profiles = load_profiles(&write_profiles(dir.path())).unwrap();
        let corpus_path = dir.path().join("bad.jsonl");
        fs::write(&corpus_path, "{not json\n").unwrap();
        match load_corpus(&corpus_path, "s", &profiles).unwrap_err() {
            CorpusError::Parse { line, .. } => assert_eq!(line, 1),
            other => panic!("expected Parse error, got {other:?}"),
        }
    }

    #[test]
    fn load_rejects_dangling_profile_duplicates_and_silent_patients() {
        let dir = tempfile::tempdir().unwrap();
        let profiles = load_profiles(&write_profiles(dir.path())).unwrap();
        let path = dir.path().join("c.jsonl");

        fs::write(
            &path,
            r#"{"conversation_id":"c1","profile_id":"ghost","setting_id":"s","messages":[{"speaker":"patient","text":"x"}]}"#,
        )
        .unwrap();
        assert!(matches!(
            load_corpus(&path, "s", &profiles).unwrap_err(),
            CorpusError::DanglingProfile(_, _)
        ));

        let line = r#"{"conversation_id":"c1","profile_id":"p1","setting_id":"s","messages":[{"speaker":"patient","text":"x"}]}"#;
        fs::write(&path, format!("{line}\n{line}\n")).unwrap();
        assert!(matches!(
            load_corpus(&path, "s", &profiles).unwrap_err(),
            CorpusError::DuplicateConversation(_)
        ));

        fs::write(
            &path,
            r#"{"conversation_id":"c1","profile_id":"p1","setting_id":"s","messages":[{"speaker":"therapist","text":"x"}]}"#,
        )
        .unwrap();
        assert!(matches!(
            load_corpus(&path, "s", &profiles).unwrap_err(),
            CorpusError::NoPatientMessages(_)
        ));

        fs::write(
            &path,
            r#"{"conversation_id":"c1","profile_id":"p1","setting_id":"other","messages":[{"speaker":"patient","text":"x"}]}"#,
        )
        .unwrap();
        assert!(matches!(
            load_corpus(&path, "s", &profiles).unwrap_err(),
            CorpusError::SettingMismatch { .. }
        ));
    }

    prop_compose! {
        fn arb_text()(words in prop::collection::vec("[a-z]{1,8}", 1..6)) -> String {
            words.join(" ")
        }
    }

    prop_compose! {
        fn arb_messages()(
            speakers in prop::collection::vec(prop::bool::ANY, 1..20),
            texts in prop::collection::vec(arb_text(), 20)
        ) -> Vec<Message> {
            speakers
                .iter()
                .enumerate()
                .map(|(i, s)| Message {
                    speaker: if *s { Speaker::Patient } else { Speaker::Therapist },
                    text: texts[i].clone(),
                    raw_index: i,
                })
                .collect()
        }
    }

    proptest! {
        #[test]
        fn merge_is_idempotent_and_conserves_text(messages in arb_messages()) {
            let once = merge_consecutive_turns(messages.clone()).unwrap();
            let twice = merge_consecutive_turns(once.clone()).unwrap();
            prop_assert_eq!(&once, &twice);
            for pair in once.windows(2) {
                prop_assert_ne!(pair[0].speaker, pair[1].speaker);
            }
            let concat_before: Vec<&str> = messages.iter().map(|m| m.text.as_str()).collect();
            let concat_after: Vec<&str> = once.iter().map(|m| m.text.as_str()).collect();
            prop_assert_eq!(concat_before.join(" "), concat_after.join(" "));
        }

        #[test]
        fn save_load_round_trip(messages in arb_messages()) {
            prop_assume!(messages.iter().any(|m| m.speaker == Speaker::Patient));
            let dir = tempfile::tempdir().unwrap();
            let profiles = ProfileSet::new([PatientProfile {
                profile_id: "p1".into(),
                attributes: IndexMap::new(),
            }]).unwrap();
            let mut merged = merge_consecutive_turns(messages).unwrap();
            // Saving emits canonical form, so reload assigns positional raw indices.
            for (i, m) in merged.iter_mut().enumerate() {
                m.raw_index = i;
            }
            let turn_count = merged.iter().filter(|m| m.speaker == Speaker::Patient).count();
            let corpus = Corpus {
                setting_id: "s".into(),
                conversations: vec![Conversation {
                    conversation_id: "c1".into(),
                    profile_id: "p1".into(),
                    setting_id: "s".into(),
                    messages: merged,
                    turn_count,
                }],
                profiles,
            };
            let path = dir.path().join("c.jsonl");
            save_corpus(&corpus, &path).unwrap();
            let reloaded = load_corpus(&path, "s", &corpus.profiles).unwrap();
            prop_assert_eq!(reloaded, corpus);
        }
    }
}
