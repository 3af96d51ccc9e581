//! Dialogue generation: a therapist agent and a patient agent alternate
//! until the simulated conversation reaches the paired real conversation's
//! length (capped), producing corpora ready for evaluation.

use std::collections::BTreeSet;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::classify::fnv1a;
use crate::corpus::{
    load_corpus, save_corpus, Conversation, Corpus, CorpusError, Message, PatientProfile,
    ProfileSet, Speaker,
};
use crate::http::{ChatBackend, ChatMessage, ChatRole, TransportError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{speaker} agent returned an empty reply twice")]
    EmptyAgentReply { speaker: Speaker },
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// A dialogue error plus everything said before it, so the transcript can be
/// persisted for inspection and the conversation retried later.
#[derive(Debug)]
pub struct DialogueFailure {
    pub error: HarnessError,
    pub partial: Vec<Message>,
}

/// One side of a conversation. Implementations must be deterministic given
/// the transcript and profile (remote models excepted).
pub trait DialogueAgent: Send + Sync {
    fn speaker(&self) -> Speaker;
    fn reply(
        &self,
        profile: &PatientProfile,
        transcript: &[Message],
    ) -> Result<String, HarnessError>;
}

/// Renders profile attributes as `key: value` lines for prompt injection.
pub fn render_profile(profile: &PatientProfile) -> String {
    profile
        .attributes
        .iter()
        .map(|(k, v)| format!("{k}: {v}"))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Agent backed by a chat endpoint. The transcript maps onto chat roles from
/// this agent's point of view: its own past messages become `assistant`
/// turns, the interlocutor's become `user` turns.
pub struct ChatAgent<B: ChatBackend> {
    speaker: Speaker,
    backend: B,
    /// May contain a `{profile}` slot, replaced by the rendered profile.
    system_prompt_template: String,
    temperature: f64,
    max_tokens: Option<u32>,
}

impl<B: ChatBackend> ChatAgent<B> {
    pub fn new(
        speaker: Speaker,
        backend: B,
        system_prompt_template: String,
        temperature: f64,
        max_tokens: Option<u32>,
    ) -> Self {
        ChatAgent {
            speaker,
            backend,
            system_prompt_template,
            temperature,
            max_tokens,
        }
    }
}

impl<B: ChatBackend> DialogueAgent for ChatAgent<B> {
    fn speaker(&self) -> Speaker {
        self.speaker
    }

    fn reply(
        &self,
        profile: &PatientProfile,
        transcript: &[Message],
    ) -> Result<String, HarnessError> {
        let system = self
            .system_prompt_template
            .replace("{profile}", &render_profile(profile));
        let mut messages = Vec::with_capacity(transcript.len() + 1);
        messages.push(ChatMessage::new(ChatRole::System, system));
        for m in transcript {
            let role = if m.speaker == self.speaker {
                ChatRole::Assistant
            } else {
                ChatRole::User
            };
            messages.push(ChatMessage::new(role, m.text.clone()));
        }
        let text = self
            .backend
            .complete(&messages, self.temperature, self.max_tokens)?;
        Ok(text)
    }
}

const STUB_OPENER: &str =
    "Hello, thank you for coming in today. How have you been feeling lately?";

const STUB_PROBES: &[&str] = &[
    "Can you tell me more about that?",
    "How long have you been feeling this way?",
    "What goes through your mind when that happens?",
    "How does that affect your day to day life?",
    "What would feeling a little better look like for you?",
    "Is there anything that brings you relief, even briefly?",
];

/// Offline therapist: a fixed opener, then rotating follow-up probes.
#[derive(Debug, Default, Clone, Copy)]
pub struct StubTherapist;

impl DialogueAgent for StubTherapist {
    fn speaker(&self) -> Speaker {
        Speaker::Therapist
    }

    fn reply(
        &self,
        _profile: &PatientProfile,
        transcript: &[Message],
    ) -> Result<String, HarnessError> {
        let own = transcript
            .iter()
            .filter(|m| m.speaker == Speaker::Therapist)
            .count();
        if own == 0 {
            Ok(STUB_OPENER.to_string())
        } else {
            Ok(STUB_PROBES[(own - 1) % STUB_PROBES.len()].to_string())
        }
    }
}

const STUB_PATIENT_LINES: &[&str] = &[
    "I honestly feel stuck and hopeless, like nothing I do ever changes anything at all, and I am always so tired of trying.",
    "Um, I have not been sleeping, the insomnia is constant and I lie awake feeling anxious about absolutely everything that could go wrong.",
    "Everything feels dark lately... I mean, I feel so lonely and sad, and I never want to leave my room or see anyone anymore.",
    "I keep thinking maybe it is my fault, you know, like I always ruin every good thing and everyone would be better off without me around.",
    "Some days I just want to give up completely because nothing ever helps and the stress never stops pressing down on me.",
    "I guess maybe talking helps a little... perhaps I could try writing down what makes me feel so low before our next session.",
    "I wonder why the sadness gets worse at night, um, maybe it is because the whole house goes quiet and I am alone with it.",
    "Lately I feel a bit more hopeful, I made some progress this week and even managed to call a friend without feeling totally drained.",
    "I am scared all the time, afraid that the bad feeling never ends, and my chest hurts when the fear takes over completely.",
    "You know, I realized I always expect the worst from everyone, and maybe that is part of why I feel so helpless and negative.",
    "I feel angry at myself constantly, every little mistake proves I am worthless, and the guilt just never lets go of me.",
    "Honestly... um, I am exhausted, the depression makes every single day feel empty, and I cannot remember ever feeling happy.",
];

/// Offline patient: picks a line from a fixed marker-rich bank, keyed by
/// setting salt, profile, and turn number, so runs are reproducible while
/// settings and profiles still differ from each other.
#[derive(Debug, Clone)]
pub struct StubPatient {
    salt: String,
}

impl StubPatient {
    pub fn new(salt: impl Into<String>) -> Self {
        StubPatient { salt: salt.into() }
    }
}

impl DialogueAgent for StubPatient {
    fn speaker(&self) -> Speaker {
        Speaker::Patient
    }

    fn reply(
        &self,
        profile: &PatientProfile,
        transcript: &[Message],
    ) -> Result<String, HarnessError> {
        let turn = transcript
            .iter()
            .filter(|m| m.speaker == Speaker::Patient)
            .count();
        let key = format!("{}:{}:{}", self.salt, profile.profile_id, turn);
        let index = (fnv1a(key.as_bytes()) % STUB_PATIENT_LINES.len() as u64) as usize;
        Ok(STUB_PATIENT_LINES[index].to_string())
    }
}

fn reply_with_retry(
    agent: &dyn DialogueAgent,
    profile: &PatientProfile,
    transcript: &[Message],
) -> Result<String, HarnessError> {
    for _attempt in 0..2 {
        let text = agent.reply(profile, transcript)?;
        let trimmed = text.trim();
        if !trimmed.is_empty() {
            return Ok(trimmed.to_string());
        }
    }
    Err(HarnessError::EmptyAgentReply {
        speaker: agent.speaker(),
    })
}

/// Plays one conversation: the therapist opens, then the agents alternate
/// until the patient has spoken `min(turn_cap, reference_turn_count)` times.
pub fn run_dialogue(
    conversation_id: &str,
    setting_id: &str,
    profile: &PatientProfile,
    reference_turn_count: usize,
    turn_cap: usize,
    therapist: &dyn DialogueAgent,
    patient: &dyn DialogueAgent,
) -> Result<Conversation, DialogueFailure> {
    let max_turns = reference_turn_count.min(turn_cap).max(1);
    let mut messages: Vec<Message> = Vec::new();
    for _turn in 0..max_turns {
        for agent in [therapist, patient] {
            match reply_with_retry(agent, profile, &messages) {
                Ok(text) => messages.push(Message {
                    speaker: agent.speaker(),
                    text,
                    raw_index: messages.len(),
                }),
                Err(error) => {
                    return Err(DialogueFailure {
                        error,
                        partial: messages,
                    })
                }
            }
        }
    }
    Ok(Conversation {
        conversation_id: conversation_id.to_string(),
        profile_id: profile.profile_id.clone(),
        setting_id: setting_id.to_string(),
        messages,
        turn_count: max_turns,
    })
}

/// One conversation to simulate, paired with the real conversation whose
/// length it should match.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GenerationJob {
    pub conversation_id: String,
    pub profile_id: String,
    pub reference_turn_count: usize,
}

/// One job per real conversation, reusing its id so evaluation can pair the
/// simulated conversation with its reference.
pub fn jobs_from_reference(corpus: &Corpus) -> Vec<GenerationJob> {
    corpus
        .conversations
        .iter()
        .map(|c| GenerationJob {
            conversation_id: c.conversation_id.clone(),
            profile_id: c.profile_id.clone(),
            reference_turn_count: c.turn_count,
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct BatchFailure {
    pub conversation_id: String,
    pub detail: String,
    /// Where the partial transcript was written, if anything was said.
    pub partial_path: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BatchOutcome {
    pub setting_id: String,
    pub generated: usize,
    /// Conversations already on disk from an earlier run.
    pub reused: usize,
    pub failures: Vec<BatchFailure>,
}

#[derive(Serialize)]
struct PartialTranscript<'a> {
    conversation_id: &'a str,
    setting_id: &'a str,
    profile_id: &'a str,
    error: String,
    messages: &'a [Message],
}

/// Generates one corpus file per setting under `output_dir`.
///
/// Jobs whose conversation id already exists in the setting's file are
/// skipped, so an interrupted batch resumes where it stopped. A failing job
/// is logged (with its partial transcript persisted under `partials/`) and
/// the batch moves on. Completed conversations are appended and flushed one
/// by one, and the file is rewritten in canonical sorted form at the end.
pub fn run_batch(
    jobs: &[GenerationJob],
    profiles: &ProfileSet,
    therapist: &dyn DialogueAgent,
    patients: &[(String, &dyn DialogueAgent)],
    turn_cap: usize,
    output_dir: &Path,
) -> Result<Vec<BatchOutcome>, HarnessError> {
    std::fs::create_dir_all(output_dir).map_err(|e| HarnessError::Io {
        path: output_dir.display().to_string(),
        source: e,
    })?;
    let mut outcomes = Vec::new();
    for (setting_id, patient) in patients {
        let path = output_dir.join(format!("{setting_id}.jsonl"));
        let mut existing: Vec<Conversation> = Vec::new();
        if path.exists() {
            existing = load_corpus(&path, setting_id, profiles)?.conversations;
        }
        let known: BTreeSet<&str> = existing
            .iter()
            .map(|c| c.conversation_id.as_str())
            .collect();
        let pending: Vec<&GenerationJob> = jobs
            .iter()
            .filter(|j| !known.contains(j.conversation_id.as_str()))
            .collect();
        let mut outcome = BatchOutcome {
            setting_id: setting_id.clone(),
            generated: 0,
            reused: existing.len(),
            failures: Vec::new(),
        };
        let mut appender: Option<std::fs::File> = None;
        let mut completed: Vec<Conversation> = existing;
        for job in pending {
            let profile = profiles.get(&job.profile_id).ok_or_else(|| {
                CorpusError::DanglingProfile(job.conversation_id.clone(), job.profile_id.clone())
            })?;
            match run_dialogue(
                &job.conversation_id,
                setting_id,
                profile,
                job.reference_turn_count,
                turn_cap,
                therapist,
                *patient,
            ) {
                Ok(conversation) => {
                    if appender.is_none() {
                        appender = Some(
                            OpenOptions::new()
                                .create(true)
                                .append(true)
                                .open(&path)
                                .map_err(|e| HarnessError::Io {
                                    path: path.display().to_string(),
                                    source: e,
                                })?,
                        );
                    }
                    let file = appender.as_mut().expect("appender just initialised");
                    let mut line =
                        serde_json::to_string(&conversation).expect("conversation serialises");
                    line.push('\n');
                    file.write_all(line.as_bytes())
                        .and_then(|_| file.flush())
                        .map_err(|e| HarnessError::Io {
                            path: path.display().to_string(),
                            source: e,
                        })?;
                    completed.push(conversation);
                    outcome.generated += 1;
                }
                Err(failure) => {
                    let partial_path = persist_partial(
                        output_dir,
                        setting_id,
                        job,
                        &failure,
                    )?;
                    outcome.failures.push(BatchFailure {
                        conversation_id: job.conversation_id.clone(),
                        detail: failure.error.to_string(),
                        partial_path,
                    });
                }
            }
        }
        drop(appender);
        completed.sort_by(|a, b| a.conversation_id.cmp(&b.conversation_id));
        let corpus = Corpus {
            setting_id: setting_id.clone(),
            conversations: completed,
            profiles: profiles.clone(),
        };
        save_corpus(&corpus, &path)?;
        outcomes.push(outcome);
    }
    Ok(outcomes)
}

fn persist_partial(
    output_dir: &Path,
    setting_id: &str,
    job: &GenerationJob,
    failure: &DialogueFailure,
) -> Result<Option<PathBuf>, HarnessError> {
    if failure.partial.is_empty() {
        return Ok(None);
    }
    let dir = output_dir.join("partials");
    std::fs::create_dir_all(&dir).map_err(|e| HarnessError::Io {
        path: dir.display().to_string(),
        source: e,
    })?;
    let path = dir.join(format!("{setting_id}--{}.json", job.conversation_id));
    let body = PartialTranscript {
        conversation_id: &job.conversation_id,
        setting_id,
        profile_id: &job.profile_id,
        error: failure.error.to_string(),
        messages: &failure.partial,
    };
    let payload = serde_json::to_string_pretty(&body).expect("partial transcript serialises");
    std::fs::write(&path, payload).map_err(|e| HarnessError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    Ok(Some(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use indexmap::IndexMap;

    fn profile(id: &str) -> PatientProfile {
        let mut attributes = IndexMap::new();
        attributes.insert("age".to_string(), "34".to_string());
        attributes.insert("concern".to_string(), "low mood".to_string());
        PatientProfile {
            profile_id: id.to_string(),
            attributes,
        }
    }

    /// Agent that replays a fixed list of lines.
    struct ScriptAgent {
        speaker: Speaker,
        lines: Vec<String>,
    }

    impl ScriptAgent {
        fn new(speaker: Speaker, lines: &[&str]) -> Self {
            ScriptAgent {
                speaker,
                lines: lines.iter().map(|s| s.to_string()).collect(),
            }
        }
    }

    impl DialogueAgent for ScriptAgent {
        fn speaker(&self) -> Speaker {
            self.speaker
        }

        fn reply(
            &self,
            _profile: &PatientProfile,
            transcript: &[Message],
        ) -> Result<String, HarnessError> {
            let own = transcript
                .iter()
                .filter(|m| m.speaker == self.speaker)
                .count();
            Ok(self
                .lines
                .get(own)
                .cloned()
                .unwrap_or_else(|| "".to_string()))
        }
    }

    #[test]
    fn render_profile_keeps_attribute_order() {
        assert_eq!(render_profile(&profile("p1")), "age: 34\nconcern: low mood");
    }

    #[test]
    fn dialogue_alternates_and_respects_turn_cap() {
        let therapist = ScriptAgent::new(Speaker::Therapist, &["t1", "t2", "t3", "t4", "t5"]);
        let patient = ScriptAgent::new(Speaker::Patient, &["p1", "p2", "p3", "p4", "p5"]);
        let conv =
            run_dialogue("c1", "s", &profile("p1"), 5, 3, &therapist, &patient).unwrap();
        assert_eq!(conv.turn_count, 3);
        assert_eq!(conv.messages.len(), 6);
        assert_eq!(conv.messages[0].speaker, Speaker::Therapist);
        for pair in conv.messages.windows(2) {
            assert_ne!(pair[0].speaker, pair[1].speaker);
        }
        assert_eq!(conv.messages[5].text, "p3");
    }

    #[test]
    fn dialogue_matches_shorter_references() {
        let therapist = StubTherapist;
        let patient = StubPatient::new("s");
        let conv =
            run_dialogue("c1", "s", &profile("p1"), 2, 16, &therapist, &patient).unwrap();
        assert_eq!(conv.turn_count, 2);
    }

    #[test]
    fn empty_reply_retries_once_then_fails_with_partial() {
        struct FlakyAgent {
            responses: std::sync::Mutex<Vec<&'static str>>,
        }
        impl DialogueAgent for FlakyAgent {
            fn speaker(&self) -> Speaker {
                Speaker::Patient
            }
            fn reply(
                &self,
                _profile: &PatientProfile,
                _transcript: &[Message],
            ) -> Result<String, HarnessError> {
                Ok(self
                    .responses
                    .lock()
                    .unwrap()
                    .pop()
                    .unwrap_or("")
                    .to_string())
            }
        }

        // one empty reply, then a real one: succeeds
        let patient = FlakyAgent {
            responses: std::sync::Mutex::new(vec!["recovered", ""]),
        };
        let therapist = ScriptAgent::new(Speaker::Therapist, &["hi"]);
        let conv = run_dialogue("c", "s", &profile("p"), 1, 16, &therapist, &patient).unwrap();
        assert_eq!(conv.messages[1].text, "recovered");

        // empty twice: failure carries the partial transcript
        let patient = FlakyAgent {
            responses: std::sync::Mutex::new(vec!["", ""]),
        };
        let failure =
            run_dialogue("c", "s", &profile("p"), 1, 16, &therapist, &patient).unwrap_err();
        assert!(matches!(
            failure.error,
            HarnessError::EmptyAgentReply {
                speaker: Speaker::Patient
            }
        ));
        assert_eq!(failure.partial.len(), 1);
    }

    #[test]
    fn stub_agents_are_deterministic_and_salted() {
        let p = profile("p1");
        let a = StubPatient::new("setting-a");
        let b = StubPatient::new("setting-b");
        let t: Vec<Message> = Vec::new();
        assert_eq!(a.reply(&p, &t).unwrap(), a.reply(&p, &t).unwrap());
        let lines_a: Vec<String> = (0..6)
            .map(|turn| {
                let transcript: Vec<Message> = (0..turn)
                    .map(|i| Message {
                        speaker: Speaker::Patient,
                        text: "x".to_string(),
                        raw_index: i,
                    })
                    .collect();
                a.reply(&p, &transcript).unwrap()
            })
            .collect();
        let lines_b: Vec<String> = (0..6)
            .map(|turn| {
                let transcript: Vec<Message> = (0..turn)
                    .map(|i| Message {
                        speaker: Speaker::Patient,
                        text: "x".to_string(),
                        raw_index: i,
                    })
                    .collect();
                b.reply(&p, &transcript).unwrap()
            })
            .collect();
        assert_ne!(lines_a, lines_b);
    }

    fn profile_set() -> ProfileSet {
        ProfileSet::new([profile("p1"), profile("p2"), profile("p3")]).unwrap()
    }

    fn jobs() -> Vec<GenerationJob> {
        vec![
            GenerationJob {
                conversation_id: "c1".to_string(),
                profile_id: "p1".to_string(),
                reference_turn_count: 2,
            },
            GenerationJob {
                conversation_id: "c2".to_string(),
                profile_id: "p2".to_string(),
                reference_turn_count: 3,
            },
            GenerationJob {
                conversation_id: "c3".to_string(),
                profile_id: "p3".to_string(),
                reference_turn_count: 2,
            },
        ]
    }

    #[test]
    fn batch_generates_resumes_and_persists_partials() {
        /// Patient that errors on one profile.
        struct PickyPatient {
            fail_profile: String,
        }
        impl DialogueAgent for PickyPatient {
            fn speaker(&self) -> Speaker {
                Speaker::Patient
            }
            fn reply(
                &self,
                profile: &PatientProfile,
                transcript: &[Message],
            ) -> Result<String, HarnessError> {
                if profile.profile_id == self.fail_profile {
                    Err(HarnessError::Transport(TransportError::BadPayload(
                        "down".to_string(),
                    )))
                } else {
                    StubPatient::new("s").reply(profile, transcript)
                }
            }
        }

        let dir = tempfile::tempdir().unwrap();
        let profiles = profile_set();
        let therapist = StubTherapist;
        let picky = PickyPatient {
            fail_profile: "p2".to_string(),
        };
        let outcomes = run_batch(
            &jobs(),
            &profiles,
            &therapist,
            &[("sim-a".to_string(), &picky as &dyn DialogueAgent)],
            16,
            dir.path(),
        )
        .unwrap();
        assert_eq!(outcomes[0].generated, 2);
        assert_eq!(outcomes[0].failures.len(), 1);
        assert_eq!(outcomes[0].failures[0].conversation_id, "c2");
        let partial = outcomes[0].failures[0].partial_path.as_ref().unwrap();
        assert!(partial.exists());

        // second pass with a healthy patient fills in only the failed job
        let healthy = StubPatient::new("s");
        let outcomes = run_batch(
            &jobs(),
            &profiles,
            &therapist,
            &[("sim-a".to_string(), &healthy as &dyn DialogueAgent)],
            16,
            dir.path(),
        )
        .unwrap();
        assert_eq!(outcomes[0].reused, 2);
        assert_eq!(outcomes[0].generated, 1);
        assert!(outcomes[0].failures.is_empty());

        let corpus = load_corpus(&dir.path().join("sim-a.jsonl"), "sim-a", &profiles).unwrap();
        assert_eq!(corpus.conversations.len(), 3);
        assert_eq!(corpus.conversations[0].conversation_id, "c1");
        assert_eq!(corpus.conversations[1].turn_count, 3);
    }

    #[test]
    fn batch_with_no_jobs_writes_empty_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let profiles = profile_set();
        let patient = StubPatient::new("s");
        let outcomes = run_batch(
            &[],
            &profiles,
            &StubTherapist,
            &[("sim-a".to_string(), &patient as &dyn DialogueAgent)],
            16,
            dir.path(),
        )
        .unwrap();
        assert_eq!(outcomes[0].generated, 0);
        let raw = std::fs::read_to_string(dir.path().join("sim-a.jsonl")).unwrap();
        assert!(raw.is_empty());
    }
}
