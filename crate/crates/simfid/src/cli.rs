//! Command-line pipeline: ingest, generate, classify, evaluate, agreement,
//! report. One TOML config drives every subcommand; flags override config
//! keys. Exit codes: 0 success, 2 configuration error, 3 data error, 4
//! transport error.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::agreement::{evaluate_task, AgreementError, AgreementTask, TaskAgreement};
use crate::alignment::{
    aggregate_and_rank, diversity_similarity, length_similarity, marker_similarity,
    progression_divergence, wasserstein_1d, AlignmentError, Dimension, DimensionDetails,
    DimensionScore, LabelProgressionSeries, ScoreSet,
};
use crate::classify::{
    emotion_label_space, label_corpus, nep_label_space, ClassifyError, LabelStore,
    PromptClassifier, StubClassifier, TurnLabeler,
};
use crate::config::{
    AgentConfig, AgentKind, ClassifierConfig, ClassifierKind, ConfigError, LoadedConfig,
};
use crate::corpus::{
    load_corpus, load_profiles, save_corpus, Corpus, CorpusError, Speaker,
};
use crate::harness::{
    jobs_from_reference, run_batch, ChatAgent, DialogueAgent, HarnessError, StubPatient,
    StubTherapist,
};
use crate::http::{ChatClient, TransportError};
use crate::lexical::{
    length_stats, marker_stats, mtld, tokenize, LengthStats, LexicalError, MarkerCategory,
    MarkerLexicon, MarkerStats, TokenStream,
};
use crate::report::{
    self, MtldDistributionRow, ReportError, ReportMeta,
};
use crate::TOOL_VERSION;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_TRANSPORT: i32 = 4;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

fn config_err(message: impl Into<String>) -> CliError {
    CliError {
        code: EXIT_CONFIG,
        message: message.into(),
    }
}

fn data_err(message: impl Into<String>) -> CliError {
    CliError {
        code: EXIT_DATA,
        message: message.into(),
    }
}

fn transport_err(message: impl Into<String>) -> CliError {
    CliError {
        code: EXIT_TRANSPORT,
        message: message.into(),
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        config_err(e.to_string())
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        data_err(e.to_string())
    }
}

impl From<LexicalError> for CliError {
    fn from(e: LexicalError) -> Self {
        data_err(e.to_string())
    }
}

impl From<AlignmentError> for CliError {
    fn from(e: AlignmentError) -> Self {
        data_err(e.to_string())
    }
}

impl From<AgreementError> for CliError {
    fn from(e: AgreementError) -> Self {
        data_err(e.to_string())
    }
}

impl From<ReportError> for CliError {
    fn from(e: ReportError) -> Self {
        data_err(e.to_string())
    }
}

impl From<TransportError> for CliError {
    fn from(e: TransportError) -> Self {
        match e {
            TransportError::Config(_) => config_err(e.to_string()),
            _ => transport_err(e.to_string()),
        }
    }
}

fn classify_exit_code(e: &ClassifyError) -> i32 {
    match e {
        ClassifyError::Transport(_) | ClassifyError::UnparseableResponse { .. } => EXIT_TRANSPORT,
        ClassifyError::Cache { .. } => EXIT_DATA,
        ClassifyError::AtTurn { source, .. } => classify_exit_code(source),
    }
}

impl From<ClassifyError> for CliError {
    fn from(e: ClassifyError) -> Self {
        CliError {
            code: classify_exit_code(&e),
            message: e.to_string(),
        }
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Transport(_) | HarnessError::EmptyAgentReply { .. } => {
                transport_err(e.to_string())
            }
            HarnessError::Corpus(_) | HarnessError::Io { .. } => data_err(e.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(name = "simfid", version, about = "Patient-simulator fidelity benchmark")]
struct Cli {
    /// Run configuration file.
    #[arg(long, global = true, default_value = "simfid.toml")]
    config: PathBuf,
    /// Restrict the command to these settings (repeatable).
    #[arg(long = "setting", global = true)]
    setting: Vec<String>,
    /// Continue from existing outputs instead of refusing to overwrite.
    #[arg(long, global = true)]
    resume: bool,
    /// Diagnostics mode: keep filler and neutral labels in progressions.
    #[arg(long = "no-exclusion", global = true)]
    no_exclusion: bool,
    /// Marker lexicon JSON overriding the built-in lexicon.
    #[arg(long, global = true)]
    lexicon: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a raw conversation file and rewrite it in canonical form.
    Ingest {
        /// Raw conversations JSONL.
        #[arg(long)]
        input: PathBuf,
        /// Setting id every conversation must carry.
        #[arg(long = "setting-id")]
        setting_id: String,
        /// Canonical output path.
        #[arg(long)]
        output: PathBuf,
    },
    /// Simulate conversations for every configured setting.
    Generate,
    /// Label patient turns, filling the label cache.
    Classify,
    /// Score every setting against the reference corpus and write reports.
    Evaluate,
    /// Compute annotator-agreement statistics from an annotations CSV.
    Agreement {
        /// Annotations CSV (item_id, rater_id, task, label).
        #[arg(long)]
        annotations: Option<PathBuf>,
    },
    /// Re-render benchmark tables from a previous evaluation.
    Report,
}

struct App {
    loaded: LoadedConfig,
    resume: bool,
    /// Resolved lexicon path; `None` means the built-in lexicon.
    lexicon_path: Option<PathBuf>,
}

impl App {
    fn lexicon(&self) -> Result<MarkerLexicon, CliError> {
        match &self.lexicon_path {
            Some(path) => Ok(MarkerLexicon::from_json_file(path)?),
            None => Ok(MarkerLexicon::default()),
        }
    }

    fn meta(&self, lexicon: &MarkerLexicon) -> ReportMeta {
        ReportMeta {
            config_hash: self.loaded.hash(),
            lexicon_version: lexicon.version().to_string(),
            tool_version: TOOL_VERSION.to_string(),
        }
    }
}

pub fn run() -> i32 {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let mut loaded = LoadedConfig::load(&cli.config)?;
    if !cli.setting.is_empty() {
        loaded.config.evaluation.setting_filter = cli.setting.clone();
    }
    if cli.no_exclusion {
        loaded.config.evaluation.exclude_filler = false;
        loaded.config.evaluation.exclude_neutral = false;
    }
    // the flag enters the config (and so the hash) as typed, but resolves
    // against the invocation directory rather than the config directory
    let lexicon_path = match &cli.lexicon {
        Some(p) => {
            loaded.config.paths.lexicon = Some(p.display().to_string());
            Some(p.clone())
        }
        None => loaded
            .config
            .paths
            .lexicon
            .clone()
            .map(|s| loaded.path(&s)),
    };
    let app = App {
        loaded,
        resume: cli.resume,
        lexicon_path,
    };
    match cli.command {
        Command::Ingest {
            input,
            setting_id,
            output,
        } => cmd_ingest(&app, &input, &setting_id, &output),
        Command::Generate => cmd_generate(&app),
        Command::Classify => cmd_classify(&app),
        Command::Evaluate => cmd_evaluate(&app),
        Command::Agreement { annotations } => cmd_agreement(&app, annotations.as_deref()),
        Command::Report => cmd_report(&app),
    }
}

fn cmd_ingest(
    app: &App,
    input: &Path,
    setting_id: &str,
    output: &Path,
) -> Result<(), CliError> {
    let profiles = load_profiles(&app.loaded.path(&app.loaded.config.paths.profiles))?;
    let corpus = load_corpus(input, setting_id, &profiles)?;
    save_corpus(&corpus, output)?;
    println!(
        "ingested {} conversations ({} profiles) into {}",
        corpus.conversations.len(),
        corpus.profiles.len(),
        output.display()
    );
    Ok(())
}

fn build_labeler(
    cfg: &ClassifierConfig,
) -> Result<Option<Box<dyn TurnLabeler>>, CliError> {
    match cfg.kind {
        ClassifierKind::None => Ok(None),
        ClassifierKind::Stub => Ok(Some(Box::new(StubClassifier))),
        ClassifierKind::Http => {
            let endpoint = cfg
                .endpoint
                .clone()
                .ok_or_else(|| config_err("classifier.kind = \"http\" requires [classifier.endpoint]"))?;
            let client = ChatClient::new(endpoint)?;
            Ok(Some(Box::new(PromptClassifier::new(client))))
        }
    }
}

/// Simulated settings present on disk, sorted. A non-empty filter selects a
/// subset and every filtered name must exist.
fn discover_settings(
    simulated_dir: &Path,
    filter: &[String],
    reference_setting: &str,
) -> Result<Vec<String>, CliError> {
    let entries = std::fs::read_dir(simulated_dir).map_err(|e| {
        data_err(format!(
            "reading simulated corpora dir {}: {e}",
            simulated_dir.display()
        ))
    })?;
    let mut stems: Vec<String> = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| data_err(e.to_string()))?;
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) != Some("jsonl") || !path.is_file() {
            continue;
        }
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        if stem == reference_setting {
            return Err(data_err(format!(
                "simulated corpora dir contains the reference setting `{reference_setting}`"
            )));
        }
        stems.push(stem.to_string());
    }
    stems.sort();
    if !filter.is_empty() {
        for name in filter {
            if !stems.contains(name) {
                return Err(data_err(format!(
                    "setting `{name}` has no corpus in {}",
                    simulated_dir.display()
                )));
            }
        }
        stems.retain(|s| filter.contains(s));
    }
    if stems.is_empty() {
        return Err(data_err(format!(
            "no simulated corpora found in {}",
            simulated_dir.display()
        )));
    }
    Ok(stems)
}

fn cmd_classify(app: &App) -> Result<(), CliError> {
    let cfg = &app.loaded.config;
    let labeler = build_labeler(&cfg.classifier)?.ok_or_else(|| {
        config_err("classify requires classifier.kind = \"stub\" or \"http\"")
    })?;
    let profiles = load_profiles(&app.loaded.path(&cfg.paths.profiles))?;
    let reference = load_corpus(
        &app.loaded.path(&cfg.paths.real_corpus),
        &cfg.evaluation.reference_setting,
        &profiles,
    )?;
    let sim_dir = app.loaded.path(&cfg.paths.simulated_dir);
    let setting_ids = discover_settings(
        &sim_dir,
        &cfg.evaluation.setting_filter,
        &cfg.evaluation.reference_setting,
    )?;
    let mut corpora = vec![reference];
    for id in &setting_ids {
        corpora.push(load_corpus(&sim_dir.join(format!("{id}.jsonl")), id, &profiles)?);
    }
    let cache_dir = app.loaded.path(&cfg.paths.label_cache_dir);
    for corpus in &corpora {
        let mut store = LabelStore::open(&cache_dir.join(format!("{}.jsonl", corpus.setting_id)))?;
        let progress = label_corpus(
            corpus,
            labeler.as_ref(),
            &mut store,
            cfg.classifier.in_flight,
        )?;
        println!(
            "{}: {} turns labelled, {} reused from cache",
            corpus.setting_id, progress.queried, progress.reused
        );
    }
    Ok(())
}

fn resolve_system_prompt(
    agent: &AgentConfig,
    loaded: &LoadedConfig,
    who: &str,
) -> Result<String, CliError> {
    if let Some(prompt) = &agent.system_prompt {
        return Ok(prompt.clone());
    }
    if let Some(file) = &agent.system_prompt_file {
        let path = loaded.path(file);
        return std::fs::read_to_string(&path)
            .map_err(|e| config_err(format!("{who}: reading {}: {e}", path.display())));
    }
    Err(config_err(format!(
        "{who}: an http agent needs system_prompt or system_prompt_file"
    )))
}

fn build_chat_agent(
    speaker: Speaker,
    agent: &AgentConfig,
    loaded: &LoadedConfig,
    who: &str,
) -> Result<Box<dyn DialogueAgent>, CliError> {
    let endpoint = agent
        .endpoint
        .clone()
        .ok_or_else(|| config_err(format!("{who}: an http agent needs an endpoint")))?;
    let prompt = resolve_system_prompt(agent, loaded, who)?;
    Ok(Box::new(ChatAgent::new(
        speaker,
        ChatClient::new(endpoint)?,
        prompt,
        agent.temperature,
        agent.max_tokens,
    )))
}

fn cmd_generate(app: &App) -> Result<(), CliError> {
    let cfg = &app.loaded.config;
    let filter = &cfg.evaluation.setting_filter;
    let selected: Vec<_> = cfg
        .generation
        .settings
        .iter()
        .filter(|s| filter.is_empty() || filter.contains(&s.setting_id))
        .collect();
    if !filter.is_empty() {
        for name in filter {
            if !selected.iter().any(|s| s.setting_id == *name) {
                return Err(config_err(format!(
                    "setting `{name}` is not configured under [[generation.settings]]"
                )));
            }
        }
    }
    if selected.is_empty() {
        return Err(config_err(
            "no settings configured under [[generation.settings]]",
        ));
    }

    let sim_dir = app.loaded.path(&cfg.paths.simulated_dir);
    if !app.resume {
        for setting in &selected {
            let path = sim_dir.join(format!("{}.jsonl", setting.setting_id));
            if path.exists() {
                return Err(config_err(format!(
                    "{} already exists; pass --resume to continue or remove it",
                    path.display()
                )));
            }
        }
    }

    let profiles = load_profiles(&app.loaded.path(&cfg.paths.profiles))?;
    let reference = load_corpus(
        &app.loaded.path(&cfg.paths.real_corpus),
        &cfg.evaluation.reference_setting,
        &profiles,
    )?;
    let jobs = jobs_from_reference(&reference);

    let therapist: Box<dyn DialogueAgent> = match cfg.generation.therapist.kind {
        AgentKind::Stub => Box::new(StubTherapist),
        AgentKind::Http => build_chat_agent(
            Speaker::Therapist,
            &cfg.generation.therapist,
            &app.loaded,
            "therapist",
        )?,
    };
    let mut patients: Vec<(String, Box<dyn DialogueAgent>)> = Vec::new();
    for setting in &selected {
        let agent: Box<dyn DialogueAgent> = match setting.agent.kind {
            AgentKind::Stub => Box::new(StubPatient::new(setting.setting_id.clone())),
            AgentKind::Http => build_chat_agent(
                Speaker::Patient,
                &setting.agent,
                &app.loaded,
                &format!("setting `{}`", setting.setting_id),
            )?,
        };
        patients.push((setting.setting_id.clone(), agent));
    }
    let patient_refs: Vec<(String, &dyn DialogueAgent)> = patients
        .iter()
        .map(|(id, agent)| (id.clone(), agent.as_ref()))
        .collect();

    let lexicon = app.lexicon()?;
    write_manifest(app, &lexicon, &sim_dir, &patient_refs, &jobs)?;

    let outcomes = run_batch(
        &jobs,
        &profiles,
        therapist.as_ref(),
        &patient_refs,
        cfg.generation.turn_cap,
        &sim_dir,
    )?;
    let mut failed = 0usize;
    for outcome in &outcomes {
        println!(
            "{}: {} generated, {} reused, {} failed",
            outcome.setting_id,
            outcome.generated,
            outcome.reused,
            outcome.failures.len()
        );
        for failure in &outcome.failures {
            failed += 1;
            eprintln!(
                "  {} failed: {}{}",
                failure.conversation_id,
                failure.detail,
                failure
                    .partial_path
                    .as_ref()
                    .map(|p| format!(" (partial: {})", p.display()))
                    .unwrap_or_default()
            );
        }
    }
    if failed > 0 {
        return Err(transport_err(format!(
            "{failed} conversations failed; rerun with --resume to retry them"
        )));
    }
    Ok(())
}

fn write_manifest(
    app: &App,
    lexicon: &MarkerLexicon,
    sim_dir: &Path,
    patients: &[(String, &dyn DialogueAgent)],
    jobs: &[crate::harness::GenerationJob],
) -> Result<(), CliError> {
    #[derive(serde::Serialize)]
    struct Manifest<'a> {
        meta: ReportMeta,
        turn_cap: usize,
        settings: Vec<&'a str>,
        jobs: &'a [crate::harness::GenerationJob],
    }
    let manifest = Manifest {
        meta: app.meta(lexicon),
        turn_cap: app.loaded.config.generation.turn_cap,
        settings: patients.iter().map(|(id, _)| id.as_str()).collect(),
        jobs,
    };
    std::fs::create_dir_all(sim_dir)
        .map_err(|e| data_err(format!("{}: {e}", sim_dir.display())))?;
    let path = sim_dir.join("manifest.json");
    let mut bytes = serde_json::to_vec_pretty(&manifest).expect("manifest serialises");
    bytes.push(b'\n');
    std::fs::write(&path, bytes).map_err(|e| data_err(format!("{}: {e}", path.display())))
}

/// Everything evaluation needs from one corpus.
struct SettingEval {
    setting_id: String,
    nep: LabelProgressionSeries,
    emotion: LabelProgressionSeries,
    length: LengthStats,
    markers: MarkerStats,
    mtld_rows: Vec<MtldDistributionRow>,
    /// Scores of conversations past the token floor.
    included_scores: Vec<f64>,
    corpus_mtld: f64,
}

fn sole_classifier_id(store: &LabelStore, setting_id: &str) -> Result<String, CliError> {
    let ids: BTreeSet<&str> = store.records().map(|r| r.classifier_id.as_str()).collect();
    match ids.len() {
        0 => Err(data_err(format!(
            "label cache for `{setting_id}` is empty; run `simfid classify` or configure a classifier"
        ))),
        1 => Ok(ids.into_iter().next().expect("one id").to_string()),
        _ => Err(data_err(format!(
            "label cache for `{setting_id}` mixes classifiers ({}); configure classifier.kind to pick one",
            ids.into_iter().collect::<Vec<_>>().join(", ")
        ))),
    }
}

fn build_setting_eval(
    app: &App,
    corpus: &Corpus,
    store: &LabelStore,
    classifier_id: &str,
    lexicon: &MarkerLexicon,
) -> Result<SettingEval, CliError> {
    let eval = &app.loaded.config.evaluation;
    let setting_id = corpus.setting_id.clone();
    let with_setting = |e: AlignmentError| {
        let mut err = CliError::from(e);
        err.message = format!("setting `{setting_id}`: {}", err.message);
        if err.message.contains("lack labels") {
            err.message.push_str("; run `simfid classify` or configure a classifier");
        }
        err
    };

    let nep_exclusions: Vec<&str> = if eval.exclude_filler { vec!["F"] } else { Vec::new() };
    let emotion_exclusions: Vec<&str> = if eval.exclude_neutral {
        vec!["neutral"]
    } else {
        Vec::new()
    };
    let nep = crate::alignment::build_progression(
        corpus,
        &nep_label_space(),
        eval.turn_horizon,
        &nep_exclusions,
        |conversation_id, turn_index| {
            store
                .get(conversation_id, turn_index, classifier_id)
                .map(|r| r.nep.letter().to_string())
        },
    )
    .map_err(with_setting)?;
    let emotion = crate::alignment::build_progression(
        corpus,
        &emotion_label_space(),
        eval.turn_horizon,
        &emotion_exclusions,
        |conversation_id, turn_index| {
            store
                .get(conversation_id, turn_index, classifier_id)
                .map(|r| r.emotion.name().to_string())
        },
    )
    .map_err(with_setting)?;

    let mut mtld_rows = Vec::with_capacity(corpus.conversations.len());
    let mut included_scores = Vec::new();
    let mut pooled = TokenStream::new(Vec::new());
    for conv in &corpus.conversations {
        let mut tokens = TokenStream::new(Vec::new());
        for (_, text) in conv.patient_turns() {
            tokens.extend(&tokenize(text));
        }
        pooled.extend(&tokens);
        // a conversation whose patient text is pure punctuation has no
        // tokens; it stays in the report but never in the distribution
        let (score, token_count, included) =
            match mtld(&tokens, eval.mtld_threshold, eval.mtld_min_tokens) {
                Ok(r) => (r.score, r.token_count, r.included),
                Err(_) => (0.0, 0, false),
            };
        if included {
            included_scores.push(score);
        }
        mtld_rows.push(MtldDistributionRow {
            setting_id: setting_id.clone(),
            conversation_id: conv.conversation_id.clone(),
            score,
            token_count,
            included,
        });
    }
    let corpus_mtld = mtld(&pooled, eval.mtld_threshold, eval.mtld_min_tokens)
        .map(|r| r.score)
        .unwrap_or(0.0);

    let length = length_stats(corpus.patient_texts()).map_err(|e| {
        data_err(format!("setting `{setting_id}`: {e}"))
    })?;
    let markers = marker_stats(corpus.patient_texts(), lexicon);

    Ok(SettingEval {
        setting_id,
        nep,
        emotion,
        length,
        markers,
        mtld_rows,
        included_scores,
        corpus_mtld,
    })
}

fn cmd_evaluate(app: &App) -> Result<(), CliError> {
    let cfg = &app.loaded.config;
    let eval = &cfg.evaluation;
    let profiles = load_profiles(&app.loaded.path(&cfg.paths.profiles))?;
    let reference = load_corpus(
        &app.loaded.path(&cfg.paths.real_corpus),
        &eval.reference_setting,
        &profiles,
    )?;
    let sim_dir = app.loaded.path(&cfg.paths.simulated_dir);
    let setting_ids = discover_settings(&sim_dir, &eval.setting_filter, &eval.reference_setting)?;
    let mut corpora = vec![reference];
    for id in &setting_ids {
        corpora.push(load_corpus(&sim_dir.join(format!("{id}.jsonl")), id, &profiles)?);
    }

    let lexicon = app.lexicon()?;
    let labeler = build_labeler(&cfg.classifier)?;
    let cache_dir = app.loaded.path(&cfg.paths.label_cache_dir);
    let mut evals: Vec<SettingEval> = Vec::with_capacity(corpora.len());
    for corpus in &corpora {
        let mut store =
            LabelStore::open(&cache_dir.join(format!("{}.jsonl", corpus.setting_id)))?;
        if let Some(labeler) = &labeler {
            let progress = label_corpus(
                corpus,
                labeler.as_ref(),
                &mut store,
                cfg.classifier.in_flight,
            )?;
            if progress.queried > 0 {
                eprintln!(
                    "{}: labelled {} turns ({} reused)",
                    corpus.setting_id, progress.queried, progress.reused
                );
            }
        }
        let classifier_id = match &labeler {
            Some(l) => l.classifier_id(),
            None => sole_classifier_id(&store, &corpus.setting_id)?,
        };
        evals.push(build_setting_eval(app, corpus, &store, &classifier_id, &lexicon)?);
    }

    let (reference_eval, setting_evals) = evals.split_first().expect("reference present");
    if reference_eval.included_scores.is_empty() {
        return Err(data_err(format!(
            "reference corpus has no conversation with at least {} patient tokens; \
             lower evaluation.mtld_min_tokens or extend the corpus",
            eval.mtld_min_tokens
        )));
    }
    let mut distances: BTreeMap<String, f64> = BTreeMap::new();
    for ev in setting_evals {
        if ev.included_scores.is_empty() {
            return Err(data_err(format!(
                "setting `{}` has no conversation with at least {} patient tokens",
                ev.setting_id, eval.mtld_min_tokens
            )));
        }
        let d = wasserstein_1d(&ev.included_scores, &reference_eval.included_scores)?;
        distances.insert(ev.setting_id.clone(), d);
    }
    let diversity_scores = diversity_similarity(&distances).map_err(|e| match e {
        AlignmentError::DegenerateRange => data_err(
            "every setting matches the reference diversity exactly; min-max \
             normalisation is undefined",
        ),
        other => other.into(),
    })?;
    let d_max = distances.values().copied().fold(f64::MIN, f64::max);

    let mut all_scores: BTreeMap<String, ScoreSet> = BTreeMap::new();
    for ev in setting_evals {
        let with_setting = |e: AlignmentError| {
            data_err(format!("setting `{}`: {e}", ev.setting_id))
        };
        let mut set = ScoreSet::new();

        let nep_cmp = progression_divergence(&ev.nep, &reference_eval.nep).map_err(with_setting)?;
        set.insert(
            Dimension::Nep,
            DimensionScore {
                dimension: Dimension::Nep,
                similarity: nep_cmp.similarity,
                details: DimensionDetails::Progression {
                    turns_compared: nep_cmp.turns_compared,
                    mean_jsd: nep_cmp.distance / 100.0,
                    excluded_labels: excluded_of(&nep_label_space(), &ev.nep.label_space),
                },
            },
        );
        let emo_cmp =
            progression_divergence(&ev.emotion, &reference_eval.emotion).map_err(with_setting)?;
        set.insert(
            Dimension::Emotion,
            DimensionScore {
                dimension: Dimension::Emotion,
                similarity: emo_cmp.similarity,
                details: DimensionDetails::Progression {
                    turns_compared: emo_cmp.turns_compared,
                    mean_jsd: emo_cmp.distance / 100.0,
                    excluded_labels: excluded_of(&emotion_label_space(), &ev.emotion.label_space),
                },
            },
        );

        let distance = distances[&ev.setting_id];
        set.insert(
            Dimension::Diversity,
            DimensionScore {
                dimension: Dimension::Diversity,
                similarity: diversity_scores[&ev.setting_id],
                details: DimensionDetails::Diversity {
                    distance,
                    max_distance: d_max,
                    score_mean: mean(&ev.included_scores),
                    score_std: std_dev(&ev.included_scores),
                    corpus_level_score: ev.corpus_mtld,
                    conversations_included: ev.included_scores.len(),
                    conversations_total: ev.mtld_rows.len(),
                },
            },
        );

        let len_cmp =
            length_similarity(&ev.length, &reference_eval.length).map_err(with_setting)?;
        set.insert(
            Dimension::Length,
            DimensionScore {
                dimension: Dimension::Length,
                similarity: len_cmp.similarity,
                details: DimensionDetails::Length {
                    words_per_message: ev.length.words_per_message,
                    words_per_sentence: ev.length.words_per_sentence,
                    reference_words_per_message: reference_eval.length.words_per_message,
                    reference_words_per_sentence: reference_eval.length.words_per_sentence,
                    words_per_message_similarity: len_cmp.words_per_message_similarity,
                    words_per_sentence_similarity: len_cmp.words_per_sentence_similarity,
                },
            },
        );

        let marker_cmp =
            marker_similarity(&ev.markers, &reference_eval.markers).map_err(with_setting)?;
        let per_category = MarkerCategory::ALL
            .iter()
            .map(|&cat| (cat.name().to_string(), *ev.markers.category(cat)))
            .collect();
        set.insert(
            Dimension::Markers,
            DimensionScore {
                dimension: Dimension::Markers,
                similarity: marker_cmp.similarity,
                details: DimensionDetails::Markers {
                    rate_ptk: ev.markers.overall.rate_ptk,
                    prevalence_msg: ev.markers.overall.prevalence_msg,
                    reference_rate_ptk: reference_eval.markers.overall.rate_ptk,
                    reference_prevalence_msg: reference_eval.markers.overall.prevalence_msg,
                    rate_relative_diff: marker_cmp.rate_relative_diff,
                    prevalence_abs_diff: marker_cmp.prevalence_abs_diff,
                    per_category,
                },
            },
        );

        all_scores.insert(ev.setting_id.clone(), set);
    }
    let ranking = aggregate_and_rank(all_scores)?;

    let meta = app.meta(&lexicon);
    let out_dir = app.loaded.path(&cfg.paths.output_dir);
    report::write_benchmark_json(&out_dir, &meta, &ranking)?;
    report::write_benchmark_markdown(&out_dir, &meta, &ranking)?;
    report::write_benchmark_csv(&out_dir, &meta, &ranking)?;
    for row in &ranking.rows {
        report::write_setting_scores(&out_dir, &meta, row)?;
    }
    for ev in &evals {
        report::write_progression_csv(&out_dir, &meta, Dimension::Nep, &ev.setting_id, &ev.nep)?;
        report::write_progression_csv(
            &out_dir,
            &meta,
            Dimension::Emotion,
            &ev.setting_id,
            &ev.emotion,
        )?;
    }
    let mtld_rows: Vec<MtldDistributionRow> = evals
        .iter()
        .flat_map(|ev| ev.mtld_rows.iter().cloned())
        .collect();
    report::write_mtld_distribution(&out_dir, &meta, &mtld_rows)?;

    print!("{}", report::render_benchmark_markdown(&meta, &ranking));
    Ok(())
}

fn excluded_of(full_space: &[&str], kept: &[String]) -> Vec<String> {
    full_space
        .iter()
        .filter(|l| !kept.iter().any(|k| k == **l))
        .map(|l| l.to_string())
        .collect()
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

fn std_dev(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / values.len() as f64).sqrt()
}

fn cmd_agreement(app: &App, annotations: Option<&Path>) -> Result<(), CliError> {
    let cfg = &app.loaded.config;
    let path = match annotations {
        Some(p) => p.to_path_buf(),
        None => cfg
            .paths
            .annotations
            .clone()
            .map(|s| app.loaded.path(&s))
            .ok_or_else(|| {
                config_err("no annotations file; pass --annotations or set paths.annotations")
            })?,
    };
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(&path)
        .map_err(|e| data_err(format!("{}: {e}", path.display())))?;
    #[derive(serde::Deserialize)]
    struct AnnotationRow {
        item_id: String,
        rater_id: String,
        task: String,
        label: String,
    }
    let mut by_task: BTreeMap<AgreementTask, Vec<(String, String, String)>> = BTreeMap::new();
    for (i, row) in reader.deserialize::<AnnotationRow>().enumerate() {
        let row = row.map_err(|e| data_err(format!("{} row {}: {e}", path.display(), i + 1)))?;
        let task = AgreementTask::parse(&row.task).ok_or_else(|| {
            data_err(format!(
                "{} row {}: unknown task `{}`",
                path.display(),
                i + 1,
                row.task
            ))
        })?;
        by_task
            .entry(task)
            .or_default()
            .push((row.item_id, row.rater_id, row.label));
    }
    if by_task.is_empty() {
        return Err(data_err(format!("{} contains no annotations", path.display())));
    }

    let model_rater_id = &cfg.agreement.model_rater_id;
    let mut tasks: Vec<TaskAgreement> = Vec::new();
    for (task, records) in by_task {
        let result = evaluate_task(task, records, model_rater_id)
            .map_err(|e| data_err(format!("task {}: {e}", task.name())))?;
        println!(
            "{}: {:.2}% agreement, cohen {:.4}, fleiss {:.4}, pairwise {:.2}% \
             ({} items, {} excluded, {} tied)",
            task.name(),
            result.percent_agreement,
            result.cohens_kappa,
            result.fleiss_kappa,
            result.mean_pairwise_agreement,
            result.items_total,
            result.items_excluded_other,
            result.items_tied,
        );
        tasks.push(result);
    }
    let lexicon = app.lexicon()?;
    let out_dir = app.loaded.path(&cfg.paths.output_dir);
    let written = report::write_agreement_json(&out_dir, &app.meta(&lexicon), &tasks)?;
    eprintln!("wrote {}", written.display());
    Ok(())
}

fn cmd_report(app: &App) -> Result<(), CliError> {
    let out_dir = app.loaded.path(&app.loaded.config.paths.output_dir);
    let path = out_dir.join("benchmark.json");
    if !path.exists() {
        return Err(data_err(format!(
            "{} not found; run `simfid evaluate` first",
            path.display()
        )));
    }
    let saved = report::read_benchmark_json(&path)?;
    report::write_benchmark_markdown(&out_dir, &saved.meta, &saved.ranking)?;
    report::write_benchmark_csv(&out_dir, &saved.meta, &saved.ranking)?;
    print!(
        "{}",
        report::render_benchmark_markdown(&saved.meta, &saved.ranking)
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn discover_settings_sorts_and_filters() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["sim-b.jsonl", "sim-a.jsonl", "manifest.json", "notes.txt"] {
            std::fs::write(dir.path().join(name), "").unwrap();
        }
        let found = discover_settings(dir.path(), &[], "human").unwrap();
        assert_eq!(found, vec!["sim-a", "sim-b"]);

        let filtered =
            discover_settings(dir.path(), &["sim-b".to_string()], "human").unwrap();
        assert_eq!(filtered, vec!["sim-b"]);

        let missing = discover_settings(dir.path(), &["sim-c".to_string()], "human");
        assert_eq!(missing.unwrap_err().code, EXIT_DATA);
    }

    #[test]
    fn discover_settings_rejects_reference_collision_and_empty_dir() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("human.jsonl"), "").unwrap();
        let err = discover_settings(dir.path(), &[], "human").unwrap_err();
        assert_eq!(err.code, EXIT_DATA);

        let empty = tempfile::tempdir().unwrap();
        let err = discover_settings(empty.path(), &[], "human").unwrap_err();
        assert_eq!(err.code, EXIT_DATA);
    }

    #[test]
    fn error_codes_follow_error_kind() {
        assert_eq!(CliError::from(ConfigError("x".to_string())).code, EXIT_CONFIG);
        assert_eq!(
            CliError::from(TransportError::Config("bad url".to_string())).code,
            EXIT_CONFIG
        );
        assert_eq!(
            CliError::from(TransportError::BadPayload("no choices".to_string())).code,
            EXIT_TRANSPORT
        );
        let nested = ClassifyError::AtTurn {
            conversation_id: "c1".to_string(),
            turn_index: 2,
            source: Box::new(ClassifyError::UnparseableResponse {
                task: "x",
                response: "??".to_string(),
            }),
        };
        assert_eq!(CliError::from(nested).code, EXIT_TRANSPORT);
        let cache = ClassifyError::Cache {
            path: "p".to_string(),
            detail: "d".to_string(),
        };
        assert_eq!(CliError::from(cache).code, EXIT_DATA);
    }

    #[test]
    fn summary_stats_are_population_flavoured() {
        assert_eq!(mean(&[]), 0.0);
        assert_eq!(mean(&[2.0, 4.0]), 3.0);
        assert_eq!(std_dev(&[5.0]), 0.0);
        assert!((std_dev(&[2.0, 4.0]) - 1.0).abs() < 1e-12);
    }
}
