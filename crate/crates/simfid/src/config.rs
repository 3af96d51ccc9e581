//! Run configuration: a TOML file describing corpora locations, evaluation
//! parameters, classifier and generation endpoints. Relative paths resolve
//! against the config file's directory, so a run tree can be moved or copied
//! without edits and still produce identical outputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::http::EndpointConfig;

#[derive(Debug, Error)]
#[error("config: {0}")]
pub struct ConfigError(pub String);

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: PathsConfig,
    pub evaluation: EvaluationConfig,
    pub classifier: ClassifierConfig,
    pub generation: GenerationConfig,
    pub agreement: AgreementConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Reference corpus of real conversations.
    pub real_corpus: String,
    /// Directory of simulated corpora, one `<setting_id>.jsonl` per setting.
    pub simulated_dir: String,
    pub profiles: String,
    pub label_cache_dir: String,
    pub output_dir: String,
    /// Marker lexicon JSON; unset means the built-in lexicon.
    pub lexicon: Option<String>,
    /// Agreement annotations CSV.
    pub annotations: Option<String>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            real_corpus: "data/real.jsonl".to_string(),
            simulated_dir: "data/simulated".to_string(),
            profiles: "data/profiles.jsonl".to_string(),
            label_cache_dir: "label-cache".to_string(),
            output_dir: "out".to_string(),
            lexicon: None,
            annotations: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    /// Turn horizon for progression comparison.
    pub turn_horizon: usize,
    pub mtld_threshold: f64,
    pub mtld_min_tokens: usize,
    /// Drop filler turns from narrative-stage progressions.
    pub exclude_filler: bool,
    /// Drop neutral turns from emotion progressions.
    pub exclude_neutral: bool,
    pub reference_setting: String,
    /// When non-empty, only these settings are evaluated.
    pub setting_filter: Vec<String>,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            turn_horizon: 16,
            mtld_threshold: 0.72,
            mtld_min_tokens: 100,
            exclude_filler: true,
            exclude_neutral: true,
            reference_setting: "human".to_string(),
            setting_filter: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassifierKind {
    /// Labels must already be cached; evaluation never queries.
    None,
    /// Offline keyword classifier.
    Stub,
    /// Remote chat endpoint.
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub kind: ClassifierKind,
    pub endpoint: Option<EndpointConfig>,
    /// Concurrent classification requests.
    pub in_flight: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            kind: ClassifierKind::None,
            endpoint: None,
            in_flight: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentKind {
    Stub,
    Http,
}

/// How one side of a generated dialogue is driven. `system_prompt` may use a
/// `{profile}` slot. Settings without their own values inherit these
/// defaults from deserialisation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    pub kind: AgentKind,
    pub endpoint: Option<EndpointConfig>,
    pub system_prompt: Option<String>,
    pub system_prompt_file: Option<String>,
    pub temperature: f64,
    pub max_tokens: Option<u32>,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            kind: AgentKind::Stub,
            endpoint: None,
            system_prompt: None,
            system_prompt_file: None,
            temperature: 0.7,
            max_tokens: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SettingAgentConfig {
    pub setting_id: String,
    #[serde(flatten)]
    pub agent: AgentConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    /// Hard ceiling on patient turns per generated conversation.
    pub turn_cap: usize,
    pub therapist: AgentConfig,
    /// Patient simulators, one per setting.
    pub settings: Vec<SettingAgentConfig>,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            turn_cap: 16,
            therapist: AgentConfig::default(),
            settings: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgreementConfig {
    /// Rater id in the annotations CSV whose labels come from the automated
    /// classifier.
    pub model_rater_id: String,
}

impl Default for AgreementConfig {
    fn default() -> Self {
        AgreementConfig {
            model_rater_id: "model".to_string(),
        }
    }
}

/// A parsed config plus the directory its relative paths resolve against.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub base_dir: PathBuf,
}

impl LoadedConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        let config: RunConfig = toml::from_str(&raw)
            .map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        let base_dir = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        let loaded = LoadedConfig { config, base_dir };
        loaded.validate()?;
        Ok(loaded)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let c = &self.config;
        if c.evaluation.turn_horizon == 0 {
            return Err(ConfigError("turn_horizon must be at least 1".to_string()));
        }
        if !(c.evaluation.mtld_threshold > 0.0 && c.evaluation.mtld_threshold < 1.0) {
            return Err(ConfigError(
                "mtld_threshold must lie strictly between 0 and 1".to_string(),
            ));
        }
        if c.evaluation.mtld_min_tokens == 0 {
            return Err(ConfigError("mtld_min_tokens must be at least 1".to_string()));
        }
        if c.evaluation.reference_setting.is_empty() {
            return Err(ConfigError("reference_setting must be set".to_string()));
        }
        if c.classifier.in_flight == 0 {
            return Err(ConfigError("in_flight must be at least 1".to_string()));
        }
        if c.classifier.kind == ClassifierKind::Http {
            match &c.classifier.endpoint {
                None => {
                    return Err(ConfigError(
                        "classifier.kind = \"http\" requires [classifier.endpoint]".to_string(),
                    ))
                }
                Some(e) if e.model.is_empty() => {
                    return Err(ConfigError("classifier endpoint model must be set".to_string()))
                }
                _ => {}
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for setting in &c.generation.settings {
            if setting.setting_id.is_empty() {
                return Err(ConfigError("generation setting_id must be non-empty".to_string()));
            }
            if setting.setting_id == c.evaluation.reference_setting {
                return Err(ConfigError(format!(
                    "generation setting `{}` collides with the reference setting",
                    setting.setting_id
                )));
            }
            if !seen.insert(&setting.setting_id) {
                return Err(ConfigError(format!(
                    "duplicate generation setting `{}`",
                    setting.setting_id
                )));
            }
            validate_agent(&setting.agent, &format!("setting `{}`", setting.setting_id))?;
        }
        validate_agent(&c.generation.therapist, "therapist")?;
        if c.generation.turn_cap == 0 {
            return Err(ConfigError("turn_cap must be at least 1".to_string()));
        }
        Ok(())
    }

    /// Resolves a configured path against the config file's directory.
    pub fn path(&self, configured: &str) -> PathBuf {
        let p = Path::new(configured);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Digest of the effective configuration (after CLI overrides). Paths are
    /// hashed as written, so relocating a run tree keeps the hash stable.
    pub fn hash(&self) -> String {
        let serialised = toml::to_string(&self.config).expect("config serialises");
        hex::encode(&Sha256::digest(serialised.as_bytes())[..8])
    }
}

fn validate_agent(agent: &AgentConfig, who: &str) -> Result<(), ConfigError> {
    if agent.kind == AgentKind::Http {
        match &agent.endpoint {
            None => {
                return Err(ConfigError(format!(
                    "{who}: kind = \"http\" requires an endpoint"
                )))
            }
            Some(e) if e.model.is_empty() => {
                return Err(ConfigError(format!("{who}: endpoint model must be set")))
            }
            _ => {}
        }
    }
    if agent.system_prompt.is_some() && agent.system_prompt_file.is_some() {
        return Err(ConfigError(format!(
            "{who}: system_prompt and system_prompt_file are mutually exclusive"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_documented_values() {
        let c = RunConfig::default();
        assert_eq!(c.evaluation.turn_horizon, 16);
        assert_eq!(c.evaluation.mtld_threshold, 0.72);
        assert_eq!(c.evaluation.mtld_min_tokens, 100);
        assert!(c.evaluation.exclude_filler);
        assert!(c.evaluation.exclude_neutral);
        assert_eq!(c.evaluation.reference_setting, "human");
        assert_eq!(c.classifier.in_flight, 1);
        assert_eq!(c.agreement.model_rater_id, "model");
    }

    #[test]
    fn load_resolves_relative_paths_against_config_dir() {
        let dir = tempfile::tempdir().unwrap();
        let nested = dir.path().join("runs");
        std::fs::create_dir_all(&nested).unwrap();
        let path = nested.join("run.toml");
        std::fs::write(&path, "[paths]\nreal_corpus = \"data/h.jsonl\"\n").unwrap();
        let loaded = LoadedConfig::load(&path).unwrap();
        assert_eq!(
            loaded.path(&loaded.config.paths.real_corpus),
            nested.join("data/h.jsonl")
        );
    }

    #[test]
    fn load_rejects_unknown_keys_and_bad_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "[evaluation]\nturn_horizont = 12\n").unwrap();
        assert!(LoadedConfig::load(&path).is_err());
        std::fs::write(&path, "[evaluation]\nmtld_threshold = 1.5\n").unwrap();
        assert!(LoadedConfig::load(&path).is_err());
        std::fs::write(&path, "[classifier]\nkind = \"http\"\n").unwrap();
        assert!(LoadedConfig::load(&path).is_err());
    }

    #[test]
    fn hash_is_stable_across_locations_and_sensitive_to_content() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a/run.toml");
        let b = dir.path().join("b/run.toml");
        std::fs::create_dir_all(a.parent().unwrap()).unwrap();
        std::fs::create_dir_all(b.parent().unwrap()).unwrap();
        let body = "[evaluation]\nturn_horizon = 12\n";
        std::fs::write(&a, body).unwrap();
        std::fs::write(&b, body).unwrap();
        let la = LoadedConfig::load(&a).unwrap();
        let lb = LoadedConfig::load(&b).unwrap();
        assert_eq!(la.hash(), lb.hash());

        let mut changed = la.clone();
        changed.config.evaluation.turn_horizon = 13;
        assert_ne!(la.hash(), changed.hash());
    }

    #[test]
    fn generation_settings_must_be_unique_and_distinct_from_reference() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(
            &path,
            concat!(
                "[[generation.settings]]\nsetting_id = \"sim-a\"\n",
                "[[generation.settings]]\nsetting_id = \"sim-a\"\n",
            ),
        )
        .unwrap();
        assert!(LoadedConfig::load(&path).is_err());
        std::fs::write(
            &path,
            "[[generation.settings]]\nsetting_id = \"human\"\n",
        )
        .unwrap();
        assert!(LoadedConfig::load(&path).is_err());
    }
}
