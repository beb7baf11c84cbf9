//! Session configuration files and the end-to-end simulation driver.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::clients::{ClientId, MarkovToyClient, PrivateDataset, ScriptedClient, TrainingWeights};
use crate::consensus::{ClusterParams, SelectionStrategy};
use crate::encoder::{splitmix64, EmbeddingSource, EncoderConfig, ExternalEmbeddings, HashingEncoder};
use crate::error::{Error, Result};
use crate::privacy::LedgerTotal;
use crate::protocol::{run_session, DpSettings, Participant, ProtocolParams, PublicPromptSet};

pub const DEFAULT_PROMPT_BUDGET: usize = 500;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientSpec {
    Scripted {
        script: PathBuf,
        /// Row `client` value to read from the script; defaults to the position in the list.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        client: Option<u32>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        private: Option<PathBuf>,
    },
    Markov {
        order: usize,
        /// Defaults to a value derived from the session seed and the client index.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        private: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StrategyName {
    #[default]
    Centroid,
    Random,
    GlobalMedoid,
}

impl StrategyName {
    pub fn with_seed(self, seed: u64) -> SelectionStrategy {
        match self {
            StrategyName::Centroid => SelectionStrategy::CentroidRepresentative,
            StrategyName::Random => SelectionStrategy::RandomInMajorityCluster { seed },
            StrategyName::GlobalMedoid => SelectionStrategy::GlobalMedoid,
        }
    }
}

impl std::str::FromStr for StrategyName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "centroid" => Ok(Self::Centroid),
            "random" => Ok(Self::Random),
            "global_medoid" | "medoid" => Ok(Self::GlobalMedoid),
            other => Err(Error::invalid(
                "strategy",
                format!("unknown strategy {other:?}; expected centroid, random or global_medoid"),
            )),
        }
    }
}

fn default_prompt_budget() -> usize {
    DEFAULT_PROMPT_BUDGET
}

fn default_eps() -> f64 {
    ClusterParams::default().eps
}

fn default_min_pts() -> usize {
    ClusterParams::default().min_pts
}

fn default_max_tokens() -> usize {
    ProtocolParams::default().max_tokens
}

/// Everything needed to reproduce a simulated session. Relative paths are
/// resolved against the directory holding the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionConfig {
    pub clients: Vec<ClientSpec>,
    pub rounds: u32,
    pub prompt_file: PathBuf,
    #[serde(default = "default_prompt_budget")]
    pub prompt_budget: usize,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_min_pts")]
    pub min_pts: usize,
    #[serde(default)]
    pub strategy: StrategyName,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub weights: TrainingWeights,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: usize,
    #[serde(default)]
    pub skip_pre_update_after_first_round: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dp: Option<DpSettings>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    /// Precomputed embeddings keyed by `round:client:prompt_id`, replacing the hashing encoder.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embeddings_file: Option<PathBuf>,
    #[serde(skip)]
    base_dir: PathBuf,
}

impl SessionConfig {
    /// Parse TOML, or JSON when the file extension is `.json`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: SessionConfig = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_base_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.base_dir = dir.into();
        self
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn protocol_params(&self) -> ProtocolParams {
        ProtocolParams {
            cluster: ClusterParams {
                eps: self.eps,
                min_pts: self.min_pts,
            },
            strategy: self.strategy.with_seed(self.seed),
            weights: self.weights,
            max_tokens: self.max_tokens,
            skip_pre_update_after_first_round: self.skip_pre_update_after_first_round,
            dp: self.dp,
            threads: self.threads,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.clients.is_empty() {
            return Err(Error::Config("at least one client is required".into()));
        }
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be at least 1".into()));
        }
        if self.prompt_budget == 0 {
            return Err(Error::Config("prompt_budget must be at least 1".into()));
        }
        for spec in &self.clients {
            if let ClientSpec::Markov { order: 0, .. } = spec {
                return Err(Error::Config("markov clients need order >= 1".into()));
            }
        }
        self.encoder.validate()?;
        self.protocol_params().validate()
    }

    fn participants(&self) -> Result<Vec<Participant>> {
        self.clients
            .iter()
            .enumerate()
            .map(|(i, spec)| {
                let id = ClientId(i as u32);
                let private = |p: &Option<PathBuf>| match p {
                    Some(p) => PrivateDataset::from_jsonl(id, &self.resolve(p)),
                    None => Ok(PrivateDataset::new(id, Vec::new())),
                };
                Ok(match spec {
                    ClientSpec::Scripted {
                        script,
                        client,
                        private: p,
                    } => {
                        let source = ClientId(client.unwrap_or(i as u32));
                        Participant::new(ScriptedClient::load(&self.resolve(script), source, id)?, private(p)?)
                    }
                    ClientSpec::Markov {
                        order,
                        seed,
                        private: p,
                    } => {
                        let seed = seed.unwrap_or_else(|| splitmix64(self.seed ^ splitmix64(i as u64)));
                        Participant::new(MarkovToyClient::new(id, *order, seed)?, private(p)?)
                    }
                })
            })
            .collect()
    }
}

/// Where each broadcast pseudo-label came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSource {
    pub round: u32,
    pub prompt_id: String,
    pub representative: ClientId,
    pub consensus_members: Vec<ClientId>,
    pub fallback_all_outliers: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SessionSummary {
    pub seed: u64,
    pub config: SessionConfig,
    pub clients: usize,
    pub prompts: usize,
    pub rounds: u32,
    pub uploaded_bytes: u64,
    pub downloaded_bytes: u64,
    pub total_bytes: u64,
    pub errors: usize,
    pub labels: Vec<LabelSource>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub privacy: Vec<LedgerTotal>,
    pub transcript_files: Vec<String>,
}

/// Run the configured session and write `round_NNN.json` per round plus
/// `session.json` into `output_dir`.
pub fn simulate(config: &SessionConfig, output_dir: &Path) -> Result<SessionSummary> {
    config.validate()?;
    let prompts = PublicPromptSet::from_jsonl(&config.resolve(&config.prompt_file))?.truncated(config.prompt_budget)?;
    let mut participants = config.participants()?;
    let encoder: Box<dyn EmbeddingSource> = match &config.embeddings_file {
        Some(p) => Box::new(ExternalEmbeddings::from_jsonl(&config.resolve(p))?),
        None => Box::new(HashingEncoder::new(config.encoder.clone())?),
    };
    let report = run_session(
        &mut participants,
        &prompts,
        encoder.as_ref(),
        config.rounds,
        &config.protocol_params(),
    )?;

    fs::create_dir_all(output_dir).map_err(|e| Error::io(output_dir, e))?;
    let write = |name: &str, json: String| -> Result<()> {
        let path = output_dir.join(name);
        fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
    };
    let mut transcript_files = Vec::new();
    for t in &report.transcripts {
        let name = format!("round_{:03}.json", t.round);
        write(&name, serde_json::to_string_pretty(t).expect("transcript serializes"))?;
        transcript_files.push(name);
    }
    let labels = report
        .transcripts
        .iter()
        .flat_map(|t| {
            t.consensus.iter().map(move |c| LabelSource {
                round: t.round,
                prompt_id: c.prompt_id.clone(),
                representative: c.representative,
                consensus_members: c.consensus_members.clone(),
                fallback_all_outliers: c.fallback_all_outliers,
            })
        })
        .collect();
    let summary = SessionSummary {
        seed: config.seed,
        config: config.clone(),
        clients: participants.len(),
        prompts: prompts.len(),
        rounds: config.rounds,
        uploaded_bytes: report.uploaded_bytes,
        downloaded_bytes: report.downloaded_bytes,
        total_bytes: report.total_bytes(),
        errors: report.error_count(),
        labels,
        privacy: report.privacy.iter().map(LedgerTotal::from).collect(),
        transcript_files,
    };
    write("session.json", serde_json::to_string_pretty(&summary).expect("summary serializes"))?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
rounds = 1
prompt_file = "prompts.jsonl"

[[clients]]
type = "scripted"
script = "script.jsonl"
"#;

    fn fixture(dir: &Path, config: &str) -> PathBuf {
        fs::write(dir.join("prompts.jsonl"), "{\"prompt_id\": \"p0\", \"text\": \"what colour is the sky\"}\n").unwrap();
        fs::write(
            dir.join("script.jsonl"),
            "{\"client\": 0, \"round\": 1, \"prompt_id\": \"p0\", \"response\": \"blue\"}\n",
        )
        .unwrap();
        let path = dir.join("session.toml");
        fs::write(&path, config).unwrap();
        path
    }

    #[test]
    fn minimal_session() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SessionConfig::load(&fixture(dir.path(), MINIMAL)).unwrap();
        assert_eq!(cfg.prompt_budget, 500);
        assert_eq!(cfg.eps, 0.3);
        let out = dir.path().join("out");
        let s = simulate(&cfg, &out).unwrap();
        assert_eq!(s.labels.len(), 1);
        assert_eq!(s.labels[0].representative, ClientId(0));
        assert_eq!(s.uploaded_bytes, 4);
        assert_eq!(s.downloaded_bytes, 4);
        assert!(out.join("round_001.json").exists());
        assert!(out.join("session.json").exists());
    }

    #[test]
    fn rejects_bad_configs() {
        let dir = tempfile::tempdir().unwrap();
        let bad = MINIMAL.replace("rounds = 1", "rounds = 0");
        assert!(SessionConfig::load(&fixture(dir.path(), &bad)).is_err());
        let unknown = format!("{MINIMAL}\nbogus = 1\n");
        assert!(SessionConfig::load(&fixture(dir.path(), &unknown)).is_err());
        let weights = format!("{MINIMAL}\n[weights]\nalpha = 0.9\nbeta = 0.9\n");
        assert!(SessionConfig::load(&fixture(dir.path(), &weights)).is_err());
    }

    #[test]
    fn strategy_names() {
        assert_eq!("random".parse::<StrategyName>().unwrap(), StrategyName::Random);
        assert!("nearest".parse::<StrategyName>().is_err());
        assert_eq!(
            StrategyName::Random.with_seed(3),
            SelectionStrategy::RandomInMajorityCluster { seed: 3 }
        );
    }
}
