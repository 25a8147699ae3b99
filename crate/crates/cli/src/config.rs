//! Run configuration: one TOML file with sections, overridable from the
//! command line with dotted keys (`--train.beta 0.05`).

use std::path::{Path, PathBuf};

use rar_core::corpus::ConflictPolicy;
use rar_core::eval::EvalConfig;
use rar_core::generator::{GeneratorEndpoint, HttpSettings};
use rar_core::preference::TrainConfig;
use rar_core::retriever::pretrain::PretrainConfig;
use rar_core::retriever::RetrieverShape;
use rar_core::seed::{fnv1a, SeedStream};
use rar_core::synthetic::WorldConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Relative paths below are resolved against this directory.
    pub root: PathBuf,
    pub corpus_sources: Vec<PathBuf>,
    pub corpus: PathBuf,
    pub ingest_report: PathBuf,
    pub embeddings: PathBuf,
    pub conversations: PathBuf,
    pub interactions: PathBuf,
    pub data_dir: PathBuf,
    pub checkpoints_dir: PathBuf,
    pub logs_dir: PathBuf,
    pub reports_dir: PathBuf,
    /// Checkpoint to evaluate; defaults to the trained algorithm's.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_checkpoint: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            root: "run".into(),
            corpus_sources: vec![],
            corpus: "corpus.jsonl".into(),
            ingest_report: "ingest_report.json".into(),
            embeddings: "embeddings.jsonl".into(),
            conversations: "conversations.jsonl".into(),
            interactions: "interactions.jsonl".into(),
            data_dir: "data".into(),
            checkpoints_dir: "checkpoints".into(),
            logs_dir: "logs".into(),
            reports_dir: "reports".into(),
            eval_checkpoint: None,
        }
    }
}

impl Paths {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrieverSection {
    pub hidden: usize,
    pub num_layers: usize,
    pub dropout: f64,
}

impl Default for RetrieverSection {
    fn default() -> Self {
        RetrieverSection {
            hidden: 64,
            num_layers: rar_core::retriever::DEFAULT_LAYERS,
            dropout: rar_core::retriever::DEFAULT_DROPOUT,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Hash,
    Http,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingSection {
    pub provider: ProviderKind,
    pub dim: usize,
    pub model: String,
    pub http: HttpSettings,
}

impl Default for EmbeddingSection {
    fn default() -> Self {
        EmbeddingSection {
            provider: ProviderKind::Hash,
            dim: rar_core::embedding::DEFAULT_DIM,
            model: String::new(),
            http: HttpSettings::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub max_history: usize,
    pub session_gap_secs: i64,
    pub subsample_cap: usize,
    pub split: (f64, f64, f64),
    pub conflict_policy: ConflictPolicy,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            max_history: rar_core::datasets::DEFAULT_MAX_HISTORY,
            session_gap_secs: rar_core::datasets::DEFAULT_SESSION_GAP_SECS,
            subsample_cap: rar_core::datasets::DEFAULT_SUBSAMPLE_CAP,
            split: (0.8, 0.1, 0.1),
            conflict_policy: ConflictPolicy::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeneratorKind {
    Mock,
    Echo,
    Http,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSection {
    pub kind: GeneratorKind,
    pub noise_scale: f64,
    pub endpoint: GeneratorEndpoint,
}

impl Default for GeneratorSection {
    fn default() -> Self {
        GeneratorSection {
            kind: GeneratorKind::Mock,
            noise_scale: 0.1,
            endpoint: GeneratorEndpoint::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    /// Also train and evaluate the likelihood-only baseline.
    pub baseline: bool,
}

impl Default for SimulateSection {
    fn default() -> Self {
        SimulateSection { baseline: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Use the data-parallel executor where available.
    pub parallel: bool,
    pub paths: Paths,
    pub retriever: RetrieverSection,
    pub embedding: EmbeddingSection,
    pub data: DataSection,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub generator: GeneratorSection,
    pub eval: EvalConfig,
    pub world: WorldConfig,
    pub simulate: SimulateSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            parallel: true,
            paths: Paths::default(),
            retriever: RetrieverSection::default(),
            embedding: EmbeddingSection::default(),
            data: DataSection::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            generator: GeneratorSection::default(),
            eval: EvalConfig::default(),
            world: WorldConfig::default(),
            simulate: SimulateSection::default(),
        }
    }
}

fn parse_scalar(raw: &str) -> toml::Value {
    // Reuse TOML's literal grammar; anything else is a bare string.
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_path(tree: &mut toml::Value, key: &str, raw: &str) -> Result<(), CliError> {
    let unknown = || CliError::Usage(format!("unknown setting --{key}"));
    let (parents, leaf) = match key.rsplit_once('.') {
        Some((p, l)) => (p.split('.').collect::<Vec<_>>(), l),
        None => (vec![], key),
    };
    let mut node = tree;
    for part in parents {
        node = node.as_table_mut().and_then(|t| t.get_mut(part)).ok_or_else(unknown)?;
    }
    let table = node.as_table_mut().ok_or_else(unknown)?;
    let current = table.get(leaf);
    if current.is_none() && key != "paths.eval_checkpoint" {
        return Err(unknown());
    }
    if current.is_some_and(|v| v.is_table()) {
        return Err(CliError::Usage(format!("--{key} is a section, not a setting")));
    }
    let mut v = parse_scalar(raw);
    // keep strings where the schema expects them
    if current.is_some_and(|c| c.is_str()) && !v.is_str() {
        v = toml::Value::String(raw.to_string());
    }
    table.insert(leaf.to_string(), v);
    Ok(())
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies `key = value` overrides, where `key` is a dotted path into the
    /// config tree. Unknown keys are rejected.
    pub fn with_overrides(&self, overrides: &[(String, String)]) -> Result<Self, CliError> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut tree = toml::Value::try_from(self).map_err(|e| CliError::Config(e.to_string()))?;
        for (key, raw) in overrides {
            set_path(&mut tree, key, raw)?;
        }
        tree.try_into().map_err(|e: toml::de::Error| CliError::Usage(e.to_string()))
    }

    /// Checks cross-field constraints and fans the root seed out to every
    /// component.
    pub fn finalize(mut self) -> Result<Self, CliError> {
        let root = SeedStream::new(self.seed);
        self.world.seed = root.stream("world").value();
        self.pretrain.seed = root.stream("pretrain").value();
        self.train.seed = root.stream("train").value();
        self.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.train.optimizer().map_err(|e| CliError::Config(format!("train: {e}")))?;
        self.pretrain.optimizer().map_err(|e| CliError::Config(format!("pretrain: {e}")))?;
        if !self.eval.ks.iter().all(|&k| k <= self.eval.k) {
            return Err(CliError::Config(format!("eval.ks {:?} exceed eval.k {}", self.eval.ks, self.eval.k)));
        }
        if self.retriever.hidden == 0 || self.retriever.num_layers == 0 || self.embedding.dim == 0 {
            return Err(CliError::Config("retriever and embedding sizes must be positive".into()));
        }
        Ok(self)
    }

    pub fn shape(&self) -> RetrieverShape {
        RetrieverShape {
            dim: self.embedding.dim,
            hidden: self.retriever.hidden,
            num_layers: self.retriever.num_layers,
            dropout_rate: self.retriever.dropout,
        }
    }

    /// Stable identifier of everything that affects results; artifact
    /// locations and the executor are left out.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.paths = Paths::default();
        c.parallel = true;
        format!("{:016x}", fnv1a(c.to_toml().as_bytes()))
    }

    pub fn mock_seed(&self) -> u64 {
        SeedStream::new(self.seed).stream(rar_core::seed::MOCK_NOISE).value()
    }

    pub fn exec(&self) -> rar_core::Exec {
        if self.parallel {
            rar_core::Exec::Parallel
        } else {
            rar_core::Exec::Sequential
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        let text = c.to_toml();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_toml(), text);
    }

    #[test]
    fn overrides_apply_by_dotted_key() {
        let c = RunConfig::default()
            .with_overrides(&[
                ("train.beta".into(), "0.1".into()),
                ("train.algorithm".into(), "grpo".into()),
                ("generator.kind".into(), "http".into()),
                ("paths.root".into(), "/tmp/x".into()),
                ("seed".into(), "7".into()),
            ])
            .unwrap();
        assert_eq!(c.train.beta, 0.1);
        assert_eq!(c.train.algorithm, rar_core::preference::Algorithm::Grpo);
        assert_eq!(c.generator.kind, GeneratorKind::Http);
        assert_eq!(c.paths.root, PathBuf::from("/tmp/x"));
        assert_eq!(c.seed, 7);
    }

    #[test]
    fn bad_overrides_are_usage_errors() {
        let c = RunConfig::default();
        for (k, v) in [("train.betta", "0.1"), ("train.algorithm", "ppo"), ("nope.x", "1"), ("train.beta.x", "1")] {
            assert!(matches!(c.with_overrides(&[(k.into(), v.into())]), Err(CliError::Usage(_))), "{k}");
        }
    }

    #[test]
    fn root_seed_fans_out() {
        let a = RunConfig { seed: 1, ..Default::default() }.finalize().unwrap();
        let b = RunConfig { seed: 2, ..Default::default() }.finalize().unwrap();
        assert_ne!(a.train.seed, b.train.seed);
        assert_ne!(a.train.seed, a.pretrain.seed);
        assert!(RunConfig {
            train: TrainConfig { k: 500, ..Default::default() },
            ..Default::default()
        }
        .finalize()
        .is_err());
    }
}
