//! Run configuration: a single TOML document mirroring every knob, with
//! unknown keys rejected. All defaults are documented here and nowhere else.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gateway::clock::SharedClock;
use crate::gateway::{Gateway, ModelEndpoint, Role};
use crate::semantic::SimilarityThresholds;
use crate::simulator::{PruneThresholds, RefinementTriggers};
use crate::thoughtnet::{BuildSizes, EntityClass, RoleEndpoints};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    /// Behaviors file: CSV (header row) or JSONL.
    pub behaviors: PathBuf,
    /// Run output directory.
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SizesConfig {
    #[serde(default = "default_n_topics")]
    pub n_topics: usize,
    #[serde(default = "default_m_samples")]
    pub m_samples: usize,
    #[serde(default = "default_k_entities")]
    pub k_entities: usize,
    #[serde(default = "default_t_turns")]
    pub t_turns: usize,
    #[serde(default = "default_p_passes")]
    pub p_passes: usize,
    #[serde(default = "default_keep_top_k")]
    pub keep_top_k: usize,
    #[serde(default = "default_fallback_budget")]
    pub fallback_budget: u32,
}

fn default_n_topics() -> usize {
    5
}
fn default_m_samples() -> usize {
    3
}
fn default_k_entities() -> usize {
    2
}
fn default_t_turns() -> usize {
    5
}
fn default_p_passes() -> usize {
    3
}
fn default_keep_top_k() -> usize {
    3
}
fn default_fallback_budget() -> u32 {
    3
}

impl Default for SizesConfig {
    fn default() -> Self {
        Self {
            n_topics: 5,
            m_samples: 3,
            k_entities: 2,
            t_turns: 5,
            p_passes: 3,
            keep_top_k: 3,
            fallback_budget: 3,
        }
    }
}

/// Prune floors; when unset they derive from the chain length T:
/// h_min = 2*T and s_min = 0.3*T.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneConfig {
    #[serde(default)]
    pub h_min: Option<i64>,
    #[serde(default)]
    pub s_min: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    #[serde(default = "default_text_column")]
    pub text_column: String,
    #[serde(default)]
    pub id_column: Option<String>,
}

fn default_text_column() -> String {
    "Behavior".to_string()
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            text_column: default_text_column(),
            id_column: None,
        }
    }
}

fn default_n_runs() -> usize {
    5
}

fn default_max_concurrency() -> usize {
    1
}

fn default_entity_classes() -> Vec<String> {
    vec![
        "Tools".to_string(),
        "Techniques".to_string(),
        "Regulations".to_string(),
    ]
}

/// The whole run configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_n_runs")]
    pub n_runs: usize,
    #[serde(default = "default_max_concurrency")]
    pub max_concurrency: usize,
    pub paths: PathsConfig,
    #[serde(default)]
    pub sizes: SizesConfig,
    #[serde(default)]
    pub thresholds: SimilarityThresholds,
    #[serde(default)]
    pub triggers: RefinementTriggers,
    #[serde(default)]
    pub prune: PruneConfig,
    #[serde(default = "default_entity_classes")]
    pub entity_classes: Vec<String>,
    #[serde(default)]
    pub dataset: DatasetConfig,
    pub endpoints: Vec<ModelEndpoint>,
    /// Endpoint name used as the victim during simulation (defaults to the
    /// single victim-role endpoint).
    #[serde(default)]
    pub victim_sim: Option<String>,
    /// Endpoint name used as the victim during traversal (same default).
    #[serde(default)]
    pub victim_live: Option<String>,
    /// Overrides the judge system prompt.
    #[serde(default)]
    pub judge_rubric: Option<String>,
    /// Directory the config file was loaded from; anchors relative paths.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunConfig {
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self> {
        let mut config: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.base_dir = base_dir.to_path_buf();
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let base_dir = path
            .parent()
            .map(|p| p.to_path_buf())
            .unwrap_or_else(|| PathBuf::from("."));
        Self::from_toml_str(&text, &base_dir)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_runs == 0 {
            return Err(Error::Config("n_runs must be at least 1".into()));
        }
        if self.max_concurrency == 0 {
            return Err(Error::Config("max_concurrency must be at least 1".into()));
        }
        let s = &self.sizes;
        for (name, v) in [
            ("n_topics", s.n_topics),
            ("m_samples", s.m_samples),
            ("k_entities", s.k_entities),
            ("p_passes", s.p_passes),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("sizes.{name} must be at least 1")));
            }
        }
        if s.t_turns < 2 {
            return Err(Error::Config("sizes.t_turns must be at least 2".into()));
        }
        if s.fallback_budget == 0 {
            return Err(Error::Config("sizes.fallback_budget must be at least 1".into()));
        }
        self.thresholds.validate()?;
        for endpoint in &self.endpoints {
            endpoint.validate()?;
        }
        self.entity_classes()?;
        self.resolve_roles()?;
        Ok(())
    }

    pub fn entity_classes(&self) -> Result<Vec<EntityClass>> {
        self.entity_classes
            .iter()
            .map(|name| EntityClass::parse_name(name))
            .collect()
    }

    pub fn prune_thresholds(&self) -> PruneThresholds {
        PruneThresholds {
            h_min: self.prune.h_min.unwrap_or(2 * self.sizes.t_turns as i64),
            s_min: self.prune.s_min.unwrap_or(0.3 * self.sizes.t_turns as f64),
        }
    }

    pub fn build_sizes(&self) -> BuildSizes {
        BuildSizes {
            n_topics: self.sizes.n_topics,
            m_samples: self.sizes.m_samples,
            k_entities: self.sizes.k_entities,
            t_turns: self.sizes.t_turns,
        }
    }

    fn endpoint_by_name(&self, name: &str) -> Result<&ModelEndpoint> {
        self.endpoints
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Config(format!("no endpoint named '{name}'")))
    }

    fn unique_role(&self, role: Role) -> Result<&ModelEndpoint> {
        let mut matches = self.endpoints.iter().filter(|e| e.role == role);
        let first = matches.next().ok_or_else(|| {
            Error::Config(format!("no endpoint with role {}", role.as_str()))
        })?;
        if matches.next().is_some() {
            return Err(Error::Config(format!(
                "multiple endpoints with role {}; names must be disambiguated",
                role.as_str()
            )));
        }
        Ok(first)
    }

    /// Resolves which endpoint serves each pipeline role.
    pub fn resolve_roles(&self) -> Result<RoleEndpoints> {
        let attacker = self.unique_role(Role::Attacker)?.name.clone();
        let judge = self.unique_role(Role::Judge)?.name.clone();
        let embedder = self.unique_role(Role::Embedder)?.name.clone();
        let victim_of = |name: &Option<String>| -> Result<Option<String>> {
            match name {
                None => Ok(None),
                Some(n) => {
                    let ep = self.endpoint_by_name(n)?;
                    if ep.role != Role::Victim {
                        return Err(Error::Config(format!(
                            "endpoint '{n}' does not have the victim role"
                        )));
                    }
                    Ok(Some(n.clone()))
                }
            }
        };
        let sim_override = victim_of(&self.victim_sim)?;
        let live_override = victim_of(&self.victim_live)?;
        let default_victim = match (&sim_override, &live_override) {
            (Some(_), Some(_)) => None,
            _ => Some(self.unique_role(Role::Victim)?.name.clone()),
        };
        let victim_sim = sim_override
            .or_else(|| default_victim.clone())
            .expect("victim_sim resolves");
        let victim_live = live_override
            .or(default_victim)
            .expect("victim_live resolves");
        Ok(RoleEndpoints {
            attacker,
            victim_sim,
            victim_live,
            judge,
            embedder,
        })
    }

    /// True iff every endpoint is scripted (the offline invariant).
    pub fn all_scripted(&self) -> bool {
        self.endpoints
            .iter()
            .all(|e| e.kind == crate::gateway::EndpointKind::Scripted)
    }

    pub fn behaviors_path(&self) -> PathBuf {
        resolve(&self.base_dir, &self.paths.behaviors)
    }

    pub fn out_dir(&self) -> PathBuf {
        resolve(&self.base_dir, &self.paths.out)
    }

    /// Hex digest over the canonical JSON form. File locations are excluded
    /// (the digest guards semantic parameters, so relocating a config tree
    /// is not drift), but scripted rule tables are hashed by content: edit
    /// the rules and a resume reports drift.
    pub fn digest(&self) -> String {
        let mut canonical = self.clone();
        canonical.paths = PathsConfig {
            behaviors: PathBuf::from("-"),
            out: PathBuf::from("-"),
        };
        canonical.base_dir = PathBuf::new();
        for endpoint in &mut canonical.endpoints {
            if let Some(rules) = &endpoint.rules {
                let resolved = resolve(&self.base_dir, Path::new(rules));
                let tag = match std::fs::read(&resolved) {
                    Ok(bytes) => {
                        let mut hasher = Sha256::new();
                        hasher.update(&bytes);
                        format!("sha256:{}", hex_encode(&hasher.finalize()))
                    }
                    Err(_) => "unreadable".to_string(),
                };
                endpoint.rules = Some(tag);
            }
        }
        let json = serde_json::to_vec(&canonical).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(&json);
        hex_encode(&hasher.finalize())
    }

    /// Deterministic run id derived from the config digest (which covers
    /// the seed).
    pub fn run_id(&self) -> String {
        format!("run-{}", &self.digest()[..12])
    }

    /// Snapshot for the run directory: same config with every relative path
    /// made absolute, so a resume works from anywhere.
    pub fn snapshot_toml(&self) -> Result<String> {
        let mut snap = self.clone();
        snap.paths.behaviors = self.behaviors_path();
        snap.paths.out = self.out_dir();
        for endpoint in &mut snap.endpoints {
            if let Some(rules) = &endpoint.rules {
                let path = Path::new(rules);
                if !path.is_absolute() {
                    endpoint.rules = Some(self.base_dir.join(path).display().to_string());
                }
            }
        }
        toml::to_string_pretty(&snap).map_err(|e| Error::Config(e.to_string()))
    }

    /// Constructs the gateway with one backend per configured endpoint.
    pub fn build_gateway(&self, clock: SharedClock) -> Result<Gateway> {
        let mut gateway = Gateway::new(clock, self.seed);
        if let Some(rubric) = &self.judge_rubric {
            gateway.set_judge_rubric(rubric.clone());
        }
        for endpoint in &self.endpoints {
            gateway.register_from_config(endpoint.clone(), &self.base_dir)?;
        }
        Ok(gateway)
    }
}

fn resolve(base: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}

fn hex_encode(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
