//! Resumable pipeline state, persisted atomically after every phase
//! boundary. Phases are monotone per (run, behavior): pending -> built ->
//! simulated -> executed.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pending,
    Built,
    Simulated,
    Executed,
}

impl Phase {
    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::Pending => "pending",
            Phase::Built => "built",
            Phase::Simulated => "simulated",
            Phase::Executed => "executed",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunState {
    pub run_id: String,
    pub config_digest: String,
    pub n_runs: usize,
    pub behavior_ids: Vec<String>,
    /// Keyed by `r<run>/<behavior_id>`.
    pub phases: BTreeMap<String, Phase>,
    /// Virtual clock value at the last phase boundary (offline mode).
    pub clock_ms: u64,
    /// Next gateway call-log sequence number.
    pub call_seq: u64,
    /// Base RNG seed the run was started with.
    pub seed: u64,
}

fn key(run: u32, behavior_id: &str) -> String {
    format!("r{run}/{behavior_id}")
}

impl RunState {
    pub fn new(
        run_id: &str,
        config_digest: &str,
        n_runs: usize,
        behavior_ids: Vec<String>,
        seed: u64,
    ) -> Self {
        let mut phases = BTreeMap::new();
        for run in 0..n_runs as u32 {
            for behavior in &behavior_ids {
                phases.insert(key(run, behavior), Phase::Pending);
            }
        }
        Self {
            run_id: run_id.to_string(),
            config_digest: config_digest.to_string(),
            n_runs,
            behavior_ids,
            phases,
            clock_ms: 0,
            call_seq: 0,
            seed,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Write-temp-then-rename so a crash never leaves a torn state file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, serde_json::to_string_pretty(self)?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn phase(&self, run: u32, behavior_id: &str) -> Phase {
        self.phases
            .get(&key(run, behavior_id))
            .copied()
            .unwrap_or(Phase::Pending)
    }

    /// Advances a behavior's phase. Regressions are a bug, never silently
    /// accepted.
    pub fn set_phase(&mut self, run: u32, behavior_id: &str, next: Phase) -> Result<()> {
        let k = key(run, behavior_id);
        let current = self.phases.get(&k).copied().unwrap_or(Phase::Pending);
        if next <= current {
            return Err(Error::State(format!(
                "phase for {k} may not regress or repeat: {current:?} -> {next:?}"
            )));
        }
        self.phases.insert(k, next);
        Ok(())
    }

    pub fn all_executed(&self) -> bool {
        self.phases.values().all(|p| *p == Phase::Executed)
    }
}
