//! Attack success rate and semantic diversity over completed runs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gateway::GatewayHandle;
use crate::semantic::cosine;
use crate::simulator::TurnRecord;
use crate::traverser::Outcome;

/// Semantic diversity of successful dialogues, under both normalizations.
///
/// The literal score divides the pairwise cosine sum by |S|^2 (so two
/// identical dialogues score 0.75, not 0); the mean-pairwise variant divides
/// by the actual pair count and is reported alongside for interpretability.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiversityReport {
    #[serde(rename = "n")]
    pub n_dialogues: usize,
    #[serde(rename = "paper_literal")]
    pub score_literal: f64,
    #[serde(rename = "mean_pairwise", skip_serializing_if = "Option::is_none")]
    pub score_mean_pairwise: Option<f64>,
    #[serde(rename = "embedder")]
    pub embedder_name: String,
}

/// Per-run and averaged attack success rate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AsrSummary {
    pub n_behaviors: usize,
    pub n_runs: usize,
    pub successes_per_run: Vec<usize>,
    pub asr_per_run: Vec<f64>,
    pub asr_mean: f64,
    /// Results with outcome = error; counted as failures in the rates above.
    pub errors: usize,
}

/// One line of `results.jsonl`: a per-run attack result.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResultRecord {
    pub run: u32,
    pub behavior_id: String,
    pub chain_id: Option<String>,
    pub outcome: Outcome,
    pub turns_used: u32,
    pub max_h: u8,
    pub final_transcript: Vec<TurnRecord>,
    pub chains_attempted: u32,
}

impl ResultRecord {
    pub fn new(run: u32, result: crate::traverser::AttackResult) -> Self {
        Self {
            run,
            behavior_id: result.behavior_id,
            chain_id: result.chain_id,
            outcome: result.outcome,
            turns_used: result.turns_used,
            max_h: result.max_h,
            final_transcript: result.final_transcript,
            chains_attempted: result.chains_attempted,
        }
    }
}

/// Both diversity normalizations from a pairwise cosine sum over i > j.
pub fn diversity_scores(pairwise_sum: f64, n: usize) -> (f64, Option<f64>) {
    if n <= 1 {
        return (1.0, None);
    }
    let literal = 1.0 - pairwise_sum / (n as f64 * n as f64);
    let pairs = (n * (n - 1) / 2) as f64;
    let mean = 1.0 - pairwise_sum / pairs;
    (literal, Some(mean))
}

/// Computes the diversity report over concatenated successful dialogues.
pub fn diversity(
    dialogues: &[String],
    handle: &GatewayHandle<'_>,
    embedder: &str,
) -> Result<DiversityReport> {
    let embedder_name = handle
        .gateway()
        .endpoint(embedder)
        .map(|e| {
            if e.model_id.is_empty() {
                e.name.clone()
            } else {
                e.model_id.clone()
            }
        })
        .unwrap_or_else(|_| embedder.to_string());
    let n = dialogues.len();
    if n <= 1 {
        let (literal, mean) = diversity_scores(0.0, n);
        return Ok(DiversityReport {
            n_dialogues: n,
            score_literal: literal,
            score_mean_pairwise: mean,
            embedder_name,
        });
    }
    let mut embeddings = Vec::with_capacity(n);
    for d in dialogues {
        embeddings.push(handle.embed(embedder, d)?);
    }
    let mut sum = 0.0;
    for i in 0..n {
        for j in 0..i {
            sum += cosine(&embeddings[i], &embeddings[j])?;
        }
    }
    let (literal, mean) = diversity_scores(sum, n);
    Ok(DiversityReport {
        n_dialogues: n,
        score_literal: literal,
        score_mean_pairwise: mean,
        embedder_name,
    })
}

/// Renders the concatenated dialogue text for one final transcript.
pub fn dialogue_text(records: &[TurnRecord]) -> String {
    let turns: Vec<(String, String)> = records
        .iter()
        .map(|r| (r.query.clone(), r.response.clone()))
        .collect();
    crate::prompts::render_transcript(&turns)
}

/// Computes per-run ASR and the mean across runs. Every behavior must have
/// exactly one result in each of the `expected_runs` runs.
pub fn asr(results: &[ResultRecord], expected_runs: usize) -> Result<AsrSummary> {
    if expected_runs == 0 {
        return Err(Error::Config("expected_runs must be positive".into()));
    }
    let mut behavior_ids: Vec<&str> = Vec::new();
    for r in results {
        if r.run == 0 && !behavior_ids.contains(&r.behavior_id.as_str()) {
            behavior_ids.push(&r.behavior_id);
        }
    }
    if behavior_ids.is_empty() {
        return Err(Error::IncompleteRun("no results for run 0".into()));
    }
    let n_behaviors = behavior_ids.len();

    let mut successes_per_run = vec![0usize; expected_runs];
    let mut counts_per_run = vec![0usize; expected_runs];
    let mut errors = 0usize;
    for r in results {
        let run = r.run as usize;
        if run >= expected_runs {
            return Err(Error::IncompleteRun(format!(
                "result for unexpected run {run} (expected {expected_runs} runs)"
            )));
        }
        if !behavior_ids.contains(&r.behavior_id.as_str()) {
            return Err(Error::IncompleteRun(format!(
                "behavior '{}' appears in run {run} but not in run 0",
                r.behavior_id
            )));
        }
        counts_per_run[run] += 1;
        match r.outcome {
            Outcome::Success => successes_per_run[run] += 1,
            Outcome::Error => errors += 1,
            Outcome::Failure => {}
        }
    }
    for (run, &count) in counts_per_run.iter().enumerate() {
        if count != n_behaviors {
            return Err(Error::IncompleteRun(format!(
                "run {run} has {count} results for {n_behaviors} behaviors"
            )));
        }
    }
    let asr_per_run: Vec<f64> = successes_per_run
        .iter()
        .map(|&s| 100.0 * s as f64 / n_behaviors as f64)
        .collect();
    let asr_mean = asr_per_run.iter().sum::<f64>() / expected_runs as f64;
    Ok(AsrSummary {
        n_behaviors,
        n_runs: expected_runs,
        successes_per_run,
        asr_per_run,
        asr_mean,
        errors,
    })
}

/// The `report.json` document.
#[derive(Debug, Serialize, Deserialize)]
pub struct Report {
    pub run_id: String,
    pub n_behaviors: usize,
    pub n_runs: usize,
    pub asr: AsrBlock,
    pub errors: usize,
    pub diversity: DiversityReport,
    pub config_digest: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AsrBlock {
    pub per_run: Vec<f64>,
    pub mean: f64,
}

/// One row of `diversity.csv`.
#[derive(Debug, Clone)]
pub struct DiversityRow {
    pub label: String,
    pub report: DiversityReport,
}

/// Builds the report document from persisted results.
pub fn build_report(
    results: &[ResultRecord],
    expected_runs: usize,
    run_id: &str,
    config_digest: &str,
    handle: &GatewayHandle<'_>,
    embedder: &str,
) -> Result<Report> {
    let summary = asr(results, expected_runs)?;
    let dialogues: Vec<String> = results
        .iter()
        .filter(|r| r.outcome == Outcome::Success)
        .map(|r| dialogue_text(&r.final_transcript))
        .collect();
    let diversity = diversity(&dialogues, handle, embedder)?;
    Ok(Report {
        run_id: run_id.to_string(),
        n_behaviors: summary.n_behaviors,
        n_runs: summary.n_runs,
        asr: AsrBlock {
            per_run: summary.asr_per_run.clone(),
            mean: summary.asr_mean,
        },
        errors: summary.errors,
        diversity,
        config_digest: config_digest.to_string(),
    })
}

/// Writes `report.json` (atomically) and `diversity.csv` into the run
/// directory.
pub fn emit_report(dir: &Path, report: &Report) -> Result<()> {
    let json = serde_json::to_string_pretty(report)? + "\n";
    let path = dir.join("report.json");
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, json)?;
    std::fs::rename(&tmp, &path)?;
    let row = DiversityRow {
        label: report.run_id.clone(),
        report: report.diversity.clone(),
    };
    write_diversity_csv(&dir.join("diversity.csv"), &[row])
}

/// Writes method-comparison plot data, one row per labeled result set.
pub fn write_diversity_csv(path: &Path, rows: &[DiversityRow]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| Error::Config(e.to_string()))?;
    writer
        .write_record(["label", "n", "paper_literal", "mean_pairwise"])
        .map_err(|e| Error::Config(e.to_string()))?;
    for row in rows {
        let mean = row
            .report
            .score_mean_pairwise
            .map(|m| m.to_string())
            .unwrap_or_default();
        writer
            .write_record([
                row.label.as_str(),
                &row.report.n_dialogues.to_string(),
                &row.report.score_literal.to_string(),
                &mean,
            ])
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    writer.flush()?;
    Ok(())
}
