//! Vector math and threshold predicates shared by every pipeline stage.
//!
//! Cosine similarity is the single kernel behind topic relevance, sample
//! diversity, response alignment, and the diversity report.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A fixed-length real vector produced by an embedding endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    values: Vec<f64>,
}

impl Embedding {
    /// Wraps raw values, rejecting empty or non-finite input.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Config("embedding must not be empty".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("embedding contains non-finite entries".into()));
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|v| *v == 0.0)
    }
}

/// Similarity thresholds governing network construction.
///
/// `tau_z` gates topics, `tau_s` gates sample relevance, and `tau_d` caps
/// pairwise sample similarity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityThresholds {
    pub tau_z: f64,
    pub tau_s: f64,
    pub tau_d: f64,
}

impl Default for SimilarityThresholds {
    fn default() -> Self {
        Self {
            tau_z: 0.35,
            tau_s: 0.30,
            tau_d: 0.90,
        }
    }
}

impl SimilarityThresholds {
    /// The diversity cap must exceed the relevance floor, or no pair of
    /// samples could ever be admitted together.
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("tau_z", self.tau_z),
            ("tau_s", self.tau_s),
            ("tau_d", self.tau_d),
        ] {
            if !(-1.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [-1, 1], got {v}")));
            }
        }
        if self.tau_d <= self.tau_s {
            return Err(Error::Config(format!(
                "tau_d ({}) must exceed tau_s ({})",
                self.tau_d, self.tau_s
            )));
        }
        Ok(())
    }
}

/// Cosine similarity, clamped to [-1, 1] against rounding.
pub fn cosine(u: &Embedding, v: &Embedding) -> Result<f64> {
    if u.dim() != v.dim() {
        return Err(Error::DimensionMismatch {
            left: u.dim(),
            right: v.dim(),
        });
    }
    if u.is_zero() || v.is_zero() {
        return Err(Error::ZeroVector);
    }
    let mut dot = 0.0;
    let mut nu = 0.0;
    let mut nv = 0.0;
    for (a, b) in u.values.iter().zip(&v.values) {
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    Ok((dot / (nu.sqrt() * nv.sqrt())).clamp(-1.0, 1.0))
}

/// True iff cosine similarity to the goal meets the threshold (inclusive).
pub fn passes_relevance(candidate: &Embedding, goal: &Embedding, threshold: f64) -> Result<bool> {
    Ok(cosine(candidate, goal)? >= threshold)
}

/// True iff every unordered pair stays strictly below the diversity cap.
pub fn passes_pairwise_diversity(samples: &[Embedding], threshold: f64) -> Result<bool> {
    for (i, u) in samples.iter().enumerate() {
        for v in &samples[i + 1..] {
            if cosine(u, v)? >= threshold {
                return Ok(false);
            }
        }
    }
    Ok(true)
}
