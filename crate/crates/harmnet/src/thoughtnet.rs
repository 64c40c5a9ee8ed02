//! Construction of the hierarchical adversarial search space: goal ->
//! topics -> contextual samples -> entities -> candidate query chains.
//!
//! Topics must clear the goal-similarity floor `tau_z`; samples must clear
//! `tau_s` and stay pairwise under the diversity cap `tau_d`. One chain is
//! generated per (topic, sample, entity) triple.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gateway::{CallPurpose, ChatMessage, ChatRequest, GatewayHandle};
use crate::prompts;
use crate::semantic::{cosine, passes_relevance, Embedding, SimilarityThresholds};
use crate::simulator::TurnRecord;

/// The extracted attack goal and its embedding.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Goal {
    pub behavior_id: String,
    pub raw_prompt: String,
    pub core_goal: String,
    pub embedding: Embedding,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Topic {
    pub id: String,
    pub text: String,
    pub embedding: Embedding,
    pub sim_to_goal: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub topic_id: String,
    pub text: String,
    pub embedding: Embedding,
    pub sim_to_goal: f64,
    pub entities: Vec<Entity>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EntityClass {
    Tools,
    Techniques,
    Regulations,
    Other,
}

impl EntityClass {
    pub fn as_str(&self) -> &'static str {
        match self {
            EntityClass::Tools => "Tools",
            EntityClass::Techniques => "Techniques",
            EntityClass::Regulations => "Regulations",
            EntityClass::Other => "Other",
        }
    }

    /// Maps a class tag to the enum; unknown or unconfigured tags become
    /// `Other`.
    pub fn from_tag(tag: &str, configured: &[EntityClass]) -> EntityClass {
        let parsed = match tag.trim() {
            t if t.eq_ignore_ascii_case("tools") => EntityClass::Tools,
            t if t.eq_ignore_ascii_case("techniques") => EntityClass::Techniques,
            t if t.eq_ignore_ascii_case("regulations") => EntityClass::Regulations,
            _ => EntityClass::Other,
        };
        if parsed == EntityClass::Other || configured.contains(&parsed) {
            parsed
        } else {
            EntityClass::Other
        }
    }

    pub fn parse_name(name: &str) -> Result<EntityClass> {
        match name.trim() {
            t if t.eq_ignore_ascii_case("tools") => Ok(EntityClass::Tools),
            t if t.eq_ignore_ascii_case("techniques") => Ok(EntityClass::Techniques),
            t if t.eq_ignore_ascii_case("regulations") => Ok(EntityClass::Regulations),
            t if t.eq_ignore_ascii_case("other") => Ok(EntityClass::Other),
            other => Err(Error::Config(format!("unknown entity class '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub entity_class: EntityClass,
    pub name: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChainStatus {
    Candidate,
    Simulating,
    Pruned,
    Retained,
    Selected,
    Executed,
}

/// An ordered multi-turn query sequence and its lifecycle.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueryChain {
    pub id: String,
    /// Construction order; the final tie-break everywhere chains are ranked.
    pub index: usize,
    pub topic_id: String,
    pub sample_id: String,
    pub entity: Entity,
    pub turns: Vec<String>,
    pub status: ChainStatus,
    pub cumulative_h: i64,
    pub cumulative_s: f64,
    /// Set when simulation hit H = 5 before exhausting the turns. Success is
    /// only ever declared by real execution, never by simulation.
    pub simulated_success: bool,
    pub turn_records: Vec<TurnRecord>,
}

impl QueryChain {
    /// Valid transitions: candidate -> simulating -> {pruned, retained} ->
    /// selected -> executed.
    pub fn transition(&mut self, next: ChainStatus) -> Result<()> {
        use ChainStatus::*;
        let ok = matches!(
            (self.status, next),
            (Candidate, Simulating)
                | (Retained, Simulating)
                | (Simulating, Pruned)
                | (Simulating, Retained)
                | (Simulating, Candidate) // transport abort: preserved for retry
                | (Retained, Selected)
                | (Selected, Executed)
        );
        if !ok {
            return Err(Error::State(format!(
                "chain {}: illegal status transition {:?} -> {next:?}",
                self.id, self.status
            )));
        }
        self.status = next;
        Ok(())
    }
}

impl QueryChain {
    /// Resume-time normalization: rewind to a freshly built candidate so the
    /// simulate phase can be redone from scratch.
    pub fn reset_to_candidate(&mut self) {
        self.status = ChainStatus::Candidate;
        self.cumulative_h = 0;
        self.cumulative_s = 0.0;
        self.simulated_success = false;
        self.turn_records.clear();
    }

    /// Resume-time normalization: rewind a selected or executed chain to
    /// retained so the traverse phase can be redone.
    pub fn rewind_to_retained(&mut self) {
        if matches!(self.status, ChainStatus::Selected | ChainStatus::Executed) {
            self.status = ChainStatus::Retained;
        }
    }
}

/// A (topic, sample, entity) triple whose chain generation failed and was
/// skipped rather than aborting the build.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SkipRecord {
    pub stage: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topic_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entity: Option<String>,
    pub error: String,
}

/// The constructed search space for one behavior.
#[derive(Debug, Clone)]
pub struct ThoughtNet {
    pub goal: Goal,
    pub topics: Vec<Topic>,
    pub samples: Vec<Sample>,
    pub chains: Vec<QueryChain>,
    pub skipped: Vec<SkipRecord>,
}

/// Endpoint names resolved per role.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoleEndpoints {
    pub attacker: String,
    pub victim_sim: String,
    pub victim_live: String,
    pub judge: String,
    pub embedder: String,
}

/// Generation sizes: how many topics, samples per topic, entities per
/// sample, turns per chain.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BuildSizes {
    pub n_topics: usize,
    pub m_samples: usize,
    pub k_entities: usize,
    pub t_turns: usize,
}

impl Default for BuildSizes {
    fn default() -> Self {
        Self {
            n_topics: 5,
            m_samples: 3,
            k_entities: 2,
            t_turns: 5,
        }
    }
}

const OVERGENERATION_FACTOR: usize = 2;

/// Parses a numbered list, tolerating `1.`, `1)`, and `1]` markers; falls
/// back to plain non-empty lines when nothing is numbered. Deduplicates
/// exact repeats, preserving order.
pub fn parse_listed_lines(text: &str) -> Vec<String> {
    let mut numbered = Vec::new();
    let mut plain = Vec::new();
    for line in text.lines() {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        plain.push(trimmed.to_string());
        let stripped = trimmed.trim_start_matches(|c: char| c.is_ascii_digit());
        if stripped.len() < trimmed.len() {
            if let Some(item) = stripped.strip_prefix(['.', ')', ']']) {
                let item = item.trim();
                if !item.is_empty() {
                    numbered.push(item.to_string());
                }
            }
        }
    }
    let source = if numbered.is_empty() { plain } else { numbered };
    let mut seen = std::collections::HashSet::new();
    source.into_iter().filter(|s| seen.insert(s.clone())).collect()
}

/// Extracts the core goal via the attacker model and embeds it. Scripted
/// attackers answer with the prompt verbatim.
pub fn extract_goal(
    handle: &GatewayHandle<'_>,
    roles: &RoleEndpoints,
    behavior_id: &str,
    prompt: &str,
) -> Result<Goal> {
    if prompt.trim().is_empty() {
        return Err(Error::EmptyText);
    }
    let req = ChatRequest::new(CallPurpose::ExtractGoal)
        .message(ChatMessage::system(prompts::ATTACKER_SYSTEM))
        .message(ChatMessage::user(prompts::extract_goal(prompt)))
        .field("prompt", prompt);
    let reply = handle.chat(&roles.attacker, &req)?;
    let core_goal = reply.text.trim().to_string();
    if core_goal.is_empty() {
        return Err(Error::EmptyText);
    }
    let embedding = handle.embed(&roles.embedder, &core_goal)?;
    Ok(Goal {
        behavior_id: behavior_id.to_string(),
        raw_prompt: prompt.to_string(),
        core_goal,
        embedding,
    })
}

/// Generates up to `n_topics` topics passing `tau_z`, best-aligned first.
pub fn generate_topics(
    handle: &GatewayHandle<'_>,
    roles: &RoleEndpoints,
    goal: &Goal,
    n_topics: usize,
    thresholds: &SimilarityThresholds,
) -> Result<Vec<Topic>> {
    let ask = n_topics.max(1) * OVERGENERATION_FACTOR;
    let req = ChatRequest::new(CallPurpose::GenerateTopics)
        .message(ChatMessage::system(prompts::ATTACKER_SYSTEM))
        .message(ChatMessage::user(prompts::generate_topics(
            &goal.core_goal,
            ask,
        )))
        .field("goal", &goal.core_goal)
        .field("count", ask.to_string());

    let mut passing: Vec<(String, Embedding, f64)> = Vec::new();
    for round in 0..2 {
        let request = if round == 0 {
            req.clone()
        } else {
            let mut retry = req.clone();
            retry.history.push(ChatMessage::user(
                "None of those were related closely enough. Propose different concepts \
                 that relate more directly to the goal, in the same numbered format.",
            ));
            retry
        };
        let reply = handle.chat(&roles.attacker, &request)?;
        for text in parse_listed_lines(&reply.text) {
            let embedding = match handle.embed(&roles.embedder, &text) {
                Ok(e) => e,
                Err(Error::EmptyText) => continue,
                Err(e) => return Err(e),
            };
            let sim = cosine(&embedding, &goal.embedding)?;
            if sim >= thresholds.tau_z {
                passing.push((text, embedding, sim));
            }
        }
        if !passing.is_empty() {
            break;
        }
    }
    if passing.is_empty() {
        return Err(Error::TopicGeneration(format!(
            "no candidate reached tau_z={} for behavior {}",
            thresholds.tau_z, goal.behavior_id
        )));
    }
    // Highest similarity first; equal scores keep generation order.
    passing.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap_or(std::cmp::Ordering::Equal));
    passing.truncate(n_topics);
    Ok(passing
        .into_iter()
        .enumerate()
        .map(|(i, (text, embedding, sim))| Topic {
            id: format!("t{}", i + 1),
            text,
            embedding,
            sim_to_goal: sim,
        })
        .collect())
}

/// Greedy sample admission: candidates are considered in generation order
/// and admitted iff they pass relevance and stay under the diversity cap
/// against every already-admitted sibling.
pub fn generate_samples(
    handle: &GatewayHandle<'_>,
    roles: &RoleEndpoints,
    topic: &Topic,
    topic_ordinal: usize,
    goal: &Goal,
    m_samples: usize,
    thresholds: &SimilarityThresholds,
) -> Result<Vec<Sample>> {
    let ask = m_samples.max(1) * OVERGENERATION_FACTOR;
    let req = ChatRequest::new(CallPurpose::GenerateSamples)
        .message(ChatMessage::system(prompts::ATTACKER_SYSTEM))
        .message(ChatMessage::user(prompts::generate_samples(
            &goal.core_goal,
            &topic.text,
            ask,
        )))
        .field("goal", &goal.core_goal)
        .field("topic", &topic.text)
        .field("topic_ordinal", topic_ordinal.to_string())
        .field("count", ask.to_string());

    let mut admitted: Vec<Sample> = Vec::new();
    for round in 0..2 {
        let request = if round == 0 {
            req.clone()
        } else {
            let mut retry = req.clone();
            retry.history.push(ChatMessage::user(
                "Those scenarios did not satisfy the relevance and diversity needs. \
                 Propose different ones in the same numbered format.",
            ));
            retry
        };
        let reply = handle.chat(&roles.attacker, &request)?;
        for text in parse_listed_lines(&reply.text) {
            if admitted.len() >= m_samples {
                break;
            }
            let embedding = match handle.embed(&roles.embedder, &text) {
                Ok(e) => e,
                Err(Error::EmptyText) => continue,
                Err(e) => return Err(e),
            };
            if !passes_relevance(&embedding, &goal.embedding, thresholds.tau_s)? {
                continue;
            }
            let mut diverse = true;
            for sibling in &admitted {
                if cosine(&embedding, &sibling.embedding)? >= thresholds.tau_d {
                    diverse = false;
                    break;
                }
            }
            if !diverse {
                continue;
            }
            let sim = cosine(&embedding, &goal.embedding)?;
            admitted.push(Sample {
                id: format!("{}s{}", topic.id, admitted.len() + 1),
                topic_id: topic.id.clone(),
                text,
                embedding,
                sim_to_goal: sim,
                entities: Vec::new(),
            });
        }
        if !admitted.is_empty() {
            break;
        }
    }
    if admitted.is_empty() {
        return Err(Error::SampleGeneration(format!(
            "no candidate admitted for topic {}",
            topic.id
        )));
    }
    Ok(admitted)
}

/// Links up to `k_entities` class-tagged entities to a sample. Never fatal:
/// any failure or empty proposal falls back to a single placeholder entity.
pub fn link_entities(
    handle: &GatewayHandle<'_>,
    roles: &RoleEndpoints,
    sample: &Sample,
    sample_ordinal: usize,
    classes: &[EntityClass],
    k_entities: usize,
) -> Vec<Entity> {
    let class_names: Vec<&str> = classes.iter().map(|c| c.as_str()).collect();
    let classes_joined = class_names.join(", ");
    let req = ChatRequest::new(CallPurpose::LinkEntities)
        .message(ChatMessage::system(prompts::ATTACKER_SYSTEM))
        .message(ChatMessage::user(prompts::link_entities(
            &sample.text,
            &classes_joined,
            k_entities,
        )))
        .field("sample", &sample.text)
        .field("classes", classes_joined.clone())
        .field("ordinal", sample_ordinal.to_string())
        .field("count", k_entities.to_string());

    let mut entities = Vec::new();
    match handle.chat(&roles.attacker, &req) {
        Ok(reply) => {
            for line in parse_listed_lines(&reply.text) {
                if entities.len() >= k_entities {
                    break;
                }
                if let Some((name, tag)) = line.rsplit_once(':') {
                    let name = name.trim();
                    if name.is_empty() {
                        continue;
                    }
                    entities.push(Entity {
                        entity_class: EntityClass::from_tag(tag, classes),
                        name: name.to_string(),
                    });
                }
            }
        }
        Err(err) => {
            log::warn!("entity linking failed for sample {}: {err}", sample.id);
        }
    }
    if entities.is_empty() {
        entities.push(Entity {
            entity_class: EntityClass::Other,
            name: "general context".to_string(),
        });
    }
    entities
}

/// Generates one multi-turn chain for a (topic, sample, entity) triple.
pub fn generate_chain(
    handle: &GatewayHandle<'_>,
    roles: &RoleEndpoints,
    topic: &Topic,
    sample: &Sample,
    entity: &Entity,
    goal: &Goal,
    t_turns: usize,
) -> Result<Vec<String>> {
    if t_turns < 2 {
        return Err(Error::Config(format!(
            "t_turns must be at least 2, got {t_turns}"
        )));
    }
    let req = ChatRequest::new(CallPurpose::GenerateChain)
        .message(ChatMessage::system(prompts::ATTACKER_SYSTEM))
        .message(ChatMessage::user(prompts::generate_chain(
            &goal.core_goal,
            &topic.text,
            &sample.text,
            &entity.name,
            t_turns,
        )))
        .field("goal", &goal.core_goal)
        .field("topic", &topic.text)
        .field("sample", &sample.text)
        .field("entity", &entity.name)
        .field("turns", t_turns.to_string());

    let mut best: Vec<String> = Vec::new();
    for round in 0..2 {
        let request = if round == 0 {
            req.clone()
        } else {
            let mut retry = req.clone();
            retry.history.push(ChatMessage::user(format!(
                "That was not exactly {t_turns} numbered queries. Rewrite the chain \
                 as exactly {t_turns} numbered lines."
            )));
            retry
        };
        let reply = handle.chat(&roles.attacker, &request)?;
        let mut lines = parse_listed_lines(&reply.text);
        if lines.len() >= t_turns {
            lines.truncate(t_turns);
            return Ok(lines);
        }
        if lines.len() > best.len() {
            best = lines;
        }
    }
    if best.len() >= 2 {
        return Ok(best);
    }
    Err(Error::ChainGeneration(format!(
        "only {} parseable queries for topic {} sample {}",
        best.len(),
        topic.id,
        sample.id
    )))
}

/// Composes goal -> topics -> samples -> entities -> chains into the full
/// search space. Failures of individual triples (or of one topic's sample
/// generation) are recorded as skips, not fatal.
pub fn build_network(
    handle: &GatewayHandle<'_>,
    roles: &RoleEndpoints,
    goal: Goal,
    sizes: &BuildSizes,
    thresholds: &SimilarityThresholds,
    classes: &[EntityClass],
) -> Result<ThoughtNet> {
    let topics = generate_topics(handle, roles, &goal, sizes.n_topics, thresholds)?;
    let mut samples: Vec<Sample> = Vec::new();
    let mut chains: Vec<QueryChain> = Vec::new();
    let mut skipped: Vec<SkipRecord> = Vec::new();

    for (topic_ordinal, topic) in topics.iter().enumerate() {
        let topic_samples = match generate_samples(
            handle,
            roles,
            topic,
            topic_ordinal,
            &goal,
            sizes.m_samples,
            thresholds,
        ) {
            Ok(s) => s,
            Err(err) => {
                log::warn!("skipping topic {}: {err}", topic.id);
                skipped.push(SkipRecord {
                    stage: "samples".into(),
                    topic_id: Some(topic.id.clone()),
                    sample_id: None,
                    entity: None,
                    error: err.to_string(),
                });
                continue;
            }
        };
        for (sample_ordinal, mut sample) in topic_samples.into_iter().enumerate() {
            let entities = link_entities(
                handle,
                roles,
                &sample,
                topic_ordinal * sizes.m_samples + sample_ordinal,
                classes,
                sizes.k_entities,
            );
            sample.entities = entities.clone();
            for entity in entities {
                match generate_chain(handle, roles, topic, &sample, &entity, &goal, sizes.t_turns)
                {
                    Ok(turns) => {
                        let index = chains.len();
                        chains.push(QueryChain {
                            id: format!("c{}", index + 1),
                            index,
                            topic_id: topic.id.clone(),
                            sample_id: sample.id.clone(),
                            entity,
                            turns,
                            status: ChainStatus::Candidate,
                            cumulative_h: 0,
                            cumulative_s: 0.0,
                            simulated_success: false,
                            turn_records: Vec::new(),
                        });
                    }
                    Err(err) => {
                        log::warn!(
                            "skipping chain for ({}, {}, {}): {err}",
                            topic.id,
                            sample.id,
                            entity.name
                        );
                        skipped.push(SkipRecord {
                            stage: "chain".into(),
                            topic_id: Some(topic.id.clone()),
                            sample_id: Some(sample.id.clone()),
                            entity: Some(entity.name.clone()),
                            error: err.to_string(),
                        });
                    }
                }
            }
            samples.push(sample);
        }
    }

    if chains.is_empty() {
        return Err(Error::ChainGeneration(format!(
            "no chains could be generated for behavior {}",
            goal.behavior_id
        )));
    }
    Ok(ThoughtNet {
        goal,
        topics,
        samples,
        chains,
        skipped,
    })
}

/// Verifies the construction constraints over a network: every topic at or
/// above `tau_z`, every sample at or above `tau_s`, and every sibling sample
/// pair strictly under `tau_d`.
pub fn verify_constraints(net: &ThoughtNet, thresholds: &SimilarityThresholds) -> Result<()> {
    for topic in &net.topics {
        let sim = cosine(&topic.embedding, &net.goal.embedding)?;
        if sim < thresholds.tau_z {
            return Err(Error::State(format!(
                "topic {} below tau_z: {sim} < {}",
                topic.id, thresholds.tau_z
            )));
        }
    }
    for sample in &net.samples {
        let sim = cosine(&sample.embedding, &net.goal.embedding)?;
        if sim < thresholds.tau_s {
            return Err(Error::State(format!(
                "sample {} below tau_s: {sim} < {}",
                sample.id, thresholds.tau_s
            )));
        }
    }
    for (i, a) in net.samples.iter().enumerate() {
        for b in &net.samples[i + 1..] {
            if a.topic_id != b.topic_id {
                continue;
            }
            let sim = cosine(&a.embedding, &b.embedding)?;
            if sim >= thresholds.tau_d {
                return Err(Error::State(format!(
                    "siblings {} and {} reach tau_d: {sim} >= {}",
                    a.id, b.id, thresholds.tau_d
                )));
            }
        }
    }
    for chain in &net.chains {
        let topic_ok = net.topics.iter().any(|t| t.id == chain.topic_id);
        let sample_ok = net.samples.iter().any(|s| s.id == chain.sample_id);
        if !topic_ok || !sample_ok {
            return Err(Error::State(format!(
                "chain {} references a missing topic or sample",
                chain.id
            )));
        }
    }
    Ok(())
}

// --- persistence ------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GoalRecord {
    behavior_id: String,
    raw_prompt: String,
    core_goal: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    embedding: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TopicRecord {
    id: String,
    text: String,
    sim_to_goal: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    embedding: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SampleRecord {
    id: String,
    topic_id: String,
    text: String,
    sim_to_goal: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    embedding: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EntityRecord {
    sample_id: String,
    entity_class: EntityClass,
    name: String,
}

/// Serialized form of one behavior's network: goal, topics, samples,
/// entities, chains (embeddings included only when requested).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkFile {
    goal: GoalRecord,
    topics: Vec<TopicRecord>,
    samples: Vec<SampleRecord>,
    entities: Vec<EntityRecord>,
    chains: Vec<QueryChain>,
    #[serde(default)]
    skipped: Vec<SkipRecord>,
}

impl NetworkFile {
    pub fn from_network(net: &ThoughtNet, store_embeddings: bool) -> Self {
        let emb = |e: &Embedding| {
            if store_embeddings {
                Some(e.values().to_vec())
            } else {
                None
            }
        };
        NetworkFile {
            goal: GoalRecord {
                behavior_id: net.goal.behavior_id.clone(),
                raw_prompt: net.goal.raw_prompt.clone(),
                core_goal: net.goal.core_goal.clone(),
                embedding: emb(&net.goal.embedding),
            },
            topics: net
                .topics
                .iter()
                .map(|t| TopicRecord {
                    id: t.id.clone(),
                    text: t.text.clone(),
                    sim_to_goal: t.sim_to_goal,
                    embedding: emb(&t.embedding),
                })
                .collect(),
            samples: net
                .samples
                .iter()
                .map(|s| SampleRecord {
                    id: s.id.clone(),
                    topic_id: s.topic_id.clone(),
                    text: s.text.clone(),
                    sim_to_goal: s.sim_to_goal,
                    embedding: emb(&s.embedding),
                })
                .collect(),
            entities: net
                .samples
                .iter()
                .flat_map(|s| {
                    s.entities.iter().map(|e| EntityRecord {
                        sample_id: s.id.clone(),
                        entity_class: e.entity_class,
                        name: e.name.clone(),
                    })
                })
                .collect(),
            chains: net.chains.clone(),
            skipped: net.skipped.clone(),
        }
    }

    /// Rebuilds the in-memory network, re-embedding any text whose embedding
    /// was not stored (embeddings are cached, so this is cheap offline).
    pub fn into_network(
        self,
        handle: &GatewayHandle<'_>,
        embedder: &str,
    ) -> Result<ThoughtNet> {
        let restore = |stored: Option<Vec<f64>>, text: &str| -> Result<Embedding> {
            match stored {
                Some(values) => Embedding::new(values),
                None => handle.embed(embedder, text),
            }
        };
        let goal = Goal {
            embedding: restore(self.goal.embedding, &self.goal.core_goal)?,
            behavior_id: self.goal.behavior_id,
            raw_prompt: self.goal.raw_prompt,
            core_goal: self.goal.core_goal,
        };
        let topics = self
            .topics
            .into_iter()
            .map(|t| {
                Ok(Topic {
                    embedding: restore(t.embedding, &t.text)?,
                    id: t.id,
                    text: t.text,
                    sim_to_goal: t.sim_to_goal,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut samples = self
            .samples
            .into_iter()
            .map(|s| {
                Ok(Sample {
                    embedding: restore(s.embedding, &s.text)?,
                    id: s.id,
                    topic_id: s.topic_id,
                    text: s.text,
                    sim_to_goal: s.sim_to_goal,
                    entities: Vec::new(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        for record in self.entities {
            if let Some(sample) = samples.iter_mut().find(|s| s.id == record.sample_id) {
                sample.entities.push(Entity {
                    entity_class: record.entity_class,
                    name: record.name,
                });
            }
        }
        Ok(ThoughtNet {
            goal,
            topics,
            samples,
            chains: self.chains,
            skipped: self.skipped,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::clock::VirtualClock;
    use crate::gateway::scripted::QueueBackend;
    use crate::gateway::{EndpointKind, Gateway, ModelEndpoint, Role};
    use std::path::Path;
    use std::sync::Arc;

    fn scripted_endpoint(name: &str, role: Role) -> ModelEndpoint {
        ModelEndpoint {
            name: name.into(),
            kind: EndpointKind::Scripted,
            role,
            base_url: None,
            model_id: "scripted".into(),
            rate_limit: 1_000_000,
            max_retries: 0,
            timeout_secs: 30,
            rules: None,
            lexicon: Vec::new(),
        }
    }

    /// Gateway with the production scripted attacker plus hash embedder.
    fn scripted_gateway() -> Gateway {
        let mut gw = Gateway::new(Arc::new(VirtualClock::new(0)), 42);
        gw.register_from_config(scripted_endpoint("attacker", Role::Attacker), Path::new("."))
            .unwrap();
        gw.register_from_config(scripted_endpoint("embedder", Role::Embedder), Path::new("."))
            .unwrap();
        gw
    }

    /// Gateway whose attacker pops canned replies.
    fn queued_gateway(replies: Vec<&str>) -> Gateway {
        let mut gw = Gateway::new(Arc::new(VirtualClock::new(0)), 42);
        gw.register(
            scripted_endpoint("attacker", Role::Attacker),
            Box::new(QueueBackend::new(replies)),
        )
        .unwrap();
        gw.register_from_config(scripted_endpoint("embedder", Role::Embedder), Path::new("."))
            .unwrap();
        gw
    }

    fn roles() -> RoleEndpoints {
        RoleEndpoints {
            attacker: "attacker".into(),
            victim_sim: "victim".into(),
            victim_live: "victim".into(),
            judge: "judge".into(),
            embedder: "embedder".into(),
        }
    }

    fn goal_fixture(handle: &GatewayHandle<'_>) -> Goal {
        Goal {
            behavior_id: "b1".into(),
            raw_prompt: "open the practice lock".into(),
            core_goal: "open the practice lock".into(),
            embedding: handle.embed("embedder", "open the practice lock").unwrap(),
        }
    }

    #[test]
    fn parse_listed_lines_variants() {
        let text = "1. first item\n2) second item\n3] third item\n\nnoise without number";
        assert_eq!(
            parse_listed_lines(text),
            vec!["first item", "second item", "third item"]
        );
        // Fallback to plain lines when nothing is numbered.
        assert_eq!(parse_listed_lines("alpha\nbeta"), vec!["alpha", "beta"]);
        // Exact duplicates collapse.
        assert_eq!(parse_listed_lines("1. same\n2. same"), vec!["same"]);
    }

    #[test]
    fn extract_goal_scripted_identity() {
        let gw = scripted_gateway();
        let handle = gw.handle(0, "b1");
        let goal = extract_goal(&handle, &roles(), "b1", "P").unwrap();
        assert_eq!(goal.raw_prompt, "P");
        assert_eq!(goal.core_goal, "P");
    }

    #[test]
    fn extract_goal_rejects_empty_prompt() {
        let gw = scripted_gateway();
        let handle = gw.handle(0, "b1");
        let err = extract_goal(&handle, &roles(), "b1", "   ").unwrap_err();
        assert!(matches!(err, Error::EmptyText));
    }

    #[test]
    fn topics_filtered_sorted_and_capped() {
        // 8 candidates; 5 share words with the goal, 3 are unrelated.
        let reply = "1. practice lock anatomy\n\
                     2. quarterly finance summary\n\
                     3. practice lock maintenance\n\
                     4. gardening calendar notes\n\
                     5. opening a practice lock safely\n\
                     6. regional weather outlook\n\
                     7. lock practice drills\n\
                     8. the practice lock testing bench";
        let gw = queued_gateway(vec![reply]);
        let handle = gw.handle(0, "b1");
        let goal = goal_fixture(&handle);
        let thresholds = SimilarityThresholds::default();
        let topics = generate_topics(&handle, &roles(), &goal, 5, &thresholds).unwrap();
        assert_eq!(topics.len(), 5);
        for t in &topics {
            assert!(t.sim_to_goal >= thresholds.tau_z, "{} {}", t.text, t.sim_to_goal);
        }
        for w in topics.windows(2) {
            assert!(w[0].sim_to_goal >= w[1].sim_to_goal);
        }
        assert_eq!(topics[0].id, "t1");
    }

    #[test]
    fn topics_error_when_all_fail_twice() {
        let gw = queued_gateway(vec![
            "1. completely unrelated words\n2. evergreen botany",
            "1. still nothing related\n2. moonlit harbor painting",
        ]);
        let handle = gw.handle(0, "b1");
        let goal = goal_fixture(&handle);
        let err =
            generate_topics(&handle, &roles(), &goal, 3, &SimilarityThresholds::default())
                .unwrap_err();
        assert!(matches!(err, Error::TopicGeneration(_)));
    }

    #[test]
    fn sample_admission_matches_bruteforce_greedy_oracle() {
        let candidates = [
            "practice lock session one with the training group",
            "practice lock session one with the training group", // duplicate: rejected by tau_d
            "a second practice lock drill reviewing the open procedure",
            "entirely unrelated picnic in the meadow",            // fails tau_s
            "third practice lock walkthrough for the open steps",
            "practice lock recap focusing on open technique detail",
        ];
        let reply: String = candidates
            .iter()
            .enumerate()
            .map(|(i, c)| format!("{}. {c}\n", i + 1))
            .collect();
        let gw = queued_gateway(vec![&reply]);
        let handle = gw.handle(0, "b1");
        let goal = goal_fixture(&handle);
        let thresholds = SimilarityThresholds {
            tau_z: 0.35,
            tau_s: 0.30,
            tau_d: 0.90,
        };
        let topic = Topic {
            id: "t1".into(),
            text: "practice lock fundamentals".into(),
            embedding: handle.embed("embedder", "practice lock fundamentals").unwrap(),
            sim_to_goal: 0.9,
        };
        let got =
            generate_samples(&handle, &roles(), &topic, 0, &goal, 4, &thresholds).unwrap();

        // Brute-force greedy oracle over the same candidate list.
        let mut expected: Vec<String> = Vec::new();
        let mut expected_embs: Vec<Embedding> = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for c in candidates {
            if !seen.insert(c) {
                continue; // parse_listed_lines dedupes exact repeats
            }
            if expected.len() >= 4 {
                break;
            }
            let e = handle.embed("embedder", c).unwrap();
            if cosine(&e, &goal.embedding).unwrap() < thresholds.tau_s {
                continue;
            }
            if expected_embs
                .iter()
                .all(|s| cosine(&e, s).unwrap() < thresholds.tau_d)
            {
                expected.push(c.to_string());
                expected_embs.push(e);
            }
        }
        let got_texts: Vec<String> = got.iter().map(|s| s.text.clone()).collect();
        assert_eq!(got_texts, expected);
        assert!(got.len() >= 2);
    }

    #[test]
    fn samples_error_when_none_admitted() {
        let gw = queued_gateway(vec![
            "1. unrelated meadow picnic\n2. distant galaxy trivia",
            "1. another unrelated line\n2. pottery kiln schedule",
        ]);
        let handle = gw.handle(0, "b1");
        let goal = goal_fixture(&handle);
        let topic = Topic {
            id: "t1".into(),
            text: "practice lock fundamentals".into(),
            embedding: handle.embed("embedder", "practice lock fundamentals").unwrap(),
            sim_to_goal: 0.9,
        };
        let err = generate_samples(
            &handle,
            &roles(),
            &topic,
            0,
            &goal,
            3,
            &SimilarityThresholds::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::SampleGeneration(_)));
    }

    fn sample_fixture(handle: &GatewayHandle<'_>) -> Sample {
        Sample {
            id: "t1s1".into(),
            topic_id: "t1".into(),
            text: "a supervised practice lock study session".into(),
            embedding: handle
                .embed("embedder", "a supervised practice lock study session")
                .unwrap(),
            sim_to_goal: 0.8,
            entities: Vec::new(),
        }
    }

    #[test]
    fn entities_parse_and_unknown_class_maps_to_other() {
        let gw = queued_gateway(vec!["lockpick trainer: Tools\nmedieval guild: History"]);
        let handle = gw.handle(0, "b1");
        let sample = sample_fixture(&handle);
        let classes = [
            EntityClass::Tools,
            EntityClass::Techniques,
            EntityClass::Regulations,
        ];
        let entities = link_entities(&handle, &roles(), &sample, 0, &classes, 3);
        assert_eq!(entities.len(), 2);
        assert_eq!(entities[0], Entity { entity_class: EntityClass::Tools, name: "lockpick trainer".into() });
        assert_eq!(entities[1].entity_class, EntityClass::Other);
    }

    #[test]
    fn entities_empty_proposal_yields_placeholder() {
        let gw = queued_gateway(vec!["no colon separated lines here"]);
        let handle = gw.handle(0, "b1");
        let sample = sample_fixture(&handle);
        let entities = link_entities(&handle, &roles(), &sample, 0, &[EntityClass::Tools], 2);
        assert_eq!(entities.len(), 1);
        assert_eq!(entities[0].entity_class, EntityClass::Other);
    }

    #[test]
    fn chain_parses_exact_turn_count() {
        let gw = queued_gateway(vec!["1. q one\n2. q two\n3. q three\n4. q four\n5. q five"]);
        let handle = gw.handle(0, "b1");
        let goal = goal_fixture(&handle);
        let topic = Topic {
            id: "t1".into(),
            text: "x".into(),
            embedding: goal.embedding.clone(),
            sim_to_goal: 1.0,
        };
        let sample = sample_fixture(&handle);
        let entity = Entity { entity_class: EntityClass::Tools, name: "kit".into() };
        let turns =
            generate_chain(&handle, &roles(), &topic, &sample, &entity, &goal, 5).unwrap();
        assert_eq!(turns, vec!["q one", "q two", "q three", "q four", "q five"]);
    }

    #[test]
    fn chain_truncates_extra_lines() {
        let reply = "1. a\n2. b\n3. c\n4. d\n5. e\n6. f\n7. g";
        let gw = queued_gateway(vec![reply]);
        let handle = gw.handle(0, "b1");
        let goal = goal_fixture(&handle);
        let topic = Topic {
            id: "t1".into(),
            text: "x".into(),
            embedding: goal.embedding.clone(),
            sim_to_goal: 1.0,
        };
        let sample = sample_fixture(&handle);
        let entity = Entity { entity_class: EntityClass::Tools, name: "kit".into() };
        let turns =
            generate_chain(&handle, &roles(), &topic, &sample, &entity, &goal, 5).unwrap();
        assert_eq!(turns.len(), 5);
        assert_eq!(turns[4], "e");
    }

    #[test]
    fn chain_errors_below_two_lines_after_reask() {
        let gw = queued_gateway(vec!["1. only one", "1. only one again"]);
        let handle = gw.handle(0, "b1");
        let goal = goal_fixture(&handle);
        let topic = Topic {
            id: "t1".into(),
            text: "x".into(),
            embedding: goal.embedding.clone(),
            sim_to_goal: 1.0,
        };
        let sample = sample_fixture(&handle);
        let entity = Entity { entity_class: EntityClass::Tools, name: "kit".into() };
        let err = generate_chain(&handle, &roles(), &topic, &sample, &entity, &goal, 5)
            .unwrap_err();
        assert!(matches!(err, Error::ChainGeneration(_)));
    }

    #[test]
    fn build_network_product_count_and_constraints() {
        let gw = scripted_gateway();
        let handle = gw.handle(0, "b1");
        let goal = extract_goal(&handle, &roles(), "b1", "open the practice lock").unwrap();
        let sizes = BuildSizes {
            n_topics: 2,
            m_samples: 2,
            k_entities: 1,
            t_turns: 3,
        };
        let thresholds = SimilarityThresholds::default();
        let net = build_network(
            &handle,
            &roles(),
            goal,
            &sizes,
            &thresholds,
            &[EntityClass::Tools, EntityClass::Techniques, EntityClass::Regulations],
        )
        .unwrap();
        assert_eq!(net.topics.len(), 2);
        assert_eq!(net.chains.len(), 4); // N*M*K with every stage succeeding
        assert!(net.chains.iter().all(|c| c.status == ChainStatus::Candidate));
        verify_constraints(&net, &thresholds).unwrap();
    }

    #[test]
    fn build_network_skips_failed_triples() {
        // Scripted flow: extract(1) topics(1) then per topic: samples,
        // entities, chains. Rig the queue so one chain call dies.
        let goal_text = "open the practice lock";
        let topics_reply = "1. open the practice lock drills\n2. open the practice lock tooling";
        let samples_reply = |tag: &str| {
            format!(
                "1. practice lock study session {tag} alpha\n2. a distinct practice lock recap of the open steps {tag} kilo lima"
            )
        };
        let gw = queued_gateway(vec![
            topics_reply,
            // topic 1
            &samples_reply("one"),
            "kit one: Tools",
            "1. q1\n2. q2\n3. q3",
            "kit two: Tools",
            "1. q1\n2. q2\n3. q3",
            // topic 2
            &samples_reply("two"),
            "kit three: Tools",
            "nothing parseable",
            "still nothing parseable",
            "kit four: Tools",
            "1. q1\n2. q2\n3. q3",
        ]);
        let handle = gw.handle(0, "b1");
        let goal = Goal {
            behavior_id: "b1".into(),
            raw_prompt: goal_text.into(),
            core_goal: goal_text.into(),
            embedding: handle.embed("embedder", goal_text).unwrap(),
        };
        let sizes = BuildSizes {
            n_topics: 2,
            m_samples: 2,
            k_entities: 1,
            t_turns: 3,
        };
        let net = build_network(
            &handle,
            &roles(),
            goal,
            &sizes,
            &SimilarityThresholds::default(),
            &[EntityClass::Tools],
        )
        .unwrap();
        assert_eq!(net.chains.len(), 3);
        assert_eq!(net.skipped.len(), 1);
        assert_eq!(net.skipped[0].stage, "chain");
    }

    #[test]
    fn network_file_round_trip_without_embeddings() {
        let gw = scripted_gateway();
        let handle = gw.handle(0, "b1");
        let goal = extract_goal(&handle, &roles(), "b1", "open the practice lock").unwrap();
        let sizes = BuildSizes {
            n_topics: 2,
            m_samples: 2,
            k_entities: 1,
            t_turns: 3,
        };
        let thresholds = SimilarityThresholds::default();
        let net = build_network(
            &handle,
            &roles(),
            goal,
            &sizes,
            &thresholds,
            &[EntityClass::Tools],
        )
        .unwrap();
        let file = NetworkFile::from_network(&net, false);
        let json = serde_json::to_string(&file).unwrap();
        assert!(!json.contains("\"embedding\""));
        let parsed: NetworkFile = serde_json::from_str(&json).unwrap();
        let restored = parsed.into_network(&handle, "embedder").unwrap();
        assert_eq!(restored.topics.len(), net.topics.len());
        assert_eq!(restored.chains.len(), net.chains.len());
        // Re-embedding from text matches the originals bit for bit.
        for (a, b) in net.topics.iter().zip(&restored.topics) {
            assert_eq!(a.embedding, b.embedding);
        }
        verify_constraints(&restored, &thresholds).unwrap();
    }

    #[test]
    fn chain_status_transitions_enforced() {
        let mut chain = QueryChain {
            id: "c1".into(),
            index: 0,
            topic_id: "t1".into(),
            sample_id: "t1s1".into(),
            entity: Entity { entity_class: EntityClass::Other, name: "x".into() },
            turns: vec!["a".into(), "b".into()],
            status: ChainStatus::Candidate,
            cumulative_h: 0,
            cumulative_s: 0.0,
            simulated_success: false,
            turn_records: Vec::new(),
        };
        assert!(chain.transition(ChainStatus::Selected).is_err());
        chain.transition(ChainStatus::Simulating).unwrap();
        chain.transition(ChainStatus::Retained).unwrap();
        chain.transition(ChainStatus::Selected).unwrap();
        chain.transition(ChainStatus::Executed).unwrap();
        assert!(chain.transition(ChainStatus::Candidate).is_err());
    }
}
