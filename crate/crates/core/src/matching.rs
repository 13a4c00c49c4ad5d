//! Capability match scoring and executor selection.
//!
//! Capability and requirement vectors live in the same skill taxonomy, one named
//! skill per dimension. The score is cosine similarity clamped to `[0, 1]`.

use std::cmp::Ordering;
use std::path::Path;
use std::sync::Arc;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{Engine, EngineRequest, SamplingParams};
use crate::protocol::{AgentId, BeaconResponseBody};

const DEFAULT_TAXONOMY: &str = include_str!("../data/taxonomy.json");

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MatchError {
    #[error("vector has zero norm")]
    DegenerateVector,
    #[error("invalid vector: {0}")]
    Validation(String),
    #[error("no beacon responses")]
    NoResponders,
    #[error("requirement tagger failed: {0}")]
    Tagger(String),
}

/// A similarity in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MatchScore(f64);

impl MatchScore {
    pub fn new(value: f64) -> Result<Self, MatchError> {
        if (0.0..=1.0).contains(&value) {
            Ok(Self(value))
        } else {
            Err(MatchError::Validation(format!("score {value} outside [0,1]")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

fn check_unit_vector(components: &[f64], dimension: usize) -> Result<(), MatchError> {
    if components.len() != dimension {
        return Err(MatchError::Validation(format!(
            "expected dimension {dimension}, got {}",
            components.len()
        )));
    }
    if let Some(x) = components.iter().find(|x| !(0.0..=1.0).contains(*x)) {
        return Err(MatchError::Validation(format!("component {x} outside [0,1]")));
    }
    if components.iter().all(|x| *x == 0.0) {
        return Err(MatchError::DegenerateVector);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CapabilityVector(Vec<f64>);

impl CapabilityVector {
    pub fn new(components: Vec<f64>, dimension: usize) -> Result<Self, MatchError> {
        check_unit_vector(&components, dimension)?;
        Ok(Self(components))
    }

    pub fn components(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RequirementVector(Vec<f64>);

impl RequirementVector {
    pub fn new(components: Vec<f64>, dimension: usize) -> Result<Self, MatchError> {
        check_unit_vector(&components, dimension)?;
        Ok(Self(components))
    }

    pub fn uniform(dimension: usize) -> Self {
        Self(vec![1.0 / (dimension as f64).sqrt(); dimension])
    }

    pub fn components(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

pub fn match_score(c: &CapabilityVector, r: &RequirementVector) -> Result<MatchScore, MatchError> {
    cosine_score(c.components(), r.components())
}

/// Cosine similarity of two finite vectors, clamped to `[0, 1]`.
///
/// Scale invariant for any positive rescaling of either argument; the vectors need
/// not lie in the unit cube.
pub fn cosine_score(a: &[f64], b: &[f64]) -> Result<MatchScore, MatchError> {
    if a.len() != b.len() {
        return Err(MatchError::Validation(format!(
            "dimension mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(MatchError::Validation("non-finite component".into()));
    }
    // Rescale by the largest magnitude so tiny or huge inputs neither underflow
    // nor overflow; identical inputs stay identical, so self-similarity is exact.
    let max_a = a.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let max_b = b.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if max_a == 0.0 || max_b == 0.0 {
        return Err(MatchError::DegenerateVector);
    }
    let (mut dot, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (x / max_a, y / max_b);
        dot += x * y;
        aa += x * x;
        bb += y * y;
    }
    let denom = (aa * bb).sqrt();
    Ok(MatchScore((dot / denom).clamp(0.0, 1.0)))
}

/// Total order on beacon responses, best first: higher score, earlier
/// `responded_at`, lower load, smaller agent id.
pub fn selection_order(
    a: &(AgentId, BeaconResponseBody),
    b: &(AgentId, BeaconResponseBody),
) -> Ordering {
    b.1.score
        .total_cmp(&a.1.score)
        .then(a.1.responded_at.cmp(&b.1.responded_at))
        .then(a.1.responder_load.cmp(&b.1.responder_load))
        .then(a.0.cmp(&b.0))
}

pub fn select_executor(
    responses: &[(AgentId, BeaconResponseBody)],
) -> Result<(AgentId, BeaconResponseBody), MatchError> {
    responses
        .iter()
        .min_by(|a, b| selection_order(a, b))
        .cloned()
        .ok_or(MatchError::NoResponders)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Skill {
    pub name: String,
    pub keywords: Vec<String>,
}

/// Named skills, one per vector dimension, with keyword lists for tagging.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Taxonomy {
    pub skills: Vec<Skill>,
}

impl Taxonomy {
    pub fn default_taxonomy() -> Self {
        Self::parse(DEFAULT_TAXONOMY).expect("shipped taxonomy parses")
    }

    pub fn parse(text: &str) -> Result<Self, MatchError> {
        let taxonomy: Taxonomy =
            serde_json::from_str(text).map_err(|e| MatchError::Validation(e.to_string()))?;
        if taxonomy.skills.is_empty() {
            return Err(MatchError::Validation("taxonomy has no skills".into()));
        }
        Ok(taxonomy)
    }

    pub fn load(path: &Path) -> Result<Self, MatchError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| MatchError::Validation(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn dimension(&self) -> usize {
        self.skills.len()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.skills.iter().position(|s| s.name == name)
    }

    /// One-hot vector over the named skills; unknown names are ignored.
    pub fn vector_of(&self, names: &[&str]) -> Vec<f64> {
        let mut v = vec![0.0; self.dimension()];
        for name in names {
            if let Some(i) = self.index_of(name) {
                v[i] = 1.0;
            }
        }
        v
    }

    /// Requirement used when soliciting planners.
    pub fn planning_requirement(&self) -> RequirementVector {
        match self.index_of("planning") {
            Some(_) => RequirementVector(self.vector_of(&["planning"])),
            None => RequirementVector::uniform(self.dimension()),
        }
    }

    /// Sets a skill's component to 1.0 when any of its keywords (or its name)
    /// occurs in `text` as a whole word or phrase, case-insensitively. May return
    /// the zero vector.
    pub fn tag_text(&self, text: &str) -> Vec<f64> {
        let tokens = tokenize(text);
        self.skills
            .iter()
            .map(|skill| {
                let hit = std::iter::once(&skill.name)
                    .chain(&skill.keywords)
                    .any(|kw| contains_phrase(&tokens, &tokenize(kw)));
                if hit {
                    1.0
                } else {
                    0.0
                }
            })
            .collect()
    }
}

fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn contains_phrase(tokens: &[String], phrase: &[String]) -> bool {
    !phrase.is_empty() && tokens.windows(phrase.len()).any(|w| w == phrase)
}

#[async_trait]
pub trait RequirementTagger: Send + Sync {
    fn dimension(&self) -> usize;

    /// Raw tags for `text`; an all-zero result is allowed.
    async fn tag(&self, text: &str) -> Result<Vec<f64>, MatchError>;
}

/// Deterministic tagger driven by the taxonomy's keyword table.
#[derive(Debug, Clone)]
pub struct KeywordTagger {
    taxonomy: Arc<Taxonomy>,
}

impl KeywordTagger {
    pub fn new(taxonomy: Arc<Taxonomy>) -> Self {
        Self { taxonomy }
    }
}

#[async_trait]
impl RequirementTagger for KeywordTagger {
    fn dimension(&self) -> usize {
        self.taxonomy.dimension()
    }

    async fn tag(&self, text: &str) -> Result<Vec<f64>, MatchError> {
        Ok(self.taxonomy.tag_text(text))
    }
}

/// Asks an engine to name the skills a sub-task needs.
pub struct EngineTagger {
    engine: Arc<dyn Engine>,
    taxonomy: Arc<Taxonomy>,
    params: SamplingParams,
}

impl EngineTagger {
    pub fn new(engine: Arc<dyn Engine>, taxonomy: Arc<Taxonomy>, params: SamplingParams) -> Self {
        Self {
            engine,
            taxonomy,
            params,
        }
    }

    fn prompt(&self, text: &str) -> String {
        let names: Vec<&str> = self.taxonomy.skills.iter().map(|s| s.name.as_str()).collect();
        format!(
            "Skills: {}.\nList the skills from this list needed to answer the question below, \
             separated by commas. Output only skill names.\nQuestion: {text}\nSkills needed:",
            names.join(", ")
        )
    }
}

#[async_trait]
impl RequirementTagger for EngineTagger {
    fn dimension(&self) -> usize {
        self.taxonomy.dimension()
    }

    async fn tag(&self, text: &str) -> Result<Vec<f64>, MatchError> {
        let request = EngineRequest::new(self.prompt(text), self.params);
        let reply = self
            .engine
            .generate(&request)
            .await
            .map_err(|e| MatchError::Tagger(e.to_string()))?;
        let named: Vec<String> = reply
            .text
            .split([',', '\n', ';'])
            .map(|s| s.trim().trim_end_matches('.').to_lowercase())
            .collect();
        Ok(self
            .taxonomy
            .skills
            .iter()
            .map(|s| if named.contains(&s.name) { 1.0 } else { 0.0 })
            .collect())
    }
}

/// Requirement vector for a sub-task. A tagger that finds nothing yields the
/// uniform vector `1/sqrt(D)` and a warning.
pub async fn requirement_of(
    subtask_text: &str,
    tagger: &dyn RequirementTagger,
) -> Result<RequirementVector, MatchError> {
    if subtask_text.trim().is_empty() {
        return Err(MatchError::Validation("empty sub-task text".into()));
    }
    let raw = tagger.tag(subtask_text).await?;
    let dimension = tagger.dimension();
    if raw.iter().all(|x| *x == 0.0) {
        tracing::warn!(subtask = subtask_text, "no skill tags found; using uniform requirement");
        return Ok(RequirementVector::uniform(dimension));
    }
    RequirementVector::new(raw, dimension)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::Identity;

    fn id(seed: u8) -> AgentId {
        Identity::from_seed([seed; 32]).agent_id()
    }

    fn resp(score: f64, at: u64, load: u32) -> BeaconResponseBody {
        BeaconResponseBody {
            score,
            responder_load: load,
            responded_at: at,
        }
    }

    #[test]
    fn self_similarity_and_orthogonality() {
        for v in [vec![1.0, 0.5, 0.0], vec![0.3, 0.7, 0.1], vec![1e-200, 1e-200, 0.0]] {
            assert_eq!(cosine_score(&v, &v).unwrap().value(), 1.0);
        }
        assert_eq!(cosine_score(&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]).unwrap().value(), 0.0);
    }

    #[test]
    fn frozen_cosine_oracle() {
        // mpmath, 50 digits: 0.94868329805051379959966806332981556011586654179757
        let s = cosine_score(&[1.0, 0.5, 0.0], &[1.0, 1.0, 0.0]).unwrap().value();
        assert!((s - 0.948_683_298_050_513_8).abs() < 1e-15);
    }

    #[test]
    fn degenerate_and_mismatched_vectors() {
        assert_eq!(cosine_score(&[0.0; 3], &[1.0, 0.0, 0.0]), Err(MatchError::DegenerateVector));
        assert!(matches!(
            cosine_score(&[1.0; 3], &[1.0; 4]),
            Err(MatchError::Validation(_))
        ));
        assert!(matches!(
            CapabilityVector::new(vec![1.2, 0.0], 2),
            Err(MatchError::Validation(_))
        ));
        assert_eq!(RequirementVector::new(vec![0.0; 2], 2), Err(MatchError::DegenerateVector));
    }

    #[test]
    fn negative_cosine_is_clamped() {
        assert_eq!(cosine_score(&[1.0, 0.0], &[-1.0, 0.0]).unwrap().value(), 0.0);
    }

    #[test]
    fn argmax_selection() {
        let (a, b, c) = (id(1), id(2), id(3));
        let rs = vec![(a, resp(0.2, 1, 0)), (b, resp(0.9, 1, 0)), (c, resp(0.7, 1, 0))];
        assert_eq!(select_executor(&rs).unwrap().0, b);
        assert_eq!(select_executor(&rs[..1]).unwrap().0, a);
        assert_eq!(select_executor(&[]), Err(MatchError::NoResponders));
    }

    #[test]
    fn tie_break_matches_brute_force_over_orderings() {
        let (b, c) = (id(2), id(3));
        let fixture = vec![(b, resp(0.9, 5, 0)), (c, resp(0.9, 3, 0))];
        let mut reversed = fixture.clone();
        reversed.reverse();
        for rs in [fixture, reversed] {
            assert_eq!(select_executor(&rs).unwrap().0, c);
        }
        // load, then id
        let rs = vec![(b, resp(0.5, 3, 2)), (c, resp(0.5, 3, 1))];
        assert_eq!(select_executor(&rs).unwrap().0, c);
        let rs = vec![(b, resp(0.5, 3, 1)), (c, resp(0.5, 3, 1))];
        assert_eq!(select_executor(&rs).unwrap().0, b.min(c));
    }

    #[tokio::test]
    async fn keyword_requirements() {
        let taxonomy = Arc::new(Taxonomy::default_taxonomy());
        let tagger = KeywordTagger::new(taxonomy.clone());
        let r = requirement_of("Use arithmetic here", &tagger).await.unwrap();
        assert_eq!(r.components()[taxonomy.index_of("arithmetic").unwrap()], 1.0);

        let r = requirement_of(
            "What is the product of the roots of this quadratic equation?",
            &tagger,
        )
        .await
        .unwrap();
        // "product" -> arithmetic; "roots", "quadratic", "equation" -> algebra.
        assert_eq!(r.components(), &[1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);

        let r = requirement_of("zzz qqq", &tagger).await.unwrap();
        assert_eq!(r, RequirementVector::uniform(8));
        assert!(requirement_of("  ", &tagger).await.is_err());
    }

    #[test]
    fn keywords_match_whole_words_only() {
        let t = Taxonomy::default_taxonomy();
        // "summary" must not trigger "sum"; "in terms of" matches as a phrase.
        assert_eq!(t.tag_text("a summary")[0], 0.0);
        assert_eq!(t.tag_text("x in terms of y")[1], 1.0);
        assert_eq!(t.tag_text("terms in of")[1], 0.0);
    }

    #[test]
    fn planning_requirement_is_one_hot() {
        let t = Taxonomy::default_taxonomy();
        let r = t.planning_requirement();
        assert_eq!(r.components()[t.index_of("planning").unwrap()], 1.0);
        assert_eq!(r.components().iter().sum::<f64>(), 1.0);
    }
}
