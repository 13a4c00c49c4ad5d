//! Seeded stochastic stand-in for a model, used to reproduce ablation trends.
//!
//! Tasks embed their ground truth in the prompt: the task text carries a
//! [`SyntheticFixture`] between `<fixture>` tags, and every sub-task carries a step
//! marker `[expect=<answer>; alt=<wrong>|<wrong>]`. An agent answers a step
//! correctly with probability `sigmoid(slope * s + intercept)`, where `s` is the
//! match score between its true skill vector and the step's requirement. A wrong
//! answer anywhere in the context makes every later step wrong.

use std::sync::Arc;
use std::time::Instant;

use async_trait::async_trait;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tokio::sync::Mutex;

use super::{Engine, EngineError, EngineReply, EngineRequest};
use crate::matching::{cosine_score, Taxonomy};

pub const FIXTURE_OPEN: &str = "<fixture>";
pub const FIXTURE_CLOSE: &str = "</fixture>";

const DECOMPOSE_MARK: &str = "You are a problem decomposer";
const EXECUTE_MARK: &str = "solve the sub-task: \"";
const BACKGROUND_MARK: &str = "Restate only the given facts";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticAgentProfile {
    pub true_skill: Vec<f64>,
    pub slope: f64,
    pub intercept: f64,
    pub seed: u64,
}

impl SyntheticAgentProfile {
    pub fn correct_probability(&self, match_score: f64) -> f64 {
        sigmoid(self.slope * match_score + self.intercept)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Ground truth carried inside a synthetic task's text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticFixture {
    pub background: String,
    /// Alternative decompositions; each entry is a list of `Q<n>: ...` sub-tasks.
    pub decompositions: Vec<Vec<String>>,
}

impl SyntheticFixture {
    pub fn embed(&self) -> String {
        format!(
            "{FIXTURE_OPEN}{}{FIXTURE_CLOSE}",
            serde_json::to_string(self).expect("fixture serializes")
        )
    }

    pub fn find(text: &str) -> Option<Self> {
        let start = text.rfind(FIXTURE_OPEN)? + FIXTURE_OPEN.len();
        let end = start + text[start..].find(FIXTURE_CLOSE)?;
        serde_json::from_str(&text[start..end]).ok()
    }
}

pub fn step_marker(expect: &str, alternatives: &[String]) -> String {
    format!("[expect={expect}; alt={}]", alternatives.join("|"))
}

/// Parses the first step marker in `text`, returning `(expect, alternatives, end)`
/// where `end` is the byte offset just past the marker.
pub fn parse_step_marker(text: &str) -> Option<(String, Vec<String>, usize)> {
    let start = text.find("[expect=")?;
    let body_start = start + "[expect=".len();
    let close = body_start + text[body_start..].find(']')?;
    let body = &text[body_start..close];
    let (expect, alts) = body.split_once("; alt=")?;
    let alternatives = alts
        .split('|')
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect();
    Some((expect.to_string(), alternatives, close + 1))
}

#[derive(Debug, Default)]
struct Counters {
    calls: u64,
}

pub struct SyntheticEngine {
    id: String,
    profile: SyntheticAgentProfile,
    taxonomy: Arc<Taxonomy>,
    counters: Mutex<Counters>,
}

impl SyntheticEngine {
    pub fn new(id: impl Into<String>, profile: SyntheticAgentProfile, taxonomy: Arc<Taxonomy>) -> Self {
        Self {
            id: id.into(),
            profile,
            taxonomy,
            counters: Mutex::new(Counters::default()),
        }
    }

    pub fn profile(&self) -> &SyntheticAgentProfile {
        &self.profile
    }

    /// One Bernoulli draw of step correctness at `match_score`, keyed by `nonce`.
    pub fn draw_correct(&self, match_score: f64, nonce: u64) -> bool {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.profile.seed, nonce, 0));
        rng.gen::<f64>() < self.profile.correct_probability(match_score)
    }

    fn rng_for(&self, request: &EngineRequest) -> ChaCha8Rng {
        let digest = Sha256::digest(request.prompt.as_bytes());
        let prompt_hash = u64::from_le_bytes(digest[..8].try_into().unwrap());
        ChaCha8Rng::seed_from_u64(mix(
            self.profile.seed,
            prompt_hash,
            request.seed.unwrap_or(0),
        ))
    }

    fn respond(&self, request: &EngineRequest) -> String {
        let prompt = &request.prompt;
        let mut rng = self.rng_for(request);
        if prompt.contains(DECOMPOSE_MARK) {
            let Some(fixture) = SyntheticFixture::find(prompt) else {
                return String::new();
            };
            if fixture.decompositions.is_empty() {
                return String::new();
            }
            let pick = rng.gen_range(0..fixture.decompositions.len());
            serde_json::json!({
                "original_question": fixture.background,
                "subtasks": fixture.decompositions[pick],
            })
            .to_string()
        } else if prompt.contains(EXECUTE_MARK) {
            self.execute(prompt, &mut rng)
        } else if prompt.contains(BACKGROUND_MARK) {
            SyntheticFixture::find(prompt)
                .map(|f| f.background)
                .unwrap_or_default()
        } else {
            String::new()
        }
    }

    fn execute(&self, prompt: &str, rng: &mut ChaCha8Rng) -> String {
        // Collect every marker in order; the last belongs to the current sub-task.
        let mut markers = Vec::new();
        let mut offset = 0;
        while let Some((expect, alts, end)) = parse_step_marker(&prompt[offset..]) {
            markers.push((expect, alts, offset + end));
            offset += end;
        }
        let Some((expect, alts, current_end)) = markers.pop() else {
            return String::new();
        };

        let chain_intact = markers.iter().all(|(expect, _, end)| {
            let rest = &prompt[*end..];
            rest.find("Answer: ")
                .and_then(|i| crate::execution::first_boxed(&rest[i..]))
                .is_some_and(|given| given == *expect)
        });

        let question_start = prompt.rfind(EXECUTE_MARK).map_or(0, |i| i + EXECUTE_MARK.len());
        let question = &prompt[question_start.min(current_end)..current_end];
        let requirement = self.taxonomy.tag_text(question);
        let score = cosine_score(&self.profile.true_skill, &requirement)
            .map(|s| s.value())
            .unwrap_or(0.0);

        let roll = rng.gen::<f64>();
        let answer = if chain_intact && roll < self.profile.correct_probability(score) {
            expect
        } else if alts.is_empty() {
            format!("not {expect}")
        } else {
            alts[rng.gen_range(0..alts.len())].clone()
        };
        format!("$\\boxed{{{answer}}}$")
    }
}

fn mix(a: u64, b: u64, c: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(a.to_le_bytes());
    h.update(b.to_le_bytes());
    h.update(c.to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

#[async_trait]
impl Engine for SyntheticEngine {
    fn id(&self) -> &str {
        &self.id
    }

    async fn generate(&self, request: &EngineRequest) -> Result<EngineReply, EngineError> {
        let start = Instant::now();
        request.validate()?;
        self.counters.lock().await.calls += 1;
        let text = self.respond(request);
        Ok(EngineReply {
            text,
            latency: start.elapsed(),
            engine_id: self.id.clone(),
        })
    }
}
