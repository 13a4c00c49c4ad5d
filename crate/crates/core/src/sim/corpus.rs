//! Seeded generation of synthetic tasks and agent populations.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{step_marker, SyntheticAgentProfile, SyntheticFixture};
use crate::ledger::Role;
use crate::matching::Taxonomy;
use crate::planning::TaskDescription;

pub const TASKS_FILE: &str = "tasks.jsonl";
pub const AGENTS_FILE: &str = "agents.json";

const PHRASINGS: [&str; 3] = [
    "Using {skill}, what is quantity {k}",
    "With {skill}, which value does item {k} take",
    "Applying {skill}, what is entry {k}",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTask {
    pub task_id: String,
    pub text: String,
    pub answer: String,
}

impl SyntheticTask {
    pub fn description(&self) -> TaskDescription {
        TaskDescription {
            task_id: self.task_id.clone(),
            text: self.text.clone(),
            options: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimAgentSpec {
    pub name: String,
    /// Seed for the agent's signing key.
    pub key_seed: u8,
    pub roles: BTreeSet<Role>,
    /// Declared capability; the synthetic profile holds the true skill.
    pub capability: Vec<f64>,
    pub profile: SyntheticAgentProfile,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorpusParams {
    pub tasks: usize,
    pub min_steps: usize,
    pub max_steps: usize,
    pub alternatives: usize,
}

impl Default for CorpusParams {
    fn default() -> Self {
        Self {
            tasks: 500,
            min_steps: 2,
            max_steps: 4,
            alternatives: 3,
        }
    }
}

fn skill_phrase(taxonomy: &Taxonomy, skills: &[usize]) -> String {
    skills
        .iter()
        .map(|&i| taxonomy.skills[i].name.replace('-', " "))
        .collect::<Vec<_>>()
        .join(" and ")
}

/// Tasks whose steps each need one or two skills. Every step has a numeric
/// ground truth and three wrong alternatives; the last step's truth is the answer.
pub fn generate_tasks(seed: u64, params: CorpusParams, taxonomy: &Taxonomy) -> Vec<SyntheticTask> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = taxonomy.dimension();
    (0..params.tasks)
        .map(|n| {
            let task_id = format!("syn-{seed}-{n:04}");
            let k_steps = rng.gen_range(params.min_steps..=params.max_steps);
            let mut steps = Vec::new();
            for k in 1..=k_steps {
                let width = rng.gen_range(1..=2.min(d));
                let mut skills: Vec<usize> = (0..d).collect::<Vec<_>>();
                skills.shuffle(&mut rng);
                skills.truncate(width);
                skills.sort_unstable();
                let truth: u32 = rng.gen_range(10..1000);
                let mut alts = BTreeSet::new();
                while alts.len() < 3 {
                    let w: u32 = rng.gen_range(10..1000);
                    if w != truth {
                        alts.insert(w.to_string());
                    }
                }
                let alts: Vec<String> = alts.into_iter().collect();
                steps.push((k, skill_phrase(taxonomy, &skills), truth.to_string(), alts));
            }
            let decompositions = (0..params.alternatives.max(1))
                .map(|v| {
                    steps
                        .iter()
                        .map(|(k, skill, truth, alts)| {
                            let stem = PHRASINGS[v % PHRASINGS.len()]
                                .replace("{skill}", skill)
                                .replace("{k}", &k.to_string());
                            format!("Q{k}: {stem} {}?", step_marker(truth, alts))
                        })
                        .collect()
                })
                .collect();
            let answer = steps.last().expect("at least one step").2.clone();
            let fixture = SyntheticFixture {
                background: format!("Synthetic task {task_id} with {k_steps} dependent quantities."),
                decompositions,
            };
            SyntheticTask {
                text: format!("Solve synthetic task {task_id}. {}", fixture.embed()),
                task_id,
                answer,
            }
        })
        .collect()
}

/// A population where each agent is strong in two random skills and weak
/// elsewhere. Every agent plans and executes.
pub fn generate_agents(
    seed: u64,
    count: usize,
    taxonomy: &Taxonomy,
    slope: f64,
    intercept: f64,
) -> Vec<SimAgentSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_a9e7);
    let d = taxonomy.dimension();
    (0..count)
        .map(|i| {
            let mut skill: Vec<f64> = (0..d).map(|_| rng.gen_range(0.0..0.3)).collect();
            let mut dims: Vec<usize> = (0..d).collect();
            dims.shuffle(&mut rng);
            for &s in dims.iter().take(2) {
                skill[s] = rng.gen_range(0.7..=1.0);
            }
            SimAgentSpec {
                name: format!("agent-{i}"),
                key_seed: i as u8 + 1,
                roles: [Role::Planner, Role::Executor].into_iter().collect(),
                capability: skill.clone(),
                profile: SyntheticAgentProfile {
                    true_skill: skill,
                    slope,
                    intercept,
                    seed: seed.wrapping_mul(1_000).wrapping_add(i as u64),
                },
            }
        })
        .collect()
}

pub fn write_corpus(dir: &Path, tasks: &[SyntheticTask], agents: &[SimAgentSpec]) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut f = std::fs::File::create(dir.join(TASKS_FILE))?;
    for t in tasks {
        serde_json::to_writer(&mut f, t)?;
        f.write_all(b"\n")?;
    }
    std::fs::write(dir.join(AGENTS_FILE), serde_json::to_vec_pretty(agents)?)?;
    Ok(())
}

pub fn read_corpus(dir: &Path) -> std::io::Result<(Vec<SyntheticTask>, Vec<SimAgentSpec>)> {
    let mut tasks = Vec::new();
    for line in BufReader::new(std::fs::File::open(dir.join(TASKS_FILE))?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            tasks.push(serde_json::from_str(&line)?);
        }
    }
    let agents = serde_json::from_slice(&std::fs::read(dir.join(AGENTS_FILE))?)?;
    Ok((tasks, agents))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::planning::parse_decomposition;

    #[test]
    fn generation_is_seeded_and_well_formed() {
        let t = Taxonomy::default_taxonomy();
        let params = CorpusParams {
            tasks: 20,
            ..CorpusParams::default()
        };
        let a = generate_tasks(7, params, &t);
        assert_eq!(a, generate_tasks(7, params, &t));
        assert_ne!(a, generate_tasks(8, params, &t));
        for task in &a {
            let fixture = SyntheticFixture::find(&task.text).unwrap();
            for d in &fixture.decompositions {
                let json = serde_json::json!({"original_question": "q", "subtasks": d}).to_string();
                let steps = parse_decomposition(&json, 8).unwrap();
                for s in &steps {
                    assert!(t.tag_text(s).iter().any(|x| *x > 0.0), "{s}");
                }
            }
        }
    }

    #[test]
    fn corpus_round_trips_through_disk() {
        let t = Taxonomy::default_taxonomy();
        let tasks = generate_tasks(1, CorpusParams { tasks: 3, ..Default::default() }, &t);
        let agents = generate_agents(1, 8, &t, 8.0, -3.0);
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), &tasks, &agents).unwrap();
        assert_eq!(read_corpus(dir.path()).unwrap(), (tasks, agents));
    }
}
