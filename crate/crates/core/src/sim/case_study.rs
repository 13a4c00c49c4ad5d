//! Scripted reproduction of the coffee-shop causal question: three planners, three
//! chains, answers No (1.0), No (0.9), and Yes (0.92).

use std::collections::{BTreeMap, BTreeSet};

use async_trait::async_trait;

use crate::engine::{ScriptRule, ScriptedBehavior};
use crate::ledger::Role;
use crate::matching::{MatchError, RequirementTagger};
use crate::planning::TaskDescription;

pub const CASE_STUDY_TEXT: &str = "Drew, Kylie, Oliver, and Jen are regular customers at a small, local coffee shop. Given the selling price of the coffee and the cost of daily operation, the coffee shop will turn a profit if anyone orders coffee on a given day. Only one person ordering coffee is needed for the coffee shop to turn a profit that day. Kylie and Oliver usually order coffee on Tuesdays. However, Drew doesn't usually order coffee on Tuesdays. This Tuesday, unexpectedly, Drew ordered coffee. The same day, Kylie ordered coffee, and Oliver also ordered coffee. Since at least one person ordered coffee on Tuesday, the coffee shop made a profit that day. Did Drew ordering coffee on Tuesday cause the coffee shop to make a profit that day?";

const BACKGROUND: &str = "The shop profits if at least one person orders coffee that day. Kylie and Oliver usually order on Tuesdays; Drew usually does not. This Tuesday Drew, Kylie, and Oliver all ordered coffee, and the shop made a profit.";

const DIMENSION: usize = 8;

/// One scripted step: question, answer, and the requirement vector that routes it.
struct Step {
    question: &'static str,
    answer: &'static str,
    requirement: [f64; DIMENSION],
}

fn unit(i: usize) -> [f64; DIMENSION] {
    let mut v = [0.0; DIMENSION];
    v[i] = 1.0;
    v
}

/// Requirement whose cosine with `unit(i)` is `score`, spilling the rest onto `j`.
fn partial(i: usize, j: usize, score: f64) -> [f64; DIMENSION] {
    let mut v = [0.0; DIMENSION];
    v[i] = score;
    v[j] = (1.0 - score * score).sqrt();
    v
}

fn chains() -> [Vec<Step>; 3] {
    [
        vec![
            Step {
                question: "Who ordered coffee at the shop on this Tuesday?",
                answer: "Drew, Kylie, and Oliver",
                requirement: unit(3),
            },
            Step {
                question: "Did at least one person order coffee on this Tuesday?",
                answer: "Yes",
                requirement: unit(2),
            },
            Step {
                question: "Was Drew's action necessary for the coffee shop to make a profit on this Tuesday (since Kylie and Oliver also ordered)?",
                answer: "No",
                requirement: unit(2),
            },
        ],
        vec![
            Step {
                question: "How many orders does the shop need to make a profit on a given day?",
                answer: "1",
                requirement: unit(0),
            },
            Step {
                question: "Would the shop still have made a profit this Tuesday if Drew had not ordered?",
                answer: "Yes",
                requirement: partial(3, 7, 0.8),
            },
            Step {
                question: "Did Drew's order cause the profit that day?",
                answer: "No",
                requirement: partial(2, 1, 0.9),
            },
        ],
        vec![
            Step {
                question: "Did Drew order coffee on this Tuesday?",
                answer: "Yes",
                requirement: unit(3),
            },
            Step {
                question: "Was Drew's order unusual for a Tuesday?",
                answer: "Yes",
                requirement: partial(7, 1, 0.76),
            },
            Step {
                question: "Did Drew's unexpected order make the difference for the profit?",
                answer: "Yes",
                requirement: unit(2),
            },
        ],
    ]
}

/// An agent of the case study: key seed, roles, capability, and scripted engine.
#[derive(Debug, Clone)]
pub struct CaseAgent {
    pub key_seed: u8,
    pub roles: BTreeSet<Role>,
    pub capability: Vec<f64>,
    pub behavior: ScriptedBehavior,
}

#[derive(Debug, Clone)]
pub struct CaseStudy {
    pub task: TaskDescription,
    pub agents: Vec<CaseAgent>,
    pub requirements: BTreeMap<String, Vec<f64>>,
    /// Expected `(answer, confidence)` per chain.
    pub expected: Vec<(&'static str, f64)>,
}

/// Eight agents. Agents 4, 5, and 6 carry planning capability and each script a
/// different decomposition; every agent can execute every step, and requirement
/// vectors route each step to the agent whose capability gives the intended score.
pub fn case_study(task_id: &str) -> CaseStudy {
    let chains = chains();
    let mut exec_rules = vec![ScriptRule::new("Restate only the given facts", BACKGROUND)];
    let mut requirements = BTreeMap::new();
    for chain in &chains {
        for (k, step) in chain.iter().enumerate() {
            exec_rules.push(ScriptRule::new(
                format!("solve the sub-task: \"Q{}: {}\"", k + 1, step.question),
                format!("$\\boxed{{{}}}$", step.answer),
            ));
            requirements.insert(step.question.to_string(), step.requirement.to_vec());
        }
    }
    let decompositions: Vec<String> = chains
        .iter()
        .map(|chain| {
            let subtasks: Vec<String> = chain
                .iter()
                .enumerate()
                .map(|(k, s)| format!("Q{}: {}", k + 1, s.question))
                .collect();
            serde_json::json!({"original_question": CASE_STUDY_TEXT, "subtasks": subtasks})
                .to_string()
        })
        .collect();

    let planning = 4;
    let agents = (0..DIMENSION)
        .map(|i| {
            let mut capability = vec![0.0; DIMENSION];
            capability[i] = 1.0;
            let mut behavior = ScriptedBehavior::default().with_default("$\\boxed{unknown}$");
            if (5..=6).contains(&i) {
                // Planning ability weaker than agent 4's but above everyone else's.
                capability[i] = 0.6;
                capability[planning] = 0.8;
            }
            if (4..=6).contains(&i) {
                behavior = behavior.with_rule(ScriptRule::new(
                    "You are a problem decomposer",
                    decompositions[i - 4].clone(),
                ));
            }
            for rule in &exec_rules {
                behavior = behavior.with_rule(rule.clone());
            }
            CaseAgent {
                key_seed: 100 + i as u8,
                roles: [Role::Planner, Role::Executor].into_iter().collect(),
                capability,
                behavior,
            }
        })
        .collect();

    CaseStudy {
        task: TaskDescription {
            task_id: task_id.to_string(),
            text: CASE_STUDY_TEXT.to_string(),
            options: Some(vec!["Yes".into(), "No".into()]),
        },
        agents,
        requirements,
        expected: vec![("No", 1.0), ("No", 0.9), ("Yes", 0.92)],
    }
}

/// Tagger backed by a fixed text-to-vector table; unknown text tags as zero.
#[derive(Debug, Clone)]
pub struct TableTagger {
    table: BTreeMap<String, Vec<f64>>,
    dimension: usize,
}

impl TableTagger {
    pub fn new(table: BTreeMap<String, Vec<f64>>, dimension: usize) -> Self {
        Self { table, dimension }
    }
}

#[async_trait]
impl RequirementTagger for TableTagger {
    fn dimension(&self) -> usize {
        self.dimension
    }

    async fn tag(&self, text: &str) -> Result<Vec<f64>, MatchError> {
        Ok(self
            .table
            .get(text)
            .cloned()
            .unwrap_or_else(|| vec![0.0; self.dimension]))
    }
}

impl CaseStudy {
    pub fn tagger(&self) -> TableTagger {
        TableTagger::new(self.requirements.clone(), DIMENSION)
    }
}
