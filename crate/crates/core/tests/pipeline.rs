use std::sync::Arc;

use agora_core::engine::{SyntheticAgentProfile, SyntheticFixture};
use agora_core::ledger::Role;
use agora_core::matching::Taxonomy;
use agora_core::protocol::Identity;
use agora_core::sim::{
    case_study, generate_agents, generate_tasks, CorpusParams, LocalCluster, RunOptions,
    SimAgentSpec, SimError,
};
use agora_core::voting::VoteError;

fn agent_id(seed: u8) -> agora_core::protocol::AgentId {
    Identity::from_seed([seed; 32]).agent_id()
}

#[tokio::test]
async fn case_study_verdict_is_no_with_weight_1_9() {
    let cs = case_study("coffee");
    let cluster = LocalCluster::case_study(&cs).unwrap();
    let outcome = cluster.run_task(&cs.task, &RunOptions::default()).await.unwrap();

    let mut chains = outcome.chains.clone();
    chains.sort_by_key(|c| c.chain_id);
    assert_eq!(chains.len(), 3);
    for (c, (answer, conf)) in chains.iter().zip(&cs.expected) {
        assert_eq!(c.raw_answer, *answer);
        assert!((c.confidence - conf).abs() < 1e-9, "{} vs {conf}", c.confidence);
    }
    assert_eq!(outcome.verdict.answer, "no");
    assert_eq!(outcome.verdict.display, "No");
    assert!((outcome.verdict.winning_weight - 1.9).abs() < 1e-9);
    assert!((outcome.verdict.total_weight - 2.82).abs() < 1e-9);
}

#[tokio::test]
async fn contributions_count_completed_steps() {
    let cs = case_study("coffee-contrib");
    let cluster = LocalCluster::case_study(&cs).unwrap();
    let outcome = cluster.run_task(&cs.task, &RunOptions::default()).await.unwrap();
    let steps: usize = outcome.chains.iter().map(|c| c.per_step_scores.len()).sum();
    let ledger = cluster.ledger();
    let total: u64 = ledger.snapshot().records.values().map(|r| r.contributions).sum();
    assert_eq!(total as usize, steps);
    assert_eq!(steps, 9);
}

#[tokio::test]
async fn single_chain_uses_the_best_planner() {
    let cs = case_study("coffee-k1");
    let cluster = LocalCluster::case_study(&cs).unwrap();
    let options = RunOptions {
        chains: 1,
        ..RunOptions::default()
    };
    let outcome = cluster.run_task(&cs.task, &options).await.unwrap();
    assert_eq!(outcome.chains.len(), 1);
    assert_eq!(outcome.verdict.answer, "no");
    assert!((outcome.verdict.winning_weight - 1.0).abs() < 1e-9);
}

#[tokio::test]
async fn crashed_executor_is_routed_around() {
    let cs = case_study("coffee-crash");
    let cluster = LocalCluster::case_study(&cs).unwrap();
    // Agent 3 is the only perfect match for the first step of two chains.
    cluster.crash(&agent_id(103));
    let outcome = cluster.run_task(&cs.task, &RunOptions::default()).await.unwrap();
    assert_eq!(outcome.chains.len(), 3);
    let ledger = cluster.ledger();
    assert_eq!(ledger.snapshot().get(&agent_id(103)).unwrap().contributions, 0);
    // Every step still completed, just with a weaker match.
    assert!(outcome.chains.iter().all(|c| c.per_step_scores.len() == 3));
    assert!(outcome.chains.iter().any(|c| c.confidence < 0.9));
}

#[tokio::test]
async fn crashed_planner_only_costs_its_own_chain() {
    let cs = case_study("coffee-planner");
    let cluster = LocalCluster::case_study(&cs).unwrap();
    // Agent 4 is the strongest planner; its chain is the 1.0-confidence "No".
    cluster.crash(&agent_id(104));
    let outcome = cluster.run_task(&cs.task, &RunOptions::default()).await.unwrap();
    assert!(!outcome.chains.is_empty());
    assert!(outcome.chains.len() <= 3);
    for c in &outcome.chains {
        assert!(c.confidence > 0.0);
    }
}

#[tokio::test]
async fn all_agents_down_is_a_typed_failure() {
    let cs = case_study("coffee-down");
    let cluster = LocalCluster::case_study(&cs).unwrap();
    for id in cluster.agent_ids() {
        cluster.crash(&id);
    }
    let err = cluster.run_task(&cs.task, &RunOptions::default()).await.unwrap_err();
    assert!(matches!(err, SimError::Planning(_)), "{err}");
}

#[tokio::test]
async fn chains_failing_during_execution_surface_in_vote_error() {
    let taxonomy = Arc::new(Taxonomy::default_taxonomy());
    let fixture = SyntheticFixture {
        background: "facts".into(),
        decompositions: vec![vec!["Q1: Using arithmetic, what is quantity 1?".into()]],
    };
    let task = agora_core::planning::TaskDescription::new(
        "doomed",
        format!("Solve this. {}", fixture.embed()),
    )
    .unwrap();
    // A planner only: nothing can execute the steps.
    let spec = SimAgentSpec {
        name: "planner".into(),
        key_seed: 9,
        roles: [Role::Planner].into_iter().collect(),
        capability: vec![0.5; taxonomy.dimension()],
        profile: SyntheticAgentProfile {
            true_skill: vec![1.0; taxonomy.dimension()],
            slope: 8.0,
            intercept: -3.0,
            seed: 1,
        },
    };
    let cluster = LocalCluster::synthetic(&[spec], taxonomy).unwrap();
    let err = cluster.run_task(&task, &RunOptions::default()).await.unwrap_err();
    match err {
        SimError::Vote { source, failures } => {
            assert_eq!(source, VoteError::NoSurvivingChains);
            assert!(!failures.is_empty());
        }
        other => panic!("unexpected {other}"),
    }
}

#[tokio::test]
async fn synthetic_cluster_answers_most_tasks() {
    let taxonomy = Arc::new(Taxonomy::default_taxonomy());
    let tasks = generate_tasks(3, CorpusParams { tasks: 30, ..Default::default() }, &taxonomy);
    let agents = generate_agents(3, 8, &taxonomy, 8.0, -3.0);
    let cluster = LocalCluster::synthetic(&agents, taxonomy).unwrap();
    let mut correct = 0;
    for t in &tasks {
        let outcome = cluster.run_task(&t.description(), &RunOptions::default()).await.unwrap();
        if outcome.verdict.answer == t.answer {
            correct += 1;
        }
    }
    assert!(correct >= 15, "{correct}/30");
}
