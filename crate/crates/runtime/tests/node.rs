use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::Duration;

use agora_core::engine::EngineConfig;
use agora_core::ledger::{PeerAddress, Role};
use agora_core::matching::RequirementTagger;
use agora_core::protocol::{Codec, Envelope, Identity, Payload, Slot, TaskResultBody};
use agora_core::sim::case_study;
use agora_runtime::cluster::{fast_timing, Cluster};
use agora_runtime::dispatch::DispatchOutcome;
use agora_runtime::gateway::SubmitRequest;
use agora_runtime::{start_node_with, MemoryNetwork, NodeConfig, NodeEnv, StartupError, SubmitOutcome};

fn free_port() -> u16 {
    std::net::TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port()
}

fn scripted(addr: PeerAddress, seed: u8) -> NodeConfig {
    let mut c = NodeConfig::new(
        addr,
        [Role::Planner, Role::Executor],
        vec![0.5; 8],
        EngineConfig::Scripted {
            behavior: None,
            behavior_path: None,
        },
    );
    c.identity_seed = Some(hex::encode([seed; 32]));
    c.timing = fast_timing();
    c
}

fn local(port: u16) -> PeerAddress {
    PeerAddress::new("127.0.0.1", port)
}

#[tokio::test]
async fn single_node_registers_itself() {
    let node = start_node_with(scripted(local(free_port()), 1), NodeEnv::tcp()).await.unwrap();
    let snap = node.ledger();
    assert_eq!(snap.len(), 1);
    assert!(snap.get(&node.agent_id()).is_some());
    let status = node.status();
    assert_eq!(status.available_planners, 1);
    assert_eq!(status.available_executors, 1);
    assert_eq!(status.load, 0);
    node.shutdown().await;
}

#[tokio::test]
async fn taken_port_is_a_startup_error_and_freed_on_shutdown() {
    let addr = local(free_port());
    let first = start_node_with(scripted(addr.clone(), 1), NodeEnv::tcp()).await.unwrap();
    let err = start_node_with(scripted(addr.clone(), 2), NodeEnv::tcp()).await.err().unwrap();
    assert!(matches!(err, StartupError::Bind { .. }), "{err}");
    first.shutdown().await;
    let again = start_node_with(scripted(addr, 2), NodeEnv::tcp()).await.unwrap();
    again.shutdown().await;
}

#[tokio::test]
async fn invalid_config_is_rejected_before_binding() {
    let mut c = scripted(PeerAddress::new("n", 1), 1);
    c.capability_vector = vec![0.5; 3];
    let net = MemoryNetwork::new();
    let err = start_node_with(c, NodeEnv::memory(&net)).await.err().unwrap();
    assert!(matches!(err, StartupError::Config(_)), "{err}");
    assert!(!net.is_bound(&PeerAddress::new("n", 1)));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn three_tcp_nodes_converge() {
    let ports: Vec<u16> = (0..3).map(|_| free_port()).collect();
    let mut nodes = Vec::new();
    for (i, p) in ports.iter().enumerate() {
        let mut c = scripted(local(*p), 10 + i as u8);
        if i > 0 {
            c.seeds = vec![local(ports[0])];
        }
        nodes.push(start_node_with(c, NodeEnv::tcp()).await.unwrap());
    }
    let ids: BTreeSet<_> = nodes.iter().map(|n| n.agent_id()).collect();
    for n in &nodes {
        let ids = ids.clone();
        tokio::time::timeout(
            Duration::from_secs(5),
            n.wait_for_ledger(move |s| ids.iter().all(|id| s.get(id).is_some())),
        )
        .await
        .expect("ledgers converge");
    }
    for n in nodes {
        n.shutdown().await;
    }
}

#[tokio::test]
async fn forged_and_unknown_envelopes_are_audited() {
    let net = MemoryNetwork::new();
    let node = start_node_with(scripted(PeerAddress::new("a", 1), 1), NodeEnv::memory(&net)).await.unwrap();
    let codec = Codec::new(8);
    let stranger = Identity::from_seed([99; 32]);
    let env = Envelope::signed(
        &stranger,
        Slot::new("t", 1, 1),
        Payload::TaskResult(TaskResultBody::failure()),
        1,
    )
    .unwrap();
    let out = node.inner().deliver(codec.encode(&env).unwrap()).await;
    assert!(matches!(out, Some(DispatchOutcome::Rejected(_))));

    // Claims to come from the node itself but is signed by someone else.
    let mut forged = env.clone();
    forged.sender = node.agent_id();
    let out = node.inner().deliver(codec.encode(&forged).unwrap()).await;
    assert!(matches!(out, Some(DispatchOutcome::Rejected(_))));

    let audit = node.audit();
    assert_eq!(audit.len(), 2);
    assert!(audit[0].reason.contains("unknown sender"));
    assert!(audit[1].reason.contains("signature"));
    assert_eq!(audit[1].msg_type.as_deref(), Some("TaskResult"));
    node.shutdown().await;
}

#[tokio::test]
async fn duplicate_task_results_are_dropped() {
    let net = MemoryNetwork::new();
    let mut c = scripted(PeerAddress::new("a", 1), 7);
    c.identity_seed = Some(hex::encode([7u8; 32]));
    let node = start_node_with(c, NodeEnv::memory(&net)).await.unwrap();
    let me = Identity::from_seed([7; 32]);
    let codec = Codec::new(8);
    let first = Envelope::signed(
        &me,
        Slot::new("t", 1, 1),
        Payload::TaskResult(TaskResultBody::success("4", vec![0.5])),
        1,
    )
    .unwrap();
    // Same slot and sender, different content and signature.
    let second = Envelope::signed(
        &me,
        Slot::new("t", 1, 1),
        Payload::TaskResult(TaskResultBody::success("5", vec![0.7])),
        2,
    )
    .unwrap();
    let d = |e: &Envelope| node.inner().deliver(codec.encode(e).unwrap());
    assert_eq!(d(&first).await, Some(DispatchOutcome::Handled));
    assert_eq!(d(&second).await, Some(DispatchOutcome::Duplicate));
    assert_eq!(d(&first).await, Some(DispatchOutcome::Duplicate));
    node.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn case_study_over_tcp() {
    let study = case_study("case-tcp");
    let mut configs = Cluster::case_study_configs(&study, fast_timing());
    let ports: Vec<u16> = configs.iter().map(|_| free_port()).collect();
    for (i, c) in configs.iter_mut().enumerate() {
        c.listen = local(ports[i]);
        if i > 0 {
            c.seeds = vec![local(ports[0])];
        }
    }
    let tagger: Arc<dyn RequirementTagger> = Arc::new(study.tagger());
    let mut nodes = Vec::new();
    for c in configs {
        nodes.push(start_node_with(c, NodeEnv::tcp().with_tagger(tagger.clone())).await.unwrap());
    }
    let ids: Vec<_> = nodes.iter().map(|n| n.agent_id()).collect();
    for n in &nodes {
        let ids = ids.clone();
        tokio::time::timeout(
            Duration::from_secs(5),
            n.wait_for_ledger(move |s| ids.iter().all(|id| s.get(id).is_some())),
        )
        .await
        .unwrap();
    }
    let out = nodes[0].submit(study.task.clone(), 3).await.unwrap();
    assert_eq!(out.verdict.answer, "no");
    assert!((out.verdict.winning_weight - 1.9).abs() < 1e-9, "{out:#?}");
    assert!((out.verdict.total_weight - 2.82).abs() < 1e-9, "{out:#?}");
    for n in nodes {
        n.shutdown().await;
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn contributions_are_counted_once_per_completed_step() {
    let study = case_study("case-contrib");
    let cluster = Cluster::case_study(&study, fast_timing()).await.unwrap();
    assert!(cluster.wait_converged(Duration::from_secs(5)).await);
    let out = cluster.node(0).unwrap().submit(study.task.clone(), 3).await.unwrap();
    let steps: u64 = out.chains.iter().map(|c| c.per_step_scores.len() as u64).sum();
    assert_eq!(steps, 9);
    // Each executor counts its own work; gossip carries the counts to node 0.
    tokio::time::timeout(
        Duration::from_secs(5),
        cluster
            .node(0)
            .unwrap()
            .wait_for_ledger(|s| s.records.values().map(|r| r.contributions).sum::<u64>() == steps),
    )
    .await
    .expect("contribution totals converge");
    cluster.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn killed_executor_is_routed_around() {
    let study = case_study("case-kill");
    let mut cluster = Cluster::case_study(&study, fast_timing()).await.unwrap();
    assert!(cluster.wait_converged(Duration::from_secs(5)).await);
    // Agent 3 is the only perfect match for the first step of two chains.
    cluster.kill(3).await;
    let out = cluster.node(0).unwrap().submit(study.task.clone(), 3).await.unwrap();
    assert_eq!(out.chains.len(), 3, "{:?}", out.failures);
    assert!(out.chains.iter().all(|c| c.per_step_scores.len() == 3));
    assert!(out.chains.iter().any(|c| c.confidence < 0.9));
    cluster.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn killed_planner_costs_only_its_chain() {
    let study = case_study("case-kill-planner");
    let mut cluster = Cluster::case_study(&study, fast_timing()).await.unwrap();
    assert!(cluster.wait_converged(Duration::from_secs(5)).await);
    cluster.kill(4).await;
    let out = cluster.node(0).unwrap().submit(study.task.clone(), 3).await.unwrap();
    assert!(!out.chains.is_empty() && out.chains.len() <= 3);
    assert!(out.chains.iter().all(|c| c.confidence > 0.0));
    cluster.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn gateway_serves_status_ledger_and_submit() {
    let study = case_study("unused");
    let mut configs = Cluster::case_study_configs(&study, fast_timing());
    configs[0].gateway = Some(local(free_port()));
    let cluster = Cluster::start(configs, Some(Arc::new(study.tagger()))).await.unwrap();
    assert!(cluster.wait_converged(Duration::from_secs(5)).await);
    let base = format!("http://{}", cluster.node(0).unwrap().gateway_addr().unwrap());
    let http = reqwest::Client::new();

    let status: serde_json::Value = http.get(format!("{base}/status")).send().await.unwrap().json().await.unwrap();
    assert_eq!(status["available_planners"], 8);
    let ledger: Vec<serde_json::Value> = http.get(format!("{base}/ledger")).send().await.unwrap().json().await.unwrap();
    assert_eq!(ledger.len(), 8);

    let req = SubmitRequest {
        text: study.task.text.clone(),
        options: study.task.options.clone(),
        chains: Some(3),
        task_id: Some("via-gateway".into()),
    };
    let resp = http.post(format!("{base}/submit")).json(&req).send().await.unwrap();
    assert!(resp.status().is_success());
    let out: SubmitOutcome = resp.json().await.unwrap();
    assert_eq!(out.verdict.answer, "no");

    let events: Vec<serde_json::Value> = http
        .get(format!("{base}/events?task_id=via-gateway"))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert!(!events.is_empty());

    let bad = SubmitRequest {
        text: "  ".into(),
        options: None,
        chains: None,
        task_id: None,
    };
    let resp = http.post(format!("{base}/submit")).json(&bad).send().await.unwrap();
    assert_eq!(resp.status(), reqwest::StatusCode::BAD_REQUEST);
    cluster.shutdown().await;
}
