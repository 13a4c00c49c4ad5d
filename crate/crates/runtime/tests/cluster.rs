use std::time::{Duration, Instant};

use agora_core::sim::case_study;
use agora_runtime::cluster::{fast_timing, Cluster};

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn case_study_over_memory_network() {
    let study = case_study("case-mem");
    let cluster = Cluster::case_study(&study, fast_timing()).await.unwrap();
    assert!(cluster.wait_converged(Duration::from_secs(5)).await);

    let started = Instant::now();
    let out = cluster.node(0).unwrap().submit(study.task.clone(), 3).await.unwrap();
    let elapsed = started.elapsed();

    assert_eq!(out.verdict.answer, "no", "{out:?}");
    assert!((out.verdict.winning_weight - 1.9).abs() < 1e-9, "{out:?}");
    let mut got: Vec<_> = out.chains.iter().map(|c| (c.raw_answer.clone(), c.confidence)).collect();
    got.sort_by(|a, b| b.1.total_cmp(&a.1));
    let mut want: Vec<_> = study.expected.iter().map(|(a, c)| (a.to_string(), *c)).collect();
    want.sort_by(|a, b| b.1.total_cmp(&a.1));
    for ((ga, gc), (wa, wc)) in got.iter().zip(&want) {
        assert_eq!(ga, wa);
        assert!((gc - wc).abs() < 1e-9, "{gc} vs {wc}");
    }
    assert!(elapsed < Duration::from_secs(5), "{elapsed:?}");
    cluster.shutdown().await;
}
