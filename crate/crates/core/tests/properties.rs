use std::collections::{BTreeMap, BTreeSet};

use agora_core::execution::{normalize_answer, ChainResult};
use agora_core::ledger::{
    join_records, AgentRecord, Ledger, LedgerConfig, PeerAddress, Registration, Role,
};
use agora_core::matching::cosine_score;
use agora_core::protocol::{
    BeaconBody, BeaconResponseBody, Codec, Envelope, Identity, Payload, Slot, TaskBody,
    TaskResultBody,
};
use agora_core::voting::vote;
use proptest::prelude::*;

const DIM: usize = 4;

fn unit() -> impl Strategy<Value = f64> {
    (0u32..=1000).prop_map(|k| k as f64 / 1000.0)
}

fn payload() -> impl Strategy<Value = Payload> {
    let text = "[a-zA-Z0-9 ?{}\\\\\"é]{0,40}";
    prop_oneof![
        (prop::collection::vec(unit(), DIM), text, any::<u64>()).prop_map(|(mut r, t, by)| {
            r[0] = r[0].max(0.001);
            Payload::Beacon(BeaconBody {
                requirement_vector: r,
                subtask_text: t,
                respond_by: by,
            })
        }),
        (unit(), any::<u32>(), any::<u64>()).prop_map(|(s, l, at)| {
            Payload::BeaconResponse(BeaconResponseBody {
                score: s,
                responder_load: l,
                responded_at: at,
            })
        }),
        (text, text, prop::collection::vec((text, text, unit()), 0..3), unit())
            .prop_map(|(s, b, prior, current)| {
                let mut scores: Vec<f64> = prior.iter().map(|p| p.2).collect();
                scores.push(current);
                let prior = prior.into_iter().map(|(q, a, _)| (q, a)).collect();
                Payload::Task(TaskBody {
                    subtask_text: s,
                    background: b,
                    prior_results: prior,
                    remaining_chain: vec!["next?".into()],
                    accumulated_scores: scores,
                })
            }),
        (text, prop::collection::vec(unit(), 1..4)).prop_map(|(a, s)| {
            Payload::TaskResult(if a.is_empty() {
                TaskResultBody::failure()
            } else {
                TaskResultBody::success(a, s)
            })
        }),
    ]
}

fn record(seed: u8, registered_at: u64, last_seen: u64, contributions: u64) -> AgentRecord {
    let id = Identity::from_seed([seed; 32]);
    let mut r = Registration {
        agent_id: id.agent_id(),
        public_key: id.public_key(),
        address: PeerAddress::new("10.0.0.1", 7000 + seed as u16),
        capability_vector: vec![0.5; DIM],
        roles: [Role::Executor].into_iter().collect::<BTreeSet<_>>(),
        metadata: String::new(),
        registered_at,
    }
    .sign(&id)
    .unwrap();
    r.last_seen = last_seen.max(registered_at);
    r.contributions = contributions;
    r
}

fn record_set() -> impl Strategy<Value = BTreeMap<agora_core::protocol::AgentId, AgentRecord>> {
    prop::collection::vec((0u8..5, 0u64..4, 0u64..8, 0u64..6), 0..8).prop_map(|v| {
        let mut out = BTreeMap::new();
        for (seed, reg, seen, contrib) in v {
            let r = record(seed, reg, seen, contrib);
            out.insert(r.agent_id(), r);
        }
        out
    })
}

proptest! {
    #[test]
    fn envelopes_round_trip(p in payload(), seed in 0u8..4, task in "[a-z0-9-]{1,12}",
                            chain in 0u32..5, idx in 0u32..6, at in any::<u64>()) {
        let codec = Codec::new(DIM);
        let id = Identity::from_seed([seed; 32]);
        let env = Envelope::signed(&id, Slot::new(task, chain, idx), p, at).unwrap();
        let bytes = codec.encode(&env).unwrap();
        let back = codec.decode(&bytes).unwrap();
        prop_assert_eq!(&back, &env);
        prop_assert!(back.verify(&id.public_key()).unwrap());
        prop_assert_eq!(codec.encode(&back).unwrap(), bytes);
    }

    #[test]
    fn join_is_a_semilattice(a in record_set(), b in record_set(), c in record_set()) {
        prop_assert_eq!(join_records(&a, &b), join_records(&b, &a));
        prop_assert_eq!(
            join_records(&join_records(&a, &b), &c),
            join_records(&a, &join_records(&b, &c))
        );
        prop_assert_eq!(join_records(&a, &a), a.clone());
    }

    #[test]
    fn ledgers_converge_regardless_of_merge_order(a in record_set(), b in record_set(), c in record_set()) {
        let config = LedgerConfig { dimension: DIM, ttl_ms: 1_000 };
        let mut ledgers: Vec<Ledger> = [&a, &b, &c]
            .iter()
            .map(|set| {
                let mut l = Ledger::new(config);
                for r in set.values() {
                    l.register(r.clone()).unwrap();
                }
                l
            })
            .collect();
        let snaps: Vec<_> = ledgers.iter().map(|l| l.snapshot().clone()).collect();
        ledgers[0].merge(&snaps[1]);
        ledgers[0].merge(&snaps[2]);
        ledgers[1].merge(&snaps[2]);
        ledgers[1].merge(&snaps[0]);
        ledgers[2].merge(&snaps[0]);
        ledgers[2].merge(&snaps[1]);
        prop_assert!(ledgers[0].snapshot().same_records(ledgers[1].snapshot()));
        prop_assert!(ledgers[1].snapshot().same_records(ledgers[2].snapshot()));
    }

    #[test]
    fn cosine_is_bounded_symmetric_and_scale_free(
        a in prop::collection::vec(-10.0f64..10.0, DIM),
        b in prop::collection::vec(-10.0f64..10.0, DIM),
        s in 1e-6f64..1e6,
    ) {
        match (cosine_score(&a, &b), cosine_score(&b, &a)) {
            (Ok(x), Ok(y)) => {
                let (x, y) = (x.value(), y.value());
                prop_assert!((0.0..=1.0).contains(&x));
                prop_assert!((x - y).abs() < 1e-12);
                let scaled: Vec<f64> = a.iter().map(|v| v * s).collect();
                let z = cosine_score(&scaled, &b).unwrap().value();
                prop_assert!((x - z).abs() < 1e-9, "{x} vs {z}");
            }
            (Err(_), Err(_)) => {}
            other => prop_assert!(false, "asymmetric failure {other:?}"),
        }
    }

    #[test]
    fn self_similarity_is_one(a in prop::collection::vec(0.0f64..1.0, DIM)) {
        prop_assume!(a.iter().any(|x| *x > 0.0));
        prop_assert!((cosine_score(&a, &a).unwrap().value() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn vote_matches_brute_force(chains in prop::collection::vec((0usize..3, 0u32..=4), 1..7)) {
        let answers = ["Yes", "No", "Maybe"];
        let candidates: Vec<ChainResult> = chains
            .iter()
            .enumerate()
            .map(|(i, (a, q))| ChainResult::new(i as u32, answers[*a], vec![*q as f64 / 4.0]))
            .collect();
        let v = vote(&candidates).unwrap();

        // Quarter weights sum exactly, so ties are real ties.
        let mut totals: BTreeMap<String, f64> = BTreeMap::new();
        let mut maxc: BTreeMap<String, f64> = BTreeMap::new();
        for c in &candidates {
            *totals.entry(c.final_answer.clone()).or_default() += c.confidence;
            let m = maxc.entry(c.final_answer.clone()).or_insert(0.0);
            *m = m.max(c.confidence);
        }
        let best = totals.values().cloned().fold(f64::MIN, f64::max);
        let mut tied: Vec<&String> = totals.iter().filter(|(_, w)| **w == best).map(|(k, _)| k).collect();
        let top_conf = tied.iter().map(|k| maxc[*k]).fold(f64::MIN, f64::max);
        tied.retain(|k| maxc[*k] == top_conf);
        tied.sort();
        prop_assert_eq!(&v.answer, tied[0]);
        prop_assert_eq!(v.winning_weight, best);

        // Permutation invariance.
        let mut rev = candidates.clone();
        rev.reverse();
        prop_assert_eq!(vote(&rev).unwrap(), v);
    }

    #[test]
    fn normalization_is_idempotent(s in "[ a-zA-Z0-9.,-]{0,20}") {
        let once = normalize_answer(&s);
        prop_assert_eq!(normalize_answer(&once), once);
    }
}
