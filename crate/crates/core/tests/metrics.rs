mod common;

use common::{oracle_ndcg, oracle_ranking, oracle_recall, random_instance, random_ranking_recall, synth_split, tiny_config};
use nextsession::eval::{evaluate, evaluate_cases, ndcg_at_k, recall_at_k, top_k, EvalCase, DEFAULT_CUTOFFS};
use nextsession::synth::Pattern;
use nextsession::trainer::train;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const EXACT: f64 = 1e-12;

#[test]
fn metrics_agree_with_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..10_000 {
        let (scores, targets, k) = random_instance(&mut rng);
        let ranked = top_k(&scores, k);
        let full = oracle_ranking(&scores);
        assert_eq!(ranked, full[..k.min(full.len())], "case {case}");
        let r = recall_at_k(&ranked, &targets, k).unwrap();
        let n = ndcg_at_k(&ranked, &targets, k).unwrap();
        assert!((r - oracle_recall(&scores, &targets, k)).abs() < EXACT, "case {case} recall");
        assert!((n - oracle_ndcg(&scores, &targets, k)).abs() < EXACT, "case {case} ndcg");
    }
}

#[test]
fn random_ranking_recall_is_k_over_catalog() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mean = random_ranking_recall(&mut rng, 10_000, 1000, 10, 100);
    assert!((mean - 0.1).abs() <= 0.01, "{mean}");
}

#[test]
fn held_out_session_never_reaches_the_context() {
    let (split, _) = synth_split(Pattern::RotateCatalog, 15, 5, 60);
    let ds = nextsession::synth::dataset(&nextsession::synth::SynthConfig {
        pattern: Pattern::RotateCatalog,
        users: 15,
        sessions: 5,
        catalog: 60,
        ..Default::default()
    })
    .unwrap();
    for u in &split.users {
        let last = ds.sequences[u.user_index].sessions.last().unwrap();
        assert!(u.train.iter().all(|s| s.session_id != last.session_id));
        let latest = u.train.iter().flat_map(|s| &s.items).map(|i| i.timestamp).max().unwrap();
        assert!(latest < last.start());
        let mut want: Vec<u32> = last.positives().collect();
        let mut got = u.targets.clone();
        want.sort_unstable();
        got.sort_unstable();
        assert_eq!(got, want);
    }
}

#[test]
fn report_matches_hand_built_queries() {
    let (split, catalog) = synth_split(Pattern::CopyLastSession, 12, 4, 40);
    let model = train(&split, &catalog, &tiny_config(1), |_| {}).unwrap().model;
    let base = evaluate(&model, &split, &DEFAULT_CUTOFFS, "").unwrap();
    let cases: Vec<EvalCase<'_>> = split
        .users
        .iter()
        .map(|u| EvalCase {
            context: &u.train,
            targets: &u.targets,
        })
        .collect();
    let users = evaluate_cases(&model, &cases, &DEFAULT_CUTOFFS).unwrap();
    let mean = users.iter().map(|m| m.recall[0]).sum::<f64>() / users.len() as f64;
    assert!((mean - base.recall(10)).abs() < EXACT);
    assert_eq!(base.num_users, split.users.len());
}

#[test]
fn catalog_mismatch_is_rejected() {
    let (split, catalog) = synth_split(Pattern::CopyLastSession, 10, 4, 30);
    let model = train(&split, &catalog, &tiny_config(1), |_| {}).unwrap().model;
    let mut wrong = split.clone();
    wrong.catalog_size += 1;
    assert!(matches!(
        evaluate(&model, &wrong, &DEFAULT_CUTOFFS, ""),
        Err(nextsession::Error::ConfigMismatch { .. })
    ));
}
