use dcmgnn::evaluation::{
    evaluate_embeddings, ndcg_at_k, rank_items, recall_at_k, sparsity_groups, top_k, EvalData, RankingResult,
    UserMetrics, SPARSITY_GROUPS,
};
use ndarray::Array2;
use proptest::prelude::*;

/// Selection-sort reference: repeatedly take the best remaining item,
/// breaking score ties by the smaller id.
fn reference_ranking(scores: &[f64], exclude: &[usize]) -> Vec<usize> {
    let mut left: Vec<usize> = (0..scores.len()).filter(|i| !exclude.contains(i)).collect();
    let mut out = Vec::new();
    while !left.is_empty() {
        let mut best = 0;
        for k in 1..left.len() {
            let (a, b) = (left[k], left[best]);
            if scores[a] > scores[b] || (scores[a] == scores[b] && a < b) {
                best = k;
            }
        }
        out.push(left.remove(best));
    }
    out
}

fn reference_recall(ranked: &[usize], test: &[usize], k: usize) -> f64 {
    let mut hits = 0.0;
    for &t in test {
        if ranked[..k.min(ranked.len())].contains(&t) {
            hits += 1.0;
        }
    }
    hits / test.len() as f64
}

fn reference_ndcg(ranked: &[usize], test: &[usize], k: usize) -> f64 {
    let mut dcg = 0.0;
    for (pos, item) in ranked.iter().take(k).enumerate() {
        if test.contains(item) {
            dcg += 1.0 / (pos as f64 + 2.0).log2();
        }
    }
    let mut idcg = 0.0;
    for pos in 0..test.len().min(k) {
        idcg += 1.0 / (pos as f64 + 2.0).log2();
    }
    dcg / idcg
}

/// Scores on a coarse grid so that ties are common.
fn scores() -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec((0i32..6).prop_map(|v| v as f64 * 0.5), 1..30)
}

fn subset(n: usize) -> impl Strategy<Value = Vec<usize>> {
    proptest::collection::btree_set(0..n, 0..=n).prop_map(|s| s.into_iter().collect())
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 256, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn ranking_matches_reference((s, ex) in scores().prop_flat_map(|s| { let n = s.len(); (Just(s), subset(n)) }), k in 0usize..35) {
        let want = reference_ranking(&s, &ex);
        prop_assert_eq!(rank_items(&s, &ex), want.clone());
        prop_assert_eq!(top_k(&s, &ex, k), want[..k.min(want.len())].to_vec());
    }

    #[test]
    fn metrics_match_reference_and_stay_in_range(
        (s, test) in scores().prop_flat_map(|s| { let n = s.len(); (Just(s), proptest::collection::btree_set(0..n, 1..=n)) }),
        k in 1usize..35,
    ) {
        let test: Vec<usize> = test.into_iter().collect();
        let ranked = rank_items(&s, &[]);
        let r = recall_at_k(&ranked, &test, k);
        let n = ndcg_at_k(&ranked, &test, k);
        prop_assert!((r - reference_recall(&ranked, &test, k)).abs() < 1e-12);
        prop_assert!((n - reference_ndcg(&ranked, &test, k)).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&r));
        prop_assert!((0.0..=1.0 + 1e-12).contains(&n));
        prop_assert!(recall_at_k(&ranked, &test, k + 1) >= r);
    }

    #[test]
    fn perfect_ranking_scores_one(n in 2usize..30, t in 1usize..10, k in 1usize..12) {
        let t = t.min(n);
        let test: Vec<usize> = (0..t).collect();
        let s: Vec<f64> = (0..n).map(|i| -(i as f64)).collect();
        let ranked = rank_items(&s, &[]);
        prop_assert!((ndcg_at_k(&ranked, &test, k) - 1.0).abs() < 1e-12);
        prop_assert!((recall_at_k(&ranked, &test, k) - (t.min(k) as f64 / t as f64)).abs() < 1e-12);
    }
}

#[test]
fn ndcg_worked_example() {
    // hits at positions 1 and 3 of the list, two relevant items
    let ranked = [7, 2, 9, 4];
    let got = ndcg_at_k(&ranked, &[7, 9], 3);
    let want = (1.0 + 1.0 / 4f64.log2()) / (1.0 + 1.0 / 3f64.log2());
    assert!((got - want).abs() < 1e-12);
    assert_eq!(recall_at_k(&ranked, &[7, 9], 2), 0.5);
}

#[test]
fn evaluation_excludes_training_items_and_skips_users_without_tests() {
    // user 0 scores item 0 highest, but it is a training item
    let mut e = Array2::<f64>::zeros((2 + 3, 1));
    e[[0, 0]] = 1.0;
    e[[1, 0]] = 1.0;
    e[[2, 0]] = 3.0;
    e[[3, 0]] = 2.0;
    e[[4, 0]] = 1.0;
    let data = EvalData {
        num_users: 2,
        num_items: 3,
        exclude: vec![vec![0], vec![]],
        test: vec![vec![1], vec![]],
        interaction_counts: vec![4, 0],
    };
    let res = evaluate_embeddings(&e, &data, &[1, 2]).unwrap();
    assert_eq!(res.users.len(), 1);
    assert_eq!(res.users[0].ranked, vec![1, 2]);
    assert_eq!(res.recall_at(1), Some(1.0));
    assert_eq!(res.ndcg_at(2), Some(1.0));
    assert!(evaluate_embeddings(&e, &data, &[]).is_err());
}

#[test]
fn sparsity_groups_cover_every_count() {
    let users: Vec<UserMetrics> = (0..8)
        .map(|u| UserMetrics { user: u, ranked: vec![], recall: vec![u as f64 / 8.0], ndcg: vec![0.5] })
        .collect();
    let res = RankingResult { ks: vec![10], users, recall: vec![0.0], ndcg: vec![0.0] };
    let counts = [0, 3, 9, 15, 25, 45, 59, 1000];
    let groups = sparsity_groups(&res, &counts, 10).unwrap();
    assert_eq!(groups.len(), SPARSITY_GROUPS.len());
    assert_eq!(groups.iter().map(|g| g.users).sum::<usize>(), 8);
    let last = groups.last().unwrap();
    assert_eq!(last.label, "[60,inf)");
    assert_eq!(last.users, 1);
    assert_eq!(last.recall, Some(7.0 / 8.0));
    assert!(sparsity_groups(&res, &counts, 5).is_err());
}
