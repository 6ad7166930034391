use proptest::prelude::*;

use scalekv::compression::{
    baseline_compress, compress_contextual, compress_structural, PolicyKind,
};
use scalekv::{build_schedule, HeadCache, Matrix};

/// Cache holding steps `1..=k` of an a=2 schedule, with a sparse random
/// eviction pattern applied before the last append.
fn cache(k: usize, dim: usize, keep_mask: &[bool], values: &[f64]) -> HeadCache {
    let s = build_schedule(2, 5).unwrap();
    let mut c = HeadCache::new(dim);
    for step in 1..=k {
        if step == k {
            let keep: Vec<usize> = (0..c.len())
                .filter(|&i| keep_mask[i % keep_mask.len()])
                .collect();
            c.retain_rows(&keep).unwrap();
        }
        let n = s.tokens(step);
        let start = s.cumulative(step - 1);
        let data: Vec<f64> = (0..n * dim)
            .map(|i| values[(start * dim + i) % values.len()])
            .collect();
        let m = Matrix::from_vec(n, dim, data).unwrap();
        c.append(&s, &m, &m, step).unwrap();
    }
    c
}

fn is_ordered_subset(after: &[usize], before: &[usize]) -> bool {
    let mut it = before.iter();
    after.iter().all(|p| it.any(|q| q == p))
}

proptest! {
    #[test]
    fn every_policy_meets_budget_and_keeps_order(
        k in 2usize..=5,
        dim in 1usize..4,
        keep_mask in prop::collection::vec(any::<bool>(), 1..7),
        values in prop::collection::vec(-1.0f64..1.0, 8..40),
        raw_scores in prop::collection::vec(0u8..5, 8..40),
        budget_frac in 0.0f64..1.2,
        n_init in 0usize..8,
        policy in 0usize..5,
    ) {
        let s = build_schedule(2, 5).unwrap();
        let mut c = cache(k, dim, &keep_mask, &values);
        let pre = c.len();
        let before = c.origins().to_vec();
        let scores: Vec<f64> = (0..pre).map(|i| raw_scores[i % raw_scores.len()] as f64).collect();
        let n_k = s.tokens(k);
        let budget = ((budget_frac * pre as f64) as usize).max(1);
        let result = match policy {
            0 => compress_contextual(&mut c, &scores, budget, true),
            1 => compress_structural(&mut c, &scores, budget, n_init, n_k),
            2 => baseline_compress(&mut c, None, budget, PolicyKind::Positional, n_init),
            3 => baseline_compress(&mut c, Some(&scores), budget, PolicyKind::ScoreTopK, n_init),
            _ => baseline_compress(&mut c, Some(&scores), budget, PolicyKind::TopKMerge, n_init),
        };
        if policy == 1 && budget < n_k && pre > budget {
            prop_assert!(result.is_err());
            return Ok(());
        }
        result.unwrap();
        prop_assert_eq!(c.len(), pre.min(budget));
        prop_assert!(is_ordered_subset(c.origins(), &before));
        prop_assert_eq!(c.keys().rows(), c.len());
        prop_assert_eq!(c.values().rows(), c.len());
    }
}
