//! Brute-force metric reference: general graded DCG with an explicitly
//! computed ideal ordering, written without the library's rank shortcut.

use conceptrec::eval::{hr_at_k, mrr_at_k, ndcg_at_k};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn reference(ranked: &[usize], target: usize, k: usize) -> [f64; 3] {
    let rel: Vec<f64> = ranked
        .iter()
        .map(|&c| if c == target { 1.0 } else { 0.0 })
        .collect();
    let top = &rel[..k.min(rel.len())];
    let hr = if top.iter().any(|&r| r > 0.0) {
        1.0
    } else {
        0.0
    };
    let dcg: f64 = top
        .iter()
        .enumerate()
        .map(|(i, r)| r / ((i + 2) as f64).log2())
        .sum();
    let mut ideal = rel.clone();
    ideal.sort_by(|a, b| b.total_cmp(a));
    let idcg: f64 = ideal[..k.min(ideal.len())]
        .iter()
        .enumerate()
        .map(|(i, r)| r / ((i + 2) as f64).log2())
        .sum();
    let ndcg = if idcg > 0.0 { dcg / idcg } else { 0.0 };
    let mut mrr = 0.0;
    for (i, &r) in top.iter().enumerate() {
        if r > 0.0 {
            mrr = 1.0 / (i + 1) as f64;
            break;
        }
    }
    [hr, ndcg, mrr]
}

/// Compare library metrics with the reference over random permutations of 20
/// ids, for every K in 1..=20 and a target drawn from 0..25 (so sometimes
/// absent). Returns the number of comparisons and of mismatches.
pub fn check_permutations(n: usize, seed: u64) -> (usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids: Vec<usize> = (0..20).collect();
    let (mut checked, mut wrong) = (0, 0);
    for _ in 0..n {
        ids.shuffle(&mut rng);
        let target = rng.random_range(0..25);
        for k in 1..=20 {
            let want = reference(&ids, target, k);
            let got = [
                hr_at_k(&ids, target, k),
                ndcg_at_k(&ids, target, k),
                mrr_at_k(&ids, target, k),
            ];
            checked += 3;
            wrong += got.iter().zip(want).filter(|(a, b)| **a != *b).count();
        }
    }
    (checked, wrong)
}
