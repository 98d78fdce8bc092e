use entropy_core::analytics::{kmeans_restarts, KMeansParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::Verdict;

const INSTANCES: u64 = 20;
const POINTS: usize = 8;
const MAX_RESTARTS: usize = 10;

fn sse(points: &[&Vec<f64>]) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let n = points.len() as f64;
    let cx = points.iter().map(|p| p[0]).sum::<f64>() / n;
    let cy = points.iter().map(|p| p[1]).sum::<f64>() / n;
    points.iter().map(|p| (p[0] - cx).powi(2) + (p[1] - cy).powi(2)).sum()
}

/// Minimum inertia over every split into two non-empty clusters. The last
/// point is pinned to the first cluster, so each split is visited once.
fn optimum(points: &[Vec<f64>]) -> f64 {
    let n = points.len();
    let mut best = f64::INFINITY;
    for mask in 1u32..(1 << (n - 1)) {
        let side = |inside: bool| -> Vec<&Vec<f64>> { points.iter().enumerate().filter(|(i, _)| (mask & (1 << i) != 0) == inside).map(|(_, p)| p).collect() };
        let (a, b) = (side(true), side(false));
        best = best.min(sse(&a) + sse(&b));
    }
    best
}

pub fn criterion() -> Verdict {
    let mut needed = Vec::new();
    let mut unmatched = Vec::new();
    for instance in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + instance);
        let points: Vec<Vec<f64>> = (0..POINTS).map(|_| vec![rng.random_range(0.0..10.0), rng.random_range(0.0..10.0)]).collect();
        let best = optimum(&points);
        let hit = (1..=MAX_RESTARTS).find(|r| {
            kmeans_restarts(&points, KMeansParams::new(2, instance), *r).is_ok_and(|c| (c.inertia - best).abs() <= 1e-9 * best.max(1.0))
        });
        match hit {
            Some(r) => needed.push(r),
            None => unmatched.push(instance),
        }
    }
    let histogram: Vec<String> = (1..=MAX_RESTARTS)
        .filter_map(|r| {
            let c = needed.iter().filter(|n| **n == r).count();
            (c > 0).then(|| format!("{c}x{r}"))
        })
        .collect();
    Verdict::check(
        unmatched.is_empty(),
        format!(
            "{INSTANCES} instances of {POINTS} points, k = 2: {} reach the exhaustive optimum within {MAX_RESTARTS} seeded restarts (restarts needed: {}), max {}{}",
            needed.len(),
            histogram.join(" "),
            needed.iter().max().copied().unwrap_or(0),
            if unmatched.is_empty() { String::new() } else { format!("; unmatched instances {unmatched:?}") }
        ),
    )
}
