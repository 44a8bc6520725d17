use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tpdm_core::vq::*;

/// Minimum within-cluster cost over every split of sorted data into `k`
/// non-empty contiguous runs, by direct enumeration.
fn brute_force_cost(values: &[f64], k: usize) -> f64 {
    let mut xs = values.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    fn run_cost(run: &[f64]) -> f64 {
        let mean = run.iter().sum::<f64>() / run.len() as f64;
        run.iter().map(|x| (x - mean).powi(2)).sum()
    }
    fn go(xs: &[f64], start: usize, left: usize, acc: f64, best: &mut f64) {
        let n = xs.len();
        if left == 1 {
            *best = best.min(acc + run_cost(&xs[start..]));
            return;
        }
        for end in start + 1..=n - (left - 1) {
            go(xs, end, left - 1, acc + run_cost(&xs[start..end]), best);
        }
    }
    let mut best = f64::INFINITY;
    go(&xs, 0, k.min(n), 0.0, &mut best);
    best
}

fn opts() -> FitOptions {
    FitOptions::default()
}

#[test]
fn matches_enumeration_on_random_sets() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..40 {
        let n = rng.random_range(4..=24);
        let k = rng.random_range(1..=4);
        let values: Vec<f64> = (0..n).map(|_| rng.random_range(-70.0..0.0f64)).collect();
        let cb = Codebook::fit(&values, k, &opts()).unwrap();
        let cost = within_cluster_cost(&values, cb.centroids());
        let best = brute_force_cost(&values, k);
        assert!(cost - best <= 1e-9, "n {n} k {k}: {cost} vs {best}");
    }
}

#[test]
fn deterministic() {
    let values: Vec<f64> = (0..200).map(|i| ((i * 37) % 101) as f64 * -0.6).collect();
    let a = Codebook::fit(&values, 8, &FitOptions { seed: 5, ..opts() }).unwrap();
    let b = Codebook::fit(&values, 8, &FitOptions { seed: 5, ..opts() }).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.to_json(), b.to_json());
}

#[test]
fn cost_non_increasing_in_k() {
    let values: Vec<f64> = (0..300).map(|i| (i as f64 * 0.731).sin() * 30.0 - 35.0).collect();
    let mut last = f64::INFINITY;
    for k in 1..=12 {
        let cb = Codebook::fit(&values, k, &opts()).unwrap();
        let c = within_cluster_cost(&values, cb.centroids());
        assert!(c <= last + 1e-9, "k {k}");
        last = c;
    }
}

#[test]
fn file_round_trip_is_bit_exact() {
    let values: Vec<f64> = (0..97).map(|i| -70.0 + (i as f64).sqrt() * 7.123456789).collect();
    let cb = Codebook::fit(&values, 6, &opts()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cb.json");
    cb.save(&path).unwrap();
    let back = Codebook::load(&path).unwrap();
    for (a, b) in cb.centroids().iter().zip(back.centroids()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
    assert_eq!(back, cb);
    assert!(matches!(LoudnessCodebook::load(&path).unwrap(), LoudnessCodebook::Scalar(_)));
    let text: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(text["version"], 1);
    assert_eq!(text["k"], 6);
}

#[test]
fn rejects_unordered_or_unknown_fields() {
    let unordered = r#"{"version":1,"k":2,"centroids":[1.0,0.0],"metadata":{"samples":1,"iterations":1,"seed":0}}"#;
    assert!(matches!(Codebook::from_json(unordered), Err(VqError::Invalid(_))));
    let extra = r#"{"version":1,"k":1,"centroids":[0.0],"metadata":{"samples":1,"iterations":1,"seed":0},"x":1}"#;
    assert!(Codebook::from_json(extra).is_err());
}

proptest! {
    #[test]
    fn encode_is_nearest_and_monotone(
        values in prop::collection::vec(-70.0f64..0.0, 8..40),
        probe_a in -90.0f64..10.0,
        probe_b in -90.0f64..10.0,
    ) {
        let cb = Codebook::fit(&values, 4, &opts()).unwrap();
        let q = cb.decode(cb.encode(probe_a)).unwrap();
        for &c in cb.centroids() {
            prop_assert!((probe_a - q).abs() <= (probe_a - c).abs());
        }
        let (lo, hi) = if probe_a <= probe_b { (probe_a, probe_b) } else { (probe_b, probe_a) };
        prop_assert!(cb.encode(lo) <= cb.encode(hi));
        for (j, &c) in cb.centroids().iter().enumerate() {
            prop_assert_eq!(cb.encode(c), j);
        }
        prop_assert!(cb.centroids().windows(2).all(|w| w[0] < w[1]));
    }
}
