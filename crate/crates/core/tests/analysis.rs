mod common;

use kvlab::analysis::{
    aggregate_attention, coverage_at, cumulative_distribution, curve_csv, heatmap_export,
    heatmap_pgm, Selector,
};
use kvlab::{AttentionTrace, TraceMeta};
use proptest::prelude::*;
use rand::Rng;

/// Brute-force coverage: top fraction `p` of tokens, with the marginal token
/// counted fractionally.
fn coverage_oracle(scores: &[f64], p: f64) -> f64 {
    let mut s = scores.to_vec();
    s.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let total: f64 = s.iter().sum();
    let x = p * s.len() as f64;
    let whole = x.floor() as usize;
    let mut mass: f64 = s[..whole.min(s.len())].iter().sum();
    if whole < s.len() {
        mass += (x - whole as f64) * s[whole];
    }
    mass / total
}

fn staircase_trace() -> AttentionTrace {
    let (l, h, n) = (2, 2, 6);
    let mut w = Vec::new();
    for u in 0..l * h {
        for q in 0..n {
            let raw: Vec<f32> = (0..n)
                .map(|t| if t <= q { (1 + (t + u) % 3) as f32 } else { 0.0 })
                .collect();
            let sum: f32 = raw.iter().sum();
            w.extend(raw.iter().map(|x| x / sum));
        }
    }
    AttentionTrace::new(l, h, n, n, w, TraceMeta::default()).unwrap()
}

#[test]
fn aggregate_matches_loop_and_total() {
    let mut rng = common::rng(51);
    for _ in 0..30 {
        let (l, h) = (rng.random_range(1..=3), rng.random_range(1..=3));
        let n = rng.random_range(1..=24);
        let full = rng.random_bool(0.5);
        let trace = common::random_trace(&mut rng, l, h, n, full);
        let agg = aggregate_attention(&trace);
        for t in 0..n {
            let mut want = 0.0f64;
            for li in 0..l {
                for hi in 0..h {
                    for q in 0..trace.queries() {
                        want += trace.row(li, hi, q)[t] as f64;
                    }
                }
            }
            assert!((agg[t] - want).abs() < 1e-12);
        }
        let total: f64 = agg.iter().sum();
        assert!((total - (l * h * trace.queries()) as f64).abs() < 1e-4);
    }
}

#[test]
fn coverage_matches_brute_force() {
    let mut rng = common::rng(52);
    for _ in 0..200 {
        let len = rng.random_range(1..300);
        let scores: Vec<f64> = (0..len).map(|_| rng.random_range(0.0..1.0)).collect();
        let curve = cumulative_distribution(&scores, 0).unwrap();
        for p in [0.01, 0.2, 0.5, 0.77] {
            let got = coverage_at(&curve, p);
            assert!((got - coverage_oracle(&scores, p)).abs() < 1e-9, "len {len} p {p}");
        }
    }
}

#[test]
fn uniform_scores_give_the_diagonal() {
    let curve = cumulative_distribution(&[0.25; 40], 0).unwrap();
    for i in 0..=10 {
        let p = i as f64 / 10.0;
        assert!((coverage_at(&curve, p) - p).abs() <= 1e-9);
    }
    assert_eq!(curve.points[0], (0.0, 0.0));
    assert_eq!(*curve.points.last().unwrap(), (1.0, 1.0));
}

#[test]
fn excluding_sinks_lowers_early_coverage() {
    let mut scores = vec![80.0, 60.0, 40.0, 20.0];
    scores.extend((0..96).map(|i| 1.0 + (i % 5) as f64 * 0.1));
    let with = cumulative_distribution(&scores, 0).unwrap();
    let without = cumulative_distribution(&scores, 4).unwrap();
    assert!(coverage_at(&with, 0.04) > 0.5);
    assert!(coverage_at(&without, 0.04) < 0.1);
    assert_eq!(without.exclude_first_n, 4);
}

#[test]
fn csv_has_one_row_per_point() {
    let curve = cumulative_distribution(&[3.0, 1.0, 2.0], 0).unwrap();
    let csv = curve_csv(&curve);
    assert_eq!(csv.lines().next(), Some("p,mass"));
    assert_eq!(csv.lines().count(), curve.points.len() + 1);
    assert!(csv.lines().last().unwrap().starts_with("1.00000000,1.00000000"));
}

#[test]
fn heatmap_matches_golden_file() {
    let pgm = heatmap_pgm(&staircase_trace(), Selector::Index(1), Selector::Mean).unwrap();
    let golden = include_bytes!("golden/staircase_l1_mean.pgm");
    assert_eq!(pgm.as_slice(), golden.as_slice());
}

#[test]
fn heatmap_export_writes_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("map.pgm");
    let trace = staircase_trace();
    heatmap_export(&trace, Selector::Mean, Selector::Index(0), &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert!(bytes.starts_with(b"P5\n6 6\n255\n"));
    assert_eq!(bytes.len(), b"P5\n6 6\n255\n".len() + 36);
    assert!(heatmap_pgm(&trace, Selector::Index(2), Selector::Mean).is_err());
}

proptest! {
    #[test]
    fn curves_are_monotone(scores in prop::collection::vec(0.0f64..10.0, 1..120), exclude in 0usize..4) {
        prop_assume!(scores.len() > exclude);
        prop_assume!(scores[exclude..].iter().sum::<f64>() > 0.0);
        let curve = cumulative_distribution(&scores, exclude).unwrap();
        for w in curve.points.windows(2) {
            prop_assert!(w[0].0 < w[1].0);
            prop_assert!(w[0].1 <= w[1].1 + 1e-12);
        }
        prop_assert_eq!(*curve.points.last().unwrap(), (1.0, 1.0));
        let mut prev = 0.0;
        for i in 0..=20 {
            let c = coverage_at(&curve, i as f64 / 20.0);
            prop_assert!(c + 1e-12 >= prev && c >= i as f64 / 20.0 - 1e-9);
            prev = c;
        }
    }
}
