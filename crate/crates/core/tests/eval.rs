mod common;

use haptex_core::eval::{
    self, adjusted_rand, anchor_projection, calinski_harabasz, clustering_metrics, davies_bouldin, inside_rate, kmeans,
    normalized_mutual_info, silhouette, Attribute, EvalError, ProjectionRecord,
};
use ndarray::Array2;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn to_array(points: &[Vec<f64>]) -> Array2<f64> {
    Array2::from_shape_fn((points.len(), points[0].len()), |(i, j)| points[i][j])
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn mean_of(points: &[&Vec<f64>]) -> Vec<f64> {
    let d = points[0].len();
    (0..d).map(|j| points.iter().map(|p| p[j]).sum::<f64>() / points.len() as f64).collect()
}

fn ch_oracle(points: &[Vec<f64>], labels: &[usize]) -> f64 {
    let classes: std::collections::BTreeSet<usize> = labels.iter().copied().collect();
    let all: Vec<&Vec<f64>> = points.iter().collect();
    let g = mean_of(&all);
    let (mut b, mut w) = (0.0, 0.0);
    for &c in &classes {
        let members: Vec<&Vec<f64>> = points.iter().zip(labels).filter(|(_, &l)| l == c).map(|(p, _)| p).collect();
        let m = mean_of(&members);
        b += members.len() as f64 * dist(&m, &g).powi(2);
        w += members.iter().map(|p| dist(p, &m).powi(2)).sum::<f64>();
    }
    let (n, k) = (points.len() as f64, classes.len() as f64);
    (b / (k - 1.0)) / (w / (n - k))
}

fn db_oracle(points: &[Vec<f64>], labels: &[usize]) -> f64 {
    let classes: Vec<usize> = labels.iter().copied().collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    let stats: Vec<(Vec<f64>, f64)> = classes
        .iter()
        .map(|&c| {
            let members: Vec<&Vec<f64>> = points.iter().zip(labels).filter(|(_, &l)| l == c).map(|(p, _)| p).collect();
            let m = mean_of(&members);
            let s = members.iter().map(|p| dist(p, &m)).sum::<f64>() / members.len() as f64;
            (m, s)
        })
        .collect();
    let k = stats.len();
    (0..k)
        .map(|i| {
            (0..k)
                .filter(|&j| j != i)
                .map(|j| (stats[i].1 + stats[j].1) / dist(&stats[i].0, &stats[j].0))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .sum::<f64>()
        / k as f64
}

fn blobs(rng: &mut ChaCha8Rng, k: usize, per: usize, d: usize, spread: f64, sep: f64) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for c in 0..k {
        let centre: Vec<f64> = (0..d).map(|_| rng.random_range(-sep..sep)).collect();
        for _ in 0..per {
            let noise: f64 = StandardNormal.sample(rng);
            points.push(centre.iter().map(|x| x + spread * noise * rng.random_range(0.5..1.5)).collect());
            labels.push(c);
        }
    }
    (points, labels)
}

#[test]
fn anchor_projection_examples() {
    assert_eq!(anchor_projection(20.0f64, 20.0, 80.0).unwrap(), 0.0);
    assert_eq!(anchor_projection(80.0f64, 20.0, 80.0).unwrap(), 1.0);
    assert!((anchor_projection(50.0f64, 20.0, 80.0).unwrap() - 0.5).abs() < 1e-15);
    assert!((anchor_projection(90.0f64, 20.0, 80.0).unwrap() - 7.0 / 6.0).abs() < 1e-15);
    assert!(matches!(anchor_projection(50.0f64, 40.0, 40.0), Err(EvalError::DegenerateAxis)));
    // axis reversed
    assert!((anchor_projection(30.0f64, 80.0, 20.0).unwrap() - 50.0 / 60.0).abs() < 1e-15);
}

proptest! {
    #[test]
    fn anchor_projection_is_affine_invariant(
        a in 0.0f64..100.0, b in 0.0f64..100.0, x in 0.0f64..100.0,
        scale in 0.1f64..10.0, shift in -100.0f64..100.0,
    ) {
        prop_assume!((a - b).abs() >= 1.0);
        let t = anchor_projection(x, a, b).unwrap();
        let f = |v: f64| scale * v + shift;
        let t2 = anchor_projection(f(x), f(a), f(b)).unwrap();
        prop_assert!((t - t2).abs() <= 1e-12, "{} vs {}", t, t2);
    }
}

#[test]
fn inside_rate_examples() {
    let rec = |t: f64| ProjectionRecord { participant: String::new(), attribute: Attribute::Roughness, a: 0.0, b: 1.0, x: t, t: Some(t) };
    let all: Vec<_> = (0..5).map(|_| rec(0.5)).collect();
    assert_eq!(inside_rate(&all).unwrap()[&Attribute::Roughness], 1.0);
    let mixed: Vec<_> = [-0.1, 0.5, 1.2, 1.0].iter().map(|&t| rec(t)).collect();
    assert_eq!(inside_rate(&mixed).unwrap()[&Attribute::Roughness], 0.5);
    assert!(matches!(inside_rate(&[]), Err(EvalError::EmptyInput)));

    let mut by_attr = mixed.clone();
    by_attr.push(ProjectionRecord::new(Attribute::Hardness, 20.0, 80.0, 10.0).unwrap());
    let r = inside_rate(&by_attr).unwrap();
    assert_eq!(r[&Attribute::Hardness], 0.0);
    assert!(!r.contains_key(&Attribute::Slipperiness));
}

#[test]
fn records_csv_round_trip() {
    let recs = vec![
        ProjectionRecord::new(Attribute::Slipperiness, 20.0, 80.0, 50.0).unwrap(),
        ProjectionRecord::new(Attribute::Hardness, 70.0, 10.0, 5.0).unwrap(),
    ];
    let mut buf = Vec::new();
    eval::write_records(&recs, &mut buf).unwrap();
    let back = eval::read_records(buf.as_slice()).unwrap();
    assert_eq!(back, recs);
    let raw = "participant,attribute,a,b,x\np1,roughness,20,80,90\n";
    let r = eval::read_records(raw.as_bytes()).unwrap();
    assert!((r[0].t.unwrap() - 7.0 / 6.0).abs() < 1e-15);
}

#[test]
fn silhouette_two_tight_clusters() {
    let pts = vec![vec![0.0, 0.0], vec![0.0, 1.0], vec![10.0, 10.0], vec![10.0, 11.0]];
    let labels = [0, 0, 1, 1];
    let s = silhouette(&to_array(&pts), &labels).unwrap();
    assert!(s > 0.9, "{s}");
    assert!((s - common::silhouette_oracle(&pts, &labels)).abs() < 1e-12);
}

#[test]
fn metrics_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for trial in 0..40 {
        let k = rng.random_range(2..5);
        let n = rng.random_range(2 * k..=50);
        let d = rng.random_range(1..6);
        let pts: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
        let mut labels: Vec<usize> = (0..n).map(|i| i % k).collect();
        labels.shuffle(&mut rng);
        let a = to_array(&pts);
        let s = silhouette(&a, &labels).unwrap();
        assert!((s - common::silhouette_oracle(&pts, &labels)).abs() < 1e-9, "trial {trial}");
        let ch = calinski_harabasz(&a, &labels).unwrap();
        let o = ch_oracle(&pts, &labels);
        assert!((ch - o).abs() <= 1e-9 * o.abs().max(1.0), "trial {trial}: {ch} vs {o}");
        let db = davies_bouldin(&a, &labels).unwrap();
        let o = db_oracle(&pts, &labels);
        assert!((db - o).abs() <= 1e-9 * o.max(1.0), "trial {trial}: {db} vs {o}");
        let other: Vec<usize> = (0..n).map(|_| rng.random_range(0..k + 1)).collect();
        assert!((adjusted_rand(&other, &labels).unwrap() - common::ari_oracle(&other, &labels)).abs() < 1e-9);
        assert!((normalized_mutual_info(&other, &labels).unwrap() - common::nmi_oracle(&other, &labels)).abs() < 1e-9);
    }
}

#[test]
fn perfect_and_permuted_agreement() {
    let labels: Vec<usize> = (0..30).map(|i| i / 10).collect();
    assert_eq!(adjusted_rand(&labels, &labels).unwrap(), 1.0);
    assert!((normalized_mutual_info(&labels, &labels).unwrap() - 1.0).abs() < 1e-12);
    // cluster ids are arbitrary
    let renamed: Vec<usize> = labels.iter().map(|l| 7 - l).collect();
    assert_eq!(adjusted_rand(&renamed, &labels).unwrap(), 1.0);
}

#[test]
fn shuffled_labels_have_near_zero_ari() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let labels: Vec<usize> = (0..1000).map(|i| i % 5).collect();
    let mut shuffled = labels.clone();
    shuffled.shuffle(&mut rng);
    let ari = adjusted_rand(&shuffled, &labels).unwrap();
    assert!(ari.abs() < 0.05, "{ari}");
}

#[test]
fn kmeans_recovers_separated_blobs() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (pts, labels) = blobs(&mut rng, 6, 20, 8, 0.2, 20.0);
    let a = to_array(&pts);
    let km = kmeans(&a, 6, 0, 20).unwrap();
    assert_eq!(adjusted_rand(&km.assignment, &labels).unwrap(), 1.0);
    let again = kmeans(&a, 6, 0, 20).unwrap();
    assert_eq!(km, again);
    let m = clustering_metrics(&a, &labels, 0).unwrap();
    assert_eq!(m.adjusted_rand, 1.0);
    assert!((m.nmi - 1.0).abs() < 1e-12);
    assert!(m.silhouette > 0.8 && m.davies_bouldin < 0.3);
}

#[test]
fn degenerate_inputs_name_the_metric() {
    let a = to_array(&[vec![0.0], vec![1.0], vec![2.0]]);
    match clustering_metrics(&a, &[0, 0, 1], 0) {
        Err(EvalError::DegenerateInput { metric, .. }) => assert_eq!(metric, "silhouette"),
        other => panic!("{other:?}"),
    }
    match silhouette(&a, &[0, 0, 0]) {
        Err(EvalError::DegenerateInput { metric, .. }) => assert_eq!(metric, "silhouette"),
        other => panic!("{other:?}"),
    }
    let same = to_array(&[vec![1.0], vec![1.0], vec![1.0], vec![1.0]]);
    match davies_bouldin(&same, &[0, 0, 1, 1]) {
        Err(EvalError::DegenerateInput { metric, .. }) => assert_eq!(metric, "davies_bouldin"),
        other => panic!("{other:?}"),
    }
    assert!(matches!(silhouette(&a, &[0, 1]), Err(EvalError::LengthMismatch(2, 3))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn metric_ranges(seed in 0u64..10_000, k in 2usize..5, per in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (pts, labels) = blobs(&mut rng, k, per, 3, 1.0, 2.0);
        let m = clustering_metrics(&to_array(&pts), &labels, seed).unwrap();
        prop_assert!((-1.0..=1.0).contains(&m.silhouette));
        prop_assert!(m.davies_bouldin >= 0.0);
        prop_assert!(m.adjusted_rand <= 1.0);
        prop_assert!((0.0..=1.0).contains(&m.nmi));
        prop_assert!(m.calinski_harabasz >= 0.0);
    }
}

#[test]
fn pca_of_a_line() {
    let pts: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 2.0 * i as f64, -(i as f64)]).collect();
    let coords = eval::pca_2d(&to_array(&pts)).unwrap();
    let norm = 6.0f64.sqrt();
    for (i, c) in coords.iter().enumerate() {
        assert!((c[0].abs() - ((i as f64 - 4.5) * norm).abs()).abs() < 1e-9);
        assert!(c[1].abs() < 1e-9);
    }
    let mut buf = Vec::new();
    let ids: Vec<String> = (0..10).map(|i| format!("M{i}")).collect();
    eval::write_pca_csv(&ids, &[0; 10], &coords, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("id,label,pc1,pc2\nM0,0,"));
    assert_eq!(text.lines().count(), 11);
}
