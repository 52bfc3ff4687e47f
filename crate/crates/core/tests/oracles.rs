mod common;

use hugnn::eval::{ece, ECE_BINS};
use hugnn::graph::{effective_degree, homophily_ratio, two_hop_homophily};
use hugnn::math::Rng;

fn graphs() -> Vec<hugnn::graph::DatasetBundle> {
    let mut rng = Rng::new(2024).child("oracle");
    (0..20)
        .map(|_| {
            let n = 4 + rng.below(27);
            let c = 1 + rng.below(4);
            let p = 0.08 + 0.3 * rng.uniform();
            common::random_bundle(&mut rng, n, c, 2, p)
        })
        .collect()
}

#[test]
fn homophily_counts_match_enumeration() {
    for b in graphs() {
        let (same, total) = common::oracle_homophily(&b);
        match homophily_ratio(&b) {
            Ok(h) => assert_eq!(h, same as f64 / total as f64),
            Err(_) => assert_eq!(total, 0),
        }
    }
}

#[test]
fn two_hop_counts_match_enumeration() {
    for b in graphs() {
        let (same, total) = common::oracle_two_hop(&b);
        match two_hop_homophily(&b) {
            Ok(q) => assert_eq!(q, same as f64 / total as f64),
            Err(_) => assert_eq!(total, 0),
        }
    }
}

#[test]
fn ece_matches_per_bin_enumeration() {
    let mut rng = Rng::new(7);
    for b in graphs() {
        let probs = common::random_probs(&mut rng, b.n(), b.num_classes.max(2));
        let mask: Vec<usize> = (0..b.n()).filter(|i| i % 4 != 3).collect();
        let got = ece(&probs, &b.labels, &mask, ECE_BINS).unwrap();
        let want = common::oracle_ece(&probs, &b.labels, &mask, ECE_BINS);
        assert!((got.ece - want).abs() <= 1e-12, "{} vs {want}", got.ece);
        assert_eq!(got.bins.iter().map(|b| b.count).sum::<usize>(), mask.len());
    }
}

#[test]
fn effective_degree_matches_enumeration() {
    let mut rng = Rng::new(11);
    for b in graphs() {
        let w = common::random_attention(&mut rng, &b.graph);
        let got = effective_degree(&b.graph, &w).unwrap();
        let want = common::oracle_effective_degree(&b.graph, &w);
        for (x, y) in got.iter().zip(&want) {
            assert!((x - y).abs() <= 1e-12, "{x} vs {y}");
        }
        let uniform: Vec<f64> = (0..b.n())
            .flat_map(|i| {
                let k = b.graph.degree(i);
                vec![1.0 / k as f64; k]
            })
            .collect();
        let raw: Vec<f64> = (0..b.n()).map(|i| b.graph.degree(i) as f64).collect();
        let got = effective_degree(&b.graph, &uniform).unwrap();
        for (x, y) in got.iter().zip(&raw) {
            assert!((x - y).abs() <= 1e-12);
        }
    }
}
