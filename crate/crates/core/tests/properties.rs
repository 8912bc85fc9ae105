use proptest::prelude::*;

use domain2vec::embedding::{distance, distance_matrix, gram_tridiagonal, knn_graph, nearest, standardize, Metric};
use domain2vec::eval::pearson_cc;
use domain2vec::msda::distance_to_weights;

fn rows(n: std::ops::Range<usize>, d: std::ops::Range<usize>) -> impl Strategy<Value = Vec<Vec<f64>>> {
    (n, d).prop_flat_map(|(n, d)| prop::collection::vec(prop::collection::vec(-10.0..10.0f64, d), n))
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn gram_matches_double_loop((c, hw, acts) in (1usize..10, 1usize..40)
        .prop_flat_map(|(c, hw)| (Just(c), Just(hw), prop::collection::vec(-4.0f32..4.0, c * hw))))
    {
        let t = gram_tridiagonal(&acts, c).unwrap();
        let g = |i: usize, j: usize| (0..hw).map(|p| f64::from(acts[i * hw + p]) * f64::from(acts[j * hw + p])).sum::<f64>();
        for i in 0..c {
            prop_assert!(close(t.main[i], g(i, i), 1e-12));
            if i + 1 < c {
                prop_assert!(close(t.sup[i], g(i, i + 1), 1e-12));
                prop_assert!(close(t.sub[i], g(i + 1, i), 1e-12));
            }
        }
    }

    #[test]
    fn distances_are_symmetric_with_zero_diagonal(r in rows(2..8, 1..6), cosine in any::<bool>()) {
        let metric = if cosine { Metric::Cosine } else { Metric::Euclidean };
        let m = distance_matrix(&r, metric);
        for i in 0..r.len() {
            prop_assert_eq!(m[i][i], 0.0);
            for j in 0..r.len() {
                prop_assert_eq!(m[i][j], m[j][i]);
                prop_assert!(m[i][j] >= 0.0);
                prop_assert!(close(m[i][j], distance(&r[i], &r[j], metric), 1e-12));
            }
        }
    }

    #[test]
    fn knn_graph_is_invariant_under_monotone_rescaling(r in rows(3..9, 2..5), k in 1usize..4, a in 0.1..5.0f64, b in 0.0..3.0f64) {
        let d = distance_matrix(&r, Metric::Euclidean);
        let n = d.len();
        let k = k.min(n - 1);
        let t: Vec<Vec<f64>> = d.iter().enumerate()
            .map(|(i, row)| row.iter().enumerate().map(|(j, &x)| if i == j { 0.0 } else { a * x.powi(3) + b }).collect())
            .collect();
        let nodes: Vec<(u32, String, usize)> = (0..n as u32).map(|i| (i, format!("d{i}"), 10)).collect();
        let g1 = knn_graph(&d, k, &nodes).unwrap();
        let g2 = knn_graph(&t, k, &nodes).unwrap();
        let pairs = |g: &domain2vec::embedding::KnowledgeGraph| g.edges.iter().map(|e| (e.from, e.to)).collect::<Vec<_>>();
        prop_assert_eq!(pairs(&g1), pairs(&g2));
        prop_assert_eq!(g1.edges.len(), n * k);
        for i in 0..n {
            let nb = nearest(&d, i, k);
            prop_assert!(!nb.contains(&i));
            let worst = nb.iter().map(|&j| d[i][j]).fold(0.0, f64::max);
            prop_assert!((0..n).filter(|j| *j != i && !nb.contains(j)).all(|j| d[i][j] >= worst));
        }
    }

    #[test]
    fn pearson_is_affine_invariant(xy in prop::collection::vec((-5.0..5.0f64, -5.0..5.0f64), 3..30), a in 0.1..10.0f64, b in -10.0..10.0f64) {
        let (x, y): (Vec<f64>, Vec<f64>) = xy.into_iter().unzip();
        prop_assume!(pearson_cc(&x, &y).is_ok());
        let r = pearson_cc(&x, &y).unwrap();
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
        let ax: Vec<f64> = x.iter().map(|v| a * v + b).collect();
        prop_assert!(close(pearson_cc(&ax, &y).unwrap(), r, 1e-9));
        let neg: Vec<f64> = y.iter().map(|v| -a * v + b).collect();
        prop_assert!(close(pearson_cc(&x, &neg).unwrap(), -r, 1e-9));
        prop_assert!(close(pearson_cc(&y, &x).unwrap(), r, 1e-12));
    }

    #[test]
    fn weights_favour_the_nearest_source(d in prop::collection::vec(0.0..3.0f64, 1..10), tau in 0.05..5.0f64) {
        let w = distance_to_weights(&d, tau).unwrap().weights;
        prop_assert!(close(w.iter().sum::<f64>(), 1.0, 1e-12));
        prop_assert!(w.iter().all(|&v| v > 0.0));
        for i in 0..d.len() {
            for j in 0..d.len() {
                if d[i] < d[j] {
                    prop_assert!(w[i] >= w[j]);
                }
                if d[i] == d[j] {
                    prop_assert_eq!(w[i], w[j]);
                }
            }
        }
        let shifted: Vec<f64> = d.iter().map(|v| v + 1.5).collect();
        let ws = distance_to_weights(&shifted, tau).unwrap().weights;
        prop_assert!(w.iter().zip(&ws).all(|(a, b)| close(*a, *b, 1e-12)));
    }

    #[test]
    fn standardized_columns_have_zero_mean_unit_std(r in rows(2..12, 1..8)) {
        let s = standardize(&r).unwrap();
        let n = r.len() as f64;
        prop_assert_eq!(s.kept.len() + s.dropped.len(), r[0].len());
        for (c, _) in s.kept.iter().enumerate() {
            let mean = s.rows.iter().map(|row| row[c]).sum::<f64>() / n;
            let var = s.rows.iter().map(|row| (row[c] - mean).powi(2)).sum::<f64>() / n;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((var.sqrt() - 1.0).abs() < 1e-9);
        }
    }
}
