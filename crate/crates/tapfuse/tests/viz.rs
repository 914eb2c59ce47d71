use proptest::prelude::*;
use tapfuse::viz::{self, pca, pca_rgb};

/// Cyclic Jacobi eigenvalues of a symmetric matrix, as an independent
/// reference for the library's eigen-solver.
fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        if off < 1e-22 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let (c, s) = (1.0 / (t * t + 1.0).sqrt(), t / (t * t + 1.0).sqrt());
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    ev.sort_by(|x, y| y.total_cmp(x));
    ev
}

fn covariance(x: &[f64], n: usize, c: usize) -> Vec<Vec<f64>> {
    let mean: Vec<f64> = (0..c).map(|j| (0..n).map(|i| x[i * c + j]).sum::<f64>() / n as f64).collect();
    (0..c)
        .map(|a| (0..c).map(|b| (0..n).map(|i| (x[i * c + a] - mean[a]) * (x[i * c + b] - mean[b])).sum::<f64>() / n as f64).collect())
        .collect()
}

proptest! {
    #[test]
    fn reconstruction_error_is_sum_of_discarded_eigenvalues(
        (n, c, k, data) in (4usize..24, 2usize..6).prop_flat_map(|(n, c)| (Just(n), Just(c), 0..=c, proptest::collection::vec(-3.0f64..3.0, n * c)))
    ) {
        let p = pca(&data, n, c).unwrap();
        let reference = jacobi_eigenvalues(covariance(&data, n, c));
        for (a, b) in p.eigenvalues.iter().zip(&reference) {
            prop_assert!((a - b.max(0.0)).abs() < 1e-8 * (1.0 + b.abs()));
        }
        let discarded: f64 = reference[k..].iter().map(|v| v.max(0.0)).sum();
        let err = p.reconstruction_error(&data, k);
        prop_assert!((err - discarded).abs() < 1e-8 * (1.0 + discarded), "{err} vs {discarded}");
    }

    #[test]
    fn normalised_weights_lie_in_unit_interval(w in proptest::collection::vec(-10.0f64..10.0, 1..30)) {
        let n = viz::normalize_by_max(&w);
        prop_assert!(n.iter().all(|&v| (0.0..=1.0).contains(&v)));
        if w.iter().any(|&v| v != 0.0) {
            prop_assert!(n.iter().any(|&v| v == 1.0));
        }
    }
}

#[test]
fn identity_covariance_keeps_full_rank() {
    let r = 3f64.sqrt();
    let mut x = Vec::new();
    for i in 0..3 {
        for s in [r, -r] {
            let mut row = [0.0; 3];
            row[i] = s;
            x.extend(row);
        }
    }
    let p = pca(&x, 6, 3).unwrap();
    for e in &p.eigenvalues {
        assert!((e - 1.0).abs() < 1e-12);
    }
    let z = p.project(&x, 3);
    // Gram determinant of the projected coordinates is non-zero.
    let g = |a: usize, b: usize| z.iter().map(|row| row[a] * row[b]).sum::<f64>();
    let det = g(0, 0) * (g(1, 1) * g(2, 2) - g(1, 2) * g(2, 1)) - g(0, 1) * (g(1, 0) * g(2, 2) - g(1, 2) * g(2, 0))
        + g(0, 2) * (g(1, 0) * g(2, 1) - g(1, 1) * g(2, 0));
    assert!((det - 216.0).abs() < 1e-9, "{det}");
    assert!(p.reconstruction_error(&x, 3) < 1e-24);
}

#[test]
fn two_channel_map_falls_back_to_grayscale() {
    let map: Vec<f64> = (0..2 * 16).map(|i| (i % 7) as f64).collect();
    let (rgb, gray) = pca_rgb(&map, 2, 4, 4).unwrap();
    assert!(gray);
    assert!(rgb.chunks(3).all(|px| px[0] == px[1] && px[1] == px[2]));
    assert!(rgb.contains(&0) && rgb.contains(&255));
}

#[test]
fn overlay_keeps_image_size_and_tints_hot_pixels() {
    let img = vec![0.5; 3 * 4 * 5];
    let mut heat = vec![0.0; 20];
    heat[7] = 1.0;
    let o = viz::overlay(&img, &heat, 4, 5, 1.0);
    assert_eq!(o.len(), 60);
    assert_eq!(&o[21..24], &[255, 0, 0]);
    assert_eq!(&o[0..3], &[128, 128, 128]);
}

#[test]
fn charts_are_well_formed_svg() {
    let s = viz::heatmap_svg("w", &[0.0, 0.5, 1.0, 0.25], &["a".into(), "b".into()], &["t1".into(), "t2".into()], 10);
    assert!(s.starts_with("<svg") && s.trim_end().ends_with("</svg>"));
    assert_eq!(s.matches("<rect").count(), 4);
    let l = viz::line_plot_svg("x", "t", "m", &[("res".into(), vec![(1.0, 0.2), (2.0, 0.3)])]);
    assert_eq!(l.matches("<circle").count(), 2);
}
