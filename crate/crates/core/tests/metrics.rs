use cir_core::metrics::{discriminability, export_embeddings, Pca};
use cir_core::PredictMode;
use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, Normal};

fn random_matrix(rows: usize, cols: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = cir_core::rng::stream(seed, "pca", &[]);
    // Distinct column scales give a well-separated spectrum.
    (0..rows)
        .map(|_| (0..cols).map(|j| rng.random_range(-1.0..1.0) * (1.0 + j as f64 * 0.4)).collect())
        .collect()
}

/// Top-2 eigenvectors of the sample covariance from a dense solver.
fn oracle_top2(x: &[Vec<f64>]) -> DMatrix<f64> {
    let (n, d) = (x.len(), x[0].len());
    let m = DMatrix::from_fn(n, d, |i, j| x[i][j]);
    let mean = m.row_mean();
    let c = DMatrix::from_fn(n, d, |i, j| m[(i, j)] - mean[j]);
    let cov = c.transpose() * &c / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut idx: Vec<usize> = (0..d).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    DMatrix::from_fn(d, 2, |i, j| eig.eigenvectors[(i, idx[j])])
}

#[test]
fn top2_subspace_matches_dense_eigensolver() {
    for seed in 0..5 {
        let x = random_matrix(100, 8, seed);
        let pca = Pca::fit(&x, 2).unwrap();
        let ours = DMatrix::from_fn(8, 2, |i, j| pca.axes[j][i]);
        let oracle = oracle_top2(&x);
        // Cosines of the principal angles are the singular values of U^T V.
        let sv = (ours.transpose() * oracle).singular_values();
        for s in sv.iter() {
            let angle = s.min(1.0).acos();
            assert!(angle < 1e-6, "seed {seed}: principal angle {angle:e}");
        }
    }
}

#[test]
fn planar_data_keeps_pairwise_distances() {
    let x: Vec<Vec<f64>> = (0..20).map(|i| vec![(i as f64 * 0.37).sin() * 3.0, (i as f64 * 1.3).cos()]).collect();
    let pca = Pca::fit(&x, 2).unwrap();
    let p: Vec<Vec<f64>> = x.iter().map(|v| pca.project(v)).collect();
    let d = |a: &[f64], b: &[f64]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
    for i in 0..x.len() {
        for j in 0..x.len() {
            assert!((d(&x[i], &x[j]) - d(&p[i], &p[j])).abs() < 1e-6);
        }
    }
}

#[test]
fn duplicates_project_identically_and_csv_is_written() {
    let mut x = random_matrix(10, 5, 9);
    x.extend(x.clone());
    let labels: Vec<usize> = (0..20).map(|i| i % 2).collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("emb.csv");
    let pca = export_embeddings(&x, &labels, &path).unwrap();
    for i in 0..10 {
        assert_eq!(pca.project(&x[i]), pca.project(&x[i + 10]));
    }
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("x,y,label\n"));
    assert_eq!(text.lines().count(), 21);
}

#[test]
fn ratio_grows_with_separation() {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut last = 0.0;
    for d in [1.0, 2.0, 4.0] {
        let mut rng = cir_core::rng::stream(7, "mc", &[]);
        let mut f = Vec::new();
        let mut y = Vec::new();
        for i in 0..4000 {
            let c = i % 2;
            f.push(vec![normal.sample(&mut rng) + c as f64 * d, normal.sample(&mut rng)]);
            y.push(c);
        }
        let r = discriminability(&f, &y, PredictMode::Baseline).unwrap();
        assert!(r.ratio > last, "d={d}: {} <= {last}", r.ratio);
        last = r.ratio;
    }
}
