//! Prediction-space geometry for particle ensembles.
//!
//! A network is embedded by the square roots of its class probabilities on
//! a fixed evaluation set, scaled so that Euclidean distance between two
//! embedded networks equals their mean squared Hellinger distance over that
//! set. A principal-component projection of those vectors (classical
//! multidimensional scaling on the centered Gram matrix) then gives
//! low-dimensional coordinates whose pairwise distances are exact at full
//! rank.

use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::info::Distribution;
use crate::nn::MlpNetwork;
use crate::scalar::Real;

/// Square-root predictions of K networks on n inputs, one row per network,
/// n·C columns, scaled by 1/√(2n).
///
/// The scale makes every row's squared norm exactly 1/2 and the squared
/// distance between two rows the mean over inputs of the squared Hellinger
/// distance between the networks' predictions.
#[derive(Debug, Clone)]
pub struct PredictionMatrix<R: Real> {
    matrix: Array2<R>,
    input_count: usize,
    class_count: usize,
}

impl<R: Real> PredictionMatrix<R> {
    pub fn matrix(&self) -> ArrayView2<'_, R> {
        self.matrix.view()
    }

    pub fn input_count(&self) -> usize {
        self.input_count
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }
}

/// Embeds each network as (√p(y|x₁), …, √p(y|xₙ)) / √(2n).
pub fn prediction_vectors(
    networks: &[MlpNetwork],
    inputs: ArrayView2<'_, f64>,
) -> Result<PredictionMatrix<f64>> {
    if networks.is_empty() {
        return Err(Error::Usage("at least one network required".into()));
    }
    let n = inputs.nrows();
    if n == 0 {
        return Err(Error::Usage("at least one evaluation input required".into()));
    }
    let c = networks[0].class_count();
    let scale = 1.0 / (2.0 * n as f64).sqrt();
    let mut matrix = Array2::zeros((networks.len(), n * c));
    for (k, net) in networks.iter().enumerate() {
        if net.class_count() != c {
            return Err(Error::Usage("all networks must share a class count".into()));
        }
        let probs = net.forward(inputs)?.probabilities();
        for i in 0..n {
            for y in 0..c {
                matrix[[k, i * c + y]] = probs[[i, y]].sqrt() * scale;
            }
        }
    }
    Ok(PredictionMatrix { matrix, input_count: n, class_count: c })
}

/// Squared Hellinger distance `(1/2)·Σ (√p − √q)²`, capped at 1.
///
/// The squared-difference form is used so equal inputs give exactly 0.
pub fn hellinger_sq<R: Real>(p: &Distribution<R>, q: &Distribution<R>) -> Result<R> {
    if p.len() != q.len() {
        return Err(Error::Usage(format!(
            "distributions of length {} and {} are not comparable",
            p.len(),
            q.len()
        )));
    }
    let sum: R = p
        .masses()
        .iter()
        .zip(q.masses())
        .map(|(&a, &b)| {
            let diff = a.sqrt() - b.sqrt();
            diff * diff
        })
        .sum();
    Ok((sum * R::of(0.5)).min(R::one()))
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations,
/// run until the off-diagonal Frobenius norm falls below
/// max(1e−12, machine epsilon × the input's Frobenius norm).
///
/// Returns eigenvalues in descending order with their eigenvectors as the
/// corresponding columns, so `Q·diag(λ)·Qᵀ` reconstructs the input.
pub fn symmetric_eigh<R: Real>(matrix: ArrayView2<'_, R>) -> Result<(Vec<R>, Array2<R>)> {
    let n = matrix.nrows();
    if n == 0 || matrix.ncols() != n {
        return Err(Error::Usage("a nonempty square matrix required".into()));
    }
    let frob = matrix.iter().map(|&v| v * v).sum::<R>().sqrt();
    for i in 0..n {
        for j in 0..i {
            if (matrix[[i, j]] - matrix[[j, i]]).abs() > R::validation_tol() * frob.max(R::one())
            {
                return Err(Error::Usage("matrix is not symmetric".into()));
            }
        }
    }
    let mut a = matrix.to_owned();
    let mut q = Array2::eye(n);
    let threshold = R::of(1e-12).max(R::epsilon() * frob);
    const MAX_SWEEPS: usize = 200;
    for sweep in 0..=MAX_SWEEPS {
        let mut off = R::zero();
        for i in 0..n {
            for j in i + 1..n {
                off += a[[i, j]] * a[[i, j]];
            }
        }
        if (off + off).sqrt() <= threshold {
            break;
        }
        if sweep == MAX_SWEEPS {
            return Err(Error::Numerical {
                step: sweep as u64,
                detail: format!(
                    "Jacobi sweeps stalled with off-diagonal norm {}",
                    (off + off).sqrt()
                ),
            });
        }
        for p in 0..n {
            for r in p + 1..n {
                if a[[p, r]] == R::zero() {
                    continue;
                }
                // Rotation angle choosing the root that keeps |t| ≤ 1.
                let theta = (a[[r, r]] - a[[p, p]]) / (R::of(2.0) * a[[p, r]]);
                let t = theta.signum() / (theta.abs() + (theta * theta + R::one()).sqrt());
                let c = R::one() / (t * t + R::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[[k, p]];
                    let akr = a[[k, r]];
                    a[[k, p]] = c * akp - s * akr;
                    a[[k, r]] = s * akp + c * akr;
                }
                for k in 0..n {
                    let apk = a[[p, k]];
                    let ark = a[[r, k]];
                    a[[p, k]] = c * apk - s * ark;
                    a[[r, k]] = s * apk + c * ark;
                }
                for k in 0..n {
                    let qkp = q[[k, p]];
                    let qkr = q[[k, r]];
                    q[[k, p]] = c * qkp - s * qkr;
                    q[[k, r]] = s * qkp + c * qkr;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        a[[j, j]].partial_cmp(&a[[i, i]]).expect("eigenvalues are finite")
    });
    let eigenvalues: Vec<R> = order.iter().map(|&i| a[[i, i]]).collect();
    let mut vectors = Array2::zeros((n, n));
    for (col, &i) in order.iter().enumerate() {
        for k in 0..n {
            vectors[[k, col]] = q[[k, i]];
        }
    }
    Ok((eigenvalues, vectors))
}

/// A low-dimensional projection with its variance accounting.
#[derive(Debug, Clone)]
pub struct EmbeddingResult<R: Real> {
    /// K×d coordinates, components ordered by decreasing variance.
    pub coordinates: Array2<R>,
    /// Squared scatter captured by each kept component, non-increasing.
    pub explained_variance: Vec<R>,
    /// Squared scatter of the centered rows across all components.
    pub total_variance: R,
}

/// Principal components of the rows via the centered K×K Gram matrix.
///
/// Coordinates are eigenvectors scaled by the square roots of the Gram
/// eigenvalues, which makes embedded pairwise distances equal the original
/// Euclidean distances whenever d covers the full rank. Each component's
/// sign is fixed by making its largest-magnitude coordinate positive.
pub fn pca_embed<R: Real>(matrix: ArrayView2<'_, R>, d: usize) -> Result<EmbeddingResult<R>> {
    let k = matrix.nrows();
    if k < 2 {
        return Err(Error::Usage("at least two rows required".into()));
    }
    let limit = (k - 1).min(matrix.ncols());
    if d < 1 || d > limit {
        return Err(Error::Usage(format!(
            "embedding dimension {d} outside 1..={limit} for {k} rows of width {}",
            matrix.ncols()
        )));
    }
    let mean = matrix.mean_axis(Axis(0)).expect("nonempty matrix");
    let centered = &matrix - &mean.insert_axis(Axis(0));
    let gram = centered.dot(&centered.t());
    let (eigenvalues, vectors) = symmetric_eigh(gram.view())?;
    let spectrum: Vec<R> = eigenvalues.iter().map(|&l| l.max(R::zero())).collect();
    let total_variance = spectrum.iter().copied().sum();
    let mut coordinates = Array2::zeros((k, d));
    for j in 0..d {
        let scale = spectrum[j].sqrt();
        for i in 0..k {
            coordinates[[i, j]] = vectors[[i, j]] * scale;
        }
        let mut lead = 0;
        for i in 1..k {
            if coordinates[[i, j]].abs() > coordinates[[lead, j]].abs() {
                lead = i;
            }
        }
        if coordinates[[lead, j]] < R::zero() {
            for i in 0..k {
                coordinates[[i, j]] = -coordinates[[i, j]];
            }
        }
    }
    Ok(EmbeddingResult {
        coordinates,
        explained_variance: spectrum[..d].to_vec(),
        total_variance,
    })
}

/// Squared Euclidean distance between two rows of a matrix.
pub fn row_distance_sq<R: Real>(matrix: ArrayView2<'_, R>, i: usize, j: usize) -> R {
    matrix
        .row(i)
        .iter()
        .zip(matrix.row(j))
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_predictor_row_has_squared_norm_half() {
        // Zero-weight network: uniform over 2 classes on 1 input.
        let net = MlpNetwork::from_params(&[1, 2], Activation::HardTanh, vec![0.0; 4]).unwrap();
        let pm = prediction_vectors(&[net], array![[0.3]].view()).unwrap();
        let expect = 0.5f64.sqrt() / 2.0f64.sqrt();
        assert!((pm.matrix()[[0, 0]] - expect).abs() < 1e-15);
        assert!((pm.matrix()[[0, 1]] - expect).abs() < 1e-15);
        let norm_sq: f64 = pm.matrix().row(0).iter().map(|v| v * v).sum();
        assert!((norm_sq - 0.5).abs() < 1e-12);
    }

    #[test]
    fn every_row_has_squared_norm_half() {
        let nets: Vec<MlpNetwork> = (0..4)
            .map(|s| MlpNetwork::init(&[2, 6, 3], Activation::HardTanh, s).unwrap())
            .collect();
        let inputs = array![[0.4, -0.2], [1.0, 0.3], [-0.5, 0.8]];
        let pm = prediction_vectors(&nets, inputs.view()).unwrap();
        for i in 0..4 {
            let norm_sq: f64 = pm.matrix().row(i).iter().map(|v| v * v).sum();
            assert!((norm_sq - 0.5).abs() < 1e-12, "row {i} norm² {norm_sq}");
        }
    }

    #[test]
    fn identical_networks_embed_identically() {
        let net = MlpNetwork::init(&[2, 5, 3], Activation::LeakyRelu, 7).unwrap();
        let pm = prediction_vectors(
            &[net.clone(), net],
            array![[0.1, 0.2], [0.9, -0.4]].view(),
        )
        .unwrap();
        assert_eq!(pm.matrix().row(0), pm.matrix().row(1));
        assert_eq!(row_distance_sq(pm.matrix(), 0, 1), 0.0);
    }

    #[test]
    fn opposite_deterministic_predictors_are_at_squared_distance_one() {
        let a = MlpNetwork::from_params(&[1, 2], Activation::HardTanh, vec![0.0, 0.0, 800.0, 0.0])
            .unwrap();
        let b = MlpNetwork::from_params(&[1, 2], Activation::HardTanh, vec![0.0, 0.0, 0.0, 800.0])
            .unwrap();
        let pm = prediction_vectors(&[a, b], array![[0.0]].view()).unwrap();
        let d2 = row_distance_sq(pm.matrix(), 0, 1);
        assert!((d2 - 1.0).abs() < 1e-12, "maximally separated predictions: {d2}");
    }

    #[test]
    fn row_distances_equal_mean_squared_hellinger() {
        let nets: Vec<MlpNetwork> = (0..3)
            .map(|s| MlpNetwork::init(&[2, 8, 4], Activation::HardTanh, 100 + s).unwrap())
            .collect();
        let inputs = array![[0.4, -0.2], [1.0, 0.3], [-0.5, 0.8], [0.0, 0.0], [0.7, 0.7]];
        let pm = prediction_vectors(&nets, inputs.view()).unwrap();
        let n = inputs.nrows();
        for i in 0..3 {
            for j in 0..3 {
                let mut mean_h2 = 0.0;
                for r in 0..n {
                    let pi = Distribution::new(
                        nets[i].forward(inputs.view()).unwrap().probabilities().row(r).to_vec(),
                    )
                    .unwrap();
                    let pj = Distribution::new(
                        nets[j].forward(inputs.view()).unwrap().probabilities().row(r).to_vec(),
                    )
                    .unwrap();
                    mean_h2 += hellinger_sq(&pi, &pj).unwrap() / n as f64;
                }
                let d2 = row_distance_sq(pm.matrix(), i, j);
                assert!(
                    (d2 - mean_h2).abs() < 1e-10,
                    "rows {i},{j}: embedded {d2} vs mean Hellinger² {mean_h2}"
                );
            }
        }
    }

    #[test]
    fn hellinger_sq_matches_hand_values() {
        let p = Distribution::new(vec![0.5, 0.5]).unwrap();
        let q = Distribution::new(vec![1.0, 0.0]).unwrap();
        assert!((hellinger_sq(&p, &q).unwrap() - (1.0 - 0.5f64.sqrt())).abs() < 1e-15);
        assert_eq!(hellinger_sq(&p, &p).unwrap(), 0.0);
        let disjoint_a = Distribution::new(vec![1.0, 0.0]).unwrap();
        let disjoint_b = Distribution::new(vec![0.0, 1.0]).unwrap();
        assert_eq!(hellinger_sq(&disjoint_a, &disjoint_b).unwrap(), 1.0);
        let wide = Distribution::new(vec![0.25; 4]).unwrap();
        assert!(hellinger_sq(&p, &wide).is_err());
    }

    #[test]
    fn jacobi_reconstructs_random_symmetric_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for n in [1usize, 2, 5, 9] {
            let mut m = Array2::zeros((n, n));
            for i in 0..n {
                for j in 0..=i {
                    let v: f64 = rng.gen_range(-2.0..2.0);
                    m[[i, j]] = v;
                    m[[j, i]] = v;
                }
            }
            let (vals, q) = symmetric_eigh(m.view()).unwrap();
            let mut rebuilt = Array2::zeros((n, n));
            for i in 0..n {
                for j in 0..n {
                    rebuilt[[i, j]] =
                        (0..n).map(|t| q[[i, t]] * vals[t] * q[[j, t]]).sum::<f64>();
                }
            }
            let err: f64 = (&rebuilt - &m).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(err < 1e-10, "n={n}: reconstruction error {err:e}");
            for w in vals.windows(2) {
                assert!(w[0] >= w[1], "eigenvalues must come sorted");
            }
        }
    }

    #[test]
    fn jacobi_rejects_asymmetry() {
        let m = array![[1.0f64, 2.0], [0.5, 1.0]];
        assert!(symmetric_eigh(m.view()).is_err());
    }

    #[test]
    fn triangle_distances_survive_embedding() {
        // A 3-4-5 right triangle placed in five dimensions.
        let m = array![
            [0.0f64, 0.0, 1.0, 2.0, 3.0],
            [3.0, 0.0, 1.0, 2.0, 3.0],
            [0.0, 4.0, 1.0, 2.0, 3.0]
        ];
        let emb = pca_embed(m.view(), 2).unwrap();
        let expect = [(0, 1, 9.0), (0, 2, 16.0), (1, 2, 25.0)];
        for &(i, j, d2) in &expect {
            let got = row_distance_sq(emb.coordinates.view(), i, j);
            assert!((got - d2).abs() < 1e-10, "pair ({i},{j}): {got} vs {d2}");
        }
        assert!(emb.explained_variance[0] >= emb.explained_variance[1]);
        let sum: f64 = emb.explained_variance.iter().sum();
        assert!(
            (sum - emb.total_variance).abs() < 1e-10,
            "a planar triangle is fully explained in two components"
        );
    }

    #[test]
    fn affine_subspace_leaves_no_variance_behind() {
        // Four points on a line in 3-D: one component carries everything.
        let m = array![
            [0.0f64, 0.0, 0.0],
            [1.0, 2.0, -1.0],
            [2.0, 4.0, -2.0],
            [3.0, 6.0, -3.0]
        ];
        let emb = pca_embed(m.view(), 3).unwrap();
        assert!(emb.explained_variance[0] > 0.0);
        assert!(emb.explained_variance[1].abs() < 1e-10);
        assert!(emb.explained_variance[2].abs() < 1e-10);
    }

    #[test]
    fn duplicated_rows_embed_to_coincident_points() {
        let m = array![
            [1.0f64, 2.0, 3.0],
            [4.0, -1.0, 0.5],
            [1.0, 2.0, 3.0],
            [0.0, 0.0, 1.0]
        ];
        let emb = pca_embed(m.view(), 2).unwrap();
        let d2 = row_distance_sq(emb.coordinates.view(), 0, 2);
        assert!(d2 < 1e-20, "duplicate rows split apart: {d2}");
    }

    #[test]
    fn embedding_dimension_limits_are_enforced() {
        let m = array![[1.0f64, 2.0], [3.0, 4.0], [5.0, 6.5]];
        assert!(pca_embed(m.view(), 2).is_ok());
        assert!(pca_embed(m.view(), 3).is_err(), "d is capped at K−1");
        assert!(pca_embed(m.view(), 0).is_err());
        let thin = array![[1.0f64], [2.0], [3.0]];
        assert!(pca_embed(thin.view(), 2).is_err(), "d is capped at the width");
    }

    #[test]
    fn component_signs_are_deterministic() {
        let m = array![
            [2.0f64, 0.1, 0.0],
            [-1.0, 0.4, 1.0],
            [0.5, -2.0, 0.3],
            [1.5, 1.0, -0.7]
        ];
        let a = pca_embed(m.view(), 2).unwrap();
        let b = pca_embed(m.view(), 2).unwrap();
        assert_eq!(a.coordinates, b.coordinates);
        for j in 0..2 {
            let mut lead = 0;
            for i in 1..4 {
                if a.coordinates[[i, j]].abs() > a.coordinates[[lead, j]].abs() {
                    lead = i;
                }
            }
            assert!(
                a.coordinates[[lead, j]] > 0.0,
                "component {j}'s largest-magnitude coordinate must be positive"
            );
        }
    }

    #[test]
    fn full_rank_embedding_reproduces_all_pairwise_distances() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let k = 6;
        let mut m: Array2<f64> = Array2::zeros((k, 10));
        for v in m.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let emb = pca_embed(m.view(), k - 1).unwrap();
        for i in 0..k {
            for j in 0..k {
                let original = row_distance_sq(m.view(), i, j);
                let embedded = row_distance_sq(emb.coordinates.view(), i, j);
                assert!(
                    (original - embedded).abs() < 1e-8,
                    "pair ({i},{j}): {original} vs {embedded}"
                );
            }
        }
    }

    #[test]
    fn generic_core_runs_in_f32() {
        let m = ndarray::array![[1.0f32, 0.0], [0.0, 1.0], [1.0, 1.0]];
        let emb = pca_embed(m.view(), 2).unwrap();
        assert_eq!(emb.coordinates.dim(), (3, 2));
        let p = Distribution::new(vec![0.5f32, 0.5]).unwrap();
        let q = Distribution::new(vec![1.0f32, 0.0]).unwrap();
        assert!((hellinger_sq(&p, &q).unwrap() - (1.0 - 0.5f32.sqrt())).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn hellinger_sq_stays_in_range_and_detects_equality(
            raw_p in proptest::collection::vec(0.01f64..1.0, 4),
            raw_q in proptest::collection::vec(0.01f64..1.0, 4)
        ) {
            let p = Distribution::from_weights(raw_p).unwrap();
            let q = Distribution::from_weights(raw_q).unwrap();
            let d = hellinger_sq(&p, &q).unwrap();
            prop_assert!((0.0..=1.0).contains(&d));
            prop_assert_eq!(hellinger_sq(&p, &p).unwrap(), 0.0);
        }

        #[test]
        fn explained_variance_is_sorted_and_bounded(seed in 0u64..50) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut m: Array2<f64> = Array2::zeros((5, 7));
            for v in m.iter_mut() {
                *v = rng.gen_range(-3.0..3.0);
            }
            let emb = pca_embed(m.view(), 4).unwrap();
            for w in emb.explained_variance.windows(2) {
                prop_assert!(w[0] >= w[1]);
            }
            for &v in &emb.explained_variance {
                prop_assert!(v >= 0.0);
                prop_assert!(v <= emb.total_variance + 1e-12);
            }
        }
    }
}
