//! Frozen-feature evaluation: the few-shot linear probe.
//!
//! Features are eval-mode pre-head representations (post pre-head norm, post
//! global pooling). Classification weights come from ridge regression against
//! one-hot targets, solved by Cholesky factorization of the regularized
//! normal equations.

use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::model::{forward_features, MixerConfig, MixerParams};
use crate::rng;
use crate::scalar::Scalar;
use crate::surgery::{permute_input, PermSpec};
use crate::tensor::Tensor;


/// Frozen features with their one-hot targets.
#[derive(Debug, Clone)]
pub struct FeatureMatrix<T> {
    /// `[N, C]`
    pub features: Tensor<T>,
    /// `[N, K]`
    pub targets: Tensor<T>,
}

impl<T: Scalar> FeatureMatrix<T> {
    pub fn new(features: Tensor<T>, targets: Tensor<T>) -> Result<Self> {
        if features.rank() != 2 || targets.rank() != 2 || features.shape()[0] != targets.shape()[0]
        {
            return Err(Error::shape(
                "feature_matrix",
                features.shape(),
                targets.shape(),
            ));
        }
        Ok(FeatureMatrix { features, targets })
    }

    pub fn examples(&self) -> usize {
        self.features.shape()[0]
    }
}

/// Default lambda grid, ascending.
pub const LAMBDA_GRID: [f64; 4] = [1e-6, 1e-4, 1e-2, 1.0];

/// Pre-head pooled features of selected examples, eval mode, in batches.
pub fn extract_features(
    config: &MixerConfig,
    params: &MixerParams<f32>,
    ds: &Dataset,
    indices: &[usize],
    input_perm: Option<&PermSpec>,
    batch: usize,
) -> Result<FeatureMatrix<f32>> {
    let c = config.hidden_c;
    let mut features = Vec::with_capacity(indices.len() * c);
    for chunk in indices.chunks(batch.max(1)) {
        let mut images = ds.batch(chunk);
        if let Some(spec) = input_perm {
            images = permute_input(config, &images, spec)?;
        }
        let images = data::normalize(&images);
        let pooled = forward_features(config, params, &images)?;
        features.extend_from_slice(pooled.data());
    }
    let labels = ds.labels_at(indices);
    FeatureMatrix::new(
        Tensor::from_vec(&[indices.len(), c], features)?,
        data::one_hot(&labels, config.num_classes),
    )
}

/// Solve `(F^T F + lambda N I) W = F^T Y` for `W` (shape `[C, K]`).
pub fn ridge_fit<T: Scalar>(fm: &FeatureMatrix<T>, lambda: f64) -> Result<Tensor<T>> {
    if lambda <= 0.0 {
        return Err(Error::Contract(format!(
            "ridge lambda must be > 0, got {lambda}"
        )));
    }
    let n = fm.examples();
    let ft = fm.features.transpose2()?; // [C, N]
    let mut gram = ft.matmul(&fm.features)?; // [C, C]
    let c = gram.shape()[0];
    let ridge = T::of_f64(lambda * n as f64);
    for i in 0..c {
        let v = gram.data()[i * c + i] + ridge;
        gram.data_mut()[i * c + i] = v;
    }
    let rhs = ft.matmul(&fm.targets)?; // [C, K]
    cholesky_solve(&gram, &rhs)
}

/// Cholesky factorization and solve for a symmetric positive-definite system
/// with multiple right-hand sides.
fn cholesky_solve<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let n = a.shape()[0];
    let k = b.shape()[1];
    // pivots below this fraction of the diagonal scale mean the system is
    // numerically rank-deficient
    let scale = (0..n)
        .map(|i| a.data()[i * n + i].as_f64())
        .fold(0.0f64, f64::max);
    let tol = T::of_f64(scale * 1e-12);
    let mut l = vec![T::zero(); n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a.data()[i * n + j];
            for p in 0..j {
                sum = sum - l[i * n + p] * l[j * n + p];
            }
            if i == j {
                if sum <= tol {
                    return Err(Error::Solver(format!(
                        "matrix not positive definite at pivot {i}; try a larger lambda"
                    )));
                }
                l[i * n + i] = sum.sqrt();
            } else {
                l[i * n + j] = sum / l[j * n + j];
            }
        }
    }
    // forward substitution L z = b, then back substitution L^T w = z
    let mut x = b.data().to_vec();
    for col in 0..k {
        for i in 0..n {
            let mut sum = x[i * k + col];
            for p in 0..i {
                sum = sum - l[i * n + p] * x[p * k + col];
            }
            x[i * k + col] = sum / l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut sum = x[i * k + col];
            for p in i + 1..n {
                sum = sum - l[p * n + i] * x[p * k + col];
            }
            x[i * k + col] = sum / l[i * n + i];
        }
    }
    Tensor::from_vec(&[n, k], x)
}

/// Top-1 accuracy of `argmax(F W)` against the one-hot targets.
pub fn probe_accuracy<T: Scalar>(fm: &FeatureMatrix<T>, weights: &Tensor<T>) -> Result<f64> {
    let scores = fm.features.matmul(weights)?;
    let k = scores.shape()[1];
    let mut correct = 0usize;
    for (srow, trow) in scores.data().chunks(k).zip(fm.targets.data().chunks(k)) {
        let pred = argmax_generic(srow);
        let truth = argmax_generic(trow);
        if pred == truth {
            correct += 1;
        }
    }
    Ok(correct as f64 / fm.examples() as f64)
}

fn argmax_generic<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Seeded choice of `shots` examples per class.
pub fn sample_shots(ds: &Dataset, shots: usize, seed: u64) -> Result<Vec<usize>> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes];
    for (i, &l) in ds.labels.iter().enumerate() {
        by_class[l as usize].push(i);
    }
    let mut rng = rng::stream(seed, 23);
    let mut picked = Vec::with_capacity(shots * ds.num_classes);
    for (class, pool) in by_class.iter().enumerate() {
        if pool.len() < shots {
            return Err(Error::Dataset(format!(
                "class {class} has {} examples, fewer than {shots} shots",
                pool.len()
            )));
        }
        let perm = rng::permutation(pool.len(), &mut rng);
        picked.extend(perm[..shots].iter().map(|&p| pool[p]));
    }
    Ok(picked)
}

/// Few-shot probe: fit ridge classifiers on `shots` frozen-feature examples
/// per class for every lambda in the grid, pick the lambda by accuracy on
/// those same shots (nothing is left to hold out at five shots; ties go to
/// the smaller lambda), and report test top-1.
pub fn few_shot_eval(
    config: &MixerConfig,
    params: &MixerParams<f32>,
    train: &Dataset,
    test: &Dataset,
    shots: usize,
    lambdas: &[f64],
    seed: u64,
    input_perm: Option<&PermSpec>,
) -> Result<f64> {
    if lambdas.is_empty() {
        return Err(Error::Contract("lambda grid is empty".into()));
    }
    let picked = sample_shots(train, shots, seed)?;
    let train_fm = extract_features(config, params, train, &picked, input_perm, 256)?;
    // solve in f64 for stability regardless of feature precision
    let train64 = FeatureMatrix::new(train_fm.features.cast::<f64>(), train_fm.targets.cast())?;

    let mut best: Option<(f64, Tensor<f64>)> = None;
    for &lambda in lambdas {
        let w = ridge_fit(&train64, lambda)?;
        let acc = probe_accuracy(&train64, &w)?;
        if best.as_ref().map(|(a, _)| acc > *a).unwrap_or(true) {
            best = Some((acc, w));
        }
    }
    let (_, weights) = best.expect("grid non-empty");

    let all: Vec<usize> = (0..test.len()).collect();
    let test_fm = extract_features(config, params, test, &all, input_perm, 256)?;
    let test64 = FeatureMatrix::new(test_fm.features.cast::<f64>(), test_fm.targets.cast())?;
    probe_accuracy(&test64, &weights)
}
