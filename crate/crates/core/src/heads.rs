//! Projection (per-strip kernel-1 conv + ReLU + batch norm) and prediction
//! (per-strip linear) heads used only during pre-training.

use crate::matrix::Matrix;
use crate::nn;
use crate::params::{ParamStore, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

fn per_row_linear(params: &ParamStore, name: &str, x: &Matrix) -> Matrix {
    let w = params.get(&format!("{name}.w"));
    let b = params.data(&format!("{name}.b"));
    let (n, d_out, d_in) = (w.shape[0], w.shape[1], w.shape[2]);
    debug_assert_eq!((x.rows, x.cols), (n, d_in));
    let mut out = Matrix::zeros(n, d_out);
    for i in 0..n {
        let row = nn::linear_forward(
            x.row(i),
            &w.data[i * d_out * d_in..(i + 1) * d_out * d_in],
            &b[i * d_out..(i + 1) * d_out],
            d_out,
        );
        out.row_mut(i).copy_from_slice(&row);
    }
    out
}

fn per_row_linear_backward(
    params: &ParamStore,
    name: &str,
    x: &Matrix,
    grad: &Matrix,
    grads: &mut ParamStore,
) -> Matrix {
    let (wn, bn) = (format!("{name}.w"), format!("{name}.b"));
    let w = params.get(&wn);
    let (n, d_out, d_in) = (w.shape[0], w.shape[1], w.shape[2]);
    let (gw, gb) = grads.pair_mut(&wn, &bn);
    let mut g_in = Matrix::zeros(n, d_in);
    for i in 0..n {
        let gi = nn::linear_backward(
            x.row(i),
            &w.data[i * d_out * d_in..(i + 1) * d_out * d_in],
            grad.row(i),
            &mut gw[i * d_out * d_in..(i + 1) * d_out * d_in],
            &mut gb[i * d_out..(i + 1) * d_out],
        );
        g_in.row_mut(i).copy_from_slice(&gi);
    }
    g_in
}

#[derive(Debug, Clone)]
pub struct ProjectionCache {
    input: Matrix,
    activated: Matrix,
}

/// Kernel-1 convolution along each strip's feature axis followed by ReLU.
/// Batch normalization is applied separately because it couples samples.
pub fn projection_forward(params: &ParamStore, z: &Matrix) -> (Matrix, ProjectionCache) {
    let mut h = per_row_linear(params, "proj", z);
    h.data.iter_mut().for_each(|v| *v = v.max(0.0));
    (
        h.clone(),
        ProjectionCache {
            input: z.clone(),
            activated: h,
        },
    )
}

/// Projection output before the ReLU.
pub fn projection_preactivation(params: &ParamStore, z: &Matrix) -> Matrix {
    per_row_linear(params, "proj", z)
}

pub fn projection_backward(
    params: &ParamStore,
    cache: &ProjectionCache,
    grad: &Matrix,
    grads: &mut ParamStore,
) -> Matrix {
    let mut g = grad.clone();
    for (gv, a) in g.data.iter_mut().zip(&cache.activated.data) {
        if *a <= 0.0 {
            *gv = 0.0;
        }
    }
    per_row_linear_backward(params, "proj", &cache.input, &g, grads)
}

pub fn prediction_forward(params: &ParamStore, x: &Matrix) -> Matrix {
    per_row_linear(params, "pred", x)
}

pub fn prediction_backward(
    params: &ParamStore,
    x: &Matrix,
    grad: &Matrix,
    grads: &mut ParamStore,
) -> Matrix {
    per_row_linear_backward(params, "pred", x, grad, grads)
}

/// Running statistics of a batch-norm layer, kept outside the learnable
/// parameters so the optimizer and EMA never touch them.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BnStats {
    pub fn new(len: usize) -> Self {
        BnStats {
            running_mean: vec![0.0; len],
            running_var: vec![1.0; len],
        }
    }

    pub fn to_store(&self, rows: usize, cols: usize) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert(
            "bn.running_mean",
            Tensor::from_vec(&[rows, cols], self.running_mean.clone()).expect("stats shape"),
        );
        s.insert(
            "bn.running_var",
            Tensor::from_vec(&[rows, cols], self.running_var.clone()).expect("stats shape"),
        );
        s
    }

    pub fn from_store(store: &ParamStore) -> Option<Self> {
        Some(BnStats {
            running_mean: store.try_get("bn.running_mean")?.data.clone(),
            running_var: store.try_get("bn.running_var")?.data.clone(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct BatchNormCache {
    normalized: Vec<Matrix>,
    inv_std: Vec<f64>,
}

/// Normalizes every (strip, feature) cell over the batch axis with batch
/// statistics, updating the running statistics when `stats` is given.
pub fn batch_norm_train(
    params: &ParamStore,
    batch: &[Matrix],
    stats: Option<&mut BnStats>,
) -> (Vec<Matrix>, BatchNormCache) {
    let b = batch.len();
    let (rows, cols) = batch[0].shape();
    let cells = rows * cols;
    let gamma = params.data("bn.gamma");
    let beta = params.data("bn.beta");
    let mut mean = vec![0.0; cells];
    let mut var = vec![0.0; cells];
    for m in batch {
        for (acc, v) in mean.iter_mut().zip(&m.data) {
            *acc += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= b as f64);
    for m in batch {
        for ((acc, v), mu) in var.iter_mut().zip(&m.data).zip(&mean) {
            *acc += (v - mu) * (v - mu);
        }
    }
    var.iter_mut().for_each(|v| *v /= b as f64);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();

    let mut normalized = Vec::with_capacity(b);
    let mut out = Vec::with_capacity(b);
    for m in batch {
        let mut xhat = Matrix::zeros(rows, cols);
        let mut y = Matrix::zeros(rows, cols);
        for i in 0..cells {
            xhat.data[i] = (m.data[i] - mean[i]) * inv_std[i];
            y.data[i] = gamma[i] * xhat.data[i] + beta[i];
        }
        normalized.push(xhat);
        out.push(y);
    }
    if let Some(stats) = stats {
        let unbias = if b > 1 { b as f64 / (b - 1) as f64 } else { 1.0 };
        for i in 0..cells {
            stats.running_mean[i] = (1.0 - BN_MOMENTUM) * stats.running_mean[i] + BN_MOMENTUM * mean[i];
            stats.running_var[i] =
                (1.0 - BN_MOMENTUM) * stats.running_var[i] + BN_MOMENTUM * var[i] * unbias;
        }
    }
    (out, BatchNormCache { normalized, inv_std })
}

/// Normalization with running statistics (inference).
pub fn batch_norm_eval(params: &ParamStore, stats: &BnStats, x: &Matrix) -> Matrix {
    let gamma = params.data("bn.gamma");
    let beta = params.data("bn.beta");
    let mut y = x.clone();
    for i in 0..y.data.len() {
        let inv = 1.0 / (stats.running_var[i] + BN_EPS).sqrt();
        y.data[i] = gamma[i] * (x.data[i] - stats.running_mean[i]) * inv + beta[i];
    }
    y
}

pub fn batch_norm_backward(
    params: &ParamStore,
    cache: &BatchNormCache,
    grad: &[Matrix],
    grads: &mut ParamStore,
) -> Vec<Matrix> {
    let b = grad.len() as f64;
    let (rows, cols) = grad[0].shape();
    let cells = rows * cols;
    let gamma = params.data("bn.gamma");
    let mut sum_g = vec![0.0; cells];
    let mut sum_gx = vec![0.0; cells];
    for (g, xh) in grad.iter().zip(&cache.normalized) {
        for i in 0..cells {
            sum_g[i] += g.data[i];
            sum_gx[i] += g.data[i] * xh.data[i];
        }
    }
    {
        let (g_gamma, g_beta) = grads.pair_mut("bn.gamma", "bn.beta");
        for i in 0..cells {
            g_gamma[i] += sum_gx[i];
            g_beta[i] += sum_g[i];
        }
    }
    grad.iter()
        .zip(&cache.normalized)
        .map(|(g, xh)| {
            let mut dx = Matrix::zeros(rows, cols);
            for i in 0..cells {
                dx.data[i] = gamma[i] * cache.inv_std[i] / b
                    * (b * g.data[i] - sum_g[i] - xh.data[i] * sum_gx[i]);
            }
            dx
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bn_params(rows: usize, cols: usize) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert(
            "bn.gamma",
            Tensor::from_vec(&[rows, cols], (0..rows * cols).map(|i| 0.5 + i as f64 * 0.1).collect()).unwrap(),
        );
        p.insert(
            "bn.beta",
            Tensor::from_vec(&[rows, cols], (0..rows * cols).map(|i| i as f64 * -0.2).collect()).unwrap(),
        );
        p
    }

    fn batch(seed: f64) -> Vec<Matrix> {
        (0..4)
            .map(|k| {
                Matrix::from_vec(2, 3, (0..6).map(|i| ((i * 7 + k * 3) as f64 * seed).sin()).collect())
                    .unwrap()
            })
            .collect()
    }

    #[test]
    fn batch_norm_output_has_gamma_std_and_beta_mean() {
        let p = bn_params(2, 3);
        let (y, _) = batch_norm_train(&p, &batch(0.37), None);
        for i in 0..6 {
            let mean: f64 = y.iter().map(|m| m.data[i]).sum::<f64>() / 4.0;
            assert!((mean - p.data("bn.beta")[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_norm_backward_matches_finite_differences() {
        let p = bn_params(2, 3);
        let x = batch(0.61);
        let up: Vec<Matrix> = batch(1.7);
        let loss = |x: &[Matrix]| -> f64 {
            let (y, _) = batch_norm_train(&p, x, None);
            y.iter().zip(&up).map(|(a, b)| a.data.iter().zip(&b.data).map(|(u, v)| u * v).sum::<f64>()).sum()
        };
        let (_, cache) = batch_norm_train(&p, &x, None);
        let mut grads = p.zeros_like();
        let gx = batch_norm_backward(&p, &cache, &up, &mut grads);
        let eps = 1e-6;
        for k in 0..x.len() {
            for i in 0..6 {
                let mut xp = x.clone();
                xp[k].data[i] += eps;
                let mut xm = x.clone();
                xm[k].data[i] -= eps;
                let fd = (loss(&xp) - loss(&xm)) / (2.0 * eps);
                assert!((fd - gx[k].data[i]).abs() < 1e-6, "fd {fd} vs {}", gx[k].data[i]);
            }
        }
    }
}
