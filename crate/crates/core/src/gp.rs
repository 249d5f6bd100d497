//! Exact Gaussian-process regression with an ARD squared-exponential kernel.
//!
//! Observations are standardized internally; all hyperparameters live in log
//! space (`ln l_t`, `ln sigma_f^2`, `ln sigma_n^2`). The covariance is
//! factorized once per state with a small jitter ladder for robustness
//! against near-duplicate inputs.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const JITTER_LADDER: [f64; 5] = [1e-10, 1e-9, 1e-8, 1e-7, 1e-6];

/// Box applied to log hyperparameters during fitting.
const LOG_LENGTHSCALE_RANGE: (f64, f64) = (-4.605_170_185_988_091, 6.907_755_278_982_137); // [1e-2, 1e3]
const LOG_SIGNAL_VAR_RANGE: (f64, f64) = (-9.210_340_371_976_182, 9.210_340_371_976_182); // [1e-4, 1e4]
const LOG_NOISE_VAR_RANGE: (f64, f64) = (-13.815_510_557_964_274, 2.302_585_092_994_046); // [1e-6, 10]

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelHyperparams {
    pub log_lengthscales: Vec<f64>,
    pub log_signal_var: f64,
    pub log_noise_var: f64,
}

impl KernelHyperparams {
    /// Unit lengthscales and signal, noise standard deviation 0.1.
    pub fn initial(dim: usize) -> Self {
        KernelHyperparams {
            log_lengthscales: vec![0.0; dim],
            log_signal_var: 0.0,
            log_noise_var: (0.1f64 * 0.1).ln(),
        }
    }

    pub fn dim(&self) -> usize {
        self.log_lengthscales.len()
    }

    pub fn signal_var(&self) -> f64 {
        self.log_signal_var.exp()
    }

    pub fn noise_var(&self) -> f64 {
        self.log_noise_var.exp()
    }

    pub fn lengthscales(&self) -> Vec<f64> {
        self.log_lengthscales.iter().map(|v| v.exp()).collect()
    }

    /// Flattened as `[ln l_0 .. ln l_{d-1}, ln sigma_f^2, ln sigma_n^2]`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.log_lengthscales.clone();
        v.push(self.log_signal_var);
        v.push(self.log_noise_var);
        v
    }

    pub fn from_vec(v: &[f64]) -> Self {
        let d = v.len() - 2;
        KernelHyperparams {
            log_lengthscales: v[..d].to_vec(),
            log_signal_var: v[d],
            log_noise_var: v[d + 1],
        }
    }

    fn clamp_to_fit_box(v: &mut [f64]) {
        let d = v.len() - 2;
        for x in &mut v[..d] {
            *x = x.clamp(LOG_LENGTHSCALE_RANGE.0, LOG_LENGTHSCALE_RANGE.1);
        }
        v[d] = v[d].clamp(LOG_SIGNAL_VAR_RANGE.0, LOG_SIGNAL_VAR_RANGE.1);
        v[d + 1] = v[d + 1].clamp(LOG_NOISE_VAR_RANGE.0, LOG_NOISE_VAR_RANGE.1);
    }

    fn inv_sq_lengthscales(&self) -> Vec<f64> {
        self.log_lengthscales.iter().map(|l| (-2.0 * l).exp()).collect()
    }
}

#[inline]
fn rbf(a: &[f64], b: &[f64], inv_sq: &[f64], signal_var: f64) -> f64 {
    let r2: f64 = a
        .iter()
        .zip(b)
        .zip(inv_sq)
        .map(|((x, y), w)| (x - y) * (x - y) * w)
        .sum();
    signal_var * (-0.5 * r2).exp()
}

/// `K_ij = sigma_f^2 exp(-1/2 sum_t (a_it - b_jt)^2 / l_t^2)`.
pub fn kernel_matrix(a: &[Vec<f64>], b: &[Vec<f64>], theta: &KernelHyperparams) -> Vec<Vec<f64>> {
    let inv_sq = theta.inv_sq_lengthscales();
    let sf2 = theta.signal_var();
    a.iter()
        .map(|ai| {
            assert_eq!(ai.len(), theta.dim(), "input dimension");
            b.iter().map(|bj| rbf(ai, bj, &inv_sq, sf2)).collect()
        })
        .collect()
}

/// In-place lower Cholesky factor of a row-major `n x n` matrix.
fn cholesky(a: &mut [f64], n: usize) -> bool {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if !(d > 0.0) || !d.is_finite() {
            return false;
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
        for k in j + 1..n {
            a[j * n + k] = 0.0;
        }
    }
    true
}

/// Solves `L x = b` in place.
fn forward_solve(l: &[f64], n: usize, b: &mut [f64]) {
    for i in 0..n {
        let row = &l[i * n..i * n + i];
        let s: f64 = row.iter().zip(&b[..i]).map(|(a, x)| a * x).sum();
        b[i] = (b[i] - s) / l[i * n + i];
    }
}

/// Solves `L^T x = b` in place.
fn backward_solve(l: &[f64], n: usize, b: &mut [f64]) {
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= l[k * n + i] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Posterior {
    pub mean: f64,
    pub variance: f64,
}

/// An immutable GP conditioned on its observations.
#[derive(Debug, Clone)]
pub struct GpState {
    x: Vec<Vec<f64>>,
    y_raw: Vec<f64>,
    y: Vec<f64>,
    theta: KernelHyperparams,
    chol: Vec<f64>,
    alpha: Vec<f64>,
    y_mean: f64,
    y_std: f64,
    jitter: f64,
    lml: f64,
}

/// Serializable view of a [`GpState`]; the factorization is rebuilt on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpSnapshot {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    pub theta: KernelHyperparams,
    pub y_mean: f64,
    pub y_std: f64,
}

fn standardization(y: &[f64]) -> (f64, f64) {
    if y.len() < 2 {
        return (0.0, 1.0);
    }
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std > 1e-12 * mean.abs().max(1.0) {
        (mean, std)
    } else {
        (mean, 1.0)
    }
}

impl GpState {
    pub fn new(x: Vec<Vec<f64>>, y: Vec<f64>, theta: KernelHyperparams) -> Result<Self> {
        if x.is_empty() || x.len() != y.len() {
            return Err(Error::Contract(format!(
                "need matching non-empty inputs, got {} points and {} values",
                x.len(),
                y.len()
            )));
        }
        let d = theta.dim();
        if x.iter().any(|p| p.len() != d || p.iter().any(|v| !v.is_finite())) {
            return Err(Error::Contract(format!("every input must be a finite {d}-vector")));
        }
        if y.iter().any(|v| !v.is_finite()) || theta.to_vec().iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("observations and hyperparameters must be finite".into()));
        }
        let (y_mean, y_std) = standardization(&y);
        let ys: Vec<f64> = y.iter().map(|v| (v - y_mean) / y_std).collect();
        Self::factorize(x, y, ys, theta, y_mean, y_std)
    }

    fn factorize(
        x: Vec<Vec<f64>>,
        y_raw: Vec<f64>,
        y: Vec<f64>,
        theta: KernelHyperparams,
        y_mean: f64,
        y_std: f64,
    ) -> Result<Self> {
        let n = x.len();
        let inv_sq = theta.inv_sq_lengthscales();
        let sf2 = theta.signal_var();
        let sn2 = theta.noise_var();
        let mut base = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let k = rbf(&x[i], &x[j], &inv_sq, sf2);
                base[i * n + j] = k;
                base[j * n + i] = k;
            }
            base[i * n + i] += sn2;
        }
        for &jitter in &JITTER_LADDER {
            let mut chol = base.clone();
            for i in 0..n {
                chol[i * n + i] += jitter;
            }
            if !cholesky(&mut chol, n) {
                continue;
            }
            let mut alpha = y.clone();
            forward_solve(&chol, n, &mut alpha);
            let fit: f64 = alpha.iter().map(|a| a * a).sum();
            backward_solve(&chol, n, &mut alpha);
            let log_det: f64 = (0..n).map(|i| chol[i * n + i].ln()).sum();
            let lml = -0.5 * fit - log_det - 0.5 * n as f64 * (2.0 * PI).ln();
            if !lml.is_finite() {
                continue;
            }
            return Ok(GpState {
                x,
                y_raw,
                y,
                theta,
                chol,
                alpha,
                y_mean,
                y_std,
                jitter,
                lml,
            });
        }
        Err(Error::Numerical(format!(
            "kernel matrix of {n} points is not positive definite even with jitter {}",
            JITTER_LADDER[JITTER_LADDER.len() - 1]
        )))
    }

    pub fn from_snapshot(s: &GpSnapshot) -> Result<Self> {
        GpState::new(s.x.clone(), s.y.clone(), s.theta.clone())
    }

    pub fn snapshot(&self) -> GpSnapshot {
        GpSnapshot {
            x: self.x.clone(),
            y: self.y_raw.clone(),
            theta: self.theta.clone(),
            y_mean: self.y_mean,
            y_std: self.y_std,
        }
    }

    pub fn n(&self) -> usize {
        self.x.len()
    }

    pub fn dim(&self) -> usize {
        self.theta.dim()
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.x
    }

    /// Observations in their original units.
    pub fn values(&self) -> &[f64] {
        &self.y_raw
    }

    pub fn theta(&self) -> &KernelHyperparams {
        &self.theta
    }

    pub fn standardization(&self) -> (f64, f64) {
        (self.y_mean, self.y_std)
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Row-major lower Cholesky factor of `K + (sigma_n^2 + jitter) I`.
    pub fn cholesky_factor(&self) -> &[f64] {
        &self.chol
    }

    /// Same data, different hyperparameters.
    pub fn with_theta(&self, theta: KernelHyperparams) -> Result<Self> {
        if theta.dim() != self.dim() {
            return Err(Error::Contract("hyperparameter dimension changed".into()));
        }
        Self::factorize(
            self.x.clone(),
            self.y_raw.clone(),
            self.y.clone(),
            theta,
            self.y_mean,
            self.y_std,
        )
    }

    /// `-1/2 y^T alpha - sum ln L_ii - n/2 ln 2 pi` on the standardized data.
    pub fn log_marginal_likelihood(&self) -> f64 {
        self.lml
    }

    /// Gradient of the log marginal likelihood in the flattened log-parameter
    /// order of [`KernelHyperparams::to_vec`].
    pub fn lml_gradient(&self) -> Vec<f64> {
        let n = self.n();
        let d = self.dim();
        // K^{-1} = L^{-T} L^{-1}, built column by column.
        let mut k_inv = vec![0.0; n * n];
        let mut col = vec![0.0; n];
        for j in 0..n {
            col.fill(0.0);
            col[j] = 1.0;
            forward_solve(&self.chol, n, &mut col);
            backward_solve(&self.chol, n, &mut col);
            for i in 0..n {
                k_inv[i * n + j] = col[i];
            }
        }
        let inv_sq = self.theta.inv_sq_lengthscales();
        let sf2 = self.theta.signal_var();
        let mut grad = vec![0.0; d + 2];
        let mut trace_w = 0.0;
        for i in 0..n {
            for j in 0..n {
                let w = self.alpha[i] * self.alpha[j] - k_inv[i * n + j];
                if i == j {
                    trace_w += w;
                }
                let k = rbf(&self.x[i], &self.x[j], &inv_sq, sf2);
                let wk = w * k;
                grad[d] += wk;
                for t in 0..d {
                    let diff = self.x[i][t] - self.x[j][t];
                    grad[t] += wk * diff * diff * inv_sq[t];
                }
            }
        }
        for g in &mut grad[..=d] {
            *g *= 0.5;
        }
        grad[d + 1] = 0.5 * self.theta.noise_var() * trace_w;
        grad
    }

    /// Adam ascent on the log marginal likelihood. Returns the final iterate,
    /// or the best one seen if the final iterate scores worse than the start.
    pub fn fit_hyperparameters(&self, iterations: usize, step: f64) -> Result<Self> {
        if iterations == 0 {
            return Ok(self.clone());
        }
        if self.n() < 2 {
            return Err(Error::Contract("hyperparameter fitting needs at least 2 points".into()));
        }
        let initial_lml = self.lml;
        let mut current = self.clone();
        let mut best = self.clone();
        let mut params = current.theta.to_vec();
        let mut m = vec![0.0; params.len()];
        let mut v = vec![0.0; params.len()];
        for t in 1..=iterations {
            let g = current.lml_gradient();
            if g.iter().any(|x| !x.is_finite()) {
                break;
            }
            let b1 = 1.0 - ADAM_BETA1.powi(t as i32);
            let b2 = 1.0 - ADAM_BETA2.powi(t as i32);
            for i in 0..params.len() {
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                params[i] += step * (m[i] / b1) / ((v[i] / b2).sqrt() + ADAM_EPS);
            }
            KernelHyperparams::clamp_to_fit_box(&mut params);
            match current.with_theta(KernelHyperparams::from_vec(&params)) {
                Ok(next) => current = next,
                Err(_) => break,
            }
            if current.lml > best.lml {
                best = current.clone();
            }
        }
        if current.lml >= initial_lml - 1e-6 {
            Ok(current)
        } else {
            Ok(best)
        }
    }

    fn cross_kernel(&self, x: &[f64], inv_sq: &[f64], sf2: f64, out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.x.iter().map(|xi| rbf(xi, x, inv_sq, sf2)));
    }

    /// Predictive mean and latent variance, both in original units, plus the
    /// unclamped standardized variance.
    fn predict(&self, x: &[f64], inv_sq: &[f64], sf2: f64, k: &mut Vec<f64>) -> (Posterior, f64) {
        assert_eq!(x.len(), self.dim(), "query dimension");
        self.cross_kernel(x, inv_sq, sf2, k);
        let mean_std: f64 = k.iter().zip(&self.alpha).map(|(a, b)| a * b).sum();
        forward_solve(&self.chol, self.n(), k);
        let raw_var = sf2 - k.iter().map(|v| v * v).sum::<f64>();
        (
            Posterior {
                mean: self.y_mean + self.y_std * mean_std,
                variance: raw_var.max(0.0) * self.y_std * self.y_std,
            },
            raw_var,
        )
    }

    pub fn posterior(&self, x: &[f64]) -> Posterior {
        let inv_sq = self.theta.inv_sq_lengthscales();
        let mut k = Vec::with_capacity(self.n());
        self.predict(x, &inv_sq, self.theta.signal_var(), &mut k).0
    }

    /// Batched [`GpState::posterior`]; the triangular solve runs over blocks
    /// of queries at once so the inner loop is a contiguous axpy.
    pub fn posterior_many(&self, xs: &[Vec<f64>]) -> Vec<Posterior> {
        const BLOCK: usize = 256;
        let n = self.n();
        let inv_sq = self.theta.inv_sq_lengthscales();
        let sf2 = self.theta.signal_var();
        let mut out = Vec::with_capacity(xs.len());
        let mut v = vec![0.0; n * BLOCK];
        for chunk in xs.chunks(BLOCK) {
            let m = chunk.len();
            for (i, xi) in self.x.iter().enumerate() {
                let row = &mut v[i * m..(i + 1) * m];
                for (r, q) in row.iter_mut().zip(chunk) {
                    assert_eq!(q.len(), xi.len(), "query dimension");
                    *r = rbf(xi, q, &inv_sq, sf2);
                }
            }
            let mut mean = vec![0.0; m];
            for i in 0..n {
                let a = self.alpha[i];
                for (mu, k) in mean.iter_mut().zip(&v[i * m..(i + 1) * m]) {
                    *mu += a * k;
                }
            }
            let mut sq = vec![0.0; m];
            for i in 0..n {
                let (done, rest) = v.split_at_mut(i * m);
                let row = &mut rest[..m];
                for k in 0..i {
                    let l = self.chol[i * n + k];
                    if l != 0.0 {
                        for (r, p) in row.iter_mut().zip(&done[k * m..(k + 1) * m]) {
                            *r -= l * p;
                        }
                    }
                }
                let d = 1.0 / self.chol[i * n + i];
                for (r, s) in row.iter_mut().zip(sq.iter_mut()) {
                    *r *= d;
                    *s += *r * *r;
                }
            }
            let var_scale = self.y_std * self.y_std;
            out.extend(mean.iter().zip(&sq).map(|(mu, s)| Posterior {
                mean: self.y_mean + self.y_std * mu,
                variance: (sf2 - s).max(0.0) * var_scale,
            }));
        }
        out
    }

    /// Appends one observation and refactorizes with the same hyperparameters.
    pub fn add_observation(&self, z: &[f64], value: f64) -> Result<Self> {
        let mut x = self.x.clone();
        x.push(z.to_vec());
        let mut y = self.y_raw.clone();
        y.push(value);
        GpState::new(x, y, self.theta.clone())
    }
}
