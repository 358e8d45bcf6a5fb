//! Gaussian mixture pose prior and its EM fit.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::container::Container;
use crate::error::{Error, Result};

const REG_COVAR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct Gmm {
    weights: Vec<f64>,
    means: Vec<DVector<f64>>,
    covs: Vec<DMatrix<f64>>,
    chol: Vec<Cholesky<f64, Dyn>>,
    /// `-log w_j + d/2 log 2π + 1/2 log|Σ_j|`.
    log_norm: Vec<f64>,
}

impl PartialEq for Gmm {
    fn eq(&self, other: &Self) -> bool {
        self.weights == other.weights && self.means == other.means && self.covs == other.covs
    }
}

impl Gmm {
    pub fn new(weights: Vec<f64>, means: Vec<DVector<f64>>, covs: Vec<DMatrix<f64>>) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.len() != k || covs.len() != k {
            return Err(Error::BadPrior("component counts differ or are zero".into()));
        }
        if weights.iter().any(|w| !(*w > 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::BadPrior("weights must be positive and sum to one".into()));
        }
        let d = means[0].len();
        let mut chol = Vec::with_capacity(k);
        let mut log_norm = Vec::with_capacity(k);
        for j in 0..k {
            if means[j].len() != d || covs[j].shape() != (d, d) {
                return Err(Error::BadPrior(format!("component {j} has inconsistent dimensions")));
            }
            let c = Cholesky::new(covs[j].clone())
                .ok_or_else(|| Error::BadPrior(format!("covariance {j} is not positive definite")))?;
            let log_det: f64 = c.l_dirty().diagonal().iter().map(|x| 2.0 * x.ln()).sum();
            log_norm.push(-weights[j].ln() + 0.5 * d as f64 * (2.0 * PI).ln() + 0.5 * log_det);
            chol.push(c);
        }
        Ok(Self { weights, means, covs, chol, log_norm })
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn num_components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[DVector<f64>] {
        &self.means
    }

    pub fn covariances(&self) -> &[DMatrix<f64>] {
        &self.covs
    }

    /// `L_j⁻¹ (x - μ_j)` with `Σ_j = L_j L_jᵀ`.
    pub fn whiten(&self, j: usize, x: &[f64]) -> DVector<f64> {
        let mut d = DVector::from_column_slice(x) - &self.means[j];
        self.chol[j].l_dirty().solve_lower_triangular_mut(&mut d);
        d
    }

    /// `L_j⁻¹` as a dense lower-triangular matrix.
    pub fn whitening_matrix(&self, j: usize) -> DMatrix<f64> {
        let l = self.chol[j].l();
        l.solve_lower_triangular(&DMatrix::identity(self.dim(), self.dim())).expect("non-singular factor")
    }

    /// Constant part of the component's negative log density.
    pub fn log_norm(&self, j: usize) -> f64 {
        self.log_norm[j]
    }

    /// `-log(w_j N(x; μ_j, Σ_j))`.
    pub fn component_nll(&self, j: usize, x: &[f64]) -> f64 {
        0.5 * self.whiten(j, x).norm_squared() + self.log_norm[j]
    }

    /// Minimum over components and the index attaining it.
    pub fn nll(&self, x: &[f64]) -> (f64, usize) {
        (0..self.num_components())
            .map(|j| (self.component_nll(j, x), j))
            .fold((f64::INFINITY, 0), |a, b| if b.0 < a.0 { b } else { a })
    }

    /// Log of the full mixture density.
    pub fn log_likelihood(&self, x: &[f64]) -> f64 {
        let lp: Vec<f64> = (0..self.num_components()).map(|j| -self.component_nll(j, x)).collect();
        log_sum_exp(&lp)
    }

    pub fn to_container(&self, c: &mut Container, prefix: &str) {
        let (k, d) = (self.num_components(), self.dim());
        c.push(format!("{prefix}weights"), &[k], self.weights.clone());
        c.push(format!("{prefix}means"), &[k, d], self.means.iter().flat_map(|m| m.iter().copied()).collect());
        c.push(
            format!("{prefix}covs"),
            &[k, d, d],
            self.covs.iter().flat_map(|m| m.transpose().as_slice().to_vec()).collect(),
        );
    }

    pub fn from_container(c: &Container, prefix: &str) -> Result<Self> {
        let w = c.get(&format!("{prefix}weights"))?.data.clone();
        let k = w.len();
        let means = c.get(&format!("{prefix}means"))?;
        let covs = c.get(&format!("{prefix}covs"))?;
        if means.dims.len() != 2 || means.dims[0] != k || covs.dims.len() != 3 || covs.dims[0] != k {
            return Err(Error::Format("gmm arrays have inconsistent shapes".into()));
        }
        let d = means.dims[1];
        let m = means.data.chunks_exact(d).map(DVector::from_column_slice).collect();
        let s = covs.data.chunks_exact(d * d).map(|x| DMatrix::from_row_slice(d, d, x)).collect();
        Gmm::new(w, m, s).map_err(|e| Error::Format(e.to_string()))
    }
}

fn log_sum_exp(x: &[f64]) -> f64 {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

#[derive(Clone, Debug)]
pub struct GmmFit {
    pub gmm: Gmm,
    /// Mean log-likelihood per sample, one entry per EM iteration.
    pub log_likelihood: Vec<f64>,
}

/// EM with k-means++ seeding and a few Lloyd iterations; a small ridge is
/// added to every covariance.
pub fn fit_gmm_em(samples: &[Vec<f64>], k: usize, seed: u64, max_iters: usize) -> Result<GmmFit> {
    let n = samples.len();
    if k == 0 || n < k {
        return Err(Error::BadConfig(format!("cannot fit {k} components to {n} samples")));
    }
    let d = samples[0].len();
    if d == 0 || samples.iter().any(|s| s.len() != d) {
        return Err(Error::BadConfig("samples must share a positive dimension".into()));
    }
    let xs: Vec<DVector<f64>> = samples.iter().map(|s| DVector::from_column_slice(s)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centers: Vec<DVector<f64>> = vec![xs[rng.gen_range(0..n)].clone()];
    let mut dist: Vec<f64> = xs.iter().map(|x| (x - &centers[0]).norm_squared()).collect();
    while centers.len() < k {
        let total: f64 = dist.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.gen_range(0.0..total);
            let mut pick = n - 1;
            for (i, &di) in dist.iter().enumerate() {
                if u < di {
                    pick = i;
                    break;
                }
                u -= di;
            }
            pick
        } else {
            rng.gen_range(0..n)
        };
        centers.push(xs[next].clone());
        for (i, x) in xs.iter().enumerate() {
            dist[i] = dist[i].min((x - &centers[centers.len() - 1]).norm_squared());
        }
    }
    let mut assign = vec![0usize; n];
    for _ in 0..10 {
        for (i, x) in xs.iter().enumerate() {
            assign[i] = (0..k)
                .map(|j| ((x - &centers[j]).norm_squared(), j))
                .fold((f64::INFINITY, 0), |a, b| if b.0 < a.0 { b } else { a })
                .1;
        }
        for (j, c) in centers.iter_mut().enumerate() {
            let members: Vec<&DVector<f64>> = xs.iter().zip(&assign).filter(|(_, a)| **a == j).map(|(x, _)| x).collect();
            if !members.is_empty() {
                *c = members.iter().fold(DVector::zeros(d), |acc, x| acc + *x) / members.len() as f64;
            }
        }
    }
    let mut resp = DMatrix::zeros(n, k);
    for (i, &a) in assign.iter().enumerate() {
        resp[(i, a)] = 1.0;
    }
    let mut gmm = m_step(&xs, &resp)?;
    let mut history = Vec::new();
    for _ in 0..max_iters {
        let mut ll = 0.0;
        for (i, x) in xs.iter().enumerate() {
            let lp: Vec<f64> = (0..k).map(|j| -gmm.component_nll(j, x.as_slice())).collect();
            let lse = log_sum_exp(&lp);
            ll += lse;
            for j in 0..k {
                resp[(i, j)] = (lp[j] - lse).exp();
            }
        }
        let ll = ll / n as f64;
        let converged = history.last().is_some_and(|prev: &f64| (ll - prev).abs() <= 1e-10 * ll.abs().max(1.0));
        history.push(ll);
        if converged {
            break;
        }
        gmm = m_step(&xs, &resp)?;
    }
    Ok(GmmFit { gmm, log_likelihood: history })
}

fn m_step(xs: &[DVector<f64>], resp: &DMatrix<f64>) -> Result<Gmm> {
    let (n, k) = resp.shape();
    let d = xs[0].len();
    let mut weights = Vec::with_capacity(k);
    let mut means = Vec::with_capacity(k);
    let mut covs = Vec::with_capacity(k);
    for j in 0..k {
        let nk: f64 = resp.column(j).sum() + 10.0 * f64::EPSILON;
        let mean = xs.iter().enumerate().fold(DVector::zeros(d), |acc, (i, x)| acc + x * resp[(i, j)]) / nk;
        let mut cov = DMatrix::zeros(d, d);
        for (i, x) in xs.iter().enumerate() {
            let r = resp[(i, j)];
            if r > 0.0 {
                let c = x - &mean;
                cov.syger(r, &c, &c, 1.0);
            }
        }
        cov /= nk;
        cov.fill_upper_triangle_with_lower_triangle();
        for a in 0..d {
            cov[(a, a)] += REG_COVAR;
        }
        weights.push(nk / n as f64);
        means.push(mean);
        covs.push(cov);
    }
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    Gmm::new(weights, means, covs)
}
