//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

use mplnfa::ModelId;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use mplnfa::stage1::{elbo_stage1, update_m, update_s};
use rand_distr::{Distribution, Poisson, StandardNormal};
use statrs::function::gamma::ln_gamma;

/// Gauss–Hermite nodes and weights for `∫ f(t) e^{−t²} dt` (Golub–Welsch).
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut jacobi = DMatrix::zeros(n, n);
    for k in 1..n {
        let b = (k as f64 / 2.0).sqrt();
        jacobi[(k - 1, k)] = b;
        jacobi[(k, k - 1)] = b;
    }
    let eig = SymmetricEigen::new(jacobi);
    let pi_sqrt = std::f64::consts::PI.sqrt();
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| (eig.eigenvalues[i], pi_sqrt * eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

fn log_joint(y: &[f64], log_c: f64, x: &DVector<f64>, mu: &DVector<f64>, prec: &DMatrix<f64>, log_det: f64) -> f64 {
    let d = y.len();
    let r = x - mu;
    let mut v = -0.5 * r.dot(&(prec * &r)) - 0.5 * log_det - 0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln();
    for j in 0..d {
        let eta = x[j] + log_c;
        v += y[j] * eta - eta.exp() - ln_gamma(y[j] + 1.0);
    }
    v
}

/// Mode of the log joint in `x` and the covariance `(−H)⁻¹` there.
fn laplace(y: &[f64], log_c: f64, mu: &DVector<f64>, prec: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let d = y.len();
    let mut x = DVector::from_fn(d, |j, _| (y[j] + 0.5).ln() - log_c);
    x = (&x + mu) * 0.5;
    for _ in 0..200 {
        let rate = DVector::from_fn(d, |j, _| (x[j] + log_c).exp());
        let grad = DVector::from_fn(d, |j, _| y[j] - rate[j]) - prec * (&x - mu);
        let neg_h = prec + DMatrix::from_diagonal(&rate);
        let step = neg_h.clone().cholesky().unwrap().solve(&grad);
        let mut t = 1.0;
        let base = log_joint(y, log_c, &x, mu, prec, 0.0);
        while log_joint(y, log_c, &(&x + &step * t), mu, prec, 0.0) < base && t > 1e-8 {
            t *= 0.5;
        }
        x += &step * t;
        if step.amax() * t < 1e-12 {
            break;
        }
    }
    let rate = DVector::from_fn(d, |j, _| (x[j] + log_c).exp());
    let cov = (prec + DMatrix::from_diagonal(&rate)).try_inverse().unwrap();
    (x, cov)
}

/// `log ∫ Π Poisson(y_j | e^{x_j} C) N(x; μ, Σ) dx` for `d = 2` by
/// mode-centred, Hessian-scaled Gauss–Hermite quadrature on `nodes²` points.
pub fn log_marginal_quadrature_2d(y: &[f64], c: f64, mu: &DVector<f64>, sigma: &DMatrix<f64>, nodes: usize) -> f64 {
    assert_eq!(y.len(), 2);
    let log_c = c.ln();
    let prec = sigma.clone().try_inverse().unwrap();
    let log_det = sigma.determinant().ln();
    let (mode, cov) = laplace(y, log_c, mu, &prec);
    let l = cov.clone().cholesky().unwrap().l();
    let (t, w) = gauss_hermite(nodes);
    let sqrt2 = 2f64.sqrt();
    let mut terms = Vec::with_capacity(nodes * nodes);
    for a in 0..nodes {
        for b in 0..nodes {
            let z = DVector::from_vec(vec![sqrt2 * t[a], sqrt2 * t[b]]);
            let x = &mode + &l * &z;
            let lw = (w[a] * w[b]).ln() + t[a] * t[a] + t[b] * t[b];
            terms.push(lw + log_joint(y, log_c, &x, mu, &prec, log_det));
        }
    }
    let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = terms.iter().map(|v| (v - max).exp()).sum();
    // dx = |L| · 2 dz_a dz_b after the √2 substitution
    max + sum.ln() + l.determinant().ln() + 2f64.ln()
}

/// Importance-sampling estimate of the log marginal with a widened Laplace
/// proposal; returns `(estimate, standard error of the log estimate)`.
pub fn log_marginal_is<R: Rng>(y: &[f64], c: f64, mu: &DVector<f64>, sigma: &DMatrix<f64>, samples: usize, rng: &mut R) -> (f64, f64) {
    let d = y.len();
    let log_c = c.ln();
    let prec = sigma.clone().try_inverse().unwrap();
    let log_det = sigma.determinant().ln();
    let (mode, cov) = laplace(y, log_c, mu, &prec);
    let cov = cov * 1.5;
    let l = cov.clone().cholesky().unwrap().l();
    let q_prec = cov.clone().try_inverse().unwrap();
    let q_log_det = cov.determinant().ln();
    let logw: Vec<f64> = (0..samples)
        .map(|_| {
            let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let x = &mode + &l * &z;
            let log_q = log_joint(&vec![0.0; d], 0.0, &x, &mode, &q_prec, q_log_det)
                + (0..d).map(|j| (x[j]).exp()).sum::<f64>();
            log_joint(y, log_c, &x, mu, &prec, log_det) - log_q
        })
        .collect();
    let max = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logw.iter().map(|v| (v - max).exp()).collect();
    let mean = w.iter().sum::<f64>() / samples as f64;
    let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (samples as f64 - 1.0);
    let se = (var / samples as f64).sqrt() / mean;
    (max + mean.ln(), se)
}

pub fn random_spd<R: Rng>(d: usize, rng: &mut R) -> DMatrix<f64> {
    let a = DMatrix::from_fn(d, d, |_, _| rng.gen_range(-0.7..0.7));
    &a * a.transpose() + DMatrix::identity(d, d) * rng.gen_range(0.1..0.5)
}

pub fn random_loading<R: Rng>(d: usize, k: usize, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(d, k, |_, _| rng.gen_range(-1.0..1.0))
}

pub fn random_psi<R: Rng>(d: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(d, |_, _| rng.gen_range(0.2..1.2))
}

pub fn random_vec<R: Rng>(d: usize, lo: f64, hi: f64, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(d, |_, _| rng.gen_range(lo..hi))
}

/// Counts drawn from the Poisson-log-normal at `(μ, Σ)`.
pub fn draw_counts<R: Rng>(mu: &DVector<f64>, sigma: &DMatrix<f64>, c: f64, rng: &mut R) -> Vec<f64> {
    let d = mu.len();
    let l = sigma.clone().cholesky().unwrap().l();
    let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let x = mu + l * z;
    (0..d)
        .map(|j| Poisson::new((x[j].exp() * c).max(1e-12)).unwrap().sample(rng).round())
        .collect()
}

/// Pair-counting adjusted Rand index over all `n(n−1)/2` pairs.
pub fn ari_brute(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len();
    let (mut both, mut same_a, mut same_b, mut total) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..n {
        for j in i + 1..n {
            let sa = a[i] == a[j];
            let sb = b[i] == b[j];
            total += 1.0;
            both += (sa && sb) as u8 as f64;
            same_a += sa as u8 as f64;
            same_b += sb as u8 as f64;
        }
    }
    let expected = same_a * same_b / total;
    let max = 0.5 * (same_a + same_b);
    if max == expected {
        return if both == max { 1.0 } else { 0.0 };
    }
    (both - expected) / (max - expected)
}

/// Covariance parameter count transcribed from the model table.
pub fn table_count(m: ModelId, d: usize, k: usize, g: usize) -> usize {
    let loading = d * k - k * (k - 1) / 2;
    let lam = if m.lambda_constrained { loading } else { g * loading };
    let psi = match (m.psi_constrained, m.psi_isotropic) {
        (false, false) => g * d,
        (false, true) => g,
        (true, false) => d,
        (true, true) => 1,
    };
    lam + psi
}

/// Central finite-difference gradient.
pub fn fd_gradient(f: impl Fn(&DVector<f64>) -> f64, x: &DVector<f64>, h: f64) -> DVector<f64> {
    DVector::from_fn(x.len(), |j, _| {
        let mut up = x.clone();
        let mut down = x.clone();
        up[j] += h;
        down[j] -= h;
        (f(&up) - f(&down)) / (2.0 * h)
    })
}

/// Gaussian log-likelihood (up to the `2π` constant) of scatter `w` from
/// `n` observations under covariance `sigma`.
pub fn gaussian_loglik(w: &DMatrix<f64>, n: f64, sigma: &DMatrix<f64>) -> f64 {
    let inv = sigma.clone().try_inverse().unwrap();
    -0.5 * n * ((inv * w).trace() + sigma.determinant().ln())
}

/// Random true mixture honouring the constraint pattern of `model`, with
/// component means spread apart so clusters are distinguishable.
pub fn random_truth<R: Rng>(model: ModelId, g: usize, d: usize, k: usize, rng: &mut R) -> mplnfa::MixtureModel {
    let shared_l = random_loading(d, k, rng) * 0.5;
    let shared_p = random_psi(d, rng) * 0.4;
    let iso = rng.gen_range(0.1..0.4);
    let raw: Vec<f64> = (0..g).map(|_| rng.gen_range(0.5..1.5)).collect();
    let total: f64 = raw.iter().sum();
    let mut comps = Vec::new();
    for gi in 0..g {
        let lambda = if model.lambda_constrained { shared_l.clone() } else { random_loading(d, k, rng) * 0.5 };
        let base = if model.psi_constrained { shared_p.clone() } else { random_psi(d, rng) * 0.4 };
        let psi = match (model.psi_constrained, model.psi_isotropic) {
            (true, true) => DVector::from_element(d, iso),
            (false, true) => DVector::from_element(d, rng.gen_range(0.1..0.4)),
            _ => base,
        };
        let mu = DVector::from_fn(d, |j, _| 1.5 + 2.0 * ((gi + j) % g.max(1)) as f64 / g.max(1) as f64 * 1.5 + rng.gen_range(-0.3..0.3));
        comps.push(mplnfa::ComponentParams::new(raw[gi] / total, mu, lambda, psi).unwrap());
    }
    let sum: f64 = comps.iter().map(|c| c.pi).sum();
    for c in comps.iter_mut() {
        c.pi /= sum;
    }
    mplnfa::MixtureModel::new(model, comps).unwrap()
}

/// Runs the S/m updates until the bound stops moving.
pub fn optimise_q(y: &[f64], c: f64, mu: &DVector<f64>, sigma: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let d = y.len();
    let mut m = DVector::from_fn(d, |j, _| (y[j] + 1.0).ln() - c.ln());
    let mut s = DMatrix::identity(d, d) * 0.1;
    let mut f = elbo_stage1(y, c, &m, &s, mu, sigma).unwrap();
    for _ in 0..500 {
        let s_new = update_s(sigma, c, &m, &s).unwrap();
        let s_ok = elbo_stage1(y, c, &m, &s_new, mu, sigma).unwrap();
        if s_ok >= f {
            s = s_new;
            f = s_ok;
        }
        let m_new = update_m(y, c, sigma, mu, &m, &s).unwrap();
        let m_ok = elbo_stage1(y, c, &m_new, &s, mu, sigma).unwrap();
        if m_ok >= f {
            m = m_new;
            f = m_ok;
        }
    }
    (m, s)
}

/// Biased sample covariance of `n` centred Gaussian draws.
pub fn scatter<R: Rng>(sigma: &DMatrix<f64>, n: usize, rng: &mut R) -> DMatrix<f64> {
    let d = sigma.nrows();
    let l = sigma.clone().cholesky().unwrap().l();
    let xs: Vec<DVector<f64>> = (0..n)
        .map(|_| &l * DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal)))
        .collect();
    let mean = xs.iter().fold(DVector::zeros(d), |a, x| a + x) / n as f64;
    xs.iter().fold(DMatrix::zeros(d, d), |a, x| a + (x - &mean) * (x - &mean).transpose()) / n as f64
}
