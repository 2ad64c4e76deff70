//! Second-stage updates: variational factor parameters `P_ig`, `Q_g`, the
//! sufficient statistics `W_g`, `β_g`, `Θ_g`, and the inner loop that
//! estimates `Λ_g` and `Ψ_g` under each constraint pattern.

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Error, Result};
use crate::linalg;
use crate::model::{sigma_from, ModelId};
use crate::stage1::{elbo_slices, Observation, Precision, EMPTY_COMPONENT};

/// Per-component sufficient statistics for the loading/variance updates.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Stats {
    /// Weighted scatter of `m_ig` about `μ_g`.
    pub w: Vec<DMatrix<f64>>,
    /// `β_g = Λ_gᵀ(Λ_gΛ_gᵀ + Ψ_g)⁻¹`, refreshed every inner sweep.
    pub beta: Vec<DMatrix<f64>>,
    /// `Θ_g = I − β_gΛ_g + β_g W_g β_gᵀ`, refreshed every inner sweep.
    pub theta: Vec<DMatrix<f64>>,
    /// Effective component sizes.
    pub n_g: Vec<f64>,
}

impl Stage2Stats {
    pub fn new(w: Vec<DMatrix<f64>>, n_g: Vec<f64>) -> Result<Self> {
        if w.len() != n_g.len() || w.is_empty() {
            return invalid("scatter matrices and component sizes disagree");
        }
        if let Some((g, &size)) = n_g.iter().enumerate().find(|(_, v)| !(**v >= EMPTY_COMPONENT)) {
            return Err(Error::EmptyComponent { component: g, size });
        }
        Ok(Self {
            w,
            beta: Vec::new(),
            theta: Vec::new(),
            n_g,
        })
    }

    pub fn g(&self) -> usize {
        self.w.len()
    }

    pub fn d(&self) -> usize {
        self.w[0].nrows()
    }
}

/// `W_g = Σ_i ẑ_ig (m_ig − μ_g)(m_ig − μ_g)ᵀ / n_g`.
pub fn compute_w(weights: &[f64], m_rows: &[&[f64]], mu: &DVector<f64>) -> Result<DMatrix<f64>> {
    let d = mu.len();
    let ng: f64 = weights.iter().sum();
    if !(ng >= EMPTY_COMPONENT) {
        return Err(Error::EmptyComponent {
            component: 0,
            size: ng,
        });
    }
    let mut w = DMatrix::zeros(d, d);
    let mut diff = vec![0.0; d];
    for (z, m) in weights.iter().zip(m_rows) {
        if *z == 0.0 {
            continue;
        }
        for j in 0..d {
            diff[j] = m[j] - mu[j];
        }
        for a in 0..d {
            let za = z * diff[a];
            for b in 0..=a {
                w[(a, b)] += za * diff[b];
            }
        }
    }
    for a in 0..d {
        for b in 0..a {
            w[(b, a)] = w[(a, b)];
        }
    }
    Ok(w / ng)
}

/// `Σ_i ẑ_ig S_ig / n_g` for row-major `d×d` slices.
pub fn weighted_mean_s(weights: &[f64], s_rows: &[&[f64]], d: usize) -> Result<DMatrix<f64>> {
    let ng: f64 = weights.iter().sum();
    if !(ng >= EMPTY_COMPONENT) {
        return Err(Error::EmptyComponent {
            component: 0,
            size: ng,
        });
    }
    let mut acc = vec![0.0; d * d];
    for (z, s) in weights.iter().zip(s_rows) {
        for (a, v) in acc.iter_mut().zip(s.iter()) {
            *a += z * v;
        }
    }
    Ok(DMatrix::from_column_slice(d, d, &acc) / ng)
}

fn check_psi(psi: &DVector<f64>) -> Result<()> {
    if psi.iter().any(|v| !(*v > 0.0)) {
        return invalid("error variances must be positive");
    }
    Ok(())
}

/// `Q = (I + ΛᵀΨ⁻¹Λ)⁻¹`.
pub fn update_q(lambda: &DMatrix<f64>, psi: &DVector<f64>) -> Result<DMatrix<f64>> {
    check_psi(psi)?;
    let k = lambda.ncols();
    let scaled = DMatrix::from_fn(lambda.nrows(), k, |j, c| lambda[(j, c)] / psi[j]);
    let inner = DMatrix::identity(k, k) + lambda.transpose() * scaled;
    linalg::spd_inverse(&inner, "I + ΛᵀΨ⁻¹Λ")
}

/// `β = Λᵀ(ΛΛᵀ + Ψ)⁻¹`, via the `d×d` inverse.
pub fn beta(lambda: &DMatrix<f64>, psi: &DVector<f64>) -> Result<DMatrix<f64>> {
    check_psi(psi)?;
    let sigma_inv = linalg::spd_inverse(&sigma_from(lambda, psi), "ΛΛᵀ + Ψ")?;
    Ok(lambda.transpose() * sigma_inv)
}

/// The second printed form of `Q`: `I − βΛ`.
pub fn update_q_via_beta(lambda: &DMatrix<f64>, psi: &DVector<f64>) -> Result<DMatrix<f64>> {
    let k = lambda.ncols();
    Ok(DMatrix::identity(k, k) - beta(lambda, psi)? * lambda)
}

/// `P = β(m − μ)`.
pub fn update_p(beta: &DMatrix<f64>, m: &DVector<f64>, mu: &DVector<f64>) -> DVector<f64> {
    beta * (m - mu)
}

/// Closed-form ELBO under the factorized approximation
/// `q(x, u) = N(m, S) · N(P, Q)`.
#[allow(clippy::too_many_arguments)]
pub fn elbo_stage2(
    y: &[f64],
    c: f64,
    m: &DVector<f64>,
    s: &DMatrix<f64>,
    mu: &DVector<f64>,
    lambda: &DMatrix<f64>,
    psi: &DVector<f64>,
    p: &DVector<f64>,
    q: &DMatrix<f64>,
) -> Result<f64> {
    check_psi(psi)?;
    let d = psi.len();
    if y.len() != d || m.len() != d || mu.len() != d || s.nrows() != d {
        return invalid("dimension mismatch in second-stage ELBO");
    }
    if !(c > 0.0) {
        return invalid("normalization constant must be positive");
    }
    let (_, q_log_det) = linalg::spd_inverse_log_det(q, "Q")?;
    // Poisson, entropy-of-S and constant terms are shared with the first
    // stage; evaluate them through it with Σ = I, μ = m so its Gaussian part
    // reduces to −tr(S)/2.
    let ident = Precision {
        d,
        inv: DMatrix::<f64>::identity(d, d).as_slice().to_vec(),
        log_det: 0.0,
    };
    let shared = elbo_slices(&Observation::new(y, c), &ident, m.as_slice(), m.as_slice(), s.as_slice())?
        + 0.5 * s.trace();

    let r = m - mu;
    let psi_inv = psi.map(|v| 1.0 / v);
    let lp = lambda * p;
    let lt_psi_l = lambda.transpose() * DMatrix::from_fn(d, lambda.ncols(), |j, c| lambda[(j, c)] * psi_inv[j]);
    let quad_r: f64 = (0..d).map(|j| r[j] * r[j] * psi_inv[j]).sum();
    let cross: f64 = (0..d).map(|j| r[j] * psi_inv[j] * lp[j]).sum();
    let quad_p = (p.transpose() * &lt_psi_l * p)[(0, 0)];
    let tr_lq = (&lt_psi_l * q).trace();
    let tr_psi_s: f64 = (0..d).map(|j| psi_inv[j] * s[(j, j)]).sum();
    let log_det_psi: f64 = psi.iter().map(|v| v.ln()).sum();
    let k = lambda.ncols() as f64;

    let value = shared - 0.5 * quad_r + cross - 0.5 * quad_p - 0.5 * tr_lq - 0.5 * tr_psi_s
        - 0.5 * log_det_psi
        - 0.5 * p.dot(p)
        + 0.5 * q_log_det
        - 0.5 * q.trace()
        + 0.5 * k;
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite("second-stage ELBO"))
    }
}

/// Leading-eigenvector initialization: `Λ` from the top-`k` eigenvectors of
/// `W` scaled by the square roots of their eigenvalues, `ψ` from the
/// remaining diagonal floored at 0.05.
pub fn eigen_init(w: &DMatrix<f64>, k: usize) -> (DMatrix<f64>, DVector<f64>) {
    let d = w.nrows();
    let (values, vectors) = linalg::sorted_symmetric_eigen(w);
    let lambda = DMatrix::from_fn(d, k, |j, c| vectors[(j, c)] * values[c].max(0.0).sqrt());
    let psi = DVector::from_fn(d, |j, _| {
        let explained: f64 = (0..k).map(|c| lambda[(j, c)].powi(2)).sum();
        (w[(j, j)] - explained).max(0.05)
    });
    (lambda, psi)
}

/// Initial `Λ_g`, `ψ_g` honouring the constraint pattern: shared loadings
/// come from the pooled scatter, shared variances are pooled by `n_g / n`,
/// isotropic variances are averaged.
pub fn constrained_init(
    model_id: ModelId,
    w: &[DMatrix<f64>],
    n_g: &[f64],
    k: usize,
) -> (Vec<DMatrix<f64>>, Vec<DVector<f64>>) {
    let g = w.len();
    let total: f64 = n_g.iter().sum();
    let pooled_w = w
        .iter()
        .zip(n_g)
        .fold(DMatrix::zeros(w[0].nrows(), w[0].ncols()), |acc, (wg, ng)| acc + wg * (ng / total));
    let (mut lambdas, mut psis): (Vec<_>, Vec<_>) = w.iter().map(|wg| eigen_init(wg, k)).unzip();
    if model_id.lambda_constrained {
        let (shared, _) = eigen_init(&pooled_w, k);
        lambdas = vec![shared; g];
    }
    if model_id.psi_constrained {
        let pooled = psis
            .iter()
            .zip(n_g)
            .fold(DVector::zeros(psis[0].len()), |acc, (p, ng)| acc + p * (ng / total));
        psis = vec![pooled; g];
    }
    if model_id.psi_isotropic {
        for p in psis.iter_mut() {
            let mean = p.mean();
            p.fill(mean);
        }
    }
    (lambdas, psis)
}

/// Tolerances of the loading/variance inner loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InnerOptions {
    /// Frobenius-norm change of both `Λ` and `Ψ` that ends the loop.
    pub tol: f64,
    pub max_sweeps: usize,
    /// Lower clamp on every error variance.
    pub psi_floor: f64,
}

impl Default for InnerOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_sweeps: 500,
            psi_floor: 1e-6,
        }
    }
}

/// Result of [`update_lambda_psi`].
#[derive(Debug, Clone, PartialEq)]
pub struct LoadingFit {
    pub lambda: Vec<DMatrix<f64>>,
    pub psi: Vec<DVector<f64>>,
    pub sweeps: usize,
    pub converged: bool,
    /// Error variances raised to the floor during the final sweep.
    pub psi_clamped: usize,
}

/// Raw variances at or below this are reported as degenerate.
const DEGENERATE_PSI: f64 = 1e-12;

/// One inner sweep in the order `β`, `Θ`, `Λ`, `Ψ`. Returns the number of
/// variances raised to the floor.
pub fn inner_sweep(
    model_id: ModelId,
    stats: &mut Stage2Stats,
    s_bar: &[DVector<f64>],
    lambda: &mut [DMatrix<f64>],
    psi: &mut [DVector<f64>],
    psi_floor: f64,
) -> Result<usize> {
    let gs = stats.g();
    let d = stats.d();
    let k = lambda[0].ncols();

    stats.beta.clear();
    stats.theta.clear();
    for g in 0..gs {
        let b = beta(&lambda[g], &psi[g])?;
        let bw = &b * &stats.w[g];
        let theta = DMatrix::identity(k, k) - &b * &lambda[g] + &bw * b.transpose();
        stats.beta.push(b);
        stats.theta.push(theta);
    }

    if model_id.lambda_constrained {
        // row-by-row solve for the shared loading matrix
        let mut r = DMatrix::<f64>::zeros(d, k);
        for g in 0..gs {
            let wbt = &stats.w[g] * stats.beta[g].transpose();
            for j in 0..d {
                let scale = stats.n_g[g] / psi[g][j];
                for c in 0..k {
                    r[(j, c)] += scale * wbt[(j, c)];
                }
            }
        }
        let mut shared = DMatrix::zeros(d, k);
        for j in 0..d {
            let mut m = DMatrix::zeros(k, k);
            for g in 0..gs {
                m += &stats.theta[g] * (stats.n_g[g] / psi[g][j]);
            }
            let m_inv = linalg::spd_inverse(&m, "Σ_g n_g Θ_g / ψ_gj")?;
            let row = r.row(j) * m_inv;
            shared.set_row(j, &row);
        }
        for l in lambda.iter_mut() {
            l.copy_from(&shared);
        }
    } else {
        for g in 0..gs {
            let theta_inv = linalg::spd_inverse(&stats.theta[g], "Θ")?;
            lambda[g] = &stats.w[g] * stats.beta[g].transpose() * theta_inv;
        }
    }

    // diagonal targets for Ψ_g
    let targets: Vec<DVector<f64>> = (0..gs)
        .map(|g| {
            let l = &lambda[g];
            let bw = &stats.beta[g] * &stats.w[g];
            DVector::from_fn(d, |j, _| {
                let lbw: f64 = (0..k).map(|c| l[(j, c)] * bw[(c, j)]).sum();
                let base = stats.w[g][(j, j)] + s_bar[g][j];
                if model_id.lambda_constrained {
                    // the shared Λ is not W β_gᵀ Θ_g⁻¹, so keep the unsimplified form
                    let lt = l.row(j) * &stats.theta[g];
                    let ltl: f64 = (0..k).map(|c| lt[c] * l[(j, c)]).sum();
                    base - 2.0 * lbw + ltl
                } else {
                    base - lbw
                }
            })
        })
        .collect();

    let new_psi: Vec<DVector<f64>> = if model_id.psi_constrained {
        let total: f64 = stats.n_g.iter().sum();
        let pooled = targets
            .iter()
            .zip(&stats.n_g)
            .fold(DVector::zeros(d), |acc, (t, ng)| acc + t * (ng / total));
        vec![pooled; gs]
    } else {
        targets
    };

    let mut clamps = 0;
    for (g, mut p) in new_psi.into_iter().enumerate() {
        if model_id.psi_isotropic {
            let mean = p.mean();
            p.fill(mean);
        }
        for v in p.iter_mut() {
            if !v.is_finite() || *v <= DEGENERATE_PSI {
                return Err(Error::DegenerateVariance {
                    component: g,
                    value: *v,
                });
            }
            if *v < psi_floor {
                *v = psi_floor;
                clamps += 1;
            }
        }
        psi[g] = p;
    }
    Ok(clamps)
}

/// Estimate `Λ_g` and `Ψ_g` for `model_id`, iterating [`inner_sweep`] from
/// the given starting values until both change by less than `opts.tol` in
/// Frobenius norm. `s_bar[g]` is the `ẑ`-weighted mean of `diag(S_ig)`.
pub fn update_lambda_psi(
    model_id: ModelId,
    stats: &mut Stage2Stats,
    s_bar: &[DVector<f64>],
    init_lambda: &[DMatrix<f64>],
    init_psi: &[DVector<f64>],
    opts: InnerOptions,
) -> Result<LoadingFit> {
    let gs = stats.g();
    let d = stats.d();
    if init_lambda.len() != gs || init_psi.len() != gs || s_bar.len() != gs {
        return invalid("one initial Λ, Ψ and S̄ per component required");
    }
    let k = init_lambda[0].ncols();
    if k == 0 || k > d {
        return invalid(format!("number of factors K = {k} must satisfy 1 ≤ K ≤ d = {d}"));
    }
    let mut lambda = init_lambda.to_vec();
    let mut psi = init_psi.to_vec();
    let mut clamps = 0;
    for sweep in 1..=opts.max_sweeps {
        let prev_lambda = lambda.clone();
        let prev_psi = psi.clone();
        clamps = inner_sweep(model_id, stats, s_bar, &mut lambda, &mut psi, opts.psi_floor)?;
        let dl = (0..gs)
            .map(|g| (&lambda[g] - &prev_lambda[g]).norm())
            .fold(0.0, f64::max);
        let dp = (0..gs)
            .map(|g| (&psi[g] - &prev_psi[g]).norm())
            .fold(0.0, f64::max);
        if dl < opts.tol && dp < opts.tol {
            return Ok(LoadingFit {
                lambda,
                psi,
                sweeps: sweep,
                converged: true,
                psi_clamped: clamps,
            });
        }
    }
    Ok(LoadingFit {
        lambda,
        psi,
        sweeps: opts.max_sweeps,
        converged: false,
        psi_clamped: clamps,
    })
}

/// Aggregated second-stage ELBO as a function of `(Λ, Ψ)` with `P`, `Q` at
/// their optimum, dropping terms that do not involve `Λ` or `Ψ`:
/// `−½ Σ_g n_g [tr(Σ_g⁻¹W_g) + log|Σ_g| + Σ_j s̄_gj / ψ_gj]`.
pub fn stage2_objective(
    stats: &Stage2Stats,
    s_bar: &[DVector<f64>],
    lambda: &[DMatrix<f64>],
    psi: &[DVector<f64>],
) -> Result<f64> {
    let mut total = 0.0;
    for g in 0..stats.g() {
        let (inv, log_det) = linalg::spd_inverse_log_det(&sigma_from(&lambda[g], &psi[g]), "Σ")?;
        let tr = (inv * &stats.w[g]).trace();
        let extra: f64 = s_bar[g].iter().zip(psi[g].iter()).map(|(s, p)| s / p).sum();
        total -= 0.5 * stats.n_g[g] * (tr + log_det + extra);
    }
    Ok(total)
}

/// The `Σ`-dependent part of the aggregated first-stage ELBO,
/// `−½ Σ_g n_g [tr(Σ_g⁻¹ V_g) + log|Σ_g|]` with `V_g = W_g + S̄_g`.
pub fn stage1_sigma_objective(n_g: &[f64], v: &[DMatrix<f64>], sigmas: &[DMatrix<f64>]) -> Result<f64> {
    let mut total = 0.0;
    for g in 0..n_g.len() {
        let (inv, log_det) = linalg::spd_inverse_log_det(&sigmas[g], "Σ")?;
        total -= 0.5 * n_g[g] * ((inv * &v[g]).trace() + log_det);
    }
    Ok(total)
}

/// Printed isotropic variance `(1/d) tr(W − ΛβW + S̄)`.
pub fn isotropic_psi(w: &DMatrix<f64>, lambda_beta_w: &DMatrix<f64>, s_bar: &DMatrix<f64>) -> f64 {
    (w - lambda_beta_w + s_bar).trace() / w.nrows() as f64
}
