//! First-stage variational updates: per-observation ELBO, the fixed-point
//! update of `S_ig`, the Newton update of `m_ig`, responsibilities and the
//! `π`/`μ` updates. `Σ_g` is treated as given.

use nalgebra::{DMatrix, DVector};
use statrs::function::gamma::ln_gamma;

use crate::error::{invalid, Error, Result};
use crate::linalg;

/// Largest exponent fed to `exp` for Poisson rates.
pub const EXP_CLAMP: f64 = 700.0;

/// Gradient norm below which the Newton step is skipped.
const GRAD_TOL: f64 = 1e-12;

/// Halvings tried before a step is rejected.
const MAX_HALVINGS: usize = 10;

#[inline]
fn clamped_exp(x: f64, clamps: &mut usize) -> f64 {
    if x > EXP_CLAMP {
        *clamps += 1;
        EXP_CLAMP.exp()
    } else {
        x.exp()
    }
}

/// `Σ_j log(y_j!)`.
pub fn log_factorial_sum(y: &[f64]) -> f64 {
    y.iter().map(|&v| ln_gamma(v + 1.0)).sum()
}

/// One observation with its dataset-constant terms cached.
#[derive(Debug, Clone, Copy)]
pub struct Observation<'a> {
    pub y: &'a [f64],
    pub log_c: f64,
    /// `log C_i · Σ_j y_ij − Σ_j log(y_ij!)`
    pub constant: f64,
}

impl<'a> Observation<'a> {
    pub fn new(y: &'a [f64], c: f64) -> Self {
        let log_c = c.ln();
        Self::with_log_factorial(y, log_c, log_factorial_sum(y))
    }

    pub fn with_log_factorial(y: &'a [f64], log_c: f64, log_fact: f64) -> Self {
        let total: f64 = y.iter().sum();
        Self {
            y,
            log_c,
            constant: log_c * total - log_fact,
        }
    }
}

/// Inverse and log-determinant of a component covariance `Σ_g`.
#[derive(Debug, Clone)]
pub struct Precision {
    pub d: usize,
    pub inv: Vec<f64>,
    pub log_det: f64,
}

impl Precision {
    pub fn new(sigma: &DMatrix<f64>) -> Result<Self> {
        let (inv, log_det) = linalg::spd_inverse_log_det(sigma, "Σ")?;
        Ok(Self {
            d: sigma.nrows(),
            inv: inv.as_slice().to_vec(),
            log_det,
        })
    }
}

/// Poisson part `Σ_j m_j y_j − exp(log C + m_j + S_jj / 2)`.
fn poisson_term(obs: &Observation, m: &[f64], s: &[f64], d: usize, clamps: &mut usize) -> f64 {
    let mut total = 0.0;
    for j in 0..d {
        total += m[j] * obs.y[j] - clamped_exp(obs.log_c + m[j] + 0.5 * s[j * d + j], clamps);
    }
    total
}

/// ELBO given `log|S|` and `tr(Σ⁻¹S)`, which stay fixed during the `m` step.
#[allow(clippy::too_many_arguments)]
fn elbo_parts(
    obs: &Observation,
    prec: &Precision,
    mu: &[f64],
    m: &[f64],
    s: &[f64],
    s_log_det: f64,
    tr_prec_s: f64,
    diff: &mut [f64],
    clamps: &mut usize,
) -> f64 {
    let d = prec.d;
    for j in 0..d {
        diff[j] = m[j] - mu[j];
    }
    let quad = linalg::bilinear(&prec.inv, diff, diff);
    -0.5 * quad - 0.5 * tr_prec_s + 0.5 * s_log_det - 0.5 * prec.log_det
        + 0.5 * d as f64
        + poisson_term(obs, m, s, d, clamps)
        + obs.constant
}

fn s_log_det(s: &[f64], d: usize, l: &mut [f64]) -> Option<f64> {
    linalg::cholesky(s, d, l).then(|| linalg::chol_log_det(l, d))
}

/// Per-observation ELBO from slices; `S` must be positive-definite.
pub fn elbo_slices(
    obs: &Observation,
    prec: &Precision,
    mu: &[f64],
    m: &[f64],
    s: &[f64],
) -> Result<f64> {
    let d = prec.d;
    let mut l = vec![0.0; d * d];
    let mut diff = vec![0.0; d];
    let log_det = s_log_det(s, d, &mut l).ok_or(Error::NotPositiveDefinite("S"))?;
    let tr = linalg::trace_product(&prec.inv, s);
    let mut clamps = 0;
    let f = elbo_parts(obs, prec, mu, m, s, log_det, tr, &mut diff, &mut clamps);
    if f.is_finite() {
        Ok(f)
    } else {
        Err(Error::NonFinite("ELBO"))
    }
}

fn check_vec(v: &DVector<f64>, d: usize, what: &str) -> Result<()> {
    if v.len() != d {
        return invalid(format!("{what} has length {}, expected {d}", v.len()));
    }
    Ok(())
}

fn check_obs(y: &[f64], c: f64, d: usize) -> Result<()> {
    if y.len() != d {
        return invalid(format!("count vector has length {}, expected {d}", y.len()));
    }
    if !(c > 0.0) {
        return invalid("normalization constant must be positive");
    }
    Ok(())
}

/// Closed-form ELBO `F(q_ig, y_i)` of the Gaussian approximation
/// `q = N(m, S)` to the posterior of the log-rates under `N(μ, Σ)`.
pub fn elbo_stage1(
    y: &[f64],
    c: f64,
    m: &DVector<f64>,
    s: &DMatrix<f64>,
    mu: &DVector<f64>,
    sigma: &DMatrix<f64>,
) -> Result<f64> {
    let d = sigma.nrows();
    check_obs(y, c, d)?;
    check_vec(m, d, "m")?;
    check_vec(mu, d, "μ")?;
    let prec = Precision::new(sigma)?;
    elbo_slices(&Observation::new(y, c), &prec, mu.as_slice(), m.as_slice(), s.as_slice())
}

/// Fixed-point update `S = {Σ⁻¹ + diag(exp[log C + m + diag(S_prev)/2])}⁻¹`.
pub fn update_s(
    sigma: &DMatrix<f64>,
    c: f64,
    m: &DVector<f64>,
    s_prev: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let d = sigma.nrows();
    check_vec(m, d, "m")?;
    if !(c > 0.0) {
        return invalid("normalization constant must be positive");
    }
    let prec = Precision::new(sigma)?;
    let mut out = DMatrix::zeros(d, d);
    let mut scratch = Scratch::new(d);
    let mut clamps = 0;
    fixed_point_s(
        &prec,
        c.ln(),
        m.as_slice(),
        s_prev.as_slice(),
        &mut scratch,
        &mut clamps,
    )?;
    out.as_mut_slice().copy_from_slice(&scratch.s_new);
    Ok(out)
}

/// Writes the fixed-point `S` into `out` and returns `log|S|`.
fn fixed_point_s(
    prec: &Precision,
    log_c: f64,
    m: &[f64],
    s_prev: &[f64],
    scratch: &mut Scratch,
    clamps: &mut usize,
) -> Result<f64> {
    let d = prec.d;
    scratch.a.copy_from_slice(&prec.inv);
    for j in 0..d {
        scratch.a[j * d + j] += clamped_exp(log_c + m[j] + 0.5 * s_prev[j * d + j], clamps);
    }
    if !linalg::cholesky(&scratch.a, d, &mut scratch.l) {
        return Err(Error::NotPositiveDefinite("Σ⁻¹ + diag(rate)"));
    }
    linalg::chol_inverse(&scratch.l, d, &mut scratch.s_new, &mut scratch.work);
    Ok(-linalg::chol_log_det(&scratch.l, d))
}

/// Gradient of the ELBO in `m`: `y − exp[log C + m + diag(S)/2] − Σ⁻¹(m − μ)`.
pub fn elbo_gradient_m(
    y: &[f64],
    c: f64,
    m: &DVector<f64>,
    s: &DMatrix<f64>,
    mu: &DVector<f64>,
    sigma: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    let d = sigma.nrows();
    check_obs(y, c, d)?;
    let prec = Precision::new(sigma)?;
    let mut g = DVector::zeros(d);
    let mut diff = vec![0.0; d];
    let mut clamps = 0;
    gradient_m(
        &Observation::new(y, c),
        &prec,
        mu.as_slice(),
        m.as_slice(),
        s.as_slice(),
        g.as_mut_slice(),
        &mut diff,
        &mut clamps,
    );
    Ok(g)
}

#[allow(clippy::too_many_arguments)]
fn gradient_m(
    obs: &Observation,
    prec: &Precision,
    mu: &[f64],
    m: &[f64],
    s: &[f64],
    out: &mut [f64],
    diff: &mut [f64],
    clamps: &mut usize,
) {
    let d = prec.d;
    for j in 0..d {
        diff[j] = m[j] - mu[j];
    }
    linalg::matvec(&prec.inv, diff, out);
    for j in 0..d {
        out[j] = obs.y[j] - clamped_exp(obs.log_c + m[j] + 0.5 * s[j * d + j], clamps) - out[j];
    }
}

/// Newton update `m + S g` where `g` is [`elbo_gradient_m`] at `m_prev`
/// with `S = s_new`. Returns `m_prev` unchanged when `‖g‖_∞ < 1e-12`.
pub fn update_m(
    y: &[f64],
    c: f64,
    sigma: &DMatrix<f64>,
    mu: &DVector<f64>,
    m_prev: &DVector<f64>,
    s_new: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    let g = elbo_gradient_m(y, c, m_prev, s_new, mu, sigma)?;
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("m gradient"));
    }
    if g.amax() < GRAD_TOL {
        return Ok(m_prev.clone());
    }
    let next = m_prev + s_new * g;
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("m update"));
    }
    Ok(next)
}

/// Reusable buffers for the per-observation kernel.
#[derive(Debug, Clone)]
pub struct Scratch {
    a: Vec<f64>,
    l: Vec<f64>,
    work: Vec<f64>,
    s_new: Vec<f64>,
    s_try: Vec<f64>,
    grad: Vec<f64>,
    step: Vec<f64>,
    m_try: Vec<f64>,
    diff: Vec<f64>,
}

impl Scratch {
    pub fn new(d: usize) -> Self {
        Self {
            a: vec![0.0; d * d],
            l: vec![0.0; d * d],
            work: vec![0.0; d * d],
            s_new: vec![0.0; d * d],
            s_try: vec![0.0; d * d],
            grad: vec![0.0; d],
            step: vec![0.0; d],
            m_try: vec![0.0; d],
            diff: vec![0.0; d],
        }
    }
}

/// Outcome counters of the guarded per-observation updates.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StepCounts {
    pub clamps: usize,
    pub s_backtracked: usize,
    pub s_rejected: usize,
    pub m_backtracked: usize,
    pub m_rejected: usize,
}

impl std::ops::AddAssign for StepCounts {
    fn add_assign(&mut self, o: Self) {
        self.clamps += o.clamps;
        self.s_backtracked += o.s_backtracked;
        self.s_rejected += o.s_rejected;
        self.m_backtracked += o.m_backtracked;
        self.m_rejected += o.m_rejected;
    }
}

/// One guarded sweep for a single `(i, g)`: fixed-point `S` update then a
/// Newton `m` step, each halved (up to ten times) until the ELBO does not
/// decrease. `f` holds the current ELBO on entry and the updated one on exit.
#[allow(clippy::too_many_arguments)]
pub fn guarded_sweep(
    obs: &Observation,
    prec: &Precision,
    mu: &[f64],
    m: &mut [f64],
    s: &mut [f64],
    f: &mut f64,
    scratch: &mut Scratch,
    counts: &mut StepCounts,
) -> Result<()> {
    let d = prec.d;
    let mut clamps = 0;

    // S step
    let fp_log_det = fixed_point_s(prec, obs.log_c, m, s, scratch, &mut clamps)?;
    let mut accepted = None;
    let mut t = 1.0;
    for attempt in 0..=MAX_HALVINGS {
        let log_det = if attempt == 0 {
            scratch.s_try.copy_from_slice(&scratch.s_new);
            fp_log_det
        } else {
            for (dst, (old, new)) in scratch.s_try.iter_mut().zip(s.iter().zip(&scratch.s_new)) {
                *dst = old + t * (new - old);
            }
            match s_log_det(&scratch.s_try, d, &mut scratch.l) {
                Some(v) => v,
                None => {
                    t *= 0.5;
                    continue;
                }
            }
        };
        let tr = linalg::trace_product(&prec.inv, &scratch.s_try);
        let cand = elbo_parts(obs, prec, mu, m, &scratch.s_try, log_det, tr, &mut scratch.diff, &mut clamps);
        if cand.is_finite() && cand >= *f {
            accepted = Some((cand, log_det, tr));
            if attempt > 0 {
                counts.s_backtracked += 1;
            }
            break;
        }
        t *= 0.5;
    }
    let (s_log_det_cur, tr_cur) = match accepted {
        Some((cand, log_det, tr)) => {
            s.copy_from_slice(&scratch.s_try);
            *f = cand;
            (log_det, tr)
        }
        None => {
            counts.s_rejected += 1;
            let log_det = s_log_det(s, d, &mut scratch.l).ok_or(Error::NotPositiveDefinite("S"))?;
            (log_det, linalg::trace_product(&prec.inv, s))
        }
    };

    // m step
    gradient_m(obs, prec, mu, m, s, &mut scratch.grad, &mut scratch.diff, &mut clamps);
    if scratch.grad.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("m gradient"));
    }
    let gmax = scratch.grad.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    if gmax >= GRAD_TOL {
        linalg::matvec(s, &scratch.grad, &mut scratch.step);
        let mut t = 1.0;
        let mut done = false;
        for attempt in 0..=MAX_HALVINGS {
            for j in 0..d {
                scratch.m_try[j] = m[j] + t * scratch.step[j];
            }
            let cand = elbo_parts(
                obs,
                prec,
                mu,
                &scratch.m_try,
                s,
                s_log_det_cur,
                tr_cur,
                &mut scratch.diff,
                &mut clamps,
            );
            if cand.is_finite() && cand >= *f {
                m.copy_from_slice(&scratch.m_try);
                *f = cand;
                if attempt > 0 {
                    counts.m_backtracked += 1;
                }
                done = true;
                break;
            }
            t *= 0.5;
        }
        if !done {
            counts.m_rejected += 1;
        }
    }
    counts.clamps += clamps;
    Ok(())
}

/// Approximate posterior membership `ẑ_ig ∝ π_g exp(F_ig)`, computed with a
/// per-row log-sum-exp shift.
pub fn update_responsibilities(f: &DMatrix<f64>, pi: &[f64]) -> DMatrix<f64> {
    let (n, g) = f.shape();
    let log_pi: Vec<f64> = pi.iter().map(|p| p.ln()).collect();
    let mut z = DMatrix::zeros(n, g);
    for i in 0..n {
        let shift = (0..g)
            .map(|h| log_pi[h] + f[(i, h)])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for h in 0..g {
            let v = (log_pi[h] + f[(i, h)] - shift).exp();
            z[(i, h)] = v;
            total += v;
        }
        for h in 0..g {
            z[(i, h)] /= total;
        }
    }
    z
}

/// `Σ_i log Σ_g π_g exp(F_ig)`, the total ELBO of the mixture.
pub fn total_elbo(f: &DMatrix<f64>, pi: &[f64]) -> f64 {
    let (n, g) = f.shape();
    let log_pi: Vec<f64> = pi.iter().map(|p| p.ln()).collect();
    (0..n)
        .map(|i| {
            let shift = (0..g)
                .map(|h| log_pi[h] + f[(i, h)])
                .fold(f64::NEG_INFINITY, f64::max);
            shift
                + (0..g)
                    .map(|h| (log_pi[h] + f[(i, h)] - shift).exp())
                    .sum::<f64>()
                    .ln()
        })
        .sum()
}

/// Effective sizes below this mark a component as empty.
pub const EMPTY_COMPONENT: f64 = 1e-8;

/// `π̂_g = n_g / n` and `μ̂_g = Σ_i ẑ_ig m_ig / n_g`; `m` is laid out as
/// `[(i·G + g)·d + j]`.
pub fn update_pi_mu(zhat: &DMatrix<f64>, m: &[f64], d: usize) -> Result<(Vec<f64>, Vec<DVector<f64>>)> {
    let (n, gs) = zhat.shape();
    if m.len() != n * gs * d {
        return invalid("variational means have the wrong size");
    }
    let mut pi = Vec::with_capacity(gs);
    let mut mus = Vec::with_capacity(gs);
    for g in 0..gs {
        let ng: f64 = zhat.column(g).iter().sum();
        if !(ng >= EMPTY_COMPONENT) {
            return Err(Error::EmptyComponent {
                component: g,
                size: ng,
            });
        }
        let mut mu = DVector::zeros(d);
        for i in 0..n {
            let z = zhat[(i, g)];
            let off = (i * gs + g) * d;
            for j in 0..d {
                mu[j] += z * m[off + j];
            }
        }
        mu /= ng;
        pi.push(ng / n as f64);
        mus.push(mu);
    }
    Ok((pi, mus))
}
