//! Fitting: k-means initialization, the alternating two-stage outer loop,
//! information criteria and the grid search over `(G, K, model)`.

use std::ops::RangeInclusive;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::kmeans::kmeans;
use crate::model::{
    sigma_from, total_free_params, ComponentParams, CountMatrix, MixtureModel, ModelId,
    NormalizationFactors, VariationalState,
};
use crate::par;
use crate::stage1::{
    elbo_slices, guarded_sweep, log_factorial_sum, total_elbo, update_pi_mu,
    update_responsibilities, Observation, Precision, Scratch, StepCounts,
};
use crate::stage2::{
    self, compute_w, constrained_init, stage1_sigma_objective, update_lambda_psi, weighted_mean_s,
    InnerOptions, Stage2Stats,
};

/// Settings for [`fit_single`] and [`grid_search`].
#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub g_range: RangeInclusive<usize>,
    pub k_range: RangeInclusive<usize>,
    pub models: Vec<ModelId>,
    /// k-means seedings per initialization.
    pub n_starts: usize,
    pub max_outer: usize,
    /// Relative change of the total ELBO that ends the outer loop.
    pub tol_outer: f64,
    pub seed: u64,
    /// Independent whole-EM restarts; the highest final ELBO wins.
    pub restarts: usize,
    /// `S`/`m` sweeps per observation and component in each outer iteration.
    pub e_sweeps: usize,
    pub inner: InnerOptions,
    /// Guard the second stage so the total ELBO cannot fall; when off, the
    /// second-stage update is always taken as printed.
    pub stage2_guard: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            g_range: 1..=1,
            k_range: 1..=1,
            models: ModelId::ALL.to_vec(),
            n_starts: 3,
            max_outer: 1000,
            tol_outer: 1e-5,
            seed: 0,
            restarts: 1,
            e_sweeps: 1,
            inner: InnerOptions::default(),
            stage2_guard: true,
        }
    }
}

impl FitConfig {
    /// Config for a single `(G, K, model)` triple.
    pub fn single(g: usize, k: usize, model_id: ModelId, seed: u64) -> Self {
        Self {
            g_range: g..=g,
            k_range: k..=k,
            models: vec![model_id],
            seed,
            ..Self::default()
        }
    }

    /// Check the config against a dataset with `n` samples and `d` variables.
    pub fn validate(&self, n: usize, d: usize) -> Result<()> {
        if self.g_range.is_empty() || self.k_range.is_empty() {
            return invalid("G and K ranges must be non-empty");
        }
        if *self.g_range.start() < 1 {
            return invalid("G must be at least 1");
        }
        if *self.k_range.start() < 1 {
            return invalid("K must be at least 1");
        }
        if *self.k_range.end() > d {
            return invalid(format!(
                "largest K = {} exceeds the number of variables d = {d}",
                self.k_range.end()
            ));
        }
        if *self.g_range.end() > n {
            return invalid(format!(
                "largest G = {} exceeds the number of samples n = {n}",
                self.g_range.end()
            ));
        }
        if self.models.is_empty() {
            return invalid("at least one model is required");
        }
        if self.n_starts == 0 || self.max_outer == 0 || self.restarts == 0 || self.e_sweeps == 0 {
            return invalid("starts, restarts, sweeps and iteration limits must be positive");
        }
        if !(self.tol_outer > 0.0) {
            return invalid("outer tolerance must be positive");
        }
        Ok(())
    }

    /// Triples of the grid in `(G, K, model)` order.
    pub fn triples(&self) -> Vec<(usize, usize, ModelId)> {
        let mut models = self.models.clone();
        models.sort();
        models.dedup();
        let mut out = Vec::new();
        for g in self.g_range.clone() {
            for k in self.k_range.clone() {
                for m in &models {
                    out.push((g, k, *m));
                }
            }
        }
        out
    }
}

/// Counters of numerical safeguards that fired during a fit.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Poisson-rate exponents clamped at 700.
    pub exp_clamps: usize,
    pub s_steps_backtracked: usize,
    pub s_steps_rejected: usize,
    pub m_steps_backtracked: usize,
    pub m_steps_rejected: usize,
    /// Error variances raised to the floor.
    pub psi_clamped: usize,
    /// Outer iterations whose loading/variance loop hit its sweep limit.
    pub inner_not_converged: usize,
    /// Second-stage proposals that would have lowered the first-stage ELBO
    /// and were replaced by a refit on the full `W + S̄`.
    pub stage2_full_refits: usize,
    /// Outer iterations that kept `Λ`, `Ψ` unchanged because neither update
    /// raised the first-stage ELBO.
    pub stage2_rejected: usize,
    /// Outer iterations whose total ELBO fell by more than the slack.
    pub elbo_decreases: usize,
}

impl Diagnostics {
    fn absorb(&mut self, c: StepCounts) {
        self.exp_clamps += c.clamps;
        self.s_steps_backtracked += c.s_backtracked;
        self.s_steps_rejected += c.s_rejected;
        self.m_steps_backtracked += c.m_backtracked;
        self.m_steps_rejected += c.m_rejected;
    }
}

/// A converged (or iteration-capped) fit.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub model: MixtureModel,
    pub state: VariationalState,
    /// Total ELBO after each outer iteration.
    pub elbo_trace: Vec<f64>,
    pub loglik_approx: f64,
    pub free_params: usize,
    pub bic: f64,
    pub icl: f64,
    pub assignments: Vec<usize>,
    pub converged: bool,
    pub diagnostics: Diagnostics,
}

impl FitResult {
    pub fn g(&self) -> usize {
        self.model.g()
    }

    pub fn k(&self) -> usize {
        self.model.k()
    }

    pub fn model_id(&self) -> ModelId {
        self.model.model_id
    }

    pub fn summary(&self) -> FitSummary {
        FitSummary {
            g: self.g(),
            k: self.k(),
            model_id: self.model_id(),
            outcome: Ok(FitScores {
                loglik_approx: self.loglik_approx,
                free_params: self.free_params,
                bic: self.bic,
                icl: self.icl,
                converged: self.converged,
                iterations: self.elbo_trace.len(),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitScores {
    pub loglik_approx: f64,
    pub free_params: usize,
    pub bic: f64,
    pub icl: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// One grid triple and either its scores or the reason it failed.
#[derive(Debug, Clone, PartialEq)]
pub struct FitSummary {
    pub g: usize,
    pub k: usize,
    pub model_id: ModelId,
    pub outcome: std::result::Result<FitScores, String>,
}

/// Output of [`grid_search`].
#[derive(Debug, Clone)]
pub struct GridResult {
    /// Minimum-BIC fit.
    pub best: FitResult,
    /// Minimum-ICL fit.
    pub best_icl: FitResult,
    /// Every triple in `(G, K, model)` order.
    pub summaries: Vec<FitSummary>,
}

/// `−2·loglik + ρ·log n`; smaller is better.
pub fn bic(loglik_approx: f64, free_params: usize, n: usize) -> f64 {
    -2.0 * loglik_approx + free_params as f64 * (n as f64).ln()
}

/// `BIC + 2·ENT` with `ENT = −Σ ẑ log ẑ` (`0·log 0 = 0`).
pub fn icl(bic: f64, zhat: &DMatrix<f64>) -> f64 {
    let entropy: f64 = zhat
        .iter()
        .filter(|z| **z > 0.0)
        .map(|z| -z * z.ln())
        .sum();
    bic + 2.0 * entropy
}

/// Dataset with per-sample constants cached.
struct Dataset {
    n: usize,
    d: usize,
    y: Vec<f64>,
    log_c: Vec<f64>,
    log_fact: Vec<f64>,
    /// `log(y + 1) − log C`
    transformed: Vec<f64>,
}

impl Dataset {
    fn new(data: &CountMatrix, factors: &NormalizationFactors) -> Result<Self> {
        factors.check_against(data)?;
        let (n, d) = (data.n(), data.d());
        let y: Vec<f64> = data.values().iter().map(|&v| v as f64).collect();
        let log_c: Vec<f64> = factors.values().iter().map(|c| c.ln()).collect();
        let log_fact = (0..n).map(|i| log_factorial_sum(&y[i * d..(i + 1) * d])).collect();
        let transformed = (0..n * d).map(|idx| (y[idx] + 1.0).ln() - log_c[idx / d]).collect();
        Ok(Self {
            n,
            d,
            y,
            log_c,
            log_fact,
            transformed,
        })
    }

    fn obs(&self, i: usize) -> Observation<'_> {
        Observation::with_log_factorial(&self.y[i * self.d..(i + 1) * self.d], self.log_c[i], self.log_fact[i])
    }
}

/// Transformed matrix `log(y_ij + 1) − log C_i`, row-major.
pub fn log_transform(data: &CountMatrix, factors: &NormalizationFactors) -> Result<Vec<f64>> {
    Ok(Dataset::new(data, factors)?.transformed)
}

/// k-means initialization on the log-transformed counts.
///
/// Hard labels seed `ẑ`; `μ_g` are the cluster means; `Λ_g`, `Ψ_g` come from
/// the leading eigenvectors of each cluster's scatter (pooled where the model
/// shares them); `m_ig` is the transformed observation, `S_ig = 0.1·I` and
/// `π_g` the cluster proportions floored at `1/(10n)`.
pub fn initialize(
    data: &CountMatrix,
    factors: &NormalizationFactors,
    g: usize,
    k: usize,
    model_id: ModelId,
    n_starts: usize,
    seed: u64,
) -> Result<(MixtureModel, VariationalState)> {
    let ds = Dataset::new(data, factors)?;
    init_from(&ds, g, k, model_id, n_starts, seed)
}

fn init_from(
    ds: &Dataset,
    gs: usize,
    k: usize,
    model_id: ModelId,
    n_starts: usize,
    seed: u64,
) -> Result<(MixtureModel, VariationalState)> {
    let (n, d) = (ds.n, ds.d);
    if gs == 0 || gs > n {
        return invalid(format!("G = {gs} must lie in 1..={n}"));
    }
    if k == 0 || k > d {
        return invalid(format!("K = {k} must lie in 1..={d}"));
    }
    let labels = if gs == 1 {
        vec![0; n]
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        kmeans(&ds.transformed, n, d, gs, n_starts, &mut rng)?.labels
    };

    let mut state = VariationalState::zeros(n, gs, d, k);
    for (i, &l) in labels.iter().enumerate() {
        state.zhat[(i, l)] = 1.0;
        let x = &ds.transformed[i * d..(i + 1) * d];
        for g in 0..gs {
            let off = (i * gs + g) * d;
            state.m[off..off + d].copy_from_slice(x);
            let soff = (i * gs + g) * d * d;
            for j in 0..d {
                state.s[soff + j * d + j] = 0.1;
            }
        }
    }

    let counts: Vec<f64> = (0..gs)
        .map(|g| labels.iter().filter(|l| **l == g).count() as f64)
        .collect();
    let mut mus = Vec::with_capacity(gs);
    let mut ws = Vec::with_capacity(gs);
    for g in 0..gs {
        let weights: Vec<f64> = labels.iter().map(|l| if *l == g { 1.0 } else { 0.0 }).collect();
        let rows: Vec<&[f64]> = (0..n).map(|i| &ds.transformed[i * d..(i + 1) * d]).collect();
        let total: f64 = weights.iter().sum();
        let mu = DVector::from_fn(d, |j, _| {
            (0..n).map(|i| weights[i] * rows[i][j]).sum::<f64>() / total
        });
        ws.push(compute_w(&weights, &rows, &mu)?);
        mus.push(mu);
    }
    let (lambdas, psis) = constrained_init(model_id, &ws, &counts, k);

    let floor = 1.0 / (10.0 * n as f64);
    let raw: Vec<f64> = counts.iter().map(|c| (c / n as f64).max(floor)).collect();
    let total: f64 = raw.iter().sum();
    let components = (0..gs)
        .map(|g| {
            ComponentParams::new(raw[g] / total, mus[g].clone(), lambdas[g].clone(), psis[g].clone())
        })
        .collect::<Result<Vec<_>>>()?;
    let model = MixtureModel::new(model_id, normalize_pi(components))?;
    for g in 0..gs {
        state.q[g] = stage2::update_q(&lambdas[g], &psis[g])?;
    }
    Ok((model, state))
}

/// Rescale mixing weights so they sum to one exactly in floating point as
/// far as possible.
fn normalize_pi(mut components: Vec<ComponentParams>) -> Vec<ComponentParams> {
    let total: f64 = components.iter().map(|c| c.pi).sum();
    for c in components.iter_mut() {
        c.pi /= total;
    }
    components
}

fn compute_f(ds: &Dataset, precs: &[Precision], mus: &[DVector<f64>], state: &VariationalState) -> Result<DMatrix<f64>> {
    let gs = state.g;
    let rows = par::map_range(ds.n, |i| {
        let obs = ds.obs(i);
        (0..gs)
            .map(|g| elbo_slices(&obs, &precs[g], mus[g].as_slice(), state.m(i, g), state.s(i, g)))
            .collect::<Result<Vec<f64>>>()
    });
    let mut f = DMatrix::zeros(ds.n, gs);
    for (i, row) in rows.into_iter().enumerate() {
        for (g, v) in row?.into_iter().enumerate() {
            f[(i, g)] = v;
        }
    }
    Ok(f)
}

/// Fit one `(G, K, model)` triple, keeping the best of `config.restarts`
/// whole-EM runs by final ELBO.
pub fn fit_single(
    data: &CountMatrix,
    factors: &NormalizationFactors,
    g: usize,
    k: usize,
    model_id: ModelId,
    config: &FitConfig,
) -> Result<FitResult> {
    let ds = Dataset::new(data, factors)?;
    let single = FitConfig {
        g_range: g..=g,
        k_range: k..=k,
        models: vec![model_id],
        ..config.clone()
    };
    single.validate(ds.n, ds.d)?;
    fit_dataset(&ds, g, k, model_id, config)
}

fn restart_seed(seed: u64, restart: usize) -> u64 {
    seed.wrapping_add((restart as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn fit_dataset(ds: &Dataset, g: usize, k: usize, model_id: ModelId, config: &FitConfig) -> Result<FitResult> {
    let mut best: Option<FitResult> = None;
    let mut last_err = None;
    for r in 0..config.restarts {
        let attempt = init_from(ds, g, k, model_id, config.n_starts, restart_seed(config.seed, r))
            .and_then(|(model, state)| run_em(ds, model, state, config));
        match attempt {
            Ok(fit) => {
                if best.as_ref().is_none_or(|b| fit.loglik_approx > b.loglik_approx) {
                    best = Some(fit);
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    best.ok_or_else(|| last_err.expect("at least one restart ran"))
}

/// Relative slack used when judging ELBO decreases.
const ELBO_SLACK: f64 = 1e-6;

fn run_em(ds: &Dataset, model: MixtureModel, mut state: VariationalState, config: &FitConfig) -> Result<FitResult> {
    let (n, d) = (ds.n, ds.d);
    let gs = model.g();
    let k = model.k();
    let model_id = model.model_id;
    let mut pi = model.pi();
    let mut mus: Vec<DVector<f64>> = model.components.iter().map(|c| c.mu.clone()).collect();
    let mut lambdas: Vec<DMatrix<f64>> = model.components.iter().map(|c| c.lambda.clone()).collect();
    let mut psis: Vec<DVector<f64>> = model.components.iter().map(|c| c.psi.clone()).collect();
    let mut sigmas: Vec<DMatrix<f64>> = (0..gs).map(|g| sigma_from(&lambdas[g], &psis[g])).collect();

    let mut diagnostics = Diagnostics::default();
    let mut precs = sigmas.iter().map(Precision::new).collect::<Result<Vec<_>>>()?;
    let mut f = compute_f(ds, &precs, &mus, &state)?;
    let mut trace: Vec<f64> = Vec::new();
    let mut converged = false;
    let hard = state.zhat.clone();

    for iteration in 0..config.max_outer {
        let zhat = if iteration == 0 {
            hard.clone()
        } else {
            update_responsibilities(&f, &pi)
        };

        // Stage 1: S, m per observation and component
        let mut f_rows: Vec<f64> = (0..n).flat_map(|i| (0..gs).map(move |g| (i, g))).map(|(i, g)| f[(i, g)]).collect();
        let results = par::map_chunks3(
            &mut state.m,
            gs * d,
            &mut state.s,
            gs * d * d,
            &mut f_rows,
            gs,
            |i, m, s, frow| -> Result<StepCounts> {
                let obs = ds.obs(i);
                let mut scratch = Scratch::new(d);
                let mut counts = StepCounts::default();
                for g in 0..gs {
                    for _ in 0..config.e_sweeps {
                        guarded_sweep(
                            &obs,
                            &precs[g],
                            mus[g].as_slice(),
                            &mut m[g * d..(g + 1) * d],
                            &mut s[g * d * d..(g + 1) * d * d],
                            &mut frow[g],
                            &mut scratch,
                            &mut counts,
                        )?;
                    }
                }
                Ok(counts)
            },
        );
        for r in results {
            diagnostics.absorb(r?);
        }

        let (new_pi, new_mus) = update_pi_mu(&zhat, &state.m, d)?;
        pi = new_pi;
        mus = new_mus;

        // Stage 2
        let n_g: Vec<f64> = (0..gs).map(|g| zhat.column(g).sum()).collect();
        let mut ws = Vec::with_capacity(gs);
        let mut s_full = Vec::with_capacity(gs);
        for g in 0..gs {
            let weights: Vec<f64> = zhat.column(g).iter().copied().collect();
            let m_rows: Vec<&[f64]> = (0..n).map(|i| state.m(i, g)).collect();
            let s_rows: Vec<&[f64]> = (0..n).map(|i| state.s(i, g)).collect();
            ws.push(compute_w(&weights, &m_rows, &mus[g]).map_err(|e| relabel(e, g))?);
            s_full.push(weighted_mean_s(&weights, &s_rows, d).map_err(|e| relabel(e, g))?);
        }
        let s_bar: Vec<DVector<f64>> = s_full.iter().map(|s| s.diagonal()).collect();

        for g in 0..gs {
            let b = stage2::beta(&lambdas[g], &psis[g])?;
            state.q[g] = stage2::update_q(&lambdas[g], &psis[g])?;
            for i in 0..n {
                let r = DVector::from_column_slice(state.m(i, g)) - &mus[g];
                let p = &b * r;
                let off = (i * gs + g) * k;
                state.p[off..off + k].copy_from_slice(p.as_slice());
            }
        }

        let mut stats = Stage2Stats::new(ws, n_g.clone())?;
        let loading = update_lambda_psi(model_id, &mut stats, &s_bar, &lambdas, &psis, config.inner)?;
        if !loading.converged {
            diagnostics.inner_not_converged += 1;
        }
        diagnostics.psi_clamped += loading.psi_clamped;

        // The proposal targets a looser bound that keeps only diag(S̄). Keep it
        // when the first-stage ELBO does not drop; otherwise refit on the full
        // V = W + S̄, for which the same inner loop is a monotone EM.
        let v: Vec<DMatrix<f64>> = stats.w.iter().zip(&s_full).map(|(w, s)| w + s).collect();
        let current = stage1_sigma_objective(&n_g, &v, &sigmas)?;
        let proposal: Vec<DMatrix<f64>> = (0..gs).map(|g| sigma_from(&loading.lambda[g], &loading.psi[g])).collect();
        let proposal_obj = stage1_sigma_objective(&n_g, &v, &proposal).unwrap_or(f64::NEG_INFINITY);
        if !config.stage2_guard || proposal_obj >= current {
            lambdas = loading.lambda;
            psis = loading.psi;
            sigmas = proposal;
        } else {
            let mut full = Stage2Stats::new(v.clone(), n_g.clone())?;
            let zero = vec![DVector::zeros(d); gs];
            let refit = update_lambda_psi(model_id, &mut full, &zero, &lambdas, &psis, config.inner)?;
            diagnostics.psi_clamped += refit.psi_clamped;
            let refit_sigmas: Vec<DMatrix<f64>> = (0..gs).map(|g| sigma_from(&refit.lambda[g], &refit.psi[g])).collect();
            if stage1_sigma_objective(&n_g, &v, &refit_sigmas).is_ok_and(|o| o >= current) {
                diagnostics.stage2_full_refits += 1;
                lambdas = refit.lambda;
                psis = refit.psi;
                sigmas = refit_sigmas;
            } else {
                diagnostics.stage2_rejected += 1;
            }
        }

        precs = sigmas.iter().map(Precision::new).collect::<Result<Vec<_>>>()?;
        f = compute_f(ds, &precs, &mus, &state)?;
        let total = total_elbo(&f, &pi);
        if !total.is_finite() {
            return Err(Error::NonFinite("total ELBO"));
        }
        if let Some(&prev) = trace.last() {
            if total < prev - ELBO_SLACK * prev.abs() {
                diagnostics.elbo_decreases += 1;
            }
            trace.push(total);
            if (total - prev).abs() <= config.tol_outer * prev.abs() {
                converged = true;
                break;
            }
        } else {
            trace.push(total);
        }
    }

    state.zhat = update_responsibilities(&f, &pi);
    state.f = f;
    let assignments = state.assignments();
    let components = (0..gs)
        .map(|g| ComponentParams::new(pi[g], mus[g].clone(), lambdas[g].clone(), psis[g].clone()))
        .collect::<Result<Vec<_>>>()?;
    let model = MixtureModel::new(model_id, normalize_pi(components))?;
    let loglik = *trace.last().expect("at least one outer iteration");
    let free_params = total_free_params(model_id, d, k, gs)?;
    let bic_value = bic(loglik, free_params, n);
    let icl_value = icl(bic_value, &state.zhat);
    Ok(FitResult {
        model,
        state,
        elbo_trace: trace,
        loglik_approx: loglik,
        free_params,
        bic: bic_value,
        icl: icl_value,
        assignments,
        converged,
        diagnostics,
    })
}

fn relabel(e: Error, component: usize) -> Error {
    match e {
        Error::EmptyComponent { size, .. } => Error::EmptyComponent { component, size },
        other => other,
    }
}

/// Fit every `(G, K, model)` triple of `config` and select the minimum-BIC
/// fit (ties go to the earliest triple). Failed triples are kept in the
/// summaries with their error and excluded from selection.
pub fn grid_search(data: &CountMatrix, factors: &NormalizationFactors, config: &FitConfig) -> Result<GridResult> {
    let ds = Dataset::new(data, factors)?;
    config.validate(ds.n, ds.d)?;
    let triples = config.triples();
    let summaries: Vec<FitSummary> = par::map_slice(&triples, |&(g, k, m)| {
        match fit_dataset(&ds, g, k, m, config) {
            Ok(fit) => fit.summary(),
            Err(e) => FitSummary {
                g,
                k,
                model_id: m,
                outcome: Err(e.to_string()),
            },
        }
    });
    let pick = |key: fn(&FitScores) -> f64| {
        summaries
            .iter()
            .enumerate()
            .filter_map(|(idx, s)| s.outcome.as_ref().ok().map(|o| (idx, key(o))))
            .fold(None, |best: Option<(usize, f64)>, (idx, v)| match best {
                Some((_, bv)) if bv <= v => best,
                _ => Some((idx, v)),
            })
            .map(|(idx, _)| idx)
    };
    let Some(best_bic) = pick(|o| o.bic) else {
        let last = summaries
            .iter()
            .rev()
            .find_map(|s| s.outcome.as_ref().err().cloned())
            .unwrap_or_default();
        return Err(Error::AllFitsFailed(last));
    };
    let best_icl = pick(|o| o.icl).expect("a successful fit exists");
    let refit = |idx: usize| {
        let (g, k, m) = triples[idx];
        fit_dataset(&ds, g, k, m, config)
    };
    let best = refit(best_bic)?;
    let best_icl = if best_icl == best_bic {
        best.clone()
    } else {
        refit(best_icl)?
    };
    Ok(GridResult {
        best,
        best_icl,
        summaries,
    })
}
