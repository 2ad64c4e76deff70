//! Clustering and parameter-recovery metrics.

use std::collections::HashMap;

use nalgebra::DVector;

use crate::error::{invalid, Result};
use crate::model::MixtureModel;

/// Hubert–Arabie adjusted Rand index.
pub fn ari(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return invalid(format!("label vectors differ in length ({} vs {})", a.len(), b.len()));
    }
    let n = a.len();
    if n < 2 {
        return invalid("ARI needs at least two observations");
    }
    let mut table: HashMap<(usize, usize), u64> = HashMap::new();
    let mut rows: HashMap<usize, u64> = HashMap::new();
    let mut cols: HashMap<usize, u64> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let pairs = |c: u64| (c * c.saturating_sub(1) / 2) as f64;
    let index: f64 = table.values().map(|&c| pairs(c)).sum();
    let sum_a: f64 = rows.values().map(|&c| pairs(c)).sum();
    let sum_b: f64 = cols.values().map(|&c| pairs(c)).sum();
    let total = pairs(n as u64);
    let expected = sum_a * sum_b / total;
    let max = 0.5 * (sum_a + sum_b);
    if max == expected {
        // both partitions trivial (all singletons or one block)
        return Ok(if index == max { 1.0 } else { 0.0 });
    }
    Ok((index - expected) / (max - expected))
}

/// Component order minimizing total Euclidean distance between means:
/// estimated component `order[g]` is matched to true component `g`.
pub fn match_components(estimated: &MixtureModel, truth: &MixtureModel) -> Result<Vec<usize>> {
    if estimated.g() != truth.g() || estimated.d() != truth.d() {
        return invalid(format!(
            "cannot match {}×{} estimate to {}×{} truth",
            estimated.g(),
            estimated.d(),
            truth.g(),
            truth.d()
        ));
    }
    let g = truth.g();
    let cost: Vec<f64> = (0..g)
        .flat_map(|t| {
            (0..g).map(move |e| (&truth.components[t].mu - &estimated.components[e].mu).norm())
        })
        .collect();
    Ok(hungarian(&cost, g))
}

/// Minimum-cost perfect assignment on a square `n × n` row-major cost
/// matrix; returns the column assigned to each row.
fn hungarian(cost: &[f64], n: usize) -> Vec<usize> {
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            out[p[j] - 1] = j - 1;
        }
    }
    out
}

/// Per true component, the mean over all `d²` entries of `(Σ̂ − Σ)²`, with
/// estimated component `matching[g]` compared to true component `g`.
pub fn mse_sigma(estimated: &MixtureModel, truth: &MixtureModel, matching: &[usize]) -> Result<Vec<f64>> {
    if estimated.d() != truth.d() || estimated.g() != truth.g() || matching.len() != truth.g() {
        return invalid("estimate, truth and matching disagree in dimension");
    }
    let est = estimated.sigmas();
    let tru = truth.sigmas();
    let d2 = (truth.d() * truth.d()) as f64;
    Ok((0..truth.g())
        .map(|g| (&est[matching[g]] - &tru[g]).iter().map(|x| x * x).sum::<f64>() / d2)
        .collect())
}

/// Recovery summary for one true component.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentRecovery {
    pub true_mu: DVector<f64>,
    pub mean_mu: DVector<f64>,
    /// Elementwise sample SD of the matched `μ̂` (0 for one replicate).
    pub sd_mu: DVector<f64>,
    pub mean_mse_sigma: f64,
    pub max_mse_sigma: f64,
}

/// Match every fit to `truth` by mean distance, then summarize `μ̂` and
/// `MSE(Σ)` per true component.
pub fn recovery_report(fits: &[MixtureModel], truth: &MixtureModel) -> Result<Vec<ComponentRecovery>> {
    if fits.is_empty() {
        return invalid("recovery report needs at least one replicate");
    }
    let (g, d) = (truth.g(), truth.d());
    let mut mus: Vec<Vec<DVector<f64>>> = vec![Vec::with_capacity(fits.len()); g];
    let mut mses: Vec<Vec<f64>> = vec![Vec::with_capacity(fits.len()); g];
    for fit in fits {
        let order = match_components(fit, truth)?;
        let mse = mse_sigma(fit, truth, &order)?;
        for t in 0..g {
            mus[t].push(fit.components[order[t]].mu.clone());
            mses[t].push(mse[t]);
        }
    }
    let r = fits.len() as f64;
    Ok((0..g)
        .map(|t| {
            let mean = mus[t].iter().fold(DVector::zeros(d), |acc, m| acc + m) / r;
            let sd = if fits.len() > 1 {
                mus[t]
                    .iter()
                    .fold(DVector::zeros(d), |acc: DVector<f64>, m| {
                        acc + (m - &mean).map(|x| x * x)
                    })
                    .map(|s| (s / (r - 1.0)).sqrt())
            } else {
                DVector::zeros(d)
            };
            ComponentRecovery {
                true_mu: truth.components[t].mu.clone(),
                mean_mu: mean,
                sd_mu: sd,
                mean_mse_sigma: mses[t].iter().sum::<f64>() / r,
                max_mse_sigma: mses[t].iter().cloned().fold(0.0, f64::max),
            }
        })
        .collect())
}
