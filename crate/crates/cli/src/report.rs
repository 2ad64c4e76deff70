//! The machine-readable report written by `fit`.

use serde::{Deserialize, Serialize};

use mplnfa::{Diagnostics, FitResult, FitSummary, ModelId};

use crate::params::MixtureJson;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedModel {
    pub g: usize,
    pub k: usize,
    pub model: ModelId,
    pub bic: f64,
    pub icl: f64,
    pub loglik_approx: f64,
    pub free_params: usize,
    pub converged: bool,
    pub iterations: usize,
}

impl From<&FitResult> for SelectedModel {
    fn from(fit: &FitResult) -> Self {
        Self {
            g: fit.g(),
            k: fit.k(),
            model: fit.model_id(),
            bic: fit.bic,
            icl: fit.icl,
            loglik_approx: fit.loglik_approx,
            free_params: fit.free_params,
            converged: fit.converged,
            iterations: fit.elbo_trace.len(),
        }
    }
}

/// One grid triple; scores are absent when the fit failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridEntry {
    pub g: usize,
    pub k: usize,
    pub model: ModelId,
    pub bic: Option<f64>,
    pub icl: Option<f64>,
    pub loglik_approx: Option<f64>,
    pub free_params: Option<usize>,
    pub converged: Option<bool>,
    pub iterations: Option<usize>,
    pub error: Option<String>,
}

impl From<&FitSummary> for GridEntry {
    fn from(s: &FitSummary) -> Self {
        let ok = s.outcome.as_ref().ok();
        Self {
            g: s.g,
            k: s.k,
            model: s.model_id,
            bic: ok.map(|o| o.bic),
            icl: ok.map(|o| o.icl),
            loglik_approx: ok.map(|o| o.loglik_approx),
            free_params: ok.map(|o| o.free_params),
            converged: ok.map(|o| o.converged),
            iterations: ok.map(|o| o.iterations),
            error: s.outcome.as_ref().err().cloned(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleAssignment {
    pub sample_id: String,
    /// 1-based cluster label.
    pub cluster: usize,
    pub posterior: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub input: String,
    pub input_sha256: String,
    pub seed: u64,
    pub normalize: String,
    pub starts: usize,
    pub restarts: usize,
    /// Seconds since the Unix epoch; the only field that varies between
    /// identical runs.
    pub timestamp_unix: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub selected: SelectedModel,
    pub selected_icl: SelectedModel,
    pub grid: Vec<GridEntry>,
    pub parameters: MixtureJson,
    pub samples: Vec<SampleAssignment>,
    pub elbo_trace: Vec<f64>,
    pub diagnostics: Diagnostics,
    pub provenance: Provenance,
}

impl RunReport {
    pub fn assignments(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.cluster - 1).collect()
    }
}
