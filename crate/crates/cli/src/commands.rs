//! The `fit`, `simulate` and `evaluate` subcommands.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use mplnfa::em::log_transform;
use mplnfa::{
    ari, grid_search, recovery_report, FitConfig, FitResult, MixtureModel, ModelId, Preset,
    SimulationConfig,
};

use crate::io::{self, Normalization};
use crate::params::MixtureJson;
use crate::report::{GridEntry, Provenance, RunReport, SampleAssignment, SelectedModel};
use crate::{CliError, CliResult};

pub const REPORT_FILE: &str = "report.json";
pub const TRUTH_FILE: &str = "truth.json";
pub const COUNTS_FILE: &str = "counts.csv";

fn invalid<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(CliError::Validation(msg.into()))
}

#[derive(Debug, Clone)]
pub struct FitArgs {
    pub input: PathBuf,
    pub gmin: usize,
    pub gmax: usize,
    pub kmin: usize,
    pub kmax: usize,
    pub models: String,
    pub normalize: String,
    pub factors: Option<PathBuf>,
    pub seed: u64,
    pub starts: usize,
    pub restarts: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub out_dir: PathBuf,
}

pub fn parse_normalization(mode: &str, factors: Option<&Path>) -> CliResult<Normalization> {
    match (mode, factors) {
        ("none", None) => Ok(Normalization::None),
        ("libsize", None) => Ok(Normalization::LibSize),
        ("file", Some(p)) => Ok(Normalization::File(p.to_path_buf())),
        ("file", None) => invalid("--normalize file requires --factors <csv>"),
        ("none" | "libsize", Some(_)) => invalid("--factors is only used with --normalize file"),
        (other, _) => invalid(format!("unknown normalization '{other}' (expected none, libsize or file)")),
    }
}

/// Validate flags, read the data and build the grid configuration; nothing
/// is fitted here.
pub fn prepare_fit(args: &FitArgs) -> CliResult<(mplnfa::CountMatrix, mplnfa::NormalizationFactors, FitConfig)> {
    let models = ModelId::parse_list(&args.models)?;
    let mode = parse_normalization(&args.normalize, args.factors.as_deref())?;
    if args.gmin < 1 {
        return invalid("--gmin must be at least 1");
    }
    if args.gmin > args.gmax {
        return invalid(format!("--gmin {} exceeds --gmax {}", args.gmin, args.gmax));
    }
    if args.kmin < 1 {
        return invalid("--kmin must be at least 1");
    }
    if args.kmin > args.kmax {
        return invalid(format!("--kmin {} exceeds --kmax {}", args.kmin, args.kmax));
    }
    if args.starts == 0 || args.restarts == 0 || args.max_iter == 0 {
        return invalid("--starts, --restarts and --max-iter must be positive");
    }
    if !(args.tol > 0.0) {
        return invalid("--tol must be positive");
    }
    let (counts, factors) = io::read_counts(&args.input, &mode)?;
    if counts.n() < 2 {
        return invalid(format!("clustering needs at least 2 samples, input has {}", counts.n()));
    }
    if args.kmax > counts.d() {
        return invalid(format!("--kmax {} exceeds the number of variables d = {}", args.kmax, counts.d()));
    }
    if args.gmax > counts.n() {
        return invalid(format!("--gmax {} exceeds the number of samples n = {}", args.gmax, counts.n()));
    }
    let config = FitConfig {
        g_range: args.gmin..=args.gmax,
        k_range: args.kmin..=args.kmax,
        models,
        n_starts: args.starts,
        restarts: args.restarts,
        max_outer: args.max_iter,
        tol_outer: args.tol,
        seed: args.seed,
        ..FitConfig::default()
    };
    config.validate(counts.n(), counts.d())?;
    Ok((counts, factors, config))
}

fn num(x: f64) -> String {
    format!("{x:?}")
}

/// Run the grid and write every artifact to `args.out_dir`.
pub fn run_fit(args: &FitArgs) -> CliResult<RunReport> {
    let (counts, factors, config) = prepare_fit(args)?;
    let hash = io::sha256_file(&args.input)?;
    let grid = grid_search(&counts, &factors, &config)?;
    let best = &grid.best;

    io::ensure_dir(&args.out_dir)?;
    let samples = sample_assignments(&counts, best);
    let report = RunReport {
        selected: SelectedModel::from(best),
        selected_icl: SelectedModel::from(&grid.best_icl),
        grid: grid.summaries.iter().map(GridEntry::from).collect(),
        parameters: MixtureJson::from(&best.model),
        samples,
        elbo_trace: best.elbo_trace.clone(),
        diagnostics: best.diagnostics.clone(),
        provenance: Provenance {
            tool: "mplnfa".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            input: args
                .input
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
            input_sha256: hash,
            seed: args.seed,
            normalize: args.normalize.clone(),
            starts: args.starts,
            restarts: args.restarts,
            timestamp_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        },
    };
    write_fit_artifacts(&args.out_dir, &counts, &factors, best, &grid.summaries, &report)?;
    Ok(report)
}

fn sample_assignments(counts: &mplnfa::CountMatrix, fit: &FitResult) -> Vec<SampleAssignment> {
    (0..counts.n())
        .map(|i| SampleAssignment {
            sample_id: counts.sample_ids()[i].clone(),
            cluster: fit.assignments[i] + 1,
            posterior: fit.state.zhat.row(i).iter().copied().collect(),
        })
        .collect()
}

fn write_fit_artifacts(
    dir: &Path,
    counts: &mplnfa::CountMatrix,
    factors: &mplnfa::NormalizationFactors,
    best: &FitResult,
    summaries: &[mplnfa::FitSummary],
    report: &RunReport,
) -> CliResult<()> {
    io::write_json(&dir.join(REPORT_FILE), report)?;

    let rows: Vec<Vec<String>> = report
        .samples
        .iter()
        .map(|s| {
            vec![
                s.sample_id.clone(),
                s.cluster.to_string(),
                num(s.posterior[s.cluster - 1]),
            ]
        })
        .collect();
    io::write_csv(
        &dir.join("assignments.csv"),
        &["sample_id".into(), "cluster".into(), "max_posterior".into()],
        &rows,
    )?;

    let mut header = vec!["sample_id".to_string()];
    header.extend((1..=best.g()).map(|g| format!("cluster_{g}")));
    let rows: Vec<Vec<String>> = report
        .samples
        .iter()
        .map(|s| {
            std::iter::once(s.sample_id.clone())
                .chain(s.posterior.iter().map(|p| num(*p)))
                .collect()
        })
        .collect();
    io::write_csv(&dir.join("posterior.csv"), &header, &rows)?;

    let rows: Vec<Vec<String>> = best
        .elbo_trace
        .iter()
        .enumerate()
        .map(|(t, v)| vec![(t + 1).to_string(), num(*v)])
        .collect();
    io::write_csv(&dir.join("elbo_trace.csv"), &["iteration".into(), "elbo".into()], &rows)?;

    let rows: Vec<Vec<String>> = summaries
        .iter()
        .map(|s| {
            let e = GridEntry::from(s);
            vec![
                e.g.to_string(),
                e.k.to_string(),
                e.model.to_string(),
                e.bic.map(num).unwrap_or_default(),
                e.icl.map(num).unwrap_or_default(),
                e.loglik_approx.map(num).unwrap_or_default(),
                e.free_params.map(|p| p.to_string()).unwrap_or_default(),
                e.converged.map(|c| c.to_string()).unwrap_or_default(),
                e.error.unwrap_or_default(),
            ]
        })
        .collect();
    io::write_csv(
        &dir.join("grid.csv"),
        &["g", "k", "model", "bic", "icl", "loglik_approx", "free_params", "converged", "error"]
            .map(String::from),
        &rows,
    )?;

    // per-sample log-scale expression for external heatmaps
    let transformed = log_transform(counts, factors)?;
    let d = counts.d();
    let mut header = vec!["sample_id".to_string(), "cluster".to_string()];
    header.extend(counts.variable_ids().iter().cloned());
    let mut order: Vec<usize> = (0..counts.n()).collect();
    order.sort_by_key(|&i| (best.assignments[i], i));
    let rows: Vec<Vec<String>> = order
        .iter()
        .map(|&i| {
            [counts.sample_ids()[i].clone(), (best.assignments[i] + 1).to_string()]
                .into_iter()
                .chain(transformed[i * d..(i + 1) * d].iter().map(|v| num(*v)))
                .collect()
        })
        .collect();
    io::write_csv(&dir.join("plot_data.csv"), &header, &rows)
}

#[derive(Debug, Clone)]
pub struct SimulateArgs {
    pub preset: Option<String>,
    /// Parameter JSON in the `truth.json` `parameters` format.
    pub params: Option<PathBuf>,
    pub n: Option<usize>,
    pub replicates: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
}

/// Ground truth written next to each simulated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthFile {
    pub preset: Option<String>,
    pub seed: u64,
    pub replicate: u64,
    pub n: usize,
    /// 1-based component labels in sample order.
    pub labels: Vec<usize>,
    pub parameters: MixtureJson,
}

pub fn replicate_dir(root: &Path, replicate: usize) -> PathBuf {
    root.join(format!("replicate_{:03}", replicate + 1))
}

pub fn run_simulate(args: &SimulateArgs) -> CliResult<Vec<PathBuf>> {
    if args.replicates == 0 {
        return invalid("--replicates must be at least 1");
    }
    let (preset, truth, n) = match (&args.preset, &args.params) {
        (Some(name), None) => {
            let p = Preset::from_name(name)?;
            (Some(p.name().to_string()), p.truth(), args.n.unwrap_or(p.n()))
        }
        (None, Some(path)) => {
            let json: MixtureJson = io::read_json(path)?;
            let Some(n) = args.n else {
                return invalid("--n is required with --params");
            };
            (None, json.to_model()?, n)
        }
        (Some(_), Some(_)) => return invalid("use either --preset or --params, not both"),
        (None, None) => return invalid("one of --preset or --params is required"),
    };
    if n == 0 {
        return invalid("--n must be at least 1");
    }
    let data = mplnfa::par::map_range(args.replicates, |r| {
        mplnfa::generate(&SimulationConfig {
            n,
            truth: truth.clone(),
            factors: None,
            seed: args.seed,
            replicate: r as u64,
        })
    });
    let params = MixtureJson::from(&truth);
    let mut dirs = Vec::with_capacity(args.replicates);
    for (r, sim) in data.into_iter().enumerate() {
        let sim = sim?;
        let dir = replicate_dir(&args.out_dir, r);
        io::ensure_dir(&dir)?;
        io::write_counts(&dir.join(COUNTS_FILE), &sim.counts)?;
        io::write_json(
            &dir.join(TRUTH_FILE),
            &TruthFile {
                preset: preset.clone(),
                seed: args.seed,
                replicate: r as u64,
                n,
                labels: sim.labels.iter().map(|l| l + 1).collect(),
                parameters: params.clone(),
            },
        )?;
        dirs.push(dir);
    }
    Ok(dirs)
}

#[derive(Debug, Clone)]
pub struct EvaluateArgs {
    pub fits: PathBuf,
    pub truth: PathBuf,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateScore {
    pub replicate: String,
    pub ari: f64,
    pub g: usize,
    pub k: usize,
    pub model: ModelId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionCount {
    pub g: usize,
    pub k: usize,
    pub model: ModelId,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryRow {
    pub component: usize,
    pub true_mu: Vec<f64>,
    pub mean_mu: Vec<f64>,
    pub sd_mu: Vec<f64>,
    pub mean_mse_sigma: f64,
    pub max_mse_sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub replicates: Vec<ReplicateScore>,
    pub ari_mean: f64,
    pub ari_sd: f64,
    pub selection_frequency: Vec<SelectionCount>,
    /// Replicates whose selected `G` equals the true `G`; only these enter
    /// the recovery table.
    pub recovery_replicates: usize,
    pub recovery: Vec<RecoveryRow>,
}

/// Sorted subdirectories of `root` that contain `file`.
fn replicate_files(root: &Path, file: &str) -> CliResult<Vec<(String, PathBuf)>> {
    let entries = std::fs::read_dir(root)
        .map_err(|e| CliError::Validation(format!("cannot read {}: {e}", root.display())))?;
    let mut out = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| CliError::Validation(format!("{}: {e}", root.display())))?;
        let path = entry.path().join(file);
        if path.is_file() {
            out.push((entry.file_name().to_string_lossy().into_owned(), path));
        }
    }
    out.sort();
    Ok(out)
}

pub fn run_evaluate(args: &EvaluateArgs) -> CliResult<Evaluation> {
    let fits = replicate_files(&args.fits, REPORT_FILE)?;
    let truths = replicate_files(&args.truth, TRUTH_FILE)?;
    if fits.is_empty() {
        return invalid(format!("no */{REPORT_FILE} under {}", args.fits.display()));
    }
    if fits.len() != truths.len() {
        return invalid(format!(
            "mismatched replicate counts: {} fits vs {} truths",
            fits.len(),
            truths.len()
        ));
    }
    let mut scores = Vec::with_capacity(fits.len());
    let mut matched_fits: Vec<MixtureModel> = Vec::new();
    let mut truth_model: Option<MixtureModel> = None;
    for ((name, fit_path), (_, truth_path)) in fits.iter().zip(&truths) {
        let report: RunReport = io::read_json(fit_path)?;
        let truth: TruthFile = io::read_json(truth_path)?;
        let fitted = report.assignments();
        if fitted.len() != truth.labels.len() {
            return invalid(format!(
                "{name}: {} fitted samples vs {} true labels",
                fitted.len(),
                truth.labels.len()
            ));
        }
        scores.push(ReplicateScore {
            replicate: name.clone(),
            ari: ari(&fitted, &truth.labels)?,
            g: report.selected.g,
            k: report.selected.k,
            model: report.selected.model,
        });
        let true_params = truth.parameters.to_model()?;
        let estimate = report.parameters.to_model()?;
        if estimate.g() == true_params.g() && estimate.d() == true_params.d() {
            matched_fits.push(estimate);
        }
        truth_model.get_or_insert(true_params);
    }
    let r = scores.len() as f64;
    let ari_mean = scores.iter().map(|s| s.ari).sum::<f64>() / r;
    let ari_sd = if scores.len() > 1 {
        (scores.iter().map(|s| (s.ari - ari_mean).powi(2)).sum::<f64>() / (r - 1.0)).sqrt()
    } else {
        0.0
    };
    let mut selection: Vec<SelectionCount> = Vec::new();
    for s in &scores {
        match selection.iter_mut().find(|c| (c.g, c.k, c.model) == (s.g, s.k, s.model)) {
            Some(c) => c.count += 1,
            None => selection.push(SelectionCount {
                g: s.g,
                k: s.k,
                model: s.model,
                count: 1,
            }),
        }
    }
    selection.sort_by(|a, b| b.count.cmp(&a.count).then((a.g, a.k, a.model).cmp(&(b.g, b.k, b.model))));
    let recovery = match (&truth_model, matched_fits.is_empty()) {
        (Some(truth), false) => recovery_report(&matched_fits, truth)?
            .into_iter()
            .enumerate()
            .map(|(g, c)| RecoveryRow {
                component: g + 1,
                true_mu: c.true_mu.iter().copied().collect(),
                mean_mu: c.mean_mu.iter().copied().collect(),
                sd_mu: c.sd_mu.iter().copied().collect(),
                mean_mse_sigma: c.mean_mse_sigma,
                max_mse_sigma: c.max_mse_sigma,
            })
            .collect(),
        _ => Vec::new(),
    };
    let evaluation = Evaluation {
        replicates: scores,
        ari_mean,
        ari_sd,
        selection_frequency: selection,
        recovery_replicates: matched_fits.len(),
        recovery,
    };
    io::ensure_dir(&args.out_dir)?;
    io::write_json(&args.out_dir.join("evaluation.json"), &evaluation)?;
    let rows: Vec<Vec<String>> = evaluation
        .replicates
        .iter()
        .map(|s| vec![s.replicate.clone(), num(s.ari), s.g.to_string(), s.k.to_string(), s.model.to_string()])
        .collect();
    io::write_csv(
        &args.out_dir.join("ari.csv"),
        &["replicate", "ari", "g", "k", "model"].map(String::from),
        &rows,
    )?;
    Ok(evaluation)
}
