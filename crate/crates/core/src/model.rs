//! Domain types, the eight-model constraint family and parameter counting.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{invalid, Error, Result};

/// `n × d` matrix of non-negative integer counts (samples × variables).
#[derive(Debug, Clone, PartialEq)]
pub struct CountMatrix {
    n: usize,
    d: usize,
    values: Vec<u64>,
    sample_ids: Vec<String>,
    variable_ids: Vec<String>,
}

impl CountMatrix {
    /// Build from row-major values.
    pub fn new(
        values: Vec<u64>,
        sample_ids: Vec<String>,
        variable_ids: Vec<String>,
    ) -> Result<Self> {
        let n = sample_ids.len();
        let d = variable_ids.len();
        if n == 0 || d == 0 {
            return invalid(format!("count matrix must be non-empty (got {n}×{d})"));
        }
        if values.len() != n * d {
            return invalid(format!(
                "count matrix has {} entries, expected {n}×{d}",
                values.len()
            ));
        }
        Ok(Self {
            n,
            d,
            values,
            sample_ids,
            variable_ids,
        })
    }

    /// Build from rows with generated identifiers (`s1..`, `v1..`).
    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return invalid("ragged rows");
        }
        Self::new(
            rows.concat(),
            (1..=n).map(|i| format!("s{i}")).collect(),
            (1..=d).map(|j| format!("v{j}")).collect(),
        )
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn get(&self, i: usize, j: usize) -> u64 {
        self.values[i * self.d + j]
    }

    pub fn row(&self, i: usize) -> &[u64] {
        &self.values[i * self.d..(i + 1) * self.d]
    }

    pub fn values(&self) -> &[u64] {
        &self.values
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn variable_ids(&self) -> &[String] {
        &self.variable_ids
    }

    pub fn row_sums(&self) -> Vec<u64> {
        (0..self.n).map(|i| self.row(i).iter().sum()).collect()
    }
}

/// Per-sample library-size constants `C_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizationFactors {
    c: Vec<f64>,
}

impl NormalizationFactors {
    pub fn new(c: Vec<f64>) -> Result<Self> {
        if c.is_empty() {
            return invalid("normalization factors must be non-empty");
        }
        if let Some((i, v)) = c.iter().enumerate().find(|(_, v)| !(**v > 0.0 && v.is_finite())) {
            return invalid(format!(
                "normalization factor for sample {} must be positive, got {v}",
                i + 1
            ));
        }
        Ok(Self { c })
    }

    /// All factors equal to one.
    pub fn ones(n: usize) -> Self {
        Self { c: vec![1.0; n] }
    }

    pub fn values(&self) -> &[f64] {
        &self.c
    }

    pub fn len(&self) -> usize {
        self.c.len()
    }

    pub fn is_empty(&self) -> bool {
        self.c.is_empty()
    }

    pub(crate) fn check_against(&self, data: &CountMatrix) -> Result<()> {
        if self.c.len() != data.n() {
            return invalid(format!(
                "{} normalization factors for {} samples",
                self.c.len(),
                data.n()
            ));
        }
        Ok(())
    }
}

/// One of the eight parsimonious covariance models. The three letters give,
/// in order, the loading constraint (`Λ_g = Λ`), the error-variance equality
/// constraint (`Ψ_g = Ψ`) and the isotropy constraint (`Ψ_g = ψ_g I`), with
/// `C` for constrained and `U` for unconstrained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ModelId {
    pub lambda_constrained: bool,
    pub psi_constrained: bool,
    pub psi_isotropic: bool,
}

impl ModelId {
    pub const UUU: ModelId = ModelId::from_flags(false, false, false);
    pub const UUC: ModelId = ModelId::from_flags(false, false, true);
    pub const UCU: ModelId = ModelId::from_flags(false, true, false);
    pub const UCC: ModelId = ModelId::from_flags(false, true, true);
    pub const CUU: ModelId = ModelId::from_flags(true, false, false);
    pub const CUC: ModelId = ModelId::from_flags(true, false, true);
    pub const CCU: ModelId = ModelId::from_flags(true, true, false);
    pub const CCC: ModelId = ModelId::from_flags(true, true, true);

    /// All eight models in table order.
    pub const ALL: [ModelId; 8] = [
        Self::UUU,
        Self::UUC,
        Self::UCU,
        Self::UCC,
        Self::CUU,
        Self::CUC,
        Self::CCU,
        Self::CCC,
    ];

    pub const fn from_flags(lambda: bool, psi_equal: bool, isotropic: bool) -> Self {
        Self {
            lambda_constrained: lambda,
            psi_constrained: psi_equal,
            psi_isotropic: isotropic,
        }
    }

    /// Position in table order (UUU = 0 … CCC = 7).
    pub fn index(self) -> usize {
        (self.lambda_constrained as usize) << 2
            | (self.psi_constrained as usize) << 1
            | self.psi_isotropic as usize
    }

    pub fn code(self) -> &'static str {
        ["UUU", "UUC", "UCU", "UCC", "CUU", "CUC", "CCU", "CCC"][self.index()]
    }

    /// Parse a comma-separated list, or `all`.
    pub fn parse_list(s: &str) -> Result<Vec<ModelId>> {
        if s.trim().eq_ignore_ascii_case("all") {
            return Ok(Self::ALL.to_vec());
        }
        let mut out: Vec<ModelId> = s
            .split(',')
            .map(|t| t.trim().parse())
            .collect::<Result<_>>()?;
        out.sort();
        out.dedup();
        if out.is_empty() {
            return invalid("empty model list");
        }
        Ok(out)
    }
}

impl fmt::Display for ModelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for ModelId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let b = s.as_bytes();
        let flag = |c: u8| match c {
            b'C' => Some(true),
            b'U' => Some(false),
            _ => None,
        };
        if b.len() == 3 {
            if let (Some(l), Some(p), Some(i)) = (flag(b[0]), flag(b[1]), flag(b[2])) {
                return Ok(Self::from_flags(l, p, i));
            }
        }
        Err(Error::UnknownModel(s.to_string()))
    }
}

impl Serialize for ModelId {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.code())
    }
}

impl<'de> Deserialize<'de> for ModelId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Parameters of one mixture component. `psi` holds the diagonal of `Ψ_g`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentParams {
    pub pi: f64,
    pub mu: DVector<f64>,
    pub lambda: DMatrix<f64>,
    pub psi: DVector<f64>,
}

impl ComponentParams {
    pub fn new(pi: f64, mu: DVector<f64>, lambda: DMatrix<f64>, psi: DVector<f64>) -> Result<Self> {
        let d = mu.len();
        if lambda.nrows() != d || psi.len() != d {
            return invalid("component parameter dimensions disagree");
        }
        if lambda.ncols() == 0 || lambda.ncols() > d {
            return invalid(format!(
                "number of factors must satisfy 1 ≤ K ≤ d (K = {}, d = {d})",
                lambda.ncols()
            ));
        }
        if !(pi > 0.0 && pi <= 1.0) {
            return invalid(format!("mixing weight {pi} outside (0, 1]"));
        }
        if psi.iter().any(|v| !(*v > 0.0)) {
            return invalid("error variances must be positive");
        }
        Ok(Self {
            pi,
            mu,
            lambda,
            psi,
        })
    }

    pub fn d(&self) -> usize {
        self.mu.len()
    }

    pub fn k(&self) -> usize {
        self.lambda.ncols()
    }

    pub fn sigma(&self) -> DMatrix<f64> {
        assemble_sigma(self)
    }
}

/// `Σ = ΛΛᵀ + diag(ψ)`.
pub fn assemble_sigma(c: &ComponentParams) -> DMatrix<f64> {
    sigma_from(&c.lambda, &c.psi)
}

pub(crate) fn sigma_from(lambda: &DMatrix<f64>, psi: &DVector<f64>) -> DMatrix<f64> {
    let mut sigma = lambda * lambda.transpose();
    for j in 0..psi.len() {
        sigma[(j, j)] += psi[j];
    }
    sigma
}

/// A fitted or true mixture of MPLN factor analyzers.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureModel {
    pub model_id: ModelId,
    pub components: Vec<ComponentParams>,
}

impl MixtureModel {
    /// Validates the mixing weights and the constraint pattern of `model_id`.
    pub fn new(model_id: ModelId, components: Vec<ComponentParams>) -> Result<Self> {
        let Some(first) = components.first() else {
            return invalid("mixture needs at least one component");
        };
        let (d, k) = (first.d(), first.k());
        if components.iter().any(|c| c.d() != d || c.k() != k) {
            return invalid("components have inconsistent dimensions");
        }
        let total: f64 = components.iter().map(|c| c.pi).sum();
        if (total - 1.0).abs() > 1e-10 {
            return invalid(format!("mixing weights sum to {total}, expected 1"));
        }
        if model_id.lambda_constrained && components.iter().any(|c| c.lambda != first.lambda) {
            return invalid(format!("{model_id}: loading matrices must be shared"));
        }
        if model_id.psi_constrained && components.iter().any(|c| c.psi != first.psi) {
            return invalid(format!("{model_id}: error variances must be shared"));
        }
        if model_id.psi_isotropic
            && components
                .iter()
                .any(|c| c.psi.iter().any(|v| *v != c.psi[0]))
        {
            return invalid(format!("{model_id}: error variances must be isotropic"));
        }
        Ok(Self {
            model_id,
            components,
        })
    }

    pub fn g(&self) -> usize {
        self.components.len()
    }

    pub fn d(&self) -> usize {
        self.components[0].d()
    }

    pub fn k(&self) -> usize {
        self.components[0].k()
    }

    pub fn pi(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.pi).collect()
    }

    pub fn sigmas(&self) -> Vec<DMatrix<f64>> {
        self.components.iter().map(assemble_sigma).collect()
    }

    /// Reorder components: new component `g` is old component `order[g]`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            model_id: self.model_id,
            components: order.iter().map(|&g| self.components[g].clone()).collect(),
        }
    }
}

/// Variational parameters and responsibilities of a fit.
///
/// `m`, `s` and `p` are flat buffers indexed by `(i, g)`; use the accessors.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalState {
    pub n: usize,
    pub g: usize,
    pub d: usize,
    pub k: usize,
    pub m: Vec<f64>,
    pub s: Vec<f64>,
    pub p: Vec<f64>,
    pub q: Vec<DMatrix<f64>>,
    pub zhat: DMatrix<f64>,
    pub f: DMatrix<f64>,
}

impl VariationalState {
    pub fn zeros(n: usize, g: usize, d: usize, k: usize) -> Self {
        Self {
            n,
            g,
            d,
            k,
            m: vec![0.0; n * g * d],
            s: vec![0.0; n * g * d * d],
            p: vec![0.0; n * g * k],
            q: vec![DMatrix::identity(k, k); g],
            zhat: DMatrix::zeros(n, g),
            f: DMatrix::zeros(n, g),
        }
    }

    pub fn m(&self, i: usize, g: usize) -> &[f64] {
        let off = (i * self.g + g) * self.d;
        &self.m[off..off + self.d]
    }

    pub fn s(&self, i: usize, g: usize) -> &[f64] {
        let dd = self.d * self.d;
        let off = (i * self.g + g) * dd;
        &self.s[off..off + dd]
    }

    pub fn p(&self, i: usize, g: usize) -> &[f64] {
        let off = (i * self.g + g) * self.k;
        &self.p[off..off + self.k]
    }

    pub fn m_vector(&self, i: usize, g: usize) -> DVector<f64> {
        DVector::from_column_slice(self.m(i, g))
    }

    pub fn s_matrix(&self, i: usize, g: usize) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.d, self.d, self.s(i, g))
    }

    /// Hard labels, `argmax_g ẑ_ig` with ties to the lowest index.
    pub fn assignments(&self) -> Vec<usize> {
        (0..self.n)
            .map(|i| {
                let mut best = 0;
                for g in 1..self.g {
                    if self.zhat[(i, g)] > self.zhat[(i, best)] {
                        best = g;
                    }
                }
                best
            })
            .collect()
    }
}

fn loading_count(d: usize, k: usize) -> usize {
    d * k - k * (k - 1) / 2
}

fn check_dims(d: usize, k: usize, g: usize) -> Result<()> {
    if k == 0 {
        return invalid("number of factors K must be at least 1");
    }
    if k > d {
        return invalid(format!("number of factors K = {k} exceeds dimension d = {d}"));
    }
    if g == 0 {
        return invalid("number of components G must be at least 1");
    }
    Ok(())
}

/// Number of free covariance parameters of a model.
pub fn covariance_param_count(model_id: ModelId, d: usize, k: usize, g: usize) -> Result<usize> {
    check_dims(d, k, g)?;
    let loadings = if model_id.lambda_constrained {
        loading_count(d, k)
    } else {
        g * loading_count(d, k)
    };
    let variances = match (model_id.psi_constrained, model_id.psi_isotropic) {
        (false, false) => g * d,
        (false, true) => g,
        (true, false) => d,
        (true, true) => 1,
    };
    Ok(loadings + variances)
}

/// Mixing weights, means and covariance parameters together.
pub fn total_free_params(model_id: ModelId, d: usize, k: usize, g: usize) -> Result<usize> {
    Ok((g - 1) + g * d + covariance_param_count(model_id, d, k, g)?)
}
