//! Synthetic data from the MPLNFA hierarchy and the built-in simulation
//! settings.

use nalgebra::{DMatrix, DVector};
use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Poisson, StandardNormal};

use crate::error::{invalid, Error, Result};
use crate::model::{ComponentParams, CountMatrix, MixtureModel, ModelId, NormalizationFactors};

/// Everything needed to draw one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationConfig {
    pub n: usize,
    /// True parameters; carries `G`, `K`, `d`, `π`, `μ`, `Λ`, `Ψ` and the model.
    pub truth: MixtureModel,
    /// Per-sample normalization constants; all ones when `None`.
    pub factors: Option<NormalizationFactors>,
    pub seed: u64,
    /// Replicate index; selects an independent stream of the seeded RNG.
    pub replicate: u64,
}

/// A generated dataset.
#[derive(Debug, Clone)]
pub struct SimulatedData {
    pub counts: CountMatrix,
    pub factors: NormalizationFactors,
    pub labels: Vec<usize>,
    /// Latent log-rates `x_i`, row-major `n × d`.
    pub latent: Vec<f64>,
    pub truth: MixtureModel,
}

/// Draw labels, latent factors, log-rates and counts.
///
/// `z ~ Cat(π)`, `u ~ N(0, I_K)`, `x | u ~ N(μ_g + Λ_g u, Ψ_g)`,
/// `y_j | x ~ Poisson(exp(x_j + log C_i))`.
pub fn generate(config: &SimulationConfig) -> Result<SimulatedData> {
    let n = config.n;
    if n == 0 {
        return invalid("simulation needs n ≥ 1");
    }
    let truth = &config.truth;
    let (d, k) = (truth.d(), truth.k());
    let factors = match &config.factors {
        Some(f) if f.len() != n => {
            return invalid(format!("{} normalization factors for n = {n}", f.len()))
        }
        Some(f) => f.clone(),
        None => NormalizationFactors::ones(n),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(config.replicate);
    let pick = WeightedIndex::new(truth.pi()).map_err(|e| Error::Invalid(e.to_string()))?;
    let sds: Vec<Vec<f64>> = truth
        .components
        .iter()
        .map(|c| c.psi.iter().map(|v| v.sqrt()).collect())
        .collect();

    let mut labels = Vec::with_capacity(n);
    let mut latent = Vec::with_capacity(n * d);
    let mut values = Vec::with_capacity(n * d);
    let mut u = DVector::zeros(k);
    for i in 0..n {
        let g = pick.sample(&mut rng);
        labels.push(g);
        let comp = &truth.components[g];
        for v in u.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let mean = &comp.mu + &comp.lambda * &u;
        let log_c = factors.values()[i].ln();
        for j in 0..d {
            let e: f64 = rng.sample(StandardNormal);
            let x = mean[j] + sds[g][j] * e;
            latent.push(x);
            values.push(poisson(&mut rng, (x + log_c).exp())?);
        }
    }
    let counts = CountMatrix::new(
        values,
        (1..=n).map(|i| format!("s{i}")).collect(),
        (1..=d).map(|j| format!("v{j}")).collect(),
    )?;
    Ok(SimulatedData {
        counts,
        factors,
        labels,
        latent,
        truth: truth.clone(),
    })
}

fn poisson<R: Rng>(rng: &mut R, rate: f64) -> Result<u64> {
    if !rate.is_finite() {
        return Err(Error::NonFinite("simulated Poisson rate"));
    }
    if rate <= 0.0 {
        return Ok(0);
    }
    let dist = Poisson::new(rate).map_err(|e| Error::Invalid(e.to_string()))?;
    Ok(dist.sample(rng) as u64)
}

/// The three simulation settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Setting1,
    Setting2,
    Setting3,
}

const SETTING1_MU: [[f64; 8]; 4] = [
    [6., 3., 3., 6., 3., 6., 3., 3.],
    [1., 3., 5., 1., 3., 5., 3., 5.],
    [4., 2., 6., 4., 2., 6., 4., 4.],
    [5., 3., 5., 3., 5., 3., 3., 5.],
];
const SETTING2_MU: [[f64; 10]; 2] = [
    [6., 3., 3., 6., 3., 6., 3., 3., 6., 3.],
    [5., 3., 5., 3., 5., 5., 3., 5., 3., 5.],
];
const SETTING3_MU: [[f64; 10]; 3] = [
    [4., 6., 4., 2., 2., 4., 6., 4., 6., 2.],
    [5., 5., 3., 3., 7., 5., 3., 3., 7., 7.],
    [2., 4., 4., 7., 2., 4., 7., 2., 7., 4.],
];

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::Setting1, Preset::Setting2, Preset::Setting3];

    /// `"setting1"`, `"setting2"` or `"setting3"`.
    pub fn from_name(name: &str) -> Result<Self> {
        match name.trim().to_ascii_lowercase().as_str() {
            "setting1" => Ok(Preset::Setting1),
            "setting2" => Ok(Preset::Setting2),
            "setting3" => Ok(Preset::Setting3),
            other => invalid(format!(
                "unknown preset '{other}' (expected setting1, setting2 or setting3)"
            )),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Setting1 => "setting1",
            Preset::Setting2 => "setting2",
            Preset::Setting3 => "setting3",
        }
    }

    pub fn n(self) -> usize {
        1000
    }

    pub fn g(self) -> usize {
        self.pi().len()
    }

    pub fn k(self) -> usize {
        match self {
            Preset::Setting1 => 2,
            Preset::Setting2 => 3,
            Preset::Setting3 => 4,
        }
    }

    pub fn d(self) -> usize {
        self.mu()[0].len()
    }

    pub fn model_id(self) -> ModelId {
        match self {
            Preset::Setting1 => ModelId::UCC,
            Preset::Setting2 => ModelId::CCC,
            Preset::Setting3 => ModelId::UUU,
        }
    }

    pub fn pi(self) -> Vec<f64> {
        match self {
            Preset::Setting1 => vec![0.11, 0.43, 0.24, 0.22],
            Preset::Setting2 => vec![0.32, 0.68],
            Preset::Setting3 => vec![0.23, 0.44, 0.33],
        }
    }

    pub fn mu(self) -> Vec<Vec<f64>> {
        match self {
            Preset::Setting1 => SETTING1_MU.iter().map(|r| r.to_vec()).collect(),
            Preset::Setting2 => SETTING2_MU.iter().map(|r| r.to_vec()).collect(),
            Preset::Setting3 => SETTING3_MU.iter().map(|r| r.to_vec()).collect(),
        }
    }

    fn parameter_seed(self) -> u64 {
        match self {
            Preset::Setting1 => 0x5e77_0001,
            Preset::Setting2 => 0x5e77_0002,
            Preset::Setting3 => 0x5e77_0003,
        }
    }

    /// True parameters. `Λ` entries are uniform on `[−1, 1]` and `ψ` entries
    /// uniform on `[0.25, 1]`, drawn from a fixed per-preset seed and shared
    /// or made isotropic as the preset's model requires.
    pub fn truth(self) -> MixtureModel {
        let mut rng = ChaCha8Rng::seed_from_u64(self.parameter_seed());
        let (d, k, gs) = (self.d(), self.k(), self.g());
        let id = self.model_id();
        let lambdas = draw_shared(gs, id.lambda_constrained, || {
            DMatrix::from_fn(d, k, |_, _| rng.gen_range(-1.0..=1.0))
        });
        let psis = draw_shared(gs, id.psi_constrained, || {
            if id.psi_isotropic {
                DVector::from_element(d, rng.gen_range(0.25..=1.0))
            } else {
                DVector::from_fn(d, |_, _| rng.gen_range(0.25..=1.0))
            }
        });
        let components = self
            .pi()
            .into_iter()
            .zip(self.mu())
            .zip(lambdas.into_iter().zip(psis))
            .map(|((pi, mu), (l, p))| ComponentParams::new(pi, DVector::from_vec(mu), l, p))
            .collect::<Result<Vec<_>>>()
            .expect("preset parameters are valid");
        MixtureModel::new(id, components).expect("preset parameters honor their model")
    }

    /// Config for replicate `replicate` of this preset under `seed`.
    pub fn config(self, seed: u64, replicate: u64) -> SimulationConfig {
        SimulationConfig {
            n: self.n(),
            truth: self.truth(),
            factors: None,
            seed,
            replicate,
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::from_name(s)
    }
}

fn draw_shared<T: Clone>(g: usize, shared: bool, mut draw: impl FnMut() -> T) -> Vec<T> {
    if shared {
        vec![draw(); g]
    } else {
        (0..g).map(|_| draw()).collect()
    }
}
