//! JSON representation of mixture parameters.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use mplnfa::{ComponentParams, MixtureModel, ModelId};

use crate::CliResult;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentJson {
    pub pi: f64,
    pub mu: Vec<f64>,
    /// `d` rows of `K` loadings.
    pub lambda: Vec<Vec<f64>>,
    pub psi: Vec<f64>,
    /// `ΛΛᵀ + Ψ`; written for convenience and ignored on read.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sigma: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureJson {
    pub model: ModelId,
    pub g: usize,
    pub k: usize,
    pub d: usize,
    pub components: Vec<ComponentJson>,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

impl From<&MixtureModel> for MixtureJson {
    fn from(model: &MixtureModel) -> Self {
        Self {
            model: model.model_id,
            g: model.g(),
            k: model.k(),
            d: model.d(),
            components: model
                .components
                .iter()
                .map(|c| ComponentJson {
                    pi: c.pi,
                    mu: c.mu.iter().copied().collect(),
                    lambda: rows(&c.lambda),
                    psi: c.psi.iter().copied().collect(),
                    sigma: rows(&c.sigma()),
                })
                .collect(),
        }
    }
}

impl MixtureJson {
    pub fn to_model(&self) -> CliResult<MixtureModel> {
        let components = self
            .components
            .iter()
            .map(|c| {
                let d = c.mu.len();
                let k = c.lambda.first().map_or(0, Vec::len);
                if c.lambda.len() != d || c.lambda.iter().any(|r| r.len() != k) {
                    return Err(mplnfa::Error::Invalid(format!(
                        "loading matrix must have {d} rows of equal length"
                    )));
                }
                ComponentParams::new(
                    c.pi,
                    DVector::from_vec(c.mu.clone()),
                    DMatrix::from_row_iterator(d, k, c.lambda.iter().flatten().copied()),
                    DVector::from_vec(c.psi.clone()),
                )
            })
            .collect::<mplnfa::Result<Vec<_>>>()?;
        Ok(MixtureModel::new(self.model, components)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use mplnfa::Preset;

    #[test]
    fn json_round_trip() {
        for p in Preset::ALL {
            let truth = p.truth();
            let json = serde_json::to_string(&MixtureJson::from(&truth)).unwrap();
            let back: MixtureJson = serde_json::from_str(&json).unwrap();
            assert_eq!(back.to_model().unwrap(), truth);
        }
    }
}
