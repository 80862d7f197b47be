//! Exact oracle values for a JSON query.

use paircam::oracle::{
    emccd_moments, p_electrons_given_pairs, p_joint_electrons_given_pairs,
    p_joint_photons_given_pairs, p_photons_given_pairs, spc_moments_general,
    PairCountDistribution, PixelPair, SinglePixel,
};
use serde::Deserialize;
use serde_json::{json, Value};

use crate::config::{NoisePreset, NoiseSpec};
use crate::error::CliError;

/// The `Γ` quantities of a pixel pair; absent entries are zero.
#[derive(Debug, Clone, Copy, Default, Deserialize)]
pub struct PairArgs {
    #[serde(default, alias = "Γ_i")]
    pub gamma_i: f64,
    #[serde(default, alias = "Γ_j")]
    pub gamma_j: f64,
    #[serde(default, alias = "Γ_ii")]
    pub gamma_ii: f64,
    #[serde(default, alias = "Γ_jj")]
    pub gamma_jj: f64,
    #[serde(default, alias = "Γ_ij")]
    pub gamma_ij: f64,
}

impl PairArgs {
    fn pair(&self) -> PixelPair {
        PixelPair::new(self.gamma_i, self.gamma_j, self.gamma_ii, self.gamma_jj, self.gamma_ij)
    }
}

fn reference_noise() -> NoiseSpec {
    NoiseSpec::Preset(NoisePreset::Reference)
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Query {
    PPhotonsGivenPairs {
        #[serde(alias = "Γ_i")]
        gamma_i: f64,
        #[serde(default, alias = "Γ_ii")]
        gamma_ii: f64,
        n: usize,
        m: usize,
    },
    PElectronsGivenPairs {
        #[serde(alias = "Γ_i")]
        gamma_i: f64,
        #[serde(default, alias = "Γ_ii")]
        gamma_ii: f64,
        eta: f64,
        k: usize,
        m: usize,
    },
    PJointPhotonsGivenPairs {
        #[serde(flatten)]
        pair: PairArgs,
        n_i: usize,
        n_j: usize,
        m: usize,
    },
    PJointElectronsGivenPairs {
        #[serde(flatten)]
        pair: PairArgs,
        eta: f64,
        k_i: usize,
        k_j: usize,
        m: usize,
    },
    /// Binary-pixel moments; Poisson pairs unless `pair_variance` is given.
    SpcMoments {
        #[serde(flatten)]
        pair: PairArgs,
        eta: f64,
        mean_pairs: f64,
        p10: f64,
        pair_variance: Option<f64>,
    },
    /// Linear-response moments for the given EMCCD noise parameters.
    EmccdMoments {
        #[serde(flatten)]
        pair: PairArgs,
        eta: f64,
        mean_pairs: f64,
        pair_variance: Option<f64>,
        #[serde(default = "reference_noise")]
        noise: NoiseSpec,
    },
    ExceedanceProbability {
        #[serde(default = "reference_noise")]
        noise: NoiseSpec,
        k: usize,
        threshold: f64,
    },
}

pub fn parse(text: &str) -> Result<Query, CliError> {
    serde_json::from_str(text).map_err(|e| CliError::Config(format!("oracle query: {e}")))
}

/// Domain violations are errors in the query, reported verbatim.
fn query_error(e: impl Into<CliError>) -> CliError {
    match e.into() {
        CliError::Data(message) => CliError::Config(message),
        other => other,
    }
}

pub fn evaluate(query: &Query) -> Result<Value, CliError> {
    let value = match *query {
        Query::PPhotonsGivenPairs { gamma_i, gamma_ii, n, m } => json!({
            "op": "p_photons_given_pairs",
            "value": p_photons_given_pairs(SinglePixel::new(gamma_i, gamma_ii), n, m).map_err(query_error)?,
        }),
        Query::PElectronsGivenPairs { gamma_i, gamma_ii, eta, k, m } => json!({
            "op": "p_electrons_given_pairs",
            "value": p_electrons_given_pairs(SinglePixel::new(gamma_i, gamma_ii), eta, k, m).map_err(query_error)?,
        }),
        Query::PJointPhotonsGivenPairs { pair, n_i, n_j, m } => json!({
            "op": "p_joint_photons_given_pairs",
            "value": p_joint_photons_given_pairs(pair.pair(), n_i, n_j, m).map_err(query_error)?,
        }),
        Query::PJointElectronsGivenPairs { pair, eta, k_i, k_j, m } => json!({
            "op": "p_joint_electrons_given_pairs",
            "value": p_joint_electrons_given_pairs(pair.pair(), eta, k_i, k_j, m).map_err(query_error)?,
        }),
        Query::SpcMoments { pair, eta, mean_pairs, p10, pair_variance } => {
            let counts = match pair_variance {
                Some(v) => PairCountDistribution::with_moments(mean_pairs, v).map_err(query_error)?,
                None => PairCountDistribution::poisson(mean_pairs),
            };
            let m = spc_moments_general(pair.pair(), eta, &counts, p10).map_err(query_error)?;
            json!({ "op": "spc_moments", "mean_i": m.mean_i, "mean_j": m.mean_j, "mean_ij": m.mean_ij })
        }
        Query::EmccdMoments { pair, eta, mean_pairs, pair_variance, noise } => {
            let response = noise.params().linear_response();
            let m = emccd_moments(pair.pair(), eta, mean_pairs, pair_variance.unwrap_or(mean_pairs), &response)
                .map_err(query_error)?;
            json!({
                "op": "emccd_moments",
                "mean_i": m.mean_i,
                "mean_j": m.mean_j,
                "mean_ij": m.mean_ij,
                "mean_sq_i": m.mean_sq_i,
                "mean_sq_j": m.mean_sq_j,
                "offset": response.offset,
                "conversion_gain": response.gain,
            })
        }
        Query::ExceedanceProbability { noise, k, threshold } => json!({
            "op": "exceedance_probability",
            "value": noise.params().exceedance_probability(k, threshold).map_err(query_error)?,
        }),
    };
    Ok(value)
}
