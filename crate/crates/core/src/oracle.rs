//! Exact conditional probabilities and moment formulas linking the joint pair
//! distribution to what a pixelated detector measures.
//!
//! Conventions: `m` is the number of pairs reaching the sensor in one frame,
//! `n` a photon count and `k` a photoelectron count at a pixel. Both photons
//! of a pair are interchangeable, so `Γ` is assumed symmetric and the
//! probability that a single pair puts one photon on each of two distinct
//! pixels `i` and `j` is `2Γ_ij`.
//!
//! The general moment functions accept any [`DetectorResponse`], so the same
//! summation serves binary (SPC) and linear (EMCCD) readouts. The closed
//! forms [`spc_moments`] and [`emccd_moments`] are the specializations for a
//! Poisson (respectively arbitrary) pair-number distribution.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{JointDistribution, PairNumberModel, SourceConfig};
use crate::numeric::{binomial, powu, CompensatedSum};

/// Cumulative mass a truncated pair-number distribution must reach.
pub const TRUNCATION_MASS: f64 = 1.0 - 1e-12;

/// Largest pair count considered before giving up on truncation.
pub const MAX_PAIRS: usize = 200;

/// Slack allowed on probability domain checks.
const DOMAIN_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("domain violation: {0}")]
    Domain(String),
    #[error("pair-number distribution still has tail mass {tail:e} at the cap m = {cap}")]
    Truncation { cap: usize, tail: f64 },
}

/// Marginal `Γ_i` and same-pixel probability `Γ_ii` of one pixel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinglePixel {
    pub marginal: f64,
    pub diagonal: f64,
}

impl SinglePixel {
    pub fn new(marginal: f64, diagonal: f64) -> Self {
        Self { marginal, diagonal }
    }

    pub fn from_distribution(jd: &JointDistribution, i: usize) -> Self {
        Self::new(jd.marginals()[i], jd.get(i, i))
    }
}

/// The five `Γ` quantities that enter every two-pixel formula (`i ≠ j`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelPair {
    pub i: SinglePixel,
    pub j: SinglePixel,
    /// `Γ_ij`.
    pub cross: f64,
}

impl PixelPair {
    pub fn new(gi: f64, gj: f64, gii: f64, gjj: f64, gij: f64) -> Self {
        Self {
            i: SinglePixel::new(gi, gii),
            j: SinglePixel::new(gj, gjj),
            cross: gij,
        }
    }

    pub fn from_distribution(jd: &JointDistribution, i: usize, j: usize) -> Self {
        let (gi, gj) = (jd.marginals()[i], jd.marginals()[j]);
        Self::new(gi, gj, jd.get(i, i), jd.get(j, j), jd.get(i, j))
    }

    /// The same pair with the roles of `i` and `j` exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            i: self.j,
            j: self.i,
            cross: self.cross,
        }
    }
}

fn check_probability(name: &str, p: f64) -> Result<f64, OracleError> {
    if p.is_nan() || p < -DOMAIN_TOLERANCE || p > 1.0 + DOMAIN_TOLERANCE {
        return Err(OracleError::Domain(format!("{name} = {p} is not a probability")));
    }
    Ok(p.clamp(0.0, 1.0))
}

/// Probabilities `p_0 = first`, `p_{k+1} = p_k · ratio(k)` until the tail is
/// negligible at double precision, renormalized to unit sum.
fn tabulate(first: f64, ratio: impl Fn(usize) -> f64) -> Result<Vec<f64>, OracleError> {
    let mut probabilities = vec![first];
    let mut cumulative = CompensatedSum::new();
    cumulative.add(first);
    loop {
        let k = probabilities.len() - 1;
        let next = probabilities[k] * ratio(k);
        // Past the mode with negligible terms; the cumulative mass itself can
        // only be trusted to a few ulp because the first term is rounded.
        if cumulative.value() >= TRUNCATION_MASS && next < 1e-18 && next <= probabilities[k] {
            break;
        }
        if k >= MAX_PAIRS {
            return Err(OracleError::Truncation {
                cap: MAX_PAIRS,
                tail: 1.0 - cumulative.value(),
            });
        }
        probabilities.push(next);
        cumulative.add(next);
    }
    let total = cumulative.value();
    Ok(probabilities.into_iter().map(|p| p / total).collect())
}

/// Outcome probabilities of a single pair relative to one pixel: both quanta
/// land there, exactly one does, or none.
#[derive(Debug, Clone, Copy)]
struct SingleOutcomes {
    two: f64,
    one: f64,
    none: f64,
}

impl SingleOutcomes {
    /// Photoelectron outcomes after each photon independently survives with
    /// probability `eta`; `eta = 1` gives the photon outcomes.
    fn new(px: SinglePixel, eta: f64) -> Result<Self, OracleError> {
        let eta = check_probability("η", eta)?;
        let gi = check_probability("Γ_i", px.marginal)?;
        let gii = check_probability("Γ_ii", px.diagonal)?;
        if gii > gi + DOMAIN_TOLERANCE {
            return Err(OracleError::Domain(format!("Γ_ii = {gii} exceeds Γ_i = {gi}")));
        }
        let e2 = eta * eta;
        Ok(Self {
            two: check_probability("η²Γ_ii", e2 * gii)?,
            one: check_probability("2ηΓ_i − 2η²Γ_ii", 2.0 * eta * gi - 2.0 * e2 * gii)?,
            none: check_probability("1 − 2ηΓ_i + η²Γ_ii", 1.0 - 2.0 * eta * gi + e2 * gii)?,
        })
    }

    /// Probability of `k` quanta at the pixel from `m` independent pairs.
    fn count_probability(&self, k: usize, m: usize) -> f64 {
        let (k, m) = (k as i64, m as i64);
        let table = binomials();
        let mut acc = CompensatedSum::new();
        for q in 0..=k / 2 {
            // q pairs contribute two quanta, k − 2q contribute one.
            let contributing = k - q;
            if contributing > m {
                continue;
            }
            acc.add(
                powu(self.two, q)
                    * powu(self.one, k - 2 * q)
                    * powu(self.none, m - contributing)
                    * table.get(contributing, q)
                    * table.get(m, contributing),
            );
        }
        acc.value()
    }
}

/// Outcome probabilities of a single pair relative to two distinct pixels.
#[derive(Debug, Clone, Copy)]
struct PairOutcomes {
    p20: f64,
    p02: f64,
    p11: f64,
    p10: f64,
    p01: f64,
    p00: f64,
}

impl PairOutcomes {
    fn new(pair: PixelPair, eta: f64) -> Result<Self, OracleError> {
        let eta = check_probability("η", eta)?;
        let gi = check_probability("Γ_i", pair.i.marginal)?;
        let gj = check_probability("Γ_j", pair.j.marginal)?;
        let gii = check_probability("Γ_ii", pair.i.diagonal)?;
        let gjj = check_probability("Γ_jj", pair.j.diagonal)?;
        let gij = check_probability("Γ_ij", pair.cross)?;
        let e2 = eta * eta;
        Ok(Self {
            p20: check_probability("P(2,0|1)", e2 * gii)?,
            p02: check_probability("P(0,2|1)", e2 * gjj)?,
            p11: check_probability("P(1,1|1)", 2.0 * e2 * gij)?,
            p10: check_probability("P(1,0|1)", 2.0 * eta * gi - 2.0 * e2 * gii - 2.0 * e2 * gij)?,
            p01: check_probability("P(0,1|1)", 2.0 * eta * gj - 2.0 * e2 * gjj - 2.0 * e2 * gij)?,
            p00: check_probability(
                "P(0,0|1)",
                1.0 - 2.0 * eta * gi - 2.0 * eta * gj + e2 * gii + e2 * gjj + 2.0 * e2 * gij,
            )?,
        })
    }

    /// Probability of `a` quanta at `i` and `b` at `j` from `m` pairs.
    ///
    /// `q` counts pairs with both quanta on `{i, j}`, `l` those split between
    /// `i` and `j`, and `p` those with both quanta on `j`.
    fn count_probability(&self, a: usize, b: usize, m: usize) -> f64 {
        let (a, b, m) = (a as i64, b as i64, m as i64);
        let table = binomials();
        let mut acc = CompensatedSum::new();
        let q_min = (a + b - m).max(0);
        for q in q_min..=(a + b) / 2 {
            let touched = a + b - q;
            let c_m = table.get(m, touched);
            let w_none = powu(self.p00, m - touched);
            for l in 0..=q {
                for p in 0..=(q - l) {
                    let m20 = q - p - l;
                    let m10 = a + l - 2 * (q - p);
                    let m01 = b - 2 * p - l;
                    if m10 < 0 || m01 < 0 {
                        continue;
                    }
                    let multiplicity = table.get(a - q + p, m20)
                        * table.get(b - l - p, p)
                        * table.get(touched - l, a - q + p)
                        * table.get(touched, l)
                        * c_m;
                    if multiplicity == 0.0 {
                        continue;
                    }
                    acc.add(
                        multiplicity
                            * w_none
                            * powu(self.p10, m10)
                            * powu(self.p01, m01)
                            * powu(self.p20, m20)
                            * powu(self.p02, p)
                            * powu(self.p11, l),
                    );
                }
            }
        }
        acc.value()
    }

    /// Calls `f(m, width, table)` for `m = 0..=m_max`, where
    /// `table[a * width + b] = P(a, b | m)`. Each table is obtained from the
    /// previous one by adding a pair, which costs `O(m²)` instead of the
    /// `O(m⁵)` of evaluating [`Self::count_probability`] everywhere.
    fn for_each_count_table(&self, m_max: usize, mut f: impl FnMut(usize, usize, &[f64])) {
        let width = 2 * m_max + 1;
        let mut table = vec![0.0; width * width];
        let mut previous = table.clone();
        table[0] = 1.0;
        f(0, width, &table);
        let steps = [
            (0, 0, self.p00),
            (1, 0, self.p10),
            (0, 1, self.p01),
            (2, 0, self.p20),
            (0, 2, self.p02),
            (1, 1, self.p11),
        ];
        for m in 1..=m_max {
            std::mem::swap(&mut table, &mut previous);
            for a in 0..=2 * m {
                for b in 0..=(2 * m - a) {
                    let mut v = 0.0;
                    for &(da, db, w) in &steps {
                        if a >= da && b >= db && a - da + b - db <= 2 * (m - 1) {
                            v += w * previous[(a - da) * width + (b - db)];
                        }
                    }
                    table[a * width + b] = v;
                }
            }
            f(m, width, &table);
        }
    }
}

/// Binomial coefficients for every `n` a truncated sum can reach.
struct BinomialTable {
    size: usize,
    values: Vec<f64>,
}

impl BinomialTable {
    fn build(size: usize) -> Self {
        let mut values = vec![0.0; size * size];
        for n in 0..size {
            for k in 0..=n {
                values[n * size + k] = binomial(n as i64, k as i64);
            }
        }
        Self { size, values }
    }

    #[inline]
    fn get(&self, n: i64, k: i64) -> f64 {
        if n < 0 || k < 0 || k > n {
            return 0.0;
        }
        let (n, k) = (n as usize, k as usize);
        if n < self.size {
            self.values[n * self.size + k]
        } else {
            binomial(n as i64, k as i64)
        }
    }
}

fn binomials() -> &'static BinomialTable {
    static TABLE: OnceLock<BinomialTable> = OnceLock::new();
    TABLE.get_or_init(|| BinomialTable::build(2 * MAX_PAIRS + 1))
}

fn check_range(name: &str, count: usize, m: usize) -> Result<(), OracleError> {
    if count > 2 * m {
        return Err(OracleError::Domain(format!("{name} = {count} exceeds 2m = {}", 2 * m)));
    }
    Ok(())
}

/// `P(n_i = n | m)`: probability that `n` photons land on the pixel given `m` pairs.
pub fn p_photons_given_pairs(px: SinglePixel, n: usize, m: usize) -> Result<f64, OracleError> {
    check_range("n", n, m)?;
    Ok(SingleOutcomes::new(px, 1.0)?.count_probability(n, m))
}

/// `P(k_i = k | m)`: probability of `k` photoelectrons at the pixel given `m`
/// pairs, with quantum efficiency `eta`.
pub fn p_electrons_given_pairs(
    px: SinglePixel,
    eta: f64,
    k: usize,
    m: usize,
) -> Result<f64, OracleError> {
    check_range("k", k, m)?;
    Ok(SingleOutcomes::new(px, eta)?.count_probability(k, m))
}

/// `P(n_i, n_j | m)` for two distinct pixels.
pub fn p_joint_photons_given_pairs(
    pair: PixelPair,
    n_i: usize,
    n_j: usize,
    m: usize,
) -> Result<f64, OracleError> {
    check_range("n_i", n_i, m)?;
    check_range("n_j", n_j, m)?;
    Ok(PairOutcomes::new(pair, 1.0)?.count_probability(n_i, n_j, m))
}

/// `P(k_i, k_j | m)` for two distinct pixels with quantum efficiency `eta`.
pub fn p_joint_electrons_given_pairs(
    pair: PixelPair,
    eta: f64,
    k_i: usize,
    k_j: usize,
    m: usize,
) -> Result<f64, OracleError> {
    check_range("k_i", k_i, m)?;
    check_range("k_j", k_j, m)?;
    Ok(PairOutcomes::new(pair, eta)?.count_probability(k_i, k_j, m))
}

/// Distribution `P(m)` of the number of pairs per frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PairCountDistribution {
    Poisson { mean: f64 },
    /// `probabilities[m] = P(m)`.
    Explicit { probabilities: Vec<f64> },
}

impl PairCountDistribution {
    pub fn poisson(mean: f64) -> Self {
        Self::Poisson { mean }
    }

    pub fn fixed(m: usize) -> Self {
        let mut probabilities = vec![0.0; m + 1];
        probabilities[m] = 1.0;
        Self::Explicit { probabilities }
    }

    /// Realizes a source configuration as a concrete distribution.
    ///
    /// A `GenericMoments` source becomes a negative binomial when
    /// over-dispersed, a Poisson when `σ² = m̄`, and a mixture of a Poisson
    /// with the two-point lattice `{⌊m̄⌋, ⌊m̄⌋+1}` when under-dispersed. Both
    /// mixture components share the mean, so the mixture variance interpolates
    /// linearly between theirs.
    pub fn from_source(source: &SourceConfig) -> Result<Self, OracleError> {
        source
            .check()
            .map_err(|e| OracleError::Domain(e.to_string()))?;
        let mean = source.mean_pairs;
        match &source.pair_number_model {
            PairNumberModel::Poisson => Ok(Self::poisson(mean)),
            PairNumberModel::Explicit { probabilities } => Ok(Self::Explicit {
                probabilities: probabilities.clone(),
            }),
            PairNumberModel::GenericMoments { variance } => {
                Self::with_moments(mean, *variance)
            }
        }
    }

    /// See [`PairCountDistribution::from_source`].
    pub fn with_moments(mean: f64, variance: f64) -> Result<Self, OracleError> {
        if !(mean >= 0.0 && variance >= 0.0) {
            return Err(OracleError::Domain(format!(
                "mean {mean} and variance {variance} must be non-negative"
            )));
        }
        let rel = 1e-12 * mean.max(1.0);
        if (variance - mean).abs() <= rel {
            return Ok(Self::poisson(mean));
        }
        if variance > mean {
            let r = mean * mean / (variance - mean);
            let success = mean / (r + mean);
            let first = (r / (r + mean)).powf(r);
            let probabilities = tabulate(first, |k| (k as f64 + r) / (k as f64 + 1.0) * success)?;
            return Ok(Self::Explicit { probabilities });
        }

        let floor = mean.floor();
        let frac = mean - floor;
        let lattice_variance = frac * (1.0 - frac);
        if variance < lattice_variance - rel {
            return Err(OracleError::Domain(format!(
                "variance {variance} is below {lattice_variance}, the minimum for an integer count with mean {mean}"
            )));
        }
        let base = floor as usize;
        let lattice_weight = if mean - lattice_variance > 0.0 {
            ((mean - variance) / (mean - lattice_variance)).clamp(0.0, 1.0)
        } else {
            1.0
        };
        let poisson_part: Vec<(usize, f64)> = if lattice_weight < 1.0 {
            tabulate((-mean).exp(), |k| mean / (k as f64 + 1.0))?
                .into_iter()
                .enumerate()
                .collect()
        } else {
            Vec::new()
        };
        let len = poisson_part.len().max(base + 2);
        let mut probabilities = vec![0.0; len];
        for (m, p) in poisson_part {
            probabilities[m] += (1.0 - lattice_weight) * p;
        }
        probabilities[base] += lattice_weight * (1.0 - frac);
        probabilities[base + 1] += lattice_weight * frac;
        while probabilities.len() > 1 && *probabilities.last().unwrap() == 0.0 {
            probabilities.pop();
        }
        Ok(Self::Explicit { probabilities })
    }

    pub fn mean(&self) -> f64 {
        match self {
            Self::Poisson { mean } => *mean,
            Self::Explicit { probabilities } => probabilities
                .iter()
                .enumerate()
                .map(|(m, p)| m as f64 * p)
                .collect::<CompensatedSum>()
                .value(),
        }
    }

    pub fn variance(&self) -> f64 {
        match self {
            Self::Poisson { mean } => *mean,
            Self::Explicit { probabilities } => {
                let mean = self.mean();
                probabilities
                    .iter()
                    .enumerate()
                    .map(|(m, p)| (m as f64 - mean).powi(2) * p)
                    .collect::<CompensatedSum>()
                    .value()
            }
        }
    }

    /// `(m, P(m))` for every `m` the moment sums need to visit.
    ///
    /// Poisson distributions are cut at the smallest `m` whose cumulative mass
    /// reaches `1 − 10⁻¹²`; reaching [`MAX_PAIRS`] first is an error.
    pub fn support(&self) -> Result<Vec<(usize, f64)>, OracleError> {
        match self {
            Self::Poisson { mean } => {
                if !(*mean >= 0.0 && mean.is_finite()) {
                    return Err(OracleError::Domain(format!("Poisson mean {mean}")));
                }
                let mut out = Vec::new();
                let mut p = (-mean).exp();
                let mut cumulative = CompensatedSum::new();
                for m in 0..=MAX_PAIRS {
                    if m > 0 {
                        p *= mean / m as f64;
                    }
                    out.push((m, p));
                    cumulative.add(p);
                    if cumulative.value() >= TRUNCATION_MASS {
                        // Condition on m ≤ m_max so the weights sum to one.
                        let mass = cumulative.value();
                        for (_, w) in &mut out {
                            *w /= mass;
                        }
                        return Ok(out);
                    }
                }
                Err(OracleError::Truncation {
                    cap: MAX_PAIRS,
                    tail: 1.0 - cumulative.value(),
                })
            }
            Self::Explicit { probabilities } => {
                if probabilities.len() > MAX_PAIRS + 1 {
                    let tail: f64 = probabilities[MAX_PAIRS + 1..].iter().sum();
                    if tail > 1.0 - TRUNCATION_MASS {
                        return Err(OracleError::Truncation {
                            cap: MAX_PAIRS,
                            tail,
                        });
                    }
                }
                let total: f64 = probabilities.iter().sum();
                if probabilities.iter().any(|p| !(*p >= 0.0)) || (total - 1.0).abs() > 1e-9 {
                    return Err(OracleError::Domain(format!(
                        "explicit pair-number probabilities must be non-negative and sum to 1 (sum {total})"
                    )));
                }
                Ok(probabilities
                    .iter()
                    .copied()
                    .enumerate()
                    .take(MAX_PAIRS + 1)
                    .filter(|&(_, p)| p > 0.0)
                    .collect())
            }
        }
    }

    /// Probability generating function `Σ_m P(m) z^m`.
    pub fn pgf(&self, z: f64) -> f64 {
        match self {
            Self::Poisson { mean } => (mean * (z - 1.0)).exp(),
            Self::Explicit { probabilities } => probabilities
                .iter()
                .enumerate()
                .map(|(m, p)| p * z.powi(m as i32))
                .collect::<CompensatedSum>()
                .value(),
        }
    }
}

/// Mean `I_k` and second moment `J_k` of the detector output given `k`
/// photoelectrons at the pixel.
pub trait DetectorResponse {
    fn mean(&self, k: usize) -> f64;
    fn second_moment(&self, k: usize) -> f64;

    /// `J_k ≥ I_k²` for every `k ≤ k_max`.
    fn has_nonnegative_variance(&self, k_max: usize) -> bool {
        (0..=k_max).all(|k| {
            let i = self.mean(k);
            self.second_moment(k) >= i * i * (1.0 - 1e-12)
        })
    }
}

/// Binary single-photon-counting pixel: fires for any electron, and with
/// probability `p10` when empty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpcResponse {
    pub p10: f64,
}

impl DetectorResponse for SpcResponse {
    fn mean(&self, k: usize) -> f64 {
        if k == 0 {
            self.p10
        } else {
            1.0
        }
    }

    fn second_moment(&self, k: usize) -> f64 {
        self.mean(k)
    }
}

/// Linear response `I_k = A k + x₀` with variance `A² k + σ₀²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearResponse {
    pub gain: f64,
    pub offset: f64,
    pub background_variance: f64,
}

impl DetectorResponse for LinearResponse {
    fn mean(&self, k: usize) -> f64 {
        self.gain * k as f64 + self.offset
    }

    fn second_moment(&self, k: usize) -> f64 {
        let i = self.mean(k);
        i * i + self.gain * self.gain * k as f64 + self.background_variance
    }
}

/// Response given as explicit tables; `k` beyond the table reuses the last entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabulatedResponse {
    pub mean: Vec<f64>,
    pub second_moment: Vec<f64>,
}

impl DetectorResponse for TabulatedResponse {
    fn mean(&self, k: usize) -> f64 {
        self.mean[k.min(self.mean.len() - 1)]
    }

    fn second_moment(&self, k: usize) -> f64 {
        self.second_moment[k.min(self.second_moment.len() - 1)]
    }
}

/// `⟨x_i⟩ = Σ_m P(m) Σ_k I_k P(k|m)`.
pub fn mean_output<R: DetectorResponse + ?Sized>(
    px: SinglePixel,
    eta: f64,
    counts: &PairCountDistribution,
    response: &R,
) -> Result<f64, OracleError> {
    single_pixel_expectation(px, eta, counts, |k| response.mean(k))
}

/// `⟨x_i²⟩ = Σ_m P(m) Σ_k J_k P(k|m)`.
pub fn mean_output_square<R: DetectorResponse + ?Sized>(
    px: SinglePixel,
    eta: f64,
    counts: &PairCountDistribution,
    response: &R,
) -> Result<f64, OracleError> {
    single_pixel_expectation(px, eta, counts, |k| response.second_moment(k))
}

fn single_pixel_expectation(
    px: SinglePixel,
    eta: f64,
    counts: &PairCountDistribution,
    weight: impl Fn(usize) -> f64,
) -> Result<f64, OracleError> {
    let outcomes = SingleOutcomes::new(px, eta)?;
    let mut total = CompensatedSum::new();
    for (m, pm) in counts.support()? {
        let mut inner = CompensatedSum::new();
        for k in 0..=2 * m {
            inner.add(weight(k) * outcomes.count_probability(k, m));
        }
        total.add(pm * inner.value());
    }
    Ok(total.value())
}

/// `⟨x_i x_j⟩ = Σ_m P(m) Σ_{k_i,k_j} I_{k_i} I_{k_j} P(k_i,k_j|m)` for `i ≠ j`.
pub fn mean_output_pair<R: DetectorResponse + ?Sized>(
    pair: PixelPair,
    eta: f64,
    counts: &PairCountDistribution,
    response: &R,
) -> Result<f64, OracleError> {
    let outcomes = PairOutcomes::new(pair, eta)?;
    let support = counts.support()?;
    let m_max = support.last().map_or(0, |&(m, _)| m);
    let means: Vec<f64> = (0..=2 * m_max).map(|k| response.mean(k)).collect();
    let mut total = CompensatedSum::new();
    let mut next = support.iter().peekable();
    outcomes.for_each_count_table(m_max, |m, width, table| {
        let Some(&(_, pm)) = next.next_if(|&&(sm, _)| sm == m) else {
            return;
        };
        let mut inner = CompensatedSum::new();
        for a in 0..=2 * m {
            for b in 0..=(2 * m - a) {
                inner.add(means[a] * means[b] * table[a * width + b]);
            }
        }
        total.add(pm * inner.value());
    });
    Ok(total.value())
}

/// Closed-form SPC moments under Poisson pair statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpcMoments {
    pub mean_i: f64,
    pub mean_j: f64,
    pub mean_ij: f64,
}

/// `⟨c_i⟩`, `⟨c_j⟩` and `⟨c_i c_j⟩` for a binary pixel with false-positive
/// probability `p10`, quantum efficiency `eta` and Poisson(`mean_pairs`) pairs.
pub fn spc_moments(
    pair: PixelPair,
    eta: f64,
    mean_pairs: f64,
    p10: f64,
) -> Result<SpcMoments, OracleError> {
    spc_moments_general(pair, eta, &PairCountDistribution::poisson(mean_pairs), p10)
}

/// SPC moments for any pair-number distribution, through its generating
/// function: `⟨c_i⟩ = 1 − (1 − p10) G(P_i(0|1))` and likewise for the pair.
pub fn spc_moments_general(
    pair: PixelPair,
    eta: f64,
    counts: &PairCountDistribution,
    p10: f64,
) -> Result<SpcMoments, OracleError> {
    let p10 = check_probability("p10", p10)?;
    if let PairCountDistribution::Poisson { mean } = counts {
        if !(*mean >= 0.0) {
            return Err(OracleError::Domain(format!("mean pairs {mean}")));
        }
    }
    let oi = SingleOutcomes::new(pair.i, eta)?;
    let oj = SingleOutcomes::new(pair.j, eta)?;
    let oij = PairOutcomes::new(pair, eta)?;
    let dark = 1.0 - p10;
    let silent_i = counts.pgf(oi.none);
    let silent_j = counts.pgf(oj.none);
    let silent_both = counts.pgf(oij.p00);
    Ok(SpcMoments {
        mean_i: 1.0 - dark * silent_i,
        mean_j: 1.0 - dark * silent_j,
        mean_ij: 1.0 - dark * (silent_i + silent_j) + dark * dark * silent_both,
    })
}

/// Closed-form linear-response moments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmccdMoments {
    pub mean_i: f64,
    pub mean_j: f64,
    pub mean_ij: f64,
    pub mean_sq_i: f64,
    pub mean_sq_j: f64,
}

/// Moments of a linear detector `I_k = A k + x₀` (variance `A²k + σ₀²`) for a
/// pair-number distribution with mean `mean_pairs` and variance `pair_variance`.
pub fn emccd_moments(
    pair: PixelPair,
    eta: f64,
    mean_pairs: f64,
    pair_variance: f64,
    response: &LinearResponse,
) -> Result<EmccdMoments, OracleError> {
    // Validates the Γ inputs and η.
    PairOutcomes::new(pair, eta)?;
    if !(response.gain > 0.0) {
        return Err(OracleError::Domain(format!("gain A = {} must be positive", response.gain)));
    }
    let a = response.gain;
    let x0 = response.offset;
    let s0 = response.background_variance;
    let mbar = mean_pairs;
    // E[m(m − 1)]
    let factorial2 = mbar * mbar + pair_variance - mbar;
    let (gi, gj) = (pair.i.marginal, pair.j.marginal);
    let square = |g: f64, gdiag: f64| {
        2.0 * a * a * mbar * eta * eta * gdiag
            + 4.0 * a * a * factorial2 * eta * eta * g * g
            + 4.0 * (a * a + a * x0) * mbar * eta * g
            + s0
            + x0 * x0
    };
    Ok(EmccdMoments {
        mean_i: x0 + 2.0 * a * mbar * eta * gi,
        mean_j: x0 + 2.0 * a * mbar * eta * gj,
        mean_ij: x0 * x0
            + 2.0 * a * x0 * mbar * eta * (gi + gj)
            + 4.0 * a * a * factorial2 * eta * eta * gi * gj
            + 2.0 * a * a * mbar * eta * eta * pair.cross,
        mean_sq_i: square(gi, pair.i.diagonal),
        mean_sq_j: square(gj, pair.j.diagonal),
    })
}
