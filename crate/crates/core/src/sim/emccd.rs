//! EMCCD gray-value model: Erlang signal, clock-induced charge, serial
//! register injections and Gaussian readout, scaled by the ADC factor.

use nalgebra::Complex;
use rand::Rng;
use rand_distr::{Binomial, Distribution, Exp1, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::numeric::CompensatedSum;
use crate::oracle::{LinearResponse, TabulatedResponse};

use super::SimError;

/// Signal electrons above this count are drawn from a gamma sampler rather
/// than as a sum of exponentials.
pub const ERLANG_SUM_LIMIT: usize = 16;

/// Noise parameters of an electron-multiplying CCD.
///
/// `bias` is a constant gray-value baseline added after ADC scaling. It is not
/// one of the five fitted parameters; it places the dark level where the
/// camera actually sits so that thresholds are expressed in real gray values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmccdNoiseParams {
    /// Number of multiplication cells `L`.
    pub register_cells: u32,
    /// Per-cell duplication probability `p_c`.
    pub p_c: f64,
    /// ADC scale `α` (gray values per electron).
    pub alpha: f64,
    /// Per-cell serial spurious-electron probability.
    pub p_ser: f64,
    /// Parallel (CIC and dark) spurious-electron probability.
    pub p_par: f64,
    /// Readout noise standard deviation, in electrons before scaling.
    pub sigma_r: f64,
    /// Readout noise mean, in electrons before scaling.
    pub mu: f64,
    #[serde(default)]
    pub bias: f64,
}

impl EmccdNoiseParams {
    /// Baseline that puts `P(x ≥ 516 | k = 0)` at 0.015 for
    /// [`EmccdNoiseParams::reference`].
    pub const REFERENCE_BIAS: f64 = 508.5716908453632;

    /// Fitted parameters of an iXon Ultra 888 class camera.
    pub fn reference() -> Self {
        Self {
            register_cells: 506,
            p_c: 1.37e-2,
            alpha: 1.0 / 19.0,
            p_ser: 3.35e-5,
            p_par: 1.23e-2,
            sigma_r: 12.2,
            mu: 25.54,
            bias: Self::REFERENCE_BIAS,
        }
    }

    /// All noise sources off: the output is exactly `α g`-scaled signal.
    pub fn noiseless(register_cells: u32, p_c: f64, alpha: f64) -> Self {
        Self {
            register_cells,
            p_c,
            alpha,
            p_ser: 0.0,
            p_par: 0.0,
            sigma_r: 0.0,
            mu: 0.0,
            bias: 0.0,
        }
    }

    pub fn check(&self) -> Result<(), SimError> {
        let bad = |field: &str, value: f64| {
            Err(SimError::InvalidParameter(format!("EMCCD {field} = {value}")))
        };
        if self.register_cells == 0 {
            return bad("register_cells", 0.0);
        }
        if !(self.p_c > 0.0 && self.p_c <= 1.0) {
            return bad("p_c", self.p_c);
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad("alpha", self.alpha);
        }
        if !(0.0..=1.0).contains(&self.p_ser) {
            return bad("p_ser", self.p_ser);
        }
        if !(0.0..=1.0).contains(&self.p_par) {
            return bad("p_par", self.p_par);
        }
        if !(self.sigma_r >= 0.0 && self.sigma_r.is_finite()) {
            return bad("sigma_r", self.sigma_r);
        }
        if !self.mu.is_finite() {
            return bad("mu", self.mu);
        }
        if !self.bias.is_finite() {
            return bad("bias", self.bias);
        }
        if !self.gain().is_finite() {
            return bad("gain", self.gain());
        }
        Ok(())
    }

    /// Mean multiplication gain `g = (1 + p_c)^L`.
    pub fn gain(&self) -> f64 {
        (1.0 + self.p_c).powi(self.register_cells as i32)
    }

    /// Gain `(1 + p_c)^{L − l}` seen by an electron injected at cell `l`, for `l = 1..=L`.
    pub fn serial_gains(&self) -> Vec<f64> {
        (1..=self.register_cells)
            .map(|l| (1.0 + self.p_c).powi((self.register_cells - l) as i32))
            .collect()
    }

    /// Gray values per photoelectron, `A = α g`.
    pub fn conversion_gain(&self) -> f64 {
        self.alpha * self.gain()
    }

    /// Mean dark output `x₀`.
    pub fn offset(&self) -> f64 {
        let g = self.gain();
        self.bias + self.alpha * (self.mu + self.p_par * g + self.p_ser * (g - 1.0) / self.p_c)
    }

    /// Variance `σ₀²` of the dark output.
    pub fn background_variance(&self) -> f64 {
        let g = self.gain();
        let serial: f64 = self
            .serial_gains()
            .iter()
            .map(|gl| gl * gl)
            .collect::<CompensatedSum>()
            .value();
        self.alpha
            * self.alpha
            * (self.sigma_r * self.sigma_r
                + self.p_par * (2.0 - self.p_par) * g * g
                + self.p_ser * (2.0 - self.p_ser) * serial)
    }

    /// `I_k = A k + x₀`, `J_k = I_k² + A² k + σ₀²`.
    pub fn linear_response(&self) -> LinearResponse {
        LinearResponse {
            gain: self.conversion_gain(),
            offset: self.offset(),
            background_variance: self.background_variance(),
        }
    }

    /// Characteristic function of the gray value given `k` electrons.
    pub fn characteristic_function(&self, k: usize) -> impl Fn(f64) -> Complex<f64> + '_ {
        let g = self.gain();
        let serial = self.serial_gains();
        let one = Complex::new(1.0, 0.0);
        move |t: f64| {
            let s = self.alpha * t;
            let amplified = |gain: f64| one / Complex::new(1.0, -gain * s);
            let mut phi = amplified(g).powi(k as i32);
            phi *= one * (1.0 - self.p_par) + amplified(g) * self.p_par;
            if self.p_ser > 0.0 {
                for &gl in &serial {
                    phi *= one * (1.0 - self.p_ser) + amplified(gl) * self.p_ser;
                }
            }
            let readout = Complex::new(
                -0.5 * self.sigma_r * self.sigma_r * s * s,
                self.mu * s + self.bias * t,
            )
            .exp();
            phi * readout
        }
    }

    /// `P(x ≥ threshold | k)` by numerical inversion of the characteristic
    /// function.
    pub fn exceedance_probability(&self, k: usize, threshold: f64) -> Result<f64, SimError> {
        Ok(ExceedanceTable::new(self, k)?.probability(threshold))
    }

    /// Mean and second moment of the thresholded output `[x ≥ threshold]`
    /// for `k = 0..=k_max`.
    pub fn thresholded_response(
        &self,
        threshold: f64,
        k_max: usize,
    ) -> Result<TabulatedResponse, SimError> {
        let mean = (0..=k_max)
            .map(|k| self.exceedance_probability(k, threshold))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(TabulatedResponse {
            second_moment: mean.clone(),
            mean,
        })
    }

    /// Bias that makes the dark exceedance probability at `threshold` equal
    /// to `target`.
    pub fn calibrate_bias(&self, threshold: f64, target: f64) -> Result<f64, SimError> {
        if !(target > 0.0 && target < 1.0) {
            return Err(SimError::InvalidParameter(format!("target rate {target}")));
        }
        let unbiased = Self { bias: 0.0, ..*self };
        let table = ExceedanceTable::new(&unbiased, 0)?;
        let spread = unbiased.background_variance().sqrt();
        let centre = threshold - unbiased.offset();
        let (mut lo, mut hi) = (centre - 200.0 * spread, centre + 200.0 * spread);
        // Raising the bias is equivalent to lowering the threshold.
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if table.probability(threshold - mid) > target {
                hi = mid;
            } else {
                lo = mid;
            }
            if hi - lo <= 1e-13 * mid.abs().max(1.0) {
                break;
            }
        }
        Ok(0.5 * (lo + hi))
    }
}

/// Characteristic function of one `k` sampled on a quadrature grid, so that
/// many thresholds can be evaluated cheaply.
pub struct ExceedanceTable {
    /// `(t, weight, φ(t))`.
    samples: Vec<(f64, f64, Complex<f64>)>,
}

impl ExceedanceTable {
    /// Panel width in inverse gray values.
    const MAX_PANEL_WIDTH: f64 = 0.002;
    const DECAY_EXPONENT: f64 = 40.0;

    pub fn new(params: &EmccdNoiseParams, k: usize) -> Result<Self, SimError> {
        params.check()?;
        if params.sigma_r <= 0.0 {
            return Err(SimError::InvalidParameter(
                "exceedance probabilities need a continuous readout (sigma_r > 0)".into(),
            ));
        }
        let phi = params.characteristic_function(k);
        let readout_sd = params.alpha * params.sigma_r;
        // The Gaussian readout factor is e^{-40} beyond t_max.
        let t_max = (2.0 * Self::DECAY_EXPONENT).sqrt() / readout_sd;
        let panels = (t_max / Self::MAX_PANEL_WIDTH).ceil().max(64.0) as usize;
        let width = t_max / panels as f64;
        let (nodes, weights) = gauss_legendre(8);
        let mut samples = Vec::with_capacity(panels * nodes.len());
        for p in 0..panels {
            let centre = (p as f64 + 0.5) * width;
            for (x, w) in nodes.iter().zip(&weights) {
                let t = centre + 0.5 * width * x;
                samples.push((t, 0.5 * width * w, phi(t)));
            }
        }
        Ok(Self { samples })
    }

    /// Gil-Pelaez inversion: `P(X ≥ T) = ½ + (1/π) ∫₀^∞ Im[e^{−itT} φ(t)] / t dt`.
    pub fn probability(&self, threshold: f64) -> f64 {
        let mut acc = CompensatedSum::new();
        for &(t, w, phi) in &self.samples {
            let shifted = phi * Complex::new(0.0, -t * threshold).exp();
            acc.add(w * shifted.im / t);
        }
        // The integrand tends to E[X] − T at the origin; Gauss nodes never touch it.
        (0.5 + acc.value() / std::f64::consts::PI).clamp(0.0, 1.0)
    }
}

/// Gauss–Legendre nodes and weights on `[−1, 1]`.
pub fn gauss_legendre(order: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; order];
    let mut weights = vec![0.0; order];
    let n = order as f64;
    for i in 0..order.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n + 0.5)).cos();
        let mut derivative = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for j in 2..=order {
                let jf = j as f64;
                let p2 = ((2.0 * jf - 1.0) * x * p1 - (jf - 1.0) * p0) / jf;
                p0 = p1;
                p1 = p2;
            }
            if order == 1 {
                p0 = 1.0;
            }
            derivative = n * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / derivative;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        nodes[i] = -x;
        nodes[order - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * derivative * derivative);
        weights[i] = w;
        weights[order - 1 - i] = w;
    }
    (nodes, weights)
}

/// Precomputed sampler for gray values under one set of noise parameters.
#[derive(Debug, Clone)]
pub struct EmccdSampler {
    params: EmccdNoiseParams,
    gain: f64,
    serial_gains: Vec<f64>,
    serial_count: Option<Binomial>,
}

impl EmccdSampler {
    pub fn new(params: EmccdNoiseParams) -> Result<Self, SimError> {
        params.check()?;
        let serial_count = if params.p_ser > 0.0 {
            Some(
                Binomial::new(params.register_cells as u64, params.p_ser)
                    .map_err(|e| SimError::InvalidParameter(format!("serial binomial: {e}")))?,
            )
        } else {
            None
        };
        Ok(Self {
            params,
            gain: params.gain(),
            serial_gains: params.serial_gains(),
            serial_count,
        })
    }

    pub fn params(&self) -> &EmccdNoiseParams {
        &self.params
    }

    /// Amplified electron-equivalent charge for `k` signal electrons,
    /// excluding readout.
    fn amplified<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> f64 {
        let g = self.gain;
        let mut total = 0.0;
        if k > 0 {
            total += if k <= ERLANG_SUM_LIMIT {
                (0..k).map(|_| rng.sample::<f64, _>(Exp1)).sum::<f64>() * g
            } else {
                Gamma::new(k as f64, g)
                    .expect("gamma shape and scale are positive")
                    .sample(rng)
            };
        }
        if self.params.p_par > 0.0 && rng.random::<f64>() < self.params.p_par {
            total += rng.sample::<f64, _>(Exp1) * g;
        }
        if let Some(count) = &self.serial_count {
            let injections = count.sample(rng) as usize;
            if injections > 0 {
                let cells = self.serial_gains.len();
                let mut chosen: Vec<usize> = Vec::with_capacity(injections);
                while chosen.len() < injections {
                    let cell = rng.random_range(0..cells);
                    if !chosen.contains(&cell) {
                        chosen.push(cell);
                    }
                }
                for cell in chosen {
                    total += rng.sample::<f64, _>(Exp1) * self.serial_gains[cell];
                }
            }
        }
        total
    }

    /// One gray value for `k` electrons; `gain_scale` multiplies every
    /// amplified contribution (gain drift).
    pub fn sample<R: Rng + ?Sized>(&self, k: usize, gain_scale: f64, rng: &mut R) -> f64 {
        let amplified = self.amplified(k, rng) * gain_scale;
        let readout = if self.params.sigma_r > 0.0 {
            self.params.mu + self.params.sigma_r * rng.sample::<f64, _>(StandardNormal)
        } else {
            self.params.mu
        };
        self.params.bias + self.params.alpha * (amplified + readout)
    }
}
