//! Diffusion variance schedule and consistency-boundary coefficients.
//!
//! Everything here is closed-form math over precomputed `f64` tables:
//! the linear beta schedule, cumulative alpha products, the forward
//! noising map, and the skip/out coefficient pair that pins the
//! consistency function to the identity at t = 0.
//!
//! Timesteps are 0-based: `t = 0` is the cleanest level (`beta[0]` is the
//! first schedule entry) and `t = T - 1` the noisiest. Arrays are computed
//! and stored in 64-bit floats; cumulative products over a thousand terms
//! are not trustworthy in 32-bit.

use crate::error::{Error, Result};
use ndarray::ArrayD;

/// Precomputed variance schedule.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    total_steps: usize,
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma_data: f64,
}

/// Default coefficient-scale constant for the boundary parameterization.
pub const DEFAULT_SIGMA_DATA: f64 = 0.5;

impl NoiseSchedule {
    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn sigma_data(&self) -> f64 {
        self.sigma_data
    }

    pub fn with_sigma_data(mut self, sigma_data: f64) -> Result<Self> {
        if !(sigma_data > 0.0) || !sigma_data.is_finite() {
            return Err(Error::range("sigma_data", format!("must be a positive finite real, got {sigma_data}")));
        }
        self.sigma_data = sigma_data;
        Ok(self)
    }

    fn check_t(&self, t: usize, context: &str) -> Result<()> {
        if t >= self.total_steps {
            return Err(Error::range(
                "timestep",
                format!("{context}: t = {t} but schedule has {} steps (valid 0..={})", self.total_steps, self.total_steps - 1),
            ));
        }
        Ok(())
    }
}

/// Builds a linear variance schedule with `beta[t]` interpolated from
/// `beta_start` at t = 0 to `beta_end` at t = T - 1, and `alpha_bar[t]`
/// the running product of `(1 - beta[i])` for i in 0..=t.
pub fn make_schedule(total_steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if total_steps < 2 {
        return Err(Error::range("total_steps", format!("must be >= 2, got {total_steps}")));
    }
    if !(beta_start > 0.0 && beta_start < beta_end && beta_end < 1.0) {
        return Err(Error::range(
            "beta range",
            format!("need 0 < beta_start < beta_end < 1, got start={beta_start}, end={beta_end}"),
        ));
    }
    let step = (beta_end - beta_start) / (total_steps - 1) as f64;
    let beta: Vec<f64> = (0..total_steps).map(|t| beta_start + t as f64 * step).collect();
    let mut alpha_bar = Vec::with_capacity(total_steps);
    let mut prod = 1.0f64;
    for &b in &beta {
        prod *= 1.0 - b;
        alpha_bar.push(prod);
    }
    Ok(NoiseSchedule {
        total_steps,
        beta,
        alpha_bar,
        sigma_data: DEFAULT_SIGMA_DATA,
    })
}

/// Forward noising: `sqrt(alpha_bar[t]) * z0 + sqrt(1 - alpha_bar[t]) * eps`.
///
/// `eps` is passed in rather than drawn here so callers control the RNG.
pub fn forward_noise(z0: &ArrayD<f64>, t: usize, eps: &ArrayD<f64>, schedule: &NoiseSchedule) -> Result<ArrayD<f64>> {
    schedule.check_t(t, "forward_noise")?;
    if z0.shape() != eps.shape() {
        return Err(Error::shape("forward_noise eps", z0.shape(), eps.shape()));
    }
    let ab = schedule.alpha_bar[t];
    let signal = ab.sqrt();
    let noise = (1.0 - ab).sqrt();
    Ok(z0 * signal + eps * noise)
}

/// Skip/out coefficient pair of the consistency parameterization.
///
/// With `s = t / scale_const` (default `scale_const = 1`, so `s = t`):
///
/// ```text
/// c_skip(t) = sigma_data^2 / (s^2 + sigma_data^2)
/// c_out(t)  = s / sqrt(s^2 + sigma_data^2)
/// ```
///
/// At t = 0 these are exactly (1, 0), which makes the parameterized model
/// the identity on clean latents regardless of the noise predictor.
#[derive(Debug, Clone, Copy)]
pub struct BoundaryCoefficients {
    sigma_data: f64,
    scale_const: f64,
}

impl BoundaryCoefficients {
    pub fn new(sigma_data: f64) -> Self {
        BoundaryCoefficients {
            sigma_data,
            scale_const: 1.0,
        }
    }

    /// Continuous form, valid for any real s >= 0.
    pub fn at(&self, t: f64) -> (f64, f64) {
        let s = t / self.scale_const;
        let s2 = s * s;
        let d2 = self.sigma_data * self.sigma_data;
        let c_skip = d2 / (s2 + d2);
        let c_out = s / (s2 + d2).sqrt();
        (c_skip, c_out)
    }

    pub fn c_skip(&self, t: f64) -> f64 {
        self.at(t).0
    }

    pub fn c_out(&self, t: f64) -> f64 {
        self.at(t).1
    }
}

/// `(c_skip(t), c_out(t))` for an integer timestep of `schedule`.
pub fn boundary_coeffs(t: usize, sigma_data: f64, schedule: &NoiseSchedule) -> Result<(f64, f64)> {
    schedule.check_t(t, "boundary_coeffs")?;
    if !(sigma_data > 0.0) {
        return Err(Error::range("sigma_data", format!("must be > 0, got {sigma_data}")));
    }
    Ok(BoundaryCoefficients::new(sigma_data).at(t as f64))
}
