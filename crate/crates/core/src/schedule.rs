//! Variance schedules and the closed-form forward (noising) process.

use ndarray::{Array, ArrayView, Dimension, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    #[default]
    Linear,
    Cosine,
}

/// Per-step variances β_t and their cumulative signal coefficients ᾱ_t.
///
/// Timesteps are 1-based: `t ∈ [1, T]` indexes a noising step and `t = 0`
/// is the clean data, with ᾱ_0 = 1 by convention. Coefficients are kept in
/// `f64` regardless of the latent scalar type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// Parameters a schedule is rebuilt from; this is what gets persisted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub num_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    #[serde(default)]
    pub kind: ScheduleKind,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            num_steps: 1000,
            beta_min: 1e-4,
            beta_max: 0.02,
            kind: ScheduleKind::Linear,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        build_schedule(self.num_steps, self.beta_min, self.beta_max, self.kind)
    }
}

pub fn build_schedule(
    num_steps: usize,
    beta_min: f64,
    beta_max: f64,
    kind: ScheduleKind,
) -> Result<NoiseSchedule> {
    if num_steps == 0 {
        return Err(Error::InvalidSchedule("num_steps must be positive".into()));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::InvalidSchedule(format!(
            "need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
        )));
    }
    let betas = match kind {
        ScheduleKind::Linear => {
            if num_steps == 1 {
                vec![beta_min]
            } else {
                let span = (num_steps - 1) as f64;
                (0..num_steps)
                    .map(|i| beta_min + (beta_max - beta_min) * i as f64 / span)
                    .collect()
            }
        }
        ScheduleKind::Cosine => {
            // squared-cosine ᾱ(s) with offset 0.008, betas clipped into [beta_min, beta_max]
            let f = |s: f64| {
                let x = (s + 0.008) / 1.008 * std::f64::consts::FRAC_PI_2;
                x.cos().powi(2)
            };
            let n = num_steps as f64;
            (0..num_steps)
                .map(|i| {
                    let b = 1.0 - f((i + 1) as f64 / n) / f(i as f64 / n);
                    b.clamp(beta_min, beta_max)
                })
                .collect()
        }
    };
    NoiseSchedule::from_betas(betas)
}

impl NoiseSchedule {
    /// Builds a schedule from explicit variances, `betas[0]` being β_1.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidSchedule("no betas".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::InvalidSchedule(format!("beta {b} outside (0, 1)")));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0f64;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self { betas, alpha_bars })
    }

    pub fn num_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// β_t for `t ∈ [1, T]`.
    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        Ok(self.betas[t - 1])
    }

    /// ᾱ_t for `t ∈ [0, T]`, with ᾱ_0 = 1.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        match t {
            0 => Ok(1.0),
            t if t <= self.num_steps() => Ok(self.alpha_bars[t - 1]),
            t => Err(Error::StepOutOfRange {
                t,
                lo: 0,
                hi: self.num_steps(),
            }),
        }
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.num_steps() {
            return Err(Error::StepOutOfRange {
                t,
                lo: 1,
                hi: self.num_steps(),
            });
        }
        Ok(())
    }

    /// Evenly spaced training timesteps for an `n`-step sampler, descending
    /// from T. Fractional positions round toward the larger timestep.
    pub fn inference_timesteps(&self, n: usize) -> Result<Vec<usize>> {
        let total = self.num_steps();
        if n == 0 || n > total {
            return Err(Error::InvalidArgument(format!(
                "inference steps {n} must be in [1, {total}]"
            )));
        }
        Ok((0..n).map(|j| total - (j * total) / n).collect())
    }
}

/// Closed-form forward process: `√ᾱ_t·x0 + √(1−ᾱ_t)·ε`.
pub fn q_sample<S: Scalar, D: Dimension>(
    x0: ArrayView<'_, S, D>,
    t: usize,
    eps: ArrayView<'_, S, D>,
    schedule: &NoiseSchedule,
) -> Result<Array<S, D>> {
    if x0.shape() != eps.shape() {
        return Err(Error::DimensionMismatch {
            expected: x0.len(),
            got: eps.len(),
        });
    }
    schedule.check_step(t)?;
    let ab = schedule.alpha_bar(t)?;
    q_sample_with(x0, eps, ab)
}

/// Forward process with an explicit ᾱ, allowing the limits ᾱ ∈ {0, 1}.
pub fn q_sample_with<S: Scalar, D: Dimension>(
    x0: ArrayView<'_, S, D>,
    eps: ArrayView<'_, S, D>,
    alpha_bar: f64,
) -> Result<Array<S, D>> {
    if x0.shape() != eps.shape() {
        return Err(Error::DimensionMismatch {
            expected: x0.len(),
            got: eps.len(),
        });
    }
    if !(0.0..=1.0).contains(&alpha_bar) {
        return Err(Error::InvalidArgument(format!("alpha_bar {alpha_bar} outside [0, 1]")));
    }
    let signal = S::lit(alpha_bar.sqrt());
    let noise = S::lit((1.0 - alpha_bar).sqrt());
    Ok(Zip::from(&x0)
        .and(&eps)
        .map_collect(|&x, &e| signal * x + noise * e))
}
