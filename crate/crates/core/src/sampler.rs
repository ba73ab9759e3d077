//! Reverse-process updates: ancestral DDPM, DDIM and a second-order
//! multistep DPM-Solver, plus classifier-free guidance.
//!
//! All updates are ε-parameterized. The `*_update` functions are the pure
//! arithmetic on a given noise prediction; the `*_step` functions query a
//! [`NoisePredictor`] first.

use ndarray::{Array, Array2, ArrayView, ArrayView2, ArrayView3, Dimension, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise;
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Ddpm,
    Ddim,
    #[default]
    Dpm2m,
}

impl SamplerKind {
    pub fn code(self) -> u8 {
        match self {
            SamplerKind::Ddpm => 0,
            SamplerKind::Ddim => 1,
            SamplerKind::Dpm2m => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(SamplerKind::Ddpm),
            1 => Some(SamplerKind::Ddim),
            2 => Some(SamplerKind::Dpm2m),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub num_inference_steps: usize,
    pub guidance_scale: f64,
    /// DDIM stochasticity; ignored by the other samplers.
    #[serde(default)]
    pub eta: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            kind: SamplerKind::Dpm2m,
            num_inference_steps: 25,
            guidance_scale: 7.0,
            eta: 0.0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.num_inference_steps == 0 || self.num_inference_steps > schedule.num_steps() {
            return Err(Error::InvalidArgument(format!(
                "num_inference_steps {} must be in [1, {}]",
                self.num_inference_steps,
                schedule.num_steps()
            )));
        }
        if !(self.guidance_scale >= 0.0 && self.guidance_scale.is_finite()) {
            return Err(Error::InvalidArgument("guidance scale must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::InvalidArgument("eta must be in [0, 1]".into()));
        }
        Ok(())
    }

    /// Network evaluations per denoising step.
    pub fn evals_per_step(&self) -> usize {
        if self.guidance_scale == 1.0 {
            1
        } else {
            2
        }
    }
}

/// Condition input to a noise predictor: explicit per-row tokens, or the
/// model's own null (unconditional) tokens.
#[derive(Debug, Clone, Copy)]
pub enum Conditioning<'a, S> {
    Null,
    Tokens(ArrayView3<'a, S>),
}

pub trait NoisePredictor<S: Scalar> {
    fn latent_dim(&self) -> usize;

    /// ε̂(z, t, c) for every row of `z`.
    fn predict_noise(
        &self,
        z: ArrayView2<'_, S>,
        t: usize,
        cond: Conditioning<'_, S>,
    ) -> Result<Array2<S>>;
}

impl<S: Scalar, M: NoisePredictor<S> + ?Sized> NoisePredictor<S> for &M {
    fn latent_dim(&self) -> usize {
        (**self).latent_dim()
    }
    fn predict_noise(
        &self,
        z: ArrayView2<'_, S>,
        t: usize,
        cond: Conditioning<'_, S>,
    ) -> Result<Array2<S>> {
        (**self).predict_noise(z, t, cond)
    }
}

/// `(1 − w)·ε_u + w·ε_c`, i.e. `ε_u + w·(ε_c − ε_u)` arranged so that
/// `w = 0` and `w = 1` return their input exactly.
pub fn cfg_combine<S: Scalar, D: Dimension>(
    eps_uncond: ArrayView<'_, S, D>,
    eps_cond: ArrayView<'_, S, D>,
    w: f64,
) -> Result<Array<S, D>> {
    if eps_uncond.shape() != eps_cond.shape() {
        return Err(Error::DimensionMismatch {
            expected: eps_uncond.len(),
            got: eps_cond.len(),
        });
    }
    let wu = S::lit(1.0 - w);
    let wc = S::lit(w);
    Ok(Zip::from(&eps_uncond)
        .and(&eps_cond)
        .map_collect(|&u, &c| wu * u + wc * c))
}

#[derive(Debug, Clone, Copy)]
pub struct Guidance<'a, S> {
    pub tokens: Option<ArrayView3<'a, S>>,
    pub scale: f64,
}

impl<'a, S> Guidance<'a, S> {
    pub fn unconditional() -> Self {
        Self {
            tokens: None,
            scale: 1.0,
        }
    }
}

/// Guided noise prediction. Skips the unconditional pass at `w = 1`.
pub fn guided_noise<S: Scalar, M: NoisePredictor<S> + ?Sized>(
    model: &M,
    z: ArrayView2<'_, S>,
    t: usize,
    guide: &Guidance<'_, S>,
) -> Result<Array2<S>> {
    let Some(tokens) = guide.tokens else {
        return model.predict_noise(z, t, Conditioning::Null);
    };
    let cond = model.predict_noise(z, t, Conditioning::Tokens(tokens))?;
    if guide.scale == 1.0 {
        return Ok(cond);
    }
    let uncond = model.predict_noise(z, t, Conditioning::Null)?;
    cfg_combine(uncond.view(), cond.view(), guide.scale)
}

/// A batch of trajectories sharing a timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState<S> {
    /// One row per trajectory.
    pub z: Array2<S>,
    pub t: usize,
    pub seed: u64,
}

impl<S: Scalar> LatentState<S> {
    pub fn new(z: Array2<S>, t: usize, seed: u64) -> Result<Self> {
        let state = Self { z, t, seed };
        state.check_finite()?;
        Ok(state)
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.z.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("non-finite latent at t={}", self.t)))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryEntry<S> {
    pub t: usize,
    pub eps: Array2<S>,
}

/// Previous noise prediction kept by the multistep solver.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverHistory<S> {
    pub prev: Option<HistoryEntry<S>>,
}

impl<S> Default for SolverHistory<S> {
    fn default() -> Self {
        Self { prev: None }
    }
}

impl<S> SolverHistory<S> {
    pub fn is_empty(&self) -> bool {
        self.prev.is_none()
    }
}

fn check_transition(schedule: &NoiseSchedule, from: usize, to: usize) -> Result<()> {
    if from == 0 || from > schedule.num_steps() {
        return Err(Error::StepOutOfRange {
            t: from,
            lo: 1,
            hi: schedule.num_steps(),
        });
    }
    if to >= from {
        return Err(Error::InvalidArgument(format!(
            "target step {to} must precede {from}"
        )));
    }
    Ok(())
}

fn check_same_shape<S>(a: &ArrayView2<'_, S>, b: &ArrayView2<'_, S>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(())
}

/// x̂₀ = (z − √(1−ᾱ_t)·ε) / √ᾱ_t
pub fn predict_x0<S: Scalar>(
    z: ArrayView2<'_, S>,
    eps: ArrayView2<'_, S>,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<Array2<S>> {
    check_same_shape(&z, &eps)?;
    let ab = schedule.alpha_bar(t)?;
    let sig = S::lit((1.0 - ab).sqrt());
    let inv_alpha = S::lit(1.0 / ab.sqrt());
    Ok(Zip::from(&z)
        .and(&eps)
        .map_collect(|&z, &e| (z - sig * e) * inv_alpha))
}

/// Ancestral step `from → to` through the Gaussian posterior
/// q(z_to | z_from, x̂₀) with its fixed variance β̃.
pub fn ddpm_update<S: Scalar>(
    z: ArrayView2<'_, S>,
    eps: ArrayView2<'_, S>,
    from: usize,
    to: usize,
    schedule: &NoiseSchedule,
    noise: ArrayView2<'_, S>,
) -> Result<Array2<S>> {
    check_transition(schedule, from, to)?;
    check_same_shape(&z, &noise)?;
    let x0 = predict_x0(z, eps, from, schedule)?;
    let ab_t = schedule.alpha_bar(from)?;
    let ab_s = schedule.alpha_bar(to)?;
    let a_ts = ab_t / ab_s;
    let b_ts = 1.0 - a_ts;
    let c_x0 = S::lit(ab_s.sqrt() * b_ts / (1.0 - ab_t));
    let c_z = S::lit(a_ts.sqrt() * (1.0 - ab_s) / (1.0 - ab_t));
    let std = S::lit(posterior_variance(ab_t, ab_s).sqrt());
    Ok(Zip::from(&x0)
        .and(&z)
        .and(&noise)
        .map_collect(|&x, &z, &n| c_x0 * x + c_z * z + std * n))
}

/// β̃ for the transition between cumulative coefficients ᾱ_t and ᾱ_s.
pub fn posterior_variance(alpha_bar_t: f64, alpha_bar_s: f64) -> f64 {
    (1.0 - alpha_bar_s) / (1.0 - alpha_bar_t) * (1.0 - alpha_bar_t / alpha_bar_s)
}

/// DDIM noise scale σ(η); η = 1 recovers the ancestral variance.
pub fn ddim_sigma(alpha_bar_t: f64, alpha_bar_s: f64, eta: f64) -> f64 {
    eta * posterior_variance(alpha_bar_t, alpha_bar_s).sqrt()
}

pub fn ddim_update<S: Scalar>(
    z: ArrayView2<'_, S>,
    eps: ArrayView2<'_, S>,
    from: usize,
    to: usize,
    schedule: &NoiseSchedule,
    eta: f64,
    noise: Option<ArrayView2<'_, S>>,
) -> Result<Array2<S>> {
    check_transition(schedule, from, to)?;
    let x0 = predict_x0(z, eps, from, schedule)?;
    let ab_t = schedule.alpha_bar(from)?;
    let ab_s = schedule.alpha_bar(to)?;
    let sigma = ddim_sigma(ab_t, ab_s, eta);
    let c_x0 = S::lit(ab_s.sqrt());
    let c_eps = S::lit((1.0 - ab_s - sigma * sigma).max(0.0).sqrt());
    let mut out = Zip::from(&x0)
        .and(&eps)
        .map_collect(|&x, &e| c_x0 * x + c_eps * e);
    if sigma > 0.0 {
        let noise = noise.ok_or_else(|| {
            Error::InvalidArgument("eta > 0 requires a noise sample".into())
        })?;
        check_same_shape(&z, &noise)?;
        let s = S::lit(sigma);
        Zip::from(&mut out).and(&noise).for_each(|o, &n| *o += s * n);
    }
    Ok(out)
}

/// Half log-SNR λ = log(α/σ) at timestep `t ≥ 1`.
pub fn half_log_snr(schedule: &NoiseSchedule, t: usize) -> Result<f64> {
    let ab = schedule.alpha_bar(t)?;
    Ok(0.5 * (ab.ln() - (1.0 - ab).ln()))
}

/// Second-order multistep DPM-Solver (midpoint form) on ε predictions.
///
/// Without history, and on the final step into t = 0 where λ diverges,
/// this is the first-order solver, which coincides with deterministic DDIM.
/// The second-order correction is added on top of that DDIM result so the
/// two paths agree bit-for-bit whenever the correction vanishes.
pub fn dpm2m_update<S: Scalar>(
    z: ArrayView2<'_, S>,
    eps: ArrayView2<'_, S>,
    from: usize,
    to: usize,
    schedule: &NoiseSchedule,
    history: &SolverHistory<S>,
) -> Result<Array2<S>> {
    check_transition(schedule, from, to)?;
    validate_history(history, from, z.dim())?;
    let mut out = ddim_update(z, eps, from, to, schedule, 0.0, None)?;
    let Some(prev) = history.prev.as_ref() else {
        return Ok(out);
    };
    if to == 0 {
        return Ok(out);
    }
    let lam_prev = half_log_snr(schedule, prev.t)?;
    let lam_t = half_log_snr(schedule, from)?;
    let lam_s = half_log_snr(schedule, to)?;
    let h = lam_s - lam_t;
    let r0 = (lam_t - lam_prev) / h;
    let (ab_t, ab_s) = (schedule.alpha_bar(from)?, schedule.alpha_bar(to)?);
    let (a_t, a_s) = (ab_t.sqrt(), ab_s.sqrt());
    let (s_t, s_s) = ((1.0 - ab_t).sqrt(), (1.0 - ab_s).sqrt());
    // σ_s·(e^h − 1), written without the exponential
    let phi = a_s * s_t / a_t - s_s;
    let c = S::lit(-0.5 * phi / r0);
    Zip::from(&mut out)
        .and(&eps)
        .and(&prev.eps)
        .for_each(|o, &e, &p| *o += c * (e - p));
    Ok(out)
}

fn validate_history<S>(history: &SolverHistory<S>, from: usize, dim: (usize, usize)) -> Result<()> {
    if let Some(prev) = &history.prev {
        if prev.t <= from {
            return Err(Error::MalformedHistory(format!(
                "history timestep {} must exceed current step {from}",
                prev.t
            )));
        }
        if prev.eps.dim() != dim {
            return Err(Error::MalformedHistory(format!(
                "history shape {:?} does not match latent {:?}",
                prev.eps.dim(),
                dim
            )));
        }
    }
    Ok(())
}

fn require_started(state: &LatentState<impl Scalar>) -> Result<()> {
    if state.t == 0 {
        return Err(Error::InvalidArgument("latent is already at t = 0".into()));
    }
    Ok(())
}

pub fn ddpm_step<S: Scalar, M: NoisePredictor<S> + ?Sized>(
    model: &M,
    state: &LatentState<S>,
    guide: &Guidance<'_, S>,
    schedule: &NoiseSchedule,
    to: usize,
    noise: ArrayView2<'_, S>,
) -> Result<LatentState<S>> {
    require_started(state)?;
    let eps = guided_noise(model, state.z.view(), state.t, guide)?;
    let z = ddpm_update(state.z.view(), eps.view(), state.t, to, schedule, noise)?;
    LatentState::new(z, to, state.seed)
}

pub fn ddim_step<S: Scalar, M: NoisePredictor<S> + ?Sized>(
    model: &M,
    state: &LatentState<S>,
    guide: &Guidance<'_, S>,
    schedule: &NoiseSchedule,
    to: usize,
    eta: f64,
    noise: Option<ArrayView2<'_, S>>,
) -> Result<LatentState<S>> {
    require_started(state)?;
    let eps = guided_noise(model, state.z.view(), state.t, guide)?;
    let z = ddim_update(state.z.view(), eps.view(), state.t, to, schedule, eta, noise)?;
    LatentState::new(z, to, state.seed)
}

pub fn dpm2m_step<S: Scalar, M: NoisePredictor<S> + ?Sized>(
    model: &M,
    state: &LatentState<S>,
    guide: &Guidance<'_, S>,
    schedule: &NoiseSchedule,
    to: usize,
    history: &SolverHistory<S>,
) -> Result<(LatentState<S>, SolverHistory<S>)> {
    require_started(state)?;
    validate_history(history, state.t, state.z.dim())?;
    let eps = guided_noise(model, state.z.view(), state.t, guide)?;
    let z = dpm2m_update(state.z.view(), eps.view(), state.t, to, schedule, history)?;
    let next = SolverHistory {
        prev: Some(HistoryEntry { t: state.t, eps }),
    };
    Ok((LatentState::new(z, to, state.seed)?, next))
}

/// One step of whichever sampler `config` names, drawing any injected
/// noise from the trajectory seed at `position`.
#[allow(clippy::too_many_arguments)]
pub fn sampler_step<S: Scalar, M: NoisePredictor<S> + ?Sized>(
    model: &M,
    config: &SamplerConfig,
    schedule: &NoiseSchedule,
    state: &LatentState<S>,
    to: usize,
    guide: &Guidance<'_, S>,
    history: &mut SolverHistory<S>,
    position: usize,
) -> Result<LatentState<S>> {
    let (rows, dim) = state.z.dim();
    match config.kind {
        SamplerKind::Ddpm => {
            let n = noise::step_noise(state.seed, position, rows, dim);
            ddpm_step(model, state, guide, schedule, to, n.view())
        }
        SamplerKind::Ddim => {
            let n = (config.eta > 0.0).then(|| noise::step_noise(state.seed, position, rows, dim));
            ddim_step(model, state, guide, schedule, to, config.eta, n.as_ref().map(|n| n.view()))
        }
        SamplerKind::Dpm2m => {
            let (next, h) = dpm2m_step(model, state, guide, schedule, to, history)?;
            *history = h;
            Ok(next)
        }
    }
}

/// Target timestep of the step at `position` in a descending schedule.
pub fn next_timestep(timesteps: &[usize], position: usize) -> usize {
    timesteps.get(position + 1).copied().unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{build_schedule, q_sample, ScheduleKind, ScheduleConfig};
    use ndarray::{array, Array2};

    /// Returns a fixed ε regardless of input: the exact noise used to build z_t.
    struct FixedEps(Array2<f64>);

    impl NoisePredictor<f64> for FixedEps {
        fn latent_dim(&self) -> usize {
            self.0.ncols()
        }
        fn predict_noise(
            &self,
            _z: ArrayView2<'_, f64>,
            _t: usize,
            _c: Conditioning<'_, f64>,
        ) -> Result<Array2<f64>> {
            Ok(self.0.clone())
        }
    }

    fn schedule() -> NoiseSchedule {
        ScheduleConfig::default().build().unwrap()
    }

    #[test]
    fn cfg_examples() {
        let u = array![0.0f64, 0.0];
        let c = array![1.0f64, 2.0];
        assert_eq!(cfg_combine(u.view(), c.view(), 7.0).unwrap(), array![7.0, 14.0]);
        let u = array![0.3f32, -1.7];
        let c = array![0.1f32, 2.9];
        assert_eq!(cfg_combine(u.view(), c.view(), 1.0).unwrap(), c);
        assert_eq!(cfg_combine(u.view(), c.view(), 0.0).unwrap(), u);
        let short = array![1.0f32];
        assert!(cfg_combine(u.view(), short.view(), 2.0).is_err());
    }

    #[test]
    fn ddpm_recovers_x0_from_first_step() {
        let s = schedule();
        let x0 = array![[1.25, -0.5]];
        let eps = array![[0.3, -1.1]];
        let z1 = q_sample(x0.view(), 1, eps.view(), &s).unwrap();
        let model = FixedEps(eps.clone());
        let state = LatentState::new(z1, 1, 0).unwrap();
        let noise = array![[5.0, -5.0]];
        let out = ddpm_step(&model, &state, &Guidance::unconditional(), &s, 0, noise.view()).unwrap();
        assert_eq!(out.t, 0);
        for (a, b) in out.z.iter().zip(x0.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn ddpm_vanishing_beta_is_identity() {
        let s = NoiseSchedule::from_betas(vec![1e-12; 3]).unwrap();
        let z = array![[0.7f64, -0.2]];
        let eps = array![[0.1, 0.4]];
        let noise = array![[1.0, 1.0]];
        let out = ddpm_update(z.view(), eps.view(), 3, 2, &s, noise.view()).unwrap();
        for (a, b) in out.iter().zip(z.iter()) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn ddpm_rejects_t_zero() {
        let s = schedule();
        let model = FixedEps(array![[0.0, 0.0]]);
        let state = LatentState::new(array![[0.0, 0.0]], 0, 0).unwrap();
        let n = array![[0.0, 0.0]];
        assert!(ddpm_step(&model, &state, &Guidance::unconditional(), &s, 0, n.view()).is_err());
    }

    #[test]
    fn ddim_eta_one_matches_ancestral_variance() {
        // σ(η=1)² against the stepwise posterior variance (1−ᾱ_{t−1})/(1−ᾱ_t)·β_t
        let s = build_schedule(1000, 1e-4, 0.02, ScheduleKind::Linear).unwrap();
        for t in [2usize, 17, 250, 640, 999] {
            let ab_t = s.alpha_bar(t).unwrap();
            let ab_s = s.alpha_bar(t - 1).unwrap();
            let beta = s.beta(t).unwrap();
            let expected = (1.0 - ab_s) / (1.0 - ab_t) * beta;
            let sigma = ddim_sigma(ab_t, ab_s, 1.0);
            assert!((sigma * sigma - expected).abs() < 1e-12 * expected.max(1e-12) + 1e-15);
        }
    }

    #[test]
    fn ddim_eta_one_equals_ddpm_update() {
        let s = schedule();
        let z = array![[0.4f64, -0.9], [1.2, 0.1]];
        let eps = array![[0.2, -0.3], [0.5, 0.8]];
        let noise = array![[0.6, 0.1], [-0.4, 0.9]];
        for t in [5usize, 300, 1000] {
            let a = ddim_update(z.view(), eps.view(), t, t - 1, &s, 1.0, Some(noise.view())).unwrap();
            let b = ddpm_update(z.view(), eps.view(), t, t - 1, &s, noise.view()).unwrap();
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn ddim_requires_noise_when_stochastic() {
        let s = schedule();
        let z = array![[0.4, -0.9]];
        assert!(ddim_update(z.view(), z.view(), 10, 5, &s, 0.5, None).is_err());
    }

    #[test]
    fn perfect_eps_predicts_x0_everywhere() {
        let s = schedule();
        let x0 = array![[2.0f64, -3.0]];
        let eps = array![[-0.7, 1.3]];
        for t in [1usize, 10, 500, 1000] {
            let zt = q_sample(x0.view(), t, eps.view(), &s).unwrap();
            let pred = predict_x0(zt.view(), eps.view(), t, &s).unwrap();
            for (a, b) in pred.iter().zip(x0.iter()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn dpm2m_empty_history_is_ddim() {
        let s = schedule();
        let z = array![[0.31f32, -1.4]];
        let eps = array![[0.2f32, 0.6]];
        let h = SolverHistory::default();
        let a = dpm2m_update(z.view(), eps.view(), 600, 560, &s, &h).unwrap();
        let b = ddim_update(z.view(), eps.view(), 600, 560, &s, 0.0, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dpm2m_identical_eps_is_first_order() {
        let s = schedule();
        let z = array![[0.31f32, -1.4]];
        let eps = array![[0.2f32, 0.6]];
        let h = SolverHistory {
            prev: Some(HistoryEntry { t: 640, eps: eps.clone() }),
        };
        let a = dpm2m_update(z.view(), eps.view(), 600, 560, &s, &h).unwrap();
        let b = ddim_update(z.view(), eps.view(), 600, 560, &s, 0.0, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dpm2m_rejects_malformed_history() {
        let s = schedule();
        let z = array![[0.31f32, -1.4]];
        let eps = array![[0.2f32, 0.6]];
        let stale = SolverHistory {
            prev: Some(HistoryEntry { t: 600, eps: eps.clone() }),
        };
        assert!(matches!(
            dpm2m_update(z.view(), eps.view(), 600, 560, &s, &stale),
            Err(Error::MalformedHistory(_))
        ));
        let wrong_shape = SolverHistory {
            prev: Some(HistoryEntry { t: 640, eps: array![[0.0f32]] }),
        };
        assert!(dpm2m_update(z.view(), eps.view(), 600, 560, &s, &wrong_shape).is_err());
    }
}
