//! Noise-prediction training and teacher→student distillation.

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::network::{mse, mse_grad, CondInput, DenoiserNetwork, Tape, Weights, COND_EMBED};
use super::optim::{Adam, AdamConfig, LrSchedule};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;

/// Mixed into the seed of the held-out validation batch.
const VALIDATION_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// Training points with their class labels.
#[derive(Debug, Clone, Copy)]
pub struct LabeledPoints<'a> {
    pub points: ArrayView2<'a, f64>,
    pub labels: &'a [usize],
}

impl LabeledPoints<'_> {
    fn check(&self) -> Result<()> {
        if self.points.nrows() == 0 {
            return Err(Error::InvalidArgument("empty dataset".into()));
        }
        if self.points.nrows() != self.labels.len() {
            return Err(Error::DimensionMismatch {
                expected: self.points.nrows(),
                got: self.labels.len(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    /// Probability of replacing the class with the null condition.
    pub cond_dropout: f64,
    pub validation_size: usize,
    pub log_every: usize,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 128,
            steps: 3000,
            seed: 0,
            cond_dropout: 0.1,
            validation_size: 512,
            log_every: 100,
            lr_schedule: LrSchedule::Constant,
        }
    }
}

/// Weights of the combined objective `task + λ_out·block MSE + λ_feat·output MSE`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    /// Weight of the per-block output matching term.
    pub lambda_outkd: f64,
    /// Weight of the final-output matching term.
    pub lambda_featkd: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub cond_dropout: f64,
    pub validation_size: usize,
    pub log_every: usize,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            lambda_outkd: 1.0,
            lambda_featkd: 1.0,
            learning_rate: 1e-3,
            batch_size: 128,
            steps: 2000,
            seed: 1,
            cond_dropout: 0.1,
            validation_size: 512,
            log_every: 100,
            lr_schedule: LrSchedule::Constant,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_outkd >= 0.0 && self.lambda_featkd >= 0.0) {
            return Err(Error::InvalidArgument("distillation weights must be nonnegative".into()));
        }
        Ok(())
    }
}

/// One minibatch of the noise-prediction objective.
#[derive(Debug, Clone)]
pub struct TrainingBatch<S> {
    pub z_t: Array2<S>,
    pub ts: Vec<usize>,
    pub eps: Array2<S>,
    pub classes: Vec<Option<usize>>,
}

pub fn sample_batch<S: Scalar, R: Rng>(
    data: &LabeledPoints<'_>,
    schedule: &NoiseSchedule,
    size: usize,
    cond_dropout: f64,
    rng: &mut R,
) -> TrainingBatch<S> {
    let dim = data.points.ncols();
    let mut z_t = Array2::zeros((size, dim));
    let mut eps = Array2::zeros((size, dim));
    let mut ts = Vec::with_capacity(size);
    let mut classes = Vec::with_capacity(size);
    for r in 0..size {
        let i = rng.gen_range(0..data.points.nrows());
        let t = rng.gen_range(1..=schedule.num_steps());
        let ab = schedule.alpha_bars()[t - 1];
        for c in 0..dim {
            let e: f64 = rng.sample(StandardNormal);
            eps[[r, c]] = S::lit(e);
            z_t[[r, c]] = S::lit(ab.sqrt() * data.points[[i, c]] + (1.0 - ab).sqrt() * e);
        }
        ts.push(t);
        let drop = cond_dropout > 0.0 && rng.gen::<f64>() < cond_dropout;
        classes.push((!drop).then_some(data.labels[i]));
    }
    TrainingBatch { z_t, ts, eps, classes }
}

/// Task loss `mean ‖ε − ε̂‖²` and its gradient.
pub fn task_gradient<S: Scalar>(net: &DenoiserNetwork<S>, batch: &TrainingBatch<S>) -> Result<(S, Weights<S>)> {
    let mut tape = Tape::new();
    let out = net.forward_recorded(batch.z_t.view(), &batch.ts, CondInput::Classes(&batch.classes), &mut tape)?;
    let loss = mse(out.eps.view(), batch.eps.view());
    let d_eps = mse_grad(out.eps.view(), batch.eps.view(), S::one());
    Ok((loss, net.backward(&tape, d_eps.view(), None)?))
}

pub fn task_loss<S: Scalar>(net: &DenoiserNetwork<S>, batch: &TrainingBatch<S>) -> Result<S> {
    let out = net.forward(batch.z_t.view(), &batch.ts, CondInput::Classes(&batch.classes))?;
    Ok(mse(out.eps.view(), batch.eps.view()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillLosses {
    pub task: f64,
    /// Sum over blocks of the per-block output MSE.
    pub out_kd: f64,
    /// MSE between final noise predictions.
    pub feat_kd: f64,
    pub total: f64,
}

pub fn distill_losses<S: Scalar>(
    student: &DenoiserNetwork<S>,
    teacher: &DenoiserNetwork<S>,
    batch: &TrainingBatch<S>,
    config: &DistillConfig,
) -> Result<DistillLosses> {
    check_pairing(student, teacher)?;
    let cond = CondInput::Classes(&batch.classes);
    let s = student.forward(batch.z_t.view(), &batch.ts, cond)?;
    let t = teacher.forward(batch.z_t.view(), &batch.ts, cond)?;
    Ok(combine_losses(&s.eps, &s.blocks, &t.eps, &t.blocks, &batch.eps, config))
}

fn combine_losses<S: Scalar>(
    s_eps: &Array2<S>,
    s_blocks: &[Array2<S>],
    t_eps: &Array2<S>,
    t_blocks: &[Array2<S>],
    target: &Array2<S>,
    config: &DistillConfig,
) -> DistillLosses {
    let task = mse(s_eps.view(), target.view()).as_f64();
    let feat_kd = mse(s_eps.view(), t_eps.view()).as_f64();
    let out_kd: f64 = s_blocks
        .iter()
        .zip(t_blocks)
        .map(|(a, b)| mse(a.view(), b.view()).as_f64())
        .sum();
    DistillLosses {
        task,
        out_kd,
        feat_kd,
        total: task + config.lambda_outkd * out_kd + config.lambda_featkd * feat_kd,
    }
}

fn check_pairing<S: Scalar>(student: &DenoiserNetwork<S>, teacher: &DenoiserNetwork<S>) -> Result<()> {
    let (a, b) = (student.descriptor.blocks(), teacher.descriptor.blocks());
    if a != b {
        return Err(Error::DescriptorMismatch(format!(
            "student has {} blocks, teacher {}",
            a.len(),
            b.len()
        )));
    }
    if student.descriptor.model_dim != teacher.descriptor.model_dim
        || student.descriptor.latent_dim != teacher.descriptor.latent_dim
    {
        return Err(Error::DescriptorMismatch("block output widths differ".into()));
    }
    Ok(())
}

/// Gradient of the distillation objective. Terms whose weight is zero are
/// skipped entirely, so with both weights at zero this is exactly
/// [`task_gradient`].
pub fn distill_gradient<S: Scalar>(
    student: &DenoiserNetwork<S>,
    teacher: &DenoiserNetwork<S>,
    batch: &TrainingBatch<S>,
    config: &DistillConfig,
) -> Result<(DistillLosses, Weights<S>)> {
    check_pairing(student, teacher)?;
    let cond = CondInput::Classes(&batch.classes);
    let t = teacher.forward(batch.z_t.view(), &batch.ts, cond)?;
    let mut tape = Tape::new();
    let s = student.forward_recorded(batch.z_t.view(), &batch.ts, cond, &mut tape)?;
    let losses = combine_losses(&s.eps, &s.blocks, &t.eps, &t.blocks, &batch.eps, config);

    let mut d_eps = mse_grad(s.eps.view(), batch.eps.view(), S::one());
    if config.lambda_featkd != 0.0 {
        d_eps += &mse_grad(s.eps.view(), t.eps.view(), S::lit(config.lambda_featkd));
    }
    let d_blocks = (config.lambda_outkd != 0.0).then(|| {
        s.blocks
            .iter()
            .zip(&t.blocks)
            .map(|(a, b)| mse_grad(a.view(), b.view(), S::lit(config.lambda_outkd)))
            .collect::<Vec<_>>()
    });
    let grads = student.backward(&tape, d_eps.view(), d_blocks.as_deref())?;
    Ok((losses, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainingLog {
    pub losses: Vec<LossRecord>,
    pub initial_validation: f64,
    pub final_validation: f64,
}

pub fn train_task<S: Scalar>(
    net: &mut DenoiserNetwork<S>,
    data: &LabeledPoints<'_>,
    schedule: &NoiseSchedule,
    config: &TrainConfig,
) -> Result<TrainingLog> {
    data.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut val_rng = ChaCha8Rng::seed_from_u64(config.seed ^ VALIDATION_SALT);
    let validation: TrainingBatch<S> = sample_batch(data, schedule, config.validation_size, 0.0, &mut val_rng);
    let mut log = TrainingLog {
        initial_validation: task_loss(net, &validation)?.as_f64(),
        ..Default::default()
    };
    let mut adam = Adam::new(
        &net.weights,
        AdamConfig {
            learning_rate: config.learning_rate,
            ..Default::default()
        },
    );
    for step in 0..config.steps {
        adam.set_learning_rate(config.lr_schedule.rate(config.learning_rate, step, config.steps));
        let batch = sample_batch(data, schedule, config.batch_size, config.cond_dropout, &mut rng);
        let (loss, grads) = task_gradient(net, &batch)?;
        let loss = loss.as_f64();
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("task loss {loss}"),
            });
        }
        adam.step(&mut net.weights, &grads);
        if config.log_every > 0 && step % config.log_every == 0 {
            log.losses.push(LossRecord { step, loss });
            log::debug!("train step {step}: loss {loss:.5}");
        }
    }
    log.final_validation = task_loss(net, &validation)?.as_f64();
    if !log.final_validation.is_finite() {
        return Err(Error::Diverged {
            step: config.steps,
            detail: "validation loss is not finite".into(),
        });
    }
    Ok(log)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct DistillLog {
    pub steps: Vec<(usize, DistillLosses)>,
    pub initial_validation: Option<DistillLosses>,
    pub final_validation: Option<DistillLosses>,
}

/// Fine-tunes `student` against `teacher`. The condition encoder is shared
/// with the teacher and stays frozen.
pub fn distill<S: Scalar>(
    student: &mut DenoiserNetwork<S>,
    teacher: &DenoiserNetwork<S>,
    data: &LabeledPoints<'_>,
    schedule: &NoiseSchedule,
    config: &DistillConfig,
) -> Result<DistillLog> {
    data.check()?;
    config.validate()?;
    check_pairing(student, teacher)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut val_rng = ChaCha8Rng::seed_from_u64(config.seed ^ VALIDATION_SALT);
    let validation: TrainingBatch<S> = sample_batch(data, schedule, config.validation_size, 0.0, &mut val_rng);
    let mut log = DistillLog {
        initial_validation: Some(distill_losses(student, teacher, &validation, config)?),
        ..Default::default()
    };
    let mut adam = Adam::new(
        &student.weights,
        AdamConfig {
            learning_rate: config.learning_rate,
            ..Default::default()
        },
    );
    adam.freeze(COND_EMBED);
    for step in 0..config.steps {
        adam.set_learning_rate(config.lr_schedule.rate(config.learning_rate, step, config.steps));
        let batch = sample_batch(data, schedule, config.batch_size, config.cond_dropout, &mut rng);
        let (losses, grads) = distill_gradient(student, teacher, &batch, config)?;
        if !losses.total.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("distillation loss {:?}", losses),
            });
        }
        adam.step(&mut student.weights, &grads);
        if config.log_every > 0 && step % config.log_every == 0 {
            log.steps.push((step, losses));
        }
    }
    log.final_validation = Some(distill_losses(student, teacher, &validation, config)?);
    Ok(log)
}
