//! End-to-end training driver: fresh samples every step, noise-prediction
//! regression on the target tokens, Adam with gradient clipping.
//!
//! All randomness flows through three independent streams derived from the
//! run seed — parameter init, data sampling, and noise/timestep draws — so a
//! rerun with the same configuration reproduces the checkpoint and the loss
//! curve bit for bit.

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::diffusion::{linear_schedule, q_sample, train_step, AdamParams, AdamState, TrainItem};
use crate::error::Result;
use crate::modality::{patchify, GridShape};
use crate::model::{build_inputs, ModelParams};
use crate::rng::{streams, SplitMix64};
use crate::toytask::gen_sample;
use crate::Tensor;

/// One logged point of the loss curve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub loss: f64,
}

/// Trained parameters plus the logged loss curve.
#[derive(Debug)]
pub struct TrainOutput {
    pub params: ModelParams,
    pub metrics: Vec<MetricsRow>,
}

/// Runs the configured training loop. `on_log` fires for every recorded
/// metrics row (every `log_every` steps and at the final step).
pub fn train_run_with(
    config: &RunConfig,
    on_log: &mut dyn FnMut(&MetricsRow),
) -> Result<TrainOutput> {
    config.validate()?;
    let dims = config.dims();
    let sched = linear_schedule(
        config.schedule.steps,
        config.schedule.beta_start,
        config.schedule.beta_end,
    )?;
    let mut init_rng = SplitMix64::split(config.seed, streams::PARAM_INIT);
    let mut model = ModelParams::init(config.variant, dims, &mut init_rng)?;
    let mut adam = AdamState::new(&model);
    let hp = AdamParams {
        lr: config.train.lr,
        beta1: config.train.beta1,
        beta2: config.train.beta2,
        ..AdamParams::default()
    };

    let mut data_rng = SplitMix64::split(config.seed, streams::TRAIN_DATA);
    let mut noise_rng = SplitMix64::split(config.seed, streams::TRAIN_NOISE);
    let task = &config.task;
    let grid = GridShape::new(task.frames, task.height, task.width, task.channels);

    let mut metrics = Vec::new();
    for step in 1..=config.train.steps {
        let mut batch = Vec::with_capacity(config.train.batch);
        for _ in 0..config.train.batch {
            let sample = gen_sample(data_rng.next_u64(), task)?;
            let t = noise_rng.next_below(sched.len());
            let eps = Tensor::randn(sample.target.shape(), 1.0, &mut noise_rng);
            let x_t = q_sample(&sample.target, t, &eps, &sched)?;
            let ids = sample.text_ids(task.text_tokens);
            let inputs = build_inputs(&sample.condition(&ids), &x_t, dims.patch)?;
            let eps_tokens = patchify(&eps, grid, dims.patch)?;
            batch.push(TrainItem { inputs, t, eps_tokens });
        }
        let loss = train_step(&mut model, &batch, &mut adam, &hp)?;
        if step % config.train.log_every == 0 || step == config.train.steps {
            let row = MetricsRow { step, loss };
            on_log(&row);
            metrics.push(row);
        }
    }
    Ok(TrainOutput { params: model, metrics })
}

/// [`train_run_with`] without a logging callback.
pub fn train_run(config: &RunConfig) -> Result<TrainOutput> {
    train_run_with(config, &mut |_| {})
}

// ---------------------------------------------------------------------------
// tests
// ---------------------------------------------------------------------------
