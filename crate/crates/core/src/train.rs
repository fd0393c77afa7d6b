//! Momentum SGD with milestone decay and the two-stage schedule.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{LossWeights, OptimizerConfig, Toggles};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::langgraph::Category;
use crate::loss::{loss_terms, stage1_loss, stage2_loss};
use crate::model::{Model, SceneInput};
use crate::params::{GradientMap, ParamId, ParamKind, ParameterStore};
use crate::tape::Tape;

/// One supervised example.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub input: SceneInput,
    pub gt: Vec<BBox>,
    /// Coarse category of each phrase, for per-category accuracy.
    pub categories: Vec<Category>,
}

/// Learning rate after the milestones at or before `iteration`.
pub fn lr_at(base: f64, milestones: &[usize], factor: f64, iteration: usize) -> f64 {
    let passed = milestones.iter().filter(|m| iteration >= **m).count();
    base * factor.powi(passed as i32)
}

/// `v <- mu v - lr (g + wd theta)`, `theta <- theta + v`; biases skip decay.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Option<Array2<f64>>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd { momentum, weight_decay, velocity: Vec::new() }
    }

    pub fn step(&mut self, store: &mut ParameterStore, grads: &GradientMap, lr: f64, params: &[ParamId]) {
        if self.velocity.len() < store.len() {
            self.velocity.resize(store.len(), None);
        }
        for &id in params {
            let decay = if store.kind(id) == ParamKind::Bias { 0.0 } else { self.weight_decay };
            let theta = store.get_mut(id);
            let v = self.velocity[id.0].get_or_insert_with(|| Array2::zeros(theta.dim()));
            match grads.get(id) {
                Some(g) => ndarray::Zip::from(&mut *v).and(&*theta).and(g).for_each(|v, t, g| {
                    *v = self.momentum * *v - lr * (g + decay * t);
                }),
                None => ndarray::Zip::from(&mut *v).and(&*theta).for_each(|v, t| {
                    *v = self.momentum * *v - lr * decay * t;
                }),
            }
            *theta += &*v;
        }
    }
}

/// Rescale `grads` so its global norm is at most `max_norm` (zero disables).
pub fn clip(grads: &mut GradientMap, max_norm: f64) {
    if max_norm > 0.0 {
        let norm = grads.norm();
        if norm > max_norm {
            grads.scale(max_norm / norm);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    One,
    Two,
}

/// Mean loss of every iteration of one stage.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StageLog {
    pub losses: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub stage_one: StageLog,
    pub stage_two: Option<StageLog>,
}

/// Loss and accumulated gradient of one example.
pub fn example_gradient(
    model: &Model,
    ex: &Example,
    toggles: &Toggles,
    stage: Stage,
    weights: &LossWeights,
    tau: f64,
    grads: &mut GradientMap,
) -> Result<f64> {
    let mut tape = Tape::new(&model.store);
    let fwd = model.forward(&mut tape, &ex.input, toggles, stage == Stage::Two)?;
    let terms = loss_terms(&mut tape, &fwd, &ex.input, &ex.gt, tau)?;
    let loss = match stage {
        Stage::One => stage1_loss(&mut tape, &terms, weights),
        Stage::Two => stage2_loss(&mut tape, &terms, weights),
    };
    let value = tape.scalar(loss);
    if value.is_finite() {
        tape.backward_into(loss, grads);
    }
    Ok(value)
}

/// Run `iters` SGD iterations of one stage over `data`, cycling through
/// seeded shuffles of the examples.
#[allow(clippy::too_many_arguments)]
pub fn train_stage(
    model: &mut Model,
    data: &[Example],
    toggles: &Toggles,
    stage: Stage,
    weights: &LossWeights,
    opt: &OptimizerConfig,
    tau: f64,
    params: &[ParamId],
) -> Result<StageLog> {
    if data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let (iters, milestones, salt) = match stage {
        Stage::One => (opt.stage1_iters, &opt.stage1_milestones, 1u64),
        Stage::Two => (opt.stage2_iters, &opt.stage2_milestones, 2u64),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opt.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ salt);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut sgd = Sgd::new(opt.momentum, opt.weight_decay);
    let mut log = StageLog::default();
    for it in 0..iters {
        let mut grads = GradientMap::new(model.store.len());
        let mut total = 0.0;
        for _ in 0..opt.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let ex = &data[order[cursor]];
            cursor += 1;
            let loss = example_gradient(model, ex, toggles, stage, weights, tau, &mut grads)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { iteration: it, loss });
            }
            total += loss;
        }
        grads.scale(1.0 / opt.batch_size as f64);
        if !grads.all_finite() {
            return Err(Error::Diverged { iteration: it, loss: f64::NAN });
        }
        clip(&mut grads, opt.clip_norm);
        let lr = lr_at(opt.lr, milestones, opt.decay_factor, it);
        sgd.step(&mut model.store, &grads, lr, params);
        if !model.store.all_finite() {
            return Err(Error::Diverged { iteration: it, loss: f64::INFINITY });
        }
        log.losses.push(total / opt.batch_size as f64);
    }
    Ok(log)
}

/// Stage one trains the language side, object features and pruning head;
/// stage two, when the toggles need it, trains everything from fresh
/// momentum.
pub fn train_two_stage(
    model: &mut Model,
    data: &[Example],
    toggles: &Toggles,
    weights: &LossWeights,
    opt: &OptimizerConfig,
    tau: f64,
) -> Result<TrainReport> {
    let stage_one = train_stage_one(model, data, toggles, weights, opt, tau)?;
    let stage_two = if toggles.needs_stage_two() { Some(train_stage_two(model, data, toggles, weights, opt, tau)?) } else { None };
    Ok(TrainReport { stage_one, stage_two })
}

pub fn train_stage_one(
    model: &mut Model,
    data: &[Example],
    toggles: &Toggles,
    weights: &LossWeights,
    opt: &OptimizerConfig,
    tau: f64,
) -> Result<StageLog> {
    let params = model.stage_one_params();
    train_stage(model, data, toggles, Stage::One, weights, opt, tau, &params)
}

pub fn train_stage_two(
    model: &mut Model,
    data: &[Example],
    toggles: &Toggles,
    weights: &LossWeights,
    opt: &OptimizerConfig,
    tau: f64,
) -> Result<StageLog> {
    let params: Vec<ParamId> = model.store.ids().collect();
    train_stage(model, data, toggles, Stage::Two, weights, opt, tau, &params)
}
