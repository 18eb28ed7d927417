//! Two-tower training loop.

use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::datasynth::{World, WorldConfig};
use crate::encoder::build_input_matrix;
use crate::error::{Error, Result};
use crate::model::{self, ModelConfig};
use crate::numerics::{grad_check_tape, Adam, AdamConfig, GradCheckConfig, GradCheckReport, ParamStore, Tape, Tensor};
use crate::objective::{build_batch_terms, record_loss, sample_negatives, targets_for, ObjectiveConfig};
use crate::rng;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Fraction of users, highest ids first, never trained on.
    pub held_out_fraction: f64,
    pub model: ModelConfig,
    pub objective: ObjectiveConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 1500,
            batch_size: 16,
            adam: AdamConfig {
                lr: 2e-3,
                ..AdamConfig::default()
            },
            held_out_fraction: 0.2,
            model: ModelConfig::default(),
            objective: ObjectiveConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.objective.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.held_out_fraction) {
            return Err(Error::Config("held_out_fraction must lie in [0, 1)".into()));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// `(train, held_out)` user id ranges: the last `fraction` of ids is held out.
pub fn split_users(n_users: usize, fraction: f64) -> (Range<u32>, Range<u32>) {
    let held = ((n_users as f64) * fraction).round() as usize;
    let cut = (n_users - held.min(n_users)) as u32;
    (0..cut, cut..n_users as u32)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    /// `None` when the batch had no (position, target) pairs.
    pub loss: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ParamStore,
    pub log: Vec<StepLog>,
}

impl TrainOutcome {
    pub fn losses(&self) -> impl Iterator<Item = f64> + '_ {
        self.log.iter().filter_map(|s| s.loss)
    }
}

pub fn pin_feature_matrix(world: &World, ids: &[u32]) -> Result<Tensor> {
    let rows: Vec<Vec<f64>> = ids.iter().map(|&p| world.pins[p as usize].embedding.clone()).collect();
    Tensor::from_rows(&rows)
}

/// One optimisation step on a sampled batch. Returns `Ok(None)` for a batch
/// without targets.
fn train_step(world: &World, cfg: &TrainConfig, users: &[u32], params: &mut ParamStore, adam: &mut Adam, step: usize) -> Result<Option<f64>> {
    let mut r = rng::stream(cfg.seed, &[rng::BATCHES, step as u64]);
    let enc = cfg.model.encoder();
    let mut windows = Vec::with_capacity(cfg.batch_size);
    let mut targets = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size {
        let user = &world.users[users[r.random_range(0..users.len())] as usize];
        let k = r.random_range(0..user.actions.len() - 1);
        let window = build_input_matrix(&user.actions, &world.pins, user.actions[k].timestamp, &enc)?;
        targets.push(targets_for(&window, &user.actions, &cfg.objective));
        windows.push(window);
    }
    let negatives = sample_negatives(&targets, world.pins.len(), &cfg.objective, cfg.seed, step as u64)?;
    let terms = build_batch_terms(&targets, &negatives, cfg.objective.use_in_batch_negatives)?;
    if terms.n_pairs == 0 {
        return Ok(None);
    }

    let mut tape = Tape::new();
    let outs = windows
        .iter()
        .map(|w| model::user_tower_forward(&mut tape, params, &cfg.model.transformer, &w.features, &w.valid))
        .collect::<Result<Vec<_>>>()?;
    let pins = model::pin_tower_forward(&mut tape, params, &pin_feature_matrix(world, &terms.candidates)?)?;
    let loss = record_loss(&mut tape, &outs, pins, &terms, cfg.objective.temperature)?;
    let value = tape.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("training step {step}")));
    }
    let grads = tape.backward(loss)?;
    params.zero_grad();
    grads.accumulate_into(&tape, params);
    adam.step(params)?;
    Ok(Some(value))
}

/// Trains both towers on the non-held-out users. `on_step` sees every step.
pub fn train_towers(world: &World, cfg: &TrainConfig, mut on_step: impl FnMut(&StepLog)) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.model.d_pin != world.config.d_pin {
        return Err(Error::Config(format!("model d_pin {} != corpus d_pin {}", cfg.model.d_pin, world.config.d_pin)));
    }
    let (train, _) = split_users(world.users.len(), cfg.held_out_fraction);
    let users: Vec<u32> = train.filter(|&u| world.users[u as usize].actions.len() >= 2).collect();
    if users.is_empty() {
        return Err(Error::Config("no training user has two or more actions".into()));
    }
    let mut params = model::init_two_tower(&cfg.model, cfg.seed)?;
    let mut adam = Adam::new(cfg.adam);
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let loss = train_step(world, cfg, &users, &mut params, &mut adam, step)?;
        let entry = StepLog { step, loss };
        on_step(&entry);
        log.push(entry);
    }
    params.clear_grad();
    Ok(TrainOutcome { params, log })
}

/// Finite-difference check of both towers under the dense all-action loss on
/// a batch drawn from a small seeded corpus. Parameters are redrawn with
/// std 0.3 (layer-norm gains around 1) so every path carries gradient.
pub fn check_tower_gradients(seed: u64, gc: &GradCheckConfig) -> Result<GradCheckReport> {
    let world = crate::datasynth::generate_world(&WorldConfig {
        seed,
        n_topics: 4,
        n_pins: 60,
        n_users: 6,
        d_pin: 4,
        horizon_days: 40,
        ..WorldConfig::default()
    })?;
    let cfg = ModelConfig {
        max_actions: 6,
        d_pin: 4,
        transformer: model::TransformerConfig {
            n_layers: 2,
            n_heads: 2,
            d_h: 8,
            d_ffn: 16,
            d_e: 4,
            dropout_rate: 0.0,
        },
    };
    let objective = ObjectiveConfig {
        loss_kind: crate::objective::LossKind::DenseAllAction,
        n_random_negatives: 8,
        ..ObjectiveConfig::default()
    };
    let mut store = model::init_two_tower(&cfg, seed)?;
    let mut r = rng::stream(seed, &[rng::GRADCHECK]);
    let noise = Normal::new(0.0, 0.3).expect("valid std");
    for p in store.iter_mut() {
        let gain = p.name.ends_with("/g");
        for v in p.value.data_mut() {
            *v = if gain { 1.0 } else { 0.0 } + noise.sample(&mut r);
        }
    }
    let mut windows = Vec::new();
    let mut targets = Vec::new();
    for user in world.users.iter().filter(|u| u.actions.len() >= 8).take(2) {
        let cut = user.actions[user.actions.len() / 2].timestamp;
        let w = build_input_matrix(&user.actions, &world.pins, cut, &cfg.encoder())?;
        targets.push(targets_for(&w, &user.actions, &objective));
        windows.push(w);
    }
    if windows.is_empty() {
        return Err(Error::Config("gradient-check corpus has no usable user".into()));
    }
    let negatives = sample_negatives(&targets, world.pins.len(), &objective, seed, 0)?;
    let terms = build_batch_terms(&targets, &negatives, true)?;
    let pins = pin_feature_matrix(&world, &terms.candidates)?;
    grad_check_tape(
        &mut store,
        |tape, s| {
            let outs = windows
                .iter()
                .map(|w| model::user_tower_forward(tape, s, &cfg.transformer, &w.features, &w.valid))
                .collect::<Result<Vec<_>>>()?;
            let p = model::pin_tower_forward(tape, s, &pins)?;
            record_loss(tape, &outs, p, &terms, objective.temperature)
        },
        gc,
    )
}
