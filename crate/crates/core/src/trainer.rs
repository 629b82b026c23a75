//! Multitask training: batch scheduling, clipped Adam, learning-rate decay
//! with early stopping, and the latched sparsity penalty.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::LabeledCorpus;
use crate::error::{Error, Result};
use crate::math::{dso_penalty, orthogonality_deviation, random_orthogonal};
use crate::matrix::Matrix;
use crate::objective::{ObjectiveId, Structure, Target};
use crate::probe::{
    all_masked, batch_loss, data_loss, loss_gradients, GradientBundle, Hyperparams,
    LinearProbeParams, OrthogonalProbeParams, ProbeParams,
};

/// Probing configuration.
///
/// * `A` one objective, orthogonal probe
/// * `B` depth and distance of one structure, shared `V`
/// * `C` the four distance objectives, shared `V`
/// * `D` the four depth objectives, shared `V`
/// * `E` all eight objectives, shared `V`
/// * `I` one objective, scaling vector only (`V` frozen at identity)
/// * `II` one objective, dense linear map
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    A,
    B,
    C,
    D,
    E,
    I,
    II,
}

impl Mode {
    pub const ALL: [Mode; 7] = [Mode::A, Mode::B, Mode::C, Mode::D, Mode::E, Mode::I, Mode::II];

    pub fn tag(self) -> u8 {
        Mode::ALL.iter().position(|&m| m == self).expect("listed") as u8
    }

    pub fn from_tag(tag: u8) -> Option<Mode> {
        Mode::ALL.get(tag as usize).copied()
    }

    pub fn is_linear(self) -> bool {
        self == Mode::II
    }

    /// Modes in which several objectives share one rotation.
    pub fn is_joint(self) -> bool {
        matches!(self, Mode::B | Mode::C | Mode::D | Mode::E)
    }

    /// Checks that `objectives` is exactly what one run of this mode trains.
    pub fn validate_objectives(self, objectives: &[ObjectiveId]) -> Result<()> {
        let mut sorted = objectives.to_vec();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != objectives.len() {
            return Err(Error::Config("objectives: duplicate entries".into()));
        }
        let all_of = |target: Target| -> Vec<ObjectiveId> {
            Structure::ALL.iter().map(|&s| ObjectiveId::new(s, target)).collect()
        };
        let ok = match self {
            Mode::A | Mode::I | Mode::II => sorted.len() == 1,
            Mode::B => {
                sorted.len() == 2
                    && sorted[0].structure == sorted[1].structure
                    && sorted[0].target != sorted[1].target
            }
            Mode::C => sorted == all_of(Target::Distance),
            Mode::D => sorted == all_of(Target::Depth),
            Mode::E => sorted == ObjectiveId::all(),
        };
        if ok {
            Ok(())
        } else {
            let expected = match self {
                Mode::A | Mode::I | Mode::II => "exactly one objective",
                Mode::B => "depth and distance of a single structure",
                Mode::C => "the four distance objectives",
                Mode::D => "the four depth objectives",
                Mode::E => "all eight objectives",
            };
            Err(Error::Config(format!(
                "objectives: mode {} requires {}, got [{}]",
                self,
                expected,
                objectives.iter().map(|o| o.to_string()).collect::<Vec<_>>().join(", ")
            )))
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Mode> {
        Mode::ALL
            .iter()
            .copied()
            .find(|m| m.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("mode: unknown mode '{}'", s)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub initial_lr: f64,
    pub lr_decay_factor: f64,
    pub patience_updates: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub hyper: Hyperparams,
    pub objectives: Vec<ObjectiveId>,
    pub mode: Mode,
    pub seed: u64,
    pub max_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 12,
            initial_lr: 0.02,
            lr_decay_factor: 10.0,
            patience_updates: 3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            hyper: Hyperparams::default(),
            objectives: vec![ObjectiveId::new(Structure::Dep, Target::Distance)],
            mode: Mode::A,
            seed: 0,
            max_epochs: 40,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = self.batch_size > 0
            && self.initial_lr > 0.0
            && self.lr_decay_factor > 1.0
            && self.patience_updates > 0
            && self.max_epochs > 0
            && (0.0..1.0).contains(&self.adam_beta1)
            && (0.0..1.0).contains(&self.adam_beta2)
            && self.adam_eps > 0.0;
        if !positive {
            return Err(Error::Config(
                "train: rates, counts and Adam parameters must be positive (betas in [0,1), decay > 1)"
                    .into(),
            ));
        }
        self.hyper.validate()?;
        self.mode.validate_objectives(&self.objectives)
    }

    /// Initial parameters: `V` a seeded rotation (identity in mode I) and
    /// scaling vectors `1/√dim`; in mode II every map starts as the same
    /// rotation scaled by `1/√dim`, so both probe families start from the
    /// same function.
    pub fn initial_params(&self, dim: usize) -> Result<ProbeParams> {
        let rotation = random_orthogonal(dim, self.seed)?;
        Ok(match self.mode {
            Mode::II => {
                let b = rotation.transpose().scale(1.0 / (dim as f64).sqrt());
                ProbeParams::Linear(LinearProbeParams {
                    maps: self.objectives.iter().map(|&o| (o, b.clone())).collect(),
                })
            }
            Mode::I => ProbeParams::Orthogonal(OrthogonalProbeParams::new(
                Matrix::identity(dim),
                &self.objectives,
            )?),
            _ => ProbeParams::Orthogonal(OrthogonalProbeParams::new(rotation, &self.objectives)?),
        })
    }
}

/// One batch of a training epoch: sentence indices of a single objective.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub objective: ObjectiveId,
    pub indices: Vec<usize>,
}

/// Shuffles each objective's sentences, cuts them into batches of at most
/// `batch_size`, and interleaves the batches of all objectives.
pub fn build_schedule(
    sizes: &BTreeMap<ObjectiveId, usize>,
    batch_size: usize,
    epoch_seed: u64,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
    let mut batches = Vec::new();
    for (&objective, &n) in sizes {
        if n == 0 {
            return Err(Error::InvalidArgument(format!("no training data for {}", objective)));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch_size) {
            batches.push(Batch {
                objective,
                indices: chunk.to_vec(),
            });
        }
    }
    batches.shuffle(&mut rng);
    Ok(batches)
}

/// Adam moments of one parameter tensor.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub steps: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub v: Moments,
    pub scalers: BTreeMap<ObjectiveId, Moments>,
    pub maps: BTreeMap<ObjectiveId, Moments>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl From<&TrainConfig> for AdamConfig {
    fn from(c: &TrainConfig) -> Self {
        AdamConfig {
            beta1: c.adam_beta1,
            beta2: c.adam_beta2,
            eps: c.adam_eps,
        }
    }
}

fn adam_update(param: &mut [f64], grad: &[f64], moments: &mut Moments, lr: f64, cfg: &AdamConfig) {
    if moments.m.len() != param.len() {
        moments.m = vec![0.0; param.len()];
        moments.v = vec![0.0; param.len()];
    }
    moments.steps += 1;
    let t = moments.steps as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (((p, &g), m), v) in param
        .iter_mut()
        .zip(grad)
        .zip(moments.m.iter_mut())
        .zip(moments.v.iter_mut())
    {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// Bias-corrected Adam step on every parameter present in `grads`.
/// `update_v = false` keeps the rotation frozen.
pub fn adam_step(
    params: &mut ProbeParams,
    adam: &mut AdamState,
    grads: &GradientBundle,
    lr: f64,
    cfg: &AdamConfig,
    update_v: bool,
) -> Result<()> {
    if !grads.is_finite() {
        return Err(Error::Numerical("non-finite gradient".into()));
    }
    match params {
        ProbeParams::Orthogonal(p) => {
            if let (true, Some(g)) = (update_v, &grads.v) {
                if g.rows() != p.v.rows() || g.cols() != p.v.cols() {
                    return Err(Error::InvalidArgument("gradient shape differs from V".into()));
                }
                adam_update(p.v.data_mut(), g.data(), &mut adam.v, lr, cfg);
            }
            for (o, g) in &grads.scalers {
                let d = p
                    .scalers
                    .get_mut(o)
                    .ok_or_else(|| Error::InvalidArgument(format!("no scaling vector for {}", o)))?;
                if g.len() != d.len() {
                    return Err(Error::InvalidArgument("gradient shape differs from d".into()));
                }
                adam_update(d, g, adam.scalers.entry(*o).or_default(), lr, cfg);
            }
        }
        ProbeParams::Linear(p) => {
            for (o, g) in &grads.maps {
                let b = p
                    .maps
                    .get_mut(o)
                    .ok_or_else(|| Error::InvalidArgument(format!("no map for {}", o)))?;
                if g.data().len() != b.data().len() {
                    return Err(Error::InvalidArgument("gradient shape differs from B".into()));
                }
                adam_update(b.data_mut(), g.data(), adam.maps.entry(*o).or_default(), lr, cfg);
            }
        }
    }
    Ok(())
}

fn clip_slice(g: &mut [f64], c: f64) {
    let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > c {
        let s = c / norm;
        for x in g.iter_mut() {
            *x *= s;
        }
    }
}

/// Rescales every parameter tensor's gradient to L2 norm at most `c`.
pub fn clip_gradients(mut bundle: GradientBundle, c: f64) -> GradientBundle {
    if let Some(v) = bundle.v.as_mut() {
        clip_slice(v.data_mut(), c);
    }
    for d in bundle.scalers.values_mut() {
        clip_slice(d, c);
    }
    for b in bundle.maps.values_mut() {
        clip_slice(b.data_mut(), c);
    }
    bundle
}

/// Summary of one training epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean total loss over the epoch's batches.
    pub train_loss: f64,
    pub train_data_loss: f64,
    /// Mean `λ_S·‖d̄‖₁` term over the epoch's batches.
    pub sparsity_penalty: f64,
    pub val_loss: f64,
    /// DSO(V) at the end of the epoch.
    pub dso: f64,
    pub orthogonality_deviation: f64,
    pub sparsity_latched: bool,
    pub improved: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub params: ProbeParams,
    pub best_params: ProbeParams,
    pub adam: AdamState,
    pub step: u64,
    pub epoch: usize,
    pub current_lr: f64,
    pub best_val_loss: f64,
    pub best_epoch: Option<usize>,
    pub lr_updates_without_improvement: usize,
    pub lr_updates: usize,
    pub sparsity_latched: bool,
    /// Step at which the sparsity penalty switched on.
    pub sparsity_latched_at: Option<u64>,
    pub stopped: bool,
    pub history: Vec<EpochRecord>,
}

impl TrainState {
    pub fn new(config: &TrainConfig, dim: usize) -> Result<Self> {
        let params = config.initial_params(dim)?;
        Ok(TrainState {
            best_params: params.clone(),
            params,
            adam: AdamState::default(),
            step: 0,
            epoch: 0,
            current_lr: config.initial_lr,
            best_val_loss: f64::INFINITY,
            best_epoch: None,
            lr_updates_without_improvement: 0,
            lr_updates: 0,
            sparsity_latched: false,
            sparsity_latched_at: None,
            stopped: false,
            history: Vec::new(),
        })
    }
}

/// Mean data loss over the validation sentences, summed over objectives.
/// Penalty terms are excluded.
pub fn validation_loss(
    params: &ProbeParams,
    val: &LabeledCorpus,
    objectives: &[ObjectiveId],
) -> Result<f64> {
    let mut total = 0.0;
    for &o in objectives {
        let examples = val.examples(o)?;
        if examples.is_empty() {
            continue;
        }
        let mut sum = 0.0;
        for ex in &examples {
            if all_masked(ex.gold, o.target) {
                continue;
            }
            sum += data_loss(&params.predict(o, ex.embeddings)?, ex.gold)?;
        }
        total += sum / examples.len() as f64;
    }
    Ok(total)
}

type Validator<'a> = Box<dyn Fn(&ProbeParams) -> Result<f64> + 'a>;

/// Runs the epoch loop over a training corpus.
pub struct Trainer<'a> {
    config: TrainConfig,
    train: &'a LabeledCorpus,
    validator: Validator<'a>,
}

/// Final and best-validation parameters with the training history.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub final_params: ProbeParams,
    pub best_params: ProbeParams,
    pub best_val_loss: f64,
    pub history: Vec<EpochRecord>,
    pub state: TrainState,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, train: &'a LabeledCorpus, val: &'a LabeledCorpus) -> Result<Self> {
        let objectives = config.objectives.clone();
        Self::with_validator(
            config,
            train,
            Box::new(move |p: &ProbeParams| validation_loss(p, val, &objectives)),
        )
    }

    /// Uses a custom validation-loss function.
    pub fn with_validator(config: TrainConfig, train: &'a LabeledCorpus, validator: Validator<'a>) -> Result<Self> {
        config.validate()?;
        if train.is_empty() {
            return Err(Error::InvalidArgument("empty training corpus".into()));
        }
        Ok(Trainer {
            config,
            train,
            validator,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn initial_state(&self) -> Result<TrainState> {
        TrainState::new(&self.config, self.train.dim())
    }

    fn current_dso(params: &ProbeParams) -> Result<(f64, f64)> {
        match params {
            ProbeParams::Orthogonal(p) => Ok((dso_penalty(&p.v)?, orthogonality_deviation(&p.v)?)),
            ProbeParams::Linear(_) => Ok((0.0, 0.0)),
        }
    }

    /// Runs one epoch. Returns `false` once training has stopped.
    pub fn run_epoch(&self, state: &mut TrainState) -> Result<bool> {
        if state.stopped || state.epoch >= self.config.max_epochs {
            state.stopped = true;
            return Ok(false);
        }
        let cfg = &self.config;
        let hyper = &cfg.hyper;
        let adam_cfg = AdamConfig::from(cfg);
        let update_v = cfg.mode != Mode::I;
        let epoch = state.epoch;

        let examples: BTreeMap<ObjectiveId, Vec<_>> = cfg
            .objectives
            .iter()
            .map(|&o| Ok((o, self.train.examples(o)?)))
            .collect::<Result<_>>()?;
        let sizes = examples.iter().map(|(&o, e)| (o, e.len())).collect();
        let schedule = build_schedule(&sizes, cfg.batch_size, cfg.seed ^ epoch as u64)?;

        let (mut loss_sum, mut data_sum, mut sparsity_sum) = (0.0, 0.0, 0.0);
        for (b, batch) in schedule.iter().enumerate() {
            if !state.sparsity_latched && hyper.lambda_s > 0.0 {
                if let ProbeParams::Orthogonal(p) = &state.params {
                    if dso_penalty(&p.v)? < hyper.sparsity_trigger {
                        state.sparsity_latched = true;
                        state.sparsity_latched_at = Some(state.step);
                    }
                }
            }
            let pool = &examples[&batch.objective];
            let items: Vec<_> = batch.indices.iter().map(|&i| pool[i]).collect();
            let loss = batch_loss(&state.params, hyper, &items, batch.objective, state.sparsity_latched)?;
            if !loss.total.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite loss at epoch {} batch {} ({})",
                    epoch, b, batch.objective
                )));
            }
            let grads = loss_gradients(&state.params, hyper, &items, batch.objective, state.sparsity_latched)?;
            let grads = clip_gradients(grads, hyper.clip_norm);
            adam_step(&mut state.params, &mut state.adam, &grads, state.current_lr, &adam_cfg, update_v)
                .map_err(|e| match e {
                    Error::Numerical(m) => Error::Numerical(format!("{} at epoch {} batch {}", m, epoch, b)),
                    other => other,
                })?;
            state.step += 1;
            loss_sum += loss.total;
            data_sum += loss.data;
            sparsity_sum += loss.sparsity;
        }

        let val_loss = (self.validator)(&state.params)?;
        if !val_loss.is_finite() {
            return Err(Error::Numerical(format!("non-finite validation loss after epoch {}", epoch)));
        }
        let (dso, deviation) = Self::current_dso(&state.params)?;
        let improved = val_loss < state.best_val_loss;
        let lr_used = state.current_lr;
        if improved {
            state.best_val_loss = val_loss;
            state.best_params = state.params.clone();
            state.best_epoch = Some(epoch);
            state.lr_updates_without_improvement = 0;
        } else {
            state.current_lr /= cfg.lr_decay_factor;
            state.lr_updates += 1;
            state.lr_updates_without_improvement += 1;
            if state.lr_updates_without_improvement >= cfg.patience_updates {
                state.stopped = true;
            }
        }
        let n = schedule.len().max(1) as f64;
        state.history.push(EpochRecord {
            epoch,
            lr: lr_used,
            train_loss: loss_sum / n,
            train_data_loss: data_sum / n,
            sparsity_penalty: sparsity_sum / n,
            val_loss,
            dso,
            orthogonality_deviation: deviation,
            sparsity_latched: state.sparsity_latched,
            improved,
        });
        state.epoch += 1;
        if state.epoch >= cfg.max_epochs {
            state.stopped = true;
        }
        Ok(!state.stopped)
    }

    /// Trains from `state` until early stopping or `max_epochs`, calling
    /// `on_epoch` after every epoch.
    pub fn run_from(
        &self,
        mut state: TrainState,
        mut on_epoch: impl FnMut(&TrainState) -> Result<()>,
    ) -> Result<TrainOutcome> {
        while self.run_epoch(&mut state)? {
            on_epoch(&state)?;
        }
        if !state.history.is_empty() {
            on_epoch(&state)?;
        }
        Ok(TrainOutcome {
            final_params: state.params.clone(),
            best_params: state.best_params.clone(),
            best_val_loss: state.best_val_loss,
            history: state.history.clone(),
            state,
        })
    }

    pub fn run(&self) -> Result<TrainOutcome> {
        self.run_from(self.initial_state()?, |_| Ok(()))
    }
}

/// Trains `config` on `train`, early-stopping on `val`.
pub fn train(config: &TrainConfig, train: &LabeledCorpus, val: &LabeledCorpus) -> Result<TrainOutcome> {
    Trainer::new(config.clone(), train, val)?.run()
}
