//! Adam optimization, the epoch loop with validation-driven early stopping,
//! and split evaluation.

use crate::autodiff::Graph;
use crate::data::{evaluate_metrics, Metrics, Split, WindowedDataset};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::param::ParamStore;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::time::Instant;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Coupled L2: `weight_decay * theta` is added to the gradient.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.003,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Result<Self> {
        let zeros = || store.iter().map(|p| Tensor::zeros(p.value.shape())).collect::<Result<Vec<_>>>();
        Ok(AdamState {
            config,
            step: 0,
            first: zeros()?,
            second: zeros()?,
        })
    }
}

/// One bias-corrected Adam update of every parameter from its accumulated
/// gradient. Nothing is modified if any gradient is non-finite.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState) -> Result<()> {
    if state.first.len() != store.len() {
        return Err(Error::Contract("optimizer state does not match the parameter store".into()));
    }
    if let Some(p) = store.iter().find(|p| !p.grad().is_finite()) {
        return Err(Error::NanGradient(p.name.clone()));
    }
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let correct1 = 1.0 - c.beta1.powi(t);
    let correct2 = 1.0 - c.beta2.powi(t);
    let ids: Vec<_> = store.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        let (value, grad) = store.value_and_grad_mut(id);
        let m = state.first[i].data_mut();
        let v = state.second[i].data_mut();
        for (j, theta) in value.data_mut().iter_mut().enumerate() {
            let g = grad.data()[j] + c.weight_decay * *theta;
            m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
            v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
            let m_hat = m[j] / correct1;
            let v_hat = v[j] / correct2;
            *theta -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
        }
    }
    Ok(())
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store
        .iter()
        .flat_map(|p| p.grad().data().iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let k = max_norm / norm;
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let (_, grad) = store.value_and_grad_mut(id);
            grad.data_mut().iter_mut().for_each(|g| *g *= k);
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    /// One batch holding every training window; disables shuffling.
    pub full_batch: bool,
    pub clip_norm: Option<f64>,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            max_epochs: 300,
            patience: 15,
            batch_size: 64,
            full_batch: false,
            clip_norm: None,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    EarlyStopping,
    Diverged,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopReason::MaxEpochs => "max_epochs",
            StopReason::EarlyStopping => "early_stopping",
            StopReason::Diverged => "diverged",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean normalized L1 loss over the epoch's training windows.
    pub train_loss: f64,
    pub val: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_mae: f64,
    pub stop_reason: StopReason,
    /// Not serialized, so that reports of identical runs are byte-identical.
    #[serde(skip)]
    pub wall_time_secs: f64,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_mae,val_rmse,val_mape\n");
        for r in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.epoch, r.train_loss, r.val.mae, r.val.rmse, r.val.mape
            ));
        }
        out
    }
}

/// Test and progress hooks for [`fit`].
#[derive(Default)]
pub struct FitHooks<'a> {
    /// Replaces the validation MAE of an epoch (1-based) before early
    /// stopping looks at it.
    pub val_mae_override: Option<&'a dyn Fn(usize) -> f64>,
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochRecord)>,
}

/// Trains on the training windows, keeping the parameters of the epoch with
/// the lowest validation MAE (original units). The model holds those
/// parameters on return.
pub fn fit(model: &mut Model, data: &WindowedDataset, schedule: &Schedule, mut hooks: FitHooks) -> Result<TrainReport> {
    let started = Instant::now();
    let mut train_idx = data.indices(Split::Train);
    if train_idx.is_empty() || data.indices(Split::Val).is_empty() {
        return Err(Error::Config("fit needs nonempty train and val splits".into()));
    }
    if schedule.batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    check_compatible(model, data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut adam = AdamState::new(&model.store, schedule.adam)?;
    let mut epochs = Vec::new();
    let mut best: Option<(usize, f64, Vec<Tensor>)> = None;
    let mut since_best = 0;
    let mut stop_reason = StopReason::MaxEpochs;
    let batch = if schedule.full_batch { train_idx.len() } else { schedule.batch_size };

    'epochs: for epoch in 1..=schedule.max_epochs {
        if !schedule.full_batch {
            train_idx.shuffle(&mut rng);
        }
        let mut loss_sum = 0.0;
        for chunk in train_idx.chunks(batch) {
            let x = data.batch_inputs(chunk)?;
            let y = data.batch_targets_norm(chunk)?;
            model.store.zero_grad();
            let mut g = Graph::new();
            let loss = match model.loss(&mut g, &x, &y) {
                Ok(l) => l,
                Err(Error::NonFinite(_)) => {
                    stop_reason = StopReason::Diverged;
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            loss_sum += g.value(loss).item()? * chunk.len() as f64;
            g.backward(loss, &mut model.store)?;
            if let Some(max) = schedule.clip_norm {
                clip_grad_norm(&mut model.store, max);
            }
            match adam_step(&mut model.store, &mut adam) {
                Ok(()) => {}
                Err(Error::NanGradient(_)) => {
                    stop_reason = StopReason::Diverged;
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        let train_loss = loss_sum / train_idx.len() as f64;
        if !train_loss.is_finite() {
            stop_reason = StopReason::Diverged;
            break;
        }
        let mut val = match evaluate(model, data, Split::Val, schedule.batch_size) {
            Ok(e) => e.aggregate,
            Err(Error::NonFinite(_)) => {
                stop_reason = StopReason::Diverged;
                break;
            }
            Err(e) => return Err(e),
        };
        if let Some(f) = hooks.val_mae_override {
            val.mae = f(epoch);
        }
        let record = EpochRecord { epoch, train_loss, val };
        if let Some(cb) = hooks.on_epoch.as_mut() {
            cb(&record);
        }
        epochs.push(record);

        if best.as_ref().is_none_or(|(_, b, _)| val.mae < *b) {
            best = Some((epoch, val.mae, model.store.snapshot()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= schedule.patience {
                stop_reason = StopReason::EarlyStopping;
                break;
            }
        }
    }

    let (best_epoch, best_val_mae) = match best {
        Some((e, mae, snapshot)) => {
            model.store.restore(&snapshot)?;
            (e, mae)
        }
        None => (0, f64::NAN),
    };
    Ok(TrainReport {
        epochs,
        best_epoch,
        best_val_mae,
        stop_reason,
        wall_time_secs: started.elapsed().as_secs_f64(),
    })
}

/// Rejects datasets whose shape disagrees with the model configuration.
pub fn check_compatible(model: &Model, data: &WindowedDataset) -> Result<()> {
    let c = &model.config;
    let mut mismatched = Vec::new();
    if c.nodes != data.nodes {
        mismatched.push(format!("nodes (model {}, data {})", c.nodes, data.nodes));
    }
    if c.input_steps != data.input_steps {
        mismatched.push(format!("input_steps (model {}, data {})", c.input_steps, data.input_steps));
    }
    if c.horizon != data.horizon {
        mismatched.push(format!("horizon (model {}, data {})", c.horizon, data.horizon));
    }
    if c.input_channels != 1 {
        mismatched.push(format!("input_channels (model {}, data 1)", c.input_channels));
    }
    if mismatched.is_empty() {
        Ok(())
    } else {
        Err(Error::Compatibility(mismatched.join(", ")))
    }
}

/// Forecasts for the given windows in original units, `M x T x N x 1`.
pub fn predict_windows(model: &Model, data: &WindowedDataset, idx: &[usize], batch_size: usize) -> Result<Tensor> {
    let mut out = Vec::with_capacity(idx.len() * data.horizon * data.nodes);
    for chunk in idx.chunks(batch_size.max(1)) {
        let x = data.batch_inputs(chunk)?;
        let y = model.predict(&x)?;
        out.extend(y.data().iter().map(|&v| data.normalizer.denormalize(v)));
    }
    Tensor::new(&[idx.len(), data.horizon, data.nodes, 1], out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// Index `h` holds forecast step `h + 1`.
    pub per_horizon: Vec<Metrics>,
    pub aggregate: Metrics,
}

impl Evaluation {
    pub fn of(pred: &Tensor, truth: &Tensor) -> Result<Self> {
        let horizon = pred.shape().get(1).copied().unwrap_or(1);
        let per_horizon = (1..=horizon)
            .map(|h| evaluate_metrics(pred, truth, Some(h)))
            .collect::<Result<_>>()?;
        Ok(Evaluation {
            per_horizon,
            aggregate: evaluate_metrics(pred, truth, None)?,
        })
    }

    /// `horizon,MAE,RMSE,MAPE` rows for each step, then `all`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("horizon,MAE,RMSE,MAPE\n");
        for (h, m) in self.per_horizon.iter().enumerate() {
            out.push_str(&format!("{},{},{},{}\n", h + 1, m.mae, m.rmse, m.mape));
        }
        let a = self.aggregate;
        out.push_str(&format!("all,{},{},{}\n", a.mae, a.rmse, a.mape));
        out
    }
}

pub fn evaluate(model: &Model, data: &WindowedDataset, split: Split, batch_size: usize) -> Result<Evaluation> {
    check_compatible(model, data)?;
    let idx = data.indices(split);
    if idx.is_empty() {
        return Err(Error::Config(format!("{split} split is empty")));
    }
    let pred = predict_windows(model, data, &idx, batch_size)?;
    Evaluation::of(&pred, &data.batch_targets(&idx)?)
}

/// Metrics of the last-value persistence forecast on one split.
pub fn evaluate_persistence(data: &WindowedDataset, split: Split) -> Result<Evaluation> {
    let idx = data.indices(split);
    if idx.is_empty() {
        return Err(Error::Config(format!("{split} split is empty")));
    }
    Evaluation::of(&data.persistence_forecast(&idx)?, &data.batch_targets(&idx)?)
}
