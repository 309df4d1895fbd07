//! Federated round engine.
//!
//! One round: select devices, train locally, aggregate by sample-weighted
//! mean, then (FedDU only) nudge the aggregate with a normalized gradient
//! probed on the server's data, scaled by a dynamic effective step size.

use std::time::Instant;

use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{global_distribution, label_distribution, noniid_degree, Dataset, LabelDistribution};
use crate::error::{Error, Result};
use crate::nnkernel::{
    flatten_params, loss_and_gradient, predict, sgd_step, unflatten_params, FlatParams, Model,
};
use crate::pruner::flops_count;
use crate::seed::{self, tag};

/// Scale applied to the server step as a function of server accuracy.
pub trait StepScale: Send + Sync {
    fn scale(&self, accuracy: f64) -> f64;
}

/// Registered choices for the accuracy-dependent factor.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccuracyScale {
    /// `clamp(1 - acc, 0, 1)`
    #[default]
    OneMinusAcc,
}

impl StepScale for AccuracyScale {
    fn scale(&self, accuracy: f64) -> f64 {
        match self {
            AccuracyScale::OneMinusAcc => (1.0 - accuracy).clamp(0.0, 1.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateMode {
    FedAvg,
    FedDu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FedConfig {
    pub num_devices: usize,
    pub per_round: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub decay: f64,
    /// Multiplier on the server's effective step size.
    pub server_scale: f64,
    pub f_prime: AccuracyScale,
    pub total_rounds: usize,
    /// Simulated device throughput in FLOP/s.
    pub device_flops: f64,
    pub seed: u64,
}

impl Default for FedConfig {
    fn default() -> Self {
        FedConfig {
            num_devices: 20,
            per_round: 5,
            local_epochs: 2,
            batch_size: 16,
            lr: 0.05,
            decay: 0.99,
            server_scale: 1.0,
            f_prime: AccuracyScale::OneMinusAcc,
            total_rounds: 60,
            device_flops: 1e9,
            seed: 0,
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(Error::config(format!("fed.{key}"), msg));
        if self.num_devices == 0 {
            return bad("num_devices", "must be at least 1".into());
        }
        if self.per_round == 0 || self.per_round > self.num_devices {
            return bad(
                "per_round",
                format!("must lie in 1..={}, got {}", self.num_devices, self.per_round),
            );
        }
        if self.local_epochs == 0 {
            return bad("local_epochs", "must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", format!("must be positive, got {}", self.lr));
        }
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return bad("decay", format!("must lie in (0, 1), got {}", self.decay));
        }
        if !(self.server_scale >= 0.0 && self.server_scale.is_finite()) {
            return bad("server_scale", format!("must be >= 0, got {}", self.server_scale));
        }
        if !(self.device_flops > 0.0 && self.device_flops.is_finite()) {
            return bad("device_flops", format!("must be positive, got {}", self.device_flops));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct DeviceState {
    pub id: usize,
    pub data: Dataset,
    pub dist: LabelDistribution,
}

impl DeviceState {
    pub fn new(id: usize, data: Dataset) -> Result<Self> {
        let dist = label_distribution(&data)?;
        Ok(DeviceState { id, data, dist })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// All devices plus the sample-weighted global label distribution.
#[derive(Clone, Debug)]
pub struct DevicePool {
    pub devices: Vec<DeviceState>,
    pub global: LabelDistribution,
}

impl DevicePool {
    pub fn new(datasets: Vec<Dataset>) -> Result<Self> {
        let devices = datasets
            .into_iter()
            .enumerate()
            .map(|(id, d)| DeviceState::new(id, d))
            .collect::<Result<Vec<_>>>()?;
        if devices.is_empty() {
            return Err(Error::Empty("device list"));
        }
        let dists: Vec<_> = devices.iter().map(|d| &d.dist).collect();
        let sizes: Vec<usize> = devices.iter().map(DeviceState::len).collect();
        let global = global_distribution(&dists, &sizes)?;
        Ok(DevicePool { devices, global })
    }
}

#[derive(Clone, Debug)]
pub struct ServerState {
    /// Number of completed rounds.
    pub round: usize,
    pub model: Model,
    pub data: Dataset,
    pub dist: Option<LabelDistribution>,
    pub device_seconds: f64,
}

impl ServerState {
    pub fn new(model: Model, data: Dataset) -> Result<Self> {
        let dist = if data.is_empty() {
            None
        } else {
            Some(label_distribution(&data)?)
        };
        Ok(ServerState {
            round: 0,
            model,
            data,
            dist,
            device_seconds: 0.0,
        })
    }
}

/// Metrics for one round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    /// Accuracy of the aggregated model on the server data (absent without
    /// server data).
    pub server_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub test_loss: Option<f64>,
    /// Mean training loss over the selected devices' local steps.
    pub train_loss: f64,
    pub tau_eff: f64,
    pub selected: Vec<usize>,
    pub device_mflops: f64,
    /// Simulated duration of this round's device work.
    pub device_seconds: f64,
    /// Cumulative simulated device time after this round.
    pub cumulative_device_seconds: f64,
    pub model_mflops: f64,
    /// Host wall-clock time; excluded from the metrics stream so that it
    /// stays byte-reproducible.
    #[serde(skip)]
    pub wall_seconds: f64,
}

/// Uniform sample of `m` distinct device ids out of `n`, ascending.
pub fn select_devices(t: usize, n: usize, m: usize, seed: u64) -> Vec<usize> {
    let mut rng = seed::rng(seed, &[tag::SELECT, t as u64]);
    let mut ids = sample_indices(&mut rng, n, m.min(n)).into_vec();
    ids.sort_unstable();
    ids
}

#[derive(Clone, Debug)]
pub struct LocalUpdate {
    pub model: Model,
    /// `(w_start - w_end) / lr`
    pub grad: FlatParams,
    pub steps: usize,
    pub samples_processed: usize,
    pub mean_loss: f64,
}

/// Minibatch index sequence: `epochs` shuffled passes, each chunked into
/// batches of `batch` with the last short batch kept.
fn epoch_batches(n: usize, epochs: usize, batch: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for e in 0..epochs {
        let mut rng = seed::rng(seed, &[e as u64]);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        out.extend(order.chunks(batch).map(<[usize]>::to_vec));
    }
    out
}

fn batch_refs<'a>(data: &'a Dataset, idx: &[usize]) -> (Vec<&'a [f64]>, Vec<usize>) {
    let samples = data.samples();
    (
        idx.iter().map(|&i| samples[i].input.data()).collect(),
        idx.iter().map(|&i| samples[i].label).collect(),
    )
}

/// `epochs` passes of minibatch SGD over `data` from `start`.
pub fn local_update(
    start: &Model,
    data: &Dataset,
    epochs: usize,
    batch: usize,
    lr: f64,
    shuffle_seed: u64,
) -> Result<LocalUpdate> {
    if data.is_empty() {
        return Err(Error::Empty("device dataset"));
    }
    let w0 = flatten_params(start).0;
    let mut w = w0.clone();
    let mut model = start.clone();
    let batches = epoch_batches(data.len(), epochs, batch.max(1), shuffle_seed);
    let mut loss_sum = 0.0;
    for idx in &batches {
        let (xs, ys) = batch_refs(data, idx);
        let (loss, g) = loss_and_gradient(&model, &xs, &ys)?;
        loss_sum += loss;
        for (wi, gi) in w.iter_mut().zip(&g.0) {
            *wi -= lr * gi;
        }
        model = unflatten_params(&model, &w)?;
    }
    let grad = w0.iter().zip(&w).map(|(a, b)| (a - b) / lr).collect();
    Ok(LocalUpdate {
        model,
        grad: FlatParams(grad),
        steps: batches.len(),
        samples_processed: data.len() * epochs,
        mean_loss: loss_sum / batches.len() as f64,
    })
}

/// Sample-weighted parameter mean, accumulated in the given order and
/// clamped coordinate-wise to the inputs' range.
pub fn aggregate(models: &[&Model], n: &[usize]) -> Result<Model> {
    let first = models.first().ok_or(Error::Empty("model list"))?;
    if models.len() != n.len() {
        return Err(Error::Length {
            expected: models.len(),
            actual: n.len(),
        });
    }
    let total: usize = n.iter().sum();
    if total == 0 {
        return Err(Error::InvalidArgument("total sample count is zero".into()));
    }
    let flats: Vec<Vec<f64>> = models.iter().map(|m| flatten_params(m).0).collect();
    let len = flats[0].len();
    if let Some(f) = flats.iter().find(|f| f.len() != len) {
        return Err(Error::Length {
            expected: len,
            actual: f.len(),
        });
    }
    let out: Vec<f64> = (0..len)
        .map(|i| {
            let mut acc = 0.0;
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for (f, &nk) in flats.iter().zip(n) {
                acc += nk as f64 * f[i];
                lo = lo.min(f[i]);
                hi = hi.max(f[i]);
            }
            if lo == hi {
                lo
            } else {
                (acc / total as f64).clamp(lo, hi)
            }
        })
        .collect();
    unflatten_params(first, &out)
}

#[derive(Clone, Debug)]
pub struct ServerGradient {
    pub mean: FlatParams,
    pub tau: usize,
    /// The per-iteration gradients, in probe order.
    pub trace: Vec<FlatParams>,
}

/// Number of server iterations `ceil(n0 * E / B)`.
pub fn server_iterations(n0: usize, epochs: usize, batch: usize) -> usize {
    (n0 * epochs).div_ceil(batch.max(1))
}

/// Mean of the stochastic gradients met along `tau` SGD probe steps on the
/// server data. The probe trajectory itself is discarded.
pub fn normalized_server_gradient(
    start: &Model,
    data: &Dataset,
    epochs: usize,
    batch: usize,
    lr: f64,
    seed: u64,
) -> Result<ServerGradient> {
    if data.is_empty() {
        return Err(Error::Empty("server dataset"));
    }
    let n0 = data.len();
    let tau = server_iterations(n0, epochs, batch);
    // One index stream of E shuffled passes, cut into tau batches.
    let mut stream = Vec::with_capacity(n0 * epochs);
    for e in 0..epochs {
        let mut rng = seed::rng(seed, &[e as u64]);
        let mut order: Vec<usize> = (0..n0).collect();
        order.shuffle(&mut rng);
        stream.extend(order);
    }
    let mut model = start.clone();
    let mut w = flatten_params(start).0;
    let mut sum = vec![0.0; w.len()];
    let mut trace = Vec::with_capacity(tau);
    for idx in stream.chunks(batch.max(1)) {
        let (xs, ys) = batch_refs(data, idx);
        let (_, g) = loss_and_gradient(&model, &xs, &ys)?;
        for ((s, wi), gi) in sum.iter_mut().zip(w.iter_mut()).zip(&g.0) {
            *s += gi;
            *wi -= lr * gi;
        }
        trace.push(g);
        model = unflatten_params(&model, &w)?;
    }
    debug_assert_eq!(trace.len(), tau);
    let mean = sum.iter().map(|s| s / tau as f64).collect();
    Ok(ServerGradient {
        mean: FlatParams(mean),
        tau,
        trace,
    })
}

/// Inputs of the effective step size.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInputs {
    /// Server-data accuracy of the aggregated model.
    pub accuracy: f64,
    /// Non-IID degree of the selected devices' pooled distribution.
    pub div_selected: f64,
    /// Non-IID degree of the server distribution.
    pub div_server: f64,
    pub n_server: usize,
    pub n_selected: usize,
    pub server_scale: f64,
    pub decay: f64,
    pub round: usize,
    pub tau: usize,
}

/// `f'(acc) * n0 D(P') / (n0 D(P') + n' D(P0)) * C * decay^t * tau`. When
/// both divergence terms vanish the fraction is `n0 / (n0 + n')`.
pub fn effective_step(inputs: &StepInputs, f_prime: &dyn StepScale) -> f64 {
    let StepInputs {
        accuracy,
        div_selected,
        div_server,
        n_server,
        n_selected,
        server_scale,
        decay,
        round,
        tau,
    } = *inputs;
    let num = n_server as f64 * div_selected;
    let den = num + n_selected as f64 * div_server;
    let fraction = if den > 0.0 {
        num / den
    } else if n_server + n_selected > 0 {
        n_server as f64 / (n_server + n_selected) as f64
    } else {
        0.0
    };
    f_prime.scale(accuracy) * fraction * server_scale * decay.powi(round as i32) * tau as f64
}

/// `w - tau_eff * lr * g`; returns the input unchanged when the step is 0.
pub fn server_update(model: &Model, g: &FlatParams, tau_eff: f64, lr: f64) -> Result<Model> {
    if tau_eff == 0.0 || g.0.iter().all(|&v| v == 0.0) {
        if g.len() != model.param_count() {
            return Err(Error::Length {
                expected: model.param_count(),
                actual: g.len(),
            });
        }
        return Ok(model.clone());
    }
    sgd_step(model, g, tau_eff * lr)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn evaluate(model: &Model, data: &Dataset) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation dataset"));
    }
    let mut correct = 0usize;
    let mut loss = 0.0;
    for s in data.samples() {
        let z = predict(model, s.input.data());
        if argmax(&z) == s.label {
            correct += 1;
        }
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = z.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        loss += lse - z[s.label];
    }
    let n = data.len() as f64;
    Ok(Evaluation {
        accuracy: correct as f64 / n,
        loss: loss / n,
    })
}

/// Floating-point operations one device spends per training sample:
/// forward plus a backward pass costed at twice the forward.
pub fn training_flops_per_sample(model: &Model) -> f64 {
    3.0 * flops_count(model) * 1e6
}

/// Executes one round and returns the next server state.
pub fn run_round(
    state: &ServerState,
    pool: &DevicePool,
    config: &FedConfig,
    mode: UpdateMode,
    test: Option<&Dataset>,
) -> Result<(ServerState, RoundRecord)> {
    let started = Instant::now();
    let t = state.round;
    let selected = select_devices(t, pool.devices.len(), config.per_round, config.seed);

    let updates: Vec<LocalUpdate> = selected
        .par_iter()
        .map(|&k| {
            let dev = &pool.devices[k];
            local_update(
                &state.model,
                &dev.data,
                config.local_epochs,
                config.batch_size,
                config.lr,
                seed::derive(config.seed, &[tag::LOCAL_SHUFFLE, t as u64, k as u64]),
            )
        })
        .collect::<Result<_>>()?;

    let sizes: Vec<usize> = selected.iter().map(|&k| pool.devices[k].len()).collect();
    let models: Vec<&Model> = updates.iter().map(|u| &u.model).collect();
    let aggregated = aggregate(&models, &sizes)?;

    let per_sample = training_flops_per_sample(&state.model);
    let device_flops: Vec<f64> = updates
        .iter()
        .map(|u| per_sample * u.samples_processed as f64)
        .collect();
    let device_mflops = device_flops.iter().sum::<f64>() / 1e6;
    let device_seconds = device_flops.iter().fold(0.0f64, |a, &f| a.max(f)) / config.device_flops;
    let train_loss = updates.iter().map(|u| u.mean_loss).sum::<f64>() / updates.len() as f64;

    let server_eval = if state.data.is_empty() {
        None
    } else {
        Some(evaluate(&aggregated, &state.data)?)
    };

    let mut tau_eff = 0.0;
    let next_model = match (mode, &state.dist, server_eval) {
        (UpdateMode::FedDu, Some(p0), Some(eval)) => {
            let dists: Vec<_> = selected.iter().map(|&k| &pool.devices[k].dist).collect();
            let pooled = global_distribution(&dists, &sizes)?;
            let n_selected: usize = sizes.iter().sum();
            let tau = server_iterations(state.data.len(), config.local_epochs, config.batch_size);
            tau_eff = effective_step(
                &StepInputs {
                    accuracy: eval.accuracy,
                    div_selected: noniid_degree(pooled.probs(), pool.global.probs())?,
                    div_server: noniid_degree(p0.probs(), pool.global.probs())?,
                    n_server: state.data.len(),
                    n_selected,
                    server_scale: config.server_scale,
                    decay: config.decay,
                    round: t,
                    tau,
                },
                &config.f_prime,
            );
            if tau_eff > 0.0 {
                let g0 = normalized_server_gradient(
                    &aggregated,
                    &state.data,
                    config.local_epochs,
                    config.batch_size,
                    config.lr,
                    seed::derive(config.seed, &[tag::SERVER_PROBE, t as u64]),
                )?;
                server_update(&aggregated, &g0.mean, tau_eff, config.lr)?
            } else {
                aggregated
            }
        }
        _ => aggregated,
    };

    let test_eval = test.map(|d| evaluate(&next_model, d)).transpose()?;
    let cumulative = state.device_seconds + device_seconds;
    let record = RoundRecord {
        round: t,
        server_accuracy: server_eval.map(|e| e.accuracy),
        test_accuracy: test_eval.map(|e| e.accuracy),
        test_loss: test_eval.map(|e| e.loss),
        train_loss,
        tau_eff,
        selected,
        device_mflops,
        device_seconds,
        cumulative_device_seconds: cumulative,
        model_mflops: flops_count(&state.model),
        wall_seconds: started.elapsed().as_secs_f64(),
    };
    let next = ServerState {
        round: t + 1,
        model: next_model,
        data: state.data.clone(),
        dist: state.dist.clone(),
        device_seconds: cumulative,
    };
    Ok((next, record))
}
