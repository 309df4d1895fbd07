//! Layer-adaptive structured filter pruning.
//!
//! Pipeline, run once on the server at a configured round:
//!
//! 1. every party (server and devices) estimates an expected pruning rate
//!    from the eigen-gaps of its local loss Hessian;
//! 2. the rates are merged with weights `n_k / (D(P_k) + eps)`;
//! 3. the merged rate picks a global magnitude threshold, which in turn
//!    gives each conv layer its own rate;
//! 4. each conv layer keeps its highest feature-map-rank filters and the
//!    model is rebuilt without the others.

use std::collections::BTreeMap;

use log::warn;
use rand::seq::index::sample as sample_indices;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{global_distribution, label_distribution, noniid_degree, Dataset};
use crate::error::{Error, Result};
use crate::nnkernel::{
    flatten_params, forward, hessian_of, matrix_rank, sym_eigenvalues, ActShape, Conv2d, Dense,
    DatasetObjective, Layer, Matrix, Model, Objective, Tensor, DEFAULT_HESSIAN_CAP,
    DEFAULT_RANK_TOL,
};
use crate::seed::{self, tag};

/// Eigen-gaps below this fraction of the spectral radius are treated as
/// numerical noise of the finite-difference Hessian.
pub const GAP_NOISE_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct RateConfig {
    pub hessian_cap: usize,
    /// Upper clamp on each party's expected rate.
    pub p_max: f64,
    /// Number of seeded perturbation pairs for the Lipschitz estimate.
    pub lipschitz_pairs: usize,
    /// Perturbation radius as a multiple of `||initial - current||`.
    pub lipschitz_radius: f64,
    pub lipschitz_safety: f64,
    pub seed: u64,
}

impl Default for RateConfig {
    fn default() -> Self {
        RateConfig {
            hessian_cap: DEFAULT_HESSIAN_CAP,
            p_max: 0.9,
            lipschitz_pairs: 16,
            lipschitz_radius: 1.0,
            lipschitz_safety: 2.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateEstimate {
    pub client: usize,
    /// Hessian dimension.
    pub dim: usize,
    /// Number of eigenvalues below the first qualifying gap.
    pub gap_index: usize,
    pub rate: f64,
    pub lipschitz: f64,
}

/// Round-0 global model paired with the model at the pruning round.
#[derive(Clone, Debug)]
pub struct SnapshotPair {
    pub initial: Model,
    pub current: Model,
}

impl SnapshotPair {
    pub fn new(initial: Model, current: Model) -> Result<Self> {
        let same_arch = initial.param_count() == current.param_count()
            && initial
                .layers()
                .iter()
                .zip(current.layers())
                .all(|(a, b)| a.kind() == b.kind() && a.param_count() == b.param_count())
            && initial.layers().len() == current.layers().len();
        if !same_arch {
            return Err(Error::InvalidArgument(
                "snapshot models have different architectures".into(),
            ));
        }
        Ok(SnapshotPair { initial, current })
    }

    pub fn delta(&self) -> Vec<f64> {
        let a = flatten_params(&self.initial).0;
        let b = flatten_params(&self.current).0;
        a.iter().zip(&b).map(|(x, y)| x - y).collect()
    }
}

/// First `m` (1-based count) with `lambda_{m+1} - lambda_m > 4 L`, or 0.
pub fn gap_index(ascending: &[f64], lipschitz: f64) -> usize {
    let scale = ascending
        .iter()
        .fold(1.0f64, |acc, v| acc.max(v.abs()));
    let floor = GAP_NOISE_FLOOR * scale;
    ascending
        .windows(2)
        .position(|w| {
            let gap = w[1] - w[0];
            gap > 4.0 * lipschitz && gap > floor
        })
        .map_or(0, |i| i + 1)
}

/// Lipschitz constant of the second-order Taylor residual
/// `B(d) = grad(w + d) - grad(w) - H d`, estimated as `safety` times the
/// largest difference quotient over `pairs` seeded perturbation pairs with
/// `|d| <= radius`.
pub fn lipschitz_estimate(
    obj: &dyn Objective,
    w: &[f64],
    h: &Matrix,
    radius: f64,
    pairs: usize,
    safety: f64,
    seed: u64,
) -> Result<f64> {
    if pairs < 2 {
        return Err(Error::InvalidArgument(
            "lipschitz estimate needs at least 2 perturbation pairs".into(),
        ));
    }
    let d = w.len();
    if radius == 0.0 || d == 0 {
        return Ok(0.0);
    }
    let g0 = obj.gradient(w)?;
    let perturbations: Vec<Vec<f64>> = (0..2 * pairs)
        .map(|s| {
            let mut rng = seed::rng(seed, &[tag::LIPSCHITZ, s as u64]);
            let dir: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            let u: f64 = rand::Rng::random(&mut rng);
            let r = radius * u.powf(1.0 / d as f64);
            dir.iter().map(|v| v * r / norm).collect()
        })
        .collect();
    let residuals: Vec<Vec<f64>> = perturbations
        .par_iter()
        .map(|delta| {
            let shifted: Vec<f64> = w.iter().zip(delta).map(|(a, b)| a + b).collect();
            let g = obj.gradient(&shifted)?;
            let hd = h.mul_vec(delta);
            Ok(g.iter()
                .zip(&g0)
                .zip(&hd)
                .map(|((gi, g0i), hdi)| gi - g0i - hdi)
                .collect())
        })
        .collect::<Result<_>>()?;
    let mut best = 0.0f64;
    for i in (0..2 * pairs).step_by(2) {
        let num = dist(&residuals[i], &residuals[i + 1]);
        let den = dist(&perturbations[i], &perturbations[i + 1]);
        if den > 0.0 {
            best = best.max(num / den);
        }
    }
    Ok(safety * best)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Expected pruning rate for one party from an arbitrary objective.
pub fn expected_rate(
    obj: &dyn Objective,
    current: &[f64],
    delta_norm: f64,
    client: usize,
    config: &RateConfig,
) -> Result<RateEstimate> {
    let h = hessian_of(obj, current, config.hessian_cap)?;
    let eig = sym_eigenvalues(&h)?;
    let lipschitz = lipschitz_estimate(
        obj,
        current,
        &h,
        config.lipschitz_radius * delta_norm,
        config.lipschitz_pairs,
        config.lipschitz_safety,
        seed::derive(config.seed, &[client as u64]),
    )?;
    let dim = eig.len();
    let gap = gap_index(&eig, lipschitz);
    let rate = if dim == 0 {
        0.0
    } else {
        (gap as f64 / dim as f64).clamp(0.0, config.p_max)
    };
    Ok(RateEstimate {
        client,
        dim,
        gap_index: gap,
        rate,
        lipschitz,
    })
}

/// Expected pruning rate of one party on its own data.
pub fn expected_rate_client(
    snapshot: &SnapshotPair,
    dataset: &Dataset,
    client: usize,
    config: &RateConfig,
) -> Result<RateEstimate> {
    let obj = DatasetObjective::new(&snapshot.current, dataset)?;
    let delta = snapshot.delta();
    let delta_norm = delta.iter().map(|v| v * v).sum::<f64>().sqrt();
    expected_rate(
        &obj,
        &flatten_params(&snapshot.current).0,
        delta_norm,
        client,
        config,
    )
}

/// Normalized merge weights `n_k / (D_k + eps)`.
pub fn rate_weights(n: &[usize], divergences: &[f64], eps: f64) -> Result<Vec<f64>> {
    if n.is_empty() {
        return Err(Error::Empty("rate estimate list"));
    }
    if n.len() != divergences.len() {
        return Err(Error::Length {
            expected: n.len(),
            actual: divergences.len(),
        });
    }
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon must be > 0, got {eps}")));
    }
    let raw: Vec<f64> = n
        .iter()
        .zip(divergences)
        .map(|(&nk, &dk)| nk as f64 / (dk + eps))
        .collect();
    let total: f64 = raw.iter().sum();
    if !(total > 0.0) {
        return Err(Error::InvalidArgument("all parties have zero samples".into()));
    }
    Ok(raw.iter().map(|r| r / total).collect())
}

/// Aggregated expected pruning rate.
pub fn aggregate_rate(rates: &[f64], n: &[usize], divergences: &[f64], eps: f64) -> Result<f64> {
    let weights = rate_weights(n, divergences, eps)?;
    if rates.len() != weights.len() {
        return Err(Error::Length {
            expected: weights.len(),
            actual: rates.len(),
        });
    }
    Ok(weights.iter().zip(rates).map(|(w, p)| w * p).sum())
}

/// Magnitude of the `floor(R p)`-th smallest parameter (1-based, ties by
/// position); 0 when that index is 0.
pub fn global_threshold(values: &[f64], p_star: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("parameter vector"));
    }
    if !(0.0..=1.0).contains(&p_star) {
        return Err(Error::InvalidArgument(format!(
            "pruning rate must lie in [0, 1], got {p_star}"
        )));
    }
    let idx = (values.len() as f64 * p_star).floor() as usize;
    if idx == 0 {
        return Ok(0.0);
    }
    let mut mags: Vec<f64> = values.iter().map(|v| v.abs()).collect();
    // Stable sort keeps equal magnitudes in original order.
    mags.sort_by(f64::total_cmp);
    Ok(mags[idx.min(mags.len()) - 1])
}

/// Fraction of `values` strictly below `threshold` in magnitude.
pub fn rate_below(values: impl IntoIterator<Item = f64>, threshold: f64) -> f64 {
    let (below, total) = values
        .into_iter()
        .fold((0usize, 0usize), |(b, t), v| (b + usize::from(v.abs() < threshold), t + 1));
    if total == 0 {
        0.0
    } else {
        below as f64 / total as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRate {
    /// Index into `Model::layers`.
    pub layer: usize,
    pub rate: f64,
}

/// Conv layers whose removal can be propagated to a following layer.
pub fn prune_list(model: &Model) -> Vec<usize> {
    model
        .conv_layer_indices()
        .into_iter()
        .filter(|&l| {
            let ok = next_parametric(model, l).is_some();
            if !ok {
                warn!("conv layer {l} has no following conv/dense layer; excluded from pruning");
            }
            ok
        })
        .collect()
}

fn next_parametric(model: &Model, layer: usize) -> Option<usize> {
    model.layers()[layer + 1..]
        .iter()
        .position(|l| matches!(l, Layer::Conv2d(_) | Layer::Dense(_)))
        .map(|p| layer + 1 + p)
}

/// Per-layer rates: the share of each prunable conv layer's parameters
/// (weights and bias) strictly below `threshold` in magnitude.
pub fn layer_rates(model: &Model, threshold: f64) -> Vec<LayerRate> {
    prune_list(model)
        .into_iter()
        .map(|l| LayerRate {
            layer: l,
            rate: rate_below(model.layers()[l].params(), threshold),
        })
        .collect()
}

/// Every prunable conv layer at the same fixed rate.
pub fn fixed_layer_rates(model: &Model, rate: f64) -> Vec<LayerRate> {
    prune_list(model)
        .into_iter()
        .map(|l| LayerRate { layer: l, rate })
        .collect()
}

/// Mean numerical rank of each filter's output map over the batch. When the
/// conv feeds a ReLU the activated map is ranked, so dead filters score low.
pub fn feature_map_ranks(model: &Model, batch: &Tensor, layer: usize) -> Result<Vec<f64>> {
    let convs = model.conv_layer_indices();
    let slot = convs.iter().position(|&l| l == layer).ok_or_else(|| {
        Error::InvalidArgument(format!("layer {layer} is not a Conv2d layer"))
    })?;
    let n = batch.shape().first().copied().unwrap_or(0);
    if n == 0 {
        return Err(Error::Empty("calibration batch"));
    }
    // Labels are irrelevant for the maps; class 0 always exists.
    let out = forward(model, batch, &vec![0; n])?;
    let maps = &out.feature_maps[slot];
    let [_, filters, h, w] = maps.shape() else {
        unreachable!("feature maps are 4-D")
    };
    let (filters, h, w) = (*filters, *h, *w);
    let activated = matches!(model.layers().get(layer + 1), Some(Layer::Relu));
    let mut ranks = vec![0.0; filters];
    for s in 0..n {
        let sample = maps.outer(s);
        for (j, r) in ranks.iter_mut().enumerate() {
            let mut map = sample[j * h * w..(j + 1) * h * w].to_vec();
            if activated {
                map.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            let fm = Matrix::from_vec(h, w, map)?;
            *r += matrix_rank(&fm, DEFAULT_RANK_TOL)? as f64;
        }
    }
    for r in &mut ranks {
        *r /= n as f64;
    }
    Ok(ranks)
}

/// Deterministic calibration batch of up to `size` samples.
pub fn calibration_batch(dataset: &Dataset, size: usize, seed: u64) -> Result<Tensor> {
    if dataset.is_empty() {
        return Err(Error::Empty("calibration dataset"));
    }
    let take = size.clamp(1, dataset.len());
    let mut rng = seed::rng(seed, &[tag::CALIBRATION]);
    let mut idx = sample_indices(&mut rng, dataset.len(), take).into_vec();
    idx.sort_unstable();
    Ok(dataset.batch(&idx)?.0)
}

/// Ranks of `layer` computed on a device's own data, for federations
/// without server data.
pub fn decentralized_ranks(
    device: &Dataset,
    model: &Model,
    layer: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let batch = calibration_batch(device, batch_size, seed)?;
    feature_map_ranks(model, &batch, layer)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub layer: usize,
    pub rate: f64,
    pub filters_before: usize,
    /// Kept filter indices (original numbering), ascending.
    pub preserved: Vec<usize>,
    pub ranks: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruningPlan {
    pub p_star: f64,
    pub threshold: f64,
    pub layers: Vec<LayerPlan>,
}

impl PruningPlan {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

/// Inputs of the surgery step.
#[derive(Clone, Debug, PartialEq)]
pub struct PlanInputs {
    pub p_star: f64,
    pub threshold: f64,
    pub layer_rates: Vec<LayerRate>,
}

/// Filters kept for a layer with `d` filters at `rate`: the last
/// `d - floor(rate d)` (at least one) after a stable ascending sort by
/// rank, returned in ascending index order.
pub fn preserved_filters(ranks: &[f64], rate: f64) -> Vec<usize> {
    let d = ranks.len();
    let removed = ((rate.clamp(0.0, 1.0) * d as f64).floor() as usize).min(d.saturating_sub(1));
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| ranks[a].total_cmp(&ranks[b]).then(a.cmp(&b)));
    let mut keep = order[removed..].to_vec();
    keep.sort_unstable();
    keep
}

/// Computes ranks on `calibration` and removes filters.
pub fn prune_model(model: &Model, inputs: &PlanInputs, calibration: &Tensor) -> Result<(Model, PruningPlan)> {
    let mut ranks = BTreeMap::new();
    for lr in &inputs.layer_rates {
        ranks.insert(lr.layer, feature_map_ranks(model, calibration, lr.layer)?);
    }
    prune_with_ranks(model, inputs, &ranks)
}

/// Surgery with externally supplied ranks (e.g. computed on a device).
pub fn prune_with_ranks(
    model: &Model,
    inputs: &PlanInputs,
    ranks: &BTreeMap<usize, Vec<f64>>,
) -> Result<(Model, PruningPlan)> {
    let allowed = prune_list(model);
    let mut layers = model.layers().to_vec();
    let shapes = model.act_shapes();
    let mut plans = Vec::with_capacity(inputs.layer_rates.len());
    for lr in &inputs.layer_rates {
        if !allowed.contains(&lr.layer) {
            warn!("layer {} is not prunable; skipped", lr.layer);
            continue;
        }
        let Layer::Conv2d(conv) = &model.layers()[lr.layer] else {
            unreachable!("prune list holds conv layers only")
        };
        let r = ranks.get(&lr.layer).ok_or_else(|| {
            Error::InvalidArgument(format!("no ranks supplied for layer {}", lr.layer))
        })?;
        if r.len() != conv.out_channels {
            return Err(Error::Length {
                expected: conv.out_channels,
                actual: r.len(),
            });
        }
        let keep = preserved_filters(r, lr.rate);
        if keep.len() < conv.out_channels {
            let Layer::Conv2d(c) = &layers[lr.layer] else { unreachable!() };
            layers[lr.layer] = Layer::Conv2d(select_outputs(c, &keep)?);
            let next = next_parametric(model, lr.layer).expect("prune list checked");
            let ActShape::Spatial { h, w, .. } = shapes[lr.layer + 1] else {
                unreachable!("conv output is spatial")
            };
            layers[next] = match &layers[next] {
                Layer::Conv2d(c) => Layer::Conv2d(select_inputs(c, &keep)?),
                Layer::Dense(d) => Layer::Dense(select_columns(d, &keep, h * w)?),
                _ => unreachable!(),
            };
        }
        plans.push(LayerPlan {
            layer: lr.layer,
            rate: lr.rate,
            filters_before: conv.out_channels,
            preserved: keep,
            ranks: r.clone(),
        });
    }
    let pruned = Model::new(model.input_shape(), layers)?;
    Ok((
        pruned,
        PruningPlan {
            p_star: inputs.p_star,
            threshold: inputs.threshold,
            layers: plans,
        },
    ))
}

fn select_outputs(c: &Conv2d, keep: &[usize]) -> Result<Conv2d> {
    let fl = c.filter_len();
    let w: Vec<f64> = keep
        .iter()
        .flat_map(|&o| c.weight.data()[o * fl..(o + 1) * fl].iter().copied())
        .collect();
    let b: Vec<f64> = keep.iter().map(|&o| c.bias.data()[o]).collect();
    Ok(Conv2d {
        out_channels: keep.len(),
        weight: Tensor::new(vec![keep.len(), c.in_channels, c.kernel_size, c.kernel_size], w)?,
        bias: Tensor::new(vec![keep.len()], b)?,
        ..c.clone()
    })
}

fn select_inputs(c: &Conv2d, keep: &[usize]) -> Result<Conv2d> {
    let kk = c.kernel_size * c.kernel_size;
    let mut w = Vec::with_capacity(c.out_channels * keep.len() * kk);
    for o in 0..c.out_channels {
        for &i in keep {
            let start = (o * c.in_channels + i) * kk;
            w.extend_from_slice(&c.weight.data()[start..start + kk]);
        }
    }
    Ok(Conv2d {
        in_channels: keep.len(),
        weight: Tensor::new(vec![c.out_channels, keep.len(), c.kernel_size, c.kernel_size], w)?,
        ..c.clone()
    })
}

/// Drops the dense columns fed by removed channels; a flattened
/// `[c, h, w]` map places channel `c` at columns `c*hw .. (c+1)*hw`.
fn select_columns(d: &Dense, keep: &[usize], hw: usize) -> Result<Dense> {
    let in_dim = keep.len() * hw;
    let mut w = Vec::with_capacity(d.out_dim * in_dim);
    for row in d.weight.data().chunks(d.in_dim) {
        for &c in keep {
            w.extend_from_slice(&row[c * hw..(c + 1) * hw]);
        }
    }
    Ok(Dense {
        in_dim,
        out_dim: d.out_dim,
        weight: Tensor::new(vec![d.out_dim, in_dim], w)?,
        bias: d.bias.clone(),
    })
}

/// Forward-pass cost per sample in millions of floating-point operations:
/// `2 k^2 C_in C_out H_out W_out` per conv layer and `2 in out` per dense
/// layer.
pub fn flops_count(model: &Model) -> f64 {
    let shapes = model.act_shapes();
    let flops: usize = model
        .layers()
        .iter()
        .enumerate()
        .map(|(i, l)| match (l, shapes[i + 1]) {
            (Layer::Conv2d(c), ActShape::Spatial { h, w, .. }) => {
                2 * c.kernel_size * c.kernel_size * c.in_channels * c.out_channels * h * w
            }
            (Layer::Dense(d), _) => 2 * d.in_dim * d.out_dim,
            _ => 0,
        })
        .sum();
    flops as f64 / 1e6
}

// ---- end-to-end -----------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct FedApConfig {
    pub rate: RateConfig,
    /// `eps` in the merge weights.
    pub epsilon: f64,
    pub calibration_batch: usize,
}

impl Default for FedApConfig {
    fn default() -> Self {
        FedApConfig {
            rate: RateConfig::default(),
            epsilon: 0.01,
            calibration_batch: 32,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FedApOutcome {
    pub model: Model,
    pub plan: PruningPlan,
    /// Server first (when present), then devices in id order.
    pub estimates: Vec<RateEstimate>,
    pub divergences: Vec<f64>,
}

/// Runs the whole pruning pipeline. Party ids are 0 for the server and
/// `k + 1` for device `k`. Without server data the ranks come from device 0.
pub fn fedap(
    snapshot: &SnapshotPair,
    server: &Dataset,
    devices: &[Dataset],
    config: &FedApConfig,
) -> Result<FedApOutcome> {
    if devices.is_empty() {
        return Err(Error::Empty("device list"));
    }
    let device_dists = devices
        .iter()
        .map(label_distribution)
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<_> = device_dists.iter().collect();
    let sizes: Vec<usize> = devices.iter().map(Dataset::len).collect();
    let p_bar = global_distribution(&refs, &sizes)?;

    let mut parties: Vec<(usize, &Dataset)> = Vec::with_capacity(devices.len() + 1);
    if !server.is_empty() {
        parties.push((0, server));
    }
    parties.extend(devices.iter().enumerate().map(|(k, d)| (k + 1, d)));

    let estimates = parties
        .par_iter()
        .map(|&(id, data)| expected_rate_client(snapshot, data, id, &config.rate))
        .collect::<Result<Vec<_>>>()?;
    let divergences = parties
        .iter()
        .map(|(_, data)| noniid_degree(label_distribution(data)?.probs(), p_bar.probs()))
        .collect::<Result<Vec<_>>>()?;
    let counts: Vec<usize> = parties.iter().map(|(_, d)| d.len()).collect();
    let rates: Vec<f64> = estimates.iter().map(|e| e.rate).collect();
    let p_star = aggregate_rate(&rates, &counts, &divergences, config.epsilon)?.clamp(0.0, 1.0);

    let current = &snapshot.current;
    let threshold = global_threshold(&flatten_params(current).0, p_star)?;
    let inputs = PlanInputs {
        p_star,
        threshold,
        layer_rates: layer_rates(current, threshold),
    };
    let calib_source = if server.is_empty() { &devices[0] } else { server };
    let calibration = calibration_batch(calib_source, config.calibration_batch, config.rate.seed)?;
    let (model, plan) = prune_model(current, &inputs, &calibration)?;
    Ok(FedApOutcome {
        model,
        plan,
        estimates,
        divergences,
    })
}

/// Baseline: every prunable layer at `rate`, filters chosen by rank.
pub fn fixed_rate_prune(
    model: &Model,
    rate: f64,
    calibration_source: &Dataset,
    config: &FedApConfig,
) -> Result<(Model, PruningPlan)> {
    let inputs = PlanInputs {
        p_star: rate,
        threshold: 0.0,
        layer_rates: fixed_layer_rates(model, rate),
    };
    let calibration = calibration_batch(calibration_source, config.calibration_batch, config.rate.seed)?;
    prune_model(model, &inputs, &calibration)
}
