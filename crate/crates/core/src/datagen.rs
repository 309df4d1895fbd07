//! Synthetic datasets, non-IID partitioning and label-distribution
//! statistics.
//!
//! The non-IID degree of a party is the Jensen–Shannon divergence between
//! its label distribution and the sample-weighted global distribution,
//! computed with natural logarithms so it lies in `[0, ln 2]`.

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnkernel::Tensor;
use crate::seed::{self, tag};

const MAX_PARTITION_RETRIES: u64 = 1000;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub input: Tensor,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    input_shape: [usize; 3],
    num_classes: usize,
    samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(input_shape: [usize; 3], num_classes: usize, samples: Vec<Sample>) -> Result<Self> {
        let len: usize = input_shape.iter().product();
        for (i, s) in samples.iter().enumerate() {
            if s.label >= num_classes {
                return Err(Error::InvalidArgument(format!(
                    "sample {i}: label {} outside 0..{num_classes}",
                    s.label
                )));
            }
            if s.input.shape() != input_shape {
                return Err(Error::InvalidArgument(format!(
                    "sample {i}: shape {:?} != {input_shape:?} ({len} values)",
                    s.input.shape()
                )));
            }
        }
        Ok(Dataset {
            input_shape,
            num_classes,
            samples,
        })
    }

    pub fn empty(input_shape: [usize; 3], num_classes: usize) -> Self {
        Dataset {
            input_shape,
            num_classes,
            samples: Vec::new(),
        }
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn inputs(&self) -> Vec<&[f64]> {
        self.samples.iter().map(|s| s.input.data()).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// New dataset holding the samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            input_shape: self.input_shape,
            num_classes: self.num_classes,
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    /// Stacks the samples at `indices` into a `[n, c, h, w]` batch.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let refs: Vec<&Tensor> = indices.iter().map(|&i| &self.samples[i].input).collect();
        let batch = Tensor::stack(&refs)?;
        Ok((batch, indices.iter().map(|&i| self.samples[i].label).collect()))
    }

    /// SHA-256 over shape, labels and the bit patterns of every input.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for d in self.input_shape {
            h.update((d as u64).to_le_bytes());
        }
        h.update((self.num_classes as u64).to_le_bytes());
        for s in &self.samples {
            h.update((s.label as u64).to_le_bytes());
            for v in s.input.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// One JSON object `{"label": y, "data": [...]}` per line.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        #[derive(Serialize)]
        struct Line<'a> {
            label: usize,
            data: &'a [f64],
        }
        for s in &self.samples {
            let line = serde_json::to_string(&Line {
                label: s.label,
                data: s.input.data(),
            })?;
            writeln!(out, "{line}").map_err(|e| Error::io("<jsonl writer>", e))?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(input: R, input_shape: [usize; 3], num_classes: usize) -> Result<Self> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Line {
            label: usize,
            data: Vec<f64>,
        }
        let mut samples = Vec::new();
        for (no, line) in input.lines().enumerate() {
            let line = line.map_err(|e| Error::io("<jsonl reader>", e))?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: Line = serde_json::from_str(&line)
                .map_err(|e| Error::Parse(format!("line {}: {e}", no + 1)))?;
            samples.push(Sample {
                input: Tensor::new(input_shape.to_vec(), parsed.data)?,
                label: parsed.label,
            });
        }
        Dataset::new(input_shape, num_classes, samples)
    }
}

/// Parameters of the Gaussian-blob generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub shape: [usize; 3],
    pub per_class: usize,
    pub noise_sigma: f64,
}

/// Per-class templates built from a few random Gaussian bumps, shared by
/// every dataset generated with the same seed.
fn class_templates(spec: &SyntheticSpec, seed: u64) -> Vec<Vec<f64>> {
    let [c, h, w] = spec.shape;
    (0..spec.classes)
        .map(|y| {
            let mut rng = seed::rng(seed, &[tag::DATA_TEMPLATE, y as u64]);
            let mut t = vec![0.0; c * h * w];
            for ch in 0..c {
                for _ in 0..3 {
                    let cy = rng.random_range(0.0..h as f64);
                    let cx = rng.random_range(0.0..w as f64);
                    let width = rng.random_range(1.0..(h.max(w) as f64 / 4.0).max(1.5));
                    let amp = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                    for iy in 0..h {
                        for ix in 0..w {
                            let d2 = (iy as f64 - cy).powi(2) + (ix as f64 - cx).powi(2);
                            t[(ch * h + iy) * w + ix] += amp * (-d2 / (2.0 * width * width)).exp();
                        }
                    }
                }
            }
            t
        })
        .collect()
}

/// Class-major synthetic blobs: `per_class` samples of label 0, then of
/// label 1, and so on. Deterministic in `seed`.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    generate_stream(spec, seed, 0)
}

/// Additional samples sharing the class templates of
/// [`generate_synthetic`] (same `seed`) with independent noise; `stream`
/// 0 reproduces `generate_synthetic` itself.
pub fn generate_stream(spec: &SyntheticSpec, seed: u64, stream: u64) -> Result<Dataset> {
    if spec.classes < 2 {
        return Err(Error::InvalidArgument("need at least 2 classes".into()));
    }
    if spec.per_class == 0 {
        return Err(Error::InvalidArgument("per_class must be at least 1".into()));
    }
    if !(spec.noise_sigma >= 0.0) || !spec.noise_sigma.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "noise_sigma must be finite and non-negative, got {}",
            spec.noise_sigma
        )));
    }
    let templates = class_templates(spec, seed);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut samples = Vec::with_capacity(spec.classes * spec.per_class);
    for (y, t) in templates.iter().enumerate() {
        let mut rng = seed::rng(seed, &[tag::DATA_NOISE, stream, y as u64]);
        for _ in 0..spec.per_class {
            let data = t
                .iter()
                .map(|v| v + spec.noise_sigma * noise.sample(&mut rng))
                .collect();
            samples.push(Sample {
                input: Tensor::new(spec.shape.to_vec(), data)?,
                label: y,
            });
        }
    }
    Dataset::new(spec.shape, spec.classes, samples)
}

// ---- partitioning --------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionMode {
    /// Per-class device proportions drawn from `Dir(alpha)`.
    Dirichlet { alpha: f64 },
    /// Sort by label and deal `per_device` contiguous shards to each device.
    Shards { per_device: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ServerMode {
    /// Stratified sample matching the overall label proportions.
    Iid,
    /// Label proportions drawn from `Dir(alpha)`.
    Dirichlet { alpha: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub mode: PartitionMode,
    pub num_devices: usize,
    /// Fraction of all samples held by the server, in `[0, 1)`.
    pub server_fraction: f64,
    pub server_mode: ServerMode,
    pub seed: u64,
}

impl PartitionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_devices == 0 {
            return Err(Error::Partition("num_devices must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.server_fraction) {
            return Err(Error::Partition(format!(
                "server_fraction must lie in [0, 1), got {}",
                self.server_fraction
            )));
        }
        match self.mode {
            PartitionMode::Dirichlet { alpha } if !(alpha > 0.0 && alpha.is_finite()) => {
                return Err(Error::Partition(format!("dirichlet alpha must be > 0, got {alpha}")))
            }
            PartitionMode::Shards { per_device: 0 } => {
                return Err(Error::Partition("shards per device must be at least 1".into()))
            }
            _ => {}
        }
        if let ServerMode::Dirichlet { alpha } = self.server_mode {
            if !(alpha > 0.0 && alpha.is_finite()) {
                return Err(Error::Partition(format!(
                    "server dirichlet alpha must be > 0, got {alpha}"
                )));
            }
        }
        Ok(())
    }
}

/// Sample indices (into the partitioned dataset) held by each party.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionManifest {
    pub server: Vec<usize>,
    pub devices: Vec<Vec<usize>>,
}

#[derive(Clone, Debug)]
pub struct Partition {
    pub server: Dataset,
    pub devices: Vec<Dataset>,
    pub manifest: PartitionManifest,
}

pub fn partition(dataset: &Dataset, spec: &PartitionSpec) -> Result<Partition> {
    let manifest = partition_indices(dataset.labels().as_slice(), dataset.num_classes(), spec)?;
    Ok(Partition {
        server: dataset.subset(&manifest.server),
        devices: manifest.devices.iter().map(|d| dataset.subset(d)).collect(),
        manifest,
    })
}

/// Index-level partition of samples with the given labels.
pub fn partition_indices(labels: &[usize], classes: usize, spec: &PartitionSpec) -> Result<PartitionManifest> {
    spec.validate()?;
    let n = labels.len();
    let n_server = (spec.server_fraction * n as f64).floor() as usize;
    if n - n_server < spec.num_devices {
        return Err(Error::Partition(format!(
            "{} device samples cannot cover {} devices",
            n - n_server,
            spec.num_devices
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::InvalidArgument(format!("label {y} outside 0..{classes}")));
        }
        by_class[y].push(i);
    }

    let mut rng = seed::rng(spec.seed, &[tag::PARTITION, 0]);
    let counts: Vec<usize> = by_class.iter().map(Vec::len).collect();
    let quotas = match spec.server_mode {
        ServerMode::Iid => {
            let w: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
            capped_allocation(n_server, &w, &counts)
        }
        ServerMode::Dirichlet { alpha } => {
            let w = dirichlet(&mut rng, alpha, classes);
            capped_allocation(n_server, &w, &counts)
        }
    };
    let mut server = Vec::with_capacity(n_server);
    let mut remaining: Vec<Vec<usize>> = Vec::with_capacity(classes);
    for (idx, &q) in by_class.iter().zip(&quotas) {
        let mut idx = idx.clone();
        idx.shuffle(&mut rng);
        server.extend_from_slice(&idx[..q]);
        let mut rest = idx[q..].to_vec();
        rest.sort_unstable();
        remaining.push(rest);
    }
    server.sort_unstable();

    for attempt in 0..MAX_PARTITION_RETRIES {
        let mut rng = seed::rng(spec.seed, &[tag::PARTITION, 1, attempt]);
        let devices = match spec.mode {
            PartitionMode::Dirichlet { alpha } => {
                split_dirichlet(&remaining, spec.num_devices, alpha, &mut rng)
            }
            PartitionMode::Shards { per_device } => {
                split_shards(&remaining, labels, spec.num_devices, per_device, &mut rng)?
            }
        };
        if devices.iter().all(|d| !d.is_empty()) {
            return Ok(PartitionManifest { server, devices });
        }
    }
    Err(Error::Partition(format!(
        "could not give every one of {} devices a sample in {MAX_PARTITION_RETRIES} attempts",
        spec.num_devices
    )))
}

/// Largest-remainder allocation of `total` items proportional to
/// `weights`, never exceeding `caps`; any shortfall from capping is handed
/// to classes with spare capacity in index order.
fn capped_allocation(total: usize, weights: &[f64], caps: &[usize]) -> Vec<usize> {
    let wsum: f64 = weights.iter().sum();
    let k = weights.len();
    if total == 0 || wsum <= 0.0 {
        return vec![0; k];
    }
    let exact: Vec<f64> = weights.iter().map(|w| total as f64 * w / wsum).collect();
    let mut alloc: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut left = total.saturating_sub(alloc.iter().sum());
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(k) {
        if left == 0 {
            break;
        }
        alloc[i] += 1;
        left -= 1;
    }
    let mut spill = 0;
    for (a, &c) in alloc.iter_mut().zip(caps) {
        if *a > c {
            spill += *a - c;
            *a = c;
        }
    }
    for (a, &c) in alloc.iter_mut().zip(caps) {
        let take = spill.min(c - *a);
        *a += take;
        spill -= take;
    }
    alloc
}

fn dirichlet<R: Rng>(rng: &mut R, alpha: f64, k: usize) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated positive");
    let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        draws.iter().map(|d| d / sum).collect()
    } else {
        // All draws underflowed (tiny alpha): put the mass on one category.
        let mut p = vec![0.0; k];
        p[rng.random_range(0..k)] = 1.0;
        p
    }
}

fn split_dirichlet<R: Rng>(remaining: &[Vec<usize>], n_dev: usize, alpha: f64, rng: &mut R) -> Vec<Vec<usize>> {
    let mut devices = vec![Vec::new(); n_dev];
    for class_idx in remaining {
        let mut idx = class_idx.clone();
        idx.shuffle(rng);
        let props = dirichlet(rng, alpha, n_dev);
        let n = idx.len();
        let mut start = 0;
        let mut cum = 0.0;
        for (k, p) in props.iter().enumerate() {
            cum += p;
            let end = if k + 1 == n_dev {
                n
            } else {
                ((cum * n as f64).floor() as usize).clamp(start, n)
            };
            devices[k].extend_from_slice(&idx[start..end]);
            start = end;
        }
    }
    for d in &mut devices {
        d.sort_unstable();
    }
    devices
}

fn split_shards<R: Rng>(
    remaining: &[Vec<usize>],
    labels: &[usize],
    n_dev: usize,
    per_device: usize,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    let mut sorted: Vec<usize> = remaining.iter().flatten().copied().collect();
    sorted.sort_by_key(|&i| (labels[i], i));
    let n_shards = n_dev * per_device;
    if sorted.len() < n_shards {
        return Err(Error::Partition(format!(
            "{} samples cannot form {n_shards} shards",
            sorted.len()
        )));
    }
    let base = sorted.len() / n_shards;
    let extra = sorted.len() % n_shards;
    let mut shards = Vec::with_capacity(n_shards);
    let mut start = 0;
    for s in 0..n_shards {
        let len = base + usize::from(s < extra);
        shards.push(&sorted[start..start + len]);
        start += len;
    }
    let mut order: Vec<usize> = (0..n_shards).collect();
    order.shuffle(rng);
    Ok((0..n_dev)
        .map(|k| {
            let mut d: Vec<usize> = order[k * per_device..(k + 1) * per_device]
                .iter()
                .flat_map(|&s| shards[s].iter().copied())
                .collect();
            d.sort_unstable();
            d
        })
        .collect())
}

// ---- label statistics ----------------------------------------------------

/// Categorical distribution over the label set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelDistribution {
    probs: Vec<f64>,
}

impl LabelDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Empty("distribution"));
        }
        if probs.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "probabilities must be finite and non-negative: {probs:?}"
            )));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "probabilities sum to {sum}, not 1"
            )));
        }
        Ok(LabelDistribution { probs })
    }

    pub fn uniform(k: usize) -> Self {
        LabelDistribution {
            probs: vec![1.0 / k as f64; k],
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

pub fn label_distribution(dataset: &Dataset) -> Result<LabelDistribution> {
    if dataset.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let mut counts = vec![0usize; dataset.num_classes()];
    for s in dataset.samples() {
        counts[s.label] += 1;
    }
    let n = dataset.len() as f64;
    Ok(LabelDistribution {
        probs: counts.iter().map(|&c| c as f64 / n).collect(),
    })
}

/// Sample-count weighted mean `sum n_k P_k / sum n_k`.
pub fn global_distribution(dists: &[&LabelDistribution], weights: &[usize]) -> Result<LabelDistribution> {
    if dists.len() != weights.len() {
        return Err(Error::Length {
            expected: dists.len(),
            actual: weights.len(),
        });
    }
    let total: usize = weights.iter().sum();
    if total == 0 {
        return Err(Error::InvalidArgument("total weight is zero".into()));
    }
    let k = dists[0].probs.len();
    if let Some(d) = dists.iter().find(|d| d.probs.len() != k) {
        return Err(Error::Length {
            expected: k,
            actual: d.probs.len(),
        });
    }
    let mut probs = vec![0.0; k];
    for (d, &w) in dists.iter().zip(weights) {
        for (acc, p) in probs.iter_mut().zip(&d.probs) {
            *acc += w as f64 * p;
        }
    }
    for p in &mut probs {
        *p /= total as f64;
    }
    Ok(LabelDistribution { probs })
}

/// `sum_y P(y) ln(P(y) / Q(y))` with `0 ln(0/q) = 0`. Returns `+inf` when
/// `P(y) > 0` and `Q(y) = 0` for some `y`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Length {
            expected: p.len(),
            actual: q.len(),
        });
    }
    let mut acc = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Ok(f64::INFINITY);
        }
        acc += pi * (pi / qi).ln();
    }
    Ok(acc)
}

/// Jensen–Shannon divergence between a party's distribution and the
/// global one, clamped to `[0, ln 2]` against rounding.
pub fn noniid_degree(p_k: &[f64], p_bar: &[f64]) -> Result<f64> {
    if p_k.len() != p_bar.len() {
        return Err(Error::Length {
            expected: p_k.len(),
            actual: p_bar.len(),
        });
    }
    let mix: Vec<f64> = p_k.iter().zip(p_bar).map(|(a, b)| 0.5 * (a + b)).collect();
    let d = 0.5 * kl_divergence(p_k, &mix)? + 0.5 * kl_divergence(p_bar, &mix)?;
    Ok(d.clamp(0.0, std::f64::consts::LN_2))
}
