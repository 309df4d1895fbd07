//! Independent reference implementations used as test oracles. Nothing here
//! calls into the library's numerics; only plain data is shared.

#![allow(dead_code)]

use fedduap::error::Result;
use fedduap::nnkernel::{Layer, Model, Objective};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---- divergences ------------------------------------------------------------

fn entropy(p: &[f64]) -> f64 {
    p.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum()
}

/// KL written as cross-entropy minus entropy.
pub fn kl_oracle(p: &[f64], q: &[f64]) -> f64 {
    let mut cross = 0.0;
    for (a, b) in p.iter().zip(q) {
        if *a > 0.0 {
            if *b == 0.0 {
                return f64::INFINITY;
            }
            cross -= a * b.ln();
        }
    }
    cross - entropy(p)
}

/// Jensen-Shannon divergence through the entropy identity
/// `H(M) - (H(P) + H(Q)) / 2`.
pub fn js_oracle(p: &[f64], q: &[f64]) -> f64 {
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    entropy(&m) - 0.5 * (entropy(p) + entropy(q))
}

/// Random probability vector with some exact zeros.
pub fn random_distribution(rng: &mut impl Rng, k: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..k)
        .map(|_| if rng.random::<f64>() < 0.2 { 0.0 } else { rng.random::<f64>() })
        .collect();
    if v.iter().all(|&x| x == 0.0) {
        v[rng.random_range(0..k)] = 1.0;
    }
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    v
}

// ---- forward pass -----------------------------------------------------------

/// Straight-line scalar evaluation of a model on one sample, indexing the
/// raw weight arrays directly.
pub fn scalar_forward(model: &Model, input: &[f64]) -> Vec<f64> {
    let [mut c, mut h, mut w] = model.input_shape();
    let mut x = input.to_vec();
    for layer in model.layers() {
        match layer {
            Layer::Conv2d(conv) => {
                let k = conv.kernel_size;
                let s = conv.stride;
                let p = conv.padding as isize;
                let ho = (h + 2 * conv.padding - k) / s + 1;
                let wo = (w + 2 * conv.padding - k) / s + 1;
                let wt = conv.weight.data();
                let b = conv.bias.data();
                let mut y = vec![0.0; conv.out_channels * ho * wo];
                for o in 0..conv.out_channels {
                    for i in 0..ho {
                        for j in 0..wo {
                            let mut acc = b[o];
                            for ci in 0..c {
                                for di in 0..k {
                                    for dj in 0..k {
                                        let r = (i * s + di) as isize - p;
                                        let q = (j * s + dj) as isize - p;
                                        if r < 0 || q < 0 || r >= h as isize || q >= w as isize {
                                            continue;
                                        }
                                        let xv = x[ci * h * w + r as usize * w + q as usize];
                                        acc += wt[((o * c + ci) * k + di) * k + dj] * xv;
                                    }
                                }
                            }
                            y[o * ho * wo + i * wo + j] = acc;
                        }
                    }
                }
                x = y;
                c = conv.out_channels;
                h = ho;
                w = wo;
            }
            Layer::Dense(d) => {
                let wt = d.weight.data();
                let b = d.bias.data();
                x = (0..d.out_dim)
                    .map(|o| b[o] + (0..d.in_dim).map(|i| wt[o * d.in_dim + i] * x[i]).sum::<f64>())
                    .collect();
            }
            Layer::Relu => x.iter_mut().for_each(|v| *v = v.max(0.0)),
            Layer::Flatten => {}
        }
    }
    x
}

/// Mean softmax cross-entropy computed with log-sum-exp in long form.
pub fn scalar_loss(model: &Model, inputs: &[&[f64]], labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (x, &y) in inputs.iter().zip(labels) {
        let z = scalar_forward(model, x);
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - z[y];
    }
    total / inputs.len() as f64
}

// ---- linear algebra ---------------------------------------------------------

/// Determinant by Gaussian elimination with partial pivoting.
pub fn determinant(mut a: Vec<Vec<f64>>) -> f64 {
    let n = a.len();
    let mut det = 1.0;
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        if a[pivot][col] == 0.0 {
            return 0.0;
        }
        if pivot != col {
            a.swap(pivot, col);
            det = -det;
        }
        det *= a[col][col];
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for c2 in col..n {
                a[r][c2] -= f * a[col][c2];
            }
        }
    }
    det
}

/// Eigenvalues of a symmetric matrix as the roots of `det(A - x I)`,
/// bracketed on a fine grid over the Gershgorin interval and bisected.
pub fn charpoly_eigenvalues(a: &[Vec<f64>]) -> Vec<f64> {
    let n = a.len();
    let bound = (0..n)
        .map(|i| a[i].iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
        + 1.0;
    let f = |x: f64| {
        let m: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|j| a[i][j] - if i == j { x } else { 0.0 }).collect())
            .collect();
        determinant(m)
    };
    let steps = 200_000;
    let mut roots = Vec::new();
    let mut x0 = -bound;
    let mut f0 = f(x0);
    for s in 1..=steps {
        let x1 = -bound + 2.0 * bound * s as f64 / steps as f64;
        let f1 = f(x1);
        if f0 == 0.0 {
            roots.push(x0);
        } else if f0.signum() != f1.signum() && f1 != 0.0 {
            let (mut lo, mut hi, mut flo) = (x0, x1, f0);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                let fm = f(mid);
                if fm.signum() == flo.signum() {
                    lo = mid;
                    flo = fm;
                } else {
                    hi = mid;
                }
                if hi - lo < 1e-14 {
                    break;
                }
            }
            roots.push(0.5 * (lo + hi));
        }
        x0 = x1;
        f0 = f1;
    }
    roots
}

/// Rank by row-echelon reduction with an absolute pivot tolerance.
pub fn echelon_rank(mut a: Vec<Vec<f64>>, tol: f64) -> usize {
    let rows = a.len();
    let cols = a.first().map_or(0, Vec::len);
    let mut rank = 0;
    for col in 0..cols {
        if rank == rows {
            break;
        }
        let pivot = (rank..rows)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        if a[pivot][col].abs() <= tol {
            continue;
        }
        a.swap(pivot, rank);
        for r in rank + 1..rows {
            let f = a[r][col] / a[rank][col];
            for c in col..cols {
                a[r][c] -= f * a[rank][c];
            }
        }
        rank += 1;
    }
    rank
}

/// `Q^T diag(spectrum) Q` for a seeded random orthogonal `Q`
/// (Gram-Schmidt on a Gaussian-ish matrix).
pub fn matrix_with_spectrum(spectrum: &[f64], seed: u64) -> Vec<Vec<f64>> {
    let n = spectrum.len();
    let mut r = rng(seed);
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(n);
    while q.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| r.random::<f64>() - 0.5).collect();
        for u in &q {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            q.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    let mut a = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            a[i][j] = (0..n).map(|k| q[k][i] * spectrum[k] * q[k][j]).sum();
        }
    }
    // Exact symmetry.
    for i in 0..n {
        for j in i + 1..n {
            let v = 0.5 * (a[i][j] + a[j][i]);
            a[i][j] = v;
            a[j][i] = v;
        }
    }
    a
}

/// `L(w) = w^T A w / 2`, gradient `A w`.
pub struct Quadratic {
    pub a: Vec<Vec<f64>>,
}

impl Objective for Quadratic {
    fn dim(&self) -> usize {
        self.a.len()
    }

    fn gradient(&self, w: &[f64]) -> Result<Vec<f64>> {
        Ok(self.a.iter().map(|row| row.iter().zip(w).map(|(a, b)| a * b).sum()).collect())
    }
}

/// One-parameter `L(w) = c w^3`.
pub struct Cubic {
    pub c: f64,
}

impl Objective for Cubic {
    fn dim(&self) -> usize {
        1
    }

    fn gradient(&self, w: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![3.0 * self.c * w[0] * w[0]])
    }
}

// ---- pruning ----------------------------------------------------------------

/// `|v|` of the `floor(R p)`-th smallest magnitude (1-based), 0 for index 0.
pub fn threshold_oracle(values: &[f64], p: f64) -> f64 {
    let mut mags: Vec<f64> = values.iter().map(|v| v.abs()).collect();
    mags.sort_by(f64::total_cmp);
    let idx = (values.len() as f64 * p).floor() as usize;
    if idx == 0 {
        0.0
    } else {
        mags[idx - 1]
    }
}

/// Fraction of weights and biases of each conv layer strictly below `v`.
pub fn layer_rates_oracle(model: &Model, v: f64) -> Vec<(usize, f64)> {
    let mut out = Vec::new();
    for (i, layer) in model.layers().iter().enumerate() {
        if let Layer::Conv2d(c) = layer {
            let all: Vec<f64> = c.weight.data().iter().chain(c.bias.data()).copied().collect();
            let below = all.iter().filter(|x| x.abs() < v).count();
            out.push((i, below as f64 / all.len() as f64));
        }
    }
    out
}

/// Analytic forward FLOPs (not millions) of a conv/dense stack.
pub fn flops_oracle(model: &Model) -> f64 {
    let [_, mut h, mut w] = model.input_shape();
    let mut total = 0.0;
    for layer in model.layers() {
        match layer {
            Layer::Conv2d(c) => {
                let ho = (h + 2 * c.padding - c.kernel_size) / c.stride + 1;
                let wo = (w + 2 * c.padding - c.kernel_size) / c.stride + 1;
                total += (2 * c.kernel_size * c.kernel_size * c.in_channels * c.out_channels * ho * wo) as f64;
                h = ho;
                w = wo;
            }
            Layer::Dense(d) => total += (2 * d.in_dim * d.out_dim) as f64,
            _ => {}
        }
    }
    total
}
