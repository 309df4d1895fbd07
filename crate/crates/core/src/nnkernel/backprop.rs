use super::model::{flatten_params, unflatten_params, ActShape, Conv2d, Dense, FlatParams, Layer, Model};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Result of a batched forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Mean softmax cross-entropy over the batch.
    pub loss: f64,
    /// One `[batch, out_channels, h, w]` tensor per Conv2d layer, in layer
    /// order, holding the raw filter outputs.
    pub feature_maps: Vec<Tensor>,
    /// `[batch, classes]`
    pub logits: Tensor,
}

fn check_batch<'a>(model: &Model, batch: &'a Tensor, labels: &[usize]) -> Result<Vec<&'a [f64]>> {
    let [c, h, w] = model.input_shape();
    let shape = batch.shape();
    if shape.len() != 4 || shape[1..] != [c, h, w] {
        return Err(Error::Shape {
            layer: 0,
            kind: "input",
            detail: format!("batch shape {shape:?} does not match [n, {c}, {h}, {w}]"),
        });
    }
    if shape[0] != labels.len() {
        return Err(Error::Length {
            expected: shape[0],
            actual: labels.len(),
        });
    }
    Ok((0..shape[0]).map(|i| batch.outer(i)).collect())
}

fn check_labels(model: &Model, labels: &[usize]) -> Result<()> {
    let k = model.output_len();
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} outside the model's {k} classes"
        )));
    }
    Ok(())
}

pub fn forward(model: &Model, batch: &Tensor, labels: &[usize]) -> Result<ForwardOutput> {
    let inputs = check_batch(model, batch, labels)?;
    check_labels(model, labels)?;
    let n = inputs.len();
    let conv_idx = model.conv_layer_indices();
    let mut maps: Vec<Vec<f64>> = vec![Vec::new(); conv_idx.len()];
    let k = model.output_len();
    let mut logits = Vec::with_capacity(n * k);
    let mut loss_sum = 0.0;
    for (x, &y) in inputs.iter().zip(labels) {
        let acts = forward_sample(model, x);
        for (slot, &li) in conv_idx.iter().enumerate() {
            maps[slot].extend_from_slice(&acts[li + 1]);
        }
        let z = acts.last().unwrap();
        loss_sum += cross_entropy(z, y).0;
        logits.extend_from_slice(z);
    }
    let feature_maps = conv_idx
        .iter()
        .zip(maps)
        .map(|(&li, data)| match model.act_shapes()[li + 1] {
            ActShape::Spatial { c, h, w } => Tensor::new(vec![n, c, h, w], data),
            ActShape::Flat(_) => unreachable!("conv output is spatial"),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ForwardOutput {
        loss: loss_sum / n as f64,
        feature_maps,
        logits: Tensor::new(vec![n, k], logits)?,
    })
}

/// Gradient of the mean batch loss, in [`FlatParams`] order.
pub fn backward(model: &Model, batch: &Tensor, labels: &[usize]) -> Result<FlatParams> {
    let inputs = check_batch(model, batch, labels)?;
    Ok(loss_and_gradient(model, &inputs, labels)?.1)
}

/// Mean loss and its gradient over samples given as flat input slices.
pub fn loss_and_gradient(
    model: &Model,
    inputs: &[&[f64]],
    labels: &[usize],
) -> Result<(f64, FlatParams)> {
    if inputs.is_empty() {
        return Err(Error::Empty("batch"));
    }
    if inputs.len() != labels.len() {
        return Err(Error::Length {
            expected: inputs.len(),
            actual: labels.len(),
        });
    }
    check_labels(model, labels)?;
    let expected_len = model.input_len();
    if let Some(bad) = inputs.iter().find(|x| x.len() != expected_len) {
        return Err(Error::Shape {
            layer: 0,
            kind: "input",
            detail: format!("sample has {} values, model expects {expected_len}", bad.len()),
        });
    }
    let offsets = model.param_offsets();
    let mut grad = vec![0.0; model.param_count()];
    let mut loss_sum = 0.0;
    for (x, &y) in inputs.iter().zip(labels) {
        loss_sum += backward_sample(model, &offsets, x, y, &mut grad);
    }
    let scale = 1.0 / inputs.len() as f64;
    for g in &mut grad {
        *g *= scale;
    }
    Ok((loss_sum * scale, FlatParams(grad)))
}

/// Logits for one flat input sample.
pub fn predict(model: &Model, input: &[f64]) -> Vec<f64> {
    forward_sample(model, input).pop().unwrap_or_default()
}

/// `w - lr * grad`, returning a new model.
pub fn sgd_step(model: &Model, grad: &FlatParams, lr: f64) -> Result<Model> {
    if grad.len() != model.param_count() {
        return Err(Error::Length {
            expected: model.param_count(),
            actual: grad.len(),
        });
    }
    if !(lr >= 0.0) || !lr.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "learning rate must be finite and non-negative, got {lr}"
        )));
    }
    let mut w = flatten_params(model).0;
    for (wi, gi) in w.iter_mut().zip(&grad.0) {
        *wi -= lr * gi;
    }
    unflatten_params(model, &w)
}

/// Returns `(loss, dloss/dlogits)` for one sample.
fn cross_entropy(z: &[f64], y: usize) -> (f64, Vec<f64>) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() + max - z[y];
    let mut d: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    d[y] -= 1.0;
    (loss, d)
}

/// All activations of one sample: `acts[0]` is the input, `acts[i + 1]`
/// the output of layer `i`.
fn forward_sample(model: &Model, x: &[f64]) -> Vec<Vec<f64>> {
    let shapes = model.act_shapes();
    let mut acts = Vec::with_capacity(model.layers().len() + 1);
    acts.push(x.to_vec());
    for (i, layer) in model.layers().iter().enumerate() {
        let input = &acts[i];
        let out = match layer {
            Layer::Conv2d(conv) => conv_forward(conv, shapes[i], shapes[i + 1], input),
            Layer::Dense(d) => dense_forward(d, input),
            Layer::Relu => input.iter().map(|&v| v.max(0.0)).collect(),
            Layer::Flatten => input.clone(),
        };
        acts.push(out);
    }
    acts
}

fn backward_sample(model: &Model, offsets: &[usize], x: &[f64], y: usize, grad: &mut [f64]) -> f64 {
    let acts = forward_sample(model, x);
    let shapes = model.act_shapes();
    let (loss, mut delta) = cross_entropy(acts.last().unwrap(), y);
    for (i, layer) in model.layers().iter().enumerate().rev() {
        let input = &acts[i];
        let off = offsets[i];
        delta = match layer {
            Layer::Conv2d(conv) => {
                let g = &mut grad[off..off + layer.param_count()];
                conv_backward(conv, shapes[i], shapes[i + 1], input, &delta, g, i > 0)
            }
            Layer::Dense(d) => {
                let g = &mut grad[off..off + layer.param_count()];
                dense_backward(d, input, &delta, g, i > 0)
            }
            Layer::Relu => delta
                .iter()
                .zip(input)
                .map(|(&d, &a)| if a > 0.0 { d } else { 0.0 })
                .collect(),
            Layer::Flatten => delta,
        };
    }
    loss
}

fn spatial(s: ActShape) -> (usize, usize, usize) {
    match s {
        ActShape::Spatial { c, h, w } => (c, h, w),
        ActShape::Flat(_) => unreachable!("validated at model construction"),
    }
}

fn conv_forward(conv: &Conv2d, ins: ActShape, outs: ActShape, input: &[f64]) -> Vec<f64> {
    let (cin, h, w) = spatial(ins);
    let (cout, ho, wo) = spatial(outs);
    let (k, s, p) = (conv.kernel_size, conv.stride as isize, conv.padding as isize);
    let weight = conv.weight.data();
    let bias = conv.bias.data();
    let mut out = vec![0.0; cout * ho * wo];
    for o in 0..cout {
        let plane = &mut out[o * ho * wo..(o + 1) * ho * wo];
        plane.fill(bias[o]);
        for c in 0..cin {
            let src = &input[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = weight[((o * cin + c) * k + ky) * k + kx];
                    for oy in 0..ho {
                        let iy = oy as isize * s + ky as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = &src[iy as usize * w..(iy as usize + 1) * w];
                        let dst = &mut plane[oy * wo..(oy + 1) * wo];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = ox as isize * s + kx as isize - p;
                            if ix >= 0 && ix < w as isize {
                                *d += wv * row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_backward(
    conv: &Conv2d,
    ins: ActShape,
    outs: ActShape,
    input: &[f64],
    dout: &[f64],
    grad: &mut [f64],
    need_input_grad: bool,
) -> Vec<f64> {
    let (cin, h, w) = spatial(ins);
    let (cout, ho, wo) = spatial(outs);
    let (k, s, p) = (conv.kernel_size, conv.stride as isize, conv.padding as isize);
    let weight = conv.weight.data();
    let nw = weight.len();
    let (gw, gb) = grad.split_at_mut(nw);
    let mut din = if need_input_grad {
        vec![0.0; cin * h * w]
    } else {
        Vec::new()
    };
    for o in 0..cout {
        let plane = &dout[o * ho * wo..(o + 1) * ho * wo];
        gb[o] += plane.iter().sum::<f64>();
        for c in 0..cin {
            let src = &input[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let widx = ((o * cin + c) * k + ky) * k + kx;
                    let wv = weight[widx];
                    let mut acc = 0.0;
                    for oy in 0..ho {
                        let iy = oy as isize * s + ky as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let iy = iy as usize;
                        for ox in 0..wo {
                            let ix = ox as isize * s + kx as isize - p;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let g = plane[oy * wo + ox];
                            acc += g * src[iy * w + ix as usize];
                            if need_input_grad {
                                din[c * h * w + iy * w + ix as usize] += wv * g;
                            }
                        }
                    }
                    gw[widx] += acc;
                }
            }
        }
    }
    din
}

fn dense_forward(d: &Dense, input: &[f64]) -> Vec<f64> {
    let weight = d.weight.data();
    d.bias
        .data()
        .iter()
        .enumerate()
        .map(|(j, &b)| {
            let row = &weight[j * d.in_dim..(j + 1) * d.in_dim];
            b + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>()
        })
        .collect()
}

fn dense_backward(
    d: &Dense,
    input: &[f64],
    dout: &[f64],
    grad: &mut [f64],
    need_input_grad: bool,
) -> Vec<f64> {
    let weight = d.weight.data();
    let (gw, gb) = grad.split_at_mut(weight.len());
    let mut din = if need_input_grad {
        vec![0.0; d.in_dim]
    } else {
        Vec::new()
    };
    for (j, &g) in dout.iter().enumerate() {
        gb[j] += g;
        let row = &weight[j * d.in_dim..(j + 1) * d.in_dim];
        let grow = &mut gw[j * d.in_dim..(j + 1) * d.in_dim];
        for (gi, &x) in grow.iter_mut().zip(input) {
            *gi += g * x;
        }
        if need_input_grad {
            for (di, &wv) in din.iter_mut().zip(row) {
                *di += wv * g;
            }
        }
    }
    din
}
