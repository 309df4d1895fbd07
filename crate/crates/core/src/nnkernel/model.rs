use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Shape of the activation flowing between layers (batch axis excluded).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActShape {
    Spatial { c: usize, h: usize, w: usize },
    Flat(usize),
}

impl ActShape {
    pub fn size(&self) -> usize {
        match *self {
            ActShape::Spatial { c, h, w } => c * h * w,
            ActShape::Flat(n) => n,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d,
    Dense,
    Relu,
    Flatten,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub padding: usize,
    /// `[out_channels, in_channels, k, k]`
    pub weight: Tensor,
    /// `[out_channels]`
    pub bias: Tensor,
}

impl Conv2d {
    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let k = self.kernel_size;
        let (hp, wp) = (h + 2 * self.padding, w + 2 * self.padding);
        if hp < k || wp < k || self.stride == 0 {
            return None;
        }
        Some(((hp - k) / self.stride + 1, (wp - k) / self.stride + 1))
    }

    /// Number of weights per filter, `in_channels * k * k`.
    pub fn filter_len(&self) -> usize {
        self.in_channels * self.kernel_size * self.kernel_size
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    /// `[out_dim, in_dim]`
    pub weight: Tensor,
    /// `[out_dim]`
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv2d(Conv2d),
    Dense(Dense),
    Relu,
    Flatten,
}

impl Layer {
    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Conv2d(_) => LayerKind::Conv2d,
            Layer::Dense(_) => LayerKind::Dense,
            Layer::Relu => LayerKind::Relu,
            Layer::Flatten => LayerKind::Flatten,
        }
    }

    fn kind_name(&self) -> &'static str {
        match self {
            Layer::Conv2d(_) => "conv2d",
            Layer::Dense(_) => "dense",
            Layer::Relu => "relu",
            Layer::Flatten => "flatten",
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Layer::Conv2d(c) => c.weight.len() + c.bias.len(),
            Layer::Dense(d) => d.weight.len() + d.bias.len(),
            Layer::Relu | Layer::Flatten => 0,
        }
    }

    /// Weights then bias, in storage order.
    pub fn params(&self) -> impl Iterator<Item = f64> + '_ {
        let (w, b): (&[f64], &[f64]) = match self {
            Layer::Conv2d(c) => (c.weight.data(), c.bias.data()),
            Layer::Dense(d) => (d.weight.data(), d.bias.data()),
            Layer::Relu | Layer::Flatten => (&[], &[]),
        };
        w.iter().chain(b.iter()).copied()
    }

    fn params_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        match self {
            Layer::Conv2d(c) => (c.weight.data_mut(), c.bias.data_mut()),
            Layer::Dense(d) => (d.weight.data_mut(), d.bias.data_mut()),
            Layer::Relu | Layer::Flatten => (&mut [], &mut []),
        }
    }

    fn output_shape(&self, index: usize, input: ActShape) -> Result<ActShape> {
        let err = |detail: String| Error::Shape {
            layer: index,
            kind: self.kind_name(),
            detail,
        };
        match (self, input) {
            (Layer::Conv2d(conv), ActShape::Spatial { c, h, w }) => {
                if conv.in_channels != c {
                    return Err(err(format!(
                        "expects {} input channels, got {c}",
                        conv.in_channels
                    )));
                }
                let (ho, wo) = conv
                    .output_hw(h, w)
                    .ok_or_else(|| err(format!("kernel does not fit a {h}x{w} input")))?;
                Ok(ActShape::Spatial {
                    c: conv.out_channels,
                    h: ho,
                    w: wo,
                })
            }
            (Layer::Conv2d(_), ActShape::Flat(n)) => {
                Err(err(format!("expects a spatial input, got flat({n})")))
            }
            (Layer::Dense(d), ActShape::Flat(n)) => {
                if d.in_dim != n {
                    return Err(err(format!("expects {} inputs, got {n}", d.in_dim)));
                }
                Ok(ActShape::Flat(d.out_dim))
            }
            (Layer::Dense(_), s @ ActShape::Spatial { .. }) => Err(err(format!(
                "expects a flat input, got {s:?}; insert a flatten layer"
            ))),
            (Layer::Relu, s) => Ok(s),
            (Layer::Flatten, s) => Ok(ActShape::Flat(s.size())),
        }
    }

    fn check_tensors(&self, index: usize) -> Result<()> {
        let bad = |detail: String| Error::Shape {
            layer: index,
            kind: self.kind_name(),
            detail,
        };
        match self {
            Layer::Conv2d(c) => {
                if c.out_channels == 0 || c.in_channels == 0 || c.kernel_size == 0 || c.stride == 0
                {
                    return Err(bad("conv extents must be positive".into()));
                }
                let ws = [c.out_channels, c.in_channels, c.kernel_size, c.kernel_size];
                if c.weight.shape() != ws || c.bias.shape() != [c.out_channels] {
                    return Err(bad(format!(
                        "weight {:?} / bias {:?} do not match declared {ws:?}",
                        c.weight.shape(),
                        c.bias.shape()
                    )));
                }
            }
            Layer::Dense(d) => {
                if d.weight.shape() != [d.out_dim, d.in_dim] || d.bias.shape() != [d.out_dim] {
                    return Err(bad(format!(
                        "weight {:?} / bias {:?} do not match declared [{}, {}]",
                        d.weight.shape(),
                        d.bias.shape(),
                        d.out_dim,
                        d.in_dim
                    )));
                }
            }
            Layer::Relu | Layer::Flatten => {}
        }
        Ok(())
    }
}

/// Ordered layer stack with a fixed `[channels, height, width]` input.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    input_shape: [usize; 3],
    layers: Vec<Layer>,
    /// `shapes[i]` is the input of layer `i`; the last entry is the output.
    shapes: Vec<ActShape>,
}

impl Model {
    pub fn new(input_shape: [usize; 3], layers: Vec<Layer>) -> Result<Self> {
        if input_shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!(
                "input shape must be positive, got {input_shape:?}"
            )));
        }
        let mut shapes = Vec::with_capacity(layers.len() + 1);
        let mut cur = ActShape::Spatial {
            c: input_shape[0],
            h: input_shape[1],
            w: input_shape[2],
        };
        shapes.push(cur);
        for (i, layer) in layers.iter().enumerate() {
            layer.check_tensors(i)?;
            cur = layer.output_shape(i, cur)?;
            shapes.push(cur);
        }
        Ok(Model {
            input_shape,
            layers,
            shapes,
        })
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn into_layers(self) -> Vec<Layer> {
        self.layers
    }

    pub fn act_shapes(&self) -> &[ActShape] {
        &self.shapes
    }

    pub fn output_len(&self) -> usize {
        self.shapes.last().map(ActShape::size).unwrap_or(0)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// Offset of each layer's first parameter in the flat layout.
    pub fn param_offsets(&self) -> Vec<usize> {
        let mut off = 0;
        self.layers
            .iter()
            .map(|l| {
                let o = off;
                off += l.param_count();
                o
            })
            .collect()
    }

    pub fn conv_layer_indices(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, Layer::Conv2d(_)))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&ModelDoc::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ModelDoc = serde_json::from_str(text)?;
        doc.try_into()
    }
}

/// Flat vector of every trainable parameter: layer by layer, weights in
/// row-major order followed by the bias.
#[derive(Clone, Debug, PartialEq)]
pub struct FlatParams(pub Vec<f64>);

impl FlatParams {
    pub fn zeros(len: usize) -> Self {
        FlatParams(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

pub fn flatten_params(model: &Model) -> FlatParams {
    let mut out = Vec::with_capacity(model.param_count());
    for layer in &model.layers {
        out.extend(layer.params());
    }
    FlatParams(out)
}

/// Copies `params` into a clone of `template`.
pub fn unflatten_params(template: &Model, params: &[f64]) -> Result<Model> {
    let expected = template.param_count();
    if params.len() != expected {
        return Err(Error::Length {
            expected,
            actual: params.len(),
        });
    }
    let mut model = template.clone();
    let mut off = 0;
    for layer in &mut model.layers {
        let (w, b) = layer.params_mut();
        w.copy_from_slice(&params[off..off + w.len()]);
        off += w.len();
        b.copy_from_slice(&params[off..off + b.len()]);
        off += b.len();
    }
    Ok(model)
}

/// Fluent constructor for sequential models.
#[derive(Clone, Debug)]
pub struct ModelBuilder {
    input_shape: [usize; 3],
    specs: Vec<LayerSpec>,
}

#[derive(Clone, Copy, Debug)]
enum LayerSpec {
    Conv {
        out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    },
    Dense(usize),
    Relu,
    Flatten,
}

impl ModelBuilder {
    pub fn new(input_shape: [usize; 3]) -> Self {
        ModelBuilder {
            input_shape,
            specs: Vec::new(),
        }
    }

    pub fn conv(mut self, out_channels: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        self.specs.push(LayerSpec::Conv {
            out: out_channels,
            k: kernel,
            stride,
            pad,
        });
        self
    }

    pub fn dense(mut self, out_dim: usize) -> Self {
        self.specs.push(LayerSpec::Dense(out_dim));
        self
    }

    pub fn relu(mut self) -> Self {
        self.specs.push(LayerSpec::Relu);
        self
    }

    pub fn flatten(mut self) -> Self {
        self.specs.push(LayerSpec::Flatten);
        self
    }

    pub fn build_zeros(&self) -> Result<Model> {
        self.build_with(|_, _| 0.0)
    }

    /// He-uniform weights drawn from `rng`, zero biases.
    pub fn build_random<R: Rng>(&self, rng: &mut R) -> Result<Model> {
        self.build_with(|fan_in, _| {
            let bound = (6.0 / fan_in as f64).sqrt();
            rng.random_range(-bound..bound)
        })
    }

    fn build_with(&self, mut init: impl FnMut(usize, usize) -> f64) -> Result<Model> {
        let mut cur = ActShape::Spatial {
            c: self.input_shape[0],
            h: self.input_shape[1],
            w: self.input_shape[2],
        };
        let mut layers = Vec::with_capacity(self.specs.len());
        for (i, spec) in self.specs.iter().enumerate() {
            let layer = match *spec {
                LayerSpec::Conv { out, k, stride, pad } => {
                    let ActShape::Spatial { c, .. } = cur else {
                        return Err(Error::Shape {
                            layer: i,
                            kind: "conv2d",
                            detail: "conv after flatten".into(),
                        });
                    };
                    let fan_in = c * k * k;
                    let n = out * fan_in;
                    let w: Vec<f64> = (0..n).map(|j| init(fan_in, j)).collect();
                    Layer::Conv2d(Conv2d {
                        in_channels: c,
                        out_channels: out,
                        kernel_size: k,
                        stride,
                        padding: pad,
                        weight: Tensor::new(vec![out, c, k, k], w)?,
                        bias: Tensor::zeros(vec![out]),
                    })
                }
                LayerSpec::Dense(out) => {
                    let fan_in = cur.size();
                    let w: Vec<f64> = (0..out * fan_in).map(|j| init(fan_in, j)).collect();
                    Layer::Dense(Dense {
                        in_dim: fan_in,
                        out_dim: out,
                        weight: Tensor::new(vec![out, fan_in], w)?,
                        bias: Tensor::zeros(vec![out]),
                    })
                }
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::Flatten => Layer::Flatten,
            };
            cur = layer.output_shape(i, cur)?;
            layers.push(layer);
        }
        Model::new(self.input_shape, layers)
    }
}

// ---- JSON document -------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDoc {
    version: u32,
    input_shape: [usize; 3],
    layers: Vec<LayerDoc>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerDoc {
    kind: LayerKind,
    #[serde(default)]
    dims: Dims,
    #[serde(default)]
    weights: Vec<f64>,
    #[serde(default)]
    bias: Vec<f64>,
}

#[derive(Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Dims {
    #[serde(skip_serializing_if = "Option::is_none")]
    in_channels: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    out_channels: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    kernel_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    stride: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    padding: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    in_dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    out_dim: Option<usize>,
}

impl From<&Model> for ModelDoc {
    fn from(m: &Model) -> Self {
        let layers = m
            .layers
            .iter()
            .map(|l| match l {
                Layer::Conv2d(c) => LayerDoc {
                    kind: LayerKind::Conv2d,
                    dims: Dims {
                        in_channels: Some(c.in_channels),
                        out_channels: Some(c.out_channels),
                        kernel_size: Some(c.kernel_size),
                        stride: Some(c.stride),
                        padding: Some(c.padding),
                        ..Dims::default()
                    },
                    weights: c.weight.data().to_vec(),
                    bias: c.bias.data().to_vec(),
                },
                Layer::Dense(d) => LayerDoc {
                    kind: LayerKind::Dense,
                    dims: Dims {
                        in_dim: Some(d.in_dim),
                        out_dim: Some(d.out_dim),
                        ..Dims::default()
                    },
                    weights: d.weight.data().to_vec(),
                    bias: d.bias.data().to_vec(),
                },
                Layer::Relu => LayerDoc {
                    kind: LayerKind::Relu,
                    dims: Dims::default(),
                    weights: vec![],
                    bias: vec![],
                },
                Layer::Flatten => LayerDoc {
                    kind: LayerKind::Flatten,
                    dims: Dims::default(),
                    weights: vec![],
                    bias: vec![],
                },
            })
            .collect();
        ModelDoc {
            version: MODEL_FORMAT_VERSION,
            input_shape: m.input_shape,
            layers,
        }
    }
}

impl TryFrom<ModelDoc> for Model {
    type Error = Error;

    fn try_from(doc: ModelDoc) -> Result<Model> {
        if doc.version != MODEL_FORMAT_VERSION {
            return Err(Error::Parse(format!(
                "unsupported model format version {} (expected {MODEL_FORMAT_VERSION})",
                doc.version
            )));
        }
        let need = |v: Option<usize>, name: &str, i: usize| {
            v.ok_or_else(|| Error::Parse(format!("layer {i}: missing dims.{name}")))
        };
        let mut layers = Vec::with_capacity(doc.layers.len());
        for (i, l) in doc.layers.into_iter().enumerate() {
            let layer = match l.kind {
                LayerKind::Conv2d => {
                    let out = need(l.dims.out_channels, "out_channels", i)?;
                    let inc = need(l.dims.in_channels, "in_channels", i)?;
                    let k = need(l.dims.kernel_size, "kernel_size", i)?;
                    Layer::Conv2d(Conv2d {
                        in_channels: inc,
                        out_channels: out,
                        kernel_size: k,
                        stride: need(l.dims.stride, "stride", i)?,
                        padding: need(l.dims.padding, "padding", i)?,
                        weight: Tensor::new(vec![out, inc, k, k], l.weights)?,
                        bias: Tensor::new(vec![out], l.bias)?,
                    })
                }
                LayerKind::Dense => {
                    let out = need(l.dims.out_dim, "out_dim", i)?;
                    let inp = need(l.dims.in_dim, "in_dim", i)?;
                    Layer::Dense(Dense {
                        in_dim: inp,
                        out_dim: out,
                        weight: Tensor::new(vec![out, inp], l.weights)?,
                        bias: Tensor::new(vec![out], l.bias)?,
                    })
                }
                LayerKind::Relu => Layer::Relu,
                LayerKind::Flatten => Layer::Flatten,
            };
            layers.push(layer);
        }
        Model::new(doc.input_shape, layers)
    }
}
