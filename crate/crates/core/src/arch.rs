//! Architecture notation: parsing, shape inference and network construction.
//!
//! A network is written as layer tokens joined by `->`, optionally grouped into
//! bracketed segments that carry their own nonlinearity:
//!
//! ```text
//! [C(1,1,4) -> C(3,2,4)] -> [Resize(12) -> C_s(3,1,16) -> Pad(1) -> C(1,1,1)]
//! ```
//!
//! Tokens: `C(k,s,d)` / `C_s(k,s,d)` convolution (valid / same padding),
//! `T(k,s,d)` / `T_s(k,s,d)` transposed convolution, `Resize(n)` bilinear resize to
//! `n x n`, `Pad(x)` zero padding of `x` pixels per side, `Shape(h x w)` reshape of a
//! vector into `h x w` maps, `Avg` global average pooling and `FC(d)` a dense layer.

use std::fmt;

use rand::Rng;

use crate::autodiff::{ConvGeom, Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const LEAKY_RELU_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Valid,
    Same,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Nonlinearity {
    Relu6,
    LeakyRelu,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv {
        kernel: usize,
        stride: usize,
        out_channels: usize,
        padding: Padding,
    },
    TransposeConv {
        kernel: usize,
        stride: usize,
        out_channels: usize,
        padding: Padding,
    },
    Resize {
        size: usize,
    },
    Pad {
        amount: usize,
    },
    AvgPool,
    FullyConnected {
        units: usize,
    },
    Reshape {
        height: usize,
        width: usize,
    },
}

impl LayerKind {
    pub fn is_parametric(&self) -> bool {
        matches!(
            self,
            LayerKind::Conv { .. } | LayerKind::TransposeConv { .. } | LayerKind::FullyConnected { .. }
        )
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let suffix = |p: &Padding| if *p == Padding::Same { "_s" } else { "" };
        match self {
            LayerKind::Conv {
                kernel,
                stride,
                out_channels,
                padding,
            } => write!(f, "C{}({kernel},{stride},{out_channels})", suffix(padding)),
            LayerKind::TransposeConv {
                kernel,
                stride,
                out_channels,
                padding,
            } => write!(f, "T{}({kernel},{stride},{out_channels})", suffix(padding)),
            LayerKind::Resize { size } => write!(f, "Resize({size})"),
            LayerKind::Pad { amount } => write!(f, "Pad({amount})"),
            LayerKind::AvgPool => write!(f, "Avg"),
            LayerKind::FullyConnected { units } => write!(f, "FC({units})"),
            LayerKind::Reshape { height, width } => write!(f, "Shape({height}x{width})"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub nonlinearity: Nonlinearity,
    /// Index of the bracketed segment this layer came from.
    pub segment: usize,
}

/// Per-sample feature shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureShape {
    Map {
        channels: usize,
        height: usize,
        width: usize,
    },
    Vector(usize),
}

impl FeatureShape {
    /// Shape of an `[height, width, channels]` image.
    pub fn image(hwc: [usize; 3]) -> Self {
        FeatureShape::Map {
            channels: hwc[2],
            height: hwc[0],
            width: hwc[1],
        }
    }

    pub fn numel(&self) -> usize {
        match *self {
            FeatureShape::Map {
                channels,
                height,
                width,
            } => channels * height * width,
            FeatureShape::Vector(d) => d,
        }
    }

    /// Batched tensor shape with a leading batch dimension.
    pub fn batched(&self, n: usize) -> Vec<usize> {
        match *self {
            FeatureShape::Map {
                channels,
                height,
                width,
            } => vec![n, channels, height, width],
            FeatureShape::Vector(d) => vec![n, d],
        }
    }
}

impl fmt::Display for FeatureShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeatureShape::Map {
                channels,
                height,
                width,
            } => write!(f, "{height}x{width}x{channels}"),
            FeatureShape::Vector(d) => write!(f, "{d}"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct NetworkSpec {
    pub layers: Vec<LayerSpec>,
    input: Option<FeatureShape>,
    /// Output shape of each layer once inferred.
    shapes: Vec<FeatureShape>,
}

impl NetworkSpec {
    pub fn input_shape(&self) -> Option<FeatureShape> {
        self.input
    }

    pub fn layer_shapes(&self) -> &[FeatureShape] {
        &self.shapes
    }

    pub fn output_shape(&self) -> Option<FeatureShape> {
        match (self.input, self.shapes.last()) {
            (Some(_), Some(s)) => Some(*s),
            (Some(i), None) => Some(i),
            _ => None,
        }
    }

    /// Drop the nonlinearity of the final parametric layer, making the output linear.
    pub fn with_linear_output(mut self) -> Self {
        if let Some(l) = self.layers.iter_mut().rev().find(|l| l.kind.is_parametric()) {
            l.nonlinearity = Nonlinearity::None;
        }
        self
    }

    /// Replace the channel/unit count of the final parametric layer.
    pub fn with_output_width(mut self, width: usize) -> Result<Self> {
        let last = self
            .layers
            .iter_mut()
            .rev()
            .find(|l| l.kind.is_parametric())
            .ok_or_else(|| Error::shape("network has no parametric layer"))?;
        match &mut last.kind {
            LayerKind::Conv { out_channels, .. } | LayerKind::TransposeConv { out_channels, .. } => {
                *out_channels = width
            }
            LayerKind::FullyConnected { units } => *units = width,
            _ => unreachable!(),
        }
        self.shapes.clear();
        self.input = None;
        Ok(self)
    }

    /// Append layers, continuing the last segment and its nonlinearity.
    pub fn then(mut self, kinds: &[LayerKind], nonlinearity: Nonlinearity) -> Self {
        let segment = self.layers.last().map_or(0, |l| l.segment);
        for &kind in kinds {
            let nonlinearity = if kind.is_parametric() {
                nonlinearity
            } else {
                Nonlinearity::None
            };
            self.layers.push(LayerSpec {
                kind,
                nonlinearity,
                segment,
            });
        }
        self.shapes.clear();
        self.input = None;
        self
    }
}

impl fmt::Display for NetworkSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let segments = self.layers.last().map_or(0, |l| l.segment + 1);
        let bracket = segments > 1;
        for seg in 0..segments {
            if seg > 0 {
                write!(f, " -> ")?;
            }
            if bracket {
                write!(f, "[")?;
            }
            let tokens: Vec<String> = self
                .layers
                .iter()
                .filter(|l| l.segment == seg)
                .map(|l| l.kind.to_string())
                .collect();
            write!(f, "{}", tokens.join(" -> "))?;
            if bracket {
                write!(f, "]")?;
            }
        }
        Ok(())
    }
}

fn parse_error(position: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        position,
        message: message.into(),
    }
}

/// Parse an architecture string.
///
/// `plan` gives the nonlinearity of each bracketed segment; a single entry applies to
/// every segment. Only parametric layers carry a nonlinearity.
pub fn parse_architecture(spec: &str, plan: &[Nonlinearity]) -> Result<NetworkSpec> {
    let normalized = spec.replace('→', "->").replace('×', "x");
    let mut layers = Vec::new();
    let mut segment = 0usize;
    let mut open = false;
    let mut position = 0usize;
    let mut saw_bracket = false;
    for raw in normalized.split("->") {
        let mut tok = raw.trim();
        if tok.is_empty() {
            if normalized.trim().is_empty() {
                break;
            }
            return Err(parse_error(position, "empty token"));
        }
        if let Some(rest) = tok.strip_prefix('[') {
            if open {
                return Err(parse_error(position, "nested '['"));
            }
            if saw_bracket {
                segment += 1;
            }
            open = true;
            saw_bracket = true;
            tok = rest.trim();
        }
        let mut close = false;
        if let Some(rest) = tok.strip_suffix(']') {
            if !open {
                return Err(parse_error(position, "unmatched ']'"));
            }
            close = true;
            tok = rest.trim();
        }
        let kind = parse_token(tok, position)?;
        let nonlinearity = if kind.is_parametric() {
            match plan {
                [] => Nonlinearity::None,
                [one] => *one,
                many => *many.get(segment).ok_or_else(|| {
                    parse_error(position, format!("no nonlinearity given for segment {segment}"))
                })?,
            }
        } else {
            Nonlinearity::None
        };
        layers.push(LayerSpec {
            kind,
            nonlinearity,
            segment,
        });
        if close {
            open = false;
        }
        position += 1;
    }
    // A final bracket may be left open, as in some published strings.
    Ok(NetworkSpec {
        layers,
        input: None,
        shapes: Vec::new(),
    })
}

fn parse_args(body: &str, position: usize) -> Result<Vec<usize>> {
    body.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<usize>()
                .map_err(|_| parse_error(position, format!("'{s}' is not a non-negative integer")))
        })
        .collect()
}

fn parse_token(tok: &str, position: usize) -> Result<LayerKind> {
    if tok == "Avg" {
        return Ok(LayerKind::AvgPool);
    }
    let (name, body) = tok
        .split_once('(')
        .and_then(|(n, rest)| rest.strip_suffix(')').map(|b| (n.trim(), b)))
        .ok_or_else(|| parse_error(position, format!("unrecognized token '{tok}'")))?;
    let arity = |n: usize| -> Result<Vec<usize>> {
        let args = parse_args(body, position)?;
        if args.len() != n {
            return Err(parse_error(
                position,
                format!("{name} takes {n} argument(s), got {}", args.len()),
            ));
        }
        if args.contains(&0) {
            return Err(parse_error(position, format!("{name} arguments must be positive")));
        }
        Ok(args)
    };
    let kind = match name {
        "C" | "C_s" | "T" | "T_s" => {
            let a = arity(3)?;
            let padding = if name.ends_with("_s") {
                Padding::Same
            } else {
                Padding::Valid
            };
            let (kernel, stride, out_channels) = (a[0], a[1], a[2]);
            if name.starts_with('C') {
                LayerKind::Conv {
                    kernel,
                    stride,
                    out_channels,
                    padding,
                }
            } else {
                LayerKind::TransposeConv {
                    kernel,
                    stride,
                    out_channels,
                    padding,
                }
            }
        }
        "Resize" => LayerKind::Resize { size: arity(1)?[0] },
        "Pad" => LayerKind::Pad { amount: arity(1)?[0] },
        "FC" => LayerKind::FullyConnected { units: arity(1)?[0] },
        "Shape" => {
            let dims: Vec<usize> = body
                .split(['x', '*'])
                .map(|s| {
                    s.trim()
                        .parse::<usize>()
                        .map_err(|_| parse_error(position, format!("bad Shape argument '{body}'")))
                })
                .collect::<Result<_>>()?;
            match dims[..] {
                [h, w] if h > 0 && w > 0 => LayerKind::Reshape { height: h, width: w },
                _ => return Err(parse_error(position, "Shape takes 'h x w'")),
            }
        }
        _ => return Err(parse_error(position, format!("unknown layer '{name}'"))),
    };
    Ok(kind)
}

fn layer_output(kind: &LayerKind, input: FeatureShape, index: usize) -> Result<FeatureShape> {
    let bad = |msg: String| Error::shape(format!("layer {index} ({kind}): {msg}"));
    let as_map = || match input {
        FeatureShape::Map {
            channels,
            height,
            width,
        } => Ok((channels, height, width)),
        FeatureShape::Vector(_) => Err(bad(format!("needs a feature map, got vector {input}"))),
    };
    let out = match *kind {
        LayerKind::Conv {
            kernel,
            stride,
            out_channels,
            padding,
        } => {
            let (_, h, w) = as_map()?;
            let side = |n: usize| -> Result<usize> {
                match padding {
                    Padding::Same => Ok(n.div_ceil(stride)),
                    Padding::Valid if n >= kernel => Ok((n - kernel) / stride + 1),
                    Padding::Valid => Err(bad(format!("input side {n} smaller than kernel {kernel}"))),
                }
            };
            FeatureShape::Map {
                channels: out_channels,
                height: side(h)?,
                width: side(w)?,
            }
        }
        LayerKind::TransposeConv {
            kernel,
            stride,
            out_channels,
            padding,
        } => {
            let (_, h, w) = as_map()?;
            let side = |n: usize| match padding {
                Padding::Same => n * stride,
                Padding::Valid => (n - 1) * stride + kernel,
            };
            FeatureShape::Map {
                channels: out_channels,
                height: side(h),
                width: side(w),
            }
        }
        LayerKind::Resize { size } => {
            let (c, _, _) = as_map()?;
            FeatureShape::Map {
                channels: c,
                height: size,
                width: size,
            }
        }
        LayerKind::Pad { amount } => {
            let (c, h, w) = as_map()?;
            FeatureShape::Map {
                channels: c,
                height: h + 2 * amount,
                width: w + 2 * amount,
            }
        }
        LayerKind::AvgPool => FeatureShape::Vector(as_map()?.0),
        LayerKind::FullyConnected { units } => FeatureShape::Vector(units),
        LayerKind::Reshape { height, width } => {
            let n = input.numel();
            if n % (height * width) != 0 {
                return Err(bad(format!("{n} values do not fill {height}x{width} maps")));
            }
            FeatureShape::Map {
                channels: n / (height * width),
                height,
                width,
            }
        }
    };
    if out.numel() == 0 {
        return Err(bad(format!("non-positive output shape {out}")));
    }
    Ok(out)
}

/// Propagate `input` through every layer, recording per-layer output shapes.
pub fn infer_shapes(mut net: NetworkSpec, input: FeatureShape) -> Result<NetworkSpec> {
    if input.numel() == 0 {
        return Err(Error::shape("input shape must be positive"));
    }
    let mut shapes = Vec::with_capacity(net.layers.len());
    let mut cur = input;
    for (i, layer) in net.layers.iter().enumerate() {
        cur = layer_output(&layer.kind, cur, i)?;
        shapes.push(cur);
    }
    net.input = Some(input);
    net.shapes = shapes;
    Ok(net)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BuildOptions {
    /// Zero the weights and biases of the final parametric layer.
    pub zero_final: bool,
    /// Initial bias of the final parametric layer.
    pub final_bias: f64,
}

#[derive(Clone, Debug)]
enum Built {
    Conv { geom: ConvGeom, w: ParamId, b: ParamId },
    TransposeConv { geom: ConvGeom, w: ParamId, b: ParamId },
    Resize(usize),
    Pad(usize),
    Avg,
    Dense { w: ParamId, b: ParamId },
    Reshape(FeatureShape),
}

/// A shape-checked network whose parameters live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Network {
    spec: NetworkSpec,
    layers: Vec<(Built, Nonlinearity)>,
}

/// Create parameters for every layer of a shaped spec, named `{prefix}.l{index}.weight|bias`.
///
/// Weights are drawn uniformly from `±sqrt(6 / fan_in)`; biases start at zero.
pub fn build_network<R: Rng>(
    spec: &NetworkSpec,
    store: &mut ParamStore,
    prefix: &str,
    options: BuildOptions,
    rng: &mut R,
) -> Result<Network> {
    let input = spec
        .input
        .ok_or_else(|| Error::shape("build_network needs an inferred input shape"))?;
    let last_param = spec.layers.iter().rposition(|l| l.kind.is_parametric());
    let mut layers = Vec::with_capacity(spec.layers.len());
    let mut cur = input;
    for (i, layer) in spec.layers.iter().enumerate() {
        let out = spec.shapes[i];
        let is_final = Some(i) == last_param;
        let mut init = |shape: Vec<usize>, fan_in: usize| -> Tensor {
            let n: usize = shape.iter().product();
            if is_final && options.zero_final {
                return Tensor::zeros(shape);
            }
            let bound = (6.0 / fan_in.max(1) as f64).sqrt();
            Tensor::new(shape, (0..n).map(|_| rng.gen_range(-bound..bound)).collect())
        };
        let bias = |units: usize| {
            let v = if is_final { options.final_bias } else { 0.0 };
            Tensor::full(vec![units], v)
        };
        let name = |p: &str| format!("{prefix}.l{i}.{p}");
        let built = match (layer.kind, cur, out) {
            (
                LayerKind::Conv {
                    kernel,
                    stride,
                    padding,
                    ..
                },
                FeatureShape::Map {
                    channels: ic,
                    height: ih,
                    width: iw,
                },
                FeatureShape::Map { channels: oc, .. },
            ) => {
                let geom = match padding {
                    Padding::Same => ConvGeom::same(ic, ih, iw, oc, kernel, stride),
                    Padding::Valid => ConvGeom::valid(ic, ih, iw, oc, kernel, stride)
                        .ok_or_else(|| Error::shape(format!("layer {i}: kernel exceeds input")))?,
                };
                let w = store.add(name("weight"), init(vec![oc, ic, kernel, kernel], ic * kernel * kernel));
                let b = store.add(name("bias"), bias(oc));
                Built::Conv { geom, w, b }
            }
            (
                LayerKind::TransposeConv {
                    kernel,
                    stride,
                    padding,
                    ..
                },
                FeatureShape::Map { channels: ic, .. },
                FeatureShape::Map {
                    channels: oc,
                    height: oh,
                    width: ow,
                },
            ) => {
                // The adjoint convolution maps the larger output back onto the input.
                let geom = match padding {
                    Padding::Same => ConvGeom::same(oc, oh, ow, ic, kernel, stride),
                    Padding::Valid => ConvGeom::valid(oc, oh, ow, ic, kernel, stride)
                        .ok_or_else(|| Error::shape(format!("layer {i}: bad transposed geometry")))?,
                };
                let fan_in = (ic * kernel * kernel / (stride * stride)).max(1);
                let w = store.add(name("weight"), init(vec![ic, oc, kernel, kernel], fan_in));
                let b = store.add(name("bias"), bias(oc));
                Built::TransposeConv { geom, w, b }
            }
            (LayerKind::Resize { size }, _, _) => Built::Resize(size),
            (LayerKind::Pad { amount }, _, _) => Built::Pad(amount),
            (LayerKind::AvgPool, _, _) => Built::Avg,
            (LayerKind::FullyConnected { units }, _, _) => {
                let d = cur.numel();
                let w = store.add(name("weight"), init(vec![units, d], d));
                let b = store.add(name("bias"), bias(units));
                Built::Dense { w, b }
            }
            (LayerKind::Reshape { .. }, _, shape) => Built::Reshape(shape),
            (kind, _, _) => return Err(Error::shape(format!("layer {i} ({kind}) cannot take input {cur}"))),
        };
        layers.push((built, layer.nonlinearity));
        cur = out;
    }
    Ok(Network {
        spec: spec.clone(),
        layers,
    })
}

impl Network {
    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn input_shape(&self) -> FeatureShape {
        self.spec.input.expect("built networks are shaped")
    }

    pub fn output_shape(&self) -> FeatureShape {
        self.spec.output_shape().expect("built networks are shaped")
    }

    /// Parameter ids in layer order.
    pub fn params(&self) -> Vec<ParamId> {
        self.layers
            .iter()
            .flat_map(|(b, _)| match b {
                Built::Conv { w, b, .. } | Built::TransposeConv { w, b, .. } | Built::Dense { w, b } => {
                    vec![*w, *b]
                }
                _ => vec![],
            })
            .collect()
    }

    pub fn forward(&self, g: &mut Graph, params: &Bound, x: Var) -> Var {
        let n = g.shape(x)[0];
        let want = self.input_shape().batched(n);
        let x = if g.shape(x) != want.as_slice() {
            assert_eq!(
                g.value(x).len(),
                want.iter().product::<usize>(),
                "network input has {:?}, expected {:?}",
                g.shape(x),
                want
            );
            g.reshape(x, want)
        } else {
            x
        };
        let mut h = x;
        for (layer, act) in &self.layers {
            h = match layer {
                Built::Conv { geom, w, b } => g.conv2d(h, params.var(*w), params.var(*b), *geom),
                Built::TransposeConv { geom, w, b } => {
                    g.conv_transpose2d(h, params.var(*w), params.var(*b), *geom)
                }
                Built::Resize(s) => g.resize_bilinear(h, *s, *s),
                Built::Pad(a) => g.pad(h, *a),
                Built::Avg => g.avg_pool(h),
                Built::Dense { w, b } => g.linear(h, params.var(*w), params.var(*b)),
                Built::Reshape(shape) => g.reshape(h, shape.batched(n)),
            };
            h = match act {
                Nonlinearity::Relu6 => g.relu6(h),
                Nonlinearity::LeakyRelu => g.leaky_relu(h, LEAKY_RELU_SLOPE),
                Nonlinearity::None => h,
            };
        }
        h
    }
}

#[cfg(test)]
mod tests;
