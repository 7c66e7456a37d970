//! Sequential convolutional networks and the cached forward pass.
//!
//! Tensor index `t` follows the layer numbering of the activeness math:
//! `X(0)` is the network input and `X(t)` for `t >= 1` is the output of
//! descriptor `t - 1`. Every descriptor (conv or pool) gets its own index.
//! Fully-connected layers are conv layers whose kernel spans the whole input.

use std::collections::HashSet;
use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{check_finite, Shape, Tensor3};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    Max,
    Average,
}

impl fmt::Display for PoolMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PoolMode::Max => "max",
            PoolMode::Average => "average",
        })
    }
}

/// Number of output positions along one axis, or `None` if the window
/// does not fit.
fn output_extent(input: usize, padding: usize, kernel: usize, stride: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if kernel == 0 || stride == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// A convolution with optional ReLU.
///
/// The kernel is indexed `(kw, kh, d_in, d_out)`, flattened kw-major:
/// `((i * KH + j) * D_in + c) * D_out + o`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    kernel_width: usize,
    kernel_height: usize,
    in_depth: usize,
    out_depth: usize,
    kernel: Vec<f64>,
    bias: Vec<f64>,
    stride: usize,
    padding: usize,
    relu: bool,
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        kernel_width: usize,
        kernel_height: usize,
        in_depth: usize,
        out_depth: usize,
        kernel: Vec<f64>,
        bias: Vec<f64>,
        stride: usize,
        padding: usize,
        relu: bool,
    ) -> Result<Self> {
        if kernel_width == 0 || kernel_height == 0 || in_depth == 0 || out_depth == 0 {
            return Err(Error::InvalidNetwork(format!(
                "conv kernel dims must be positive, got {kernel_width}x{kernel_height}x{in_depth}x{out_depth}"
            )));
        }
        if stride == 0 {
            return Err(Error::InvalidNetwork("conv stride must be positive".into()));
        }
        let expected = kernel_width * kernel_height * in_depth * out_depth;
        if kernel.len() != expected {
            return Err(Error::InvalidNetwork(format!(
                "conv kernel needs {expected} weights, got {}",
                kernel.len()
            )));
        }
        if bias.len() != out_depth {
            return Err(Error::InvalidNetwork(format!(
                "conv bias needs {out_depth} values, got {}",
                bias.len()
            )));
        }
        check_finite(&kernel, "conv kernel")?;
        check_finite(&bias, "conv bias")?;
        Ok(ConvLayer {
            kernel_width,
            kernel_height,
            in_depth,
            out_depth,
            kernel,
            bias,
            stride,
            padding,
            relu,
        })
    }

    pub fn kernel_width(&self) -> usize {
        self.kernel_width
    }

    pub fn kernel_height(&self) -> usize {
        self.kernel_height
    }

    pub fn in_depth(&self) -> usize {
        self.in_depth
    }

    pub fn out_depth(&self) -> usize {
        self.out_depth
    }

    pub fn kernel(&self) -> &[f64] {
        &self.kernel
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn padding(&self) -> usize {
        self.padding
    }

    pub fn relu(&self) -> bool {
        self.relu
    }

    /// Number of inputs feeding one output neuron (ignoring padding).
    pub fn fan_in(&self) -> usize {
        self.kernel_width * self.kernel_height * self.in_depth
    }

    #[inline]
    pub fn kernel_index(&self, i: usize, j: usize, c: usize, o: usize) -> usize {
        ((i * self.kernel_height + j) * self.in_depth + c) * self.out_depth + o
    }

    /// Copy with every bias replaced by `f(bias)`.
    pub fn map_bias(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        let mut out = self.clone();
        out.bias = self.bias.iter().map(|&b| f(b)).collect();
        check_finite(&out.bias, "conv bias")?;
        Ok(out)
    }

    pub fn output_shape(&self, input: Shape) -> std::result::Result<Shape, String> {
        if input.depth != self.in_depth {
            return Err(format!("expects input depth {}, got {}", self.in_depth, input.depth));
        }
        let w = output_extent(input.width, self.padding, self.kernel_width, self.stride);
        let h = output_extent(input.height, self.padding, self.kernel_height, self.stride);
        match (w, h) {
            (Some(w), Some(h)) => Ok(Shape::new(w, h, self.out_depth)),
            _ => Err(format!(
                "kernel {}x{} exceeds padded input {}x{} (padding {})",
                self.kernel_width,
                self.kernel_height,
                input.width + 2 * self.padding,
                input.height + 2 * self.padding,
                self.padding
            )),
        }
    }

    pub fn connectivity(&self, input: Shape) -> std::result::Result<Connectivity, String> {
        let output = self.output_shape(input)?;
        Ok(Connectivity {
            input,
            output,
            kernel_width: self.kernel_width,
            kernel_height: self.kernel_height,
            stride: self.stride,
            padding: self.padding,
        })
    }

    /// Weighted sum plus bias, before the ReLU. Padded positions add nothing.
    pub fn preactivate(&self, x: &Tensor3) -> Result<Tensor3> {
        let conn = self.connectivity(x.shape()).map_err(|reason| Error::LayerShape {
            layer: "conv".into(),
            reason,
        })?;
        let out_shape = conn.output;
        let mut out = vec![0.0; out_shape.len()];
        let xs = x.shape();
        for wo in 0..out_shape.width {
            let (wr, i0) = conn.input_window_w(wo);
            for ho in 0..out_shape.height {
                let (hr, j0) = conn.input_window_h(ho);
                let base = out_shape.index(wo, ho, 0);
                let acc = &mut out[base..base + self.out_depth];
                acc.copy_from_slice(&self.bias);
                for w in wr.clone() {
                    let i = w + i0 - wr.start;
                    for h in hr.clone() {
                        let j = h + j0 - hr.start;
                        let xin = &x.data()[xs.index(w, h, 0)..xs.index(w, h, 0) + xs.depth];
                        for (c, &xv) in xin.iter().enumerate() {
                            if xv == 0.0 {
                                continue;
                            }
                            let k = self.kernel_index(i, j, c, 0);
                            for (a, &kv) in acc.iter_mut().zip(&self.kernel[k..k + self.out_depth]) {
                                *a += xv * kv;
                            }
                        }
                    }
                }
            }
        }
        Tensor3::new(out_shape, out)
    }

    /// Gradient with respect to the layer input, given the gradient with
    /// respect to the pre-activation output (transposed-kernel accumulation).
    pub fn backward_input(&self, input: Shape, grad_pre: &Tensor3) -> Result<Tensor3> {
        let conn = self.connectivity(input).map_err(|reason| Error::LayerShape {
            layer: "conv".into(),
            reason,
        })?;
        if grad_pre.shape() != conn.output {
            return Err(Error::ShapeMismatch {
                left: grad_pre.shape(),
                right: conn.output,
            });
        }
        let mut out = vec![0.0; input.len()];
        let os = conn.output;
        for wo in 0..os.width {
            let (wr, i0) = conn.input_window_w(wo);
            for ho in 0..os.height {
                let (hr, j0) = conn.input_window_h(ho);
                let g = &grad_pre.data()[os.index(wo, ho, 0)..os.index(wo, ho, 0) + os.depth];
                for w in wr.clone() {
                    let i = w + i0 - wr.start;
                    for h in hr.clone() {
                        let j = h + j0 - hr.start;
                        for c in 0..self.in_depth {
                            let k = self.kernel_index(i, j, c, 0);
                            let dot: f64 = g
                                .iter()
                                .zip(&self.kernel[k..k + self.out_depth])
                                .map(|(a, b)| a * b)
                                .sum();
                            out[input.index(w, h, c)] += dot;
                        }
                    }
                }
            }
        }
        Tensor3::new(input, out)
    }
}

/// Spatial connectivity of one conv layer: which input neurons feed which
/// output neurons. Padded positions are not neurons and never appear here.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Connectivity {
    pub input: Shape,
    pub output: Shape,
    pub kernel_width: usize,
    pub kernel_height: usize,
    pub stride: usize,
    pub padding: usize,
}

/// Output positions along one axis whose window covers input position `x`.
fn covering_outputs(x: usize, padding: usize, kernel: usize, stride: usize, out_len: usize) -> Range<usize> {
    // Output `o` covers padded positions [o*s, o*s + k).
    let p = x + padding;
    let lo = if p + 1 >= kernel {
        (p + 1 - kernel).div_ceil(stride)
    } else {
        0
    };
    let hi = (p / stride + 1).min(out_len);
    lo.min(hi)..hi
}

/// Input positions along one axis inside output `o`'s window, and the kernel
/// offset of the first one.
fn window(o: usize, padding: usize, kernel: usize, stride: usize, in_len: usize) -> (Range<usize>, usize) {
    let start = o * stride;
    let lo = start.max(padding);
    let hi = (start + kernel).min(in_len + padding);
    if lo >= hi {
        return (0..0, 0);
    }
    (lo - padding..hi - padding, lo - start)
}

impl Connectivity {
    fn input_window_w(&self, wo: usize) -> (Range<usize>, usize) {
        window(wo, self.padding, self.kernel_width, self.stride, self.input.width)
    }

    fn input_window_h(&self, ho: usize) -> (Range<usize>, usize) {
        window(ho, self.padding, self.kernel_height, self.stride, self.input.height)
    }

    /// Output columns and rows whose windows contain input position `(w, h)`.
    pub fn covering(&self, w: usize, h: usize) -> (Range<usize>, Range<usize>) {
        (
            covering_outputs(w, self.padding, self.kernel_width, self.stride, self.output.width),
            covering_outputs(h, self.padding, self.kernel_height, self.stride, self.output.height),
        )
    }

    /// Kernel offset `(i, j)` linking input `(w, h)` to output `(wo, ho)`,
    /// or `None` when they are not connected.
    pub fn kernel_offset(&self, w: usize, h: usize, wo: usize, ho: usize) -> Option<(usize, usize)> {
        if w >= self.input.width || h >= self.input.height || wo >= self.output.width || ho >= self.output.height {
            return None;
        }
        let i = (w + self.padding).checked_sub(wo * self.stride)?;
        let j = (h + self.padding).checked_sub(ho * self.stride)?;
        (i < self.kernel_width && j < self.kernel_height).then_some((i, j))
    }

    /// The U set: every output neuron fed by input neuron `(w, h, d)`.
    pub fn downstream(&self, w: usize, h: usize, d: usize) -> Result<Vec<(usize, usize, usize)>> {
        if !self.input.contains(w, h, d) {
            return Err(Error::OutOfRange(format!(
                "input neuron ({w}, {h}, {d}) outside {}",
                self.input
            )));
        }
        let (wr, hr) = self.covering(w, h);
        let mut out = Vec::with_capacity(wr.len() * hr.len() * self.output.depth);
        for wo in wr {
            for ho in hr.clone() {
                for o in 0..self.output.depth {
                    out.push((wo, ho, o));
                }
            }
        }
        Ok(out)
    }

    /// The V set: every input neuron feeding output neuron `(wo, ho, o)`.
    pub fn upstream(&self, wo: usize, ho: usize, o: usize) -> Result<Vec<(usize, usize, usize)>> {
        if !self.output.contains(wo, ho, o) {
            return Err(Error::OutOfRange(format!(
                "output neuron ({wo}, {ho}, {o}) outside {}",
                self.output
            )));
        }
        let (wr, _) = self.input_window_w(wo);
        let (hr, _) = self.input_window_h(ho);
        let mut out = Vec::with_capacity(wr.len() * hr.len() * self.input.depth);
        for w in wr {
            for h in hr.clone() {
                for c in 0..self.input.depth {
                    out.push((w, h, c));
                }
            }
        }
        Ok(out)
    }
}

/// Windowed max or average pooling without padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolLayer {
    pub window: usize,
    pub stride: usize,
    pub mode: PoolMode,
}

impl PoolLayer {
    pub fn new(window: usize, stride: usize, mode: PoolMode) -> Result<Self> {
        if window == 0 || stride == 0 {
            return Err(Error::InvalidNetwork("pool window and stride must be positive".into()));
        }
        Ok(PoolLayer { window, stride, mode })
    }

    pub fn output_shape(&self, input: Shape) -> std::result::Result<Shape, String> {
        let w = output_extent(input.width, 0, self.window, self.stride);
        let h = output_extent(input.height, 0, self.window, self.stride);
        match (w, h) {
            (Some(w), Some(h)) => Ok(Shape::new(w, h, input.depth)),
            _ => Err(format!(
                "pool window {} exceeds input {}x{}",
                self.window, input.width, input.height
            )),
        }
    }

    /// Pools `x`. For max pooling also returns, per output scalar, the flat
    /// input index of the winner (first encountered in (w, h) scan order on ties).
    pub fn forward(&self, x: &Tensor3) -> Result<(Tensor3, Option<Vec<usize>>)> {
        let xs = x.shape();
        let os = self.output_shape(xs).map_err(|reason| Error::LayerShape {
            layer: "pool".into(),
            reason,
        })?;
        let mut out = vec![0.0; os.len()];
        let mut routes = match self.mode {
            PoolMode::Max => Some(vec![0usize; os.len()]),
            PoolMode::Average => None,
        };
        let area = (self.window * self.window) as f64;
        for wo in 0..os.width {
            for ho in 0..os.height {
                for d in 0..os.depth {
                    let oi = os.index(wo, ho, d);
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    let mut sum = 0.0;
                    for w in wo * self.stride..wo * self.stride + self.window {
                        for h in ho * self.stride..ho * self.stride + self.window {
                            let ii = xs.index(w, h, d);
                            let v = x.data()[ii];
                            sum += v;
                            if v > best {
                                best = v;
                                best_idx = ii;
                            }
                        }
                    }
                    match &mut routes {
                        Some(r) => {
                            out[oi] = best;
                            r[oi] = best_idx;
                        }
                        None => out[oi] = sum / area,
                    }
                }
            }
        }
        Ok((Tensor3::new(os, out)?, routes))
    }

    /// Subgradient with respect to the input: max routes to the recorded
    /// winner, average spreads uniformly over the window.
    pub fn backward_input(&self, input: Shape, grad_out: &Tensor3, routes: Option<&[usize]>) -> Result<Tensor3> {
        let os = grad_out.shape();
        let mut out = vec![0.0; input.len()];
        match (self.mode, routes) {
            (PoolMode::Max, Some(routes)) => {
                for (g, &r) in grad_out.data().iter().zip(routes) {
                    out[r] += g;
                }
            }
            (PoolMode::Max, None) => {
                return Err(Error::InvalidNetwork(
                    "max-pool backward needs the forward routes".into(),
                ))
            }
            (PoolMode::Average, _) => {
                let area = (self.window * self.window) as f64;
                for wo in 0..os.width {
                    for ho in 0..os.height {
                        for d in 0..os.depth {
                            let g = grad_out.get(wo, ho, d) / area;
                            for w in wo * self.stride..wo * self.stride + self.window {
                                for h in ho * self.stride..ho * self.stride + self.window {
                                    out[input.index(w, h, d)] += g;
                                }
                            }
                        }
                    }
                }
            }
        }
        Tensor3::new(input, out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    Conv(ConvLayer),
    Pool(PoolLayer),
}

impl LayerKind {
    pub fn output_shape(&self, input: Shape) -> std::result::Result<Shape, String> {
        match self {
            LayerKind::Conv(c) => c.output_shape(input),
            LayerKind::Pool(p) => p.output_shape(input),
        }
    }

    pub fn as_conv(&self) -> Option<&ConvLayer> {
        match self {
            LayerKind::Conv(c) => Some(c),
            LayerKind::Pool(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
}

impl Layer {
    pub fn conv(name: impl Into<String>, conv: ConvLayer) -> Self {
        Layer {
            name: name.into(),
            kind: LayerKind::Conv(conv),
        }
    }

    pub fn pool(name: impl Into<String>, pool: PoolLayer) -> Self {
        Layer {
            name: name.into(),
            kind: LayerKind::Pool(pool),
        }
    }
}

/// An immutable, shape-checked sequential network.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    input_shape: Shape,
    layers: Vec<Layer>,
    shapes: Vec<Shape>,
}

/// Name reserved for `X(0)` when looking up layers by name.
pub const INPUT_NAME: &str = "input";

impl NetworkSpec {
    pub fn new(input_shape: Shape, layers: Vec<Layer>) -> Result<Self> {
        if input_shape.is_empty() {
            return Err(Error::EmptyShape(input_shape));
        }
        if layers.is_empty() {
            return Err(Error::InvalidNetwork("network has no layers".into()));
        }
        let mut seen = HashSet::new();
        for l in &layers {
            if l.name.is_empty() || l.name == INPUT_NAME {
                return Err(Error::InvalidNetwork(format!("invalid layer name `{}`", l.name)));
            }
            if !seen.insert(l.name.as_str()) {
                return Err(Error::InvalidNetwork(format!("duplicate layer name `{}`", l.name)));
            }
        }
        let shapes = infer_chain(input_shape, &layers)?;
        Ok(NetworkSpec {
            input_shape,
            layers,
            shapes,
        })
    }

    pub fn input_shape(&self) -> Shape {
        self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn into_layers(self) -> Vec<Layer> {
        self.layers
    }

    /// Number of layers `L`; tensor indices run over `0..=L`.
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Output shape of every layer, in order.
    pub fn infer_shapes(&self) -> &[Shape] {
        &self.shapes
    }

    /// Shape of `X(t)`.
    pub fn response_shape(&self, t: usize) -> Result<Shape> {
        match t {
            0 => Ok(self.input_shape),
            t if t <= self.layers.len() => Ok(self.shapes[t - 1]),
            t => Err(Error::OutOfRange(format!(
                "layer index {t} exceeds network depth {}",
                self.layers.len()
            ))),
        }
    }

    /// Tensor index of the response named `name` (`"input"` is 0).
    pub fn response_index(&self, name: &str) -> Option<usize> {
        if name == INPUT_NAME {
            return Some(0);
        }
        self.layers.iter().position(|l| l.name == name).map(|i| i + 1)
    }

    /// Name of `X(t)`.
    pub fn response_name(&self, t: usize) -> Option<&str> {
        match t {
            0 => Some(INPUT_NAME),
            t => self.layers.get(t - 1).map(|l| l.name.as_str()),
        }
    }

    /// The U/V connectivity between `X(t)` and `X(t+1)`; layer `t+1` must be conv.
    pub fn receptive_sets(&self, t: usize) -> Result<Connectivity> {
        let layer = self.layers.get(t).ok_or_else(|| {
            Error::OutOfRange(format!(
                "no layer after response {t} (network depth {})",
                self.layers.len()
            ))
        })?;
        let conv = layer
            .kind
            .as_conv()
            .ok_or_else(|| Error::InvalidRequest(format!("layer `{}` is not a conv layer", layer.name)))?;
        let input = self.response_shape(t)?;
        conv.connectivity(input).map_err(|reason| Error::LayerShape {
            layer: layer.name.clone(),
            reason,
        })
    }

    /// Same weights evaluated on a different input size, as for fully
    /// convolutional evaluation of un-warped images.
    pub fn with_input_size(&self, width: usize, height: usize) -> Result<Self> {
        Self::new(Shape::new(width, height, self.input_shape.depth), self.layers.clone())
    }

    /// Copy with conv layer `index` replaced.
    pub fn with_conv(&self, index: usize, conv: ConvLayer) -> Result<Self> {
        let mut layers = self.layers.clone();
        let slot = layers
            .get_mut(index)
            .ok_or_else(|| Error::OutOfRange(format!("layer {index}")))?;
        slot.kind = LayerKind::Conv(conv);
        Self::new(self.input_shape, layers)
    }

    /// Runs the network and caches every intermediate tensor.
    pub fn forward(&self, x0: &Tensor3) -> Result<ForwardTrace> {
        if x0.shape() != self.input_shape {
            return Err(Error::ShapeMismatch {
                left: x0.shape(),
                right: self.input_shape,
            });
        }
        let mut activations: Vec<Tensor3> = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut pool_routes = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let x = activations.last().unwrap_or(x0);
            let tag = |e: Error| match e {
                Error::NonFinite { index, value, .. } => Error::NonFinite {
                    context: format!("output of layer `{}`", layer.name),
                    index,
                    value,
                },
                Error::LayerShape { reason, .. } => Error::LayerShape {
                    layer: layer.name.clone(),
                    reason,
                },
                other => other,
            };
            match &layer.kind {
                LayerKind::Conv(conv) => {
                    let pre = conv.preactivate(x).map_err(tag)?;
                    let post = if conv.relu() {
                        pre.map(|v| v.max(0.0))?
                    } else {
                        pre.clone()
                    };
                    activations.push(post);
                    pre_activations.push(Some(pre));
                    pool_routes.push(None);
                }
                LayerKind::Pool(pool) => {
                    let (out, routes) = pool.forward(x).map_err(tag)?;
                    activations.push(out);
                    pre_activations.push(None);
                    pool_routes.push(routes);
                }
            }
        }
        Ok(ForwardTrace {
            input: x0.clone(),
            activations,
            pre_activations,
            pool_routes,
        })
    }
}

fn infer_chain(input_shape: Shape, layers: &[Layer]) -> Result<Vec<Shape>> {
    let mut shape = input_shape;
    let mut out = Vec::with_capacity(layers.len());
    for l in layers {
        shape = l.kind.output_shape(shape).map_err(|reason| Error::LayerShape {
            layer: l.name.clone(),
            reason,
        })?;
        out.push(shape);
    }
    Ok(out)
}

/// Output shapes for a candidate layer list, without building a spec.
pub fn infer_shapes(input_shape: Shape, layers: &[Layer]) -> Result<Vec<Shape>> {
    infer_chain(input_shape, layers)
}

/// Everything one forward pass produced.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    input: Tensor3,
    activations: Vec<Tensor3>,
    pre_activations: Vec<Option<Tensor3>>,
    pool_routes: Vec<Option<Vec<usize>>>,
}

impl ForwardTrace {
    pub fn input(&self) -> &Tensor3 {
        &self.input
    }

    /// Post-activation output of every layer.
    pub fn activations(&self) -> &[Tensor3] {
        &self.activations
    }

    /// Pre-ReLU output of layer `index` (conv layers only).
    pub fn pre_activation(&self, index: usize) -> Option<&Tensor3> {
        self.pre_activations.get(index).and_then(Option::as_ref)
    }

    /// Max-pool winners of layer `index` (max-pool layers only).
    pub fn pool_routes(&self, index: usize) -> Option<&[usize]> {
        self.pool_routes.get(index).and_then(|r| r.as_deref())
    }

    /// `X(t)`: the input for `t = 0`, else the output of layer `t - 1`.
    pub fn response(&self, t: usize) -> Result<&Tensor3> {
        match t {
            0 => Ok(&self.input),
            t => self.activations.get(t - 1).ok_or_else(|| {
                Error::OutOfRange(format!(
                    "response {t} beyond trace of {} layers",
                    self.activations.len()
                ))
            }),
        }
    }

    pub fn num_layers(&self) -> usize {
        self.activations.len()
    }
}
