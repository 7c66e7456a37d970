//! Model files and seeded random models.
//!
//! A model file is a pretty-printed JSON header, one `\n`, then a blob of
//! little-endian `f32` scalars. For every conv layer, in header order, the
//! blob holds the kernel (flattened `(kw, kh, d_in, d_out)` kw-major, the
//! same order as [`ConvLayer::kernel`]) followed by the bias. Pool layers
//! contribute nothing to the blob. The header's `format` field must equal
//! [`FORMAT_VERSION`].
//!
//! Weights are computed in `f64` but stored as `f32`; loading widens
//! losslessly, so a spec whose scalars are already `f32`-representable
//! round-trips exactly.

use std::fs;
use std::path::Path;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{ConvLayer, Layer, LayerKind, NetworkSpec, PoolLayer, PoolMode};
use crate::tensor::Shape;

pub const FORMAT_VERSION: &str = "interactive-model/1";

/// Bias assigned to every generated conv output channel.
pub const GENERATED_BIAS: f64 = 0.1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    input_shape: [usize; 3],
    layers: Vec<LayerHeader>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
enum LayerHeader {
    Conv {
        name: String,
        /// `[kw, kh, d_in, d_out]`
        kernel: [usize; 4],
        stride: usize,
        padding: usize,
        relu: bool,
    },
    Pool {
        name: String,
        mode: PoolMode,
        window: usize,
        stride: usize,
    },
}

/// Serializes `spec` to the on-disk byte layout.
pub fn encode_model(spec: &NetworkSpec) -> Vec<u8> {
    let s = spec.input_shape();
    let mut blob = Vec::new();
    let layers = spec
        .layers()
        .iter()
        .map(|l| match &l.kind {
            LayerKind::Conv(c) => {
                for &v in c.kernel().iter().chain(c.bias()) {
                    blob.extend_from_slice(&(v as f32).to_le_bytes());
                }
                LayerHeader::Conv {
                    name: l.name.clone(),
                    kernel: [c.kernel_width(), c.kernel_height(), c.in_depth(), c.out_depth()],
                    stride: c.stride(),
                    padding: c.padding(),
                    relu: c.relu(),
                }
            }
            LayerKind::Pool(p) => LayerHeader::Pool {
                name: l.name.clone(),
                mode: p.mode,
                window: p.window,
                stride: p.stride,
            },
        })
        .collect();
    let header = Header {
        format: FORMAT_VERSION.to_string(),
        input_shape: [s.width, s.height, s.depth],
        layers,
    };
    let mut out = serde_json::to_vec_pretty(&header).expect("header is always serializable");
    out.push(b'\n');
    out.extend_from_slice(&blob);
    out
}

/// Parses the on-disk byte layout.
pub fn decode_model(bytes: &[u8]) -> Result<NetworkSpec> {
    let mut stream = serde_json::Deserializer::from_slice(bytes).into_iter::<Header>();
    let header = match stream.next() {
        Some(Ok(h)) => h,
        Some(Err(e)) => return Err(Error::ModelFormat(format!("malformed header: {e}"))),
        None => return Err(Error::ModelFormat("empty file".into())),
    };
    let offset = stream.byte_offset();
    if header.format != FORMAT_VERSION {
        return Err(Error::ModelFormat(format!(
            "unsupported format `{}` (expected `{FORMAT_VERSION}`)",
            header.format
        )));
    }
    if bytes.get(offset) != Some(&b'\n') {
        return Err(Error::ModelFormat("header must be followed by a newline".into()));
    }
    let blob = &bytes[offset + 1..];

    let expected: usize = header
        .layers
        .iter()
        .map(|l| match l {
            LayerHeader::Conv { kernel, .. } => kernel.iter().product::<usize>() + kernel[3],
            LayerHeader::Pool { .. } => 0,
        })
        .sum::<usize>()
        * 4;
    if blob.len() != expected {
        return Err(Error::ModelFormat(format!(
            "weight blob length mismatch: header implies {expected} bytes, found {}",
            blob.len()
        )));
    }

    let mut floats = blob
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64);
    let mut layers = Vec::with_capacity(header.layers.len());
    for l in header.layers {
        match l {
            LayerHeader::Conv {
                name,
                kernel: [kw, kh, din, dout],
                stride,
                padding,
                relu,
            } => {
                let weights: Vec<f64> = floats.by_ref().take(kw * kh * din * dout).collect();
                let bias: Vec<f64> = floats.by_ref().take(dout).collect();
                let conv = ConvLayer::new(kw, kh, din, dout, weights, bias, stride, padding, relu)
                    .map_err(|e| Error::ModelFormat(format!("layer `{name}`: {e}")))?;
                layers.push(Layer::conv(name, conv));
            }
            LayerHeader::Pool {
                name,
                mode,
                window,
                stride,
            } => {
                let pool = PoolLayer::new(window, stride, mode)
                    .map_err(|e| Error::ModelFormat(format!("layer `{name}`: {e}")))?;
                layers.push(Layer::pool(name, pool));
            }
        }
    }
    let [w, h, d] = header.input_shape;
    NetworkSpec::new(Shape::new(w, h, d), layers)
}

pub fn save_model(spec: &NetworkSpec, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_model(spec)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<NetworkSpec> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes)
}

/// One layer of an architecture template; weights are filled in by
/// [`generate_model`].
#[derive(Clone, Debug, PartialEq)]
pub enum LayerTemplate {
    Conv {
        name: &'static str,
        kernel: usize,
        out_depth: usize,
        stride: usize,
        padding: usize,
        relu: bool,
    },
    Pool {
        name: &'static str,
        window: usize,
        stride: usize,
        mode: PoolMode,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArchTemplate {
    pub name: &'static str,
    pub input_shape: Shape,
    pub layers: Vec<LayerTemplate>,
}

const fn conv(name: &'static str, kernel: usize, out_depth: usize, padding: usize) -> LayerTemplate {
    LayerTemplate::Conv {
        name,
        kernel,
        out_depth,
        stride: 1,
        padding,
        relu: true,
    }
}

const fn pool(name: &'static str, mode: PoolMode) -> LayerTemplate {
    LayerTemplate::Pool {
        name,
        window: 2,
        stride: 2,
        mode,
    }
}

pub const TEMPLATE_NAMES: &[&str] = &["tiny-2conv", "tiny-3conv", "tiny-fc", "toy-vgg"];

impl ArchTemplate {
    pub fn by_name(name: &str) -> Result<Self> {
        let (input_shape, layers) = match name {
            // 8x8x3 -> 8x8x4 -> 4x4x4 -> 4x4x8
            "tiny-2conv" => (
                Shape::new(8, 8, 3),
                vec![
                    conv("conv-1", 3, 4, 1),
                    pool("pool-1", PoolMode::Max),
                    conv("conv-2", 3, 8, 1),
                ],
            ),
            // 8x8x3 -> 8x8x4 -> 4x4x4 -> 4x4x6 -> 2x2x8
            "tiny-3conv" => (
                Shape::new(8, 8, 3),
                vec![
                    conv("conv-1", 3, 4, 1),
                    pool("pool-1", PoolMode::Max),
                    conv("conv-2", 3, 6, 1),
                    conv("conv-3", 3, 8, 0),
                ],
            ),
            // 8x8x3 -> 8x8x4 -> 4x4x4 -> 4x4x8 -> 1x1x10
            "tiny-fc" => (
                Shape::new(8, 8, 3),
                vec![
                    conv("conv-1", 3, 4, 1),
                    pool("pool-1", PoolMode::Average),
                    conv("conv-2", 3, 8, 1),
                    conv("fc-3", 4, 10, 0),
                ],
            ),
            // 32x32x3 -> ... -> 4x4x16 -> 1x1x32
            "toy-vgg" => (
                Shape::new(32, 32, 3),
                vec![
                    conv("conv-1", 3, 8, 1),
                    pool("pool-1", PoolMode::Max),
                    conv("conv-2", 3, 16, 1),
                    pool("pool-2", PoolMode::Max),
                    conv("conv-3", 3, 16, 1),
                    pool("pool-3", PoolMode::Max),
                    conv("fc-4", 4, 32, 0),
                ],
            ),
            other => {
                return Err(Error::UnknownTemplate {
                    name: other.to_string(),
                    available: TEMPLATE_NAMES.join(", "),
                })
            }
        };
        let name = TEMPLATE_NAMES.iter().find(|n| **n == name).copied().unwrap_or("custom");
        Ok(ArchTemplate {
            name,
            input_shape,
            layers,
        })
    }
}

/// Uniform draw in `[-1, 1)` from the top 53 bits of one 64-bit output.
fn symmetric_unit(rng: &mut ChaCha8Rng) -> f64 {
    let u = (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
    2.0 * u - 1.0
}

/// Fills a template with deterministic weights.
///
/// Layer `i` draws from ChaCha8 seeded with `seed` (via
/// `SeedableRng::seed_from_u64`) on stream `i`, so each layer's weights are
/// independent of the others. Kernel scalars are `U[-1, 1) / sqrt(fan_in)`,
/// drawn in blob order and rounded to `f32`; biases are [`GENERATED_BIAS`].
pub fn generate_model(arch: &ArchTemplate, seed: u64) -> Result<NetworkSpec> {
    let mut depth = arch.input_shape.depth;
    let mut layers = Vec::with_capacity(arch.layers.len());
    let mut shape = arch.input_shape;
    for (index, t) in arch.layers.iter().enumerate() {
        let layer = match *t {
            LayerTemplate::Conv {
                name,
                kernel,
                out_depth,
                stride,
                padding,
                relu,
            } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(index as u64);
                let in_depth = depth;
                let fan_in = kernel * kernel * in_depth;
                let scale = 1.0 / (fan_in as f64).sqrt();
                let weights = (0..fan_in * out_depth)
                    .map(|_| (symmetric_unit(&mut rng) * scale) as f32 as f64)
                    .collect();
                let bias = vec![GENERATED_BIAS as f32 as f64; out_depth];
                depth = out_depth;
                Layer::conv(
                    name,
                    ConvLayer::new(
                        kernel, kernel, in_depth, out_depth, weights, bias, stride, padding, relu,
                    )?,
                )
            }
            LayerTemplate::Pool {
                name,
                window,
                stride,
                mode,
            } => Layer::pool(name, PoolLayer::new(window, stride, mode)?),
        };
        shape = layer.kind.output_shape(shape).map_err(|reason| Error::LayerShape {
            layer: layer.name.clone(),
            reason,
        })?;
        layers.push(layer);
    }
    NetworkSpec::new(arch.input_shape, layers)
}

/// Convenience wrapper around [`ArchTemplate::by_name`] and [`generate_model`].
pub fn generate_named(template: &str, seed: u64) -> Result<NetworkSpec> {
    generate_model(&ArchTemplate::by_name(template)?, seed)
}
