//! Inter-layer activeness propagation.
//!
//! High-level responses `x(T)` (the spatial average of `X(T)`) are given the
//! unnormalized log-density `ln f = -||x(T)||_p^p`. Differentiating it
//! through the network yields, for every connection `theta` between
//! `x(t)_{w,h,d}` and `x(t+1)_{w',h',d'}`, a score `x(t)_{w,h,d} * alpha`
//! with
//!
//! ```text
//! alpha = [x(t+1)_{w',h',d'} > 0] * [connected] * G(t+1)_{w',h',d'}
//! ```
//!
//! where `G(t+1)` is the gradient of the score with respect to `X(t+1)`.
//! Summing `alpha` over a neuron's downstream set gives its spatial weight
//! `gamma`; the activeness is `x * gamma`.
//!
//! # Sign convention
//!
//! Every gradient here is taken of `-ln f`, not `ln f`. The layer score is
//! therefore `+p / (W_T * H_T) * x_d^(p-1)`, which is nonnegative. This is a
//! global sign flip: relative weights are unchanged, but "more active" means
//! "larger", which is what max-pooling the activeness relies on.
//!
//! The supervision layer `T` is either the last layer or `t + 1`. Layer
//! `t + 1` must be a conv layer. Any pool layers between `t + 1` and `T`
//! are backpropagated by their usual subgradients. Only the final hop
//! into `X(t)` drops the kernel weights.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{Connectivity, ForwardTrace, LayerKind, NetworkSpec};
use crate::tensor::{ChannelVector, Tensor3};

/// Where the supervising likelihood sits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Supervision {
    /// `T = L`, the final layer.
    Last,
    /// `T = t + 1`, the direct successor.
    Next,
}

impl fmt::Display for Supervision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Supervision::Last => "last",
            Supervision::Next => "next",
        })
    }
}

impl FromStr for Supervision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "last" => Ok(Supervision::Last),
            "next" => Ok(Supervision::Next),
            other => Err(Error::InvalidArgument(format!(
                "supervision must be `last` or `next`, got `{other}`"
            ))),
        }
    }
}

/// The `p` of the `l_p` likelihood.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub enum Norm {
    L1,
    L2,
}

impl Norm {
    pub fn p(self) -> u32 {
        match self {
            Norm::L1 => 1,
            Norm::L2 => 2,
        }
    }
}

impl TryFrom<u32> for Norm {
    type Error = Error;

    fn try_from(p: u32) -> Result<Self> {
        match p {
            1 => Ok(Norm::L1),
            2 => Ok(Norm::L2),
            other => Err(Error::UnsupportedNorm(other)),
        }
    }
}

impl From<Norm> for u32 {
    fn from(n: Norm) -> u32 {
        n.p()
    }
}

impl fmt::Display for Norm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "p={}", self.p())
    }
}

/// How the activeness tensor is reduced to one value per channel.
///
/// Max is the default; average matches the spatial averaging used for the
/// likelihood itself.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Summarize {
    #[default]
    Max,
    Average,
}

impl Summarize {
    pub fn apply(self, t: &Tensor3) -> ChannelVector {
        match self {
            Summarize::Max => t.spatial_max(),
            Summarize::Average => t.spatial_average(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ActivenessRequest {
    /// Index `t` of the response `X(t)` to weight (0 is the input).
    pub target: usize,
    pub supervision: Supervision,
    pub norm: Norm,
    pub summarize: Summarize,
}

impl ActivenessRequest {
    pub fn new(target: usize, supervision: Supervision, norm: Norm) -> Self {
        ActivenessRequest {
            target,
            supervision,
            norm,
            summarize: Summarize::Max,
        }
    }

    pub fn with_summarize(mut self, summarize: Summarize) -> Self {
        self.summarize = summarize;
        self
    }

    /// Checks the request against `spec` and returns the supervision index `T`.
    pub fn supervision_layer(&self, spec: &NetworkSpec) -> Result<usize> {
        let t = self.target;
        let depth = spec.depth();
        if t >= depth {
            return Err(Error::InvalidRequest(format!(
                "target {t} has no successor layer (network depth {depth})"
            )));
        }
        let next = &spec.layers()[t];
        if !matches!(next.kind, LayerKind::Conv(_)) {
            return Err(Error::InvalidRequest(format!(
                "the layer after `{}` is `{}`, a pooling layer; activeness needs a conv successor",
                spec.response_name(t).unwrap_or("?"),
                next.name
            )));
        }
        Ok(match self.supervision {
            Supervision::Last => depth,
            Supervision::Next => t + 1,
        })
    }
}

/// One connection between `X(t)` and `X(t+1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Connection {
    pub from: (usize, usize, usize),
    pub to: (usize, usize, usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActivenessResult {
    /// Spatial weights, shaped like `X(t)`.
    pub gamma: Tensor3,
    /// `X(t) * gamma`, elementwise.
    pub activeness: Tensor3,
    /// `gamma` summed over channels (`W_t x H_t x 1`).
    pub map2d: Tensor3,
    /// Per-channel summary of `activeness`.
    pub feature: ChannelVector,
    /// `-||x(T)||_p^p`.
    pub log_likelihood: f64,
}

/// `-||x||_p^p`, dropping the normalizer.
pub fn log_likelihood(x: &ChannelVector, norm: Norm) -> f64 {
    -match norm {
        Norm::L1 => x.values().iter().map(|v| v.abs()).sum::<f64>(),
        Norm::L2 => x.values().iter().map(|v| v * v).sum::<f64>(),
    }
}

/// Gradient of `-ln f` with respect to `X(T)`:
/// `p / (W_T * H_T) * x_d^(p-1)` at every spatial position of channel `d`.
/// For `p = 1` the power is 1 even where `x_d = 0`.
pub fn layer_score(xt: &Tensor3, norm: Norm) -> Result<Tensor3> {
    let shape = xt.shape();
    let area = shape.spatial() as f64;
    let per_channel: Vec<f64> = match norm {
        Norm::L1 => vec![1.0 / area; shape.depth],
        Norm::L2 => xt.spatial_average().values().iter().map(|&m| 2.0 * m / area).collect(),
    };
    Tensor3::from_fn(shape, |_, _, d| per_channel[d])
}

fn check_trace(spec: &NetworkSpec, trace: &ForwardTrace) -> Result<()> {
    if trace.num_layers() != spec.depth() || trace.input().shape() != spec.input_shape() {
        return Err(Error::InvalidRequest(
            "forward trace does not belong to this network".into(),
        ));
    }
    for (i, (a, s)) in trace.activations().iter().zip(spec.infer_shapes()).enumerate() {
        if a.shape() != *s {
            return Err(Error::InvalidRequest(format!(
                "trace response {} has shape {} but layer `{}` produces {s}",
                i + 1,
                a.shape(),
                spec.layers()[i].name
            )));
        }
    }
    Ok(())
}

/// Gradient of `-ln f(x(T))` with respect to `X(down_to)`, by reverse-mode
/// propagation from the layer score at `T`.
pub fn backprop_score(
    spec: &NetworkSpec,
    trace: &ForwardTrace,
    top: usize,
    norm: Norm,
    down_to: usize,
) -> Result<Tensor3> {
    check_trace(spec, trace)?;
    if top > spec.depth() {
        return Err(Error::OutOfRange(format!(
            "supervision layer {top} beyond network depth {}",
            spec.depth()
        )));
    }
    if down_to > top {
        return Err(Error::InvalidRequest(format!(
            "cannot backpropagate down to {down_to} from {top}"
        )));
    }
    let mut grad = layer_score(trace.response(top)?, norm)?;
    for i in (down_to..top).rev() {
        let input = spec.response_shape(i)?;
        grad = match &spec.layers()[i].kind {
            LayerKind::Conv(conv) => {
                let grad_pre = if conv.relu() {
                    let pre = trace.pre_activation(i).expect("conv layers cache pre-activations");
                    masked(&grad, pre)?
                } else {
                    grad
                };
                conv.backward_input(input, &grad_pre)?
            }
            LayerKind::Pool(pool) => pool.backward_input(input, &grad, trace.pool_routes(i))?,
        };
    }
    Ok(grad)
}

/// `grad` where `gate > 0`, zero elsewhere.
fn masked(grad: &Tensor3, gate: &Tensor3) -> Result<Tensor3> {
    let data = grad
        .data()
        .iter()
        .zip(gate.data())
        .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor3::new(grad.shape(), data)
}

#[doc(hidden)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum HopMode {
    #[default]
    Faithful,
    /// Omits the ReLU indicator on `X(t+1)`. Negative control for gradcheck.
    DropReluIndicator,
}

/// Per-neuron `alpha` factor on `X(t+1)`: `G(t+1)` gated by `x(t+1) > 0`.
/// The gate only applies when layer `t+1` has a ReLU.
fn downstream_importance(
    spec: &NetworkSpec,
    trace: &ForwardTrace,
    request: &ActivenessRequest,
    mode: HopMode,
) -> Result<(Tensor3, Connectivity)> {
    let top = request.supervision_layer(spec)?;
    let t = request.target;
    let conn = spec.receptive_sets(t)?;
    let g_next = backprop_score(spec, trace, top, request.norm, t + 1)?;
    let relu = spec.layers()[t].kind.as_conv().is_some_and(|c| c.relu());
    let importance = if relu && mode == HopMode::Faithful {
        masked(&g_next, trace.response(t + 1)?)?
    } else {
        g_next
    };
    Ok((importance, conn))
}

/// Score of a single connection: `x(t)_{w,h,d} * alpha`.
pub fn connection_activeness(
    spec: &NetworkSpec,
    trace: &ForwardTrace,
    request: &ActivenessRequest,
    connection: Connection,
) -> Result<f64> {
    connection_activeness_with(spec, trace, request, connection, HopMode::Faithful)
}

#[doc(hidden)]
pub fn connection_activeness_with(
    spec: &NetworkSpec,
    trace: &ForwardTrace,
    request: &ActivenessRequest,
    connection: Connection,
    mode: HopMode,
) -> Result<f64> {
    let (importance, conn) = downstream_importance(spec, trace, request, mode)?;
    let (w, h, d) = connection.from;
    let (wo, ho, o) = connection.to;
    let x = trace.response(request.target)?.try_get(w, h, d)?;
    let alpha = importance.try_get(wo, ho, o)?;
    Ok(match conn.kernel_offset(w, h, wo, ho) {
        Some(_) => x * alpha,
        None => 0.0,
    })
}

/// Weight-free transposed accumulation: every input position receives the
/// channel-summed importance of each output position whose window covers it.
/// The result is identical across input channels.
fn accumulate_gamma(importance: &Tensor3, conn: &Connectivity) -> Result<Tensor3> {
    let out = conn.output;
    let per_output: Vec<f64> = importance
        .data()
        .chunks_exact(out.depth)
        .map(|c| c.iter().sum())
        .collect();
    let input = conn.input;
    let mut plane = vec![0.0; input.spatial()];
    for w in 0..input.width {
        for h in 0..input.height {
            let (wr, hr) = conn.covering(w, h);
            let mut acc = 0.0;
            for wo in wr {
                for ho in hr.clone() {
                    acc += per_output[wo * out.height + ho];
                }
            }
            plane[w * input.height + h] = acc;
        }
    }
    Tensor3::from_fn(input, |w, h, _| plane[w * input.height + h])
}

/// Spatial weights, activeness, 2-D map and pooled feature for `X(t)`.
pub fn neuron_activeness(
    spec: &NetworkSpec,
    trace: &ForwardTrace,
    request: &ActivenessRequest,
) -> Result<ActivenessResult> {
    neuron_activeness_with(spec, trace, request, HopMode::Faithful)
}

#[doc(hidden)]
pub fn neuron_activeness_with(
    spec: &NetworkSpec,
    trace: &ForwardTrace,
    request: &ActivenessRequest,
    mode: HopMode,
) -> Result<ActivenessResult> {
    let top = request.supervision_layer(spec)?;
    let (importance, conn) = downstream_importance(spec, trace, request, mode)?;
    let gamma = accumulate_gamma(&importance, &conn)?;
    let x = trace.response(request.target)?;
    let activeness = x.hadamard(&gamma)?;
    let map2d = gamma.channel_sum_map();
    let feature = request.summarize.apply(&activeness);
    let log_likelihood = log_likelihood(&trace.response(top)?.spatial_average(), request.norm);
    Ok(ActivenessResult {
        gamma,
        activeness,
        map2d,
        feature,
        log_likelihood,
    })
}

/// Concatenated features of several requests, in request order.
pub fn interactive_feature_stack(
    spec: &NetworkSpec,
    trace: &ForwardTrace,
    requests: &[ActivenessRequest],
) -> Result<ChannelVector> {
    if requests.is_empty() {
        return Err(Error::InvalidRequest("feature stack needs at least one request".into()));
    }
    let mut out = Vec::new();
    for r in requests {
        out.extend(neuron_activeness(spec, trace, r)?.feature.into_inner());
    }
    Ok(ChannelVector(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{ConvLayer, Layer, PoolLayer, PoolMode};
    use crate::tensor::Shape;

    fn single_conv(weight: f64, bias: f64, relu: bool) -> NetworkSpec {
        let c = ConvLayer::new(1, 1, 1, 1, vec![weight], vec![bias], 1, 0, relu).unwrap();
        NetworkSpec::new(Shape::new(1, 1, 1), vec![Layer::conv("c", c)]).unwrap()
    }

    fn scalar(v: f64) -> Tensor3 {
        Tensor3::new(Shape::new(1, 1, 1), vec![v]).unwrap()
    }

    #[test]
    fn log_likelihood_examples() {
        let x = ChannelVector(vec![3.0, 4.0]);
        assert_eq!(log_likelihood(&x, Norm::L2), -25.0);
        assert_eq!(log_likelihood(&x, Norm::L1), -7.0);
        assert_eq!(log_likelihood(&ChannelVector(vec![0.0; 3]), Norm::L1), 0.0);
    }

    #[test]
    fn norm_rejects_other_p() {
        assert!(matches!(Norm::try_from(3), Err(Error::UnsupportedNorm(3))));
        assert!(matches!(Norm::try_from(0), Err(Error::UnsupportedNorm(0))));
    }

    #[test]
    fn layer_score_examples() {
        let x = Tensor3::from_fn(Shape::new(2, 2, 3), |w, h, d| (w + h * d) as f64).unwrap();
        assert!(layer_score(&x, Norm::L1).unwrap().data().iter().all(|&v| v == 0.25));
        let x = Tensor3::new(Shape::new(1, 1, 2), vec![3.0, 4.0]).unwrap();
        assert_eq!(layer_score(&x, Norm::L2).unwrap().data(), &[6.0, 8.0]);
        let x = Tensor3::new(Shape::new(2, 1, 1), vec![1.0, 3.0]).unwrap();
        assert_eq!(layer_score(&x, Norm::L2).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn layer_score_p1_at_zero_average() {
        let x = Tensor3::zeros(Shape::new(3, 1, 2)).unwrap();
        assert!(layer_score(&x, Norm::L1)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 1.0 / 3.0));
        assert!(layer_score(&x, Norm::L2).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backprop_empty_chain_is_layer_score() {
        let spec = single_conv(3.0, -1.0, true);
        let trace = spec.forward(&scalar(2.0)).unwrap();
        let g = backprop_score(&spec, &trace, 1, Norm::L2, 1).unwrap();
        assert_eq!(g, layer_score(trace.response(1).unwrap(), Norm::L2).unwrap());
    }

    #[test]
    fn backprop_single_conv_chain_rule() {
        // x = 2, w = 3, b = -1 -> y = 5; dy: 2*5 = 10; dx = 10 * 3 = 30 = 2 * y * w
        let spec = single_conv(3.0, -1.0, true);
        let trace = spec.forward(&scalar(2.0)).unwrap();
        let g = backprop_score(&spec, &trace, 1, Norm::L2, 0).unwrap();
        assert_eq!(g.data(), &[30.0]);
    }

    #[test]
    fn backprop_rejects_bad_order() {
        let spec = single_conv(3.0, -1.0, true);
        let trace = spec.forward(&scalar(2.0)).unwrap();
        assert!(backprop_score(&spec, &trace, 0, Norm::L1, 1).is_err());
        assert!(backprop_score(&spec, &trace, 2, Norm::L1, 0).is_err());
    }

    #[test]
    fn backprop_rejects_foreign_trace() {
        let spec = single_conv(3.0, -1.0, true);
        let other = NetworkSpec::new(
            Shape::new(1, 1, 1),
            vec![
                Layer::conv(
                    "a",
                    ConvLayer::new(1, 1, 1, 1, vec![1.0], vec![0.0], 1, 0, true).unwrap(),
                ),
                Layer::conv(
                    "b",
                    ConvLayer::new(1, 1, 1, 1, vec![1.0], vec![0.0], 1, 0, true).unwrap(),
                ),
            ],
        )
        .unwrap();
        let trace = other.forward(&scalar(1.0)).unwrap();
        assert!(backprop_score(&spec, &trace, 1, Norm::L1, 0).is_err());
    }

    #[test]
    fn connection_zero_cases() {
        let spec = single_conv(3.0, -7.0, true);
        let req = ActivenessRequest::new(0, Supervision::Next, Norm::L1);
        let conn = Connection {
            from: (0, 0, 0),
            to: (0, 0, 0),
        };
        // downstream clamped: 2*3 - 7 < 0
        let trace = spec.forward(&scalar(2.0)).unwrap();
        assert_eq!(connection_activeness(&spec, &trace, &req, conn).unwrap(), 0.0);
        // upstream zero
        let spec = single_conv(3.0, 1.0, true);
        let trace = spec.forward(&scalar(0.0)).unwrap();
        assert_eq!(connection_activeness(&spec, &trace, &req, conn).unwrap(), 0.0);
        // out of range
        let bad = Connection {
            from: (1, 0, 0),
            to: (0, 0, 0),
        };
        assert!(connection_activeness(&spec, &trace, &req, bad).is_err());
    }

    #[test]
    fn unconnected_pair_scores_zero() {
        let c = ConvLayer::new(1, 1, 1, 1, vec![1.0], vec![1.0], 1, 0, true).unwrap();
        let spec = NetworkSpec::new(Shape::new(2, 1, 1), vec![Layer::conv("c", c)]).unwrap();
        let x = Tensor3::new(Shape::new(2, 1, 1), vec![1.0, 2.0]).unwrap();
        let trace = spec.forward(&x).unwrap();
        let req = ActivenessRequest::new(0, Supervision::Next, Norm::L1);
        let conn = Connection {
            from: (0, 0, 0),
            to: (1, 0, 0),
        };
        assert_eq!(connection_activeness(&spec, &trace, &req, conn).unwrap(), 0.0);
    }

    #[test]
    fn next_p1_one_by_one_gamma_counts_outputs() {
        // t+1: 1x1 conv with 1x1 spatial output, 5 positive outputs -> gamma = 5 / (1*1)
        let c = ConvLayer::new(1, 1, 2, 5, vec![0.5; 10], vec![0.1; 5], 1, 0, true).unwrap();
        let spec = NetworkSpec::new(Shape::new(1, 1, 2), vec![Layer::conv("c", c)]).unwrap();
        let x = Tensor3::new(Shape::new(1, 1, 2), vec![1.0, 2.0]).unwrap();
        let trace = spec.forward(&x).unwrap();
        let r = neuron_activeness(&spec, &trace, &ActivenessRequest::new(0, Supervision::Next, Norm::L1)).unwrap();
        assert_eq!(r.gamma.data(), &[5.0, 5.0]);
        assert_eq!(r.activeness.data(), &[5.0, 10.0]);
        assert_eq!(r.map2d.data(), &[10.0]);
        assert_eq!(r.feature.values(), &[5.0, 10.0]);
    }

    #[test]
    fn zero_response_gives_zero_activeness() {
        let c = ConvLayer::new(1, 1, 1, 2, vec![1.0, -1.0], vec![0.5, 0.5], 1, 0, true).unwrap();
        let spec = NetworkSpec::new(Shape::new(2, 2, 1), vec![Layer::conv("c", c)]).unwrap();
        let trace = spec.forward(&Tensor3::zeros(Shape::new(2, 2, 1)).unwrap()).unwrap();
        let r = neuron_activeness(&spec, &trace, &ActivenessRequest::new(0, Supervision::Next, Norm::L2)).unwrap();
        assert!(r.activeness.data().iter().all(|&v| v == 0.0));
        assert!(r.feature.values().iter().all(|&v| v == 0.0));
        assert!(r.gamma.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn request_rejects_pool_successor_and_last_layer() {
        let c = ConvLayer::new(1, 1, 1, 1, vec![1.0], vec![0.0], 1, 0, true).unwrap();
        let spec = NetworkSpec::new(
            Shape::new(2, 2, 1),
            vec![
                Layer::conv("c", c),
                Layer::pool("p", PoolLayer::new(2, 2, PoolMode::Max).unwrap()),
            ],
        )
        .unwrap();
        let err = ActivenessRequest::new(1, Supervision::Next, Norm::L1)
            .supervision_layer(&spec)
            .unwrap_err();
        assert!(err.to_string().contains("pooling"), "{err}");
        assert!(ActivenessRequest::new(2, Supervision::Last, Norm::L1)
            .supervision_layer(&spec)
            .is_err());
        assert_eq!(
            ActivenessRequest::new(0, Supervision::Last, Norm::L1)
                .supervision_layer(&spec)
                .unwrap(),
            2
        );
        assert_eq!(
            ActivenessRequest::new(0, Supervision::Next, Norm::L1)
                .supervision_layer(&spec)
                .unwrap(),
            1
        );
    }

    #[test]
    fn feature_stack_rejects_empty() {
        let spec = single_conv(1.0, 0.0, true);
        let trace = spec.forward(&scalar(1.0)).unwrap();
        assert!(interactive_feature_stack(&spec, &trace, &[]).is_err());
    }

    #[test]
    fn supervision_parses() {
        assert_eq!("last".parse::<Supervision>().unwrap(), Supervision::Last);
        assert!("first".parse::<Supervision>().is_err());
    }
}
