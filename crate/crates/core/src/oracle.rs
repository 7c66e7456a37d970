//! Slow reference computations for verifying the activeness engine.
//!
//! [`fd_connection_score`] differentiates `-ln f` with respect to a single
//! connection weight by central differences, re-running the forward pass.
//! The weight is treated as its own parameter (untied from the conv's
//! weight sharing). Perturbing it shifts exactly one pre-activation of layer
//! `t + 1` by `delta * x(t)_{w,h,d}`. [`enumerate_gamma`] sums `alpha`
//! literally over every neuron's downstream set.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::activeness::{
    backprop_score, connection_activeness_with, log_likelihood, neuron_activeness_with, ActivenessRequest, Connection,
    HopMode, Norm, Supervision,
};
use crate::error::{Error, Result};
use crate::net::{ForwardTrace, LayerKind, NetworkSpec};
use crate::tensor::{Shape, Tensor3};

/// Enumeration refuses networks needing more connections than this.
pub const MAX_ENUMERATED_CONNECTIONS: usize = 10_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FdSettings {
    /// Central-difference step on the connection weight.
    pub step: f64,
    pub rel_tol: f64,
    /// Coordinates whose perturbed pre-activation is closer than this to 0 are skipped.
    pub kink_guard: f64,
    /// Magnitudes below this count as zero when forming relative errors.
    pub abs_floor: f64,
}

impl Default for FdSettings {
    fn default() -> Self {
        FdSettings {
            step: 1e-4,
            rel_tol: 1e-4,
            kink_guard: 1e-6,
            abs_floor: 1e-6,
        }
    }
}

impl FdSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0 && self.rel_tol > 0.0 && self.kink_guard >= 0.0 && self.abs_floor >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "finite-difference settings must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    /// `|a - b| / max(|a|, |b|, abs_floor)`, and 0 when both are 0.
    pub fn relative_error(&self, a: f64, b: f64) -> f64 {
        let diff = (a - b).abs();
        if diff == 0.0 {
            return 0.0;
        }
        diff / a.abs().max(b.abs()).max(self.abs_floor)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FdEstimate {
    Value(f64),
    /// The perturbation crosses a ReLU kink or flips a max-pool winner,
    /// so the derivative is not defined there.
    Kink,
}

impl FdEstimate {
    pub fn value(self) -> Option<f64> {
        match self {
            FdEstimate::Value(v) => Some(v),
            FdEstimate::Kink => None,
        }
    }
}

/// ReLU gates and max-pool winners of one forward pass.
#[derive(PartialEq)]
struct Pattern(Vec<Vec<usize>>);

/// Forward pass with pre-activation `index` of layer `layer` shifted by
/// `shift`. Returns `-ln f` at `top` and the activation pattern.
fn perturbed_objective(
    spec: &NetworkSpec,
    x0: &Tensor3,
    layer: usize,
    index: usize,
    shift: f64,
    top: usize,
    norm: Norm,
) -> Result<(f64, Pattern)> {
    let mut x = x0.clone();
    let mut pattern = Vec::new();
    for (i, l) in spec.layers().iter().enumerate().take(top) {
        x = match &l.kind {
            LayerKind::Conv(conv) => {
                let mut pre = conv.preactivate(&x)?.into_data();
                if i == layer {
                    pre[index] += shift;
                }
                let shape = spec.infer_shapes()[i];
                if conv.relu() {
                    pattern.push(
                        pre.iter()
                            .enumerate()
                            .filter(|(_, v)| **v > 0.0)
                            .map(|(k, _)| k)
                            .collect(),
                    );
                    Tensor3::new(shape, pre.into_iter().map(|v| v.max(0.0)).collect())?
                } else {
                    Tensor3::new(shape, pre)?
                }
            }
            LayerKind::Pool(pool) => {
                let (out, routes) = pool.forward(&x)?;
                if let Some(r) = routes {
                    pattern.push(r);
                }
                out
            }
        };
    }
    Ok((-log_likelihood(&x.spatial_average(), norm), Pattern(pattern)))
}

/// Central-difference estimate of the score of one connection.
pub fn fd_connection_score(
    spec: &NetworkSpec,
    x0: &Tensor3,
    request: &ActivenessRequest,
    connection: Connection,
    settings: &FdSettings,
) -> Result<FdEstimate> {
    settings.validate()?;
    let top = request.supervision_layer(spec)?;
    let t = request.target;
    let conn = spec.receptive_sets(t)?;
    let (w, h, d) = connection.from;
    let (wo, ho, o) = connection.to;
    if !conn.input.contains(w, h, d) || !conn.output.contains(wo, ho, o) {
        return Err(Error::OutOfRange(format!(
            "connection {:?} -> {:?} outside {} -> {}",
            connection.from, connection.to, conn.input, conn.output
        )));
    }
    if conn.kernel_offset(w, h, wo, ho).is_none() {
        return Ok(FdEstimate::Value(0.0));
    }

    let trace = spec.forward(x0)?;
    let x = trace.response(t)?.get(w, h, d);
    let out_index = conn.output.index(wo, ho, o);
    let pre = trace.pre_activation(t).expect("conv layer").data()[out_index];
    let shift = settings.step * x;
    let relu = spec.layers()[t].kind.as_conv().is_some_and(|c| c.relu());
    if relu && x != 0.0 && (pre.abs() < settings.kink_guard || pre.abs() <= shift.abs()) {
        return Ok(FdEstimate::Kink);
    }

    let (_, base) = perturbed_objective(spec, x0, t, out_index, 0.0, top, request.norm)?;
    let (plus, p_plus) = perturbed_objective(spec, x0, t, out_index, shift, top, request.norm)?;
    let (minus, p_minus) = perturbed_objective(spec, x0, t, out_index, -shift, top, request.norm)?;
    if p_plus != base || p_minus != base {
        return Ok(FdEstimate::Kink);
    }
    Ok(FdEstimate::Value((plus - minus) / (2.0 * settings.step)))
}

/// `gamma` by literal summation of `alpha` over each neuron's U set.
pub fn enumerate_gamma(spec: &NetworkSpec, trace: &ForwardTrace, request: &ActivenessRequest) -> Result<Tensor3> {
    let top = request.supervision_layer(spec)?;
    let t = request.target;
    let conn = spec.receptive_sets(t)?;
    let input = conn.input;

    let mut total = 0usize;
    for w in 0..input.width {
        for h in 0..input.height {
            let (wr, hr) = conn.covering(w, h);
            total += wr.len() * hr.len() * conn.output.depth * input.depth;
        }
    }
    if total > MAX_ENUMERATED_CONNECTIONS {
        return Err(Error::OracleGuard(format!(
            "{total} connections exceed the enumeration limit of {MAX_ENUMERATED_CONNECTIONS}"
        )));
    }

    let g_next = backprop_score(spec, trace, top, request.norm, t + 1)?;
    let x_next = trace.response(t + 1)?;
    let relu = spec.layers()[t].kind.as_conv().is_some_and(|c| c.relu());
    let mut gamma = Vec::with_capacity(input.len());
    for w in 0..input.width {
        for h in 0..input.height {
            for d in 0..input.depth {
                let mut sum = 0.0;
                for (wo, ho, o) in conn.downstream(w, h, d)? {
                    let active = !relu || x_next.get(wo, ho, o) > 0.0;
                    if active {
                        sum += g_next.get(wo, ho, o);
                    }
                }
                gamma.push(sum);
            }
        }
    }
    Tensor3::new(input, gamma)
}

/// Outcome of [`gradcheck`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub checked: usize,
    pub kinks_skipped: usize,
    pub max_rel_error: f64,
    pub worst: Option<String>,
    pub gamma_configs: usize,
    pub max_gamma_abs_diff: f64,
    pub gamma_tol: f64,
    pub rel_tol: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_error <= self.rel_tol && self.max_gamma_abs_diff <= self.gamma_tol
    }
}

/// Agreement required between the engine's `gamma` and [`enumerate_gamma`].
pub const GAMMA_ABS_TOL: f64 = 1e-10;

/// Samples `samples` connections (random target layer, configuration, norm
/// and endpoints) and compares the engine against [`fd_connection_score`].
/// Also compares `gamma` against [`enumerate_gamma`] for every
/// configuration it visits.
///
/// Coordinates at kinks do not count towards `samples`. Sampling stops
/// after `100 * samples` attempts.
pub fn gradcheck(
    spec: &NetworkSpec,
    x0: &Tensor3,
    samples: usize,
    seed: u64,
    settings: &FdSettings,
    mode: HopMode,
) -> Result<GradcheckReport> {
    settings.validate()?;
    if samples == 0 {
        return Err(Error::InvalidArgument("gradcheck needs at least one sample".into()));
    }
    let targets: Vec<usize> = (0..spec.depth())
        .filter(|&t| matches!(spec.layers()[t].kind, LayerKind::Conv(_)))
        .collect();
    if targets.is_empty() {
        return Err(Error::InvalidRequest("network has no conv layers to check".into()));
    }
    let trace = spec.forward(x0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradcheckReport {
        checked: 0,
        kinks_skipped: 0,
        max_rel_error: 0.0,
        worst: None,
        gamma_configs: 0,
        max_gamma_abs_diff: 0.0,
        gamma_tol: GAMMA_ABS_TOL,
        rel_tol: settings.rel_tol,
    };
    let mut gamma_done = Vec::new();
    let mut attempts = 0;
    while report.checked < samples && attempts < samples * 100 {
        attempts += 1;
        let t = *targets.choose(&mut rng).expect("nonempty");
        let supervision = if rng.gen_bool(0.5) {
            Supervision::Last
        } else {
            Supervision::Next
        };
        let norm = if rng.gen_bool(0.5) { Norm::L1 } else { Norm::L2 };
        let request = ActivenessRequest::new(t, supervision, norm);

        if !gamma_done.contains(&request) {
            let engine = neuron_activeness_with(spec, &trace, &request, mode)?.gamma;
            let reference = enumerate_gamma(spec, &trace, &request)?;
            report.max_gamma_abs_diff = report.max_gamma_abs_diff.max(engine.max_abs_diff(&reference)?);
            report.gamma_configs += 1;
            gamma_done.push(request);
        }

        let conn = spec.receptive_sets(t)?;
        let from = sample_coords(&mut rng, conn.input);
        let downstream = conn.downstream(from.0, from.1, from.2)?;
        let to = *downstream
            .choose(&mut rng)
            .expect("every neuron feeds at least one output");
        let connection = Connection { from, to };
        match fd_connection_score(spec, x0, &request, connection, settings)? {
            FdEstimate::Kink => report.kinks_skipped += 1,
            FdEstimate::Value(fd) => {
                let engine = connection_activeness_with(spec, &trace, &request, connection, mode)?;
                let err = settings.relative_error(engine, fd);
                report.checked += 1;
                if err > report.max_rel_error || report.worst.is_none() {
                    report.max_rel_error = report.max_rel_error.max(err);
                    report.worst = Some(format!(
                        "t={t} {supervision} {norm} {from:?}->{to:?}: engine {engine:.6e}, fd {fd:.6e}"
                    ));
                }
            }
        }
    }
    log::debug!(
        "gradcheck: {} checked, {} kinks skipped, {} attempts, max rel error {:.3e}",
        report.checked,
        report.kinks_skipped,
        attempts,
        report.max_rel_error
    );
    Ok(report)
}

fn sample_coords(rng: &mut ChaCha8Rng, shape: Shape) -> (usize, usize, usize) {
    (
        rng.gen_range(0..shape.width),
        rng.gen_range(0..shape.height),
        rng.gen_range(0..shape.depth),
    )
}

/// Seeded `U[0, 1)` input tensor, as used by gradcheck and the fixtures.
pub fn random_input(shape: Shape, seed: u64) -> Result<Tensor3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor3::from_fn(shape, |_, _, _| rng.gen::<f64>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activeness::{connection_activeness, neuron_activeness};
    use crate::model_io::generate_named;
    use crate::net::{ConvLayer, Layer};

    fn scalar_net(weight: f64, bias: f64) -> NetworkSpec {
        let c = ConvLayer::new(1, 1, 1, 1, vec![weight], vec![bias], 1, 0, true).unwrap();
        NetworkSpec::new(Shape::new(1, 1, 1), vec![Layer::conv("c", c)]).unwrap()
    }

    fn scalar(v: f64) -> Tensor3 {
        Tensor3::new(Shape::new(1, 1, 1), vec![v]).unwrap()
    }

    const ONE: Connection = Connection {
        from: (0, 0, 0),
        to: (0, 0, 0),
    };

    #[test]
    fn fd_zero_upstream() {
        let spec = scalar_net(3.0, 1.0);
        let req = ActivenessRequest::new(0, Supervision::Next, Norm::L2);
        let v = fd_connection_score(&spec, &scalar(0.0), &req, ONE, &FdSettings::default()).unwrap();
        assert!(v.value().unwrap().abs() < 1e-8);
    }

    #[test]
    fn fd_clamped_downstream_is_flat() {
        // pre = 2*3 - 7 = -1, far below the perturbation of 2e-4
        let spec = scalar_net(3.0, -7.0);
        let req = ActivenessRequest::new(0, Supervision::Next, Norm::L1);
        let v = fd_connection_score(&spec, &scalar(2.0), &req, ONE, &FdSettings::default()).unwrap();
        assert!(v.value().unwrap().abs() < 1e-8);
    }

    #[test]
    fn fd_scalar_net_matches_hand_derivative() {
        // y = 2*theta - 1 at theta = 3 -> y = 5; d(y^2)/dtheta = 2*y*2 = 20
        let spec = scalar_net(3.0, -1.0);
        let req = ActivenessRequest::new(0, Supervision::Next, Norm::L2);
        let v = fd_connection_score(&spec, &scalar(2.0), &req, ONE, &FdSettings::default())
            .unwrap()
            .value()
            .unwrap();
        assert!((v - 20.0).abs() < 1e-8, "{v}");
        let trace = spec.forward(&scalar(2.0)).unwrap();
        assert_eq!(connection_activeness(&spec, &trace, &req, ONE).unwrap(), 20.0);
    }

    #[test]
    fn fd_detects_kink() {
        // pre = 2*0.5 - 1 = 0 exactly
        let spec = scalar_net(0.5, -1.0);
        let req = ActivenessRequest::new(0, Supervision::Next, Norm::L1);
        let v = fd_connection_score(&spec, &scalar(2.0), &req, ONE, &FdSettings::default()).unwrap();
        assert_eq!(v, FdEstimate::Kink);
    }

    #[test]
    fn fd_rejects_out_of_range() {
        let spec = scalar_net(1.0, 0.0);
        let req = ActivenessRequest::new(0, Supervision::Next, Norm::L1);
        let bad = Connection {
            from: (0, 1, 0),
            to: (0, 0, 0),
        };
        assert!(fd_connection_score(&spec, &scalar(1.0), &req, bad, &FdSettings::default()).is_err());
    }

    #[test]
    fn settings_validation() {
        let bad = FdSettings {
            step: 0.0,
            ..FdSettings::default()
        };
        assert!(bad.validate().is_err());
        let bad = FdSettings {
            rel_tol: -1.0,
            ..FdSettings::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn enumerate_one_by_one_closed_form() {
        // 1x1 conv, 2 -> 3 channels on a 2x1 input; outputs channel-wise (x0+x1)*w + b.
        let c = ConvLayer::new(
            1,
            1,
            2,
            3,
            vec![1.0, -1.0, 0.5, 1.0, -1.0, 0.5],
            vec![0.0; 3],
            1,
            0,
            true,
        )
        .unwrap();
        let spec = NetworkSpec::new(Shape::new(2, 1, 2), vec![Layer::conv("c", c)]).unwrap();
        let x = Tensor3::new(Shape::new(2, 1, 2), vec![1.0, 2.0, 3.0, 1.0]).unwrap();
        let trace = spec.forward(&x).unwrap();
        // position 0: outputs (3, -3, 1.5) -> active {0, 2}; position 1: (4, -4, 2) -> active {0, 2}
        let req = ActivenessRequest::new(0, Supervision::Next, Norm::L2);
        let g = enumerate_gamma(&spec, &trace, &req).unwrap();
        // x_bar = (3.5, 0, 1.75), score = 2 * x_bar / 2 = (3.5, 0, 1.75); gamma = 3.5 + 1.75
        assert_eq!(g.data(), &[5.25; 4]);
    }

    #[test]
    fn enumerate_guard_trips_on_big_nets() {
        let c = ConvLayer::new(11, 11, 16, 16, vec![0.01; 11 * 11 * 16 * 16], vec![0.0; 16], 1, 5, true).unwrap();
        let spec = NetworkSpec::new(Shape::new(40, 40, 16), vec![Layer::conv("c", c)]).unwrap();
        let trace = spec.forward(&Tensor3::zeros(spec.input_shape()).unwrap()).unwrap();
        let err = enumerate_gamma(&spec, &trace, &ActivenessRequest::new(0, Supervision::Next, Norm::L1)).unwrap_err();
        assert!(matches!(err, Error::OracleGuard(_)), "{err}");
    }

    #[test]
    fn enumeration_matches_engine_on_templates() {
        for name in ["tiny-2conv", "tiny-3conv", "tiny-fc"] {
            let spec = generate_named(name, 5).unwrap();
            let trace = spec.forward(&random_input(spec.input_shape(), 9).unwrap()).unwrap();
            for t in 0..spec.depth() {
                for sup in [Supervision::Last, Supervision::Next] {
                    for norm in [Norm::L1, Norm::L2] {
                        let req = ActivenessRequest::new(t, sup, norm);
                        if req.supervision_layer(&spec).is_err() {
                            continue;
                        }
                        let a = neuron_activeness(&spec, &trace, &req).unwrap().gamma;
                        let b = enumerate_gamma(&spec, &trace, &req).unwrap();
                        assert!(a.max_abs_diff(&b).unwrap() <= 1e-10, "{name} t={t} {sup} {norm}");
                    }
                }
            }
        }
    }

    #[test]
    fn richardson_step_halving() {
        let spec = generate_named("tiny-3conv", 2).unwrap();
        let x0 = random_input(spec.input_shape(), 4).unwrap();
        let coarse = FdSettings::default();
        let fine = FdSettings {
            step: coarse.step / 2.0,
            ..coarse
        };
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut compared = 0;
        while compared < 10 {
            let t = *[0usize, 2, 3].choose(&mut rng).unwrap();
            let req = ActivenessRequest::new(t, Supervision::Last, Norm::L2);
            let conn = spec.receptive_sets(t).unwrap();
            let from = sample_coords(&mut rng, conn.input);
            let to = *conn
                .downstream(from.0, from.1, from.2)
                .unwrap()
                .choose(&mut rng)
                .unwrap();
            let c = Connection { from, to };
            let (Some(a), Some(b)) = (
                fd_connection_score(&spec, &x0, &req, c, &coarse).unwrap().value(),
                fd_connection_score(&spec, &x0, &req, c, &fine).unwrap().value(),
            ) else {
                continue;
            };
            // Truncation error is O(step^2); piecewise-quadratic objective leaves only rounding.
            assert!(
                (a - b).abs() <= 1e-8 + 10.0 * coarse.step * coarse.step * a.abs(),
                "{a} vs {b}"
            );
            compared += 1;
        }
    }

    #[test]
    fn shared_kernel_weight_is_sum_of_connection_scores() {
        // Perturbing a tied kernel entry moves every connection that uses it.
        let spec = generate_named("tiny-2conv", 8).unwrap();
        let x0 = random_input(spec.input_shape(), 1).unwrap();
        let trace = spec.forward(&x0).unwrap();
        let t = 2; // pool-1 -> conv-2
        let req = ActivenessRequest::new(t, Supervision::Next, Norm::L2);
        let conv = spec.layers()[t].kind.as_conv().unwrap().clone();
        let conn = spec.receptive_sets(t).unwrap();
        let (i, j, c, o) = (1, 2, 3, 5);
        let k = conv.kernel_index(i, j, c, o);

        let mut engine = 0.0;
        for wo in 0..conn.output.width {
            for ho in 0..conn.output.height {
                let (Some(w), Some(h)) = (
                    (wo + i).checked_sub(conv.padding()),
                    (ho + j).checked_sub(conv.padding()),
                ) else {
                    continue;
                };
                if w < conn.input.width && h < conn.input.height {
                    let cn = Connection {
                        from: (w, h, c),
                        to: (wo, ho, o),
                    };
                    engine += connection_activeness(&spec, &trace, &req, cn).unwrap();
                }
            }
        }

        let step = 1e-5;
        let objective = |delta: f64| {
            let mut kernel = conv.kernel().to_vec();
            kernel[k] += delta;
            let layer = ConvLayer::new(3, 3, 4, 8, kernel, conv.bias().to_vec(), 1, 1, true).unwrap();
            let s = spec.with_conv(t, layer).unwrap();
            let tr = s.forward(&x0).unwrap();
            -log_likelihood(&tr.response(3).unwrap().spatial_average(), Norm::L2)
        };
        let fd = (objective(step) - objective(-step)) / (2.0 * step);
        assert!((engine - fd).abs() <= 1e-6 * fd.abs().max(1e-3), "{engine} vs {fd}");
    }

    #[test]
    fn gradcheck_passes_and_negative_control_fails() {
        let spec = generate_named("tiny-2conv", 7).unwrap();
        let x0 = random_input(spec.input_shape(), 7).unwrap();
        let ok = gradcheck(&spec, &x0, 60, 1, &FdSettings::default(), HopMode::Faithful).unwrap();
        assert!(ok.passed(), "{ok:?}");
        let bad = gradcheck(&spec, &x0, 60, 1, &FdSettings::default(), HopMode::DropReluIndicator).unwrap();
        assert!(!bad.passed(), "{bad:?}");
        assert!(gradcheck(&spec, &x0, 0, 1, &FdSettings::default(), HopMode::Faithful).is_err());
    }
}
