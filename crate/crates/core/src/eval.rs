//! Desk-scale evaluation: l2-normalized features, a one-vs-rest logistic
//! classifier, a synthetic dataset, and the original-vs-activeness
//! comparison table.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activeness::{neuron_activeness, ActivenessRequest, Norm, Supervision};
use crate::error::{Error, Result};
use crate::image::{to_input_tensor, RasterImage};
use crate::net::NetworkSpec;

/// Scales `row` to unit l2 norm; an all-zero row is returned unchanged.
pub fn l2_normalize(row: &[f64]) -> Vec<f64> {
    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return row.to_vec();
    }
    row.iter().map(|v| v / norm).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledFeatureSet {
    features: Vec<Vec<f64>>,
    labels: Vec<usize>,
    classes: usize,
    train: Vec<usize>,
    test: Vec<usize>,
}

impl LabeledFeatureSet {
    pub fn new(
        features: Vec<Vec<f64>>,
        labels: Vec<usize>,
        classes: usize,
        train: Vec<usize>,
        test: Vec<usize>,
    ) -> Result<Self> {
        let n = features.len();
        if labels.len() != n {
            return Err(Error::Training(format!("{n} rows but {} labels", labels.len())));
        }
        if let Some(first) = features.first() {
            if features.iter().any(|r| r.len() != first.len()) {
                return Err(Error::Training("rows have differing lengths".into()));
            }
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Training(format!("label {bad} outside [0, {classes})")));
        }
        let mut seen = vec![0u8; n];
        for &i in train.iter().chain(&test) {
            match seen.get_mut(i) {
                Some(s) => *s += 1,
                None => return Err(Error::Training(format!("split index {i} out of range"))),
            }
        }
        if seen.iter().any(|&s| s != 1) {
            return Err(Error::Training(
                "train/test splits must be disjoint and cover every row".into(),
            ));
        }
        Ok(LabeledFeatureSet {
            features,
            labels,
            classes,
            train,
            test,
        })
    }

    /// First `train_per_class` rows of each class train; the rest test.
    pub fn split_per_class(
        features: Vec<Vec<f64>>,
        labels: Vec<usize>,
        classes: usize,
        train_per_class: usize,
    ) -> Result<Self> {
        let mut counts = vec![0usize; classes];
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for (i, &l) in labels.iter().enumerate() {
            let c = counts
                .get_mut(l)
                .ok_or_else(|| Error::Training(format!("label {l} outside [0, {classes})")))?;
            if *c < train_per_class {
                train.push(i);
            } else {
                test.push(i);
            }
            *c += 1;
        }
        Self::new(features, labels, classes, train, test)
    }

    pub fn features(&self) -> &[Vec<f64>] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn train(&self) -> &[usize] {
        &self.train
    }

    pub fn test(&self) -> &[usize] {
        &self.test
    }

    pub fn dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    /// SVM-style cost; the l2 penalty is `1 / (c * N_train)`.
    pub c: f64,
    pub epochs: usize,
    pub lr: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            c: 10.0,
            epochs: 300,
            lr: 1.0,
        }
    }
}

impl TrainOptions {
    pub fn reg(&self, n_train: usize) -> f64 {
        1.0 / (self.c * n_train as f64)
    }
}

/// One-vs-rest logistic regression weights.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearModel {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    /// Summed objective over the K binary problems, one entry per epoch
    /// (evaluated before that epoch's update), plus the final value.
    pub loss_history: Vec<f64>,
}

fn log1p_exp(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Full-batch gradient descent on the l2-regularized logistic loss, one
/// binary problem per class. The bias is not penalized.
pub fn train_linear(set: &LabeledFeatureSet, opts: &TrainOptions) -> Result<LinearModel> {
    let rows = set.train();
    if rows.is_empty() {
        return Err(Error::Training("empty training split".into()));
    }
    let first = set.labels[rows[0]];
    if rows.iter().all(|&i| set.labels[i] == first) {
        return Err(Error::Training("training split contains a single class".into()));
    }
    if !(opts.lr > 0.0 && opts.c > 0.0) {
        return Err(Error::Training("learning rate and C must be positive".into()));
    }
    let n = rows.len() as f64;
    let dim = set.dim();
    let reg = opts.reg(rows.len());
    let k = set.classes;
    let mut weights = vec![vec![0.0; dim]; k];
    let mut bias = vec![0.0; k];

    let objective = |weights: &[Vec<f64>], bias: &[f64]| -> f64 {
        let mut total = 0.0;
        for c in 0..k {
            let mut loss = 0.0;
            for &i in rows {
                let y = if set.labels[i] == c { 1.0 } else { -1.0 };
                let z = dot(&weights[c], &set.features[i]) + bias[c];
                loss += log1p_exp(-y * z);
            }
            total += loss / n + 0.5 * reg * dot(&weights[c], &weights[c]);
        }
        total
    };

    let mut loss_history = Vec::with_capacity(opts.epochs + 1);
    for _ in 0..opts.epochs {
        loss_history.push(objective(&weights, &bias));
        for c in 0..k {
            let mut gw = vec![0.0; dim];
            let mut gb = 0.0;
            for &i in rows {
                let y = if set.labels[i] == c { 1.0 } else { 0.0 };
                let x = &set.features[i];
                let err = sigmoid(dot(&weights[c], x) + bias[c]) - y;
                for (g, &xv) in gw.iter_mut().zip(x) {
                    *g += err * xv;
                }
                gb += err;
            }
            for (w, g) in weights[c].iter_mut().zip(&gw) {
                *w -= opts.lr * (g / n + reg * *w);
            }
            bias[c] -= opts.lr * gb / n;
        }
    }
    loss_history.push(objective(&weights, &bias));
    Ok(LinearModel {
        weights,
        bias,
        loss_history,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl LinearModel {
    /// Highest-scoring class; ties go to the lowest index.
    pub fn predict(&self, row: &[f64]) -> usize {
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for (c, (w, b)) in self.weights.iter().zip(&self.bias).enumerate() {
            let s = dot(w, row) + b;
            if s > best_score {
                best = c;
                best_score = s;
            }
        }
        best
    }

    pub fn accuracy(&self, set: &LabeledFeatureSet, rows: &[usize]) -> f64 {
        if rows.is_empty() {
            return 0.0;
        }
        let hits = rows
            .iter()
            .filter(|&&i| self.predict(&set.features[i]) == set.labels[i])
            .count();
        hits as f64 / rows.len() as f64
    }
}

/// Parameters of the synthetic dataset.
///
/// Each image is mid-gray noise with one small textured patch at a random,
/// usually off-center position. The class is encoded only in the patch's
/// stripe orientation, frequency and tint, so most of the canvas carries no
/// signal.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyDatasetSpec {
    pub seed: u64,
    pub classes: usize,
    pub samples_per_class: usize,
    pub train_per_class: usize,
    pub width: usize,
    pub height: usize,
    /// Side of the square patch, in pixels.
    pub patch: usize,
    /// Peak stripe amplitude in gray levels.
    pub amplitude: f64,
    /// Half-width of the uniform background noise in gray levels.
    pub noise: f64,
}

impl Default for ToyDatasetSpec {
    fn default() -> Self {
        ToyDatasetSpec {
            seed: 3,
            classes: 4,
            samples_per_class: 40,
            train_per_class: 20,
            width: 32,
            height: 32,
            patch: 8,
            amplitude: 100.0,
            noise: 40.0,
        }
    }
}

impl ToyDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::InvalidArgument("toy dataset needs at least 2 classes".into()));
        }
        if self.train_per_class == 0 || self.train_per_class >= self.samples_per_class {
            return Err(Error::InvalidArgument(
                "train_per_class must be in [1, samples_per_class)".into(),
            ));
        }
        if self.patch == 0 || self.patch > self.width.min(self.height) {
            return Err(Error::InvalidArgument("patch must fit inside the canvas".into()));
        }
        Ok(())
    }

    /// Generates `(image, label)` pairs, class-major.
    pub fn generate(&self) -> Result<Vec<(RasterImage, usize)>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut out = Vec::with_capacity(self.classes * self.samples_per_class);
        for class in 0..self.classes {
            let angle = std::f64::consts::PI * class as f64 / self.classes as f64;
            let freq = 0.6 + 0.9 * (class % 3) as f64 / 2.0;
            let tint = [
                1.0,
                0.4 + 0.6 * ((class + 1) % 2) as f64,
                0.4 + 0.6 * (class % 2) as f64,
            ];
            for _ in 0..self.samples_per_class {
                let px = rng.gen_range(0..=self.width - self.patch);
                let py = rng.gen_range(0..=self.height - self.patch);
                let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                let mut pixels = Vec::with_capacity(self.width * self.height * 3);
                for y in 0..self.height {
                    for x in 0..self.width {
                        let inside = (px..px + self.patch).contains(&x) && (py..py + self.patch).contains(&y);
                        let stripe = if inside {
                            let u = x as f64 * angle.cos() + y as f64 * angle.sin();
                            self.amplitude * (freq * u + phase).sin()
                        } else {
                            0.0
                        };
                        for t in tint {
                            let n = if self.noise > 0.0 {
                                rng.gen_range(-self.noise..self.noise)
                            } else {
                                0.0
                            };
                            pixels.push((128.0 + n + t * stripe).round().clamp(0.0, 255.0) as u8);
                        }
                    }
                }
                out.push((RasterImage::new(self.width, self.height, 3, pixels)?, class));
            }
        }
        Ok(out)
    }
}

/// The six rows reported per layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pipeline {
    OriginalAverage,
    OriginalMax,
    Interactive { supervision: Supervision, norm: Norm },
}

impl Pipeline {
    pub const ALL: [Pipeline; 6] = [
        Pipeline::OriginalAverage,
        Pipeline::OriginalMax,
        Pipeline::Interactive {
            supervision: Supervision::Next,
            norm: Norm::L1,
        },
        Pipeline::Interactive {
            supervision: Supervision::Next,
            norm: Norm::L2,
        },
        Pipeline::Interactive {
            supervision: Supervision::Last,
            norm: Norm::L1,
        },
        Pipeline::Interactive {
            supervision: Supervision::Last,
            norm: Norm::L2,
        },
    ];

    pub fn label(&self) -> String {
        match self {
            Pipeline::OriginalAverage => "original avg-pool".into(),
            Pipeline::OriginalMax => "original max-pool".into(),
            Pipeline::Interactive { supervision, norm } => format!("{supervision} {norm}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub layer: String,
    pub configuration: String,
    pub test_accuracy: f64,
    pub train_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub dataset: ToyDatasetSpec,
    pub train: TrainOptions,
    pub layers: Vec<String>,
    pub rows: Vec<ReportRow>,
}

impl Report {
    /// Aligned plain-text table, accuracies in percent.
    pub fn to_text(&self) -> String {
        let lw = self.rows.iter().map(|r| r.layer.len()).max().unwrap_or(5).max(5);
        let cw = self
            .rows
            .iter()
            .map(|r| r.configuration.len())
            .max()
            .unwrap_or(13)
            .max(13);
        let mut s = String::new();
        let d = &self.dataset;
        writeln!(
            s,
            "# toy dataset seed={} classes={} train/test per class={}/{} image={}x{}",
            d.seed,
            d.classes,
            d.train_per_class,
            d.samples_per_class - d.train_per_class,
            d.width,
            d.height
        )
        .unwrap();
        writeln!(
            s,
            "# logistic regression C={} epochs={} lr={}",
            self.train.c, self.train.epochs, self.train.lr
        )
        .unwrap();
        writeln!(
            s,
            "{:<lw$}  {:<cw$}  {:>8}  {:>8}",
            "layer", "configuration", "test%", "train%"
        )
        .unwrap();
        for r in &self.rows {
            writeln!(
                s,
                "{:<lw$}  {:<cw$}  {:>8.2}  {:>8.2}",
                r.layer,
                r.configuration,
                100.0 * r.test_accuracy,
                100.0 * r.train_accuracy
            )
            .unwrap();
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is serializable")
    }
}

/// Features of one image for every `(layer, pipeline)` pair, in
/// `layers x Pipeline::ALL` order.
pub fn extract_features(model: &NetworkSpec, image: &RasterImage, targets: &[usize]) -> Result<Vec<Vec<f64>>> {
    let mean = vec![0.0; image.channels()];
    let x0 = to_input_tensor(image, &mean)?;
    let trace = model.forward(&x0)?;
    let mut out = Vec::with_capacity(targets.len() * Pipeline::ALL.len());
    for &t in targets {
        let x = trace.response(t)?;
        for p in Pipeline::ALL {
            let f = match p {
                Pipeline::OriginalAverage => x.spatial_average().into_inner(),
                Pipeline::OriginalMax => x.spatial_max().into_inner(),
                Pipeline::Interactive { supervision, norm } => {
                    let req = ActivenessRequest::new(t, supervision, norm);
                    neuron_activeness(model, &trace, &req)?.feature.into_inner()
                }
            };
            out.push(f);
        }
    }
    Ok(out)
}

/// Resolves layer names to response indices, checking each can be weighted.
pub fn resolve_layers(model: &NetworkSpec, layers: &[String]) -> Result<Vec<usize>> {
    if layers.is_empty() {
        return Err(Error::InvalidArgument("at least one layer is required".into()));
    }
    layers
        .iter()
        .map(|name| {
            let t = model
                .response_index(name)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown layer `{name}`")))?;
            ActivenessRequest::new(t, Supervision::Next, Norm::L1).supervision_layer(model)?;
            Ok(t)
        })
        .collect()
}

/// Trains and evaluates a classifier for every layer and pipeline.
///
/// Feature extraction runs in parallel over images on the current rayon
/// pool; results are gathered in image order, so the report does not depend
/// on the thread count.
pub fn compare_pipelines(
    dataset: &ToyDatasetSpec,
    model: &NetworkSpec,
    layers: &[String],
    train: &TrainOptions,
) -> Result<(Report, Vec<(String, LabeledFeatureSet)>)> {
    let targets = resolve_layers(model, layers)?;
    let input = model.input_shape();
    if (dataset.width, dataset.height) != (input.width, input.height) || input.depth != 3 {
        return Err(Error::InvalidArgument(format!(
            "toy images are {}x{}x3 but the model expects {input}",
            dataset.width, dataset.height
        )));
    }
    let samples = dataset.generate()?;
    log::info!(
        "extracting features for {} images at {} layers",
        samples.len(),
        targets.len()
    );
    let per_image: Vec<Vec<Vec<f64>>> = samples
        .par_iter()
        .map(|(img, _)| extract_features(model, img, &targets))
        .collect::<Result<_>>()?;
    let labels: Vec<usize> = samples.iter().map(|(_, l)| *l).collect();

    let mut rows = Vec::new();
    let mut sets = Vec::new();
    for (li, name) in layers.iter().enumerate() {
        for (pi, p) in Pipeline::ALL.iter().enumerate() {
            let col = li * Pipeline::ALL.len() + pi;
            let features = per_image.iter().map(|f| l2_normalize(&f[col])).collect();
            let set =
                LabeledFeatureSet::split_per_class(features, labels.clone(), dataset.classes, dataset.train_per_class)?;
            let lm = train_linear(&set, train)?;
            log::debug!("{name} {}: final loss {:?}", p.label(), lm.loss_history.last());
            rows.push(ReportRow {
                layer: name.clone(),
                configuration: p.label(),
                test_accuracy: lm.accuracy(&set, set.test()),
                train_accuracy: lm.accuracy(&set, set.train()),
            });
            sets.push((format!("{name}.{}", p.label().replace(' ', "_").replace('=', "")), set));
        }
    }
    let report = Report {
        dataset: *dataset,
        train: *train,
        layers: layers.to_vec(),
        rows,
    };
    Ok((report, sets))
}

/// Feature file: an ASCII header line `N D K`, then `N * D` little-endian
/// `f32` values row by row, then `N` little-endian `u32` labels.
pub fn encode_feature_file(features: &[Vec<f64>], labels: &[usize], classes: usize) -> Result<Vec<u8>> {
    if features.len() != labels.len() {
        return Err(Error::FeatureFormat("row and label counts differ".into()));
    }
    let d = features.first().map_or(0, Vec::len);
    if features.iter().any(|r| r.len() != d) {
        return Err(Error::FeatureFormat("rows have differing lengths".into()));
    }
    let mut out = format!("{} {} {}\n", features.len(), d, classes).into_bytes();
    for row in features {
        for &v in row {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    for &l in labels {
        let l = u32::try_from(l).map_err(|_| Error::FeatureFormat(format!("label {l} too large")))?;
        out.extend_from_slice(&l.to_le_bytes());
    }
    Ok(out)
}

/// Parsed feature file: rows, labels and class count.
pub fn decode_feature_file(bytes: &[u8]) -> Result<(Vec<Vec<f64>>, Vec<usize>, usize)> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::FeatureFormat("missing header line".into()))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| Error::FeatureFormat("header is not text".into()))?;
    let nums: Vec<usize> = header
        .split_whitespace()
        .map(|s| {
            s.parse()
                .map_err(|_| Error::FeatureFormat(format!("bad header `{header}`")))
        })
        .collect::<Result<_>>()?;
    let [n, d, k] = nums[..] else {
        return Err(Error::FeatureFormat(format!("header needs `N D K`, got `{header}`")));
    };
    let body = &bytes[nl + 1..];
    if body.len() != 4 * (n * d + n) {
        return Err(Error::FeatureFormat(format!(
            "payload is {} bytes, header implies {}",
            body.len(),
            4 * (n * d + n)
        )));
    }
    let words: Vec<[u8; 4]> = body.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]).collect();
    let features = (0..n)
        .map(|i| {
            words[i * d..(i + 1) * d]
                .iter()
                .map(|w| f32::from_le_bytes(*w) as f64)
                .collect()
        })
        .collect();
    let labels = words[n * d..].iter().map(|w| u32::from_le_bytes(*w) as usize).collect();
    Ok((features, labels, k))
}

pub fn write_feature_file(path: impl AsRef<Path>, set: &LabeledFeatureSet) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_feature_file(set.features(), set.labels(), set.classes())?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
