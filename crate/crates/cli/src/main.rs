//! `interactive`: model generation, activeness maps, gradient checks and the
//! toy benchmark.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage error, 3 I/O or
//! malformed input file.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use interactive_core::activeness::{neuron_activeness, ActivenessRequest, HopMode, Summarize};
use interactive_core::eval::{compare_pipelines, write_feature_file, ToyDatasetSpec, TrainOptions};
use interactive_core::image::{
    bilinear_resize, area_resize, read_image, to_input_tensor, write_image, RasterImage, DEFAULT_DIVISOR,
    DEFAULT_TARGET_AREA,
};
use interactive_core::model_io::{generate_named, load_model, save_model};
use interactive_core::oracle::{gradcheck, random_input, FdSettings};
use interactive_core::{Error, LayerKind, NetworkSpec, Norm, Supervision, Tensor3};

const FEATURE_MAGIC: &[u8; 8] = b"IAFEAT01";

#[derive(Parser, Debug)]
#[command(
    name = "interactive",
    version,
    about = "Inter-layer activeness propagation for small CNNs"
)]
struct Cli {
    /// Seed for model generation and sampling.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true, value_parser = clap::value_parser!(u16).range(1..))]
    threads: Option<u16>,

    /// More log output (-v info, -vv debug). INTERACTIVE_LOG overrides.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a seeded model from a built-in architecture template.
    GenModel(GenModelArgs),
    /// Compute activeness for one image and export a heatmap and feature.
    Activeness(ActivenessArgs),
    /// Compare the engine against finite differences and enumeration.
    Gradcheck(GradcheckArgs),
    /// Run the original-vs-activeness comparison on the synthetic dataset.
    Toybench(ToybenchArgs),
}

#[derive(Args, Debug)]
struct GenModelArgs {
    /// Template name (tiny-2conv, tiny-3conv, tiny-fc, toy-vgg).
    #[arg(long)]
    arch: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ResizeMode {
    /// Resize to the model's input size.
    Model,
    /// Area-preserving resize to multiples of 32, running the model at that size.
    Area,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ConfigArg {
    Last,
    Next,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SummarizeArg {
    Max,
    Average,
}

#[derive(Args, Debug)]
struct ActivenessArgs {
    #[arg(long)]
    model: PathBuf,
    /// Binary PPM (P6) or PGM (P5) image.
    #[arg(long)]
    image: PathBuf,
    /// Response to weight: a layer name, or `input`.
    #[arg(long)]
    layer: String,
    #[arg(long, value_enum, default_value = "last")]
    config: ConfigArg,
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..=2), default_value_t = 2)]
    p: u32,
    /// Output PGM of the channel-summed weighting map at the image's size.
    #[arg(long)]
    heatmap: Option<PathBuf>,
    /// Output binary feature vector.
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "model")]
    resize: ResizeMode,
    /// Value subtracted from every input channel.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    mean: f64,
    #[arg(long, value_enum, default_value = "max")]
    summarize: SummarizeArg,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long)]
    model: PathBuf,
    /// Connections to check, excluding kinks.
    #[arg(long, default_value_t = 200)]
    samples: usize,
    /// Drops the ReLU indicator in the connection hop; the check must fail.
    #[arg(long, hide = true)]
    corrupt_hop: bool,
}

#[derive(Args, Debug)]
struct ToybenchArgs {
    #[arg(long, default_value_t = ToyDatasetSpec::default().seed)]
    dataset_seed: u64,
    /// Model file; a toy-vgg model generated from --seed if omitted.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Comma-separated layer names.
    #[arg(long, value_delimiter = ',', default_value = "pool-1,pool-2,pool-3")]
    layers: Vec<String>,
    /// Plain-text report.
    #[arg(long)]
    out: PathBuf,
    /// Structured (JSON) report.
    #[arg(long)]
    json: Option<PathBuf>,
    /// Directory for one feature file per layer and configuration.
    #[arg(long)]
    features_dir: Option<PathBuf>,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Io(String),
    Verification(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Verification(_) => 1,
            Failure::Usage(_) => 2,
            Failure::Io(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Io(m) | Failure::Verification(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Io { .. } | Error::ModelFormat(_) | Error::ImageFormat(_) | Error::FeatureFormat(_) => {
                Failure::Io(e.to_string())
            }
            _ => Failure::Usage(e.to_string()),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn write_file(path: &Path, bytes: &[u8]) -> CmdResult {
    fs::write(path, bytes).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    init_logging(cli.verbose);
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n as usize).build_global() {
            log::warn!("could not configure thread pool: {e}");
        }
    }
    let result = match &cli.command {
        Command::GenModel(a) => gen_model(cli.seed, a),
        Command::Activeness(a) => activeness(a),
        Command::Gradcheck(a) => run_gradcheck(cli.seed, a),
        Command::Toybench(a) => toybench(cli.seed, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn init_logging(verbose: u8) {
    let default = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("INTERACTIVE_LOG", default))
        .format_timestamp(None)
        .init();
}

fn shape_table(spec: &NetworkSpec) -> String {
    let mut s = String::new();
    let width = spec.layers().iter().map(|l| l.name.len()).max().unwrap_or(0).max(5);
    writeln!(s, "{:<3}  {:<width$}  {:<4}  shape", "t", "layer", "kind").unwrap();
    writeln!(s, "{:<3}  {:<width$}  {:<4}  {}", 0, "input", "", spec.input_shape()).unwrap();
    for (i, (layer, shape)) in spec.layers().iter().zip(spec.infer_shapes()).enumerate() {
        let kind = match layer.kind {
            LayerKind::Conv(_) => "conv",
            LayerKind::Pool(_) => "pool",
        };
        writeln!(s, "{:<3}  {:<width$}  {:<4}  {}", i + 1, layer.name, kind, shape).unwrap();
    }
    s
}

fn gen_model(seed: u64, args: &GenModelArgs) -> CmdResult {
    let spec = generate_named(&args.arch, seed)?;
    save_model(&spec, &args.out)?;
    print!("{}", shape_table(&spec));
    Ok(())
}

/// Upsamples a `W x H x 1` map to `width x height` and min-max scales it to
/// 8 bits; a constant map becomes uniform 128.
fn heatmap(map2d: &Tensor3, width: usize, height: usize) -> Result<RasterImage, Failure> {
    let (mw, mh) = (map2d.width(), map2d.height());
    let plane: Vec<f64> = (0..mh)
        .flat_map(|y| (0..mw).map(move |x| (x, y)))
        .map(|(x, y)| map2d.get(x, y, 0))
        .collect();
    let up = bilinear_resize(&plane, mw, mh, width, height);
    let lo = up.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = up.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let pixels = if hi > lo {
        up.iter()
            .map(|v| (255.0 * (v - lo) / (hi - lo)).round() as u8)
            .collect()
    } else {
        vec![128; width * height]
    };
    Ok(RasterImage::new(width, height, 1, pixels)?)
}

fn encode_feature(values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * values.len());
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&(values.len() as u32).to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

fn activeness(args: &ActivenessArgs) -> CmdResult {
    let model = load_model(&args.model)?;
    let original = read_image(&args.image)?;
    let depth = model.input_shape().depth;
    let img = match (original.channels(), depth) {
        (c, d) if c == d => original.clone(),
        (1, 3) => original.to_rgb(),
        (c, d) => {
            return Err(Failure::Usage(format!(
                "image has {c} channels but the model expects {d}"
            )))
        }
    };
    let t = model.response_index(&args.layer).ok_or_else(|| {
        let names: Vec<&str> = (0..=model.depth()).filter_map(|t| model.response_name(t)).collect();
        Failure::Usage(format!(
            "unknown layer `{}` (available: {})",
            args.layer,
            names.join(", ")
        ))
    })?;
    let (model, img) = match args.resize {
        ResizeMode::Model => {
            let s = model.input_shape();
            let img = img.resize(s.width, s.height)?;
            (model, img)
        }
        ResizeMode::Area => {
            let img = area_resize(&img, DEFAULT_TARGET_AREA, DEFAULT_DIVISOR)?;
            (model.with_input_size(img.width(), img.height())?, img)
        }
    };
    let supervision = match args.config {
        ConfigArg::Last => Supervision::Last,
        ConfigArg::Next => Supervision::Next,
    };
    let summarize = match args.summarize {
        SummarizeArg::Max => Summarize::Max,
        SummarizeArg::Average => Summarize::Average,
    };
    let request = ActivenessRequest::new(t, supervision, Norm::try_from(args.p)?).with_summarize(summarize);
    let top = request.supervision_layer(&model)?;

    let x0 = to_input_tensor(&img, &vec![args.mean; img.channels()])?;
    let trace = model.forward(&x0)?;
    let result = neuron_activeness(&model, &trace, &request)?;
    log::info!("input resized to {}x{}", img.width(), img.height());

    if let Some(path) = &args.heatmap {
        write_image(&heatmap(&result.map2d, original.width(), original.height())?, path)?;
    }
    if let Some(path) = &args.features {
        write_file(path, &encode_feature(result.feature.values()))?;
    }
    println!(
        "layer {} (t={t}) {} supervised by {} (T={top}), {}",
        args.layer,
        result.gamma.shape(),
        model.response_name(top).unwrap_or("?"),
        request.norm
    );
    println!("ln f = {:.9e}", result.log_likelihood);
    println!("feature dimension {}", result.feature.depth());
    Ok(())
}

fn run_gradcheck(seed: u64, args: &GradcheckArgs) -> CmdResult {
    if args.samples == 0 {
        return Err(Failure::Usage("--samples must be at least 1".into()));
    }
    let model = load_model(&args.model)?;
    let x0 = random_input(model.input_shape(), seed)?;
    let mode = if args.corrupt_hop {
        HopMode::DropReluIndicator
    } else {
        HopMode::Faithful
    };
    let settings = FdSettings::default();
    let report = gradcheck(&model, &x0, args.samples, seed, &settings, mode)?;
    println!(
        "connections checked: {} (kinks skipped: {})",
        report.checked, report.kinks_skipped
    );
    println!(
        "max relative error:  {:.3e} (tolerance {:.0e})",
        report.max_rel_error, report.rel_tol
    );
    if let Some(w) = &report.worst {
        println!("worst:               {w}");
    }
    println!(
        "gamma vs enumeration: {:.3e} max abs diff over {} configurations (tolerance {:.0e})",
        report.max_gamma_abs_diff, report.gamma_configs, report.gamma_tol
    );
    if report.passed() {
        println!("PASS");
        Ok(())
    } else if report.checked < args.samples {
        Err(Failure::Verification(format!(
            "only {} of {} connections were away from kinks",
            report.checked, args.samples
        )))
    } else {
        println!("FAIL");
        Err(Failure::Verification(
            "engine disagrees with the reference computations".into(),
        ))
    }
}

fn toybench(seed: u64, args: &ToybenchArgs) -> CmdResult {
    let model = match &args.model {
        Some(path) => load_model(path)?,
        None => generate_named("toy-vgg", seed)?,
    };
    let dataset = ToyDatasetSpec {
        seed: args.dataset_seed,
        ..ToyDatasetSpec::default()
    };
    let (report, sets) = compare_pipelines(&dataset, &model, &args.layers, &TrainOptions::default())?;
    write_file(&args.out, report.to_text().as_bytes())?;
    if let Some(path) = &args.json {
        write_file(path, report.to_json().as_bytes())?;
    }
    if let Some(dir) = &args.features_dir {
        fs::create_dir_all(dir).map_err(|e| Failure::Io(format!("{}: {e}", dir.display())))?;
        for (name, set) in &sets {
            write_feature_file(dir.join(format!("{name}.feat")), set)?;
        }
    }
    print!("{}", report.to_text());
    Ok(())
}
