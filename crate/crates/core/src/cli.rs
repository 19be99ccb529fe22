//! Command-line front end. [`run`] maps outcomes to exit codes: 0 on success, 2 on
//! configuration or input errors (including usage errors), 3 when the flow stops before
//! reaching its entropy threshold.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::clustering::{MeanKind, PrototypeDictionary};
use crate::error::{Error, Result};
use crate::features::{ingest_scores, DescriptorConfig, DistanceMatrix, Volume};
use crate::io::{read_distances, read_labels, read_matrix, read_volume, write_labels, write_volume, LabelRunInfo};
use crate::metrics::MetricsReport;
use crate::ordering::PairWindow;
use crate::phantom::{generate_phantom, InclusionConfig, PhantomConfig};
use crate::pipeline::{segment, segment_distances, train_dictionary, SegmentConfig, SegmentOutcome, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NOT_CONVERGED: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "layerflow", version, about = "Order-preserving segmentation of layered volumes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic layered volume and its labels (`<out>.vol.*`, `<out>.lbl.*`).
    Phantom(PhantomArgs),
    /// Learn per-layer prototypes from a labeled volume.
    Train(TrainArgs),
    /// Label a volume with the (ordered) assignment flow.
    Segment(SegmentArgs),
    /// Compare a labeling with ground truth and write a JSON report.
    Evaluate(EvaluateArgs),
}

fn parse_list<T: std::str::FromStr>(s: &str) -> std::result::Result<Vec<T>, String> {
    s.split(',')
        .map(|v| v.trim().parse::<T>().map_err(|_| format!("cannot parse '{v}'")))
        .collect()
}

fn parse_dims(s: &str) -> std::result::Result<[usize; 3], String> {
    let v: Vec<usize> = parse_list(s)?;
    v.try_into().map_err(|_| "expected three comma-separated sizes N,NA,NB".to_string())
}

#[derive(Args, Debug)]
struct PhantomArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = parse_dims, default_value = "64,64,8")]
    dims: [usize; 3],
    #[arg(long, default_value_t = 6)]
    layers: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    speckle: Option<f64>,
    /// Largest boundary displacement in voxels.
    #[arg(long)]
    amplitude: Option<f64>,
    /// Comma-separated mean intensity per layer.
    #[arg(long, value_delimiter = ',')]
    means: Option<Vec<f64>>,
    /// Number of blobs that mimic another layer's intensity.
    #[arg(long, default_value_t = 0)]
    inclusions: usize,
}

#[derive(Args, Debug)]
struct DescriptorArgs {
    /// Comma-separated derivative scales.
    #[arg(long, value_delimiter = ',')]
    scales: Option<Vec<f64>>,
}

impl DescriptorArgs {
    fn config(&self) -> DescriptorConfig {
        let mut cfg = DescriptorConfig::default();
        if let Some(s) = &self.scales {
            cfg.scales = s.clone();
        }
        cfg
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    volume: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "stein")]
    mean: MeanKind,
    /// Descriptors drawn per layer.
    #[arg(long, default_value_t = 400)]
    samples: usize,
    #[command(flatten)]
    descriptor: DescriptorArgs,
}

#[derive(Args, Debug)]
struct SegmentArgs {
    #[arg(long)]
    volume: Option<PathBuf>,
    #[arg(long)]
    dict: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, overrides_with = "no_ordered")]
    ordered: bool,
    #[arg(long = "no-ordered", overrides_with = "ordered")]
    no_ordered: bool,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    step: Option<f64>,
    /// Pair window: "full" or the largest depth offset of a penalized pair.
    #[arg(long)]
    window: Option<PairWindow>,
    #[arg(long = "entropy-threshold")]
    entropy_threshold: Option<f64>,
    #[arg(long = "max-steps")]
    max_steps: Option<usize>,
    #[arg(long = "ordering-weight")]
    ordering_weight: Option<f64>,
    /// Precomputed distance matrix; skips feature extraction.
    #[arg(long, conflicts_with = "scores")]
    distances: Option<PathBuf>,
    /// Class scores (higher is better), turned into distances.
    #[arg(long)]
    scores: Option<PathBuf>,
    /// Grid size when no volume is given alongside distances or scores.
    #[arg(long, value_parser = parse_dims)]
    dims: Option<[usize; 3]>,
    #[command(flatten)]
    descriptor: DescriptorArgs,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    #[arg(long)]
    report: PathBuf,
}

/// Parses `args` (program name first) and executes the command.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_configuration() {
                EXIT_CONFIG
            } else {
                EXIT_NOT_CONVERGED
            }
        }
    }
}

fn execute(command: Command) -> Result<i32> {
    match command {
        Command::Phantom(a) => phantom(a),
        Command::Train(a) => train(a),
        Command::Segment(a) => segment_cmd(a),
        Command::Evaluate(a) => evaluate(a),
    }
}

fn phantom(a: PhantomArgs) -> Result<i32> {
    let defaults = PhantomConfig::default();
    let cfg = PhantomConfig {
        dims: a.dims,
        layers: a.layers,
        amplitude: a.amplitude.unwrap_or(defaults.amplitude),
        means: a.means.unwrap_or_default(),
        noise: a.noise.unwrap_or(defaults.noise),
        speckle: a.speckle.unwrap_or(defaults.speckle),
        seed: a.seed,
        inclusions: (a.inclusions > 0).then(|| InclusionConfig {
            count: a.inclusions,
            ..InclusionConfig::default()
        }),
        ..defaults
    };
    let (vol, labels) = generate_phantom::<f64>(&cfg)?;
    write_volume(&a.out, &vol)?;
    write_labels(&a.out, &labels, LabelRunInfo::default())?;
    Ok(EXIT_OK)
}

fn train(a: TrainArgs) -> Result<i32> {
    let vol: Volume<f64> = read_volume(&a.volume)?;
    let (labels, _) = read_labels(&a.labels)?;
    let cfg = TrainConfig {
        k: a.k,
        seed: a.seed,
        mean: a.mean,
        samples_per_layer: a.samples,
        descriptor: a.descriptor.config(),
        ..TrainConfig::default()
    };
    train_dictionary(&vol, &labels, &cfg)?.save(&a.out)?;
    Ok(EXIT_OK)
}

fn resolve_dims(volume: Option<&Volume<f64>>, dims: Option<[usize; 3]>) -> Result<[usize; 3]> {
    match (volume.map(Volume::dims), dims) {
        (Some(v), Some(d)) if v != d => Err(Error::InvalidDimension(format!(
            "--dims {d:?} differ from volume dims {v:?}"
        ))),
        (Some(v), _) => Ok(v),
        (None, Some(d)) => Ok(d),
        (None, None) => Err(Error::Config("--volume or --dims is required".into())),
    }
}

fn segment_cmd(a: SegmentArgs) -> Result<i32> {
    let mut cfg = SegmentConfig::<f64> {
        descriptor: a.descriptor.config(),
        ordered: !a.no_ordered,
        ..SegmentConfig::default()
    };
    let f = &mut cfg.flow;
    if let Some(v) = a.rho {
        f.rho = v;
    }
    if let Some(v) = a.gamma {
        f.gamma = v;
    }
    if let Some(v) = a.step {
        f.step = v;
    }
    if let Some(v) = a.window {
        f.window = v;
    }
    if let Some(v) = a.entropy_threshold {
        f.entropy_threshold = Some(v);
    }
    if let Some(v) = a.max_steps {
        f.max_steps = v;
    }
    if let Some(v) = a.ordering_weight {
        f.ordering_weight = v;
    }
    let volume: Option<Volume<f64>> = a.volume.as_deref().map(read_volume).transpose()?;
    let precomputed: Option<DistanceMatrix<f64>> = match (&a.distances, &a.scores) {
        (Some(p), _) => Some(read_distances(p)?),
        (None, Some(p)) => {
            let (n, c, s) = read_matrix(p)?;
            Some(ingest_scores(n, c, &s)?)
        }
        (None, None) => None,
    };
    let outcome: SegmentOutcome<f64> = match precomputed {
        Some(d) => {
            let dims = resolve_dims(volume.as_ref(), a.dims)?;
            if let Some(path) = &a.dict {
                check_dictionary_layers(path, d.c())?;
            }
            segment_distances(dims, d, &cfg)?
        }
        None => {
            let vol = volume.ok_or_else(|| Error::Config("--volume is required without --distances or --scores".into()))?;
            resolve_dims(Some(&vol), a.dims)?;
            let path = a.dict.ok_or_else(|| Error::Config("--dict is required without --distances or --scores".into()))?;
            let dict = PrototypeDictionary::<f64>::load(&path)?;
            segment(&vol, &dict, &cfg)?
        }
    };
    let converged = outcome.trace.converged;
    write_labels(
        &a.out,
        &outcome.labels,
        LabelRunInfo {
            converged: Some(converged),
            runtime_s: Some(outcome.runtime_s),
        },
    )?;
    if converged {
        Ok(EXIT_OK)
    } else {
        eprintln!(
            "flow stopped after {} steps above the entropy threshold",
            outcome.trace.records.len()
        );
        Ok(EXIT_NOT_CONVERGED)
    }
}

fn check_dictionary_layers(path: &Path, c: usize) -> Result<()> {
    let dict = PrototypeDictionary::<f64>::load(path)?;
    if dict.layer_count() != c {
        return Err(Error::InvalidDimension(format!(
            "dictionary has {} layers, distances have {c} columns",
            dict.layer_count()
        )));
    }
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<i32> {
    let (pred, info) = read_labels(&a.pred)?;
    let (truth, _) = read_labels(&a.truth)?;
    let report = MetricsReport::evaluate(
        &pred,
        &truth,
        info.runtime_s.unwrap_or(0.0),
        info.converged.unwrap_or(true),
    )?;
    report.write(&a.report)?;
    Ok(EXIT_OK)
}
