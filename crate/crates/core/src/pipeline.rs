//! End-to-end orchestration: prototype training on labeled volumes and segmentation.

use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::clustering::{kmeans_stein_with_trace, MeanKind, PrototypeDictionary};
use crate::error::{Error, Result};
use crate::features::{build_distance_matrix, descriptors_at, feature_vector_field, DescriptorConfig, DistanceMatrix, Volume};
use crate::flow::{integrate, round_labels, FlowConfig, FlowTrace, NeighborhoodGraph};
use crate::metrics::LabeledVolume;
use crate::ordering::grid_ascans;
use crate::scalar::Real;
use crate::spd::MeanConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig<T> {
    /// Prototypes per layer.
    pub k: usize,
    pub seed: u64,
    pub mean: MeanKind,
    /// Descriptors drawn at random from each layer; all of them if the layer is smaller.
    pub samples_per_layer: usize,
    pub descriptor: DescriptorConfig,
    pub mean_config: MeanConfig<T>,
}

impl<T: Real> Default for TrainConfig<T> {
    fn default() -> Self {
        Self {
            k: 8,
            seed: 0,
            mean: MeanKind::Stein,
            samples_per_layer: 400,
            descriptor: DescriptorConfig::default(),
            mean_config: MeanConfig::default(),
        }
    }
}

/// Clusters descriptors of each labeled layer into `k` prototypes.
pub fn train_dictionary<T: Real>(
    vol: &Volume<T>,
    labels: &LabeledVolume,
    config: &TrainConfig<T>,
) -> Result<PrototypeDictionary<T>> {
    if vol.dims() != labels.dims() {
        return Err(Error::InvalidDimension(format!(
            "volume dims {:?} differ from label dims {:?}",
            vol.dims(),
            labels.dims()
        )));
    }
    if config.samples_per_layer < config.k {
        return Err(Error::Config(format!(
            "{} samples per layer cannot support {} prototypes",
            config.samples_per_layer, config.k
        )));
    }
    let features = feature_vector_field(vol, &config.descriptor.scales)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut layers = Vec::with_capacity(labels.c());
    for l in 0..labels.c() {
        let members: Vec<usize> = (0..labels.as_slice().len())
            .filter(|&i| labels.as_slice()[i] as usize == l)
            .collect();
        if members.len() < config.k {
            return Err(Error::Precondition(format!(
                "layer {l} has {} voxels, fewer than {} prototypes",
                members.len(),
                config.k
            )));
        }
        let chosen: Vec<usize> = if members.len() <= config.samples_per_layer {
            members
        } else {
            let mut picks = sample(&mut rng, members.len(), config.samples_per_layer).into_vec();
            picks.sort_unstable();
            picks.into_iter().map(|p| members[p]).collect()
        };
        let descriptors = descriptors_at(&features, &chosen, &config.descriptor)?;
        let seed = config.seed.wrapping_add(l as u64 + 1);
        let outcome = kmeans_stein_with_trace(&descriptors, config.k, seed, &config.mean_config, config.mean)?;
        layers.push(outcome.centers);
    }
    PrototypeDictionary::new(layers)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentConfig<T> {
    pub descriptor: DescriptorConfig,
    pub flow: FlowConfig<T>,
    pub ordered: bool,
}

impl<T: Real> Default for SegmentConfig<T> {
    fn default() -> Self {
        Self {
            descriptor: DescriptorConfig::default(),
            flow: FlowConfig::default(),
            ordered: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SegmentOutcome<T> {
    pub labels: LabeledVolume,
    pub distances: DistanceMatrix<T>,
    pub trace: FlowTrace,
    pub runtime_s: f64,
}

/// Features, prototype distances, flow and rounding.
pub fn segment<T: Real>(
    vol: &Volume<T>,
    dict: &PrototypeDictionary<T>,
    config: &SegmentConfig<T>,
) -> Result<SegmentOutcome<T>> {
    let start = Instant::now();
    config.flow.validate(dict.layer_count())?;
    let distances = build_distance_matrix(vol, dict, &config.descriptor)?;
    let mut out = segment_distances(vol.dims(), distances, config)?;
    out.runtime_s = start.elapsed().as_secs_f64();
    Ok(out)
}

/// Flow and rounding on a precomputed distance matrix laid out depth-fastest over `dims`.
pub fn segment_distances<T: Real>(
    dims: [usize; 3],
    distances: DistanceMatrix<T>,
    config: &SegmentConfig<T>,
) -> Result<SegmentOutcome<T>> {
    let start = Instant::now();
    let n: usize = dims.iter().product();
    if distances.n() != n {
        return Err(Error::InvalidDimension(format!(
            "distance matrix has {} rows but dims {dims:?} hold {n} voxels",
            distances.n()
        )));
    }
    let graph = NeighborhoodGraph::grid(dims, config.flow.neighborhood)?;
    let ascans = grid_ascans(dims);
    let (w, trace) = integrate(&distances, &graph, &ascans, &config.flow, config.ordered)?;
    let labels = LabeledVolume::from_indices(dims, distances.c(), &round_labels(&w))?;
    Ok(SegmentOutcome {
        labels,
        distances,
        trace,
        runtime_s: start.elapsed().as_secs_f64(),
    })
}

/// Per-voxel label of smallest distance, ties to the smaller label.
pub fn nearest_labels<T: Real>(dims: [usize; 3], distances: &DistanceMatrix<T>) -> Result<LabeledVolume> {
    let labels: Vec<usize> = (0..distances.n())
        .map(|i| {
            let row = distances.row(i);
            let mut best = 0;
            for (k, &v) in row.iter().enumerate().skip(1) {
                if v < row[best] {
                    best = k;
                }
            }
            best
        })
        .collect();
    LabeledVolume::from_indices(dims, distances.c(), &labels)
}
