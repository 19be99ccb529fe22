//! Per-layer prototype dictionaries from labeled SPD descriptors: Lloyd iterations and a
//! soft mixture model, both under the Stein divergence.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::scalar::Real;
use crate::spd::{
    log_euclidean_mean, riemannian_iterate, stein_divergence_with_logdets, stein_iterate,
    MeanConfig, SpdMatrix, WeightedSample,
};

/// Which mean recomputes a cluster center.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MeanKind {
    #[default]
    Stein,
    Riemannian,
    LogEuclidean,
}

impl std::str::FromStr for MeanKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stein" => Ok(Self::Stein),
            "riemannian" => Ok(Self::Riemannian),
            "logeuclid" => Ok(Self::LogEuclidean),
            other => Err(Error::Config(format!("unknown mean kind '{other}'"))),
        }
    }
}

/// Best-effort weighted mean: an unconverged iterate is still returned, since callers only
/// accept it when it improves their objective.
fn center_of<T: Real>(
    samples: &[WeightedSample<T>],
    kind: MeanKind,
    config: &MeanConfig<T>,
) -> Result<SpdMatrix<T>> {
    match kind {
        MeanKind::Stein => Ok(stein_iterate(samples, config)?.0.mean),
        MeanKind::Riemannian => Ok(riemannian_iterate(samples, config)?.0.mean),
        MeanKind::LogEuclidean => log_euclidean_mean(samples),
    }
}

/// SPD matrix with its cached log-determinant.
#[derive(Clone, Debug)]
struct Point<T> {
    m: SpdMatrix<T>,
    logdet: T,
}

impl<T: Real> Point<T> {
    fn new(m: SpdMatrix<T>) -> Self {
        let logdet = m.log_det();
        Self { m, logdet }
    }

    fn div(&self, other: &Self) -> T {
        stein_divergence_with_logdets(&self.m, self.logdet, &other.m, other.logdet)
    }
}

/// Index and divergence of the nearest center; ties go to the smaller index.
fn nearest<T: Real>(x: &Point<T>, centers: &[Point<T>]) -> (usize, T) {
    let mut best = (0, x.div(&centers[0]));
    for (j, c) in centers.iter().enumerate().skip(1) {
        let d = x.div(c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// k-means++ seeding with the Stein divergence in place of the squared distance.
fn seed_centers<T: Real>(points: &[Point<T>], k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = points.len();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut best: Vec<f64> = points
        .par_iter()
        .map(|p| p.div(&points[chosen[0]]).as_f64())
        .collect();
    while chosen.len() < k {
        let total: f64 = best.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &b) in best.iter().enumerate() {
                if b > 0.0 {
                    pick = Some(i);
                    if target < b {
                        break;
                    }
                    target -= b;
                }
            }
            pick.expect("positive total implies a positive entry")
        } else {
            // every remaining point coincides with a center; take any unused index
            let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen.push(next);
        let c = &points[next];
        best.par_iter_mut().zip(points).for_each(|(b, p)| {
            *b = b.min(p.div(c).as_f64());
        });
    }
    chosen
}

/// Outcome of [`kmeans_stein_with_trace`].
#[derive(Clone, Debug)]
pub struct KMeansOutcome<T> {
    pub centers: Vec<SpdMatrix<T>>,
    pub assignments: Vec<usize>,
    /// Mean Stein divergence to the assigned center, recorded after the initial
    /// assignment and after every Lloyd iteration.
    pub objective: Vec<T>,
}

/// Termination settings for the Lloyd iteration.
const LLOYD_REL_TOL: f64 = 1e-6;
const LLOYD_MAX_ITERS: usize = 100;

/// Hard clustering of `samples` into `k` Stein-mean prototypes.
pub fn kmeans_stein<T: Real>(
    samples: &[SpdMatrix<T>],
    k: usize,
    seed: u64,
    config: &MeanConfig<T>,
) -> Result<Vec<SpdMatrix<T>>> {
    Ok(kmeans_stein_with_trace(samples, k, seed, config, MeanKind::Stein)?.centers)
}

fn check_inputs<T: Real>(samples: &[SpdMatrix<T>], k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Config("cluster count must be at least 1".into()));
    }
    if k > samples.len() {
        return Err(Error::Precondition(format!(
            "{k} clusters requested from {} samples",
            samples.len()
        )));
    }
    let d = samples[0].dim();
    if samples.iter().any(|s| s.dim() != d) {
        return Err(Error::InvalidDimension("samples of unequal dimension".into()));
    }
    Ok(())
}

/// Lloyd iteration with nearest-center assignment and `kind` means. A recomputed center
/// replaces the old one only if it lowers its cluster's objective, so the recorded
/// objective never increases. An emptied cluster is re-seeded at the sample farthest
/// from its assigned center.
pub fn kmeans_stein_with_trace<T: Real>(
    samples: &[SpdMatrix<T>],
    k: usize,
    seed: u64,
    config: &MeanConfig<T>,
    kind: MeanKind,
) -> Result<KMeansOutcome<T>> {
    check_inputs(samples, k)?;
    config.validate()?;
    let points: Vec<Point<T>> = samples.par_iter().cloned().map(Point::new).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers: Vec<Point<T>> = seed_centers(&points, k, &mut rng)
        .into_iter()
        .map(|i| points[i].clone())
        .collect();

    let n = T::lit(points.len() as f64);
    let (mut assignments, mut dists) = assign(&points, &mut centers);
    let mut objective = vec![dists.iter().copied().sum::<T>() / n];

    for _ in 0..LLOYD_MAX_ITERS {
        let updated: Vec<Result<Option<Point<T>>>> = (0..k)
            .into_par_iter()
            .map(|j| {
                let members: Vec<usize> = (0..points.len()).filter(|&i| assignments[i] == j).collect();
                if members.len() <= 1 {
                    return Ok(None);
                }
                let mats: Vec<SpdMatrix<T>> = members.iter().map(|&i| points[i].m.clone()).collect();
                let cand = Point::new(center_of(&WeightedSample::uniform(&mats), kind, config)?);
                let old: T = members.iter().map(|&i| dists[i]).sum();
                let new: T = members.iter().map(|&i| points[i].div(&cand)).sum();
                Ok((new < old).then_some(cand))
            })
            .collect();
        for (j, u) in updated.into_iter().enumerate() {
            if let Some(c) = u? {
                centers[j] = c;
            }
        }
        let (a, d) = assign(&points, &mut centers);
        assignments = a;
        dists = d;
        let obj = dists.iter().copied().sum::<T>() / n;
        let prev = *objective.last().expect("objective is nonempty");
        objective.push(obj);
        if prev <= T::zero() || (prev - obj) / prev < T::lit(LLOYD_REL_TOL) {
            break;
        }
    }

    Ok(KMeansOutcome {
        centers: centers.into_iter().map(|c| c.m).collect(),
        assignments,
        objective,
    })
}

/// Nearest-center assignment; empty clusters are re-seeded until none remain.
fn assign<T: Real>(points: &[Point<T>], centers: &mut [Point<T>]) -> (Vec<usize>, Vec<T>) {
    loop {
        let (assignments, dists): (Vec<usize>, Vec<T>) =
            points.par_iter().map(|p| nearest(p, centers)).unzip();
        let mut counts = vec![0usize; centers.len()];
        for &a in &assignments {
            counts[a] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return (assignments, dists);
        };
        // farthest sample from its center, ties to the smaller index; it must not be
        // the sole member of its own cluster or that cluster would empty in turn
        let mut far = None;
        for (i, &d) in dists.iter().enumerate() {
            if counts[assignments[i]] > 1 && far.is_none_or(|(_, fd)| d > fd) {
                far = Some((i, d));
            }
        }
        let (i, _) = far.expect("k <= n leaves a cluster with two members");
        centers[empty] = points[i].clone();
    }
}

/// Soft clustering state.
#[derive(Clone, Debug)]
pub struct MixtureState<T> {
    pub weights: Vec<T>,
    pub means: Vec<SpdMatrix<T>>,
    /// Row-major `N × K` responsibilities.
    pub responsibilities: Vec<T>,
    pub k: usize,
    pub iterations: usize,
}

impl<T: Real> MixtureState<T> {
    pub fn responsibility_row(&self, i: usize) -> &[T] {
        &self.responsibilities[i * self.k..(i + 1) * self.k]
    }
}

const EM_MAX_ITERS: usize = 100;
const EM_REL_TOL: f64 = 1e-8;
/// Responsibilities below this take no part in a weighted mean.
const EM_WEIGHT_FLOOR: f64 = 1e-12;

/// Expectation-maximization for the mixture `p(S) ∝ Σ_j π_j exp(−D_S(S, S̃_j))`,
/// initialized from [`kmeans_stein`] with uniform mixture weights.
pub fn em_soft_clustering<T: Real>(
    samples: &[SpdMatrix<T>],
    k: usize,
    seed: u64,
    config: &MeanConfig<T>,
) -> Result<MixtureState<T>> {
    check_inputs(samples, k)?;
    let init = kmeans_stein_with_trace(samples, k, seed, config, MeanKind::Stein)?;
    let points: Vec<Point<T>> = samples.par_iter().cloned().map(Point::new).collect();
    let mut means: Vec<Point<T>> = init.centers.into_iter().map(Point::new).collect();
    let mut weights = vec![T::one() / T::lit(k as f64); k];
    let n = points.len();
    let mut resp = vec![T::zero(); n * k];
    let mut prev_ll: Option<T> = None;
    let mut iterations = 0;

    for it in 0..EM_MAX_ITERS {
        iterations = it + 1;
        let ll = e_step(&points, &means, &weights, &mut resp);
        let converged = prev_ll.is_some_and(|p| (ll - p).abs() <= T::lit(EM_REL_TOL) * p.abs().max(T::one()));
        if converged {
            break;
        }
        prev_ll = Some(ll);

        for (j, w) in weights.iter_mut().enumerate() {
            *w = (0..n).map(|i| resp[i * k + j]).sum::<T>() / T::lit(n as f64);
        }
        let updated: Vec<Result<Option<Point<T>>>> = (0..k)
            .into_par_iter()
            .map(|j| {
                let (mats, ws): (Vec<SpdMatrix<T>>, Vec<T>) = (0..n)
                    .filter(|&i| resp[i * k + j] > T::lit(EM_WEIGHT_FLOOR))
                    .map(|i| (points[i].m.clone(), resp[i * k + j]))
                    .unzip();
                if mats.is_empty() {
                    return Ok(None);
                }
                let samples = WeightedSample::weighted(&mats, &ws)?;
                Ok(Some(Point::new(stein_iterate(&samples, config)?.0.mean)))
            })
            .collect();
        for (j, u) in updated.into_iter().enumerate() {
            if let Some(m) = u? {
                means[j] = m;
            }
        }
    }
    e_step(&points, &means, &weights, &mut resp);

    Ok(MixtureState {
        weights,
        means: means.into_iter().map(|p| p.m).collect(),
        responsibilities: resp,
        k,
        iterations,
    })
}

/// Fills responsibilities by log-sum-exp normalization; returns the log-likelihood.
fn e_step<T: Real>(points: &[Point<T>], means: &[Point<T>], weights: &[T], resp: &mut [T]) -> T {
    let k = means.len();
    let lls: Vec<T> = resp
        .par_chunks_mut(k)
        .zip(points)
        .map(|(row, p)| {
            for (j, r) in row.iter_mut().enumerate() {
                *r = if weights[j] > T::zero() {
                    weights[j].ln() - p.div(&means[j])
                } else {
                    T::neg_infinity()
                };
            }
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let s: T = row.iter().map(|&v| (v - mx).exp()).sum();
            let lse = mx + s.ln();
            for r in row.iter_mut() {
                *r = (*r - lse).exp();
            }
            lse
        })
        .collect();
    lls.into_iter().sum()
}

/// Per-layer prototype lists.
#[derive(Clone, Debug)]
pub struct PrototypeDictionary<T> {
    layers: Vec<Vec<SpdMatrix<T>>>,
    logdets: Vec<Vec<T>>,
    dim: usize,
}

impl<T: Real> PrototypeDictionary<T> {
    pub fn new(layers: Vec<Vec<SpdMatrix<T>>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("dictionary needs at least one layer".into()));
        }
        if let Some(l) = layers.iter().position(|p| p.is_empty()) {
            return Err(Error::Config(format!("layer {l} has no prototypes")));
        }
        let dim = layers[0][0].dim();
        if layers.iter().flatten().any(|p| p.dim() != dim) {
            return Err(Error::InvalidDimension("prototypes of unequal dimension".into()));
        }
        let logdets = layers
            .iter()
            .map(|l| l.iter().map(SpdMatrix::log_det).collect())
            .collect();
        Ok(Self { layers, logdets, dim })
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn layer(&self, l: usize) -> &[SpdMatrix<T>] {
        &self.layers[l]
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.layers.iter().map(Vec::len).collect()
    }

    /// Writes the JSON manifest at `path` and the little-endian f64 blob next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        let blob_path = crate::io::companion_path(path, "bin");
        let manifest = DictionaryManifest {
            layer_count: self.layer_count(),
            dims: self.dim,
            k_per_layer: self.sizes(),
            dtype: "f64".into(),
            layout: "row-major".into(),
            blob: blob_path
                .file_name()
                .map(|f| f.to_string_lossy().into_owned())
                .unwrap_or_default(),
        };
        let mut bytes = Vec::with_capacity(self.layers.iter().flatten().count() * self.dim * self.dim * 8);
        for p in self.layers.iter().flatten() {
            for &v in p.as_mat().as_slice() {
                bytes.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        }
        fs::write(&blob_path, bytes)?;
        fs::write(path, serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let manifest: DictionaryManifest = serde_json::from_str(&fs::read_to_string(path)?)?;
        if manifest.dtype != "f64" {
            return Err(Error::Format(format!("unsupported dictionary dtype '{}'", manifest.dtype)));
        }
        if manifest.k_per_layer.len() != manifest.layer_count {
            return Err(Error::Format("k_per_layer length differs from layer_count".into()));
        }
        let blob_path: PathBuf = if manifest.blob.is_empty() {
            crate::io::companion_path(path, "bin")
        } else {
            path.with_file_name(&manifest.blob)
        };
        let bytes = fs::read(&blob_path)?;
        let d = manifest.dims;
        let total: usize = manifest.k_per_layer.iter().sum();
        if bytes.len() != total * d * d * 8 {
            return Err(Error::Format(format!(
                "dictionary blob has {} bytes, expected {}",
                bytes.len(),
                total * d * d * 8
            )));
        }
        let mut values = bytes
            .chunks_exact(8)
            .map(|b| T::lit(f64::from_le_bytes(b.try_into().expect("chunk of 8"))));
        let mut layers = Vec::with_capacity(manifest.layer_count);
        for &k in &manifest.k_per_layer {
            let mut protos = Vec::with_capacity(k);
            for _ in 0..k {
                let data: Vec<T> = values.by_ref().take(d * d).collect();
                protos.push(SpdMatrix::new(Mat::from_vec(d, d, data)?)?);
            }
            layers.push(protos);
        }
        Self::new(layers)
    }
}

#[derive(Serialize, Deserialize)]
struct DictionaryManifest {
    layer_count: usize,
    dims: usize,
    k_per_layer: Vec<usize>,
    dtype: String,
    #[serde(default)]
    layout: String,
    #[serde(default)]
    blob: String,
}

/// Entry `j` is the smallest Stein divergence from `descriptor` to a layer-`j` prototype.
pub fn nearest_prototype_distance<T: Real>(
    descriptor: &SpdMatrix<T>,
    dict: &PrototypeDictionary<T>,
) -> Result<Vec<T>> {
    if descriptor.dim() != dict.dim {
        return Err(Error::InvalidDimension(format!(
            "descriptor dimension {} differs from dictionary dimension {}",
            descriptor.dim(),
            dict.dim
        )));
    }
    let ld = descriptor.log_det();
    Ok(dict
        .layers
        .iter()
        .zip(&dict.logdets)
        .map(|(protos, lds)| {
            protos
                .iter()
                .zip(lds)
                .map(|(p, &lp)| stein_divergence_with_logdets(descriptor, ld, p, lp))
                .fold(T::infinity(), T::min)
        })
        .collect())
}
