//! Volumes, multi-scale Gaussian derivative features, region covariance descriptors and
//! distance matrices.
//!
//! Axis 0 is depth (`z`), axis 1 runs across A-scans within a B-scan (`x`), axis 2 across
//! B-scans (`y`). Voxels are stored depth-fastest: `d + N·(a + N_A·b)`.

use rayon::prelude::*;

use crate::clustering::{nearest_prototype_distance, PrototypeDictionary};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::scalar::Real;
use crate::spd::SpdMatrix;

/// Scalar field on a 3-D voxel grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume<T> {
    dims: [usize; 3],
    data: Vec<T>,
    spacing: Option<[f64; 3]>,
}

impl<T: Real> Volume<T> {
    pub fn new(dims: [usize; 3], data: Vec<T>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::InvalidDimension(format!("volume dims {dims:?} contain zero")));
        }
        let count = dims[0] * dims[1] * dims[2];
        if data.len() != count {
            return Err(Error::InvalidDimension(format!(
                "volume dims {dims:?} need {count} voxels, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("voxel {i} is not finite")));
        }
        Ok(Self {
            dims,
            data,
            spacing: None,
        })
    }

    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> T) -> Result<Self> {
        let mut data = Vec::with_capacity(dims.iter().product());
        for b in 0..dims[2] {
            for a in 0..dims[1] {
                for d in 0..dims[0] {
                    data.push(f(d, a, b));
                }
            }
        }
        Self::new(dims, data)
    }

    pub fn with_spacing(mut self, spacing: [f64; 3]) -> Self {
        self.spacing = Some(spacing);
        self
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> Option<[f64; 3]> {
        self.spacing
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn index(&self, d: usize, a: usize, b: usize) -> usize {
        voxel_index(self.dims, d, a, b)
    }

    pub fn get(&self, d: usize, a: usize, b: usize) -> T {
        self.data[self.index(d, a, b)]
    }
}

#[inline]
pub fn voxel_index(dims: [usize; 3], d: usize, a: usize, b: usize) -> usize {
    d + dims[0] * (a + dims[1] * b)
}

/// Inverse of [`voxel_index`].
#[inline]
pub fn voxel_coords(dims: [usize; 3], i: usize) -> [usize; 3] {
    [i % dims[0], (i / dims[0]) % dims[1], i / (dims[0] * dims[1])]
}

/// Per-voxel feature vectors of fixed length, stored voxel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureField<T> {
    dims: [usize; 3],
    channels: usize,
    data: Vec<T>,
}

impl<T: Real> FeatureField<T> {
    pub fn new(dims: [usize; 3], channels: usize, data: Vec<T>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if channels == 0 || data.len() != n * channels {
            return Err(Error::InvalidDimension(format!(
                "feature field of {n} voxels and {channels} channels cannot hold {} values",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("feature field has non-finite values".into()));
        }
        Ok(Self { dims, channels, data })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn voxel_count(&self) -> usize {
        self.data.len() / self.channels
    }

    pub fn voxel(&self, i: usize) -> &[T] {
        &self.data[i * self.channels..(i + 1) * self.channels]
    }

    pub fn channel(&self, ch: usize) -> Vec<T> {
        self.data.iter().skip(ch).step_by(self.channels).copied().collect()
    }
}

/// Number of channels of [`feature_vector_field`].
pub const FEATURE_CHANNELS: usize = 10;

/// Derivative orders `(depth z, x, y)` of the nine derivative channels, in channel order
/// `∇x, ∇y, ∇z, ∇xy, ∇yz, ∇xz, ∇xx, ∇yy, ∇zz`.
const DERIVATIVE_ORDERS: [[usize; 3]; 9] = [
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 0],
    [0, 1, 1],
    [1, 0, 1],
    [1, 1, 0],
    [0, 2, 0],
    [0, 0, 2],
    [2, 0, 0],
];

/// Sampled Gaussian kernels at one scale, indexed by offset `k + radius`.
#[derive(Clone, Debug)]
pub struct GaussianKernels {
    pub radius: usize,
    /// Unit DC gain.
    pub smooth: Vec<f64>,
    /// Exact unit response on linear ramps.
    pub first: Vec<f64>,
    /// Zero-mean, response 2 on `k²`.
    pub second: Vec<f64>,
}

impl GaussianKernels {
    pub fn new(sigma: f64) -> Self {
        let radius = (3.0 * sigma).ceil().max(1.0) as usize;
        let r = radius as i64;
        let g: Vec<f64> = (-r..=r)
            .map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp())
            .collect();
        let gsum: f64 = g.iter().sum();
        let smooth: Vec<f64> = g.iter().map(|v| v / gsum).collect();

        let m2: f64 = (-r..=r).zip(&g).map(|(k, v)| (k * k) as f64 * v).sum();
        let first: Vec<f64> = (-r..=r).zip(&g).map(|(k, v)| -(k as f64) * v / m2).collect();

        let raw: Vec<f64> = (-r..=r)
            .zip(&g)
            .map(|(k, v)| ((k * k) as f64 - sigma * sigma) * v)
            .collect();
        let mean = raw.iter().sum::<f64>() / raw.len() as f64;
        let centered: Vec<f64> = raw.iter().map(|v| v - mean).collect();
        let q: f64 = (-r..=r).zip(&centered).map(|(k, v)| (k * k) as f64 * v).sum();
        let second = centered.iter().map(|v| 2.0 * v / q).collect();
        Self {
            radius,
            smooth,
            first,
            second,
        }
    }

    fn of_order(&self, order: usize) -> &[f64] {
        match order {
            0 => &self.smooth,
            1 => &self.first,
            _ => &self.second,
        }
    }
}

/// Convolves along `axis` with edge replication: `out[i] = Σ_k w[k] in[clamp(i − k)]`.
/// A singleton axis is treated as constant: smoothing keeps the value, derivatives vanish.
fn convolve_axis<T: Real>(dims: [usize; 3], input: &[T], axis: usize, kernel: &[f64], order: usize) -> Vec<T> {
    let len = dims[axis];
    let r = (kernel.len() / 2) as i64;
    if len == 1 {
        return if order == 0 { input.to_vec() } else { vec![T::zero(); input.len()] };
    }
    let stride = match axis {
        0 => 1,
        1 => dims[0],
        _ => dims[0] * dims[1],
    };
    let w: Vec<T> = kernel.iter().map(|&v| T::lit(v)).collect();
    let mut out = vec![T::zero(); input.len()];
    out.par_iter_mut().enumerate().for_each(|(idx, o)| {
        let pos = (idx / stride) % len;
        let base = idx - pos * stride;
        let mut acc = T::zero();
        for (t, &wk) in w.iter().enumerate() {
            let k = t as i64 - r;
            let src = (pos as i64 - k).clamp(0, len as i64 - 1) as usize;
            acc += wk * input[base + src * stride];
        }
        *o = acc;
    });
    out
}

fn check_scales<T: Real>(vol: &Volume<T>, scales: &[f64]) -> Result<()> {
    if scales.is_empty() {
        return Err(Error::Config("at least one scale is required".into()));
    }
    if let Some(s) = scales.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
        return Err(Error::Config(format!("scale {s} is not positive")));
    }
    let sigma = scales.iter().copied().fold(0.0, f64::max);
    let radius = GaussianKernels::new(sigma).radius;
    for (axis, &len) in vol.dims.iter().enumerate() {
        if len > 1 && len <= radius {
            return Err(Error::VolumeTooSmall {
                axis,
                len,
                sigma,
                radius,
            });
        }
    }
    Ok(())
}

/// Channel `ch` of the nine derivatives at one scale, scaled by `σ^order`.
fn derivative_at_scale<T: Real>(vol: &Volume<T>, k: &GaussianKernels, sigma: f64, ch: usize) -> Vec<T> {
    let orders = DERIVATIVE_ORDERS[ch];
    let mut field = vol.data.clone();
    for (axis, &order) in orders.iter().enumerate() {
        field = convolve_axis(vol.dims, &field, axis, k.of_order(order), order);
    }
    let total: usize = orders.iter().sum();
    let norm = T::lit(sigma.powi(total as i32));
    field.iter_mut().for_each(|v| *v *= norm);
    field
}

/// Scale-normalized Gaussian derivatives `∇x, ∇y, ∇z, ∇xy, ∇yz, ∇xz, ∇xx, ∇yy, ∇zz`,
/// each taking the signed value of largest magnitude over `scales` (ties go to the
/// earlier scale).
pub fn scale_normalized_derivatives<T: Real>(vol: &Volume<T>, scales: &[f64]) -> Result<FeatureField<T>> {
    check_scales(vol, scales)?;
    let n = vol.len();
    let mut best: Vec<Vec<T>> = vec![vec![T::zero(); n]; 9];
    for (si, &sigma) in scales.iter().enumerate() {
        let k = GaussianKernels::new(sigma);
        for (ch, slot) in best.iter_mut().enumerate() {
            let resp = derivative_at_scale(vol, &k, sigma, ch);
            if si == 0 {
                *slot = resp;
            } else {
                slot.par_iter_mut().zip(&resp).for_each(|(b, &r)| {
                    if r.abs() > b.abs() {
                        *b = r;
                    }
                });
            }
        }
    }
    let mut data = Vec::with_capacity(n * 9);
    for i in 0..n {
        data.extend(best.iter().map(|c| c[i]));
    }
    FeatureField::new(vol.dims, 9, data)
}

/// `(I, ∇x, ∇y, ∇z, √2∇xy, √2∇yz, √2∇xz, ∇xx, ∇yy, ∇zz)` per voxel.
pub fn feature_vector_field<T: Real>(vol: &Volume<T>, scales: &[f64]) -> Result<FeatureField<T>> {
    let der = scale_normalized_derivatives(vol, scales)?;
    let sqrt2 = T::lit(std::f64::consts::SQRT_2);
    let mut data = Vec::with_capacity(vol.len() * FEATURE_CHANNELS);
    for i in 0..vol.len() {
        let g = der.voxel(i);
        data.push(vol.data[i]);
        data.extend_from_slice(&g[0..3]);
        data.extend(g[3..6].iter().map(|&v| v * sqrt2));
        data.extend_from_slice(&g[6..9]);
    }
    FeatureField::new(vol.dims, FEATURE_CHANNELS, data)
}

/// Odd patch extents along (depth, A-scan axis, B-scan axis).
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Neighborhood {
    pub depth: usize,
    pub ascan: usize,
    pub bscan: usize,
}

impl Neighborhood {
    pub fn new(depth: usize, ascan: usize, bscan: usize) -> Result<Self> {
        let nb = Self { depth, ascan, bscan };
        nb.validate()?;
        Ok(nb)
    }

    pub fn validate(&self) -> Result<()> {
        for e in self.extents() {
            if e == 0 || e % 2 == 0 {
                return Err(Error::Config(format!(
                    "neighborhood extents must be odd and positive, got {:?}",
                    self.extents()
                )));
            }
        }
        Ok(())
    }

    pub fn extents(&self) -> [usize; 3] {
        [self.depth, self.ascan, self.bscan]
    }

    pub fn radii(&self) -> [usize; 3] {
        [self.depth / 2, self.ascan / 2, self.bscan / 2]
    }

    pub fn size(&self) -> usize {
        self.depth * self.ascan * self.bscan
    }
}

/// Within-patch weights `θ`, renormalized over the part of the patch inside the volume.
#[derive(Clone, Debug, PartialEq)]
pub enum PatchWeights {
    Uniform,
    /// Isotropic Gaussian of the offset, standard deviation in voxels.
    Gaussian { sigma: f64 },
    /// Nonnegative weight per offset, depth-fastest over the patch.
    Custom(Vec<f64>),
}

impl PatchWeights {
    fn table(&self, nb: &Neighborhood) -> Result<Vec<f64>> {
        let [rd, ra, rb] = nb.radii().map(|r| r as i64);
        let offsets = || {
            (-rb..=rb).flat_map(move |b| (-ra..=ra).flat_map(move |a| (-rd..=rd).map(move |d| (d, a, b))))
        };
        let t: Vec<f64> = match self {
            Self::Uniform => vec![1.0; nb.size()],
            Self::Gaussian { sigma } => {
                if !(*sigma > 0.0) {
                    return Err(Error::Config("patch weight sigma must be positive".into()));
                }
                offsets()
                    .map(|(d, a, b)| (-((d * d + a * a + b * b) as f64) / (2.0 * sigma * sigma)).exp())
                    .collect()
            }
            Self::Custom(w) => {
                if w.len() != nb.size() {
                    return Err(Error::InvalidDimension(format!(
                        "{} patch weights for a patch of {} offsets",
                        w.len(),
                        nb.size()
                    )));
                }
                if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || !w.iter().any(|v| *v > 0.0) {
                    return Err(Error::Config("patch weights must be nonnegative, not all zero".into()));
                }
                w.clone()
            }
        };
        Ok(t)
    }
}

/// Settings that turn a volume into per-voxel descriptors.
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorConfig {
    pub scales: Vec<f64>,
    pub neighborhood: Neighborhood,
    pub weights: PatchWeights,
    pub eps_reg: f64,
}

impl Default for DescriptorConfig {
    fn default() -> Self {
        Self {
            scales: vec![1.0, 2.0],
            neighborhood: Neighborhood {
                depth: 3,
                ascan: 5,
                bscan: 5,
            },
            weights: PatchWeights::Uniform,
            eps_reg: 1e-6,
        }
    }
}

/// Precomputed covariance evaluator for one feature field.
struct CovarianceKernel<'a, T> {
    features: &'a FeatureField<T>,
    nb: Neighborhood,
    table: Vec<f64>,
    eps: T,
}

impl<'a, T: Real> CovarianceKernel<'a, T> {
    fn new(features: &'a FeatureField<T>, nb: Neighborhood, weights: &PatchWeights, eps_reg: f64) -> Result<Self> {
        nb.validate()?;
        if !(eps_reg > 0.0 && eps_reg.is_finite()) {
            return Err(Error::Config("eps_reg must be positive".into()));
        }
        Ok(Self {
            features,
            nb,
            table: weights.table(&nb)?,
            eps: T::lit(eps_reg),
        })
    }

    fn at(&self, center: usize) -> Result<SpdMatrix<T>> {
        let dims = self.features.dims;
        let [cd, ca, cb] = voxel_coords(dims, center).map(|v| v as i64);
        let [rd, ra, rb] = self.nb.radii().map(|r| r as i64);
        let f = self.features.channels;

        let mut members: Vec<(usize, T)> = Vec::with_capacity(self.nb.size());
        let mut t = 0;
        for b in -rb..=rb {
            for a in -ra..=ra {
                for d in -rd..=rd {
                    let w = self.table[t];
                    t += 1;
                    let (pd, pa, pb) = (cd + d, ca + a, cb + b);
                    let inside = pd >= 0
                        && pa >= 0
                        && pb >= 0
                        && (pd as usize) < dims[0]
                        && (pa as usize) < dims[1]
                        && (pb as usize) < dims[2];
                    if inside && w > 0.0 {
                        members.push((voxel_index(dims, pd as usize, pa as usize, pb as usize), T::lit(w)));
                    }
                }
            }
        }
        let total: T = members.iter().map(|m| m.1).sum();
        if !(total > T::zero()) {
            return Err(Error::Domain(format!("patch around voxel {center} has zero weight")));
        }

        let mut mean = vec![T::zero(); f];
        for &(j, w) in &members {
            for (m, &v) in mean.iter_mut().zip(self.features.voxel(j)) {
                *m += w * v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= total);
        let mut cov = Mat::zeros(f, f);
        let mut dev = vec![T::zero(); f];
        for &(j, w) in &members {
            let theta = w / total;
            for ((dv, &v), &m) in dev.iter_mut().zip(self.features.voxel(j)).zip(&mean) {
                *dv = v - m;
            }
            for r in 0..f {
                let s = theta * dev[r];
                for c in r..f {
                    cov[(r, c)] += s * dev[c];
                }
            }
        }
        for r in 0..f {
            cov[(r, r)] += self.eps;
            for c in 0..r {
                cov[(r, c)] = cov[(c, r)];
            }
        }
        SpdMatrix::new(cov)
    }
}

/// Regularized weighted covariance `Σ θ_j (f_j − f̄)(f_j − f̄)ᵀ + εI` over the patch
/// around `center`; the patch is clipped to the volume and `θ` renormalized.
pub fn region_covariance<T: Real>(
    features: &FeatureField<T>,
    center: usize,
    neighborhood: Neighborhood,
    weights: &PatchWeights,
    eps_reg: f64,
) -> Result<SpdMatrix<T>> {
    if center >= features.voxel_count() {
        return Err(Error::InvalidDimension(format!("voxel {center} outside the field")));
    }
    CovarianceKernel::new(features, neighborhood, weights, eps_reg)?.at(center)
}

/// Descriptors of the voxels in `indices`, in that order.
pub fn descriptors_at<T: Real>(
    features: &FeatureField<T>,
    indices: &[usize],
    config: &DescriptorConfig,
) -> Result<Vec<SpdMatrix<T>>> {
    if let Some(&i) = indices.iter().find(|&&i| i >= features.voxel_count()) {
        return Err(Error::InvalidDimension(format!("voxel {i} outside the field")));
    }
    let kernel = CovarianceKernel::new(features, config.neighborhood, &config.weights, config.eps_reg)?;
    indices.par_iter().map(|&i| kernel.at(i)).collect()
}

/// Nonnegative `n × c` cost matrix, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix<T> {
    n: usize,
    c: usize,
    data: Vec<T>,
}

impl<T: Real> DistanceMatrix<T> {
    pub fn new(n: usize, c: usize, data: Vec<T>) -> Result<Self> {
        if n == 0 || c == 0 || data.len() != n * c {
            return Err(Error::InvalidDimension(format!(
                "distance matrix {n}x{c} cannot hold {} values",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { row: i / c });
        }
        if let Some(i) = data.iter().position(|v| *v < T::zero()) {
            return Err(Error::Domain(format!("negative distance in row {}", i / c)));
        }
        Ok(Self { n, c, data })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn c(&self) -> usize {
        self.c
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.c..(i + 1) * self.c]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }
}

/// Row `i` holds [`nearest_prototype_distance`] of voxel `i`'s descriptor.
pub fn build_distance_matrix<T: Real>(
    vol: &Volume<T>,
    dict: &PrototypeDictionary<T>,
    config: &DescriptorConfig,
) -> Result<DistanceMatrix<T>> {
    let features = feature_vector_field(vol, &config.scales)?;
    let kernel = CovarianceKernel::new(&features, config.neighborhood, &config.weights, config.eps_reg)?;
    let rows: Vec<Vec<T>> = (0..vol.len())
        .into_par_iter()
        .map(|i| nearest_prototype_distance(&kernel.at(i)?, dict))
        .collect::<Result<_>>()?;
    DistanceMatrix::new(vol.len(), dict.layer_count(), rows.concat())
}

/// Turns class scores (higher is better) into distances: negate, then subtract each
/// row's minimum so the smallest entry per row is zero.
pub fn ingest_scores<T: Real>(n: usize, c: usize, scores: &[T]) -> Result<DistanceMatrix<T>> {
    if scores.len() != n * c {
        return Err(Error::InvalidDimension(format!(
            "score matrix {n}x{c} cannot hold {} values",
            scores.len()
        )));
    }
    let mut data = Vec::with_capacity(n * c);
    for (i, row) in scores.chunks_exact(c).enumerate() {
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { row: i });
        }
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        data.extend(row.iter().map(|&s| max - s));
    }
    DistanceMatrix::new(n, c, data)
}
