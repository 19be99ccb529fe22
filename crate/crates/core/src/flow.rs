//! Assignment flow dynamics: likelihoods, geometric averaging over neighborhoods, the
//! plain and ordered flows, geometric Euler integration and rounding.

use std::time::Instant;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features::{DistanceMatrix, Neighborhood};
use crate::ordering::{block_energy, block_gradient, check_partition, AscanView, OrderingPenaltyConfig, PairWindow};
use crate::scalar::{pairwise_sum, Real};
use crate::simplex::{exp_lifted_into, mean_entropy, AssignmentMatrix};

/// Neighborhoods `N_i ∋ i` with weights summing to one per voxel.
#[derive(Clone, Debug, PartialEq)]
pub enum NeighborhoodGraph<T> {
    /// Box patch on a depth-fastest grid, clipped at the border, uniform weights `1/|N_i|`.
    Grid { dims: [usize; 3], patch: Neighborhood },
    /// Arbitrary weighted neighbor lists in compressed row form.
    Explicit {
        offsets: Vec<usize>,
        neighbors: Vec<usize>,
        weights: Vec<T>,
    },
}

impl<T: Real> NeighborhoodGraph<T> {
    pub fn grid(dims: [usize; 3], patch: Neighborhood) -> Result<Self> {
        patch.validate()?;
        if dims.contains(&0) {
            return Err(Error::InvalidDimension(format!("grid dims {dims:?} contain zero")));
        }
        Ok(Self::Grid { dims, patch })
    }

    /// Every voxel is its own only neighbor.
    pub fn isolated(n: usize) -> Self {
        Self::Explicit {
            offsets: (0..=n).collect(),
            neighbors: (0..n).collect(),
            weights: vec![T::one(); n],
        }
    }

    /// Validates self-inclusion, symmetry of membership and unit weight sums.
    pub fn explicit(lists: Vec<Vec<(usize, T)>>) -> Result<Self> {
        let n = lists.len();
        let mut offsets = vec![0];
        let mut neighbors = Vec::new();
        let mut weights = Vec::new();
        for (i, list) in lists.iter().enumerate() {
            if !list.iter().any(|&(k, _)| k == i) {
                return Err(Error::Config(format!("voxel {i} is missing from its own neighborhood")));
            }
            let total: T = list.iter().map(|&(_, w)| w).sum();
            if (total - T::one()).abs() > T::tol(1e-12) * T::lit(list.len() as f64) {
                return Err(Error::Config(format!("weights of voxel {i} sum to {total}")));
            }
            for &(k, w) in list {
                if k >= n {
                    return Err(Error::Config(format!("neighbor {k} of voxel {i} outside 0..{n}")));
                }
                if !(w > T::zero()) {
                    return Err(Error::Config(format!("non-positive weight between {i} and {k}")));
                }
                if !lists[k].iter().any(|&(j, _)| j == i) {
                    return Err(Error::Config(format!("{k} neighbors {i} but not conversely")));
                }
                neighbors.push(k);
                weights.push(w);
            }
            offsets.push(neighbors.len());
        }
        Ok(Self::Explicit {
            offsets,
            neighbors,
            weights,
        })
    }

    pub fn n(&self) -> usize {
        match self {
            Self::Grid { dims, .. } => dims.iter().product(),
            Self::Explicit { offsets, .. } => offsets.len() - 1,
        }
    }

    /// Weighted average `Σ_k ω_ik x_k` of `c`-vectors for every voxel.
    fn average(&self, x: &[T], c: usize) -> Vec<T> {
        match self {
            Self::Grid { dims, patch } => {
                let mut out = x.to_vec();
                for (axis, r) in patch.radii().into_iter().enumerate() {
                    if r > 0 && dims[axis] > 1 {
                        out = box_mean_axis(*dims, &out, c, axis, r);
                    }
                }
                out
            }
            Self::Explicit {
                offsets,
                neighbors,
                weights,
            } => {
                let mut out = vec![T::zero(); x.len()];
                out.par_chunks_mut(c).enumerate().for_each(|(i, o)| {
                    for e in offsets[i]..offsets[i + 1] {
                        let (k, w) = (neighbors[e], weights[e]);
                        for (ov, &xv) in o.iter_mut().zip(&x[k * c..(k + 1) * c]) {
                            *ov += w * xv;
                        }
                    }
                });
                out
            }
        }
    }
}

/// Mean over the clipped window `[p − r, p + r]` along one axis. Box means over clipped
/// patches factor into per-axis means because the clipped patch is a product set.
fn box_mean_axis<T: Real>(dims: [usize; 3], x: &[T], c: usize, axis: usize, r: usize) -> Vec<T> {
    let len = dims[axis];
    let stride = match axis {
        0 => 1,
        1 => dims[0],
        _ => dims[0] * dims[1],
    };
    let mut out = vec![T::zero(); x.len()];
    out.par_chunks_mut(c).enumerate().for_each(|(v, o)| {
        let pos = (v / stride) % len;
        let base = v - pos * stride;
        let lo = pos.saturating_sub(r);
        let hi = (pos + r).min(len - 1);
        for q in lo..=hi {
            let src = (base + q * stride) * c;
            for (ov, &xv) in o.iter_mut().zip(&x[src..src + c]) {
                *ov += xv;
            }
        }
        let inv = T::one() / T::lit((hi - lo + 1) as f64);
        o.iter_mut().for_each(|v| *v *= inv);
    });
    out
}

/// Parameters of the flow.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowConfig<T> {
    pub rho: T,
    pub step: T,
    pub gamma: T,
    /// Stop once the mean entropy is at most this; `None` means `1e-3 · log c`.
    pub entropy_threshold: Option<T>,
    pub max_steps: usize,
    /// A-scan pairs entering the ordering energy. Adjacent pairs suffice to enforce the
    /// order by transitivity; wider windows also push every boundary toward the column
    /// center, because equal rows still feel the penalty slope at zero.
    pub window: PairWindow,
    /// Multiplier of the ordering gradient inside the generalized likelihood.
    pub ordering_weight: T,
    /// Patch of the similarity averaging.
    pub neighborhood: Neighborhood,
}

impl<T: Real> Default for FlowConfig<T> {
    fn default() -> Self {
        Self {
            rho: T::one(),
            step: T::lit(0.1),
            gamma: T::lit(0.1),
            entropy_threshold: None,
            max_steps: 2000,
            window: PairWindow::Band(1),
            ordering_weight: T::one(),
            neighborhood: Neighborhood {
                depth: 5,
                ascan: 5,
                bscan: 3,
            },
        }
    }
}

impl<T: Real> FlowConfig<T> {
    pub fn entropy_threshold_for(&self, c: usize) -> T {
        self.entropy_threshold
            .unwrap_or_else(|| T::lit(1e-3) * T::lit(c as f64).ln())
    }

    pub fn validate(&self, c: usize) -> Result<()> {
        let pos = |v: T, name: &str| {
            if v > T::zero() && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        };
        pos(self.rho, "rho")?;
        pos(self.gamma, "gamma")?;
        if !(self.step >= T::zero() && self.step.is_finite()) {
            return Err(Error::Config(format!("step must be nonnegative, got {}", self.step)));
        }
        if !(self.ordering_weight >= T::zero() && self.ordering_weight.is_finite()) {
            return Err(Error::Config("ordering weight must be nonnegative".into()));
        }
        if self.max_steps == 0 {
            return Err(Error::Config("max_steps must be at least 1".into()));
        }
        let thr = self.entropy_threshold_for(c);
        pos(thr, "entropy threshold")?;
        if c >= 2 && thr >= T::lit(c as f64).ln() {
            return Err(Error::Config(format!(
                "entropy threshold {thr} must be below log c = {}",
                T::lit(c as f64).ln()
            )));
        }
        self.neighborhood.validate()?;
        self.ordering().validate()
    }

    pub fn ordering(&self) -> OrderingPenaltyConfig<T> {
        OrderingPenaltyConfig {
            gamma: self.gamma,
            window: self.window,
        }
    }
}

fn check_dims<T: Real>(w: &AssignmentMatrix<T>, d: &DistanceMatrix<T>) -> Result<()> {
    if w.n() != d.n() || w.c() != d.c() {
        return Err(Error::InvalidDimension(format!(
            "assignment {}x{} and distance {}x{} differ",
            w.n(),
            w.c(),
            d.n(),
            d.c()
        )));
    }
    Ok(())
}

/// `−(D_i − min D_i)/ρ`; subtracting the row minimum leaves the likelihood unchanged
/// and keeps the exponent range small.
fn scaled_data_term<T: Real>(row: &[T], rho: T, out: &mut [T]) {
    let m = row.iter().copied().fold(T::infinity(), T::min);
    for (o, &v) in out.iter_mut().zip(row) {
        *o = -(v - m) / rho;
    }
}

/// `L_i = W_i e^{−D_i/ρ} / ⟨W_i, e^{−D_i/ρ}⟩`.
pub fn likelihood<T: Real>(w: &AssignmentMatrix<T>, d: &DistanceMatrix<T>, rho: T) -> Result<AssignmentMatrix<T>> {
    check_dims(w, d)?;
    if !(rho > T::zero()) {
        return Err(Error::Config("rho must be positive".into()));
    }
    let c = w.c();
    let mut out = vec![T::zero(); w.n() * c];
    out.par_chunks_mut(c).enumerate().for_each(|(i, o)| {
        let mut x = vec![T::zero(); c];
        scaled_data_term(d.row(i), rho, &mut x);
        exp_lifted_into(w.row(i), &x, o);
    });
    Ok(AssignmentMatrix::from_raw_clamped(w.n(), c, out))
}

/// Rows of the ordering gradient over all A-scans, `n × c`.
fn ordering_gradient<T: Real>(w: &AssignmentMatrix<T>, ascans: &[AscanView], cfg: &OrderingPenaltyConfig<T>) -> Vec<T> {
    let c = w.c();
    let data = w.as_slice();
    let per_scan: Vec<Vec<T>> = ascans
        .par_iter()
        .map(|a| {
            let mut g = vec![T::zero(); a.len() * c];
            match a.contiguous() {
                Some(r) => block_gradient(&data[r.start * c..r.end * c], c, cfg, &mut g),
                None => {
                    let rows: Vec<T> = a.indices().iter().flat_map(|&i| w.row(i).iter().copied()).collect();
                    block_gradient(&rows, c, cfg, &mut g);
                }
            }
            g
        })
        .collect();
    let mut out = vec![T::zero(); w.n() * c];
    for (a, g) in ascans.iter().zip(per_scan) {
        for (k, &i) in a.indices().iter().enumerate() {
            out[i * c..(i + 1) * c].copy_from_slice(&g[k * c..(k + 1) * c]);
        }
    }
    out
}

/// Total ordering energy over all A-scans, summed in A-scan order.
pub fn total_ordering_energy<T: Real>(w: &AssignmentMatrix<T>, ascans: &[AscanView], cfg: &OrderingPenaltyConfig<T>) -> T {
    let c = w.c();
    let data = w.as_slice();
    let per: Vec<T> = ascans
        .par_iter()
        .map(|a| match a.contiguous() {
            Some(r) => block_energy(&data[r.start * c..r.end * c], c, cfg),
            None => {
                let rows: Vec<T> = a.indices().iter().flat_map(|&i| w.row(i).iter().copied()).collect();
                block_energy(&rows, c, cfg)
            }
        })
        .collect();
    pairwise_sum(&per)
}

/// `L_ord(W) = exp_W(−D/ρ − λ Σ_A ∇E_ord(W_A))` with `λ` the ordering weight.
pub fn generalized_likelihood<T: Real>(
    w: &AssignmentMatrix<T>,
    d: &DistanceMatrix<T>,
    ascans: &[AscanView],
    cfg: &FlowConfig<T>,
) -> Result<AssignmentMatrix<T>> {
    check_dims(w, d)?;
    cfg.validate(w.c())?;
    check_partition(ascans, w.n())?;
    Ok(generalized_likelihood_unchecked(w, d, ascans, cfg))
}

fn generalized_likelihood_unchecked<T: Real>(
    w: &AssignmentMatrix<T>,
    d: &DistanceMatrix<T>,
    ascans: &[AscanView],
    cfg: &FlowConfig<T>,
) -> AssignmentMatrix<T> {
    let c = w.c();
    let grad = ordering_gradient(w, ascans, &cfg.ordering());
    let lambda = cfg.ordering_weight;
    let mut out = vec![T::zero(); w.n() * c];
    out.par_chunks_mut(c).enumerate().for_each(|(i, o)| {
        let mut x = vec![T::zero(); c];
        scaled_data_term(d.row(i), cfg.rho, &mut x);
        for (xv, &g) in x.iter_mut().zip(&grad[i * c..(i + 1) * c]) {
            *xv -= lambda * g;
        }
        exp_lifted_into(w.row(i), &x, o);
    });
    AssignmentMatrix::from_raw_clamped(w.n(), c, out)
}

/// Similarity vectors `S_i ∝ exp(Σ_k ω_ik log L_k)`, the geometric mean of the neighbors'
/// likelihood vectors. The expression does not depend on the base point of the
/// exponential maps it is derived from.
pub fn similarity<T: Real>(l: &AssignmentMatrix<T>, graph: &NeighborhoodGraph<T>) -> Result<AssignmentMatrix<T>> {
    if graph.n() != l.n() {
        return Err(Error::InvalidDimension(format!(
            "graph has {} voxels, assignment has {}",
            graph.n(),
            l.n()
        )));
    }
    let c = l.c();
    let logs: Vec<T> = l.as_slice().par_iter().map(|v| v.ln()).collect();
    let avg = graph.average(&logs, c);
    let uniform = vec![T::one() / T::lit(c as f64); c];
    let mut out = vec![T::zero(); l.n() * c];
    out.par_chunks_mut(c)
        .zip(avg.par_chunks(c))
        .for_each(|(o, a)| exp_lifted_into(&uniform, a, o));
    Ok(AssignmentMatrix::from_raw_clamped(l.n(), c, out))
}

/// One geometric Euler step `W⁺_i = exp_{W_i}(h S_i(L(W)))`, with `L` the plain or the
/// generalized likelihood.
pub fn flow_step<T: Real>(
    w: &AssignmentMatrix<T>,
    d: &DistanceMatrix<T>,
    graph: &NeighborhoodGraph<T>,
    ascans: &[AscanView],
    cfg: &FlowConfig<T>,
    ordered: bool,
) -> Result<AssignmentMatrix<T>> {
    check_dims(w, d)?;
    cfg.validate(w.c())?;
    if graph.n() != w.n() {
        return Err(Error::InvalidDimension("graph and assignment sizes differ".into()));
    }
    if ordered {
        check_partition(ascans, w.n())?;
    }
    Ok(step_unchecked(w, d, graph, ascans, cfg, ordered))
}

fn step_unchecked<T: Real>(
    w: &AssignmentMatrix<T>,
    d: &DistanceMatrix<T>,
    graph: &NeighborhoodGraph<T>,
    ascans: &[AscanView],
    cfg: &FlowConfig<T>,
    ordered: bool,
) -> AssignmentMatrix<T> {
    let l = if ordered {
        generalized_likelihood_unchecked(w, d, ascans, cfg)
    } else {
        likelihood(w, d, cfg.rho).expect("dimensions checked by caller")
    };
    let s = similarity(&l, graph).expect("dimensions checked by caller");
    let c = w.c();
    let h = cfg.step;
    let mut out = vec![T::zero(); w.n() * c];
    out.par_chunks_mut(c).enumerate().for_each(|(i, o)| {
        let x: Vec<T> = s.row(i).iter().map(|&v| h * v).collect();
        exp_lifted_into(w.row(i), &x, o);
    });
    AssignmentMatrix::from_raw_clamped(w.n(), c, out)
}

/// Diagnostics of one integration step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub mean_entropy: f64,
    pub ordering_energy: f64,
    pub elapsed_s: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FlowTrace {
    pub records: Vec<StepRecord>,
    /// Whether the entropy threshold was reached within `max_steps`.
    pub converged: bool,
}

/// Integrates from the barycenter until the mean entropy reaches the threshold or
/// `max_steps` steps have been taken. Running out of steps is reported through
/// [`FlowTrace::converged`], not as an error.
pub fn integrate<T: Real>(
    d: &DistanceMatrix<T>,
    graph: &NeighborhoodGraph<T>,
    ascans: &[AscanView],
    cfg: &FlowConfig<T>,
    ordered: bool,
) -> Result<(AssignmentMatrix<T>, FlowTrace)> {
    let mut w = AssignmentMatrix::barycenter(d.n(), d.c());
    flow_step(&w, d, graph, ascans, &FlowConfig { step: T::zero(), ..*cfg }, ordered)?;
    check_partition(ascans, d.n())?;
    let threshold = cfg.entropy_threshold_for(d.c());
    let ord = cfg.ordering();
    let start = Instant::now();
    let mut trace = FlowTrace::default();
    for step in 1..=cfg.max_steps {
        w = step_unchecked(&w, d, graph, ascans, cfg, ordered);
        let entropy = mean_entropy(&w);
        trace.records.push(StepRecord {
            step,
            mean_entropy: entropy.as_f64(),
            ordering_energy: total_ordering_energy(&w, ascans, &ord).as_f64(),
            elapsed_s: start.elapsed().as_secs_f64(),
        });
        if entropy <= threshold {
            trace.converged = true;
            break;
        }
    }
    Ok((w, trace))
}

/// Per-row argmax; ties go to the smaller label.
pub fn round_labels<T: Real>(w: &AssignmentMatrix<T>) -> Vec<usize> {
    w.rows()
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}
