//! Layer-order constraints along A-scans.
//!
//! A pair `(w_i, w_j)` with `i` above `j` is ordered when `Q(w_i − w_j) ≥ 0`, where `Q` is
//! the lower-triangular all-ones matrix (cumulative sum). The smooth penalty
//! `φ(y) = γ Σ exp(−y_k/γ)` over all pair residuals gives the A-scan ordering energy.

use num_traits::Num;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::simplex::AssignmentMatrix;

/// `B` (lower bidiagonal, `−1` diagonal, `+1` subdiagonal) and `Q = −B⁻¹`.
#[derive(Clone, Debug, PartialEq)]
pub struct OrderingOperator<N> {
    c: usize,
    b: Vec<N>,
    q: Vec<N>,
}

impl<N: Num + Copy> OrderingOperator<N> {
    pub fn new(c: usize) -> Self {
        let mut b = vec![N::zero(); c * c];
        let mut q = vec![N::zero(); c * c];
        for i in 0..c {
            b[i * c + i] = N::zero() - N::one();
            if i > 0 {
                b[i * c + i - 1] = N::one();
            }
            for j in 0..=i {
                q[i * c + j] = N::one();
            }
        }
        Self { c, b, q }
    }

    pub fn c(&self) -> usize {
        self.c
    }

    /// Row-major `B`.
    pub fn b(&self) -> &[N] {
        &self.b
    }

    /// Row-major `Q`.
    pub fn q(&self) -> &[N] {
        &self.q
    }

    /// Whether `B·(−Q)` is exactly the identity.
    pub fn is_inverse_pair(&self) -> bool {
        let c = self.c;
        (0..c).all(|i| {
            (0..c).all(|j| {
                let mut acc = N::zero();
                for k in 0..c {
                    acc = acc - self.b[i * c + k] * self.q[k * c + j];
                }
                acc == if i == j { N::one() } else { N::zero() }
            })
        })
    }
}

/// `Qx`: prefix sums.
pub fn apply_q<N: Num + Copy>(x: &[N]) -> Vec<N> {
    let mut acc = N::zero();
    x.iter()
        .map(|&v| {
            acc = acc + v;
            acc
        })
        .collect()
}

/// `Qᵀx`: suffix sums.
pub fn apply_qt<N: Num + Copy>(x: &[N]) -> Vec<N> {
    let mut out = x.to_vec();
    for k in (0..x.len().saturating_sub(1)).rev() {
        out[k] = out[k] + out[k + 1];
    }
    out
}

/// Whether every entry of `Q(w_i − w_j)` is at least `−slack`.
pub fn is_ordered_within<N: Num + Copy + PartialOrd>(w_i: &[N], w_j: &[N], slack: N) -> bool {
    assert_eq!(w_i.len(), w_j.len(), "assignment vectors of unequal length");
    let mut acc = N::zero();
    w_i.iter().zip(w_j).all(|(&a, &b)| {
        acc = acc + (a - b);
        acc + slack >= N::zero()
    })
}

/// Slack of [`is_ordered`] for floating-point inputs.
pub const ORDER_SLACK: f64 = 1e-12;

/// `w_i` (shallower) and `w_j` (deeper) are ordered: `Q(w_i − w_j) ≥ −1e-12`.
pub fn is_ordered<T: Real>(w_i: &[T], w_j: &[T]) -> bool {
    is_ordered_within(w_i, w_j, T::lit(ORDER_SLACK))
}

/// Which depth pairs of an A-scan enter the energy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PairWindow {
    /// All `N(N−1)` ordered pairs.
    #[default]
    Full,
    /// Pairs at most this many voxels apart.
    Band(usize),
}

impl PairWindow {
    fn reach(self, n: usize) -> usize {
        match self {
            Self::Full => n.saturating_sub(1),
            Self::Band(w) => w.min(n.saturating_sub(1)),
        }
    }
}

impl std::str::FromStr for PairWindow {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "full" {
            return Ok(Self::Full);
        }
        match s.parse::<usize>() {
            Ok(w) if w >= 1 => Ok(Self::Band(w)),
            _ => Err(Error::Config(format!("pair window must be 'full' or a positive integer, got '{s}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OrderingPenaltyConfig<T> {
    pub gamma: T,
    pub window: PairWindow,
}

impl<T: Real> OrderingPenaltyConfig<T> {
    pub fn new(gamma: T, window: PairWindow) -> Result<Self> {
        let cfg = Self { gamma, window };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > T::zero() && self.gamma.is_finite()) {
            return Err(Error::Config("gamma must be positive".into()));
        }
        if self.window == PairWindow::Band(0) {
            return Err(Error::Config("pair window must be at least 1".into()));
        }
        Ok(())
    }
}

/// Row indices of one A-scan, shallowest first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AscanView {
    indices: Vec<usize>,
}

impl AscanView {
    pub fn new(indices: Vec<usize>) -> Result<Self> {
        let mut sorted = indices.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("A-scan indices must be distinct".into()));
        }
        Ok(Self { indices })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Contiguous range `start..start + len`.
    pub fn contiguous(&self) -> Option<std::ops::Range<usize>> {
        let start = *self.indices.first()?;
        self.indices
            .iter()
            .enumerate()
            .all(|(k, &i)| i == start + k)
            .then(|| start..start + self.indices.len())
    }
}

/// One A-scan per `(a, b)` column of a depth-fastest grid.
pub fn grid_ascans(dims: [usize; 3]) -> Vec<AscanView> {
    let n = dims[0];
    (0..dims[1] * dims[2])
        .map(|col| AscanView {
            indices: (col * n..(col + 1) * n).collect(),
        })
        .collect()
}

/// Checks that `ascans` partition `0..n`.
pub fn check_partition(ascans: &[AscanView], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    for a in ascans {
        for &i in &a.indices {
            if i >= n {
                return Err(Error::Config(format!("A-scan index {i} outside 0..{n}")));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::Config(format!("voxel {i} belongs to two A-scans")));
            }
        }
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(Error::Config(format!("voxel {i} belongs to no A-scan")));
    }
    Ok(())
}

fn check_ascan<T: Real>(ascan: &AscanView, w: &AssignmentMatrix<T>) -> Result<()> {
    if let Some(&i) = ascan.indices.iter().find(|&&i| i >= w.n()) {
        return Err(Error::InvalidDimension(format!("A-scan index {i} outside 0..{}", w.n())));
    }
    Ok(())
}

/// Pair of A-scan positions and its residual vector.
pub type PairResidual<T> = ((usize, usize), Vec<T>);

/// Residual vectors `Y_(i,j)` for every ordered pair `i ≠ j` within the window, positions
/// relative to the A-scan. Both orientations of a pair carry the same vector
/// `Q(w_upper − w_lower)`.
pub fn order_residuals<T: Real>(
    ascan: &AscanView,
    w: &AssignmentMatrix<T>,
    window: PairWindow,
) -> Result<Vec<PairResidual<T>>> {
    check_ascan(ascan, w)?;
    let n = ascan.len();
    let reach = window.reach(n);
    let mut out = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i == j || i.abs_diff(j) > reach {
                continue;
            }
            let (up, lo) = if i < j { (i, j) } else { (j, i) };
            let diff: Vec<T> = w
                .row(ascan.indices[up])
                .iter()
                .zip(w.row(ascan.indices[lo]))
                .map(|(&a, &b)| a - b)
                .collect();
            out.push(((i, j), apply_q(&diff)));
        }
    }
    Ok(out)
}

#[inline]
fn saturated_exp<T: Real>(y: T, gamma: T) -> T {
    let s = T::lit(T::EXP_SATURATION);
    (-y / gamma).max(-s).min(s).exp()
}

/// `φ(y) = γ Σ_k exp(−y_k/γ)`, exponent saturated at `±Real::EXP_SATURATION`.
pub fn penalty_phi<T: Real>(y: &[T], gamma: T) -> T {
    gamma * y.iter().map(|&v| saturated_exp(v, gamma)).sum::<T>()
}

/// `∇φ(y) = −exp(−y/γ)`, saturated like [`penalty_phi`].
pub fn penalty_phi_grad<T: Real>(y: &[T], gamma: T) -> Vec<T> {
    y.iter().map(|&v| -saturated_exp(v, gamma)).collect()
}

/// Energy of `n` contiguous rows of width `c`. Each unordered pair within the window is
/// counted twice, once per orientation.
pub(crate) fn block_energy<T: Real>(rows: &[T], c: usize, cfg: &OrderingPenaltyConfig<T>) -> T {
    let n = rows.len() / c;
    let reach = cfg.window.reach(n);
    let two = T::lit(2.0);
    let mut total = T::zero();
    for i in 0..n {
        for j in i + 1..=(i + reach).min(n.saturating_sub(1)) {
            let mut acc = T::zero();
            let mut term = T::zero();
            for k in 0..c {
                acc += rows[i * c + k] - rows[j * c + k];
                term += saturated_exp(acc, cfg.gamma);
            }
            total += two * cfg.gamma * term;
        }
    }
    total
}

/// Gradient of [`block_energy`] written into `out` (same shape as `rows`, overwritten).
pub(crate) fn block_gradient<T: Real>(rows: &[T], c: usize, cfg: &OrderingPenaltyConfig<T>, out: &mut [T]) {
    let n = rows.len() / c;
    let reach = cfg.window.reach(n);
    let two = T::lit(2.0);
    out.iter_mut().for_each(|v| *v = T::zero());
    let mut g = vec![T::zero(); c];
    for i in 0..n {
        for j in i + 1..=(i + reach).min(n.saturating_sub(1)) {
            let mut acc = T::zero();
            for k in 0..c {
                acc += rows[i * c + k] - rows[j * c + k];
                g[k] = -saturated_exp(acc, cfg.gamma);
            }
            // Qᵀg as suffix sums, doubled for both orientations
            let mut suffix = T::zero();
            for k in (0..c).rev() {
                suffix += g[k];
                let v = two * suffix;
                out[i * c + k] += v;
                out[j * c + k] -= v;
            }
        }
    }
}

/// Energy of one A-scan given as `n` contiguous rows of width `c`, shallowest first.
/// Rows need not lie on the simplex; the energy is defined on all of `ℝ^{n×c}`.
pub fn ordering_energy_of_rows<T: Real>(rows: &[T], c: usize, cfg: &OrderingPenaltyConfig<T>) -> Result<T> {
    check_rows(rows, c)?;
    Ok(block_energy(rows, c, cfg))
}

/// Euclidean gradient of [`ordering_energy_of_rows`], same layout as `rows`.
pub fn ordering_energy_gradient_of_rows<T: Real>(rows: &[T], c: usize, cfg: &OrderingPenaltyConfig<T>) -> Result<Vec<T>> {
    check_rows(rows, c)?;
    let mut out = vec![T::zero(); rows.len()];
    block_gradient(rows, c, cfg, &mut out);
    Ok(out)
}

fn check_rows<T>(rows: &[T], c: usize) -> Result<()> {
    if c == 0 || !rows.len().is_multiple_of(c) {
        return Err(Error::InvalidDimension(format!("{} values do not form rows of width {c}", rows.len())));
    }
    Ok(())
}

fn gather<T: Real>(ascan: &AscanView, w: &AssignmentMatrix<T>) -> Vec<T> {
    ascan.indices.iter().flat_map(|&i| w.row(i).iter().copied()).collect()
}

/// `Σ φ(Y_(i,j)(W))` over the A-scan's pairs.
pub fn ordering_energy<T: Real>(ascan: &AscanView, w: &AssignmentMatrix<T>, cfg: &OrderingPenaltyConfig<T>) -> Result<T> {
    check_ascan(ascan, w)?;
    cfg.validate()?;
    Ok(block_energy(&gather(ascan, w), w.c(), cfg))
}

/// Euclidean gradient of [`ordering_energy`], one row per A-scan position.
pub fn ordering_energy_gradient<T: Real>(
    ascan: &AscanView,
    w: &AssignmentMatrix<T>,
    cfg: &OrderingPenaltyConfig<T>,
) -> Result<Vec<Vec<T>>> {
    check_ascan(ascan, w)?;
    cfg.validate()?;
    let c = w.c();
    let rows = gather(ascan, w);
    let mut out = vec![T::zero(); rows.len()];
    block_gradient(&rows, c, cfg, &mut out);
    Ok(out.chunks_exact(c).map(<[T]>::to_vec).collect())
}

/// A row-major `c × c` coupling `M ≥ 0` with `M1 = w_i`, `Mᵀ1 = w_j` and no mass below
/// the diagonal (`⟨Q − I, M⟩ = 0`): the monotone coupling that matches the cumulative
/// distributions of both vectors, filled in north-west corner order. `slack` is the
/// tolerance of the orderedness precondition; mass that the slack would place below the
/// diagonal is dropped, so the marginals hold to within `slack`.
pub fn construct_ordered_coupling_within<N: Num + Copy + PartialOrd>(w_i: &[N], w_j: &[N], slack: N) -> Result<Vec<N>> {
    if w_i.len() != w_j.len() || w_i.len() < 2 {
        return Err(Error::InvalidDimension(format!(
            "coupling needs two vectors of equal length >= 2, got {} and {}",
            w_i.len(),
            w_j.len()
        )));
    }
    if !is_ordered_within(w_i, w_j, slack) {
        return Err(Error::Precondition("assignment pair is not ordered".into()));
    }
    let c = w_i.len();
    let mut m = vec![N::zero(); c * c];
    let (mut r, mut k) = (0, 0);
    let (mut a, mut b) = (w_i[0], w_j[0]);
    while r < c && k < c {
        if k < r {
            k += 1;
            if k < c {
                b = w_j[k];
            }
            continue;
        }
        let t = if a < b { a } else { b };
        m[r * c + k] = m[r * c + k] + t;
        a = a - t;
        b = b - t;
        if a <= N::zero() {
            r += 1;
            if r < c {
                a = w_i[r];
            }
        }
        if b <= N::zero() {
            k += 1;
            if k < c {
                b = w_j[k];
            }
        }
    }
    Ok(m)
}

/// [`construct_ordered_coupling_within`] with the floating-point slack of [`is_ordered`].
pub fn construct_ordered_coupling<T: Real>(w_i: &[T], w_j: &[T]) -> Result<Vec<T>> {
    construct_ordered_coupling_within(w_i, w_j, T::lit(ORDER_SLACK))
}
