//! The relaxed assignment manifold: open probability simplex, its tangent space, the
//! replicator map and the e-geodesic exponential maps, lifted row-wise to matrices.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::{pairwise_sum, Real};

/// Floor applied to every simplex coordinate after each update.
pub const EPS_INTERIOR: f64 = 1e-12;

/// Point of the open probability simplex.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityVector<T>(Vec<T>);

/// Vector with zero component sum.
#[derive(Clone, Debug, PartialEq)]
pub struct TangentVector<T>(Vec<T>);

fn check_simplex_row<T: Real>(row: &[T]) -> Result<()> {
    if row.is_empty() {
        return Err(Error::InvalidDimension("empty probability vector".into()));
    }
    let floor = T::lit(EPS_INTERIOR) * (T::one() - T::lit(1e-9));
    if let Some(x) = row.iter().find(|x| !x.is_finite() || **x < floor) {
        return Err(Error::Domain(format!(
            "entry {x} is outside the simplex interior (floor {EPS_INTERIOR:e})"
        )));
    }
    let s = row.iter().copied().sum::<T>();
    if (s - T::one()).abs() > T::tol(1e-12) * T::lit(row.len() as f64) {
        return Err(Error::Domain(format!("entries sum to {s}, not 1")));
    }
    Ok(())
}

/// Floors entries at [`EPS_INTERIOR`] and rescales the rest so the row sums to one.
/// Rows already inside the floor are left bit-for-bit unchanged.
pub fn clamp_interior<T: Real>(row: &mut [T]) {
    let eps = T::lit(EPS_INTERIOR);
    if row.iter().all(|&x| x >= eps && x.is_finite()) {
        return;
    }
    let c = row.len();
    let mut floored = vec![false; c];
    for (x, f) in row.iter_mut().zip(floored.iter_mut()) {
        if !x.is_finite() || *x < eps {
            *x = eps;
            *f = true;
        }
    }
    // Rescaling the free entries can push another one under the floor; at most c rounds.
    for _ in 0..c {
        let n_floored = floored.iter().filter(|&&f| f).count();
        let free_mass: T = row
            .iter()
            .zip(&floored)
            .filter(|(_, &f)| !f)
            .map(|(&x, _)| x)
            .sum();
        if n_floored == c || free_mass <= T::zero() {
            let u = T::one() / T::lit(c as f64);
            row.iter_mut().for_each(|x| *x = u);
            return;
        }
        let target = T::one() - eps * T::lit(n_floored as f64);
        let scale = target / free_mass;
        let mut changed = false;
        for (x, f) in row.iter_mut().zip(floored.iter_mut()) {
            if !*f {
                *x *= scale;
                if *x < eps {
                    *x = eps;
                    *f = true;
                    changed = true;
                }
            }
        }
        if !changed {
            return;
        }
    }
}

impl<T: Real> ProbabilityVector<T> {
    pub fn new(entries: Vec<T>) -> Result<Self> {
        check_simplex_row(&entries)?;
        Ok(Self(entries))
    }

    /// Normalizes nonnegative weights and clamps the result into the interior.
    pub fn from_weights(mut entries: Vec<T>) -> Result<Self> {
        let s: T = entries.iter().copied().sum();
        if entries.is_empty() || !(s > T::zero()) || entries.iter().any(|x| *x < T::zero()) {
            return Err(Error::Domain("weights must be nonnegative with positive sum".into()));
        }
        entries.iter_mut().for_each(|x| *x /= s);
        clamp_interior(&mut entries);
        Ok(Self(entries))
    }

    /// Uniform distribution `1/c`.
    pub fn barycenter(c: usize) -> Self {
        Self(vec![T::one() / T::lit(c as f64); c])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<T> {
        self.0
    }
}

impl<T: Real> TangentVector<T> {
    pub fn new(entries: Vec<T>) -> Result<Self> {
        let s: T = entries.iter().copied().sum();
        let mag: T = entries.iter().map(|x| x.abs()).sum::<T>().max(T::one());
        if entries.iter().any(|x| !x.is_finite()) || s.abs() > T::tol(1e-12) * mag {
            return Err(Error::Domain(format!("tangent vector sums to {s}, not 0")));
        }
        Ok(Self(entries))
    }

    pub fn zeros(c: usize) -> Self {
        Self(vec![T::zero(); c])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<T> {
        self.0
    }
}

fn same_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::InvalidDimension(format!("length {a} vs {b}")));
    }
    Ok(())
}

/// Orthogonal projection `Π₀ x = x − mean(x)·1` onto the tangent space.
pub fn project_tangent<T: Real>(x: &[T]) -> Result<TangentVector<T>> {
    if x.len() < 2 {
        return Err(Error::InvalidDimension(format!(
            "tangent projection needs at least 2 labels, got {}",
            x.len()
        )));
    }
    let mean = x.iter().copied().sum::<T>() / T::lit(x.len() as f64);
    Ok(TangentVector(x.iter().map(|&v| v - mean).collect()))
}

/// Replicator map `R_p x = Diag(p) x − ⟨p, x⟩ p`.
pub fn replicator_map<T: Real>(p: &ProbabilityVector<T>, x: &[T]) -> Result<TangentVector<T>> {
    same_len(p.len(), x.len())?;
    let p = p.as_slice();
    let px: T = p.iter().zip(x).map(|(&a, &b)| a * b).sum();
    Ok(TangentVector(
        p.iter().zip(x).map(|(&pi, &xi)| pi * xi - px * pi).collect(),
    ))
}

/// Writes `p ⊙ e^{x − max x}` normalized into `out`.
#[inline]
fn softmax_weighted_into<T: Real>(p: &[T], x: &[T], out: &mut [T]) {
    let m = x.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for ((o, &pi), &xi) in out.iter_mut().zip(p).zip(x) {
        *o = pi * (xi - m).exp();
        s += *o;
    }
    for o in out.iter_mut() {
        *o /= s;
    }
}

/// Affine e-geodesic exponential map `Exp_p(v) = p e^{v/p} / ⟨p, e^{v/p}⟩`.
pub fn exp_affine<T: Real>(
    p: &ProbabilityVector<T>,
    v: &TangentVector<T>,
) -> Result<ProbabilityVector<T>> {
    same_len(p.len(), v.len())?;
    if v.as_slice().iter().all(|x| x.is_zero()) {
        return Ok(p.clone());
    }
    let z: Vec<T> = v.as_slice().iter().zip(p.as_slice()).map(|(&vi, &pi)| vi / pi).collect();
    let mut out = vec![T::zero(); p.len()];
    softmax_weighted_into(p.as_slice(), &z, &mut out);
    clamp_interior(&mut out);
    Ok(ProbabilityVector(out))
}

/// Inverse of [`exp_affine`]: `Exp_p^{-1}(q) = R_p log(q/p)`.
pub fn exp_affine_inverse<T: Real>(
    p: &ProbabilityVector<T>,
    q: &ProbabilityVector<T>,
) -> Result<TangentVector<T>> {
    same_len(p.len(), q.len())?;
    let x: Vec<T> = q
        .as_slice()
        .iter()
        .zip(p.as_slice())
        .map(|(&qi, &pi)| (qi / pi).ln())
        .collect();
    replicator_map(p, &x)
}

/// Lifted exponential map `exp_p(x) = Exp_p(R_p x)`, i.e. `p e^{x}` normalized. Ignores any
/// constant component of `x`.
pub fn exp_lifted<T: Real>(p: &ProbabilityVector<T>, x: &[T]) -> Result<ProbabilityVector<T>> {
    same_len(p.len(), x.len())?;
    let mut out = vec![T::zero(); p.len()];
    exp_lifted_into(p.as_slice(), x, &mut out);
    Ok(ProbabilityVector(out))
}

/// Slice kernel behind [`exp_lifted`]; output is clamped into the interior.
#[inline]
pub fn exp_lifted_into<T: Real>(p: &[T], x: &[T], out: &mut [T]) {
    softmax_weighted_into(p, x, out);
    clamp_interior(out);
}

/// Unclamped variant of [`exp_lifted_into`], exposed for drift diagnostics.
#[inline]
pub fn exp_lifted_raw_into<T: Real>(p: &[T], x: &[T], out: &mut [T]) {
    softmax_weighted_into(p, x, out);
}

/// Row-stochastic `n × c` matrix with rows in the open simplex.
#[derive(Clone, Debug, PartialEq)]
pub struct AssignmentMatrix<T> {
    n: usize,
    c: usize,
    data: Vec<T>,
}

impl<T: Real> AssignmentMatrix<T> {
    /// Every row equal to the barycenter `1/c`.
    pub fn barycenter(n: usize, c: usize) -> Self {
        Self {
            n,
            c,
            data: vec![T::one() / T::lit(c as f64); n * c],
        }
    }

    pub fn from_vec(n: usize, c: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != n * c || c == 0 {
            return Err(Error::InvalidDimension(format!(
                "{} entries cannot form a {n}x{c} assignment matrix",
                data.len()
            )));
        }
        for row in data.chunks_exact(c) {
            check_simplex_row(row)?;
        }
        Ok(Self { n, c, data })
    }

    pub fn from_rows(rows: &[ProbabilityVector<T>]) -> Result<Self> {
        let c = rows.first().map_or(0, ProbabilityVector::len);
        if rows.iter().any(|r| r.len() != c) {
            return Err(Error::InvalidDimension("rows of unequal length".into()));
        }
        Ok(Self {
            n: rows.len(),
            c,
            data: rows.iter().flat_map(|r| r.as_slice().iter().copied()).collect(),
        })
    }

    /// Clamps each row into the interior; used for buffers produced by the flow kernels.
    pub(crate) fn from_raw_clamped(n: usize, c: usize, mut data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), n * c);
        data.par_chunks_mut(c).for_each(clamp_interior);
        Self { n, c, data }
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn c(&self) -> usize {
        self.c
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.c..(i + 1) * self.c]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[T]> {
        self.data.chunks_exact(self.c)
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    /// Row `i` as an owned [`ProbabilityVector`].
    pub fn row_vector(&self, i: usize) -> ProbabilityVector<T> {
        ProbabilityVector(self.row(i).to_vec())
    }

    /// Row-wise [`exp_lifted`] at this point with tangent data `x` (`n × c`, row-major).
    pub fn exp_lifted_rows(&self, x: &[T]) -> Result<Self> {
        same_len(self.data.len(), x.len())?;
        let c = self.c;
        let mut out = vec![T::zero(); self.data.len()];
        out.par_chunks_mut(c)
            .zip(self.data.par_chunks(c))
            .zip(x.par_chunks(c))
            .for_each(|((o, p), xi)| exp_lifted_into(p, xi, o));
        Ok(Self {
            n: self.n,
            c,
            data: out,
        })
    }
}

/// Matrix whose rows each sum to zero.
#[derive(Clone, Debug, PartialEq)]
pub struct TangentMatrix<T> {
    n: usize,
    c: usize,
    data: Vec<T>,
}

impl<T: Real> TangentMatrix<T> {
    /// Row-wise [`project_tangent`] of an `n × c` row-major buffer.
    pub fn project(n: usize, c: usize, x: &[T]) -> Result<Self> {
        same_len(n * c, x.len())?;
        let mut data = Vec::with_capacity(n * c);
        for row in x.chunks_exact(c) {
            data.extend(project_tangent(row)?.into_vec());
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
}

/// Shannon entropy of one simplex row.
#[inline]
pub fn row_entropy<T: Real>(row: &[T]) -> T {
    row.iter()
        .filter(|x| **x > T::zero())
        .map(|&x| -x * x.ln())
        .sum()
}

/// Mean Shannon entropy over rows, summed in a fixed pairwise order.
pub fn mean_entropy<T: Real>(w: &AssignmentMatrix<T>) -> T {
    if w.n() == 0 {
        return T::zero();
    }
    let per_row: Vec<T> = w.data.par_chunks(w.c).map(row_entropy).collect();
    pairwise_sum(&per_row) / T::lit(w.n() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pv(x: &[f64]) -> ProbabilityVector<f64> {
        ProbabilityVector::new(x.to_vec()).unwrap()
    }

    #[test]
    fn project_tangent_examples() {
        assert_eq!(project_tangent(&[1.0, 1.0, 1.0]).unwrap().as_slice(), &[0.0; 3]);
        assert_eq!(project_tangent(&[0.0, 0.0, 0.0]).unwrap().as_slice(), &[0.0; 3]);
        assert_eq!(project_tangent(&[3.0, 0.0, 0.0]).unwrap().as_slice(), &[2.0, -1.0, -1.0]);
        assert!(matches!(project_tangent(&[1.0]), Err(Error::InvalidDimension(_))));
    }

    #[test]
    fn replicator_examples() {
        let r = replicator_map(&pv(&[0.5, 0.5]), &[1.0, 0.0]).unwrap();
        assert_eq!(r.as_slice(), &[0.25, -0.25]);
        let p = pv(&[0.2, 0.3, 0.5]);
        let r = replicator_map(&p, &[1.0, 1.0, 1.0]).unwrap();
        assert!(r.as_slice().iter().all(|x| x.abs() < 1e-16));
        let third = 1.0 / 3.0;
        let r = replicator_map(&pv(&[third, third, third]), &[3.0, 0.0, 0.0]).unwrap();
        for (a, b) in r.as_slice().iter().zip([2.0 / 3.0, -1.0 / 3.0, -1.0 / 3.0]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(replicator_map(&p, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn exp_affine_examples() {
        let p = pv(&[0.5, 0.5]);
        assert_eq!(exp_affine(&p, &TangentVector::zeros(2)).unwrap(), p);
        let q = exp_affine(&p, &TangentVector::new(vec![0.5, -0.5]).unwrap()).unwrap();
        let e = std::f64::consts::E;
        let expect = [e / (e + 1.0 / e), (1.0 / e) / (e + 1.0 / e)];
        assert!((q.as_slice()[0] - expect[0]).abs() < 1e-15);
        assert!((q.as_slice()[0] - 0.880797).abs() < 1e-6);
        assert!((q.as_slice()[1] - 0.119203).abs() < 1e-6);

        let back = exp_affine_inverse(&p, &q).unwrap();
        assert!((back.as_slice()[0] - 0.5).abs() < 1e-12);
        assert!((back.as_slice()[1] + 0.5).abs() < 1e-12);
        assert!(exp_affine_inverse(&p, &p).unwrap().as_slice().iter().all(|x| x.abs() < 1e-16));
    }

    #[test]
    fn exp_affine_saturates_monotonically_toward_vertex() {
        let p = pv(&[0.9, 0.1]);
        let mut last = 0.0;
        for k in 0..60 {
            let t = 0.5 * k as f64;
            let q = exp_affine(&p, &TangentVector::new(vec![-t, t]).unwrap()).unwrap();
            let second = q.as_slice()[1];
            assert!(second >= last, "step {k}: {second} < {last}");
            assert!(q.as_slice().iter().all(|&x| x >= EPS_INTERIOR));
            last = second;
        }
        assert!(last > 1.0 - 1e-9);
    }

    #[test]
    fn non_interior_vectors_are_rejected() {
        assert!(matches!(
            ProbabilityVector::new(vec![1.0, 0.0]),
            Err(Error::Domain(_))
        ));
        assert!(ProbabilityVector::new(vec![0.5, 0.6]).is_err());
    }

    #[test]
    fn exp_lifted_examples() {
        let u = ProbabilityVector::<f64>::barycenter(3);
        let x = [0.3, -1.2, 2.0];
        let q = exp_lifted(&u, &x).unwrap();
        let z: f64 = x.iter().map(|v| v.exp()).sum();
        for (a, b) in q.as_slice().iter().zip(x.iter().map(|v| v.exp() / z)) {
            assert!((a - b).abs() < 1e-15);
        }
        let p = pv(&[0.2, 0.3, 0.5]);
        let q = exp_lifted(&p, &[7.5, 7.5, 7.5]).unwrap();
        for (a, b) in q.as_slice().iter().zip(p.as_slice()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn mean_entropy_examples() {
        let w = AssignmentMatrix::<f64>::barycenter(5, 4);
        assert!((mean_entropy(&w) - 4f64.ln()).abs() < 1e-14);

        let w = AssignmentMatrix::from_rows(&[pv(&[0.5, 0.5]), pv(&[0.9, 0.1])]).unwrap();
        let h2 = -(0.9f64 * 0.9f64.ln() + 0.1 * 0.1f64.ln());
        assert!((h2 - 0.325083).abs() < 1e-6);
        let expect = (2f64.ln() + h2) / 2.0;
        assert!((mean_entropy(&w) - expect).abs() < 1e-15);
        assert!((mean_entropy(&w) - 0.509115).abs() < 1e-6);

        let mut near_vertex = vec![EPS_INTERIOR; 3];
        near_vertex[1] = 1.0 - 2.0 * EPS_INTERIOR;
        let w = AssignmentMatrix::from_vec(1, 3, near_vertex).unwrap();
        assert!(mean_entropy(&w) < 1e-9);
    }

    #[test]
    fn clamp_keeps_rows_inside() {
        let mut row = vec![0.0, 1.0, 0.0];
        clamp_interior(&mut row);
        assert!(row.iter().all(|&x| x >= EPS_INTERIOR));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        let mut ok = vec![0.25, 0.75];
        clamp_interior(&mut ok);
        assert_eq!(ok, vec![0.25, 0.75]);
    }

    #[test]
    fn works_in_f32() {
        let p = ProbabilityVector::<f32>::new(vec![0.25, 0.75]).unwrap();
        let v = TangentVector::new(vec![0.1f32, -0.1]).unwrap();
        let q = exp_affine(&p, &v).unwrap();
        let back = exp_affine_inverse(&p, &q).unwrap();
        assert!((back.as_slice()[0] - 0.1).abs() < 1e-5);
    }

    fn interior(c: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.05f64..1.0, c).prop_map(|v| {
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect()
        })
    }

    proptest! {
        #[test]
        fn projection_is_idempotent(x in prop::collection::vec(-10.0f64..10.0, 2..12)) {
            let once = project_tangent(&x).unwrap();
            let twice = project_tangent(once.as_slice()).unwrap();
            for (a, b) in once.as_slice().iter().zip(twice.as_slice()) {
                prop_assert!((a - b).abs() < 1e-15 * 20.0);
            }
        }

        #[test]
        fn replicator_commutes_with_projection(
            (p, x) in (2usize..10).prop_flat_map(|c| (interior(c), prop::collection::vec(-5.0f64..5.0, c)))
        ) {
            let p = ProbabilityVector::new(p).unwrap();
            let rp = replicator_map(&p, &x).unwrap();
            let rp_pi = replicator_map(&p, project_tangent(&x).unwrap().as_slice()).unwrap();
            let pi_rp = project_tangent(rp.as_slice()).unwrap();
            for k in 0..x.len() {
                prop_assert!((rp.as_slice()[k] - rp_pi.as_slice()[k]).abs() < 1e-13);
                prop_assert!((rp.as_slice()[k] - pi_rp.as_slice()[k]).abs() < 1e-13);
            }
        }

        #[test]
        fn exp_affine_round_trip(
            (p, q) in (2usize..12).prop_flat_map(|c| (interior(c), interior(c)))
        ) {
            let p = ProbabilityVector::new(p).unwrap();
            let q = ProbabilityVector::new(q).unwrap();
            let v = exp_affine_inverse(&p, &q).unwrap();
            let back = exp_affine(&p, &v).unwrap();
            for (a, b) in back.as_slice().iter().zip(q.as_slice()) {
                prop_assert!((a - b).abs() < 1e-10);
            }
        }

        #[test]
        fn exp_lifted_ignores_constants(
            (p, x) in (2usize..10).prop_flat_map(|c| (interior(c), prop::collection::vec(-5.0f64..5.0, c)))
        ) {
            let p = ProbabilityVector::new(p).unwrap();
            let a = exp_lifted(&p, &x).unwrap();
            let shifted: Vec<f64> = x.iter().map(|v| v + 5.0).collect();
            let b = exp_lifted(&p, &shifted).unwrap();
            for (u, v) in a.as_slice().iter().zip(b.as_slice()) {
                prop_assert!((u - v).abs() < 1e-12);
            }
        }
    }
}
