//! Geometry of the cone of symmetric positive definite matrices: affine-invariant
//! distance and exponential map, the Stein divergence, and three weighted means.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{Mat, SymEig};
use crate::scalar::Real;

/// Symmetric positive definite matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SpdMatrix<T>(Mat<T>);

impl<T: Real> SpdMatrix<T> {
    pub fn new(m: Mat<T>) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::InvalidDimension(format!(
                "SPD matrix must be square, got {}x{}",
                m.rows(),
                m.cols()
            )));
        }
        if !m.is_finite() {
            return Err(Error::Domain("SPD matrix has non-finite entries".into()));
        }
        if !m.is_symmetric(T::tol(1e-10)) {
            return Err(Error::Domain(format!(
                "matrix is not symmetric (relative asymmetry {})",
                m.asymmetry()
            )));
        }
        let m = m.symmetrize();
        m.cholesky()?;
        Ok(Self(m))
    }

    /// Wraps a matrix known to be SPD, symmetrizing away rounding noise.
    pub(crate) fn new_unchecked(m: Mat<T>) -> Self {
        Self(m.symmetrize())
    }

    pub fn identity(d: usize) -> Self {
        Self(Mat::identity(d))
    }

    pub fn from_diag(diag: &[T]) -> Result<Self> {
        Self::new(Mat::from_diag(diag))
    }

    pub fn dim(&self) -> usize {
        self.0.rows()
    }

    pub fn as_mat(&self) -> &Mat<T> {
        &self.0
    }

    pub fn into_mat(self) -> Mat<T> {
        self.0
    }

    pub fn cholesky(&self) -> Mat<T> {
        self.0.cholesky().expect("SPD invariant guarantees a Cholesky factor")
    }

    /// `log det` from the Cholesky diagonal.
    pub fn log_det(&self) -> T {
        let l = self.cholesky();
        T::lit(2.0) * l.diag().into_iter().map(|x| x.ln()).sum::<T>()
    }

    pub fn inverse(&self) -> Self {
        let li = self.cholesky().lower_inverse();
        Self::new_unchecked(li.transpose().matmul(&li))
    }

    pub fn eig(&self) -> SymEig<T> {
        self.0.sym_eig().expect("SPD invariant guarantees symmetry")
    }

    pub fn sqrt(&self) -> Self {
        Self::new_unchecked(self.eig().reconstruct_with(|l| l.sqrt()))
    }

    /// `(S^{1/2}, S^{-1/2})` from one eigendecomposition.
    pub fn sqrt_and_inv_sqrt(&self) -> (Mat<T>, Mat<T>) {
        let e = self.eig();
        (
            e.reconstruct_with(|l| l.sqrt()),
            e.reconstruct_with(|l| T::one() / l.sqrt()),
        )
    }

    /// `λ_max / λ_min`.
    pub fn condition_number(&self) -> T {
        let e = self.eig();
        e.max() / e.min()
    }

    pub fn scale(&self, a: T) -> Result<Self> {
        Self::new(self.0.scale(a))
    }
}

/// Sample of a weighted mean problem.
#[derive(Clone, Debug)]
pub struct WeightedSample<T> {
    pub matrix: SpdMatrix<T>,
    pub weight: T,
}

impl<T: Real> WeightedSample<T> {
    /// Equal weights `1/N`.
    pub fn uniform(mats: &[SpdMatrix<T>]) -> Vec<Self> {
        let w = T::one() / T::lit(mats.len() as f64);
        mats.iter()
            .map(|m| Self {
                matrix: m.clone(),
                weight: w,
            })
            .collect()
    }

    /// Pairs matrices with weights, normalizing them to sum to one.
    pub fn weighted(mats: &[SpdMatrix<T>], weights: &[T]) -> Result<Vec<Self>> {
        if mats.len() != weights.len() {
            return Err(Error::InvalidDimension(format!(
                "{} samples but {} weights",
                mats.len(),
                weights.len()
            )));
        }
        let total: T = weights.iter().copied().sum();
        if weights.iter().any(|w| !(*w > T::zero())) || !total.is_finite() {
            return Err(Error::Domain("sample weights must be positive".into()));
        }
        Ok(mats
            .iter()
            .zip(weights)
            .map(|(m, &w)| Self {
                matrix: m.clone(),
                weight: w / total,
            })
            .collect())
    }
}

fn check_samples<T: Real>(samples: &[WeightedSample<T>]) -> Result<usize> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Precondition("mean of an empty sample set".into()))?;
    let d = first.matrix.dim();
    if samples.iter().any(|s| s.matrix.dim() != d) {
        return Err(Error::InvalidDimension("samples of unequal dimension".into()));
    }
    if samples.iter().any(|s| !(s.weight > T::zero())) {
        return Err(Error::Domain("sample weights must be positive".into()));
    }
    let total: T = samples.iter().map(|s| s.weight).sum();
    if (total - T::one()).abs() > T::tol(1e-12) * T::lit(samples.len() as f64) {
        return Err(Error::Domain(format!("sample weights sum to {total}, not 1")));
    }
    Ok(d)
}

/// Step-size rule for [`riemannian_mean`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum StepRule {
    /// `α_t` accumulates `log c_k / (c_k − 1)` over all iterations so far.
    #[default]
    Accumulated,
    /// `α_t`, `β_t` from the current condition number only.
    SingleStep,
}

/// Termination and step parameters shared by the iterative means.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanConfig<T> {
    pub tolerance: T,
    pub max_iters: usize,
    /// Step `h` of the Stein-mean iteration, in `(0, 1]`.
    pub stein_step: T,
    pub step_rule: StepRule,
}

impl<T: Real> Default for MeanConfig<T> {
    fn default() -> Self {
        Self {
            tolerance: T::lit(1e-8),
            max_iters: 200,
            stein_step: T::lit(0.5),
            step_rule: StepRule::Accumulated,
        }
    }
}

impl<T: Real> MeanConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > T::zero()) {
            return Err(Error::Config("mean tolerance must be positive".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be at least 1".into()));
        }
        if !(self.stein_step > T::zero() && self.stein_step <= T::one()) {
            return Err(Error::Config("stein_step must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Eigendecomposition `S = V Diag(λ) Vᵀ` of a symmetric matrix, eigenvalues ascending.
pub fn sym_eig<T: Real>(s: &Mat<T>) -> Result<(Vec<T>, Mat<T>)> {
    let e = s.sym_eig()?;
    Ok((e.values, e.vectors))
}

/// Matrix exponential of a symmetric matrix.
pub fn matrix_exp<T: Real>(s: &Mat<T>) -> Result<SpdMatrix<T>> {
    let e = s.sym_eig()?;
    Ok(SpdMatrix::new_unchecked(e.reconstruct_with(|l| l.exp())))
}

/// Principal matrix logarithm of an SPD matrix (a symmetric matrix).
pub fn matrix_log<T: Real>(s: &SpdMatrix<T>) -> Mat<T> {
    s.eig().reconstruct_with(|l| l.ln())
}

/// Logarithm of a symmetric matrix that should be SPD; errors otherwise.
fn checked_log<T: Real>(m: &Mat<T>) -> Result<Mat<T>> {
    let e = m.symmetrize().sym_eig()?;
    if !(e.min() > T::zero()) {
        return Err(Error::Domain(format!(
            "logarithm of a matrix with eigenvalue {}",
            e.min()
        )));
    }
    Ok(e.reconstruct_with(|l| l.ln()))
}

fn same_dim<T: Real>(a: &SpdMatrix<T>, b: &SpdMatrix<T>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::InvalidDimension(format!(
            "SPD dimensions {} and {} differ",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// Generalized eigenvalues of the pencil `(T, S)`: eigenvalues of `L⁻¹ T L⁻ᵀ`, `S = L Lᵀ`.
pub fn generalized_eigenvalues<T: Real>(s: &SpdMatrix<T>, t: &SpdMatrix<T>) -> Result<Vec<T>> {
    same_dim(s, t)?;
    let li = s.cholesky().lower_inverse();
    let whitened = Mat::congruence(&li, t.as_mat()).symmetrize();
    Ok(whitened.sym_eig()?.values)
}

/// Affine-invariant Riemannian distance `(Σ log² λ_i(S, T))^{1/2}`.
pub fn riemannian_distance<T: Real>(s: &SpdMatrix<T>, t: &SpdMatrix<T>) -> Result<T> {
    let lambdas = generalized_eigenvalues(s, t)?;
    Ok(lambdas.iter().map(|l| l.ln() * l.ln()).sum::<T>().sqrt())
}

/// Riemannian exponential map `S^{1/2} expm(S^{-1/2} U S^{-1/2}) S^{1/2}`.
pub fn exp_map_spd<T: Real>(s: &SpdMatrix<T>, u: &Mat<T>) -> Result<SpdMatrix<T>> {
    if u.rows() != s.dim() || u.cols() != s.dim() {
        return Err(Error::InvalidDimension("tangent matrix dimension mismatch".into()));
    }
    if !u.is_symmetric(T::tol(1e-10)) {
        return Err(Error::Domain("tangent matrix must be symmetric".into()));
    }
    let (half, inv_half) = s.sqrt_and_inv_sqrt();
    let inner = matrix_exp(&Mat::congruence(&inv_half, u).symmetrize())?;
    Ok(SpdMatrix::new_unchecked(Mat::congruence(&half, inner.as_mat())))
}

/// Inverse of [`exp_map_spd`]: `S^{1/2} logm(S^{-1/2} T S^{-1/2}) S^{1/2}`.
pub fn log_map_spd<T: Real>(s: &SpdMatrix<T>, t: &SpdMatrix<T>) -> Result<Mat<T>> {
    same_dim(s, t)?;
    let (half, inv_half) = s.sqrt_and_inv_sqrt();
    let inner = checked_log(&Mat::congruence(&inv_half, t.as_mat()))?;
    Ok(Mat::congruence(&half, &inner).symmetrize())
}

/// Log-Euclidean mean `expm(Σ ω_i logm S_i)`.
pub fn log_euclidean_mean<T: Real>(samples: &[WeightedSample<T>]) -> Result<SpdMatrix<T>> {
    let d = check_samples(samples)?;
    if samples.len() == 1 {
        return Ok(samples[0].matrix.clone());
    }
    let mut acc = Mat::zeros(d, d);
    for s in samples {
        acc = &acc + &matrix_log(&s.matrix).scale(s.weight);
    }
    matrix_exp(&acc.symmetrize())
}

/// Stein divergence `logdet((S₁+S₂)/2) − ½ logdet(S₁ S₂)`.
pub fn stein_divergence<T: Real>(a: &SpdMatrix<T>, b: &SpdMatrix<T>) -> Result<T> {
    same_dim(a, b)?;
    Ok(stein_divergence_with_logdets(a, a.log_det(), b, b.log_det()))
}

/// [`stein_divergence`] with precomputed log-determinants; clamped at zero.
pub fn stein_divergence_with_logdets<T: Real>(
    a: &SpdMatrix<T>,
    logdet_a: T,
    b: &SpdMatrix<T>,
    logdet_b: T,
) -> T {
    let mid = (a.as_mat() + b.as_mat()).scale(T::lit(0.5));
    let l = mid
        .cholesky()
        .expect("sum of SPD matrices is SPD");
    let logdet_mid = T::lit(2.0) * l.diag().into_iter().map(|x| x.ln()).sum::<T>();
    (logdet_mid - T::lit(0.5) * (logdet_a + logdet_b)).max(T::zero())
}

/// `‖Σ ω_i logm(S^{1/2} S_i⁻¹ S^{1/2})‖_F`, which vanishes exactly at the Riemannian mean.
pub fn karcher_residual<T: Real>(s: &SpdMatrix<T>, samples: &[WeightedSample<T>]) -> Result<T> {
    let d = check_samples(samples)?;
    if s.dim() != d {
        return Err(Error::InvalidDimension("candidate mean dimension mismatch".into()));
    }
    let half = s.sqrt();
    let mut acc = Mat::zeros(d, d);
    for smp in samples {
        let inner = Mat::congruence(half.as_mat(), smp.matrix.inverse().as_mat());
        acc = &acc + &checked_log(&inner)?.scale(smp.weight);
    }
    Ok(acc.frobenius_norm())
}

/// Result of an iterative mean computation.
#[derive(Clone, Debug)]
pub struct MeanOutcome<T> {
    pub mean: SpdMatrix<T>,
    pub iterations: usize,
    pub residual: T,
}

/// `Σ ω_i logm(Lᵀ S_i⁻¹ L)` for `S = L Lᵀ`, an orthogonal similarity of the
/// residual matrix in [`karcher_residual`].
fn whitened_log_sum<T: Real>(l: &Mat<T>, inverses: &[(Mat<T>, T)]) -> Result<Mat<T>> {
    let d = l.rows();
    let lt = l.transpose();
    let mut acc = Mat::zeros(d, d);
    for (inv, w) in inverses {
        let inner = Mat::congruence(&lt, inv);
        acc = &acc + &checked_log(&inner)?.scale(*w);
    }
    Ok(acc.symmetrize())
}

/// Riemannian (Karcher) mean by the damped, Cholesky-parametrized fixed-point iteration
/// with condition-number step sizes, started at the Log-Euclidean mean.
pub fn riemannian_mean<T: Real>(
    samples: &[WeightedSample<T>],
    config: &MeanConfig<T>,
) -> Result<SpdMatrix<T>> {
    riemannian_mean_with_stats(samples, config).map(|o| o.mean)
}

pub fn riemannian_mean_with_stats<T: Real>(
    samples: &[WeightedSample<T>],
    config: &MeanConfig<T>,
) -> Result<MeanOutcome<T>> {
    finish(riemannian_iterate(samples, config)?)
}

/// Converts a best-effort outcome into a result, failing if the tolerance was not met.
fn finish<T: Real>((outcome, converged): (MeanOutcome<T>, bool)) -> Result<MeanOutcome<T>> {
    if converged {
        Ok(outcome)
    } else {
        Err(Error::Convergence {
            iterations: outcome.iterations,
            residual: outcome.residual.as_f64(),
        })
    }
}

pub(crate) fn riemannian_iterate<T: Real>(
    samples: &[WeightedSample<T>],
    config: &MeanConfig<T>,
) -> Result<(MeanOutcome<T>, bool)> {
    check_samples(samples)?;
    config.validate()?;
    let inverses: Vec<(Mat<T>, T)> = samples
        .iter()
        .map(|s| (s.matrix.inverse().into_mat(), s.weight))
        .collect();

    let mut s = log_euclidean_mean(samples)?;
    let mut l = s.cholesky();
    let mut g = whitened_log_sum(&l, &inverses)?;
    let mut residual = g.frobenius_norm();
    let mut alpha_acc = T::zero();

    for t in 0..config.max_iters {
        if residual <= config.tolerance {
            return Ok((
                MeanOutcome {
                    mean: s,
                    iterations: t,
                    residual,
                },
                true,
            ));
        }
        let c = s.condition_number();
        if c == T::one() {
            return Ok((
                MeanOutcome {
                    mean: s,
                    iterations: t,
                    residual,
                },
                true,
            ));
        }
        let ratio = c.ln() / (c - T::one());
        let alpha = match config.step_rule {
            StepRule::Accumulated => {
                alpha_acc += ratio;
                alpha_acc
            }
            StepRule::SingleStep => ratio,
        };
        let beta = c * ratio;
        let mut tau = T::lit(2.0) / (alpha + beta);

        // S − τ L G Lᵀ; halve τ if the update leaves the cone.
        let step = Mat::congruence(&l, &g);
        let mut next = None;
        for _ in 0..60 {
            let cand = (s.as_mat() - &step.scale(tau)).symmetrize();
            if let Ok(chol) = cand.cholesky() {
                next = Some((SpdMatrix::new_unchecked(cand), chol));
                break;
            }
            tau *= T::lit(0.5);
        }
        let (ns, nl) = next.ok_or(Error::Convergence {
            iterations: t,
            residual: residual.as_f64(),
        })?;
        s = ns;
        l = nl;
        g = whitened_log_sum(&l, &inverses)?;
        residual = g.frobenius_norm();
    }
    let converged = residual <= config.tolerance;
    Ok((
        MeanOutcome {
            mean: s,
            iterations: config.max_iters,
            residual,
        },
        converged,
    ))
}

/// `U = I − S^{1/2} (Σ ω_i ((S+S_i)/2)⁻¹) S^{1/2}`.
fn stein_direction<T: Real>(
    half: &Mat<T>,
    s: &SpdMatrix<T>,
    samples: &[WeightedSample<T>],
) -> Mat<T> {
    let d = s.dim();
    let mut r = Mat::zeros(d, d);
    for smp in samples {
        let mid = SpdMatrix::new_unchecked((s.as_mat() + smp.matrix.as_mat()).scale(T::lit(0.5)));
        r = &r + &mid.inverse().into_mat().scale(smp.weight);
    }
    (&Mat::identity(d) - &Mat::congruence(half, &r)).symmetrize()
}

/// Minimizer of `Σ ω_i D_S(S, S_i)` by geometric Euler steps on the Stein gradient flow,
/// started at the Log-Euclidean mean. The step halves whenever `‖U‖_F` would grow.
pub fn stein_mean<T: Real>(
    samples: &[WeightedSample<T>],
    config: &MeanConfig<T>,
) -> Result<SpdMatrix<T>> {
    stein_mean_with_stats(samples, config).map(|o| o.mean)
}

pub fn stein_mean_with_stats<T: Real>(
    samples: &[WeightedSample<T>],
    config: &MeanConfig<T>,
) -> Result<MeanOutcome<T>> {
    finish(stein_iterate(samples, config)?)
}

pub(crate) fn stein_iterate<T: Real>(
    samples: &[WeightedSample<T>],
    config: &MeanConfig<T>,
) -> Result<(MeanOutcome<T>, bool)> {
    check_samples(samples)?;
    config.validate()?;
    let mut s = log_euclidean_mean(samples)?;
    let mut half = s.sqrt().into_mat();
    let mut u = stein_direction(&half, &s, samples);
    let mut residual = u.frobenius_norm();
    let mut h = config.stein_step;

    for t in 0..config.max_iters {
        if residual <= config.tolerance {
            return Ok((
                MeanOutcome {
                    mean: s,
                    iterations: t,
                    residual,
                },
                true,
            ));
        }
        loop {
            let inner = matrix_exp(&u.scale(h * T::lit(0.5)))?;
            let cand = SpdMatrix::new_unchecked(Mat::congruence(&half, inner.as_mat()));
            let cand_half = cand.sqrt().into_mat();
            let cand_u = stein_direction(&cand_half, &cand, samples);
            let cand_res = cand_u.frobenius_norm();
            if cand_res <= residual || h < T::lit(1e-12) {
                s = cand;
                half = cand_half;
                u = cand_u;
                residual = cand_res;
                break;
            }
            h *= T::lit(0.5);
        }
    }
    let converged = residual <= config.tolerance;
    Ok((
        MeanOutcome {
            mean: s,
            iterations: config.max_iters,
            residual,
        },
        converged,
    ))
}

/// Draws `Σ_{k<dof} g_k g_kᵀ / dof` with standard normal `g_k ∈ R^d` (a normalized
/// Wishart sample); `dof ≥ d` gives an SPD matrix almost surely.
pub fn sample_wishart<T: Real, R: Rng + ?Sized>(rng: &mut R, d: usize, dof: usize) -> SpdMatrix<T> {
    assert!(dof >= d, "Wishart sample needs dof >= d");
    let mut acc = Mat::<T>::zeros(d, d);
    for _ in 0..dof {
        let g: Vec<T> = (0..d)
            .map(|_| T::lit(rng.sample::<f64, _>(StandardNormal)))
            .collect();
        for i in 0..d {
            for j in 0..d {
                acc[(i, j)] += g[i] * g[j];
            }
        }
    }
    let m = acc.scale(T::one() / T::lit(dof as f64));
    SpdMatrix::new(m).expect("Wishart sample with dof >= d is SPD")
}
