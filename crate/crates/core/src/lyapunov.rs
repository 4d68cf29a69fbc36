//! Continuous-QR computation of Lyapunov exponents and the orthonormal
//! non-stable tangent basis, for both the full (`k = d`) and thin (`k < d`)
//! flows, plus forward-regularity diagnostics.
//!
//! The tangent basis `Q` obeys `Q' = (I - QQ')AQ + QS` with `S` the
//! skew-symmetric projector of `Q'AQ`; exponents are time averages of the
//! diagonal of `Q'AQ`, which equals the diagonal of the triangularized flow.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{
    ensure_matrix_finite, skew_projector, thin_qr_default, DenseMatrix, DenseVector,
};
use crate::models::ModelSpec;
use crate::ode::{rk4_step, Coupled, TimeGrid};
use crate::seeds;

/// Orthonormality drift tolerated on a tangent basis between
/// re-orthonormalizations.
pub const ORTHONORMALITY_TOL: f64 = 1e-8;

/// Orthonormal basis of the leading tangent subspace together with the
/// accumulated exponent integrals.
#[derive(Debug, Clone)]
pub struct TangentBundle {
    /// `d x k` orthonormal basis.
    pub q: DenseMatrix,
    /// Accumulated integrals of the diagonal of `Q'AQ`, one per column.
    pub le_integrals: DenseVector,
    /// Current time.
    pub t: f64,
}

impl TangentBundle {
    /// Wrap an existing orthonormal basis; rejects bases that are not
    /// orthonormal to within [`ORTHONORMALITY_TOL`].
    pub fn from_basis(q: DenseMatrix) -> Result<Self> {
        ensure_matrix_finite(&q, "tangent basis")?;
        let k = q.ncols();
        if k > q.nrows() {
            return Err(Error::Dimension(format!(
                "tangent basis must be tall, got {}x{}",
                q.nrows(),
                k
            )));
        }
        let defect = (&q.transpose() * &q - DenseMatrix::identity(k, k))
            .iter()
            .fold(0.0f64, |acc, &v| acc.max(v.abs()));
        if defect > ORTHONORMALITY_TOL {
            return Err(Error::Invalid(format!(
                "tangent basis is not orthonormal (defect {defect:e})"
            )));
        }
        let le_integrals = DenseVector::zeros(k);
        Ok(Self {
            q,
            le_integrals,
            t: 0.0,
        })
    }

    /// Seeded random orthonormal basis. A dense standard-normal matrix has
    /// full column rank and a nontrivial projection onto every Lyapunov
    /// subspace almost surely.
    pub fn seeded(d: usize, k: usize, seed: u64) -> Result<Self> {
        Self::from_basis(seeded_tangent_basis(d, k, seed)?)
    }

    pub fn k(&self) -> usize {
        self.q.ncols()
    }

    /// Running averages `le_integrals / t`, or `None` before any time has
    /// elapsed.
    pub fn running_averages(&self) -> Option<DenseVector> {
        (self.t > 0.0).then(|| &self.le_integrals / self.t)
    }

    /// Drop accumulated integrals (used when a burn-in phase ends).
    pub fn reset_accumulation(&mut self) {
        self.le_integrals.fill(0.0);
    }
}

/// Seeded random orthonormal `d x k` matrix.
pub fn seeded_tangent_basis(d: usize, k: usize, seed: u64) -> Result<DenseMatrix> {
    if k == 0 || k > d {
        return Err(Error::Dimension(format!(
            "tangent basis requires 1 <= k <= d, got d = {d}, k = {k}"
        )));
    }
    let mut rng = seeds::stream_rng(seed, 0x51);
    let g = DenseMatrix::from_fn(d, k, |_, _| rng.sample(StandardNormal));
    let f = thin_qr_default(&g)?;
    if f.rank < k {
        return Err(Error::Invalid(
            "seeded tangent basis is rank deficient".to_string(),
        ));
    }
    Ok(f.q)
}

/// Right-hand side of the orthonormal tangent flow,
/// `(I - qq')Aq + qS` with `S = skew_projector(q'Aq)`. For `k = d` the
/// projected first term vanishes.
pub fn tangent_rhs(a: &DenseMatrix, q: &DenseMatrix) -> Result<DenseMatrix> {
    let d = q.nrows();
    if a.nrows() != d || a.ncols() != d {
        return Err(Error::Dimension(format!(
            "tangent_rhs requires a {d}x{d} system matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    let aq = a * q;
    let m = q.transpose() * &aq;
    let s = skew_projector(&m)?;
    // aq - q(m - s) = (I - qq')Aq + qS, with m - s upper-triangular
    Ok(&aq - q * (m - s))
}

/// Diagonal of `q'Aq`, the instantaneous exponent integrand.
fn growth_diagonal(a: &DenseMatrix, q: &DenseMatrix) -> DenseVector {
    let k = q.ncols();
    let aq = a * q;
    DenseVector::from_fn(k, |i, _| q.column(i).dot(&aq.column(i)))
}

/// Re-orthonormalize a propagated basis; a zero column after factorization
/// signals tangent collapse.
fn reorthonormalize(q_raw: &DenseMatrix, t: f64) -> Result<DenseMatrix> {
    let f = thin_qr_default(q_raw)?;
    if f.rank < q_raw.ncols() {
        let column = f.zero_columns().first().copied().unwrap_or(0);
        return Err(Error::TangentCollapse { t, column });
    }
    Ok(f.q)
}

/// Advance a tangent bundle one RK4 step of [`tangent_rhs`] under a
/// time-indexed system matrix, re-orthonormalize, and accumulate the
/// exponent integrals by trapezoidal quadrature of the step endpoints.
pub fn evolve_tangent<F>(a_of_t: &mut F, bundle: &TangentBundle, dt: f64) -> Result<TangentBundle>
where
    F: FnMut(f64) -> DenseMatrix,
{
    let t = bundle.t;
    let diag_before = growth_diagonal(&a_of_t(t), &bundle.q);
    let mut rhs =
        |tau: f64, q: &DenseMatrix| -> Result<DenseMatrix> { tangent_rhs(&a_of_t(tau), q) };
    let q_raw = rk4_step(&mut rhs, t, &bundle.q, dt)?;
    let q = reorthonormalize(&q_raw, t + dt)?;
    let diag_after = growth_diagonal(&a_of_t(t + dt), &q);
    let mut le_integrals = bundle.le_integrals.clone();
    le_integrals.axpy(0.5 * dt, &diag_before, 1.0);
    le_integrals.axpy(0.5 * dt, &diag_after, 1.0);
    Ok(TangentBundle {
        q,
        le_integrals,
        t: t + dt,
    })
}

/// Co-integrates a model trajectory and a tangent bundle along it, with
/// `A(t) = Df(t, x(t))` evaluated at every RK4 stage. Exposes the pair
/// between steps so callers can accumulate additional step-endpoint
/// quadratures.
pub struct TangentIntegrator<'m> {
    model: &'m ModelSpec,
    pub x: DenseVector,
    pub bundle: TangentBundle,
    pending_diag: DenseVector,
}

impl<'m> TangentIntegrator<'m> {
    pub fn new(model: &'m ModelSpec, x0: DenseVector, bundle: TangentBundle) -> Result<Self> {
        if x0.len() != model.d || bundle.q.nrows() != model.d {
            return Err(Error::Dimension(format!(
                "state/basis dimension must match the model dimension {}",
                model.d
            )));
        }
        let a0 = model.jacobian(bundle.t, &x0);
        let pending_diag = growth_diagonal(&a0, &bundle.q);
        Ok(Self {
            model,
            x: x0,
            bundle,
            pending_diag,
        })
    }

    /// One coupled RK4 step followed by re-orthonormalization and
    /// trapezoidal accumulation of the exponent integrals.
    pub fn step(&mut self, dt: f64) -> Result<()> {
        let model = self.model;
        let t = self.bundle.t;
        let mut rhs = |tau: f64, s: &Coupled<DenseVector, DenseMatrix>| {
            let a = model.jacobian(tau, &s.a);
            Ok(Coupled::new(model.rhs(tau, &s.a), tangent_rhs(&a, &s.b)?))
        };
        let state = Coupled::new(self.x.clone(), self.bundle.q.clone());
        let next = rk4_step(&mut rhs, t, &state, dt)?;
        let q = reorthonormalize(&next.b, t + dt)?;
        let a_end = model.jacobian(t + dt, &next.a);
        let diag_after = growth_diagonal(&a_end, &q);

        self.bundle
            .le_integrals
            .axpy(0.5 * dt, &self.pending_diag, 1.0);
        self.bundle.le_integrals.axpy(0.5 * dt, &diag_after, 1.0);
        self.pending_diag = diag_after;
        self.bundle.q = q;
        self.bundle.t = t + dt;
        self.x = next.a;
        Ok(())
    }
}

/// Sampled running averages of the exponent estimates.
#[derive(Debug, Clone)]
pub struct LeHistory {
    /// Times since the start of averaging.
    pub times: Vec<f64>,
    /// One row of `k` running averages per sampled time.
    pub values: Vec<Vec<f64>>,
}

/// Lyapunov exponent estimates at the end of an averaging run, ordered
/// non-increasing (guaranteed by the orthonormalization, checked on exit).
#[derive(Debug, Clone)]
pub struct LeEstimate {
    pub values: Vec<f64>,
    pub t_avg: f64,
    pub history: Option<LeHistory>,
}

impl LeEstimate {
    /// Count of exponents at least `-tol`.
    pub fn count_nonnegative(&self, tol: f64) -> usize {
        count_nonnegative(&self.values, tol)
    }
}

/// Count of values at least `-tol`.
pub fn count_nonnegative(values: &[f64], tol: f64) -> usize {
    values.iter().filter(|&&v| v >= -tol).count()
}

/// Slack allowed on the non-increasing ordering of computed exponents.
const ORDERING_SLACK: f64 = 1e-3;

fn check_ordering(values: &[f64]) -> Result<()> {
    for i in 1..values.len() {
        if values[i] > values[i - 1] + ORDERING_SLACK {
            return Err(Error::Invalid(format!(
                "exponent ordering violated: lambda_{} = {} exceeds lambda_{} = {}",
                i + 1,
                values[i],
                i,
                values[i - 1]
            )));
        }
    }
    Ok(())
}

/// Configuration for [`compute_les`].
#[derive(Debug, Clone)]
pub struct LeRunConfig {
    /// Number of leading exponents (tangent basis width).
    pub k: usize,
    /// Averaging horizon after burn-in.
    pub t_avg: f64,
    pub dt: f64,
    /// Transient discarded before averaging starts; covers both the base
    /// trajectory's approach to the attractor and the basis alignment.
    pub burn_in: f64,
    pub q0_seed: u64,
    /// Running-average sampling stride in steps; `None` targets about 2000
    /// history samples.
    pub history_stride: Option<usize>,
}

impl LeRunConfig {
    pub fn new(k: usize, t_avg: f64, dt: f64) -> Self {
        Self {
            k,
            t_avg,
            dt,
            burn_in: 100.0,
            q0_seed: 0,
            history_stride: None,
        }
    }
}

/// Leading Lyapunov exponents of a model along the trajectory from `x0`,
/// by co-integrating the base state and the tangent bundle and averaging
/// the triangularized growth diagonal.
pub fn compute_les(model: &ModelSpec, x0: &DenseVector, cfg: &LeRunConfig) -> Result<LeEstimate> {
    if cfg.k == 0 || cfg.k > model.d {
        return Err(Error::Dimension(format!(
            "compute_les requires 1 <= k <= d = {}, got k = {}",
            model.d, cfg.k
        )));
    }
    if !(cfg.t_avg > 0.0) {
        return Err(Error::Invalid(format!(
            "averaging horizon must be positive, got {}",
            cfg.t_avg
        )));
    }
    let bundle = TangentBundle::seeded(model.d, cfg.k, cfg.q0_seed)?;
    let mut integ = TangentIntegrator::new(model, x0.clone(), bundle)?;

    if cfg.burn_in > 0.0 {
        let grid = TimeGrid::new(0.0, cfg.burn_in, cfg.dt)?;
        for i in 0..grid.n_steps() {
            integ.step(grid.step_size(i))?;
        }
        integ.bundle.reset_accumulation();
    }

    let t_start = integ.bundle.t;
    let grid = TimeGrid::new(t_start, t_start + cfg.t_avg, cfg.dt)?;
    let n = grid.n_steps();
    let stride = cfg.history_stride.unwrap_or_else(|| (n / 2000).max(1));
    let mut history = LeHistory {
        times: Vec::with_capacity(n / stride + 1),
        values: Vec::with_capacity(n / stride + 1),
    };
    for i in 0..n {
        integ.step(grid.step_size(i))?;
        if (i + 1) % stride == 0 || i + 1 == n {
            let elapsed = integ.bundle.t - t_start;
            history.times.push(elapsed);
            history
                .values
                .push((&integ.bundle.le_integrals / elapsed).iter().copied().collect());
        }
    }

    let elapsed = integ.bundle.t - t_start;
    let values: Vec<f64> = (&integ.bundle.le_integrals / elapsed).iter().copied().collect();
    check_ordering(&values)?;
    Ok(LeEstimate {
        values,
        t_avg: elapsed,
        history: Some(history),
    })
}

/// Sup/inf spread of one exponent's running average over the trailing
/// window; the gap quantifies how far the run is from forward regularity.
#[derive(Debug, Clone)]
pub struct ExponentRange {
    pub sup: f64,
    pub inf: f64,
    pub gap: f64,
}

/// Per-exponent regularity ranges over the trailing half of the history.
#[derive(Debug, Clone)]
pub struct RegularityDiagnostic {
    pub ranges: Vec<ExponentRange>,
}

impl RegularityDiagnostic {
    pub fn max_gap(&self) -> f64 {
        self.ranges.iter().fold(0.0f64, |acc, r| acc.max(r.gap))
    }
}

/// Sup and inf of each running average over the trailing 50% of samples.
/// A forward-regular limit makes the gap shrink as the horizon grows.
pub fn regularity_check(history: &LeHistory) -> Result<RegularityDiagnostic> {
    let n = history.times.len();
    if n < 4 || history.values.len() != n {
        return Err(Error::InsufficientHistory(format!(
            "regularity_check needs at least 4 aligned samples, got {n}"
        )));
    }
    let k = history.values[0].len();
    let start = n / 2;
    let mut ranges = Vec::with_capacity(k);
    for j in 0..k {
        let mut sup = f64::NEG_INFINITY;
        let mut inf = f64::INFINITY;
        for row in &history.values[start..] {
            sup = sup.max(row[j]);
            inf = inf.min(row[j]);
        }
        ranges.push(ExponentRange {
            sup,
            inf,
            gap: sup - inf,
        });
    }
    Ok(RegularityDiagnostic { ranges })
}
