//! The tangent-space observer: coupled `(x, Q)` integration with gain
//! `L = p Q Q~' H'`, the linear-observer special case, Lyapunov exponents of
//! the closed-loop error dynamics, and an extended Kalman-Bucy baseline.
//!
//! Twin runs co-integrate the truth with the estimator so the innovation at
//! every RK4 stage compares stage values of both trajectories; only the
//! per-step noise sample is held across a step. Holding the full observation
//! sample instead would force an `O(p ||z'|| dt)` error floor that defeats
//! machine-precision convergence.

use crate::error::{Error, Result};
use crate::linalg::{ensure_vector_finite, thin_qr_default, DenseMatrix, DenseVector};
use crate::lyapunov::{seeded_tangent_basis, tangent_rhs, LeEstimate};
use crate::models::{ModelSpec, ObservationProcess};
use crate::ode::{rk4_step, Coupled, TimeGrid};

/// Machine-convergence threshold at which a twin run stops early.
pub const MACHINE_CONVERGENCE_TOL: f64 = 1e-14;

/// Reporting threshold for `converged_at`.
pub const REPORT_CONVERGENCE_TOL: f64 = 1e-7;

/// Settings for an observer twin run.
#[derive(Debug, Clone)]
pub struct FilterConfig {
    /// Gain scale, strictly positive for a working observer.
    pub p: f64,
    /// Tangent basis width.
    pub k: usize,
    pub dt: f64,
    pub t_end: f64,
    pub q0_seed: u64,
    /// Error level defining `converged_at`.
    pub converge_tol: f64,
    /// Early-exit threshold; `None` always runs to `t_end`.
    pub stop_tol: Option<f64>,
    /// Error-norm recording stride in steps.
    pub snapshot_stride: usize,
}

impl FilterConfig {
    pub fn new(p: f64, k: usize, dt: f64, t_end: f64) -> Self {
        Self {
            p,
            k,
            dt,
            t_end,
            q0_seed: 0,
            converge_tol: REPORT_CONVERGENCE_TOL,
            stop_tol: Some(MACHINE_CONVERGENCE_TOL),
            snapshot_stride: 1,
        }
    }

    fn validate(&self, d: usize) -> Result<()> {
        if !(self.p > 0.0 && self.p.is_finite()) {
            return Err(Error::Invalid(format!(
                "gain scale must be positive, got {}",
                self.p
            )));
        }
        if self.k == 0 || self.k > d {
            return Err(Error::Dimension(format!(
                "tangent dimension must satisfy 1 <= k <= d = {d}, got {}",
                self.k
            )));
        }
        Ok(())
    }
}

/// Coupled observer state: the estimate and its tangent basis.
#[derive(Debug, Clone)]
pub struct FilterState {
    pub x: DenseVector,
    pub q: DenseMatrix,
    pub t: f64,
}

impl FilterState {
    /// Start from an estimate with a seeded random orthonormal basis.
    pub fn seeded(x0: DenseVector, k: usize, q0_seed: u64) -> Result<Self> {
        ensure_vector_finite(&x0, "filter initial state")?;
        let q = seeded_tangent_basis(x0.len(), k, q0_seed)?;
        Ok(Self { x: x0, q, t: 0.0 })
    }
}

/// Observer gain `L = p Q Q~' H'` with `Q~ R~` the thin QR factorization of
/// `H'H Q`. Zero columns of `Q~` (rank-deficient observation of the tangent
/// subspace) contribute nothing to the gain.
pub fn gain(q: &DenseMatrix, h: &DenseMatrix, p: f64) -> Result<DenseMatrix> {
    if h.ncols() != q.nrows() {
        return Err(Error::Dimension(format!(
            "gain requires H with {} columns, got {}",
            q.nrows(),
            h.ncols()
        )));
    }
    if !(p >= 0.0 && p.is_finite()) {
        return Err(Error::Invalid(format!(
            "gain scale must be nonnegative, got {p}"
        )));
    }
    let ht = h.transpose();
    let hth = &ht * h;
    gain_cached(q, &ht, &hth, p)
}

fn gain_cached(q: &DenseMatrix, ht: &DenseMatrix, hth: &DenseMatrix, p: f64) -> Result<DenseMatrix> {
    let f = thin_qr_default(&(hth * q))?;
    Ok(p * (q * (f.q.transpose() * ht)))
}

fn reorthonormalize(q_raw: &DenseMatrix, t: f64) -> Result<DenseMatrix> {
    let f = thin_qr_default(q_raw)?;
    if f.rank < q_raw.ncols() {
        let column = f.zero_columns().first().copied().unwrap_or(0);
        return Err(Error::TangentCollapse { t, column });
    }
    Ok(f.q)
}

/// One RK4 step of the coupled system
/// `x' = f(t, x) + L (y - Hx)`, `Q' = (I - QQ')Df(t, x)Q + QS`,
/// with the gain recomputed from the stage value of `Q` at every stage and
/// the supplied observation sample held constant across the step. `Q` is
/// re-orthonormalized afterwards.
///
/// This is the streaming entry point for externally sampled observations;
/// twin experiments use [`run_filter`], which evaluates the innovation
/// against the co-integrated truth at every stage.
pub fn filter_step(
    model: &ModelSpec,
    h: &DenseMatrix,
    y_t: &DenseVector,
    state: &FilterState,
    p: f64,
    dt: f64,
) -> Result<FilterState> {
    if h.ncols() != model.d || state.x.len() != model.d || state.q.nrows() != model.d {
        return Err(Error::Dimension(
            "filter_step operands must match the model dimension".to_string(),
        ));
    }
    if y_t.len() != h.nrows() {
        return Err(Error::Dimension(format!(
            "observation sample must have length {}, got {}",
            h.nrows(),
            y_t.len()
        )));
    }
    let ht = h.transpose();
    let hth = &ht * h;
    let mut rhs = |tau: f64, s: &Coupled<DenseVector, DenseMatrix>| {
        let a = model.jacobian(tau, &s.a);
        let l = gain_cached(&s.b, &ht, &hth, p)?;
        // the innovation is formed first so an exact zero stays exactly
        // zero through the coupling product
        let innovation = y_t - h * &s.a;
        let dx = model.rhs(tau, &s.a) + &l * innovation;
        let dq = tangent_rhs(&a, &s.b)?;
        Ok(Coupled::new(dx, dq))
    };
    let next = rk4_step(
        &mut rhs,
        state.t,
        &Coupled::new(state.x.clone(), state.q.clone()),
        dt,
    )?;
    let q = reorthonormalize(&next.b, state.t + dt)?;
    Ok(FilterState {
        x: next.a,
        q,
        t: state.t + dt,
    })
}

/// Error time series of a twin run.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub times: Vec<f64>,
    /// `||x - z||` at each snapshot.
    pub error_norms: Vec<f64>,
    /// First snapshot time at which the error dropped below the configured
    /// convergence tolerance.
    pub converged_at: Option<f64>,
    pub final_error: f64,
}

impl RunResult {
    fn from_series(times: Vec<f64>, error_norms: Vec<f64>, converge_tol: f64) -> Self {
        let converged_at = times
            .iter()
            .zip(error_norms.iter())
            .find(|(_, &e)| e < converge_tol)
            .map(|(&t, _)| t);
        let final_error = *error_norms.last().expect("run produced no snapshots");
        Self {
            times,
            error_norms,
            converged_at,
            final_error,
        }
    }
}

/// Truth, estimate, and tangent basis advanced as one coupled state.
type TwinState = Coupled<Coupled<DenseVector, DenseVector>, DenseMatrix>;

fn twin_observer_run(
    model: &ModelSpec,
    obs: &ObservationProcess,
    truth_z0: &DenseVector,
    x0: &DenseVector,
    cfg: &FilterConfig,
) -> Result<RunResult> {
    cfg.validate(model.d)?;
    let h = &obs.h;
    if h.ncols() != model.d || x0.len() != model.d || truth_z0.len() != model.d {
        return Err(Error::Dimension(
            "observer operands must match the model dimension".to_string(),
        ));
    }
    ensure_vector_finite(truth_z0, "truth initial state")?;
    ensure_vector_finite(x0, "filter initial state")?;
    let grid = TimeGrid::new(0.0, cfg.t_end, cfg.dt)?;
    let n = grid.n_steps();
    let ht = h.transpose();
    let hth = &ht * h;
    let stride = cfg.snapshot_stride.max(1);

    let q0 = seeded_tangent_basis(model.d, cfg.k, cfg.q0_seed)?;
    let mut state: TwinState = Coupled::new(Coupled::new(truth_z0.clone(), x0.clone()), q0);

    let mut times = Vec::with_capacity(n / stride + 2);
    let mut errors = Vec::with_capacity(n / stride + 2);
    times.push(0.0);
    errors.push((&state.a.b - &state.a.a).norm());

    for i in 0..n {
        let t = grid.time(i);
        let dt_i = grid.step_size(i);
        let noise = obs.noise_vector(i as u64);

        let mut rhs = |tau: f64, s: &TwinState| -> Result<TwinState> {
            let z_s = &s.a.a;
            let x_s = &s.a.b;
            let q_s = &s.b;
            let a = model.jacobian(tau, x_s);
            let l = gain_cached(q_s, &ht, &hth, cfg.p)?;
            // stage-exact innovation: identical truth/estimate states keep
            // it exactly zero, so the coupling adds nothing
            let innovation = h * (z_s - x_s) + &noise;
            let dz = model.rhs(tau, z_s);
            let dx = model.rhs(tau, x_s) + &l * innovation;
            let dq = tangent_rhs(&a, q_s)?;
            Ok(Coupled::new(Coupled::new(dz, dx), dq))
        };
        let next = rk4_step(&mut rhs, t, &state, dt_i)?;
        let t_next = grid.time_after(i);
        state = Coupled::new(next.a, reorthonormalize(&next.b, t_next)?);

        let err = (&state.a.b - &state.a.a).norm();
        if !err.is_finite() {
            return Err(Error::Divergence {
                t: t_next,
                what: "estimation error became non-finite".to_string(),
            });
        }
        let stopping = cfg.stop_tol.is_some_and(|tol| err < tol);
        if (i + 1) % stride == 0 || i + 1 == n || stopping {
            times.push(t_next);
            errors.push(err);
        }
        if stopping {
            break;
        }
    }
    Ok(RunResult::from_series(times, errors, cfg.converge_tol))
}

/// Twin experiment: co-integrate the truth from `truth_z0` and the observer
/// from `x0`, observing the truth through `obs`. The smooth part of the
/// observation is evaluated at every RK4 stage; the noise sample of each
/// step is held across it.
pub fn run_filter(
    model: &ModelSpec,
    obs: &ObservationProcess,
    truth_z0: &DenseVector,
    x0: &DenseVector,
    cfg: &FilterConfig,
) -> Result<RunResult> {
    twin_observer_run(model, obs, truth_z0, x0, cfg)
}

/// Linear-observer special case: identical machinery with `f(t, x) = A(t)x`
/// and the Jacobian `A(t)` itself.
pub fn run_linear_observer(
    a_of_t: impl Fn(f64) -> DenseMatrix + Send + Sync + 'static,
    obs: &ObservationProcess,
    truth_z0: &DenseVector,
    x0: &DenseVector,
    cfg: &FilterConfig,
) -> Result<RunResult> {
    let model = ModelSpec::linear_tv(x0.len(), a_of_t);
    twin_observer_run(&model, obs, truth_z0, x0, cfg)
}

/// Lyapunov exponents of the closed-loop error dynamics
/// `W' = (A(t) - L(t)H)W` along the filter trajectory, with
/// `A(t) = Df(t, x(t))` and `L` the observer gain recomputed from the
/// filter's own tangent basis. `p = 0` recovers the model's spectrum.
#[allow(clippy::too_many_arguments)]
pub fn error_tangent_les(
    model: &ModelSpec,
    obs: &ObservationProcess,
    truth_z0: &DenseVector,
    x0: &DenseVector,
    p: f64,
    filter_k: usize,
    k_eval: usize,
    t_avg: f64,
    dt: f64,
    q0_seed: u64,
) -> Result<LeEstimate> {
    let d = model.d;
    if filter_k == 0 || filter_k > d || k_eval == 0 || k_eval > d {
        return Err(Error::Dimension(format!(
            "tangent dimensions must satisfy 1 <= k <= d = {d}"
        )));
    }
    if !(p >= 0.0 && p.is_finite()) {
        return Err(Error::Invalid(format!(
            "gain scale must be nonnegative, got {p}"
        )));
    }
    let h = &obs.h;
    let ht = h.transpose();
    let hth = &ht * h;

    // truth and estimate, then the filter basis and the evaluation basis
    type Quad = Coupled<Coupled<DenseVector, DenseVector>, Coupled<DenseMatrix, DenseMatrix>>;
    let qf0 = seeded_tangent_basis(d, filter_k, q0_seed)?;
    let w0 = seeded_tangent_basis(d, k_eval, crate::seeds::derive_stream(q0_seed, 0x3E))?;
    let mut state: Quad = Coupled::new(
        Coupled::new(truth_z0.clone(), x0.clone()),
        Coupled::new(qf0, w0),
    );

    let closed_loop = |tau: f64, x: &DenseVector, qf: &DenseMatrix| -> Result<DenseMatrix> {
        let a = model.jacobian(tau, x);
        let l = gain_cached(qf, &ht, &hth, p)?;
        Ok(a - l * h)
    };
    let diag_of = |a_eff: &DenseMatrix, w: &DenseMatrix| {
        let aw = a_eff * w;
        DenseVector::from_fn(k_eval, |i, _| w.column(i).dot(&aw.column(i)))
    };

    let grid = TimeGrid::new(0.0, t_avg, dt)?;
    let mut integrals = DenseVector::zeros(k_eval);
    let mut pending = diag_of(&closed_loop(0.0, &state.a.b, &state.b.a)?, &state.b.b);

    for i in 0..grid.n_steps() {
        let t = grid.time(i);
        let dt_i = grid.step_size(i);
        let noise = obs.noise_vector(i as u64);

        let mut rhs = |tau: f64, s: &Quad| -> Result<Quad> {
            let z_s = &s.a.a;
            let x_s = &s.a.b;
            let qf_s = &s.b.a;
            let w_s = &s.b.b;
            let a = model.jacobian(tau, x_s);
            let l = gain_cached(qf_s, &ht, &hth, p)?;
            let innovation = h * (z_s - x_s) + &noise;
            let dz = model.rhs(tau, z_s);
            let dx = model.rhs(tau, x_s) + &l * innovation;
            let dq = tangent_rhs(&a, qf_s)?;
            let a_eff = a - l * h;
            let dw = tangent_rhs(&a_eff, w_s)?;
            Ok(Coupled::new(Coupled::new(dz, dx), Coupled::new(dq, dw)))
        };
        let next = rk4_step(&mut rhs, t, &state, dt_i)?;
        let t_next = grid.time_after(i);
        let qf = reorthonormalize(&next.b.a, t_next)?;
        let w = reorthonormalize(&next.b.b, t_next)?;
        state = Coupled::new(next.a, Coupled::new(qf, w));

        let cur = diag_of(
            &closed_loop(t_next, &state.a.b, &state.b.a)?,
            &state.b.b,
        );
        integrals.axpy(0.5 * dt_i, &pending, 1.0);
        integrals.axpy(0.5 * dt_i, &cur, 1.0);
        pending = cur;
    }

    let elapsed = grid.t_end();
    let values: Vec<f64> = (&integrals / elapsed).iter().copied().collect();
    Ok(LeEstimate {
        values,
        t_avg: elapsed,
        history: None,
    })
}

/// Mean and covariance of the extended Kalman-Bucy baseline.
#[derive(Debug, Clone)]
pub struct ExkfState {
    pub m: DenseVector,
    pub p_cov: DenseMatrix,
    pub t: f64,
}

impl ExkfState {
    pub fn new(m: DenseVector, p_cov: DenseMatrix) -> Result<Self> {
        if p_cov.nrows() != m.len() || p_cov.ncols() != m.len() {
            return Err(Error::Dimension(
                "covariance must be square with the state dimension".to_string(),
            ));
        }
        Ok(Self { m, p_cov, t: 0.0 })
    }
}

/// Relative bound on how negative the smallest covariance eigenvalue may go
/// before the run is declared failed.
const PSD_TOL: f64 = 1e-8;

fn norm_inf(m: &DenseMatrix) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..m.nrows() {
        let mut row = 0.0;
        for j in 0..m.ncols() {
            row += m[(i, j)].abs();
        }
        worst = worst.max(row);
    }
    worst
}

fn check_psd(p_cov: &DenseMatrix, scale: f64, t: f64) -> Result<()> {
    let shift = PSD_TOL * scale;
    let d = p_cov.nrows();
    let shifted = p_cov + DenseMatrix::identity(d, d) * shift;
    if nalgebra::Cholesky::new(shifted).is_some() {
        return Ok(());
    }
    let eig = nalgebra::SymmetricEigen::new(p_cov.clone());
    let lambda_min = eig
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    Err(Error::CovarianceIndefinite { t, lambda_min })
}

#[allow(clippy::too_many_arguments)]
fn exkf_rhs(
    model: &ModelSpec,
    h: &DenseMatrix,
    ht: &DenseMatrix,
    c: &DenseMatrix,
    innovation: DenseVector,
    tau: f64,
    m: &DenseVector,
    p_cov: &DenseMatrix,
) -> Coupled<DenseVector, DenseMatrix> {
    let a = model.jacobian(tau, m);
    let phc = (p_cov * ht) * c;
    let dm = model.rhs(tau, m) + &phc * innovation;
    let dp = &a * p_cov + p_cov * a.transpose() - &phc * (h * p_cov);
    Coupled::new(dm, dp)
}

/// One RK4 step of the coupled mean/covariance system
/// `m' = f(t, m) + P H' C (y - Hm)`,
/// `P' = Df P + P Df' - P H' C H P`,
/// with the supplied observation sample held across the step. The
/// covariance is symmetrized afterwards and checked for positive
/// semidefiniteness.
pub fn exkf_step(
    model: &ModelSpec,
    h: &DenseMatrix,
    c: &DenseMatrix,
    y_t: &DenseVector,
    state: &ExkfState,
    dt: f64,
) -> Result<ExkfState> {
    let d = model.d;
    let s = h.nrows();
    if h.ncols() != d || state.m.len() != d {
        return Err(Error::Dimension(
            "exkf_step operands must match the model dimension".to_string(),
        ));
    }
    if c.nrows() != s || c.ncols() != s || y_t.len() != s {
        return Err(Error::Dimension(
            "exkf_step weighting and observation must match the output dimension".to_string(),
        ));
    }
    let ht = h.transpose();
    let mut rhs = |tau: f64, st: &Coupled<DenseVector, DenseMatrix>| {
        let innovation = y_t - h * &st.a;
        Ok(exkf_rhs(model, h, &ht, c, innovation, tau, &st.a, &st.b))
    };
    let next = rk4_step(
        &mut rhs,
        state.t,
        &Coupled::new(state.m.clone(), state.p_cov.clone()),
        dt,
    )?;
    let p_cov = 0.5 * (&next.b + next.b.transpose());
    let t = state.t + dt;
    check_psd(&p_cov, norm_inf(&p_cov), t)?;
    Ok(ExkfState {
        m: next.a,
        p_cov,
        t,
    })
}

/// Snapshot cadence of the baseline runs (in steps).
const EXKF_SNAPSHOT_STRIDE: usize = 10;

/// Twin experiment for the extended Kalman-Bucy baseline with
/// `P(0) = p0_scale I`. Truth and filter are co-integrated as in
/// [`run_filter`].
#[allow(clippy::too_many_arguments)]
pub fn run_exkf(
    model: &ModelSpec,
    obs: &ObservationProcess,
    truth_z0: &DenseVector,
    x0: &DenseVector,
    p0_scale: f64,
    c: &DenseMatrix,
    dt: f64,
    t_end: f64,
) -> Result<RunResult> {
    let d = model.d;
    if !(p0_scale > 0.0 && p0_scale.is_finite()) {
        return Err(Error::Invalid(format!(
            "initial covariance scale must be positive, got {p0_scale}"
        )));
    }
    let h = &obs.h;
    if h.ncols() != d || x0.len() != d || truth_z0.len() != d {
        return Err(Error::Dimension(
            "run_exkf operands must match the model dimension".to_string(),
        ));
    }
    let s = h.nrows();
    if c.nrows() != s || c.ncols() != s {
        return Err(Error::Dimension(
            "observation weighting must match the output dimension".to_string(),
        ));
    }
    let ht = h.transpose();
    let grid = TimeGrid::new(0.0, t_end, dt)?;
    let n = grid.n_steps();

    type ExkfTwin = Coupled<Coupled<DenseVector, DenseVector>, DenseMatrix>;
    let mut state: ExkfTwin = Coupled::new(
        Coupled::new(truth_z0.clone(), x0.clone()),
        DenseMatrix::identity(d, d) * p0_scale,
    );

    let mut times = Vec::with_capacity(n / EXKF_SNAPSHOT_STRIDE + 2);
    let mut errors = Vec::with_capacity(n / EXKF_SNAPSHOT_STRIDE + 2);
    times.push(0.0);
    errors.push((&state.a.b - &state.a.a).norm());

    // the Riccati flow contracts the covariance by many orders over a run
    // while rounding debris stays absolute, so indefiniteness is judged
    // against the largest covariance seen rather than the current one
    let mut psd_scale = norm_inf(&state.b);

    for i in 0..n {
        let t = grid.time(i);
        let dt_i = grid.step_size(i);
        let noise = obs.noise_vector(i as u64);

        let mut rhs = |tau: f64, st: &ExkfTwin| -> Result<ExkfTwin> {
            let z_s = &st.a.a;
            let m_s = &st.a.b;
            let innovation = h * (z_s - m_s) + &noise;
            let dz = model.rhs(tau, z_s);
            let core = exkf_rhs(model, h, &ht, c, innovation, tau, m_s, &st.b);
            Ok(Coupled::new(Coupled::new(dz, core.a), core.b))
        };
        let next = rk4_step(&mut rhs, t, &state, dt_i)?;
        let t_next = grid.time_after(i);
        let p_cov = 0.5 * (&next.b + next.b.transpose());
        psd_scale = psd_scale.max(norm_inf(&p_cov));
        check_psd(&p_cov, psd_scale, t_next)?;
        state = Coupled::new(next.a, p_cov);

        let err = (&state.a.b - &state.a.a).norm();
        if !err.is_finite() {
            return Err(Error::Divergence {
                t: t_next,
                what: "ExKF estimation error became non-finite".to_string(),
            });
        }
        if (i + 1) % EXKF_SNAPSHOT_STRIDE == 0 || i + 1 == n {
            times.push(t_next);
            errors.push(err);
        }
    }
    Ok(RunResult::from_series(
        times,
        errors,
        REPORT_CONVERGENCE_TOL,
    ))
}
