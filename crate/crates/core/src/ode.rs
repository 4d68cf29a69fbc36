//! Fixed-step explicit Runge-Kutta integration for vector, matrix and
//! coupled states, with per-step callbacks for re-orthonormalization and
//! observation coupling.

use crate::error::{Error, Result};
use crate::linalg::{DenseMatrix, DenseVector};

/// State shapes the RK4 stepper can advance. `combine` forms
/// `self + sum_i a_i * k_i` without mutating the inputs.
pub trait OdeState: Clone {
    fn combine(&self, terms: &[(f64, &Self)]) -> Self;
    fn all_finite(&self) -> bool;
}

impl OdeState for DenseVector {
    fn combine(&self, terms: &[(f64, &Self)]) -> Self {
        let mut out = self.clone();
        for &(a, k) in terms {
            out.axpy(a, k, 1.0);
        }
        out
    }

    fn all_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }
}

impl OdeState for DenseMatrix {
    fn combine(&self, terms: &[(f64, &Self)]) -> Self {
        let mut out = self.clone();
        for &(a, k) in terms {
            out.zip_apply(k, |o, kv| *o += a * kv);
        }
        out
    }

    fn all_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }
}

/// Two states advanced jointly, e.g. a base trajectory and a tangent basis,
/// or a mean and a covariance.
#[derive(Debug, Clone)]
pub struct Coupled<A, B> {
    pub a: A,
    pub b: B,
}

impl<A, B> Coupled<A, B> {
    pub fn new(a: A, b: B) -> Self {
        Self { a, b }
    }
}

impl<A: OdeState, B: OdeState> OdeState for Coupled<A, B> {
    fn combine(&self, terms: &[(f64, &Self)]) -> Self {
        let ta: Vec<(f64, &A)> = terms.iter().map(|&(c, s)| (c, &s.a)).collect();
        let tb: Vec<(f64, &B)> = terms.iter().map(|&(c, s)| (c, &s.b)).collect();
        Coupled {
            a: self.a.combine(&ta),
            b: self.b.combine(&tb),
        }
    }

    fn all_finite(&self) -> bool {
        self.a.all_finite() && self.b.all_finite()
    }
}

/// One classical fourth-order Runge-Kutta step.
///
/// The right-hand side may fail (it can embed factorizations); a non-finite
/// stage derivative is reported with the time at which it was produced.
pub fn rk4_step<S, F>(rhs: &mut F, t: f64, state: &S, dt: f64) -> Result<S>
where
    S: OdeState,
    F: FnMut(f64, &S) -> Result<S>,
{
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::Invalid(format!("rk4_step requires dt > 0, got {dt}")));
    }
    let half = 0.5 * dt;

    let k1 = rhs(t, state)?;
    if !k1.all_finite() {
        return Err(Error::NonFiniteDerivative { t });
    }
    let s2 = state.combine(&[(half, &k1)]);
    let k2 = rhs(t + half, &s2)?;
    if !k2.all_finite() {
        return Err(Error::NonFiniteDerivative { t: t + half });
    }
    let s3 = state.combine(&[(half, &k2)]);
    let k3 = rhs(t + half, &s3)?;
    if !k3.all_finite() {
        return Err(Error::NonFiniteDerivative { t: t + half });
    }
    let s4 = state.combine(&[(dt, &k3)]);
    let k4 = rhs(t + dt, &s4)?;
    if !k4.all_finite() {
        return Err(Error::NonFiniteDerivative { t: t + dt });
    }

    let sixth = dt / 6.0;
    let third = dt / 3.0;
    Ok(state.combine(&[(sixth, &k1), (third, &k2), (third, &k3), (sixth, &k4)]))
}

/// Uniform step schedule over `[t0, t_end]`. When the span is not an integer
/// multiple of `dt` the final step is shortened so `t_end` is hit exactly.
#[derive(Debug, Clone)]
pub struct TimeGrid {
    pub t0: f64,
    pub dt: f64,
    n_full: usize,
    last_dt: Option<f64>,
    t_end: f64,
}

impl TimeGrid {
    pub fn new(t0: f64, t_end: f64, dt: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::Invalid(format!("dt must be positive, got {dt}")));
        }
        if !(t_end > t0) || !t0.is_finite() || !t_end.is_finite() {
            return Err(Error::Invalid(format!(
                "time span must satisfy t_end > t0, got [{t0}, {t_end}]"
            )));
        }
        let span = t_end - t0;
        let steps = span / dt;
        if steps > 1e9 {
            return Err(Error::Invalid(format!(
                "step count {steps:.0} exceeds the representable budget"
            )));
        }
        let rounded = steps.round();
        let (n_full, last_dt) = if (steps - rounded).abs() <= 1e-9 * steps.max(1.0) {
            (rounded as usize, None)
        } else {
            let n = steps.floor() as usize;
            (n, Some(span - n as f64 * dt))
        };
        Ok(Self {
            t0,
            dt,
            n_full,
            last_dt,
            t_end,
        })
    }

    pub fn n_steps(&self) -> usize {
        self.n_full + usize::from(self.last_dt.is_some())
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    /// Time at the start of step `i`.
    pub fn time(&self, i: usize) -> f64 {
        self.t0 + i as f64 * self.dt
    }

    /// Time after step `i` has completed.
    pub fn time_after(&self, i: usize) -> f64 {
        if i + 1 == self.n_steps() {
            self.t_end
        } else {
            self.t0 + (i + 1) as f64 * self.dt
        }
    }

    pub fn step_size(&self, i: usize) -> f64 {
        if i < self.n_full {
            self.dt
        } else {
            self.last_dt.expect("step index out of range")
        }
    }
}

/// Configuration for [`integrate`].
#[derive(Debug, Clone)]
pub struct IntegratorConfig {
    pub dt: f64,
    pub t0: f64,
    pub t_end: f64,
    /// Snapshot stride; `None` keeps every step for runs of at most 1000
    /// steps and every 10th step beyond that.
    pub snapshot_stride: Option<usize>,
}

impl IntegratorConfig {
    pub fn new(t0: f64, t_end: f64, dt: f64) -> Self {
        Self {
            dt,
            t0,
            t_end,
            snapshot_stride: None,
        }
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.t0, self.t_end, self.dt)
    }

    fn resolved_stride(&self, n_steps: usize) -> usize {
        match self.snapshot_stride {
            Some(s) => s.max(1),
            None => {
                if n_steps <= 1000 {
                    1
                } else {
                    10
                }
            }
        }
    }
}

/// Vector trajectory snapshots at strictly increasing times.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<DenseVector>,
}

impl Trajectory {
    pub fn last(&self) -> (&f64, &DenseVector) {
        (
            self.times.last().expect("trajectory is never empty"),
            self.states.last().expect("trajectory is never empty"),
        )
    }
}

/// Repeated [`rk4_step`] over the configured grid. The callback runs after
/// every step and may replace the state in place (used for
/// re-orthonormalization and for injecting observation coupling).
pub fn integrate<F, C>(
    rhs: &mut F,
    cfg: &IntegratorConfig,
    x0: &DenseVector,
    mut on_step: Option<C>,
) -> Result<Trajectory>
where
    F: FnMut(f64, &DenseVector) -> Result<DenseVector>,
    C: FnMut(f64, &mut DenseVector),
{
    let grid = cfg.grid()?;
    let n = grid.n_steps();
    let stride = cfg.resolved_stride(n);

    let mut state = x0.clone();
    let mut times = Vec::with_capacity(n / stride + 2);
    let mut states = Vec::with_capacity(n / stride + 2);
    times.push(grid.t0);
    states.push(state.clone());

    for i in 0..n {
        let t = grid.time(i);
        state = rk4_step(rhs, t, &state, grid.step_size(i))?;
        let t_next = grid.time_after(i);
        if let Some(cb) = on_step.as_mut() {
            cb(t_next, &mut state);
        }
        if (i + 1) % stride == 0 || i + 1 == n {
            times.push(t_next);
            states.push(state.clone());
        }
    }
    Ok(Trajectory { times, states })
}
