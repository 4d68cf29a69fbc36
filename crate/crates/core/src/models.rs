//! Test systems: Lorenz '96 and an energy-conserving Burgers discretization,
//! each with analytic Jacobian and canonical initial conditions, plus the
//! noisy observation process.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{ensure_matrix_finite, DenseMatrix, DenseVector};
use crate::seeds;

type RhsFn = dyn Fn(f64, &DenseVector) -> DenseVector + Send + Sync;
type JacFn = dyn Fn(f64, &DenseVector) -> DenseMatrix + Send + Sync;

/// A model ODE `z' = f(t, z)` together with its Jacobian `Df(t, z)`.
#[derive(Clone)]
pub struct ModelSpec {
    pub d: usize,
    pub name: String,
    rhs: Arc<RhsFn>,
    jacobian: Arc<JacFn>,
}

impl std::fmt::Debug for ModelSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModelSpec")
            .field("d", &self.d)
            .field("name", &self.name)
            .finish()
    }
}

impl ModelSpec {
    pub fn new(
        d: usize,
        name: impl Into<String>,
        rhs: impl Fn(f64, &DenseVector) -> DenseVector + Send + Sync + 'static,
        jacobian: impl Fn(f64, &DenseVector) -> DenseMatrix + Send + Sync + 'static,
    ) -> Self {
        Self {
            d,
            name: name.into(),
            rhs: Arc::new(rhs),
            jacobian: Arc::new(jacobian),
        }
    }

    /// Lorenz '96 on a periodic lattice with constant forcing.
    pub fn lorenz96(d: usize, forcing: f64) -> Result<Self> {
        if d < 4 {
            return Err(Error::Dimension(format!(
                "lorenz96 requires d >= 4, got {d}"
            )));
        }
        Ok(Self::new(
            d,
            format!("l96(d={d},F={forcing})"),
            move |_t, z| l96_rhs(z, forcing).expect("dimension validated at construction"),
            move |_t, z| l96_jacobian(z, forcing).expect("dimension validated at construction"),
        ))
    }

    /// Energy-conserving Burgers discretization on a periodic lattice.
    pub fn burgers(d: usize) -> Result<Self> {
        if d < 3 {
            return Err(Error::Dimension(format!(
                "burgers requires d >= 3, got {d}"
            )));
        }
        Ok(Self::new(
            d,
            format!("burgers(d={d})"),
            move |_t, u| burgers_rhs(u).expect("dimension validated at construction"),
            move |_t, u| burgers_jacobian(u).expect("dimension validated at construction"),
        ))
    }

    /// Constant-coefficient linear model `z' = A z`.
    pub fn linear(a: DenseMatrix) -> Result<Self> {
        if a.nrows() != a.ncols() {
            return Err(Error::Dimension(format!(
                "linear model requires a square matrix, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        ensure_matrix_finite(&a, "linear model matrix")?;
        let d = a.nrows();
        let a2 = a.clone();
        Ok(Self::new(
            d,
            format!("linear(d={d})"),
            move |_t, z| &a * z,
            move |_t, _z| a2.clone(),
        ))
    }

    /// Time-varying linear model `z' = A(t) z`.
    pub fn linear_tv(
        d: usize,
        a_of_t: impl Fn(f64) -> DenseMatrix + Send + Sync + 'static,
    ) -> Self {
        let a_of_t = Arc::new(a_of_t);
        let a2 = Arc::clone(&a_of_t);
        Self::new(
            d,
            format!("linear_tv(d={d})"),
            move |t, z| a_of_t(t) * z,
            move |t, _z| a2(t),
        )
    }

    pub fn rhs(&self, t: f64, z: &DenseVector) -> DenseVector {
        (self.rhs)(t, z)
    }

    pub fn jacobian(&self, t: f64, z: &DenseVector) -> DenseMatrix {
        (self.jacobian)(t, z)
    }
}

/// Lorenz '96 right-hand side with cyclic indexing:
/// `z_i' = -z_{i-2} z_{i-1} + z_{i-1} z_{i+1} - z_i + F`.
pub fn l96_rhs(z: &DenseVector, forcing: f64) -> Result<DenseVector> {
    let d = z.len();
    if d < 4 {
        return Err(Error::Dimension(format!("l96_rhs requires d >= 4, got {d}")));
    }
    let mut dz = DenseVector::zeros(d);
    for i in 0..d {
        let im2 = z[(i + d - 2) % d];
        let im1 = z[(i + d - 1) % d];
        let ip1 = z[(i + 1) % d];
        dz[i] = -im2 * im1 + im1 * ip1 - z[i] + forcing;
    }
    Ok(dz)
}

/// Analytic Jacobian of [`l96_rhs`]; the trace is `-d` for every state.
pub fn l96_jacobian(z: &DenseVector, _forcing: f64) -> Result<DenseMatrix> {
    let d = z.len();
    if d < 4 {
        return Err(Error::Dimension(format!(
            "l96_jacobian requires d >= 4, got {d}"
        )));
    }
    let mut j = DenseMatrix::zeros(d, d);
    for i in 0..d {
        let im2 = (i + d - 2) % d;
        let im1 = (i + d - 1) % d;
        let ip1 = (i + 1) % d;
        j[(i, i)] += -1.0;
        j[(i, im1)] += z[ip1] - z[im2];
        j[(i, ip1)] += z[im1];
        j[(i, im2)] += -z[im1];
    }
    Ok(j)
}

/// Canonical Lorenz '96 initial profile `z_i(0) = sin(2 pi (i - 1) / d)`
/// for 1-based component index `i`.
pub fn l96_initial(d: usize) -> DenseVector {
    DenseVector::from_fn(d, |i, _| {
        (2.0 * std::f64::consts::PI * i as f64 / d as f64).sin()
    })
}

/// Energy-conserving Burgers right-hand side on a periodic lattice with
/// `dx = 2 pi / d`:
/// `u_i' = -(u_i (u_{i+1} - u_{i-1}) + u_{i+1}^2 - u_{i-1}^2) / (6 dx)`.
pub fn burgers_rhs(u: &DenseVector) -> Result<DenseVector> {
    let d = u.len();
    if d < 3 {
        return Err(Error::Dimension(format!(
            "burgers_rhs requires d >= 3, got {d}"
        )));
    }
    let dx = 2.0 * std::f64::consts::PI / d as f64;
    let c = -1.0 / (6.0 * dx);
    let mut du = DenseVector::zeros(d);
    for i in 0..d {
        let up = u[(i + 1) % d];
        let um = u[(i + d - 1) % d];
        du[i] = c * (u[i] * (up - um) + (up * up - um * um));
    }
    Ok(du)
}

/// Analytic Jacobian of [`burgers_rhs`]; its trace telescopes to zero.
pub fn burgers_jacobian(u: &DenseVector) -> Result<DenseMatrix> {
    let d = u.len();
    if d < 3 {
        return Err(Error::Dimension(format!(
            "burgers_jacobian requires d >= 3, got {d}"
        )));
    }
    let dx = 2.0 * std::f64::consts::PI / d as f64;
    let c = -1.0 / (6.0 * dx);
    let mut j = DenseMatrix::zeros(d, d);
    for i in 0..d {
        let ip1 = (i + 1) % d;
        let im1 = (i + d - 1) % d;
        j[(i, i)] += c * (u[ip1] - u[im1]);
        j[(i, ip1)] += c * (u[i] + 2.0 * u[ip1]);
        j[(i, im1)] += c * (-u[i] - 2.0 * u[im1]);
    }
    Ok(j)
}

/// Seeded uniform `U(0, 1)` initial profile for the Burgers runs.
pub fn burgers_initial(d: usize, seed: u64) -> DenseVector {
    let mut rng = seeds::stream_rng(seed, 0xB5);
    DenseVector::from_fn(d, |_, _| rng.random::<f64>())
}

/// Observation process `y = H z + sigma eta`, with `eta` drawn i.i.d.
/// standard normal per component per time index. The noise stream is keyed
/// by `(seed, t_index)` so parallel runs never contend and any sample can be
/// regenerated independently.
#[derive(Debug, Clone)]
pub struct ObservationProcess {
    pub h: DenseMatrix,
    pub sigma: f64,
    pub seed: u64,
}

impl ObservationProcess {
    pub fn new(h: DenseMatrix, sigma: f64, seed: u64) -> Result<Self> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::Invalid(format!(
                "sigma must be nonnegative, got {sigma}"
            )));
        }
        ensure_matrix_finite(&h, "observation operator")?;
        Ok(Self { h, sigma, seed })
    }

    /// Noise-free observation operator.
    pub fn exact(h: DenseMatrix) -> Result<Self> {
        Self::new(h, 0.0, 0)
    }

    pub fn obs_dim(&self) -> usize {
        self.h.nrows()
    }

    pub fn observe(&self, z: &DenseVector, t_index: u64) -> DenseVector {
        &self.h * z + self.noise_vector(t_index)
    }

    /// The additive noise sample `sigma eta` of one time index (all zeros
    /// when `sigma = 0`).
    pub fn noise_vector(&self, t_index: u64) -> DenseVector {
        let s = self.obs_dim();
        if self.sigma == 0.0 {
            return DenseVector::zeros(s);
        }
        let mut rng = seeds::stream_rng(self.seed, t_index);
        DenseVector::from_fn(s, |_, _| self.sigma * rng.sample::<f64, _>(StandardNormal))
    }
}

/// Large-`s` approximation of the expected observation-noise norm,
/// `E ||sigma eta|| ~ sigma sqrt(2 s - 1) / sqrt(2)` for `eta` standard
/// normal in `s` dimensions.
pub fn expected_noise_norm(sigma: f64, s: usize) -> f64 {
    sigma * ((2 * s - 1) as f64).sqrt() / 2f64.sqrt()
}
