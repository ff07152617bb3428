//! Orthonormal trivializations along orbits and the matrix families built from them.
//!
//! A frame `φ(t)` is obtained from parallel transport by a correcting rotation
//! `ρ(t) = exp(β(t)L)` so that, after deck identification, `φ(1) = φ(0)E_σ`.
//! In frame components the Jacobi operator reads `−(∂ + P)² − Q` with the
//! connection potential `P = β′L`.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::geometry::{ManifoldModel, Potential};
use crate::linalg::{
    asymmetry, block2, block_diag, e_sigma, expm, half_rotation, log_special_orthogonal, spd_sqrt_pair, Mat,
    Vector,
};
use crate::orbits::{hamiltonian_rhs, rk4_step, split, PerturbedOrbit};

/// Smoothstep ramp `6s⁵ − 15s⁴ + 10s³` on `[margin, 1 − margin]`, constant outside.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClosingRamp {
    pub margin: f64,
}

impl Default for ClosingRamp {
    fn default() -> Self {
        ClosingRamp { margin: 0.1 }
    }
}

impl ClosingRamp {
    fn s(&self, t: f64) -> f64 {
        ((t - self.margin) / (1.0 - 2.0 * self.margin)).clamp(0.0, 1.0)
    }

    pub fn value(&self, t: f64) -> f64 {
        let s = self.s(t);
        s * s * s * (10.0 + s * (-15.0 + 6.0 * s))
    }

    pub fn derivative(&self, t: f64) -> f64 {
        let s = self.s(t);
        30.0 * s * s * (1.0 - s) * (1.0 - s) / (1.0 - 2.0 * self.margin)
    }

    pub fn second_derivative(&self, t: f64) -> f64 {
        let s = self.s(t);
        let w = 1.0 - 2.0 * self.margin;
        60.0 * s * (1.0 - s) * (1.0 - 2.0 * s) / (w * w)
    }
}

/// Parallel orthonormal frame along a lifted orbit.
#[derive(Debug, Clone)]
pub struct ParallelFrame {
    pub phi: Vec<Mat>,
    /// `φ_par(0)⁻¹ A⁻¹ φ_par(1)`, with `A` the linear part of the deck map.
    pub holonomy: Mat,
}

/// Solve `φ̇ + Γ(ẋ)φ = 0` together with the orbit, re-orthonormalizing after
/// every step. `initial_rotation` rotates the starting orthonormal basis.
pub fn parallel_frame(
    model: &ManifoldModel,
    pot: &Potential,
    orbit: &PerturbedOrbit,
    initial_rotation: Option<&Mat>,
) -> Result<ParallelFrame> {
    let n = orbit.dim();
    let d = 2 * n;
    let steps = orbit.steps();
    let x0 = orbit.position(0);
    let mut phi0 = model.orthonormal_basis(&x0)?;
    if let Some(r) = initial_rotation {
        phi0 = phi0 * r;
    }
    let rhs = |t: f64, s: &Vector| -> Result<Vector> {
        let z = s.rows(0, d).into_owned();
        let phi = Mat::from_column_slice(n, n, s.rows(d, n * n).as_slice());
        let (x, y) = split(&z);
        let v = model.inverse_metric(&x) * y;
        let dphi = -model.connection_matrix(&x, &v) * phi;
        let mut out = Vector::zeros(d + n * n);
        out.rows_mut(0, d).copy_from(&hamiltonian_rhs(model, pot, t, &z)?);
        out.rows_mut(d, n * n).copy_from_slice(dphi.as_slice());
        Ok(out)
    };
    let mut s = Vector::zeros(d + n * n);
    s.rows_mut(0, d).copy_from(orbit.z0());
    s.rows_mut(d, n * n).copy_from_slice(phi0.as_slice());
    let h = 1.0 / steps as f64;
    let mut phi = Vec::with_capacity(steps + 1);
    phi.push(phi0.clone());
    for k in 0..steps {
        s = rk4_step(&rhs, k as f64 * h, &s, h)?;
        // keep the integrated state on the orbit samples
        s.rows_mut(0, d).copy_from(&orbit.states[k + 1]);
        let raw = Mat::from_column_slice(n, n, s.rows(d, n * n).as_slice());
        let g = model.metric(&orbit.position(k + 1))?;
        let (_, inv_root) = spd_sqrt_pair(&(raw.transpose() * g * &raw))?;
        let ortho = raw * inv_root;
        s.rows_mut(d, n * n).copy_from_slice(ortho.as_slice());
        phi.push(ortho);
    }
    let g0 = model.metric(&x0)?;
    let a_inv = orbit.deck.inverse().linear;
    let holonomy = phi0.transpose() * g0 * a_inv * &phi[steps];
    Ok(ParallelFrame { phi, holonomy })
}

/// `0` when the holonomy preserves orientation, `1` otherwise.
pub fn detect_sigma(h: &Mat) -> Result<u8> {
    let det = h.determinant();
    if (det.abs() - 1.0).abs() > 1e-6 {
        return Err(Error::Frame(format!("holonomy is not orthogonal: det = {det}")));
    }
    Ok(if det > 0.0 { 0 } else { 1 })
}

/// Frame data in frame components: `σ`, `P(t)` and `Q(t)`.
pub trait TwistedCoefficients: Send + Sync {
    fn n(&self) -> usize;
    fn sigma(&self) -> u8;
    fn q_at(&self, t: f64) -> Mat;
    fn p_at(&self, t: f64) -> Mat;

    fn e_sigma(&self) -> Mat {
        e_sigma(self.n(), self.sigma())
    }
}

/// Closed orthonormal frame along an orbit.
#[derive(Debug, Clone)]
pub struct ClosedFrame {
    pub times: Vec<f64>,
    pub phi: Vec<Mat>,
    pub sigma: u8,
    pub e_sigma: Mat,
    pub holonomy: Mat,
    /// Generator of the correcting rotation, `ρ(1) = exp(L) = h⁻¹E_σ`.
    pub log_rotation: Mat,
    pub ramp: ClosingRamp,
    pub q: Vec<Mat>,
    pub deck_linear: Mat,
}

/// Close a parallel frame with the rotation ramp `exp(β(t)L)`.
pub fn close_frame(par: &ParallelFrame, deck_linear: &Mat, ramp: ClosingRamp) -> Result<ClosedFrame> {
    let n = par.holonomy.nrows();
    let sigma = detect_sigma(&par.holonomy)?;
    let e = e_sigma(n, sigma);
    let target = par.holonomy.transpose() * &e;
    let log = log_special_orthogonal(&target)?;
    let steps = par.phi.len() - 1;
    let times: Vec<f64> = (0..=steps).map(|k| k as f64 / steps as f64).collect();
    let mut phi: Vec<Mat> = par
        .phi
        .iter()
        .zip(&times)
        .map(|(p, &t)| p * expm(&(&log * ramp.value(t))))
        .collect();
    phi[steps] = deck_linear * &phi[0] * &e;
    Ok(ClosedFrame {
        times,
        phi,
        sigma,
        e_sigma: e,
        holonomy: par.holonomy.clone(),
        log_rotation: log,
        ramp,
        q: vec![Mat::zeros(n, n); steps + 1],
        deck_linear: deck_linear.clone(),
    })
}

/// `Q = φ⁻¹(R(φ·, ẋ)ẋ + ∇_{φ·}∇V)` on the orbit grid.
pub fn assemble_q(
    model: &ManifoldModel,
    pot: &Potential,
    orbit: &PerturbedOrbit,
    frame: &ClosedFrame,
) -> Result<Vec<Mat>> {
    (0..=orbit.steps())
        .map(|k| {
            let x = orbit.position(k);
            let v = orbit.velocity(model, k);
            let g = model.metric(&x)?;
            let data = pot.data(orbit.times[k], &x);
            let phi = &frame.phi[k];
            let curv = phi.transpose() * &g * model.curvature_matrix(&x, &v)? * phi;
            let hess = phi.transpose() * model.covariant_hessian(&x, &data) * phi;
            Ok(curv + hess)
        })
        .collect()
}

impl ClosedFrame {
    pub fn n(&self) -> usize {
        self.e_sigma.nrows()
    }

    /// Install `Q`, checking symmetry and the boundary relation `Q(1) = EQ(0)E`.
    pub fn with_q(mut self, q: Vec<Mat>) -> Result<Self> {
        if q.len() != self.times.len() {
            return Err(Error::Assembly("Q must be sampled on the frame grid".into()));
        }
        let worst = q.iter().map(asymmetry).fold(0.0, f64::max);
        if worst > 1e-8 {
            return Err(Error::Assembly(format!("Q asymmetric by {worst:e}")));
        }
        let q: Vec<Mat> = q.into_iter().map(|m| (&m + m.transpose()) * 0.5).collect();
        let last = q.len() - 1;
        let bc = (&q[last] - &self.e_sigma * &q[0] * &self.e_sigma).amax();
        if bc > 1e-8 {
            return Err(Error::Assembly(format!("Q(1) differs from E Q(0) E by {bc:e}")));
        }
        self.q = q;
        Ok(self)
    }

    pub fn p(&self) -> Vec<Mat> {
        self.times.iter().map(|&t| self.p_at(t)).collect()
    }

    /// `∂_t P`, exact from the ramp.
    pub fn p_dot_at(&self, t: f64) -> Mat {
        &self.log_rotation * self.ramp.second_derivative(t)
    }

    /// Largest orthonormality defect `φᵀgφ − 1` over the grid.
    pub fn orthonormality_defect(&self, model: &ManifoldModel, orbit: &PerturbedOrbit) -> Result<f64> {
        let n = self.n();
        let mut worst = 0.0_f64;
        for (k, phi) in self.phi.iter().enumerate() {
            let g = model.metric(&orbit.position(k))?;
            worst = worst.max((phi.transpose() * g * phi - Mat::identity(n, n)).amax());
        }
        Ok(worst)
    }
}

impl TwistedCoefficients for ClosedFrame {
    fn n(&self) -> usize {
        self.e_sigma.nrows()
    }

    fn sigma(&self) -> u8 {
        self.sigma
    }

    fn q_at(&self, t: f64) -> Mat {
        lagrange_cubic(&self.times, &self.q, t)
    }

    fn p_at(&self, t: f64) -> Mat {
        &self.log_rotation * self.ramp.derivative(t)
    }
}

/// Parallel frame, closing rotation and `Q` in one go.
pub fn build_frame(
    model: &ManifoldModel,
    pot: &Potential,
    orbit: &PerturbedOrbit,
    initial_rotation: Option<&Mat>,
) -> Result<ClosedFrame> {
    let ramp = ClosingRamp::default();
    let mut attempt = 0;
    let frame = loop {
        // a rotated starting basis changes the logarithm branch when the first one fails
        let tilt = if attempt == 0 { None } else { Some(plane_rotation(orbit.dim(), 0.3 * attempt as f64)) };
        let rot = match (initial_rotation, &tilt) {
            (Some(r), Some(t)) => Some(r * t),
            (Some(r), None) => Some(r.clone()),
            (None, Some(t)) => Some(t.clone()),
            (None, None) => None,
        };
        let par = parallel_frame(model, pot, orbit, rot.as_ref())?;
        match close_frame(&par, &orbit.deck.linear, ramp) {
            Ok(f) => break f,
            Err(Error::Frame(msg)) if attempt < 2 && !msg.contains("not orthogonal") => attempt += 1,
            Err(e) => return Err(e),
        }
    };
    let q = assemble_q(model, pot, orbit, &frame)?;
    frame.with_q(q)
}

fn plane_rotation(n: usize, angle: f64) -> Mat {
    let mut r = Mat::identity(n, n);
    if n >= 2 {
        let (s, c) = angle.sin_cos();
        r[(0, 0)] = c;
        r[(0, 1)] = -s;
        r[(1, 0)] = s;
        r[(1, 1)] = c;
    }
    r
}

/// Cubic Lagrange interpolation on a uniform grid; exact at the nodes.
pub(crate) fn lagrange_cubic(times: &[f64], values: &[Mat], t: f64) -> Mat {
    let m = times.len() - 1;
    if m < 3 {
        let k = ((t * m as f64).round() as usize).min(m);
        return values[k].clone();
    }
    let h = (times[m] - times[0]) / m as f64;
    let pos = ((t - times[0]) / h).clamp(0.0, m as f64);
    let k = pos.floor() as usize;
    if (pos - k as f64).abs() < 1e-12 {
        return values[k].clone();
    }
    let start = k.saturating_sub(1).min(m - 3);
    let mut out = Mat::zeros(values[0].nrows(), values[0].ncols());
    for i in start..start + 4 {
        let mut w = 1.0;
        for j in start..start + 4 {
            if j != i {
                w *= (pos - j as f64) / (i as f64 - j as f64);
            }
        }
        out += &values[i] * w;
    }
    out
}

type SymFn = dyn Fn(f64) -> Mat + Send + Sync;

/// A path of symmetric `2n × 2n` matrices, evaluable at any `t ∈ [0, 1]`.
#[derive(Clone)]
pub struct SymmetricFamily {
    n: usize,
    pub with_rotation: bool,
    eval: Arc<SymFn>,
}

impl fmt::Debug for SymmetricFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SymmetricFamily")
            .field("n", &self.n)
            .field("with_rotation", &self.with_rotation)
            .finish()
    }
}

impl SymmetricFamily {
    pub fn from_fn<F>(n: usize, with_rotation: bool, f: F) -> Self
    where
        F: Fn(f64) -> Mat + Send + Sync + 'static,
    {
        SymmetricFamily {
            n,
            with_rotation,
            eval: Arc::new(f),
        }
    }

    pub fn constant(s: Mat) -> Self {
        let n = s.nrows() / 2;
        SymmetricFamily::from_fn(n, false, move |_| s.clone())
    }

    /// Samples on a uniform grid of `[0, 1]`, interpolated cubically.
    pub fn sampled(values: Vec<Mat>) -> Self {
        let n = values[0].nrows() / 2;
        let m = values.len() - 1;
        let times: Vec<f64> = (0..=m).map(|k| k as f64 / m as f64).collect();
        SymmetricFamily::from_fn(n, false, move |t| lagrange_cubic(&times, &values, t))
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn at(&self, t: f64) -> Mat {
        (self.eval)(t)
    }

    pub fn samples(&self, steps: usize) -> Vec<Mat> {
        (0..=steps).map(|k| self.at(k as f64 / steps as f64)).collect()
    }

    /// `S + δ·1`.
    pub fn shifted(&self, delta: f64) -> Self {
        let inner = self.clone();
        let d = 2 * self.n;
        SymmetricFamily::from_fn(self.n, self.with_rotation, move |t| {
            inner.at(t) + Mat::identity(d, d) * delta
        })
    }
}

/// `S = [[Q, P], [−P, 1]]`.
pub fn generator(q: &Mat, p: &Mat) -> Mat {
    let n = q.nrows();
    block2(q, p, &(-p), &Mat::identity(n, n))
}

/// `S` and its twisted form `S_U = U^{mσ} S U^{−mσ} − mσπ·(e₁e₁ᵀ + e_{n+1}e_{n+1}ᵀ)`,
/// where `U^m` rotates the `(1, n+1)` plane by `mπt`.
pub fn assemble_su(coeffs: Arc<dyn TwistedCoefficients>, power: i32) -> (SymmetricFamily, SymmetricFamily) {
    let n = coeffs.n();
    let c = coeffs.clone();
    let s = SymmetricFamily::from_fn(n, false, move |t| generator(&c.q_at(t), &c.p_at(t)));
    let sigma = coeffs.sigma();
    if sigma == 0 {
        let mut su = s.clone();
        su.with_rotation = true;
        return (s, su);
    }
    let base = s.clone();
    let m = power;
    let su = SymmetricFamily::from_fn(n, true, move |t| {
        let u = half_rotation(n, t, m);
        let mut out = &u * base.at(t) * u.transpose();
        out[(0, 0)] -= m as f64 * PI;
        out[(n, n)] -= m as f64 * PI;
        (&out + out.transpose()) * 0.5
    });
    (s, su)
}

/// `C(z) = [[1, 0], [−Γ(·)·y, 1]]`, mapping chart variations `(δx, δy)` to
/// `(δx, g∇_tδx)`.
pub fn covariant_correction(model: &ManifoldModel, z: &Vector) -> Mat {
    let (x, y) = split(z);
    let n = x.len();
    let gamma = model.christoffel(&x);
    let mut gy = Mat::zeros(n, n);
    for (k, gk) in gamma.iter().enumerate() {
        gy += gk * y[k];
    }
    block2(&Mat::identity(n, n), &Mat::zeros(n, n), &(-gy), &Mat::identity(n, n))
}

/// The twisted linearized return map expressed in the closed frame:
/// `U(1)^σ Φ(1)⁻¹ C(z(1)) dφ₁ C(z(0))⁻¹ Φ(0)` with `Φ = diag(φ, gφ)`.
pub fn frame_monodromy(model: &ManifoldModel, orbit: &PerturbedOrbit, frame: &ClosedFrame) -> Result<Mat> {
    let n = orbit.dim();
    let last = orbit.steps();
    let big_phi = |k: usize| -> Result<Mat> {
        let g = model.metric(&orbit.position(k))?;
        Ok(block_diag(&frame.phi[k], &(g * &frame.phi[k])))
    };
    let phi0 = big_phi(0)?;
    let phi1 = big_phi(last)?;
    let c0 = covariant_correction(model, &orbit.states[0]);
    let c1 = covariant_correction(model, &orbit.states[last]);
    let c0_inv = c0
        .try_inverse()
        .ok_or_else(|| Error::Numerics("singular correction".into()))?;
    let phi1_inv = phi1
        .try_inverse()
        .ok_or_else(|| Error::Numerics("singular frame".into()))?;
    let psi = phi1_inv * c1 * &orbit.flow_derivative * c0_inv * phi0;
    Ok(half_rotation(n, 1.0, frame.sigma as i32) * psi)
}
