//! Model manifolds in a single global chart and time-periodic potentials.
//!
//! Points are chart coordinates `x ∈ ℝⁿ`; loops on the quotient are lifted to
//! the chart together with a deck map `D` closing them up, `x(1) = D(x(0))`.
//! Cotangent vectors transform by the inverse transpose of the deck map's
//! linear part.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{block_diag, Mat, Vector};

/// Default minimal colatitude distance to the poles on the sphere chart.
pub const DEFAULT_POLE_MARGIN: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ManifoldKind {
    /// `ℝⁿ/ℤⁿ` with the flat metric.
    FlatTorus { dim: usize },
    /// `ℝ²/Γ`, Γ generated by `(x, y) ↦ (x + 1, −y)` and `(x, y) ↦ (x, y + 1)`.
    FlatKleinBottle,
    /// Round sphere of the given radius in colatitude/longitude `(θ, φ)`.
    Sphere2 { radius: f64 },
}

/// Affine chart isometry `x ↦ A x + s`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeckMap {
    pub linear: Mat,
    pub shift: Vector,
}

impl DeckMap {
    pub fn identity(n: usize) -> Self {
        DeckMap {
            linear: Mat::identity(n, n),
            shift: Vector::zeros(n),
        }
    }

    pub fn translation(shift: Vector) -> Self {
        let n = shift.len();
        DeckMap {
            linear: Mat::identity(n, n),
            shift,
        }
    }

    pub fn dim(&self) -> usize {
        self.shift.len()
    }

    pub fn apply(&self, x: &Vector) -> Vector {
        &self.linear * x + &self.shift
    }

    pub fn push_vector(&self, v: &Vector) -> Vector {
        &self.linear * v
    }

    /// Covectors transform with `A⁻ᵀ`.
    pub fn push_covector(&self, y: &Vector) -> Vector {
        self.covector_matrix() * y
    }

    fn covector_matrix(&self) -> Mat {
        self.linear
            .clone()
            .try_inverse()
            .expect("deck maps are invertible")
            .transpose()
    }

    /// `self ∘ other`.
    pub fn compose(&self, other: &DeckMap) -> DeckMap {
        DeckMap {
            linear: &self.linear * &other.linear,
            shift: &self.linear * &other.shift + &self.shift,
        }
    }

    pub fn inverse(&self) -> DeckMap {
        let inv = self.linear.clone().try_inverse().expect("deck maps are invertible");
        let shift = -(&inv * &self.shift);
        DeckMap { linear: inv, shift }
    }

    pub fn power(&self, k: i32) -> DeckMap {
        let base = if k < 0 { self.inverse() } else { self.clone() };
        let mut out = DeckMap::identity(self.dim());
        for _ in 0..k.unsigned_abs() {
            out = base.compose(&out);
        }
        out
    }

    /// Action on phase-space points `z = (x, y)`.
    pub fn phase_map(&self, z: &Vector) -> Vector {
        let n = self.dim();
        let x = z.rows(0, n).into_owned();
        let y = z.rows(n, n).into_owned();
        let mut out = Vector::zeros(2 * n);
        out.rows_mut(0, n).copy_from(&self.apply(&x));
        out.rows_mut(n, n).copy_from(&self.push_covector(&y));
        out
    }

    /// Derivative of [`DeckMap::phase_map`]: `diag(A, A⁻ᵀ)`.
    pub fn phase_jacobian(&self) -> Mat {
        block_diag(&self.linear, &self.covector_matrix())
    }

    pub fn orientation(&self) -> f64 {
        self.linear.determinant().signum()
    }

    pub fn distance(&self, other: &DeckMap) -> f64 {
        (&self.linear - &other.linear).amax().max((&self.shift - &other.shift).amax())
    }
}

/// A word in the deck generators: `[(g, p), …]` means `D_g^p ∘ …`, applied right to left.
pub type DeckWord = Vec<(usize, i32)>;

#[derive(Debug, Clone)]
pub struct ManifoldModel {
    kind: ManifoldKind,
    generators: Vec<DeckMap>,
    pole_margin: f64,
}

impl ManifoldModel {
    pub fn new(kind: ManifoldKind) -> Result<Self> {
        let generators = match kind {
            ManifoldKind::FlatTorus { dim } => {
                if dim == 0 {
                    return Err(Error::Parameter("torus dimension must be positive".into()));
                }
                (0..dim)
                    .map(|i| {
                        let mut s = Vector::zeros(dim);
                        s[i] = 1.0;
                        DeckMap::translation(s)
                    })
                    .collect()
            }
            ManifoldKind::FlatKleinBottle => vec![
                DeckMap {
                    linear: Mat::from_diagonal(&Vector::from_vec(vec![1.0, -1.0])),
                    shift: Vector::from_vec(vec![1.0, 0.0]),
                },
                DeckMap::translation(Vector::from_vec(vec![0.0, 1.0])),
            ],
            ManifoldKind::Sphere2 { radius } => {
                if !(radius > 0.0) {
                    return Err(Error::Parameter("sphere radius must be positive".into()));
                }
                // longitude wraps by 2π; not a deck map of S² but a chart identification
                vec![DeckMap::translation(Vector::from_vec(vec![0.0, 2.0 * PI]))]
            }
        };
        Ok(ManifoldModel {
            kind,
            generators,
            pole_margin: DEFAULT_POLE_MARGIN,
        })
    }

    pub fn flat_torus(dim: usize) -> Self {
        Self::new(ManifoldKind::FlatTorus { dim }).expect("valid torus")
    }

    pub fn klein_bottle() -> Self {
        Self::new(ManifoldKind::FlatKleinBottle).expect("valid Klein bottle")
    }

    pub fn sphere(radius: f64) -> Result<Self> {
        Self::new(ManifoldKind::Sphere2 { radius })
    }

    pub fn with_pole_margin(mut self, margin: f64) -> Self {
        self.pole_margin = margin;
        self
    }

    pub fn kind(&self) -> ManifoldKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        match self.kind {
            ManifoldKind::FlatTorus { dim } => dim,
            _ => 2,
        }
    }

    pub fn is_flat(&self) -> bool {
        !matches!(self.kind, ManifoldKind::Sphere2 { .. })
    }

    pub fn generators(&self) -> &[DeckMap] {
        &self.generators
    }

    pub fn deck(&self, word: &[(usize, i32)]) -> Result<DeckMap> {
        let mut out = DeckMap::identity(self.dim());
        for &(g, p) in word.iter().rev() {
            let gen = self
                .generators
                .get(g)
                .ok_or_else(|| Error::Parameter(format!("no deck generator {g}")))?;
            out = gen.power(p).compose(&out);
        }
        Ok(out)
    }

    pub fn check_domain(&self, x: &Vector) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::Domain(format!(
                "expected {} coordinates, got {}",
                self.dim(),
                x.len()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite coordinate".into()));
        }
        if let ManifoldKind::Sphere2 { .. } = self.kind {
            let theta = x[0];
            if theta < self.pole_margin || theta > PI - self.pole_margin {
                return Err(Error::Domain(format!(
                    "colatitude {theta:.6} within {} of a pole",
                    self.pole_margin
                )));
            }
        }
        Ok(())
    }

    pub fn metric(&self, x: &Vector) -> Result<Mat> {
        self.check_domain(x)?;
        Ok(self.metric_unchecked(x))
    }

    fn metric_unchecked(&self, x: &Vector) -> Mat {
        match self.kind {
            ManifoldKind::Sphere2 { radius } => {
                let r2 = radius * radius;
                let s = x[0].sin();
                Mat::from_diagonal(&Vector::from_vec(vec![r2, r2 * s * s]))
            }
            _ => Mat::identity(self.dim(), self.dim()),
        }
    }

    pub fn inverse_metric(&self, x: &Vector) -> Mat {
        match self.kind {
            ManifoldKind::Sphere2 { radius } => {
                let r2 = radius * radius;
                let s = x[0].sin();
                Mat::from_diagonal(&Vector::from_vec(vec![1.0 / r2, 1.0 / (r2 * s * s)]))
            }
            _ => Mat::identity(self.dim(), self.dim()),
        }
    }

    /// First partials `∂_l g⁻¹`, indexed by `l`.
    pub fn inverse_metric_partials(&self, x: &Vector) -> Vec<Mat> {
        let n = self.dim();
        let mut out = vec![Mat::zeros(n, n); n];
        if let ManifoldKind::Sphere2 { radius } = self.kind {
            let (s, c) = x[0].sin_cos();
            out[0][(1, 1)] = -2.0 * c / (radius * radius * s * s * s);
        }
        out
    }

    /// Second partials `∂_l ∂_m g⁻¹`, indexed `[l][m]`.
    pub fn inverse_metric_second_partials(&self, x: &Vector) -> Vec<Vec<Mat>> {
        let n = self.dim();
        let mut out = vec![vec![Mat::zeros(n, n); n]; n];
        if let ManifoldKind::Sphere2 { radius } = self.kind {
            let (s, c) = x[0].sin_cos();
            let s2 = s * s;
            out[0][0][(1, 1)] = (2.0 / s2 + 6.0 * c * c / (s2 * s2)) / (radius * radius);
        }
        out
    }

    /// Christoffel symbols `Γ^k_{ij}` as matrices indexed by `k`.
    pub fn christoffel(&self, x: &Vector) -> Vec<Mat> {
        let n = self.dim();
        let mut out = vec![Mat::zeros(n, n); n];
        if let ManifoldKind::Sphere2 { .. } = self.kind {
            let (s, c) = x[0].sin_cos();
            out[0][(1, 1)] = -s * c;
            out[1][(0, 1)] = c / s;
            out[1][(1, 0)] = c / s;
        }
        out
    }

    /// The matrix `Γ(v)` with `(Γ(v))^k_j = Γ^k_{ij} vⁱ`, so `∇_t ξ = ξ̇ + Γ(ẋ)ξ`.
    pub fn connection_matrix(&self, x: &Vector, v: &Vector) -> Mat {
        let n = self.dim();
        let gamma = self.christoffel(x);
        Mat::from_fn(n, n, |k, j| (0..n).map(|i| gamma[k][(i, j)] * v[i]).sum())
    }

    /// `R(ξ, v)v` in chart components.
    pub fn curvature_term(&self, x: &Vector, xi: &Vector, v: &Vector) -> Result<Vector> {
        self.check_domain(x)?;
        Ok(match self.kind {
            ManifoldKind::Sphere2 { radius } => {
                let g = self.metric_unchecked(x);
                let k = 1.0 / (radius * radius);
                let gvv = v.dot(&(&g * v));
                let gxv = xi.dot(&(&g * v));
                (xi * gvv - v * gxv) * k
            }
            _ => Vector::zeros(self.dim()),
        })
    }

    /// Matrix of `ξ ↦ R(ξ, v)v` (the map is linear in `ξ`).
    pub fn curvature_matrix(&self, x: &Vector, v: &Vector) -> Result<Mat> {
        let n = self.dim();
        let mut m = Mat::zeros(n, n);
        for j in 0..n {
            let mut e = Vector::zeros(n);
            e[j] = 1.0;
            m.set_column(j, &self.curvature_term(x, &e, v)?);
        }
        Ok(m)
    }

    /// Covariant Hessian `∂_i∂_j V − Γ^k_{ij} ∂_k V` (lower indices).
    pub fn covariant_hessian(&self, x: &Vector, data: &PotentialData) -> Mat {
        let gamma = self.christoffel(x);
        let mut h = data.hessian.clone();
        for (k, gk) in gamma.iter().enumerate() {
            h -= gk * data.gradient[k];
        }
        h
    }

    /// Columns form a g-orthonormal basis at `x`.
    pub fn orthonormal_basis(&self, x: &Vector) -> Result<Mat> {
        let g = self.metric(x)?;
        Ok(Mat::from_diagonal(&g.diagonal().map(|v| 1.0 / v.sqrt())))
    }

    /// Deck map `G` such that `G(x)` lies in the closed fundamental domain.
    pub fn reduce(&self, x: &Vector) -> DeckMap {
        let snap = |v: f64| (v + 1e-7).floor();
        match self.kind {
            ManifoldKind::FlatTorus { .. } => DeckMap::translation(-x.map(snap)),
            ManifoldKind::FlatKleinBottle => {
                let m = snap(x[0]) as i32;
                let a = self.generators[0].power(-m);
                let moved = a.apply(x);
                let k = snap(moved[1]) as i32;
                self.generators[1].power(-k).compose(&a)
            }
            ManifoldKind::Sphere2 { .. } => {
                let k = (x[1] / (2.0 * PI) + 1e-7).floor() as i32;
                self.generators[0].power(-k)
            }
        }
    }

    /// Random chart point inside a fundamental domain, away from poles.
    pub fn sample_point<R: Rng + ?Sized>(&self, rng: &mut R) -> Vector {
        match self.kind {
            ManifoldKind::Sphere2 { .. } => Vector::from_vec(vec![
                rng.gen_range(0.3..PI - 0.3),
                rng.gen_range(0.0..2.0 * PI),
            ]),
            _ => Vector::from_fn(self.dim(), |_, _| rng.gen_range(0.0..1.0)),
        }
    }

    /// Largest deviation of `V(t, D x) − V(t, x)` and of the pushed-forward metric
    /// `Aᵀ g(Dx) A − g(x)` over random samples and all generators.
    pub fn invariance_defect<R: Rng + ?Sized>(
        &self,
        pot: &Potential,
        samples: usize,
        rng: &mut R,
    ) -> Result<f64> {
        let mut worst = 0.0_f64;
        for _ in 0..samples {
            let x = self.sample_point(rng);
            let t = rng.gen_range(0.0..1.0);
            for d in &self.generators {
                let dx = d.apply(&x);
                worst = worst.max((pot.value(t, &dx) - pot.value(t, &x)).abs());
                let pulled = d.linear.transpose() * self.metric(&dx)? * &d.linear;
                worst = worst.max((pulled - self.metric(&x)?).amax());
            }
        }
        Ok(worst)
    }
}

/// `V`, its chart gradient and chart Hessian (plain partial derivatives).
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialData {
    pub value: f64,
    pub gradient: Vector,
    pub hessian: Mat,
}

/// `a·cos(2π(k·x − m t) + φ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FourierMode {
    pub amplitude: f64,
    pub wave: Vec<f64>,
    #[serde(default)]
    pub frequency: f64,
    #[serde(default)]
    pub phase: f64,
}

type ValueFn = dyn Fn(f64, &Vector) -> f64 + Send + Sync;
type GradientFn = dyn Fn(f64, &Vector) -> Vector + Send + Sync;
type HessianFn = dyn Fn(f64, &Vector) -> Mat + Send + Sync;

/// User-supplied potential with its derivatives.
#[derive(Clone)]
pub struct CustomPotential {
    value: Arc<ValueFn>,
    gradient: Arc<GradientFn>,
    hessian: Arc<HessianFn>,
    sup: f64,
}

impl fmt::Debug for CustomPotential {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomPotential").field("sup", &self.sup).finish()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", content = "params", rename_all = "snake_case")]
pub enum Potential {
    Zero,
    /// `Σ εᵢ cos(2π xⁱ)`.
    CosineLattice(Vec<f64>),
    Fourier(Vec<FourierMode>),
    /// `Σ_j c_j cos(j x¹)`; on the sphere a function of the height `cos θ`.
    Zonal(Vec<f64>),
    #[serde(skip)]
    Custom(CustomPotential),
}

const FD_CHECK_RTOL: f64 = 1e-5;

impl Potential {
    /// Wrap user callbacks. The derivatives are checked against centered
    /// differences of the value at `samples`; `sup` bounds `|V|`.
    pub fn custom<V, G, H>(
        value: V,
        gradient: G,
        hessian: H,
        sup: f64,
        samples: &[(f64, Vector)],
    ) -> Result<Self>
    where
        V: Fn(f64, &Vector) -> f64 + Send + Sync + 'static,
        G: Fn(f64, &Vector) -> Vector + Send + Sync + 'static,
        H: Fn(f64, &Vector) -> Mat + Send + Sync + 'static,
    {
        let pot = Potential::Custom(CustomPotential {
            value: Arc::new(value),
            gradient: Arc::new(gradient),
            hessian: Arc::new(hessian),
            sup,
        });
        for (t, x) in samples {
            let (ge, he) = pot.finite_difference_error(*t, x, 1e-4);
            let data = pot.data(*t, x);
            let gs = 1.0 + data.gradient.amax();
            let hs = 1.0 + data.hessian.amax();
            if ge > FD_CHECK_RTOL * gs || he > FD_CHECK_RTOL * hs {
                return Err(Error::Parameter(format!(
                    "custom potential derivatives inconsistent at t={t}: gradient error {ge:e}, hessian error {he:e}"
                )));
            }
        }
        Ok(pot)
    }

    pub fn value(&self, t: f64, x: &Vector) -> f64 {
        self.data(t, x).value
    }

    pub fn data(&self, t: f64, x: &Vector) -> PotentialData {
        let n = x.len();
        let tau = 2.0 * PI;
        match self {
            Potential::Zero => PotentialData {
                value: 0.0,
                gradient: Vector::zeros(n),
                hessian: Mat::zeros(n, n),
            },
            Potential::CosineLattice(eps) => {
                let mut value = 0.0;
                let mut gradient = Vector::zeros(n);
                let mut hessian = Mat::zeros(n, n);
                for (i, &e) in eps.iter().enumerate().take(n) {
                    let (s, c) = (tau * x[i]).sin_cos();
                    value += e * c;
                    gradient[i] = -tau * e * s;
                    hessian[(i, i)] = -tau * tau * e * c;
                }
                PotentialData { value, gradient, hessian }
            }
            Potential::Fourier(modes) => {
                let mut value = 0.0;
                let mut gradient = Vector::zeros(n);
                let mut hessian = Mat::zeros(n, n);
                for m in modes {
                    let k = Vector::from_fn(n, |i, _| m.wave.get(i).copied().unwrap_or(0.0));
                    let arg = tau * (k.dot(x) - m.frequency * t) + m.phase;
                    let (s, c) = arg.sin_cos();
                    value += m.amplitude * c;
                    gradient -= &k * (tau * m.amplitude * s);
                    hessian -= &k * k.transpose() * (tau * tau * m.amplitude * c);
                }
                PotentialData { value, gradient, hessian }
            }
            Potential::Zonal(coeffs) => {
                let mut value = 0.0;
                let mut d1 = 0.0;
                let mut d2 = 0.0;
                for (j, &c) in coeffs.iter().enumerate() {
                    let j = (j + 1) as f64;
                    let (s, co) = (j * x[0]).sin_cos();
                    value += c * co;
                    d1 -= c * j * s;
                    d2 -= c * j * j * co;
                }
                let mut gradient = Vector::zeros(n);
                let mut hessian = Mat::zeros(n, n);
                gradient[0] = d1;
                hessian[(0, 0)] = d2;
                PotentialData { value, gradient, hessian }
            }
            Potential::Custom(c) => PotentialData {
                value: (c.value)(t, x),
                gradient: (c.gradient)(t, x),
                hessian: (c.hessian)(t, x),
            },
        }
    }

    /// Upper bound for `sup |V|`.
    pub fn sup_norm(&self) -> f64 {
        match self {
            Potential::Zero => 0.0,
            Potential::CosineLattice(e) | Potential::Zonal(e) => e.iter().map(|v| v.abs()).sum(),
            Potential::Fourier(modes) => modes.iter().map(|m| m.amplitude.abs()).sum(),
            Potential::Custom(c) => c.sup,
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Potential::Zero) || (!matches!(self, Potential::Custom(_)) && self.sup_norm() == 0.0)
    }

    /// Maximal deviation of the gradient and Hessian from centered differences
    /// with step `h`.
    pub fn finite_difference_error(&self, t: f64, x: &Vector, h: f64) -> (f64, f64) {
        let n = x.len();
        let data = self.data(t, x);
        let mut grad_err = 0.0_f64;
        let mut hess_err = 0.0_f64;
        for i in 0..n {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let fd = (self.value(t, &xp) - self.value(t, &xm)) / (2.0 * h);
            grad_err = grad_err.max((fd - data.gradient[i]).abs());
            let gp = self.data(t, &xp).gradient;
            let gm = self.data(t, &xm).gradient;
            for j in 0..n {
                let fd = (gp[j] - gm[j]) / (2.0 * h);
                hess_err = hess_err.max((fd - data.hessian[(j, i)]).abs());
            }
        }
        (grad_err, hess_err)
    }

    pub fn check_dimension(&self, n: usize) -> Result<()> {
        match self {
            Potential::CosineLattice(e) if e.len() != n => Err(Error::Config(format!(
                "cosine lattice needs {n} amplitudes, got {}",
                e.len()
            ))),
            Potential::Fourier(modes) if modes.iter().any(|m| m.wave.len() != n) => Err(
                Error::Config(format!("every Fourier wave vector needs {n} components")),
            ),
            _ => Ok(()),
        }
    }
}
