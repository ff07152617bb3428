//! Paths in `Sp(2n)` generated by symmetric families: `Ψ̇ = −J₀SΨ`, `Ψ(0) = 1`.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::framing::SymmetricFamily;
use crate::linalg::{expm, j0, spd_sqrt_pair, symplectic_defect, Mat};

pub const DEFAULT_PATH_STEPS: usize = 1024;
pub const DEFAULT_DEFECT_BOUND: f64 = 1e-8;

type PathFn = dyn Fn(f64) -> Mat + Send + Sync;

#[derive(Clone)]
pub enum PathEval {
    /// Integrated; off-grid values by one partial RK4 step from the nearest node.
    Ode(SymmetricFamily),
    Closed(Arc<PathFn>),
}

/// A sampled symplectic path on a uniform grid of `[0, 1]`.
#[derive(Clone)]
pub struct SymplecticPath {
    pub n: usize,
    pub times: Vec<f64>,
    pub psi: Vec<Mat>,
    pub generator: Vec<Mat>,
    pub defect: f64,
    pub eval: PathEval,
}

impl fmt::Debug for SymplecticPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SymplecticPath")
            .field("n", &self.n)
            .field("steps", &self.steps())
            .field("defect", &self.defect)
            .finish()
    }
}

fn rk4_matrix(s: &SymmetricFamily, j: &Mat, t: f64, psi: &Mat, h: f64) -> Mat {
    let f = |t: f64, m: &Mat| -(j * s.at(t)) * m;
    let k1 = f(t, psi);
    let k2 = f(t + 0.5 * h, &(psi + &k1 * (0.5 * h)));
    let k3 = f(t + 0.5 * h, &(psi + &k2 * (0.5 * h)));
    let k4 = f(t + h, &(psi + &k3 * h));
    psi + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

impl SymplecticPath {
    pub fn steps(&self) -> usize {
        self.psi.len() - 1
    }

    pub fn end(&self) -> &Mat {
        &self.psi[self.steps()]
    }

    /// `Ψ(t)` at an arbitrary `t ∈ [0, 1]`.
    pub fn psi_at(&self, t: f64) -> Mat {
        match &self.eval {
            PathEval::Closed(f) => f(t),
            PathEval::Ode(s) => {
                let m = self.steps();
                let k = ((t * m as f64).round() as usize).min(m);
                let h = t - self.times[k];
                if h == 0.0 {
                    self.psi[k].clone()
                } else {
                    rk4_matrix(s, &j0(self.n), self.times[k], &self.psi[k], h)
                }
            }
        }
    }

    /// Generator `S(t)`; for closed-form paths recovered from `J₀Ψ̇Ψ⁻¹`.
    pub fn generator_at(&self, t: f64) -> Mat {
        match &self.eval {
            PathEval::Ode(s) => s.at(t),
            PathEval::Closed(f) => {
                let h = 1e-6;
                let (a, b) = ((t - h).max(0.0), (t + h).min(1.0));
                let dpsi = (f(b) - f(a)) / (b - a);
                let inv = f(t).try_inverse().expect("symplectic matrices are invertible");
                let s = j0(self.n) * dpsi * inv;
                (&s + s.transpose()) * 0.5
            }
        }
    }

    /// Pointwise product `Θ(t)Ψ(t)` with a closed-form path `Θ`, as a closed-form path.
    pub fn left_multiply(&self, theta: &SymplecticPath) -> SymplecticPath {
        let a = theta.clone();
        let b = self.clone();
        closed_path(self.n, self.steps(), move |t| a.psi_at(t) * b.psi_at(t))
    }
}

/// Integrate `Ψ̇ = −J₀S(t)Ψ` with `steps` RK4 steps.
pub fn fundamental_solution(s: &SymmetricFamily, steps: usize) -> Result<SymplecticPath> {
    fundamental_solution_with_bound(s, steps, DEFAULT_DEFECT_BOUND)
}

pub fn fundamental_solution_with_bound(s: &SymmetricFamily, steps: usize, bound: f64) -> Result<SymplecticPath> {
    if steps == 0 {
        return Err(Error::Parameter("step count must be positive".into()));
    }
    let n = s.n();
    let j = j0(n);
    let h = 1.0 / steps as f64;
    let times: Vec<f64> = (0..=steps).map(|k| k as f64 * h).collect();
    let mut psi = Vec::with_capacity(steps + 1);
    psi.push(Mat::identity(2 * n, 2 * n));
    let mut defect = 0.0_f64;
    for k in 0..steps {
        let next = rk4_matrix(s, &j, times[k], &psi[k], h);
        defect = defect.max(symplectic_defect(&next));
        psi.push(next);
    }
    if defect > bound {
        return Err(Error::accuracy("symplectic defect (increase steps)", defect, bound));
    }
    Ok(SymplecticPath {
        n,
        generator: s.samples(steps),
        times,
        psi,
        defect,
        eval: PathEval::Ode(s.clone()),
    })
}

/// Path given by a closed-form evaluator.
pub fn closed_path<F>(n: usize, steps: usize, f: F) -> SymplecticPath
where
    F: Fn(f64) -> Mat + Send + Sync + 'static,
{
    let times: Vec<f64> = (0..=steps).map(|k| k as f64 / steps as f64).collect();
    let psi: Vec<Mat> = times.iter().map(|&t| f(t)).collect();
    let defect = psi.iter().map(symplectic_defect).fold(0.0, f64::max);
    let mut path = SymplecticPath {
        n,
        times,
        psi,
        generator: Vec::new(),
        defect,
        eval: PathEval::Closed(Arc::new(f)),
    };
    path.generator = path.times.iter().map(|&t| path.generator_at(t)).collect();
    path
}

/// `t ↦ e^{−tJ₀S}` for constant symmetric `S`.
pub fn matrix_exponential_path(s: &Mat, steps: usize) -> SymplecticPath {
    let n = s.nrows() / 2;
    let a = -(j0(n) * s);
    let sc = s.clone();
    let mut path = closed_path(n, steps, move |t| expm(&(&a * t)));
    path.generator = vec![sc; steps + 1];
    path
}

/// `γ₁(t) = R(πt)·diag(1 + t, 1/(1 + t))`.
pub fn gamma1_path(steps: usize) -> SymplecticPath {
    closed_path(1, steps, |t| {
        let (s, c) = (PI * t).sin_cos();
        let r = Mat::from_row_slice(2, 2, &[c, -s, s, c]);
        r * Mat::from_row_slice(2, 2, &[1.0 + t, 0.0, 0.0, 1.0 / (1.0 + t)])
    })
}

/// The generator `b(t) = u s u⁻¹ − π·1` with `u(t) = R(πt)`, `s = diag(μ̂, 1)`.
pub fn gamma2_generator(mu_hat: f64) -> SymmetricFamily {
    SymmetricFamily::from_fn(1, true, move |t| {
        let (s, c) = (PI * t).sin_cos();
        let off = (mu_hat - 1.0) * c * s;
        Mat::from_row_slice(
            2,
            2,
            &[mu_hat * c * c + s * s - PI, off, off, mu_hat * s * s + c * c - PI],
        )
    })
}

/// `γ₂` by integration of `b(t)`; requires `κ = √(−μ̂) > √π`.
pub fn gamma2_path(mu_hat: f64, steps: usize) -> Result<SymplecticPath> {
    if !(mu_hat < -PI) {
        return Err(Error::Parameter(format!(
            "need sqrt(-mu_hat) > sqrt(pi), got mu_hat = {mu_hat}"
        )));
    }
    fundamental_solution(&gamma2_generator(mu_hat), steps)
}

/// `det(1 − γ₂(t)) = 2 − 2cos πt cosh κt + (κ − κ⁻¹) sin πt sinh κt`.
pub fn gamma2_det_formula(mu_hat: f64, t: f64) -> f64 {
    let k = (-mu_hat).sqrt();
    2.0 - 2.0 * (PI * t).cos() * (k * t).cosh() + (k - 1.0 / k) * (PI * t).sin() * (k * t).sinh()
}

/// Coordinates `(θ, u, v)` of `m ∈ Sp(2)` from the polar decomposition
/// `m = R(θ)·P`, `log P = [[u, v], [v, −u]]`.
pub fn torus_coords(m: &Mat) -> Result<(f64, f64, f64)> {
    let (root, inv_root) = spd_sqrt_pair(&(m.transpose() * m))?;
    let r = m * inv_root;
    let theta = r[(1, 0)].atan2(r[(0, 0)]);
    let (vals, vecs) = crate::linalg::sym_eigen(&root)?;
    let log = &vecs * Mat::from_diagonal(&vals.map(f64::ln)) * vecs.transpose();
    let u = 0.5 * (log[(0, 0)] - log[(1, 1)]);
    let v = 0.5 * (log[(0, 1)] + log[(1, 0)]);
    Ok((theta, u, v))
}

/// Torus coordinates along a path with the angle continued across branches.
pub fn unwrapped_coords(path: &SymplecticPath) -> Result<Vec<(f64, f64, f64)>> {
    let mut out: Vec<(f64, f64, f64)> = Vec::with_capacity(path.psi.len());
    for m in &path.psi {
        let (mut theta, u, v) = torus_coords(m)?;
        if let Some(&(prev, _, _)) = out.last() {
            let turns = ((prev - theta) / (2.0 * PI)).round();
            theta += turns * 2.0 * PI;
        }
        out.push((theta, u, v));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::max_abs;
    use proptest::prelude::*;

    fn cosh_sinh(kappa: f64, t: f64) -> Mat {
        let (c, s) = ((kappa * t).cosh(), (kappa * t).sinh());
        Mat::from_row_slice(2, 2, &[c, s / kappa, kappa * s, c])
    }

    #[test]
    fn zero_generator_gives_identity() {
        let p = fundamental_solution(&SymmetricFamily::constant(Mat::zeros(4, 4)), 16).unwrap();
        assert!(p.psi.iter().all(|m| max_abs(&(m - Mat::identity(4, 4))) == 0.0));
    }

    #[test]
    fn hyperbolic_closed_form() {
        let mu = -7.3;
        let kappa = (-mu as f64).sqrt();
        let s = Mat::from_diagonal(&crate::linalg::Vector::from_vec(vec![mu, 1.0]));
        let p = fundamental_solution(&SymmetricFamily::constant(s.clone()), DEFAULT_PATH_STEPS).unwrap();
        let e = matrix_exponential_path(&s, 64);
        for (k, &t) in p.times.iter().enumerate() {
            assert!(max_abs(&(&p.psi[k] - cosh_sinh(kappa, t))) < 1e-8);
        }
        for (k, &t) in e.times.iter().enumerate() {
            assert!(max_abs(&(&e.psi[k] - cosh_sinh(kappa, t))) < 1e-10);
        }
    }

    #[test]
    fn half_rotation_exponential() {
        let s = Mat::identity(2, 2) * -PI;
        let p = matrix_exponential_path(&s, 8);
        assert!(max_abs(&(p.end() + Mat::identity(2, 2))) < 1e-13);
    }

    #[test]
    fn gamma1_endpoints() {
        let g = gamma1_path(100);
        assert!(max_abs(&(&g.psi[0] - Mat::identity(2, 2))) == 0.0);
        let want = Mat::from_row_slice(2, 2, &[-2.0, 0.0, 0.0, -0.5]);
        assert!(max_abs(&(g.end() - want)) < 1e-14);
        assert!(g.defect < 1e-14);
    }

    #[test]
    fn gamma1_departure_side() {
        // det(1 − γ₁(ε)) ≈ (π² − 1)ε² > 0
        let eps = 1e-3;
        let m = Mat::identity(2, 2) - gamma1_path(1).psi_at(eps);
        let d = m.determinant();
        assert!(d > 0.0);
        assert!((d / (eps * eps) - (PI * PI - 1.0)).abs() < 0.05);
    }

    #[test]
    fn gamma2_matches_determinant_formula() {
        let mu = -PI * PI;
        let g = gamma2_path(mu, 2048).unwrap();
        for (k, &t) in g.times.iter().enumerate() {
            let d = (Mat::identity(2, 2) - &g.psi[k]).determinant();
            assert!((d - gamma2_det_formula(mu, t)).abs() < 1e-6);
        }
        assert!((gamma2_det_formula(mu, 1.0) - 2.0 * (1.0 + PI.cosh())).abs() < 1e-12);
        assert!((Mat::identity(2, 2) - g.psi_at(1e-3)).determinant() > 0.0);
        assert!(matches!(gamma2_path(-3.0, 10), Err(Error::Parameter(_))));
    }

    #[test]
    fn gamma2_factorizes_through_rotation() {
        let mu = -12.0;
        let g = gamma2_path(mu, 2048).unwrap();
        let kappa = (-mu as f64).sqrt();
        for &t in &[0.1, 0.55, 1.0] {
            let (s, c) = (PI * t).sin_cos();
            let u = Mat::from_row_slice(2, 2, &[c, -s, s, c]);
            assert!(max_abs(&(g.psi_at(t) - u * cosh_sinh(kappa, t))) < 1e-9);
        }
    }

    #[test]
    fn torus_coordinates_of_reference_points() {
        let (t, u, v) = torus_coords(&Mat::identity(2, 2)).unwrap();
        assert!(t.abs() + u.abs() + v.abs() < 1e-14);
        let r = crate::linalg::half_rotation(1, 0.4, 1);
        let (t, u, v) = torus_coords(&r).unwrap();
        assert!((t - 0.4 * PI).abs() < 1e-14 && u.abs() < 1e-14 && v.abs() < 1e-14);
        let m = Mat::from_row_slice(2, 2, &[-2.0, 0.0, 0.0, -0.5]);
        let (t, u, v) = torus_coords(&m).unwrap();
        assert!((t.abs() - PI).abs() < 1e-14);
        assert!((u - 2f64.ln()).abs() < 1e-14 && v.abs() < 1e-14);
    }

    #[test]
    fn unwrapping_is_continuous() {
        let p = matrix_exponential_path(&(Mat::identity(2, 2) * -3.0 * PI), 300);
        let c = unwrapped_coords(&p).unwrap();
        assert!((c.last().unwrap().0 - 3.0 * PI).abs() < 1e-10);
        assert!(c.windows(2).all(|w| (w[1].0 - w[0].0).abs() < 0.1));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn integrator_matches_exponential(entries in prop::collection::vec(-1.0f64..1.0, 10)) {
            let mut s = Mat::zeros(4, 4);
            let mut it = entries.iter();
            for i in 0..4 {
                for j in i..4 {
                    let x = *it.next().unwrap();
                    s[(i, j)] = x;
                    s[(j, i)] = x;
                }
            }
            let norm = s.clone().singular_values().max();
            let s = s * (1.9 * PI / norm.max(1e-3)).min(1.0);
            let ode = fundamental_solution(&SymmetricFamily::constant(s.clone()), DEFAULT_PATH_STEPS).unwrap();
            let exact = matrix_exponential_path(&s, DEFAULT_PATH_STEPS);
            let err = ode.psi.iter().zip(&exact.psi).map(|(a, b)| max_abs(&(a - b))).fold(0.0, f64::max);
            prop_assert!(err < 1e-8);
            prop_assert!(ode.psi.iter().all(|m| (m.determinant() - 1.0).abs() < 1e-8));
        }

        #[test]
        fn off_grid_evaluation_is_accurate(t in 0.0f64..1.0) {
            let g = gamma2_path(-PI * PI, 1024).unwrap();
            let kappa = PI;
            let (s, c) = (PI * t).sin_cos();
            let u = Mat::from_row_slice(2, 2, &[c, -s, s, c]);
            prop_assert!(max_abs(&(g.psi_at(t) - u * cosh_sinh(kappa, t))) < 1e-8);
        }
    }
}
