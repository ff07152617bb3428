//! Periodic orbits of `H = ½ yᵀg⁻¹y + V(t, x)` by shooting on the time-1 map.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{DeckMap, ManifoldModel, Potential};
use crate::linalg::{symplectic_defect, Mat, Vector};

pub const DEFAULT_STEPS: usize = 2048;

#[derive(Debug, Clone, Copy)]
pub struct OrbitOptions {
    pub steps: usize,
    pub tol: f64,
    pub max_iter: usize,
    /// Newton Jacobians with `|det| <` this are treated as degenerate.
    pub det_tol: f64,
    pub defect_tol: f64,
}

impl Default for OrbitOptions {
    fn default() -> Self {
        OrbitOptions {
            steps: DEFAULT_STEPS,
            tol: 1e-10,
            max_iter: 50,
            det_tol: 1e-8,
            defect_tol: 1e-8,
        }
    }
}

/// Split a phase-space point into position and momentum.
pub fn split(z: &Vector) -> (Vector, Vector) {
    let n = z.len() / 2;
    (z.rows(0, n).into_owned(), z.rows(n, n).into_owned())
}

pub fn join(x: &Vector, y: &Vector) -> Vector {
    let n = x.len();
    let mut z = Vector::zeros(2 * n);
    z.rows_mut(0, n).copy_from(x);
    z.rows_mut(n, n).copy_from(y);
    z
}

/// Chart vector field: `ẋ = g⁻¹y`, `ẏ_l = −½ yᵀ(∂_l g⁻¹)y − ∂_l V`.
pub fn hamiltonian_rhs(model: &ManifoldModel, pot: &Potential, t: f64, z: &Vector) -> Result<Vector> {
    let (x, y) = split(z);
    model.check_domain(&x)?;
    let ginv = model.inverse_metric(&x);
    let dginv = model.inverse_metric_partials(&x);
    let grad = pot.data(t, &x).gradient;
    let ydot = Vector::from_fn(x.len(), |l, _| -0.5 * y.dot(&(&dginv[l] * &y)) - grad[l]);
    Ok(join(&(ginv * &y), &ydot))
}

/// Derivative of [`hamiltonian_rhs`] with respect to `z`.
pub fn hamiltonian_jacobian(model: &ManifoldModel, pot: &Potential, t: f64, z: &Vector) -> Result<Mat> {
    let (x, y) = split(z);
    model.check_domain(&x)?;
    let n = x.len();
    let ginv = model.inverse_metric(&x);
    let d1 = model.inverse_metric_partials(&x);
    let d2 = model.inverse_metric_second_partials(&x);
    let hess = pot.data(t, &x).hessian;
    let mut jac = Mat::zeros(2 * n, 2 * n);
    for l in 0..n {
        let col = &d1[l] * &y;
        for i in 0..n {
            jac[(i, l)] = col[i];
            jac[(n + l, n + i)] = -col[i];
        }
        for m in 0..n {
            jac[(n + l, m)] = -0.5 * y.dot(&(&d2[l][m] * &y)) - hess[(l, m)];
        }
    }
    jac.view_mut((0, n), (n, n)).copy_from(&ginv);
    Ok(jac)
}

/// One classical Runge–Kutta step.
pub(crate) fn rk4_step<F>(f: &F, t: f64, s: &Vector, h: f64) -> Result<Vector>
where
    F: Fn(f64, &Vector) -> Result<Vector>,
{
    let k1 = f(t, s)?;
    let k2 = f(t + 0.5 * h, &(s + &k1 * (0.5 * h)))?;
    let k3 = f(t + 0.5 * h, &(s + &k2 * (0.5 * h)))?;
    let k4 = f(t + h, &(s + &k3 * h))?;
    Ok(s + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0))
}

#[derive(Debug, Clone)]
pub struct Monodromy {
    pub matrix: Mat,
    /// `|det(1 − matrix)|`.
    pub nondegeneracy_gap: f64,
    pub symplectic_defect: f64,
}

impl Monodromy {
    fn new(matrix: Mat) -> Self {
        let dim = matrix.nrows();
        let gap = (Mat::identity(dim, dim) - &matrix).determinant().abs();
        let defect = symplectic_defect(&matrix);
        Monodromy {
            matrix,
            nondegeneracy_gap: gap,
            symplectic_defect: defect,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FlowResult {
    pub end: Vector,
    pub monodromy: Monodromy,
    pub states: Vec<Vector>,
}

/// Integrate the orbit and its linearization over `[0, 1]` with `steps` RK4 steps.
pub fn flow_time1(
    model: &ManifoldModel,
    pot: &Potential,
    z0: &Vector,
    steps: usize,
    defect_tol: f64,
) -> Result<FlowResult> {
    let d = z0.len();
    if steps == 0 {
        return Err(Error::Parameter("step count must be positive".into()));
    }
    let rhs = |t: f64, s: &Vector| -> Result<Vector> {
        let z = s.rows(0, d).into_owned();
        let m = Mat::from_column_slice(d, d, s.rows(d, d * d).as_slice());
        let dz = hamiltonian_rhs(model, pot, t, &z)?;
        let dm = hamiltonian_jacobian(model, pot, t, &z)? * m;
        let mut out = Vector::zeros(d + d * d);
        out.rows_mut(0, d).copy_from(&dz);
        out.rows_mut(d, d * d).copy_from_slice(dm.as_slice());
        Ok(out)
    };
    let mut s = Vector::zeros(d + d * d);
    s.rows_mut(0, d).copy_from(z0);
    s.rows_mut(d, d * d).copy_from_slice(Mat::identity(d, d).as_slice());
    let h = 1.0 / steps as f64;
    let mut states = Vec::with_capacity(steps + 1);
    states.push(z0.clone());
    for k in 0..steps {
        s = rk4_step(&rhs, k as f64 * h, &s, h)?;
        states.push(s.rows(0, d).into_owned());
    }
    let monodromy = Monodromy::new(Mat::from_column_slice(d, d, s.rows(d, d * d).as_slice()));
    if monodromy.symplectic_defect > defect_tol {
        return Err(Error::accuracy(
            "monodromy symplecticity defect (increase steps)",
            monodromy.symplectic_defect,
            defect_tol,
        ));
    }
    Ok(FlowResult {
        end: states[steps].clone(),
        monodromy,
        states,
    })
}

/// A 1-periodic solution lifted to the chart, closed up by `deck`.
#[derive(Debug, Clone)]
pub struct PerturbedOrbit {
    pub times: Vec<f64>,
    pub states: Vec<Vector>,
    pub deck: DeckMap,
    pub action: f64,
    pub residual: f64,
    /// Linearized return map `dD⁻¹ dφ₁(z₀)`.
    pub monodromy: Monodromy,
    /// Linearized flow `dφ₁(z₀)` in chart coordinates.
    pub flow_derivative: Mat,
    pub iterations: usize,
}

impl PerturbedOrbit {
    pub fn dim(&self) -> usize {
        self.states[0].len() / 2
    }

    pub fn steps(&self) -> usize {
        self.states.len() - 1
    }

    pub fn z0(&self) -> &Vector {
        &self.states[0]
    }

    pub fn position(&self, k: usize) -> Vector {
        self.states[k].rows(0, self.dim()).into_owned()
    }

    pub fn momentum(&self, k: usize) -> Vector {
        let n = self.dim();
        self.states[k].rows(n, n).into_owned()
    }

    pub fn velocity(&self, model: &ManifoldModel, k: usize) -> Vector {
        model.inverse_metric(&self.position(k)) * self.momentum(k)
    }

    /// Orbit through `z0` without Newton correction (for known exact orbits).
    pub fn from_initial(
        model: &ManifoldModel,
        pot: &Potential,
        z0: &Vector,
        deck: DeckMap,
        opts: &OrbitOptions,
    ) -> Result<Self> {
        let flow = flow_time1(model, pot, z0, opts.steps, opts.defect_tol)?;
        let inv = deck.inverse();
        let residual = (inv.phase_map(&flow.end) - z0).amax();
        let ret = inv.phase_jacobian() * &flow.monodromy.matrix;
        let mut orbit = PerturbedOrbit {
            times: (0..=opts.steps).map(|k| k as f64 / opts.steps as f64).collect(),
            states: flow.states,
            deck,
            action: 0.0,
            residual,
            monodromy: Monodromy::new(ret),
            flow_derivative: flow.monodromy.matrix,
            iterations: 0,
        };
        orbit.action = action_of(model, pot, &orbit)?.lagrangian;
        Ok(orbit)
    }
}

/// Damped Newton iteration on `D⁻¹φ₁(z) − z`.
pub fn find_orbit(
    model: &ManifoldModel,
    pot: &Potential,
    seed: &Vector,
    deck: &DeckMap,
    opts: &OrbitOptions,
) -> Result<PerturbedOrbit> {
    let d = seed.len();
    let inv = deck.inverse();
    let dinv = inv.phase_jacobian();
    let eye = Mat::identity(d, d);
    let residual_of = |z: &Vector| -> Result<(Vector, FlowResult)> {
        let flow = flow_time1(model, pot, z, opts.steps, opts.defect_tol)?;
        Ok((inv.phase_map(&flow.end) - z, flow))
    };
    let mut z = seed.clone();
    let (mut f, mut flow) = residual_of(&z)?;
    let mut iterations = 0;
    loop {
        let norm = f.amax();
        let jac = &dinv * &flow.monodromy.matrix - &eye;
        let det = jac.determinant();
        if det.abs() < opts.det_tol {
            return Err(Error::Degenerate(format!(
                "shooting Jacobian singular (|det| = {:.3e}) near z = {:?}",
                det.abs(),
                z.as_slice()
            )));
        }
        if norm <= opts.tol {
            let mut orbit = PerturbedOrbit {
                times: (0..=opts.steps).map(|k| k as f64 / opts.steps as f64).collect(),
                states: flow.states,
                deck: deck.clone(),
                action: 0.0,
                residual: norm,
                monodromy: Monodromy::new(jac + &eye),
                flow_derivative: flow.monodromy.matrix,
                iterations,
            };
            orbit.action = action_of(model, pot, &orbit)?.lagrangian;
            return Ok(orbit);
        }
        if iterations >= opts.max_iter {
            return Err(Error::NoConvergence {
                iterations,
                residual: norm,
            });
        }
        let step = jac
            .lu()
            .solve(&(-&f))
            .ok_or_else(|| Error::Degenerate("shooting Jacobian not invertible".into()))?;
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..30 {
            let trial = &z + &step * alpha;
            if let Ok((ft, fl)) = residual_of(&trial) {
                if ft.amax() < norm || ft.amax() <= opts.tol {
                    accepted = Some((trial, ft, fl));
                    break;
                }
            }
            alpha *= 0.5;
        }
        let (zn, fnew, flnew) = accepted.ok_or(Error::NoConvergence {
            iterations,
            residual: norm,
        })?;
        z = zn;
        f = fnew;
        flow = flnew;
        iterations += 1;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActionValues {
    /// `∫ ½|ẋ|² − V dt`.
    pub lagrangian: f64,
    /// `∫ ⟨y, ẋ⟩ − H dt`.
    pub hamiltonian: f64,
    /// `‖ẋ‖²_{L²}`.
    pub kinetic: f64,
    /// Whether `‖ẋ‖² ≤ 2·action + 2 sup|V|` holds.
    pub within_uniform_bound: bool,
}

/// Both forms of the action. Velocities come from fourth-order differences of
/// the sampled positions, using the deck map to extend the lift periodically.
pub fn action_of(model: &ManifoldModel, pot: &Potential, orbit: &PerturbedOrbit) -> Result<ActionValues> {
    let steps = orbit.steps();
    if steps < 4 {
        return Err(Error::Parameter("orbit needs at least 4 steps".into()));
    }
    let h = 1.0 / steps as f64;
    let inv = orbit.deck.inverse();
    let pos = |k: isize| -> Vector {
        let s = steps as isize;
        if k < 0 {
            inv.apply(&orbit.position((k + s) as usize))
        } else if k > s {
            orbit.deck.apply(&orbit.position((k - s) as usize))
        } else {
            orbit.position(k as usize)
        }
    };
    let mut lag = 0.0;
    let mut ham = 0.0;
    let mut kin = 0.0;
    // periodic integrand: the rectangle rule over one period is the trapezoidal rule
    for k in 0..steps {
        let ki = k as isize;
        let xdot = (pos(ki - 2) - pos(ki - 1) * 8.0 + pos(ki + 1) * 8.0 - pos(ki + 2)) / (12.0 * h);
        let x = orbit.position(k);
        let y = orbit.momentum(k);
        let g = model.metric(&x)?;
        let ginv = model.inverse_metric(&x);
        let v = pot.value(orbit.times[k], &x);
        let k2 = xdot.dot(&(&g * &xdot));
        kin += k2;
        lag += 0.5 * k2 - v;
        ham += y.dot(&xdot) - (0.5 * y.dot(&(ginv * &y)) + v);
    }
    let lagrangian = lag * h;
    let kinetic = kin * h;
    Ok(ActionValues {
        lagrangian,
        hamiltonian: ham * h,
        kinetic,
        within_uniform_bound: kinetic <= 2.0 * lagrangian + 2.0 * pot.sup_norm() + 1e-9,
    })
}

/// Representative of the orbit with `x(0)` in the fundamental domain.
pub fn canonical_start(model: &ManifoldModel, orbit: &PerturbedOrbit) -> (Vector, DeckMap) {
    let g = model.reduce(&orbit.position(0));
    let z = g.phase_map(orbit.z0());
    let deck = g.compose(&orbit.deck).compose(&g.inverse());
    (z, deck)
}

/// Run Newton from every seed in parallel, then drop duplicates.
pub fn search(
    model: &ManifoldModel,
    pot: &Potential,
    seeds: &[(Vector, DeckMap)],
    opts: &OrbitOptions,
) -> (Vec<PerturbedOrbit>, Vec<Error>) {
    let results: Vec<Result<PerturbedOrbit>> = seeds
        .par_iter()
        .map(|(z, d)| find_orbit(model, pot, z, d, opts))
        .collect();
    let mut found: Vec<PerturbedOrbit> = Vec::new();
    let mut keys: Vec<(Vector, DeckMap)> = Vec::new();
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(orbit) => {
                let key = canonical_start(model, &orbit);
                let dup = keys
                    .iter()
                    .any(|(z, d)| (z - &key.0).amax() < 1e-6 && d.distance(&key.1) < 1e-9);
                if !dup {
                    keys.push(key);
                    found.push(orbit);
                }
            }
            Err(e) => failures.push(e),
        }
    }
    (found, failures)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::FourierMode;
    use std::f64::consts::PI;

    fn v(xs: &[f64]) -> Vector {
        Vector::from_vec(xs.to_vec())
    }

    fn torus_potential() -> Potential {
        Potential::CosineLattice(vec![0.1, 0.1])
    }

    fn klein_potential() -> Potential {
        Potential::Fourier(vec![
            FourierMode { amplitude: 0.1, wave: vec![1.0, 0.0], frequency: 1.0, phase: 0.0 },
            FourierMode { amplitude: 0.4, wave: vec![0.0, 1.0], frequency: 0.0, phase: 0.0 },
        ])
    }

    #[test]
    fn free_flow_on_torus() {
        let m = ManifoldModel::flat_torus(2);
        let r = hamiltonian_rhs(&m, &Potential::Zero, 0.0, &v(&[0.0, 0.0, 1.0, 0.0])).unwrap();
        assert_eq!(r, v(&[1.0, 0.0, 0.0, 0.0]));
        let f = flow_time1(&m, &Potential::Zero, &v(&[0.0, 0.0, 1.0, 0.0]), 64, 1e-8).unwrap();
        assert!((f.end - v(&[1.0, 0.0, 1.0, 0.0])).amax() < 1e-14);
        let shear = Mat::from_row_slice(
            4,
            4,
            &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0],
        );
        assert!((f.monodromy.matrix - shear).amax() < 1e-13);
    }

    #[test]
    fn lattice_saddle_is_equilibrium() {
        let m = ManifoldModel::flat_torus(2);
        let z = v(&[0.5, 0.5, 0.0, 0.0]);
        assert!(hamiltonian_rhs(&m, &torus_potential(), 0.2, &z).unwrap().amax() < 1e-14);
        let f = flow_time1(&m, &torus_potential(), &z, 256, 1e-8).unwrap();
        assert!((f.end - z).amax() < 1e-14);
    }

    #[test]
    fn jacobian_matches_differences_on_sphere() {
        let s = ManifoldModel::sphere(1.2).unwrap();
        let pot = Potential::Zonal(vec![0.3, -0.1]);
        let z = v(&[1.0, 0.4, 0.3, -0.7]);
        let jac = hamiltonian_jacobian(&s, &pot, 0.1, &z).unwrap();
        let h = 1e-6;
        for j in 0..4 {
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[j] += h;
            zm[j] -= h;
            let fd = (hamiltonian_rhs(&s, &pot, 0.1, &zp).unwrap() - hamiltonian_rhs(&s, &pot, 0.1, &zm).unwrap())
                / (2.0 * h);
            assert!((fd - jac.column(j)).amax() < 1e-7, "column {j}");
        }
    }

    #[test]
    fn equator_is_a_great_circle() {
        let s = ManifoldModel::sphere(1.0).unwrap();
        // unit sphere, speed 2π along the equator
        let z0 = v(&[PI / 2.0, 0.0, 0.0, 2.0 * PI]);
        let f = flow_time1(&s, &Potential::Zero, &z0, 512, 1e-8).unwrap();
        assert!((f.end - v(&[PI / 2.0, 2.0 * PI, 0.0, 2.0 * PI])).amax() < 1e-10);
        let r = hamiltonian_rhs(&s, &Potential::Zero, 0.0, &z0).unwrap();
        assert!((r - v(&[0.0, 2.0 * PI, 0.0, 0.0])).amax() < 1e-14);
    }

    #[test]
    fn newton_finds_torus_saddle() {
        let m = ManifoldModel::flat_torus(2);
        let opts = OrbitOptions { steps: 256, ..Default::default() };
        let o = find_orbit(&m, &torus_potential(), &v(&[0.47, 0.53, 0.01, -0.02]), &DeckMap::identity(2), &opts)
            .unwrap();
        assert!((o.z0() - v(&[0.5, 0.5, 0.0, 0.0])).amax() < 1e-9);
        assert!(o.residual < 1e-10);
        assert!((o.action - 0.2).abs() < 1e-12);
        let again = find_orbit(&m, &torus_potential(), o.z0(), &DeckMap::identity(2), &opts).unwrap();
        assert!(again.iterations <= 2);
    }

    #[test]
    fn free_constant_loop_is_degenerate() {
        let m = ManifoldModel::flat_torus(2);
        let r = find_orbit(&m, &Potential::Zero, &v(&[0.0; 4]), &DeckMap::identity(2), &OrbitOptions::default());
        assert!(matches!(r, Err(e) if e.is_degeneracy()));
    }

    #[test]
    fn klein_orientation_reversing_orbit() {
        let k = ManifoldModel::klein_bottle();
        let deck = k.deck(&[(0, 1)]).unwrap();
        let opts = OrbitOptions { steps: 512, ..Default::default() };
        let o = find_orbit(&k, &klein_potential(), &v(&[0.03, 0.02, 0.95, 0.04]), &deck, &opts).unwrap();
        assert!((o.z0() - v(&[0.0, 0.0, 1.0, 0.0])).amax() < 1e-8);
        assert_eq!(o.deck.orientation(), -1.0);
        let a = action_of(&k, &klein_potential(), &o).unwrap();
        // ½·1 − ∫(0.1 + 0.4) dt
        assert!((a.lagrangian - 0.0).abs() < 1e-9);
        assert!((a.lagrangian - a.hamiltonian).abs() < 1e-8);
        assert!(a.within_uniform_bound);
    }

    #[test]
    fn rk4_order_under_refinement() {
        let k = ManifoldModel::klein_bottle();
        let z0 = v(&[0.1, 0.2, 0.7, 0.3]);
        let ends: Vec<Vector> = [32, 64, 128]
            .iter()
            .map(|&n| flow_time1(&k, &klein_potential(), &z0, n, 1.0).unwrap().end)
            .collect();
        let ratio = (&ends[0] - &ends[1]).norm() / (&ends[1] - &ends[2]).norm();
        assert!((12.0..=20.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn geodesic_action_is_kinetic() {
        let m = ManifoldModel::flat_torus(2);
        let o = PerturbedOrbit::from_initial(
            &m,
            &Potential::Zero,
            &v(&[0.0, 0.0, 1.0, 0.0]),
            m.deck(&[(0, 1)]).unwrap(),
            &OrbitOptions { steps: 64, ..Default::default() },
        )
        .unwrap();
        assert!((o.action - 0.5).abs() < 1e-13);
    }

    #[test]
    fn search_removes_duplicates() {
        let m = ManifoldModel::flat_torus(2);
        let id = DeckMap::identity(2);
        let seeds = vec![
            (v(&[0.48, 0.51, 0.0, 0.0]), id.clone()),
            (v(&[1.52, 0.49, 0.0, 0.0]), id.clone()),
            (v(&[0.02, 0.01, 0.0, 0.0]), id.clone()),
        ];
        let opts = OrbitOptions { steps: 128, ..Default::default() };
        let (found, failures) = search(&m, &torus_potential(), &seeds, &opts);
        assert!(failures.is_empty());
        assert_eq!(found.len(), 2);
    }
}
