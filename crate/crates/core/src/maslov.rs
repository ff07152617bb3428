//! Robbin–Salamon index of graph paths `t ↦ Graph Ψ(t)` relative to the diagonal,
//! and the Conley–Zehnder index of admissible symplectic paths.
//!
//! A crossing is a time `t` with `ker(1 − Ψ(t)) ≠ 0`; its form is
//! `ζ ↦ −⟨ζ, S(t)ζ⟩` on the kernel. Endpoint crossings count with weight ½.

use std::fmt;
use std::ops::{Add, Neg, Sub};

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::framing::SymmetricFamily;
use crate::linalg::{j0, kernel_basis, max_abs, smallest_singular_value, sym_eigenvalues, symmetrize, Mat};
use crate::symplectic::{fundamental_solution, SymplecticPath};

/// Exact half-integer, stored as twice its value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct HalfInteger {
    pub twice: i64,
}

impl HalfInteger {
    pub const ZERO: HalfInteger = HalfInteger { twice: 0 };

    pub fn from_integer(k: i64) -> Self {
        HalfInteger { twice: 2 * k }
    }

    pub fn from_twice(twice: i64) -> Self {
        HalfInteger { twice }
    }

    pub fn is_integer(&self) -> bool {
        self.twice % 2 == 0
    }

    pub fn to_integer(&self) -> Option<i64> {
        self.is_integer().then_some(self.twice / 2)
    }

    pub fn value(&self) -> f64 {
        self.twice as f64 / 2.0
    }
}

impl Add for HalfInteger {
    type Output = HalfInteger;
    fn add(self, rhs: Self) -> Self {
        HalfInteger { twice: self.twice + rhs.twice }
    }
}

impl Sub for HalfInteger {
    type Output = HalfInteger;
    fn sub(self, rhs: Self) -> Self {
        HalfInteger { twice: self.twice - rhs.twice }
    }
}

impl Neg for HalfInteger {
    type Output = HalfInteger;
    fn neg(self) -> Self {
        HalfInteger { twice: -self.twice }
    }
}

impl fmt::Display for HalfInteger {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_integer() {
            write!(f, "{}", self.twice / 2)
        } else {
            write!(f, "{}/2", self.twice)
        }
    }
}

/// `n⁺ − n⁻`; an eigenvalue within `tol` of zero is an error.
pub fn signature(sym: &Mat, tol: f64) -> Result<i32> {
    let vals = sym_eigenvalues(sym)?;
    let mut sig = 0;
    for &v in vals.iter() {
        if v.abs() <= tol {
            return Err(Error::DegenerateForm { value: v, tol });
        }
        sig += if v > 0.0 { 1 } else { -1 };
    }
    Ok(sig)
}

#[derive(Debug, Clone, Copy)]
pub struct CrossingOptions {
    /// Kernel threshold relative to `1 + ‖Ψ‖`.
    pub kernel_rtol: f64,
    pub form_tol: f64,
    pub time_tol: f64,
}

impl Default for CrossingOptions {
    fn default() -> Self {
        CrossingOptions {
            kernel_rtol: 1e-7,
            form_tol: 1e-8,
            time_tol: 1e-10,
        }
    }
}

impl CrossingOptions {
    pub fn kernel_tol(&self, psi: &Mat) -> f64 {
        self.kernel_rtol * (1.0 + psi.norm())
    }
}

#[derive(Debug, Clone)]
pub struct Crossing {
    pub t: f64,
    /// Orthonormal kernel basis of `1 − Ψ(t)` (columns).
    pub kernel: Mat,
    pub form: Mat,
    pub signature: i32,
    pub regular: bool,
}

impl Crossing {
    pub fn dim(&self) -> usize {
        self.kernel.ncols()
    }
}

/// `−⟨ζ_a, S ζ_b⟩` on the given kernel basis.
pub fn crossing_form(s: &Mat, kernel: &Mat) -> Mat {
    symmetrize(&-(kernel.transpose() * s * kernel))
}

fn one_minus(psi: &Mat) -> Mat {
    Mat::identity(psi.nrows(), psi.ncols()) - psi
}

fn build_crossing(path: &SymplecticPath, t: f64, kernel: Mat, opts: &CrossingOptions) -> Result<Crossing> {
    let form = crossing_form(&path.generator_at(t), &kernel);
    let vals = sym_eigenvalues(&form)?;
    let regular = vals.iter().all(|v| v.abs() > opts.form_tol);
    let signature = vals.iter().map(|&v| if v > 0.0 { 1 } else { -1 }).sum();
    Ok(Crossing {
        t,
        kernel,
        form,
        signature,
        regular,
    })
}

fn bisect_sign<F: Fn(f64) -> f64>(f: &F, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let mut flo = f(lo);
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        let fm = f(mid);
        if fm == 0.0 {
            return mid;
        }
        if (fm > 0.0) == (flo > 0.0) {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn golden_min<F: Fn(f64) -> f64>(f: &F, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let r = 0.5 * (5f64.sqrt() - 1.0);
    let mut a = hi - r * (hi - lo);
    let mut b = lo + r * (hi - lo);
    let mut fa = f(a);
    let mut fb = f(b);
    while hi - lo > tol {
        if fa < fb {
            hi = b;
            b = a;
            fb = fa;
            a = hi - r * (hi - lo);
            fa = f(a);
        } else {
            lo = a;
            a = b;
            fa = fb;
            b = lo + r * (hi - lo);
            fb = f(b);
        }
    }
    0.5 * (lo + hi)
}

/// All crossings of the path on `[0, 1]`.
pub fn find_crossings(path: &SymplecticPath, opts: &CrossingOptions) -> Result<Vec<Crossing>> {
    find_crossings_in(path, 0.0, 1.0, opts)
}

/// Width below which the adaptive scan stops subdividing.
const LEAF_WIDTH: f64 = 1e-7;
const MAX_SCAN_PROBES: usize = 200_000;

struct Probe {
    t: f64,
    det: f64,
    sing: f64,
    /// `‖Ψ̇(t)‖_F`, a local Lipschitz bound for `σ_min(1 − Ψ)`.
    speed: f64,
}

fn probe(path: &SymplecticPath, t: f64, psi: Mat, generator: &Mat) -> Probe {
    let m = one_minus(&psi);
    Probe {
        t,
        det: m.determinant(),
        sing: smallest_singular_value(&m),
        speed: (j0(path.n) * generator * &psi).norm(),
    }
}

/// Subdivide until `σ_min(1 − Ψ)` is certified nonzero on each piece or the piece is
/// narrower than [`LEAF_WIDTH`]. Surviving leaves are appended to `leaves`.
fn scan(
    path: &SymplecticPath,
    l: &Probe,
    r: &Probe,
    leaves: &mut Vec<(f64, f64, f64, f64)>,
    probes: &mut usize,
) -> Result<()> {
    let width = r.t - l.t;
    let lipschitz = 1.5 * l.speed.max(r.speed);
    if l.sing + r.sing > lipschitz * width {
        return Ok(());
    }
    if width <= LEAF_WIDTH {
        leaves.push((l.t, l.det, r.t, r.det));
        return Ok(());
    }
    *probes += 1;
    if *probes > MAX_SCAN_PROBES {
        return Err(Error::Resolution(format!(
            "crossing scan did not separate the path from the Maslov cycle near t = {:.6}",
            l.t
        )));
    }
    let t = 0.5 * (l.t + r.t);
    let mid = probe(path, t, path.psi_at(t), &path.generator_at(t));
    scan(path, l, &mid, leaves, probes)?;
    scan(path, &mid, r, leaves, probes)
}

/// Crossings on a sub-interval `[a, b]`; endpoint crossings included.
///
/// Sample nodes are the path grid; between nodes the Lipschitz bound
/// `|σ_min(1 − Ψ(t)) − σ_min(1 − Ψ(s))| ≤ ‖Ψ(t) − Ψ(s)‖` decides where to refine,
/// so crossings closer together than the grid spacing are still separated.
pub fn find_crossings_in(path: &SymplecticPath, a: f64, b: f64, opts: &CrossingOptions) -> Result<Vec<Crossing>> {
    if !(0.0..=1.0).contains(&a) || !(a..=1.0).contains(&b) || b <= a {
        return Err(Error::Parameter(format!("invalid interval [{a}, {b}]")));
    }
    let mut nodes = vec![a];
    nodes.extend(path.times.iter().copied().filter(|&t| t > a + 1e-12 && t < b - 1e-12));
    nodes.push(b);
    let probes: Vec<Probe> = nodes
        .iter()
        .map(|&t| match path.times.iter().position(|&s| s == t) {
            Some(k) => probe(path, t, path.psi[k].clone(), &path.generator[k]),
            None => probe(path, t, path.psi_at(t), &path.generator_at(t)),
        })
        .collect();
    let last = nodes.len() - 1;
    let psi_a = path.psi_at(a);
    let psi_b = path.psi_at(b);
    let at_a = probes[0].sing <= opts.kernel_tol(&psi_a);
    let at_b = probes[last].sing <= opts.kernel_tol(&psi_b);

    // An irregular endpoint crossing already decides the outcome; the scan would
    // otherwise chase a path that may lie on the cycle.
    let mut ends = Vec::new();
    for (flag, t, psi) in [(at_a, a, &psi_a), (at_b, b, &psi_b)] {
        if flag {
            let c = build_crossing(path, t, kernel_basis(&one_minus(psi), opts.kernel_tol(psi))?, opts)?;
            if !c.regular {
                return Ok(vec![c]);
            }
            ends.push(c);
        }
    }
    let mut leaves = Vec::new();
    let mut count = 0;
    for i in 0..last {
        scan(path, &probes[i], &probes[i + 1], &mut leaves, &mut count)?;
    }
    // Merge touching leaves; each cluster holds one candidate.
    let mut clusters: Vec<(f64, f64, f64, f64)> = Vec::new();
    for leaf in leaves {
        match clusters.last_mut() {
            Some(c) if c.2 == leaf.0 => {
                c.2 = leaf.2;
                c.3 = leaf.3;
            }
            _ => clusters.push(leaf),
        }
    }
    let det_at = |t: f64| one_minus(&path.psi_at(t)).determinant();
    let sing_at = |t: f64| smallest_singular_value(&one_minus(&path.psi_at(t)));
    let mut candidates = Vec::new();
    for (l, dl, r, dr) in clusters {
        if (at_a && l == a) || (at_b && r == b) {
            continue;
        }
        candidates.push(if dl * dr < 0.0 {
            bisect_sign(&det_at, l, r, opts.time_tol)
        } else {
            golden_min(&sing_at, l, r, opts.time_tol)
        });
    }
    let mut ends = ends.into_iter();
    let mut out = Vec::new();
    if at_a {
        out.extend(ends.next());
    }
    let mut previous: Option<f64> = None;
    for t in candidates {
        if t - a < 1e-9 || b - t < 1e-9 || previous.is_some_and(|p| t - p < 1e-8) {
            continue;
        }
        let psi = path.psi_at(t);
        let tol = opts.kernel_tol(&psi);
        let m = one_minus(&psi);
        let kernel = kernel_basis(&m, tol)?;
        if kernel.ncols() == 0 {
            let smin = smallest_singular_value(&m);
            if smin < 100.0 * tol {
                return Err(Error::Resolution(format!(
                    "near crossing at t = {t:.10}: smallest singular value {smin:.3e} vs kernel tolerance {tol:.3e}"
                )));
            }
            continue;
        }
        previous = Some(t);
        out.push(build_crossing(path, t, kernel, opts)?);
    }
    if at_b {
        out.extend(ends.next());
    }
    Ok(out)
}

fn weighted_sum(crossings: &[Crossing], a: f64, b: f64) -> Result<HalfInteger> {
    let mut twice = 0i64;
    for c in crossings {
        if !c.regular {
            let smallest = sym_eigenvalues(&c.form)?.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
            return Err(Error::Irregular {
                at: c.t,
                detail: format!(
                    "crossing form on a {}-dimensional kernel has eigenvalue {smallest:.3e}",
                    c.dim()
                ),
            });
        }
        let endpoint = c.t == a || c.t == b;
        twice += if endpoint { c.signature as i64 } else { 2 * c.signature as i64 };
    }
    Ok(HalfInteger { twice })
}

/// Robbin–Salamon index of `Graph Ψ` relative to the diagonal.
pub fn rs_index(path: &SymplecticPath, opts: &CrossingOptions) -> Result<HalfInteger> {
    weighted_sum(&find_crossings(path, opts)?, 0.0, 1.0)
}

/// Robbin–Salamon index of the restriction to `[a, b]`.
pub fn rs_index_on(path: &SymplecticPath, a: f64, b: f64, opts: &CrossingOptions) -> Result<HalfInteger> {
    weighted_sum(&find_crossings_in(path, a, b, opts)?, a, b)
}

/// Conley–Zehnder index of an admissible path.
pub fn cz_index(path: &SymplecticPath, opts: &CrossingOptions) -> Result<HalfInteger> {
    let d = path.psi[0].nrows();
    if max_abs(&(&path.psi[0] - Mat::identity(d, d))) > 1e-12 {
        return Err(Error::Admissibility("path does not start at the identity".into()));
    }
    let end = path.end();
    let smin = smallest_singular_value(&one_minus(end));
    let tol = opts.kernel_tol(end);
    if smin <= tol {
        return Err(Error::Admissibility(format!(
            "endpoint on the Maslov cycle: smallest singular value of 1 - Psi(1) is {smin:.3e}"
        )));
    }
    let idx = rs_index(path, opts)?;
    if !idx.is_integer() {
        return Err(Error::Numerics(format!("index {idx} of an admissible path is not an integer")));
    }
    Ok(idx)
}

/// Index of the path generated by `S + δ·1`, a documented way around irregular crossings.
pub fn cz_index_perturbed(
    s: &SymmetricFamily,
    delta: f64,
    steps: usize,
    opts: &CrossingOptions,
) -> Result<HalfInteger> {
    cz_index(&fundamental_solution(&s.shifted(delta), steps)?, opts)
}

/// `2·deg det(X + iY)` for a sampled loop of unitary symplectic matrices `[[X, −Y], [Y, X]]`.
pub fn unitary_loop_degree(loop_samples: &[Mat]) -> Result<i32> {
    let first = loop_samples
        .first()
        .ok_or_else(|| Error::Parameter("empty loop".into()))?;
    let n = first.nrows() / 2;
    let last = loop_samples.last().unwrap();
    if max_abs(&(last - first)) > 1e-8 {
        return Err(Error::Parameter("loop does not close".into()));
    }
    let dets: Vec<Complex64> = loop_samples.iter().map(|m| complex_det(m, n)).collect::<Result<_>>()?;
    let mut total = 0.0;
    for w in dets.windows(2) {
        let step = (w[1] / w[0]).arg();
        if step.abs() > 1.0 {
            return Err(Error::Numerics("loop sampled too coarsely to follow the determinant".into()));
        }
        total += step;
    }
    let turns = total / (2.0 * std::f64::consts::PI);
    let rounded = turns.round();
    if (turns - rounded).abs() > 1e-6 {
        return Err(Error::Numerics(format!("winding {turns} is not an integer")));
    }
    Ok(2 * rounded as i32)
}

fn complex_det(m: &Mat, n: usize) -> Result<Complex64> {
    let x = m.view((0, 0), (n, n));
    let y = m.view((n, 0), (n, n));
    let defect = max_abs(&(m.view((0, n), (n, n)) + y)).max(max_abs(&(m.view((n, n), (n, n)) - x)));
    if defect > 1e-8 {
        return Err(Error::Numerics("loop sample does not commute with J0".into()));
    }
    let c = nalgebra::DMatrix::<Complex64>::from_fn(n, n, |i, j| Complex64::new(x[(i, j)], y[(i, j)]));
    let det = c.determinant();
    if det.norm() < 1e-8 {
        return Err(Error::Numerics("complex determinant vanishes on the loop".into()));
    }
    Ok(det)
}
