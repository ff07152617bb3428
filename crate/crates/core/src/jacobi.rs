//! Finite-difference discretization of `−∂²ξ − Bξ − Qξ` with `ξ(1) = E_σξ(0)`,
//! where `Bξ = 2Pξ′ + P′ξ + P²ξ`, and inertia counts of the result.
//!
//! Unknowns are `ξ_k = ξ(k/N)` for `k = 0, …, N−1`; the ghost values are
//! `ξ_N = Eξ_0` and `ξ_{−1} = Eξ_{N−1}`. The first-order part uses the stencil
//! `[(P_k + P_{k+1})ξ_{k+1} − (P_k + P_{k−1})ξ_{k−1}] / 2h`, which carries `P′ξ`
//! and is antisymmetric-times-skew, hence symmetric.

use crate::error::{Error, Result};
use crate::framing::TwistedCoefficients;
use crate::linalg::{asymmetry, max_abs, sym_eigenvalues, Mat};

pub const MIN_GRID: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OperatorTag {
    ModelOperator,
    HomotopyA(f64),
    HomotopyB(f64),
    Family(f64),
}

#[derive(Debug, Clone)]
pub struct DiscretizedOperator {
    pub matrix: Mat,
    pub n: usize,
    pub grid: usize,
    pub e_sigma: Mat,
    pub tag: OperatorTag,
    /// `max_k ‖Q(t_k)‖_∞`.
    pub q_norm: f64,
}

impl DiscretizedOperator {
    pub fn default_null_tol(&self) -> f64 {
        1e-6 * (1.0 + self.q_norm)
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }
}

/// Assemble the operator for the given coefficients on `grid` points.
pub fn assemble_operator(
    coeffs: &dyn TwistedCoefficients,
    grid: usize,
    tag: OperatorTag,
) -> Result<DiscretizedOperator> {
    if grid < MIN_GRID {
        return Err(Error::Parameter(format!("grid size {grid} below {MIN_GRID}")));
    }
    let n = coeffs.n();
    let e = coeffs.e_sigma();
    let bq = (coeffs.q_at(1.0) - &e * coeffs.q_at(0.0) * &e).amax();
    let bp = (coeffs.p_at(1.0) - &e * coeffs.p_at(0.0) * &e).amax();
    if bq > 1e-8 || bp > 1e-8 {
        return Err(Error::Assembly(format!(
            "boundary relation violated: |Q(1) - EQ(0)E| = {bq:e}, |P(1) - EP(0)E| = {bp:e}"
        )));
    }
    let h = 1.0 / grid as f64;
    let q: Vec<Mat> = (0..grid).map(|k| coeffs.q_at(k as f64 * h)).collect();
    let p: Vec<Mat> = (0..grid).map(|k| coeffs.p_at(k as f64 * h)).collect();
    let worst_p = p.iter().map(|m| max_abs(&(m + m.transpose()))).fold(0.0, f64::max);
    if worst_p > 1e-10 {
        return Err(Error::Assembly(format!("P not skew ({worst_p:e})")));
    }
    let p_next = |k: usize| if k + 1 < grid { p[k + 1].clone() } else { &e * &p[0] * &e };
    let p_prev = |k: usize| if k > 0 { p[k - 1].clone() } else { &e * &p[grid - 1] * &e };

    let dim = n * grid;
    let mut a = Mat::zeros(dim, dim);
    let id = Mat::identity(n, n);
    let inv_h2 = 1.0 / (h * h);
    let add_block = |a: &mut Mat, row: usize, col: usize, block: &Mat| {
        let mut view = a.view_mut((row * n, col * n), (n, n));
        view += block;
    };
    for k in 0..grid {
        let diag = &id * (2.0 * inv_h2) - &p[k] * &p[k] - &q[k];
        add_block(&mut a, k, k, &diag);
        let (next, twist_next) = if k + 1 < grid { (k + 1, false) } else { (0, true) };
        let (prev, twist_prev) = if k > 0 { (k - 1, false) } else { (grid - 1, true) };
        let mut up = -&id * inv_h2 - (&p[k] + p_next(k)) / (2.0 * h);
        let mut down = -&id * inv_h2 + (&p[k] + p_prev(k)) / (2.0 * h);
        if twist_next {
            up *= &e;
        }
        if twist_prev {
            down *= &e;
        }
        add_block(&mut a, k, next, &up);
        add_block(&mut a, k, prev, &down);
    }
    let asym = asymmetry(&a);
    if asym > 1e-8 * (1.0 + inv_h2) {
        return Err(Error::Assembly(format!("assembled matrix asymmetric by {asym:e}")));
    }
    let matrix = (&a + a.transpose()) * 0.5;
    let q_norm = q.iter().map(max_abs).fold(0.0, f64::max);
    Ok(DiscretizedOperator {
        matrix,
        n,
        grid,
        e_sigma: e,
        tag,
        q_norm,
    })
}

/// The model operator `A⁰` of a closed frame.
pub fn assemble_a0(coeffs: &dyn TwistedCoefficients, grid: usize) -> Result<DiscretizedOperator> {
    assemble_operator(coeffs, grid, OperatorTag::ModelOperator)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralCount {
    pub ind: usize,
    pub null: usize,
    pub near_zero: Vec<f64>,
    /// Smallest `|λ|` among eigenvalues outside the null tolerance.
    pub gap: f64,
    pub null_tol: f64,
    pub grid: usize,
    /// The few lowest eigenvalues, ascending.
    pub lowest: Vec<f64>,
}

pub fn spectral_count(op: &DiscretizedOperator, null_tol: f64) -> Result<SpectralCount> {
    let vals = sym_eigenvalues(&op.matrix)?;
    let mut ind = 0;
    let mut near_zero = Vec::new();
    let mut gap = f64::INFINITY;
    for &v in vals.iter() {
        if v.abs() <= null_tol {
            near_zero.push(v);
        } else {
            if v < 0.0 {
                ind += 1;
            }
            gap = gap.min(v.abs());
        }
    }
    Ok(SpectralCount {
        ind,
        null: near_zero.len(),
        near_zero,
        gap,
        null_tol,
        grid: op.grid,
        lowest: vals.iter().take(8).copied().collect(),
    })
}

#[derive(Debug, Clone, Copy)]
pub struct MorseOptions {
    pub start_grid: usize,
    pub max_grid: usize,
    /// Overrides the default `1e-6(1 + ‖Q‖_∞)`.
    pub null_tol: Option<f64>,
}

impl Default for MorseOptions {
    fn default() -> Self {
        MorseOptions {
            start_grid: 128,
            max_grid: 1024,
            null_tol: None,
        }
    }
}

/// Count with grid doubling until `(Ind, Null)` agree on two consecutive grids.
/// A kernel or a spectral gap below ten times the tolerance is reported as degeneracy.
pub fn morse_index(coeffs: &dyn TwistedCoefficients, opts: &MorseOptions) -> Result<SpectralCount> {
    let stable = stable_count(coeffs, opts)?;
    if stable.null > 0 {
        return Err(Error::Degenerate(format!(
            "Jacobi operator has a {}-dimensional numerical kernel",
            stable.null
        )));
    }
    if stable.gap < 10.0 * stable.null_tol {
        return Err(Error::Degenerate(format!(
            "spectral gap {:.3e} below ten times the null tolerance {:.3e}",
            stable.gap, stable.null_tol
        )));
    }
    Ok(stable)
}

/// Grid-stabilized count without the degeneracy policy.
pub fn stable_count(coeffs: &dyn TwistedCoefficients, opts: &MorseOptions) -> Result<SpectralCount> {
    let mut grid = opts.start_grid.max(MIN_GRID);
    let mut previous: Option<SpectralCount> = None;
    loop {
        let op = assemble_a0(coeffs, grid)?;
        let tol = opts.null_tol.unwrap_or_else(|| op.default_null_tol());
        let count = spectral_count(&op, tol)?;
        if let Some(prev) = &previous {
            if prev.ind == count.ind && prev.null == count.null {
                return Ok(count);
            }
        }
        if grid * 2 > opts.max_grid {
            return Err(Error::Resolution(format!(
                "Morse index not stable up to grid {grid}: last (Ind, Null) = ({}, {})",
                count.ind, count.null
            )));
        }
        previous = Some(count);
        grid *= 2;
    }
}
