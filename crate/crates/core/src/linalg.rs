//! Dense linear-algebra helpers shared by the index pipelines.
//!
//! Everything here works on dynamically sized `nalgebra` matrices; the
//! phase-space dimension is small (2n ≤ 8 in practice) while the discretized
//! operators are a few thousand rows at most.

use nalgebra::{DMatrix, DVector, SymmetricEigen, SVD};

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// The standard complex structure `[[0, -1], [1, 0]]` on ℝ²ⁿ.
pub fn j0(n: usize) -> Mat {
    let mut j = Mat::zeros(2 * n, 2 * n);
    for i in 0..n {
        j[(i, n + i)] = -1.0;
        j[(n + i, i)] = 1.0;
    }
    j
}

/// Assemble a 2×2 block matrix from equally sized square blocks.
pub fn block2(a: &Mat, b: &Mat, c: &Mat, d: &Mat) -> Mat {
    let n = a.nrows();
    let mut m = Mat::zeros(2 * n, 2 * n);
    m.view_mut((0, 0), (n, n)).copy_from(a);
    m.view_mut((0, n), (n, n)).copy_from(b);
    m.view_mut((n, 0), (n, n)).copy_from(c);
    m.view_mut((n, n), (n, n)).copy_from(d);
    m
}

pub fn block_diag(a: &Mat, d: &Mat) -> Mat {
    let z = Mat::zeros(a.nrows(), a.ncols());
    block2(a, &z, &z, d)
}

pub fn symmetrize(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

pub fn max_abs(m: &Mat) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

pub fn asymmetry(m: &Mat) -> f64 {
    max_abs(&(m - m.transpose()))
}

/// `‖ΨᵀJ₀Ψ − J₀‖_∞` (entrywise maximum).
pub fn symplectic_defect(psi: &Mat) -> f64 {
    let n = psi.nrows() / 2;
    let j = j0(n);
    max_abs(&(psi.transpose() * &j * psi - &j))
}

/// Eigenvalues in ascending order with matching eigenvector columns.
pub fn sym_eigen(m: &Mat) -> Result<(Vector, Mat)> {
    let dim = m.nrows();
    if dim == 0 {
        return Ok((Vector::zeros(0), Mat::zeros(0, 0)));
    }
    let eig = SymmetricEigen::try_new(symmetrize(m), 1e-15, 100 * dim.max(10))
        .ok_or_else(|| Error::Eigensolver(format!("symmetric QL iteration on {dim}x{dim}")))?;
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = Vector::from_iterator(dim, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = Mat::zeros(dim, dim);
    for (col, &i) in order.iter().enumerate() {
        vectors.set_column(col, &eig.eigenvectors.column(i));
    }
    Ok((values, vectors))
}

/// Eigenvalues only, ascending.
pub fn sym_eigenvalues(m: &Mat) -> Result<Vector> {
    if m.nrows() == 0 {
        return Ok(Vector::zeros(0));
    }
    let sym = symmetrize(m);
    if sym.iter().any(|v| !v.is_finite()) {
        return Err(Error::Eigensolver("non-finite matrix entry".into()));
    }
    let mut vals: Vec<f64> = sym.symmetric_eigenvalues().iter().copied().collect();
    vals.sort_by(f64::total_cmp);
    Ok(Vector::from_vec(vals))
}

/// Singular values in descending order together with the right singular vectors
/// (as columns, same order).
pub fn svd_right(m: &Mat) -> Result<(Vec<f64>, Mat)> {
    let svd = SVD::try_new(m.clone(), false, true, 1e-15, 500)
        .ok_or_else(|| Error::Numerics("SVD did not converge".into()))?;
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::Numerics("SVD returned no right vectors".into()))?;
    let k = svd.singular_values.len();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let values = order.iter().map(|&i| svd.singular_values[i]).collect();
    let mut v = Mat::zeros(m.ncols(), k);
    for (col, &i) in order.iter().enumerate() {
        v.set_column(col, &v_t.row(i).transpose());
    }
    Ok((values, v))
}

pub fn smallest_singular_value(m: &Mat) -> f64 {
    m.clone()
        .singular_values()
        .iter()
        .fold(f64::INFINITY, |acc, &s| acc.min(s))
}

/// Orthonormal basis (columns) of the numerical kernel: right singular vectors
/// whose singular value does not exceed `tol`.
pub fn kernel_basis(m: &Mat, tol: f64) -> Result<Mat> {
    let (values, v) = svd_right(m)?;
    let cols: Vec<usize> = (0..values.len()).filter(|&i| values[i] <= tol).collect();
    let mut basis = Mat::zeros(m.ncols(), cols.len());
    for (j, &i) in cols.iter().enumerate() {
        basis.set_column(j, &v.column(i));
    }
    Ok(basis)
}

/// Matrix exponential by scaling and squaring of a truncated Taylor series.
pub fn expm(a: &Mat) -> Mat {
    let dim = a.nrows();
    let norm = a.iter().map(|v| v.abs()).sum::<f64>().max(0.0);
    let mut squarings = 0u32;
    let mut scale = 1.0;
    while norm * scale > 0.5 {
        scale *= 0.5;
        squarings += 1;
    }
    let scaled = a * scale;
    let mut term = Mat::identity(dim, dim);
    let mut sum = Mat::identity(dim, dim);
    for k in 1..=20 {
        term = &term * &scaled / k as f64;
        sum += &term;
        if max_abs(&term) < 1e-18 {
            break;
        }
    }
    for _ in 0..squarings {
        sum = &sum * &sum;
    }
    sum
}

/// Principal logarithm of a special orthogonal matrix, returned as a skew matrix.
///
/// Eigenvalue pairs at −1 are grouped into half-turns in the plane of the
/// corresponding real Schur vectors.
pub fn log_special_orthogonal(r: &Mat) -> Result<Mat> {
    let n = r.nrows();
    let ortho = max_abs(&(r.transpose() * r - Mat::identity(n, n)));
    if ortho > 1e-8 {
        return Err(Error::Frame(format!("matrix is not orthogonal (defect {ortho:e})")));
    }
    if r.determinant() < 0.0 {
        return Err(Error::Frame("matrix has negative determinant; no real logarithm".into()));
    }
    let log = match n {
        0 | 1 => Mat::zeros(n, n),
        2 => {
            let angle = r[(1, 0)].atan2(r[(0, 0)]);
            Mat::from_row_slice(2, 2, &[0.0, -angle, angle, 0.0])
        }
        _ => log_so_schur(r)?,
    };
    let back = expm(&log);
    let err = max_abs(&(&back - r));
    if err > 1e-9 {
        return Err(Error::Frame(format!("logarithm branch failed (residual {err:e})")));
    }
    Ok(log)
}

fn log_so_schur(r: &Mat) -> Result<Mat> {
    let n = r.nrows();
    let (z, t) = nalgebra::Schur::try_new(r.clone(), 1e-15, 1000)
        .ok_or_else(|| Error::Frame("real Schur decomposition failed".into()))?
        .unpack();
    let mut block_log = Mat::zeros(n, n);
    let mut minus_ones = Vec::new();
    let mut i = 0;
    while i < n {
        if i + 1 < n && t[(i + 1, i)].abs() > 1e-12 {
            // an orthogonal quasi-triangular matrix is block diagonal with rotation blocks
            let s = 0.5 * (t[(i + 1, i)] - t[(i, i + 1)]);
            let c = 0.5 * (t[(i, i)] + t[(i + 1, i + 1)]);
            let angle = s.atan2(c);
            block_log[(i, i + 1)] = -angle;
            block_log[(i + 1, i)] = angle;
            i += 2;
        } else {
            if t[(i, i)] < 0.0 {
                minus_ones.push(i);
            }
            i += 1;
        }
    }
    if minus_ones.len() % 2 != 0 {
        return Err(Error::Frame("odd number of -1 eigenvalues".into()));
    }
    for pair in minus_ones.chunks(2) {
        let (a, b) = (pair[0], pair[1]);
        block_log[(a, b)] = -std::f64::consts::PI;
        block_log[(b, a)] = std::f64::consts::PI;
    }
    let log = &z * block_log * z.transpose();
    Ok((&log - log.transpose()) * 0.5)
}

/// Symmetric square root and inverse square root of a positive definite matrix.
pub fn spd_sqrt_pair(m: &Mat) -> Result<(Mat, Mat)> {
    let (values, vectors) = sym_eigen(m)?;
    if values.iter().any(|&v| v <= 0.0) {
        return Err(Error::Numerics("matrix is not positive definite".into()));
    }
    let root = Mat::from_diagonal(&values.map(f64::sqrt));
    let inv_root = Mat::from_diagonal(&values.map(|v| 1.0 / v.sqrt()));
    Ok((
        &vectors * root * vectors.transpose(),
        &vectors * inv_root * vectors.transpose(),
    ))
}

/// Rotation `U(t)^power` of the (1, n+1) coordinate plane by the angle `power·π·t`.
pub fn half_rotation(n: usize, t: f64, power: i32) -> Mat {
    let angle = power as f64 * std::f64::consts::PI * t;
    let mut u = Mat::identity(2 * n, 2 * n);
    let (s, c) = angle.sin_cos();
    u[(0, 0)] = c;
    u[(0, n)] = -s;
    u[(n, 0)] = s;
    u[(n, n)] = c;
    u
}

/// `E_σ = diag((−1)^σ, 1, …, 1)`.
pub fn e_sigma(n: usize, sigma: u8) -> Mat {
    let mut e = Mat::identity(n, n);
    if sigma == 1 && n > 0 {
        e[(0, 0)] = -1.0;
    }
    e
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_skew(n: usize, rng: &mut ChaCha8Rng, scale: f64) -> Mat {
        let a = Mat::from_fn(n, n, |_, _| rng.gen_range(-scale..scale));
        (&a - a.transpose()) * 0.5
    }

    #[test]
    fn expm_of_rotation_generator() {
        let k = Mat::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]) * std::f64::consts::PI;
        let r = expm(&k);
        assert!(max_abs(&(r + Mat::identity(2, 2))) < 1e-13);
    }

    #[test]
    fn expm_matches_diagonal_exponentials() {
        let d = Mat::from_diagonal(&Vector::from_vec(vec![-3.0, 0.5, 7.0]));
        let e = expm(&d);
        for (i, v) in [-3.0_f64, 0.5, 7.0].iter().enumerate() {
            assert!((e[(i, i)] - v.exp()).abs() < 1e-11 * v.exp().max(1.0));
        }
    }

    #[test]
    fn log_so_roundtrip_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for n in 2..=5 {
            for _ in 0..20 {
                let l = random_skew(n, &mut rng, 1.5);
                let r = expm(&l);
                let back = log_special_orthogonal(&r).unwrap();
                assert!(max_abs(&(expm(&back) - &r)) < 1e-10);
            }
        }
    }

    #[test]
    fn log_so_handles_half_turns() {
        let mut r = -Mat::identity(4, 4);
        r[(3, 3)] = 1.0;
        r[(2, 2)] = 1.0;
        let l = log_special_orthogonal(&r).unwrap();
        assert!(max_abs(&(expm(&l) - &r)) < 1e-12);
        let full = -Mat::identity(4, 4);
        let l = log_special_orthogonal(&full).unwrap();
        assert!(max_abs(&(expm(&l) - &full)) < 1e-12);
    }

    #[test]
    fn log_so_rejects_reflection() {
        let r = Mat::from_diagonal(&Vector::from_vec(vec![1.0, -1.0]));
        assert!(matches!(log_special_orthogonal(&r), Err(Error::Frame(_))));
    }

    #[test]
    fn half_rotation_endpoints() {
        let n = 3;
        assert!(max_abs(&(half_rotation(n, 0.0, 1) - Mat::identity(6, 6))) < 1e-15);
        let u1 = half_rotation(n, 1.0, 1);
        let e = e_sigma(n, 1);
        assert!(max_abs(&(u1 - block_diag(&e, &e))) < 1e-15);
        assert!(symplectic_defect(&half_rotation(n, 0.37, 3)) < 1e-14);
    }

    #[test]
    fn kernel_basis_of_projector() {
        let mut m = Mat::identity(4, 4);
        m[(1, 1)] = 0.0;
        m[(3, 3)] = 1e-12;
        let k = kernel_basis(&m, 1e-9).unwrap();
        assert_eq!(k.ncols(), 2);
        assert!((&m * &k).norm() < 1e-11);
    }

    #[test]
    fn sorted_eigenvalues() {
        let m = Mat::from_row_slice(3, 3, &[2.0, 1.0, 0.0, 1.0, 2.0, 0.0, 0.0, 0.0, -4.0]);
        let v = sym_eigenvalues(&m).unwrap();
        assert!((v[0] + 4.0).abs() < 1e-12);
        assert!((v[1] - 1.0).abs() < 1e-12);
        assert!((v[2] - 3.0).abs() < 1e-12);
    }
}
