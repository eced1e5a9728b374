//! Dense linear-algebra kernels shared by the solvers: spectral abscissa,
//! Bartels-Stewart Lyapunov solves, the matrix sign function, symmetric
//! tridiagonal eigenvalues and complex singular values.

use nalgebra::{Complex, DMatrix, DVector, Schur};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub type C64 = Complex<f64>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random vector with i.i.d. entries uniform on [-1, 1], scaled to unit norm.
pub fn random_unit(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    loop {
        let v = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let nrm = v.norm();
        if nrm > 1e-12 {
            return v / nrm;
        }
    }
}

fn schur(a: &DMatrix<f64>) -> Result<Schur<f64, nalgebra::Dyn>> {
    let n = a.nrows();
    Schur::try_new(a.clone(), f64::EPSILON, 200 * n.max(10))
        .ok_or_else(|| Error::Eigen(format!("real Schur form did not converge (n = {n})")))
}

pub fn eigenvalues(a: &DMatrix<f64>) -> Result<Vec<C64>> {
    if a.nrows() == 0 {
        return Ok(Vec::new());
    }
    Ok(schur(a)?.complex_eigenvalues().iter().copied().collect())
}

/// Largest real part among the eigenvalues of `a`.
pub fn spectral_abscissa(a: &DMatrix<f64>) -> Result<f64> {
    Ok(eigenvalues(a)?
        .iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max))
}

pub fn symmetric_part(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

pub fn min_symmetric_eigenvalue(a: &DMatrix<f64>) -> f64 {
    symmetric_part(a)
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

pub fn max_symmetric_eigenvalue(a: &DMatrix<f64>) -> f64 {
    symmetric_part(a)
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max)
}

pub fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    a.singular_values().iter().copied().fold(0.0, f64::max)
}

/// Diagonal blocks of a real quasi-triangular Schur factor as (start, size).
fn schur_blocks(t: &DMatrix<f64>) -> Vec<(usize, usize)> {
    let n = t.nrows();
    let mut blocks = Vec::new();
    let mut k = 0;
    while k < n {
        if k + 1 < n && t[(k + 1, k)] != 0.0 {
            blocks.push((k, 2));
            k += 2;
        } else {
            blocks.push((k, 1));
            k += 1;
        }
    }
    blocks
}

/// Solves `Tᵀ Y + Y T = F` for quasi upper-triangular `T`.
fn solve_quasi_lyapunov(t: &DMatrix<f64>, f: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = t.nrows();
    let blocks = schur_blocks(t);
    let mut y = DMatrix::<f64>::zeros(n, n);
    for &(j0, q) in &blocks {
        for &(i0, p) in &blocks {
            // rhs = F_IJ - sum_{K<I} T_KIᵀ Y_KJ - sum_{K<J} Y_IK T_KJ
            let mut rhs = f.view((i0, j0), (p, q)).clone_owned();
            if i0 > 0 {
                let tki = t.view((0, i0), (i0, p));
                let ykj = y.view((0, j0), (i0, q));
                rhs -= tki.transpose() * ykj;
            }
            if j0 > 0 {
                let yik = y.view((i0, 0), (p, j0));
                let tkj = t.view((0, j0), (j0, q));
                rhs -= yik * tkj;
            }
            let tii = t.view((i0, i0), (p, p));
            let tjj = t.view((j0, j0), (q, q));
            // vec(Y) column-major: (I_q ⊗ T_IIᵀ + T_JJᵀ ⊗ I_p)
            let m = p * q;
            let mut kron = DMatrix::<f64>::zeros(m, m);
            for c in 0..q {
                for a in 0..p {
                    for b in 0..p {
                        kron[(c * p + a, c * p + b)] += tii[(b, a)];
                    }
                }
            }
            for c in 0..q {
                for d in 0..q {
                    for a in 0..p {
                        kron[(c * p + a, d * p + a)] += tjj[(d, c)];
                    }
                }
            }
            let rhs_vec = DVector::from_column_slice(rhs.as_slice());
            let sol = kron.lu().solve(&rhs_vec).ok_or_else(|| {
                Error::Singular("Lyapunov operator is singular (eigenvalues λ_i + λ_j = 0)".into())
            })?;
            for c in 0..q {
                for a in 0..p {
                    y[(i0 + a, j0 + c)] = sol[c * p + a];
                }
            }
        }
    }
    Ok(y)
}

/// Solves the continuous Lyapunov equation `Aᵀ X + X A + Q = 0` by the
/// Bartels-Stewart method. The result is symmetrized when `Q` is symmetric.
pub fn solve_lyapunov(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if a.ncols() != n || q.shape() != (n, n) {
        return Err(Error::InvalidArgument(
            "Lyapunov solve needs square matrices of equal size".into(),
        ));
    }
    let (u, t) = schur(a)?.unpack();
    let f = -(u.transpose() * q * &u);
    let y = solve_quasi_lyapunov(&t, &f)?;
    let x = &u * y * u.transpose();
    if (q - q.transpose()).amax() <= 1e-14 * q.amax().max(1.0) {
        Ok(symmetric_part(&x))
    } else {
        Ok(x)
    }
}

/// Matrix sign function by the scaled Newton iteration.
pub fn matrix_sign(a: &DMatrix<f64>) -> Result<(DMatrix<f64>, usize)> {
    let n = a.nrows();
    let mut z = a.clone();
    let mut scaling = true;
    for iter in 1..=100 {
        let lu = z.clone().lu();
        let inv = lu
            .try_inverse()
            .ok_or_else(|| Error::Singular("matrix sign iteration hit a singular iterate".into()))?;
        let c = if scaling {
            // determinant scaling |det Z|^{-1/n}, evaluated in log space
            let lu = z.clone().lu();
            let u = lu.u();
            let logdet: f64 = (0..n).map(|i| u[(i, i)].abs().ln()).sum();
            (-logdet / n as f64).exp()
        } else {
            1.0
        };
        let next = (&z * c + inv / c) * 0.5;
        let change = (&next - &z).norm() / next.norm();
        z = next;
        if change < 1e-2 {
            scaling = false;
        }
        if change < 1e-13 {
            return Ok((z, iter));
        }
    }
    Err(Error::Eigen("matrix sign iteration did not converge in 100 steps".into()))
}

/// Number of eigenvalues of the symmetric tridiagonal matrix strictly below `x`.
fn sturm_count(diag: &[f64], off: &[f64], x: f64) -> usize {
    let mut count = 0;
    let mut q = 1.0;
    for i in 0..diag.len() {
        let e2 = if i == 0 { 0.0 } else { off[i - 1] * off[i - 1] };
        q = diag[i] - x - if i == 0 { 0.0 } else { e2 / q };
        if q == 0.0 {
            q = f64::EPSILON * (diag[i].abs() + 1.0);
        }
        if q < 0.0 {
            count += 1;
        }
    }
    count
}

/// The `k`-th smallest eigenvalue (0-based) of a symmetric tridiagonal matrix,
/// by Sturm-sequence bisection. Returns the value and the number of
/// bisection steps taken.
pub fn tridiagonal_eigenvalue(diag: &[f64], off: &[f64], k: usize) -> Result<(f64, usize)> {
    let n = diag.len();
    if k >= n || off.len() + 1 != n {
        return Err(Error::InvalidArgument(
            "tridiagonal eigenvalue index or shape out of range".into(),
        ));
    }
    // Gershgorin bracket
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..n {
        let r = if i > 0 { off[i - 1].abs() } else { 0.0 } + if i + 1 < n { off[i].abs() } else { 0.0 };
        lo = lo.min(diag[i] - r);
        hi = hi.max(diag[i] + r);
    }
    let mut steps = 0;
    while hi - lo > 2.0 * f64::EPSILON * lo.abs().max(hi.abs()) && steps < 2000 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if sturm_count(diag, off, mid) > k {
            hi = mid;
        } else {
            lo = mid;
        }
        steps += 1;
    }
    if steps >= 2000 {
        return Err(Error::Eigen(format!(
            "Sturm bisection stalled after {steps} steps, bracket [{lo:e}, {hi:e}]"
        )));
    }
    Ok((0.5 * (lo + hi), steps))
}

/// Eigenvector of a symmetric tridiagonal matrix for a computed eigenvalue,
/// by two steps of shifted inverse iteration with the Thomas algorithm.
pub fn tridiagonal_eigenvector(diag: &[f64], off: &[f64], eig: f64) -> DVector<f64> {
    let n = diag.len();
    let shift = eig - 1e-10 * (eig.abs() + 1.0);
    let mut x = DVector::from_fn(n, |i, _| 1.0 + 0.01 * ((i * 7919) % 13) as f64);
    for _ in 0..3 {
        // Thomas algorithm on (T - shift I) z = x
        let mut c = vec![0.0; n];
        let mut d = vec![0.0; n];
        let mut b0 = diag[0] - shift;
        if b0 == 0.0 {
            b0 = f64::EPSILON;
        }
        if n > 1 {
            c[0] = off[0] / b0;
        }
        d[0] = x[0] / b0;
        for i in 1..n {
            let mut den = diag[i] - shift - off[i - 1] * c[i - 1];
            if den == 0.0 {
                den = f64::EPSILON;
            }
            if i + 1 < n {
                c[i] = off[i] / den;
            }
            d[i] = (x[i] - off[i - 1] * d[i - 1]) / den;
        }
        let mut z = DVector::zeros(n);
        z[n - 1] = d[n - 1];
        for i in (0..n - 1).rev() {
            z[i] = d[i] - c[i] * z[i + 1];
        }
        let nrm = z.norm();
        x = z / nrm;
    }
    // fix sign: largest-magnitude entry positive
    let imax = x.iamax();
    if x[imax] < 0.0 {
        x = -x;
    }
    x
}

pub fn to_complex(a: &DMatrix<f64>) -> DMatrix<C64> {
    a.map(|x| C64::new(x, 0.0))
}

/// Largest singular value of a complex matrix.
pub fn sigma_max(a: &DMatrix<C64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.singular_values().iter().copied().fold(0.0, f64::max)
}

/// 2-norm condition number.
pub fn condition_number(a: &DMatrix<f64>) -> f64 {
    let sv = a.singular_values();
    let max = sv.iter().copied().fold(0.0, f64::max);
    let min = sv.iter().copied().fold(f64::INFINITY, f64::min);
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lyapunov_matches_kronecker_oracle() {
        let mut r = rng(7);
        let n = 6;
        let a = DMatrix::from_fn(n, n, |i, j| {
            let v: f64 = r.random_range(-1.0..1.0);
            if i == j {
                v - 3.0
            } else {
                v
            }
        });
        let q = {
            let g = DMatrix::from_fn(n, n, |_, _| r.random_range(-1.0..1.0));
            &g * g.transpose()
        };
        let x = solve_lyapunov(&a, &q).unwrap();
        // independent check: dense Kronecker system
        let id = DMatrix::<f64>::identity(n, n);
        let kron = id.kronecker(&a.transpose()) + a.transpose().kronecker(&id);
        let rhs = -DVector::from_column_slice(q.as_slice());
        let vx = kron.lu().solve(&rhs).unwrap();
        let xk = DMatrix::from_column_slice(n, n, vx.as_slice());
        assert!((&x - &xk).amax() < 1e-10 * xk.amax());
    }

    #[test]
    fn lyapunov_handles_complex_pairs() {
        // rotation-dominated matrix forces 2x2 Schur blocks
        let a = DMatrix::from_row_slice(
            4,
            4,
            &[
                -1.0, 5.0, 0.3, 0.0, -5.0, -1.0, 0.0, 0.2, 0.0, 0.1, -2.0, 3.0, 0.4, 0.0, -3.0, -2.0,
            ],
        );
        let q = DMatrix::<f64>::identity(4, 4);
        let x = solve_lyapunov(&a, &q).unwrap();
        let res = a.transpose() * &x + &x * &a + &q;
        assert!(res.amax() < 1e-12);
    }

    #[test]
    fn sign_of_diagonal() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![-3.0, 0.5, 100.0, -1e-2]));
        let (s, _) = matrix_sign(&a).unwrap();
        let expect = DMatrix::from_diagonal(&DVector::from_vec(vec![-1.0, 1.0, 1.0, -1.0]));
        assert!((s - expect).amax() < 1e-12);
    }

    #[test]
    fn sturm_bisection_on_laplacian() {
        // eigenvalues of tridiag(-1, 2, -1) are 2 - 2 cos(k pi / (n+1))
        let n = 50;
        let diag = vec![2.0; n];
        let off = vec![-1.0; n - 1];
        for k in [0, 1, 10, 49] {
            let (mu, _) = tridiagonal_eigenvalue(&diag, &off, k).unwrap();
            let exact = 2.0 - 2.0 * (((k + 1) as f64) * std::f64::consts::PI / (n as f64 + 1.0)).cos();
            assert!((mu - exact).abs() < 1e-12, "k={k}: {mu} vs {exact}");
        }
        let (mu, _) = tridiagonal_eigenvalue(&diag, &off, 0).unwrap();
        let v = tridiagonal_eigenvector(&diag, &off, mu);
        let t = DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                2.0
            } else if i.abs_diff(j) == 1 {
                -1.0
            } else {
                0.0
            }
        });
        assert!((&t * &v - &v * mu).norm() < 1e-10);
    }
}
