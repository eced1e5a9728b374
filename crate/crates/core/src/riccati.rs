//! The γ-parameterized game Riccati equation
//!
//! `AᵀP + PA - P(B₂B₂ᵀ - γ⁻²B₁B₁ᵀ)P + C₁ᵀC₁ = 0`,
//!
//! solved independently through the stable invariant subspace of the
//! Hamiltonian matrix and by Newton-Kleinman iteration, plus γ-bisection.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::operators::DiscreteSystem;

/// `γ⁻²`, with `γ = ∞` allowed.
pub fn inv_gamma_sq(gamma: f64) -> f64 {
    if gamma.is_infinite() {
        0.0
    } else {
        1.0 / (gamma * gamma)
    }
}

/// Quadratic coefficient `S = B₂B₂ᵀ - γ⁻²B₁B₁ᵀ`.
fn quadratic_term(sys: &DiscreteSystem, gamma: f64) -> DMatrix<f64> {
    sys.b2b2t() - sys.b1b1t() * inv_gamma_sq(gamma)
}

pub fn gare_residual_matrix(sys: &DiscreteSystem, p: &DMatrix<f64>, gamma: f64) -> DMatrix<f64> {
    let s = quadratic_term(sys, gamma);
    sys.a.transpose() * p + p * &sys.a - p * s * p + sys.c1tc1()
}

/// Frobenius norm of the Riccati residual.
pub fn gare_residual(sys: &DiscreteSystem, p: &DMatrix<f64>, gamma: f64) -> f64 {
    gare_residual_matrix(sys, p, gamma).norm()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Hamiltonian,
    Newton,
}

#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    pub p: DMatrix<f64>,
    pub gamma: f64,
    pub residual: f64,
    /// `f = -B₂ᵀP`, so the control is `u = f·y`.
    pub feedback: DVector<f64>,
    /// Spectral abscissa of `Λ_P = A - B₂B₂ᵀP + γ⁻²B₁B₁ᵀP`.
    pub abscissa_lp: f64,
    /// Spectral abscissa of `Λ_P¹ = A - B₂B₂ᵀP`.
    pub abscissa_lp1: f64,
    pub psd_min: f64,
    pub iterations: usize,
    pub method: Method,
}

impl RiccatiSolution {
    /// One-line `key=value` record.
    pub fn summary(&self) -> String {
        format!(
            "gamma={} residual={:.6e} abscissa_lp={:.6e} abscissa_lp1={:.6e} psd_min={:.6e} iterations={}",
            self.gamma, self.residual, self.abscissa_lp, self.abscissa_lp1, self.psd_min, self.iterations
        )
    }
}

/// Residual scale `‖A‖‖P‖ + ‖C₁ᵀC₁‖` used for relative tolerances.
pub fn residual_scale(sys: &DiscreteSystem, p: &DMatrix<f64>) -> f64 {
    linalg::spectral_norm(&sys.a) * linalg::spectral_norm(p) + linalg::spectral_norm(&sys.c1tc1())
}

/// Symmetrizes `p` and checks every property a stabilizing game solution
/// must have: positivity, stability of `Λ_P` and `Λ_P¹`, small residual.
pub fn certify(
    sys: &DiscreteSystem,
    p: &DMatrix<f64>,
    gamma: f64,
    iterations: usize,
    method: Method,
) -> Result<RiccatiSolution> {
    let p = linalg::symmetric_part(p);
    let p_norm = linalg::spectral_norm(&p);
    let psd_min = linalg::min_symmetric_eigenvalue(&p);
    if psd_min < -1e-8 * p_norm {
        return Err(Error::GammaInfeasible {
            gamma,
            reason: format!("solution is not positive semidefinite (min eigenvalue {psd_min:.3e})"),
        });
    }
    let lp1 = &sys.a - sys.b2b2t() * &p;
    let lp = &lp1 + sys.b1b1t() * &p * inv_gamma_sq(gamma);
    let abscissa_lp = linalg::spectral_abscissa(&lp)?;
    let abscissa_lp1 = linalg::spectral_abscissa(&lp1)?;
    if !(abscissa_lp < 0.0 && abscissa_lp1 < 0.0) {
        return Err(Error::GammaInfeasible {
            gamma,
            reason: format!(
                "closed-loop generators are not stable (abscissas {abscissa_lp:.3e}, {abscissa_lp1:.3e})"
            ),
        });
    }
    let residual = gare_residual(sys, &p, gamma);
    let bound = 1e-8 * residual_scale(sys, &p);
    if residual > bound {
        return Err(Error::NotCertified(format!(
            "Riccati residual {residual:.3e} exceeds {bound:.3e}"
        )));
    }
    let feedback = -(sys.b2.transpose() * &p).transpose();
    Ok(RiccatiSolution {
        p,
        gamma,
        residual,
        feedback,
        abscissa_lp,
        abscissa_lp1,
        psd_min,
        iterations,
        method,
    })
}

pub fn hamiltonian(sys: &DiscreteSystem, gamma: f64) -> DMatrix<f64> {
    let n = sys.n();
    let mut h = DMatrix::zeros(2 * n, 2 * n);
    h.view_mut((0, 0), (n, n)).copy_from(&sys.a);
    h.view_mut((0, n), (n, n)).copy_from(&(-quadratic_term(sys, gamma)));
    h.view_mut((n, 0), (n, n)).copy_from(&(-sys.c1tc1()));
    h.view_mut((n, n), (n, n)).copy_from(&(-sys.a.transpose()));
    h
}

/// Largest admissible `|Re λ|` treated as "on the imaginary axis".
fn imaginary_axis_tolerance(h: &DMatrix<f64>) -> f64 {
    1e-9f64.max(1e3 * f64::EPSILON * h.norm())
}

/// Stabilizing solution from the stable invariant subspace of the
/// Hamiltonian, computed with the matrix sign function.
pub fn solve_gare_hamiltonian(sys: &DiscreteSystem, gamma: f64) -> Result<RiccatiSolution> {
    check_gamma(gamma)?;
    let n = sys.n();
    let h = hamiltonian(sys, gamma);
    let tol = imaginary_axis_tolerance(&h);
    let eigs = linalg::eigenvalues(&h)?;
    if let Some(z) = eigs.iter().find(|z| z.re.abs() < tol) {
        return Err(Error::GammaInfeasible {
            gamma,
            reason: format!("Hamiltonian has an eigenvalue on the imaginary axis ({z:.3e})"),
        });
    }
    let (z, iterations) = linalg::matrix_sign(&h)?;
    // the stable subspace is ker(Z + I); with basis [I; P] this reads
    // [Z₁₂; Z₂₂ + I] P = -[Z₁₁ + I; Z₂₁], solved in the least-squares sense
    let mut lhs = DMatrix::zeros(2 * n, n);
    let mut rhs = DMatrix::zeros(2 * n, n);
    lhs.view_mut((0, 0), (n, n)).copy_from(&z.view((0, n), (n, n)));
    lhs.view_mut((n, 0), (n, n)).copy_from(&z.view((n, n), (n, n)));
    rhs.view_mut((0, 0), (n, n)).copy_from(&(-z.view((0, 0), (n, n))));
    rhs.view_mut((n, 0), (n, n)).copy_from(&(-z.view((n, 0), (n, n))));
    for i in 0..n {
        lhs[(n + i, i)] += 1.0;
        rhs[(i, i)] -= 1.0;
    }
    let cond = linalg::condition_number(&lhs);
    if !(cond < 1e12) {
        return Err(Error::SubspaceDegenerate { condition: cond });
    }
    let qr = lhs.qr();
    let qtb = qr.q().transpose() * rhs;
    let p = qr
        .r()
        .solve_upper_triangular(&qtb)
        .ok_or(Error::SubspaceDegenerate { condition: cond })?;
    certify(sys, &p, gamma, iterations, Method::Hamiltonian)
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma > 0.0) {
        return Err(Error::InvalidArgument(format!("gamma must be positive, got {gamma}")));
    }
    Ok(())
}

const NEWTON_TOL: f64 = 1e-10;
const NEWTON_CAP: usize = 50;
const GROWTH_LIMIT: usize = 5;
const CONTINUATION_STEPS: usize = 8;

/// Newton-Kleinman iteration at a fixed level from a given start. Returns the
/// iterate and the number of steps taken.
fn newton_kleinman(
    a: &DMatrix<f64>,
    s: &DMatrix<f64>,
    q: &DMatrix<f64>,
    p0: DMatrix<f64>,
    gamma: f64,
) -> Result<(DMatrix<f64>, usize)> {
    let a_norm = linalg::spectral_norm(a);
    let q_norm = linalg::spectral_norm(q);
    let residual = |p: &DMatrix<f64>| (a.transpose() * p + p * a - p * s * p + q).norm();
    let mut p = p0;
    let mut res = residual(&p);
    let mut growth = 0;
    for k in 1..=NEWTON_CAP {
        let ak = a - s * &p;
        let rhs = &p * s * &p + q;
        let next = linalg::solve_lyapunov(&ak, &rhs)?;
        let next_res = residual(&next);
        if !next_res.is_finite() {
            return Err(Error::NewtonDiverged {
                iterations: k,
                residual: next_res,
                last: Box::new(next),
            });
        }
        growth = if next_res > res { growth + 1 } else { 0 };
        p = next;
        res = next_res;
        if growth >= GROWTH_LIMIT {
            return Err(Error::NewtonDiverged {
                iterations: k,
                residual: res,
                last: Box::new(p),
            });
        }
        // rounding floor grows with the operator scale
        let scale = a_norm * linalg::spectral_norm(&p) + q_norm;
        if res <= NEWTON_TOL.max(1e-14 * scale) {
            return Ok((p, k));
        }
    }
    let psd = linalg::min_symmetric_eigenvalue(&p);
    if psd < -1e-8 * linalg::spectral_norm(&p) {
        return Err(Error::GammaInfeasible {
            gamma,
            reason: format!("Newton iterates lost positivity (min eigenvalue {psd:.3e})"),
        });
    }
    Err(Error::NewtonDiverged {
        iterations: NEWTON_CAP,
        residual: res,
        last: Box::new(p),
    })
}

/// Stabilizing start for `γ = ∞`: zero if `A` is stable, otherwise the
/// solution of the shifted problem with `A - σI`, continued to `σ = 0`.
fn stabilizing_start(sys: &DiscreteSystem) -> Result<(DMatrix<f64>, usize)> {
    let n = sys.n();
    let abscissa = linalg::spectral_abscissa(&sys.a)?;
    let s = sys.b2b2t();
    let q = sys.c1tc1();
    let zero = DMatrix::zeros(n, n);
    if abscissa < 0.0 {
        return newton_kleinman(&sys.a, &s, &q, zero, f64::INFINITY);
    }
    let sigma0 = abscissa + 1.0;
    let eye = DMatrix::<f64>::identity(n, n);
    let mut p = zero;
    let mut total = 0;
    for j in 0..=CONTINUATION_STEPS {
        let sigma = sigma0 * (1.0 - j as f64 / CONTINUATION_STEPS as f64);
        let shifted = &sys.a - &eye * sigma;
        let (next, its) = newton_kleinman(&shifted, &s, &q, p, f64::INFINITY)?;
        p = next;
        total += its;
    }
    Ok((p, total))
}

/// Newton-Kleinman solution of the game Riccati equation. Without a start,
/// the `γ = ∞` solution is computed first and continued geometrically from
/// `4γ` down to `γ`.
pub fn solve_gare_newton(
    sys: &DiscreteSystem,
    gamma: f64,
    p_init: Option<&DMatrix<f64>>,
) -> Result<RiccatiSolution> {
    check_gamma(gamma)?;
    let q = sys.c1tc1();
    let (p, iterations) = match p_init {
        Some(p0) => {
            if p0.shape() != (sys.n(), sys.n()) {
                return Err(Error::InvalidArgument("initial guess has the wrong shape".into()));
            }
            newton_kleinman(&sys.a, &quadratic_term(sys, gamma), &q, p0.clone(), gamma)?
        }
        None => {
            let (mut p, mut total) = stabilizing_start(sys)?;
            if gamma.is_finite() {
                for j in 0..=CONTINUATION_STEPS {
                    let level = gamma
                        * 4f64.powf((CONTINUATION_STEPS - j) as f64 / CONTINUATION_STEPS as f64);
                    let s = quadratic_term(sys, level);
                    let (next, its) = newton_kleinman(&sys.a, &s, &q, p, level)?;
                    p = next;
                    total += its;
                }
            }
            (p, total)
        }
    };
    certify(sys, &p, gamma, iterations, Method::Newton)
}

/// Feasibility of a level: the Hamiltonian solve succeeds and certifies.
pub fn is_feasible(sys: &DiscreteSystem, gamma: f64) -> bool {
    solve_gare_hamiltonian(sys, gamma).is_ok()
}

/// Bisection for the smallest feasible level in `[lo, hi]`. Returns the
/// feasible upper end of the final bracket, of width at most `tol`.
pub fn gamma_opt(sys: &DiscreteSystem, lo: f64, hi: f64, tol: f64) -> Result<f64> {
    if !(lo > 0.0 && lo < hi && tol > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "gamma bracket needs 0 < lo < hi and tol > 0, got [{lo}, {hi}], tol {tol}"
        )));
    }
    if !is_feasible(sys, hi) {
        return Err(Error::NoFeasibleGamma { lo, hi });
    }
    if is_feasible(sys, lo) {
        return Err(Error::InvalidArgument(format!(
            "lower end {lo} of the gamma bracket is already feasible"
        )));
    }
    let (mut lo, mut hi) = (lo, hi);
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if is_feasible(sys, mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Smallest eigenvalue of `P(γ₁) - P(γ₂)`; nonnegative for `γ₁ < γ₂`.
pub fn ordering_margin(p_small_gamma: &DMatrix<f64>, p_large_gamma: &DMatrix<f64>) -> f64 {
    linalg::min_symmetric_eigenvalue(&(p_small_gamma - p_large_gamma))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::RadialGrid;
    use crate::operators::{assemble, tests::base_config};

    fn scalar(a: f64, b1: f64, b2: f64, c1: f64) -> DiscreteSystem {
        DiscreteSystem::from_matrices(
            DMatrix::from_element(1, 1, a),
            DMatrix::from_element(1, 1, b1),
            DVector::from_element(1, b2),
            DMatrix::from_element(1, 1, c1),
            DVector::from_element(1, 0.0),
        )
        .unwrap()
    }

    /// Entrywise evaluation with explicit loops.
    fn residual_oracle(sys: &DiscreteSystem, p: &DMatrix<f64>, gamma: f64) -> f64 {
        let n = sys.n();
        let g = 1.0 / (gamma * gamma);
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                let mut v = 0.0;
                for k in 0..n {
                    v += sys.a[(k, i)] * p[(k, j)] + p[(i, k)] * sys.a[(k, j)];
                    for l in 0..n {
                        let mut s = sys.b2[k] * sys.b2[l];
                        for c in 0..sys.b1.ncols() {
                            s -= g * sys.b1[(k, c)] * sys.b1[(l, c)];
                        }
                        v -= p[(i, k)] * s * p[(l, j)];
                    }
                    for c in 0..sys.c1.nrows() {
                        if k == 0 {
                            v += sys.c1[(c, i)] * sys.c1[(c, j)];
                        }
                    }
                }
                total += v * v;
            }
        }
        total.sqrt()
    }

    #[test]
    fn residual_examples() {
        let zero_c = scalar(-1.0, 1.0, 1.0, 0.0);
        assert_eq!(gare_residual(&zero_c, &DMatrix::zeros(1, 1), 2.0), 0.0);
        let sys = scalar(-1.0, 1.0, 1.0, 1.0);
        let p = (-2.0 + 7f64.sqrt()) / 1.5;
        assert!(gare_residual(&sys, &DMatrix::from_element(1, 1, p), 2.0) <= 1e-12);

        let n = 5;
        let mut rng = linalg::rng(3);
        let rand = |rng: &mut _, r, c| {
            DMatrix::from_fn(r, c, |_, _| rand::Rng::random_range(rng, -1.0..1.0))
        };
        let sys = DiscreteSystem::from_matrices(
            rand(&mut rng, n, n),
            rand(&mut rng, n, 2),
            DVector::from_fn(n, |_, _| rand::Rng::random_range(&mut rng, -1.0..1.0)),
            rand(&mut rng, 3, n),
            DVector::zeros(3),
        )
        .unwrap();
        let p = rand(&mut rng, n, n);
        let direct = gare_residual(&sys, &p, 1.7);
        let oracle = residual_oracle(&sys, &p, 1.7);
        assert!((direct - oracle).abs() < 1e-12 * oracle);
    }

    #[test]
    fn scalar_closed_forms_hamiltonian() {
        let sys = scalar(-1.0, 1.0, 1.0, 1.0);
        let sol = solve_gare_hamiltonian(&sys, 2.0).unwrap();
        let p = (-2.0 + 7f64.sqrt()) / 1.5;
        assert!((sol.p[(0, 0)] - p).abs() < 1e-10);
        assert!((sol.abscissa_lp - (-1.0 - 0.75 * p)).abs() < 1e-10);
        assert!((sol.abscissa_lp1 - (-1.0 - p)).abs() < 1e-10);
        assert!((sol.feedback[0] + p).abs() < 1e-15);

        let inf = solve_gare_hamiltonian(&sys, f64::INFINITY).unwrap();
        assert!((inf.p[(0, 0)] - (2f64.sqrt() - 1.0)).abs() < 1e-10);
        let proxy = solve_gare_hamiltonian(&sys, 1e6).unwrap();
        assert!((proxy.p[(0, 0)] - (2f64.sqrt() - 1.0)).abs() < 1e-10);
    }

    #[test]
    fn zero_output_gives_zero_solution() {
        let sys = scalar(-2.0, 1.0, 1.0, 0.0);
        let sol = solve_gare_hamiltonian(&sys, 2.0).unwrap();
        assert!(sol.p.amax() < 1e-14);
        let sol = solve_gare_newton(&sys, 2.0, None).unwrap();
        assert!(sol.p.amax() < 1e-14);
    }

    #[test]
    fn scalar_newton_from_zero() {
        let sys = scalar(-1.0, 1.0, 1.0, 1.0);
        let sol = solve_gare_newton(&sys, 2.0, Some(&DMatrix::zeros(1, 1))).unwrap();
        assert!((sol.p[(0, 0)] - (-2.0 + 7f64.sqrt()) / 1.5).abs() < 1e-10);
        assert!(sol.iterations <= 10);
        let sol = solve_gare_newton(&sys, f64::INFINITY, None).unwrap();
        assert!((sol.p[(0, 0)] - (2f64.sqrt() - 1.0)).abs() < 1e-10);
    }

    #[test]
    fn unstable_open_loop_uses_shift_homotopy() {
        let sys = scalar(2.0, 0.5, 1.0, 1.0);
        // γ = ∞: 4P - P² + 1 = 0, so P = 2 + √5
        let sol = solve_gare_newton(&sys, f64::INFINITY, None).unwrap();
        assert!((sol.p[(0, 0)] - (2.0 + 5f64.sqrt())).abs() < 1e-9);
        let ham = solve_gare_hamiltonian(&sys, 3.0).unwrap();
        let newton = solve_gare_newton(&sys, 3.0, None).unwrap();
        assert!((ham.p[(0, 0)] - newton.p[(0, 0)]).abs() < 1e-9);
    }

    #[test]
    fn scalar_boundary_and_bracketing() {
        let sys = scalar(-1.0, 1.0, 1.0, 1.0);
        let g = gamma_opt(&sys, 0.1, 1e6, 1e-6).unwrap();
        assert!((g - 0.5f64.sqrt()).abs() < 1e-5, "{g}");
        assert!(solve_gare_newton(&sys, g * 1.01, None).is_ok());
        assert!(matches!(
            solve_gare_hamiltonian(&sys, g * 0.99),
            Err(Error::GammaInfeasible { .. })
        ));
        assert!(matches!(
            gamma_opt(&sys, 0.1, 0.5, 1e-6),
            Err(Error::NoFeasibleGamma { .. })
        ));
    }

    #[test]
    fn doubling_output_weight_raises_gamma_opt() {
        let g1 = gamma_opt(&scalar(-1.0, 1.0, 1.0, 1.0), 0.05, 1e3, 1e-7).unwrap();
        let g2 = gamma_opt(&scalar(-1.0, 1.0, 1.0, 2.0), 0.05, 1e3, 1e-7).unwrap();
        assert!(g2 > g1);
    }

    fn grid_system(n: usize) -> DiscreteSystem {
        let grid = RadialGrid::new(3, 1.0, n).unwrap();
        assemble(&grid, &base_config(0.5)).unwrap()
    }

    #[test]
    fn cross_method_agreement_on_grid_system() {
        let sys = grid_system(50);
        for gamma in [2.0, 20.0] {
            let ham = solve_gare_hamiltonian(&sys, gamma).unwrap();
            let newton = solve_gare_newton(&sys, gamma, None).unwrap();
            let diff = (&ham.p - &newton.p).norm() / ham.p.norm();
            assert!(diff <= 1e-6, "gamma {gamma}: {diff:.3e}");
            assert!(ham.abscissa_lp < 0.0 && ham.abscissa_lp1 < 0.0);
            assert_eq!(ham.feedback, -(sys.b2.transpose() * &ham.p).transpose());
        }
    }

    #[test]
    fn solutions_are_ordered_in_gamma() {
        let sys = grid_system(30);
        let g_opt = gamma_opt(&sys, 1e-3, 1e3, 1e-4).unwrap();
        let levels = [g_opt * 1.05, g_opt * 1.5, g_opt * 4.0, 100.0];
        let ps: Vec<DMatrix<f64>> = levels
            .iter()
            .map(|&g| solve_gare_hamiltonian(&sys, g).unwrap().p)
            .collect();
        for w in ps.windows(2) {
            assert!(ordering_margin(&w[0], &w[1]) >= -1e-8 * w[0].norm());
        }
    }
}
