//! Kernel representation `(Pφ)(x) = ∫ P₀(x, ξ) φ(ξ) dξ` of the Riccati
//! operator on the radial grid, its weak-form Riccati residual, and the
//! feedback written as a double integral against the kernel.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::domain::RadialGrid;
use crate::error::{Error, Result};
use crate::linalg;
use crate::operators::DiscreteSystem;
use crate::riccati::inv_gamma_sq;

/// Kernel samples `P₀(r_i, r_j)` with the grid's quadrature weights.
#[derive(Debug, Clone)]
pub struct KernelMatrix {
    pub p0: DMatrix<f64>,
    pub nodes: Vec<f64>,
    pub weights: DVector<f64>,
}

impl KernelMatrix {
    pub fn n(&self) -> usize {
        self.p0.nrows()
    }

    /// Quadrature of `∫ P₀(r_i, ξ) φ(ξ) dξ` for nodal `φ`.
    pub fn apply(&self, phi: &DVector<f64>) -> DVector<f64> {
        &self.p0 * phi.component_mul(&self.weights)
    }

    /// Back to the symmetrized matrix, `P = M^{1/2} P₀ M^{1/2}`.
    pub fn to_symmetric_matrix(&self) -> DMatrix<f64> {
        let s = self.weights.map(f64::sqrt);
        DMatrix::from_fn(self.n(), self.n(), |i, j| s[i] * self.p0[(i, j)] * s[j])
    }

    /// `‖P₀ - P₀ᵀ‖_F / ‖P₀‖_F`.
    pub fn symmetry_defect(&self) -> f64 {
        let nrm = self.p0.norm();
        if nrm == 0.0 {
            return 0.0;
        }
        (&self.p0 - self.p0.transpose()).norm() / nrm
    }

    /// Largest entry of the row and column at the outermost node, relative
    /// to the largest entry overall.
    pub fn boundary_ratio(&self) -> f64 {
        let max = self.p0.amax();
        if max == 0.0 {
            return 0.0;
        }
        let last = self.n() - 1;
        let edge = self.p0.row(last).amax().max(self.p0.column(last).amax());
        edge / max
    }

    /// Most negative entry relative to the largest entry (0 if none).
    pub fn negativity(&self) -> f64 {
        let max = self.p0.amax();
        if max == 0.0 {
            return 0.0;
        }
        (-self.p0.min()).max(0.0) / max
    }

    /// Dense CSV with a header row of node radii.
    pub fn csv(&self) -> String {
        let mut out = String::from("r");
        for r in &self.nodes {
            out.push_str(&format!(",{r:.12e}"));
        }
        out.push('\n');
        for i in 0..self.n() {
            out.push_str(&format!("{:.12e}", self.nodes[i]));
            for j in 0..self.n() {
                out.push_str(&format!(",{:.12e}", self.p0[(i, j)]));
            }
            out.push('\n');
        }
        out
    }
}

fn check_size(grid: &RadialGrid, n: usize) -> Result<()> {
    if grid.len() != n {
        return Err(Error::InvalidArgument(format!(
            "matrix of size {n} does not match a grid with {} nodes",
            grid.len()
        )));
    }
    Ok(())
}

/// Kernel of a symmetrized-coordinate matrix, `P₀ = M^{-1/2} P M^{-1/2}`.
pub fn kernel_from_p(grid: &RadialGrid, p: &DMatrix<f64>) -> Result<KernelMatrix> {
    check_size(grid, p.nrows())?;
    let w = grid.weight_vector();
    let s = w.map(f64::sqrt);
    Ok(KernelMatrix {
        p0: DMatrix::from_fn(p.nrows(), p.ncols(), |i, j| p[(i, j)] / (s[i] * s[j])),
        nodes: grid.nodes().to_vec(),
        weights: w,
    })
}

/// Kernel of a bilinear-form matrix `Φ_ij = ⟨e_i, P e_j⟩` in nodal
/// coordinates, `P₀ = M⁻¹ Φ M⁻¹`.
pub fn kernel_from_form(grid: &RadialGrid, form: &DMatrix<f64>) -> Result<KernelMatrix> {
    check_size(grid, form.nrows())?;
    let w = grid.weight_vector();
    Ok(KernelMatrix {
        p0: DMatrix::from_fn(form.nrows(), form.ncols(), |i, j| form[(i, j)] / (w[i] * w[j])),
        nodes: grid.nodes().to_vec(),
        weights: w,
    })
}

/// `F̃y = -∫∫ b(x) P₀(x, ξ) y(ξ) dξ dx` for nodal `b`, `y`.
pub fn feedback_from_kernel(kernel: &KernelMatrix, b: &DVector<f64>, y: &DVector<f64>) -> f64 {
    let wb = b.component_mul(&kernel.weights);
    -wb.dot(&kernel.apply(y))
}

/// First `count` Dirichlet eigenvectors of `K ψ = μ M ψ` in nodal
/// coordinates (grid vectors of the λ = 0 stiffness).
pub fn dirichlet_modes(grid: &RadialGrid, count: usize) -> Result<Vec<DVector<f64>>> {
    let (kd, ko) = crate::hardy::stiffness_tridiagonal(grid);
    let w = grid.weights();
    let s: Vec<f64> = w.iter().map(|x| x.sqrt()).collect();
    let diag: Vec<f64> = kd.iter().zip(w).map(|(k, wi)| k / wi).collect();
    let off: Vec<f64> = (0..ko.len()).map(|i| ko[i] / (s[i] * s[i + 1])).collect();
    (0..count.min(grid.len()))
        .map(|k| {
            let (mu, _) = linalg::tridiagonal_eigenvalue(&diag, &off, k)?;
            let x = linalg::tridiagonal_eigenvector(&diag, &off, mu);
            Ok(DVector::from_fn(grid.len(), |i, _| x[i] / s[i]))
        })
        .collect()
}

/// Weak-form residual of the kernel equation against `ψ(x)φ(ξ)`:
///
/// `∫∫ P₀ (Aψ)(x)φ(ξ) + ∫∫ P₀ ψ(x)(Aφ)(ξ) - (B₂*Pψ)(B₂*Pφ)
///  + γ⁻² ∫_{ω₁} (Pψ)(Pφ) + ∫_{Ω_C} ψφ`,
///
/// with the Laplacians moved onto the test functions and the delta source
/// integrated out. Returns the largest `|sum| / Σ|terms|` over the family.
pub fn kernel_weak_residual(
    kernel: &KernelMatrix,
    sys: &DiscreteSystem,
    gamma: f64,
    tests: &[DVector<f64>],
) -> Result<f64> {
    let n = kernel.n();
    if sys.n() != n {
        return Err(Error::InvalidArgument("kernel and system sizes differ".into()));
    }
    let w = &kernel.weights;
    let a = sys.a_nodal();
    // nodal actuator profile and masks; B₁ and C₁ are diagonal
    let b = sys.to_nodal(&sys.b2);
    let chi1 = DVector::from_fn(n, |i, _| sys.b1.row(i).norm_squared());
    let chic = DVector::from_fn(n, |i, _| sys.c1.column(i).norm_squared());
    let g2 = inv_gamma_sq(gamma);

    struct Prepared {
        phi: DVector<f64>,
        a_phi: DVector<f64>,
        p_phi: DVector<f64>,
        bp: f64,
    }
    let prep: Vec<Prepared> = tests
        .iter()
        .map(|phi| {
            let p_phi = kernel.apply(phi);
            Prepared {
                bp: b.component_mul(w).dot(&p_phi),
                a_phi: &a * phi,
                phi: phi.clone(),
                p_phi,
            }
        })
        .collect();
    let weighted = |u: &DVector<f64>, v: &DVector<f64>| -> f64 { (0..n).map(|i| w[i] * u[i] * v[i]).sum() };

    let pairs: Vec<(usize, usize)> = (0..prep.len())
        .flat_map(|i| (0..prep.len()).map(move |j| (i, j)))
        .collect();
    let worst = pairs
        .par_iter()
        .map(|&(i, j)| {
            let (psi, phi) = (&prep[i], &prep[j]);
            let terms = [
                weighted(&psi.a_phi, &phi.p_phi),
                weighted(&psi.p_phi, &phi.a_phi),
                -psi.bp * phi.bp,
                g2 * weighted(&psi.p_phi.component_mul(&chi1), &phi.p_phi),
                weighted(&psi.phi.component_mul(&chic), &phi.phi),
            ];
            let total: f64 = terms.iter().sum();
            let scale: f64 = terms.iter().map(|t| t.abs()).sum();
            if scale == 0.0 {
                0.0
            } else {
                total.abs() / scale
            }
        })
        .reduce(|| 0.0, f64::max);
    Ok(worst)
}

/// Symmetry, boundary decay and sign of a kernel, with pass flags.
#[derive(Debug, Clone)]
pub struct KernelChecks {
    pub symmetry_defect: f64,
    pub symmetric: bool,
    pub boundary_ratio: f64,
    pub spacing: f64,
    /// Outer-node entries are `O(Δr)`: ratio below `boundary_constant·Δr`.
    pub boundary_ok: bool,
    pub negativity: f64,
    /// Reported only; operator positivity does not force a nonnegative kernel.
    pub nonnegative: bool,
}

pub const BOUNDARY_CONSTANT: f64 = 10.0;

pub fn kernel_checks(grid: &RadialGrid, kernel: &KernelMatrix) -> KernelChecks {
    let symmetry_defect = kernel.symmetry_defect();
    let boundary_ratio = kernel.boundary_ratio();
    let negativity = kernel.negativity();
    let h = grid.spacing() / grid.radius();
    KernelChecks {
        symmetry_defect,
        symmetric: symmetry_defect <= 1e-8,
        boundary_ratio,
        spacing: h,
        boundary_ok: boundary_ratio <= BOUNDARY_CONSTANT * h,
        negativity,
        nonnegative: negativity <= 1e-8,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::{assemble, tests::base_config};
    use crate::riccati::solve_gare_hamiltonian;

    #[test]
    fn mass_form_gives_scaled_identity_kernel() {
        let grid = RadialGrid::new(3, 1.0, 12).unwrap();
        let m = DMatrix::from_diagonal(&grid.weight_vector());
        let k = kernel_from_form(&grid, &m).unwrap();
        for i in 0..12 {
            for j in 0..12 {
                let expected = if i == j { 1.0 / grid.weights()[j] } else { 0.0 };
                assert!((k.p0[(i, j)] - expected).abs() <= 1e-12 * expected.abs().max(1.0));
            }
        }
    }

    #[test]
    fn round_trip_and_quadrature_application() {
        let grid = RadialGrid::new(3, 1.0, 40).unwrap();
        let sys = assemble(&grid, &base_config(0.5)).unwrap();
        let sol = solve_gare_hamiltonian(&sys, 2.0).unwrap();
        let k = kernel_from_p(&grid, &sol.p).unwrap();
        let back = k.to_symmetric_matrix();
        assert!((&back - &sol.p).amax() <= 1e-12 * sol.p.amax());
        let mut rng = linalg::rng(8);
        for _ in 0..10 {
            let phi = linalg::random_unit(&mut rng, 40);
            // P acting on nodal φ, expressed back in nodal coordinates
            let direct = sys.to_nodal(&(&sol.p * sys.to_symmetric(&phi)));
            let quad = k.apply(&phi);
            assert!((&direct - &quad).norm() <= 1e-12 * direct.norm());
        }
        assert!(k.symmetry_defect() <= 1e-14);
    }

    #[test]
    fn feedback_double_integral_matches_matrix_feedback() {
        let grid = RadialGrid::new(3, 1.0, 40).unwrap();
        let sys = assemble(&grid, &base_config(0.5)).unwrap();
        let sol = solve_gare_hamiltonian(&sys, 2.0).unwrap();
        let k = kernel_from_p(&grid, &sol.p).unwrap();
        let b = sys.to_nodal(&sys.b2);
        let mut rng = linalg::rng(12);
        for _ in 0..20 {
            let y = linalg::random_unit(&mut rng, 40);
            let matrix = sol.feedback.dot(&sys.to_symmetric(&y));
            let kernel = feedback_from_kernel(&k, &b, &y);
            assert!((matrix - kernel).abs() <= 1e-10 * matrix.abs().max(1e-300));
        }
        assert_eq!(feedback_from_kernel(&k, &DVector::zeros(40), &b), 0.0);
    }

    #[test]
    fn weak_residual_small_for_solution_and_sensitive_to_noise() {
        let grid = RadialGrid::new(3, 1.0, 60).unwrap();
        let sys = assemble(&grid, &base_config(0.5)).unwrap();
        let sol = solve_gare_hamiltonian(&sys, 2.0).unwrap();
        let k = kernel_from_p(&grid, &sol.p).unwrap();
        let tests = dirichlet_modes(&grid, 10).unwrap();
        let base = kernel_weak_residual(&k, &sys, 2.0, &tests).unwrap();
        assert!(base <= 1e-6, "{base}");
        let mut rng = linalg::rng(5);
        let mut noisy = k.clone();
        let noise = DMatrix::from_fn(60, 60, |_, _| rand::Rng::random_range(&mut rng, -0.01..0.01));
        noisy.p0 = noisy.p0.component_mul(&(noise.add_scalar(1.0)));
        let perturbed = kernel_weak_residual(&noisy, &sys, 2.0, &tests).unwrap();
        assert!(perturbed >= 10.0 * base, "{perturbed} vs {base}");
    }

    #[test]
    fn weak_residual_zero_for_trivial_problem() {
        let grid = RadialGrid::new(3, 1.0, 20).unwrap();
        let mut sys = assemble(&grid, &base_config(0.5)).unwrap();
        sys.c1.fill(0.0);
        let k = kernel_from_p(&grid, &DMatrix::zeros(20, 20)).unwrap();
        let tests = dirichlet_modes(&grid, 10).unwrap();
        assert_eq!(kernel_weak_residual(&k, &sys, 2.0, &tests).unwrap(), 0.0);
    }

    #[test]
    fn weak_residual_tracks_matrix_residual_away_from_solution() {
        let grid = RadialGrid::new(3, 1.0, 50).unwrap();
        let sys = assemble(&grid, &base_config(0.5)).unwrap();
        let tests = dirichlet_modes(&grid, 10).unwrap();
        // the solution at one level is a non-solution at another
        let p = solve_gare_hamiltonian(&sys, 2.0).unwrap().p;
        for gamma in [1.2, 1.5, 4.0, 50.0] {
            let k = kernel_from_p(&grid, &p).unwrap();
            let weak = kernel_weak_residual(&k, &sys, gamma, &tests).unwrap();
            let r = crate::riccati::gare_residual_matrix(&sys, &p, gamma);
            // same pairing in symmetrized coordinates
            let matrix = tests
                .iter()
                .flat_map(|psi| tests.iter().map(move |phi| (psi, phi)))
                .map(|(psi, phi)| {
                    let u = sys.to_symmetric(psi);
                    let v = sys.to_symmetric(phi);
                    let total = u.dot(&(&r * &v));
                    let scale = pairing_scale(&sys, &p, gamma, &u, &v);
                    total.abs() / scale
                })
                .fold(0.0, f64::max);
            let ratio = weak / matrix;
            assert!((0.1..=10.0).contains(&ratio), "gamma {gamma}: {weak} vs {matrix}");
        }
    }

    fn pairing_scale(sys: &DiscreteSystem, p: &DMatrix<f64>, gamma: f64, u: &DVector<f64>, v: &DVector<f64>) -> f64 {
        let pu = p * u;
        let pv = p * v;
        (&sys.a * u).dot(&pv).abs()
            + pu.dot(&(&sys.a * v)).abs()
            + (sys.b2.dot(&pu) * sys.b2.dot(&pv)).abs()
            + inv_gamma_sq(gamma) * (sys.b1.transpose() * &pu).dot(&(sys.b1.transpose() * &pv)).abs()
            + (&sys.c1 * u).dot(&(&sys.c1 * v)).abs()
    }

    #[test]
    fn boundary_entries_shrink_with_spacing() {
        let mut ratios = Vec::new();
        for n in [40, 80] {
            let grid = RadialGrid::new(3, 1.0, n).unwrap();
            let sys = assemble(&grid, &base_config(0.5)).unwrap();
            let sol = solve_gare_hamiltonian(&sys, 2.0).unwrap();
            let k = kernel_from_p(&grid, &sol.p).unwrap();
            let checks = kernel_checks(&grid, &k);
            assert!(checks.symmetric && checks.boundary_ok, "{checks:?}");
            ratios.push(checks.boundary_ratio);
            // outer node sits half a cell from R: feedback of a state
            // concentrated there is small
            let b = sys.to_nodal(&sys.b2);
            let mut y = DVector::zeros(n);
            y[n - 1] = 1.0;
            let edge = feedback_from_kernel(&k, &b, &y).abs();
            let mut y_mid = DVector::zeros(n);
            y_mid[n / 2] = 1.0;
            assert!(edge < feedback_from_kernel(&k, &b, &y_mid).abs());
        }
        assert!(ratios[1] < 0.75 * ratios[0], "{ratios:?}");
    }
}
