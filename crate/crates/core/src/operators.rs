//! Discrete state operator `A` and the input/output operators `B₁, B₂, C₁, D₁`.
//!
//! The radial operator
//!
//! ```text
//! A y = r^{1-N} (r^{N-1} y')' + q(r) y + a(r) y + v(r) y'
//! ```
//!
//! is discretized by conservative flux differences on the cell-centred grid
//! with a Dirichlet ghost at `r = R`. Convection uses the skew-symmetric
//! split `v·∇y = ½(v·∇y + ∇·(v y)) - ½(∇·v) y` with central face fluxes, so
//! its symmetric part is exactly `-½ diag(∇·v)` with a cell-averaged
//! divergence. All matrices are returned after the similarity
//! `Â = M^{1/2} A M^{-1/2}`, in which the Euclidean inner product is the
//! discrete `L²(Ω)` inner product and adjoints are plain transposes.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::domain::{hardy_constant, indicator, Annulus, RadialGrid};
use crate::error::{Error, Result};
use crate::linalg::{self, random_unit};

/// Radial convection field `v(x) = v_r(|x|) x/|x|` with
/// `v_r(r) = Σ_k c_k r^{k+1}`. Every term vanishes at the origin, which keeps
/// `∇·v = Σ_k (N + k) c_k r^k` bounded.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Convection {
    pub coeffs: Vec<f64>,
}

impl Convection {
    pub fn none() -> Self {
        Self { coeffs: Vec::new() }
    }

    /// `v_r(r) = c r`.
    pub fn linear(c: f64) -> Self {
        Self { coeffs: vec![c] }
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.iter().all(|&c| c == 0.0)
    }

    pub fn radial(&self, r: f64) -> f64 {
        self.coeffs
            .iter()
            .enumerate()
            .map(|(k, &c)| c * r.powi(k as i32 + 1))
            .sum()
    }

    pub fn divergence(&self, dim: usize, r: f64) -> f64 {
        self.coeffs
            .iter()
            .enumerate()
            .map(|(k, &c)| c * (dim + k) as f64 * r.powi(k as i32))
            .sum()
    }

    fn sampled_max(&self, radius: f64, f: impl Fn(f64) -> f64) -> f64 {
        const SAMPLES: usize = 20_000;
        (0..=SAMPLES)
            .map(|k| f(radius * k as f64 / SAMPLES as f64).abs())
            .fold(0.0, f64::max)
    }

    /// `‖v‖_∞` over the ball.
    pub fn sup_norm(&self, radius: f64) -> f64 {
        self.sampled_max(radius, |r| self.radial(r))
    }

    /// `‖∇·v‖_∞` over the ball.
    pub fn divergence_sup(&self, dim: usize, radius: f64) -> f64 {
        self.sampled_max(radius, |r| self.divergence(dim, r))
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            coeffs: self.coeffs.iter().map(|c| c * factor).collect(),
        }
    }
}

/// Radial actuator profile `b(x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Actuator {
    /// `amplitude · χ_{[r_lo, r_hi)}(|x|)`.
    Shell { r_lo: f64, r_hi: f64, amplitude: f64 },
    /// `amplitude · exp(-((|x| - center)/width)²)`.
    Gaussian {
        center: f64,
        width: f64,
        amplitude: f64,
    },
}

impl Actuator {
    pub fn eval(&self, r: f64) -> f64 {
        match *self {
            Actuator::Shell {
                r_lo,
                r_hi,
                amplitude,
            } => {
                if r >= r_lo && r < r_hi {
                    amplitude
                } else {
                    0.0
                }
            }
            Actuator::Gaussian {
                center,
                width,
                amplitude,
            } => amplitude * (-((r - center) / width).powi(2)).exp(),
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        match self.clone() {
            Actuator::Shell {
                r_lo,
                r_hi,
                amplitude,
            } => Actuator::Shell {
                r_lo,
                r_hi,
                amplitude: amplitude * factor,
            },
            Actuator::Gaussian {
                center,
                width,
                amplitude,
            } => Actuator::Gaussian {
                center,
                width,
                amplitude: amplitude * factor,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Criticality {
    Subcritical,
    /// `λ = H_N`, assembled with the regularized potential `H_N/(r² + ε)`.
    Critical { epsilon: f64 },
}

/// Physical data of the controlled system on the ball.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemConfig {
    pub dim: usize,
    pub radius: f64,
    /// Hardy coefficient `λ`, `0 <= λ <= H_N`.
    pub lambda: f64,
    /// Reaction amplitude: `a(x) = a₀ χ_{Ω₀}(x)`.
    pub a0: f64,
    pub omega0_set: Annulus,
    pub omega_c_set: Annulus,
    pub omega1_set: Annulus,
    pub actuator: Actuator,
    pub convection: Convection,
    /// Attenuation level `γ`.
    pub gamma: f64,
    pub criticality: Criticality,
}

impl ProblemConfig {
    pub fn hardy_constant(&self) -> f64 {
        hardy_constant(self.dim).unwrap_or(f64::NAN)
    }

    pub fn v_max(&self) -> f64 {
        self.convection.sup_norm(self.radius)
    }

    pub fn divv_max(&self) -> f64 {
        self.convection.divergence_sup(self.dim, self.radius)
    }

    /// `ω₀ = a₀ + ‖∇·v‖_∞ / 2`.
    pub fn omega0(&self) -> f64 {
        omega0(self.a0, self.divv_max())
    }

    pub fn is_critical(&self) -> bool {
        matches!(self.criticality, Criticality::Critical { .. })
    }

    /// Checks ranges and the nesting `Ω₀ ⊂⊂ Ω_C ⊂ Ω`, `ω₁ ⊂⊂ Ω`.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        let h_n = hardy_constant(self.dim).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        if !(self.radius > 0.0) {
            return bad(format!("radius must be positive, got {}", self.radius));
        }
        if !(self.lambda >= 0.0) || self.lambda > h_n * (1.0 + 1e-12) {
            return bad(format!(
                "lambda = {} outside [0, H_N = {h_n}]",
                self.lambda
            ));
        }
        let at_critical = (self.lambda - h_n).abs() <= 1e-12 * h_n;
        match self.criticality {
            Criticality::Subcritical if at_critical => {
                return bad("lambda = H_N needs the critical (epsilon-regularized) path".into())
            }
            Criticality::Critical { epsilon } => {
                if !at_critical {
                    return bad(format!(
                        "critical flag set but lambda = {} != H_N = {h_n}",
                        self.lambda
                    ));
                }
                if !(epsilon > 0.0) {
                    return bad(format!("epsilon must be positive, got {epsilon}"));
                }
            }
            _ => {}
        }
        if !(self.a0 >= 0.0) {
            return bad(format!("a0 must be nonnegative, got {}", self.a0));
        }
        if !(self.gamma > 0.0) {
            return bad(format!("gamma must be positive, got {}", self.gamma));
        }
        if self.omega_c_set.r_hi > self.radius {
            return bad("Omega_C must lie inside the domain".into());
        }
        if !self.omega0_set.compactly_inside(&self.omega_c_set) {
            return bad("Omega_0 must be compactly contained in Omega_C".into());
        }
        if !(self.omega1_set.r_hi < self.radius) {
            return bad("omega_1 must be compactly contained in the domain".into());
        }
        Ok(())
    }
}

/// `ω₀ = a₀ + ‖∇·v‖_∞ / 2`, the accretivity shift.
pub fn omega0(a0: f64, divv_max: f64) -> f64 {
    a0 + 0.5 * divv_max
}

/// Pieces of the assembled state operator, kept for the quadratic-form checks.
#[derive(Debug, Clone)]
pub struct OperatorParts {
    /// Symmetrized stiffness `L̂ = M^{-1/2} K M^{-1/2}` of `-Δ` (the λ = 0 form).
    pub stiffness: DMatrix<f64>,
    /// Diagonal of the potential term: cell averages of `λ/r²` or `H_N/(r² + ε)`.
    pub potential: DVector<f64>,
    pub reaction: DVector<f64>,
    /// Symmetrized convection matrix.
    pub convection: DMatrix<f64>,
    /// Cell-averaged `∇·v` at the nodes.
    pub divergence: DVector<f64>,
    /// `A₀ = -L̂ + diag(potential + reaction)`.
    pub a_sym: DMatrix<f64>,
    /// Lower bound `H_N R²/(R² + ε)` admissible for `λ_{ε,N}` (critical case).
    pub lambda_eps: Option<f64>,
    pub lambda: f64,
    pub a0: f64,
    pub divv_max: f64,
    pub v_max: f64,
}

/// Discrete realization of `(A, B₁, B₂, C₁, D₁)` in symmetrized coordinates.
#[derive(Debug, Clone)]
pub struct DiscreteSystem {
    pub a: DMatrix<f64>,
    pub b1: DMatrix<f64>,
    pub b2: DVector<f64>,
    pub c1: DMatrix<f64>,
    pub d1: DVector<f64>,
    /// Quadrature weights `M` (diagonal).
    pub mass: DVector<f64>,
    pub omega0: f64,
    /// Coercivity constant `C_N = 1 - λ/H_N` (or `C_{N,ε}` in the critical case).
    pub c_n: Option<f64>,
    pub parts: Option<OperatorParts>,
}

impl DiscreteSystem {
    /// System from raw matrices, for small hand-made examples.
    pub fn from_matrices(
        a: DMatrix<f64>,
        b1: DMatrix<f64>,
        b2: DVector<f64>,
        c1: DMatrix<f64>,
        d1: DVector<f64>,
    ) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n
            || b1.nrows() != n
            || b2.len() != n
            || c1.ncols() != n
            || d1.len() != c1.nrows()
        {
            return Err(Error::InvalidArgument(
                "operator blocks have inconsistent dimensions".into(),
            ));
        }
        Ok(Self {
            a,
            b1,
            b2,
            c1,
            d1,
            mass: DVector::from_element(n, 1.0),
            omega0: 0.0,
            c_n: None,
            parts: None,
        })
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn sqrt_mass(&self) -> DVector<f64> {
        self.mass.map(f64::sqrt)
    }

    /// Symmetrized coordinates `û = M^{1/2} u` of a nodal vector.
    pub fn to_symmetric(&self, u: &DVector<f64>) -> DVector<f64> {
        u.component_mul(&self.sqrt_mass())
    }

    pub fn to_nodal(&self, u: &DVector<f64>) -> DVector<f64> {
        u.component_div(&self.sqrt_mass())
    }

    /// The state matrix in nodal coordinates, `A = M^{-1/2} Â M^{1/2}`.
    pub fn a_nodal(&self) -> DMatrix<f64> {
        let s = self.sqrt_mass();
        DMatrix::from_fn(self.n(), self.n(), |i, j| self.a[(i, j)] * s[j] / s[i])
    }

    pub fn b1b1t(&self) -> DMatrix<f64> {
        &self.b1 * self.b1.transpose()
    }

    pub fn c1tc1(&self) -> DMatrix<f64> {
        self.c1.transpose() * &self.c1
    }

    pub fn b2b2t(&self) -> DMatrix<f64> {
        &self.b2 * self.b2.transpose()
    }

    fn parts(&self) -> Result<&OperatorParts> {
        self.parts.as_ref().ok_or_else(|| {
            Error::InvalidArgument("system was not assembled from a problem configuration".into())
        })
    }
}

struct Assembled {
    a: DMatrix<f64>,
    mass: DVector<f64>,
    parts: OperatorParts,
}

fn assemble_state(grid: &RadialGrid, cfg: &ProblemConfig, potential: DVector<f64>) -> Assembled {
    let n = grid.len();
    let h = grid.spacing();
    let mass = grid.weight_vector();
    let sm = mass.map(f64::sqrt);

    // stiffness K of -Δ with face conductances |S| ρ^{N-1} / h
    let mut k = DMatrix::<f64>::zeros(n, n);
    for f in 1..n {
        let g = grid.face_area(grid.face(f)) / h;
        k[(f - 1, f - 1)] += g;
        k[(f, f)] += g;
        k[(f - 1, f)] -= g;
        k[(f, f - 1)] -= g;
    }
    // Dirichlet face at r = R, half-cell distance to the ghost
    k[(n - 1, n - 1)] += grid.face_area(grid.radius()) / (0.5 * h);
    let stiffness = DMatrix::from_fn(n, n, |i, j| k[(i, j)] / (sm[i] * sm[j]));

    let omega0_mask = indicator(grid, &cfg.omega0_set)
        .map(|ind| ind.mask)
        .unwrap_or_else(|_| DVector::zeros(n));
    let reaction = omega0_mask * cfg.a0;

    // skew flux matrix S and cell-averaged divergence
    let flux = |rho: f64| grid.face_area(rho) * cfg.convection.radial(rho);
    let mut skew = DMatrix::<f64>::zeros(n, n);
    for f in 1..n {
        let s = 0.5 * flux(grid.face(f));
        skew[(f - 1, f)] = s / (sm[f - 1] * sm[f]);
        skew[(f, f - 1)] = -s / (sm[f - 1] * sm[f]);
    }
    let divergence =
        DVector::from_fn(n, |i, _| (flux(grid.face(i + 1)) - flux(grid.face(i))) / mass[i]);
    let convection = skew - DMatrix::from_diagonal(&(&divergence * 0.5));

    let a_sym = -&stiffness + DMatrix::from_diagonal(&(&potential + &reaction));
    let a = &a_sym + &convection;
    Assembled {
        a,
        mass,
        parts: OperatorParts {
            stiffness,
            potential,
            reaction,
            convection,
            divergence,
            a_sym,
            lambda_eps: None,
            lambda: cfg.lambda,
            a0: cfg.a0,
            divv_max: cfg.divv_max(),
            v_max: cfg.v_max(),
        },
    }
}

fn check_divergence_bound(parts: &OperatorParts) -> Result<()> {
    let sampled = parts.divergence.amax();
    if sampled > parts.divv_max * (1.0 + 1e-9) + 1e-12 {
        return Err(Error::InvalidConfig(format!(
            "discrete divergence {sampled} exceeds the stated bound {}",
            parts.divv_max
        )));
    }
    Ok(())
}

/// State operator for the subcritical case `λ < H_N` (I/O blocks left empty).
pub fn assemble_a(grid: &RadialGrid, cfg: &ProblemConfig) -> Result<DiscreteSystem> {
    cfg.validate()?;
    check_grid(grid, cfg)?;
    if let Criticality::Critical { epsilon } = cfg.criticality {
        return assemble_a_critical(grid, cfg, epsilon);
    }
    let h_n = cfg.hardy_constant();
    let inv_sq = DVector::from_vec(grid.inverse_square_weights());
    let potential = inv_sq.component_div(&grid.weight_vector()) * cfg.lambda;
    let asm = assemble_state(grid, cfg, potential);
    check_divergence_bound(&asm.parts)?;
    Ok(state_only(asm, cfg.omega0(), Some(1.0 - cfg.lambda / h_n)))
}

/// State operator `A_ε` with the potential `H_N/(r² + ε)`.
pub fn assemble_a_critical(
    grid: &RadialGrid,
    cfg: &ProblemConfig,
    eps: f64,
) -> Result<DiscreteSystem> {
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "regularization epsilon must be positive, got {eps}"
        )));
    }
    if !cfg.is_critical() {
        return Err(Error::InvalidConfig(
            "critical assembly requested for a subcritical configuration".into(),
        ));
    }
    check_grid(grid, cfg)?;
    let h_n = cfg.hardy_constant();
    let potential = grid.cell_averages(|r| h_n / (r * r + eps));
    let mut asm = assemble_state(grid, cfg, potential);
    check_divergence_bound(&asm.parts)?;
    let r2 = cfg.radius * cfg.radius;
    let lambda_eps = lambda_eps_bound(h_n, cfg.radius, eps);
    asm.parts.lambda_eps = Some(lambda_eps);
    // C_{N,ε} = 1 - λ_{ε,N}/H_N = ε/(R² + ε)
    Ok(state_only(asm, cfg.omega0(), Some(eps / (r2 + eps))))
}

/// `H_N R² / (R² + ε)`.
pub fn lambda_eps_bound(h_n: f64, radius: f64, eps: f64) -> f64 {
    let r2 = radius * radius;
    h_n * r2 / (r2 + eps)
}

fn check_grid(grid: &RadialGrid, cfg: &ProblemConfig) -> Result<()> {
    if grid.dim() != cfg.dim || (grid.radius() - cfg.radius).abs() > 1e-12 * cfg.radius {
        return Err(Error::InvalidArgument(
            "grid dimension/radius do not match the configuration".into(),
        ));
    }
    Ok(())
}

fn state_only(asm: Assembled, omega0: f64, c_n: Option<f64>) -> DiscreteSystem {
    let n = asm.a.nrows();
    DiscreteSystem {
        a: asm.a,
        b1: DMatrix::zeros(n, n),
        b2: DVector::zeros(n),
        c1: DMatrix::zeros(n, n),
        d1: DVector::zeros(n),
        mass: asm.mass,
        omega0,
        c_n,
        parts: Some(asm.parts),
    }
}

/// Input/output operators in symmetrized coordinates.
#[derive(Debug, Clone)]
pub struct IoOperators {
    pub b1: DMatrix<f64>,
    pub b2: DVector<f64>,
    pub c1: DMatrix<f64>,
    pub d1: DVector<f64>,
}

/// `B₁ = χ_{ω₁}`, `B₂ u = b u`, `C₁ = χ_{Ω_C}` and the normalized
/// `D₁ u = |Ω∖Ω_C|^{-1/2} χ_{Ω∖Ω_C} u`.
pub fn assemble_io(grid: &RadialGrid, cfg: &ProblemConfig) -> Result<IoOperators> {
    cfg.validate()?;
    check_grid(grid, cfg)?;
    let sm = grid.weight_vector().map(f64::sqrt);
    let omega1 = indicator(grid, &cfg.omega1_set)?;
    let omega_c = indicator(grid, &cfg.omega_c_set)?;
    let b1 = DMatrix::from_diagonal(&omega1.mask);
    let c1 = DMatrix::from_diagonal(&omega_c.mask);
    let b2 = grid.sample(|r| cfg.actuator.eval(r)).component_mul(&sm);
    let complement = omega_c.mask.map(|m| 1.0 - m);
    let measure = grid.inner(&complement, &DVector::from_element(grid.len(), 1.0));
    if measure <= 0.0 {
        return Err(Error::InvalidConfig(
            "Omega minus Omega_C has zero measure on the grid; D1 cannot be normalized".into(),
        ));
    }
    let d1 = complement.component_mul(&sm) / measure.sqrt();
    Ok(IoOperators { b1, b2, c1, d1 })
}

/// Full discrete system: state operator plus I/O blocks.
pub fn assemble(grid: &RadialGrid, cfg: &ProblemConfig) -> Result<DiscreteSystem> {
    let mut sys = assemble_a(grid, cfg)?;
    let io = assemble_io(grid, cfg)?;
    sys.b1 = io.b1;
    sys.b2 = io.b2;
    sys.c1 = io.c1;
    sys.d1 = io.d1;
    Ok(sys)
}

/// Minimum over `trials` random unit vectors of
/// `((ωI - A)y, y) - C_N (L y, y) - (ω - ω₀)‖y‖²`.
pub fn accretivity_margin(sys: &DiscreteSystem, omega: f64, trials: usize, seed: u64) -> Result<f64> {
    let parts = sys.parts()?;
    let c_n = sys.c_n.unwrap_or(0.0);
    let mut rng = linalg::rng(seed);
    let mut worst = f64::INFINITY;
    for _ in 0..trials {
        let y = random_unit(&mut rng, sys.n());
        worst = worst.min(accretivity_form(sys, parts, c_n, omega, sys.omega0, &y));
    }
    Ok(worst)
}

/// `((ωI - A)y, y) - C_N (L y, y) - (ω - ω₀')‖y‖²` for a claimed shift `ω₀'`.
pub fn accretivity_defect(
    sys: &DiscreteSystem,
    omega: f64,
    omega0_claim: f64,
    y: &DVector<f64>,
) -> Result<f64> {
    let parts = sys.parts()?;
    Ok(accretivity_form(sys, parts, sys.c_n.unwrap_or(0.0), omega, omega0_claim, y))
}

fn accretivity_form(
    sys: &DiscreteSystem,
    parts: &OperatorParts,
    c_n: f64,
    omega: f64,
    omega0_claim: f64,
    y: &DVector<f64>,
) -> f64 {
    let yy = y.norm_squared();
    omega * yy - y.dot(&(&sys.a * y)) - c_n * y.dot(&(&parts.stiffness * y)) - (omega - omega0_claim) * yy
}

/// Exact minimum of the same margin over all unit vectors: the smallest
/// eigenvalue of the symmetric part of `ω₀ I - A - C_N L`.
pub fn accretivity_margin_exact(sys: &DiscreteSystem) -> Result<f64> {
    let parts = sys.parts()?;
    let c_n = sys.c_n.unwrap_or(0.0);
    let n = sys.n();
    let m = DMatrix::<f64>::identity(n, n) * sys.omega0 - &sys.a - &parts.stiffness * c_n;
    Ok(linalg::min_symmetric_eigenvalue(&m))
}

/// Smallest eigenvalue of `-A₀ - C_N L + a₀ I`; nonnegative when the
/// Hardy-deficit bound `(-A₀y, y) >= C_N (Ly, y) - a₀‖y‖²` holds on the grid.
pub fn hardy_pencil_margin(sys: &DiscreteSystem) -> Result<f64> {
    let parts = sys.parts()?;
    let c_n = sys.c_n.unwrap_or(0.0);
    let n = sys.n();
    let m = -&parts.a_sym - &parts.stiffness * c_n + DMatrix::<f64>::identity(n, n) * parts.a0;
    Ok(linalg::min_symmetric_eigenvalue(&m))
}

/// `K(ε) = (‖v‖²/C_N)(‖v‖²/(4εC_N) + a₀)` in `‖By‖² <= ε‖A₀y‖² + K(ε)‖y‖²`.
pub fn relative_bound_constant(v_max: f64, c_n: f64, a0: f64, eps: f64) -> f64 {
    let v2 = v_max * v_max;
    v2 / c_n * (v2 / (4.0 * eps * c_n) + a0)
}

/// Largest value of `‖By‖² - ε‖A₀y‖² - K(ε)‖y‖²` over the supplied vectors.
pub fn relative_bound_excess(sys: &DiscreteSystem, eps: f64, samples: &[DVector<f64>]) -> Result<f64> {
    let parts = sys.parts()?;
    let c_n = sys
        .c_n
        .ok_or_else(|| Error::InvalidArgument("relative bound needs C_N".into()))?;
    let k = relative_bound_constant(parts.v_max, c_n, parts.a0, eps);
    Ok(samples
        .iter()
        .map(|y| {
            let by = (&parts.convection * y).norm_squared();
            let ay = (&parts.a_sym * y).norm_squared();
            by - eps * ay - k * y.norm_squared()
        })
        .fold(f64::NEG_INFINITY, f64::max))
}
