//! Numerical checks of the Hardy inequality on radial grids: the sharp
//! constant `H_N` as the bottom of the generalized spectrum of `(L, V)`, the
//! Hardy-deficit norm, and the improved inequality with a `W^{1,p}` norm.

use nalgebra::{DMatrix, DVector};

use crate::domain::{hardy_constant, RadialGrid};
use crate::error::{Error, Result};
use crate::linalg;

/// Stiffness matrix `K` of `-Δ` in nodal coordinates, as `(diag, off)`.
///
/// `(Ky, y) = Σ_faces |S| ρ^{N-1} (Δy)²/Δr`, with the Dirichlet face at `R`
/// seen at half-cell distance.
pub fn stiffness_tridiagonal(grid: &RadialGrid) -> (Vec<f64>, Vec<f64>) {
    let n = grid.len();
    let h = grid.spacing();
    let mut diag = vec![0.0; n];
    let mut off = vec![0.0; n - 1];
    for f in 1..n {
        let g = grid.face_area(grid.face(f)) / h;
        diag[f - 1] += g;
        diag[f] += g;
        off[f - 1] = -g;
    }
    diag[n - 1] += grid.face_area(grid.radius()) / (0.5 * h);
    (diag, off)
}

/// Diagonal of the inverse-square form `V`, `V_i = ∫_{cell i} |x|^{-2} dx`.
pub fn inverse_square_mass(grid: &RadialGrid) -> Vec<f64> {
    grid.inverse_square_weights()
}

/// `(Ky, y)` for a nodal vector.
pub fn stiffness_form(grid: &RadialGrid, y: &DVector<f64>) -> f64 {
    let (diag, off) = stiffness_tridiagonal(grid);
    let mut s = 0.0;
    for i in 0..grid.len() {
        s += diag[i] * y[i] * y[i];
        if i + 1 < grid.len() {
            s += 2.0 * off[i] * y[i] * y[i + 1];
        }
    }
    s
}

/// `(Vy, y) ≈ ∫ y²/|x|² dx`.
pub fn inverse_square_form(grid: &RadialGrid, y: &DVector<f64>) -> f64 {
    inverse_square_mass(grid)
        .iter()
        .zip(y.iter())
        .map(|(v, yi)| v * yi * yi)
        .sum()
}

/// Discrete Rayleigh quotient `(Ky, y) / (Vy, y)`.
pub fn hardy_quotient(grid: &RadialGrid, y: &DVector<f64>) -> f64 {
    stiffness_form(grid, y) / inverse_square_form(grid, y)
}

/// Near-extremal profile `r^{-(N-2)/2} (R - r)`.
pub fn near_extremal_profile(grid: &RadialGrid) -> DVector<f64> {
    let s = (grid.dim() as f64 - 2.0) / 2.0;
    let big_r = grid.radius();
    grid.sample(|r| r.powf(-s) * (big_r - r))
}

/// Bottom of the generalized spectrum `K y = μ V y` on one grid.
#[derive(Debug, Clone)]
pub struct HardyMin {
    pub n: usize,
    pub mu_min: f64,
    /// Minimizing nodal vector, normalized so `(Vy, y) = 1`.
    pub eigenvector: DVector<f64>,
    pub bisection_steps: usize,
}

pub fn rayleigh_hardy_min(grid: &RadialGrid) -> Result<HardyMin> {
    let (kd, ko) = stiffness_tridiagonal(grid);
    let v = inverse_square_mass(grid);
    let sv: Vec<f64> = v.iter().map(|x| x.sqrt()).collect();
    let diag: Vec<f64> = kd.iter().zip(&v).map(|(k, vi)| k / vi).collect();
    let off: Vec<f64> = (0..ko.len()).map(|i| ko[i] / (sv[i] * sv[i + 1])).collect();
    let (mu, steps) = linalg::tridiagonal_eigenvalue(&diag, &off, 0)?;
    let x = linalg::tridiagonal_eigenvector(&diag, &off, mu);
    let y = DVector::from_fn(grid.len(), |i, _| x[i] / sv[i]);
    let scale = inverse_square_form(grid, &y).sqrt();
    Ok(HardyMin {
        n: grid.len(),
        mu_min: mu,
        eigenvector: y / scale,
        bisection_steps: steps,
    })
}

/// Refinement study of the discrete Hardy constant.
#[derive(Debug, Clone)]
pub struct HardyReport {
    pub dim: usize,
    pub radius: f64,
    pub target: f64,
    /// `(n, μ_min(n))` for increasing `n`.
    pub refinement_trend: Vec<(usize, f64)>,
    /// `μ_min` on the finest grid.
    pub lambda_min: f64,
    /// `lambda_min - H_N`.
    pub gap: f64,
    /// Three-grid extrapolated limit (see [`extrapolate_log_model`]).
    pub extrapolated: f64,
}

impl HardyReport {
    pub fn relative_error(&self) -> f64 {
        (self.extrapolated - self.target).abs() / self.target
    }

    pub fn csv_rows(&self) -> String {
        let mut out = String::from("n,N,p,value,flag\n");
        for (n, mu) in &self.refinement_trend {
            out.push_str(&format!("{n},{},2,{mu:.12e},ok\n", self.dim));
        }
        out.push_str(&format!(
            "inf,{},2,{:.12e},extrapolated\n",
            self.dim, self.extrapolated
        ));
        out
    }
}

/// Runs [`rayleigh_hardy_min`] on grids with the given node counts (at
/// least three, in increasing order, each double the previous).
pub fn hardy_report(dim: usize, radius: f64, sizes: &[usize]) -> Result<HardyReport> {
    if sizes.len() < 3 {
        return Err(Error::InvalidArgument(
            "a refinement study needs at least three grids".into(),
        ));
    }
    if sizes.windows(2).any(|w| w[1] != 2 * w[0]) {
        return Err(Error::InvalidArgument(
            "grid sizes must double at each refinement".into(),
        ));
    }
    let target = hardy_constant(dim)?;
    let mut trend = Vec::with_capacity(sizes.len());
    for &n in sizes {
        let grid = RadialGrid::new(dim, radius, n)?;
        trend.push((n, rayleigh_hardy_min(&grid)?.mu_min));
    }
    let k = trend.len();
    let tail: Vec<(usize, f64)> = trend[k - 3..].to_vec();
    let extrapolated = extrapolate_log_model(&tail)?;
    let lambda_min = trend[k - 1].1;
    Ok(HardyReport {
        dim,
        radius,
        target,
        refinement_trend: trend,
        lambda_min,
        gap: lambda_min - target,
        extrapolated,
    })
}

/// Richardson-type extrapolation for the slow logarithmic approach of the
/// discrete Hardy constant, `μ(n) ≈ μ_∞ + c / (ln n + d)²`.
///
/// The excess `μ - H_N` behaves like the first Neumann-Dirichlet eigenvalue of
/// `-d²/dt²` on an interval of length `ln(R/Δr)` (the substitution
/// `y = r^{-(N-2)/2} z(ln r)`), so a power law in `Δr` does not fit. The three
/// parameters are matched exactly on three doubling grids.
pub fn extrapolate_log_model(points: &[(usize, f64)]) -> Result<f64> {
    if points.len() != 3 {
        return Err(Error::InvalidArgument("extrapolation uses exactly three grids".into()));
    }
    let t: Vec<f64> = points.iter().map(|(n, _)| (*n as f64).ln()).collect();
    let mu: Vec<f64> = points.iter().map(|p| p.1).collect();
    // eliminate μ_∞ and c: ratio of differences depends on d only
    let target_ratio = (mu[0] - mu[1]) / (mu[1] - mu[2]);
    let ratio = |d: f64| {
        let f = |x: f64| 1.0 / (x + d).powi(2);
        (f(t[0]) - f(t[1])) / (f(t[1]) - f(t[2]))
    };
    // ratio(d) increases monotonically towards 1 as d grows; bracket the root
    let mut lo = -t[0] + 1e-6;
    let mut hi = 1e6;
    let g = |d: f64| ratio(d) - target_ratio;
    if g(lo).signum() == g(hi).signum() {
        return Err(Error::Eigen(format!(
            "refinement trend does not fit the logarithmic model (ratio {target_ratio:.4})"
        )));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g(mid).signum() == g(lo).signum() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let d = 0.5 * (lo + hi);
    let f = |x: f64| 1.0 / (x + d).powi(2);
    let c = (mu[1] - mu[2]) / (f(t[1]) - f(t[2]));
    Ok(mu[2] - c * f(t[2]))
}

/// Classical three-point Aitken extrapolation assuming geometric convergence.
pub fn extrapolate_aitken(points: &[(usize, f64)]) -> f64 {
    let (a, b, c) = (points[0].1, points[1].1, points[2].1);
    let den = (c - b) - (b - a);
    if den == 0.0 {
        return c;
    }
    c - (c - b).powi(2) / den
}

/// `‖y‖_ℋ = sqrt((Ly, y) - H_N (Vy, y))`, the Hardy-deficit norm.
pub fn h_norm(grid: &RadialGrid, y: &DVector<f64>) -> Result<f64> {
    let h_n = hardy_constant(grid.dim())?;
    let form = stiffness_form(grid, y) - h_n * inverse_square_form(grid, y);
    let l2 = grid.inner(y, y);
    if form < -1e-6 * l2 {
        return Err(Error::Eigen(format!(
            "Hardy-deficit form is negative ({form:.3e}); discretization failure"
        )));
    }
    Ok(form.max(0.0).sqrt())
}

/// Discrete `W^{1,p}` norm `(Σ w|y|^p + Σ_faces a |Dy|^p)^{1/p}` with
/// one-sided differences on the faces of the stiffness stencil (including
/// the Dirichlet face at `R`, where the ghost value is zero).
pub fn w1p_norm(grid: &RadialGrid, y: &DVector<f64>, p: f64) -> f64 {
    w1p_parts(grid, y, p).0.powf(1.0 / p)
}

/// Returns `(Σ, gradient of Σ)` where `Σ = ‖y‖_{W^{1,p}}^p`.
fn w1p_parts(grid: &RadialGrid, y: &DVector<f64>, p: f64) -> (f64, DVector<f64>) {
    let n = grid.len();
    let h = grid.spacing();
    let w = grid.weights();
    let mut total = 0.0;
    let mut grad = DVector::zeros(n);
    let pw = |x: f64| x.abs().powf(p);
    let dpw = |x: f64| p * x.abs().powf(p - 1.0) * x.signum();
    for i in 0..n {
        total += w[i] * pw(y[i]);
        grad[i] += w[i] * dpw(y[i]);
    }
    // face cells carry |S| ρ^{N-1} h of volume
    for f in 1..n {
        let a = grid.face_area(grid.face(f)) * h;
        let d = (y[f] - y[f - 1]) / h;
        total += a * pw(d);
        grad[f] += a * dpw(d) / h;
        grad[f - 1] -= a * dpw(d) / h;
    }
    let a = grid.face_area(grid.radius()) * 0.5 * h;
    let d = -y[n - 1] / (0.5 * h);
    total += a * pw(d);
    grad[n - 1] -= a * dpw(d) / (0.5 * h);
    (total, grad)
}

/// Discrete `L^q` norm with quadrature weights; `q = ∞` gives the max norm.
pub fn lq_norm(grid: &RadialGrid, y: &DVector<f64>, q: f64) -> f64 {
    if q.is_infinite() {
        return y.amax();
    }
    y.iter()
        .zip(grid.weights())
        .map(|(v, w)| w * v.abs().powf(q))
        .sum::<f64>()
        .powf(1.0 / q)
}

/// Result of the improved-Hardy constant estimation.
#[derive(Debug, Clone)]
pub struct ImprovedHardyEstimate {
    pub p: f64,
    /// Estimate of `C(p, Ω)`: smallest quotient `‖y‖_ℋ² / ‖y‖²_{W^{1,p}}` found.
    pub c_est: f64,
    pub minimizer: DVector<f64>,
    /// Estimate of the embedding constant of `W^{1,p} → L^{p'}`.
    pub c_embed: f64,
    /// Observed change of `c_est` under refinement (0 if not measured).
    pub drift: f64,
    /// `(C(p,Ω) - drift) / (2 C_{p,Ω})`.
    pub c0_est: f64,
    pub converged: bool,
    pub iterations: usize,
}

impl ImprovedHardyEstimate {
    pub fn csv_row(&self, grid: &RadialGrid) -> String {
        format!(
            "{},{},{},{:.12e},{}\n",
            grid.len(),
            grid.dim(),
            self.p,
            self.c_est,
            if self.converged { "converged" } else { "stagnated" }
        )
    }
}

/// `C₀ = C / (2 C_embed)`.
pub fn smallness_threshold(c_est: f64, c_embed: f64) -> f64 {
    c_est / (2.0 * c_embed)
}

/// Improved-Hardy quotient `‖y‖_ℋ² / ‖y‖²_{W^{1,p}}`.
pub fn improved_quotient(grid: &RadialGrid, y: &DVector<f64>, p: f64) -> Result<f64> {
    let hn = h_norm(grid, y)?;
    Ok(hn * hn / w1p_norm(grid, y, p).powi(2))
}

const MAX_ITER: usize = 200;
const REL_TOL: f64 = 1e-8;

/// Hardy-deficit matrix `K - H_N V` (tridiagonal, nodal).
fn deficit_matrix(grid: &RadialGrid) -> Result<DMatrix<f64>> {
    let h_n = hardy_constant(grid.dim())?;
    let (d, o) = stiffness_tridiagonal(grid);
    let v = inverse_square_mass(grid);
    let n = grid.len();
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        m[(i, i)] = d[i] - h_n * v[i];
        if i + 1 < n {
            m[(i, i + 1)] = o[i];
            m[(i + 1, i)] = o[i];
        }
    }
    Ok(m)
}

/// Estimates `C(p, Ω)` by the normalized nonlinear inverse iteration
/// `y ← (K - H_N V)^{-1} ∂(½‖y‖²_{W^{1,p}})`, started from each supplied
/// vector plus the near-extremal profile and the Hardy ground state. The
/// quotient never increases along an accepted step; on a tie the earlier
/// iterate is kept.
pub fn improved_hardy_constant(grid: &RadialGrid, p: f64) -> Result<ImprovedHardyEstimate> {
    improved_hardy_constant_with(grid, p, &[])
}

pub fn improved_hardy_constant_with(
    grid: &RadialGrid,
    p: f64,
    starts: &[DVector<f64>],
) -> Result<ImprovedHardyEstimate> {
    if !(1.0..2.0).contains(&p) {
        return Err(Error::InvalidArgument(format!(
            "improved Hardy exponent must satisfy 1 <= p < 2, got {p}"
        )));
    }
    let deficit = deficit_matrix(grid)?;
    let chol = deficit.clone().cholesky().ok_or_else(|| {
        Error::Eigen("Hardy-deficit matrix is not positive definite on this grid".into())
    })?;
    let mut candidates: Vec<DVector<f64>> = starts.to_vec();
    candidates.push(near_extremal_profile(grid));
    candidates.push(rayleigh_hardy_min(grid)?.eigenvector);

    let quotient = |y: &DVector<f64>| -> f64 {
        let num = y.dot(&(&deficit * y));
        let s = w1p_parts(grid, y, p).0;
        num / s.powf(2.0 / p)
    };

    let mut best: Option<(f64, DVector<f64>)> = None;
    let mut converged = false;
    let mut iterations = 0;
    for start in candidates {
        let mut y = &start / start.norm();
        let mut q = quotient(&y);
        let mut local_converged = false;
        for _ in 0..MAX_ITER {
            iterations += 1;
            let (s, grad) = w1p_parts(grid, &y, p);
            // ∂(½ N²) = (1/p) s^{2/p - 1} ∂s
            let sub = grad * (s.powf(2.0 / p - 1.0) / p);
            let next = chol.solve(&sub);
            let next = &next / next.norm();
            let q_next = quotient(&next);
            if !(q_next < q) {
                local_converged = true;
                break;
            }
            let rel = (q - q_next) / q;
            y = next;
            q = q_next;
            if rel < REL_TOL {
                local_converged = true;
                break;
            }
        }
        let better = match &best {
            Some((bq, _)) => q < *bq,
            None => true,
        };
        if better {
            best = Some((q, y));
            converged = local_converged;
        }
    }
    let (c_est, minimizer) = best.expect("at least two starting vectors");
    let c_embed = embedding_constant(grid, p)?;
    Ok(ImprovedHardyEstimate {
        p,
        c_est,
        minimizer,
        c_embed,
        drift: 0.0,
        c0_est: smallness_threshold(c_est, c_embed),
        converged,
        iterations,
    })
}

/// Adds the refinement drift `|C(n) - C(n/2)|` to an estimate and lowers the
/// smallness threshold accordingly.
pub fn with_refinement_drift(
    est: ImprovedHardyEstimate,
    coarse: &ImprovedHardyEstimate,
) -> ImprovedHardyEstimate {
    let drift = (est.c_est - coarse.c_est).abs();
    let c0 = smallness_threshold((est.c_est - drift).max(0.0), est.c_embed);
    ImprovedHardyEstimate {
        drift,
        c0_est: c0,
        ..est
    }
}

/// Smallness threshold `C₀(p, Ω)` for `‖v‖_∞`.
pub fn critical_v_threshold(est: &ImprovedHardyEstimate) -> f64 {
    est.c0_est
}

/// Strict gate `‖v‖_∞ < C₀(p, Ω)`.
pub fn passes_critical_gate(v_max: f64, est: &ImprovedHardyEstimate) -> bool {
    v_max < critical_v_threshold(est)
}

/// Dual exponent `p' = p/(p-1)` (`∞` for `p = 1`).
pub fn dual_exponent(p: f64) -> f64 {
    if p == 1.0 {
        f64::INFINITY
    } else {
        p / (p - 1.0)
    }
}

/// Estimates `sup ‖y‖_{p'} / ‖y‖_{W^{1,p}}` by gradient ascent on the log
/// ratio from a family of radial bumps.
pub fn embedding_constant(grid: &RadialGrid, p: f64) -> Result<f64> {
    let q = dual_exponent(p);
    let big_r = grid.radius();
    let ratio = |y: &DVector<f64>| lq_norm(grid, y, q) / w1p_norm(grid, y, p);
    let mut best = 0.0f64;
    for k in 1..=8 {
        let center = big_r * (k as f64 - 1.0) / 8.0;
        for width in [0.05, 0.15, 0.4] {
            let w = width * big_r;
            let mut y = grid.sample(|r| (-((r - center) / w).powi(2)).exp() * (big_r - r));
            if y.amax() == 0.0 {
                continue;
            }
            let mut val = ratio(&y);
            if q.is_finite() {
                let mut step = 1e-2;
                for _ in 0..MAX_ITER {
                    let g = log_ratio_gradient(grid, &y, p, q);
                    let gn = g.norm();
                    if gn == 0.0 {
                        break;
                    }
                    let mut accepted = false;
                    while step > 1e-12 {
                        let trial = &y + &g * (step * y.norm() / gn);
                        let tv = ratio(&trial);
                        if tv > val {
                            y = trial;
                            let rel = (tv - val) / val;
                            val = tv;
                            step *= 2.0;
                            accepted = rel > REL_TOL;
                            break;
                        }
                        step *= 0.5;
                    }
                    if !accepted {
                        break;
                    }
                }
            }
            best = best.max(val);
        }
    }
    if !(best > 0.0) {
        return Err(Error::Eigen("embedding constant estimate failed".into()));
    }
    Ok(best)
}

fn log_ratio_gradient(grid: &RadialGrid, y: &DVector<f64>, p: f64, q: f64) -> DVector<f64> {
    // d/dy [ (1/q) ln Σ w|y|^q - (1/p) ln Σ_p ]
    let w = grid.weights();
    let sq: f64 = y.iter().zip(w).map(|(v, wi)| wi * v.abs().powf(q)).sum();
    let gq = DVector::from_fn(y.len(), |i, _| {
        w[i] * y[i].abs().powf(q - 1.0) * y[i].signum() / sq
    });
    let (sp, gp) = w1p_parts(grid, y, p);
    gq - gp / (p * sp)
}
