//! Closed-loop H∞ norm of `w ↦ z` under the Riccati feedback, by a dense
//! frequency sweep and by Hamiltonian-based level bisection.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{self, C64};
use crate::operators::DiscreteSystem;
use crate::riccati::RiccatiSolution;

/// Realization `(A + B₂f, B₁, [C₁; f])` of the closed loop.
#[derive(Debug, Clone)]
pub struct ClosedLoop {
    pub a_cl: DMatrix<f64>,
    pub b_cl: DMatrix<f64>,
    pub c_cl: DMatrix<f64>,
    pub abscissa: f64,
}

impl ClosedLoop {
    /// Checks stability and drops identically zero input columns and output
    /// rows, which do not change the transfer norm.
    pub fn new(a_cl: DMatrix<f64>, b_cl: DMatrix<f64>, c_cl: DMatrix<f64>) -> Result<Self> {
        let n = a_cl.nrows();
        if a_cl.ncols() != n || b_cl.nrows() != n || c_cl.ncols() != n {
            return Err(Error::InvalidArgument(
                "closed-loop blocks have inconsistent dimensions".into(),
            ));
        }
        let abscissa = linalg::spectral_abscissa(&a_cl)?;
        if !(abscissa < 0.0) {
            return Err(Error::ClosedLoopUnstable { abscissa });
        }
        let cols: Vec<usize> = (0..b_cl.ncols())
            .filter(|&j| b_cl.column(j).iter().any(|&x| x != 0.0))
            .collect();
        let rows: Vec<usize> = (0..c_cl.nrows())
            .filter(|&i| c_cl.row(i).iter().any(|&x| x != 0.0))
            .collect();
        let b_cl = b_cl.select_columns(&cols);
        let c_cl = c_cl.select_rows(&rows);
        Ok(Self {
            a_cl,
            b_cl,
            c_cl,
            abscissa,
        })
    }

    pub fn n(&self) -> usize {
        self.a_cl.nrows()
    }

    /// `G(iω) = C (iωI - A)⁻¹ B`.
    pub fn transfer(&self, omega: f64) -> Result<DMatrix<C64>> {
        let n = self.n();
        let mut m = linalg::to_complex(&(-&self.a_cl));
        for i in 0..n {
            m[(i, i)] += C64::new(0.0, omega);
        }
        let x = m
            .lu()
            .solve(&linalg::to_complex(&self.b_cl))
            .ok_or_else(|| Error::Singular(format!("resolvent is singular at omega = {omega}")))?;
        Ok(linalg::to_complex(&self.c_cl) * x)
    }

    pub fn sigma_max_at(&self, omega: f64) -> Result<f64> {
        if self.b_cl.ncols() == 0 || self.c_cl.nrows() == 0 {
            return Ok(0.0);
        }
        Ok(linalg::sigma_max(&self.transfer(omega)?))
    }
}

/// Closes the loop with `u = f·y`, `f = -B₂ᵀP`. The output stacks `C₁` and
/// `f`, since `D₁ᵀD₁ = 1` and `D₁ᵀC₁ = 0` give `‖z‖² = ‖C₁y‖² + |fy|²`.
pub fn close_loop(sys: &DiscreteSystem, sol: &RiccatiSolution) -> Result<ClosedLoop> {
    close_loop_with(sys, &sol.feedback)
}

pub fn close_loop_with(sys: &DiscreteSystem, feedback: &DVector<f64>) -> Result<ClosedLoop> {
    let n = sys.n();
    if feedback.len() != n {
        return Err(Error::InvalidArgument("feedback row has the wrong length".into()));
    }
    let a_cl = &sys.a + &sys.b2 * feedback.transpose();
    let mut c_cl = DMatrix::zeros(sys.c1.nrows() + 1, n);
    c_cl.rows_mut(0, sys.c1.nrows()).copy_from(&sys.c1);
    c_cl.row_mut(sys.c1.nrows()).copy_from(&feedback.transpose());
    ClosedLoop::new(a_cl, sys.b1.clone(), c_cl)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMethod {
    Sweep,
    Bisection,
    /// Bisection failed in the eigensolver; the value is the sweep result.
    SweepFallback,
}

#[derive(Debug, Clone)]
pub struct HinfResult {
    pub norm: f64,
    pub peak_freq: f64,
    pub method: NormMethod,
    pub gamma_target: Option<f64>,
    /// Frequencies and `σ_max(G(iω))` evaluated by the sweep.
    pub response: Vec<(f64, f64)>,
    /// Frequencies skipped because the resolvent solve failed.
    pub skipped: usize,
}

impl HinfResult {
    pub fn with_target(mut self, gamma: f64) -> Self {
        self.gamma_target = Some(gamma);
        self
    }

    /// `norm < γ`; `None` without a target.
    pub fn passed(&self) -> Option<bool> {
        self.gamma_target.map(|g| self.norm < g)
    }

    pub fn margin(&self) -> Option<f64> {
        self.gamma_target.map(|g| g - self.norm)
    }

    /// `omega,sigma_max` rows.
    pub fn response_csv(&self) -> String {
        let mut out = String::from("omega,sigma_max\n");
        for (w, s) in &self.response {
            out.push_str(&format!("{w:.12e},{s:.12e}\n"));
        }
        out
    }
}

const SWEEP_POINTS: usize = 400;

/// Logarithmic grid over `[10⁻³, 10⁴]·|abscissa|` preceded by `ω = 0`.
pub fn default_frequencies(cl: &ClosedLoop) -> Vec<f64> {
    log_frequencies(cl.abscissa.abs(), SWEEP_POINTS)
}

fn log_frequencies(scale: f64, points: usize) -> Vec<f64> {
    let lo = (1e-3 * scale).ln();
    let hi = (1e4 * scale).ln();
    std::iter::once(0.0)
        .chain((0..points).map(|k| (lo + (hi - lo) * k as f64 / (points - 1) as f64).exp()))
        .collect()
}

/// Largest `σ_max(G(iω))` over `freqs`, refined by golden-section search on
/// `ln ω` between the neighbours of the discrete peak.
pub fn hinf_norm_sweep(cl: &ClosedLoop, freqs: &[f64]) -> Result<HinfResult> {
    if freqs.is_empty() {
        return Err(Error::InvalidArgument("frequency grid is empty".into()));
    }
    let mut sorted = freqs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let values: Vec<Option<f64>> = sorted
        .par_iter()
        .map(|&w| cl.sigma_max_at(w).ok())
        .collect();
    let skipped = values.iter().filter(|v| v.is_none()).count();
    let response: Vec<(f64, f64)> = sorted
        .iter()
        .zip(&values)
        .filter_map(|(&w, v)| v.map(|s| (w, s)))
        .collect();
    let (k, &(mut peak_freq, mut norm)) = response
        .iter()
        .enumerate()
        .max_by(|a, b| a.1 .1.total_cmp(&b.1 .1))
        .ok_or_else(|| Error::Singular("resolvent failed at every frequency".into()))?;
    if response.len() >= 3 {
        let left = response[k.saturating_sub(1)].0;
        let right = response[(k + 1).min(response.len() - 1)].0;
        if let Some((w, s)) = golden_refine(cl, left, right) {
            // ignore refinements that only win by rounding
            if s > norm * (1.0 + 1e-14) {
                norm = s;
                peak_freq = w;
            }
        }
    }
    Ok(HinfResult {
        norm,
        peak_freq,
        method: NormMethod::Sweep,
        gamma_target: None,
        response,
        skipped,
    })
}

/// Golden-section maximization of `σ_max` on `[a, b]`, in `ln ω` when
/// `a > 0` and linearly otherwise.
fn golden_refine(cl: &ClosedLoop, a: f64, b: f64) -> Option<(f64, f64)> {
    if !(b > a) {
        return None;
    }
    let log = a > 0.0;
    type Map = fn(f64) -> f64;
    let (to, from): (Map, Map) = if log {
        (f64::ln, f64::exp)
    } else {
        (|x| x, |x| x)
    };
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut lo, mut hi) = (to(a), to(b));
    let f = |t: f64| cl.sigma_max_at(from(t)).unwrap_or(f64::NEG_INFINITY);
    let mut x1 = hi - phi * (hi - lo);
    let mut x2 = lo + phi * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    for _ in 0..60 {
        if f1 < f2 {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + phi * (hi - lo);
            f2 = f(x2);
        } else {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - phi * (hi - lo);
            f1 = f(x1);
        }
        if (hi - lo).abs() <= 1e-10 * (1.0 + lo.abs()) {
            break;
        }
    }
    let (t, s) = if f1 > f2 { (x1, f1) } else { (x2, f2) };
    s.is_finite().then(|| (from(t), s))
}

/// Hamiltonian `[[A, ρ⁻²BBᵀ], [-CᵀC, -Aᵀ]]` of the level-ρ test.
fn level_hamiltonian(cl: &ClosedLoop, rho: f64) -> DMatrix<f64> {
    let n = cl.n();
    let mut h = DMatrix::zeros(2 * n, 2 * n);
    h.view_mut((0, 0), (n, n)).copy_from(&cl.a_cl);
    h.view_mut((0, n), (n, n))
        .copy_from(&(&cl.b_cl * cl.b_cl.transpose() / (rho * rho)));
    h.view_mut((n, 0), (n, n))
        .copy_from(&(-(cl.c_cl.transpose() * &cl.c_cl)));
    h.view_mut((n, n), (n, n)).copy_from(&(-cl.a_cl.transpose()));
    h
}

/// Looks for imaginary-axis eigenvalues of the level-ρ Hamiltonian. Near-axis
/// candidates are confirmed by evaluating `σ_max` at their frequency, so a
/// `Some` answer is a certified lower bound `‖G‖ >= σ >= ρ(1 - 10⁻⁸)`.
fn level_reached(cl: &ClosedLoop, rho: f64) -> Result<Option<(f64, f64)>> {
    let h = level_hamiltonian(cl, rho);
    let floor = 1e3 * f64::EPSILON * h.norm();
    let eigs = linalg::eigenvalues(&h)?;
    let mut best: Option<(f64, f64)> = None;
    for z in eigs {
        if z.re.abs() > 1e-6 * z.norm() + floor {
            continue;
        }
        let w = z.im.abs();
        let s = cl.sigma_max_at(w)?;
        if s >= rho * (1.0 - 1e-8) && best.is_none_or(|(_, bs)| s > bs) {
            best = Some((w, s));
        }
    }
    Ok(best)
}

/// Level bisection on the Hamiltonian imaginary-axis test until the bracket
/// is below `tol·ρ`, initialized from the default sweep.
pub fn hinf_norm_bisect(cl: &ClosedLoop, tol: f64) -> Result<HinfResult> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("tolerance must be positive, got {tol}")));
    }
    let sweep = hinf_norm_sweep(cl, &default_frequencies(cl))?;
    if sweep.norm == 0.0 {
        return Ok(HinfResult {
            method: NormMethod::Bisection,
            ..sweep
        });
    }
    match bisect_levels(cl, &sweep, tol) {
        Ok((norm, peak)) => Ok(HinfResult {
            norm,
            peak_freq: peak,
            method: NormMethod::Bisection,
            ..sweep
        }),
        Err(Error::Eigen(_)) => Ok(HinfResult {
            method: NormMethod::SweepFallback,
            ..sweep
        }),
        Err(e) => Err(e),
    }
}

fn bisect_levels(cl: &ClosedLoop, sweep: &HinfResult, tol: f64) -> Result<(f64, f64)> {
    // the sweep value is attained, hence a valid lower end
    let mut lo = sweep.norm;
    let mut peak = sweep.peak_freq;
    let mut hi = 2.0 * sweep.norm;
    let mut expansions = 0;
    while let Some((w, s)) = level_reached(cl, hi)? {
        lo = s;
        peak = w;
        hi = 2.0 * s;
        expansions += 1;
        if expansions > 60 {
            return Err(Error::Eigen("could not bracket the H-infinity norm".into()));
        }
    }
    while hi - lo > tol * hi {
        let mid = 0.5 * (lo + hi);
        match level_reached(cl, mid)? {
            Some((w, s)) => {
                lo = s.max(mid).min(hi);
                peak = w;
            }
            None => hi = mid,
        }
    }
    Ok((0.5 * (lo + hi), peak))
}

/// Both norm computations together with their relative disagreement.
pub fn cross_checked_norm(cl: &ClosedLoop, tol: f64) -> Result<(HinfResult, f64)> {
    let bisect = hinf_norm_bisect(cl, tol)?;
    let sweep = hinf_norm_sweep(cl, &default_frequencies(cl))?;
    let rel = if bisect.norm > 0.0 {
        (bisect.norm - sweep.norm).abs() / bisect.norm
    } else {
        sweep.norm
    };
    Ok((bisect, rel))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::riccati::solve_gare_hamiltonian;
    use rand::Rng;

    fn scalar_loop(a: f64, b: f64, c: f64) -> ClosedLoop {
        ClosedLoop::new(
            DMatrix::from_element(1, 1, a),
            DMatrix::from_element(1, 1, b),
            DMatrix::from_element(1, 1, c),
        )
        .unwrap()
    }

    #[test]
    fn scalar_transfer_peak_at_zero() {
        let cl = scalar_loop(-1.0, 1.0, 1.0);
        let sweep = hinf_norm_sweep(&cl, &default_frequencies(&cl)).unwrap();
        assert!((sweep.norm - 1.0).abs() < 1e-12);
        assert_eq!(sweep.peak_freq, 0.0);
        let bis = hinf_norm_bisect(&cl, 1e-8).unwrap();
        assert!((bis.norm - 1.0).abs() < 1e-6);
        assert_eq!(bis.method, NormMethod::Bisection);
    }

    #[test]
    fn zero_output_and_input_scaling() {
        let cl = scalar_loop(-1.0, 1.0, 0.0);
        assert_eq!(hinf_norm_bisect(&cl, 1e-6).unwrap().norm, 0.0);
        let mut rng = linalg::rng(1);
        let cl1 = random_loop(&mut rng, 6);
        let cl2 = ClosedLoop::new(cl1.a_cl.clone(), &cl1.b_cl * 2.0, cl1.c_cl.clone()).unwrap();
        let n1 = hinf_norm_bisect(&cl1, 1e-9).unwrap().norm;
        let n2 = hinf_norm_bisect(&cl2, 1e-9).unwrap().norm;
        assert!((n2 - 2.0 * n1).abs() < 1e-7 * n2);
    }

    #[test]
    fn unstable_loop_rejected() {
        let err = ClosedLoop::new(
            DMatrix::from_element(1, 1, 0.5),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
        );
        assert!(matches!(err, Err(Error::ClosedLoopUnstable { .. })));
    }

    fn random_loop(rng: &mut rand_chacha::ChaCha8Rng, n: usize) -> ClosedLoop {
        loop {
            let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
            let b = DMatrix::from_fn(n, 2, |_, _| rng.random_range(-1.0..1.0));
            let c = DMatrix::from_fn(3, n, |_, _| rng.random_range(-1.0..1.0));
            // shift into the left half plane with a random margin
            let shift = linalg::spectral_abscissa(&a).unwrap() + rng.random_range(0.05..1.0);
            let a = a - DMatrix::identity(n, n) * shift;
            if let Ok(cl) = ClosedLoop::new(a, b, c) {
                return cl;
            }
        }
    }

    #[test]
    fn bisection_agrees_with_sweep_on_random_triples() {
        let mut rng = linalg::rng(2024);
        for _ in 0..20 {
            let cl = random_loop(&mut rng, 20);
            let (bis, rel) = cross_checked_norm(&cl, 1e-8).unwrap();
            assert_eq!(bis.method, NormMethod::Bisection);
            assert!(rel <= 1e-3, "relative gap {rel}");
            let sweep = hinf_norm_sweep(&cl, &default_frequencies(&cl)).unwrap();
            assert!(sweep.norm <= bis.norm * (1.0 + 1e-8));
        }
    }

    #[test]
    fn scalar_loop_from_riccati() {
        let sys = DiscreteSystem::from_matrices(
            DMatrix::from_element(1, 1, -1.0),
            DMatrix::from_element(1, 1, 1.0),
            DVector::from_element(1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            DVector::from_element(1, 0.0),
        )
        .unwrap();
        let sol = solve_gare_hamiltonian(&sys, 2.0).unwrap();
        let cl = close_loop(&sys, &sol).unwrap();
        let p = (-2.0 + 7f64.sqrt()) / 1.5;
        assert!((cl.a_cl[(0, 0)] + 1.0 + p).abs() < 1e-12);
        let res = hinf_norm_bisect(&cl, 1e-8).unwrap().with_target(2.0);
        assert_eq!(res.passed(), Some(true));

        let open = close_loop_with(&sys, &DVector::zeros(1)).unwrap();
        assert_eq!(open.a_cl, sys.a);
    }

    #[test]
    fn output_map_splits_state_and_control_energy() {
        let sys = DiscreteSystem::from_matrices(
            DMatrix::from_diagonal(&DVector::from_vec(vec![-1.0, -2.0, -3.0])),
            DMatrix::identity(3, 3),
            DVector::from_vec(vec![1.0, 0.5, 0.0]),
            DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.0, 1.0])),
            DVector::zeros(3),
        )
        .unwrap();
        let f = DVector::from_vec(vec![0.3, -0.2, 0.1]);
        let cl = close_loop_with(&sys, &f).unwrap();
        let mut rng = linalg::rng(4);
        for _ in 0..10 {
            let y = linalg::random_unit(&mut rng, 3);
            let lhs = (&cl.c_cl * &y).norm_squared();
            let rhs = (&sys.c1 * &y).norm_squared() + f.dot(&y).powi(2);
            assert!((lhs - rhs).abs() < 1e-14);
        }
    }

    #[test]
    fn scalar_gamma_opt_matches_loop_infimum() {
        // closed loop of A = -1 with u = -k y: ‖G‖ = sqrt(1 + k²)/(1 + k)
        let sys = DiscreteSystem::from_matrices(
            DMatrix::from_element(1, 1, -1.0),
            DMatrix::from_element(1, 1, 1.0),
            DVector::from_element(1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            DVector::from_element(1, 0.0),
        )
        .unwrap();
        let best = (0..=4000)
            .map(|i| {
                let k = i as f64 * 1e-3;
                let cl = close_loop_with(&sys, &DVector::from_element(1, -k)).unwrap();
                hinf_norm_sweep(&cl, &default_frequencies(&cl)).unwrap().norm
            })
            .fold(f64::INFINITY, f64::min);
        let g = crate::riccati::gamma_opt(&sys, 0.1, 1e6, 1e-7).unwrap();
        assert!((g - best).abs() < 1e-4, "{g} vs {best}");
    }
}
