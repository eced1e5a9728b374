//! Time-domain checks: closed-loop simulation with implicit time stepping,
//! empirical `w ↦ z` gain, decay fits, the output-injection detectability
//! experiment, the adjoint integral bound, and resolvent estimates.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{self, C64};
use crate::operators::DiscreteSystem;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Scheme {
    #[default]
    ImplicitEuler,
    CrankNicolson,
}

/// Least-squares fit of `‖y(t)‖ ≈ C e^{-αt}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecayFit {
    pub c: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone)]
pub struct SimTrace {
    pub dt: f64,
    pub horizon: f64,
    /// `‖y(t_k)‖` for `k = 0..=steps`.
    pub y_norms: Vec<f64>,
    /// Running `∫‖z‖²` at each step.
    pub z_energy: Vec<f64>,
    /// Running `∫‖w‖²` at each step.
    pub w_energy: Vec<f64>,
    pub decay_fit: Option<DecayFit>,
}

impl SimTrace {
    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.y_norms.len()).map(move |k| k as f64 * self.dt)
    }

    pub fn total_z_energy(&self) -> f64 {
        *self.z_energy.last().unwrap_or(&0.0)
    }

    pub fn total_w_energy(&self) -> f64 {
        *self.w_energy.last().unwrap_or(&0.0)
    }

    /// Trapezoidal `∫₀ᵀ ‖y‖² dt`.
    pub fn datko_integral(&self) -> f64 {
        trapezoid(self.dt, self.y_norms.iter().map(|v| v * v))
    }

    /// `t,y_norm,z_energy,w_energy` rows.
    pub fn csv(&self) -> String {
        let mut out = String::from("t,y_norm,z_energy,w_energy\n");
        for (k, t) in self.times().enumerate() {
            out.push_str(&format!(
                "{t:.9e},{:.12e},{:.12e},{:.12e}\n",
                self.y_norms[k], self.z_energy[k], self.w_energy[k]
            ));
        }
        out
    }
}

fn trapezoid(dt: f64, values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    if v.len() < 2 {
        return 0.0;
    }
    dt * (v.iter().sum::<f64>() - 0.5 * (v[0] + v[v.len() - 1]))
}

/// Fits `ln‖y‖` linearly over the last half of the trace.
pub fn fit_decay(dt: f64, y_norms: &[f64]) -> Option<DecayFit> {
    let start = y_norms.len() / 2;
    let pts: Vec<(f64, f64)> = y_norms
        .iter()
        .enumerate()
        .skip(start)
        .filter(|(_, &v)| v > 0.0 && v.is_finite())
        .map(|(k, &v)| (k as f64 * dt, v.ln()))
        .collect();
    if pts.len() < 3 {
        return None;
    }
    let m = pts.len() as f64;
    let tm = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let lm = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let sxy: f64 = pts.iter().map(|p| (p.0 - tm) * (p.1 - lm)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - tm).powi(2)).sum();
    let slope = sxy / sxx;
    Some(DecayFit {
        c: (lm - slope * tm).exp(),
        alpha: -slope,
    })
}

/// A disturbance signal `w(t) ∈ ℝ^m`.
#[derive(Debug, Clone)]
pub enum Disturbance {
    /// Piecewise-constant noise, i.i.d. uniform per step on the listed
    /// channels, from a seeded generator.
    WhiteNoise {
        channels: Vec<usize>,
        seed: u64,
        dt: f64,
        values: Vec<DVector<f64>>,
    },
    /// `Re(v e^{iωt})` for a complex direction `v = re + i·im`.
    Sinusoid {
        omega: f64,
        re: DVector<f64>,
        im: DVector<f64>,
    },
    /// Constant direction switched on for `[0, duration)`.
    Pulse { direction: DVector<f64>, duration: f64 },
    /// Constant direction for all time.
    Constant(DVector<f64>),
}

impl Disturbance {
    pub fn white_noise(m: usize, channels: Vec<usize>, seed: u64, dt: f64, steps: usize) -> Self {
        let mut rng = linalg::rng(seed);
        let values = (0..=steps)
            .map(|_| {
                let mut v = DVector::zeros(m);
                for &c in &channels {
                    v[c] = rng.random_range(-1.0..1.0);
                }
                v
            })
            .collect();
        Disturbance::WhiteNoise {
            channels,
            seed,
            dt,
            values,
        }
    }

    pub fn eval(&self, t: f64) -> DVector<f64> {
        match self {
            Disturbance::WhiteNoise { dt, values, .. } => {
                let k = ((t / dt).round() as usize).min(values.len() - 1);
                values[k].clone()
            }
            Disturbance::Sinusoid { omega, re, im } => {
                re * (omega * t).cos() - im * (omega * t).sin()
            }
            Disturbance::Pulse {
                direction,
                duration,
            } => {
                if t < *duration {
                    direction.clone()
                } else {
                    direction * 0.0
                }
            }
            Disturbance::Constant(d) => d.clone(),
        }
    }

    pub fn label(&self) -> String {
        match self {
            Disturbance::WhiteNoise { seed, .. } => format!("white_noise(seed={seed})"),
            Disturbance::Sinusoid { omega, .. } => format!("sinusoid(omega={omega:.6e})"),
            Disturbance::Pulse { duration, .. } => format!("pulse(duration={duration:.3e})"),
            Disturbance::Constant(_) => "constant".into(),
        }
    }
}

/// Input channels `j` with a nonzero column `B₁e_j`.
pub fn active_inputs(sys: &DiscreteSystem) -> Vec<usize> {
    (0..sys.b1.ncols())
        .filter(|&j| sys.b1.column(j).iter().any(|&x| x != 0.0))
        .collect()
}

/// Time-stepping setup shared by the simulations below.
#[derive(Debug, Clone, Copy)]
pub struct StepConfig {
    pub dt: f64,
    pub horizon: f64,
    pub scheme: Scheme,
}

impl StepConfig {
    pub fn new(dt: f64, horizon: f64) -> Result<Self> {
        if !(dt > 0.0 && horizon > 0.0 && dt.is_finite() && horizon.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "time step and horizon must be positive, got dt = {dt}, T = {horizon}"
            )));
        }
        Ok(Self {
            dt,
            horizon,
            scheme: Scheme::ImplicitEuler,
        })
    }

    pub fn with_scheme(mut self, scheme: Scheme) -> Self {
        self.scheme = scheme;
        self
    }

    /// `T = 50/|rate|` resolved with at most `max_steps` steps.
    pub fn for_rate(rate: f64, max_steps: usize) -> Result<Self> {
        let horizon = 50.0 / rate.abs();
        Self::new(horizon / max_steps as f64, horizon)
    }

    pub fn steps(&self) -> usize {
        (self.horizon / self.dt).round().max(1.0) as usize
    }
}

const BLOWUP: f64 = 1e12;

/// Simulates `y' = A_cl y + B₁w` with `A_cl = A + B₂f`, output
/// `z = [C₁y; fy]`, using the factorization of `I - dt·A_cl` (or of
/// `I - dt/2·A_cl`) computed once.
pub fn step_closed_loop(
    sys: &DiscreteSystem,
    feedback: Option<&DVector<f64>>,
    w: Option<&Disturbance>,
    y0: &DVector<f64>,
    cfg: StepConfig,
) -> Result<SimTrace> {
    let n = sys.n();
    if y0.len() != n {
        return Err(Error::InvalidArgument("initial state has the wrong length".into()));
    }
    let a_cl = match feedback {
        Some(f) => &sys.a + &sys.b2 * f.transpose(),
        None => sys.a.clone(),
    };
    let out = |y: &DVector<f64>| -> f64 {
        let c = (&sys.c1 * y).norm_squared();
        c + feedback.map_or(0.0, |f| f.dot(y).powi(2))
    };
    simulate(&a_cl, Some(&sys.b1), w, y0, cfg, out)
}

fn simulate(
    a: &DMatrix<f64>,
    b: Option<&DMatrix<f64>>,
    w: Option<&Disturbance>,
    y0: &DVector<f64>,
    cfg: StepConfig,
    output_sq: impl Fn(&DVector<f64>) -> f64,
) -> Result<SimTrace> {
    let n = a.nrows();
    let dt = cfg.dt;
    let steps = cfg.steps();
    let eye = DMatrix::<f64>::identity(n, n);
    let theta = match cfg.scheme {
        Scheme::ImplicitEuler => 1.0,
        Scheme::CrankNicolson => 0.5,
    };
    let lu = (&eye - a * (theta * dt)).lu();
    let explicit = &eye + a * ((1.0 - theta) * dt);
    let input = |t: f64| -> Option<DVector<f64>> {
        match (b, w) {
            (Some(b), Some(w)) => Some(w.eval(t)).filter(|v| v.len() == b.ncols()),
            _ => None,
        }
    };
    if let (Some(b), Some(w)) = (b, w) {
        if w.eval(0.0).len() != b.ncols() {
            return Err(Error::InvalidArgument("disturbance has the wrong dimension".into()));
        }
    }
    let scale = y0.norm().max(1.0);
    let mut y = y0.clone();
    let mut y_norms = vec![y.norm()];
    let mut z_energy = vec![0.0];
    let mut w_energy = vec![0.0];
    let mut z_prev = output_sq(&y);
    let mut w_prev = input(0.0).map_or(0.0, |v| v.norm_squared());
    let mut zacc = 0.0;
    let mut wacc = 0.0;
    for k in 1..=steps {
        let t = k as f64 * dt;
        let mut rhs = if theta == 1.0 { y.clone() } else { &explicit * &y };
        let wk = input(t);
        if let (Some(b), Some(wk)) = (b, &wk) {
            match cfg.scheme {
                Scheme::ImplicitEuler => rhs += b * wk * dt,
                Scheme::CrankNicolson => {
                    let wprev = input(t - dt).expect("disturbance present");
                    rhs += b * (wk + wprev) * (0.5 * dt);
                }
            }
        }
        y = lu
            .solve(&rhs)
            .ok_or_else(|| Error::Singular(format!("time-step matrix is singular at step {k}")))?;
        let norm = y.norm();
        if !norm.is_finite() || norm > BLOWUP * scale {
            return Err(Error::Unstable { step: k, norm });
        }
        let z_now = output_sq(&y);
        let w_now = wk.as_ref().map_or(0.0, |v| v.norm_squared());
        // Riemann sums matching the scheme: right endpoint for implicit
        // Euler, trapezoid for Crank-Nicolson
        match cfg.scheme {
            Scheme::ImplicitEuler => {
                zacc += dt * z_now;
                wacc += dt * w_now;
            }
            Scheme::CrankNicolson => {
                zacc += 0.5 * dt * (z_now + z_prev);
                wacc += 0.5 * dt * (w_now + w_prev);
            }
        }
        z_prev = z_now;
        w_prev = w_now;
        y_norms.push(norm);
        z_energy.push(zacc);
        w_energy.push(wacc);
    }
    let decay_fit = fit_decay(dt, &y_norms);
    Ok(SimTrace {
        dt,
        horizon: steps as f64 * dt,
        y_norms,
        z_energy,
        w_energy,
        decay_fit,
    })
}

/// Largest `sqrt(∫‖z‖² / ∫‖w‖²)` over the disturbances, from `y₀ = 0`.
/// Signals with zero energy are skipped. Runs the simulations in parallel.
pub fn empirical_gain(
    sys: &DiscreteSystem,
    feedback: Option<&DVector<f64>>,
    disturbances: &[Disturbance],
    cfg: StepConfig,
) -> Result<Vec<(String, f64)>> {
    let zero = DVector::zeros(sys.n());
    disturbances
        .par_iter()
        .map(|w| {
            let trace = step_closed_loop(sys, feedback, Some(w), &zero, cfg)?;
            let we = trace.total_w_energy();
            Ok((we > 0.0).then(|| (w.label(), (trace.total_z_energy() / we).sqrt())))
        })
        .collect::<Result<Vec<_>>>()
        .map(|v| v.into_iter().flatten().collect())
}

pub fn max_gain(gains: &[(String, f64)]) -> f64 {
    gains.iter().map(|g| g.1).fold(0.0, f64::max)
}

/// Worst-case direction at `ω*`: the top right singular vector of
/// `G(iω*)` (on the active channels), as a real sinusoid or, at `ω* = 0`,
/// a constant input.
pub fn worst_case_disturbance(
    sys: &DiscreteSystem,
    feedback: &DVector<f64>,
    omega: f64,
) -> Result<Disturbance> {
    let n = sys.n();
    let m = sys.b1.ncols();
    let active = active_inputs(sys);
    let a_cl = &sys.a + &sys.b2 * feedback.transpose();
    let b = sys.b1.select_columns(&active);
    let mut c = DMatrix::zeros(sys.c1.nrows() + 1, n);
    c.rows_mut(0, sys.c1.nrows()).copy_from(&sys.c1);
    c.row_mut(sys.c1.nrows()).copy_from(&feedback.transpose());
    let mut res = linalg::to_complex(&(-a_cl));
    for i in 0..n {
        res[(i, i)] += C64::new(0.0, omega);
    }
    let g = linalg::to_complex(&c)
        * res
            .lu()
            .solve(&linalg::to_complex(&b))
            .ok_or_else(|| Error::Singular("resolvent singular at the peak frequency".into()))?;
    let svd = g.svd(false, true);
    let v_t = svd.v_t.expect("right singular vectors requested");
    let k = (0..svd.singular_values.len())
        .max_by(|&i, &j| svd.singular_values[i].total_cmp(&svd.singular_values[j]))
        .unwrap_or(0);
    // row k of Vᴴ is the conjugate of the singular vector
    let mut re = DVector::zeros(m);
    let mut im = DVector::zeros(m);
    for (idx, &ch) in active.iter().enumerate() {
        let z = v_t[(k, idx)].conj();
        re[ch] = z.re;
        im[ch] = z.im;
    }
    if omega == 0.0 {
        // G(0) is real; the real part of the vector carries the direction
        let dir = if re.norm() >= im.norm() { re } else { im };
        let nrm = dir.norm();
        return Ok(Disturbance::Constant(dir / nrm));
    }
    Ok(Disturbance::Sinusoid { omega, re, im })
}

/// White noise, sinusoids at and off the peak, a pulse and the worst-case
/// direction.
pub fn disturbance_library(
    sys: &DiscreteSystem,
    feedback: &DVector<f64>,
    peak_freq: f64,
    cfg: StepConfig,
    seed: u64,
) -> Result<Vec<Disturbance>> {
    let m = sys.b1.ncols();
    let active = active_inputs(sys);
    let steps = cfg.steps();
    let mut uniform = DVector::<f64>::zeros(m);
    for &c in &active {
        uniform[c] = 1.0;
    }
    let unorm = uniform.norm().max(1.0);
    uniform /= unorm;
    let off = if peak_freq > 0.0 { 3.0 * peak_freq } else { 10.0 / cfg.horizon };
    Ok(vec![
        Disturbance::white_noise(m, active.clone(), seed, cfg.dt, steps),
        Disturbance::white_noise(m, active, seed.wrapping_add(1), cfg.dt, steps),
        Disturbance::Sinusoid {
            omega: off,
            re: uniform.clone(),
            im: DVector::zeros(m),
        },
        Disturbance::Pulse {
            direction: uniform,
            duration: 0.1 * cfg.horizon,
        },
        worst_case_disturbance(sys, feedback, peak_freq)?,
    ])
}

/// Outcome of the output-injection experiment `y' = (A - kC₁)y`.
#[derive(Debug, Clone)]
pub struct DetectabilityReport {
    pub k: f64,
    pub omega0: f64,
    pub trace: SimTrace,
    pub integral: f64,
    /// `1/(2(k - ω₀))‖y₀‖²`.
    pub bound: f64,
    pub passed: bool,
}

pub fn detectability_experiment(
    sys: &DiscreteSystem,
    k: f64,
    y0: &DVector<f64>,
    cfg: StepConfig,
) -> Result<DetectabilityReport> {
    if !(k > sys.omega0) {
        return Err(Error::InvalidArgument(format!(
            "output-injection gain {k} must exceed omega0 = {}",
            sys.omega0
        )));
    }
    let a = &sys.a - sys.c1.transpose() * &sys.c1 * k;
    let trace = simulate(&a, None, None, y0, cfg, |_| 0.0)?;
    let integral = trace.datko_integral();
    let bound = y0.norm_squared() / (2.0 * (k - sys.omega0));
    Ok(DetectabilityReport {
        k,
        omega0: sys.omega0,
        integral,
        bound,
        passed: integral <= 1.05 * bound,
        trace,
    })
}

/// Largest `∫₀ᵀ |B₂ᵀ y(t)| dt` over random unit `y₀`, with
/// `y' = (Aᵀ - kC₁ᵀC₁)y`; the adjoint semigroup under output injection.
pub fn i2_integral_check(
    sys: &DiscreteSystem,
    k: f64,
    samples: usize,
    cfg: StepConfig,
    seed: u64,
) -> Result<f64> {
    if !(k > sys.omega0) {
        return Err(Error::InvalidArgument(format!(
            "output-injection gain {k} must exceed omega0 = {}",
            sys.omega0
        )));
    }
    let at = sys.a.transpose() - sys.c1.transpose() * &sys.c1 * k;
    let mut rng = linalg::rng(seed);
    let starts: Vec<DVector<f64>> = (0..samples)
        .map(|_| linalg::random_unit(&mut rng, sys.n()))
        .collect();
    let dt = cfg.dt;
    let results: Vec<Result<f64>> = starts
        .par_iter()
        .map(|y0| {
            let lu = (DMatrix::<f64>::identity(sys.n(), sys.n()) - &at * dt).lu();
            let mut y = y0.clone();
            let mut vals = vec![sys.b2.dot(&y).abs()];
            let mut norms = vec![y.norm()];
            for step in 1..=cfg.steps() {
                y = lu
                    .solve(&y)
                    .ok_or_else(|| Error::Singular(format!("adjoint step {step} is singular")))?;
                vals.push(sys.b2.dot(&y).abs());
                norms.push(y.norm());
            }
            match fit_decay(dt, &norms) {
                Some(fit) if fit.alpha > 0.0 => Ok(trapezoid(dt, vals.into_iter())),
                Some(fit) => Err(Error::DetectabilityViolated { rate: fit.alpha }),
                // the trajectory vanished exactly
                None => Ok(trapezoid(dt, vals.into_iter())),
            }
        })
        .collect();
    let mut best: f64 = 0.0;
    for r in results {
        best = best.max(r?);
    }
    Ok(best)
}

#[derive(Debug, Clone)]
pub struct ResolventReport {
    pub sigma0: f64,
    /// `(Re σ - σ₀, Im σ, |σ - σ₀|·‖(σI - A)⁻¹‖)` per probe.
    pub probes: Vec<(f64, f64, f64)>,
    /// Largest value over probes (operator norm and random directions).
    pub m_hat: f64,
    /// Ratio of the largest value over the top decade of `|Im σ|` to the
    /// largest over the decade below; about 1 or less for a sectorial bound,
    /// `10^s` for growth like `|Im σ|^s`.
    pub growth: f64,
    /// Set when the hypothesis of the check is not met and nothing ran.
    pub skipped: bool,
}

impl ResolventReport {
    pub fn bounded(&self, limit: f64) -> bool {
        self.skipped || (self.m_hat <= limit && self.growth <= 1.1)
    }
}

/// Vertical probe lines `Re σ = σ₀ + offset` with `|Im σ|` log-spaced in
/// `[10⁻², im_max]`, both signs.
pub fn vertical_probes(sigma0: f64, offsets: &[f64], im_max: f64, per_line: usize) -> Vec<C64> {
    let mut out = Vec::new();
    for &off in offsets {
        out.push(C64::new(sigma0 + off, 0.0));
        for j in 0..per_line {
            let t = (1e-2f64).ln() + (im_max / 1e-2).ln() * j as f64 / (per_line - 1) as f64;
            let im = t.exp();
            out.push(C64::new(sigma0 + off, im));
            out.push(C64::new(sigma0 + off, -im));
        }
    }
    out
}

/// `M̂ = max |σ - σ₀|·‖(σI - A)⁻¹ f‖` over the probes, for the operator norm
/// and `random_dirs` random unit `f`. With `hypothesis_met = false` the
/// check is skipped and flagged.
pub fn resolvent_bound_check(
    sys: &DiscreteSystem,
    sigma0: f64,
    probes: &[C64],
    random_dirs: usize,
    seed: u64,
    hypothesis_met: bool,
) -> Result<ResolventReport> {
    if !hypothesis_met {
        return Ok(ResolventReport {
            sigma0,
            probes: Vec::new(),
            m_hat: f64::NAN,
            growth: f64::NAN,
            skipped: true,
        });
    }
    if let Some(bad) = probes.iter().find(|s| !(s.re > sigma0)) {
        return Err(Error::InvalidArgument(format!(
            "probe {bad} does not lie to the right of sigma0 = {sigma0}"
        )));
    }
    let n = sys.n();
    let mut rng = linalg::rng(seed);
    let dirs: Vec<DVector<C64>> = (0..random_dirs)
        .map(|_| linalg::random_unit(&mut rng, n).map(|x| C64::new(x, 0.0)))
        .collect();
    let ac = linalg::to_complex(&sys.a);
    let values: Vec<Result<(f64, f64, f64, f64)>> = probes
        .par_iter()
        .map(|&s| {
            let mut m = -ac.clone();
            for i in 0..n {
                m[(i, i)] += s;
            }
            let inv = m.try_inverse().ok_or_else(|| {
                Error::Singular(format!("resolvent singular at sigma = {s} (eigenvalue nearby)"))
            })?;
            let dist = (s - C64::new(sigma0, 0.0)).norm();
            let op = dist * linalg::sigma_max(&inv);
            let dir = dirs
                .iter()
                .map(|f| dist * (&inv * f).norm())
                .fold(0.0, f64::max);
            Ok((s.re - sigma0, s.im, op, dir))
        })
        .collect();
    let mut rows = Vec::with_capacity(values.len());
    let mut m_hat: f64 = 0.0;
    for v in values {
        let (re, im, op, dir) = v?;
        m_hat = m_hat.max(op).max(dir);
        rows.push((re, im, op));
    }
    let growth = tail_growth(&rows);
    Ok(ResolventReport {
        sigma0,
        probes: rows,
        m_hat,
        growth,
        skipped: false,
    })
}

fn tail_growth(rows: &[(f64, f64, f64)]) -> f64 {
    let im_max = rows.iter().map(|r| r.1.abs()).fold(0.0, f64::max);
    let band = |lo: f64, hi: f64| {
        rows.iter()
            .filter(|r| r.1.abs() > lo && r.1.abs() <= hi)
            .map(|r| r.2)
            .fold(0.0, f64::max)
    };
    let top = band(im_max / 10.0, im_max);
    let below = band(im_max / 100.0, im_max / 10.0);
    if below > 0.0 {
        top / below
    } else {
        1.0
    }
}

/// `max_k |a_k - b_k|` over the common prefix of two norm sequences.
pub fn trace_distance(a: &SimTrace, b: &SimTrace) -> f64 {
    a.y_norms
        .iter()
        .zip(&b.y_norms)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::RadialGrid;
    use crate::hinf::{close_loop, hinf_norm_bisect};
    use crate::operators::{assemble, tests::base_config};
    use crate::riccati::solve_gare_hamiltonian;

    fn scalar(a: f64) -> DiscreteSystem {
        DiscreteSystem::from_matrices(
            DMatrix::from_element(1, 1, a),
            DMatrix::from_element(1, 1, 1.0),
            DVector::from_element(1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            DVector::from_element(1, 0.0),
        )
        .unwrap()
    }

    fn grid_system(n: usize, lambda_ratio: f64) -> DiscreteSystem {
        let grid = RadialGrid::new(3, 1.0, n).unwrap();
        assemble(&grid, &base_config(lambda_ratio)).unwrap()
    }

    #[test]
    fn pure_diffusion_decays_monotonically() {
        let sys = grid_system(40, 0.0);
        let y0 = DVector::from_element(40, 1.0);
        let trace = step_closed_loop(&sys, None, None, &y0, StepConfig::new(1e-3, 0.5).unwrap()).unwrap();
        assert!(trace.y_norms.windows(2).all(|w| w[1] < w[0]));
        assert!(trace.decay_fit.unwrap().alpha > 0.0);
    }

    #[test]
    fn implicit_euler_is_first_order() {
        let sys = scalar(-1.0);
        let y0 = DVector::from_element(1, 1.0);
        let exact = (-1.0f64).exp();
        let err = |dt: f64| {
            let tr = step_closed_loop(&sys, None, None, &y0, StepConfig::new(dt, 1.0).unwrap()).unwrap();
            (tr.y_norms.last().unwrap() - exact).abs()
        };
        let ratio = err(0.01) / err(0.005);
        assert!((ratio - 2.0).abs() < 0.05, "{ratio}");
        let cn = |dt: f64| {
            let cfg = StepConfig::new(dt, 1.0).unwrap().with_scheme(Scheme::CrankNicolson);
            let tr = step_closed_loop(&sys, None, None, &y0, cfg).unwrap();
            (tr.y_norms.last().unwrap() - exact).abs()
        };
        assert!((cn(0.01) / cn(0.005) - 4.0).abs() < 0.1);
    }

    #[test]
    fn step_energy_bounded_by_accretivity() {
        let mut cfg = base_config(0.5);
        cfg.a0 = 3.0;
        let grid = RadialGrid::new(3, 1.0, 40).unwrap();
        let sys = assemble(&grid, &cfg).unwrap();
        let omega = linalg::max_symmetric_eigenvalue(&sys.a).max(0.0);
        let dt = 1e-3;
        let mut rng = linalg::rng(9);
        let y0 = linalg::random_unit(&mut rng, 40);
        let tr = step_closed_loop(&sys, None, None, &y0, StepConfig::new(dt, 0.2).unwrap()).unwrap();
        for w in tr.y_norms.windows(2) {
            assert!(w[1] <= w[0] / (1.0 - dt * omega) * (1.0 + 1e-12));
        }
    }

    #[test]
    fn scalar_static_gain_with_constant_input() {
        let sys = scalar(-1.0);
        let w = Disturbance::Constant(DVector::from_element(1, 1.0));
        let zero = DVector::zeros(1);
        let mut prev = 0.0;
        for t in [10.0, 100.0, 1000.0] {
            let cfg = StepConfig::new(1e-2, t).unwrap();
            let g = max_gain(&empirical_gain(&sys, None, std::slice::from_ref(&w), cfg).unwrap());
            assert!(g < 1.0 && g > prev);
            prev = g;
        }
        assert!(prev > 0.99);
        let tr = step_closed_loop(&sys, None, None, &zero, StepConfig::new(0.1, 1.0).unwrap()).unwrap();
        assert!(tr.y_norms.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gain_bounded_by_hinf_norm_and_attained_at_peak() {
        let sys = grid_system(30, 0.5);
        let sol = solve_gare_hamiltonian(&sys, 2.0).unwrap();
        let cl = close_loop(&sys, &sol).unwrap();
        let norm = hinf_norm_bisect(&cl, 1e-8).unwrap();
        let cfg = StepConfig::for_rate(cl.abscissa, 10_000).unwrap();
        let lib = disturbance_library(&sys, &sol.feedback, norm.peak_freq, cfg, 3).unwrap();
        let gains = empirical_gain(&sys, Some(&sol.feedback), &lib, cfg).unwrap();
        assert!(max_gain(&gains) <= norm.norm * 1.05);
        let worst = gains.last().unwrap().1;
        assert!(worst >= 0.9 * norm.norm, "{worst} vs {}", norm.norm);
    }

    #[test]
    fn detectability_bound_and_scaling() {
        let sys = grid_system(40, 0.5);
        let y0 = DVector::from_element(40, 1.0);
        let k = sys.omega0 + 1.0;
        let cfg = StepConfig::new(1e-3, 10.0).unwrap();
        let rep = detectability_experiment(&sys, k, &y0, cfg).unwrap();
        assert!(rep.passed, "{} > {}", rep.integral, rep.bound);
        let rep4 = detectability_experiment(&sys, 4.0 * k + 3.0 * sys.omega0.abs(), &y0, cfg).unwrap();
        assert!(rep4.integral < rep.integral);
        let zero = detectability_experiment(&sys, k, &DVector::zeros(40), cfg).unwrap();
        assert!(zero.trace.y_norms.iter().all(|&v| v == 0.0));
        assert!(detectability_experiment(&sys, sys.omega0, &y0, cfg).is_err());
    }

    #[test]
    fn adjoint_integral_finite_and_linear_in_b() {
        let sys = grid_system(30, 0.5);
        let k = sys.omega0 + 1.0;
        let cfg = StepConfig::new(2e-3, 5.0).unwrap();
        let c1 = i2_integral_check(&sys, k, 20, cfg, 1).unwrap();
        assert!(c1.is_finite() && c1 > 0.0);
        let longer = i2_integral_check(&sys, k, 20, StepConfig::new(2e-3, 10.0).unwrap(), 1).unwrap();
        assert!((longer - c1).abs() <= 1e-6 * c1);
        let mut doubled = sys.clone();
        doubled.b2 *= 2.0;
        let c2 = i2_integral_check(&doubled, k, 20, cfg, 1).unwrap();
        assert!((c2 - 2.0 * c1).abs() < 1e-10 * c2);
        let mut none = sys.clone();
        none.b2.fill(0.0);
        assert_eq!(i2_integral_check(&none, k, 5, cfg, 1).unwrap(), 0.0);
    }

    #[test]
    fn resolvent_symmetric_case_matches_spectral_formula() {
        let sys = grid_system(30, 0.5);
        let lmax = linalg::max_symmetric_eigenvalue(&sys.a);
        let sigma0 = sys.omega0;
        assert!(lmax <= sigma0);
        let s = sigma0 + 1.0;
        let rep = resolvent_bound_check(&sys, sigma0, &[C64::new(s, 0.0)], 0, 1, true).unwrap();
        let expected = (s - sigma0) / (s - lmax);
        assert!((rep.m_hat - expected).abs() < 1e-10);
        assert!(rep.m_hat <= 1.0);
    }

    #[test]
    fn resolvent_bounded_along_vertical_lines() {
        let mut cfg = base_config(0.5);
        cfg.convection = crate::operators::Convection::linear(0.5);
        let grid = RadialGrid::new(3, 1.0, 40).unwrap();
        let sys = assemble(&grid, &cfg).unwrap();
        let sigma0 = sys.omega0 + cfg.divv_max();
        let probes = vertical_probes(sigma0, &[0.5, 1.0, 2.0], 1e3, 12);
        let rep = resolvent_bound_check(&sys, sigma0, &probes, 4, 2, true).unwrap();
        assert!(rep.bounded(10.0), "{} {}", rep.m_hat, rep.growth);
        let skipped = resolvent_bound_check(&sys, sigma0, &probes, 4, 2, false).unwrap();
        assert!(skipped.skipped && skipped.bounded(10.0));
    }
}
