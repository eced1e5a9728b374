//! Experiment runner: TOML configuration, the synthesize-and-verify pipeline
//! and its plain-text report.
//!
//! Tasks run in dependency order (operators, Hardy/accretivity, Riccati,
//! H∞ norm, simulation/detectability/kernel, critical sweep). Every check
//! produces one report line `"<label>: PASS|FAIL (<detail>)"`.

use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::domain::{hardy_constant, Annulus, RadialGrid};
use crate::error::{Error, Result};
use crate::hardy::{self, ImprovedHardyEstimate};
use crate::hinf::{self, HinfResult};
use crate::io::{self, MatrixHeader};
use crate::kernel;
use crate::linalg;
use crate::operators::{self, Actuator, Convection, Criticality, DiscreteSystem, ProblemConfig};
use crate::riccati::{self, RiccatiSolution};
use crate::semigroup::{self, StepConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Hardy,
    Accretivity,
    Synthesize,
    Hinf,
    Simulate,
    Detectability,
    Kernel,
    CriticalSweep,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Hardy => "hardy",
            Task::Accretivity => "accretivity",
            Task::Synthesize => "synthesize",
            Task::Hinf => "hinf",
            Task::Simulate => "simulate",
            Task::Detectability => "detectability",
            Task::Kernel => "kernel",
            Task::CriticalSweep => "critical-sweep",
        }
    }

    pub const ALL: [Task; 8] = [
        Task::Hardy,
        Task::Accretivity,
        Task::Synthesize,
        Task::Hinf,
        Task::Simulate,
        Task::Detectability,
        Task::Kernel,
        Task::CriticalSweep,
    ];
}

fn default_seed() -> u64 {
    42
}

fn default_radius() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub tasks: Vec<Task>,
    pub grid: GridSection,
    pub problem: ProblemSection,
    pub sets: SetsSection,
    pub actuator: Actuator,
    #[serde(default)]
    pub convection: Convection,
    #[serde(default)]
    pub hardy: HardySection,
    #[serde(default)]
    pub critical: CriticalSection,
    #[serde(default)]
    pub simulation: SimulationSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub nodes: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSection {
    pub dim: usize,
    #[serde(default = "default_radius")]
    pub radius: f64,
    /// Absolute Hardy coefficient; exclusive with `lambda_ratio`.
    pub lambda: Option<f64>,
    /// `λ / H_N`.
    pub lambda_ratio: Option<f64>,
    #[serde(default)]
    pub a0: f64,
    pub gamma: f64,
    /// `λ = H_N` with the ε-regularized potential.
    #[serde(default)]
    pub critical: bool,
}

/// Radial shells `[r_lo, r_hi)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SetsSection {
    pub omega0: [f64; 2],
    pub omega_c: [f64; 2],
    pub omega1: [f64; 2],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HardySection {
    /// Node counts of the refinement study, each double the previous.
    pub sizes: Vec<usize>,
}

impl Default for HardySection {
    fn default() -> Self {
        Self {
            sizes: vec![250, 500, 1000],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CriticalSection {
    /// Regularization used when `problem.critical = true`.
    pub epsilon: f64,
    /// Regularizations of the critical sweep.
    pub eps_list: Vec<f64>,
    /// Exponent of the improved Hardy inequality; `2N/(N+1)` when absent.
    pub p: Option<f64>,
    /// Nodes of the grid used to estimate the improved-Hardy constant;
    /// the experiment grid when absent.
    pub estimate_nodes: Option<usize>,
}

impl Default for CriticalSection {
    fn default() -> Self {
        Self {
            epsilon: 0.05,
            eps_list: vec![0.1, 0.05, 0.025, 0.0125],
            p: None,
            estimate_nodes: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationSection {
    /// Output-injection gain `k = ω₀ + injection_offset`.
    pub injection_offset: f64,
    pub adjoint_samples: usize,
    pub max_steps: usize,
    pub accretivity_trials: usize,
    pub probe_im_max: f64,
    pub probes_per_line: usize,
}

impl Default for SimulationSection {
    fn default() -> Self {
        Self {
            injection_offset: 1.0,
            adjoint_samples: 100,
            max_steps: 10_000,
            accretivity_trials: 1000,
            probe_im_max: 1e3,
            probes_per_line: 12,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitStatus {
    Success,
    ConfigInvalid,
    GammaInfeasible,
    InvariantViolation,
}

impl ExitStatus {
    pub fn code(self) -> i32 {
        match self {
            ExitStatus::Success => 0,
            ExitStatus::ConfigInvalid => 2,
            ExitStatus::GammaInfeasible => 3,
            ExitStatus::InvariantViolation => 4,
        }
    }

    pub fn from_error(e: &Error) -> Self {
        match e {
            Error::InvalidConfig(_) => ExitStatus::ConfigInvalid,
            Error::GammaInfeasible { .. } | Error::NoFeasibleGamma { .. } => ExitStatus::GammaInfeasible,
            _ => ExitStatus::InvariantViolation,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Check {
    pub label: String,
    pub passed: bool,
    pub detail: String,
    /// Reported-only checks never change the exit status.
    pub enforced: bool,
}

impl Check {
    fn new(label: &str, passed: bool, detail: String) -> Self {
        Self {
            label: label.into(),
            passed,
            detail,
            enforced: true,
        }
    }

    fn reported(label: &str, passed: bool, detail: String) -> Self {
        Self {
            enforced: false,
            ..Self::new(label, passed, detail)
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = match (self.passed, self.enforced) {
            (true, _) => "PASS",
            (false, true) => "FAIL",
            (false, false) => "WARN",
        };
        write!(f, "{}: {verdict} ({})", self.label, self.detail)?;
        if !self.enforced {
            write!(f, " [reported only]")?;
        }
        Ok(())
    }
}

/// Output of one task: checks, flat values and CSV artifacts.
#[derive(Debug, Clone, Default)]
pub struct TaskRecord {
    pub name: String,
    pub checks: Vec<Check>,
    pub values: Vec<(String, String)>,
    /// `(file name, contents)`.
    pub artifacts: Vec<(String, String)>,
}

impl TaskRecord {
    fn new(name: &str) -> Self {
        Self {
            name: name.into(),
            ..Self::default()
        }
    }

    fn value(&mut self, key: &str, v: impl fmt::Display) {
        self.values.push((key.into(), v.to_string()));
    }

    fn num(&mut self, key: &str, v: f64) {
        self.value(key, format!("{v:.12e}"));
    }

    fn check(&mut self, c: Check) {
        self.checks.push(c);
    }

    fn artifact(&mut self, file: String, content: String) {
        self.artifacts.push((file, content));
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed || !c.enforced)
    }

    /// `key=value` lines, prefixed by the task name.
    pub fn summary(&self) -> String {
        let mut pairs: Vec<(String, String)> = self
            .values
            .iter()
            .map(|(k, v)| (format!("{}.{k}", self.name), v.clone()))
            .collect();
        for c in &self.checks {
            pairs.push((
                format!("{}.check.{}", self.name, slug(&c.label)),
                if c.passed { "PASS" } else if c.enforced { "FAIL" } else { "WARN" }.into(),
            ));
        }
        io::summary_text(&pairs)
    }
}

fn slug(label: &str) -> String {
    let mut out = String::new();
    for ch in label.chars() {
        if ch.is_ascii_alphanumeric() {
            out.push(ch.to_ascii_lowercase());
        } else if !out.ends_with('_') {
            out.push('_');
        }
    }
    out.trim_matches('_').to_string()
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub name: String,
    pub records: Vec<TaskRecord>,
    pub status: ExitStatus,
    pub error: Option<String>,
}

impl RunReport {
    fn finish(name: &str, records: Vec<TaskRecord>, error: Option<Error>) -> Self {
        let status = match &error {
            Some(e) => ExitStatus::from_error(e),
            None if records.iter().all(TaskRecord::passed) => ExitStatus::Success,
            None => ExitStatus::InvariantViolation,
        };
        Self {
            name: name.into(),
            records,
            status,
            error: error.map(|e| e.to_string()),
        }
    }

    pub fn exit_code(&self) -> i32 {
        self.status.code()
    }

    /// Report lines: one per check, then the error (if any) and the status.
    pub fn lines(&self) -> Vec<String> {
        let mut out = Vec::new();
        for r in &self.records {
            for c in &r.checks {
                out.push(format!("[{}] {c}", r.name));
            }
        }
        if let Some(e) = &self.error {
            out.push(format!("error: {e}"));
        }
        out.push(format!("status: {} (exit {})", status_name(self.status), self.exit_code()));
        out
    }

    pub fn check(&self, label: &str) -> Option<&Check> {
        self.records.iter().flat_map(|r| r.checks.iter()).find(|c| c.label == label)
    }

    pub fn value(&self, task: &str, key: &str) -> Option<&str> {
        self.records
            .iter()
            .filter(|r| r.name == task)
            .flat_map(|r| r.values.iter())
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    /// Writes every artifact, one `<task>_summary.txt` per task and
    /// `report.txt`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        for r in &self.records {
            for (file, content) in &r.artifacts {
                io::write_text(dir, file, content)?;
            }
            io::write_text(dir, &format!("{}_summary.txt", r.name), &r.summary())?;
        }
        let mut text = self.lines().join("\n");
        text.push('\n');
        io::write_text(dir, "report.txt", &text)
    }
}

fn status_name(s: ExitStatus) -> &'static str {
    match s {
        ExitStatus::Success => "ok",
        ExitStatus::ConfigInvalid => "config invalid",
        ExitStatus::GammaInfeasible => "gamma infeasible",
        ExitStatus::InvariantViolation => "invariant violation",
    }
}

/// A validated experiment.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub problem: ProblemConfig,
    pub grid: RadialGrid,
}

fn invalid(e: Error) -> Error {
    match e {
        Error::InvalidArgument(m) => Error::InvalidConfig(m),
        other => other,
    }
}

fn shell(name: &str, s: [f64; 2]) -> Result<Annulus> {
    Annulus::new(s[0], s[1]).map_err(|e| Error::InvalidConfig(format!("{name}: {e}")))
}

impl Experiment {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        Self::from_config(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn from_config(config: ExperimentConfig) -> Result<Self> {
        let pb = &config.problem;
        if config.tasks.is_empty() {
            return Err(Error::InvalidConfig("task list is empty".into()));
        }
        let h_n = hardy_constant(pb.dim).map_err(invalid)?;
        let lambda = match (pb.lambda, pb.lambda_ratio, pb.critical) {
            (Some(_), Some(_), _) => {
                return Err(Error::InvalidConfig(
                    "give either lambda or lambda_ratio, not both".into(),
                ))
            }
            (Some(l), None, _) => l,
            (None, Some(q), _) => q * h_n,
            (None, None, true) => h_n,
            (None, None, false) => {
                return Err(Error::InvalidConfig("lambda or lambda_ratio is required".into()))
            }
        };
        // λ = H_N · 1 may round off by an ulp; snap it for the critical path
        let lambda = if pb.critical && (lambda - h_n).abs() <= 1e-12 * h_n {
            h_n
        } else {
            lambda
        };
        let criticality = if pb.critical {
            Criticality::Critical {
                epsilon: config.critical.epsilon,
            }
        } else {
            Criticality::Subcritical
        };
        let problem = ProblemConfig {
            dim: pb.dim,
            radius: pb.radius,
            lambda,
            a0: pb.a0,
            omega0_set: shell("omega0", config.sets.omega0)?,
            omega_c_set: shell("omega_c", config.sets.omega_c)?,
            omega1_set: shell("omega1", config.sets.omega1)?,
            actuator: config.actuator.clone(),
            convection: config.convection.clone(),
            gamma: pb.gamma,
            criticality,
        };
        problem.validate()?;
        if config.critical.eps_list.iter().any(|e| !(*e > 0.0)) {
            return Err(Error::InvalidConfig("eps_list entries must be positive".into()));
        }
        if let Some(p) = config.critical.p {
            if !(1.0..2.0).contains(&p) {
                return Err(Error::InvalidConfig(format!("p must lie in [1, 2), got {p}")));
            }
        }
        let grid = RadialGrid::new(pb.dim, pb.radius, config.grid.nodes).map_err(invalid)?;
        Ok(Self {
            config,
            problem,
            grid,
        })
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.config.seed = seed;
        self
    }

    pub fn with_eps_list(mut self, eps: Vec<f64>) -> Result<Self> {
        if eps.is_empty() || eps.iter().any(|e| !(*e > 0.0)) {
            return Err(Error::InvalidConfig("eps_list entries must be positive".into()));
        }
        self.config.critical.eps_list = eps;
        Ok(self)
    }

    pub fn with_tasks(mut self, tasks: Vec<Task>) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::InvalidConfig("task list is empty".into()));
        }
        self.config.tasks = tasks;
        Ok(self)
    }

    fn improved_p(&self) -> f64 {
        let n = self.problem.dim as f64;
        self.config.critical.p.unwrap_or(2.0 * n / (n + 1.0))
    }

    /// Requested tasks plus their prerequisites, in dependency order.
    pub fn schedule(&self) -> Vec<Task> {
        let mut tasks = self.config.tasks.clone();
        let needs_solution = tasks
            .iter()
            .any(|t| matches!(t, Task::Hinf | Task::Simulate | Task::Kernel));
        if needs_solution {
            tasks.push(Task::Synthesize);
        }
        if tasks.contains(&Task::Simulate) {
            tasks.push(Task::Hinf);
        }
        tasks.sort();
        tasks.dedup();
        tasks
    }

    fn header(&self) -> MatrixHeader {
        MatrixHeader {
            n: self.grid.len(),
            dim: self.problem.dim,
            radius: self.problem.radius,
            lambda: self.problem.lambda,
        }
    }

    /// Runs the pipeline. Never panics on numerical failure: errors end the
    /// run and map to an exit status.
    pub fn run(&self) -> RunReport {
        let mut records = Vec::new();
        let err = self.run_tasks(&mut records).err();
        RunReport::finish(&self.config.name, records, err)
    }

    fn run_tasks(&self, records: &mut Vec<TaskRecord>) -> Result<()> {
        let tasks = self.schedule();
        if self.problem.is_critical() || tasks.contains(&Task::CriticalSweep) {
            let (rec, passed) = self.critical_gate()?;
            records.push(rec);
            if !passed {
                return Err(Error::InvalidConfig(
                    "convection too large for the improved Hardy inequality".into(),
                ));
            }
        }
        let sys = operators::assemble(&self.grid, &self.problem)?;
        let mut solution: Option<RiccatiSolution> = None;
        let mut norm: Option<HinfResult> = None;
        for task in tasks {
            let rec = match task {
                Task::Hardy => self.task_hardy()?,
                Task::Accretivity => self.task_accretivity(&sys)?,
                Task::Synthesize => {
                    let (rec, sol) = self.task_synthesize(&sys)?;
                    solution = Some(sol);
                    rec
                }
                Task::Hinf => {
                    let sol = solution.as_ref().expect("scheduled after synthesize");
                    let (rec, res) = self.task_hinf(&sys, sol)?;
                    norm = Some(res);
                    rec
                }
                Task::Simulate => {
                    let sol = solution.as_ref().expect("scheduled after synthesize");
                    let res = norm.as_ref().expect("scheduled after hinf");
                    self.task_simulate(&sys, sol, res)?
                }
                Task::Detectability => self.task_detectability(&sys)?,
                Task::Kernel => {
                    let sol = solution.as_ref().expect("scheduled after synthesize");
                    self.task_kernel(&sys, sol)?
                }
                Task::CriticalSweep => self.task_critical_sweep()?,
            };
            records.push(rec);
        }
        Ok(())
    }

    /// Improved-Hardy constant with refinement drift, and the strict
    /// smallness gate on `‖v‖_∞`.
    pub fn improved_estimate(&self) -> Result<ImprovedHardyEstimate> {
        let p = self.improved_p();
        let n = self.config.critical.estimate_nodes.unwrap_or(self.grid.len());
        let fine = RadialGrid::new(self.problem.dim, self.problem.radius, n).map_err(invalid)?;
        let coarse =
            RadialGrid::new(self.problem.dim, self.problem.radius, (n / 2).max(4)).map_err(invalid)?;
        let est = hardy::improved_hardy_constant(&fine, p)?;
        let coarse_est = hardy::improved_hardy_constant(&coarse, p)?;
        Ok(hardy::with_refinement_drift(est, &coarse_est))
    }

    fn critical_gate(&self) -> Result<(TaskRecord, bool)> {
        let est = self.improved_estimate()?;
        let v_max = self.problem.v_max();
        let passed = hardy::passes_critical_gate(v_max, &est);
        let mut rec = TaskRecord::new("gate");
        rec.num("p", est.p);
        rec.num("c_improved", est.c_est);
        rec.num("c_embed", est.c_embed);
        rec.num("drift", est.drift);
        rec.num("c0", est.c0_est);
        rec.num("v_max", v_max);
        rec.check(Check::new(
            "convection smallness gate ||v||_inf < C0",
            passed,
            format!("v_max={v_max:.6e}, C0={:.6e}, p={}", est.c0_est, est.p),
        ));
        Ok((rec, passed))
    }

    fn task_hardy(&self) -> Result<TaskRecord> {
        let mut rec = TaskRecord::new(Task::Hardy.name());
        let rep = hardy::hardy_report(self.problem.dim, self.problem.radius, &self.config.hardy.sizes)?;
        let rel = rep.relative_error();
        rec.check(Check::new(
            "Hardy constant extrapolation within 5%",
            rel <= 0.05,
            format!("limit={:.6e}, H_N={:.6e}, rel={rel:.3e}", rep.extrapolated, rep.target),
        ));
        let decreasing = rep.refinement_trend.windows(2).all(|w| w[1].1 < w[0].1);
        let above = rep.refinement_trend.iter().all(|(_, mu)| *mu >= rep.target);
        rec.check(Check::new(
            "discrete Hardy minimum decreases to H_N from above",
            decreasing && above,
            format!("finest={:.6e}, gap={:.3e}", rep.lambda_min, rep.gap),
        ));
        let est = hardy::improved_hardy_constant(&self.grid, self.improved_p())?;
        rec.check(Check::new(
            "improved Hardy constant positive",
            est.c_est > 0.0 && est.c_est.is_finite(),
            format!("C(p)={:.6e}, p={}", est.c_est, est.p),
        ));
        rec.num("extrapolated", rep.extrapolated);
        rec.num("lambda_min", rep.lambda_min);
        rec.num("gap", rep.gap);
        rec.num("relative_error", rel);
        rec.num("improved_constant", est.c_est);
        rec.num("embedding_constant", est.c_embed);
        rec.value("improved_converged", est.converged);
        let mut csv = rep.csv_rows();
        csv.push_str(&est.csv_row(&self.grid));
        rec.artifact("hardy.csv".into(), csv);
        Ok(rec)
    }

    fn task_accretivity(&self, sys: &DiscreteSystem) -> Result<TaskRecord> {
        let sim = &self.config.simulation;
        let mut rec = TaskRecord::new(Task::Accretivity.name());
        let omega = sys.omega0 + 0.1;
        let sampled = operators::accretivity_margin(sys, omega, sim.accretivity_trials, self.config.seed)?;
        rec.check(Check::new(
            "accretivity estimate at omega0 + 0.1",
            sampled >= -1e-10,
            format!("min margin={sampled:.6e} over {} trials", sim.accretivity_trials),
        ));
        let tol = 1e-10 * linalg::spectral_norm(&sys.a).max(1.0);
        let exact = operators::accretivity_margin_exact(sys)?;
        rec.check(Check::new(
            "accretivity estimate, exact minimum",
            exact >= -tol,
            format!("margin={exact:.6e}"),
        ));
        let pencil = operators::hardy_pencil_margin(sys)?;
        rec.check(Check::new(
            "Hardy-deficit lower bound on the grid",
            pencil >= -tol,
            format!("margin={pencil:.6e}"),
        ));
        let sigma0 = sys.omega0 + self.problem.divv_max();
        let probes = semigroup::vertical_probes(sigma0, &[0.5, 1.0, 2.0], sim.probe_im_max, sim.probes_per_line);
        let res = semigroup::resolvent_bound_check(sys, sigma0, &probes, 8, self.config.seed, true)?;
        rec.check(Check::new(
            "resolvent sector bound",
            res.bounded(10.0),
            format!("M={:.4e}, tail growth={:.4}", res.m_hat, res.growth),
        ));
        rec.num("omega0", sys.omega0);
        rec.num("sampled_margin", sampled);
        rec.num("exact_margin", exact);
        rec.num("hardy_pencil_margin", pencil);
        rec.num("sigma0", sigma0);
        rec.num("resolvent_m_hat", res.m_hat);
        rec.num("resolvent_tail_growth", res.growth);
        let mut csv = String::from("re_offset,im,scaled_norm\n");
        for (re, im, v) in &res.probes {
            csv.push_str(&format!("{re:.6e},{im:.6e},{v:.12e}\n"));
        }
        rec.artifact("accretivity_resolvent.csv".into(), csv);
        Ok(rec)
    }

    fn task_synthesize(&self, sys: &DiscreteSystem) -> Result<(TaskRecord, RiccatiSolution)> {
        let gamma = self.problem.gamma;
        let mut rec = TaskRecord::new(Task::Synthesize.name());
        let ham = riccati::solve_gare_hamiltonian(sys, gamma)?;
        let newton = riccati::solve_gare_newton(sys, gamma, None)?;
        let pn = ham.p.norm();
        let agree = if pn > 0.0 { (&ham.p - &newton.p).norm() / pn } else { newton.p.norm() };
        rec.check(Check::new(
            "Riccati solvers agree (Hamiltonian vs Newton)",
            agree <= 1e-6,
            format!("relative Frobenius difference={agree:.3e}"),
        ));
        for (label, sol) in [
            ("Riccati residual, Hamiltonian solution", &ham),
            ("Riccati residual, Newton solution", &newton),
        ] {
            let scale = riccati::residual_scale(sys, &sol.p);
            let rel = if scale > 0.0 { sol.residual / scale } else { sol.residual };
            rec.check(Check::new(label, rel <= 1e-8, format!("relative residual={rel:.3e}")));
        }
        rec.check(Check::new(
            "P positive semidefinite",
            ham.psd_min >= -1e-8 * linalg::spectral_norm(&ham.p),
            format!("min eigenvalue={:.3e}", ham.psd_min),
        ));
        rec.check(Check::new(
            "Lambda_P exponentially stable",
            ham.abscissa_lp < 0.0,
            format!("abscissa={:.6e}", ham.abscissa_lp),
        ));
        rec.check(Check::new(
            "closed loop A + B2 F exponentially stable",
            ham.abscissa_lp1 < 0.0,
            format!("abscissa={:.6e}", ham.abscissa_lp1),
        ));
        rec.num("gamma", gamma);
        rec.num("residual", ham.residual);
        rec.num("method_agreement", agree);
        rec.num("abscissa_lambda_p", ham.abscissa_lp);
        rec.num("abscissa_closed_loop", ham.abscissa_lp1);
        rec.num("psd_min", ham.psd_min);
        rec.value("newton_iterations", newton.iterations);
        rec.artifact("synthesize_P.csv".into(), io::matrix_csv(&ham.p, self.header()));
        // u = Σ w_i g_i y_i for nodal y
        let sm = sys.sqrt_mass();
        let mut csv = String::from("r,gain\n");
        for (i, r) in self.grid.nodes().iter().enumerate() {
            csv.push_str(&format!("{r:.12e},{:.12e}\n", ham.feedback[i] / sm[i]));
        }
        rec.artifact("synthesize_feedback.csv".into(), csv);
        Ok((rec, ham))
    }

    fn task_hinf(&self, sys: &DiscreteSystem, sol: &RiccatiSolution) -> Result<(TaskRecord, HinfResult)> {
        let gamma = self.problem.gamma;
        let mut rec = TaskRecord::new(Task::Hinf.name());
        let (bis, sweep, rel, abscissa) = closed_loop_norm(sys, &sol.feedback)?;
        let bis = bis.with_target(gamma);
        rec.check(Check::new(
            "closed-loop H-infinity norm below gamma",
            bis.passed() == Some(true),
            format!("norm={:.9e}, gamma={gamma}, margin={:.6e}", bis.norm, gamma - bis.norm),
        ));
        rec.check(Check::new(
            "H-infinity norm, bisection vs frequency sweep",
            rel <= 1e-3,
            format!("bisection={:.9e}, sweep={:.9e}, rel={rel:.3e}", bis.norm, sweep.norm),
        ));
        rec.num("norm", bis.norm);
        rec.num("margin", gamma - bis.norm);
        rec.num("peak_frequency", bis.peak_freq);
        rec.num("sweep_norm", sweep.norm);
        rec.num("closed_loop_abscissa", abscissa);
        rec.value("method", format!("{:?}", bis.method));
        rec.artifact("hinf_response.csv".into(), sweep.response_csv());
        Ok((rec, bis))
    }

    fn smooth_state(&self, sys: &DiscreteSystem) -> DVector<f64> {
        let r2 = self.problem.radius.powi(2);
        let y = sys.to_symmetric(&self.grid.sample(|r| r2 - r * r));
        let n = y.norm();
        y / n
    }

    fn task_simulate(
        &self,
        sys: &DiscreteSystem,
        sol: &RiccatiSolution,
        norm: &HinfResult,
    ) -> Result<TaskRecord> {
        let mut rec = TaskRecord::new(Task::Simulate.name());
        let rate = sol.abscissa_lp1.abs();
        let cfg = StepConfig::for_rate(rate, self.config.simulation.max_steps)?;
        let y0 = self.smooth_state(sys);
        let trace = semigroup::step_closed_loop(sys, Some(&sol.feedback), None, &y0, cfg)?;
        let alpha = trace.decay_fit.map_or(f64::NAN, |f| f.alpha);
        rec.check(Check::new(
            "closed-loop decay rate matches spectral abscissa within 20%",
            alpha > 0.0 && (alpha - rate).abs() <= 0.2 * rate,
            format!("fitted alpha={alpha:.6e}, |abscissa|={rate:.6e}"),
        ));
        let lib = semigroup::disturbance_library(sys, &sol.feedback, norm.peak_freq, cfg, self.config.seed)?;
        let gains = semigroup::empirical_gain(sys, Some(&sol.feedback), &lib, cfg)?;
        let g_max = semigroup::max_gain(&gains);
        let worst = gains.last().map_or(0.0, |g| g.1);
        rec.check(Check::new(
            "time-domain gain within 1.05 x H-infinity norm",
            g_max <= 1.05 * norm.norm,
            format!("max gain={g_max:.6e}, norm={:.6e}", norm.norm),
        ));
        rec.check(Check::new(
            "worst-case disturbance reaches 0.9 x H-infinity norm",
            worst >= 0.9 * norm.norm,
            format!("gain={worst:.6e}, norm={:.6e}", norm.norm),
        ));
        rec.num("decay_rate", alpha);
        rec.num("abscissa_rate", rate);
        rec.num("max_gain", g_max);
        rec.num("worst_case_gain", worst);
        rec.num("dt", cfg.dt);
        rec.num("horizon", cfg.horizon);
        rec.artifact("simulate_trace.csv".into(), trace.csv());
        let mut csv = String::from("disturbance,gain\n");
        for (label, g) in &gains {
            csv.push_str(&format!("{label},{g:.12e}\n"));
        }
        rec.artifact("simulate_gains.csv".into(), csv);
        Ok(rec)
    }

    fn task_detectability(&self, sys: &DiscreteSystem) -> Result<TaskRecord> {
        let sim = &self.config.simulation;
        let mut rec = TaskRecord::new(Task::Detectability.name());
        let k = sys.omega0 + sim.injection_offset;
        let horizon = 20.0 / sim.injection_offset;
        let cfg = StepConfig::new(horizon / 20_000.0, horizon)?;
        let y0 = self.smooth_state(sys);
        let rep = semigroup::detectability_experiment(sys, k, &y0, cfg)?;
        rec.check(Check::new(
            "Datko integral under output injection within 1.05 x bound",
            rep.passed,
            format!("integral={:.6e}, bound={:.6e}, k={k}", rep.integral, rep.bound),
        ));
        let coarse = StepConfig::new(horizon / 4000.0, horizon)?;
        let longer = StepConfig::new(coarse.dt, 2.0 * horizon)?;
        let c1 = semigroup::i2_integral_check(sys, k, sim.adjoint_samples, coarse, self.config.seed)?;
        let c2 = semigroup::i2_integral_check(sys, k, sim.adjoint_samples, longer, self.config.seed)?;
        let drift = if c1 > 0.0 { (c2 - c1).abs() / c1 } else { c2 };
        rec.check(Check::new(
            "adjoint actuator integral finite and stable as T doubles",
            c1.is_finite() && drift <= 1e-2,
            format!("max integral={c1:.6e}, change under doubling={drift:.3e}"),
        ));
        rec.num("k", k);
        rec.num("integral", rep.integral);
        rec.num("bound", rep.bound);
        rec.num("adjoint_integral", c1);
        rec.artifact("detectability_trace.csv".into(), rep.trace.csv());
        Ok(rec)
    }

    fn task_kernel(&self, sys: &DiscreteSystem, sol: &RiccatiSolution) -> Result<TaskRecord> {
        let grid = &self.grid;
        let n = grid.len();
        let mut rec = TaskRecord::new(Task::Kernel.name());
        let km = kernel::kernel_from_p(grid, &sol.p)?;
        let pmax = sol.p.amax();
        let round_trip = if pmax > 0.0 { (&km.to_symmetric_matrix() - &sol.p).amax() / pmax } else { 0.0 };
        let mut rng = linalg::rng(self.config.seed);
        let mut apply_err: f64 = 0.0;
        for _ in 0..10 {
            let phi = linalg::random_unit(&mut rng, n);
            let direct = sys.to_nodal(&(&sol.p * sys.to_symmetric(&phi)));
            let quad = km.apply(&phi);
            let scale = direct.norm();
            if scale > 0.0 {
                apply_err = apply_err.max((&direct - &quad).norm() / scale);
            }
        }
        rec.check(Check::new(
            "kernel round trip P <-> P0",
            round_trip <= 1e-12 && apply_err <= 1e-12,
            format!("matrix={round_trip:.3e}, quadrature={apply_err:.3e}"),
        ));
        let b = sys.to_nodal(&sys.b2);
        let mut fb_err: f64 = 0.0;
        for _ in 0..20 {
            let y = linalg::random_unit(&mut rng, n);
            let matrix = sol.feedback.dot(&sys.to_symmetric(&y));
            let from_kernel = kernel::feedback_from_kernel(&km, &b, &y);
            let scale = matrix.abs();
            if scale > 0.0 {
                fb_err = fb_err.max((matrix - from_kernel).abs() / scale);
            } else {
                fb_err = fb_err.max(from_kernel.abs());
            }
        }
        rec.check(Check::new(
            "feedback from kernel matches matrix feedback",
            fb_err <= 1e-10,
            format!("max relative difference={fb_err:.3e}"),
        ));
        let tests = kernel::dirichlet_modes(grid, 10.min(n))?;
        let weak = kernel::kernel_weak_residual(&km, sys, self.problem.gamma, &tests)?;
        rec.check(Check::new(
            "kernel equation weak residual",
            weak <= 1e-6,
            format!("relative residual={weak:.3e}"),
        ));
        let kc = kernel::kernel_checks(grid, &km);
        rec.check(Check::new(
            "kernel symmetry",
            kc.symmetric,
            format!("defect={:.3e}", kc.symmetry_defect),
        ));
        rec.check(Check::new(
            "kernel vanishes at the boundary",
            kc.boundary_ok,
            format!(
                "outer ratio={:.3e}, limit={:.3e}",
                kc.boundary_ratio,
                kernel::BOUNDARY_CONSTANT * kc.spacing
            ),
        ));
        rec.check(Check::reported(
            "kernel pointwise nonnegative",
            kc.nonnegative,
            format!("negativity={:.3e}", kc.negativity),
        ));
        rec.num("round_trip", round_trip);
        rec.num("feedback_difference", fb_err);
        rec.num("weak_residual", weak);
        rec.num("symmetry_defect", kc.symmetry_defect);
        rec.num("boundary_ratio", kc.boundary_ratio);
        rec.num("negativity", kc.negativity);
        rec.artifact("kernel_P0.csv".into(), km.csv());
        Ok(rec)
    }

    /// The configuration at `λ = H_N` with regularization `eps`.
    pub fn critical_variant(&self, eps: f64) -> ProblemConfig {
        ProblemConfig {
            lambda: self.problem.hardy_constant(),
            criticality: Criticality::Critical { epsilon: eps },
            ..self.problem.clone()
        }
    }

    fn task_critical_sweep(&self) -> Result<TaskRecord> {
        let gamma = self.problem.gamma;
        let eps_list = &self.config.critical.eps_list;
        let mut rec = TaskRecord::new(Task::CriticalSweep.name());
        let mut rows = Vec::new();
        let mut ps: Vec<DMatrix<f64>> = Vec::new();
        let mut traces = Vec::new();
        let mut step_cfg: Option<StepConfig> = None;
        let mut all_below = true;
        let mut all_agree = true;
        let mut last_sys = None;
        for &eps in eps_list {
            let cfg = self.critical_variant(eps);
            let sys = operators::assemble(&self.grid, &cfg)?;
            let sol = riccati::solve_gare_hamiltonian(&sys, gamma)?;
            let (bis, _, rel, _) = closed_loop_norm(&sys, &sol.feedback)?;
            all_below &= bis.norm < gamma;
            all_agree &= rel <= 1e-3;
            let sc = match step_cfg {
                Some(c) => c,
                None => {
                    let horizon = 5.0 / sol.abscissa_lp1.abs();
                    let c = StepConfig::new(horizon / 2000.0, horizon)?;
                    step_cfg = Some(c);
                    c
                }
            };
            let y0 = self.smooth_state(&sys);
            traces.push(semigroup::step_closed_loop(&sys, Some(&sol.feedback), None, &y0, sc)?);
            rows.push((eps, bis.norm, rel, sol.residual));
            ps.push(sol.p);
            last_sys = Some(sys);
        }
        let diffs: Vec<f64> = ps.windows(2).map(|w| (&w[1] - &w[0]).norm() / w[1].norm()).collect();
        let tdist: Vec<f64> = traces.windows(2).map(|w| semigroup::trace_distance(&w[0], &w[1])).collect();
        let cauchy = !diffs.is_empty() && diffs.windows(2).all(|w| w[1] < w[0]);
        rec.check(Check::new(
            "regularized Riccati solutions form a Cauchy sequence",
            cauchy,
            format!("successive differences={}", list(&diffs)),
        ));
        rec.check(Check::new(
            "regularized closed loops: H-infinity norm below gamma",
            all_below,
            format!("norms={}", list(&rows.iter().map(|r| r.1).collect::<Vec<_>>())),
        ));
        rec.check(Check::new(
            "regularized closed loops: bisection vs sweep",
            all_agree,
            format!("max rel={:.3e}", rows.iter().map(|r| r.2).fold(0.0, f64::max)),
        ));
        let beta = log_slope(&eps_list[1..], &tdist);
        rec.check(Check::new(
            "regularized trajectories converge as epsilon halves",
            beta.is_some_and(|b| b > 0.0),
            format!("trace distances={}, fitted exponent={:.3}", list(&tdist), beta.unwrap_or(f64::NAN)),
        ));
        if let Some(sys) = &last_sys {
            let sim = &self.config.simulation;
            let sigma0 = sys.omega0 + self.problem.divv_max();
            let probes = semigroup::vertical_probes(sigma0, &[0.5, 1.0, 2.0], sim.probe_im_max, sim.probes_per_line);
            let res = semigroup::resolvent_bound_check(sys, sigma0, &probes, 8, self.config.seed, true)?;
            rec.check(Check::new(
                "resolvent sector bound at the smallest epsilon",
                res.bounded(10.0),
                format!("M={:.4e}, tail growth={:.4}", res.m_hat, res.growth),
            ));
            rec.num("resolvent_m_hat", res.m_hat);
        }
        let mut csv = String::from("epsilon,norm,bisection_sweep_gap,residual,p_difference,trace_distance\n");
        for (k, (eps, nrm, rel, res)) in rows.iter().enumerate() {
            let d = if k > 0 { format!("{:.12e}", diffs[k - 1]) } else { String::new() };
            let t = if k > 0 { format!("{:.12e}", tdist[k - 1]) } else { String::new() };
            csv.push_str(&format!("{eps:.6e},{nrm:.12e},{rel:.6e},{res:.6e},{d},{t}\n"));
        }
        rec.value("eps_list", list(eps_list));
        rec.value("p_differences", list(&diffs));
        rec.value("trace_distances", list(&tdist));
        rec.artifact("critical_sweep.csv".into(), csv);
        Ok(rec)
    }

    /// Smallest feasible `γ` for the configured system, bracketed around the
    /// configured level.
    pub fn gamma_opt(&self) -> RunReport {
        let mut records = Vec::new();
        let err = self.gamma_opt_inner(&mut records).err();
        RunReport::finish(&self.config.name, records, err)
    }

    fn gamma_opt_inner(&self, records: &mut Vec<TaskRecord>) -> Result<()> {
        if self.problem.is_critical() {
            let (rec, passed) = self.critical_gate()?;
            records.push(rec);
            if !passed {
                return Err(Error::InvalidConfig(
                    "convection too large for the improved Hardy inequality".into(),
                ));
            }
        }
        let sys = operators::assemble(&self.grid, &self.problem)?;
        let mut hi = self.problem.gamma;
        while !riccati::is_feasible(&sys, hi) {
            hi *= 2.0;
            if hi > 1e8 {
                return Err(Error::NoFeasibleGamma {
                    lo: self.problem.gamma,
                    hi,
                });
            }
        }
        let mut lo = 0.5 * hi;
        while riccati::is_feasible(&sys, lo) {
            hi = lo;
            lo *= 0.5;
            if lo < 1e-10 {
                return Err(Error::InvalidArgument(
                    "every level down to 1e-10 is feasible".into(),
                ));
            }
        }
        let g = riccati::gamma_opt(&sys, lo, hi, 1e-6 * hi)?;
        let mut rec = TaskRecord::new("gamma-opt");
        rec.check(Check::new(
            "gamma_opt bracket: upper end feasible, lower end infeasible",
            riccati::is_feasible(&sys, g) && !riccati::is_feasible(&sys, g - 1e-6 * hi),
            format!("gamma_opt={g:.9e}"),
        ));
        rec.check(Check::reported(
            "configured gamma above gamma_opt",
            self.problem.gamma >= g,
            format!("gamma={}, gamma_opt={g:.9e}", self.problem.gamma),
        ));
        rec.num("gamma_opt", g);
        rec.num("bracket_lo", lo);
        rec.num("bracket_hi", hi);
        rec.artifact(
            "gamma_opt.csv".into(),
            format!("gamma_opt,bracket_lo,bracket_hi\n{g:.12e},{lo:.12e},{hi:.12e}\n"),
        );
        records.push(rec);
        Ok(())
    }
}

/// Bisection and sweep norms of `A + B₂f`, their gap and the abscissa.
fn closed_loop_norm(
    sys: &DiscreteSystem,
    feedback: &DVector<f64>,
) -> Result<(HinfResult, HinfResult, f64, f64)> {
    let cl = hinf::close_loop_with(sys, feedback)?;
    let bis = hinf::hinf_norm_bisect(&cl, 1e-8)?;
    let sweep = hinf::hinf_norm_sweep(&cl, &hinf::default_frequencies(&cl))?;
    let rel = if bis.norm > 0.0 {
        (bis.norm - sweep.norm).abs() / bis.norm
    } else {
        sweep.norm
    };
    Ok((bis, sweep, rel, cl.abscissa))
}

fn list(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.4e}")).collect();
    format!("[{}]", parts.join(";"))
}

/// Least-squares slope of `ln y` against `ln x`.
fn log_slope(x: &[f64], y: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = x
        .iter()
        .zip(y)
        .filter(|(a, b)| **a > 0.0 && **b > 0.0)
        .map(|(a, b)| (a.ln(), b.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
name = "t"
tasks = ["synthesize"]
[grid]
nodes = 20
[problem]
dim = 3
lambda_ratio = 0.5
gamma = 2.0
[sets]
omega0 = [0.0, 0.5]
omega_c = [0.0, 0.9]
omega1 = [0.2, 0.7]
[actuator]
kind = "shell"
r_lo = 0.2
r_hi = 0.4
amplitude = 1.0
"#;

    #[test]
    fn parses_minimal_config_with_defaults() {
        let e = Experiment::from_toml(MINIMAL).unwrap();
        assert_eq!(e.config.seed, 42);
        assert_eq!(e.problem.lambda, 0.125);
        assert_eq!(e.config.hardy.sizes, vec![250, 500, 1000]);
        assert_eq!(e.grid.len(), 20);
    }

    #[test]
    fn rejects_bad_configs() {
        let over = MINIMAL.replace("lambda_ratio = 0.5", "lambda_ratio = 1.1");
        assert!(matches!(Experiment::from_toml(&over), Err(Error::InvalidConfig(_))));
        let both = MINIMAL.replace("lambda_ratio = 0.5", "lambda_ratio = 0.5\nlambda = 0.1");
        assert!(matches!(Experiment::from_toml(&both), Err(Error::InvalidConfig(_))));
        let unknown = MINIMAL.replace("gamma = 2.0", "gamma = 2.0\ngama = 3.0");
        assert!(matches!(Experiment::from_toml(&unknown), Err(Error::InvalidConfig(_))));
        let empty = MINIMAL.replace("tasks = [\"synthesize\"]", "tasks = []");
        assert!(matches!(Experiment::from_toml(&empty), Err(Error::InvalidConfig(_))));
        let nesting = MINIMAL.replace("omega0 = [0.0, 0.5]", "omega0 = [0.0, 0.95]");
        assert!(matches!(Experiment::from_toml(&nesting), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn schedule_adds_prerequisites_in_order() {
        let e = Experiment::from_toml(MINIMAL)
            .unwrap()
            .with_tasks(vec![Task::Kernel, Task::Simulate, Task::Hardy])
            .unwrap();
        assert_eq!(
            e.schedule(),
            vec![Task::Hardy, Task::Synthesize, Task::Hinf, Task::Simulate, Task::Kernel]
        );
    }

    #[test]
    fn infeasible_gamma_maps_to_exit_3() {
        let e = Experiment::from_toml(&MINIMAL.replace("gamma = 2.0", "gamma = 0.01")).unwrap();
        let rep = e.run();
        assert_eq!(rep.exit_code(), 3, "{:?}", rep.lines());
    }

    #[test]
    fn synthesize_only_run_passes() {
        let rep = Experiment::from_toml(MINIMAL).unwrap().run();
        assert_eq!(rep.exit_code(), 0, "{:?}", rep.lines());
        assert!(rep.lines().iter().any(|l| l.contains("Riccati solvers agree") && l.contains("PASS")));
    }

    #[test]
    fn slug_and_log_slope() {
        assert_eq!(slug("P positive semidefinite"), "p_positive_semidefinite");
        let x = [1.0, 0.5, 0.25];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powf(1.5)).collect();
        assert!((log_slope(&x, &y).unwrap() - 1.5).abs() < 1e-12);
    }
}
