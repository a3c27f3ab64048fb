//! End-to-end runs: protective and impulsive coupling, the compensation
//! diagnostic, ground-state checks and parameter scans. Each run returns a
//! serializable report whose `checks` carry the pass/fail verdicts.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::Serialize;

use crate::bohm::{
    self, pointer_factor_potential, quantum_potential, sample_quantum_equilibrium, total_force_field,
    EquivarianceCheck, Point, Trajectory, TrajectoryEnsemble,
};
use crate::config::{ResolvedEntry, RunConfig, SystemTrap};
use crate::error::{Error, Result};
use crate::fields::{gaussian_packet, make_uniform_grid, product_state, Axis, Grid1D, WaveFunction1D, WaveFunction2D};
use crate::model::{
    gaussian_d, pulse_adiabatic, pulse_impulsive, regularized_delta, CouplingMode, CouplingProfile, CouplingSpec,
    Hamiltonian, Masses, ProfileKind, PulseEnvelope, TrapKind, TrapSpec,
};
use crate::propagator::{
    adiabatic_overlap, conditional_ground_state, energy_curve, ground_state_1d, propagate, EigenMethod, EnergyCurve,
    GroundStateOptions, Observer, PropagateOptions, Schedule,
};

/// One pass/fail line of a report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub comparison: &'static str,
    pub threshold: f64,
    pub passed: bool,
}

impl Check {
    pub fn at_most(name: &str, value: f64, threshold: f64) -> Self {
        Self { name: name.into(), value, comparison: "<=", threshold, passed: value <= threshold }
    }

    pub fn at_least(name: &str, value: f64, threshold: f64) -> Self {
        Self { name: name.into(), value, comparison: ">=", threshold, passed: value >= threshold }
    }
}

pub fn all_passed(checks: &[Check]) -> bool {
    checks.iter().all(|c| c.passed)
}

fn relative(value: f64, reference: f64) -> f64 {
    (value - reference).abs() / reference.abs()
}

/// Everything a run needs, built from a config.
#[derive(Debug, Clone)]
pub struct Setup {
    pub ham: Hamiltonian,
    pub psi0: WaveFunction2D,
    pub system: WaveFunction1D,
    pub ground_energy: f64,
    pub pointer: WaveFunction1D,
    pub warnings: Vec<String>,
}

pub fn system_trap(cfg: &RunConfig) -> Result<TrapSpec> {
    let t = cfg.trap();
    match t.trap_kind {
        SystemTrap::Box => TrapSpec::infinite_box(t.L, t.trap_center),
        SystemTrap::Harmonic => TrapSpec::harmonic(t.omega, t.trap_center, Axis::System),
    }
}

pub fn grids(cfg: &RunConfig) -> Result<(Grid1D, Grid1D)> {
    let g = cfg.grid();
    Ok((make_uniform_grid(g.x_min, g.x_max, g.n_x)?, make_uniform_grid(g.X_min, g.X_max, g.n_X)?))
}

pub fn masses(cfg: &RunConfig) -> Result<Masses> {
    Masses::new(cfg.mass().m, cfg.mass().M)
}

pub fn coupling_spec(cfg: &RunConfig, mode: CouplingMode, grid_x: &Grid1D) -> Result<CouplingSpec> {
    let c = cfg.coupling();
    let m = masses(cfg)?;
    match mode {
        CouplingMode::Protective => {
            CouplingSpec::protective(regularized_delta(grid_x, c.epsilon)?, pulse_adiabatic(c.T, c.A)?, m)
        }
        CouplingMode::Impulsive => {
            CouplingSpec::impulsive(gaussian_d(grid_x, c.w, c.D_center)?, pulse_impulsive(c.tau)?, c.P0, m)
        }
    }
}

/// Builds the Hamiltonian and the product initial state. The system factor
/// is the trap ground state from the direct tridiagonal solver, which makes
/// it an eigenvector of the discrete operator to machine precision.
pub fn build_setup(cfg: &RunConfig, mode: CouplingMode) -> Result<Setup> {
    let (gx, gp) = grids(cfg)?;
    let spec = coupling_spec(cfg, mode, &gx)?;
    let trap = system_trap(cfg)?;
    let ham = Hamiltonian::new(spec, trap, TrapSpec::free(Axis::Pointer), gx, gp)?;
    let opts = GroundStateOptions { method: EigenMethod::Direct, ..Default::default() };
    let (system, ground_energy) = ground_state_1d(&trap, &gx, cfg.mass().m, None, &opts)?;
    let p = cfg.pointer();
    let pointer = gaussian_packet(&gp, p.X0, p.width, p.p0)?;
    let psi0 = product_state(&system, &pointer)?;
    let mut warnings = Vec::new();
    if cfg.trap().check_adiabatic_margin && mode == CouplingMode::Protective {
        if let Some(margin) = ham.adiabatic_margin() {
            if margin >= 1.0 {
                let msg = format!("coupling reaches {margin:.3} times the first excitation energy on this grid");
                log::warn!("{msg}");
                warnings.push(msg);
            }
        }
    }
    Ok(Setup { ham, psi0, system, ground_energy, pointer, warnings })
}

/// Conditional ground energy and `dE/dX = s ⟨ψ_γ|profile|ψ_γ⟩` at one pointer position.
pub fn conditional_slope(ham: &Hamiltonian, pointer_x: f64, strength: f64) -> Result<(f64, f64, WaveFunction1D)> {
    let opts = GroundStateOptions { method: EigenMethod::Direct, ..Default::default() };
    let profile = &ham.coupling.profile;
    let (psi, e) = conditional_ground_state(pointer_x, strength, &ham.system_trap, profile, ham.masses().system, &opts)?;
    let h = profile.grid.spacing();
    let expectation: f64 = psi.amplitudes.iter().zip(&profile.values).map(|(a, p)| a.norm_sqr() * p).sum::<f64>() * h;
    Ok((e, strength * expectation, psi))
}

/// `Q_x` of a real 1D state, `-(1/2m) ψ''/ψ`, on its interior nodes.
fn quantum_potential_1d(psi: &WaveFunction1D, mass: f64) -> Vec<f64> {
    let a: Vec<f64> = psi.amplitudes.iter().map(|c| c.norm()).collect();
    let h = psi.grid.spacing();
    (0..a.len())
        .map(|j| {
            if j == 0 || j + 1 == a.len() || a[j] == 0.0 {
                f64::NAN
            } else {
                -(a[j + 1] - 2.0 * a[j] + a[j - 1]) / (2.0 * mass * h * h * a[j])
            }
        })
        .collect()
}

fn nearest_node(grid: &Grid1D, x: f64) -> usize {
    (((x - grid.min) / grid.spacing()).round().max(0.0) as usize).min(grid.n - 1)
}

/// Classical pointer driven by the adiabatic force `-dE/dX(X, f(t))`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PointerOracle {
    pub times: Vec<f64>,
    #[serde(rename = "X")]
    pub position: Vec<f64>,
    pub momentum: Vec<f64>,
}

impl PointerOracle {
    pub fn at(&self, t: f64) -> (f64, f64) {
        let i = self.times.partition_point(|&s| s < t - 1e-12).min(self.times.len() - 1);
        (self.position[i], self.momentum[i])
    }
}

/// `dE/dX` as a function of `s = f X` only: `g(s) = ⟨ψ_γ|δ_ε|ψ_γ⟩`, tabulated
/// from an energy curve at `f_max`.
pub struct SlopeTable {
    curve: Option<EnergyCurve>,
}

impl SlopeTable {
    pub fn new(ham: &Hamiltonian, f_max: f64, x_reach: f64) -> Result<Self> {
        if f_max == 0.0 {
            return Ok(Self { curve: None });
        }
        let n = 41;
        let xs: Vec<f64> = (0..n).map(|i| -x_reach + 2.0 * x_reach * i as f64 / (n - 1) as f64).collect();
        let curve = energy_curve(
            &xs,
            f_max,
            &ham.system_trap,
            &ham.coupling.profile,
            ham.masses().system,
            EigenMethod::ImaginaryTime,
        )?;
        Ok(Self { curve: Some(curve) })
    }

    pub fn curve(&self) -> Option<&EnergyCurve> {
        self.curve.as_ref()
    }

    /// `dE/dX` at pointer position `x` and coupling strength `f`.
    pub fn de_dx(&self, x: f64, f: f64) -> f64 {
        match &self.curve {
            None => 0.0,
            Some(c) => f * c.de_dx_at(f * x / c.f_frozen) / c.f_frozen,
        }
    }
}

/// Integrates `M Ẍ = -dE/dX(X, f(t))` with RK4 at step `dt`, sampling every step.
pub fn classical_pointer_oracle(
    table: &SlopeTable,
    pulse: &PulseEnvelope,
    mass: f64,
    x0: f64,
    p0: f64,
    t_end: f64,
    dt: f64,
) -> PointerOracle {
    let steps = (t_end / dt).round().max(1.0) as usize;
    let h = t_end / steps as f64;
    let rhs = |t: f64, x: f64, p: f64| (p / mass, -table.de_dx(x, pulse.value(t)));
    let (mut x, mut p) = (x0, p0);
    let mut out = PointerOracle { times: vec![0.0], position: vec![x], momentum: vec![p] };
    for k in 0..steps {
        let t = k as f64 * h;
        let k1 = rhs(t, x, p);
        let k2 = rhs(t + 0.5 * h, x + 0.5 * h * k1.0, p + 0.5 * h * k1.1);
        let k3 = rhs(t + 0.5 * h, x + 0.5 * h * k2.0, p + 0.5 * h * k2.1);
        let k4 = rhs(t + h, x + h * k3.0, p + h * k3.1);
        x += h / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0);
        p += h / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1);
        out.times.push(if k + 1 == steps { t_end } else { (k + 1) as f64 * h });
        out.position.push(x);
        out.momentum.push(p);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompensationRow {
    #[serde(rename = "X")]
    pub pointer_x: f64,
    pub tv_sum: f64,
    pub tv_coupling: f64,
    pub tv_ratio: f64,
    pub max_abs_fx: f64,
    pub max_abs_dvc: f64,
    pub fx_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompensationRecord {
    pub t: f64,
    pub f: f64,
    /// `"no-coupling"` when the coupling vanishes and the ratios are undefined.
    pub marker: Option<&'static str>,
    pub rows: Vec<CompensationRow>,
    pub tv_ratio: Option<f64>,
    pub fx_ratio: Option<f64>,
    /// `max |Q - Q_x[ψ_γ] - G| / |E1|` over the bulk.
    pub eq7_residual: f64,
    /// `(x, Q_x, V_c)` through the coupling region at the central row.
    pub profile: Vec<[f64; 3]>,
}

/// Along-`x` balance of the quantum potential against the coupling at the
/// pointer mean and at `± spread` around it.
pub fn compensation_diagnostic(psi: &WaveFunction2D, ham: &Hamiltonian, spread: f64, e_ground: f64) -> Result<CompensationRecord> {
    let t = psi.time;
    let pot = ham.potential(t);
    let f = pot.strength;
    let m = ham.masses();
    let q = quantum_potential(psi, m);
    let nx = psi.grid_x.n;
    let gx = psi.grid_x;
    let gp = psi.grid_pointer;
    let half_width = match ham.coupling.profile.kind {
        ProfileKind::RegularizedDelta { eps } => 5.0 * eps,
        ProfileKind::GaussianD { width, .. } => 5.0 * width,
    };
    let centre = match ham.coupling.profile.kind {
        ProfileKind::GaussianD { center, .. } => center,
        ProfileKind::RegularizedDelta { .. } => 0.0,
    };
    let region: Vec<usize> = (0..nx).filter(|&ix| (gx.point(ix) - centre).abs() <= half_width).collect();
    let mean_x = psi.position_mean(Axis::Pointer);
    let mut record = CompensationRecord {
        t,
        f,
        marker: None,
        rows: Vec::new(),
        tv_ratio: None,
        fx_ratio: None,
        eq7_residual: 0.0,
        profile: Vec::new(),
    };

    let centre_row = nearest_node(&gp, mean_x);
    for &ix in &region {
        let k = ix + nx * centre_row;
        record.profile.push([gx.point(ix), q.q_x[k], pot.coupling(ix, centre_row)]);
    }

    if f == 0.0 {
        record.marker = Some("no-coupling");
    } else {
        let forces = total_force_field(psi, ham, t);
        for target in [mean_x - spread, mean_x, mean_x + spread] {
            let ip = nearest_node(&gp, target);
            let usable: Vec<usize> = region.iter().copied().filter(|&ix| !q.mask[ix + nx * ip]).collect();
            let sum = |ix: usize| q.q_x[ix + nx * ip] + pot.coupling(ix, ip);
            let tv = |g: &dyn Fn(usize) -> f64| usable.windows(2).map(|w| (g(w[1]) - g(w[0])).abs()).sum::<f64>();
            let tv_sum = tv(&sum);
            let tv_coupling = tv(&|ix| pot.coupling(ix, ip));
            let max_abs_fx = usable
                .iter()
                .filter(|&&ix| !forces.mask[ix + nx * ip])
                .map(|&ix| forces.f_x[ix + nx * ip].abs())
                .fold(0.0, f64::max);
            let x_ptr = gp.point(ip);
            let max_abs_dvc = usable
                .iter()
                .map(|&ix| (f * x_ptr * ham.coupling.profile.derivative(gx.point(ix))).abs())
                .fold(0.0, f64::max);
            record.rows.push(CompensationRow {
                pointer_x: x_ptr,
                tv_sum,
                tv_coupling,
                tv_ratio: tv_sum / tv_coupling,
                max_abs_fx,
                max_abs_dvc,
                fx_ratio: max_abs_fx / max_abs_dvc,
            });
        }
        record.tv_ratio = record.rows.iter().map(|r| r.tv_ratio).reduce(f64::max);
        record.fx_ratio = record.rows.iter().map(|r| r.fx_ratio).reduce(f64::max);
    }

    // Factorized-approximation residual over the bulk of the density.
    let g = pointer_factor_potential(psi, m);
    let sigma = psi.position_variance(Axis::Pointer).sqrt();
    let rho_x = psi.marginal_density(Axis::System);
    let rho_max = rho_x.iter().cloned().fold(0.0, f64::max);
    let bulk_x: Vec<usize> = (0..nx).filter(|&ix| rho_x[ix] >= 0.1 * rho_max).collect();
    let rows: Vec<usize> = (0..gp.n).filter(|&ip| (gp.point(ip) - mean_x).abs() <= 2.0 * sigma).collect();
    let worst = rows
        .par_iter()
        .map(|&ip| -> Result<f64> {
            let (_, _, gamma) = conditional_slope(ham, gp.point(ip), f)?;
            let qg = quantum_potential_1d(&gamma, m.system);
            Ok(bulk_x
                .iter()
                .filter(|&&ix| !q.mask[ix + nx * ip])
                .map(|&ix| (q.total(ix + nx * ip) - qg[ix] - g[ip]).abs())
                .fold(0.0, f64::max))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    record.eq7_residual = worst / e_ground.abs();
    Ok(record)
}

/// `F_X` from the full field against `-dE/dX` at one `(X, t)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PointerForceSample {
    pub t: f64,
    #[serde(rename = "X")]
    pub pointer_x: f64,
    pub f: f64,
    /// Density-weighted mean over `x` of `F_X` with the pointer's own
    /// quantum force `-∂_X G` removed.
    pub force: f64,
    /// Same mean without removing `-∂_X G`.
    pub force_raw: f64,
    pub self_force: f64,
    pub minus_de_dx: f64,
    pub relative_error: f64,
}

pub fn pointer_force_sample(psi: &WaveFunction2D, ham: &Hamiltonian, ip: usize) -> Result<PointerForceSample> {
    let t = psi.time;
    let f = ham.potential(t).strength;
    let m = ham.masses();
    let forces = total_force_field(psi, ham, t);
    let g = pointer_factor_potential(psi, m);
    let gp = psi.grid_pointer;
    if ip == 0 || ip + 1 >= gp.n {
        return Err(Error::Precondition("pointer sample on the grid edge".into()));
    }
    let self_force = -(g[ip + 1] - g[ip - 1]) / (2.0 * gp.spacing());
    let nx = psi.grid_x.n;
    let (mut num, mut den) = (0.0, 0.0);
    for ix in 0..nx {
        let k = ix + nx * ip;
        if !forces.mask[k] {
            let w = psi.amplitudes[k].norm_sqr();
            num += w * forces.f_pointer[k];
            den += w;
        }
    }
    let force_raw = num / den;
    let (_, de_dx, _) = conditional_slope(ham, gp.point(ip), f)?;
    let force = force_raw - self_force;
    Ok(PointerForceSample {
        t,
        pointer_x: gp.point(ip),
        f,
        force,
        force_raw,
        self_force,
        minus_de_dx: -de_dx,
        relative_error: relative(force, -de_dx),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProtectiveSample {
    pub t: f64,
    pub f: f64,
    #[serde(rename = "X_mean")]
    pub pointer_mean: f64,
    #[serde(rename = "X_width")]
    pub pointer_width: f64,
    #[serde(rename = "p_X_mean")]
    pub pointer_momentum: f64,
    #[serde(rename = "X_shift")]
    pub pointer_shift: f64,
    #[serde(rename = "X_shift_oracle")]
    pub oracle_shift: f64,
    #[serde(rename = "delta_E")]
    pub delta_e: f64,
    pub purity: f64,
    pub norm: f64,
    pub adiabatic_overlap: f64,
    pub density_at_origin: f64,
}

struct ProtectiveRecorder<'a> {
    ham: &'a Hamiltonian,
    schedule: Schedule,
    /// Frame stride: divides the series stride and every event step.
    stride: usize,
    series_stride: usize,
    e_ground: f64,
    spread: f64,
    x_start: f64,
    oracle: &'a PointerOracle,
    /// Steps that get a series sample even off the series stride.
    extra_series_steps: Vec<usize>,
    force_steps: Vec<usize>,
    compensation_step: usize,
    snapshot_steps: Vec<usize>,
    samples: Vec<ProtectiveSample>,
    forces: Vec<PointerForceSample>,
    compensation: Option<CompensationRecord>,
    snapshots: Vec<WaveFunction2D>,
}

fn same_time(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0)
}

fn step_near(schedule: &Schedule, t: f64) -> usize {
    (((t - schedule.t0) / schedule.effective_dt()).round().max(0.0) as usize).min(schedule.steps())
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Largest stride not above `stride` that lands on every one of `steps`.
fn stride_through(stride: usize, steps: &[usize]) -> usize {
    steps.iter().fold(stride.max(1), |g, &s| gcd(g, s))
}

impl ProtectiveRecorder<'_> {
    fn sample(&self, psi: &WaveFunction2D) -> Result<ProtectiveSample> {
        let t = psi.time;
        let f = self.ham.potential(t).strength;
        let mean = psi.position_mean(Axis::Pointer);
        let (e, _, _) = conditional_slope(self.ham, mean, f)?;
        let (oracle_x, _) = self.oracle.at(t);
        Ok(ProtectiveSample {
            t,
            f,
            pointer_mean: mean,
            pointer_width: psi.position_variance(Axis::Pointer).sqrt(),
            pointer_momentum: psi.momentum_mean(Axis::Pointer),
            pointer_shift: mean - self.x_start,
            oracle_shift: oracle_x - self.oracle.position[0],
            delta_e: e - self.e_ground,
            purity: psi.factorization_metric().purity,
            norm: psi.norm(),
            adiabatic_overlap: adiabatic_overlap(psi, self.ham)?,
            density_at_origin: psi.density_at_origin()?,
        })
    }
}

impl Observer for ProtectiveRecorder<'_> {
    fn stride(&self) -> usize {
        self.stride
    }

    fn observe(&mut self, psi: &WaveFunction2D) -> Result<()> {
        let step = step_near(&self.schedule, psi.time);
        if step.is_multiple_of(self.series_stride) || step == self.schedule.steps() || self.extra_series_steps.contains(&step) {
            let s = self.sample(psi)?;
            self.samples.push(s);
        }
        if self.force_steps.contains(&step) {
            let mean = psi.position_mean(Axis::Pointer);
            let sigma = psi.position_variance(Axis::Pointer).sqrt();
            for target in [mean - 0.5 * sigma, mean + 0.5 * sigma] {
                let ip = nearest_node(&psi.grid_pointer, target);
                self.forces.push(pointer_force_sample(psi, self.ham, ip)?);
            }
        }
        if step == self.compensation_step {
            self.compensation = Some(compensation_diagnostic(psi, self.ham, self.spread, self.e_ground)?);
        }
        if self.snapshot_steps.contains(&step) {
            self.snapshots.push(psi.clone());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DisplacementStats {
    pub count: usize,
    pub percentile: f64,
    pub at_percentile: f64,
    pub median: f64,
    pub max: f64,
    pub masked: usize,
    pub clamped: usize,
}

/// Linear-interpolated percentile of `values` (`q` in percent).
pub fn percentile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let i = pos.floor() as usize;
    let j = (i + 1).min(v.len() - 1);
    v[i] + (pos - i as f64) * (v[j] - v[i])
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProtectivePredictions {
    /// `-A ⟨ψ_γ|δ_ε|ψ_γ⟩` at the initial pointer position and peak coupling.
    pub delta_p_hellmann_feynman: f64,
    /// `-A |ψ_γ(0)|²` at the same point.
    pub delta_p_origin_density: f64,
    /// Momentum change of the classical pointer oracle over the ramp.
    pub delta_p_oracle: f64,
    pub delta_x_oracle_final: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProtectiveMeasured {
    pub delta_p: f64,
    pub delta_x_final: f64,
    pub pointer_width_final: f64,
    /// `|Δ⟨X⟩| / δX` at the final time.
    pub resolvability: f64,
    pub purity_final: f64,
    pub min_adiabatic_overlap: f64,
    /// Largest relative deviation of `Δ⟨X⟩` from the oracle during the coast.
    pub shift_deviation_coast: f64,
    pub norm_drift: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ProtectiveReport {
    pub experiment: &'static str,
    pub valid: bool,
    pub invalid_reason: Option<String>,
    pub seed: u64,
    pub config: BTreeMap<String, ResolvedEntry>,
    pub warnings: Vec<String>,
    pub ground_energy: f64,
    pub psi_gamma_at_origin_sq: f64,
    pub predictions: ProtectivePredictions,
    pub measured: ProtectiveMeasured,
    pub compensation: Option<CompensationRecord>,
    pub pointer_forces: Vec<PointerForceSample>,
    pub energy_curve: Option<EnergyCurve>,
    pub trajectories: DisplacementStats,
    pub equivariance: Vec<EquivarianceCheck>,
    pub series: Vec<ProtectiveSample>,
    pub checks: Vec<Check>,
    #[serde(skip)]
    pub trajectory_paths: Vec<Trajectory>,
    #[serde(skip)]
    pub snapshots: Vec<WaveFunction2D>,
    #[serde(skip)]
    pub oracle: PointerOracle,
}

/// Adiabatic ramp of `f(t) δ_ε(x) X` over `[0, T]` followed by a free coast.
pub fn run_protective(cfg: &RunConfig) -> Result<ProtectiveReport> {
    let setup = build_setup(cfg, CouplingMode::Protective)?;
    let ham = &setup.ham;
    let c = cfg.coupling();
    let p = cfg.pointer();
    let sched = cfg.schedule();
    let th = cfg.thresholds();
    let ens = cfg.ensemble();
    let m = ham.masses();
    let t_ramp = c.T;
    let t_end = t_ramp + cfg.coast_time();
    let schedule = Schedule::new(0.0, t_end, sched.dt, sched.snapshot_stride)?;

    let f_max = ham.coupling.pulse.peak();
    let table = SlopeTable::new(ham, f_max, 1f64.max(2.0 * p.X0.abs()))?;
    let oracle = classical_pointer_oracle(&table, &ham.coupling.pulse, m.pointer, p.X0, p.p0, t_end, schedule.effective_dt());
    let (_, slope_peak, gamma_peak) = conditional_slope(ham, p.X0, f_max)?;
    let hf_expectation = if f_max != 0.0 { slope_peak / f_max } else { gamma_peak.density().iter().zip(&ham.coupling.profile.values).map(|(r, d)| r * d).sum::<f64>() * ham.grid_x.spacing() };
    let origin_sq = gamma_peak.density_at_origin()?;

    let series_stride = sched.snapshot_stride;
    let force_steps: Vec<usize> = [0.3, 0.4, 0.5, 0.6, 0.7].iter().map(|u| step_near(&schedule, u * t_ramp)).collect();
    let half_step = step_near(&schedule, 0.5 * t_ramp);
    let ramp_step = step_near(&schedule, t_ramp);
    let mut events = force_steps.clone();
    events.extend([half_step, ramp_step]);
    let mut recorder = ProtectiveRecorder {
        ham,
        schedule: schedule,
        stride: stride_through(series_stride, &events),
        series_stride,
        e_ground: setup.ground_energy,
        spread: p.width,
        x_start: setup.psi0.position_mean(Axis::Pointer),
        oracle: &oracle,
        extra_series_steps: vec![ramp_step],
        force_steps,
        compensation_step: half_step,
        snapshot_steps: vec![0, half_step, ramp_step, schedule.steps()],
        samples: Vec::new(),
        forces: Vec::new(),
        compensation: None,
        snapshots: Vec::new(),
    };

    let points = sample_quantum_equilibrium(&setup.psi0, ens.count, ens.seed)?;
    let x_bounds = wall_bounds(ham);
    let traj_stride = stride_through(sched.trajectory_stride, &[half_step, ramp_step]);
    let checkpoints: Vec<f64> = [0, half_step, ramp_step].iter().map(|&k| schedule.time_of(k)).collect();
    let record_every = (series_stride / traj_stride).max(1);
    let mut ensemble = TrajectoryEnsemble::new(points, ens.seed, m, x_bounds)
        .with_stride(traj_stride)
        .keep_paths(ens.trajectories, record_every)
        .with_checkpoints(&checkpoints);

    let timeline = propagate(
        &setup.psi0,
        ham,
        &schedule,
        PropagateOptions { keep_snapshots: false, observe_initial: true },
        &mut [&mut ensemble, &mut recorder],
    )?;

    let series = recorder.samples;
    let first = &series[0];
    let ramp_time = schedule.time_of(ramp_step);
    let ramp_end = series.iter().find(|s| same_time(s.t, ramp_time)).unwrap_or(series.last().unwrap());
    let last = series.last().unwrap();
    let delta_p = ramp_end.pointer_momentum - first.pointer_momentum;
    let (_, p_oracle_ramp) = oracle.at(t_ramp);
    let min_overlap = series.iter().filter(|s| s.t <= t_ramp + 1e-9).map(|s| s.adiabatic_overlap).fold(1.0, f64::min);
    let shift_deviation_coast = series
        .iter()
        .filter(|s| s.t > t_ramp + 1e-9)
        .map(|s| relative(s.pointer_shift, s.oracle_shift))
        .fold(0.0, f64::max);

    // The percentile is taken over the recorded system trajectories only.
    let kept = ensemble.trajectories().len();
    let displacements: Vec<f64> = ensemble.max_displacements_x()[..kept].to_vec();
    let flags = ensemble.flags();
    let stats = DisplacementStats {
        count: displacements.len(),
        percentile: th.displacement_percentile,
        at_percentile: percentile(&displacements, th.displacement_percentile),
        median: percentile(&displacements, 50.0),
        max: displacements.iter().cloned().fold(0.0, f64::max),
        masked: flags[..kept].iter().filter(|f| **f == bohm::TrajectoryFlag::Masked).count(),
        clamped: flags[..kept].iter().filter(|f| **f == bohm::TrajectoryFlag::Clamped).count(),
    };

    let measured = ProtectiveMeasured {
        delta_p,
        delta_x_final: last.pointer_shift,
        pointer_width_final: last.pointer_width,
        resolvability: last.pointer_shift.abs() / last.pointer_width,
        purity_final: last.purity,
        min_adiabatic_overlap: min_overlap,
        shift_deviation_coast,
        norm_drift: timeline.norm_drift,
    };
    let predictions = ProtectivePredictions {
        delta_p_hellmann_feynman: -c.A * hf_expectation,
        delta_p_origin_density: -c.A * origin_sq,
        delta_p_oracle: p_oracle_ramp - p.p0,
        delta_x_oracle_final: last.oracle_shift,
    };

    let box_length = match ham.system_trap.kind {
        TrapKind::InfiniteBox { length, .. } => length,
        _ => x_bounds.1 - x_bounds.0,
    };
    let mut checks = vec![Check::at_most("norm_drift", timeline.norm_drift, th.norm_drift)];
    if c.A != 0.0 {
        checks.push(Check::at_most("delta_p_vs_hellmann_feynman", relative(delta_p, predictions.delta_p_hellmann_feynman), th.momentum_rel));
        checks.push(Check::at_most("delta_p_vs_origin_density", relative(delta_p, predictions.delta_p_origin_density), th.momentum_rel));
        checks.push(Check::at_most("delta_x_vs_oracle_during_coast", shift_deviation_coast, th.shift_rel));
    }
    checks.push(Check::at_least("purity_final", last.purity, th.purity));
    checks.push(Check::at_least("adiabatic_overlap_min", min_overlap, th.adiabatic_overlap));
    if let Some(comp) = &recorder.compensation {
        if let (Some(tv), Some(fx)) = (comp.tv_ratio, comp.fx_ratio) {
            checks.push(Check::at_most("compensation_tv_ratio", tv, th.compensation));
            checks.push(Check::at_most("compensation_fx_ratio", fx, th.compensation));
        }
        checks.push(Check::at_most("eq7_residual", comp.eq7_residual, th.eq7_rel));
    }
    if c.A != 0.0 {
        let worst = recorder.forces.iter().map(|s| s.relative_error).fold(0.0, f64::max);
        checks.push(Check::at_most("pointer_force_vs_energy_slope", worst, th.force_rel));
    }
    if !displacements.is_empty() {
        checks.push(Check::at_most("trajectory_displacement", stats.at_percentile, th.displacement * box_length));
        if c.A != 0.0 {
            checks.push(Check::at_least(
                "pointer_shift_over_displacement",
                last.pointer_shift.abs() / stats.at_percentile.max(f64::MIN_POSITIVE),
                10.0,
            ));
        }
    }
    for e in &ensemble.equivariance {
        checks.push(Check::at_most(&format!("ks_x_t{}", e.t), e.ks_x, th.ks));
        checks.push(Check::at_most(&format!("ks_X_t{}", e.t), e.ks_pointer, th.ks));
    }

    let valid = min_overlap >= th.adiabatic_overlap;
    let invalid_reason = (!valid).then(|| {
        format!("adiabaticity breached: conditional ground-state overlap fell to {min_overlap:.4} (< {})", th.adiabatic_overlap)
    });
    Ok(ProtectiveReport {
        experiment: "protective",
        valid,
        invalid_reason,
        seed: ens.seed,
        config: cfg.resolved(),
        warnings: setup.warnings.clone(),
        ground_energy: setup.ground_energy,
        psi_gamma_at_origin_sq: origin_sq,
        predictions,
        measured,
        compensation: recorder.compensation,
        pointer_forces: recorder.forces,
        energy_curve: table.curve().cloned(),
        trajectories: stats,
        equivariance: ensemble.equivariance.clone(),
        series,
        checks,
        trajectory_paths: ensemble.into_trajectories(),
        snapshots: recorder.snapshots,
        oracle,
    })
}

/// Positions of the walls (or grid ends) along `x`.
fn wall_bounds(ham: &Hamiltonian) -> (f64, f64) {
    let r = ham.interior();
    (ham.grid_x.point(r.start - 1), ham.grid_x.point(r.end))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeltaForceSample {
    pub x: f64,
    #[serde(rename = "X")]
    pub pointer_x: f64,
    pub numeric_fx: f64,
    pub analytic_fx: f64,
    pub numeric_f_pointer: f64,
    pub analytic_f_pointer: f64,
    pub relative_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentumHistogram {
    pub edges: Vec<f64>,
    pub numeric: Vec<f64>,
    pub predicted: Vec<f64>,
    pub l1_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Deflection {
    pub inside_count: usize,
    pub far_count: usize,
    pub inside_mean: f64,
    pub far_mean: f64,
    pub ratio: f64,
    /// `(x0, mean max |x - x0|)` over 20 bins of the starting position.
    pub map: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ImpulsiveReport {
    pub experiment: &'static str,
    pub valid: bool,
    pub invalid_reason: Option<String>,
    pub seed: u64,
    pub config: BTreeMap<String, ResolvedEntry>,
    pub warnings: Vec<String>,
    /// `τ · (P0 ⟨|X|⟩ max|D'|)² / 2m`: the free motion a kick can cause during the pulse.
    pub impulsive_parameter: f64,
    pub fidelity: f64,
    pub delta_p: f64,
    pub delta_p_predicted: f64,
    pub momentum_histogram: MomentumHistogram,
    pub delta_forces: Vec<DeltaForceSample>,
    pub deflection: Deflection,
    pub equivariance: Vec<EquivarianceCheck>,
    pub norm_drift: f64,
    pub checks: Vec<Check>,
    #[serde(skip)]
    pub trajectory_paths: Vec<Trajectory>,
    #[serde(skip)]
    pub snapshots: Vec<WaveFunction2D>,
    #[serde(skip)]
    pub initial_points: Vec<Point>,
    #[serde(skip)]
    pub max_displacements: Vec<f64>,
}

/// `ψ(x) φ(X) exp(-i P0 D(x) X)`.
pub fn kicked_state(psi0: &WaveFunction2D, spec: &CouplingSpec) -> WaveFunction2D {
    let mut out = psi0.clone();
    let nx = psi0.grid_x.n;
    for (k, a) in out.amplitudes.iter_mut().enumerate() {
        let phase = -spec.p0 * spec.profile.values[k % nx] * psi0.grid_pointer.point(k / nx);
        *a *= Complex64::from_polar(1.0, phase);
    }
    out
}

/// Pointer momentum probabilities on the FFT wavenumbers.
fn pointer_momentum_distribution(psi: &WaveFunction2D) -> (Vec<f64>, Vec<f64>) {
    let k = psi.grid_pointer.wavenumbers();
    let fft = FftPlanner::new().plan_fft_forward(psi.grid_pointer.n);
    let mut prob = vec![0.0; k.len()];
    for mut line in psi.lines(Axis::Pointer) {
        fft.process(&mut line);
        for (p, a) in prob.iter_mut().zip(&line) {
            *p += a.norm_sqr();
        }
    }
    let total: f64 = prob.iter().sum();
    prob.iter_mut().for_each(|p| *p /= total);
    (k, prob)
}

fn histogram(k: &[f64], prob: &[f64], edges: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; edges.len() - 1];
    for (kv, p) in k.iter().zip(prob) {
        let i = edges.partition_point(|e| e <= kv);
        if i >= 1 && i < edges.len() {
            out[i - 1] += p;
        }
    }
    out
}

/// Short strong kick `P0 f(t) D(x) X` over `[0, τ]`, then a short coast.
pub fn run_impulsive(cfg: &RunConfig) -> Result<ImpulsiveReport> {
    let setup = build_setup(cfg, CouplingMode::Impulsive)?;
    let ham = &setup.ham;
    let c = cfg.coupling();
    let p = cfg.pointer();
    let sched = cfg.schedule();
    let th = cfg.thresholds();
    let ens = cfg.ensemble();
    let m = ham.masses();
    let tau = c.tau;
    let half_steps = sched.pulse_steps.div_ceil(2);
    let dt_pulse = tau / (2 * half_steps) as f64;
    let first_half = Schedule::new(0.0, 0.5 * tau, dt_pulse, half_steps)?;
    let second_half = Schedule::new(0.5 * tau, tau, dt_pulse, half_steps)?;
    let coast = Schedule::new(tau, tau + sched.impulsive_coast, sched.impulsive_dt.min(sched.impulsive_coast.max(f64::MIN_POSITIVE)), 1)?;

    let points = sample_quantum_equilibrium(&setup.psi0, ens.count, ens.seed)?;
    let pulse_stride = (2 * half_steps / 200).max(1);
    let mut ensemble = TrajectoryEnsemble::new(points, ens.seed, m, wall_bounds(ham))
        .with_stride(pulse_stride)
        .keep_paths(ens.trajectories, 1)
        .with_checkpoints(&[0.0, tau, tau + sched.impulsive_coast]);

    let run1 = propagate(&setup.psi0, ham, &first_half, PropagateOptions::default(), &mut [&mut ensemble])?;
    let mid = run1.final_state.clone();
    let chained = PropagateOptions { keep_snapshots: false, observe_initial: false };
    let run2 = propagate(&mid, ham, &second_half, chained, &mut [&mut ensemble])?;
    let after_pulse = run2.final_state.clone();
    ensemble = ensemble.with_stride(1);
    let run3 = propagate(&after_pulse, ham, &coast, chained, &mut [&mut ensemble])?;
    let norm_drift = (run3.final_state.norm() - setup.psi0.norm()).abs();

    // Eq. 3 comparison at the end of the pulse.
    let target = kicked_state(&setup.psi0, &ham.coupling);
    let fidelity = target.inner(&after_pulse)?.norm().min(1.0);

    let nx = ham.grid_x.n;
    let h = ham.grid_x.spacing();
    let rho_x = setup.system.density();
    let d_mean: f64 = rho_x.iter().zip(&ham.coupling.profile.values).map(|(r, d)| r * d).sum::<f64>() * h;
    let delta_p = after_pulse.momentum_mean(Axis::Pointer) - setup.psi0.momentum_mean(Axis::Pointer);
    let delta_p_predicted = -c.P0 * d_mean;

    let (k, prob) = pointer_momentum_distribution(&after_pulse);
    let sigma_k = 1.0 / (2.0 * p.width);
    let lo = p.p0 - c.P0 * ham.coupling.profile.peak() - 4.0 * sigma_k;
    let hi = p.p0 + 4.0 * sigma_k;
    let bins = 40;
    let edges: Vec<f64> = (0..=bins).map(|i| lo + (hi - lo) * i as f64 / bins as f64).collect();
    let numeric = histogram(&k, &prob, &edges);
    let mut push = vec![0.0; k.len()];
    for ix in 0..nx {
        let weight = rho_x[ix] * h;
        if weight == 0.0 {
            continue;
        }
        let mu = p.p0 - c.P0 * ham.coupling.profile.values[ix];
        for (q, kv) in push.iter_mut().zip(&k) {
            *q += weight * (-(kv - mu).powi(2) / (2.0 * sigma_k * sigma_k)).exp();
        }
    }
    let total: f64 = push.iter().sum();
    push.iter_mut().for_each(|q| *q /= total);
    let predicted = histogram(&k, &push, &edges);
    let l1_distance = numeric.iter().zip(&predicted).map(|(a, b)| (a - b).abs()).sum();

    // Force change against an uncoupled run, half way through the pulse.
    let mut free_cfg = cfg.clone();
    free_cfg.set_override("coupling.P0", "0")?;
    let free = build_setup(&free_cfg, CouplingMode::Impulsive)?;
    let free_mid = propagate(&free.psi0, &free.ham, &first_half, PropagateOptions::default(), &mut [])?.final_state;
    let t_mid = 0.5 * tau;
    let with = total_force_field(&mid, ham, t_mid);
    let without = total_force_field(&free_mid, &free.ham, t_mid);
    let w = c.w;
    let mut delta_forces = Vec::new();
    for &frac in &[-2.5, -2.0, -1.5, -1.0, -0.5, 0.5, 1.0, 1.5, 2.0, 2.5] {
        for dx in [-0.5 * p.width, 0.5 * p.width] {
            let ix = nearest_node(&ham.grid_x, c.D_center + frac * w);
            let ip = nearest_node(&ham.grid_pointer, p.X0 + dx);
            let kidx = ix + nx * ip;
            if with.mask[kidx] || without.mask[kidx] {
                continue;
            }
            let (x, xp) = (ham.grid_x.point(ix), ham.grid_pointer.point(ip));
            let (afx, afp) = bohm::impulsive_delta_forces(&ham.coupling, x, xp, t_mid)?;
            let nfx = with.f_x[kidx] - without.f_x[kidx];
            let nfp = with.f_pointer[kidx] - without.f_pointer[kidx];
            let rel = |n: f64, a: f64| if a == 0.0 { n.abs() } else { relative(n, a) };
            delta_forces.push(DeltaForceSample {
                x,
                pointer_x: xp,
                numeric_fx: nfx,
                analytic_fx: afx,
                numeric_f_pointer: nfp,
                analytic_f_pointer: afp,
                relative_error: rel(nfx, afx).max(rel(nfp, afp)),
            });
        }
    }

    let starts = ensemble.initial_points().to_vec();
    let disp = ensemble.max_displacements_x();
    let (mut inside, mut far) = (Vec::new(), Vec::new());
    for (s, d) in starts.iter().zip(&disp) {
        let r = (s.x - c.D_center).abs();
        if r <= w {
            inside.push(*d);
        } else if r >= 5.0 * w {
            far.push(*d);
        }
    }
    let mean = |v: &[f64]| if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
    let (lo_x, hi_x) = wall_bounds(ham);
    let nbins = 20;
    let mut map = Vec::new();
    for b in 0..nbins {
        let a = lo_x + (hi_x - lo_x) * b as f64 / nbins as f64;
        let z = lo_x + (hi_x - lo_x) * (b + 1) as f64 / nbins as f64;
        let sel: Vec<f64> = starts.iter().zip(&disp).filter(|(s, _)| s.x >= a && s.x < z).map(|(_, d)| *d).collect();
        if !sel.is_empty() {
            map.push([0.5 * (a + z), mean(&sel)]);
        }
    }
    let deflection = Deflection {
        inside_count: inside.len(),
        far_count: far.len(),
        inside_mean: mean(&inside),
        far_mean: mean(&far),
        ratio: mean(&inside) / mean(&far),
        map,
    };

    let d_slope = ham.coupling.profile.values.windows(2).map(|v| (v[1] - v[0]).abs() / h).fold(0.0, f64::max);
    let kick = c.P0 * p.X0.abs().max(p.width) * d_slope;
    let impulsive_parameter = tau * kick * kick / (2.0 * m.system);

    let mut checks = vec![Check::at_most("norm_drift", norm_drift, th.norm_drift)];
    checks.push(Check::at_least("fidelity_eq3", fidelity, th.fidelity));
    if c.P0 != 0.0 {
        let worst = delta_forces.iter().map(|s| s.relative_error).fold(0.0, f64::max);
        checks.push(Check::at_most("delta_force_vs_analytic", worst, th.delta_force_rel));
        checks.push(Check::at_least("delta_force_samples", delta_forces.len() as f64, 20.0));
        if !inside.is_empty() && !far.is_empty() {
            checks.push(Check::at_least("deflection_ratio", deflection.ratio, th.deflection_ratio));
        }
    }
    for e in &ensemble.equivariance {
        checks.push(Check::at_most(&format!("ks_x_t{}", e.t), e.ks_x, th.ks));
        checks.push(Check::at_most(&format!("ks_X_t{}", e.t), e.ks_pointer, th.ks));
    }
    let valid = fidelity >= th.impulsive_validity;
    let invalid_reason =
        (!valid).then(|| format!("impulsive approximation violated: fidelity {fidelity:.4} < {}", th.impulsive_validity));
    let equivariance = ensemble.equivariance.clone();
    let max_displacements = disp.clone();
    Ok(ImpulsiveReport {
        experiment: "impulsive",
        valid,
        invalid_reason,
        seed: ens.seed,
        config: cfg.resolved(),
        warnings: setup.warnings.clone(),
        impulsive_parameter,
        fidelity,
        delta_p,
        delta_p_predicted,
        momentum_histogram: MomentumHistogram { edges, numeric, predicted, l1_distance },
        delta_forces,
        deflection,
        equivariance,
        norm_drift,
        checks,
        trajectory_paths: ensemble.into_trajectories(),
        snapshots: vec![setup.psi0.clone(), after_pulse, run3.final_state],
        initial_points: starts,
        max_displacements,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurveChecks {
    pub f_frozen: f64,
    /// Largest `|dE/dX - f |ψ_γ(0)|²| / |dE/dX|`.
    pub hellmann_feynman_origin: f64,
    /// Largest deviation of central differences of `E` from `dE/dX`.
    pub central_difference: f64,
    pub min_adjacent_overlap: f64,
}

pub fn check_energy_curve(curve: &EnergyCurve) -> CurveChecks {
    let mut hf: f64 = 0.0;
    for (d, rho) in curve.de_dx.iter().zip(&curve.psi_gamma_at_origin_sq) {
        if *d != 0.0 {
            hf = hf.max(relative(curve.f_frozen * rho, *d));
        }
    }
    let mut cd: f64 = 0.0;
    for (x, slope) in curve.central_differences() {
        let d = curve.de_dx_at(x);
        if d != 0.0 {
            cd = cd.max(relative(slope, d));
        }
    }
    CurveChecks {
        f_frozen: curve.f_frozen,
        hellmann_feynman_origin: hf,
        central_difference: cd,
        min_adjacent_overlap: curve.min_adjacent_overlap,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GroundStateReport {
    pub experiment: &'static str,
    pub valid: bool,
    pub config: BTreeMap<String, ResolvedEntry>,
    pub trap: TrapSpec,
    pub energy_imaginary_time: f64,
    pub energy_direct: f64,
    pub energy_analytic: f64,
    pub relative_error: f64,
    pub excited_energy: f64,
    pub excited_analytic: f64,
    pub density_at_origin: f64,
    pub density_at_origin_analytic: f64,
    pub energy_curve: EnergyCurve,
    pub curve_checks: CurveChecks,
    pub checks: Vec<Check>,
    #[serde(skip)]
    pub state: WaveFunction1D,
}

/// Trap ground state, first excited state and the conditional energy curve
/// at peak coupling.
pub fn run_groundstate(cfg: &RunConfig) -> Result<GroundStateReport> {
    let (gx, _) = grids(cfg)?;
    let trap = system_trap(cfg)?;
    let mass = cfg.mass().m;
    let (psi, e_it) = ground_state_1d(&trap, &gx, mass, None, &GroundStateOptions::default())?;
    let direct = GroundStateOptions { method: EigenMethod::Direct, ..Default::default() };
    let (_, e_direct) = ground_state_1d(&trap, &gx, mass, None, &direct)?;
    let excited_opts = GroundStateOptions { orthogonal_to: vec![psi.clone()], ..Default::default() };
    let (_, e_excited) = ground_state_1d(&trap, &gx, mass, None, &excited_opts)?;
    let (e_exact, e2_exact, rho0_exact) = match trap.kind {
        TrapKind::InfiniteBox { length, center } => {
            let e = PI * PI / (2.0 * mass * length * length);
            (e, 4.0 * e, 2.0 / length * (PI * center / length).cos().powi(2))
        }
        TrapKind::Harmonic { omega, center } => {
            (0.5 * omega, 1.5 * omega, (mass * omega / PI).sqrt() * (-mass * omega * center * center).exp())
        }
        TrapKind::Free => (f64::NAN, f64::NAN, f64::NAN),
    };
    let c = cfg.coupling();
    let profile: CouplingProfile = regularized_delta(&gx, c.epsilon)?;
    let f = 2.0 * c.A / c.T;
    let xs: Vec<f64> = (0..11).map(|i| -0.5 + 0.1 * i as f64).collect();
    let curve = energy_curve(&xs, f, &trap, &profile, mass, EigenMethod::ImaginaryTime)?;
    let curve_checks = check_energy_curve(&curve);
    let rel = relative(e_it, e_exact);
    let rho0 = psi.density_at_origin()?;
    let checks = vec![
        Check::at_most("ground_energy_rel", rel, 1e-3),
        Check::at_most("imaginary_time_vs_direct", (e_it - e_direct).abs(), 1e-8),
        Check::at_most("excited_energy_rel", relative(e_excited, e2_exact), 2e-3),
        Check::at_most("curve_hellmann_feynman", curve_checks.hellmann_feynman_origin, 0.01),
        Check::at_most("curve_central_difference", curve_checks.central_difference, 0.005),
        Check::at_least("curve_branch_overlap", curve_checks.min_adjacent_overlap, 0.999),
    ];
    Ok(GroundStateReport {
        experiment: "groundstate",
        valid: true,
        config: cfg.resolved(),
        trap,
        energy_imaginary_time: e_it,
        energy_direct: e_direct,
        energy_analytic: e_exact,
        relative_error: rel,
        excited_energy: e_excited,
        excited_analytic: e2_exact,
        density_at_origin: rho0,
        density_at_origin_analytic: rho0_exact,
        energy_curve: curve,
        curve_checks,
        checks,
        state: psi,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScanReport {
    pub experiment: &'static str,
    pub variable: &'static str,
    pub response: &'static str,
    pub config: BTreeMap<String, ResolvedEntry>,
    pub values: Vec<f64>,
    pub responses: Vec<f64>,
    /// Observed order `p` from consecutive differences (halving sequences only).
    pub fitted_order: Option<f64>,
    pub extrapolated: Option<f64>,
    pub reference: Option<f64>,
    /// Error against the extrapolant at each value.
    pub errors: Vec<f64>,
    pub monotone: bool,
    pub checks: Vec<Check>,
}

fn require_increasing(values: &[f64], what: &str) -> Result<()> {
    if values.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Precondition(format!("{what} must be strictly increasing")));
    }
    Ok(())
}

/// Final conditional-ground-state overlap after ramps of each duration `T`.
pub fn scan_adiabaticity(t_values: &[f64], cfg: &RunConfig) -> Result<ScanReport> {
    if t_values.len() < 3 {
        return Err(Error::Precondition("an adiabaticity scan needs at least 3 durations".into()));
    }
    require_increasing(t_values, "T values")?;
    let dt = cfg.schedule().dt;
    let responses = t_values
        .par_iter()
        .map(|&t| -> Result<f64> {
            let mut c = cfg.clone();
            c.set_override("coupling.T", &t.to_string())?;
            let setup = build_setup(&c, CouplingMode::Protective)?;
            let steps = (t / dt).round().max(1.0);
            let schedule = Schedule::new(0.0, t, t / steps, usize::MAX)?;
            let tl = propagate(&setup.psi0, &setup.ham, &schedule, PropagateOptions::default(), &mut [])?;
            adiabatic_overlap(&tl.final_state, &setup.ham)
        })
        .collect::<Result<Vec<_>>>()?;
    let monotone = responses.windows(2).all(|w| w[1] >= w[0] - 1e-3);
    let checks = vec![Check::at_least("monotone", monotone as u8 as f64, 1.0)];
    Ok(ScanReport {
        experiment: "scan-adiabatic",
        variable: "T",
        response: "final_adiabatic_overlap",
        config: cfg.resolved(),
        values: t_values.to_vec(),
        responses,
        fitted_order: None,
        extrapolated: None,
        reference: None,
        errors: Vec::new(),
        monotone,
        checks,
    })
}

/// Conditional energy shift `δE(ε)` at fixed `fX`, Richardson-extrapolated
/// to `ε → 0` and compared with `fX |ψ(0)|²`.
pub fn scan_regularization(eps_values: &[f64], cfg: &RunConfig) -> Result<ScanReport> {
    if eps_values.len() < 3 {
        return Err(Error::Precondition("a regularization scan needs at least 3 widths".into()));
    }
    let (gx, _) = grids(cfg)?;
    let trap = system_trap(cfg)?;
    let mass = cfg.mass().m;
    let fx = cfg.scan().fX;
    let direct = GroundStateOptions { method: EigenMethod::Direct, ..Default::default() };
    let (psi, e0) = ground_state_1d(&trap, &gx, mass, None, &direct)?;
    let responses = eps_values
        .iter()
        .map(|&eps| -> Result<f64> {
            let profile = regularized_delta(&gx, eps)?;
            let (_, e) = conditional_ground_state(fx, 1.0, &trap, &profile, mass, &direct)?;
            Ok(e - e0)
        })
        .collect::<Result<Vec<_>>>()?;
    let reference = fx * psi.density_at_origin()?;
    let n = responses.len();
    // Last three values, which should form a halving sequence.
    let (a, b, c) = (responses[n - 3], responses[n - 2], responses[n - 1]);
    let ratio = eps_values[n - 3] / eps_values[n - 2];
    let halving = (ratio - eps_values[n - 2] / eps_values[n - 1]).abs() < 1e-9 * ratio;
    let (fitted_order, extrapolated) = if halving && (b - c) != 0.0 && (a - b) != 0.0 {
        let order = ((a - b) / (b - c)).abs().ln() / ratio.ln();
        (Some(order), Some(c + (c - b) / (ratio.powf(order) - 1.0)))
    } else {
        (None, None)
    };
    let limit = extrapolated.unwrap_or(c);
    let errors: Vec<f64> = responses.iter().map(|r| (r - limit).abs()).collect();
    let monotone = eps_values.windows(2).all(|w| w[0] > w[1]) || eps_values.windows(2).all(|w| w[0] < w[1]);
    let mut checks = Vec::new();
    if let Some(p) = fitted_order {
        checks.push(Check::at_least("fitted_order", p, 1.8));
    }
    if reference != 0.0 {
        checks.push(Check::at_most("extrapolant_vs_first_order", relative(limit, reference), 0.01));
    } else {
        checks.push(Check::at_most("zero_coupling_shift", responses.iter().fold(0.0f64, |m, r| m.max(r.abs())), 1e-12));
    }
    Ok(ScanReport {
        experiment: "scan-epsilon",
        variable: "epsilon",
        response: "delta_E",
        config: cfg.resolved(),
        values: eps_values.to_vec(),
        responses,
        fitted_order,
        extrapolated,
        reference: Some(reference),
        errors,
        monotone,
        checks,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct CompensationReport {
    pub experiment: &'static str,
    pub valid: bool,
    pub config: BTreeMap<String, ResolvedEntry>,
    pub record: CompensationRecord,
    pub pointer_forces: Vec<PointerForceSample>,
    pub checks: Vec<Check>,
    #[serde(skip)]
    pub state: WaveFunction2D,
}

/// Propagates the protective ramp to `T/2` and inspects the balance there.
pub fn run_compensation(cfg: &RunConfig) -> Result<CompensationReport> {
    let setup = build_setup(cfg, CouplingMode::Protective)?;
    let t_half = 0.5 * cfg.coupling().T;
    let steps = (t_half / cfg.schedule().dt).round().max(1.0);
    let schedule = Schedule::new(0.0, t_half, t_half / steps, usize::MAX)?;
    let tl = propagate(&setup.psi0, &setup.ham, &schedule, PropagateOptions::default(), &mut [])?;
    let psi = tl.final_state;
    let th = cfg.thresholds();
    let record = compensation_diagnostic(&psi, &setup.ham, cfg.pointer().width, setup.ground_energy)?;
    let mean = psi.position_mean(Axis::Pointer);
    let sigma = psi.position_variance(Axis::Pointer).sqrt();
    let mut pointer_forces = Vec::new();
    if record.marker.is_none() {
        for target in [mean - 0.5 * sigma, mean + 0.5 * sigma] {
            pointer_forces.push(pointer_force_sample(&psi, &setup.ham, nearest_node(&psi.grid_pointer, target))?);
        }
    }
    let mut checks = Vec::new();
    if let (Some(tv), Some(fx)) = (record.tv_ratio, record.fx_ratio) {
        checks.push(Check::at_most("compensation_tv_ratio", tv, th.compensation));
        checks.push(Check::at_most("compensation_fx_ratio", fx, th.compensation));
        let worst = pointer_forces.iter().map(|s| s.relative_error).fold(0.0, f64::max);
        checks.push(Check::at_most("pointer_force_vs_energy_slope", worst, th.force_rel));
    }
    checks.push(Check::at_most("eq7_residual", record.eq7_residual, th.eq7_rel));
    Ok(CompensationReport {
        experiment: "diagnose-compensation",
        valid: true,
        config: cfg.resolved(),
        record,
        pointer_forces,
        checks,
        state: psi,
    })
}
