//! Real-time propagation of `Ψ(x, X, t)`, imaginary-time ground states and
//! the conditional (frozen pointer) eigenproblem.
//!
//! One time step is a Strang splitting
//!
//! ```text
//! U(dt) = K_X(dt/2) · C_x(t + dt/2) · K_X(dt/2)
//! ```
//!
//! where `K_X` is the exact free pointer evolution applied spectrally along
//! `X`, and `C_x` is the Crank–Nicolson (Cayley) map of the system operator
//! `-∂²_x/2m + V(x, X, t + dt/2)` with second-order central differences and
//! Dirichlet walls, solved line by line. The Cayley map shares eigenvectors
//! with the frozen system operator, so adiabatic following reproduces the
//! discrete conditional ground state exactly.

use std::ops::Range;
use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{interpolate_quadratic, Grid1D, WaveFunction1D, WaveFunction2D};
use crate::model::{CouplingProfile, Hamiltonian, TrapSpec};
use crate::tridiag;

/// Largest tolerated norm change in a single step before aborting.
pub const INSTABILITY_DRIFT: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub t0: f64,
    pub t1: f64,
    pub dt: f64,
    pub snapshot_stride: usize,
}

impl Schedule {
    pub fn new(t0: f64, t1: f64, dt: f64, snapshot_stride: usize) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) || !(t1 >= t0) || snapshot_stride == 0 {
            return Err(Error::Precondition(format!(
                "bad schedule t0={t0} t1={t1} dt={dt} stride={snapshot_stride}"
            )));
        }
        let ratio = (t1 - t0) / dt;
        if (ratio - ratio.round()).abs() > 0.5 + 1e-12 {
            return Err(Error::Precondition(format!("(t1 - t0)/dt = {ratio} is not near an integer")));
        }
        Ok(Self { t0, t1, dt, snapshot_stride })
    }

    pub fn steps(&self) -> usize {
        ((self.t1 - self.t0) / self.dt).round() as usize
    }

    /// Step actually taken: the interval divided evenly into [`Self::steps`].
    pub fn effective_dt(&self) -> f64 {
        let n = self.steps();
        if n == 0 {
            0.0
        } else {
            (self.t1 - self.t0) / n as f64
        }
    }

    pub fn time_of(&self, step: usize) -> f64 {
        if step == self.steps() {
            self.t1
        } else {
            self.t0 + step as f64 * self.effective_dt()
        }
    }
}

/// Stepping engine bound to one Hamiltonian.
pub struct Propagator<'a> {
    ham: &'a Hamiltonian,
    fft_fwd: Arc<dyn Fft<f64>>,
    fft_inv: Arc<dyn Fft<f64>>,
    half_kinetic: Vec<Complex64>,
    half_kinetic_dt: f64,
    buffer: Vec<Complex64>,
}

impl<'a> Propagator<'a> {
    pub fn new(ham: &'a Hamiltonian) -> Self {
        let n = ham.grid_pointer.n;
        let mut planner = FftPlanner::new();
        Self {
            ham,
            fft_fwd: planner.plan_fft_forward(n),
            fft_inv: planner.plan_fft_inverse(n),
            half_kinetic: Vec::new(),
            half_kinetic_dt: f64::NAN,
            buffer: vec![Complex64::new(0.0, 0.0); ham.grid_x.n * n],
        }
    }

    /// Largest kinetic energy representable on the spectral pointer axis.
    pub fn pointer_kinetic_cutoff(&self) -> f64 {
        let k_max = std::f64::consts::PI / self.ham.grid_pointer.spacing();
        k_max * k_max / (2.0 * self.ham.masses().pointer)
    }

    fn check_step_size(&self, t: f64, dt: f64) -> Result<()> {
        let v_max = self.ham.potential(t + 0.5 * dt).max_abs_coupling();
        let scale = v_max.max(self.pointer_kinetic_cutoff());
        if !(dt * scale < 0.5) {
            return Err(Error::Precondition(format!(
                "dt = {dt:e} does not resolve energy scale {scale:e} (dt·scale must be < 0.5)"
            )));
        }
        Ok(())
    }

    fn prepare_kinetic(&mut self, dt: f64) {
        if self.half_kinetic_dt == dt {
            return;
        }
        let m = self.ham.masses().pointer;
        let n = self.ham.grid_pointer.n as f64;
        self.half_kinetic = self
            .ham
            .grid_pointer
            .wavenumbers()
            .iter()
            .map(|k| Complex64::from_polar(1.0 / n, -0.5 * dt * k * k / (2.0 * m)))
            .collect();
        self.half_kinetic_dt = dt;
    }

    /// Exact free evolution of the pointer coordinate over `dt/2`.
    fn pointer_half_step(&mut self, psi: &mut WaveFunction2D) {
        let nx = psi.grid_x.n;
        let np = psi.grid_pointer.n;
        let interior = self.ham.interior();
        let buf = &mut self.buffer;
        // Transpose interior x-nodes into contiguous pointer lines.
        buf.par_chunks_mut(np).enumerate().for_each(|(ix, line)| {
            if interior.contains(&ix) {
                for (ip, v) in line.iter_mut().enumerate() {
                    *v = psi.amplitudes[ix + nx * ip];
                }
            }
        });
        let (fwd, inv, phase) = (&self.fft_fwd, &self.fft_inv, &self.half_kinetic);
        buf.par_chunks_mut(np)
            .enumerate()
            .filter(|(ix, _)| interior.contains(ix))
            .for_each(|(_, line)| {
                fwd.process(line);
                for (v, p) in line.iter_mut().zip(phase) {
                    *v *= p;
                }
                inv.process(line);
            });
        psi.amplitudes.par_chunks_mut(nx).enumerate().for_each(|(ip, row)| {
            for ix in interior.clone() {
                row[ix] = buf[ip + np * ix];
            }
        });
    }

    /// Crank–Nicolson step of every x-line with the potential frozen at `t_mid`.
    fn system_step(&self, psi: &mut WaveFunction2D, t_mid: f64, dt: f64) {
        let ham = self.ham;
        let nx = psi.grid_x.n;
        let h = psi.grid_x.spacing();
        let m = ham.masses().system;
        let interior = ham.interior();
        let pot = ham.potential(t_mid);
        let kin_diag = 1.0 / (m * h * h);
        let kin_off = -0.5 / (m * h * h);
        let half = Complex64::new(0.0, 0.5 * dt);
        let lhs_off = half * kin_off;
        let len = interior.len();
        psi.amplitudes.par_chunks_mut(nx).enumerate().for_each_init(
            || (vec![Complex64::new(0.0, 0.0); len], vec![Complex64::new(0.0, 0.0); len], vec![Complex64::new(0.0, 0.0); len]),
            |(diag, rhs, scratch), (ip, row)| {
                let line = &row[interior.clone()];
                for (j, ix) in interior.clone().enumerate() {
                    let d = kin_diag + pot.value(ix, ip);
                    let left = if j > 0 { line[j - 1] } else { Complex64::new(0.0, 0.0) };
                    let right = if j + 1 < len { line[j + 1] } else { Complex64::new(0.0, 0.0) };
                    rhs[j] = line[j] - half * (d * line[j] + kin_off * (left + right));
                    diag[j] = Complex64::new(1.0, 0.0) + half * d;
                }
                tridiag::solve_constant_off_complex(diag, lhs_off, rhs, scratch);
                row[interior.clone()].copy_from_slice(rhs);
            },
        );
    }

    /// Advances `psi` from `psi.time` to `psi.time + dt`.
    pub fn step(&mut self, psi: &mut WaveFunction2D, dt: f64) -> Result<()> {
        let t = psi.time;
        self.check_step_size(t, dt)?;
        let before = norm_sqr(psi);
        self.prepare_kinetic(dt);
        self.pointer_half_step(psi);
        self.system_step(psi, t + 0.5 * dt, dt);
        self.pointer_half_step(psi);
        psi.time = t + dt;
        let after = norm_sqr(psi);
        let drift = (after - before).abs();
        if !(drift <= INSTABILITY_DRIFT) {
            return Err(Error::Instability { time: psi.time, drift });
        }
        Ok(())
    }
}

fn norm_sqr(psi: &WaveFunction2D) -> f64 {
    psi.cell_area() * psi.amplitudes.iter().map(|a| a.norm_sqr()).sum::<f64>()
}

/// One step of the split-operator scheme, returning the new state.
pub fn step_tdse(psi: &WaveFunction2D, ham: &Hamiltonian, dt: f64) -> Result<WaveFunction2D> {
    let mut next = psi.clone();
    Propagator::new(ham).step(&mut next, dt)?;
    Ok(next)
}

/// Receives the state at regularly spaced steps of [`propagate`].
pub trait Observer {
    /// Steps between successive calls.
    fn stride(&self) -> usize {
        1
    }
    fn observe(&mut self, psi: &WaveFunction2D) -> Result<()>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PropagateOptions {
    pub keep_snapshots: bool,
    /// Deliver the initial state to observers (off when chaining runs).
    pub observe_initial: bool,
}

impl Default for PropagateOptions {
    fn default() -> Self {
        Self { keep_snapshots: false, observe_initial: true }
    }
}

#[derive(Debug, Clone)]
pub struct Timeline {
    pub snapshots: Vec<WaveFunction2D>,
    pub final_state: WaveFunction2D,
    pub steps: usize,
    /// `| ‖Ψ(t1)‖ - ‖Ψ(t0)‖ |`.
    pub norm_drift: f64,
}

/// Propagates over `schedule`. Observers see step 0 (if requested), every
/// multiple of their stride, and the final step.
pub fn propagate(
    psi0: &WaveFunction2D,
    ham: &Hamiltonian,
    schedule: &Schedule,
    options: PropagateOptions,
    observers: &mut [&mut dyn Observer],
) -> Result<Timeline> {
    if psi0.grid_x != ham.grid_x || psi0.grid_pointer != ham.grid_pointer {
        return Err(Error::GridMismatch("state and Hamiltonian use different grids".into()));
    }
    let steps = schedule.steps();
    let dt = schedule.effective_dt();
    let mut psi = psi0.clone();
    psi.time = schedule.t0;
    let norm0 = psi.norm();
    let mut snapshots = Vec::new();
    let mut propagator = Propagator::new(ham);

    let mut deliver = |step: usize, psi: &WaveFunction2D, snapshots: &mut Vec<WaveFunction2D>| -> Result<()> {
        let last = step == steps;
        if options.keep_snapshots && (step.is_multiple_of(schedule.snapshot_stride) || last) {
            snapshots.push(psi.clone());
        }
        if step == 0 && !options.observe_initial {
            return Ok(());
        }
        for obs in observers.iter_mut() {
            if step.is_multiple_of(obs.stride().max(1)) || last {
                obs.observe(psi)?;
            }
        }
        Ok(())
    };

    deliver(0, &psi, &mut snapshots)?;
    for step in 1..=steps {
        propagator.step(&mut psi, dt)?;
        psi.time = schedule.time_of(step);
        deliver(step, &psi, &mut snapshots)?;
    }
    let norm_drift = (psi.norm() - norm0).abs();
    Ok(Timeline { snapshots, final_state: psi, steps, norm_drift })
}

/// `⟨Ψ|H(t)|Ψ⟩` with the same discretization as the propagator.
pub fn energy_expectation(psi: &WaveFunction2D, ham: &Hamiltonian, t: f64) -> f64 {
    let nx = psi.grid_x.n;
    let h = psi.grid_x.spacing();
    let m = ham.masses();
    let interior = ham.interior();
    let pot = ham.potential(t);
    let system: f64 = psi
        .amplitudes
        .par_chunks(nx)
        .enumerate()
        .map(|(ip, row)| {
            let mut acc = 0.0;
            for ix in interior.clone() {
                let left = if ix > interior.start { row[ix - 1] } else { Complex64::new(0.0, 0.0) };
                let right = if ix + 1 < interior.end { row[ix + 1] } else { Complex64::new(0.0, 0.0) };
                let lap = (left - 2.0 * row[ix] + right) / (h * h);
                let h_psi = -lap / (2.0 * m.system) + pot.value(ix, ip) * row[ix];
                acc += (row[ix].conj() * h_psi).re;
            }
            acc
        })
        .collect::<Vec<_>>()
        .iter()
        .sum();
    let k = psi.grid_pointer.wavenumbers();
    let fft = FftPlanner::new().plan_fft_forward(psi.grid_pointer.n);
    let np = psi.grid_pointer.n as f64;
    let pointer: f64 = psi
        .lines(crate::fields::Axis::Pointer)
        .into_par_iter()
        .map(|mut line| {
            fft.process(&mut line);
            line.iter().zip(&k).map(|(a, k)| a.norm_sqr() * k * k / (2.0 * m.pointer)).sum::<f64>() / np
        })
        .collect::<Vec<_>>()
        .iter()
        .sum();
    psi.cell_area() * system + psi.cell_area() * pointer
}

/// Finite-difference operator `-∂²/2m + V` on the interior nodes of a 1D grid.
#[derive(Debug, Clone)]
pub struct Operator1D {
    pub grid: Grid1D,
    pub interior: Range<usize>,
    /// Diagonal on the interior nodes.
    pub diag: Vec<f64>,
    pub off: f64,
}

impl Operator1D {
    pub fn new(trap: &TrapSpec, grid: &Grid1D, mass: f64, extra: Option<&[f64]>) -> Result<Self> {
        if let Some(v) = extra {
            if v.len() != grid.n {
                return Err(Error::GridMismatch("extra potential has wrong length".into()));
            }
        }
        let interior = trap.interior(grid);
        if interior.len() < 3 {
            return Err(Error::Precondition("fewer than 3 interior nodes".into()));
        }
        let h = grid.spacing();
        let points = grid.points();
        let diag = interior
            .clone()
            .map(|i| 1.0 / (mass * h * h) + trap.potential(points[i], mass) + extra.map_or(0.0, |v| v[i]))
            .collect();
        Ok(Self { grid: *grid, interior, diag, off: -0.5 / (mass * h * h) })
    }

    fn apply(&self, v: &[f64], out: &mut [f64]) {
        let n = v.len();
        for i in 0..n {
            let mut s = self.diag[i] * v[i];
            if i > 0 {
                s += self.off * v[i - 1];
            }
            if i + 1 < n {
                s += self.off * v[i + 1];
            }
            out[i] = s;
        }
    }

    fn embed(&self, interior_values: &[f64]) -> WaveFunction1D {
        let mut full = vec![Complex64::new(0.0, 0.0); self.grid.n];
        for (slot, v) in full[self.interior.clone()].iter_mut().zip(interior_values) {
            *slot = Complex64::new(*v, 0.0);
        }
        WaveFunction1D { grid: self.grid, amplitudes: full }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EigenMethod {
    /// Backward-Euler imaginary-time steps with renormalization.
    ImaginaryTime,
    /// Sturm bisection plus inverse iteration on the tridiagonal matrix.
    Direct,
}

#[derive(Debug, Clone)]
pub struct GroundStateOptions {
    pub method: EigenMethod,
    /// Stop once the energy changes by less than this between sweeps...
    pub energy_tol: f64,
    /// ...and `‖Hψ - Eψ‖ < residual_tol · max(1, |E|)`.
    pub residual_tol: f64,
    /// Imaginary-time step; one implicit step per sweep. Reduced
    /// automatically if `1 + dτ H` would lose positivity.
    pub sweep_time: f64,
    pub max_sweeps: usize,
    /// Project these states out after every step (excited states).
    pub orthogonal_to: Vec<WaveFunction1D>,
    pub initial: Option<WaveFunction1D>,
}

impl Default for GroundStateOptions {
    fn default() -> Self {
        Self {
            method: EigenMethod::ImaginaryTime,
            energy_tol: 1e-10,
            residual_tol: 1e-9,
            sweep_time: 0.05,
            max_sweeps: 20_000,
            orthogonal_to: Vec::new(),
            initial: None,
        }
    }
}

/// Lowest eigenpair of `-∂²/2m + V_trap + extra` on `grid` (orthogonal to
/// `options.orthogonal_to`). The state is real with positive overlap on the
/// initial guess.
pub fn ground_state_1d(
    trap: &TrapSpec,
    grid: &Grid1D,
    mass: f64,
    extra_potential: Option<&[f64]>,
    options: &GroundStateOptions,
) -> Result<(WaveFunction1D, f64)> {
    let op = Operator1D::new(trap, grid, mass, extra_potential)?;
    match options.method {
        EigenMethod::Direct => {
            if !options.orthogonal_to.is_empty() {
                return Err(Error::Precondition("direct solver returns the ground state only".into()));
            }
            let (e, mut v) = tridiag::lowest_eigenpair(&op.diag, op.off);
            let scale = 1.0 / grid.spacing().sqrt();
            v.iter_mut().for_each(|x| *x *= scale);
            Ok((op.embed(&v), e))
        }
        EigenMethod::ImaginaryTime => imaginary_time(&op, options),
    }
}

fn imaginary_time(op: &Operator1D, options: &GroundStateOptions) -> Result<(WaveFunction1D, f64)> {
    let h = op.grid.spacing();
    let n = op.interior.len();
    // Gershgorin: every eigenvalue of H is at least min_i V_i.
    let lower = op.diag.iter().fold(f64::INFINITY, |m, d| m.min(*d)) + 2.0 * op.off;
    let mut dtau = options.sweep_time;
    if 1.0 + dtau * lower < 0.5 {
        dtau = 0.5 / lower.abs();
    }
    let implicit_diag: Vec<f64> = op.diag.iter().map(|d| 1.0 + dtau * d).collect();
    let implicit_off = dtau * op.off;
    let constraints: Vec<Vec<f64>> = options
        .orthogonal_to
        .iter()
        .map(|w| w.amplitudes[op.interior.clone()].iter().map(|a| a.re).collect())
        .collect();

    let mut v: Vec<f64> = match &options.initial {
        Some(w) => w.amplitudes[op.interior.clone()].iter().map(|a| a.re).collect(),
        None => (0..n).map(|i| (std::f64::consts::PI * (i + 1) as f64 / (n + 1) as f64).sin()).collect(),
    };
    if !constraints.is_empty() && options.initial.is_none() {
        // A lopsided start so that odd states are reachable.
        for (i, x) in v.iter_mut().enumerate() {
            *x *= 1.0 + (i as f64 / n as f64);
        }
    }
    let project = |v: &mut [f64]| {
        for c in &constraints {
            let dot: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum::<f64>() * h;
            v.iter_mut().zip(c).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = (v.iter().map(|x| x * x).sum::<f64>() * h).sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
    };
    project(&mut v);

    let mut hv = vec![0.0; n];
    let mut energy = f64::INFINITY;
    for _ in 0..options.max_sweeps {
        tridiag::solve_constant_off_real(&implicit_diag, implicit_off, &mut v);
        project(&mut v);
        op.apply(&v, &mut hv);
        let e = v.iter().zip(&hv).map(|(a, b)| a * b).sum::<f64>() * h;
        let residual = (hv.iter().zip(&v).map(|(a, b)| (a - e * b).powi(2)).sum::<f64>() * h).sqrt();
        let converged = (e - energy).abs() < options.energy_tol && residual < options.residual_tol * e.abs().max(1.0);
        energy = e;
        if converged {
            return Ok((op.embed(&v), energy));
        }
    }
    Err(Error::NonConvergence { what: "imaginary-time ground state".into(), iterations: options.max_sweeps })
}

/// Ground state of the system with the pointer frozen at `pointer_x` and the
/// coupling frozen at `strength · profile(x) · X`.
pub fn conditional_ground_state(
    pointer_x: f64,
    strength: f64,
    trap: &TrapSpec,
    profile: &CouplingProfile,
    mass: f64,
    options: &GroundStateOptions,
) -> Result<(WaveFunction1D, f64)> {
    let extra: Vec<f64> = profile.values.iter().map(|p| strength * pointer_x * p).collect();
    ground_state_1d(trap, &profile.grid, mass, Some(&extra), options)
}

/// Conditional ground energy `E(X)` for a frozen coupling strength.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyCurve {
    pub f_frozen: f64,
    pub x_samples: Vec<f64>,
    pub energies: Vec<f64>,
    /// Hellmann–Feynman derivative `f ⟨ψ_γ|profile|ψ_γ⟩`.
    pub de_dx: Vec<f64>,
    pub psi_gamma_at_origin_sq: Vec<f64>,
    /// Smallest `|⟨ψ_γ(X_i)|ψ_γ(X_{i+1})⟩|` along the curve.
    pub min_adjacent_overlap: f64,
}

impl EnergyCurve {
    /// `dE/dX` at arbitrary `X`, linearly interpolated (clamped at the ends).
    pub fn de_dx_at(&self, x: f64) -> f64 {
        interpolate_linear(&self.x_samples, &self.de_dx, x)
    }

    pub fn energy_at(&self, x: f64) -> f64 {
        interpolate_linear(&self.x_samples, &self.energies, x)
    }

    /// Central differences of the sampled energies (interior samples only).
    pub fn central_differences(&self) -> Vec<(f64, f64)> {
        self.x_samples
            .windows(3)
            .zip(self.energies.windows(3))
            .map(|(xs, es)| (xs[1], (es[2] - es[0]) / (xs[2] - xs[0])))
            .collect()
    }
}

fn interpolate_linear(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    if xs.len() == 1 || x <= xs[0] {
        return ys[0];
    }
    if x >= xs[xs.len() - 1] {
        return ys[ys.len() - 1];
    }
    let i = xs.partition_point(|&s| s <= x) - 1;
    let u = (x - xs[i]) / (xs[i + 1] - xs[i]);
    ys[i] * (1.0 - u) + ys[i + 1] * u
}

/// Samples the conditional ground state along sorted `x_samples`, each
/// solve warm-started from its neighbour.
pub fn energy_curve(
    x_samples: &[f64],
    f_frozen: f64,
    trap: &TrapSpec,
    profile: &CouplingProfile,
    mass: f64,
    method: EigenMethod,
) -> Result<EnergyCurve> {
    if x_samples.is_empty() || x_samples.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Precondition("X samples must be non-empty and strictly increasing".into()));
    }
    let h = profile.grid.spacing();
    let mut options = GroundStateOptions { method, ..Default::default() };
    let mut curve = EnergyCurve {
        f_frozen,
        x_samples: x_samples.to_vec(),
        energies: Vec::with_capacity(x_samples.len()),
        de_dx: Vec::with_capacity(x_samples.len()),
        psi_gamma_at_origin_sq: Vec::with_capacity(x_samples.len()),
        min_adjacent_overlap: 1.0,
    };
    let mut previous: Option<WaveFunction1D> = None;
    for &x in x_samples {
        options.initial = previous.clone();
        let (psi, e) = conditional_ground_state(x, f_frozen, trap, profile, mass, &options)?;
        let expectation: f64 = psi.amplitudes.iter().zip(&profile.values).map(|(a, p)| a.norm_sqr() * p).sum::<f64>() * h;
        curve.energies.push(e);
        curve.de_dx.push(f_frozen * expectation);
        curve.psi_gamma_at_origin_sq.push(interpolate_quadratic(&psi.grid, &psi.density(), 0.0)?);
        if let Some(prev) = &previous {
            let overlap = prev.inner(&psi)?.norm();
            curve.min_adjacent_overlap = curve.min_adjacent_overlap.min(overlap);
        }
        previous = Some(psi);
    }
    Ok(curve)
}

/// Norm of the projection of `psi` onto the conditional ground-state
/// manifold `{ψ_γ(x; X, s(t)) χ(X)}`, i.e. `max_χ |⟨ψ_γ χ|Ψ⟩|`.
pub fn adiabatic_overlap(psi: &WaveFunction2D, ham: &Hamiltonian) -> Result<f64> {
    let nx = psi.grid_x.n;
    let hx = psi.grid_x.spacing();
    let strength = ham.potential(psi.time).strength;
    let options = GroundStateOptions { method: EigenMethod::Direct, ..Default::default() };
    let trap = ham.system_trap;
    let m = ham.masses().system;
    let weights: Vec<f64> = psi
        .amplitudes
        .par_chunks(nx)
        .enumerate()
        .map(|(ip, row)| -> Result<f64> {
            let x_ptr = ham.grid_pointer.point(ip);
            let (gamma, _) = conditional_ground_state(x_ptr, strength, &trap, &ham.coupling.profile, m, &options)?;
            let a: Complex64 = gamma.amplitudes.iter().zip(row).map(|(g, p)| g.conj() * p).sum::<Complex64>() * hx;
            Ok(a.norm_sqr())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((weights.iter().sum::<f64>() * psi.grid_pointer.spacing()).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{gaussian_packet, make_uniform_grid, product_state, Axis};
    use crate::model::{pulse_adiabatic, regularized_delta, CouplingSpec, Masses};
    use std::f64::consts::PI;

    fn box_trap() -> TrapSpec {
        TrapSpec::infinite_box(1.0, 0.0).unwrap()
    }

    fn box_grid(n: usize) -> Grid1D {
        make_uniform_grid(-0.5, 0.5, n).unwrap()
    }

    #[test]
    fn schedule_rounding() {
        let s = Schedule::new(0.0, 1.0, 0.3, 1).unwrap();
        assert_eq!(s.steps(), 3);
        assert_eq!(s.time_of(3), 1.0);
        assert!(Schedule::new(0.0, 1.0, 0.0, 1).is_err());
        assert!(Schedule::new(1.0, 0.0, 0.1, 1).is_err());
    }

    #[test]
    fn box_ground_state_energy() {
        let (psi, e) = ground_state_1d(&box_trap(), &box_grid(256), 1.0, None, &Default::default()).unwrap();
        let exact = PI * PI / 2.0;
        assert!((e / exact - 1.0).abs() < 1e-3, "E = {e}");
        assert!((psi.norm() - 1.0).abs() < 1e-12);
        assert!(psi.amplitudes.iter().all(|a| a.re >= 0.0 && a.im == 0.0));
    }

    #[test]
    fn harmonic_ground_state_energy() {
        let g = make_uniform_grid(-8.0, 8.0, 256).unwrap();
        let trap = TrapSpec::harmonic(1.0, 0.0, Axis::System).unwrap();
        let (_, e) = ground_state_1d(&trap, &g, 1.0, None, &Default::default()).unwrap();
        assert!((e / 0.5 - 1.0).abs() < 1e-3, "E = {e}");
    }

    #[test]
    fn box_first_excited_state_by_orthogonalization() {
        let g = box_grid(256);
        let (ground, _) = ground_state_1d(&box_trap(), &g, 1.0, None, &Default::default()).unwrap();
        let opts = GroundStateOptions { orthogonal_to: vec![ground], ..Default::default() };
        let (excited, e) = ground_state_1d(&box_trap(), &g, 1.0, None, &opts).unwrap();
        assert!((e / (2.0 * PI * PI) - 1.0).abs() < 2e-3, "E = {e}");
        assert!(excited.density_at_origin().unwrap() < 1e-6);
    }

    #[test]
    fn imaginary_time_and_direct_agree() {
        let g = box_grid(256);
        let profile = regularized_delta(&g, 0.02).unwrap();
        let it = GroundStateOptions::default();
        let direct = GroundStateOptions { method: EigenMethod::Direct, ..Default::default() };
        for fx in [0.0, 0.01, -0.01, 0.5] {
            let (_, e1) = conditional_ground_state(fx, 1.0, &box_trap(), &profile, 1.0, &it).unwrap();
            let (_, e2) = conditional_ground_state(fx, 1.0, &box_trap(), &profile, 1.0, &direct).unwrap();
            assert!((e1 - e2).abs() < 1e-8, "fX={fx}: {e1} vs {e2}");
        }
    }

    #[test]
    fn conditional_first_order_shift() {
        let g = box_grid(256);
        let profile = regularized_delta(&g, 0.02).unwrap();
        let opts = GroundStateOptions { method: EigenMethod::Direct, ..Default::default() };
        let (psi0, e0) = conditional_ground_state(0.0, 1.0, &box_trap(), &profile, 1.0, &opts).unwrap();
        let (direct0, _) = ground_state_1d(&box_trap(), &g, 1.0, None, &opts).unwrap();
        assert!((psi0.inner(&direct0).unwrap().norm() - 1.0).abs() < 1e-12);
        assert!((e0 - PI * PI / 2.0).abs() < 1e-3);
        for fx in [0.01, -0.01] {
            let (_, e) = conditional_ground_state(fx, 1.0, &box_trap(), &profile, 1.0, &opts).unwrap();
            let expected = fx * 2.0;
            assert!(((e - e0) - expected).abs() < 0.05 * expected.abs(), "fX={fx}: shift {}", e - e0);
        }
    }

    #[test]
    fn energy_curve_hellmann_feynman() {
        let g = box_grid(256);
        let profile = regularized_delta(&g, 0.02).unwrap();
        let xs: Vec<f64> = (0..11).map(|i| -0.5 + 0.1 * i as f64).collect();
        let curve = energy_curve(&xs, 0.002, &box_trap(), &profile, 1.0, EigenMethod::ImaginaryTime).unwrap();
        assert!(curve.min_adjacent_overlap > 0.999);
        for (d, rho0) in curve.de_dx.iter().zip(&curve.psi_gamma_at_origin_sq) {
            assert!((d - 0.004).abs() < 0.02 * 0.004);
            assert!((d - 0.002 * rho0).abs() < 0.01 * d.abs());
        }
        for (x, cd) in curve.central_differences() {
            let hf = curve.de_dx_at(x);
            assert!((cd - hf).abs() < 0.005 * hf.abs(), "X={x}: {cd} vs {hf}");
        }
        let flat = energy_curve(&xs, 0.0, &box_trap(), &profile, 1.0, EigenMethod::Direct).unwrap();
        assert!(flat.de_dx.iter().all(|d| *d == 0.0));
        let e1 = flat.energies[0];
        assert!(flat.energies.iter().all(|e| (e - e1).abs() < 1e-12));
        let flipped = energy_curve(&xs, -0.002, &box_trap(), &profile, 1.0, EigenMethod::Direct).unwrap();
        for (a, b) in flipped.de_dx.iter().zip(&curve.de_dx).rev().take(1) {
            assert!(a * b < 0.0);
        }
        // |E - E1| even in fX to first order: E(-X; f) - E1 = -(E(X; f) - E1).
        for i in 0..xs.len() {
            let j = xs.len() - 1 - i;
            let up = curve.energies[i] - e1;
            let down = flipped.energies[j] - e1;
            assert!((up - down).abs() < 0.01 * up.abs().max(1e-6));
        }
    }

    fn free_setup(m_pointer: f64, a: f64) -> (Hamiltonian, WaveFunction2D) {
        let gx = box_grid(64);
        let gp = make_uniform_grid(-1.5, 1.5, 128).unwrap();
        let spec = CouplingSpec::protective(
            regularized_delta(&gx, 0.05).unwrap(),
            pulse_adiabatic(100.0, a).unwrap(),
            Masses::new(1.0, m_pointer).unwrap(),
        )
        .unwrap();
        let ham = Hamiltonian::new(spec, box_trap(), TrapSpec::free(Axis::Pointer), gx, gp).unwrap();
        let opts = GroundStateOptions { method: EigenMethod::Direct, ..Default::default() };
        let (psi, _) = ground_state_1d(&box_trap(), &gx, 1.0, None, &opts).unwrap();
        let phi = gaussian_packet(&gp, 0.0, 0.1, 0.0).unwrap();
        (ham, product_state(&psi, &phi).unwrap())
    }

    #[test]
    fn free_pointer_spreading() {
        let (ham, psi0) = free_setup(1000.0, 0.0);
        let schedule = Schedule::new(0.0, 10.0, 0.05, 1000).unwrap();
        let tl = propagate(&psi0, &ham, &schedule, PropagateOptions::default(), &mut []).unwrap();
        let var = tl.final_state.position_variance(Axis::Pointer);
        assert!((var / 0.0125 - 1.0).abs() < 0.01, "variance {var}");
        assert!(tl.norm_drift < 1e-10);
        assert!(tl.final_state.position_mean(Axis::Pointer).abs() < 1e-8);
    }

    #[test]
    fn stationary_box_state_keeps_overlap_and_phase() {
        let (ham, psi0) = free_setup(1e12, 0.0);
        let gx = psi0.grid_x;
        let opts = GroundStateOptions { method: EigenMethod::Direct, ..Default::default() };
        let (_, e1) = ground_state_1d(&box_trap(), &gx, 1.0, None, &opts).unwrap();
        let schedule = Schedule::new(0.0, 1.0, 1e-3, 1000).unwrap();
        let tl = propagate(&psi0, &ham, &schedule, PropagateOptions::default(), &mut []).unwrap();
        let overlap = psi0.inner(&tl.final_state).unwrap();
        assert!((overlap.norm() - 1.0).abs() < 1e-8);
        let phase_error = (overlap * Complex64::from_polar(1.0, e1)).arg();
        assert!(phase_error.abs() < 1e-4, "phase error {phase_error}");
        // Hard-wall nodes untouched.
        let f = &tl.final_state;
        for ip in 0..f.grid_pointer.n {
            assert_eq!(f.at(0, ip), Complex64::new(0.0, 0.0));
            assert_eq!(f.at(gx.n - 1, ip), Complex64::new(0.0, 0.0));
        }
    }

    #[test]
    fn second_order_self_convergence() {
        let gx = box_grid(64);
        let gp = make_uniform_grid(-1.5, 1.5, 64).unwrap();
        let spec = CouplingSpec::protective(
            regularized_delta(&gx, 0.05).unwrap(),
            pulse_adiabatic(0.4, 2.0).unwrap(),
            Masses::new(1.0, 10.0).unwrap(),
        )
        .unwrap();
        let ham = Hamiltonian::new(spec, box_trap(), TrapSpec::free(Axis::Pointer), gx, gp).unwrap();
        let psi = crate::fields::gaussian_packet(&gx, 0.0, 0.07, 3.0).unwrap();
        let phi = gaussian_packet(&gp, 0.2, 0.2, 3.0).unwrap();
        let psi0 = product_state(&psi, &phi).unwrap();
        let run = |dt: f64| {
            let s = Schedule::new(0.0, 0.4, dt, 1).unwrap();
            propagate(&psi0, &ham, &s, PropagateOptions::default(), &mut []).unwrap().final_state
        };
        let (a, b, c) = (run(0.0005), run(0.00025), run(0.000125));
        let diff = |u: &WaveFunction2D, v: &WaveFunction2D| {
            (u.amplitudes.iter().zip(&v.amplitudes).map(|(p, q)| (p - q).norm_sqr()).sum::<f64>() * u.cell_area()).sqrt()
        };
        let ratio = diff(&a, &b) / diff(&b, &c);
        assert!((ratio - 4.0).abs() < 0.4, "convergence ratio {ratio}");
    }

    #[test]
    fn frozen_coupling_conserves_energy() {
        let gx = box_grid(64);
        let gp = make_uniform_grid(-1.5, 1.5, 64).unwrap();
        let spec = CouplingSpec::protective(
            regularized_delta(&gx, 0.05).unwrap(),
            pulse_adiabatic(1e9, 1e9).unwrap(),
            Masses::new(1.0, 10.0).unwrap(),
        )
        .unwrap();
        let ham = Hamiltonian::new(spec, box_trap(), TrapSpec::free(Axis::Pointer), gx, gp).unwrap();
        let t_start = 0.5e9;
        let psi = crate::fields::gaussian_packet(&gx, 0.05, 0.06, 10.0).unwrap();
        let phi = gaussian_packet(&gp, 0.2, 0.2, 3.0).unwrap();
        let mut psi0 = product_state(&psi, &phi).unwrap();
        psi0.time = t_start;
        let e0 = energy_expectation(&psi0, &ham, t_start);
        // The envelope changes by ~1e-17 relative over the run.
        let s = Schedule::new(t_start, t_start + 1.0, 1e-4, 1000).unwrap();
        let tl = propagate(&psi0, &ham, &s, PropagateOptions::default(), &mut []).unwrap();
        let e1 = energy_expectation(&tl.final_state, &ham, t_start + 1.0);
        assert!(((e1 - e0) / e0).abs() < 1e-6, "{e0} -> {e1}");
    }

    #[test]
    fn oversized_step_is_rejected() {
        let (ham, psi0) = free_setup(1e-3, 0.0);
        assert!(matches!(step_tdse(&psi0, &ham, 0.1), Err(Error::Precondition(_))));
    }

    struct Counter(usize, usize);
    impl Observer for Counter {
        fn stride(&self) -> usize {
            self.1
        }
        fn observe(&mut self, _: &WaveFunction2D) -> Result<()> {
            self.0 += 1;
            Ok(())
        }
    }

    struct Failing;
    impl Observer for Failing {
        fn observe(&mut self, _: &WaveFunction2D) -> Result<()> {
            Err(Error::Observer("boom".into()))
        }
    }

    #[test]
    fn observers_follow_their_stride() {
        let (ham, psi0) = free_setup(1000.0, 0.0);
        let s = Schedule::new(0.0, 1.0, 0.01, 25).unwrap();
        let mut c = Counter(0, 30);
        let opts = PropagateOptions { keep_snapshots: true, observe_initial: true };
        let tl = propagate(&psi0, &ham, &s, opts, &mut [&mut c]).unwrap();
        // Steps 0, 30, 60, 90 and the final step 100.
        assert_eq!(c.0, 5);
        assert_eq!(tl.snapshots.len(), 5);
        assert_eq!(tl.snapshots.last().unwrap().time, 1.0);
        let err = propagate(&psi0, &ham, &s, PropagateOptions::default(), &mut [&mut Failing]);
        assert!(matches!(err, Err(Error::Observer(_))));
    }
}
