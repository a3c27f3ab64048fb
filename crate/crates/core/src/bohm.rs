//! Bohmian layer: guidance velocities, the quantum potential, forces from
//! `U = Q + V`, quantum-equilibrium sampling and trajectory integration.
//!
//! Fields are nodal arrays with the same layout as [`WaveFunction2D`]
//! (`ix + n_x · i_ptr`). Nodes where `|Ψ|²` falls below
//! `DENSITY_FLOOR · max |Ψ|²` are masked: velocities there are 0 and
//! derived quantities are not evaluated.

use std::f64::consts::{FRAC_PI_2, PI};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{Axis, Grid1D, WaveFunction2D};
use crate::model::{CouplingMode, CouplingSpec, Hamiltonian, Masses};
use crate::propagator::Observer;

/// Relative density below which a node counts as a node of `Ψ`.
pub const DENSITY_FLOOR: f64 = 1e-12;

/// Lowest acceptance rate tolerated by the rejection sampler.
pub const REJECTION_FLOOR: f64 = 1e-3;

/// `true` where `|Ψ|² < DENSITY_FLOOR · max |Ψ|²`.
pub fn node_mask(psi: &WaveFunction2D) -> Vec<bool> {
    let rho = psi.density();
    let max = rho.iter().cloned().fold(0.0, f64::max);
    rho.iter().map(|r| *r < DENSITY_FLOOR * max).collect()
}

/// Phase increment `arg(b a*)` folded into `(-π/2, π/2]`. A sign change of a
/// real field therefore contributes nothing, as a node should.
#[inline]
fn phase_step(a: Complex64, b: Complex64) -> f64 {
    let d = (b * a.conj()).arg();
    if d > FRAC_PI_2 {
        d - PI
    } else if d <= -FRAC_PI_2 {
        d + PI
    } else {
        d
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VelocityField2D {
    pub grid_x: Grid1D,
    pub grid_pointer: Grid1D,
    pub v_x: Vec<f64>,
    pub v_pointer: Vec<f64>,
    pub node_mask: Vec<bool>,
}

/// Phase gradient of one line. Neighbours that are masked are skipped, so
/// nodes next to a node or a wall use a one-sided difference.
fn line_velocity(amps: &[Complex64], mask: &[bool], h: f64, mass: f64, out: &mut [f64]) {
    let n = amps.len();
    for i in 0..n {
        if mask[i] {
            out[i] = 0.0;
            continue;
        }
        let right = (i + 1 < n && !mask[i + 1]).then(|| phase_step(amps[i], amps[i + 1]));
        let left = (i > 0 && !mask[i - 1]).then(|| phase_step(amps[i - 1], amps[i]));
        let grad = match (left, right) {
            (Some(l), Some(r)) => 0.5 * (l + r) / h,
            (Some(d), None) | (None, Some(d)) => d / h,
            (None, None) => 0.0,
        };
        out[i] = grad / mass;
    }
}

/// Guidance velocities `(1/mass) ∂ arg Ψ` along both axes.
pub fn velocity_field(psi: &WaveFunction2D, masses: Masses) -> VelocityField2D {
    let nx = psi.grid_x.n;
    let np = psi.grid_pointer.n;
    let mask = node_mask(psi);
    let hx = psi.grid_x.spacing();
    let hp = psi.grid_pointer.spacing();

    let mut v_x = vec![0.0; nx * np];
    v_x.par_chunks_mut(nx).enumerate().for_each(|(ip, out)| {
        let range = ip * nx..(ip + 1) * nx;
        line_velocity(&psi.amplitudes[range.clone()], &mask[range], hx, masses.system, out);
    });

    let columns: Vec<Vec<f64>> = (0..nx)
        .into_par_iter()
        .map(|ix| {
            let amps: Vec<Complex64> = (0..np).map(|ip| psi.amplitudes[ix + nx * ip]).collect();
            let m: Vec<bool> = (0..np).map(|ip| mask[ix + nx * ip]).collect();
            let mut out = vec![0.0; np];
            line_velocity(&amps, &m, hp, masses.pointer, &mut out);
            out
        })
        .collect();
    let mut v_pointer = vec![0.0; nx * np];
    for (ix, col) in columns.iter().enumerate() {
        for (ip, v) in col.iter().enumerate() {
            v_pointer[ix + nx * ip] = *v;
        }
    }
    VelocityField2D { grid_x: psi.grid_x, grid_pointer: psi.grid_pointer, v_x, v_pointer, node_mask: mask }
}

/// Result of sampling a nodal field at an arbitrary point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Probe {
    pub v_x: f64,
    pub v_pointer: f64,
    /// The nearest node is masked; the velocity is 0.
    pub masked: bool,
}

impl VelocityField2D {
    pub fn masked_count(&self) -> usize {
        self.node_mask.iter().filter(|m| **m).count()
    }

    pub fn max_speed(&self) -> (f64, f64) {
        let mx = self.v_x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mp = self.v_pointer.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        (mx, mp)
    }

    /// Bilinear interpolation of the nodal velocities; `(x, X)` must lie on the grid.
    pub fn velocity_at(&self, x: f64, pointer_x: f64) -> Probe {
        let (i, u) = cell(&self.grid_x, x);
        let (j, w) = cell(&self.grid_pointer, pointer_x);
        let nx = self.grid_x.n;
        let near = (i + (u >= 0.5) as usize) + nx * (j + (w >= 0.5) as usize);
        if self.node_mask[near] {
            return Probe { v_x: 0.0, v_pointer: 0.0, masked: true };
        }
        let idx = [i + nx * j, i + 1 + nx * j, i + nx * (j + 1), i + 1 + nx * (j + 1)];
        let wts = [(1.0 - u) * (1.0 - w), u * (1.0 - w), (1.0 - u) * w, u * w];
        let mut probe = Probe { v_x: 0.0, v_pointer: 0.0, masked: false };
        for (k, wt) in idx.iter().zip(wts) {
            probe.v_x += wt * self.v_x[*k];
            probe.v_pointer += wt * self.v_pointer[*k];
        }
        probe
    }
}

/// Lower node index and fractional offset of `x` within its cell.
fn cell(grid: &Grid1D, x: f64) -> (usize, f64) {
    let s = ((x - grid.min) / grid.spacing()).clamp(0.0, (grid.n - 1) as f64);
    let i = (s.floor() as usize).min(grid.n - 2);
    (i, s - i as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantumPotentialField {
    pub grid_x: Grid1D,
    pub grid_pointer: Grid1D,
    pub q_x: Vec<f64>,
    pub q_pointer: Vec<f64>,
    /// `true` where Q is not evaluated: masked nodes, nodes with a masked
    /// neighbour, and the two ends of the pointer axis.
    pub mask: Vec<bool>,
}

impl QuantumPotentialField {
    pub fn total(&self, k: usize) -> f64 {
        self.q_x[k] + self.q_pointer[k]
    }
}

/// `Q = -(1/2m) ∂²_x|Ψ|/|Ψ| - (1/2M) ∂²_X|Ψ|/|Ψ|` by second central differences.
/// Along `x` the hard walls supply the boundary value `|Ψ| = 0`.
pub fn quantum_potential(psi: &WaveFunction2D, masses: Masses) -> QuantumPotentialField {
    let nx = psi.grid_x.n;
    let np = psi.grid_pointer.n;
    let hx = psi.grid_x.spacing();
    let hp = psi.grid_pointer.spacing();
    let amp: Vec<f64> = psi.amplitudes.iter().map(|a| a.norm()).collect();
    let node = node_mask(psi);
    let mut q_x = vec![0.0; nx * np];
    let mut q_pointer = vec![0.0; nx * np];
    let mut mask = vec![false; nx * np];
    q_x.par_chunks_mut(nx)
        .zip(q_pointer.par_chunks_mut(nx))
        .zip(mask.par_chunks_mut(nx))
        .enumerate()
        .for_each(|(ip, ((qx, qp), m))| {
            for ix in 0..nx {
                let k = ix + nx * ip;
                let edge = ip == 0 || ip + 1 == np;
                let stencil_masked = node[k]
                    || (ix > 0 && node[k - 1] && !is_end(ix - 1, nx))
                    || (ix + 1 < nx && node[k + 1] && !is_end(ix + 1, nx))
                    || (!edge && (node[k - nx] || node[k + nx]));
                if edge || stencil_masked || ix == 0 || ix + 1 == nx {
                    m[ix] = true;
                    continue;
                }
                let a = amp[k];
                qx[ix] = -(amp[k + 1] - 2.0 * a + amp[k - 1]) / (2.0 * masses.system * hx * hx * a);
                qp[ix] = -(amp[k + nx] - 2.0 * a + amp[k - nx]) / (2.0 * masses.pointer * hp * hp * a);
            }
        });
    QuantumPotentialField { grid_x: psi.grid_x, grid_pointer: psi.grid_pointer, q_x, q_pointer, mask }
}

/// Grid ends along `x` are walls (or far tails); their zero amplitude is a
/// legitimate boundary value rather than a node of the wavefunction.
fn is_end(ix: usize, nx: usize) -> bool {
    ix == 0 || ix + 1 == nx
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForceField {
    pub grid_x: Grid1D,
    pub grid_pointer: Grid1D,
    pub f_x: Vec<f64>,
    pub f_pointer: Vec<f64>,
    pub mask: Vec<bool>,
}

/// `F = -∇(Q + V)` at time `t` by central differences, with `V` the
/// coupling plus trap potentials. Nodes whose stencil touches a wall, a
/// masked node or the pointer ends are masked.
pub fn total_force_field(psi: &WaveFunction2D, ham: &Hamiltonian, t: f64) -> ForceField {
    let q = quantum_potential(psi, ham.masses());
    let pot = ham.potential(t);
    force_from(&q, |ix, ip| pot.value(ix, ip), |ix| ham.is_wall(ix))
}

/// Same as [`total_force_field`] with an arbitrary potential `v(ix, i_ptr)`.
pub fn force_from(
    q: &QuantumPotentialField,
    v: impl Fn(usize, usize) -> f64 + Sync,
    is_wall: impl Fn(usize) -> bool + Sync,
) -> ForceField {
    let nx = q.grid_x.n;
    let np = q.grid_pointer.n;
    let hx = q.grid_x.spacing();
    let hp = q.grid_pointer.spacing();
    let u = |k: usize| q.total(k) + v(k % nx, k / nx);
    let mut f_x = vec![0.0; nx * np];
    let mut f_pointer = vec![0.0; nx * np];
    let mut mask = vec![true; nx * np];
    f_x.par_chunks_mut(nx)
        .zip(f_pointer.par_chunks_mut(nx))
        .zip(mask.par_chunks_mut(nx))
        .enumerate()
        .for_each(|(ip, ((fx, fp), m))| {
            if ip == 0 || ip + 1 == np {
                return;
            }
            for ix in 1..nx - 1 {
                let k = ix + nx * ip;
                let stencil = [k, k - 1, k + 1, k - nx, k + nx];
                if is_wall(ix) || is_wall(ix - 1) || is_wall(ix + 1) || stencil.iter().any(|&s| q.mask[s]) {
                    continue;
                }
                m[ix] = false;
                fx[ix] = -(u(k + 1) - u(k - 1)) / (2.0 * hx);
                fp[ix] = -(u(k + nx) - u(k - nx)) / (2.0 * hp);
            }
        });
    ForceField { grid_x: q.grid_x, grid_pointer: q.grid_pointer, f_x, f_pointer, mask }
}

/// Extra forces produced by the impulsive coupling `P0 f(t) D(x) X`:
/// `(-P0 f X D'(x), -P0 f D(x))`.
pub fn impulsive_delta_forces(spec: &CouplingSpec, x: f64, pointer_x: f64, t: f64) -> Result<(f64, f64)> {
    if spec.mode != CouplingMode::Impulsive {
        return Err(Error::Precondition("impulsive forces need an impulsive coupling".into()));
    }
    let s = spec.strength(t);
    Ok((-s * pointer_x * spec.profile.derivative(x), -s * spec.profile.value(x)))
}

/// Quantum potential of the pointer factor `sqrt(ρ_X)`, one value per
/// pointer node (0 at the ends and where the marginal vanishes).
pub fn pointer_factor_potential(psi: &WaveFunction2D, masses: Masses) -> Vec<f64> {
    let rho = psi.marginal_density(Axis::Pointer);
    let max = rho.iter().cloned().fold(0.0, f64::max);
    let r: Vec<f64> = rho.iter().map(|v| v.max(0.0).sqrt()).collect();
    let h = psi.grid_pointer.spacing();
    let n = r.len();
    (0..n)
        .map(|j| {
            if j == 0 || j + 1 == n || rho[j] < DENSITY_FLOOR * max {
                0.0
            } else {
                -(r[j + 1] - 2.0 * r[j] + r[j - 1]) / (2.0 * masses.pointer * h * h * r[j])
            }
        })
        .collect()
}

/// A sampled point `(x, X)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    #[serde(rename = "X")]
    pub pointer: f64,
}

/// Cumulative distribution over cells `[x_i - h/2, x_i + h/2]`.
fn cell_cdf(weights: &[f64]) -> Vec<f64> {
    let total: f64 = weights.iter().sum();
    let mut acc = 0.0;
    weights
        .iter()
        .map(|w| {
            acc += w / total;
            acc
        })
        .collect()
}

fn draw_cell(cdf: &[f64], u: f64) -> usize {
    cdf.partition_point(|&c| c <= u).min(cdf.len() - 1)
}

fn cell_point(grid: &Grid1D, i: usize, u: f64) -> f64 {
    (grid.point(i) + (u - 0.5) * grid.spacing()).clamp(grid.min, grid.max)
}

/// `n` independent draws from the piecewise-constant density `|Ψ|²`
/// (constant on each midpoint cell). Product states are sampled exactly by
/// inverse transform of the two marginals; otherwise cells proposed from
/// the marginals are accepted with probability `ρ / (c ρ_x ρ_X)`.
pub fn sample_quantum_equilibrium(psi: &WaveFunction2D, n: usize, seed: u64) -> Result<Vec<Point>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if n == 0 {
        return Ok(Vec::new());
    }
    let nx = psi.grid_x.n;
    let rho_x = psi.marginal_density(Axis::System);
    let rho_p = psi.marginal_density(Axis::Pointer);
    let (cdf_x, cdf_p) = (cell_cdf(&rho_x), cell_cdf(&rho_p));
    let purity = psi.factorization_metric().purity;
    let mut points = Vec::with_capacity(n);

    if (purity - 1.0).abs() < 1e-9 {
        for _ in 0..n {
            let i = draw_cell(&cdf_x, rng.random());
            let j = draw_cell(&cdf_p, rng.random());
            points.push(Point {
                x: cell_point(&psi.grid_x, i, rng.random()),
                pointer: cell_point(&psi.grid_pointer, j, rng.random()),
            });
        }
        return Ok(points);
    }

    let rho = psi.density();
    let ratio = |i: usize, j: usize| {
        let prod = rho_x[i] * rho_p[j];
        if prod > 0.0 {
            rho[i + nx * j] / prod
        } else {
            0.0
        }
    };
    let bound = (0..rho.len()).map(|k| ratio(k % nx, k / nx)).fold(0.0, f64::max);
    let mut attempts = 0usize;
    while points.len() < n {
        attempts += 1;
        let i = draw_cell(&cdf_x, rng.random());
        let j = draw_cell(&cdf_p, rng.random());
        let accept: f64 = rng.random();
        if accept * bound < ratio(i, j) {
            points.push(Point {
                x: cell_point(&psi.grid_x, i, rng.random()),
                pointer: cell_point(&psi.grid_pointer, j, rng.random()),
            });
        }
        if attempts >= 10_000 && (points.len() as f64) < REJECTION_FLOOR * attempts as f64 {
            return Err(Error::Sampling(format!(
                "rejection efficiency {:.2e} below floor {REJECTION_FLOOR:e}",
                points.len() as f64 / attempts as f64
            )));
        }
    }
    Ok(points)
}

/// Kolmogorov–Smirnov distance between samples and the piecewise-constant
/// density `rho` on `grid`.
pub fn ks_distance(samples: &[f64], grid: &Grid1D, rho: &[f64]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let h = grid.spacing();
    let total: f64 = rho.iter().sum();
    let mut cum = Vec::with_capacity(rho.len() + 1);
    cum.push(0.0);
    for r in rho {
        cum.push(cum.last().unwrap() + r / total);
    }
    let cdf = |x: f64| {
        let s = (x - grid.min) / h + 0.5;
        if s <= 0.0 {
            return 0.0;
        }
        let i = s.floor() as usize;
        if i >= rho.len() {
            return 1.0;
        }
        cum[i] + (s - i as f64) * (cum[i + 1] - cum[i])
    };
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    sorted
        .iter()
        .enumerate()
        .map(|(k, &x)| {
            let f = cdf(x);
            (f - k as f64 / n).abs().max(((k + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[repr(u8)]
pub enum TrajectoryFlag {
    Ok = 0,
    /// Left the domain and was clamped back.
    Clamped = 1,
    /// Entered the node mask and stopped.
    Masked = 2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: usize,
    pub seed: u64,
    pub initial: Point,
    pub times: Vec<f64>,
    pub x: Vec<f64>,
    #[serde(rename = "X")]
    pub pointer: Vec<f64>,
    pub flags: Vec<TrajectoryFlag>,
}

impl Trajectory {
    pub fn max_displacement_x(&self) -> f64 {
        self.x.iter().map(|x| (x - self.initial.x).abs()).fold(0.0, f64::max)
    }
}

/// Writes `traj_id,t,x,X,flag` rows.
pub fn write_trajectories_csv<W: std::io::Write>(out: &mut W, trajectories: &[Trajectory]) -> Result<()> {
    writeln!(out, "traj_id,t,x,X,flag")?;
    for tr in trajectories {
        for k in 0..tr.times.len() {
            writeln!(out, "{},{:e},{:e},{:e},{}", tr.id, tr.times[k], tr.x[k], tr.pointer[k], tr.flags[k] as u8)?;
        }
    }
    Ok(())
}

/// Distances of the ensemble marginals from `|Ψ(t)|²` at one instant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EquivarianceCheck {
    pub t: f64,
    pub ks_x: f64,
    #[serde(rename = "ks_X")]
    pub ks_pointer: f64,
}

#[derive(Debug, Clone)]
struct Walker {
    pos: Point,
    flag: TrajectoryFlag,
    max_dx: f64,
    max_dpointer: f64,
}

/// Trajectory ensemble advanced frame by frame as a propagation observer.
///
/// Between two consecutive frames the velocity is the bilinear nodal
/// interpolant, blended linearly in time, and integrated with classical
/// RK4. Substeps keep every move below half a grid spacing on both axes.
#[derive(Debug, Clone)]
pub struct TrajectoryEnsemble {
    masses: Masses,
    stride: usize,
    seed: u64,
    initial: Vec<Point>,
    walkers: Vec<Walker>,
    /// Full paths are kept for the first `kept` walkers at every
    /// `record_every`-th frame.
    kept: Vec<Trajectory>,
    record_every: usize,
    frames_seen: usize,
    previous: Option<(f64, VelocityField2D)>,
    /// Interval of the system axis open to trajectories (between the walls).
    x_bounds: (f64, f64),
    checkpoints: Vec<f64>,
    pub equivariance: Vec<EquivarianceCheck>,
    pub masked_events: usize,
    pub clamped_events: usize,
}

impl TrajectoryEnsemble {
    pub fn new(points: Vec<Point>, seed: u64, masses: Masses, x_bounds: (f64, f64)) -> Self {
        let walkers = points
            .iter()
            .map(|p| Walker { pos: *p, flag: TrajectoryFlag::Ok, max_dx: 0.0, max_dpointer: 0.0 })
            .collect();
        Self {
            masses,
            stride: 1,
            seed,
            initial: points,
            walkers,
            kept: Vec::new(),
            record_every: 1,
            frames_seen: 0,
            previous: None,
            x_bounds,
            checkpoints: Vec::new(),
            equivariance: Vec::new(),
            masked_events: 0,
            clamped_events: 0,
        }
    }

    /// Observe every `stride`-th propagation step.
    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride.max(1);
        self
    }

    /// Keep full paths of the first `count` members, one record per `every` frames.
    pub fn keep_paths(mut self, count: usize, every: usize) -> Self {
        self.record_every = every.max(1);
        self.kept = self.initial[..count.min(self.initial.len())]
            .iter()
            .enumerate()
            .map(|(id, p)| Trajectory {
                id,
                seed: self.seed,
                initial: *p,
                times: Vec::new(),
                x: Vec::new(),
                pointer: Vec::new(),
                flags: Vec::new(),
            })
            .collect();
        self
    }

    /// Compare ensemble and `|Ψ|²` marginals when a frame lands on one of `times`.
    pub fn with_checkpoints(mut self, times: &[f64]) -> Self {
        self.checkpoints = times.to_vec();
        self
    }

    pub fn initial_points(&self) -> &[Point] {
        &self.initial
    }

    pub fn positions(&self) -> Vec<Point> {
        self.walkers.iter().map(|w| w.pos).collect()
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.kept
    }

    pub fn into_trajectories(self) -> Vec<Trajectory> {
        self.kept
    }

    /// Largest `|x(t) - x(0)|` seen at any frame, per member.
    pub fn max_displacements_x(&self) -> Vec<f64> {
        self.walkers.iter().map(|w| w.max_dx).collect()
    }

    pub fn max_displacements_pointer(&self) -> Vec<f64> {
        self.walkers.iter().map(|w| w.max_dpointer).collect()
    }

    pub fn flags(&self) -> Vec<TrajectoryFlag> {
        self.walkers.iter().map(|w| w.flag).collect()
    }

    fn record(&mut self, t: f64) {
        if !self.frames_seen.is_multiple_of(self.record_every) {
            return;
        }
        for (tr, w) in self.kept.iter_mut().zip(&self.walkers) {
            tr.times.push(t);
            tr.x.push(w.pos.x);
            tr.pointer.push(w.pos.pointer);
            tr.flags.push(w.flag);
        }
    }

    fn check_equivariance(&mut self, psi: &WaveFunction2D) {
        let t = psi.time;
        if !self.checkpoints.iter().any(|c| (c - t).abs() <= 1e-9 * t.abs().max(1.0)) {
            return;
        }
        let xs: Vec<f64> = self.walkers.iter().map(|w| w.pos.x).collect();
        let ps: Vec<f64> = self.walkers.iter().map(|w| w.pos.pointer).collect();
        self.equivariance.push(EquivarianceCheck {
            t,
            ks_x: ks_distance(&xs, &psi.grid_x, &psi.marginal_density(Axis::System)),
            ks_pointer: ks_distance(&ps, &psi.grid_pointer, &psi.marginal_density(Axis::Pointer)),
        });
    }
}

fn advance(walker: &mut Walker, start: Point, a: &VelocityField2D, b: &VelocityField2D, t0: f64, t1: f64, x_bounds: (f64, f64)) {
    if walker.flag == TrajectoryFlag::Masked {
        return;
    }
    let span = t1 - t0;
    let velocity = |p: Point, s: f64| -> Option<(f64, f64)> {
        let pa = a.velocity_at(p.x, p.pointer);
        let pb = b.velocity_at(p.x, p.pointer);
        if pa.masked || pb.masked {
            return None;
        }
        Some(((1.0 - s) * pa.v_x + s * pb.v_x, (1.0 - s) * pa.v_pointer + s * pb.v_pointer))
    };
    let hx = a.grid_x.spacing();
    let hp = a.grid_pointer.spacing();
    let Some((vx, vp)) = velocity(walker.pos, 0.0) else {
        walker.flag = TrajectoryFlag::Masked;
        return;
    };
    let (vx1, vp1) = velocity(walker.pos, 1.0).unwrap_or((vx, vp));
    let reach = (vx.abs().max(vx1.abs()) * span / hx).max(vp.abs().max(vp1.abs()) * span / hp);
    let substeps = ((2.0 * reach).ceil() as usize).clamp(1, 100_000);
    let dt = span / substeps as f64;
    let du = 1.0 / substeps as f64;
    let clamp = |p: Point| -> (Point, bool) {
        let x = p.x.clamp(x_bounds.0, x_bounds.1);
        let q = p.pointer.clamp(a.grid_pointer.min, a.grid_pointer.max);
        (Point { x, pointer: q }, x != p.x || q != p.pointer)
    };
    let shift = |p: Point, k: (f64, f64), f: f64| clamp(Point { x: p.x + f * k.0, pointer: p.pointer + f * k.1 }).0;
    let mut p = walker.pos;
    for n in 0..substeps {
        let s = n as f64 * du;
        let stages = (|| {
            let k1 = velocity(p, s)?;
            let k2 = velocity(shift(p, k1, 0.5 * dt), s + 0.5 * du)?;
            let k3 = velocity(shift(p, k2, 0.5 * dt), s + 0.5 * du)?;
            let k4 = velocity(shift(p, k3, dt), s + du)?;
            Some((
                (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0) / 6.0,
                (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1) / 6.0,
            ))
        })();
        let Some(v) = stages else {
            walker.flag = TrajectoryFlag::Masked;
            break;
        };
        let (next, clamped) = clamp(Point { x: p.x + dt * v.0, pointer: p.pointer + dt * v.1 });
        if clamped {
            walker.flag = TrajectoryFlag::Clamped;
        }
        p = next;
    }
    walker.pos = p;
    walker.max_dx = walker.max_dx.max((p.x - start.x).abs());
    walker.max_dpointer = walker.max_dpointer.max((p.pointer - start.pointer).abs());
}

impl Observer for TrajectoryEnsemble {
    fn stride(&self) -> usize {
        self.stride
    }

    fn observe(&mut self, psi: &WaveFunction2D) -> Result<()> {
        let t = psi.time;
        if let Some((t_prev, _)) = &self.previous {
            if t <= *t_prev {
                return Ok(());
            }
        }
        let field = velocity_field(psi, self.masses);
        if let Some((t_prev, prev)) = self.previous.take() {
            let bounds = self.x_bounds;
            self.walkers
                .par_iter_mut()
                .zip(self.initial.par_iter())
                .for_each(|(w, start)| advance(w, *start, &prev, &field, t_prev, t, bounds));
            if self.walkers.iter().any(|w| !(w.pos.x.is_finite() && w.pos.pointer.is_finite())) {
                return Err(Error::Observer(format!("non-finite trajectory position at t = {t}")));
            }
        }
        self.frames_seen += 1;
        self.masked_events = self.walkers.iter().filter(|w| w.flag == TrajectoryFlag::Masked).count();
        self.clamped_events = self.walkers.iter().filter(|w| w.flag == TrajectoryFlag::Clamped).count();
        // The first frame is always recorded.
        let first = self.previous.is_none() && self.frames_seen == 1;
        if first {
            let every = self.record_every;
            self.record_every = 1;
            self.record(t);
            self.record_every = every;
        } else {
            self.record(t);
        }
        self.check_equivariance(psi);
        self.previous = Some((t, field));
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{gaussian_packet, make_uniform_grid, product_state, WaveFunction1D};
    use crate::model::{gaussian_d, pulse_impulsive, TrapSpec};
    use crate::propagator::{ground_state_1d, EigenMethod, GroundStateOptions};
    use proptest::prelude::*;

    fn box_ground(n: usize) -> WaveFunction1D {
        let g = make_uniform_grid(-0.5, 0.5, n).unwrap();
        let opts = GroundStateOptions { method: EigenMethod::Direct, ..Default::default() };
        ground_state_1d(&TrapSpec::infinite_box(1.0, 0.0).unwrap(), &g, 1.0, None, &opts).unwrap().0
    }

    fn ground_product() -> WaveFunction2D {
        let gp = make_uniform_grid(-1.5, 1.5, 96).unwrap();
        product_state(&box_ground(128), &gaussian_packet(&gp, 0.3, 0.1, 0.0).unwrap()).unwrap()
    }

    fn with_phase(psi: &WaveFunction2D, phase: impl Fn(f64, f64) -> f64) -> WaveFunction2D {
        let mut out = psi.clone();
        let nx = psi.grid_x.n;
        for (k, a) in out.amplitudes.iter_mut().enumerate() {
            let (x, p) = (psi.grid_x.point(k % nx), psi.grid_pointer.point(k / nx));
            *a *= Complex64::from_polar(1.0, phase(x, p));
        }
        out
    }

    #[test]
    fn real_state_has_zero_velocity() {
        let psi = ground_product();
        let v = velocity_field(&psi, Masses::default());
        let (mx, mp) = v.max_speed();
        assert_eq!(mx, 0.0);
        assert_eq!(mp, 0.0);
        // Sign changes (nodes) do not produce spurious phase jumps.
        let gx = make_uniform_grid(-0.5, 0.5, 64).unwrap();
        let gp = make_uniform_grid(-1.0, 1.0, 64).unwrap();
        let odd = WaveFunction2D::from_fn(gx, gp, 0.0, |x, p| {
            Complex64::new((2.0 * PI * x).sin() * (-(p * p) * 8.0).exp(), 0.0)
        });
        let v = velocity_field(&odd, Masses::default());
        assert!(v.max_speed().0 < 1e-12 && v.max_speed().1 < 1e-12);
    }

    #[test]
    fn plane_wave_velocity() {
        let psi = with_phase(&ground_product(), |_, p| 5.0 * p);
        let v = velocity_field(&psi, Masses::default());
        for (k, vp) in v.v_pointer.iter().enumerate() {
            if !v.node_mask[k] {
                assert!((vp - 5.0 / 1000.0).abs() < 1e-6, "{vp}");
            }
        }
        let probe = v.velocity_at(0.013, 0.31);
        assert!((probe.v_pointer - 0.005).abs() < 1e-9 && probe.v_x.abs() < 1e-12);
    }

    #[test]
    fn kicked_state_velocity_and_potential() {
        let psi0 = ground_product();
        let gx = psi0.grid_x;
        let d = gaussian_d(&gx, 0.05, 0.0).unwrap();
        let p0 = 20.0;
        let kicked = with_phase(&psi0, |x, p| -p0 * d.value(x) * p);
        let m = Masses::default();
        let v = velocity_field(&kicked, m);
        let nx = gx.n;
        let mut checked = 0;
        for (k, vp) in v.v_pointer.iter().enumerate() {
            let expected = -p0 * d.value(gx.point(k % nx)) / m.pointer;
            if !v.node_mask[k] && expected.abs() > 1e-4 {
                assert!((vp - expected).abs() < 0.01 * expected.abs());
                checked += 1;
            }
        }
        assert!(checked > 100);
        let (q0, q1) = (quantum_potential(&psi0, m), quantum_potential(&kicked, m));
        for k in 0..q0.q_x.len() {
            if !q0.mask[k] {
                assert!((q0.total(k) - q1.total(k)).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn quantum_potential_oracles() {
        let psi = ground_product();
        let m = Masses::default();
        let q = quantum_potential(&psi, m);
        let nx = psi.grid_x.n;
        let centre = 0.3;
        let ip = ((centre - psi.grid_pointer.min) / psi.grid_pointer.spacing()).round() as usize;
        let expected_pointer = 1.0 / (4.0 * m.pointer * 0.01);
        let k = nx / 2 + nx * ip;
        let x_dist = (psi.grid_pointer.point(ip) - centre).abs();
        // Away from the exact centre Q_X = (1 - d²/(2σ²)) / (4Mσ²).
        let corrected = expected_pointer * (1.0 - x_dist * x_dist / 0.02);
        assert!((q.q_pointer[k] / corrected - 1.0).abs() < 0.05);
        // Exact for the three-point stencil applied to the analytic envelope.
        let h = psi.grid_pointer.spacing();
        let r = |d: f64| (-d * d / 0.04).exp();
        let d = psi.grid_pointer.point(ip) - centre;
        let discrete = -(r(d + h) - 2.0 * r(d) + r(d - h)) / (2.0 * m.pointer * h * h * r(d));
        assert!((q.q_pointer[k] - discrete).abs() < 1e-9 * discrete.abs());
        let e1 = PI * PI / 2.0;
        for ix in 1..nx - 1 {
            let k = ix + nx * ip;
            if !q.mask[k] {
                assert!((q.q_x[k] / e1 - 1.0).abs() < 0.01);
            }
        }
    }

    #[test]
    fn stationary_ground_state_is_force_free() {
        let g = make_uniform_grid(-0.5, 0.5, 256).unwrap();
        let gp = make_uniform_grid(-1.5, 1.5, 96).unwrap();
        let psi = product_state(&box_ground(256), &gaussian_packet(&gp, 0.0, 0.2, 0.0).unwrap()).unwrap();
        let spec = CouplingSpec::protective(
            crate::model::regularized_delta(&g, 0.02).unwrap(),
            crate::model::pulse_adiabatic(100.0, 0.0).unwrap(),
            Masses::default(),
        )
        .unwrap();
        let ham = Hamiltonian::new(spec, TrapSpec::infinite_box(1.0, 0.0).unwrap(), TrapSpec::free(Axis::Pointer), g, gp).unwrap();
        let f = total_force_field(&psi, &ham, 0.0);
        let max_fx = f.f_x.iter().zip(&f.mask).filter(|(_, m)| !**m).map(|(v, _)| v.abs()).fold(0.0, f64::max);
        assert!(max_fx < 1e-6, "max |F_x| = {max_fx}");
        assert!(f.mask.iter().filter(|m| !**m).count() > 1000);
    }

    #[test]
    fn impulsive_forces() {
        let g = make_uniform_grid(-0.5, 0.5, 256).unwrap();
        let d = gaussian_d(&g, 0.05, 0.0).unwrap();
        let spec = CouplingSpec::impulsive(d, pulse_impulsive(0.01).unwrap(), 50.0, Masses::default()).unwrap();
        let (fx, fp) = impulsive_delta_forces(&spec, 0.0, 0.3, 0.005).unwrap();
        assert_eq!(fx, 0.0);
        assert!((fp + 50.0 * 200.0).abs() < 1e-9);
        let (fx, _) = impulsive_delta_forces(&spec, 0.05, 0.3, 0.005).unwrap();
        let expected = -50.0 * 200.0 * 0.3 * (-(-0.5f64).exp() / 0.05);
        assert!((fx - expected).abs() < 1e-9 * expected.abs());
        assert_eq!(impulsive_delta_forces(&spec, 0.05, 0.3, 0.02).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn sampling_is_reproducible_and_matches_marginals() {
        let psi = ground_product();
        assert!(sample_quantum_equilibrium(&psi, 0, 1).unwrap().is_empty());
        let a = sample_quantum_equilibrium(&psi, 2000, 42).unwrap();
        let b = sample_quantum_equilibrium(&psi, 2000, 42).unwrap();
        assert_eq!(a, b);
        let xs: Vec<f64> = a.iter().map(|p| p.x).collect();
        let ps: Vec<f64> = a.iter().map(|p| p.pointer).collect();
        assert!(ks_distance(&xs, &psi.grid_x, &psi.marginal_density(Axis::System)) < 0.04);
        assert!(ks_distance(&ps, &psi.grid_pointer, &psi.marginal_density(Axis::Pointer)) < 0.04);
    }

    #[test]
    fn rejection_sampling_of_entangled_state() {
        let gx = make_uniform_grid(-0.5, 0.5, 64).unwrap();
        let gp = make_uniform_grid(-1.0, 1.0, 64).unwrap();
        // Correlated: the pointer sits left or right depending on the sign of x.
        let psi = WaveFunction2D::from_fn(gx, gp, 0.0, |x, p| {
            let c = if x < 0.0 { -0.4 } else { 0.4 };
            Complex64::new((PI * x).cos() * (-(p - c).powi(2) / 0.02).exp(), 0.0)
        })
        .normalize()
        .unwrap();
        let pts = sample_quantum_equilibrium(&psi, 4000, 7).unwrap();
        let agree = pts.iter().filter(|p| (p.x < 0.0) == (p.pointer < 0.0)).count();
        assert!(agree as f64 / 4000.0 > 0.98);
        let xs: Vec<f64> = pts.iter().map(|p| p.x).collect();
        assert!(ks_distance(&xs, &psi.grid_x, &psi.marginal_density(Axis::System)) < 0.04);
    }

    #[test]
    fn ks_distance_of_exact_quantiles_is_small() {
        let g = make_uniform_grid(0.0, 1.0, 101).unwrap();
        let rho = vec![1.0; 101];
        // Uniform density on [-h/2, 1 + h/2].
        let n = 1000;
        let h = g.spacing();
        let samples: Vec<f64> = (0..n).map(|k| -0.5 * h + (1.0 + h) * (k as f64 + 0.5) / n as f64).collect();
        assert!(ks_distance(&samples, &g, &rho) < 1e-3 + 1e-12);
        let shifted: Vec<f64> = samples.iter().map(|s| s * 0.5).collect();
        assert!(ks_distance(&shifted, &g, &rho) > 0.4);
    }

    #[test]
    fn stationary_trajectories_do_not_move() {
        let psi = ground_product();
        let pts = sample_quantum_equilibrium(&psi, 50, 3).unwrap();
        let mut ens = TrajectoryEnsemble::new(pts.clone(), 3, Masses::default(), (-0.5, 0.5)).keep_paths(5, 1);
        for k in 0..=10 {
            let mut frame = psi.clone();
            frame.time = k as f64;
            // A global phase changes nothing.
            frame.amplitudes.iter_mut().for_each(|a| *a *= Complex64::from_polar(1.0, -4.93 * k as f64));
            ens.observe(&frame).unwrap();
        }
        for (p, q) in ens.positions().iter().zip(&pts) {
            assert!((p.x - q.x).abs() < 1e-6 && (p.pointer - q.pointer).abs() < 1e-6);
        }
        assert_eq!(ens.trajectories()[0].times.len(), 11);
    }

    #[test]
    fn trajectories_follow_uniform_drift() {
        let psi = with_phase(&ground_product(), |x, _| 3.0 * x);
        let m = Masses::new(1.0, 1000.0).unwrap();
        let start = vec![Point { x: -0.2, pointer: 0.3 }];
        let mut ens = TrajectoryEnsemble::new(start, 0, m, (-0.5, 0.5)).keep_paths(1, 1);
        for k in 0..=4 {
            let mut frame = psi.clone();
            frame.time = 0.025 * k as f64;
            ens.observe(&frame).unwrap();
        }
        let end = ens.positions()[0];
        assert!((end.x - (-0.2 + 3.0 * 0.1)).abs() < 1e-9, "{}", end.x);
        assert_eq!(ens.flags()[0], TrajectoryFlag::Ok);
    }

    proptest! {
        #[test]
        fn pure_phase_leaves_quantum_potential(a in -5.0f64..5.0, b in -3.0f64..3.0, c in -2.0f64..2.0) {
            let psi = ground_product();
            let m = Masses::default();
            let q0 = quantum_potential(&psi, m);
            let q1 = quantum_potential(&with_phase(&psi, |x, p| a * x * x + b * p + c * x * p), m);
            for k in 0..q0.q_x.len() {
                if !q0.mask[k] {
                    prop_assert!((q0.total(k) - q1.total(k)).abs() < 1e-8);
                }
            }
        }

        #[test]
        fn real_fields_have_zero_velocity(s in 0.05f64..0.3, c in -0.5f64..0.5, sign in prop::bool::ANY) {
            let gx = make_uniform_grid(-0.5, 0.5, 48).unwrap();
            let gp = make_uniform_grid(-1.5, 1.5, 48).unwrap();
            let flip = if sign { -1.0 } else { 1.0 };
            let psi = WaveFunction2D::from_fn(gx, gp, 0.0, |x, p| {
                Complex64::new(flip * (PI * x).cos() * (3.0 * PI * x).cos() * (-(p - c).powi(2) / (4.0 * s * s)).exp(), 0.0)
            });
            let v = velocity_field(&psi, Masses::default());
            prop_assert!(v.max_speed().0 < 1e-10 && v.max_speed().1 < 1e-10);
        }
    }
}
