//! Traps, coupling profiles, pulse envelopes and the assembled potential
//! `V(x, X, t) = V_trap(x) + V_pointer(X) + s(t) · profile(x) · X`, where
//! `s(t) = f(t)` for the protective coupling and `s(t) = P0 f(t)` for the
//! impulsive one.

use std::f64::consts::PI;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{Axis, Grid1D};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Masses {
    pub system: f64,
    pub pointer: f64,
}

impl Masses {
    pub fn new(system: f64, pointer: f64) -> Result<Self> {
        if !(system > 0.0 && pointer > 0.0 && system.is_finite() && pointer.is_finite()) {
            return Err(Error::Precondition(format!("masses must be positive, got m={system}, M={pointer}")));
        }
        Ok(Self { system, pointer })
    }

    pub fn along(&self, axis: Axis) -> f64 {
        match axis {
            Axis::System => self.system,
            Axis::Pointer => self.pointer,
        }
    }
}

impl Default for Masses {
    fn default() -> Self {
        Self { system: 1.0, pointer: 1000.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrapKind {
    InfiniteBox { length: f64, center: f64 },
    Harmonic { omega: f64, center: f64 },
    Free,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrapSpec {
    pub kind: TrapKind,
    pub applies_to: Axis,
}

impl TrapSpec {
    pub fn infinite_box(length: f64, center: f64) -> Result<Self> {
        if !(length > 0.0 && length.is_finite() && center.is_finite()) {
            return Err(Error::Precondition(format!("box length must be positive, got {length}")));
        }
        Ok(Self { kind: TrapKind::InfiniteBox { length, center }, applies_to: Axis::System })
    }

    pub fn harmonic(omega: f64, center: f64, applies_to: Axis) -> Result<Self> {
        if !(omega >= 0.0 && omega.is_finite() && center.is_finite()) {
            return Err(Error::Precondition(format!("trap frequency must be non-negative, got {omega}")));
        }
        Ok(Self { kind: TrapKind::Harmonic { omega, center }, applies_to })
    }

    pub fn free(applies_to: Axis) -> Self {
        Self { kind: TrapKind::Free, applies_to }
    }

    /// Smooth part of the trap potential at `x` (zero inside a box).
    pub fn potential(&self, x: f64, mass: f64) -> f64 {
        match self.kind {
            TrapKind::Harmonic { omega, center } => 0.5 * mass * omega * omega * (x - center).powi(2),
            TrapKind::InfiniteBox { .. } | TrapKind::Free => 0.0,
        }
    }

    /// Nodes of `grid` strictly inside the trap's walls. The grid endpoints are
    /// always treated as walls.
    pub fn interior(&self, grid: &Grid1D) -> Range<usize> {
        let (mut lo, mut hi) = (1, grid.n - 1);
        if let TrapKind::InfiniteBox { length, center } = self.kind {
            let tol = 1e-9 * grid.spacing();
            let (a, b) = (center - 0.5 * length, center + 0.5 * length);
            let points = grid.points();
            lo = lo.max(points.iter().position(|&x| x > a + tol).unwrap_or(grid.n));
            hi = hi.min(points.iter().rposition(|&x| x < b - tol).map_or(0, |i| i + 1));
        }
        lo..hi.max(lo)
    }

    /// `E_n - E_1` for the box, `ω` for the oscillator.
    pub fn level_spacing(&self, mass: f64) -> Option<f64> {
        match self.kind {
            TrapKind::InfiniteBox { length, .. } => Some(3.0 * PI * PI / (2.0 * mass * length * length)),
            TrapKind::Harmonic { omega, .. } if omega > 0.0 => Some(omega),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProfileKind {
    /// Unit-integral gaussian of standard width `eps` centred at 0.
    RegularizedDelta { eps: f64 },
    /// `exp(-(x-c)²/(2w²))`, peak value 1 at `c`.
    GaussianD { width: f64, center: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CouplingProfile {
    pub kind: ProfileKind,
    pub grid: Grid1D,
    pub values: Vec<f64>,
}

impl CouplingProfile {
    pub fn value(&self, x: f64) -> f64 {
        match self.kind {
            ProfileKind::RegularizedDelta { eps } => {
                (-(x * x) / (2.0 * eps * eps)).exp() / (eps * (2.0 * PI).sqrt())
            }
            ProfileKind::GaussianD { width, center } => {
                (-(x - center).powi(2) / (2.0 * width * width)).exp()
            }
        }
    }

    pub fn derivative(&self, x: f64) -> f64 {
        match self.kind {
            ProfileKind::RegularizedDelta { eps } => -x / (eps * eps) * self.value(x),
            ProfileKind::GaussianD { width, center } => -(x - center) / (width * width) * self.value(x),
        }
    }

    pub fn peak(&self) -> f64 {
        match self.kind {
            ProfileKind::RegularizedDelta { eps } => 1.0 / (eps * (2.0 * PI).sqrt()),
            ProfileKind::GaussianD { .. } => 1.0,
        }
    }

    /// Midpoint-rule integral of the sampled profile.
    pub fn integral(&self) -> f64 {
        self.grid.spacing() * self.values.iter().sum::<f64>()
    }

    fn sample(kind: ProfileKind, grid: &Grid1D) -> Self {
        let mut p = Self { kind, grid: *grid, values: Vec::new() };
        p.values = grid.points().iter().map(|&x| p.value(x)).collect();
        p
    }
}

fn check_resolved(what: &str, width: f64, grid: &Grid1D) -> Result<()> {
    let h = grid.spacing();
    if !(width >= 3.0 * h) || !width.is_finite() {
        return Err(Error::Precondition(format!(
            "{what} width {width} under-resolved by spacing {h} (need ≥ 3 spacings)"
        )));
    }
    Ok(())
}

/// Gaussian stand-in for `δ(x)` on `grid`.
pub fn regularized_delta(grid: &Grid1D, eps: f64) -> Result<CouplingProfile> {
    check_resolved("regularized delta", eps, grid)?;
    Ok(CouplingProfile::sample(ProfileKind::RegularizedDelta { eps }, grid))
}

/// The peaked measurement profile `D(x)`.
pub fn gaussian_d(grid: &Grid1D, width: f64, center: f64) -> Result<CouplingProfile> {
    check_resolved("D(x)", width, grid)?;
    if !center.is_finite() {
        return Err(Error::Precondition("non-finite D(x) centre".into()));
    }
    Ok(CouplingProfile::sample(ProfileKind::GaussianD { width, center }, grid))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PulseKind {
    Adiabatic,
    Impulsive,
}

/// `f(t) = (2A/T) sin²(πt/T)` on `[0, T]`, zero elsewhere. The impulsive
/// pulse is the same bump with unit area over `[0, τ]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PulseEnvelope {
    pub kind: PulseKind,
    pub duration: f64,
    pub area: f64,
}

impl PulseEnvelope {
    pub fn value(&self, t: f64) -> f64 {
        if !(0.0..=self.duration).contains(&t) {
            return 0.0;
        }
        let s = (PI * t / self.duration).sin();
        2.0 * self.area / self.duration * s * s
    }

    pub fn derivative(&self, t: f64) -> f64 {
        if !(0.0..=self.duration).contains(&t) {
            return 0.0;
        }
        2.0 * self.area * PI / (self.duration * self.duration) * (2.0 * PI * t / self.duration).sin()
    }

    /// `∫_0^t f`.
    pub fn cumulative(&self, t: f64) -> f64 {
        let u = t.clamp(0.0, self.duration) / self.duration;
        self.area * (u - (2.0 * PI * u).sin() / (2.0 * PI))
    }

    pub fn peak(&self) -> f64 {
        2.0 * self.area / self.duration
    }
}

pub fn pulse_adiabatic(duration: f64, area: f64) -> Result<PulseEnvelope> {
    if !(duration > 0.0 && duration.is_finite() && area.is_finite()) {
        return Err(Error::Precondition(format!("adiabatic pulse needs T > 0, got T={duration}, A={area}")));
    }
    Ok(PulseEnvelope { kind: PulseKind::Adiabatic, duration, area })
}

pub fn pulse_impulsive(duration: f64) -> Result<PulseEnvelope> {
    if !(duration > 0.0 && duration.is_finite()) {
        return Err(Error::Precondition(format!("impulsive pulse needs τ > 0, got {duration}")));
    }
    Ok(PulseEnvelope { kind: PulseKind::Impulsive, duration, area: 1.0 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CouplingMode {
    Protective,
    Impulsive,
}

impl std::str::FromStr for CouplingMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "protective" => Ok(Self::Protective),
            "impulsive" => Ok(Self::Impulsive),
            other => Err(format!("unknown coupling mode `{other}` (protective|impulsive)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CouplingSpec {
    pub mode: CouplingMode,
    pub profile: CouplingProfile,
    pub pulse: PulseEnvelope,
    /// Momentum scale of the apparatus; only used by the impulsive coupling.
    pub p0: f64,
    pub masses: Masses,
}

impl CouplingSpec {
    pub fn protective(profile: CouplingProfile, pulse: PulseEnvelope, masses: Masses) -> Result<Self> {
        let spec = Self { mode: CouplingMode::Protective, profile, pulse, p0: 1.0, masses };
        spec.validate()?;
        Ok(spec)
    }

    pub fn impulsive(profile: CouplingProfile, pulse: PulseEnvelope, p0: f64, masses: Masses) -> Result<Self> {
        let spec = Self { mode: CouplingMode::Impulsive, profile, pulse, p0, masses };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self.mode {
            CouplingMode::Protective => {
                matches!(self.profile.kind, ProfileKind::RegularizedDelta { .. })
                    && self.pulse.kind == PulseKind::Adiabatic
            }
            CouplingMode::Impulsive => {
                matches!(self.profile.kind, ProfileKind::GaussianD { .. })
                    && self.pulse.kind == PulseKind::Impulsive
            }
        };
        if !ok {
            return Err(Error::Precondition(format!(
                "{:?} coupling cannot use a {:?} profile with a {:?} pulse",
                self.mode, self.profile.kind, self.pulse.kind
            )));
        }
        if self.mode == CouplingMode::Impulsive && !(self.p0 >= 0.0 && self.p0.is_finite()) {
            return Err(Error::Precondition(format!("P0 must be non-negative, got {}", self.p0)));
        }
        Ok(())
    }

    /// Prefactor `s(t)` of `profile(x) · X`.
    pub fn strength(&self, t: f64) -> f64 {
        match self.mode {
            CouplingMode::Protective => self.pulse.value(t),
            CouplingMode::Impulsive => self.p0 * self.pulse.value(t),
        }
    }
}

/// Static part of the two-particle Hamiltonian on a fixed joint grid.
#[derive(Debug, Clone)]
pub struct Hamiltonian {
    pub grid_x: Grid1D,
    pub grid_pointer: Grid1D,
    pub coupling: CouplingSpec,
    pub system_trap: TrapSpec,
    pub pointer_trap: TrapSpec,
    pub(crate) trap_x: Vec<f64>,
    pub(crate) trap_pointer: Vec<f64>,
    pub(crate) pointer_points: Vec<f64>,
    pub(crate) interior: Range<usize>,
}

impl Hamiltonian {
    pub fn new(
        coupling: CouplingSpec,
        system_trap: TrapSpec,
        pointer_trap: TrapSpec,
        grid_x: Grid1D,
        grid_pointer: Grid1D,
    ) -> Result<Self> {
        coupling.validate()?;
        if coupling.profile.grid != grid_x {
            return Err(Error::GridMismatch("coupling profile not sampled on the system grid".into()));
        }
        if system_trap.applies_to != Axis::System || pointer_trap.applies_to != Axis::Pointer {
            return Err(Error::Precondition("trap assigned to the wrong coordinate".into()));
        }
        if matches!(pointer_trap.kind, TrapKind::InfiniteBox { .. }) {
            return Err(Error::Precondition("the pointer axis is spectral and cannot carry hard walls".into()));
        }
        let m = coupling.masses;
        let interior = system_trap.interior(&grid_x);
        if interior.len() < 3 {
            return Err(Error::Precondition("box leaves fewer than 3 interior nodes".into()));
        }
        Ok(Self {
            trap_x: grid_x.points().iter().map(|&x| system_trap.potential(x, m.system)).collect(),
            trap_pointer: grid_pointer.points().iter().map(|&x| pointer_trap.potential(x, m.pointer)).collect(),
            pointer_points: grid_pointer.points(),
            interior,
            grid_x,
            grid_pointer,
            coupling,
            system_trap,
            pointer_trap,
        })
    }

    pub fn masses(&self) -> Masses {
        self.coupling.masses
    }

    /// Nodes of the system axis not pinned by a wall.
    pub fn interior(&self) -> Range<usize> {
        self.interior.clone()
    }

    pub fn is_wall(&self, ix: usize) -> bool {
        !self.interior.contains(&ix)
    }

    pub fn potential(&self, t: f64) -> Potential<'_> {
        Potential { ham: self, time: t, strength: self.coupling.strength(t) }
    }

    /// Ratio of the largest coupling energy reachable on the grid to the
    /// system's first excitation energy; `None` when the trap has no gap.
    pub fn adiabatic_margin(&self) -> Option<f64> {
        let gap = self.system_trap.level_spacing(self.coupling.masses.system)?;
        let x_max = self.grid_pointer.min.abs().max(self.grid_pointer.max.abs());
        let scale = if self.coupling.mode == CouplingMode::Impulsive { self.coupling.p0 } else { 1.0 };
        Some(scale * self.coupling.pulse.peak().abs() * x_max * self.coupling.profile.peak() / gap)
    }
}

/// `V(x, X, t)` frozen at one instant.
#[derive(Debug, Clone, Copy)]
pub struct Potential<'a> {
    ham: &'a Hamiltonian,
    pub time: f64,
    /// `s(t)`, the prefactor of `profile(x) · X`.
    pub strength: f64,
}

impl Potential<'_> {
    #[inline]
    pub fn coupling(&self, ix: usize, i_ptr: usize) -> f64 {
        self.strength * self.ham.coupling.profile.values[ix] * self.ham.pointer_points[i_ptr]
    }

    #[inline]
    pub fn trap(&self, ix: usize, i_ptr: usize) -> f64 {
        self.ham.trap_x[ix] + self.ham.trap_pointer[i_ptr]
    }

    /// Finite part of the potential. Wall nodes are excluded from the
    /// dynamics rather than given a large value; callers check [`Self::is_wall`].
    #[inline]
    pub fn value(&self, ix: usize, i_ptr: usize) -> f64 {
        self.trap(ix, i_ptr) + self.coupling(ix, i_ptr)
    }

    pub fn is_wall(&self, ix: usize) -> bool {
        self.ham.is_wall(ix)
    }

    pub fn max_abs_coupling(&self) -> f64 {
        let x_max = self.ham.grid_pointer.min.abs().max(self.ham.grid_pointer.max.abs());
        self.strength.abs() * self.ham.coupling.profile.peak() * x_max
    }
}

/// Assembles the potential evaluator at time `t`.
pub fn potential_total(ham: &Hamiltonian, t: f64) -> Potential<'_> {
    ham.potential(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::make_uniform_grid;

    fn grid() -> Grid1D {
        make_uniform_grid(-0.5, 0.5, 251).unwrap()
    }

    #[test]
    fn regularized_delta_normalization_and_peak() {
        let g = grid();
        assert!((g.spacing() - 0.004).abs() < 1e-15);
        let d = regularized_delta(&g, 0.02).unwrap();
        let peak = 1.0 / (0.02 * (2.0 * PI).sqrt());
        assert!((d.peak() - peak).abs() < 1e-12);
        assert!((peak - 19.947).abs() < 1e-3);
        assert!((d.integral() - 1.0).abs() < 1e-8);
        assert!(regularized_delta(&g, g.spacing()).is_err());
    }

    #[test]
    fn regularized_delta_moment_against_cosine_probe() {
        // ∫ δ_ε(x) cos(πx) dx = exp(-π²ε²/2) = 1 - π²ε²/2 + O(ε⁴).
        let g = make_uniform_grid(-0.5, 0.5, 1001).unwrap();
        let mut previous_bias = None;
        for eps in [0.04, 0.02, 0.01] {
            let d = regularized_delta(&g, eps).unwrap();
            let probe: f64 = g.spacing()
                * g.points().iter().zip(&d.values).map(|(x, v)| v * (PI * x).cos()).sum::<f64>();
            let bias = 1.0 - probe;
            assert!((bias - PI * PI * eps * eps / 2.0).abs() < 0.02 * bias);
            if let Some(prev) = previous_bias {
                let ratio: f64 = prev / bias;
                assert!((ratio - 4.0).abs() < 0.05, "ratio {ratio}");
            }
            previous_bias = Some(bias);
        }
    }

    #[test]
    fn adiabatic_pulse_shape() {
        let p = pulse_adiabatic(100.0, 0.1).unwrap();
        assert!((p.value(50.0) - 0.002).abs() < 1e-15);
        assert_eq!(p.value(0.0), 0.0);
        assert!(p.value(100.0).abs() < 1e-18);
        assert_eq!(p.value(100.5), 0.0);
        assert!((p.cumulative(100.0) - 0.1).abs() < 1e-12);
        // Independent check of the area by Simpson quadrature.
        let n = 2000;
        let h = 100.0 / n as f64;
        let simpson: f64 = (0..=n)
            .map(|i| {
                let w = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
                w * p.value(i as f64 * h)
            })
            .sum::<f64>()
            * h
            / 3.0;
        assert!((simpson - 0.1).abs() < 1e-10);
    }

    #[test]
    fn impulsive_pulse_shape() {
        let p = pulse_impulsive(0.01).unwrap();
        assert!((p.cumulative(0.01) - 1.0).abs() < 1e-10);
        assert!((p.peak() - 200.0).abs() < 1e-9);
        assert!((p.value(0.005) - 200.0).abs() < 1e-9);
        assert_eq!(p.value(0.0100001), 0.0);
        assert!(pulse_impulsive(0.0).is_err());
    }

    fn protective_ham(grid_pointer: Grid1D) -> Hamiltonian {
        let g = grid();
        let spec = CouplingSpec::protective(
            regularized_delta(&g, 0.02).unwrap(),
            pulse_adiabatic(100.0, 0.1).unwrap(),
            Masses::default(),
        )
        .unwrap();
        Hamiltonian::new(
            spec,
            TrapSpec::infinite_box(1.0, 0.0).unwrap(),
            TrapSpec::free(Axis::Pointer),
            g,
            grid_pointer,
        )
        .unwrap()
    }

    #[test]
    fn protective_potential_values() {
        // Pointer grid with a node at X = 0.3.
        let gp = make_uniform_grid(-1.5, 1.5, 101).unwrap();
        let ham = protective_ham(gp);
        let ip = 60;
        assert!((gp.point(ip) - 0.3).abs() < 1e-12);
        let ix0 = 125;
        assert!(grid().point(ix0).abs() < 1e-12);
        let v = ham.potential(50.0);
        assert!((v.coupling(ix0, ip) - 0.002 * 19.947114 * 0.3).abs() < 1e-6);
        assert!((v.coupling(ix0, ip) - 0.01197).abs() < 1e-5);
        for t in [-1.0, 100.5, 300.0] {
            let v = ham.potential(t);
            assert!((0..251).all(|ix| v.coupling(ix, ip) == 0.0));
        }
        assert!(v.is_wall(0) && v.is_wall(250) && !v.is_wall(1));
    }

    #[test]
    fn coupling_is_linear_in_pointer_position() {
        let gp = make_uniform_grid(-1.0, 1.0, 81).unwrap();
        let ham = protective_ham(gp);
        let v = ham.potential(37.0);
        // X = 0.25 is node 50, X = 0.5 is node 60.
        for ix in 0..251 {
            let single = v.value(ix, 50) - v.trap(ix, 50);
            let double = v.value(ix, 60) - v.trap(ix, 60);
            assert!((double - 2.0 * single).abs() < 1e-15);
        }
    }

    #[test]
    fn impulsive_coupling_vanishes_at_zero_pointer() {
        let g = grid();
        let gp = make_uniform_grid(-1.0, 1.0, 81).unwrap();
        let spec = CouplingSpec::impulsive(
            gaussian_d(&g, 0.05, 0.0).unwrap(),
            pulse_impulsive(0.01).unwrap(),
            50.0,
            Masses::default(),
        )
        .unwrap();
        let ham = Hamiltonian::new(spec, TrapSpec::infinite_box(1.0, 0.0).unwrap(), TrapSpec::free(Axis::Pointer), g, gp)
            .unwrap();
        let v = ham.potential(0.005);
        assert!((0..251).all(|ix| v.coupling(ix, 40) == 0.0));
        assert!((v.strength - 50.0 * 200.0).abs() < 1e-9);
    }

    #[test]
    fn mismatched_pairing_is_rejected() {
        let g = grid();
        let wrong = CouplingSpec::protective(
            gaussian_d(&g, 0.05, 0.0).unwrap(),
            pulse_adiabatic(100.0, 0.1).unwrap(),
            Masses::default(),
        );
        assert!(wrong.is_err());
        let wrong_pulse = CouplingSpec::impulsive(
            gaussian_d(&g, 0.05, 0.0).unwrap(),
            pulse_adiabatic(1.0, 1.0).unwrap(),
            50.0,
            Masses::default(),
        );
        assert!(wrong_pulse.is_err());
    }

    #[test]
    fn box_interior_on_larger_grid() {
        let g = make_uniform_grid(-1.0, 1.0, 201).unwrap();
        let trap = TrapSpec::infinite_box(1.0, 0.0).unwrap();
        let r = trap.interior(&g);
        assert!((g.point(r.start - 1) + 0.5).abs() < 1e-12);
        assert!((g.point(r.end) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn default_margin_is_small() {
        let gp = make_uniform_grid(-1.5, 1.5, 101).unwrap();
        let margin = protective_ham(gp).adiabatic_margin().unwrap();
        assert!(margin < 0.01, "margin {margin}");
    }
}
