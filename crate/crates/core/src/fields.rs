//! Uniform grids, one- and two-dimensional wavefunctions, their moments and
//! the purity of the reduced system state.
//!
//! All integrals use the midpoint rule on the uniform grid, `∫ g ≈ h Σ g_i`.
//! Hard-wall endpoints carry zero amplitude, so for the box this coincides
//! with the trapezoid rule.

use std::io::{BufRead, Write};

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest admissible number of grid points.
pub const MIN_POINTS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid1D {
    pub min: f64,
    pub max: f64,
    pub n: usize,
}

/// Builds a uniform grid of `n` points covering `[min, max]` inclusive.
pub fn make_uniform_grid(min: f64, max: f64, n: usize) -> Result<Grid1D> {
    if !min.is_finite() || !max.is_finite() {
        return Err(Error::InvalidGrid(format!("non-finite bounds [{min}, {max}]")));
    }
    if max <= min {
        return Err(Error::InvalidGrid(format!("empty interval [{min}, {max}]")));
    }
    if n < MIN_POINTS {
        return Err(Error::InvalidGrid(format!("{n} points, need at least {MIN_POINTS}")));
    }
    Ok(Grid1D { min, max, n })
}

impl Grid1D {
    pub fn new(min: f64, max: f64, n: usize) -> Result<Self> {
        make_uniform_grid(min, max, n)
    }

    pub fn spacing(&self) -> f64 {
        (self.max - self.min) / (self.n - 1) as f64
    }

    pub fn point(&self, i: usize) -> f64 {
        // Exact endpoints, no accumulated rounding.
        if i + 1 == self.n {
            self.max
        } else {
            self.min + i as f64 * self.spacing()
        }
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.point(i)).collect()
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.min && x <= self.max
    }

    /// Angular wavenumbers of the discrete Fourier modes, in FFT order.
    /// The Nyquist mode is reported as `+π/h`.
    pub fn wavenumbers(&self) -> Vec<f64> {
        let n = self.n;
        let dk = 2.0 * std::f64::consts::PI / (n as f64 * self.spacing());
        (0..n)
            .map(|j| {
                let m = if j <= n / 2 { j as f64 } else { j as f64 - n as f64 };
                m * dk
            })
            .collect()
    }

    /// Wavenumbers for odd-order derivatives: the Nyquist mode is dropped so
    /// that real fields have exactly zero mean momentum.
    pub fn derivative_wavenumbers(&self) -> Vec<f64> {
        let mut k = self.wavenumbers();
        if self.n.is_multiple_of(2) {
            k[self.n / 2] = 0.0;
        }
        k
    }

    fn same_as(&self, other: &Grid1D) -> bool {
        self.n == other.n && self.min == other.min && self.max == other.max
    }
}

/// Which coordinate of the joint configuration space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Axis {
    /// The observed particle `x`.
    System,
    /// The meter `X`.
    Pointer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WaveFunction1D {
    pub grid: Grid1D,
    pub amplitudes: Vec<Complex64>,
}

impl WaveFunction1D {
    pub fn new(grid: Grid1D, amplitudes: Vec<Complex64>) -> Result<Self> {
        if amplitudes.len() != grid.n {
            return Err(Error::GridMismatch(format!(
                "{} amplitudes for a {}-point grid",
                amplitudes.len(),
                grid.n
            )));
        }
        Ok(Self { grid, amplitudes })
    }

    pub fn from_real(grid: Grid1D, values: &[f64]) -> Result<Self> {
        Self::new(grid, values.iter().map(|&v| Complex64::new(v, 0.0)).collect())
    }

    pub fn norm(&self) -> f64 {
        (self.grid.spacing() * self.amplitudes.iter().map(|a| a.norm_sqr()).sum::<f64>()).sqrt()
    }

    pub fn normalize(&self) -> Result<Self> {
        let norm = self.norm();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::ZeroField);
        }
        let scale = 1.0 / norm;
        Ok(Self {
            grid: self.grid,
            amplitudes: self.amplitudes.iter().map(|a| a * scale).collect(),
        })
    }

    pub fn density(&self) -> Vec<f64> {
        self.amplitudes.iter().map(|a| a.norm_sqr()).collect()
    }

    pub fn position_mean(&self) -> f64 {
        moment(&self.grid, &self.density(), 1)
    }

    pub fn position_variance(&self) -> f64 {
        let rho = self.density();
        let mean = moment(&self.grid, &rho, 1);
        moment(&self.grid, &rho, 2) - mean * mean
    }

    /// Mean wavenumber from the discrete Fourier transform (spectral derivative).
    pub fn momentum_mean(&self) -> f64 {
        let mut line = self.amplitudes.clone();
        let fft = FftPlanner::new().plan_fft_forward(self.grid.n);
        fft.process(&mut line);
        let k = self.grid.derivative_wavenumbers();
        let (num, den) = line
            .iter()
            .zip(&k)
            .fold((0.0, 0.0), |(num, den), (a, k)| (num + k * a.norm_sqr(), den + a.norm_sqr()));
        num / den
    }

    /// `|ψ(x)|²`, interpolated quadratically when `x` falls between nodes.
    pub fn density_at(&self, x: f64) -> Result<f64> {
        interpolate_quadratic(&self.grid, &self.density(), x)
    }

    pub fn density_at_origin(&self) -> Result<f64> {
        self.density_at(0.0)
    }

    /// `⟨self|other⟩` with midpoint quadrature.
    pub fn inner(&self, other: &WaveFunction1D) -> Result<Complex64> {
        if !self.grid.same_as(&other.grid) {
            return Err(Error::GridMismatch("inner product of fields on different grids".into()));
        }
        Ok(self
            .amplitudes
            .iter()
            .zip(&other.amplitudes)
            .map(|(a, b)| a.conj() * b)
            .sum::<Complex64>()
            * self.grid.spacing())
    }
}

fn moment(grid: &Grid1D, rho: &[f64], power: i32) -> f64 {
    let total: f64 = rho.iter().sum();
    let weighted: f64 = rho.iter().enumerate().map(|(i, r)| r * grid.point(i).powi(power)).sum();
    weighted / total
}

/// Three-point Lagrange interpolation of nodal data.
pub(crate) fn interpolate_quadratic(grid: &Grid1D, values: &[f64], x: f64) -> Result<f64> {
    if !grid.contains(x) {
        return Err(Error::Precondition(format!(
            "x = {x} outside [{}, {}]",
            grid.min, grid.max
        )));
    }
    let h = grid.spacing();
    let s = (x - grid.min) / h;
    let nearest = s.round().clamp(0.0, (grid.n - 1) as f64) as usize;
    if (s - nearest as f64).abs() < 1e-12 {
        return Ok(values[nearest]);
    }
    let c = nearest.clamp(1, grid.n - 2);
    let t = s - c as f64;
    let (ym, y0, yp) = (values[c - 1], values[c], values[c + 1]);
    Ok(y0 + 0.5 * t * (yp - ym) + 0.5 * t * t * (yp - 2.0 * y0 + ym))
}

/// A normalized gaussian `exp(-(x-c)²/(4σ²) + ikx)`, so that the position
/// variance of `|ψ|²` is `σ²`.
pub fn gaussian_packet(grid: &Grid1D, center: f64, width: f64, momentum: f64) -> Result<WaveFunction1D> {
    let h = grid.spacing();
    if !(width > 3.0 * h) {
        return Err(Error::Precondition(format!(
            "packet width {width} not resolved by spacing {h} (need > 3 spacings)"
        )));
    }
    let edge = (center - grid.min).min(grid.max - center);
    // |ψ|² at the nearest edge relative to the peak.
    if !(edge > 0.0) || (-(edge * edge) / (2.0 * width * width)).exp() > 1e-8 {
        return Err(Error::Precondition(format!(
            "packet centred at {center} with width {width} is clipped by [{}, {}]",
            grid.min, grid.max
        )));
    }
    let amplitudes = grid
        .points()
        .into_iter()
        .map(|x| {
            let d = x - center;
            Complex64::from_polar((-(d * d) / (4.0 * width * width)).exp(), momentum * x)
        })
        .collect();
    WaveFunction1D::new(*grid, amplitudes)?.normalize()
}

/// The joint state `Ψ(x, X, t)`. Amplitudes are stored with `x` fastest:
/// index `ix + n_x * iX`.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveFunction2D {
    pub grid_x: Grid1D,
    pub grid_pointer: Grid1D,
    pub amplitudes: Vec<Complex64>,
    pub time: f64,
}

/// Purity of the reduced one-particle state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FactorizationMetric {
    pub purity: f64,
    pub linear_entropy: f64,
}

impl WaveFunction2D {
    pub fn new(grid_x: Grid1D, grid_pointer: Grid1D, amplitudes: Vec<Complex64>, time: f64) -> Result<Self> {
        if amplitudes.len() != grid_x.n * grid_pointer.n {
            return Err(Error::GridMismatch(format!(
                "{} amplitudes for a {}x{} grid",
                amplitudes.len(),
                grid_x.n,
                grid_pointer.n
            )));
        }
        Ok(Self { grid_x, grid_pointer, amplitudes, time })
    }

    pub fn from_fn(
        grid_x: Grid1D,
        grid_pointer: Grid1D,
        time: f64,
        f: impl Fn(f64, f64) -> Complex64,
    ) -> Self {
        let xs = grid_x.points();
        let big_xs = grid_pointer.points();
        let amplitudes = big_xs
            .iter()
            .flat_map(|&bx| xs.iter().map(move |&x| (x, bx)))
            .map(|(x, bx)| f(x, bx))
            .collect();
        Self { grid_x, grid_pointer, amplitudes, time }
    }

    #[inline]
    pub fn index(&self, ix: usize, i_ptr: usize) -> usize {
        ix + self.grid_x.n * i_ptr
    }

    #[inline]
    pub fn at(&self, ix: usize, i_ptr: usize) -> Complex64 {
        self.amplitudes[self.index(ix, i_ptr)]
    }

    pub fn cell_area(&self) -> f64 {
        self.grid_x.spacing() * self.grid_pointer.spacing()
    }

    pub fn grid(&self, axis: Axis) -> &Grid1D {
        match axis {
            Axis::System => &self.grid_x,
            Axis::Pointer => &self.grid_pointer,
        }
    }

    pub fn norm(&self) -> f64 {
        (self.cell_area() * self.amplitudes.iter().map(|a| a.norm_sqr()).sum::<f64>()).sqrt()
    }

    pub fn normalize(&self) -> Result<Self> {
        let norm = self.norm();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::ZeroField);
        }
        let scale = 1.0 / norm;
        Ok(Self {
            amplitudes: self.amplitudes.iter().map(|a| a * scale).collect(),
            ..self.clone()
        })
    }

    pub fn is_finite(&self) -> bool {
        self.amplitudes.iter().all(|a| a.re.is_finite() && a.im.is_finite())
    }

    pub fn density(&self) -> Vec<f64> {
        self.amplitudes.iter().map(|a| a.norm_sqr()).collect()
    }

    /// Probability density of one coordinate with the other integrated out.
    pub fn marginal_density(&self, axis: Axis) -> Vec<f64> {
        let nx = self.grid_x.n;
        match axis {
            Axis::System => {
                let h = self.grid_pointer.spacing();
                let mut rho = vec![0.0; nx];
                for row in self.amplitudes.chunks_exact(nx) {
                    for (r, a) in rho.iter_mut().zip(row) {
                        *r += a.norm_sqr();
                    }
                }
                rho.iter_mut().for_each(|r| *r *= h);
                rho
            }
            Axis::Pointer => {
                let h = self.grid_x.spacing();
                self.amplitudes
                    .chunks_exact(nx)
                    .map(|row| h * row.iter().map(|a| a.norm_sqr()).sum::<f64>())
                    .collect()
            }
        }
    }

    pub fn position_mean(&self, axis: Axis) -> f64 {
        moment(self.grid(axis), &self.marginal_density(axis), 1)
    }

    pub fn position_variance(&self, axis: Axis) -> f64 {
        let rho = self.marginal_density(axis);
        let grid = self.grid(axis);
        let mean = moment(grid, &rho, 1);
        moment(grid, &rho, 2) - mean * mean
    }

    /// Mean wavenumber along `axis`, from line-wise discrete Fourier
    /// transforms (spectral derivative, Nyquist mode dropped).
    pub fn momentum_mean(&self, axis: Axis) -> f64 {
        let lines = self.lines(axis);
        let grid = self.grid(axis);
        let fft = FftPlanner::new().plan_fft_forward(grid.n);
        let k = grid.derivative_wavenumbers();
        let (num, den) = lines
            .into_par_iter()
            .map(|mut line| {
                fft.process(&mut line);
                line.iter().zip(&k).fold((0.0, 0.0), |(num, den), (a, k)| {
                    (num + k * a.norm_sqr(), den + a.norm_sqr())
                })
            })
            .collect::<Vec<_>>()
            .into_iter()
            .fold((0.0, 0.0), |(a, b), (c, d)| (a + c, b + d));
        num / den
    }

    /// Copies of every line parallel to `axis`.
    pub(crate) fn lines(&self, axis: Axis) -> Vec<Vec<Complex64>> {
        let nx = self.grid_x.n;
        match axis {
            Axis::System => self.amplitudes.chunks_exact(nx).map(|c| c.to_vec()).collect(),
            Axis::Pointer => (0..nx)
                .map(|ix| self.amplitudes.iter().skip(ix).step_by(nx).copied().collect())
                .collect(),
        }
    }

    /// `|ψ(x = 0)|²` of the system marginal.
    pub fn density_at_origin(&self) -> Result<f64> {
        interpolate_quadratic(&self.grid_x, &self.marginal_density(Axis::System), 0.0)
    }

    pub fn inner(&self, other: &WaveFunction2D) -> Result<Complex64> {
        if !self.grid_x.same_as(&other.grid_x) || !self.grid_pointer.same_as(&other.grid_pointer) {
            return Err(Error::GridMismatch("inner product of fields on different grids".into()));
        }
        Ok(self
            .amplitudes
            .iter()
            .zip(&other.amplitudes)
            .map(|(a, b)| a.conj() * b)
            .sum::<Complex64>()
            * self.cell_area())
    }

    /// Purity `Tr ρ²` of the reduced state obtained by tracing out the
    /// complementary coordinate. Both choices agree mathematically.
    pub fn purity_on(&self, axis: Axis) -> f64 {
        // Reduced state on `axis`: lines parallel to it, one per traced point.
        let lines = self.lines(axis);
        let (keep, traced) = match axis {
            Axis::System => (self.grid_x, self.grid_pointer),
            Axis::Pointer => (self.grid_pointer, self.grid_x),
        };
        let n = keep.n;
        let w_traced = traced.spacing();
        let w_keep = keep.spacing();
        // ρ_ij = h_traced Σ_lines a_i a_j*, purity = h_keep² Σ_ij |ρ_ij|².
        let sum: f64 = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut row = vec![Complex64::new(0.0, 0.0); n];
                for line in &lines {
                    let ai = line[i];
                    if ai == Complex64::new(0.0, 0.0) {
                        continue;
                    }
                    for (r, aj) in row.iter_mut().zip(line) {
                        *r += ai * aj.conj();
                    }
                }
                row.iter().map(|r| r.norm_sqr()).sum::<f64>()
            })
            .collect::<Vec<_>>()
            .iter()
            .sum();
        sum * (w_traced * w_keep).powi(2)
    }

    /// Reduced-state purity on the smaller of the two grids.
    pub fn factorization_metric(&self) -> FactorizationMetric {
        let axis = if self.grid_x.n <= self.grid_pointer.n { Axis::System } else { Axis::Pointer };
        let purity = self.purity_on(axis);
        FactorizationMetric { purity, linear_entropy: 1.0 - purity }
    }
}

pub fn factorization_metric(psi: &WaveFunction2D) -> FactorizationMetric {
    psi.factorization_metric()
}

/// `Ψ0(x, X) = ψ(x) φ(X)`.
pub fn product_state(psi: &WaveFunction1D, phi: &WaveFunction1D) -> Result<WaveFunction2D> {
    for (name, w) in [("system", psi), ("pointer", phi)] {
        if (w.norm() - 1.0).abs() > 1e-9 {
            return Err(Error::Precondition(format!("{name} factor not normalized (norm {})", w.norm())));
        }
    }
    let amplitudes = phi
        .amplitudes
        .iter()
        .flat_map(|b| psi.amplitudes.iter().map(move |a| a * b))
        .collect();
    WaveFunction2D::new(psi.grid, phi.grid, amplitudes, 0.0)
}

/// Writes a complex joint field in the plain-text grid format.
pub fn write_grid_file<W: Write>(out: &mut W, psi: &WaveFunction2D, tag: Option<&str>) -> Result<()> {
    write_header(out, &psi.grid_x, &psi.grid_pointer, psi.time, tag)?;
    for a in &psi.amplitudes {
        writeln!(out, "{:e} {:e}", a.re, a.im)?;
    }
    Ok(())
}

/// Writes a real joint field (velocity, quantum potential, ...) in the grid
/// format; imaginary parts are written as zero.
pub fn write_real_field<W: Write>(
    out: &mut W,
    grid_x: &Grid1D,
    grid_pointer: &Grid1D,
    time: f64,
    name: &str,
    values: &[f64],
) -> Result<()> {
    if values.len() != grid_x.n * grid_pointer.n {
        return Err(Error::GridMismatch(format!("field `{name}` has {} values", values.len())));
    }
    write_header(out, grid_x, grid_pointer, time, Some(name))?;
    for v in values {
        writeln!(out, "{:e} 0e0", v)?;
    }
    Ok(())
}

fn write_header<W: Write>(out: &mut W, gx: &Grid1D, gbx: &Grid1D, t: f64, tag: Option<&str>) -> Result<()> {
    writeln!(
        out,
        "# grid2d {} {} {:e} {:e} {:e} {:e} {:e}",
        gx.n, gbx.n, gx.min, gx.max, gbx.min, gbx.max, t
    )?;
    writeln!(out, "# re im pairs row-major (x fastest)")?;
    if let Some(name) = tag {
        writeln!(out, "# field {name}")?;
    }
    Ok(())
}

/// Reads a grid file. Returns the field and its `# field` tag, if any.
pub fn read_grid_file<R: BufRead>(input: R) -> Result<(WaveFunction2D, Option<String>)> {
    let mut lines = input.lines();
    let header = lines.next().ok_or_else(|| Error::Format("empty grid file".into()))??;
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.len() != 9 || parts[0] != "#" || parts[1] != "grid2d" {
        return Err(Error::Format(format!("bad header line `{header}`")));
    }
    let int = |s: &str| s.parse::<usize>().map_err(|e| Error::Format(format!("`{s}`: {e}")));
    let real = |s: &str| s.parse::<f64>().map_err(|e| Error::Format(format!("`{s}`: {e}")));
    let grid_x = make_uniform_grid(real(parts[4])?, real(parts[5])?, int(parts[2])?)?;
    let grid_pointer = make_uniform_grid(real(parts[6])?, real(parts[7])?, int(parts[3])?)?;
    let time = real(parts[8])?;

    let mut tag = None;
    let mut values = Vec::with_capacity(2 * grid_x.n * grid_pointer.n);
    for line in lines {
        let line = line?;
        let trimmed = line.trim();
        if let Some(comment) = trimmed.strip_prefix('#') {
            if let Some(name) = comment.trim().strip_prefix("field") {
                tag = Some(name.trim().to_string());
            }
            continue;
        }
        for tok in trimmed.split_whitespace() {
            values.push(real(tok)?);
        }
    }
    if values.len() != 2 * grid_x.n * grid_pointer.n {
        return Err(Error::Format(format!(
            "expected {} values, found {}",
            2 * grid_x.n * grid_pointer.n,
            values.len()
        )));
    }
    let amplitudes = values.chunks_exact(2).map(|p| Complex64::new(p[0], p[1])).collect();
    Ok((WaveFunction2D::new(grid_x, grid_pointer, amplitudes, time)?, tag))
}
