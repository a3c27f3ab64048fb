//! Command-line front end: subcommand dispatch, output files and exit codes.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::bohm::write_trajectories_csv;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::experiments::{self, Check};
use crate::fields::{write_grid_file, WaveFunction2D};
use crate::model::CouplingMode;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;
pub const EXIT_INVALID: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "bohmlab", version, about = "Protective and impulsive pointer-coupling simulations with Bohmian trajectories")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Config file (`key = value` lines); defaults are used when absent.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,
    /// Ensemble seed, overrides the config.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Also write wavefunction snapshots.
    #[arg(long, global = true)]
    pub snapshots: bool,
    #[arg(long, global = true)]
    pub quiet: bool,
    /// Overwrite existing output files.
    #[arg(long, global = true)]
    pub force: bool,
    /// Extra `key=value` override, applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Trap ground state and the conditional energy curve.
    Groundstate,
    /// Adiabatic ramp and coast.
    Protective,
    /// Short strong kick.
    Impulsive,
    /// Trajectories only, for the mode set in the config.
    Trajectories,
    /// Final adiabatic overlap against the ramp duration.
    ScanAdiabatic {
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
    },
    /// Energy shift against the regularization width.
    ScanEpsilon {
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
    },
    /// Quantum potential against coupling at mid-ramp.
    DiagnoseCompensation,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Groundstate => "groundstate",
            Command::Protective => "protective",
            Command::Impulsive => "impulsive",
            Command::Trajectories => "trajectories",
            Command::ScanAdiabatic { .. } => "scan-adiabatic",
            Command::ScanEpsilon { .. } => "scan-epsilon",
            Command::DiagnoseCompensation => "diagnose-compensation",
        }
    }
}

/// Parses `argv`, runs the command and returns the process exit status.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(outcome) => {
            if !cli.common.quiet {
                eprintln!("{}", outcome.summary);
            }
            outcome.code
        }
        Err(e) => {
            eprintln!("bohmlab {}: {e}", cli.command.name());
            if e.is_numerical() {
                EXIT_NUMERICAL
            } else {
                EXIT_VALIDATION
            }
        }
    }
}

pub struct Outcome {
    pub code: i32,
    pub summary: String,
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::from_path(path)?,
        None => RunConfig::parse("")?,
    };
    for item in &common.overrides {
        let (key, value) = item
            .split_once('=')
            .ok_or_else(|| Error::Config { line: 0, key: item.clone(), msg: "expected KEY=VALUE".into() })?;
        cfg.set_override(key.trim(), value.trim())?;
    }
    if let Some(seed) = common.seed {
        cfg.set_override("ensemble.seed", &seed.to_string())?;
    }
    Ok(cfg)
}

/// Collects output files in memory so nothing is written before the run
/// has finished and every target has been checked.
struct Outputs {
    dir: PathBuf,
    force: bool,
    files: Vec<(String, Vec<u8>)>,
}

impl Outputs {
    fn new(dir: &Path, force: bool) -> Self {
        Self { dir: dir.to_path_buf(), force, files: Vec::new() }
    }

    fn check_free(&self, names: &[&str]) -> Result<()> {
        if self.force {
            return Ok(());
        }
        for name in names {
            let path = self.dir.join(name);
            if path.exists() {
                return Err(Error::Io(std::io::Error::new(
                    std::io::ErrorKind::AlreadyExists,
                    format!("{} exists (use --force to overwrite)", path.display()),
                )));
            }
        }
        Ok(())
    }

    fn add(&mut self, name: &str, bytes: Vec<u8>) {
        self.files.push((name.to_string(), bytes));
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.add(name, bytes);
        Ok(())
    }

    fn snapshots(&mut self, states: &[WaveFunction2D]) -> Result<()> {
        for (i, psi) in states.iter().enumerate() {
            let mut bytes = Vec::new();
            write_grid_file(&mut bytes, psi, Some(&format!("t = {}", psi.time)))?;
            self.add(&format!("snapshot_{i:03}.grid"), bytes);
        }
        Ok(())
    }

    fn flush(self) -> Result<()> {
        let names: Vec<&str> = self.files.iter().map(|(n, _)| n.as_str()).collect();
        self.check_free(&names)?;
        fs::create_dir_all(&self.dir)?;
        for (name, bytes) in &self.files {
            let mut out = BufWriter::new(fs::File::create(self.dir.join(name))?);
            out.write_all(bytes)?;
            out.flush()?;
        }
        Ok(())
    }
}

fn table(header: &str, rows: impl IntoIterator<Item = Vec<f64>>) -> Vec<u8> {
    let mut s = format!("# {header}\n");
    for row in rows {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        s.push_str(&cells.join(" "));
        s.push('\n');
    }
    s.into_bytes()
}

fn summarize(name: &str, valid: bool, reason: Option<&str>, checks: &[Check]) -> Outcome {
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    let code = if valid { EXIT_OK } else { EXIT_INVALID };
    let mut summary = if failed.is_empty() {
        format!("{name}: {} checks passed", checks.len())
    } else {
        format!("{name}: {} of {} checks failed: {}", failed.len(), checks.len(), failed.join(", "))
    };
    if let Some(r) = reason {
        summary.push_str(&format!("; report flagged invalid: {r}"));
    }
    Outcome { code, summary }
}

fn configure_threads() {
    let n = std::env::var("BOHMLAB_THREADS").ok().and_then(|v| v.trim().parse::<usize>().ok()).unwrap_or(0);
    // A second call in the same process (tests) keeps the first pool.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
}

pub fn run(cli: &Cli) -> Result<Outcome> {
    configure_threads();
    let cfg = load_config(&cli.common)?;
    let mut out = Outputs::new(&cli.common.out, cli.common.force);
    out.check_free(&["report.json"])?;
    out.add("config.cfg", cfg.to_text().into_bytes());
    let name = cli.command.name();
    let outcome = match &cli.command {
        Command::Groundstate => {
            let r = experiments::run_groundstate(&cfg)?;
            out.json("report.json", &r)?;
            let xs = r.state.grid.points();
            out.add("ground_state.dat", table("x |psi|^2", xs.iter().zip(r.state.density()).map(|(x, d)| vec![*x, d])));
            out.add("energy_curve.dat", curve_table(&r.energy_curve));
            summarize(name, r.valid, None, &r.checks)
        }
        Command::Protective => {
            let r = experiments::run_protective(&cfg)?;
            protective_outputs(&mut out, &r, cli.common.snapshots)?;
            summarize(name, r.valid, r.invalid_reason.as_deref(), &r.checks)
        }
        Command::Impulsive => {
            let r = experiments::run_impulsive(&cfg)?;
            impulsive_outputs(&mut out, &r, cli.common.snapshots)?;
            summarize(name, r.valid, r.invalid_reason.as_deref(), &r.checks)
        }
        Command::Trajectories => match cfg.mode() {
            CouplingMode::Protective => {
                let r = experiments::run_protective(&cfg)?;
                out.json("report.json", &TrajectorySummary::protective(&r))?;
                out.add("trajectories.csv", trajectory_csv(&r.trajectory_paths)?);
                summarize(name, r.valid, r.invalid_reason.as_deref(), &[])
            }
            CouplingMode::Impulsive => {
                let r = experiments::run_impulsive(&cfg)?;
                out.json("report.json", &TrajectorySummary::impulsive(&r))?;
                out.add("trajectories.csv", trajectory_csv(&r.trajectory_paths)?);
                summarize(name, r.valid, r.invalid_reason.as_deref(), &[])
            }
        },
        Command::ScanAdiabatic { values } => {
            let v = values.clone().unwrap_or_else(|| cfg.scan().T_values);
            let r = experiments::scan_adiabaticity(&v, &cfg)?;
            out.json("report.json", &r)?;
            out.add("scan.dat", table("T overlap", r.values.iter().zip(&r.responses).map(|(a, b)| vec![*a, *b])));
            summarize(name, true, None, &r.checks)
        }
        Command::ScanEpsilon { values } => {
            let v = values.clone().unwrap_or_else(|| cfg.scan().eps_values);
            let r = experiments::scan_regularization(&v, &cfg)?;
            out.json("report.json", &r)?;
            out.add(
                "scan.dat",
                table(
                    "epsilon delta_E error_vs_extrapolant",
                    (0..r.values.len()).map(|i| vec![r.values[i], r.responses[i], r.errors[i]]),
                ),
            );
            summarize(name, true, None, &r.checks)
        }
        Command::DiagnoseCompensation => {
            let r = experiments::run_compensation(&cfg)?;
            out.json("report.json", &r)?;
            out.add("compensation.dat", compensation_table(&r.record));
            if cli.common.snapshots {
                out.snapshots(std::slice::from_ref(&r.state))?;
            }
            summarize(name, r.valid, None, &r.checks)
        }
    };
    out.flush()?;
    Ok(outcome)
}

fn curve_table(c: &crate::propagator::EnergyCurve) -> Vec<u8> {
    table(
        &format!("X E dE/dX |psi_gamma(0)|^2  (f = {})", c.f_frozen),
        (0..c.x_samples.len()).map(|i| vec![c.x_samples[i], c.energies[i], c.de_dx[i], c.psi_gamma_at_origin_sq[i]]),
    )
}

fn compensation_table(c: &experiments::CompensationRecord) -> Vec<u8> {
    table(&format!("x Q_x V_c  (t = {})", c.t), c.profile.iter().map(|r| r.to_vec()))
}

fn trajectory_csv(paths: &[crate::bohm::Trajectory]) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    write_trajectories_csv(&mut bytes, paths)?;
    Ok(bytes)
}

fn protective_outputs(out: &mut Outputs, r: &experiments::ProtectiveReport, snapshots: bool) -> Result<()> {
    out.json("report.json", r)?;
    let mut csv = String::from(
        "t,f,X_mean,X_width,p_X_mean,X_shift,X_shift_oracle,delta_E,purity,norm,adiabatic_overlap,density_at_origin\n",
    );
    for s in &r.series {
        let row = [
            s.t,
            s.f,
            s.pointer_mean,
            s.pointer_width,
            s.pointer_momentum,
            s.pointer_shift,
            s.oracle_shift,
            s.delta_e,
            s.purity,
            s.norm,
            s.adiabatic_overlap,
            s.density_at_origin,
        ];
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        csv.push_str(&cells.join(","));
        csv.push('\n');
    }
    out.add("series.csv", csv.into_bytes());
    out.add("trajectories.csv", trajectory_csv(&r.trajectory_paths)?);
    let o = &r.oracle;
    let every = (o.times.len() / 1000).max(1);
    out.add(
        "pointer_oracle.dat",
        table("t X p_X", (0..o.times.len()).step_by(every).map(|i| vec![o.times[i], o.position[i], o.momentum[i]])),
    );
    if let Some(c) = &r.energy_curve {
        out.add("energy_curve.dat", curve_table(c));
    }
    if let Some(c) = &r.compensation {
        out.add("compensation.dat", compensation_table(c));
    }
    if snapshots {
        out.snapshots(&r.snapshots)?;
    }
    Ok(())
}

fn impulsive_outputs(out: &mut Outputs, r: &experiments::ImpulsiveReport, snapshots: bool) -> Result<()> {
    out.json("report.json", r)?;
    out.add("trajectories.csv", trajectory_csv(&r.trajectory_paths)?);
    let h = &r.momentum_histogram;
    out.add(
        "momentum_histogram.dat",
        table(
            "p_X_center numeric predicted",
            (0..h.numeric.len()).map(|i| vec![0.5 * (h.edges[i] + h.edges[i + 1]), h.numeric[i], h.predicted[i]]),
        ),
    );
    out.add(
        "deflection.dat",
        table(
            "x0 X0 max|x-x0|",
            r.initial_points.iter().zip(&r.max_displacements).map(|(p, d)| vec![p.x, p.pointer, *d]),
        ),
    );
    if snapshots {
        out.snapshots(&r.snapshots)?;
    }
    Ok(())
}

/// Report of the `trajectories` subcommand.
#[derive(Debug, Serialize)]
struct TrajectorySummary<'a> {
    experiment: &'static str,
    mode: CouplingMode,
    valid: bool,
    seed: u64,
    config: &'a std::collections::BTreeMap<String, crate::config::ResolvedEntry>,
    count: usize,
    equivariance: &'a [crate::bohm::EquivarianceCheck],
    displacement: Option<&'a experiments::DisplacementStats>,
    deflection: Option<&'a experiments::Deflection>,
}

impl<'a> TrajectorySummary<'a> {
    fn protective(r: &'a experiments::ProtectiveReport) -> Self {
        Self {
            experiment: "trajectories",
            mode: CouplingMode::Protective,
            valid: r.valid,
            seed: r.seed,
            config: &r.config,
            count: r.trajectory_paths.len(),
            equivariance: &r.equivariance,
            displacement: Some(&r.trajectories),
            deflection: None,
        }
    }

    fn impulsive(r: &'a experiments::ImpulsiveReport) -> Self {
        Self {
            experiment: "trajectories",
            mode: CouplingMode::Impulsive,
            valid: r.valid,
            seed: r.seed,
            config: &r.config,
            count: r.trajectory_paths.len(),
            equivariance: &r.equivariance,
            displacement: None,
            deflection: Some(&r.deflection),
        }
    }
}
