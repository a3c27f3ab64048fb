//! Run configuration: flat `key = value` text with `#` comments.
//!
//! Keys are dotted (`coupling.mode`); a bare leaf (`mode`) is accepted when
//! it names exactly one key. Every resolved value remembers whether it came
//! from the defaults, the file, or the command line.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::CouplingMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Default,
    User,
    CommandLine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemTrap {
    Box,
    Harmonic,
}

impl FromStr for SystemTrap {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "box" => Ok(Self::Box),
            "harmonic" => Ok(Self::Harmonic),
            other => Err(format!("unknown trap `{other}` (box|harmonic)")),
        }
    }
}

trait ConfigValue: Sized {
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

impl ConfigValue for f64 {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        let v: f64 = s.parse().map_err(|_| format!("expected a number, got `{s}`"))?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(format!("expected a finite number, got `{s}`"))
        }
    }
    fn render(&self) -> String {
        format!("{self}")
    }
}

impl ConfigValue for usize {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        s.parse().map_err(|_| format!("expected a non-negative integer, got `{s}`"))
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for u64 {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        s.parse().map_err(|_| format!("expected a non-negative integer, got `{s}`"))
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for bool {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        match s {
            "true" | "on" | "yes" => Ok(true),
            "false" | "off" | "no" => Ok(false),
            _ => Err(format!("expected true/false, got `{s}`")),
        }
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for CouplingMode {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        s.parse()
    }
    fn render(&self) -> String {
        match self {
            CouplingMode::Protective => "protective".into(),
            CouplingMode::Impulsive => "impulsive".into(),
        }
    }
}

impl ConfigValue for SystemTrap {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        s.parse()
    }
    fn render(&self) -> String {
        match self {
            SystemTrap::Box => "box".into(),
            SystemTrap::Harmonic => "harmonic".into(),
        }
    }
}

/// `auto` or a number.
impl ConfigValue for Option<f64> {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        if s == "auto" {
            Ok(None)
        } else {
            f64::parse_value(s).map(Some)
        }
    }
    fn render(&self) -> String {
        self.map_or_else(|| "auto".into(), |v| v.render())
    }
}

/// Comma-separated numbers.
impl ConfigValue for Vec<f64> {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        s.split(',').map(|p| f64::parse_value(p.trim())).collect()
    }
    fn render(&self) -> String {
        self.iter().map(|v| v.render()).collect::<Vec<_>>().join(",")
    }
}

macro_rules! run_config {
    ($( $section:ident { $( $field:ident : $ty:ty = $default:expr, $key:literal; )* } )*) => {
        $(
            #[allow(non_snake_case)]
            #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
            pub struct $section { $( pub $field: $ty, )* }
        )*

        fn defaults() -> Values {
            Values { $( $( $field: $default, )* )* }
        }

        #[allow(non_snake_case)]
        #[derive(Debug, Clone, PartialEq)]
        struct Values { $( $( $field: $ty, )* )* }

        const KEYS: &[&str] = &[ $( $( $key, )* )* ];

        impl Values {
            fn set(&mut self, key: &str, raw: &str) -> std::result::Result<(), String> {
                match key {
                    $( $( $key => self.$field = <$ty as ConfigValue>::parse_value(raw)?, )* )*
                    _ => return Err("unknown key".into()),
                }
                Ok(())
            }

            fn get(&self, key: &str) -> String {
                match key {
                    $( $( $key => self.$field.render(), )* )*
                    _ => String::new(),
                }
            }
        }
    };
}

run_config! {
    GridConfig {
        n_x: usize = 256, "grid.n_x";
        x_min: f64 = -0.5, "grid.x_min";
        x_max: f64 = 0.5, "grid.x_max";
        n_X: usize = 384, "grid.n_X";
        X_min: f64 = -6.0, "grid.X_min";
        X_max: f64 = 6.0, "grid.X_max";
    }
    MassConfig {
        m: f64 = 1.0, "mass.m";
        M: f64 = 1000.0, "mass.M";
    }
    TrapConfig {
        trap_kind: SystemTrap = SystemTrap::Box, "trap.kind";
        L: f64 = 1.0, "trap.L";
        trap_center: f64 = 0.0, "trap.center";
        omega: f64 = 1.0, "trap.omega";
        check_adiabatic_margin: bool = true, "check_adiabatic_margin";
    }
    CouplingConfig {
        mode: CouplingMode = CouplingMode::Protective, "coupling.mode";
        epsilon: f64 = 0.02, "coupling.epsilon";
        A: f64 = 0.1, "coupling.A";
        T: f64 = 100.0, "coupling.T";
        w: f64 = 0.05, "coupling.w";
        D_center: f64 = 0.0, "coupling.D_center";
        P0: f64 = 20.0, "coupling.P0";
        tau: f64 = 5e-5, "coupling.tau";
    }
    PointerConfig {
        width: f64 = 0.1, "pointer.width";
        X0: f64 = 0.3, "pointer.X0";
        p0: f64 = 0.0, "pointer.p0";
    }
    EnsembleConfig {
        count: usize = 2000, "ensemble.count";
        trajectories: usize = 200, "ensemble.trajectories";
        seed: u64 = 1, "ensemble.seed";
    }
    ScheduleConfig {
        dt: f64 = 0.01, "schedule.dt";
        T_coast: Option<f64> = None, "schedule.T_coast";
        snapshot_stride: usize = 100, "schedule.snapshot_stride";
        trajectory_stride: usize = 10, "schedule.trajectory_stride";
        pulse_steps: usize = 2000, "schedule.pulse_steps";
        impulsive_coast: f64 = 1e-3, "schedule.impulsive_coast";
        impulsive_dt: f64 = 5e-6, "schedule.impulsive_dt";
    }
    Thresholds {
        adiabatic_overlap: f64 = 0.95, "thresholds.adiabatic_overlap";
        impulsive_validity: f64 = 0.9, "thresholds.impulsive_validity";
        purity: f64 = 0.99, "thresholds.purity";
        compensation: f64 = 0.05, "thresholds.compensation";
        momentum_rel: f64 = 0.10, "thresholds.momentum_rel";
        shift_rel: f64 = 0.15, "thresholds.shift_rel";
        force_rel: f64 = 0.10, "thresholds.force_rel";
        eq7_rel: f64 = 0.05, "thresholds.eq7_rel";
        displacement: f64 = 0.02, "thresholds.displacement";
        displacement_percentile: f64 = 95.0, "thresholds.displacement_percentile";
        deflection_ratio: f64 = 10.0, "thresholds.deflection_ratio";
        ks: f64 = 0.05, "thresholds.ks";
        fidelity: f64 = 0.99, "thresholds.fidelity";
        delta_force_rel: f64 = 0.10, "thresholds.delta_force_rel";
        norm_drift: f64 = 1e-8, "thresholds.norm_drift";
    }
    ScanConfig {
        T_values: Vec<f64> = vec![10.0, 30.0, 100.0], "scan.T_values";
        eps_values: Vec<f64> = vec![0.08, 0.04, 0.02], "scan.eps_values";
        fX: f64 = 0.01, "scan.fX";
    }
}

/// Fully resolved configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: Values,
    provenance: BTreeMap<&'static str, Source>,
    lines: BTreeMap<&'static str, usize>,
}

/// One resolved entry as embedded in reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedEntry {
    pub value: String,
    pub source: Source,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: defaults(),
            provenance: KEYS.iter().map(|k| (*k, Source::Default)).collect(),
            lines: BTreeMap::new(),
        }
    }
}

fn resolve_key(name: &str) -> std::result::Result<&'static str, String> {
    if let Some(k) = KEYS.iter().find(|k| **k == name) {
        return Ok(k);
    }
    let matches: Vec<&'static str> =
        KEYS.iter().copied().filter(|k| k.rsplit('.').next() == Some(name)).collect();
    match matches.as_slice() {
        [one] => Ok(one),
        [] => Err("unknown key".into()),
        many => Err(format!("ambiguous key, use one of {}", many.join(", "))),
    }
}

impl RunConfig {
    /// Parses configuration text. Line numbers in errors are 1-based.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((k, v)) = content.split_once('=') else {
                return Err(Error::Config { line, key: content.into(), msg: "expected `key = value`".into() });
            };
            let (k, v) = (k.trim(), v.trim());
            let key = resolve_key(k).map_err(|msg| Error::Config { line, key: k.into(), msg })?;
            if let Some(first) = cfg.lines.get(key) {
                return Err(Error::Config { line, key: key.into(), msg: format!("duplicate key (first set on line {first})") });
            }
            cfg.values.set(key, v).map_err(|msg| Error::Config { line, key: key.into(), msg })?;
            cfg.provenance.insert(key, Source::User);
            cfg.lines.insert(key, line);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Overrides one key from the command line and revalidates.
    pub fn set_override(&mut self, key: &str, value: &str) -> Result<()> {
        let k = resolve_key(key).map_err(|msg| Error::Config { line: 0, key: key.into(), msg })?;
        self.values.set(k, value).map_err(|msg| Error::Config { line: 0, key: k.into(), msg })?;
        self.provenance.insert(k, Source::CommandLine);
        self.lines.remove(k);
        self.validate()
    }

    fn fail(&self, key: &'static str, msg: impl Into<String>) -> Error {
        Error::Config { line: self.lines.get(key).copied().unwrap_or(0), key: key.into(), msg: msg.into() }
    }

    fn validate(&self) -> Result<()> {
        let v = &self.values;
        let positive = |key: &'static str, x: f64| if x > 0.0 { Ok(()) } else { Err(self.fail(key, format!("must be > 0, got {x}"))) };
        for (key, n) in [("grid.n_x", v.n_x), ("grid.n_X", v.n_X)] {
            if n < crate::fields::MIN_POINTS {
                return Err(self.fail(key, format!("need at least {} points", crate::fields::MIN_POINTS)));
            }
        }
        if !(v.x_max > v.x_min) {
            return Err(self.fail("grid.x_max", "x_max must exceed x_min"));
        }
        if !(v.X_max > v.X_min) {
            return Err(self.fail("grid.X_max", "X_max must exceed X_min"));
        }
        positive("mass.m", v.m)?;
        positive("mass.M", v.M)?;
        positive("trap.L", v.L)?;
        if v.omega < 0.0 {
            return Err(self.fail("trap.omega", "must be ≥ 0"));
        }
        positive("coupling.T", v.T)?;
        positive("coupling.tau", v.tau)?;
        if v.P0 < 0.0 {
            return Err(self.fail("coupling.P0", "must be ≥ 0"));
        }
        let hx = (v.x_max - v.x_min) / (v.n_x - 1) as f64;
        let hp = (v.X_max - v.X_min) / (v.n_X - 1) as f64;
        for (key, width, h) in [("coupling.epsilon", v.epsilon, hx), ("coupling.w", v.w, hx), ("pointer.width", v.width, hp)] {
            if !(width >= 3.0 * h) {
                return Err(self.fail(key, format!("{width} is under-resolved: must be ≥ 3·spacing = {}", 3.0 * h)));
            }
        }
        if !(v.X_min < v.X0 && v.X0 < v.X_max) {
            return Err(self.fail("pointer.X0", "outside the pointer grid"));
        }
        positive("schedule.dt", v.dt)?;
        positive("schedule.impulsive_dt", v.impulsive_dt)?;
        if v.impulsive_coast < 0.0 {
            return Err(self.fail("schedule.impulsive_coast", "must be ≥ 0"));
        }
        if let Some(tc) = v.T_coast {
            if tc < 0.0 {
                return Err(self.fail("schedule.T_coast", "must be ≥ 0"));
            }
        }
        for (key, n) in [
            ("schedule.snapshot_stride", v.snapshot_stride),
            ("schedule.trajectory_stride", v.trajectory_stride),
            ("schedule.pulse_steps", v.pulse_steps),
        ] {
            if n == 0 {
                return Err(self.fail(key, "must be ≥ 1"));
            }
        }
        if v.trajectories > v.count {
            return Err(self.fail("ensemble.trajectories", "cannot exceed ensemble.count"));
        }
        if !(0.0..=100.0).contains(&v.displacement_percentile) {
            return Err(self.fail("thresholds.displacement_percentile", "must lie in [0, 100]"));
        }
        for (key, list) in [("scan.T_values", &v.T_values), ("scan.eps_values", &v.eps_values)] {
            if list.is_empty() || list.iter().any(|x| *x <= 0.0) {
                return Err(self.fail(key, "needs positive values"));
            }
        }
        if v.eps_values.iter().any(|e| *e < 3.0 * hx) {
            return Err(self.fail("scan.eps_values", format!("every ε must be ≥ 3·spacing = {}", 3.0 * hx)));
        }
        Ok(())
    }

    pub fn grid(&self) -> GridConfig {
        let v = &self.values;
        GridConfig { n_x: v.n_x, x_min: v.x_min, x_max: v.x_max, n_X: v.n_X, X_min: v.X_min, X_max: v.X_max }
    }
    pub fn mass(&self) -> MassConfig {
        MassConfig { m: self.values.m, M: self.values.M }
    }
    pub fn trap(&self) -> TrapConfig {
        let v = &self.values;
        TrapConfig { trap_kind: v.trap_kind, L: v.L, trap_center: v.trap_center, omega: v.omega, check_adiabatic_margin: v.check_adiabatic_margin }
    }
    pub fn coupling(&self) -> CouplingConfig {
        let v = &self.values;
        CouplingConfig { mode: v.mode, epsilon: v.epsilon, A: v.A, T: v.T, w: v.w, D_center: v.D_center, P0: v.P0, tau: v.tau }
    }
    pub fn pointer(&self) -> PointerConfig {
        PointerConfig { width: self.values.width, X0: self.values.X0, p0: self.values.p0 }
    }
    pub fn ensemble(&self) -> EnsembleConfig {
        EnsembleConfig { count: self.values.count, trajectories: self.values.trajectories, seed: self.values.seed }
    }
    pub fn schedule(&self) -> ScheduleConfig {
        let v = &self.values;
        ScheduleConfig {
            dt: v.dt,
            T_coast: v.T_coast,
            snapshot_stride: v.snapshot_stride,
            trajectory_stride: v.trajectory_stride,
            pulse_steps: v.pulse_steps,
            impulsive_coast: v.impulsive_coast,
            impulsive_dt: v.impulsive_dt,
        }
    }
    /// Coast after the protective ramp; `auto` means one ramp duration.
    pub fn coast_time(&self) -> f64 {
        self.values.T_coast.unwrap_or(self.values.T)
    }
    pub fn thresholds(&self) -> Thresholds {
        let v = &self.values;
        Thresholds {
            adiabatic_overlap: v.adiabatic_overlap,
            impulsive_validity: v.impulsive_validity,
            purity: v.purity,
            compensation: v.compensation,
            momentum_rel: v.momentum_rel,
            shift_rel: v.shift_rel,
            force_rel: v.force_rel,
            eq7_rel: v.eq7_rel,
            displacement: v.displacement,
            displacement_percentile: v.displacement_percentile,
            deflection_ratio: v.deflection_ratio,
            ks: v.ks,
            fidelity: v.fidelity,
            delta_force_rel: v.delta_force_rel,
            norm_drift: v.norm_drift,
        }
    }
    pub fn scan(&self) -> ScanConfig {
        ScanConfig { T_values: self.values.T_values.clone(), eps_values: self.values.eps_values.clone(), fX: self.values.fX }
    }

    pub fn mode(&self) -> CouplingMode {
        self.values.mode
    }
    pub fn seed(&self) -> u64 {
        self.values.seed
    }

    pub fn source(&self, key: &str) -> Option<Source> {
        resolve_key(key).ok().and_then(|k| self.provenance.get(k).copied())
    }

    /// Every key with its resolved value and source, in key order.
    pub fn resolved(&self) -> BTreeMap<String, ResolvedEntry> {
        KEYS.iter()
            .map(|k| (k.to_string(), ResolvedEntry { value: self.values.get(k), source: self.provenance[k] }))
            .collect()
    }

    /// Config text that parses back to the same values.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for k in KEYS {
            let _ = writeln!(out, "{k} = {}", self.values.get(k));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn minimal_file_resolves_defaults() {
        let cfg = RunConfig::parse("mode = protective\n").unwrap();
        assert_eq!(cfg.mode(), CouplingMode::Protective);
        assert_eq!(cfg.source("coupling.mode"), Some(Source::User));
        assert_eq!(cfg.source("coupling.A"), Some(Source::Default));
        assert_eq!(cfg.grid().n_x, 256);
        assert_eq!(cfg.coast_time(), 100.0);
        assert_eq!(cfg.resolved().len(), KEYS.len());
    }

    #[test]
    fn comments_dotted_keys_and_lists() {
        let text = "# header\ncoupling.mode = impulsive  # trailing\n\nscan.T_values = 1, 2,3\nschedule.T_coast = 5\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.mode(), CouplingMode::Impulsive);
        assert_eq!(cfg.scan().T_values, vec![1.0, 2.0, 3.0]);
        assert_eq!(cfg.coast_time(), 5.0);
    }

    #[test]
    fn underresolved_epsilon_is_rejected_with_location() {
        let err = RunConfig::parse("mode = protective\nepsilon = 0.001\n").unwrap_err();
        match err {
            Error::Config { line, key, msg } => {
                assert_eq!(line, 2);
                assert_eq!(key, "coupling.epsilon");
                assert!(msg.contains("spacing"));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn duplicate_unknown_and_mistyped_keys() {
        let dup = RunConfig::parse("coupling.A = 0.1\nA = 0.2\n").unwrap_err();
        assert!(matches!(dup, Error::Config { line: 2, ref key, .. } if key == "coupling.A"));
        let unknown = RunConfig::parse("colour = red\n").unwrap_err();
        assert!(matches!(unknown, Error::Config { line: 1, ref key, .. } if key == "colour"));
        let typed = RunConfig::parse("grid.n_x = many\n").unwrap_err();
        assert!(matches!(typed, Error::Config { line: 1, .. }));
        let no_eq = RunConfig::parse("just words\n").unwrap_err();
        assert!(matches!(no_eq, Error::Config { line: 1, .. }));
        let mode = RunConfig::parse("mode = gentle\n").unwrap_err();
        assert!(matches!(mode, Error::Config { line: 1, .. }));
    }

    #[test]
    fn command_line_override() {
        let mut cfg = RunConfig::parse("seed = 3\n").unwrap();
        cfg.set_override("ensemble.seed", "9").unwrap();
        assert_eq!(cfg.seed(), 9);
        assert_eq!(cfg.source("seed"), Some(Source::CommandLine));
        assert!(cfg.set_override("grid.n_x", "4").is_err());
    }

    #[test]
    fn text_round_trip() {
        let cfg = RunConfig::parse("coupling.A = 0.25\nscan.eps_values = 0.05,0.03\nschedule.T_coast = auto\n").unwrap();
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back.values, cfg.values);
    }

    proptest! {
        #[test]
        fn numeric_values_round_trip(a in -10.0f64..10.0, t in 0.001f64..1e4, seed in any::<u64>()) {
            let text = format!("coupling.A = {a}\ncoupling.T = {t}\nensemble.seed = {seed}\n");
            let cfg = RunConfig::parse(&text).unwrap();
            prop_assert_eq!(cfg.coupling().A, a);
            prop_assert_eq!(cfg.coupling().T, t);
            prop_assert_eq!(cfg.seed(), seed);
            let back = RunConfig::parse(&cfg.to_text()).unwrap();
            prop_assert_eq!(back.values, cfg.values);
        }
    }
}
