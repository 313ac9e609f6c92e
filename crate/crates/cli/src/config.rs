//! Flat `key = value` experiment configuration.
//!
//! ```text
//! # long run from single-mode data
//! rho = sqrt(3)
//! eps = 1e-3
//! M = 32
//! tau = 0.05
//! filter = deuflhard
//! n_steps = 20000
//! sample_stride = 10
//! K = 6
//! ```
//!
//! `tau` also accepts a resonant combination such as `resonant:+1,+6,+7`,
//! meaning `2π / (ω_1 + ω_6 + ω_7)`.

use std::fmt::Write as _;
use std::path::PathBuf;

use ini::Ini;
use strata::resonance::{resonant_tau, Sign};
use strata::{EnergyProfile, FilterPair, WaveParams};

use crate::CliError;

/// A step size given either literally or as a resonant frequency combination.
#[derive(Debug, Clone, PartialEq)]
pub enum StepSpec {
    Value(f64),
    Resonant(Vec<(Sign, usize)>),
}

impl StepSpec {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let text = text.trim();
        let Some(rest) = text.strip_prefix("resonant:") else {
            return parse_number(text).map(StepSpec::Value);
        };
        let terms = rest
            .split(',')
            .map(|t| {
                let t = t.trim();
                let (sign, digits) = match t.as_bytes().first() {
                    Some(b'+') => (Sign::Plus, &t[1..]),
                    Some(b'-') => (Sign::Minus, &t[1..]),
                    _ => (Sign::Plus, t),
                };
                digits
                    .parse::<usize>()
                    .map(|l| (sign, l))
                    .map_err(|_| CliError::Config(format!("bad resonant term {t:?}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        if terms.is_empty() {
            return Err(CliError::Config("empty resonant combination".into()));
        }
        Ok(StepSpec::Resonant(terms))
    }

    pub fn resolve(&self, params: &WaveParams) -> Result<f64, CliError> {
        match self {
            StepSpec::Value(v) => Ok(*v),
            StepSpec::Resonant(terms) => Ok(resonant_tau(terms, params)?),
        }
    }

    fn render(&self) -> String {
        match self {
            StepSpec::Value(v) => format!("{v:e}"),
            StepSpec::Resonant(terms) => {
                let parts: Vec<String> = terms.iter().map(|(s, l)| format!("{s}{l}")).collect();
                format!("resonant:{}", parts.join(","))
            }
        }
    }
}

/// Accepts plain floats and `sqrt(x)`.
pub fn parse_number(text: &str) -> Result<f64, CliError> {
    let t = text.trim();
    let value = match t.strip_prefix("sqrt(").and_then(|r| r.strip_suffix(')')) {
        Some(inner) => inner.trim().parse::<f64>().map(f64::sqrt),
        None => t.parse::<f64>(),
    };
    value.map_err(|_| CliError::Config(format!("not a number: {t:?}")))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub rho: f64,
    pub eps: f64,
    pub m: usize,
    pub tau: StepSpec,
    pub filter: String,
    pub n_steps: usize,
    pub sample_stride: usize,
    pub k: u32,
    pub s: f64,
    pub nu: f64,
    pub m_max: u32,
    pub seed: u64,
    pub output: Option<PathBuf>,
    pub tau_grid: Vec<StepSpec>,
    pub eps_list: Vec<f64>,
    /// Windowed-max postprocessing length in steps; 0 disables it.
    pub window: usize,
    pub require_nonresonant: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            rho: 3f64.sqrt(),
            eps: 1e-3,
            m: 32,
            tau: StepSpec::Value(0.05),
            filter: "deuflhard".into(),
            n_steps: 20_000,
            sample_stride: 10,
            k: 6,
            s: 1.0,
            nu: 0.0,
            m_max: 2,
            seed: 0,
            output: None,
            tau_grid: Vec::new(),
            eps_list: (2..=8).map(|p| 10f64.powi(-p)).collect(),
            window: 0,
            require_nonresonant: false,
        }
    }
}

const KEYS: &[&str] = &[
    "rho",
    "eps",
    "M",
    "tau",
    "filter",
    "n_steps",
    "sample_stride",
    "K",
    "s",
    "nu",
    "m_max",
    "seed",
    "output",
    "tau_grid",
    "eps_list",
    "window",
    "require_nonresonant",
];

fn parse_int<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, CliError> {
    v.trim().parse().map_err(|_| CliError::Config(format!("{key}: not an integer: {v:?}")))
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let ini = Ini::load_from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        let mut cfg = Self::default();
        for (section, props) in ini.iter() {
            if let Some(name) = section {
                return Err(CliError::Config(format!("sections are not supported: [{name}]")));
            }
            for (key, value) in props.iter() {
                cfg.set(key, value)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<(), CliError> {
        match key {
            "rho" => self.rho = parse_number(v)?,
            "eps" => self.eps = parse_number(v)?,
            "M" => self.m = parse_int(key, v)?,
            "tau" => self.tau = StepSpec::parse(v)?,
            "filter" => self.filter = v.trim().to_string(),
            "n_steps" => self.n_steps = parse_int(key, v)?,
            "sample_stride" => self.sample_stride = parse_int(key, v)?,
            "K" => self.k = parse_int(key, v)?,
            "s" => self.s = parse_number(v)?,
            "nu" => self.nu = parse_number(v)?,
            "m_max" => self.m_max = parse_int(key, v)?,
            "seed" => self.seed = parse_int(key, v)?,
            "output" => self.output = Some(PathBuf::from(v.trim())),
            "tau_grid" => {
                self.tau_grid =
                    v.split(';').filter(|t| !t.trim().is_empty()).map(StepSpec::parse).collect::<Result<_, _>>()?
            }
            "eps_list" => {
                self.eps_list =
                    v.split(',').filter(|t| !t.trim().is_empty()).map(parse_number).collect::<Result<_, _>>()?
            }
            "window" => self.window = parse_int(key, v)?,
            "require_nonresonant" => {
                self.require_nonresonant = match v.trim() {
                    "true" | "1" | "yes" => true,
                    "false" | "0" | "no" => false,
                    other => return Err(CliError::Config(format!("{key}: not a boolean: {other:?}"))),
                }
            }
            other => {
                return Err(CliError::Config(format!("unknown key {other:?}; expected one of {}", KEYS.join(", "))))
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let positive = [("rho", self.rho), ("eps", self.eps)];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(CliError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if let StepSpec::Value(t) = self.tau {
            if !(t > 0.0 && t.is_finite()) {
                return Err(CliError::Config(format!("tau must be positive, got {t}")));
            }
        }
        if self.m == 0 || self.sample_stride == 0 {
            return Err(CliError::Config("M and sample_stride must be positive".into()));
        }
        if self.k < 3 || self.k as usize > self.m {
            return Err(CliError::Config(format!("K must satisfy 3 <= K <= M, got K = {}, M = {}", self.k, self.m)));
        }
        if !(0.0..0.5).contains(&self.nu) {
            return Err(CliError::Config(format!("nu must lie in [0, 1/2), got {}", self.nu)));
        }
        if self.eps_list.iter().any(|e| !(*e > 0.0)) {
            return Err(CliError::Config("eps_list entries must be positive".into()));
        }
        if self.window > 0 && !self.window.is_multiple_of(self.sample_stride) {
            return Err(CliError::Config(format!(
                "window {} must be a multiple of sample_stride {}",
                self.window, self.sample_stride
            )));
        }
        Ok(())
    }

    pub fn params(&self) -> Result<WaveParams, CliError> {
        Ok(WaveParams::new(self.rho, self.m)?)
    }

    pub fn profile(&self) -> Result<EnergyProfile, CliError> {
        Ok(EnergyProfile::new(self.k)?)
    }

    pub fn filters(&self) -> Result<FilterPair, CliError> {
        Ok(FilterPair::by_name(&self.filter)?)
    }

    /// Canonical text form, also used for metadata sidecars.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        kv("rho", format!("{:.17e}", self.rho));
        kv("eps", format!("{:e}", self.eps));
        kv("M", self.m.to_string());
        kv("tau", self.tau.render());
        kv("filter", self.filter.clone());
        kv("n_steps", self.n_steps.to_string());
        kv("sample_stride", self.sample_stride.to_string());
        kv("K", self.k.to_string());
        kv("s", format!("{:e}", self.s));
        kv("nu", format!("{:e}", self.nu));
        kv("m_max", self.m_max.to_string());
        kv("seed", self.seed.to_string());
        if let Some(p) = &self.output {
            kv("output", p.display().to_string());
        }
        if !self.tau_grid.is_empty() {
            kv("tau_grid", self.tau_grid.iter().map(StepSpec::render).collect::<Vec<_>>().join(";"));
        }
        kv("eps_list", self.eps_list.iter().map(|e| format!("{e:e}")).collect::<Vec<_>>().join(","));
        kv("window", self.window.to_string());
        kv("require_nonresonant", self.require_nonresonant.to_string());
        s
    }
}
