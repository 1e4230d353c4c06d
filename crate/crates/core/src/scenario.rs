//! Scenario configs: flat `section.key = value` text plus named presets.
//!
//! ```text
//! # comment
//! preset = fig3
//! channel.cn2 = 1e-14
//! run.modes = full, asymptotic
//! sweep.radii_w = 0.01, 0.1, 1
//! ```

use std::path::{Path, PathBuf};

use crate::channel::{BeamParams, ChannelParams, ScaleOptions, WaistModel};
use crate::error::{Error, Result};
use crate::kernels::HyperArgument;
use crate::moments::{EngineConfig, Mode, Reduction};
use crate::transmittance::{ApertureQuadConfig, CalibrationMode, McConfig, DEFAULT_SEED};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotAxes {
    Linear,
    LogLog,
}

impl PlotAxes {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "linear" => Some(PlotAxes::Linear),
            "log-log" | "loglog" => Some(PlotAxes::LogLog),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PlotAxes::Linear => "linear",
            PlotAxes::LogLog => "log-log",
        }
    }
}

/// Aperture radii, either absolute or in units of the mode-independent
/// full-kernel waist.
#[derive(Debug, Clone, PartialEq)]
pub enum RadiusGrid {
    Metres(Vec<f64>),
    Waists(Vec<f64>),
}

impl RadiusGrid {
    pub fn resolve(&self, waist: f64) -> Vec<f64> {
        match self {
            RadiusGrid::Metres(v) => v.clone(),
            RadiusGrid::Waists(v) => v.iter().map(|x| x * waist).collect(),
        }
    }

    fn values(&self) -> &[f64] {
        match self {
            RadiusGrid::Metres(v) | RadiusGrid::Waists(v) => v,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub beam: BeamParams,
    pub channel: ChannelParams,
    pub modes: Vec<Mode>,
    pub radii: RadiusGrid,
    /// Rytov labels for `rytov-sweep`; the radii then stay fixed.
    pub rytov: Vec<f64>,
    pub calibration: Option<CalibrationMode>,
    pub scale_options: ScaleOptions,
    pub engine: EngineConfig,
    pub aperture: ApertureQuadConfig,
    pub mc: McConfig,
    /// Cross-check each reported point against Monte Carlo.
    pub validate_mc: bool,
    pub out_dir: PathBuf,
    pub svg: Option<PlotAxes>,
}

fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n).map(|k| (a + (b - a) * k as f64 / (n - 1) as f64).exp()).collect()
}

pub const PRESETS: [&str; 7] = ["fig1-dashdot", "fig1-dashed", "fig1-solid", "fig3", "fig3-weak", "fig4", "fig5"];

impl Scenario {
    fn base(name: &str, r0: f64, q0: f64, cn2: f64, z: f64) -> Self {
        Self {
            name: name.into(),
            beam: BeamParams { r0, q0 },
            channel: ChannelParams { cn2, l0p: 1e-3, z },
            modes: vec![Mode::Full, Mode::Asymptotic],
            radii: RadiusGrid::Waists(log_grid(0.01, 3.0, 20)),
            rytov: Vec::new(),
            calibration: None,
            scale_options: ScaleOptions::default(),
            engine: EngineConfig::default(),
            aperture: ApertureQuadConfig::default(),
            mc: McConfig::default(),
            validate_mc: false,
            out_dir: PathBuf::from("."),
            svg: None,
        }
    }

    /// Named channel scenarios.
    pub fn preset(name: &str) -> Option<Self> {
        let s = match name {
            "fig1-dashdot" => Self::base(name, 0.01, 1e7, 2.5e-14, 20e3),
            "fig1-dashed" => Self::base(name, 0.01, 1e7, 5.8e-15, 17e3),
            "fig1-solid" => Self::base(name, 0.01, 1e7, 2.5e-16, 100e3),
            "fig3" => Self::base(name, 0.01, 1.29e7, 1e-14, 3e3),
            "fig3-weak" => Self::base(name, 0.01, 1.29e7, 5e-15, 3e3),
            "fig4" | "fig5" => {
                let q0 = if name == "fig4" { 1e7 } else { 1.29e7 };
                let mut s = Self::base(name, 0.01, q0, 1e-14, 3e3);
                s.modes = vec![Mode::Full];
                s.radii = RadiusGrid::Metres(vec![1e-3, 1e-2, 5e-2]);
                s.rytov = log_grid(1.0, 100.0, 7);
                s
            }
            _ => return None,
        };
        Some(s)
    }

    pub fn validate(&self) -> Result<()> {
        self.beam.validate()?;
        self.channel.validate()?;
        if self.modes.is_empty() {
            return Err(Error::invalid("at least one mode is required"));
        }
        let r = self.radii.values();
        if r.is_empty() {
            return Err(Error::invalid("radius grid is empty"));
        }
        if r.iter().any(|x| !(*x > 0.0 && x.is_finite())) || r.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::invalid("radii must be positive and strictly increasing"));
        }
        if self.rytov.iter().any(|x| !(*x > 0.0)) || self.rytov.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::invalid("Rytov grid must be positive and strictly increasing"));
        }
        self.engine.qtilde.validate()?;
        self.engine.tau.validate()?;
        if !(self.aperture.rel_tol > 0.0) {
            return Err(Error::invalid("aperture tolerance must be positive"));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Parse config text. `preset` must come before other keys; every later key
    /// overrides it.
    pub fn parse(text: &str) -> Result<Self> {
        let mut s = Self::base("custom", 0.01, 1e7, 1e-14, 3e3);
        let mut seen_other = false;
        let mut last_line = 0;
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            last_line = line;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let Some((key, value)) = body.split_once('=') else {
                return Err(Error::config(line, body, "expected `key = value`"));
            };
            let (key, value) = (key.trim(), value.trim());
            if key == "preset" {
                if seen_other {
                    return Err(Error::config(line, key, "preset must precede other keys"));
                }
                let name = s.name.clone();
                s = Self::preset(value).ok_or_else(|| Error::config(line, key, format!("unknown preset `{value}`")))?;
                if name != "custom" {
                    s.name = name;
                }
                continue;
            }
            seen_other = true;
            s.apply(key, value).map_err(|m| Error::config(line, key, m))?;
        }
        s.validate().map_err(|e| match e {
            Error::InvalidParameter(m) => Error::config(last_line, "scenario", m),
            other => other,
        })?;
        Ok(s)
    }

    fn apply(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let num = || value.parse::<f64>().map_err(|_| format!("`{value}` is not a number"));
        let int = || value.parse::<usize>().map_err(|_| format!("`{value}` is not a non-negative integer"));
        let flag = || match value {
            "true" | "yes" | "1" => Ok(true),
            "false" | "no" | "0" => Ok(false),
            _ => Err(format!("`{value}` is not a boolean")),
        };
        let list = || -> std::result::Result<Vec<f64>, String> {
            value
                .split(',')
                .map(str::trim)
                .filter(|t| !t.is_empty())
                .map(|t| t.parse::<f64>().map_err(|_| format!("`{t}` is not a number")))
                .collect()
        };
        let log_spec = || -> std::result::Result<Vec<f64>, String> {
            let v = list()?;
            if v.len() != 3 || v[2].fract() != 0.0 || v[2] < 1.0 || !(v[0] > 0.0 && v[1] > v[0]) {
                return Err("expected `low, high, count` with 0 < low < high".into());
            }
            Ok(log_grid(v[0], v[1], v[2] as usize))
        };
        match key {
            "name" => self.name = value.into(),
            "beam.r0" => self.beam.r0 = num()?,
            "beam.q0" => self.beam.q0 = num()?,
            "channel.cn2" => self.channel.cn2 = num()?,
            "channel.l0p" => self.channel.l0p = num()?,
            "channel.z" => self.channel.z = num()?,
            "run.modes" => {
                self.modes = value
                    .split(',')
                    .map(str::trim)
                    .filter(|t| !t.is_empty())
                    .map(|t| Mode::parse(t).ok_or_else(|| format!("unknown mode `{t}`")))
                    .collect::<std::result::Result<_, _>>()?;
            }
            "sweep.radii" => self.radii = RadiusGrid::Metres(list()?),
            "sweep.radii_w" => self.radii = RadiusGrid::Waists(list()?),
            "sweep.log" => self.radii = RadiusGrid::Metres(log_spec()?),
            "sweep.log_w" => self.radii = RadiusGrid::Waists(log_spec()?),
            "rytov.values" => self.rytov = list()?,
            "rytov.log" => self.rytov = log_spec()?,
            "calibration.mode" => {
                self.calibration = match value {
                    "auto" => None,
                    v => Some(CalibrationMode::parse(v).ok_or_else(|| format!("unknown calibration `{v}`"))?),
                }
            }
            "scales.waist" => {
                self.scale_options.waist = WaistModel::parse(value).ok_or_else(|| format!("unknown waist model `{value}`"))?
            }
            "scales.strict_verbatim" => self.scale_options.strict_verbatim = flag()?,
            "kernel.hyper" => {
                self.engine.hyper = HyperArgument::parse(value).ok_or_else(|| format!("unknown hypergeometric form `{value}`"))?
            }
            "kernel.reduction" => {
                self.engine.reduction = Reduction::parse(value).ok_or_else(|| format!("unknown reduction `{value}`"))?
            }
            "kernel.initial_nodes" => self.engine.initial_nodes = int()?,
            "kernel.probe_tol" => self.engine.probe.tol = num()?,
            "kernel.max_nodes" => self.engine.probe.max_nodes = int()?,
            "kernel.cache_dir" => {
                self.engine.cache_dir = match value {
                    "none" | "" => None,
                    v => Some(PathBuf::from(v)),
                }
            }
            "quad.tau_rel_tol" => self.engine.tau.rel_tol = num()?,
            "quad.qtilde_rel_tol" => self.engine.qtilde.rel_tol = num()?,
            "quad.qtilde_trunc" => self.engine.qtilde.trunc_sigmas = num()?,
            "quad.aperture_rel_tol" => self.aperture.rel_tol = num()?,
            "quad.aperture_max_subdivisions" => self.aperture.max_subdivisions = int()?,
            "mc.seed" => self.mc.seed = value.parse().map_err(|_| format!("`{value}` is not a u64 seed"))?,
            "mc.samples" => self.mc.samples = int()?,
            "mc.strata" => self.mc.strata = int()?,
            "mc.inner_rel_tol" => self.mc.inner_rel_tol = num()?,
            "mc.validate" => self.validate_mc = flag()?,
            "output.dir" => self.out_dir = PathBuf::from(value),
            "output.svg" => {
                self.svg = match value {
                    "none" => None,
                    v => Some(PlotAxes::parse(v).ok_or_else(|| format!("unknown axes `{v}`"))?),
                }
            }
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Seed used when none is configured, recorded in every output.
    pub fn default_seed() -> u64 {
        DEFAULT_SEED
    }
}
