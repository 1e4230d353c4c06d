//! Second moment, the two fourth-moment contributions, their frozen-kernel
//! large-distance forms and the closed-form asymptotic.
//!
//! All fourth-moment values are returned without the flux constant C.

use std::f64::consts::PI;
use std::path::PathBuf;
use std::sync::Arc;

use crate::channel::{self, BeamParams, ChannelParams, DerivedScales};
use crate::error::{Error, Result};
use crate::kernels::{
    HyperArgument, KernelModel, KernelTable, KernelValues, ProbeCheck, Region, TableSpec, TauQuadConfig,
};
use crate::quad::{self, OscillatoryConfig};
use crate::specfun;

/// Separation coordinates of a point pair, rho = r - r' and rho' = (r + r')/2,
/// resolved along a reference axis.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SeparationFrame {
    pub rho_par: f64,
    pub rho_perp: f64,
    pub rhop_par: f64,
    pub rhop_perp: f64,
}

/// Axis along rho when it is nonzero, otherwise along rho'.
pub fn construct_frame(r: [f64; 2], r_prime: [f64; 2]) -> SeparationFrame {
    let rho = [r[0] - r_prime[0], r[1] - r_prime[1]];
    let rhop = [0.5 * (r[0] + r_prime[0]), 0.5 * (r[1] + r_prime[1])];
    let n = rho[0].hypot(rho[1]);
    if n > 0.0 {
        let e = [rho[0] / n, rho[1] / n];
        SeparationFrame {
            rho_par: n,
            rho_perp: 0.0,
            rhop_par: rhop[0] * e[0] + rhop[1] * e[1],
            rhop_perp: -rhop[0] * e[1] + rhop[1] * e[0],
        }
    } else {
        SeparationFrame {
            rho_par: 0.0,
            rho_perp: 0.0,
            rhop_par: rhop[0].hypot(rhop[1]),
            rhop_perp: 0.0,
        }
    }
}

/// Mean intensity normalized over the plane, with the waist taken from `scales`.
pub fn gamma2(r: [f64; 2], scales: &DerivedScales) -> f64 {
    gamma2_with_waist(r, scales.waist2)
}

pub fn gamma2_with_waist(r: [f64; 2], waist2: f64) -> f64 {
    (-(r[0] * r[0] + r[1] * r[1]) / waist2).exp() / (PI * waist2)
}

/// How the two-dimensional q integral is reduced to one dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Reduction {
    /// Angular integration of the shifted Gaussian (Bessel I0) in region (i) and
    /// of the phase factor (J0) in region (ii).
    #[default]
    Angular,
    /// Shifted Gaussian and cosine taken along the axis only.
    Printed,
}

impl Reduction {
    pub fn name(self) -> &'static str {
        match self {
            Reduction::Angular => "angular",
            Reduction::Printed => "printed",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "angular" => Some(Reduction::Angular),
            "printed" => Some(Reduction::Printed),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Mode {
    Full,
    Frozen,
    Asymptotic,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Full, Mode::Frozen, Mode::Asymptotic];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::Frozen => "frozen",
            Mode::Asymptotic => "asymptotic",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "full" => Some(Mode::Full),
            "frozen" => Some(Mode::Frozen),
            "asymptotic" => Some(Mode::Asymptotic),
            _ => None,
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QTildeQuadConfig {
    pub trunc_sigmas: f64,
    pub rel_tol: f64,
    pub min_nodes_per_period: usize,
    pub max_subdivisions: usize,
    pub max_panels: usize,
}

impl Default for QTildeQuadConfig {
    fn default() -> Self {
        Self {
            trunc_sigmas: 6.0,
            rel_tol: 1e-7,
            min_nodes_per_period: 8,
            max_subdivisions: 2000,
            max_panels: 4000,
        }
    }
}

impl QTildeQuadConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.trunc_sigmas >= 4.0) {
            return Err(Error::invalid(format!("trunc_sigmas must be at least 4, got {}", self.trunc_sigmas)));
        }
        if !(self.rel_tol > 0.0 && self.rel_tol <= 1e-5) {
            return Err(Error::invalid(format!("q rel_tol must lie in (0, 1e-5], got {}", self.rel_tol)));
        }
        if self.min_nodes_per_period < 8 {
            return Err(Error::invalid("min_nodes_per_period must be at least 8"));
        }
        if self.max_subdivisions < 32 || self.max_panels < 8 {
            return Err(Error::invalid("q subdivision budget too small"));
        }
        Ok(())
    }

    fn oscillatory(&self) -> OscillatoryConfig {
        OscillatoryConfig {
            degree: 16,
            rel_tol: self.rel_tol,
            abs_tol: 0.0,
            max_panels: self.max_panels,
            nodes_per_period: self.min_nodes_per_period,
        }
    }
}

/// Weight of the centre-of-mass coordinate rho' for a fixed separation |rho|,
/// given the two kernel widths F1 (along rho) and F2 (across).
pub trait PairWeight: Sync {
    fn weight(&self, rho: f64, f1: f64, f2: f64) -> f64;
}

/// A single point pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointWeight {
    pub rhop_par: f64,
    pub rhop_perp: f64,
}

impl PointWeight {
    pub fn from_frame(f: &SeparationFrame) -> Self {
        Self {
            rhop_par: f.rhop_par,
            rhop_perp: f.rhop_perp,
        }
    }
}

impl PairWeight for PointWeight {
    fn weight(&self, _rho: f64, f1: f64, f2: f64) -> f64 {
        (-(self.rhop_par * self.rhop_par / f1 + self.rhop_perp * self.rhop_perp / f2)).exp()
    }
}

/// All pairs inside a centred disk of radius R that share a separation vector:
/// rho' ranges over the lens where two radius-R disks offset by rho overlap.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LensWeight {
    pub radius: f64,
}

impl PairWeight for LensWeight {
    fn weight(&self, rho: f64, f1: f64, f2: f64) -> f64 {
        lens_weight(rho, f1, f2, self.radius)
    }
}

const LENS_NODES: usize = 48;

fn lens_rule() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: std::sync::OnceLock<(Vec<f64>, Vec<f64>)> = std::sync::OnceLock::new();
    RULE.get_or_init(|| {
        // Half rule on [0, 1] from the symmetric rule on [-1, 1].
        let (x, w) = quad::gauss_legendre(2 * LENS_NODES);
        let xs: Vec<f64> = x[LENS_NODES..].to_vec();
        let ws: Vec<f64> = w[LENS_NODES..].to_vec();
        (xs, ws)
    })
}

/// Int over the lens |rho' +- rho/2| <= R of exp(-x^2/F1 - y^2/F2), x along rho.
pub fn lens_weight(rho: f64, f1: f64, f2: f64, radius: f64) -> f64 {
    let half = 0.5 * rho.abs();
    if half >= radius {
        return 0.0;
    }
    let ymax = (radius * radius - half * half).sqrt();
    let s1 = f1.sqrt();
    let inner = |y: f64| {
        let x = (radius * radius - y * y).max(0.0).sqrt() - half;
        (-y * y / f2).exp() * PI.sqrt() * s1 * libm::erf(x.max(0.0) / s1)
    };
    let (t, w) = lens_rule();
    let ycut = 9.0 * f2.sqrt();
    let total = if ycut < ymax {
        // Gaussian-limited: the edge of the lens is never reached.
        t.iter().zip(w).map(|(&ti, &wi)| wi * inner(ycut * ti)).sum::<f64>() * ycut
    } else {
        // y = ymax sin(theta) absorbs the square-root edge.
        let hp = 0.5 * PI;
        t.iter()
            .zip(w)
            .map(|(&ti, &wi)| {
                let th = hp * ti;
                wi * inner(ymax * th.sin()) * th.cos()
            })
            .sum::<f64>()
            * ymax
            * hp
    };
    2.0 * total
}

/// Where kernel values come from.
#[derive(Debug, Clone)]
pub enum KernelSource {
    Table(Arc<KernelTable>),
    Constant(KernelValues),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    pub reduction: Reduction,
    pub hyper: HyperArgument,
    pub tau: TauQuadConfig,
    pub qtilde: QTildeQuadConfig,
    pub initial_nodes: usize,
    pub probe: ProbeCheck,
    pub cache_dir: Option<PathBuf>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            reduction: Reduction::default(),
            hyper: HyperArgument::default(),
            tau: TauQuadConfig::default(),
            qtilde: QTildeQuadConfig::default(),
            initial_nodes: 129,
            probe: ProbeCheck::default(),
            cache_dir: None,
        }
    }
}

/// One contribution pair of the fourth moment.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Gamma4 {
    pub region_i: f64,
    pub region_ii: f64,
}

impl Gamma4 {
    pub fn total(&self) -> f64 {
        self.region_i + self.region_ii
    }
}

/// Evaluates the region integrals over q for one channel.
#[derive(Debug, Clone)]
pub struct MomentEngine {
    pub beam: BeamParams,
    pub channel: ChannelParams,
    pub scales: DerivedScales,
    pub source: KernelSource,
    pub reduction: Reduction,
    pub quad: QTildeQuadConfig,
    /// Largest |rho| the kernel source covers.
    pub rho_max: f64,
    /// Bound on G1 / (2 F3), the drift of the q Gaussian per unit rho.
    pub s_bound: f64,
    /// Gaussian truncation half-width in q (m).
    pub q_trunc: f64,
    /// Built (false) or read from the cache (true).
    pub cache_hit: bool,
    core: f64,
}

impl MomentEngine {
    /// Engine over a freshly built or cached kernel table covering |rho| <= rho_max.
    pub fn build(
        beam: &BeamParams,
        channel: &ChannelParams,
        scales: &DerivedScales,
        rho_max: f64,
        cfg: &EngineConfig,
    ) -> Result<Self> {
        beam.validate()?;
        channel.validate()?;
        cfg.qtilde.validate()?;
        cfg.tau.validate()?;
        if !(rho_max >= 0.0 && rho_max.is_finite()) {
            return Err(Error::invalid(format!("rho_max must be finite and non-negative, got {rho_max}")));
        }
        let model = KernelModel::new(*beam, *channel, *scales).with_hyper(cfg.hyper);
        let q_trunc = truncation(beam, scales, &cfg.qtilde);
        let mut s_bound = 1.0;
        loop {
            let odd = |n: usize| n.max(3) | 1;
            let spec = TableSpec {
                a_max: rho_max,
                b_max: (1.0 + 2.0 * s_bound) * rho_max + 2.0 * q_trunc,
                nodes_a: if rho_max > 0.0 { odd(cfg.initial_nodes) } else { 1 },
                nodes_b: odd(cfg.initial_nodes),
                scale: channel.l0p,
                order: crate::kernels::Interpolation::Cubic,
            };
            let fp = channel::fingerprint(
                beam,
                channel,
                &[
                    ("kind", "kernel-table".into()),
                    ("rb2", format!("{:016x}", scales.rb2.to_bits())),
                    ("hyper", cfg.hyper.name().into()),
                    ("a_max", format!("{:016x}", spec.a_max.to_bits())),
                    ("b_max", format!("{:016x}", spec.b_max.to_bits())),
                    ("nodes", spec.nodes_b.to_string()),
                    ("probe_tol", format!("{:e}", cfg.probe.tol)),
                    ("probe_seed", cfg.probe.seed.to_string()),
                    ("tau_rel", format!("{:e}", cfg.tau.rel_tol)),
                ],
            );
            let path = cfg.cache_dir.as_ref().map(|d| d.join(format!("kernels-{}.txt", &fp[..16])));
            let mut hit = false;
            let cached = match &path {
                Some(p) => KernelTable::load(p, &fp)?,
                None => None,
            };
            let table = match cached {
                Some(t) => {
                    hit = true;
                    t
                }
                None => {
                    let t = KernelTable::build_refined(&model, &spec, &cfg.tau, &fp, &cfg.probe)?;
                    if let Some(p) = &path {
                        t.save(p)?;
                    }
                    t
                }
            };
            let drift = table
                .node_values()
                .map(|k| k.g1 / (2.0 * k.f3))
                .fold(0.0, f64::max);
            if drift > s_bound {
                s_bound = 1.1 * drift;
                continue;
            }
            let vac = KernelValues::vacuum(beam, scales);
            return Ok(Self {
                beam: *beam,
                channel: *channel,
                scales: *scales,
                source: KernelSource::Table(Arc::new(table)),
                reduction: cfg.reduction,
                quad: cfg.qtilde,
                rho_max,
                s_bound,
                q_trunc,
                cache_hit: hit,
                core: core_scale(&vac, channel),
            });
        }
    }

    /// Engine with the same kernels everywhere.
    pub fn constant(
        beam: &BeamParams,
        channel: &ChannelParams,
        scales: &DerivedScales,
        kernels: KernelValues,
        cfg: &EngineConfig,
    ) -> Result<Self> {
        cfg.qtilde.validate()?;
        kernels.check(0.0, 0.0)?;
        let q_trunc = cfg.qtilde.trunc_sigmas * kernels.d1().max(kernels.h1).sqrt();
        Ok(Self {
            beam: *beam,
            channel: *channel,
            scales: *scales,
            source: KernelSource::Constant(kernels),
            reduction: cfg.reduction,
            quad: cfg.qtilde,
            rho_max: f64::INFINITY,
            s_bound: kernels.g1 / (2.0 * kernels.f3),
            q_trunc,
            cache_hit: false,
            core: kernels.d1().sqrt(),
        })
    }

    /// Constant kernels F = R_b^2/2, G = 3R_b^2/4, H = 3R_b^2/2 of the saturated limit.
    pub fn frozen(beam: &BeamParams, channel: &ChannelParams, scales: &DerivedScales, cfg: &EngineConfig) -> Result<Self> {
        if !(scales.rb2 > 0.0) {
            return Err(Error::invalid("frozen kernels need R_b^2 > 0"));
        }
        Self::constant(beam, channel, scales, KernelValues::saturated(scales.rb2), cfg)
    }

    pub fn table(&self) -> Option<&KernelTable> {
        match &self.source {
            KernelSource::Table(t) => Some(t),
            KernelSource::Constant(_) => None,
        }
    }

    fn kernels_i(&self, q: f64, rho: f64) -> Result<KernelValues> {
        match &self.source {
            KernelSource::Table(t) => t.lookup_region(q, rho, Region::RegionI),
            KernelSource::Constant(k) => Ok(*k),
        }
    }

    fn kernels_ii(&self, q: f64) -> Result<KernelValues> {
        match &self.source {
            KernelSource::Table(t) => t.lookup_region(q, 0.0, Region::RegionII),
            KernelSource::Constant(k) => Ok(*k),
        }
    }

    fn check_rho(&self, rho: f64) -> Result<()> {
        if rho > self.rho_max * (1.0 + 1e-12) {
            return Err(Error::TableResolution(format!(
                "separation {rho:e} m exceeds the tabulated {:e} m",
                self.rho_max
            )));
        }
        Ok(())
    }

    /// Positive breakpoints resolving the near-vacuum core at small separation.
    fn core_points(&self, upto: f64) -> Vec<f64> {
        let mut pts = Vec::new();
        let mut x = self.core.min(self.channel.l0p) / 8.0;
        while x < upto {
            pts.push(x);
            x *= 4.0;
        }
        pts
    }

    /// Region (i) q integral at separation (rho_par, rho_perp), symmetrized
    /// over the sign of rho_par, with the centre-of-mass weight `w`.
    pub fn region_i<W: PairWeight>(&self, rho_par: f64, rho_perp: f64, w: &W) -> Result<f64> {
        let rho = rho_par.abs();
        self.check_rho(rho)?;
        let qmax = self.s_bound * rho + self.q_trunc;
        let mut err = None;
        let angular = self.reduction == Reduction::Angular;
        let integrand = |q: f64| -> f64 {
            let k = match self.kernels_i(q, rho) {
                Ok(k) => k,
                Err(e) => {
                    err.get_or_insert(e);
                    return 0.0;
                }
            };
            let d = k.d1();
            let s = rho * k.g1 / (2.0 * k.f3);
            let gauss = if angular {
                let aq = q.abs();
                (-(aq - s) * (aq - s) / d).exp() * specfun::bessel_i0e(2.0 * aq * s / d)
            } else {
                (-(q - s) * (q - s) / d).exp()
            };
            let perp = (-rho_perp * rho_perp * k.h2 / k.det4).exp();
            let along = (-rho * rho / (4.0 * k.f3)).exp();
            PI * q.abs() * k.prefactor() * gauss * perp * along * w.weight(rho, k.f1, k.f2)
        };
        let mut pts = vec![-qmax, qmax, 0.0];
        for c in self.core_points(qmax) {
            pts.push(c);
            pts.push(-c);
        }
        if rho > 0.0 {
            let k0 = self.kernels_i(0.0, rho)?;
            let s0 = rho * k0.g1 / (2.0 * k0.f3);
            let sd = k0.d1().sqrt();
            for x in [0.5 * rho, s0, s0 - 2.0 * sd, s0 + 2.0 * sd, -s0, -s0 - 2.0 * sd, -s0 + 2.0 * sd] {
                pts.push(x);
            }
        }
        let pts = sorted_within(pts, -qmax, qmax);
        let est = quad::integrate_points(integrand, &pts, self.quad.rel_tol, 0.0, self.quad.max_subdivisions);
        if let Some(e) = err {
            return Err(e);
        }
        Ok(est?.value)
    }

    /// Region (ii) q integral at separation |rho| with the weight `w`.
    pub fn region_ii<W: PairWeight>(&self, rho_par: f64, w: &W) -> Result<f64> {
        let rho = rho_par.abs();
        let qmax = self.q_trunc;
        let kappa = 2.0 * self.beam.q0 * rho / self.channel.z;
        let mut err = None;
        let amplitude = |q: f64| -> f64 {
            match self.kernels_ii(q) {
                Ok(k) => 2.0 * PI * q * k.prefactor() * (-q * q / k.d1()).exp() * w.weight(rho, k.f1, k.f2),
                Err(e) => {
                    err.get_or_insert(e);
                    0.0
                }
            }
        };
        let mut pts = vec![0.0, qmax];
        pts.extend(self.core_points(qmax));
        let pts = sorted_within(pts, 0.0, qmax);
        let cfg = self.quad.oscillatory();
        let est = match self.reduction {
            Reduction::Angular => quad::integrate_j0(amplitude, kappa, &pts, &cfg),
            Reduction::Printed => {
                let mut f = amplitude;
                quad::integrate_oscillatory(|q| [f(q), 0.0], kappa, &pts, &cfg)
            }
        };
        if let Some(e) = err {
            return Err(e);
        }
        Ok(est?.re)
    }

    pub fn gamma4_region_i(&self, frame: &SeparationFrame) -> Result<f64> {
        self.region_i(frame.rho_par, frame.rho_perp, &PointWeight::from_frame(frame))
    }

    pub fn gamma4_region_ii(&self, frame: &SeparationFrame) -> Result<f64> {
        self.region_ii(frame.rho_par, &PointWeight::from_frame(frame))
    }

    pub fn gamma4(&self, frame: &SeparationFrame) -> Result<Gamma4> {
        Ok(Gamma4 {
            region_i: self.gamma4_region_i(frame)?,
            region_ii: self.gamma4_region_ii(frame)?,
        })
    }
}

fn truncation(beam: &BeamParams, scales: &DerivedScales, cfg: &QTildeQuadConfig) -> f64 {
    cfg.trunc_sigmas * (3.0 * scales.rb2 + scales.free_space2 + 0.25 * beam.r0 * beam.r0).sqrt()
}

fn core_scale(vac: &KernelValues, channel: &ChannelParams) -> f64 {
    vac.d1().sqrt().min(channel.l0p)
}

fn sorted_within(mut pts: Vec<f64>, lo: f64, hi: f64) -> Vec<f64> {
    pts.retain(|x| x.is_finite() && *x >= lo && *x <= hi);
    pts.sort_by(f64::total_cmp);
    pts.dedup_by(|a, b| (*a - *b).abs() <= 1e-14 * (hi - lo));
    pts
}

/// Fourth moment in the requested mode. `engine` supplies full-mode kernels;
/// the frozen and asymptotic forms only use its beam, channel and scales.
pub fn gamma4_total(engine: &MomentEngine, r: [f64; 2], r_prime: [f64; 2], mode: Mode) -> Result<Gamma4> {
    match mode {
        Mode::Full => engine.gamma4(&construct_frame(r, r_prime)),
        Mode::Frozen => gamma4_frozen(r, r_prime, &engine.beam, &engine.channel, &engine.scales, &FrozenQuadConfig::default()),
        Mode::Asymptotic => Ok(gamma4_asymptotic(r, r_prime, &engine.beam, &engine.channel, &engine.scales)),
    }
}

/// Closed form of the saturated limit (unit C):
/// region (i) pi/F^2 exp(-(r^2 + r'^2)/2F), region (ii)
/// pi/F^2 exp(-(r + r')^2/4F - (r - r')^2 q0^2 (H - G^2/F)/z^2).
pub fn gamma4_asymptotic(
    r: [f64; 2],
    r_prime: [f64; 2],
    beam: &BeamParams,
    channel: &ChannelParams,
    scales: &DerivedScales,
) -> Gamma4 {
    let k = KernelValues::saturated(scales.rb2);
    let f = k.f1;
    let pre = PI / (f * f);
    let sq = |v: [f64; 2]| v[0] * v[0] + v[1] * v[1];
    let sum = [r[0] + r_prime[0], r[1] + r_prime[1]];
    let diff = [r[0] - r_prime[0], r[1] - r_prime[1]];
    Gamma4 {
        region_i: pre * (-(sq(r) + sq(r_prime)) / (2.0 * f)).exp(),
        region_ii: pre * (-sq(sum) / (4.0 * f) - sq(diff) * decorrelation_rate(beam, channel, scales)).exp(),
    }
}

/// q0^2 (H - G^2/F) / z^2 with the saturated constants; equals q2t/4.
pub fn decorrelation_rate(beam: &BeamParams, channel: &ChannelParams, scales: &DerivedScales) -> f64 {
    let k = KernelValues::saturated(scales.rb2);
    beam.q0 * beam.q0 * k.d1() / (channel.z * channel.z)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrozenQuadConfig {
    pub trunc_sigmas: f64,
    pub rel_tol: f64,
}

impl Default for FrozenQuadConfig {
    fn default() -> Self {
        Self {
            trunc_sigmas: 9.0,
            rel_tol: 1e-11,
        }
    }
}

/// Frozen-kernel fourth moment by nested quadrature over the q plane, keeping
/// both components of q. Region (ii) integrates the phase factor with the
/// Filon rule along rho.
pub fn gamma4_frozen(
    r: [f64; 2],
    r_prime: [f64; 2],
    beam: &BeamParams,
    channel: &ChannelParams,
    scales: &DerivedScales,
    cfg: &FrozenQuadConfig,
) -> Result<Gamma4> {
    if !(scales.rb2 > 0.0) {
        return Err(Error::invalid("frozen kernels need R_b^2 > 0"));
    }
    let k = KernelValues::saturated(scales.rb2);
    let (f, g) = (k.f1, k.g1);
    let d = k.d1();
    let pre = 1.0 / (f * k.det3);
    let frame = construct_frame(r, r_prime);
    let rho = frame.rho_par;
    let s = rho * g / (2.0 * f);
    let t = cfg.trunc_sigmas * d.sqrt();
    let sq = |v: [f64; 2]| v[0] * v[0] + v[1] * v[1];
    let sum = [r[0] + r_prime[0], r[1] + r_prime[1]];

    let max_sub = 400;
    let plane_i = quad::integrate(
        |qy| {
            quad::integrate_points(
                |qx| (-((qx - s) * (qx - s) + qy * qy) / d).exp(),
                &[s - t, s, s + t],
                cfg.rel_tol,
                0.0,
                max_sub,
            )
            .map(|e| e.value)
            .unwrap_or(f64::NAN)
        },
        -t,
        t,
        cfg.rel_tol,
        0.0,
        max_sub,
    )?;
    let kappa = 2.0 * beam.q0 * rho / channel.z;
    let osc = OscillatoryConfig {
        rel_tol: 1e-13,
        ..Default::default()
    };
    let plane_ii = quad::integrate(
        |qy: f64| {
            quad::integrate_oscillatory(|qx| [(-(qx * qx + qy * qy) / d).exp(), 0.0], kappa, &[-t, 0.0, t], &osc)
                .map(|e| e.re)
                .unwrap_or(f64::NAN)
        },
        -t,
        t,
        cfg.rel_tol,
        1e-12 * PI * d,
        max_sub,
    )?;
    if !(plane_i.value.is_finite() && plane_ii.value.is_finite()) {
        return Err(Error::QuadratureFailure("inner frozen q integral failed".into()));
    }
    Ok(Gamma4 {
        region_i: pre * plane_i.value * (-(sq(r) + sq(r_prime)) / (2.0 * f)).exp(),
        region_ii: pre * plane_ii.value * (-sq(sum) / (4.0 * f)).exp(),
    })
}
