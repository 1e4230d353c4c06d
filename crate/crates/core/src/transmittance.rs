//! Aperture-averaged transmittance: mean, second moment, variance, the
//! normalization constant and radius / Rytov sweeps.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::channel::{self, BeamParams, ChannelParams, DerivedScales, ScaleOptions};
use crate::error::{Error, Result};
use crate::kernels::KernelValues;
use crate::moments::{self, construct_frame, EngineConfig, LensWeight, Mode, MomentEngine, PointWeight};
use crate::quad;
use crate::specfun;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApertureSpec {
    pub radius: f64,
    pub center: [f64; 2],
}

impl ApertureSpec {
    pub fn centered(radius: f64) -> Result<Self> {
        let a = Self {
            radius,
            center: [0.0, 0.0],
        };
        a.validate()?;
        Ok(a)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(Error::invalid(format!("aperture radius must be positive, got {}", self.radius)));
        }
        if !(self.center[0].is_finite() && self.center[1].is_finite()) {
            return Err(Error::invalid("aperture centre must be finite"));
        }
        Ok(())
    }
}

/// Squared waist of the mean intensity used with each mode: the full-kernel
/// waist from `scales`, and R_b^2 for the saturated forms.
pub fn mode_waist2(mode: Mode, scales: &DerivedScales) -> f64 {
    match mode {
        Mode::Full => scales.waist2,
        Mode::Frozen | Mode::Asymptotic => scales.rb2,
    }
}

/// Fraction of a unit-normalized Gaussian of squared waist `waist2` inside the aperture.
pub fn eta_mean(aperture: &ApertureSpec, waist2: f64) -> Result<f64> {
    aperture.validate()?;
    let r = aperture.radius;
    let d = aperture.center[0].hypot(aperture.center[1]);
    if d == 0.0 {
        return Ok(-(-r * r / waist2).exp_m1());
    }
    // Int_0^R (2t/W^2) exp(-(t^2 + d^2)/W^2) I0(2td/W^2) dt
    let est = quad::integrate(
        |t| {
            let x = 2.0 * t * d / waist2;
            2.0 * t / waist2 * (-(t - d) * (t - d) / waist2).exp() * specfun::bessel_i0e(x)
        },
        0.0,
        r,
        1e-12,
        0.0,
        500,
    )?;
    Ok(est.value)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CalibrationMode {
    #[default]
    Flux,
    GaussianLimit,
}

impl CalibrationMode {
    pub fn name(self) -> &'static str {
        match self {
            CalibrationMode::Flux => "flux",
            CalibrationMode::GaussianLimit => "gaussian_limit",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "flux" => Some(CalibrationMode::Flux),
            "gaussian_limit" => Some(CalibrationMode::GaussianLimit),
            _ => None,
        }
    }

    /// Flux for full kernels, the Gaussian limit for the saturated forms.
    pub fn default_for(mode: Mode) -> Self {
        match mode {
            Mode::Full => CalibrationMode::Flux,
            Mode::Frozen | Mode::Asymptotic => CalibrationMode::GaussianLimit,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormCalibration {
    pub mode: CalibrationMode,
    pub c_value: f64,
    pub cal_radius_factor: f64,
}

pub const CAL_RADIUS_FACTOR: f64 = 6.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApertureQuadConfig {
    pub rel_tol: f64,
    pub max_subdivisions: usize,
}

impl Default for ApertureQuadConfig {
    fn default() -> Self {
        Self {
            rel_tol: 1e-6,
            max_subdivisions: 1500,
        }
    }
}

/// Unnormalized double-aperture integrals of the two fourth-moment regions.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ApertureIntegrals {
    pub region_i: f64,
    pub region_ii: f64,
    pub error_i: f64,
    pub error_ii: f64,
}

impl ApertureIntegrals {
    pub fn total(&self) -> f64 {
        self.region_i + self.region_ii
    }

    pub fn error(&self) -> f64 {
        self.error_i + self.error_ii
    }
}

/// Int_A Int_A Gamma4 over a centred disk. Full and frozen modes integrate
/// 2 pi rho d rho over the separation with the lens weight carrying the
/// centre-of-mass coordinate; the asymptotic mode uses its Gaussian closed form.
pub fn aperture_integrals(
    engine: &MomentEngine,
    mode: Mode,
    radius: f64,
    cfg: &ApertureQuadConfig,
) -> Result<ApertureIntegrals> {
    ApertureSpec::centered(radius)?;
    match mode {
        Mode::Asymptotic => asymptotic_integrals(engine, radius),
        Mode::Full => separation_integrals(engine, radius, cfg),
        Mode::Frozen => {
            let frozen = MomentEngine::frozen(&engine.beam, &engine.channel, &engine.scales, &frozen_config(engine))?;
            separation_integrals(&frozen, radius, cfg)
        }
    }
}

fn frozen_config(engine: &MomentEngine) -> EngineConfig {
    EngineConfig {
        reduction: engine.reduction,
        qtilde: engine.quad,
        ..EngineConfig::default()
    }
}

fn rho_points(engine: &MomentEngine, radius: f64) -> Vec<f64> {
    let top = 2.0 * radius;
    // Geometric breakpoints down to the region-(ii) coherence length of the
    // near-vacuum core.
    let floor = (engine.channel.z / (engine.beam.q0 * engine.q_trunc.max(1e-300))).min(engine.channel.l0p);
    let mut pts = vec![0.0, top];
    let mut x = top / 2.0;
    while x > floor && pts.len() < 48 {
        pts.push(x);
        x /= 2.0;
    }
    pts.sort_by(f64::total_cmp);
    pts
}

fn separation_integrals(engine: &MomentEngine, radius: f64, cfg: &ApertureQuadConfig) -> Result<ApertureIntegrals> {
    let lens = LensWeight { radius };
    let mut err = None;
    let est = quad::integrate_vec(
        |rho| {
            let i = engine.region_i(rho, 0.0, &lens);
            let ii = engine.region_ii(rho, &lens);
            match (i, ii) {
                (Ok(i), Ok(ii)) => [2.0 * PI * rho * i, 2.0 * PI * rho * ii],
                (Err(e), _) | (_, Err(e)) => {
                    err.get_or_insert(e);
                    [0.0, 0.0]
                }
            }
        },
        &rho_points(engine, radius),
        cfg.rel_tol,
        0.0,
        cfg.max_subdivisions,
    );
    if let Some(e) = err {
        return Err(e);
    }
    let est = est?;
    Ok(ApertureIntegrals {
        region_i: est.value[0],
        region_ii: est.value[1],
        error_i: est.error[0],
        error_ii: est.error[1],
    })
}

fn asymptotic_integrals(engine: &MomentEngine, radius: f64) -> Result<ApertureIntegrals> {
    let k = KernelValues::saturated(engine.scales.rb2);
    let f = k.f1;
    let pre = PI / (f * f);
    let disk = 2.0 * PI * f * (-(-radius * radius / (2.0 * f)).exp_m1());
    let rate = moments::decorrelation_rate(&engine.beam, &engine.channel, &engine.scales);
    let est = quad::integrate(
        |rho| 2.0 * PI * rho * (-rho * rho * rate).exp() * moments::lens_weight(rho, f, f, radius),
        0.0,
        2.0 * radius,
        1e-10,
        0.0,
        500,
    )?;
    Ok(ApertureIntegrals {
        region_i: pre * disk * disk,
        region_ii: pre * est.value,
        error_i: 0.0,
        error_ii: pre * est.error,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McConfig {
    pub samples: usize,
    /// Strata per radius coordinate; the pair grid has strata^2 cells.
    pub strata: usize,
    pub seed: u64,
    /// Relative tolerance of the per-sample q integrals; far below the sampling error.
    pub inner_rel_tol: f64,
}

pub const DEFAULT_SEED: u64 = 20_240_611;

impl Default for McConfig {
    fn default() -> Self {
        Self {
            samples: 100_000,
            strata: 16,
            seed: DEFAULT_SEED,
            inner_rel_tol: 1e-5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub region_i: f64,
    pub region_ii: f64,
    pub std_err_i: f64,
    pub std_err_ii: f64,
    pub std_err_total: f64,
    pub samples: usize,
}

impl McEstimate {
    pub fn total(&self) -> f64 {
        self.region_i + self.region_ii
    }
}

/// Monte Carlo over A x A with both points drawn area-uniformly, stratified
/// in the two squared radii. Uses the point weight, so it shares no
/// aperture geometry with the lens quadrature.
pub fn aperture_integrals_mc(engine: &MomentEngine, mode: Mode, radius: f64, cfg: &McConfig) -> Result<McEstimate> {
    ApertureSpec::centered(radius)?;
    if cfg.strata == 0 || cfg.samples < cfg.strata * cfg.strata * 2 {
        return Err(Error::invalid("Monte Carlo needs at least two samples per stratum"));
    }
    if !(cfg.inner_rel_tol > 0.0 && cfg.inner_rel_tol <= 1e-4) {
        return Err(Error::invalid("Monte Carlo inner tolerance must lie in (0, 1e-4]"));
    }
    let s = cfg.strata;
    let per = cfg.samples / (s * s);
    let mut eng = match mode {
        Mode::Frozen => MomentEngine::frozen(&engine.beam, &engine.channel, &engine.scales, &frozen_config(engine))?,
        _ => engine.clone(),
    };
    eng.quad.rel_tol = cfg.inner_rel_tol.max(engine.quad.rel_tol);
    let eng = &eng;
    let area2 = (PI * radius * radius).powi(2);
    let cells: Vec<Result<[f64; 5]>> = (0..s * s)
        .into_par_iter()
        .map(|cell| {
            let (a, b) = (cell / s, cell % s);
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(cell as u64 + 1);
            let (mut si, mut sii, mut qi, mut qii, mut qt) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for _ in 0..per {
                let u1 = (a as f64 + rng.gen::<f64>()) / s as f64;
                let u2 = (b as f64 + rng.gen::<f64>()) / s as f64;
                let t1 = 2.0 * PI * rng.gen::<f64>();
                let t2 = 2.0 * PI * rng.gen::<f64>();
                let (r1, r2) = (radius * u1.sqrt(), radius * u2.sqrt());
                let r = [r1 * t1.cos(), r1 * t1.sin()];
                let rp = [r2 * t2.cos(), r2 * t2.sin()];
                let g = match mode {
                    Mode::Asymptotic => moments::gamma4_asymptotic(r, rp, &eng.beam, &eng.channel, &eng.scales),
                    _ => {
                        let f = construct_frame(r, rp);
                        let w = PointWeight::from_frame(&f);
                        moments::Gamma4 {
                            region_i: eng.region_i(f.rho_par, f.rho_perp, &w)?,
                            region_ii: eng.region_ii(f.rho_par, &w)?,
                        }
                    }
                };
                si += g.region_i;
                sii += g.region_ii;
                qi += g.region_i * g.region_i;
                qii += g.region_ii * g.region_ii;
                qt += g.total() * g.total();
            }
            Ok([si, sii, qi, qii, qt])
        })
        .collect();
    let n = per as f64;
    let cells_n = (s * s) as f64;
    let (mut mi, mut mii, mut vi, mut vii, mut vt) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for c in cells {
        let [si, sii, qi, qii, qt] = c?;
        let (ai, aii) = (si / n, sii / n);
        let var = |sum: f64, sq: f64| ((sq - sum * sum / n) / (n - 1.0)).max(0.0);
        mi += ai / cells_n;
        mii += aii / cells_n;
        // Stratum-mean variance, each stratum weighted 1/cells.
        vi += var(si, qi) / n / (cells_n * cells_n);
        vii += var(sii, qii) / n / (cells_n * cells_n);
        vt += var(si + sii, qt) / n / (cells_n * cells_n);
    }
    Ok(McEstimate {
        region_i: area2 * mi,
        region_ii: area2 * mii,
        std_err_i: area2 * vi.sqrt(),
        std_err_ii: area2 * vii.sqrt(),
        std_err_total: area2 * vt.sqrt(),
        samples: per * s * s,
    })
}

/// Normalization constant C. Flux mode matches the calibration-disk integral of
/// C Gamma4 to the squared mean transmittance there; the Gaussian limit makes
/// the saturated cross term at zero separation equal Gamma2(r) Gamma2(r').
pub fn calibrate_norm(
    engine: &MomentEngine,
    mode: Mode,
    cal: CalibrationMode,
    radius_factor: f64,
    cfg: &ApertureQuadConfig,
) -> Result<NormCalibration> {
    let w2 = mode_waist2(mode, &engine.scales);
    let c_value = match cal {
        CalibrationMode::GaussianLimit => {
            let f = 0.5 * engine.scales.rb2;
            f * f / (PI.powi(3) * w2 * w2)
        }
        CalibrationMode::Flux => {
            if !(radius_factor > 0.0) {
                return Err(Error::invalid("calibration radius factor must be positive"));
            }
            let rc = radius_factor * w2.sqrt();
            let n = aperture_integrals(engine, mode, rc, cfg).map_err(|e| match e {
                Error::QuadratureFailure(m) | Error::OscillationResolution(m) => Error::CalibrationFailure(m),
                other => other,
            })?;
            let eta = eta_mean(&ApertureSpec::centered(rc)?, w2)?;
            if !(n.total() > 0.0) || n.error() > 1e-3 * n.total() {
                return Err(Error::CalibrationFailure(format!(
                    "calibration integral {:e} +- {:e} is not usable",
                    n.total(),
                    n.error()
                )));
            }
            eta * eta / n.total()
        }
    };
    if !(c_value > 0.0 && c_value.is_finite()) {
        return Err(Error::CalibrationFailure(format!("constant {c_value:e} is not positive")));
    }
    Ok(NormCalibration {
        mode: cal,
        c_value,
        cal_radius_factor: radius_factor,
    })
}

/// Variance of the transmittance and its split over the two regions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SigmaPoint {
    pub radius: f64,
    pub eta: f64,
    pub eta2_i: f64,
    pub eta2_ii: f64,
    pub sigma2_i: f64,
    pub sigma2_ii: f64,
    pub sigma2_total: f64,
    /// Quadrature error of sigma2_total.
    pub error: f64,
}

pub fn sigma_from_integrals(radius: f64, eta: f64, n: &ApertureIntegrals, norm: &NormCalibration) -> SigmaPoint {
    let c = norm.c_value;
    let eta2_i = c * n.region_i;
    let eta2_ii = c * n.region_ii;
    let sigma2_i = eta2_i / (eta * eta) - 1.0;
    let sigma2_ii = eta2_ii / (eta * eta);
    SigmaPoint {
        radius,
        eta,
        eta2_i,
        eta2_ii,
        sigma2_i,
        sigma2_ii,
        sigma2_total: sigma2_i + sigma2_ii,
        error: c * n.error() / (eta * eta),
    }
}

pub fn sigma_eta2(
    engine: &MomentEngine,
    mode: Mode,
    norm: &NormCalibration,
    radius: f64,
    cfg: &ApertureQuadConfig,
) -> Result<SigmaPoint> {
    let eta = eta_mean(&ApertureSpec::centered(radius)?, mode_waist2(mode, &engine.scales))?;
    let n = aperture_integrals(engine, mode, radius, cfg)?;
    Ok(sigma_from_integrals(radius, eta, &n, norm))
}

/// sigma^2 per radius for one mode. Failed points hold NaN and are listed in
/// `failures`.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub mode: Mode,
    pub radii: Vec<f64>,
    pub sigma2_i: Vec<f64>,
    pub sigma2_ii: Vec<f64>,
    pub sigma2_total: Vec<f64>,
    pub fingerprint: String,
    pub failures: Vec<(f64, String)>,
}

impl SweepResult {
    pub fn validate(&self) -> Result<()> {
        let n = self.radii.len();
        if self.sigma2_i.len() != n || self.sigma2_ii.len() != n || self.sigma2_total.len() != n {
            return Err(Error::invalid("sweep columns differ in length"));
        }
        if self.radii.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::invalid("sweep radii must be strictly increasing"));
        }
        Ok(())
    }
}

pub fn check_radii(radii: &[f64]) -> Result<()> {
    if radii.is_empty() {
        return Err(Error::invalid("radius list is empty"));
    }
    if radii.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
        return Err(Error::invalid("radii must be positive and finite"));
    }
    if radii.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::invalid("radii must be strictly increasing"));
    }
    Ok(())
}

pub fn sweep(
    engine: &MomentEngine,
    mode: Mode,
    norm: &NormCalibration,
    radii: &[f64],
    cfg: &ApertureQuadConfig,
) -> Result<SweepResult> {
    check_radii(radii)?;
    let points: Vec<Result<SigmaPoint>> = radii
        .par_iter()
        .map(|&r| sigma_eta2(engine, mode, norm, r, cfg))
        .collect();
    let mut out = SweepResult {
        mode,
        radii: radii.to_vec(),
        sigma2_i: Vec::with_capacity(radii.len()),
        sigma2_ii: Vec::with_capacity(radii.len()),
        sigma2_total: Vec::with_capacity(radii.len()),
        fingerprint: engine_fingerprint(engine),
        failures: Vec::new(),
    };
    for (&r, p) in radii.iter().zip(points) {
        match p {
            Ok(p) => {
                out.sigma2_i.push(p.sigma2_i);
                out.sigma2_ii.push(p.sigma2_ii);
                out.sigma2_total.push(p.sigma2_total);
            }
            Err(e) => {
                out.sigma2_i.push(f64::NAN);
                out.sigma2_ii.push(f64::NAN);
                out.sigma2_total.push(f64::NAN);
                out.failures.push((r, e.to_string()));
            }
        }
    }
    Ok(out)
}

pub fn engine_fingerprint(engine: &MomentEngine) -> String {
    channel::fingerprint(
        &engine.beam,
        &engine.channel,
        &[
            ("rb2", format!("{:016x}", engine.scales.rb2.to_bits())),
            ("waist2", format!("{:016x}", engine.scales.waist2.to_bits())),
            ("reduction", engine.reduction.name().into()),
        ],
    )
}

/// Radius that every calibration and sweep needs tabulated: separations reach
/// twice the largest aperture radius.
pub fn required_rho_max(scales: &DerivedScales, radii: &[f64], radius_factor: f64) -> f64 {
    let cal = radius_factor.max(8.0) * scales.waist2.sqrt();
    2.0 * radii.iter().copied().fold(cal, f64::max)
}

/// Engine covering every separation a sweep over `radii` and its calibration
/// touch. Only the full mode needs a kernel table.
pub fn engine_for(
    beam: &BeamParams,
    channel: &ChannelParams,
    opts: &ScaleOptions,
    modes: &[Mode],
    radii: &[f64],
    engine_cfg: &EngineConfig,
) -> Result<MomentEngine> {
    let scales = channel::derive_scales_with(beam, channel, opts);
    if modes.contains(&Mode::Full) {
        MomentEngine::build(beam, channel, &scales, required_rho_max(&scales, radii, CAL_RADIUS_FACTOR), engine_cfg)
    } else {
        MomentEngine::frozen(beam, channel, &scales, engine_cfg)
    }
}

/// Everything a sweep needs for one channel and one set of modes.
#[derive(Debug, Clone)]
pub struct ChannelRun {
    pub engine: MomentEngine,
    pub calibrations: Vec<(Mode, NormCalibration)>,
}

pub fn prepare_channel(
    beam: &BeamParams,
    channel: &ChannelParams,
    opts: &ScaleOptions,
    modes: &[Mode],
    radii: &[f64],
    calibration: Option<CalibrationMode>,
    engine_cfg: &EngineConfig,
    aperture_cfg: &ApertureQuadConfig,
) -> Result<ChannelRun> {
    let engine = engine_for(beam, channel, opts, modes, radii, engine_cfg)?;
    let mut calibrations = Vec::new();
    for &m in modes {
        let cal = calibration.unwrap_or_else(|| CalibrationMode::default_for(m));
        calibrations.push((m, calibrate_norm(&engine, m, cal, CAL_RADIUS_FACTOR, aperture_cfg)?));
    }
    Ok(ChannelRun { engine, calibrations })
}

/// sigma^2 against the Rytov label at fixed radii.
#[derive(Debug, Clone, PartialEq)]
pub struct RytovSweepResult {
    pub mode: Mode,
    pub rytov2: Vec<f64>,
    pub cn2: Vec<f64>,
    /// One sweep per Rytov value, over the shared radii.
    pub sweeps: Vec<SweepResult>,
    pub failures: Vec<(f64, String)>,
}

#[allow(clippy::too_many_arguments)]
pub fn rytov_sweep(
    beam: &BeamParams,
    l0p: f64,
    z: f64,
    rytov_values: &[f64],
    radii: &[f64],
    modes: &[Mode],
    opts: &ScaleOptions,
    calibration: Option<CalibrationMode>,
    engine_cfg: &EngineConfig,
    aperture_cfg: &ApertureQuadConfig,
) -> Result<Vec<RytovSweepResult>> {
    check_radii(radii)?;
    if rytov_values.is_empty() || rytov_values.iter().any(|r| !(*r > 0.0)) {
        return Err(Error::invalid("Rytov grid must be non-empty and positive"));
    }
    let mut out: Vec<RytovSweepResult> = modes
        .iter()
        .map(|&m| RytovSweepResult {
            mode: m,
            rytov2: Vec::new(),
            cn2: Vec::new(),
            sweeps: Vec::new(),
            failures: Vec::new(),
        })
        .collect();
    for &rv in rytov_values {
        let cn2 = channel::cn2_for_rytov(beam, z, rv);
        let ch = ChannelParams::new(cn2, l0p, z)?;
        let run = prepare_channel(beam, &ch, opts, modes, radii, calibration, engine_cfg, aperture_cfg);
        for (k, &m) in modes.iter().enumerate() {
            out[k].rytov2.push(rv);
            out[k].cn2.push(cn2);
            let res = run.as_ref().map_err(|e| e.to_string()).and_then(|run| {
                let norm = run.calibrations[k].1;
                sweep(&run.engine, m, &norm, radii, aperture_cfg).map_err(|e| e.to_string())
            });
            match res {
                Ok(s) => {
                    for f in &s.failures {
                        out[k].failures.push((rv, format!("R = {:e}: {}", f.0, f.1)));
                    }
                    out[k].sweeps.push(s);
                }
                Err(msg) => {
                    out[k].failures.push((rv, msg));
                    let nan = vec![f64::NAN; radii.len()];
                    out[k].sweeps.push(SweepResult {
                        mode: m,
                        radii: radii.to_vec(),
                        sigma2_i: nan.clone(),
                        sigma2_ii: nan.clone(),
                        sigma2_total: nan,
                        fingerprint: channel::fingerprint(beam, &ch, &[]),
                        failures: vec![],
                    });
                }
            }
        }
    }
    Ok(out)
}
