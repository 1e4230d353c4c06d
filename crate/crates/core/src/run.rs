//! Scenario execution shared by the command line and the acceptance suite.

use rayon::prelude::*;

use crate::channel::{self, DerivedScales, RegimeReport};
use crate::error::{Error, Result};
use crate::kernels::{KernelModel, KernelValues};
use crate::moments::{Mode, MomentEngine};
use crate::output::Metadata;
use crate::scenario::Scenario;
use crate::transmittance::{
    self, ApertureIntegrals, ChannelRun, McEstimate, NormCalibration, RytovSweepResult, SigmaPoint, SweepResult,
};

/// Quadrature against Monte Carlo at one aperture radius.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McCheck {
    pub mode: Mode,
    pub radius: f64,
    pub quadrature: ApertureIntegrals,
    pub monte_carlo: McEstimate,
}

impl McCheck {
    /// Combined one-sigma error of the difference.
    pub fn combined_error(&self) -> f64 {
        self.monte_carlo.std_err_total.hypot(self.quadrature.error())
    }

    pub fn deviation(&self) -> f64 {
        (self.quadrature.total() - self.monte_carlo.total()).abs()
    }

    pub fn agrees(&self, sigmas: f64) -> bool {
        self.deviation() <= sigmas * self.combined_error()
    }
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    pub scales: DerivedScales,
    pub regime: RegimeReport,
    pub calibrations: Vec<(Mode, NormCalibration)>,
    pub results: Vec<SweepResult>,
    pub points: Vec<Vec<Option<SigmaPoint>>>,
    pub mc_checks: Vec<McCheck>,
    pub metadata: Metadata,
    pub cache_hit: bool,
    pub engine: MomentEngine,
}

impl SweepReport {
    pub fn partial(&self) -> bool {
        self.results.iter().any(|r| !r.failures.is_empty())
    }

    pub fn result(&self, mode: Mode) -> Option<&SweepResult> {
        self.results.iter().find(|r| r.mode == mode)
    }
}

/// F at a far separation relative to R_b^2: the audit figure for the saturated constants.
pub fn kernel_asymptote_ratio(s: &Scenario, scales: &DerivedScales) -> Result<f64> {
    let model = KernelModel::new(s.beam, s.channel, *scales).with_hyper(s.engine.hyper);
    let far = 1e3 * s.channel.l0p.max(scales.rb2.sqrt());
    let k = model.assemble_endpoints(far, far, &s.engine.tau)?;
    let vac = KernelValues::vacuum(&s.beam, scales);
    Ok((k.f1 - vac.f1) / scales.rb2)
}

pub fn base_metadata(s: &Scenario, scales: &DerivedScales, regime: &RegimeReport) -> Metadata {
    let mut m = Metadata::default();
    m.push("tool", format!("turbmoment {}", env!("CARGO_PKG_VERSION")))
        .push("scenario", s.name.clone())
        .push("channel_fingerprint", channel::fingerprint(&s.beam, &s.channel, &[]))
        .push(
            "channel",
            format!(
                "r0={:e} q0={:e} cn2={:e} l0p={:e} z={:e}",
                s.beam.r0, s.beam.q0, s.channel.cn2, s.channel.l0p, s.channel.z
            ),
        )
        .push("seed", s.mc.seed.to_string())
        .push(
            "scales",
            format!(
                "rb2={:e} q2t={:e} waist={:e} waist_model={}",
                scales.rb2,
                scales.q2t,
                scales.waist(),
                s.scale_options.waist.name()
            ),
        )
        .push(
            "rytov_label",
            format!(
                "{:.6e} (plane-wave 1.23 Cn2 q0^(7/6) z^(11/6); preset labels follow an undefined convention)",
                scales.rytov2
            ),
        )
        .push(
            "regime",
            format!(
                "{} (q2t*l0p^2={:.3e} q2t*rb2={:.3e} rb2/r0^2={:.3e} rb2/(4fs2)={:.3e})",
                regime.worst(),
                regime.phase_space.value,
                regime.uncertainty.value,
                regime.spread_over_source.value,
                regime.spread_over_diffraction.value
            ),
        )
        .push(
            "kernels",
            format!("hyper={} reduction={}", s.engine.hyper.name(), s.engine.reduction.name()),
        );
    m
}

fn prepare(s: &Scenario) -> Result<(DerivedScales, RegimeReport, ChannelRun, Vec<f64>)> {
    s.validate()?;
    let scales = channel::derive_scales_with(&s.beam, &s.channel, &s.scale_options);
    let regime = channel::regime_report(&s.beam, &s.channel);
    let radii = s.radii.resolve(scales.waist());
    transmittance::check_radii(&radii)?;
    let run = transmittance::prepare_channel(
        &s.beam,
        &s.channel,
        &s.scale_options,
        &s.modes,
        &radii,
        s.calibration,
        &s.engine,
        &s.aperture,
    )?;
    Ok((scales, regime, run, radii))
}

/// Sweep every configured mode over the radius grid. Per-point failures,
/// including Monte Carlo disagreement when validation is on, are collected.
pub fn run_sweep(s: &Scenario) -> Result<SweepReport> {
    let (scales, regime, run, radii) = prepare(s)?;
    let mut metadata = base_metadata(s, &scales, &regime);
    if s.modes.contains(&Mode::Full) {
        let ratio = kernel_asymptote_ratio(s, &scales)?;
        metadata.push(
            "kernel_asymptote",
            format!("far-separation F - F_vac = {ratio:.4} rb2; saturated constants use 0.5 rb2"),
        );
    }
    let mut results = Vec::new();
    let mut points = Vec::new();
    let mut mc_checks = Vec::new();
    for &(mode, norm) in &run.calibrations {
        metadata.push(
            format!("calibration.{}", mode.name()),
            format!("{} C={:.17e} radius={}W", norm.mode.name(), norm.c_value, norm.cal_radius_factor),
        );
        let per_point: Vec<Result<(ApertureIntegrals, SigmaPoint, Option<McEstimate>)>> = radii
            .par_iter()
            .map(|&r| {
                let n = transmittance::aperture_integrals(&run.engine, mode, r, &s.aperture)?;
                let w2 = transmittance::mode_waist2(mode, &scales);
                let eta = transmittance::eta_mean(&transmittance::ApertureSpec::centered(r)?, w2)?;
                let p = transmittance::sigma_from_integrals(r, eta, &n, &norm);
                let mc = if s.validate_mc {
                    Some(transmittance::aperture_integrals_mc(&run.engine, mode, r, &s.mc)?)
                } else {
                    None
                };
                Ok((n, p, mc))
            })
            .collect();
        let mut sweep = SweepResult {
            mode,
            radii: radii.clone(),
            sigma2_i: vec![],
            sigma2_ii: vec![],
            sigma2_total: vec![],
            fingerprint: transmittance::engine_fingerprint(&run.engine),
            failures: vec![],
        };
        let mut pts = Vec::new();
        for (&r, res) in radii.iter().zip(per_point) {
            let fail = |msg: String, sweep: &mut SweepResult| {
                sweep.sigma2_i.push(f64::NAN);
                sweep.sigma2_ii.push(f64::NAN);
                sweep.sigma2_total.push(f64::NAN);
                sweep.failures.push((r, msg));
            };
            match res {
                Ok((n, p, mc)) => {
                    if let Some(mc) = mc {
                        let check = McCheck {
                            mode,
                            radius: r,
                            quadrature: n,
                            monte_carlo: mc,
                        };
                        mc_checks.push(check);
                        if !check.agrees(3.0) {
                            let e = Error::IntegratorDisagreement {
                                quadrature: n.total(),
                                monte_carlo: mc.total(),
                                tolerance: 3.0 * check.combined_error(),
                            };
                            fail(e.to_string(), &mut sweep);
                            pts.push(None);
                            continue;
                        }
                    }
                    sweep.sigma2_i.push(p.sigma2_i);
                    sweep.sigma2_ii.push(p.sigma2_ii);
                    sweep.sigma2_total.push(p.sigma2_total);
                    pts.push(Some(p));
                }
                Err(e) => {
                    fail(e.to_string(), &mut sweep);
                    pts.push(None);
                }
            }
        }
        results.push(sweep);
        points.push(pts);
    }
    if s.validate_mc {
        metadata.push(
            "monte_carlo",
            format!("samples={} strata={}x{} seed={}", s.mc.samples, s.mc.strata, s.mc.strata, s.mc.seed),
        );
    }
    Ok(SweepReport {
        scales,
        regime,
        calibrations: run.calibrations.clone(),
        results,
        points,
        mc_checks,
        metadata,
        cache_hit: run.engine.cache_hit,
        engine: run.engine,
    })
}

pub fn run_rytov_sweep(s: &Scenario) -> Result<(Vec<RytovSweepResult>, Metadata)> {
    s.validate()?;
    if s.rytov.is_empty() {
        return Err(Error::invalid("scenario has no Rytov grid (rytov.values or rytov.log)"));
    }
    let scales = channel::derive_scales_with(&s.beam, &s.channel, &s.scale_options);
    let regime = channel::regime_report(&s.beam, &s.channel);
    let radii = s.radii.resolve(scales.waist());
    let out = transmittance::rytov_sweep(
        &s.beam,
        s.channel.l0p,
        s.channel.z,
        &s.rytov,
        &radii,
        &s.modes,
        &s.scale_options,
        s.calibration,
        &s.engine,
        &s.aperture,
    )?;
    let mut meta = base_metadata(s, &scales, &regime);
    meta.push("rytov_grid", format!("{:?}", s.rytov));
    Ok((out, meta))
}

/// Kernel engine a sweep of this scenario would use, built or read from the cache.
pub fn build_engine(s: &Scenario) -> Result<MomentEngine> {
    s.validate()?;
    let scales = channel::derive_scales_with(&s.beam, &s.channel, &s.scale_options);
    let radii = s.radii.resolve(scales.waist());
    transmittance::engine_for(&s.beam, &s.channel, &s.scale_options, &[Mode::Full], &radii, &s.engine)
}

/// Direct point ratio C Gamma4(0,0) / Gamma2(0)^2 - 1 for one mode.
pub fn point_ratio(engine: &MomentEngine, mode: Mode, norm: &NormCalibration) -> Result<f64> {
    let w2 = transmittance::mode_waist2(mode, &engine.scales);
    let g2 = crate::moments::gamma2_with_waist([0.0, 0.0], w2);
    let g4 = crate::moments::gamma4_total(engine, [0.0, 0.0], [0.0, 0.0], mode)?;
    Ok(norm.c_value * g4.total() / (g2 * g2) - 1.0)
}
