//! Beam and channel records, the Tatarskii spectrum, and the turbulence scales
//! derived from them.

use std::f64::consts::PI;
use std::fmt;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::specfun;

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Coefficient of the Tatarskii spectral density.
pub const TATARSKII_COEFF: f64 = 0.033;

/// Below this q0*r0 the paraxial picture gets shaky.
pub const PARAXIAL_WARN: f64 = 1e3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeamParams {
    /// Initial beam radius (m).
    pub r0: f64,
    /// Central wavenumber (1/m).
    pub q0: f64,
}

impl BeamParams {
    pub fn new(r0: f64, q0: f64) -> Result<Self> {
        let b = Self { r0, q0 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.r0.is_finite() && self.r0 > 0.0) {
            return Err(Error::invalid(format!("beam radius r0 must be positive, got {}", self.r0)));
        }
        if !(self.q0.is_finite() && self.q0 > 0.0) {
            return Err(Error::invalid(format!("wavenumber q0 must be positive, got {}", self.q0)));
        }
        Ok(())
    }

    /// Angular frequency c*q0 (rad/s).
    pub fn omega0(&self) -> f64 {
        SPEED_OF_LIGHT * self.q0
    }

    pub fn paraxial_product(&self) -> f64 {
        self.q0 * self.r0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelParams {
    /// Refractive-index structure constant (m^-2/3).
    pub cn2: f64,
    /// Inner-scale parameter l0/(2 pi) (m).
    pub l0p: f64,
    /// Path length (m).
    pub z: f64,
}

impl ChannelParams {
    pub fn new(cn2: f64, l0p: f64, z: f64) -> Result<Self> {
        let c = Self { cn2, l0p, z };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cn2.is_finite() && self.cn2 >= 0.0) {
            return Err(Error::invalid(format!("cn2 must be non-negative, got {}", self.cn2)));
        }
        if !(self.l0p.is_finite() && self.l0p > 0.0) {
            return Err(Error::invalid(format!("inner scale l0p must be positive, got {}", self.l0p)));
        }
        if !(self.z.is_finite() && self.z > 0.0) {
            return Err(Error::invalid(format!("path length z must be positive, got {}", self.z)));
        }
        Ok(())
    }

    /// Inner scale l0 = 2 pi l0p.
    pub fn l0(&self) -> f64 {
        2.0 * PI * self.l0p
    }
}

/// How the mean-intensity radius W^2 is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WaistModel {
    /// W^2 = 2 F_inf = r0^2/2 + 2 z^2/(q0 r0)^2 + 2 R_b^2, the width implied by the
    /// large-separation kernel limit.
    #[default]
    KernelAsymptote,
    /// W^2 = R_b^2 + r0^2 + 4 z^2/(q0 r0)^2.
    SpreadSum,
    /// W^2 = R_b^2, the saturated-regime value.
    Saturated,
}

impl WaistModel {
    pub fn name(self) -> &'static str {
        match self {
            WaistModel::KernelAsymptote => "kernel-asymptote",
            WaistModel::SpreadSum => "spread-sum",
            WaistModel::Saturated => "saturated",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "kernel-asymptote" => Some(WaistModel::KernelAsymptote),
            "spread-sum" => Some(WaistModel::SpreadSum),
            "saturated" => Some(WaistModel::Saturated),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ScaleOptions {
    /// Evaluate the literal R_b^2 expression, 8 z^3 c alpha / (3 r0^2 omega0^2). That expression is
    /// dimensionless, so this is an audit switch and nothing downstream is meaningful.
    pub strict_verbatim: bool,
    pub waist: WaistModel,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DerivedScales {
    /// Momentum-diffusion rate alpha (m^-2 s^-1).
    pub alpha_turb: f64,
    /// Turbulent beam-spread variance R_b^2 (m^2).
    pub rb2: f64,
    /// Turbulent mean-square transverse wavenumber (m^-2).
    pub q2t: f64,
    /// Appendix kernel prefactor, 3 R_b^2 (m^2).
    pub kernel_prefactor: f64,
    /// Diffraction spread z^2/(q0 r0)^2 (m^2).
    pub free_space2: f64,
    /// Mean-intensity radius squared (m^2).
    pub waist2: f64,
    /// Plane-wave Rytov variance, a label only.
    pub rytov2: f64,
}

impl DerivedScales {
    pub fn waist(&self) -> f64 {
        self.waist2.sqrt()
    }
}

/// Tatarskii spectral density 0.033 Cn^2 exp(-(g l0p)^2) g^(-11/3) (m^3).
pub fn tatarskii_psi(g: f64, channel: &ChannelParams) -> Result<f64> {
    if !(g.is_finite() && g > 0.0) {
        return Err(Error::invalid(format!("spatial wavenumber must be positive, got {g}")));
    }
    Ok(TATARSKII_COEFF * channel.cn2 * (-(g * channel.l0p).powi(2)).exp() * g.powf(-11.0 / 3.0))
}

/// alpha = 0.5 pi (omega0^2/c) Int d^2g g^2 psi(g), in closed form.
pub fn alpha_closed_form(beam: &BeamParams, channel: &ChannelParams) -> f64 {
    0.5 * PI
        * PI
        * TATARSKII_COEFF
        * specfun::gamma(1.0 / 6.0)
        * channel.cn2
        * beam.q0
        * beam.q0
        * SPEED_OF_LIGHT
        * channel.l0p.powf(-1.0 / 3.0)
}

pub fn derive_scales(beam: &BeamParams, channel: &ChannelParams) -> DerivedScales {
    derive_scales_with(beam, channel, &ScaleOptions::default())
}

pub fn derive_scales_with(beam: &BeamParams, channel: &ChannelParams, opts: &ScaleOptions) -> DerivedScales {
    let c = SPEED_OF_LIGHT;
    let z = channel.z;
    let alpha = alpha_closed_form(beam, channel);
    let q2t = 4.0 * alpha * z / c;
    let rb2 = if opts.strict_verbatim {
        let w0 = beam.omega0();
        8.0 * z.powi(3) * c * alpha / (3.0 * beam.r0 * beam.r0 * w0 * w0)
    } else {
        8.0 / 3.0 * alpha * z.powi(3) / (beam.q0 * beam.q0 * c)
    };
    let free_space2 = (z / (beam.q0 * beam.r0)).powi(2);
    let waist2 = match opts.waist {
        WaistModel::KernelAsymptote => 0.5 * beam.r0 * beam.r0 + 2.0 * free_space2 + 2.0 * rb2,
        WaistModel::SpreadSum => rb2 + beam.r0 * beam.r0 + 4.0 * free_space2,
        WaistModel::Saturated => rb2,
    };
    DerivedScales {
        alpha_turb: alpha,
        rb2,
        q2t,
        kernel_prefactor: 3.0 * rb2,
        free_space2,
        waist2,
        rytov2: rytov_variance(beam, channel),
    }
}

/// Plane-wave Rytov variance 1.23 Cn^2 q0^(7/6) z^(11/6). Used for labels only.
pub fn rytov_variance(beam: &BeamParams, channel: &ChannelParams) -> f64 {
    1.23 * channel.cn2 * beam.q0.powf(7.0 / 6.0) * channel.z.powf(11.0 / 6.0)
}

/// Cn^2 that gives a requested Rytov label on a fixed path.
pub fn cn2_for_rytov(beam: &BeamParams, z: f64, rytov2: f64) -> f64 {
    rytov2 / (1.23 * beam.q0.powf(7.0 / 6.0) * z.powf(11.0 / 6.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flag {
    Pass,
    Warn,
    Fail,
}

impl Flag {
    /// Ratio > 10 passes, 3..10 warns, below 3 fails.
    pub fn from_ratio(x: f64) -> Self {
        if x > 10.0 {
            Flag::Pass
        } else if x >= 3.0 {
            Flag::Warn
        } else {
            Flag::Fail
        }
    }
}

impl fmt::Display for Flag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Flag::Pass => "pass",
            Flag::Warn => "warn",
            Flag::Fail => "fail",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Criterion {
    pub name: &'static str,
    pub value: f64,
    pub flag: Flag,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegimeReport {
    /// q2t * l0p^2.
    pub phase_space: Criterion,
    /// q2t * R_b^2.
    pub uncertainty: Criterion,
    /// 15 q0^2 l0^(-2/3) Cn^4 z^4, the rough estimate of the quantity above.
    pub uncertainty_estimate: f64,
    /// R_b^2 / r0^2.
    pub spread_over_source: Criterion,
    /// R_b^2 / (4 z^2/(q0 r0)^2).
    pub spread_over_diffraction: Criterion,
    pub paraxial_product: f64,
    pub paraxial_ok: bool,
}

impl RegimeReport {
    pub fn criteria(&self) -> [&Criterion; 4] {
        [
            &self.phase_space,
            &self.uncertainty,
            &self.spread_over_source,
            &self.spread_over_diffraction,
        ]
    }

    pub fn worst(&self) -> Flag {
        let flags = self.criteria().map(|c| c.flag);
        if flags.contains(&Flag::Fail) {
            Flag::Fail
        } else if flags.contains(&Flag::Warn) {
            Flag::Warn
        } else {
            Flag::Pass
        }
    }

    /// Ratio of the computed q2t*R_b^2 to the rough estimate.
    pub fn estimate_ratio(&self) -> f64 {
        self.uncertainty.value / self.uncertainty_estimate
    }
}

pub fn regime_report(beam: &BeamParams, channel: &ChannelParams) -> RegimeReport {
    let s = derive_scales(beam, channel);
    let crit = |name, value: f64| Criterion {
        name,
        value,
        flag: Flag::from_ratio(value),
    };
    let uncertainty_estimate = 15.0 * beam.q0 * beam.q0 * channel.l0().powf(-2.0 / 3.0) * channel.cn2.powi(2) * channel.z.powi(4);
    RegimeReport {
        phase_space: crit("q2t*l0p^2", s.q2t * channel.l0p * channel.l0p),
        uncertainty: crit("q2t*rb2", s.q2t * s.rb2),
        uncertainty_estimate,
        spread_over_source: crit("rb2/r0^2", s.rb2 / (beam.r0 * beam.r0)),
        spread_over_diffraction: crit("rb2/(4*fs2)", s.rb2 / (4.0 * s.free_space2)),
        paraxial_product: beam.paraxial_product(),
        paraxial_ok: beam.paraxial_product() >= PARAXIAL_WARN,
    }
}

/// Hex digest of every input that changes a kernel value.
pub fn fingerprint(beam: &BeamParams, channel: &ChannelParams, tags: &[(&str, String)]) -> String {
    let mut h = Sha256::new();
    for (name, v) in [
        ("r0", beam.r0),
        ("q0", beam.q0),
        ("cn2", channel.cn2),
        ("l0p", channel.l0p),
        ("z", channel.z),
    ] {
        h.update(name.as_bytes());
        h.update(v.to_bits().to_le_bytes());
    }
    for (k, v) in tags {
        h.update(k.as_bytes());
        h.update(b"=");
        h.update(v.as_bytes());
        h.update(b";");
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn fig1_dashed() -> (BeamParams, ChannelParams) {
        (
            BeamParams::new(0.01, 1e7).unwrap(),
            ChannelParams::new(5.8e-15, 1e-3, 17e3).unwrap(),
        )
    }

    /// alpha by brute force: 0.5 pi (omega0^2/c) Int d^2g g^2 psi(g) as a nested
    /// polar quadrature, with g = t^(3/2) to tame the g^(-2/3) endpoint.
    fn alpha_by_quadrature(beam: &BeamParams, channel: &ChannelParams) -> f64 {
        let upper = (60.0f64).sqrt() / channel.l0p;
        let tmax = upper.powf(2.0 / 3.0);
        let radial = |_theta: f64| {
            crate::quad::integrate(
                |t| {
                    if t == 0.0 {
                        return 0.0;
                    }
                    let g = t.powf(1.5);
                    let dg = 1.5 * t.sqrt();
                    g * g * g * tatarskii_psi(g, channel).unwrap() * dg
                },
                0.0,
                tmax,
                1e-11,
                0.0,
                2000,
            )
            .unwrap()
            .value
        };
        let est = crate::quad::integrate(radial, 0.0, 2.0 * PI, 1e-10, 0.0, 50).unwrap();
        let w0 = beam.omega0();
        0.5 * PI * w0 * w0 / SPEED_OF_LIGHT * est.value
    }

    #[test]
    fn psi_values() {
        let ch = ChannelParams::new(1.0, 1e-12, 1.0).unwrap();
        assert_relative_eq!(tatarskii_psi(1.0, &ch).unwrap(), 0.033, max_relative = 1e-12);
        let ch0 = ChannelParams { cn2: 0.0, ..ch };
        assert_eq!(tatarskii_psi(3.0, &ch0).unwrap(), 0.0);
        let ch = ChannelParams::new(2e-14, 1e-3, 1.0).unwrap();
        let g = 1.0 / ch.l0p;
        assert_relative_eq!(
            tatarskii_psi(g, &ch).unwrap(),
            0.033 * 2e-14 * (-1.0f64).exp() * ch.l0p.powf(11.0 / 3.0),
            max_relative = 1e-12
        );
        assert!(tatarskii_psi(0.0, &ch).is_err());
        assert!(tatarskii_psi(-1.0, &ch).is_err());
    }

    #[test]
    fn alpha_closed_form_matches_plane_integral() {
        let (b, c) = fig1_dashed();
        let closed = alpha_closed_form(&b, &c);
        let quad = alpha_by_quadrature(&b, &c);
        assert_relative_eq!(closed, quad, max_relative = 1e-6);
        let coeff = closed / (c.cn2 * b.q0 * b.q0 * SPEED_OF_LIGHT * c.l0p.powf(-1.0 / 3.0));
        assert!((coeff - 0.9066).abs() < 1e-3, "{coeff}");
    }

    #[test]
    fn momentum_scale_near_600() {
        let (b, c) = fig1_dashed();
        let s = derive_scales(&b, &c);
        let root = s.q2t.sqrt();
        assert!((root - 600.0).abs() < 30.0, "{root}");
        assert_relative_eq!(s.rb2, 0.6888, max_relative = 1e-3);
        assert_eq!(s.kernel_prefactor, 3.0 * s.rb2);
        assert_eq!(s.free_space2, (c.z / (b.q0 * b.r0)).powi(2));
        assert_eq!(s.q2t, 4.0 * s.alpha_turb * c.z / SPEED_OF_LIGHT);
    }

    #[test]
    fn zero_turbulence() {
        let b = BeamParams::new(0.01, 1e7).unwrap();
        let c = ChannelParams::new(0.0, 1e-3, 1e3).unwrap();
        let s = derive_scales(&b, &c);
        assert_eq!((s.alpha_turb, s.rb2, s.q2t, s.rytov2), (0.0, 0.0, 0.0, 0.0));
        let r = regime_report(&b, &c);
        assert!(r.criteria().iter().all(|c| c.value == 0.0 && c.flag == Flag::Fail));
    }

    #[test]
    fn strict_verbatim_differs_by_r0_squared() {
        let (b, c) = fig1_dashed();
        let s = derive_scales(&b, &c);
        let v = derive_scales_with(
            &b,
            &c,
            &ScaleOptions {
                strict_verbatim: true,
                ..Default::default()
            },
        );
        assert_relative_eq!(v.rb2 * b.r0 * b.r0, s.rb2, max_relative = 1e-12);
    }

    #[test]
    fn waist_models() {
        let (b, c) = fig1_dashed();
        let mk = |waist| derive_scales_with(&b, &c, &ScaleOptions { strict_verbatim: false, waist });
        let s = mk(WaistModel::SpreadSum);
        assert_relative_eq!(s.waist2, s.rb2 + 1e-4 + 4.0 * s.free_space2, max_relative = 1e-14);
        assert_eq!(mk(WaistModel::Saturated).waist2, s.rb2);
        assert_relative_eq!(
            mk(WaistModel::KernelAsymptote).waist2,
            2.0 * (0.25e-4 + s.free_space2 + s.rb2),
            max_relative = 1e-14
        );
        for m in [WaistModel::KernelAsymptote, WaistModel::SpreadSum, WaistModel::Saturated] {
            assert_eq!(WaistModel::parse(m.name()), Some(m));
        }
    }

    #[test]
    fn rytov_label() {
        let b = BeamParams::new(0.01, 1e7).unwrap();
        let c = ChannelParams::new(2.5e-14, 1e-3, 20e3).unwrap();
        let r = rytov_variance(&b, &c);
        assert!((r - 347.0).abs() < 3.0, "{r}");
        assert_relative_eq!(cn2_for_rytov(&b, c.z, r), c.cn2, max_relative = 1e-12);
    }

    #[test]
    fn regime_fig1() {
        let (b, c) = fig1_dashed();
        let r = regime_report(&b, &c);
        let s = derive_scales(&b, &c);
        assert!(s.rb2 > 4.0 * s.free_space2);
        assert!((4.0 * s.free_space2 - 0.1156).abs() < 1e-3);
        let ratio = r.estimate_ratio();
        assert!(ratio > 1.0 / 2.5 && ratio < 2.5, "{ratio}");
        assert_eq!(r.spread_over_diffraction.flag, Flag::Warn);
        assert_eq!(r.phase_space.flag, Flag::Fail);
        assert!(r.paraxial_ok);
    }

    #[test]
    fn flags() {
        assert_eq!(Flag::from_ratio(11.0), Flag::Pass);
        assert_eq!(Flag::from_ratio(10.0), Flag::Warn);
        assert_eq!(Flag::from_ratio(3.0), Flag::Warn);
        assert_eq!(Flag::from_ratio(2.9), Flag::Fail);
    }

    #[test]
    fn invalid_inputs() {
        assert!(BeamParams::new(0.0, 1e7).is_err());
        assert!(BeamParams::new(0.01, f64::NAN).is_err());
        assert!(ChannelParams::new(-1e-15, 1e-3, 1.0).is_err());
        assert!(ChannelParams::new(1e-15, 0.0, 1.0).is_err());
        assert!(ChannelParams::new(1e-15, 1e-3, 0.0).is_err());
    }

    #[test]
    fn fingerprint_tracks_inputs() {
        let (b, c) = fig1_dashed();
        let f = fingerprint(&b, &c, &[]);
        assert_eq!(f.len(), 64);
        assert_eq!(f, fingerprint(&b, &c, &[]));
        let c2 = ChannelParams { z: c.z + 1.0, ..c };
        assert_ne!(f, fingerprint(&b, &c2, &[]));
        assert_ne!(f, fingerprint(&b, &c, &[("grid", "97".into())]));
    }

    proptest! {
        #[test]
        fn scales_linear_in_cn2(cn2 in 1e-17f64..1e-13, z in 1e3f64..1e5) {
            let b = BeamParams::new(0.01, 1e7).unwrap();
            let c1 = ChannelParams::new(cn2, 1e-3, z).unwrap();
            let c2 = ChannelParams { cn2: 2.0 * cn2, ..c1 };
            let s1 = derive_scales(&b, &c1);
            let s2 = derive_scales(&b, &c2);
            for (x, y) in [(s1.alpha_turb, s2.alpha_turb), (s1.rb2, s2.rb2), (s1.q2t, s2.q2t)] {
                prop_assert!((y - 2.0 * x).abs() <= 1e-13 * y);
            }
        }

        #[test]
        fn scales_grow_with_path(cn2 in 1e-17f64..1e-13, z in 1e2f64..1e5, dz in 1.0f64..1e3) {
            let b = BeamParams::new(0.01, 1e7).unwrap();
            let s1 = derive_scales(&b, &ChannelParams::new(cn2, 1e-3, z).unwrap());
            let s2 = derive_scales(&b, &ChannelParams::new(cn2, 1e-3, z + dz).unwrap());
            prop_assert!(s2.q2t > s1.q2t);
            prop_assert!(s2.rb2 > s1.rb2);
        }

        #[test]
        fn rytov_power_law(t in 0.1f64..10.0) {
            let b = BeamParams::new(0.01, 1e7).unwrap();
            let c = ChannelParams::new(1e-15, 1e-3, 5e3).unwrap();
            let c2 = ChannelParams { z: c.z * t, ..c };
            let ratio = rytov_variance(&b, &c2) / rytov_variance(&b, &c);
            prop_assert!((ratio - t.powf(11.0 / 6.0)).abs() <= 1e-12 * ratio);
        }
    }
}
