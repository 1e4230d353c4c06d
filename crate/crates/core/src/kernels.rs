//! Geometric kernels F1..F4, G1..G2, H1..H2 built from the eight tau-integrals of
//! the hypergeometric brackets, plus an interpolation table and its cache file.
//!
//! Every integrand depends on the separation only through
//! dr(tau) = a (1 - tau) + b tau. Region (i) has a = rho, b = rho - 2q; region (ii)
//! has a = 0, b = 2q. The table is laid out in these endpoint coordinates, which
//! makes the symmetry K(a, b) = K(-a, -b) exact and lets negative q reuse the same
//! nodes.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::channel::{BeamParams, ChannelParams, DerivedScales};
use crate::error::{Error, Result};
use crate::quad;
use crate::specfun::{self, SpecFunConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Region {
    RegionI,
    RegionII,
}

/// Argument of the second hypergeometric function in the brackets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HyperArgument {
    /// -u, the value the g-integral closes to.
    #[default]
    Corrected,
    /// -4u, the literal variant.
    Printed,
}

impl HyperArgument {
    pub fn factor(self) -> f64 {
        match self {
            HyperArgument::Corrected => 1.0,
            HyperArgument::Printed => 4.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            HyperArgument::Corrected => "corrected",
            HyperArgument::Printed => "printed",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "corrected" => Some(HyperArgument::Corrected),
            "printed" => Some(HyperArgument::Printed),
            _ => None,
        }
    }
}

/// Kernel functions at one (q, rho). `det3` and `det4` are F3 H1 - G1^2 and
/// F4 H2 - G2^2, assembled from pieces that avoid subtracting the vacuum terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelValues {
    pub f1: f64,
    pub f2: f64,
    pub f3: f64,
    pub f4: f64,
    pub g1: f64,
    pub g2: f64,
    pub h1: f64,
    pub h2: f64,
    pub det3: f64,
    pub det4: f64,
}

impl KernelValues {
    pub fn vacuum(beam: &BeamParams, scales: &DerivedScales) -> Self {
        TurbulentParts::ZERO.with_vacuum(beam, scales)
    }

    /// Constant kernels of the saturated limit, F = R_b^2/2, G = 3R_b^2/4, H = 3R_b^2/2.
    pub fn saturated(rb2: f64) -> Self {
        let (f, g, h) = (0.5 * rb2, 0.75 * rb2, 1.5 * rb2);
        let det = f * h - g * g;
        Self {
            f1: f,
            f2: f,
            f3: f,
            f4: f,
            g1: g,
            g2: g,
            h1: h,
            h2: h,
            det3: det,
            det4: det,
        }
    }

    pub fn check(&self, q: f64, rho: f64) -> Result<()> {
        let bad = |reason: String| Error::KernelDegenerate { q, rho, reason };
        for (name, v) in [
            ("F1", self.f1),
            ("F2", self.f2),
            ("F3", self.f3),
            ("F4", self.f4),
            ("H1", self.h1),
            ("H2", self.h2),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(bad(format!("{name} = {v:e} is not positive")));
            }
        }
        if !(self.det3.is_finite() && self.det3 > 0.0) {
            return Err(bad(format!("F3 H1 - G1^2 = {:e} is not positive", self.det3)));
        }
        if !(self.det4.is_finite() && self.det4 > 0.0) {
            return Err(bad(format!("F4 H2 - G2^2 = {:e} is not positive", self.det4)));
        }
        Ok(())
    }

    /// [F1 F2 (F3 H1 - G1^2)(F4 H2 - G2^2)]^(-1/2).
    pub fn prefactor(&self) -> f64 {
        1.0 / (self.f1 * self.f2 * self.det3 * self.det4).sqrt()
    }

    /// H1 - G1^2/F3, the width of the q Gaussian.
    pub fn d1(&self) -> f64 {
        self.det3 / self.f3
    }

    /// H2 F4 - G2^2 over H2, the perpendicular width.
    pub fn d2(&self) -> f64 {
        self.det4 / self.h2
    }
}

/// Turbulent pieces of the kernels: phi1..4, gamma1..2, chi1..2, the combinations
/// Int (1 - tau)^2 b3 and Int (1 - tau)^2 b4 (times the prefactor), and the
/// Cauchy-Schwarz defects phi3 chi1 - gamma1^2 and phi4 chi2 - gamma2^2.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TurbulentParts(pub [f64; 12]);

impl TurbulentParts {
    pub const ZERO: TurbulentParts = TurbulentParts([0.0; 12]);

    pub fn phi(&self) -> [f64; 4] {
        [self.0[0], self.0[1], self.0[2], self.0[3]]
    }

    pub fn gamma(&self) -> [f64; 2] {
        [self.0[4], self.0[5]]
    }

    pub fn chi(&self) -> [f64; 2] {
        [self.0[6], self.0[7]]
    }

    pub fn with_vacuum(&self, beam: &BeamParams, scales: &DerivedScales) -> KernelValues {
        let v = &self.0;
        let fs = scales.free_space2;
        let src = 0.25 * beam.r0 * beam.r0;
        let f0 = src + fs;
        // F H - G^2 = src (fs + chi) + fs (chi - 2 gamma + phi) + (phi chi - gamma^2)
        let det3 = src * (fs + v[6]) + fs * v[8] + v[10];
        let det4 = src * (fs + v[7]) + fs * v[9] + v[11];
        KernelValues {
            f1: f0 + v[0],
            f2: f0 + v[1],
            f3: f0 + v[2],
            f4: f0 + v[3],
            g1: fs + v[4],
            g2: fs + v[5],
            h1: fs + v[6],
            h2: fs + v[7],
            det3,
            det4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TauQuadConfig {
    pub rel_tol: f64,
    /// Absolute floor (m^2).
    pub abs_tol: f64,
    pub max_subdivisions: usize,
}

impl Default for TauQuadConfig {
    fn default() -> Self {
        Self {
            rel_tol: 1e-6,
            abs_tol: 0.0,
            max_subdivisions: 400,
        }
    }
}

impl TauQuadConfig {
    pub fn oracle() -> Self {
        Self {
            rel_tol: 1e-8,
            abs_tol: 0.0,
            max_subdivisions: 1000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rel_tol > 0.0 && self.rel_tol <= 1e-6) {
            return Err(Error::invalid(format!("tau rel_tol must lie in (0, 1e-6], got {}", self.rel_tol)));
        }
        if !(self.abs_tol >= 0.0) {
            return Err(Error::invalid("tau abs_tol must be non-negative"));
        }
        if self.max_subdivisions < 32 {
            return Err(Error::invalid(format!(
                "tau max_subdivisions must be at least 32, got {}",
                self.max_subdivisions
            )));
        }
        Ok(())
    }
}

pub fn delta_r_tilde(q: f64, tau: f64, rho: f64, region: Region) -> f64 {
    match region {
        Region::RegionI => rho - 2.0 * q * tau,
        Region::RegionII => 2.0 * q * tau,
    }
}

/// Endpoints (a, b) with dr(tau) = a (1 - tau) + b tau.
pub fn endpoints(q: f64, rho: f64, region: Region) -> (f64, f64) {
    match region {
        Region::RegionI => (rho, rho - 2.0 * q),
        Region::RegionII => (0.0, 2.0 * q),
    }
}

/// The four brackets [1 + d(A+B)], [1 + d(A-B)], [1 - d(A-B)], [1 - d(A+B)] and
/// their ingredients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Brackets {
    pub b1: f64,
    pub b2: f64,
    pub b3: f64,
    pub b4: f64,
    pub damping: f64,
    pub a: f64,
    pub b: f64,
}

impl Brackets {
    /// |d (A +- B)| <= 1 up to rounding.
    pub fn bounded(&self) -> bool {
        let p = self.damping * (self.a + self.b);
        let m = self.damping * (self.a - self.b);
        p.abs() <= 1.0 + 1e-12 && m.abs() <= 1.0 + 1e-12
    }
}

pub fn kernel_integrands(dr: f64, tau: f64, scales: &DerivedScales, channel: &ChannelParams) -> Result<Brackets> {
    kernel_integrands_with(dr, tau, scales, channel, HyperArgument::default(), &SpecFunConfig::default())
}

pub fn kernel_integrands_with(
    dr: f64,
    tau: f64,
    scales: &DerivedScales,
    channel: &ChannelParams,
    hyper: HyperArgument,
    spec: &SpecFunConfig,
) -> Result<Brackets> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::invalid(format!("tau must lie in [0, 1], got {tau}")));
    }
    let br = raw_brackets(dr, tau, scales.rb2, channel.l0p, hyper, spec)?;
    if !br.bounded() {
        return Err(Error::KernelDegenerate {
            q: f64::NAN,
            rho: dr,
            reason: format!("bracket amplitude exceeds one at tau = {tau}"),
        });
    }
    Ok(br)
}

fn raw_brackets(dr: f64, tau: f64, rb2: f64, l: f64, hyper: HyperArgument, spec: &SpecFunConfig) -> Result<Brackets> {
    let l2 = l * l;
    let d2 = dr * dr;
    let beta = rb2 / (480.0 * l2) * (1.0 + rb2 * tau.powi(3) / (672.0 * l2));
    let den = 1.0 + beta * d2 * tau * tau;
    let u = d2 / (4.0 * l2 * den);
    let damping = (1.0 + beta * d2 * tau.powi(3)).powf(-1.0 / 6.0);
    let a = specfun::kummer_1f1_with(1.0 / 6.0, 1.0, -u, spec)?;
    let b = if u == 0.0 {
        0.0
    } else {
        u / 12.0 * specfun::kummer_1f1_with(7.0 / 6.0, 3.0, -hyper.factor() * u, spec)?
    };
    Ok(Brackets {
        b1: 1.0 + damping * (a + b),
        b2: 1.0 + damping * (a - b),
        b3: 1.0 - damping * (a - b),
        b4: 1.0 - damping * (a + b),
        damping,
        a,
        b,
    })
}

/// Everything needed to evaluate kernels for one beam/channel pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelModel {
    pub beam: BeamParams,
    pub channel: ChannelParams,
    pub scales: DerivedScales,
    pub hyper: HyperArgument,
    pub spec: SpecFunConfig,
}

impl KernelModel {
    pub fn new(beam: BeamParams, channel: ChannelParams, scales: DerivedScales) -> Self {
        Self {
            beam,
            channel,
            scales,
            hyper: HyperArgument::default(),
            spec: SpecFunConfig::default(),
        }
    }

    pub fn with_hyper(mut self, hyper: HyperArgument) -> Self {
        self.hyper = hyper;
        self
    }

    /// Turbulent parts for dr(tau) = a (1 - tau) + b tau.
    pub fn turbulent_parts(&self, a: f64, b: f64, quad: &TauQuadConfig) -> Result<TurbulentParts> {
        let ak = self.scales.kernel_prefactor;
        if ak == 0.0 {
            return Ok(TurbulentParts::ZERO);
        }
        let mut points = vec![0.0];
        if a != b {
            let t = a / (a - b);
            if t > 0.0 && t < 1.0 {
                points.push(t);
            }
        }
        points.push(1.0);
        let mut failure: Option<Error> = None;
        let mut unbounded = None;
        let est = quad::integrate_vec(
            |tau| {
                let dr = a + (b - a) * tau;
                match raw_brackets(dr, tau, self.scales.rb2, self.channel.l0p, self.hyper, &self.spec) {
                    Ok(br) => {
                        if !br.bounded() && unbounded.is_none() {
                            unbounded = Some(tau);
                        }
                        let t2 = tau * tau;
                        let w = (1.0 - tau) * (1.0 - tau);
                        [
                            t2 * br.b1,
                            t2 * br.b2,
                            t2 * br.b3,
                            t2 * br.b4,
                            tau * br.b3,
                            tau * br.b4,
                            br.b3,
                            br.b4,
                            w * br.b3,
                            w * br.b4,
                        ]
                    }
                    Err(e) => {
                        if failure.is_none() {
                            failure = Some(e);
                        }
                        [0.0; 10]
                    }
                }
            },
            &points,
            quad.rel_tol,
            quad.abs_tol / ak,
            quad.max_subdivisions,
        );
        if let Some(e) = failure {
            return Err(e);
        }
        if let Some(tau) = unbounded {
            return Err(Error::KernelDegenerate {
                q: (a - b) / 2.0,
                rho: a,
                reason: format!("bracket amplitude exceeds one at tau = {tau}"),
            });
        }
        let v = est?.value;
        let mut out = [0.0; 12];
        for k in 0..10 {
            out[k] = ak * v[k];
        }
        out[10] = out[2] * out[6] - out[4] * out[4];
        out[11] = out[3] * out[7] - out[5] * out[5];
        Ok(TurbulentParts(out))
    }

    pub fn assemble_endpoints(&self, a: f64, b: f64, quad: &TauQuadConfig) -> Result<KernelValues> {
        let kv = self.turbulent_parts(a, b, quad)?.with_vacuum(&self.beam, &self.scales);
        kv.check((a - b) / 2.0, a)?;
        Ok(kv)
    }

    pub fn assemble(&self, q: f64, rho: f64, region: Region, quad: &TauQuadConfig) -> Result<KernelValues> {
        let (a, b) = endpoints(q, rho, region);
        let kv = self.turbulent_parts(a, b, quad)?.with_vacuum(&self.beam, &self.scales);
        kv.check(q, rho)?;
        Ok(kv)
    }
}

pub fn assemble_fgh(
    q: f64,
    rho: f64,
    region: Region,
    scales: &DerivedScales,
    beam: &BeamParams,
    channel: &ChannelParams,
    quad: &TauQuadConfig,
) -> Result<KernelValues> {
    KernelModel::new(*beam, *channel, *scales).assemble(q, rho, region, quad)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GSign {
    Plus,
    Minus,
}

/// N(L) Int_0^inf g^(-2/3) exp(-g^2 L^2) [J0(g dr) +- J2(g dr)] dg with
/// N(L) = [Gamma(1/6) L^(-1/3) / 2]^(-1). Test oracle for the bracket closed form.
pub fn g_integral_oracle(dr: f64, l: f64, sign: GSign) -> Result<f64> {
    if !(l > 0.0) || !(dr >= 0.0) {
        return Err(Error::invalid(format!("need L > 0 and dr >= 0, got L = {l}, dr = {dr}")));
    }
    let s = match sign {
        GSign::Plus => 1.0,
        GSign::Minus => -1.0,
    };
    // g = t^3 removes the endpoint singularity: g^(-2/3) dg = 3 dt.
    let tmax = (60.0f64).powf(1.0 / 6.0) / l.powf(1.0 / 3.0);
    let norm = 0.5 * specfun::gamma(1.0 / 6.0) * l.powf(-1.0 / 3.0);
    let mut points = vec![0.0];
    if dr > 0.0 {
        // Panel edges every few radians of the Bessel phase.
        let mut x = 4.0;
        while x < dr * tmax.powi(3) {
            let t = (x / dr).cbrt();
            points.push(t);
            x += 4.0;
        }
    }
    points.push(tmax);
    let mut err = None;
    let est = quad::integrate_points(
        |t| {
            let g = t * t * t;
            let x = g * dr;
            let j = match (specfun::bessel_j(0, x), specfun::bessel_j(2, x)) {
                (Ok(j0), Ok(j2)) => j0 + s * j2,
                (Err(e), _) | (_, Err(e)) => {
                    err.get_or_insert(e);
                    0.0
                }
            };
            3.0 * (-(g * l).powi(2)).exp() * j
        },
        &points,
        1e-12,
        1e-15,
        20_000,
    )?;
    if let Some(e) = err {
        return Err(e);
    }
    Ok(est.value / norm)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Interpolation {
    Linear,
    #[default]
    Cubic,
}

impl Interpolation {
    pub fn name(self) -> &'static str {
        match self {
            Interpolation::Linear => "linear",
            Interpolation::Cubic => "cubic",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "linear" => Some(Interpolation::Linear),
            "cubic" => Some(Interpolation::Cubic),
            _ => None,
        }
    }
}

/// Node layout of a kernel table. Nodes are uniform in asinh(x / scale) over
/// [-a_max, a_max] x [-b_max, b_max]; node counts are forced odd so zero is a node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TableSpec {
    pub a_max: f64,
    pub b_max: f64,
    pub nodes_a: usize,
    pub nodes_b: usize,
    pub scale: f64,
    pub order: Interpolation,
}

impl TableSpec {
    /// One-dimensional layout for region (ii), where a = 0.
    pub fn radial(b_max: f64, nodes_b: usize, scale: f64) -> Self {
        Self {
            a_max: 0.0,
            b_max,
            nodes_a: 1,
            nodes_b,
            scale,
            order: Interpolation::Cubic,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) {
            return Err(Error::invalid("table scale must be positive"));
        }
        if self.nodes_a == 0 || self.nodes_b == 0 {
            return Err(Error::invalid("table needs at least one node per axis"));
        }
        if self.nodes_a % 2 == 0 || self.nodes_b % 2 == 0 {
            return Err(Error::invalid("table node counts must be odd"));
        }
        if !(self.a_max >= 0.0 && self.b_max >= 0.0) {
            return Err(Error::invalid("table extents must be non-negative"));
        }
        if (self.nodes_a > 1) != (self.a_max > 0.0) || (self.nodes_b > 1) != (self.b_max > 0.0) {
            return Err(Error::invalid("a single-node axis must have zero extent and vice versa"));
        }
        Ok(())
    }

    fn axis(n: usize, max: f64, scale: f64) -> Vec<f64> {
        if n == 1 {
            return vec![0.0];
        }
        let umax = (max / scale).asinh();
        let half = (n / 2) as f64;
        (0..n).map(|i| umax * (i as f64 - half) / half).collect()
    }
}

/// Random-probe acceptance test for a freshly built table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeCheck {
    pub probes: usize,
    pub seed: u64,
    pub tol: f64,
    pub max_nodes: usize,
}

impl Default for ProbeCheck {
    fn default() -> Self {
        Self {
            probes: 16,
            seed: 0x5eed,
            tol: 1e-4,
            max_nodes: 513,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelTable {
    scale: f64,
    ua: Vec<f64>,
    ub: Vec<f64>,
    values: Vec<TurbulentParts>,
    order: Interpolation,
    fingerprint: String,
    beam: BeamParams,
    scales: DerivedScales,
}

const CACHE_MAGIC: &str = "turbmoment-kernel-table";
const CACHE_VERSION: u32 = 1;

impl KernelTable {
    pub fn build(model: &KernelModel, spec: &TableSpec, quad: &TauQuadConfig, fingerprint: &str) -> Result<Self> {
        spec.validate()?;
        quad.validate()?;
        let ua = TableSpec::axis(spec.nodes_a, spec.a_max, spec.scale);
        let ub = TableSpec::axis(spec.nodes_b, spec.b_max, spec.scale);
        let (na, nb) = (ua.len(), ub.len());
        let (ha, hb) = (na / 2, nb / 2);
        // Only the half with a > 0, or a = 0 and b >= 0, is integrated.
        let owned: Vec<(usize, usize)> = (0..na)
            .flat_map(|i| (0..nb).map(move |j| (i, j)))
            .filter(|&(i, j)| i > ha || (i == ha && j >= hb))
            .collect();
        let computed: Vec<Result<TurbulentParts>> = owned
            .par_iter()
            .map(|&(i, j)| {
                let a = spec.scale * ua[i].sinh();
                let b = spec.scale * ub[j].sinh();
                model.turbulent_parts(a, b, quad)
            })
            .collect();
        let mut values = vec![TurbulentParts::ZERO; na * nb];
        for (&(i, j), v) in owned.iter().zip(computed) {
            let v = v?;
            values[i * nb + j] = v;
            values[(na - 1 - i) * nb + (nb - 1 - j)] = v;
        }
        let table = Self {
            scale: spec.scale,
            ua,
            ub,
            values,
            order: spec.order,
            fingerprint: fingerprint.to_string(),
            beam: model.beam,
            scales: model.scales,
        };
        for (k, v) in table.values.iter().enumerate() {
            let kv = v.with_vacuum(&model.beam, &model.scales);
            let (a, b) = table.node(k);
            kv.check((a - b) / 2.0, a)?;
        }
        Ok(table)
    }

    fn node(&self, k: usize) -> (f64, f64) {
        let nb = self.ub.len();
        (self.scale * self.ua[k / nb].sinh(), self.scale * self.ub[k % nb].sinh())
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn order(&self) -> Interpolation {
        self.order
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.ua.len(), self.ub.len())
    }

    pub fn a_max(&self) -> f64 {
        self.scale * self.ua.last().copied().unwrap_or(0.0).sinh()
    }

    pub fn b_max(&self) -> f64 {
        self.scale * self.ub.last().copied().unwrap_or(0.0).sinh()
    }

    /// Node coordinates along a and b (m).
    pub fn grids(&self) -> (Vec<f64>, Vec<f64>) {
        (
            self.ua.iter().map(|u| self.scale * u.sinh()).collect(),
            self.ub.iter().map(|u| self.scale * u.sinh()).collect(),
        )
    }

    /// Iterates kernel values at every stored node.
    pub fn node_values(&self) -> impl Iterator<Item = KernelValues> + '_ {
        self.values.iter().map(|v| v.with_vacuum(&self.beam, &self.scales))
    }

    pub fn with_order(mut self, order: Interpolation) -> Self {
        self.order = order;
        self
    }

    fn stencil(&self, nodes: &[f64], u: f64, out_w: &mut [f64; 4]) -> Result<usize> {
        let n = nodes.len();
        if n == 1 {
            if u.abs() > 1e-12 {
                return Err(Error::TableResolution(format!(
                    "coordinate {:e} off a single-node axis",
                    self.scale * u.sinh()
                )));
            }
            *out_w = [1.0, 0.0, 0.0, 0.0];
            return Ok(0);
        }
        let lo = nodes[0];
        let hi = nodes[n - 1];
        let tol = 1e-12 * (hi - lo);
        if u < lo - tol || u > hi + tol {
            return Err(Error::TableResolution(format!(
                "coordinate {:e} outside the tabulated range +-{:e}",
                self.scale * u.sinh(),
                self.scale * hi.sinh()
            )));
        }
        let h = (hi - lo) / (n - 1) as f64;
        let x = ((u - lo) / h).clamp(0.0, (n - 1) as f64);
        let mut i = (x.floor() as usize).min(n - 2);
        let width = match self.order {
            Interpolation::Linear => 2,
            Interpolation::Cubic => n.min(4),
        };
        let start = if width == 2 {
            i
        } else {
            i = i.saturating_sub(width / 2 - 1);
            i.min(n - width)
        };
        let t = x - start as f64;
        *out_w = [0.0; 4];
        for (k, w) in out_w.iter_mut().enumerate().take(width) {
            let mut l = 1.0;
            for m in 0..width {
                if m != k {
                    l *= (t - m as f64) / (k as f64 - m as f64);
                }
            }
            *w = l;
        }
        Ok(start)
    }

    pub fn turbulent(&self, a: f64, b: f64) -> Result<TurbulentParts> {
        // Only the half-plane a >= 0 is addressed so that stencils stay in the
        // integrated half wherever possible.
        let (a, b) = if a < 0.0 { (-a, -b) } else { (a, b) };
        let mut wa = [0.0; 4];
        let mut wb = [0.0; 4];
        let ia = self.stencil(&self.ua, (a / self.scale).asinh(), &mut wa)?;
        let ib = self.stencil(&self.ub, (b / self.scale).asinh(), &mut wb)?;
        let nb = self.ub.len();
        let mut out = [0.0; 12];
        let mut lo = [f64::INFINITY; 12];
        let mut hi = [f64::NEG_INFINITY; 12];
        for (p, &wap) in wa.iter().enumerate() {
            if wap == 0.0 {
                continue;
            }
            for (r, &wbr) in wb.iter().enumerate() {
                if wbr == 0.0 {
                    continue;
                }
                let w = wap * wbr;
                let v = &self.values[(ia + p) * nb + ib + r].0;
                for k in 0..12 {
                    out[k] += w * v[k];
                    lo[k] = lo[k].min(v[k]);
                    hi[k] = hi[k].max(v[k]);
                }
            }
        }
        // Limiter: cubic overshoot near dr = 0 can drive the determinants negative.
        for k in 0..12 {
            out[k] = out[k].clamp(lo[k], hi[k]);
        }
        Ok(TurbulentParts(out))
    }

    pub fn lookup(&self, a: f64, b: f64) -> Result<KernelValues> {
        let kv = self.turbulent(a, b)?.with_vacuum(&self.beam, &self.scales);
        kv.check((a - b) / 2.0, a)?;
        Ok(kv)
    }

    pub fn lookup_region(&self, q: f64, rho: f64, region: Region) -> Result<KernelValues> {
        let (a, b) = endpoints(q, rho, region);
        let kv = self.turbulent(a, b)?.with_vacuum(&self.beam, &self.scales);
        kv.check(q, rho)?;
        Ok(kv)
    }

    /// Compares interpolated lookups with direct evaluation at random off-node
    /// points inside the table (a >= 0 half). Returns the worst relative error.
    pub fn validate(&self, model: &KernelModel, quad: &TauQuadConfig, probes: usize, seed: u64, tol: f64) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ua_max = *self.ua.last().unwrap();
        let ub_max = *self.ub.last().unwrap();
        let pts: Vec<(f64, f64)> = (0..probes)
            .map(|_| {
                let ua: f64 = if ua_max > 0.0 { rng.gen_range(0.0..ua_max) } else { 0.0 };
                let ub: f64 = if ub_max > 0.0 { rng.gen_range(-ub_max..ub_max) } else { 0.0 };
                (self.scale * ua.sinh(), self.scale * ub.sinh())
            })
            .collect();
        let errs: Vec<Result<(f64, f64, f64)>> = pts
            .par_iter()
            .map(|&(a, b)| {
                let direct = model.assemble_endpoints(a, b, quad)?;
                let interp = self.lookup(a, b)?;
                Ok((a, b, relative_gap(&direct, &interp)))
            })
            .collect();
        let mut worst: f64 = 0.0;
        for r in errs {
            let (a, b, e) = r?;
            if e > tol {
                return Err(Error::TableResolution(format!(
                    "probe at a = {a:e} m, b = {b:e} m is off by {e:e} (tolerance {tol:e})"
                )));
            }
            worst = worst.max(e);
        }
        Ok(worst)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = String::new();
        let hex = |x: f64| format!("{:016x}", x.to_bits());
        let _ = writeln!(s, "{CACHE_MAGIC} {CACHE_VERSION}");
        let _ = writeln!(s, "fingerprint {}", self.fingerprint);
        let _ = writeln!(s, "order {}", self.order.name());
        let _ = writeln!(s, "scale {}", hex(self.scale));
        let _ = writeln!(s, "beam {} {}", hex(self.beam.r0), hex(self.beam.q0));
        let sc = &self.scales;
        let _ = writeln!(
            s,
            "scales {}",
            [sc.alpha_turb, sc.rb2, sc.q2t, sc.kernel_prefactor, sc.free_space2, sc.waist2, sc.rytov2]
                .iter()
                .map(|&x| hex(x))
                .collect::<Vec<_>>()
                .join(" ")
        );
        for (name, axis) in [("ua", &self.ua), ("ub", &self.ub)] {
            let _ = writeln!(
                s,
                "{name} {} {}",
                axis.len(),
                axis.iter().map(|&x| hex(x)).collect::<Vec<_>>().join(" ")
            );
        }
        let _ = writeln!(s, "values {}", self.values.len());
        for v in &self.values {
            let _ = writeln!(s, "{}", v.0.iter().map(|&x| hex(x)).collect::<Vec<_>>().join(" "));
        }
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    /// Reads a cache file. Returns `Ok(None)` when the file is absent or was built
    /// for different inputs.
    pub fn load(path: &Path, expected_fingerprint: &str) -> Result<Option<Self>> {
        let text = match fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(Error::io(path, e)),
        };
        let mut lines = text.lines();
        let bad = |what: &str| Error::Cache(format!("{}: malformed {what}", path.display()));
        let head = lines.next().ok_or_else(|| bad("header"))?;
        let mut hp = head.split_whitespace();
        if hp.next() != Some(CACHE_MAGIC) {
            return Err(bad("header"));
        }
        let version: u32 = hp.next().and_then(|v| v.parse().ok()).ok_or_else(|| bad("version"))?;
        if version != CACHE_VERSION {
            return Ok(None);
        }
        let mut field = |name: &str| -> Result<Vec<String>> {
            let line = lines.next().ok_or_else(|| bad(name))?;
            let mut parts = line.split_whitespace();
            if parts.next() != Some(name) {
                return Err(bad(name));
            }
            Ok(parts.map(str::to_string).collect())
        };
        let unhex = |s: &str| -> Result<f64> {
            u64::from_str_radix(s, 16)
                .map(f64::from_bits)
                .map_err(|_| Error::Cache(format!("{}: bad number `{s}`", path.display())))
        };
        let fp = field("fingerprint")?;
        if fp.first().map(String::as_str) != Some(expected_fingerprint) {
            return Ok(None);
        }
        let order = field("order")?
            .first()
            .and_then(|s| Interpolation::parse(s))
            .ok_or_else(|| bad("order"))?;
        let scale = unhex(field("scale")?.first().ok_or_else(|| bad("scale"))?)?;
        let beam_f = field("beam")?;
        if beam_f.len() != 2 {
            return Err(bad("beam"));
        }
        let beam = BeamParams {
            r0: unhex(&beam_f[0])?,
            q0: unhex(&beam_f[1])?,
        };
        let sc = field("scales")?
            .iter()
            .map(|s| unhex(s))
            .collect::<Result<Vec<_>>>()?;
        if sc.len() != 7 {
            return Err(bad("scales"));
        }
        let scales = DerivedScales {
            alpha_turb: sc[0],
            rb2: sc[1],
            q2t: sc[2],
            kernel_prefactor: sc[3],
            free_space2: sc[4],
            waist2: sc[5],
            rytov2: sc[6],
        };
        let mut axis = |name: &str| -> Result<Vec<f64>> {
            let f = field(name)?;
            let n: usize = f.first().and_then(|s| s.parse().ok()).ok_or_else(|| bad(name))?;
            if f.len() != n + 1 {
                return Err(bad(name));
            }
            f[1..].iter().map(|s| unhex(s)).collect()
        };
        let ua = axis("ua")?;
        let ub = axis("ub")?;
        let count: usize = field("values")?
            .first()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("values"))?;
        if count != ua.len() * ub.len() {
            return Err(bad("values"));
        }
        let mut values = Vec::with_capacity(count);
        for _ in 0..count {
            let line = lines.next().ok_or_else(|| bad("values"))?;
            let nums = line.split_whitespace().map(unhex).collect::<Result<Vec<_>>>()?;
            if nums.len() != 12 {
                return Err(bad("values"));
            }
            let mut v = [0.0; 12];
            v.copy_from_slice(&nums);
            values.push(TurbulentParts(v));
        }
        Ok(Some(Self {
            scale,
            ua,
            ub,
            values,
            order,
            fingerprint: expected_fingerprint.to_string(),
            beam,
            scales,
        }))
    }

    /// Builds, then grows both node counts by half until `probes` random lookups
    /// agree with direct evaluation to `tol`, up to `max_nodes` per axis.
    pub fn build_refined(
        model: &KernelModel,
        spec: &TableSpec,
        quad: &TauQuadConfig,
        fingerprint: &str,
        check: &ProbeCheck,
    ) -> Result<Self> {
        let mut spec = *spec;
        loop {
            let table = Self::build(model, &spec, quad, fingerprint)?;
            match table.validate(model, quad, check.probes, check.seed, check.tol) {
                Ok(_) => return Ok(table),
                Err(Error::TableResolution(msg)) => {
                    let grow = |n: usize| if n == 1 { 1 } else { (n + n / 2) | 1 };
                    if spec.nodes_a.max(spec.nodes_b) >= check.max_nodes {
                        return Err(Error::TableResolution(format!(
                            "{msg} with {} x {} nodes",
                            spec.nodes_a, spec.nodes_b
                        )));
                    }
                    spec.nodes_a = grow(spec.nodes_a).min(check.max_nodes | 1);
                    spec.nodes_b = grow(spec.nodes_b).min(check.max_nodes | 1);
                }
                Err(e) => return Err(e),
            }
        }
    }

    /// Loads from `path` when the fingerprint matches, otherwise builds and saves.
    pub fn load_or_build(
        path: &Path,
        model: &KernelModel,
        spec: &TableSpec,
        quad: &TauQuadConfig,
        fingerprint: &str,
    ) -> Result<(Self, bool)> {
        if let Some(t) = Self::load(path, fingerprint)? {
            return Ok((t, true));
        }
        let t = Self::build(model, spec, quad, fingerprint)?;
        t.save(path)?;
        Ok((t, false))
    }
}

/// Largest relative difference over the ten kernel entries.
pub fn relative_gap(x: &KernelValues, y: &KernelValues) -> f64 {
    let xs = [x.f1, x.f2, x.f3, x.f4, x.g1, x.g2, x.h1, x.h2, x.det3, x.det4];
    let ys = [y.f1, y.f2, y.f3, y.f4, y.g1, y.g2, y.h1, y.h2, y.det3, y.det4];
    xs.iter()
        .zip(&ys)
        .map(|(a, b)| {
            let s = a.abs().max(b.abs());
            if s == 0.0 {
                0.0
            } else {
                (a - b).abs() / s
            }
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::derive_scales;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn fig3() -> KernelModel {
        let beam = BeamParams::new(0.01, 1.29e7).unwrap();
        let channel = ChannelParams::new(1e-14, 1e-3, 3e3).unwrap();
        KernelModel::new(beam, channel, derive_scales(&beam, &channel))
    }

    #[test]
    fn delta_r_examples() {
        assert_eq!(delta_r_tilde(0.0, 0.7, 0.02, Region::RegionI), 0.02);
        assert_eq!(delta_r_tilde(1.0, 0.5, 0.0, Region::RegionII), 1.0);
        assert_eq!(delta_r_tilde(0.01, 1.0, 0.02, Region::RegionI), 0.0);
        for (q, rho, region) in [(0.3, 0.1, Region::RegionI), (0.2, 0.0, Region::RegionII)] {
            let (a, b) = endpoints(q, rho, region);
            for tau in [0.0, 0.3, 1.0] {
                let d = delta_r_tilde(q, tau, rho, region);
                assert!((a + (b - a) * tau - d).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn brackets_at_zero_separation() {
        let m = fig3();
        let br = kernel_integrands(0.0, 0.4, &m.scales, &m.channel).unwrap();
        assert_eq!((br.b1, br.b2, br.b3, br.b4), (2.0, 2.0, 0.0, 0.0));
        assert_eq!(br.damping, 1.0);
        assert!(kernel_integrands(0.0, 1.5, &m.scales, &m.channel).is_err());
    }

    #[test]
    fn brackets_decay_at_large_separation() {
        let m = fig3();
        // Without the damping factor (beta = 0) the hypergeometric terms alone decay
        // like u^(-1/6); with it they go faster.
        let near = kernel_integrands(1.0, 0.9, &m.scales, &m.channel).unwrap();
        let far = kernel_integrands(1e3, 0.9, &m.scales, &m.channel).unwrap();
        assert!((far.b1 - 1.0).abs() < 0.05);
        assert!((far.b1 - 1.0).abs() < (near.b1 - 1.0).abs());
        assert!((far.b4 - 1.0).abs() < (near.b4 - 1.0).abs());
        let tail = |u: f64| specfun::gamma(1.0) / specfun::gamma(5.0 / 6.0) * u.powf(-1.0 / 6.0);
        let u = 1e6;
        let a = specfun::kummer_1f1(1.0 / 6.0, 1.0, -u).unwrap();
        assert_relative_eq!(a, tail(u), max_relative = 1e-5);
    }

    #[test]
    fn vacuum_kernels() {
        let beam = BeamParams::new(0.01, 1e7).unwrap();
        let channel = ChannelParams::new(0.0, 1e-3, 1e3).unwrap();
        let s = derive_scales(&beam, &channel);
        let kv = assemble_fgh(0.3, 0.1, Region::RegionI, &s, &beam, &channel, &TauQuadConfig::default()).unwrap();
        let fs = s.free_space2;
        assert_eq!(kv.f1, 0.25e-4 + fs);
        assert_eq!(kv.g2, fs);
        assert_eq!(kv.h1, fs);
        assert_relative_eq!(kv.det3, kv.f3 * kv.h1 - kv.g1 * kv.g1, max_relative = 1e-12);
        assert_eq!(kv, KernelValues::vacuum(&beam, &s));
    }

    #[test]
    fn zero_separation_integrals() {
        let m = fig3();
        let t = m.turbulent_parts(0.0, 0.0, &TauQuadConfig::oracle()).unwrap();
        let ak = m.scales.kernel_prefactor;
        assert_relative_eq!(t.phi()[0], 2.0 * ak / 3.0, max_relative = 1e-12);
        assert_relative_eq!(t.phi()[1], 2.0 * m.scales.rb2, max_relative = 1e-12);
        assert_eq!(t.phi()[2], 0.0);
        assert_eq!(t.phi()[3], 0.0);
        assert_eq!(t.gamma(), [0.0, 0.0]);
        assert_eq!(t.chi(), [0.0, 0.0]);
    }

    #[test]
    fn far_separation_limits() {
        let m = fig3();
        let ak = m.scales.kernel_prefactor;
        // Brackets approach one only algebraically, so the check is loose.
        let t = m.turbulent_parts(1e7, 1e7, &TauQuadConfig::default()).unwrap();
        for p in t.phi() {
            assert!((p / (ak / 3.0) - 1.0).abs() < 0.02, "{p}");
        }
        for g in t.gamma() {
            assert!((g / (ak / 2.0) - 1.0).abs() < 0.02);
        }
        for c in t.chi() {
            assert!((c / ak - 1.0).abs() < 0.02);
        }
    }

    #[test]
    fn kernels_within_bounds() {
        let m = fig3();
        let ak = m.scales.kernel_prefactor;
        for &(q, rho) in &[(0.0, 0.0), (1e-3, 0.0), (0.05, 0.02), (-0.3, 0.1), (2.0, 1.0)] {
            for region in [Region::RegionI, Region::RegionII] {
                let (a, b) = endpoints(q, rho, region);
                let t = m.turbulent_parts(a, b, &TauQuadConfig::default()).unwrap();
                for v in t.0[..8].iter() {
                    assert!(*v >= -1e-15 && *v <= 2.0 * ak * (1.0 + 1e-9), "{v}");
                }
                m.assemble(q, rho, region, &TauQuadConfig::default()).unwrap();
            }
        }
    }

    #[test]
    fn depends_only_on_separation_profile() {
        let m = fig3();
        let cfg = TauQuadConfig::oracle();
        // Region (i) at rho = 0 and region (ii) trace the same |dr(tau)|.
        let x = m.assemble(0.07, 0.0, Region::RegionI, &cfg).unwrap();
        let y = m.assemble(0.07, 0.0, Region::RegionII, &cfg).unwrap();
        assert!(relative_gap(&x, &y) < 1e-12);
        // (rho, q) and (-rho, -q) mirror the profile.
        let x = m.assemble(0.05, 0.03, Region::RegionI, &cfg).unwrap();
        let y = m.assemble(-0.05, -0.03, Region::RegionI, &cfg).unwrap();
        assert!(relative_gap(&x, &y) < 1e-12);
    }

    #[test]
    fn g_integral_matches_corrected_brackets() {
        let l = 1e-3;
        for ratio in [0.0, 0.1, 0.2, 1.0, 2.0, 10.0, 20.0] {
            let dr = ratio * l;
            let u: f64 = dr * dr / (4.0 * l * l);
            let a = specfun::kummer_1f1(1.0 / 6.0, 1.0, -u).unwrap();
            let b = u / 12.0 * specfun::kummer_1f1(7.0 / 6.0, 3.0, -u).unwrap();
            let plus = g_integral_oracle(dr, l, GSign::Plus).unwrap();
            let minus = g_integral_oracle(dr, l, GSign::Minus).unwrap();
            assert_relative_eq!(plus, a + b, max_relative = 1e-8);
            assert_relative_eq!(minus, a - b, max_relative = 1e-8);
        }
        assert_relative_eq!(g_integral_oracle(0.0, 1.0, GSign::Plus).unwrap(), 1.0, max_relative = 1e-10);
    }

    #[test]
    fn printed_argument_misses_the_oracle() {
        let l = 1e-3;
        let dr = 20.0 * l;
        let u: f64 = 100.0;
        let a = specfun::kummer_1f1(1.0 / 6.0, 1.0, -u).unwrap();
        let b = u / 12.0 * specfun::kummer_1f1(7.0 / 6.0, 3.0, -4.0 * u).unwrap();
        let plus = g_integral_oracle(dr, l, GSign::Plus).unwrap();
        assert!(((a + b) / plus - 1.0).abs() > 0.05);
    }

    #[test]
    fn table_single_node_is_exact() {
        let m = fig3();
        let spec = TableSpec {
            a_max: 0.0,
            b_max: 0.0,
            nodes_a: 1,
            nodes_b: 1,
            scale: 1e-3,
            order: Interpolation::Cubic,
        };
        let cfg = TauQuadConfig::default();
        let t = KernelTable::build(&m, &spec, &cfg, "x").unwrap();
        assert_eq!(t.lookup(0.0, 0.0).unwrap(), m.assemble_endpoints(0.0, 0.0, &cfg).unwrap());
        assert!(matches!(t.lookup(0.1, 0.0), Err(Error::TableResolution(_))));
    }

    #[test]
    fn table_interpolates_and_round_trips() {
        let m = fig3();
        let cfg = TauQuadConfig::default();
        let spec = TableSpec {
            a_max: 0.5,
            b_max: 2.0,
            nodes_a: 33,
            nodes_b: 65,
            scale: m.channel.l0p,
            order: Interpolation::Cubic,
        };
        let t = KernelTable::build(&m, &spec, &cfg, "fp").unwrap();
        // Nodes are reproduced exactly, including mirrored ones.
        let (ga, gb) = t.grids();
        for &(i, j) in &[(16usize, 40usize), (20, 3), (5, 60)] {
            let direct = m.assemble_endpoints(ga[i], gb[j], &cfg).unwrap();
            assert!(relative_gap(&direct, &t.lookup(ga[i], gb[j]).unwrap()) < 1e-12);
        }
        let worst = t.validate(&m, &cfg, 16, 7, 1e-2).unwrap();
        assert!(worst < 1e-2);
        let coarse = t.clone().with_order(Interpolation::Linear);
        assert!(matches!(
            coarse.validate(&m, &cfg, 16, 7, 1e-9),
            Err(Error::TableResolution(_))
        ));
        assert!(matches!(t.lookup(0.0, 2.5), Err(Error::TableResolution(_))));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("k.txt");
        t.save(&path).unwrap();
        let back = KernelTable::load(&path, "fp").unwrap().unwrap();
        assert_eq!(back, t);
        assert!(KernelTable::load(&path, "other").unwrap().is_none());
        assert!(KernelTable::load(&dir.path().join("none"), "fp").unwrap().is_none());
        std::fs::write(&path, "garbage\n").unwrap();
        assert!(matches!(KernelTable::load(&path, "fp"), Err(Error::Cache(_))));
        let (rebuilt, hit) = KernelTable::load_or_build(&path.with_extension("b"), &m, &spec, &cfg, "fp").unwrap_or_else(|e| panic!("{e}"));
        assert!(!hit);
        assert_eq!(rebuilt, t);
    }

    #[test]
    fn lookups_near_zero_separation_stay_positive() {
        let beam = BeamParams::new(0.01, 1e7).unwrap();
        let channel = ChannelParams::new(2.5e-14, 1e-3, 20e3).unwrap();
        let m = KernelModel::new(beam, channel, derive_scales(&beam, &channel));
        let cfg = TauQuadConfig::default();
        let spec = TableSpec::radial(0.05, 129, m.channel.l0p);
        let t = KernelTable::build(&m, &spec, &cfg, "fp").unwrap();
        for k in 1..400 {
            let b = 1e-4 * k as f64 / 400.0;
            t.lookup(0.0, b).unwrap_or_else(|e| panic!("b = {b:e}: {e}"));
            t.lookup(0.0, -b).unwrap_or_else(|e| panic!("b = -{b:e}: {e}"));
        }
    }

    #[test]
    fn refined_table_meets_probe_tolerance() {
        let m = fig3();
        let cfg = TauQuadConfig::default();
        let spec = TableSpec {
            a_max: 0.3,
            b_max: 1.0,
            nodes_a: 33,
            nodes_b: 33,
            scale: m.channel.l0p,
            order: Interpolation::Cubic,
        };
        let check = ProbeCheck::default();
        let t = KernelTable::build_refined(&m, &spec, &cfg, "fp", &check).unwrap();
        assert!(t.dims().0 > 33);
        assert!(t.validate(&m, &cfg, 32, 99, 1e-4).is_ok());
        let capped = ProbeCheck { max_nodes: 33, ..check };
        assert!(matches!(
            KernelTable::build_refined(&m, &spec, &cfg, "fp", &capped),
            Err(Error::TableResolution(_))
        ));
    }

    #[test]
    fn tau_config_invariants() {
        assert!(TauQuadConfig::default().validate().is_ok());
        assert!(TauQuadConfig { rel_tol: 1e-3, ..Default::default() }.validate().is_err());
        assert!(TauQuadConfig { max_subdivisions: 8, ..Default::default() }.validate().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn brackets_bounded(dr in -5.0f64..5.0, tau in 0.0f64..=1.0) {
            let m = fig3();
            let br = kernel_integrands(dr, tau, &m.scales, &m.channel).unwrap();
            for b in [br.b1, br.b2, br.b3, br.b4] {
                prop_assert!((0.0..=2.0).contains(&b));
            }
        }

        #[test]
        fn mirrored_endpoints_agree(a in -0.2f64..0.2, b in -0.5f64..0.5) {
            let m = fig3();
            let cfg = TauQuadConfig::default();
            let x = m.turbulent_parts(a, b, &cfg).unwrap();
            let y = m.turbulent_parts(-a, -b, &cfg).unwrap();
            for k in 0..12 {
                prop_assert!((x.0[k] - y.0[k]).abs() <= 1e-12 * x.0[k].abs().max(1e-30));
            }
        }
    }
}
