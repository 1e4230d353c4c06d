//! Adaptive Gauss-Kronrod quadrature (7/15 pair) with a global error queue,
//! fixed Gauss-Legendre rules, and a Filon-type rule for smooth amplitudes times
//! exp(i omega x) or J0(kappa x).
//!
//! The vector-valued driver integrates several functions that share their
//! expensive sub-expressions in a single pass; intervals are refined according
//! to the component that is furthest from its own tolerance.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::specfun;

const XGK: [f64; 8] = [
    0.991_455_371_120_812_639_206_854_697_526_329,
    0.949_107_912_342_758_524_526_189_684_047_851,
    0.864_864_423_359_769_072_789_712_788_640_926,
    0.741_531_185_599_394_439_863_864_773_280_788,
    0.586_087_235_467_691_130_294_144_845_693_013,
    0.405_845_151_377_397_166_906_606_412_076_961,
    0.207_784_955_007_898_467_600_689_403_773_245,
    0.0,
];

const WGK: [f64; 8] = [
    0.022_935_322_010_529_224_963_732_008_058_970,
    0.063_092_092_629_978_553_290_700_663_189_204,
    0.104_790_010_322_250_183_839_876_322_541_518,
    0.140_653_259_715_525_918_745_189_590_510_238,
    0.169_004_726_639_267_902_826_583_426_598_550,
    0.190_350_578_064_785_409_913_256_402_421_014,
    0.204_432_940_075_298_892_414_161_999_234_649,
    0.209_482_141_084_727_828_012_999_174_891_714,
];

const WG: [f64; 4] = [
    0.129_484_966_168_869_693_270_611_432_679_082,
    0.279_705_391_489_276_667_901_467_771_423_780,
    0.381_830_050_505_118_944_950_369_775_488_975,
    0.417_959_183_673_469_387_755_102_040_816_327,
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub error: f64,
    pub evaluations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VecEstimate<const N: usize> {
    pub value: [f64; N],
    pub error: [f64; N],
    pub evaluations: usize,
}

struct Panel<const N: usize> {
    a: f64,
    b: f64,
    value: [f64; N],
    error: [f64; N],
    floor: [f64; N],
    priority: f64,
}

impl<const N: usize> PartialEq for Panel<N> {
    fn eq(&self, other: &Self) -> bool {
        self.priority == other.priority
    }
}
impl<const N: usize> Eq for Panel<N> {}
impl<const N: usize> PartialOrd for Panel<N> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<const N: usize> Ord for Panel<N> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.priority.total_cmp(&other.priority)
    }
}

type Rule<const N: usize> = ([f64; N], [f64; N], [f64; N]);

fn kronrod<const N: usize, F: FnMut(f64) -> [f64; N]>(f: &mut F, a: f64, b: f64) -> Rule<N> {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut gauss = [0.0; N];
    let mut kr = [0.0; N];
    let mut abs_sum = [0.0; N];
    for k in 0..N {
        kr[k] = WGK[7] * fc[k];
        gauss[k] = WG[3] * fc[k];
        abs_sum[k] = WGK[7] * fc[k].abs();
    }
    let mut samples = [[0.0; N]; 14];
    for j in 0..7 {
        let dx = h * XGK[j];
        let f1 = f(c - dx);
        let f2 = f(c + dx);
        for k in 0..N {
            kr[k] += WGK[j] * (f1[k] + f2[k]);
            abs_sum[k] += WGK[j] * (f1[k].abs() + f2[k].abs());
            if j % 2 == 1 {
                gauss[k] += WG[j / 2] * (f1[k] + f2[k]);
            }
        }
        samples[2 * j] = f1;
        samples[2 * j + 1] = f2;
    }
    let mut err = [0.0; N];
    let mut floors = [0.0; N];
    for k in 0..N {
        let mean = 0.5 * kr[k];
        let mut asc = WGK[7] * (fc[k] - mean).abs();
        for j in 0..7 {
            asc += WGK[j] * ((samples[2 * j][k] - mean).abs() + (samples[2 * j + 1][k] - mean).abs());
        }
        let asc = asc * h.abs();
        let raw = ((kr[k] - gauss[k]) * h).abs();
        let mut e = raw;
        if asc != 0.0 && raw != 0.0 {
            e = asc * (200.0 * raw / asc).powf(1.5).min(1.0);
        }
        let resabs = abs_sum[k] * h.abs();
        let floor = 50.0 * f64::EPSILON * resabs;
        if floor > e {
            e = floor;
        }
        kr[k] *= h;
        err[k] = e;
        floors[k] = floor;
    }
    (kr, err, floors)
}

// Rounding noise (the floor) cannot be removed by bisection, so only the
// excess over it counts toward refinement.
fn priority<const N: usize>(err: &[f64; N], floor: &[f64; N], total: &[f64; N], rel: f64, abs: f64) -> f64 {
    let mut p: f64 = 0.0;
    for k in 0..N {
        let tol = abs.max(rel * total[k].abs()).max(f64::MIN_POSITIVE);
        p = p.max((err[k] - floor[k]).max(0.0) / tol);
    }
    p
}

/// Integrates a vector-valued function over the union of consecutive
/// intervals given by `points` (at least two, strictly increasing or equal).
pub fn integrate_vec<const N: usize, F: FnMut(f64) -> [f64; N]>(
    mut f: F,
    points: &[f64],
    rel_tol: f64,
    abs_tol: f64,
    max_subdivisions: usize,
) -> Result<VecEstimate<N>> {
    if points.len() < 2 {
        return Err(Error::QuadratureFailure("need at least two points".into()));
    }
    let mut heap: BinaryHeap<Panel<N>> = BinaryHeap::new();
    let mut total = [0.0; N];
    let mut total_err = [0.0; N];
    let mut total_floor = [0.0; N];
    let mut evals = 0usize;
    let mut panels = Vec::new();
    for w in points.windows(2) {
        let (a, b) = (w[0], w[1]);
        if !(a.is_finite() && b.is_finite()) || b < a {
            return Err(Error::QuadratureFailure(format!("bad interval [{a}, {b}]")));
        }
        if b == a {
            continue;
        }
        let (v, e, fl) = kronrod(&mut f, a, b);
        evals += 15;
        for k in 0..N {
            total[k] += v[k];
            total_err[k] += e[k];
            total_floor[k] += fl[k];
        }
        panels.push((a, b, v, e, fl));
    }
    for (a, b, value, error, floor) in panels {
        let pr = priority(&error, &floor, &total, rel_tol, abs_tol);
        heap.push(Panel {
            a,
            b,
            value,
            error,
            floor,
            priority: pr,
        });
    }
    let converged = |total: &[f64; N], err: &[f64; N], floor: &[f64; N]| {
        (0..N).all(|k| err[k] - floor[k] <= abs_tol.max(rel_tol * total[k].abs()))
    };
    let mut count = heap.len();
    while !converged(&total, &total_err, &total_floor) {
        let Some(worst) = heap.pop() else { break };
        if worst.priority == 0.0 {
            heap.push(worst);
            break;
        }
        if count >= max_subdivisions {
            return Err(Error::QuadratureFailure(format!(
                "{} subdivisions exhausted on [{}, {}]; error {:e} against value {:e}",
                max_subdivisions,
                points[0],
                points[points.len() - 1],
                total_err.iter().cloned().fold(0.0, f64::max),
                total.iter().map(|v| v.abs()).fold(0.0, f64::max),
            )));
        }
        let mid = 0.5 * (worst.a + worst.b);
        if !(mid > worst.a && mid < worst.b) {
            return Err(Error::QuadratureFailure(format!(
                "interval [{}, {}] cannot be refined further",
                worst.a, worst.b
            )));
        }
        let (v1, e1, f1) = kronrod(&mut f, worst.a, mid);
        let (v2, e2, f2) = kronrod(&mut f, mid, worst.b);
        evals += 30;
        count += 1;
        for k in 0..N {
            total[k] += v1[k] + v2[k] - worst.value[k];
            total_err[k] += e1[k] + e2[k] - worst.error[k];
            total_floor[k] += f1[k] + f2[k] - worst.floor[k];
        }
        heap.push(Panel {
            a: worst.a,
            b: mid,
            value: v1,
            error: e1,
            floor: f1,
            priority: priority(&e1, &f1, &total, rel_tol, abs_tol),
        });
        heap.push(Panel {
            a: mid,
            b: worst.b,
            value: v2,
            error: e2,
            floor: f2,
            priority: priority(&e2, &f2, &total, rel_tol, abs_tol),
        });
    }
    // Re-sum to shed the drift of the running totals.
    let mut value = [0.0; N];
    let mut error = [0.0; N];
    for p in heap.iter() {
        for k in 0..N {
            value[k] += p.value[k];
            error[k] += p.error[k];
        }
    }
    Ok(VecEstimate {
        value,
        error,
        evaluations: evals,
    })
}

pub fn integrate_points<F: FnMut(f64) -> f64>(
    mut f: F,
    points: &[f64],
    rel_tol: f64,
    abs_tol: f64,
    max_subdivisions: usize,
) -> Result<Estimate> {
    let est = integrate_vec(|x| [f(x)], points, rel_tol, abs_tol, max_subdivisions)?;
    Ok(Estimate {
        value: est.value[0],
        error: est.error[0],
        evaluations: est.evaluations,
    })
}

pub fn integrate<F: FnMut(f64) -> f64>(
    f: F,
    a: f64,
    b: f64,
    rel_tol: f64,
    abs_tol: f64,
    max_subdivisions: usize,
) -> Result<Estimate> {
    integrate_points(f, &[a, b], rel_tol, abs_tol, max_subdivisions)
}

/// Nodes and weights of the n-point Gauss-Legendre rule on [-1, 1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n > 0, "rule needs at least one node");
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = (n + 1) / 2;
    for i in 0..m {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let mut p0 = 1.0;
            let mut p1 = 0.0;
            for j in 0..n {
                let p2 = p1;
                p1 = p0;
                p0 = ((2 * j + 1) as f64 * z * p1 - j as f64 * p2) / (j + 1) as f64;
            }
            dp = n as f64 * (z * p0 - p1) / (z * z - 1.0);
            let dz = p0 / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        let wi = 2.0 / ((1.0 - z * z) * dp * dp);
        w[i] = wi;
        w[n - 1 - i] = wi;
    }
    if n % 2 == 1 {
        x[n / 2] = 0.0;
    }
    (x, w)
}

/// A Gauss-Legendre rule mapped onto [a, b].
#[derive(Debug, Clone)]
pub struct FixedRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl FixedRule {
    pub fn new(n: usize, a: f64, b: f64) -> Self {
        let (x, w) = gauss_legendre(n);
        let c = 0.5 * (a + b);
        let h = 0.5 * (b - a);
        Self {
            nodes: x.iter().map(|t| c + h * t).collect(),
            weights: w.iter().map(|wi| h * wi).collect(),
        }
    }

    pub fn apply<F: FnMut(f64) -> f64>(&self, mut f: F) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(x))
            .sum()
    }
}

/// Chebyshev coefficients of the interpolant through `values` sampled at the
/// Lobatto points cos(pi j / n), j = 0..=n.
pub fn chebyshev_coefficients(values: &[f64]) -> Vec<f64> {
    let n = values.len() - 1;
    if n == 0 {
        return values.to_vec();
    }
    let nf = n as f64;
    let mut c = vec![0.0; n + 1];
    for (k, ck) in c.iter_mut().enumerate() {
        let mut sum = 0.0;
        for (j, &v) in values.iter().enumerate() {
            let w = if j == 0 || j == n { 0.5 } else { 1.0 };
            sum += w * v * (std::f64::consts::PI * (j * k) as f64 / nf).cos();
        }
        *ck = 2.0 * sum / nf;
    }
    c[0] *= 0.5;
    c[n] *= 0.5;
    c
}

pub fn chebyshev_points(n: usize) -> Vec<f64> {
    if n == 0 {
        return vec![0.0];
    }
    (0..=n)
        .map(|j| (std::f64::consts::PI * j as f64 / n as f64).cos())
        .collect()
}

/// Clenshaw evaluation of sum c_k T_k(t).
pub fn clenshaw(c: &[f64], t: f64) -> f64 {
    let mut b1 = 0.0;
    let mut b2 = 0.0;
    for &ck in c.iter().skip(1).rev() {
        let b0 = 2.0 * t * b1 - b2 + ck;
        b2 = b1;
        b1 = b0;
    }
    t * b1 - b2 + c.first().copied().unwrap_or(0.0)
}

fn legendre_rule(m: usize) -> &'static (Vec<f64>, Vec<f64>) {
    const MAX: usize = 1024;
    static RULES: OnceLock<Vec<OnceLock<(Vec<f64>, Vec<f64>)>>> = OnceLock::new();
    let rules = RULES.get_or_init(|| (0..=MAX).map(|_| OnceLock::new()).collect());
    rules[m.clamp(1, MAX)].get_or_init(|| gauss_legendre(m.clamp(1, MAX)))
}

/// Int_{-1}^{1} p(t) exp(i theta t) dt for the Chebyshev series p, returned as
/// (real, imaginary). Exact up to rounding: Gauss-Legendre with enough nodes for
/// moderate theta, integration by parts once theta exceeds the squared degree.
/// `nodes_per_period` sets the Gauss-Legendre density on the oscillation.
pub fn chebyshev_fourier(c: &[f64], theta: f64, nodes_per_period: usize) -> (f64, f64) {
    let n = c.len().saturating_sub(1);
    if theta.abs() > ((n * n).max(4)) as f64 {
        return by_parts(c, theta);
    }
    let periods = theta.abs() / std::f64::consts::PI;
    let m = (n as f64 / 2.0 + periods * nodes_per_period.max(2) as f64 / 2.0).ceil() as usize + 16;
    let (x, w) = legendre_rule(m);
    let (mut re, mut im) = (0.0, 0.0);
    for (&t, &wt) in x.iter().zip(w) {
        let p = wt * clenshaw(c, t);
        let (s, co) = (theta * t).sin_cos();
        re += p * co;
        im += p * s;
    }
    (re, im)
}

fn by_parts(c: &[f64], theta: f64) -> (f64, f64) {
    // Int p e^{i theta t} = sum_k (-1)^k [p^(k) e^{i theta t}]_{-1}^{1} / (i theta)^(k+1)
    let n = c.len() - 1;
    let (s, co) = theta.sin_cos();
    let (mut re, mut im) = (0.0, 0.0);
    // 1 / (i theta)^(k+1) as a complex number, updated by multiplying with -i/theta.
    let (mut fr, mut fi) = (0.0, -1.0 / theta);
    for k in 0..=n {
        let mut up = 0.0;
        let mut dn = 0.0;
        for (m, &cm) in c.iter().enumerate() {
            if m < k {
                continue;
            }
            let mut d = 1.0;
            for j in 0..k {
                d *= ((m * m - j * j) as f64) / (2 * j + 1) as f64;
            }
            up += cm * d;
            dn += if (m + k) % 2 == 0 { cm * d } else { -cm * d };
        }
        // bracket = up e^{i theta} - dn e^{-i theta}
        let br = (up - dn) * co;
        let bi = (up + dn) * s;
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        re += sign * (fr * br - fi * bi);
        im += sign * (fr * bi + fi * br);
        let (nr, ni) = (fi / theta, -fr / theta);
        fr = nr;
        fi = ni;
    }
    (re, im)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OscillatoryConfig {
    /// Chebyshev degree per panel.
    pub degree: usize,
    /// Tolerance relative to the integral of |amplitude|.
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_panels: usize,
    /// Quadrature nodes per oscillation period when a panel is not in the
    /// integration-by-parts regime.
    pub nodes_per_period: usize,
}

impl Default for OscillatoryConfig {
    fn default() -> Self {
        Self {
            degree: 16,
            rel_tol: 1e-9,
            abs_tol: 0.0,
            max_panels: 4000,
            nodes_per_period: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OscEstimate {
    pub re: f64,
    pub im: f64,
    pub error: f64,
    /// Approximate Int |amplitude|.
    pub mass: f64,
    pub panels: usize,
}

struct ChebPanel {
    a: f64,
    b: f64,
    re: Vec<f64>,
    im: Vec<f64>,
    err: f64,
    mass: f64,
}

impl PartialEq for ChebPanel {
    fn eq(&self, other: &Self) -> bool {
        self.err == other.err
    }
}
impl Eq for ChebPanel {}
impl PartialOrd for ChebPanel {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for ChebPanel {
    fn cmp(&self, other: &Self) -> Ordering {
        self.err.total_cmp(&other.err)
    }
}

fn cheb_panel<F: FnMut(f64) -> [f64; 2]>(f: &mut F, a: f64, b: f64, nodes: &[f64]) -> ChebPanel {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let mut vr = Vec::with_capacity(nodes.len());
    let mut vi = Vec::with_capacity(nodes.len());
    let mut peak: f64 = 0.0;
    for &t in nodes {
        let [r, i] = f(c + h * t);
        peak = peak.max(r.abs() + i.abs());
        vr.push(r);
        vi.push(i);
    }
    let re = chebyshev_coefficients(&vr);
    let im = chebyshev_coefficients(&vi);
    let n = re.len();
    let tail = |v: &[f64]| v[n.saturating_sub(3)..].iter().map(|x| x.abs()).sum::<f64>();
    let nan = !peak.is_finite();
    ChebPanel {
        a,
        b,
        err: if nan { f64::INFINITY } else { 2.0 * h * (tail(&re) + tail(&im)) },
        mass: 2.0 * h * peak,
        re,
        im,
    }
}

/// Int_points f(x) exp(i omega x) dx for a smooth complex amplitude f = [re, im].
/// Panels are split until every amplitude is resolved by its Chebyshev series;
/// each panel is then integrated exactly against the exponential.
pub fn integrate_oscillatory<F: FnMut(f64) -> [f64; 2]>(
    mut f: F,
    omega: f64,
    points: &[f64],
    cfg: &OscillatoryConfig,
) -> Result<OscEstimate> {
    if points.len() < 2 || points.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::invalid("oscillatory integration needs increasing breakpoints"));
    }
    let nodes = chebyshev_points(cfg.degree.max(4));
    let mut heap: BinaryHeap<ChebPanel> = points
        .windows(2)
        .map(|w| cheb_panel(&mut f, w[0], w[1], &nodes))
        .collect();
    loop {
        let (err, mass) = heap.iter().fold((0.0, 0.0), |(e, m), p| (e + p.err, m + p.mass));
        if !err.is_finite() && heap.peek().map(|p| p.b - p.a < 1e-12 * p.b.abs().max(1e-300)).unwrap_or(false) {
            return Err(Error::QuadratureFailure("non-finite amplitude".into()));
        }
        if err <= cfg.abs_tol.max(cfg.rel_tol * mass) {
            let (mut re, mut im) = (0.0, 0.0);
            for p in heap.iter() {
                let c = 0.5 * (p.a + p.b);
                let h = 0.5 * (p.b - p.a);
                let theta = omega * h;
                // Int f e^{i w x} = h e^{i w c} Int_{-1}^{1} p(t) e^{i theta t} dt
                let (rr, ri) = chebyshev_fourier(&p.re, theta, cfg.nodes_per_period);
                let (ir, ii) = chebyshev_fourier(&p.im, theta, cfg.nodes_per_period);
                let (jr, ji) = (rr - ii, ri + ir);
                let (s, co) = (omega * c).sin_cos();
                re += h * (jr * co - ji * s);
                im += h * (jr * s + ji * co);
            }
            return Ok(OscEstimate {
                re,
                im,
                error: err,
                mass,
                panels: heap.len(),
            });
        }
        if heap.len() >= cfg.max_panels {
            return Err(Error::OscillationResolution(format!(
                "amplitude unresolved with {} panels (error {err:e}, scale {mass:e})",
                heap.len()
            )));
        }
        let worst = heap.pop().expect("nonempty");
        let mid = 0.5 * (worst.a + worst.b);
        if !(mid > worst.a && mid < worst.b) {
            return Err(Error::QuadratureFailure(format!("panel at {:e} cannot be split", worst.a)));
        }
        heap.push(cheb_panel(&mut f, worst.a, mid, &nodes));
        heap.push(cheb_panel(&mut f, mid, worst.b, &nodes));
    }
}

/// Int_points f(x) J0(kappa x) dx, x >= 0. Below kappa x = 25 the Bessel factor
/// is folded into the amplitude; above it the Hankel expansion turns the
/// integrand into a smooth amplitude times exp(i kappa x).
pub fn integrate_j0<F: FnMut(f64) -> f64>(
    mut f: F,
    kappa: f64,
    points: &[f64],
    cfg: &OscillatoryConfig,
) -> Result<OscEstimate> {
    let a = points.first().copied().unwrap_or(0.0);
    let b = points.last().copied().unwrap_or(0.0);
    if a < 0.0 {
        return Err(Error::invalid("J0 integration needs x >= 0"));
    }
    let kappa = kappa.abs();
    let split = if kappa > 0.0 { specfun::HANKEL_LIMIT / kappa } else { f64::INFINITY };
    let near: Vec<f64> = clip(points, a, split.min(b));
    let far: Vec<f64> = clip(points, split.max(a), b);
    let mut out = OscEstimate {
        re: 0.0,
        im: 0.0,
        error: 0.0,
        mass: 0.0,
        panels: 0,
    };
    if near.len() >= 2 {
        let e = integrate_oscillatory(|x| [f(x) * specfun::j0(kappa * x), 0.0], 0.0, &near, cfg)?;
        out.re += e.re;
        out.error += e.error;
        out.mass += e.mass;
        out.panels += e.panels;
    }
    if far.len() >= 2 {
        let e = integrate_oscillatory(
            |x| {
                let y = kappa * x;
                let (p, q) = specfun::hankel_pq(0, y);
                let amp = f(x) * (2.0 / (std::f64::consts::PI * y)).sqrt();
                [amp * p, amp * q]
            },
            kappa,
            &far,
            cfg,
        )?;
        // Re[(P + iQ) e^{i(y - pi/4)}] = P cos(y - pi/4) - Q sin(y - pi/4)
        let r = std::f64::consts::FRAC_1_SQRT_2;
        out.re += r * (e.re + e.im);
        out.error += e.error;
        out.mass += e.mass;
        out.panels += e.panels;
    }
    Ok(out)
}

fn clip(points: &[f64], lo: f64, hi: f64) -> Vec<f64> {
    if !(hi > lo) {
        return Vec::new();
    }
    let mut v = vec![lo];
    v.extend(points.iter().copied().filter(|&x| x > lo && x < hi));
    v.push(hi);
    v
}
