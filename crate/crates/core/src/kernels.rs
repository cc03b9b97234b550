//! Hard-sphere collision kernels: angular law, exact sampling of the
//! separation direction, the Povzner moment gap and a Lipschitz estimate.
//!
//! `B(v, dσ) = |v| b(v̂·σ) dσ̄` where `dσ̄` is the normalized uniform measure
//! on `S^{d-1}` and `b(cos θ) = c_d sin^{3-d}(θ/2)`. In polar form the angle
//! `θ` between `u` and `σ` has density proportional to
//! `sin(θ/2) cos^{d-2}(θ/2)` on `[0, π]`.

use std::f64::consts::PI;
use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{dot, norm_sq};
use crate::quadrature::{composite_rule, sphere_rule};
use crate::rng::gaussian_vec;

/// Grid size of tabulated polar-angle CDFs.
pub const DEFAULT_CDF_GRID: usize = 4096;

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("dimension {0} is below 2")]
    DimensionTooSmall(usize),
    #[error("unknown kernel name {0:?}")]
    UnknownKernel(String),
    #[error("direction has norm {0}, expected 1")]
    NonUnitDirection(f64),
    #[error("zero relative velocity: the pair rate vanishes and no direction exists")]
    ZeroRelativeVelocity,
    #[error("non-finite quadrature integrand at node {0}")]
    NonFiniteQuadrature(usize),
    #[error("beta must be positive, got {0}")]
    BadBeta(f64),
    #[error("exponent p must exceed 2 for this operation, got {0}")]
    BadExponent(f64),
    #[error("cache file {path}: {source}")]
    Cache { path: PathBuf, source: io::Error },
}

/// Tabulated CDF of the polar angle on a uniform grid of `[0, π]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PolarCdf {
    pub theta_step: f64,
    pub cdf: Vec<f64>,
    pub pdf: Vec<f64>,
}

impl PolarCdf {
    fn tabulate<F: Fn(f64) -> f64>(density: F, grid: usize) -> Self {
        let h = PI / grid as f64;
        let mut cdf = Vec::with_capacity(grid + 1);
        let mut pdf = Vec::with_capacity(grid + 1);
        let mut acc = 0.0;
        cdf.push(0.0);
        for i in 0..grid {
            let a = h * i as f64;
            acc += composite_rule(a, a + h, 1, 8).iter().map(|&(x, w)| w * density(x)).sum::<f64>();
            cdf.push(acc);
        }
        for i in 0..=grid {
            pdf.push(density(h * i as f64));
        }
        let z = acc;
        cdf.iter_mut().for_each(|c| *c /= z);
        pdf.iter_mut().for_each(|p| *p /= z);
        *cdf.last_mut().unwrap() = 1.0;
        Self { theta_step: h, cdf, pdf }
    }

    pub fn grid(&self) -> usize {
        self.cdf.len() - 1
    }

    /// Inverse CDF by cubic Hermite interpolation on the bracketing cell,
    /// solved with safeguarded Newton steps.
    pub fn invert(&self, u: f64) -> f64 {
        let u = u.clamp(0.0, 1.0);
        let i = match self.cdf.binary_search_by(|c| c.total_cmp(&u)) {
            Ok(i) => return self.theta_step * i as f64,
            Err(i) => i.clamp(1, self.grid()) - 1,
        };
        let h = self.theta_step;
        let (f0, f1) = (self.cdf[i], self.cdf[i + 1]);
        let (m0, m1) = (self.pdf[i] * h, self.pdf[i + 1] * h);
        let herm = |s: f64| {
            let s2 = s * s;
            let s3 = s2 * s;
            (2.0 * s3 - 3.0 * s2 + 1.0) * f0 + (s3 - 2.0 * s2 + s) * m0 + (-2.0 * s3 + 3.0 * s2) * f1 + (s3 - s2) * m1
        };
        let dherm = |s: f64| {
            let s2 = s * s;
            (6.0 * s2 - 6.0 * s) * f0 + (3.0 * s2 - 4.0 * s + 1.0) * m0 + (-6.0 * s2 + 6.0 * s) * f1 + (3.0 * s2 - 2.0 * s) * m1
        };
        let (mut lo, mut hi) = (0.0, 1.0);
        let mut s = if f1 > f0 { (u - f0) / (f1 - f0) } else { 0.5 };
        for _ in 0..30 {
            let r = herm(s) - u;
            if r.abs() < 1e-15 {
                break;
            }
            if r > 0.0 {
                hi = s;
            } else {
                lo = s;
            }
            let d = dherm(s);
            let next = s - r / d;
            s = if d > 0.0 && next > lo && next < hi { next } else { 0.5 * (lo + hi) };
        }
        h * (i as f64 + s)
    }

    const MAGIC: &'static [u8; 8] = b"KACCDF01";

    fn write_to(&self, path: &Path) -> io::Result<()> {
        let mut buf = Vec::with_capacity(16 + 16 * self.cdf.len());
        buf.extend_from_slice(Self::MAGIC);
        buf.extend_from_slice(&(self.grid() as u64).to_le_bytes());
        for x in self.cdf.iter().chain(&self.pdf) {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        let tmp = path.with_extension("tmp");
        fs::File::create(&tmp)?.write_all(&buf)?;
        fs::rename(tmp, path)
    }

    fn read_from(path: &Path, grid: usize) -> io::Result<Option<Self>> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        let n = grid + 1;
        if bytes.len() != 16 + 16 * n || &bytes[..8] != Self::MAGIC {
            return Ok(None);
        }
        if u64::from_le_bytes(bytes[8..16].try_into().unwrap()) != grid as u64 {
            return Ok(None);
        }
        let vals: Vec<f64> =
            bytes[16..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let (cdf, pdf) = vals.split_at(n);
        if cdf.iter().chain(pdf).any(|x| !x.is_finite()) {
            return Ok(None);
        }
        Ok(Some(Self { theta_step: PI / grid as f64, cdf: cdf.to_vec(), pdf: pdf.to_vec() }))
    }
}

/// Hard-sphere collision kernel in dimension `d`.
#[derive(Clone, Debug)]
pub struct CollisionKernel {
    pub d: usize,
    pub name: String,
    /// Normalizer `c_d` of the angular density against `dσ̄`.
    pub c_d: f64,
    /// Total-variation Lipschitz constant of `v ↦ B(v, ·)`; proved for
    /// `d = 3`, a numerical estimate otherwise.
    pub kappa: f64,
    pub kappa_is_estimate: bool,
    cdf: Option<PolarCdf>,
}

/// Unnormalized polar density `sin(θ/2) cos^{d-2}(θ/2)`.
fn polar_density(d: usize, theta: f64) -> f64 {
    (0.5 * theta).sin() * (0.5 * theta).cos().powi(d as i32 - 2)
}

impl CollisionKernel {
    pub fn hard_sphere(d: usize) -> Result<Self, KernelError> {
        Self::hard_sphere_with_grid(d, DEFAULT_CDF_GRID, None)
    }

    /// Builds the kernel, reading or writing the tabulated CDF under
    /// `cache_dir` when given.
    pub fn hard_sphere_with_grid(d: usize, grid: usize, cache_dir: Option<&Path>) -> Result<Self, KernelError> {
        if d < 2 {
            return Err(KernelError::DimensionTooSmall(d));
        }
        let name = format!("hard-sphere-d{d}");
        let c_d = hard_sphere_normalizer(d);
        let cdf = if d == 3 {
            None
        } else {
            Some(load_or_tabulate(&name, grid, cache_dir, |t| polar_density(d, t))?)
        };
        let mut k = Self { d, name, c_d, kappa: 1.0, kappa_is_estimate: false, cdf };
        if d != 3 {
            let mut rng = crate::rng::substream(0x6b61_7070_61, &[d as u64]);
            k.kappa = estimate_kappa(&k, 400, &mut rng).max(1.0);
            k.kappa_is_estimate = true;
        }
        Ok(k)
    }

    /// Parses names of the form `hard-sphere-d3`.
    pub fn from_name(name: &str) -> Result<Self, KernelError> {
        let d = name
            .strip_prefix("hard-sphere-d")
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| KernelError::UnknownKernel(name.to_string()))?;
        Self::hard_sphere(d)
    }

    /// Angular density `b(cos θ)` against the normalized uniform measure.
    pub fn angular_density(&self, cos_theta: f64) -> f64 {
        let s = ((1.0 - cos_theta.clamp(-1.0, 1.0)) * 0.5).sqrt();
        self.c_d * s.powi(3 - self.d as i32)
    }

    /// Total collision rate of a pair with relative velocity `w`.
    #[inline]
    pub fn rate(&self, w: &[f64]) -> f64 {
        norm_sq(w).sqrt()
    }

    /// Draws the polar angle `θ` between `u` and `σ`.
    pub fn sample_theta<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        match &self.cdf {
            None => (1.0 - 2.0 * u).clamp(-1.0, 1.0).acos(),
            Some(c) => c.invert(u),
        }
    }

    pub fn polar_cdf(&self) -> Option<&PolarCdf> {
        self.cdf.as_ref()
    }

    /// Quadrature rule for `∫ g(σ) B(u, dσ)/|B(u,·)|`.
    pub fn angular_rule(&self, n: usize) -> AngularRule {
        let polar: Vec<(f64, f64)> = if self.d == 3 {
            composite_rule(-1.0, 1.0, 1, n).into_iter().map(|(x, w)| (x, 0.5 * w)).collect()
        } else {
            let raw: Vec<(f64, f64)> = composite_rule(0.0, PI, 4, n)
                .into_iter()
                .map(|(t, w)| (t.cos(), w * polar_density(self.d, t)))
                .collect();
            let z: f64 = raw.iter().map(|p| p.1).sum();
            raw.into_iter().map(|(c, w)| (c, w / z)).collect()
        };
        let polar = polar.into_iter().map(|(c, w)| (c, (1.0 - c * c).max(0.0).sqrt(), w)).collect();
        AngularRule { d: self.d, polar, transverse: sphere_rule(self.d - 1, n) }
    }
}

fn load_or_tabulate<F: Fn(f64) -> f64>(
    name: &str,
    grid: usize,
    cache_dir: Option<&Path>,
    density: F,
) -> Result<PolarCdf, KernelError> {
    let Some(dir) = cache_dir else {
        return Ok(PolarCdf::tabulate(density, grid));
    };
    let path = dir.join(format!("{name}.g{grid}.cdf"));
    if path.exists() {
        match PolarCdf::read_from(&path, grid) {
            Ok(Some(c)) => return Ok(c),
            Ok(None) => {}
            Err(source) => return Err(KernelError::Cache { path, source }),
        }
    }
    let c = PolarCdf::tabulate(density, grid);
    fs::create_dir_all(dir).map_err(|source| KernelError::Cache { path: path.clone(), source })?;
    c.write_to(&path).map_err(|source| KernelError::Cache { path, source })?;
    Ok(c)
}

/// `c_d = 1 / ∫ sin^{3-d}(θ/2) dσ̄`, by quadrature in the polar angle.
pub fn hard_sphere_normalizer(d: usize) -> f64 {
    let rule = composite_rule(0.0, PI, 16, 16);
    let area: f64 = rule.iter().map(|&(t, w)| w * t.sin().powi(d as i32 - 2)).sum();
    let scale = 2f64.powi(d as i32 - 2);
    let mass: f64 = rule.iter().map(|&(t, w)| w * scale * polar_density(d, t)).sum();
    area / mass
}

/// Product rule over `σ = cos θ u + sin θ E ω` where `E` maps `R^{d-1}`
/// isometrically onto `u^⊥`.
#[derive(Clone, Debug)]
pub struct AngularRule {
    pub d: usize,
    /// `(cos θ, sin θ, weight)`.
    pub polar: Vec<(f64, f64, f64)>,
    pub transverse: Vec<(Vec<f64>, f64)>,
}

impl AngularRule {
    pub fn len(&self) -> usize {
        self.polar.len() * self.transverse.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Materializes the nodes for a given unit `u` as flat `d`-blocks.
    pub fn nodes(&self, u: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let d = self.d;
        let mut sig = Vec::with_capacity(self.len() * d);
        let mut wts = Vec::with_capacity(self.len());
        let mut lifted = vec![0.0; d];
        let mut e = vec![0.0; d];
        for (omega, wo) in &self.transverse {
            lifted[0] = 0.0;
            lifted[1..].copy_from_slice(omega);
            householder_to(u, &lifted, &mut e);
            for &(c, s, wp) in &self.polar {
                for k in 0..d {
                    sig.push(c * u[k] + s * e[k]);
                }
                wts.push(wp * wo);
            }
        }
        (sig, wts)
    }

    /// `Σ w g(σ)` over the nodes for `u`.
    pub fn integrate<F: FnMut(&[f64]) -> f64>(&self, u: &[f64], mut g: F) -> Result<f64, KernelError> {
        let (sig, wts) = self.nodes(u);
        let mut acc = 0.0;
        for (k, (s, w)) in sig.chunks_exact(self.d).zip(&wts).enumerate() {
            let y = g(s);
            if !y.is_finite() {
                return Err(KernelError::NonFiniteQuadrature(k));
            }
            acc += w * y;
        }
        Ok(acc)
    }
}

/// Applies the Householder reflection exchanging `e_1` and `u` to `x`.
fn householder_to(u: &[f64], x: &[f64], out: &mut [f64]) {
    let mut w2 = 0.0;
    let mut wx = 0.0;
    for k in 0..u.len() {
        let wk = if k == 0 { 1.0 - u[0] } else { -u[k] };
        w2 += wk * wk;
        wx += wk * x[k];
    }
    if w2 < 1e-300 {
        out.copy_from_slice(x);
        return;
    }
    let f = 2.0 * wx / w2;
    for k in 0..u.len() {
        let wk = if k == 0 { 1.0 - u[0] } else { -u[k] };
        out[k] = x[k] - f * wk;
    }
}

fn check_unit(u: &[f64]) -> Result<(), KernelError> {
    let n = norm_sq(u).sqrt();
    if (n - 1.0).abs() > 1e-12 {
        return Err(KernelError::NonUnitDirection(n));
    }
    Ok(())
}

/// Draws `σ ~ B(u, ·)/|B(u, ·)|` for a unit `u`.
pub fn sample_sigma<R: Rng + ?Sized>(k: &CollisionKernel, u: &[f64], rng: &mut R) -> Result<Vec<f64>, KernelError> {
    check_unit(u)?;
    Ok(sample_sigma_unchecked(k, u, rng))
}

/// [`sample_sigma`] for the direction of `v - v_*`.
pub fn sample_sigma_for_pair<R: Rng + ?Sized>(
    k: &CollisionKernel,
    v: &[f64],
    v_star: &[f64],
    rng: &mut R,
) -> Result<Vec<f64>, KernelError> {
    let w: Vec<f64> = v.iter().zip(v_star).map(|(a, b)| a - b).collect();
    let n = norm_sq(&w).sqrt();
    if n == 0.0 {
        return Err(KernelError::ZeroRelativeVelocity);
    }
    let u: Vec<f64> = w.iter().map(|x| x / n).collect();
    Ok(sample_sigma_unchecked(k, &u, rng))
}

pub fn sample_sigma_unchecked<R: Rng + ?Sized>(k: &CollisionKernel, u: &[f64], rng: &mut R) -> Vec<f64> {
    let mut out = vec![0.0; u.len()];
    sample_sigma_into(k, u, rng, &mut out);
    out
}

/// Writes a draw of `σ` into `out`. The transverse direction is a Gaussian
/// projected onto `u^⊥`, so no frame is built.
pub fn sample_sigma_into<R: Rng + ?Sized>(k: &CollisionKernel, u: &[f64], rng: &mut R, out: &mut [f64]) {
    let theta = k.sample_theta(rng);
    let (s, c) = theta.sin_cos();
    loop {
        let g = gaussian_vec(u.len(), rng);
        let gu = dot(&g, u);
        let mut n2 = 0.0;
        for i in 0..u.len() {
            out[i] = g[i] - gu * u[i];
            n2 += out[i] * out[i];
        }
        if n2 > 1e-20 {
            let inv = 1.0 / n2.sqrt();
            for i in 0..u.len() {
                out[i] = c * u[i] + s * out[i] * inv;
            }
            let r = norm_sq(out).sqrt();
            out.iter_mut().for_each(|x| *x /= r);
            return;
        }
    }
}

/// Povzner inequality evaluation at one pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PovznerReport {
    pub v: Vec<f64>,
    pub v_star: Vec<f64>,
    pub p: f64,
    pub beta: f64,
    pub lhs: f64,
    pub rhs_beta: f64,
    pub gap: f64,
}

/// `lhs = ∫ {|v'|^p + |v'_*|^p - |v|^p - |v_*|^p} B(u, dσ)` by quadrature and
/// `rhs = -β(|v|^p + |v_*|^p) + β^{-1}(|v||v_*|^{p-1} + |v|^{p-1}|v_*|)`.
///
/// `B(u, ·)` is the unit-speed kernel, so `lhs` is a spherical average.
pub fn povzner_gap(
    k: &CollisionKernel,
    v: &[f64],
    v_star: &[f64],
    p: f64,
    beta: f64,
    n_quad: usize,
) -> Result<PovznerReport, KernelError> {
    if !(beta > 0.0) {
        return Err(KernelError::BadBeta(beta));
    }
    let rule = k.angular_rule(n_quad);
    povzner_gap_with_rule(k, &rule, v, v_star, p, beta)
}

pub fn povzner_gap_with_rule(
    k: &CollisionKernel,
    rule: &AngularRule,
    v: &[f64],
    v_star: &[f64],
    p: f64,
    beta: f64,
) -> Result<PovznerReport, KernelError> {
    let d = k.d;
    let w: Vec<f64> = v.iter().zip(v_star).map(|(a, b)| a - b).collect();
    let r = norm_sq(&w).sqrt();
    if r == 0.0 {
        return Err(KernelError::ZeroRelativeVelocity);
    }
    let u: Vec<f64> = w.iter().map(|x| x / r).collect();
    let nv = norm_sq(v).sqrt();
    let ns = norm_sq(v_star).sqrt();
    let before = nv.powf(p) + ns.powf(p);
    let mut a = vec![0.0; d];
    let mut b = vec![0.0; d];
    let lhs = rule.integrate(&u, |sigma| {
        crate::model::collide_into(v, v_star, sigma, &mut a, &mut b);
        norm_sq(&a).powf(0.5 * p) + norm_sq(&b).powf(0.5 * p) - before
    })?;
    let rhs = -beta * before + (nv * ns.powf(p - 1.0) + nv.powf(p - 1.0) * ns) / beta;
    Ok(PovznerReport { v: v.to_vec(), v_star: v_star.to_vec(), p, beta, lhs, rhs_beta: rhs, gap: rhs - lhs })
}

/// Smallest constant with `(x²+y²)^{p/2} ≤ x^p + y^p + C(x y^{p-1} + x^{p-1} y)`
/// for all `x, y ≥ 0`. By homogeneity and symmetry this is the maximum over
/// `y ∈ (0, 1]` of `((1+y²)^{p/2} - 1 - y^p) / (y^{p-1} + y)`.
pub fn expansion_constant(p: f64) -> f64 {
    let g = |y: f64| ((1.0 + y * y).powf(0.5 * p) - 1.0 - y.powf(p)) / (y.powf(p - 1.0) + y);
    let n = 4000;
    let (mut best_y, mut best) = (1.0, g(1.0));
    for i in 1..=n {
        let y = i as f64 / n as f64;
        let val = g(y);
        if val > best {
            best = val;
            best_y = y;
        }
    }
    // Golden-section refinement around the grid maximizer.
    let (mut a, mut b) = ((best_y - 1.0 / n as f64).max(1e-9), (best_y + 1.0 / n as f64).min(1.0));
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..80 {
        let c = b - phi * (b - a);
        let e = a + phi * (b - a);
        if g(c) > g(e) {
            b = e;
        } else {
            a = c;
        }
    }
    best.max(g(0.5 * (a + b)))
}

/// The constructive Povzner constant.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PovznerBeta {
    pub p: f64,
    pub delta: f64,
    pub c_p: f64,
    pub beta: f64,
}

/// `∫ β(δ, t) B(u, dσ)` with `β(δ,t) = (1 - (1+δ)^{p+1}(t^{p/2} + (1-t)^{p/2}))^+ / 2`
/// and `t = (1 + u·σ)/2`.
pub fn povzner_angular_integral(k: &CollisionKernel, p: f64, delta: f64) -> f64 {
    let f = (1.0 + delta).powf(p + 1.0);
    let integrand = |theta: f64| {
        let t = 0.5 * (1.0 + theta.cos());
        0.5 * (1.0 - f * (t.powf(0.5 * p) + (1.0 - t).powf(0.5 * p))).max(0.0)
    };
    let rule = composite_rule(0.0, PI, 256, 8);
    let z: f64 = rule.iter().map(|&(t, w)| w * polar_density(k.d, t)).sum();
    rule.iter().map(|&(t, w)| w * polar_density(k.d, t) * integrand(t)).sum::<f64>() / z
}

/// `β(δ) = (δ/C(p)) ∧ ∫β(δ,t)B(u,dσ)`, maximized over `δ ∈ (0, 1]` by
/// bisection on the crossing of the increasing and decreasing branches.
pub fn povzner_beta(k: &CollisionKernel, p: f64) -> Result<PovznerBeta, KernelError> {
    if !(p > 2.0) {
        return Err(KernelError::BadExponent(p));
    }
    let c_p = expansion_constant(p);
    let h = |delta: f64| delta / c_p - povzner_angular_integral(k, p, delta);
    let delta = if h(1.0) <= 0.0 {
        1.0
    } else {
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if h(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    };
    let beta = (delta / c_p).min(povzner_angular_integral(k, p, delta));
    if !(beta > 0.0) {
        return Err(KernelError::BadBeta(beta));
    }
    Ok(PovznerBeta { p, delta, c_p, beta })
}

/// Lower estimate of `κ`: maximum over sampled velocity pairs of
/// `‖B(v,·) - B(v',·)‖_TV / |v - v'|`.
///
/// With `u = v̂`, `u' = v̂'` and `α` the angle between them, place `u = e_1`,
/// `u' = cos α e_1 + sin α e_2`; then `u'·σ = cos α cos θ + sin α sin θ ω_1`
/// and the TV norm is a two-dimensional integral over `(θ, ω_1)`.
pub fn estimate_kappa<R: Rng + ?Sized>(k: &CollisionKernel, n_pairs: usize, rng: &mut R) -> f64 {
    let d = k.d;
    let n_theta = 1000;
    let polar: Vec<(f64, f64, f64)> = {
        let h = PI / n_theta as f64;
        let raw: Vec<(f64, f64, f64)> = (0..n_theta)
            .map(|i| {
                let t = h * (i as f64 + 0.5);
                (t.cos(), t.sin(), t.sin().powi(d as i32 - 2))
            })
            .collect();
        let z: f64 = raw.iter().map(|x| x.2).sum();
        raw.into_iter().map(|(c, s, w)| (c, s, w / z)).collect()
    };
    let transverse: Vec<(f64, f64)> = if d == 2 {
        vec![(1.0, 0.5), (-1.0, 0.5)]
    } else {
        let m = 256;
        let raw: Vec<(f64, f64)> = (0..m)
            .map(|i| {
                let phi = PI * (i as f64 + 0.5) / m as f64;
                (phi.cos(), phi.sin().powi(d as i32 - 3))
            })
            .collect();
        let z: f64 = raw.iter().map(|x| x.1).sum();
        raw.into_iter().map(|(c, w)| (c, w / z)).collect()
    };
    let mut best: f64 = 0.0;
    for _ in 0..n_pairs {
        let r1 = 10f64.powf(rng.random_range(-1.0..1.0));
        let (r2, alpha) = if rng.random::<f64>() < 0.5 {
            (r1 * (1.0 + 0.2 * (rng.random::<f64>() - 0.5)), rng.random_range(0.0..0.3))
        } else {
            (10f64.powf(rng.random_range(-1.0..1.0)), rng.random_range(0.0..PI))
        };
        let dist = (r1 * r1 + r2 * r2 - 2.0 * r1 * r2 * alpha.cos()).max(0.0).sqrt();
        if dist < 1e-9 {
            continue;
        }
        let (sa, ca) = alpha.sin_cos();
        let mut tv = 0.0;
        for &(c, s, wp) in &polar {
            let b1 = r1 * k.angular_density(c);
            for &(o, wo) in &transverse {
                let c2 = ca * c + sa * s * o;
                tv += wp * wo * (b1 - r2 * k.angular_density(c2)).abs();
            }
        }
        best = best.max(tv / dist);
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::stats::{chi_square, ks_pvalue, ks_statistic, mean_stderr};

    #[test]
    fn normalizers_match_closed_forms() {
        assert!((hard_sphere_normalizer(3) - 1.0).abs() < 1e-12);
        assert!((hard_sphere_normalizer(2) - PI / 2.0).abs() < 1e-10);
        // c_d = S_d (d-1) / 2^{d-1} with S_d = ∫ sin^{d-2}.
        let s4 = PI / 2.0;
        assert!((hard_sphere_normalizer(4) - s4 * 3.0 / 8.0).abs() < 1e-10);
    }

    #[test]
    fn angular_density_integrates_to_one() {
        for d in [2, 3, 4] {
            let k = CollisionKernel::hard_sphere(d).unwrap();
            let u: Vec<f64> = (0..d).map(|i| if i == 0 { 1.0 } else { 0.0 }).collect();
            let rule = sphere_rule(d, [0, 0, 2000, 50, 40][d]);
            let m: f64 = rule.iter().map(|(s, w)| w * k.angular_density(dot(s, &u))).sum();
            assert!((m - 1.0).abs() < 1e-6, "d={d}: {m}");
        }
    }

    #[test]
    fn d3_kappa_is_one_and_rejects_d1() {
        let k = CollisionKernel::hard_sphere(3).unwrap();
        assert_eq!(k.kappa, 1.0);
        assert!(!k.kappa_is_estimate);
        assert!(matches!(CollisionKernel::hard_sphere(1), Err(KernelError::DimensionTooSmall(1))));
        assert!(CollisionKernel::from_name("hard-sphere-d2").is_ok());
        assert!(CollisionKernel::from_name("maxwell").is_err());
    }

    #[test]
    fn d3_sigma_is_uniform() {
        let k = CollisionKernel::hard_sphere(3).unwrap();
        let mut rng = stream(11, 0);
        let u = [0.6, 0.0, 0.8];
        let n = 100_000;
        let mut cos = Vec::with_capacity(n);
        let mut comps = vec![Vec::with_capacity(n); 3];
        for _ in 0..n {
            let s = sample_sigma(&k, &u, &mut rng).unwrap();
            assert!((norm_sq(&s) - 1.0).abs() < 1e-12);
            cos.push(dot(&s, &u));
            for i in 0..3 {
                comps[i].push(s[i]);
            }
        }
        let dks = ks_statistic(&cos[..10_000], |x| (0.5 * (x + 1.0)).clamp(0.0, 1.0));
        assert!(ks_pvalue(dks, 10_000) > 0.01);
        for c in &comps {
            let (m, se) = mean_stderr(c);
            assert!(m.abs() < 3.0 * se, "{m} {se}");
        }
        let (m, se) = mean_stderr(&cos);
        assert!(m.abs() < 3.0 * se);
    }

    #[test]
    fn d2_theta_matches_sine_half_angle_law() {
        let k = CollisionKernel::hard_sphere(2).unwrap();
        let mut rng = stream(12, 0);
        let u = [1.0, 0.0];
        let bins = 20;
        let mut counts = vec![0u64; bins];
        for _ in 0..100_000 {
            let s = sample_sigma(&k, &u, &mut rng).unwrap();
            let theta = dot(&s, &u).clamp(-1.0, 1.0).acos();
            counts[((theta / PI * bins as f64) as usize).min(bins - 1)] += 1;
        }
        // Closed form CDF of c_2 sin(θ/2) over the two half-circles: 1 - cos(θ/2).
        let probs: Vec<f64> = (0..bins)
            .map(|b| {
                let a = PI * b as f64 / bins as f64;
                let c = PI * (b + 1) as f64 / bins as f64;
                (0.5 * a).cos() - (0.5 * c).cos()
            })
            .collect();
        let (_, p) = chi_square(&counts, &probs);
        assert!(p > 0.001, "p = {p}");
    }

    #[test]
    fn tabulated_inverse_matches_closed_form() {
        // cos(θ/2) = (1-U)^{1/(d-1)} inverts the polar CDF exactly.
        for d in [2, 4, 5] {
            let k = CollisionKernel::hard_sphere(d).unwrap();
            let c = k.polar_cdf().unwrap();
            for i in 0..=200 {
                let u = i as f64 / 200.0;
                let exact = 2.0 * (1.0 - u).powf(1.0 / (d as f64 - 1.0)).acos();
                assert!((c.invert(u) - exact).abs() < 1e-7, "d={d} u={u}");
            }
        }
    }

    #[test]
    fn cdf_sidecar_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let a = CollisionKernel::hard_sphere_with_grid(2, 512, Some(dir.path())).unwrap();
        let path = dir.path().join("hard-sphere-d2.g512.cdf");
        assert!(path.exists());
        let b = CollisionKernel::hard_sphere_with_grid(2, 512, Some(dir.path())).unwrap();
        assert_eq!(a.polar_cdf(), b.polar_cdf());
        fs::write(&path, b"garbage").unwrap();
        let c = CollisionKernel::hard_sphere_with_grid(2, 512, Some(dir.path())).unwrap();
        assert_eq!(a.polar_cdf(), c.polar_cdf());
    }

    #[test]
    fn rotation_leaves_law_of_u_dot_sigma_unchanged() {
        let k = CollisionKernel::hard_sphere(2).unwrap();
        let mut rng = stream(13, 0);
        let draw = |u: [f64; 2], rng: &mut crate::rng::Stream| -> Vec<f64> {
            (0..20_000).map(|_| dot(&sample_sigma(&k, &u, rng).unwrap(), &u)).collect()
        };
        let a = draw([1.0, 0.0], &mut rng);
        let t: f64 = 1.1;
        let b = draw([t.cos(), t.sin()], &mut rng);
        for m in 1..=3 {
            let (ma, sa) = mean_stderr(&a.iter().map(|x| x.powi(m)).collect::<Vec<_>>());
            let (mb, sb) = mean_stderr(&b.iter().map(|x| x.powi(m)).collect::<Vec<_>>());
            assert!((ma - mb).abs() < 4.0 * (sa * sa + sb * sb).sqrt(), "moment {m}");
        }
    }

    #[test]
    fn rate_scales_linearly() {
        let k = CollisionKernel::hard_sphere(3).unwrap();
        let w = [0.3, -1.0, 2.0];
        let lam = 3.7;
        let w2: Vec<f64> = w.iter().map(|x| lam * x).collect();
        assert!((k.rate(&w2) - lam * k.rate(&w)).abs() < 1e-14);
    }

    #[test]
    fn expansion_constant_bounds() {
        // p = 4: the ratio is 2y²/(y³+y) = 2y/(1+y²), maximal at y = 1.
        assert!((expansion_constant(4.0) - 1.0).abs() < 1e-9);
        for p in [3.0, 6.0] {
            let c = expansion_constant(p);
            for i in 1..=1000 {
                let y = i as f64 / 1000.0;
                let lhs = (1.0 + y * y).powf(p / 2.0);
                assert!(lhs <= 1.0 + y.powf(p) + c * (y.powf(p - 1.0) + y) + 1e-12);
            }
        }
    }

    #[test]
    fn p2_integrand_vanishes() {
        for d in [2, 3] {
            let k = CollisionKernel::hard_sphere(d).unwrap();
            let v: Vec<f64> = (0..d).map(|i| 0.3 + i as f64).collect();
            let w: Vec<f64> = (0..d).map(|i| -0.7 * i as f64).collect();
            let r = povzner_gap(&k, &v, &w, 2.0, 1.0, 12).unwrap();
            assert!(r.lhs.abs() < 1e-8);
        }
    }

    #[test]
    fn head_on_gap_is_nonnegative() {
        let k = CollisionKernel::hard_sphere(3).unwrap();
        let b = povzner_beta(&k, 4.0).unwrap();
        assert!(b.beta > 0.0);
        let r = povzner_gap(&k, &[1.0, 0.0, 0.0], &[-1.0, 0.0, 0.0], 4.0, 0.05, 24).unwrap();
        assert!(r.gap >= 0.0);
        let hi = povzner_gap(&k, &[1.0, 0.0, 0.0], &[-1.0, 0.0, 0.0], 4.0, 0.05, 64).unwrap();
        assert!((hi.lhs - r.lhs).abs() < 1e-10);
        // Head-on unit pair: v' = σ, v'_* = -σ, so the integrand is 0.
        assert!(r.lhs.abs() < 1e-12);
        let r0 = povzner_gap(&k, &[1.5, 0.2, 0.0], &[0.0, 0.0, 0.0], 4.0, b.beta, 24).unwrap();
        assert!(r0.gap >= 0.0);
    }

    #[test]
    fn povzner_beta_rejects_p2() {
        let k = CollisionKernel::hard_sphere(3).unwrap();
        assert!(matches!(povzner_beta(&k, 2.0), Err(KernelError::BadExponent(_))));
    }

    #[test]
    fn kappa_estimates() {
        let k3 = CollisionKernel::hard_sphere(3).unwrap();
        let mut rng = stream(14, 0);
        let e3 = estimate_kappa(&k3, 300, &mut rng);
        assert!(e3 <= 1.0 + 1e-6 && e3 > 0.5, "{e3}");
        let k2 = CollisionKernel::hard_sphere(2).unwrap();
        let a = estimate_kappa(&k2, 400, &mut stream(15, 0));
        let b = estimate_kappa(&k2, 400, &mut stream(16, 0));
        assert!(a.is_finite() && a > 0.0);
        assert!((a - b).abs() / a < 0.05, "{a} {b}");
    }
}
