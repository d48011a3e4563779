//! Survival tails, the limit constant `K`, goodness of fit against the limit
//! densities and the local CLT diagnostic.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use itertools::Itertools;
use num_bigint::{BigInt, BigUint};
use num_traits::{One, Zero};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::distributions::{RandomStream, StepDistribution};
use crate::engine::{EstimateCI, Moments};
use crate::error::{Error, Result};
use crate::geometry::{in_weyl, vandermonde};
use crate::scalar::{ratio_to_f64, Real};

// ---------------------------------------------------------------- tail fit

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailFit {
    /// Slope of `log P` against `log(n sigma^2)`.
    pub exponent: f64,
    /// `P ~ prefactor * (n sigma^2)^exponent`.
    pub prefactor: f64,
    pub r_squared: f64,
    pub n_range: (u64, u64),
    pub exponent_stderr: f64,
    pub points_used: usize,
    /// Horizons dropped because the estimate was not positive.
    pub dropped: Vec<u64>,
    /// Exponent fitted on the top three quarters minus the reported one.
    pub sensitivity: Option<f64>,
}

impl TailFit {
    pub fn predict(&self, n: f64, sigma2: f64) -> f64 {
        self.prefactor * (n * sigma2).powf(self.exponent)
    }
}

struct Line {
    slope: f64,
    intercept: f64,
    r2: f64,
    slope_se: f64,
}

fn weighted_line(x: &[f64], y: &[f64], w: &[f64], absolute_weights: bool) -> Line {
    let sw: f64 = w.iter().sum();
    let mx = x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let my = y.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let sxx: f64 = x.iter().zip(w).map(|(a, b)| b * (a - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).zip(w).map(|((a, c), b)| b * (a - mx) * (c - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = x
        .iter()
        .zip(y)
        .zip(w)
        .map(|((a, c), b)| b * (c - intercept - slope * a).powi(2))
        .sum();
    let ss_tot: f64 = y.iter().zip(w).map(|(c, b)| b * (c - my).powi(2)).sum();
    let r2 = if ss_tot > 0.0 {
        (1.0 - ss_res / ss_tot).clamp(0.0, 1.0)
    } else {
        1.0
    };
    let m = x.len();
    let slope_se = if absolute_weights {
        (1.0 / sxx).sqrt()
    } else if m > 2 {
        (ss_res / (m - 2) as f64 / sxx).sqrt()
    } else {
        0.0
    };
    Line {
        slope,
        intercept,
        r2,
        slope_se,
    }
}

/// Weighted least squares of `log P` on `log(n sigma^2)` over the top half
/// of the horizon ladder.
pub fn tail_fit(points: &[(u64, EstimateCI)], sigma2: f64) -> Result<TailFit> {
    if !(sigma2 > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma^2 = {sigma2}")));
    }
    let mut pts: Vec<(u64, EstimateCI)> = points.to_vec();
    pts.sort_by_key(|p| p.0);
    let mut dropped = Vec::new();
    pts.retain(|(n, e)| {
        let keep = e.mean > 0.0 && *n > 0;
        if !keep {
            log::warn!("tail fit: dropping horizon {n} (estimate {})", e.mean);
            dropped.push(*n);
        }
        keep
    });
    if pts.len() < 2 {
        return Err(Error::Fit(format!("{} usable horizons, need at least 2", pts.len())));
    }
    let absolute = pts.iter().all(|(_, e)| e.stderr > 0.0);
    let fit_from = |start: usize| {
        let sel = &pts[start..];
        let x: Vec<f64> = sel.iter().map(|(n, _)| (*n as f64 * sigma2).ln()).collect();
        let y: Vec<f64> = sel.iter().map(|(_, e)| e.mean.ln()).collect();
        let w: Vec<f64> = sel
            .iter()
            .map(|(_, e)| if absolute { (e.mean / e.stderr).powi(2) } else { 1.0 })
            .collect();
        weighted_line(&x, &y, &w, absolute)
    };
    let m = pts.len();
    let half = m - m.div_ceil(2).max(2);
    let wide = m - (3 * m).div_ceil(4).max(2);
    let line = fit_from(half);
    let sensitivity = (wide != half).then(|| fit_from(wide).slope - line.slope);
    Ok(TailFit {
        exponent: line.slope,
        prefactor: line.intercept.exp(),
        r_squared: line.r2,
        n_range: (pts[half].0, pts[m - 1].0),
        exponent_stderr: line.slope_se,
        points_used: m - half,
        dropped,
        sensitivity,
    })
}

// ---------------------------------------------------------------- quadrature

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gk15<T: Real>(f: &dyn Fn(T) -> T, a: T, b: T) -> (T, T) {
    let c = T::from_f64(0.5).unwrap() * (a + b);
    let h = T::from_f64(0.5).unwrap() * (b - a);
    let fc = f(c);
    let mut kron = fc * T::from_f64(WGK[7]).unwrap();
    let mut gauss = fc * T::from_f64(WG[3]).unwrap();
    for i in 0..7 {
        let dx = h * T::from_f64(XGK[i]).unwrap();
        let s = f(c - dx) + f(c + dx);
        kron = kron + s * T::from_f64(WGK[i]).unwrap();
        if i % 2 == 1 {
            gauss = gauss + s * T::from_f64(WG[i / 2]).unwrap();
        }
    }
    (kron * h, ((kron - gauss) * h).abs())
}

fn adapt<T: Real>(f: &dyn Fn(T) -> T, a: T, b: T, whole: (T, T), tol: T, rel: T, depth: u32) -> T {
    let (k, err) = whole;
    if err <= tol.max(rel * k.abs()) || depth == 0 {
        return k;
    }
    let m = T::from_f64(0.5).unwrap() * (a + b);
    let half = T::from_f64(0.5).unwrap() * tol;
    let l = gk15(f, a, m);
    let r = gk15(f, m, b);
    adapt(f, a, m, l, half, rel, depth - 1) + adapt(f, m, b, r, half, rel, depth - 1)
}

/// Adaptive Gauss–Kronrod (7/15) quadrature of `f` over `[a, b]`.
pub fn integrate<T: Real>(f: &dyn Fn(T) -> T, a: T, b: T, abs_tol: T, rel_tol: T) -> T {
    let whole = gk15(f, a, b);
    adapt(f, a, b, whole, abs_tol, rel_tol, 40)
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for j in 2..=n {
                let p2 = ((2 * j - 1) as f64 * z * p1 - (j - 1) as f64 * p0) / j as f64;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 0 { 1.0 } else { p1 };
            let pm = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (z * pn - pm) / (z * z - 1.0);
            let dz = pn / dp;
            z -= dz;
            if dz.abs() < 1e-15 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

// ---------------------------------------------------------------- gap coordinates

/// Positions `(0, g_1, g_1 + g_2, ...)`.
pub fn positions_from_gaps(g: &[f64]) -> Vec<f64> {
    let mut y = Vec::with_capacity(g.len() + 1);
    y.push(0.0);
    for gi in g {
        y.push(y.last().unwrap() + gi);
    }
    y
}

/// `Delta^beta e^{-Q/2}` in gap coordinates, `Q = sum (y_i - mean)^2`.
fn gap_weight(g: &[f64], beta: u32) -> f64 {
    let y = positions_from_gaps(g);
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let q: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    vandermonde(&y).powi(beta as i32) * (-0.5 * q).exp()
}

/// Upper limit for each gap integral; the integrand is below `e^{-60}`
/// beyond it.
const GAP_MAX: f64 = 16.0;

fn nested_gap_integral(prefix: &mut Vec<f64>, remaining: usize, f: &dyn Fn(&[f64]) -> f64) -> f64 {
    if remaining == 0 {
        return f(prefix);
    }
    let cell = std::cell::RefCell::new(prefix.clone());
    let inner = |gi: f64| {
        let mut p = cell.borrow().clone();
        p.push(gi);
        nested_gap_integral(&mut p, remaining - 1, f)
    };
    let v = integrate(&inner, 0.0, GAP_MAX, 1e-14, 1e-10);
    drop(cell);
    v
}

/// `int_{g > 0} Delta(g)^beta e^{-Q(g)/2} dg` over the `k - 1` gaps.
pub fn gap_integral(k: usize, beta: u32) -> f64 {
    nested_gap_integral(&mut Vec::new(), k - 1, &|g| gap_weight(g, beta))
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|i| i as f64).product()
}

fn superfactorial(k: usize) -> f64 {
    (0..k).map(factorial).product()
}

fn check_k(k: usize) -> Result<()> {
    if !(2..=4).contains(&k) {
        return Err(Error::Unsupported(format!(
            "limit constants are implemented for k in 2..=4, got {k}"
        )));
    }
    Ok(())
}

/// `Z_beta = int_W e^{-|y|^2/2} |Delta(y)|^beta dy`.
pub fn normalizer(k: usize, beta: u32) -> Result<f64> {
    check_k(k)?;
    let centre = (2.0 * std::f64::consts::PI / k as f64).sqrt();
    Ok(centre * gap_integral(k, beta))
}

pub fn z1(k: usize) -> Result<f64> {
    normalizer(k, 1)
}

pub fn z2(k: usize) -> Result<f64> {
    normalizer(k, 2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KMethod {
    /// Nested adaptive quadrature in gap coordinates.
    GapQuadrature,
    /// Rank-1 Kronecker lattice mapped through the normal quantile,
    /// antisymmetrized to `E|Delta(Z)| / k!`.
    Qmc { points: u64 },
}

/// Default QMC size for `k >= 3`.
pub const QMC_POINTS: u64 = 1 << 22;

/// `K = (prod_{l<k} l!)^{-1} int_W (2 pi)^{-k/2} e^{-|y|^2/2} Delta(y) dy`.
pub fn constant_k(k: usize) -> Result<f64> {
    if k == 2 {
        constant_k_with(k, KMethod::GapQuadrature)
    } else {
        constant_k_with(k, KMethod::Qmc { points: QMC_POINTS })
    }
}

pub fn constant_k_with(k: usize, method: KMethod) -> Result<f64> {
    check_k(k)?;
    let two_pi = 2.0 * std::f64::consts::PI;
    match method {
        KMethod::GapQuadrature => Ok(z1(k)? / two_pi.powf(k as f64 / 2.0) / superfactorial(k)),
        KMethod::Qmc { points } => Ok(qmc_abs_vandermonde(k, points) / factorial(k) / superfactorial(k)),
    }
}

/// Generalized golden ratio: the positive root of `x^(d+1) = x + 1`.
fn kronecker_alpha(d: usize) -> Vec<f64> {
    let mut phi = 2.0f64;
    for _ in 0..100 {
        phi = (1.0 + phi).powf(1.0 / (d as f64 + 1.0));
    }
    (1..=d).map(|i| phi.powi(-(i as i32)).fract()).collect()
}

/// QMC estimate of `E|Delta(Z)|`, `Z` standard normal in `R^k`.
pub fn qmc_abs_vandermonde(k: usize, points: u64) -> f64 {
    let alpha = kronecker_alpha(k);
    let normal = Normal::standard();
    let m = crate::engine::par_fold(
        points,
        Moments::default,
        |j, acc| {
            let z: Vec<f64> = alpha
                .iter()
                .map(|a| normal.inverse_cdf((0.5 + (j + 1) as f64 * a).fract()))
                .collect();
            acc.push(vandermonde(&z).abs());
        },
        |a, b| a.merge(&b),
    );
    m.mean()
}

// ---------------------------------------------------------------- limit densities

/// Tabulated distribution function on `[0, GAP_MAX]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabulatedCdf {
    pub h: f64,
    pub cdf: Vec<f64>,
    /// Normalized density at the same nodes.
    pub pdf: Vec<f64>,
}

impl TabulatedCdf {
    pub fn from_density(h: f64, density: &[f64]) -> Self {
        let mut cdf = Vec::with_capacity(density.len());
        let mut acc = 0.0;
        cdf.push(0.0);
        for w in density.windows(2) {
            acc += 0.5 * h * (w[0] + w[1]);
            cdf.push(acc);
        }
        let total = acc;
        Self {
            h,
            cdf: cdf.iter().map(|c| c / total).collect(),
            pdf: density.iter().map(|d| d / total).collect(),
        }
    }

    pub fn eval(&self, g: f64) -> f64 {
        if g <= 0.0 {
            return 0.0;
        }
        let pos = g / self.h;
        let i = pos.floor() as usize;
        if i + 1 >= self.cdf.len() {
            return 1.0;
        }
        let f = pos - i as f64;
        self.cdf[i] * (1.0 - f) + self.cdf[i + 1] * f
    }

    /// `E[g^p]` by the trapezoid rule.
    pub fn moment(&self, p: i32) -> f64 {
        let n = self.pdf.len();
        (0..n)
            .map(|i| {
                let w = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
                w * self.h * (i as f64 * self.h).powi(p) * self.pdf[i]
            })
            .sum()
    }
}

/// Grid spacing of the gap marginal tables.
const MARGINAL_H: f64 = 0.01;

/// Density `Z^{-1} e^{-|y|^2/2} Delta(y)^beta` on W: `beta = 1` is the
/// endpoint law of walks conditioned on `tau > n`, `beta = 2` the Hermite
/// ensemble.
#[derive(Debug, Clone)]
pub struct LimitDensity {
    pub k: usize,
    pub beta: u32,
    pub z: f64,
}

impl LimitDensity {
    pub fn new(k: usize, beta: u32) -> Result<Self> {
        if beta != 1 && beta != 2 {
            return Err(Error::Unsupported(format!("beta = {beta}")));
        }
        Ok(Self {
            k,
            beta,
            z: normalizer(k, beta)?,
        })
    }

    pub fn endpoint(k: usize) -> Result<Self> {
        Self::new(k, 1)
    }

    pub fn hermite(k: usize) -> Result<Self> {
        Self::new(k, 2)
    }

    pub fn density<T: Real>(&self, y: &[T]) -> T {
        if !in_weyl(y) {
            return T::zero();
        }
        self.symmetric_density(y)
    }

    /// The permutation-symmetric extension `e^{-|y|^2/2} |Delta|^beta / Z`.
    pub fn symmetric_density<T: Real>(&self, y: &[T]) -> T {
        let sq = y.iter().fold(T::zero(), |a, &v| a + v * v);
        let d = vandermonde(y).abs().powi(self.beta as i32);
        d * (-T::from_f64(0.5).unwrap() * sq).exp() / T::from_f64(self.z).unwrap()
    }

    /// Marginal distribution of gap `i` (`y_{i+1} - y_i`).
    pub fn gap_cdf(&self, i: usize) -> TabulatedCdf {
        let others = self.k - 2;
        let beta = self.beta;
        let n = (GAP_MAX / MARGINAL_H).round() as usize;
        let density: Vec<f64> = (0..=n)
            .into_par_iter()
            .map(|j| {
                let gi = j as f64 * MARGINAL_H;
                nested_gap_integral(&mut Vec::new(), others, &|rest: &[f64]| {
                    let mut g = rest.to_vec();
                    g.insert(i, gi);
                    gap_weight(&g, beta)
                })
            })
            .collect();
        TabulatedCdf::from_density(MARGINAL_H, &density)
    }

    pub fn sampler(&self) -> EnvelopeSampler {
        EnvelopeSampler::new(vec![0.0; self.k], 1.0, self.beta as f64, true)
    }

    /// Unnormalized target `|Delta|^beta prod phi(y_i)` for [`EnvelopeSampler`].
    pub fn unnormalized(&self, y: &[f64]) -> f64 {
        let sq: f64 = y.iter().map(|v| v * v).sum();
        let log_phi = -0.5 * sq - 0.5 * self.k as f64 * (2.0 * std::f64::consts::PI).ln();
        vandermonde(y).abs().powi(self.beta as i32) * log_phi.exp()
    }

    /// `n` exact draws, produced in parallel chunks of fixed streams.
    pub fn sample(&self, n: usize, master_seed: u64, stream_offset: u64) -> Vec<Vec<f64>> {
        let s = self.sampler();
        s.sample_many(n, master_seed, stream_offset, &|y| self.unnormalized(y))
    }
}

/// Exact rejection sampler for densities bounded by
/// `Delta(y)^beta prod_i phi_t(y_i - x_i)` on W.
///
/// Proposals are `x + s sqrt(t) Z` with `s^2 = 2`; the envelope constant
/// uses `Delta(y) <= (sum_{i<j} (y_j - y_i)^2 / P)^{P/2}` with `P = k(k-1)/2`.
#[derive(Debug, Clone)]
pub struct EnvelopeSampler {
    centre: Vec<f64>,
    t: f64,
    scale2: f64,
    log_bound: f64,
    sort: bool,
}

/// Draws per stream in [`EnvelopeSampler::sample_many`].
const SAMPLES_PER_STREAM: usize = 4096;

impl EnvelopeSampler {
    /// `sort` folds proposals into W by sorting, valid when the target is
    /// permutation symmetric and the centre has equal coordinates.
    pub fn new(centre: Vec<f64>, t: f64, beta: f64, sort: bool) -> Self {
        let k = centre.len() as f64;
        let p = k * (k - 1.0) / 2.0;
        let scale2 = 2.0;
        let a = 1.0 - 1.0 / scale2;
        let sx: f64 = centre
            .iter()
            .tuple_combinations()
            .map(|(xi, xj)| (xj - xi).powi(2))
            .sum();
        let r2 = ((beta * p * k * t / a - sx) / k).max(0.0);
        let inner = 2.0 * (sx + k * r2) / p;
        let log_b = 0.5 * beta * p * inner.ln() - a * r2 / (2.0 * t);
        Self {
            centre,
            t,
            scale2,
            log_bound: 0.5 * k * scale2.ln() + log_b + 1e-9,
            sort,
        }
    }

    /// One draw; returns the sample and the number of proposals used.
    pub fn sample(&self, stream: &mut RandomStream, target: &dyn Fn(&[f64]) -> f64) -> (Vec<f64>, u64) {
        let sd = (self.scale2 * self.t).sqrt();
        let v = self.scale2 * self.t;
        let log_norm = -0.5 * (2.0 * std::f64::consts::PI * v).ln();
        let mut tries = 0;
        loop {
            tries += 1;
            let u: Vec<f64> = (0..self.centre.len()).map(|_| sd * stream.standard_normal()).collect();
            let mut y: Vec<f64> = self.centre.iter().zip(&u).map(|(x, d)| x + d).collect();
            if self.sort {
                y.sort_by(f64::total_cmp);
            } else if !in_weyl(&y) {
                continue;
            }
            let f = target(&y);
            if f <= 0.0 {
                continue;
            }
            // proposal density is evaluated at the unsorted draw
            let log_g: f64 = u.iter().map(|d| -d * d / (2.0 * v) + log_norm).sum();
            let accept = (f.ln() - self.log_bound - log_g).exp();
            debug_assert!(accept <= 1.0 + 1e-9, "envelope violated: {accept}");
            if stream.uniform() < accept {
                return (y, tries);
            }
        }
    }

    pub fn sample_many(
        &self,
        n: usize,
        master_seed: u64,
        stream_offset: u64,
        target: &(dyn Fn(&[f64]) -> f64 + Sync),
    ) -> Vec<Vec<f64>> {
        let chunks = n.div_ceil(SAMPLES_PER_STREAM);
        (0..chunks)
            .into_par_iter()
            .flat_map_iter(|c| {
                let mut stream = RandomStream::new(master_seed, stream_offset + c as u64);
                let len = SAMPLES_PER_STREAM.min(n - c * SAMPLES_PER_STREAM);
                (0..len).map(|_| self.sample(&mut stream, target).0).collect::<Vec<_>>()
            })
            .collect()
    }
}

// ---------------------------------------------------------------- binned reference

/// Grid for binned total variation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub lo: f64,
    pub hi: f64,
    pub width: f64,
}

impl Default for Grid {
    fn default() -> Self {
        Self {
            lo: -4.0,
            hi: 4.0,
            width: 0.25,
        }
    }
}

impl Grid {
    pub fn bins(&self) -> usize {
        ((self.hi - self.lo) / self.width).round() as usize
    }

    fn index(&self, v: f64) -> Option<usize> {
        let i = ((v - self.lo) / self.width).floor();
        (i >= 0.0 && (i as usize) < self.bins()).then_some(i as usize)
    }
}

/// Expected mass of every grid cell of `W` plus an overflow bin.
#[derive(Debug, Clone)]
pub struct BinnedReference {
    pub k: usize,
    pub grid: Grid,
    probs: Vec<f64>,
    cells: Vec<usize>,
    pub overflow: f64,
}

impl BinnedReference {
    /// `symmetric` must be the permutation-symmetric extension of the target
    /// density. Cells on the diagonal take the full-cube integral divided by
    /// the multiplicities of repeated bin indices.
    pub fn new(k: usize, grid: Grid, nodes: usize, symmetric: &(dyn Fn(&[f64]) -> f64 + Sync)) -> Self {
        let nb = grid.bins();
        let (xs, ws) = gauss_legendre(nodes);
        let half = grid.width / 2.0;
        let tuples: Vec<Vec<usize>> = (0..nb).combinations_with_replacement(k).collect();
        let masses: Vec<f64> = tuples
            .par_iter()
            .map(|idx| {
                let mut total = 0.0;
                let mut y = vec![0.0; k];
                for combo in (0..k).map(|_| 0..nodes).multi_cartesian_product() {
                    let mut w = 1.0;
                    for (d, &q) in combo.iter().enumerate() {
                        y[d] = grid.lo + (idx[d] as f64 + 0.5) * grid.width + half * xs[q];
                        w *= ws[q] * half;
                    }
                    total += w * symmetric(&y);
                }
                let mult: f64 = idx.iter().dedup_with_count().map(|(c, _)| factorial(c)).product();
                total / mult
            })
            .collect();
        let mut probs = vec![0.0; nb.pow(k as u32)];
        let mut cells = Vec::with_capacity(tuples.len());
        for (idx, m) in tuples.iter().zip(&masses) {
            let flat = Self::flat(nb, idx);
            probs[flat] = *m;
            cells.push(flat);
        }
        let inside: f64 = masses.iter().sum();
        Self {
            k,
            grid,
            probs,
            cells,
            overflow: (1.0 - inside).max(0.0),
        }
    }

    fn flat(nb: usize, idx: &[usize]) -> usize {
        idx.iter().rev().fold(0, |acc, &i| acc * nb + i)
    }

    pub fn cell_count(&self) -> usize {
        self.cells.len()
    }

    pub fn grid_mass(&self) -> f64 {
        1.0 - self.overflow
    }

    /// Cells with expected mass above `eps`.
    pub fn effective_cells(&self, eps: f64) -> usize {
        self.cells.iter().filter(|&&c| self.probs[c] > eps).count()
    }

    /// `1/2 sum |observed - expected|` over all cells and the overflow bin.
    pub fn total_variation(&self, samples: &[Vec<f64>]) -> f64 {
        let nb = self.grid.bins();
        let n = samples.len() as f64;
        let mut counts: HashMap<usize, u64> = HashMap::new();
        let mut over = 0u64;
        for y in samples {
            let idx: Option<Vec<usize>> = y.iter().map(|&v| self.grid.index(v)).collect();
            match idx {
                Some(idx) => *counts.entry(Self::flat(nb, &idx)).or_default() += 1,
                None => over += 1,
            }
        }
        let mut keys: Vec<_> = counts.into_iter().collect();
        keys.sort_unstable();
        let mut sum: f64 = self.cells.iter().map(|&c| self.probs[c]).sum();
        for (cell, c) in keys {
            let p = self.probs[cell];
            sum += (c as f64 / n - p).abs() - p;
        }
        sum += (over as f64 / n - self.overflow).abs();
        0.5 * sum
    }
}

// ---------------------------------------------------------------- KS

/// One-sample KS distance of `values` against `cdf`. With `width > 0` each
/// value is spread uniformly over `[v - width/2, v + width/2]` (the lattice
/// cell it represents) before comparing.
pub fn ks_statistic(values: &[f64], cdf: &dyn Fn(f64) -> f64, width: f64) -> f64 {
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let nf = n as f64;
    if width <= 0.0 {
        return v
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = cdf(x);
                (f - i as f64 / nf).max((i + 1) as f64 / nf - f)
            })
            .fold(0.0, f64::max);
    }
    let lower: Vec<f64> = v.iter().map(|x| x - width / 2.0).collect();
    let mut prefix = Vec::with_capacity(n + 1);
    prefix.push(0.0);
    for l in &lower {
        prefix.push(prefix.last().unwrap() + l);
    }
    let ecdf = |t: f64| {
        let full = lower.partition_point(|&l| l <= t - width);
        let part = lower.partition_point(|&l| l < t);
        let m = (part - full) as f64;
        let partial = (m * t - (prefix[part] - prefix[full])) / width;
        (full as f64 + partial) / nf
    };
    let mut points: Vec<f64> = lower.iter().flat_map(|&l| [l, l + width]).collect();
    points.sort_by(f64::total_cmp);
    points.dedup();
    let mids: Vec<f64> = points.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
    points
        .iter()
        .chain(&mids)
        .map(|&t| (ecdf(t) - cdf(t)).abs())
        .fold(0.0, f64::max)
}

/// Two-sample KS distance.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let t = a[i].min(b[j]);
        while i < a.len() && a[i] <= t {
            i += 1;
        }
        while j < b.len() && b[j] <= t {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Asymptotic Kolmogorov tail `P(D > d)` for effective sample size `n`.
pub fn kolmogorov_p(n: f64, d: f64) -> f64 {
    let sn = n.sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for j in 1..=100 {
        let term = (-2.0 * (j * j) as f64 * lambda * lambda).exp();
        sum += if j % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

// ---------------------------------------------------------------- goodness of fit

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GofOptions {
    /// Width of the lattice cell of one rescaled gap (0 for continuous data).
    pub lattice_width: f64,
    pub grid: Grid,
    pub nodes: usize,
}

impl Default for GofOptions {
    fn default() -> Self {
        Self {
            lattice_width: 0.0,
            grid: Grid::default(),
            nodes: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapMoments {
    pub mean: EstimateCI,
    pub second: EstimateCI,
    pub expected_mean: f64,
    pub expected_second: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GofReport {
    pub k: usize,
    pub n_samples: usize,
    pub ks_per_gap: Vec<f64>,
    pub ks_max: f64,
    pub ks_p_proxy: f64,
    pub tv: f64,
    pub tv_cells: usize,
    pub grid_mass: f64,
    pub underpowered: bool,
    pub gap_moments: Vec<GapMoments>,
}

/// Precomputed reference quantities for a density on W.
pub struct GofReference {
    pub k: usize,
    pub binned: BinnedReference,
    pub gap_cdfs: Vec<TabulatedCdf>,
}

impl GofReference {
    pub fn limit(density: &LimitDensity, opts: &GofOptions) -> Self {
        let k = density.k;
        let nodes = if k >= 4 { opts.nodes.min(4) } else { opts.nodes };
        Self {
            k,
            binned: BinnedReference::new(k, opts.grid, nodes, &|y| density.symmetric_density(y)),
            gap_cdfs: (0..k - 1).map(|i| density.gap_cdf(i)).collect(),
        }
    }

    /// Shared instance for the default grid.
    pub fn cached(k: usize, beta: u32) -> Result<Arc<GofReference>> {
        static CACHE: OnceLock<Mutex<HashMap<(usize, u32), Arc<GofReference>>>> = OnceLock::new();
        let cache = CACHE.get_or_init(Default::default);
        if let Some(r) = cache.lock().unwrap().get(&(k, beta)) {
            return Ok(r.clone());
        }
        let density = LimitDensity::new(k, beta)?;
        let r = Arc::new(Self::limit(&density, &GofOptions::default()));
        cache.lock().unwrap().insert((k, beta), r.clone());
        Ok(r)
    }

    pub fn evaluate(&self, samples: &[Vec<f64>], lattice_width: f64) -> Result<GofReport> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("no samples".into()));
        }
        if let Some(bad) = samples.iter().find(|y| y.len() != self.k || !in_weyl(y)) {
            return Err(Error::InvalidArgument(format!(
                "sample {bad:?} is not an ordered {}-vector",
                self.k
            )));
        }
        let n = samples.len();
        let mut ks_per_gap = Vec::with_capacity(self.k - 1);
        let mut gap_moments = Vec::with_capacity(self.k - 1);
        for (i, cdf) in self.gap_cdfs.iter().enumerate() {
            let mut gaps: Vec<f64> = samples.iter().map(|y| y[i + 1] - y[i]).collect();
            gaps.sort_by(f64::total_cmp);
            ks_per_gap.push(ks_statistic(&gaps, &|g| cdf.eval(g), lattice_width));
            let (mut m1, mut m2) = (Moments::default(), Moments::default());
            for g in &gaps {
                m1.push(*g);
                m2.push(g * g);
            }
            gap_moments.push(GapMoments {
                mean: m1.estimate(),
                second: m2.estimate(),
                expected_mean: cdf.moment(1),
                expected_second: cdf.moment(2),
            });
        }
        let ks_max = ks_per_gap.iter().copied().fold(0.0, f64::max);
        let mut sorted = samples.to_vec();
        sorted.sort_by(|a, b| {
            a.iter()
                .zip(b)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let effective = self.binned.effective_cells(1e-3).max(1);
        Ok(GofReport {
            k: self.k,
            n_samples: n,
            ks_p_proxy: kolmogorov_p(n as f64, ks_max),
            ks_per_gap,
            ks_max,
            tv: self.binned.total_variation(&sorted),
            tv_cells: self.binned.cell_count(),
            grid_mass: self.binned.grid_mass(),
            underpowered: n < 5 * effective,
            gap_moments,
        })
    }
}

/// Goodness of fit of rescaled survivor endpoints against
/// `Z_1^{-1} e^{-|y|^2/2} Delta(y)` on W.
pub fn endpoint_density_distance(samples: &[Vec<f64>], k: usize, lattice_width: f64) -> Result<GofReport> {
    GofReference::cached(k, 1)?.evaluate(samples, lattice_width)
}

/// Thresholds from replicate samples drawn from the reference density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GofCalibration {
    pub n_samples: usize,
    pub replicates: usize,
    pub quantile: f64,
    pub ks_threshold: f64,
    pub tv_threshold: f64,
}

fn quantile(mut v: Vec<f64>, q: f64) -> f64 {
    v.sort_by(f64::total_cmp);
    let idx = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len()) - 1;
    v[idx]
}

/// Calibrates KS and TV thresholds on `replicates` exact samples of size `n`.
pub fn calibrate(
    reference: &GofReference,
    density: &LimitDensity,
    n: usize,
    replicates: usize,
    q: f64,
    master_seed: u64,
) -> Result<GofCalibration> {
    let per = n.div_ceil(SAMPLES_PER_STREAM) as u64;
    let mut ks = Vec::with_capacity(replicates);
    let mut tv = Vec::with_capacity(replicates);
    for r in 0..replicates {
        let sample = density.sample(n, master_seed, r as u64 * per);
        let rep = reference.evaluate(&sample, 0.0)?;
        ks.push(rep.ks_max);
        tv.push(rep.tv);
    }
    Ok(GofCalibration {
        n_samples: n,
        replicates,
        quantile: q,
        ks_threshold: quantile(ks, q),
        tv_threshold: quantile(tv, q),
    })
}

// ---------------------------------------------------------------- local CLT

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LcltReport {
    pub n: u64,
    pub sup_deviation: f64,
    pub argmax_site: i64,
    /// Exact total mass of `p_n` as a fraction string (always `"1"`).
    pub total_mass: String,
    pub span: i64,
    pub sigma: f64,
}

/// Exact `n`-fold convolution: numerators over `d^n` starting at the
/// returned lowest site.
pub fn convolution_power(dist: &StepDistribution, n: u64) -> Result<(i64, Vec<BigUint>)> {
    let law = dist.require_lattice()?;
    let lo = law.sites[0];
    let hi = *law.sites.last().unwrap();
    let mut cur = vec![BigUint::one()];
    let mut next: Vec<BigUint> = Vec::new();
    let mut tmp = BigUint::zero();
    for _ in 0..n {
        let len = cur.len() + (hi - lo) as usize;
        next.resize(len, BigUint::zero());
        for v in next.iter_mut() {
            v.set_zero();
        }
        for (i, w) in cur.iter().enumerate() {
            if w.is_zero() {
                continue;
            }
            for (&s, &m) in law.sites.iter().zip(&law.numerators) {
                tmp.clone_from(w);
                tmp *= m;
                next[i + (s - lo) as usize] += &tmp;
            }
        }
        std::mem::swap(&mut cur, &mut next);
    }
    Ok((lo * n as i64, cur))
}

/// `sup_s |sqrt(n) sigma p_n(s) / alpha - phi(s / (sigma sqrt(n)))|` over
/// the lattice sites.
pub fn local_clt_deviation(dist: &StepDistribution, n: u64) -> Result<LcltReport> {
    let lat = dist
        .lattice
        .ok_or_else(|| Error::Unsupported("local CLT diagnostic needs a lattice law".into()))?;
    if !lat.is_aperiodic() {
        return Err(Error::Unsupported(format!(
            "law lives on {} + {}Z: the walk alternates between sublattices, so p_n has no \
             plain local CLT on the span lattice",
            lat.offset, lat.span
        )));
    }
    if n < 2 {
        return Err(Error::InvalidArgument("local CLT diagnostic needs n >= 2".into()));
    }
    let law = dist.require_lattice()?;
    let (lo, nums) = convolution_power(dist, n)?;
    let den = BigUint::from(law.denominator).pow(n as u32);
    let total: BigUint = nums.iter().sum();
    let total_mass = if total == den {
        "1".to_string()
    } else {
        format!("{total}/{den}")
    };
    let den_i = BigInt::from(den);
    let sigma = dist.sigma();
    let sn = (n as f64).sqrt();
    let alpha = lat.span as f64;
    let (sup, arg) = nums
        .par_iter()
        .enumerate()
        .filter_map(|(i, w)| {
            let s = lo + i as i64;
            (s.rem_euclid(lat.span) == 0).then(|| {
                let p = ratio_to_f64(&BigInt::from(w.clone()), &den_i);
                let z = s as f64 / (sigma * sn);
                let phi = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
                ((sn * sigma * p / alpha - phi).abs(), s)
            })
        })
        .reduce(
            || (0.0, 0),
            |a, b| if b.0 > a.0 || (b.0 == a.0 && b.1 < a.1) { b } else { a },
        );
    Ok(LcltReport {
        n,
        sup_deviation: sup,
        argmax_site: arg,
        total_mass,
        span: lat.span,
        sigma,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::{make_distribution, DistSpec};
    use statrs::function::gamma::gamma;

    /// `E|Delta(Z)|` for standard normal `Z` (Selberg/Mehta integral).
    fn abs_vandermonde_moment(k: usize) -> f64 {
        (1..=k).map(|j| gamma(1.0 + j as f64 / 2.0) / gamma(1.5)).product()
    }

    fn k_oracle(k: usize) -> f64 {
        abs_vandermonde_moment(k) / factorial(k) / superfactorial(k)
    }

    #[test]
    fn k2_closed_form() {
        let k = constant_k(2).unwrap();
        assert!((k - 1.0 / std::f64::consts::PI.sqrt()).abs() < 1e-10);
    }

    #[test]
    fn k3_quadrature_matches_selberg() {
        let q = constant_k_with(3, KMethod::GapQuadrature).unwrap();
        assert!((q - k_oracle(3)).abs() < 1e-9, "{q} vs {}", k_oracle(3));
    }

    #[test]
    fn hermite_normalizer_matches_factorial_product() {
        for k in 2..=3 {
            let two_pi = 2.0 * std::f64::consts::PI;
            let want = two_pi.powf(k as f64 / 2.0) * (1..=k).map(factorial).product::<f64>() / factorial(k);
            let got = z2(k).unwrap();
            assert!((got / want - 1.0).abs() < 1e-9, "k={k}: {got} vs {want}");
        }
    }

    #[test]
    fn unsupported_k() {
        assert!(matches!(constant_k(5), Err(Error::Unsupported(_))));
        assert!(matches!(constant_k(1), Err(Error::Unsupported(_))));
    }

    #[test]
    fn integrand_vanishes_on_boundary() {
        let d = LimitDensity::endpoint(3).unwrap();
        assert_eq!(d.symmetric_density(&[0.3, 0.3, 1.0]), 0.0);
        assert_eq!(d.density(&[1.0, 0.5, 2.0]), 0.0);
    }

    #[test]
    fn quadrature_handles_f32() {
        let v: f32 = integrate(&|x: f32| x * x, 0.0, 1.0, 1e-6, 1e-6);
        assert!((v - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let (x, w) = gauss_legendre(6);
        let s: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(10)).sum();
        assert!((s - 2.0 / 11.0).abs() < 1e-14);
        assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-14);
    }

    #[test]
    fn k2_gap_marginals_match_closed_forms() {
        let e = LimitDensity::endpoint(2).unwrap().gap_cdf(0);
        for g in [0.3, 1.0, 2.5, 4.0] {
            assert!((e.eval(g) - (1.0 - (-g * g / 4.0f64).exp())).abs() < 2e-5);
        }
        assert!((e.moment(1) - std::f64::consts::PI.sqrt()).abs() < 1e-4);
        let h = LimitDensity::hermite(2).unwrap().gap_cdf(0);
        assert!((h.moment(2) - 6.0).abs() < 1e-3);
        for g in [0.5, 2.0, 5.0] {
            let want = statrs::function::gamma::gamma_lr(1.5, g * g / 4.0);
            assert!((h.eval(g) - want).abs() < 2e-5);
        }
    }

    #[test]
    fn tail_fit_exact_power_law() {
        let pts: Vec<(u64, EstimateCI)> = (4..12)
            .map(|e| {
                let n = 1u64 << e;
                (n, EstimateCI::exact((n as f64).powf(-0.5)))
            })
            .collect();
        let fit = tail_fit(&pts, 1.0).unwrap();
        assert!((fit.exponent + 0.5).abs() < 1e-12);
        assert!((fit.prefactor - 1.0).abs() < 1e-10);
        assert!((fit.r_squared - 1.0).abs() < 1e-12);
        assert_eq!(fit.n_range, (256, 2048));
    }

    #[test]
    fn tail_fit_drops_zeros_and_rescales_time() {
        let mut pts: Vec<(u64, EstimateCI)> = (1..6)
            .map(|e| {
                let n = 10u64.pow(e);
                (n, EstimateCI::exact(3.0 * (2.0 * n as f64).powf(-1.5)))
            })
            .collect();
        pts.push((1_000_000, EstimateCI::exact(0.0)));
        let fit = tail_fit(&pts, 2.0).unwrap();
        assert_eq!(fit.dropped, vec![1_000_000]);
        assert!((fit.exponent + 1.5).abs() < 1e-12);
        assert!((fit.prefactor - 3.0).abs() < 1e-9);
        assert!(tail_fit(&pts[..1], 1.0).is_err());
    }

    #[test]
    fn ks_two_sample_identical_is_zero() {
        let a = vec![0.1, 0.4, 0.2, 0.9];
        assert_eq!(ks_two_sample(&a, &a), 0.0);
        assert_eq!(ks_two_sample(&[0.0, 1.0], &[2.0, 3.0]), 1.0);
    }

    #[test]
    fn smoothed_ks_of_uniform_cells_is_exact() {
        // one point per cell of width 0.1 spread over [0, 1] is exactly uniform
        let v: Vec<f64> = (0..10).map(|i| 0.05 + 0.1 * i as f64).collect();
        let d = ks_statistic(&v, &|t| t.clamp(0.0, 1.0), 0.1);
        assert!(d < 1e-12, "{d}");
        let raw = ks_statistic(&v, &|t| t.clamp(0.0, 1.0), 0.0);
        assert!((raw - 0.05).abs() < 1e-12);
    }

    #[test]
    fn kolmogorov_tail_values() {
        assert!((kolmogorov_p(1e12, 1.3581 / 1e6) - 0.05).abs() < 1e-3);
        assert_eq!(kolmogorov_p(100.0, 0.0), 1.0);
    }

    #[test]
    fn sampler_reproduces_limit_moments() {
        let d = LimitDensity::endpoint(2).unwrap();
        let s = d.sample(20_000, 3, 0);
        assert!(s.iter().all(|y| in_weyl(y)));
        let m = s.iter().map(|y| y[1] - y[0]).sum::<f64>() / s.len() as f64;
        let se = (4.0 - std::f64::consts::PI).sqrt() / (s.len() as f64).sqrt();
        assert!((m - std::f64::consts::PI.sqrt()).abs() < 4.0 * se, "{m}");
    }

    #[test]
    fn binned_reference_mass_is_nearly_one() {
        let d = LimitDensity::endpoint(2).unwrap();
        let r = BinnedReference::new(2, Grid::default(), 8, &|y| d.symmetric_density(y));
        assert!(r.grid_mass() > 0.99 && r.grid_mass() <= 1.0 + 1e-9);
        let h = LimitDensity::hermite(2).unwrap();
        let r = BinnedReference::new(2, Grid::default(), 8, &|y| h.symmetric_density(y));
        assert!(r.grid_mass() > 0.97 && r.grid_mass() <= 1.0 + 1e-9);
    }

    #[test]
    fn endpoint_report_edge_cases() {
        assert!(endpoint_density_distance(&[], 2, 0.0).is_err());
        let one = endpoint_density_distance(&[vec![0.0, 1.0]], 2, 0.0).unwrap();
        assert!(one.underpowered);
        assert!(one.ks_max.is_finite());
        assert!(endpoint_density_distance(&[vec![1.0, 0.0]], 2, 0.0).is_err());
    }

    #[test]
    fn lclt_lazy_and_periodic() {
        let lazy = make_distribution(&DistSpec::LazyLattice).unwrap();
        let a = local_clt_deviation(&lazy, 64).unwrap();
        let b = local_clt_deviation(&lazy, 256).unwrap();
        assert_eq!(a.total_mass, "1");
        assert!(b.sup_deviation < a.sup_deviation);
        let rad = make_distribution(&DistSpec::Rademacher).unwrap();
        assert!(matches!(local_clt_deviation(&rad, 64), Err(Error::Unsupported(_))));
    }
}
