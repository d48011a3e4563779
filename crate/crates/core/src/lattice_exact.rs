//! Exact dynamic programming for lattice walks.
//!
//! Kernel masses at time `n` are integers over the implied denominator
//! `d^(k n)`, where `d` is the common denominator of the step law. Every
//! quantity in the Karlin–McGregor identities then lives over the same
//! denominator, so the checks compare `i128` numerators.

use std::collections::{BTreeMap, BTreeSet};

use itertools::Itertools;
use num_bigint::BigInt;
use num_traits::{One, Signed, Zero};
use serde::{Deserialize, Serialize};

use crate::distributions::{LatticeLaw, StepDistribution, StepKind};
use crate::engine::WalkConfig;
use crate::error::{Error, Result};
use crate::geometry::{determinant, in_weyl, minimal_disordered_pair, reflection_shift, vandermonde};
use crate::scalar::{fraction_string, ratio, Rational, Scalar};

/// Largest admissible `d^(k n)`.
pub const CAPACITY_BITS: u32 = 120;

fn capacity(d: u64, k: usize, n: u64) -> Result<u128> {
    let exp = (k as u64).checked_mul(n).filter(|&e| e <= u32::MAX as u64);
    let den = exp.and_then(|e| (d as u128).checked_pow(e as u32));
    match den {
        Some(v) if v < 1u128 << CAPACITY_BITS => Ok(v),
        _ => Err(Error::Capacity(format!(
            "{d}^({k}*{n}) does not fit below 2^{CAPACITY_BITS}"
        ))),
    }
}

fn overflow() -> Error {
    Error::Capacity("exact numerator overflowed i128".into())
}

/// Exact mass table over integer configurations at time `n`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExactKernel {
    pub k: usize,
    pub n: u64,
    pub base: u64,
    pub mass: BTreeMap<Vec<i64>, i128>,
}

impl ExactKernel {
    pub fn point(x: Vec<i64>, base: u64) -> Self {
        Self {
            k: x.len(),
            n: 0,
            base,
            mass: BTreeMap::from([(x, 1)]),
        }
    }

    pub fn denominator(&self) -> BigInt {
        BigInt::from(self.base).pow((self.k as u64 * self.n) as u32)
    }

    pub fn numerator(&self, y: &[i64]) -> i128 {
        self.mass.get(y).copied().unwrap_or(0)
    }

    pub fn probability(&self, y: &[i64]) -> Rational {
        Rational::new(self.numerator(y).into(), self.denominator())
    }

    pub fn total_numerator(&self) -> i128 {
        self.mass.values().sum()
    }

    pub fn total(&self) -> Rational {
        Rational::new(self.total_numerator().into(), self.denominator())
    }

    /// Exact `sum_y mass(y) f(y)`.
    pub fn expectation(&self, f: impl Fn(&[i64]) -> Rational) -> Rational {
        let sum = self.mass.iter().fold(Rational::zero(), |acc, (y, &w)| {
            acc + f(y) * Rational::from_integer(w.into())
        });
        sum / Rational::from_integer(self.denominator())
    }
}

/// All `k`-tuples of single-step moves with their numerator products.
pub(crate) fn joint_steps(law: &LatticeLaw, k: usize) -> Vec<(Vec<i64>, i128)> {
    (0..k)
        .map(|_| law.sites.iter().copied().zip(law.numerators.iter().copied()))
        .multi_cartesian_product()
        .map(|combo| {
            let delta = combo.iter().map(|(s, _)| *s).collect();
            let w = combo.iter().map(|&(_, m)| m as i128).product();
            (delta, w)
        })
        .collect()
}

/// Survival kernels for every `m <= n` plus the full-resolution stopped
/// measure `P_x(tau = m, X(m) = z)`.
#[derive(Debug, Clone)]
pub struct KilledEvolution {
    pub start: Vec<i64>,
    pub base: u64,
    /// `survival[m]` holds `P_x(tau > m, X(m) = y)`.
    pub survival: Vec<ExactKernel>,
    /// `stopped[m]` holds `P_x(tau = m, X(m) = z)`; `stopped[0]` is empty.
    pub stopped: Vec<ExactKernel>,
}

pub fn killed_evolution(x: &[i64], dist: &StepDistribution, n: u64) -> Result<KilledEvolution> {
    let law = dist.require_lattice()?;
    let k = x.len();
    let d = law.denominator;
    capacity(d, k, n)?;
    if !in_weyl(x) {
        return Err(Error::Precondition(format!("start {x:?} not in W")));
    }
    let moves = joint_steps(law, k);
    let mut survival = vec![ExactKernel::point(x.to_vec(), d)];
    let mut stopped = vec![ExactKernel {
        k,
        n: 0,
        base: d,
        mass: BTreeMap::new(),
    }];
    for m in 1..=n {
        let prev = survival.last().unwrap();
        let mut alive = BTreeMap::new();
        let mut dead = BTreeMap::new();
        for (y, &w) in &prev.mass {
            for (delta, p) in &moves {
                let z: Vec<i64> = y.iter().zip(delta).map(|(a, b)| a + b).collect();
                let target = if in_weyl(&z) { &mut alive } else { &mut dead };
                *target.entry(z).or_insert(0i128) += w * p;
            }
        }
        survival.push(ExactKernel {
            k,
            n: m,
            base: d,
            mass: alive,
        });
        stopped.push(ExactKernel {
            k,
            n: m,
            base: d,
            mass: dead,
        });
    }
    Ok(KilledEvolution {
        start: x.to_vec(),
        base: d,
        survival,
        stopped,
    })
}

pub fn exact_survival_kernel(cfg: &WalkConfig, n: u64) -> Result<ExactKernel> {
    let ev = killed_evolution(&cfg.lattice_start()?, cfg.dist(), n)?;
    Ok(ev.survival.into_iter().last().unwrap())
}

/// Unconstrained product kernel of the `k` walkers.
pub fn free_kernel(x: &[i64], dist: &StepDistribution, n: u64) -> Result<ExactKernel> {
    let law = dist.require_lattice()?;
    let k = x.len();
    capacity(law.denominator, k, n)?;
    let walk = SingleWalk::new(law, n)?;
    let per: Vec<Vec<(i64, i128)>> = x
        .iter()
        .map(|&xi| walk.support(n).map(|(s, w)| (xi + s, w)).collect())
        .collect();
    let mut mass = BTreeMap::new();
    for combo in per.iter().map(|v| v.iter()).multi_cartesian_product() {
        let y: Vec<i64> = combo.iter().map(|(s, _)| *s).collect();
        let w: i128 = combo.iter().map(|(_, w)| *w).product();
        *mass.entry(y).or_insert(0) += w;
    }
    Ok(ExactKernel {
        k,
        n,
        base: law.denominator,
        mass,
    })
}

/// Exact n-step masses of one walker, `p_t(s)` as numerators over `d^t`.
#[derive(Debug, Clone)]
pub struct SingleWalk {
    base: u64,
    /// `(lowest site, numerators)` for each `t`.
    tables: Vec<(i64, Vec<i128>)>,
}

impl SingleWalk {
    pub fn new(law: &LatticeLaw, n: u64) -> Result<Self> {
        capacity(law.denominator, 1, n)?;
        let lo = law.sites[0];
        let hi = *law.sites.last().unwrap();
        let mut tables = vec![(0i64, vec![1i128])];
        for _ in 0..n {
            let (min, prev) = tables.last().unwrap();
            let mut next = vec![0i128; prev.len() + (hi - lo) as usize];
            for (i, &w) in prev.iter().enumerate() {
                if w == 0 {
                    continue;
                }
                for (&s, &m) in law.sites.iter().zip(&law.numerators) {
                    next[i + (s - lo) as usize] += w * m as i128;
                }
            }
            tables.push((min + lo, next));
        }
        Ok(Self {
            base: law.denominator,
            tables,
        })
    }

    pub fn horizon(&self) -> u64 {
        self.tables.len() as u64 - 1
    }

    pub fn numerator(&self, t: u64, s: i64) -> i128 {
        let (min, v) = &self.tables[t as usize];
        if s < *min {
            return 0;
        }
        v.get((s - min) as usize).copied().unwrap_or(0)
    }

    pub fn probability(&self, t: u64, s: i64) -> Rational {
        Rational::new(self.numerator(t, s).into(), BigInt::from(self.base).pow(t as u32))
    }

    pub fn support(&self, t: u64) -> impl Iterator<Item = (i64, i128)> + '_ {
        let (min, v) = &self.tables[t as usize];
        v.iter()
            .enumerate()
            .filter(|(_, &w)| w != 0)
            .map(move |(i, &w)| (min + i as i64, w))
    }

    /// `det[p_t(y_j - x_i)]` as a numerator over `d^(k t)`.
    pub fn d_numerator(&self, t: u64, x: &[i64], y: &[i64]) -> i128 {
        let m: Vec<Vec<i128>> = x
            .iter()
            .map(|&xi| y.iter().map(|&yj| self.numerator(t, yj - xi)).collect())
            .collect();
        determinant(&m)
    }
}

/// Exact `D_n(x, y) = det[P_{x_i}(X_1(n) = y_j)]`.
pub fn exact_d_matrix(x: &[i64], y: &[i64], n: u64, dist: &StepDistribution) -> Result<Rational> {
    if x.len() != y.len() {
        return Err(Error::InvalidArgument("x and y differ in dimension".into()));
    }
    let law = dist.require_lattice()?;
    capacity(law.denominator, x.len(), n)?;
    let walk = SingleWalk::new(law, n)?;
    Ok(Rational::new(
        walk.d_numerator(n, x, y).into(),
        BigInt::from(law.denominator).pow((x.len() as u64 * n) as u32),
    ))
}

/// Outcome of an exact identity check.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub identity: String,
    pub k: usize,
    pub n: u64,
    pub sites_checked: usize,
    pub max_abs_discrepancy: String,
    pub pass: bool,
    /// Sites where the tie convention of the reflection shift entered with a
    /// nonzero determinant.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flagged_sites: Vec<Vec<i64>>,
}

/// Running comparison of exact left and right sides.
struct Tally {
    identity: String,
    k: usize,
    n: u64,
    sites: usize,
    max: Rational,
    first_bad: Option<(Vec<i64>, Rational, Rational)>,
    flagged: Vec<Vec<i64>>,
}

impl Tally {
    fn new(identity: &str, k: usize, n: u64) -> Self {
        Self {
            identity: identity.into(),
            k,
            n,
            sites: 0,
            max: Rational::zero(),
            first_bad: None,
            flagged: Vec::new(),
        }
    }

    fn compare(&mut self, site: &[i64], lhs: Rational, rhs: Rational) {
        self.sites += 1;
        let diff = (&lhs - &rhs).abs();
        if diff > self.max {
            self.max = diff.clone();
        }
        if !diff.is_zero() && self.first_bad.is_none() {
            self.first_bad = Some((site.to_vec(), lhs, rhs));
        }
    }

    fn finish(self) -> Result<VerificationReport> {
        let report = VerificationReport {
            identity: self.identity.clone(),
            k: self.k,
            n: self.n,
            sites_checked: self.sites,
            max_abs_discrepancy: fraction_string(&self.max),
            pass: self.first_bad.is_none(),
            flagged_sites: self.flagged,
        };
        match self.first_bad {
            None => Ok(report),
            Some((site, lhs, rhs)) => Err(Error::IdentityViolation {
                identity: self.identity,
                site,
                lhs: fraction_string(&lhs),
                rhs: fraction_string(&rhs),
                report: Box::new(report),
            }),
        }
    }
}

/// Ordered tuples drawn from every value some walker can occupy at time `n`.
fn candidate_sites(x: &[i64], walk: &SingleWalk, n: u64) -> Vec<Vec<i64>> {
    let values: BTreeSet<i64> = x
        .iter()
        .flat_map(|&xi| walk.support(n).map(move |(s, _)| xi + s))
        .collect();
    values.into_iter().combinations(x.len()).collect()
}

fn over(num: i128, den: &BigInt) -> Rational {
    Rational::new(num.into(), den.clone())
}

/// Generalized Karlin–McGregor formula:
/// `P_x(tau > n, X(n) = y) = D_n(x, y) - sum_{m <= n} sum_z P_x(tau = m, X(m) = z) D_{n-m}(z, y)`
/// at every reachable ordered `y`.
pub fn exact_km_check(cfg: &WalkConfig, n: u64) -> Result<VerificationReport> {
    let x = cfg.lattice_start()?;
    let law = cfg.dist().require_lattice()?;
    let ev = killed_evolution(&x, cfg.dist(), n)?;
    let walk = SingleWalk::new(law, n)?;
    let den = ev.survival[n as usize].denominator();
    let mut tally = Tally::new("generalized_karlin_mcgregor", x.len(), n);
    for y in candidate_sites(&x, &walk, n) {
        let lhs = ev.survival[n as usize].numerator(&y);
        let mut rhs = walk.d_numerator(n, &x, &y);
        for m in 1..=n {
            for (z, &w) in &ev.stopped[m as usize].mass {
                let dz = walk.d_numerator(n - m, z, &y);
                let term = w.checked_mul(dz).ok_or_else(overflow)?;
                rhs = rhs.checked_sub(term).ok_or_else(overflow)?;
            }
        }
        tally.compare(&y, over(lhs, &den), over(rhs, &den));
    }
    tally.finish()
}

/// Reflection identity at exit time `l`:
/// `-sum_z P_x(tau = l, X(l) = z) D_{n-l}(z, y) = sum_z P_x(tau = l, X(l) = z) D_{n-l}(z, y + psi(z))`
/// at every reachable ordered `y`.
///
/// Exit positions that are exact ties have `psi = 0`; if such a position ever
/// contributes a nonzero determinant the site is recorded in
/// `flagged_sites`.
pub fn exact_reflection_check(cfg: &WalkConfig, n: u64, l: u64) -> Result<VerificationReport> {
    if l == 0 || l > n {
        return Err(Error::InvalidArgument(format!(
            "exit time l={l} must satisfy 1 <= l <= n={n}"
        )));
    }
    let x = cfg.lattice_start()?;
    let law = cfg.dist().require_lattice()?;
    let ev = killed_evolution(&x, cfg.dist(), n)?;
    let walk = SingleWalk::new(law, n)?;
    let den = ev.survival[n as usize].denominator();
    let exits: Vec<(&Vec<i64>, i128, Vec<i64>, bool)> = ev.stopped[l as usize]
        .mass
        .iter()
        .map(|(z, &w)| {
            let psi = reflection_shift(z).expect("stopped positions lie outside W");
            let (i, j) = minimal_disordered_pair(z).unwrap();
            (z, w, psi, z[i] == z[j])
        })
        .collect();
    let mut tally = Tally::new("reflection", x.len(), n);
    for y in candidate_sites(&x, &walk, n) {
        let mut lhs = 0i128;
        let mut rhs = 0i128;
        let mut tie_matters = false;
        for (z, w, psi, tie) in &exits {
            let dz = walk.d_numerator(n - l, z, &y);
            lhs = lhs
                .checked_sub(w.checked_mul(dz).ok_or_else(overflow)?)
                .ok_or_else(overflow)?;
            let shifted: Vec<i64> = y.iter().zip(psi).map(|(a, b)| a + b).collect();
            let ds = walk.d_numerator(n - l, z, &shifted);
            rhs = rhs
                .checked_add(w.checked_mul(ds).ok_or_else(overflow)?)
                .ok_or_else(overflow)?;
            if *tie && (dz != 0 || ds != 0) {
                tie_matters = true;
            }
        }
        if tie_matters {
            tally.flagged.push(y.clone());
        }
        tally.compare(&y, over(lhs, &den), over(rhs, &den));
    }
    tally.finish()
}

/// Runs [`exact_reflection_check`] for every `l` in `1..=n`.
pub fn exact_reflection_check_all(cfg: &WalkConfig, n: u64) -> Vec<Result<VerificationReport>> {
    (1..=n).map(|l| exact_reflection_check(cfg, n, l)).collect()
}

pub fn delta_rational(z: &[i64]) -> Rational {
    Rational::from_integer(BigInt::from(vandermonde(
        &z.iter().map(|&c| c as i128).collect::<Vec<_>>(),
    )))
}

/// `V_0, ..., V_n` at the start of `ev`.
fn vn_sequence(ev: &KilledEvolution) -> Vec<Rational> {
    let mut v = delta_rational(&ev.start);
    let mut out = vec![v.clone()];
    for m in 1..ev.stopped.len() {
        v -= ev.stopped[m].expectation(delta_rational);
        out.push(v.clone());
    }
    out
}

/// Exact `V_m(x) = Delta(x) - E_x[Delta(X(tau)) 1{tau <= m}]` for `m = 0..=n`.
#[derive(Debug, Clone, PartialEq)]
pub struct VnSequence {
    pub x: Vec<i64>,
    pub values: Vec<Rational>,
}

impl VnSequence {
    pub fn last(&self) -> &Rational {
        self.values.last().unwrap()
    }
}

pub fn exact_vn(cfg: &WalkConfig, n: u64) -> Result<VnSequence> {
    let x = cfg.lattice_start()?;
    exact_vn_at(&x, cfg.dist(), n)
}

pub fn exact_vn_at(x: &[i64], dist: &StepDistribution, n: u64) -> Result<VnSequence> {
    let ev = killed_evolution(x, dist, n)?;
    Ok(VnSequence {
        x: x.to_vec(),
        values: vn_sequence(&ev),
    })
}

/// `E_x[Delta(X(m))] = Delta(x)` for every `m <= n`, via the free kernel.
pub fn exact_martingale_check(cfg: &WalkConfig, n: u64) -> Result<VerificationReport> {
    let x = cfg.lattice_start()?;
    let target = delta_rational(&x);
    let mut tally = Tally::new("martingale", x.len(), n);
    for m in 0..=n {
        let kernel = free_kernel(&x, cfg.dist(), m)?;
        let lhs = kernel.expectation(delta_rational);
        let mut site = x.clone();
        site.push(m as i64);
        tally.compare(&site, lhs, target.clone());
    }
    tally.finish()
}

/// One-step survival kernel from `x` as exact probabilities.
fn one_step(x: &[i64], dist: &StepDistribution) -> Result<Vec<(Vec<i64>, Rational)>> {
    let ev = killed_evolution(x, dist, 1)?;
    let kernel = &ev.survival[1];
    Ok(kernel.mass.keys().map(|y| (y.clone(), kernel.probability(y))).collect())
}

/// Iterating-sequence identity `E_x[1{tau > 1} V_m(X(1))] = V_{m+1}(x)` for
/// `m = 0..=n`; with a closed-form `V` available (see [`closed_form_v`]),
/// also `E_x[1{tau > 1} V(X(1))] = V(x)`.
pub fn exact_harmonicity_check(cfg: &WalkConfig, n: u64) -> Result<VerificationReport> {
    let x = cfg.lattice_start()?;
    let dist = cfg.dist();
    let at_x = exact_vn_at(&x, dist, n + 1)?;
    let steps = one_step(&x, dist)?;
    let tables: Vec<VnSequence> = steps
        .iter()
        .map(|(y, _)| exact_vn_at(y, dist, n))
        .collect::<Result<_>>()?;
    let mut tally = Tally::new("harmonicity", x.len(), n);
    for m in 0..=n as usize {
        let lhs = steps
            .iter()
            .zip(&tables)
            .fold(Rational::zero(), |acc, ((_, p), t)| acc + p * &t.values[m]);
        let mut site = x.clone();
        site.push(m as i64);
        tally.compare(&site, lhs, at_x.values[m + 1].clone());
    }
    if let Some(vx) = closed_form_v(dist, &x) {
        let mut lhs = Rational::zero();
        let mut complete = true;
        for (y, p) in &steps {
            match closed_form_v(dist, y) {
                Some(vy) => lhs += p * vy,
                None => complete = false,
            }
        }
        if complete {
            tally.compare(&x, lhs, vx);
        }
    }
    tally.finish()
}

/// Which closed form of `V` applies to a Rademacher configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ClosedFormV {
    /// All coordinates share a parity: exits land exactly on a tie, so
    /// `Delta(X(tau)) = 0` and `V = Delta`.
    Vandermonde,
    /// `k = 2`, odd gap: every exit has gap `-1`, so `V = gap + 1`.
    RademacherPair,
}

pub fn closed_form_kind(dist: &StepDistribution, x: &[i64]) -> Option<ClosedFormV> {
    if dist.kind != StepKind::Rademacher || !in_weyl(x) {
        return None;
    }
    let p0 = x[0].rem_euclid(2);
    if x.iter().all(|c| c.rem_euclid(2) == p0) {
        Some(ClosedFormV::Vandermonde)
    } else if x.len() == 2 {
        Some(ClosedFormV::RademacherPair)
    } else {
        None
    }
}

pub fn closed_form_v(dist: &StepDistribution, x: &[i64]) -> Option<Rational> {
    closed_form_kind(dist, x).map(|kind| match kind {
        ClosedFormV::Vandermonde => delta_rational(x),
        ClosedFormV::RademacherPair => Rational::from_integer((x[1] - x[0] + 1).into()),
    })
}

/// Distinct values of `Delta(X(tau))` over exits up to time `n` (with positive
/// mass), together with the exact exit probability `P_x(tau <= n)`.
pub fn stopped_delta_values(cfg: &WalkConfig, n: u64) -> Result<(BTreeSet<BigInt>, Rational)> {
    let x = cfg.lattice_start()?;
    let ev = killed_evolution(&x, cfg.dist(), n)?;
    let mut values = BTreeSet::new();
    let mut exit = Rational::zero();
    for kernel in &ev.stopped[1..] {
        for z in kernel.mass.keys() {
            values.insert(delta_rational(z).to_integer());
        }
        exit += kernel.total();
    }
    Ok((values, exit))
}

/// Gap process `X_2 - X_1` of a two-walker lattice walk, killed at the first
/// nonpositive gap. Generic over the scalar so the same recursion runs in
/// exact arithmetic for small `n` and in `f64` for long horizons.
#[derive(Debug, Clone)]
pub struct GapChain<T> {
    increments: Vec<(i64, T)>,
}

/// Surviving mass on gaps `min_gap, min_gap + 1, ...`.
#[derive(Debug, Clone, PartialEq)]
pub struct GapLaw<T> {
    pub min_gap: i64,
    pub mass: Vec<T>,
}

impl<T: Scalar> GapLaw<T> {
    pub fn iter(&self) -> impl Iterator<Item = (i64, &T)> {
        self.mass
            .iter()
            .enumerate()
            .filter(|(_, m)| !m.is_zero())
            .map(move |(i, m)| (self.min_gap + i as i64, m))
    }

    pub fn total(&self) -> T {
        self.mass.iter().fold(T::zero(), |a, b| a + b.clone())
    }
}

/// Survival probability and `V_t` of the gap chain at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct GapPoint<T> {
    pub t: u64,
    pub survival: T,
    /// `g0 - E[g(tau) 1{tau <= t}]`.
    pub vn: T,
}

impl<T: Scalar> GapChain<T> {
    pub fn from_dist(dist: &StepDistribution) -> Result<Self> {
        let law = dist.require_lattice()?;
        let mut inc: BTreeMap<i64, Rational> = BTreeMap::new();
        for (a, pa) in law.iter() {
            for (b, pb) in law.iter() {
                *inc.entry(b - a).or_insert_with(Rational::zero) += &pa * &pb;
            }
        }
        Ok(Self {
            increments: inc.into_iter().map(|(s, p)| (s, T::from_rational(&p))).collect(),
        })
    }

    pub fn increments(&self) -> &[(i64, T)] {
        &self.increments
    }

    /// Runs the chain from gap `g0` and calls `visit` at every time in
    /// `times` (sorted) with the surviving law.
    pub fn evolve(&self, g0: i64, times: &[u64], mut visit: impl FnMut(&GapPoint<T>, &GapLaw<T>)) -> Result<()> {
        if g0 < 1 {
            return Err(Error::Precondition(format!("gap {g0} is not positive")));
        }
        if times.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::InvalidArgument("times must be sorted".into()));
        }
        let lo = self.increments[0].0;
        let hi = self.increments.last().unwrap().0;
        let mut law = GapLaw {
            min_gap: 1,
            mass: vec![T::zero(); g0 as usize],
        };
        law.mass[g0 as usize - 1] = T::one();
        let mut stopped = T::zero();
        let mut next_time = times.iter().peekable();
        let t_max = times.last().copied().unwrap_or(0);
        let g0s = T::from_int(g0);
        for t in 0..=t_max {
            while next_time.peek() == Some(&&t) {
                next_time.next();
                let point = GapPoint {
                    t,
                    survival: law.total(),
                    vn: g0s.clone() - stopped.clone(),
                };
                visit(&point, &law);
            }
            if t == t_max {
                break;
            }
            let width = law.mass.len() as i64 + hi.max(0);
            let mut next = vec![T::zero(); width as usize];
            for (i, w) in law.mass.iter().enumerate() {
                if w.is_zero() {
                    continue;
                }
                let g = 1 + i as i64;
                for (s, p) in &self.increments {
                    let h = g + s;
                    let contrib = w.clone() * p.clone();
                    if h >= 1 {
                        next[(h - 1) as usize] = next[(h - 1) as usize].clone() + contrib;
                    } else {
                        stopped = stopped + contrib * T::from_int(h);
                    }
                }
            }
            while next.last().is_some_and(|v| v.is_zero()) {
                next.pop();
            }
            let _ = lo;
            law.mass = next;
        }
        Ok(())
    }

    pub fn curve(&self, g0: i64, times: &[u64]) -> Result<Vec<GapPoint<T>>> {
        let mut out = Vec::with_capacity(times.len());
        self.evolve(g0, times, |p, _| out.push(p.clone()))?;
        Ok(out)
    }

    pub fn law_at(&self, g0: i64, t: u64) -> Result<GapLaw<T>> {
        let mut out = None;
        self.evolve(g0, &[t], |_, law| out = Some(law.clone()))?;
        Ok(out.unwrap())
    }
}

impl GapChain<Rational> {
    /// Exact copy of the chain in another scalar type.
    pub fn convert<U: Scalar>(&self) -> GapChain<U> {
        GapChain {
            increments: self.increments.iter().map(|(s, p)| (*s, U::from_rational(p))).collect(),
        }
    }
}

/// `1/2^e` style helper for exact expectations in tests and reports.
pub fn dyadic(num: i64, log2_den: u32) -> Rational {
    ratio(num, BigInt::one() << log2_den as usize)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::{make_distribution, DistSpec};

    fn rad() -> StepDistribution {
        make_distribution(&DistSpec::Rademacher).unwrap()
    }

    fn cfg(x: &[i64]) -> WalkConfig {
        WalkConfig::new(x.iter().map(|&c| c as f64).collect(), rad(), 0).unwrap()
    }

    #[test]
    fn one_step_survival_kernel() {
        let k = exact_survival_kernel(&cfg(&[0, 1]), 1).unwrap();
        assert_eq!(k.probability(&[1, 2]), ratio(1, 4));
        assert_eq!(k.probability(&[-1, 0]), ratio(1, 4));
        assert_eq!(k.probability(&[-1, 2]), ratio(1, 4));
        assert_eq!(k.total(), ratio(3, 4));
        let k0 = exact_survival_kernel(&cfg(&[0, 1]), 0).unwrap();
        assert_eq!(k0.probability(&[0, 1]), Rational::one());
    }

    #[test]
    fn three_walkers_one_step_by_enumeration() {
        let x = [0i64, 1, 2];
        let mut alive = 0;
        for s in (0..3).map(|_| [-1i64, 1]).multi_cartesian_product() {
            let y: Vec<i64> = x.iter().zip(&s).map(|(a, b)| a + b).collect();
            if in_weyl(&y) {
                alive += 1;
            }
        }
        let k = exact_survival_kernel(&cfg(&x), 1).unwrap();
        assert_eq!(k.total(), ratio(alive, 8));
        assert_eq!(k.total(), ratio(1, 2));
    }

    #[test]
    fn d_matrix_examples() {
        let d = rad();
        assert_eq!(exact_d_matrix(&[0, 1], &[1, 2], 1, &d).unwrap(), ratio(1, 4));
        assert_eq!(exact_d_matrix(&[0, 1], &[1, 1], 1, &d).unwrap(), Rational::zero());
        assert_eq!(exact_d_matrix(&[0, 1], &[0, 1], 0, &d).unwrap(), Rational::one());
    }

    #[test]
    fn capacity_guard() {
        assert!(matches!(
            exact_survival_kernel(&cfg(&[0, 1]), 61),
            Err(Error::Capacity(_))
        ));
        let gauss = make_distribution(&DistSpec::Gaussian { variance: 1.0 }).unwrap();
        let c = WalkConfig::new(vec![0.0, 1.0], gauss, 0).unwrap();
        assert!(matches!(exact_survival_kernel(&c, 1), Err(Error::Unsupported(_))));
    }

    #[test]
    fn km_small() {
        let r = exact_km_check(&cfg(&[0, 1]), 1).unwrap();
        assert!(r.pass);
        assert_eq!(r.max_abs_discrepancy, "0");
        assert!(exact_km_check(&cfg(&[0, 1, 2]), 3).unwrap().pass);
    }

    #[test]
    fn vn_values() {
        let v = exact_vn(&cfg(&[0, 1]), 1).unwrap();
        assert_eq!(v.values, vec![Rational::one(), ratio(5, 4)]);
        let v = exact_vn(&cfg(&[0, 1, 2]), 5).unwrap();
        assert!(v.values.iter().all(|x| x.is_positive()));
    }

    #[test]
    fn martingale_and_harmonicity() {
        assert!(exact_martingale_check(&cfg(&[0, 1]), 4).unwrap().pass);
        let r = exact_harmonicity_check(&cfg(&[0, 1]), 3).unwrap();
        assert!(r.pass);
        // 4 iterations plus the closed-form check
        assert_eq!(r.sites_checked, 5);
    }

    #[test]
    fn closed_form_harmonicity_example() {
        let d = rad();
        let v = |y: &[i64]| closed_form_v(&d, y).unwrap();
        let lhs = ratio(1, 4) * v(&[1, 2]) + ratio(1, 4) * v(&[-1, 0]) + ratio(1, 4) * v(&[-1, 2]);
        assert_eq!(lhs, ratio(2, 1));
        assert_eq!(v(&[0, 1]), ratio(2, 1));
        assert_eq!(v(&[0, 2, 4]), ratio(16, 1));
        assert_eq!(closed_form_kind(&d, &[0, 1, 2]), None);
    }

    #[test]
    fn stopped_deltas_for_odd_gap_are_minus_one() {
        let (vals, exit) = stopped_delta_values(&cfg(&[0, 3]), 12).unwrap();
        assert_eq!(vals.into_iter().collect::<Vec<_>>(), vec![BigInt::from(-1)]);
        assert!(exit < Rational::one());
    }

    #[test]
    fn gap_chain_matches_kernel() {
        let chain = GapChain::<Rational>::from_dist(&rad()).unwrap();
        let pts = chain.curve(1, &[0, 1, 2, 6]).unwrap();
        let ev = killed_evolution(&[0, 1], &rad(), 6).unwrap();
        for p in &pts {
            assert_eq!(p.survival, ev.survival[p.t as usize].total());
        }
        let exact = vn_sequence(&ev);
        assert_eq!(pts[3].vn, exact[6]);
        assert_eq!(pts[1].vn, ratio(5, 4));
    }

    #[test]
    fn gap_chain_f64_tracks_rational() {
        let chain = GapChain::<Rational>::from_dist(&rad()).unwrap();
        let fchain: GapChain<f64> = chain.convert();
        let a = chain.curve(1, &[40]).unwrap();
        let b = fchain.curve(1, &[40]).unwrap();
        assert!((a[0].survival.as_f64() - b[0].survival).abs() < 1e-14);
        assert!((a[0].vn.as_f64() - b[0].vn).abs() < 1e-14);
    }

    #[test]
    fn dyadic_helper() {
        assert_eq!(dyadic(3, 2), ratio(3, 4));
    }
}
