//! The Doob `V`-transform: exact lattice chains, conditioned rejection
//! sampling, and comparisons with the Hermite ensemble and Dyson's Brownian
//! motions.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use itertools::Itertools;
use num_traits::{Signed, Zero};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::asymptotics::{kolmogorov_p, tail_fit, BinnedReference, EnvelopeSampler, GofReference, GofReport, Grid};
use crate::distributions::{derive_seed, RandomStream, StepDistribution};
use crate::engine::{batch_survival, conditioned_paths, EstimateCI, Moments, WalkConfig, CHUNK};
use crate::error::{Error, Result};
use crate::geometry::{determinant, in_weyl, vandermonde};
use crate::lattice_exact::{closed_form_kind, closed_form_v, exact_vn_at, joint_steps, killed_evolution};
use crate::scalar::{rational_to_f64, Rational, Real};
use crate::vfunc::{estimate_v, snap_to_lattice};

/// Where the values of `V` in a [`TransformTable`] come from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VSource {
    /// Closed form for Rademacher steps (`V = Delta`, or `gap + 1`).
    Closed,
    /// Exact `V_N`; the one-step mass is `V_{N+1}(x) / V_N(x)`.
    ExactTruncated { horizon: u64 },
    /// Monte Carlo `V_N` with standard errors.
    Estimated { horizon: u64, paths: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TableEntry {
    pub value: f64,
    #[serde(skip)]
    pub exact: Option<Rational>,
    pub stderr: f64,
    /// Relative truncation tolerance `(V_{N+1} - V_N) / V_N`.
    pub tolerance: f64,
}

/// Values of `V` on integer configurations; immutable once built.
#[derive(Debug, Clone)]
pub struct TransformTable {
    k: usize,
    dist: StepDistribution,
    source: VSource,
    /// Inclusive coordinate range; `None` for closed forms.
    domain: Option<(i64, i64)>,
    entries: BTreeMap<Vec<i64>, TableEntry>,
}

fn closed_entry(v: Rational) -> TableEntry {
    TableEntry {
        value: rational_to_f64(&v),
        exact: Some(v),
        stderr: 0.0,
        tolerance: 0.0,
    }
}

impl TransformTable {
    /// Closed-form `V` for Rademacher steps; valid on configurations whose
    /// coordinates share a parity, and on every configuration when `k = 2`.
    pub fn closed_form(dist: &StepDistribution, k: usize) -> Result<Self> {
        if closed_form_kind(dist, &(0..k as i64).map(|i| 2 * i).collect::<Vec<_>>()).is_none() {
            return Err(Error::Unsupported(format!(
                "no closed form for V under {:?} steps",
                dist.kind
            )));
        }
        Ok(Self {
            k,
            dist: dist.clone(),
            source: VSource::Closed,
            domain: None,
            entries: BTreeMap::new(),
        })
    }

    /// Exact `V_N` on every ordered configuration in `[lo, hi]^k`.
    pub fn exact(dist: &StepDistribution, k: usize, lo: i64, hi: i64, horizon: u64) -> Result<Self> {
        let sites: Vec<Vec<i64>> = (lo..=hi).combinations(k).collect();
        let entries = sites
            .par_iter()
            .map(|x| {
                let seq = exact_vn_at(x, dist, horizon + 1)?;
                let n = horizon as usize;
                let v = seq.values[n].clone();
                let next = &seq.values[n + 1];
                let tolerance = rational_to_f64(&((next - &v) / &v));
                Ok((
                    x.clone(),
                    TableEntry {
                        value: rational_to_f64(&v),
                        exact: Some(v),
                        stderr: 0.0,
                        tolerance,
                    },
                ))
            })
            .collect::<Result<BTreeMap<_, _>>>()?;
        Self::checked(k, dist, VSource::ExactTruncated { horizon }, Some((lo, hi)), entries)
    }

    /// Monte Carlo `V_N` on every ordered configuration in `[lo, hi]^k`
    /// sharing the start's lattice class.
    pub fn estimated(cfg: &WalkConfig, lo: i64, hi: i64, horizon: u64, paths: u64) -> Result<Self> {
        let k = cfg.k();
        let mut entries = BTreeMap::new();
        for (i, x) in (lo..=hi).combinations(k).enumerate() {
            let c = match cfg
                .with_start(x.iter().map(|&v| v as f64).collect())
                .map(|c| c.with_seed(derive_seed(cfg.master_seed(), i as u64)))
            {
                Ok(c) => c,
                Err(_) => continue,
            };
            let est = estimate_v(&c, &[horizon / 2, horizon], paths)?;
            entries.insert(
                x,
                TableEntry {
                    value: est.value.mean,
                    exact: None,
                    stderr: est.value.stderr,
                    tolerance: 0.0,
                },
            );
        }
        Self::checked(
            k,
            cfg.dist(),
            VSource::Estimated { horizon, paths },
            Some((lo, hi)),
            entries,
        )
    }

    fn checked(
        k: usize,
        dist: &StepDistribution,
        source: VSource,
        domain: Option<(i64, i64)>,
        entries: BTreeMap<Vec<i64>, TableEntry>,
    ) -> Result<Self> {
        if let Some((x, e)) = entries.iter().find(|(_, e)| !(e.value > 0.0)) {
            return Err(Error::Inconsistent {
                site: x.clone(),
                mass: e.value,
                budget: 0.0,
            });
        }
        Ok(Self {
            k,
            dist: dist.clone(),
            source,
            domain,
            entries,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn source(&self) -> VSource {
        self.source
    }

    pub fn dist(&self) -> &StepDistribution {
        &self.dist
    }

    /// Description of the configurations the table covers.
    pub fn domain_description(&self) -> String {
        match self.domain {
            None => "closed form on W".into(),
            Some((lo, hi)) => format!("ordered configurations in [{lo}, {hi}]^{}", self.k),
        }
    }

    pub fn entries(&self) -> impl Iterator<Item = (&Vec<i64>, &TableEntry)> {
        self.entries.iter()
    }

    /// `V(y)`, `None` off W.
    pub fn value(&self, y: &[i64]) -> Result<Option<TableEntry>> {
        if y.len() != self.k {
            return Err(Error::InvalidArgument(format!("{y:?} is not a {}-vector", self.k)));
        }
        if !in_weyl(y) {
            return Ok(None);
        }
        match self.domain {
            None => closed_form_v(&self.dist, y)
                .map(|v| Some(closed_entry(v)))
                .ok_or_else(|| Error::Precondition(format!("closed form for V does not cover {y:?}"))),
            Some((lo, hi)) => {
                if y.iter().any(|&c| c < lo || c > hi) {
                    return Err(Error::Precondition(format!(
                        "{y:?} outside the table domain [{lo}, {hi}]"
                    )));
                }
                Ok(self.entries.get(y).cloned())
            }
        }
    }

    /// Transition masses `p(x -> y) 1{y in W} V(y) / V(x)` out of `x`,
    /// checked for normalization.
    pub fn one_step(&self, x: &[i64]) -> Result<OneStep> {
        let vx = self
            .value(x)?
            .ok_or_else(|| Error::Precondition(format!("{x:?} not in W")))?;
        let law = self.dist.require_lattice()?;
        let den = Rational::from_integer((law.denominator as i128).pow(self.k as u32).into());
        let den_f = (law.denominator as f64).powi(self.k as i32);
        let mut moves = Vec::new();
        let mut exact_mass = vx.exact.as_ref().map(|_| Rational::zero());
        let mut mass = 0.0;
        let mut var = 0.0;
        for (delta, w) in joint_steps(law, self.k) {
            let y: Vec<i64> = x.iter().zip(&delta).map(|(a, b)| a + b).collect();
            let Some(vy) = self.value(&y)? else { continue };
            let p = w as f64 / den_f;
            let weight = p * vy.value / vx.value;
            if let (Some(acc), Some(ex_y), Some(ex_x)) = (exact_mass.as_mut(), &vy.exact, &vx.exact) {
                *acc += Rational::from_integer(w.into()) / &den * ex_y / ex_x;
            }
            mass += weight;
            var += (p * vy.stderr / vx.value).powi(2);
            if weight > 0.0 {
                moves.push((delta, weight));
            }
        }
        var += (mass * vx.stderr / vx.value).powi(2);
        let budget = match self.source {
            VSource::Estimated { .. } => 4.0 * var.sqrt(),
            _ => vx.tolerance,
        };
        let ok = match &exact_mass {
            Some(m) => {
                let dev = (m - Rational::from_integer(1.into())).abs();
                match self.source {
                    VSource::Closed => dev.is_zero(),
                    _ => rational_to_f64(&dev) <= budget * (1.0 + 1e-12),
                }
            }
            None => (mass - 1.0).abs() <= budget,
        };
        if !ok {
            return Err(Error::Inconsistent {
                site: x.to_vec(),
                mass,
                budget,
            });
        }
        Ok(OneStep {
            x: x.to_vec(),
            moves,
            mass,
            exact_mass: exact_mass.map(|m| crate::scalar::fraction_string(&m)),
            budget,
        })
    }
}

/// Normalized one-step law of the transformed chain.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OneStep {
    pub x: Vec<i64>,
    /// `(step, weight)` pairs with positive weight.
    pub moves: Vec<(Vec<i64>, f64)>,
    pub mass: f64,
    /// Exact total mass as a fraction string, where `V` is exact.
    pub exact_mass: Option<String>,
    pub budget: f64,
}

impl OneStep {
    fn cumulative(&self) -> Vec<(Vec<i64>, f64)> {
        let mut acc = 0.0;
        self.moves
            .iter()
            .map(|(d, w)| {
                acc += w / self.mass;
                (d.clone(), acc)
            })
            .collect()
    }
}

fn pick(cum: &[(Vec<i64>, f64)], u: f64) -> &[i64] {
    let i = cum.partition_point(|(_, c)| *c <= u).min(cum.len() - 1);
    &cum[i].0
}

/// One step of the transformed chain from `x`.
pub fn transform_step_exact(table: &TransformTable, x: &[i64], stream: &mut RandomStream) -> Result<Vec<i64>> {
    let step = table.one_step(x)?;
    let cum = step.cumulative();
    let d = pick(&cum, stream.uniform());
    Ok(x.iter().zip(d).map(|(a, b)| a + b).collect())
}

/// Paths of the transformed chain, recorded at `record_times`.
///
/// Path `i` draws from stream `(master_seed, i)`. Within a chunk of paths the
/// verified one-step laws are cached (keyed by gaps when `V` is a translation
/// invariant closed form).
pub fn sample_transformed_chain(
    table: &TransformTable,
    start: &[i64],
    record_times: &[u64],
    paths: u64,
    master_seed: u64,
) -> Result<Vec<Vec<Vec<i64>>>> {
    if record_times.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidArgument("record times must be sorted".into()));
    }
    table.one_step(start)?;
    let horizon = record_times.last().copied().unwrap_or(0);
    let by_gaps = table.domain.is_none();
    let chunks: Vec<Result<Vec<Vec<Vec<i64>>>>> = (0..paths.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut cache: HashMap<Vec<i64>, Arc<Vec<(Vec<i64>, f64)>>> = HashMap::new();
            let mut out = Vec::with_capacity(CHUNK as usize);
            for i in c * CHUNK..((c + 1) * CHUNK).min(paths) {
                let mut stream = RandomStream::new(master_seed, i);
                let mut x = start.to_vec();
                let mut rec = Vec::with_capacity(record_times.len());
                let mut next = record_times.iter().peekable();
                for t in 0..=horizon {
                    while next.peek() == Some(&&t) {
                        next.next();
                        rec.push(x.clone());
                    }
                    if t == horizon {
                        break;
                    }
                    let key = if by_gaps {
                        x.windows(2).map(|w| w[1] - w[0]).collect()
                    } else {
                        x.clone()
                    };
                    let cum = match cache.get(&key) {
                        Some(c) => c.clone(),
                        None => {
                            let c = Arc::new(table.one_step(&x)?.cumulative());
                            cache.insert(key, c.clone());
                            c
                        }
                    };
                    let d = pick(&cum, stream.uniform());
                    x.iter_mut().zip(d).for_each(|(a, b)| *a += b);
                }
                out.push(rec);
            }
            Ok(out)
        })
        .collect();
    let mut all = Vec::with_capacity(paths as usize);
    for c in chunks {
        all.extend(c?);
    }
    Ok(all)
}

/// Exact law of `X(t)` under the transform from `x`:
/// `P_x(tau > t, X(t) = y) V(y) / V(x)`.
pub fn exact_transformed_law(table: &TransformTable, x: &[i64], t: u64) -> Result<BTreeMap<Vec<i64>, Rational>> {
    let ev = killed_evolution(x, &table.dist, t)?;
    let kernel = &ev.survival[t as usize];
    let vx = table
        .value(x)?
        .and_then(|e| e.exact)
        .ok_or_else(|| Error::Precondition("exact V needed at the start".into()))?;
    let mut out = BTreeMap::new();
    for y in kernel.mass.keys() {
        let vy = table
            .value(y)?
            .and_then(|e| e.exact)
            .ok_or_else(|| Error::Precondition(format!("exact V needed at {y:?}")))?;
        out.insert(y.clone(), kernel.probability(y) * vy / &vx);
    }
    Ok(out)
}

// ---------------------------------------------------------------- rejection

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RejectionOptions {
    /// Guard horizon `m`; defaults to `8 t`.
    pub guard: Option<u64>,
    pub max_attempts: u64,
    pub pilot_paths: u64,
    pub acceptance_floor: f64,
    /// Also run with guard `2m` and compare.
    pub bias_proxy: bool,
}

impl Default for RejectionOptions {
    fn default() -> Self {
        Self {
            guard: None,
            max_attempts: 1 << 30,
            pilot_paths: 1 << 14,
            acceptance_floor: 1e-4,
            bias_proxy: true,
        }
    }
}

/// Mean spread `X_k(t) - X_1(t)` under guards `m` and `2m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasProxy {
    pub guard_m: EstimateCI,
    pub guard_2m: EstimateCI,
    pub z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RejectionSample {
    pub guard: u64,
    pub t_steps: u64,
    /// `paths[s][t]` for `t = 0..=t_steps`.
    pub paths: Vec<Vec<Vec<f64>>>,
    pub attempts: u64,
    pub acceptance: EstimateCI,
    pub predicted_acceptance: f64,
    pub bias_proxy: Option<BiasProxy>,
}

fn spread(paths: &[Vec<Vec<f64>>]) -> EstimateCI {
    let mut m = Moments::default();
    for p in paths {
        let last = p.last().unwrap();
        m.push(last[last.len() - 1] - last[0]);
    }
    m.estimate()
}

/// Predicted `P_x(tau > m)` from a pilot run and a tail fit.
pub fn predicted_acceptance(cfg: &WalkConfig, m: u64, pilot_paths: u64) -> Result<f64> {
    if m == 0 {
        return Ok(1.0);
    }
    let mut ladder: Vec<u64> = (0..64).map(|e| 1u64 << e).take_while(|&n| n < m).collect();
    ladder.push(m);
    let pilot = cfg.with_seed(derive_seed(cfg.master_seed(), 7));
    let surv = batch_survival(&pilot, &ladder, pilot_paths)?;
    let direct = *surv.last().unwrap();
    let points: Vec<(u64, EstimateCI)> = ladder.iter().copied().zip(surv).collect();
    let sigma2 = cfg.dist().variance;
    if direct.mean * pilot_paths as f64 >= 20.0 {
        return Ok(direct.mean);
    }
    match tail_fit(&points, sigma2) {
        Ok(fit) => Ok(fit.predict(m as f64, sigma2).min(1.0)),
        Err(_) => Ok(direct.mean),
    }
}

/// Conditioned paths `X(0..=t)` given `tau > m`, approximating the
/// transformed law.
pub fn transform_paths_rejection(
    cfg: &WalkConfig,
    t_steps: u64,
    target: usize,
    opts: &RejectionOptions,
) -> Result<RejectionSample> {
    let guard = opts.guard.unwrap_or(8 * t_steps).max(t_steps);
    if opts.guard.is_some_and(|m| m < t_steps) {
        return Err(Error::InvalidArgument(format!(
            "guard {} shorter than the path length {t_steps}",
            opts.guard.unwrap()
        )));
    }
    let predicted = predicted_acceptance(cfg, guard, opts.pilot_paths)?;
    if predicted < opts.acceptance_floor {
        return Err(Error::Infeasible {
            predicted_acceptance: predicted,
            floor: opts.acceptance_floor,
            predicted_attempts: target as f64 / predicted.max(f64::MIN_POSITIVE),
        });
    }
    let times: Vec<u64> = (0..=t_steps).collect();
    let run = conditioned_paths(cfg, &times, guard, target, opts.max_attempts)?;
    let bias_proxy = if opts.bias_proxy && guard > 0 {
        let other = cfg.with_seed(derive_seed(cfg.master_seed(), 5));
        let run2 = conditioned_paths(&other, &times, 2 * guard, target, opts.max_attempts)?;
        let (a, b) = (spread(&run.paths), spread(&run2.paths));
        let se = (a.stderr.powi(2) + b.stderr.powi(2)).sqrt();
        Some(BiasProxy {
            guard_m: a,
            guard_2m: b,
            z: if se > 0.0 { (a.mean - b.mean) / se } else { 0.0 },
        })
    } else {
        None
    };
    Ok(RejectionSample {
        guard,
        t_steps,
        paths: run.paths,
        attempts: run.attempts,
        acceptance: run.acceptance,
        predicted_acceptance: predicted,
        bias_proxy,
    })
}

// ---------------------------------------------------------------- limit laws

/// Goodness of fit of rescaled transformed endpoints against the Hermite
/// ensemble `Z_2^{-1} e^{-|y|^2/2} Delta(y)^2`.
pub fn hermite_distance(samples: &[Vec<f64>], k: usize, lattice_width: f64) -> Result<GofReport> {
    GofReference::cached(k, 2)?.evaluate(samples, lattice_width)
}

static DYSON_CLAMPS: AtomicU64 = AtomicU64::new(0);

/// Number of negative round-off values clamped by [`dyson_density`].
pub fn dyson_clamp_count() -> u64 {
    DYSON_CLAMPS.load(Ordering::Relaxed)
}

/// `det[phi_t(y_j - x_i)] Delta(y) / Delta(x)` without domain checks; the
/// value is symmetric in `y`.
fn dyson_kernel<T: Real>(x: &[T], t: T, y: &[T]) -> T {
    let two = T::from_f64(2.0).unwrap();
    let norm = (two * T::PI() * t).sqrt();
    let m: Vec<Vec<T>> = x
        .iter()
        .map(|&xi| {
            y.iter()
                .map(|&yj| (-(yj - xi) * (yj - xi) / (two * t)).exp() / norm)
                .collect()
        })
        .collect();
    determinant(&m) * vandermonde(y) / vandermonde(x)
}

/// Transition density of Dyson's Brownian motions from `x` over time `t`.
pub fn dyson_density<T: Real>(x: &[T], t: T, y: &[T]) -> Result<T> {
    if !in_weyl(x) || !in_weyl(y) || x.len() != y.len() {
        return Err(Error::InvalidArgument(format!(
            "dyson density needs x, y in W of equal dimension (got {} and {} coordinates)",
            x.len(),
            y.len()
        )));
    }
    if !(t > T::zero()) {
        return Err(Error::InvalidArgument("t must be positive".into()));
    }
    let v = dyson_kernel(x, t, y);
    if v < T::zero() {
        DYSON_CLAMPS.fetch_add(1, Ordering::Relaxed);
        return Ok(T::zero());
    }
    Ok(v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DysonReport {
    pub k: usize,
    pub n: u64,
    pub t: f64,
    pub steps: u64,
    pub start: Vec<f64>,
    /// `"exact_chain"` or `"rejection"`.
    pub sampler: String,
    pub samples: usize,
    pub reference_samples: usize,
    pub tv: f64,
    pub ks_per_gap: Vec<f64>,
    pub ks_p_proxy: Vec<f64>,
    /// Negative round-off values of the reference density set to zero.
    pub clamps: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DysonOptions {
    pub samples: usize,
    pub reference_samples: usize,
    pub rejection: RejectionOptions,
}

impl Default for DysonOptions {
    fn default() -> Self {
        Self {
            samples: 10_000,
            reference_samples: 100_000,
            rejection: RejectionOptions {
                bias_proxy: false,
                ..Default::default()
            },
        }
    }
}

/// Two-sample KS distance where each value of `a` is spread uniformly over
/// a cell of width `width` centred on it.
pub fn ks_two_sample_smoothed(a: &[f64], width: f64, b: &[f64]) -> f64 {
    if width <= 0.0 {
        return crate::asymptotics::ks_two_sample(a, b);
    }
    let mut b = b.to_vec();
    b.sort_by(f64::total_cmp);
    let nb = b.len() as f64;
    let ecdf_b = |t: f64| b.partition_point(|&v| v <= t) as f64 / nb;
    let ecdf_b_left = |t: f64| b.partition_point(|&v| v < t) as f64 / nb;
    let mut lower: Vec<f64> = a.iter().map(|v| v - width / 2.0).collect();
    lower.sort_by(f64::total_cmp);
    let na = lower.len() as f64;
    let mut prefix = vec![0.0];
    for l in &lower {
        prefix.push(prefix.last().unwrap() + l);
    }
    let ecdf_a = |t: f64| {
        let full = lower.partition_point(|&l| l <= t - width);
        let part = lower.partition_point(|&l| l < t);
        let m = (part - full) as f64;
        (full as f64 + (m * t - (prefix[part] - prefix[full])) / width) / na
    };
    let mut d: f64 = 0.0;
    for &t in &b {
        let fa = ecdf_a(t);
        d = d.max((fa - ecdf_b(t)).abs()).max((fa - ecdf_b_left(t)).abs());
    }
    for &l in &lower {
        for t in [l, l + width] {
            d = d.max((ecdf_a(t) - ecdf_b(t)).abs());
        }
    }
    d
}

/// Compares rescaled transformed marginals `X(floor(t n)) / sqrt(n)` from
/// `sqrt(n) x_unit` with the Dyson density from `x_unit` at time
/// `t sigma^2`.
pub fn dyson_compare(cfg: &WalkConfig, x_unit: &[f64], t: f64, n: u64, opts: &DysonOptions) -> Result<DysonReport> {
    if !in_weyl(x_unit) {
        return Err(Error::InvalidArgument(format!("x_unit {x_unit:?} not in W")));
    }
    if !(t > 0.0) || n == 0 {
        return Err(Error::InvalidArgument("need t > 0 and n >= 1".into()));
    }
    let k = x_unit.len();
    let sn = (n as f64).sqrt();
    let steps = (t * n as f64).floor() as u64;
    let start = snap_to_lattice(cfg, &x_unit.iter().map(|c| c * sn).collect::<Vec<_>>());
    let c = cfg.with_start(start.clone())?;
    let seed = cfg.master_seed();
    let istart: Vec<i64> = start.iter().map(|&v| v as i64).collect();
    let table = if cfg.dist().is_lattice() && closed_form_kind(cfg.dist(), &istart).is_some() {
        TransformTable::closed_form(cfg.dist(), k).ok()
    } else {
        None
    };
    let (sampler, endpoints): (&str, Vec<Vec<f64>>) = match table {
        Some(table) => {
            let paths = sample_transformed_chain(&table, &istart, &[steps], opts.samples as u64, seed)?;
            (
                "exact_chain",
                paths
                    .into_iter()
                    .map(|p| p[0].iter().map(|&v| v as f64 / sn).collect())
                    .collect(),
            )
        }
        None => {
            let run = transform_paths_rejection(&c, steps, opts.samples, &opts.rejection)?;
            (
                "rejection",
                run.paths
                    .into_iter()
                    .map(|p| p[steps as usize].iter().map(|v| v / sn).collect())
                    .collect(),
            )
        }
    };
    let sigma = cfg.dist().sigma();
    let tt = t * sigma * sigma;
    let xu = x_unit.to_vec();
    let grid = Grid {
        lo: -4.0 * sigma,
        hi: 4.0 * sigma,
        width: 0.25 * sigma,
    };
    let nodes = if k >= 4 { 4 } else { 8 };
    let clamps = AtomicU64::new(0);
    let clamped = |y: &[f64]| {
        let v = dyson_kernel(&xu, tt, y);
        if v < 0.0 {
            clamps.fetch_add(1, Ordering::Relaxed);
        }
        v.max(0.0)
    };
    let binned = BinnedReference::new(k, grid, nodes, &clamped);
    let tv = binned.total_variation(&endpoints);
    let envelope = EnvelopeSampler::new(xu.clone(), tt, 1.0, false);
    let target = |y: &[f64]| clamped(y) * vandermonde(&xu);
    let reference = envelope.sample_many(opts.reference_samples, derive_seed(seed, 11), 0, &target);
    let width = match cfg.dist().lattice {
        Some(lat) => lat.span as f64 / sn,
        None => 0.0,
    };
    let (na, nb) = (endpoints.len() as f64, reference.len() as f64);
    let mut ks_per_gap = Vec::with_capacity(k - 1);
    let mut ks_p_proxy = Vec::with_capacity(k - 1);
    for i in 0..k - 1 {
        let ga: Vec<f64> = endpoints.iter().map(|y| y[i + 1] - y[i]).collect();
        let gb: Vec<f64> = reference.iter().map(|y| y[i + 1] - y[i]).collect();
        let d = ks_two_sample_smoothed(&ga, width, &gb);
        ks_per_gap.push(d);
        ks_p_proxy.push(kolmogorov_p(na * nb / (na + nb), d));
    }
    Ok(DysonReport {
        k,
        n,
        t,
        steps,
        start,
        sampler: sampler.into(),
        samples: endpoints.len(),
        reference_samples: reference.len(),
        tv,
        ks_per_gap,
        ks_p_proxy,
        clamps: clamps.into_inner(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::{make_distribution, DistSpec};

    fn rad() -> StepDistribution {
        make_distribution(&DistSpec::Rademacher).unwrap()
    }

    #[test]
    fn gap_one_moves_to_three_or_stays() {
        let table = TransformTable::closed_form(&rad(), 2).unwrap();
        let s = table.one_step(&[0, 1]).unwrap();
        assert_eq!(s.exact_mass.as_deref(), Some("1"));
        let mut by_gap: BTreeMap<i64, f64> = BTreeMap::new();
        for (d, w) in &s.moves {
            *by_gap.entry(1 + d[1] - d[0]).or_default() += w;
        }
        assert_eq!(by_gap.len(), 2);
        assert!((by_gap[&1] - 0.5).abs() < 1e-15);
        assert!((by_gap[&3] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn exact_table_normalization_matches_truncation() {
        let table = TransformTable::exact(&rad(), 3, 0, 8, 6).unwrap();
        for x in [[2, 3, 4], [1, 4, 5], [3, 4, 6]] {
            let s = table.one_step(&x).unwrap();
            assert!((s.mass - 1.0).abs() <= s.budget + 1e-12);
        }
    }

    #[test]
    fn dyson_two_point_value() {
        let phi = |u: f64| (-u * u / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let v = dyson_density(&[0.0, 1.0], 1.0, &[0.0, 1.0]).unwrap();
        assert!((v - (phi(0.0).powi(2) - phi(1.0).powi(2))).abs() < 1e-15);
        assert!(dyson_density(&[1.0, 0.0], 1.0, &[0.0, 1.0]).is_err());
        assert!(dyson_density(&[0.0, 1.0], 0.0, &[0.0, 1.0]).is_err());
        let near = dyson_density(&[0.0, 1.0], 1.0, &[0.5, 0.5 + 1e-9]).unwrap();
        assert!(near < 1e-9);
    }

    #[test]
    fn dyson_f32() {
        let v: f32 = dyson_density(&[0.0f32, 1.0], 1.0, &[0.0, 1.0]).unwrap();
        assert!((v - 0.100_60).abs() < 1e-4);
    }

    #[test]
    fn chain_stays_in_weyl() {
        let table = TransformTable::closed_form(&rad(), 3).unwrap();
        let paths = sample_transformed_chain(&table, &[0, 2, 4], &[0, 10, 50], 300, 4).unwrap();
        assert!(paths.iter().flatten().all(|y| in_weyl(y)));
        assert!(paths.iter().all(|p| p[0] == vec![0, 2, 4]));
    }

    #[test]
    fn zero_steps_returns_start() {
        let cfg = WalkConfig::new(vec![0.0, 1.0], rad(), 1).unwrap();
        let run = transform_paths_rejection(&cfg, 0, 10, &RejectionOptions::default()).unwrap();
        assert!(run.paths.iter().all(|p| p == &vec![vec![0.0, 1.0]]));
    }

    #[test]
    fn smoothed_two_sample_ks() {
        let a: Vec<f64> = (0..100).map(|i| 0.005 + 0.01 * i as f64).collect();
        let b: Vec<f64> = (0..10_000).map(|i| (i as f64 + 0.5) / 10_000.0).collect();
        assert!(ks_two_sample_smoothed(&a, 0.01, &b) < 2e-4);
    }
}
