//! Path simulation up to the exit time and deterministic parallel batches.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distributions::{RandomStream, StepDistribution};
use crate::error::{Error, Result};
use crate::geometry::{in_weyl, vandermonde, Configuration};

/// Paths per work unit. Chunks are folded sequentially and merged in index
/// order, so results do not depend on the thread count.
pub const CHUNK: u64 = 1024;

/// Attempts per round in rejection sampling.
pub const ROUND: u64 = 1 << 16;

/// z-quantile for the default 95% intervals.
const Z95: f64 = 1.959_963_984_540_054;

#[derive(Debug, Clone, PartialEq)]
pub struct WalkConfig {
    start: Configuration<f64>,
    dist: StepDistribution,
    master_seed: u64,
}

impl WalkConfig {
    pub fn new(start: Vec<f64>, dist: StepDistribution, master_seed: u64) -> Result<Self> {
        let start = Configuration::new(start)?;
        check_start(start.coords(), &dist)?;
        if dist.moment_order.is_finite() {
            log::warn!(
                "step law has finite moments only up to order {}; convergence of V_n is not guaranteed",
                dist.moment_order
            );
        }
        Ok(Self {
            start,
            dist,
            master_seed,
        })
    }

    pub fn k(&self) -> usize {
        self.start.k()
    }

    pub fn start(&self) -> &[f64] {
        self.start.coords()
    }

    pub fn dist(&self) -> &StepDistribution {
        &self.dist
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn with_start(&self, start: Vec<f64>) -> Result<Self> {
        Self::new(start, self.dist.clone(), self.master_seed)
    }

    pub fn with_seed(&self, master_seed: u64) -> Self {
        Self {
            master_seed,
            ..self.clone()
        }
    }

    /// Integer start coordinates; lattice laws only.
    pub fn lattice_start(&self) -> Result<Vec<i64>> {
        self.dist.require_lattice()?;
        Ok(self.start.coords().iter().map(|&c| c as i64).collect())
    }

    pub fn stream(&self, path_index: u64) -> RandomStream {
        RandomStream::new(self.master_seed, path_index)
    }
}

fn check_start(x: &[f64], dist: &StepDistribution) -> Result<()> {
    if !in_weyl(x) {
        return Err(Error::InvalidArgument(format!("start {x:?} not strictly ordered")));
    }
    if let Some(lat) = dist.lattice {
        if x.iter().any(|c| c.fract() != 0.0 || c.abs() > 2f64.powi(52)) {
            return Err(Error::InvalidArgument(format!(
                "lattice walk needs integer start coordinates, got {x:?}"
            )));
        }
        let g = lat.site_spacing();
        let r0 = (x[0] as i64).rem_euclid(g);
        if x.iter().any(|&c| (c as i64).rem_euclid(g) != r0) {
            return Err(Error::InvalidArgument(format!(
                "start coordinates {x:?} do not share a residue modulo the lattice spacing {g}"
            )));
        }
    }
    Ok(())
}

/// Record of one simulated path.
///
/// `terminal` is the position at `stop_time`; `delta_at_stop` is its
/// Vandermonde determinant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoppedOutcome {
    pub stop_time: u64,
    pub exited: bool,
    pub terminal: Vec<f64>,
    pub delta_at_stop: f64,
}

impl StoppedOutcome {
    /// `tau > n` for this path (valid for `n <= horizon`).
    pub fn survives(&self, n: u64) -> bool {
        !self.exited || self.stop_time > n
    }
}

fn left_weyl(x: &[f64]) -> bool {
    x.windows(2).any(|w| w[0] >= w[1])
}

fn check_horizon(horizon: u64) -> Result<()> {
    if horizon == 0 {
        return Err(Error::InvalidArgument("horizon must be >= 1".into()));
    }
    Ok(())
}

pub fn run_path(cfg: &WalkConfig, horizon: u64, stream: &mut RandomStream) -> Result<StoppedOutcome> {
    check_horizon(horizon)?;
    Ok(simulate(cfg, horizon, stream, &mut |_, _| {}))
}

/// Runs a path and calls `visit(n, x)` after every step while still in W
/// (and once at `n = 0`).
fn simulate(
    cfg: &WalkConfig,
    horizon: u64,
    stream: &mut RandomStream,
    visit: &mut dyn FnMut(u64, &[f64]),
) -> StoppedOutcome {
    let dist = &cfg.dist;
    let mut x = cfg.start().to_vec();
    visit(0, &x);
    for n in 1..=horizon {
        for c in x.iter_mut() {
            *c += dist.sample(stream);
        }
        if left_weyl(&x) {
            return StoppedOutcome {
                stop_time: n,
                exited: true,
                delta_at_stop: vandermonde(&x),
                terminal: x,
            };
        }
        visit(n, &x);
    }
    StoppedOutcome {
        stop_time: horizon,
        exited: false,
        delta_at_stop: vandermonde(&x),
        terminal: x,
    }
}

/// Replays a path with prescribed steps (`steps[n][i]` moves walker `i` at
/// time `n + 1`). The horizon is `steps.len()`.
pub fn run_path_from_steps(cfg: &WalkConfig, steps: &[Vec<f64>]) -> Result<StoppedOutcome> {
    check_horizon(steps.len() as u64)?;
    let mut x = cfg.start().to_vec();
    for (n, s) in steps.iter().enumerate() {
        if s.len() != x.len() {
            return Err(Error::InvalidArgument(format!(
                "step {n} has {} components, expected {}",
                s.len(),
                x.len()
            )));
        }
        for (c, d) in x.iter_mut().zip(s) {
            *c += d;
        }
        if left_weyl(&x) {
            return Ok(StoppedOutcome {
                stop_time: n as u64 + 1,
                exited: true,
                delta_at_stop: vandermonde(&x),
                terminal: x,
            });
        }
    }
    Ok(StoppedOutcome {
        stop_time: steps.len() as u64,
        exited: false,
        delta_at_stop: vandermonde(&x),
        terminal: x,
    })
}

/// Monte Carlo estimate with a normal-approximation interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimateCI {
    pub mean: f64,
    pub stderr: f64,
    pub n_samples: u64,
    pub confidence: f64,
}

impl EstimateCI {
    pub fn exact(value: f64) -> Self {
        Self {
            mean: value,
            stderr: 0.0,
            n_samples: 1,
            confidence: 0.95,
        }
    }

    pub fn from_moments(m: &Moments) -> Self {
        let n = m.count.max(1);
        let mean = m.mean();
        let var = if m.count > 1 {
            ((m.sum_sq - m.sum * mean) / (m.count - 1) as f64).max(0.0)
        } else {
            0.0
        };
        Self {
            mean,
            stderr: (var / n as f64).sqrt(),
            n_samples: n,
            confidence: 0.95,
        }
    }

    pub fn from_bernoulli(successes: u64, trials: u64) -> Self {
        let n = trials.max(1);
        let p = successes as f64 / n as f64;
        Self {
            mean: p,
            stderr: (p * (1.0 - p) / n as f64).sqrt(),
            n_samples: n,
            confidence: 0.95,
        }
    }

    pub fn half_width(&self) -> f64 {
        Z95 * self.stderr
    }

    pub fn lo(&self) -> f64 {
        self.mean - self.half_width()
    }

    pub fn hi(&self) -> f64 {
        self.mean + self.half_width()
    }

    /// `|mean - value|` in units of the standard error (`inf` when the
    /// stderr is zero and the values differ).
    pub fn z_score(&self, value: f64) -> f64 {
        let d = (self.mean - value).abs();
        if d == 0.0 {
            0.0
        } else {
            d / self.stderr
        }
    }

    pub fn within(&self, value: f64, n_stderr: f64) -> bool {
        (self.mean - value).abs() <= n_stderr * self.stderr
    }

    pub fn scale(&self, c: f64) -> Self {
        Self {
            mean: self.mean * c,
            stderr: self.stderr * c.abs(),
            ..*self
        }
    }

    pub fn shift(&self, c: f64) -> Self {
        Self {
            mean: self.mean + c,
            ..*self
        }
    }
}

/// Count, sum and sum of squares; merging is associative on the counts and
/// deterministic under a fixed merge order.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub count: u64,
    pub sum: f64,
    pub sum_sq: f64,
}

impl Moments {
    pub fn push(&mut self, v: f64) {
        self.count += 1;
        self.sum += v;
        self.sum_sq += v * v;
    }

    pub fn merge(&mut self, other: &Moments) {
        self.count += other.count;
        self.sum += other.sum;
        self.sum_sq += other.sum_sq;
    }

    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.sum / self.count as f64
        }
    }

    pub fn estimate(&self) -> EstimateCI {
        EstimateCI::from_moments(self)
    }
}

/// Folds `f(path_index, &mut acc)` over `0..paths` in fixed chunks (in
/// parallel), then merges chunk results in index order.
pub fn par_fold<A, F, M>(paths: u64, init: impl Fn() -> A + Sync, f: F, merge: M) -> A
where
    A: Send,
    F: Fn(u64, &mut A) + Sync,
    M: Fn(&mut A, A),
{
    par_fold_range(0, paths, init, f, merge)
}

pub fn par_fold_range<A, F, M>(first: u64, end: u64, init: impl Fn() -> A + Sync, f: F, merge: M) -> A
where
    A: Send,
    F: Fn(u64, &mut A) + Sync,
    M: Fn(&mut A, A),
{
    let n_chunks = (end.saturating_sub(first)).div_ceil(CHUNK);
    let parts: Vec<A> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = init();
            let lo = first + c * CHUNK;
            for i in lo..(lo + CHUNK).min(end) {
                f(i, &mut acc);
            }
            acc
        })
        .collect();
    let mut total = init();
    for p in parts {
        merge(&mut total, p);
    }
    total
}

fn check_horizons(horizons: &[u64]) -> Result<()> {
    if horizons.is_empty() {
        return Err(Error::InvalidArgument("no horizons given".into()));
    }
    if horizons.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument(format!(
            "horizons must be strictly increasing, got {horizons:?}"
        )));
    }
    Ok(())
}

fn check_paths(paths: u64) -> Result<()> {
    if paths == 0 {
        return Err(Error::InvalidArgument("paths must be >= 1".into()));
    }
    Ok(())
}

/// Estimates `P_x(tau > n)` at every listed horizon from one pass per path.
pub fn batch_survival(cfg: &WalkConfig, horizons: &[u64], paths: u64) -> Result<Vec<EstimateCI>> {
    check_horizons(horizons)?;
    check_paths(paths)?;
    let h_max = *horizons.last().unwrap();
    if h_max == 0 {
        return Ok(vec![EstimateCI::from_bernoulli(paths, paths)]);
    }
    let counts = par_fold(
        paths,
        || vec![0u64; horizons.len()],
        |i, acc| {
            let out = simulate(cfg, h_max, &mut cfg.stream(i), &mut |_, _| {});
            for (c, &h) in acc.iter_mut().zip(horizons) {
                if out.survives(h) {
                    *c += 1;
                }
            }
        },
        |a, b| a.iter_mut().zip(b).for_each(|(x, y)| *x += y),
    );
    Ok(counts
        .into_iter()
        .map(|c| EstimateCI::from_bernoulli(c, paths))
        .collect())
}

/// Estimates `E_x[Delta(X(tau)) 1{tau <= n}]` for every listed `n` from a
/// single pass (the same paths serve every horizon).
pub fn stopped_vandermonde_profile(cfg: &WalkConfig, ns: &[u64], paths: u64) -> Result<Vec<EstimateCI>> {
    check_horizons(ns)?;
    check_paths(paths)?;
    let n_max = *ns.last().unwrap();
    if n_max == 0 {
        return Ok(vec![EstimateCI {
            mean: 0.0,
            stderr: 0.0,
            n_samples: paths,
            confidence: 0.95,
        }]);
    }
    let moments = par_fold(
        paths,
        || vec![Moments::default(); ns.len()],
        |i, acc| {
            let out = simulate(cfg, n_max, &mut cfg.stream(i), &mut |_, _| {});
            for (m, &n) in acc.iter_mut().zip(ns) {
                let v = if out.exited && out.stop_time <= n {
                    out.delta_at_stop
                } else {
                    0.0
                };
                m.push(v);
            }
        },
        |a, b| a.iter_mut().zip(&b).for_each(|(x, y)| x.merge(y)),
    );
    Ok(moments.iter().map(Moments::estimate).collect())
}

pub fn batch_stopped_vandermonde(cfg: &WalkConfig, n: u64, paths: u64) -> Result<EstimateCI> {
    Ok(stopped_vandermonde_profile(cfg, &[n], paths)?[0])
}

/// Survivors of a rejection run, with positions recorded at fixed times.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionedPaths {
    pub record_times: Vec<u64>,
    /// `paths[s][r]` is survivor `s` at `record_times[r]`.
    pub paths: Vec<Vec<Vec<f64>>>,
    pub attempts: u64,
    pub acceptance: EstimateCI,
}

/// Simulates unconditioned paths in rounds of [`ROUND`] attempts and keeps
/// those with `tau > guard`, in path-index order, until `target` survivors
/// are collected.
pub fn conditioned_paths(
    cfg: &WalkConfig,
    record_times: &[u64],
    guard: u64,
    target: usize,
    max_attempts: u64,
) -> Result<ConditionedPaths> {
    if target == 0 {
        return Err(Error::InvalidArgument("target_samples must be >= 1".into()));
    }
    if let Some(&t) = record_times.iter().find(|&&t| t > guard) {
        return Err(Error::InvalidArgument(format!(
            "record time {t} beyond guard horizon {guard}"
        )));
    }
    let mut kept: Vec<Vec<Vec<f64>>> = Vec::with_capacity(target);
    let mut survivors = 0u64;
    let mut attempts = 0u64;
    while kept.len() < target && attempts < max_attempts {
        let end = (attempts + ROUND).min(max_attempts);
        let round = par_fold_range(
            attempts,
            end,
            Vec::new,
            |i, acc: &mut Vec<Vec<Vec<f64>>>| {
                let mut rec: Vec<Option<Vec<f64>>> = vec![None; record_times.len()];
                let out = simulate(cfg, guard.max(1), &mut cfg.stream(i), &mut |n, x| {
                    for (slot, &t) in rec.iter_mut().zip(record_times) {
                        if t == n {
                            *slot = Some(x.to_vec());
                        }
                    }
                });
                if out.survives(guard) {
                    acc.push(rec.into_iter().map(|r| r.expect("recorded")).collect());
                }
            },
            |a, b| a.extend(b),
        );
        survivors += round.len() as u64;
        attempts = end;
        kept.extend(round);
    }
    let acceptance = EstimateCI::from_bernoulli(survivors, attempts);
    if kept.len() < target {
        return Err(Error::PartialResult {
            collected: kept.len(),
            wanted: target,
            attempts,
            acceptance: acceptance.mean,
        });
    }
    kept.truncate(target);
    Ok(ConditionedPaths {
        record_times: record_times.to_vec(),
        paths: kept,
        attempts,
        acceptance,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionedEndpoints {
    /// Rescaled endpoints `X(n) / sqrt(n)`.
    pub endpoints: Vec<Vec<f64>>,
    pub attempts: u64,
    pub acceptance: EstimateCI,
}

pub fn conditioned_endpoints(
    cfg: &WalkConfig,
    n: u64,
    target_samples: usize,
    max_attempts: u64,
) -> Result<ConditionedEndpoints> {
    let run = conditioned_paths(cfg, &[n], n, target_samples, max_attempts)?;
    let scale = if n == 0 { 1.0 } else { 1.0 / (n as f64).sqrt() };
    Ok(ConditionedEndpoints {
        endpoints: run
            .paths
            .into_iter()
            .map(|mut p| p.remove(0).into_iter().map(|c| c * scale).collect())
            .collect(),
        attempts: run.attempts,
        acceptance: run.acceptance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::{make_distribution, DistSpec};

    fn rademacher(start: Vec<f64>) -> WalkConfig {
        WalkConfig::new(start, make_distribution(&DistSpec::Rademacher).unwrap(), 1).unwrap()
    }

    #[test]
    fn forced_exit() {
        let cfg = rademacher(vec![0.0, 1.0]);
        let out = run_path_from_steps(&cfg, &[vec![1.0, -1.0]]).unwrap();
        assert_eq!(out.stop_time, 1);
        assert!(out.exited);
        assert_eq!(out.terminal, vec![1.0, 0.0]);
        assert_eq!(out.delta_at_stop, -1.0);
    }

    #[test]
    fn enumeration_gives_three_quarters() {
        let cfg = rademacher(vec![0.0, 1.0]);
        let mut alive = 0;
        for a in [-1.0, 1.0] {
            for b in [-1.0, 1.0] {
                if !run_path_from_steps(&cfg, &[vec![a, b]]).unwrap().exited {
                    alive += 1;
                }
            }
        }
        assert_eq!(alive, 3);
    }

    #[test]
    fn horizon_zero_rejected() {
        let cfg = rademacher(vec![0.0, 1.0]);
        assert!(run_path(&cfg, 0, &mut cfg.stream(0)).is_err());
    }

    #[test]
    fn survivor_terminal_in_weyl() {
        let cfg = rademacher(vec![0.0, 1.0]);
        for i in 0..200 {
            let out = run_path(&cfg, 1, &mut cfg.stream(i)).unwrap();
            assert_eq!(out.exited, !in_weyl(&out.terminal));
            if !out.exited {
                assert_eq!(out.stop_time, 1);
            }
        }
    }

    #[test]
    fn start_validation() {
        let d = make_distribution(&DistSpec::Rademacher).unwrap();
        assert!(WalkConfig::new(vec![1.0, 0.0], d.clone(), 0).is_err());
        assert!(WalkConfig::new(vec![0.0, 0.5], d.clone(), 0).is_err());
        let even = make_distribution(&DistSpec::CustomLattice {
            masses: [("-2", "1/2"), ("2", "1/2")]
                .iter()
                .map(|(a, b)| (a.to_string(), b.to_string()))
                .collect(),
        })
        .unwrap();
        assert!(WalkConfig::new(vec![0.0, 1.0], even.clone(), 0).is_err());
        assert!(WalkConfig::new(vec![0.0, 2.0], even, 0).is_ok());
    }

    #[test]
    fn horizon_zero_survival_is_one() {
        let cfg = rademacher(vec![0.0, 1.0]);
        let est = batch_survival(&cfg, &[0], 10).unwrap();
        assert_eq!(est[0].mean, 1.0);
        assert_eq!(batch_stopped_vandermonde(&cfg, 0, 10).unwrap().mean, 0.0);
    }

    #[test]
    fn survival_is_monotone_and_near_three_quarters() {
        let cfg = rademacher(vec![0.0, 1.0]);
        let est = batch_survival(&cfg, &[1, 2, 4, 8, 16], 50_000).unwrap();
        assert!(est[0].within(0.75, 4.0));
        assert!(est.windows(2).all(|w| w[0].mean >= w[1].mean));
    }

    #[test]
    fn stopped_vandermonde_one_step() {
        let cfg = rademacher(vec![0.0, 1.0]);
        let est = batch_stopped_vandermonde(&cfg, 1, 50_000).unwrap();
        assert!(est.within(-0.25, 4.0), "{est:?}");
    }

    #[test]
    fn results_do_not_depend_on_thread_count() {
        let cfg = rademacher(vec![0.0, 1.0, 2.0]);
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| {
                    (
                        batch_survival(&cfg, &[4, 16, 64], 10_000).unwrap(),
                        batch_stopped_vandermonde(&cfg, 64, 10_000).unwrap(),
                    )
                })
        };
        let (a, b) = (run(1), run(4));
        assert_eq!(a.0, b.0);
        assert_eq!(a.1.mean.to_bits(), b.1.mean.to_bits());
        assert_eq!(a.1.stderr.to_bits(), b.1.stderr.to_bits());
    }

    #[test]
    fn conditioned_endpoints_are_ordered() {
        let cfg = rademacher(vec![0.0, 1.0]);
        let res = conditioned_endpoints(&cfg, 16, 500, 1_000_000).unwrap();
        assert_eq!(res.endpoints.len(), 500);
        assert!(res.endpoints.iter().all(|y| in_weyl(y)));
    }

    #[test]
    fn shortfall_is_partial_result() {
        let cfg = rademacher(vec![0.0, 1.0]);
        match conditioned_endpoints(&cfg, 4096, 1000, 100) {
            Err(Error::PartialResult { wanted, attempts, .. }) => {
                assert_eq!(wanted, 1000);
                assert_eq!(attempts, 100);
            }
            other => panic!("expected partial result, got {other:?}"),
        }
    }

    #[test]
    fn moments_merge_matches_sequential() {
        let xs: Vec<f64> = (0..100).map(|i| (i as f64).sin()).collect();
        let mut seq = Moments::default();
        xs.iter().for_each(|&x| seq.push(x));
        let mut a = Moments::default();
        let mut b = Moments::default();
        xs[..37].iter().for_each(|&x| a.push(x));
        xs[37..].iter().for_each(|&x| b.push(x));
        a.merge(&b);
        assert_eq!(a.count, seq.count);
        assert!((a.sum - seq.sum).abs() < 1e-12);
        assert!((a.estimate().stderr - seq.estimate().stderr).abs() < 1e-12);
    }
}
