//! Monte Carlo estimates of `V_n(x) = Delta(x) - E_x[Delta(X(tau)) 1{tau <= n}]`
//! and of its limit `V`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distributions::{derive_seed, RandomStream};
use crate::engine::{run_path, stopped_vandermonde_profile, EstimateCI, Moments, WalkConfig};
use crate::error::{Error, Result};
use crate::geometry::{in_weyl, vandermonde};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VEstimate {
    pub x: Vec<f64>,
    pub n_used: u64,
    pub value: EstimateCI,
    /// `|V_{n_used} - V_{n_used / 2}|` on the same paths.
    pub tail_diagnostic: f64,
    /// False when the tail diagnostic exceeds three standard errors.
    pub converged: bool,
    /// `(n, V_n)` for every horizon evaluated.
    pub profile: Vec<(u64, EstimateCI)>,
}

impl VEstimate {
    /// `V > 4 stderr` (or `V > 0` when exact).
    pub fn positive(&self) -> bool {
        self.value.mean > 4.0 * self.value.stderr && self.value.mean > 0.0
    }
}

fn vn_profile(cfg: &WalkConfig, ns: &[u64], paths: u64) -> Result<Vec<EstimateCI>> {
    let delta = vandermonde(cfg.start());
    let positive: Vec<u64> = ns.iter().copied().filter(|&n| n > 0).collect();
    let stopped = if positive.is_empty() {
        Vec::new()
    } else {
        stopped_vandermonde_profile(cfg, &positive, paths)?
    };
    let mut it = stopped.into_iter();
    Ok(ns
        .iter()
        .map(|&n| {
            if n == 0 {
                EstimateCI {
                    n_samples: paths,
                    ..EstimateCI::exact(delta)
                }
            } else {
                it.next().unwrap().scale(-1.0).shift(delta)
            }
        })
        .collect())
}

fn check_paths(paths: u64) -> Result<()> {
    if paths == 0 {
        return Err(Error::InvalidArgument("paths must be >= 1".into()));
    }
    Ok(())
}

fn summarize(cfg: &WalkConfig, ns: Vec<u64>, values: Vec<EstimateCI>, n_used: u64) -> VEstimate {
    let at = |n: u64| values[ns.iter().position(|&m| m == n).unwrap()];
    let value = at(n_used);
    let tail_diagnostic = (value.mean - at(n_used / 2).mean).abs();
    VEstimate {
        x: cfg.start().to_vec(),
        n_used,
        value,
        tail_diagnostic,
        converged: tail_diagnostic <= 3.0 * value.stderr,
        profile: ns.into_iter().zip(values).collect(),
    }
}

pub fn estimate_vn(cfg: &WalkConfig, n: u64, paths: u64) -> Result<VEstimate> {
    check_paths(paths)?;
    let mut ns = vec![n / 2, n];
    ns.dedup();
    let values = vn_profile(cfg, &ns, paths)?;
    Ok(summarize(cfg, ns, values, n))
}

/// `V_{n_max}` on a doubling schedule, every horizon from the same paths.
pub fn estimate_v(cfg: &WalkConfig, schedule: &[u64], paths: u64) -> Result<VEstimate> {
    check_paths(paths)?;
    if schedule.is_empty() || schedule.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument(format!(
            "schedule must be nonempty and increasing, got {schedule:?}"
        )));
    }
    let n_max = *schedule.last().unwrap();
    let mut ns = schedule.to_vec();
    ns.push(n_max / 2);
    ns.sort_unstable();
    ns.dedup();
    let values = vn_profile(cfg, &ns, paths)?;
    let est = summarize(cfg, ns, values, n_max);
    if !est.converged {
        log::warn!(
            "V at {:?}: tail diagnostic {:.3e} exceeds 3 stderr ({:.3e})",
            est.x,
            est.tail_diagnostic,
            est.value.stderr
        );
    }
    Ok(est)
}

/// Doubling schedule `n, 2n, ..., n_max`.
pub fn doubling_schedule(first: u64, last: u64) -> Vec<u64> {
    let mut out = Vec::new();
    let mut n = first.max(1);
    while n < last {
        out.push(n);
        n *= 2;
    }
    out.push(last);
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarmonicityResidual {
    pub n: u64,
    /// `E_x[1{tau > 1} V_n(X(1))]`.
    pub lhs: EstimateCI,
    /// `V_{n+1}(x)`.
    pub rhs: EstimateCI,
    pub residual: EstimateCI,
    pub pass: bool,
}

/// Nested estimate of `E_x[1{tau > 1} V_n(X(1))] - V_{n+1}(x)`.
///
/// Inner path `j` uses the same stream for every outer sample, so the inner
/// estimates are positively correlated across outer draws. The standard
/// error combines the spread of the outer and the inner means.
pub fn harmonicity_residual(cfg: &WalkConfig, n: u64, outer: u64, inner: u64) -> Result<HarmonicityResidual> {
    if outer == 0 || inner == 0 {
        return Err(Error::InvalidArgument("outer and inner paths must be >= 1".into()));
    }
    let seed = cfg.master_seed();
    let outer_seed = derive_seed(seed, 1);
    let inner_seed = derive_seed(seed, 2);
    let firsts: Vec<Option<WalkConfig>> = (0..outer)
        .into_par_iter()
        .map(|i| {
            let out = run_path(cfg, 1, &mut RandomStream::new(outer_seed, i))?;
            if out.exited {
                Ok(None)
            } else {
                cfg.with_start(out.terminal).map(Some)
            }
        })
        .collect::<Result<_>>()?;
    let alive: Vec<&WalkConfig> = firsts.iter().flatten().collect();
    let (rows, cols) = if n == 0 {
        let rows: Vec<f64> = alive.iter().map(|c| vandermonde(c.start())).collect();
        let col = rows.iter().sum::<f64>() / outer as f64;
        (rows, vec![col; inner as usize])
    } else {
        let chunks: Vec<(Vec<f64>, Vec<f64>)> = (0..inner.div_ceil(crate::engine::CHUNK))
            .into_par_iter()
            .map(|c| -> Result<(Vec<f64>, Vec<f64>)> {
                let lo = c * crate::engine::CHUNK;
                let hi = (lo + crate::engine::CHUNK).min(inner);
                let mut rows = vec![0.0; alive.len()];
                let mut cols = Vec::with_capacity((hi - lo) as usize);
                for j in lo..hi {
                    let mut col = 0.0;
                    for (r, start) in rows.iter_mut().zip(&alive) {
                        let out = run_path(start, n, &mut RandomStream::new(inner_seed, j))?;
                        let stopped = if out.exited && out.stop_time <= n {
                            out.delta_at_stop
                        } else {
                            0.0
                        };
                        let v = vandermonde(start.start()) - stopped;
                        *r += v;
                        col += v;
                    }
                    cols.push(col / outer as f64);
                }
                Ok((rows, cols))
            })
            .collect::<Result<_>>()?;
        let mut rows = vec![0.0; alive.len()];
        let mut cols = Vec::with_capacity(inner as usize);
        for (r, c) in chunks {
            rows.iter_mut().zip(r).for_each(|(a, b)| *a += b);
            cols.extend(c);
        }
        rows.iter_mut().for_each(|r| *r /= inner as f64);
        (rows, cols)
    };
    let mut row_m = Moments::default();
    for i in 0..outer as usize {
        row_m.push(rows.get(i).copied().unwrap_or(0.0));
    }
    // killed outer samples contribute zero rows
    let mut col_m = Moments::default();
    cols.iter().for_each(|&c| col_m.push(c));
    let row_est = row_m.estimate();
    let col_se = if n == 0 { 0.0 } else { col_m.estimate().stderr };
    let lhs = EstimateCI {
        mean: row_est.mean,
        stderr: (row_est.stderr.powi(2) + col_se.powi(2)).sqrt(),
        n_samples: outer * inner,
        confidence: 0.95,
    };
    let direct = cfg.with_seed(derive_seed(seed, 3));
    let rhs = vn_profile(&direct, &[n + 1], outer * inner)?[0];
    let stderr = (lhs.stderr.powi(2) + rhs.stderr.powi(2)).sqrt();
    let residual = EstimateCI {
        mean: lhs.mean - rhs.mean,
        stderr,
        n_samples: outer * inner,
        confidence: 0.95,
    };
    Ok(HarmonicityResidual {
        n,
        lhs,
        rhs,
        pass: residual.mean.abs() <= 4.0 * stderr,
        residual,
    })
}

/// Nearest lattice configuration in W: each coordinate is rounded to the
/// site spacing (ties upward), then pushed up to keep the order strict.
pub fn snap_to_lattice(cfg: &WalkConfig, point: &[f64]) -> Vec<f64> {
    let Some(lat) = cfg.dist().lattice else {
        return point.to_vec();
    };
    let g = lat.site_spacing() as f64;
    let mut out: Vec<f64> = Vec::with_capacity(point.len());
    for &v in point {
        let mut c = (v / g + 0.5).floor() * g;
        if let Some(&prev) = out.last() {
            if c <= prev {
                c = prev + g;
            }
        }
        out.push(c);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub n: u64,
    pub start: Vec<f64>,
    pub v: VEstimate,
    /// `n^{-k(k-1)/4} V(start) / Delta(x_unit)`.
    pub ratio: EstimateCI,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingCheck {
    pub x_unit: Vec<f64>,
    pub delta_unit: f64,
    pub rows: Vec<ScalingRow>,
    pub band: (f64, f64),
    pub in_band: bool,
    /// `None` when fewer than two horizons were given.
    pub trend_ok: Option<bool>,
    pub pass: bool,
}

/// Tabulates `n^{-k(k-1)/4} V(sqrt(n) x_unit) / Delta(x_unit)`. `V` at each
/// `n` is `V_N` with `N = horizon_factor * n`.
pub fn scaling_check(
    cfg: &WalkConfig,
    x_unit: &[f64],
    n_list: &[u64],
    horizon_factor: u64,
    paths: u64,
) -> Result<ScalingCheck> {
    if !in_weyl(x_unit) {
        return Err(Error::InvalidArgument(format!("x_unit {x_unit:?} not in W")));
    }
    if n_list.is_empty() || n_list.windows(2).any(|w| w[0] >= w[1]) || n_list[0] == 0 {
        return Err(Error::InvalidArgument(format!(
            "n_list must be positive and increasing, got {n_list:?}"
        )));
    }
    let k = x_unit.len() as f64;
    let delta_unit = vandermonde(x_unit);
    let mut rows = Vec::with_capacity(n_list.len());
    for &n in n_list {
        let sn = (n as f64).sqrt();
        let start = snap_to_lattice(cfg, &x_unit.iter().map(|c| c * sn).collect::<Vec<_>>());
        let c = cfg.with_start(start.clone())?;
        let h = horizon_factor.max(1) * n;
        let v = estimate_v(&c, &doubling_schedule(h / 4, h), paths)?;
        let scale = (n as f64).powf(-k * (k - 1.0) / 4.0) / delta_unit;
        rows.push(ScalingRow {
            n,
            start,
            ratio: v.value.scale(scale),
            v,
        });
    }
    let band = (0.8, 1.2);
    let last = rows.last().unwrap().ratio;
    let in_band = last.mean >= band.0 && last.mean <= band.1;
    let trend_ok = if rows.len() < 2 {
        log::warn!("scaling check with a single n: trend test skipped");
        None
    } else {
        let tail = &rows[rows.len().saturating_sub(3)..];
        Some(tail.windows(2).all(|w| {
            let (a, b) = (w[0].ratio, w[1].ratio);
            let slack = 2.0 * (a.stderr.powi(2) + b.stderr.powi(2)).sqrt();
            (b.mean - 1.0).abs() <= (a.mean - 1.0).abs() + slack
        }))
    };
    Ok(ScalingCheck {
        x_unit: x_unit.to_vec(),
        delta_unit,
        pass: in_band && trend_ok.unwrap_or(true),
        rows,
        band,
        in_band,
        trend_ok,
    })
}

/// Smallest `C >= 0` with `V(x) <= Delta(x) + |x|^{k(k-1)/2} + C` over the
/// given estimates (upper confidence limits).
pub fn growth_bound_constant(estimates: &[VEstimate]) -> f64 {
    estimates
        .iter()
        .map(|e| {
            let k = e.x.len() as i32;
            let norm = e.x.iter().map(|c| c * c).sum::<f64>().sqrt();
            e.value.hi() - vandermonde(&e.x) - norm.powi(k * (k - 1) / 2)
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::{make_distribution, DistSpec};

    fn cfg(spec: DistSpec, x: Vec<f64>) -> WalkConfig {
        WalkConfig::new(x, make_distribution(&spec).unwrap(), 11).unwrap()
    }

    #[test]
    fn n_zero_is_delta() {
        let c = cfg(DistSpec::Gaussian { variance: 1.0 }, vec![0.0, 1.0]);
        let e = estimate_vn(&c, 0, 10).unwrap();
        assert_eq!(e.value.mean, 1.0);
        assert_eq!(e.value.stderr, 0.0);
    }

    #[test]
    fn one_step_rademacher() {
        let c = cfg(DistSpec::Rademacher, vec![0.0, 1.0]);
        let e = estimate_vn(&c, 1, 40_000).unwrap();
        assert!(e.value.within(1.25, 4.0), "{:?}", e.value);
    }

    #[test]
    fn snapping_keeps_order() {
        let c = cfg(DistSpec::Rademacher, vec![0.0, 1.0]);
        assert_eq!(snap_to_lattice(&c, &[0.5, 0.6, 2.4]), vec![1.0, 2.0, 2.0 + 1.0]);
        assert_eq!(snap_to_lattice(&c, &[-0.5, 0.4]), vec![0.0, 1.0]);
    }

    #[test]
    fn schedule_rejects_bad_input() {
        let c = cfg(DistSpec::Rademacher, vec![0.0, 1.0]);
        assert!(estimate_v(&c, &[], 10).is_err());
        assert!(estimate_v(&c, &[4, 2], 10).is_err());
        assert_eq!(doubling_schedule(4, 20), vec![4, 8, 16, 20]);
    }

    #[test]
    fn huge_gap_is_delta_dominated() {
        let c = cfg(DistSpec::Rademacher, vec![0.0, 101.0]);
        let e = estimate_v(&c, &[64, 128], 2000).unwrap();
        assert_eq!(e.value.mean, 101.0);
    }
}
