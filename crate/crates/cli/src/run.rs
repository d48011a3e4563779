//! Dispatch of experiment kinds and result emission.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use ordwalk::asymptotics::{calibrate, constant_k, local_clt_deviation, tail_fit, z1, z2, GofReference, LimitDensity};
use ordwalk::distributions::derive_seed;
use ordwalk::engine::{batch_survival, conditioned_endpoints, EstimateCI};
use ordwalk::geometry::{gaps, in_weyl};
use ordwalk::lattice_exact::{
    closed_form_v, exact_harmonicity_check, exact_km_check, exact_martingale_check, exact_reflection_check, exact_vn,
    exact_vn_at, killed_evolution, GapChain, VerificationReport,
};
use ordwalk::scalar::{fraction_string, ratio, rational_to_f64};
use ordwalk::transform::{
    dyson_compare, exact_transformed_law, hermite_distance, predicted_acceptance, sample_transformed_chain,
    transform_paths_rejection, DysonOptions, RejectionOptions, TransformTable,
};
use ordwalk::vfunc::{estimate_v, growth_bound_constant, harmonicity_residual, scaling_check};
use ordwalk::{Error, WalkConfig};
use serde::Serialize;
use serde_json::{json, Value};

use crate::report::{summary_text, to_json, write_file, Check, FileEntry, IoError, Outcome, Table};
use crate::spec::{Experiment, ExperimentSpec, SamplerChoice, TailMethod};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pass,
    Fail,
    Refused,
    Error,
}

impl Status {
    pub fn exit_code(self) -> i32 {
        match self {
            Status::Pass => 0,
            Status::Fail | Status::Error => 1,
            Status::Refused => 2,
        }
    }
}

/// Wall-clock fields, kept apart so everything else is reproducible.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Timing {
    pub started_unix_ms: u128,
    pub wall_seconds: f64,
    pub threads: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub kind: &'static str,
    pub spec: ExperimentSpec,
    pub status: Status,
    pub checks: Vec<Check>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub files: Vec<FileEntry>,
    pub timing: Timing,
}

fn report_name(kind: &str) -> &'static str {
    match kind {
        "exact-km" => "km",
        "exact-reflect" => "reflect",
        "exact-v" => "exact_v",
        "estimate-v" => "v",
        "tail" => "tail",
        "endpoint" => "endpoint",
        "lclt" => "lclt",
        "transform" => "transform",
        "hermite" => "hermite",
        _ => "dyson",
    }
}

/// Runs a validated spec, writing every result file into `out`.
pub fn run_experiment(spec: &ExperimentSpec, out: &Path) -> Result<RunManifest, IoError> {
    let started = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0);
    let clock = Instant::now();
    fs::create_dir_all(out).map_err(|source| IoError {
        path: out.to_path_buf(),
        source,
    })?;
    let kind = spec.experiment.kind();
    let result = execute(spec);
    let (status, outcome, error) = match result {
        Ok(o) => (if o.pass() { Status::Pass } else { Status::Fail }, o, None),
        Err(e @ Error::Infeasible { .. }) => (Status::Refused, Outcome::default(), Some(e.to_string())),
        Err(e) => (Status::Error, Outcome::default(), Some(e.to_string())),
    };
    let mut files = Vec::new();
    let name = report_name(kind);
    let report = json!({
        "kind": kind,
        "status": status,
        "checks": outcome.checks,
        "error": error,
        "result": outcome.report,
    });
    files.push(write_file(out, &format!("{name}.json"), &to_json(&report))?);
    for t in &outcome.tables {
        files.push(write_file(out, &format!("{}.csv", t.name), &t.to_csv())?);
    }
    for (n, v) in &outcome.sidecars {
        files.push(write_file(out, n, &to_json(v))?);
    }
    let title = format!("{} ({kind}, seed {})", spec.name.as_deref().unwrap_or(kind), spec.seed);
    let status_word = serde_json::to_value(status).unwrap();
    let summary = summary_text(&title, status_word.as_str().unwrap(), &outcome.checks, error.as_deref());
    files.push(write_file(out, "summary.txt", summary.as_bytes())?);
    let manifest = RunManifest {
        tool: "ordwalk",
        version: env!("CARGO_PKG_VERSION"),
        kind,
        spec: spec.clone(),
        status,
        checks: outcome.checks,
        error,
        files,
        timing: Timing {
            started_unix_ms: started,
            wall_seconds: clock.elapsed().as_secs_f64(),
            threads: rayon::current_num_threads(),
        },
    };
    write_file(out, "manifest.json", &to_json(&manifest))?;
    Ok(manifest)
}

/// Dispatches to the experiment and collects checks, reports and tables.
pub fn execute(spec: &ExperimentSpec) -> ordwalk::Result<Outcome> {
    let cfg = spec.walk_config()?;
    match &spec.experiment {
        Experiment::ExactKm { n } => exact_km(&cfg, *n),
        Experiment::ExactReflect { n } => exact_reflect(&cfg, *n),
        Experiment::ExactV { n } => exact_v(&cfg, *n),
        Experiment::EstimateV {
            schedule,
            paths,
            harmonicity,
            scaling,
        } => {
            let mut o = estimate_v_run(&cfg, schedule, *paths)?;
            if let Some(h) = harmonicity {
                let r = harmonicity_residual(&cfg, h.n, h.outer, h.inner)?;
                o.check(
                    format!("harmonicity n={}", h.n),
                    r.pass,
                    format!("residual {:.4e} (stderr {:.3e})", r.residual.mean, r.residual.stderr),
                );
                o.report["harmonicity"] = serde_json::to_value(&r).unwrap();
            }
            if let Some(s) = scaling {
                let sc = scaling_check(&cfg, &s.x_unit, &s.n_list, s.horizon_factor, s.paths)?;
                let mut t = Table::new("scaling", &["n", "start", "v", "v_stderr", "ratio", "ratio_stderr"]);
                for r in &sc.rows {
                    t.push(vec![
                        r.n.into(),
                        format!("{:?}", r.start).into(),
                        r.v.value.mean.into(),
                        r.v.value.stderr.into(),
                        r.ratio.mean.into(),
                        r.ratio.stderr.into(),
                    ]);
                }
                let last = sc.rows.last().unwrap().ratio;
                o.check(
                    "scaling",
                    sc.pass,
                    format!(
                        "final ratio {:.4} in [{}, {}]: {}; trend {}",
                        last.mean,
                        sc.band.0,
                        sc.band.1,
                        sc.in_band,
                        match sc.trend_ok {
                            Some(b) => b.to_string(),
                            None => "skipped".into(),
                        }
                    ),
                );
                o.report["scaling"] = serde_json::to_value(&sc).unwrap();
                o.tables.push(t);
            }
            Ok(o)
        }
        Experiment::Tail {
            method,
            horizons,
            paths,
            exponent_tolerance,
            prefactor_tolerance,
        } => tail(
            &cfg,
            *method,
            horizons,
            *paths,
            *exponent_tolerance,
            *prefactor_tolerance,
        ),
        Experiment::Endpoint {
            n,
            samples,
            max_attempts,
            calibration_replicates,
            calibration_quantile,
            mean_tolerance_se,
            acceptance_floor,
        } => endpoint(
            &cfg,
            *n,
            *samples,
            *max_attempts,
            *calibration_replicates,
            *calibration_quantile,
            *mean_tolerance_se,
            *acceptance_floor,
        ),
        Experiment::Lclt { n, threshold } => lclt(&cfg, n, *threshold),
        Experiment::Transform {
            steps,
            paths,
            sampler,
            guard,
            tv_threshold,
            acceptance_floor,
        } => transform(&cfg, *steps, *paths, *sampler, *guard, *tv_threshold, *acceptance_floor),
        Experiment::Hermite {
            n,
            samples,
            moment_tolerance_se,
        } => hermite(&cfg, n, *samples, *moment_tolerance_se),
        Experiment::DysonCompare {
            x_unit,
            t,
            n,
            samples,
            reference_samples,
            tv_threshold,
            require_decrease,
        } => dyson(
            &cfg,
            x_unit,
            *t,
            n,
            *samples,
            *reference_samples,
            *tv_threshold,
            *require_decrease,
        ),
    }
}

fn exact_outcome(r: ordwalk::Result<VerificationReport>) -> ordwalk::Result<(VerificationReport, Option<Value>)> {
    match r {
        Ok(rep) => Ok((rep, None)),
        Err(Error::IdentityViolation {
            identity,
            site,
            lhs,
            rhs,
            report,
        }) => Ok((
            *report,
            Some(json!({"identity": identity, "site": site, "lhs": lhs, "rhs": rhs})),
        )),
        Err(e) => Err(e),
    }
}

fn denominator(cfg: &WalkConfig, n: u64) -> String {
    let d = cfg.dist().lattice_law().map(|l| l.denominator).unwrap_or(1);
    format!("{d}^{}", cfg.k() as u64 * n)
}

fn exact_km(cfg: &WalkConfig, n: u64) -> ordwalk::Result<Outcome> {
    let mut o = Outcome::default();
    let mut t = Table::new("km", &["n", "sites", "max_abs_discrepancy", "denominator", "pass"]);
    let mut reports = Vec::new();
    for m in 1..=n {
        let (rep, bad) = exact_outcome(exact_km_check(cfg, m))?;
        t.push(vec![
            m.into(),
            rep.sites_checked.into(),
            rep.max_abs_discrepancy.clone().into(),
            denominator(cfg, m).into(),
            rep.pass.into(),
        ]);
        o.check(
            format!("karlin_mcgregor n={m}"),
            rep.pass,
            format!(
                "{} sites, max |lhs - rhs| = {} (over {})",
                rep.sites_checked,
                rep.max_abs_discrepancy,
                denominator(cfg, m)
            ),
        );
        reports.push(json!({"report": rep, "violation": bad}));
    }
    o.report = json!({"start": cfg.start(), "reports": reports});
    o.tables.push(t);
    Ok(o)
}

fn exact_reflect(cfg: &WalkConfig, n: u64) -> ordwalk::Result<Outcome> {
    let mut o = Outcome::default();
    let mut t = Table::new(
        "reflect",
        &["n", "l", "sites", "max_abs_discrepancy", "flagged_sites", "pass"],
    );
    let mut reports = Vec::new();
    for m in 1..=n {
        let mut all = true;
        let mut first_bad = None;
        for l in 1..=m {
            let (rep, bad) = exact_outcome(exact_reflection_check(cfg, m, l))?;
            t.push(vec![
                m.into(),
                l.into(),
                rep.sites_checked.into(),
                rep.max_abs_discrepancy.clone().into(),
                rep.flagged_sites.len().into(),
                rep.pass.into(),
            ]);
            all &= rep.pass;
            if first_bad.is_none() {
                first_bad = bad.clone().map(|b| (l, b));
            }
            reports.push(json!({"l": l, "report": rep, "violation": bad}));
        }
        let detail = match &first_bad {
            None => format!("exact equality for every l <= {m}"),
            Some((l, b)) => format!("l={l}: y={} lhs={} rhs={}", b["site"], b["lhs"], b["rhs"]),
        };
        o.check(format!("reflection n={m}"), all, detail);
    }
    o.report = json!({"start": cfg.start(), "reports": reports});
    o.tables.push(t);
    Ok(o)
}

fn exact_v(cfg: &WalkConfig, n: u64) -> ordwalk::Result<Outcome> {
    let mut o = Outcome::default();
    let x = cfg.lattice_start()?;
    let ev = killed_evolution(&x, cfg.dist(), 1)?;
    let mut sites = vec![x.clone()];
    sites.extend(ev.survival[1].mass.keys().cloned());
    let mut t = Table::new("vn", &["site", "m", "v_m", "v_m_float"]);
    let mut reports = Vec::new();
    for site in &sites {
        let c = cfg.with_start(site.iter().map(|&v| v as f64).collect())?;
        let (mart, mb) = exact_outcome(exact_martingale_check(&c, n))?;
        let (harm, hb) = exact_outcome(exact_harmonicity_check(&c, n))?;
        let seq = exact_vn_at(site, cfg.dist(), n)?;
        let zero = ratio(0, 1);
        let positive = seq.values.iter().all(|v| v > &zero);
        for (m, v) in seq.values.iter().enumerate() {
            t.push(vec![
                format!("{site:?}").into(),
                (m as u64).into(),
                fraction_string(v).into(),
                rational_to_f64(v).into(),
            ]);
        }
        o.check(
            format!("martingale {site:?}"),
            mart.pass,
            format!("E[Delta(X(m))] - Delta(x) = {} for m <= {n}", mart.max_abs_discrepancy),
        );
        o.check(
            format!("harmonicity {site:?}"),
            harm.pass,
            format!("max discrepancy {}", harm.max_abs_discrepancy),
        );
        o.check(
            format!("positivity {site:?}"),
            positive,
            format!("V_{n} = {}", fraction_string(seq.last())),
        );
        reports.push(json!({
            "site": site,
            "martingale": mart,
            "martingale_violation": mb,
            "harmonicity": harm,
            "harmonicity_violation": hb,
            "closed_form_v": closed_form_v(cfg.dist(), site).map(|v| fraction_string(&v)),
        }));
    }
    o.report = json!({"sites": reports});
    o.tables.push(t);
    Ok(o)
}

/// Largest horizon for which the exact `V_n` oracle is computed.
const ORACLE_MAX_N: u64 = 64;

fn estimate_v_run(cfg: &WalkConfig, schedule: &[u64], paths: u64) -> ordwalk::Result<Outcome> {
    let mut o = Outcome::default();
    let est = estimate_v(cfg, schedule, paths)?;
    let mut t = Table::new("v", &["n", "estimate", "stderr", "exact", "z"]);
    for (n, e) in &est.profile {
        let exact = if cfg.dist().is_lattice() && *n <= ORACLE_MAX_N {
            match exact_vn(cfg, *n) {
                Ok(seq) => Some(rational_to_f64(seq.last())),
                Err(Error::Capacity(_)) => None,
                Err(err) => return Err(err),
            }
        } else {
            None
        };
        let z = exact.map(|v| e.z_score(v));
        if let (Some(v), Some(z)) = (exact, z) {
            o.check(
                format!("oracle n={n}"),
                z <= 4.0,
                format!("estimate {:.6} vs exact {v:.6} ({z:.2} stderr)", e.mean),
            );
        }
        t.push(vec![
            (*n).into(),
            e.mean.into(),
            e.stderr.into(),
            exact.map(Into::into).unwrap_or_else(|| "".into()),
            z.map(Into::into).unwrap_or_else(|| "".into()),
        ]);
    }
    o.check(
        "positivity",
        est.positive(),
        format!(
            "V_{} = {:.6} (stderr {:.3e})",
            est.n_used, est.value.mean, est.value.stderr
        ),
    );
    o.report = json!({
        "estimate": est,
        "growth_bound_constant": growth_bound_constant(std::slice::from_ref(&est)),
    });
    o.tables.push(t);
    Ok(o)
}

fn constants_sidecar(k: usize) -> ordwalk::Result<Value> {
    Ok(json!({
        "k": k,
        "K": constant_k(k)?,
        "Z1": z1(k)?,
        "Z2": z2(k)?,
    }))
}

fn tail(
    cfg: &WalkConfig,
    method: TailMethod,
    horizons: &[u64],
    paths: Option<u64>,
    exponent_tolerance: f64,
    prefactor_tolerance: Option<f64>,
) -> ordwalk::Result<Outcome> {
    let mut o = Outcome::default();
    let k = cfg.k();
    let points: Vec<(u64, EstimateCI)> = match method {
        TailMethod::GapChain => {
            let x = cfg.lattice_start()?;
            let chain = GapChain::<f64>::from_dist(cfg.dist())?;
            chain
                .curve(x[1] - x[0], horizons)?
                .into_iter()
                .map(|p| (p.t, EstimateCI::exact(p.survival)))
                .collect()
        }
        TailMethod::MonteCarlo => {
            let est = batch_survival(cfg, horizons, paths.unwrap_or(1))?;
            horizons.iter().copied().zip(est).collect()
        }
    };
    let sigma2 = cfg.dist().variance;
    let fit = tail_fit(&points, sigma2)?;
    let expected = -((k * (k - 1)) as f64) / 4.0;
    o.check(
        "exponent",
        (fit.exponent - expected).abs() <= exponent_tolerance,
        format!(
            "fitted {:.5} (stderr {:.2e}) vs {expected} +/- {exponent_tolerance}",
            fit.exponent, fit.exponent_stderr
        ),
    );
    let v_exact = cfg
        .lattice_start()
        .ok()
        .and_then(|x| closed_form_v(cfg.dist(), &x))
        .map(|v| rational_to_f64(&v));
    let kk = if (2..=4).contains(&k) {
        Some(constant_k(k)?)
    } else {
        None
    };
    let expected_prefactor = kk.zip(v_exact).map(|(a, b)| a * b);
    if let (Some(tol), Some(p)) = (prefactor_tolerance, expected_prefactor) {
        o.check(
            "prefactor",
            (fit.prefactor / p - 1.0).abs() <= tol,
            format!(
                "fitted {:.5} vs K V(x) = {p:.5} (relative tolerance {tol})",
                fit.prefactor
            ),
        );
    }
    let mut t = Table::new("tail", &["n", "survival", "stderr", "fitted"]);
    for (n, e) in &points {
        t.push(vec![
            (*n).into(),
            e.mean.into(),
            e.stderr.into(),
            fit.predict(*n as f64, sigma2).into(),
        ]);
    }
    o.report = json!({
        "exponent": fit.exponent,
        "prefactor": fit.prefactor,
        "r_squared": fit.r_squared,
        "n_range": [fit.n_range.0, fit.n_range.1],
        "fit": fit,
        "expected_exponent": expected,
        "expected_prefactor": expected_prefactor,
        "method": method,
    });
    o.tables.push(t);
    if (2..=4).contains(&k) {
        o.sidecars.push(("constants.json".into(), constants_sidecar(k)?));
    }
    Ok(o)
}

#[allow(clippy::too_many_arguments)]
fn endpoint(
    cfg: &WalkConfig,
    n: u64,
    samples: usize,
    max_attempts: u64,
    replicates: usize,
    quantile: f64,
    mean_tol: f64,
    floor: f64,
) -> ordwalk::Result<Outcome> {
    let mut o = Outcome::default();
    let k = cfg.k();
    let predicted = predicted_acceptance(cfg, n, 1 << 14)?;
    if predicted < floor {
        return Err(Error::Infeasible {
            predicted_acceptance: predicted,
            floor,
            predicted_attempts: samples as f64 / predicted.max(f64::MIN_POSITIVE),
        });
    }
    let run = conditioned_endpoints(cfg, n, samples, max_attempts)?;
    let sigma = cfg.dist().sigma();
    let ys: Vec<Vec<f64>> = run
        .endpoints
        .iter()
        .map(|y| y.iter().map(|v| v / sigma).collect())
        .collect();
    let width = match cfg.dist().lattice {
        Some(l) => l.span as f64 / (sigma * (n as f64).sqrt()),
        None => 0.0,
    };
    let reference = GofReference::cached(k, 1)?;
    let gof = reference.evaluate(&ys, width)?;
    let density = LimitDensity::endpoint(k)?;
    let cal = calibrate(
        &reference,
        &density,
        samples,
        replicates,
        quantile,
        derive_seed(cfg.master_seed(), 21),
    )?;
    o.check(
        "gap KS",
        gof.ks_max <= cal.ks_threshold,
        format!("max KS {:.5} vs calibrated {:.5}", gof.ks_max, cal.ks_threshold),
    );
    for (i, m) in gof.gap_moments.iter().enumerate() {
        let want = if k == 2 {
            std::f64::consts::PI.sqrt()
        } else {
            m.expected_mean
        };
        o.check(
            format!("gap {i} mean"),
            m.mean.within(want, mean_tol),
            format!(
                "{:.5} (stderr {:.2e}) vs {want:.5}: {:.2} stderr",
                m.mean.mean,
                m.mean.stderr,
                m.mean.z_score(want)
            ),
        );
    }
    let mut t = Table::new(
        "endpoints",
        &(0..k)
            .map(|i| format!("y{i}"))
            .collect::<Vec<_>>()
            .iter()
            .map(String::as_str)
            .collect::<Vec<_>>(),
    );
    for y in &ys {
        t.push(y.iter().map(|&v| v.into()).collect());
    }
    o.report = json!({
        "n": n,
        "attempts": run.attempts,
        "acceptance": run.acceptance,
        "predicted_acceptance": predicted,
        "gof": gof,
        "calibration": cal,
        "tv_within_calibration": gof.tv <= cal.tv_threshold,
    });
    o.tables.push(t);
    o.sidecars.push(("constants.json".into(), constants_sidecar(k)?));
    Ok(o)
}

fn lclt(cfg: &WalkConfig, ns: &[u64], threshold: f64) -> ordwalk::Result<Outcome> {
    let mut o = Outcome::default();
    let mut t = Table::new("lclt", &["n", "sup_deviation", "argmax_site", "total_mass"]);
    let mut reps = Vec::new();
    for &n in ns {
        let r = local_clt_deviation(cfg.dist(), n)?;
        o.check(
            format!("mass n={n}"),
            r.total_mass == "1",
            format!("sum p_n = {}", r.total_mass),
        );
        t.push(vec![
            n.into(),
            r.sup_deviation.into(),
            r.argmax_site.into(),
            r.total_mass.clone().into(),
        ]);
        reps.push(r);
    }
    let (first, last) = (&reps[0], reps.last().unwrap());
    o.check(
        "threshold",
        last.sup_deviation < threshold,
        format!("n={}: {:.4e} < {threshold:.1e}", last.n, last.sup_deviation),
    );
    if reps.len() > 1 {
        o.check(
            "decrease",
            last.sup_deviation < first.sup_deviation,
            format!(
                "n={}: {:.4e} vs n={}: {:.4e}",
                last.n, last.sup_deviation, first.n, first.sup_deviation
            ),
        );
    }
    o.report = json!({"reports": reps, "threshold": threshold});
    o.tables.push(t);
    Ok(o)
}

fn gap_histogram<'a>(configs: impl Iterator<Item = &'a [i64]>) -> (BTreeMap<Vec<i64>, f64>, usize) {
    let mut h = BTreeMap::new();
    let mut n = 0;
    for y in configs {
        *h.entry(gaps(y)).or_insert(0.0) += 1.0;
        n += 1;
    }
    h.values_mut().for_each(|v| *v /= n as f64);
    (h, n)
}

fn tv_between(a: &BTreeMap<Vec<i64>, f64>, b: &BTreeMap<Vec<i64>, f64>) -> f64 {
    let mut s = 0.0;
    for (key, pa) in a {
        s += (pa - b.get(key).copied().unwrap_or(0.0)).abs();
    }
    for (key, pb) in b {
        if !a.contains_key(key) {
            s += pb;
        }
    }
    0.5 * s
}

fn transform(
    cfg: &WalkConfig,
    steps: u64,
    paths: u64,
    sampler: SamplerChoice,
    guard: Option<u64>,
    tv_threshold: f64,
    floor: f64,
) -> ordwalk::Result<Outcome> {
    let mut o = Outcome::default();
    let k = cfg.k();
    let mut report = json!({"steps": steps});
    let mut exact_gaps = None;
    let mut t = Table::new("transform", &["sampler", "path", "configuration"]);
    if sampler != SamplerChoice::Rejection {
        let x = cfg.lattice_start()?;
        let table = TransformTable::closed_form(cfg.dist(), k)?;
        let step = table.one_step(&x)?;
        o.check(
            "one-step normalization",
            step.exact_mass.as_deref() == Some("1"),
            format!(
                "sum of transformed masses out of {x:?} = {}",
                step.exact_mass.clone().unwrap_or_default()
            ),
        );
        let samples = sample_transformed_chain(&table, &x, &[steps], paths, cfg.master_seed())?;
        let ends: Vec<&[i64]> = samples.iter().map(|p| p[0].as_slice()).collect();
        o.check(
            "stays in W",
            ends.iter().all(|y| in_weyl(y)),
            format!("{} exact-chain samples", ends.len()),
        );
        for (i, y) in ends.iter().enumerate() {
            t.push(vec!["exact".into(), (i as u64).into(), format!("{y:?}").into()]);
        }
        let law = match exact_transformed_law(&table, &x, steps) {
            Ok(law) => {
                let mut h: BTreeMap<Vec<i64>, f64> = BTreeMap::new();
                for (y, p) in &law {
                    *h.entry(gaps(y)).or_insert(0.0) += rational_to_f64(p);
                }
                Some(h)
            }
            Err(Error::Capacity(_)) => None,
            Err(e) => return Err(e),
        };
        let empirical = gap_histogram(ends.iter().copied()).0;
        if let Some(l) = &law {
            report["exact_vs_chain_tv"] = json!(tv_between(l, &empirical));
        }
        report["table"] = json!({"source": table.source(), "domain": table.domain_description()});
        exact_gaps = Some(law.unwrap_or(empirical));
    }
    if sampler != SamplerChoice::Exact {
        let opts = RejectionOptions {
            guard,
            acceptance_floor: floor,
            ..Default::default()
        };
        let run = transform_paths_rejection(cfg, steps, paths as usize, &opts)?;
        let check = batch_survival(
            &cfg.with_seed(derive_seed(cfg.master_seed(), 31)),
            &[run.guard.max(1)],
            run.attempts.max(1),
        )?[0];
        let acc = run.acceptance;
        let se = (acc.stderr.powi(2) + check.stderr.powi(2)).sqrt();
        let z = if se > 0.0 {
            (acc.mean - check.mean).abs() / se
        } else {
            0.0
        };
        o.check(
            "acceptance",
            z <= 3.0 || run.guard == 0,
            format!(
                "acceptance {:.5} vs P(tau > {}) = {:.5} ({z:.2} stderr)",
                acc.mean, run.guard, check.mean
            ),
        );
        let ends: Vec<Vec<i64>> = run
            .paths
            .iter()
            .map(|p| p[steps as usize].iter().map(|&v| v as i64).collect())
            .collect();
        for (i, p) in run.paths.iter().enumerate() {
            t.push(vec![
                "rejection".into(),
                (i as u64).into(),
                format!("{:?}", p[steps as usize]).into(),
            ]);
        }
        if let Some(ex) = &exact_gaps {
            if cfg.dist().is_lattice() {
                let emp = gap_histogram(ends.iter().map(Vec::as_slice)).0;
                let tv = tv_between(ex, &emp);
                o.check(
                    "samplers agree",
                    tv < tv_threshold,
                    format!("gap-marginal TV {tv:.4} (guard {})", run.guard),
                );
                report["sampler_tv"] = json!(tv);
            }
        }
        report["rejection"] = json!({
            "guard": run.guard,
            "attempts": run.attempts,
            "acceptance": run.acceptance,
            "predicted_acceptance": run.predicted_acceptance,
            "bias_proxy": run.bias_proxy,
            "survival_cross_check": check,
        });
    }
    o.report = report;
    o.tables.push(t);
    Ok(o)
}

fn hermite(cfg: &WalkConfig, ns: &[u64], samples: u64, tol: f64) -> ordwalk::Result<Outcome> {
    let mut o = Outcome::default();
    let k = cfg.k();
    let sigma = cfg.dist().sigma();
    let x = cfg.lattice_start().ok();
    let table = x
        .as_ref()
        .filter(|x| closed_form_v(cfg.dist(), x).is_some())
        .and_then(|_| TransformTable::closed_form(cfg.dist(), k).ok());
    let per_n: Vec<Vec<Vec<f64>>> = match (&table, &x) {
        (Some(table), Some(x)) => {
            let paths = sample_transformed_chain(table, x, ns, samples, cfg.master_seed())?;
            (0..ns.len())
                .map(|j| {
                    let s = (ns[j] as f64).sqrt() * sigma;
                    paths
                        .iter()
                        .map(|p| p[j].iter().map(|&v| v as f64 / s).collect())
                        .collect()
                })
                .collect()
        }
        _ => ns
            .iter()
            .map(|&n| {
                let opts = RejectionOptions {
                    bias_proxy: false,
                    ..Default::default()
                };
                let run = transform_paths_rejection(cfg, n, samples as usize, &opts)?;
                let s = (n as f64).sqrt() * sigma;
                Ok(run
                    .paths
                    .iter()
                    .map(|p| p[n as usize].iter().map(|v| v / s).collect())
                    .collect())
            })
            .collect::<ordwalk::Result<_>>()?,
    };
    let marginals: Vec<_> = {
        let d = LimitDensity::hermite(k)?;
        (0..k - 1).map(|i| d.gap_cdf(i)).collect()
    };
    let mut t = Table::new(
        "hermite",
        &["n", "gap", "second_moment", "stderr", "expected", "tv", "ks"],
    );
    let mut reps = Vec::new();
    let mut tvs = Vec::new();
    for (j, ys) in per_n.iter().enumerate() {
        let n = ns[j];
        let width = match cfg.dist().lattice {
            Some(l) => l.span as f64 / (sigma * (n as f64).sqrt()),
            None => 0.0,
        };
        let rep = hermite_distance(ys, k, width)?;
        for (i, m) in rep.gap_moments.iter().enumerate() {
            let want = if k == 2 { 6.0 } else { marginals[i].moment(2) };
            t.push(vec![
                n.into(),
                i.into(),
                m.second.mean.into(),
                m.second.stderr.into(),
                want.into(),
                rep.tv.into(),
                rep.ks_per_gap[i].into(),
            ]);
            if j + 1 == ns.len() {
                o.check(
                    format!("gap {i} second moment n={n}"),
                    m.second.within(want, tol),
                    format!(
                        "{:.4} (stderr {:.3e}) vs {want:.4}: {:.2} stderr",
                        m.second.mean,
                        m.second.stderr,
                        m.second.z_score(want)
                    ),
                );
            }
        }
        tvs.push(rep.tv);
        reps.push(json!({"n": n, "gof": rep}));
    }
    if tvs.len() > 1 {
        o.check(
            "tv decreasing",
            tvs.windows(2).all(|w| w[1] < w[0]),
            format!("TV over n={ns:?}: {tvs:.4?}"),
        );
    }
    o.report = json!({
        "sampler": if table.is_some() { "exact_chain" } else { "rejection" },
        "reports": reps,
    });
    o.tables.push(t);
    o.sidecars.push(("constants.json".into(), constants_sidecar(k)?));
    Ok(o)
}

#[allow(clippy::too_many_arguments)]
fn dyson(
    cfg: &WalkConfig,
    x_unit: &[f64],
    t: f64,
    ns: &[u64],
    samples: usize,
    reference_samples: usize,
    tv_threshold: f64,
    require_decrease: bool,
) -> ordwalk::Result<Outcome> {
    let mut o = Outcome::default();
    let opts = DysonOptions {
        samples,
        reference_samples,
        ..Default::default()
    };
    let mut table = Table::new("dyson", &["n", "sampler", "samples", "tv", "ks_max", "ks_p_min"]);
    let mut reps = Vec::new();
    for &n in ns {
        let r = dyson_compare(cfg, x_unit, t, n, &opts)?;
        table.push(vec![
            n.into(),
            r.sampler.clone().into(),
            r.samples.into(),
            r.tv.into(),
            r.ks_per_gap.iter().copied().fold(0.0, f64::max).into(),
            r.ks_p_proxy.iter().copied().fold(1.0, f64::min).into(),
        ]);
        reps.push(r);
    }
    let tvs: Vec<f64> = reps.iter().map(|r| r.tv).collect();
    let last = *tvs.last().unwrap();
    o.check(
        "final tv",
        last < tv_threshold,
        format!("n={}: TV {last:.4} < {tv_threshold}", ns.last().unwrap()),
    );
    if require_decrease && tvs.len() > 1 {
        o.check(
            "tv decreasing",
            tvs.windows(2).all(|w| w[1] < w[0]),
            format!("TV over n={ns:?}: {tvs:.4?}"),
        );
    }
    o.report = json!({"reports": reps});
    o.tables.push(table);
    Ok(o)
}

/// Output directory: explicit override, the spec's own, or a default.
pub fn output_dir(spec: &ExperimentSpec, override_dir: Option<&Path>) -> PathBuf {
    override_dir
        .map(Path::to_path_buf)
        .or_else(|| spec.output.clone())
        .unwrap_or_else(|| {
            PathBuf::from("ordwalk-out").join(spec.name.clone().unwrap_or_else(|| spec.experiment.kind().into()))
        })
}
