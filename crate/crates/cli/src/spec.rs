//! Experiment specifications: parsing, normalization and validation.

use std::path::PathBuf;

use ordwalk::{make_distribution, DistSpec, WalkConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Input encoding of a spec file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Toml,
    Json,
}

impl Format {
    /// JSON when the text starts with `{`, TOML otherwise.
    pub fn detect(text: &str) -> Self {
        if text.trim_start().starts_with('{') {
            Format::Json
        } else {
            Format::Toml
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WalkSpec {
    pub dist: DistSpec,
    pub start: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    pub walk: WalkSpec,
    pub experiment: Experiment,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TailMethod {
    MonteCarlo,
    GapChain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerChoice {
    Exact,
    Rejection,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HarmonicitySpec {
    pub n: u64,
    pub outer: u64,
    pub inner: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalingSpec {
    pub x_unit: Vec<f64>,
    pub n_list: Vec<u64>,
    #[serde(default = "default_horizon_factor")]
    pub horizon_factor: u64,
    pub paths: u64,
}

fn default_horizon_factor() -> u64 {
    16
}

fn default_replicates() -> usize {
    200
}

fn default_quantile() -> f64 {
    0.99
}

fn default_max_attempts() -> u64 {
    1 << 34
}

fn default_floor() -> f64 {
    1e-4
}

fn default_tv_threshold() -> f64 {
    0.05
}

fn default_reference_samples() -> usize {
    100_000
}

fn default_true() -> bool {
    true
}

fn default_three() -> f64 {
    3.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Experiment {
    /// Generalized Karlin–McGregor formula for every horizon `1..=n`.
    ExactKm {
        n: u64,
    },
    /// Reflection identity for every horizon `1..=n` and exit time `l`.
    ExactReflect {
        n: u64,
    },
    /// Martingale property, iterating identity and positivity of `V_m`.
    ExactV {
        n: u64,
    },
    EstimateV {
        schedule: Vec<u64>,
        paths: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        harmonicity: Option<HarmonicitySpec>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        scaling: Option<ScalingSpec>,
    },
    Tail {
        method: TailMethod,
        horizons: Vec<u64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        paths: Option<u64>,
        exponent_tolerance: f64,
        /// Relative tolerance for the prefactor against `K V(x)` when `V`
        /// has a closed form.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        prefactor_tolerance: Option<f64>,
    },
    Endpoint {
        n: u64,
        samples: usize,
        #[serde(default = "default_max_attempts")]
        max_attempts: u64,
        #[serde(default = "default_replicates")]
        calibration_replicates: usize,
        #[serde(default = "default_quantile")]
        calibration_quantile: f64,
        #[serde(default = "default_three")]
        mean_tolerance_se: f64,
        #[serde(default = "default_floor")]
        acceptance_floor: f64,
    },
    Lclt {
        n: Vec<u64>,
        threshold: f64,
    },
    Transform {
        steps: u64,
        paths: u64,
        sampler: SamplerChoice,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        guard: Option<u64>,
        #[serde(default = "default_tv_threshold")]
        tv_threshold: f64,
        #[serde(default = "default_floor")]
        acceptance_floor: f64,
    },
    Hermite {
        n: Vec<u64>,
        samples: u64,
        #[serde(default = "default_three")]
        moment_tolerance_se: f64,
    },
    DysonCompare {
        x_unit: Vec<f64>,
        t: f64,
        n: Vec<u64>,
        samples: usize,
        #[serde(default = "default_reference_samples")]
        reference_samples: usize,
        #[serde(default = "default_tv_threshold")]
        tv_threshold: f64,
        #[serde(default = "default_true")]
        require_decrease: bool,
    },
}

pub const KINDS: [&str; 10] = [
    "exact-km",
    "exact-reflect",
    "exact-v",
    "estimate-v",
    "tail",
    "endpoint",
    "lclt",
    "transform",
    "hermite",
    "dyson-compare",
];

impl Experiment {
    pub fn kind(&self) -> &'static str {
        match self {
            Experiment::ExactKm { .. } => "exact-km",
            Experiment::ExactReflect { .. } => "exact-reflect",
            Experiment::ExactV { .. } => "exact-v",
            Experiment::EstimateV { .. } => "estimate-v",
            Experiment::Tail { .. } => "tail",
            Experiment::Endpoint { .. } => "endpoint",
            Experiment::Lclt { .. } => "lclt",
            Experiment::Transform { .. } => "transform",
            Experiment::Hermite { .. } => "hermite",
            Experiment::DysonCompare { .. } => "dyson-compare",
        }
    }
}

impl ExperimentSpec {
    pub fn walk_config(&self) -> ordwalk::Result<WalkConfig> {
        WalkConfig::new(self.walk.start.clone(), make_distribution(&self.walk.dist)?, self.seed)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serializes to TOML")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes to JSON")
    }
}

/// Largest seed: TOML integers are signed 64-bit.
pub const MAX_SEED: u64 = i64::MAX as u64;

/// All problems found in a spec.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("invalid spec:\n  - {}", .0.join("\n  - "))]
pub struct SpecErrors(pub Vec<String>);

fn parse_value(text: &str, format: Format) -> Result<Value, String> {
    match format {
        Format::Json => serde_json::from_str(text).map_err(|e| format!("JSON syntax: {e}")),
        Format::Toml => {
            let v: toml::Value = toml::from_str(text).map_err(|e| format!("TOML syntax: {e}"))?;
            serde_json::to_value(v).map_err(|e| e.to_string())
        }
    }
}

fn structural_checks(v: &Value, errors: &mut Vec<String>) {
    match v.pointer("/experiment/kind") {
        None => errors.push("experiment.kind is missing".into()),
        Some(Value::String(k)) if KINDS.contains(&k.as_str()) => {}
        Some(other) => errors.push(format!(
            "unknown experiment kind {other}; expected one of {}",
            KINDS.join(", ")
        )),
    }
    let start: Option<Vec<f64>> = v
        .pointer("/walk/start")
        .and_then(Value::as_array)
        .and_then(|a| a.iter().map(Value::as_f64).collect());
    match &start {
        None => errors.push("walk.start must be an array of numbers".into()),
        Some(s) => {
            if s.len() < 2 {
                errors.push(format!("k must be ≥ 2 (walk.start has {} entries)", s.len()));
            }
            if s.windows(2).any(|w| w[0] >= w[1]) {
                errors.push(format!("start not strictly ordered: {s:?}"));
            }
        }
    }
    let dist = v
        .pointer("/walk/dist")
        .ok_or_else(|| "walk.dist is missing".to_string())
        .and_then(|d| serde_json::from_value::<DistSpec>(d.clone()).map_err(|e| format!("walk.dist: {e}")))
        .and_then(|d| make_distribution(&d).map_err(|e| format!("walk.dist: {e}")));
    match (dist, start) {
        (Err(e), _) => errors.push(e),
        (Ok(d), Some(s)) if s.len() >= 2 && s.windows(2).all(|w| w[0] < w[1]) => {
            if let Err(e) = WalkConfig::new(s, d, 0) {
                errors.push(format!("lattice mismatch: {e}"));
            }
        }
        _ => {}
    }
    match v.get("seed").and_then(Value::as_u64) {
        Some(s) if s <= MAX_SEED => {}
        _ => errors.push(format!("seed must be an integer in 0..={MAX_SEED}")),
    }
}

fn positive<T: PartialOrd + Default + std::fmt::Debug>(name: &str, v: T, errors: &mut Vec<String>) {
    if v <= T::default() {
        errors.push(format!("{name} must be positive, got {v:?}"));
    }
}

fn increasing(name: &str, v: &[u64], errors: &mut Vec<String>) {
    if v.is_empty() {
        errors.push(format!("{name} must not be empty"));
    } else if v[0] == 0 || v.windows(2).any(|w| w[0] >= w[1]) {
        errors.push(format!("{name} must be positive and strictly increasing, got {v:?}"));
    }
}

fn ordered(name: &str, v: &[f64], k: usize, errors: &mut Vec<String>) {
    if v.len() != k {
        errors.push(format!("{name} must have {k} coordinates, got {}", v.len()));
    }
    if v.windows(2).any(|w| w[0] >= w[1]) {
        errors.push(format!("{name} not strictly ordered: {v:?}"));
    }
}

fn semantic_checks(spec: &ExperimentSpec, errors: &mut Vec<String>) {
    let k = spec.walk.start.len();
    let lattice = spec.walk.dist.clone();
    let is_lattice = make_distribution(&lattice).map(|d| d.is_lattice()).unwrap_or(false);
    let needs_lattice = |what: &str, errors: &mut Vec<String>| {
        if !is_lattice {
            errors.push(format!("{what} needs a lattice step law"));
        }
    };
    match &spec.experiment {
        Experiment::ExactKm { n } | Experiment::ExactReflect { n } | Experiment::ExactV { n } => {
            positive("n", *n, errors);
            needs_lattice(spec.experiment.kind(), errors);
        }
        Experiment::EstimateV {
            schedule,
            paths,
            harmonicity,
            scaling,
        } => {
            increasing("schedule", schedule, errors);
            positive("paths", *paths, errors);
            if let Some(h) = harmonicity {
                positive("harmonicity.outer", h.outer, errors);
                positive("harmonicity.inner", h.inner, errors);
            }
            if let Some(s) = scaling {
                ordered("scaling.x_unit", &s.x_unit, k, errors);
                increasing("scaling.n_list", &s.n_list, errors);
                positive("scaling.horizon_factor", s.horizon_factor, errors);
                positive("scaling.paths", s.paths, errors);
            }
        }
        Experiment::Tail {
            method,
            horizons,
            paths,
            exponent_tolerance,
            prefactor_tolerance,
        } => {
            increasing("horizons", horizons, errors);
            if horizons.len() < 4 {
                errors.push("tail fits need at least 4 horizons".into());
            }
            positive("exponent_tolerance", *exponent_tolerance, errors);
            if let Some(p) = prefactor_tolerance {
                positive("prefactor_tolerance", *p, errors);
            }
            match method {
                TailMethod::MonteCarlo => match paths {
                    Some(p) => positive("paths", *p, errors),
                    None => errors.push("monte-carlo tail needs paths".into()),
                },
                TailMethod::GapChain => {
                    needs_lattice("gap-chain tail", errors);
                    if k != 2 {
                        errors.push(format!("gap-chain tail needs k = 2, got k = {k}"));
                    }
                }
            }
        }
        Experiment::Endpoint {
            n,
            samples,
            max_attempts,
            calibration_replicates,
            calibration_quantile,
            mean_tolerance_se,
            acceptance_floor,
        } => {
            positive("n", *n, errors);
            positive("samples", *samples, errors);
            positive("max_attempts", *max_attempts, errors);
            positive("calibration_replicates", *calibration_replicates, errors);
            positive("mean_tolerance_se", *mean_tolerance_se, errors);
            positive("acceptance_floor", *acceptance_floor, errors);
            if !(*calibration_quantile > 0.0 && *calibration_quantile < 1.0) {
                errors.push("calibration_quantile must lie in (0, 1)".into());
            }
            if !(2..=4).contains(&k) {
                errors.push(format!("endpoint comparison supports k in 2..=4, got {k}"));
            }
        }
        Experiment::Lclt { n, threshold } => {
            increasing("n", n, errors);
            positive("threshold", *threshold, errors);
            needs_lattice("lclt", errors);
        }
        Experiment::Transform {
            steps,
            paths,
            sampler,
            guard,
            tv_threshold,
            acceptance_floor,
        } => {
            positive("paths", *paths, errors);
            positive("tv_threshold", *tv_threshold, errors);
            positive("acceptance_floor", *acceptance_floor, errors);
            if let Some(m) = guard {
                if m < steps {
                    errors.push(format!("guard {m} shorter than steps {steps}"));
                }
            }
            if *sampler != SamplerChoice::Rejection {
                needs_lattice("exact transformed chain", errors);
            }
        }
        Experiment::Hermite {
            n,
            samples,
            moment_tolerance_se,
        } => {
            increasing("n", n, errors);
            positive("samples", *samples, errors);
            positive("moment_tolerance_se", *moment_tolerance_se, errors);
            if !(2..=4).contains(&k) {
                errors.push(format!("hermite comparison supports k in 2..=4, got {k}"));
            }
        }
        Experiment::DysonCompare {
            x_unit,
            t,
            n,
            samples,
            reference_samples,
            tv_threshold,
            ..
        } => {
            ordered("x_unit", x_unit, k, errors);
            positive("t", *t, errors);
            increasing("n", n, errors);
            positive("samples", *samples, errors);
            positive("reference_samples", *reference_samples, errors);
            positive("tv_threshold", *tv_threshold, errors);
        }
    }
}

/// Parses and validates a spec, collecting every problem found.
pub fn validate_spec(text: &str) -> Result<ExperimentSpec, SpecErrors> {
    let value = parse_value(text, Format::detect(text)).map_err(|e| SpecErrors(vec![e]))?;
    let mut errors = Vec::new();
    structural_checks(&value, &mut errors);
    let spec = match serde_json::from_value::<ExperimentSpec>(value) {
        Ok(s) => Some(s),
        Err(e) => {
            if errors.is_empty() {
                errors.push(e.to_string());
            }
            None
        }
    };
    if let Some(s) = &spec {
        if errors.is_empty() {
            semantic_checks(s, &mut errors);
        }
    }
    match spec {
        Some(s) if errors.is_empty() => Ok(s),
        _ => Err(SpecErrors(errors)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const KM: &str = r#"
seed = 1
[walk]
dist = { kind = "rademacher" }
start = [0, 1]
[experiment]
kind = "exact-km"
n = 8
"#;

    #[test]
    fn valid_km_spec() {
        let s = validate_spec(KM).unwrap();
        assert_eq!(s.experiment, Experiment::ExactKm { n: 8 });
        assert_eq!(validate_spec(&s.to_toml()).unwrap(), s);
        assert_eq!(validate_spec(&s.to_json()).unwrap(), s);
    }

    #[test]
    fn errors_are_collected() {
        let bad = KM.replace("[0, 1]", "[1, 0]").replace("exact-km", "exact-kmx");
        let errs = validate_spec(&bad).unwrap_err().0;
        assert_eq!(errs.len(), 2, "{errs:?}");
        assert!(errs.iter().any(|e| e.contains("start not strictly ordered")));
        assert!(errs.iter().any(|e| e.contains("unknown experiment kind")));
    }

    #[test]
    fn k_one_rejected() {
        let errs = validate_spec(&KM.replace("[0, 1]", "[0]")).unwrap_err().0;
        assert!(errs.iter().any(|e| e.contains("k must be ≥ 2")));
    }

    #[test]
    fn seed_must_fit_toml_integers() {
        let json = r#"{"seed": 9223372036854775808, "walk": {"dist": {"kind": "rademacher"}, "start": [0, 1]}, "experiment": {"kind": "exact-km", "n": 2}}"#;
        let errs = validate_spec(json).unwrap_err().0;
        assert!(errs.iter().any(|e| e.contains("seed must be an integer")), "{errs:?}");
        assert!(validate_spec(&json.replace("9223372036854775808", "9223372036854775807")).is_ok());
    }

    #[test]
    fn lattice_mismatch() {
        let errs = validate_spec(&KM.replace("[0, 1]", "[0, 1.5]")).unwrap_err().0;
        assert!(errs.iter().any(|e| e.contains("lattice mismatch")), "{errs:?}");
    }
}
