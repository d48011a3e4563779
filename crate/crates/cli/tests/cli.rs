use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ordwalk::DistSpec;
use ordwalk_cli::report::digest;
use ordwalk_cli::spec::{validate_spec, Experiment, ExperimentSpec, SamplerChoice, TailMethod, WalkSpec, MAX_SEED};
use proptest::prelude::*;
use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_ordwalk"));
    c.env_remove("ORDWALK_THREADS");
    c
}

fn examples() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../specs/examples")
}

fn write_spec(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

#[test]
fn validate_reports_every_problem() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_spec(
        dir.path(),
        "bad.toml",
        "seed = 1\n[walk]\ndist = { kind = \"rademacher\" }\nstart = [1, 0]\n[experiment]\nkind = \"nope\"\n",
    );
    let out = run(&["validate", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("start not strictly ordered"), "{err}");
    assert!(err.contains("unknown experiment kind"), "{err}");

    let ok = run(&["validate", examples().join("km.toml").to_str().unwrap()]);
    assert_eq!(ok.status.code(), Some(0));
}

#[test]
fn km_run_writes_listed_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "run",
        examples().join("km.toml").to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = json(&dir.path().join("manifest.json"));
    assert_eq!(manifest["status"], "pass");
    assert_eq!(manifest["spec"]["experiment"]["kind"], "exact-km");
    let files = manifest["files"].as_array().unwrap();
    let names: Vec<&str> = files.iter().map(|f| f["path"].as_str().unwrap()).collect();
    for want in ["km.json", "km.csv", "summary.txt"] {
        assert!(names.contains(&want), "{names:?}");
    }
    for f in files {
        let bytes = fs::read(dir.path().join(f["path"].as_str().unwrap())).unwrap();
        assert_eq!(f["sha256"].as_str().unwrap(), digest(&bytes));
        assert_eq!(f["bytes"].as_u64().unwrap(), bytes.len() as u64);
    }
    let report = json(&dir.path().join("km.json"));
    for r in report["result"]["reports"].as_array().unwrap() {
        assert_eq!(r["report"]["max_abs_discrepancy"], "0");
    }
    let csv = fs::read_to_string(dir.path().join("km.csv")).unwrap();
    assert!(csv.lines().nth(8).unwrap().starts_with("8,"));
    assert!(csv.contains("2^16"));
}

#[test]
fn refusal_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "run",
        examples().join("endpoint_refused.toml").to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let manifest = json(&dir.path().join("manifest.json"));
    assert_eq!(manifest["status"], "refused");
    assert!(manifest["error"].as_str().unwrap().contains("predicted acceptance"));
}

#[test]
fn tail_report_schema() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(
        dir.path(),
        "tail.toml",
        "seed = 4\n[walk]\ndist = { kind = \"rademacher\" }\nstart = [0, 1]\n[experiment]\nkind = \"tail\"\nmethod = \"gap-chain\"\nhorizons = [64, 128, 256, 512, 1024, 2048, 4096, 8192]\nexponent_tolerance = 0.05\n",
    );
    let out_dir = dir.path().join("out");
    let out = run(&["run", spec.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let r = &json(&out_dir.join("tail.json"))["result"];
    for key in ["exponent", "prefactor", "r_squared", "n_range"] {
        assert!(!r[key].is_null(), "missing {key}");
    }
    assert!((r["exponent"].as_f64().unwrap() + 0.5).abs() < 0.05);
    let consts = json(&out_dir.join("constants.json"));
    assert!((consts["K"].as_f64().unwrap() - 1.0 / std::f64::consts::PI.sqrt()).abs() < 1e-6);
}

#[test]
fn endpoint_samples_are_one_row_per_survivor() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(
        dir.path(),
        "e.toml",
        "seed = 4\n[walk]\ndist = { kind = \"rademacher\" }\nstart = [0, 1]\n[experiment]\nkind = \"endpoint\"\nn = 64\nsamples = 1500\ncalibration_replicates = 20\n",
    );
    let out_dir = dir.path().join("out");
    let out = run(&["run", spec.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.code() == Some(0) || out.status.code() == Some(1));
    let csv = fs::read_to_string(out_dir.join("endpoints.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1501);
    assert!(csv.starts_with("y0,y1\n"));
}

fn files_without_timing(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            let name = p.file_name().unwrap().to_string_lossy().into_owned();
            let mut bytes = fs::read(&p).unwrap();
            if name == "manifest.json" {
                let mut m: Value = serde_json::from_slice(&bytes).unwrap();
                m.as_object_mut().unwrap().remove("timing");
                bytes = serde_json::to_vec(&m).unwrap();
            }
            (name, bytes)
        })
        .collect();
    v.sort();
    v
}

#[test]
fn identical_files_at_any_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let spec = examples().join("transform.toml");
    let mut outs = Vec::new();
    for threads in ["1", "3"] {
        let out_dir = dir.path().join(threads);
        let status = bin()
            .env("ORDWALK_THREADS", threads)
            .args([
                "run",
                spec.to_str().unwrap(),
                "--out",
                out_dir.to_str().unwrap(),
                "--threads",
                "2",
            ])
            .status()
            .unwrap();
        assert_eq!(status.code(), Some(0));
        assert_eq!(
            json(&out_dir.join("manifest.json"))["timing"]["threads"].as_u64(),
            Some(threads.parse().unwrap())
        );
        outs.push(files_without_timing(&out_dir));
    }
    assert_eq!(outs[0], outs[1]);
}

#[test]
fn seed_flag_overrides_spec() {
    let dir = tempfile::tempdir().unwrap();
    let spec = examples().join("km.toml");
    let out_dir = dir.path().join("o");
    run(&[
        "run",
        spec.to_str().unwrap(),
        "--seed",
        "77",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(json(&out_dir.join("manifest.json"))["spec"]["seed"], 77);
}

#[test]
fn bad_thread_env_is_rejected() {
    let out = bin()
        .env("ORDWALK_THREADS", "zero")
        .args([
            "run",
            examples().join("km.toml").to_str().unwrap(),
            "--out",
            "/nonexistent/never",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn suite_aggregates_statuses() {
    let dir = tempfile::tempdir().unwrap();
    let specs = dir.path().join("specs");
    fs::create_dir(&specs).unwrap();
    for name in ["km.toml", "endpoint_refused.toml"] {
        fs::copy(examples().join(name), specs.join(name)).unwrap();
    }
    fs::write(specs.join("notes.txt"), "ignored").unwrap();
    let out_dir = dir.path().join("out");
    let out = run(&["suite", specs.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let table = fs::read_to_string(out_dir.join("suite.csv")).unwrap();
    assert_eq!(table.lines().count(), 3);
    assert!(table.contains("refused") && table.contains("pass"));
    assert!(out_dir.join("km/manifest.json").exists());
}

fn walk() -> impl Strategy<Value = WalkSpec> {
    (
        prop_oneof![
            Just(DistSpec::Rademacher),
            Just(DistSpec::LazyLattice),
            (0.5f64..4.0).prop_map(|variance| DistSpec::Gaussian { variance }),
            Just(DistSpec::Uniform { variance: 1.0 }),
        ],
        proptest::collection::vec(1u32..5, 1..4),
    )
        .prop_map(|(dist, gaps)| {
            let mut start = vec![0.0];
            for g in gaps {
                start.push(start.last().unwrap() + g as f64);
            }
            WalkSpec { dist, start }
        })
}

fn experiment() -> impl Strategy<Value = Experiment> {
    let horizons = proptest::collection::btree_set(1u64..10_000, 4..8).prop_map(|s| s.into_iter().collect::<Vec<_>>());
    prop_oneof![
        (1u64..12).prop_map(|n| Experiment::ExactKm { n }),
        (1u64..12).prop_map(|n| Experiment::ExactV { n }),
        (horizons, 0.01f64..1.0, proptest::option::of(1u64..1_000_000)).prop_map(|(horizons, tol, paths)| {
            Experiment::Tail {
                method: TailMethod::MonteCarlo,
                horizons,
                paths: Some(paths.unwrap_or(1000)),
                exponent_tolerance: tol,
                prefactor_tolerance: None,
            }
        }),
        (1u64..100, 1u64..100_000, any::<bool>()).prop_map(|(steps, paths, g)| Experiment::Transform {
            steps,
            paths,
            sampler: SamplerChoice::Rejection,
            guard: g.then_some(steps * 8),
            tv_threshold: 0.05,
            acceptance_floor: 1e-4,
        }),
        (0.1f64..3.0, 1usize..100_000).prop_map(|(t, samples)| Experiment::DysonCompare {
            x_unit: vec![0.0, 1.0],
            t,
            n: vec![16, 64],
            samples,
            reference_samples: 1000,
            tv_threshold: 0.05,
            require_decrease: true,
        }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn specs_round_trip(walk in walk(), experiment in experiment(), seed in 0..=MAX_SEED, named in any::<bool>()) {
        let experiment = match experiment {
            Experiment::DysonCompare { t, n, samples, reference_samples, tv_threshold, require_decrease, .. } => {
                Experiment::DysonCompare {
                    x_unit: walk.start.clone(),
                    t, n, samples, reference_samples, tv_threshold, require_decrease,
                }
            }
            e => e,
        };
        let lattice_only = matches!(experiment, Experiment::ExactKm { .. } | Experiment::ExactV { .. });
        let walk = if lattice_only {
            WalkSpec { dist: DistSpec::Rademacher, start: walk.start }
        } else {
            walk
        };
        let spec = ExperimentSpec {
            name: named.then(|| "case".to_string()),
            seed,
            output: None,
            walk,
            experiment,
        };
        prop_assert_eq!(&validate_spec(&spec.to_toml()).unwrap(), &spec);
        prop_assert_eq!(&validate_spec(&spec.to_json()).unwrap(), &spec);
    }
}
