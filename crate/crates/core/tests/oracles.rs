//! Monte Carlo and floating-point results checked against independent exact
//! computations.

use std::collections::BTreeMap;

use ordwalk::asymptotics::{constant_k, endpoint_density_distance, integrate, LimitDensity};
use ordwalk::engine::batch_survival;
use ordwalk::geometry::{gaps, in_weyl};
use ordwalk::lattice_exact::{exact_vn, exact_vn_at, GapChain};
use ordwalk::scalar::rational_to_f64;
use ordwalk::transform::{
    dyson_density, sample_transformed_chain, transform_paths_rejection, RejectionOptions, TransformTable,
};
use ordwalk::vfunc::estimate_vn;
use ordwalk::{make_distribution, DistSpec, Rational, StepDistribution, WalkConfig};

fn rademacher() -> StepDistribution {
    make_distribution(&DistSpec::Rademacher).unwrap()
}

/// Survival of two Rademacher walkers by brute-force recursion on the gap:
/// the gap moves by -2, 0, +2 with masses 1/4, 1/2, 1/4 and dies at <= 0.
fn gap_survival(g0: i64, horizons: &[u64]) -> Vec<f64> {
    let n_max = *horizons.last().unwrap();
    let mut law: BTreeMap<i64, f64> = BTreeMap::from([(g0, 1.0)]);
    let mut out = Vec::new();
    for t in 1..=n_max {
        let mut next = BTreeMap::new();
        for (&g, &p) in &law {
            for (d, w) in [(-2, 0.25), (0, 0.5), (2, 0.25)] {
                if g + d > 0 {
                    *next.entry(g + d).or_insert(0.0) += p * w;
                }
            }
        }
        law = next;
        if horizons.contains(&t) {
            out.push(law.values().sum());
        }
    }
    out
}

#[test]
fn survival_matches_gap_recursion() {
    let horizons = [1, 2, 5, 10, 20, 50];
    let exact = gap_survival(1, &horizons);
    let cfg = WalkConfig::new(vec![0.0, 1.0], rademacher(), 2024).unwrap();
    let est = batch_survival(&cfg, &horizons, 200_000).unwrap();
    for (e, p) in est.iter().zip(&exact) {
        assert!(e.within(*p, 4.0), "{e:?} vs {p}");
    }
    assert!((exact[0] - 0.75).abs() < 1e-15);
}

#[test]
fn estimated_vn_matches_exact_vn() {
    for (start, n) in [(vec![0.0, 1.0], 10), (vec![0.0, 1.0, 2.0], 6), (vec![0.0, 2.0, 3.0], 5)] {
        let cfg = WalkConfig::new(start, rademacher(), 5).unwrap();
        let exact = rational_to_f64(exact_vn(&cfg, n).unwrap().last());
        let est = estimate_vn(&cfg, n, 100_000).unwrap();
        assert!(est.value.within(exact, 4.0), "{:?} vs {exact}", est.value);
    }
}

#[test]
fn vn_approaches_closed_form_slowly() {
    // V(0, 1) = 2 for Rademacher steps; the truncation error decays like n^(-1/2)
    let short = exact_vn_at(&[0, 1], &rademacher(), 50).unwrap();
    let times: Vec<u64> = (1..=200).collect();
    let exact = GapChain::<Rational>::from_dist(&rademacher())
        .unwrap()
        .curve(1, &times)
        .unwrap();
    let float = GapChain::<f64>::from_dist(&rademacher())
        .unwrap()
        .curve(1, &times)
        .unwrap();
    for (t, v) in short.values.iter().enumerate().skip(1) {
        assert_eq!(v, &exact[t - 1].vn);
    }
    let v: Vec<f64> = exact.iter().map(|p| rational_to_f64(&p.vn)).collect();
    for (a, b) in v.iter().zip(&float) {
        assert!((a - b.vn).abs() < 1e-12);
    }
    assert!(v.windows(2).all(|w| w[1] >= w[0] && w[1] < 2.0));
    let gap = 2.0 - v[199];
    let predicted = 2.0 / std::f64::consts::PI.sqrt() / 200f64.sqrt();
    assert!((gap / predicted - 1.0).abs() < 0.05, "{gap} vs {predicted}");
}

#[test]
fn limit_constant_k2() {
    assert!((constant_k(2).unwrap() - 1.0 / std::f64::consts::PI.sqrt()).abs() < 1e-6);
}

#[test]
fn endpoint_distance_ignores_sample_order() {
    let samples = LimitDensity::endpoint(2).unwrap().sample(2000, 3, 0);
    let mut reversed = samples.clone();
    reversed.reverse();
    let a = endpoint_density_distance(&samples, 2, 0.0).unwrap();
    let b = endpoint_density_distance(&reversed, 2, 0.0).unwrap();
    assert_eq!(a, b);
}

#[test]
fn dyson_density_integrates_to_one() {
    let x = [0.0, 0.7];
    let inner = |y1: f64| {
        integrate(
            &|y2: f64| dyson_density(&x, 1.0, &[y1, y2]).unwrap(),
            y1,
            y1 + 16.0,
            1e-12,
            1e-10,
        )
    };
    let total = integrate(&inner, -10.0, 10.0, 1e-10, 1e-8);
    assert!((total - 1.0).abs() < 1e-4, "{total}");
}

#[test]
fn transformed_chain_stays_ordered() {
    let table = TransformTable::closed_form(&rademacher(), 2).unwrap();
    let paths = sample_transformed_chain(&table, &[0, 1], &[1, 10, 100, 1000], 500, 11).unwrap();
    assert!(paths.iter().flatten().all(|y| in_weyl(y)));
}

#[test]
fn exact_and_rejection_samplers_agree() {
    let (t, m, n) = (32u64, 1024u64, 20_000u64);
    let table = TransformTable::closed_form(&rademacher(), 2).unwrap();
    let exact = sample_transformed_chain(&table, &[0, 1], &[t], n, 1).unwrap();
    let cfg = WalkConfig::new(vec![0.0, 1.0], rademacher(), 2).unwrap();
    let opts = RejectionOptions {
        guard: Some(m),
        bias_proxy: false,
        ..Default::default()
    };
    let rej = transform_paths_rejection(&cfg, t, n as usize, &opts).unwrap();
    let mut hist: BTreeMap<i64, (f64, f64)> = BTreeMap::new();
    for p in &exact {
        hist.entry(gaps(&p[0])[0]).or_default().0 += 1.0 / n as f64;
    }
    for p in &rej.paths {
        let y = &p[t as usize];
        hist.entry((y[1] - y[0]) as i64).or_default().1 += 1.0 / n as f64;
    }
    let tv: f64 = 0.5 * hist.values().map(|(a, b)| (a - b).abs()).sum::<f64>();
    assert!(tv < 0.05, "{tv}");
}
