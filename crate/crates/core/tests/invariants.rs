use num_traits::{One, Zero};
use ordwalk::distributions::{step_pmf, RandomStream};
use ordwalk::engine::{batch_survival, run_path};
use ordwalk::geometry::{in_weyl, vandermonde, vandermonde_det_form};
use ordwalk::lattice_exact::{exact_survival_kernel, exact_vn_at, free_kernel, killed_evolution};
use ordwalk::scalar::ratio;
use ordwalk::{make_distribution, DistSpec, Rational, StepDistribution, WalkConfig};
use proptest::prelude::*;

fn rademacher() -> StepDistribution {
    make_distribution(&DistSpec::Rademacher).unwrap()
}

fn lattice_spec() -> impl Strategy<Value = DistSpec> {
    prop_oneof![
        Just(DistSpec::Rademacher),
        Just(DistSpec::LazyLattice),
        (1i64..5, 1i64..5).prop_map(|(a, b)| DistSpec::CustomLattice {
            masses: [(-b, a), (a, b)]
                .into_iter()
                .map(|(site, w)| (site.to_string(), format!("{w}/{}", a + b)))
                .collect(),
        }),
    ]
}

/// Ordered integer start with gaps that keep the lattice residues aligned.
fn ordered_start(k: usize) -> impl Strategy<Value = Vec<i64>> {
    proptest::collection::vec(1i64..4, k - 1).prop_map(|g| {
        let mut x = vec![0];
        for d in g {
            x.push(x.last().unwrap() + 2 * d);
        }
        x
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lattice_laws_are_normalized_and_centered(spec in lattice_spec()) {
        let d = make_distribution(&spec).unwrap();
        let law = d.lattice_law().unwrap();
        let mut total = Rational::zero();
        let mut first = Rational::zero();
        for (s, m) in law.iter() {
            prop_assert_eq!(step_pmf(&d, s).unwrap(), m.clone());
            first += Rational::from_integer(s.into()) * &m;
            total += m;
        }
        prop_assert!(total.is_one());
        prop_assert!(first.is_zero());
    }

    #[test]
    fn vandermonde_forms_agree_and_flip_sign(
        mut x in proptest::collection::vec(-30i64..30, 2..6),
        i in 0usize..6,
        j in 0usize..6,
    ) {
        let q: Vec<Rational> = x.iter().map(|&v| ratio(v, 3)).collect();
        prop_assert_eq!(vandermonde(&q), vandermonde_det_form(&q));
        let before = vandermonde(&x);
        let (i, j) = (i % x.len(), j % x.len());
        if i != j {
            x.swap(i, j);
            prop_assert_eq!(vandermonde(&x), -before);
        }
        if in_weyl(&x) {
            prop_assert!(vandermonde(&x) > 0);
        }
    }

    #[test]
    fn free_kernel_conserves_mass(x in ordered_start(2), n in 0u64..6, spec in lattice_spec()) {
        let d = make_distribution(&spec).unwrap();
        let free = free_kernel(&x, &d, n).unwrap();
        prop_assert!(free.total().is_one());
    }

    #[test]
    fn survival_kernel_is_dominated_by_free_kernel(x in ordered_start(3), n in 1u64..5) {
        let d = rademacher();
        let cfg = WalkConfig::new(x.iter().map(|&v| v as f64).collect(), d.clone(), 0).unwrap();
        let surv = exact_survival_kernel(&cfg, n).unwrap();
        let free = free_kernel(&x, &d, n).unwrap();
        for (y, &m) in &surv.mass {
            prop_assert!(in_weyl(y));
            prop_assert!(m > 0 && m <= free.numerator(y));
        }
    }

    #[test]
    fn vn_is_positive_and_monotone_for_two_walkers(x in ordered_start(2), spec in lattice_spec()) {
        let d = make_distribution(&spec).unwrap();
        let seq = exact_vn_at(&x, &d, 8).unwrap();
        prop_assert!(seq.values.iter().all(|v| *v > Rational::zero()));
        // k = 2: Delta at the exit is the (nonpositive) gap, so V_n never decreases
        prop_assert!(seq.values.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn killed_and_stopped_masses_add_up(x in ordered_start(3), n in 1u64..4) {
        let ev = killed_evolution(&x, &rademacher(), n).unwrap();
        let mut stopped = Rational::zero();
        for m in 1..=n as usize {
            stopped += ev.stopped[m].total();
        }
        prop_assert!((ev.survival[n as usize].total() + stopped).is_one());
    }

    #[test]
    fn batch_survival_is_nonincreasing(seed in any::<u64>(), gap in 1i64..6) {
        let cfg = WalkConfig::new(vec![0.0, gap as f64], rademacher(), seed).unwrap();
        let est = batch_survival(&cfg, &[1, 2, 4, 8, 16, 32], 2000).unwrap();
        prop_assert!(est.windows(2).all(|w| w[1].mean <= w[0].mean));
    }

    #[test]
    fn paths_replay_from_their_stream(seed in any::<u64>(), idx in 0u64..10_000) {
        let cfg = WalkConfig::new(vec![0.0, 1.5, 2.0], make_distribution(&DistSpec::Gaussian { variance: 1.0 }).unwrap(), seed).unwrap();
        let a = run_path(&cfg, 64, &mut RandomStream::new(seed, idx)).unwrap();
        let b = run_path(&cfg, 64, &mut cfg.stream(idx)).unwrap();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn survival_identical_across_thread_counts() {
    let cfg = WalkConfig::new(vec![0.0, 1.0, 2.0], rademacher(), 99).unwrap();
    let run = |t| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .unwrap()
            .install(|| batch_survival(&cfg, &[4, 16, 64], 50_000).unwrap())
    };
    let one = run(1);
    for t in [2, 3, 8] {
        let other = run(t);
        for (a, b) in one.iter().zip(&other) {
            assert_eq!(a.mean.to_bits(), b.mean.to_bits());
            assert_eq!(a.stderr.to_bits(), b.stderr.to_bits());
        }
    }
}
