//! Centered step laws and counter-based random streams.

use std::collections::BTreeMap;
use std::str::FromStr;

use num_bigint::BigInt;
use num_integer::Integer;
use num_traits::{One, Signed, ToPrimitive, Zero};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Open01, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{fraction_string, ratio, rational_to_f64, Rational};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Rademacher,
    LazyLattice,
    Gaussian,
    Uniform,
    Laplace,
    CustomLattice,
}

impl StepKind {
    pub fn is_lattice(self) -> bool {
        matches!(
            self,
            StepKind::Rademacher | StepKind::LazyLattice | StepKind::CustomLattice
        )
    }
}

fn unit() -> f64 {
    1.0
}

fn is_unit(v: &f64) -> bool {
    *v == 1.0
}

/// Declarative description of a step law, as written in experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DistSpec {
    Rademacher,
    LazyLattice,
    Gaussian {
        #[serde(default = "unit", skip_serializing_if = "is_unit")]
        variance: f64,
    },
    Uniform {
        #[serde(default = "unit", skip_serializing_if = "is_unit")]
        variance: f64,
    },
    Laplace {
        #[serde(default = "unit", skip_serializing_if = "is_unit")]
        variance: f64,
    },
    /// Integer sites mapped to `"numerator/denominator"` masses.
    CustomLattice {
        masses: BTreeMap<String, String>,
    },
}

/// Support `offset + span * Z` of a single step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lattice {
    pub span: i64,
    /// In `[0, span)`.
    pub offset: i64,
}

impl Lattice {
    /// Spacing of the lattice that walk positions live on (`gcd(span, offset)`).
    pub fn site_spacing(&self) -> i64 {
        self.span.gcd(&self.offset)
    }

    /// Offset 0 means the law is aperiodic on `span * Z`.
    pub fn is_aperiodic(&self) -> bool {
        self.offset == 0
    }
}

/// Exact masses on integer sites, all sharing the denominator `denominator`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatticeLaw {
    pub sites: Vec<i64>,
    pub numerators: Vec<u64>,
    pub denominator: u64,
}

impl LatticeLaw {
    fn from_rationals(mut pairs: Vec<(i64, Rational)>) -> Result<Self> {
        pairs.retain(|(_, m)| !m.is_zero());
        pairs.sort_by_key(|(s, _)| *s);
        if pairs.is_empty() {
            return Err(Error::InvalidDistribution("empty support".into()));
        }
        let den = pairs.iter().fold(BigInt::one(), |acc, (_, m)| acc.lcm(m.denom()));
        let denominator = den
            .to_u64()
            .ok_or_else(|| Error::InvalidDistribution("mass denominator too large".into()))?;
        let numerators = pairs
            .iter()
            .map(|(_, m)| (m * Rational::from_integer(den.clone())).to_integer().to_u64())
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| Error::InvalidDistribution("mass numerator out of range".into()))?;
        Ok(Self {
            sites: pairs.iter().map(|(s, _)| *s).collect(),
            numerators,
            denominator,
        })
    }

    pub fn mass(&self, site: i64) -> Rational {
        match self.sites.binary_search(&site) {
            Ok(i) => ratio(self.numerators[i], self.denominator),
            Err(_) => Rational::zero(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (i64, Rational)> + '_ {
        self.sites
            .iter()
            .zip(&self.numerators)
            .map(|(&s, &n)| (s, ratio(n, self.denominator)))
    }

    pub fn exact_mean(&self) -> Rational {
        self.iter()
            .map(|(s, m)| m * Rational::from_integer(s.into()))
            .fold(Rational::zero(), |a, b| a + b)
    }

    pub fn exact_variance(&self) -> Rational {
        let mean = self.exact_mean();
        self.iter()
            .map(|(s, m)| {
                let d = Rational::from_integer(s.into()) - &mean;
                m * &d * &d
            })
            .fold(Rational::zero(), |a, b| a + b)
    }

    fn lattice(&self) -> Lattice {
        let s0 = self.sites[0];
        let span = self.sites.iter().fold(0i64, |g, &s| g.gcd(&(s - s0)));
        let span = if span == 0 { 1 } else { span };
        Lattice {
            span,
            offset: s0.rem_euclid(span),
        }
    }

    /// Draws a site by inversion of a uniform integer in `[0, denominator)`.
    fn sample(&self, stream: &mut RandomStream) -> i64 {
        let mut r = stream.below(self.denominator);
        for (s, &n) in self.sites.iter().zip(&self.numerators) {
            if r < n {
                return *s;
            }
            r -= n;
        }
        unreachable!("lattice masses sum to the denominator")
    }
}

/// A centered step law. Immutable once built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDistribution {
    pub kind: StepKind,
    pub mean: f64,
    pub variance: f64,
    pub lattice: Option<Lattice>,
    /// Largest moment order guaranteed finite (`inf` for all built-in kinds).
    pub moment_order: f64,
    law: Option<LatticeLaw>,
    spec: DistSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Moments {
    pub mean: f64,
    pub variance: f64,
    pub moment_order: f64,
}

pub fn make_distribution(spec: &DistSpec) -> Result<StepDistribution> {
    let lattice_dist = |kind, pairs: Vec<(i64, Rational)>| -> Result<StepDistribution> {
        let law = LatticeLaw::from_rationals(pairs)?;
        let mean = law.exact_mean();
        if !mean.is_zero() {
            return Err(Error::NonzeroMean {
                mean: fraction_string(&mean),
            });
        }
        let variance = rational_to_f64(&law.exact_variance());
        if variance <= 0.0 {
            return Err(Error::NonpositiveVariance(variance));
        }
        Ok(StepDistribution {
            kind,
            mean: 0.0,
            variance,
            lattice: Some(law.lattice()),
            moment_order: f64::INFINITY,
            law: Some(law),
            spec: spec.clone(),
        })
    };
    let continuous = |kind, variance: f64| -> Result<StepDistribution> {
        if !(variance > 0.0) || !variance.is_finite() {
            return Err(Error::NonpositiveVariance(variance));
        }
        Ok(StepDistribution {
            kind,
            mean: 0.0,
            variance,
            lattice: None,
            moment_order: f64::INFINITY,
            law: None,
            spec: spec.clone(),
        })
    };
    match spec {
        DistSpec::Rademacher => lattice_dist(StepKind::Rademacher, vec![(-1, ratio(1, 2)), (1, ratio(1, 2))]),
        DistSpec::LazyLattice => lattice_dist(
            StepKind::LazyLattice,
            vec![(-1, ratio(1, 4)), (0, ratio(1, 2)), (1, ratio(1, 4))],
        ),
        DistSpec::Gaussian { variance } => continuous(StepKind::Gaussian, *variance),
        DistSpec::Uniform { variance } => continuous(StepKind::Uniform, *variance),
        DistSpec::Laplace { variance } => continuous(StepKind::Laplace, *variance),
        DistSpec::CustomLattice { masses } => {
            let mut pairs = Vec::with_capacity(masses.len());
            let mut total = Rational::zero();
            for (site, mass) in masses {
                let s: i64 = site
                    .trim()
                    .parse()
                    .map_err(|_| Error::InvalidDistribution(format!("site {site:?} is not an integer")))?;
                let m = Rational::from_str(mass.trim()).map_err(|_| {
                    Error::InvalidDistribution(format!("mass {mass:?} is not a \"numerator/denominator\" fraction"))
                })?;
                if m.is_negative() {
                    return Err(Error::InvalidDistribution(format!("negative mass {mass} at site {s}")));
                }
                total += &m;
                pairs.push((s, m));
            }
            if !total.is_one() {
                return Err(Error::InvalidDistribution(format!(
                    "masses sum to {}, not 1",
                    fraction_string(&total)
                )));
            }
            lattice_dist(StepKind::CustomLattice, pairs)
        }
    }
}

impl StepDistribution {
    pub fn spec(&self) -> &DistSpec {
        &self.spec
    }

    pub fn is_lattice(&self) -> bool {
        self.law.is_some()
    }

    pub fn lattice_law(&self) -> Option<&LatticeLaw> {
        self.law.as_ref()
    }

    pub fn require_lattice(&self) -> Result<&LatticeLaw> {
        self.law.as_ref().ok_or_else(|| {
            Error::Unsupported(format!(
                "{:?} steps have no lattice masses; exact kernels need a lattice law",
                self.kind
            ))
        })
    }

    pub fn sigma(&self) -> f64 {
        self.variance.sqrt()
    }

    /// Draws one step and advances the stream.
    pub fn sample(&self, stream: &mut RandomStream) -> f64 {
        match self.kind {
            StepKind::Rademacher => {
                if stream.next_u64() >> 63 == 0 {
                    -1.0
                } else {
                    1.0
                }
            }
            StepKind::LazyLattice | StepKind::CustomLattice => {
                self.law.as_ref().expect("lattice law").sample(stream) as f64
            }
            StepKind::Gaussian => {
                let z: f64 = stream.rng.sample(StandardNormal);
                z * self.variance.sqrt()
            }
            StepKind::Uniform => {
                let half_width = (3.0 * self.variance).sqrt();
                (2.0 * stream.uniform() - 1.0) * half_width
            }
            StepKind::Laplace => {
                let b = (self.variance / 2.0).sqrt();
                let u: f64 = stream.rng.sample(Open01);
                if u < 0.5 {
                    b * (2.0 * u).ln()
                } else {
                    -b * (2.0 * (1.0 - u)).ln()
                }
            }
        }
    }

    /// Integer-valued draw for lattice laws.
    pub fn sample_site(&self, stream: &mut RandomStream) -> Result<i64> {
        match self.kind {
            StepKind::Rademacher => Ok(self.sample(stream) as i64),
            _ => Ok(self.require_lattice()?.sample(stream)),
        }
    }
}

pub fn sample_step(dist: &StepDistribution, stream: &mut RandomStream) -> f64 {
    dist.sample(stream)
}

/// Exact single-step mass at an integer site.
pub fn step_pmf(dist: &StepDistribution, site: i64) -> Result<Rational> {
    Ok(dist.require_lattice()?.mass(site))
}

/// Stored moment metadata; lattice laws are re-derived exactly and checked.
pub fn moments(dist: &StepDistribution) -> Moments {
    if let Some(law) = &dist.law {
        let mean = law.exact_mean();
        let var = rational_to_f64(&law.exact_variance());
        assert!(mean.is_zero(), "stored lattice law is not centered");
        assert!(
            (var - dist.variance).abs() <= 1e-15 * var.max(1.0),
            "stored variance {} disagrees with masses ({var})",
            dist.variance
        );
    }
    Moments {
        mean: dist.mean,
        variance: dist.variance,
        moment_order: dist.moment_order,
    }
}

/// Counter-based stream: `(master_seed, path_index)` selects an independent
/// ChaCha8 keystream, `counter` is the word position inside it.
#[derive(Debug, Clone)]
pub struct RandomStream {
    master_seed: u64,
    path_index: u64,
    rng: ChaCha8Rng,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of an independent sub-experiment keyed by `tag`.
pub fn derive_seed(master_seed: u64, tag: u64) -> u64 {
    let mut state = master_seed ^ tag.wrapping_mul(0xD1B5_4A32_D192_ED03);
    splitmix64(&mut state) ^ splitmix64(&mut state).rotate_left(17)
}

impl RandomStream {
    pub fn new(master_seed: u64, path_index: u64) -> Self {
        let mut key = [0u8; 32];
        let mut state = master_seed;
        for chunk in key.chunks_exact_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
        }
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(path_index);
        Self {
            master_seed,
            path_index,
            rng,
        }
    }

    /// Stream positioned at an explicit counter (32-bit word offset).
    pub fn at(master_seed: u64, path_index: u64, counter: u64) -> Self {
        let mut s = Self::new(master_seed, path_index);
        s.rng.set_word_pos(counter as u128);
        s
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn path_index(&self) -> u64 {
        self.path_index
    }

    pub fn counter(&self) -> u64 {
        self.rng.get_word_pos() as u64
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: u64) -> u64 {
        self.rng.random_range(0..n)
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }
}
