//! Weyl chamber predicates, the Vandermonde determinant and the reflection
//! shift used by the generalized Karlin–McGregor identities.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Positions of `k >= 2` walkers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Configuration<T> {
    coords: Vec<T>,
}

impl<T: Scalar> Configuration<T> {
    pub fn new(coords: Vec<T>) -> Result<Self> {
        if coords.len() < 2 {
            return Err(Error::InvalidArgument(format!("k must be >= 2, got {}", coords.len())));
        }
        if let Some(i) = coords.iter().position(|c| !c.finite()) {
            return Err(Error::InvalidArgument(format!("coordinate {i} is not finite")));
        }
        Ok(Self { coords })
    }

    pub fn k(&self) -> usize {
        self.coords.len()
    }

    pub fn coords(&self) -> &[T] {
        &self.coords
    }

    pub fn into_coords(self) -> Vec<T> {
        self.coords
    }

    pub fn in_weyl(&self) -> bool {
        in_weyl(&self.coords)
    }

    pub fn vandermonde(&self) -> T {
        vandermonde(&self.coords)
    }
}

impl<T> AsRef<[T]> for Configuration<T> {
    fn as_ref(&self) -> &[T] {
        &self.coords
    }
}

/// Strictly increasing coordinates. Only adjacent pairs need checking.
pub fn in_weyl<T: PartialOrd>(x: &[T]) -> bool {
    x.windows(2).all(|w| w[0] < w[1])
}

/// Product form `prod_{i<j} (x_j - x_i)`.
pub fn vandermonde<T: Scalar>(x: &[T]) -> T {
    let mut acc = T::one();
    for j in 1..x.len() {
        for i in 0..j {
            acc = acc * (x[j].clone() - x[i].clone());
        }
    }
    acc
}

/// Determinant of the monomial matrix `(x_j^{i-1})`, evaluated through
/// [`determinant`]. Agrees with [`vandermonde`] exactly on exact scalars.
pub fn vandermonde_det_form<T: Scalar>(x: &[T]) -> T {
    let k = x.len();
    let mut m = vec![vec![T::zero(); k]; k];
    for (j, xj) in x.iter().enumerate() {
        let mut p = T::one();
        for row in m.iter_mut() {
            row[j] = p.clone();
            p = p * xj.clone();
        }
    }
    determinant(&m)
}

/// Determinant of a square matrix given as rows.
///
/// Cofactor expansion up to 4x4, fraction-free (Bareiss) elimination above.
/// Bareiss divisions are exact for integer-like scalars.
pub fn determinant<T: Scalar>(m: &[Vec<T>]) -> T {
    let n = m.len();
    debug_assert!(m.iter().all(|r| r.len() == n), "matrix is not square");
    match n {
        0 => T::one(),
        1 => m[0][0].clone(),
        2 => m[0][0].clone() * m[1][1].clone() - m[0][1].clone() * m[1][0].clone(),
        3 | 4 => cofactor(m),
        _ => bareiss(m.to_vec()),
    }
}

fn cofactor<T: Scalar>(m: &[Vec<T>]) -> T {
    let n = m.len();
    if n == 2 {
        return m[0][0].clone() * m[1][1].clone() - m[0][1].clone() * m[1][0].clone();
    }
    let mut acc = T::zero();
    for c in 0..n {
        if m[0][c].is_zero() {
            continue;
        }
        let minor: Vec<Vec<T>> = m[1..]
            .iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .filter(|&(j, _)| j != c)
                    .map(|(_, v)| v.clone())
                    .collect()
            })
            .collect();
        let term = m[0][c].clone() * cofactor(&minor);
        if c % 2 == 0 {
            acc = acc + term;
        } else {
            acc = acc - term;
        }
    }
    acc
}

fn bareiss<T: Scalar>(mut a: Vec<Vec<T>>) -> T {
    let n = a.len();
    let mut sign = T::one();
    let mut prev = T::one();
    for k in 0..n - 1 {
        if a[k][k].is_zero() {
            match (k + 1..n).find(|&r| !a[r][k].is_zero()) {
                Some(r) => {
                    a.swap(k, r);
                    sign = -sign;
                }
                None => return T::zero(),
            }
        }
        for i in k + 1..n {
            for j in k + 1..n {
                let v = a[i][j].clone() * a[k][k].clone() - a[i][k].clone() * a[k][j].clone();
                a[i][j] = v / prev.clone();
            }
        }
        prev = a[k][k].clone();
    }
    sign * a[n - 1][n - 1].clone()
}

/// Alphabetically minimal pair `(i, j)`, `i < j`, with `y_i > y_j`; falls back
/// to the minimal tie `y_i == y_j` when no strict inversion exists.
pub fn minimal_disordered_pair<T: PartialOrd>(y: &[T]) -> Option<(usize, usize)> {
    let k = y.len();
    let strict = (0..k)
        .flat_map(|i| (i + 1..k).map(move |j| (i, j)))
        .find(|&(i, j)| y[i] > y[j]);
    strict.or_else(|| {
        (0..k)
            .flat_map(|i| (i + 1..k).map(move |j| (i, j)))
            .find(|&(i, j)| y[i] >= y[j])
    })
}

/// Reflection shift `psi(y) = (y_j - y_i)(e_j - e_i)` for the minimal
/// disordered pair. Zero vector when that pair is an exact tie.
pub fn reflection_shift<T: Scalar>(y: &[T]) -> Result<Vec<T>> {
    if in_weyl(y) {
        return Err(Error::Precondition(
            "reflection shift requires a configuration outside the Weyl chamber".into(),
        ));
    }
    let (i, j) = minimal_disordered_pair(y).expect("configuration outside W has a disordered pair");
    let mut psi = vec![T::zero(); y.len()];
    psi[i] = y[i].clone() - y[j].clone();
    psi[j] = y[j].clone() - y[i].clone();
    Ok(psi)
}

/// Consecutive gaps `x_{i+1} - x_i`.
pub fn gaps<T: Scalar>(x: &[T]) -> Vec<T> {
    x.windows(2).map(|w| w[1].clone() - w[0].clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::{ratio, Rational};
    use proptest::prelude::*;

    #[test]
    fn weyl_membership() {
        assert!(in_weyl(&[0, 1, 2]));
        assert!(!in_weyl(&[0, 0]));
        assert!(!in_weyl(&[1, 0]));
    }

    #[test]
    fn vandermonde_small_cases() {
        assert_eq!(vandermonde(&[0i64, 1]), 1);
        assert_eq!(vandermonde(&[0i64, 1, 2]), 2);
        assert_eq!(vandermonde(&[3i64, 3, 7]), 0);
        assert_eq!(vandermonde_det_form(&[0i64, 1]), 1);
        assert_eq!(vandermonde_det_form(&[0i64, 1, 2]), 2);
    }

    #[test]
    fn det_form_matches_product_on_rational_four_point() {
        let x = vec![ratio(-3, 7), ratio(1, 2), ratio(5, 3), ratio(11, 4)];
        assert_eq!(vandermonde_det_form(&x), vandermonde(&x));
        let xf: Vec<f64> = vec![-0.4285714, 0.5, 1.6666667, 2.75];
        let (a, b) = (vandermonde_det_form(&xf), vandermonde(&xf));
        assert!(((a - b) / b).abs() < 1e-12);
    }

    #[test]
    fn bareiss_path_matches_product() {
        let x: Vec<Rational> = (0..7).map(|i| ratio(i * i + 3 * i - 5, 5)).collect();
        assert_eq!(vandermonde_det_form(&x), vandermonde(&x));
        let xi: Vec<i128> = vec![-4, -1, 0, 2, 5, 9];
        assert_eq!(vandermonde_det_form(&xi), vandermonde(&xi));
    }

    #[test]
    fn bareiss_pivots_on_zero_leading_entry() {
        let m: Vec<Vec<i128>> = vec![
            vec![0, 1, 2, 3, 4],
            vec![1, 0, 0, 0, 0],
            vec![0, 0, 1, 0, 0],
            vec![0, 0, 0, 1, 0],
            vec![0, 0, 0, 0, 1],
        ];
        assert_eq!(determinant(&m), -1);
    }

    #[test]
    fn reflection_shift_examples() {
        assert_eq!(reflection_shift(&[1i64, 0]).unwrap(), vec![1, -1]);
        assert_eq!(reflection_shift(&[0i64, 2, 1]).unwrap(), vec![0, 1, -1]);
        assert_eq!(reflection_shift(&[5i64, 5]).unwrap(), vec![0, 0]);
        assert!(matches!(reflection_shift(&[0i64, 1]), Err(Error::Precondition(_))));
    }

    #[test]
    fn strict_inversion_beats_earlier_tie() {
        // (1,2) is a tie, (1,3) a strict inversion: the strict pair wins
        assert_eq!(minimal_disordered_pair(&[2, 2, 1]), Some((0, 2)));
        assert_eq!(reflection_shift(&[2i64, 2, 1]).unwrap(), vec![1, 0, -1]);
    }

    #[test]
    fn configuration_rejects_small_k_and_nan() {
        assert!(Configuration::new(vec![1.0]).is_err());
        assert!(Configuration::new(vec![0.0, f64::NAN]).is_err());
        assert!(Configuration::new(vec![0.0, 1.0]).unwrap().in_weyl());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn swapping_coordinates_negates_vandermonde(
            x in proptest::collection::vec(-50i64..50, 2..6),
            a in 0usize..6, b in 0usize..6,
        ) {
            let (a, b) = (a % x.len(), b % x.len());
            prop_assume!(a != b);
            let mut y = x.clone();
            y.swap(a, b);
            prop_assert_eq!(vandermonde(&y), -vandermonde(&x));
        }

        #[test]
        fn product_and_determinant_forms_agree_exactly(
            nums in proptest::collection::vec(-40i64..40, 2..7),
            den in 1i64..9,
        ) {
            let x: Vec<Rational> = nums.iter().map(|&n| ratio(n, den)).collect();
            prop_assert_eq!(vandermonde_det_form(&x), vandermonde(&x));
        }

        #[test]
        fn ordered_configurations_have_positive_vandermonde(
            mut x in proptest::collection::btree_set(-100i128..100, 2..6)
                .prop_map(|s| s.into_iter().collect::<Vec<_>>()),
        ) {
            prop_assert!(in_weyl(&x));
            prop_assert!(vandermonde(&x) > 0);
            x.reverse();
            prop_assert!(!in_weyl(&x));
        }
    }
}
