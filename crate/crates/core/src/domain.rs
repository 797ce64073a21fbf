//! Spending profiles, Big-Five trait scoring and dominant-trait ordering.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

pub const N_TRAITS: usize = 5;

/// Canonical trait order used by every file format.
pub const TRAIT_NAMES: [&str; N_TRAITS] = [
    "openness",
    "conscientiousness",
    "extraversion",
    "agreeableness",
    "neuroticism",
];

pub const TRAIT_INITIALS: [char; N_TRAITS] = ['O', 'C', 'E', 'A', 'N'];

/// Default relative magnitude below which a coefficient counts as zero.
pub const DEFAULT_NONZERO_FACTOR: f64 = 0.1;

/// Normalised spending distribution of one customer over one aggregation window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct SpendingProfile<T> {
    pub customer_id: String,
    pub period_index: usize,
    shares: Vec<T>,
}

impl<T: Scalar> SpendingProfile<T> {
    /// Builds a profile from non-negative per-class amounts, normalising them onto the simplex.
    pub fn from_amounts(customer_id: impl Into<String>, period_index: usize, amounts: Vec<T>) -> Result<Self> {
        let customer_id = customer_id.into();
        if amounts.is_empty() {
            return Err(Error::Dimension("profile with zero transaction classes".into()));
        }
        if let Some(bad) = amounts.iter().find(|a| !a.is_finite() || **a < T::zero()) {
            return Err(Error::Schema(format!(
                "customer {customer_id}: amount {bad} is negative or not finite"
            )));
        }
        let total: T = amounts.iter().copied().sum();
        if total <= T::zero() {
            return Err(Error::EmptyWindow {
                customer: customer_id,
                window: period_index,
            });
        }
        let shares = amounts.into_iter().map(|a| a / total).collect();
        Ok(SpendingProfile {
            customer_id,
            period_index,
            shares,
        })
    }

    pub fn shares(&self) -> &[T] {
        &self.shares
    }

    pub fn n_classes(&self) -> usize {
        self.shares.len()
    }

    /// Re-checks the simplex invariant, for values that came from a file.
    pub fn validate(&self) -> Result<()> {
        let tol = T::of(1e-9).max(T::epsilon() * T::of_usize(self.shares.len() * 4));
        let sum: T = self.shares.iter().copied().sum();
        if self.shares.iter().any(|s| !s.is_finite() || *s < T::zero()) || (sum - T::one()).abs() > tol {
            return Err(Error::Schema(format!(
                "profile {}/{} is not a distribution (sum {sum})",
                self.customer_id, self.period_index
            )));
        }
        Ok(())
    }
}

impl<T> AsRef<[T]> for SpendingProfile<T> {
    fn as_ref(&self) -> &[T] {
        &self.shares
    }
}

/// K×5 class-to-trait scoring weights, columns in canonical trait order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct CoefficientMatrix<T> {
    class_names: Vec<String>,
    values: Matrix<T>,
}

impl<T: Scalar> CoefficientMatrix<T> {
    pub fn new(class_names: Vec<String>, values: Matrix<T>) -> Result<Self> {
        if values.cols() != N_TRAITS {
            return Err(Error::Dimension(format!(
                "coefficient matrix has {} trait columns, expected {N_TRAITS}",
                values.cols()
            )));
        }
        if class_names.len() != values.rows() {
            return Err(Error::Dimension(format!(
                "{} class names for {} coefficient rows",
                class_names.len(),
                values.rows()
            )));
        }
        if !values.is_finite() {
            return Err(Error::Schema("coefficient matrix contains non-finite values".into()));
        }
        Ok(CoefficientMatrix { class_names, values })
    }

    pub fn n_classes(&self) -> usize {
        self.values.rows()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn trait_names(&self) -> [&'static str; N_TRAITS] {
        TRAIT_NAMES
    }

    pub fn values(&self) -> &Matrix<T> {
        &self.values
    }

    pub fn nonzero_rows(&self, factor: T) -> Vec<bool> {
        nonzero_rows(&self.values, factor)
    }

    pub fn nonzero_count(&self, factor: T) -> usize {
        self.nonzero_rows(factor).into_iter().filter(|&b| b).count()
    }
}

/// A row is non-zero when any entry reaches `factor` times the mean absolute entry.
pub fn nonzero_rows<T: Scalar>(values: &Matrix<T>, factor: T) -> Vec<bool> {
    let n = values.as_slice().len();
    if n == 0 {
        return vec![false; values.rows()];
    }
    let mean_abs = values.as_slice().iter().map(|v| v.abs()).sum::<T>() / T::of_usize(n);
    let threshold = factor * mean_abs;
    (0..values.rows())
        .map(|r| values.row(r).iter().any(|v| v.abs() > T::zero() && v.abs() >= threshold))
        .collect()
}

/// Fuzzy membership grades in the five traits, canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct TraitVector<T> {
    pub grades: [T; N_TRAITS],
}

/// Trait indices sorted by descending grade.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct DominantOrder {
    order: [usize; N_TRAITS],
}

impl DominantOrder {
    pub fn from_order(order: [usize; N_TRAITS]) -> Result<Self> {
        let mut seen = [false; N_TRAITS];
        for &i in &order {
            if i >= N_TRAITS || seen[i] {
                return Err(Error::InvalidTrait(format!("{order:?} is not a permutation of 0..5")));
            }
            seen[i] = true;
        }
        Ok(DominantOrder { order })
    }

    pub fn order(&self) -> [usize; N_TRAITS] {
        self.order
    }

    pub fn dominant(&self) -> usize {
        self.order[0]
    }

    /// The `rank`-th most dominant trait (0 = dominant).
    pub fn at(&self, rank: usize) -> usize {
        self.order[rank]
    }

    pub fn prefix(&self, depth: usize) -> &[usize] {
        &self.order[..depth.min(N_TRAITS)]
    }
}

impl fmt::Display for DominantOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&initials(&self.order))
    }
}

/// Renders trait indices as `N>C>O`.
pub fn initials(traits: &[usize]) -> String {
    traits
        .iter()
        .map(|&t| TRAIT_INITIALS[t].to_string())
        .collect::<Vec<_>>()
        .join(">")
}

pub fn trait_from_initial(c: char) -> Result<usize> {
    TRAIT_INITIALS
        .iter()
        .position(|&i| i == c)
        .ok_or_else(|| Error::InvalidTrait(format!("unknown trait initial {c:?}")))
}

impl FromStr for DominantOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split('>').collect();
        if parts.len() != N_TRAITS {
            return Err(Error::InvalidTrait(format!("{s:?} does not list five traits")));
        }
        let mut order = [0; N_TRAITS];
        for (slot, part) in order.iter_mut().zip(&parts) {
            let mut chars = part.chars();
            match (chars.next(), chars.next()) {
                (Some(c), None) => *slot = trait_from_initial(c)?,
                _ => return Err(Error::InvalidTrait(format!("bad trait token {part:?}"))),
            }
        }
        DominantOrder::from_order(order)
    }
}

impl From<DominantOrder> for String {
    fn from(o: DominantOrder) -> String {
        o.to_string()
    }
}

impl TryFrom<String> for DominantOrder {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// Raw linear trait scores `sharesᵀ · coefficients`.
pub fn score_traits<T: Scalar>(profile: &SpendingProfile<T>, coeffs: &CoefficientMatrix<T>) -> Result<[T; N_TRAITS]> {
    score_shares(profile.shares(), coeffs)
}

pub(crate) fn score_shares<T: Scalar>(shares: &[T], coeffs: &CoefficientMatrix<T>) -> Result<[T; N_TRAITS]> {
    if shares.len() != coeffs.n_classes() {
        return Err(Error::Dimension(format!(
            "profile has {} classes, coefficients have {}",
            shares.len(),
            coeffs.n_classes()
        )));
    }
    let mut out = [T::zero(); N_TRAITS];
    for (k, &s) in shares.iter().enumerate() {
        for (o, &c) in out.iter_mut().zip(coeffs.values().row(k)) {
            *o += s * c;
        }
    }
    Ok(out)
}

/// Per-trait min/max bounds used to turn raw scores into grades.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct TraitScaling<T> {
    pub min: [T; N_TRAITS],
    pub max: [T; N_TRAITS],
}

impl<T: Scalar> TraitScaling<T> {
    /// Maps raw scores to `[0, 1]`; traits with a degenerate range map to 0.5.
    pub fn scale(&self, raw: &[T; N_TRAITS]) -> TraitVector<T> {
        let mut grades = [T::zero(); N_TRAITS];
        for j in 0..N_TRAITS {
            let range = self.max[j] - self.min[j];
            grades[j] = if range > T::zero() {
                ((raw[j] - self.min[j]) / range).max(T::zero()).min(T::one())
            } else {
                T::of(0.5)
            };
        }
        TraitVector { grades }
    }
}

pub fn scale_population<T: Scalar>(raw_scores: &[[T; N_TRAITS]]) -> Result<(Vec<TraitVector<T>>, TraitScaling<T>)> {
    if raw_scores.is_empty() {
        return Err(Error::EmptyDataset("no raw trait scores to scale".into()));
    }
    let mut min = raw_scores[0];
    let mut max = raw_scores[0];
    for row in &raw_scores[1..] {
        for j in 0..N_TRAITS {
            min[j] = min[j].min(row[j]);
            max[j] = max[j].max(row[j]);
        }
    }
    let scaling = TraitScaling { min, max };
    Ok((raw_scores.iter().map(|r| scaling.scale(r)).collect(), scaling))
}

pub fn dominant_order<T: Scalar>(traits: &TraitVector<T>) -> Result<DominantOrder> {
    dominant_order_of(&traits.grades)
}

/// Stable descending argsort; equal grades keep ascending trait index.
pub fn dominant_order_of<T: Scalar>(grades: &[T; N_TRAITS]) -> Result<DominantOrder> {
    if let Some(g) = grades.iter().find(|g| !g.is_finite()) {
        return Err(Error::InvalidTrait(format!("non-finite grade {g}")));
    }
    let mut order = [0, 1, 2, 3, 4];
    order.sort_by(|&a, &b| grades[b].partial_cmp(&grades[a]).expect("finite grades compare"));
    Ok(DominantOrder { order })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn identity_coeffs() -> CoefficientMatrix<f64> {
        let values = Matrix::from_fn(5, 5, |r, c| if r == c { 1.0 } else { 0.0 });
        CoefficientMatrix::new((0..5).map(|i| format!("c{i}")).collect(), values).unwrap()
    }

    #[test]
    fn identity_scoring_returns_shares() {
        let p = SpendingProfile::from_amounts("c", 0, vec![1.0; 5]).unwrap();
        let s = score_traits(&p, &identity_coeffs()).unwrap();
        for v in s {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn basis_profile_selects_row() {
        let values = Matrix::from_fn(4, 5, |r, c| (r * 5 + c) as f64 * 0.5 - 3.0);
        let coeffs = CoefficientMatrix::new((0..4).map(|i| i.to_string()).collect(), values.clone()).unwrap();
        for j in 0..4 {
            let mut amounts = vec![0.0; 4];
            amounts[j] = 7.0;
            let p = SpendingProfile::from_amounts("c", 0, amounts).unwrap();
            assert_eq!(score_traits(&p, &coeffs).unwrap().to_vec(), values.row(j).to_vec());
        }
    }

    #[test]
    fn scoring_matches_elementwise_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let values = Matrix::from_fn(3, 5, |_, _| rng.random_range(-2.0..2.0));
        let coeffs = CoefficientMatrix::new(vec!["a".into(), "b".into(), "c".into()], values.clone()).unwrap();
        for _ in 0..20 {
            let amounts: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..1.0)).collect();
            let p = SpendingProfile::from_amounts("x", 0, amounts).unwrap();
            let got = score_traits(&p, &coeffs).unwrap();
            for j in 0..5 {
                let mut oracle = 0.0;
                for k in 0..3 {
                    oracle += p.shares()[k] * values.get(k, j);
                }
                assert!((got[j] - oracle).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn scoring_rejects_dimension_mismatch() {
        let p = SpendingProfile::from_amounts("c", 0, vec![1.0; 4]).unwrap();
        assert!(matches!(score_traits(&p, &identity_coeffs()), Err(Error::Dimension(_))));
    }

    #[test]
    fn profile_construction_errors() {
        assert!(matches!(
            SpendingProfile::<f64>::from_amounts("c", 3, vec![0.0; 4]),
            Err(Error::EmptyWindow { window: 3, .. })
        ));
        assert!(SpendingProfile::from_amounts("c", 0, vec![1.0, -0.5]).is_err());
        let p = SpendingProfile::from_amounts("c", 0, vec![3.0, 1.0]).unwrap();
        assert_eq!(p.shares(), &[0.75, 0.25]);
        p.validate().unwrap();
    }

    fn one_trait(raws: &[f64]) -> Vec<[f64; 5]> {
        raws.iter().map(|&r| [r, 0.0, 0.0, 0.0, 0.0]).collect()
    }

    #[test]
    fn population_scaling_examples() {
        let (g, _) = scale_population(&one_trait(&[0.0, 1.0])).unwrap();
        assert_eq!((g[0].grades[0], g[1].grades[0]), (0.0, 1.0));
        // The all-zero columns are degenerate.
        assert!(g.iter().all(|t| t.grades[1..].iter().all(|&x| x == 0.5)));

        let (g, scaling) = scale_population(&one_trait(&[1.0, 2.0, 4.0])).unwrap();
        let got: Vec<f64> = g.iter().map(|t| t.grades[0]).collect();
        assert_eq!(got[0], 0.0);
        assert!((got[1] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(got[2], 1.0);
        // Unseen customers are clamped.
        assert_eq!(scaling.scale(&[10.0, 0.0, 0.0, 0.0, 0.0]).grades[0], 1.0);
        assert_eq!(scaling.scale(&[-10.0, 0.0, 0.0, 0.0, 0.0]).grades[0], 0.0);

        assert!(matches!(scale_population::<f64>(&[]), Err(Error::EmptyDataset(_))));
    }

    #[test]
    fn dominant_order_examples() {
        let o = |g: [f64; 5]| dominant_order(&TraitVector { grades: g }).unwrap().order();
        assert_eq!(o([0.1, 0.9, 0.3, 0.3, 0.2]), [1, 2, 3, 4, 0]);
        assert_eq!(o([0.4; 5]), [0, 1, 2, 3, 4]);
        assert_eq!(o([0.5, 0.1, 0.9, 0.0, 0.2]), [2, 0, 4, 1, 3]);
        assert!(matches!(
            dominant_order(&TraitVector { grades: [0.1, f64::NAN, 0.0, 0.0, 0.0] }),
            Err(Error::InvalidTrait(_))
        ));
    }

    #[test]
    fn dominant_order_text_form() {
        let order = DominantOrder::from_order([4, 1, 0, 3, 2]).unwrap();
        assert_eq!(order.to_string(), "N>C>O>A>E");
        assert_eq!("N>C>O>A>E".parse::<DominantOrder>().unwrap(), order);
        assert!("N>C>O>A".parse::<DominantOrder>().is_err());
        assert!("N>C>O>A>N".parse::<DominantOrder>().is_err());
        assert!(DominantOrder::from_order([0, 0, 1, 2, 3]).is_err());
    }

    #[test]
    fn nonzero_rule_uses_mean_magnitude() {
        let values = Matrix::from_rows(&[
            [1.0, 0.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, 0.001, 0.0, 0.0],
            [0.0, -2.0, 0.0, 0.0, 0.0],
        ])
        .unwrap();
        // mean |c| = 3.001 / 20 ≈ 0.15; threshold 0.015
        assert_eq!(nonzero_rows(&values, 0.1), vec![true, false, false, true]);
        assert_eq!(nonzero_rows(&Matrix::<f64>::zeros(3, 5), 0.1), vec![false; 3]);
    }

    fn simplex(k: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.001f64..1.0, k)
    }

    proptest! {
        #[test]
        fn scoring_is_linear(x in simplex(6), y in simplex(6), a in -3.0f64..3.0, b in -3.0f64..3.0,
                             w in prop::collection::vec(-2.0f64..2.0, 30)) {
            let coeffs = CoefficientMatrix::new((0..6).map(|i| i.to_string()).collect(),
                                                Matrix::from_vec(6, 5, w).unwrap()).unwrap();
            let combo: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
            let sx = score_shares(&x, &coeffs).unwrap();
            let sy = score_shares(&y, &coeffs).unwrap();
            let sc = score_shares(&combo, &coeffs).unwrap();
            for j in 0..5 {
                prop_assert!((sc[j] - (a * sx[j] + b * sy[j])).abs() < 1e-12);
            }
        }

        #[test]
        fn order_invariant_under_increasing_transform(g in prop::array::uniform5(0.0f64..1.0)) {
            let base = dominant_order_of(&g).unwrap();
            let transformed = g.map(|x| (3.0 * x).exp() - 7.0);
            prop_assert_eq!(base, dominant_order_of(&transformed).unwrap());
        }

        #[test]
        fn scaling_preserves_order_when_ranges_are_non_degenerate(
            rows in prop::collection::vec(prop::array::uniform5(-5.0f64..5.0), 3..40)
        ) {
            // Pin a common range for every trait so scaling is the same affine map per column.
            let mut rows = rows;
            rows.push([-10.0; 5]);
            rows.push([10.0; 5]);
            let (scaled, _) = scale_population(&rows).unwrap();
            for (raw, t) in rows.iter().zip(&scaled) {
                prop_assert_eq!(dominant_order_of(raw).unwrap(), dominant_order(t).unwrap());
            }
        }
    }
}
