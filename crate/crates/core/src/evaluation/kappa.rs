//! Fleiss' multirater kappa with its large-sample standard error.
//!
//! For N items, n raters per item, q categories and counts `n_ij`:
//!
//! * `P_i = (Σ_j n_ij² − n) / (n (n − 1))`, `P̄ = mean_i P_i`
//! * `p_j = Σ_i n_ij / (N n)`, `P̄_e = Σ_j p_j²`
//! * `κ = (P̄ − P̄_e) / (1 − P̄_e)`
//!
//! The standard error is the large-sample value under the null hypothesis
//! of no agreement beyond chance (Fleiss, Nee & Landis, 1979), with
//! `q_j = 1 − p_j`:
//!
//! `SE = √2 / (Σ_j p_j q_j · √(N n (n − 1))) · √((Σ_j p_j q_j)² − Σ_j p_j q_j (q_j − p_j))`
//!
//! This is the figure common statistics packages print next to kappa.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KappaError {
    #[error("need at least 2 items, 2 categories and 2 raters per item (got N={items}, q={categories}, n={raters})")]
    TooSmall { items: usize, categories: usize, raters: u64 },
    #[error("row {row} sums to {found}, expected {expected} raters")]
    RowSum { row: usize, expected: u64, found: u64 },
    #[error("rows have differing lengths")]
    Ragged,
    #[error("all ratings fall in a single category; kappa is undefined")]
    Degenerate,
    #[error("item {item} was rated by {found} raters, expected {expected}")]
    UnequalRaters { item: String, expected: usize, found: usize },
    #[error("rater {rater} rated item {item} more than once")]
    DuplicateRating { item: String, rater: String },
    #[error("no ratings")]
    Empty,
}

/// Items × categories count matrix with a constant number of raters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingMatrix {
    pub categories: Vec<String>,
    pub items: Vec<String>,
    pub counts: Vec<Vec<u64>>,
    pub raters_per_item: u64,
}

impl RatingMatrix {
    /// Validates a raw count matrix; categories and items get positional names.
    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self, KappaError> {
        let q = counts.first().map_or(0, Vec::len);
        if counts.iter().any(|r| r.len() != q) {
            return Err(KappaError::Ragged);
        }
        let n = counts.first().map_or(0, |r| r.iter().sum());
        if counts.len() < 2 || q < 2 || n < 2 {
            return Err(KappaError::TooSmall { items: counts.len(), categories: q, raters: n });
        }
        for (row, r) in counts.iter().enumerate() {
            let found: u64 = r.iter().sum();
            if found != n {
                return Err(KappaError::RowSum { row, expected: n, found });
            }
        }
        Ok(RatingMatrix {
            categories: (0..q).map(|j| j.to_string()).collect(),
            items: (0..counts.len()).map(|i| i.to_string()).collect(),
            counts,
            raters_per_item: n,
        })
    }

    /// Builds counts from `(item, rater, label)` triples. Labels are
    /// case-sensitive; categories are the distinct labels in sorted order.
    pub fn from_labels<'a>(ratings: impl IntoIterator<Item = (&'a str, &'a str, &'a str)>) -> Result<Self, KappaError> {
        let mut by_item: BTreeMap<&str, BTreeMap<&str, &str>> = BTreeMap::new();
        let mut categories: BTreeSet<&str> = BTreeSet::new();
        for (item, rater, label) in ratings {
            categories.insert(label);
            if by_item.entry(item).or_default().insert(rater, label).is_some() {
                return Err(KappaError::DuplicateRating { item: item.into(), rater: rater.into() });
            }
        }
        if by_item.is_empty() {
            return Err(KappaError::Empty);
        }
        let expected = by_item.values().next().map_or(0, BTreeMap::len);
        if let Some((item, raters)) = by_item.iter().find(|(_, r)| r.len() != expected) {
            return Err(KappaError::UnequalRaters { item: item.to_string(), expected, found: raters.len() });
        }
        let categories: Vec<&str> = categories.into_iter().collect();
        let counts = by_item
            .values()
            .map(|raters| {
                let mut row = vec![0u64; categories.len()];
                for label in raters.values() {
                    row[categories.binary_search(label).expect("label collected above")] += 1;
                }
                row
            })
            .collect();
        let mut m = Self::from_counts(counts)?;
        m.categories = categories.into_iter().map(str::to_string).collect();
        m.items = by_item.keys().map(|s| s.to_string()).collect();
        Ok(m)
    }

    pub fn n_items(&self) -> usize {
        self.counts.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KappaResult {
    pub kappa: f64,
    pub standard_error: f64,
    /// κ / SE.
    pub z: f64,
    pub p_bar: f64,
    pub p_e: f64,
    pub category_proportions: Vec<(String, f64)>,
    pub items: usize,
    pub raters_per_item: u64,
    pub categories: usize,
}

pub fn fleiss_kappa(m: &RatingMatrix) -> Result<KappaResult, KappaError> {
    let big_n = m.counts.len() as u64;
    let n = m.raters_per_item;
    let q = m.categories.len();

    // Agreement summed in integers so perfect agreement gives exactly 1.
    let sum_sq: u64 = m.counts.iter().flatten().map(|c| c * c).sum();
    let p_bar = (sum_sq - big_n * n) as f64 / (big_n * n * (n - 1)) as f64;

    let total = (big_n * n) as f64;
    let p: Vec<f64> = (0..q).map(|j| m.counts.iter().map(|r| r[j]).sum::<u64>() as f64 / total).collect();
    let p_e: f64 = p.iter().map(|x| x * x).sum();
    if p.iter().any(|&x| x == 1.0) || p_e >= 1.0 {
        return Err(KappaError::Degenerate);
    }
    let kappa = (p_bar - p_e) / (1.0 - p_e);

    let spq: f64 = p.iter().map(|x| x * (1.0 - x)).sum();
    let spq_diff: f64 = p.iter().map(|x| x * (1.0 - x) * ((1.0 - x) - x)).sum();
    let scale = (big_n * n * (n - 1)) as f64;
    let standard_error = std::f64::consts::SQRT_2 / (spq * scale.sqrt()) * (spq * spq - spq_diff).max(0.0).sqrt();

    Ok(KappaResult {
        kappa,
        standard_error,
        z: kappa / standard_error,
        p_bar,
        p_e,
        category_proportions: m.categories.iter().cloned().zip(p).collect(),
        items: m.counts.len(),
        raters_per_item: n,
        categories: q,
    })
}

/// Table of overall agreement: kappa and standard error with the item,
/// rater and label-handling notes underneath.
pub fn render_kappa_table(r: &KappaResult) -> String {
    let mut out = String::new();
    out.push_str("Fleiss multirater kappa\n");
    out.push_str("| Overall agreement | Kappa (K) | Standard error |\n");
    out.push_str("|---|---|---|\n");
    out.push_str(&format!("| Overall categories | {:.9} | {:.9} |\n", r.kappa, r.standard_error));
    out.push_str(&format!("a. {} items rated by {} raters each, {} categories.\n", r.items, r.raters_per_item, r.categories));
    out.push_str("b. Rating category values are case-sensitive.\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_by_two_by_two_is_one_third() {
        let m = RatingMatrix::from_counts(vec![vec![2, 0], vec![1, 1], vec![0, 2]]).unwrap();
        let r = fleiss_kappa(&m).unwrap();
        assert!((r.p_bar - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.p_e - 0.5).abs() < 1e-15);
        assert!((r.kappa - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_agreement_is_exactly_one() {
        let m = RatingMatrix::from_counts(vec![vec![4, 0, 0], vec![0, 4, 0], vec![0, 0, 4], vec![4, 0, 0]]).unwrap();
        assert_eq!(fleiss_kappa(&m).unwrap().kappa, 1.0);
    }

    #[test]
    fn single_category_is_degenerate() {
        let m = RatingMatrix::from_counts(vec![vec![3, 0], vec![3, 0]]).unwrap();
        assert_eq!(fleiss_kappa(&m), Err(KappaError::Degenerate));
    }

    #[test]
    fn invariants_enforced() {
        assert!(matches!(RatingMatrix::from_counts(vec![vec![2, 0]]), Err(KappaError::TooSmall { .. })));
        assert!(matches!(
            RatingMatrix::from_counts(vec![vec![2, 0], vec![1, 2]]),
            Err(KappaError::RowSum { row: 1, expected: 2, found: 3 })
        ));
        assert_eq!(RatingMatrix::from_counts(vec![vec![2, 0], vec![1]]), Err(KappaError::Ragged));
    }

    #[test]
    fn two_category_standard_error_by_hand() {
        // p = (1/2, 1/2): Σpq = 1/2, Σpq(q−p) = 0, so SE = √2 / √(N n (n−1)).
        let m = RatingMatrix::from_counts(vec![vec![2, 0], vec![1, 1], vec![0, 2]]).unwrap();
        let r = fleiss_kappa(&m).unwrap();
        assert!((r.standard_error - (2.0f64 / 6.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn labels_are_case_sensitive_and_counted() {
        let m = RatingMatrix::from_labels([
            ("q1", "r1", "Yes"),
            ("q1", "r2", "yes"),
            ("q2", "r1", "Yes"),
            ("q2", "r2", "Yes"),
        ])
        .unwrap();
        assert_eq!(m.categories, vec!["Yes", "yes"]);
        assert_eq!(m.counts, vec![vec![1, 1], vec![2, 0]]);
    }

    #[test]
    fn label_sheet_errors() {
        assert!(matches!(
            RatingMatrix::from_labels([("q1", "r1", "a"), ("q1", "r1", "b")]),
            Err(KappaError::DuplicateRating { .. })
        ));
        assert!(matches!(
            RatingMatrix::from_labels([("q1", "r1", "a"), ("q1", "r2", "b"), ("q2", "r1", "a")]),
            Err(KappaError::UnequalRaters { .. })
        ));
    }
}
