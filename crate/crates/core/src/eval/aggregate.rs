//! Aggregation: category tables and alpha-coverage statistics.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Pairwise (in)correctness categories, in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseCategories {
    pub both_correct: f64,
    pub exactly_one: f64,
    pub both_incorrect: f64,
    pub counted: usize,
}

/// Percentages over items with defined verdicts in both modes.
pub fn pairwise_categories(a: &[Option<bool>], b: &[Option<bool>]) -> Result<PairwiseCategories> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let mut both = 0usize;
    let mut one = 0usize;
    let mut neither = 0usize;
    let mut counted = 0usize;
    for (x, y) in a.iter().zip(b) {
        let (Some(x), Some(y)) = (x, y) else { continue };
        counted += 1;
        match (x, y) {
            (true, true) => both += 1,
            (false, false) => neither += 1,
            _ => one += 1,
        }
    }
    let pct = |n: usize| {
        if counted == 0 {
            0.0
        } else {
            100.0 * n as f64 / counted as f64
        }
    };
    Ok(PairwiseCategories {
        both_correct: pct(both),
        exactly_one: pct(one),
        both_incorrect: pct(neither),
        counted,
    })
}

/// Triplet correctness-count categories, in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripletCategories {
    pub all_correct: f64,
    pub exactly_two: f64,
    pub exactly_one: f64,
    pub all_incorrect: f64,
    pub counted: usize,
}

pub fn triplet_categories(
    v1: &[Option<bool>],
    v2: &[Option<bool>],
    v3: &[Option<bool>],
) -> Result<TripletCategories> {
    if v1.len() != v2.len() || v2.len() != v3.len() {
        return Err(Error::DimensionMismatch {
            expected: v1.len(),
            got: v2.len().max(v3.len()),
        });
    }
    let mut buckets = [0usize; 4];
    let mut counted = 0usize;
    for i in 0..v1.len() {
        let (Some(a), Some(b), Some(c)) = (v1[i], v2[i], v3[i]) else {
            continue;
        };
        counted += 1;
        let hits = a as usize + b as usize + c as usize;
        buckets[hits] += 1;
    }
    let pct = |n: usize| {
        if counted == 0 {
            0.0
        } else {
            100.0 * n as f64 / counted as f64
        }
    };
    Ok(TripletCategories {
        all_correct: pct(buckets[3]),
        exactly_two: pct(buckets[2]),
        exactly_one: pct(buckets[1]),
        all_incorrect: pct(buckets[0]),
        counted,
    })
}

/// Alpha-coverage statistics from an item x alpha correctness matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaCoverage {
    pub alphas: Vec<f64>,
    /// Column means: accuracy of each fixed alpha.
    pub per_alpha_accuracy: Vec<f64>,
    /// Fraction of rows with at least one correct cell.
    pub coverage: f64,
    /// Histogram of per-row correct counts, keyed 0..=|A|.
    pub count_distribution: BTreeMap<usize, usize>,
}

/// `matrix[item][alpha]` must be fully defined (booleans, no gaps).
pub fn alpha_coverage(alphas: &[f64], matrix: &[Vec<bool>]) -> Result<AlphaCoverage> {
    if matrix.is_empty() {
        return Err(Error::Validation("empty correctness matrix".into()));
    }
    for row in matrix {
        if row.len() != alphas.len() {
            return Err(Error::DimensionMismatch {
                expected: alphas.len(),
                got: row.len(),
            });
        }
    }
    let rows = matrix.len() as f64;
    let per_alpha_accuracy: Vec<f64> = (0..alphas.len())
        .map(|j| matrix.iter().filter(|r| r[j]).count() as f64 / rows)
        .collect();
    let mut covered = 0usize;
    let mut count_distribution: BTreeMap<usize, usize> = (0..=alphas.len()).map(|k| (k, 0)).collect();
    for row in matrix {
        let hits = row.iter().filter(|&&b| b).count();
        if hits > 0 {
            covered += 1;
        }
        *count_distribution.get_mut(&hits).unwrap() += 1;
    }
    let coverage = covered as f64 / rows;
    // Union bound: coverage dominates every column accuracy.
    debug_assert!(per_alpha_accuracy.iter().all(|&a| coverage >= a - 1e-12));
    Ok(AlphaCoverage {
        alphas: alphas.to_vec(),
        per_alpha_accuracy,
        coverage,
        count_distribution,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(xs: &[u8]) -> Vec<Option<bool>> {
        xs.iter().map(|&x| Some(x == 1)).collect()
    }

    #[test]
    fn pairwise_counting() {
        let p = pairwise_categories(&v(&[1, 1, 0]), &v(&[1, 0, 0])).unwrap();
        assert!((p.both_correct - 100.0 / 3.0).abs() < 1e-9);
        assert!((p.exactly_one - 100.0 / 3.0).abs() < 1e-9);
        assert!((p.both_incorrect - 100.0 / 3.0).abs() < 1e-9);
        assert!((p.both_correct + p.exactly_one + p.both_incorrect - 100.0).abs() < 0.01);
    }

    #[test]
    fn pairwise_identical_and_complementary() {
        let p = pairwise_categories(&v(&[1, 0, 1]), &v(&[1, 0, 1])).unwrap();
        assert_eq!(p.exactly_one, 0.0);
        let p = pairwise_categories(&v(&[1, 0, 1]), &v(&[0, 1, 0])).unwrap();
        assert_eq!(p.both_correct, 0.0);
        assert_eq!(p.both_incorrect, 0.0);
        assert_eq!(p.exactly_one, 100.0);
    }

    #[test]
    fn pairwise_excludes_undefined() {
        let mut a = v(&[1, 1]);
        a.push(None);
        let mut b = v(&[1, 0]);
        b.push(Some(true));
        let p = pairwise_categories(&a, &b).unwrap();
        assert_eq!(p.counted, 2);
    }

    #[test]
    fn triplet_counting() {
        let t = triplet_categories(&v(&[1, 1, 1]), &v(&[1, 1, 1]), &v(&[1, 1, 1])).unwrap();
        assert_eq!(t.all_correct, 100.0);

        let t = triplet_categories(&v(&[1, 1]), &v(&[1, 1]), &v(&[0, 0])).unwrap();
        assert_eq!(t.exactly_two, 100.0);

        let t = triplet_categories(
            &v(&[1, 1, 1, 0]),
            &v(&[1, 1, 0, 0]),
            &v(&[1, 0, 0, 0]),
        )
        .unwrap();
        assert_eq!(t.all_correct, 25.0);
        assert_eq!(t.exactly_two, 25.0);
        assert_eq!(t.exactly_one, 25.0);
        assert_eq!(t.all_incorrect, 25.0);
        let total = t.all_correct + t.exactly_two + t.exactly_one + t.all_incorrect;
        assert!((total - 100.0).abs() < 0.01);
    }

    #[test]
    fn coverage_hand_case() {
        let alphas = [0.0, 1.0];
        let matrix = vec![vec![true, false], vec![false, false], vec![false, true]];
        let c = alpha_coverage(&alphas, &matrix).unwrap();
        assert!((c.per_alpha_accuracy[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((c.per_alpha_accuracy[1] - 1.0 / 3.0).abs() < 1e-12);
        assert!((c.coverage - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(c.count_distribution[&0], 1);
        assert_eq!(c.count_distribution[&1], 2);
        assert_eq!(c.count_distribution[&2], 0);
    }

    #[test]
    fn coverage_all_true() {
        let alphas = [-1.0, 0.0, 1.0];
        let matrix = vec![vec![true; 3]; 4];
        let c = alpha_coverage(&alphas, &matrix).unwrap();
        assert_eq!(c.coverage, 1.0);
        assert_eq!(c.count_distribution[&3], 4);
    }

    #[test]
    fn coverage_dominates_per_alpha_accuracy() {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(4);
        for _ in 0..50 {
            let rows = rng.gen_range(1..40);
            let cols = rng.gen_range(1..7);
            let matrix: Vec<Vec<bool>> = (0..rows)
                .map(|_| (0..cols).map(|_| rng.gen_bool(0.4)).collect())
                .collect();
            let alphas: Vec<f64> = (0..cols).map(|i| i as f64).collect();
            let c = alpha_coverage(&alphas, &matrix).unwrap();
            for &acc in &c.per_alpha_accuracy {
                assert!(c.coverage >= acc - 1e-12);
            }
        }
    }

    #[test]
    fn empty_matrix_is_error() {
        assert!(alpha_coverage(&[0.0], &[]).is_err());
    }
}
