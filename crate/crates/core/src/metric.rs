//! Cosine affinity between teacher features and per-class centroids.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::StudentSet;
use crate::error::{Error, Result};

/// How two feature vectors are compared.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Measure {
    /// `max(0, cos(a, b))`, in `[0, 1]`.
    #[default]
    CosSim,
    /// `1 - cos(a, b)`, in `[0, 2]`. Not the default: under this reading the
    /// selection energy favors faces far from their own class.
    CosDist,
}

impl fmt::Display for Measure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Measure::CosSim => "cossim",
            Measure::CosDist => "cosdist",
        })
    }
}

impl FromStr for Measure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cossim" => Ok(Measure::CosSim),
            "cosdist" => Ok(Measure::CosDist),
            other => Err(Error::Invalid(format!("unknown measure `{other}`"))),
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Plain cosine of the angle between `a` and `b`.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Invalid(format!("dimension mismatch {} vs {}", a.len(), b.len())));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    // Rounding can push |cos| a hair past 1.
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Nonnegative comparison of two features under `measure`.
pub fn pairwise_measure(a: &[f64], b: &[f64], measure: Measure) -> Result<f64> {
    let cos = cosine(a, b)?;
    Ok(match measure {
        Measure::CosSim => cos.max(0.0),
        Measure::CosDist => 1.0 - cos,
    })
}

/// Mean teacher feature of each class.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidTable {
    centroids: Vec<Vec<f64>>,
}

impl CentroidTable {
    /// Centroid of the class with 1-based `label`.
    pub fn get(&self, label: usize) -> &[f64] {
        &self.centroids[label - 1]
    }

    pub fn len(&self) -> usize {
        self.centroids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centroids.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.centroids.iter().map(Vec::as_slice)
    }
}

/// Per-class means of teacher features, summed in record-id order.
pub fn class_centroids(set: &StudentSet) -> Result<CentroidTable> {
    let d = set.feature_dim();
    let mut sums = vec![vec![0.0; d]; set.class_count()];
    let mut counts = vec![0usize; set.class_count()];
    for r in set.records() {
        let c = r.class_index();
        counts[c] += 1;
        for (s, v) in sums[c].iter_mut().zip(&r.teacher_feature) {
            *s += v;
        }
    }
    for (c, (sum, &k)) in sums.iter_mut().zip(&counts).enumerate() {
        if k == 0 {
            return Err(Error::EmptyClass { class: c + 1 });
        }
        sum.iter_mut().for_each(|s| *s /= k as f64);
    }
    Ok(CentroidTable { centroids: sums })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::FaceRecord;
    use proptest::prelude::*;

    fn set_from(features: Vec<(usize, Vec<f64>)>, classes: usize) -> StudentSet {
        let d = features[0].1.len();
        let records = features
            .into_iter()
            .enumerate()
            .map(|(id, (label, f))| FaceRecord {
                id,
                label,
                teacher_feature: f,
                degraded_inputs: vec![vec![0.0]],
                outlier_flag: None,
            })
            .collect();
        StudentSet::new(records, classes, d, 1, 1).unwrap()
    }

    #[test]
    fn identical_and_orthogonal_vectors() {
        let v = [0.3, 0.4, 1.2];
        assert!((pairwise_measure(&v, &v, Measure::CosSim).unwrap() - 1.0).abs() < 1e-15);
        assert!(pairwise_measure(&v, &v, Measure::CosDist).unwrap().abs() < 1e-15);
        assert_eq!(pairwise_measure(&[1.0, 0.0], &[0.0, 1.0], Measure::CosSim).unwrap(), 0.0);
        assert_eq!(pairwise_measure(&[1.0, 0.0], &[0.0, 1.0], Measure::CosDist).unwrap(), 1.0);
    }

    #[test]
    fn three_four_five_angle() {
        // 0.8 / (1 * 1)
        let s = pairwise_measure(&[1.0, 0.0], &[0.8, 0.6], Measure::CosSim).unwrap();
        assert!((s - 0.8).abs() < 1e-15);
    }

    #[test]
    fn negative_cosine_is_clamped() {
        assert_eq!(pairwise_measure(&[1.0, 0.0], &[-1.0, 0.1], Measure::CosSim).unwrap(), 0.0);
        let d = pairwise_measure(&[1.0, 0.0], &[-1.0, 0.0], Measure::CosDist).unwrap();
        assert!((d - 2.0).abs() < 1e-15);
    }

    #[test]
    fn zero_norm_is_an_error() {
        assert!(matches!(pairwise_measure(&[0.0, 0.0], &[1.0, 0.0], Measure::CosSim), Err(Error::ZeroNorm)));
    }

    #[test]
    fn centroid_of_equal_vectors_and_two_point_mean() {
        let set = set_from(
            vec![
                (1, vec![0.2, 0.7]),
                (1, vec![0.2, 0.7]),
                (2, vec![1.0, 0.0]),
                (2, vec![0.0, 1.0]),
            ],
            2,
        );
        let table = class_centroids(&set).unwrap();
        assert_eq!(table.get(1), &[0.2, 0.7]);
        assert_eq!(table.get(2), &[0.5, 0.5]);
    }

    proptest! {
        #[test]
        fn symmetric_and_scale_invariant(
            a in proptest::collection::vec(0.01f64..10.0, 6),
            b in proptest::collection::vec(0.01f64..10.0, 6),
            k in 1e-3f64..1e3,
        ) {
            for m in [Measure::CosSim, Measure::CosDist] {
                let ab = pairwise_measure(&a, &b, m).unwrap();
                prop_assert_eq!(ab, pairwise_measure(&b, &a, m).unwrap());
                let scaled: Vec<f64> = a.iter().map(|v| v * k).collect();
                prop_assert!((pairwise_measure(&scaled, &b, m).unwrap() - ab).abs() < 1e-12);
            }
            let s = pairwise_measure(&a, &b, Measure::CosSim).unwrap();
            prop_assert!((0.0..=1.0).contains(&s));
        }
    }
}
