//! Verification AUC, closed-set identification error and rank-1 retrieval.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{StudentModel, Tap};
use crate::dataset::StudentSet;
use crate::error::{Error, Result};
use crate::metric::{dot, norm};

#[derive(Debug, Clone, PartialEq)]
pub struct VerificationPair {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub same: bool,
}

/// Area under the ROC curve from the Mann-Whitney rank statistic. Tied
/// scores share their average rank, so a tie between a positive and a
/// negative counts one half.
pub fn auc(scored: &[(f64, bool)]) -> Result<f64> {
    let n_pos = scored.iter().filter(|s| s.1).count();
    let n_neg = scored.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Evaluation(format!(
            "AUC needs positives and negatives, got {n_pos} and {n_neg}"
        )));
    }
    if scored.iter().any(|s| !s.0.is_finite()) {
        return Err(Error::NonFinite("verification score".into()));
    }
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored[a].0.total_cmp(&scored[b].0));
    let mut pos_rank_sum = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scored[order[end]].0 == scored[order[start]].0 {
            end += 1;
        }
        // 1-based ranks start+1 ..= end
        let mid_rank = (start + 1 + end) as f64 / 2.0;
        let positives = order[start..end].iter().filter(|&&k| scored[k].1).count();
        pos_rank_sum += mid_rank * positives as f64;
        start = end;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = norm(&v);
    if n == 0.0 {
        v
    } else {
        v.into_iter().map(|x| x / n).collect()
    }
}

/// Scores each pair by the cosine of its length-normalized tap features.
/// A zero feature vector scores 0.
pub fn verification_scores(model: &StudentModel, pairs: &[VerificationPair], tap: Tap) -> Result<Vec<(f64, bool)>> {
    pairs
        .iter()
        .map(|p| {
            let a = unit(model.features(&p.a, tap)?);
            let b = unit(model.features(&p.b, tap)?);
            Ok((dot(&a, &b), p.same))
        })
        .collect()
}

pub fn evaluate_verification(model: &StudentModel, pairs: &[VerificationPair], tap: Tap) -> Result<f64> {
    auc(&verification_scores(model, pairs, tap)?)
}

/// Draws `per_kind` positive pairs (two records of one class, or two
/// versions of one record when the class has a single record) and
/// `per_kind` negative pairs (records of two different classes).
pub fn verification_pairs(set: &StudentSet, per_kind: usize, seed: u64) -> Result<Vec<VerificationPair>> {
    if set.class_count() < 2 {
        return Err(Error::Evaluation("negative pairs need at least two classes".into()));
    }
    let mut by_class = vec![Vec::new(); set.class_count()];
    for r in set.records() {
        by_class[r.class_index()].push(r.id);
    }
    let records = set.records();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(2 * per_kind);
    let version = |rng: &mut ChaCha8Rng| rng.random_range(0..set.versions());
    for _ in 0..per_kind {
        let members = &by_class[rng.random_range(0..set.class_count())];
        let i = members[rng.random_range(0..members.len())];
        let j = if members.len() > 1 {
            loop {
                let j = members[rng.random_range(0..members.len())];
                if j != i {
                    break j;
                }
            }
        } else {
            i
        };
        pairs.push(VerificationPair {
            a: records[i].degraded_inputs[version(&mut rng)].clone(),
            b: records[j].degraded_inputs[version(&mut rng)].clone(),
            same: true,
        });
    }
    for _ in 0..per_kind {
        let ca = rng.random_range(0..set.class_count());
        let cb = (ca + rng.random_range(1..set.class_count())) % set.class_count();
        let i = by_class[ca][rng.random_range(0..by_class[ca].len())];
        let j = by_class[cb][rng.random_range(0..by_class[cb].len())];
        pairs.push(VerificationPair {
            a: records[i].degraded_inputs[version(&mut rng)].clone(),
            b: records[j].degraded_inputs[version(&mut rng)].clone(),
            same: false,
        });
    }
    Ok(pairs)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdentificationReport {
    pub top1_error: f64,
    pub top5_error: f64,
}

/// Position of `label` when classes are ranked by descending logit, ties
/// going to the lower class index.
pub fn label_rank(logits: &[f64], label: usize) -> usize {
    let z = logits[label];
    logits
        .iter()
        .enumerate()
        .filter(|&(c, &v)| v > z || (v == z && c < label))
        .count()
}

/// Top-1 and top-5 error over every degraded input of `set`.
pub fn evaluate_identification(model: &StudentModel, set: &StudentSet) -> Result<IdentificationReport> {
    if set.class_count() > model.class_count() {
        return Err(Error::Evaluation(format!(
            "labels reach {} but the head has {} classes",
            set.class_count(),
            model.class_count()
        )));
    }
    let (mut miss1, mut miss5, mut total) = (0usize, 0usize, 0usize);
    for r in set.records() {
        for x in &r.degraded_inputs {
            let (_, logits) = model.forward(x)?;
            let rank = label_rank(&logits, r.class_index());
            miss1 += usize::from(rank >= 1);
            miss5 += usize::from(rank >= 5);
            total += 1;
        }
    }
    Ok(IdentificationReport {
        top1_error: miss1 as f64 / total as f64,
        top5_error: miss5 as f64 / total as f64,
    })
}

/// Rank-1 accuracy of matching probe inputs against a gallery.
///
/// Gallery features are compared as given with the probes' `tap`
/// features, by cosine similarity. Ties go to the lower gallery id.
pub fn evaluate_retrieval(
    model: &StudentModel,
    gallery: &[(usize, Vec<f64>)],
    probes: &[(usize, Vec<f64>)],
    tap: Tap,
) -> Result<f64> {
    if gallery.is_empty() {
        return Err(Error::Evaluation("empty gallery".into()));
    }
    if probes.is_empty() {
        return Err(Error::Evaluation("no probes".into()));
    }
    let mut ids = HashSet::new();
    for (id, _) in gallery {
        if !ids.insert(*id) {
            return Err(Error::Evaluation(format!("duplicate gallery id {id}")));
        }
    }
    let mut sorted: Vec<(usize, Vec<f64>)> = gallery.iter().map(|(id, f)| (*id, unit(f.clone()))).collect();
    sorted.sort_by_key(|g| g.0);

    let mut hits = 0usize;
    for (probe_id, x) in probes {
        if !ids.contains(probe_id) {
            return Err(Error::Evaluation(format!("probe id {probe_id} not in gallery")));
        }
        let f = unit(model.features(x, tap)?);
        let mut best: Option<(usize, f64)> = None;
        for (gid, g) in &sorted {
            if g.len() != f.len() {
                return Err(Error::Evaluation(format!(
                    "gallery feature dim {} vs probe feature dim {}",
                    g.len(),
                    f.len()
                )));
            }
            let s = dot(&f, g);
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((*gid, s));
            }
        }
        hits += usize::from(best.map(|b| b.0) == Some(*probe_id));
    }
    Ok(hits as f64 / probes.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distiller::model::{init_student, Architecture};

    fn quadratic_auc(scored: &[(f64, bool)]) -> f64 {
        let pos: Vec<f64> = scored.iter().filter(|s| s.1).map(|s| s.0).collect();
        let neg: Vec<f64> = scored.iter().filter(|s| !s.1).map(|s| s.0).collect();
        let mut wins = 0.0;
        for p in &pos {
            for n in &neg {
                wins += if p > n {
                    1.0
                } else if p == n {
                    0.5
                } else {
                    0.0
                };
            }
        }
        wins / (pos.len() * neg.len()) as f64
    }

    #[test]
    fn perfect_and_tied_scores() {
        let perfect: Vec<(f64, bool)> = (0..6).map(|i| if i % 2 == 0 { (1.0, true) } else { (-1.0, false) }).collect();
        assert_eq!(auc(&perfect).unwrap(), 1.0);
        let tied: Vec<(f64, bool)> = (0..6).map(|i| (0.3, i % 3 == 0)).collect();
        assert_eq!(auc(&tied).unwrap(), 0.5);
        assert!(auc(&[(0.1, true)]).is_err());
    }

    #[test]
    fn matches_pairwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let scored: Vec<(f64, bool)> = (0..100)
            .map(|_| ((rng.random_range(0..20) as f64) / 10.0, rng.random_bool(0.4)))
            .collect();
        assert_eq!(auc(&scored).unwrap(), quadratic_auc(&scored));
    }

    fn identity_model(dim: usize, classes: usize) -> StudentModel {
        let mut m = init_student(&Architecture::with_hidden(dim, &[], dim, classes), 0).unwrap();
        let w = &mut m.trunk[0].weights;
        w.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..dim {
            w[i * dim + i] = 1.0;
        }
        m
    }

    #[test]
    fn rank_ties_go_to_lower_index() {
        assert_eq!(label_rank(&[1.0, 1.0, 0.5], 0), 0);
        assert_eq!(label_rank(&[1.0, 1.0, 0.5], 1), 1);
        assert_eq!(label_rank(&[0.0, 2.0, 3.0], 0), 2);
    }

    #[test]
    fn top5_of_five_classes_never_misses() {
        let set = crate::dataset::synthesize(&crate::dataset::SynthConfig {
            class_count: 5,
            per_class_count: 20,
            feature_dim: 8,
            input_dim: 8,
            versions: 2,
            outlier_fraction: 0.0,
            ..Default::default()
        })
        .unwrap();
        let m = init_student(&Architecture::for_dataset(&set), 3).unwrap();
        let rep = evaluate_identification(&m, &set).unwrap();
        assert_eq!(rep.top5_error, 0.0);
        assert!(rep.top1_error > 0.0);
    }

    #[test]
    fn retrieval_with_exact_probes() {
        let m = identity_model(3, 2);
        let gallery = vec![(10, vec![1.0, 0.0, 0.0]), (11, vec![0.0, 1.0, 0.0]), (12, vec![0.0, 0.0, 1.0])];
        assert_eq!(evaluate_retrieval(&m, &gallery, &gallery, Tap::Mimic).unwrap(), 1.0);
        let single = vec![(4, vec![1.0, 2.0, 3.0])];
        let probes = vec![(4, vec![-1.0, 0.5, 0.0]), (4, vec![0.0, 0.0, 1.0])];
        assert_eq!(evaluate_retrieval(&m, &single, &probes, Tap::Mimic).unwrap(), 1.0);
        assert!(evaluate_retrieval(&m, &[], &probes, Tap::Mimic).is_err());
        assert!(evaluate_retrieval(&m, &single, &[(5, vec![0.0; 3])], Tap::Mimic).is_err());
    }

    #[test]
    fn retrieval_tie_prefers_lower_gallery_id() {
        let m = identity_model(2, 2);
        let gallery = vec![(7, vec![1.0, 0.0]), (3, vec![1.0, 0.0])];
        let probes = vec![(3, vec![2.0, 0.0]), (7, vec![2.0, 0.0])];
        assert_eq!(evaluate_retrieval(&m, &gallery, &probes, Tap::Mimic).unwrap(), 0.5);
    }
}
