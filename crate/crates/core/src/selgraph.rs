//! The sparse selection graph and its binary labeling energy.
//!
//! Faces are the only free variables. Each face's affinities to the
//! centroids of the other classes are summed into its unary cost, so the
//! centroid nodes never appear in the solver. Pairwise terms only link
//! faces that share a label.

use std::io::Write;

use crate::dataset::StudentSet;
use crate::error::{Error, Result};
use crate::metric::{pairwise_measure, CentroidTable, Measure};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntraEdge {
    pub i: usize,
    pub j: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionGraph {
    labels: Vec<usize>,
    unary: Vec<f64>,
    edges: Vec<IntraEdge>,
    class_count: usize,
    /// Face indices per zero-based class, ascending.
    members: Vec<Vec<usize>>,
    /// Edge indices per zero-based class.
    class_edges: Vec<Vec<usize>>,
}

impl SelectionGraph {
    /// Assembles a graph from precomputed costs. Labels are 1-based; every
    /// edge must join two faces of the same class with `i < j`.
    pub fn from_parts(labels: Vec<usize>, unary: Vec<f64>, edges: Vec<IntraEdge>, class_count: usize) -> Result<Self> {
        if labels.len() != unary.len() {
            return Err(Error::Invalid(format!("{} labels but {} unary costs", labels.len(), unary.len())));
        }
        let mut members = vec![Vec::new(); class_count];
        for (i, &l) in labels.iter().enumerate() {
            if l == 0 || l > class_count {
                return Err(Error::Invalid(format!("face {i}: label {l} outside 1..={class_count}")));
            }
            members[l - 1].push(i);
        }
        for (i, &u) in unary.iter().enumerate() {
            if !u.is_finite() {
                return Err(Error::NonFinite(format!("unary cost of face {i}")));
            }
            if u < 0.0 {
                return Err(Error::Invalid(format!("face {i}: negative unary cost {u}")));
            }
        }
        let mut class_edges = vec![Vec::new(); class_count];
        for (k, e) in edges.iter().enumerate() {
            if e.i >= e.j || e.j >= labels.len() {
                return Err(Error::Invalid(format!("edge ({}, {}) is not an ordered face pair", e.i, e.j)));
            }
            if labels[e.i] != labels[e.j] {
                return Err(Error::Invalid(format!("edge ({}, {}) crosses classes", e.i, e.j)));
            }
            if !e.weight.is_finite() {
                return Err(Error::NonFinite(format!("weight of edge ({}, {})", e.i, e.j)));
            }
            // With lambda <= 0 the pair term is lambda*w at (1,1) and zero
            // elsewhere, which is submodular exactly when w >= 0.
            if e.weight < 0.0 {
                return Err(Error::Invalid(format!(
                    "edge ({}, {}) has negative weight {}; pair term would not be submodular",
                    e.i, e.j, e.weight
                )));
            }
            class_edges[labels[e.i] - 1].push(k);
        }
        Ok(Self {
            labels,
            unary,
            edges,
            class_count,
            members,
            class_edges,
        })
    }

    pub fn n_faces(&self) -> usize {
        self.labels.len()
    }

    pub fn n_classes(&self) -> usize {
        self.class_count
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn unary(&self) -> &[f64] {
        &self.unary
    }

    pub fn edges(&self) -> &[IntraEdge] {
        &self.edges
    }

    /// Face nodes plus one centroid node per class.
    pub fn node_count(&self) -> usize {
        self.n_faces() + self.class_count
    }

    pub fn intra_edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Face-to-foreign-centroid links folded into the unary costs.
    pub fn folded_connection_count(&self) -> usize {
        self.members
            .iter()
            .map(|m| m.len() * (self.class_count - 1))
            .sum()
    }

    /// Ascending face indices of zero-based class `c`.
    pub fn class_members(&self, c: usize) -> &[usize] {
        &self.members[c]
    }

    /// Edges internal to zero-based class `c`.
    pub fn class_edges(&self, c: usize) -> impl Iterator<Item = &IntraEdge> {
        self.class_edges[c].iter().map(move |&k| &self.edges[k])
    }

    /// `Σ α_i α_j w_ij` over intra-class edges.
    pub fn pairwise_reward(&self, mask: &SelectionMask) -> f64 {
        self.edges
            .iter()
            .filter(|e| mask.alpha[e.i] && mask.alpha[e.j])
            .map(|e| e.weight)
            .sum()
    }

    /// Text dump: `i,label,U_i` rows, then `i,j,w_ij` rows.
    pub fn write_dump<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "# nodes {} classes {}", self.n_faces(), self.class_count)?;
        for (i, (l, u)) in self.labels.iter().zip(&self.unary).enumerate() {
            writeln!(w, "{i},{l},{u}")?;
        }
        writeln!(w, "# edges {}", self.edges.len())?;
        for e in &self.edges {
            writeln!(w, "{},{},{}", e.i, e.j, e.weight)?;
        }
        Ok(())
    }
}

/// Binary selection over faces; `true` keeps the face.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SelectionMask {
    pub alpha: Vec<bool>,
}

impl SelectionMask {
    pub fn empty(n: usize) -> Self {
        Self { alpha: vec![false; n] }
    }

    pub fn full(n: usize) -> Self {
        Self { alpha: vec![true; n] }
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    pub fn selected_count(&self) -> usize {
        self.alpha.iter().filter(|&&a| a).count()
    }

    pub fn is_selected(&self, i: usize) -> bool {
        self.alpha[i]
    }
}

impl From<Vec<bool>> for SelectionMask {
    fn from(alpha: Vec<bool>) -> Self {
        Self { alpha }
    }
}

/// Builds the graph from teacher features and the centroid table.
pub fn build_selection_graph(set: &StudentSet, centroids: &CentroidTable, measure: Measure) -> Result<SelectionGraph> {
    if centroids.len() != set.class_count() {
        return Err(Error::Invalid(format!(
            "{} centroids for {} classes",
            centroids.len(),
            set.class_count()
        )));
    }
    let records = set.records();
    let labels: Vec<usize> = records.iter().map(|r| r.label).collect();
    let mut unary = Vec::with_capacity(records.len());
    for r in records {
        let mut u = 0.0;
        for (c, centroid) in centroids.iter().enumerate() {
            if c != r.class_index() {
                u += pairwise_measure(&r.teacher_feature, centroid, measure)?;
            }
        }
        unary.push(u);
    }

    let mut members = vec![Vec::new(); set.class_count()];
    for r in records {
        members[r.class_index()].push(r.id);
    }
    let mut edges = Vec::with_capacity(members.iter().map(|m| m.len() * m.len().saturating_sub(1) / 2).sum());
    for m in &members {
        for (a, &i) in m.iter().enumerate() {
            for &j in &m[a + 1..] {
                let weight = pairwise_measure(&records[i].teacher_feature, &records[j].teacher_feature, measure)?;
                edges.push(IntraEdge { i, j, weight });
            }
        }
    }
    edges.sort_by_key(|e| (e.i, e.j));
    SelectionGraph::from_parts(labels, unary, edges, set.class_count())
}

pub(crate) fn check_lambda(lambda: f64) -> Result<()> {
    if lambda.is_nan() {
        return Err(Error::NonFinite("lambda".into()));
    }
    if lambda > 0.0 {
        return Err(Error::PositiveLambda(lambda));
    }
    Ok(())
}

/// `Σ α_i U_i + λ Σ α_i α_j w_ij`.
pub fn energy(graph: &SelectionGraph, mask: &SelectionMask, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    if mask.len() != graph.n_faces() {
        return Err(Error::Invalid(format!(
            "mask has {} entries, graph has {} faces",
            mask.len(),
            graph.n_faces()
        )));
    }
    let unary: f64 = graph
        .unary
        .iter()
        .zip(&mask.alpha)
        .filter(|(_, &a)| a)
        .map(|(u, _)| u)
        .sum();
    // `+ 0.0` turns a negative zero into zero.
    Ok(unary + lambda * graph.pairwise_reward(mask) + 0.0)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::dataset::FaceRecord;
    use crate::metric::class_centroids;

    pub(crate) fn three_face_set() -> StudentSet {
        let rec = |id, label, f: Vec<f64>| FaceRecord {
            id,
            label,
            teacher_feature: f,
            degraded_inputs: vec![vec![0.0]],
            outlier_flag: None,
        };
        StudentSet::new(
            vec![rec(0, 1, vec![1.0, 0.0]), rec(1, 1, vec![0.8, 0.6]), rec(2, 2, vec![0.0, 1.0])],
            2,
            2,
            1,
            1,
        )
        .unwrap()
    }

    fn three_face_graph() -> SelectionGraph {
        let set = three_face_set();
        build_selection_graph(&set, &class_centroids(&set).unwrap(), Measure::CosSim).unwrap()
    }

    #[test]
    fn counts_on_small_graph() {
        let g = three_face_graph();
        assert_eq!(g.node_count(), 5);
        assert_eq!(g.intra_edge_count(), 1);
        assert_eq!(g.folded_connection_count(), 3);
    }

    #[test]
    fn unary_and_edge_values() {
        let g = three_face_graph();
        // U_2 = cos((0,1), (0.9,0.3)) = 0.3 / sqrt(0.9)
        let expected = [0.0, 0.6, 0.3 / 0.9f64.sqrt()];
        for (u, e) in g.unary().iter().zip(expected) {
            assert!((u - e).abs() < 1e-6, "{u} vs {e}");
        }
        assert!((g.unary()[2] - 0.3162).abs() < 1e-4);
        assert_eq!(g.edges().len(), 1);
        assert!((g.edges()[0].weight - 0.8).abs() < 1e-12);
    }

    #[test]
    fn energy_examples() {
        let g = three_face_graph();
        for lambda in [0.0, -1.0, -100.0] {
            assert_eq!(energy(&g, &SelectionMask::empty(3), lambda).unwrap(), 0.0);
        }
        let e = energy(&g, &vec![true, true, false].into(), -1.0).unwrap();
        assert!((e - (-0.2)).abs() < 1e-12);
        let single: SelectionMask = vec![false, true, false].into();
        for lambda in [0.0, -3.0] {
            assert!((energy(&g, &single, lambda).unwrap() - 0.6).abs() < 1e-12);
        }
    }

    #[test]
    fn positive_lambda_and_bad_mask_rejected() {
        let g = three_face_graph();
        assert!(matches!(energy(&g, &SelectionMask::empty(3), 0.5), Err(Error::PositiveLambda(_))));
        assert!(energy(&g, &SelectionMask::empty(2), -1.0).is_err());
    }

    #[test]
    fn cross_class_and_negative_edges_rejected() {
        let e = |i, j, weight| IntraEdge { i, j, weight };
        assert!(SelectionGraph::from_parts(vec![1, 2], vec![0.0, 0.0], vec![e(0, 1, 0.5)], 2).is_err());
        assert!(SelectionGraph::from_parts(vec![1, 1], vec![0.0, 0.0], vec![e(0, 1, -0.5)], 1).is_err());
        assert!(SelectionGraph::from_parts(vec![1, 1], vec![0.0, 0.0], vec![e(1, 0, 0.5)], 1).is_err());
    }

    #[test]
    fn dump_format() {
        let g = three_face_graph();
        let mut buf = Vec::new();
        g.write_dump(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "# nodes 3 classes 2");
        assert_eq!(lines[1], "0,1,0");
        assert!(lines[4].starts_with("# edges 1"));
        assert!(lines[5].starts_with("0,1,0.8"));
    }
}
