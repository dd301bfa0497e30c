//! Fixtures shared by the criterion benches.

use skd_core::distiller::{init_student, Architecture};
use skd_core::{build_selection_graph, class_centroids, synthesize, Measure, SelectionGraph, StudentModel, StudentSet, SynthConfig};

/// Synthetic set with `classes` classes of `per_class` faces.
pub fn synthetic_set(classes: usize, per_class: usize) -> StudentSet {
    synthesize(&SynthConfig {
        class_count: classes,
        per_class_count: per_class,
        versions: 4,
        ..SynthConfig::default()
    })
    .expect("valid synthetic config")
}

pub fn selection_graph(set: &StudentSet) -> SelectionGraph {
    let centroids = class_centroids(set).expect("nonempty classes");
    build_selection_graph(set, &centroids, Measure::CosSim).expect("finite features")
}

pub fn desk_student(set: &StudentSet) -> StudentModel {
    init_student(&Architecture::for_dataset(set), 0).expect("valid architecture")
}
