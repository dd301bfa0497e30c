//! Selective knowledge distillation.
//!
//! Teacher embeddings of the training faces drive an exact graph-cut
//! selection of informative samples ([`selgraph`], [`mincut`]). A compact
//! student is then trained on degraded inputs with a classification loss
//! over every sample and a feature-regression loss toward the teacher on
//! the selected ones ([`distiller`]).

pub mod dataset;
pub mod distiller;
pub mod error;
pub mod maxflow;
pub mod metric;
pub mod mincut;
pub mod selgraph;

pub use dataset::{load_student_set, save_student_set, synthesize, FaceRecord, StudentSet, SynthConfig};
pub use distiller::{Architecture, StudentModel, Supervision, Tap, TrainConfig};
pub use error::{Error, ParseErrorKind, Result};
pub use metric::{class_centroids, pairwise_measure, CentroidTable, Measure};
pub use mincut::{brute_force_minimize, lambda_sweep, minimize, SweepEntry, SweepResult};
pub use selgraph::{build_selection_graph, energy, IntraEdge, SelectionGraph, SelectionMask};
