//! Decentralized pose-graph back end: graph state and delta exchange,
//! optimizer election, and GNC-robust SE(2) pose graph optimization.

pub mod graph;
pub mod solver;

pub use graph::{
    diag_information, elect, read_g2o, write_g2o, Edge, EdgeKind, GraphDelta, GraphError, NodeKey,
    PoseGraph, VersionEntry, VersionVector,
};
pub use solver::{
    apply_correction, edge_jacobians, edge_residual, optimize, GncConfig, OptimizationResult,
    CHI2_0_99_3DOF,
};
