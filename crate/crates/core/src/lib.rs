//! Deterministic multi-robot collaborative SLAM simulation library.
//!
//! The crate models a small team of robots exploring a synthetic planar
//! world. Robots build keyframe pose graphs from noisy odometry, recognize
//! shared places by exchanging compact scan descriptors over an intermittent
//! bandwidth-gated network, confirm candidate matches with robust scan
//! registration under a per-round budget, and periodically elect one robot to
//! run GNC-robust pose graph optimization and broadcast corrections.
//!
//! Everything is a pure function of the scenario configuration and the run
//! seed: two runs with identical inputs produce identical outputs.

pub mod backend;
pub mod comms;
pub mod config;
pub mod eval;
pub mod frontend;
pub mod geometry;
pub mod plot;
pub mod rng;
pub mod runner;
pub mod world;

pub use geometry::Pose2;
