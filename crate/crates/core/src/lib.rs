//! Physics-informed non-rigid point-set registration.
//!
//! A PointNet-style network predicts per-point displacements and stresses for
//! a source cloud given a target cloud. Training minimises a Chamfer alignment
//! term plus linear-elasticity residuals (equilibrium, Hooke's law, elastic
//! energy) evaluated on the network's own spatial derivatives.

pub mod autodiff;
pub mod elasticity;
pub mod engine;
pub mod geometry;
pub mod io;
pub mod network;
pub mod synthdata;

pub use elasticity::{MaterialConfig, MaterialField, VoigtTensor6};
pub use engine::{LossBreakdown, RegistrationResult, TrainConfig};
pub use geometry::{Compartment, LandmarkPair, PointSet, Region, RigidTransform};
pub use network::{Arch, HeadOutput, RegModel};
pub use synthdata::{GroundTruth, Scenario};

/// A 3-vector in millimetres.
pub type Vec3 = [f64; 3];
