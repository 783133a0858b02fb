//! Quantum-echo imaging toolkit: Gaussian and truncated-Fock simulation, scene
//! mode decompositions, probe/measurement protocols, Fisher information and
//! Monte-Carlo estimation.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod distribution;
pub mod error;
pub mod experiments;
pub mod fisher;
pub mod fock;
pub mod gaussian;
pub mod linalg;
pub mod modes;
pub mod protocols;

pub use distribution::{Arm, CountDistribution, Outcome};
pub use error::{Error, Result};
pub use experiments::{EchoVerifyOptions, EchoVerifyReport, EstimationReport, ReplicationPlan, Strategy, SweepRow, SweepSettings, TrialBatch};
pub use fisher::{FiOptions, FisherConvention, FisherResult, ProbeClass, Task, Table1Params, Table1Row};
pub use fock::{FockDensityMatrix, KrausChannel};
pub use gaussian::{CovarianceState, GaussianChannel, SymplecticMatrix};
pub use linalg::{CMatrix, RMatrix};
pub use modes::{ModeBasis, MutualCoherenceMatrix, PixelGrid, Scene};
pub use protocols::{NoiseConfig, NoiseSector, NoiseStudy, ProbeConfig};
