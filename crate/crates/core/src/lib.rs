//! Desk-scale federated learning simulator for streaming activity data with
//! intermittent client availability, bounded client memory and forgetting
//! metrics.
//!
//! The crate is organised around the round lifecycle: [`har_stream`] produces
//! per-client labeled window streams, [`memory`] bounds what a client keeps,
//! [`learner`] trains and evaluates the shared classifier, [`client_runtime`]
//! drives per-client behaviour (participation, offline training, adaptive
//! memory), [`server`] runs rounds and aggregates, [`strategies`] wires the
//! feature flags of the four supported strategies and [`metrics`] computes
//! accuracy and forgetting trajectories.
//!
//! All floating point math is generic over [`Scalar`]; `f64` aliases for the
//! main value types live at the crate root.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub mod availability;
pub mod client_runtime;
pub mod har_stream;
pub mod learner;
pub mod memory;
pub mod metrics;
pub mod seeding;
pub mod server;
pub mod strategies;

/// Scalar type used for features and model parameters.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Default + Debug + Send + Sync + 'static
{
}

impl<T> Scalar for T where
    T: Float + FromPrimitive + ToPrimitive + Sum + Default + Debug + Send + Sync + 'static
{
}

/// Number of activity classes in the default label space.
pub const NUM_CLASSES: usize = 6;

/// Default label names, index order is the class index everywhere.
pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "Sitting",
    "Standing",
    "Walking",
    "Jogging",
    "Upstairs",
    "Downstairs",
];

pub type LabeledWindow64 = har_stream::LabeledWindow<f64>;
pub type LabeledWindow32 = har_stream::LabeledWindow<f32>;
pub type ModelParams64 = learner::ModelParams<f64>;
pub type ModelParams32 = learner::ModelParams<f32>;
pub type MemoryBuffer64 = memory::MemoryBuffer<f64>;
pub type ClientState64 = client_runtime::ClientState<f64>;
