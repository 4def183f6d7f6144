//! Training-free navigation engine for a deterministic 2D raycast gridworld.
//!
//! The pipeline is a semantic-to-geometric cascade: a per-step relevance
//! signal is projected into a persistent bird's-eye-view map that scores
//! exploration frontiers; when the signal indicates goal proximity, a
//! registration provider verifies the match and a Sim(3) alignment recovers
//! the goal camera pose for last-meter navigation.
//!
//! Core math is generic over the scalar type (`f32`/`f64`, see
//! [`scalar::Real`]); the simulator, providers and episode runner work in
//! `f64` through the aliases exported at the crate root.

pub mod bev;
pub mod cascade;
pub mod fieldio;
pub mod frontier;
pub mod geometry;
pub mod planner;
pub mod providers;
mod ray;
pub mod scalar;
pub mod sim;

pub use scalar::Real;

/// Concrete `f64` aliases for the generic core types.
pub type Pose = geometry::Pose<f64>;
pub type Pose2D = geometry::Pose2D<f64>;
pub type Sim3Transform = geometry::Sim3Transform<f64>;
pub type AlignmentResult = geometry::AlignmentResult<f64>;
pub type GridMap = bev::GridMap<f64>;
pub type RelevanceImage = bev::RelevanceImage<f64>;
pub type FeatureGrid = bev::FeatureGrid<f64>;
pub type ProjectionParams = bev::ProjectionParams<f64>;
pub type Frontier = bev::Frontier<f64>;
pub type FrontierWeights = frontier::FrontierWeights<f64>;
pub type ScoredFrontier = frontier::ScoredFrontier<f64>;
pub type PlannerParams = planner::PlannerParams<f64>;
pub type DistanceField = planner::DistanceField<f64>;
pub type ClearanceField = planner::ClearanceField<f64>;
pub type CascadeParams = cascade::CascadeParams<f64>;
pub type CascadeState = cascade::CascadeState<f64>;
pub type Keyframe = cascade::Keyframe<f64>;
pub type MemoryCache = cascade::MemoryCache<f64>;
pub type RegistrationResult = cascade::RegistrationResult<f64>;
