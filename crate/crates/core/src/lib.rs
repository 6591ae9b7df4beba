//! Home/work anchor inference from location pings, workplace resolution and
//! categorization, and commuter statistics across analysis windows.
//!
//! Geometry and clustering are generic over [`num::Scalar`] (`f32` or `f64`);
//! the aliases at the crate root fix the scalar to `f64`, which is what the
//! file formats and the pipeline use.

pub mod analytics;
pub mod anchors;
pub mod categorize;
pub mod config;
pub mod cluster;
pub mod geo;
pub mod geocode;
pub mod ingest;
pub mod num;
pub mod pipeline;
pub mod synthgen;

pub use geo::{day_kind, haversine_km, in_bbox, local_day, AnalysisWindow, DayKind};
pub use num::Scalar;

pub type GeoPoint = geo::GeoPoint<f64>;
pub type GeoPoint32 = geo::GeoPoint<f32>;
pub type Ping = geo::Ping<f64>;
pub type BoundingBox = geo::BoundingBox<f64>;
pub type DbscanParams = cluster::DbscanParams<f64>;
pub type ClusterCenter = cluster::ClusterCenter<f64>;
pub type AnchorPair = anchors::AnchorPair<f64>;
