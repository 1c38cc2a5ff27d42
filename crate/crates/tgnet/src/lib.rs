//! Compare two road-network datasets at a macroscopic scale.
//!
//! The pipeline: synthesize origin-destination demand on a study area
//! ([`demand`]), assign it to each network under static user equilibrium
//! ([`assign`]), rasterize the assigned flows into a traffic-weighted
//! geographic (TG) mass field on a planar grid ([`raster`]), and measure the
//! difference between two such fields with an unbalanced Wasserstein distance
//! whose optimal transport plan localizes where the networks disagree
//! ([`uot`], [`report`]).
//!
//! All coordinates are planar kilometers in a local study frame. Flows are
//! veh/h, travel times are hours, cell masses are veh·km, and the distance
//! between two TG fields comes out in veh·km².

pub mod assign;
pub mod demand;
pub mod net;
pub mod raster;
pub mod report;
pub mod uot;

pub use net::{Node, Point, RoadClass, RoadNetwork, StudyFrame};
