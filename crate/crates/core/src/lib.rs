//! Egocentric demonstration processing, an object-centric point-cloud policy,
//! and a closed-loop dual-arm tabletop simulator.
//!
//! The pipeline: [`simworld`] synthesizes demonstrations, [`episode`] stores
//! them, [`calib`] and [`cloud`] lift each frame into a sphere-anchored world
//! frame, [`traj`] extracts training targets, [`policy`] learns them, and
//! [`executor`] runs the policy against the simulator with the two [`arms`].

pub mod arms;
pub mod calib;
pub mod cloud;
pub mod geometry;
pub mod pipeline;
pub mod policy;
pub mod simworld;
pub mod episode;
pub mod executor;
pub mod traj;
