//! Agent-guided policy search on desk-scale simulated manipulation tasks.
//!
//! An off-policy actor-critic learner is supervised by a pluggable agent. The
//! agent is only consulted when an optimal-transport deviation index computed
//! against expert demonstrations exceeds a calibrated threshold, and it
//! intervenes either with corrective waypoint plans or by pruning exploration
//! to an axis-aligned 3D box.
//!
//! Module map:
//!
//! | module | contents |
//! |--------|----------|
//! | [`encoding`] | observations and the seeded projection encoder |
//! | [`ot`] | cosine cost, exact and entropic OT, deviation index, threshold |
//! | [`geometry`] | pinhole camera, deprojection, boxes and action masking |
//! | [`primitives`] | action primitive calls, waypoint resolution and tracking |
//! | [`supervisor`] | agent trait, scripted oracle, remote client, memory, wire codecs |
//! | [`env`] | insertion and hanging simulators, expert, demos, camera |
//! | [`rl`] | networks, replay buffers, twin-critic soft actor-critic |
//! | [`orchestrator`] | the training loop, evaluation and metrics |
//! | [`harness`] | experiment specs, baselines, ablations and exports |

pub mod encoding;
pub mod env;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod orchestrator;
pub mod ot;
pub mod primitives;
pub mod rl;
pub mod supervisor;

pub use error::{Error, Result};

/// Three-vector in metres or radians, in the robot base frame.
pub type Vec3 = nalgebra::Vector3<f64>;
