//! Continuous-time latent dynamics over irregular observations.

mod dynamics;
mod field;
mod gru;
mod odernn;
mod solver;

pub use dynamics::{trajectory_csv, velocity_acceleration, velocity_acceleration_taped, VELOCITY_FLOOR};
pub use field::{frozen_frequencies, time_encoding, FieldVjp, VectorField};
pub use gru::Gru;
pub use odernn::{adjoint_segment, AdjointSegment, GradMode, OdeGradients, OdeRnn, Trajectory};
pub use solver::{dopri5, Solution, SolverOptions, StepRecord};
