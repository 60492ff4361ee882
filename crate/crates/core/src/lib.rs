//! Simulation and verification toolkit for the randomized ABC flow on the
//! 3-torus.
//!
//! * [`torus`]: exact shear maps, their inverses and Jacobian cocycles.
//! * [`noise`]: reproducible IID noise paths.
//! * [`lyapunov`]: Lyapunov exponents and one-point chain diagnostics.
//! * [`transport`]: passive-scalar mixing and enhanced dissipation.
//! * [`dynamo`]: ideal kinematic dynamo growth.
//! * [`verify`]: numerical certificates for the submersion and rank conditions.
//! * [`control`]: constructive controllability plans with mandatory replay.

pub mod control;
pub mod dynamo;
pub mod error;
pub mod lyapunov;
pub mod noise;
pub mod torus;
pub mod transport;
pub mod verify;

pub use error::{Error, Result};
pub use noise::{noise_path, sample_noise, NoiseConfig, NoisePath, NoiseSource};
pub use torus::{Jacobian3, NoiseSample, TorusPoint};
