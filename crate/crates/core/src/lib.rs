//! Equivariant diffusion over small molecules, fine-tuned with a clipped
//! policy-gradient objective against force-field and valency rewards.

pub mod chem;
pub mod cli;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod forcefield;
pub mod geometry;
pub mod hash;
pub mod metrics;
pub mod pipeline;
pub mod policy;
pub mod reward;
pub mod rng;
pub mod schedule;
pub mod xyz;

pub use chem::{AtomTable, Molecule};
pub use error::{Error, Result};
pub use rng::SeedSpec;
pub use schedule::{NoiseSchedule, ScheduleKind};
