//! Interactive weak supervision: anchored rule mining, teacher-student
//! training, and a budgeted loop that spends expert effort on instance labels
//! and rule judgments.

pub mod analysis;
pub mod api;
pub mod corpus;
pub mod error;
pub mod features;
pub mod rulegen;
pub mod rules;
pub mod sampling;
pub mod session;
pub mod student;
pub mod synth;
pub mod teacher;

pub use error::{Error, Result};
