//! Meta-learning with task interpolation.

pub mod diffcore;
pub mod rng;
pub mod taskgen;
pub mod mlti;
pub mod learners;
pub mod theorylab;
pub mod harness;
