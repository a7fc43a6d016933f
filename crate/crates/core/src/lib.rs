//! Pairwise distance distillation for unsupervised real-world super-resolution.
//!
//! A specialist generator is trained on labeled synthetic pairs while a
//! generalist transfers the *structure* of its feature distances — within an
//! image pair and across the two models — onto unlabeled real inputs.

pub mod archive;
pub mod corpus;
pub mod degradation;
mod error;
pub mod evalkit;
pub mod features;
pub mod gradcheck;
pub mod imaging;
pub mod losses;
pub mod models;
pub mod params;
pub mod seeding;
pub mod trainer;

pub use error::{PddError, Result};
