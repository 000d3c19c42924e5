//! Unsupervised asymmetric cross-view metric learning.
//!
//! [`camel`] fits one linear transform per camera view by alternating a
//! generalized eigen step with k-means in the shared space. [`decamel`] then
//! trains a feature extractor and the transforms jointly with SGD.
//! [`views`] clusters camera views so unseen views can borrow a transform,
//! and [`eval`] scores retrieval across views.

pub mod camel;
pub mod clustering;
pub mod dataset;
pub mod decamel;
pub mod error;
pub mod eval;
pub mod extractor;
pub mod features;
pub mod linalg;
pub mod persist;
pub mod pipeline;
pub mod rng;
pub mod views;

pub use error::{Error, Result};
