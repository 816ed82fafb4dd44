//! Few-shot meta-learning with variational latent codes and differentiable
//! convex base-learners.

pub mod baselearners;
pub mod episodes;
pub mod latentspace;
pub mod metaloop;
pub mod numcore;
pub mod selfcheck;
