//! Differentiable articulated semantic radiance fields at desk scale.

pub mod autodiff;
pub mod bodymodel;
pub mod canonicalfield;
pub mod checkpoint;
pub mod geometry;
pub mod gradcheck;
pub mod gradsuite;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod motionfield;
pub mod nn;
pub mod pnm;
pub mod renderer;
pub mod scenedata;
pub mod trainer;
