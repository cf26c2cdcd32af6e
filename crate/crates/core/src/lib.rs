//! Single-image reconstruction of parametric face recipes: synthetic data
//! generation, heterogeneous target encoding, region-decomposed models,
//! least-squares ensemble blending and pluggable domain adaptation.

pub mod adapt;
pub mod cli;
pub mod ensemble;
pub mod eval;
pub mod image;
pub mod losses;
mod parallel;
pub mod provenance;
pub mod recipe;
pub mod synth;
pub mod trainer;
