//! Object-aware multi-branch relation network for spatio-temporal video
//! grounding, with hand-written backpropagation.

pub mod aggregation;
pub mod data;
pub mod geometry;
pub mod gradcheck;
pub mod gru;
pub mod language;
pub mod params;
pub mod localizer;
pub mod model;
pub mod relation;
pub mod tensor;
pub mod training;
