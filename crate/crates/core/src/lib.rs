//! Volumetric vision transformer for three-class survival prediction from MRI volumes.

pub mod cli;
pub mod dataset;
pub mod evaluation;
pub mod preprocess;
pub mod tensor;
pub mod training;
pub mod vit_model;
pub mod volume;
