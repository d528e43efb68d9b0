//! Two-stage PET-CT lesion segmentation with inpainting-derived anomaly
//! priors.
//!
//! Stage one learns healthy anatomy by training a partial-convolution
//! inpainting network on healthy axial slices, then inpaints PET-thresholded
//! candidate regions at test time; the difference between the original and
//! the inpainted slice yields signed CT/PET residual volumes. Stage two
//! feeds PET, CT and both residuals into a 4-channel 3D U-Net that predicts
//! the binary lesion mask. An evaluation kit computes Dice and false
//! positive/negative volumes (in liters) with class-wise aggregation.
//!
//! Start with the runnable examples (`cargo run --example ...`); the
//! `priorseg` binary exposes the same capabilities as subcommands.

pub mod checkpoint;
pub mod error;
pub mod inpaint;
pub mod manifest;
pub mod maskgen;
pub mod nifti;
pub mod nn;
pub mod phantom;
pub mod preprocess;
pub mod prior;
pub mod slicer;
pub mod volume;

pub use error::{Error, Result};
