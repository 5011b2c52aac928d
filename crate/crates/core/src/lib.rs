//! Defect segmentation and detection for SEM line-pattern images, trained on
//! clean backgrounds with copy-paste augmentation.

pub mod augment;
pub mod classic;
pub mod detect;
pub mod error;
pub mod evalkit;
pub mod image;
pub mod losses;
pub mod net;
pub mod pipeline;
pub mod rng;
pub mod simgen;

pub use error::{Error, Result};
pub use image::{DefectMask, SemImage};
