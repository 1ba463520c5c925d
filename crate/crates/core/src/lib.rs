//! Blend environmental noise into generated music.
//!
//! The pipeline turns a noise clip into a mel-spectrogram image, isolates its
//! high-energy core, asks a generator backend to outpaint and then inpaint
//! music around and into that core, and finally picks a single gain for the
//! generated music that trades global loudness against masking of the core.

pub mod audio;
pub mod fixtures;
pub mod genpipe;
pub mod loudness;
pub mod masking;
pub mod pipeline;
pub mod report;
pub mod specimage;
pub mod spectral;
