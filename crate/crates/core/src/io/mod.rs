//! File formats: PPM/PFM images, sample directories, and the weight file.

pub mod pfm;
pub mod ppm;
pub mod sample;
pub mod weights_file;
