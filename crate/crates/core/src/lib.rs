pub mod complex;
pub mod error;
pub mod kernels;
pub mod lsc;
pub mod nn;
pub mod stft;
pub mod tape;
pub mod wav;
