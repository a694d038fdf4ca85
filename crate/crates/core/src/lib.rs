pub mod gradtape;
pub mod kernels;
pub mod losses;
pub mod model;
pub mod par;
pub mod quant;
pub mod rng;
pub mod token_control;
