pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod precondition;
pub mod rng;
pub mod schedule;
pub mod tensor;
pub mod trainer;
pub mod sampler;
pub mod metrics;
pub mod pipeline;
