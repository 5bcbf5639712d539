//! Variance-preserving diffusion: cosine schedule, a dense conditional
//! noise-prediction network and guided samplers.

mod denoiser;
mod sampler;
mod schedule;

pub use denoiser::{
    init_params, time_embedding, BoundDenoiser, Denoiser, DenoiserConfig, EpsModel, Parametrization, EMBED_PARAM,
};
pub use sampler::{
    guided_eps, reverse_step, sample, step_schedule, NoisePredictor, ReverseStep, SamplerConfig, SamplerMethod,
};
pub use schedule::{make_schedule, DiffusionSchedule, DEFAULT_T};
