//! Diffusion-model machinery: noise schedule, ensemble score and reverse-time sampler.

mod sampler;
mod schedule;
mod score;

pub use sampler::reverse_sde_sample;
pub use schedule::{Damping, NoiseSchedule};
pub use score::{LikelihoodTerm, ScoreField, ScoreModel};
