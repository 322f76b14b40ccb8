//! Desk-scale workloads: a teacher-student tanh MLP, heavy-tailed per-client
//! gradient noise, and synthetic update vectors for quantizer studies.

mod mlp;
mod noise;
mod synth;

pub use mlp::{
    forward, init_mlp, mse_loss, mse_loss_grad, teacher_student_batch, MlpDims, HEAD_LAYER,
    INPUT_LAYER,
};
pub use noise::{keyed_rng, noisy_client_grads, sample_alpha_stable, NoiseSpec};
pub use synth::{synth_update_vectors, SynthDist};
