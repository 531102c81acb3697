//! Dense linear algebra and differentiable kernels shared by the model,
//! criteria and backward sweep.
//!
//! Storage is `f32` for weights; activations, probabilities and every
//! reduction run in `f64`.

mod attention;
mod kernels;
mod matrix;

pub use attention::{causal_attention, causal_attention_backward, rope_apply, rope_rows, AttentionOutput};
pub use kernels::{
    ce_grad_logits, cross_entropy_nats, entropy_bits, entropy_grad_logits, js_distance,
    kl_divergence_nats, kl_grad_logits, rmsnorm, rmsnorm_backward, rmsnorm_rows,
    rmsnorm_rows_backward, sigmoid, silu, silu_backward, silu_grad_scalar, silu_scalar,
    softmax_stable, topk_indices, topk_jaccard, ProbVector, LOG_FLOOR,
};
pub use matrix::{dot, dot_mixed, linear, linear_backward_input, matmul, Matrix, Scalar};
