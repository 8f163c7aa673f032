//! Dense tensors, a reverse-mode tape and the handful of ops the transformer
//! needs.

mod ops;
mod real;
mod rng;
mod store;
mod tape;
mod tensor;

pub use ops::{
    geglu_ffn, gelu_scalar, softplus_inverse, softplus_scalar, CrossEntropyStats, GELU_CUBIC,
    GELU_SQRT_2_OVER_PI,
};
pub(crate) use ops::rope_tables;
pub(crate) use real::gemm;
pub use real::Real;
pub use rng::RngStream;
pub use store::ParamStore;
pub use tape::{BackwardFn, Tape, Var};
pub use tensor::Tensor;

use crate::error::Result;

/// Eager `a @ b`.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.matmul(b)
}

/// Eager [`Tape::biased_causal_softmax`].
pub fn biased_causal_softmax<T: Real>(logits: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let b = bias.map(|b| tape.constant(b.clone()));
    let out = tape.biased_causal_softmax(l, b)?;
    Ok(tape.value(out).clone())
}

/// Eager [`Tape::rmsnorm`].
pub fn rmsnorm<T: Real>(x: &Tensor<T>, gain: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let g = tape.constant(gain.clone());
    let out = tape.rmsnorm(xv, g, eps)?;
    Ok(tape.value(out).clone())
}

/// Eager [`Tape::cross_entropy`]; returns the mean loss and argmax accuracy.
pub fn cross_entropy<T: Real>(logits: &Tensor<T>, targets: &[u32], mask: &[bool]) -> Result<CrossEntropyStats> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    Ok(tape.cross_entropy(l, targets, mask)?.1)
}
