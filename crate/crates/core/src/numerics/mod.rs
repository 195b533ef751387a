//! Minimal differentiable substrate: dense arrays, parameters, a tape-based
//! reverse-mode engine and a central-difference gradient checker.

mod array;
mod gradcheck;
pub(crate) mod kernels;
mod param;
mod tape;

pub use array::NdArray;
pub use gradcheck::{finite_diff_check, GradCheckReport, ParamCheck, DEFAULT_EPS};
pub use kernels::{ConvGeometry, LAYER_NORM_EPS};
pub use param::{glorot_bound, uniform, ParamId, ParamStore, Parameter};
pub use tape::{softmax_lastaxis, Gradients, Tape, Var};

use crate::error::Result;

/// Matrix product over the last two axes; batch axes must match, or one
/// operand may be a plain matrix shared across the other's batch.
pub fn matmul(a: &NdArray, b: &NdArray) -> Result<NdArray> {
    kernels::matmul_forward(a, b, false)
}

/// Layer normalization over the trailing (channel) axis.
pub fn layer_norm(x: &NdArray, gamma: &NdArray, beta: &NdArray) -> Result<NdArray> {
    let mut tape = Tape::new();
    let (x, g, b) = (
        tape.constant(x.clone()),
        tape.constant(gamma.clone()),
        tape.constant(beta.clone()),
    );
    let y = tape.layer_norm(x, g, b)?;
    Ok(tape.value(y).clone())
}

/// Temporal convolution of a channels-last `[N, T, V, C_in]` batch by
/// `[K, C_in, C_out]` weights with symmetric zero padding.
pub fn temporal_conv(x: &NdArray, weights: &NdArray, geo: ConvGeometry) -> Result<NdArray> {
    kernels::conv_forward(x, weights, geo)
}
