//! Architectural building blocks: the dual-conv stream, windowed attention,
//! the selective-scan SSM with four 2D traversal orders, and the gated
//! state-space block that fuses the two streams.

pub mod conv_block;
pub mod mamba;
pub mod ssm;
pub mod swin;

pub use conv_block::{double_conv, DoubleConvIds, DoubleConvVars};
pub use mamba::{mamba_block, MambaIds, MambaSpec, MambaVars};
pub use ssm::{selective_scan_1d, ss2d, SsmDirIds, SsmDirVars, SsmSpec};
pub use swin::{
    swin_block, window_partition, window_reverse, wmsa, SwinIds, SwinSpec, SwinVars,
};

use crate::error::Result;
use crate::tensor::{Graph, Scalar, Var};

/// Layer norm over channels at each spatial position of a `[B,C,H,W]` map.
pub fn ln_channels<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    gamma: Var,
    beta: Var,
) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let nhwc = g.permute(x, &[0, 2, 3, 1])?;
    let normed = g.layer_norm(nhwc, gamma, beta, T::from_f64(1e-5))?;
    let back = g.permute(normed, &[0, 3, 1, 2])?;
    debug_assert_eq!(g.shape(back), &shape[..]);
    Ok(back)
}

/// Per-position linear map realized as a 1x1 convolution.
pub fn linear_1x1<T: Scalar>(g: &mut Graph<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    g.conv2d(x, w, b, 1, 0)
}
