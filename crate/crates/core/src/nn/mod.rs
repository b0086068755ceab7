//! Parameterised layers: convolution, batch normalisation, pooling and
//! bilinear resizing, plus parameter storage and initialisation.

mod conv;
mod norm;
pub mod params;
mod pool;
mod resize;

pub use conv::{conv2d, Conv2dSpec};
pub use norm::{batchnorm2d, bn, BatchStats, BN_EPS, BN_MOMENTUM};
pub use params::{gradcheck_params, init_tensor, Ctx, Init, LayerParams, Mode, ParamEntry};

use crate::autograd::Var;
use crate::error::Result;

/// `conv -> BN -> ReLU`, the unit most modules are built from. The conv has
/// no bias since BN absorbs it.
pub fn conv_bn_relu(ctx: &mut Ctx<'_>, x: Var, spec: &Conv2dSpec, name: &str) -> Result<Var> {
    let y = conv2d(ctx, x, &spec.bias(false), &format!("{name}.conv"))?;
    let y = bn(ctx, y, &format!("{name}.bn"))?;
    ctx.tape.relu(y)
}
