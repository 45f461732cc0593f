//! Parameterized layers: convolutions, upsampling, spectral normalization
//! and the residual block.

mod conv;
mod params;
mod spectral;
mod upsample;

use rand::Rng;

pub use conv::{conv2d, conv3d, output_extent, Conv2dLayer};
pub use params::{Init, ParamBinding, ParamId, ParamStore};
pub use spectral::{
    estimate_sigma_max, spectral_normalize, spectral_normalize_op, SpectralNormState, SIGMA_EPS,
};
pub use upsample::bilinear_upsample;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Slope of every LeakyReLU in the generator and discriminator.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Channel-preserving `x + conv2(lrelu(conv1(x)))` with 3x3 kernels.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub conv1: Conv2dLayer,
    pub conv2: Conv2dLayer,
}

impl ResidualBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            conv1: Conv2dLayer::new(
                store,
                &format!("{name}.conv1"),
                channels,
                channels,
                3,
                1,
                rng,
            ),
            conv2: Conv2dLayer::linear(store, &format!("{name}.conv2"), channels, channels, 3, rng),
        }
    }

    pub fn num_params(&self) -> usize {
        self.conv1.num_params() + self.conv2.num_params()
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &mut ParamBinding<'_, T>,
        x: Var,
    ) -> Result<Var> {
        let c = tape.shape(x).get(1).copied().unwrap_or(0);
        if c != self.conv1.in_ch || self.conv2.out_ch != c {
            return Err(Error::shape(format!(
                "residual block expects {} channels, got {c}",
                self.conv1.in_ch
            )));
        }
        let h = self.conv1.forward(tape, params, x)?;
        let h = tape.leaky_relu(h, LEAKY_SLOPE);
        let f = self.conv2.forward(tape, params, h)?;
        tape.add(x, f)
    }
}
