//! Sparse convolution engine and the layer blocks built on it.

mod blocks;
mod conv;
pub mod oracle;
pub mod weights;

pub use blocks::{
    adaptive_prune, concat_channels, run_irn_stack, run_rn_stack, sigmoid, top_k_indices, Classifier, Conv,
    DownBlock, IrnBlock, RnBlock, SameCoordMaps, UpBlock,
};
pub use conv::{
    build_kernel_map, default_out_coords, relu, relu_in_place, sparse_conv, sparse_conv_backward,
    sparse_conv_mapped, transpose_weights, ConvGrads, ConvSpec, KernelMap,
};
pub use weights::{ParamKind, ParamSource, SeededInit, Tensor, WeightStore, ZeroInit};

use crate::error::{Error, Result};

/// Layer widths and block counts of the whole network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChannelPlan {
    /// Scale-1 feature width.
    pub hidden: usize,
    /// Scale-2 latent width (y_t, flow embeddings, motion latent).
    pub latent: usize,
    pub residual_latent: usize,
    /// Widths of the two reconstruction stages (scale 1, scale 0).
    pub recon: [usize; 2],
    pub irn_blocks: usize,
    pub rn_blocks: usize,
}

pub const CHANNELS_TENSOR: &str = "meta.channels";

impl ChannelPlan {
    pub const DEFAULT: Self = Self {
        hidden: 32,
        latent: 64,
        residual_latent: 8,
        recon: [32, 32],
        irn_blocks: 3,
        rn_blocks: 2,
    };

    /// Narrow variant for quick experiments; same topology.
    pub const TINY: Self = Self {
        hidden: 8,
        latent: 16,
        residual_latent: 4,
        recon: [8, 8],
        irn_blocks: 1,
        rn_blocks: 1,
    };

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "default" => Some(Self::DEFAULT),
            "tiny" => Some(Self::TINY),
            _ => None,
        }
    }

    fn as_values(&self) -> [f32; 7] {
        [
            self.hidden as f32,
            self.latent as f32,
            self.residual_latent as f32,
            self.recon[0] as f32,
            self.recon[1] as f32,
            self.irn_blocks as f32,
            self.rn_blocks as f32,
        ]
    }

    pub fn record(&self, store: &mut WeightStore) {
        store.insert(CHANNELS_TENSOR, Tensor::new(vec![7], self.as_values().to_vec()).unwrap());
    }

    pub fn from_store(store: &WeightStore) -> Result<Self> {
        let t = store.expect(CHANNELS_TENSOR, &[7])?;
        let v: Vec<usize> = t.values.iter().map(|&x| x as usize).collect();
        let plan = Self {
            hidden: v[0],
            latent: v[1],
            residual_latent: v[2],
            recon: [v[3], v[4]],
            irn_blocks: v[5],
            rn_blocks: v[6],
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        let irn_widths = [self.hidden, self.latent, self.recon[0], self.recon[1]];
        if irn_widths.iter().any(|&w| w < 4 || w % 4 != 0) || self.residual_latent == 0 {
            return Err(Error::Weights(format!("invalid channel plan {self:?}")));
        }
        Ok(())
    }
}
