//! Transformer machinery shared by both branches: pre-norm encoder blocks,
//! shallow decoders with a learnable mask token, the per-token patch
//! projection and multi-head cross-attention.

mod attention;
mod block;
pub mod checkpoint;
mod decoder;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use attention::{mca, Attention, MultiHeadOutput};
pub use block::{transformer_block, Encoder, TransformerBlock};
pub use decoder::{project_patches, Decoder};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl EncoderConfig {
    /// ViT-B.
    pub fn vit_base() -> Self {
        Self {
            depth: 12,
            width: 768,
            heads: 12,
            mlp_ratio: 4,
        }
    }

    pub fn validate(&self, field: &str) -> Result<()> {
        validate_width(field, self.width, self.heads)
    }
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::vit_base()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            width: 512,
            heads: 8,
            mlp_ratio: 4,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self, field: &str) -> Result<()> {
        validate_width(field, self.width, self.heads)
    }
}

fn validate_width(field: &str, width: usize, heads: usize) -> Result<()> {
    if heads == 0 || width == 0 || width % heads != 0 {
        return Err(Error::config(
            field,
            format!("width {width} must be a positive multiple of heads {heads}"),
        ));
    }
    if width % 4 != 0 {
        return Err(Error::config(
            field,
            format!("width {width} must be a multiple of 4 for 2-D positional embedding"),
        ));
    }
    Ok(())
}

/// Encoder and decoder settings shared by both branches.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl BackboneConfig {
    pub fn validate(&self, field: &str) -> Result<()> {
        self.encoder.validate(&format!("{field}.encoder"))?;
        self.decoder.validate(&format!("{field}.decoder"))
    }
}
