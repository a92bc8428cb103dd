//! Network architecture contracts: residual encoder, dual-branch decoder
//! (latent-decoding branch plus SR branch), conditional network, UNet
//! noise predictor, and the pretraining discriminator.
//!
//! Forward passes are pure functions of (inputs, parameters); parameter
//! sets are mutated only by the training loops.

pub mod decoder;
pub mod discriminator;
pub mod encoder;
pub mod layers;
pub mod unet;

pub use crate::params::ParameterSet;
pub use decoder::{imdb_forward, imdb_init_params, Decoder, ImdbBlock};
pub use discriminator::Discriminator;
pub use encoder::{EncOut, Encoder};
pub use unet::{sinusoidal_embedding, Unet};

use crate::autodiff::{Graph, ParamCtx};
use crate::error::{Error, Result};
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

/// Downsampling-encoder shape contract. Used for the residual encoder
/// (`in_channels` doubled, `double_latent = true` for the mean and
/// log-variance heads) and the conditional network (`in_channels` =
/// image channels, single head).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub in_channels: usize,
    pub latent_channels: usize,
    /// Spatial reduction from input to latent; a power of two.
    pub downsample_factor: usize,
    pub base_width: usize,
    pub blocks_per_level: usize,
    pub double_latent: bool,
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        if !self.downsample_factor.is_power_of_two() || self.downsample_factor < 2 {
            return Err(Error::range(
                "downsample_factor",
                format!("must be a power of two >= 2, got {}", self.downsample_factor),
            ));
        }
        if self.in_channels == 0 || self.latent_channels == 0 || self.base_width == 0 {
            return Err(Error::range("encoder spec", "channel counts must be positive".to_string()));
        }
        Ok(())
    }

    pub fn num_levels(&self) -> usize {
        self.downsample_factor.trailing_zeros() as usize
    }

    /// Feature widths per resolution, index 0 at full resolution. Width
    /// doubles per level, capped at 4x base.
    pub fn level_widths(&self) -> Vec<usize> {
        (0..=self.num_levels())
            .map(|i| self.base_width * (1usize << i).min(4))
            .collect()
    }
}

/// SR-branch shape contract.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SRBranchSpec {
    pub num_fru: usize,
    pub imdb_per_fru: usize,
    pub feature_width: usize,
    pub upscale: usize,
}

impl Default for SRBranchSpec {
    fn default() -> Self {
        SRBranchSpec {
            num_fru: 4,
            imdb_per_fru: 12,
            feature_width: 64,
            upscale: 4,
        }
    }
}

impl SRBranchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_fru == 0 || self.imdb_per_fru == 0 {
            return Err(Error::range("sr branch", "num_fru and imdb_per_fru must be positive".to_string()));
        }
        if self.feature_width % 4 != 0 {
            return Err(Error::range(
                "sr feature_width",
                format!("must be divisible by 4 for distillation splits, got {}", self.feature_width),
            ));
        }
        if self.upscale != 4 {
            return Err(Error::range("upscale", format!("only x4 is supported, got {}", self.upscale)));
        }
        Ok(())
    }
}

/// Decoder shape contract: the latent branch mirrors an encoder with
/// these dims; the SR branch follows `sr`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderSpec {
    pub latent_channels: usize,
    pub image_channels: usize,
    pub base_width: usize,
    pub downsample_factor: usize,
    pub blocks_per_level: usize,
    pub sr: SRBranchSpec,
}

impl DecoderSpec {
    pub fn validate(&self) -> Result<()> {
        if !self.downsample_factor.is_power_of_two() || self.downsample_factor < 2 {
            return Err(Error::range(
                "downsample_factor",
                format!("must be a power of two >= 2, got {}", self.downsample_factor),
            ));
        }
        self.sr.validate()
    }

    pub fn num_levels(&self) -> usize {
        self.downsample_factor.trailing_zeros() as usize
    }

    pub fn level_widths(&self) -> Vec<usize> {
        (0..=self.num_levels())
            .map(|i| self.base_width * (1usize << i).min(4))
            .collect()
    }
}

/// UNet noise-predictor shape contract.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnetSpec {
    /// Channels of `concat(z_t, cond)`; twice the latent channels.
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_width: usize,
    pub channel_mults: Vec<usize>,
    pub blocks_per_level: usize,
}

impl UnetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.channel_mults.is_empty() {
            return Err(Error::range("unet channel_mults", "must be non-empty".to_string()));
        }
        if self.base_width < 2 || self.base_width % 2 != 0 {
            return Err(Error::range(
                "unet base_width",
                format!("must be even and >= 2 for the sinusoidal embedding, got {}", self.base_width),
            ));
        }
        Ok(())
    }
}

/// Patch discriminator shape contract.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorSpec {
    pub in_channels: usize,
    pub base_width: usize,
}

fn expect_3d(name: &str, x: &ArrayD<f64>) -> Result<()> {
    if x.ndim() != 3 {
        return Err(Error::shape(format!("{name} must be (C, H, W)"), &[0, 0, 0], x.shape()));
    }
    Ok(())
}

/// Encodes an (HR, upsampled-LR) pair into the residual latent (the
/// posterior mean when the encoder has a double head).
pub fn encode(
    hr_image: &ArrayD<f64>,
    lr_up_image: &ArrayD<f64>,
    spec: &EncoderSpec,
    params: &ParameterSet,
) -> Result<ArrayD<f64>> {
    expect_3d("hr_image", hr_image)?;
    expect_3d("lr_up_image", lr_up_image)?;
    if hr_image.shape() != lr_up_image.shape() {
        return Err(Error::shape("encode: lr_up vs hr", hr_image.shape(), lr_up_image.shape()));
    }
    if hr_image.shape()[0] * 2 != spec.in_channels {
        return Err(Error::shape(
            "encode: image channels",
            &[spec.in_channels / 2],
            &[hr_image.shape()[0]],
        ));
    }
    let f = spec.downsample_factor;
    let (h, w) = (hr_image.shape()[1], hr_image.shape()[2]);
    if h % f != 0 || w % f != 0 {
        return Err(Error::range(
            "encode: spatial dims",
            format!("{h}x{w} not divisible by downsample factor {f}"),
        ));
    }
    let enc = Encoder::new(spec.clone());
    let g = Graph::new(false);
    let ctx = ParamCtx::frozen(&g, params, "");
    let hr = g.constant(hr_image.clone());
    let lr_up = g.constant(lr_up_image.clone());
    let x = crate::autodiff::concat_channels(&[&hr, &lr_up]);
    let out = enc.forward(&ctx, &x);
    Ok((*out.mu.value()).clone())
}

/// Decodes (native LR, residual latent) into the SR image.
pub fn decode(
    lr_image: &ArrayD<f64>,
    z: &ArrayD<f64>,
    spec: &DecoderSpec,
    params: &ParameterSet,
) -> Result<ArrayD<f64>> {
    expect_3d("lr_image", lr_image)?;
    expect_3d("z", z)?;
    if lr_image.shape()[0] != spec.image_channels {
        return Err(Error::shape("decode: lr channels", &[spec.image_channels], &[lr_image.shape()[0]]));
    }
    // LR sits at HR/upscale, the latent at HR/downsample_factor
    let hr_h = lr_image.shape()[1] * spec.sr.upscale;
    let hr_w = lr_image.shape()[2] * spec.sr.upscale;
    let expect_z = [
        spec.latent_channels,
        hr_h / spec.downsample_factor,
        hr_w / spec.downsample_factor,
    ];
    if z.shape() != expect_z {
        return Err(Error::shape("decode: latent", &expect_z, z.shape()));
    }
    let dec = Decoder::new(spec.clone());
    let g = Graph::new(false);
    let ctx = ParamCtx::frozen(&g, params, "");
    let lr = g.constant(lr_image.clone());
    let zv = g.constant(z.clone());
    Ok((*dec.forward(&ctx, &lr, &zv).value()).clone())
}

/// Conditional features from the upsampled LR image; same shape as the
/// residual latent so the distillation loss can compare them directly.
pub fn cond_features(lr_up_image: &ArrayD<f64>, spec: &EncoderSpec, params: &ParameterSet) -> Result<ArrayD<f64>> {
    expect_3d("lr_up_image", lr_up_image)?;
    if lr_up_image.shape()[0] != spec.in_channels {
        return Err(Error::shape("cond_features channels", &[spec.in_channels], &[lr_up_image.shape()[0]]));
    }
    let f = spec.downsample_factor;
    if lr_up_image.shape()[1] % f != 0 || lr_up_image.shape()[2] % f != 0 {
        return Err(Error::range(
            "cond_features: spatial dims",
            format!("{}x{} not divisible by {f}", lr_up_image.shape()[1], lr_up_image.shape()[2]),
        ));
    }
    let net = Encoder::new(spec.clone());
    let g = Graph::new(false);
    let ctx = ParamCtx::frozen(&g, params, "");
    let x = g.constant(lr_up_image.clone());
    Ok((*net.forward(&ctx, &x).mu.value()).clone())
}

/// Noise prediction for a noisy latent and conditional features at
/// timestep `t` (0-based, `t < total_steps`).
pub fn denoise_eps(
    z_t: &ArrayD<f64>,
    cond: &ArrayD<f64>,
    t: usize,
    total_steps: usize,
    spec: &UnetSpec,
    params: &ParameterSet,
) -> Result<ArrayD<f64>> {
    expect_3d("z_t", z_t)?;
    expect_3d("cond", cond)?;
    if z_t.shape() != cond.shape() {
        return Err(Error::shape("denoise_eps: cond vs z_t", z_t.shape(), cond.shape()));
    }
    if z_t.shape()[0] * 2 != spec.in_channels {
        return Err(Error::shape("denoise_eps: latent channels", &[spec.in_channels / 2], &[z_t.shape()[0]]));
    }
    if t >= total_steps {
        return Err(Error::range("timestep", format!("t = {t} out of range 0..{total_steps}")));
    }
    let net = Unet::new(spec.clone());
    let g = Graph::new(false);
    let ctx = ParamCtx::frozen(&g, params, "");
    let zv = g.constant(z_t.clone());
    let cv = g.constant(cond.clone());
    Ok((*net.forward(&ctx, &zv, &cv, t).value()).clone())
}

#[cfg(test)]
mod tests;
