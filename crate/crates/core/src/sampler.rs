//! Inference: single-step consistency sampling from pure noise to the
//! residual latent (one denoiser evaluation, counted), plus an iterative
//! ancestral baseline used for runtime comparisons.

use crate::autodiff::{Graph, ParamCtx};
use crate::backbone::Decoder;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::eval::PhaseTimings;
use crate::lcd_stage::{consistency_parameterize, LcdModel};
use crate::params::ParameterSet;
use crate::rng::{normal_tensor, stream_rng};
use crate::schedule::NoiseSchedule;
use ndarray::ArrayD;
use std::time::Instant;

/// Everything a sampler needs: the stage-1 decoder parameters (`dec.`
/// paths) and the stage-2 online parameters (`unet.` + `cond.` paths).
pub struct SamplerAssets<'a> {
    pub cfg: &'a Config,
    pub params_ae: &'a ParameterSet,
    pub params_lcd: &'a ParameterSet,
}

#[derive(Debug, Clone)]
pub struct SampleOutput {
    pub sr: ArrayD<f64>,
    pub denoiser_calls: u64,
    pub phases: PhaseTimings,
    pub total_s: f64,
}

fn validate_lr(cfg: &Config, lr_image: &ArrayD<f64>) -> Result<(usize, usize)> {
    if lr_image.ndim() != 3 {
        return Err(Error::shape("lr_image", &[0, 0, 0], lr_image.shape()));
    }
    if lr_image.shape()[0] != cfg.image_channels {
        return Err(Error::shape("lr channels", &[cfg.image_channels], &[lr_image.shape()[0]]));
    }
    let (h, w) = (lr_image.shape()[1], lr_image.shape()[2]);
    let hr_h = h * crate::datapipe::SCALE;
    let hr_w = w * crate::datapipe::SCALE;
    if hr_h % cfg.downsample_factor != 0 || hr_w % cfg.downsample_factor != 0 {
        return Err(Error::range(
            "lr dims",
            format!(
                "{h}x{w} gives an HR {hr_h}x{hr_w} not divisible by the latent factor {}",
                cfg.downsample_factor
            ),
        ));
    }
    Ok((hr_h / cfg.downsample_factor, hr_w / cfg.downsample_factor))
}

/// Draws a pure-noise latent at the final timestep, maps it to a clean
/// residual latent with exactly one denoiser evaluation, and decodes.
pub fn sample_single_step(
    lr_image: &ArrayD<f64>,
    assets: &SamplerAssets,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<SampleOutput> {
    let (lat_h, lat_w) = validate_lr(assets.cfg, lr_image)?;
    let model = LcdModel::from_config(assets.cfg);
    let decoder = Decoder::new(assets.cfg.decoder_spec());
    let t_last = schedule.total_steps() - 1;
    let mut calls = 0u64;

    let t0 = Instant::now();
    let lr_up = crate::datapipe::derive_lr_up(lr_image)?;
    let g = Graph::new(false);
    let cond_ctx = ParamCtx::frozen(&g, assets.params_lcd, "cond.");
    let c = model.cond.forward(&cond_ctx, &g.constant(lr_up)).mu;
    let cond_s = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let mut rng = stream_rng(seed, "sample.init", 0);
    let z_init = normal_tensor(&mut rng, &[assets.cfg.latent_channels, lat_h, lat_w]);
    let unet_ctx = ParamCtx::frozen(&g, assets.params_lcd, "unet.");
    let z_var = g.constant(z_init);
    let eps_hat = model.unet.forward(&unet_ctx, &z_var, &c, t_last);
    calls += 1;
    let z0_hat = consistency_parameterize(&z_var, &eps_hat, t_last, schedule)?;
    let denoise_s = t1.elapsed().as_secs_f64();

    let t2 = Instant::now();
    let dec_ctx = ParamCtx::frozen(&g, assets.params_ae, "dec.");
    let sr = decoder.forward(&dec_ctx, &g.constant(lr_image.clone()), &z0_hat);
    let decode_s = t2.elapsed().as_secs_f64();

    Ok(SampleOutput {
        sr: (*sr.value()).clone(),
        denoiser_calls: calls,
        phases: PhaseTimings {
            cond_s,
            denoise_s,
            decode_s,
        },
        total_s: t0.elapsed().as_secs_f64(),
    })
}

/// Uniformly strided descending timesteps, `steps` of them ending at 0.
fn ancestral_timesteps(total: usize, steps: usize) -> Vec<usize> {
    if steps == 1 {
        return vec![total - 1];
    }
    (0..steps)
        .map(|i| {
            let frac = (steps - 1 - i) as f64 / (steps - 1) as f64;
            ((total - 1) as f64 * frac).round() as usize
        })
        .collect()
}

/// Classical iterative reverse diffusion over a strided timestep subset,
/// with the same noise predictor; `num_steps` denoiser calls.
pub fn sample_ancestral(
    lr_image: &ArrayD<f64>,
    assets: &SamplerAssets,
    schedule: &NoiseSchedule,
    num_steps: usize,
    seed: u64,
) -> Result<SampleOutput> {
    if num_steps < 1 || num_steps > schedule.total_steps() {
        return Err(Error::range(
            "num_steps",
            format!("must be in [1, {}], got {num_steps}", schedule.total_steps()),
        ));
    }
    let (lat_h, lat_w) = validate_lr(assets.cfg, lr_image)?;
    let model = LcdModel::from_config(assets.cfg);
    let decoder = Decoder::new(assets.cfg.decoder_spec());
    let mut calls = 0u64;

    let t0 = Instant::now();
    let lr_up = crate::datapipe::derive_lr_up(lr_image)?;
    let g = Graph::new(false);
    let cond_ctx = ParamCtx::frozen(&g, assets.params_lcd, "cond.");
    let c = model.cond.forward(&cond_ctx, &g.constant(lr_up)).mu;
    let cond_s = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let mut rng = stream_rng(seed, "sample.init", 0);
    let mut z = normal_tensor(&mut rng, &[assets.cfg.latent_channels, lat_h, lat_w]);
    let ts = ancestral_timesteps(schedule.total_steps(), num_steps);
    let unet_ctx = ParamCtx::frozen(&g, assets.params_lcd, "unet.");
    let ab = schedule.alpha_bar();
    for (i, &t) in ts.iter().enumerate() {
        let z_var = g.constant(z.clone());
        let eps_hat = model.unet.forward(&unet_ctx, &z_var, &c, t);
        calls += 1;
        let eps_val = eps_hat.value();
        let abt = ab[t];
        let x0 = (&z - &(&*eps_val * (1.0 - abt).sqrt())) / abt.sqrt();
        if i + 1 == ts.len() {
            z = x0;
        } else {
            let s = ts[i + 1];
            let abs_ = ab[s];
            let alpha_ts = abt / abs_;
            let mean = &x0 * (abs_.sqrt() * (1.0 - alpha_ts) / (1.0 - abt))
                + &z * (alpha_ts.sqrt() * (1.0 - abs_) / (1.0 - abt));
            let var = (1.0 - abs_) / (1.0 - abt) * (1.0 - alpha_ts);
            let mut step_rng = stream_rng(seed, "sample.ancestral", i as u64);
            let noise = normal_tensor(&mut step_rng, z.shape());
            z = mean + noise * var.sqrt();
        }
    }
    let denoise_s = t1.elapsed().as_secs_f64();

    let t2 = Instant::now();
    let dec_ctx = ParamCtx::frozen(&g, assets.params_ae, "dec.");
    let sr = decoder.forward(&dec_ctx, &g.constant(lr_image.clone()), &g.constant(z));
    let decode_s = t2.elapsed().as_secs_f64();

    Ok(SampleOutput {
        sr: (*sr.value()).clone(),
        denoiser_calls: calls,
        phases: PhaseTimings {
            cond_s,
            denoise_s,
            decode_s,
        },
        total_s: t0.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn timestep_stride_covers_range() {
        let ts = ancestral_timesteps(1000, 40);
        assert_eq!(ts.len(), 40);
        assert_eq!(ts[0], 999);
        assert_eq!(*ts.last().unwrap(), 0);
        for w in ts.windows(2) {
            assert!(w[0] > w[1], "descending: {ts:?}");
        }
        assert_eq!(ancestral_timesteps(1000, 1), vec![999]);
    }
}
