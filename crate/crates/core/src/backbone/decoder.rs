//! Dual-branch decoder.
//!
//! The latent-decoding branch mirrors the encoder: it walks the residual
//! code back up to full resolution and taps one feature map per
//! resolution. Each tap is projected by a 1x1 convolution, bilinearly
//! resized to the LR grid, and added to the input of the matching
//! feature refinement unit (FRU) in the SR branch. The SR branch itself
//! runs at native LR resolution — a shallow conv, `num_fru` FRUs of
//! `imdb_per_fru` information multi-distillation blocks each, then a
//! x4 pixel-shuffle head.

use super::layers::{Conv2dLayer, ResBlock};
use super::DecoderSpec;
use crate::autodiff::{concat_channels, ParamCtx, Var};
use crate::params::ParameterSet;
use rand::Rng;

/// One information multi-distillation block: three 1/4-width channel
/// splits, a final quarter-width stage, concat, 1x1 fusion, residual add.
#[derive(Debug, Clone)]
pub struct ImdbBlock {
    pub width: usize,
    c1: Conv2dLayer,
    c2: Conv2dLayer,
    c3: Conv2dLayer,
    c4: Conv2dLayer,
    fuse: Conv2dLayer,
}

const IMDB_SLOPE: f64 = 0.05;

impl ImdbBlock {
    pub fn new(path: &str, width: usize) -> Self {
        assert!(width % 4 == 0, "IMDB width must be divisible by 4, got {width}");
        let d = width / 4;
        let r1 = width - d;
        let r2 = r1 - d;
        let r3 = r2 - d;
        ImdbBlock {
            width,
            c1: Conv2dLayer::new(format!("{path}.c1"), width, width, 3, 1, 1),
            c2: Conv2dLayer::new(format!("{path}.c2"), r1, r1, 3, 1, 1),
            c3: Conv2dLayer::new(format!("{path}.c3"), r2, r2, 3, 1, 1),
            c4: Conv2dLayer::new(format!("{path}.c4"), r3, d, 3, 1, 1),
            fuse: Conv2dLayer::new(format!("{path}.fuse"), width, width, 1, 1, 0).zeroed(),
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R, ps: &mut ParameterSet) {
        self.c1.init(rng, ps);
        self.c2.init(rng, ps);
        self.c3.init(rng, ps);
        self.c4.init(rng, ps);
        self.fuse.init(rng, ps);
    }

    pub fn forward(&self, p: &ParamCtx, x: &Var) -> Var {
        let d = self.width / 4;
        let s1 = self.c1.forward(p, x).leaky_relu(IMDB_SLOPE);
        let d1 = s1.slice_channels(0, d);
        let r1 = s1.slice_channels(d, self.width);
        let s2 = self.c2.forward(p, &r1).leaky_relu(IMDB_SLOPE);
        let d2 = s2.slice_channels(0, d);
        let r2 = s2.slice_channels(d, self.width - d);
        let s3 = self.c3.forward(p, &r2).leaky_relu(IMDB_SLOPE);
        let d3 = s3.slice_channels(0, d);
        let r3 = s3.slice_channels(d, self.width - 2 * d);
        let d4 = self.c4.forward(p, &r3).leaky_relu(IMDB_SLOPE);
        let fused = self.fuse.forward(p, &concat_channels(&[&d1, &d2, &d3, &d4]));
        x.add(&fused)
    }
}

struct Fru {
    side_proj: Conv2dLayer,
    imdbs: Vec<ImdbBlock>,
    compress: Conv2dLayer,
}

pub struct Decoder {
    pub spec: DecoderSpec,
    // latent branch
    conv_in: Conv2dLayer,
    mid: ResBlock,
    deep_block: ResBlock,
    up_stages: Vec<(Conv2dLayer, ResBlock)>,
    // SR branch
    sr_conv_in: Conv2dLayer,
    frus: Vec<Fru>,
    sr_conv_out: Conv2dLayer,
    /// tap index feeding each FRU (deepest tap first; extra FRUs reuse
    /// the finest tap)
    tap_for_fru: Vec<usize>,
}

impl Decoder {
    pub fn new(spec: DecoderSpec) -> Self {
        let l = spec.num_levels();
        let widths = spec.level_widths(); // widths[0] at full res .. widths[l] at latent res
        let sr = &spec.sr;

        let conv_in = Conv2dLayer::new("lat.conv_in", spec.latent_channels, widths[l], 3, 1, 1);
        let mid = ResBlock::new("lat.mid", widths[l], widths[l], None);
        let deep_block = ResBlock::new("lat.res_deep", widths[l], widths[l], None);
        let mut up_stages = Vec::new();
        for step in 0..l {
            let from = widths[l - step];
            let to = widths[l - step - 1];
            let up_conv = Conv2dLayer::new(format!("lat.up{step}.conv"), from, to, 3, 1, 1);
            let block = ResBlock::new(&format!("lat.up{step}.res"), to, to, None);
            up_stages.push((up_conv, block));
        }

        let taps = l + 1;
        let tap_widths: Vec<usize> = (0..taps).map(|i| widths[l - i]).collect();
        let tap_for_fru: Vec<usize> = (0..sr.num_fru).map(|j| j.min(taps - 1)).collect();

        let sr_conv_in = Conv2dLayer::new("sr.conv_in", spec.image_channels, sr.feature_width, 3, 1, 1);
        let mut frus = Vec::new();
        for j in 0..sr.num_fru {
            let side_proj = Conv2dLayer::new(
                format!("sr.fru{j}.side"),
                tap_widths[tap_for_fru[j]],
                sr.feature_width,
                1,
                1,
                0,
            );
            let imdbs = (0..sr.imdb_per_fru)
                .map(|i| ImdbBlock::new(&format!("sr.fru{j}.imdb{i}"), sr.feature_width))
                .collect();
            let compress = Conv2dLayer::new(
                format!("sr.fru{j}.compress"),
                sr.feature_width * sr.imdb_per_fru,
                sr.feature_width,
                1,
                1,
                0,
            );
            frus.push(Fru {
                side_proj,
                imdbs,
                compress,
            });
        }
        let sr_conv_out = Conv2dLayer::new(
            "sr.conv_out",
            sr.feature_width,
            spec.image_channels * sr.upscale * sr.upscale,
            3,
            1,
            1,
        );

        Decoder {
            spec,
            conv_in,
            mid,
            deep_block,
            up_stages,
            sr_conv_in,
            frus,
            sr_conv_out,
            tap_for_fru,
        }
    }

    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParameterSet {
        let mut ps = ParameterSet::new();
        self.conv_in.init(rng, &mut ps);
        self.mid.init(rng, &mut ps);
        self.deep_block.init(rng, &mut ps);
        for (up, block) in &self.up_stages {
            up.init(rng, &mut ps);
            block.init(rng, &mut ps);
        }
        self.sr_conv_in.init(rng, &mut ps);
        for fru in &self.frus {
            fru.side_proj.init(rng, &mut ps);
            for b in &fru.imdbs {
                b.init(rng, &mut ps);
            }
            fru.compress.init(rng, &mut ps);
        }
        self.sr_conv_out.init(rng, &mut ps);
        ps
    }

    /// `lr` is the native-resolution LR image, `z` the residual latent.
    /// Returns the SR image at `upscale` times the LR resolution.
    pub fn forward(&self, p: &ParamCtx, lr: &Var, z: &Var) -> Var {
        let lr_shape = lr.shape();
        let (lr_h, lr_w) = (lr_shape[1], lr_shape[2]);

        // latent branch: collect one tap per resolution, deepest first
        let mut taps = Vec::with_capacity(self.up_stages.len() + 1);
        let mut h = self.mid.forward(p, &self.conv_in.forward(p, z), None);
        h = self.deep_block.forward(p, &h, None);
        taps.push(h.clone());
        for (up_conv, block) in &self.up_stages {
            h = up_conv.forward(p, &h.nearest_up2());
            h = block.forward(p, &h, None);
            taps.push(h.clone());
        }

        // SR branch at LR resolution
        let shallow = self.sr_conv_in.forward(p, lr);
        let mut x = shallow.clone();
        for (fru, &tap_idx) in self.frus.iter().zip(&self.tap_for_fru) {
            let tap = &taps[tap_idx];
            let tap_shape = tap.shape();
            let side = if tap_shape[1] == lr_h && tap_shape[2] == lr_w {
                fru.side_proj.forward(p, tap)
            } else {
                fru.side_proj.forward(p, &tap.bilinear_resize(lr_h, lr_w))
            };
            x = x.add(&side);
            let fru_in = x.clone();
            let mut outs = Vec::with_capacity(fru.imdbs.len());
            let mut y = x;
            for b in &fru.imdbs {
                y = b.forward(p, &y);
                outs.push(y.clone());
            }
            let refs: Vec<&Var> = outs.iter().collect();
            x = fru.compress.forward(p, &concat_channels(&refs)).add(&fru_in);
        }
        x = x.add(&shallow);
        self.sr_conv_out.forward(p, &x).pixel_shuffle(self.spec.sr.upscale)
    }
}

pub use imdb_standalone::imdb_forward;

mod imdb_standalone {
    use super::*;
    use crate::autodiff::Graph;
    use crate::error::{Error, Result};
    use ndarray::ArrayD;

    /// Initializes a standalone IMDB parameter set.
    pub fn imdb_init_params<R: Rng + ?Sized>(width: usize, rng: &mut R) -> ParameterSet {
        let block = ImdbBlock::new("imdb", width);
        let mut ps = ParameterSet::new();
        block.init(rng, &mut ps);
        ps
    }

    /// Runs one IMDB over (C, H, W) features with `params` produced by
    /// [`imdb_init_params`]-compatible layout.
    pub fn imdb_forward(features: &ArrayD<f64>, params: &ParameterSet) -> Result<ArrayD<f64>> {
        if features.ndim() != 3 {
            return Err(Error::shape("imdb_forward features", &[0, 0, 0], features.shape()));
        }
        let width = params.get("imdb.c1.w")?.shape()[0];
        if features.shape()[0] != width {
            return Err(Error::shape(
                "imdb_forward channels",
                &[width, features.shape()[1], features.shape()[2]],
                features.shape(),
            ));
        }
        let block = ImdbBlock::new("imdb", width);
        let g = Graph::new(false);
        let ctx = ParamCtx::frozen(&g, params, "");
        let x = g.constant(features.clone());
        Ok((*block.forward(&ctx, &x).value()).clone())
    }

    pub use imdb_init_params as init_params;
}

pub use imdb_standalone::init_params as imdb_init_params;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_tensor, stream_rng};

    #[test]
    fn imdb_preserves_shape() {
        let mut rng = stream_rng(0, "imdb", 0);
        let ps = imdb_init_params(8, &mut rng);
        let x = normal_tensor(&mut stream_rng(1, "x", 0), &[8, 5, 5]);
        let y = imdb_forward(&x, &ps).unwrap();
        assert_eq!(y.shape(), &[8, 5, 5]);
    }

    #[test]
    fn imdb_is_identity_at_init() {
        // zero-initialized fusion projection leaves only the residual path
        let mut rng = stream_rng(0, "imdb", 1);
        let ps = imdb_init_params(8, &mut rng);
        let x = normal_tensor(&mut stream_rng(2, "x", 0), &[8, 4, 4]);
        let y = imdb_forward(&x, &ps).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn imdb_distills_quarter_widths() {
        // width 64 concatenates 16+16+16+16 before fusion
        let block = ImdbBlock::new("imdb", 64);
        assert_eq!(block.c1.out_ch, 64);
        assert_eq!(block.c2.out_ch, 48);
        assert_eq!(block.c3.out_ch, 32);
        assert_eq!(block.c4.out_ch, 16);
        assert_eq!(block.fuse.in_ch, 64);
    }

    #[test]
    fn imdb_rejects_wrong_channel_count() {
        let mut rng = stream_rng(0, "imdb", 2);
        let ps = imdb_init_params(8, &mut rng);
        let x = normal_tensor(&mut stream_rng(3, "x", 0), &[4, 5, 5]);
        assert!(imdb_forward(&x, &ps).is_err());
    }
}
