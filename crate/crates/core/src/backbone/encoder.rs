//! Downsampling encoder, shared by the residual encoder (doubled input
//! channels, mean/log-variance heads) and the conditional network
//! (single head, LR features only).

use super::layers::{Conv2dLayer, GroupNormLayer, ResBlock};
use super::EncoderSpec;
use crate::autodiff::{ParamCtx, Var};
use crate::params::ParameterSet;
use rand::Rng;

pub struct Encoder {
    pub spec: EncoderSpec,
    conv_in: Conv2dLayer,
    levels: Vec<(Vec<ResBlock>, Conv2dLayer)>,
    mid: ResBlock,
    norm_out: GroupNormLayer,
    conv_out: Conv2dLayer,
}

/// Encoder output: posterior mean, plus log-variance when the spec has a
/// double head.
pub struct EncOut {
    pub mu: Var,
    pub logvar: Option<Var>,
}

impl Encoder {
    pub fn new(spec: EncoderSpec) -> Self {
        let l = spec.num_levels();
        let widths = spec.level_widths();
        let conv_in = Conv2dLayer::new("conv_in", spec.in_channels, widths[0], 3, 1, 1);
        let mut levels = Vec::new();
        for lvl in 0..l {
            let mut blocks = Vec::new();
            for b in 0..spec.blocks_per_level {
                blocks.push(ResBlock::new(&format!("down{lvl}.res{b}"), widths[lvl], widths[lvl], None));
            }
            let down = Conv2dLayer::new(format!("down{lvl}.down"), widths[lvl], widths[lvl + 1], 3, 2, 1);
            levels.push((blocks, down));
        }
        let mid = ResBlock::new("mid", widths[l], widths[l], None);
        let norm_out = GroupNormLayer::new("norm_out", widths[l]);
        let head = spec.latent_channels * if spec.double_latent { 2 } else { 1 };
        let conv_out = Conv2dLayer::new("conv_out", widths[l], head, 3, 1, 1);
        Encoder {
            spec,
            conv_in,
            levels,
            mid,
            norm_out,
            conv_out,
        }
    }

    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParameterSet {
        let mut ps = ParameterSet::new();
        self.conv_in.init(rng, &mut ps);
        for (blocks, down) in &self.levels {
            for b in blocks {
                b.init(rng, &mut ps);
            }
            down.init(rng, &mut ps);
        }
        self.mid.init(rng, &mut ps);
        self.norm_out.init(rng, &mut ps);
        self.conv_out.init(rng, &mut ps);
        ps
    }

    /// `x` is (in_channels, H, W) with H, W divisible by the downsample
    /// factor (callers validate).
    pub fn forward(&self, p: &ParamCtx, x: &Var) -> EncOut {
        let mut h = self.conv_in.forward(p, x);
        for (blocks, down) in &self.levels {
            for b in blocks {
                h = b.forward(p, &h, None);
            }
            h = down.forward(p, &h);
        }
        h = self.mid.forward(p, &h, None);
        let out = self.conv_out.forward(p, &self.norm_out.forward(p, &h).silu());
        if self.spec.double_latent {
            let lc = self.spec.latent_channels;
            EncOut {
                mu: out.slice_channels(0, lc),
                logvar: Some(out.slice_channels(lc, 2 * lc)),
            }
        } else {
            EncOut {
                mu: out,
                logvar: None,
            }
        }
    }
}
