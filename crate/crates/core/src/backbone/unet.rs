//! UNet noise predictor with sinusoidal timestep embeddings and a single
//! self-attention block at the bottleneck.

use super::layers::{AttnBlock, Conv2dLayer, GroupNormLayer, LinearLayer, ResBlock};
use super::UnetSpec;
use crate::autodiff::{concat_channels, ParamCtx, Var};
use crate::params::ParameterSet;
use ndarray::Array1;
use rand::Rng;

enum DownOp {
    Res(ResBlock),
    Down(Conv2dLayer),
}

enum UpOp {
    Res(ResBlock),
    Up(Conv2dLayer),
}

pub struct Unet {
    pub spec: UnetSpec,
    temb1: LinearLayer,
    temb2: LinearLayer,
    conv_in: Conv2dLayer,
    down: Vec<DownOp>,
    mid1: ResBlock,
    attn: AttnBlock,
    mid2: ResBlock,
    up: Vec<UpOp>,
    norm_out: GroupNormLayer,
    conv_out: Conv2dLayer,
}

/// `[cos(t w_i), sin(t w_i)]` with log-spaced frequencies.
pub fn sinusoidal_embedding(t: f64, dim: usize) -> Array1<f64> {
    assert!(dim >= 2 && dim % 2 == 0, "embedding dim must be even, got {dim}");
    let half = dim / 2;
    let mut out = Array1::zeros(dim);
    for i in 0..half {
        let freq = (-(10000.0f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (t * freq).cos();
        out[half + i] = (t * freq).sin();
    }
    out
}

impl Unet {
    pub fn new(spec: UnetSpec) -> Self {
        let base = spec.base_width;
        let time_dim = 4 * base;
        let temb1 = LinearLayer::new("temb1", base, time_dim);
        let temb2 = LinearLayer::new("temb2", time_dim, time_dim);
        let conv_in = Conv2dLayer::new("conv_in", spec.in_channels, base, 3, 1, 1);

        // mirror of the down path: record the width of every skip pushed
        let mut down = Vec::new();
        let mut skip_widths = vec![base];
        let mut w = base;
        let levels = spec.channel_mults.len();
        for (i, &mult) in spec.channel_mults.iter().enumerate() {
            let cw = base * mult;
            for b in 0..spec.blocks_per_level {
                down.push(DownOp::Res(ResBlock::new(&format!("down{i}.res{b}"), w, cw, Some(time_dim))));
                skip_widths.push(cw);
                w = cw;
            }
            if i < levels - 1 {
                down.push(DownOp::Down(Conv2dLayer::new(format!("down{i}.down"), cw, cw, 3, 2, 1)));
                skip_widths.push(cw);
            }
        }

        let mid1 = ResBlock::new("mid.res1", w, w, Some(time_dim));
        let attn = AttnBlock::new("mid.attn", w);
        let mid2 = ResBlock::new("mid.res2", w, w, Some(time_dim));

        let mut up = Vec::new();
        for (i, &mult) in spec.channel_mults.iter().enumerate().rev() {
            let cw = base * mult;
            for b in 0..=spec.blocks_per_level {
                let skip_w = skip_widths.pop().expect("skip bookkeeping");
                up.push(UpOp::Res(ResBlock::new(&format!("up{i}.res{b}"), w + skip_w, cw, Some(time_dim))));
                w = cw;
            }
            if i > 0 {
                up.push(UpOp::Up(Conv2dLayer::new(format!("up{i}.up"), cw, cw, 3, 1, 1)));
            }
        }
        assert!(skip_widths.is_empty(), "unbalanced skip connections");

        let norm_out = GroupNormLayer::new("norm_out", base);
        let conv_out = Conv2dLayer::new("conv_out", base, spec.out_channels, 3, 1, 1).zeroed();

        Unet {
            spec,
            temb1,
            temb2,
            conv_in,
            down,
            mid1,
            attn,
            mid2,
            up,
            norm_out,
            conv_out,
        }
    }

    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParameterSet {
        let mut ps = ParameterSet::new();
        self.temb1.init(rng, &mut ps);
        self.temb2.init(rng, &mut ps);
        self.conv_in.init(rng, &mut ps);
        for op in &self.down {
            match op {
                DownOp::Res(b) => b.init(rng, &mut ps),
                DownOp::Down(c) => c.init(rng, &mut ps),
            }
        }
        self.mid1.init(rng, &mut ps);
        self.attn.init(rng, &mut ps);
        self.mid2.init(rng, &mut ps);
        for op in &self.up {
            match op {
                UpOp::Res(b) => b.init(rng, &mut ps),
                UpOp::Up(c) => c.init(rng, &mut ps),
            }
        }
        self.norm_out.init(rng, &mut ps);
        self.conv_out.init(rng, &mut ps);
        ps
    }

    /// Predicted noise for `x = concat(z_t, cond)` at integer timestep `t`.
    pub fn forward(&self, p: &ParamCtx, z_t: &Var, cond: &Var, t: usize) -> Var {
        let g = p.graph();
        let emb_in = g.constant(sinusoidal_embedding(t as f64, self.spec.base_width).into_dyn());
        let temb = self.temb2.forward(p, &self.temb1.forward(p, &emb_in).silu());

        let x = concat_channels(&[z_t, cond]);
        let mut h = self.conv_in.forward(p, &x);
        let mut skips = vec![h.clone()];
        for op in &self.down {
            match op {
                DownOp::Res(b) => h = b.forward(p, &h, Some(&temb)),
                DownOp::Down(c) => h = c.forward(p, &h),
            }
            skips.push(h.clone());
        }
        h = self.mid1.forward(p, &h, Some(&temb));
        h = self.attn.forward(p, &h);
        h = self.mid2.forward(p, &h, Some(&temb));
        for op in &self.up {
            match op {
                UpOp::Res(b) => {
                    let skip = skips.pop().expect("skip stack");
                    h = b.forward(p, &concat_channels(&[&h, &skip]), Some(&temb));
                }
                UpOp::Up(c) => h = c.forward(p, &h.nearest_up2()),
            }
        }
        assert!(skips.is_empty(), "unused skips");
        self.conv_out.forward(p, &self.norm_out.forward(p, &h).silu())
    }
}
