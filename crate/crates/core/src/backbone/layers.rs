//! Parameterized layer building blocks.
//!
//! A layer owns its dotted parameter path and dimensions; `init` draws
//! weights into a [`ParameterSet`] (in a fixed code order, so a given
//! seed always produces the same initialization) and `forward` rebuilds
//! the computation on a graph by fetching leaves through a [`ParamCtx`].

use crate::autodiff::{conv2d, group_norm, linear, matmul, softmax_rows, ParamCtx, Var};
use crate::params::ParameterSet;
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::StandardNormal;

/// Largest of 8, 4, 2, 1 that divides `channels`.
pub fn norm_groups(channels: usize) -> usize {
    for g in [8usize, 4, 2] {
        if channels % g == 0 {
            return g;
        }
    }
    1
}

const NORM_EPS: f64 = 1e-6;

/// Fan-in scaled normal weights.
fn normal_init<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize) -> ArrayD<f64> {
    let std = (1.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * std).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

#[derive(Debug, Clone)]
pub struct Conv2dLayer {
    path: String,
    pub in_ch: usize,
    pub out_ch: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    zero_init: bool,
}

impl Conv2dLayer {
    pub fn new(path: impl Into<String>, in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Conv2dLayer {
            path: path.into(),
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
            zero_init: false,
        }
    }

    /// Zero-initialized weights and bias (residual final projections).
    pub fn zeroed(mut self) -> Self {
        self.zero_init = true;
        self
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R, ps: &mut ParameterSet) {
        let wshape = [self.out_ch, self.in_ch, self.kernel, self.kernel];
        let w = if self.zero_init {
            ArrayD::zeros(IxDyn(&wshape))
        } else {
            normal_init(rng, &wshape, self.in_ch * self.kernel * self.kernel)
        };
        ps.insert(format!("{}.w", self.path), w);
        ps.insert(format!("{}.b", self.path), ArrayD::zeros(IxDyn(&[self.out_ch])));
    }

    pub fn forward(&self, p: &ParamCtx, x: &Var) -> Var {
        let w = p.var(&format!("{}.w", self.path));
        let b = p.var(&format!("{}.b", self.path));
        conv2d(x, &w, &b, self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct GroupNormLayer {
    path: String,
    channels: usize,
    groups: usize,
}

impl GroupNormLayer {
    pub fn new(path: impl Into<String>, channels: usize) -> Self {
        GroupNormLayer {
            path: path.into(),
            channels,
            groups: norm_groups(channels),
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, _rng: &mut R, ps: &mut ParameterSet) {
        ps.insert(format!("{}.g", self.path), ArrayD::from_elem(IxDyn(&[self.channels]), 1.0));
        ps.insert(format!("{}.b", self.path), ArrayD::zeros(IxDyn(&[self.channels])));
    }

    pub fn forward(&self, p: &ParamCtx, x: &Var) -> Var {
        let g = p.var(&format!("{}.g", self.path));
        let b = p.var(&format!("{}.b", self.path));
        group_norm(x, &g, &b, self.groups, NORM_EPS)
    }
}

#[derive(Debug, Clone)]
pub struct LinearLayer {
    path: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl LinearLayer {
    pub fn new(path: impl Into<String>, in_dim: usize, out_dim: usize) -> Self {
        LinearLayer {
            path: path.into(),
            in_dim,
            out_dim,
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R, ps: &mut ParameterSet) {
        ps.insert(
            format!("{}.w", self.path),
            normal_init(rng, &[self.out_dim, self.in_dim], self.in_dim),
        );
        ps.insert(format!("{}.b", self.path), ArrayD::zeros(IxDyn(&[self.out_dim])));
    }

    pub fn forward(&self, p: &ParamCtx, x: &Var) -> Var {
        let w = p.var(&format!("{}.w", self.path));
        let b = p.var(&format!("{}.b", self.path));
        linear(x, &w, &b)
    }
}

/// Pre-activation residual block with optional timestep-embedding
/// injection between the two convolutions.
#[derive(Debug, Clone)]
pub struct ResBlock {
    norm1: GroupNormLayer,
    conv1: Conv2dLayer,
    time_proj: Option<LinearLayer>,
    norm2: GroupNormLayer,
    conv2: Conv2dLayer,
    skip: Option<Conv2dLayer>,
}

impl ResBlock {
    pub fn new(path: &str, in_ch: usize, out_ch: usize, time_dim: Option<usize>) -> Self {
        ResBlock {
            norm1: GroupNormLayer::new(format!("{path}.norm1"), in_ch),
            conv1: Conv2dLayer::new(format!("{path}.conv1"), in_ch, out_ch, 3, 1, 1),
            time_proj: time_dim.map(|td| LinearLayer::new(format!("{path}.temb"), td, out_ch)),
            norm2: GroupNormLayer::new(format!("{path}.norm2"), out_ch),
            conv2: Conv2dLayer::new(format!("{path}.conv2"), out_ch, out_ch, 3, 1, 1).zeroed(),
            skip: (in_ch != out_ch).then(|| Conv2dLayer::new(format!("{path}.skip"), in_ch, out_ch, 1, 1, 0)),
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R, ps: &mut ParameterSet) {
        self.norm1.init(rng, ps);
        self.conv1.init(rng, ps);
        if let Some(tp) = &self.time_proj {
            tp.init(rng, ps);
        }
        self.norm2.init(rng, ps);
        self.conv2.init(rng, ps);
        if let Some(s) = &self.skip {
            s.init(rng, ps);
        }
    }

    pub fn forward(&self, p: &ParamCtx, x: &Var, temb: Option<&Var>) -> Var {
        let h = self.conv1.forward(p, &self.norm1.forward(p, x).silu());
        // inject after the norm: a per-channel shift added before it would
        // be cancelled by the mean subtraction when groups are small
        let mut h = self.norm2.forward(p, &h);
        if let (Some(tp), Some(t)) = (&self.time_proj, temb) {
            let tvec = tp.forward(p, &t.silu());
            h = h.add_channel_vec(&tvec);
        }
        let h = self.conv2.forward(p, &h.silu());
        let sk = match &self.skip {
            Some(s) => s.forward(p, x),
            None => x.clone(),
        };
        sk.add(&h)
    }
}

/// Single-head self-attention over spatial positions.
#[derive(Debug, Clone)]
pub struct AttnBlock {
    norm: GroupNormLayer,
    q: Conv2dLayer,
    k: Conv2dLayer,
    v: Conv2dLayer,
    proj: Conv2dLayer,
    channels: usize,
}

impl AttnBlock {
    pub fn new(path: &str, channels: usize) -> Self {
        AttnBlock {
            norm: GroupNormLayer::new(format!("{path}.norm"), channels),
            q: Conv2dLayer::new(format!("{path}.q"), channels, channels, 1, 1, 0),
            k: Conv2dLayer::new(format!("{path}.k"), channels, channels, 1, 1, 0),
            v: Conv2dLayer::new(format!("{path}.v"), channels, channels, 1, 1, 0),
            proj: Conv2dLayer::new(format!("{path}.proj"), channels, channels, 1, 1, 0).zeroed(),
            channels,
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R, ps: &mut ParameterSet) {
        self.norm.init(rng, ps);
        self.q.init(rng, ps);
        self.k.init(rng, ps);
        self.v.init(rng, ps);
        self.proj.init(rng, ps);
    }

    pub fn forward(&self, p: &ParamCtx, x: &Var) -> Var {
        let shape = x.shape();
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let hw = h * w;
        let n = self.norm.forward(p, x);
        let q = self.q.forward(p, &n).reshape(&[c, hw]).transpose2();
        let k = self.k.forward(p, &n).reshape(&[c, hw]);
        let v = self.v.forward(p, &n).reshape(&[c, hw]).transpose2();
        let attn = softmax_rows(&matmul(&q, &k).scale(1.0 / (self.channels as f64).sqrt()));
        let out = matmul(&attn, &v).transpose2().reshape(&[c, h, w]);
        x.add(&self.proj.forward(p, &out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;
    use crate::rng::stream_rng;

    #[test]
    fn norm_groups_divide() {
        for c in [1usize, 2, 3, 4, 6, 8, 12, 16, 64] {
            assert_eq!(c % norm_groups(c), 0);
        }
        assert_eq!(norm_groups(64), 8);
        assert_eq!(norm_groups(6), 2);
        assert_eq!(norm_groups(3), 1);
    }

    #[test]
    fn resblock_is_identity_at_init_when_widths_match() {
        // zero-init final conv makes a fresh block's residual path vanish
        let block = ResBlock::new("rb", 4, 4, None);
        let mut ps = ParameterSet::new();
        block.init(&mut stream_rng(0, "init", 0), &mut ps);
        let g = Graph::new(false);
        let ctx = ParamCtx::frozen(&g, &ps, "");
        let x = g.constant(crate::rng::normal_tensor(&mut stream_rng(1, "x", 0), &[4, 5, 5]));
        let y = block.forward(&ctx, &x, None);
        assert_eq!(&*y.value(), &*x.value());
    }

    #[test]
    fn attn_preserves_shape_and_differentiates() {
        let attn = AttnBlock::new("attn", 4);
        let mut ps = ParameterSet::new();
        attn.init(&mut stream_rng(0, "init", 0), &mut ps);
        // randomize the zero-init projection so gradients flow everywhere
        for (_, t) in ps.iter_mut() {
            if t.iter().all(|&v| v == 0.0) {
                *t = crate::rng::normal_tensor(&mut stream_rng(2, "rand", 0), t.shape());
            }
        }
        let g = Graph::new(true);
        let ctx = ParamCtx::trainable(&g, &ps, "");
        let x = g.constant(crate::rng::normal_tensor(&mut stream_rng(3, "x", 0), &[4, 3, 3]));
        let y = attn.forward(&ctx, &x);
        assert_eq!(y.shape(), vec![4, 3, 3]);
        g.backward(&y.mean_all());
        let grads = g.param_grads();
        assert!(grads.values().any(|t| t.iter().any(|&v| v != 0.0)));
    }
}
