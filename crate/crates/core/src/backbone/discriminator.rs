//! Patch-level convolutional discriminator for stage-1 adversarial
//! pretraining: three stride-2 levels, leaky-ReLU activations, a 1-channel
//! logit map output.

use super::layers::Conv2dLayer;
use super::DiscriminatorSpec;
use crate::autodiff::{ParamCtx, Var};
use crate::params::ParameterSet;
use rand::Rng;

pub struct Discriminator {
    pub spec: DiscriminatorSpec,
    convs: Vec<Conv2dLayer>,
    head: Conv2dLayer,
}

const SLOPE: f64 = 0.2;

impl Discriminator {
    pub fn new(spec: DiscriminatorSpec) -> Self {
        let w = spec.base_width;
        let convs = vec![
            Conv2dLayer::new("conv0", spec.in_channels, w, 4, 2, 1),
            Conv2dLayer::new("conv1", w, 2 * w, 4, 2, 1),
            Conv2dLayer::new("conv2", 2 * w, 4 * w, 4, 2, 1),
        ];
        let head = Conv2dLayer::new("head", 4 * w, 1, 3, 1, 1);
        Discriminator { spec, convs, head }
    }

    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParameterSet {
        let mut ps = ParameterSet::new();
        for c in &self.convs {
            c.init(rng, &mut ps);
        }
        self.head.init(rng, &mut ps);
        ps
    }

    /// Patch logit map for an image in [-1, 1].
    pub fn forward(&self, p: &ParamCtx, x: &Var) -> Var {
        let mut h = x.clone();
        for c in &self.convs {
            h = c.forward(p, &h).leaky_relu(SLOPE);
        }
        self.head.forward(p, &h)
    }
}
