use super::*;
use crate::autodiff::{concat_channels, gradcheck, Graph, ParamCtx};
use crate::rng::{normal_tensor, stream_rng};
use ndarray::ArrayD;

fn toy_encoder_spec() -> EncoderSpec {
    EncoderSpec {
        in_channels: 2,
        latent_channels: 1,
        downsample_factor: 2,
        base_width: 4,
        blocks_per_level: 1,
        double_latent: true,
    }
}

fn toy_decoder_spec() -> DecoderSpec {
    DecoderSpec {
        latent_channels: 1,
        image_channels: 1,
        base_width: 4,
        downsample_factor: 2,
        blocks_per_level: 1,
        sr: SRBranchSpec {
            num_fru: 2,
            imdb_per_fru: 1,
            feature_width: 4,
            upscale: 4,
        },
    }
}

fn toy_unet_spec() -> UnetSpec {
    UnetSpec {
        in_channels: 2,
        out_channels: 1,
        base_width: 8,
        channel_mults: vec![1, 2],
        blocks_per_level: 1,
    }
}

/// Random params in place of the structured init so gradients reach every
/// tensor (zero-initialized projections would otherwise gate whole paths).
fn randomize(ps: &mut ParameterSet, seed: u64) {
    let mut rng = stream_rng(seed, "randomize", 0);
    for (_, t) in ps.iter_mut() {
        *t = normal_tensor(&mut rng, t.shape()) * 0.3;
    }
}

#[test]
fn encode_shape_arithmetic() {
    // full-scale dims with toy widths: 3x64x64 at f=8 gives a 4x8x8 latent
    let spec = EncoderSpec {
        in_channels: 6,
        latent_channels: 4,
        downsample_factor: 8,
        base_width: 4,
        blocks_per_level: 1,
        double_latent: true,
    };
    let enc = Encoder::new(spec.clone());
    let ps = enc.init_params(&mut stream_rng(0, "enc", 0));
    let hr = normal_tensor(&mut stream_rng(1, "hr", 0), &[3, 64, 64]);
    let lr_up = normal_tensor(&mut stream_rng(1, "lrup", 0), &[3, 64, 64]);
    let z = encode(&hr, &lr_up, &spec, &ps).unwrap();
    assert_eq!(z.shape(), &[4, 8, 8]);
}

#[test]
fn encode_is_deterministic() {
    let spec = toy_encoder_spec();
    let enc = Encoder::new(spec.clone());
    let ps = enc.init_params(&mut stream_rng(2, "enc", 0));
    let hr = normal_tensor(&mut stream_rng(3, "hr", 0), &[1, 8, 8]);
    let lr_up = normal_tensor(&mut stream_rng(3, "lrup", 0), &[1, 8, 8]);
    let a = encode(&hr, &lr_up, &spec, &ps).unwrap();
    let b = encode(&hr, &lr_up, &spec, &ps).unwrap();
    assert_eq!(a, b);
}

#[test]
fn encode_rejects_mismatched_inputs() {
    let spec = toy_encoder_spec();
    let enc = Encoder::new(spec.clone());
    let ps = enc.init_params(&mut stream_rng(4, "enc", 0));
    let hr = normal_tensor(&mut stream_rng(5, "hr", 0), &[1, 8, 8]);
    let lr_up = normal_tensor(&mut stream_rng(5, "lrup", 0), &[1, 4, 4]);
    assert!(encode(&hr, &lr_up, &spec, &ps).is_err());
    // non-divisible spatial dims
    let hr9 = normal_tensor(&mut stream_rng(5, "hr9", 0), &[1, 9, 9]);
    let lr9 = normal_tensor(&mut stream_rng(5, "lr9", 0), &[1, 9, 9]);
    assert!(encode(&hr9, &lr9, &spec, &ps).is_err());
}

#[test]
fn decode_shape_arithmetic() {
    // LR 3x16x16 with a 4x8x8 latent (f=8 of the 64x64 HR) gives 3x64x64
    let spec = DecoderSpec {
        latent_channels: 4,
        image_channels: 3,
        base_width: 4,
        downsample_factor: 8,
        blocks_per_level: 1,
        sr: SRBranchSpec {
            num_fru: 4,
            imdb_per_fru: 1,
            feature_width: 4,
            upscale: 4,
        },
    };
    let dec = Decoder::new(spec.clone());
    let ps = dec.init_params(&mut stream_rng(6, "dec", 0));
    let lr = normal_tensor(&mut stream_rng(7, "lr", 0), &[3, 16, 16]);
    let z = normal_tensor(&mut stream_rng(7, "z", 0), &[4, 8, 8]);
    let sr = decode(&lr, &z, &spec, &ps).unwrap();
    assert_eq!(sr.shape(), &[3, 64, 64]);

    let bad_z = normal_tensor(&mut stream_rng(7, "zbad", 0), &[4, 9, 9]);
    assert!(decode(&lr, &bad_z, &spec, &ps).is_err());
}

#[test]
fn decode_with_zeroed_side_projections_ignores_latent() {
    let spec = toy_decoder_spec();
    let dec = Decoder::new(spec.clone());
    let mut ps = dec.init_params(&mut stream_rng(8, "dec", 0));
    randomize(&mut ps, 80);
    let side_paths: Vec<String> = ps.paths().filter(|p| p.contains(".side.")).cloned().collect();
    for path in side_paths {
        let t = ps.get_mut(&path).unwrap();
        *t = ArrayD::zeros(t.raw_dim());
    }
    let lr = normal_tensor(&mut stream_rng(9, "lr", 0), &[1, 2, 2]);
    let z1 = normal_tensor(&mut stream_rng(9, "z1", 0), &[1, 4, 4]);
    let z2 = normal_tensor(&mut stream_rng(9, "z2", 0), &[1, 4, 4]);
    let a = decode(&lr, &z1, &spec, &ps).unwrap();
    let b = decode(&lr, &z2, &spec, &ps).unwrap();
    assert_eq!(a, b, "output must not depend on z when side links are cut");
}

#[test]
fn cond_features_match_latent_shape() {
    // distillation loss compares cond features to z elementwise
    let spec = EncoderSpec {
        in_channels: 3,
        latent_channels: 4,
        downsample_factor: 8,
        base_width: 4,
        blocks_per_level: 1,
        double_latent: false,
    };
    let net = Encoder::new(spec.clone());
    let ps = net.init_params(&mut stream_rng(10, "cond", 0));
    let lr_up = normal_tensor(&mut stream_rng(11, "lrup", 0), &[3, 64, 64]);
    let c = cond_features(&lr_up, &spec, &ps).unwrap();
    assert_eq!(c.shape(), &[4, 8, 8]);
    let again = cond_features(&lr_up, &spec, &ps).unwrap();
    assert_eq!(c, again);
    let wrong = normal_tensor(&mut stream_rng(11, "bad", 0), &[3, 63, 63]);
    assert!(cond_features(&wrong, &spec, &ps).is_err());
}

#[test]
fn denoise_eps_shape_contract_and_determinism() {
    let spec = toy_unet_spec();
    let net = Unet::new(spec.clone());
    let ps = net.init_params(&mut stream_rng(12, "unet", 0));
    let z_t = normal_tensor(&mut stream_rng(13, "zt", 0), &[1, 8, 8]);
    let cond = normal_tensor(&mut stream_rng(13, "c", 0), &[1, 8, 8]);
    let a = denoise_eps(&z_t, &cond, 3, 10, &spec, &ps).unwrap();
    assert_eq!(a.shape(), z_t.shape());
    let b = denoise_eps(&z_t, &cond, 3, 10, &spec, &ps).unwrap();
    assert_eq!(a, b);
    assert!(denoise_eps(&z_t, &cond, 10, 10, &spec, &ps).is_err());
    let bad = normal_tensor(&mut stream_rng(13, "bad", 0), &[1, 4, 4]);
    assert!(denoise_eps(&z_t, &bad, 3, 10, &spec, &ps).is_err());
}

#[test]
fn shape_algebra_grid() {
    for &size in &[16usize, 32, 64] {
        for &ch in &[1usize, 3] {
            let spec = EncoderSpec {
                in_channels: 2 * ch,
                latent_channels: 2,
                downsample_factor: 4,
                base_width: 4,
                blocks_per_level: 1,
                double_latent: true,
            };
            let enc = Encoder::new(spec.clone());
            let ps = enc.init_params(&mut stream_rng(14, "grid", size as u64));
            let hr = normal_tensor(&mut stream_rng(15, "hr", size as u64), &[ch, size, size]);
            let lr_up = normal_tensor(&mut stream_rng(15, "lrup", size as u64), &[ch, size, size]);
            let z = encode(&hr, &lr_up, &spec, &ps).unwrap();
            assert_eq!(z.shape(), &[2, size / 4, size / 4]);
        }
    }
}

#[test]
fn parameter_counts_are_deterministic() {
    let enc = Encoder::new(toy_encoder_spec());
    let a = enc.init_params(&mut stream_rng(16, "enc", 0));
    let b = enc.init_params(&mut stream_rng(16, "enc", 0));
    assert_eq!(a.param_count(), b.param_count());
    for ((pa, ta), (pb, tb)) in a.iter().zip(b.iter()) {
        assert_eq!(pa, pb);
        assert_eq!(ta, tb);
    }
}

#[test]
fn parameter_count_regression_guard() {
    let enc = Encoder::new(toy_encoder_spec());
    let dec = Decoder::new(toy_decoder_spec());
    let unet = Unet::new(toy_unet_spec());
    let disc = Discriminator::new(DiscriminatorSpec {
        in_channels: 1,
        base_width: 4,
    });
    let mut rng = stream_rng(17, "count", 0);
    let counts = (
        enc.init_params(&mut rng).param_count(),
        dec.init_params(&mut rng).param_count(),
        unet.init_params(&mut rng).param_count(),
        disc.init_params(&mut rng).param_count(),
    );
    assert_eq!(counts, (2046, 4412, 41681, 2797), "architecture drifted: {counts:?}");
}

#[test]
fn sinusoidal_embedding_structure() {
    let e = sinusoidal_embedding(0.0, 8);
    for i in 0..4 {
        assert_eq!(e[i], 1.0); // cos(0)
        assert_eq!(e[4 + i], 0.0); // sin(0)
    }
    let a = sinusoidal_embedding(3.0, 8);
    let b = sinusoidal_embedding(4.0, 8);
    assert!(a.iter().zip(b.iter()).any(|(x, y)| x != y));
}

#[test]
fn gradients_match_finite_differences_encoder() {
    let spec = toy_encoder_spec();
    let enc = Encoder::new(spec.clone());
    let mut ps = enc.init_params(&mut stream_rng(18, "enc", 0));
    randomize(&mut ps, 81);
    let hr = normal_tensor(&mut stream_rng(19, "hr", 0), &[1, 4, 4]);
    let lr_up = normal_tensor(&mut stream_rng(19, "lrup", 0), &[1, 4, 4]);
    let target = normal_tensor(&mut stream_rng(19, "tgt", 0), &[1, 2, 2]);

    let build = |p: &ParameterSet, grad: bool| -> (Graph, f64) {
        let g = Graph::new(grad);
        let ctx = if grad {
            ParamCtx::trainable(&g, p, "")
        } else {
            ParamCtx::frozen(&g, p, "")
        };
        let x = concat_channels(&[&g.constant(hr.clone()), &g.constant(lr_up.clone())]);
        let out = enc.forward(&ctx, &x);
        let tv = g.constant(target.clone());
        // square-error head keeps the loss smooth for FD comparison
        let loss = out.mu.sub(&tv).square().mean_all().add(&out.logvar.unwrap().square().mean_all());
        let v = loss.scalar();
        if grad {
            g.backward(&loss);
        }
        (g, v)
    };

    let (g, _) = build(&ps, true);
    let analytic = g.param_grads();
    let report = gradcheck::check_against_fd(&ps, &analytic, |p| build(p, false).1, 1e-5, 1e-6, 3);
    assert!(report.max_rel_err < 1e-3, "worst {}", report.worst_param);
}

#[test]
fn gradients_match_finite_differences_decoder() {
    let spec = toy_decoder_spec();
    let dec = Decoder::new(spec.clone());
    let mut ps = dec.init_params(&mut stream_rng(20, "dec", 0));
    randomize(&mut ps, 82);
    let lr = normal_tensor(&mut stream_rng(21, "lr", 0), &[1, 2, 2]);
    let z = normal_tensor(&mut stream_rng(21, "z", 0), &[1, 4, 4]);
    let target = normal_tensor(&mut stream_rng(21, "tgt", 0), &[1, 8, 8]);

    let build = |p: &ParameterSet, grad: bool| -> (Graph, f64) {
        let g = Graph::new(grad);
        let ctx = if grad {
            ParamCtx::trainable(&g, p, "")
        } else {
            ParamCtx::frozen(&g, p, "")
        };
        let out = dec.forward(&ctx, &g.constant(lr.clone()), &g.constant(z.clone()));
        let loss = out.sub(&g.constant(target.clone())).square().mean_all();
        let v = loss.scalar();
        if grad {
            g.backward(&loss);
        }
        (g, v)
    };

    let (g, _) = build(&ps, true);
    let analytic = g.param_grads();
    let report = gradcheck::check_against_fd(&ps, &analytic, |p| build(p, false).1, 1e-5, 1e-6, 5);
    assert!(report.max_rel_err < 1e-3, "worst {}", report.worst_param);
}

#[test]
fn gradients_match_finite_differences_denoiser() {
    let spec = toy_unet_spec();
    let net = Unet::new(spec.clone());
    let mut ps = net.init_params(&mut stream_rng(22, "unet", 0));
    randomize(&mut ps, 83);
    let z_t = normal_tensor(&mut stream_rng(23, "zt", 0), &[1, 4, 4]);
    let cond = normal_tensor(&mut stream_rng(23, "c", 0), &[1, 4, 4]);
    let target = normal_tensor(&mut stream_rng(23, "tgt", 0), &[1, 4, 4]);

    let build = |p: &ParameterSet, grad: bool| -> (Graph, f64) {
        let g = Graph::new(grad);
        let ctx = if grad {
            ParamCtx::trainable(&g, p, "")
        } else {
            ParamCtx::frozen(&g, p, "")
        };
        let out = net.forward(&ctx, &g.constant(z_t.clone()), &g.constant(cond.clone()), 2);
        let loss = out.sub(&g.constant(target.clone())).square().mean_all();
        let v = loss.scalar();
        if grad {
            g.backward(&loss);
        }
        (g, v)
    };

    let (g, _) = build(&ps, true);
    let analytic = g.param_grads();
    let report = gradcheck::check_against_fd(&ps, &analytic, |p| build(p, false).1, 1e-5, 1e-6, 7);
    assert!(report.max_rel_err < 1e-3, "worst {}", report.worst_param);
}

#[test]
fn spec_validation_rejects_bad_configs() {
    let mut spec = toy_encoder_spec();
    spec.downsample_factor = 3;
    assert!(spec.validate().is_err());
    let mut sr = SRBranchSpec::default();
    assert!(sr.validate().is_ok());
    sr.feature_width = 30;
    assert!(sr.validate().is_err());
    let mut u = toy_unet_spec();
    u.channel_mults.clear();
    assert!(u.validate().is_err());
}

#[test]
fn default_sr_branch_matches_reference_design() {
    let sr = SRBranchSpec::default();
    assert_eq!(sr.num_fru, 4);
    assert_eq!(sr.imdb_per_fru, 12);
    assert_eq!(sr.upscale, 4);
}
