mod common;

use common::stage_shape;
use rctnet::backbone::EncoderConfig;
use rctnet::graph::Graph;
use rctnet::inspect::inspect;
use rctnet::nn::Ctx;
use rctnet::{Ablation, Error, ModelConfig, RctNet32, Tensor};

fn forward_shapes(cfg: &ModelConfig, h: usize, w: usize) -> rctnet::Result<Vec<Vec<usize>>> {
    let model = RctNet32::new(cfg, 0)?;
    let g = Graph::inference();
    let ctx = Ctx::new(&g, model.store(), false);
    let x = || g.constant(Tensor::zeros(&[2, 3, h, w]));
    let out = model.forward(&ctx, x(), x())?;
    let mut shapes: Vec<Vec<usize>> = out.difference.iter().map(|v| v.shape()).collect();
    shapes.extend(out.predictions.0.iter().map(|v| v.shape()));
    Ok(shapes)
}

#[test]
fn non_square_inputs_follow_closed_form() {
    let cfg = ModelConfig::default();
    let shapes = forward_shapes(&cfg, 64, 96).unwrap();
    let chans = cfg.decoder_channels();
    for k in 1..=4 {
        assert_eq!(shapes[k - 1], vec![2, chans[k - 1], 64 >> (k + 1), 96 >> (k + 1)]);
        assert_eq!(shapes[3 + k], vec![2, 1, 64, 96]);
    }
}

#[test]
fn ablations_keep_output_contract() {
    for ab in [
        Ablation { use_csa: false, ..Ablation::default() },
        Ablation { use_msf: false, ..Ablation::default() },
        Ablation { use_esa: false, ..Ablation::default() },
    ] {
        let cfg = ModelConfig { ablation: ab, ..ModelConfig::default() };
        let shapes = forward_shapes(&cfg, 64, 64).unwrap();
        let chans = cfg.decoder_channels();
        for k in 1..=4 {
            assert_eq!(shapes[k - 1], stage_shape(2, chans[k - 1], 64, k), "{}", ab.label());
            assert_eq!(shapes[3 + k], vec![2, 1, 64, 64]);
        }
    }
}

#[test]
fn without_csa_the_difference_uses_backbone_widths() {
    let cfg = ModelConfig {
        ablation: Ablation { use_csa: false, ..Ablation::default() },
        ..ModelConfig::default()
    };
    let enc = cfg.encoder.channels();
    assert_eq!(cfg.decoder_channels(), enc);
    let full = RctNet32::new(&ModelConfig::default(), 0).unwrap();
    let ablated = RctNet32::new(&cfg, 0).unwrap();
    assert!(ablated.csa().is_none());
    assert!(ablated.num_params() < full.num_params());
}

#[test]
fn sizes_not_divisible_by_32_are_rejected() {
    for (h, w) in [(100, 100), (64, 48), (0, 64), (31, 32)] {
        match forward_shapes(&ModelConfig::default(), h, w) {
            Err(Error::Dimension { .. }) => {}
            other => panic!("{h}x{w}: {:?}", other.map(|_| ())),
        }
    }
}

#[test]
fn mismatched_pair_is_rejected() {
    let model = RctNet32::new(&ModelConfig::default(), 0).unwrap();
    let g = Graph::inference();
    let ctx = Ctx::new(&g, model.store(), false);
    let a = g.constant(Tensor::zeros(&[1, 3, 64, 64]));
    let b = g.constant(Tensor::zeros(&[1, 3, 64, 96]));
    assert!(matches!(model.forward(&ctx, a, b), Err(Error::ShapeMismatch { .. })));
}

#[test]
fn larger_encoders_build_and_count_consistently() {
    for enc in [EncoderConfig::resnet18_like(), EncoderConfig::regnet_like()] {
        let cfg = ModelConfig { encoder: enc, ..ModelConfig::default() };
        let r = inspect(&cfg, 64, 64).unwrap();
        assert_eq!(r.params, r.params_by_formula);
        assert!(r.flops > 0);
    }
}
