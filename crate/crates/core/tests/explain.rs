mod common;

use bid_core::config::CamLayer;
use bid_core::explain::*;
use bid_core::{BidModel, Variant};
use bid_tensor::Tensor;
use common::{rand_tensor, tiny_model};
use laneworld::NavCommand;
use proptest::prelude::*;

fn map(h: usize, w: usize, values: Vec<f64>) -> Heatmap {
    Heatmap { height: h, width: w, values, target: Target::Steer, branch: Branch::Positive, output: 1.0 }
}

#[test]
fn analytic_probe() {
    // Channel 0 has positive gradient, channel 1 negative; each lights one cell.
    let feat = Tensor::new(vec![2, 1, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let grads = Tensor::new(vec![2, 1, 2], vec![0.5, 0.5, -0.25, -0.25]).unwrap();
    let pos = cam_from_gradients(&feat, &grads, 0.3, Target::Steer).unwrap();
    assert_eq!(pos.branch, Branch::Positive);
    assert_eq!(pos.values, vec![1.0, 0.0]);
    let neg = cam_from_gradients(&feat, &grads, -0.3, Target::Accel).unwrap();
    assert_eq!(neg.branch, Branch::Negative);
    assert_eq!(neg.values, vec![0.0, 1.0]);
}

#[test]
fn zero_output_takes_positive_branch() {
    assert_eq!(branch_for(0.0), Branch::Positive);
    assert_eq!(branch_for(-1e-12), Branch::Negative);
}

#[test]
fn shape_mismatch_is_an_error() {
    let f = Tensor::<f64>::zeros(&[2, 3, 3]);
    assert!(cam_from_gradients(&f, &Tensor::zeros(&[2, 3, 2]), 1.0, Target::Steer).is_err());
    assert!(cam_from_gradients(&Tensor::zeros(&[6, 3]), &Tensor::zeros(&[6, 3]), 1.0, Target::Steer).is_err());
}

#[test]
fn zero_heat_overlay_is_the_frame() {
    let frame: Vec<u8> = (0..8 * 6 * 3).map(|i| (i * 7 % 256) as u8).collect();
    let img = overlay(&map(2, 2, vec![0.0; 4]), &frame, 8, 6, 0.6);
    assert_eq!((img.width, img.height), (8, 6));
    assert_eq!(img.rgb, frame);
    let hot = overlay(&map(2, 2, vec![1.0; 4]), &frame, 8, 6, 0.6);
    assert_ne!(hot.rgb, frame);
}

#[test]
fn upsample_dims_and_corners() {
    let m = map(2, 3, vec![0.0, 0.5, 1.0, 0.2, 0.4, 0.6]);
    let up = upsample(&m, 10, 7);
    assert_eq!(up.len(), 70);
    assert_eq!((up[0], up[6], up[63], up[69]), (0.0, 1.0, 0.2, 0.6));
    assert!(up.iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn top_quantile_threshold() {
    let v: Vec<f64> = (0..100).map(|i| i as f64).collect();
    assert_eq!(top_quantile(&v, 0.1), 90.0);
    assert_eq!(top_quantile(&v, 0.0), 99.0);
    assert_eq!(top_quantile(&v, 1.0), 0.0);
}

#[test]
fn model_heatmaps_at_each_layer() {
    let cfg = tiny_model(Variant::Bid);
    let model = BidModel::new(cfg).unwrap();
    let params = model.init::<f32>(3);
    let f = rand_tensor(&[3, 16, 16], 0.0, 1.0, 1).cast::<f32>();
    let p = rand_tensor(&[3, 16, 16], 0.0, 1.0, 2).cast::<f32>();
    let act = model.act(&params, &f, &p, NavCommand::Left).unwrap();
    for layer in [CamLayer::It, CamLayer::V4, CamLayer::Mt] {
        for target in [Target::Steer, Target::Accel] {
            let h = grad_cam(&model, &params, &f, &p, NavCommand::Left, target, layer).unwrap();
            assert!((h.output - act[target.index()] as f64).abs() < 1e-4);
            assert_eq!(h.branch, branch_for(h.output));
            assert!(h.values.iter().all(|v| (0.0..=1.0).contains(v)));
            let max = h.values.iter().cloned().fold(0.0, f64::max);
            assert!(max == 0.0 || max == 1.0);
        }
    }
    let base = BidModel::new(tiny_model(Variant::Base)).unwrap();
    let bp = base.init::<f32>(3);
    assert!(grad_cam(&base, &bp, &f, &p, NavCommand::Left, Target::Steer, CamLayer::Mt).is_err());
}

#[test]
fn annotate_adds_caption_and_png_decodes() {
    let img = Image { width: 64, height: 16, rgb: vec![0; 64 * 16 * 3] };
    let a = annotate(&img, NavCommand::Right, 0.25, -0.5);
    assert_eq!(a.width, 64);
    assert!(a.height > 16);
    assert_eq!(&a.rgb[..img.rgb.len()], &img.rgb[..]);
    assert!(a.rgb[img.rgb.len()..].iter().any(|&b| b == 255));
    let png = encode_png(&a);
    let back = image::load_from_memory(&png).unwrap().to_rgb8();
    assert_eq!(back.into_raw(), a.rgb);
}

proptest! {
    #[test]
    fn sign_symmetry(seed in 0u64..10_000, out in 0.01f64..5.0) {
        let f = rand_tensor(&[4, 3, 3], 0.0, 2.0, seed);
        let g = rand_tensor(&[4, 3, 3], -1.0, 1.0, seed + 1);
        let neg_g = Tensor::new(vec![4, 3, 3], g.data().iter().map(|v| -v).collect()).unwrap();
        let a = cam_from_gradients(&f, &g, out, Target::Steer).unwrap();
        let b = cam_from_gradients(&f, &neg_g, -out, Target::Steer).unwrap();
        prop_assert_eq!(a.values, b.values);
    }

    #[test]
    fn scale_covariance(seed in 0u64..10_000, s in 0.1f64..10.0) {
        let f = rand_tensor(&[4, 3, 3], 0.0, 2.0, seed);
        let g = rand_tensor(&[4, 3, 3], -1.0, 1.0, seed + 1);
        let sg = Tensor::new(vec![4, 3, 3], g.data().iter().map(|v| v * s).collect()).unwrap();
        let sf = Tensor::new(vec![4, 3, 3], f.data().iter().map(|v| v * s).collect()).unwrap();
        let a = cam_from_gradients(&f, &g, 1.0, Target::Accel).unwrap();
        for b in [cam_from_gradients(&f, &sg, 1.0, Target::Accel).unwrap(), cam_from_gradients(&sf, &g, 1.0, Target::Accel).unwrap()] {
            for (x, y) in a.values.iter().zip(&b.values) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn heat_colour_is_in_range(v in -1.0f64..2.0) {
        prop_assert!(heat_color(v).iter().all(|c| (0.0..=255.0).contains(c)));
    }
}
