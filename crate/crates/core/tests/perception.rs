mod common;

use bid_core::model::frame_tensor;
use bid_core::perception::*;
use bid_core::{BidModel, ModelConfig, Variant};
use bid_tensor::{Graph, ParamStore, Tensor};
use common::{one_hot_batch, rand_tensor, tiny_model};
use laneworld::NavCommand;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn block_params(steps: usize) -> ParamStore<f64> {
    let mut p = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    init_cor_block(&mut p, "b", CorBlockConfig { in_ch: 4, out_ch: 8, bottleneck: 2, steps }, &mut rng).unwrap();
    p
}

#[test]
fn v1_output_shape_at_default_size() {
    let cfg = ModelConfig::default();
    assert_eq!(cfg.v1_grid(), (24, 24));
    let mut p = ParamStore::<f32>::new();
    init_v1(&mut p, 64, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let mut g = Graph::new();
    let b = p.bind(&mut g, false);
    let x = g.constant(Tensor::zeros(&[1, 3, 96, 96]));
    let out = v1_forward(&mut g, &b, x).unwrap();
    assert_eq!(g.shape(out.out), &[1, 64, 24, 24]);
}

#[test]
fn v1_zero_frame_gives_zero_conv() {
    let mut p = ParamStore::<f64>::new();
    init_v1(&mut p, 4, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let mut g = Graph::new();
    let b = p.bind(&mut g, false);
    let x = g.constant(Tensor::zeros(&[1, 3, 16, 16]));
    let out = v1_forward(&mut g, &b, x).unwrap();
    assert!(g.value(out.conv7).data().iter().all(|&v| v == 0.0));
}

#[test]
fn v1_rejects_wrong_channels() {
    let mut p = ParamStore::<f64>::new();
    init_v1(&mut p, 4, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let mut g = Graph::new();
    let b = p.bind(&mut g, false);
    let x = g.constant(Tensor::zeros(&[1, 1, 16, 16]));
    assert!(v1_forward(&mut g, &b, x).is_err());
}

#[test]
fn v1_is_deterministic() {
    let run = || {
        let mut p = ParamStore::<f32>::new();
        init_v1(&mut p, 4, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let mut g = Graph::new();
        let b = p.bind(&mut g, false);
        let x = g.constant(rand_tensor(&[1, 3, 16, 16], 0.0, 1.0, 3).cast());
        let out = v1_forward(&mut g, &b, x).unwrap();
        g.value(out.out).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn cor_block_zero_steps_is_config_error() {
    let cfg = CorBlockConfig { in_ch: 4, out_ch: 8, bottleneck: 2, steps: 0 };
    assert!(cfg.validate().is_err());
    let p = block_params(1);
    let mut g = Graph::new();
    let b = p.bind(&mut g, false);
    let x = g.constant(Tensor::zeros(&[1, 4, 8, 8]));
    assert!(cor_block_forward(&mut g, &b, "b", 0, x).is_err());
}

#[test]
fn cor_block_parameter_count_differs_only_in_step_norms() {
    let norm_per_step = 2 * (2 + 2 + 8);
    let p2 = block_params(2);
    let p4 = block_params(4);
    assert_eq!(p4.num_scalars() - p2.num_scalars(), 2 * norm_per_step);
    let shared = |p: &ParamStore<f64>| p.iter().filter(|(n, _)| !n.contains(".t")).map(|(_, t)| t.numel()).sum::<usize>();
    assert_eq!(shared(&p2), shared(&p4));
}

#[test]
fn cor_block_single_step_is_one_bottleneck_pass() {
    let p = block_params(1);
    let x = rand_tensor(&[1, 4, 8, 8], -1.0, 1.0, 1);
    let mut g = Graph::new();
    let b = p.bind(&mut g, false);
    let xv = g.constant(x);
    let y = cor_block_forward(&mut g, &b, "b", 1, xv).unwrap();
    // hand-assembled single pass
    let h = g.conv2d(xv, b.var("b.conv_in.weight").unwrap(), 1, 0).unwrap();
    let s = g.conv2d(h, b.var("b.skip.weight").unwrap(), 2, 0).unwrap();
    let s = g.layer_norm(s, b.var("b.skip_norm.gain").unwrap(), b.var("b.skip_norm.bias").unwrap(), 3).unwrap();
    let r = g.conv2d(h, b.var("b.conv1.weight").unwrap(), 1, 0).unwrap();
    let r = g.layer_norm(r, b.var("b.t0.norm1.gain").unwrap(), b.var("b.t0.norm1.bias").unwrap(), 3).unwrap();
    let r = g.relu(r).unwrap();
    let r = g.conv2d(r, b.var("b.conv2.weight").unwrap(), 2, 1).unwrap();
    let r = g.layer_norm(r, b.var("b.t0.norm2.gain").unwrap(), b.var("b.t0.norm2.bias").unwrap(), 3).unwrap();
    let r = g.relu(r).unwrap();
    let r = g.conv2d(r, b.var("b.conv3.weight").unwrap(), 1, 0).unwrap();
    let r = g.layer_norm(r, b.var("b.t0.norm3.gain").unwrap(), b.var("b.t0.norm3.bias").unwrap(), 3).unwrap();
    let sum = g.add(r, s).unwrap();
    let want = g.relu(sum).unwrap();
    assert_eq!(g.value(y), g.value(want));
}

#[test]
fn ventral_chain_reaches_it_shape_at_default_widths() {
    let cfg = ModelConfig::default();
    assert_eq!(cfg.it_grid(), (3, 3));
    // shape walk with the real blocks on a (64, 24, 24) input
    let mut p = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let w = cfg.widths;
    for (i, (name, t)) in [("v2", 2), ("v4", 4), ("it", 2)].into_iter().enumerate() {
        init_cor_block(&mut p, name, CorBlockConfig { in_ch: w[i], out_ch: w[i + 1], bottleneck: w[i + 1] / 4, steps: t }, &mut rng).unwrap();
    }
    let mut g = Graph::new();
    let b = p.bind(&mut g, false);
    let x = g.constant(Tensor::zeros(&[1, 64, 24, 24]));
    let v2 = cor_block_forward(&mut g, &b, "v2", 2, x).unwrap();
    let v4 = cor_block_forward(&mut g, &b, "v4", 4, v2).unwrap();
    let it = cor_block_forward(&mut g, &b, "it", 2, v4).unwrap();
    assert_eq!(g.shape(v2), &[1, 128, 12, 12]);
    assert_eq!(g.shape(v4), &[1, 256, 6, 6]);
    assert_eq!(g.shape(it), &[1, 512, 3, 3]);
}

fn filter_params(in_ch: usize) -> ParamStore<f64> {
    let mut p = ParamStore::new();
    init_filter_gen(&mut p, "fg", in_ch, 3, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    p
}

#[test]
fn dynamic_filters_have_k2_taps_summing_to_one() {
    let p = filter_params(4);
    let mut g = Graph::new();
    let b = p.bind(&mut g, false);
    let a = g.constant(rand_tensor(&[1, 4, 24, 24], -2.0, 2.0, 4));
    let f = generate_dynamic_filters(&mut g, &b, "fg", a).unwrap();
    assert_eq!(g.shape(f), &[1, 9, 24, 24]);
    let v = g.value(f).data();
    for pix in 0..24 * 24 {
        let s: f64 = (0..9).map(|t| v[t * 576 + pix]).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}

#[test]
fn dynamic_filters_change_only_near_a_perturbed_cell() {
    let p = filter_params(2);
    let a = rand_tensor(&[1, 2, 10, 10], -1.0, 1.0, 6);
    let mut b2 = a.clone();
    let (py, px) = (4, 6);
    for c in 0..2 {
        b2.data_mut()[c * 100 + py * 10 + px] += 0.7;
    }
    let filters = |x: Tensor<f64>| {
        let mut g = Graph::new();
        let b = p.bind(&mut g, false);
        let v = g.constant(x);
        let f = generate_dynamic_filters(&mut g, &b, "fg", v).unwrap();
        g.value(f).clone()
    };
    let (fa, fb) = (filters(a), filters(b2));
    for t in 0..9 {
        for y in 0..10usize {
            for x in 0..10usize {
                let i = t * 100 + y * 10 + x;
                let near = y.abs_diff(py) <= 1 && x.abs_diff(px) <= 1;
                if near {
                    assert_ne!(fa.data()[i], fb.data()[i], "tap {t} at ({y},{x}) should move");
                } else {
                    assert_eq!(fa.data()[i], fb.data()[i], "tap {t} at ({y},{x}) should not move");
                }
            }
        }
    }
}

fn dorsal_params() -> ParamStore<f64> {
    let mut p = ParamStore::new();
    init_dorsal(&mut p, 4, 6, 3, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
    p
}

#[test]
fn dorsal_residual_of_identical_constant_maps_is_zero() {
    let p = dorsal_params();
    let mut g = Graph::new();
    let b = p.bind(&mut g, false);
    let c = Tensor::from_fn(&[1, 4, 12, 12], |i| 0.25 + (i / 144) as f64 * 0.5);
    let ft = g.constant(c.clone());
    let fp = g.constant(c);
    let out = dorsal_forward(&mut g, &b, ft, fp, 3).unwrap();
    assert!(g.value(out.residual).data().iter().all(|&v| v == 0.0));
    assert_eq!(g.shape(out.es), &[1, 6, 3, 3]);
}

#[test]
fn dorsal_rejects_mismatched_maps() {
    let p = dorsal_params();
    let mut g = Graph::new();
    let b = p.bind(&mut g, false);
    let ft = g.constant(Tensor::zeros(&[1, 4, 12, 12]));
    let fp = g.constant(Tensor::zeros(&[1, 4, 10, 12]));
    assert!(dorsal_forward(&mut g, &b, ft, fp, 3).is_err());
}

#[test]
fn shifted_pair_has_more_residual_energy_than_static_pair() {
    let p = dorsal_params();
    let base = |x: usize, y: usize| if (x / 3 + y / 3) % 2 == 0 { 1.0 } else { 0.0 };
    let map = |shift: usize| Tensor::from_fn(&[1, 4, 12, 12], move |i| base((i % 12 + shift) % 12, (i / 12) % 12));
    let energy = |prev: Tensor<f64>| {
        let mut g = Graph::new();
        let b = p.bind(&mut g, false);
        let ft = g.constant(map(0));
        let fp = g.constant(prev);
        let out = dorsal_forward(&mut g, &b, ft, fp, 3).unwrap();
        let v = g.value(out.residual).data();
        v.iter().map(|x| x.abs()).sum::<f64>() / v.len() as f64
    };
    assert!(energy(map(2)) > energy(map(0)));
}

#[test]
fn identical_constant_maps_give_zero_residual() {
    let mut g = Graph::<f64>::new();
    let x = Tensor::from_fn(&[1, 3, 6, 6], |i| [0.2, -0.5, 0.7][i / 36]);
    let (t, prev) = (g.constant(x.clone()), g.constant(x));
    let filters = g.constant(rand_tensor(&[1, 9, 6, 6], -1.0, 1.0, 4));
    let r = dorsal_residual(&mut g, t, prev, filters, 3).unwrap();
    assert!(g.value(r).data().iter().all(|&v| v == 0.0));
}

#[test]
fn shape_law_for_multiples_of_32() {
    for (h, w) in [(32, 32), (64, 96), (96, 96), (96, 160)] {
        let cfg = ModelConfig { input_height: h, input_width: w, ..ModelConfig::default() };
        assert_eq!(cfg.it_grid(), (h / 32, w / 32), "{h}x{w}");
    }
}

#[test]
fn first_learned_stage_is_v1() {
    let p = BidModel::new(ModelConfig::default()).unwrap().init::<f32>(0);
    assert!(p.names().all(|n| !n.starts_with("retina") && !n.starts_with("lgn")));
    assert!(p.contains("v1.conv7.weight"));
}

#[test]
fn frame_tensor_normalizes_and_orders_channels() {
    let rgb = vec![255u8, 0, 51, 0, 255, 102];
    let t: Tensor<f64> = frame_tensor(&rgb, 2, 1);
    assert_eq!(t.shape(), &[3, 1, 2]);
    assert_eq!(t.data(), &[1.0, 0.0, 0.0, 1.0, 0.2, 0.4]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn embedding_shapes_do_not_depend_on_content(seed in 0u64..1000, lo in 0.0f64..0.5) {
        let model = BidModel::new(tiny_model(Variant::Bid)).unwrap();
        let p = model.init::<f64>(3);
        let mut g = Graph::new();
        let b = p.bind(&mut g, false);
        let f = g.constant(rand_tensor(&[2, 3, 16, 16], lo, 1.0, seed));
        let pv = g.constant(rand_tensor(&[2, 3, 16, 16], lo, 1.0, seed + 1));
        let c = g.constant(one_hot_batch(&[NavCommand::Left, NavCommand::Right]));
        let out = model.forward(&mut g, &b, f, pv, c).unwrap();
        let (ih, iw) = model.cfg.it_grid();
        let (eh, ew) = model.cfg.es_grid();
        prop_assert_eq!(g.shape(out.it), &[2, 8, ih, iw]);
        prop_assert_eq!(g.shape(out.dorsal.unwrap().es), &[2, 4, eh, ew]);
        prop_assert!(g.value(out.it).is_finite());
    }

    #[test]
    fn constant_pair_residual_is_zero(vals in proptest::collection::vec(-3.0f64..3.0, 4)) {
        let p = dorsal_params();
        let mut g = Graph::new();
        let b = p.bind(&mut g, false);
        let c = Tensor::from_fn(&[1, 4, 8, 8], |i| vals[i / 64]);
        let ft = g.constant(c.clone());
        let fp = g.constant(c);
        let out = dorsal_forward(&mut g, &b, ft, fp, 3).unwrap();
        prop_assert!(g.value(out.residual).data().iter().all(|&v| v == 0.0));
    }
}
