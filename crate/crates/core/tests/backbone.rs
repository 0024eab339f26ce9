use limm_core::backbone::*;
use limm_core::params::{BindMode, Init, ParamStore};
use limm_tensor::cases::SplitMix;
use limm_tensor::{Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn build(cfg: BackboneConfig, seed: u64) -> (ParamStore, Backbone) {
    let mut store = ParamStore::new();
    let bb = Backbone::new(cfg, &mut store, &mut Init(&mut ChaCha8Rng::seed_from_u64(seed))).unwrap();
    (store, bb)
}

/// Small shifted config; a layer scale of one makes every block matter.
fn small(shift: bool) -> BackboneConfig {
    BackboneConfig { depths: [2, 1, 1, 1], dims: [8, 12, 16, 20], ws: 32, shift, layer_scale_init: 1.0, ..BackboneConfig::tiny_limm() }
}

fn stage4(store: &ParamStore, bb: &Backbone, image: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let p = store.bind(&mut g, BindMode::Frozen);
    let x = g.constant(image.clone());
    let taps = bb.forward(&mut g, &p, x).unwrap();
    g.value(taps.stage4.var).clone()
}

fn window(t: &Tensor, i: usize) -> &[f64] {
    let per = t.numel() / t.shape()[0];
    &t.data()[i * per..(i + 1) * per]
}

fn poke(image: &Tensor, y: usize, x: usize) -> Tensor {
    let mut t = image.clone();
    let w = t.shape()[2];
    t.data_mut()[y * w + x] += 0.7;
    t
}

#[test]
fn tiny_preset_stage_shapes() {
    let (store, bb) = build(BackboneConfig::tiny(), 0);
    let mut g = Graph::new();
    let p = store.bind(&mut g, BindMode::Frozen);
    let x = g.constant(SplitMix::new(0).tensor(&[3, 128, 128], 0.0, 1.0));
    let taps = bb.forward(&mut g, &p, x).unwrap();
    assert_eq!(g.shape(taps.stage4.var), [4, 128, 2, 2]);
    assert_eq!(g.shape(taps.stage3.var), [4, 64, 4, 4]);
}

#[test]
fn zero_layer_scale_block_is_identity() {
    let mut store = ParamStore::new();
    let block = BlockParams::new(&mut store, &mut Init(&mut ChaCha8Rng::seed_from_u64(1)), "b", 6, 7, 0.0);
    let mut g = Graph::new();
    let p = store.bind(&mut g, BindMode::Frozen);
    let input = SplitMix::new(1).tensor(&[2, 6, 5, 9], -1.0, 1.0);
    let x = g.constant(input.clone());
    let y = convnext_block(&mut g, &p, &block, x).unwrap();
    assert_eq!(g.value(y), &input);
}

#[test]
fn block_preserves_shape_and_checks_channels() {
    let mut store = ParamStore::new();
    let block = BlockParams::new(&mut store, &mut Init(&mut ChaCha8Rng::seed_from_u64(1)), "b", 4, 7, 1e-6);
    let mut g = Graph::new();
    let p = store.bind(&mut g, BindMode::Frozen);
    let x = g.constant(SplitMix::new(2).tensor(&[3, 4, 6, 2], -1.0, 1.0));
    let y = convnext_block(&mut g, &p, &block, x).unwrap();
    assert_eq!(g.shape(y), [3, 4, 6, 2]);
    let bad = g.constant(Tensor::zeros(&[1, 5, 4, 4]));
    assert!(convnext_block(&mut g, &p, &block, bad).is_err());
}

#[test]
fn windows_are_independent_without_shift() {
    let (store, bb) = build(small(false), 2);
    let image = SplitMix::new(3).tensor(&[3, 64, 96], 0.0, 1.0);
    let base = stage4(&store, &bb, &image);
    // Window 4 covers rows 32..64, columns 32..64.
    for (y, x) in [(0, 0), (31, 40), (40, 31), (40, 64), (63, 95)] {
        let out = stage4(&store, &bb, &poke(&image, y, x));
        assert_eq!(window(&out, 4), window(&base, 4), "pixel ({y}, {x}) leaked");
    }
    let inside = stage4(&store, &bb, &poke(&image, 40, 40));
    assert_ne!(window(&inside, 4), window(&base, 4));
}

#[test]
fn shift_reaches_half_a_window() {
    let (store, bb) = build(small(true), 4);
    assert!(bb.cfg.shift_active());
    let image = SplitMix::new(5).tensor(&[3, 96, 96], 0.0, 1.0);
    let base = stage4(&store, &bb, &image);
    // Centre window 4 covers feature cells 8..16 (stride 4). The shifted
    // window above it spans cells 4..12; a 7x7 kernel in block 1 and another
    // in the shifted block 2 each reach 3 cells, so cell 2 just reaches cell
    // 8 and cell 1 does not. Symmetrically on the far side: cells 2..22, or
    // pixels 8..88.
    for (y, x) in [(20, 40), (40, 76), (17, 17), (8, 40), (40, 87)] {
        let out = stage4(&store, &bb, &poke(&image, y, x));
        assert_ne!(window(&out, 4), window(&base, 4), "pixel ({y}, {x}) had no effect");
    }
    for (y, x) in [(7, 40), (40, 88), (0, 0), (95, 95), (50, 3)] {
        let out = stage4(&store, &bb, &poke(&image, y, x));
        assert_eq!(window(&out, 4), window(&base, 4), "pixel ({y}, {x}) leaked");
    }
}

#[test]
fn every_parameter_receives_gradient() {
    for shift in [false, true] {
        let (store, bb) = build(small(shift), 6);
        let mut g = Graph::new();
        let p = store.bind(&mut g, BindMode::Train);
        let x = g.constant(SplitMix::new(7).tensor(&[3, 64, 64], 0.0, 1.0));
        let taps = bb.forward(&mut g, &p, x).unwrap();
        let w = g.constant(SplitMix::new(8).tensor(g.shape(taps.stage4.var), -1.0, 1.0));
        let y = g.mul(taps.stage4.var, w).unwrap();
        let loss = g.sum(y).unwrap();
        let grads = g.backward(loss).unwrap();
        for (id, param) in store.iter() {
            let grad = grads.get(p.get(id)).unwrap_or_else(|| panic!("{} has no gradient", param.name));
            assert!(grad.data().iter().any(|&v| v != 0.0), "{} has a zero gradient", param.name);
        }
    }
}

#[test]
fn configuration_errors() {
    let (store, bb) = build(BackboneConfig::tiny(), 0);
    let mut g = Graph::new();
    let p = store.bind(&mut g, BindMode::Frozen);
    let x = g.constant(Tensor::zeros(&[3, 32, 128]));
    assert!(bb.forward(&mut g, &p, x).is_err());
    assert!(BackboneConfig { ws: 48, ..BackboneConfig::tiny() }.validate().is_err());
    assert!(BackboneConfig { dims: [16, 16, 64, 128], ..BackboneConfig::tiny() }.validate().is_err());
    assert!(BackboneConfig::preset("resnet").is_err());
    assert!(!BackboneConfig { shift: true, ..BackboneConfig::tiny() }.shift_active());
}
