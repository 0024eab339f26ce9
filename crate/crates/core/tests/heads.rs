use limm_core::heads::*;
use limm_core::params::{BindMode, Init, ParamStore};
use limm_tensor::cases::SplitMix;
use limm_tensor::{Graph, Tensor};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn gsa(heads: usize, d_model: usize) -> (ParamStore, Gsa) {
    let mut store = ParamStore::new();
    let gsa = Gsa::new(&mut store, &mut Init(&mut ChaCha8Rng::seed_from_u64(1)), "gsa", GsaConfig { heads, d_model }).unwrap();
    (store, gsa)
}

#[test]
fn single_window_attention_is_trivial() {
    let (store, gsa) = gsa(2, 8);
    let mut g = Graph::new();
    let p = store.bind(&mut g, BindMode::Frozen);
    let x = g.constant(SplitMix::new(0).tensor(&[1, 8, 3, 3], -1.0, 1.0));
    let out = gsa.forward(&mut g, &p, x).unwrap();
    assert_eq!(g.shape(out.attention), [2, 9, 1]);
    assert!(g.value(out.attention).data().iter().all(|&a| a == 1.0));
    assert_eq!(g.shape(out.out), [1, 8, 3, 3]);
}

#[test]
fn attention_rows_sum_to_one() {
    let (store, gsa) = gsa(4, 16);
    let mut g = Graph::new();
    let p = store.bind(&mut g, BindMode::Frozen);
    let x = g.constant(SplitMix::new(1).tensor(&[5, 16, 2, 2], -2.0, 2.0));
    let out = gsa.forward(&mut g, &p, x).unwrap();
    for row in g.value(out.attention).data().chunks(5) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn gsa_mixes_windows() {
    let (store, gsa) = gsa(2, 8);
    let base = SplitMix::new(2).tensor(&[3, 8, 2, 2], -1.0, 1.0);
    let mut other = base.clone();
    other.data_mut()[0] += 0.5;
    let run = |t: &Tensor| {
        let mut g = Graph::new();
        let p = store.bind(&mut g, BindMode::Frozen);
        let x = g.constant(t.clone());
        let out = gsa.forward(&mut g, &p, x).unwrap();
        g.value(out.out).data()[32..64].to_vec()
    };
    // Window 0 was perturbed; window 1 sees it through the shared keys.
    assert_ne!(run(&base), run(&other));
}

#[test]
fn key_bias_gradient_vanishes() {
    let (store, gsa) = gsa(2, 8);
    let mut g = Graph::new();
    let p = store.bind(&mut g, BindMode::Train);
    let x = g.constant(SplitMix::new(3).tensor(&[4, 8, 2, 2], -1.0, 1.0));
    let out = gsa.forward(&mut g, &p, x).unwrap();
    let w = g.constant(SplitMix::new(4).tensor(&[4, 8, 2, 2], -1.0, 1.0));
    let y = g.mul(out.out, w).unwrap();
    let loss = g.sum(y).unwrap();
    let grads = g.backward(loss).unwrap();
    let kb = grads.get(p.get(store.find("gsa.k.b").unwrap())).unwrap();
    let qb = grads.get(p.get(store.find("gsa.q.b").unwrap())).unwrap();
    assert!(kb.data().iter().all(|v| v.abs() < 1e-12));
    assert!(qb.data().iter().any(|v| v.abs() > 1e-6));
}

#[test]
fn indivisible_width_is_rejected() {
    let mut store = ParamStore::new();
    assert!(Gsa::new(&mut store, &mut Init(&mut ChaCha8Rng::seed_from_u64(0)), "g", GsaConfig { heads: 3, d_model: 8 }).is_err());
}

#[test]
fn counting_head_quadruples_and_clamps() {
    let mut store = ParamStore::new();
    let head = CountingHead::new(&mut store, &mut Init(&mut ChaCha8Rng::seed_from_u64(2)), "h", 16).unwrap();
    let mut g = Graph::new();
    let p = store.bind(&mut g, BindMode::Frozen);
    let x = g.constant(SplitMix::new(5).tensor(&[2, 16, 3, 2], -3.0, 3.0));
    let y = head.forward(&mut g, &p, x).unwrap();
    assert_eq!(g.shape(y), [2, 1, 12, 8]);
    assert!(g.value(y).data().iter().all(|&v| v >= 0.0));
    let raw = head.forward_raw(&mut g, &p, x).unwrap();
    assert!(g.value(raw).data().iter().any(|&v| v < 0.0));
    assert!(CountingHead::new(&mut ParamStore::new(), &mut Init(&mut ChaCha8Rng::seed_from_u64(0)), "h", 6).is_err());
}

#[test]
fn large_head_filter_examples() {
    let pts: Vec<[f64; 2]> = (0..6).map(|i| [i as f64, 0.0]).collect();
    assert!(filter_large_heads(&pts, &[10.0; 6], LARGE_HEAD_PX).unwrap().is_empty());
    assert_eq!(filter_large_heads(&pts, &[60.0; 6], LARGE_HEAD_PX).unwrap(), pts);
    let sizes = [10.0, 55.0, 50.0, 80.0, 49.9, 50.1];
    let by_hand = vec![pts[1], pts[3], pts[5]];
    assert_eq!(filter_large_heads(&pts, &sizes, LARGE_HEAD_PX).unwrap(), by_hand);
    assert!(filter_large_heads(&pts, &sizes[..2], LARGE_HEAD_PX).is_err());
}

fn loss_value(density: &Tensor, points: &[[f64; 2]], sigma: f64) -> f64 {
    let mut g = Graph::new();
    let d = g.constant(density.clone());
    let l = bayesian_loss(&mut g, d, points, sigma).unwrap();
    g.value(l).item()
}

#[test]
fn perfect_prediction_has_zero_loss() {
    let (h, w) = (24, 24);
    let points = [[2.5, 3.5], [14.5, 4.5], [6.5, 18.5], [20.5, 20.5]];
    let mut d = Tensor::zeros(&[1, 1, h, w]);
    for &[x, y] in &points {
        d.data_mut()[y as usize * w + x as usize] = 1.0;
    }
    assert!(loss_value(&d, &points, 1.0) < 1e-6);
}

#[test]
fn background_loss_is_total_mass() {
    let d = Tensor::full(&[1, 1, 3, 4], 0.25);
    assert!((loss_value(&d, &[], 1.0) - 3.0).abs() < 1e-12);
}

#[test]
fn shared_blob_splits_evenly() {
    let mut d = Tensor::zeros(&[1, 1, 3, 7]);
    d.data_mut()[7 + 3] = 1.0;
    let points = [[2.5, 1.5], [4.5, 1.5]];
    let post = bayesian_posterior(&points, 3, 7, 1.0).unwrap();
    assert!((post.data()[10] - 0.5).abs() < 1e-15);
    assert!((loss_value(&d, &points, 1.0) - 1.0).abs() < 1e-12);
}

#[test]
fn nonpositive_sigma_is_rejected() {
    let mut g = Graph::new();
    let d = g.constant(Tensor::zeros(&[1, 1, 2, 2]));
    assert!(bayesian_loss(&mut g, d, &[[0.5, 0.5]], 0.0).is_err());
}

#[test]
fn total_loss_combines_terms() {
    let mut g = Graph::new();
    let fb = g.constant(Tensor::scalar(2.0));
    let gb = g.constant(Tensor::scalar(3.0));
    let c = g.constant(Tensor::scalar(0.5));
    let plain = total_loss(&mut g, fb, Some(gb), Some(c), 0.0, 0.0).unwrap();
    assert_eq!(g.value(plain).item(), 2.0);
    let full = total_loss(&mut g, fb, Some(gb), Some(c), 1.0, 10.0).unwrap();
    assert_eq!(g.value(full).item(), 10.0);
    let only = total_loss(&mut g, fb, None, None, 1.0, 10.0).unwrap();
    assert_eq!(g.value(only).item(), 2.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bayesian_loss_ignores_annotation_order(seed in any::<u64>(), n in 1usize..8) {
        let mut r = SplitMix::new(seed);
        let d = r.tensor(&[1, 1, 6, 9], 0.0, 0.3);
        let mut pts: Vec<[f64; 2]> = (0..n).map(|_| [r.uniform(0.0, 9.0), r.uniform(0.0, 6.0)]).collect();
        let a = loss_value(&d, &pts, 1.0);
        pts.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert!((a - loss_value(&d, &pts, 1.0)).abs() < 1e-12);
    }

    #[test]
    fn bayesian_loss_is_translation_equivariant(seed in any::<u64>(), dy in 0usize..4, dx in 0usize..4) {
        // Mass and points live in the interior so that shifting loses nothing.
        let mut r = SplitMix::new(seed);
        let (h, w) = (16, 16);
        let mut d = Tensor::zeros(&[1, 1, h, w]);
        for y in 4..8 {
            for x in 4..8 {
                d.data_mut()[y * w + x] = r.uniform(0.0, 0.5);
            }
        }
        let pts: Vec<[f64; 2]> = (0..3).map(|_| [r.uniform(4.0, 8.0), r.uniform(4.0, 8.0)]).collect();
        let mut shifted = Tensor::zeros(&[1, 1, h, w]);
        for y in 0..h - dy {
            for x in 0..w - dx {
                shifted.data_mut()[(y + dy) * w + x + dx] = d.data()[y * w + x];
            }
        }
        let moved: Vec<[f64; 2]> = pts.iter().map(|p| [p[0] + dx as f64, p[1] + dy as f64]).collect();
        prop_assert!((loss_value(&d, &pts, 1.0) - loss_value(&shifted, &moved, 1.0)).abs() < 1e-9);
    }
}
