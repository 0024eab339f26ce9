use limm_core::data::CrowdScene;
use limm_core::windowing::*;
use limm_tensor::{Graph, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn ramp(c: usize, h: usize, w: usize) -> Tensor {
    Tensor::from_fn(&[c, h, w], |i| (i as f64 * 0.37).sin())
}

#[test]
fn exact_multiple_needs_no_padding() {
    let g = partition(&ramp(3, 256, 256), 128).unwrap();
    assert_eq!(g.windows.shape(), [4, 3, 128, 128]);
    assert_eq!(g.pad, (0, 0));
    assert_eq!(g.grid, (2, 2));
}

#[test]
fn padded_grid_folds_back_exactly() {
    let x = ramp(3, 300, 200);
    let g = partition(&x, 128).unwrap();
    assert_eq!(g.windows.shape(), [6, 3, 128, 128]);
    assert_eq!(g.pad, (84, 56));
    assert_eq!(fold(&g).unwrap(), x);
}

#[test]
fn windows_are_row_major_tiles() {
    let x = Tensor::from_fn(&[1, 4, 6], |i| i as f64);
    let g = partition(&x, 2).unwrap();
    // Window 4 is row 1, column 1: pixels (2..4, 2..4).
    assert_eq!(&g.windows.data()[4 * 4..5 * 4], &[14.0, 15.0, 20.0, 21.0]);
}

#[test]
fn single_window_is_identity() {
    let x = ramp(2, 8, 8);
    let g = partition(&x, 8).unwrap();
    assert_eq!(g.windows.data(), x.data());
    assert_eq!(fold(&g).unwrap(), x);
}

#[test]
fn constant_windows_fold_to_constant_map() {
    let g = WindowGrid {
        windows: Tensor::full(&[6, 2, 4, 4], 1.5),
        ws: 4,
        grid: (2, 3),
        pad: (1, 2),
        orig_shape: (2, 7, 10),
        shift_offset: (0, 0),
    };
    assert!(fold(&g).unwrap().data().iter().all(|&v| v == 1.5));
}

#[test]
fn inconsistent_grid_is_rejected() {
    let mut g = partition(&ramp(1, 8, 8), 4).unwrap();
    g.pad = (1, 0);
    assert!(fold(&g).is_err());
    assert!(partition(&ramp(1, 8, 8), 0).is_err());
}

#[test]
fn shift_examples() {
    let x = ramp(2, 5, 7);
    assert_eq!(cyclic_shift(&x, 0, 0).unwrap(), x);
    assert_eq!(cyclic_shift(&x, 5, 7).unwrap(), x);
    let s = cyclic_shift(&x, 1, 2).unwrap();
    // out[y][x] = in[y - 1][x - 2]
    assert_eq!(s.data()[(0 * 5 + 1) * 7 + 2], x.data()[0]);
    assert_eq!(unshift(&s, 1, 2).unwrap(), x);
}

#[test]
fn shifted_partition_folds_back_exactly() {
    let x = ramp(2, 13, 9);
    let g = partition_shifted(&x, 4, -2, -2).unwrap();
    assert_eq!(g.shift_offset, (-2, -2));
    assert_eq!(fold(&g).unwrap(), x);
}

#[test]
fn graph_partition_and_fold_match_tensor_versions() {
    let x = ramp(3, 10, 7);
    let layout = WindowLayout { channels: 3, rows: 3, cols: 2, side: 4 };
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let stack = partition_var(&mut g, v, &layout).unwrap();
    assert_eq!(g.value(stack), &partition(&x, 4).unwrap().windows);
    let map = fold_var(&mut g, stack, &layout).unwrap();
    let padded = g.value(map).clone();
    for c in 0..3 {
        for y in 0..12 {
            for xx in 0..8 {
                let expect = if y < 10 && xx < 7 { x.data()[(c * 10 + y) * 7 + xx] } else { 0.0 };
                assert_eq!(padded.data()[(c * 12 + y) * 8 + xx], expect);
            }
        }
    }
}

#[test]
fn feature_stack_select_agrees_between_layouts() {
    let x = ramp(2, 8, 12);
    let layout = WindowLayout { channels: 2, rows: 2, cols: 3, side: 4 };
    let mut g = Graph::new();
    let map = g.constant(x.clone().reshape(&[1, 2, 8, 12]).unwrap());
    let stack = partition_var(&mut g, map, &layout).unwrap();
    let whole = FeatureStack { var: map, layout, windowed: false };
    let windowed = FeatureStack { var: stack, layout, windowed: true };
    let a = whole.select(&mut g, &[4, 0]).unwrap();
    let b = windowed.select(&mut g, &[4, 0]).unwrap();
    assert_eq!(g.value(a), g.value(b));
    assert!(windowed.select(&mut g, &[6]).is_err());
}

fn scene_with(points: Vec<[f64; 2]>, h: usize, w: usize) -> CrowdScene {
    CrowdScene::new(Tensor::zeros(&[3, h, w]), points, None).unwrap()
}

#[test]
fn window_counts_use_half_open_bounds() {
    let counts = window_counts(&[[3.999, 0.0], [4.0, 0.0], [7.5, 7.5], [0.0, 4.0]], 8, 8, 4).unwrap();
    assert_eq!(counts, vec![1, 1, 1, 1]);
}

#[test]
fn sampling_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let empty = scene_with(Vec::new(), 256, 256);
    let picked = sample_windows(&empty, 64, 5, &mut rng).unwrap();
    assert_eq!(picked.len(), 5);
    assert!(picked.iter().all(|w| w.count == 0));
    let mut idx: Vec<usize> = picked.iter().map(|w| w.index).collect();
    idx.sort();
    idx.dedup();
    assert_eq!(idx.len(), 5);
    assert!(sample_windows(&empty, 64, 17, &mut rng).is_err());
    assert_eq!(sample_windows(&empty, 64, 16, &mut rng).unwrap().len(), 16);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn partition_fold_roundtrip(c in 1usize..4, h in 1usize..40, w in 1usize..40, ws in 1usize..17, seed in any::<u64>()) {
        let x = Tensor::from_fn(&[c, h, w], |i| ((i as u64).wrapping_mul(seed | 1) % 1000) as f64 / 7.0);
        let g = partition(&x, ws).unwrap();
        prop_assert_eq!(g.windows.shape()[0], g.grid.0 * g.grid.1);
        prop_assert_eq!(g.grid.0 * ws, h + g.pad.0);
        prop_assert_eq!(fold(&g).unwrap(), x);
    }

    #[test]
    fn shift_unshift_roundtrip(c in 1usize..3, h in 1usize..30, w in 1usize..30, dy in -60i64..60, dx in -60i64..60) {
        let x = ramp(c, h, w);
        prop_assert_eq!(unshift(&cyclic_shift(&x, dy, dx).unwrap(), dy, dx).unwrap(), x);
    }

    #[test]
    fn counts_partition_annotations(seed in any::<u64>(), n in 0usize..80, h in 8usize..100, w in 8usize..100, ws in 4usize..40) {
        let mut r = limm_tensor::cases::SplitMix::new(seed);
        let pts: Vec<[f64; 2]> = (0..n).map(|_| [r.uniform(0.0, w as f64), r.uniform(0.0, h as f64)]).collect();
        let counts = window_counts(&pts, h, w, ws).unwrap();
        prop_assert_eq!(counts.iter().sum::<usize>(), n);
    }
}
