use limm_tensor::cases::{primitive_cases, SplitMix};
use limm_tensor::{
    conv2d, conv_transpose2d, finite_diff_check, ConvParams, CustomOp, Graph, PoolKind, Result, Tensor, TensorError,
};

fn close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "index {i}: {x} vs {y}");
    }
}

#[test]
fn every_primitive_passes_gradient_check_over_100_seeds() {
    for case in primitive_cases() {
        let worst = case.worst_over(0..100, 1e-6).unwrap();
        assert!(worst < 1e-6, "{}: worst relative error {worst:e}", case.name);
    }
}

#[test]
fn conv2d_identity_and_box_filter() {
    let x = SplitMix::new(3).tensor(&[1, 3, 4, 4], -1.0, 1.0);
    let eye = Tensor::from_fn(&[3, 3, 1, 1], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
    let y = conv2d(&x, &eye, Some(&Tensor::zeros(&[3])), ConvParams::default()).unwrap();
    assert_eq!(y, x);

    let y = conv2d(&Tensor::ones(&[1, 1, 5, 5]), &Tensor::ones(&[1, 1, 3, 3]), None, ConvParams::default()).unwrap();
    assert_eq!(y.shape(), &[1, 1, 3, 3]);
    assert!(y.data().iter().all(|&v| v == 9.0));
}

#[test]
fn conv_transpose_unit_pixel_spreads_kernel() {
    let x = Tensor::ones(&[1, 1, 1, 1]);
    let y = conv_transpose2d(&x, &Tensor::ones(&[1, 1, 2, 2]), None, 2, 0).unwrap();
    assert_eq!(y.shape(), &[1, 1, 2, 2]);
    assert_eq!(y.data(), &[1.0; 4]);
}

#[test]
fn conv_transpose_is_adjoint_of_conv() {
    // (input extent, kernel, stride, padding) where the transpose reproduces the extent.
    let configs = [(8, 2, 2, 0), (9, 3, 2, 1), (7, 3, 1, 1), (12, 4, 4, 0), (6, 1, 1, 0)];
    for seed in 0..50u64 {
        for &(n, k, s, p) in &configs {
            let mut r = SplitMix::new(seed);
            let x = r.tensor(&[2, 3, n, n], -1.0, 1.0);
            let w = r.tensor(&[4, 3, k, k], -1.0, 1.0);
            let cx = conv2d(&x, &w, None, ConvParams::new(s, p)).unwrap();
            let y = r.tensor(cx.shape(), -1.0, 1.0);
            let ty = conv_transpose2d(&y, &w, None, s, p).unwrap();
            assert_eq!(ty.shape(), x.shape());
            let lhs = cx.dot(&y).unwrap();
            let rhs = x.dot(&ty).unwrap();
            assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
        }
    }
}

#[test]
fn upsample_examples() {
    let mut g = Graph::new();
    let c = g.constant(Tensor::full(&[1, 2, 3, 5], 7.0));
    let y = g.bilinear_upsample2x(c).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 7.0));

    let one = g.constant(Tensor::full(&[1, 1, 1, 1], -2.5));
    let y = g.bilinear_upsample2x(one).unwrap();
    assert_eq!(g.value(y).data(), &[-2.5; 4]);

    let row = g.constant(Tensor::new(&[1, 1, 1, 2], vec![0.0, 1.0]).unwrap());
    let y = g.bilinear_upsample2x(row).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 1, 2, 4]);
    assert_eq!(&g.value(y).data()[..4], &[0.0, 0.25, 0.75, 1.0]);
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::new();
    let gamma = g.constant(Tensor::ones(&[4]));
    let beta = g.constant(Tensor::zeros(&[4]));
    let x = g.constant(Tensor::full(&[3, 4], 2.0));
    let y = g.layer_norm(x, gamma, beta, 1, 1e-6).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));

    let gamma = g.constant(Tensor::ones(&[2]));
    let beta = g.constant(Tensor::zeros(&[2]));
    let x = g.constant(Tensor::new(&[2], vec![1.0, 3.0]).unwrap());
    let y = g.layer_norm(x, gamma, beta, 0, 1e-12).unwrap();
    close(g.value(y).data(), &[-1.0, 1.0], 1e-9);

    assert!(matches!(g.layer_norm(x, gamma, beta, 0, 0.0), Err(TensorError::InvalidArgument(_))));
}

#[test]
fn normalized_positions_have_zero_mean_unit_variance() {
    let mut g = Graph::new();
    let x = g.constant(SplitMix::new(9).tensor(&[2, 8, 3, 3], -5.0, 5.0));
    let gamma = g.constant(Tensor::ones(&[8]));
    let beta = g.constant(Tensor::zeros(&[8]));
    let y = g.layer_norm(x, gamma, beta, 1, 1e-6).unwrap();
    let y = g.value(y);
    for n in 0..2 {
        for p in 0..9 {
            let vals: Vec<f64> = (0..8).map(|c| y.data()[(n * 8 + c) * 9 + p]).collect();
            let mean = vals.iter().sum::<f64>() / 8.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }
}

#[test]
fn gelu_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(&[3], vec![0.0, 10.0, -10.0]).unwrap());
    let y = g.gelu(x).unwrap();
    let v = g.value(y).data();
    assert_eq!(v[0], 0.0);
    assert!((v[1] - 10.0).abs() < 1e-6);
    assert!(v[2].abs() < 1e-6);
}

#[test]
fn linear_examples() {
    let mut g = Graph::new();
    let x = g.constant(SplitMix::new(1).tensor(&[2, 3], -1.0, 1.0));
    let eye = g.constant(Tensor::from_fn(&[3, 3], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 }));
    let y = g.linear(x, eye, None).unwrap();
    assert_eq!(g.value(y), g.value(x));

    let zero = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::new(&[2], vec![0.5, -4.0]).unwrap());
    let y = g.linear(x, zero, Some(b)).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, -4.0, 0.5, -4.0]);
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[4], 1.3));
    let y = g.softmax(x, 0).unwrap();
    assert_eq!(g.value(y).data(), &[0.25; 4]);

    let base = SplitMix::new(4).tensor(&[5, 6], -3.0, 3.0);
    let a = g.constant(base.clone());
    let b = g.constant(base.map(|v| v + 17.0));
    let ya = g.softmax(a, 1).unwrap();
    let yb = g.softmax(b, 1).unwrap();
    close(g.value(ya).data(), g.value(yb).data(), 1e-12);
    for row in g.value(ya).data().chunks(6) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|&v| v > 0.0 && v < 1.0));
    }
}

#[test]
fn pooling_examples() {
    let mut g = Graph::new();
    let c = g.constant(Tensor::full(&[2, 3, 4, 5], 1.75));
    let y = g.pool2d(c, PoolKind::GlobalMean, 0, 0).unwrap();
    assert_eq!(g.value(y).shape(), &[2, 3, 1, 1]);
    assert!(g.value(y).data().iter().all(|&v| v == 1.75));

    let x = g.constant(SplitMix::new(2).tensor(&[1, 1, 16, 8], 0.0, 1.0));
    let y = g.pool2d(x, PoolKind::Sum, 8, 8).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 1, 2, 1]);
    let top: f64 = g.value(x).data()[..64].iter().sum();
    assert!((g.value(y).data()[0] - top).abs() < 1e-12);
    assert!((g.value(y).sum() - g.value(x).sum()).abs() < 1e-12);
}

#[test]
fn l2_normalize_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(&[2], vec![3.0, 4.0]).unwrap());
    let y = g.l2_normalize(x, 1e-12).unwrap();
    close(g.value(y).data(), &[0.6, 0.8], 1e-15);
    let u = g.constant(Tensor::new(&[3], vec![0.0, 1.0, 0.0]).unwrap());
    let y = g.l2_normalize(u, 1e-12).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 1.0, 0.0]);
}

#[test]
fn backward_of_sum_and_square() {
    let x0 = SplitMix::new(5).tensor(&[3, 4], -2.0, 2.0);
    let mut g = Graph::new();
    let x = g.param(x0.clone());
    let s = g.sum(x).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap(), &Tensor::ones(&[3, 4]));

    let mut g = Graph::new();
    let x = g.param(x0.clone());
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq).unwrap();
    let grads = g.backward(s).unwrap();
    close(grads.get(x).unwrap().data(), x0.map(|v| 2.0 * v).data(), 0.0);
}

#[test]
fn fan_out_accumulates() {
    let mut g = Graph::new();
    let x = g.param(Tensor::new(&[2], vec![1.0, -3.0]).unwrap());
    let a = g.scale(x, 2.0).unwrap();
    let b = g.add(a, x).unwrap();
    let c = g.add(b, x).unwrap();
    let s = g.sum(c).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[4.0, 4.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::new();
    let x = g.param(Tensor::ones(&[3]));
    let y = g.gelu(x).unwrap();
    assert!(matches!(g.backward(y), Err(TensorError::InvalidArgument(_))));
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::new();
    let x = g.param(Tensor::ones(&[2]));
    let c = g.constant(Tensor::ones(&[2]));
    let d = g.detach(x);
    let y = g.mul(x, c).unwrap();
    let y = g.mul(y, d).unwrap();
    let s = g.sum(y).unwrap();
    let grads = g.backward(s).unwrap();
    assert!(grads.get(c).is_none());
    assert!(grads.get(d).is_none());
    assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0]);
}

#[test]
fn non_finite_output_is_an_error() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[2], 1e308));
    assert!(matches!(g.scale(x, 10.0), Err(TensorError::Numeric { op: "scale", .. })));
}

#[test]
fn finite_diff_of_sum_is_exact() {
    let x = SplitMix::new(6).tensor(&[7], -1.0, 1.0);
    let report = finite_diff_check(|g, v| g.sum(v[0]), &[x], 1e-5, 1e-6).unwrap();
    assert!(report.max_abs_err[0] < 1e-10);
    assert!(report.passed());
}

#[test]
fn finite_diff_matches_cosine() {
    let x = SplitMix::new(7).tensor(&[9], -3.0, 3.0);
    let mut g = Graph::new();
    let v = g.param(x.clone());
    let s = g.sin(v).unwrap();
    let l = g.sum(s).unwrap();
    let grads = g.backward(l).unwrap();
    close(grads.get(v).unwrap().data(), x.map(f64::cos).data(), 0.0);
    let report = finite_diff_check(
        |g, v| {
            let s = g.sin(v[0])?;
            g.sum(s)
        },
        &[x],
        1e-5,
        1e-6,
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

/// `sin` with a deliberately wrong reverse rule.
struct BrokenSin;

impl CustomOp for BrokenSin {
    fn name(&self) -> &'static str {
        "broken_sin"
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor> {
        Ok(inputs[0].map(f64::sin))
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let d = inputs[0].data().iter().zip(grad.data()).map(|(x, g)| x.sin() * g).collect();
        Ok(vec![Some(Tensor::new(inputs[0].shape(), d)?)])
    }
}

#[test]
fn finite_diff_detects_corrupted_gradient() {
    let x = SplitMix::new(8).tensor(&[6], -2.0, 2.0);
    let report = finite_diff_check(
        |g, v| {
            let y = g.custom(&[v[0]], Box::new(BrokenSin))?;
            g.sum(y)
        },
        &[x],
        1e-5,
        1e-6,
    )
    .unwrap();
    assert!(!report.passed());
    assert!(report.worst() > 1e-2);
}

#[test]
fn identical_inputs_give_bit_identical_outputs_and_gradients() {
    let run = || {
        let mut r = SplitMix::new(42);
        let mut g = Graph::new();
        let x = g.param(r.tensor(&[2, 4, 6, 6], -1.0, 1.0));
        let w = g.param(r.tensor(&[4, 1, 7, 7], -1.0, 1.0));
        let y = g.conv2d(x, w, None, ConvParams::new(1, 3).groups(4)).unwrap();
        let y = g.gelu(y).unwrap();
        let l = g.mean(y).unwrap();
        let grads = g.backward(l).unwrap();
        (g.value(y).clone(), grads.get(x).unwrap().clone(), grads.get(w).unwrap().clone())
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0.data(), b.0.data());
    assert_eq!(a.1.data(), b.1.data());
    assert_eq!(a.2.data(), b.2.data());
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(seed in any::<u64>(), rows in 1usize..6, cols in 1usize..9, spread in 0.1f64..50.0) {
            let mut g = Graph::new();
            let x = g.constant(SplitMix::new(seed).tensor(&[rows, cols], -spread, spread));
            let y = g.softmax(x, 1).unwrap();
            for row in g.value(y).data().chunks(cols) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn sum_pool_conserves_mass(seed in any::<u64>(), blocks_h in 1usize..5, blocks_w in 1usize..5, k in 1usize..5) {
            let mut g = Graph::new();
            let x = g.constant(SplitMix::new(seed).tensor(&[1, 2, blocks_h * k, blocks_w * k], 0.0, 1.0));
            let y = g.pool2d(x, PoolKind::Sum, k, k).unwrap();
            prop_assert!((g.value(y).sum() - g.value(x).sum()).abs() < 1e-12);
        }
    }
}
