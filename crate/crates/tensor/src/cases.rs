//! Randomised gradient-check cases for every primitive, shared by the unit
//! tests and the acceptance suite.

use crate::error::Result;
use crate::gradcheck::{finite_diff_check, GradCheckReport, DEFAULT_STEP};
use crate::graph::{Graph, Var, GATHER_ZERO};
use crate::kernels::conv::ConvParams;
use crate::kernels::resample::PoolKind;
use crate::tensor::Tensor;

/// SplitMix64 stream; enough for reproducible test inputs without pulling an
/// RNG crate into the core.
#[derive(Debug, Clone)]
pub struct SplitMix(u64);

impl SplitMix {
    pub fn new(seed: u64) -> Self {
        Self(seed ^ 0x9E37_79B9_7F4A_7C15)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * ((self.next_u64() >> 11) as f64 / (1u64 << 53) as f64)
    }

    pub fn tensor(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        Tensor::from_fn(shape, |_| self.uniform(lo, hi))
    }

    /// Values with magnitude in `[lo, hi)` and random sign, bounded away from zero.
    pub fn tensor_away_from_zero(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        Tensor::from_fn(shape, |_| {
            let m = self.uniform(lo, hi);
            if self.next_u64() & 1 == 0 {
                m
            } else {
                -m
            }
        })
    }
}

/// Reduces `y` to a scalar with a fixed pseudo-random projection so that every
/// output element contributes a distinct weight to the gradient.
pub fn project(g: &mut Graph, y: Var) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let r = SplitMix::new(0xC0FFEE ^ shape.iter().product::<usize>() as u64).tensor(&shape, -1.0, 1.0);
    let r = g.constant(r);
    let prod = g.mul(y, r)?;
    g.sum(prod)
}

type InputFn = Box<dyn Fn(&mut SplitMix) -> Vec<Tensor>>;
type BuildFn = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

pub struct GradCase {
    pub name: &'static str,
    pub inputs: InputFn,
    pub build: BuildFn,
}

impl GradCase {
    pub fn new(
        name: &'static str,
        inputs: impl Fn(&mut SplitMix) -> Vec<Tensor> + 'static,
        build: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static,
    ) -> Self {
        Self { name, inputs: Box::new(inputs), build: Box::new(build) }
    }

    pub fn check(&self, seed: u64, tol: f64) -> Result<GradCheckReport> {
        let mut rng = SplitMix::new(seed);
        let inputs = (self.inputs)(&mut rng);
        finite_diff_check(|g, v| (self.build)(g, v), &inputs, DEFAULT_STEP, tol)
    }

    /// Worst relative error over `seeds` random instances.
    pub fn worst_over(&self, seeds: std::ops::Range<u64>, tol: f64) -> Result<f64> {
        let mut worst = 0.0f64;
        for s in seeds {
            worst = worst.max(self.check(s, tol)?.worst());
        }
        Ok(worst)
    }
}

pub fn primitive_cases() -> Vec<GradCase> {
    vec![
        GradCase::new(
            "conv2d",
            |r| vec![r.tensor(&[2, 2, 5, 5], -1.0, 1.0), r.tensor(&[2, 2, 3, 3], -1.0, 1.0), r.tensor(&[2], -1.0, 1.0)],
            |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), ConvParams::new(1, 1))?;
                project(g, y)
            },
        ),
        GradCase::new(
            "conv2d_strided_dilated_grouped",
            |r| vec![r.tensor(&[1, 4, 7, 6], -1.0, 1.0), r.tensor(&[6, 2, 3, 3], -1.0, 1.0)],
            |g, v| {
                let y = g.conv2d(v[0], v[1], None, ConvParams::new(2, 2).dilation(2).groups(2))?;
                project(g, y)
            },
        ),
        GradCase::new(
            "conv2d_depthwise",
            |r| vec![r.tensor(&[2, 3, 6, 5], -1.0, 1.0), r.tensor(&[3, 1, 7, 7], -1.0, 1.0), r.tensor(&[3], -1.0, 1.0)],
            |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), ConvParams::new(1, 3).groups(3))?;
                project(g, y)
            },
        ),
        GradCase::new(
            "conv2d_depthwise_kernel_wider_than_input",
            |r| vec![r.tensor(&[1, 2, 2, 3], -1.0, 1.0), r.tensor(&[2, 1, 7, 7], -1.0, 1.0)],
            |g, v| {
                let y = g.conv2d(v[0], v[1], None, ConvParams::new(1, 3).groups(2))?;
                project(g, y)
            },
        ),
        GradCase::new(
            "conv_transpose2d",
            |r| vec![r.tensor(&[2, 3, 3, 2], -1.0, 1.0), r.tensor(&[3, 2, 2, 2], -1.0, 1.0), r.tensor(&[2], -1.0, 1.0)],
            |g, v| {
                let y = g.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 0)?;
                project(g, y)
            },
        ),
        GradCase::new(
            "bilinear_upsample2x",
            |r| vec![r.tensor(&[1, 2, 3, 4], -1.0, 1.0)],
            |g, v| {
                let y = g.bilinear_upsample2x(v[0])?;
                project(g, y)
            },
        ),
        GradCase::new(
            "layer_norm",
            |r| vec![r.tensor(&[2, 5, 3], -2.0, 2.0), r.tensor(&[5], 0.5, 1.5), r.tensor(&[5], -0.5, 0.5)],
            |g, v| {
                let y = g.layer_norm(v[0], v[1], v[2], 1, 1e-6)?;
                project(g, y)
            },
        ),
        GradCase::new(
            "gelu",
            |r| vec![r.tensor(&[3, 7], -4.0, 4.0)],
            |g, v| {
                let y = g.gelu(v[0])?;
                project(g, y)
            },
        ),
        GradCase::new(
            "linear",
            |r| vec![r.tensor(&[2, 3, 4], -1.0, 1.0), r.tensor(&[5, 4], -1.0, 1.0), r.tensor(&[5], -1.0, 1.0)],
            |g, v| {
                let y = g.linear(v[0], v[1], Some(v[2]))?;
                project(g, y)
            },
        ),
        GradCase::new(
            "softmax",
            |r| vec![r.tensor(&[3, 4, 2], -3.0, 3.0)],
            |g, v| {
                let y = g.softmax(v[0], 1)?;
                project(g, y)
            },
        ),
        GradCase::new(
            "pool2d_mean",
            |r| vec![r.tensor(&[1, 2, 6, 6], -1.0, 1.0)],
            |g, v| {
                let y = g.pool2d(v[0], PoolKind::Mean, 2, 2)?;
                project(g, y)
            },
        ),
        GradCase::new(
            "pool2d_sum",
            |r| vec![r.tensor(&[2, 1, 6, 4], -1.0, 1.0)],
            |g, v| {
                let y = g.pool2d(v[0], PoolKind::Sum, 2, 2)?;
                project(g, y)
            },
        ),
        GradCase::new(
            "pool2d_global_mean",
            |r| vec![r.tensor(&[2, 3, 4, 5], -1.0, 1.0)],
            |g, v| {
                let y = g.pool2d(v[0], PoolKind::GlobalMean, 0, 0)?;
                project(g, y)
            },
        ),
        GradCase::new(
            "l2_normalize",
            |r| vec![r.tensor_away_from_zero(&[4, 6], 0.2, 1.0)],
            |g, v| {
                let y = g.l2_normalize(v[0], 1e-12)?;
                project(g, y)
            },
        ),
        GradCase::new(
            "relu",
            |r| vec![r.tensor_away_from_zero(&[5, 5], 0.1, 2.0)],
            |g, v| {
                let y = g.relu(v[0])?;
                project(g, y)
            },
        ),
        GradCase::new(
            "abs",
            |r| vec![r.tensor_away_from_zero(&[5, 5], 0.1, 2.0)],
            |g, v| {
                let y = g.abs(v[0])?;
                project(g, y)
            },
        ),
        GradCase::new(
            "elementwise_arith",
            |r| vec![r.tensor(&[3, 4], -1.0, 1.0), r.tensor(&[3, 4], -1.0, 1.0)],
            |g, v| {
                let p = g.mul(v[0], v[1])?;
                let s = g.add(p, v[0])?;
                let d = g.sub(s, v[1])?;
                let d = g.scale(d, -1.5)?;
                let d = g.add_scalar(d, 0.25)?;
                let m = g.mean(d)?;
                let t = project(g, d)?;
                g.add(m, t)
            },
        ),
        GradCase::new(
            "channel_scale",
            |r| vec![r.tensor(&[2, 3, 2, 2], -1.0, 1.0), r.tensor(&[3], -1.0, 1.0)],
            |g, v| {
                let y = g.channel_scale(v[0], v[1])?;
                project(g, y)
            },
        ),
        GradCase::new(
            "matmul",
            |r| vec![r.tensor(&[2, 3, 4], -1.0, 1.0), r.tensor(&[2, 4, 5], -1.0, 1.0)],
            |g, v| {
                let y = g.matmul(v[0], v[1])?;
                project(g, y)
            },
        ),
        GradCase::new(
            "reshape_permute_concat_narrow",
            |r| vec![r.tensor(&[2, 3, 4], -1.0, 1.0), r.tensor(&[2, 1, 4], -1.0, 1.0)],
            |g, v| {
                let c = g.concat(&[v[0], v[1]], 1)?;
                let p = g.permute(c, &[2, 0, 1])?;
                let n = g.narrow(p, 2, 1, 3)?;
                let y = g.reshape(n, &[4, 6])?;
                let y = g.sin(y)?;
                project(g, y)
            },
        ),
        GradCase::new(
            "gather",
            |r| vec![r.tensor(&[3, 4], -1.0, 1.0)],
            |g, v| {
                let index: Vec<usize> = (0..15).map(|i| if i % 5 == 4 { GATHER_ZERO } else { (i * 7) % 12 }).collect();
                let y = g.gather(v[0], index.into(), &[3, 5])?;
                project(g, y)
            },
        ),
    ]
}
