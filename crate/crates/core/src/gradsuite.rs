//! Randomised gradient-check cases for the model components and losses.

use limm_tensor::cases::{project, SplitMix};
use limm_tensor::gradcheck::DEFAULT_STEP;
use limm_tensor::{finite_diff_check, GradCheckReport, Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{convnext_block, BlockParams};
use crate::contrastive::{wwcl_dl_loss, ProjectionPair, QueueSnapshot, WeightFn};
use crate::heads::{bayesian_loss, CountingHead, Gsa, GsaConfig};
use crate::params::{Bound, Init, ParamStore};

type RunFn = Box<dyn Fn(u64, f64) -> limm_tensor::Result<GradCheckReport>>;

/// A gradient check whose random instance is drawn from a seed. The instance
/// may carry non-differentiable data (points, levels) beside the inputs.
pub struct ComponentCase {
    pub name: &'static str,
    run: RunFn,
}

impl ComponentCase {
    fn new<A: 'static>(
        name: &'static str,
        instance: impl Fn(&mut SplitMix) -> (Vec<Tensor>, A) + 'static,
        build: impl Fn(&mut Graph, &[Var], &A) -> limm_tensor::Result<Var> + 'static,
    ) -> Self {
        let run = move |seed: u64, tol: f64| {
            let (inputs, aux) = instance(&mut SplitMix::new(seed));
            finite_diff_check(|g, v| build(g, v, &aux), &inputs, DEFAULT_STEP, tol)
        };
        Self { name, run: Box::new(run) }
    }

    pub fn check(&self, seed: u64, tol: f64) -> limm_tensor::Result<GradCheckReport> {
        (self.run)(seed, tol)
    }

    pub fn worst_over(&self, seeds: std::ops::Range<u64>, tol: f64) -> limm_tensor::Result<f64> {
        let mut worst = 0.0f64;
        for s in seeds {
            worst = worst.max(self.check(s, tol)?.worst());
        }
        Ok(worst)
    }
}

/// Fresh random values for every parameter of `store`, in store order.
fn random_params(store: &ParamStore, r: &mut SplitMix) -> Vec<Tensor> {
    store.iter().map(|(_, p)| r.tensor(p.value.shape(), -0.8, 0.8)).collect()
}

fn template<T>(build: impl FnOnce(&mut ParamStore, &mut Init) -> T) -> (ParamStore, T) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let out = build(&mut store, &mut Init(&mut rng));
    (store, out)
}

/// Splits the checked inputs into the component's parameters and the rest.
fn bind_prefix(v: &[Var], n_params: usize) -> (Bound, &[Var]) {
    (Bound::from_vars(v[..n_params].to_vec()), &v[n_params..])
}

fn unit_rows(r: &mut SplitMix, n: usize, c: usize) -> Tensor {
    let mut t = r.tensor(&[n, c], -1.0, 1.0);
    for row in t.data_mut().chunks_mut(c) {
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        row.iter_mut().for_each(|x| *x /= norm);
    }
    t
}

pub fn component_cases() -> Vec<ComponentCase> {
    let mut cases = Vec::new();

    let (store, block) = template(|s, i| BlockParams::new(s, i, "b", 4, 7, 1e-6));
    let n = store.len();
    cases.push(ComponentCase::new(
        "convnext_block",
        {
            let store = store.clone();
            move |r| {
                let mut v = random_params(&store, r);
                v.push(r.tensor(&[1, 4, 5, 4], -1.0, 1.0));
                (v, ())
            }
        },
        move |g, v, _| {
            let (p, rest) = bind_prefix(v, n);
            let y = convnext_block(g, &p, &block, rest[0])?;
            project(g, y)
        },
    ));

    // Local branch: backbone features concatenated with the GSA output.
    let (store, head) = template(|s, i| CountingHead::new(s, i, "h1", 16).expect("valid width"));
    let n = store.len();
    cases.push(ComponentCase::new(
        "counting_head_local",
        {
            let store = store.clone();
            move |r| {
                let mut v = random_params(&store, r);
                v.push(r.tensor(&[2, 8, 2, 2], -1.0, 1.0));
                v.push(r.tensor(&[2, 8, 2, 2], -1.0, 1.0));
                (v, ())
            }
        },
        move |g, v, _| {
            let (p, rest) = bind_prefix(v, n);
            let cat = g.concat(&[rest[0], rest[1]], 1)?;
            let y = head.forward_raw(g, &p, cat)?;
            project(g, y)
        },
    ));

    let (store, head) = template(|s, i| CountingHead::new(s, i, "h2", 16).expect("valid width"));
    let n = store.len();
    cases.push(ComponentCase::new(
        "counting_head_global",
        {
            let store = store.clone();
            move |r| {
                let mut v = random_params(&store, r);
                v.push(r.tensor(&[1, 16, 3, 2], -1.0, 1.0));
                (v, ())
            }
        },
        move |g, v, _| {
            let (p, rest) = bind_prefix(v, n);
            let y = head.forward_raw(g, &p, rest[0])?;
            project(g, y)
        },
    ));

    // The key bias shifts every score of a query equally, so softmax cancels
    // it and its gradient is identically zero; it rides along as data.
    let (store, gsa) = template(|s, i| Gsa::new(s, i, "gsa", GsaConfig { heads: 2, d_model: 8 }).expect("divisible"));
    let kb = store.find("gsa.k.b").expect("key bias").index();
    cases.push(ComponentCase::new(
        "gsa",
        {
            let store = store.clone();
            move |r| {
                let mut v = random_params(&store, r);
                let bias = v.remove(kb);
                v.push(r.tensor(&[3, 8, 2, 2], -1.0, 1.0));
                (v, bias)
            }
        },
        move |g, v, bias| {
            let mut vars = v[..v.len() - 1].to_vec();
            vars.insert(kb, g.constant(bias.clone()));
            let out = gsa.forward(g, &Bound::from_vars(vars), v[v.len() - 1])?;
            project(g, out.out)
        },
    ));

    let (store, pair) = template(|s, i| ProjectionPair::new(s, i, "proj", 6, 4, 0.99).expect("valid momentum"));
    let n = store.len();
    cases.push(ComponentCase::new(
        "projection_query",
        {
            let store = store.clone();
            move |r| {
                let mut v = random_params(&store, r);
                v.push(r.tensor(&[3, 6, 2, 2], -1.0, 1.0));
                (v, ())
            }
        },
        move |g, v, _| {
            let (p, rest) = bind_prefix(v, n);
            let y = pair.q.forward(g, &p, rest[0])?;
            project(g, y)
        },
    ));

    cases.push(ComponentCase::new(
        "bayesian_loss",
        |r| {
            let points: Vec<[f64; 2]> = (0..3).map(|_| [r.uniform(0.0, 5.0), r.uniform(0.0, 4.0)]).collect();
            (vec![r.tensor(&[1, 1, 4, 5], 0.0, 0.4)], points)
        },
        |g, v, points| Ok(bayesian_loss(g, v[0], points, 1.0)?),
    ));

    cases.push(ComponentCase::new(
        "wwcl_dl_loss",
        |r| {
            let levels_k: Vec<usize> = (0..9).map(|i| i % 4).collect();
            let snapshot = QueueSnapshot { keys: unit_rows(r, 9, 5), levels: levels_k };
            let levels_q: Vec<usize> = (0..4).map(|_| (r.next_u64() % 4) as usize).collect();
            (vec![r.tensor(&[4, 5], -1.0, 1.0)], (snapshot, levels_q))
        },
        |g, v, (snapshot, levels_q)| {
            let vq = g.l2_normalize(v[0], 1e-12)?;
            Ok(wwcl_dl_loss(g, vq, levels_q, snapshot, 0.5, WeightFn::Pow2, None)?)
        },
    ));

    cases
}
