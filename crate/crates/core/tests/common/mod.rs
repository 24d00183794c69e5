#![allow(dead_code)]

use psd_core::data::{gen_synthetic, Dataset, SyntheticSpec};
use psd_core::{Graph, ModelBundle, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

pub trait Params {
    fn tensors(&mut self) -> Vec<&mut Tensor>;
}

impl Params for Vec<Tensor> {
    fn tensors(&mut self) -> Vec<&mut Tensor> {
        self.iter_mut().collect()
    }
}

impl Params for ModelBundle {
    fn tensors(&mut self) -> Vec<&mut Tensor> {
        self.params_mut()
    }
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(shape, data).unwrap().with_grad()
}

/// Wraps a graph builder into a loss closure over a list of tensors.
pub fn graph_loss<F>(build: F) -> impl FnMut(&mut Vec<Tensor>, Eval) -> f64
where
    F: for<'p> Fn(&mut Graph<'p>, &[Var]) -> Var,
{
    move |ps: &mut Vec<Tensor>, eval: Eval| {
        let back = eval == Eval::Backward;
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter_mut().map(|p| g.param(p)).collect();
        let l = build(&mut g, &vars);
        let v = g.scalar_value(l);
        if back {
            g.backward(l).unwrap();
        }
        v
    }
}

#[derive(Debug)]
pub struct GradReport {
    pub probes: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Eval {
    /// Evaluate and accumulate analytic gradients.
    Backward,
    /// Value only, while tensor `p` is being perturbed.
    Probe(usize),
}

/// Compares the analytic gradient with a central finite difference on
/// `probes` randomly chosen scalar parameters.
pub fn gradcheck<S: Params>(
    state: &mut S,
    mut loss: impl FnMut(&mut S, Eval) -> f64,
    probes: usize,
    seed: u64,
) -> GradReport {
    for t in state.tensors() {
        t.zero_grad();
    }
    loss(state, Eval::Backward);
    let analytic: Vec<Vec<f64>> = state
        .tensors()
        .into_iter()
        .map(|t| t.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    let sizes: Vec<usize> = analytic.iter().map(Vec::len).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..probes {
        let mut flat = rng.random_range(0..total);
        let mut p = 0;
        while flat >= sizes[p] {
            flat -= sizes[p];
            p += 1;
        }
        let orig = state.tensors()[p].data()[flat];
        state.tensors()[p].data_mut()[flat] = orig + FD_STEP;
        let up = loss(state, Eval::Probe(p));
        state.tensors()[p].data_mut()[flat] = orig - FD_STEP;
        let down = loss(state, Eval::Probe(p));
        state.tensors()[p].data_mut()[flat] = orig;
        let numeric = (up - down) / (2.0 * FD_STEP);
        let a = analytic[p][flat];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(err);
    }
    GradReport {
        probes,
        max_rel_err: worst,
    }
}

pub fn small_spec(per_class: usize, test_per_class: usize, seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        train_per_class: per_class,
        test_per_class,
        seed,
        ..SyntheticSpec::default()
    }
}

pub fn small_dataset(per_class: usize, test_per_class: usize, seed: u64) -> Dataset {
    gen_synthetic(&small_spec(per_class, test_per_class, seed)).unwrap()
}

pub mod cases;
