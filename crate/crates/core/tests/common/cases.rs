//! Gradient-check cases shared by the gradcheck and acceptance targets.

use psd_core::distill::{objective_loss, Batch, Objective, PsdObjective, Schedule};
use psd_core::masking::MaskedImage;
use psd_core::{Graph, ModelBundle, ModelConfig, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{gradcheck, graph_loss, rand_tensor, Eval, GradReport};

pub const PROBES: usize = 24;

/// Weighted sum with fixed random weights so every output element matters.
fn weighted_sum(g: &mut Graph, v: Var, seed: u64) -> Var {
    let shape = g.shape(v).to_vec();
    let w = rand_tensor(&mut ChaCha8Rng::seed_from_u64(seed), &shape, 1.0);
    let w = g.constant(&w);
    let p = g.mul(v, w).unwrap();
    g.sum(p)
}

fn run(mut params: Vec<Tensor>, build: impl for<'p> Fn(&mut Graph<'p>, &[Var]) -> Var, seed: u64) -> GradReport {
    gradcheck(&mut params, graph_loss(build), PROBES, seed)
}

/// Every differentiable primitive, each against its own oracle run.
pub fn primitive_cases(seed: u64) -> Vec<(&'static str, GradReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = |shape: &[usize], s: f64| rand_tensor(&mut rng, shape, s);
    let mut away_from_zero = {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x55);
        move |shape: &[usize]| {
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|_| {
                    let m = rng.random_range(0.1..1.0);
                    if rng.random_bool(0.5) {
                        m
                    } else {
                        -m
                    }
                })
                .collect();
            Tensor::new(shape, data).unwrap().with_grad()
        }
    };
    let labels = [2usize, 0, 3];
    vec![
        ("add", run(vec![r(&[3, 4], 1.0), r(&[3, 4], 1.0)], |g, v| {
            let y = g.add(v[0], v[1]).unwrap();
            weighted_sum(g, y, 1)
        }, seed)),
        ("sub", run(vec![r(&[3, 4], 1.0), r(&[3, 4], 1.0)], |g, v| {
            let y = g.sub(v[0], v[1]).unwrap();
            weighted_sum(g, y, 2)
        }, seed)),
        ("mul", run(vec![r(&[3, 4], 1.0), r(&[3, 4], 1.0)], |g, v| {
            let y = g.mul(v[0], v[1]).unwrap();
            weighted_sum(g, y, 3)
        }, seed)),
        ("scale", run(vec![r(&[5], 1.0)], |g, v| {
            let y = g.scale(v[0], -2.5);
            weighted_sum(g, y, 4)
        }, seed)),
        ("relu", run(vec![away_from_zero(&[4, 6])], |g, v| {
            let y = g.relu(v[0]);
            weighted_sum(g, y, 5)
        }, seed)),
        ("matmul", run(vec![r(&[3, 4], 1.0), r(&[4, 5], 1.0)], |g, v| {
            let y = g.matmul(v[0], v[1]).unwrap();
            weighted_sum(g, y, 6)
        }, seed)),
        ("add_row_bias", run(vec![r(&[3, 4], 1.0), r(&[4], 1.0)], |g, v| {
            let y = g.add_row_bias(v[0], v[1]).unwrap();
            weighted_sum(g, y, 7)
        }, seed)),
        ("add_channel_bias", run(vec![r(&[2, 3, 2, 2], 1.0), r(&[3], 1.0)], |g, v| {
            let y = g.add_channel_bias(v[0], v[1]).unwrap();
            weighted_sum(g, y, 8)
        }, seed)),
        ("conv2d_s1", run(vec![r(&[1, 2, 5, 5], 1.0), r(&[3, 2, 3, 3], 1.0)], |g, v| {
            let y = g.conv2d(v[0], v[1], 1, 1).unwrap();
            weighted_sum(g, y, 9)
        }, seed)),
        ("conv2d_s2", run(vec![r(&[2, 2, 6, 6], 1.0), r(&[3, 2, 3, 3], 1.0)], |g, v| {
            let y = g.conv2d(v[0], v[1], 2, 1).unwrap();
            weighted_sum(g, y, 10)
        }, seed)),
        ("global_avg_pool", run(vec![r(&[2, 3, 4, 4], 1.0)], |g, v| {
            let y = g.global_avg_pool(v[0]).unwrap();
            weighted_sum(g, y, 11)
        }, seed)),
        ("softmax", run(vec![r(&[3, 5], 2.0)], |g, v| {
            let y = g.softmax(v[0]).unwrap();
            weighted_sum(g, y, 12)
        }, seed)),
        ("cross_entropy", run(vec![r(&[3, 5], 2.0)], move |g, v| g.cross_entropy(v[0], &labels).unwrap(), seed)),
        ("kl_div", run(vec![r(&[3, 5], 2.0), r(&[3, 5], 2.0)], |g, v| g.kl_div(v[0], v[1]).unwrap(), seed)),
    ]
}

/// The complete objective (m = 2, ramp saturated) over every model
/// parameter, including both heads and Θ. The locating terms read the tapped
/// features through a stop-gradient, so when an embedding tensor is probed
/// the oracle differences the objective without them.
pub fn full_loss_case(seed: u64, probes: usize) -> GradReport {
    let cfg = ModelConfig::default();
    let mut bundle = ModelBundle::init(&cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    // Zero biases put erased pixels exactly on the ReLU kink, where the
    // subgradient and a central difference legitimately disagree.
    for blk in &mut bundle.embedding.blocks {
        for b in blk.bias.data_mut() {
            *b = rng.random_range(-0.1..0.1);
        }
    }
    let images: Vec<MaskedImage> = (0..2)
        .map(|_| MaskedImage::original(3, 32, 32, (0..3 * 32 * 32).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap())
        .collect();
    let batch = Batch::new(images, vec![1, 4]).unwrap();
    let embedding_tensors = 2 * cfg.widths.len();
    let obj = Objective::Psd(PsdObjective::new(
        2,
        0.05,
        Schedule {
            alpha: 1.0,
            beta: 5,
            omega_l: 1.0,
        },
    ));
    gradcheck(
        &mut bundle,
        |b: &mut ModelBundle, eval| {
            let mut g = Graph::new();
            let bound = b.bind(&mut g);
            let out = objective_loss(&mut g, &bound, &batch, &obj, 10).unwrap();
            let v = g.scalar_value(out.loss);
            match eval {
                Eval::Backward => {
                    g.backward(out.loss).unwrap();
                    v
                }
                Eval::Probe(p) if p < embedding_tensors => {
                    v - out.breakdown.omega_l * out.breakdown.l_l.iter().sum::<f64>()
                }
                Eval::Probe(_) => v,
            }
        },
        probes,
        seed,
    )
}
