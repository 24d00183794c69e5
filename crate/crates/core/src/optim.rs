//! SGD with momentum and L2 weight decay.

use crate::tensor::Tensor;

/// One in-place update of a single parameter buffer.
///
/// `v ← momentum·v + (grad + weight_decay·param)`, then `param ← param − lr·v`.
pub fn sgd_step(
    param: &mut [f64],
    grad: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    for ((p, g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = momentum * *v + (g + weight_decay * *p);
        *p -= lr * *v;
    }
}

#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    /// Updates `params` in the given order. The order must be stable across
    /// calls since velocity buffers are matched by position. Parameters
    /// without a gradient buffer are treated as having a zero gradient.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Tensor>) {
        for (i, p) in params.into_iter().enumerate() {
            if self.velocity.len() <= i {
                self.velocity.push(vec![0.0; p.numel()]);
            }
            let vel = &mut self.velocity[i];
            let (data, grad) = p.data_and_grad_mut();
            match grad {
                Some(g) => sgd_step(data, g, vel, self.lr, self.momentum, self.weight_decay),
                None => {
                    let zeros = vec![0.0; data.len()];
                    sgd_step(data, &zeros, vel, self.lr, self.momentum, self.weight_decay)
                }
            }
        }
    }
}
