//! Shared embedding network, teacher/student heads and the class-response head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{PsdError, Result};
use crate::graph::{Graph, Var};
use crate::masking::ResponseMap;
use crate::tensor::Tensor;

pub const KERNEL: usize = 3;
pub const STRIDE: usize = 2;
pub const PAD: usize = 1;
pub const IN_CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub widths: Vec<usize>,
    pub num_classes: usize,
    /// 1-based index of the block whose output feeds the class-response head.
    pub tap_index: usize,
    pub share_heads: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            widths: vec![16, 32, 64, 64],
            num_classes: 10,
            tap_index: 3,
            share_heads: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(PsdError::config("widths", "need at least one block, all widths positive"));
        }
        if self.num_classes < 2 {
            return Err(PsdError::config("num_classes", "need at least two classes"));
        }
        if self.tap_index == 0 || self.tap_index > self.widths.len() {
            return Err(PsdError::config(
                "tap_index",
                format!("must lie in [1, {}], got {}", self.widths.len(), self.tap_index),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Plain CNN: each block is a stride-2 3×3 convolution followed by relu.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingNet {
    pub blocks: Vec<ConvBlock>,
    pub tap_index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadNet {
    /// `D_final × C`
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrmHead {
    /// `D_tap × C`
    pub theta: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub embedding: EmbeddingNet,
    pub teacher: HeadNet,
    /// `None` when the student shares the teacher's head.
    pub student: Option<HeadNet>,
    pub crm: CrmHead,
}

fn he_normal(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| normal.sample(rng)).collect();
    Tensor::new(shape, data).expect("sized from shape").with_grad()
}

impl EmbeddingNet {
    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn widths(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.weight.shape()[0]).collect()
    }

    pub fn tap_channels(&self) -> usize {
        self.blocks[self.tap_index - 1].weight.shape()[0]
    }

    pub fn out_channels(&self) -> usize {
        self.blocks.last().expect("non-empty").weight.shape()[0]
    }
}

impl HeadNet {
    pub fn num_classes(&self) -> usize {
        self.weight.shape()[1]
    }
}

impl ModelBundle {
    /// He-initialized bundle; parameters are drawn in a fixed order
    /// (blocks, teacher, student, class-response head) from one seeded stream.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut blocks = Vec::with_capacity(config.widths.len());
        let mut in_c = IN_CHANNELS;
        for &out_c in &config.widths {
            let fan_in = in_c * KERNEL * KERNEL;
            blocks.push(ConvBlock {
                weight: he_normal(&[out_c, in_c, KERNEL, KERNEL], fan_in, &mut rng),
                bias: Tensor::zeros(&[out_c]).with_grad(),
            });
            in_c = out_c;
        }
        let c = config.num_classes;
        let head = |rng: &mut ChaCha8Rng| HeadNet {
            weight: he_normal(&[in_c, c], in_c, rng),
            bias: Tensor::zeros(&[c]).with_grad(),
        };
        let teacher = head(&mut rng);
        let student = (!config.share_heads).then(|| head(&mut rng));
        let d_tap = config.widths[config.tap_index - 1];
        let crm = CrmHead {
            theta: he_normal(&[d_tap, c], d_tap, &mut rng),
        };
        Ok(Self {
            embedding: EmbeddingNet {
                blocks,
                tap_index: config.tap_index,
            },
            teacher,
            student,
            crm,
        })
    }

    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            widths: self.embedding.widths(),
            num_classes: self.num_classes(),
            tap_index: self.embedding.tap_index,
            share_heads: self.share_heads(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.teacher.num_classes()
    }

    pub fn share_heads(&self) -> bool {
        self.student.is_none()
    }

    pub fn student(&self) -> &HeadNet {
        self.student.as_ref().unwrap_or(&self.teacher)
    }

    /// Every parameter with its checkpoint name, in a fixed order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.embedding.blocks.iter().enumerate() {
            out.push((format!("embed.{i}.weight"), &b.weight));
            out.push((format!("embed.{i}.bias"), &b.bias));
        }
        out.push(("teacher.weight".into(), &self.teacher.weight));
        out.push(("teacher.bias".into(), &self.teacher.bias));
        if let Some(s) = &self.student {
            out.push(("student.weight".into(), &s.weight));
            out.push(("student.bias".into(), &s.bias));
        }
        out.push(("crm.theta".into(), &self.crm.theta));
        out
    }

    /// Same order as [`named_params`](Self::named_params).
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for b in &mut self.embedding.blocks {
            out.push(&mut b.weight);
            out.push(&mut b.bias);
        }
        out.push(&mut self.teacher.weight);
        out.push(&mut self.teacher.bias);
        if let Some(s) = &mut self.student {
            out.push(&mut s.weight);
            out.push(&mut s.bias);
        }
        out.push(&mut self.crm.theta);
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Binds every parameter into `g` for a training pass.
    pub fn bind<'p>(&'p mut self, g: &mut Graph<'p>) -> BoundModel {
        let ModelBundle {
            embedding,
            teacher,
            student,
            crm,
        } = self;
        let tap_index = embedding.tap_index;
        let blocks = embedding
            .blocks
            .iter_mut()
            .map(|b| (g.param(&mut b.weight), g.param(&mut b.bias)))
            .collect();
        let teacher = BoundHead {
            weight: g.param(&mut teacher.weight),
            bias: g.param(&mut teacher.bias),
        };
        let student = match student {
            Some(s) => BoundHead {
                weight: g.param(&mut s.weight),
                bias: g.param(&mut s.bias),
            },
            None => teacher,
        };
        BoundModel {
            blocks,
            tap_index,
            teacher,
            student,
            theta: g.param(&mut crm.theta),
        }
    }

    /// The inference path: embedding plus teacher head, nothing else.
    pub fn inference(&self) -> InferenceNet<'_> {
        InferenceNet {
            embedding: &self.embedding,
            teacher: &self.teacher,
        }
    }

    /// Untracked forward returning `(teacher logits, student logits, crm
    /// logits, tapped features)` on one batch; used by analysis code and tests.
    pub fn forward_all(&self, x: &Tensor) -> Result<ForwardValues> {
        let mut g = Graph::new();
        let blocks: Vec<(Var, Var)> = self
            .embedding
            .blocks
            .iter()
            .map(|b| (g.constant(&b.weight), g.constant(&b.bias)))
            .collect();
        let head = |g: &mut Graph, h: &HeadNet| BoundHead {
            weight: g.constant(&h.weight),
            bias: g.constant(&h.bias),
        };
        let teacher = head(&mut g, &self.teacher);
        let student = head(&mut g, self.student());
        let theta = g.constant(&self.crm.theta);
        let xv = g.constant(x);
        let emb = forward_embed(&mut g, &blocks, self.embedding.tap_index, xv)?;
        let t = forward_head(&mut g, &teacher, emb.s_final)?;
        let s = forward_head(&mut g, &student, emb.s_final)?;
        let c = crm_logits(&mut g, theta, emb.s_tap)?;
        Ok(ForwardValues {
            teacher_logits: g.tensor(t),
            student_logits: g.tensor(s),
            crm_logits: g.tensor(c),
            s_tap: g.tensor(emb.s_tap),
            s_final: g.tensor(emb.s_final),
        })
    }
}

#[derive(Clone, Debug)]
pub struct ForwardValues {
    pub teacher_logits: Tensor,
    pub student_logits: Tensor,
    pub crm_logits: Tensor,
    pub s_tap: Tensor,
    pub s_final: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BoundHead {
    pub weight: Var,
    pub bias: Var,
}

#[derive(Clone, Debug)]
pub struct BoundModel {
    pub blocks: Vec<(Var, Var)>,
    pub tap_index: usize,
    pub teacher: BoundHead,
    pub student: BoundHead,
    pub theta: Var,
}

impl BoundModel {
    pub fn embed(&self, g: &mut Graph, x: Var) -> Result<EmbedOutput> {
        forward_embed(g, &self.blocks, self.tap_index, x)
    }
}

#[derive(Clone, Debug)]
pub struct EmbedOutput {
    pub block_outputs: Vec<Var>,
    pub s_tap: Var,
    pub s_final: Var,
}

/// Runs the embedding blocks on `x[B×3×h×w]`.
pub fn forward_embed(g: &mut Graph, blocks: &[(Var, Var)], tap_index: usize, x: Var) -> Result<EmbedOutput> {
    let shape = g.shape(x).to_vec();
    let factor = 1usize << blocks.len();
    if shape.len() != 4 || shape[1] != IN_CHANNELS || shape[2] % factor != 0 || shape[3] % factor != 0 {
        return Err(PsdError::shape(format!(
            "embedding input must be B×{IN_CHANNELS}×h×w with h, w divisible by {factor}, got {shape:?}"
        )));
    }
    let mut outputs = Vec::with_capacity(blocks.len());
    let mut h = x;
    for &(w, b) in blocks {
        let conv = g.conv2d(h, w, STRIDE, PAD)?;
        let biased = g.add_channel_bias(conv, b)?;
        h = g.relu(biased);
        outputs.push(h);
    }
    Ok(EmbedOutput {
        s_tap: outputs[tap_index - 1],
        s_final: h,
        block_outputs: outputs,
    })
}

/// `GAP(S_final)·φ_weight + φ_bias`.
pub fn forward_head(g: &mut Graph, head: &BoundHead, s_final: Var) -> Result<Var> {
    let pooled = g.global_avg_pool(s_final)?;
    let z = g.matmul(pooled, head.weight)?;
    g.add_row_bias(z, head.bias)
}

/// `GAP(stop_gradient(S_tap))·Θ`; only Θ receives gradient.
pub fn crm_logits(g: &mut Graph, theta: Var, s_tap: Var) -> Result<Var> {
    let detached = g.stop_gradient(s_tap);
    let pooled = g.global_avg_pool(detached)?;
    g.matmul(pooled, theta)
}

/// Class response map `M_c = Σ_d Θ[d,c]·S_d` for one sample's tapped features
/// `s_tap[D×H×W]`.
pub fn compute_crm(s_tap: &[f64], h: usize, w: usize, theta: &Tensor, c: usize) -> Result<ResponseMap> {
    let (d, classes) = (theta.shape()[0], theta.shape()[1]);
    if c >= classes {
        return Err(PsdError::Domain(format!("class {c} outside [0, {classes})")));
    }
    if s_tap.len() != d * h * w {
        return Err(PsdError::shape(format!(
            "tapped features hold {} values, expected {d}×{h}×{w}",
            s_tap.len()
        )));
    }
    let theta = theta.data();
    let mut values = vec![0.0; h * w];
    for (ch, plane) in s_tap.chunks(h * w).enumerate() {
        let weight = theta[ch * classes + c];
        for (acc, s) in values.iter_mut().zip(plane) {
            *acc += weight * s;
        }
    }
    ResponseMap::new(h, w, values)
}

/// Read-only view of the parameters used at inference time.
#[derive(Clone, Copy, Debug)]
pub struct InferenceNet<'a> {
    pub embedding: &'a EmbeddingNet,
    pub teacher: &'a HeadNet,
}

impl InferenceNet<'_> {
    /// Teacher logits for a batch `x[B×3×h×w]`.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let blocks: Vec<(Var, Var)> = self
            .embedding
            .blocks
            .iter()
            .map(|b| (g.constant(&b.weight), g.constant(&b.bias)))
            .collect();
        let head = BoundHead {
            weight: g.constant(&self.teacher.weight),
            bias: g.constant(&self.teacher.bias),
        };
        let xv = g.constant(x);
        let emb = forward_embed(&mut g, &blocks, self.embedding.tap_index, xv)?;
        let z = forward_head(&mut g, &head, emb.s_final)?;
        Ok(g.tensor(z))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_biases_input(batch: usize) -> Tensor {
        Tensor::zeros(&[batch, 3, 32, 32])
    }

    #[test]
    fn init_is_deterministic_and_shaped() {
        let cfg = ModelConfig::default();
        let a = ModelBundle::init(&cfg, 7).unwrap();
        let b = ModelBundle::init(&cfg, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, ModelBundle::init(&cfg, 8).unwrap());
        assert_eq!(a.teacher.num_classes(), 10);
        assert_eq!(a.crm.theta.shape(), &[64, 10]);
    }

    #[test]
    fn parameter_count_default_widths() {
        // conv: O·C·9 + O per block; heads: 64·10 + 10 each; Θ: 64·10.
        let conv = (16 * 3 * 9 + 16) + (32 * 16 * 9 + 32) + (64 * 32 * 9 + 64) + (64 * 64 * 9 + 64);
        assert_eq!(conv, 60_512);
        let bundle = ModelBundle::init(&ModelConfig::default(), 0).unwrap();
        assert_eq!(bundle.param_count(), 62_452);
        assert_eq!(bundle.param_count(), conv + 2 * 650 + 640);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = ModelConfig::default();
        cfg.tap_index = 5;
        assert!(matches!(ModelBundle::init(&cfg, 0), Err(PsdError::Config { .. })));
        cfg.tap_index = 0;
        assert!(ModelBundle::init(&cfg, 0).is_err());
        let cfg = ModelConfig {
            num_classes: 1,
            ..ModelConfig::default()
        };
        assert!(ModelBundle::init(&cfg, 0).is_err());
        let cfg = ModelConfig {
            widths: vec![],
            ..ModelConfig::default()
        };
        assert!(ModelBundle::init(&cfg, 0).is_err());
    }

    #[test]
    fn embed_shapes_and_zero_input() {
        let bundle = ModelBundle::init(&ModelConfig::default(), 1).unwrap();
        let out = bundle.forward_all(&zero_biases_input(2)).unwrap();
        assert_eq!(out.s_tap.shape(), &[2, 64, 4, 4]);
        assert_eq!(out.s_final.shape(), &[2, 64, 2, 2]);
        assert!(out.s_tap.data().iter().all(|&v| v == 0.0));
        assert!(out.teacher_logits.data().iter().all(|&v| v == 0.0));

        let mut g = Graph::new();
        let mut b2 = bundle.clone();
        let bound = b2.bind(&mut g);
        let x = g.constant(&zero_biases_input(1));
        let emb = bound.embed(&mut g, x).unwrap();
        let sizes: Vec<usize> = emb.block_outputs.iter().map(|&v| g.shape(v)[2]).collect();
        assert_eq!(sizes, vec![16, 8, 4, 2]);

        let bad = g.constant(&Tensor::zeros(&[1, 3, 30, 32]));
        assert!(matches!(bound.embed(&mut g, bad), Err(PsdError::Shape(_))));
    }

    #[test]
    fn batch_rows_independent() {
        let bundle = ModelBundle::init(&ModelConfig::default(), 3).unwrap();
        let one: Vec<f64> = (0..3 * 32 * 32).map(|i| ((i * 37) % 101) as f64 / 101.0).collect();
        let single = bundle.forward_all(&Tensor::new(&[1, 3, 32, 32], one.clone()).unwrap()).unwrap();
        let mut two = one.clone();
        two.extend(&one);
        let double = bundle.forward_all(&Tensor::new(&[2, 3, 32, 32], two).unwrap()).unwrap();
        let c = 10;
        assert_eq!(&double.teacher_logits.data()[..c], single.teacher_logits.data());
        assert_eq!(&double.teacher_logits.data()[c..], single.teacher_logits.data());
    }

    #[test]
    fn head_hand_cases() {
        let mut g = Graph::new();
        // pooled [1,2] from a 1×2×1×1 map
        let s = g.constant(&Tensor::new(&[1, 2, 1, 1], vec![1.0, 2.0]).unwrap());
        let head = BoundHead {
            weight: g.constant(&Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 2.0]).unwrap()),
            bias: g.constant(&Tensor::zeros(&[2])),
        };
        let z = forward_head(&mut g, &head, s).unwrap();
        assert_eq!(g.value(z), &[1.0, 4.0]);

        let zero = BoundHead {
            weight: g.constant(&Tensor::zeros(&[2, 2])),
            bias: g.constant(&Tensor::zeros(&[2])),
        };
        let z = forward_head(&mut g, &zero, s).unwrap();
        assert_eq!(g.value(z), &[0.0, 0.0]);

        let ident = BoundHead {
            weight: g.constant(&Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap()),
            bias: g.constant(&Tensor::zeros(&[2])),
        };
        let z = forward_head(&mut g, &ident, s).unwrap();
        assert_eq!(g.value(z), &[1.0, 2.0]);

        let s3 = g.constant(&Tensor::zeros(&[1, 3, 1, 1]));
        assert!(forward_head(&mut g, &ident, s3).is_err());
    }

    #[test]
    fn crm_logits_hand_case() {
        let mut g = Graph::new();
        let s = g.constant(&Tensor::full(&[1, 2, 2, 2], 1.0));
        let theta = g.constant(&Tensor::new(&[2, 2], vec![2.0, 0.0, 0.0, 3.0]).unwrap());
        let z = crm_logits(&mut g, theta, s).unwrap();
        assert_eq!(g.value(z), &[2.0, 3.0]);
    }

    #[test]
    fn crm_map_cases() {
        // Θ column 0 = [1, −1]; S_1 = 2, S_2 = 1 → constant 1.
        let theta = Tensor::new(&[2, 2], vec![1.0, 0.0, -1.0, 0.0]).unwrap();
        let mut s = vec![2.0; 4];
        s.extend([1.0; 4]);
        let m = compute_crm(&s, 2, 2, &theta, 0).unwrap();
        assert_eq!(m.values(), &[1.0; 4]);
        let m = compute_crm(&s, 2, 2, &theta, 1).unwrap();
        assert_eq!(m.values(), &[0.0; 4]);
        assert!(matches!(compute_crm(&s, 2, 2, &theta, 2), Err(PsdError::Domain(_))));
    }

    #[test]
    fn shared_heads_give_identical_logits() {
        let cfg = ModelConfig {
            share_heads: true,
            ..ModelConfig::default()
        };
        let bundle = ModelBundle::init(&cfg, 5).unwrap();
        assert!(bundle.share_heads());
        let x = Tensor::full(&[2, 3, 32, 32], 0.3);
        let out = bundle.forward_all(&x).unwrap();
        assert_eq!(out.teacher_logits, out.student_logits);
    }
}
