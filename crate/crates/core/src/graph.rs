//! Reverse-mode differentiation over a per-pass operation record.
//!
//! A [`Graph`] is built fresh for every forward pass. Each primitive appends a
//! node holding its output value and whatever it needs for the backward rule.
//! [`Graph::backward`] consumes the graph, walks the nodes in reverse execution
//! order and accumulates gradients into the bound parameter tensors.

use crate::error::{PsdError, Result};
use crate::linalg::{gemm, Strides};
use crate::tensor::Tensor;

/// Clamp applied to probabilities before taking logarithms.
pub const LOG_CLAMP: f64 = 1e-12;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
struct ConvGeometry {
    batch: usize,
    in_c: usize,
    in_h: usize,
    in_w: usize,
    out_c: usize,
    k_h: usize,
    k_w: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeometry {
    fn patch_len(&self) -> usize {
        self.in_c * self.k_h * self.k_w
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_sample(&self) -> usize {
        self.in_c * self.in_h * self.in_w
    }

    /// Calls `f(row, col, input_offset)` for every in-bounds im2col entry.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        for c in 0..self.in_c {
            for ki in 0..self.k_h {
                for kj in 0..self.k_w {
                    let row = (c * self.k_h + ki) * self.k_w + kj;
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.in_h as isize {
                            continue;
                        }
                        for ox in 0..self.out_w {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.in_w as isize {
                                continue;
                            }
                            let src = (c * self.in_h + iy as usize) * self.in_w + ix as usize;
                            f(row, oy * self.out_w + ox, src);
                        }
                    }
                }
            }
        }
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let plane = self.out_plane();
        cols.fill(0.0);
        self.for_each_tap(|row, col, src| cols[row * plane + col] = x[src]);
    }

    fn col2im_add(&self, cols: &[f64], dx: &mut [f64]) {
        let plane = self.out_plane();
        self.for_each_tap(|row, col, src| dx[src] += cols[row * plane + col]);
    }
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Sum(usize),
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    AddRowBias(usize, usize),
    AddChannelBias(usize, usize),
    Conv2d {
        input: usize,
        kernel: usize,
        geom: ConvGeometry,
        cols: Vec<f64>,
    },
    GlobalAvgPool(usize),
    Softmax(usize),
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    KlDiv {
        teacher: usize,
        student: usize,
        p_t: Vec<f64>,
        p_s: Vec<f64>,
    },
    StopGradient,
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    tracked: bool,
}

/// Operation record for one forward pass.
///
/// Parameters are bound by mutable reference so that `backward` can write
/// their gradients; plain inputs are copied in as untracked leaves.
pub struct Graph<'p> {
    nodes: Vec<Node>,
    bindings: Vec<(usize, &'p mut Tensor)>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bindings: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, tracked: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    /// Untracked leaf holding a copy of `t`.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn input(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        let shape = t.shape().to_vec();
        Ok(self.push(shape, t.into_data(), Op::Leaf, false))
    }

    /// Binds a parameter. Gradients reach it on `backward` iff it requires grad.
    pub fn param(&mut self, t: &'p mut Tensor) -> Var {
        let tracked = t.requires_grad();
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, tracked);
        if tracked {
            self.bindings.push((v.0, t));
        }
        v
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v), self.value(v).to_vec()).expect("node shape is consistent")
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(PsdError::shape(format!(
                "{what}: operand shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(self.shape(a).to_vec(), value, op, tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).iter().map(|x| x * s).collect();
        let tracked = self.tracked(a);
        self.push(self.shape(a).to_vec(), value, Op::Scale(a.0, s), tracked)
    }

    /// Rectifier; the subgradient at exactly zero is zero.
    pub fn relu(&mut self, a: Var) -> Var {
        // NaN must survive so numeric failures surface in the loss.
        let value = self.value(a).iter().map(|&x| if x <= 0.0 { 0.0 } else { x }).collect();
        let tracked = self.tracked(a);
        self.push(self.shape(a).to_vec(), value, Op::Relu(a.0), tracked)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let tracked = self.tracked(a);
        self.push(vec![], vec![s], Op::Sum(a.0), tracked)
    }

    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let value = self.value(a).to_vec();
        self.push(self.shape(a).to_vec(), value, Op::StopGradient, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(PsdError::shape(format!("matmul: cannot multiply {sa:?} by {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a),
            Strides::row_major(k),
            self.value(b),
            Strides::row_major(n),
            0.0,
            &mut out,
            Strides::row_major(n),
        );
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(vec![m, n], out, Op::MatMul { a: a.0, b: b.0, m, k, n }, tracked))
    }

    /// `x[B×N] + bias[N]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sx.len() != 2 || sb != [sx[1]] {
            return Err(PsdError::shape(format!("add_row_bias: {sx:?} with bias {sb:?}")));
        }
        let n = sx[1];
        let b = self.value(bias);
        let value = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[i % n])
            .collect();
        let tracked = self.tracked(x) || self.tracked(bias);
        Ok(self.push(sx.to_vec(), value, Op::AddRowBias(x.0, bias.0), tracked))
    }

    /// `x[B×C×H×W] + bias[C]` broadcast over batch and space.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sx.len() != 4 || sb != [sx[1]] {
            return Err(PsdError::shape(format!("add_channel_bias: {sx:?} with bias {sb:?}")));
        }
        let (c, plane) = (sx[1], sx[2] * sx[3]);
        let b = self.value(bias);
        let value = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[(i / plane) % c])
            .collect();
        let tracked = self.tracked(x) || self.tracked(bias);
        Ok(self.push(sx.to_vec(), value, Op::AddChannelBias(x.0, bias.0), tracked))
    }

    /// Zero-padded cross-correlation of `x[B×C×H×W]` with `k[O×C×Kh×Kw]`.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sk) = (self.shape(x), self.shape(k));
        if sx.len() != 4 || sk.len() != 4 || sx[1] != sk[1] {
            return Err(PsdError::shape(format!("conv2d: input {sx:?} with kernel {sk:?}")));
        }
        if stride == 0 {
            return Err(PsdError::shape("conv2d: stride must be positive"));
        }
        let (in_h, in_w, k_h, k_w) = (sx[2], sx[3], sk[2], sk[3]);
        if k_h > in_h + 2 * pad || k_w > in_w + 2 * pad {
            return Err(PsdError::shape(format!(
                "conv2d: kernel {k_h}×{k_w} exceeds padded input {}×{}",
                in_h + 2 * pad,
                in_w + 2 * pad
            )));
        }
        let geom = ConvGeometry {
            batch: sx[0],
            in_c: sx[1],
            in_h,
            in_w,
            out_c: sk[0],
            k_h,
            k_w,
            stride,
            pad,
            out_h: (in_h + 2 * pad - k_h) / stride + 1,
            out_w: (in_w + 2 * pad - k_w) / stride + 1,
        };
        let (patch, plane) = (geom.patch_len(), geom.out_plane());
        let mut cols = vec![0.0; geom.batch * patch * plane];
        let mut out = vec![0.0; geom.batch * geom.out_c * plane];
        let xv = self.value(x);
        let kv = self.value(k);
        for b in 0..geom.batch {
            let cols_b = &mut cols[b * patch * plane..(b + 1) * patch * plane];
            geom.im2col(&xv[b * geom.in_sample()..(b + 1) * geom.in_sample()], cols_b);
            gemm(
                geom.out_c,
                patch,
                plane,
                kv,
                Strides::row_major(patch),
                cols_b,
                Strides::row_major(plane),
                0.0,
                &mut out[b * geom.out_c * plane..(b + 1) * geom.out_c * plane],
                Strides::row_major(plane),
            );
        }
        let tracked = self.tracked(x) || self.tracked(k);
        let shape = vec![geom.batch, geom.out_c, geom.out_h, geom.out_w];
        Ok(self.push(
            shape,
            out,
            Op::Conv2d {
                input: x.0,
                kernel: k.0,
                geom,
                cols,
            },
            tracked,
        ))
    }

    /// Mean over the spatial axes: `B×D×H×W → B×D`.
    pub fn global_avg_pool(&mut self, s: Var) -> Result<Var> {
        let sh = self.shape(s);
        if sh.len() != 4 || sh[2] == 0 || sh[3] == 0 {
            return Err(PsdError::shape(format!("global_avg_pool: expected B×D×H×W, got {sh:?}")));
        }
        let (b, d, plane) = (sh[0], sh[1], sh[2] * sh[3]);
        let value = self
            .value(s)
            .chunks(plane)
            .map(|c| c.iter().sum::<f64>() / plane as f64)
            .collect();
        let tracked = self.tracked(s);
        Ok(self.push(vec![b, d], value, Op::GlobalAvgPool(s.0), tracked))
    }

    pub fn softmax(&mut self, logits: Var) -> Result<Var> {
        let (_, c) = self.rows(logits, "softmax")?;
        let value = softmax_rows(self.value(logits), c);
        let tracked = self.tracked(logits);
        Ok(self.push(self.shape(logits).to_vec(), value, Op::Softmax(logits.0), tracked))
    }

    /// Batch mean of `−log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = self.rows(logits, "cross_entropy")?;
        if labels.len() != b {
            return Err(PsdError::shape(format!(
                "cross_entropy: {b} rows but {} labels",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(PsdError::Domain(format!("label {bad} outside [0, {c})")));
        }
        let probs = softmax_rows(self.value(logits), c);
        let loss = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| -probs[i * c + y].max(LOG_CLAMP).ln())
            .sum::<f64>()
            / b as f64;
        let tracked = self.tracked(logits);
        Ok(self.push(
            vec![],
            vec![loss],
            Op::CrossEntropy {
                logits: logits.0,
                labels: labels.to_vec(),
                probs,
            },
            tracked,
        ))
    }

    /// Batch mean of `KL(softmax(teacher) ‖ softmax(student))`, differentiable
    /// in both arguments.
    pub fn kl_div(&mut self, teacher: Var, student: Var) -> Result<Var> {
        self.same_shape(teacher, student, "kl_div")?;
        let (b, c) = self.rows(teacher, "kl_div")?;
        let p_t = softmax_rows(self.value(teacher), c);
        let p_s = softmax_rows(self.value(student), c);
        let total: f64 = p_t
            .iter()
            .zip(&p_s)
            .map(|(&pt, &ps)| pt * (pt.max(LOG_CLAMP).ln() - ps.max(LOG_CLAMP).ln()))
            .sum();
        let tracked = self.tracked(teacher) || self.tracked(student);
        Ok(self.push(
            vec![],
            vec![total / b as f64],
            Op::KlDiv {
                teacher: teacher.0,
                student: student.0,
                p_t,
                p_s,
            },
            tracked,
        ))
    }

    fn rows(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        match self.shape(v) {
            &[b, c] if b > 0 && c > 0 => Ok((b, c)),
            other => Err(PsdError::shape(format!("{what}: expected non-empty B×C, got {other:?}"))),
        }
    }

    /// Back-propagates from a scalar `loss`, accumulating into every bound
    /// parameter that requires grad. The record is consumed.
    pub fn backward(self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(PsdError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let Graph { nodes, bindings } = self;
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(nodes.len());
        grads.resize_with(nodes.len(), || None);
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !nodes[i].tracked || matches!(nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            propagate(&nodes, i, &g, &mut grads);
        }

        for (idx, t) in bindings {
            if let Some(g) = &grads[idx] {
                t.accumulate_grad(g);
            }
        }
        Ok(())
    }
}

fn softmax_rows(logits: &[f64], c: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(c) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut z = 0.0;
        for &v in row {
            let e = (v - max).exp();
            z += e;
            out.push(e);
        }
        for p in &mut out[start..] {
            *p /= z;
        }
    }
    out
}

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], idx: usize) -> Option<&'a mut Vec<f64>> {
    if !nodes[idx].tracked {
        return None;
    }
    let len = nodes[idx].value.len();
    Some(grads[idx].get_or_insert_with(|| vec![0.0; len]))
}

fn propagate(nodes: &[Node], i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    match &nodes[i].op {
        Op::Leaf | Op::StopGradient => {}
        Op::Add(a, b) => {
            if let Some(ga) = slot(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(x, d)| *x += d);
            }
            if let Some(gb) = slot(grads, nodes, *b) {
                gb.iter_mut().zip(g).for_each(|(x, d)| *x += d);
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = slot(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(x, d)| *x += d);
            }
            if let Some(gb) = slot(grads, nodes, *b) {
                gb.iter_mut().zip(g).for_each(|(x, d)| *x -= d);
            }
        }
        Op::Mul(a, b) => {
            let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
            if let Some(ga) = slot(grads, nodes, *a) {
                for ((x, d), y) in ga.iter_mut().zip(g).zip(vb) {
                    *x += d * y;
                }
            }
            if let Some(gb) = slot(grads, nodes, *b) {
                for ((x, d), y) in gb.iter_mut().zip(g).zip(va) {
                    *x += d * y;
                }
            }
        }
        Op::Scale(a, s) => {
            if let Some(ga) = slot(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(x, d)| *x += d * s);
            }
        }
        Op::Relu(a) => {
            let va = &nodes[*a].value;
            if let Some(ga) = slot(grads, nodes, *a) {
                for ((x, d), v) in ga.iter_mut().zip(g).zip(va) {
                    if *v > 0.0 {
                        *x += d;
                    }
                }
            }
        }
        Op::Sum(a) => {
            if let Some(ga) = slot(grads, nodes, *a) {
                ga.iter_mut().for_each(|x| *x += g[0]);
            }
        }
        Op::MatMul { a, b, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            if nodes[*a].tracked {
                let vb = &nodes[*b].value;
                let ga = slot(grads, nodes, *a).unwrap();
                // dA = dC·Bᵀ
                gemm(m, n, k, g, Strides::row_major(n), vb, Strides::transposed(n), 1.0, ga, Strides::row_major(k));
            }
            if nodes[*b].tracked {
                let va = &nodes[*a].value;
                let gb = slot(grads, nodes, *b).unwrap();
                // dB = Aᵀ·dC
                gemm(k, m, n, va, Strides::transposed(k), g, Strides::row_major(n), 1.0, gb, Strides::row_major(n));
            }
        }
        Op::AddRowBias(x, bias) => {
            let n = nodes[*bias].value.len();
            if let Some(gx) = slot(grads, nodes, *x) {
                gx.iter_mut().zip(g).for_each(|(v, d)| *v += d);
            }
            if let Some(gb) = slot(grads, nodes, *bias) {
                for (j, d) in g.iter().enumerate() {
                    gb[j % n] += d;
                }
            }
        }
        Op::AddChannelBias(x, bias) => {
            let sh = &nodes[*x].shape;
            let (c, plane) = (sh[1], sh[2] * sh[3]);
            if let Some(gx) = slot(grads, nodes, *x) {
                gx.iter_mut().zip(g).for_each(|(v, d)| *v += d);
            }
            if let Some(gb) = slot(grads, nodes, *bias) {
                for (p, chunk) in g.chunks(plane).enumerate() {
                    gb[p % c] += chunk.iter().sum::<f64>();
                }
            }
        }
        Op::Conv2d {
            input,
            kernel,
            geom,
            cols,
        } => {
            let (patch, plane) = (geom.patch_len(), geom.out_plane());
            let out_sample = geom.out_c * plane;
            if nodes[*kernel].tracked {
                let gk = slot(grads, nodes, *kernel).unwrap();
                for b in 0..geom.batch {
                    // dK += dOut_b · cols_bᵀ
                    gemm(
                        geom.out_c,
                        plane,
                        patch,
                        &g[b * out_sample..(b + 1) * out_sample],
                        Strides::row_major(plane),
                        &cols[b * patch * plane..(b + 1) * patch * plane],
                        Strides::transposed(plane),
                        1.0,
                        gk,
                        Strides::row_major(patch),
                    );
                }
            }
            if nodes[*input].tracked {
                let kv = &nodes[*kernel].value;
                let mut dcols = vec![0.0; patch * plane];
                let gx = slot(grads, nodes, *input).unwrap();
                for b in 0..geom.batch {
                    // dcols = Kᵀ · dOut_b
                    gemm(
                        patch,
                        geom.out_c,
                        plane,
                        kv,
                        Strides::transposed(patch),
                        &g[b * out_sample..(b + 1) * out_sample],
                        Strides::row_major(plane),
                        0.0,
                        &mut dcols,
                        Strides::row_major(plane),
                    );
                    let n = geom.in_sample();
                    geom.col2im_add(&dcols, &mut gx[b * n..(b + 1) * n]);
                }
            }
        }
        Op::GlobalAvgPool(s) => {
            let sh = &nodes[*s].shape;
            let plane = sh[2] * sh[3];
            if let Some(gs) = slot(grads, nodes, *s) {
                for (j, d) in g.iter().enumerate() {
                    let share = d / plane as f64;
                    gs[j * plane..(j + 1) * plane].iter_mut().for_each(|v| *v += share);
                }
            }
        }
        Op::Softmax(a) => {
            let c = nodes[i].shape[1];
            let p = &nodes[i].value;
            if let Some(ga) = slot(grads, nodes, *a) {
                for ((gr, pr), out) in g.chunks(c).zip(p.chunks(c)).zip(ga.chunks_mut(c)) {
                    let dot: f64 = gr.iter().zip(pr).map(|(x, y)| x * y).sum();
                    for j in 0..c {
                        out[j] += pr[j] * (gr[j] - dot);
                    }
                }
            }
        }
        Op::CrossEntropy { logits, labels, probs } => {
            let c = nodes[*logits].shape[1];
            let scale = g[0] / labels.len() as f64;
            if let Some(gl) = slot(grads, nodes, *logits) {
                for (r, &y) in labels.iter().enumerate() {
                    for j in 0..c {
                        let onehot = if j == y { 1.0 } else { 0.0 };
                        gl[r * c + j] += scale * (probs[r * c + j] - onehot);
                    }
                }
            }
        }
        Op::KlDiv {
            teacher,
            student,
            p_t,
            p_s,
        } => {
            let c = nodes[*teacher].shape[1];
            let scale = g[0] / (p_t.len() / c) as f64;
            if let Some(gs) = slot(grads, nodes, *student) {
                for j in 0..p_t.len() {
                    gs[j] += scale * (p_s[j] - p_t[j]);
                }
            }
            if let Some(gt) = slot(grads, nodes, *teacher) {
                for (r, (pt, ps)) in p_t.chunks(c).zip(p_s.chunks(c)).enumerate() {
                    let a: Vec<f64> = pt
                        .iter()
                        .zip(ps)
                        .map(|(&t, &s)| t.max(LOG_CLAMP).ln() - s.max(LOG_CLAMP).ln())
                        .collect();
                    let mean_a: f64 = pt.iter().zip(&a).map(|(t, x)| t * x).sum();
                    for j in 0..c {
                        gt[r * c + j] += scale * pt[j] * (a[j] - mean_a);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn elementwise_values() {
        let mut g = Graph::new();
        let a = g.constant(&t(&[2], &[1.0, 2.0]));
        let b = g.constant(&t(&[2], &[3.0, 4.0]));
        let s = g.add(a, b).unwrap();
        assert_eq!(g.value(s), &[4.0, 6.0]);

        let r = g.constant(&t(&[3], &[-1.0, 0.0, 2.0]));
        let r = g.relu(r);
        assert_eq!(g.value(r), &[0.0, 0.0, 2.0]);

        let a = g.constant(&t(&[2], &[2.0, 3.0]));
        let b = g.constant(&t(&[2], &[0.0, 5.0]));
        let p = g.mul(a, b).unwrap();
        assert_eq!(g.value(p), &[0.0, 15.0]);

        let c = g.constant(&t(&[3], &[0.0; 3]));
        assert!(matches!(g.add(a, c), Err(PsdError::Shape(_))));
    }

    #[test]
    fn relu_gradient_zero_at_origin() {
        let mut x = t(&[3], &[-1.0, 0.0, 2.0]).with_grad();
        let mut g = Graph::new();
        let v = g.param(&mut x);
        let r = g.relu(v);
        let l = g.sum(r);
        g.backward(l).unwrap();
        assert_eq!(x.grad().unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn matmul_values_and_errors() {
        let mut g = Graph::new();
        let i2 = g.constant(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = g.constant(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = g.matmul(i2, m).unwrap();
        assert_eq!(g.value(p), &[1.0, 2.0, 3.0, 4.0]);

        let row = g.constant(&t(&[1, 2], &[1.0, 2.0]));
        let col = g.constant(&t(&[2, 1], &[3.0, 4.0]));
        let p = g.matmul(row, col).unwrap();
        assert_eq!(g.value(p), &[11.0]);
        assert!(g.matmul(row, row).is_err());
    }

    #[test]
    fn conv_hand_sum_and_zero_kernel() {
        let mut g = Graph::new();
        let x = g.constant(&Tensor::full(&[1, 1, 2, 2], 1.0));
        let k = g.constant(&Tensor::full(&[1, 1, 2, 2], 1.0));
        let y = g.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 1, 1]);
        assert_eq!(g.value(y), &[4.0]);

        let x = g.constant(&t(&[1, 2, 3, 3], &(0..18).map(f64::from).collect::<Vec<_>>()));
        let k = g.constant(&Tensor::zeros(&[4, 2, 3, 3]));
        let y = g.conv2d(x, k, 2, 1).unwrap();
        assert_eq!(g.shape(y), &[1, 4, 2, 2]);
        assert!(g.value(y).iter().all(|&v| v == 0.0));

        let big = g.constant(&Tensor::zeros(&[1, 2, 5, 5]));
        assert!(g.conv2d(x, big, 1, 0).is_err());
        assert!(g.conv2d(x, big, 1, 1).is_ok());
    }

    #[test]
    fn conv_output_size_formula() {
        let mut g = Graph::new();
        let x = g.constant(&Tensor::zeros(&[2, 3, 32, 32]));
        let k = g.constant(&Tensor::zeros(&[16, 3, 3, 3]));
        let y = g.conv2d(x, k, 2, 1).unwrap();
        assert_eq!(g.shape(y), &[2, 16, 16, 16]);
        let k5 = g.constant(&Tensor::zeros(&[1, 3, 5, 5]));
        let y = g.conv2d(x, k5, 3, 0).unwrap();
        assert_eq!(g.shape(y), &[2, 1, 10, 10]);
    }

    #[test]
    fn gap_mean_and_gradient() {
        let mut s = t(&[1, 1, 2, 2], &[1.0, 3.0, 5.0, 7.0]).with_grad();
        let mut g = Graph::new();
        let v = g.param(&mut s);
        let p = g.global_avg_pool(v).unwrap();
        assert_eq!(g.value(p), &[4.0]);
        let l = g.scale(p, 2.0);
        let l = g.sum(l);
        g.backward(l).unwrap();
        assert_eq!(s.grad().unwrap(), &[0.5; 4]);
    }

    #[test]
    fn softmax_cases() {
        let mut g = Graph::new();
        let z = g.constant(&t(&[1, 2], &[0.0, 0.0]));
        let p = g.softmax(z).unwrap();
        assert_eq!(g.value(p), &[0.5, 0.5]);

        let z = g.constant(&t(&[1, 3], &[1f64.ln(), 2f64.ln(), 3f64.ln()]));
        let p = g.softmax(z).unwrap();
        for (got, want) in g.value(p).iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn cross_entropy_cases() {
        let mut g = Graph::new();
        let z = g.constant(&t(&[1, 3], &[0.0, 0.0, 0.0]));
        for y in 0..3 {
            let l = g.cross_entropy(z, &[y]).unwrap();
            assert!((g.scalar_value(l) - 3f64.ln()).abs() < 1e-15);
        }
        let z = g.constant(&t(&[1, 3], &[0.0, 50.0, 0.0]));
        let l = g.cross_entropy(z, &[1]).unwrap();
        assert!(g.scalar_value(l) < 1e-20);
        assert!(matches!(g.cross_entropy(z, &[3]), Err(PsdError::Domain(_))));
    }

    #[test]
    fn kl_cases() {
        let mut g = Graph::new();
        let a = g.constant(&t(&[2, 3], &[0.3, -1.0, 2.0, 0.0, 0.5, 0.5]));
        let l = g.kl_div(a, a).unwrap();
        assert_eq!(g.scalar_value(l), 0.0);

        let teacher = g.constant(&t(&[1, 2], &[0.75f64.ln(), 0.25f64.ln()]));
        let student = g.constant(&t(&[1, 2], &[0.5f64.ln(), 0.5f64.ln()]));
        let l = g.kl_div(teacher, student).unwrap();
        let want = 0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln();
        assert!((g.scalar_value(l) - want).abs() < 1e-15);
        assert!((g.scalar_value(l) - 0.1308).abs() < 1e-4);

        let wrong = g.constant(&t(&[1, 3], &[0.0; 3]));
        assert!(g.kl_div(teacher, wrong).is_err());
    }

    #[test]
    fn stop_gradient_contract() {
        let mut x = t(&[3], &[1.0, 2.0, 3.0]).with_grad();
        let mut g = Graph::new();
        let v = g.param(&mut x);
        let s = g.stop_gradient(v);
        assert_eq!(g.value(s), &[1.0, 2.0, 3.0]);
        let l = g.sum(s);
        g.backward(l).unwrap();
        assert_eq!(x.grad().unwrap(), &[0.0; 3]);

        x.zero_grad();
        let mut g = Graph::new();
        let v = g.param(&mut x);
        let s = g.stop_gradient(v);
        let both = g.add(v, s).unwrap();
        let l = g.sum(both);
        g.backward(l).unwrap();
        assert_eq!(x.grad().unwrap(), &[1.0; 3]);
    }

    #[test]
    fn backward_basics_and_accumulation() {
        let mut x = t(&[2], &[1.0, 2.0]).with_grad();
        for round in 1..=2 {
            let mut g = Graph::new();
            let v = g.param(&mut x);
            let l = g.sum(v);
            g.backward(l).unwrap();
            assert_eq!(x.grad().unwrap(), &[round as f64; 2]);
        }

        let mut x = t(&[1], &[3.0]).with_grad();
        let mut g = Graph::new();
        let v = g.param(&mut x);
        let sq = g.mul(v, v).unwrap();
        let l = g.sum(sq);
        g.backward(l).unwrap();
        assert_eq!(x.grad().unwrap(), &[6.0]);

        let mut x = t(&[2], &[1.0, 2.0]).with_grad();
        let mut g = Graph::new();
        let v = g.param(&mut x);
        assert!(matches!(g.backward(v), Err(PsdError::Contract(_))));
    }
}
