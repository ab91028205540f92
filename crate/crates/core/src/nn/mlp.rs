//! Feed-forward network with optional timestep conditioning.
//!
//! Parameters live in one flat vector so the optimizer, checkpoints and
//! gradient checks can treat every network uniformly. Layers address their
//! slice of that vector through offsets recorded in [`Op`].
//!
//! Layout of a network with `hidden_dim > 0`:
//!
//! ```text
//! x -> Linear(in, h) [+ TimeAdd(emb(t))] -> act -> Block * k -> Linear(h, out)
//! Block(h) = h + act(TimeModule(Norm(Linear(h))))
//! ```
//!
//! `TimeModule` is a per-feature scale/shift driven by the sinusoidal
//! embedding, applied right after the block's normalization. Its projections
//! start at zero, which makes a freshly inserted module an identity map.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Silu,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Silu => x / (1.0 + (-x).exp()),
        }
    }

    #[inline]
    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpConfig {
    pub input_dim: usize,
    /// Zero means a single linear map `input_dim -> output_dim`.
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub blocks: usize,
    pub activation: Activation,
    /// Width of the sinusoidal timestep embedding; 0 disables time input.
    pub time_embed_dim: usize,
    /// Add a projected timestep embedding after the input layer.
    pub time_input: bool,
    /// Insert a scale/shift time module after each block's normalization.
    pub time_modules: bool,
}

impl MlpConfig {
    pub fn linear(input_dim: usize, output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dim: 0,
            output_dim,
            blocks: 0,
            activation: Activation::Silu,
            time_embed_dim: 0,
            time_input: false,
            time_modules: false,
        }
    }

    pub fn is_time_conditioned(&self) -> bool {
        self.time_embed_dim > 0 && (self.time_input || (self.time_modules && self.blocks > 0))
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::InvalidArgument(
                "network input and output widths must be positive".into(),
            ));
        }
        if self.hidden_dim == 0 && self.blocks > 0 {
            return Err(Error::InvalidArgument(
                "residual blocks need a positive hidden width".into(),
            ));
        }
        if (self.time_input || self.time_modules) && self.time_embed_dim == 0 {
            return Err(Error::InvalidArgument(
                "time conditioning requested with a zero-width embedding".into(),
            ));
        }
        if !self.time_embed_dim.is_multiple_of(2) {
            return Err(Error::InvalidArgument(
                "time embedding width must be even".into(),
            ));
        }
        if self.hidden_dim == 0 && self.time_input {
            return Err(Error::InvalidArgument(
                "additive time input needs a hidden layer".into(),
            ));
        }
        Ok(())
    }

    /// Same network with time modules inserted into every block.
    pub fn with_time_modules(&self, time_embed_dim: usize) -> Self {
        Self {
            time_embed_dim,
            time_modules: true,
            ..self.clone()
        }
    }
}

/// Sinusoidal embedding of a (possibly fractional) timestep.
pub fn timestep_embedding(t: f64, width: usize, out: &mut [f64]) {
    let half = width / 2;
    for j in 0..half {
        let freq = (-(10_000f64.ln()) * j as f64 / half as f64).exp();
        let arg = t * freq;
        out[j] = arg.sin();
        out[j + half] = arg.cos();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct LinearSlots {
    input: usize,
    output: usize,
    weight: usize,
    bias: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct BlockSlots {
    dim: usize,
    linear: LinearSlots,
    gamma: usize,
    beta: usize,
    /// Offsets into the buffer vector for running mean and variance.
    mean: usize,
    var: usize,
    time: Option<(LinearSlots, LinearSlots)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
enum Op {
    Linear(LinearSlots),
    TimeAdd(LinearSlots),
    Act,
    Block(BlockSlots),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Linear(_) => "linear",
            Op::TimeAdd(_) => "time-add",
            Op::Act => "activation",
            Op::Block(b) if b.time.is_some() => "block+time-module",
            Op::Block(_) => "block",
        }
    }
}

/// Network parameters: architecture, flat trainable vector, and the frozen
/// normalization statistics (buffers, not trained by gradient).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    config: MlpConfig,
    ops: Vec<Op>,
    params: Vec<f64>,
    buffers: Vec<f64>,
}

/// Intermediates recorded by [`MlpParams::forward_cached`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    rows: usize,
    embedding: Vec<f64>,
    /// Input to each op, row-major `[rows, width]`.
    inputs: Vec<Vec<f64>>,
    blocks: Vec<Option<BlockCache>>,
}

#[derive(Debug, Clone)]
struct BlockCache {
    normalized: Vec<f64>,
    affine: Vec<f64>,
    pre_act: Vec<f64>,
    scale: Vec<f64>,
    /// Pre-normalization activations, kept for running-statistics updates.
    linear_out: Vec<f64>,
}

struct Layout {
    params: usize,
    buffers: usize,
    ops: Vec<Op>,
}

impl Layout {
    fn linear(&mut self, input: usize, output: usize) -> LinearSlots {
        let weight = self.params;
        let bias = weight + input * output;
        self.params = bias + output;
        LinearSlots {
            input,
            output,
            weight,
            bias,
        }
    }
}

impl MlpParams {
    /// Randomly initialised network. Linear weights use a scaled normal
    /// init, biases and time modules start at zero, norm is the identity.
    pub fn init<R: Rng + ?Sized>(config: MlpConfig, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeroed(config)?;
        let ops = net.ops.clone();
        for op in &ops {
            match op {
                Op::Linear(l) => net.init_linear(l, 1.0, rng),
                Op::TimeAdd(l) => net.init_linear(l, 1.0, rng),
                Op::Act => {}
                Op::Block(b) => {
                    net.init_linear(&b.linear, 1.0, rng);
                    net.params[b.gamma..b.gamma + b.dim].fill(1.0);
                }
            }
        }
        Ok(net)
    }

    /// Network with every trainable parameter zero and identity norm stats.
    pub fn zeroed(config: MlpConfig) -> Result<Self> {
        config.validate()?;
        let mut layout = Layout {
            params: 0,
            buffers: 0,
            ops: Vec::new(),
        };
        let e = config.time_embed_dim;
        if config.hidden_dim == 0 {
            let l = layout.linear(config.input_dim, config.output_dim);
            layout.ops.push(Op::Linear(l));
        } else {
            let h = config.hidden_dim;
            let l = layout.linear(config.input_dim, h);
            layout.ops.push(Op::Linear(l));
            if config.time_input {
                let t = layout.linear(e, h);
                layout.ops.push(Op::TimeAdd(t));
            }
            layout.ops.push(Op::Act);
            for _ in 0..config.blocks {
                let linear = layout.linear(h, h);
                let gamma = layout.params;
                let beta = gamma + h;
                layout.params = beta + h;
                let time = config
                    .time_modules
                    .then(|| (layout.linear(e, h), layout.linear(e, h)));
                let mean = layout.buffers;
                let var = mean + h;
                layout.buffers = var + h;
                layout.ops.push(Op::Block(BlockSlots {
                    dim: h,
                    linear,
                    gamma,
                    beta,
                    mean,
                    var,
                    time,
                }));
            }
            let out = layout.linear(h, config.output_dim);
            layout.ops.push(Op::Linear(out));
        }
        let mut buffers = vec![0.0; layout.buffers];
        for op in &layout.ops {
            if let Op::Block(b) = op {
                buffers[b.var..b.var + b.dim].fill(1.0);
            }
        }
        Ok(Self {
            config,
            ops: layout.ops,
            params: vec![0.0; layout.params],
            buffers,
        })
    }

    fn init_linear<R: Rng + ?Sized>(&mut self, l: &LinearSlots, gain: f64, rng: &mut R) {
        let std = gain / (l.input as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        for w in &mut self.params[l.weight..l.weight + l.input * l.output] {
            *w = normal.sample(rng);
        }
    }

    /// Rebuild from parts, checking that the vectors fit the architecture.
    pub fn from_parts(config: MlpConfig, params: Vec<f64>, buffers: Vec<f64>) -> Result<Self> {
        let mut net = Self::zeroed(config)?;
        if params.len() != net.params.len() {
            return Err(Error::shape("parameter vector", net.params.len(), params.len()));
        }
        if buffers.len() != net.buffers.len() {
            return Err(Error::shape("buffer vector", net.buffers.len(), buffers.len()));
        }
        net.params = params;
        net.buffers = buffers;
        Ok(net)
    }

    /// Copy of `teacher` with zero-initialised time modules inserted into
    /// every block. All shared weights and statistics are carried over.
    pub fn insert_time_modules(teacher: &MlpParams, time_embed_dim: usize) -> Result<Self> {
        let mut student = Self::zeroed(teacher.config.with_time_modules(time_embed_dim))?;
        for (src, dst) in teacher.ops.iter().zip(&student.ops.clone()) {
            match (src, dst) {
                (Op::Linear(a), Op::Linear(b)) | (Op::TimeAdd(a), Op::TimeAdd(b)) => {
                    student.copy_linear(teacher, a, b)
                }
                (Op::Block(a), Op::Block(b)) => {
                    student.copy_linear(teacher, &a.linear, &b.linear);
                    let h = a.dim;
                    student.params[b.gamma..b.gamma + h]
                        .copy_from_slice(&teacher.params[a.gamma..a.gamma + h]);
                    student.params[b.beta..b.beta + h]
                        .copy_from_slice(&teacher.params[a.beta..a.beta + h]);
                    student.buffers[b.mean..b.mean + h]
                        .copy_from_slice(&teacher.buffers[a.mean..a.mean + h]);
                    student.buffers[b.var..b.var + h]
                        .copy_from_slice(&teacher.buffers[a.var..a.var + h]);
                    if let (Some(ta), Some(tb)) = (a.time, b.time) {
                        student.copy_linear(teacher, &ta.0, &tb.0);
                        student.copy_linear(teacher, &ta.1, &tb.1);
                    }
                }
                (Op::Act, Op::Act) => {}
                _ => {
                    return Err(Error::InvalidArgument(
                        "teacher and student layouts diverge".into(),
                    ))
                }
            }
        }
        Ok(student)
    }

    fn copy_linear(&mut self, src: &MlpParams, a: &LinearSlots, b: &LinearSlots) {
        let n = a.input * a.output + a.output;
        self.params[b.weight..b.weight + n].copy_from_slice(&src.params[a.weight..a.weight + n]);
    }

    pub fn config(&self) -> &MlpConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[f64] {
        &self.buffers
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim
    }

    pub fn is_time_conditioned(&self) -> bool {
        self.config.is_time_conditioned()
    }

    /// Offsets `(start, len)` of every time-module projection in the flat
    /// parameter vector.
    pub fn time_module_ranges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for op in &self.ops {
            if let Op::Block(BlockSlots {
                time: Some((s, h)), ..
            }) = op
            {
                for l in [s, h] {
                    out.push((l.weight, l.input * l.output + l.output));
                }
            }
        }
        out
    }

    pub fn forward(&self, x: &Tensor, t: Option<&[f64]>) -> Result<Tensor> {
        self.run(x, t, false).map(|(y, _)| y)
    }

    pub fn forward_cached(&self, x: &Tensor, t: Option<&[f64]>) -> Result<(Tensor, ForwardCache)> {
        let (y, cache) = self.run(x, t, true)?;
        Ok((y, cache.expect("cache requested")))
    }

    fn run(
        &self,
        x: &Tensor,
        t: Option<&[f64]>,
        keep: bool,
    ) -> Result<(Tensor, Option<ForwardCache>)> {
        let n = x.rows();
        if x.shape().len() != 2 || x.cols() != self.config.input_dim {
            return Err(Error::shape(
                "layer 0 (linear) input",
                format!("[n, {}]", self.config.input_dim),
                format!("{:?}", x.shape()),
            ));
        }
        let embedding = self.embed(n, t)?;
        let e = self.config.time_embed_dim;
        let mut cur = x.data().to_vec();
        let mut inputs = Vec::new();
        let mut blocks = Vec::new();
        for op in &self.ops {
            let mut block_cache = None;
            let next = match op {
                Op::Linear(l) => {
                    let mut y = vec![0.0; n * l.output];
                    linear_forward(&cur, n, &self.params, l, &mut y);
                    y
                }
                Op::TimeAdd(l) => {
                    let mut add = vec![0.0; n * l.output];
                    linear_forward(&embedding, n, &self.params, l, &mut add);
                    let mut y = cur.clone();
                    for (a, b) in y.iter_mut().zip(&add) {
                        *a += b;
                    }
                    y
                }
                Op::Act => cur.iter().map(|&v| self.config.activation.apply(v)).collect(),
                Op::Block(b) => {
                    let (y, c) = self.block_forward(&cur, n, &embedding, e, b);
                    block_cache = Some(c);
                    y
                }
            };
            if keep {
                inputs.push(std::mem::replace(&mut cur, next));
                blocks.push(block_cache);
            } else {
                cur = next;
            }
        }
        if cur.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network forward pass".into()));
        }
        let out = Tensor::new(vec![n, self.config.output_dim], cur)?;
        let cache = keep.then_some(ForwardCache {
            rows: n,
            embedding,
            inputs,
            blocks,
        });
        Ok((out, cache))
    }

    fn embed(&self, n: usize, t: Option<&[f64]>) -> Result<Vec<f64>> {
        if !self.is_time_conditioned() {
            return Ok(Vec::new());
        }
        let t = t.ok_or_else(|| {
            Error::InvalidArgument("time-conditioned network called without timesteps".into())
        })?;
        if t.len() != n {
            return Err(Error::shape("timestep vector", n, t.len()));
        }
        let e = self.config.time_embed_dim;
        let mut emb = vec![0.0; n * e];
        for (i, &ti) in t.iter().enumerate() {
            if !ti.is_finite() || ti < 0.0 {
                return Err(Error::InvalidArgument(format!("invalid timestep {ti}")));
            }
            timestep_embedding(ti, e, &mut emb[i * e..(i + 1) * e]);
        }
        Ok(emb)
    }

    fn block_forward(
        &self,
        h_in: &[f64],
        n: usize,
        emb: &[f64],
        e: usize,
        b: &BlockSlots,
    ) -> (Vec<f64>, BlockCache) {
        let d = b.dim;
        let p = &self.params;
        let mut u = vec![0.0; n * d];
        linear_forward(h_in, n, p, &b.linear, &mut u);
        let mean = &self.buffers[b.mean..b.mean + d];
        let inv_std: Vec<f64> = self.buffers[b.var..b.var + d]
            .iter()
            .map(|v| 1.0 / (v + NORM_EPS).sqrt())
            .collect();
        let gamma = &p[b.gamma..b.gamma + d];
        let beta = &p[b.beta..b.beta + d];
        let mut normalized = vec![0.0; n * d];
        let mut affine = vec![0.0; n * d];
        for i in 0..n {
            for j in 0..d {
                let k = i * d + j;
                normalized[k] = (u[k] - mean[j]) * inv_std[j];
                affine[k] = normalized[k] * gamma[j] + beta[j];
            }
        }
        let mut pre_act = affine.clone();
        let mut scale = Vec::new();
        if let Some((ls, lh)) = &b.time {
            scale = vec![0.0; n * d];
            let mut shift = vec![0.0; n * d];
            linear_forward(emb, n, p, ls, &mut scale);
            linear_forward(emb, n, p, lh, &mut shift);
            debug_assert_eq!(ls.input, e);
            for k in 0..n * d {
                pre_act[k] = affine[k] * (1.0 + scale[k]) + shift[k];
            }
        }
        let act = self.config.activation;
        let out: Vec<f64> = h_in
            .iter()
            .zip(&pre_act)
            .map(|(&h, &w)| h + act.apply(w))
            .collect();
        let cache = BlockCache {
            normalized,
            affine,
            pre_act,
            scale,
            linear_out: u,
        };
        (out, cache)
    }

    /// Reverse pass. Returns the flat parameter gradient and the gradient
    /// with respect to the network input.
    pub fn backward(&self, cache: &ForwardCache, upstream: &Tensor) -> Result<(Vec<f64>, Tensor)> {
        let mut grad = vec![0.0; self.params.len()];
        let dx = self.backward_into(cache, upstream, &mut grad)?;
        Ok((grad, dx))
    }

    /// Reverse pass accumulating parameter gradients into `grad`.
    pub fn backward_into(
        &self,
        cache: &ForwardCache,
        upstream: &Tensor,
        grad: &mut [f64],
    ) -> Result<Tensor> {
        let n = cache.rows;
        let out = self.config.output_dim;
        if upstream.shape() != [n, out] {
            return Err(Error::shape(
                format!("upstream gradient for layer {} (output)", self.ops.len() - 1),
                format!("[{n}, {out}]"),
                format!("{:?}", upstream.shape()),
            ));
        }
        if grad.len() != self.params.len() {
            return Err(Error::shape("gradient buffer", self.params.len(), grad.len()));
        }
        let mut g = upstream.data().to_vec();
        for (idx, op) in self.ops.iter().enumerate().rev() {
            let input = &cache.inputs[idx];
            g = match op {
                Op::Linear(l) => {
                    let mut dx = vec![0.0; n * l.input];
                    linear_backward(input, n, &self.params, l, &g, grad, Some(&mut dx));
                    dx
                }
                Op::TimeAdd(l) => {
                    linear_backward(&cache.embedding, n, &self.params, l, &g, grad, None);
                    g
                }
                Op::Act => {
                    let act = self.config.activation;
                    g.iter()
                        .zip(input)
                        .map(|(gi, &xi)| gi * act.derivative(xi))
                        .collect()
                }
                Op::Block(b) => {
                    let bc = cache.blocks[idx].as_ref().expect("block cache");
                    self.block_backward(input, n, &cache.embedding, b, bc, &g, grad)
                }
            };
        }
        if g.iter().any(|v| !v.is_finite()) || grad.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network backward pass".into()));
        }
        Tensor::new(vec![n, self.config.input_dim], g)
    }

    #[allow(clippy::too_many_arguments)]
    fn block_backward(
        &self,
        h_in: &[f64],
        n: usize,
        emb: &[f64],
        b: &BlockSlots,
        c: &BlockCache,
        g: &[f64],
        grad: &mut [f64],
    ) -> Vec<f64> {
        let d = b.dim;
        let act = self.config.activation;
        // residual path
        let mut dh = g.to_vec();
        let dpre: Vec<f64> = g
            .iter()
            .zip(&c.pre_act)
            .map(|(gi, &w)| gi * act.derivative(w))
            .collect();
        let mut daffine = dpre.clone();
        if let Some((ls, lh)) = &b.time {
            let mut dscale = vec![0.0; n * d];
            for k in 0..n * d {
                daffine[k] = dpre[k] * (1.0 + c.scale[k]);
                dscale[k] = dpre[k] * c.affine[k];
            }
            linear_backward(emb, n, &self.params, ls, &dscale, grad, None);
            linear_backward(emb, n, &self.params, lh, &dpre, grad, None);
        }
        let gamma = &self.params[b.gamma..b.gamma + d];
        let inv_std: Vec<f64> = self.buffers[b.var..b.var + d]
            .iter()
            .map(|v| 1.0 / (v + NORM_EPS).sqrt())
            .collect();
        let mut du = vec![0.0; n * d];
        for i in 0..n {
            for j in 0..d {
                let k = i * d + j;
                grad[b.gamma + j] += daffine[k] * c.normalized[k];
                grad[b.beta + j] += daffine[k];
                du[k] = daffine[k] * gamma[j] * inv_std[j];
            }
        }
        linear_backward(h_in, n, &self.params, &b.linear, &du, grad, Some(&mut dh));
        dh
    }

    /// Exponential-moving-average update of the normalization statistics
    /// from a cached forward pass. No-op when `momentum == 0`.
    pub fn update_norm_stats(&mut self, cache: &ForwardCache, momentum: f64) {
        if momentum <= 0.0 {
            return;
        }
        let n = cache.rows as f64;
        for (idx, op) in self.ops.iter().enumerate() {
            let (Op::Block(b), Some(bc)) = (op, cache.blocks[idx].as_ref()) else {
                continue;
            };
            let d = b.dim;
            for j in 0..d {
                let mut sum = 0.0;
                let mut sq = 0.0;
                for i in 0..cache.rows {
                    let v = bc.linear_out[i * d + j];
                    sum += v;
                    sq += v * v;
                }
                let mean = sum / n;
                let var = (sq / n - mean * mean).max(0.0);
                let m = &mut self.buffers[b.mean + j];
                *m = (1.0 - momentum) * *m + momentum * mean;
                let v = &mut self.buffers[b.var + j];
                *v = (1.0 - momentum) * *v + momentum * var;
            }
        }
    }

    /// Human-readable layer list, used in error messages and the CLI.
    pub fn describe(&self) -> Vec<String> {
        self.ops
            .iter()
            .enumerate()
            .map(|(i, op)| format!("{i}: {}", op.name()))
            .collect()
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn linear_forward(x: &[f64], n: usize, p: &[f64], l: &LinearSlots, y: &mut [f64]) {
    let w = &p[l.weight..l.weight + l.input * l.output];
    let bias = &p[l.bias..l.bias + l.output];
    for i in 0..n {
        let xi = &x[i * l.input..(i + 1) * l.input];
        let yi = &mut y[i * l.output..(i + 1) * l.output];
        for o in 0..l.output {
            yi[o] = dot(&w[o * l.input..(o + 1) * l.input], xi) + bias[o];
        }
    }
}

fn linear_backward(
    x: &[f64],
    n: usize,
    p: &[f64],
    l: &LinearSlots,
    dy: &[f64],
    grad: &mut [f64],
    dx: Option<&mut [f64]>,
) {
    let (wi, bi) = (l.weight, l.bias);
    for i in 0..n {
        let xi = &x[i * l.input..(i + 1) * l.input];
        let dyi = &dy[i * l.output..(i + 1) * l.output];
        for (o, &g) in dyi.iter().enumerate() {
            if g != 0.0 {
                let row = wi + o * l.input;
                axpy(g, xi, &mut grad[row..row + l.input]);
            }
            grad[bi + o] += g;
        }
    }
    if let Some(dx) = dx {
        let w = &p[wi..wi + l.input * l.output];
        for i in 0..n {
            let dyi = &dy[i * l.output..(i + 1) * l.output];
            let dxi = &mut dx[i * l.input..(i + 1) * l.input];
            for (o, &g) in dyi.iter().enumerate() {
                if g != 0.0 {
                    axpy(g, &w[o * l.input..(o + 1) * l.input], dxi);
                }
            }
        }
    }
}
