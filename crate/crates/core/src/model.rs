//! The inpainting transformer: embeddings, feature self-attention, pre-norm
//! blocks with long residual connections and the sigmoid output head.

use intra_tensor::{Graph, Real, Tensor, Var};
use rand::Rng;

use crate::error::{IntraError, Result};
use crate::patching::WindowSample;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub patch_size: usize,
    pub window_side: usize,
    pub latent_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub image_size: usize,
    pub channels: usize,
    pub use_mfsa: bool,
    pub use_long_residuals: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            patch_size: 16,
            window_side: 7,
            latent_dim: 512,
            num_blocks: 13,
            num_heads: 8,
            image_size: 256,
            channels: 3,
            use_mfsa: true,
            use_long_residuals: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(IntraError::Config(msg));
        if self.patch_size == 0 || self.latent_dim == 0 || self.num_heads == 0 || self.channels == 0 {
            return bad("patch_size, latent_dim, num_heads and channels must be positive".into());
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "image_size {} is not a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if !self.latent_dim.is_multiple_of(self.num_heads) {
            return bad(format!(
                "latent_dim {} not divisible by num_heads {}",
                self.latent_dim, self.num_heads
            ));
        }
        if self.use_mfsa && (!self.latent_dim.is_multiple_of(2) || !(self.latent_dim / 2).is_multiple_of(self.num_heads)) {
            return bad(format!(
                "latent_dim/2 = {} not divisible by num_heads {}",
                self.latent_dim as f64 / 2.0,
                self.num_heads
            ));
        }
        if self.window_side * self.window_side < 2 {
            return bad(format!("window_side {} gives fewer than 2 patches", self.window_side));
        }
        if self.window_side > self.grid_side() {
            return bad(format!(
                "window_side {} exceeds the {}x{} patch grid",
                self.window_side,
                self.grid_side(),
                self.grid_side()
            ));
        }
        Ok(())
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_positions(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn seq_len(&self) -> usize {
        self.window_side * self.window_side
    }

    /// Width of queries and keys.
    pub fn qk_dim(&self) -> usize {
        if self.use_mfsa {
            self.latent_dim / 2
        } else {
            self.latent_dim
        }
    }
}

/// Exact learnable scalar count for `config`.
pub fn count_parameters(config: &ModelConfig) -> usize {
    let d = config.latent_dim;
    let p = config.patch_dim();
    let linear = |i: usize, o: usize| i * o + o;
    let qk = if config.use_mfsa {
        linear(d, 2 * d) + linear(2 * d, d / 2)
    } else {
        linear(d, d)
    };
    let block = 2 * qk + 2 * linear(d, d) + 4 * d + linear(d, 4 * d) + linear(4 * d, d);
    p * d + config.num_positions() * d + d + config.num_blocks * block + linear(d, p)
}

/// Handles of the query or key projection.
#[derive(Debug, Clone, Copy)]
enum Projection {
    Mlp { fc1_w: usize, fc1_b: usize, fc2_w: usize, fc2_b: usize },
    Linear { w: usize, b: usize },
}

#[derive(Debug, Clone, Copy)]
struct BlockParams {
    norm1_scale: usize,
    norm1_shift: usize,
    query: Projection,
    key: Projection,
    value_w: usize,
    value_b: usize,
    out_w: usize,
    out_b: usize,
    norm2_scale: usize,
    norm2_shift: usize,
    fc1_w: usize,
    fc1_b: usize,
    fc2_w: usize,
    fc2_b: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    patch_embed: usize,
    pos_embed: usize,
    inpaint_token: usize,
    blocks: Vec<BlockParams>,
    head_w: usize,
    head_b: usize,
}

enum Init {
    He(usize),
    Zeros,
    Ones,
}

struct LayoutBuilder {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    inits: Vec<Init>,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.names.push(name);
        self.shapes.push(shape);
        self.inits.push(init);
        self.names.len() - 1
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> (usize, usize) {
        let w = self.add(format!("{prefix}.weight"), vec![fan_in, fan_out], Init::He(fan_in));
        let b = self.add(format!("{prefix}.bias"), vec![fan_out], Init::Zeros);
        (w, b)
    }

    fn norm(&mut self, prefix: &str, d: usize) -> (usize, usize) {
        let s = self.add(format!("{prefix}.scale"), vec![d], Init::Ones);
        let t = self.add(format!("{prefix}.shift"), vec![d], Init::Zeros);
        (s, t)
    }

    fn projection(&mut self, prefix: &str, config: &ModelConfig) -> Projection {
        let d = config.latent_dim;
        if config.use_mfsa {
            let (fc1_w, fc1_b) = self.linear(&format!("{prefix}.fc1"), d, 2 * d);
            let (fc2_w, fc2_b) = self.linear(&format!("{prefix}.fc2"), 2 * d, d / 2);
            Projection::Mlp { fc1_w, fc1_b, fc2_w, fc2_b }
        } else {
            let (w, b) = self.linear(prefix, d, d);
            Projection::Linear { w, b }
        }
    }
}

fn build_layout(config: &ModelConfig) -> (Layout, LayoutBuilder) {
    let d = config.latent_dim;
    let p = config.patch_dim();
    let mut lb = LayoutBuilder {
        names: Vec::new(),
        shapes: Vec::new(),
        inits: Vec::new(),
    };
    let patch_embed = lb.add("patch_embed.weight".into(), vec![p, d], Init::He(p));
    // table lookups are one-hot products, fan-in 1
    let pos_embed = lb.add("pos_embed".into(), vec![config.num_positions(), d], Init::He(1));
    let inpaint_token = lb.add("inpaint_token".into(), vec![d], Init::He(1));
    let blocks = (0..config.num_blocks)
        .map(|i| {
            let pre = format!("blocks.{i}");
            let (norm1_scale, norm1_shift) = lb.norm(&format!("{pre}.norm1"), d);
            let query = lb.projection(&format!("{pre}.attn.query"), config);
            let key = lb.projection(&format!("{pre}.attn.key"), config);
            let (value_w, value_b) = lb.linear(&format!("{pre}.attn.value"), d, d);
            let (out_w, out_b) = lb.linear(&format!("{pre}.attn.out"), d, d);
            let (norm2_scale, norm2_shift) = lb.norm(&format!("{pre}.norm2"), d);
            let (fc1_w, fc1_b) = lb.linear(&format!("{pre}.mlp.fc1"), d, 4 * d);
            let (fc2_w, fc2_b) = lb.linear(&format!("{pre}.mlp.fc2"), 4 * d, d);
            BlockParams {
                norm1_scale,
                norm1_shift,
                query,
                key,
                value_w,
                value_b,
                out_w,
                out_b,
                norm2_scale,
                norm2_shift,
                fc1_w,
                fc1_b,
                fc2_w,
                fc2_b,
            }
        })
        .collect();
    let (head_w, head_b) = lb.linear("head", d, p);
    (
        Layout {
            patch_embed,
            pos_embed,
            inpaint_token,
            blocks,
            head_w,
            head_b,
        },
        lb,
    )
}

/// A batch of windows laid out for the model.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowBatch {
    batch: usize,
    seq_len: usize,
    patch_dim: usize,
    /// `[B*S, P]`, target rows zeroed.
    patches: Vec<f32>,
    /// 0-based position-table rows, `B*S`.
    rows: Vec<usize>,
    target_slots: Vec<usize>,
    /// `[B, P]`
    targets: Vec<f32>,
}

impl WindowBatch {
    pub fn new(samples: &[WindowSample], config: &ModelConfig) -> Result<Self> {
        let s = config.seq_len();
        let p = config.patch_dim();
        let table = config.num_positions();
        if samples.is_empty() {
            return Err(IntraError::invalid("empty window batch"));
        }
        let mut patches = Vec::with_capacity(samples.len() * s * p);
        let mut rows = Vec::with_capacity(samples.len() * s);
        let mut target_slots = Vec::with_capacity(samples.len());
        let mut targets = Vec::with_capacity(samples.len() * p);
        for w in samples {
            if w.seq_len() != s || w.patches.len() != s * p || w.target.len() != p || w.target_slot >= s {
                return Err(IntraError::invalid(format!(
                    "window of {} patches x {} values does not match sequence length {s} and patch size {p}",
                    w.seq_len(),
                    w.patches.len() / w.seq_len().max(1)
                )));
            }
            let mut seen = w.positions.clone();
            seen.sort_unstable();
            if seen.windows(2).any(|pair| pair[0] == pair[1]) {
                return Err(IntraError::invalid("duplicate positions in window"));
            }
            if let Some(&bad) = w.positions.iter().find(|&&q| q == 0 || q > table) {
                return Err(IntraError::invalid(format!(
                    "position {bad} outside the position table 1..={table}"
                )));
            }
            for (i, chunk) in w.patches.chunks_exact(p).enumerate() {
                if i == w.target_slot {
                    patches.extend(std::iter::repeat_n(0.0, p));
                } else {
                    patches.extend_from_slice(chunk);
                }
            }
            rows.extend(w.positions.iter().map(|&q| q - 1));
            target_slots.push(w.target_slot);
            targets.extend_from_slice(&w.target);
        }
        Ok(WindowBatch {
            batch: samples.len(),
            seq_len: s,
            patch_dim: p,
            patches,
            rows,
            target_slots,
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.batch
    }

    pub fn is_empty(&self) -> bool {
        self.batch == 0
    }

    pub fn targets<T: Real>(&self) -> Tensor<T> {
        Tensor::new([self.batch, self.patch_dim], self.targets.iter().map(|&v| T::lit(v as f64)).collect())
            .expect("target shape")
    }
}

/// Graph handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// One handle per model parameter, in parameter order.
    pub params: Vec<Var>,
    pub embedding: Var,
    pub block_outputs: Vec<Var>,
    /// `[B*H, S, S]` attention weights per block.
    pub attention: Vec<Var>,
    /// `[B, P]` reconstructed patches in (0, 1).
    pub output: Var,
}

/// Model weights plus configuration.
#[derive(Debug, Clone)]
pub struct IntraModel<T: Real> {
    config: ModelConfig,
    layout: Layout,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
}

impl<T: Real> PartialEq for IntraModel<T> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.names == other.names && self.params == other.params
    }
}

impl<T: Real> IntraModel<T> {
    /// Randomly initialized model.
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (layout, lb) = build_layout(&config);
        let params = lb
            .shapes
            .iter()
            .zip(&lb.inits)
            .map(|(shape, init)| match init {
                Init::Zeros => Tensor::zeros(shape.clone()),
                Init::Ones => Tensor::ones(shape.clone()),
                Init::He(fan_in) => {
                    let bound = (6.0 / *fan_in as f64).sqrt();
                    Tensor::from_fn(shape.clone(), |_| T::lit(rng.gen_range(-bound..bound)))
                }
            })
            .collect();
        Ok(IntraModel {
            config,
            layout,
            names: lb.names,
            params,
        })
    }

    /// Model from named tensors; every expected name must be present once.
    pub fn from_named(config: ModelConfig, mut named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        config.validate()?;
        let (layout, lb) = build_layout(&config);
        if named.len() != lb.names.len() {
            return Err(IntraError::invalid(format!(
                "expected {} parameter tensors, found {}",
                lb.names.len(),
                named.len()
            )));
        }
        let mut params = Vec::with_capacity(lb.names.len());
        for (name, shape) in lb.names.iter().zip(&lb.shapes) {
            let pos = named
                .iter()
                .position(|(n, _)| n == name)
                .ok_or_else(|| IntraError::invalid(format!("missing parameter {name}")))?;
            let (_, t) = named.swap_remove(pos);
            if t.shape() != shape.as_slice() {
                return Err(IntraError::invalid(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    shape
                )));
            }
            params.push(t);
        }
        Ok(IntraModel {
            config,
            layout,
            names: lb.names,
            params,
        })
    }

    /// Same architecture with replacement weights, in parameter order.
    pub fn with_params(&self, params: Vec<Tensor<T>>) -> Result<Self> {
        if params.len() != self.params.len()
            || params.iter().zip(&self.params).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(IntraError::invalid("replacement parameters do not match the model layout"));
        }
        Ok(IntraModel {
            config: self.config,
            layout: self.layout.clone(),
            names: self.names.clone(),
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.params[i])
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Same weights in another precision.
    pub fn cast<U: Real>(&self) -> IntraModel<U> {
        IntraModel {
            config: self.config,
            layout: self.layout.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
        }
    }

    fn linear<'a>(&self, g: &mut Graph<'a, T>, p: &[Var], x: Var, w: usize, b: usize) -> Result<Var> {
        let y = g.matmul(x, p[w])?;
        Ok(g.add(y, p[b])?)
    }

    fn project<'a>(&self, g: &mut Graph<'a, T>, p: &[Var], x: Var, proj: Projection) -> Result<Var> {
        match proj {
            Projection::Linear { w, b } => self.linear(g, p, x, w, b),
            Projection::Mlp { fc1_w, fc1_b, fc2_w, fc2_b } => {
                let h = self.linear(g, p, x, fc1_w, fc1_b)?;
                let h = g.gelu(h)?;
                self.linear(g, p, h, fc2_w, fc2_b)
            }
        }
    }

    /// Sequence embedding `[B*S, D]`: patch projection or inpaint token plus
    /// position embedding.
    pub fn embed<'a>(&self, g: &mut Graph<'a, T>, p: &[Var], batch: &WindowBatch) -> Result<Var> {
        let (b, s, pd) = (batch.batch, batch.seq_len, batch.patch_dim);
        let x = Tensor::new([b * s, pd], batch.patches.iter().map(|&v| T::lit(v as f64)).collect())?;
        let mut mask = vec![T::zero(); b * s];
        for (i, &slot) in batch.target_slots.iter().enumerate() {
            mask[i * s + slot] = T::one();
        }
        let x = g.constant(x);
        let mask = g.constant(Tensor::new([b * s, 1], mask)?);
        let content = g.matmul(x, p[self.layout.patch_embed])?;
        let token = g.mul(mask, p[self.layout.inpaint_token])?;
        let pos = g.gather_rows(p[self.layout.pos_embed], &batch.rows)?;
        let e = g.add(content, token)?;
        Ok(g.add(e, pos)?)
    }

    /// Multi-head (feature) self-attention over `[B*S, D]`; also returns the
    /// attention weights.
    pub fn attention<'a>(&self, g: &mut Graph<'a, T>, p: &[Var], block: usize, x: Var, batch: usize) -> Result<(Var, Var)> {
        let bp = self.layout.blocks[block];
        let c = &self.config;
        let (d, h) = (c.latent_dim, c.num_heads);
        let s = g.shape(x)[0] / batch;
        let qk = c.qk_dim();
        let q = self.project(g, p, x, bp.query)?;
        let k = self.project(g, p, x, bp.key)?;
        let v = self.linear(g, p, x, bp.value_w, bp.value_b)?;
        let heads = |g: &mut Graph<'a, T>, t: Var, width: usize| -> Result<Var> {
            let t = g.reshape(t, &[batch, s, h, width / h])?;
            let t = g.permute(t, &[0, 2, 1, 3])?;
            Ok(g.reshape(t, &[batch * h, s, width / h])?)
        };
        let qh = heads(g, q, qk)?;
        let kh = heads(g, k, qk)?;
        let vh = heads(g, v, d)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.mul_scalar(scores, 1.0 / ((qk / h) as f64).sqrt())?;
        let weights = g.softmax(scores)?;
        let ctx = g.matmul(weights, vh)?;
        let ctx = g.reshape(ctx, &[batch, h, s, d / h])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[batch * s, d])?;
        let out = self.linear(g, p, ctx, bp.out_w, bp.out_b)?;
        Ok((out, weights))
    }

    /// `y = x + attn(LN(x)); out = y + MLP(LN(y))`.
    pub fn transformer_block<'a>(&self, g: &mut Graph<'a, T>, p: &[Var], block: usize, x: Var, batch: usize) -> Result<(Var, Var)> {
        let bp = self.layout.blocks[block];
        let n1 = g.layer_norm(x, p[bp.norm1_scale], p[bp.norm1_shift], LAYER_NORM_EPS)?;
        let (a, weights) = self.attention(g, p, block, n1, batch)?;
        let y = g.add(x, a)?;
        let n2 = g.layer_norm(y, p[bp.norm2_scale], p[bp.norm2_shift], LAYER_NORM_EPS)?;
        let h = self.linear(g, p, n2, bp.fc1_w, bp.fc1_b)?;
        let h = g.gelu(h)?;
        let m = self.linear(g, p, h, bp.fc2_w, bp.fc2_b)?;
        Ok((g.add(y, m)?, weights))
    }

    /// Full forward pass recorded on `g`.
    pub fn forward_graph<'a>(&'a self, g: &mut Graph<'a, T>, batch: &WindowBatch) -> Result<ForwardTrace> {
        if batch.seq_len != self.config.seq_len() || batch.patch_dim != self.config.patch_dim() {
            return Err(IntraError::invalid("window batch built for a different configuration"));
        }
        let p: Vec<Var> = self.params.iter().map(|t| g.param(t)).collect();
        let b = batch.batch;
        let embedding = self.embed(g, &p, batch)?;
        let n = self.config.num_blocks;
        let mut outs: Vec<Var> = Vec::with_capacity(n);
        let mut attention = Vec::with_capacity(n);
        for q in 1..=n {
            let mut input = if q == 1 { embedding } else { outs[q - 2] };
            let partner = n + 1 - q;
            if self.config.use_long_residuals && partner <= n / 2 && partner < q {
                input = g.add(input, outs[partner - 1])?;
            }
            let (out, w) = self.transformer_block(g, &p, q - 1, input, b)?;
            outs.push(out);
            attention.push(w);
        }
        let last = outs.last().copied().unwrap_or(embedding);
        let seq = g.reshape(last, &[b, batch.seq_len, self.config.latent_dim])?;
        let pooled = g.mean_axis(seq, 1)?;
        let logits = self.linear(g, &p, pooled, self.layout.head_w, self.layout.head_b)?;
        let output = g.sigmoid(logits)?;
        Ok(ForwardTrace {
            params: p,
            embedding,
            block_outputs: outs,
            attention,
            output,
        })
    }

    /// Reconstructed target patches `[B, P]`.
    pub fn forward(&self, batch: &WindowBatch) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let trace = self.forward_graph(&mut g, batch)?;
        Ok(g.value(trace.output).clone())
    }

    /// Embedded sequences `[B*S, D]`.
    pub fn embed_window(&self, batch: &WindowBatch) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p: Vec<Var> = self.params.iter().map(|t| g.param(t)).collect();
        let e = self.embed(&mut g, &p, batch)?;
        Ok(g.value(e).clone())
    }
}
