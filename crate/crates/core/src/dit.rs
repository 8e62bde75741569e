//! Video transformer with full 3D attention over geometry and track tokens.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{input_err, shape_err, Error, Result};
use crate::latentcodec::LatentGrid;
use crate::nn::{
    gelu, gelu_grad, join, randn, tile_input_projection, widen_output_projection, LayerNorm, LayerNormCache, Linear,
    LoraAdapter, Parameters,
};
use crate::scalar::Scalar;
use crate::tensor::{gemm, Mat};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    /// Per-head channel split `(t, x, y)`; `None` means `(d_k/2, d_k/4, d_k/4)`.
    pub rope_partition: Option<[usize; 3]>,
    pub rope_theta: f64,
    pub latent_channels: usize,
    pub patch: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Clip length `1 + F` the model is trained for.
    pub frames: usize,
    pub mlp_ratio: usize,
    /// Zero disables adapters.
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub first_frame_anchoring: bool,
    pub temporal_rope_alignment: bool,
    pub residual_head: bool,
    /// Start key projections as copies of the query projections so that
    /// identical content at identical positions scores highest.
    pub tie_qk_init: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            dim: 64,
            heads: 4,
            rope_partition: None,
            rope_theta: 10_000.0,
            latent_channels: 48,
            patch: 4,
            grid_h: 8,
            grid_w: 8,
            frames: 4,
            mlp_ratio: 4,
            lora_rank: 4,
            lora_alpha: 4.0,
            first_frame_anchoring: true,
            temporal_rope_alignment: true,
            residual_head: true,
            tie_qk_init: true,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads.max(1)
    }

    pub fn partition(&self) -> [usize; 3] {
        self.rope_partition.unwrap_or_else(|| {
            let dk = self.head_dim();
            [dk / 2, dk / 4, dk - dk / 2 - dk / 4]
        })
    }

    pub fn image_width(&self) -> usize {
        self.grid_w * self.patch
    }

    pub fn image_height(&self) -> usize {
        self.grid_h * self.patch
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("layers", self.layers),
            ("dim", self.dim),
            ("heads", self.heads),
            ("latent_channels", self.latent_channels),
            ("patch", self.patch),
            ("grid_h", self.grid_h),
            ("grid_w", self.grid_w),
            ("frames", self.frames),
            ("mlp_ratio", self.mlp_ratio),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(input_err(format!("model config field `{name}` must be positive")));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(input_err(format!("dim {} is not divisible by {} heads", self.dim, self.heads)));
        }
        let part = self.partition();
        if part.iter().any(|d| d % 2 != 0) || part.iter().sum::<usize>() != self.head_dim() {
            return Err(input_err(format!(
                "rope partition {part:?} must be even and sum to head dim {}",
                self.head_dim()
            )));
        }
        if !(self.rope_theta > 0.0) {
            return Err(input_err("rope theta must be positive"));
        }
        Ok(())
    }
}

/// Token position `(x, y, t)`.
pub type Position = [i64; 3];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Segment {
    Geometry,
    Track,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence<T> {
    /// `N x 2c` latent features, one row per token.
    pub tokens: Mat<T>,
    pub positions: Vec<Position>,
    pub segments: Vec<Segment>,
}

impl<T: Scalar> TokenSequence<T> {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Reorders tokens so that new index `i` holds old token `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> TokenSequence<T> {
        let c = self.tokens.cols;
        let mut tokens = Mat::zeros(order.len(), c);
        for (i, &o) in order.iter().enumerate() {
            tokens.row_mut(i).copy_from_slice(self.tokens.row(o));
        }
        TokenSequence {
            tokens,
            positions: order.iter().map(|&o| self.positions[o]).collect(),
            segments: order.iter().map(|&o| self.segments[o]).collect(),
        }
    }
}

/// Track latents: the anchor geometry latent replicated to every timestamp,
/// or each frame's own geometry latent when anchoring is disabled.
pub fn build_dual_latents<T: Scalar>(geometry: &[LatentGrid<T>], first_frame_anchoring: bool) -> Result<Vec<LatentGrid<T>>> {
    let anchor = geometry.first().ok_or_else(|| input_err("at least one geometry latent is required"))?;
    Ok(if first_frame_anchoring {
        vec![anchor.clone(); geometry.len()]
    } else {
        geometry.to_vec()
    })
}

/// Geometry tokens first (frame-major, then row-major over the grid), then
/// track tokens in the same order.
pub fn assign_positions<T: Scalar>(
    geometry: &[LatentGrid<T>],
    track: &[LatentGrid<T>],
    temporal_rope_alignment: bool,
) -> Result<TokenSequence<T>> {
    let first = geometry.first().ok_or_else(|| input_err("at least one geometry latent is required"))?;
    let (h, w, c) = (first.h, first.w, first.channels());
    if track.len() != geometry.len() {
        return Err(shape_err(format!("{} track latents for {} geometry latents", track.len(), geometry.len())));
    }
    if geometry.iter().chain(track).any(|g| (g.h, g.w, g.channels()) != (h, w, c)) {
        return Err(shape_err("all latents must share grid size and channels"));
    }
    let n = 2 * geometry.len() * h * w;
    let mut tokens = Mat::zeros(n, c);
    let mut positions = Vec::with_capacity(n);
    let mut segments = Vec::with_capacity(n);
    let mut row = 0;
    for (segment, grids) in [(Segment::Geometry, geometry), (Segment::Track, track)] {
        for (j, g) in grids.iter().enumerate() {
            let t = if segment == Segment::Track && !temporal_rope_alignment { 0 } else { j as i64 };
            tokens.data[row * c..(row + h * w) * c].copy_from_slice(&g.values.data);
            for y in 0..h {
                for x in 0..w {
                    positions.push([x as i64, y as i64, t]);
                    segments.push(segment);
                }
            }
            row += h * w;
        }
    }
    Ok(TokenSequence {
        tokens,
        positions,
        segments,
    })
}

/// Index of the track token for grid cell `(x, y)` at frame `j`.
pub fn track_token_index(frames: usize, h: usize, w: usize, j: usize, x: usize, y: usize) -> usize {
    (frames + j) * h * w + y * w + x
}

/// Rotation angle of every channel pair of one head at `position`.
pub fn rope_angles(position: Position, partition: [usize; 3], theta: f64) -> Vec<f64> {
    let coords = [position[2], position[0], position[1]];
    let mut out = Vec::with_capacity(partition.iter().sum::<usize>() / 2);
    for (dim, coord) in partition.iter().zip(coords) {
        for m in 0..dim / 2 {
            out.push(coord as f64 * theta.powf(-2.0 * m as f64 / *dim as f64));
        }
    }
    out
}

/// Rotates consecutive channel pairs of `v` by the angles for `position`.
pub fn rope_rotate<T: Scalar>(v: &[T], position: Position, partition: [usize; 3], theta: f64) -> Result<Vec<T>> {
    if partition.iter().sum::<usize>() != v.len() || partition.iter().any(|d| d % 2 != 0) {
        return Err(shape_err(format!("partition {partition:?} does not fit a {}-vector", v.len())));
    }
    let mut out = v.to_vec();
    for (m, a) in rope_angles(position, partition, theta).into_iter().enumerate() {
        rotate_pair(&mut out, m, T::of(a.cos()), T::of(a.sin()));
    }
    Ok(out)
}

#[inline]
fn rotate_pair<T: Scalar>(v: &mut [T], m: usize, cos: T, sin: T) {
    let (a, b) = (v[2 * m], v[2 * m + 1]);
    v[2 * m] = a * cos - b * sin;
    v[2 * m + 1] = a * sin + b * cos;
}

/// Per-token cosines and sines, `N x (d_k/2)` each.
struct RopeTable<T> {
    cos: Mat<T>,
    sin: Mat<T>,
}

impl<T: Scalar> RopeTable<T> {
    fn new(positions: &[Position], partition: [usize; 3], theta: f64) -> Self {
        let pairs = partition.iter().sum::<usize>() / 2;
        let mut cos = Mat::zeros(positions.len(), pairs);
        let mut sin = Mat::zeros(positions.len(), pairs);
        for (i, p) in positions.iter().enumerate() {
            for (m, a) in rope_angles(*p, partition, theta).into_iter().enumerate() {
                *cos.at_mut(i, m) = T::of(a.cos());
                *sin.at_mut(i, m) = T::of(a.sin());
            }
        }
        Self { cos, sin }
    }

    /// Rotates every head of `x` (`N x heads*d_k`) in place; `inverse`
    /// applies the transpose rotation.
    fn apply(&self, x: &mut Mat<T>, head_dim: usize, inverse: bool) {
        let pairs = head_dim / 2;
        for r in 0..x.rows {
            let (cos, sin) = (self.cos.row(r), self.sin.row(r));
            for head in x.row_mut(r).chunks_exact_mut(head_dim) {
                for m in 0..pairs {
                    let s = if inverse { -sin[m] } else { sin[m] };
                    rotate_pair(head, m, cos[m], s);
                }
            }
        }
    }
}

fn softmax_rows<T: Scalar>(s: &mut Mat<T>) {
    for r in 0..s.rows {
        let row = s.row_mut(r);
        let max = row.iter().fold(T::neg_infinity(), |m, v| m.max(*v));
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = sum.recip();
        row.iter_mut().for_each(|v| *v *= inv);
    }
}

/// Single-head scaled dot-product attention with RoPE on queries and keys.
pub fn attention<T: Scalar>(
    queries: &Mat<T>,
    keys: &Mat<T>,
    values: &Mat<T>,
    positions: &[Position],
    partition: [usize; 3],
    theta: f64,
) -> Result<Mat<T>> {
    let n = positions.len();
    if queries.rows != n || keys.rows != n || values.rows != n {
        return Err(shape_err("queries, keys, values and positions must have equal length"));
    }
    let dk = queries.cols;
    if keys.cols != dk || partition.iter().sum::<usize>() != dk || partition.iter().any(|d| d % 2 != 0) {
        return Err(shape_err(format!("query/key width {dk} does not match partition {partition:?}")));
    }
    let table = RopeTable::new(positions, partition, theta);
    let (mut q, mut k) = (queries.clone(), keys.clone());
    table.apply(&mut q, dk, false);
    table.apply(&mut k, dk, false);
    let mut s = Mat::zeros(n, n);
    gemm(T::of(1.0 / (dk as f64).sqrt()), q.view(), k.t(), T::zero(), s.view_mut());
    softmax_rows(&mut s);
    Ok(crate::tensor::matmul(s.view(), values.view()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    pub norm1: LayerNorm<T>,
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub o: Linear<T>,
    pub norm2: LayerNorm<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DitParams<T> {
    /// `2c -> d` token embedding.
    pub embed: Linear<T>,
    /// Constant conditioning for the fixed zero timestep.
    pub time_bias: Mat<T>,
    pub blocks: Vec<Block<T>>,
    pub final_norm: LayerNorm<T>,
    /// `d -> 2c` output head.
    pub head: Linear<T>,
}

/// Sinusoidal timestep embedding evaluated at `t = 0`.
fn zero_timestep_embedding<T: Scalar>(d: usize) -> Mat<T> {
    Mat::from_fn(1, d, |_, c| if c < d / 2 { T::one() } else { T::zero() })
}

impl<T: Scalar> DitParams<T> {
    pub fn new<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (d, c) = (cfg.dim, cfg.latent_channels);
        let hidden = cfg.mlp_ratio * d;
        let residual_std = 1.0 / ((d as f64) * 2.0 * cfg.layers as f64).sqrt();
        let blocks = (0..cfg.layers)
            .map(|_| {
                let mut o = Linear::new(d, d, rng);
                o.weight = randn(d, d, residual_std, rng);
                let mut fc2 = Linear::new(hidden, d, rng);
                fc2.weight = randn(hidden, d, residual_std * (d as f64 / hidden as f64).sqrt(), rng);
                let q = Linear::new(d, d, rng);
                let k = if cfg.tie_qk_init { q.clone() } else { Linear::new(d, d, rng) };
                Block {
                    norm1: LayerNorm::new(d),
                    q,
                    k,
                    v: Linear::new(d, d, rng),
                    o,
                    norm2: LayerNorm::new(d),
                    fc1: Linear::new(d, hidden, rng),
                    fc2,
                }
            })
            .collect();
        let mut params = Self {
            embed: tile_input_projection(&Linear::new(c, d, rng)),
            time_bias: zero_timestep_embedding(d),
            blocks,
            final_norm: LayerNorm::new(d),
            head: widen_output_projection(&Linear::new(d, c, rng)),
        };
        if cfg.lora_rank > 0 {
            params.attach_lora(cfg.lora_rank, cfg.lora_alpha, rng);
        }
        Ok(params)
    }

    /// Attaches fresh zero-`B` adapters to every attention and MLP linear.
    pub fn attach_lora<R: Rng>(&mut self, rank: usize, alpha: f64, rng: &mut R) {
        for b in &mut self.blocks {
            for lin in [&mut b.q, &mut b.k, &mut b.v, &mut b.o, &mut b.fc1, &mut b.fc2] {
                lin.lora = Some(LoraAdapter::new(lin.d_in(), lin.d_out(), rank, alpha, rng));
            }
        }
    }

    pub fn without_lora(&self) -> Self {
        let mut out = self.clone();
        for b in &mut out.blocks {
            for lin in [&mut b.q, &mut b.k, &mut b.v, &mut b.o, &mut b.fc1, &mut b.fc2] {
                lin.lora = None;
            }
        }
        out
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.zero_all();
        z
    }

    pub fn cast<U: Scalar>(&self) -> DitParams<U> {
        DitParams {
            embed: self.embed.cast(),
            time_bias: self.time_bias.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    norm1: b.norm1.cast(),
                    q: b.q.cast(),
                    k: b.k.cast(),
                    v: b.v.cast(),
                    o: b.o.cast(),
                    norm2: b.norm2.cast(),
                    fc1: b.fc1.cast(),
                    fc2: b.fc2.cast(),
                })
                .collect(),
            final_norm: self.final_norm.cast(),
            head: self.head.cast(),
        }
    }
}

impl<T: Scalar> Parameters<T> for Block<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat<T>)) {
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.q.visit(&join(prefix, "q"), f);
        self.k.visit(&join(prefix, "k"), f);
        self.v.visit(&join(prefix, "v"), f);
        self.o.visit(&join(prefix, "o"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Mat<T>)) {
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        self.q.visit_mut(&join(prefix, "q"), f);
        self.k.visit_mut(&join(prefix, "k"), f);
        self.v.visit_mut(&join(prefix, "v"), f);
        self.o.visit_mut(&join(prefix, "o"), f);
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}

impl<T: Scalar> Parameters<T> for DitParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat<T>)) {
        self.embed.visit(&join(prefix, "embed"), f);
        f(join(prefix, "time_bias"), &self.time_bias);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.final_norm.visit(&join(prefix, "final_norm"), f);
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Mat<T>)) {
        self.embed.visit_mut(&join(prefix, "embed"), f);
        f(join(prefix, "time_bias"), &mut self.time_bias);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.final_norm.visit_mut(&join(prefix, "final_norm"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

/// Full attention rows captured for selected query tokens, one `Q x N`
/// matrix per `(layer, head)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTrace<T> {
    pub queries: Vec<usize>,
    pub layers: usize,
    pub heads: usize,
    pub rows: Vec<Mat<T>>,
}

impl<T: Scalar> AttentionTrace<T> {
    pub fn weights(&self, layer: usize, head: usize) -> &Mat<T> {
        &self.rows[layer * self.heads + head]
    }

    /// Attention mass of query `qi` on each geometry frame at one layer,
    /// averaged over heads and renormalized over geometry tokens.
    pub fn layer_frame_mass(&self, seq: &TokenSequence<T>, qi: usize, layer: usize, frames: usize) -> Vec<f64> {
        let mut mass = vec![0.0; frames];
        for head in 0..self.heads {
            let row = self.weights(layer, head).row(qi);
            for (k, w) in row.iter().enumerate() {
                if seq.segments[k] == Segment::Geometry {
                    mass[seq.positions[k][2] as usize] += w.as_f64();
                }
            }
        }
        let total: f64 = mass.iter().sum();
        mass.iter_mut().for_each(|m| *m /= total);
        mass
    }

    /// Geometry-frame mass of query `qi` averaged over all layers and heads.
    pub fn frame_mass(&self, seq: &TokenSequence<T>, qi: usize, frames: usize) -> Vec<f64> {
        let mut mass = vec![0.0; frames];
        for layer in 0..self.layers {
            for (m, v) in mass.iter_mut().zip(self.layer_frame_mass(seq, qi, layer, frames)) {
                *m += v / self.layers as f64;
            }
        }
        mass
    }
}

struct BlockCache<T> {
    ln1: LayerNormCache<T>,
    a: Mat<T>,
    hidden_q: Option<Mat<T>>,
    hidden_k: Option<Mat<T>>,
    hidden_v: Option<Mat<T>>,
    q_rot: Mat<T>,
    k_rot: Mat<T>,
    v: Mat<T>,
    probs: Vec<Mat<T>>,
    attn: Mat<T>,
    hidden_o: Option<Mat<T>>,
    ln2: LayerNormCache<T>,
    b: Mat<T>,
    hidden_fc1: Option<Mat<T>>,
    u: Mat<T>,
    g: Mat<T>,
    hidden_fc2: Option<Mat<T>>,
}

/// Activations kept by [`forward_tokens`] for [`backward_tokens`].
pub struct DitCache<T> {
    tokens: Mat<T>,
    hidden_embed: Option<Mat<T>>,
    rope: RopeTable<T>,
    blocks: Vec<BlockCache<T>>,
    final_ln: LayerNormCache<T>,
    final_out: Mat<T>,
    hidden_head: Option<Mat<T>>,
}

pub struct TokenOutput<T> {
    /// `N x 2c` outputs for every token in sequence order.
    pub outputs: Mat<T>,
    pub trace: Option<AttentionTrace<T>>,
    pub cache: DitCache<T>,
}

/// Runs the transformer over an arbitrary token sequence.
pub fn forward_tokens<T: Scalar>(
    cfg: &ModelConfig,
    params: &DitParams<T>,
    seq: &TokenSequence<T>,
    trace_queries: Option<&[usize]>,
) -> Result<TokenOutput<T>> {
    let n = seq.len();
    if seq.tokens.rows != n || seq.segments.len() != n {
        return Err(shape_err("token, position and segment counts differ"));
    }
    if seq.tokens.cols != params.embed.d_in() {
        return Err(shape_err(format!(
            "tokens have {} channels, embedding expects {}",
            seq.tokens.cols,
            params.embed.d_in()
        )));
    }
    if let Some(q) = trace_queries.and_then(|qs| qs.iter().find(|&&q| q >= n)) {
        return Err(input_err(format!("trace query {q} out of range for {n} tokens")));
    }
    let (heads, dk) = (cfg.heads, cfg.head_dim());
    let rope = RopeTable::new(&seq.positions, cfg.partition(), cfg.rope_theta);
    let scale = T::of(1.0 / (dk as f64).sqrt());

    let (mut h, hidden_embed) = params.embed.forward(&seq.tokens);
    h.add_row_broadcast(&params.time_bias);

    let mut trace = trace_queries.map(|qs| AttentionTrace {
        queries: qs.to_vec(),
        layers: params.blocks.len(),
        heads,
        rows: Vec::new(),
    });
    let mut caches = Vec::with_capacity(params.blocks.len());
    for blk in &params.blocks {
        let (a, ln1) = blk.norm1.forward(&h);
        let (mut q_rot, hidden_q) = blk.q.forward(&a);
        let (mut k_rot, hidden_k) = blk.k.forward(&a);
        let (v, hidden_v) = blk.v.forward(&a);
        rope.apply(&mut q_rot, dk, false);
        rope.apply(&mut k_rot, dk, false);
        let mut attn = Mat::zeros(n, cfg.dim);
        let mut probs = Vec::with_capacity(heads);
        for hd in 0..heads {
            let mut s = Mat::zeros(n, n);
            gemm(
                scale,
                q_rot.view().cols_range(hd * dk, dk),
                k_rot.view().cols_range(hd * dk, dk).t(),
                T::zero(),
                s.view_mut(),
            );
            softmax_rows(&mut s);
            gemm(
                T::one(),
                s.view(),
                v.view().cols_range(hd * dk, dk),
                T::zero(),
                attn.view_mut().cols_range(hd * dk, dk),
            );
            if let Some(tr) = trace.as_mut() {
                let rows = Mat::from_fn(tr.queries.len(), n, |i, c| s.at(tr.queries[i], c));
                tr.rows.push(rows);
            }
            probs.push(s);
        }
        let (o, hidden_o) = blk.o.forward(&attn);
        h.add_assign(&o);
        let (b, ln2) = blk.norm2.forward(&h);
        let (u, hidden_fc1) = blk.fc1.forward(&b);
        let g = Mat::from_vec(u.rows, u.cols, u.data.iter().map(|x| gelu(*x)).collect());
        let (m, hidden_fc2) = blk.fc2.forward(&g);
        h.add_assign(&m);
        caches.push(BlockCache {
            ln1,
            a,
            hidden_q,
            hidden_k,
            hidden_v,
            q_rot,
            k_rot,
            v,
            probs,
            attn,
            hidden_o,
            ln2,
            b,
            hidden_fc1,
            u,
            g,
            hidden_fc2,
        });
    }
    let (final_out, final_ln) = params.final_norm.forward(&h);
    let (outputs, hidden_head) = params.head.forward(&final_out);
    if !outputs.all_finite() {
        return Err(Error::NonFinite("transformer produced non-finite outputs".into()));
    }
    Ok(TokenOutput {
        outputs,
        trace,
        cache: DitCache {
            tokens: seq.tokens.clone(),
            hidden_embed,
            rope,
            blocks: caches,
            final_ln,
            final_out,
            hidden_head,
        },
    })
}

/// Back-propagates `d_outputs` (`N x 2c`), accumulating into `grad` and
/// returning the gradient with respect to the input tokens.
pub fn backward_tokens<T: Scalar>(
    cfg: &ModelConfig,
    params: &DitParams<T>,
    cache: &DitCache<T>,
    d_outputs: &Mat<T>,
    grad: &mut DitParams<T>,
) -> Mat<T> {
    let (heads, dk) = (cfg.heads, cfg.head_dim());
    let scale = T::of(1.0 / (dk as f64).sqrt());
    let d_final = params
        .head
        .backward(&cache.final_out, cache.hidden_head.as_ref(), d_outputs, &mut grad.head, true)
        .expect("dx requested");
    let mut dh = params.final_norm.backward(&cache.final_ln, &d_final, &mut grad.final_norm);
    let n = dh.rows;

    for (li, blk) in params.blocks.iter().enumerate().rev() {
        let c = &cache.blocks[li];
        let gb = &mut grad.blocks[li];

        let mut du = blk.fc2.backward(&c.g, c.hidden_fc2.as_ref(), &dh, &mut gb.fc2, true).expect("dx requested");
        for (d, u) in du.data.iter_mut().zip(&c.u.data) {
            *d *= gelu_grad(*u);
        }
        let db = blk.fc1.backward(&c.b, c.hidden_fc1.as_ref(), &du, &mut gb.fc1, true).expect("dx requested");
        dh.add_assign(&blk.norm2.backward(&c.ln2, &db, &mut gb.norm2));

        let d_attn = blk.o.backward(&c.attn, c.hidden_o.as_ref(), &dh, &mut gb.o, true).expect("dx requested");
        let mut dq = Mat::zeros(n, cfg.dim);
        let mut dk_mat = Mat::zeros(n, cfg.dim);
        let mut dv = Mat::zeros(n, cfg.dim);
        let mut dp = Mat::zeros(n, n);
        for hd in 0..heads {
            let p = &c.probs[hd];
            let d_o = d_attn.view().cols_range(hd * dk, dk);
            gemm(T::one(), d_o, c.v.view().cols_range(hd * dk, dk).t(), T::zero(), dp.view_mut());
            gemm(T::one(), p.t(), d_o, T::zero(), dv.view_mut().cols_range(hd * dk, dk));
            for r in 0..n {
                let (pr, dr) = (p.row(r), dp.row_mut(r));
                let dot = pr.iter().zip(dr.iter()).map(|(a, b)| *a * *b).sum::<T>();
                for (d, pv) in dr.iter_mut().zip(pr) {
                    *d = *pv * (*d - dot);
                }
            }
            gemm(
                scale,
                dp.view(),
                c.k_rot.view().cols_range(hd * dk, dk),
                T::zero(),
                dq.view_mut().cols_range(hd * dk, dk),
            );
            gemm(
                scale,
                dp.t(),
                c.q_rot.view().cols_range(hd * dk, dk),
                T::zero(),
                dk_mat.view_mut().cols_range(hd * dk, dk),
            );
        }
        cache.rope.apply(&mut dq, dk, true);
        cache.rope.apply(&mut dk_mat, dk, true);
        let mut da = blk.q.backward(&c.a, c.hidden_q.as_ref(), &dq, &mut gb.q, true).expect("dx requested");
        da.add_assign(&blk.k.backward(&c.a, c.hidden_k.as_ref(), &dk_mat, &mut gb.k, true).expect("dx requested"));
        da.add_assign(&blk.v.backward(&c.a, c.hidden_v.as_ref(), &dv, &mut gb.v, true).expect("dx requested"));
        dh.add_assign(&blk.norm1.backward(&c.ln1, &da, &mut gb.norm1));
    }
    dh.col_sums_into(&mut grad.time_bias);
    params
        .embed
        .backward(&cache.tokens, cache.hidden_embed.as_ref(), &dh, &mut grad.embed, true)
        .expect("dx requested")
}

pub struct DitOutput<T> {
    /// Per-frame `h x w x 2c` outputs of the track tokens.
    pub track: Vec<LatentGrid<T>>,
    pub sequence: TokenSequence<T>,
    pub trace: Option<AttentionTrace<T>>,
}

/// Builds the token sequence from geometry and track latents, runs the
/// transformer and returns the outputs of the track tokens.
pub fn forward<T: Scalar>(
    cfg: &ModelConfig,
    params: &DitParams<T>,
    geometry: &[LatentGrid<T>],
    track: &[LatentGrid<T>],
    trace_queries: Option<&[usize]>,
) -> Result<DitOutput<T>> {
    for g in geometry.iter().chain(track) {
        if (g.h, g.w, g.channels()) != (cfg.grid_h, cfg.grid_w, 2 * cfg.latent_channels) {
            return Err(shape_err(format!(
                "latent {}x{}x{} does not match configured {}x{}x{}",
                g.h,
                g.w,
                g.channels(),
                cfg.grid_h,
                cfg.grid_w,
                2 * cfg.latent_channels
            )));
        }
    }
    let seq = assign_positions(geometry, track, cfg.temporal_rope_alignment)?;
    let out = forward_tokens(cfg, params, &seq, trace_queries)?;
    let hw = cfg.tokens_per_frame();
    let offset = geometry.len() * hw;
    let track_out = (0..track.len())
        .map(|j| LatentGrid::new(cfg.grid_h, cfg.grid_w, out.outputs.row_block(offset + j * hw, hw)))
        .collect::<Result<Vec<_>>>()?;
    Ok(DitOutput {
        track: track_out,
        sequence: seq,
        trace: out.trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            layers: 2,
            dim: 16,
            heads: 2,
            latent_channels: 3,
            patch: 1,
            grid_h: 2,
            grid_w: 3,
            frames: 3,
            lora_rank: 2,
            ..ModelConfig::default()
        }
    }

    fn perturbed_params(cfg: &ModelConfig, seed: u64) -> DitParams<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p: DitParams<f64> = DitParams::new(cfg, &mut rng).unwrap();
        p.visit_mut("", &mut |_, m| {
            for v in m.data.iter_mut() {
                *v += rng.random_range(-0.2..0.2);
            }
        });
        p
    }

    fn latents(cfg: &ModelConfig, frames: usize, seed: u64) -> Vec<LatentGrid<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..frames)
            .map(|_| {
                LatentGrid::new(cfg.grid_h, cfg.grid_w, randn(cfg.tokens_per_frame(), 2 * cfg.latent_channels, 1.0, &mut rng))
                    .unwrap()
            })
            .collect()
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        assert_eq!(ModelConfig::default().partition(), [8, 4, 4]);
        let bad = ModelConfig { heads: 3, ..ModelConfig::default() };
        assert!(bad.validate().is_err());
        let odd = ModelConfig {
            rope_partition: Some([6, 5, 5]),
            ..ModelConfig::default()
        };
        assert!(odd.validate().is_err());
    }

    #[test]
    fn dual_latents_and_positions() {
        let cfg = tiny_config();
        let g = latents(&cfg, 3, 0);
        let r = build_dual_latents(&g, true).unwrap();
        assert!(r.iter().all(|x| *x == g[0]));
        assert_eq!(build_dual_latents(&g, false).unwrap(), g);
        let single = build_dual_latents(&g[..1], true).unwrap();
        let seq = assign_positions(&g[..1], &single, true).unwrap();
        assert_eq!(seq.len(), 2 * cfg.tokens_per_frame());

        let seq = assign_positions(&g, &r, true).unwrap();
        let hw = cfg.tokens_per_frame();
        assert_eq!(seq.len(), 2 * 3 * hw);
        assert_eq!(&seq.positions[..3 * hw], &seq.positions[3 * hw..]);
        assert_eq!(seq.segments.iter().filter(|s| **s == Segment::Track).count(), 3 * hw);
        assert_eq!(seq.positions[track_token_index(3, 2, 3, 2, 1, 1)], [1, 1, 2]);
        let flat = assign_positions(&g, &r, false).unwrap();
        assert!(flat.positions[3 * hw..].iter().all(|p| p[2] == 0));
        assert_eq!(&flat.positions[..3 * hw], &seq.positions[..3 * hw]);
    }

    #[test]
    fn rope_rotation_algebra() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let part = [4, 2, 2];
        assert_eq!(rope_rotate(&v, [0, 0, 0], part, 1e4).unwrap(), v);
        let (p, q) = ([2, -1, 3], [-4, 5, 1]);
        let twice = rope_rotate(&rope_rotate(&v, p, part, 1e4).unwrap(), q, part, 1e4).unwrap();
        let once = rope_rotate(&v, [p[0] + q[0], p[1] + q[1], p[2] + q[2]], part, 1e4).unwrap();
        for (a, b) in twice.iter().zip(&once) {
            assert!((a - b).abs() < 1e-12);
        }
        let r = rope_rotate(&[1.0, 0.0], [0, 0, 1], [2, 0, 0], 123.0).unwrap();
        assert_eq!(r, vec![1f64.cos(), 1f64.sin()]);
        assert!(rope_rotate(&v, p, [4, 2, 0], 1e4).is_err());
    }

    #[test]
    fn rope_scores_depend_only_on_offsets() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let part = [8, 4, 4];
        for _ in 0..200 {
            let q: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
            let k: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut pos = || [rng.random_range(-20..20), rng.random_range(-20..20), rng.random_range(-20..20)];
            let (pi, pj, delta) = (pos(), pos(), pos());
            let score = |a: Position, b: Position| {
                let qr = rope_rotate(&q, a, part, 1e4).unwrap();
                let kr = rope_rotate(&k, b, part, 1e4).unwrap();
                qr.iter().zip(&kr).map(|(x, y)| x * y).sum::<f64>()
            };
            let shift = |p: Position| [p[0] + delta[0], p[1] + delta[1], p[2] + delta[2]];
            assert!((score(pi, pj) - score(shift(pi), shift(pj))).abs() < 1e-9);
        }
    }

    #[test]
    fn attention_singleton_and_dense_oracle() {
        let v = Mat::from_vec(1, 3, vec![0.3, -1.0, 2.0]);
        let q = Mat::from_vec(1, 2, vec![0.4, 0.1]);
        let out = attention(&q, &q, &v, &[[5, 1, 2]], [2, 0, 0], 1e4).unwrap();
        assert_eq!(out, v);

        let q = Mat::from_vec(3, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let k = Mat::from_vec(3, 2, vec![0.5, 0.5, -1.0, 2.0, 0.0, 1.0]);
        let v = Mat::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let pos = [[0, 0, 0], [0, 0, 1], [0, 0, 2]];
        let got = attention(&q, &k, &v, &pos, [2, 0, 0], 1e4).unwrap();
        let rot = |x: &[f64], t: f64| [x[0] * t.cos() - x[1] * t.sin(), x[0] * t.sin() + x[1] * t.cos()];
        for i in 0..3 {
            let qi = rot(q.row(i), i as f64);
            let logits: Vec<f64> = (0..3)
                .map(|j| {
                    let kj = rot(k.row(j), j as f64);
                    (qi[0] * kj[0] + qi[1] * kj[1]) / 2f64.sqrt()
                })
                .collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            for c in 0..2 {
                let want: f64 = (0..3).map(|j| logits[j].exp() / z * v.at(j, c)).sum();
                assert!((got.at(i, c) - want).abs() < 1e-12);
            }
        }
        assert!(attention(&q, &k, &v, &pos[..2], [2, 0, 0], 1e4).is_err());
    }

    #[test]
    fn zero_b_adapters_match_adapter_free_model() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p: DitParams<f64> = DitParams::new(&cfg, &mut rng).unwrap();
        let g = latents(&cfg, 3, 4);
        let r = build_dual_latents(&g, true).unwrap();
        let with = forward(&cfg, &p, &g, &r, None).unwrap();
        let without = forward(&cfg, &p.without_lora(), &g, &r, None).unwrap();
        for (a, b) in with.track.iter().zip(&without.track) {
            for (x, y) in a.values.data.iter().zip(&b.values.data) {
                assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn output_head_second_half_starts_at_zero() {
        let cfg = ModelConfig { lora_rank: 0, ..tiny_config() };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p: DitParams<f64> = DitParams::new(&cfg, &mut rng).unwrap();
        let g = latents(&cfg, 2, 6);
        let out = forward(&cfg, &p, &g, &build_dual_latents(&g, true).unwrap(), None).unwrap();
        assert_eq!(out.track.len(), 2);
        for grid in &out.track {
            assert_eq!((grid.h, grid.w, grid.channels()), (2, 3, 6));
            for r in 0..grid.values.rows {
                assert!(grid.values.row(r)[3..].iter().all(|v| *v == 0.0));
            }
        }
    }

    #[test]
    fn token_permutation_permutes_outputs() {
        let cfg = tiny_config();
        let p = perturbed_params(&cfg, 7);
        let g = latents(&cfg, 2, 8);
        let seq = assign_positions(&g, &build_dual_latents(&g, true).unwrap(), true).unwrap();
        let n = seq.len();
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for i in (1..n).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let base = forward_tokens(&cfg, &p, &seq, None).unwrap().outputs;
        let perm = forward_tokens(&cfg, &p, &seq.permuted(&order), None).unwrap().outputs;
        for (i, &o) in order.iter().enumerate() {
            for (a, b) in perm.row(i).iter().zip(base.row(o)) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn swapping_frames_with_their_indices_swaps_outputs() {
        let cfg = ModelConfig {
            first_frame_anchoring: false,
            ..tiny_config()
        };
        let p = perturbed_params(&cfg, 10);
        let g = latents(&cfg, 3, 11);
        let seq = assign_positions(&g, &build_dual_latents(&g, false).unwrap(), true).unwrap();
        let hw = cfg.tokens_per_frame();
        let block = |j: usize| if j == 1 { 2 } else if j == 2 { 1 } else { j };
        let order: Vec<usize> = (0..seq.len())
            .map(|k| {
                let (b, off) = (k / hw, k % hw);
                let (seg, j) = (b / 3, b % 3);
                (seg * 3 + block(j)) * hw + off
            })
            .collect();
        let swapped = seq.permuted(&order);
        assert_eq!(swapped.positions[hw][2], 2);
        let base = forward_tokens(&cfg, &p, &seq, None).unwrap().outputs;
        let other = forward_tokens(&cfg, &p, &swapped, None).unwrap().outputs;
        for j in 0..3 {
            let (a, b) = (base.row_block((3 + j) * hw, hw), other.row_block((3 + block(j)) * hw, hw));
            for (x, y) in a.data.iter().zip(&b.data) {
                assert!((x - y).abs() < 1e-10, "frame {j}");
            }
        }
    }

    #[test]
    fn trace_rows_are_normalized() {
        let cfg = tiny_config();
        let p = perturbed_params(&cfg, 12);
        let g = latents(&cfg, 3, 13);
        let q = [track_token_index(3, 2, 3, 1, 0, 1), track_token_index(3, 2, 3, 2, 2, 0)];
        let out = forward(&cfg, &p, &g, &build_dual_latents(&g, true).unwrap(), Some(&q)).unwrap();
        let tr = out.trace.unwrap();
        assert_eq!(tr.rows.len(), cfg.layers * cfg.heads);
        for m in &tr.rows {
            for r in 0..m.rows {
                assert!((m.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-5);
            }
        }
        let mass = tr.frame_mass(&out.sequence, 0, 3);
        assert!((mass.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = tiny_config();
        let p = perturbed_params(&cfg, 14);
        let g = latents(&cfg, 3, 15);
        let r = build_dual_latents(&g, true).unwrap();
        let a = forward(&cfg, &p, &g, &r, None).unwrap();
        let b = forward(&cfg, &p, &g, &r, None).unwrap();
        assert_eq!(a.track, b.track);
    }
}
