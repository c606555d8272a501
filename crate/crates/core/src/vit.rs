//! Compact pre-norm Vision Transformer with LoRA adapters on the query and value
//! projections of every block.
//!
//! ```text
//!   image (3, H, W) ── patchify ── linear ──► tokens; prepend cls; + pos
//!   block: x += attn(LN1(x)),  x += mlp(LN2(x))
//!          q = LN1(x) (W_q + s B_q A_q)^T + b_q,  v likewise,  s = alpha / r
//!   LN_f ── drop cls ──► TokenGrid (embed_dim, H / patch, W / patch)
//! ```
//!
//! Linear weights are stored `(out, in)`, rows of a token matrix are tokens.
//! The MLP uses the tanh approximation of GELU. Only adapter gradients are
//! computed; the base weights are frozen.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::Mat;
use crate::rng::SeededRng;
use crate::scalar::Real;
use crate::tensor::Grid;

const LN_EPS: f64 = 1e-6;
const INIT_STREAM: u64 = 0x717_0001;
const LORA_STREAM: u64 = 0x717_0002;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ViTConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_blocks: usize,
    /// Square input side in pixels.
    pub input_resolution: usize,
    pub mlp_ratio: usize,
    pub in_channels: usize,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self {
            patch_size: 8,
            embed_dim: 64,
            num_heads: 4,
            num_blocks: 4,
            input_resolution: 64,
            mlp_ratio: 4,
            in_channels: 3,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if [self.patch_size, self.embed_dim, self.num_heads, self.num_blocks, self.input_resolution, self.mlp_ratio, self.in_channels]
            .contains(&0)
        {
            return bad("ViT sizes must be positive".into());
        }
        if self.embed_dim % self.num_heads != 0 {
            return bad(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.input_resolution % self.patch_size != 0 {
            return bad(format!(
                "input_resolution {} not divisible by patch_size {}",
                self.input_resolution, self.patch_size
            ));
        }
        Ok(())
    }

    pub fn grid_side(&self) -> usize {
        self.input_resolution / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn hidden_dim(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }

    /// `num_blocks * 2 * r * (d_in + d_out)` for the q and v adapters.
    pub fn adapter_param_count(&self, rank: usize) -> usize {
        self.num_blocks * 2 * rank * (2 * self.embed_dim)
    }
}

/// `y = x W^T + b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear<S> {
    pub weight: Mat<S>,
    pub bias: Vec<S>,
}

impl<S: Real> Linear<S> {
    fn init(out_dim: usize, in_dim: usize, rng: &mut SeededRng) -> Self {
        let std = 1.0 / (in_dim as f64).sqrt();
        Self {
            weight: Mat::from_vec(
                out_dim,
                in_dim,
                (0..out_dim * in_dim).map(|_| S::of(std * rng.normal())).collect(),
            ),
            bias: vec![S::zero(); out_dim],
        }
    }

    pub fn forward(&self, x: &Mat<S>) -> Mat<S> {
        let mut y = x.matmul_nt(&self.weight);
        add_row_bias(&mut y, &self.bias);
        y
    }
}

fn add_row_bias<S: Real>(y: &mut Mat<S>, bias: &[S]) {
    for r in 0..y.rows {
        for (v, &b) in y.row_mut(r).iter_mut().zip(bias) {
            *v += b;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm<S> {
    pub gamma: Vec<S>,
    pub beta: Vec<S>,
}

impl<S: Real> LayerNorm<S> {
    fn new(dim: usize) -> Self {
        Self {
            gamma: vec![S::one(); dim],
            beta: vec![S::zero(); dim],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block<S> {
    pub ln1: LayerNorm<S>,
    pub q: Linear<S>,
    pub k: Linear<S>,
    pub v: Linear<S>,
    pub o: Linear<S>,
    pub ln2: LayerNorm<S>,
    pub fc1: Linear<S>,
    pub fc2: Linear<S>,
}

/// Frozen backbone weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViTParams<S> {
    pub config: ViTConfig,
    pub patch: Linear<S>,
    pub cls: Vec<S>,
    /// `(1 + num_patches, embed_dim)`, row 0 belongs to the class token.
    pub pos: Mat<S>,
    pub blocks: Vec<Block<S>>,
    pub ln_f: LayerNorm<S>,
}

/// Weights `N(0, 1 / fan_in)`, biases 0, LayerNorm `(1, 0)`, class token and
/// positional embeddings `N(0, 0.02^2)`.
pub fn vit_init<S: Real>(config: &ViTConfig, seed: u64) -> Result<ViTParams<S>> {
    config.validate()?;
    let mut rng = SeededRng::derived(seed, INIT_STREAM);
    let d = config.embed_dim;
    let patch_in = config.in_channels * config.patch_size * config.patch_size;
    let patch = Linear::init(d, patch_in, &mut rng);
    let cls = (0..d).map(|_| S::of(0.02 * rng.normal())).collect();
    let n = config.num_patches() + 1;
    let pos = Mat::from_vec(n, d, (0..n * d).map(|_| S::of(0.02 * rng.normal())).collect());
    let blocks = (0..config.num_blocks)
        .map(|_| Block {
            ln1: LayerNorm::new(d),
            q: Linear::init(d, d, &mut rng),
            k: Linear::init(d, d, &mut rng),
            v: Linear::init(d, d, &mut rng),
            o: Linear::init(d, d, &mut rng),
            ln2: LayerNorm::new(d),
            fc1: Linear::init(config.hidden_dim(), d, &mut rng),
            fc2: Linear::init(d, config.hidden_dim(), &mut rng),
        })
        .collect();
    Ok(ViTParams {
        config: *config,
        patch,
        cls,
        pos,
        blocks,
        ln_f: LayerNorm::new(d),
    })
}

impl<S: Real> ViTParams<S> {
    fn linears(&self) -> Vec<&Linear<S>> {
        let mut out = vec![&self.patch];
        for b in &self.blocks {
            out.extend([&b.q, &b.k, &b.v, &b.o, &b.fc1, &b.fc2]);
        }
        out
    }

    fn norms(&self) -> Vec<&LayerNorm<S>> {
        let mut out: Vec<_> = self.blocks.iter().flat_map(|b| [&b.ln1, &b.ln2]).collect();
        out.push(&self.ln_f);
        out
    }

    /// All weights in a fixed order: linears (weight, bias), then norms
    /// (gamma, beta), then `cls`, then `pos`.
    pub fn to_flat(&self) -> Vec<S> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in self.linears() {
            out.extend_from_slice(&l.weight.data);
            out.extend_from_slice(&l.bias);
        }
        for n in self.norms() {
            out.extend_from_slice(&n.gamma);
            out.extend_from_slice(&n.beta);
        }
        out.extend_from_slice(&self.cls);
        out.extend_from_slice(&self.pos.data);
        out
    }

    pub fn param_count(&self) -> usize {
        let lin: usize = self.linears().iter().map(|l| l.weight.data.len() + l.bias.len()).sum();
        let norm: usize = self.norms().iter().map(|n| 2 * n.gamma.len()).sum();
        lin + norm + self.cls.len() + self.pos.data.len()
    }

    /// Inverse of [`to_flat`](Self::to_flat) for a given architecture.
    pub fn from_flat(config: &ViTConfig, flat: &[S]) -> Result<Self> {
        let mut p = vit_init::<S>(config, 0)?;
        if flat.len() != p.param_count() {
            return invalid(format!(
                "ViT expects {} parameters, got {}",
                p.param_count(),
                flat.len()
            ));
        }
        let mut it = flat.iter().copied();
        let mut fill = |dst: &mut [S]| dst.iter_mut().for_each(|v| *v = it.next().expect("length checked"));
        let mut linears: Vec<&mut Linear<S>> = vec![&mut p.patch];
        let mut norms: Vec<&mut LayerNorm<S>> = Vec::new();
        for b in &mut p.blocks {
            linears.extend([&mut b.q, &mut b.k, &mut b.v, &mut b.o, &mut b.fc1, &mut b.fc2]);
            norms.extend([&mut b.ln1, &mut b.ln2]);
        }
        norms.push(&mut p.ln_f);
        for l in linears {
            fill(&mut l.weight.data);
            fill(&mut l.bias);
        }
        for n in norms {
            fill(&mut n.gamma);
            fill(&mut n.beta);
        }
        fill(&mut p.cls);
        fill(&mut p.pos.data);
        Ok(p)
    }

    pub fn cast<T: Real>(&self) -> ViTParams<T> {
        let lin = |l: &Linear<S>| Linear {
            weight: l.weight.cast(),
            bias: l.bias.iter().map(|&v| T::of(v.as_f64())).collect(),
        };
        let norm = |n: &LayerNorm<S>| LayerNorm {
            gamma: n.gamma.iter().map(|&v| T::of(v.as_f64())).collect(),
            beta: n.beta.iter().map(|&v| T::of(v.as_f64())).collect(),
        };
        ViTParams {
            config: self.config,
            patch: lin(&self.patch),
            cls: self.cls.iter().map(|&v| T::of(v.as_f64())).collect(),
            pos: self.pos.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    ln1: norm(&b.ln1),
                    q: lin(&b.q),
                    k: lin(&b.k),
                    v: lin(&b.v),
                    o: lin(&b.o),
                    ln2: norm(&b.ln2),
                    fc1: lin(&b.fc1),
                    fc2: lin(&b.fc2),
                })
                .collect(),
            ln_f: norm(&self.ln_f),
        }
    }
}

/// Low-rank update `(alpha / r) B A` with `A: (r, d_in)`, `B: (d_out, r)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraPair<S> {
    pub a: Mat<S>,
    pub b: Mat<S>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockAdapters<S> {
    pub q: LoraPair<S>,
    pub v: LoraPair<S>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoRAViTParams<S> {
    pub base: ViTParams<S>,
    pub adapters: Vec<BlockAdapters<S>>,
    pub rank: usize,
    pub alpha: f64,
}

/// Adapters with `A ~ N(0, 0.02^2)` and `B = 0`.
pub fn lora_init<S: Real>(base: ViTParams<S>, rank: usize, alpha: f64, seed: u64) -> Result<LoRAViTParams<S>> {
    if rank == 0 {
        return Err(Error::InvalidConfig("LoRA rank must be positive".into()));
    }
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::InvalidConfig("LoRA alpha must be positive".into()));
    }
    let d = base.config.embed_dim;
    let mut rng = SeededRng::derived(seed, LORA_STREAM);
    let pair = |rng: &mut SeededRng| LoraPair {
        a: Mat::from_vec(rank, d, (0..rank * d).map(|_| S::of(0.02 * rng.normal())).collect()),
        b: Mat::zeros(d, rank),
    };
    let adapters = (0..base.config.num_blocks)
        .map(|_| BlockAdapters {
            q: pair(&mut rng),
            v: pair(&mut rng),
        })
        .collect();
    Ok(LoRAViTParams {
        base,
        adapters,
        rank,
        alpha,
    })
}

impl<S: Real> LoRAViTParams<S> {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    fn pairs(&self) -> impl Iterator<Item = &LoraPair<S>> {
        self.adapters.iter().flat_map(|a| [&a.q, &a.v])
    }

    pub fn adapter_param_count(&self) -> usize {
        self.pairs().map(|p| p.a.data.len() + p.b.data.len()).sum()
    }

    /// Adapter weights block by block: `A_q, B_q, A_v, B_v`, each row-major.
    pub fn adapters_to_flat(&self) -> Vec<S> {
        let mut out = Vec::with_capacity(self.adapter_param_count());
        for p in self.pairs() {
            out.extend_from_slice(&p.a.data);
            out.extend_from_slice(&p.b.data);
        }
        out
    }

    pub fn set_adapters_flat(&mut self, flat: &[S]) -> Result<()> {
        if flat.len() != self.adapter_param_count() {
            return invalid(format!(
                "expected {} adapter parameters, got {}",
                self.adapter_param_count(),
                flat.len()
            ));
        }
        let mut off = 0;
        for ad in &mut self.adapters {
            for p in [&mut ad.q, &mut ad.v] {
                for m in [&mut p.a, &mut p.b] {
                    let n = m.data.len();
                    m.data.copy_from_slice(&flat[off..off + n]);
                    off += n;
                }
            }
        }
        Ok(())
    }

    /// Base weights with every adapter folded into its projection.
    pub fn merged(&self) -> Result<ViTParams<S>> {
        let mut out = self.base.clone();
        for (blk, ad) in out.blocks.iter_mut().zip(&self.adapters) {
            blk.q.weight = lora_merge(&blk.q.weight, &ad.q.a, &ad.q.b, self.alpha, self.rank)?;
            blk.v.weight = lora_merge(&blk.v.weight, &ad.v.a, &ad.v.b, self.alpha, self.rank)?;
        }
        Ok(out)
    }

    pub fn cast<T: Real>(&self) -> LoRAViTParams<T> {
        let pair = |p: &LoraPair<S>| LoraPair {
            a: p.a.cast(),
            b: p.b.cast(),
        };
        LoRAViTParams {
            base: self.base.cast(),
            adapters: self
                .adapters
                .iter()
                .map(|a| BlockAdapters {
                    q: pair(&a.q),
                    v: pair(&a.v),
                })
                .collect(),
            rank: self.rank,
            alpha: self.alpha,
        }
    }
}

/// `W + (alpha / r) B A`.
pub fn lora_merge<S: Real>(w: &Mat<S>, a: &Mat<S>, b: &Mat<S>, alpha: f64, r: usize) -> Result<Mat<S>> {
    if a.rows != r || b.cols != r || b.rows != w.rows || a.cols != w.cols {
        return invalid(format!(
            "lora_merge: W {:?}, A {:?}, B {:?}, rank {r}",
            w.shape(),
            a.shape(),
            b.shape()
        ));
    }
    let mut out = w.clone();
    out.add_matmul(S::of(alpha / r as f64), b, a);
    Ok(out)
}

struct NormCache<S> {
    xhat: Mat<S>,
    rstd: Vec<S>,
}

fn layer_norm<S: Real>(x: &Mat<S>, ln: &LayerNorm<S>) -> (Mat<S>, NormCache<S>) {
    let (n, d) = x.shape();
    let mut y = Mat::zeros(n, d);
    let mut xhat = Mat::zeros(n, d);
    let mut rstd = Vec::with_capacity(n);
    let inv_d = S::of(1.0 / d as f64);
    for r in 0..n {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<S>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_d;
        let rs = S::one() / (var + S::of(LN_EPS)).sqrt();
        rstd.push(rs);
        for c in 0..d {
            let h = (row[c] - mean) * rs;
            *xhat.at_mut(r, c) = h;
            *y.at_mut(r, c) = h * ln.gamma[c] + ln.beta[c];
        }
    }
    (y, NormCache { xhat, rstd })
}

fn layer_norm_backward<S: Real>(dy: &Mat<S>, cache: &NormCache<S>, ln: &LayerNorm<S>) -> Mat<S> {
    let (n, d) = dy.shape();
    let inv_d = S::of(1.0 / d as f64);
    let mut dx = Mat::zeros(n, d);
    let mut dxhat = vec![S::zero(); d];
    for r in 0..n {
        let xh = cache.xhat.row(r);
        for c in 0..d {
            dxhat[c] = dy.at(r, c) * ln.gamma[c];
        }
        let m1 = dxhat.iter().copied().sum::<S>() * inv_d;
        let m2 = dxhat.iter().zip(xh).map(|(&g, &h)| g * h).sum::<S>() * inv_d;
        let rs = cache.rstd[r];
        for c in 0..d {
            *dx.at_mut(r, c) = rs * (dxhat[c] - m1 - xh[c] * m2);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

fn gelu<S: Real>(u: S) -> S {
    let (c, k, half) = (S::of(GELU_C), S::of(GELU_K), S::of(0.5));
    half * u * (S::one() + (c * (u + k * u * u * u)).tanh())
}

fn gelu_grad<S: Real>(u: S) -> S {
    let (c, k, half) = (S::of(GELU_C), S::of(GELU_K), S::of(0.5));
    let t = (c * (u + k * u * u * u)).tanh();
    half * (S::one() + t) + half * u * (S::one() - t * t) * c * (S::one() + S::of(3.0) * k * u * u)
}

fn columns<S: Real>(m: &Mat<S>, start: usize, width: usize) -> Mat<S> {
    let mut out = Mat::zeros(m.rows, width);
    for r in 0..m.rows {
        out.row_mut(r).copy_from_slice(&m.row(r)[start..start + width]);
    }
    out
}

fn set_columns<S: Real>(m: &mut Mat<S>, start: usize, src: &Mat<S>) {
    for r in 0..m.rows {
        m.row_mut(r)[start..start + src.cols].copy_from_slice(src.row(r));
    }
}

fn softmax_rows<S: Real>(m: &mut Mat<S>) {
    for r in 0..m.rows {
        let row = m.row_mut(r);
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let mut sum = S::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

struct BlockCache<S> {
    ln1: NormCache<S>,
    h1: Mat<S>,
    zq: Option<Mat<S>>,
    zv: Option<Mat<S>>,
    q: Mat<S>,
    k: Mat<S>,
    v: Mat<S>,
    probs: Vec<Mat<S>>,
    ln2: NormCache<S>,
    u: Mat<S>,
}

/// Activations recorded by a forward pass, consumed by [`vit_backward`].
#[derive(Default)]
pub struct ViTCache<S> {
    blocks: Vec<BlockCache<S>>,
    ln_f: Option<NormCache<S>>,
}

impl<S: Real> ViTCache<S> {
    pub fn is_empty(&self) -> bool {
        self.ln_f.is_none()
    }

    /// Softmax attention of `head` in `block`, `(tokens, tokens)`.
    pub fn attention(&self, block: usize, head: usize) -> Option<&Mat<S>> {
        self.blocks.get(block)?.probs.get(head)
    }
}

/// `(num_patches, C p^2)`; patch row-major over the grid, features `(c, dy, dx)`.
fn patchify<S: Real>(image: &Grid<S>, config: &ViTConfig) -> Result<Mat<S>> {
    let (c, h, w) = image.shape();
    let r = config.input_resolution;
    if c != config.in_channels || h != r || w != r {
        return invalid(format!(
            "ViT expects a ({}, {r}, {r}) image, got ({c}, {h}, {w})",
            config.in_channels
        ));
    }
    let p = config.patch_size;
    let g = config.grid_side();
    let mut out = Mat::zeros(g * g, c * p * p);
    for gy in 0..g {
        for gx in 0..g {
            let row = out.row_mut(gy * g + gx);
            for ch in 0..c {
                for dy in 0..p {
                    for dx in 0..p {
                        row[(ch * p + dy) * p + dx] = image.get(ch, gy * p + dy, gx * p + dx);
                    }
                }
            }
        }
    }
    Ok(out)
}

fn adapter_term<S: Real>(h: &Mat<S>, pair: &LoraPair<S>, scale: S, out: &mut Mat<S>) -> Mat<S> {
    let z = h.matmul_nt(&pair.a);
    out.add_matmul_nt(scale, &z, &pair.b);
    z
}

fn forward_impl<S: Real>(
    image: &Grid<S>,
    base: &ViTParams<S>,
    adapters: Option<(&[BlockAdapters<S>], f64)>,
    record: bool,
) -> Result<(Grid<S>, ViTCache<S>)> {
    let cfg = &base.config;
    let (d, nh, dh) = (cfg.embed_dim, cfg.num_heads, cfg.head_dim());
    let tokens = base.patch.forward(&patchify(image, cfg)?);
    let n = tokens.rows + 1;
    let mut x = Mat::zeros(n, d);
    x.row_mut(0).copy_from_slice(&base.cls);
    for r in 1..n {
        x.row_mut(r).copy_from_slice(tokens.row(r - 1));
    }
    x.add_assign(&base.pos);

    let attn_scale = S::of(1.0 / (dh as f64).sqrt());
    let mut cache = ViTCache::default();
    for (bi, blk) in base.blocks.iter().enumerate() {
        let (h1, ln1) = layer_norm(&x, &blk.ln1);
        let mut q = blk.q.forward(&h1);
        let k = blk.k.forward(&h1);
        let mut v = blk.v.forward(&h1);
        let (zq, zv) = match adapters {
            Some((ads, s)) => (
                Some(adapter_term(&h1, &ads[bi].q, S::of(s), &mut q)),
                Some(adapter_term(&h1, &ads[bi].v, S::of(s), &mut v)),
            ),
            None => (None, None),
        };
        let mut o = Mat::zeros(n, d);
        let mut probs = Vec::with_capacity(if record { nh } else { 0 });
        for head in 0..nh {
            let qh = columns(&q, head * dh, dh);
            let kh = columns(&k, head * dh, dh);
            let vh = columns(&v, head * dh, dh);
            let mut p = qh.matmul_nt(&kh).scaled(attn_scale);
            softmax_rows(&mut p);
            set_columns(&mut o, head * dh, &p.matmul(&vh));
            if record {
                probs.push(p);
            }
        }
        x.add_assign(&blk.o.forward(&o));
        let (h2, ln2) = layer_norm(&x, &blk.ln2);
        let u = blk.fc1.forward(&h2);
        let g = Mat::from_vec(u.rows, u.cols, u.data.iter().map(|&z| gelu(z)).collect());
        x.add_assign(&blk.fc2.forward(&g));
        if record {
            cache.blocks.push(BlockCache {
                ln1,
                h1,
                zq,
                zv,
                q,
                k,
                v,
                probs,
                ln2,
                u,
            });
        }
    }
    let (y, ln_f) = layer_norm(&x, &base.ln_f);
    if record {
        cache.ln_f = Some(ln_f);
    }
    let g = cfg.grid_side();
    let out = Grid::from_fn(d, g, g, |c, i, j| y.at(1 + i * g + j, c));
    Ok((out, cache))
}

/// Forward pass through the adapted backbone. With `record`, the returned
/// cache holds what [`vit_backward`] needs.
pub fn vit_forward<S: Real>(
    image: &Grid<S>,
    params: &LoRAViTParams<S>,
    record: bool,
) -> Result<(Grid<S>, ViTCache<S>)> {
    forward_impl(image, &params.base, Some((&params.adapters, params.scaling())), record)
}

/// Forward pass through plain weights (the frozen base, or merged weights).
pub fn vit_forward_base<S: Real>(image: &Grid<S>, params: &ViTParams<S>) -> Result<Grid<S>> {
    forward_impl(image, params, None, false).map(|(g, _)| g)
}

/// Gradient of the loss w.r.t. every adapter weight, in
/// [`LoRAViTParams::adapters_to_flat`] layout, given `dL/d(TokenGrid)`.
pub fn vit_backward<S: Real>(
    grad: &Grid<S>,
    params: &LoRAViTParams<S>,
    cache: &ViTCache<S>,
) -> Result<Vec<S>> {
    let Some(ln_f) = &cache.ln_f else {
        return Err(Error::InvalidState(
            "vit_backward needs a cache recorded by vit_forward(record = true)".into(),
        ));
    };
    let cfg = &params.base.config;
    let (d, nh, dh) = (cfg.embed_dim, cfg.num_heads, cfg.head_dim());
    let g = cfg.grid_side();
    if grad.shape() != (d, g, g) {
        return invalid(format!(
            "token gradient must be ({d}, {g}, {g}), got {:?}",
            grad.shape()
        ));
    }
    let n = g * g + 1;
    let mut dy = Mat::zeros(n, d);
    for c in 0..d {
        for i in 0..g {
            for j in 0..g {
                *dy.at_mut(1 + i * g + j, c) = grad.get(c, i, j);
            }
        }
    }
    let mut dx = layer_norm_backward(&dy, ln_f, &params.base.ln_f);

    let s = S::of(params.scaling());
    let attn_scale = S::of(1.0 / (dh as f64).sqrt());
    let mut block_grads = Vec::with_capacity(cfg.num_blocks);
    for (bi, blk) in params.base.blocks.iter().enumerate().rev() {
        let bc = &cache.blocks[bi];
        let ad = &params.adapters[bi];

        // MLP branch
        let mut du = dx.matmul(&blk.fc2.weight);
        for (d_u, &u) in du.data.iter_mut().zip(&bc.u.data) {
            *d_u *= gelu_grad(u);
        }
        let dh2 = du.matmul(&blk.fc1.weight);
        dx.add_assign(&layer_norm_backward(&dh2, &bc.ln2, &blk.ln2));

        // attention branch
        let d_o = dx.matmul(&blk.o.weight);
        let mut dq = Mat::zeros(n, d);
        let mut dk = Mat::zeros(n, d);
        let mut dv = Mat::zeros(n, d);
        for head in 0..nh {
            let p = &bc.probs[head];
            let doh = columns(&d_o, head * dh, dh);
            let qh = columns(&bc.q, head * dh, dh);
            let kh = columns(&bc.k, head * dh, dh);
            let vh = columns(&bc.v, head * dh, dh);
            let dp = doh.matmul_nt(&vh);
            set_columns(&mut dv, head * dh, &p.matmul_tn(&doh));
            let mut ds = Mat::zeros(n, n);
            for r in 0..n {
                let (pr, dpr) = (p.row(r), dp.row(r));
                let dot = pr.iter().zip(dpr).map(|(&a, &b)| a * b).sum::<S>();
                for (o, (&a, &b)) in ds.row_mut(r).iter_mut().zip(pr.iter().zip(dpr)) {
                    *o = a * (b - dot) * attn_scale;
                }
            }
            set_columns(&mut dq, head * dh, &ds.matmul(&kh));
            set_columns(&mut dk, head * dh, &ds.matmul_tn(&qh));
        }
        let mut dh1 = dq.matmul(&blk.q.weight);
        dh1.add_matmul(S::one(), &dk, &blk.k.weight);
        dh1.add_matmul(S::one(), &dv, &blk.v.weight);
        let mut grads = Vec::with_capacity(4);
        for (dproj, pair, z) in [(&dq, &ad.q, &bc.zq), (&dv, &ad.v, &bc.zv)] {
            let z = z.as_ref().expect("adapter forward records z");
            let db = dproj.matmul_tn(z).scaled(s);
            let dz = dproj.matmul(&pair.b).scaled(s);
            let da = dz.matmul_tn(&bc.h1);
            dh1.add_matmul(S::one(), &dz, &pair.a);
            grads.push(da);
            grads.push(db);
        }
        dx.add_assign(&layer_norm_backward(&dh1, &bc.ln1, &blk.ln1));
        block_grads.push(grads);
    }
    block_grads.reverse();
    Ok(block_grads
        .into_iter()
        .flat_map(|gs| gs.into_iter().flat_map(|m| m.data))
        .collect())
}
