use rayon::prelude::*;

use super::config::{ModelConfig, PosembStrategy};
use super::params::{BlockParams, ModelParams};
use crate::error::{Error, Result};
use crate::numerics::kernels::{softmax_backward_slice, softmax_slice};
use crate::numerics::{
    add_row_bias, bias_backward, gelu, gelu_backward, layernorm, layernorm_backward, matmul,
    matmul_nt, matmul_tn, LayerNormCache, Real, Rng, Tensor, LAYERNORM_EPS,
};
use crate::posemb::{
    build_sinusoidal_3d, center_and_select, interp_resize, interp_resize_backward,
    rel_bias_backward, rel_bias_lookup, Grid, PosEmbedGrid,
};

/// Positional input for one patch grid.
#[derive(Clone, Debug, PartialEq)]
pub enum Positional<T> {
    /// `[N, d]`, added to the patch tokens (never to CLS).
    Absolute(Tensor<T>),
    /// `[heads, N, N]`, added to the patch-to-patch attention scores of
    /// every block; pairs involving CLS get no bias.
    Relative(Tensor<T>),
}

struct BlockCache<T> {
    ln1: LayerNormCache<T>,
    h1: Tensor<T>,
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
    /// Attention probabilities `[N+1, N+1]`, indexed `sample * heads + head`.
    attn: Vec<Tensor<T>>,
    o: Tensor<T>,
    ln2: LayerNormCache<T>,
    h2: Tensor<T>,
    u: Tensor<T>,
    g: Tensor<T>,
}

/// Activations saved by [`Encoder::forward`] for the backward pass and for
/// attention and feature export.
pub struct ForwardCache<T> {
    batch: usize,
    grid: Grid,
    heads: usize,
    patches: Tensor<T>,
    blocks: Vec<BlockCache<T>>,
    cls_out: Tensor<T>,
}

impl<T: Real> ForwardCache<T> {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn num_tokens(&self) -> usize {
        self.grid.iter().product::<usize>() + 1
    }

    /// Final CLS representation per sample, `[B, d]`.
    pub fn features(&self) -> &Tensor<T> {
        &self.cls_out
    }

    /// Attention probabilities `[N+1, N+1]` of one head.
    pub fn attention_map(&self, layer: usize, head: usize, sample: usize) -> Result<&Tensor<T>> {
        if layer >= self.blocks.len() || head >= self.heads || sample >= self.batch {
            return Err(Error::shape(format!(
                "no attention map for layer {layer}, head {head}, sample {sample}"
            )));
        }
        Ok(&self.blocks[layer].attn[sample * self.heads + head])
    }

    /// Head-averaged attention from CLS to each patch, shaped as the grid.
    pub fn cls_attention(&self, layer: usize, sample: usize) -> Result<Tensor<T>> {
        let n = self.num_tokens() - 1;
        let mut acc = vec![T::zero(); n];
        for h in 0..self.heads {
            let a = self.attention_map(layer, h, sample)?;
            for (o, &v) in acc.iter_mut().zip(&a.row(0)[1..]) {
                *o += v;
            }
        }
        let inv = T::one() / T::of(self.heads as f64);
        acc.iter_mut().for_each(|v| *v *= inv);
        Tensor::new(self.grid.to_vec(), acc)
    }

    /// Bytes held by the cached activations.
    pub fn live_bytes(&self) -> usize {
        let t = |x: &Tensor<T>| x.len();
        let mut n = t(&self.patches) + t(&self.cls_out);
        for b in &self.blocks {
            n += t(&b.ln1.xhat) + t(&b.h1) + t(&b.q) + t(&b.k) + t(&b.v) + t(&b.o);
            n += t(&b.ln2.xhat) + t(&b.h2) + t(&b.u) + t(&b.g);
            n += b.attn.iter().map(t).sum::<usize>();
        }
        n * std::mem::size_of::<T>()
    }
}

/// Encoder and classification head with manual backward pass.
#[derive(Clone, Debug)]
pub struct Encoder<T: Real = f32> {
    cfg: ModelConfig,
    pub params: ModelParams<T>,
    fixed_master: Option<PosEmbedGrid<T>>,
}

impl<T: Real> Encoder<T> {
    pub fn new(cfg: ModelConfig, rng: &mut Rng) -> Result<Self> {
        let params = ModelParams::init(&cfg, rng)?;
        Self::from_params(cfg, params)
    }

    /// Wraps existing parameters; their shapes must match `cfg`.
    pub fn from_params(cfg: ModelConfig, params: ModelParams<T>) -> Result<Self> {
        cfg.validate()?;
        if cfg.depth == 0 {
            return Err(Error::config("depth must be >= 1"));
        }
        let reference = ModelParams::<T>::zeros(&cfg)?;
        let want = reference.tensors();
        let got = params.tensors();
        if want.len() != got.len() {
            return Err(Error::shape(format!(
                "expected {} parameter tensors, got {}",
                want.len(),
                got.len()
            )));
        }
        for ((wn, wt), (gn, gt)) in want.iter().zip(&got) {
            if wn != gn || wt.shape() != gt.shape() {
                return Err(Error::shape(format!(
                    "parameter {gn} {:?} does not match {wn} {:?}",
                    gt.shape(),
                    wt.shape()
                )));
            }
        }
        let fixed_master = match cfg.posemb {
            PosembStrategy::CenterSelect | PosembStrategy::InterpFixed => {
                Some(build_sinusoidal_3d(cfg.max_grid(), cfg.embed_dim)?)
            }
            _ => None,
        };
        Ok(Self {
            cfg,
            params,
            fixed_master,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn cast<U: Real>(&self) -> Encoder<U> {
        Encoder::from_params(self.cfg.clone(), self.params.cast()).expect("same config")
    }

    /// Resolves the positional input for a patch grid under the configured
    /// strategy.
    pub fn positional(&self, grid: Grid) -> Result<Positional<T>> {
        let max = self.cfg.max_grid();
        if grid.iter().zip(max).any(|(&g, m)| g == 0 || g > m) {
            return Err(Error::shape(format!(
                "patch grid {grid:?} exceeds the model's maximum {max:?}"
            )));
        }
        let d = self.cfg.embed_dim;
        let p = &self.params;
        Ok(match self.cfg.posemb {
            PosembStrategy::CenterSelect => Positional::Absolute(
                center_and_select(self.master(), grid)?.to_rows(),
            ),
            PosembStrategy::IndepFixed => {
                Positional::Absolute(build_sinusoidal_3d::<T>(grid, d)?.to_rows())
            }
            PosembStrategy::InterpFixed => {
                Positional::Absolute(interp_resize(self.master(), grid)?.to_rows())
            }
            PosembStrategy::InterpLearned => {
                let learned = p
                    .pos_embed
                    .as_ref()
                    .ok_or_else(|| Error::config("interp_learned needs a learned grid"))?;
                Positional::Absolute(interp_resize(learned, grid)?.to_rows())
            }
            PosembStrategy::Relative => {
                let table = p
                    .rel_bias
                    .as_ref()
                    .ok_or_else(|| Error::config("relative strategy needs a bias table"))?;
                Positional::Relative(rel_bias_lookup(table, grid)?)
            }
        })
    }

    fn master(&self) -> &PosEmbedGrid<T> {
        self.fixed_master.as_ref().expect("built for fixed strategies")
    }

    /// Runs a batch of same-grid samples; `patches[i]` is `[N, C·P³]`.
    /// Returns logits `[B, num_classes]`.
    pub fn forward(&self, patches: Vec<Tensor<T>>, grid: Grid) -> Result<(Tensor<T>, ForwardCache<T>)> {
        let pos = self.positional(grid)?;
        self.forward_with(patches, grid, &pos)
    }

    pub fn forward_with(
        &self,
        patches: Vec<Tensor<T>>,
        grid: Grid,
        pos: &Positional<T>,
    ) -> Result<(Tensor<T>, ForwardCache<T>)> {
        let b = patches.len();
        if b == 0 {
            return Err(Error::shape("empty batch"));
        }
        let n: usize = grid.iter().product();
        let plen = self.cfg.patch_len();
        for p in &patches {
            if p.shape() != [n, plen] {
                return Err(Error::shape(format!(
                    "patches {:?} for grid {grid:?}, expected [{n}, {plen}]",
                    p.shape()
                )));
            }
        }
        match pos {
            Positional::Absolute(t) if t.shape() != [n, self.cfg.embed_dim] => {
                return Err(Error::shape(format!(
                    "positional rows {:?} for {n} patches",
                    t.shape()
                )))
            }
            Positional::Relative(t) if t.shape() != [self.cfg.heads, n, n] => {
                return Err(Error::shape(format!(
                    "relative bias {:?} for {n} patches",
                    t.shape()
                )))
            }
            _ => {}
        }
        let stacked = stack_rows(patches)?;
        let p = &self.params;
        let d = self.cfg.embed_dim;
        let n1 = n + 1;

        let mut e = matmul(&stacked, &p.patch_weight)?;
        add_row_bias(&mut e, &p.patch_bias)?;
        let mut x = Tensor::zeros(&[b * n1, d]);
        for s in 0..b {
            x.row_mut(s * n1).copy_from_slice(p.cls_token.data());
            for i in 0..n {
                let row = x.row_mut(s * n1 + 1 + i);
                row.copy_from_slice(e.row(s * n + i));
                if let Positional::Absolute(pe) = pos {
                    for (v, &q) in row.iter_mut().zip(pe.row(i)) {
                        *v += q;
                    }
                }
            }
        }
        drop(e);

        let rel = match pos {
            Positional::Relative(t) => Some(t),
            Positional::Absolute(_) => None,
        };
        let mut caches = Vec::with_capacity(p.blocks.len());
        for bp in &p.blocks {
            let (next, cache) = self.block_forward(bp, &x, b, n1, rel)?;
            x = next;
            caches.push(cache);
        }

        let mut cls_out = Tensor::zeros(&[b, d]);
        for s in 0..b {
            cls_out.row_mut(s).copy_from_slice(x.row(s * n1));
        }
        let mut logits = matmul(&cls_out, &p.head_weight)?;
        add_row_bias(&mut logits, &p.head_bias)?;
        Ok((
            logits,
            ForwardCache {
                batch: b,
                grid,
                heads: self.cfg.heads,
                patches: stacked,
                blocks: caches,
                cls_out,
            },
        ))
    }

    fn block_forward(
        &self,
        bp: &BlockParams<T>,
        x: &Tensor<T>,
        batch: usize,
        n1: usize,
        rel: Option<&Tensor<T>>,
    ) -> Result<(Tensor<T>, BlockCache<T>)> {
        let (h1, ln1) = layernorm(x, &bp.norm1_weight, &bp.norm1_bias, LAYERNORM_EPS)?;
        let linear = |inp: &Tensor<T>, w: &Tensor<T>, bias: &Tensor<T>| -> Result<Tensor<T>> {
            let mut out = matmul(inp, w)?;
            add_row_bias(&mut out, bias)?;
            Ok(out)
        };
        let q = linear(&h1, &bp.q_weight, &bp.q_bias)?;
        let k = linear(&h1, &bp.k_weight, &bp.k_bias)?;
        let v = linear(&h1, &bp.v_weight, &bp.v_bias)?;

        let heads = self.cfg.heads;
        let dh = self.cfg.head_dim();
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let per_sample: Vec<(Vec<Tensor<T>>, Vec<Tensor<T>>)> = (0..batch)
            .into_par_iter()
            .map(|s| -> Result<_> {
                let mut probs = Vec::with_capacity(heads);
                let mut outs = Vec::with_capacity(heads);
                for h in 0..heads {
                    let qh = gather_head(&q, s * n1, n1, h * dh, dh);
                    let kh = gather_head(&k, s * n1, n1, h * dh, dh);
                    let vh = gather_head(&v, s * n1, n1, h * dh, dh);
                    let mut scores = matmul_nt(&qh, &kh)?;
                    scores.scale(scale);
                    if let Some(bias) = rel {
                        add_patch_bias(&mut scores, bias, h);
                    }
                    for row in scores.data_mut().chunks_mut(n1) {
                        softmax_slice(row)?;
                    }
                    outs.push(matmul(&scores, &vh)?);
                    probs.push(scores);
                }
                Ok((probs, outs))
            })
            .collect::<Result<_>>()?;

        let d = self.cfg.embed_dim;
        let mut o = Tensor::zeros(&[batch * n1, d]);
        let mut attn = Vec::with_capacity(batch * heads);
        for (s, (probs, outs)) in per_sample.into_iter().enumerate() {
            for (h, oh) in outs.iter().enumerate() {
                scatter_head(&mut o, oh, s * n1, h * dh);
            }
            attn.extend(probs);
        }

        let mut x_mid = linear(&o, &bp.proj_weight, &bp.proj_bias)?;
        x_mid.add_assign(x)?;
        let (h2, ln2) = layernorm(&x_mid, &bp.norm2_weight, &bp.norm2_bias, LAYERNORM_EPS)?;
        let u = linear(&h2, &bp.fc1_weight, &bp.fc1_bias)?;
        let g = gelu(&u);
        let mut out = linear(&g, &bp.fc2_weight, &bp.fc2_bias)?;
        out.add_assign(&x_mid)?;
        Ok((
            out,
            BlockCache {
                ln1,
                h1,
                q,
                k,
                v,
                attn,
                o,
                ln2,
                h2,
                u,
                g,
            },
        ))
    }

    /// Gradients of a scalar loss w.r.t. every parameter given
    /// `dlogits[B, num_classes]`.
    pub fn backward(&self, cache: &ForwardCache<T>, dlogits: &Tensor<T>) -> Result<ModelParams<T>> {
        let p = &self.params;
        let b = cache.batch;
        let k = self.cfg.num_classes;
        if dlogits.shape() != [b, k] {
            return Err(Error::shape(format!(
                "logit gradient {:?}, expected [{b}, {k}]",
                dlogits.shape()
            )));
        }
        if cache.blocks.len() != p.blocks.len() {
            return Err(Error::shape("cache was produced by a different model"));
        }
        let mut grads = p.zeros_like();
        let d = self.cfg.embed_dim;
        let n = cache.num_tokens() - 1;
        let n1 = n + 1;

        grads.head_weight = matmul_tn(&cache.cls_out, dlogits)?;
        grads.head_bias = bias_backward(dlogits);
        let dcls = matmul_nt(dlogits, &p.head_weight)?;
        let mut dx = Tensor::zeros(&[b * n1, d]);
        for s in 0..b {
            dx.row_mut(s * n1).copy_from_slice(dcls.row(s));
        }

        let heads = self.cfg.heads;
        let mut d_rel = match p.rel_bias {
            Some(_) => Some(Tensor::zeros(&[heads, n, n])),
            None => None,
        };
        for (i, (bp, bc)) in p.blocks.iter().zip(&cache.blocks).enumerate().rev() {
            dx = self.block_backward(bp, bc, &dx, b, n1, &mut grads.blocks[i], d_rel.as_mut())?;
        }

        let mut dcls_token = vec![T::zero(); d];
        let mut d_pos = Tensor::zeros(&[n, d]);
        let mut de = Tensor::zeros(&[b * n, d]);
        for s in 0..b {
            for (a, &g) in dcls_token.iter_mut().zip(dx.row(s * n1)) {
                *a += g;
            }
            for i in 0..n {
                let g = dx.row(s * n1 + 1 + i);
                de.row_mut(s * n + i).copy_from_slice(g);
                for (a, &v) in d_pos.row_mut(i).iter_mut().zip(g) {
                    *a += v;
                }
            }
        }
        grads.cls_token = Tensor::new(vec![d], dcls_token)?;
        grads.patch_weight = matmul_tn(&cache.patches, &de)?;
        grads.patch_bias = bias_backward(&de);

        if let (Some(g), Some(_)) = (grads.pos_embed.as_mut(), p.pos_embed.as_ref()) {
            *g.tensor_mut() = interp_resize_backward(self.cfg.max_grid(), cache.grid, &d_pos)?;
        }
        if let (Some(g), Some(table), Some(d_rel)) =
            (grads.rel_bias.as_mut(), p.rel_bias.as_ref(), d_rel)
        {
            g.table = rel_bias_backward(table, cache.grid, &d_rel)?;
        }
        Ok(grads)
    }

    #[allow(clippy::too_many_arguments)]
    fn block_backward(
        &self,
        bp: &BlockParams<T>,
        bc: &BlockCache<T>,
        dx_out: &Tensor<T>,
        batch: usize,
        n1: usize,
        g: &mut BlockParams<T>,
        d_rel: Option<&mut Tensor<T>>,
    ) -> Result<Tensor<T>> {
        // MLP branch
        g.fc2_weight = matmul_tn(&bc.g, dx_out)?;
        g.fc2_bias = bias_backward(dx_out);
        let dg = matmul_nt(dx_out, &bp.fc2_weight)?;
        let du = gelu_backward(&bc.u, &dg)?;
        g.fc1_weight = matmul_tn(&bc.h2, &du)?;
        g.fc1_bias = bias_backward(&du);
        let dh2 = matmul_nt(&du, &bp.fc1_weight)?;
        let (dx_ln2, dgam2, dbeta2) = layernorm_backward(&bc.ln2, &bp.norm2_weight, &dh2)?;
        g.norm2_weight = dgam2;
        g.norm2_bias = dbeta2;
        let mut dx_mid = dx_out.clone();
        dx_mid.add_assign(&dx_ln2)?;

        // attention branch
        g.proj_weight = matmul_tn(&bc.o, &dx_mid)?;
        g.proj_bias = bias_backward(&dx_mid);
        let d_o = matmul_nt(&dx_mid, &bp.proj_weight)?;

        let heads = self.cfg.heads;
        let dh = self.cfg.head_dim();
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let want_bias = d_rel.is_some();
        type HeadGrads<T> = (Vec<(Tensor<T>, Tensor<T>, Tensor<T>)>, Vec<Tensor<T>>);
        let per_sample: Vec<HeadGrads<T>> = (0..batch)
            .into_par_iter()
            .map(|s| -> Result<_> {
                let mut qkv = Vec::with_capacity(heads);
                let mut dbias = Vec::new();
                for h in 0..heads {
                    let a = &bc.attn[s * heads + h];
                    let qh = gather_head(&bc.q, s * n1, n1, h * dh, dh);
                    let kh = gather_head(&bc.k, s * n1, n1, h * dh, dh);
                    let vh = gather_head(&bc.v, s * n1, n1, h * dh, dh);
                    let doh = gather_head(&d_o, s * n1, n1, h * dh, dh);
                    let mut ds = matmul_nt(&doh, &vh)?;
                    let dv = matmul_tn(a, &doh)?;
                    for (drow, arow) in ds.data_mut().chunks_mut(n1).zip(a.data().chunks(n1)) {
                        softmax_backward_slice(arow, drow);
                    }
                    if want_bias {
                        dbias.push(ds.clone());
                    }
                    let mut dq = matmul(&ds, &kh)?;
                    dq.scale(scale);
                    let mut dk = matmul_tn(&ds, &qh)?;
                    dk.scale(scale);
                    qkv.push((dq, dk, dv));
                }
                Ok((qkv, dbias))
            })
            .collect::<Result<_>>()?;

        let d = self.cfg.embed_dim;
        let mut dq = Tensor::zeros(&[batch * n1, d]);
        let mut dk = Tensor::zeros(&[batch * n1, d]);
        let mut dv = Tensor::zeros(&[batch * n1, d]);
        let mut d_rel = d_rel;
        for (s, (qkv, dbias)) in per_sample.into_iter().enumerate() {
            for (h, (q, k, v)) in qkv.iter().enumerate() {
                scatter_head(&mut dq, q, s * n1, h * dh);
                scatter_head(&mut dk, k, s * n1, h * dh);
                scatter_head(&mut dv, v, s * n1, h * dh);
            }
            if let Some(acc) = d_rel.as_deref_mut() {
                let n = n1 - 1;
                for (h, ds) in dbias.iter().enumerate() {
                    let dst = &mut acc.data_mut()[h * n * n..(h + 1) * n * n];
                    for i in 0..n {
                        for j in 0..n {
                            dst[i * n + j] += ds.data()[(i + 1) * n1 + j + 1];
                        }
                    }
                }
            }
        }

        g.q_weight = matmul_tn(&bc.h1, &dq)?;
        g.q_bias = bias_backward(&dq);
        g.k_weight = matmul_tn(&bc.h1, &dk)?;
        g.k_bias = bias_backward(&dk);
        g.v_weight = matmul_tn(&bc.h1, &dv)?;
        g.v_bias = bias_backward(&dv);
        let mut dh1 = matmul_nt(&dq, &bp.q_weight)?;
        dh1.add_assign(&matmul_nt(&dk, &bp.k_weight)?)?;
        dh1.add_assign(&matmul_nt(&dv, &bp.v_weight)?)?;
        let (dx_ln1, dgam1, dbeta1) = layernorm_backward(&bc.ln1, &bp.norm1_weight, &dh1)?;
        g.norm1_weight = dgam1;
        g.norm1_bias = dbeta1;
        dx_mid.add_assign(&dx_ln1)?;
        Ok(dx_mid)
    }
}

fn stack_rows<T: Real>(mut parts: Vec<Tensor<T>>) -> Result<Tensor<T>> {
    if parts.len() == 1 {
        return Ok(parts.pop().expect("one element"));
    }
    let cols = parts[0].cols();
    let rows: usize = parts.iter().map(|p| p.rows()).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for p in parts {
        data.extend_from_slice(p.data());
    }
    Tensor::new(vec![rows, cols], data)
}

/// Rows `base..base+n` and columns `col..col+width` as a new `[n, width]`.
fn gather_head<T: Real>(x: &Tensor<T>, base: usize, n: usize, col: usize, width: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(n * width);
    for r in base..base + n {
        data.extend_from_slice(&x.row(r)[col..col + width]);
    }
    Tensor::new(vec![n, width], data).expect("sized above")
}

fn scatter_head<T: Real>(dst: &mut Tensor<T>, src: &Tensor<T>, base: usize, col: usize) {
    let width = src.cols();
    for r in 0..src.rows() {
        dst.row_mut(base + r)[col..col + width].copy_from_slice(src.row(r));
    }
}

/// Adds head `h` of a `[heads, N, N]` bias to the patch block of
/// `scores[N+1, N+1]`.
fn add_patch_bias<T: Real>(scores: &mut Tensor<T>, bias: &Tensor<T>, h: usize) {
    let n1 = scores.cols();
    let n = n1 - 1;
    let src = &bias.data()[h * n * n..(h + 1) * n * n];
    for i in 0..n {
        let row = &mut scores.row_mut(i + 1)[1..];
        for (v, &b) in row.iter_mut().zip(&src[i * n..(i + 1) * n]) {
            *v += b;
        }
    }
}
