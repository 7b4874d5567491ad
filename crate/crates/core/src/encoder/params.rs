use super::config::{ModelConfig, PosembStrategy};
use crate::error::{Error, Result};
use crate::numerics::{Real, Rng, Tensor};
use crate::posemb::{PosEmbedGrid, PosEmbedKind, RelPosBias};

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T> {
    pub norm1_weight: Tensor<T>,
    pub norm1_bias: Tensor<T>,
    pub q_weight: Tensor<T>,
    pub q_bias: Tensor<T>,
    pub k_weight: Tensor<T>,
    pub k_bias: Tensor<T>,
    pub v_weight: Tensor<T>,
    pub v_bias: Tensor<T>,
    pub proj_weight: Tensor<T>,
    pub proj_bias: Tensor<T>,
    pub norm2_weight: Tensor<T>,
    pub norm2_bias: Tensor<T>,
    pub fc1_weight: Tensor<T>,
    pub fc1_bias: Tensor<T>,
    pub fc2_weight: Tensor<T>,
    pub fc2_bias: Tensor<T>,
}

/// Every learnable array of the encoder. The same type doubles as the
/// gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T = f32> {
    pub patch_weight: Tensor<T>,
    pub patch_bias: Tensor<T>,
    pub cls_token: Tensor<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub head_weight: Tensor<T>,
    pub head_bias: Tensor<T>,
    /// Learned master grid (`interp_learned` only).
    pub pos_embed: Option<PosEmbedGrid<T>>,
    /// Relative-offset table (`relative` only).
    pub rel_bias: Option<RelPosBias<T>>,
}

impl<T: Real> ModelParams<T> {
    /// Truncated-normal (std 0.02) projections, zero biases, unit norms.
    ///
    /// The classification head starts at zero so an untrained model emits
    /// uniform logits.
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        Self::build(cfg, |shape| Tensor::from_fn(shape, |_| T::of(rng.trunc_normal(0.02))))
    }

    /// All-zero parameters with the shapes implied by `cfg`.
    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        Ok(Self::build(cfg, Tensor::zeros)?.zeros_like())
    }

    fn build(cfg: &ModelConfig, mut random: impl FnMut(&[usize]) -> Tensor<T>) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let hidden = cfg.hidden_dim();
        let patch_weight = random(&[cfg.patch_len(), d]);
        let cls_token = random(&[d]);
        let blocks = (0..cfg.depth)
            .map(|_| BlockParams {
                norm1_weight: Tensor::ones(&[d]),
                norm1_bias: Tensor::zeros(&[d]),
                q_weight: random(&[d, d]),
                q_bias: Tensor::zeros(&[d]),
                k_weight: random(&[d, d]),
                k_bias: Tensor::zeros(&[d]),
                v_weight: random(&[d, d]),
                v_bias: Tensor::zeros(&[d]),
                proj_weight: random(&[d, d]),
                proj_bias: Tensor::zeros(&[d]),
                norm2_weight: Tensor::ones(&[d]),
                norm2_bias: Tensor::zeros(&[d]),
                fc1_weight: random(&[d, hidden]),
                fc1_bias: Tensor::zeros(&[hidden]),
                fc2_weight: random(&[hidden, d]),
                fc2_bias: Tensor::zeros(&[d]),
            })
            .collect();
        let m = cfg.max_grid();
        let pos_embed = match cfg.posemb {
            PosembStrategy::InterpLearned => Some(PosEmbedGrid::from_tensor(
                random(&[m[0], m[1], m[2], d]),
                PosEmbedKind::Learned,
            )?),
            _ => None,
        };
        let rel_bias = match cfg.posemb {
            PosembStrategy::Relative => Some(RelPosBias {
                table: random(&[cfg.heads, RelPosBias::<T>::table_len(m)]),
                max_grid: m,
            }),
            _ => None,
        };
        Ok(Self {
            patch_weight,
            patch_bias: Tensor::zeros(&[d]),
            cls_token,
            blocks,
            head_weight: Tensor::zeros(&[d, cfg.num_classes]),
            head_bias: Tensor::zeros(&[cfg.num_classes]),
            pos_embed,
            rel_bias,
        })
    }

    /// Same structure with every entry zero.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.tensors_mut().into_iter().for_each(|(_, t)| t.fill(T::zero()));
        z
    }

    /// `(name, tensor)` for every parameter, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = vec![
            ("patch_embed.weight".into(), &self.patch_weight),
            ("patch_embed.bias".into(), &self.patch_bias),
            ("cls_token".into(), &self.cls_token),
        ];
        if let Some(p) = &self.pos_embed {
            out.push(("pos_embed".into(), p.tensor()));
        }
        if let Some(r) = &self.rel_bias {
            out.push(("rel_pos_bias".into(), &r.table));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            for (n, t) in [
                ("norm1.weight", &b.norm1_weight),
                ("norm1.bias", &b.norm1_bias),
                ("attn.q.weight", &b.q_weight),
                ("attn.q.bias", &b.q_bias),
                ("attn.k.weight", &b.k_weight),
                ("attn.k.bias", &b.k_bias),
                ("attn.v.weight", &b.v_weight),
                ("attn.v.bias", &b.v_bias),
                ("attn.proj.weight", &b.proj_weight),
                ("attn.proj.bias", &b.proj_bias),
                ("norm2.weight", &b.norm2_weight),
                ("norm2.bias", &b.norm2_bias),
                ("mlp.fc1.weight", &b.fc1_weight),
                ("mlp.fc1.bias", &b.fc1_bias),
                ("mlp.fc2.weight", &b.fc2_weight),
                ("mlp.fc2.bias", &b.fc2_bias),
            ] {
                out.push((format!("blocks.{i}.{n}"), t));
            }
        }
        out.push(("head.weight".into(), &self.head_weight));
        out.push(("head.bias".into(), &self.head_bias));
        out
    }

    /// Mutable counterpart of [`ModelParams::tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<(String, &mut Tensor<T>)> = vec![
            ("patch_embed.weight".into(), &mut self.patch_weight),
            ("patch_embed.bias".into(), &mut self.patch_bias),
            ("cls_token".into(), &mut self.cls_token),
        ];
        if let Some(p) = &mut self.pos_embed {
            out.push(("pos_embed".into(), p.tensor_mut()));
        }
        if let Some(r) = &mut self.rel_bias {
            out.push(("rel_pos_bias".into(), &mut r.table));
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (n, t) in [
                ("norm1.weight", &mut b.norm1_weight),
                ("norm1.bias", &mut b.norm1_bias),
                ("attn.q.weight", &mut b.q_weight),
                ("attn.q.bias", &mut b.q_bias),
                ("attn.k.weight", &mut b.k_weight),
                ("attn.k.bias", &mut b.k_bias),
                ("attn.v.weight", &mut b.v_weight),
                ("attn.v.bias", &mut b.v_bias),
                ("attn.proj.weight", &mut b.proj_weight),
                ("attn.proj.bias", &mut b.proj_bias),
                ("norm2.weight", &mut b.norm2_weight),
                ("norm2.bias", &mut b.norm2_bias),
                ("mlp.fc1.weight", &mut b.fc1_weight),
                ("mlp.fc1.bias", &mut b.fc1_bias),
                ("mlp.fc2.weight", &mut b.fc2_weight),
                ("mlp.fc2.bias", &mut b.fc2_bias),
            ] {
                out.push((format!("blocks.{i}.{n}"), t));
            }
        }
        out.push(("head.weight".into(), &mut self.head_weight));
        out.push(("head.bias".into(), &mut self.head_bias));
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// `self += other`, parameter by parameter.
    pub fn accumulate(&mut self, other: &Self) -> Result<()> {
        let src = other.tensors();
        let mut dst = self.tensors_mut();
        if src.len() != dst.len() {
            return Err(Error::shape("accumulating mismatched parameter sets"));
        }
        for ((name, d), (_, s)) in dst.iter_mut().zip(src) {
            d.add_assign(s)
                .map_err(|e| Error::shape(format!("{name}: {e}")))?;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: T) {
        self.tensors_mut().into_iter().for_each(|(_, t)| t.scale(s));
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            patch_weight: self.patch_weight.cast(),
            patch_bias: self.patch_bias.cast(),
            cls_token: self.cls_token.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockParams {
                    norm1_weight: b.norm1_weight.cast(),
                    norm1_bias: b.norm1_bias.cast(),
                    q_weight: b.q_weight.cast(),
                    q_bias: b.q_bias.cast(),
                    k_weight: b.k_weight.cast(),
                    k_bias: b.k_bias.cast(),
                    v_weight: b.v_weight.cast(),
                    v_bias: b.v_bias.cast(),
                    proj_weight: b.proj_weight.cast(),
                    proj_bias: b.proj_bias.cast(),
                    norm2_weight: b.norm2_weight.cast(),
                    norm2_bias: b.norm2_bias.cast(),
                    fc1_weight: b.fc1_weight.cast(),
                    fc1_bias: b.fc1_bias.cast(),
                    fc2_weight: b.fc2_weight.cast(),
                    fc2_bias: b.fc2_bias.cast(),
                })
                .collect(),
            head_weight: self.head_weight.cast(),
            head_bias: self.head_bias.cast(),
            pos_embed: self.pos_embed.as_ref().map(|p| {
                PosEmbedGrid::from_tensor(p.tensor().cast(), p.kind()).expect("rank preserved")
            }),
            rel_bias: self.rel_bias.as_ref().map(|r| RelPosBias {
                table: r.table.cast(),
                max_grid: r.max_grid,
            }),
        }
    }
}

/// Parameters exempt from weight decay: norm affines, biases and the CLS token.
pub fn is_decay_exempt(name: &str) -> bool {
    name.ends_with(".bias") || name.contains("norm") || name == "cls_token"
}
