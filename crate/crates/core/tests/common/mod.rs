//! Independent oracles shared by the integration tests: brute-force
//! reimplementations and finite differences, written without reusing the
//! library's kernels.

#![allow(dead_code)]

use varivit::encoder::{Encoder, ModelConfig, ModelParams, Positional};
use varivit::numerics::{Rng, Tensor};
use varivit::posemb::{Grid, PosEmbedGrid};

/// Master row that the centered sub-grid cell `(i, j, k)` must copy.
pub fn brute_select_source(master: Grid, sub: Grid, cell: Grid) -> Grid {
    std::array::from_fn(|a| master[a] / 2 - sub[a] / 2 + cell[a])
}

pub fn brute_center_select(master: &PosEmbedGrid<f64>, sub: Grid) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for i in 0..sub[0] {
        for j in 0..sub[1] {
            for k in 0..sub[2] {
                let src = brute_select_source(master.dims(), sub, [i, j, k]);
                out.push(master.at(src).to_vec());
            }
        }
    }
    out
}

/// Table index of offset `p − q` by direct enumeration of the offset cube.
pub fn brute_offset_index(max: Grid, p: Grid, q: Grid) -> usize {
    let mut idx = 0;
    for dl in -(max[0] as i64 - 1)..=(max[0] as i64 - 1) {
        for dh in -(max[1] as i64 - 1)..=(max[1] as i64 - 1) {
            for dw in -(max[2] as i64 - 1)..=(max[2] as i64 - 1) {
                if [dl, dh, dw]
                    == [
                        p[0] as i64 - q[0] as i64,
                        p[1] as i64 - q[1] as i64,
                        p[2] as i64 - q[2] as i64,
                    ]
                {
                    return idx;
                }
                idx += 1;
            }
        }
    }
    panic!("offset outside table");
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`; 0 when both vanish.
pub fn norm_rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Central-difference gradient of `f` w.r.t. every entry of parameter
/// tensor `group` of `enc`.
pub fn fd_group(
    enc: &mut Encoder<f64>,
    group: usize,
    h: f64,
    f: &dyn Fn(&Encoder<f64>) -> f64,
) -> Vec<f64> {
    let len = enc.params.tensors()[group].1.len();
    (0..len)
        .map(|i| {
            let orig = enc.params.tensors()[group].1.data()[i];
            enc.params.tensors_mut()[group].1.data_mut()[i] = orig + h;
            let lp = f(enc);
            enc.params.tensors_mut()[group].1.data_mut()[i] = orig - h;
            let lm = f(enc);
            enc.params.tensors_mut()[group].1.data_mut()[i] = orig;
            (lp - lm) / (2.0 * h)
        })
        .collect()
}

/// Brute-force AUC: fraction of positive/negative pairs ordered correctly,
/// ties counting one half.
pub fn pair_auc(scores: &[f64], positive: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if positive[i] && !positive[j] {
                pairs += 1.0;
                wins += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    wins / pairs
}

fn ln(x: &[f64], g: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + 1e-5).sqrt();
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mean) * inv * g.data()[i] + b.data()[i])
        .collect()
}

fn lin(x: &[f64], w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    (0..cols)
        .map(|j| b.data()[j] + (0..rows).map(|i| x[i] * w.data()[i * cols + j]).sum::<f64>())
        .collect()
}

/// One-sample forward pass written with plain loops, token by token.
pub fn reference_logits(
    cfg: &ModelConfig,
    p: &ModelParams<f64>,
    patches: &Tensor<f64>,
    pos: &Positional<f64>,
) -> Vec<f64> {
    let n = patches.shape()[0];
    let d = cfg.embed_dim;
    let heads = cfg.heads;
    let dh = d / heads;
    let mut x: Vec<Vec<f64>> = vec![p.cls_token.data().to_vec()];
    for i in 0..n {
        let mut e = lin(patches.row(i), &p.patch_weight, &p.patch_bias);
        if let Positional::Absolute(t) = pos {
            for (v, q) in e.iter_mut().zip(t.row(i)) {
                *v += q;
            }
        }
        x.push(e);
    }
    for b in &p.blocks {
        let h: Vec<Vec<f64>> = x.iter().map(|t| ln(t, &b.norm1_weight, &b.norm1_bias)).collect();
        let q: Vec<Vec<f64>> = h.iter().map(|t| lin(t, &b.q_weight, &b.q_bias)).collect();
        let k: Vec<Vec<f64>> = h.iter().map(|t| lin(t, &b.k_weight, &b.k_bias)).collect();
        let v: Vec<Vec<f64>> = h.iter().map(|t| lin(t, &b.v_weight, &b.v_bias)).collect();
        let mut o = vec![vec![0.0; d]; n + 1];
        for hd in 0..heads {
            let cols = hd * dh..(hd + 1) * dh;
            for i in 0..=n {
                let mut s: Vec<f64> = (0..=n)
                    .map(|j| {
                        let dot: f64 = cols.clone().map(|c| q[i][c] * k[j][c]).sum();
                        let mut val = dot / (dh as f64).sqrt();
                        if let Positional::Relative(t) = pos {
                            if i > 0 && j > 0 {
                                val += t.data()[(hd * n + i - 1) * n + j - 1];
                            }
                        }
                        val
                    })
                    .collect();
                let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = s.iter().map(|v| (v - m).exp()).sum();
                s.iter_mut().for_each(|v| *v = (*v - m).exp() / z);
                for c in cols.clone() {
                    o[i][c] = (0..=n).map(|j| s[j] * v[j][c]).sum();
                }
            }
        }
        for i in 0..=n {
            let a = lin(&o[i], &b.proj_weight, &b.proj_bias);
            for c in 0..d {
                x[i][c] += a[c];
            }
            let h2 = ln(&x[i], &b.norm2_weight, &b.norm2_bias);
            let u = lin(&h2, &b.fc1_weight, &b.fc1_bias);
            let g: Vec<f64> = u
                .iter()
                .map(|&t| 0.5 * t * (1.0 + libm::erf(t / std::f64::consts::SQRT_2)))
                .collect();
            let m = lin(&g, &b.fc2_weight, &b.fc2_bias);
            for c in 0..d {
                x[i][c] += m[c];
            }
        }
    }
    lin(&x[0], &p.head_weight, &p.head_bias)
}

/// Encoder whose parameters are all perturbed, so no gradient path is
/// trivially zero (the fresh head is all zeros).
pub fn perturbed_encoder(cfg: ModelConfig, seed: u64, scale: f64) -> Encoder<f64> {
    let mut rng = Rng::new(seed);
    let mut enc = Encoder::<f64>::new(cfg, &mut rng).unwrap();
    for (_, t) in enc.params.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += scale * rng.normal());
    }
    enc
}
