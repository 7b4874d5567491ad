//! Fixed-size patchification of variable-size volumes.

use crate::data::Volume;
use crate::error::{Error, Result};
use crate::numerics::{add_row_bias, bias_backward, matmul, matmul_tn, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub in_channels: usize,
}

impl PatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.in_channels == 0 {
            return Err(Error::config("patch size and channels must be >= 1"));
        }
        if self.embed_dim == 0 || self.embed_dim % 6 != 0 {
            return Err(Error::config(format!(
                "embed dim {} must be a positive multiple of 6",
                self.embed_dim
            )));
        }
        Ok(())
    }

    /// Flattened patch length, `C · P³`.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.patch_size.pow(3)
    }
}

/// Patch tokens of one sample with the CLS token at row 0.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence<T = f32> {
    pub tokens: Tensor<T>,
    pub grid: [usize; 3],
    pub sample_id: u64,
}

impl<T: Real> TokenSequence<T> {
    pub fn num_patches(&self) -> usize {
        self.grid.iter().product()
    }
}

/// Patch-grid extents for spatial dims; errors unless each is divisible by `p`.
pub fn patch_grid(spatial: [usize; 3], p: usize) -> Result<[usize; 3]> {
    if p == 0 || spatial.iter().any(|&s| s == 0 || s % p != 0) {
        return Err(Error::shape(format!(
            "spatial dims {spatial:?} are not divisible by patch size {p}"
        )));
    }
    Ok(spatial.map(|s| s / p))
}

/// Non-overlapping patches ordered row-major over the patch grid, each
/// flattened channel-major then voxel row-major.
pub fn extract_patches<T: Real>(v: &Volume, p: usize) -> Result<Tensor<T>> {
    let [d, h, w] = v.spatial();
    let c = v.channels();
    let [gl, gh, gw] = patch_grid([d, h, w], p)?;
    let n = gl * gh * gw;
    let plen = c * p * p * p;
    let src = v.voxels.data();
    let mut out = vec![T::zero(); n * plen];
    let mut idx = 0;
    for l in 0..gl {
        for hh in 0..gh {
            for ww in 0..gw {
                for ch in 0..c {
                    for z in 0..p {
                        for y in 0..p {
                            let base = ((ch * d + l * p + z) * h + hh * p + y) * w + ww * p;
                            for &x in &src[base..base + p] {
                                out[idx] = T::of(x as f64);
                                idx += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, plen], out)
}

/// Inverse of [`extract_patches`].
pub fn reassemble_patches(
    patches: &Tensor<f32>,
    grid: [usize; 3],
    channels: usize,
    p: usize,
) -> Result<Tensor<f32>> {
    let [gl, gh, gw] = grid;
    let n = gl * gh * gw;
    if patches.shape() != [n, channels * p * p * p] {
        return Err(Error::shape(format!(
            "patches {:?} do not match grid {grid:?} with {channels} channels, P={p}",
            patches.shape()
        )));
    }
    let (d, h, w) = (gl * p, gh * p, gw * p);
    let mut out = vec![0f32; channels * d * h * w];
    let mut src = patches.data().iter();
    for l in 0..gl {
        for hh in 0..gh {
            for ww in 0..gw {
                for ch in 0..channels {
                    for z in 0..p {
                        for y in 0..p {
                            let base = ((ch * d + l * p + z) * h + hh * p + y) * w + ww * p;
                            for o in &mut out[base..base + p] {
                                *o = *src.next().expect("length checked");
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![channels, d, h, w], out)
}

/// `patches · W + b` for every patch row.
pub fn project<T: Real>(patches: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mut e = matmul(patches, w)?;
    add_row_bias(&mut e, b)?;
    Ok(e)
}

/// Projects patches and prepends the CLS token.
pub fn embed<T: Real>(
    patches: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    cls: &Tensor<T>,
    grid: [usize; 3],
    sample_id: u64,
) -> Result<TokenSequence<T>> {
    let n: usize = grid.iter().product();
    if patches.rows() != n {
        return Err(Error::shape(format!(
            "{} patches for grid {grid:?}",
            patches.rows()
        )));
    }
    let e = project(patches, w, b)?;
    let d = e.cols();
    if cls.len() != d {
        return Err(Error::shape(format!("CLS of {} for width {d}", cls.len())));
    }
    let mut data = Vec::with_capacity((n + 1) * d);
    data.extend_from_slice(cls.data());
    data.extend_from_slice(e.data());
    Ok(TokenSequence {
        tokens: Tensor::new(vec![n + 1, d], data)?,
        grid,
        sample_id,
    })
}

/// Gradients of [`embed`] w.r.t. `(W, b, cls)` given `dtokens[N+1, d]`.
pub fn embed_backward<T: Real>(
    patches: &Tensor<T>,
    dtokens: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, d) = (patches.rows(), dtokens.cols());
    if dtokens.rows() != n + 1 {
        return Err(Error::shape(format!(
            "token gradient has {} rows for {n} patches",
            dtokens.rows()
        )));
    }
    let dcls = Tensor::new(vec![d], dtokens.row(0).to_vec())?;
    let de = Tensor::new(vec![n, d], dtokens.data()[d..].to_vec())?;
    Ok((matmul_tn(patches, &de)?, bias_backward(&de), dcls))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn volume(edge: usize, seed: u64) -> Volume {
        let mut rng = Rng::new(seed);
        let t = Tensor::from_fn(&[4, edge, edge, edge], |_| rng.uniform() as f32);
        Volume::new(t, 0, None, 0).unwrap()
    }

    #[test]
    fn patch_counts() {
        assert_eq!(patch_grid([96; 3], 16).unwrap(), [6, 6, 6]);
        assert_eq!(patch_grid([80; 3], 16).unwrap(), [5, 5, 5]);
        assert_eq!(patch_grid([64; 3], 16).unwrap(), [4, 4, 4]);
        assert!(patch_grid([70; 3], 16).is_err());
    }

    #[test]
    fn extract_reassemble_is_identity() {
        for (edge, p) in [(16, 8), (24, 8), (12, 4), (8, 1)] {
            let v = volume(edge, edge as u64);
            let patches = extract_patches::<f32>(&v, p).unwrap();
            let g = patch_grid(v.spatial(), p).unwrap();
            assert_eq!(patches.rows(), g.iter().product::<usize>());
            let back = reassemble_patches(&patches, g, 4, p).unwrap();
            assert_eq!(back, v.voxels);
        }
    }

    #[test]
    fn non_cubic_volumes_patchify() {
        let mut rng = Rng::new(1);
        let t = Tensor::from_fn(&[2, 8, 16, 24], |_| rng.uniform() as f32);
        let v = Volume::new(t, 0, None, 0).unwrap();
        let patches = extract_patches::<f32>(&v, 8).unwrap();
        assert_eq!(patches.shape(), &[6, 2 * 512]);
        assert_eq!(reassemble_patches(&patches, [1, 2, 3], 2, 8).unwrap(), v.voxels);
    }

    #[test]
    fn first_patch_layout() {
        let t = Tensor::from_fn(&[2, 4, 4, 4], |i| i as f32);
        let v = Volume::new(t, 0, None, 0).unwrap();
        let patches = extract_patches::<f32>(&v, 2).unwrap();
        // channel 0 voxels of patch (0,0,0), then channel 1
        assert_eq!(&patches.row(0)[..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(patches.row(0)[8], 64.0);
        // patch (0,0,1) starts at x = 2
        assert_eq!(patches.row(1)[0], 2.0);
    }

    #[test]
    fn embed_examples() {
        let mut rng = Rng::new(4);
        let patches = Tensor::<f64>::from_fn(&[8, 10], |_| rng.normal());
        let cls = Tensor::<f64>::from_fn(&[6], |_| rng.normal());
        let zero = embed(
            &patches,
            &Tensor::zeros(&[10, 6]),
            &Tensor::zeros(&[6]),
            &cls,
            [2, 2, 2],
            0,
        )
        .unwrap();
        assert_eq!(zero.tokens.row(0), cls.data());
        assert!(zero.tokens.data()[6..].iter().all(|&x| x == 0.0));

        let w = Tensor::<f64>::from_fn(&[10, 6], |_| rng.normal());
        let b = Tensor::<f64>::from_fn(&[6], |_| rng.normal());
        let base = embed(&patches, &w, &b, &cls, [2, 2, 2], 0).unwrap();
        let perm = [3, 1, 7, 0, 2, 6, 5, 4];
        let mut shuffled = Vec::new();
        for &i in &perm {
            shuffled.extend_from_slice(patches.row(i));
        }
        let shuffled = Tensor::new(vec![8, 10], shuffled).unwrap();
        let out = embed(&shuffled, &w, &b, &cls, [2, 2, 2], 0).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(out.tokens.row(k + 1), base.tokens.row(i + 1));
        }
    }

    #[test]
    fn embed_backward_matches_finite_differences() {
        let mut rng = Rng::new(8);
        let patches = Tensor::<f64>::from_fn(&[4, 5], |_| rng.normal());
        let w = Tensor::<f64>::from_fn(&[5, 6], |_| rng.normal());
        let b = Tensor::<f64>::from_fn(&[6], |_| rng.normal());
        let cls = Tensor::<f64>::from_fn(&[6], |_| rng.normal());
        let up = Tensor::<f64>::from_fn(&[5, 6], |_| rng.normal());
        let loss = |w: &Tensor<f64>, b: &Tensor<f64>, cls: &Tensor<f64>| {
            let t = embed(&patches, w, b, cls, [1, 2, 2], 0).unwrap().tokens;
            t.data().iter().zip(up.data()).map(|(x, y)| x * y).sum::<f64>()
        };
        let (dw, db, dcls) = embed_backward(&patches, &up).unwrap();
        let h = 1e-5;
        let check = |analytic: &Tensor<f64>, which: usize| {
            for i in 0..analytic.len() {
                let (mut wp, mut bp, mut cp) = (w.clone(), b.clone(), cls.clone());
                let (mut wm, mut bm, mut cm) = (w.clone(), b.clone(), cls.clone());
                match which {
                    0 => {
                        wp.data_mut()[i] += h;
                        wm.data_mut()[i] -= h;
                    }
                    1 => {
                        bp.data_mut()[i] += h;
                        bm.data_mut()[i] -= h;
                    }
                    _ => {
                        cp.data_mut()[i] += h;
                        cm.data_mut()[i] -= h;
                    }
                }
                let num = (loss(&wp, &bp, &cp) - loss(&wm, &bm, &cm)) / (2.0 * h);
                let a = analytic.data()[i];
                assert!((a - num).abs() <= 1e-6 * a.abs().max(1.0));
            }
        };
        check(&dw, 0);
        check(&db, 1);
        check(&dcls, 2);
    }
}
