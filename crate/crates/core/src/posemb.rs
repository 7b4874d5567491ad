//! Positional embeddings for variable-size patch grids.
//!
//! A master grid is built once for the largest image size. Smaller images
//! take a centered sub-block of it ([`center_and_select`]), an interpolated
//! copy ([`interp_resize`]), or a grid of their own ([`build_independent`]).
//! [`RelPosBias`] is the relative alternative, a per-head lookup table of
//! attention-score offsets.
//!
//! Grids are stored as `[G_l, G_h, G_w, d]`, so the same buffer read as
//! `[N, d]` gives one row per patch in patch order.

use std::collections::BTreeMap;
use std::ops::Range;

use crate::error::{Error, Result};
use crate::numerics::{Real, Rng, Tensor};

pub type Grid = [usize; 3];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PosEmbedKind {
    SinusoidalFixed,
    Learned,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PosEmbedGrid<T = f32> {
    grid: Tensor<T>,
    kind: PosEmbedKind,
}

impl<T: Real> PosEmbedGrid<T> {
    pub fn from_tensor(grid: Tensor<T>, kind: PosEmbedKind) -> Result<Self> {
        if grid.rank() != 4 {
            return Err(Error::shape(format!(
                "positional grid must be [G_l, G_h, G_w, d], got {:?}",
                grid.shape()
            )));
        }
        Ok(Self { grid, kind })
    }

    /// Truncated-normal (std 0.02) learnable grid.
    pub fn learned(dims: Grid, d: usize, rng: &mut Rng) -> Self {
        let grid = Tensor::from_fn(&[dims[0], dims[1], dims[2], d], |_| T::of(rng.trunc_normal(0.02)));
        Self {
            grid,
            kind: PosEmbedKind::Learned,
        }
    }

    pub fn dims(&self) -> Grid {
        let s = self.grid.shape();
        [s[0], s[1], s[2]]
    }

    pub fn dim(&self) -> usize {
        self.grid.shape()[3]
    }

    pub fn kind(&self) -> PosEmbedKind {
        self.kind
    }

    pub fn num_positions(&self) -> usize {
        self.dims().iter().product()
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.grid
    }

    pub fn tensor_mut(&mut self) -> &mut Tensor<T> {
        &mut self.grid
    }

    /// Embedding of grid cell `(l, h, w)`.
    pub fn at(&self, pos: Grid) -> &[T] {
        let [_, gh, gw] = self.dims();
        self.grid.row((pos[0] * gh + pos[1]) * gw + pos[2])
    }

    /// The grid viewed as `[N, d]`.
    pub fn to_rows(&self) -> Tensor<T> {
        self.grid
            .clone()
            .reshape(&[self.num_positions(), self.dim()])
            .expect("same element count")
    }
}

/// One axis of Eq.-style sinusoidal encoding: entry `2i` is
/// `sin(pos / 10000^(2i/d))`, entry `2i+1` is `cos(pos / 10000^((2i+1)/d))`.
pub fn sinusoidal_1d(pos: usize, d_axis: usize) -> Result<Vec<f64>> {
    if d_axis == 0 || d_axis % 2 != 0 {
        return Err(Error::config(format!(
            "sinusoid width {d_axis} must be a positive even number"
        )));
    }
    let p = pos as f64;
    let d = d_axis as f64;
    let mut out = Vec::with_capacity(d_axis);
    for i in 0..d_axis / 2 {
        let even = (2 * i) as f64;
        out.push((p / 10000f64.powf(even / d)).sin());
        out.push((p / 10000f64.powf((even + 1.0) / d)).cos());
    }
    Ok(out)
}

/// Fixed 3D grid: each cell is the concatenation of the 1D encodings of its
/// `l`, `h` and `w` coordinates, `d/3` entries each.
pub fn build_sinusoidal_3d<T: Real>(dims: Grid, d: usize) -> Result<PosEmbedGrid<T>> {
    if d == 0 || d % 6 != 0 {
        return Err(Error::config(format!(
            "embedding width {d} must be a positive multiple of 6"
        )));
    }
    if dims.iter().any(|&g| g == 0) {
        return Err(Error::config(format!("empty grid {dims:?}")));
    }
    let third = d / 3;
    let axis_tables: Vec<Vec<Vec<f64>>> = dims
        .iter()
        .map(|&g| (0..g).map(|p| sinusoidal_1d(p, third)).collect())
        .collect::<Result<_>>()?;
    let mut data = Vec::with_capacity(dims.iter().product::<usize>() * d);
    for l in 0..dims[0] {
        for h in 0..dims[1] {
            for w in 0..dims[2] {
                for (axis, pos) in [l, h, w].into_iter().enumerate() {
                    data.extend(axis_tables[axis][pos].iter().map(|&v| T::of(v)));
                }
            }
        }
    }
    PosEmbedGrid::from_tensor(
        Tensor::new(vec![dims[0], dims[1], dims[2], d], data)?,
        PosEmbedKind::SinusoidalFixed,
    )
}

/// `(⌊G_l/2⌋, ⌊G_h/2⌋, ⌊G_w/2⌋)`.
pub fn center(dims: Grid) -> Grid {
    dims.map(|g| g / 2)
}

/// Per-axis `[start, end)` with `start = C_k − ⌊G'_k/2⌋`, `end = start + G'_k`.
pub fn selection_ranges(master: Grid, sub: Grid) -> Result<[Range<usize>; 3]> {
    if sub.iter().zip(master).any(|(&s, m)| s == 0 || s > m) {
        return Err(Error::shape(format!(
            "cannot select grid {sub:?} from master {master:?}"
        )));
    }
    let c = center(master);
    Ok(std::array::from_fn(|k| {
        let start = c[k] - sub[k] / 2;
        start..start + sub[k]
    }))
}

/// Centered sub-block of `master` of extent `sub`. Values are copied, never
/// combined.
pub fn center_and_select<T: Real>(master: &PosEmbedGrid<T>, sub: Grid) -> Result<PosEmbedGrid<T>> {
    let [rl, rh, rw] = selection_ranges(master.dims(), sub)?;
    let d = master.dim();
    let mut data = Vec::with_capacity(sub.iter().product::<usize>() * d);
    for l in rl {
        for h in rh.clone() {
            for w in rw.clone() {
                data.extend_from_slice(master.at([l, h, w]));
            }
        }
    }
    PosEmbedGrid::from_tensor(
        Tensor::new(vec![sub[0], sub[1], sub[2], d], data)?,
        master.kind(),
    )
}

/// Source positions of an endpoint-aligned resize from `from` to `to` cells,
/// as `(index, weight)` pairs with zero weights dropped.
fn axis_weights(from: usize, to: usize) -> Vec<Vec<(usize, f64)>> {
    (0..to)
        .map(|i| {
            let x = if to == 1 {
                (from as f64 - 1.0) / 2.0
            } else {
                (i * (from - 1)) as f64 / (to - 1) as f64
            };
            let lo = (x.floor() as usize).min(from - 1);
            let frac = x - lo as f64;
            if frac == 0.0 || lo + 1 >= from {
                vec![(lo, 1.0)]
            } else {
                vec![(lo, 1.0 - frac), (lo + 1, frac)]
            }
        })
        .collect()
}

/// Trilinear resize with endpoint alignment: the corner cells of the output
/// sample the corner cells of `master`. A single-cell axis samples the
/// master's center.
pub fn interp_resize<T: Real>(master: &PosEmbedGrid<T>, sub: Grid) -> Result<PosEmbedGrid<T>> {
    if sub.iter().any(|&s| s == 0) {
        return Err(Error::shape(format!("empty target grid {sub:?}")));
    }
    let m = master.dims();
    let d = master.dim();
    let wts: [Vec<Vec<(usize, f64)>>; 3] = std::array::from_fn(|k| axis_weights(m[k], sub[k]));
    let mut data = vec![T::zero(); sub.iter().product::<usize>() * d];
    let mut out_rows = data.chunks_mut(d);
    for wl in &wts[0] {
        for wh in &wts[1] {
            for ww in &wts[2] {
                let row = out_rows.next().expect("sized above");
                for &(l, a) in wl {
                    for &(h, b) in wh {
                        for &(w, c) in ww {
                            let weight = T::of(a * b * c);
                            for (o, &v) in row.iter_mut().zip(master.at([l, h, w])) {
                                *o += weight * v;
                            }
                        }
                    }
                }
            }
        }
    }
    PosEmbedGrid::from_tensor(Tensor::new(vec![sub[0], sub[1], sub[2], d], data)?, master.kind())
}

/// Adjoint of [`interp_resize`]: maps a gradient on the resized rows
/// `[N', d]` back onto the master grid `[G_l, G_h, G_w, d]`.
pub fn interp_resize_backward<T: Real>(
    master_dims: Grid,
    sub: Grid,
    d_rows: &Tensor<T>,
) -> Result<Tensor<T>> {
    let d = d_rows.cols();
    if d_rows.rows() != sub.iter().product::<usize>() {
        return Err(Error::shape(format!(
            "gradient of {} rows for grid {sub:?}",
            d_rows.rows()
        )));
    }
    let m = master_dims;
    let wts: [Vec<Vec<(usize, f64)>>; 3] = std::array::from_fn(|k| axis_weights(m[k], sub[k]));
    let mut out = Tensor::zeros(&[m[0], m[1], m[2], d]);
    let mut rows = d_rows.data().chunks(d);
    for wl in &wts[0] {
        for wh in &wts[1] {
            for ww in &wts[2] {
                let g = rows.next().expect("sized above");
                for &(l, a) in wl {
                    for &(h, b) in wh {
                        for &(w, c) in ww {
                            let weight = T::of(a * b * c);
                            let dst = out.row_mut((l * m[1] + h) * m[2] + w);
                            for (o, &v) in dst.iter_mut().zip(g) {
                                *o += weight * v;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Separate fixed sinusoidal grid per distinct size, each starting at the
/// origin.
pub fn build_independent<T: Real>(grids: &[Grid], d: usize) -> Result<BTreeMap<Grid, PosEmbedGrid<T>>> {
    let mut out = BTreeMap::new();
    for &g in grids {
        if !out.contains_key(&g) {
            out.insert(g, build_sinusoidal_3d(g, d)?);
        }
    }
    Ok(out)
}

/// Learnable per-head bias indexed by relative patch offset.
///
/// The table covers every offset between two cells of the largest grid,
/// `(2M_l−1)(2M_h−1)(2M_w−1)` entries per head; offsets are not clipped.
#[derive(Clone, Debug, PartialEq)]
pub struct RelPosBias<T = f32> {
    pub table: Tensor<T>,
    pub max_grid: Grid,
}

impl<T: Real> RelPosBias<T> {
    pub fn table_len(max_grid: Grid) -> usize {
        max_grid.iter().map(|&m| 2 * m - 1).product()
    }

    pub fn zeros(heads: usize, max_grid: Grid) -> Self {
        Self {
            table: Tensor::zeros(&[heads, Self::table_len(max_grid)]),
            max_grid,
        }
    }

    pub fn learned(heads: usize, max_grid: Grid, rng: &mut Rng) -> Self {
        Self {
            table: Tensor::from_fn(&[heads, Self::table_len(max_grid)], |_| {
                T::of(rng.trunc_normal(0.02))
            }),
            max_grid,
        }
    }

    pub fn heads(&self) -> usize {
        self.table.shape()[0]
    }
}

/// Table index of the offset `p − q`, shifted by `M − 1` per axis.
pub fn offset_index(max_grid: Grid, p: Grid, q: Grid) -> usize {
    let span = max_grid.map(|m| 2 * m - 1);
    let shifted: [usize; 3] =
        std::array::from_fn(|k| (p[k] + max_grid[k] - 1) - q[k]);
    (shifted[0] * span[1] + shifted[1]) * span[2] + shifted[2]
}

fn cell(dims: Grid, flat: usize) -> Grid {
    [flat / (dims[1] * dims[2]), (flat / dims[2]) % dims[1], flat % dims[2]]
}

/// Table index for every ordered patch pair of `grid`, row-major `[N, N]`.
pub fn rel_bias_indices(max_grid: Grid, grid: Grid) -> Result<Vec<usize>> {
    if grid.iter().zip(max_grid).any(|(&g, m)| g == 0 || g > m) {
        return Err(Error::shape(format!(
            "grid {grid:?} exceeds relative-bias capacity {max_grid:?}"
        )));
    }
    let n: usize = grid.iter().product();
    let mut idx = Vec::with_capacity(n * n);
    for p in 0..n {
        let cp = cell(grid, p);
        for q in 0..n {
            idx.push(offset_index(max_grid, cp, cell(grid, q)));
        }
    }
    Ok(idx)
}

/// `[heads, N, N]` bias for the patches of `grid`.
pub fn rel_bias_lookup<T: Real>(bias: &RelPosBias<T>, grid: Grid) -> Result<Tensor<T>> {
    let idx = rel_bias_indices(bias.max_grid, grid)?;
    let heads = bias.heads();
    let n: usize = grid.iter().product();
    let mut data = Vec::with_capacity(heads * n * n);
    for h in 0..heads {
        let row = bias.table.row(h);
        data.extend(idx.iter().map(|&i| row[i]));
    }
    Tensor::new(vec![heads, n, n], data)
}

/// Scatters a `[heads, N, N]` bias gradient into a table-shaped gradient.
pub fn rel_bias_backward<T: Real>(
    bias: &RelPosBias<T>,
    grid: Grid,
    d_bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let idx = rel_bias_indices(bias.max_grid, grid)?;
    let heads = bias.heads();
    let n: usize = grid.iter().product();
    if d_bias.shape() != [heads, n, n] {
        return Err(Error::shape(format!(
            "bias gradient {:?}, expected [{heads}, {n}, {n}]",
            d_bias.shape()
        )));
    }
    let mut out = Tensor::zeros(bias.table.shape());
    for h in 0..heads {
        let g = &d_bias.data()[h * n * n..(h + 1) * n * n];
        let dst = out.row_mut(h);
        for (&i, &v) in idx.iter().zip(g) {
            dst[i] += v;
        }
    }
    Ok(out)
}

/// Cosine similarity between the embedding at `anchor` and every cell.
pub fn cosine_similarity_map<T: Real>(grid: &PosEmbedGrid<T>, anchor: Grid) -> Result<Tensor<T>> {
    let dims = grid.dims();
    if anchor.iter().zip(dims).any(|(&a, g)| a >= g) {
        return Err(Error::shape(format!(
            "anchor {anchor:?} outside grid {dims:?}"
        )));
    }
    let norm = |v: &[T]| v.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt();
    let a = grid.at(anchor);
    let na = norm(a);
    let data = (0..grid.num_positions())
        .map(|p| {
            let b = grid.tensor().row(p);
            let nb = norm(b);
            if na == 0.0 || nb == 0.0 {
                return T::zero();
            }
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x.as_f64() * y.as_f64()).sum();
            T::of((dot / (na * nb)).clamp(-1.0, 1.0))
        })
        .collect();
    Tensor::new(dims.to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sinusoid_examples() {
        let z = sinusoidal_1d(0, 8).unwrap();
        assert_eq!(z, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let one = sinusoidal_1d(1, 4).unwrap();
        assert_eq!(one[0], 1f64.sin());
        assert!((one[0] - 0.841_470_984_8).abs() < 1e-10);
        // odd entries use the (2i+1)/d exponent
        assert_eq!(one[1], (1.0 / 10000f64.powf(0.25)).cos());
        assert!(sinusoidal_1d(3, 5).is_err());
        for pos in 0..50 {
            assert!(sinusoidal_1d(pos, 16).unwrap().iter().all(|v| v.abs() <= 1.0));
        }
    }

    #[test]
    fn sinusoid_3d_structure() {
        let g = build_sinusoidal_3d::<f64>([3, 4, 5], 12).unwrap();
        assert_eq!(g.at([0, 0, 0]), &[0., 1., 0., 1., 0., 1., 0., 1., 0., 1., 0., 1.]);
        assert_eq!(&g.at([2, 1, 3])[4..], &g.at([0, 1, 3])[4..]);
        assert_eq!(&g.at([1, 3, 2])[..4], &sinusoidal_1d(1, 4).unwrap()[..]);
        assert!(build_sinusoidal_3d::<f32>([2, 2, 2], 8).is_err());
        assert_eq!(
            build_sinusoidal_3d::<f32>([3, 3, 3], 24).unwrap(),
            build_sinusoidal_3d::<f32>([3, 3, 3], 24).unwrap()
        );
    }

    #[test]
    fn center_examples() {
        assert_eq!(center([6, 6, 6]), [3, 3, 3]);
        assert_eq!(center([5, 5, 5]), [2, 2, 2]);
        assert_eq!(center([1, 1, 1]), [0, 0, 0]);
    }

    #[test]
    fn selection_examples() {
        assert_eq!(
            selection_ranges([6, 6, 6], [4, 4, 4]).unwrap(),
            [1..5, 1..5, 1..5]
        );
        assert_eq!(
            selection_ranges([5, 5, 5], [2, 2, 2]).unwrap(),
            [1..3, 1..3, 1..3]
        );
        assert_eq!(
            selection_ranges([6, 5, 4], [6, 3, 1]).unwrap(),
            [0..6, 1..4, 2..3]
        );
        assert!(selection_ranges([4, 4, 4], [5, 4, 4]).is_err());
    }

    #[test]
    fn selection_picks_master_rows() {
        let master = build_sinusoidal_3d::<f32>([6, 6, 6], 12).unwrap();
        assert_eq!(center_and_select(&master, [6, 6, 6]).unwrap(), master);
        let sub = center_and_select(&master, [4, 4, 4]).unwrap();
        assert_eq!(sub.at([0, 0, 0]), master.at([1, 1, 1]));
        assert_eq!(sub.at([3, 2, 1]), master.at([4, 3, 2]));
    }

    #[test]
    fn interp_examples() {
        let master = build_sinusoidal_3d::<f64>([4, 3, 5], 6).unwrap();
        assert_eq!(interp_resize(&master, [4, 3, 5]).unwrap(), master);

        let constant = PosEmbedGrid::from_tensor(
            Tensor::full(&[3, 3, 3, 6], 0.7f64),
            PosEmbedKind::Learned,
        )
        .unwrap();
        let out = interp_resize(&constant, [2, 2, 2]).unwrap();
        assert!(out.tensor().data().iter().all(|&v| (v - 0.7).abs() < 1e-15));

        // ramp value = 100 l + 10 h + w on a 3³ grid
        let ramp = PosEmbedGrid::from_tensor(
            Tensor::from_fn(&[3, 3, 3, 1], |i| {
                let (l, h, w) = (i / 9, (i / 3) % 3, i % 3);
                (100 * l + 10 * h + w) as f64
            }),
            PosEmbedKind::Learned,
        )
        .unwrap();
        let out = interp_resize(&ramp, [2, 2, 2]).unwrap();
        let expect = [0., 2., 20., 22., 200., 202., 220., 222.];
        assert_eq!(out.tensor().data(), &expect);
        let down = interp_resize(&ramp, [3, 2, 1]).unwrap();
        assert_eq!(down.tensor().data(), &[1., 21., 101., 121., 201., 221.]);
    }

    #[test]
    fn interp_backward_is_adjoint() {
        let mut rng = Rng::new(5);
        let master = PosEmbedGrid::<f64>::learned([4, 5, 3], 6, &mut rng);
        for sub in [[2, 3, 2], [4, 5, 3], [1, 2, 3], [3, 3, 3]] {
            let n: usize = sub.iter().product();
            let g = Tensor::<f64>::from_fn(&[n, 6], |_| rng.normal());
            let fwd = interp_resize(&master, sub).unwrap().to_rows();
            let lhs: f64 = fwd.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
            let back = interp_resize_backward([4, 5, 3], sub, &g).unwrap();
            let rhs: f64 = back
                .data()
                .iter()
                .zip(master.tensor().data())
                .map(|(a, b)| a * b)
                .sum();
            assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn independent_examples() {
        let sizes = [[4, 4, 4], [5, 5, 5], [6, 6, 6], [4, 4, 4]];
        let map = build_independent::<f32>(&sizes, 12).unwrap();
        assert_eq!(map.len(), 3);
        assert_eq!(map[&[6, 6, 6]], build_sinusoidal_3d([6, 6, 6], 12).unwrap());
        assert_eq!(map[&[4, 4, 4]].at([0, 0, 0]), map[&[6, 6, 6]].at([0, 0, 0]));
    }

    #[test]
    fn rel_bias_examples() {
        let zero = RelPosBias::<f32>::zeros(2, [3, 3, 3]);
        assert_eq!(rel_bias_lookup(&zero, [2, 3, 2]).unwrap().max_abs(), 0.0);

        let m = [3, 2, 4];
        let idx = rel_bias_indices(m, m).unwrap();
        let n = 24;
        for p in 0..n {
            for q in 0..n {
                let (cp, cq) = (cell(m, p), cell(m, q));
                assert_eq!(idx[p * n + q], offset_index(m, cp, cq));
                // the reverse pair mirrors the offset about the table center
                let mirrored = RelPosBias::<f32>::table_len(m) - 1 - idx[p * n + q];
                assert_eq!(idx[q * n + p], mirrored);
            }
        }
        assert!(rel_bias_indices([2, 2, 2], [3, 2, 2]).is_err());
    }

    #[test]
    fn rel_bias_backward_matches_lookup_adjoint() {
        let mut rng = Rng::new(2);
        let bias = RelPosBias::<f64>::learned(2, [3, 3, 3], &mut rng);
        let grid = [2, 3, 2];
        let fwd = rel_bias_lookup(&bias, grid).unwrap();
        let g = Tensor::<f64>::from_fn(fwd.shape(), |_| rng.normal());
        let lhs: f64 = fwd.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let back = rel_bias_backward(&bias, grid, &g).unwrap();
        let rhs: f64 = back
            .data()
            .iter()
            .zip(bias.table.data())
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn cosine_map_examples() {
        let g = build_sinusoidal_3d::<f64>([4, 4, 4], 24).unwrap();
        let map = cosine_similarity_map(&g, [1, 2, 3]).unwrap();
        assert_eq!(map.shape(), &[4, 4, 4]);
        assert!((map.data()[(4 + 2) * 4 + 3] - 1.0).abs() < 1e-12);
        assert!(map.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let a = cosine_similarity_map(&g, [0, 0, 0]).unwrap();
        let b = cosine_similarity_map(&g, [3, 1, 2]).unwrap();
        assert_eq!(a.data()[(3 * 4 + 1) * 4 + 2], b.data()[0]);
        assert!(cosine_similarity_map(&g, [4, 0, 0]).is_err());
    }
}
