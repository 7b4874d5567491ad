//! Synthetic volumes, size bins, intensity handling and dataset files.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::io::{read_tensor, write_tensor};
use crate::numerics::{Rng, Tensor};

pub const CHANNELS: usize = 4;
pub const PAPER_EDGES: [usize; 3] = [64, 80, 96];
pub const TINY_EDGES: [usize; 3] = [16, 24, 32];
pub const BIN_THRESHOLDS: (usize, usize) = (67, 87);

pub const MANIFEST_FILE: &str = "manifest.tsv";
const TUMOR_FILE: &str = "tumors.tsv";

/// A channels-first `[C, D, H, W]` volume with its label.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub voxels: Tensor<f32>,
    pub label: usize,
    /// Bounding-box extent of the synthetic tumor, when known.
    pub tumor_extent: Option<[usize; 3]>,
    pub sample_id: u64,
}

impl Volume {
    pub fn new(
        voxels: Tensor<f32>,
        label: usize,
        tumor_extent: Option<[usize; 3]>,
        sample_id: u64,
    ) -> Result<Self> {
        if voxels.rank() != 4 {
            return Err(Error::data(format!(
                "volume {sample_id}: expected [C, D, H, W], got {:?}",
                voxels.shape()
            )));
        }
        let v = Self {
            voxels,
            label,
            tumor_extent,
            sample_id,
        };
        if let Some(ext) = tumor_extent {
            let dims = v.spatial();
            if ext.iter().zip(dims).any(|(&t, d)| t > d) {
                return Err(Error::data(format!(
                    "volume {sample_id}: tumor extent {ext:?} exceeds {dims:?}"
                )));
            }
        }
        Ok(v)
    }

    pub fn channels(&self) -> usize {
        self.voxels.shape()[0]
    }

    pub fn spatial(&self) -> [usize; 3] {
        let s = self.voxels.shape();
        [s[1], s[2], s[3]]
    }

    /// Largest spatial extent; equals the crop edge for cubic crops.
    pub fn edge(&self) -> usize {
        self.spatial().into_iter().max().unwrap_or(0)
    }
}

/// Crop-size category assigned from the largest tumor dimension.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SizeBin {
    pub crop_edge: usize,
}

/// `< 67 → 64`, `67..=87 → 80`, `> 87 → 96`.
pub fn assign_bin(max_tumor_dim: usize) -> SizeBin {
    let (lo, hi) = BIN_THRESHOLDS;
    let crop_edge = if max_tumor_dim < lo {
        PAPER_EDGES[0]
    } else if max_tumor_dim <= hi {
        PAPER_EDGES[1]
    } else {
        PAPER_EDGES[2]
    };
    SizeBin { crop_edge }
}

/// Linear map of `values` onto `[0, 1]`. Constant input maps to zeros.
pub fn rescale_slice(values: &mut [f32]) {
    let (min, max) = values
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let range = max - min;
    if !(range > 0.0) {
        values.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    for v in values.iter_mut() {
        *v = ((*v - min) / range).clamp(0.0, 1.0);
    }
}

pub fn rescale_intensity(v: &Tensor<f32>) -> Tensor<f32> {
    let mut out = v.clone();
    rescale_slice(out.data_mut());
    out
}

/// Per-channel zero-mean, unit-variance copy of `v`. Constant channels map
/// to zeros.
pub fn standardize(v: &Volume) -> Volume {
    let mut voxels = v.voxels.clone();
    let n = v.spatial().iter().product::<usize>();
    if n > 0 {
        for ch in voxels.data_mut().chunks_mut(n) {
            let mean = ch.iter().map(|&x| x as f64).sum::<f64>() / n as f64;
            let var = ch.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n as f64;
            let inv = if var > 0.0 { 1.0 / var.sqrt() } else { 0.0 };
            ch.iter_mut().for_each(|x| *x = ((*x as f64 - mean) * inv) as f32);
        }
    }
    Volume { voxels, ..v.clone() }
}

/// Knobs of the synthetic two-property task.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub patch_size: usize,
    pub num_classes: usize,
}

impl SyntheticConfig {
    /// Major/minor axis ratio: 1.0 for class 0 rising to 1.8 for the last class.
    pub fn anisotropy(&self, class: usize) -> f64 {
        1.0 + 0.8 * class_fraction(class, self.num_classes)
    }

    /// Radial texture frequency in cycles per voxel.
    pub fn texture_frequency(&self, class: usize) -> f64 {
        0.08 + 0.22 * class_fraction(class, self.num_classes)
    }
}

fn class_fraction(class: usize, num_classes: usize) -> f64 {
    if num_classes <= 1 {
        0.0
    } else {
        class as f64 / (num_classes - 1) as f64
    }
}

const CHANNEL_GAIN: [f64; CHANNELS] = [1.0, 0.85, 0.7, 0.9];

/// Generates a cubic crop with an ellipsoid centered at the crop center.
///
/// Class controls the ellipsoid's axis ratio and the frequency of the
/// radial interior texture. Each channel is rescaled to `[0, 1]`.
pub fn generate_volume(
    cfg: &SyntheticConfig,
    rng: &mut Rng,
    class: usize,
    crop_edge: usize,
    sample_id: u64,
) -> Result<Volume> {
    if cfg.patch_size == 0 || crop_edge == 0 || crop_edge % cfg.patch_size != 0 {
        return Err(Error::config(format!(
            "crop edge {crop_edge} is not a multiple of patch size {}",
            cfg.patch_size
        )));
    }
    if class >= cfg.num_classes {
        return Err(Error::config(format!(
            "class {class} out of range for {} classes",
            cfg.num_classes
        )));
    }
    let e = crop_edge;
    let center = (e as f64 - 1.0) / 2.0;
    let major = rng.uniform_range(0.45, 0.75) * e as f64 / 2.0;
    let minor = (major / cfg.anisotropy(class)).max(1.0);
    let long_axis = rng.below(3);
    let semi: [f64; 3] = std::array::from_fn(|a| if a == long_axis { major } else { minor });
    let freq = cfg.texture_frequency(class);

    let plane = e * e;
    let mut data = vec![0f32; CHANNELS * e * plane];
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    for z in 0..e {
        for y in 0..e {
            for x in 0..e {
                let d = [z as f64 - center, y as f64 - center, x as f64 - center];
                let q: f64 = (0..3).map(|a| (d[a] / semi[a]).powi(2)).sum();
                let idx = z * plane + y * e + x;
                if q <= 1.0 {
                    let r = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                    let tex = 0.5 + 0.5 * (2.0 * std::f64::consts::PI * freq * r).cos();
                    for (c, gain) in CHANNEL_GAIN.iter().enumerate() {
                        data[c * e * plane + idx] = (0.55 + 0.4 * gain * tex) as f32;
                    }
                    for (a, &p) in [z, y, x].iter().enumerate() {
                        lo[a] = lo[a].min(p);
                        hi[a] = hi[a].max(p);
                    }
                } else {
                    for (c, gain) in CHANNEL_GAIN.iter().enumerate() {
                        data[c * e * plane + idx] = (gain * rng.uniform_range(0.05, 0.3)) as f32;
                    }
                }
            }
        }
    }
    for channel in data.chunks_mut(e * plane) {
        rescale_slice(channel);
    }
    let extent = std::array::from_fn(|a| if hi[a] >= lo[a] { hi[a] - lo[a] + 1 } else { 0 });
    Volume::new(
        Tensor::new(vec![CHANNELS, e, e, e], data)?,
        class,
        Some(extent),
        sample_id,
    )
}

/// Reverses a `[C, D, H, W]` tensor along spatial axis `axis` (0 = D).
pub fn flip_axis(t: &Tensor<f32>, axis: usize) -> Tensor<f32> {
    let s = t.shape();
    let (c, d, h, w) = (s[0], s[1], s[2], s[3]);
    let mut out = t.clone();
    let src = t.data();
    let dst = out.data_mut();
    for ci in 0..c {
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let (sz, sy, sx) = match axis {
                        0 => (d - 1 - z, y, x),
                        1 => (z, h - 1 - y, x),
                        _ => (z, y, w - 1 - x),
                    };
                    dst[((ci * d + z) * h + y) * w + x] = src[((ci * d + sz) * h + sy) * w + sx];
                }
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub noise_std: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            noise_std: 0.01,
        }
    }
}

/// Random per-axis flips followed by additive Gaussian noise, clamped to `[0, 1]`.
pub fn augment(v: &Volume, rng: &mut Rng, cfg: &AugmentConfig) -> Volume {
    let mut voxels = v.voxels.clone();
    for axis in 0..3 {
        if cfg.flip_prob > 0.0 && rng.bernoulli(cfg.flip_prob) {
            voxels = flip_axis(&voxels, axis);
        }
    }
    if cfg.noise_std > 0.0 {
        for x in voxels.data_mut() {
            *x = (*x + (cfg.noise_std * rng.normal()) as f32).clamp(0.0, 1.0);
        }
    }
    Volume {
        voxels,
        label: v.label,
        tumor_extent: v.tumor_extent,
        sample_id: v.sample_id,
    }
}

/// What to generate: `per_bin` samples for each crop edge, labels cycling
/// through the classes within each bin.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub seed: u64,
    pub num_classes: usize,
    pub per_bin: usize,
    pub edges: Vec<usize>,
    pub patch_size: usize,
}

impl DatasetSpec {
    /// `(label, crop_edge)` for every sample, indexed by sample id.
    pub fn layout(&self) -> Vec<(usize, usize)> {
        self.edges
            .iter()
            .flat_map(|&edge| (0..self.per_bin).map(move |j| (j % self.num_classes.max(1), edge)))
            .collect()
    }
}

/// Generates every sample of `layout` in parallel, each from its own stream
/// derived from `(seed, sample_id)`.
pub fn generate_samples(
    cfg: &SyntheticConfig,
    seed: u64,
    layout: &[(usize, usize)],
) -> Result<Vec<Volume>> {
    let root = Rng::new(seed);
    layout
        .par_iter()
        .enumerate()
        .map(|(id, &(label, edge))| {
            let mut rng = root.derive(id as u64);
            generate_volume(cfg, &mut rng, label, edge, id as u64)
        })
        .collect()
}

pub fn generate_dataset(spec: &DatasetSpec) -> Result<Vec<Volume>> {
    if spec.num_classes == 0 || spec.per_bin == 0 || spec.edges.is_empty() {
        return Err(Error::config(
            "dataset needs at least one class, one bin and one sample per bin",
        ));
    }
    let cfg = SyntheticConfig {
        patch_size: spec.patch_size,
        num_classes: spec.num_classes,
    };
    generate_samples(&cfg, spec.seed, &spec.layout())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub sample_id: u64,
    pub path: PathBuf,
    pub label: usize,
    pub crop_edge: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub seed: u64,
    pub samples: Vec<ManifestEntry>,
}

impl DatasetManifest {
    /// Manifest describing in-memory volumes, with conventional file names.
    pub fn for_volumes(seed: u64, volumes: &[Volume]) -> Self {
        let samples = volumes
            .iter()
            .map(|v| ManifestEntry {
                sample_id: v.sample_id,
                path: PathBuf::from(format!("volumes/{:06}.vvt", v.sample_id)),
                label: v.label,
                crop_edge: v.edge(),
            })
            .collect();
        Self { seed, samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_counts(&self) -> BTreeMap<usize, usize> {
        let mut counts = BTreeMap::new();
        for s in &self.samples {
            *counts.entry(s.label).or_insert(0) += 1;
        }
        counts
    }

    pub fn edges(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.crop_edge).collect()
    }

    /// Sub-manifest of the given positions, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            seed: self.seed,
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("seed={}\n", self.seed);
        for e in &self.samples {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                e.sample_id,
                e.path.display(),
                e.label,
                e.crop_edge
            ));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::data("empty manifest"))?;
        let seed = header
            .strip_prefix("seed=")
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| Error::data(format!("bad manifest header {header:?}")))?;
        let mut samples = Vec::new();
        let mut paths = HashSet::new();
        for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let cols: Vec<&str> = line.split('\t').collect();
            let bad = || Error::data(format!("manifest line {}: {line:?}", n + 2));
            if cols.len() != 4 {
                return Err(bad());
            }
            let entry = ManifestEntry {
                sample_id: cols[0].parse().map_err(|_| bad())?,
                path: PathBuf::from(cols[1]),
                label: cols[2].parse().map_err(|_| bad())?,
                crop_edge: cols[3].parse().map_err(|_| bad())?,
            };
            if !paths.insert(entry.path.clone()) {
                return Err(Error::data(format!(
                    "duplicate path {} in manifest",
                    entry.path.display()
                )));
            }
            samples.push(entry);
        }
        Ok(Self { seed, samples })
    }
}

/// Writes volumes as `VVT1` files plus `manifest.tsv` under `dir`.
pub fn write_dataset(dir: &Path, seed: u64, volumes: &[Volume]) -> Result<DatasetManifest> {
    let manifest = DatasetManifest::for_volumes(seed, volumes);
    fs::create_dir_all(dir.join("volumes"))
        .map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    manifest
        .samples
        .par_iter()
        .zip(volumes)
        .try_for_each(|(entry, v)| write_tensor(dir.join(&entry.path), &v.voxels))?;
    let mut tumors = String::new();
    for v in volumes {
        if let Some([d, h, w]) = v.tumor_extent {
            tumors.push_str(&format!("{}\t{d}\t{h}\t{w}\n", v.sample_id));
        }
    }
    let write = |name: &str, body: &str| {
        let p = dir.join(name);
        fs::write(&p, body).map_err(|e| Error::io(format!("writing {}", p.display()), e))
    };
    write(MANIFEST_FILE, &manifest.to_text())?;
    write(TUMOR_FILE, &tumors)?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    DatasetManifest::parse(&text)
}

/// Accepts either a dataset directory or the manifest file inside it.
pub fn read_dataset(path: &Path) -> Result<(DatasetManifest, Vec<Volume>)> {
    let manifest_path = if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    };
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let manifest = read_manifest(&manifest_path)?;
    let tumors = read_tumor_sidecar(&root.join(TUMOR_FILE))?;
    let volumes = manifest
        .samples
        .par_iter()
        .map(|e| {
            let voxels = read_tensor(root.join(&e.path))?;
            let v = Volume::new(voxels, e.label, tumors.get(&e.sample_id).copied(), e.sample_id)?;
            if v.spatial() != [e.crop_edge; 3] {
                return Err(Error::data(format!(
                    "sample {}: file has spatial dims {:?}, manifest says edge {}",
                    e.sample_id,
                    v.spatial(),
                    e.crop_edge
                )));
            }
            Ok(v)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, volumes))
}

fn read_tumor_sidecar(path: &Path) -> Result<BTreeMap<u64, [usize; 3]>> {
    let mut out = BTreeMap::new();
    let Ok(text) = fs::read_to_string(path) else {
        return Ok(out);
    };
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let v: Vec<u64> = line
            .split('\t')
            .map(|c| c.parse::<u64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::data(format!("bad tumor record {line:?}")))?;
        if v.len() != 4 {
            return Err(Error::data(format!("bad tumor record {line:?}")));
        }
        out.insert(v[0], [v[1] as usize, v[2] as usize, v[3] as usize]);
    }
    Ok(out)
}

/// Stratified train/test split over `(label, crop_edge)` groups.
///
/// Returns `(train, test)` positions into the manifest, each ascending.
pub fn split_indices(
    manifest: &DatasetManifest,
    test_fraction: f64,
    seed: u64,
) -> (Vec<usize>, Vec<usize>) {
    let mut groups: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (i, s) in manifest.samples.iter().enumerate() {
        groups.entry((s.label, s.crop_edge)).or_default().push(i);
    }
    let mut rng = Rng::new(seed).derive(0x5911_7);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (_, mut idx) in groups {
        rng.shuffle(&mut idx);
        let n_test = (idx.len() as f64 * test_fraction).round() as usize;
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}
