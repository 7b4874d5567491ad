use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;

use super::loss::{batch_loss, class_weights, softmax_probs};
use super::metrics::{score, Scores};
use super::optim::{epoch_lr, optimizer_step, AdamState, TrainConfig};
use crate::batching::{pad_volume, plan, BatchMode, BatchPlan};
use crate::data::{augment, standardize, AugmentConfig, Volume};
use crate::encoder::{checkpoint, Encoder, ModelConfig, ModelParams, PosembStrategy};
use crate::error::{Error, Result};
use crate::numerics::{mix_seed, Rng, Tensor};
use crate::patchify::{extract_patches, patch_grid};
use crate::posemb::Grid;

pub const METRICS_FILE: &str = "metrics.csv";
pub const METRICS_HEADER: &str = "epoch,split,loss,auc,f1,mcc,seconds";

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub auc: f64,
    pub f1: f64,
    pub mcc: f64,
    /// Not part of the CSV; kept for callers that need it.
    pub accuracy: f64,
    pub seconds: f64,
}

impl MetricsRecord {
    fn new(epoch: usize, split: &str, loss: f64, s: Scores, seconds: f64) -> Self {
        Self {
            epoch,
            split: split.to_string(),
            loss,
            auc: s.auc,
            f1: s.f1,
            mcc: s.mcc,
            accuracy: s.accuracy,
            seconds,
        }
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.3}",
            self.epoch, self.split, self.loss, self.auc, self.f1, self.mcc, self.seconds
        )
    }
}

/// Patches of a same-grid batch, ready for [`Encoder::forward`].
pub struct LoadedBatch {
    pub patches: Vec<Tensor<f32>>,
    pub grid: Grid,
    pub labels: Vec<usize>,
}

/// Augments (optional), standardizes, pads (optional) and patchifies the
/// volumes at `indices`, in parallel. Each sample's augmentation stream is
/// derived from `aug_root` and the sample's position, so results do not
/// depend on scheduling. Padding comes after standardization, so padded
/// voxels sit at the channel mean.
pub fn load_batch(
    volumes: &[Volume],
    indices: &[usize],
    patch: usize,
    pad_edge: Option<usize>,
    aug: Option<(&AugmentConfig, &Rng)>,
) -> Result<LoadedBatch> {
    if indices.is_empty() {
        return Err(Error::shape("empty batch"));
    }
    let loaded: Vec<(Tensor<f32>, Grid, usize)> = indices
        .par_iter()
        .map(|&i| {
            let src = volumes
                .get(i)
                .ok_or_else(|| Error::shape(format!("sample {i} outside {} volumes", volumes.len())))?;
            let v = match aug {
                Some((cfg, root)) => augment(src, &mut root.derive(i as u64), cfg),
                None => src.clone(),
            };
            let mut v = standardize(&v);
            if let Some(edge) = pad_edge {
                v = pad_volume(&v, edge)?;
            }
            let grid = patch_grid(v.spatial(), patch)?;
            Ok((extract_patches::<f32>(&v, patch)?, grid, v.label))
        })
        .collect::<Result<_>>()?;
    let grid = loaded[0].1;
    if loaded.iter().any(|(_, g, _)| *g != grid) {
        return Err(Error::shape("batch mixes patch grids; use CBS, GA or padding"));
    }
    let (patches, labels) = loaded.into_iter().map(|(p, _, y)| (p, y)).unzip();
    Ok(LoadedBatch {
        patches,
        grid,
        labels,
    })
}

/// Inputs shared by every epoch of one run.
pub struct EpochContext<'a> {
    pub volumes: &'a [Volume],
    /// Dataset positions the plan's indices refer to.
    pub subset: &'a [usize],
    pub weights: &'a [f64],
    pub pad_edge: Option<usize>,
    pub augment: Option<AugmentConfig>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    /// Weighted cross-entropy averaged over the epoch's samples.
    pub loss: f64,
    pub first_batch_loss: f64,
    pub samples: usize,
    pub optimizer_steps: usize,
    pub peak_live_bytes: usize,
}

/// One pass over `plan`: forward/backward every mini-batch, stepping the
/// optimizer after each update group with the loss normalized by the
/// group's sample count.
pub fn train_epoch(
    encoder: &mut Encoder<f32>,
    state: &mut AdamState<f32>,
    ctx: &EpochContext<'_>,
    plan: &BatchPlan,
    lr: f64,
    aug_seed: u64,
    cfg: &TrainConfig,
) -> Result<EpochStats> {
    let patch = encoder.config().patch_size;
    let aug_root = Rng::new(aug_seed);
    let aug = ctx.augment.as_ref().map(|a| (a, &aug_root));
    let param_bytes = encoder.params.param_count() * std::mem::size_of::<f32>();
    let mut stats = EpochStats {
        loss: 0.0,
        first_batch_loss: f64::NAN,
        samples: 0,
        optimizer_steps: 0,
        peak_live_bytes: 0,
    };
    for group in plan.update_groups() {
        let batches = &plan.batches[group];
        let count: usize = batches.iter().map(Vec::len).sum();
        let mut acc: Option<ModelParams<f32>> = None;
        for b in batches {
            let idx: Vec<usize> = b.iter().map(|&i| ctx.subset[i]).collect();
            let batch = load_batch(ctx.volumes, &idx, patch, ctx.pad_edge, aug)?;
            let (logits, cache) = encoder.forward(batch.patches, batch.grid)?;
            let (loss, dlogits) = batch_loss(&logits, &batch.labels, ctx.weights, count)?;
            if stats.first_batch_loss.is_nan() {
                stats.first_batch_loss = loss * count as f64 / b.len() as f64;
            }
            stats.loss += loss * count as f64;
            let grads = encoder.backward(&cache, &dlogits)?;
            // cache + gradients + accumulator held at once
            let live = cache.live_bytes() + param_bytes * if acc.is_some() { 2 } else { 1 };
            stats.peak_live_bytes = stats.peak_live_bytes.max(live);
            drop(cache);
            match acc.as_mut() {
                Some(a) => a.accumulate(&grads)?,
                None => acc = Some(grads),
            }
        }
        if let Some(g) = acc {
            optimizer_step(&mut encoder.params, &g, state, lr, cfg)?;
            stats.optimizer_steps += 1;
        }
        stats.samples += count;
    }
    if !stats.loss.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    stats.loss /= stats.samples.max(1) as f64;
    Ok(stats)
}

/// Class probabilities for the samples at `indices`, grouped by grid into
/// batches of at most `batch` for the forward pass, returned in input order.
pub fn predict(
    encoder: &Encoder<f32>,
    volumes: &[Volume],
    indices: &[usize],
    pad_edge: Option<usize>,
    batch: usize,
) -> Result<Vec<Vec<f64>>> {
    let mut out = vec![Vec::new(); indices.len()];
    for_each_grid_batch(encoder, volumes, indices, pad_edge, batch, |pos, logits, _| {
        for (p, probs) in pos.iter().zip(softmax_probs(logits)) {
            out[*p] = probs;
        }
    })?;
    Ok(out)
}

/// Final CLS features `[n, d]` for the samples at `indices`, in order.
pub fn extract_features(
    encoder: &Encoder<f32>,
    volumes: &[Volume],
    indices: &[usize],
    pad_edge: Option<usize>,
) -> Result<Tensor<f32>> {
    let d = encoder.config().embed_dim;
    let mut data = vec![0f32; indices.len() * d];
    for_each_grid_batch(encoder, volumes, indices, pad_edge, 16, |pos, _, feats| {
        for (r, p) in pos.iter().enumerate() {
            data[p * d..(p + 1) * d].copy_from_slice(feats.row(r));
        }
    })?;
    Tensor::new(vec![indices.len(), d], data)
}

fn for_each_grid_batch(
    encoder: &Encoder<f32>,
    volumes: &[Volume],
    indices: &[usize],
    pad_edge: Option<usize>,
    batch: usize,
    mut sink: impl FnMut(&[usize], &Tensor<f32>, &Tensor<f32>),
) -> Result<()> {
    let mut by_edge: BTreeMap<[usize; 3], Vec<usize>> = BTreeMap::new();
    for (pos, &i) in indices.iter().enumerate() {
        let v = volumes
            .get(i)
            .ok_or_else(|| Error::shape(format!("sample {i} outside {} volumes", volumes.len())))?;
        let key = pad_edge.map_or(v.spatial(), |e| [e; 3]);
        by_edge.entry(key).or_default().push(pos);
    }
    let patch = encoder.config().patch_size;
    for positions in by_edge.values() {
        for chunk in positions.chunks(batch.max(1)) {
            let idx: Vec<usize> = chunk.iter().map(|&p| indices[p]).collect();
            let b = load_batch(volumes, &idx, patch, pad_edge, None)?;
            let (logits, cache) = encoder.forward(b.patches, b.grid)?;
            sink(chunk, &logits, cache.features());
        }
    }
    Ok(())
}

/// Mean weighted cross-entropy and scores on `indices`.
pub fn evaluate(
    encoder: &Encoder<f32>,
    volumes: &[Volume],
    indices: &[usize],
    weights: &[f64],
    pad_edge: Option<usize>,
) -> Result<(f64, Scores)> {
    let probs = predict(encoder, volumes, indices, pad_edge, 16)?;
    let labels: Vec<usize> = indices.iter().map(|&i| volumes[i].label).collect();
    let mut loss = 0.0;
    for (p, &y) in probs.iter().zip(&labels) {
        loss -= weights[y] * p[y].max(f64::MIN_POSITIVE).ln();
    }
    Ok((loss / labels.len() as f64, score(&probs, &labels)?))
}

pub struct TrainOutcome {
    pub encoder: Encoder<f32>,
    pub records: Vec<MetricsRecord>,
    /// Loss of the very first mini-batch, before any update.
    pub first_batch_loss: f64,
}

fn check_split(volumes: &[Volume], idx: &[usize], name: &str) -> Result<()> {
    let mut labels: Vec<usize> = idx.iter().map(|&i| volumes[i].label).collect();
    labels.sort_unstable();
    labels.dedup();
    if labels.len() < 2 {
        return Err(Error::data(format!(
            "{name} split has {} sample(s) of a single class; metrics need two classes",
            idx.len()
        )));
    }
    Ok(())
}

/// Largest spatial edge in the dataset, the pad-to-max target.
pub fn max_edge(volumes: &[Volume]) -> usize {
    volumes.iter().map(Volume::edge).max().unwrap_or(0)
}

/// Trains for `cfg.total_epochs`, replanning each epoch from a seed derived
/// from `(cfg.seed, epoch)`, and evaluates both splits after every epoch.
///
/// With `out`, appends to `metrics.csv`, writes each epoch's plan under
/// `plans/` and the final model under `checkpoint/`.
pub fn train_loop(
    mut encoder: Encoder<f32>,
    volumes: &[Volume],
    train_idx: &[usize],
    test_idx: &[usize],
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if let Some(&bad) = train_idx.iter().chain(test_idx).find(|&&i| i >= volumes.len()) {
        return Err(Error::data(format!("sample {bad} outside {} volumes", volumes.len())));
    }
    check_split(volumes, train_idx, "train")?;
    if !test_idx.is_empty() {
        check_split(volumes, test_idx, "test")?;
    }
    let k = encoder.config().num_classes;
    if let Some(v) = volumes.iter().find(|v| v.label >= k) {
        return Err(Error::data(format!(
            "sample {} has label {} but the model has {k} classes",
            v.sample_id, v.label
        )));
    }
    let mut counts = BTreeMap::new();
    for &i in train_idx {
        *counts.entry(volumes[i].label).or_insert(0) += 1;
    }
    let weights = class_weights(&counts, k);
    let pad_edge = (cfg.mode == BatchMode::PadToMax).then(|| max_edge(volumes));
    let edges: Vec<usize> = train_idx.iter().map(|&i| volumes[i].edge()).collect();
    let ctx = EpochContext {
        volumes,
        subset: train_idx,
        weights: &weights,
        pad_edge,
        augment: cfg.augment.then(AugmentConfig::default),
    };

    let mut csv = match out {
        Some(dir) => {
            fs::create_dir_all(dir.join("plans"))
                .map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
            let path = dir.join(METRICS_FILE);
            let mut f = OpenOptions::new()
                .create(true)
                .write(true)
                .truncate(true)
                .open(&path)
                .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
            writeln!(f, "{METRICS_HEADER}").map_err(|e| Error::io("writing metrics", e))?;
            Some(f)
        }
        None => None,
    };

    let mut state = AdamState::new(&encoder.params);
    let mut records = Vec::new();
    let mut first_batch_loss = f64::NAN;
    for epoch in 0..cfg.total_epochs {
        let start = Instant::now();
        let mut rng = Rng::new(cfg.seed).derive(epoch as u64);
        let p = plan(cfg.mode, &edges, cfg.batch_size, &mut rng)?;
        let lr = epoch_lr(epoch, cfg);
        let aug_seed = mix_seed(cfg.seed ^ 0xa116, epoch as u64);
        let stats = train_epoch(&mut encoder, &mut state, &ctx, &p, lr, aug_seed, cfg)?;
        let seconds = start.elapsed().as_secs_f64();
        if epoch == 0 {
            first_batch_loss = stats.first_batch_loss;
        }

        let (tr_loss, tr) = evaluate(&encoder, volumes, train_idx, &weights, pad_edge)?;
        let mut epoch_records = vec![MetricsRecord::new(epoch, "train", tr_loss, tr, seconds)];
        if !test_idx.is_empty() {
            let (te_loss, te) = evaluate(&encoder, volumes, test_idx, &weights, pad_edge)?;
            epoch_records.push(MetricsRecord::new(epoch, "test", te_loss, te, seconds));
        }
        if let (Some(f), Some(dir)) = (csv.as_mut(), out) {
            for r in &epoch_records {
                writeln!(f, "{}", r.csv_row()).map_err(|e| Error::io("writing metrics", e))?;
            }
            let plan_path = dir.join("plans").join(format!("epoch_{epoch:04}.txt"));
            fs::write(&plan_path, p.to_text())
                .map_err(|e| Error::io(format!("writing {}", plan_path.display()), e))?;
        }
        records.extend(epoch_records);
    }
    if let Some(dir) = out {
        checkpoint::save(&encoder, &dir.join("checkpoint"))?;
    }
    Ok(TrainOutcome {
        encoder,
        records,
        first_batch_loss,
    })
}

pub const ABLATION_FILE: &str = "ablation.csv";
pub const ABLATION_HEADER: &str = "posemb,auc,f1,mcc,accuracy,seconds";

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub strategy: PosembStrategy,
    pub scores: Scores,
    pub seconds: f64,
}

/// Trains one model per strategy from the same seed and data, scoring each
/// on the test split (the train split when no test split is given).
pub fn run_ablation(
    model_cfg: &ModelConfig,
    strategies: &[PosembStrategy],
    volumes: &[Volume],
    train_idx: &[usize],
    test_idx: &[usize],
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for &s in strategies {
        let mc = ModelConfig {
            posemb: s,
            ..model_cfg.clone()
        };
        let enc = Encoder::new(mc, &mut Rng::new(cfg.seed))?;
        let start = Instant::now();
        let sub = out.map(|d| d.join(s.name()));
        let outcome = train_loop(enc, volumes, train_idx, test_idx, cfg, sub.as_deref())?;
        let seconds = start.elapsed().as_secs_f64();
        let split = if test_idx.is_empty() { "train" } else { "test" };
        let last = outcome
            .records
            .iter()
            .rev()
            .find(|r| r.split == split)
            .expect("at least one epoch");
        rows.push(AblationRow {
            strategy: s,
            scores: Scores {
                auc: last.auc,
                f1: last.f1,
                mcc: last.mcc,
                accuracy: last.accuracy,
            },
            seconds,
        });
    }
    if let Some(dir) = out {
        let mut text = format!("{ABLATION_HEADER}\n");
        for r in &rows {
            text.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6},{:.3}\n",
                r.strategy, r.scores.auc, r.scores.f1, r.scores.mcc, r.scores.accuracy, r.seconds
            ));
        }
        let path = dir.join(ABLATION_FILE);
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        fs::write(&path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, split_indices, DatasetManifest, DatasetSpec};
    use crate::encoder::ModelConfig;

    fn tiny_data(per_bin: usize, seed: u64) -> Vec<Volume> {
        generate_dataset(&DatasetSpec {
            seed,
            num_classes: 2,
            per_bin,
            edges: vec![16, 24, 32],
            patch_size: 8,
        })
        .unwrap()
    }

    fn small_model(seed: u64) -> Encoder<f32> {
        let mut c = ModelConfig::tiny();
        c.embed_dim = 12;
        c.depth = 1;
        Encoder::new(c, &mut Rng::new(seed)).unwrap()
    }

    fn cfg(mode: BatchMode, epochs: usize) -> TrainConfig {
        TrainConfig {
            base_lr: 3e-3,
            warmup_epochs: 1,
            total_epochs: epochs,
            batch_size: 4,
            seed: 5,
            mode,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn load_batch_rejects_mixed_grids() {
        let v = tiny_data(2, 1);
        assert!(load_batch(&v, &[0, 1], 8, None, None).is_ok());
        assert!(load_batch(&v, &[0, 2], 8, None, None).is_err());
        let padded = load_batch(&v, &[0, 2, 5], 8, Some(32), None).unwrap();
        assert_eq!(padded.grid, [4, 4, 4]);
    }

    #[test]
    fn untrained_loss_is_ln2_and_runs_are_reproducible() {
        let v = tiny_data(4, 2);
        let m = DatasetManifest::for_volumes(2, &v);
        let (tr, te) = split_indices(&m, 0.25, 1);
        let dir = tempfile::tempdir().unwrap();
        for mode in BatchMode::ALL {
            let a = train_loop(small_model(3), &v, &tr, &te, &cfg(mode, 2), Some(dir.path())).unwrap();
            assert!((a.first_batch_loss - 2f64.ln()).abs() < 1e-6, "{mode}");
            let csv_a = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
            let b = train_loop(small_model(3), &v, &tr, &te, &cfg(mode, 2), None).unwrap();
            assert_eq!(a.encoder.params, b.encoder.params, "{mode}");
            let strip = |r: &[MetricsRecord]| {
                r.iter().map(|x| (x.loss, x.auc, x.f1, x.mcc)).collect::<Vec<_>>()
            };
            assert_eq!(strip(&a.records), strip(&b.records));
            assert!(csv_a.starts_with(METRICS_HEADER));
            assert_eq!(csv_a.lines().count(), 1 + 4);
            assert!(dir.path().join("checkpoint/config.txt").exists());
            assert!(dir.path().join("plans/epoch_0001.txt").exists());
        }
    }

    #[test]
    fn single_class_split_is_a_data_error() {
        let v = tiny_data(2, 3);
        let only_zero: Vec<usize> = (0..v.len()).filter(|&i| v[i].label == 0).collect();
        let err = train_loop(small_model(1), &v, &only_zero, &[], &cfg(BatchMode::Cbs, 1), None)
            .err()
            .unwrap();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn features_and_predictions_follow_input_order() {
        let v = tiny_data(2, 4);
        let enc = small_model(2);
        let idx = [5, 0, 3, 1];
        let f = extract_features(&enc, &v, &idx, None).unwrap();
        assert_eq!(f.shape(), &[4, 12]);
        let single = extract_features(&enc, &v, &[3], None).unwrap();
        assert_eq!(f.row(2), single.row(0));
        let p = predict(&enc, &v, &idx, None, 2).unwrap();
        assert!(p.iter().all(|r| (r.iter().sum::<f64>() - 1.0).abs() < 1e-9));
    }
}
