//! Epoch plans: same-size batches (CBS), singleton mini-batches with
//! gradient accumulation (GA), and the pad-to-max baseline.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use crate::data::Volume;
use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BatchMode {
    Cbs,
    Ga,
    PadToMax,
}

impl BatchMode {
    pub const ALL: [BatchMode; 3] = [BatchMode::Cbs, BatchMode::Ga, BatchMode::PadToMax];

    pub fn name(self) -> &'static str {
        match self {
            BatchMode::Cbs => "cbs",
            BatchMode::Ga => "ga",
            BatchMode::PadToMax => "pad_to_max",
        }
    }
}

impl fmt::Display for BatchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BatchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cbs" => Ok(BatchMode::Cbs),
            "ga" => Ok(BatchMode::Ga),
            "pad" | "pad_to_max" => Ok(BatchMode::PadToMax),
            other => Err(Error::config(format!(
                "unknown batching mode {other:?} (expected cbs, ga or pad)"
            ))),
        }
    }
}

/// One epoch's ordered grouping of sample positions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    pub mode: BatchMode,
    pub batch_size: usize,
    /// Mini-batches per optimizer step; `batch_size` under GA, 1 otherwise.
    pub update_interval: usize,
    pub seed: u64,
    pub batches: Vec<Vec<usize>>,
}

impl BatchPlan {
    pub fn num_samples(&self) -> usize {
        self.batches.iter().map(Vec::len).sum()
    }

    /// Ranges of mini-batches that share one optimizer step. The last
    /// range may be shorter than the update interval.
    pub fn update_groups(&self) -> Vec<Range<usize>> {
        let k = self.update_interval.max(1);
        (0..self.batches.len())
            .step_by(k)
            .map(|s| s..(s + k).min(self.batches.len()))
            .collect()
    }

    /// 1-based mini-batch counts after which the optimizer steps.
    pub fn update_points(&self) -> Vec<usize> {
        self.update_groups().into_iter().map(|r| r.end).collect()
    }

    /// Header comment followed by one line of space-separated positions per
    /// batch.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "# mode={} batch_size={} update_interval={} seed={}\n",
            self.mode, self.batch_size, self.update_interval, self.seed
        );
        for b in &self.batches {
            let line: Vec<String> = b.iter().map(usize::to_string).collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .and_then(|l| l.strip_prefix('#'))
            .ok_or_else(|| Error::data("batch plan must start with a '#' header"))?;
        let mut fields = BTreeMap::new();
        for kv in header.split_whitespace() {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::data(format!("bad plan header field {kv:?}")))?;
            fields.insert(k, v);
        }
        let get = |k: &str| {
            fields
                .get(k)
                .copied()
                .ok_or_else(|| Error::data(format!("plan header lacks {k}")))
        };
        let num = |k: &str| -> Result<u64> {
            get(k)?
                .parse()
                .map_err(|_| Error::data(format!("plan header {k} is not an integer")))
        };
        let mut batches = Vec::new();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let b = line
                .split_whitespace()
                .map(|t| {
                    t.parse::<usize>()
                        .map_err(|_| Error::data(format!("bad index {t:?} in batch plan")))
                })
                .collect::<Result<Vec<_>>>()?;
            batches.push(b);
        }
        Ok(Self {
            mode: get("mode")?.parse().map_err(|e: Error| Error::data(e.to_string()))?,
            batch_size: num("batch_size")? as usize,
            update_interval: num("update_interval")? as usize,
            seed: num("seed")?,
            batches,
        })
    }
}

fn check_batch_size(b: usize) -> Result<()> {
    if b == 0 {
        return Err(Error::config("batch size must be >= 1"));
    }
    Ok(())
}

/// Groups positions by crop edge, shuffles within each group, chunks into
/// batches of at most `b`, then shuffles the batch order.
pub fn plan_cbs(edges: &[usize], b: usize, rng: &mut Rng) -> Result<BatchPlan> {
    check_batch_size(b)?;
    if edges.is_empty() {
        return Err(Error::data("cannot plan batches for an empty dataset"));
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &e) in edges.iter().enumerate() {
        groups.entry(e).or_default().push(i);
    }
    let mut batches = Vec::new();
    for (_, mut idx) in groups {
        rng.shuffle(&mut idx);
        batches.extend(idx.chunks(b).map(<[usize]>::to_vec));
    }
    rng.shuffle(&mut batches);
    Ok(BatchPlan {
        mode: BatchMode::Cbs,
        batch_size: b,
        update_interval: 1,
        seed: rng.seed(),
        batches,
    })
}

/// Shuffled singleton mini-batches with an optimizer step every `b`.
pub fn plan_ga(edges: &[usize], b: usize, rng: &mut Rng) -> Result<BatchPlan> {
    check_batch_size(b)?;
    let mut idx: Vec<usize> = (0..edges.len()).collect();
    rng.shuffle(&mut idx);
    Ok(BatchPlan {
        mode: BatchMode::Ga,
        batch_size: b,
        update_interval: b,
        seed: rng.seed(),
        batches: idx.into_iter().map(|i| vec![i]).collect(),
    })
}

/// Plain shuffled batches; the loader pads every volume to the largest edge.
pub fn plan_pad_to_max(edges: &[usize], b: usize, rng: &mut Rng) -> Result<BatchPlan> {
    check_batch_size(b)?;
    let mut idx: Vec<usize> = (0..edges.len()).collect();
    rng.shuffle(&mut idx);
    Ok(BatchPlan {
        mode: BatchMode::PadToMax,
        batch_size: b,
        update_interval: 1,
        seed: rng.seed(),
        batches: idx.chunks(b).map(<[usize]>::to_vec).collect(),
    })
}

pub fn plan(mode: BatchMode, edges: &[usize], b: usize, rng: &mut Rng) -> Result<BatchPlan> {
    match mode {
        BatchMode::Cbs => plan_cbs(edges, b, rng),
        BatchMode::Ga => plan_ga(edges, b, rng),
        BatchMode::PadToMax => plan_pad_to_max(edges, b, rng),
    }
}

/// Zero-pads every spatial axis to `edge`, splitting the padding evenly
/// (the extra voxel of an odd pad goes after).
pub fn pad_volume(v: &Volume, edge: usize) -> Result<Volume> {
    let [d, h, w] = v.spatial();
    if [d, h, w].iter().any(|&s| s > edge) {
        return Err(Error::shape(format!(
            "cannot pad {:?} down to edge {edge}",
            [d, h, w]
        )));
    }
    if [d, h, w] == [edge; 3] {
        return Ok(v.clone());
    }
    let c = v.channels();
    let (od, oh, ow) = ((edge - d) / 2, (edge - h) / 2, (edge - w) / 2);
    let mut out = vec![0f32; c * edge * edge * edge];
    let src = v.voxels.data();
    for ch in 0..c {
        for z in 0..d {
            for y in 0..h {
                let s = ((ch * d + z) * h + y) * w;
                let t = ((ch * edge + z + od) * edge + y + oh) * edge + ow;
                out[t..t + w].copy_from_slice(&src[s..s + w]);
            }
        }
    }
    Volume::new(
        Tensor::new(vec![c, edge, edge, edge], out)?,
        v.label,
        v.tumor_extent,
        v.sample_id,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenCost {
    /// Sum of patch counts over the plan.
    pub tokens: u64,
    /// Sum of squared patch counts (attention pairs per layer).
    pub attention_pairs: u64,
}

impl TokenCost {
    /// Fractional reductions `(tokens, pairs)` of `self` relative to `base`.
    pub fn reduction_vs(&self, base: &TokenCost) -> (f64, f64) {
        (
            1.0 - self.tokens as f64 / base.tokens as f64,
            1.0 - self.attention_pairs as f64 / base.attention_pairs as f64,
        )
    }
}

/// Patch-token and attention-pair totals for one epoch of `plan`; under
/// pad-to-max every sample costs as much as the largest edge.
pub fn token_cost(plan: &BatchPlan, edges: &[usize], p: usize) -> Result<TokenCost> {
    if p == 0 {
        return Err(Error::config("patch size must be >= 1"));
    }
    let max_edge = edges.iter().copied().max().unwrap_or(0);
    let mut cost = TokenCost {
        tokens: 0,
        attention_pairs: 0,
    };
    for &i in plan.batches.iter().flatten() {
        let e = *edges
            .get(i)
            .ok_or_else(|| Error::shape(format!("plan index {i} outside {} samples", edges.len())))?;
        let e = if plan.mode == BatchMode::PadToMax { max_edge } else { e };
        if e % p != 0 {
            return Err(Error::shape(format!("edge {e} not divisible by patch size {p}")));
        }
        let n = ((e / p) as u64).pow(3);
        cost.tokens += n;
        cost.attention_pairs += n * n;
    }
    Ok(cost)
}
