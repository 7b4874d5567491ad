//! Epoch-time and cost benchmark of CBS and GA against pad-to-max.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use crate::batching::{plan, token_cost, BatchMode, TokenCost};
use crate::data::Volume;
use crate::encoder::{Encoder, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::Rng;
use crate::train::{
    batch_loss, class_weights, load_batch, max_edge, train_epoch, AdamState, EpochContext,
    TrainConfig,
};

pub const CLAIM: &str = "variable-size batching (grouping same-size volumes, or accumulating \
gradients over single volumes) reduces computation time by up to 30% compared with padding \
every volume to the largest size";

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub modes: Vec<BatchMode>,
    pub repeats: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Repeats of each single-batch size probe.
    pub probe_repeats: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            modes: BatchMode::ALL.to_vec(),
            repeats: 5,
            batch_size: 4,
            seed: 0,
            probe_repeats: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModeReport {
    pub mode: BatchMode,
    /// Wall-clock seconds of each repeated epoch.
    pub seconds: Vec<f64>,
    pub median_seconds: f64,
    pub variance: f64,
    pub cost: TokenCost,
    pub peak_live_bytes: usize,
}

/// One forward/backward of a single same-size batch.
#[derive(Clone, Debug, PartialEq)]
pub struct SizeProbe {
    pub edge: usize,
    pub batch: usize,
    pub tokens: u64,
    pub attention_pairs: u64,
    pub median_seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub samples: usize,
    pub patch_size: usize,
    pub modes: Vec<ModeReport>,
    pub probes: Vec<SizeProbe>,
    /// Rank correlation between token count and measured time over every
    /// mode and probe.
    pub spearman: f64,
}

impl BenchReport {
    pub fn mode(&self, m: BatchMode) -> Option<&ModeReport> {
        self.modes.iter().find(|r| r.mode == m)
    }

    /// `(time, tokens, pairs)` fractional savings of `m` against pad-to-max.
    pub fn savings(&self, m: BatchMode) -> Option<(f64, f64, f64)> {
        let base = self.mode(BatchMode::PadToMax)?;
        let r = self.mode(m)?;
        let (t, a) = r.cost.reduction_vs(&base.cost);
        Some((1.0 - r.median_seconds / base.median_seconds, t, a))
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Unbiased sample variance; 0 for fewer than two values.
pub fn variance(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        for &k in &order[i..=j] {
            r[k] = (i + j) as f64 / 2.0 + 1.0;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation (Pearson on average ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

/// Times one training epoch per mode and repeat on preloaded volumes.
/// Repeats are interleaved across modes so slow drift affects every mode
/// alike; every run starts from the same initial weights and plan seed.
pub fn run_bench(
    model: &ModelConfig,
    volumes: &[Volume],
    cfg: &BenchConfig,
) -> Result<BenchReport> {
    if cfg.modes.len() < 2 {
        return Err(Error::config("the benchmark needs at least two modes"));
    }
    if cfg.repeats == 0 || cfg.batch_size == 0 {
        return Err(Error::config("repeats and batch size must be >= 1"));
    }
    if volumes.is_empty() {
        return Err(Error::data("the benchmark needs at least one volume"));
    }
    let k = model.num_classes;
    let mut counts = BTreeMap::new();
    for v in volumes {
        *counts.entry(v.label).or_insert(0) += 1;
    }
    let weights = class_weights(&counts, k);
    let subset: Vec<usize> = (0..volumes.len()).collect();
    let edges: Vec<usize> = volumes.iter().map(Volume::edge).collect();
    let pad = max_edge(volumes);
    let tcfg = TrainConfig {
        batch_size: cfg.batch_size,
        seed: cfg.seed,
        augment: false,
        ..TrainConfig::default()
    };
    let init = Encoder::<f32>::new(model.clone(), &mut Rng::new(cfg.seed))?;

    let run = |mode: BatchMode| -> Result<(f64, usize, TokenCost)> {
        let p = plan(mode, &edges, cfg.batch_size, &mut Rng::new(cfg.seed))?;
        let cost = token_cost(&p, &edges, model.patch_size)?;
        let ctx = EpochContext {
            volumes,
            subset: &subset,
            weights: &weights,
            pad_edge: (mode == BatchMode::PadToMax).then_some(pad),
            augment: None,
        };
        let mut enc = init.clone();
        let mut state = AdamState::new(&enc.params);
        let start = Instant::now();
        let stats = train_epoch(&mut enc, &mut state, &ctx, &p, tcfg.base_lr, cfg.seed, &tcfg)?;
        Ok((start.elapsed().as_secs_f64(), stats.peak_live_bytes, cost))
    };

    // warm caches and the thread pool
    run(cfg.modes[0])?;
    let mut seconds: Vec<Vec<f64>> = vec![Vec::new(); cfg.modes.len()];
    let mut info = vec![(0usize, TokenCost { tokens: 0, attention_pairs: 0 }); cfg.modes.len()];
    for _ in 0..cfg.repeats {
        for (i, &m) in cfg.modes.iter().enumerate() {
            let (s, peak, cost) = run(m)?;
            seconds[i].push(s);
            info[i] = (info[i].0.max(peak), cost);
        }
    }
    let modes: Vec<ModeReport> = cfg
        .modes
        .iter()
        .zip(seconds)
        .zip(info)
        .map(|((&mode, s), (peak, cost))| ModeReport {
            mode,
            median_seconds: median(&s),
            variance: variance(&s),
            seconds: s,
            cost,
            peak_live_bytes: peak,
        })
        .collect();

    let probes = size_probes(&init, volumes, &weights, cfg)?;
    let mut x: Vec<f64> = modes.iter().map(|m| m.cost.tokens as f64).collect();
    let mut y: Vec<f64> = modes.iter().map(|m| m.median_seconds).collect();
    x.extend(probes.iter().map(|p| (p.tokens * p.batch as u64) as f64));
    y.extend(probes.iter().map(|p| p.median_seconds));
    Ok(BenchReport {
        samples: volumes.len(),
        patch_size: model.patch_size,
        spearman: spearman(&x, &y),
        modes,
        probes,
    })
}

/// Forward/backward time of one batch for each distinct crop edge.
fn size_probes(
    init: &Encoder<f32>,
    volumes: &[Volume],
    weights: &[f64],
    cfg: &BenchConfig,
) -> Result<Vec<SizeProbe>> {
    let mut by_edge: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, v) in volumes.iter().enumerate() {
        by_edge.entry(v.edge()).or_default().push(i);
    }
    let p = init.config().patch_size;
    let mut out = Vec::new();
    for (edge, idx) in by_edge {
        let idx = &idx[..idx.len().min(cfg.batch_size)];
        let mut times = Vec::new();
        for _ in 0..cfg.probe_repeats.max(1) {
            let start = Instant::now();
            let b = load_batch(volumes, idx, p, None, None)?;
            let (logits, cache) = init.forward(b.patches, b.grid)?;
            let (_, d) = batch_loss(&logits, &b.labels, weights, idx.len())?;
            init.backward(&cache, &d)?;
            times.push(start.elapsed().as_secs_f64());
        }
        let n = ((edge / p) as u64).pow(3);
        out.push(SizeProbe {
            edge,
            batch: idx.len(),
            tokens: n,
            attention_pairs: n * n,
            median_seconds: median(&times),
        });
    }
    Ok(out)
}

pub const BENCH_FILE: &str = "bench.csv";
pub const BENCH_HEADER: &str = "mode,median_seconds,variance,tokens,attention_pairs,\
peak_live_bytes,time_saving_pct,token_saving_pct,pair_saving_pct";
pub const REPEATS_FILE: &str = "bench_repeats.csv";
pub const SIZES_FILE: &str = "bench_sizes.csv";
pub const SUMMARY_FILE: &str = "summary.txt";

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |x| format!("{:.4}", 100.0 * x))
}

/// CSV rows of the per-mode table, header included.
pub fn report_csv(r: &BenchReport) -> String {
    let mut s = format!("{BENCH_HEADER}\n");
    for m in &r.modes {
        let sv = r.savings(m.mode);
        let _ = writeln!(
            s,
            "{},{:.6},{:.9},{},{},{},{},{},{}",
            m.mode,
            m.median_seconds,
            m.variance,
            m.cost.tokens,
            m.cost.attention_pairs,
            m.peak_live_bytes,
            pct(sv.map(|x| x.0)),
            pct(sv.map(|x| x.1)),
            pct(sv.map(|x| x.2)),
        );
    }
    s
}

pub fn summary_text(r: &BenchReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "Claim tested: {CLAIM}.");
    let _ = writeln!(
        s,
        "{} samples, patch size {}, epoch time is the median of {} repeats.",
        r.samples,
        r.patch_size,
        r.modes.first().map_or(0, |m| m.seconds.len())
    );
    for m in &r.modes {
        let _ = write!(
            s,
            "{:>10}: {:.3} s/epoch (sd {:.3}), {} tokens, {} attention pairs, peak {:.1} MiB",
            m.mode.name(),
            m.median_seconds,
            m.variance.sqrt(),
            m.cost.tokens,
            m.cost.attention_pairs,
            m.peak_live_bytes as f64 / (1 << 20) as f64
        );
        match r.savings(m.mode) {
            Some((t, tok, pairs)) if m.mode != BatchMode::PadToMax => {
                let _ = writeln!(
                    s,
                    "; vs pad_to_max: time -{:.1}%, tokens -{:.1}%, pairs -{:.1}%",
                    100.0 * t,
                    100.0 * tok,
                    100.0 * pairs
                );
            }
            _ => s.push('\n'),
        }
    }
    let _ = writeln!(
        s,
        "Spearman correlation of token count and measured time: {:.3}",
        r.spearman
    );
    s
}

/// Writes `bench.csv`, `bench_repeats.csv`, `bench_sizes.csv` and
/// `summary.txt` under `dir`.
pub fn emit_report(r: &BenchReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let mut repeats = String::from("mode,repeat,seconds\n");
    for m in &r.modes {
        for (i, s) in m.seconds.iter().enumerate() {
            let _ = writeln!(repeats, "{},{i},{s:.6}", m.mode);
        }
    }
    let mut sizes = String::from("edge,batch,tokens,attention_pairs,median_seconds\n");
    for p in &r.probes {
        let _ = writeln!(
            sizes,
            "{},{},{},{},{:.6}",
            p.edge, p.batch, p.tokens, p.attention_pairs, p.median_seconds
        );
    }
    for (name, text) in [
        (BENCH_FILE, report_csv(r)),
        (REPEATS_FILE, repeats),
        (SIZES_FILE, sizes),
        (SUMMARY_FILE, summary_text(r)),
    ] {
        let path = dir.join(name);
        fs::write(&path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    }
    Ok(())
}
