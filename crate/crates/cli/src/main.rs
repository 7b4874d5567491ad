use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use varivit::batching::BatchMode;
use varivit::bench::{emit_report, run_bench, summary_text, BenchConfig};
use varivit::data::{generate_dataset, read_dataset, split_indices, write_dataset, DatasetSpec, Volume};
use varivit::encoder::{checkpoint, parse_key_values, Encoder, ModelConfig, PosembStrategy};
use varivit::numerics::io::write_tensor;
use varivit::numerics::Rng;
use varivit::posemb::{build_sinusoidal_3d, center, center_and_select, cosine_similarity_map, Grid};
use varivit::train::{extract_features, load_batch, max_edge, run_ablation, train_loop, TrainConfig};
use varivit::{Error, Result};

#[derive(Parser)]
#[command(name = "varivit", version, about = "Variable-size 3D vision transformer toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic size-binned dataset and its manifest.
    Gendata(GendataArgs),
    /// Train one model and write per-epoch metrics and a checkpoint.
    Train(TrainArgs),
    /// Train one model per positional strategy and tabulate test scores.
    Ablate(AblateArgs),
    /// Time training epochs under each batching mode.
    Bench(BenchArgs),
    /// Positional-embedding exports.
    Posemb {
        #[command(subcommand)]
        command: PosembCommand,
    },
    /// Write final CLS features of every sample to a tensor file.
    ExportEmbeddings(ExportArgs),
    /// Write the head-averaged CLS attention grid of every sample.
    Attn(AttnArgs),
}

#[derive(Subcommand)]
enum PosembCommand {
    /// Cosine similarity of one grid cell's embedding to every cell.
    ExportSim(SimArgs),
}

#[derive(Args)]
struct Common {
    /// key=value file; flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GendataArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    classes: Option<usize>,
    /// Samples per crop-size bin, labels cycling through the classes.
    #[arg(long)]
    per_bin: Option<usize>,
    /// Comma-separated crop edges.
    #[arg(long)]
    edges: Option<String>,
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainFlags {
    #[arg(long)]
    data: Option<PathBuf>,
    /// cbs, ga or pad.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    warmup_epochs: Option<usize>,
    #[arg(long)]
    test_fraction: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    flags: TrainFlags,
    /// center_select, indep_fixed, interp_fixed, interp_learned or relative.
    #[arg(long)]
    posemb: Option<String>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    flags: TrainFlags,
    /// Comma-separated strategies (default: all five).
    #[arg(long)]
    strategies: Option<String>,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset directory; without it an equal-thirds synthetic set is made.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Comma-separated modes out of cbs, ga, pad.
    #[arg(long)]
    modes: Option<String>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    per_bin: Option<usize>,
}

#[derive(Args)]
struct SimArgs {
    #[command(flatten)]
    common: Common,
    /// Read the learned grid of an interp_learned checkpoint instead of
    /// building a fixed sinusoidal one.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Master grid, `L,H,W` or a single edge.
    #[arg(long)]
    grid: Option<String>,
    #[arg(long)]
    dim: Option<usize>,
    /// Center-select this sub-grid before comparing.
    #[arg(long)]
    select: Option<String>,
    /// Anchor cell `l,h,w` (default: grid center).
    #[arg(long)]
    anchor: Option<String>,
}

#[derive(Args)]
struct ExportArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Zero-pad every volume to the largest edge first.
    #[arg(long)]
    pad: bool,
}

#[derive(Args)]
struct AttnArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Encoder block to read (default: last).
    #[arg(long)]
    layer: Option<usize>,
    /// Only the first N samples.
    #[arg(long)]
    limit: Option<usize>,
}

type Settings = BTreeMap<String, String>;

fn load_settings(common: &Common) -> Result<Settings> {
    match &common.config {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
            parse_key_values(&text)
        }
        None => Ok(Settings::new()),
    }
}

fn set<T: ToString>(kv: &mut Settings, key: &str, value: &Option<T>) {
    if let Some(v) = value {
        kv.insert(key.to_string(), v.to_string());
    }
}

fn get<T: std::str::FromStr>(kv: &Settings, key: &str, default: T) -> Result<T> {
    match kv.get(key) {
        Some(v) => v
            .parse()
            .map_err(|_| Error::Config(format!("{key}={v}: invalid value"))),
        None => Ok(default),
    }
}

fn parse_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|_| Error::Config(format!("expected comma-separated integers, got {s:?}")))
        })
        .collect()
}

fn parse_grid(s: &str) -> Result<Grid> {
    match parse_list(s)?[..] {
        [e] => Ok([e; 3]),
        [l, h, w] => Ok([l, h, w]),
        _ => Err(Error::Config(format!("expected L,H,W or a single edge, got {s:?}"))),
    }
}

/// Creates `out` and records the exact invocation and resolved settings.
fn prepare_out(out: &Path, kv: &Settings) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::Io {
        context: format!("creating {}", out.display()),
        source: e,
    })?;
    let mut text = String::from("argv:");
    for a in std::env::args() {
        let _ = write!(text, " {a}");
    }
    text.push_str("\n\n[settings]\n");
    for (k, v) in kv {
        let _ = writeln!(text, "{k}={v}");
    }
    write_file(&out.join("invocation.txt"), &text)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        context: format!("writing {}", path.display()),
        source: e,
    })
}

fn gendata(a: GendataArgs) -> Result<()> {
    let mut kv = load_settings(&a.common)?;
    set(&mut kv, "classes", &a.classes);
    set(&mut kv, "per_bin", &a.per_bin);
    set(&mut kv, "edges", &a.edges);
    set(&mut kv, "patch", &a.patch);
    set(&mut kv, "seed", &a.seed);
    let spec = DatasetSpec {
        seed: get(&kv, "seed", 0)?,
        num_classes: get(&kv, "classes", 2)?,
        per_bin: get(&kv, "per_bin", 10)?,
        edges: parse_list(&get(&kv, "edges", "64,80,96".to_string())?)?,
        patch_size: get(&kv, "patch", 16)?,
    };
    prepare_out(&a.common.out, &kv)?;
    let volumes = generate_dataset(&spec)?;
    let manifest = write_dataset(&a.common.out, spec.seed, &volumes)?;
    println!(
        "wrote {} samples ({} per bin over edges {:?}) to {}",
        manifest.len(),
        spec.per_bin,
        spec.edges,
        a.common.out.display()
    );
    Ok(())
}

struct Loaded {
    volumes: Vec<Volume>,
    train: Vec<usize>,
    test: Vec<usize>,
    model: ModelConfig,
    train_cfg: TrainConfig,
}

fn apply_train_flags(kv: &mut Settings, f: &TrainFlags) {
    set(kv, "data", &f.data.as_ref().map(|p| p.display().to_string()));
    set(kv, "mode", &f.mode);
    set(kv, "preset", &f.preset);
    set(kv, "epochs", &f.epochs);
    set(kv, "seed", &f.seed);
    set(kv, "batch_size", &f.batch_size);
    set(kv, "lr", &f.lr);
    set(kv, "warmup_epochs", &f.warmup_epochs);
    set(kv, "test_fraction", &f.test_fraction);
}

/// Model settings: preset, then file/flag overrides; class count and
/// largest edge follow the data unless given explicitly.
fn model_config(kv: &Settings, volumes: &[Volume]) -> Result<ModelConfig> {
    let mut model = ModelConfig::preset(&get(kv, "preset", "tiny".to_string())?)?;
    if !kv.contains_key("num_classes") {
        model.num_classes = volumes.iter().map(|v| v.label + 1).max().unwrap_or(2).max(2);
    }
    if !kv.contains_key("max_image_edge") {
        model.max_image_edge = max_edge(volumes);
    }
    model.apply(kv)?;
    model.validate()?;
    if max_edge(volumes) > model.max_image_edge {
        return Err(Error::Config(format!(
            "data has {}-voxel crops but max_image_edge is {}",
            max_edge(volumes),
            model.max_image_edge
        )));
    }
    Ok(model)
}

fn load_for_training(kv: &mut Settings) -> Result<Loaded> {
    let data = kv
        .get("data")
        .cloned()
        .ok_or_else(|| Error::Config("--data is required".into()))?;
    let (manifest, volumes) = read_dataset(Path::new(&data))?;
    let model = model_config(kv, &volumes)?;
    let mut train_cfg = TrainConfig::default();
    if !kv.contains_key("warmup_epochs") {
        // keep the default warmup-to-total ratio when only epochs are given
        let epochs: usize = get(kv, "epochs", train_cfg.total_epochs)?;
        let warm = (epochs * train_cfg.warmup_epochs + train_cfg.total_epochs / 2)
            / train_cfg.total_epochs;
        kv.insert("warmup_epochs".into(), warm.to_string());
    }
    train_cfg.apply(kv)?;
    train_cfg.validate()?;
    let frac: f64 = get(kv, "test_fraction", 0.2)?;
    if !(0.0..1.0).contains(&frac) {
        return Err(Error::Config(format!("test_fraction {frac} must be in [0, 1)")));
    }
    let (train, test) = split_indices(&manifest, frac, train_cfg.seed);
    Ok(Loaded {
        volumes,
        train,
        test,
        model,
        train_cfg,
    })
}

fn train(a: TrainArgs) -> Result<()> {
    let mut kv = load_settings(&a.common)?;
    apply_train_flags(&mut kv, &a.flags);
    set(&mut kv, "posemb", &a.posemb);
    // validate names before touching the data
    if let Some(s) = kv.get("posemb") {
        s.parse::<PosembStrategy>()?;
    }
    if let Some(s) = kv.get("mode") {
        s.parse::<BatchMode>()?;
    }
    let l = load_for_training(&mut kv)?;
    prepare_out(&a.common.out, &kv)?;
    let enc = Encoder::new(l.model.clone(), &mut Rng::new(l.train_cfg.seed))?;
    let outcome = train_loop(enc, &l.volumes, &l.train, &l.test, &l.train_cfg, Some(&a.common.out))?;
    println!(
        "trained {} epochs ({}, {}); first-batch loss {:.4}",
        l.train_cfg.total_epochs, l.train_cfg.mode, l.model.posemb, outcome.first_batch_loss
    );
    for r in outcome.records.iter().rev().take(2).rev() {
        println!(
            "epoch {} {}: loss {:.4} auc {:.3} f1 {:.3} mcc {:.3} acc {:.3}",
            r.epoch, r.split, r.loss, r.auc, r.f1, r.mcc, r.accuracy
        );
    }
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let mut kv = load_settings(&a.common)?;
    apply_train_flags(&mut kv, &a.flags);
    set(&mut kv, "strategies", &a.strategies);
    let strategies: Vec<PosembStrategy> = match kv.get("strategies") {
        Some(s) => s
            .split(',')
            .map(|t| t.trim().parse())
            .collect::<Result<_>>()?,
        None => PosembStrategy::ALL.to_vec(),
    };
    let l = load_for_training(&mut kv)?;
    prepare_out(&a.common.out, &kv)?;
    let rows = run_ablation(
        &l.model,
        &strategies,
        &l.volumes,
        &l.train,
        &l.test,
        &l.train_cfg,
        Some(&a.common.out),
    )?;
    for r in rows {
        println!(
            "{:>15}: auc {:.3} f1 {:.3} mcc {:.3}",
            r.strategy, r.scores.auc, r.scores.f1, r.scores.mcc
        );
    }
    Ok(())
}

fn bench(a: BenchArgs) -> Result<()> {
    let mut kv = load_settings(&a.common)?;
    set(&mut kv, "data", &a.data.as_ref().map(|p| p.display().to_string()));
    set(&mut kv, "modes", &a.modes);
    set(&mut kv, "repeats", &a.repeats);
    set(&mut kv, "preset", &a.preset);
    set(&mut kv, "seed", &a.seed);
    set(&mut kv, "batch_size", &a.batch_size);
    set(&mut kv, "per_bin", &a.per_bin);
    let modes: Vec<BatchMode> = get(&kv, "modes", "cbs,ga,pad".to_string())?
        .split(',')
        .map(|t| t.trim().parse())
        .collect::<Result<_>>()?;
    let seed = get(&kv, "seed", 0)?;
    if !kv.contains_key("patch_size") {
        kv.insert("patch_size".into(), "16".into());
    }
    let patch: usize = get(&kv, "patch_size", 16)?;
    let volumes = match kv.get("data") {
        Some(d) => read_dataset(Path::new(d))?.1,
        None => generate_dataset(&DatasetSpec {
            seed,
            num_classes: 2,
            per_bin: get(&kv, "per_bin", 4)?,
            edges: vec![64, 80, 96],
            patch_size: patch,
        })?,
    };
    let model = model_config(&kv, &volumes)?;
    let cfg = BenchConfig {
        modes,
        repeats: get(&kv, "repeats", 5)?,
        batch_size: get(&kv, "batch_size", 4)?,
        seed,
        ..BenchConfig::default()
    };
    prepare_out(&a.common.out, &kv)?;
    let report = run_bench(&model, &volumes, &cfg)?;
    emit_report(&report, &a.common.out)?;
    print!("{}", summary_text(&report));
    Ok(())
}

fn export_sim(a: SimArgs) -> Result<()> {
    let mut kv = load_settings(&a.common)?;
    set(&mut kv, "grid", &a.grid);
    set(&mut kv, "dim", &a.dim);
    set(&mut kv, "select", &a.select);
    set(&mut kv, "anchor", &a.anchor);
    set(&mut kv, "checkpoint", &a.checkpoint.as_ref().map(|p| p.display().to_string()));
    prepare_out(&a.common.out, &kv)?;
    let master = match kv.get("checkpoint") {
        Some(dir) => {
            let enc = checkpoint::load(Path::new(dir))?;
            enc.params.pos_embed.clone().ok_or_else(|| {
                Error::Config("checkpoint has no learned positional grid (interp_learned only)".into())
            })?
        }
        None => {
            let paper = ModelConfig::paper();
            let grid = match kv.get("grid") {
                Some(g) => parse_grid(g)?,
                None => paper.max_grid(),
            };
            build_sinusoidal_3d(grid, get(&kv, "dim", paper.embed_dim)?)?
        }
    };
    let grid = match kv.get("select") {
        Some(s) => center_and_select(&master, parse_grid(s)?)?,
        None => master,
    };
    let anchor = match kv.get("anchor") {
        Some(s) => parse_grid(s)?,
        None => center(grid.dims()),
    };
    let sim = cosine_similarity_map(&grid, anchor)?;
    write_tensor(a.common.out.join("similarity.vvt"), &sim)?;
    let dims = grid.dims();
    let mut csv = String::from("l,h,w,cosine\n");
    for (i, v) in sim.data().iter().enumerate() {
        let (l, h, w) = (i / (dims[1] * dims[2]), (i / dims[2]) % dims[1], i % dims[2]);
        let _ = writeln!(csv, "{l},{h},{w},{v:.8}");
    }
    write_file(&a.common.out.join("similarity.csv"), &csv)?;
    println!("similarity over {dims:?} anchored at {anchor:?} written");
    Ok(())
}

fn sample_table(volumes: &[Volume]) -> String {
    let mut s = String::from("row,sample_id,label,crop_edge\n");
    for (i, v) in volumes.iter().enumerate() {
        let _ = writeln!(s, "{i},{},{},{}", v.sample_id, v.label, v.edge());
    }
    s
}

fn export_embeddings(a: ExportArgs) -> Result<()> {
    let kv = Settings::from([
        ("checkpoint".to_string(), a.checkpoint.display().to_string()),
        ("data".to_string(), a.data.display().to_string()),
        ("pad".to_string(), a.pad.to_string()),
    ]);
    prepare_out(&a.common.out, &kv)?;
    let enc = checkpoint::load(&a.checkpoint)?;
    let (_, volumes) = read_dataset(&a.data)?;
    let idx: Vec<usize> = (0..volumes.len()).collect();
    let pad = a.pad.then(|| max_edge(&volumes));
    let feats = extract_features(&enc, &volumes, &idx, pad)?;
    write_tensor(a.common.out.join("embeddings.vvt"), &feats)?;
    write_file(&a.common.out.join("embeddings.csv"), &sample_table(&volumes))?;
    println!("{} x {} features written", feats.rows(), feats.cols());
    Ok(())
}

fn attn(a: AttnArgs) -> Result<()> {
    let mut kv = Settings::from([
        ("checkpoint".to_string(), a.checkpoint.display().to_string()),
        ("data".to_string(), a.data.display().to_string()),
    ]);
    set(&mut kv, "layer", &a.layer);
    set(&mut kv, "limit", &a.limit);
    prepare_out(&a.common.out, &kv)?;
    let enc = checkpoint::load(&a.checkpoint)?;
    let (_, volumes) = read_dataset(&a.data)?;
    let depth = enc.config().depth;
    let layer = a.layer.unwrap_or(depth - 1);
    if layer >= depth {
        return Err(Error::Config(format!("layer {layer} outside a {depth}-block encoder")));
    }
    let dir = a.common.out.join("attn");
    fs::create_dir_all(&dir).map_err(|e| Error::Io {
        context: format!("creating {}", dir.display()),
        source: e,
    })?;
    let p = enc.config().patch_size;
    let mut index = String::from("sample_id,label,crop_edge,grid,mass,file\n");
    let n = a.limit.unwrap_or(volumes.len()).min(volumes.len());
    for (i, v) in volumes[..n].iter().enumerate() {
        let batch = load_batch(&volumes, &[i], p, None, None)?;
        let grid = batch.grid;
        let (_, cache) = enc.forward(batch.patches, grid)?;
        let map = cache.cls_attention(layer, 0)?;
        let file = format!("{:06}.vvt", v.sample_id);
        write_tensor(dir.join(&file), &map)?;
        let _ = writeln!(
            index,
            "{},{},{},{}x{}x{},{:.6},attn/{file}",
            v.sample_id,
            v.label,
            v.edge(),
            grid[0],
            grid[1],
            grid[2],
            map.sum()
        );
    }
    write_file(&a.common.out.join("attn_index.csv"), &index)?;
    println!("CLS attention of layer {layer} written for {n} samples");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gendata(a) => gendata(a),
        Command::Train(a) => train(a),
        Command::Ablate(a) => ablate(a),
        Command::Bench(a) => bench(a),
        Command::Posemb {
            command: PosembCommand::ExportSim(a),
        } => export_sim(a),
        Command::ExportEmbeddings(a) => export_embeddings(a),
        Command::Attn(a) => attn(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
