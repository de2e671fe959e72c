use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use clap::{Args, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use ux_core::afm::{afm_trace, BetaFilterBank};
use ux_core::analysis;
use ux_core::autodiff::GradCheckOptions;
use ux_core::epa::{build_memory_pool, epa_forward, MemoryPool};
use ux_core::grid::{partition_regions, rasterize_events, EventRecord, EventRegistry, WeatherGrid};
use ux_core::io::{self, Checkpoint};
use ux_core::metrics::{compute_metrics, fit_climatology, MetricInput, MetricReport, ReportScale};
use ux_core::model::{
    build_transitions, fit_normalization, gradcheck_suite, Model, NormalizationStats, TrainConfig,
};
use ux_core::synth::{generate_synthetic, Dataset, SyntheticSpec};
use ux_core::UxError;

use crate::{CliError, CliResult, OutArgs};

const CURVE_POINTS: usize = 256;

fn refuse_existing(path: &Path, force: bool) -> CliResult<()> {
    let occupied = match fs::metadata(path) {
        Ok(m) if m.is_dir() => fs::read_dir(path)?.next().is_some(),
        Ok(_) => true,
        Err(_) => false,
    };
    if occupied && !force {
        return Err(CliError::Usage(format!("{} already exists (pass --force to replace)", path.display())));
    }
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let bytes = fs::read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

/// Prints to stdout; a closed pipe downstream is not an error.
fn print_json<T: Serialize>(value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value)?;
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

/// Flag, then config, then `UX_SEED`, then 0.
fn resolve_seed(flag: Option<u64>, config: Option<u64>) -> CliResult<u64> {
    if let Some(s) = flag.or(config) {
        return Ok(s);
    }
    match std::env::var("UX_SEED") {
        Ok(v) => v.trim().parse().map_err(|_| CliError::Usage(format!("UX_SEED `{v}` is not an unsigned integer"))),
        Err(_) => Ok(0),
    }
}

/// Seed set explicitly in a JSON config, if any.
fn config_seed(raw: &Value) -> Option<u64> {
    raw.get("seed").and_then(Value::as_u64)
}

/// `10` or `10x8`.
fn parse_region(s: &str) -> Result<(usize, usize), String> {
    let parse = |t: &str| t.trim().parse::<usize>().map_err(|_| format!("bad region size `{s}`"));
    let (h, w) = match s.split_once(['x', 'X']) {
        Some((h, w)) => (parse(h)?, parse(w)?),
        None => {
            let n = parse(s)?;
            (n, n)
        }
    };
    if h == 0 || w == 0 {
        return Err("region sizes must be positive".into());
    }
    Ok((h, w))
}

fn registry_of(data: &Dataset) -> CliResult<EventRegistry> {
    let all: Vec<EventRecord> = data.events.iter().flatten().cloned().collect();
    Ok(EventRegistry::from_events(&all)?)
}

fn corpus(data: &Dataset) -> impl Iterator<Item = (&WeatherGrid, &[EventRecord])> {
    data.grids.iter().zip(data.events.iter().map(Vec::as_slice))
}

fn normalize_all(stats: &NormalizationStats, grids: &[WeatherGrid]) -> CliResult<Vec<WeatherGrid>> {
    Ok(grids.iter().map(|g| stats.normalize(g)).collect::<ux_core::Result<_>>()?)
}

/// Grid and event sources: a dataset directory or a pair of globs.
#[derive(Args, Clone)]
pub struct DataSource {
    /// Dataset directory written by `ux synth`
    #[arg(long, conflicts_with_all = ["train", "events"])]
    data: Option<PathBuf>,
    /// Glob of grid files
    #[arg(long, requires = "events")]
    train: Option<String>,
    /// Glob of event files; events without a matching grid are ignored
    #[arg(long)]
    events: Option<String>,
}

fn expand(pattern: &str) -> CliResult<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = glob::glob(pattern)
        .map_err(|e| CliError::Usage(format!("bad glob `{pattern}`: {e}")))?
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Core(UxError::Io(e.into())))?;
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Core(UxError::Format(format!("`{pattern}` matches no file"))));
    }
    Ok(paths)
}

impl DataSource {
    fn load(&self) -> CliResult<Dataset> {
        if let Some(dir) = &self.data {
            return Ok(io::read_dataset(dir)?);
        }
        let (Some(train), Some(events)) = (&self.train, &self.events) else {
            return Err(CliError::Usage("pass --data DIR or both --train and --events".into()));
        };
        let grids: Vec<WeatherGrid> =
            expand(train)?.iter().map(|p| io::read_grid(p)).collect::<ux_core::Result<_>>()?;
        let mut per_grid = vec![Vec::new(); grids.len()];
        for path in expand(events)? {
            for e in io::read_events(&path)? {
                if let Some(i) = grids.iter().position(|g| *g.timestamp() == e.timestamp) {
                    per_grid[i].push(e);
                }
            }
        }
        Ok(Dataset { grids, events: per_grid })
    }
}

#[derive(Args)]
pub struct SynthArgs {
    /// Generator settings (JSON); missing fields take defaults
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    out: OutArgs,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    timesteps: Option<usize>,
    /// Perturbation strength inside events
    #[arg(long)]
    amplitude: Option<f64>,
}

pub fn synth(a: SynthArgs) -> CliResult<()> {
    let (mut spec, cfg_seed) = match &a.config {
        Some(p) => {
            let raw: Value = read_json(p)?;
            let seed = config_seed(&raw);
            (serde_json::from_value::<SyntheticSpec>(raw).map_err(|e| CliError::Usage(e.to_string()))?, seed)
        }
        None => (SyntheticSpec::default(), None),
    };
    spec.seed = resolve_seed(a.seed, cfg_seed)?;
    if let Some(t) = a.timesteps {
        spec.timesteps = t;
    }
    if let Some(v) = a.amplitude {
        spec.amplitude = v;
    }
    refuse_existing(&a.out.out, a.out.force)?;
    let data = generate_synthetic(&spec)?;
    if a.out.out.exists() {
        fs::remove_dir_all(&a.out.out)?;
    }
    io::write_dataset(&a.out.out, &data, Some(serde_json::to_value(spec)?))?;
    let events: usize = data.events.iter().map(Vec::len).sum();
    print_json(&json!({ "grids": data.grids.len(), "events": events, "seed": spec.seed }))
}

#[derive(Args)]
pub struct HfaArgs {
    #[command(flatten)]
    source: DataSource,
    /// Output directory for hfa-report.csv and hfa-summary.json
    #[command(flatten)]
    out: OutArgs,
    /// Region size, `N` or `HxW`
    #[arg(long, default_value = "10", value_parser = parse_region)]
    region: (usize, usize),
    /// Seed of the random comparison group
    #[arg(long)]
    seed: Option<u64>,
}

pub fn analyze_hfa(a: HfaArgs) -> CliResult<()> {
    let data = a.source.load()?;
    let registry = registry_of(&data)?;
    let seed = resolve_seed(a.seed, None)?;
    let report = a.out.out.join("hfa-report.csv");
    let summary_path = a.out.out.join("hfa-summary.json");
    refuse_existing(&report, a.out.force)?;
    refuse_existing(&summary_path, a.out.force)?;
    let analysis = analysis::analyze_hfa(corpus(&data), &registry, a.region.0, a.region.1, seed)?;
    fs::create_dir_all(&a.out.out)?;
    fs::write(&report, io::encode_hfa_rows(&analysis.rows)?)?;
    write_json(&summary_path, &analysis.summary)?;
    let s = &analysis.summary;
    print_json(&json!({
        "normal_count": s.normal_count,
        "extreme_count": s.extreme_count,
        "mean_normal": s.mean_normal,
        "mean_extreme": s.mean_extreme,
        "w1_normal_extreme": s.w1_normal_extreme,
        "w1_normal_random": s.w1_normal_random,
    }))
}

#[derive(Args)]
pub struct MemoryArgs {
    #[command(flatten)]
    source: DataSource,
    /// Output pool file
    #[command(flatten)]
    out: OutArgs,
    /// Entries per event type
    #[arg(long, default_value_t = 5)]
    u: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "10", value_parser = parse_region)]
    region: (usize, usize),
    /// Normalization statistics to apply before building (from `fit-stats`)
    #[arg(long)]
    stats: Option<PathBuf>,
}

pub fn build_memory(a: MemoryArgs) -> CliResult<()> {
    let mut data = a.source.load()?;
    if let Some(p) = &a.stats {
        let stats: NormalizationStats = read_json(p)?;
        data.grids = normalize_all(&stats, &data.grids)?;
    }
    let registry = registry_of(&data)?;
    let seed = resolve_seed(a.seed, None)?;
    refuse_existing(&a.out.out, a.out.force)?;
    let pool = build_memory_pool(corpus(&data), &registry, a.region.0, a.region.1, a.u, seed)?;
    io::write_pool(&a.out.out, &pool)?;
    print_json(&pool_summary(&pool, None))
}

#[derive(Args)]
pub struct StatsArgs {
    #[command(flatten)]
    source: DataSource,
    #[command(flatten)]
    out: OutArgs,
}

pub fn fit_stats(a: StatsArgs) -> CliResult<()> {
    let data = a.source.load()?;
    refuse_existing(&a.out.out, a.out.force)?;
    let stats = fit_normalization(&data.grids)?;
    write_json(&a.out.out, &stats)?;
    print_json(&stats)
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Training configuration (JSON); missing fields take defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory
    #[command(flatten)]
    out: OutArgs,
    /// Use this pool instead of building one from the training split
    #[arg(long)]
    pool: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Trailing share of the timeline held out for validation
    #[arg(long, default_value_t = 0.2)]
    val_fraction: f64,
}

fn load_train_config(path: Option<&Path>) -> CliResult<(TrainConfig, Option<u64>)> {
    match path {
        Some(p) => {
            let raw: Value = read_json(p)?;
            let seed = config_seed(&raw);
            let cfg = serde_json::from_value(raw).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
            Ok((cfg, seed))
        }
        None => Ok((TrainConfig::default(), None)),
    }
}

pub fn train(a: TrainArgs) -> CliResult<()> {
    if !(0.0..1.0).contains(&a.val_fraction) {
        return Err(CliError::Usage(format!("--val-fraction {} must lie in [0, 1)", a.val_fraction)));
    }
    let (mut cfg, cfg_seed) = load_train_config(a.config.as_deref())?;
    cfg.seed = resolve_seed(a.seed, cfg_seed)?;
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.learning_rate = lr;
    }
    cfg.validate()?;
    let dir = &a.out.out;
    refuse_existing(dir, a.out.force)?;

    let data = io::read_dataset(&a.data)?;
    let masks = data.masks()?;
    let n = data.grids.len();
    let n_val = (n as f64 * a.val_fraction).round() as usize;
    let split = n - n_val;
    if split < 2 {
        return Err(CliError::Core(UxError::EmptyCorpus));
    }
    let stats = fit_normalization(&data.grids[..split])?;
    let grids = normalize_all(&stats, &data.grids)?;
    let train_set = build_transitions(&grids[..split], &masks[..split])?;
    let val_set = build_transitions(&grids[split..], &masks[split..])?;
    let channels = grids[0].channels();

    let pool = match (&a.pool, cfg.components.epa) {
        (Some(p), _) => Some(io::read_pool(p)?),
        (None, true) => {
            let registry = registry_of(&data)?;
            let train_corpus = grids[..split].iter().zip(data.events[..split].iter().map(Vec::as_slice));
            Some(build_memory_pool(train_corpus, &registry, cfg.region_height, cfg.region_width, cfg.units, cfg.seed)?)
        }
        (None, false) => None,
    };

    if dir.exists() {
        fs::remove_dir_all(dir)?;
    }
    fs::create_dir_all(dir)?;
    write_json(&dir.join("stats.json"), &stats)?;
    write_json(&dir.join("config.json"), &cfg)?;
    if let Some(p) = &pool {
        io::write_pool(&dir.join("pool.epamem"), p)?;
    }

    let model = Model::new(cfg, channels)?;
    let init = model.init_params(cfg.seed);
    let checkpoint = |epoch: usize, params: &ux_core::model::ModelParams| Checkpoint {
        config: cfg,
        channels,
        seed: cfg.seed,
        epoch,
        normalization: Some(stats.clone()),
        params: params.clone(),
    };
    let mut trace = fs::File::create(dir.join("trace.jsonl"))?;
    let mut observer = |rec: &ux_core::model::EpochRecord, params: &ux_core::model::ModelParams| -> ux_core::Result<()> {
        writeln!(trace, "{}", serde_json::to_string(rec)?)?;
        eprintln!(
            "epoch {:>3}  train_l1 {:.6}  val_mae_gen {:.6}  val_mae_ext {}",
            rec.epoch,
            rec.train_l1,
            rec.val_mae_gen,
            rec.val_mae_ext.map_or("-".into(), |v| format!("{v:.6}"))
        );
        io::write_checkpoint(&dir.join("last.uxck"), &checkpoint(rec.epoch, params))
    };
    let outcome = ux_core::model::train(&model, init, &train_set, &val_set, pool.as_ref(), &mut observer)?;
    io::write_checkpoint(&dir.join("checkpoint.uxck"), &checkpoint(outcome.best_epoch, &outcome.best))?;
    print_json(&json!({
        "best_epoch": outcome.best_epoch,
        "epochs_run": outcome.trace.len(),
        "stopped_early": outcome.stopped_early,
        "train_transitions": train_set.len(),
        "val_transitions": val_set.len(),
        "seed": cfg.seed,
    }))
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Scale {
    Raw,
    Normalized,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    pool: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Fit the climatology on this dataset instead of the evaluated one
    #[arg(long)]
    climatology_data: Option<PathBuf>,
    /// Output directory for report.json and report.csv
    #[command(flatten)]
    out: OutArgs,
    #[arg(long, value_enum, default_value = "raw")]
    scale: Scale,
    /// Row label in report.csv
    #[arg(long, default_value = "model")]
    label: String,
}

fn load_model(path: &Path, pool: Option<&Path>) -> CliResult<(Checkpoint, Model, Option<MemoryPool>)> {
    let ck = io::read_checkpoint(path)?;
    let model = ck.model()?;
    model.validate_params(&ck.params)?;
    let pool = pool.map(io::read_pool).transpose()?;
    Ok((ck, model, pool))
}

/// Brings `g` to the model's standardized scale.
fn model_input(ck: &Checkpoint, g: &WeatherGrid) -> CliResult<WeatherGrid> {
    match (&ck.normalization, g.is_normalized()) {
        (Some(stats), false) => Ok(stats.normalize(g)?),
        _ => Ok(g.clone()),
    }
}

pub fn evaluate(a: EvalArgs) -> CliResult<()> {
    let (ck, model, pool) = load_model(&a.checkpoint, a.pool.as_deref())?;
    let data = io::read_dataset(&a.data)?;
    let json_path = a.out.out.join("report.json");
    let csv_path = a.out.out.join("report.csv");
    refuse_existing(&json_path, a.out.force)?;
    refuse_existing(&csv_path, a.out.force)?;

    let scale = match a.scale {
        Scale::Raw => ReportScale::Raw,
        Scale::Normalized => ReportScale::Normalized,
    };
    let stats = ck.normalization.as_ref();
    let to_scale = |g: &WeatherGrid| -> CliResult<WeatherGrid> {
        Ok(match (scale, stats, g.is_normalized()) {
            (ReportScale::Normalized, Some(s), false) => s.normalize(g)?,
            (ReportScale::Raw, Some(s), true) => s.denormalize(g)?,
            _ => g.clone(),
        })
    };
    let clim_grids = match &a.climatology_data {
        Some(dir) => io::read_dataset(dir)?.grids,
        None => data.grids.clone(),
    };
    let clim_grids: Vec<WeatherGrid> = clim_grids.iter().map(&to_scale).collect::<CliResult<_>>()?;
    let clim = fit_climatology(&clim_grids)?;

    let mut triples = Vec::new();
    for (i, pair) in data.grids.windows(2).enumerate() {
        if *pair[1].timestamp() - *pair[0].timestamp() != chrono::Duration::hours(1) {
            continue;
        }
        let pred = model.forward(&model_input(&ck, &pair[0])?, pool.as_ref(), &ck.params)?;
        let target = &pair[1];
        let mask = rasterize_events(&data.events[i + 1], target.height(), target.width(), target.bounds())?;
        triples.push((to_scale(&pred)?, to_scale(target)?, mask));
    }
    if triples.is_empty() {
        return Err(CliError::Core(UxError::EmptyCorpus));
    }
    let inputs: Vec<MetricInput> = triples
        .iter()
        .map(|(p, t, m)| {
            Ok(MetricInput {
                pred: p.values().view(),
                target: t.values().view(),
                mask: m.bits.view(),
                climatology: clim.for_grid(t)?.view(),
            })
        })
        .collect::<ux_core::Result<_>>()?;
    let report = compute_metrics(&inputs, data.grids[0].variables(), scale)?;
    fs::create_dir_all(&a.out.out)?;
    write_json(&json_path, &report)?;
    io::write_csv(&csv_path, &MetricReport::CSV_HEADER, &report.csv_rows(&a.label))?;
    print_json(&report)
}

#[derive(Args)]
pub struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    pool: Option<PathBuf>,
    /// Input grid file
    #[arg(long)]
    grid: PathBuf,
    /// Output grid file, in the input's scale
    #[command(flatten)]
    out: OutArgs,
}

pub fn predict(a: PredictArgs) -> CliResult<()> {
    let (ck, model, pool) = load_model(&a.checkpoint, a.pool.as_deref())?;
    let grid = io::read_grid(&a.grid)?;
    refuse_existing(&a.out.out, a.out.force)?;
    let pred = model.forward(&model_input(&ck, &grid)?, pool.as_ref(), &ck.params)?;
    let pred = match (&ck.normalization, grid.is_normalized()) {
        (Some(s), false) => s.denormalize(&pred)?,
        _ => pred,
    };
    io::write_grid(&a.out.out, &pred)?;
    print_json(&json!({ "timestamp": pred.timestamp(), "out": a.out.out }))
}

#[derive(Args)]
pub struct AfmInspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory; pick the grid with --time
    #[arg(long, conflicts_with = "grid", requires = "time")]
    data: Option<PathBuf>,
    /// Single grid file
    #[arg(long)]
    grid: Option<PathBuf>,
    /// Timestamp (RFC 3339) of the grid inside --data
    #[arg(long)]
    time: Option<DateTime<Utc>>,
    /// Row-major region index
    #[arg(long, default_value_t = 0)]
    region: usize,
    /// Augment the region with this pool first
    #[arg(long)]
    pool: Option<PathBuf>,
}

pub fn afm_inspect(a: AfmInspectArgs) -> CliResult<()> {
    let (ck, model, pool) = load_model(&a.checkpoint, a.pool.as_deref())?;
    let grid = match (&a.data, &a.grid, a.time) {
        (Some(dir), _, Some(t)) => io::read_dataset(dir)?
            .grids
            .into_iter()
            .find(|g| *g.timestamp() == t)
            .ok_or_else(|| CliError::Core(UxError::Format(format!("no grid at {t}"))))?,
        (None, Some(p), _) => io::read_grid(p)?,
        _ => return Err(CliError::Usage("pass --grid FILE or --data DIR --time T".into())),
    };
    let grid = model_input(&ck, &grid)?;
    let cfg = &model.config;
    let part = partition_regions(&grid, cfg.region_height, cfg.region_width)?;
    let raw = part.regions.get(a.region).ok_or_else(|| {
        CliError::Usage(format!("--region {} out of range ({} regions)", a.region, part.regions.len()))
    })?;
    let aug = match &pool {
        Some(p) => epa_forward(raw.view(), p, &ck.params.epa)?,
        None => raw.clone(),
    };
    let tr = afm_trace(aug.view(), raw.view(), &grid.calendar(), &ck.params.afm, &model.layout)?;
    let partition = &model.layout.partition;
    let bank = BetaFilterBank::new(partition.modes.clone(), tr.kappa.clone())?;
    let xs: Vec<f64> = (0..CURVE_POINTS).map(|i| i as f64 / (CURVE_POINTS - 1) as f64).collect();
    let curves: Vec<Vec<f64>> = (0..bank.len()).map(|n| xs.iter().map(|&x| bank.weight(n, x)).collect()).collect();
    let weights: Vec<Vec<f64>> = tr.weights.outer_iter().map(|r| r.to_vec()).collect();
    print_json(&json!({
        "timestamp": grid.timestamp(),
        "region": a.region,
        "regions": part.regions.len(),
        "augmented": pool.is_some(),
        "partition": partition,
        "kappa": tr.kappa,
        "weights": weights,
        "curves": { "x": xs, "filters": curves },
    }))
}

#[derive(Args)]
pub struct EpaInspectArgs {
    #[arg(long)]
    pool: PathBuf,
    /// Only this event type (`normal` for the normal slot)
    #[arg(long = "type")]
    event_type: Option<String>,
}

fn pool_summary(pool: &MemoryPool, only: Option<usize>) -> Value {
    let slots: Vec<Value> = pool
        .slots
        .iter()
        .enumerate()
        .filter(|(m, _)| only.is_none_or(|o| o == *m))
        .map(|(m, slot)| {
            let entries: Vec<Value> = slot
                .entries
                .outer_iter()
                .enumerate()
                .map(|(u, e)| {
                    let n = e.len() as f64;
                    let mean = e.sum() / n;
                    let std = (e.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
                    json!({
                        "index": u,
                        "valid": slot.mask[u],
                        "members": slot.provenance[u],
                        "mean": mean,
                        "std": std,
                        "min": e.iter().copied().fold(f64::INFINITY, f64::min),
                        "max": e.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                    })
                })
                .collect();
            json!({ "type": pool.registry.name(m), "valid": slot.valid_count(), "entries": entries })
        })
        .collect();
    json!({
        "types": pool.registry.names(),
        "units": pool.units,
        "region": [pool.region_height, pool.region_width],
        "channels": pool.channels,
        "seed": pool.seed,
        "slots": slots,
    })
}

pub fn epa_inspect(a: EpaInspectArgs) -> CliResult<()> {
    let pool = io::read_pool(&a.pool)?;
    let only = a.event_type.as_deref().map(|t| pool.registry.index(t)).transpose()?;
    print_json(&pool_summary(&pool, only))
}

#[derive(Args)]
pub struct GradArgs {
    /// Training configuration (JSON); defaults to the small desk setup
    #[arg(long)]
    config: Option<PathBuf>,
    /// Entries checked per tensor
    #[arg(long, default_value_t = 6)]
    max_entries: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Probe grid size, `N` or `HxW`
    #[arg(long, default_value = "20", value_parser = parse_region)]
    grid: (usize, usize),
    #[arg(long, default_value_t = 2)]
    channels: usize,
}

pub fn gradcheck(a: GradArgs) -> CliResult<()> {
    let (cfg, cfg_seed) = match &a.config {
        Some(p) => load_train_config(Some(p))?,
        None => (TrainConfig::desk(), None),
    };
    let seed = resolve_seed(a.seed, cfg_seed)?;
    let opts = GradCheckOptions { max_entries: Some(a.max_entries), seed, ..GradCheckOptions::default() };
    let entries = gradcheck_suite(&cfg, (a.grid.0, a.grid.1, a.channels), &opts)?;
    let failed: Vec<&str> = entries.iter().filter(|e| !e.passed()).map(|e| e.component.as_str()).collect();
    let summary: Vec<Value> = entries
        .iter()
        .map(|e| {
            json!({
                "component": e.component,
                "tolerance": e.tolerance,
                "max_rel_err": e.report.max_rel_err(),
                "passed": e.passed(),
                "tensors": e.report.tensors,
            })
        })
        .collect();
    print_json(&json!({ "passed": failed.is_empty(), "entries": summary }))?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numerical(format!("gradient check failed for {}", failed.join(", "))))
    }
}
