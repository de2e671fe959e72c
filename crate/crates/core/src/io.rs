//! On-disk formats. Binary files share one layout: a single-line JSON header,
//! a newline, then a little-endian `f32` payload (plus mask bytes for memory
//! pools).

use std::fs;
use std::path::Path;

use chrono::{DateTime, SecondsFormat, Utc};
use ndarray::{Array3, Array4};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::analysis::HfaRow;
use crate::autodiff::ParamSet;
use crate::epa::{MemoryPool, MemorySlot, MemorySource};
use crate::error::{Result, UxError};
use crate::grid::{EventRecord, EventRegistry, GeoBounds, WeatherGrid};
use crate::model::{Model, ModelParams, NormalizationStats, TrainConfig};
use crate::synth::Dataset;

pub const SCHEMA_VERSION: u32 = 1;

fn encode(header: &impl Serialize, payload: &[f64], extra: &[u8]) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec(header)?;
    out.push(b'\n');
    out.reserve(payload.len() * 4 + extra.len());
    for v in payload {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out.extend_from_slice(extra);
    Ok(out)
}

fn split<H: DeserializeOwned>(bytes: &[u8]) -> Result<(H, &[u8])> {
    let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| UxError::Format("missing header line".into()))?;
    let header = serde_json::from_slice(&bytes[..nl])?;
    Ok((header, &bytes[nl + 1..]))
}

fn floats(payload: &[u8], n: usize) -> Result<Vec<f64>> {
    if payload.len() < n * 4 {
        return Err(UxError::Format(format!("payload holds {} bytes, expected {}", payload.len(), n * 4)));
    }
    Ok(payload[..n * 4].chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64).collect())
}

fn exact_len(payload: &[u8], n: usize) -> Result<()> {
    if payload.len() != n {
        return Err(UxError::Format(format!("payload holds {} bytes, expected {n}", payload.len())));
    }
    Ok(())
}

fn check_version(v: u32) -> Result<()> {
    if v != SCHEMA_VERSION {
        return Err(UxError::Format(format!("schema version {v}, this build reads {SCHEMA_VERSION}")));
    }
    Ok(())
}

fn iso(t: &DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::AutoSi, true)
}

fn parse_time(s: &str) -> Result<DateTime<Utc>> {
    DateTime::parse_from_rfc3339(s)
        .map(|t| t.with_timezone(&Utc))
        .map_err(|e| UxError::Format(format!("timestamp `{s}`: {e}")))
}

#[derive(Debug, Serialize, Deserialize)]
struct GridHeader {
    schema_version: u32,
    height: usize,
    width: usize,
    channels: usize,
    variables: Vec<String>,
    bounds: GeoBounds,
    timestamp: String,
    normalized: bool,
}

pub fn encode_grid(g: &WeatherGrid) -> Result<Vec<u8>> {
    let header = GridHeader {
        schema_version: SCHEMA_VERSION,
        height: g.height(),
        width: g.width(),
        channels: g.channels(),
        variables: g.variables().to_vec(),
        bounds: *g.bounds(),
        timestamp: iso(g.timestamp()),
        normalized: g.is_normalized(),
    };
    let vals: Vec<f64> = g.values().iter().copied().collect();
    encode(&header, &vals, &[])
}

pub fn decode_grid(bytes: &[u8]) -> Result<WeatherGrid> {
    let (h, payload): (GridHeader, _) = split(bytes)?;
    check_version(h.schema_version)?;
    let n = h.height * h.width * h.channels;
    exact_len(payload, n * 4)?;
    let values = Array3::from_shape_vec((h.height, h.width, h.channels), floats(payload, n)?)
        .map_err(|e| UxError::Format(e.to_string()))?;
    WeatherGrid::new(values, h.variables, parse_time(&h.timestamp)?, h.bounds, h.normalized)
}

pub fn write_grid(path: &Path, g: &WeatherGrid) -> Result<()> {
    Ok(fs::write(path, encode_grid(g)?)?)
}

pub fn read_grid(path: &Path) -> Result<WeatherGrid> {
    decode_grid(&fs::read(path)?)
}

#[derive(Serialize, Deserialize)]
struct EventLine {
    timestamp: String,
    vertices: [[f64; 2]; 4],
    types: Vec<String>,
}

pub fn encode_events(events: &[EventRecord]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for e in events {
        let line = EventLine { timestamp: iso(&e.timestamp), vertices: e.vertices, types: e.types.clone() };
        serde_json::to_writer(&mut out, &line)?;
        out.push(b'\n');
    }
    Ok(out)
}

pub fn decode_events(bytes: &[u8]) -> Result<Vec<EventRecord>> {
    let text = std::str::from_utf8(bytes).map_err(|e| UxError::Format(e.to_string()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let e: EventLine = serde_json::from_str(l)?;
            Ok(EventRecord { timestamp: parse_time(&e.timestamp)?, vertices: e.vertices, types: e.types })
        })
        .collect()
}

pub fn write_events(path: &Path, events: &[EventRecord]) -> Result<()> {
    Ok(fs::write(path, encode_events(events)?)?)
}

pub fn read_events(path: &Path) -> Result<Vec<EventRecord>> {
    decode_events(&fs::read(path)?)
}

#[derive(Debug, Serialize, Deserialize)]
struct PoolHeader {
    schema_version: u32,
    slots: usize,
    units: usize,
    region_height: usize,
    region_width: usize,
    channels: usize,
    registry: Vec<String>,
    seed: u64,
    provenance: Vec<Vec<Vec<MemorySource>>>,
}

pub fn encode_pool(p: &MemoryPool) -> Result<Vec<u8>> {
    p.validate()?;
    let header = PoolHeader {
        schema_version: SCHEMA_VERSION,
        slots: p.slot_count(),
        units: p.units,
        region_height: p.region_height,
        region_width: p.region_width,
        channels: p.channels,
        registry: p.registry.names().to_vec(),
        seed: p.seed,
        provenance: p.slots.iter().map(|s| s.provenance.clone()).collect(),
    };
    let vals: Vec<f64> = p.slots.iter().flat_map(|s| s.entries.iter().copied()).collect();
    let mask: Vec<u8> = p.slots.iter().flat_map(|s| s.mask.iter().map(|&b| b as u8)).collect();
    encode(&header, &vals, &mask)
}

pub fn decode_pool(bytes: &[u8]) -> Result<MemoryPool> {
    let (h, payload): (PoolHeader, _) = split(bytes)?;
    check_version(h.schema_version)?;
    let per = h.units * h.region_height * h.region_width * h.channels;
    exact_len(payload, h.slots * per * 4 + h.slots * h.units)?;
    let vals = floats(payload, h.slots * per)?;
    let mask_bytes = &payload[h.slots * per * 4..];
    if mask_bytes.iter().any(|&b| b > 1) {
        return Err(UxError::Format("mask bytes must be 0 or 1".into()));
    }
    if h.provenance.len() != h.slots {
        return Err(UxError::Format("provenance does not list every slot".into()));
    }
    let shape = (h.units, h.region_height, h.region_width, h.channels);
    let slots = h
        .provenance
        .into_iter()
        .enumerate()
        .map(|(m, provenance)| {
            let entries = Array4::from_shape_vec(shape, vals[m * per..(m + 1) * per].to_vec())
                .map_err(|e| UxError::Format(e.to_string()))?;
            let mask = mask_bytes[m * h.units..(m + 1) * h.units].iter().map(|&b| b == 1).collect();
            Ok(MemorySlot { entries, mask, provenance })
        })
        .collect::<Result<Vec<_>>>()?;
    let pool = MemoryPool {
        registry: EventRegistry::new(h.registry)?,
        units: h.units,
        region_height: h.region_height,
        region_width: h.region_width,
        channels: h.channels,
        seed: h.seed,
        slots,
    };
    pool.validate()?;
    Ok(pool)
}

pub fn write_pool(path: &Path, p: &MemoryPool) -> Result<()> {
    Ok(fs::write(path, encode_pool(p)?)?)
}

pub fn read_pool(path: &Path) -> Result<MemoryPool> {
    decode_pool(&fs::read(path)?)
}

/// Trained parameters with everything needed to rebuild the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub channels: usize,
    pub seed: u64,
    pub epoch: usize,
    pub normalization: Option<NormalizationStats>,
    pub params: ModelParams,
}

impl Checkpoint {
    pub fn model(&self) -> Result<Model> {
        Model::new(self.config, self.channels)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    schema_version: u32,
    config: TrainConfig,
    channels: usize,
    seed: u64,
    epoch: usize,
    normalization: Option<NormalizationStats>,
    tensors: Vec<TensorEntry>,
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut vals = Vec::with_capacity(ck.params.param_count());
    ck.params.visit(&mut |name, t| {
        tensors.push(TensorEntry { name: name.to_string(), shape: t.shape().to_vec() });
        vals.extend_from_slice(t.data());
    });
    let header = CheckpointHeader {
        schema_version: SCHEMA_VERSION,
        config: ck.config,
        channels: ck.channels,
        seed: ck.seed,
        epoch: ck.epoch,
        normalization: ck.normalization.clone(),
        tensors,
    };
    encode(&header, &vals, &[])
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let (h, payload): (CheckpointHeader, _) = split(bytes)?;
    check_version(h.schema_version)?;
    let model = Model::new(h.config, h.channels)?;
    let mut params = model.zero_params();
    let total = params.param_count();
    exact_len(payload, total * 4)?;
    let vals = floats(payload, total)?;
    let mut err = None;
    let (mut i, mut offset) = (0, 0);
    params.visit_mut(&mut |name, t| {
        match h.tensors.get(i) {
            Some(e) if e.name == name && e.shape == t.shape() => {
                let n = t.len();
                t.data_mut().copy_from_slice(&vals[offset..offset + n]);
                offset += n;
            }
            _ if err.is_none() => err = Some(UxError::Format(format!("tensor {i} does not match `{name}`"))),
            _ => {}
        }
        i += 1;
    });
    if let Some(e) = err {
        return Err(e);
    }
    if h.tensors.len() != i {
        return Err(UxError::Format(format!("{} tensors listed, model has {i}", h.tensors.len())));
    }
    Ok(Checkpoint { config: h.config, channels: h.channels, seed: h.seed, epoch: h.epoch, normalization: h.normalization, params })
}

pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    Ok(fs::write(path, encode_checkpoint(ck)?)?)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}

pub fn encode_hfa_rows(rows: &[HfaRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["timestamp", "region_index", "label", "channel", "s_high"]).map_err(csv_err)?;
    for r in rows {
        let label = serde_json::to_value(r.label)?;
        w.write_record([
            iso(&r.timestamp),
            r.region_index.to_string(),
            label.as_str().unwrap_or_default().to_string(),
            r.channel.to_string(),
            format!("{}", r.s_high),
        ])
        .map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| UxError::Format(e.to_string()))
}

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> UxError {
    UxError::Format(e.to_string())
}

/// Dataset directory: `manifest.json`, `grids/NNNNN.wgrid` and one
/// `events.events.jsonl` holding the events of every grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub grids: Vec<String>,
    pub events: String,
    #[serde(default)]
    pub spec: Option<serde_json::Value>,
}

pub const MANIFEST: &str = "manifest.json";
pub const EVENTS_FILE: &str = "events.events.jsonl";

pub fn write_dataset(dir: &Path, data: &Dataset, spec: Option<serde_json::Value>) -> Result<()> {
    fs::create_dir_all(dir.join("grids"))?;
    let mut names = Vec::with_capacity(data.grids.len());
    for (i, g) in data.grids.iter().enumerate() {
        let name = format!("grids/{i:05}.wgrid");
        write_grid(&dir.join(&name), g)?;
        names.push(name);
    }
    let all: Vec<EventRecord> = data.events.iter().flatten().cloned().collect();
    write_events(&dir.join(EVENTS_FILE), &all)?;
    let manifest = DatasetManifest { schema_version: SCHEMA_VERSION, grids: names, events: EVENTS_FILE.into(), spec };
    fs::write(dir.join(MANIFEST), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

/// Reads a dataset directory; events are attached to the grid with the same
/// timestamp.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: DatasetManifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST))?)?;
    check_version(manifest.schema_version)?;
    let grids: Vec<WeatherGrid> =
        manifest.grids.iter().map(|n| read_grid(&dir.join(n))).collect::<Result<_>>()?;
    let all = read_events(&dir.join(&manifest.events))?;
    let mut events = vec![Vec::new(); grids.len()];
    for e in all {
        let i = grids
            .iter()
            .position(|g| *g.timestamp() == e.timestamp)
            .ok_or_else(|| UxError::Format(format!("event at {} matches no grid", iso(&e.timestamp))))?;
        events[i].push(e);
    }
    Ok(Dataset { grids, events })
}
