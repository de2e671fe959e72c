//! Event prior augmentation: a pool of real extreme-region patterns grouped
//! by event type, and the two-level attention that blends it into each
//! region.

use ndarray::{s, Array2, Array3, Array4, ArrayView2, ArrayView3, ArrayView4, Axis};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{check_params, param_set, Graph, Init, Tensor, Var};
use crate::error::{Result, UxError};
use crate::grid::{partition_regions, rasterize_events, region_labels, EventRecord, EventRegistry, WeatherGrid};
use crate::kmeans::kmeans;
use crate::layers;

/// Where a pool entry came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemorySource {
    /// Position of the grid in the construction stream.
    pub timestep: usize,
    pub region: usize,
}

/// Exactly `U` entries of one event type; padded entries are zero and masked.
#[derive(Debug, Clone, PartialEq)]
pub struct MemorySlot {
    /// `[U, a_h, a_w, C]`
    pub entries: Array4<f64>,
    pub mask: Vec<bool>,
    /// Regions averaged into each entry (one for pass-through entries).
    pub provenance: Vec<Vec<MemorySource>>,
}

impl MemorySlot {
    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }

    pub fn valid_indices(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|&i| self.mask[i]).collect()
    }
}

/// Type-indexed memory pool, slot `m` matching registry index `m`.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryPool {
    pub registry: EventRegistry,
    pub units: usize,
    pub region_height: usize,
    pub region_width: usize,
    pub channels: usize,
    pub seed: u64,
    pub slots: Vec<MemorySlot>,
}

impl MemoryPool {
    pub fn slot_count(&self) -> usize {
        self.slots.len()
    }

    /// Indices of slots holding at least one valid entry.
    pub fn valid_slots(&self) -> Vec<usize> {
        (0..self.slots.len()).filter(|&m| self.slots[m].valid_count() > 0).collect()
    }

    /// Structural checks: slot count, per-slot capacity and entry shapes.
    pub fn validate(&self) -> Result<()> {
        if self.slots.len() != self.registry.slot_count() {
            return Err(UxError::Structure(format!(
                "{} slots for {} event types",
                self.slots.len(),
                self.registry.slot_count()
            )));
        }
        let dim = (self.units, self.region_height, self.region_width, self.channels);
        for (m, s) in self.slots.iter().enumerate() {
            if s.entries.dim() != dim || s.mask.len() != self.units || s.provenance.len() != self.units {
                return Err(UxError::Structure(format!("slot {m} does not hold {} entries of the pool shape", self.units)));
            }
        }
        Ok(())
    }
}

/// Result of standardizing a variable-size entry list to exactly `U` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardized {
    pub entries: Array4<f64>,
    pub mask: Vec<bool>,
    /// Input indices behind each output entry.
    pub members: Vec<Vec<usize>>,
}

/// Pads (when `|entries| <= U`) or clusters (otherwise) to exactly `u` entries.
pub fn kmeans_standardize(entries: &[Array3<f64>], shape: (usize, usize, usize), u: usize, seed: u64) -> Standardized {
    let (h, w, c) = shape;
    let mut out = Array4::zeros((u, h, w, c));
    if entries.len() <= u {
        for (i, e) in entries.iter().enumerate() {
            out.index_axis_mut(Axis(0), i).assign(e);
        }
        let members = (0..u).map(|i| if i < entries.len() { vec![i] } else { Vec::new() }).collect();
        return Standardized { entries: out, mask: (0..u).map(|i| i < entries.len()).collect(), members };
    }
    let flat: Vec<Vec<f64>> = entries.iter().map(|e| e.iter().cloned().collect()).collect();
    let cl = kmeans(&flat, u, seed);
    for (i, cent) in cl.centroids.iter().enumerate() {
        out.index_axis_mut(Axis(0), i).assign(&ArrayView3::from_shape((h, w, c), cent).unwrap());
    }
    let mut members = vec![Vec::new(); u];
    for (i, &a) in cl.assignment.iter().enumerate() {
        members[a].push(i);
    }
    Standardized { entries: out, mask: vec![true; u], members }
}

/// Builds the pool from a stream of `(grid, events at that grid's time)`.
/// Regions touching an event join every type slot they are labelled with;
/// normal regions are sampled to match the number of extreme regions (or
/// `u` when there are none).
pub fn build_memory_pool<'a, I>(
    corpus: I,
    registry: &EventRegistry,
    a_h: usize,
    a_w: usize,
    u: usize,
    seed: u64,
) -> Result<MemoryPool>
where
    I: IntoIterator<Item = (&'a WeatherGrid, &'a [EventRecord])>,
{
    if u == 0 {
        return Err(UxError::Config("memory capacity must be at least 1".into()));
    }
    let slots_n = registry.slot_count();
    let normal = registry.normal_index();
    let mut typed: Vec<Vec<(MemorySource, Array3<f64>)>> = vec![Vec::new(); slots_n];
    let mut candidates: Vec<(MemorySource, Array3<f64>)> = Vec::new();
    let mut extreme_regions = 0;
    let mut channels = None;
    let mut seen = 0;
    for (t, (grid, events)) in corpus.into_iter().enumerate() {
        seen += 1;
        match channels {
            None => channels = Some(grid.channels()),
            Some(c) if c != grid.channels() => {
                return Err(UxError::dim("channels", format!("grid {t} has {} channels, expected {c}", grid.channels())))
            }
            _ => {}
        }
        let part = partition_regions(grid, a_h, a_w)?;
        let mask = rasterize_events(events, grid.height(), grid.width(), grid.bounds())?;
        let labels = region_labels(&part, &mask, events, registry, grid.bounds())?;
        for (r, (lab, region)) in labels.iter().zip(part.regions).enumerate() {
            let src = MemorySource { timestep: t, region: r };
            if lab[normal] {
                candidates.push((src, region));
            } else {
                extreme_regions += 1;
                for m in (0..normal).filter(|&m| lab[m]) {
                    typed[m].push((src, region.clone()));
                }
            }
        }
    }
    if seen == 0 {
        return Err(UxError::EmptyCorpus);
    }
    let c = channels.unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let want = if extreme_regions == 0 { u } else { extreme_regions };
    let mut picked = sample(&mut rng, candidates.len(), want.min(candidates.len())).into_vec();
    picked.sort_unstable();
    let mut cand: Vec<Option<(MemorySource, Array3<f64>)>> = candidates.into_iter().map(Some).collect();
    typed[normal] = picked.into_iter().map(|i| cand[i].take().unwrap()).collect();

    let slots = typed
        .into_iter()
        .map(|list| {
            let slot_seed: u64 = rng.random();
            let (srcs, regions): (Vec<MemorySource>, Vec<Array3<f64>>) = list.into_iter().unzip();
            let st = kmeans_standardize(&regions, (a_h, a_w, c), u, slot_seed);
            let provenance = st.members.iter().map(|m| m.iter().map(|&i| srcs[i]).collect()).collect();
            MemorySlot { entries: st.entries, mask: st.mask, provenance }
        })
        .collect();
    Ok(MemoryPool {
        registry: registry.clone(),
        units: u,
        region_height: a_h,
        region_width: a_w,
        channels: c,
        seed,
        slots,
    })
}

param_set! {
    /// Query and key descriptor heads plus the residual projection.
    pub struct EpaParams / EpaVars { q_w, q_b, k_w, k_b, w_m, b_m }
}

impl EpaParams {
    fn build(c: usize, mut make: impl FnMut(&[usize], Init) -> Tensor) -> Self {
        EpaParams {
            q_w: make(&[9 * c, c], Init::FanIn(9 * c, 1.0)),
            q_b: make(&[c], Init::Zeros),
            k_w: make(&[9 * c, c], Init::FanIn(9 * c, 1.0)),
            k_b: make(&[c], Init::Zeros),
            w_m: make(&[c, c], Init::Zeros),
            b_m: make(&[c], Init::Zeros),
        }
    }

    /// Random heads with an identity residual projection.
    pub fn init<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        let mut p = Self::build(channels, |s, i| i.make(s, rng));
        p.w_m = Tensor::eye(channels);
        p
    }

    pub fn zeros(channels: usize) -> Self {
        Self::build(channels, |s, _| Tensor::zeros(s))
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        check_params(self, &Self::zeros(channels))
    }
}

/// Conv3x3 + spatial mean over each `[h, w, C]` item of `x`, giving `[n, C']`.
pub fn pooled_descriptor(x: ArrayView4<f64>, weight: &Tensor, bias: &Tensor) -> Array2<f64> {
    let n = x.dim().0;
    let cout = weight.shape()[1];
    let mut out = Array2::zeros((n, cout));
    for i in 0..n {
        let d = layers::pooled_descriptor_direct(x.index_axis(Axis(0), i), weight, bias);
        out.row_mut(i).assign(&ndarray::ArrayView1::from(&d));
    }
    out
}

/// Scaled dot-product attention of a single query over the valid entries.
/// Masked entries are never read.
pub fn attention_fuse(q: &[f64], keys: ArrayView2<f64>, values: ArrayView4<f64>, mask: &[bool]) -> Result<Array3<f64>> {
    let n = keys.nrows();
    if values.dim().0 != n || mask.len() != n || keys.ncols() != q.len() {
        return Err(UxError::dim("memory", format!("{n} keys, {} values, {} mask bits", values.dim().0, mask.len())));
    }
    let valid: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
    if valid.is_empty() {
        return Err(UxError::NoValidMemory);
    }
    let scale = 1.0 / (q.len() as f64).sqrt();
    let scores: Vec<f64> =
        valid.iter().map(|&i| scale * keys.row(i).iter().zip(q).map(|(k, x)| k * x).sum::<f64>()).collect();
    let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
    let z: f64 = e.iter().sum();
    let (_, h, w, c) = values.dim();
    let mut out = Array3::zeros((h, w, c));
    for (&i, ei) in valid.iter().zip(&e) {
        out.scaled_add(ei / z, &values.index_axis(Axis(0), i));
    }
    Ok(out)
}

/// Augments one region with the pool: intra-type then inter-type attention,
/// followed by `(X + P) W_m + b_m`.
pub fn epa_forward(region: ArrayView3<f64>, pool: &MemoryPool, p: &EpaParams) -> Result<Array3<f64>> {
    let (h, w, c) = region.dim();
    if (h, w, c) != (pool.region_height, pool.region_width, pool.channels) {
        return Err(UxError::dim("region", format!("{h}x{w}x{c} does not match the pool")));
    }
    let q = layers::pooled_descriptor_direct(region, &p.q_w, &p.q_b);
    let mut fused = Vec::new();
    for m in pool.valid_slots() {
        let slot = &pool.slots[m];
        let keys = pooled_descriptor(slot.entries.view(), &p.k_w, &p.k_b);
        fused.push(attention_fuse(&q, keys.view(), slot.entries.view(), &slot.mask)?);
    }
    if fused.is_empty() {
        return Err(UxError::NoValidMemory);
    }
    let mut stacked = Array4::zeros((fused.len(), h, w, c));
    for (i, f) in fused.iter().enumerate() {
        stacked.index_axis_mut(Axis(0), i).assign(f);
    }
    let keys = pooled_descriptor(stacked.view(), &p.k_w, &p.k_b);
    let hybrid = attention_fuse(&q, keys.view(), stacked.view(), &vec![true; fused.len()])?;
    let wm = ArrayView2::from_shape((c, c), p.w_m.data()).unwrap();
    let bm = ndarray::ArrayView1::from(p.b_m.data());
    let mixed = (&region + &hybrid).into_shape_with_order((h * w, c)).unwrap();
    let out = mixed.dot(&wm) + bm;
    Ok(out.into_shape_with_order((h, w, c)).unwrap())
}

fn slot_tensor(slot: &MemorySlot, valid: &[usize]) -> Tensor {
    let (_, h, w, c) = slot.entries.dim();
    let data = valid.iter().flat_map(|&i| slot.entries.slice(s![i, .., .., ..]).iter().cloned().collect::<Vec<_>>());
    Tensor::new(vec![valid.len(), h, w, c], data.collect()).unwrap()
}

/// Batched augmentation on a graph; `x` is `[R, a_h, a_w, C]`. Only valid
/// entries enter the graph.
pub fn epa_graph(g: &mut Graph, x: Var, pool: &MemoryPool, v: &EpaVars) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 || s[1..] != [pool.region_height, pool.region_width, pool.channels] {
        return Err(UxError::dim("region", format!("batch {s:?} does not match the pool")));
    }
    let (r, h, w, c) = (s[0], s[1], s[2], s[3]);
    let cells = h * w * c;
    let scale = 1.0 / (c as f64).sqrt();
    let q = layers::pooled_descriptor(g, x, v.q_w, v.q_b);
    let q3 = g.reshape(q, &[1, r, c]);
    let mut fused = Vec::new();
    for m in pool.valid_slots() {
        let slot = &pool.slots[m];
        let valid = slot.valid_indices();
        let n = valid.len();
        let vals = g.input(slot_tensor(slot, &valid));
        let keys = layers::pooled_descriptor(g, vals, v.k_w, v.k_b);
        let scores = g.bmm(q3, keys, true);
        let scores = g.scale(scores, scale);
        let attn = g.softmax(scores);
        let flat = g.reshape(vals, &[n, cells]);
        let pm = g.bmm(attn, flat, false);
        fused.push(pm);
    }
    if fused.is_empty() {
        return Err(UxError::NoValidMemory);
    }
    let k = fused.len();
    let o = g.concat(&fused, &[k, r, cells]);
    let o = g.permute(o, &[1, 0, 2]);
    let o_img = g.reshape(o, &[r * k, h, w, c]);
    let keys = layers::pooled_descriptor(g, o_img, v.k_w, v.k_b);
    let keys = g.reshape(keys, &[r, k, c]);
    let q_r = g.reshape(q, &[r, 1, c]);
    let scores = g.bmm(q_r, keys, true);
    let scores = g.scale(scores, scale);
    let attn = g.softmax(scores);
    let hybrid = g.bmm(attn, o, false);
    let hybrid = g.reshape(hybrid, &[r, h, w, c]);
    let sum = g.add(x, hybrid);
    Ok(g.affine(sum, v.w_m, v.b_m))
}
