//! High-frequency-area comparison of extreme, normal and randomly drawn
//! regions.

use chrono::{DateTime, Utc};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, UxError};
use crate::grid::{partition_regions, rasterize_events, region_labels, EventRecord, EventRegistry, WeatherGrid};
use crate::spectral::{kde_1d, wasserstein1, KdeCurve};
use crate::spectral::{radial_index, region_hfa, TransformKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegionLabel {
    Normal,
    Extreme,
    Random,
}

/// One row of the hfa-report table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HfaRow {
    pub timestamp: DateTime<Utc>,
    pub region_index: usize,
    pub label: RegionLabel,
    pub channel: usize,
    pub s_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HfaSummary {
    pub normal_count: usize,
    pub extreme_count: usize,
    pub mean_normal: f64,
    pub mean_extreme: Option<f64>,
    pub w1_normal_extreme: Option<f64>,
    pub w1_normal_random: Option<f64>,
    pub kde_normal: Option<KdeCurve>,
    pub kde_extreme: Option<KdeCurve>,
    pub kde_random: Option<KdeCurve>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HfaAnalysis {
    pub rows: Vec<HfaRow>,
    pub summary: HfaSummary,
}

fn values(rows: &[HfaRow], label: RegionLabel) -> Vec<f64> {
    rows.iter().filter(|r| r.label == label).map(|r| r.s_high).collect()
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Per-channel HFA of every region. A region overlapping any event is
/// extreme, all others normal. At each timestep the random group draws as
/// many regions as that timestep has extreme ones, uniformly without
/// replacement from all of its regions, with `seed`.
pub fn analyze_hfa<'a, I>(corpus: I, registry: &EventRegistry, a_h: usize, a_w: usize, seed: u64) -> Result<HfaAnalysis>
where
    I: IntoIterator<Item = (&'a WeatherGrid, &'a [EventRecord])>,
{
    let idx = radial_index(a_h, a_w, TransformKind::RealInput);
    let mut rows = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = 0;
    for (grid, events) in corpus {
        seen += 1;
        let mut extreme_regions = 0;
        let mut hfas = Vec::new();
        let part = partition_regions(grid, a_h, a_w)?;
        let mask = rasterize_events(events, grid.height(), grid.width(), grid.bounds())?;
        let labels = region_labels(&part, &mask, events, registry, grid.bounds())?;
        let normal = registry.normal_index();
        for (r, region) in part.regions.iter().enumerate() {
            let hfa = region_hfa(region.view(), &idx)?;
            let label = if labels[r][normal] { RegionLabel::Normal } else { RegionLabel::Extreme };
            if label == RegionLabel::Extreme {
                extreme_regions += 1;
            }
            for (c, &s_high) in hfa.iter().enumerate() {
                rows.push(HfaRow { timestamp: *grid.timestamp(), region_index: r, label, channel: c, s_high });
            }
            hfas.push(hfa);
        }
        let mut picks = sample(&mut rng, hfas.len(), extreme_regions).into_vec();
        picks.sort_unstable();
        for r in picks {
            for (c, &s_high) in hfas[r].iter().enumerate() {
                let row = HfaRow { timestamp: *grid.timestamp(), region_index: r, label: RegionLabel::Random, channel: c, s_high };
                rows.push(row);
            }
        }
    }
    if seen == 0 {
        return Err(UxError::EmptyCorpus);
    }
    let (n, e, rnd) = (values(&rows, RegionLabel::Normal), values(&rows, RegionLabel::Extreme), values(&rows, RegionLabel::Random));
    let w1 = |a: &[f64], b: &[f64]| -> Result<Option<f64>> {
        if a.is_empty() || b.is_empty() {
            Ok(None)
        } else {
            wasserstein1(a, b).map(Some)
        }
    };
    let kde = |v: &[f64]| if v.len() >= 2 { kde_1d(v, None).ok() } else { None };
    let summary = HfaSummary {
        normal_count: n.len(),
        extreme_count: e.len(),
        mean_normal: mean(&n).unwrap_or(f64::NAN),
        mean_extreme: mean(&e),
        w1_normal_extreme: w1(&n, &e)?,
        w1_normal_random: w1(&n, &rnd)?,
        kde_normal: kde(&n),
        kde_extreme: kde(&e),
        kde_random: kde(&rnd),
    };
    Ok(HfaAnalysis { rows, summary })
}
