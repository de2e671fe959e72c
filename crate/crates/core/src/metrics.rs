//! Verification: climatology, MAE/RMSE/ACC over the whole grid and over
//! extreme cells, and their gaps.

use std::collections::BTreeMap;

use ndarray::{Array3, ArrayView2, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::error::{Result, UxError};
use crate::grid::WeatherGrid;

/// Mean field per `(month, hour)` bucket.
#[derive(Debug, Clone, PartialEq)]
pub struct Climatology {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Free-form description of the fit period.
    pub period: String,
    pub buckets: BTreeMap<(u32, u32), Array3<f64>>,
}

impl Climatology {
    pub fn lookup(&self, month: u32, hour: u32) -> Result<&Array3<f64>> {
        self.buckets.get(&(month, hour)).ok_or(UxError::MissingClimatology { month, hour })
    }

    pub fn for_grid(&self, g: &WeatherGrid) -> Result<&Array3<f64>> {
        self.lookup(g.month(), g.hour())
    }
}

pub fn fit_climatology<'a, I>(grids: I) -> Result<Climatology>
where
    I: IntoIterator<Item = &'a WeatherGrid>,
{
    let mut sums: BTreeMap<(u32, u32), (Array3<f64>, usize)> = BTreeMap::new();
    let mut shape = None;
    let (mut first, mut last) = (None, None);
    for g in grids {
        let dim = g.values().dim();
        match shape {
            None => shape = Some(dim),
            Some(s) if s != dim => return Err(UxError::dim("grid", format!("{dim:?} differs from {s:?}"))),
            _ => {}
        }
        let t = *g.timestamp();
        first = Some(first.map_or(t, |f: chrono::DateTime<chrono::Utc>| f.min(t)));
        last = Some(last.map_or(t, |l: chrono::DateTime<chrono::Utc>| l.max(t)));
        let e = sums.entry((g.month(), g.hour())).or_insert_with(|| (Array3::zeros(dim), 0));
        e.0 += g.values();
        e.1 += 1;
    }
    let (h, w, c) = shape.ok_or(UxError::EmptyCorpus)?;
    let buckets = sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect();
    let period = format!("{} .. {}", first.unwrap().to_rfc3339(), last.unwrap().to_rfc3339());
    Ok(Climatology { height: h, width: w, channels: c, period, buckets })
}

/// One verified timestep: prediction, truth, the truth's extreme mask and the
/// climatology for the truth's calendar bucket.
#[derive(Debug, Clone, Copy)]
pub struct MetricInput<'a> {
    pub pred: ArrayView3<'a, f64>,
    pub target: ArrayView3<'a, f64>,
    pub mask: ArrayView2<'a, bool>,
    pub climatology: ArrayView3<'a, f64>,
}

/// Whether the fields are in physical units or standardized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportScale {
    Raw,
    Normalized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableStat {
    pub per_variable: BTreeMap<String, f64>,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScopeStats {
    pub mae: VariableStat,
    pub rmse: VariableStat,
    /// Absent when every `(t, c)` correlation was undefined.
    pub acc: Option<VariableStat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricCounts {
    pub timesteps: usize,
    pub extreme_cells: Vec<usize>,
    /// Timesteps left out of extreme aggregates for having no extreme cell.
    pub empty_mask_timesteps: usize,
    /// `(t, c)` pairs whose anomaly correlation was undefined.
    pub acc_undefined_general: usize,
    pub acc_undefined_extreme: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub scale: ReportScale,
    pub general: ScopeStats,
    pub extreme: Option<ScopeStats>,
    pub gap: Option<ScopeStats>,
    pub counts: MetricCounts,
}

struct Accum {
    abs: Vec<f64>,
    sq: Vec<f64>,
    cells: f64,
    acc: Vec<Vec<f64>>,
    undefined: usize,
}

fn accumulate(inputs: &[MetricInput], channels: usize, masked: bool) -> Accum {
    let mut a = Accum { abs: vec![0.0; channels], sq: vec![0.0; channels], cells: 0.0, acc: vec![Vec::new(); channels], undefined: 0 };
    for inp in inputs {
        let (h, w, _) = inp.target.dim();
        let keep = |y: usize, x: usize| !masked || inp.mask[[y, x]];
        let n = (0..h).flat_map(|y| (0..w).map(move |x| (y, x))).filter(|&(y, x)| keep(y, x)).count();
        if n == 0 {
            continue;
        }
        a.cells += n as f64;
        for c in 0..channels {
            let (mut cross, mut pp, mut tt) = (0.0, 0.0, 0.0);
            for y in 0..h {
                for x in 0..w {
                    if !keep(y, x) {
                        continue;
                    }
                    let (p, t, cl) = (inp.pred[[y, x, c]], inp.target[[y, x, c]], inp.climatology[[y, x, c]]);
                    let e = p - t;
                    a.abs[c] += e.abs();
                    a.sq[c] += e * e;
                    let (dp, dt) = (p - cl, t - cl);
                    cross += dp * dt;
                    pp += dp * dp;
                    tt += dt * dt;
                }
            }
            let denom = (pp * tt).sqrt();
            if denom > 0.0 && denom.is_finite() {
                a.acc[c].push((cross / denom).clamp(-1.0, 1.0));
            } else {
                a.undefined += 1;
            }
        }
    }
    a
}

fn stat(names: &[String], vals: &[Option<f64>]) -> Option<VariableStat> {
    let defined: Vec<(String, f64)> =
        names.iter().zip(vals).filter_map(|(n, v)| v.map(|v| (n.clone(), v))).collect();
    if defined.is_empty() {
        return None;
    }
    let mean = defined.iter().map(|(_, v)| v).sum::<f64>() / defined.len() as f64;
    Some(VariableStat { per_variable: defined.into_iter().collect(), mean })
}

fn scope(a: &Accum, names: &[String]) -> Option<ScopeStats> {
    if a.cells == 0.0 {
        return None;
    }
    let mae: Vec<Option<f64>> = a.abs.iter().map(|s| Some(s / a.cells)).collect();
    let rmse: Vec<Option<f64>> = a.sq.iter().map(|s| Some((s / a.cells).sqrt())).collect();
    let acc: Vec<Option<f64>> =
        a.acc.iter().map(|v| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)).collect();
    Some(ScopeStats { mae: stat(names, &mae)?, rmse: stat(names, &rmse)?, acc: stat(names, &acc) })
}

fn diff(a: &VariableStat, b: &VariableStat) -> VariableStat {
    let per_variable = a
        .per_variable
        .iter()
        .filter_map(|(k, va)| b.per_variable.get(k).map(|vb| (k.clone(), va - vb)))
        .collect();
    VariableStat { per_variable, mean: a.mean - b.mean }
}

/// Gaps: `ext - gen` for MAE and RMSE, `gen - ext` for ACC.
pub fn scope_gap(gen: &ScopeStats, ext: &ScopeStats) -> ScopeStats {
    let acc = match (&gen.acc, &ext.acc) {
        (Some(g), Some(e)) => Some(diff(g, e)),
        _ => None,
    };
    ScopeStats { mae: diff(&ext.mae, &gen.mae), rmse: diff(&ext.rmse, &gen.rmse), acc }
}

/// Aggregates MAE/RMSE over all cells of all timesteps, ACC per timestep then
/// averaged; extreme scope restricts every sum to masked cells.
pub fn compute_metrics(inputs: &[MetricInput], variables: &[String], scale: ReportScale) -> Result<MetricReport> {
    let first = inputs.first().ok_or(UxError::EmptySample)?;
    let dim = first.target.dim();
    if variables.len() != dim.2 {
        return Err(UxError::dim("channels", format!("{} names for {} channels", variables.len(), dim.2)));
    }
    for (t, i) in inputs.iter().enumerate() {
        if i.pred.dim() != dim || i.target.dim() != dim || i.climatology.dim() != dim || i.mask.dim() != (dim.0, dim.1) {
            return Err(UxError::dim("timestep", format!("inputs of timestep {t} disagree in shape")));
        }
    }
    let gen_acc = accumulate(inputs, dim.2, false);
    let ext_acc = accumulate(inputs, dim.2, true);
    let general = scope(&gen_acc, variables).ok_or(UxError::EmptySample)?;
    let extreme = scope(&ext_acc, variables);
    let gap = extreme.as_ref().map(|e| scope_gap(&general, e));
    let extreme_cells: Vec<usize> = inputs.iter().map(|i| i.mask.iter().filter(|&&b| b).count()).collect();
    let counts = MetricCounts {
        timesteps: inputs.len(),
        empty_mask_timesteps: extreme_cells.iter().filter(|&&n| n == 0).count(),
        extreme_cells,
        acc_undefined_general: gen_acc.undefined,
        acc_undefined_extreme: ext_acc.undefined,
    };
    Ok(MetricReport { scale, general, extreme, gap, counts })
}

impl MetricReport {
    pub const CSV_HEADER: [&'static str; 11] = [
        "label", "variable", "mae_ext", "mae_gen", "mae_gap", "rmse_ext", "rmse_gen", "rmse_gap", "acc_ext", "acc_gen",
        "acc_gap",
    ];

    /// Table-style rows (one per variable, then `mean`); absent values are empty.
    pub fn csv_rows(&self, label: &str) -> Vec<Vec<String>> {
        let get = |s: Option<&VariableStat>, var: Option<&str>| -> String {
            s.and_then(|s| match var {
                Some(v) => s.per_variable.get(v).copied(),
                None => Some(s.mean),
            })
            .map(|v| format!("{v:.6}"))
            .unwrap_or_default()
        };
        let mut names: Vec<Option<&str>> = self.general.mae.per_variable.keys().map(|k| Some(k.as_str())).collect();
        names.push(None);
        names
            .into_iter()
            .map(|var| {
                let (e, g, d) = (self.extreme.as_ref(), Some(&self.general), self.gap.as_ref());
                vec![
                    label.to_string(),
                    var.unwrap_or("mean").to_string(),
                    get(e.map(|s| &s.mae), var),
                    get(g.map(|s| &s.mae), var),
                    get(d.map(|s| &s.mae), var),
                    get(e.map(|s| &s.rmse), var),
                    get(g.map(|s| &s.rmse), var),
                    get(d.map(|s| &s.rmse), var),
                    get(e.and_then(|s| s.acc.as_ref()), var),
                    get(g.and_then(|s| s.acc.as_ref()), var),
                    get(d.and_then(|s| s.acc.as_ref()), var),
                ]
            })
            .collect()
    }
}

/// Mean absolute difference over every element.
pub fn l1_loss(pred: ArrayView3<f64>, target: ArrayView3<f64>) -> Result<f64> {
    if pred.dim() != target.dim() {
        return Err(UxError::dim("field", format!("{:?} vs {:?}", pred.dim(), target.dim())));
    }
    let n = pred.len() as f64;
    Ok(pred.iter().zip(target.iter()).map(|(a, b)| (a - b).abs()).sum::<f64>() / n)
}
