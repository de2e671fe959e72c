//! Gridded weather states, uniform region tiling, extreme-event records and
//! their rasterized masks.

use chrono::{DateTime, Datelike, Timelike, Utc};
use ndarray::{s, Array2, Array3, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::error::{Result, UxError};

/// Geographic extent of a grid. Row 0 is the northern edge (`lat_max`),
/// column 0 the western edge (`lon_min`); the mapping is affine.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoBounds {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
}

impl GeoBounds {
    pub fn new(lat_min: f64, lat_max: f64, lon_min: f64, lon_max: f64) -> Result<Self> {
        if !(lat_min < lat_max && lon_min < lon_max) {
            return Err(UxError::Config(format!(
                "degenerate bounds lat [{lat_min}, {lat_max}] lon [{lon_min}, {lon_max}]"
            )));
        }
        Ok(GeoBounds { lat_min, lat_max, lon_min, lon_max })
    }

    /// Unit box, handy for synthetic data.
    pub fn unit() -> Self {
        GeoBounds { lat_min: 0.0, lat_max: 1.0, lon_min: 0.0, lon_max: 1.0 }
    }

    pub fn contains(&self, lat: f64, lon: f64) -> bool {
        (self.lat_min..=self.lat_max).contains(&lat) && (self.lon_min..=self.lon_max).contains(&lon)
    }

    /// Fractional `(row, col)` grid coordinates of a geographic point.
    pub fn to_grid(&self, lat: f64, lon: f64, h: usize, w: usize) -> (f64, f64) {
        let row = (self.lat_max - lat) / (self.lat_max - self.lat_min) * h as f64;
        let col = (lon - self.lon_min) / (self.lon_max - self.lon_min) * w as f64;
        (row, col)
    }

    /// Inverse of [`GeoBounds::to_grid`].
    pub fn to_geo(&self, row: f64, col: f64, h: usize, w: usize) -> (f64, f64) {
        let lat = self.lat_max - row / h as f64 * (self.lat_max - self.lat_min);
        let lon = self.lon_min + col / w as f64 * (self.lon_max - self.lon_min);
        (lat, lon)
    }
}

/// Month, day-of-month and hour of a timestamp, each 1-based except the hour.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CalendarKey {
    pub month: u32,
    pub day: u32,
    pub hour: u32,
}

impl CalendarKey {
    pub fn from_timestamp(t: &DateTime<Utc>) -> Self {
        CalendarKey { month: t.month(), day: t.day(), hour: t.hour() }
    }

    /// Zero-based embedding rows `(month, day, hour)`, validated.
    pub fn indices(&self) -> Result<(usize, usize, usize)> {
        if !(1..=12).contains(&self.month) {
            return Err(UxError::Calendar(format!("month {}", self.month)));
        }
        if !(1..=31).contains(&self.day) {
            return Err(UxError::Calendar(format!("day {}", self.day)));
        }
        if self.hour > 23 {
            return Err(UxError::Calendar(format!("hour {}", self.hour)));
        }
        Ok((self.month as usize - 1, self.day as usize - 1, self.hour as usize))
    }
}

/// Dense `H x W x C` field of physical variables at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct WeatherGrid {
    values: Array3<f64>,
    variables: Vec<String>,
    timestamp: DateTime<Utc>,
    bounds: GeoBounds,
    normalized: bool,
}

impl WeatherGrid {
    pub fn new(
        values: Array3<f64>,
        variables: Vec<String>,
        timestamp: DateTime<Utc>,
        bounds: GeoBounds,
        normalized: bool,
    ) -> Result<Self> {
        let (h, w, c) = values.dim();
        if h == 0 || w == 0 || c == 0 {
            return Err(UxError::dim("grid", format!("empty grid {h}x{w}x{c}")));
        }
        if variables.len() != c {
            return Err(UxError::dim("channels", format!("{} names for {c} channels", variables.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(UxError::Domain("grid holds non-finite values".into()));
        }
        Ok(WeatherGrid { values, variables, timestamp, bounds, normalized })
    }

    /// Grid with generated variable names `v0, v1, ...` over unit bounds.
    pub fn from_values(values: Array3<f64>, timestamp: DateTime<Utc>) -> Result<Self> {
        let names = (0..values.dim().2).map(|c| format!("v{c}")).collect();
        WeatherGrid::new(values, names, timestamp, GeoBounds::unit(), false)
    }

    /// Same metadata, new values of the same shape.
    pub fn with_values(&self, values: Array3<f64>, normalized: bool) -> Result<Self> {
        if values.dim() != self.values.dim() {
            return Err(UxError::dim("grid", format!("{:?} vs {:?}", values.dim(), self.values.dim())));
        }
        WeatherGrid::new(values, self.variables.clone(), self.timestamp, self.bounds, normalized)
    }

    pub fn height(&self) -> usize {
        self.values.dim().0
    }
    pub fn width(&self) -> usize {
        self.values.dim().1
    }
    pub fn channels(&self) -> usize {
        self.values.dim().2
    }
    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }
    pub fn variables(&self) -> &[String] {
        &self.variables
    }
    pub fn timestamp(&self) -> &DateTime<Utc> {
        &self.timestamp
    }
    pub fn bounds(&self) -> &GeoBounds {
        &self.bounds
    }
    pub fn is_normalized(&self) -> bool {
        self.normalized
    }
    pub fn calendar(&self) -> CalendarKey {
        CalendarKey::from_timestamp(&self.timestamp)
    }
    pub fn month(&self) -> u32 {
        self.timestamp.month()
    }
    pub fn day(&self) -> u32 {
        self.timestamp.day()
    }
    pub fn hour(&self) -> u32 {
        self.timestamp.hour()
    }
}

/// Uniform tiling of a grid into `a_h x a_w` regions, row-major by region.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionPartition {
    pub region_height: usize,
    pub region_width: usize,
    /// Region grid dims `(H', W')`.
    pub rows: usize,
    pub cols: usize,
    pub regions: Vec<Array3<f64>>,
}

impl RegionPartition {
    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    /// Top-left grid cell of region `r`.
    pub fn origin(&self, r: usize) -> (usize, usize) {
        region_origin(r, self.cols, self.region_height, self.region_width)
    }
}

pub fn region_origin(r: usize, cols: usize, a_h: usize, a_w: usize) -> (usize, usize) {
    ((r / cols) * a_h, (r % cols) * a_w)
}

fn check_divisible(h: usize, w: usize, a_h: usize, a_w: usize) -> Result<()> {
    if a_h == 0 || !h.is_multiple_of(a_h) {
        return Err(UxError::dim("height", format!("region height {a_h} does not divide {h}")));
    }
    if a_w == 0 || !w.is_multiple_of(a_w) {
        return Err(UxError::dim("width", format!("region width {a_w} does not divide {w}")));
    }
    Ok(())
}

/// Splits `values` into row-major `a_h x a_w x C` regions.
pub fn partition_values(values: ArrayView3<f64>, a_h: usize, a_w: usize) -> Result<RegionPartition> {
    let (h, w, _) = values.dim();
    check_divisible(h, w, a_h, a_w)?;
    let (rows, cols) = (h / a_h, w / a_w);
    let regions = (0..rows * cols)
        .map(|r| {
            let (y, x) = region_origin(r, cols, a_h, a_w);
            values.slice(s![y..y + a_h, x..x + a_w, ..]).to_owned()
        })
        .collect();
    Ok(RegionPartition { region_height: a_h, region_width: a_w, rows, cols, regions })
}

pub fn partition_regions(grid: &WeatherGrid, a_h: usize, a_w: usize) -> Result<RegionPartition> {
    partition_values(grid.values().view(), a_h, a_w)
}

/// Exact inverse of [`partition_regions`].
pub fn merge_regions(p: &RegionPartition) -> Result<Array3<f64>> {
    if p.regions.len() != p.rows * p.cols {
        return Err(UxError::Structure(format!(
            "{} regions for a {}x{} region grid",
            p.regions.len(),
            p.rows,
            p.cols
        )));
    }
    let c = p.regions.first().map(|r| r.dim().2).unwrap_or(0);
    for (i, r) in p.regions.iter().enumerate() {
        if r.dim() != (p.region_height, p.region_width, c) {
            return Err(UxError::Structure(format!("region {i} has shape {:?}", r.dim())));
        }
    }
    let mut out = Array3::zeros((p.rows * p.region_height, p.cols * p.region_width, c));
    for (r, region) in p.regions.iter().enumerate() {
        let (y, x) = p.origin(r);
        out.slice_mut(s![y..y + p.region_height, x..x + p.region_width, ..]).assign(region);
    }
    Ok(out)
}

/// Ordered set of extreme-event type names; index `M` is the implicit
/// "normal" type.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventRegistry {
    names: Vec<String>,
}

impl EventRegistry {
    pub const NORMAL: &'static str = "normal";

    pub fn new(names: Vec<String>) -> Result<Self> {
        for (i, n) in names.iter().enumerate() {
            if n == Self::NORMAL {
                return Err(UxError::Config("`normal` is reserved".into()));
            }
            if names[..i].contains(n) {
                return Err(UxError::Config(format!("duplicate event type `{n}`")));
            }
        }
        Ok(EventRegistry { names })
    }

    /// Registry of every type name appearing in `events`, sorted.
    pub fn from_events(events: &[EventRecord]) -> Result<Self> {
        let mut names: Vec<String> = events.iter().flat_map(|e| e.types.iter().cloned()).collect();
        names.sort();
        names.dedup();
        EventRegistry::new(names)
    }

    /// Number of extreme types `M`.
    pub fn extreme_count(&self) -> usize {
        self.names.len()
    }

    /// `M' = M + 1`.
    pub fn slot_count(&self) -> usize {
        self.names.len() + 1
    }

    pub fn normal_index(&self) -> usize {
        self.names.len()
    }

    pub fn index(&self, name: &str) -> Result<usize> {
        if name == Self::NORMAL {
            return Ok(self.normal_index());
        }
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| UxError::UnknownEventType(name.to_string()))
    }

    pub fn name(&self, idx: usize) -> &str {
        self.names.get(idx).map(String::as_str).unwrap_or(Self::NORMAL)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// One extreme-event annotation: four `(lat, lon)` corners and its types.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub timestamp: DateTime<Utc>,
    pub vertices: [[f64; 2]; 4],
    pub types: Vec<String>,
}

/// Inclusive cell box `(row0, row1, col0, col1)` covered by an event.
pub fn event_cell_box(ev: &EventRecord, h: usize, w: usize, bounds: &GeoBounds) -> Option<(usize, usize, usize, usize)> {
    if ev.vertices.iter().any(|v| !bounds.contains(v[0], v[1])) {
        return None;
    }
    let pts: Vec<(f64, f64)> = ev.vertices.iter().map(|v| bounds.to_grid(v[0], v[1], h, w)).collect();
    let rmin = pts.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let rmax = pts.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let cmin = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let cmax = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let clamp = |v: f64, n: usize| (v.floor().max(0.0) as usize).min(n - 1);
    Some((clamp(rmin, h), clamp(rmax, h), clamp(cmin, w), clamp(cmax, w)))
}

/// Binary `H x W` mask of cells inside at least one event.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtremeMask {
    pub bits: Array2<bool>,
}

impl ExtremeMask {
    pub fn empty(h: usize, w: usize) -> Self {
        ExtremeMask { bits: Array2::from_elem((h, w), false) }
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.bits.dim()
    }

    pub fn get(&self, h: usize, w: usize) -> bool {
        self.bits[[h, w]]
    }
}

/// Rasterizes events by the axis-aligned box of their vertices; each vertex
/// floors to the cell containing it and boundary cells are included.
pub fn rasterize_events(events: &[EventRecord], h: usize, w: usize, bounds: &GeoBounds) -> Result<ExtremeMask> {
    let mut mask = ExtremeMask::empty(h, w);
    for (i, ev) in events.iter().enumerate() {
        let (r0, r1, c0, c1) = event_cell_box(ev, h, w, bounds).ok_or(UxError::Bounds { event: i })?;
        mask.bits.slice_mut(s![r0..=r1, c0..=c1]).fill(true);
    }
    Ok(mask)
}

/// Per-region multi-hot type vectors of length `M' = M + 1`; the last bit is
/// the normal type and is set iff no extreme bit is.
pub fn region_labels(
    partition: &RegionPartition,
    mask: &ExtremeMask,
    events: &[EventRecord],
    registry: &EventRegistry,
    bounds: &GeoBounds,
) -> Result<Vec<Vec<bool>>> {
    let (h, w) = (partition.rows * partition.region_height, partition.cols * partition.region_width);
    if mask.dim() != (h, w) {
        return Err(UxError::dim("mask", format!("{:?} vs grid {h}x{w}", mask.dim())));
    }
    let m = registry.extreme_count();
    let mut labels = vec![vec![false; m + 1]; partition.len()];
    for (i, ev) in events.iter().enumerate() {
        let (r0, r1, c0, c1) = event_cell_box(ev, h, w, bounds).ok_or(UxError::Bounds { event: i })?;
        let type_idx: Vec<usize> = ev.types.iter().map(|t| registry.index(t)).collect::<Result<_>>()?;
        for (r, lab) in labels.iter_mut().enumerate() {
            let (y, x) = partition.origin(r);
            let overlaps = r0 < y + partition.region_height && r1 >= y && c0 < x + partition.region_width && c1 >= x;
            if overlaps {
                for &t in &type_idx {
                    lab[t] = true;
                }
            }
        }
    }
    for lab in labels.iter_mut() {
        lab[m] = !lab[..m].iter().any(|&b| b);
    }
    Ok(labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;
    use ndarray::Array3;

    fn t0() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2022, 7, 4, 12, 0, 0).unwrap()
    }

    fn indexed_grid(h: usize, w: usize) -> Array3<f64> {
        Array3::from_shape_fn((h, w, 1), |(y, x, _)| (10 * y + x) as f64)
    }

    #[test]
    fn full_scale_region_count() {
        let g = Array3::<f64>::zeros((530, 900, 1));
        let p = partition_values(g.view(), 10, 10).unwrap();
        assert_eq!((p.rows, p.cols, p.len()), (53, 90, 4770));
        assert_eq!(p.regions[0].dim(), (10, 10, 1));
    }

    #[test]
    fn single_region_is_identity() {
        let g = indexed_grid(10, 10);
        let p = partition_values(g.view(), 10, 10).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p.regions[0], g);
        assert_eq!(merge_regions(&p).unwrap(), g);
    }

    #[test]
    fn region_three_of_four_by_six() {
        let g = indexed_grid(4, 6);
        let p = partition_values(g.view(), 2, 3).unwrap();
        // enumerate cells of region 3: r_h = 1, r_w = 1
        for y in 0..2 {
            for x in 0..3 {
                assert_eq!(p.regions[3][[y, x, 0]], (10 * (y + 2) + (x + 3)) as f64);
            }
        }
    }

    #[test]
    fn non_divisible_dims_are_rejected() {
        let g = Array3::<f64>::zeros((10, 12, 1));
        match partition_values(g.view(), 3, 4) {
            Err(UxError::Dimension { axis: "height", .. }) => {}
            other => panic!("{other:?}"),
        }
        match partition_values(g.view(), 5, 5) {
            Err(UxError::Dimension { axis: "width", .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn merge_rejects_inconsistent_partition() {
        let g = indexed_grid(4, 6);
        let mut p = partition_values(g.view(), 2, 3).unwrap();
        p.regions.pop();
        assert!(matches!(merge_regions(&p), Err(UxError::Structure(_))));
    }

    #[test]
    fn grid_rejects_non_finite() {
        let mut v = Array3::<f64>::zeros((2, 2, 1));
        v[[0, 1, 0]] = f64::NAN;
        assert!(WeatherGrid::from_values(v, t0()).is_err());
    }

    fn ev(rows: (f64, f64), cols: (f64, f64), types: &[&str]) -> EventRecord {
        // grid coordinates on unit bounds with a 10x10 grid
        let b = GeoBounds::unit();
        let corner = |r: f64, c: f64| {
            let (lat, lon) = b.to_geo(r, c, 10, 10);
            [lat, lon]
        };
        EventRecord {
            timestamp: t0(),
            vertices: [
                corner(rows.0, cols.0),
                corner(rows.0, cols.1),
                corner(rows.1, cols.1),
                corner(rows.1, cols.0),
            ],
            types: types.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn empty_and_full_masks() {
        let b = GeoBounds::unit();
        assert_eq!(rasterize_events(&[], 10, 10, &b).unwrap().count(), 0);
        let full = ev((0.0, 10.0), (0.0, 10.0), &["flood"]);
        assert_eq!(rasterize_events(&[full], 10, 10, &b).unwrap().count(), 100);
    }

    #[test]
    fn overlapping_boxes_match_cell_oracle() {
        let b = GeoBounds::unit();
        let e1 = ev((1.5, 4.2), (2.3, 6.7), &["flood"]);
        let e2 = ev((3.1, 8.9), (5.5, 9.3), &["hail"]);
        let mask = rasterize_events(&[e1, e2], 10, 10, &b).unwrap();
        // a cell [h, h+1) x [w, w+1) is covered iff it intersects a box
        let inside = |h: usize, w: usize, r: (f64, f64), c: (f64, f64)| {
            (h as f64) <= r.1 && (h as f64 + 1.0) > r.0 && (w as f64) <= c.1 && (w as f64 + 1.0) > c.0
        };
        let mut expected = 0;
        for h in 0..10 {
            for w in 0..10 {
                let hit = inside(h, w, (1.5, 4.2), (2.3, 6.7)) || inside(h, w, (3.1, 8.9), (5.5, 9.3));
                assert_eq!(mask.get(h, w), hit, "cell {h},{w}");
                expected += hit as usize;
            }
        }
        assert_eq!(mask.count(), expected);
    }

    #[test]
    fn out_of_bounds_vertex_names_event() {
        let b = GeoBounds::unit();
        let mut bad = ev((0.0, 2.0), (0.0, 2.0), &["flood"]);
        bad.vertices[2] = [1.5, 0.5];
        let good = ev((0.0, 2.0), (0.0, 2.0), &["flood"]);
        match rasterize_events(&[good, bad], 10, 10, &b) {
            Err(UxError::Bounds { event: 1 }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn labels_disjoint_and_compound() {
        let b = GeoBounds::unit();
        let g = Array3::<f64>::zeros((10, 10, 1));
        let p = partition_values(g.view(), 5, 5).unwrap();
        let reg = EventRegistry::new(vec!["flood".into(), "tornado".into()]).unwrap();

        let none = region_labels(&p, &ExtremeMask::empty(10, 10), &[], &reg, &b).unwrap();
        assert!(none.iter().all(|l| l == &[false, false, true]));

        // region 0 covers rows 0..5, cols 0..5; max vertex coordinate 4.5 stays inside it
        let flood = ev((0.0, 4.5), (0.0, 4.5), &["flood"]);
        let mask = rasterize_events(std::slice::from_ref(&flood), 10, 10, &b).unwrap();
        let l = region_labels(&p, &mask, std::slice::from_ref(&flood), &reg, &b).unwrap();
        assert_eq!(l[0], vec![true, false, false]);
        for lab in &l[1..] {
            assert_eq!(lab, &vec![false, false, true]);
        }

        let tornado = ev((1.0, 2.0), (1.0, 3.0), &["tornado"]);
        let both = vec![flood, tornado];
        let mask = rasterize_events(&both, 10, 10, &b).unwrap();
        let l = region_labels(&p, &mask, &both, &reg, &b).unwrap();
        assert_eq!(l[0], vec![true, true, false]);
    }

    #[test]
    fn unknown_type_is_rejected() {
        let b = GeoBounds::unit();
        let g = Array3::<f64>::zeros((10, 10, 1));
        let p = partition_values(g.view(), 5, 5).unwrap();
        let reg = EventRegistry::new(vec!["flood".into()]).unwrap();
        let e = ev((0.0, 1.0), (0.0, 1.0), &["hail"]);
        let mask = rasterize_events(std::slice::from_ref(&e), 10, 10, &b).unwrap();
        assert!(matches!(region_labels(&p, &mask, &[e], &reg, &b), Err(UxError::UnknownEventType(_))));
    }

    #[test]
    fn calendar_indices_validate() {
        assert_eq!(CalendarKey { month: 12, day: 31, hour: 23 }.indices().unwrap(), (11, 30, 23));
        assert!(CalendarKey { month: 13, day: 1, hour: 0 }.indices().is_err());
        assert!(CalendarKey { month: 1, day: 0, hour: 0 }.indices().is_err());
        assert!(CalendarKey { month: 1, day: 1, hour: 24 }.indices().is_err());
    }
}
