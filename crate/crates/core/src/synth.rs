//! Seeded synthetic datasets: smooth power-law fields that drift and decay
//! hour to hour, with boxed high-frequency perturbations standing in for
//! extreme events.
//!
//! Evolution is linear. With base field `B_t`, advection `(dy, dx)` and decay
//! `rho`,
//!
//! ```text
//! B_{t+1} = rho * roll(B_t, dy, dx) + sqrt(1 - rho^2) * fresh smooth noise
//! X_t     = B_t + sum of perturbations of events active at t
//! ```
//!
//! Every event keeps its box and its perturbation pattern for
//! `event_duration` hours, so a perturbation seen at `t` persists into the
//! next-hour target.

use chrono::{DateTime, Duration, TimeZone, Utc};
use ndarray::{s, Array2, Array3};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, UxError};
use crate::fft;
use crate::grid::{rasterize_events, EventRecord, ExtremeMask, GeoBounds, WeatherGrid};
use crate::spectral::axis_frequency;

const TYPE_NAMES: [&str; 4] = ["storm", "heatwave", "gale", "flood"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub timesteps: usize,
    /// Power spectrum of the base field falls off as `radius^-slope`.
    pub slope: f64,
    /// New events started at each timestep.
    pub events_per_step: usize,
    pub event_duration: usize,
    pub box_min: usize,
    pub box_max: usize,
    /// Standard deviation of the injected perturbation.
    pub amplitude: f64,
    /// Radial band `[lo, hi]` of the perturbation, in cycles per cell.
    pub band_low: f64,
    pub band_high: f64,
    pub event_types: usize,
    pub advection: (i64, i64),
    pub decay: f64,
    pub bounds: GeoBounds,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            height: 60,
            width: 60,
            channels: 2,
            timesteps: 50,
            slope: 3.0,
            events_per_step: 2,
            event_duration: 2,
            box_min: 6,
            box_max: 14,
            amplitude: 0.6,
            band_low: 0.25,
            band_high: 0.5,
            event_types: 2,
            advection: (0, 1),
            decay: 0.95,
            bounds: GeoBounds { lat_min: 25.0, lat_max: 50.0, lon_min: -125.0, lon_max: -65.0 },
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.channels == 0 || self.timesteps == 0 {
            return Err(UxError::Config("grid dimensions and timestep count must be positive".into()));
        }
        if self.events_per_step > 0 {
            if self.box_min == 0 || self.box_min > self.box_max || self.box_max > self.height.min(self.width) {
                return Err(UxError::Config(format!(
                    "event boxes {}..={} do not fit a {}x{} grid",
                    self.box_min, self.box_max, self.height, self.width
                )));
            }
            if self.event_types == 0 || self.event_duration == 0 {
                return Err(UxError::Config("events need at least one type and a positive duration".into()));
            }
        }
        if !(self.amplitude >= 0.0 && self.amplitude.is_finite()) {
            return Err(UxError::Config(format!("amplitude {} must be finite and >= 0", self.amplitude)));
        }
        if !(0.0 <= self.band_low && self.band_low < self.band_high) {
            return Err(UxError::Config(format!("band [{}, {}] is empty", self.band_low, self.band_high)));
        }
        if !(self.slope >= 0.0 && self.slope.is_finite() && (0.0..=1.0).contains(&self.decay)) {
            return Err(UxError::Config("slope must be >= 0 and decay in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn type_names(&self) -> Vec<String> {
        (0..self.event_types)
            .map(|i| TYPE_NAMES.get(i).map(|s| s.to_string()).unwrap_or_else(|| format!("type{i}")))
            .collect()
    }

    pub fn start_time() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2022, 1, 1, 0, 0, 0).unwrap()
    }
}

/// Hourly grids with the events active at each of them.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub grids: Vec<WeatherGrid>,
    pub events: Vec<Vec<EventRecord>>,
}

impl Dataset {
    pub fn masks(&self) -> Result<Vec<ExtremeMask>> {
        self.grids
            .iter()
            .zip(&self.events)
            .map(|(g, e)| rasterize_events(e, g.height(), g.width(), g.bounds()))
            .collect()
    }
}

/// Unit-variance real field whose spectrum is white noise times `gain(radius)`.
fn shaped_noise(h: usize, w: usize, rng: &mut ChaCha8Rng, gain: impl Fn(f64) -> f64) -> Array2<f64> {
    let white: Vec<f64> = (0..h * w).map(|_| StandardNormal.sample(rng)).collect();
    let mut spec = fft::fft2_real(&white, h, w);
    for k in 0..h {
        for l in 0..w {
            let (fk, fl) = (axis_frequency(k, h), axis_frequency(l, w));
            spec[k * w + l] *= gain((fk * fk + fl * fl).sqrt());
        }
    }
    fft::fft2_in_place(&mut spec, h, w, true);
    let vals: Vec<f64> = spec.iter().map(|z: &Complex64| z.re).collect();
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
    let scale = if sd > 0.0 { 1.0 / sd } else { 0.0 };
    Array2::from_shape_vec((h, w), vals.iter().map(|v| (v - mean) * scale).collect()).unwrap()
}

fn smooth_field(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Array3<f64> {
    let (h, w, c) = (spec.height, spec.width, spec.channels);
    let slope = spec.slope;
    let mut out = Array3::zeros((h, w, c));
    for ch in 0..c {
        let f = shaped_noise(h, w, rng, |r| if r > 0.0 { r.powf(-slope / 2.0) } else { 0.0 });
        out.slice_mut(s![.., .., ch]).assign(&f);
    }
    out
}

fn roll(x: &Array3<f64>, dy: i64, dx: i64) -> Array3<f64> {
    let (h, w, _) = x.dim();
    Array3::from_shape_fn(x.dim(), |(y, z, c)| {
        let sy = (y as i64 - dy).rem_euclid(h as i64) as usize;
        let sx = (z as i64 - dx).rem_euclid(w as i64) as usize;
        x[[sy, sx, c]]
    })
}

struct ActiveEvent {
    rows: (usize, usize),
    cols: (usize, usize),
    types: Vec<String>,
    pattern: Array3<f64>,
    remaining: usize,
}

/// Draws a dataset; identical specs give identical datasets.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (h, w, c) = (spec.height, spec.width, spec.channels);
    let names: Vec<String> = (0..c).map(|i| format!("v{i}")).collect();
    let types = spec.type_names();
    let innovation = (1.0 - spec.decay * spec.decay).sqrt();
    let mut base = smooth_field(spec, &mut rng);
    let mut active: Vec<ActiveEvent> = Vec::new();
    let (mut grids, mut events) = (Vec::with_capacity(spec.timesteps), Vec::with_capacity(spec.timesteps));
    for t in 0..spec.timesteps {
        if t > 0 {
            let fresh = smooth_field(spec, &mut rng);
            base = roll(&base, spec.advection.0, spec.advection.1) * spec.decay + fresh * innovation;
        }
        active.retain(|e| e.remaining > 0);
        for _ in 0..spec.events_per_step {
            let bh = rng.random_range(spec.box_min..=spec.box_max);
            let bw = rng.random_range(spec.box_min..=spec.box_max);
            let r0 = rng.random_range(0..=h - bh);
            let c0 = rng.random_range(0..=w - bw);
            let mut ev_types = vec![types[rng.random_range(0..types.len())].clone()];
            // occasional compound event
            if types.len() > 1 && rng.random::<f64>() < 0.15 {
                let other = types[rng.random_range(0..types.len())].clone();
                if !ev_types.contains(&other) {
                    ev_types.push(other);
                }
            }
            let mut pattern = Array3::zeros((h, w, c));
            for ch in 0..c {
                let (lo, hi) = (spec.band_low, spec.band_high);
                let f = shaped_noise(h, w, &mut rng, |r| if (lo..=hi).contains(&r) { 1.0 } else { 0.0 });
                pattern.slice_mut(s![.., .., ch]).assign(&f);
            }
            active.push(ActiveEvent {
                rows: (r0, r0 + bh - 1),
                cols: (c0, c0 + bw - 1),
                types: ev_types,
                pattern,
                remaining: spec.event_duration,
            });
        }
        let timestamp = SyntheticSpec::start_time() + Duration::hours(t as i64);
        let mut values = base.clone();
        let mut records = Vec::new();
        for e in active.iter_mut() {
            let (r0, r1) = e.rows;
            let (c0, c1) = e.cols;
            let mut region = values.slice_mut(s![r0..=r1, c0..=c1, ..]);
            region.scaled_add(spec.amplitude, &e.pattern.slice(s![r0..=r1, c0..=c1, ..]));
            let corner = |r: usize, col: usize| {
                let (lat, lon) = spec.bounds.to_geo(r as f64 + 0.5, col as f64 + 0.5, h, w);
                [lat, lon]
            };
            records.push(EventRecord {
                timestamp,
                vertices: [corner(r0, c0), corner(r0, c1), corner(r1, c1), corner(r1, c0)],
                types: e.types.clone(),
            });
            e.remaining -= 1;
        }
        grids.push(WeatherGrid::new(values, names.clone(), timestamp, spec.bounds, false)?);
        events.push(records);
    }
    Ok(Dataset { grids, events })
}
