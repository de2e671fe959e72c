//! Fourier analysis of gridded regions: transforms, spectral energy, sorted
//! radial frequencies, energy-ratio curves and the High-Frequency Area (HFA).

mod dist;

pub use dist::{kde_1d, wasserstein1, KdeCurve, KDE_LATTICE};

use ndarray::{Array2, Array3, ArrayView3};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Result, UxError};
use crate::fft;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TransformKind {
    /// All `h x w` bins.
    Full,
    /// Non-redundant `h x (w/2+1)` bins of a real field.
    RealInput,
}

/// Frequency-domain representation of an `h x w x C` real field.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub kind: TransformKind,
    /// Spatial height and width of the transformed field.
    pub height: usize,
    pub width: usize,
    /// Real and imaginary parts, each `h x w_f x C`.
    pub re: Array3<f64>,
    pub im: Array3<f64>,
}

impl Spectrum {
    pub fn stored_width(&self) -> usize {
        self.re.dim().1
    }

    pub fn channels(&self) -> usize {
        self.re.dim().2
    }

    pub fn bin_count(&self) -> usize {
        self.re.dim().0 * self.re.dim().1
    }

    pub fn zeros(kind: TransformKind, height: usize, width: usize, channels: usize) -> Self {
        let wf = stored_width(kind, width);
        Spectrum {
            kind,
            height,
            width,
            re: Array3::zeros((height, wf, channels)),
            im: Array3::zeros((height, wf, channels)),
        }
    }
}

pub fn stored_width(kind: TransformKind, w: usize) -> usize {
    match kind {
        TransformKind::Full => w,
        TransformKind::RealInput => fft::half_width(w),
    }
}

fn plane(x: &ArrayView3<f64>, c: usize) -> Vec<f64> {
    let (h, w, _) = x.dim();
    let mut p = Vec::with_capacity(h * w);
    for y in 0..h {
        for z in 0..w {
            p.push(x[[y, z, c]]);
        }
    }
    p
}

/// Unnormalized forward DFT, channel by channel.
pub fn forward_transform(region: ArrayView3<f64>, kind: TransformKind) -> Spectrum {
    let (h, w, c) = region.dim();
    let mut out = Spectrum::zeros(kind, h, w, c);
    let wf = out.stored_width();
    for ch in 0..c {
        let p = plane(&region, ch);
        match kind {
            TransformKind::Full => {
                let full = fft::fft2_real(&p, h, w);
                for k in 0..h {
                    for l in 0..w {
                        out.re[[k, l, ch]] = full[k * w + l].re;
                        out.im[[k, l, ch]] = full[k * w + l].im;
                    }
                }
            }
            TransformKind::RealInput => {
                let (re, im) = fft::rfft2(&p, h, w);
                for k in 0..h {
                    for l in 0..wf {
                        out.re[[k, l, ch]] = re[k * wf + l];
                        out.im[[k, l, ch]] = im[k * wf + l];
                    }
                }
            }
        }
    }
    out
}

/// Inverse DFT with the `1/(hw)` factor; returns the real part.
pub fn inverse_transform(spec: &Spectrum) -> Result<Array3<f64>> {
    let (h, w) = (spec.height, spec.width);
    let wf = stored_width(spec.kind, w);
    let (sh, sw, c) = spec.re.dim();
    if sh != h || sw != wf {
        return Err(UxError::dim("spectrum", format!("stored {sh}x{sw}, expected {h}x{wf}")));
    }
    if spec.im.dim() != spec.re.dim() {
        return Err(UxError::dim("spectrum", "real and imaginary parts differ in shape"));
    }
    let mut out = Array3::zeros((h, w, c));
    for ch in 0..c {
        let values = match spec.kind {
            TransformKind::Full => {
                let mut data: Vec<Complex64> = (0..h * w)
                    .map(|i| Complex64::new(spec.re[[i / w, i % w, ch]], spec.im[[i / w, i % w, ch]]))
                    .collect();
                fft::fft2_in_place(&mut data, h, w, true);
                let norm = 1.0 / (h * w) as f64;
                data.iter().map(|z| z.re * norm).collect::<Vec<_>>()
            }
            TransformKind::RealInput => {
                let re: Vec<f64> = (0..h * wf).map(|i| spec.re[[i / wf, i % wf, ch]]).collect();
                let im: Vec<f64> = (0..h * wf).map(|i| spec.im[[i / wf, i % wf, ch]]).collect();
                fft::irfft2(&re, &im, h, w)
            }
        };
        for (i, v) in values.into_iter().enumerate() {
            out[[i / w, i % w, ch]] = v;
        }
    }
    Ok(out)
}

/// Per-bin energy `R^2 + I^2`. Half-spectrum bins standing for a mirrored
/// pair are doubled so totals match the full transform.
pub fn spectral_energy(spec: &Spectrum) -> Array3<f64> {
    let mut e = &spec.re * &spec.re + &spec.im * &spec.im;
    if spec.kind == TransformKind::RealInput {
        for ((_, l, _), v) in e.indexed_iter_mut() {
            *v *= fft::hermitian_weight(l, spec.width);
        }
    }
    e
}

/// Radial frequencies of every stored bin plus their ascending order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadialFrequencyIndex {
    pub height: usize,
    pub width: usize,
    pub kind: TransformKind,
    /// Radial frequency per bin in flat `k * w_f + l` order (cycles/sample).
    pub radii: Vec<f64>,
    /// `order[s]` is the flat bin holding the `s`-th smallest radius.
    pub order: Vec<usize>,
    /// Min-max normalized radii in sorted order.
    pub normalized_sorted: Vec<f64>,
    /// Min-max normalized radius of each bin in flat order.
    pub normalized_by_bin: Vec<f64>,
}

impl RadialFrequencyIndex {
    pub fn bin_count(&self) -> usize {
        self.radii.len()
    }

    pub fn sorted_radii(&self) -> Vec<f64> {
        self.order.iter().map(|&j| self.radii[j]).collect()
    }
}

/// Frequency of index `k` along an axis of length `n` (two-sided mapping).
pub fn axis_frequency(k: usize, n: usize) -> f64 {
    k.min(n - k) as f64 / n as f64
}

/// Builds the radial index for an `h x w` field. Ties keep flat-index order.
pub fn radial_index(h: usize, w: usize, kind: TransformKind) -> RadialFrequencyIndex {
    assert!(h >= 1 && w >= 1);
    let wf = stored_width(kind, w);
    let mut radii = Vec::with_capacity(h * wf);
    for k in 0..h {
        let fk = axis_frequency(k, h);
        for l in 0..wf {
            let fl = match kind {
                TransformKind::Full => axis_frequency(l, w),
                TransformKind::RealInput => l as f64 / w as f64,
            };
            radii.push((fk * fk + fl * fl).sqrt());
        }
    }
    let mut order: Vec<usize> = (0..radii.len()).collect();
    order.sort_by(|&a, &b| radii[a].total_cmp(&radii[b]));
    let lo = radii[order[0]];
    let hi = radii[*order.last().unwrap()];
    let norm = |r: f64| if hi > lo { (r - lo) / (hi - lo) } else { 0.0 };
    let normalized_sorted = order.iter().map(|&j| norm(radii[j])).collect();
    let normalized_by_bin = radii.iter().map(|&r| norm(r)).collect();
    RadialFrequencyIndex { height: h, width: w, kind, radii, order, normalized_sorted, normalized_by_bin }
}

/// Cumulative energy share of the first `K + 1` sorted bins, `K = 0..B`.
pub fn energy_ratio_curve(energy: &Array3<f64>, idx: &RadialFrequencyIndex, channel: usize) -> Result<Vec<f64>> {
    let wf = energy.dim().1;
    let vals: Vec<f64> = idx.order.iter().map(|&j| energy[[j / wf, j % wf, channel]]).collect();
    ratio_curve(&vals).ok_or(UxError::DegenerateSpectrum { channel })
}

fn ratio_curve(sorted_energy: &[f64]) -> Option<Vec<f64>> {
    let total: f64 = sorted_energy.iter().sum();
    if total <= 0.0 || !total.is_finite() {
        return None;
    }
    let mut acc = 0.0;
    Some(
        sorted_energy
            .iter()
            .map(|e| {
                acc += e;
                acc / total
            })
            .collect(),
    )
}

/// Area above the right-continuous step curve `f(t) = eta[K]` on
/// `[p[K], p[K+1])`, integrated over `[p[0], p[B-1]]`.
pub fn high_frequency_area(eta: &[f64], positions: &[f64]) -> f64 {
    assert_eq!(eta.len(), positions.len());
    if positions.len() < 2 {
        return 0.0;
    }
    let s: f64 = eta
        .iter()
        .zip(positions.windows(2))
        .map(|(e, p)| (1.0 - e) * (p[1] - p[0]))
        .sum();
    s.clamp(0.0, 1.0)
}

/// HFA of every channel of a region.
pub fn region_hfa(region: ArrayView3<f64>, idx: &RadialFrequencyIndex) -> Result<Vec<f64>> {
    let spec = forward_transform(region, idx.kind);
    let e = spectral_energy(&spec);
    (0..spec.channels())
        .map(|c| Ok(high_frequency_area(&energy_ratio_curve(&e, idx, c)?, &idx.normalized_sorted)))
        .collect()
}

/// HFA of band-weight profiles: each of the `N` bands (rows, ascending
/// frequency) acts as an energy bin placed at its midpoint `(n + 1/2)/N`.
pub fn hfa_of_weights(weights: &Array2<f64>) -> Result<Vec<f64>> {
    let (n, c) = weights.dim();
    if weights.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(UxError::Domain("band weights must be finite and non-negative".into()));
    }
    let positions: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
    (0..c)
        .map(|ch| {
            let col: Vec<f64> = (0..n).map(|i| weights[[i, ch]]).collect();
            let eta = ratio_curve(&col).ok_or(UxError::DegenerateSpectrum { channel: ch })?;
            Ok(high_frequency_area(&eta, &positions))
        })
        .collect()
}
