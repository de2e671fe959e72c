//! One-dimensional distribution tools for comparing HFA samples.

use serde::{Deserialize, Serialize};

use crate::error::{Result, UxError};

/// Evaluation lattice size of [`kde_1d`].
pub const KDE_LATTICE: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KdeCurve {
    pub lattice: Vec<f64>,
    pub density: Vec<f64>,
    pub bandwidth: f64,
}

impl KdeCurve {
    /// Trapezoid integral of the density over the lattice.
    pub fn integral(&self) -> f64 {
        self.lattice
            .windows(2)
            .zip(self.density.windows(2))
            .map(|(x, y)| 0.5 * (y[0] + y[1]) * (x[1] - x[0]))
            .sum()
    }
}

fn sample_std(samples: &[f64]) -> f64 {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    (samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Gaussian kernel density estimate on a fixed lattice spanning
/// `[min - 3 bw, max + 3 bw]`. Bandwidth defaults to Scott's rule.
pub fn kde_1d(samples: &[f64], bandwidth: Option<f64>) -> Result<KdeCurve> {
    if samples.len() < 2 {
        return Err(UxError::DegenerateSample(format!("{} samples, need at least 2", samples.len())));
    }
    let bw = match bandwidth {
        Some(b) if b > 0.0 && b.is_finite() => b,
        Some(b) => return Err(UxError::DegenerateSample(format!("bandwidth {b}"))),
        None => {
            let sd = sample_std(samples);
            if sd <= 0.0 || !sd.is_finite() {
                return Err(UxError::DegenerateSample("zero variance".into()));
            }
            sd * (samples.len() as f64).powf(-0.2)
        }
    };
    let lo = samples.iter().cloned().fold(f64::INFINITY, f64::min) - 3.0 * bw;
    let hi = samples.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 3.0 * bw;
    let step = (hi - lo) / (KDE_LATTICE - 1) as f64;
    let norm = 1.0 / (samples.len() as f64 * bw * (2.0 * std::f64::consts::PI).sqrt());
    let lattice: Vec<f64> = (0..KDE_LATTICE).map(|i| lo + step * i as f64).collect();
    let density = lattice
        .iter()
        .map(|&x| {
            norm * samples
                .iter()
                .map(|&s| {
                    let z = (x - s) / bw;
                    (-0.5 * z * z).exp()
                })
                .sum::<f64>()
        })
        .collect();
    Ok(KdeCurve { lattice, density, bandwidth: bw })
}

/// Wasserstein-1 distance between two equal-weight empirical measures,
/// integrating the gap between their quantile functions exactly.
pub fn wasserstein1(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(UxError::EmptySample);
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len(), b.len());
    // walk the merged breakpoints i/na and j/nb with exact rational comparison
    let (mut i, mut j) = (0usize, 0usize);
    let mut prev = 0.0;
    let mut total = 0.0;
    while i < na && j < nb {
        // next breakpoints (i+1)/na and (j+1)/nb compared as (i+1)*nb vs (j+1)*na
        let (ka, kb) = ((i + 1) * nb, (j + 1) * na);
        let next = if ka <= kb { (i + 1) as f64 / na as f64 } else { (j + 1) as f64 / nb as f64 };
        total += (a[i] - b[j]).abs() * (next - prev);
        prev = next;
        if ka <= kb {
            i += 1;
        }
        if kb <= ka {
            j += 1;
        }
    }
    Ok(total)
}
