//! Adaptive frequency modulation: a bank of Beta filters over logarithmic
//! bands of sorted radial frequency, spatiotemporal band weights, and the
//! FFN residual applied after the inverse transform.
//!
//! Each operation exists twice. The direct functions work on `ndarray`
//! values one region at a time; [`afm_graph`] builds the same computation on
//! an autodiff graph for a batch of regions and is what training uses.

use std::ops::Range;

use ndarray::{Array2, Array3, Array4, ArrayView3, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{beta_weight, check_params, param_set, Graph, Init, Tensor, Var};
use crate::error::{Result, UxError};
use crate::grid::CalendarKey;
use crate::layers;
use crate::spectral::{forward_transform, inverse_transform, radial_index, RadialFrequencyIndex, Spectrum, TransformKind};

/// Default upper bound on how far the spread can rise above 2.
pub const DEFAULT_MAX_KAPPA: f64 = 70.0;

/// Shape and hyper-parameters of one modulation layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AfmConfig {
    pub region_height: usize,
    pub region_width: usize,
    pub channels: usize,
    /// Number of Beta filters `N`.
    pub filters: usize,
    /// Band growth rate `gamma >= 1`.
    pub growth: f64,
    pub max_kappa: f64,
    /// Width of the calendar embeddings.
    pub time_dim: usize,
}

/// Contiguous bands over the sorted radial positions, smallest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandPartition {
    pub growth: f64,
    pub sizes: Vec<usize>,
    /// Lower median of each band's normalized sorted radii.
    pub modes: Vec<f64>,
}

impl BandPartition {
    pub fn filters(&self) -> usize {
        self.sizes.len()
    }

    pub fn bin_count(&self) -> usize {
        self.sizes.iter().sum()
    }

    /// Sorted-position range covered by band `n`.
    pub fn range(&self, n: usize) -> Range<usize> {
        let start: usize = self.sizes[..n].iter().sum();
        start..start + self.sizes[n]
    }
}

/// Integer band sizes: geometric ideals `s * gamma^n` scaled to sum to
/// `bin_count`, rounded by largest remainder with every band at least 1.
pub fn band_sizes(bin_count: usize, n: usize, gamma: f64) -> Result<Vec<usize>> {
    if n == 0 || bin_count < n {
        return Err(UxError::Config(format!("{bin_count} bins cannot hold {n} bands")));
    }
    if !(gamma >= 1.0 && gamma.is_finite()) {
        return Err(UxError::Config(format!("band growth {gamma} must be a finite value >= 1")));
    }
    let weights: Vec<f64> = (0..n).map(|i| gamma.powi(i as i32)).collect();
    let total: f64 = weights.iter().sum();
    let ideal: Vec<f64> = weights.iter().map(|w| w * bin_count as f64 / total).collect();
    let mut sizes: Vec<usize> = ideal.iter().map(|v| (v.floor() as usize).max(1)).collect();
    let mut rem: Vec<f64> = ideal.iter().zip(&sizes).map(|(v, &s)| v - s as f64).collect();
    let mut sum: usize = sizes.iter().sum();
    while sum < bin_count {
        // largest remainder, later band on ties
        let i = (0..n).rev().max_by(|&a, &b| rem[a].total_cmp(&rem[b])).unwrap();
        sizes[i] += 1;
        rem[i] -= 1.0;
        sum += 1;
    }
    while sum > bin_count {
        let i = (0..n).filter(|&i| sizes[i] > 1).min_by(|&a, &b| rem[a].total_cmp(&rem[b])).unwrap();
        sizes[i] -= 1;
        rem[i] += 1.0;
        sum -= 1;
    }
    sizes.sort_unstable();
    Ok(sizes)
}

/// Builds the partition over `normalized_sorted` (ascending normalized radii).
pub fn build_band_partition(normalized_sorted: &[f64], n: usize, gamma: f64) -> Result<BandPartition> {
    let sizes = band_sizes(normalized_sorted.len(), n, gamma)?;
    let mut modes = Vec::with_capacity(n);
    let mut start = 0;
    for &s in &sizes {
        modes.push(normalized_sorted[start + (s - 1) / 2]);
        start += s;
    }
    Ok(BandPartition { growth: gamma, sizes, modes })
}

param_set! {
    /// Trainable tensors of a modulation layer.
    pub struct AfmParams / AfmVars {
        w_kappa, b_kappa,
        conv_w, conv_b,
        emb_month, emb_day, emb_hour,
        w_t, b_t,
        w_w, b_w,
        ln_gamma, ln_beta,
        ffn_w1, ffn_b1, ffn_w2, ffn_b2,
    }
}

impl AfmParams {
    fn build(cfg: &AfmConfig, mut make: impl FnMut(&[usize], Init) -> Tensor) -> Self {
        let (c, n, d) = (cfg.channels, cfg.filters, cfg.time_dim);
        AfmParams {
            w_kappa: make(&[2 * c, n], Init::Normal(0.02)),
            b_kappa: make(&[n], Init::Zeros),
            conv_w: make(&[9 * c, n * c], Init::FanIn(9 * c, 1.0)),
            conv_b: make(&[n * c], Init::Zeros),
            emb_month: make(&[12, d], Init::Normal(0.02)),
            emb_day: make(&[31, d], Init::Normal(0.02)),
            emb_hour: make(&[24, d], Init::Normal(0.02)),
            w_t: make(&[d, n], Init::FanIn(d, 1.0)),
            b_t: make(&[n], Init::Zeros),
            w_w: make(&[2 * n, n], Init::FanIn(2 * n, 1.0)),
            b_w: make(&[n], Init::Zeros),
            ln_gamma: make(&[c], Init::Ones),
            ln_beta: make(&[c], Init::Zeros),
            ffn_w1: make(&[c, 4 * c], Init::FanIn(c, 1.0)),
            ffn_b1: make(&[4 * c], Init::Zeros),
            ffn_w2: make(&[4 * c, c], Init::FanIn(4 * c, 0.1)),
            ffn_b2: make(&[c], Init::Zeros),
        }
    }

    pub fn init<R: Rng + ?Sized>(cfg: &AfmConfig, rng: &mut R) -> Self {
        Self::build(cfg, |s, i| i.make(s, rng))
    }

    /// All-zero parameters (layer-norm scale included).
    pub fn zeros(cfg: &AfmConfig) -> Self {
        Self::build(cfg, |s, _| Tensor::zeros(s))
    }

    pub fn validate(&self, cfg: &AfmConfig) -> Result<()> {
        check_params(self, &Self::zeros(cfg))
    }
}

/// Per-region Beta filters: one mode and one spread per band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaFilterBank {
    pub modes: Vec<f64>,
    pub kappas: Vec<f64>,
}

impl BetaFilterBank {
    pub fn new(modes: Vec<f64>, kappas: Vec<f64>) -> Result<Self> {
        if modes.len() != kappas.len() {
            return Err(UxError::dim("filters", format!("{} modes but {} spreads", modes.len(), kappas.len())));
        }
        for (&m, &k) in modes.iter().zip(&kappas) {
            check_filter_domain(m, k, m)?;
        }
        Ok(BetaFilterBank { modes, kappas })
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn alpha(&self, n: usize) -> f64 {
        self.modes[n] * (self.kappas[n] - 2.0) + 1.0
    }

    pub fn beta(&self, n: usize) -> f64 {
        (1.0 - self.modes[n]) * (self.kappas[n] - 2.0) + 1.0
    }

    pub fn weight(&self, n: usize, x: f64) -> f64 {
        beta_weight(self.modes[n], self.kappas[n], x)
    }
}

fn check_filter_domain(mode: f64, kappa: f64, x: f64) -> Result<()> {
    if !kappa.is_finite() || kappa < 2.0 {
        return Err(UxError::Domain(format!("spread {kappa} must be finite and >= 2")));
    }
    if !(0.0..=1.0).contains(&mode) || !(0.0..=1.0).contains(&x) {
        return Err(UxError::Domain(format!("mode {mode} and frequency {x} must lie in [0, 1]")));
    }
    Ok(())
}

/// Normalized Beta filter weight, peaking at 1 when `x == mode`.
pub fn beta_filter_eval(mode: f64, kappa: f64, x: f64) -> Result<f64> {
    check_filter_domain(mode, kappa, x)?;
    Ok(beta_weight(mode, kappa, x))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Spread of each filter for one region's spectrum: the `[R : I]` channels
/// are projected per bin, averaged over bins and squashed into
/// `(2, 2 + max_kappa)`.
pub fn compute_spread(spec: &Spectrum, p: &AfmParams, max_kappa: f64) -> Result<Vec<f64>> {
    let (h, wf, c) = spec.re.dim();
    let ws = p.w_kappa.shape();
    if ws[0] != 2 * c {
        return Err(UxError::dim("channels", format!("spread head expects {} inputs, spectrum has {}", ws[0], 2 * c)));
    }
    let n = ws[1];
    let wd = p.w_kappa.data();
    let mut acc = vec![0.0; n];
    Zip::indexed(&spec.re).and(&spec.im).for_each(|(_, _, ci), &r, &i| {
        for (j, a) in acc.iter_mut().enumerate() {
            *a += r * wd[ci * n + j] + i * wd[(c + ci) * n + j];
        }
    });
    let bins = (h * wf) as f64;
    Ok(acc.iter().zip(p.b_kappa.data()).map(|(a, b)| 2.0 + max_kappa * sigmoid(a / bins + b)).collect())
}

/// `N` filtered copies of a spectrum, each `[h, w_f, C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilteredBands {
    pub kind: TransformKind,
    pub height: usize,
    pub width: usize,
    pub re: Array4<f64>,
    pub im: Array4<f64>,
}

/// Multiplies every bin by each filter's weight at the bin's normalized radius.
pub fn apply_filters(spec: &Spectrum, bank: &BetaFilterBank, idx: &RadialFrequencyIndex) -> Result<FilteredBands> {
    if idx.height != spec.height || idx.width != spec.width || idx.kind != spec.kind {
        return Err(UxError::dim(
            "spectrum",
            format!("index for {}x{} does not match spectrum {}x{}", idx.height, idx.width, spec.height, spec.width),
        ));
    }
    let (h, wf, c) = spec.re.dim();
    let n = bank.len();
    let mut re = Array4::zeros((n, h, wf, c));
    let mut im = Array4::zeros((n, h, wf, c));
    for f in 0..n {
        for k in 0..h {
            for l in 0..wf {
                let wgt = bank.weight(f, idx.normalized_by_bin[k * wf + l]);
                for ci in 0..c {
                    re[[f, k, l, ci]] = wgt * spec.re[[k, l, ci]];
                    im[[f, k, l, ci]] = wgt * spec.im[[k, l, ci]];
                }
            }
        }
    }
    Ok(FilteredBands { kind: spec.kind, height: spec.height, width: spec.width, re, im })
}

fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in v.iter_mut() {
        *x /= s;
    }
}

/// Band weights `[N, C]` for a raw region and its calendar time; each
/// column is a probability vector over bands.
pub fn compute_band_weights(region: ArrayView3<f64>, cal: &CalendarKey, p: &AfmParams) -> Result<Array2<f64>> {
    let (mi, di, hi) = cal.indices()?;
    let c = region.dim().2;
    let n = p.b_w.len();
    if p.conv_w.shape() != [9 * c, n * c] {
        return Err(UxError::dim("channels", format!("band-weight conv {:?} does not fit {c} channels", p.conv_w.shape())));
    }
    let spatial = layers::pooled_descriptor_direct(region, &p.conv_w, &p.conv_b);
    let d = p.w_t.shape()[0];
    let row = |t: &Tensor, i: usize| t.data()[i * d..(i + 1) * d].to_vec();
    let (em, ed, eh) = (row(&p.emb_month, mi), row(&p.emb_day, di), row(&p.emb_hour, hi));
    let temporal: Vec<f64> = (0..n)
        .map(|j| p.b_t.data()[j] + (0..d).map(|k| (em[k] + ed[k] + eh[k]) * p.w_t.data()[k * n + j]).sum::<f64>())
        .collect();
    let ww = p.w_w.data();
    let mut out = Array2::zeros((n, c));
    let mut logits = vec![0.0; n];
    for ci in 0..c {
        for (j, l) in logits.iter_mut().enumerate() {
            *l = p.b_w.data()[j];
            for m in 0..n {
                *l += spatial[m * c + ci] * ww[m * n + j] + temporal[m] * ww[(n + m) * n + j];
            }
        }
        softmax_in_place(&mut logits);
        for j in 0..n {
            out[[j, ci]] = logits[j];
        }
    }
    Ok(out)
}

/// Weighted sum of the filtered copies with per-channel band weights `[N, C]`.
pub fn aggregate_bands(f: &FilteredBands, w: &Array2<f64>) -> Result<Spectrum> {
    let (n, h, wf, c) = f.re.dim();
    if w.dim() != (n, c) {
        return Err(UxError::dim("bands", format!("weights {:?} for {n} bands x {c} channels", w.dim())));
    }
    let mut out = Spectrum::zeros(f.kind, f.height, f.width, c);
    for b in 0..n {
        for k in 0..h {
            for l in 0..wf {
                for ci in 0..c {
                    out.re[[k, l, ci]] += w[[b, ci]] * f.re[[b, k, l, ci]];
                    out.im[[k, l, ci]] += w[[b, ci]] * f.im[[b, k, l, ci]];
                }
            }
        }
    }
    Ok(out)
}

/// Precomputed radial index and band partition for one region shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AfmLayout {
    pub config: AfmConfig,
    pub index: RadialFrequencyIndex,
    pub partition: BandPartition,
}

impl AfmLayout {
    pub fn new(config: AfmConfig) -> Result<Self> {
        if config.region_height == 0 || config.region_width == 0 || config.channels == 0 {
            return Err(UxError::Config("region shape and channel count must be positive".into()));
        }
        if !(config.max_kappa > 0.0 && config.max_kappa.is_finite()) {
            return Err(UxError::Config(format!("max spread {} must be positive", config.max_kappa)));
        }
        let index = radial_index(config.region_height, config.region_width, TransformKind::RealInput);
        let partition = build_band_partition(&index.normalized_sorted, config.filters, config.growth)?;
        Ok(AfmLayout { config, index, partition })
    }

    fn check_region(&self, x: ArrayView3<f64>) -> Result<()> {
        let cfg = &self.config;
        let (h, w, c) = x.dim();
        if (h, w) != (cfg.region_height, cfg.region_width) {
            return Err(UxError::dim("region", format!("{h}x{w}, expected {}x{}", cfg.region_height, cfg.region_width)));
        }
        if c != cfg.channels {
            return Err(UxError::dim("channels", format!("{c}, expected {}", cfg.channels)));
        }
        Ok(())
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (0.797_884_560_802_865_4 * (x + 0.044_715 * x.powi(3))).tanh())
}

/// `x + FFN(LayerNorm(x))` applied at every cell over the channel axis.
fn ffn_residual(x: &Array3<f64>, p: &AfmParams) -> Array3<f64> {
    let (h, w, c) = x.dim();
    let hidden = p.ffn_b1.len();
    let (w1, b1, w2, b2) = (p.ffn_w1.data(), p.ffn_b1.data(), p.ffn_w2.data(), p.ffn_b2.data());
    let mut out = x.clone();
    let mut z = vec![0.0; hidden];
    for y in 0..h {
        for xx in 0..w {
            let cell: Vec<f64> = (0..c).map(|ci| x[[y, xx, ci]]).collect();
            let mean = cell.iter().sum::<f64>() / c as f64;
            let var = cell.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + layers::LAYER_NORM_EPS).sqrt();
            let ln: Vec<f64> =
                (0..c).map(|ci| (cell[ci] - mean) * inv * p.ln_gamma.data()[ci] + p.ln_beta.data()[ci]).collect();
            for (j, zj) in z.iter_mut().enumerate() {
                *zj = gelu(b1[j] + (0..c).map(|ci| ln[ci] * w1[ci * hidden + j]).sum::<f64>());
            }
            for ci in 0..c {
                out[[y, xx, ci]] += b2[ci] + (0..hidden).map(|j| z[j] * w2[j * c + ci]).sum::<f64>();
            }
        }
    }
    out
}

/// Intermediate values of one direct forward pass, kept for inspection.
#[derive(Debug, Clone, PartialEq)]
pub struct AfmTrace {
    pub kappa: Vec<f64>,
    /// `[N, C]`
    pub weights: Array2<f64>,
    pub output: Array3<f64>,
}

/// Modulates one augmented region, taking band weights from the raw region.
pub fn afm_forward(
    region: ArrayView3<f64>,
    raw: ArrayView3<f64>,
    cal: &CalendarKey,
    p: &AfmParams,
    layout: &AfmLayout,
) -> Result<Array3<f64>> {
    Ok(afm_trace(region, raw, cal, p, layout)?.output)
}

/// [`afm_forward`] returning the spreads and band weights as well.
pub fn afm_trace(
    region: ArrayView3<f64>,
    raw: ArrayView3<f64>,
    cal: &CalendarKey,
    p: &AfmParams,
    layout: &AfmLayout,
) -> Result<AfmTrace> {
    layout.check_region(region)?;
    layout.check_region(raw)?;
    let spec = forward_transform(region, TransformKind::RealInput);
    let kappa = compute_spread(&spec, p, layout.config.max_kappa)?;
    let bank = BetaFilterBank::new(layout.partition.modes.clone(), kappa.clone())?;
    let filtered = apply_filters(&spec, &bank, &layout.index)?;
    let weights = compute_band_weights(raw, cal, p)?;
    let mixed = aggregate_bands(&filtered, &weights)?;
    let xdot = inverse_transform(&mixed)?;
    let output = ffn_residual(&xdot, p);
    if output.iter().any(|v| !v.is_finite()) {
        return Err(UxError::Domain("modulated region is not finite".into()));
    }
    Ok(AfmTrace { kappa, weights, output })
}

/// Graph handles produced by [`afm_graph`].
#[derive(Debug, Clone, Copy)]
pub struct AfmNodes {
    /// `[R, a_h, a_w, C]`
    pub output: Var,
    /// `[R, N]`
    pub kappa: Var,
    /// `[R, C, N]` (channel-major, unlike the direct `[N, C]`)
    pub weights: Var,
}

fn row_gather(g: &mut Graph, table: Var, row: usize) -> Var {
    let d = g.shape(table)[1];
    g.gather(table, (row * d..(row + 1) * d).collect(), &[1, d])
}

/// Batched modulation on a graph. `aug` and `raw` are `[R, a_h, a_w, C]`.
pub fn afm_graph(g: &mut Graph, aug: Var, raw: Var, cal: &CalendarKey, v: &AfmVars, layout: &AfmLayout) -> Result<AfmNodes> {
    let cfg = &layout.config;
    let s = g.shape(aug).to_vec();
    if s.len() != 4 || s[1..] != [cfg.region_height, cfg.region_width, cfg.channels] || g.shape(raw) != s.as_slice() {
        return Err(UxError::dim("region", format!("batch {:?} does not match the configured region", s)));
    }
    let (mi, di, hi) = cal.indices()?;
    let (r, h, w, c) = (s[0], s[1], s[2], s[3]);
    let n = cfg.filters;
    let wf = crate::fft::half_width(w);
    let bins = h * wf;

    let spec = g.rfft2(aug);
    let per_bin = g.permute(spec, &[0, 2, 3, 1, 4]);
    let per_bin = g.reshape(per_bin, &[r, bins, 2 * c]);
    let z = g.affine(per_bin, v.w_kappa, v.b_kappa);
    let z = g.mean_axes(z, 1, 1);
    let z = g.sigmoid(z);
    let z = g.scale(z, cfg.max_kappa);
    let kappa = g.add_scalar(z, 2.0);
    let filt = g.beta_filter(kappa, &layout.partition.modes, &layout.index.normalized_by_bin);

    let spatial = layers::pooled_descriptor(g, raw, v.conv_w, v.conv_b);
    let spatial = g.reshape(spatial, &[r, n, c]);
    let spatial = g.permute(spatial, &[0, 2, 1]);
    let em = row_gather(g, v.emb_month, mi);
    let ed = row_gather(g, v.emb_day, di);
    let eh = row_gather(g, v.emb_hour, hi);
    let e = g.add(em, ed);
    let e = g.add(e, eh);
    let temporal = g.affine(e, v.w_t, v.b_t);
    let w_top = g.gather(v.w_w, (0..n * n).collect(), &[n, n]);
    let w_bot = g.gather(v.w_w, (n * n..2 * n * n).collect(), &[n, n]);
    let from_s = g.linear(spatial, w_top);
    let from_t = g.linear(temporal, w_bot);
    let from_t = g.reshape(from_t, &[n]);
    let logits = g.add_bcast(from_s, from_t);
    let logits = g.add_bcast(logits, v.b_w);
    let weights = g.softmax(logits);

    let gain = g.bmm(filt, weights, true);
    let gain = g.reshape(gain, &[r, 1, bins, c]);
    let gain = g.broadcast(gain, &[r, 2, bins, c]);
    let spec = g.reshape(spec, &[r, 2, bins, c]);
    let mixed = g.mul(spec, gain);
    let mixed = g.reshape(mixed, &[r, 2, h, wf, c]);
    let xdot = g.irfft2(mixed, w);

    let ln = layers::layer_norm_affine(g, xdot, v.ln_gamma, v.ln_beta);
    let f = layers::ffn(g, ln, v.ffn_w1, v.ffn_b1, v.ffn_w2, v.ffn_b2);
    let output = g.add(xdot, f);
    Ok(AfmNodes { output, kappa, weights })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{gradcheck, GradCheckOptions};
    use ndarray::Array;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(h: usize, w: usize, c: usize, n: usize) -> AfmConfig {
        AfmConfig {
            region_height: h,
            region_width: w,
            channels: c,
            filters: n,
            growth: 1.3,
            max_kappa: DEFAULT_MAX_KAPPA,
            time_dim: 4,
        }
    }

    fn random_field(h: usize, w: usize, c: usize, seed: u64) -> Array3<f64> {
        let t = Tensor::randn(&[h, w, c], 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        Array::from_shape_vec((h, w, c), t.into_data()).unwrap()
    }

    fn cal() -> CalendarKey {
        CalendarKey { month: 7, day: 19, hour: 13 }
    }

    #[test]
    fn uniform_bands_are_singletons() {
        let sorted: Vec<f64> = (0..10).map(|i| i as f64 / 9.0).collect();
        let p = build_band_partition(&sorted, 10, 1.0).unwrap();
        assert_eq!(p.sizes, vec![1; 10]);
        assert_eq!(p.modes, sorted);
    }

    #[test]
    fn geometric_sizes_match_largest_remainder() {
        let sizes = band_sizes(60, 10, 1.3).unwrap();
        // oracle: every ideal size here is >= 1, so plain Hamilton rounding applies
        let ideal: Vec<f64> = (0..10).map(|i| 1.3f64.powi(i)).collect();
        let tot: f64 = ideal.iter().sum();
        let ideal: Vec<f64> = ideal.iter().map(|v| v * 60.0 / tot).collect();
        let mut want: Vec<usize> = ideal.iter().map(|v| v.floor() as usize).collect();
        let short = 60 - want.iter().sum::<usize>();
        let mut by_rem: Vec<usize> = (0..10).collect();
        by_rem.sort_by(|&a, &b| (ideal[b] - ideal[b].floor()).total_cmp(&(ideal[a] - ideal[a].floor())));
        for &i in &by_rem[..short] {
            want[i] += 1;
        }
        assert_eq!(sizes, want);
        assert_eq!(sizes.iter().sum::<usize>(), 60);
        assert_eq!(sizes[0], *sizes.iter().min().unwrap());
    }

    #[test]
    fn single_band_takes_overall_median() {
        let sorted: Vec<f64> = (0..100).map(|i| (i as f64 / 99.0).powi(2)).collect();
        let p = build_band_partition(&sorted, 1, 1.3).unwrap();
        assert_eq!(p.sizes, vec![100]);
        assert_eq!(p.modes, vec![sorted[49]]);
        assert_eq!(p.range(0), 0..100);
    }

    #[test]
    fn too_few_bins_is_config_error() {
        assert!(matches!(band_sizes(3, 4, 1.3), Err(UxError::Config(_))));
        assert!(matches!(band_sizes(30, 4, 0.9), Err(UxError::Config(_))));
    }

    #[test]
    fn small_grids_force_minimum_band_size() {
        // ideal leading bands fall below one bin
        let s = band_sizes(10, 10, 1.3).unwrap();
        assert_eq!(s, vec![1; 10]);
        let s = band_sizes(12, 10, 1.5).unwrap();
        assert_eq!(s.iter().sum::<usize>(), 12);
        assert!(s.iter().all(|&v| v >= 1));
    }

    proptest! {
        #[test]
        fn partition_invariants(bins in 1usize..400, n in 1usize..16, gamma in 1.0f64..2.5) {
            prop_assume!(n <= bins);
            let s = band_sizes(bins, n, gamma).unwrap();
            prop_assert_eq!(s.len(), n);
            prop_assert_eq!(s.iter().sum::<usize>(), bins);
            prop_assert!(s.iter().all(|&v| v >= 1));
            prop_assert!(s.windows(2).all(|p| p[0] <= p[1]));
        }

        #[test]
        fn beta_filter_range(mode in 0.0f64..=1.0, kappa in 2.0f64..80.0, x in 0.0f64..=1.0) {
            let v = beta_filter_eval(mode, kappa, x).unwrap();
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert_eq!(beta_filter_eval(mode, kappa, mode).unwrap(), 1.0);
        }
    }

    #[test]
    fn beta_filter_examples() {
        for x in [0.0, 0.3, 1.0] {
            assert_eq!(beta_filter_eval(0.7, 2.0, x).unwrap(), 1.0);
        }
        assert_eq!(beta_filter_eval(0.35, 9.0, 0.35).unwrap(), 1.0);
        assert!((beta_filter_eval(0.5, 4.0, 0.25).unwrap() - 0.75).abs() < 1e-15);
        assert!(matches!(beta_filter_eval(0.5, 1.9, 0.2), Err(UxError::Domain(_))));
        let bank = BetaFilterBank::new(vec![0.25], vec![6.0]).unwrap();
        assert_eq!((bank.alpha(0), bank.beta(0)), (2.0, 4.0));
    }

    #[test]
    fn spread_limits() {
        let c = cfg(6, 6, 2, 3);
        let spec = forward_transform(random_field(6, 6, 2, 1).view(), TransformKind::RealInput);
        let mut p = AfmParams::zeros(&c);
        for k in compute_spread(&spec, &p, 70.0).unwrap() {
            assert_eq!(k, 37.0);
        }
        p.b_kappa.fill(-1e4);
        for k in compute_spread(&spec, &p, 70.0).unwrap() {
            assert_eq!(k, 2.0);
        }
    }

    #[test]
    fn spread_matches_mean_then_affine() {
        let c = cfg(6, 6, 2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = AfmParams::init(&c, &mut rng);
        p.w_kappa = Tensor::randn(&[4, 3], 0.3, &mut rng);
        p.b_kappa = Tensor::randn(&[3], 0.3, &mut rng);
        let spec = forward_transform(random_field(6, 6, 2, 2).view(), TransformKind::RealInput);
        let got = compute_spread(&spec, &p, 70.0).unwrap();
        let bins = spec.bin_count() as f64;
        let mut mean = [0.0; 4];
        for ((k, l, ci), v) in spec.re.indexed_iter() {
            mean[ci] += v / bins;
            mean[2 + ci] += spec.im[[k, l, ci]] / bins;
        }
        for (j, &g) in got.iter().enumerate() {
            let z: f64 = (0..4).map(|i| mean[i] * p.w_kappa.data()[i * 3 + j]).sum::<f64>() + p.b_kappa.data()[j];
            let want = 2.0 + 70.0 / (1.0 + (-z).exp());
            assert!((g - want).abs() < 1e-10);
            assert!(g > 2.0 && g < 72.0);
        }
    }

    #[test]
    fn filters_all_pass_and_zero() {
        let idx = radial_index(6, 6, TransformKind::RealInput);
        let spec = forward_transform(random_field(6, 6, 2, 3).view(), TransformKind::RealInput);
        let bank = BetaFilterBank::new(vec![0.1, 0.5, 0.9], vec![2.0; 3]).unwrap();
        let f = apply_filters(&spec, &bank, &idx).unwrap();
        for n in 0..3 {
            assert_eq!(f.re.index_axis(ndarray::Axis(0), n), spec.re);
            assert_eq!(f.im.index_axis(ndarray::Axis(0), n), spec.im);
        }
        let zero = Spectrum::zeros(TransformKind::RealInput, 6, 6, 2);
        let f = apply_filters(&zero, &bank, &idx).unwrap();
        assert!(f.re.iter().chain(f.im.iter()).all(|&v| v == 0.0));
        let other = radial_index(5, 6, TransformKind::RealInput);
        assert!(matches!(apply_filters(&spec, &bank, &other), Err(UxError::Dimension { .. })));
    }

    #[test]
    fn filters_match_closed_form() {
        let idx = radial_index(6, 6, TransformKind::RealInput);
        let spec = forward_transform(random_field(6, 6, 2, 4).view(), TransformKind::RealInput);
        let modes = vec![0.2, 0.45, 0.8];
        let kappas = vec![3.5, 12.0, 40.0];
        let bank = BetaFilterBank::new(modes.clone(), kappas.clone()).unwrap();
        let f = apply_filters(&spec, &bank, &idx).unwrap();
        let radii = &idx.radii;
        let (lo, hi) = radii.iter().fold((f64::MAX, f64::MIN), |(a, b), &r| (a.min(r), b.max(r)));
        for n in 0..3 {
            let (m, k) = (modes[n], kappas[n]);
            let (a, b) = (m * (k - 2.0) + 1.0, (1.0 - m) * (k - 2.0) + 1.0);
            for kk in 0..6 {
                for l in 0..4 {
                    let x = (radii[kk * 4 + l] - lo) / (hi - lo);
                    let wgt = x.powf(a - 1.0) * (1.0 - x).powf(b - 1.0) / (m.powf(a - 1.0) * (1.0 - m).powf(b - 1.0));
                    for c in 0..2 {
                        assert!((f.re[[n, kk, l, c]] - wgt * spec.re[[kk, l, c]]).abs() < 1e-10);
                        assert!((f.im[[n, kk, l, c]] - wgt * spec.im[[kk, l, c]]).abs() < 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn zero_params_give_uniform_band_weights() {
        let c = cfg(6, 6, 2, 3);
        let w = compute_band_weights(random_field(6, 6, 2, 5).view(), &cal(), &AfmParams::zeros(&c)).unwrap();
        for v in w.iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let bad = CalendarKey { month: 13, day: 1, hour: 0 };
        assert!(matches!(
            compute_band_weights(random_field(6, 6, 2, 5).view(), &bad, &AfmParams::zeros(&c)),
            Err(UxError::Calendar(_))
        ));
    }

    #[test]
    fn band_weights_are_probability_vectors() {
        let c = cfg(6, 6, 2, 4);
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut p = AfmParams::init(&c, &mut rng);
            p.b_w = Tensor::randn(&[4], 2.0, &mut rng);
            let w = compute_band_weights(random_field(6, 6, 2, seed + 10).view(), &cal(), &p).unwrap();
            for ci in 0..2 {
                let col = w.column(ci);
                assert!(col.iter().all(|&v| v >= 0.0));
                assert!((col.sum() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn aggregation_cases() {
        let idx = radial_index(6, 6, TransformKind::RealInput);
        let spec = forward_transform(random_field(6, 6, 2, 6).view(), TransformKind::RealInput);
        let allpass = BetaFilterBank::new(vec![0.1, 0.5, 0.9], vec![2.0; 3]).unwrap();
        let f = apply_filters(&spec, &allpass, &idx).unwrap();
        let out = aggregate_bands(&f, &Array2::from_elem((3, 2), 1.0 / 3.0)).unwrap();
        assert!(out.re.iter().zip(spec.re.iter()).all(|(a, b)| (a - b).abs() < 1e-12));

        let bank = BetaFilterBank::new(vec![0.1, 0.5, 0.9], vec![5.0, 9.0, 20.0]).unwrap();
        let f = apply_filters(&spec, &bank, &idx).unwrap();
        let mut sel = Array2::zeros((3, 2));
        sel.row_mut(1).fill(1.0);
        let out = aggregate_bands(&f, &sel).unwrap();
        assert_eq!(out.re, f.re.index_axis(ndarray::Axis(0), 1));

        let w = Array2::from_shape_vec((3, 2), vec![0.2, 0.5, 0.3, 0.1, 0.5, 0.4]).unwrap();
        let out = aggregate_bands(&f, &w).unwrap();
        for ((k, l, c), v) in out.im.indexed_iter() {
            let want: f64 = (0..3).map(|n| w[[n, c]] * f.im[[n, k, l, c]]).sum();
            assert!((v - want).abs() < 1e-12);
        }
    }

    #[test]
    fn modulation_is_linear_in_the_spectrum() {
        let idx = radial_index(6, 6, TransformKind::RealInput);
        let a = forward_transform(random_field(6, 6, 2, 7).view(), TransformKind::RealInput);
        let b = forward_transform(random_field(6, 6, 2, 8).view(), TransformKind::RealInput);
        let mut mix = a.clone();
        mix.re = &a.re * 1.5 - &b.re * 0.25;
        mix.im = &a.im * 1.5 - &b.im * 0.25;
        let bank = BetaFilterBank::new(vec![0.1, 0.5, 0.9], vec![5.0, 9.0, 20.0]).unwrap();
        let w = Array2::from_shape_vec((3, 2), vec![0.2, 0.5, 0.3, 0.1, 0.5, 0.4]).unwrap();
        let run = |s: &Spectrum| aggregate_bands(&apply_filters(s, &bank, &idx).unwrap(), &w).unwrap();
        let (oa, ob, om) = (run(&a), run(&b), run(&mix));
        for ((x, y), z) in oa.re.iter().zip(ob.re.iter()).zip(om.re.iter()) {
            assert!((1.5 * x - 0.25 * y - z).abs() < 1e-10);
        }
    }

    #[test]
    fn identity_configuration_returns_input() {
        let c = cfg(6, 6, 2, 3);
        let layout = AfmLayout::new(c).unwrap();
        let mut p = AfmParams::zeros(&c);
        p.b_kappa.fill(-1e3);
        p.ln_gamma.fill(1.0);
        let x = random_field(6, 6, 2, 9);
        let out = afm_forward(x.view(), random_field(6, 6, 2, 10).view(), &cal(), &p, &layout).unwrap();
        let err = out.iter().zip(x.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err <= 1e-9, "{err}");
    }

    #[test]
    fn zero_input_zero_output() {
        let c = cfg(6, 6, 2, 3);
        let layout = AfmLayout::new(c).unwrap();
        let mut p = AfmParams::init(&c, &mut ChaCha8Rng::seed_from_u64(1));
        p.conv_b.fill(0.0);
        let z = Array3::zeros((6, 6, 2));
        let out = afm_forward(z.view(), z.view(), &cal(), &p, &layout).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    fn batch_tensor(fields: &[Array3<f64>]) -> Tensor {
        let (h, w, c) = fields[0].dim();
        let data = fields.iter().flat_map(|f| f.iter().cloned()).collect();
        Tensor::new(vec![fields.len(), h, w, c], data).unwrap()
    }

    #[test]
    fn graph_path_matches_direct_path() {
        let c = cfg(6, 8, 2, 3);
        let layout = AfmLayout::new(c).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut p = AfmParams::init(&c, &mut rng);
        p.w_kappa = Tensor::randn(&[4, 3], 0.5, &mut rng);
        p.b_w = Tensor::randn(&[3], 1.0, &mut rng);
        let aug: Vec<_> = (0..3).map(|i| random_field(6, 8, 2, 30 + i)).collect();
        let raw: Vec<_> = (0..3).map(|i| random_field(6, 8, 2, 40 + i)).collect();
        let mut g = Graph::new();
        let va = g.input(batch_tensor(&aug));
        let vr = g.input(batch_tensor(&raw));
        let vars = p.bind(&mut g);
        let nodes = afm_graph(&mut g, va, vr, &cal(), &vars, &layout).unwrap();
        let out = g.value(nodes.output).data();
        let kap = g.value(nodes.kappa).data();
        let wts = g.value(nodes.weights).data();
        for r in 0..3 {
            let t = afm_trace(aug[r].view(), raw[r].view(), &cal(), &p, &layout).unwrap();
            for (i, v) in t.output.iter().enumerate() {
                assert!((out[r * 96 + i] - v).abs() < 1e-10);
            }
            for n in 0..3 {
                assert!((kap[r * 3 + n] - t.kappa[n]).abs() < 1e-10);
                for ci in 0..2 {
                    assert!((wts[(r * 2 + ci) * 3 + n] - t.weights[[n, ci]]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let c = cfg(6, 6, 2, 3);
        let layout = AfmLayout::new(c).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut p = AfmParams::init(&c, &mut rng);
        // keep spreads away from saturation so every path carries gradient
        p.w_kappa = Tensor::randn(&[4, 3], 0.3, &mut rng);
        p.b_kappa = Tensor::randn(&[3], 0.5, &mut rng);
        for t in [&mut p.conv_b, &mut p.b_t, &mut p.b_w, &mut p.ln_beta, &mut p.ffn_b1, &mut p.ffn_b2] {
            *t = Tensor::randn(t.shape(), 0.2, &mut rng);
        }
        let aug = batch_tensor(&[random_field(6, 6, 2, 50), random_field(6, 6, 2, 51)]);
        let raw = batch_tensor(&[random_field(6, 6, 2, 52), random_field(6, 6, 2, 53)]);
        let proj = Tensor::randn(aug.shape(), 1.0, &mut rng);
        for weighted in [false, true] {
            let report = gradcheck(&p, &GradCheckOptions::default(), |q: &AfmParams| {
                let mut g = Graph::new();
                let va = g.input(aug.clone());
                let vr = g.input(raw.clone());
                let vars = q.bind(&mut g);
                let out = afm_graph(&mut g, va, vr, &cal(), &vars, &layout)?.output;
                let loss = if weighted {
                    let pv = g.input(proj.clone());
                    let m = g.mul(out, pv);
                    g.sum(m)
                } else {
                    g.sum(out)
                };
                let grads = g.backward(loss);
                Ok((g.value(loss).item(), vars.grads(&grads)))
            })
            .unwrap();
            assert!(report.max_rel_err() < 1e-4, "{report:?}");
        }
    }
}
