//! End-to-end composition (memory augmentation, frequency modulation,
//! windowed-attention backbone), variable standardization, the L1 training
//! loop and the gradient-check suite.

use chrono::Duration;
use ndarray::{Array3, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::afm::{afm_graph, AfmConfig, AfmLayout, AfmParams, AfmVars, DEFAULT_MAX_KAPPA};
use crate::autodiff::{gradcheck, GradCheckOptions, GradCheckReport, Gradients, Graph, ParamSet, Tensor, Var};
use crate::backbone::{backbone_graph, BackboneConfig, BackboneParams, BackboneVars};
use crate::epa::{epa_graph, EpaParams, EpaVars, MemoryPool, MemorySlot};
use crate::error::{Result, UxError};
use crate::grid::{CalendarKey, EventRegistry, ExtremeMask, WeatherGrid};
use crate::layers;

/// Per-variable standardization fitted on a training period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub variables: Vec<String>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub period: String,
}

/// Two-pass population mean and standard deviation per channel.
pub fn fit_normalization(grids: &[WeatherGrid]) -> Result<NormalizationStats> {
    let first = grids.first().ok_or(UxError::EmptyCorpus)?;
    let c = first.channels();
    if let Some(g) = grids.iter().find(|g| g.channels() != c) {
        return Err(UxError::dim("channels", format!("{} channels, expected {c}", g.channels())));
    }
    let mut mean = vec![0.0; c];
    let mut count = 0usize;
    for g in grids {
        for cell in g.values().rows() {
            for (m, v) in mean.iter_mut().zip(cell) {
                *m += v;
            }
        }
        count += g.height() * g.width();
    }
    mean.iter_mut().for_each(|m| *m /= count as f64);
    let mut var = vec![0.0; c];
    for g in grids {
        for cell in g.values().rows() {
            for ((s, v), m) in var.iter_mut().zip(cell).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
    }
    let mut std = Vec::with_capacity(c);
    for (ch, s) in var.iter().enumerate() {
        let sd = (s / count as f64).sqrt();
        if !(sd > 0.0 && sd.is_finite()) {
            return Err(UxError::DegenerateVariable { channel: ch });
        }
        std.push(sd);
    }
    let (lo, hi) = grids.iter().fold((*first.timestamp(), *first.timestamp()), |(lo, hi), g| {
        (lo.min(*g.timestamp()), hi.max(*g.timestamp()))
    });
    Ok(NormalizationStats {
        variables: first.variables().to_vec(),
        mean,
        std,
        period: format!("{} .. {}", lo.to_rfc3339(), hi.to_rfc3339()),
    })
}

impl NormalizationStats {
    fn check(&self, g: &WeatherGrid) -> Result<()> {
        if g.channels() != self.mean.len() {
            return Err(UxError::dim("channels", format!("{} channels, stats cover {}", g.channels(), self.mean.len())));
        }
        Ok(())
    }

    pub fn normalize(&self, g: &WeatherGrid) -> Result<WeatherGrid> {
        self.check(g)?;
        let mut v = g.values().clone();
        for mut cell in v.rows_mut() {
            for ((x, m), s) in cell.iter_mut().zip(&self.mean).zip(&self.std) {
                *x = (*x - m) / s;
            }
        }
        g.with_values(v, true)
    }

    pub fn denormalize(&self, g: &WeatherGrid) -> Result<WeatherGrid> {
        self.check(g)?;
        let mut v = g.values().clone();
        for mut cell in v.rows_mut() {
            for ((x, m), s) in cell.iter_mut().zip(&self.mean).zip(&self.std) {
                *x = *x * s + m;
            }
        }
        g.with_values(v, false)
    }
}

/// Which stages run in front of the backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Components {
    pub epa: bool,
    pub afm: bool,
}

impl Default for Components {
    fn default() -> Self {
        Components { epa: true, afm: true }
    }
}

/// Optimization and architecture hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Epochs between learning-rate decays.
    pub decay_step: usize,
    pub decay_factor: f64,
    pub epochs: usize,
    /// Timesteps per optimizer step.
    pub batch_size: usize,
    pub patience: usize,
    pub seed: u64,
    pub region_height: usize,
    pub region_width: usize,
    pub filters: usize,
    pub growth: f64,
    pub max_kappa: f64,
    pub time_dim: usize,
    pub units: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub window: usize,
    pub patch_height: usize,
    pub patch_width: usize,
    pub components: Components,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            weight_decay: 3e-6,
            decay_step: 1,
            decay_factor: 0.85,
            epochs: 20,
            batch_size: 1,
            patience: 5,
            seed: 0,
            region_height: 10,
            region_width: 10,
            filters: 10,
            growth: 1.3,
            max_kappa: DEFAULT_MAX_KAPPA,
            time_dim: 72,
            units: 5,
            embed_dim: 64,
            depth: 4,
            heads: 4,
            window: 4,
            patch_height: 8,
            patch_width: 8,
            components: Components::default(),
        }
    }
}

impl TrainConfig {
    /// Small configuration for 20x20 grids, fast enough for tests.
    pub fn desk() -> Self {
        TrainConfig {
            filters: 3,
            time_dim: 8,
            units: 2,
            embed_dim: 8,
            depth: 1,
            heads: 2,
            window: 5,
            patch_height: 2,
            patch_width: 2,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("decay_step", self.decay_step),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("patience", self.patience),
            ("region_height", self.region_height),
            ("region_width", self.region_width),
            ("filters", self.filters),
            ("time_dim", self.time_dim),
            ("units", self.units),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(UxError::Config(format!("{name} must be positive")));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(UxError::Config(format!("learning rate {}", self.learning_rate)));
        }
        if !(self.weight_decay >= 0.0 && self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(UxError::Config("weight decay must be >= 0 and decay factor in (0, 1]".into()));
        }
        if !(self.growth >= 1.0 && self.growth.is_finite()) {
            return Err(UxError::Config(format!("growth rate {} must be >= 1", self.growth)));
        }
        self.backbone().validate()
    }

    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            embed_dim: self.embed_dim,
            depth: self.depth,
            heads: self.heads,
            window: self.window,
            patch_height: self.patch_height,
            patch_width: self.patch_width,
        }
    }

    pub fn afm(&self, channels: usize) -> AfmConfig {
        AfmConfig {
            region_height: self.region_height,
            region_width: self.region_width,
            channels,
            filters: self.filters,
            growth: self.growth,
            max_kappa: self.max_kappa,
            time_dim: self.time_dim,
        }
    }

    /// Learning rate during the zero-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.decay_factor.powi((epoch / self.decay_step) as i32)
    }
}

/// Every trainable tensor of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub epa: EpaParams,
    pub afm: AfmParams,
    pub backbone: BackboneParams,
}

#[derive(Debug, Clone)]
pub struct ModelVars {
    pub epa: EpaVars,
    pub afm: AfmVars,
    pub backbone: BackboneVars,
}

impl ModelParams {
    pub fn bind(&self, g: &mut Graph) -> ModelVars {
        ModelVars { epa: self.epa.bind(g), afm: self.afm.bind(g), backbone: self.backbone.bind(g) }
    }
}

impl ModelVars {
    pub fn grads(&self, g: &Gradients) -> ModelParams {
        ModelParams { epa: self.epa.grads(g), afm: self.afm.grads(g), backbone: self.backbone.grads(g) }
    }
}

impl ParamSet for ModelParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.epa.visit(&mut |n, t| f(&format!("epa.{n}"), t));
        self.afm.visit(&mut |n, t| f(&format!("afm.{n}"), t));
        self.backbone.visit(&mut |n, t| f(&format!("backbone.{n}"), t));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.epa.visit_mut(&mut |n, t| f(&format!("epa.{n}"), t));
        self.afm.visit_mut(&mut |n, t| f(&format!("afm.{n}"), t));
        self.backbone.visit_mut(&mut |n, t| f(&format!("backbone.{n}"), t));
    }
}

/// Architecture of one model instance: configuration, channel count and the
/// precomputed modulation layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: TrainConfig,
    pub channels: usize,
    pub layout: AfmLayout,
}

/// One `(X^t, X^{t+1})` pair with the extreme mask of `X^{t+1}`; the mask is
/// only read by validation.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub input: WeatherGrid,
    pub target: WeatherGrid,
    pub mask: ExtremeMask,
}

/// Pairs consecutive grids exactly one hour apart; `masks[i]` belongs to
/// `grids[i]`.
pub fn build_transitions(grids: &[WeatherGrid], masks: &[ExtremeMask]) -> Result<Vec<Transition>> {
    if grids.len() != masks.len() {
        return Err(UxError::dim("masks", format!("{} masks for {} grids", masks.len(), grids.len())));
    }
    Ok((1..grids.len())
        .filter(|&i| *grids[i].timestamp() - *grids[i - 1].timestamp() == Duration::hours(1))
        .map(|i| Transition { input: grids[i - 1].clone(), target: grids[i].clone(), mask: masks[i].clone() })
        .collect())
}

impl Model {
    pub fn new(config: TrainConfig, channels: usize) -> Result<Self> {
        config.validate()?;
        if channels == 0 {
            return Err(UxError::Config("at least one channel is required".into()));
        }
        let layout = AfmLayout::new(config.afm(channels))?;
        Ok(Model { config, channels, layout })
    }

    pub fn init_params(&self, seed: u64) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ModelParams {
            epa: EpaParams::init(self.channels, &mut rng),
            afm: AfmParams::init(&self.layout.config, &mut rng),
            backbone: BackboneParams::init(&self.config.backbone(), self.channels, &mut rng),
        }
    }

    pub fn zero_params(&self) -> ModelParams {
        ModelParams {
            epa: EpaParams::zeros(self.channels),
            afm: AfmParams::zeros(&self.layout.config),
            backbone: BackboneParams::zeros(&self.config.backbone(), self.channels),
        }
    }

    pub fn validate_params(&self, p: &ModelParams) -> Result<()> {
        crate::autodiff::check_params(p, &self.zero_params())
    }

    fn check_pool(&self, pool: Option<&MemoryPool>) -> Result<()> {
        if !self.config.components.epa {
            return Ok(());
        }
        let pool = pool.ok_or_else(|| UxError::Config("memory augmentation is enabled but no pool was given".into()))?;
        let want = (self.config.region_height, self.config.region_width, self.channels);
        if (pool.region_height, pool.region_width, pool.channels) != want {
            return Err(UxError::dim(
                "pool",
                format!("pool regions {}x{}x{}, model expects {want:?}", pool.region_height, pool.region_width, pool.channels),
            ));
        }
        pool.validate()
    }

    /// Builds the forward pass for an `[H, W, C]` input node.
    pub fn graph(&self, g: &mut Graph, x: Var, cal: &CalendarKey, pool: Option<&MemoryPool>, v: &ModelVars) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let (a_h, a_w) = (self.config.region_height, self.config.region_width);
        if s.len() != 3 || s[2] != self.channels {
            return Err(UxError::dim("grid", format!("input {s:?} with {} channels expected", self.channels)));
        }
        let (h, w) = (s[0], s[1]);
        if h % a_h != 0 || w % a_w != 0 {
            return Err(UxError::dim("grid", format!("{h}x{w} is not tiled by {a_h}x{a_w} regions")));
        }
        self.check_pool(pool)?;
        let raw = layers::partition(g, x, a_h, a_w);
        let aug = match pool {
            Some(pool) if self.config.components.epa => epa_graph(g, raw, pool, &v.epa)?,
            _ => raw,
        };
        let modulated = if self.config.components.afm {
            afm_graph(g, aug, raw, cal, &v.afm, &self.layout)?.output
        } else {
            aug
        };
        let merged = layers::merge(g, modulated, h, w);
        Ok(backbone_graph(g, merged, &v.backbone, &self.config.backbone()))
    }

    fn input_tensor(grid: &WeatherGrid) -> Tensor {
        let (h, w, c) = grid.values().dim();
        Tensor::new(vec![h, w, c], grid.values().iter().copied().collect()).unwrap()
    }

    fn predict_values(&self, grid: &WeatherGrid, pool: Option<&MemoryPool>, p: &ModelParams) -> Result<Array3<f64>> {
        let mut g = Graph::new();
        let v = p.bind(&mut g);
        let x = g.input(Self::input_tensor(grid));
        let y = self.graph(&mut g, x, &grid.calendar(), pool, &v)?;
        Array3::from_shape_vec(grid.values().dim(), g.value(y).data().to_vec())
            .map_err(|e| UxError::dim("output", e.to_string()))
    }

    /// Next-hour prediction in the input's scale.
    pub fn forward(&self, grid: &WeatherGrid, pool: Option<&MemoryPool>, p: &ModelParams) -> Result<WeatherGrid> {
        let out = self.predict_values(grid, pool, p)?;
        if out.iter().any(|v| !v.is_finite()) {
            return Err(UxError::Domain("prediction is not finite".into()));
        }
        let next = WeatherGrid::new(
            out,
            grid.variables().to_vec(),
            *grid.timestamp() + Duration::hours(1),
            *grid.bounds(),
            grid.is_normalized(),
        )?;
        Ok(next)
    }

    /// L1 loss of one transition and its parameter gradient.
    pub fn loss_and_grad(&self, t: &Transition, pool: Option<&MemoryPool>, p: &ModelParams) -> Result<(f64, ModelParams)> {
        if t.input.values().dim() != t.target.values().dim() {
            return Err(UxError::dim("target", "input and target shapes differ"));
        }
        let mut g = Graph::new();
        let v = p.bind(&mut g);
        let x = g.input(Self::input_tensor(&t.input));
        let y = self.graph(&mut g, x, &t.input.calendar(), pool, &v)?;
        let target = Self::input_tensor(&t.target);
        let neg = target.data().iter().map(|v| -v).collect();
        let diff = g.add_const(y, &Tensor::new(target.shape().to_vec(), neg)?);
        let abs = g.abs(diff);
        let loss = g.mean(abs);
        let value = g.value(loss).item();
        let grads = g.backward(loss);
        Ok((value, v.grads(&grads)))
    }
}

/// AdamW with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update<P: ParamSet>(&mut self, params: &mut P, grads: &P, lr: f64) {
        let mut flat = Vec::new();
        grads.visit(&mut |_, t| flat.push(t.data().to_vec()));
        if self.m.is_empty() {
            self.m = flat.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let (wd, eps) = (self.weight_decay, self.eps);
        let (ms, vs) = (&mut self.m, &mut self.v);
        let mut i = 0;
        params.visit_mut(&mut |_, t| {
            for (j, th) in t.data_mut().iter_mut().enumerate() {
                let gr = flat[i][j];
                let m = &mut ms[i][j];
                let v = &mut vs[i][j];
                *m = b1 * *m + (1.0 - b1) * gr;
                *v = b2 * *v + (1.0 - b2) * gr * gr;
                *th -= lr * (wd * *th);
                *th -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
            i += 1;
        });
    }
}

/// Validation scores on the normalized scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationScore {
    /// `None` when no validation target holds an extreme cell.
    pub mae_ext: Option<f64>,
    pub mae_gen: f64,
}

impl ValidationScore {
    /// Quantity early stopping minimizes.
    pub fn selection(&self) -> f64 {
        self.mae_ext.unwrap_or(self.mae_gen)
    }
}

/// One line of the loss trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_l1: f64,
    pub val_mae_ext: Option<f64>,
    pub val_mae_gen: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch.
    pub best: ModelParams,
    pub last: ModelParams,
    pub best_epoch: usize,
    pub trace: Vec<EpochRecord>,
    pub stopped_early: bool,
    pub validations: usize,
}

/// Scores predictions against the targets of `set`; non-finite predictions
/// give a non-finite score rather than an error.
pub fn validate(model: &Model, set: &[Transition], pool: Option<&MemoryPool>, p: &ModelParams) -> Result<ValidationScore> {
    let (mut ext, mut ext_n, mut gen, mut gen_n) = (0.0, 0usize, 0.0, 0usize);
    for t in set {
        let pred = model.predict_values(&t.input, pool, p)?;
        for (((y, x, _), a), b) in pred.indexed_iter().zip(t.target.values().iter()) {
            let e = (a - b).abs();
            gen += e;
            gen_n += 1;
            if t.mask.get(y, x) {
                ext += e;
                ext_n += 1;
            }
        }
    }
    if gen_n == 0 {
        return Err(UxError::EmptySample);
    }
    Ok(ValidationScore { mae_ext: (ext_n > 0).then(|| ext / ext_n as f64), mae_gen: gen / gen_n as f64 })
}

/// Mini-batch L1 training with early stopping on `validator`. Gradients of a
/// batch are summed in timestep order and averaged. `observer` sees every
/// epoch record with the current parameters (for traces and checkpoints).
pub fn train_with(
    model: &Model,
    init: ModelParams,
    train: &[Transition],
    pool: Option<&MemoryPool>,
    validator: &mut dyn FnMut(&ModelParams) -> Result<ValidationScore>,
    observer: &mut dyn FnMut(&EpochRecord, &ModelParams) -> Result<()>,
) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(UxError::EmptyCorpus);
    }
    model.validate_params(&init)?;
    let cfg = &model.config;
    let mut params = init;
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut best: Option<(f64, usize, ModelParams)> = None;
    let mut trace = Vec::new();
    let mut stale = 0;
    let mut stopped_early = false;
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut total = 0.0;
        for batch in train.chunks(cfg.batch_size) {
            let mut acc: Option<ModelParams> = None;
            for t in batch {
                let (loss, grad) = model.loss_and_grad(t, pool, &params)?;
                if !loss.is_finite() {
                    return Err(UxError::TrainingDiverged { epoch });
                }
                total += loss;
                match acc.as_mut() {
                    None => acc = Some(grad),
                    Some(a) => add_into(a, &grad),
                }
            }
            let mut grad = acc.expect("batches are non-empty");
            let k = 1.0 / batch.len() as f64;
            grad.visit_mut(&mut |_, t| t.data_mut().iter_mut().for_each(|v| *v *= k));
            opt.update(&mut params, &grad, lr);
            if params_nonfinite(&params) {
                return Err(UxError::TrainingDiverged { epoch });
            }
        }
        let score = validator(&params)?;
        if !score.selection().is_finite() {
            return Err(UxError::TrainingDiverged { epoch });
        }
        let rec = EpochRecord {
            epoch,
            train_l1: total / train.len() as f64,
            val_mae_ext: score.mae_ext,
            val_mae_gen: score.mae_gen,
            lr,
        };
        trace.push(rec);
        observer(&rec, &params)?;
        let s = score.selection();
        match &best {
            Some((b, _, _)) if s >= *b => stale += 1,
            _ => {
                best = Some((s, epoch, params.clone()));
                stale = 0;
            }
        }
        if stale >= cfg.patience {
            stopped_early = true;
            break;
        }
    }
    let validations = trace.len();
    let (_, best_epoch, best) = best.expect("at least one epoch ran");
    Ok(TrainOutcome { best, last: params, best_epoch, trace, stopped_early, validations })
}

/// [`train_with`] validating on `val` (or on `train` when `val` is empty).
pub fn train(
    model: &Model,
    init: ModelParams,
    train: &[Transition],
    val: &[Transition],
    pool: Option<&MemoryPool>,
    observer: &mut dyn FnMut(&EpochRecord, &ModelParams) -> Result<()>,
) -> Result<TrainOutcome> {
    let set = if val.is_empty() { train } else { val };
    train_with(model, init, train, pool, &mut |p| validate(model, set, pool, p), observer)
}

fn add_into<P: ParamSet>(acc: &mut P, other: &P) {
    let mut flat = Vec::new();
    other.visit(&mut |_, t| flat.push(t.data().to_vec()));
    let mut i = 0;
    acc.visit_mut(&mut |_, t| {
        t.data_mut().iter_mut().zip(&flat[i]).for_each(|(a, b)| *a += b);
        i += 1;
    });
}

fn params_nonfinite<P: ParamSet>(p: &P) -> bool {
    let mut bad = false;
    p.visit(&mut |_, t| bad |= !t.is_finite());
    bad
}

/// Result of one entry of the gradient-check suite.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteEntry {
    pub component: String,
    pub tolerance: f64,
    pub report: GradCheckReport,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.report.max_rel_err() <= self.tolerance
    }
}

pub const MODULE_TOLERANCE: f64 = 1e-4;
pub const MODEL_TOLERANCE: f64 = 1e-3;

fn randn_array4(shape: (usize, usize, usize, usize), std: f64, rng: &mut ChaCha8Rng) -> Array4<f64> {
    let t = Tensor::randn(&[shape.0, shape.1, shape.2, shape.3], std, rng);
    Array4::from_shape_vec(shape, t.into_data()).unwrap()
}

/// Random pool with some masked entries, for gradient checks and benches.
pub fn probe_pool(registry: &EventRegistry, units: usize, shape: (usize, usize, usize), seed: u64) -> MemoryPool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let slots = (0..registry.slot_count())
        .map(|m| {
            let entries = randn_array4((units, shape.0, shape.1, shape.2), 1.0, &mut rng);
            let mask: Vec<bool> = (0..units).map(|u| u == 0 || (u + m) % 2 == 0).collect();
            let mut entries = entries;
            for (u, &ok) in mask.iter().enumerate() {
                if !ok {
                    entries.index_axis_mut(ndarray::Axis(0), u).fill(0.0);
                }
            }
            let provenance = mask.iter().map(|_| Vec::new()).collect();
            MemorySlot { entries, mask, provenance }
        })
        .collect();
    MemoryPool {
        registry: registry.clone(),
        units,
        region_height: shape.0,
        region_width: shape.1,
        channels: shape.2,
        seed,
        slots,
    }
}

/// Fixed-direction projection `<r, y>` keeps every output entry in play.
fn projection(g: &mut Graph, y: Var, seed: u64) -> Var {
    let shape = g.shape(y).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let r = g.input(Tensor::randn(&shape, 1.0, &mut rng));
    let prod = g.mul(y, r);
    g.sum(prod)
}

/// Per-module and full-model finite-difference checks for `cfg` on an
/// `h x w x c` grid with two event types (three memory slots). The desk
/// configuration on 20x20x2 is the reference setting.
pub fn gradcheck_suite(cfg: &TrainConfig, shape: (usize, usize, usize), opts: &GradCheckOptions) -> Result<Vec<SuiteEntry>> {
    let (h, w, c) = shape;
    let model = Model::new(*cfg, c)?;
    if h % cfg.region_height != 0 || w % cfg.region_width != 0 {
        return Err(UxError::Config(format!("{h}x{w} grid is not tiled by the configured regions")));
    }
    let registry = EventRegistry::new(vec!["heat".into(), "storm".into()])?;
    let pool = probe_pool(&registry, cfg.units, (cfg.region_height, cfg.region_width, c), opts.seed);
    let params = model.init_params(opts.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(1));
    let x = Tensor::randn(&[h, w, c], 1.0, &mut rng);
    let regions = Tensor::randn(&[2, cfg.region_height, cfg.region_width, c], 1.0, &mut rng);
    let cal = CalendarKey { month: 7, day: 14, hour: 9 };
    let mut out = Vec::new();

    let report = gradcheck(&params.epa, opts, |p| {
        let mut g = Graph::new();
        let v = p.bind(&mut g);
        let xr = g.input(regions.clone());
        let y = epa_graph(&mut g, xr, &pool, &v)?;
        let obj = projection(&mut g, y, opts.seed);
        Ok((g.value(obj).item(), v.grads(&g.backward(obj))))
    })?;
    out.push(SuiteEntry { component: "epa".into(), tolerance: MODULE_TOLERANCE, report });

    let report = gradcheck(&params.afm, opts, |p| {
        let mut g = Graph::new();
        let v = p.bind(&mut g);
        let xr = g.input(regions.clone());
        let y = afm_graph(&mut g, xr, xr, &cal, &v, &model.layout)?.output;
        let obj = projection(&mut g, y, opts.seed);
        Ok((g.value(obj).item(), v.grads(&g.backward(obj))))
    })?;
    out.push(SuiteEntry { component: "afm".into(), tolerance: MODULE_TOLERANCE, report });

    let bcfg = cfg.backbone();
    let report = gradcheck(&params.backbone, opts, |p| {
        let mut g = Graph::new();
        let v = p.bind(&mut g);
        let xi = g.input(x.clone());
        let y = backbone_graph(&mut g, xi, &v, &bcfg);
        let obj = projection(&mut g, y, opts.seed);
        Ok((g.value(obj).item(), v.grads(&g.backward(obj))))
    })?;
    out.push(SuiteEntry { component: "backbone".into(), tolerance: MODULE_TOLERANCE, report });

    let report = gradcheck(&params, opts, |p| {
        let mut g = Graph::new();
        let v = p.bind(&mut g);
        let xi = g.input(x.clone());
        let y = model.graph(&mut g, xi, &cal, Some(&pool), &v)?;
        let obj = projection(&mut g, y, opts.seed);
        Ok((g.value(obj).item(), v.grads(&g.backward(obj))))
    })?;
    out.push(SuiteEntry { component: "model".into(), tolerance: MODEL_TOLERANCE, report });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::{TimeZone, Utc};
    use rand_distr::{Distribution, StandardNormal};

    fn grid(seed: u64, hours: i64, shape: (usize, usize, usize)) -> WeatherGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = Array3::from_shape_simple_fn(shape, || StandardNormal.sample(&mut rng));
        WeatherGrid::from_values(v, Utc.with_ymd_and_hms(2022, 3, 1, 0, 0, 0).unwrap() + Duration::hours(hours)).unwrap()
    }

    fn desk() -> (Model, MemoryPool) {
        let model = Model::new(TrainConfig::desk(), 2).unwrap();
        let registry = EventRegistry::new(vec!["heat".into(), "storm".into()]).unwrap();
        (model, probe_pool(&registry, 2, (10, 10, 2), 3))
    }

    #[test]
    fn normalization_matches_two_pass_oracle() {
        let a = grid(1, 0, (3, 4, 2));
        let b = grid(2, 1, (3, 4, 2));
        let s = fit_normalization(&[a.clone(), b.clone()]).unwrap();
        for c in 0..2 {
            let vals: Vec<f64> =
                a.values().iter().chain(b.values().iter()).skip(c).step_by(2).copied().collect();
            assert_eq!(vals.len(), 24);
            let m = vals.iter().sum::<f64>() / 24.0;
            let sd = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 24.0).sqrt();
            assert!((s.mean[c] - m).abs() < 1e-12 && (s.std[c] - sd).abs() < 1e-12);
        }
        let n = s.normalize(&a).unwrap();
        assert!(n.is_normalized());
        let back = s.denormalize(&n).unwrap();
        assert!(back.values().iter().zip(a.values().iter()).all(|(x, y)| (x - y).abs() <= 1e-12));
    }

    #[test]
    fn normalized_fit_set_is_standard() {
        let gs: Vec<_> = (0..5).map(|i| grid(i, i as i64, (6, 6, 3))).collect();
        let gs: Vec<_> = gs.iter().map(|g| g.with_values(g.values() * 4.0 + 7.0, false).unwrap()).collect();
        let s = fit_normalization(&gs).unwrap();
        let ns: Vec<_> = gs.iter().map(|g| s.normalize(g).unwrap()).collect();
        let s2 = fit_normalization(&ns).unwrap();
        for c in 0..3 {
            assert!(s2.mean[c].abs() < 1e-12 && (s2.std[c] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_variable_is_rejected() {
        let mut v = grid(1, 0, (3, 3, 2)).values().clone();
        v.index_axis_mut(ndarray::Axis(2), 1).fill(5.0);
        let g = WeatherGrid::from_values(v, Utc.with_ymd_and_hms(2022, 1, 1, 0, 0, 0).unwrap()).unwrap();
        assert!(matches!(fit_normalization(&[g]), Err(UxError::DegenerateVariable { channel: 1 })));
        assert!(matches!(fit_normalization(&[]), Err(UxError::EmptyCorpus)));
    }

    #[test]
    fn config_defaults_and_schedule() {
        let c = TrainConfig::default();
        assert_eq!((c.learning_rate, c.weight_decay, c.decay_step, c.decay_factor), (1e-3, 3e-6, 1, 0.85));
        assert_eq!((c.patience, c.filters, c.growth, c.max_kappa, c.time_dim, c.units), (5, 10, 1.3, 70.0, 72, 5));
        assert_eq!((c.patch_height, c.region_height), (8, 10));
        assert!((c.lr_at(2) - 1e-3 * 0.85 * 0.85).abs() < 1e-18);
        let bad = TrainConfig { units: 0, ..c };
        assert!(matches!(bad.validate(), Err(UxError::Config(_))));
        let json = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<TrainConfig>(&json).unwrap(), c);
        let partial: TrainConfig = serde_json::from_str(r#"{"epochs": 3}"#).unwrap();
        assert_eq!(partial.epochs, 3);
    }

    #[test]
    fn forward_preserves_shape_and_is_pure() {
        let (model, pool) = desk();
        let p = model.init_params(1);
        let g = grid(4, 0, (20, 20, 2));
        let a = model.forward(&g, Some(&pool), &p).unwrap();
        let b = model.forward(&g, Some(&pool), &p).unwrap();
        assert_eq!(a.values().dim(), (20, 20, 2));
        assert_eq!(a, b);
        assert_eq!(*a.timestamp(), *g.timestamp() + Duration::hours(1));
    }

    #[test]
    fn zeroed_model_emits_output_bias() {
        let (model, pool) = desk();
        let mut p = model.zero_params();
        p.backbone.edge.out_b.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = i as f64 * 0.1);
        let out = model.forward(&grid(5, 0, (20, 20, 2)), Some(&pool), &p).unwrap();
        // every patch gets the same bias vector laid out over (py, px, c)
        for ((y, x, c), v) in out.values().indexed_iter() {
            let idx = ((y % 2) * 2 + x % 2) * 2 + c;
            assert!((v - idx as f64 * 0.1).abs() < 1e-12);
        }
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let (model, pool) = desk();
        let p = model.init_params(0);
        assert!(matches!(model.forward(&grid(1, 0, (15, 20, 2)), Some(&pool), &p), Err(UxError::Dimension { .. })));
        assert!(matches!(model.forward(&grid(1, 0, (20, 20, 2)), None, &p), Err(UxError::Config(_))));
        let other = probe_pool(&pool.registry, 2, (5, 5, 2), 0);
        assert!(matches!(model.forward(&grid(1, 0, (20, 20, 2)), Some(&other), &p), Err(UxError::Dimension { .. })));
    }

    #[test]
    fn ablations_run_without_pool() {
        let mut cfg = TrainConfig::desk();
        cfg.components = Components { epa: false, afm: true };
        let model = Model::new(cfg, 2).unwrap();
        let p = model.init_params(0);
        assert!(model.forward(&grid(1, 0, (20, 20, 2)), None, &p).is_ok());
    }

    #[test]
    fn loss_gradient_matches_differences() {
        let (model, pool) = desk();
        let p = model.init_params(2);
        let t = Transition { input: grid(1, 0, (20, 20, 2)), target: grid(2, 1, (20, 20, 2)), mask: ExtremeMask::empty(20, 20) };
        let (loss, _) = model.loss_and_grad(&t, Some(&pool), &p).unwrap();
        let pred = model.forward(&t.input, Some(&pool), &p).unwrap();
        let direct = crate::metrics::l1_loss(pred.values().view(), t.target.values().view()).unwrap();
        assert!((loss - direct).abs() < 1e-12);
        let opts = GradCheckOptions { max_entries: Some(3), ..Default::default() };
        let r = gradcheck(&p.backbone, &opts, |bp| {
            let q = ModelParams { backbone: bp.clone(), ..p.clone() };
            let (l, g) = model.loss_and_grad(&t, Some(&pool), &q)?;
            Ok((l, g.backbone))
        })
        .unwrap();
        assert!(r.max_rel_err() < 1e-3, "{}", r.max_rel_err());
    }

    #[test]
    fn full_suite_passes_on_desk_config() {
        let opts = GradCheckOptions { max_entries: Some(6), ..Default::default() };
        for e in gradcheck_suite(&TrainConfig::desk(), (20, 20, 2), &opts).unwrap() {
            assert!(e.passed(), "{} max rel err {}", e.component, e.report.max_rel_err());
        }
    }

    fn transitions(n: usize) -> Vec<Transition> {
        (0..n)
            .map(|i| {
                let input = grid(10 + i as u64, i as i64, (20, 20, 2));
                let target = input.with_values(input.values() * 0.5, false).unwrap();
                let mut mask = ExtremeMask::empty(20, 20);
                mask.bits[[3, 4]] = true;
                Transition { input, target, mask }
            })
            .collect()
    }

    #[test]
    fn transitions_skip_gaps() {
        let gs: Vec<_> = [0, 1, 2, 4, 5].iter().map(|&h| grid(h as u64, h, (2, 2, 1))).collect();
        let ms = vec![ExtremeMask::empty(2, 2); 5];
        let ts = build_transitions(&gs, &ms).unwrap();
        assert_eq!(ts.len(), 3);
        assert_eq!(ts[2].input, gs[3]);
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        let (model, pool) = desk();
        let model = Model { config: TrainConfig { learning_rate: 0.0, epochs: 3, ..model.config }, ..model };
        let p0 = model.init_params(0);
        let data = transitions(2);
        let mut seen = Vec::new();
        let out = train(&model, p0.clone(), &data, &[], Some(&pool), &mut |r, p| {
            assert_eq!(p, &p0);
            seen.push(r.train_l1);
            Ok(())
        })
        .unwrap();
        assert_eq!(out.last, p0);
        assert!(seen.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn patience_counts_validations() {
        let (model, pool) = desk();
        let model = Model { config: TrainConfig { patience: 2, epochs: 10, ..model.config }, ..model };
        let mut calls = 0;
        let out = train_with(
            &model,
            model.init_params(0),
            &transitions(1),
            Some(&pool),
            &mut |_| {
                calls += 1;
                Ok(ValidationScore { mae_ext: Some(1.0), mae_gen: 1.0 })
            },
            &mut |_, _| Ok(()),
        )
        .unwrap();
        assert_eq!(calls, 3);
        assert!(out.stopped_early);
        assert_eq!(out.best_epoch, 0);
    }

    #[test]
    fn runaway_updates_report_divergence() {
        let (model, pool) = desk();
        let model = Model { config: TrainConfig { learning_rate: 1e300, epochs: 4, ..model.config }, ..model };
        let mut epochs = 0;
        let err = train(&model, model.init_params(0), &transitions(1), &[], Some(&pool), &mut |_, _| {
            epochs += 1;
            Ok(())
        })
        .unwrap_err();
        assert!(matches!(err, UxError::TrainingDiverged { epoch } if epoch == epochs), "{err}");
    }

    #[test]
    fn adamw_first_step_is_signed_lr() {
        let mut p = EpaParams::zeros(1);
        p.q_b = Tensor::new(vec![1], vec![1.0]).unwrap();
        let mut g = p.zeros_like();
        g.q_b = Tensor::new(vec![1], vec![-3.0]).unwrap();
        let mut opt = AdamW::new(0.0);
        opt.update(&mut p, &g, 0.1);
        // bias-corrected first step has unit magnitude
        assert!((p.q_b.data()[0] - 1.1).abs() < 1e-7);
        assert_eq!(opt.steps(), 1);
    }
}
