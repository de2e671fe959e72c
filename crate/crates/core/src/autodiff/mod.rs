//! Minimal reverse-mode differentiation used by every trainable module, plus
//! the finite-difference harness that checks it.

mod graph;
mod tensor;

pub use graph::{beta_weight, Gradients, Graph, Var, ZERO};
pub use tensor::Tensor;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, UxError};

/// A named collection of trainable tensors.
pub trait ParamSet {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.len());
        n
    }

    fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(&mut |name, _| out.push(name.to_string()));
        out
    }
}

/// Initial value of a parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Zero-mean Gaussian with the given standard deviation.
    Normal(f64),
    /// Gaussian scaled by `1 / sqrt(fan_in)` times the factor.
    FanIn(usize, f64),
}

impl Init {
    pub fn make<R: rand::Rng + ?Sized>(self, shape: &[usize], rng: &mut R) -> Tensor {
        match self {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::filled(shape, 1.0),
            Init::Normal(std) => Tensor::randn(shape, std, rng),
            Init::FanIn(fan, k) => Tensor::randn(shape, k / (fan.max(1) as f64).sqrt(), rng),
        }
    }
}

/// Checks that `p` matches the tensor names and shapes of `reference` and is
/// finite throughout.
pub fn check_params<P: ParamSet>(p: &P, reference: &P) -> Result<()> {
    let mut shapes = Vec::new();
    reference.visit(&mut |name, t| shapes.push((name.to_string(), t.shape().to_vec())));
    let mut i = 0;
    let mut err = None;
    p.visit(&mut |name, t| {
        if err.is_some() {
            return;
        }
        match shapes.get(i) {
            Some((n, s)) if n == name && s.as_slice() == t.shape() => {
                if !t.is_finite() {
                    err = Some(UxError::Format(format!("parameter {name} is not finite")));
                }
            }
            Some((n, s)) => {
                err = Some(UxError::dim("parameters", format!("{name} {:?} where {n} {s:?} was expected", t.shape())))
            }
            None => err = Some(UxError::Format(format!("unexpected parameter {name}"))),
        }
        i += 1;
    });
    match err {
        Some(e) => Err(e),
        None if i != shapes.len() => Err(UxError::Format(format!("{i} parameters, expected {}", shapes.len()))),
        None => Ok(()),
    }
}

/// Declares a parameter struct, its bound-variable twin, and the glue between
/// them (binding onto a graph, reading gradients back, visiting by name).
macro_rules! param_set {
    (
        $(#[$meta:meta])*
        pub struct $name:ident / $vars:ident { $($field:ident),* $(,)? }
    ) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name {
            $(pub $field: $crate::autodiff::Tensor,)*
        }

        /// Graph handles for each tensor of the parameter set.
        #[derive(Debug, Clone, Copy)]
        pub struct $vars {
            $(pub $field: $crate::autodiff::Var,)*
        }

        impl $name {
            pub fn bind(&self, g: &mut $crate::autodiff::Graph) -> $vars {
                $vars { $($field: g.input(self.$field.clone()),)* }
            }

            /// Tensor of zeros shaped like every field.
            pub fn zeros_like(&self) -> Self {
                $name { $($field: $crate::autodiff::Tensor::zeros(self.$field.shape()),)* }
            }
        }

        impl $vars {
            pub fn grads(&self, grads: &$crate::autodiff::Gradients) -> $name {
                $name { $($field: grads.tensor(self.$field),)* }
            }
        }

        impl $crate::autodiff::ParamSet for $name {
            fn visit(&self, f: &mut dyn FnMut(&str, &$crate::autodiff::Tensor)) {
                $(f(stringify!($field), &self.$field);)*
            }

            fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut $crate::autodiff::Tensor)) {
                $(f(stringify!($field), &mut self.$field);)*
            }
        }
    };
}
pub(crate) use param_set;

/// Finite-difference check settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    /// Check at most this many entries per tensor (sampled with `seed`).
    pub max_entries: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { eps: 1e-4, floor: 1e-5, max_entries: None, seed: 0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max)
    }
}

/// Relative error `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares analytic gradients against central differences for every tensor
/// of `params`. `eval` returns the scalar objective and its analytic gradient
/// (as a parameter set of the same type).
pub fn gradcheck<P, F>(params: &P, opts: &GradCheckOptions, eval: F) -> Result<GradCheckReport>
where
    P: ParamSet + Clone,
    F: Fn(&P) -> Result<(f64, P)>,
{
    let (_, analytic) = eval(params)?;
    let mut analytic_flat: Vec<(String, Vec<f64>)> = Vec::new();
    analytic.visit(&mut |name, t| analytic_flat.push((name.to_string(), t.data().to_vec())));

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = Vec::new();
    for (name, grad) in &analytic_flat {
        let n = grad.len();
        let entries: Vec<usize> = match opts.max_entries {
            Some(k) if k < n => {
                let mut v = sample(&mut rng, n, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        let mut check = TensorCheck { name: name.clone(), checked: entries.len(), max_abs_err: 0.0, max_rel_err: 0.0 };
        for &i in &entries {
            let perturbed = |delta: f64| {
                let mut p = params.clone();
                p.visit_mut(&mut |nm, t| {
                    if nm == name {
                        t.data_mut()[i] += delta;
                    }
                });
                p
            };
            let (fp, _) = eval(&perturbed(opts.eps))?;
            let (fm, _) = eval(&perturbed(-opts.eps))?;
            let numeric = (fp - fm) / (2.0 * opts.eps);
            let a = grad[i];
            check.max_abs_err = check.max_abs_err.max((a - numeric).abs());
            check.max_rel_err = check.max_rel_err.max(rel_err(a, numeric, opts.floor));
        }
        report.push(check);
    }
    Ok(GradCheckReport { tensors: report })
}
