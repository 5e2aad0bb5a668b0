//! Central finite-difference checks of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{Bound, ParamStore};
use super::tape::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Default finite-difference step. The fourth-order stencil keeps truncation
/// error near `h⁴` while rounding noise shrinks with larger `h`.
pub const DEFAULT_STEP: f64 = 1e-3;

/// Gradient magnitudes below this are compared on an absolute scale.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// Fourth-order central difference `(-f(+2h) + 8f(+h) - 8f(-h) + f(-2h)) / 12h`
/// from evaluations at the four offsets.
fn stencil(h: f64, mut f: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    let (p2, p1, m1, m2) = (f(2.0 * h)?, f(h)?, f(-h)?, f(-2.0 * h)?);
    Ok((-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * h))
}

/// Central differences of a scalar function of one tensor.
pub fn finite_difference(x: &Tensor<f64>, h: f64, mut f: impl FnMut(&Tensor<f64>) -> f64) -> Tensor<f64> {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        let d = stencil(h, |dx| {
            probe.data_mut()[i] = orig + dx;
            Ok(f(&probe))
        });
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = d.expect("infallible");
    }
    out
}

/// Worst `|a - b| / max(|a|, |b|, floor)` over all entries.
pub fn relative_error(a: &Tensor<f64>, b: &Tensor<f64>, floor: f64) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Parameter and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    /// Tape gradient and finite difference at the worst entry.
    pub worst_values: (f64, f64),
    pub checked: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub floor: f64,
    /// Coordinates sampled per parameter tensor; `None` checks every entry.
    pub per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: DEFAULT_STEP,
            floor: RELATIVE_FLOOR,
            per_param: None,
            seed: 0,
        }
    }
}

/// Compare the tape gradient of `loss` against central differences for every
/// parameter in `params` (or a seeded sample of coordinates in each).
pub fn grad_check<L>(params: &ParamStore<f64>, opts: &GradCheckOptions, loss: L) -> Result<GradCheckReport>
where
    L: for<'g> Fn(&Bound<'g, f64>) -> Result<Var<'g, f64>>,
{
    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let graph = Graph::new();
        let bound = store.bind(&graph);
        let value = loss(&bound)?.value().item();
        if !value.is_finite() {
            return Err(Error::NonFinite {
                what: "gradient-check loss".into(),
            });
        }
        Ok(value)
    };

    let graph = Graph::new();
    let bound = params.bind(&graph);
    let out = loss(&bound)?;
    if !out.value().item().is_finite() {
        return Err(Error::NonFinite {
            what: "gradient-check loss".into(),
        });
    }
    let tape = graph.backward(out)?.into_named();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        worst_values: (0.0, 0.0),
        checked: 0,
    };
    for (name, grad) in &tape {
        let n = grad.numel();
        let coords: Vec<usize> = match opts.per_param {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for i in coords {
            let orig = probe.get(name).expect("bound parameter").data()[i];
            let fd = stencil(opts.step, |dx| {
                probe.get_mut(name).expect("bound parameter").data_mut()[i] = orig + dx;
                eval(&probe)
            });
            probe.get_mut(name).expect("bound parameter").data_mut()[i] = orig;
            let fd = fd?;
            let a = grad.data()[i];
            let err = (a - fd).abs() / a.abs().max(fd.abs()).max(opts.floor);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = err;
                report.worst = Some((name.clone(), i));
                report.worst_values = (a, fd);
            }
        }
    }
    Ok(report)
}
