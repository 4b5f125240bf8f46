//! Central finite-difference oracle for the autodiff graph.
//!
//! The numeric side only ever evaluates forward passes, so it stays independent
//! of the backward rules it is checking.
//!
//! A central difference is only meaningful where the function is smooth on
//! `[x − h, x + h]`. Probes whose perturbation flips the active side of any
//! ReLU or clamp are counted as `skipped` rather than compared.

use crate::error::{Error, Result};
use crate::nn::{EntryKind, ParamId, ParamStore, Session};
use crate::tensor::{Graph, Op, Tensor, Var};

/// Worst disagreement between analytic and numeric gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// (input index, flat element index) of the worst relative error.
    pub worst: (usize, usize),
    pub checked: usize,
    /// Probes straddling a kink.
    pub skipped: usize,
}

impl Default for GradReport {
    fn default() -> Self {
        Self {
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            worst: (0, 0),
            checked: 0,
            skipped: 0,
        }
    }
}

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }

    fn record(&mut self, at: (usize, usize), analytic: f64, plus: (f64, Vec<bool>), minus: (f64, Vec<bool>), base: &[bool], h: f64) {
        if plus.1 != base || minus.1 != base {
            self.skipped += 1;
            return;
        }
        let numeric = (plus.0 - minus.0) / (2.0 * h);
        let rel = relative_error(analytic, numeric);
        self.max_abs_err = self.max_abs_err.max((analytic - numeric).abs());
        if rel > self.max_rel_err {
            self.max_rel_err = rel;
            self.worst = at;
        }
        self.checked += 1;
    }
}

/// Denominator floor. Below it the ratio measures absolute error, so a gradient
/// that is exactly zero (a bias feeding a batch norm) is not judged against
/// the rounding noise of the difference quotient, which is about 1e-10 here.
pub const REL_FLOOR: f64 = 1e-5;

/// Which side of its threshold every ReLU and clamp input lies on.
fn kink_pattern(g: &Graph<f64>) -> Vec<bool> {
    let mut out = Vec::new();
    for v in g.vars() {
        let (x, min) = match g.op(v) {
            Op::Relu { x } => (*x, 0.0),
            Op::ClampMin { x, min } => (*x, *min),
            _ => continue,
        };
        out.extend(g.value(x).data().iter().map(|&a| a > min));
    }
    out
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compare `∂f/∂inputs` from `backward` against central differences with step `h`.
///
/// `f` must build a scalar from the given leaves; it is re-run from scratch on a
/// fresh graph for every perturbation. `select` limits which (input, element)
/// pairs are probed; `None` probes everything.
pub fn check<F>(inputs: &[Tensor<f64>], h: f64, select: Option<&[(usize, usize)]>, f: F) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<(f64, Vec<bool>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok((g.value(out).item(), kink_pattern(&g)))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let base = kink_pattern(&g);
    g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .map(|&v| g.grad(v).cloned().ok_or_else(|| Error::Invariant("missing gradient".into())))
        .collect::<Result<_>>()?;

    let all: Vec<(usize, usize)>;
    let probes = match select {
        Some(s) => s,
        None => {
            all = inputs
                .iter()
                .enumerate()
                .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
                .collect();
            &all
        }
    };

    let mut report = GradReport::default();
    let mut work = inputs.to_vec();
    for &(i, j) in probes {
        let orig = work[i].data()[j];
        work[i].data_mut()[j] = orig + h;
        let plus = eval(&work)?;
        work[i].data_mut()[j] = orig - h;
        let minus = eval(&work)?;
        work[i].data_mut()[j] = orig;
        report.record((i, j), analytic[i].data()[j], plus, minus, &base, h);
    }
    Ok(report)
}

/// Evenly spaced element indices, at most `limit` of them.
fn probe_indices(numel: usize, limit: Option<usize>) -> Vec<usize> {
    match limit {
        Some(k) if k < numel => (0..k).map(|t| t * numel / k + (numel / k) / 2).collect(),
        _ => (0..numel).collect(),
    }
}

/// Which elements [`check_module`] perturbs.
#[derive(Clone, Copy)]
pub struct Probe<'a> {
    /// At most this many evenly spaced elements per tensor.
    pub per_tensor: Option<usize>,
    /// Trainable store entries to probe, by name.
    pub params: &'a dyn Fn(&str) -> bool,
}

impl Probe<'_> {
    pub const ALL: Probe<'static> = Probe {
        per_tensor: None,
        params: &|_| true,
    };

    pub fn sampled(per_tensor: usize) -> Probe<'static> {
        Probe {
            per_tensor: Some(per_tensor),
            params: &|_| true,
        }
    }
}

/// [`check`] for model code: probes the inputs and the selected trainable
/// entries of `store`. Every evaluation runs on a fresh copy of the store, so
/// buffer updates made by `f` do not leak between perturbations. In the
/// report, `worst.0` counts inputs first, then the probed entries in store order.
pub fn check_module<F>(
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    h: f64,
    probe: Probe<'_>,
    training: bool,
    f: F,
) -> Result<GradReport>
where
    F: Fn(&mut Session<'_, f64>, &[Var]) -> Result<Var>,
{
    let params: Vec<ParamId> = store
        .iter()
        .filter(|(_, name, e)| e.kind == EntryKind::Param && (probe.params)(name))
        .map(|(id, _, _)| id)
        .collect();
    let eval = |st: &ParamStore<f64>, values: &[Tensor<f64>]| -> Result<(f64, Vec<bool>)> {
        let mut st = st.clone();
        let mut s = Session::new(&mut st, training);
        let vars: Vec<Var> = values.iter().map(|t| s.graph.param(t.clone())).collect();
        let out = f(&mut s, &vars)?;
        Ok((s.graph.value(out).item(), kink_pattern(&s.graph)))
    };

    let mut st = store.clone();
    let mut s = Session::new(&mut st, training);
    let vars: Vec<Var> = inputs.iter().map(|t| s.graph.param(t.clone())).collect();
    let out = f(&mut s, &vars)?;
    let base = kink_pattern(&s.graph);
    let grads = s.backward(out)?;
    let mut analytic: Vec<Tensor<f64>> = vars
        .iter()
        .map(|&v| s.graph.grad(v).cloned().ok_or_else(|| Error::Invariant("missing input gradient".into())))
        .collect::<Result<_>>()?;
    for &id in &params {
        let zero = Tensor::zeros(store.get(id).shape());
        analytic.push(grads.get(id).cloned().unwrap_or(zero));
    }
    drop(s);

    let mut report = GradReport::default();
    let mut work_inputs = inputs.to_vec();
    let mut work_store = store.clone();
    let n_in = inputs.len();
    for (t, a) in analytic.iter().enumerate() {
        for j in probe_indices(a.numel(), probe.per_tensor) {
            let mut at = |delta: f64| -> Result<(f64, Vec<bool>)> {
                let set = |wi: &mut [Tensor<f64>], ws: &mut ParamStore<f64>, v: Option<f64>| -> f64 {
                    let cell = if t < n_in {
                        &mut wi[t].data_mut()[j]
                    } else {
                        &mut ws.get_mut(params[t - n_in]).data_mut()[j]
                    };
                    let old = *cell;
                    if let Some(v) = v {
                        *cell = v;
                    }
                    old
                };
                let orig = set(&mut work_inputs, &mut work_store, None);
                set(&mut work_inputs, &mut work_store, Some(orig + delta));
                let v = eval(&work_store, &work_inputs);
                set(&mut work_inputs, &mut work_store, Some(orig));
                v
            };
            let (plus, minus) = (at(h)?, at(-h)?);
            report.record((t, j), a.data()[j], plus, minus, &base, h);
        }
    }
    Ok(report)
}
