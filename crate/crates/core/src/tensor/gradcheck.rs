//! Central finite-difference verification of analytic gradients.
//!
//! The numerical side always runs in `f64`. In [`Precision::F32`] mode the
//! analytic gradient comes from an `f32` graph, which is how the training
//! path is verified; [`Precision::F64`] checks the same code in double precision.

use super::{Graph, ParamStore, Real, Var};
use crate::error::{bail, Result};

/// A scalar function of the parameters in a store, evaluable at any precision.
pub trait Objective {
    fn eval<S: Real>(&self, g: &Graph<'_, S>) -> Result<Var>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    /// Pass threshold on the maximum relative error.
    pub fn tolerance(self) -> f64 {
        match self {
            Precision::F32 => 1e-3,
            Precision::F64 => 1e-5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub max_rel_err: f64,
    /// `name[index]` of the worst coordinate.
    pub worst: String,
    pub coords: usize,
}

impl GradReport {
    pub fn passes(&self, p: Precision) -> bool {
        self.max_rel_err < p.tolerance()
    }
}

/// `|a - n| / max(1, |a|, |n|)`
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / 1f64.max(a.abs()).max(n.abs())
}

fn eval_f64<O: Objective>(obj: &O, store: &ParamStore<f64>) -> Result<f64> {
    let g = Graph::inference(store);
    let v = obj.eval(&g)?;
    let val = g.value(v);
    if val.len() != 1 {
        bail!(Shape, "gradient check needs a scalar objective, got {:?}", val.shape());
    }
    let x = val.data()[0];
    if !x.is_finite() {
        bail!(Numeric, "objective is not finite");
    }
    Ok(x)
}

fn analytic<S: Real, O: Objective>(obj: &O, store: &ParamStore<S>) -> Result<Vec<Vec<f64>>> {
    let g = Graph::with_params(store);
    let v = obj.eval(&g)?;
    let grads = g.backward(v)?;
    let mut out: Vec<Vec<f64>> = store.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
    for (id, gv) in grads.params() {
        out[id.index()] = gv.iter().map(|x| x.as_f64()).collect();
    }
    Ok(out)
}

/// Compare analytic and central-difference gradients for every trainable coordinate.
pub fn grad_check<O: Objective>(obj: &O, params: &ParamStore<f64>, eps: f64, precision: Precision) -> Result<GradReport> {
    check_inner(obj, params, eps, precision, usize::MAX)
}

/// As [`grad_check`] but samples at most `per_param` evenly spaced coordinates per tensor.
pub fn grad_check_sampled<O: Objective>(obj: &O, params: &ParamStore<f64>, eps: f64, precision: Precision, per_param: usize) -> Result<GradReport> {
    check_inner(obj, params, eps, precision, per_param.max(1))
}

fn check_inner<O: Objective>(obj: &O, params: &ParamStore<f64>, eps: f64, precision: Precision, per_param: usize) -> Result<GradReport> {
    if !(eps > 0.0) {
        bail!(Config, "finite-difference step must be positive");
    }
    let ana = match precision {
        Precision::F64 => analytic(obj, params)?,
        Precision::F32 => analytic(obj, &params.cast::<f32>())?,
    };
    eval_f64(obj, params)?;
    let mut work = params.clone();
    let mut report = GradReport { max_rel_err: 0.0, worst: String::new(), coords: 0 };
    for (id, name, t) in params.iter() {
        if !params.is_trainable(id) {
            continue;
        }
        let n = t.len();
        let stride = n.div_ceil(per_param.min(n));
        for k in (0..n).step_by(stride) {
            let orig = t.data()[k];
            work.data_mut(id)[k] = orig + eps;
            let plus = eval_f64(obj, &work)?;
            work.data_mut(id)[k] = orig - eps;
            let minus = eval_f64(obj, &work)?;
            work.data_mut(id)[k] = orig;
            let num = (plus - minus) / (2.0 * eps);
            let e = rel_err(ana[id.index()][k], num);
            report.coords += 1;
            if e > report.max_rel_err || report.worst.is_empty() {
                report.max_rel_err = e;
                report.worst = format!("{name}[{k}]");
            }
        }
    }
    Ok(report)
}

/// Closure-based check in 64-bit mode.
pub fn grad_check_fn(f: impl Fn(&Graph<'_, f64>) -> Result<Var>, params: &ParamStore<f64>, eps: f64) -> Result<GradReport> {
    let g = Graph::with_params(params);
    let v = f(&g)?;
    let grads = g.backward(v)?;
    let mut ana: Vec<Vec<f64>> = params.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
    for (id, gv) in grads.params() {
        ana[id.index()] = gv.to_vec();
    }
    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let g = Graph::inference(store);
        let v = f(&g)?;
        let x = g.scalar(v);
        if !x.is_finite() {
            bail!(Numeric, "objective is not finite");
        }
        Ok(x)
    };
    eval(params)?;
    let mut work = params.clone();
    let mut report = GradReport { max_rel_err: 0.0, worst: String::new(), coords: 0 };
    for (id, name, t) in params.iter() {
        if !params.is_trainable(id) {
            continue;
        }
        for (k, &orig) in t.data().iter().enumerate() {
            work.data_mut(id)[k] = orig + eps;
            let plus = eval(&work)?;
            work.data_mut(id)[k] = orig - eps;
            let minus = eval(&work)?;
            work.data_mut(id)[k] = orig;
            let e = rel_err(ana[id.index()][k], (plus - minus) / (2.0 * eps));
            report.coords += 1;
            if e > report.max_rel_err || report.worst.is_empty() {
                report.max_rel_err = e;
                report.worst = format!("{name}[{k}]");
            }
        }
    }
    Ok(report)
}
