//! Central finite-difference gradient checker.
//!
//! Runs a scalar-valued forward function twice per perturbed element and
//! compares against the tape gradients. Meant to run in f64; f32 central
//! differences are too noisy for the 1e-6 tolerance used in tests.

use std::collections::BTreeMap;

use crate::graph::{Graph, Tx};
use crate::params::{Ctx, ParamStore};
use crate::tensor::{Dtype, Tensor};

pub struct GradOffender {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

pub struct GradReport {
    pub max_rel_err: f64,
    pub checked_elements: usize,
    pub offenders: Vec<GradOffender>,
}

impl GradReport {
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.max_rel_err < rel_tol
    }
}

/// Relative error with the denominator floored at 1.0 so that gradients
/// near zero are compared absolutely. Documented contract of all
/// gradient-check tolerances in this crate.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Check d(loss)/d(param) for every non-frozen parameter in the store
/// against central finite differences with step `eps`. Failures are
/// reported, never thrown.
pub fn grad_check<F>(store: &ParamStore, f: F, eps: f64) -> GradReport
where
    F: Fn(&Ctx) -> Tx,
{
    let names: Vec<String> = store.trainable_names();

    // analytic gradients from one tape
    let g = Graph::new(Dtype::F64);
    let ctx = Ctx::new(g.clone(), store);
    let loss = f(&ctx);
    let analytic: BTreeMap<String, Tensor> = ctx.grads(&loss);

    let eval = |s: &ParamStore| -> f64 {
        let g = Graph::new(Dtype::F64);
        let ctx = Ctx::new(g, s);
        f(&ctx).item()
    };

    let mut report = GradReport { max_rel_err: 0.0, checked_elements: 0, offenders: Vec::new() };
    let mut work = store.clone();
    for name in &names {
        let n = store.get(name).tensor.numel();
        for i in 0..n {
            let base = store.get(name).tensor.clone();
            let mut plus = base.clone();
            plus.data[i] += eps;
            work.set_tensor(name, plus);
            let fp = eval(&work);
            let mut minus = base.clone();
            minus.data[i] -= eps;
            work.set_tensor(name, minus);
            let fm = eval(&work);
            work.set_tensor(name, base);

            let numeric = (fp - fm) / (2.0 * eps);
            let an = analytic
                .get(name)
                .map(|t| t.data[i])
                .unwrap_or(0.0);
            let e = rel_err(an, numeric);
            report.checked_elements += 1;
            if e > report.max_rel_err {
                report.max_rel_err = e;
            }
            if e > 1e-7 {
                report.offenders.push(GradOffender {
                    name: name.clone(),
                    index: i,
                    analytic: an,
                    numeric,
                    rel_err: e,
                });
            }
        }
    }
    report
        .offenders
        .sort_by(|a, b| b.rel_err.partial_cmp(&a.rel_err).unwrap());
    report.offenders.truncate(10);
    report
}
