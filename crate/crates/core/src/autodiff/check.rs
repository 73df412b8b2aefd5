//! Central finite-difference gradient checking.
//!
//! The numeric side only ever runs forward passes, so it is independent of
//! every backward rule on the tape.

use super::graph::{Graph, Var};
use super::params::{Mat, ParamStore};

/// Gradients smaller than this are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Location of the worst entry, e.g. `param enc.wq[3,1]` or `input 0[2,5]`.
    pub worst: String,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err < tol
    }
}

/// Compare tape gradients of the scalar returned by `f` against central differences.
///
/// `f` receives a fresh graph over `store` and leaf vars for `inputs`; it must return a
/// `(1,1)` node. At most `max_entries` entries per tensor are probed, spread evenly.
pub fn check_gradients<F>(
    store: &mut ParamStore,
    inputs: &mut [Mat],
    f: F,
    h: f64,
    max_entries: usize,
) -> GradCheckReport
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Var,
{
    let eval = |store: &ParamStore, inputs: &[Mat]| -> f64 {
        let mut g = Graph::new(store);
        let vars: Vec<Var> = inputs.iter().map(|m| g.input(m.clone())).collect();
        let out = f(&mut g, &vars);
        g.scalar(out)
    };

    let (param_grads, input_grads) = {
        let mut g = Graph::new(store);
        let vars: Vec<Var> = inputs.iter().map(|m| g.input(m.clone())).collect();
        let out = f(&mut g, &vars);
        let grads = g.backward(out);
        let ig: Vec<Mat> = vars
            .iter()
            .zip(inputs.iter())
            .map(|(v, m)| grads.wrt(*v).cloned().unwrap_or_else(|| Mat::zeros(m.dim())))
            .collect();
        (grads.into_param_grads(store), ig)
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        worst: String::new(),
    };
    let record = |err: f64, loc: String, report: &mut GradCheckReport| {
        report.checked += 1;
        if report.worst.is_empty() || err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst = loc;
        }
    };

    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let len = store.get(id).len();
        for flat in probe_positions(len, max_entries) {
            let orig = store.get(id).as_slice().expect("standard layout")[flat];
            store.get_mut(id).as_slice_mut().expect("standard layout")[flat] = orig + h;
            let up = eval(store, inputs);
            store.get_mut(id).as_slice_mut().expect("standard layout")[flat] = orig - h;
            let down = eval(store, inputs);
            store.get_mut(id).as_slice_mut().expect("standard layout")[flat] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = param_grads[id.index()].as_slice().expect("standard layout")[flat];
            let loc = format!("param {}[{flat}] analytic={analytic:e} numeric={numeric:e}", store.name(id));
            record(relative_error(analytic, numeric), loc, &mut report);
        }
    }

    for k in 0..inputs.len() {
        let len = inputs[k].len();
        for flat in probe_positions(len, max_entries) {
            let orig = inputs[k].as_slice().expect("standard layout")[flat];
            inputs[k].as_slice_mut().expect("standard layout")[flat] = orig + h;
            let up = eval(store, inputs);
            inputs[k].as_slice_mut().expect("standard layout")[flat] = orig - h;
            let down = eval(store, inputs);
            inputs[k].as_slice_mut().expect("standard layout")[flat] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = input_grads[k].as_slice().expect("standard layout")[flat];
            let loc = format!("input {k}[{flat}] analytic={analytic:e} numeric={numeric:e}");
            record(relative_error(analytic, numeric), loc, &mut report);
        }
    }
    report
}

fn probe_positions(len: usize, max_entries: usize) -> Vec<usize> {
    if len <= max_entries {
        (0..len).collect()
    } else {
        (0..max_entries).map(|i| i * len / max_entries).collect()
    }
}
