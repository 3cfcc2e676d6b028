//! Central-finite-difference verification of the analytic backward pass.
//!
//! This is the independent oracle the rest of the crate leans on: any
//! scalar-valued forward graph can be checked parameter-by-parameter
//! against (f(th+eps) - f(th-eps)) / (2 eps) in float64.

use super::params::ParamStore;
use super::tape::{Tape, ValueId};
use crate::error::{Error, Result};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Clone, Debug)]
pub struct GradCheckRow {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub elements: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub rows: Vec<GradCheckRow>,
}

impl GradCheckReport {
    pub fn table(&self) -> String {
        let mut s = String::from("parameter                                elems   max_rel_err      analytic       numeric\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{:<40} {:>5}  {:>12.3e}  {:>12.5e}  {:>12.5e}\n",
                r.name, r.elements, r.max_rel_err, r.analytic, r.numeric
            ));
        }
        s.push_str(&format!("overall max_rel_err = {:.3e}\n", self.max_rel_err));
        s
    }
}

/// Relative error with an absolute floor so near-zero gradients compare on
/// an absolute scale.
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Check every non-frozen parameter of `store` against central differences.
///
/// `forward` must build the complete forward graph for the fragment under
/// test on the supplied tape and return the scalar loss node. It is invoked
/// once per perturbed parameter element, so fragments should stay small.
pub fn grad_check<Fwd>(store: &ParamStore<f64>, forward: Fwd, eps: f64) -> Result<GradCheckReport>
where
    Fwd: Fn(&ParamStore<f64>, &mut Tape<f64>) -> Result<ValueId> + Sync,
{
    if eps <= 0.0 {
        return Err(Error::contract("grad_check", format!("eps must be positive, got {eps}")));
    }

    let mut tape = Tape::new();
    let loss = forward(store, &mut tape)?;
    tape.backward(loss)?;
    let analytic = tape.param_grads();

    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let l = forward(s, &mut t)?;
        Ok(t.value(l).item())
    };

    let mut jobs: Vec<(String, usize)> = Vec::new();
    for name in store.trainable_names() {
        for i in 0..store.tensor(&name).len() {
            jobs.push((name.clone(), i));
        }
    }

    let run_job = |local: &mut ParamStore<f64>, name: &String, i: usize| -> Result<f64> {
        let original = local.tensor(name).data()[i];
        local.group_mut(name).unwrap().tensor.data_mut()[i] = original + eps;
        let plus = eval(local)?;
        local.group_mut(name).unwrap().tensor.data_mut()[i] = original - eps;
        let minus = eval(local)?;
        local.group_mut(name).unwrap().tensor.data_mut()[i] = original;
        Ok((plus - minus) / (2.0 * eps))
    };

    #[cfg(feature = "parallel")]
    let numeric: Result<Vec<f64>> = jobs
        .par_iter()
        .map_init(
            || store.clone(),
            |local, (name, i)| run_job(local, name, *i),
        )
        .collect();
    #[cfg(not(feature = "parallel"))]
    let numeric: Result<Vec<f64>> = {
        let mut local = store.clone();
        jobs.iter().map(|(name, i)| run_job(&mut local, name, *i)).collect()
    };
    let numeric = numeric?;

    let mut rows = Vec::new();
    let mut cursor = 0usize;
    let mut overall: f64 = 0.0;
    for name in store.trainable_names() {
        let n = store.tensor(&name).len();
        let grads = analytic.get(&name);
        let mut worst = GradCheckRow {
            name: name.clone(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            elements: n,
        };
        for i in 0..n {
            let a = grads.map_or(0.0, |g| g.data()[i]);
            let num = numeric[cursor + i];
            let e = rel_err(a, num);
            if e >= worst.max_rel_err {
                worst.max_rel_err = e;
                worst.worst_index = i;
                worst.analytic = a;
                worst.numeric = num;
            }
        }
        cursor += n;
        overall = overall.max(worst.max_rel_err);
        rows.push(worst);
    }

    Ok(GradCheckReport { max_rel_err: overall, rows })
}
