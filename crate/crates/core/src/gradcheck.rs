//! Central finite differences against backprop.

use crate::error::Result;
use crate::par::Executor;
use crate::params::ParamStore;
use crate::tape::{OpKind, Tape, Var};

/// Denominator floor for the relative error, so entries whose true
/// gradient is zero compare on an absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct Mismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst: Option<Mismatch>,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Check every scalar of every parameter in `store`.
pub fn grad_check<F>(f: F, store: &ParamStore, fd_step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var> + Sync,
{
    grad_check_with(f, store, fd_step, None, &Executor::sequential())
}

/// As [`grad_check`], optionally corrupting one backward rule in the
/// analytic pass, with parameter entries spread over `exec`.
pub fn grad_check_with<F>(
    f: F,
    store: &ParamStore,
    fd_step: f64,
    corrupt: Option<OpKind>,
    exec: &Executor,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var> + Sync,
{
    let mut tape = match corrupt {
        Some(k) => Tape::with_corrupted_rule(k),
        None => Tape::new(),
    };
    let loss = f(&mut tape, store)?;
    let grads = tape.backward(loss)?;

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let l = f(&mut t, s)?;
        Ok(t.value(l).item())
    };

    let names: Vec<String> = store.names().map(str::to_string).collect();
    let per_entry = exec.map(&names, |name| -> Result<Vec<Mismatch>> {
        let mut local = store.clone();
        let n = local.get(name)?.len();
        let analytic = grads
            .param(name)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; n]);
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let orig = local.get(name)?.data()[i];
            local.get_mut(name)?.data_mut()[i] = orig + fd_step;
            let up = eval(&local)?;
            local.get_mut(name)?.data_mut()[i] = orig - fd_step;
            let down = eval(&local)?;
            local.get_mut(name)?.data_mut()[i] = orig;
            out.push(Mismatch {
                param: name.clone(),
                index: i,
                analytic: analytic[i],
                numeric: (up - down) / (2.0 * fd_step),
            });
        }
        Ok(out)
    });

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
    };
    for entry in per_entry {
        for m in entry? {
            report.checked += 1;
            let e = relative_error(m.analytic, m.numeric);
            if e > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(e);
                report.worst = Some(m);
            }
        }
    }
    Ok(report)
}
