//! Central finite-difference validation of analytic gradients.

use super::{DiffError, ParamStore, Tape, VarId};

/// Outcome of a finite-difference sweep.
#[derive(Debug, Clone)]
pub struct FdReport {
    /// max over parameter entries of |analytic − FD| / max(1, |analytic|, |FD|)
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_entry: usize,
    pub entries_checked: usize,
}

/// Compare the tape gradient of `build` against central finite differences.
///
/// `build` must assemble the scalar loss on the given tape from parameter
/// ids handed over in store order, and must be deterministic: any random
/// draws have to be frozen inside the closure's captured state. Two
/// evaluations at the base point are compared bitwise to enforce this.
pub fn finite_difference_check<F>(
    store: &mut ParamStore,
    eps: f64,
    build: F,
) -> Result<FdReport, DiffError>
where
    F: Fn(&mut Tape, &[VarId]) -> VarId,
{
    assert!(eps > 0.0, "eps must be positive");
    let eval_value = |store: &ParamStore| -> f64 {
        let mut tape = Tape::new();
        let ids = store.register_all(&mut tape);
        let loss = build(&mut tape, &ids);
        tape.value(loss).data()[0]
    };

    let base_a = eval_value(store);
    let base_b = eval_value(store);
    if base_a.to_bits() != base_b.to_bits() {
        return Err(DiffError::NonDeterministic {
            first: base_a,
            second: base_b,
        });
    }

    let analytic: Vec<Vec<f64>> = {
        let mut tape = Tape::new();
        let ids = store.register_all(&mut tape);
        let loss = build(&mut tape, &ids);
        let grads = tape.backward(loss)?;
        ids.iter()
            .enumerate()
            .map(|(i, &id)| {
                grads
                    .of(id)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![0.0; store.at(i).1.numel()])
            })
            .collect()
    };

    let mut report = FdReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_entry: 0,
        entries_checked: 0,
    };
    for i in 0..store.len() {
        let numel = store.at(i).1.numel();
        for e in 0..numel {
            let orig = store.at(i).1.data()[e];
            store.at_mut(i).data_mut()[e] = orig + eps;
            let f_plus = eval_value(store);
            store.at_mut(i).data_mut()[e] = orig - eps;
            let f_minus = eval_value(store);
            store.at_mut(i).data_mut()[e] = orig;
            let fd = (f_plus - f_minus) / (2.0 * eps);
            let an = analytic[i][e];
            let rel = (an - fd).abs() / 1.0_f64.max(an.abs()).max(fd.abs());
            report.entries_checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = store.at(i).0.to_string();
                report.worst_entry = e;
            }
        }
    }
    Ok(report)
}
