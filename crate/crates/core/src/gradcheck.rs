//! Central finite-difference checks of tape gradients.
//!
//! The numeric side only ever runs forward passes, so it shares no code with
//! the backward closures it validates.

use rand::seq::index::sample;

use crate::error::Result;
use crate::rng;
use crate::tensor::{ParamStore, Tape, Var};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Lower bound of the relative-error denominator, so gradients that are
    /// zero up to rounding do not divide by ~0.
    pub floor: f64,
    /// Check at most this many entries per parameter (sampled), `None` = all.
    pub max_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-6,
            max_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<Mismatch>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_error <= tol
    }
}

/// Compares backward-pass gradients of every parameter in `store` with
/// central differences of `loss_fn`, which must build a scalar loss.
pub fn check_gradients<F>(
    store: &mut ParamStore,
    loss_fn: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    store.zero_grad();
    {
        let mut tape = Tape::new();
        let loss = loss_fn(&mut tape, store)?;
        tape.backward_into(loss, store)?;
    }
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = loss_fn(&mut tape, store)?;
        Ok(tape.value(loss).data()[0])
    };

    let mut report = GradCheckReport::default();
    let ids: Vec<_> = store.ids().collect();
    for (pi, id) in ids.into_iter().enumerate() {
        let n = store.get(id).numel();
        let analytic = store
            .get(id)
            .grad()
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; n]);
        let indices: Vec<usize> = match opts.max_per_param {
            Some(k) if k < n => {
                let mut r = rng::stream(opts.seed, pi as u64);
                let mut v = sample(&mut r, n, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        for i in indices {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + opts.step;
            let plus = eval(store)?;
            store.get_mut(id).data_mut()[i] = orig - opts.step;
            let minus = eval(store)?;
            store.get_mut(id).data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some(Mismatch {
                    param: store.name(id).to_string(),
                    index: i,
                    analytic: a,
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }
    store.zero_grad();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn detects_correct_and_wrong_gradients() {
        let mut store = ParamStore::new();
        let w = store
            .insert("w", Tensor::new(&[3], vec![0.3, -1.2, 2.0]).unwrap())
            .unwrap();
        let ok = check_gradients(
            &mut store,
            |t, s| {
                let v = t.param(s, w);
                let sq = t.mul(v, v)?;
                Ok(t.sum(sq))
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(ok.passes(1e-6), "{ok:?}");

        // scale() records its own backward; a loss that routes the value
        // through a constant copy has a zero analytic gradient.
        let bad = check_gradients(
            &mut store,
            |t, s| {
                let copy = t.constant(s.get(w).clone());
                let v = t.param(s, w);
                let z = t.scale(v, 0.0);
                let y = t.add(z, copy)?;
                let sq = t.mul(y, y)?;
                Ok(t.sum(sq))
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(!bad.passes(1e-4));
    }
}
