use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::ParamStore;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub h: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    /// Coordinates probed per parameter tensor; `None` checks all of them.
    pub max_coords_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            h: 1e-5,
            floor: 1e-8,
            max_coords_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Parameter name, flat index, analytic and numeric derivative at the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

fn eval(store: &ParamStore, f: &impl Fn(&mut Tape) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::with_params(store);
    let out = f(&mut tape)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::shape("grad_check", "objective must be scalar"));
    }
    let v = v.item();
    if !v.is_finite() {
        return Err(Error::NonFinite {
            what: "grad_check objective".into(),
            index: 0,
        });
    }
    Ok(v)
}

/// Compares tape gradients of a scalar objective against central differences.
///
/// The relative error per coordinate is `|a - n| / max(|a|, |n|, floor)`.
pub fn grad_check(
    store: &ParamStore,
    f: impl Fn(&mut Tape) -> Result<Var>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    eval(store, &f)?;
    let grads = {
        let mut tape = Tape::with_params(store);
        let out = f(&mut tape)?;
        tape.backward(out)?.into_param_grads(store)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        worst: None,
    };
    let mut probe = store.clone();
    for id in store.ids() {
        let n = store.get(id).len();
        let coords: Vec<usize> = match opts.max_coords_per_param {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for i in coords {
            let analytic = grads.get(id).map_or(0.0, |g| g[i]);
            let orig = store.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + opts.h;
            let fp = eval(&probe, &f)?;
            probe.get_mut(id).data_mut()[i] = orig - opts.h;
            let fm = eval(&probe, &f)?;
            probe.get_mut(id).data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * opts.h);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(opts.floor);
            report.checked += 1;
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(rel);
                report.worst = Some((store.name(id).to_string(), i, analytic, numeric));
            }
        }
    }
    Ok(report)
}
