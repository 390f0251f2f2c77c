//! Central finite-difference checks against tape gradients.

use rand::Rng;

use super::params::ParamStore;
use super::tape::{Tape, Var};
use super::Tensor;
use crate::error::{Error, Result};

fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn finite_loss(tape: &Tape, loss: Var, what: &str) -> Result<f64> {
    let v = tape.value(loss).item()?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("loss at probe {what}")))
    }
}

/// Largest elementwise relative error between the tape gradient of `f` at
/// `point` and its central difference with step `h`.
///
/// The caller keeps `point` away from relu kinks.
pub fn grad_check<F>(f: F, point: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("step h must be > 0, got {h}")));
    }
    let mut store = ParamStore::new();
    store.insert("x", point.clone())?;
    let mut tape = Tape::new();
    let x = tape.param(&store, "x")?;
    let loss = f(&mut tape, x)?;
    finite_loss(&tape, loss, "center")?;
    let analytic = tape.backward(loss, &store)?.swap_remove("x").expect("x");

    let eval = |p: Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let x = t.constant(p);
        let l = f(&mut t, x)?;
        finite_loss(&t, l, "offset")
    };

    let mut worst = 0.0f64;
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += h;
        let mut minus = point.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        worst = worst.max(rel_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// One scalar coordinate of a named parameter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Probe {
    pub name: String,
    pub index: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Probes dropped because the offset evaluations crossed a relu kink.
    pub skipped_kinks: usize,
    /// `(probe, analytic, numeric)` of the worst checked coordinate.
    pub worst: Option<(Probe, f64, f64)>,
}

/// Draws `count` probes: a uniformly chosen entry, then a uniform index in it.
pub fn random_probes<R: Rng + ?Sized>(params: &ParamStore, count: usize, rng: &mut R) -> Vec<Probe> {
    let entries: Vec<(&String, &Tensor)> = params.iter().collect();
    (0..count)
        .map(|_| {
            let (name, t) = entries[rng.random_range(0..entries.len())];
            Probe {
                name: name.clone(),
                index: rng.random_range(0..t.len()),
            }
        })
        .collect()
}

/// Checks the gradient of `f` with respect to the probed parameter
/// coordinates. Probes whose `±h` evaluations take a different relu branch
/// than the centre are skipped and counted.
pub fn grad_check_params<F>(
    f: F,
    params: &ParamStore,
    probes: &[Probe],
    h: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, params)?;
    finite_loss(&tape, loss, "center")?;
    let pattern = tape.relu_pattern();
    let grads = tape.backward(loss, params)?;

    let eval = |p: &ParamStore| -> Result<(f64, u64)> {
        let mut t = Tape::new();
        let l = f(&mut t, p)?;
        Ok((finite_loss(&t, l, "offset")?, t.relu_pattern()))
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped_kinks: 0,
        worst: None,
    };
    for probe in probes {
        let base = params
            .get(&probe.name)
            .ok_or_else(|| Error::UnknownParam(probe.name.clone()))?;
        if probe.index >= base.len() {
            return Err(Error::InvalidArgument(format!(
                "probe index {} out of range for `{}`",
                probe.index, probe.name
            )));
        }
        let mut shifted = params.clone();
        shifted.get_mut(&probe.name).unwrap().data_mut()[probe.index] += h;
        let (fp, pp) = eval(&shifted)?;
        shifted.get_mut(&probe.name).unwrap().data_mut()[probe.index] -= 2.0 * h;
        let (fm, pm) = eval(&shifted)?;
        if pp != pattern || pm != pattern {
            report.skipped_kinks += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * h);
        let analytic = grads[probe.name.as_str()].data()[probe.index];
        let err = rel_error(analytic, numeric);
        report.checked += 1;
        if report.worst.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some((probe.clone(), analytic, numeric));
        }
    }
    Ok(report)
}
