//! Central finite-difference check of tape gradients.

use super::params::{Bound, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

fn check_step(h: f64) -> Result<()> {
    if (1e-7..=1e-3).contains(&h) {
        Ok(())
    } else {
        Err(Error::domain("grad_check", format!("step {h} outside [1e-7, 1e-3]")))
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

fn scalar_of(tape: &Tape<'_>, v: Var, coordinate: usize) -> Result<f64> {
    let t = tape.value(v);
    if !t.is_scalar() {
        return Err(Error::Contract(format!("grad_check needs a scalar function, got {:?}", t.shape())));
    }
    let x = t.item();
    if !x.is_finite() {
        return Err(Error::NonFinite { coordinate, context: "function value".into() });
    }
    Ok(x)
}

/// Max over coordinates of `|analytic - central difference| / max(1, |analytic|)`
/// for a scalar function of one tensor.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<'_>, Var) -> Result<Var>,
{
    check_step(h)?;
    let analytic = {
        let mut tape = Tape::new();
        let xv = tape.param(x.clone());
        let y = f(&mut tape, xv)?;
        scalar_of(&tape, y, 0)?;
        tape.backward(y)?.take(xv).expect("leaf gradient")
    };
    let eval = |p: &Tensor, coordinate: usize| -> Result<f64> {
        let mut tape = Tape::new();
        let xv = tape.constant(p.clone());
        let y = f(&mut tape, xv)?;
        scalar_of(&tape, y, coordinate)
    };
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval(&probe, i)?;
        probe.data_mut()[i] = orig - h;
        let down = eval(&probe, i)?;
        probe.data_mut()[i] = orig;
        let a = analytic.data()[i];
        if !a.is_finite() {
            return Err(Error::NonFinite { coordinate: i, context: "analytic gradient".into() });
        }
        worst = worst.max(rel_err(a, (up - down) / (2.0 * h)));
    }
    Ok(worst)
}

/// Result of checking every coordinate of every parameter in a store.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub coordinates: usize,
}

/// Finite-difference check of a scalar loss against every coordinate of the
/// parameters named by `filter` (all of them when it returns true for all).
///
/// `f` must be deterministic: any randomness has to be re-seeded inside it.
pub fn grad_check_params<F>(
    store: &ParamStore,
    h: f64,
    filter: impl Fn(&str) -> bool,
    f: F,
) -> Result<ParamCheck>
where
    F: for<'a> Fn(&mut Tape<'a>, &Bound) -> Result<Var>,
{
    check_step(h)?;
    let mut analytic = Vec::new();
    {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let y = f(&mut tape, &bound)?;
        scalar_of(&tape, y, 0)?;
        let mut grads = tape.backward(y)?;
        for (name, var) in bound.iter() {
            if filter(name) {
                analytic.push((name.to_string(), grads.take(var).expect("leaf gradient")));
            }
        }
    }

    let eval = |s: &ParamStore, coordinate: usize| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = s.bind_frozen(&mut tape);
        let y = f(&mut tape, &bound)?;
        scalar_of(&tape, y, coordinate)
    };

    let mut probe = store.clone();
    let mut report = ParamCheck {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        coordinates: 0,
    };
    for (name, grad) in &analytic {
        for i in 0..grad.numel() {
            let orig = probe.get(name)?.data()[i];
            probe.get_mut(name)?.data_mut()[i] = orig + h;
            let up = eval(&probe, report.coordinates)?;
            probe.get_mut(name)?.data_mut()[i] = orig - h;
            let down = eval(&probe, report.coordinates)?;
            probe.get_mut(name)?.data_mut()[i] = orig;
            let a = grad.data()[i];
            if !a.is_finite() {
                return Err(Error::NonFinite {
                    coordinate: report.coordinates,
                    context: format!("analytic gradient of {name}[{i}]"),
                });
            }
            let e = rel_err(a, (up - down) / (2.0 * h));
            if e > report.max_rel_error {
                report.max_rel_error = e;
                report.worst_param = name.clone();
                report.worst_index = i;
            }
            report.coordinates += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_is_exact() {
        let x = Tensor::vector(vec![0.3, -1.2, 4.0]);
        let e = grad_check(|t, x| Ok(t.sum(x)), &x, 1e-5).unwrap();
        assert!(e < 1e-10, "{e}");
    }

    #[test]
    fn sum_of_squares() {
        let x = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let f = |t: &mut Tape<'_>, x| {
            let sq = t.mul(x, x)?;
            Ok(t.sum(sq))
        };
        let mut tape = Tape::new();
        let xv = tape.param(x.clone());
        let y = f(&mut tape, xv).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(xv).unwrap().data(), &[2.0, 4.0, 6.0]);
        assert!(grad_check(f, &x, 1e-5).unwrap() < 1e-8);
    }

    #[test]
    fn step_out_of_range() {
        let x = Tensor::scalar(1.0);
        assert!(grad_check(|t, x| Ok(t.sum(x)), &x, 1e-2).is_err());
        assert!(grad_check(|t, x| Ok(t.sum(x)), &x, 1e-9).is_err());
    }

    #[test]
    fn non_finite_reports_coordinate() {
        // finite at x, overflows once a coordinate is nudged upward
        let x = Tensor::vector(vec![1.0, 1.0]);
        let f = |t: &mut Tape<'_>, x| {
            let big = t.scale(x, 0.8988e308);
            Ok(t.sum(big))
        };
        match grad_check(f, &x, 1e-3) {
            Err(Error::NonFinite { coordinate, .. }) => assert_eq!(coordinate, 0),
            other => panic!("expected non-finite, got {other:?}"),
        }
    }
}
