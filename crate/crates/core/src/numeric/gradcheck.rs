use rand::Rng;

use super::params::{Bound, Params};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// `|a - b| / max(1e-8, |a| + |b|)`.
pub fn relative_error(tape_grad: f64, fd_grad: f64) -> f64 {
    (tape_grad - fd_grad).abs() / (tape_grad.abs() + fd_grad.abs()).max(1e-8)
}

fn eval_loss<F>(loss_fn: &F, params: &Params) -> Result<f64>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let loss = loss_fn(&mut tape, &bound)?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::Numeric(format!("loss evaluated to {value}")));
    }
    Ok(value)
}

/// Compares tape gradients of `loss_fn` against central differences
/// `(f(θ+ε) − f(θ−ε)) / 2ε` on `samples` randomly chosen coordinates
/// (every coordinate when `samples` covers them all).
///
/// `loss_fn` must be deterministic: disable dropout before checking.
pub fn grad_check<F>(
    loss_fn: F,
    params: &Params,
    eps: f64,
    samples: usize,
    rng: &mut impl Rng,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    grad_check_filtered(loss_fn, params, eps, samples, rng, |_| true)
}

/// [`grad_check`] restricted to the parameters accepted by `include`; the
/// others stay bound on the tape but are not perturbed.
pub fn grad_check_filtered<F>(
    loss_fn: F,
    params: &Params,
    eps: f64,
    samples: usize,
    rng: &mut impl Rng,
    include: impl Fn(&str) -> bool,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let loss = loss_fn(&mut tape, &bound)?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::Numeric(format!("loss evaluated to {value}")));
    }
    let grads = bound.collect(&tape.backward(loss)?);
    drop(tape);

    let coords: Vec<(String, usize)> = params
        .iter()
        .filter(|(name, _)| include(name))
        .flat_map(|(name, t)| (0..t.len()).map(move |i| (name.to_string(), i)))
        .collect();
    let chosen: Vec<usize> = if samples >= coords.len() {
        (0..coords.len()).collect()
    } else {
        let mut idx = rand::seq::index::sample(rng, coords.len(), samples).into_vec();
        idx.sort_unstable();
        idx
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: chosen.len(),
    };
    let mut probe = params.clone();
    for &c in &chosen {
        let (name, i) = &coords[c];
        let orig = params.get(name)?.data()[*i];
        probe.get_mut(name)?.data_mut()[*i] = orig + eps;
        let plus = eval_loss(&loss_fn, &probe)?;
        probe.get_mut(name)?.data_mut()[*i] = orig - eps;
        let minus = eval_loss(&loss_fn, &probe)?;
        probe.get_mut(name)?.data_mut()[*i] = orig;

        let fd = (plus - minus) / (2.0 * eps);
        let err = relative_error(grads.get(name)?.data()[*i], fd);
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some((name.clone(), *i));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{SeedTree, Tensor};

    #[test]
    fn quadratic_is_exact() {
        let mut params = Params::new();
        params.insert("theta", Tensor::vector(vec![0.3, -1.7, 2.5, 1.0, -0.4]));
        let report = grad_check(
            |tape, p| {
                let th = p.get("theta")?;
                let sq = tape.mul(th, th)?;
                let s = tape.sum(sq);
                Ok(tape.scale_shift(s, 0.5, 0.0))
            },
            &params,
            1e-5,
            100,
            &mut SeedTree::new(0).rng(),
        )
        .unwrap();
        assert_eq!(report.checked, 5);
        assert!(report.max_rel_error < 1e-8, "{report:?}");
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let mut params = Params::new();
        params.insert("x", Tensor::vector(vec![-1.0]));
        let res = grad_check(
            |tape, p| {
                let x = p.get("x")?;
                let l = tape.ln(x);
                Ok(tape.sum(l))
            },
            &params,
            1e-5,
            1,
            &mut SeedTree::new(0).rng(),
        );
        assert!(matches!(res, Err(Error::Numeric(_))));
    }
}
