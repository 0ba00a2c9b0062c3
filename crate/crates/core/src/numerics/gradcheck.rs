use super::{NumericsError, Result, Tape, Tensor};

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub rel_errors: Vec<f64>,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Checks the tape gradient of `f` at `x` against central differences.
///
/// `f` builds a scalar loss on the given tape from the leaf it receives.
/// Relative error is `|a - n| / max(|a|, |n|, 1e-3)`.
pub fn grad_check<'a, F>(f: F, x: &Tensor, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'a>, super::Var) -> Result<super::Var>,
{
    if step <= 0.0 {
        return Err(NumericsError::Contract(
            "grad_check: step must be positive".into(),
        ));
    }
    let eval = |t: &Tensor| -> Result<f64> {
        let mut tape = Tape::no_grad();
        let v = tape.leaf_owned(t.clone());
        let out = f(&mut tape, v)?;
        match tape.value(out) {
            [s] => Ok(*s),
            _ => Err(NumericsError::Contract(
                "grad_check: loss is not scalar".into(),
            )),
        }
    };

    let analytic = {
        let mut tape = Tape::new();
        let v = tape.leaf_owned(x.clone().with_requires_grad(true));
        let out = f(&mut tape, v)?;
        let grads = tape.backward(out)?;
        grads
            .get(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; x.len()])
    };

    let mut probe = x.clone();
    let mut numeric = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - step;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        numeric.push((up - down) / (2.0 * step));
    }

    let rel_errors: Vec<f64> = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-3))
        .collect();
    let max_rel_error = rel_errors.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        passed: max_rel_error <= tol,
        analytic,
        numeric,
        rel_errors,
        max_rel_error,
    })
}
