//! Central finite-difference checks of tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Norm-wise relative error `‖g_tape − g_fd‖ / max(‖g_tape‖, ‖g_fd‖)` of the
/// gradient of the scalar `f` with respect to each input that requires a
/// gradient (other inputs yield `None`). Central differences at steps `h`
/// and `h/2` are Richardson-combined, so truncation error is O(h⁴).
pub fn gradcheck<F>(inputs: &[Tensor], h: f32, f: F) -> Result<Vec<Option<f64>>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<(Tape, Var, Vec<Var>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x)).collect();
        let out = f(&mut tape, &vars)?;
        if tape.shape(out).iter().product::<usize>() != 1 {
            return Err(Error::NotScalar(tape.shape(out).to_vec()));
        }
        Ok((tape, out, vars))
    };
    let (tape, out, vars) = eval(inputs)?;
    let grads = tape.backward(out)?;

    let mut errors = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for (k, x) in inputs.iter().enumerate() {
        if !x.requires_grad() {
            errors.push(None);
            continue;
        }
        let analytic = grads.get(vars[k]).map_or_else(|| vec![0.0; x.numel()], <[f32]>::to_vec);
        let mut numeric = vec![0.0f64; x.numel()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = x.data()[i];
            let mut at = |v: f32| -> Result<f64> {
                work[k].data_mut()[i] = v;
                let (t, o, _) = eval(&work)?;
                Ok(t.value(o)[0] as f64)
            };
            let mut central = |step: f32| -> Result<f64> {
                let d = at(orig + step)? - at(orig - step)?;
                Ok(d / (2.0 * step as f64))
            };
            let (coarse, fine) = (central(h)?, central(h / 2.0)?);
            work[k].data_mut()[i] = orig;
            *slot = (4.0 * fine - coarse) / 3.0;
        }
        errors.push(Some(relative_error(&analytic, &numeric)));
    }
    Ok(errors)
}

pub fn relative_error(analytic: &[f32], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(&a, &n)| a as f64 - n));
    let scale = norm(&mut analytic.iter().map(|&a| a as f64)).max(norm(&mut numeric.iter().copied()));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}
