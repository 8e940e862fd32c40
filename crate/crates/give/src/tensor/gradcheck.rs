//! Central-difference verification of analytic gradients.

use super::Tensor;
use crate::error::{Error, Result};

/// Checks analytic gradients of a scalar function against central finite
/// differences, one coordinate at a time.
///
/// `f(params, want_grads)` evaluates the function; when `want_grads` is true
/// it must also return one gradient buffer per parameter (same element
/// counts). The returned figure is the worst relative error
/// `|analytic − central| / (|central| + 1e-12)` over all coordinates.
pub fn finite_diff_check<F>(f: &mut F, params: &[Tensor], h: f64) -> Result<f64>
where
    F: FnMut(&[Tensor], bool) -> Result<(f64, Option<Vec<Vec<f64>>>)>,
{
    if !(h > 0.0 && h <= 1e-3) {
        return Err(Error::Oracle(format!("step size {h} outside (0, 1e-3]")));
    }
    let (base, grads) = f(params, true)?;
    if !base.is_finite() {
        return Err(Error::Oracle("non-finite function value".into()));
    }
    let grads = grads.ok_or_else(|| Error::Oracle("function returned no gradients".into()))?;
    if grads.len() != params.len() {
        return Err(Error::Oracle(format!(
            "{} gradient buffers for {} parameters",
            grads.len(),
            params.len()
        )));
    }

    let mut work: Vec<Tensor> = params.to_vec();
    let mut max_rel = 0.0f64;
    for (pi, grad) in grads.iter().enumerate() {
        if grad.len() != params[pi].numel() {
            return Err(Error::Oracle(format!(
                "gradient buffer {pi} has {} entries, parameter has {}",
                grad.len(),
                params[pi].numel()
            )));
        }
        for ci in 0..grad.len() {
            let orig = work[pi].data()[ci];
            work[pi].data_mut()[ci] = orig + h;
            let (fp, _) = f(&work, false)?;
            work[pi].data_mut()[ci] = orig - h;
            let (fm, _) = f(&work, false)?;
            work[pi].data_mut()[ci] = orig;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::Oracle("non-finite function value during probing".into()));
            }
            let central = (fp - fm) / (2.0 * h);
            let rel = (grad[ci] - central).abs() / (central.abs() + 1e-12);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn sum_of_squares(params: &[Tensor], _want: bool) -> Result<(f64, Option<Vec<Vec<f64>>>)> {
        let mut tape = Tape::new();
        let mut ids = Vec::new();
        let mut loss = None;
        for p in params {
            let id = tape.leaf(p.clone(), true);
            ids.push(id);
            let sq = tape.matmul_bt(id, id)?;
            let tr = tape.sum_all(sq)?;
            loss = Some(match loss {
                None => tr,
                Some(acc) => tape.add(acc, tr)?,
            });
        }
        let loss = loss.unwrap();
        tape.backward(loss)?;
        let grads = ids.iter().map(|&id| tape.grad_or_zeros(id)).collect();
        Ok((tape.scalar_value(loss), Some(grads)))
    }

    #[test]
    fn sum_of_squares_is_exact_to_roundoff() {
        let mut rng = crate::test_rng(2);
        let params = vec![Tensor::randn(1, 6, 1.5, &mut rng), Tensor::randn(1, 3, 0.5, &mut rng)];
        let err = finite_diff_check(&mut sum_of_squares, &params, 1e-5).unwrap();
        assert!(err < 1e-9, "rel err {err}");
    }

    #[test]
    fn rejects_bad_step_size() {
        let params = vec![Tensor::scalar(1.0)];
        assert!(finite_diff_check(&mut sum_of_squares, &params, 0.0).is_err());
        assert!(finite_diff_check(&mut sum_of_squares, &params, 1e-2).is_err());
    }
}
