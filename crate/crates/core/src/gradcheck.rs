//! Central-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::{sc, Scalar};
use crate::tape::{GradTape, Var};
use crate::tensor::Tensor;

/// Denominator guard in the relative error `|analytic − numeric| / (|numeric| + 1e-8)`.
pub const REL_GUARD: f64 = 1e-8;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (numeric.abs() + REL_GUARD)
}

/// Compares the analytic gradient of a scalar block against central
/// differences `(f(θ+h) − f(θ−h)) / 2h`, coordinate by coordinate, and
/// returns the largest relative error.
pub fn grad_check<T, F>(block: F, theta: &Tensor<T>, h: f64) -> Result<f64>
where
    T: Scalar,
    F: Fn(&Tensor<T>) -> Result<(T, Tensor<T>)>,
{
    let (loss, analytic) = block(theta)?;
    check_finite(loss)?;
    theta.same_shape(&analytic, "grad_check")?;
    let mut worst = 0.0f64;
    let mut probe = theta.clone();
    for i in 0..theta.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + sc::<T>(h);
        let (up, _) = block(&probe)?;
        probe.data_mut()[i] = orig - sc::<T>(h);
        let (down, _) = block(&probe)?;
        probe.data_mut()[i] = orig;
        check_finite(up)?;
        check_finite(down)?;
        let numeric = (up.to_f64_lossy() - down.to_f64_lossy()) / (2.0 * h);
        worst = worst.max(rel_err(analytic.data()[i].to_f64_lossy(), numeric));
    }
    Ok(worst)
}

/// Runs [`grad_check`] over every parameter of `store`, where `build`
/// records the scalar loss on a fresh tape.
pub fn grad_check_tape<T, F>(store: &ParamStore<T>, h: f64, build: F) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut GradTape<'_, T>) -> Result<Var>,
{
    grad_check_params(store, h, store.ids().collect::<Vec<_>>().as_slice(), build)
}

/// Like [`grad_check_tape`] restricted to the listed parameters.
pub fn grad_check_params<T, F>(store: &ParamStore<T>, h: f64, which: &[ParamId], build: F) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut GradTape<'_, T>) -> Result<Var>,
{
    let eval = |s: &ParamStore<T>| -> Result<T> {
        let mut tape = GradTape::new(s);
        let out = build(&mut tape)?;
        let v = tape.value(out).item();
        check_finite(v)?;
        Ok(v)
    };
    let analytic = {
        let mut tape = GradTape::new(store);
        let out = build(&mut tape)?;
        check_finite(tape.value(out).item())?;
        tape.backward(out)?
    };
    let mut probe = store.clone();
    let mut worst = 0.0f64;
    for &id in which {
        let g = analytic.get_or_zeros(id, store.get(id));
        for i in 0..store.get(id).len() {
            let orig = probe.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + sc::<T>(h);
            let up = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig - sc::<T>(h);
            let down = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig;
            let numeric = (up.to_f64_lossy() - down.to_f64_lossy()) / (2.0 * h);
            worst = worst.max(rel_err(g.data()[i].to_f64_lossy(), numeric));
        }
    }
    Ok(worst)
}

fn check_finite<T: Scalar>(v: T) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("loss evaluated to {v} during gradient check")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact_under_central_differences() {
        let theta = Tensor::<f64>::from_f64(&[1], &[3.0]).unwrap();
        let err = grad_check(
            |t| {
                let x = t.item();
                Ok((x * x, Tensor::scalar(2.0 * x)))
            },
            &theta,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let theta = Tensor::<f64>::from_f64(&[1], &[0.0]).unwrap();
        let res = grad_check(|t| Ok((1.0 / t.item(), Tensor::scalar(0.0))), &theta, 1e-3);
        assert!(matches!(res, Err(Error::NonFinite(_))));
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let theta = Tensor::<f64>::from_f64(&[2], &[1.0, 2.0]).unwrap();
        let err = grad_check(
            |t| {
                let (a, b) = (t.data()[0], t.data()[1]);
                Ok((a * b, Tensor::from_f64(&[2], &[b, 2.0 * a]).unwrap()))
            },
            &theta,
            1e-4,
        )
        .unwrap();
        assert!(err > 0.1);
    }
}
