//! Central-difference gradient checking.

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Largest relative error between the tape gradient of `f` at `x` and a
/// central difference with step `eps`, over every entry of `x`.
///
/// Relative error per entry is `|a - d| / max(|a|, |d|, 1e-8)`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&Tape<f64>, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..x.len()).collect();
    grad_check_entries(f, x, eps, &all)
}

/// As [`grad_check`], restricted to the listed flat indices of `x`.
pub fn grad_check_entries<F>(f: F, x: &Tensor<f64>, eps: f64, entries: &[usize]) -> Result<f64>
where
    F: Fn(&Tape<f64>, Var) -> Result<Var>,
{
    let tape = Tape::new();
    let xv = tape.param(x.clone());
    let loss = f(&tape, xv)?;
    let analytic = tape.backward(loss)?.tensor(xv);

    let eval = |t: Tensor<f64>| -> Result<f64> {
        let tape = Tape::no_grad();
        let v = tape.constant(t);
        let out = f(&tape, v)?;
        let value = tape.value(out).item();
        Ok(value)
    };

    let mut worst = 0.0f64;
    for &i in entries {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ConvSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::rand_uniform(&[5, 3], -2.0, 2.0, &mut rng);
        let err = grad_check(|t, v| t.sum(v), &x, 1e-5).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn conv3d_input_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f64>::rand_uniform(&[4, 4, 4, 2], -1.0, 1.0, &mut rng);
        let w = Tensor::<f64>::rand_uniform(&[3, 3, 3, 2, 3], -1.0, 1.0, &mut rng);
        let b = Tensor::<f64>::rand_uniform(&[3], -1.0, 1.0, &mut rng);
        let probe = Tensor::<f64>::rand_uniform(&[2, 2, 2, 3], -1.0, 1.0, &mut rng);
        let spec = ConvSpec::cubic(3, 2, 1);
        let f = |t: &Tape<f64>, v: Var| {
            let w = t.constant(w.clone());
            let b = t.constant(b.clone());
            let p = t.constant(probe.clone());
            let y = t.conv3d(v, w, b, &spec)?;
            let y = t.mul(y, p)?;
            t.sum(y)
        };
        let err = grad_check(f, &x, 1e-5).unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
