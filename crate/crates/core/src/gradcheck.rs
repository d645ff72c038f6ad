//! Central finite-difference gradient checking.
//!
//! All checks run in f64. The relative error of a coordinate is
//! `|g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)` and a check reports the
//! maximum over all coordinates of all inputs.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, TensorData};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Scalar-valued function of several tensors, rebuilt on a fresh graph for
/// every evaluation.
pub type ScalarFn<'a> = &'a dyn Fn(&mut Graph<f64>, &[Tensor<f64>]) -> Result<Tensor<f64>>;

pub fn relative_error(ad: f64, fd: f64) -> f64 {
    (ad - fd).abs() / (ad.abs() + fd.abs()).max(1e-8)
}

/// Maximum relative error between reverse-mode and central-difference
/// gradients of `f` with respect to every coordinate of every input.
pub fn grad_check_many(f: ScalarFn, inputs: &[TensorData<f64>], step: f64) -> Result<f64> {
    let eval = |points: &[TensorData<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let leased: Vec<Tensor<f64>> = points.iter().map(|t| g.input(t.clone())).collect();
        let y = f(&mut g, &leased)?;
        if y.numel() != 1 {
            return Err(Error::contract(format!(
                "grad check target must be scalar, got {:?}",
                y.shape()
            )));
        }
        Ok(y.scalar_value())
    };

    // Reverse-mode gradients in one pass.
    let mut g = Graph::new();
    let leased: Vec<Tensor<f64>> = inputs.iter().map(|t| g.param(t)).collect();
    let y = f(&mut g, &leased)?;
    if y.numel() != 1 {
        return Err(Error::contract(format!(
            "grad check target must be scalar, got {:?}",
            y.shape()
        )));
    }
    g.backward(&y)?;
    let ad_grads: Vec<Vec<f64>> = leased
        .iter()
        .map(|t| g.grad(t).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let mut worst = 0.0f64;
    let mut points: Vec<TensorData<f64>> = inputs.to_vec();
    for (ix, input) in inputs.iter().enumerate() {
        for coord in 0..input.numel() {
            let orig = input.data()[coord];
            points[ix].data_mut()[coord] = orig + step;
            let y_plus = eval(&points)?;
            points[ix].data_mut()[coord] = orig - step;
            let y_minus = eval(&points)?;
            points[ix].data_mut()[coord] = orig;
            let fd = (y_plus - y_minus) / (2.0 * step);
            let rel = relative_error(ad_grads[ix][coord], fd);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}

/// Single-input form.
pub fn grad_check(
    f: &dyn Fn(&mut Graph<f64>, &Tensor<f64>) -> Result<Tensor<f64>>,
    x: &TensorData<f64>,
    step: f64,
) -> Result<f64> {
    grad_check_many(&|g, xs| f(g, &xs[0]), std::slice::from_ref(x), step)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamRng;

    #[test]
    fn quadratic_is_near_exact() {
        // f(x) = sum(x^2) at x = [1, 2]: analytic grad [2, 4]; central
        // differences are exact for polynomials of degree <= 2 up to
        // rounding.
        let x = TensorData::new(vec![2], vec![1.0, 2.0]).unwrap();
        let f = |g: &mut Graph<f64>, t: &Tensor<f64>| {
            let sq = g.mul(t, t)?;
            let m = g.mean_all(&sq)?;
            g.scale(&m, 2.0)
        };
        // analytic check first
        let mut g = Graph::new();
        let t = g.param(&x);
        let y = f(&mut g, &t).unwrap();
        g.backward(&y).unwrap();
        assert_eq!(g.grad(&t).unwrap(), &[2.0, 4.0]);

        let err = grad_check(&f, &x, 1e-5).unwrap();
        assert!(err < 1e-7, "rel err {err}");
    }

    #[test]
    fn sigmoid_chain_under_1e4() {
        let mut rng = StreamRng::from_seed(9);
        let x = TensorData::<f64>::uniform(vec![6], -2.0, 2.0, &mut rng);
        let f = |g: &mut Graph<f64>, t: &Tensor<f64>| {
            let s = g.sigmoid(t)?;
            let s2 = g.sigmoid(&s)?;
            g.mean_all(&s2)
        };
        let err = grad_check(&f, &x, 1e-5).unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn step_sweep_minimum_near_1e5() {
        // h^2 truncation dominates at 1e-4, rounding at 1e-6; 1e-5 sits at
        // the bottom of the sweep for this curvature-heavy composite.
        let mut rng = StreamRng::from_seed(13);
        let x = TensorData::<f64>::uniform(vec![5], 0.5, 1.5, &mut rng);
        let f = |g: &mut Graph<f64>, t: &Tensor<f64>| {
            let a = g.scale(t, 4.0)?;
            let s = g.sigmoid(&a)?;
            let sq = g.mul(&s, &s)?;
            g.mean_all(&sq)
        };
        let errs: Vec<f64> = [1e-4, 1e-5, 1e-6]
            .iter()
            .map(|&h| grad_check(&f, &x, h).unwrap())
            .collect();
        assert!(
            errs[1] <= errs[0] && errs[1] <= errs[2],
            "expected minimum at 1e-5: {errs:?}"
        );
    }

    #[test]
    fn sign_flip_is_caught() {
        // Mutation sanity check: comparing finite differences against a
        // negated analytic gradient must fail loudly.
        let mut rng = StreamRng::from_seed(21);
        let x = TensorData::<f64>::uniform(vec![4], -1.0, 1.0, &mut rng);
        let flipped = |g: &mut Graph<f64>, t: &Tensor<f64>| {
            let s = g.sigmoid(t)?;
            g.mean_all(&s)
        };
        // Compute the honest FD and AD, then flip AD's sign to emulate a
        // broken backward rule.
        let mut g = Graph::new();
        let t = g.param(&x);
        let y = flipped(&mut g, &t).unwrap();
        g.backward(&y).unwrap();
        let ad: Vec<f64> = g.grad(&t).unwrap().iter().map(|v| -v).collect();
        let mut worst = 0.0f64;
        for coord in 0..x.numel() {
            let mut p = x.clone();
            p.data_mut()[coord] += 1e-5;
            let mut gp = Graph::new();
            let tp = gp.input(p.clone());
            let yp = flipped(&mut gp, &tp).unwrap().scalar_value();
            p.data_mut()[coord] -= 2e-5;
            let mut gm = Graph::new();
            let tm = gm.input(p);
            let ym = flipped(&mut gm, &tm).unwrap().scalar_value();
            let fd = (yp - ym) / 2e-5;
            worst = worst.max(relative_error(ad[coord], fd));
        }
        assert!(worst > 1e-1, "sign flip should blow past the gate, got {worst}");
    }
}
