//! Central finite differences over a [`ParamSet`].
//!
//! Only forward evaluations of the objective are used, so these estimates are
//! independent of the backward sweep they are compared against.

use crate::tensor::ParamSet;

/// Default perturbation for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Central-difference gradient of `f` with respect to every scalar in `params`.
pub fn numeric_gradient(
    params: &mut ParamSet,
    step: f64,
    mut f: impl FnMut(&ParamSet) -> f64,
) -> Vec<f64> {
    let n = params.numel();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let orig = *params.flat_entry_mut(i).expect("index in range");
        *params.flat_entry_mut(i).unwrap() = orig + step;
        let plus = f(params);
        *params.flat_entry_mut(i).unwrap() = orig - step;
        let minus = f(params);
        *params.flat_entry_mut(i).unwrap() = orig;
        out.push((plus - minus) / (2.0 * step));
    }
    out
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)`, or the absolute error when both are tiny.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom < 1e-12 {
        diff
    } else {
        diff / denom
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{Graph, Tensor};

    #[test]
    fn cubic_matches_analytic() {
        let mut p = ParamSet::new();
        p.add("x", Tensor::vector(vec![1.5, -0.5]));
        let num = numeric_gradient(&mut p, FD_STEP, |p| {
            p.tensors()[0].data().iter().map(|x| x * x * x).sum()
        });
        let exact = [3.0 * 1.5 * 1.5, 3.0 * 0.25];
        assert!(relative_error(&num, &exact) < 1e-9);
    }

    #[test]
    fn relative_error_of_identical_is_zero() {
        assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
    }

    #[test]
    fn tape_matches_numeric_on_composite() {
        let mut p = ParamSet::new();
        let w = p.add("w", Tensor::new(vec![2, 3], vec![0.3, -0.2, 0.5, 0.1, 0.7, -0.4]).unwrap());
        let x = p.add("x", Tensor::vector(vec![0.2, -1.0, 0.6]));
        let eval = |p: &ParamSet, g: &mut Graph| {
            let b = g.bind(p);
            let h = g.matmul(b[w], b[x]).unwrap();
            let t = g.tanh(h);
            let s = g.softplus(t);
            let e = g.exp(s);
            g.sum(e)
        };
        let mut g = Graph::new();
        let loss = eval(&p, &mut g);
        p.zero_grad();
        g.backward_into(loss, &mut p).unwrap();
        let analytic = p.flat_grads();
        let numeric = numeric_gradient(&mut p, FD_STEP, |p| {
            let mut g = Graph::new();
            let l = eval(p, &mut g);
            g.scalar(l)
        });
        assert!(relative_error(&analytic, &numeric) < 1e-8);
    }
}
