//! Adam with global ℓ2 gradient clipping.

use lt_autodiff::ParamSet;

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global ℓ2 norm ceiling; non-positive disables clipping.
    pub clip: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

/// What one call to [`Adam::step`] did.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    /// Norm before clipping.
    pub grad_norm: f64,
    pub applied: bool,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64, clip: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    /// Descends along the gradients stored on `params`. A non-finite gradient
    /// leaves parameters and moments untouched.
    pub fn step(&mut self, params: &mut ParamSet) -> StepReport {
        let sq: f64 = params
            .tensors()
            .iter()
            .filter_map(|t| t.grad())
            .flatten()
            .map(|g| g * g)
            .sum();
        let grad_norm = sq.sqrt();
        if !grad_norm.is_finite() {
            return StepReport {
                grad_norm,
                applied: false,
            };
        }
        let scale = if self.clip > 0.0 && grad_norm > self.clip {
            self.clip / grad_norm
        } else {
            1.0
        };
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, t) in params.tensors_mut().iter_mut().enumerate() {
            let Some(grad) = t.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in t.data_mut().iter_mut().enumerate() {
                let g = grad[j] * scale;
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        StepReport {
            grad_norm,
            applied: true,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use lt_autodiff::{Graph, Tensor};

    fn single(w: f64) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.add("w", Tensor::vector(vec![w]));
        ps
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut ps = single(1.5);
        ps.tensors_mut()[0].accumulate_grad(&[0.0]);
        let mut opt = Adam::new(&ps, 0.1, 1.0);
        let r = opt.step(&mut ps);
        assert!(r.applied);
        assert_eq!(opt.step, 1);
        assert_eq!(ps.flat_values(), vec![1.5]);
    }

    #[test]
    fn clipping_halves_norm_two() {
        let mut ps = ParamSet::new();
        ps.add("a", Tensor::vector(vec![0.0, 0.0]));
        ps.tensors_mut()[0].accumulate_grad(&[1.2, 1.6]);
        let mut opt = Adam::new(&ps, 0.1, 1.0);
        let r = opt.step(&mut ps);
        assert_eq!(r.grad_norm, 2.0);
        let (m, _) = opt.moments();
        assert!((m[0][0] - 0.1 * 0.6).abs() < 1e-15);
        assert!((m[0][1] - 0.1 * 0.8).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_is_skipped() {
        let mut ps = single(2.0);
        ps.tensors_mut()[0].accumulate_grad(&[f64::NAN]);
        let mut opt = Adam::new(&ps, 0.1, 1.0);
        assert!(!opt.step(&mut ps).applied);
        assert_eq!(opt.step, 0);
        assert_eq!(ps.flat_values(), vec![2.0]);
    }

    #[test]
    fn converges_on_scalar_quadratic() {
        let mut ps = single(0.0);
        let mut opt = Adam::new(&ps, 0.1, 1.0);
        for _ in 0..200 {
            ps.zero_grad();
            let mut g = Graph::new();
            let p = g.bind(&ps);
            let d = g.add_scalar(p.var(lt_autodiff::ParamId(0)), -3.0);
            let l = g.square(d);
            let l = g.sum(l);
            g.backward_into(l, &mut ps).unwrap();
            opt.step(&mut ps);
        }
        assert!((ps.flat_values()[0] - 3.0).abs() < 0.01);
    }
}
