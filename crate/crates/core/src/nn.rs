//! Parameterized building blocks: linear maps, one-hidden-layer MLPs, a GRU
//! cell, and diagonal-Gaussian log-density / KL terms.

use lt_autodiff::{Bound, Graph, ParamId, ParamSet, Tensor, Var};
use rand::Rng;

use crate::error::Result;

/// Log-variance floor applied to every Gaussian head.
pub const LOGVAR_MIN: f64 = -12.0;
/// Log-variance ceiling applied to every Gaussian head.
pub const LOGVAR_MAX: f64 = 12.0;

/// Floor on the total recency weight of a window.
pub const WEIGHT_EPS: f64 = 1e-8;

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Parameter counts split by whether a component is used at prediction time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ParamCounts {
    pub total: usize,
    pub inference_time: usize,
}

impl ParamCounts {
    pub fn active(n: usize) -> Self {
        Self {
            total: n,
            inference_time: n,
        }
    }

    pub fn training_only(n: usize) -> Self {
        Self {
            total: n,
            inference_time: 0,
        }
    }
}

impl std::ops::Add for ParamCounts {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            total: self.total + o.total,
            inference_time: self.inference_time + o.inference_time,
        }
    }
}

impl std::iter::Sum for ParamCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), |a, b| a + b)
    }
}

/// Zero-mean uniform weights with bound `1/sqrt(fan_in)`.
pub fn uniform_weights(rng: &mut impl Rng, rows: usize, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let data = (0..rows * fan_in)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::new(vec![rows, fan_in], data).expect("shape matches")
}

/// `y = W x + b` with `W: [out × in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = params.add(format!("{name}.weight"), uniform_weights(rng, output, input));
        let bias = params.add(format!("{name}.bias"), Tensor::zeros(&[output]));
        Self {
            weight,
            bias,
            input,
            output,
        }
    }

    pub fn param_count(input: usize, output: usize) -> usize {
        input * output + output
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let wx = g.matmul(p[self.weight], x)?;
        Ok(g.add(wx, p[self.bias])?)
    }

    /// Row-batched form: `X Wᵀ + b` for `X: [n × in]`.
    pub fn forward_rows(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let wt = g.transpose(p[self.weight])?;
        let xw = g.matmul(x, wt)?;
        Ok(g.add(xw, p[self.bias])?)
    }
}

/// Per-row `½[logvar + (y − mean)²/exp(logvar) + ln 2π]` for equal-shaped inputs.
pub fn gaussian_nll_rows(g: &mut Graph, y: Var, mean: Var, logvar: Var) -> Result<Var> {
    let diff = g.sub(y, mean)?;
    let sq = g.square(diff);
    let nlv = g.neg(logvar);
    let prec = g.exp(nlv);
    let quad = g.mul(sq, prec)?;
    let inner = g.add(logvar, quad)?;
    let inner = g.add_scalar(inner, LN_2PI);
    Ok(g.scale(inner, 0.5))
}

/// One hidden layer with tanh, linear read-out.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            hidden: Linear::new(params, &format!("{name}.0"), input, hidden, rng),
            out: Linear::new(params, &format!("{name}.1"), hidden, output, rng),
        }
    }

    pub fn param_count(input: usize, hidden: usize, output: usize) -> usize {
        Linear::param_count(input, hidden) + Linear::param_count(hidden, output)
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let h = self.hidden.forward(g, p, x)?;
        let h = g.tanh(h);
        self.out.forward(g, p, h)
    }
}

/// Gated recurrent unit.
///
/// ```text
/// z  = σ(W_z e + U_z h + b_z)
/// r  = σ(W_r e + U_r h + b_r)
/// h̃  = tanh(W_h e + U_h (r ⊙ h) + b_h)
/// h' = (1 − z) ⊙ h + z ⊙ h̃
/// ```
#[derive(Debug, Clone)]
pub struct GruCell {
    pub w: [ParamId; 3],
    pub u: [ParamId; 3],
    pub b: [ParamId; 3],
    pub input: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let gates = ["update", "reset", "candidate"];
        let w = gates.map(|gname| {
            params.add(format!("{name}.{gname}.w"), uniform_weights(rng, hidden, input))
        });
        let u = gates.map(|gname| {
            params.add(format!("{name}.{gname}.u"), uniform_weights(rng, hidden, hidden))
        });
        let b = gates.map(|gname| params.add(format!("{name}.{gname}.b"), Tensor::zeros(&[hidden])));
        Self {
            w,
            u,
            b,
            input,
            hidden,
        }
    }

    pub fn param_count(input: usize, hidden: usize) -> usize {
        3 * (hidden * input + hidden * hidden + hidden)
    }

    fn gate(&self, g: &mut Graph, p: &Bound, i: usize, e: Var, h: Var) -> Result<Var> {
        let we = g.matmul(p[self.w[i]], e)?;
        let uh = g.matmul(p[self.u[i]], h)?;
        let s = g.add(we, uh)?;
        Ok(g.add(s, p[self.b[i]])?)
    }

    pub fn step(&self, g: &mut Graph, p: &Bound, h_prev: Var, e: Var) -> Result<Var> {
        let z = self.gate(g, p, 0, e, h_prev)?;
        let z = g.sigmoid(z);
        let r = self.gate(g, p, 1, e, h_prev)?;
        let r = g.sigmoid(r);
        let rh = g.mul(r, h_prev)?;
        let c = self.gate(g, p, 2, e, rh)?;
        let c = g.tanh(c);
        let keep = g.one_minus(z);
        let old = g.mul(keep, h_prev)?;
        let new = g.mul(z, c)?;
        Ok(g.add(old, new)?)
    }
}

/// Splits a `2d` head output into `(mean, logvar)` with the log-variance clamped.
pub fn split_gaussian(g: &mut Graph, out: Var, d: usize) -> Result<(Var, Var)> {
    let mean = g.slice(out, 0, d)?;
    let lv = g.slice(out, d, d)?;
    Ok((mean, g.clamp(lv, LOGVAR_MIN, LOGVAR_MAX)))
}

/// `½ Σ [logvar + (y − mean)² / exp(logvar) + ln 2π]`.
pub fn gaussian_nll(g: &mut Graph, y: Var, mean: Var, logvar: Var) -> Result<Var> {
    let diff = g.sub(y, mean)?;
    let sq = g.square(diff);
    let nlv = g.neg(logvar);
    let prec = g.exp(nlv);
    let quad = g.mul(sq, prec)?;
    let inner = g.add(logvar, quad)?;
    let inner = g.add_scalar(inner, LN_2PI);
    let s = g.sum(inner);
    Ok(g.scale(s, 0.5))
}

/// Closed-form `KL(N(q_mean, e^{q_logvar}) ‖ N(p_mean, e^{p_logvar}))` for diagonal Gaussians.
pub fn gaussian_kl(
    g: &mut Graph,
    q_mean: Var,
    q_logvar: Var,
    p_mean: Var,
    p_logvar: Var,
) -> Result<Var> {
    let qvar = g.exp(q_logvar);
    let diff = g.sub(q_mean, p_mean)?;
    let sq = g.square(diff);
    let num = g.add(qvar, sq)?;
    let nplv = g.neg(p_logvar);
    let pprec = g.exp(nplv);
    let ratio = g.mul(num, pprec)?;
    let lvdiff = g.sub(p_logvar, q_logvar)?;
    let inner = g.add(ratio, lvdiff)?;
    let inner = g.add_scalar(inner, -1.0);
    let s = g.sum(inner);
    Ok(g.scale(s, 0.5))
}

/// Scalar version of [`gaussian_nll`] for one dimension.
pub fn gaussian_nll_value(y: f64, mean: f64, logvar: f64) -> f64 {
    0.5 * (logvar + (y - mean) * (y - mean) * (-logvar).exp() + LN_2PI)
}

/// Scalar version of [`gaussian_kl`] for one dimension.
pub fn gaussian_kl_value(q_mean: f64, q_logvar: f64, p_mean: f64, p_logvar: f64) -> f64 {
    let d = q_mean - p_mean;
    0.5 * ((q_logvar.exp() + d * d) * (-p_logvar).exp() - 1.0 + p_logvar - q_logvar)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;
    use lt_autodiff::gradcheck::{numeric_gradient, relative_error, FD_STEP};

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    #[test]
    fn linear_count() {
        let mut p = ParamSet::new();
        let mut rng = rng_for(0, &[]);
        Linear::new(&mut p, "l", 8, 64, &mut rng);
        assert_eq!(p.numel(), 576);
        assert_eq!(Linear::param_count(8, 64), 576);
    }

    #[test]
    fn gru_and_mlp_counts_match_allocation() {
        let mut p = ParamSet::new();
        let mut rng = rng_for(0, &[]);
        GruCell::new(&mut p, "g", 5, 7, &mut rng);
        assert_eq!(p.numel(), GruCell::param_count(5, 7));
        let mut p = ParamSet::new();
        Mlp::new(&mut p, "m", 3, 4, 2, &mut rng);
        assert_eq!(p.numel(), Mlp::param_count(3, 4, 2));
    }

    fn zero_gru(input: usize, hidden: usize) -> (ParamSet, GruCell) {
        let mut p = ParamSet::new();
        let mut rng = rng_for(0, &[]);
        let cell = GruCell::new(&mut p, "g", input, hidden, &mut rng);
        let zeros = vec![0.0; p.numel()];
        p.set_flat_values(&zeros).unwrap();
        (p, cell)
    }

    #[test]
    fn gru_zero_weights_zero_state() {
        let (p, cell) = zero_gru(3, 4);
        let mut g = Graph::new();
        let b = g.bind(&p);
        let h = g.constant_vec(&[0.0; 4]);
        let e = g.constant_vec(&[0.3, -2.0, 5.0]);
        let out = cell.step(&mut g, &b, h, e).unwrap();
        assert_eq!(g.value(out), &[0.0; 4]);
    }

    #[test]
    fn gru_zero_weights_halves_state() {
        let (p, cell) = zero_gru(2, 3);
        let mut g = Graph::new();
        let b = g.bind(&p);
        let v = [0.8, -0.4, 0.1];
        let h = g.constant_vec(&v);
        let e = g.constant_vec(&[1.0, 1.0]);
        let out = cell.step(&mut g, &b, h, e).unwrap();
        for (o, vi) in g.value(out).iter().zip(v) {
            assert!((o - 0.5 * vi).abs() < 1e-15);
        }
    }

    #[test]
    fn gru_matches_scalar_oracle() {
        let mut p = ParamSet::new();
        let mut rng = rng_for(11, &[]);
        let cell = GruCell::new(&mut p, "g", 1, 1, &mut rng);
        // give biases non-zero values too
        for b in cell.b {
            p.get_mut(b).data_mut()[0] = 0.37;
        }
        let val = |id: ParamId| p.get(id).data()[0];
        let (h0, e0) = (0.42, -1.3);
        let z = sig(val(cell.w[0]) * e0 + val(cell.u[0]) * h0 + val(cell.b[0]));
        let r = sig(val(cell.w[1]) * e0 + val(cell.u[1]) * h0 + val(cell.b[1]));
        let c = (val(cell.w[2]) * e0 + val(cell.u[2]) * (r * h0) + val(cell.b[2])).tanh();
        let expect = (1.0 - z) * h0 + z * c;
        let mut g = Graph::new();
        let b = g.bind(&p);
        let h = g.constant_vec(&[h0]);
        let e = g.constant_vec(&[e0]);
        let out = cell.step(&mut g, &b, h, e).unwrap();
        assert!((g.value(out)[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn gru_gradient_matches_finite_differences() {
        for draw in 0..20 {
            let mut p = ParamSet::new();
            let mut rng = rng_for(draw, &[]);
            let cell = GruCell::new(&mut p, "g", 3, 4, &mut rng);
            let h0: Vec<f64> = crate::rng::normals(&mut rng, 4).iter().map(|v| v.tanh()).collect();
            let e0 = crate::rng::normals(&mut rng, 3);
            let eval = |p: &ParamSet, g: &mut Graph| {
                let b = g.bind(p);
                let h = g.constant_vec(&h0);
                let e = g.constant_vec(&e0);
                let out = cell.step(g, &b, h, e).unwrap();
                g.sum(out)
            };
            let mut g = Graph::new();
            let l = eval(&p, &mut g);
            p.zero_grad();
            g.backward_into(l, &mut p).unwrap();
            let analytic = p.flat_grads();
            let numeric = numeric_gradient(&mut p, FD_STEP, |p| {
                let mut g = Graph::new();
                let l = eval(p, &mut g);
                g.scalar(l)
            });
            assert!(relative_error(&analytic, &numeric) < 1e-5);
        }
    }

    #[test]
    fn gru_state_stays_bounded() {
        let mut p = ParamSet::new();
        let mut rng = rng_for(5, &[]);
        let cell = GruCell::new(&mut p, "g", 4, 6, &mut rng);
        // large weights to push towards saturation
        let scaled: Vec<f64> = p.flat_values().iter().map(|v| v * 8.0).collect();
        p.set_flat_values(&scaled).unwrap();
        let mut h = vec![0.0; 6];
        for _ in 0..100_000 {
            let e: Vec<f64> = crate::rng::normals(&mut rng, 4).iter().map(|v| v * 10.0).collect();
            let mut g = Graph::new();
            let b = g.bind(&p);
            let hv = g.constant_vec(&h);
            let ev = g.constant_vec(&e);
            let out = cell.step(&mut g, &b, hv, ev).unwrap();
            h = g.value(out).to_vec();
            assert!(h.iter().all(|v| v.abs() <= 1.0));
        }
    }

    fn nll_of(y: &[f64], m: &[f64], lv: &[f64]) -> f64 {
        let mut g = Graph::new();
        let (y, m, lv) = (g.constant_vec(y), g.constant_vec(m), g.constant_vec(lv));
        let n = gaussian_nll(&mut g, y, m, lv).unwrap();
        g.scalar(n)
    }

    #[test]
    fn nll_fixed_points() {
        let lv = -(2.0 * std::f64::consts::PI).ln();
        assert!(nll_of(&[1.5], &[1.5], &[lv]).abs() < 1e-15);
        let v = nll_of(&[2.0, -1.0], &[2.0, -1.0], &[0.0, 0.0]);
        assert!((v - 2.0 * 0.918_938_533_204_672_7).abs() < 1e-12);
    }

    #[test]
    fn nll_matches_direct_density() {
        let mut rng = rng_for(3, &[]);
        for _ in 0..100 {
            let y = crate::rng::normals(&mut rng, 3);
            let m = crate::rng::normals(&mut rng, 3);
            let lv: Vec<f64> = crate::rng::normals(&mut rng, 3);
            let direct: f64 = (0..3)
                .map(|i| {
                    let var = lv[i].exp();
                    let dens = (-(y[i] - m[i]).powi(2) / (2.0 * var)).exp()
                        / (2.0 * std::f64::consts::PI * var).sqrt();
                    -dens.ln()
                })
                .sum();
            assert!((nll_of(&y, &m, &lv) - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn nll_gradient_vanishes_at_mean_equal_y() {
        let mut g = Graph::new();
        let y = g.constant_vec(&[0.7, -0.2]);
        let m = g.leaf(&Tensor::vector(vec![0.7, -0.2]).with_grad());
        let lv = g.constant_vec(&[0.3, -1.0]);
        let n = gaussian_nll(&mut g, y, m, lv).unwrap();
        let grads = g.backward(n).unwrap();
        assert!(grads.get(m).unwrap().iter().all(|v| v.abs() < 1e-15));
    }

    /// Composite Simpson quadrature of `∫ q log(q/p)` for 1-d Gaussians.
    fn kl_quadrature(qm: f64, qlv: f64, pm: f64, plv: f64, lo: f64, hi: f64) -> f64 {
        let n = 200_000;
        let h = (hi - lo) / n as f64;
        let logn = |x: f64, m: f64, lv: f64| -0.5 * (LN_2PI + lv + (x - m).powi(2) / lv.exp());
        let f = |x: f64| {
            let lq = logn(x, qm, qlv);
            lq.exp() * (lq - logn(x, pm, plv))
        };
        let mut s = f(lo) + f(hi);
        for i in 1..n {
            let x = lo + i as f64 * h;
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(x);
        }
        s * h / 3.0
    }

    fn kl_of(qm: &[f64], qlv: &[f64], pm: &[f64], plv: &[f64]) -> f64 {
        let mut g = Graph::new();
        let v = [qm, qlv, pm, plv].map(|s| g.constant_vec(s));
        let k = gaussian_kl(&mut g, v[0], v[1], v[2], v[3]).unwrap();
        g.scalar(k)
    }

    #[test]
    fn kl_identical_is_zero() {
        assert_eq!(kl_of(&[0.3, -1.0], &[0.2, 1.0], &[0.3, -1.0], &[0.2, 1.0]), 0.0);
    }

    #[test]
    fn kl_unit_shift_matches_quadrature() {
        let quad = kl_quadrature(1.0, 0.0, 0.0, 0.0, -10.0, 10.0);
        assert!((quad - 0.5).abs() < 1e-9);
        assert!((kl_of(&[1.0], &[0.0], &[0.0], &[0.0]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kl_random_8d_matches_quadrature() {
        let mut rng = rng_for(21, &[]);
        for _ in 0..5 {
            let qm = crate::rng::normals(&mut rng, 8);
            let pm = crate::rng::normals(&mut rng, 8);
            let qlv: Vec<f64> = (0..8).map(|_| rng.random_range(-1.5..1.5)).collect();
            let plv: Vec<f64> = (0..8).map(|_| rng.random_range(-1.5..1.5)).collect();
            let quad: f64 = (0..8)
                .map(|i| {
                    let sd = (0.5 * qlv[i]).exp();
                    kl_quadrature(qm[i], qlv[i], pm[i], plv[i], qm[i] - 14.0 * sd, qm[i] + 14.0 * sd)
                })
                .sum();
            assert!((kl_of(&qm, &qlv, &pm, &plv) - quad).abs() < 1e-6);
        }
    }

    #[test]
    fn init_is_deterministic_and_seed_dependent() {
        let build = |seed| {
            let mut p = ParamSet::new();
            let mut rng = rng_for(seed, &[]);
            Linear::new(&mut p, "l", 10, 10, &mut rng);
            p.flat_values()
        };
        let (a, b, c) = (build(1), build(1), build(2));
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_ne!(a, c);
    }

    #[test]
    fn init_variance_matches_uniform_formula() {
        let mut rng = rng_for(9, &[]);
        let t = uniform_weights(&mut rng, 100, 100);
        let bound: f64 = 0.1;
        let n = t.numel() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let expect = bound * bound / 3.0;
        assert!((var - expect).abs() / expect < 0.1);
        assert!(t.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn biases_start_at_zero() {
        let mut p = ParamSet::new();
        let mut rng = rng_for(0, &[]);
        let l = Linear::new(&mut p, "l", 3, 5, &mut rng);
        assert!(p.get(l.bias).data().iter().all(|&v| v == 0.0));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn kl_nonnegative(
                qm in prop::collection::vec(-5.0f64..5.0, 4),
                pm in prop::collection::vec(-5.0f64..5.0, 4),
                qlv in prop::collection::vec(-6.0f64..6.0, 4),
                plv in prop::collection::vec(-6.0f64..6.0, 4),
            ) {
                let k = kl_of(&qm, &qlv, &pm, &plv);
                prop_assert!(k >= -1e-12);
                prop_assert!(kl_of(&qm, &qlv, &qm, &qlv).abs() < 1e-12);
            }
        }
    }
}
