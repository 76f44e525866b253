//! Variational RNN adapted to conditional regression: the sampled latent
//! feeds the recurrence through `φ_z`.

use lt_autodiff::{Bound, Graph, ParamSet, Var};

use crate::data::StreamStep;
use crate::error::Result;
use crate::latent::sample_latent;
use crate::mixture::Mixture;
use crate::model::{check_finite, FilterState, GraphState, ModelKind, SequentialModel, StepOutput};
use crate::nn::{gaussian_kl, gaussian_nll, split_gaussian, GruCell, Linear, Mlp, ParamCounts};
use crate::rng::{normals, rng_for, tag, StepRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VrnnDims {
    pub x_dim: usize,
    /// Output width of both `φ_x` and `φ_z`.
    pub feature: usize,
    pub hidden: usize,
    pub latent: usize,
    /// Hidden width of the prior, decoder and posterior networks.
    pub net: usize,
}

impl VrnnDims {
    pub fn param_counts(&self) -> ParamCounts {
        let d = self;
        ParamCounts::active(
            Linear::param_count(d.x_dim, d.feature)
                + Linear::param_count(d.latent, d.feature)
                + GruCell::param_count(2 * d.feature, d.hidden)
                + Mlp::param_count(d.hidden, d.net, 2 * d.latent)
                + Mlp::param_count(d.hidden + d.latent + d.x_dim, d.net, 2)
                + Mlp::param_count(d.hidden + d.x_dim + 1, d.net, 2 * d.latent),
        )
    }
}

#[derive(Debug, Clone)]
pub struct VrnnModel {
    pub dims: VrnnDims,
    pub params: ParamSet,
    pub phi_x: Linear,
    pub phi_z: Linear,
    pub gru: GruCell,
    pub prior: Mlp,
    pub decoder: Mlp,
    pub posterior: Mlp,
}

impl VrnnModel {
    pub fn new(dims: VrnnDims, seed: u64) -> Self {
        let mut rng = rng_for(seed, &[tag::INIT]);
        let mut params = ParamSet::new();
        let d = dims;
        let phi_x = Linear::new(&mut params, "phi_x", d.x_dim, d.feature, &mut rng);
        let phi_z = Linear::new(&mut params, "phi_z", d.latent, d.feature, &mut rng);
        let gru = GruCell::new(&mut params, "gru", 2 * d.feature, d.hidden, &mut rng);
        let prior = Mlp::new(&mut params, "prior", d.hidden, d.net, 2 * d.latent, &mut rng);
        let decoder = Mlp::new(
            &mut params,
            "decoder",
            d.hidden + d.latent + d.x_dim,
            d.net,
            2,
            &mut rng,
        );
        let posterior = Mlp::new(
            &mut params,
            "posterior",
            d.hidden + d.x_dim + 1,
            d.net,
            2 * d.latent,
            &mut rng,
        );
        Self {
            dims,
            params,
            phi_x,
            phi_z,
            gru,
            prior,
            decoder,
            posterior,
        }
    }

    fn advance(&self, g: &mut Graph, p: &Bound, h_prev: Var, x: Var, z: Var) -> Result<Var> {
        let fx = self.phi_x.forward(g, p, x)?;
        let fx = g.tanh(fx);
        let fz = self.phi_z.forward(g, p, z)?;
        let fz = g.tanh(fz);
        let inp = g.concat(&[fx, fz])?;
        self.gru.step(g, p, h_prev, inp)
    }

    fn decode(&self, g: &mut Graph, p: &Bound, h: Var, z: Var, x: Var) -> Result<(Var, Var)> {
        let inp = g.concat(&[h, z, x])?;
        let out = self.decoder.forward(g, p, inp)?;
        split_gaussian(g, out, 1)
    }

    fn posterior_belief(&self, g: &mut Graph, p: &Bound, h_prev: Var, x: Var, y: Var) -> Result<(Var, Var)> {
        let inp = g.concat(&[h_prev, x, y])?;
        let out = self.posterior.forward(g, p, inp)?;
        split_gaussian(g, out, self.dims.latent)
    }

    fn prior_belief(&self, g: &mut Graph, p: &Bound, h_prev: Var) -> Result<(Var, Var)> {
        let out = self.prior.forward(g, p, h_prev)?;
        split_gaussian(g, out, self.dims.latent)
    }

    /// Single-sample `E_q[log p(y | x, z, h_t)] − β KL(q ‖ prior)`; returns the ELBO and `h_t`.
    #[allow(clippy::too_many_arguments)]
    pub fn step_elbo_with(
        &self,
        g: &mut Graph,
        p: &Bound,
        h_prev: Var,
        x: Var,
        y: Var,
        eps: &[f64],
        beta: f64,
    ) -> Result<(Var, Var, Var, Var)> {
        check_finite(g.value(x), "covariates")?;
        check_finite(g.value(y), "target")?;
        let (pm, plv) = self.prior_belief(g, p, h_prev)?;
        let (qm, qlv) = self.posterior_belief(g, p, h_prev, x, y)?;
        let z = sample_latent(g, qm, qlv, eps)?;
        let h = self.advance(g, p, h_prev, x, z)?;
        let (m, lv) = self.decode(g, p, h, z, x)?;
        let nll = gaussian_nll(g, y, m, lv)?;
        let loglik = g.neg(nll);
        let kl = gaussian_kl(g, qm, qlv, pm, plv)?;
        let bkl = g.scale(kl, beta);
        let elbo = g.sub(loglik, bkl)?;
        Ok((elbo, loglik, kl, h))
    }
}

impl SequentialModel for VrnnModel {
    fn kind(&self) -> ModelKind {
        ModelKind::Vrnn
    }

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn param_counts(&self) -> ParamCounts {
        self.dims.param_counts()
    }

    fn hidden(&self) -> usize {
        self.dims.hidden
    }

    /// Uses a single posterior sample regardless of `k`.
    fn step_elbo(
        &self,
        g: &mut Graph,
        p: &Bound,
        state: &GraphState,
        step: &StreamStep,
        _k: usize,
        beta: f64,
        rng: &mut StepRng,
    ) -> Result<StepOutput> {
        let eps = normals(rng, self.dims.latent);
        let x = g.constant_vec(&step.x);
        let y = g.constant_vec(&[step.y]);
        let (elbo, loglik, kl, h) = self.step_elbo_with(g, p, state.h, x, y, &eps, beta)?;
        Ok(StepOutput {
            elbo,
            nll: -g.scalar(loglik),
            kl: g.scalar(kl),
            state: GraphState { h, z: Vec::new() },
        })
    }

    fn predict(
        &self,
        state: &FilterState,
        x: &[f64],
        k: usize,
        rng: &mut StepRng,
    ) -> Result<Mixture> {
        check_finite(x, "covariates")?;
        let mut g = Graph::new();
        let p = g.bind(&self.params);
        let h_prev = g.constant_vec(&state.h);
        let xv = g.constant_vec(x);
        let (pm, plv) = self.prior_belief(&mut g, &p, h_prev)?;
        let mut means = Vec::with_capacity(k);
        let mut logvars = Vec::with_capacity(k);
        for _ in 0..k {
            let eps = normals(rng, self.dims.latent);
            let z = sample_latent(&mut g, pm, plv, &eps)?;
            let h = self.advance(&mut g, &p, h_prev, xv, z)?;
            let (m, lv) = self.decode(&mut g, &p, h, z, xv)?;
            means.push(g.scalar(m));
            logvars.push(g.scalar(lv));
        }
        Ok(Mixture::new(means, logvars))
    }

    /// Advances with one posterior sample.
    fn observe(
        &self,
        state: &FilterState,
        step: &StreamStep,
        _k: usize,
        rng: &mut StepRng,
    ) -> Result<FilterState> {
        check_finite(&step.x, "covariates")?;
        let mut g = Graph::new();
        let p = g.bind(&self.params);
        let h_prev = g.constant_vec(&state.h);
        let x = g.constant_vec(&step.x);
        let y = g.constant_vec(&[step.y]);
        let (qm, qlv) = self.posterior_belief(&mut g, &p, h_prev, x, y)?;
        let eps = normals(rng, self.dims.latent);
        let z = sample_latent(&mut g, qm, qlv, &eps)?;
        let h = self.advance(&mut g, &p, h_prev, x, z)?;
        Ok(FilterState {
            t: state.t + 1,
            h: g.value(h).to_vec(),
            z: Vec::new(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use lt_autodiff::gradcheck::{numeric_gradient, relative_error, FD_STEP};

    fn tiny(seed: u64) -> VrnnModel {
        VrnnModel::new(
            VrnnDims {
                x_dim: 2,
                feature: 3,
                hidden: 4,
                latent: 2,
                net: 3,
            },
            seed,
        )
    }

    fn eval(m: &VrnnModel, ps: &ParamSet, beta: f64, eps: &[f64]) -> (f64, f64, f64, Vec<f64>) {
        let mut g = Graph::new();
        let p = g.bind(ps);
        let h = g.constant_vec(&[0.1, -0.2, 0.3, 0.0]);
        let x = g.constant_vec(&[0.5, -1.0]);
        let y = g.constant_vec(&[0.7]);
        let (e, l, k, hn) = m.step_elbo_with(&mut g, &p, h, x, y, eps, beta).unwrap();
        (g.scalar(e), g.scalar(l), g.scalar(k), g.value(hn).to_vec())
    }

    #[test]
    fn beta_zero_is_reconstruction() {
        let m = tiny(1);
        let (e, l, k, _) = eval(&m, &m.params, 0.0, &[0.3, -0.2]);
        assert!(k > 0.0);
        assert_eq!(e, l);
    }

    #[test]
    fn tied_posterior_has_zero_kl() {
        let mut m = tiny(2);
        // Both networks output the same constant when their read-out weights vanish.
        for id in [m.prior.out.weight, m.posterior.out.weight] {
            m.params.get_mut(id).data_mut().fill(0.0);
        }
        let b = vec![0.1, -0.3, 0.2, 0.05];
        m.params.get_mut(m.prior.out.bias).data_mut().copy_from_slice(&b);
        m.params.get_mut(m.posterior.out.bias).data_mut().copy_from_slice(&b);
        let (e, l, k, _) = eval(&m, &m.params, 1.0, &[0.3, -0.2]);
        assert_eq!(k, 0.0);
        assert_eq!(e, l);
    }

    #[test]
    fn latent_noise_reaches_the_recurrence() {
        let m = tiny(3);
        let (_, _, _, h1) = eval(&m, &m.params, 1.0, &[0.3, -0.2]);
        let (_, _, _, h2) = eval(&m, &m.params, 1.0, &[-1.3, 0.9]);
        assert_ne!(h1, h2);
    }

    #[test]
    fn step_gradient_matches_finite_differences() {
        for draw in 0..20u64 {
            let m = tiny(10 + draw);
            let eps = normals(&mut rng_for(draw, &[]), 2);
            let mut g = Graph::new();
            let p = g.bind(&m.params);
            let h = g.constant_vec(&[0.1, -0.2, 0.3, 0.0]);
            let x = g.constant_vec(&[0.5, -1.0]);
            let y = g.constant_vec(&[0.7]);
            let (e, ..) = m.step_elbo_with(&mut g, &p, h, x, y, &eps, 0.8).unwrap();
            let mut ps = m.params.clone();
            g.backward_into(e, &mut ps).unwrap();
            let analytic = ps.flat_grads();
            let mut base = m.params.clone();
            let numeric = numeric_gradient(&mut base, FD_STEP, |ps| eval(&m, ps, 0.8, &eps).0);
            let err = relative_error(&analytic, &numeric);
            assert!(err < 1e-5, "draw {draw}: {err}");
        }
    }

    #[test]
    fn counts_match_allocation() {
        let m = tiny(0);
        assert_eq!(m.param_counts().total, m.params.numel());
    }
}
