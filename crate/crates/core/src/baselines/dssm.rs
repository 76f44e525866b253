//! Deterministic-plus-stochastic state-space model: the GRU consumes encoded
//! observation pairs only, and the latent modulates the emission.
//!
//! The emission reads the summary through `t − 1`; the summary at `t` has
//! already absorbed `y_t` and would leak the target into its own prediction.

use lt_autodiff::{Bound, Graph, ParamSet, Var};

use crate::data::StreamStep;
use crate::error::Result;
use crate::latent::sample_latent;
use crate::mixture::Mixture;
use crate::model::{check_finite, FilterState, GraphState, ModelKind, SequentialModel, StepOutput};
use crate::nn::{gaussian_kl, gaussian_nll, split_gaussian, GruCell, Linear, Mlp, ParamCounts};
use crate::rng::{normals, rng_for, tag, StepRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DssmDims {
    pub x_dim: usize,
    /// Width of `φ_e([x, y])`.
    pub embed: usize,
    pub hidden: usize,
    pub latent: usize,
    /// Hidden width of the prior, decoder and posterior networks.
    pub net: usize,
}

impl DssmDims {
    pub fn param_counts(&self) -> ParamCounts {
        let d = self;
        ParamCounts::active(
            Linear::param_count(d.x_dim + 1, d.embed)
                + GruCell::param_count(d.embed, d.hidden)
                + Mlp::param_count(d.hidden, d.net, 2 * d.latent)
                + Mlp::param_count(d.hidden + d.latent + d.x_dim, d.net, 2),
        ) + ParamCounts::training_only(Mlp::param_count(d.hidden + d.embed, d.net, 2 * d.latent))
    }
}

#[derive(Debug, Clone)]
pub struct DssmModel {
    pub dims: DssmDims,
    pub params: ParamSet,
    pub phi_e: Linear,
    pub gru: GruCell,
    pub prior: Mlp,
    pub decoder: Mlp,
    pub posterior: Mlp,
}

impl DssmModel {
    pub fn new(dims: DssmDims, seed: u64) -> Self {
        let mut rng = rng_for(seed, &[tag::INIT]);
        let mut params = ParamSet::new();
        let d = dims;
        let phi_e = Linear::new(&mut params, "phi_e", d.x_dim + 1, d.embed, &mut rng);
        let gru = GruCell::new(&mut params, "gru", d.embed, d.hidden, &mut rng);
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
            d.hidden + d.embed,
            d.net,
            2 * d.latent,
            &mut rng,
        );
        Self {
            dims,
            params,
            phi_e,
            gru,
            prior,
            decoder,
            posterior,
        }
    }

    fn embed(&self, g: &mut Graph, p: &Bound, x: Var, y: Var) -> Result<Var> {
        let xy = g.concat(&[x, y])?;
        let e = self.phi_e.forward(g, p, xy)?;
        Ok(g.tanh(e))
    }

    fn prior_belief(&self, g: &mut Graph, p: &Bound, h_prev: Var) -> Result<(Var, Var)> {
        let out = self.prior.forward(g, p, h_prev)?;
        split_gaussian(g, out, self.dims.latent)
    }

    fn decode(&self, g: &mut Graph, p: &Bound, h_prev: Var, z: Var, x: Var) -> Result<(Var, Var)> {
        let inp = g.concat(&[h_prev, z, x])?;
        let out = self.decoder.forward(g, p, inp)?;
        split_gaussian(g, out, 1)
    }

    /// Single-sample ELBO; returns `(elbo, loglik, kl, h_t)`.
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
        let e = self.embed(g, p, x, y)?;
        let h = self.gru.step(g, p, h_prev, e)?;
        let he = g.concat(&[h_prev, e])?;
        let q = self.posterior.forward(g, p, he)?;
        let (qm, qlv) = split_gaussian(g, q, self.dims.latent)?;
        let z = sample_latent(g, qm, qlv, eps)?;
        let (m, lv) = self.decode(g, p, h_prev, z, x)?;
        let nll = gaussian_nll(g, y, m, lv)?;
        let loglik = g.neg(nll);
        let kl = gaussian_kl(g, qm, qlv, pm, plv)?;
        let bkl = g.scale(kl, beta);
        let elbo = g.sub(loglik, bkl)?;
        Ok((elbo, loglik, kl, h))
    }
}

impl SequentialModel for DssmModel {
    fn kind(&self) -> ModelKind {
        ModelKind::Dssm
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
            let (m, lv) = self.decode(&mut g, &p, h_prev, z, xv)?;
            means.push(g.scalar(m));
            logvars.push(g.scalar(lv));
        }
        Ok(Mixture::new(means, logvars))
    }

    fn observe(
        &self,
        state: &FilterState,
        step: &StreamStep,
        _k: usize,
        _rng: &mut StepRng,
    ) -> Result<FilterState> {
        check_finite(&step.x, "covariates")?;
        let mut g = Graph::new();
        let p = g.bind(&self.params);
        let h_prev = g.constant_vec(&state.h);
        let x = g.constant_vec(&step.x);
        let y = g.constant_vec(&[step.y]);
        let e = self.embed(&mut g, &p, x, y)?;
        let h = self.gru.step(&mut g, &p, h_prev, e)?;
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

    fn tiny(seed: u64) -> DssmModel {
        DssmModel::new(
            DssmDims {
                x_dim: 2,
                embed: 3,
                hidden: 4,
                latent: 2,
                net: 3,
            },
            seed,
        )
    }

    fn eval(m: &DssmModel, ps: &ParamSet, beta: f64, eps: &[f64]) -> (f64, f64, f64, Vec<f64>) {
        let mut g = Graph::new();
        let p = g.bind(ps);
        let h = g.constant_vec(&[0.1, -0.2, 0.3, 0.0]);
        let x = g.constant_vec(&[0.5, -1.0]);
        let y = g.constant_vec(&[0.7]);
        let (e, l, k, hn) = m.step_elbo_with(&mut g, &p, h, x, y, eps, beta).unwrap();
        (g.scalar(e), g.scalar(l), g.scalar(k), g.value(hn).to_vec())
    }

    #[test]
    fn latent_noise_does_not_reach_the_recurrence() {
        let m = tiny(1);
        let (e1, _, _, h1) = eval(&m, &m.params, 1.0, &[0.3, -0.2]);
        let (e2, _, _, h2) = eval(&m, &m.params, 1.0, &[-1.3, 0.9]);
        assert_eq!(h1, h2);
        assert_ne!(e1, e2);
    }

    #[test]
    fn beta_zero_is_reconstruction() {
        let m = tiny(2);
        let (e, l, k, _) = eval(&m, &m.params, 0.0, &[0.3, -0.2]);
        assert!(k > 0.0);
        assert_eq!(e, l);
    }

    #[test]
    fn tied_posterior_has_zero_kl() {
        let mut m = tiny(3);
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
    fn counts_match_allocation_and_exclude_posterior() {
        let m = tiny(0);
        let c = m.param_counts();
        assert_eq!(c.total, m.params.numel());
        assert_eq!(c.total - c.inference_time, Mlp::param_count(4 + 3, 3, 4));
    }
}
