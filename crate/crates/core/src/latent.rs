//! LatentTrack: a GRU summary of past observations parameterizes a Gaussian
//! belief over a low-dimensional latent, and a linear hypernetwork maps each
//! latent sample to the full weight vector of a small Gaussian predictor.

use lt_autodiff::{Bound, Graph, ParamSet, Tensor, Var};
use rand::Rng;

use crate::data::StreamStep;
use crate::error::{LtError, Result};
use crate::mixture::Mixture;
use crate::model::{check_finite, mean_of, FilterState, GraphState, ModelKind, SequentialModel, StepOutput};
use crate::nn::{gaussian_kl, gaussian_nll, split_gaussian, GruCell, Linear, ParamCounts, LOGVAR_MAX, LOGVAR_MIN};
use crate::rng::{normals, rng_for, tag, StepRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LtVariant {
    /// KL against a transition kernel conditioned on the previous latent sample.
    Structured,
    /// KL against the marginal one-step prior.
    Unstructured,
}

impl LtVariant {
    pub fn name(self) -> &'static str {
        match self {
            Self::Structured => "structured",
            Self::Unstructured => "unstructured",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LtDims {
    pub x_dim: usize,
    /// Width of the `[x; y]` embedding fed to the GRU.
    pub embed: usize,
    /// GRU summary size `d_h`.
    pub hidden: usize,
    /// Latent size `d_z`.
    pub latent: usize,
    /// Hidden width of the generated predictor.
    pub predictor_hidden: usize,
}

impl LtDims {
    pub fn predictor(&self) -> PredictorLayout {
        PredictorLayout {
            input: self.x_dim,
            hidden: self.predictor_hidden,
        }
    }

    pub fn param_counts(&self, variant: LtVariant) -> ParamCounts {
        let head = Linear::param_count(self.hidden, 2 * self.latent);
        let mut c = ParamCounts::active(Linear::param_count(self.x_dim + 1, self.embed))
            + ParamCounts::active(GruCell::param_count(self.embed, self.hidden))
            + ParamCounts::active(head)
            + ParamCounts::active(Linear::param_count(self.latent, self.predictor().len()));
        match variant {
            LtVariant::Structured => {
                c = c
                    + ParamCounts::active(head)
                    + ParamCounts::active(Linear::param_count(
                        self.hidden + self.latent,
                        2 * self.latent,
                    ));
            }
            // The prior path alone drives prediction.
            LtVariant::Unstructured => c = c + ParamCounts::training_only(head),
        }
        c
    }
}

/// Shape of the generated predictor: one tanh hidden layer with separate
/// mean and log-variance read-outs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PredictorLayout {
    pub input: usize,
    pub hidden: usize,
}

impl PredictorLayout {
    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        let (i, h) = (self.input, self.hidden);
        vec![
            ("hidden.weight".into(), vec![h, i]),
            ("hidden.bias".into(), vec![h]),
            ("mean.weight".into(), vec![1, h]),
            ("mean.bias".into(), vec![1]),
            ("logvar.weight".into(), vec![1, h]),
            ("logvar.bias".into(), vec![1]),
        ]
    }

    pub fn len(&self) -> usize {
        self.hidden * self.input + self.hidden + 2 * self.hidden + 2
    }

    /// Input width of the layer each packed entry belongs to.
    pub fn fan_ins(&self) -> Vec<usize> {
        let (i, h) = (self.input, self.hidden);
        let mut out = Vec::with_capacity(self.len());
        out.extend(std::iter::repeat_n(i, h * i + h));
        out.extend(std::iter::repeat_n(h, 2 * h + 2));
        out
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Evaluates the predictor whose weights are packed in `theta`.
    pub fn forward(&self, g: &mut Graph, theta: Var, x: Var) -> Result<(Var, Var)> {
        let mut off = 0;
        let mut parts = Vec::with_capacity(6);
        for (_, shape) in self.manifest() {
            let n: usize = shape.iter().product();
            let s = g.slice(theta, off, n)?;
            parts.push(if shape.len() == 2 { g.reshape(s, &shape)? } else { s });
            off += n;
        }
        let wx = g.matmul(parts[0], x)?;
        let pre = g.add(wx, parts[1])?;
        let hid = g.tanh(pre);
        let m = g.matmul(parts[2], hid)?;
        let mean = g.add(m, parts[3])?;
        let l = g.matmul(parts[4], hid)?;
        let lv = g.add(l, parts[5])?;
        Ok((mean, g.clamp(lv, LOGVAR_MIN, LOGVAR_MAX)))
    }
}

/// Makes `g_η(z) = θ₀ + W z` start as a conventionally initialized predictor:
/// `θ₀` draws each weight uniformly within `±1/√fan_in` of its target layer
/// (biases zero) and each row of `W` is shrunk by the same factor.
fn init_hypernet(params: &mut ParamSet, hyper: &Linear, layout: PredictorLayout, rng: &mut impl Rng) {
    let fan = layout.fan_ins();
    let mut base = Vec::with_capacity(fan.len());
    let mut off = 0;
    for (_, shape) in layout.manifest() {
        let n: usize = shape.iter().product();
        for &f in &fan[off..off + n] {
            let b = 1.0 / (f as f64).sqrt();
            base.push(if shape.len() == 2 { rng.random_range(-b..b) } else { 0.0 });
        }
        off += n;
    }
    params.get_mut(hyper.bias).data_mut().copy_from_slice(&base);
    let w = params.get_mut(hyper.weight).data_mut();
    for (row, &f) in w.chunks_mut(hyper.input).zip(&fan) {
        let s = 1.0 / (f as f64).sqrt();
        row.iter_mut().for_each(|v| *v *= s);
    }
}

/// Flat predictor weights with the manifest that names them.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedPredictor {
    pub theta: Vec<f64>,
    pub layout: PredictorLayout,
}

impl GeneratedPredictor {
    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        self.layout.manifest()
    }

    /// `(mean, logvar)` of `y | x`.
    pub fn predict(&self, x: &[f64]) -> Result<(f64, f64)> {
        check_finite(x, "predictor input")?;
        let mut g = Graph::new();
        let theta = g.constant_vec(&self.theta);
        let xv = g.constant_vec(x);
        let (m, lv) = self.layout.forward(&mut g, theta, xv)?;
        Ok((g.scalar(m), g.scalar(lv)))
    }
}

/// Diagonal Gaussian over the latent.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentBelief {
    pub mean: Vec<f64>,
    pub logvar: Vec<f64>,
}

impl LatentBelief {
    /// `mean + exp(logvar / 2) ⊙ eps`.
    pub fn sample(&self, eps: &[f64]) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.logvar)
            .zip(eps)
            .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
            .collect()
    }
}

/// Reparameterized draw `mean + exp(logvar / 2) ⊙ eps` on the tape.
pub fn sample_latent(g: &mut Graph, mean: Var, logvar: Var, eps: &[f64]) -> Result<Var> {
    let half = g.scale(logvar, 0.5);
    let sd = g.exp(half);
    let e = g.constant_vec(eps);
    let noise = g.mul(sd, e)?;
    Ok(g.add(mean, noise)?)
}

/// Tape nodes produced by one training step.
#[derive(Debug, Clone)]
pub struct LtStep {
    pub elbo: Var,
    pub loglik: Var,
    pub kl: Var,
    pub h: Var,
    pub z: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct LtModel {
    pub variant: LtVariant,
    pub dims: LtDims,
    pub params: ParamSet,
    pub encoder: Linear,
    pub gru: GruCell,
    pub prior: Linear,
    pub posterior: Linear,
    pub transition: Option<Linear>,
    pub hyper: Linear,
}

impl LtModel {
    pub fn new(variant: LtVariant, dims: LtDims, seed: u64) -> Self {
        let mut rng = rng_for(seed, &[tag::INIT]);
        let mut params = ParamSet::new();
        let d = dims;
        let encoder = Linear::new(&mut params, "encoder", d.x_dim + 1, d.embed, &mut rng);
        let gru = GruCell::new(&mut params, "gru", d.embed, d.hidden, &mut rng);
        let prior = Linear::new(&mut params, "prior", d.hidden, 2 * d.latent, &mut rng);
        let posterior = Linear::new(&mut params, "posterior", d.hidden, 2 * d.latent, &mut rng);
        let transition = (variant == LtVariant::Structured).then(|| {
            Linear::new(
                &mut params,
                "transition",
                d.hidden + d.latent,
                2 * d.latent,
                &mut rng,
            )
        });
        let hyper = Linear::new(&mut params, "hyper", d.latent, d.predictor().len(), &mut rng);
        init_hypernet(&mut params, &hyper, d.predictor(), &mut rng);
        Self {
            variant,
            dims,
            params,
            encoder,
            gru,
            prior,
            posterior,
            transition,
            hyper,
        }
    }

    /// `tanh(Enc([x; y]))`.
    pub fn encode_step(&self, g: &mut Graph, p: &Bound, x: Var, y: Var) -> Result<Var> {
        check_finite(g.value(x), "encoder input x")?;
        check_finite(g.value(y), "encoder input y")?;
        let xy = g.concat(&[x, y])?;
        let e = self.encoder.forward(g, p, xy)?;
        Ok(g.tanh(e))
    }

    /// `p(z_t | D_{1:t−1})` from the summary through `t − 1`.
    pub fn prior_belief(&self, g: &mut Graph, p: &Bound, h_prev: Var) -> Result<(Var, Var)> {
        let out = self.prior.forward(g, p, h_prev)?;
        split_gaussian(g, out, self.dims.latent)
    }

    /// `q(z_t | D_{1:t})` from the summary that has absorbed `D_t`.
    pub fn posterior_belief(&self, g: &mut Graph, p: &Bound, h: Var) -> Result<(Var, Var)> {
        let out = self.posterior.forward(g, p, h)?;
        split_gaussian(g, out, self.dims.latent)
    }

    /// `p(z_t | z_{t−1}, D_{1:t−1})` from `[h_{t−1}; z_{t−1}]`.
    pub fn transition_belief(
        &self,
        g: &mut Graph,
        p: &Bound,
        h_prev: Var,
        z_prev: Var,
    ) -> Result<(Var, Var)> {
        let head = self.transition.as_ref().ok_or(LtError::Variant {
            op: "transition_belief",
            variant: self.variant.name(),
        })?;
        let hz = g.concat(&[h_prev, z_prev])?;
        let out = head.forward(g, p, hz)?;
        split_gaussian(g, out, self.dims.latent)
    }

    /// `θ = g_η(z)`.
    pub fn generate_weights(&self, g: &mut Graph, p: &Bound, z: Var) -> Result<Var> {
        self.hyper.forward(g, p, z)
    }

    fn loglik(
        &self,
        g: &mut Graph,
        p: &Bound,
        q_mean: Var,
        q_logvar: Var,
        x: Var,
        y: Var,
        eps: &[Vec<f64>],
    ) -> Result<(Var, Vec<Var>)> {
        let layout = self.dims.predictor();
        let mut terms = Vec::with_capacity(eps.len());
        let mut zs = Vec::with_capacity(eps.len());
        for e in eps {
            let z = sample_latent(g, q_mean, q_logvar, e)?;
            let theta = self.generate_weights(g, p, z)?;
            let (m, lv) = layout.forward(g, theta, x)?;
            let nll = gaussian_nll(g, y, m, lv)?;
            terms.push(g.neg(nll));
            zs.push(z);
        }
        Ok((mean_of(g, &terms)?, zs))
    }

    /// `E_q[log p(y|x; g(z))] − β KL(q ‖ prior)` with `eps.len()` samples.
    #[allow(clippy::too_many_arguments)]
    pub fn step_elbo_unstructured(
        &self,
        g: &mut Graph,
        p: &Bound,
        h_prev: Var,
        x: Var,
        y: Var,
        eps: &[Vec<f64>],
        beta: f64,
    ) -> Result<LtStep> {
        if eps.is_empty() {
            return Err(crate::error::invalid("K must be ≥ 1"));
        }
        let (pm, plv) = self.prior_belief(g, p, h_prev)?;
        let e = self.encode_step(g, p, x, y)?;
        let h = self.gru.step(g, p, h_prev, e)?;
        let (qm, qlv) = self.posterior_belief(g, p, h)?;
        let (loglik, z) = self.loglik(g, p, qm, qlv, x, y, eps)?;
        let kl = gaussian_kl(g, qm, qlv, pm, plv)?;
        let bkl = g.scale(kl, beta);
        let elbo = g.sub(loglik, bkl)?;
        Ok(LtStep {
            elbo,
            loglik,
            kl,
            h,
            z,
        })
    }

    /// Structured bound: the KL term averages `KL(q ‖ transition(h_{t−1}, z_{t−1}))`
    /// over the carried previous-posterior samples. With none carried (the
    /// first step of a stream) the prior head stands in for the transition.
    #[allow(clippy::too_many_arguments)]
    pub fn step_elbo_structured(
        &self,
        g: &mut Graph,
        p: &Bound,
        h_prev: Var,
        z_prev: &[Var],
        x: Var,
        y: Var,
        eps: &[Vec<f64>],
        beta: f64,
    ) -> Result<LtStep> {
        if self.variant != LtVariant::Structured {
            return Err(LtError::Variant {
                op: "step_elbo_structured",
                variant: self.variant.name(),
            });
        }
        if eps.is_empty() {
            return Err(crate::error::invalid("K must be ≥ 1"));
        }
        let mut targets = Vec::with_capacity(z_prev.len().max(1));
        if z_prev.is_empty() {
            targets.push(self.prior_belief(g, p, h_prev)?);
        }
        for &zp in z_prev {
            targets.push(self.transition_belief(g, p, h_prev, zp)?);
        }
        let e = self.encode_step(g, p, x, y)?;
        let h = self.gru.step(g, p, h_prev, e)?;
        let (qm, qlv) = self.posterior_belief(g, p, h)?;
        let (loglik, z) = self.loglik(g, p, qm, qlv, x, y, eps)?;
        let kls = targets
            .into_iter()
            .map(|(tm, tlv)| gaussian_kl(g, qm, qlv, tm, tlv))
            .collect::<Result<Vec<_>>>()?;
        let kl = mean_of(g, &kls)?;
        let bkl = g.scale(kl, beta);
        let elbo = g.sub(loglik, bkl)?;
        Ok(LtStep {
            elbo,
            loglik,
            kl,
            h,
            z,
        })
    }

    fn belief_values(g: &Graph, (m, lv): (Var, Var)) -> LatentBelief {
        LatentBelief {
            mean: g.value(m).to_vec(),
            logvar: g.value(lv).to_vec(),
        }
    }

    /// Prior belief at the given summary, as plain values.
    pub fn prior_at(&self, h_prev: &[f64]) -> Result<LatentBelief> {
        let mut g = Graph::new();
        let p = g.bind(&self.params);
        let h = g.constant_vec(h_prev);
        let b = self.prior_belief(&mut g, &p, h)?;
        Ok(Self::belief_values(&g, b))
    }

    pub fn posterior_at(&self, h: &[f64]) -> Result<LatentBelief> {
        let mut g = Graph::new();
        let p = g.bind(&self.params);
        let h = g.constant_vec(h);
        let b = self.posterior_belief(&mut g, &p, h)?;
        Ok(Self::belief_values(&g, b))
    }

    pub fn transition_at(&self, h_prev: &[f64], z_prev: &[f64]) -> Result<LatentBelief> {
        let mut g = Graph::new();
        let p = g.bind(&self.params);
        let h = g.constant_vec(h_prev);
        let z = g.constant_vec(z_prev);
        let b = self.transition_belief(&mut g, &p, h, z)?;
        Ok(Self::belief_values(&g, b))
    }

    pub fn generate_at(&self, z: &[f64]) -> Result<GeneratedPredictor> {
        let mut g = Graph::new();
        let p = g.bind(&self.params);
        let zv = g.constant_vec(z);
        let theta = self.generate_weights(&mut g, &p, zv)?;
        Ok(GeneratedPredictor {
            theta: g.value(theta).to_vec(),
            layout: self.dims.predictor(),
        })
    }

    /// K-component predictive mixture. Without carried latent samples the
    /// prior path is used; otherwise each component draws from the transition
    /// kernel of its own carried sample.
    pub fn predictive_mixture(
        &self,
        h_prev: &[f64],
        z_prev: &[Vec<f64>],
        x: &[f64],
        eps: &[Vec<f64>],
    ) -> Result<Mixture> {
        check_finite(x, "covariates")?;
        let mut g = Graph::new();
        let p = g.bind(&self.params);
        let h = g.constant_vec(h_prev);
        let xv = g.constant_vec(x);
        let layout = self.dims.predictor();
        let use_transition = self.variant == LtVariant::Structured && !z_prev.is_empty();
        let prior = if use_transition {
            None
        } else {
            Some(self.prior_belief(&mut g, &p, h)?)
        };
        let mut means = Vec::with_capacity(eps.len());
        let mut logvars = Vec::with_capacity(eps.len());
        for (k, e) in eps.iter().enumerate() {
            let (bm, blv) = match prior {
                Some(b) => b,
                None => {
                    let zp = g.constant_vec(&z_prev[k % z_prev.len()]);
                    self.transition_belief(&mut g, &p, h, zp)?
                }
            };
            let z = sample_latent(&mut g, bm, blv, e)?;
            let theta = self.generate_weights(&mut g, &p, z)?;
            let (m, lv) = layout.forward(&mut g, theta, xv)?;
            means.push(g.scalar(m));
            logvars.push(g.scalar(lv));
        }
        Ok(Mixture::new(means, logvars))
    }

    fn draw_eps(&self, k: usize, rng: &mut StepRng) -> Vec<Vec<f64>> {
        (0..k).map(|_| normals(rng, self.dims.latent)).collect()
    }
}

impl SequentialModel for LtModel {
    fn kind(&self) -> ModelKind {
        match self.variant {
            LtVariant::Structured => ModelKind::LtStructured,
            LtVariant::Unstructured => ModelKind::LtUnstructured,
        }
    }

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn param_counts(&self) -> ParamCounts {
        self.dims.param_counts(self.variant)
    }

    fn hidden(&self) -> usize {
        self.dims.hidden
    }

    fn step_elbo(
        &self,
        g: &mut Graph,
        p: &Bound,
        state: &GraphState,
        step: &StreamStep,
        k: usize,
        beta: f64,
        rng: &mut StepRng,
    ) -> Result<StepOutput> {
        let eps = self.draw_eps(k, rng);
        let x = g.constant_vec(&step.x);
        let y = g.constant_vec(&[step.y]);
        let out = match self.variant {
            LtVariant::Unstructured => {
                self.step_elbo_unstructured(g, p, state.h, x, y, &eps, beta)?
            }
            LtVariant::Structured => {
                self.step_elbo_structured(g, p, state.h, &state.z, x, y, &eps, beta)?
            }
        };
        let z = match self.variant {
            LtVariant::Structured => out.z,
            LtVariant::Unstructured => Vec::new(),
        };
        Ok(StepOutput {
            elbo: out.elbo,
            nll: -g.scalar(out.loglik),
            kl: g.scalar(out.kl),
            state: GraphState { h: out.h, z },
        })
    }

    fn predict(
        &self,
        state: &FilterState,
        x: &[f64],
        k: usize,
        rng: &mut StepRng,
    ) -> Result<Mixture> {
        let eps = self.draw_eps(k, rng);
        self.predictive_mixture(&state.h, &state.z, x, &eps)
    }

    fn observe(
        &self,
        state: &FilterState,
        step: &StreamStep,
        k: usize,
        rng: &mut StepRng,
    ) -> Result<FilterState> {
        let mut g = Graph::new();
        let p = g.bind(&self.params);
        let h_prev = g.constant_vec(&state.h);
        let x = g.constant_vec(&step.x);
        let y = g.constant_vec(&[step.y]);
        let e = self.encode_step(&mut g, &p, x, y)?;
        let h = self.gru.step(&mut g, &p, h_prev, e)?;
        let h_val = g.value(h).to_vec();
        let z = match self.variant {
            LtVariant::Unstructured => Vec::new(),
            LtVariant::Structured => {
                let (qm, qlv) = self.posterior_belief(&mut g, &p, h)?;
                let q = Self::belief_values(&g, (qm, qlv));
                self.draw_eps(k, rng).iter().map(|e| q.sample(e)).collect()
            }
        };
        Ok(FilterState {
            t: state.t + 1,
            h: h_val,
            z,
        })
    }
}

/// Directly constructed predictor network holding explicit weights; used to
/// check that the packed representation evaluates identically.
#[derive(Debug, Clone)]
pub struct PredictorNet {
    pub params: ParamSet,
    pub hidden: Linear,
    pub mean: Linear,
    pub logvar: Linear,
}

impl PredictorNet {
    pub fn from_theta(layout: PredictorLayout, theta: &[f64]) -> Result<Self> {
        let mut params = ParamSet::new();
        let mut off = 0;
        let mut ids = Vec::new();
        for (name, shape) in layout.manifest() {
            let n: usize = shape.iter().product();
            ids.push(params.add(name, Tensor::new(shape, theta[off..off + n].to_vec())?));
            off += n;
        }
        let lin = |w: usize, input: usize| Linear {
            weight: ids[w],
            bias: ids[w + 1],
            input,
            output: if w == 0 { layout.hidden } else { 1 },
        };
        Ok(Self {
            hidden: lin(0, layout.input),
            mean: lin(2, layout.hidden),
            logvar: lin(4, layout.hidden),
            params,
        })
    }

    pub fn predict(&self, x: &[f64]) -> Result<(f64, f64)> {
        let mut g = Graph::new();
        let p = g.bind(&self.params);
        let xv = g.constant_vec(x);
        let pre = self.hidden.forward(&mut g, &p, xv)?;
        let hid = g.tanh(pre);
        let m = self.mean.forward(&mut g, &p, hid)?;
        let lv = self.logvar.forward(&mut g, &p, hid)?;
        let lv = g.clamp(lv, LOGVAR_MIN, LOGVAR_MAX);
        Ok((g.scalar(m), g.scalar(lv)))
    }
}
