//! Static uncertainty baselines without temporal state: MC-Dropout,
//! Bayes-by-Backprop and deep ensembles. Each is fitted on recency-weighted
//! sliding windows and predicts an equal-weight Gaussian mixture.

use lt_autodiff::{Bound, Graph, ParamId, ParamSet, Tensor, Var};
use rand::Rng;

use crate::data::StreamStep;
use crate::error::{invalid, Result};
use crate::mixture::Mixture;
use crate::model::{check_finite, ModelKind};
use crate::nn::{gaussian_kl, gaussian_kl_value, gaussian_nll_rows, uniform_weights, Linear, ParamCounts, LOGVAR_MAX, LOGVAR_MIN, WEIGHT_EPS};
use crate::optim::Adam;
use crate::rng::{normals, rng_for, tag, StepRng};

/// Outcome of one window update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitReport {
    /// Minimized objective: normalized weighted NLL (+ scaled KL for BBB).
    pub loss: f64,
    /// Weighted NLL part of `loss`.
    pub nll: f64,
    /// Unscaled weight-posterior KL (zero without one).
    pub kl: f64,
    pub grad_norm: f64,
    pub applied: bool,
}

/// Shared interface of the static baselines.
pub trait StaticModel: Send + Sync {
    fn kind(&self) -> ModelKind;
    fn param_counts(&self) -> ParamCounts;
    fn param_sets(&self) -> Vec<&ParamSet>;
    fn param_sets_mut(&mut self) -> Vec<&mut ParamSet>;

    /// One optimizer step (per member) on the weighted window objective.
    /// `kl_weight` multiplies the weight-posterior KL where one exists.
    fn fit_window(
        &mut self,
        window: &[StreamStep],
        weights: &[f64],
        kl_weight: f64,
        rng: &mut StepRng,
    ) -> Result<FitReport>;

    /// Mixture over `k` stochastic passes (or over members).
    fn predict(&self, x: &[f64], k: usize, rng: &mut StepRng) -> Result<Mixture>;
}

fn window_inputs(g: &mut Graph, window: &[StreamStep], weights: &[f64]) -> Result<(Var, Var, Var, f64)> {
    if window.is_empty() {
        return Err(invalid("empty training window"));
    }
    if weights.len() != window.len() {
        return Err(invalid("one weight per window step required"));
    }
    let d = window[0].x.len();
    let xs: Vec<f64> = window.iter().flat_map(|s| s.x.iter().copied()).collect();
    check_finite(&xs, "covariates")?;
    let x = g.constant(&[window.len(), d], xs)?;
    let y = g.constant_vec(&window.iter().map(|s| s.y).collect::<Vec<_>>());
    let w = g.constant_vec(weights);
    let z: f64 = weights.iter().sum();
    Ok((x, y, w, z))
}

/// `Σ w_i NLL_i / max(Σ w_i, ε)`.
fn weighted_nll(g: &mut Graph, y: Var, mean: Var, logvar: Var, w: Var, z: f64) -> Result<Var> {
    let rows = gaussian_nll_rows(g, y, mean, logvar)?;
    let weighted = g.mul(rows, w)?;
    let s = g.sum(weighted);
    Ok(g.scale(s, 1.0 / z.max(WEIGHT_EPS)))
}

fn column(g: &mut Graph, v: Var) -> Result<Var> {
    let n = g.shape(v)[0];
    Ok(g.reshape(v, &[n])?)
}

/// Tanh MLP with separate mean and log-variance read-outs.
#[derive(Debug, Clone)]
pub struct DenseNet {
    pub layers: Vec<Linear>,
    pub mean: Linear,
    pub logvar: Linear,
}

impl DenseNet {
    pub fn new(params: &mut ParamSet, name: &str, input: usize, widths: &[usize], rng: &mut impl Rng) -> Self {
        let mut layers = Vec::with_capacity(widths.len());
        let mut prev = input;
        for (i, &w) in widths.iter().enumerate() {
            layers.push(Linear::new(params, &format!("{name}.{i}"), prev, w, rng));
            prev = w;
        }
        Self {
            layers,
            mean: Linear::new(params, &format!("{name}.mean"), prev, 1, rng),
            logvar: Linear::new(params, &format!("{name}.logvar"), prev, 1, rng),
        }
    }

    pub fn param_count(input: usize, widths: &[usize]) -> usize {
        let mut prev = input;
        let mut n = 0;
        for &w in widths {
            n += Linear::param_count(prev, w);
            prev = w;
        }
        n + 2 * Linear::param_count(prev, 1)
    }

    /// Row-batched forward; `masks[l]` multiplies the activations of hidden layer `l`.
    pub fn forward_rows(&self, g: &mut Graph, p: &Bound, x: Var, masks: Option<&[Var]>) -> Result<(Var, Var)> {
        let mut a = x;
        for (l, layer) in self.layers.iter().enumerate() {
            let pre = layer.forward_rows(g, p, a)?;
            a = g.tanh(pre);
            if let Some(m) = masks {
                a = g.mul(a, m[l])?;
            }
        }
        let m = self.mean.forward_rows(g, p, a)?;
        let lv = self.logvar.forward_rows(g, p, a)?;
        let lv = g.clamp(lv, LOGVAR_MIN, LOGVAR_MAX);
        Ok((column(g, m)?, column(g, lv)?))
    }
}

#[derive(Debug, Clone)]
struct Member {
    net: DenseNet,
    params: ParamSet,
    opt: Adam,
}

impl Member {
    fn new(name: &str, input: usize, widths: &[usize], lr: f64, clip: f64, rng: &mut impl Rng) -> Self {
        let mut params = ParamSet::new();
        let net = DenseNet::new(&mut params, name, input, widths, rng);
        let opt = Adam::new(&params, lr, clip);
        Self { net, params, opt }
    }
}

/// Optimizer settings shared by the static baselines.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StaticOptim {
    pub lr: f64,
    pub clip: f64,
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct McDropout {
    member: Member,
    pub drop: f64,
    pub x_dim: usize,
    pub widths: Vec<usize>,
}

impl McDropout {
    pub fn new(x_dim: usize, widths: Vec<usize>, drop: f64, optim: StaticOptim, seed: u64) -> Self {
        let mut rng = rng_for(seed, &[tag::INIT]);
        Self {
            member: Member::new("net", x_dim, &widths, optim.lr, optim.clip, &mut rng),
            drop,
            x_dim,
            widths,
        }
    }

    pub fn param_count(x_dim: usize, widths: &[usize]) -> ParamCounts {
        ParamCounts::active(DenseNet::param_count(x_dim, widths))
    }

    fn masks(&self, g: &mut Graph, rows: usize, rng: &mut StepRng) -> Result<Vec<Var>> {
        let keep = 1.0 - self.drop;
        self.widths
            .iter()
            .map(|&w| {
                let data = (0..rows * w)
                    .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                Ok(g.constant(&[rows, w], data)?)
            })
            .collect()
    }
}

impl StaticModel for McDropout {
    fn kind(&self) -> ModelKind {
        ModelKind::McDropout
    }

    fn param_counts(&self) -> ParamCounts {
        Self::param_count(self.x_dim, &self.widths)
    }

    fn param_sets(&self) -> Vec<&ParamSet> {
        vec![&self.member.params]
    }

    fn param_sets_mut(&mut self) -> Vec<&mut ParamSet> {
        vec![&mut self.member.params]
    }

    fn fit_window(&mut self, window: &[StreamStep], weights: &[f64], _kl: f64, rng: &mut StepRng) -> Result<FitReport> {
        let mut g = Graph::new();
        let p = g.bind(&self.member.params);
        let (x, y, w, z) = window_inputs(&mut g, window, weights)?;
        let masks = self.masks(&mut g, window.len(), rng)?;
        let (m, lv) = self.member.net.forward_rows(&mut g, &p, x, Some(&masks))?;
        let loss = weighted_nll(&mut g, y, m, lv, w, z)?;
        step_member(&mut self.member, &g, loss)
    }

    fn predict(&self, x: &[f64], k: usize, rng: &mut StepRng) -> Result<Mixture> {
        check_finite(x, "covariates")?;
        let mut g = Graph::new();
        let p = g.bind(&self.member.params);
        let rows: Vec<f64> = (0..k).flat_map(|_| x.iter().copied()).collect();
        let xv = g.constant(&[k, x.len()], rows)?;
        let masks = self.masks(&mut g, k, rng)?;
        let (m, lv) = self.member.net.forward_rows(&mut g, &p, xv, Some(&masks))?;
        Ok(Mixture::new(g.value(m).to_vec(), g.value(lv).to_vec()))
    }
}

fn step_member(member: &mut Member, g: &Graph, loss: Var) -> Result<FitReport> {
    let value = g.scalar(loss);
    member.params.zero_grad();
    if !value.is_finite() {
        return Ok(FitReport {
            loss: value,
            nll: value,
            kl: 0.0,
            grad_norm: f64::NAN,
            applied: false,
        });
    }
    g.backward_into(loss, &mut member.params)?;
    let r = member.opt.step(&mut member.params);
    Ok(FitReport {
        loss: value,
        nll: value,
        kl: 0.0,
        grad_norm: r.grad_norm,
        applied: r.applied,
    })
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Ensemble {
    members: Vec<Member>,
    pub x_dim: usize,
    pub widths: Vec<usize>,
}

impl Ensemble {
    pub fn new(x_dim: usize, widths: Vec<usize>, members: usize, optim: StaticOptim, seed: u64) -> Self {
        let members = (0..members)
            .map(|m| {
                let mut rng = rng_for(seed, &[tag::INIT, m as u64]);
                Member::new(&format!("member{m}"), x_dim, &widths, optim.lr, optim.clip, &mut rng)
            })
            .collect();
        Self {
            members,
            x_dim,
            widths,
        }
    }

    pub fn param_count(x_dim: usize, widths: &[usize], members: usize) -> ParamCounts {
        ParamCounts::active(members * DenseNet::param_count(x_dim, widths))
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

impl StaticModel for Ensemble {
    fn kind(&self) -> ModelKind {
        ModelKind::Ensemble
    }

    fn param_counts(&self) -> ParamCounts {
        Self::param_count(self.x_dim, &self.widths, self.members.len())
    }

    fn param_sets(&self) -> Vec<&ParamSet> {
        self.members.iter().map(|m| &m.params).collect()
    }

    fn param_sets_mut(&mut self) -> Vec<&mut ParamSet> {
        self.members.iter_mut().map(|m| &mut m.params).collect()
    }

    /// Each member takes its own step; the report averages losses and norms.
    fn fit_window(&mut self, window: &[StreamStep], weights: &[f64], _kl: f64, _rng: &mut StepRng) -> Result<FitReport> {
        let mut loss = 0.0;
        let mut norm = 0.0;
        let mut applied = true;
        for member in &mut self.members {
            let mut g = Graph::new();
            let p = g.bind(&member.params);
            let (x, y, w, z) = window_inputs(&mut g, window, weights)?;
            let (m, lv) = member.net.forward_rows(&mut g, &p, x, None)?;
            let l = weighted_nll(&mut g, y, m, lv, w, z)?;
            let r = step_member(member, &g, l)?;
            loss += r.loss;
            norm += r.grad_norm;
            applied &= r.applied;
        }
        let n = self.members.len() as f64;
        Ok(FitReport {
            loss: loss / n,
            nll: loss / n,
            kl: 0.0,
            grad_norm: norm / n,
            applied,
        })
    }

    /// One component per member; `k` is ignored.
    fn predict(&self, x: &[f64], _k: usize, _rng: &mut StepRng) -> Result<Mixture> {
        check_finite(x, "covariates")?;
        let mut means = Vec::with_capacity(self.members.len());
        let mut logvars = Vec::with_capacity(self.members.len());
        for member in &self.members {
            let mut g = Graph::new();
            let p = g.bind(&member.params);
            let xv = g.constant(&[1, x.len()], x.to_vec())?;
            let (m, lv) = member.net.forward_rows(&mut g, &p, xv, None)?;
            means.push(g.value(m)[0]);
            logvars.push(g.value(lv)[0]);
        }
        Ok(Mixture::new(means, logvars))
    }
}

// ---------------------------------------------------------------------------

/// Initial log-variance of every weight in the mean-field posterior.
pub const BBB_INIT_LOGVAR: f64 = -10.0;

/// Linear layer whose weights and biases each carry a Gaussian mean and log-variance.
#[derive(Debug, Clone)]
pub struct BayesLinear {
    pub w_mean: ParamId,
    pub w_logvar: ParamId,
    pub b_mean: ParamId,
    pub b_logvar: ParamId,
    pub input: usize,
    pub output: usize,
}

impl BayesLinear {
    fn new(params: &mut ParamSet, name: &str, input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let lv = |n: usize| Tensor::new(vec![n], vec![BBB_INIT_LOGVAR; n]).expect("shape");
        let w_mean = params.add(format!("{name}.weight.mean"), uniform_weights(rng, output, input));
        let w_logvar = params.add(
            format!("{name}.weight.logvar"),
            Tensor::new(vec![output, input], vec![BBB_INIT_LOGVAR; output * input]).expect("shape"),
        );
        let b_mean = params.add(format!("{name}.bias.mean"), Tensor::zeros(&[output]));
        let b_logvar = params.add(format!("{name}.bias.logvar"), lv(output));
        Self {
            w_mean,
            w_logvar,
            b_mean,
            b_logvar,
            input,
            output,
        }
    }

    fn param_count(input: usize, output: usize) -> usize {
        2 * Linear::param_count(input, output)
    }

    /// Samples `(W, b)` on the tape with the given standard-normal noise.
    fn sample(&self, g: &mut Graph, p: &Bound, eps_w: &[f64], eps_b: &[f64]) -> Result<(Var, Var)> {
        let draw = |g: &mut Graph, mean: Var, logvar: Var, eps: &[f64], shape: &[usize]| -> Result<Var> {
            let lv = g.clamp(logvar, LOGVAR_MIN, LOGVAR_MAX);
            let half = g.scale(lv, 0.5);
            let sd = g.exp(half);
            let e = g.constant(shape, eps.to_vec())?;
            let noise = g.mul(sd, e)?;
            Ok(g.add(mean, noise)?)
        };
        let w = draw(g, p[self.w_mean], p[self.w_logvar], eps_w, &[self.output, self.input])?;
        let b = draw(g, p[self.b_mean], p[self.b_logvar], eps_b, &[self.output])?;
        Ok((w, b))
    }

    fn kl(&self, g: &mut Graph, p: &Bound) -> Result<Var> {
        let mut total = None;
        for (m, lv) in [(self.w_mean, self.w_logvar), (self.b_mean, self.b_logvar)] {
            let lvc = g.clamp(p[lv], LOGVAR_MIN, LOGVAR_MAX);
            let zero = g.constant_scalar(0.0);
            let k = gaussian_kl(g, p[m], lvc, zero, zero)?;
            total = Some(match total {
                None => k,
                Some(t) => g.add(t, k)?,
            });
        }
        Ok(total.expect("two terms"))
    }

    fn values(&self, params: &ParamSet) -> [Vec<f64>; 4] {
        [self.w_mean, self.w_logvar, self.b_mean, self.b_logvar]
            .map(|id| params.get(id).data().to_vec())
    }
}

/// Mean-field Gaussian-weight MLP with one tanh hidden layer and a
/// standard-normal weight prior.
#[derive(Debug, Clone)]
pub struct Bbb {
    pub params: ParamSet,
    pub hidden: BayesLinear,
    pub mean: BayesLinear,
    pub logvar: BayesLinear,
    opt: Adam,
    pub x_dim: usize,
    pub width: usize,
}

/// Noise for one draw of every weight in a [`Bbb`] network.
#[derive(Debug, Clone)]
pub struct BbbNoise(pub [Vec<f64>; 6]);

impl Bbb {
    pub fn new(x_dim: usize, width: usize, optim: StaticOptim, seed: u64) -> Self {
        let mut rng = rng_for(seed, &[tag::INIT]);
        let mut params = ParamSet::new();
        let hidden = BayesLinear::new(&mut params, "hidden", x_dim, width, &mut rng);
        let mean = BayesLinear::new(&mut params, "mean", width, 1, &mut rng);
        let logvar = BayesLinear::new(&mut params, "logvar", width, 1, &mut rng);
        let opt = Adam::new(&params, optim.lr, optim.clip);
        Self {
            params,
            hidden,
            mean,
            logvar,
            opt,
            x_dim,
            width,
        }
    }

    pub fn param_count(x_dim: usize, width: usize) -> ParamCounts {
        ParamCounts::active(
            BayesLinear::param_count(x_dim, width) + 2 * BayesLinear::param_count(width, 1),
        )
    }

    /// `KL(q(w) ‖ N(0, I))` summed over all weights and biases.
    pub fn kl_value(&self) -> f64 {
        [&self.hidden, &self.mean, &self.logvar]
            .iter()
            .flat_map(|l| {
                let [wm, wlv, bm, blv] = l.values(&self.params);
                wm.into_iter()
                    .zip(wlv)
                    .chain(bm.into_iter().zip(blv))
                    .collect::<Vec<_>>()
            })
            .map(|(m, lv)| gaussian_kl_value(m, lv.clamp(LOGVAR_MIN, LOGVAR_MAX), 0.0, 0.0))
            .sum()
    }

    pub fn draw_noise(&self, rng: &mut StepRng) -> BbbNoise {
        let (d, w) = (self.x_dim, self.width);
        BbbNoise([
            normals(rng, w * d),
            normals(rng, w),
            normals(rng, w),
            normals(rng, 1),
            normals(rng, w),
            normals(rng, 1),
        ])
    }

    /// `weighted NLL + kl_weight · KL(q(w) ‖ N(0, I))` under one weight draw.
    pub fn objective(
        &self,
        g: &mut Graph,
        p: &Bound,
        window: &[StreamStep],
        weights: &[f64],
        kl_weight: f64,
        noise: &BbbNoise,
    ) -> Result<Var> {
        let (x, y, w, z) = window_inputs(g, window, weights)?;
        let n = noise;
        let (w1, b1) = self.hidden.sample(g, p, &n.0[0], &n.0[1])?;
        let (wm, bm) = self.mean.sample(g, p, &n.0[2], &n.0[3])?;
        let (wl, bl) = self.logvar.sample(g, p, &n.0[4], &n.0[5])?;
        let rows = |g: &mut Graph, a: Var, w: Var, b: Var| -> Result<Var> {
            let wt = g.transpose(w)?;
            let xw = g.matmul(a, wt)?;
            Ok(g.add(xw, b)?)
        };
        let pre = rows(g, x, w1, b1)?;
        let h = g.tanh(pre);
        let m = rows(g, h, wm, bm)?;
        let m = column(g, m)?;
        let lv = rows(g, h, wl, bl)?;
        let lv = g.clamp(lv, LOGVAR_MIN, LOGVAR_MAX);
        let lv = column(g, lv)?;
        let nll = weighted_nll(g, y, m, lv, w, z)?;
        if kl_weight == 0.0 {
            return Ok(nll);
        }
        let mut kl = self.hidden.kl(g, p)?;
        for layer in [&self.mean, &self.logvar] {
            let k = layer.kl(g, p)?;
            kl = g.add(kl, k)?;
        }
        let kl = g.scale(kl, kl_weight);
        Ok(g.add(nll, kl)?)
    }
}

/// Pre-activation mean and variance of `W x + b` for Gaussian weights.
fn local_moments(layer: &[Vec<f64>; 4], input: &[f64], output: usize) -> (Vec<f64>, Vec<f64>) {
    let [wm, wlv, bm, blv] = layer;
    let d = input.len();
    (0..output)
        .map(|o| {
            let mut mean = bm[o];
            let mut var = blv[o].clamp(LOGVAR_MIN, LOGVAR_MAX).exp();
            for i in 0..d {
                mean += wm[o * d + i] * input[i];
                var += wlv[o * d + i].clamp(LOGVAR_MIN, LOGVAR_MAX).exp() * input[i] * input[i];
            }
            (mean, var)
        })
        .unzip()
}

impl StaticModel for Bbb {
    fn kind(&self) -> ModelKind {
        ModelKind::Bbb
    }

    fn param_counts(&self) -> ParamCounts {
        Self::param_count(self.x_dim, self.width)
    }

    fn param_sets(&self) -> Vec<&ParamSet> {
        vec![&self.params]
    }

    fn param_sets_mut(&mut self) -> Vec<&mut ParamSet> {
        vec![&mut self.params]
    }

    fn fit_window(&mut self, window: &[StreamStep], weights: &[f64], kl_weight: f64, rng: &mut StepRng) -> Result<FitReport> {
        let noise = self.draw_noise(rng);
        let mut g = Graph::new();
        let p = g.bind(&self.params);
        let loss = self.objective(&mut g, &p, window, weights, kl_weight, &noise)?;
        let value = g.scalar(loss);
        let kl = self.kl_value();
        let mut report = FitReport {
            loss: value,
            nll: value - kl_weight * kl,
            kl,
            grad_norm: f64::NAN,
            applied: false,
        };
        self.params.zero_grad();
        if value.is_finite() {
            g.backward_into(loss, &mut self.params)?;
            let r = self.opt.step(&mut self.params);
            report.grad_norm = r.grad_norm;
            report.applied = r.applied;
        }
        Ok(report)
    }

    /// Each component is one weight draw. For a single input the
    /// pre-activations of each layer are Gaussian given the layer input, so
    /// they are sampled directly from their moments.
    fn predict(&self, x: &[f64], k: usize, rng: &mut StepRng) -> Result<Mixture> {
        check_finite(x, "covariates")?;
        let hidden = self.hidden.values(&self.params);
        let mean_l = self.mean.values(&self.params);
        let logvar_l = self.logvar.values(&self.params);
        let (hm, hv) = local_moments(&hidden, x, self.width);
        let mut means = Vec::with_capacity(k);
        let mut logvars = Vec::with_capacity(k);
        for _ in 0..k {
            let eps = normals(rng, self.width + 2);
            let h: Vec<f64> = (0..self.width)
                .map(|j| (hm[j] + hv[j].sqrt() * eps[j]).tanh())
                .collect();
            let (mm, mv) = local_moments(&mean_l, &h, 1);
            let (lm, lvv) = local_moments(&logvar_l, &h, 1);
            means.push(mm[0] + mv[0].sqrt() * eps[self.width]);
            logvars.push((lm[0] + lvv[0].sqrt() * eps[self.width + 1]).clamp(LOGVAR_MIN, LOGVAR_MAX));
        }
        Ok(Mixture::new(means, logvars))
    }
}
