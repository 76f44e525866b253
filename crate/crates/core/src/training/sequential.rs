//! Truncated-backpropagation schedules for recurrent models. Every pass over
//! step `t` of epoch `e` draws its noise from the stream `(seed, TRAIN, e, t)`,
//! so recomputations reproduce the original samples exactly.

use std::collections::{HashMap, VecDeque};
use std::time::Instant;

use lt_autodiff::{Graph, Var};

use super::log::{LogRecord, TrainReport};
use super::weights::{beta_schedule, Surprise};
use super::{Algorithm, TrainConfig};
use crate::data::StreamStep;
use crate::error::{invalid, Result};
use crate::model::{FilterState, GraphState, SequentialModel};
use crate::nn::WEIGHT_EPS;
use crate::optim::Adam;
use crate::rng::{rng_for, tag, StepRng};

/// Dispatches on `cfg.algorithm`.
pub fn train_sequential(
    model: &mut dyn SequentialModel,
    stream: &[StreamStep],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    match cfg.algorithm {
        Algorithm::ExactRolling => train_exact_rolling(model, stream, cfg),
        Algorithm::ChunkStride => train_chunk_stride(model, stream, cfg),
        Algorithm::ApproxStride => train_approx_stride(model, stream, cfg),
    }
}

struct Run<'a> {
    cfg: &'a TrainConfig,
    opt: Adam,
    surprise: Surprise,
    /// Surprise factor fixed at the first visit of each step in the current epoch.
    factors: HashMap<usize, f64>,
    report: TrainReport,
    start: Instant,
    epoch: usize,
}

/// A per-step objective on the current tape.
struct Term {
    t: usize,
    elbo: Var,
}

impl<'a> Run<'a> {
    fn new(model: &dyn SequentialModel, stream: &[StreamStep], cfg: &'a TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if stream.is_empty() {
            return Err(invalid("training stream is empty"));
        }
        Ok(Self {
            cfg,
            opt: Adam::new(model.params(), cfg.lr, cfg.grad_clip),
            surprise: Surprise::new(cfg.surprise_alpha, cfg.surprise_decay),
            factors: HashMap::new(),
            report: TrainReport::default(),
            start: Instant::now(),
            epoch: 0,
        })
    }

    fn begin_epoch(&mut self, epoch: usize) {
        self.epoch = epoch;
        self.factors.clear();
    }

    fn beta(&self) -> f64 {
        beta_schedule(self.report.updates, self.cfg.beta_warmup, self.cfg.beta_max)
    }

    fn rng(&self, t: usize) -> StepRng {
        rng_for(self.cfg.seed, &[tag::TRAIN, self.epoch as u64, t as u64])
    }

    fn note_nll(&mut self, t: usize, nll: f64) {
        if !self.factors.contains_key(&t) {
            let f = self.surprise.observe(nll);
            self.factors.insert(t, f);
        }
    }

    fn record(&mut self, t: usize, elbo: f64, nll: f64, kl: f64, beta: f64) {
        self.report.log.push(LogRecord {
            step: t,
            epoch: self.epoch,
            elbo,
            nll,
            kl,
            beta,
            grad_norm: None,
            wall_ms: self.start.elapsed().as_secs_f64() * 1e3,
        });
    }

    /// Runs `model` over `steps[from..=to]` from `state` on `g`, returning the
    /// per-step terms and the end state.
    fn unroll(
        &mut self,
        model: &dyn SequentialModel,
        g: &mut Graph,
        state: &FilterState,
        stream: &[StreamStep],
        from: usize,
        to: usize,
        log: bool,
    ) -> Result<(Vec<Term>, GraphState)> {
        let p = g.bind(model.params());
        let mut gs = state.to_graph(g);
        let beta = self.beta();
        let mut terms = Vec::with_capacity(to + 1 - from);
        for (t, step) in stream.iter().enumerate().take(to + 1).skip(from) {
            let mut rng = self.rng(t);
            let out = model.step_elbo(g, &p, &gs, step, self.cfg.k_train, beta, &mut rng)?;
            self.note_nll(t, out.nll);
            if log {
                let elbo = g.scalar(out.elbo);
                self.record(t, elbo, out.nll, out.kl, beta);
            }
            terms.push(Term { t, elbo: out.elbo });
            gs = out.state;
        }
        Ok((terms, gs))
    }

    /// `−Σ w_τ L_τ / max(Σ w_τ, ε)` with `w_τ = λ^{t−τ}·surprise_τ`, `t` the last step.
    fn window_loss(&self, g: &mut Graph, terms: &[Term]) -> Result<Var> {
        let t = terms.last().expect("nonempty window").t;
        let mut acc: Option<Var> = None;
        let mut z = 0.0;
        for term in terms {
            let w = self.cfg.lambda.powi((t - term.t) as i32) * self.factors.get(&term.t).copied().unwrap_or(1.0);
            z += w;
            let wl = g.scale(term.elbo, w);
            acc = Some(match acc {
                None => wl,
                Some(a) => g.add(a, wl)?,
            });
        }
        Ok(g.scale(acc.expect("nonempty window"), -1.0 / z.max(WEIGHT_EPS)))
    }

    /// Backpropagates `loss` and steps the optimizer unless anything is non-finite.
    fn update(&mut self, model: &mut dyn SequentialModel, g: &Graph, loss: Var) -> Result<()> {
        let value = g.scalar(loss);
        self.report.step_losses.push(value);
        let params = model.params_mut();
        params.zero_grad();
        let mut norm = f64::NAN;
        if value.is_finite() {
            g.backward_into(loss, params)?;
            let r = self.opt.step(params);
            norm = r.grad_norm;
            if r.applied {
                self.report.updates += 1;
            } else {
                self.report.skipped += 1;
            }
        } else {
            self.report.skipped += 1;
        }
        if let Some(last) = self.report.log.last_mut() {
            last.grad_norm = Some(norm);
        }
        Ok(())
    }
}

/// Accumulates weighted step objectives over consecutive `W`-step chunks and
/// updates once per chunk, detaching the state at each boundary. A trailing
/// partial chunk is flushed at the end of the stream.
pub fn train_chunk_stride(
    model: &mut dyn SequentialModel,
    stream: &[StreamStep],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    let mut run = Run::new(model, stream, cfg)?;
    for epoch in 0..cfg.epochs {
        run.begin_epoch(epoch);
        let mut state = model.initial_state();
        let mut t0 = 0;
        while t0 < stream.len() {
            let t1 = (t0 + cfg.window).min(stream.len()) - 1;
            let mut g = Graph::new();
            let (terms, end) = run.unroll(model, &mut g, &state, stream, t0, t1, true)?;
            let loss = run.window_loss(&mut g, &terms)?;
            state = end.detach(&g, t1 + 1);
            run.update(model, &g, loss)?;
            t0 = t1 + 1;
        }
    }
    Ok(run.report)
}

/// Detached states of the last `cap` steps, keyed by the number of steps absorbed.
struct Ring {
    cap: usize,
    states: VecDeque<FilterState>,
}

impl Ring {
    fn new(cap: usize, first: FilterState) -> Self {
        let mut states = VecDeque::with_capacity(cap);
        states.push_back(first);
        Self { cap, states }
    }

    fn push(&mut self, s: FilterState) {
        if self.states.len() == self.cap {
            self.states.pop_front();
        }
        self.states.push_back(s);
    }

    fn at(&self, t: usize) -> &FilterState {
        self.states
            .iter()
            .find(|s| s.t == t)
            .expect("ring holds every state inside the window")
    }

    fn replace(&mut self, s: FilterState) {
        if let Some(slot) = self.states.iter_mut().find(|x| x.t == s.t) {
            *slot = s;
        }
    }
}

/// Advances one step on a throwaway tape and returns the detached state.
fn advance(run: &mut Run, model: &dyn SequentialModel, state: &FilterState, stream: &[StreamStep], t: usize) -> Result<(FilterState, Graph, Var)> {
    let mut g = Graph::new();
    let (terms, end) = run.unroll(model, &mut g, state, stream, t, t, true)?;
    let next = end.detach(&g, t + 1);
    Ok((next, g, terms[0].elbo))
}

/// Advances the stream step by step without keeping a graph; every `S`
/// steps (and at the end) recomputes the last `W` steps from the stored
/// detached state on a fresh tape and updates once.
pub fn train_exact_rolling(
    model: &mut dyn SequentialModel,
    stream: &[StreamStep],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    let mut run = Run::new(model, stream, cfg)?;
    let last = stream.len() - 1;
    for epoch in 0..cfg.epochs {
        run.begin_epoch(epoch);
        let mut cur = model.initial_state();
        let mut ring = Ring::new(cfg.window + 1, cur.clone());
        for t in 0..stream.len() {
            cur = advance(&mut run, model, &cur, stream, t)?.0;
            ring.push(cur.clone());
            if (t + 1) % cfg.stride == 0 || t == last {
                let t_min = (t + 1).saturating_sub(cfg.window);
                let mut g = Graph::new();
                let from = ring.at(t_min).clone();
                let (terms, end) = run.unroll(model, &mut g, &from, stream, t_min, t, false)?;
                let loss = run.window_loss(&mut g, &terms)?;
                if cfg.detach_checkpoint {
                    cur = end.detach(&g, t + 1);
                    ring.replace(cur.clone());
                }
                run.update(model, &g, loss)?;
            }
        }
    }
    Ok(run.report)
}

/// Single-step micro-updates every `S` steps within a window (the incoming
/// state treated as a constant), plus a full recompute-and-update over the
/// last `W` steps at each window end.
pub fn train_approx_stride(
    model: &mut dyn SequentialModel,
    stream: &[StreamStep],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    let mut run = Run::new(model, stream, cfg)?;
    let last = stream.len() - 1;
    for epoch in 0..cfg.epochs {
        run.begin_epoch(epoch);
        let mut cur = model.initial_state();
        let mut ring = Ring::new(cfg.window + 1, cur.clone());
        let mut t0 = 0;
        for t in 0..stream.len() {
            let (next, g, elbo) = advance(&mut run, model, &cur, stream, t)?;
            let n = t - t0 + 1;
            if n % cfg.stride == 0 && n < cfg.window {
                let mut g = g;
                let loss = g.neg(elbo);
                run.update(model, &g, loss)?;
            }
            cur = next;
            ring.push(cur.clone());
            if n == cfg.window || t == last {
                let t_min = (t + 1).saturating_sub(cfg.window);
                let mut g = Graph::new();
                let from = ring.at(t_min).clone();
                let (terms, end) = run.unroll(model, &mut g, &from, stream, t_min, t, false)?;
                let loss = run.window_loss(&mut g, &terms)?;
                cur = end.detach(&g, t + 1);
                ring.replace(cur.clone());
                run.update(model, &g, loss)?;
                t0 = t + 1;
            }
        }
    }
    Ok(run.report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::{DssmDims, DssmModel};
    use crate::data::{synth_stream, SynthKind, SynthOptions};
    use crate::latent::{LtDims, LtModel, LtVariant};

    fn lt(variant: LtVariant, seed: u64) -> LtModel {
        LtModel::new(
            variant,
            LtDims {
                x_dim: 2,
                embed: 4,
                hidden: 5,
                latent: 2,
                predictor_hidden: 3,
            },
            seed,
        )
    }

    fn stream(n: usize) -> Vec<StreamStep> {
        synth_stream(&SynthOptions::new(SynthKind::RegimeSwitch, n, 3)).unwrap().steps
    }

    fn cfg(window: usize, stride: usize, algorithm: Algorithm) -> TrainConfig {
        TrainConfig {
            window,
            stride,
            algorithm,
            epochs: 1,
            lr: 1e-2,
            beta_warmup: 4,
            seed: 11,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn stream_of_one_window_takes_one_step() {
        let mut m = lt(LtVariant::Unstructured, 1);
        let r = train_chunk_stride(&mut m, &stream(16), &cfg(16, 4, Algorithm::ChunkStride)).unwrap();
        assert_eq!(r.updates, 1);
        assert_eq!(r.log.len(), 16);
        assert_eq!(r.log.iter().filter(|l| l.grad_norm.is_some()).count(), 1);
        assert!(r.log[15].grad_norm.is_some());
    }

    #[test]
    fn unit_window_updates_every_step() {
        let mut m = lt(LtVariant::Structured, 2);
        let s = stream(9);
        let r = train_chunk_stride(&mut m, &s, &cfg(1, 1, Algorithm::ChunkStride)).unwrap();
        assert_eq!(r.updates, 9);
        // With Z = 1 the loss is the negated step ELBO under the pre-update parameters.
        for (rec, loss) in r.log.iter().zip(&r.step_losses) {
            assert_eq!(*loss, -rec.elbo);
        }
    }

    #[test]
    fn exact_rolling_with_stride_equal_window_matches_chunks() {
        for variant in [LtVariant::Unstructured, LtVariant::Structured] {
            let s = stream(24);
            let mut a = lt(variant, 3);
            let mut b = lt(variant, 3);
            let ra = train_chunk_stride(&mut a, &s, &cfg(8, 8, Algorithm::ChunkStride)).unwrap();
            let rb = train_exact_rolling(&mut b, &s, &cfg(8, 8, Algorithm::ExactRolling)).unwrap();
            assert_eq!(ra.step_losses.len(), 3);
            assert_eq!(ra.step_losses, rb.step_losses);
            assert_eq!(a.params.flat_values(), b.params.flat_values());
        }
    }

    #[test]
    fn window_longer_than_stream_updates_once_at_end() {
        let mut m = lt(LtVariant::Unstructured, 4);
        let r = train_exact_rolling(&mut m, &stream(10), &cfg(32, 64, Algorithm::ExactRolling)).unwrap();
        assert_eq!(r.updates, 1);
        assert!(r.log[9].grad_norm.is_some());
    }

    #[test]
    fn approx_stride_without_micro_steps_matches_chunks() {
        let s = stream(20);
        let mut a = lt(LtVariant::Unstructured, 5);
        let mut b = lt(LtVariant::Unstructured, 5);
        let ra = train_chunk_stride(&mut a, &s, &cfg(10, 3, Algorithm::ChunkStride)).unwrap();
        let rb = train_approx_stride(&mut b, &s, &cfg(10, 11, Algorithm::ApproxStride)).unwrap();
        assert_eq!(ra.step_losses, rb.step_losses);
    }

    #[test]
    fn approx_stride_counts_micro_steps() {
        let mut m = lt(LtVariant::Unstructured, 6);
        // Window 8, stride 3: micro-steps at offsets 3 and 6 plus one window update.
        let r = train_approx_stride(&mut m, &stream(16), &cfg(8, 3, Algorithm::ApproxStride)).unwrap();
        assert_eq!(r.updates, 6);
    }

    #[test]
    fn micro_step_gradient_ignores_earlier_steps() {
        // A step objective built on a detached incoming state has the same
        // gradient whatever graph produced that state.
        let m = lt(LtVariant::Unstructured, 7);
        let s = stream(3);
        let beta = 0.5;
        let grads = |history: bool| {
            let mut g = Graph::new();
            let p = g.bind(&m.params);
            let mut gs = m.initial_state().to_graph(&mut g);
            if history {
                for t in 0..2 {
                    let out = m.step_elbo(&mut g, &p, &gs, &s[t], 1, beta, &mut rng_for(0, &[t as u64])).unwrap();
                    gs = out.state;
                }
                gs.h = g.detach(gs.h);
            } else {
                let mut side = Graph::new();
                let q = side.bind(&m.params);
                let mut sg = m.initial_state().to_graph(&mut side);
                for t in 0..2 {
                    sg = m.step_elbo(&mut side, &q, &sg, &s[t], 1, beta, &mut rng_for(0, &[t as u64])).unwrap().state;
                }
                gs = sg.detach(&side, 2).to_graph(&mut g);
            }
            let out = m.step_elbo(&mut g, &p, &gs, &s[2], 1, beta, &mut rng_for(0, &[2])).unwrap();
            let mut ps = m.params.clone();
            ps.zero_grad();
            g.backward_into(out.elbo, &mut ps).unwrap();
            ps.flat_grads()
        };
        assert_eq!(grads(true), grads(false));
    }

    #[test]
    fn chunk_boundary_blocks_recurrent_gradient() {
        // Gradient of the second chunk's loss with respect to the first
        // chunk's inputs vanishes once the state is detached.
        let m = lt(LtVariant::Unstructured, 8);
        let s = stream(4);
        let mut g = Graph::new();
        let p = g.bind(&m.params);
        let h0 = g.constant_vec(&vec![0.0; 5]);
        let x0 = g.leaf(&lt_autodiff::Tensor::vector(s[0].x.clone()).with_grad());
        let y0 = g.constant_vec(&[s[0].y]);
        let e = m.encode_step(&mut g, &p, x0, y0).unwrap();
        let h1 = m.gru.step(&mut g, &p, h0, e).unwrap();
        let run = |g: &mut Graph, h: lt_autodiff::Var| {
            let gs = GraphState { h, z: Vec::new() };
            m.step_elbo(g, &p, &gs, &s[1], 1, 1.0, &mut rng_for(1, &[])).unwrap().elbo
        };
        let through = run(&mut g, h1);
        let grads = g.backward(through).unwrap();
        assert!(grads.get(x0).unwrap().iter().any(|v| *v != 0.0));
        let cut = g.detach(h1);
        let detached = run(&mut g, cut);
        let grads = g.backward(detached).unwrap();
        assert!(grads.get(x0).is_none_or(|d| d.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn runs_are_deterministic() {
        for alg in Algorithm::ALL {
            let s = stream(30);
            let c = cfg(8, 3, alg);
            let mut a = DssmModel::new(DssmDims { x_dim: 2, embed: 3, hidden: 4, latent: 2, net: 3 }, 9);
            let mut b = a.clone();
            let ra = train_sequential(&mut a, &s, &c).unwrap();
            let rb = train_sequential(&mut b, &s, &c).unwrap();
            assert_eq!(ra.step_losses, rb.step_losses, "{alg}");
            assert_eq!(a.params.flat_values(), b.params.flat_values());
        }
    }

    #[test]
    fn loss_is_invariant_to_weight_scale() {
        // Surprise factors multiply every weight; a uniform factor cancels in Z.
        let s = stream(12);
        let m = lt(LtVariant::Unstructured, 10);
        let c = cfg(12, 12, Algorithm::ChunkStride);
        let loss_with = |factor: f64| {
            let mut run = Run::new(&m, &s, &c).unwrap();
            let mut g = Graph::new();
            let (terms, _) = run.unroll(&m, &mut g, &m.initial_state(), &s, 0, 11, false).unwrap();
            for f in run.factors.values_mut() {
                *f = factor;
            }
            let l = run.window_loss(&mut g, &terms).unwrap();
            g.scalar(l)
        };
        let a = loss_with(1.0);
        let b = loss_with(7.5);
        assert!((a - b).abs() <= 1e-12 * a.abs());
    }

    #[test]
    fn empty_stream_rejected() {
        let mut m = lt(LtVariant::Unstructured, 0);
        assert!(train_chunk_stride(&mut m, &[], &cfg(4, 2, Algorithm::ChunkStride)).is_err());
    }

    #[test]
    fn stationary_stream_elbo_improves() {
        let mut opts = SynthOptions::new(SynthKind::RegimeSwitch, 1200, 4);
        opts.switches = 0;
        let s = synth_stream(&opts).unwrap().steps;
        let mut m = lt(LtVariant::Unstructured, 12);
        let mut c = cfg(32, 32, Algorithm::ChunkStride);
        c.lr = 3e-3;
        let r = train_chunk_stride(&mut m, &s, &c).unwrap();
        let avg = |recs: &[LogRecord]| recs.iter().map(|r| r.elbo).sum::<f64>() / recs.len() as f64;
        assert!(avg(&r.log[1100..]) > avg(&r.log[..100]));
    }
}
