//! Finite-difference checks of every trainable objective: a short unrolled
//! ELBO for each sequential model and the weight-sampled objective of BBB.

use lt_autodiff::gradcheck::{numeric_gradient, relative_error, FD_STEP};
use lt_autodiff::{Graph, ParamSet, Var};

use crate::baselines::{Bbb, DssmDims, DssmModel, StaticOptim, VrnnDims, VrnnModel};
use crate::data::StreamStep;
use crate::error::Result;
use crate::latent::{LtDims, LtModel, LtVariant};
use crate::model::{FilterState, SequentialModel};
use crate::rng::{normals, rng_for};

/// Largest relative error the suite accepts.
pub const GRADCHECK_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckResult {
    pub name: &'static str,
    pub draw: u64,
    pub params: usize,
    pub rel_error: f64,
}

impl GradcheckResult {
    pub fn passed(&self) -> bool {
        self.rel_error < GRADCHECK_TOLERANCE
    }
}

const X_DIM: usize = 3;
const UNROLL: usize = 3;

fn random_steps(draw: u64) -> Vec<StreamStep> {
    let mut rng = rng_for(draw, &[0xfd]);
    (0..UNROLL)
        .map(|t| StreamStep {
            t,
            x: normals(&mut rng, X_DIM),
            y: normals(&mut rng, 1)[0],
        })
        .collect()
}

fn random_state(model: &dyn SequentialModel, draw: u64) -> FilterState {
    let mut rng = rng_for(draw, &[0xfe]);
    let mut s = model.initial_state();
    s.h = normals(&mut rng, s.h.len()).iter().map(|v| 0.5 * v.tanh()).collect();
    for z in &mut s.z {
        *z = normals(&mut rng, z.len());
    }
    s
}

fn compare(params: &ParamSet, objective: impl Fn(&ParamSet, &mut Graph) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::new();
    let loss = objective(params, &mut g)?;
    let mut ps = params.clone();
    ps.zero_grad();
    g.backward_into(loss, &mut ps)?;
    let analytic = ps.flat_grads();
    let mut base = params.clone();
    let mut failure = None;
    let numeric = numeric_gradient(&mut base, FD_STEP, |ps| {
        let mut g = Graph::new();
        match objective(ps, &mut g) {
            Ok(l) => g.scalar(l),
            Err(e) => {
                failure.get_or_insert(e);
                f64::NAN
            }
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(relative_error(&analytic, &numeric))
}

/// Gradient of a `UNROLL`-step ELBO through the recurrence, with fixed noise.
pub fn check_sequential(model: &dyn SequentialModel, draw: u64) -> Result<f64> {
    let steps = random_steps(draw);
    let start = random_state(model, draw);
    compare(model.params(), |ps, g| {
        let p = g.bind(ps);
        let mut state = start.to_graph(g);
        let mut total: Option<Var> = None;
        for step in &steps {
            let mut rng = rng_for(draw, &[0xff, step.t as u64]);
            let out = model.step_elbo(g, &p, &state, step, 2, 0.7, &mut rng)?;
            total = Some(match total {
                None => out.elbo,
                Some(t) => g.add(t, out.elbo)?,
            });
            state = out.state;
        }
        Ok(total.expect("unroll is nonempty"))
    })
}

pub fn check_bbb(model: &Bbb, draw: u64) -> Result<f64> {
    let steps = random_steps(draw);
    let weights: Vec<f64> = (0..steps.len()).map(|i| 0.9f64.powi((steps.len() - 1 - i) as i32)).collect();
    let noise = model.draw_noise(&mut rng_for(draw, &[0xfc]));
    compare(&model.params, |ps, g| {
        let p = g.bind(ps);
        model.objective(g, &p, &steps, &weights, 0.05, &noise)
    })
}

/// Perturbs every parameter away from its initialization so checks do not
/// sit on special values such as zero biases.
fn jitter(params: &mut ParamSet, draw: u64, scale: f64) {
    let noise = normals(&mut rng_for(draw, &[0xfb]), params.numel());
    let v: Vec<f64> = params.flat_values().iter().zip(noise).map(|(a, n)| a + scale * n).collect();
    params.set_flat_values(&v).expect("same length");
}

/// Runs `draws` random draws of every check.
pub fn gradcheck_suite(draws: u64) -> Result<Vec<GradcheckResult>> {
    let mut out = Vec::new();
    for draw in 0..draws {
        let lt_dims = LtDims {
            x_dim: X_DIM,
            embed: 4,
            hidden: 5,
            latent: 2,
            predictor_hidden: 3,
        };
        let lt = |v| LtModel::new(v, lt_dims, draw);
        let mut models: Vec<(&'static str, Box<dyn SequentialModel>)> = vec![
            ("lt_structured", Box::new(lt(LtVariant::Structured))),
            ("lt_unstructured", Box::new(lt(LtVariant::Unstructured))),
            (
                "vrnn",
                Box::new(VrnnModel::new(
                    VrnnDims {
                        x_dim: X_DIM,
                        feature: 4,
                        hidden: 5,
                        latent: 2,
                        net: 4,
                    },
                    draw,
                )),
            ),
            (
                "dssm",
                Box::new(DssmModel::new(
                    DssmDims {
                        x_dim: X_DIM,
                        embed: 4,
                        hidden: 5,
                        latent: 2,
                        net: 4,
                    },
                    draw,
                )),
            ),
        ];
        for (name, m) in &mut models {
            jitter(m.params_mut(), draw, 0.05);
            out.push(GradcheckResult {
                name,
                draw,
                params: m.params().numel(),
                rel_error: check_sequential(m.as_ref(), draw)?,
            });
        }
        let mut bbb = Bbb::new(X_DIM, 4, StaticOptim { lr: 1e-3, clip: 1.0 }, draw);
        let logvars: Vec<f64> = normals(&mut rng_for(draw, &[0xfa]), bbb.params.numel());
        let v: Vec<f64> = bbb
            .params
            .iter()
            .flat_map(|(_, name, t)| {
                let is_logvar = name.ends_with("logvar");
                t.data().to_vec().into_iter().map(move |v| (v, is_logvar))
            })
            .zip(logvars)
            .map(|((v, is_logvar), n)| if is_logvar { -2.0 + 0.5 * n.tanh() } else { v + 0.1 * n })
            .collect();
        bbb.params.set_flat_values(&v)?;
        out.push(GradcheckResult {
            name: "bbb",
            draw,
            params: bbb.params.numel(),
            rel_error: check_bbb(&bbb, draw)?,
        });
    }
    Ok(out)
}
