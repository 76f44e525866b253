//! Architecture specs for every model kind and the width search that matches
//! them to parameter budgets.

use std::fmt;

use crate::baselines::{Bbb, DssmDims, DssmModel, Ensemble, McDropout, StaticModel, StaticOptim, VrnnDims, VrnnModel};
use crate::error::{invalid, Result};
use crate::latent::{LtDims, LtModel, LtVariant};
use crate::model::{ModelKind, SequentialModel};
use crate::nn::ParamCounts;

/// Shared sizes that the solver does not vary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedDims {
    pub x_dim: usize,
    pub hidden: usize,
    pub latent: usize,
    pub members: usize,
    pub dropout: f64,
}

/// A fully sized architecture.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ModelSpec {
    Lt(LtVariant, LtDims),
    Vrnn(VrnnDims),
    Dssm(DssmDims),
    McDropout { x_dim: usize, width: usize, drop: f64 },
    Bbb { x_dim: usize, width: usize },
    Ensemble { x_dim: usize, width: usize, members: usize },
}

/// A built model of either family.
pub enum AnyModel {
    Sequential(Box<dyn SequentialModel>),
    Static(Box<dyn StaticModel>),
}

impl AnyModel {
    pub fn param_counts(&self) -> ParamCounts {
        match self {
            Self::Sequential(m) => m.param_counts(),
            Self::Static(m) => m.param_counts(),
        }
    }

    pub fn param_sets(&self) -> Vec<&lt_autodiff::ParamSet> {
        match self {
            Self::Sequential(m) => vec![m.params()],
            Self::Static(m) => m.param_sets(),
        }
    }

    pub fn param_sets_mut(&mut self) -> Vec<&mut lt_autodiff::ParamSet> {
        match self {
            Self::Sequential(m) => vec![m.params_mut()],
            Self::Static(m) => m.param_sets_mut(),
        }
    }
}

impl ModelSpec {
    pub fn kind(&self) -> ModelKind {
        match self {
            Self::Lt(LtVariant::Structured, _) => ModelKind::LtStructured,
            Self::Lt(LtVariant::Unstructured, _) => ModelKind::LtUnstructured,
            Self::Vrnn(_) => ModelKind::Vrnn,
            Self::Dssm(_) => ModelKind::Dssm,
            Self::McDropout { .. } => ModelKind::McDropout,
            Self::Bbb { .. } => ModelKind::Bbb,
            Self::Ensemble { .. } => ModelKind::Ensemble,
        }
    }

    pub fn counts(&self) -> ParamCounts {
        match *self {
            Self::Lt(v, d) => d.param_counts(v),
            Self::Vrnn(d) => d.param_counts(),
            Self::Dssm(d) => d.param_counts(),
            Self::McDropout { x_dim, width, .. } => McDropout::param_count(x_dim, &[width, width]),
            Self::Bbb { x_dim, width } => Bbb::param_count(x_dim, width),
            Self::Ensemble { x_dim, width, members } => Ensemble::param_count(x_dim, &[width], members),
        }
    }

    /// Free widths as `name:value` pairs.
    pub fn widths(&self) -> Vec<(&'static str, usize)> {
        match *self {
            Self::Lt(_, d) => vec![("embed", d.embed), ("predictor_hidden", d.predictor_hidden)],
            Self::Vrnn(d) => vec![("feature", d.feature), ("net", d.net)],
            Self::Dssm(d) => vec![("embed", d.embed), ("net", d.net)],
            Self::McDropout { width, .. } | Self::Bbb { width, .. } | Self::Ensemble { width, .. } => {
                vec![("width", width)]
            }
        }
    }

    /// Builds with parameters initialized from `seed`.
    pub fn build(&self, seed: u64, optim: StaticOptim) -> AnyModel {
        match *self {
            Self::Lt(v, d) => AnyModel::Sequential(Box::new(LtModel::new(v, d, seed))),
            Self::Vrnn(d) => AnyModel::Sequential(Box::new(VrnnModel::new(d, seed))),
            Self::Dssm(d) => AnyModel::Sequential(Box::new(DssmModel::new(d, seed))),
            Self::McDropout { x_dim, width, drop } => {
                AnyModel::Static(Box::new(McDropout::new(x_dim, vec![width, width], drop, optim, seed)))
            }
            Self::Bbb { x_dim, width } => AnyModel::Static(Box::new(Bbb::new(x_dim, width, optim, seed))),
            Self::Ensemble { x_dim, width, members } => {
                AnyModel::Static(Box::new(Ensemble::new(x_dim, vec![width], members, optim, seed)))
            }
        }
    }

    /// Spec for `kind` with the given free widths (ordered as in [`ModelSpec::widths`]).
    pub fn with_widths(kind: ModelKind, fixed: FixedDims, w: &[usize]) -> Result<Self> {
        let need = if matches!(kind, ModelKind::McDropout | ModelKind::Bbb | ModelKind::Ensemble) { 1 } else { 2 };
        if w.len() != need || w.contains(&0) {
            return Err(invalid(format!("{kind} takes {need} positive widths")));
        }
        let FixedDims {
            x_dim,
            hidden,
            latent,
            members,
            dropout,
        } = fixed;
        Ok(match kind {
            ModelKind::LtStructured | ModelKind::LtUnstructured => {
                let v = if kind == ModelKind::LtStructured {
                    LtVariant::Structured
                } else {
                    LtVariant::Unstructured
                };
                Self::Lt(
                    v,
                    LtDims {
                        x_dim,
                        embed: w[0],
                        hidden,
                        latent,
                        predictor_hidden: w[1],
                    },
                )
            }
            ModelKind::Vrnn => Self::Vrnn(VrnnDims {
                x_dim,
                feature: w[0],
                hidden,
                latent,
                net: w[1],
            }),
            ModelKind::Dssm => Self::Dssm(DssmDims {
                x_dim,
                embed: w[0],
                hidden,
                latent,
                net: w[1],
            }),
            ModelKind::McDropout => Self::McDropout {
                x_dim,
                width: w[0],
                drop: dropout,
            },
            ModelKind::Bbb => Self::Bbb { x_dim, width: w[0] },
            ModelKind::Ensemble => Self::Ensemble {
                x_dim,
                width: w[0],
                members,
            },
        })
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.widths().iter().map(|(k, v)| format!("{k}:{v}")).collect();
        write!(f, "{} {}", self.kind(), parts.join(" "))
    }
}

/// Total and inference-time targets with relative tolerances.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BudgetTargets {
    pub total: usize,
    pub total_tol: f64,
    pub inference: usize,
    pub inference_tol: f64,
}

impl BudgetTargets {
    /// Reference total for `kind`, 20k active parameters, ±10% / ±5%.
    pub fn reference(kind: ModelKind) -> Self {
        Self {
            total: kind.reference_budget().total,
            total_tol: 0.10,
            inference: 20_000,
            inference_tol: 0.05,
        }
    }

    pub fn admits(&self, c: ParamCounts) -> bool {
        let within = |n: usize, target: usize, tol: f64| (n as f64 - target as f64).abs() <= tol * target as f64;
        within(c.total, self.total, self.total_tol) && within(c.inference_time, self.inference, self.inference_tol)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BudgetSolution {
    pub spec: ModelSpec,
    pub counts: ParamCounts,
    /// Whether both tolerances hold; otherwise `spec` is the closest assignment found.
    pub feasible: bool,
}

/// Upper bound of each free width searched for two-width architectures.
pub const MAX_WIDTH: usize = 512;

/// Upper bound for architectures with a single free width, which on narrow
/// inputs need far wider layers to reach the budget.
pub const MAX_SINGLE_WIDTH: usize = 8192;

/// Best assignment of `arity` widths under `count`, each in
/// `1..=MAX_SINGLE_WIDTH` for one width or `1..=MAX_WIDTH` for two.
/// Among assignments satisfying both tolerances, minimizes
/// `|total − target|`, then `|inference − target|`, then the widths
/// lexicographically. With no feasible assignment, returns the one
/// minimizing the summed relative violations. The flag reports feasibility.
pub fn search_widths(
    arity: usize,
    targets: BudgetTargets,
    count: impl Fn(&[usize]) -> ParamCounts,
) -> Result<(Vec<usize>, ParamCounts, bool)> {
    if targets.total == 0 || targets.inference == 0 {
        return Err(invalid("budget targets must be positive"));
    }
    if !(1..=2).contains(&arity) {
        return Err(invalid("width search supports one or two free widths"));
    }
    let rel = |n: usize, t: usize, tol: f64| ((n as f64 - t as f64).abs() / t as f64 - tol).max(0.0);
    let mut best_ok: Option<(usize, usize, Vec<usize>, ParamCounts)> = None;
    let mut best_any: Option<(f64, Vec<usize>, ParamCounts)> = None;
    let mut visit = |w: Vec<usize>| {
        let c = count(&w);
        if targets.admits(c) {
            let key = (c.total.abs_diff(targets.total), c.inference_time.abs_diff(targets.inference));
            if best_ok.as_ref().is_none_or(|b| key < (b.0, b.1)) {
                best_ok = Some((key.0, key.1, w, c));
            }
        } else if best_ok.is_none() {
            let v = rel(c.total, targets.total, targets.total_tol)
                + rel(c.inference_time, targets.inference, targets.inference_tol);
            if best_any.as_ref().is_none_or(|b| v < b.0) {
                best_any = Some((v, w, c));
            }
        }
    };
    let top = if arity == 1 { MAX_SINGLE_WIDTH } else { MAX_WIDTH };
    for a in 1..=top {
        if arity == 1 {
            visit(vec![a]);
        } else {
            for b in 1..=MAX_WIDTH {
                visit(vec![a, b]);
            }
        }
    }
    Ok(match (best_ok, best_any) {
        (Some((_, _, w, c)), _) => (w, c, true),
        (None, Some((_, w, c))) => (w, c, false),
        (None, None) => unreachable!("search space is nonempty"),
    })
}

/// Sizes the free widths of `kind` against `targets`.
pub fn solve_budget(kind: ModelKind, fixed: FixedDims, targets: BudgetTargets) -> Result<BudgetSolution> {
    let arity = if matches!(kind, ModelKind::McDropout | ModelKind::Bbb | ModelKind::Ensemble) { 1 } else { 2 };
    let (w, counts, feasible) = search_widths(arity, targets, |w| {
        ModelSpec::with_widths(kind, fixed, w).expect("arity matches").counts()
    })?;
    Ok(BudgetSolution {
        spec: ModelSpec::with_widths(kind, fixed, &w)?,
        counts,
        feasible,
    })
}
