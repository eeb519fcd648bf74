//! Residual-driven hp-adaptivity: error indication, node marking, and the
//! per-node spacing and order update rules.
//!
//! The cycle implemented here takes a solved discretisation, estimates the
//! local error at every node by applying a higher-order explicit operator to
//! the implicit solution (the IMEX indicator), splits the nodes into
//! refine / keep / de-refine bands relative to the largest indicator value,
//! and produces target spacing and order fields for the next point cloud.

use crate::approx::{self, ApproxError};
use crate::nodegen::{snap_order, NodeSet, NodeType, OrderField, SpacingField};
use crate::problems::ProblemSpec;
use crate::system::{self, SystemError};

/// Polynomial orders the solver accepts for the implicit operator.
pub const SOLVE_ORDERS: [u32; 4] = [2, 4, 6, 8];

/// Order increment used when building the explicit indicator operator.
pub const IMEX_ORDER_BUMP: u32 = 2;

#[derive(Debug, thiserror::Error)]
pub enum AdaptError {
    #[error("invalid adaptivity parameters: {what}")]
    InvalidParams { what: String },
    #[error(transparent)]
    Approx(#[from] ApproxError),
    #[error(transparent)]
    System(#[from] SystemError),
}

/// Thresholds and growth factors for one adaptive run.
///
/// The `_h` family steers spacing, the `_p` family polynomial order; within
/// each family `alpha` is the refinement threshold, `beta` the de-refinement
/// threshold, `lambda` the strongest spacing division (or order growth)
/// applied at the largest indicator, and `theta` the strongest coarsening
/// applied at the smallest.
#[derive(Debug, Clone, Copy)]
pub struct AdaptivityParams {
    pub alpha_h: f64,
    pub beta_h: f64,
    pub lambda_h: f64,
    pub theta_h: f64,
    pub alpha_p: f64,
    pub beta_p: f64,
    pub lambda_p: f64,
    pub theta_p: f64,
    /// Coarsest spacing allowed anywhere in the domain.
    pub h_max: f64,
    /// Node budget; at or above it, spacing refinement is suppressed.
    pub n_max: usize,
    /// Maximum number of adaptive iterations.
    pub n_iter: usize,
    /// Optional early-stop ratio on the indicator maximum.
    pub gamma: Option<f64>,
}

impl AdaptivityParams {
    /// Checks the structural constraints: thresholds in (0, 1) with
    /// `beta <= alpha` per family, growth factors at least 1, positive
    /// spacing cap.
    pub fn validate(&self) -> Result<(), AdaptError> {
        let bad = |what: &str| {
            Err(AdaptError::InvalidParams {
                what: what.to_string(),
            })
        };
        for (name, alpha, beta) in [
            ("h", self.alpha_h, self.beta_h),
            ("p", self.alpha_p, self.beta_p),
        ] {
            if !(alpha > 0.0 && alpha < 1.0) {
                return bad(&format!("alpha_{name} must lie in (0, 1), got {alpha}"));
            }
            if !(beta > 0.0 && beta < 1.0) {
                return bad(&format!("beta_{name} must lie in (0, 1), got {beta}"));
            }
            if !(beta <= alpha) {
                return bad(&format!(
                    "beta_{name} = {beta} must not exceed alpha_{name} = {alpha}"
                ));
            }
        }
        for (name, value) in [
            ("lambda_h", self.lambda_h),
            ("theta_h", self.theta_h),
            ("lambda_p", self.lambda_p),
            ("theta_p", self.theta_p),
        ] {
            if !(value >= 1.0) {
                return bad(&format!("{name} must be at least 1, got {value}"));
            }
        }
        if !(self.h_max > 0.0) {
            return bad(&format!("h_max must be positive, got {}", self.h_max));
        }
        Ok(())
    }
}

/// What to do with a node along one adaptation axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    Refine,
    None,
    Derefine,
}

/// Combined spacing and order decision for one node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MarkDecision {
    pub h: Action,
    pub p: Action,
}

/// Per-node error indicator with its extrema cached over the nodes that can
/// actually be adapted (Dirichlet nodes carry an exact boundary value and are
/// pinned to zero).
#[derive(Debug, Clone)]
pub struct IndicatorField {
    eta: Vec<f64>,
    eta_max: f64,
    eta_min: f64,
}

impl IndicatorField {
    /// Wraps raw indicator values. Every entry must be finite and
    /// non-negative; the cached extrema ignore Dirichlet nodes.
    pub fn new<const D: usize>(eta: Vec<f64>, nodes: &NodeSet<D>) -> Self {
        assert_eq!(eta.len(), nodes.len());
        let mut eta_max = 0.0f64;
        let mut eta_min = f64::INFINITY;
        for (i, &e) in eta.iter().enumerate() {
            assert!(
                e.is_finite() && e >= 0.0,
                "indicator must be finite and non-negative, got {e} at node {i}"
            );
            if nodes.node_type(i) != NodeType::Dirichlet {
                eta_max = eta_max.max(e);
                eta_min = eta_min.min(e);
            }
        }
        if !eta_min.is_finite() {
            // All nodes Dirichlet: nothing adaptable, collapse to zero.
            eta_min = 0.0;
        }
        IndicatorField {
            eta,
            eta_max,
            eta_min,
        }
    }

    pub fn len(&self) -> usize {
        self.eta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eta.is_empty()
    }

    pub fn eta(&self, i: usize) -> f64 {
        self.eta[i]
    }

    pub fn values(&self) -> &[f64] {
        &self.eta
    }

    pub fn eta_max(&self) -> f64 {
        self.eta_max
    }

    pub fn eta_min(&self) -> f64 {
        self.eta_min
    }
}

/// Collapses the per-row residual into one non-negative scalar per node: the
/// Euclidean norm over that node's components. Dirichlet nodes are pinned to
/// exactly zero regardless of their residual.
fn eta_from_residual(
    rhs: &[f64],
    ax: &[f64],
    ncomp: usize,
    is_dirichlet: impl Fn(usize) -> bool,
) -> Vec<f64> {
    assert_eq!(rhs.len(), ax.len());
    assert_eq!(rhs.len() % ncomp, 0);
    let n = rhs.len() / ncomp;
    let mut eta = Vec::with_capacity(n);
    for i in 0..n {
        if is_dirichlet(i) {
            eta.push(0.0);
            continue;
        }
        let mut acc = 0.0;
        for c in 0..ncomp {
            let r = rhs[i * ncomp + c] - ax[i * ncomp + c];
            acc += r * r;
        }
        eta.push(acc.sqrt());
    }
    eta
}

/// IMEX error indicator: re-discretises the problem with every node's order
/// raised by `order_bump`, applies the higher-order operator explicitly to
/// the implicit solution, and reports the per-node residual magnitude.
///
/// Rows the implicit solve satisfied exactly by construction stay near zero;
/// where the low-order solution fails to satisfy the high-order equations the
/// residual grows, which is where the discretisation error lives. Boundary
/// rows with derivative conditions (flux, traction) participate like interior
/// rows; Dirichlet rows are exact by definition and are pinned to zero.
pub fn imex_indicator<const D: usize>(
    problem: &ProblemSpec<D>,
    solution: &[f64],
    nodes: &NodeSet<D>,
    order_bump: u32,
) -> Result<IndicatorField, AdaptError> {
    assert_eq!(solution.len(), nodes.len() * problem.components);
    let bumped = nodes.with_bumped_orders(order_bump);
    let ops = problem.required_ops();
    let ws = approx::build_operator_table(&bumped, &ops, approx::DEFAULT_PHS_EXPONENT)?;
    let sys = system::assemble(problem, &bumped, &ws)?;
    let mut ax = vec![0.0; sys.rhs.len()];
    sys.matrix.mul_vec(solution, &mut ax);
    let eta = eta_from_residual(&sys.rhs, &ax, sys.ncomp, |i| {
        nodes.node_type(i) == NodeType::Dirichlet
    });
    Ok(IndicatorField::new(eta, nodes))
}

/// Band classification of one indicator value against the field maximum.
/// Both comparisons are strict, so a value sitting exactly on a threshold is
/// left alone.
pub fn mark_one(eta: f64, eta_max: f64, alpha: f64, beta: f64) -> Action {
    if eta > alpha * eta_max {
        Action::Refine
    } else if eta < beta * eta_max {
        Action::Derefine
    } else {
        Action::None
    }
}

/// Marks every node along both axes.
pub fn mark(field: &IndicatorField, params: &AdaptivityParams) -> Vec<MarkDecision> {
    let eta_max = field.eta_max();
    field
        .values()
        .iter()
        .map(|&e| MarkDecision {
            h: mark_one(e, eta_max, params.alpha_h, params.beta_h),
            p: mark_one(e, eta_max, params.alpha_p, params.beta_p),
        })
        .collect()
}

/// Interpolation factor for a node in the refinement band: 1 at the band
/// edge `alpha * eta_max`, `lambda` at `eta_max`. A degenerate band (the
/// edge coincides with the maximum) gets the full factor.
pub fn refine_factor(eta: f64, eta_max: f64, alpha: f64, lambda: f64) -> f64 {
    let edge = alpha * eta_max;
    let width = eta_max - edge;
    if width <= 0.0 {
        return lambda;
    }
    (eta - edge) / width * (lambda - 1.0) + 1.0
}

/// Interpolation factor for a node in the de-refinement band: 1 at the band
/// edge `beta * eta_max`, `1 / theta` at `eta_min`. The position inside the
/// band is clamped to [0, 1] so indicators below `eta_min` (Dirichlet nodes)
/// cannot overshoot. A degenerate band gets the full coarsening.
pub fn derefine_factor(eta: f64, eta_max: f64, eta_min: f64, beta: f64, theta: f64) -> f64 {
    let edge = beta * eta_max;
    let width = edge - eta_min;
    let position = if width <= 0.0 {
        1.0
    } else {
        ((edge - eta) / width).clamp(0.0, 1.0)
    };
    position * (1.0 / theta - 1.0) + 1.0
}

/// Target spacing for a node marked for refinement. The new spacing shrinks
/// from `h_old` at the band edge down to `h_old / lambda` at the indicator
/// maximum.
pub fn refine_spacing(h_old: f64, eta: f64, eta_max: f64, alpha: f64, lambda: f64) -> f64 {
    h_old / refine_factor(eta, eta_max, alpha, lambda)
}

/// Target spacing for a node marked for de-refinement. The new spacing grows
/// from `h_old` at the band edge up to `theta * h_old` at the indicator
/// minimum.
pub fn derefine_spacing(
    h_old: f64,
    eta: f64,
    eta_max: f64,
    eta_min: f64,
    beta: f64,
    theta: f64,
) -> f64 {
    h_old / derefine_factor(eta, eta_max, eta_min, beta, theta)
}

/// Target polynomial order after scaling by `factor` and snapping to the
/// solver's order set. `Action::None` leaves the order untouched.
pub fn update_order(m_old: u32, action: Action, factor: f64) -> u32 {
    match action {
        Action::None => m_old,
        Action::Refine | Action::Derefine => snap_order(m_old as f64 * factor, &SOLVE_ORDERS),
    }
}

/// Suppresses spacing refinement once the node budget is reached. Order
/// decisions and coarsening are left alone so the cloud can still rebalance.
pub fn enforce_caps(node_count: usize, n_max: usize, decisions: &mut [MarkDecision]) {
    if node_count >= n_max {
        for d in decisions.iter_mut() {
            if d.h == Action::Refine {
                d.h = Action::None;
            }
        }
    }
}

/// Per-node spacing and order targets for the next iteration, with the node
/// budget already enforced. Returns the targets evaluated at the current
/// node positions together with the decisions that produced them.
pub fn adapt_targets<const D: usize>(
    nodes: &NodeSet<D>,
    field: &IndicatorField,
    params: &AdaptivityParams,
) -> (Vec<f64>, Vec<u32>, Vec<MarkDecision>) {
    assert_eq!(field.len(), nodes.len());
    let eta_max = field.eta_max();
    let eta_min = field.eta_min();
    let mut decisions = mark(field, params);
    enforce_caps(nodes.len(), params.n_max, &mut decisions);

    let mut h_new = Vec::with_capacity(nodes.len());
    let mut m_new = Vec::with_capacity(nodes.len());
    for i in 0..nodes.len() {
        let eta = field.eta(i);
        let h_old = nodes.spacing_at(i);
        let m_old = nodes.order_at(i);
        let h = match decisions[i].h {
            Action::Refine => refine_spacing(h_old, eta, eta_max, params.alpha_h, params.lambda_h),
            Action::None => h_old,
            Action::Derefine => {
                derefine_spacing(h_old, eta, eta_max, eta_min, params.beta_h, params.theta_h)
            }
        };
        let m = match decisions[i].p {
            Action::Refine => update_order(
                m_old,
                Action::Refine,
                refine_factor(eta, eta_max, params.alpha_p, params.lambda_p),
            ),
            Action::None => m_old,
            Action::Derefine => update_order(
                m_old,
                Action::Derefine,
                derefine_factor(eta, eta_max, eta_min, params.beta_p, params.theta_p),
            ),
        };
        h_new.push(h.min(params.h_max));
        m_new.push(m);
    }
    (h_new, m_new, decisions)
}

/// Wraps the per-node targets into continuous fields the node generator can
/// evaluate anywhere: inverse-distance blends over the old cloud, with the
/// spacing capped at `h_max` and the order snapped to the solver's set.
pub fn transfer_fields<const D: usize>(
    old_nodes: &NodeSet<D>,
    h_new_at_old: &[f64],
    m_new_at_old: &[u32],
    h_max: f64,
) -> (SpacingField<D>, OrderField<D>) {
    assert_eq!(h_new_at_old.len(), old_nodes.len());
    assert_eq!(m_new_at_old.len(), old_nodes.len());
    let spacing = SpacingField::scattered(old_nodes.positions(), h_new_at_old.to_vec(), h_max);
    let order = OrderField::scattered(old_nodes.positions(), m_new_at_old, SOLVE_ORDERS.to_vec());
    (spacing, order)
}

/// True when the adaptive loop should stop: the iteration budget is spent,
/// or the indicator maximum has dropped below `gamma` times its initial
/// value. `history` holds one eta_max per completed iteration and must not
/// be empty.
pub fn stop_check(history: &[f64], iteration: usize, n_iter: usize, gamma: Option<f64>) -> bool {
    assert!(!history.is_empty(), "stop check needs at least one record");
    if iteration >= n_iter {
        return true;
    }
    if let Some(g) = gamma {
        let first = history[0];
        let last = *history.last().unwrap();
        if last <= g * first {
            return true;
        }
    }
    false
}

/// Continuous order estimate for reaching a target error from an observed
/// one, assuming error scales like e^(m0 - m): `m0 + ln(e_t / e_0)`.
/// Deliberately not rounded; callers snap it if they need a usable order.
pub fn target_order_guess(m0: u32, e0: f64, e_target: f64) -> f64 {
    assert!(e0 > 0.0 && e_target > 0.0);
    m0 as f64 + (e_target / e0).ln()
}

/// Relative cost of one discretisation against another: cubic in the local
/// stencil's polynomial basis size (dense weight solves) times the node
/// density ratio `(h_0 / h_t)^d`.
pub fn complexity_ratio(m_t: u32, m_0: u32, h_t: f64, h_0: f64, d: usize) -> f64 {
    assert!(h_t > 0.0 && h_0 > 0.0);
    let basis = approx::n_poly(m_t, d) as f64 / approx::n_poly(m_0, d) as f64;
    basis.powi(3) * (h_0 / h_t).powi(d as i32)
}
