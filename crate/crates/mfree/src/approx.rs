//! RBF-FD differentiation weights on scattered stencils.
//!
//! Weights come from collocation with a polyharmonic spline basis augmented
//! by monomials up to the local approximation order `m`. The augmented
//! saddle system is solved densely per stencil; exactness on the monomial
//! space is built into the formulation, and the polynomial part controls
//! the convergence order.

use crate::nodegen::NodeSet;
use crate::Point;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

/// Default polyharmonic exponent; `r^3` is unconditionally safe for the
/// orders in use.
pub const DEFAULT_PHS_EXPONENT: u32 = 3;
/// Stencil systems whose condition estimate exceeds this are rejected.
pub const CONDITION_LIMIT: f64 = 1e14;
/// Iterative refinement sweeps applied to every stencil solve.
pub const REFINEMENT_STEPS: usize = 2;

#[derive(Debug, thiserror::Error)]
pub enum ApproxError {
    #[error("stencil system is ill-conditioned (estimate {cond:.3e})")]
    IllConditioned { cond: f64 },
    #[error("approximation order {m} is unsupported; orders must be even and at least 2")]
    UnsupportedOrder { m: u32 },
    #[error(transparent)]
    NodeGen(#[from] crate::nodegen::NodeGenError),
}

/// Linear differential operators the weight machinery understands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Operator {
    /// Point evaluation.
    Identity,
    /// First derivative along an axis.
    D1(usize),
    /// Second derivative `d^2/(dx_a dx_b)`; canonical form has `a <= b`.
    D2(usize, usize),
    Laplacian,
}

impl Operator {
    /// Mixed second derivative in canonical axis order.
    pub fn d2(a: usize, b: usize) -> Self {
        if a <= b {
            Operator::D2(a, b)
        } else {
            Operator::D2(b, a)
        }
    }
}

/// Apply an operator to the polyharmonic kernel `phi(|x - x_i|)` at offset
/// `v = x - x_i`. Odd exponents give `r^k`, even give `r^k ln r`. All
/// operators vanish in the limit `r -> 0`, which is returned exactly.
pub fn phs_apply<const D: usize>(k: u32, op: Operator, v: &Point<D>) -> f64 {
    let r2 = v.norm_squared();
    if r2 == 0.0 {
        return 0.0;
    }
    let r = r2.sqrt();
    let ki = k as i32;
    let kf = k as f64;
    let df = D as f64;
    if k % 2 == 1 {
        match op {
            Operator::Identity => r.powi(ki),
            Operator::D1(a) => kf * v[a] * r.powi(ki - 2),
            Operator::D2(a, b) => {
                let mut t = kf * (kf - 2.0) * v[a] * v[b] * r.powi(ki - 4);
                if a == b {
                    t += kf * r.powi(ki - 2);
                }
                t
            }
            Operator::Laplacian => kf * (kf + df - 2.0) * r.powi(ki - 2),
        }
    } else {
        let l = r.ln();
        let s = kf * l + 1.0;
        match op {
            Operator::Identity => r.powi(ki) * l,
            Operator::D1(a) => v[a] * r.powi(ki - 2) * s,
            Operator::D2(a, b) => {
                let mut t = v[a] * v[b] * r.powi(ki - 4) * ((kf - 2.0) * s + kf);
                if a == b {
                    t += r.powi(ki - 2) * s;
                }
                t
            }
            Operator::Laplacian => r.powi(ki - 2) * (kf * (kf + df - 2.0) * l + 2.0 * kf + df - 2.0),
        }
    }
}

/// Dimension of the polynomial space of total degree `<= m` in `d`
/// variables: `C(m + d, d)`.
pub fn n_poly(m: u32, d: usize) -> usize {
    let mut c: usize = 1;
    for i in 1..=d {
        c = c * (m as usize + i) / i;
    }
    c
}

/// Stencil size for order `m` in `d` dimensions: twice the monomial count.
pub fn stencil_size(m: u32, d: usize) -> usize {
    2 * n_poly(m, d)
}

/// Multi-indices of all monomials with total degree `<= m`, graded by
/// degree, leading axes first within a degree.
pub fn monomial_exponents<const D: usize>(m: u32) -> Vec<[u32; D]> {
    fn rec<const D: usize>(remaining: u32, axis: usize, e: &mut [u32; D], out: &mut Vec<[u32; D]>) {
        if axis == D - 1 {
            e[axis] = remaining;
            out.push(*e);
            return;
        }
        for v in (0..=remaining).rev() {
            e[axis] = v;
            rec(remaining - v, axis + 1, e, out);
        }
    }
    let mut out = Vec::with_capacity(n_poly(m, D));
    let mut e = [0u32; D];
    for deg in 0..=m {
        rec(deg, 0, &mut e, &mut out);
    }
    out
}

fn mono_eval<const D: usize>(y: &Point<D>, e: &[u32; D]) -> f64 {
    let mut v = 1.0;
    for a in 0..D {
        v *= y[a].powi(e[a] as i32);
    }
    v
}

/// Operator applied to the shifted, scaled monomial `p_e((x - c) / rho)`
/// and evaluated at the stencil center `x = c`.
fn mono_op_at_center<const D: usize>(e: &[u32; D], op: Operator, rho: f64) -> f64 {
    let deg: u32 = e.iter().sum();
    match op {
        Operator::Identity => {
            if deg == 0 {
                1.0
            } else {
                0.0
            }
        }
        Operator::D1(a) => {
            if deg == 1 && e[a] == 1 {
                1.0 / rho
            } else {
                0.0
            }
        }
        Operator::D2(a, b) if a == b => {
            if deg == 2 && e[a] == 2 {
                2.0 / (rho * rho)
            } else {
                0.0
            }
        }
        Operator::D2(a, b) => {
            if deg == 2 && e[a] == 1 && e[b] == 1 {
                1.0 / (rho * rho)
            } else {
                0.0
            }
        }
        Operator::Laplacian => {
            if deg == 2 && (0..D).any(|a| e[a] == 2) {
                2.0 / (rho * rho)
            } else {
                0.0
            }
        }
    }
}

/// Differentiation weights for one stencil: for each requested operator,
/// the vector `w` with `L u (center) ~= sum_j w_j u(points_j)`.
///
/// One LU factorisation of the saddle matrix is shared by all operators;
/// every solve gets [`REFINEMENT_STEPS`] sweeps of iterative refinement.
/// The factorisation is rejected when the ratio of extreme pivot
/// magnitudes exceeds [`CONDITION_LIMIT`].
pub fn stencil_weights<const D: usize>(
    points: &[Point<D>],
    center: &Point<D>,
    m: u32,
    k: u32,
    ops: &[Operator],
) -> Result<Vec<Vec<f64>>, ApproxError> {
    if m < 2 || m % 2 != 0 {
        return Err(ApproxError::UnsupportedOrder { m });
    }
    let n = points.len();
    let exps = monomial_exponents::<D>(m);
    let np = exps.len();
    let dim = n + np;

    let rho = points
        .iter()
        .map(|p| (p - center).norm())
        .fold(0.0, f64::max)
        .max(1e-300);

    let mut mat = DMatrix::<f64>::zeros(dim, dim);
    for i in 0..n {
        for j in 0..i {
            let v = phs_apply(k, Operator::Identity, &(points[i] - points[j]));
            mat[(i, j)] = v;
            mat[(j, i)] = v;
        }
    }
    for i in 0..n {
        let y = (points[i] - center) / rho;
        for (l, e) in exps.iter().enumerate() {
            let v = mono_eval(&y, e);
            mat[(i, n + l)] = v;
            mat[(n + l, i)] = v;
        }
    }

    let lu = mat.clone().lu();
    let u_diag = lu.u();
    let mut dmax: f64 = 0.0;
    let mut dmin = f64::INFINITY;
    for i in 0..dim {
        let d = u_diag[(i, i)].abs();
        dmax = dmax.max(d);
        dmin = dmin.min(d);
    }
    let cond = if dmin == 0.0 { f64::INFINITY } else { dmax / dmin };
    if cond > CONDITION_LIMIT {
        return Err(ApproxError::IllConditioned { cond });
    }

    let mut out = Vec::with_capacity(ops.len());
    for &op in ops {
        let mut b = DVector::<f64>::zeros(dim);
        for i in 0..n {
            b[i] = phs_apply(k, op, &(center - points[i]));
        }
        for (l, e) in exps.iter().enumerate() {
            b[n + l] = mono_op_at_center(e, op, rho);
        }
        let mut w = lu
            .solve(&b)
            .ok_or(ApproxError::IllConditioned { cond: f64::INFINITY })?;
        for _ in 0..REFINEMENT_STEPS {
            let r = &b - &mat * &w;
            if let Some(c) = lu.solve(&r) {
                w += c;
            }
        }
        out.push(w.as_slice()[..n].to_vec());
    }
    Ok(out)
}

/// Worst monomial-reproduction error of one stencil, for self-tests.
///
/// Builds the weights and applies them to every centered, unscaled monomial
/// `prod (x_a - c_a)^e_a` of total degree `<= m`, comparing with the
/// analytic operator value at the center. Each error is divided by
/// `rho^(deg - p)`, `rho` the stencil radius and `p` the operator's
/// derivative order, so the figure is invariant under uniform scaling of
/// the stencil.
pub fn exactness_residual<const D: usize>(
    points: &[Point<D>],
    center: &Point<D>,
    m: u32,
    k: u32,
    ops: &[Operator],
) -> Result<f64, ApproxError> {
    let weights = stencil_weights(points, center, m, k, ops)?;
    let rho = points
        .iter()
        .map(|p| (p - center).norm())
        .fold(0.0, f64::max)
        .max(1e-300);
    let mut worst = 0.0f64;
    for (oi, &op) in ops.iter().enumerate() {
        let p = match op {
            Operator::Identity => 0,
            Operator::D1(_) => 1,
            Operator::D2(..) | Operator::Laplacian => 2,
        };
        for e in monomial_exponents::<D>(m) {
            let deg: u32 = e.iter().sum();
            let approx: f64 = points
                .iter()
                .zip(&weights[oi])
                .map(|(x, &w)| w * mono_eval(&(x - center), &e))
                .sum();
            let exact = mono_op_at_center(&e, op, 1.0);
            let scale = rho.powi(deg as i32 - p);
            worst = worst.max((approx - exact).abs() / scale);
        }
    }
    Ok(worst)
}

/// Differentiation weights for every node of a cloud.
///
/// Per node `i` the stencil is the [`stencil_size`] nearest nodes for the
/// node's own order `m_i`, and `weights(i, op)` holds one weight per
/// stencil member in the same order as `stencil(i)`.
#[derive(Debug, Clone)]
pub struct WeightSet<const D: usize> {
    ops: Vec<Operator>,
    stencils: Vec<Vec<u32>>,
    weights: Vec<Vec<f64>>,
}

impl<const D: usize> WeightSet<D> {
    pub fn ops(&self) -> &[Operator] {
        &self.ops
    }

    pub fn op_index(&self, op: Operator) -> Option<usize> {
        self.ops.iter().position(|&o| o == op)
    }

    pub fn len(&self) -> usize {
        self.stencils.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stencils.is_empty()
    }

    pub fn stencil(&self, node: usize) -> &[u32] {
        &self.stencils[node]
    }

    pub fn weights(&self, node: usize, op_idx: usize) -> &[f64] {
        let n = self.stencils[node].len();
        &self.weights[node][op_idx * n..(op_idx + 1) * n]
    }

    /// Apply one operator to a scalar field sampled on the cloud.
    pub fn apply(&self, node: usize, op_idx: usize, field: &[f64]) -> f64 {
        self.stencil(node)
            .iter()
            .zip(self.weights(node, op_idx))
            .map(|(&j, &w)| w * field[j as usize])
            .sum()
    }
}

/// Build the full weight table for a cloud, one stencil per node, using
/// each node's own approximation order. Stencil solves are independent and
/// run in parallel; the result is deterministic regardless of thread count.
pub fn build_operator_table<const D: usize>(
    nodes: &NodeSet<D>,
    ops: &[Operator],
    k: u32,
) -> Result<WeightSet<D>, ApproxError> {
    let per_node: Result<Vec<(Vec<u32>, Vec<f64>)>, ApproxError> = (0..nodes.len())
        .into_par_iter()
        .map(|i| {
            let m = nodes.order_at(i);
            let n = stencil_size(m, D);
            let stencil = nodes.nearest_neighbors(nodes.position(i), n)?;
            let pts: Vec<Point<D>> = stencil.iter().map(|&j| *nodes.position(j)).collect();
            let w = stencil_weights(&pts, nodes.position(i), m, k, ops)?;
            let flat: Vec<f64> = w.into_iter().flatten().collect();
            Ok((stencil.into_iter().map(|j| j as u32).collect(), flat))
        })
        .collect();
    let per_node = per_node?;
    let mut stencils = Vec::with_capacity(per_node.len());
    let mut weights = Vec::with_capacity(per_node.len());
    for (s, w) in per_node {
        stencils.push(s);
        weights.push(w);
    }
    Ok(WeightSet {
        ops: ops.to_vec(),
        stencils,
        weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nodegen::{fill_domain, DomainShape, SpacingField};
    use crate::pt;

    #[test]
    fn phs_odd_frozen_values() {
        // k = 3 kernel, r = 1 along the x axis.
        let v = pt([1.0, 0.0]);
        assert_eq!(phs_apply(3, Operator::Identity, &v), 1.0);
        assert_eq!(phs_apply(3, Operator::Laplacian, &v), 9.0);
        let v3 = pt([1.0, 0.0, 0.0]);
        assert_eq!(phs_apply(3, Operator::Laplacian, &v3), 12.0);

        // r = 2 along x.
        let v = pt([2.0, 0.0]);
        assert_eq!(phs_apply(3, Operator::Identity, &v), 8.0);
        assert_eq!(phs_apply(3, Operator::D1(0), &v), 12.0);
        assert_eq!(phs_apply(3, Operator::D1(1), &v), 0.0);
        assert_eq!(phs_apply(3, Operator::D2(0, 0), &v), 12.0);

        // Mixed derivative at (1, 1): 3 / sqrt(2).
        let v = pt([1.0, 1.0]);
        let want = 3.0 / 2f64.sqrt();
        assert!((phs_apply(3, Operator::D2(0, 1), &v) - want).abs() < 1e-15);
    }

    #[test]
    fn phs_even_frozen_values() {
        // k = 2 kernel: r^2 ln r.
        let v = pt([1.0, 0.0]);
        assert_eq!(phs_apply(2, Operator::Identity, &v), 0.0, "ln 1 = 0");
        assert_eq!(phs_apply(2, Operator::Laplacian, &v), 4.0);
        assert_eq!(phs_apply(2, Operator::D1(0), &v), 1.0);
        let v = pt([1.0, 1.0]);
        assert!((phs_apply(2, Operator::D2(0, 1), &v) - 1.0).abs() < 1e-15);
        let e = std::f64::consts::E;
        let v = pt([e, 0.0]);
        assert!((phs_apply(2, Operator::Identity, &v) - e * e).abs() < 1e-12);
    }

    #[test]
    fn phs_vanishes_at_origin() {
        let v = pt([0.0, 0.0]);
        for op in [
            Operator::Identity,
            Operator::D1(0),
            Operator::D2(0, 0),
            Operator::D2(0, 1),
            Operator::Laplacian,
        ] {
            assert_eq!(phs_apply(3, op, &v), 0.0);
            assert_eq!(phs_apply(2, op, &v), 0.0);
        }
    }

    #[test]
    fn phs_derivatives_match_finite_differences() {
        let k = 3;
        let v = pt([0.31, -0.72]);
        let eps = 1e-6;
        let f = |p: Point<2>| phs_apply::<2>(k, Operator::Identity, &p);
        for a in 0..2 {
            let mut vp = v;
            let mut vm = v;
            vp[a] += eps;
            vm[a] -= eps;
            let fd = (f(vp) - f(vm)) / (2.0 * eps);
            let an = phs_apply(k, Operator::D1(a), &v);
            assert!((fd - an).abs() < 1e-7, "D1({a}): {fd} vs {an}");
        }
        for a in 0..2 {
            for b in 0..2 {
                let mut vpp = v;
                let mut vpm = v;
                let mut vmp = v;
                let mut vmm = v;
                vpp[a] += eps;
                vpp[b] += eps;
                vpm[a] += eps;
                vpm[b] -= eps;
                vmp[a] -= eps;
                vmp[b] += eps;
                vmm[a] -= eps;
                vmm[b] -= eps;
                let fd = (f(vpp) - f(vpm) - f(vmp) + f(vmm)) / (4.0 * eps * eps);
                let an = phs_apply(k, Operator::D2(a, b), &v);
                assert!((fd - an).abs() < 1e-4, "D2({a},{b}): {fd} vs {an}");
            }
        }
        let lap: f64 = (0..2).map(|a| phs_apply(k, Operator::D2(a, a), &v)).sum();
        assert!((lap - phs_apply(k, Operator::Laplacian, &v)).abs() < 1e-12);
    }

    #[test]
    fn stencil_size_table() {
        for (m, n2, n3) in [(2, 12, 20), (4, 30, 70), (6, 56, 168), (8, 90, 330), (10, 132, 572)]
        {
            assert_eq!(stencil_size(m, 2), n2, "m = {m}, d = 2");
            assert_eq!(stencil_size(m, 3), n3, "m = {m}, d = 3");
        }
    }

    #[test]
    fn monomial_basis_is_complete() {
        let exps = monomial_exponents::<2>(4);
        assert_eq!(exps.len(), n_poly(4, 2));
        assert!(exps.iter().all(|e| e[0] + e[1] <= 4));
        let mut seen = std::collections::HashSet::new();
        assert!(exps.iter().all(|e| seen.insert(*e)), "duplicates");

        let exps = monomial_exponents::<3>(6);
        assert_eq!(exps.len(), n_poly(6, 3));
    }

    fn disc_cloud(h: f64, seed: u64) -> NodeSet<2> {
        let shape = DomainShape::Disc {
            center: pt([0.0, 0.0]),
            radius: 1.0,
        };
        fill_domain(&shape, &SpacingField::constant(h), seed, 100_000).unwrap()
    }

    /// Random quasi-uniform stencil: a jittered lattice around a random
    /// center, truncated to the stencil size for order `m`. Mirrors what
    /// the node generator produces without being a regular grid.
    fn jittered_stencil<const D: usize>(
        rng: &mut impl rand::Rng,
        m: u32,
        spacing: f64,
    ) -> (Vec<Point<D>>, Point<D>) {
        let n = stencil_size(m, D);
        let half = ((n as f64).powf(1.0 / D as f64) / 2.0).ceil() as i64 + 2;
        let mut cand: Vec<Point<D>> = Vec::new();
        let mut idx = [-half; D];
        'grid: loop {
            let mut x = [0.0; D];
            for a in 0..D {
                x[a] = (idx[a] as f64 + rng.gen_range(-0.35..0.35)) * spacing;
            }
            cand.push(pt(x));
            for a in 0..D {
                idx[a] += 1;
                if idx[a] <= half {
                    continue 'grid;
                }
                idx[a] = -half;
            }
            break;
        }
        cand.sort_by(|p, q| p.norm().partial_cmp(&q.norm()).unwrap());
        cand.truncate(n);
        let center = cand[0];
        (cand, center)
    }

    #[test]
    fn exactness_residual_is_scale_free_and_tiny() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let ops = [
            Operator::Identity,
            Operator::D1(0),
            Operator::D1(1),
            Operator::D2(0, 0),
            Operator::d2(1, 0),
            Operator::D2(1, 1),
            Operator::Laplacian,
        ];
        for m in [2u32, 4] {
            let (points, center) = jittered_stencil::<2>(&mut rng, m, 0.05);
            let r = exactness_residual(&points, &center, m, 3, &ops).unwrap();
            assert!(r < 1e-7, "m={m}: residual {r}");

            // Shrinking the whole stencil must not change the figure much.
            // (Only moderately: below r ~ 1e-4 the raw cubic kernel block
            // collapses against the O(1) polynomial block and the pivot
            // ratio guard rejects the stencil.)
            let shrunk: Vec<Point<2>> =
                points.iter().map(|p| center + (p - center) * 0.1).collect();
            let rs = exactness_residual(&shrunk, &center, m, 3, &ops).unwrap();
            assert!(rs < 1e-7, "m={m} shrunk: residual {rs}");
        }
    }

    #[test]
    fn laplacian_weights_are_exact_on_quadratics() {
        let nodes = disc_cloud(0.2, 1);
        let ws = build_operator_table(&nodes, &[Operator::Laplacian], 3).unwrap();
        let u: Vec<f64> = nodes
            .positions()
            .iter()
            .map(|p| p[0] * p[0] + p[1] * p[1])
            .collect();
        for i in 0..nodes.len() {
            let lap = ws.apply(i, 0, &u);
            assert!((lap - 4.0).abs() < 1e-7, "node {i}: {lap}");
        }
    }

    #[test]
    fn weights_reproduce_full_quadratic() {
        let nodes = disc_cloud(0.25, 3);
        let ops = [
            Operator::D1(0),
            Operator::D1(1),
            Operator::D2(0, 0),
            Operator::d2(1, 0),
            Operator::D2(1, 1),
            Operator::Identity,
        ];
        let ws = build_operator_table(&nodes, &ops, 3).unwrap();
        // u = 3 + 2x - y + 0.5 x^2 + xy - 2 y^2
        let u: Vec<f64> = nodes
            .positions()
            .iter()
            .map(|p| 3.0 + 2.0 * p[0] - p[1] + 0.5 * p[0] * p[0] + p[0] * p[1] - 2.0 * p[1] * p[1])
            .collect();
        for i in 0..nodes.len() {
            let p = nodes.position(i);
            let checks = [
                (0, 2.0 + p[0] + p[1]),
                (1, -1.0 + p[0] - 4.0 * p[1]),
                (2, 1.0),
                (3, 1.0),
                (4, -4.0),
                (5, u[i]),
            ];
            for (op, want) in checks {
                let got = ws.apply(i, op, &u);
                assert!(
                    (got - want).abs() < 1e-7,
                    "node {i} op {op}: {got} vs {want}"
                );
            }
        }
    }

    #[test]
    fn high_order_weights_are_exact_on_quartics() {
        let nodes = disc_cloud(0.2, 5);
        let mut high = nodes.clone();
        for i in 0..high.len() {
            high.set_order(i, 4);
        }
        let ws = build_operator_table(&high, &[Operator::Laplacian], 3).unwrap();
        let u: Vec<f64> = high
            .positions()
            .iter()
            .map(|p| p[0].powi(4) + p[1].powi(4))
            .collect();
        for i in 0..high.len() {
            let p = high.position(i);
            let want = 12.0 * (p[0] * p[0] + p[1] * p[1]);
            let got = ws.apply(i, 0, &u);
            assert!((got - want).abs() < 1e-6, "node {i}: {got} vs {want}");
        }
    }

    #[test]
    fn identity_weights_are_cardinal() {
        let nodes = disc_cloud(0.3, 7);
        let ws = build_operator_table(&nodes, &[Operator::Identity], 3).unwrap();
        for i in 0..nodes.len() {
            for (&j, &w) in ws.stencil(i).iter().zip(ws.weights(i, 0)) {
                let want = if j as usize == i { 1.0 } else { 0.0 };
                assert!((w - want).abs() < 1e-8, "node {i}, member {j}: {w}");
            }
        }
    }

    #[test]
    fn derivative_weights_sum_to_zero() {
        let nodes = disc_cloud(0.2, 9);
        let ops = [Operator::D1(0), Operator::Laplacian];
        let ws = build_operator_table(&nodes, &ops, 3).unwrap();
        for i in 0..nodes.len() {
            for op in 0..2 {
                let w = ws.weights(i, op);
                let scale = w.iter().map(|x| x.abs()).fold(0.0, f64::max);
                let sum: f64 = w.iter().sum();
                assert!(sum.abs() <= 1e-10 * scale.max(1.0), "node {i} op {op}: {sum}");
            }
        }
    }

    #[test]
    fn weights_are_translation_invariant() {
        let nodes = disc_cloud(0.3, 11);
        let n = stencil_size(2, 2);
        let stencil = nodes.nearest_neighbors(nodes.position(0), n).unwrap();
        let pts: Vec<Point<2>> = stencil.iter().map(|&j| *nodes.position(j)).collect();
        let c = *nodes.position(0);
        let w0 = stencil_weights(&pts, &c, 2, 3, &[Operator::Laplacian]).unwrap();

        let t = pt([10.0, -7.0]);
        let shifted: Vec<Point<2>> = pts.iter().map(|p| p + t).collect();
        let w1 = stencil_weights(&shifted, &(c + t), 2, 3, &[Operator::Laplacian]).unwrap();

        let scale = w0[0].iter().map(|x| x.abs()).fold(0.0, f64::max);
        for (a, b) in w0[0].iter().zip(&w1[0]) {
            assert!((a - b).abs() < 1e-6 * scale, "{a} vs {b}");
        }
    }

    #[test]
    fn degenerate_stencil_is_rejected() {
        // Collinear points cannot support the bivariate polynomial basis.
        let pts: Vec<Point<2>> = (0..12).map(|i| pt([i as f64 * 0.1, 0.0])).collect();
        let err = stencil_weights(&pts, &pts[5].clone(), 2, 3, &[Operator::Laplacian]).unwrap_err();
        assert!(matches!(err, ApproxError::IllConditioned { .. }));
    }

    #[test]
    fn odd_orders_are_rejected() {
        let pts: Vec<Point<2>> = (0..12)
            .map(|i| pt([(i as f64 * 0.7).cos(), (i as f64 * 0.7).sin()]))
            .collect();
        let err = stencil_weights(&pts, &pt([0.0, 0.0]), 3, 3, &[Operator::Identity]).unwrap_err();
        assert!(matches!(err, ApproxError::UnsupportedOrder { m: 3 }));
    }
}
