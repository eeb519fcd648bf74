//! Benchmark problem definitions: governing operators, boundary data,
//! closed-form oracles, and elasticity post-processing.
//!
//! All quantities are SI base units internally; unit conversion from
//! engineering inputs (mm, MPa, GPa) happens at ingestion.

use crate::approx::{Operator, WeightSet};
use crate::nodegen::{DomainShape, NodeSet, NodeType};
use crate::spatial::KdTree;
use crate::{pt, Point};
use std::io::BufRead;

/// Upper bound on unknown components across supported problems (3D elasticity).
pub const MAX_COMPONENTS: usize = 3;

#[derive(Debug, thiserror::Error)]
pub enum ProblemError {
    #[error("invalid loading: {condition}")]
    InvalidLoading { condition: String },
    #[error("exact-solution norm is zero; relative error undefined")]
    ZeroExactNorm,
    #[error("weight table lacks the {0} operator required for post-processing")]
    MissingOperator(&'static str),
    #[error("bad reference CSV: {0}")]
    BadReference(String),
}

/// Per-component value; unused trailing components are zero.
pub type Value = [f64; MAX_COMPONENTS];
/// Volumetric data (source term, exact solution, Dirichlet data).
pub type FieldFn<const D: usize> = Box<dyn Fn(&Point<D>) -> Value + Send + Sync>;
/// Scalar boundary flux `(position, outward normal) -> g`.
pub type FluxFn<const D: usize> = Box<dyn Fn(&Point<D>, &Point<D>) -> f64 + Send + Sync>;
/// Traction vector `(position, outward normal) -> t`.
pub type TractionFn<const D: usize> = Box<dyn Fn(&Point<D>, &Point<D>) -> Value + Send + Sync>;
/// Boundary classification `(position, outward normal) -> node type`.
pub type ClassifyFn<const D: usize> = Box<dyn Fn(&Point<D>, &Point<D>) -> NodeType + Send + Sync>;

/// Interior differential operator of the governing PDE.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InteriorOp {
    /// Scalar `lap u = f`.
    Poisson,
    /// Displacement-form linear elasticity
    /// `(lambda + mu) grad(div u) + mu lap u = f`.
    NavierCauchy { lambda: f64, mu: f64 },
}

/// Complete description of a boundary-value problem on a domain shape.
pub struct ProblemSpec<const D: usize> {
    pub name: &'static str,
    /// Unknown components per node: 1 (scalar) or `D` (displacement).
    pub components: usize,
    pub interior: InteriorOp,
    /// Remove nodes coincident with geometric corners after discretisation.
    pub strip_corners: bool,
    pub rhs: FieldFn<D>,
    pub dirichlet: FieldFn<D>,
    pub neumann: Option<FluxFn<D>>,
    pub traction: Option<TractionFn<D>>,
    pub exact: Option<FieldFn<D>>,
    pub classify: ClassifyFn<D>,
}

impl<const D: usize> ProblemSpec<D> {
    /// Operators the assembled system references; the weight table must
    /// contain every one of them.
    pub fn required_ops(&self) -> Vec<Operator> {
        let mut ops = vec![Operator::Laplacian];
        match self.interior {
            InteriorOp::Poisson => {
                if self.neumann.is_some() {
                    ops.extend((0..D).map(Operator::D1));
                }
            }
            InteriorOp::NavierCauchy { .. } => {
                ops.extend((0..D).map(Operator::D1));
                for a in 0..D {
                    for b in a..D {
                        ops.push(Operator::D2(a, b));
                    }
                }
            }
        }
        ops
    }

    /// Retag every boundary node according to the problem's classification.
    pub fn tag_boundary(&self, nodes: &mut NodeSet<D>) {
        for i in 0..nodes.len() {
            if let Some(n) = nodes.normal(i).copied() {
                let t = (self.classify)(nodes.position(i), &n);
                nodes.set_node_type(i, t);
            }
        }
    }

    /// Closed-form solution sampled at the nodes, interleaved by component.
    pub fn exact_at_nodes(&self, nodes: &NodeSet<D>) -> Option<Vec<f64>> {
        let exact = self.exact.as_ref()?;
        let mut out = Vec::with_capacity(nodes.len() * self.components);
        for p in nodes.positions() {
            let v = exact(p);
            out.extend_from_slice(&v[..self.components]);
        }
        Some(out)
    }
}

// ---------------------------------------------------------------------------
// Poisson problem with an exponentially strong source
// ---------------------------------------------------------------------------

/// Scalar Poisson problem `lap u = f` on the unit disc whose solution is a
/// sharp exponential peak `u = exp(-a |x - x_s|^2)`. The boundary splits at
/// the vertical line through the source: flux data on `x <= 1/2`, value
/// data on `x > 1/2`.
pub fn peak_problem(strength: f64, source: Point<2>) -> ProblemSpec<2> {
    assert!(strength > 0.0);
    let u = move |x: &Point<2>| (-strength * (x - source).norm_squared()).exp();
    ProblemSpec {
        name: "peak",
        components: 1,
        interior: InteriorOp::Poisson,
        strip_corners: false,
        rhs: Box::new(move |x| {
            let r2 = (x - source).norm_squared();
            let f = 2.0 * strength * (-strength * r2).exp() * (2.0 * strength * r2 - 2.0);
            [f, 0.0, 0.0]
        }),
        dirichlet: Box::new(move |x| [u(x), 0.0, 0.0]),
        neumann: Some(Box::new(move |x, n| {
            let grad = -2.0 * strength * u(x) * (x - source);
            grad.dot(n)
        })),
        traction: None,
        exact: Some(Box::new(move |x| [u(x), 0.0, 0.0])),
        classify: Box::new(|x, _n| {
            if x[0] <= 0.5 {
                NodeType::Neumann
            } else {
                NodeType::Dirichlet
            }
        }),
    }
}

/// Default peak setup: strength 1e3, source at (1/2, 1/3), unit disc.
pub fn peak_default() -> (ProblemSpec<2>, DomainShape<2>) {
    let shape = DomainShape::Disc {
        center: pt([0.0, 0.0]),
        radius: 1.0,
    };
    (peak_problem(1e3, pt([0.5, 1.0 / 3.0])), shape)
}

/// All-Dirichlet Laplace problem whose exact solution `u = x + y` lies in
/// every stencil's polynomial space. Any consistent discretisation
/// reproduces it to rounding, which makes it a cheap end-to-end probe.
pub fn linear_patch() -> ProblemSpec<2> {
    ProblemSpec {
        name: "linear-patch",
        components: 1,
        interior: InteriorOp::Poisson,
        strip_corners: false,
        rhs: Box::new(|_| [0.0; MAX_COMPONENTS]),
        dirichlet: Box::new(|x| [x[0] + x[1], 0.0, 0.0]),
        neumann: None,
        traction: None,
        exact: Some(Box::new(|x| [x[0] + x[1], 0.0, 0.0])),
        classify: Box::new(|_, _| NodeType::Dirichlet),
    }
}

// ---------------------------------------------------------------------------
// Elastic material
// ---------------------------------------------------------------------------

/// Isotropic linear-elastic material in engineering constants.
#[derive(Debug, Clone, Copy)]
pub struct ElasticMaterial {
    /// Young's modulus (Pa).
    pub e: f64,
    /// Poisson ratio, in (0, 0.5).
    pub nu: f64,
}

impl ElasticMaterial {
    pub fn new(e: f64, nu: f64) -> Self {
        assert!(e > 0.0 && nu > 0.0 && nu < 0.5);
        ElasticMaterial { e, nu }
    }

    /// First Lame parameter.
    pub fn lambda(self) -> f64 {
        self.e * self.nu / ((1.0 + self.nu) * (1.0 - 2.0 * self.nu))
    }

    /// Shear modulus (second Lame parameter).
    pub fn mu(self) -> f64 {
        self.e / (2.0 * (1.0 + self.nu))
    }
}

// ---------------------------------------------------------------------------
// Fretting fatigue: cylindrical-pad contact on a plane-strain strip
// ---------------------------------------------------------------------------

/// Contact benchmark inputs, stated in millimetre/megapascal/newton units
/// (consistent: 1 MPa x 1 mm^2 = 1 N). Millimetre-scale geometry keeps the
/// assembled stiffness rows within a few orders of the unit clamped rows;
/// restated in metres and pascals the same system is numerically singular in
/// double precision.
#[derive(Debug, Clone, Copy)]
pub struct FrettingSetup {
    /// Strip material (MPa).
    pub sample: ElasticMaterial,
    /// Pad material (MPa).
    pub pad: ElasticMaterial,
    /// Strip length L (mm); the domain is [-L/2, L/2] x [-W/2, 0].
    pub length: f64,
    /// Full strip width W (mm); symmetry halves it.
    pub width: f64,
    /// Out-of-plane thickness t (mm).
    pub thickness: f64,
    /// Pad compression force F (N).
    pub normal_force: f64,
    /// Oscillating tangential force Q (N).
    pub tangential_force: f64,
    /// Axial traction on the right edge (MPa).
    pub axial_stress: f64,
    /// Cylindrical pad radius R (mm).
    pub pad_radius: f64,
    /// Coulomb friction coefficient.
    pub friction: f64,
}

impl Default for FrettingSetup {
    fn default() -> Self {
        let alu = ElasticMaterial::new(72.1e3, 0.33);
        FrettingSetup {
            sample: alu,
            pad: alu,
            length: 40.0,
            width: 10.0,
            thickness: 4.0,
            normal_force: 543.0,
            tangential_force: 155.0,
            axial_stress: 100.0,
            pad_radius: 10.0,
            friction: 0.3,
        }
    }
}

/// Cylindrical-contact constants for partial slip with a superposed axial
/// load.
#[derive(Debug, Clone, Copy)]
pub struct HertzConstants {
    /// Contact half-width, in the length unit of the inputs.
    pub a: f64,
    /// Peak contact pressure, in the stress unit of the inputs.
    pub p0: f64,
    /// Stick-zone half-width.
    pub c: f64,
    /// Stick-zone eccentricity from axial loading.
    pub e: f64,
    /// Combined elastic modulus.
    pub e_star: f64,
    /// Friction coefficient the tractions were derived with.
    pub mu_f: f64,
    /// Dimensionally consistent axial-load validity measure
    /// (e + c)/a; the loading is admissible while this is <= 1.
    pub axial_ratio: f64,
    /// The same inequality as often printed, sigma_ax <= 4(1 - c/a),
    /// evaluated as a ratio. Dimensionally inconsistent (Pa vs pure
    /// number); recorded for reference, never enforced.
    pub axial_ratio_printed: f64,
}

/// Contact constants from load, pad radius, thickness and the material
/// pair: `1/E* = (1-nu1^2)/E1 + (1-nu2^2)/E2`, `a = 2 sqrt(FR/(t pi E*))`,
/// `p0 = sqrt(F E*/(t pi R))`, `c = a sqrt(1 - Q/(mu_f F))`,
/// `e = sgn(Q) a sigma_ax/(4 mu_f p0)`.
pub fn hertz_constants(
    force: f64,
    pad_radius: f64,
    thickness: f64,
    sample: ElasticMaterial,
    pad: ElasticMaterial,
    mu_f: f64,
    tangential: f64,
    axial_stress: f64,
) -> Result<HertzConstants, ProblemError> {
    let e_star =
        1.0 / ((1.0 - sample.nu * sample.nu) / sample.e + (1.0 - pad.nu * pad.nu) / pad.e);
    let friction_capacity = mu_f * force;
    if tangential > friction_capacity {
        return Err(ProblemError::InvalidLoading {
            condition: format!(
                "tangential force exceeds the friction capacity: Q = {tangential} > mu_f * F = {friction_capacity}"
            ),
        });
    }
    let a = 2.0 * (force * pad_radius / (thickness * std::f64::consts::PI * e_star)).sqrt();
    let p0 = (force * e_star / (thickness * std::f64::consts::PI * pad_radius)).sqrt();
    let c = a * (1.0 - tangential / friction_capacity).sqrt();
    let e = tangential.signum() * a * axial_stress / (4.0 * mu_f * p0);
    let axial_ratio = (e.abs() + c) / a;
    let axial_ratio_printed = axial_stress / (4.0 * (1.0 - c / a));
    if axial_ratio > 1.0 {
        return Err(ProblemError::InvalidLoading {
            condition: format!(
                "axial stress too large: stick zone leaves the contact, (|e| + c)/a = {axial_ratio} > 1 \
                 (unit-bearing comparison evaluates to {axial_ratio_printed})"
            ),
        });
    }
    Ok(HertzConstants {
        a,
        p0,
        c,
        e,
        e_star,
        mu_f,
        axial_ratio,
        axial_ratio_printed,
    })
}

/// Normal and tangential surface tractions `(p, q)` at horizontal offset
/// `x` from the contact centre. `p` is the Hertz ellipse; `q` has a stick
/// zone `|x - e| < c` where the slip traction is partially cancelled.
pub fn contact_tractions(hz: &HertzConstants, x: f64) -> (f64, f64) {
    let ellipse = 1.0 - (x / hz.a) * (x / hz.a);
    if ellipse <= 0.0 {
        return (0.0, 0.0);
    }
    let p = hz.p0 * ellipse.sqrt();
    let q = if (x - hz.e).abs() < hz.c {
        let stick = 1.0 - ((x - hz.e) / hz.c) * ((x - hz.e) / hz.c);
        -hz.mu_f * hz.p0 * (ellipse.sqrt() - (hz.c / hz.a) * stick.sqrt())
    } else {
        -hz.mu_f * hz.p0 * ellipse.sqrt()
    };
    (p, q)
}

/// Plane-strain fretting benchmark: the lower symmetric half of a clamped
/// strip, loaded by pad tractions on top, axial traction on the right, and a
/// symmetry plane at the bottom. Corner nodes must be removed after
/// discretisation (`strip_corners`). Coordinates are millimetres, matching
/// [`FrettingSetup`]; displacements come out in millimetres.
///
/// The momentum balance and the traction data are both stated per unit shear
/// modulus: the same boundary-value problem, but the interior rows scale as
/// `1/h^2` instead of `mu/h^2`, which keeps them within a few orders of the
/// unit clamped rows and of the traction rows.
pub fn fretting_spec(
    setup: &FrettingSetup,
) -> Result<(ProblemSpec<2>, DomainShape<2>), ProblemError> {
    let hz = hertz_constants(
        setup.normal_force,
        setup.pad_radius,
        setup.thickness,
        setup.sample,
        setup.pad,
        setup.friction,
        setup.tangential_force,
        setup.axial_stress,
    )?;
    let mu = setup.sample.mu();
    let axial = setup.axial_stress / mu;
    let shape = DomainShape::SymmetryBox {
        min: pt([-setup.length / 2.0, -setup.width / 2.0]),
        max: pt([setup.length / 2.0, 0.0]),
    };
    let spec = ProblemSpec {
        name: "fretting",
        components: 2,
        interior: InteriorOp::NavierCauchy {
            lambda: setup.sample.lambda() / mu,
            mu: 1.0,
        },
        strip_corners: true,
        rhs: Box::new(|_| [0.0; 3]),
        dirichlet: Box::new(|_| [0.0; 3]),
        neumann: None,
        traction: Some(Box::new(move |x, n| {
            if n[1] > 0.5 {
                // Top surface under the pad.
                let (p, q) = contact_tractions(&hz, x[0]);
                [q / mu, -p / mu, 0.0]
            } else if n[0] > 0.5 {
                // Right edge carries the axial load.
                [axial, 0.0, 0.0]
            } else {
                [0.0; 3]
            }
        })),
        exact: None,
        classify: Box::new(|_x, n| {
            if n[0] < -0.5 {
                NodeType::Dirichlet
            } else if n[1] < -0.5 {
                NodeType::Symmetry
            } else {
                NodeType::Traction
            }
        }),
    };
    Ok((spec, shape))
}

// ---------------------------------------------------------------------------
// Concentrated normal load on an elastic half-space
// ---------------------------------------------------------------------------

/// Closed-form displacement for a concentrated normal force `p_load` at the
/// origin of a half-space, Cartesian components. Singular at the origin.
pub fn halfspace_displacement(p_load: f64, mat: ElasticMaterial, x: &Point<3>) -> [f64; 3] {
    let mu = mat.mu();
    let nu = mat.nu;
    let big_r = x.norm();
    let z = x[2];
    let c = p_load / (4.0 * std::f64::consts::PI * mu);
    let r2 = x[0] * x[0] + x[1] * x[1];
    let radial = if r2 == 0.0 {
        0.0
    } else {
        c * (z / big_r.powi(3) - (1.0 - 2.0 * nu) / (big_r * (z + big_r)))
    };
    let uz = c * (2.0 * (1.0 - nu) / big_r + z * z / big_r.powi(3));
    [x[0] * radial, x[1] * radial, uz]
}

/// Closed-form stress in cylindrical components
/// `(sigma_rr, sigma_tt, sigma_zz, sigma_rz)`; the shear components
/// `sigma_rt` and `sigma_tz` vanish identically.
pub fn halfspace_stress_cyl(p_load: f64, nu: f64, r: f64, z: f64) -> (f64, f64, f64, f64) {
    let big_r = (r * r + z * z).sqrt();
    let c = p_load / (2.0 * std::f64::consts::PI);
    let s_rr = c * ((1.0 - 2.0 * nu) / (big_r * (z + big_r)) - 3.0 * r * r * z / big_r.powi(5));
    let s_tt = c * (1.0 - 2.0 * nu) * (z / big_r.powi(3) - 1.0 / (big_r * (z + big_r)));
    let s_zz = -3.0 * p_load * z.powi(3) / (2.0 * std::f64::consts::PI * big_r.powi(5));
    let s_rz = -3.0 * p_load * r * z * z / (2.0 * std::f64::consts::PI * big_r.powi(5));
    (s_rr, s_tt, s_zz, s_rz)
}

/// Closed-form stress tensor in Cartesian components.
pub fn halfspace_stress(p_load: f64, nu: f64, x: &Point<3>) -> [[f64; 3]; 3] {
    let r = (x[0] * x[0] + x[1] * x[1]).sqrt();
    let (s_rr, s_tt, s_zz, s_rz) = halfspace_stress_cyl(p_load, nu, r, x[2]);
    let (ct, st) = if r == 0.0 {
        (1.0, 0.0)
    } else {
        (x[0] / r, x[1] / r)
    };
    let sxx = s_rr * ct * ct + s_tt * st * st;
    let syy = s_rr * st * st + s_tt * ct * ct;
    let sxy = (s_rr - s_tt) * st * ct;
    let sxz = s_rz * ct;
    let syz = s_rz * st;
    [
        [sxx, sxy, sxz],
        [sxy, syy, syz],
        [sxz, syz, s_zz],
    ]
}

/// Half-space benchmark restricted to the cube `[-1, -eps]^3`, away from
/// the load singularity at the origin. All faces carry Dirichlet data from
/// the closed form; the body force is zero.
pub fn boussinesq_spec(
    p_load: f64,
    mat: ElasticMaterial,
    eps: f64,
) -> (ProblemSpec<3>, DomainShape<3>) {
    assert!(eps > 0.0);
    let shape = DomainShape::Box {
        min: pt([-1.0, -1.0, -1.0]),
        max: pt([-eps, -eps, -eps]),
    };
    let exact = move |x: &Point<3>| halfspace_displacement(p_load, mat, x);
    let spec = ProblemSpec {
        name: "boussinesq",
        components: 3,
        interior: InteriorOp::NavierCauchy {
            lambda: mat.lambda(),
            mu: mat.mu(),
        },
        strip_corners: false,
        rhs: Box::new(|_| [0.0; 3]),
        dirichlet: Box::new(move |x| exact(x)),
        neumann: None,
        traction: None,
        exact: Some(Box::new(move |x| exact(x))),
        classify: Box::new(|_, _| NodeType::Dirichlet),
    };
    (spec, shape)
}

/// Default half-space setup: P = -1, E = 1, nu = 0.33, eps = 0.1.
pub fn boussinesq_default() -> (ProblemSpec<3>, DomainShape<3>) {
    boussinesq_spec(-1.0, ElasticMaterial::new(1.0, 0.33), 0.1)
}

// ---------------------------------------------------------------------------
// Elasticity post-processing
// ---------------------------------------------------------------------------

/// Nodal stress tensors and the von Mises invariant. 2D inputs are treated
/// as plane strain, which fixes the out-of-plane normal stress.
pub struct StressField {
    /// Full 3x3 symmetric stress tensor per node.
    pub sigma: Vec<[[f64; 3]; 3]>,
    pub von_mises: Vec<f64>,
}

/// Von Mises invariant of a full stress tensor.
pub fn von_mises(s: &[[f64; 3]; 3]) -> f64 {
    let tr = (s[0][0] + s[1][1] + s[2][2]) / 3.0;
    let mut dev2 = 0.0;
    for a in 0..3 {
        for b in 0..3 {
            let d = s[a][b] - if a == b { tr } else { 0.0 };
            dev2 += d * d;
        }
    }
    (1.5 * dev2).sqrt()
}

/// Stress recovery from a displacement field: strains from the discrete
/// gradient operators, stress via the isotropic Hooke law.
pub fn stress_and_vonmises<const D: usize>(
    nodes: &NodeSet<D>,
    displacement: &[f64],
    ws: &WeightSet<D>,
    mat: ElasticMaterial,
) -> Result<StressField, ProblemError> {
    assert_eq!(displacement.len(), nodes.len() * D);
    let d1: Vec<usize> = (0..D)
        .map(|a| {
            ws.op_index(Operator::D1(a))
                .ok_or(ProblemError::MissingOperator("first-derivative"))
        })
        .collect::<Result<_, _>>()?;
    let (lambda, mu) = (mat.lambda(), mat.mu());

    let mut sigma = Vec::with_capacity(nodes.len());
    let mut vm = Vec::with_capacity(nodes.len());
    for i in 0..nodes.len() {
        // grad[a][b] = d u_a / d x_b.
        let mut grad = [[0.0; 3]; 3];
        for b in 0..D {
            for (&j, &w) in ws.stencil(i).iter().zip(ws.weights(i, d1[b])) {
                for a in 0..D {
                    grad[a][b] += w * displacement[j as usize * D + a];
                }
            }
        }
        let mut s = [[0.0; 3]; 3];
        let mut tr = 0.0;
        for a in 0..D {
            tr += grad[a][a];
        }
        for a in 0..D {
            for b in 0..D {
                let eps_ab = 0.5 * (grad[a][b] + grad[b][a]);
                s[a][b] = lambda * tr * if a == b { 1.0 } else { 0.0 } + 2.0 * mu * eps_ab;
            }
        }
        if D == 2 {
            // Plane strain: eps_zz = 0, so sigma_zz = lambda tr(eps).
            s[2][2] = lambda * tr;
        }
        vm.push(von_mises(&s));
        sigma.push(s);
    }
    Ok(StressField {
        sigma,
        von_mises: vm,
    })
}

// ---------------------------------------------------------------------------
// Error norms and reference comparison
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorNorms {
    pub l1: f64,
    pub l2: f64,
    pub linf: f64,
}

/// Relative l1/l2/l-infinity error of `numeric` against `exact`.
pub fn error_norms(numeric: &[f64], exact: &[f64]) -> Result<ErrorNorms, ProblemError> {
    assert_eq!(numeric.len(), exact.len());
    let mut d1 = 0.0;
    let mut d2 = 0.0;
    let mut dinf: f64 = 0.0;
    let mut n1 = 0.0;
    let mut n2 = 0.0;
    let mut ninf: f64 = 0.0;
    for (&a, &b) in numeric.iter().zip(exact) {
        let d = a - b;
        d1 += d.abs();
        d2 += d * d;
        dinf = dinf.max(d.abs());
        n1 += b.abs();
        n2 += b * b;
        ninf = ninf.max(b.abs());
    }
    if ninf == 0.0 {
        return Err(ProblemError::ZeroExactNorm);
    }
    Ok(ErrorNorms {
        l1: d1 / n1,
        l2: d2.sqrt() / n2.sqrt(),
        linf: dinf / ninf,
    })
}

/// Externally supplied surface-traction curve `(x, sigma_xx)`, stored in SI
/// after conversion from the mm/MPa CSV columns.
#[derive(Debug, Clone)]
pub struct ReferenceCurve {
    pub x: Vec<f64>,
    pub sigma_xx: Vec<f64>,
}

/// Parse a reference CSV with header `x,sigma_xx`, x in mm and stress in
/// MPa.
pub fn read_reference_csv<R: BufRead>(r: R) -> Result<ReferenceCurve, ProblemError> {
    let bad = |m: String| ProblemError::BadReference(m);
    let mut lines = r.lines();
    let header = lines
        .next()
        .ok_or_else(|| bad("empty file".into()))?
        .map_err(|e| bad(e.to_string()))?;
    if header.trim() != "x,sigma_xx" {
        return Err(bad(format!("unexpected header {header:?}")));
    }
    let mut x = Vec::new();
    let mut s = Vec::new();
    for (ln, line) in lines.enumerate() {
        let line = line.map_err(|e| bad(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut cols = line.split(',');
        let msg = |e: std::num::ParseFloatError| bad(format!("line {}: {e}", ln + 2));
        let xv: f64 = cols
            .next()
            .ok_or_else(|| bad(format!("line {}: missing x", ln + 2)))?
            .parse()
            .map_err(msg)?;
        let sv: f64 = cols
            .next()
            .ok_or_else(|| bad(format!("line {}: missing sigma_xx", ln + 2)))?
            .parse()
            .map_err(msg)?;
        x.push(xv * 1e-3);
        s.push(sv * 1e6);
    }
    Ok(ReferenceCurve { x, sigma_xx: s })
}

/// Interpolate a surface curve onto target abscissae with 2-neighbour
/// inverse-distance weighting.
pub fn interp_surface(surf_x: &[f64], surf_v: &[f64], targets: &[f64]) -> Vec<f64> {
    assert_eq!(surf_x.len(), surf_v.len());
    let pts: Vec<Point<1>> = surf_x.iter().map(|&x| pt([x])).collect();
    let tree = KdTree::build(&pts);
    targets
        .iter()
        .map(|&t| crate::spatial::shepard_query(&tree, surf_v, &pt([t]), 2, 2))
        .collect()
}

/// Mean absolute difference between a computed surface curve and the
/// reference, restricted to the contact area `|x| <= a`. The computed curve
/// is interpolated onto the reference abscissae.
pub fn mean_abs_diff_under_contact(
    reference: &ReferenceCurve,
    surf_x: &[f64],
    surf_v: &[f64],
    a: f64,
) -> f64 {
    let interp = interp_surface(surf_x, surf_v, &reference.x);
    let mut sum = 0.0;
    let mut count = 0usize;
    for (i, &x) in reference.x.iter().enumerate() {
        if x.abs() <= a {
            sum += (interp[i] - reference.sigma_xx[i]).abs();
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}
