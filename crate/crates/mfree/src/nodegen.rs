//! Variable-density node clouds for collocation.
//!
//! Domains are filled boundary-first: boundary curves/surfaces are walked
//! with the local spacing `h`, then the interior grows from those seeds by
//! Poisson-disc advancing-front expansion. Each dequeued node proposes
//! [`CANDIDATES_PER_NODE`] points on the sphere of radius `h` around
//! itself; a candidate survives if it lies strictly inside the domain and
//! no existing node sits closer than [`MIN_SPACING_FACTOR`] times the
//! spacing at the candidate. The procedure is sequential and fully
//! deterministic for a fixed `(shape, spacing, seed)` triple.

use crate::spatial::{shepard_query, KdTree};
use crate::Point;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::collections::VecDeque;
use std::io::{BufRead, Write};

/// Candidate points proposed around each expansion node.
pub const CANDIDATES_PER_NODE: usize = 15;
/// A candidate is rejected if an existing node is closer than this factor
/// times the local spacing.
pub const MIN_SPACING_FACTOR: f64 = 0.7;
/// Neighbour count for Shepard queries of scattered spacing fields.
pub const SPACING_NEIGHBORS: usize = 30;
/// Neighbour count for Shepard queries of scattered order fields.
pub const ORDER_NEIGHBORS: usize = 3;
/// Inverse-distance power shared by all Shepard queries.
pub const SHEPARD_POWER: i32 = 2;

#[derive(Debug, thiserror::Error)]
pub enum NodeGenError {
    #[error("node generation exceeded the cap of {cap} nodes; the spacing field is too fine for the domain")]
    GenerationOverflow { cap: usize },
    #[error("requested {requested} nearest neighbors but only {available} nodes exist")]
    InsufficientNodes { requested: usize, available: usize },
    #[error("unsupported shape in {dim} dimensions: {what}")]
    UnsupportedShape { what: String, dim: usize },
    #[error("bad node CSV: {0}")]
    BadCsv(String),
}

/// Role of a node in the discretised problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NodeType {
    Interior,
    Dirichlet,
    Neumann,
    Traction,
    Symmetry,
}

impl NodeType {
    pub fn is_boundary(self) -> bool {
        !matches!(self, NodeType::Interior)
    }

    pub fn label(self) -> &'static str {
        match self {
            NodeType::Interior => "interior",
            NodeType::Dirichlet => "dirichlet",
            NodeType::Neumann => "neumann",
            NodeType::Traction => "traction",
            NodeType::Symmetry => "symmetry",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "interior" => NodeType::Interior,
            "dirichlet" => NodeType::Dirichlet,
            "neumann" => NodeType::Neumann,
            "traction" => NodeType::Traction,
            "symmetry" => NodeType::Symmetry,
            _ => return None,
        })
    }
}

/// Target internodal spacing as a field over the domain.
///
/// Scattered carriers answer queries by Shepard interpolation over the
/// [`SPACING_NEIGHBORS`] nearest carrier points, clamped from above by a cap.
#[derive(Debug, Clone)]
pub enum SpacingField<const D: usize> {
    Constant(f64),
    Scattered {
        tree: KdTree<D>,
        values: Vec<f64>,
        cap: f64,
    },
}

impl<const D: usize> SpacingField<D> {
    pub fn constant(h: f64) -> Self {
        assert!(h > 0.0 && h.is_finite(), "spacing must be positive");
        SpacingField::Constant(h)
    }

    pub fn scattered(points: &[Point<D>], values: Vec<f64>, cap: f64) -> Self {
        assert_eq!(points.len(), values.len());
        assert!(!points.is_empty(), "scattered spacing needs carrier points");
        assert!(values.iter().all(|&v| v > 0.0 && v.is_finite()));
        assert!(cap > 0.0);
        SpacingField::Scattered {
            tree: KdTree::build(points),
            values,
            cap,
        }
    }

    pub fn query(&self, x: &Point<D>) -> f64 {
        match self {
            SpacingField::Constant(h) => *h,
            SpacingField::Scattered { tree, values, cap } => {
                shepard_query(tree, values, x, SPACING_NEIGHBORS, SHEPARD_POWER).min(*cap)
            }
        }
    }

    /// Upper bound of the field, used to size spatial acceleration cells.
    pub fn max_value(&self) -> f64 {
        match self {
            SpacingField::Constant(h) => *h,
            SpacingField::Scattered { values, cap, .. } => {
                values.iter().cloned().fold(0.0, f64::max).min(*cap)
            }
        }
    }
}

/// Approximation order as a field over the domain. Queries of scattered
/// carriers blend with Shepard interpolation over [`ORDER_NEIGHBORS`]
/// points, then snap to the allowed order set.
#[derive(Debug, Clone)]
pub enum OrderField<const D: usize> {
    Constant(u32),
    Scattered {
        tree: KdTree<D>,
        values: Vec<f64>,
        allowed: Vec<u32>,
    },
}

impl<const D: usize> OrderField<D> {
    pub fn constant(m: u32) -> Self {
        OrderField::Constant(m)
    }

    pub fn scattered(points: &[Point<D>], orders: &[u32], allowed: Vec<u32>) -> Self {
        assert_eq!(points.len(), orders.len());
        assert!(!points.is_empty());
        assert!(!allowed.is_empty());
        OrderField::Scattered {
            tree: KdTree::build(points),
            values: orders.iter().map(|&m| m as f64).collect(),
            allowed,
        }
    }

    pub fn query(&self, x: &Point<D>) -> u32 {
        match self {
            OrderField::Constant(m) => *m,
            OrderField::Scattered {
                tree,
                values,
                allowed,
            } => snap_order(
                shepard_query(tree, values, x, ORDER_NEIGHBORS, SHEPARD_POWER),
                allowed,
            ),
        }
    }
}

/// Snap a real-valued order target to the allowed set: round to the nearest
/// integer first, then to the nearest allowed member, resolving ties upward.
/// Targets outside the set's range clamp to its extremes.
pub fn snap_order(target: f64, allowed: &[u32]) -> u32 {
    assert!(!allowed.is_empty(), "allowed order set must not be empty");
    let t = target.round();
    let mut best = allowed[0];
    let mut best_d = f64::INFINITY;
    for &a in allowed {
        let d = (a as f64 - t).abs();
        // `<=` prefers the later (larger) member on ties; `allowed` is ascending.
        if d <= best_d {
            best_d = d;
            best = a;
        }
    }
    best
}

/// Geometry of the computational domain.
#[derive(Debug, Clone)]
pub enum DomainShape<const D: usize> {
    /// Disc in the plane (supported for `D = 2`).
    Disc { center: Point<D>, radius: f64 },
    /// Axis-aligned box (a rectangle for `D = 2`).
    Box { min: Point<D>, max: Point<D> },
    /// Axis-aligned box whose lower face along the last axis lies on a
    /// symmetry plane of the full model. Node placement is identical to
    /// `Box`; the tag lets problem definitions assign symmetry conditions.
    SymmetryBox { min: Point<D>, max: Point<D> },
}

impl<const D: usize> DomainShape<D> {
    /// Strict interior test.
    pub fn contains(&self, x: &Point<D>) -> bool {
        match self {
            DomainShape::Disc { center, radius } => {
                (x - center).norm_squared() < radius * radius
            }
            DomainShape::Box { min, max } | DomainShape::SymmetryBox { min, max } => {
                (0..D).all(|a| min[a] < x[a] && x[a] < max[a])
            }
        }
    }

    /// Geometric corner points; empty for smooth shapes.
    pub fn corners(&self) -> Vec<Point<D>> {
        match self {
            DomainShape::Disc { .. } => Vec::new(),
            DomainShape::Box { min, max } | DomainShape::SymmetryBox { min, max } => {
                (0..(1usize << D))
                    .map(|mask| {
                        let mut p = Point::<D>::zeros();
                        for a in 0..D {
                            p[a] = if mask >> a & 1 == 1 { max[a] } else { min[a] };
                        }
                        p
                    })
                    .collect()
            }
        }
    }

}

/// A discretised domain: positions with per-node type, outward normal
/// (boundary nodes only), spacing and approximation order.
///
/// Positions are immutable after construction so the embedded k-d tree
/// stays valid; types and orders may be retagged in place.
#[derive(Debug, Clone)]
pub struct NodeSet<const D: usize> {
    positions: Vec<Point<D>>,
    types: Vec<NodeType>,
    normals: Vec<Option<Point<D>>>,
    h: Vec<f64>,
    m: Vec<u32>,
    tree: KdTree<D>,
}

impl<const D: usize> NodeSet<D> {
    pub fn new(
        positions: Vec<Point<D>>,
        types: Vec<NodeType>,
        normals: Vec<Option<Point<D>>>,
        h: Vec<f64>,
        m: Vec<u32>,
    ) -> Self {
        assert_eq!(positions.len(), types.len());
        assert_eq!(positions.len(), normals.len());
        assert_eq!(positions.len(), h.len());
        assert_eq!(positions.len(), m.len());
        let tree = KdTree::build(&positions);
        NodeSet {
            positions,
            types,
            normals,
            h,
            m,
            tree,
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[Point<D>] {
        &self.positions
    }

    pub fn position(&self, i: usize) -> &Point<D> {
        &self.positions[i]
    }

    pub fn node_type(&self, i: usize) -> NodeType {
        self.types[i]
    }

    pub fn types(&self) -> &[NodeType] {
        &self.types
    }

    pub fn set_node_type(&mut self, i: usize, t: NodeType) {
        self.types[i] = t;
    }

    pub fn normal(&self, i: usize) -> Option<&Point<D>> {
        self.normals[i].as_ref()
    }

    pub fn spacing(&self) -> &[f64] {
        &self.h
    }

    pub fn spacing_at(&self, i: usize) -> f64 {
        self.h[i]
    }

    pub fn orders(&self) -> &[u32] {
        &self.m
    }

    pub fn order_at(&self, i: usize) -> u32 {
        self.m[i]
    }

    pub fn set_order(&mut self, i: usize, m: u32) {
        self.m[i] = m;
    }

    /// Sample an order field at every node position.
    pub fn assign_orders(&mut self, field: &OrderField<D>) {
        for i in 0..self.len() {
            self.m[i] = field.query(&self.positions[i]);
        }
    }

    /// Copy of this cloud with every order raised by `delta`.
    pub fn with_bumped_orders(&self, delta: u32) -> Self {
        let mut out = self.clone();
        for m in &mut out.m {
            *m += delta;
        }
        out
    }

    pub fn tree(&self) -> &KdTree<D> {
        &self.tree
    }

    pub fn count_boundary(&self) -> usize {
        self.types.iter().filter(|t| t.is_boundary()).count()
    }

    /// Indices of the `n` nodes nearest to `x`, ordered by `(distance, index)`.
    pub fn nearest_neighbors(&self, x: &Point<D>, n: usize) -> Result<Vec<usize>, NodeGenError> {
        if n > self.len() {
            return Err(NodeGenError::InsufficientNodes {
                requested: n,
                available: self.len(),
            });
        }
        Ok(self.tree.knn(x, n).into_iter().map(|(i, _)| i).collect())
    }

    /// Test-support validation of structural invariants.
    pub fn validate(&self) -> Result<(), String> {
        for i in 0..self.len() {
            if self.types[i].is_boundary() {
                let n = self.normals[i].ok_or(format!("boundary node {i} lacks a normal"))?;
                if (n.norm() - 1.0).abs() > 1e-12 {
                    return Err(format!("node {i} normal not unit: |n| = {}", n.norm()));
                }
            }
            if !(self.h[i] > 0.0) {
                return Err(format!("node {i} has nonpositive spacing"));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Proximity grid: dyadic hierarchy of uniform hash grids. A node inserts at
// the level whose cell size tracks its own spacing, so occupancy per cell is
// bounded even for strongly graded fields. Queries scan every populated
// level; per level the scan covers the cells overlapping the query ball or,
// if fewer, the occupied cells.
// ---------------------------------------------------------------------------

struct GridLevel<const D: usize> {
    cell: f64,
    map: HashMap<[i64; D], Vec<u32>>,
}

struct ProximityGrid<const D: usize> {
    base: f64,
    levels: Vec<GridLevel<D>>,
    pts: Vec<Point<D>>,
}

impl<const D: usize> ProximityGrid<D> {
    fn new(base: f64) -> Self {
        assert!(base > 0.0 && base.is_finite());
        ProximityGrid {
            base,
            levels: Vec::new(),
            pts: Vec::new(),
        }
    }

    fn level_for(&self, h: f64) -> usize {
        let ratio = self.base / h.max(1e-300);
        let l = ratio.log2().ceil() as i64;
        l.clamp(0, 48) as usize
    }

    fn key(p: &Point<D>, cell: f64) -> [i64; D] {
        let mut k = [0i64; D];
        for a in 0..D {
            k[a] = (p[a] / cell).floor() as i64;
        }
        k
    }

    fn insert(&mut self, p: Point<D>, h: f64) {
        let l = self.level_for(h);
        while self.levels.len() <= l {
            let cell = self.base / (1u64 << self.levels.len().min(62)) as f64;
            self.levels.push(GridLevel {
                cell,
                map: HashMap::new(),
            });
        }
        let idx = self.pts.len() as u32;
        self.pts.push(p);
        let cell = self.levels[l].cell;
        self.levels[l]
            .map
            .entry(Self::key(&p, cell))
            .or_default()
            .push(idx);
    }

    /// Is any stored point strictly closer than `r` to `q`?
    fn any_within(&self, q: &Point<D>, r: f64) -> bool {
        let r2 = r * r;
        for level in &self.levels {
            if level.map.is_empty() {
                continue;
            }
            let cell = level.cell;
            let mut lo = [0i64; D];
            let mut hi = [0i64; D];
            let mut range: u128 = 1;
            for a in 0..D {
                lo[a] = ((q[a] - r) / cell).floor() as i64;
                hi[a] = ((q[a] + r) / cell).floor() as i64;
                range = range.saturating_mul((hi[a] - lo[a] + 1) as u128);
            }
            if range <= level.map.len() as u128 {
                let mut key = lo;
                'cells: loop {
                    if let Some(ids) = level.map.get(&key) {
                        for &i in ids {
                            if (self.pts[i as usize] - q).norm_squared() < r2 {
                                return true;
                            }
                        }
                    }
                    let mut a = 0;
                    loop {
                        key[a] += 1;
                        if key[a] <= hi[a] {
                            break;
                        }
                        key[a] = lo[a];
                        a += 1;
                        if a == D {
                            break 'cells;
                        }
                    }
                }
            } else {
                for (key, ids) in &level.map {
                    if (0..D).all(|a| lo[a] <= key[a] && key[a] <= hi[a]) {
                        for &i in ids {
                            if (self.pts[i as usize] - q).norm_squared() < r2 {
                                return true;
                            }
                        }
                    }
                }
            }
        }
        false
    }
}

// ---------------------------------------------------------------------------
// Fill
// ---------------------------------------------------------------------------

struct Fill<'a, const D: usize> {
    spacing: &'a SpacingField<D>,
    grid: ProximityGrid<D>,
    positions: Vec<Point<D>>,
    normals: Vec<Option<Point<D>>>,
    h: Vec<f64>,
    cap: usize,
}

impl<'a, const D: usize> Fill<'a, D> {
    fn new(spacing: &'a SpacingField<D>, cap: usize) -> Self {
        let base = (2.0 * spacing.max_value()).max(1e-12);
        Fill {
            spacing,
            grid: ProximityGrid::new(base),
            positions: Vec::new(),
            normals: Vec::new(),
            h: Vec::new(),
            cap,
        }
    }

    /// Insert without a proximity check (boundary marching controls its own
    /// spacing). Still enforces the generation cap.
    fn insert(
        &mut self,
        p: Point<D>,
        h: f64,
        normal: Option<Point<D>>,
    ) -> Result<usize, NodeGenError> {
        if self.positions.len() >= self.cap {
            return Err(NodeGenError::GenerationOverflow { cap: self.cap });
        }
        self.grid.insert(p, h);
        self.positions.push(p);
        self.normals.push(normal);
        self.h.push(h);
        Ok(self.positions.len() - 1)
    }

    /// Proximity-checked insertion; `Ok(None)` means the candidate was
    /// rejected by an existing node.
    fn try_insert(
        &mut self,
        p: Point<D>,
        normal: Option<Point<D>>,
    ) -> Result<Option<usize>, NodeGenError> {
        let h = self.spacing.query(&p);
        if self.grid.any_within(&p, MIN_SPACING_FACTOR * h) {
            return Ok(None);
        }
        self.insert(p, h, normal).map(Some)
    }
}

/// Interior breakpoints of a segment of length `len`, walked with the local
/// step `local_h(arclength)` and rescaled so steps divide `len` evenly.
fn walk_breakpoints(
    len: f64,
    cap: usize,
    mut local_h: impl FnMut(f64) -> f64,
) -> Result<Vec<f64>, NodeGenError> {
    let mut ts = Vec::new();
    let mut t = 0.0;
    loop {
        let step = local_h(t).max(1e-300);
        if t + step >= len - 0.5 * step {
            let scale = len / (t + step);
            for v in &mut ts {
                *v *= scale;
            }
            return Ok(ts);
        }
        t += step;
        ts.push(t);
        if ts.len() > cap {
            return Err(NodeGenError::GenerationOverflow { cap });
        }
    }
}

/// Breakpoints along a closed loop of length `circ`, starting at 0 and
/// rescaled so the wrap-around gap matches the local step.
fn walk_loop(
    circ: f64,
    cap: usize,
    mut local_h: impl FnMut(f64) -> f64,
) -> Result<Vec<f64>, NodeGenError> {
    let mut ts = vec![0.0];
    let mut t = 0.0;
    loop {
        let step = local_h(t).max(1e-300);
        if t + step >= circ - 0.5 * step {
            let scale = circ / (t + step);
            for v in &mut ts {
                *v *= scale;
            }
            return Ok(ts);
        }
        t += step;
        ts.push(t);
        if ts.len() > cap {
            return Err(NodeGenError::GenerationOverflow { cap });
        }
    }
}

fn axis_unit<const D: usize>(axis: usize, sign: f64) -> Point<D> {
    let mut u = Point::<D>::zeros();
    u[axis] = sign;
    u
}

fn random_unit<const D: usize>(rng: &mut ChaCha8Rng) -> Point<D> {
    loop {
        let mut v = Point::<D>::zeros();
        for a in 0..D {
            v[a] = rng.gen_range(-1.0..1.0);
        }
        let n2 = v.norm_squared();
        if n2 > 1e-4 && n2 <= 1.0 {
            return v / n2.sqrt();
        }
    }
}

/// Discretise a domain with the advancing-front fill.
///
/// Boundary entities are placed first (corners, then edges, then faces),
/// after which the interior grows from all boundary nodes. `node_cap`
/// bounds the total count; exceeding it aborts with
/// [`NodeGenError::GenerationOverflow`]. Boundary nodes are tagged
/// [`NodeType::Dirichlet`] as a neutral default, interior nodes
/// [`NodeType::Interior`]; problem definitions retag the boundary.
pub fn fill_domain<const D: usize>(
    shape: &DomainShape<D>,
    spacing: &SpacingField<D>,
    seed: u64,
    node_cap: usize,
) -> Result<NodeSet<D>, NodeGenError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fill = Fill::new(spacing, node_cap);

    match shape {
        DomainShape::Disc { center, radius } => {
            if D != 2 {
                return Err(NodeGenError::UnsupportedShape {
                    what: "disc".into(),
                    dim: D,
                });
            }
            fill_circle_boundary(&mut fill, center, *radius)?;
        }
        DomainShape::Box { min, max } | DomainShape::SymmetryBox { min, max } => match D {
            2 => fill_rect_boundary(&mut fill, min, max)?,
            3 => fill_box_boundary(&mut fill, min, max, &mut rng)?,
            _ => {
                return Err(NodeGenError::UnsupportedShape {
                    what: "box".into(),
                    dim: D,
                })
            }
        },
    }

    // Interior: expand from every boundary node in insertion order.
    let mut queue: VecDeque<usize> = (0..fill.positions.len()).collect();
    while let Some(i) = queue.pop_front() {
        let p = fill.positions[i];
        let hp = fill.h[i];
        for _ in 0..CANDIDATES_PER_NODE {
            let dir = random_unit::<D>(&mut rng);
            let cand = p + dir * hp;
            if !shape.contains(&cand) {
                continue;
            }
            if let Some(j) = fill.try_insert(cand, None)? {
                queue.push_back(j);
            }
        }
    }

    let n = fill.positions.len();
    let types = fill
        .normals
        .iter()
        .map(|nrm| {
            if nrm.is_some() {
                NodeType::Dirichlet
            } else {
                NodeType::Interior
            }
        })
        .collect();
    Ok(NodeSet::new(
        fill.positions,
        types,
        fill.normals,
        fill.h,
        vec![2; n],
    ))
}

fn fill_circle_boundary<const D: usize>(
    fill: &mut Fill<D>,
    center: &Point<D>,
    radius: f64,
) -> Result<(), NodeGenError> {
    let circ = std::f64::consts::TAU * radius;
    let cap = fill.cap;
    let spacing = fill.spacing;
    let at = |t: f64| {
        let th = t / radius;
        let mut p = *center;
        p[0] += radius * th.cos();
        p[1] += radius * th.sin();
        p
    };
    let ts = walk_loop(circ, cap, |t| spacing.query(&at(t)))?;
    for t in ts {
        let th = t / radius;
        let mut normal = Point::<D>::zeros();
        normal[0] = th.cos();
        normal[1] = th.sin();
        let p = at(t);
        let h = fill.spacing.query(&p);
        fill.insert(p, h, Some(normal))?;
    }
    Ok(())
}

/// Corner points with diagonal outward normals.
fn insert_corners<const D: usize>(
    fill: &mut Fill<D>,
    min: &Point<D>,
    max: &Point<D>,
) -> Result<(), NodeGenError> {
    let inv = 1.0 / (D as f64).sqrt();
    for mask in 0..(1usize << D) {
        let mut p = Point::<D>::zeros();
        let mut n = Point::<D>::zeros();
        for a in 0..D {
            let hi = mask >> a & 1 == 1;
            p[a] = if hi { max[a] } else { min[a] };
            n[a] = if hi { inv } else { -inv };
        }
        let h = fill.spacing.query(&p);
        fill.insert(p, h, Some(n))?;
    }
    Ok(())
}

/// March one straight edge from `a` to `b` (endpoints excluded).
fn march_edge<const D: usize>(
    fill: &mut Fill<D>,
    a: &Point<D>,
    b: &Point<D>,
    normal: Point<D>,
) -> Result<(), NodeGenError> {
    let len = (b - a).norm();
    let dir = (b - a) / len;
    let cap = fill.cap;
    let spacing = fill.spacing;
    let ts = walk_breakpoints(len, cap, |t| spacing.query(&(a + dir * t)))?;
    for t in ts {
        let p = a + dir * t;
        let h = fill.spacing.query(&p);
        fill.insert(p, h, Some(normal))?;
    }
    Ok(())
}

fn fill_rect_boundary<const D: usize>(
    fill: &mut Fill<D>,
    min: &Point<D>,
    max: &Point<D>,
) -> Result<(), NodeGenError> {
    insert_corners(fill, min, max)?;
    // Four edges; the fixed coordinate is taken verbatim from the bounds so
    // that boundary nodes compare exactly equal to the edge line.
    for edge_axis in 0..2 {
        let fixed = 1 - edge_axis;
        for (side, sign) in [(min, -1.0), (max, 1.0)] {
            let mut a = *min;
            let mut b = *max;
            a[fixed] = side[fixed];
            b[fixed] = side[fixed];
            march_edge(fill, &a, &b, axis_unit(fixed, sign))?;
        }
    }
    Ok(())
}

fn fill_box_boundary<const D: usize>(
    fill: &mut Fill<D>,
    min: &Point<D>,
    max: &Point<D>,
    rng: &mut ChaCha8Rng,
) -> Result<(), NodeGenError> {
    insert_corners(fill, min, max)?;

    // Twelve edges: two fixed axes, one varying.
    let inv2 = 1.0 / 2f64.sqrt();
    for va in 0..3usize {
        let (fa, fb) = match va {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        for (sa, na) in [(min, -inv2), (max, inv2)] {
            for (sb, nb) in [(min, -inv2), (max, inv2)] {
                let mut a = *min;
                let mut b = *max;
                a[fa] = sa[fa];
                b[fa] = sa[fa];
                a[fb] = sb[fb];
                b[fb] = sb[fb];
                let mut normal = Point::<D>::zeros();
                normal[fa] = na;
                normal[fb] = nb;
                march_edge(fill, &a, &b, normal)?;
            }
        }
    }

    // Six faces, filled by a planar advancing front seeded from the nodes
    // already lying on the face plane.
    for ax in 0..3usize {
        let (f1, f2) = match ax {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        for (side, sign) in [(min, -1.0), (max, 1.0)] {
            let plane = side[ax];
            let normal = axis_unit::<D>(ax, sign);
            let mut queue: VecDeque<usize> = (0..fill.positions.len())
                .filter(|&i| fill.positions[i][ax] == plane)
                .collect();
            while let Some(i) = queue.pop_front() {
                let p = fill.positions[i];
                let hp = fill.h[i];
                for _ in 0..CANDIDATES_PER_NODE {
                    let th = rng.gen_range(0.0..std::f64::consts::TAU);
                    let mut cand = p;
                    cand[f1] += hp * th.cos();
                    cand[f2] += hp * th.sin();
                    let inside = min[f1] < cand[f1]
                        && cand[f1] < max[f1]
                        && min[f2] < cand[f2]
                        && cand[f2] < max[f2];
                    if !inside {
                        continue;
                    }
                    if let Some(j) = fill.try_insert(cand, Some(normal))? {
                        queue.push_back(j);
                    }
                }
            }
        }
    }
    Ok(())
}

/// Drop nodes coincident with geometric corners (within a quarter of their
/// own spacing). Shapes without corners pass through unchanged.
pub fn remove_corner_nodes<const D: usize>(
    nodes: &NodeSet<D>,
    shape: &DomainShape<D>,
) -> NodeSet<D> {
    let corners = shape.corners();
    if corners.is_empty() {
        return nodes.clone();
    }
    let mut positions = Vec::new();
    let mut types = Vec::new();
    let mut normals = Vec::new();
    let mut h = Vec::new();
    let mut m = Vec::new();
    for i in 0..nodes.len() {
        let p = nodes.position(i);
        let near_corner = corners
            .iter()
            .any(|c| (p - c).norm() < nodes.spacing_at(i) / 4.0);
        if near_corner {
            continue;
        }
        positions.push(*p);
        types.push(nodes.node_type(i));
        normals.push(nodes.normal(i).copied());
        h.push(nodes.spacing_at(i));
        m.push(nodes.order_at(i));
    }
    NodeSet::new(positions, types, normals, h, m)
}

// ---------------------------------------------------------------------------
// Node CSV: `x,y[,z],type,h,m,eta`, coordinates with 17 significant digits.
// ---------------------------------------------------------------------------

pub fn write_nodes_csv<const D: usize, W: Write>(
    w: &mut W,
    nodes: &NodeSet<D>,
    eta: Option<&[f64]>,
) -> std::io::Result<()> {
    match D {
        2 => writeln!(w, "x,y,type,h,m,eta")?,
        3 => writeln!(w, "x,y,z,type,h,m,eta")?,
        _ => unreachable!("unsupported dimension"),
    }
    for i in 0..nodes.len() {
        let p = nodes.position(i);
        for a in 0..D {
            write!(w, "{:.16e},", p[a])?;
        }
        writeln!(
            w,
            "{},{:.16e},{},{:.16e}",
            nodes.node_type(i).label(),
            nodes.spacing_at(i),
            nodes.order_at(i),
            eta.map_or(0.0, |e| e[i]),
        )?;
    }
    Ok(())
}

/// Parse a node CSV written by [`write_nodes_csv`]. Normals are not part of
/// the format and come back as `None`.
pub fn read_nodes_csv<const D: usize, R: BufRead>(
    r: R,
) -> Result<(NodeSet<D>, Vec<f64>), NodeGenError> {
    let bad = |msg: String| NodeGenError::BadCsv(msg);
    let mut lines = r.lines();
    let header = lines
        .next()
        .ok_or_else(|| bad("empty file".into()))?
        .map_err(|e| bad(e.to_string()))?;
    let expected = if D == 2 {
        "x,y,type,h,m,eta"
    } else {
        "x,y,z,type,h,m,eta"
    };
    if header.trim() != expected {
        return Err(bad(format!("unexpected header {header:?}")));
    }
    let mut positions = Vec::new();
    let mut types = Vec::new();
    let mut h = Vec::new();
    let mut m = Vec::new();
    let mut eta = Vec::new();
    for (ln, line) in lines.enumerate() {
        let line = line.map_err(|e| bad(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != D + 4 {
            return Err(bad(format!("line {}: expected {} columns", ln + 2, D + 4)));
        }
        let mut p = Point::<D>::zeros();
        for a in 0..D {
            p[a] = cols[a]
                .parse()
                .map_err(|e| bad(format!("line {}: {e}", ln + 2)))?;
        }
        positions.push(p);
        types.push(
            NodeType::parse(cols[D]).ok_or_else(|| bad(format!("line {}: bad type", ln + 2)))?,
        );
        h.push(
            cols[D + 1]
                .parse()
                .map_err(|e| bad(format!("line {}: {e}", ln + 2)))?,
        );
        m.push(
            cols[D + 2]
                .parse()
                .map_err(|e| bad(format!("line {}: {e}", ln + 2)))?,
        );
        eta.push(
            cols[D + 3]
                .parse()
                .map_err(|e| bad(format!("line {}: {e}", ln + 2)))?,
        );
    }
    let n = positions.len();
    Ok((
        NodeSet::new(positions, types, vec![None; n], h, m),
        eta,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pt;

    fn unit_disc() -> DomainShape<2> {
        DomainShape::Disc {
            center: pt([0.0, 0.0]),
            radius: 1.0,
        }
    }

    #[test]
    fn disc_fill_count_and_spacing() {
        let h = SpacingField::constant(0.1);
        let nodes = fill_domain(&unit_disc(), &h, 1, 100_000).unwrap();
        assert!(
            (250..=450).contains(&nodes.len()),
            "unexpected count {}",
            nodes.len()
        );
        // Pairwise minimum distance honours the rejection radius.
        let p = nodes.positions();
        let mut dmin = f64::INFINITY;
        for i in 0..p.len() {
            for j in i + 1..p.len() {
                dmin = dmin.min((p[i] - p[j]).norm());
            }
        }
        assert!(dmin >= 0.7 * 0.1 - 1e-12, "min distance {dmin}");
        nodes.validate().unwrap();
    }

    #[test]
    fn disc_fill_is_deterministic_per_seed() {
        let h = SpacingField::constant(0.08);
        let a = fill_domain(&unit_disc(), &h, 42, 100_000).unwrap();
        let b = fill_domain(&unit_disc(), &h, 42, 100_000).unwrap();
        assert_eq!(a.len(), b.len());
        for i in 0..a.len() {
            assert_eq!(a.position(i), b.position(i), "node {i} differs");
        }
        let c = fill_domain(&unit_disc(), &h, 43, 100_000).unwrap();
        let same = a.len() == c.len()
            && (0..a.len()).all(|i| a.position(i) == c.position(i));
        assert!(!same, "different seeds produced identical clouds");
    }

    #[test]
    fn disc_interior_coverage() {
        use rand::{Rng, SeedableRng};
        let h = 0.1;
        let nodes = fill_domain(&unit_disc(), &SpacingField::constant(h), 3, 100_000).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..2000 {
            let x = rng.gen_range(-1.0..1.0);
            let y = rng.gen_range(-1.0..1.0);
            let q = pt([x, y]);
            if q.norm() >= 1.0 {
                continue;
            }
            let (_, d) = nodes.tree().nearest(&q).unwrap();
            assert!(d <= 2.0 * h, "uncovered point {q:?} at distance {d}");
        }
    }

    #[test]
    fn coarse_box_3d() {
        let shape = DomainShape::Box {
            min: pt([0.0, 0.0, 0.0]),
            max: pt([1.0, 1.0, 1.0]),
        };
        let nodes = fill_domain(&shape, &SpacingField::constant(0.5), 5, 10_000).unwrap();
        assert!(nodes.len() >= 8, "at least the corners: {}", nodes.len());
        for i in 0..nodes.len() {
            let p = nodes.position(i);
            assert!((0..3).all(|a| p[a] >= -1e-12 && p[a] <= 1.0 + 1e-12));
        }
        nodes.validate().unwrap();
    }

    #[test]
    fn box_3d_fill_is_deterministic() {
        let shape = DomainShape::Box {
            min: pt([0.0, 0.0, 0.0]),
            max: pt([1.0, 1.0, 1.0]),
        };
        let h = SpacingField::constant(0.2);
        let a = fill_domain(&shape, &h, 11, 100_000).unwrap();
        let b = fill_domain(&shape, &h, 11, 100_000).unwrap();
        assert_eq!(a.len(), b.len());
        for i in 0..a.len() {
            assert_eq!(a.position(i), b.position(i));
        }
    }

    #[test]
    fn overflow_cap_is_enforced() {
        let err = fill_domain(&unit_disc(), &SpacingField::constant(0.01), 1, 500).unwrap_err();
        assert!(matches!(err, NodeGenError::GenerationOverflow { cap: 500 }));
    }

    #[test]
    fn corner_removal_rectangle() {
        let shape = DomainShape::SymmetryBox {
            min: pt([-1.0, -0.5]),
            max: pt([1.0, 0.0]),
        };
        let nodes = fill_domain(&shape, &SpacingField::constant(0.1), 2, 100_000).unwrap();
        let stripped = remove_corner_nodes(&nodes, &shape);
        assert_eq!(stripped.len(), nodes.len() - 4);
        for c in shape.corners() {
            for i in 0..stripped.len() {
                assert!((stripped.position(i) - c).norm() > 1e-9);
            }
        }
    }

    #[test]
    fn corner_removal_box_3d() {
        let shape = DomainShape::Box {
            min: pt([0.0, 0.0, 0.0]),
            max: pt([1.0, 1.0, 1.0]),
        };
        let nodes = fill_domain(&shape, &SpacingField::constant(0.25), 2, 100_000).unwrap();
        let stripped = remove_corner_nodes(&nodes, &shape);
        assert_eq!(stripped.len(), nodes.len() - 8);
    }

    #[test]
    fn corner_removal_noop_on_disc() {
        let nodes = fill_domain(&unit_disc(), &SpacingField::constant(0.2), 2, 100_000).unwrap();
        let stripped = remove_corner_nodes(&nodes, &unit_disc());
        assert_eq!(stripped.len(), nodes.len());
    }

    #[test]
    fn nearest_neighbors_contract() {
        let nodes = fill_domain(&unit_disc(), &SpacingField::constant(0.2), 7, 100_000).unwrap();
        let q = pt([0.1, 0.2]);
        let nn = nodes.nearest_neighbors(&q, 5).unwrap();
        assert_eq!(nn.len(), 5);
        // Sorted by distance.
        let d: Vec<f64> = nn.iter().map(|&i| (nodes.position(i) - q).norm()).collect();
        assert!(d.windows(2).all(|w| w[0] <= w[1]));
        let err = nodes.nearest_neighbors(&q, nodes.len() + 1).unwrap_err();
        assert!(matches!(err, NodeGenError::InsufficientNodes { .. }));
    }

    #[test]
    fn spacing_field_queries() {
        let f = SpacingField::<2>::constant(0.3);
        assert_eq!(f.query(&pt([5.0, 5.0])), 0.3);

        let pts = vec![pt([0.0, 0.0]), pt([1.0, 0.0])];
        let f = SpacingField::scattered(&pts, vec![0.1, 0.4], 0.25);
        // Exact hit reproduces the carrier value (below the cap).
        assert!((f.query(&pt([0.0, 0.0])) - 0.1).abs() < 1e-14);
        // Cap clamps from above.
        assert!((f.query(&pt([1.0, 0.0])) - 0.25).abs() < 1e-14);
        // Blends stay within the carrier hull.
        let v = f.query(&pt([0.5, 0.0]));
        assert!(v >= 0.1 && v <= 0.25);
    }

    #[test]
    fn order_snapping() {
        let allowed = [2u32, 4, 6, 8];
        assert_eq!(snap_order(2.2, &allowed), 2);
        assert_eq!(snap_order(3.0, &allowed), 4, "odd midpoints round up");
        assert_eq!(snap_order(5.0, &allowed), 6);
        assert_eq!(snap_order(1.0, &allowed), 2, "clamps to the smallest");
        assert_eq!(snap_order(11.0, &allowed), 8, "clamps to the largest");
        assert_eq!(snap_order(4.4, &allowed), 4);
    }

    #[test]
    fn nodes_csv_round_trip() {
        let nodes = fill_domain(&unit_disc(), &SpacingField::constant(0.25), 4, 10_000).unwrap();
        let eta: Vec<f64> = (0..nodes.len()).map(|i| i as f64 * 0.125).collect();
        let mut buf = Vec::new();
        write_nodes_csv(&mut buf, &nodes, Some(&eta)).unwrap();
        let (back, eta_back) = read_nodes_csv::<2, _>(std::io::Cursor::new(buf)).unwrap();
        assert_eq!(back.len(), nodes.len());
        for i in 0..nodes.len() {
            assert_eq!(back.position(i), nodes.position(i), "17 digits round-trip");
            assert_eq!(back.node_type(i), nodes.node_type(i));
            assert_eq!(back.order_at(i), nodes.order_at(i));
        }
        assert_eq!(eta, eta_back);
    }
}
