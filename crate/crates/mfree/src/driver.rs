//! Orchestration of the adaptive solve loop and of unrefined convergence
//! studies, plus the on-disk run directory that records per-iteration
//! diagnostics.
//!
//! One adaptive run repeats discretise -> solve -> indicate -> stop-check ->
//! adapt until the iteration budget is spent or the indicator maximum has
//! dropped far enough. Every iteration is recorded before the stop check so
//! a crashed or aborted run still leaves its full history behind.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::adapt::{
    adapt_targets, imex_indicator, stop_check, transfer_fields, AdaptivityParams, IndicatorField,
    IMEX_ORDER_BUMP, SOLVE_ORDERS,
};
use crate::approx::{self, build_operator_table};
use crate::nodegen::{fill_domain, DomainShape, NodeSet, OrderField, SpacingField};
use crate::problems::{error_norms, ErrorNorms, ProblemSpec};
use crate::spatial::KdTree;
use crate::system::{assemble, solve, SolverConfig};
use crate::Error;

/// Neighbors used when moving a solution between point clouds.
pub const WARM_START_NEIGHBORS: usize = 3;

/// Inverse-distance power for the warm-start transfer.
pub const WARM_START_POWER: i32 = 2;

#[derive(Debug, thiserror::Error)]
pub enum DriverError {
    /// A module error, tagged with the adaptive iteration it occurred in.
    #[error("iteration {iteration}: {source}")]
    Iteration {
        iteration: usize,
        #[source]
        source: Error,
    },
    #[error("convergence study requires a closed-form solution")]
    NoClosedForm,
    #[error("run directory: {0}")]
    Io(#[from] std::io::Error),
}

/// Everything worth keeping about one adaptive iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub node_count: usize,
    pub eta_max: f64,
    pub eta_min: f64,
    /// Relative error norms against the closed form, when one exists.
    pub errors: Option<ErrorNorms>,
    pub solver_iterations: usize,
    pub solver_residual: f64,
    pub t_discretise_ms: f64,
    pub t_weights_ms: f64,
    pub t_assemble_ms: f64,
    pub t_solve_ms: f64,
    pub t_indicate_ms: f64,
    pub h_min: f64,
    pub h_max: f64,
    /// Node counts per order, aligned with [`SOLVE_ORDERS`].
    pub order_histogram: [usize; SOLVE_ORDERS.len()],
}

impl IterationRecord {
    pub fn csv_header() -> &'static str {
        "iteration,n,eta_max,eta_min,e_l1,e_l2,e_linf,solver_iterations,solver_residual,\
         t_discretise_ms,t_weights_ms,t_assemble_ms,t_solve_ms,t_indicate_ms,h_min,h_max,\
         m2,m4,m6,m8"
    }

    pub fn to_csv_row(&self) -> String {
        let (e1, e2, einf) = match &self.errors {
            Some(e) => (
                format!("{:e}", e.l1),
                format!("{:e}", e.l2),
                format!("{:e}", e.linf),
            ),
            None => (String::new(), String::new(), String::new()),
        };
        let [m2, m4, m6, m8] = self.order_histogram;
        format!(
            "{},{},{:e},{:e},{e1},{e2},{einf},{},{:e},{:.3},{:.3},{:.3},{:.3},{:.3},{:e},{:e},{m2},{m4},{m6},{m8}",
            self.iteration,
            self.node_count,
            self.eta_max,
            self.eta_min,
            self.solver_iterations,
            self.solver_residual,
            self.t_discretise_ms,
            self.t_weights_ms,
            self.t_assemble_ms,
            self.t_solve_ms,
            self.t_indicate_ms,
            self.h_min,
            self.h_max,
        )
    }

    /// Inverse of [`IterationRecord::to_csv_row`].
    pub fn from_csv_row(row: &str) -> Result<IterationRecord, String> {
        let parts: Vec<&str> = row.split(',').collect();
        if parts.len() != 20 {
            return Err(format!("expected 20 fields, got {}", parts.len()));
        }
        fn num<T: std::str::FromStr>(parts: &[&str], i: usize) -> Result<T, String>
        where
            T::Err: std::fmt::Display,
        {
            parts[i]
                .parse()
                .map_err(|e| format!("field {i} ({}): {e}", parts[i]))
        }
        let errors = if parts[4].is_empty() {
            None
        } else {
            Some(ErrorNorms {
                l1: num(&parts, 4)?,
                l2: num(&parts, 5)?,
                linf: num(&parts, 6)?,
            })
        };
        Ok(IterationRecord {
            iteration: num(&parts, 0)?,
            node_count: num(&parts, 1)?,
            eta_max: num(&parts, 2)?,
            eta_min: num(&parts, 3)?,
            errors,
            solver_iterations: num(&parts, 7)?,
            solver_residual: num(&parts, 8)?,
            t_discretise_ms: num(&parts, 9)?,
            t_weights_ms: num(&parts, 10)?,
            t_assemble_ms: num(&parts, 11)?,
            t_solve_ms: num(&parts, 12)?,
            t_indicate_ms: num(&parts, 13)?,
            h_min: num(&parts, 14)?,
            h_max: num(&parts, 15)?,
            order_histogram: [
                num(&parts, 16)?,
                num(&parts, 17)?,
                num(&parts, 18)?,
                num(&parts, 19)?,
            ],
        })
    }
}

/// Parses a whole `records.csv`, header included.
pub fn parse_records_csv(text: &str) -> Result<Vec<IterationRecord>, String> {
    let mut lines = text.lines();
    let header = lines.next().ok_or("empty records file")?;
    if header != IterationRecord::csv_header() {
        return Err(format!("unexpected header: {header}"));
    }
    lines.map(IterationRecord::from_csv_row).collect()
}

/// Parses an `indicator_<iter>.csv` into `(iter, node_id, eta)` rows.
pub fn parse_indicator_csv(text: &str) -> Result<Vec<(usize, usize, f64)>, String> {
    let mut lines = text.lines();
    let header = lines.next().ok_or("empty indicator file")?;
    if header != "iter,node_id,eta" {
        return Err(format!("unexpected header: {header}"));
    }
    lines
        .map(|line| {
            let mut it = line.split(',');
            let mut next = || it.next().ok_or_else(|| format!("short row: {line}"));
            let i = next()?.parse().map_err(|e| format!("{line}: {e}"))?;
            let n = next()?.parse().map_err(|e| format!("{line}: {e}"))?;
            let eta = next()?.parse().map_err(|e| format!("{line}: {e}"))?;
            Ok((i, n, eta))
        })
        .collect()
}

/// Callback invoked after every completed iteration, before the stop check.
/// Implementations persist diagnostics; returning an error aborts the run.
pub trait RunObserver<const D: usize> {
    fn iteration_done(
        &mut self,
        record: &IterationRecord,
        nodes: &NodeSet<D>,
        indicator: &IndicatorField,
        solution: &[f64],
    ) -> Result<(), DriverError>;
}

/// Observer that keeps nothing.
pub struct NullObserver;

impl<const D: usize> RunObserver<D> for NullObserver {
    fn iteration_done(
        &mut self,
        _record: &IterationRecord,
        _nodes: &NodeSet<D>,
        _indicator: &IndicatorField,
        _solution: &[f64],
    ) -> Result<(), DriverError> {
        Ok(())
    }
}

/// Knobs of one adaptive run that are not adaptivity parameters.
#[derive(Debug, Clone)]
pub struct RunSettings {
    pub solver: SolverConfig,
    /// Base RNG seed; iteration `i` discretises with `seed + i`.
    pub seed: u64,
    /// Interpolate the previous solution onto the new cloud as the solver
    /// guess. The first solve is always cold.
    pub warm_start: bool,
    /// Hard bound on generated nodes per discretisation, independent of the
    /// adaptivity budget (which only suppresses further refinement).
    pub node_cap: usize,
    /// PHS radial exponent used when building the weight tables.
    pub phs_exponent: u32,
    /// Debug hook: when set, every assembled matrix is dumped to
    /// `matrix_<iter>.txt` (one `row col value` line per entry) in this
    /// directory.
    pub matrix_dump: Option<PathBuf>,
}

impl Default for RunSettings {
    fn default() -> Self {
        RunSettings {
            solver: SolverConfig::default(),
            seed: 0,
            warm_start: true,
            node_cap: 2_000_000,
            phs_exponent: approx::DEFAULT_PHS_EXPONENT,
            matrix_dump: None,
        }
    }
}

/// Result of one adaptive run: the reported solution with its cloud, the
/// full iteration history, and which iteration the solution came from.
#[derive(Debug)]
pub struct RunOutcome<const D: usize> {
    pub solution: Vec<f64>,
    pub nodes: NodeSet<D>,
    pub records: Vec<IterationRecord>,
    /// Iteration the returned solution belongs to: the smallest l-infinity
    /// error when a closed form exists, otherwise the last one.
    pub best_iteration: usize,
}

fn tag<E: Into<Error>>(iteration: usize) -> impl FnOnce(E) -> DriverError {
    move |e| DriverError::Iteration {
        iteration,
        source: e.into(),
    }
}

fn order_histogram<const D: usize>(nodes: &NodeSet<D>) -> [usize; SOLVE_ORDERS.len()] {
    let mut hist = [0usize; SOLVE_ORDERS.len()];
    for i in 0..nodes.len() {
        let m = nodes.order_at(i);
        let slot = SOLVE_ORDERS
            .iter()
            .position(|&a| a == m)
            .expect("node order outside the solver set");
        hist[slot] += 1;
    }
    hist
}

fn spacing_range<const D: usize>(nodes: &NodeSet<D>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = 0.0f64;
    for &h in nodes.spacing() {
        lo = lo.min(h);
        hi = hi.max(h);
    }
    (lo, hi)
}

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

/// Moves a solved field from one cloud to another, one component at a time,
/// with inverse-distance interpolation.
fn interpolate_solution<const D: usize>(
    old_nodes: &NodeSet<D>,
    old_solution: &[f64],
    new_nodes: &NodeSet<D>,
    ncomp: usize,
) -> Vec<f64> {
    assert_eq!(old_solution.len(), old_nodes.len() * ncomp);
    let tree = KdTree::build(old_nodes.positions());
    let mut out = vec![0.0; new_nodes.len() * ncomp];
    for c in 0..ncomp {
        let values: Vec<f64> = (0..old_nodes.len())
            .map(|i| old_solution[i * ncomp + c])
            .collect();
        for (j, p) in new_nodes.positions().iter().enumerate() {
            out[j * ncomp + c] = crate::spatial::shepard_query(
                &tree,
                &values,
                p,
                WARM_START_NEIGHBORS,
                WARM_START_POWER,
            );
        }
    }
    out
}

/// Runs the adaptive discretise/solve/indicate/adapt loop.
///
/// Iteration `i` discretises the domain from the current spacing and order
/// fields with seed `settings.seed + i`, solves the problem (warm-started
/// from the previous solution when enabled), evaluates the error indicator,
/// records diagnostics through `observer`, and checks the stop criterion
/// before adapting the fields for the next pass. `params.n_iter = 0`
/// degenerates to a single unrefined solve with one record.
///
/// The returned solution is the best-error iteration's when the problem has
/// a closed form, otherwise the final iteration's. Errors abort the run
/// tagged with the iteration they happened in; everything already recorded
/// through the observer survives.
pub fn adaptive_solve<const D: usize>(
    problem: &ProblemSpec<D>,
    shape: &DomainShape<D>,
    h0: &SpacingField<D>,
    m0: &OrderField<D>,
    params: &AdaptivityParams,
    settings: &RunSettings,
    observer: &mut dyn RunObserver<D>,
) -> Result<RunOutcome<D>, DriverError> {
    params.validate().map_err(tag(0))?;
    let ops = problem.required_ops();

    let mut h_field = h0.clone();
    let mut m_field = m0.clone();
    let mut previous: Option<(NodeSet<D>, Vec<f64>)> = None;
    let mut best: Option<(f64, usize, NodeSet<D>, Vec<f64>)> = None;
    let mut records: Vec<IterationRecord> = Vec::new();
    let mut eta_history: Vec<f64> = Vec::new();

    for iteration in 0.. {
        let t = Instant::now();
        let mut nodes = fill_domain(
            shape,
            &h_field,
            settings.seed.wrapping_add(iteration as u64),
            settings.node_cap,
        )
        .map_err(tag(iteration))?;
        problem.tag_boundary(&mut nodes);
        nodes.assign_orders(&m_field);
        let t_discretise_ms = ms(t);

        let t = Instant::now();
        let ws =
            build_operator_table(&nodes, &ops, settings.phs_exponent).map_err(tag(iteration))?;
        let t_weights_ms = ms(t);

        let t = Instant::now();
        let sys = assemble(problem, &nodes, &ws).map_err(tag(iteration))?;
        let t_assemble_ms = ms(t);
        if let Some(dir) = &settings.matrix_dump {
            let mut out = BufWriter::new(File::create(dir.join(format!("matrix_{iteration}.txt")))?);
            sys.matrix.write_coo(&mut out)?;
            out.flush()?;
        }

        let t = Instant::now();
        let guess = match (&previous, settings.warm_start) {
            (Some((old_nodes, old_x)), true) => Some(interpolate_solution(
                old_nodes,
                old_x,
                &nodes,
                problem.components,
            )),
            _ => None,
        };
        let sol = solve(&sys, &settings.solver, guess.as_deref()).map_err(tag(iteration))?;
        let t_solve_ms = ms(t);

        let t = Instant::now();
        let indicator =
            imex_indicator(problem, &sol.x, &nodes, IMEX_ORDER_BUMP).map_err(tag(iteration))?;
        let t_indicate_ms = ms(t);

        let errors = match problem.exact_at_nodes(&nodes) {
            Some(exact) => Some(error_norms(&sol.x, &exact).map_err(tag(iteration))?),
            None => None,
        };
        let (h_min, h_max) = spacing_range(&nodes);
        let record = IterationRecord {
            iteration,
            node_count: nodes.len(),
            eta_max: indicator.eta_max(),
            eta_min: indicator.eta_min(),
            errors,
            solver_iterations: sol.iterations,
            solver_residual: sol.residual,
            t_discretise_ms,
            t_weights_ms,
            t_assemble_ms,
            t_solve_ms,
            t_indicate_ms,
            h_min,
            h_max,
            order_histogram: order_histogram(&nodes),
        };
        observer.iteration_done(&record, &nodes, &indicator, &sol.x)?;
        eta_history.push(indicator.eta_max());

        let e_inf = record.errors.as_ref().map(|e| e.linf);
        records.push(record);
        let improves = match (&best, e_inf) {
            (None, _) => true,
            (Some((best_e, ..)), Some(e)) => e < *best_e,
            // No closed form: always prefer the latest iteration.
            (Some(_), None) => true,
        };
        if improves {
            best = Some((
                e_inf.unwrap_or(f64::INFINITY),
                iteration,
                nodes.clone(),
                sol.x.clone(),
            ));
        }

        if stop_check(&eta_history, iteration, params.n_iter, params.gamma) {
            break;
        }

        let (h_new, m_new, _) = adapt_targets(&nodes, &indicator, params);
        let (hf, mf) = transfer_fields(&nodes, &h_new, &m_new, params.h_max);
        h_field = hf;
        m_field = mf;
        previous = Some((nodes, sol.x));
    }

    let (_, best_iteration, nodes, solution) = best.expect("loop records at least one iteration");
    Ok(RunOutcome {
        solution,
        nodes,
        records,
        best_iteration,
    })
}

// ---------------------------------------------------------------------------
// Unrefined convergence study
// ---------------------------------------------------------------------------

/// Measurements from one successful single solve.
#[derive(Debug, Clone)]
pub struct StudyMeasurement {
    pub node_count: usize,
    pub e_inf: f64,
    pub eta_max: f64,
    pub solver_iterations: usize,
}

/// One (h, m, seed) cell; failures carry the error text so the table shows
/// which corner of parameter space broke and why.
#[derive(Debug, Clone)]
pub struct StudyCell {
    pub h: f64,
    pub m: u32,
    pub seed: u64,
    pub result: Result<StudyMeasurement, String>,
}

/// Seed-aggregated row of the study: medians over the successful cells.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyRow {
    pub h: f64,
    pub m: u32,
    pub succeeded: usize,
    pub failed: usize,
    pub median_node_count: f64,
    pub median_e_inf: f64,
    pub median_eta_max: f64,
}

impl StudyRow {
    pub fn csv_header() -> &'static str {
        "h,m,succeeded,failed,median_n,median_e_inf,median_eta_max"
    }

    pub fn to_csv_row(&self) -> String {
        format!(
            "{:e},{},{},{},{:e},{:e},{:e}",
            self.h,
            self.m,
            self.succeeded,
            self.failed,
            self.median_node_count,
            self.median_e_inf,
            self.median_eta_max,
        )
    }

    /// Inverse of [`StudyRow::to_csv_row`].
    pub fn from_csv_row(row: &str) -> Result<StudyRow, String> {
        let parts: Vec<&str> = row.split(',').collect();
        if parts.len() != 7 {
            return Err(format!("expected 7 fields, got {}", parts.len()));
        }
        fn num<T: std::str::FromStr>(parts: &[&str], i: usize) -> Result<T, String>
        where
            T::Err: std::fmt::Display,
        {
            parts[i]
                .parse()
                .map_err(|e| format!("field {i} ({}): {e}", parts[i]))
        }
        Ok(StudyRow {
            h: num(&parts, 0)?,
            m: num(&parts, 1)?,
            succeeded: num(&parts, 2)?,
            failed: num(&parts, 3)?,
            median_node_count: num(&parts, 4)?,
            median_e_inf: num(&parts, 5)?,
            median_eta_max: num(&parts, 6)?,
        })
    }
}

/// Parses a study summary CSV, header included.
pub fn parse_study_csv(text: &str) -> Result<Vec<StudyRow>, String> {
    let mut lines = text.lines();
    let header = lines.next().ok_or("empty study file")?;
    if header != StudyRow::csv_header() {
        return Err(format!("unexpected header: {header}"));
    }
    lines.map(StudyRow::from_csv_row).collect()
}

#[derive(Debug)]
pub struct StudyTable {
    pub cells: Vec<StudyCell>,
    pub rows: Vec<StudyRow>,
}

fn median(values: &mut Vec<f64>) -> f64 {
    assert!(!values.is_empty());
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Solves the problem once per (spacing, order, seed) triple without any
/// adaptivity and aggregates per-(h, m) medians of the error and indicator.
///
/// Requires a closed form (the study measures true convergence). A failing
/// cell is marked with its error text and the study keeps going; a row whose
/// cells all failed reports NaN medians.
pub fn unrefined_convergence_study<const D: usize>(
    problem: &ProblemSpec<D>,
    shape: &DomainShape<D>,
    h_list: &[f64],
    m_list: &[u32],
    seeds: u64,
    settings: &RunSettings,
) -> Result<StudyTable, DriverError> {
    if problem.exact.is_none() {
        return Err(DriverError::NoClosedForm);
    }
    assert!(seeds > 0);
    let ops = problem.required_ops();
    let mut cells = Vec::new();
    let mut rows = Vec::new();
    for &h in h_list {
        for &m in m_list {
            assert!(SOLVE_ORDERS.contains(&m), "order {m} outside the solver set");
            let mut n_vals = Vec::new();
            let mut e_vals = Vec::new();
            let mut eta_vals = Vec::new();
            let mut failed = 0usize;
            for seed in 0..seeds {
                let result = study_cell(problem, shape, &ops, h, m, seed, settings);
                if let Ok(meas) = &result {
                    n_vals.push(meas.node_count as f64);
                    e_vals.push(meas.e_inf);
                    eta_vals.push(meas.eta_max);
                } else {
                    failed += 1;
                }
                cells.push(StudyCell {
                    h,
                    m,
                    seed,
                    result,
                });
            }
            let med = |mut v: Vec<f64>| {
                if v.is_empty() {
                    f64::NAN
                } else {
                    median(&mut v)
                }
            };
            rows.push(StudyRow {
                h,
                m,
                succeeded: n_vals.len(),
                failed,
                median_node_count: med(n_vals),
                median_e_inf: med(e_vals),
                median_eta_max: med(eta_vals),
            });
        }
    }
    Ok(StudyTable { cells, rows })
}

fn study_cell<const D: usize>(
    problem: &ProblemSpec<D>,
    shape: &DomainShape<D>,
    ops: &[crate::approx::Operator],
    h: f64,
    m: u32,
    seed: u64,
    settings: &RunSettings,
) -> Result<StudyMeasurement, String> {
    let run = || -> Result<StudyMeasurement, Error> {
        let mut nodes = fill_domain(shape, &SpacingField::constant(h), seed, settings.node_cap)?;
        problem.tag_boundary(&mut nodes);
        nodes.assign_orders(&OrderField::constant(m));
        let ws = build_operator_table(&nodes, ops, settings.phs_exponent)?;
        let sys = assemble(problem, &nodes, &ws)?;
        let sol = solve(&sys, &settings.solver, None)?;
        let exact = problem
            .exact_at_nodes(&nodes)
            .expect("study requires a closed form");
        let errors = error_norms(&sol.x, &exact)?;
        let indicator = imex_indicator(problem, &sol.x, &nodes, IMEX_ORDER_BUMP)?;
        Ok(StudyMeasurement {
            node_count: nodes.len(),
            e_inf: errors.linf,
            eta_max: indicator.eta_max(),
            solver_iterations: sol.iterations,
        })
    };
    run().map_err(|e| e.to_string())
}

/// Least-squares slope of `ln y` against `ln x`; the observed convergence
/// order when `y` is an error and `x` a spacing.
pub fn fit_loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    assert!(x.len() >= 2, "slope fit needs at least two samples");
    let lx: Vec<f64> = x.iter().map(|&v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|&v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..lx.len() {
        num += (lx[i] - mx) * (ly[i] - my);
        den += (lx[i] - mx) * (lx[i] - mx);
    }
    num / den
}

// ---------------------------------------------------------------------------
// Run directory
// ---------------------------------------------------------------------------

/// On-disk recorder for one adaptive run.
///
/// Layout: `records.csv` grows by one row per iteration and is flushed
/// immediately (append-only, crash-tolerant); `nodes_<iter>.csv` and
/// `indicator_<iter>.csv` snapshot the cloud and the error indicator of each
/// iteration; `meta` echoes the configuration, seed, and timestamps.
pub struct RunDir {
    root: PathBuf,
    records: BufWriter<File>,
}

impl RunDir {
    /// Creates the directory (parents included) and the records header.
    /// `meta` is written verbatim with a start timestamp appended.
    pub fn create(root: &Path, meta: &str) -> Result<Self, DriverError> {
        fs::create_dir_all(root)?;
        let mut meta_out = String::from(meta);
        if !meta_out.ends_with('\n') && !meta_out.is_empty() {
            meta_out.push('\n');
        }
        meta_out.push_str(&format!("start_unix_s = {}\n", unix_seconds()));
        fs::write(root.join("meta"), meta_out)?;
        let mut records = BufWriter::new(
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(root.join("records.csv"))?,
        );
        writeln!(records, "{}", IterationRecord::csv_header())?;
        records.flush()?;
        Ok(RunDir {
            root: root.to_path_buf(),
            records,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Appends a completion timestamp to the meta file.
    pub fn finish(&mut self) -> Result<(), DriverError> {
        self.records.flush()?;
        let meta = self.root.join("meta");
        let mut text = fs::read_to_string(&meta)?;
        text.push_str(&format!("end_unix_s = {}\n", unix_seconds()));
        fs::write(meta, text)?;
        Ok(())
    }
}

fn unix_seconds() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl<const D: usize> RunObserver<D> for RunDir {
    fn iteration_done(
        &mut self,
        record: &IterationRecord,
        nodes: &NodeSet<D>,
        indicator: &IndicatorField,
        _solution: &[f64],
    ) -> Result<(), DriverError> {
        writeln!(self.records, "{}", record.to_csv_row())?;
        self.records.flush()?;

        let iter = record.iteration;
        let mut nodes_csv = BufWriter::new(File::create(
            self.root.join(format!("nodes_{iter}.csv")),
        )?);
        crate::nodegen::write_nodes_csv(&mut nodes_csv, nodes, Some(indicator.values()))?;
        nodes_csv.flush()?;

        let mut ind_csv = BufWriter::new(File::create(
            self.root.join(format!("indicator_{iter}.csv")),
        )?);
        writeln!(ind_csv, "iter,node_id,eta")?;
        for i in 0..indicator.len() {
            writeln!(ind_csv, "{iter},{i},{:e}", indicator.eta(i))?;
        }
        ind_csv.flush()?;
        Ok(())
    }
}

/// Composite observer: writes the run directory and forwards a one-line
/// summary per iteration to `out` (stdout in the command-line tool).
pub struct ReportingObserver<'a, W: std::io::Write> {
    pub dir: &'a mut RunDir,
    pub out: W,
}

impl<'a, W: std::io::Write, const D: usize> RunObserver<D> for ReportingObserver<'a, W> {
    fn iteration_done(
        &mut self,
        record: &IterationRecord,
        nodes: &NodeSet<D>,
        indicator: &IndicatorField,
        solution: &[f64],
    ) -> Result<(), DriverError> {
        RunObserver::<D>::iteration_done(self.dir, record, nodes, indicator, solution)?;
        let err = match &record.errors {
            Some(e) => format!(" e_inf={:.3e}", e.linf),
            None => String::new(),
        };
        writeln!(
            self.out,
            "iter {:>3}  N={:<7} eta_max={:.3e} eta_min={:.3e}{} solver_it={} res={:.1e} h=[{:.2e},{:.2e}]",
            record.iteration,
            record.node_count,
            record.eta_max,
            record.eta_min,
            err,
            record.solver_iterations,
            record.solver_residual,
            record.h_min,
            record.h_max,
        )
        .map_err(DriverError::from)?;
        self.out.flush().map_err(DriverError::from)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems;
    use crate::pt;

    fn unit_disc_shape() -> DomainShape<2> {
        DomainShape::Disc {
            center: pt([0.0, 0.0]),
            radius: 1.0,
        }
    }

    fn quiet_params(n_iter: usize) -> AdaptivityParams {
        AdaptivityParams {
            alpha_h: 0.5,
            beta_h: 0.1,
            lambda_h: 2.0,
            theta_h: 1.2,
            alpha_p: 0.5,
            beta_p: 0.1,
            lambda_p: 2.0,
            theta_p: 1.2,
            h_max: 0.3,
            n_max: 50_000,
            n_iter,
            gamma: None,
        }
    }

    #[test]
    fn zero_iteration_budget_is_a_single_solve() {
        let spec = problems::linear_patch();
        let shape = unit_disc_shape();
        let out = adaptive_solve(
            &spec,
            &shape,
            &SpacingField::constant(0.2),
            &OrderField::constant(2),
            &quiet_params(0),
            &RunSettings::default(),
            &mut NullObserver,
        )
        .unwrap();
        assert_eq!(out.records.len(), 1);
        assert_eq!(out.best_iteration, 0);
        assert_eq!(out.solution.len(), out.nodes.len());
        let errors = out.records[0].errors.as_ref().unwrap();
        assert!(errors.linf <= 1e-8, "linear patch must solve exactly");
        let rec = &out.records[0];
        assert!(rec.node_count > 0);
        assert!(rec.eta_max >= rec.eta_min && rec.eta_min >= 0.0);
        assert_eq!(rec.order_histogram.iter().sum::<usize>(), rec.node_count);
        assert!(rec.h_min > 0.0 && rec.h_min <= rec.h_max);
    }

    #[test]
    fn gamma_of_one_stops_after_the_first_iteration() {
        let spec = problems::linear_patch();
        let shape = unit_disc_shape();
        let mut params = quiet_params(30);
        params.gamma = Some(1.0);
        let out = adaptive_solve(
            &spec,
            &shape,
            &SpacingField::constant(0.25),
            &OrderField::constant(2),
            &params,
            &RunSettings::default(),
            &mut NullObserver,
        )
        .unwrap();
        assert_eq!(out.records.len(), 1);
    }

    #[test]
    fn unit_aggressiveness_is_a_fixed_point() {
        let spec = problems::linear_patch();
        let shape = unit_disc_shape();
        let mut params = quiet_params(3);
        params.lambda_h = 1.0;
        params.theta_h = 1.0;
        params.lambda_p = 1.0;
        params.theta_p = 1.0;
        let h0 = 0.22;
        let out = adaptive_solve(
            &spec,
            &shape,
            &SpacingField::constant(h0),
            &OrderField::constant(2),
            &params,
            &RunSettings::default(),
            &mut NullObserver,
        )
        .unwrap();
        assert_eq!(out.records.len(), 4, "runs n_iter + 1 iterations");
        for rec in &out.records {
            assert!((rec.h_min - h0).abs() < 1e-9, "h_min = {}", rec.h_min);
            assert!((rec.h_max - h0).abs() < 1e-9, "h_max = {}", rec.h_max);
            assert_eq!(rec.order_histogram[0], rec.node_count, "orders stay 2");
        }
    }

    #[test]
    fn adaptive_refinement_improves_the_peak_error() {
        // Pure h-adaptivity at desk scale; order growth needs clouds large
        // enough for the bumped stencils and is exercised at full scale by
        // the acceptance suite.
        let (spec, shape) = problems::peak_default();
        let mut params = quiet_params(5);
        params.alpha_h = 0.3;
        params.beta_h = 0.15;
        params.lambda_h = 2.0;
        params.theta_h = 1.01;
        params.lambda_p = 1.0;
        params.theta_p = 1.0;
        params.h_max = 0.15;
        params.n_max = 6_000;
        let out = adaptive_solve(
            &spec,
            &shape,
            &SpacingField::constant(0.15),
            &OrderField::constant(2),
            &params,
            &RunSettings::default(),
            &mut NullObserver,
        )
        .unwrap();
        assert_eq!(out.records.len(), 6);
        let first = out.records.first().unwrap();
        let last = out.records.last().unwrap();
        assert!(last.node_count > first.node_count, "refinement adds nodes");
        // The best iteration must beat the unrefined start and be consistent
        // with the recorded norms.
        let best = &out.records[out.best_iteration];
        let best_e = best.errors.as_ref().unwrap().linf;
        let first_e = first.errors.as_ref().unwrap().linf;
        assert!(
            best_e < first_e,
            "refinement should improve the error: {first_e} -> {best_e}"
        );
        for rec in &out.records {
            assert!(best_e <= rec.errors.as_ref().unwrap().linf + 1e-15);
        }
    }

    #[test]
    fn warm_start_never_costs_more_solver_iterations() {
        let (spec, shape) = problems::peak_default();
        let params = {
            let mut p = quiet_params(10);
            p.alpha_h = 0.3;
            p.beta_h = 0.15;
            p.lambda_h = 1.5;
            p.theta_h = 1.01;
            p.h_max = 0.12;
            p.n_max = 3_000;
            // Keep orders at 2 so the bumped indicator stencils always fit
            // in these small clouds; the warm start is about the solver.
            p.lambda_p = 1.0;
            p.theta_p = 1.0;
            p
        };
        let total = |warm: bool| {
            let settings = RunSettings {
                warm_start: warm,
                // A deliberately weak factorization: with the default fill
                // the preconditioner is nearly exact at this size and every
                // solve finishes in a handful of iterations regardless of
                // the guess, which would make the comparison vacuous.
                solver: SolverConfig {
                    drop_tolerance: 1e-2,
                    fill_factor: 5.0,
                    ..SolverConfig::default()
                },
                ..RunSettings::default()
            };
            let out = adaptive_solve(
                &spec,
                &shape,
                &SpacingField::constant(0.12),
                &OrderField::constant(2),
                &params,
                &settings,
                &mut NullObserver,
            )
            .unwrap();
            out.records
                .iter()
                .map(|r| r.solver_iterations)
                .sum::<usize>()
        };
        assert!(total(true) <= total(false));
    }

    #[test]
    fn errors_carry_the_iteration_index() {
        let spec = problems::linear_patch();
        let shape = unit_disc_shape();
        // A cap this small cannot hold even the boundary ring.
        let settings = RunSettings {
            node_cap: 3,
            ..RunSettings::default()
        };
        let err = adaptive_solve(
            &spec,
            &shape,
            &SpacingField::constant(0.2),
            &OrderField::constant(2),
            &quiet_params(2),
            &settings,
            &mut NullObserver,
        )
        .unwrap_err();
        match err {
            DriverError::Iteration { iteration, .. } => assert_eq!(iteration, 0),
            other => panic!("expected a tagged iteration error, got {other:?}"),
        }
    }

    #[test]
    fn study_is_deterministic_and_marks_failures() {
        let spec = problems::linear_patch();
        let shape = unit_disc_shape();
        // Order 8 on an h = 0.45 disc cannot gather its 90-node stencils.
        let table = unrefined_convergence_study(
            &spec,
            &shape,
            &[0.45, 0.3],
            &[2, 8],
            2,
            &RunSettings::default(),
        )
        .unwrap();
        assert_eq!(table.cells.len(), 8);
        assert_eq!(table.rows.len(), 4);
        let coarse_high: &StudyRow = table
            .rows
            .iter()
            .find(|r| r.m == 8 && r.h == 0.45)
            .unwrap();
        assert!(coarse_high.failed > 0, "expected stencil failures");
        assert!(coarse_high.median_e_inf.is_nan() || coarse_high.succeeded > 0);
        let fine_low = table.rows.iter().find(|r| r.m == 2 && r.h == 0.3).unwrap();
        assert_eq!(fine_low.failed, 0);
        assert!(fine_low.median_e_inf <= 1e-8);

        // Identical configuration reproduces identical numbers.
        let again = unrefined_convergence_study(
            &spec,
            &shape,
            &[0.45, 0.3],
            &[2, 8],
            2,
            &RunSettings::default(),
        )
        .unwrap();
        for (a, b) in table.cells.iter().zip(again.cells.iter()) {
            match (&a.result, &b.result) {
                (Ok(x), Ok(y)) => {
                    assert_eq!(x.e_inf, y.e_inf);
                    assert_eq!(x.node_count, y.node_count);
                }
                (Err(x), Err(y)) => assert_eq!(x, y),
                _ => panic!("determinism broken"),
            }
        }
    }

    #[test]
    fn study_requires_a_closed_form() {
        let mut spec = problems::linear_patch();
        spec.exact = None;
        let err = unrefined_convergence_study(
            &spec,
            &unit_disc_shape(),
            &[0.3],
            &[2],
            1,
            &RunSettings::default(),
        )
        .unwrap_err();
        assert!(matches!(err, DriverError::NoClosedForm));
    }

    #[test]
    fn loglog_slope_recovers_a_pure_power_law() {
        let x = [0.4f64, 0.2, 0.1, 0.05];
        let y: Vec<f64> = x.iter().map(|&h| 3.7 * h.powi(3)).collect();
        let slope = fit_loglog_slope(&x, &y);
        assert!((slope - 3.0).abs() < 1e-12, "slope = {slope}");
    }

    #[test]
    fn median_handles_even_and_odd_counts() {
        assert_eq!(median(&mut vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut vec![4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(median(&mut vec![5.0]), 5.0);
    }

    #[test]
    fn run_directory_records_every_iteration() {
        let spec = problems::linear_patch();
        let shape = unit_disc_shape();
        let root = std::env::temp_dir().join(format!(
            "mfree-driver-test-{}-{}",
            std::process::id(),
            unix_seconds()
        ));
        let mut dir = RunDir::create(&root, "problem = linear-patch\nseed = 0").unwrap();
        let mut summary = Vec::new();
        {
            let mut observer = ReportingObserver {
                dir: &mut dir,
                out: &mut summary,
            };
            // Unit factors: the exactly solved patch produces a pure-noise
            // indicator, and relative marking must not act on it here.
            let mut params = quiet_params(2);
            params.lambda_h = 1.0;
            params.theta_h = 1.0;
            params.lambda_p = 1.0;
            params.theta_p = 1.0;
            adaptive_solve(
                &spec,
                &shape,
                &SpacingField::constant(0.25),
                &OrderField::constant(2),
                &params,
                &RunSettings::default(),
                &mut observer,
            )
            .unwrap();
        }
        dir.finish().unwrap();

        let records = fs::read_to_string(root.join("records.csv")).unwrap();
        let lines: Vec<&str> = records.lines().collect();
        assert_eq!(lines.len(), 4, "header plus three iterations");
        assert!(lines[0].starts_with("iteration,"));
        assert!(lines[1].starts_with("0,"));
        assert!(lines[3].starts_with("2,"));
        // Every emitted CSV must be re-readable by the crate's own parser.
        let parsed = parse_records_csv(&records).unwrap();
        assert_eq!(parsed.len(), 3);
        assert_eq!(parsed[2].iteration, 2);
        assert!(parsed[0].errors.is_some(), "patch has a closed form");
        for iter in 0..3 {
            let path = root.join(format!("nodes_{iter}.csv"));
            let text = fs::read_to_string(&path).unwrap();
            assert!(text.starts_with("x,y,type,h,m,eta"));
            let file = std::io::BufReader::new(File::open(&path).unwrap());
            let (back, eta) = crate::nodegen::read_nodes_csv::<2, _>(file).unwrap();
            assert!(back.len() > 10);
            assert_eq!(eta.len(), back.len());
            let ind = fs::read_to_string(root.join(format!("indicator_{iter}.csv"))).unwrap();
            let rows = parse_indicator_csv(&ind).unwrap();
            assert_eq!(rows.len(), back.len());
            assert!(rows.iter().all(|&(i, id, eta)| i == iter && id < back.len() && eta >= 0.0));
        }
        let meta = fs::read_to_string(root.join("meta")).unwrap();
        assert!(meta.contains("problem = linear-patch"));
        assert!(meta.contains("start_unix_s"));
        assert!(meta.contains("end_unix_s"));
        let text = String::from_utf8(summary).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.contains("eta_max="));
        fs::remove_dir_all(&root).unwrap();
    }

    #[test]
    fn csv_rows_round_trip() {
        let with_errors = IterationRecord {
            iteration: 7,
            node_count: 1234,
            eta_max: 3.5e-2,
            eta_min: 1.0e-9,
            errors: Some(crate::problems::ErrorNorms {
                l1: 1.5e-3,
                l2: 2.5e-4,
                linf: 9.0e-4,
            }),
            solver_iterations: 42,
            solver_residual: 8.8e-16,
            t_discretise_ms: 1.25,
            t_weights_ms: 100.0,
            t_assemble_ms: 3.5,
            t_solve_ms: 7.75,
            t_indicate_ms: 0.5,
            h_min: 0.015625,
            h_max: 0.125,
            order_histogram: [10, 20, 4, 0],
        };
        let mut without_errors = with_errors.clone();
        without_errors.errors = None;
        for rec in [&with_errors, &without_errors] {
            let text = format!("{}\n{}\n", IterationRecord::csv_header(), rec.to_csv_row());
            let back = parse_records_csv(&text).unwrap();
            assert_eq!(back.len(), 1);
            assert_eq!(&back[0], rec);
        }
        assert!(parse_records_csv("bogus\n1,2\n").is_err());
        assert!(IterationRecord::from_csv_row("1,2,3").is_err());

        let row = StudyRow {
            h: 0.05,
            m: 6,
            succeeded: 4,
            failed: 1,
            median_node_count: 512.5,
            median_e_inf: 3.25e-8,
            median_eta_max: 1.5e-4,
        };
        let text = format!("{}\n{}\n", StudyRow::csv_header(), row.to_csv_row());
        let back = parse_study_csv(&text).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0], row);
        // Rows from an all-failed cell carry NaN medians; those must still
        // survive the trip even though NaN != NaN.
        let nan_row = StudyRow {
            median_node_count: f64::NAN,
            median_e_inf: f64::NAN,
            median_eta_max: f64::NAN,
            ..row
        };
        let text = format!("{}\n{}\n", StudyRow::csv_header(), nan_row.to_csv_row());
        let back = parse_study_csv(&text).unwrap();
        assert!(back[0].median_e_inf.is_nan());
        assert_eq!(back[0].h, nan_row.h);

        let ind = "iter,node_id,eta\n3,0,1e-2\n3,1,0e0\n";
        assert_eq!(
            parse_indicator_csv(ind).unwrap(),
            vec![(3, 0, 1e-2), (3, 1, 0.0)]
        );
        assert!(parse_indicator_csv("iter,node_id,eta\n3,0\n").is_err());
    }
}
