//! End-to-end tests: library pipeline on small problems plus the binary's
//! command-line contract (exit codes, emitted files, CSV round trips).

use std::fs;
use std::path::PathBuf;
use std::process::Command;

use mfree::adapt::AdaptivityParams;
use mfree::approx::build_operator_table;
use mfree::config::{parse_config, RunConfig};
use mfree::driver::{
    adaptive_solve, parse_indicator_csv, parse_records_csv, NullObserver, RunSettings,
};
use mfree::nodegen::{fill_domain, read_nodes_csv, DomainShape, OrderField, SpacingField};
use mfree::problems::{fretting_spec, linear_patch, peak_default, FrettingSetup};
use mfree::pt;
use mfree::system::{assemble, dense_solve, solve};

fn unit_disc() -> DomainShape<2> {
    DomainShape::Disc {
        center: pt([0.0, 0.0]),
        radius: 1.0,
    }
}

/// Aggressiveness 1 in both families: adapt_targets becomes the identity.
fn frozen_params(n_iter: usize) -> AdaptivityParams {
    AdaptivityParams {
        alpha_h: 0.5,
        beta_h: 0.1,
        lambda_h: 1.0,
        theta_h: 1.0,
        alpha_p: 0.5,
        beta_p: 0.1,
        lambda_p: 1.0,
        theta_p: 1.0,
        h_max: 1.0,
        n_max: 100_000,
        n_iter,
        gamma: None,
    }
}

#[test]
fn linear_solution_is_exact_through_the_whole_pipeline() {
    let spec = linear_patch();
    let outcome = adaptive_solve(
        &spec,
        &unit_disc(),
        &SpacingField::constant(0.2),
        &OrderField::constant(2),
        &frozen_params(1),
        &RunSettings::default(),
        &mut NullObserver,
    )
    .unwrap();
    for record in &outcome.records {
        let e = record.errors.as_ref().unwrap();
        assert!(e.linf < 1e-8, "iteration {}: {:?}", record.iteration, e);
    }
}

#[test]
fn dense_and_iterative_solutions_agree() {
    let (spec, shape) = peak_default();
    let mut nodes = fill_domain(&shape, &SpacingField::constant(0.15), 3, 100_000).unwrap();
    spec.tag_boundary(&mut nodes);
    nodes.assign_orders(&OrderField::constant(2));
    let ws = build_operator_table(&nodes, &spec.required_ops(), 3).unwrap();
    let sys = assemble(&spec, &nodes, &ws).unwrap();

    let direct = dense_solve(&sys);
    let iterative = solve(&sys, &Default::default(), None).unwrap();
    let scale = direct.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let worst = direct
        .iter()
        .zip(&iterative.x)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    assert!(scale > 0.0);
    assert!(worst / scale < 1e-9, "solvers disagree by {worst:.3e}");
}

#[test]
fn fretting_assembles_and_solves_at_coarse_spacing() {
    let setup = FrettingSetup::default();
    let (spec, shape) = fretting_spec(&setup).unwrap();
    let mut nodes = fill_domain(&shape, &SpacingField::constant(1e-3), 0, 100_000).unwrap();
    spec.tag_boundary(&mut nodes);
    nodes.assign_orders(&OrderField::constant(2));
    let ws = build_operator_table(&nodes, &spec.required_ops(), 3).unwrap();
    let sys = assemble(&spec, &nodes, &ws).unwrap();
    let sol = solve(&sys, &Default::default(), None).unwrap();
    assert!(
        sol.residual < 1e-9,
        "fretting solve stalled: residual {:.3e}",
        sol.residual
    );
    // Metal strip under half a kilonewton: displacements are micrometers,
    // not meters.
    let umax = sol.x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(umax > 1e-8 && umax < 1e-3, "implausible umax {umax:.3e}");
}

#[test]
fn config_text_round_trips_through_the_emitted_form() {
    let cfg = RunConfig::defaults(mfree::config::Problem::Boussinesq);
    let back = parse_config(&cfg.to_toml()).unwrap();
    assert_eq!(cfg, back);
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mfree"))
}

fn temp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!(
        "mfree-pipeline-{tag}-{}-{}",
        std::process::id(),
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .unwrap()
            .as_nanos()
    ));
    fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn cli_rejects_usage_errors_with_exit_code_two() {
    let out = bin().args(["run", "--problem", "nosuch"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let msg = String::from_utf8_lossy(&out.stderr).to_lowercase();
    assert!(msg.contains("peak"), "help should list the choices: {msg}");

    let out = bin().arg("run").output().unwrap();
    assert_eq!(out.status.code(), Some(2), "problem is required");

    let out = bin().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn cli_reports_runtime_failures_with_module_origin() {
    let out = bin()
        .args(["run", "--problem", "peak", "--config", "/nonexistent.toml"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.starts_with("error[io]:"), "got: {msg}");
}

#[test]
fn cli_run_emits_reparseable_outputs() {
    let dir = temp_dir("run");
    let out_dir = dir.join("out");
    let out = bin()
        .args([
            "run",
            "--problem",
            "peak",
            "--seed",
            "2",
            "--max-iter",
            "1",
            "--n-max",
            "2000",
            "--dump-matrix",
            "--out",
        ])
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(
        stdout.lines().filter(|l| l.starts_with("iter ")).count(),
        2,
        "one summary line per iteration: {stdout}"
    );
    assert!(stdout.contains("best iteration"));

    // Every emitted CSV parses with the crate's own readers.
    let records = parse_records_csv(&fs::read_to_string(out_dir.join("records.csv")).unwrap())
        .unwrap();
    assert_eq!(records.len(), 2);
    assert!(records.iter().all(|r| r.errors.is_some()));
    for iter in 0..2usize {
        let nodes_path = out_dir.join(format!("nodes_{iter}.csv"));
        let reader = std::io::BufReader::new(fs::File::open(&nodes_path).unwrap());
        let (nodes, eta) = read_nodes_csv::<2, _>(reader).unwrap();
        assert_eq!(nodes.len(), records[iter].node_count);
        assert_eq!(eta.len(), nodes.len());
        let ind =
            parse_indicator_csv(&fs::read_to_string(out_dir.join(format!("indicator_{iter}.csv"))).unwrap())
                .unwrap();
        assert_eq!(ind.len(), nodes.len());

        // The matrix dump holds "row col value" lines for a square system.
        let dump = fs::read_to_string(out_dir.join(format!("matrix_{iter}.txt"))).unwrap();
        let mut max_row = 0usize;
        for line in dump.lines() {
            let mut it = line.split_whitespace();
            let r: usize = it.next().unwrap().parse().unwrap();
            let _c: usize = it.next().unwrap().parse().unwrap();
            let _v: f64 = it.next().unwrap().parse().unwrap();
            assert!(it.next().is_none());
            max_row = max_row.max(r);
        }
        assert_eq!(max_row + 1, records[iter].node_count);
    }

    // The echoed config in meta is itself a loadable config.
    let meta = fs::read_to_string(out_dir.join("meta")).unwrap();
    let toml_part: String = meta
        .lines()
        .take_while(|l| !l.starts_with("start_unix_s"))
        .map(|l| format!("{l}\n"))
        .collect();
    let cfg = parse_config(&toml_part).unwrap();
    assert_eq!(cfg.problem, mfree::config::Problem::Peak);
    assert_eq!(cfg.seed, 2);
    assert_eq!(cfg.n_iter, 1);

    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn cli_study_prints_the_summary_csv() {
    let dir = temp_dir("study");
    let cfg_path = dir.join("study.toml");
    fs::write(
        &cfg_path,
        "problem = \"peak\"\n\n[study]\nh = [0.15]\nm = [2]\nseeds = 2\n",
    )
    .unwrap();
    let out = bin()
        .args(["study", "--config"])
        .arg(&cfg_path)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8(out.stdout).unwrap();
    let rows = mfree::driver::parse_study_csv(&stdout).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].m, 2);
    assert_eq!(rows[0].succeeded, 2);
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn cli_check_passes() {
    let out = bin().arg("check").output().unwrap();
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.lines().all(|l| l.starts_with("ok ")));
    assert!(stdout.lines().count() >= 4);
}
