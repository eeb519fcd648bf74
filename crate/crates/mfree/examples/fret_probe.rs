//! Throwaway probe: fretting solver behaviour across unit systems.

use mfree::approx::{build_operator_table, DEFAULT_PHS_EXPONENT};
use mfree::nodegen::{fill_domain, OrderField, SpacingField};
use mfree::problems::{fretting_spec, ElasticMaterial, FrettingSetup};
use mfree::system::{assemble, solve, SolverConfig, SparseSystem};

fn build(setup: &FrettingSetup, h: f64) -> SparseSystem {
    let (spec, shape) = fretting_spec(setup).unwrap();
    let spacing = SpacingField::constant(h);
    let mut nodes = fill_domain(&shape, &spacing, 7, 10_000_000).unwrap();
    spec.tag_boundary(&mut nodes);
    nodes.assign_orders(&OrderField::constant(2));
    let ws = build_operator_table(&nodes, &spec.required_ops(), DEFAULT_PHS_EXPONENT).unwrap();
    assemble(&spec, &nodes, &ws).unwrap()
}

fn span(sys: &SparseSystem) -> (f64, f64) {
    let n = sys.rhs.len();
    let mut lo = f64::INFINITY;
    let mut hi = 0.0f64;
    for i in 0..n {
        let (_, vals) = sys.matrix.row(i);
        let rn: f64 = vals.iter().map(|v| v * v).sum::<f64>().sqrt();
        lo = lo.min(rn);
        hi = hi.max(rn);
    }
    (lo, hi)
}

fn report(tag: &str, sys: &SparseSystem, cfg: &SolverConfig) -> Option<Vec<f64>> {
    match solve(sys, cfg, None) {
        Ok(sol) => {
            let umax = sol.x.iter().cloned().fold(0.0f64, |a, b| a.max(b.abs()));
            println!(
                "  {tag}: it={} res={:.2e} umax={:.4e}",
                sol.iterations, sol.residual, umax
            );
            Some(sol.x)
        }
        Err(e) => {
            println!("  {tag}: failed: {e}");
            None
        }
    }
}

fn main() {
    let defaults = SolverConfig::default();
    let strong = SolverConfig {
        drop_tolerance: 1e-10,
        fill_factor: 200.0,
        ..defaults.clone()
    };
    // Millimetre / megapascal statement of the same physics. Forces are
    // invariant (1 MPa * mm^2 = 1 N); displacements come out in mm.
    let si = FrettingSetup::default();
    let mm = FrettingSetup {
        sample: ElasticMaterial::new(72.1e3, 0.33),
        pad: ElasticMaterial::new(72.1e3, 0.33),
        length: 40.0,
        width: 10.0,
        thickness: 4.0,
        normal_force: 543.0,
        tangential_force: 155.0,
        axial_stress: 100.0,
        pad_radius: 10.0,
        friction: 0.3,
    };

    for (h_si, h_mm) in [(3.5e-4, 0.35), (2.5e-4, 0.25)] {
        println!("== h = {h_si:.2e} m ==");
        let sys_si = build(&si, h_si);
        let (lo, hi) = span(&sys_si);
        println!("  SI rows {lo:.1e}..{hi:.1e}, n={}", sys_si.rhs.len());
        report("SI default  ", &sys_si, &defaults);
        let xsi = report("SI strong   ", &sys_si, &strong);

        let sys_mm = build(&mm, h_mm);
        let (lo, hi) = span(&sys_mm);
        println!("  mm rows {lo:.1e}..{hi:.1e}, n={}", sys_mm.rhs.len());
        let xmm = report("mm default  ", &sys_mm, &defaults);
        report("mm strong   ", &sys_mm, &strong);

        // The node layouts differ (fill seeds scale differently), so compare
        // only the max displacement magnitude across unit systems.
        if let (Some(xsi), Some(xmm)) = (xsi, xmm) {
            let usi = xsi.iter().cloned().fold(0.0f64, |a, b| a.max(b.abs()));
            let umm = xmm.iter().cloned().fold(0.0f64, |a, b| a.max(b.abs()));
            println!("  umax SI {usi:.4e} m  vs  mm {:.4e} m", umm * 1e-3);
        }
    }
}
