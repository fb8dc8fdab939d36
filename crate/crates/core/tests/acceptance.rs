//! Acceptance run: one line per criterion on stderr, one test per criterion.
//!
//! The sweep-based criteria share a single set of fine runs. Lines are
//! written to the raw stderr handle so they show up without `--nocapture`.

use std::io::Write;
use std::sync::OnceLock;
use twoscale::checks::{self, CheckOutcome, SweepEvidence};

fn evidence() -> &'static Result<SweepEvidence, String> {
    static EV: OnceLock<Result<SweepEvidence, String>> = OnceLock::new();
    EV.get_or_init(|| checks::sweep_evidence(1).map_err(|e| e.to_string()))
}

fn with_evidence(id: u32, check: fn(&SweepEvidence) -> CheckOutcome) -> CheckOutcome {
    match evidence() {
        Ok(ev) => check(ev),
        Err(e) => CheckOutcome { id, name: "sweep", passed: false, detail: format!("sweep failed: {e}"), seconds: 0.0 },
    }
}

fn report(out: CheckOutcome) {
    let _ = writeln!(std::io::stderr().lock(), "acceptance {out}");
    assert!(out.passed, "{out}");
}

#[test]
fn c01_homogeneous_tensor() {
    report(checks::homogeneous_tensor());
}

#[test]
fn c02_tensor_structure() {
    report(checks::tensor_structure());
}

#[test]
fn c03_kernel_invariance() {
    report(checks::kernel_invariance());
}

#[test]
fn c04_solvability_monitor() {
    report(checks::solvability_monitor());
}

#[test]
fn c05_irrotational_collapse() {
    report(checks::irrotational_collapse());
}

#[test]
fn c06_macro_convergence() {
    report(with_evidence(6, checks::macro_convergence));
}

#[test]
fn c07_spectral_hausdorff() {
    report(with_evidence(7, checks::spectral_hausdorff));
}

#[test]
fn c08_stokes_fidelity() {
    report(checks::stokes_fidelity());
}

#[test]
fn c09_spectral_gap() {
    report(with_evidence(9, checks::spectral_gap));
}

#[test]
fn c10_solver_suite() {
    report(checks::solver_suite());
}
