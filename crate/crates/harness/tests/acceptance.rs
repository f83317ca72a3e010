//! Desk-scale acceptance run: one PASS/FAIL line per criterion.
//!
//! Criteria listed in `KNOWN_RED` are reported as FAIL but do not fail the
//! target; each has a measured explanation in the decisions ledger. A known
//! red criterion that starts passing fails the target so the list stays
//! exact. Any other failure, or any change to a pinned tolerance, fails it.

use std::process::ExitCode;

use nofrost_harness::repro::{run_suite, tol, Recipe, Zoo};

/// Criteria that fail on the desk recipe, with the measured reason.
const KNOWN_RED: [(u8, &str); 4] = [
    (4, "running means of clean- and adversarially-trained BN overlap; running variances separate"),
    (6, "BN mixture statistics cost SAT-BN no extra clean accuracy; SAT-BN is the more robust model"),
    (9, "NoFrost boundaries are thicker but its mean margin is slightly below SAT-BN"),
    (11, "Combine (BN) wins most corruption columns and PGD"),
];

fn pinned() -> Vec<String> {
    let mut bad = Vec::new();
    let mut f = |name: &str, got: f64, want: f64| {
        let ok = got.to_bits() == want.to_bits();
        println!("tolerance {name:<22} = {got:<8} {}", if ok { "pinned" } else { "CHANGED" });
        if !ok {
            bad.push(format!("{name} is {got}, pinned at {want}"));
        }
    };
    f("SWS_MEAN", tol::SWS_MEAN, 1e-6);
    f("SWS_STD", tol::SWS_STD, 1e-4);
    f("SWS_GRAD_REL", tol::SWS_GRAD_REL, 1e-4);
    f("ATTACK_TRIALS", tol::ATTACK_TRIALS as f64, 10_000.0);
    f("CONTAINMENT_SLACK", tol::CONTAINMENT_SLACK, 1e-12);
    f("ST_PGD_MAX", tol::ST_PGD_MAX, 5.0);
    f("KS_P_MAX", tol::KS_P_MAX, 0.05);
    f("SPEARMAN_CLEAN_MAX", tol::SPEARMAN_CLEAN_MAX, -0.8);
    f("SPEARMAN_ROBUST_MIN", tol::SPEARMAN_ROBUST_MIN, 0.8);
    f("DROP_GAP_MIN", tol::DROP_GAP_MIN, 2.0);
    f("PGD_SLACK", tol::PGD_SLACK, 1.0);
    f("EPS_VIOLATION", tol::EPS_VIOLATION, 0.5);
    f("THICKNESS_ORACLE", tol::THICKNESS_ORACLE, 1e-2);
    f("TRACE", tol::TRACE, 1e-6);
    f("COMPREHENSIVE_MARGIN", tol::COMPREHENSIVE_MARGIN, 1.0);
    f("COMPREHENSIVE_WINS", tol::COMPREHENSIVE_WINS as f64, 3.0);
    f("SEED_STD_MAX", tol::SEED_STD_MAX, 1.0);
    bad
}

fn main() -> ExitCode {
    let mut problems = pinned();
    let recipe = Recipe::desk();
    println!(
        "recipe: synthetic moons {}x{}, {} train / {} test, ResNet-{} width {}, {} epochs, seeds {:?}",
        recipe.base.data.moons.size,
        recipe.base.data.moons.size,
        recipe.base.data.train_size,
        recipe.base.data.test_size,
        recipe.base.model.depth,
        recipe.base.model.width,
        recipe.base.train.epochs,
        recipe.seeds
    );
    let zoo = match Zoo::new(recipe) {
        Ok(z) => z,
        Err(e) => {
            eprintln!("acceptance: cannot build the model zoo: {e}");
            return ExitCode::FAILURE;
        }
    };
    let all = match run_suite(&zoo, None, &mut |c| println!("{}", c.line())) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("acceptance: suite error: {e}");
            return ExitCode::FAILURE;
        }
    };
    assert_eq!(all.len(), 12, "every criterion reports");
    for c in &all {
        match (c.pass, KNOWN_RED.iter().find(|(id, _)| *id == c.id)) {
            (false, None) => problems.push(format!("criterion {} failed: {}", c.id, c.detail)),
            (true, Some(_)) => problems.push(format!("criterion {} now passes; remove it from KNOWN_RED and the ledger", c.id)),
            _ => {}
        }
    }
    let passed = all.iter().filter(|c| c.pass).count();
    println!("{passed} of {} criteria passed", all.len());
    for (id, why) in KNOWN_RED {
        println!("known red {id:>2}: {why}");
    }
    if problems.is_empty() {
        println!("acceptance: ok (failures are the documented known-red criteria only)");
        ExitCode::SUCCESS
    } else {
        for p in &problems {
            eprintln!("acceptance: {p}");
        }
        ExitCode::FAILURE
    }
}
