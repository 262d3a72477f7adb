//! Runs the full self-check suite: finite differences for every layer and
//! the whole network, the RoIAlign adjoint identity, and closed-form loss
//! values.

use insloc::selfcheck::{run_selfcheck, SelfcheckOptions};

fn main() {
    let checks = run_selfcheck(&SelfcheckOptions::default());
    for c in &checks {
        println!("{}", c.line());
    }
    let failed = checks.iter().filter(|c| !c.passed()).count();
    println!("{} of {} checks passed", checks.len() - failed, checks.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
