//! Runs the finite-difference gradient checks of one module, or all.
//!
//! `cargo run --release --example gradient_check -- [splat|losses|nn|model|all]`

use splatdenoise::gradcheck;

fn main() {
    let module = std::env::args().nth(1).unwrap_or_else(|| "all".into());
    let Some(results) = gradcheck::run(&module) else {
        eprintln!("unknown module {module}");
        std::process::exit(2);
    };
    for r in &results {
        println!("{:<5} {:<7} {:<48} {:.2e}", if r.passed() { "ok" } else { "FAIL" }, r.module, r.name, r.max_rel_err);
    }
}
