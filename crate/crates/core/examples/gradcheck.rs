//! Finite-difference check of every differentiable primitive, followed by a
//! run with a deliberately broken backward rule.

use sfwm::numerics::{gradcheck, Primitive};

fn main() {
    let seeds: Vec<u64> = (0..20).collect();
    let report = gradcheck::run(&seeds, None);
    for e in &report.entries {
        println!("{:<16} {:.3e}", e.name, e.max_rel_error);
    }
    println!("passed: {}", report.passed());

    let broken = gradcheck::run(&seeds, Some(Primitive::Tanh));
    let names: Vec<&str> = broken.failures().map(|e| e.name.as_str()).collect();
    println!("with a corrupted tanh rule, failing checks: {names:?}");
}
