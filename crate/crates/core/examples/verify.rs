//! The built-in oracle suite, clean and with a deliberate defect injected.

use poemkit::faults::Fault;
use poemkit::verify;

fn main() {
    let clean = verify::run(0);
    print!("{}", clean.lines());
    println!("clean build passes: {}", clean.all_passed());
    let broken = verify::run_with_fault(Fault::VectorAttentionWrongAxis, 0);
    for c in broken.checks.iter().filter(|c| !c.passed) {
        println!("with wrong softmax axis, {} fails: {}", c.name, c.detail);
    }
}
