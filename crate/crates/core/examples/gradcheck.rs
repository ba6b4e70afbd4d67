//! Compares analytic gradients against central finite differences for a
//! small model of each encoder variant.
//!
//! Run with `cargo run --release --example gradcheck`.

use fmkit::encoders::Variant;
use fmkit::pipeline::Model;
use fmkit::training::{gradcheck, gradcheck_config};

fn main() -> fmkit::Result<()> {
    for variant in Variant::ALL {
        let model = Model::new(gradcheck_config(variant), 11)?;
        let report = gradcheck(&model, 6, 50, 1e-4, 3)?;
        println!(
            "{:<14} {:>3} coordinates  max relative error {:.2e}  {}",
            variant.to_string(),
            report.checks.len(),
            report.max_rel_error(),
            if report.passed() { "ok" } else { "FAILED" }
        );
    }
    Ok(())
}
