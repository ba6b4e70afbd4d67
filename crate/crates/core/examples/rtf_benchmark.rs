//! Measures the real-time factor of two encoders over utterances of one to
//! six seconds.
//!
//! Run with `cargo run --release --example rtf_benchmark`.

use fmkit::bench::measure_rtf;
use fmkit::encoders::Variant;
use fmkit::pipeline::{Model, ModelConfig};

fn main() -> fmkit::Result<()> {
    let durations = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
    for variant in [Variant::PnBiMamba, Variant::Transformer] {
        let model = Model::new(ModelConfig::new(32, variant, 64, 2), 0)?;
        let report = measure_rtf(&model, &variant.to_string(), &durations, 50, 10, 2)?;
        println!("{}", report.to_text());
    }
    Ok(())
}
