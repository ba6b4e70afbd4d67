//! Builds every encoder variant at the same width and depth and prints
//! parameter counts and single-utterance inference time.
//!
//! Run with `cargo run --release --example encoder_variants`.

use std::time::Instant;

use fmkit::bench::random_input;
use fmkit::encoders::Variant;
use fmkit::pipeline::{Model, ModelConfig};

fn main() -> fmkit::Result<()> {
    let x = random_input(250, 32, 7);
    println!("{:<14} {:>10} {:>12} {:>10}", "variant", "params", "infer_ms", "score");
    for variant in Variant::ALL {
        let model = Model::new(ModelConfig::new(32, variant, 64, 4), 1)?;
        let start = Instant::now();
        let p = model.predict(&x)?;
        let ms = start.elapsed().as_secs_f64() * 1e3;
        println!("{:<14} {:>10} {:>12.2} {:>10.4}", variant.to_string(), model.params.numel(), ms, p.score);
    }
    let mut ablated = ModelConfig::new(32, Variant::PnBiMamba, 64, 4);
    ablated.block.ablation.disable_bidirectional = true;
    ablated.block.ablation.disable_pre_ln = true;
    println!("pn_bimamba without backward branch and pre-norms: {} params", ablated.num_params());
    Ok(())
}
