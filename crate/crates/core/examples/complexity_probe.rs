//! Times one BiMamba mixer and one multi-head attention mixer over growing
//! sequence lengths and fits the log-log slope of time against length.
//!
//! Run with `cargo run --release --example complexity_probe`.

use fmkit::bench::{complexity_probe, complexity_table, PROBE_LENGTHS};
use fmkit::encoders::Variant;

fn main() -> fmkit::Result<()> {
    let rows = complexity_probe(&[Variant::PnBiMamba, Variant::Transformer], 64, &PROBE_LENGTHS, 3)?;
    print!("{}", complexity_table(&rows));
    Ok(())
}
