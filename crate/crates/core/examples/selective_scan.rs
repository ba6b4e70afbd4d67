//! Drives the input-selective scan by hand: a large step size on one frame
//! resets the state, a small one lets it carry through.
//!
//! Run with `cargo run --release --example selective_scan`.

use fmkit::ssm::{selective_scan_forward, ScanInputs};

fn main() -> fmkit::Result<()> {
    let t_len = 12;
    // One channel, two state entries with A = -1 and A = -4.
    let a_log = [0.0, 4.0f64.ln()];
    let u: Vec<f64> = (0..t_len).map(|t| if t == 2 { 1.0 } else { 0.0 }).collect();
    let b = vec![1.0; t_len * 2];
    let c = vec![1.0; t_len * 2];
    for (label, reset_at) in [("constant step", None), ("reset at t=6", Some(6))] {
        let delta: Vec<f64> = (0..t_len).map(|t| if Some(t) == reset_at { 10.0 } else { 0.1 }).collect();
        let inp = ScanInputs {
            u: &u,
            delta: &delta,
            a_log: &a_log,
            b: &b,
            c: &c,
            d: None,
            channels: 1,
            state: 2,
        };
        let (y, _) = selective_scan_forward(&inp, false)?;
        println!("{label:<14} {:.4?}", y);
    }
    Ok(())
}
