//! Runs a time-invariant system both as a recurrence and as a causal
//! convolution with its kernel, and shows that the outputs coincide.
//!
//! Run with `cargo run --release --example lti_scan`.

use fmkit::ssm::{conv_kernel, discretize_zoh, kernel_convolution, scan_recurrent, LtiParams, StateMatrix};

fn main() -> fmkit::Result<()> {
    let sys = discretize_zoh(&LtiParams {
        a: StateMatrix::Diagonal(vec![-0.2, -1.5, -4.0]),
        b: vec![1.0, -0.5, 2.0],
        c: vec![0.7, 1.0, -0.3],
        delta: 0.25,
    })?;
    let x: Vec<f64> = (0..32).map(|t| ((t as f64) * 0.4).sin() + if t == 5 { 2.0 } else { 0.0 }).collect();
    let recurrent = scan_recurrent(&sys, &x)?;
    let convolved = kernel_convolution(&sys, &x);
    println!("first kernel taps: {:.4?}", &conv_kernel(&sys, 6));
    println!("{:>3} {:>10} {:>10} {:>10}", "t", "input", "recurrent", "conv");
    for t in (0..x.len()).step_by(4) {
        println!("{t:>3} {:>10.5} {:>10.5} {:>10.5}", x[t], recurrent[t], convolved[t]);
    }
    let gap = recurrent.iter().zip(&convolved).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    println!("max |recurrent - conv| = {gap:.2e}");
    Ok(())
}
