//! Discretizes a continuous state-space system with a zero-order hold and
//! compares the diagonal and dense paths on the same system.
//!
//! Run with `cargo run --release --example zoh_discretization`.

use fmkit::ssm::{discretize_zoh, LtiParams, StateMatrix};

fn main() -> fmkit::Result<()> {
    let poles = vec![-0.5, -1.0, -2.0, 0.0];
    let b = vec![1.0, 0.5, -0.25, 1.0];
    let c = vec![1.0, 1.0, 1.0, 1.0];
    for delta in [0.01, 0.1, 1.0] {
        let d = discretize_zoh(&LtiParams {
            a: StateMatrix::Diagonal(poles.clone()),
            b: b.clone(),
            c: c.clone(),
            delta,
        })?;
        let StateMatrix::Diagonal(a_d) = &d.a_d else { unreachable!() };
        println!("step {delta:>5}: decay {a_d:.5?}");
        println!("             input {:.5?}", d.b_d);
    }

    // A dense matrix that is diagonal must give the same answer as the diagonal path.
    let dense: Vec<f64> = (0..9).map(|i| if i % 4 == 0 { -1.0 - (i / 4) as f64 } else { 0.0 }).collect();
    let p = |a| LtiParams {
        a,
        b: vec![1.0, 2.0, 3.0],
        c: vec![1.0; 3],
        delta: 0.3,
    };
    let via_dense = discretize_zoh(&p(StateMatrix::Dense(dense)))?;
    let via_diag = discretize_zoh(&p(StateMatrix::Diagonal(vec![-1.0, -2.0, -3.0])))?;
    let gap = via_dense.b_d.iter().zip(&via_diag.b_d).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    println!("dense vs diagonal input matrix, max gap: {gap:.2e}");
    Ok(())
}
