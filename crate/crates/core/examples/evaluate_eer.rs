//! Computes the equal error rate, its confidence interval and a
//! per-duration breakdown for a simulated detector.
//!
//! Run with `cargo run --release --example evaluate_eer`.

use fmkit::data_io::{Label, DEFAULT_BUCKET_EDGES};
use fmkit::metrics::{compute_eer, eer_by_bucket, ScoreSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn main() -> fmkit::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let noise = Normal::new(0.0, 1.0).unwrap();
    // Longer utterances give the simulated detector more evidence.
    let items: Vec<(f64, Label, f64)> = (0..2000)
        .map(|i| {
            let label = if i % 2 == 0 { Label::Real } else { Label::Fake };
            let duration: f64 = rng.random_range(2.0..7.0);
            let separation = 0.6 * duration;
            let centre = if label == Label::Fake { separation } else { 0.0 };
            (centre + noise.sample(&mut rng), label, duration)
        })
        .collect();

    let pooled = compute_eer(&ScoreSet::from_labelled(items.iter().map(|&(s, l, _)| (s, l))))?;
    println!(
        "pooled EER {:.2}% ± {:.2}% at threshold {:.3}",
        100.0 * pooled.eer,
        100.0 * pooled.ci_half_width,
        pooled.threshold
    );
    println!("{}", eer_by_bucket(&items, &DEFAULT_BUCKET_EDGES)?.to_text());
    Ok(())
}
