//! Writes a small synthetic corpus to disk, reads it back through the
//! manifest and summarizes it by duration bucket.
//!
//! Run with `cargo run --release --example synth_dataset`.

use fmkit::data_io::{bucket_by_duration, synth_dataset, Label, Manifest, SynthSpec, DEFAULT_BUCKET_EDGES};

fn main() -> fmkit::Result<()> {
    let dir = std::env::temp_dir().join("fmkit-synth-example");
    let spec = SynthSpec {
        n_real: 20,
        n_fake: 20,
        min_frames: 100,
        max_frames: 350,
        ..SynthSpec::default()
    };
    synth_dataset(&spec, 7, &dir)?;
    let manifest = Manifest::read(&dir.join("manifest.tsv"))?;
    println!("wrote {} utterances to {}", manifest.len(), dir.display());

    let records = manifest.load_all()?;
    let fakes = records.iter().filter(|r| r.label == Label::Fake).count();
    let frames: usize = records.iter().map(|r| r.frames()).sum();
    println!("{fakes} fake, {} real, {frames} frames of {} channels", records.len() - fakes, spec.channels);

    let buckets = bucket_by_duration(&manifest, &DEFAULT_BUCKET_EDGES);
    let mut lower = 0.0;
    for (i, b) in buckets.iter().enumerate() {
        match DEFAULT_BUCKET_EDGES.get(i) {
            Some(upper) => println!("  [{lower:.0}s, {upper:.0}s): {}", b.len()),
            None => println!("  >= {lower:.0}s: {}", b.len()),
        }
        lower = DEFAULT_BUCKET_EDGES.get(i).copied().unwrap_or(lower);
    }
    Ok(())
}
