//! Trains a PN-BiMamba detector on generated data and reports test EER.
//!
//! Run with `cargo run --release --example train_synthetic -- [n_train] [epochs] [lr]`.

use std::time::Instant;

use fmkit::data_io::{synth_splits, SynthSpec};
use fmkit::encoders::Variant;
use fmkit::pipeline::{Model, ModelConfig};
use fmkit::training::{evaluate, train, RunOutput, TrainConfig};

fn main() -> fmkit::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let arg = |i: usize, d: f64| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let n_train = arg(1, 2000.0) as usize;
    let spec = SynthSpec::default();
    let splits = synth_splits(&spec, [n_train, 500, 500], 1)?;

    let cfg = ModelConfig::new(spec.channels, Variant::PnBiMamba, 64, 4);
    let mut model = Model::new(cfg, 1)?;
    println!("parameters: {}", model.params.numel());

    let train_cfg = TrainConfig {
        max_epochs: arg(2, TrainConfig::desk().max_epochs as f64) as usize,
        lr: arg(3, TrainConfig::desk().lr),
        ..TrainConfig::desk()
    };
    let start = Instant::now();
    let mut log = |r: &fmkit::training::EpochRecord| {
        println!(
            "epoch {:>3}  train {:.4}  dev {:.4}  dev EER {:>5.2}%  [{:.0}s]",
            r.epoch,
            r.train_loss,
            r.dev_loss,
            100.0 * r.dev_eer,
            start.elapsed().as_secs_f64()
        );
    };
    let out = train(
        &mut model,
        &splits.train,
        &splits.dev,
        &train_cfg,
        1,
        RunOutput {
            dir: None,
            on_epoch: Some(&mut log),
        },
    )?;
    if let Some(avg) = out.averaged {
        model.params = avg;
    }
    let (loss, eer) = evaluate(&model, &splits.test, (0.5, 0.5))?;
    println!("test loss {loss:.4}  test EER {:.2}%", 100.0 * eer);
    Ok(())
}
