//! End-to-end behaviour of the detector: pooling limits, the classifier head
//! and shape contracts.

use fmkit::bench::random_input;
use fmkit::encoders::Variant;
use fmkit::nn::Ctx;
use fmkit::pipeline::{Model, ModelConfig};
use fmkit::tensor::{Graph, Tensor};
use fmkit::training::predict_all;

fn tiny(variant: Variant) -> ModelConfig {
    let mut c = ModelConfig::new(8, variant, 8, 1);
    c.head_hidden = 6;
    c.block.mhsa_heads = 2;
    c.block.conv_kernel = 3;
    c.block.mamba.d_state = 4;
    c
}

fn encode(model: &Model, x: &Tensor) -> Tensor {
    let mut g = Graph::inference(&model.params);
    let h = model.encode(&mut g, x, &mut Ctx::eval()).unwrap();
    g.value(h).clone()
}

fn embed(model: &Model, x: &Tensor) -> Tensor {
    let mut g = Graph::inference(&model.params);
    let s = model.embed(&mut g, x, &mut Ctx::eval()).unwrap();
    g.value(s).clone()
}

fn column_mean(h: &Tensor) -> Vec<f64> {
    let (t, d) = h.dims2();
    (0..d).map(|j| (0..t).map(|i| h.at(i, j)).sum::<f64>() / t as f64).collect()
}

/// Minimum-norm `w` with `h w = target`, for `h` of full row rank.
fn min_norm_solve(h: &Tensor, target: &[f64]) -> Vec<f64> {
    let (t, d) = h.dims2();
    let mut m = vec![0.0; t * (t + 1)];
    for i in 0..t {
        for j in 0..t {
            m[i * (t + 1) + j] = (0..d).map(|k| h.at(i, k) * h.at(j, k)).sum();
        }
        m[i * (t + 1) + t] = target[i];
    }
    for col in 0..t {
        let piv = (col..t).max_by(|&a, &b| m[a * (t + 1) + col].abs().total_cmp(&m[b * (t + 1) + col].abs())).unwrap();
        for k in 0..=t {
            m.swap(col * (t + 1) + k, piv * (t + 1) + k);
        }
        for r in 0..t {
            if r != col {
                let f = m[r * (t + 1) + col] / m[col * (t + 1) + col];
                for k in col..=t {
                    m[r * (t + 1) + k] -= f * m[col * (t + 1) + k];
                }
            }
        }
    }
    let z: Vec<f64> = (0..t).map(|i| m[i * (t + 1) + t] / m[i * (t + 1) + i]).collect();
    (0..d).map(|k| (0..t).map(|i| h.at(i, k) * z[i]).sum()).collect()
}

#[test]
fn zero_scoring_vector_pools_the_temporal_mean() {
    let mut model = Model::new(tiny(Variant::PnBiMamba), 3).unwrap();
    model.params.set("pool.w", Tensor::zeros([8, 1])).unwrap();
    model.params.set("pool.b", Tensor::vector(vec![2.5])).unwrap();
    let x = random_input(9, 8, 1);
    let alpha = model.pool_weights(&x).unwrap().unwrap();
    assert!(alpha.data().iter().all(|&a| (a - 1.0 / 9.0).abs() < 1e-15));
    let mean = column_mean(&encode(&model, &x));
    let pooled = embed(&model, &x);
    for (a, b) in pooled.data().iter().zip(&mean) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn single_frame_pools_to_itself() {
    let model = Model::new(tiny(Variant::ConBiMamba), 4).unwrap();
    let x = random_input(1, 8, 2);
    let h = encode(&model, &x);
    let pooled = embed(&model, &x);
    assert_eq!(pooled.data(), h.data());
}

#[test]
fn dominant_frame_score_saturates_the_pool() {
    let mut model = Model::new(tiny(Variant::PnBiMamba), 5).unwrap();
    let x = random_input(5, 8, 3);
    let h = encode(&model, &x);
    let target = [0.0, 0.0, 50.0, 0.0, 0.0];
    let w = min_norm_solve(&h, &target);
    model.params.set("pool.w", Tensor::new([8, 1], w).unwrap()).unwrap();
    let alpha = model.pool_weights(&x).unwrap().unwrap();
    assert!(alpha.data()[2] > 1.0 - 1e-15);
    let pooled = embed(&model, &x);
    for (j, v) in pooled.data().iter().enumerate() {
        assert!((v - h.at(2, j)).abs() < 1e-12 * (1.0 + h.max_abs()));
    }
}

#[test]
fn zero_head_weights_expose_the_bias() {
    let mut model = Model::new(tiny(Variant::TransBiMamba), 6).unwrap();
    model.params.set("head.out.w", Tensor::zeros([6, 2])).unwrap();
    model.params.set("head.out.b", Tensor::vector(vec![0.25, -0.5])).unwrap();
    let p = model.predict(&random_input(7, 8, 4)).unwrap();
    assert_eq!(p.logits, [0.25, -0.5]);
    assert_eq!(p.score, -0.75);
}

#[test]
fn score_increases_with_fake_bias() {
    let mut model = Model::new(tiny(Variant::PnBiMamba), 7).unwrap();
    let x = random_input(11, 8, 5);
    let mut last = f64::NEG_INFINITY;
    for step in 0..20 {
        let b = -2.0 + 0.2 * step as f64;
        model.params.set("head.out.b", Tensor::vector(vec![0.1, b])).unwrap();
        let s = model.predict(&x).unwrap().score;
        assert!(s > last);
        last = s;
    }
}

#[test]
fn shapes_hold_for_short_and_long_inputs() {
    for variant in Variant::ALL {
        let model = Model::new(tiny(variant), 8).unwrap();
        for t in [1, 9, 208] {
            let x = random_input(t, 8, t as u64);
            assert_eq!(encode(&model, &x).shape(), &[t, 8]);
            assert_eq!(embed(&model, &x).shape(), &[1, 8]);
            assert!(model.predict(&x).unwrap().score.is_finite());
        }
    }
}

#[test]
fn mean_pooling_ablation_equals_zero_scoring_vector() {
    let mut pooled = Model::new(tiny(Variant::PnBiMamba), 9).unwrap();
    pooled.params.set("pool.w", Tensor::zeros([8, 1])).unwrap();
    let mut cfg = tiny(Variant::PnBiMamba);
    cfg.block.ablation.disable_pooling = true;
    let mut plain = Model::new(cfg, 9).unwrap();
    for (_, p) in pooled.params.iter() {
        if !p.name.starts_with("pool.") {
            plain.params.set(&p.name, p.value.clone()).unwrap();
        }
    }
    for t in [1, 6, 30] {
        let x = random_input(t, 8, 10 + t as u64);
        let a = pooled.predict(&x).unwrap().score;
        let b = plain.predict(&x).unwrap().score;
        assert!((a - b).abs() < 1e-12, "T={t}: {a} vs {b}");
    }
}

#[test]
fn construction_and_scoring_are_deterministic() {
    let a = Model::new(tiny(Variant::Conformer), 12).unwrap();
    let b = Model::new(tiny(Variant::Conformer), 12).unwrap();
    assert_eq!(a.params, b.params);
    let x = random_input(13, 8, 6);
    assert_eq!(a.predict(&x).unwrap(), b.predict(&x).unwrap());
}

#[test]
fn scores_do_not_depend_on_other_utterances() {
    use fmkit::data_io::{FeatureRecord, Label};
    let model = Model::new(tiny(Variant::PnBiMamba), 13).unwrap();
    let records: Vec<FeatureRecord> = (0..6)
        .map(|i| FeatureRecord {
            id: format!("u{i}"),
            label: if i % 2 == 0 { Label::Real } else { Label::Fake },
            features: random_input(3 + i, 8, i as u64),
            frame_rate: 50,
        })
        .collect();
    let batch = predict_all(&model, &records).unwrap();
    for (r, p) in records.iter().zip(&batch) {
        assert_eq!(model.predict(&r.features).unwrap(), *p);
    }
}
