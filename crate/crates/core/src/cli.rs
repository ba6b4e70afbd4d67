//! Command-line front end: `synth`, `train`, `eval`, `bench` and `gradcheck`.
//!
//! Every run resolves one effective configuration (defaults, then `--config`
//! file, then `--set` overrides and subcommand flags), writes it to
//! `<out>/config.txt` and holds `<out>/.lock` while it works.
//!
//! Exit codes: 0 success, 1 failed check, 2 usage or input error, 3 divergence.

use std::ffi::OsString;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::bench::{complexity_probe, complexity_table, measure_rtf, PROBE_LENGTHS};
use crate::config::{parse_value, unknown_key, KeyValues};
use crate::data_io::{synth_dataset, synth_splits, FeatureRecord, Manifest, SynthSpec, DEFAULT_BUCKET_EDGES};
use crate::encoders::Variant;
use crate::error::{Error, Result};
use crate::metrics::{compute_eer, eer_by_bucket, ScoreSet};
use crate::pipeline::{Model, ModelConfig};
use crate::training::{evaluate, gradcheck, gradcheck_config, predict_all, train, EpochRecord, RunOutput, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "fmkit", version, about = "Bidirectional state-space spoof detection toolkit")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// Key-value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed for data generation, initialisation and shuffling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "fmkit-out")]
    out: PathBuf,
    /// Run single-threaded.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Override a config key, e.g. `--set train.lr=1e-4`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic real/fake feature dataset.
    Synth(SynthArgs),
    /// Train a detector and write the averaged checkpoint.
    Train(TrainArgs),
    /// Score a manifest with a checkpoint and report EER.
    Eval(EvalArgs),
    /// Measure real-time factor and optionally the sequence-length scaling.
    Bench(BenchArgs),
    /// Compare analytic and finite-difference gradients on a tiny model.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Number of real utterances.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    n_real: Option<u64>,
    /// Number of fake utterances.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    n_fake: Option<u64>,
    /// Artifact amplitude relative to the channel standard deviation.
    #[arg(long)]
    amplitude: Option<f64>,
    /// Each fake copies its matched real utterance before the artifact is added.
    #[arg(long)]
    paired: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Encoder variant, e.g. pn-bimamba or conformer.
    #[arg(long)]
    variant: Option<Variant>,
    /// Number of encoder blocks.
    #[arg(long)]
    blocks: Option<usize>,
    /// Encoder width.
    #[arg(long)]
    d_model: Option<usize>,
    /// Epoch limit; 0 writes the config snapshot and exits.
    #[arg(long)]
    max_epochs: Option<usize>,
    /// Learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Drop the backward branch of every BiMamba mixer.
    #[arg(long)]
    no_bidirectional: bool,
    /// Drop the pre-norms.
    #[arg(long)]
    no_pre_ln: bool,
    /// Drop the feed-forward sub-layers.
    #[arg(long)]
    no_ffn: bool,
    /// Replace attention pooling with mean pooling.
    #[arg(long)]
    no_pooling: bool,
    /// Training manifest; synthetic splits are generated when omitted.
    #[arg(long, requires = "dev")]
    train: Option<PathBuf>,
    /// Development manifest.
    #[arg(long, requires = "train")]
    dev: Option<PathBuf>,
    /// Optional test manifest scored with the averaged model.
    #[arg(long)]
    test: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Manifest to score; the synthetic test split is used when omitted.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Encoder variants to time. Repeatable.
    #[arg(long = "variant")]
    variants: Vec<Variant>,
    /// Comma-separated durations in seconds.
    #[arg(long, value_delimiter = ',', default_values_t = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0])]
    durations: Vec<f64>,
    /// Timed runs per duration.
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
    runs: u64,
    /// Untimed runs before measuring.
    #[arg(long, default_value_t = 10)]
    warmup: usize,
    /// Print CSV instead of a table.
    #[arg(long)]
    csv: bool,
    /// Use the shared thread pool instead of a single thread.
    #[arg(long)]
    parallel: bool,
    /// Also fit time-vs-length slopes for a BiMamba mixer and attention.
    #[arg(long)]
    probe: bool,
    /// Timed repeats per probe length; the fastest is kept.
    #[arg(long, default_value_t = 3)]
    probe_repeats: usize,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Variants to check. Repeatable; all variants when omitted.
    #[arg(long = "variant")]
    variants: Vec<Variant>,
    /// Maximum accepted relative error.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Minimum sampled coordinates per variant.
    #[arg(long, default_value_t = 50)]
    coords: usize,
    /// Frames in the random input.
    #[arg(long, default_value_t = 6)]
    frames: usize,
}

/// Effective settings of one invocation.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub seed: u64,
    pub deterministic: bool,
    pub synth: SynthSpec,
    /// Utterance counts of the generated train, dev and test splits.
    pub splits: [usize; 3],
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SynthSpec::default();
        Self {
            seed: 1,
            deterministic: false,
            synth,
            splits: [2000, 500, 500],
            model: ModelConfig::new(synth.channels, Variant::PnBiMamba, 64, 4),
            train: TrainConfig::desk(),
        }
    }
}

impl RunConfig {
    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("seed", self.seed);
        kv.set("deterministic", self.deterministic);
        kv.set("data.n_train", self.splits[0]);
        kv.set("data.n_dev", self.splits[1]);
        kv.set("data.n_test", self.splits[2]);
        kv.extend_prefixed("synth", &self.synth.to_kv());
        kv.extend_prefixed("model", &self.model.to_kv());
        kv.extend_prefixed("train", &self.train.to_kv());
        kv
    }

    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        for (k, v) in kv.iter() {
            match k {
                "seed" => self.seed = parse_value(k, v)?,
                "deterministic" => self.deterministic = parse_value(k, v)?,
                "data.n_train" => self.splits[0] = parse_value(k, v)?,
                "data.n_dev" => self.splits[1] = parse_value(k, v)?,
                "data.n_test" => self.splits[2] = parse_value(k, v)?,
                _ if ["synth.", "model.", "train."].iter().any(|p| k.starts_with(p)) => {}
                _ => return unknown_key(k),
            }
        }
        let channels_before = self.synth.channels;
        self.synth.apply(&kv.section("synth"))?;
        if self.synth.channels != channels_before && kv.get("model.input_dim").is_none() {
            self.model.input_dim = self.synth.channels;
        }
        self.train.apply(&kv.section("train"))?;
        self.model.apply(&kv.section("model"))
    }
}

/// Parses `args` (including the program name) and runs the subcommand.
/// Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Exit code for a runtime error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Diverged { .. } | Error::NonFinite { .. } | Error::ScanDiverged { .. } => EXIT_DIVERGED,
        _ => EXIT_USAGE,
    }
}

fn dispatch(cli: Cli) -> Result<i32> {
    let g = cli.global;
    let mut overrides = KeyValues::new();
    if let Some(s) = g.seed {
        overrides.set("seed", s);
    }
    if g.deterministic {
        overrides.set("deterministic", true);
    }
    for o in &g.overrides {
        let (k, v) = KeyValues::parse_override(o)?;
        overrides.set(k, v);
    }
    command_overrides(&cli.command, &mut overrides);

    let mut cfg = RunConfig::default();
    if let Some(path) = &g.config {
        cfg.apply(&KeyValues::load(path)?)?;
    }
    cfg.apply(&overrides)?;
    cfg.synth.validate()?;
    cfg.train.validate()?;

    configure_threads(cfg.deterministic);
    fs::create_dir_all(&g.out)?;
    let _lock = RunLock::acquire(&g.out)?;
    fs::write(g.out.join("config.txt"), cfg.to_kv().to_text())?;

    match cli.command {
        Command::Synth(_) => cmd_synth(&cfg, &g.out),
        Command::Train(a) => cmd_train(&cfg, &a, &g.out),
        Command::Eval(a) => cmd_eval(&cfg, &a, &g.out),
        Command::Bench(a) => cmd_bench(&cfg, &a, &g.out),
        Command::Gradcheck(a) => cmd_gradcheck(&cfg, &a),
    }
}

/// Subcommand flags are recorded as overrides so the snapshot reflects them.
fn command_overrides(cmd: &Command, kv: &mut KeyValues) {
    match cmd {
        Command::Synth(a) => {
            if let Some(n) = a.n_real {
                kv.set("synth.n_real", n);
            }
            if let Some(n) = a.n_fake {
                kv.set("synth.n_fake", n);
            }
            if let Some(x) = a.amplitude {
                kv.set("synth.amplitude", x);
            }
            if a.paired {
                kv.set("synth.paired", true);
            }
        }
        Command::Train(a) => {
            if let Some(v) = a.variant {
                kv.set("model.variant", v);
            }
            if let Some(n) = a.blocks {
                kv.set("model.n_blocks", n);
            }
            if let Some(d) = a.d_model {
                kv.set("model.d_model", d);
            }
            if let Some(n) = a.max_epochs {
                kv.set("train.max_epochs", n);
            }
            if let Some(lr) = a.lr {
                kv.set("train.lr", lr);
            }
            let flags = [
                (a.no_bidirectional, "disable_bidirectional"),
                (a.no_pre_ln, "disable_pre_ln"),
                (a.no_ffn, "disable_ffn"),
                (a.no_pooling, "disable_pooling"),
            ];
            for (on, name) in flags {
                if on {
                    kv.set(format!("model.ablation.{name}"), true);
                }
            }
        }
        Command::Eval(_) | Command::Bench(_) | Command::Gradcheck(_) => {}
    }
}

fn configure_threads(deterministic: bool) {
    let requested = std::env::var("FMKIT_THREADS").ok().and_then(|s| s.parse::<usize>().ok());
    let threads = if deterministic { Some(1) } else { requested };
    if let Some(n) = threads {
        // The global pool can only be configured once per process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

/// Exclusive claim on an output directory, released on drop.
struct RunLock {
    path: PathBuf,
}

impl RunLock {
    fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::InvalidArgument(format!(
                "{} is in use by another run (remove {} if stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<i32> {
    let manifest = synth_dataset(&cfg.synth, cfg.seed, out)?;
    println!("manifest: {}", out.join("manifest.tsv").display());
    println!("real: {}  fake: {}", cfg.synth.n_real, cfg.synth.n_fake);
    debug_assert_eq!(manifest.entries.len(), cfg.synth.n_real + cfg.synth.n_fake);
    Ok(EXIT_OK)
}

fn load_manifest(path: &Path) -> Result<Vec<FeatureRecord>> {
    Manifest::read(path)?.load_all()
}

fn check_channels(records: &[FeatureRecord], expected: usize, what: &str) -> Result<()> {
    match records.iter().find(|r| r.features.cols() != expected) {
        Some(r) => Err(Error::InvalidArgument(format!(
            "{what}: utterance {} has {} channels, model expects {expected}",
            r.id,
            r.features.cols()
        ))),
        None => Ok(()),
    }
}

fn cmd_train(cfg: &RunConfig, a: &TrainArgs, out: &Path) -> Result<i32> {
    if cfg.train.max_epochs == 0 {
        println!("max_epochs is 0: nothing to train");
        return Ok(EXIT_OK);
    }
    let (train_set, dev_set, test_set) = match (&a.train, &a.dev) {
        (Some(t), Some(d)) => {
            let test = a.test.as_deref().map(load_manifest).transpose()?;
            (load_manifest(t)?, load_manifest(d)?, test)
        }
        _ => {
            let s = synth_splits(&cfg.synth, cfg.splits, cfg.seed)?;
            (s.train, s.dev, Some(s.test))
        }
    };
    let mut model_cfg = cfg.model;
    if let Some(r) = train_set.first() {
        model_cfg.input_dim = r.features.cols();
    }
    check_channels(&train_set, model_cfg.input_dim, "train")?;
    check_channels(&dev_set, model_cfg.input_dim, "dev")?;
    let mut model = Model::new(model_cfg, cfg.seed)?;
    println!(
        "{} ({} blocks, d_model {}): {} parameters; {} train / {} dev utterances",
        model_cfg.block.variant,
        model_cfg.block.n_blocks,
        model_cfg.block.d_model,
        model.params.numel(),
        train_set.len(),
        dev_set.len()
    );
    let mut log = |r: &EpochRecord| {
        println!(
            "epoch {:>3}  train_loss {:.4}  dev_loss {:.4}  dev_eer {:.2}%",
            r.epoch,
            r.train_loss,
            r.dev_loss,
            100.0 * r.dev_eer
        );
    };
    let outcome = train(
        &mut model,
        &train_set,
        &dev_set,
        &cfg.train,
        cfg.seed,
        RunOutput {
            dir: Some(out),
            on_epoch: Some(&mut log),
        },
    )?;
    if outcome.stopped_early {
        println!("stopped early after {} epochs", outcome.history.len());
    }
    let epochs: Vec<String> = outcome.top.iter().map(|s| s.epoch.to_string()).collect();
    println!("averaged epochs: {}", epochs.join(","));
    println!("checkpoint: {}", out.join("model_avg.ckpt").display());
    if let (Some(test), Some(avg)) = (test_set, outcome.averaged) {
        model.params = avg;
        let (loss, eer) = evaluate(&model, &test, (0.5, 0.5))?;
        println!("test_loss {loss:.4}  test_eer {:.2}%", 100.0 * eer);
    }
    Ok(EXIT_OK)
}

fn cmd_eval(cfg: &RunConfig, a: &EvalArgs, out: &Path) -> Result<i32> {
    let (model, _) = Model::load(&a.checkpoint)?;
    let (records, frame_rate) = match &a.manifest {
        Some(p) => {
            let m = Manifest::read(p)?;
            (m.load_all()?, m.frame_rate)
        }
        None => (synth_splits(&cfg.synth, cfg.splits, cfg.seed)?.test, cfg.synth.frame_rate),
    };
    check_channels(&records, model.cfg.input_dim, "eval")?;
    let preds = predict_all(&model, &records)?;
    let mut scored: Vec<(&str, f64, f64, crate::data_io::Label)> = records
        .iter()
        .zip(&preds)
        .map(|(r, p)| (r.id.as_str(), p.score, r.frames() as f64 / frame_rate as f64, r.label))
        .collect();
    scored.sort_by(|x, y| x.0.cmp(y.0));
    let pooled = compute_eer(&ScoreSet::from_labelled(scored.iter().map(|s| (s.1, s.3))))?;
    let items: Vec<(f64, crate::data_io::Label, f64)> = scored.iter().map(|s| (s.1, s.3, s.2)).collect();
    let table = eer_by_bucket(&items, &DEFAULT_BUCKET_EDGES)?;
    let report = format!(
        "utterances: {}\npooled EER: {:.2}% +/- {:.2}% (95% CI)\n\n{}",
        records.len(),
        100.0 * pooled.eer,
        100.0 * pooled.ci_half_width,
        table.to_text()
    );
    print!("{report}");
    fs::write(out.join("eval.txt"), &report)?;
    let mut scores = File::create(out.join("scores.tsv"))?;
    for (id, score, _, label) in &scored {
        writeln!(scores, "{id}\t{label}\t{score:.17e}")?;
    }
    Ok(EXIT_OK)
}

fn cmd_bench(cfg: &RunConfig, a: &BenchArgs, out: &Path) -> Result<i32> {
    let variants = if a.variants.is_empty() {
        vec![cfg.model.block.variant]
    } else {
        a.variants.clone()
    };
    let body = || -> Result<String> {
        let mut text = String::new();
        let mut jsonl = String::new();
        for (i, &v) in variants.iter().enumerate() {
            let mut mc = cfg.model;
            mc.block.variant = v;
            let model = Model::new(mc, cfg.seed)?;
            let report = measure_rtf(&model, &v.to_string(), &a.durations, cfg.synth.frame_rate, a.runs as usize, a.warmup)?;
            if a.csv {
                let csv = report.to_csv();
                // One header line for the whole CSV.
                text.push_str(if i == 0 { &csv } else { csv.split_once('\n').map_or("", |x| x.1) });
            } else {
                text.push_str(&report.to_text());
                text.push('\n');
            }
            jsonl.push_str(&report.to_json_lines());
        }
        fs::write(out.join("rtf.jsonl"), jsonl)?;
        if a.probe {
            let probe = complexity_probe(&[Variant::PnBiMamba, Variant::Transformer], cfg.model.block.d_model, &PROBE_LENGTHS, a.probe_repeats)?;
            let table = complexity_table(&probe);
            fs::write(out.join("complexity.txt"), &table)?;
            if !a.csv {
                text.push_str(&table);
            }
        }
        Ok(text)
    };
    let text = if a.parallel {
        body()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
        pool.install(body)?
    };
    print!("{text}");
    Ok(EXIT_OK)
}

fn cmd_gradcheck(cfg: &RunConfig, a: &GradcheckArgs) -> Result<i32> {
    let variants = if a.variants.is_empty() { Variant::ALL.to_vec() } else { a.variants.clone() };
    let mut ok = true;
    for v in variants {
        let model = Model::new(gradcheck_config(v), cfg.seed)?;
        let report = gradcheck(&model, a.frames, a.coords, a.tolerance, cfg.seed)?;
        let status = if report.passed() { "ok" } else { "FAILED" };
        println!(
            "{v:<14} {status:<6} coords {:>4}  max relative error {:.3e}  tolerance {:.1e}",
            report.checks.len(),
            report.max_rel_error(),
            a.tolerance
        );
        if !report.passed() {
            ok = false;
            println!("  failing parameters: {}", report.failing_params().join(", "));
        }
    }
    Ok(if ok { EXIT_OK } else { EXIT_CHECK_FAILED })
}
