//! Real-time-factor measurement and time-vs-length scaling probes.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoders::{BlockConfig, SelfAttention, Variant};
use crate::error::{Error, Result};
use crate::mamba::BiMambaUnit;
use crate::nn::LayerNorm;
use crate::pipeline::Model;
use crate::tensor::{Graph, ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct RtfRow {
    pub duration_s: f64,
    pub frames: usize,
    pub mean_rtf: f64,
    pub std_rtf: f64,
    pub runs: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RtfReport {
    pub model_id: String,
    pub warmup_runs: usize,
    pub parallel: bool,
    /// Set when the clock's resolution exceeds 1% of some measured run.
    pub timer_warning: bool,
    pub rows: Vec<RtfRow>,
}

/// Smallest non-zero step observed on the monotonic clock.
pub fn timer_resolution() -> Duration {
    let mut best = Duration::MAX;
    for _ in 0..32 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min(b - a);
    }
    best
}

pub fn random_input(frames: usize, channels: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..frames * channels).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new([frames, channels], data).expect("shape")
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Times full-model inference on random inputs of each duration.
pub fn measure_rtf(
    model: &Model,
    model_id: &str,
    durations: &[f64],
    frame_rate: u32,
    runs: usize,
    warmup_runs: usize,
) -> Result<RtfReport> {
    if runs == 0 {
        return Err(Error::InvalidArgument("runs must be at least 1".into()));
    }
    let resolution = timer_resolution().as_secs_f64();
    let mut timer_warning = false;
    let mut rows = Vec::with_capacity(durations.len());
    for (i, &d) in durations.iter().enumerate() {
        if !(d > 0.0) {
            return Err(Error::InvalidArgument(format!("duration {d} must be positive")));
        }
        let frames = ((frame_rate as f64 * d).round() as usize).max(1);
        let x = random_input(frames, model.cfg.input_dim, i as u64);
        for _ in 0..warmup_runs {
            model.predict(&x)?;
        }
        let mut rtfs = Vec::with_capacity(runs);
        for _ in 0..runs {
            let start = Instant::now();
            model.predict(&x)?;
            let secs = start.elapsed().as_secs_f64();
            timer_warning |= resolution > 0.01 * secs;
            rtfs.push(secs / d);
        }
        let (mean_rtf, std_rtf) = mean_std(&rtfs);
        rows.push(RtfRow {
            duration_s: d,
            frames,
            mean_rtf,
            std_rtf,
            runs,
        });
    }
    Ok(RtfReport {
        model_id: model_id.to_string(),
        warmup_runs,
        parallel: rayon::current_num_threads() > 1,
        timer_warning,
        rows,
    })
}

impl RtfReport {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "model {}  warmup {}  mode {}{}\n{:>8} {:>7} {:>12} {:>12} {:>5}\n",
            self.model_id,
            self.warmup_runs,
            if self.parallel { "parallel" } else { "single-thread" },
            if self.timer_warning { "  [warning: coarse timer]" } else { "" },
            "dur_s",
            "frames",
            "mean_rtf",
            "std_rtf",
            "runs"
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{:>8.2} {:>7} {:>12.6} {:>12.6} {:>5}\n",
                r.duration_s, r.frames, r.mean_rtf, r.std_rtf, r.runs
            ));
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("model,duration_s,frames,mean_rtf,std_rtf,runs,warmup,parallel,timer_warning\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                self.model_id, r.duration_s, r.frames, r.mean_rtf, r.std_rtf, r.runs, self.warmup_runs, self.parallel, self.timer_warning
            ));
        }
        s
    }

    /// One JSON object per row.
    pub fn to_json_lines(&self) -> String {
        self.rows
            .iter()
            .map(|r| {
                serde_json::json!({
                    "model": self.model_id,
                    "duration_s": r.duration_s,
                    "frames": r.frames,
                    "mean_rtf": r.mean_rtf,
                    "std_rtf": r.std_rtf,
                    "runs": r.runs,
                    "warmup_runs": self.warmup_runs,
                    "parallel": self.parallel,
                    "timer_warning": self.timer_warning,
                })
                .to_string()
                    + "\n"
            })
            .collect()
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

/// The sequence mixer being timed: a BiMamba unit or multi-head self-attention.
pub enum ProbeMixer {
    BiMamba { unit: BiMambaUnit, norm: LayerNorm },
    Attention(SelfAttention),
}

pub struct ProbeTarget {
    pub name: String,
    pub params: ParamStore,
    pub mixer: ProbeMixer,
    pub d_model: usize,
}

impl ProbeTarget {
    /// Builds the mixer used by `variant` at width `d_model`.
    pub fn new(variant: Variant, d_model: usize, seed: u64) -> Result<Self> {
        let cfg = BlockConfig::new(variant, d_model, 1);
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mixer = if variant.uses_mamba() {
            let unit = BiMambaUnit::build(&mut params, "bimamba", cfg.mamba_cfg(), true, true, false, &mut rng);
            let norm = LayerNorm::build(&mut params, "norm", d_model);
            ProbeMixer::BiMamba { unit, norm }
        } else {
            ProbeMixer::Attention(SelfAttention::build(&mut params, "mhsa", d_model, cfg.mhsa_heads, &mut rng))
        };
        let name = match mixer {
            ProbeMixer::BiMamba { .. } => "bimamba",
            ProbeMixer::Attention(_) => "mhsa",
        };
        Ok(Self {
            name: name.to_string(),
            params,
            mixer,
            d_model,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::inference(&self.params);
        let h = g.constant(x.clone());
        let y = match &self.mixer {
            ProbeMixer::BiMamba { unit, norm } => {
                let n = norm.forward(&mut g, h)?;
                unit.forward(&mut g, h, n)?
            }
            ProbeMixer::Attention(a) => a.forward(&mut g, h)?,
        };
        Ok(g.value(y).clone())
    }

    /// Best-of-`repeats` forward time in seconds at each length.
    pub fn time_grid(&self, lengths: &[usize], repeats: usize) -> Result<Vec<(usize, f64)>> {
        lengths
            .iter()
            .map(|&t| {
                let x = random_input(t, self.d_model, t as u64);
                self.forward(&x)?;
                let mut best = f64::INFINITY;
                for _ in 0..repeats.max(1) {
                    let start = Instant::now();
                    self.forward(&x)?;
                    best = best.min(start.elapsed().as_secs_f64());
                }
                Ok((t, best))
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComplexityRow {
    pub name: String,
    pub timings: Vec<(usize, f64)>,
    pub slope: f64,
}

pub const PROBE_LENGTHS: [usize; 6] = [256, 512, 1024, 2048, 4096, 8192];

pub fn complexity_probe(variants: &[Variant], d_model: usize, lengths: &[usize], repeats: usize) -> Result<Vec<ComplexityRow>> {
    variants
        .iter()
        .map(|&v| {
            let target = ProbeTarget::new(v, d_model, 0)?;
            let timings = target.time_grid(lengths, repeats)?;
            let pts: Vec<(f64, f64)> = timings.iter().map(|&(t, s)| (t as f64, s)).collect();
            Ok(ComplexityRow {
                name: target.name,
                slope: loglog_slope(&pts),
                timings,
            })
        })
        .collect()
}

pub fn complexity_table(rows: &[ComplexityRow]) -> String {
    let mut s = format!("{:<10} {:>7} {:>12}\n", "mixer", "T", "seconds");
    for r in rows {
        for &(t, secs) in &r.timings {
            s.push_str(&format!("{:<10} {:>7} {:>12.6}\n", r.name, t, secs));
        }
        s.push_str(&format!("{:<10} slope {:.3}\n", r.name, r.slope));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_exact_power_laws() {
        let lin: Vec<(f64, f64)> = PROBE_LENGTHS.iter().map(|&t| (t as f64, 3e-6 * t as f64)).collect();
        assert!((loglog_slope(&lin) - 1.0).abs() < 1e-6);
        let quad: Vec<(f64, f64)> = PROBE_LENGTHS.iter().map(|&t| (t as f64, 1e-9 * (t * t) as f64)).collect();
        assert!((loglog_slope(&quad) - 2.0).abs() < 1e-6);
    }

    #[test]
    fn mean_std_of_constant_is_zero_spread() {
        assert_eq!(mean_std(&[2.0, 2.0, 2.0]), (2.0, 0.0));
    }

    #[test]
    fn probe_targets_preserve_shape() {
        for v in [Variant::PnBiMamba, Variant::Transformer] {
            let p = ProbeTarget::new(v, 8, 1).unwrap();
            let x = random_input(5, 8, 2);
            assert_eq!(p.forward(&x).unwrap().shape(), &[5, 8]);
        }
    }
}
