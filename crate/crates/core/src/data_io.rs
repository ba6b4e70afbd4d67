//! Feature files, manifests, and the synthetic real/fake feature generator.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::config::{parse_value, unknown_key, KeyValues};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: &[u8; 4] = b"FMFE";
pub const FEATURE_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 4 + 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Real,
    Fake,
}

impl Label {
    /// Class index used by the classifier head.
    pub fn index(self) -> usize {
        match self {
            Label::Real => crate::pipeline::REAL,
            Label::Fake => crate::pipeline::FAKE,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Real => "real",
            Label::Fake => "fake",
        })
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "real" | "bonafide" => Ok(Label::Real),
            "fake" | "spoof" => Ok(Label::Fake),
            _ => Err(format!("unknown label {s:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRecord {
    pub id: String,
    pub label: Label,
    pub features: Tensor,
    pub frame_rate: u32,
}

impl FeatureRecord {
    pub fn frames(&self) -> usize {
        self.features.rows()
    }

    pub fn duration_s(&self) -> f64 {
        self.frames() as f64 / self.frame_rate as f64
    }
}

pub fn encode_features(x: &Tensor) -> Vec<u8> {
    let (t, c) = x.dims2();
    let mut out = Vec::with_capacity(HEADER_LEN + x.len() * 8 + 4);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(t as u32).to_le_bytes());
    out.extend_from_slice(&(c as u32).to_le_bytes());
    let payload_start = out.len();
    for v in x.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&out[payload_start..]);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn decode_features(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let path = path.to_path_buf();
    if bytes.len() < 4 || &bytes[..4] != FEATURE_MAGIC {
        return Err(Error::BadMagic { path });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            path,
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FEATURE_VERSION {
        return Err(Error::BadVersion { path, version });
    }
    let t = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let c = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    if t == 0 || c == 0 {
        return Err(Error::HeaderMismatch {
            path,
            detail: format!("empty shape {t}x{c}"),
        });
    }
    let expected = HEADER_LEN + t * c * 8 + 4;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            path,
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(Error::HeaderMismatch {
            path,
            detail: format!("header says {t}x{c} but file has {} extra bytes", bytes.len() - expected),
        });
    }
    let payload = &bytes[HEADER_LEN..expected - 4];
    let stored = u32::from_le_bytes(bytes[expected - 4..].try_into().unwrap());
    if crc32fast::hash(payload) != stored {
        return Err(Error::Checksum { path });
    }
    let data = payload.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
    Tensor::new([t, c], data)
}

pub fn write_feature_file(path: &Path, x: &Tensor) -> Result<()> {
    if x.shape().len() != 2 || x.is_empty() {
        return Err(Error::InvalidArgument(format!("feature tensor must be non-empty T×C, got {:?}", x.shape())));
    }
    fs::write(path, encode_features(x))?;
    Ok(())
}

pub fn read_feature_file(path: &Path) -> Result<Tensor> {
    decode_features(&fs::read(path)?, path)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    /// Relative to the manifest's directory.
    pub path: PathBuf,
    pub label: Label,
    pub frames: usize,
    pub channels: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub frame_rate: u32,
    pub entries: Vec<ManifestEntry>,
    /// Directory that entry paths are resolved against.
    pub root: PathBuf,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut s = format!("#fmfe-manifest v1 frame_rate={}\n", self.frame_rate);
        for e in &self.entries {
            s.push_str(&format!("{}\t{}\t{}\t{}\t{}\n", e.id, e.path.display(), e.label, e.frames, e.channels));
        }
        s
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let err = |line: usize, detail: String| Error::Manifest {
            path: path.to_path_buf(),
            line,
            detail,
        };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| err(1, "empty manifest".into()))?;
        let frame_rate = header
            .strip_prefix("#fmfe-manifest v1 frame_rate=")
            .and_then(|r| r.trim().parse::<u32>().ok())
            .filter(|&r| r > 0)
            .ok_or_else(|| err(1, format!("bad header {header:?}")))?;
        let mut entries = Vec::new();
        for (i, line) in lines.enumerate() {
            let n = i + 2;
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 5 {
                return Err(err(n, format!("expected 5 tab-separated columns (id, path, label, T, C), found {}", cols.len())));
            }
            let label = cols[2].parse().map_err(|e| err(n, e))?;
            let num = |s: &str, what: &str| s.parse::<usize>().ok().filter(|&v| v > 0).ok_or_else(|| err(n, format!("bad {what} {s:?}")));
            entries.push(ManifestEntry {
                id: cols[0].to_string(),
                path: PathBuf::from(cols[1]),
                label,
                frames: num(cols[3], "T")?,
                channels: num(cols[4], "C")?,
            });
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { frame_rate, entries, root })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn duration_s(&self, e: &ManifestEntry) -> f64 {
        e.frames as f64 / self.frame_rate as f64
    }

    /// Reads one entry's features, checking them against the declared shape.
    pub fn load(&self, e: &ManifestEntry) -> Result<FeatureRecord> {
        let path = self.root.join(&e.path);
        let features = read_feature_file(&path)?;
        if features.shape() != [e.frames, e.channels] {
            return Err(Error::HeaderMismatch {
                path,
                detail: format!("manifest says {}x{}, file has {:?}", e.frames, e.channels, features.shape()),
            });
        }
        Ok(FeatureRecord {
            id: e.id.clone(),
            label: e.label,
            features,
            frame_rate: self.frame_rate,
        })
    }

    pub fn load_all(&self) -> Result<Vec<FeatureRecord>> {
        self.entries.par_iter().map(|e| self.load(e)).collect()
    }
}

/// Parameters of the synthetic real/fake feature generator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthSpec {
    pub n_real: usize,
    pub n_fake: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub channels: usize,
    /// Artifact amplitude relative to the channel's process standard deviation.
    pub amplitude: f64,
    /// Artifact frequency in cycles per frame.
    pub artifact_freq: f64,
    /// Fraction of frames covered by the artifact window.
    pub window_frac: f64,
    /// Fraction of channels carrying the artifact.
    pub channel_frac: f64,
    /// Pole radius of the per-channel AR(2) processes.
    pub pole_radius: f64,
    /// Channel resonances are spaced evenly over this band, in cycles per frame.
    pub resonance: (f64, f64),
    /// Spectral tilt slopes are drawn uniformly from `[-tilt, tilt]`.
    pub tilt: f64,
    /// Generate fakes as copies of their matched real utterance plus the artifact.
    pub paired: bool,
    pub frame_rate: u32,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_real: 1000,
            n_fake: 1000,
            min_frames: 48,
            max_frames: 112,
            channels: 32,
            amplitude: 0.3,
            artifact_freq: 0.4,
            window_frac: 0.1,
            channel_frac: 0.1,
            pole_radius: 0.95,
            resonance: (0.02, 0.1),
            tilt: 1.0,
            paired: false,
            frame_rate: 50,
        }
    }
}

/// Resonance of channel `c` in cycles per frame, evenly spaced over `band`.
pub fn channel_frequency(c: usize, channels: usize, band: (f64, f64)) -> f64 {
    let u = if channels > 1 { c as f64 / (channels - 1) as f64 } else { 0.0 };
    band.0 + (band.1 - band.0) * u
}

/// AR(2) coefficients `(a1, a2)` for `x_t = a1 x_{t-1} + a2 x_{t-2} + s e_t`.
pub fn ar2_coefficients(radius: f64, freq: f64) -> (f64, f64) {
    (2.0 * radius * (2.0 * PI * freq).cos(), -radius * radius)
}

/// Stationary variance of the AR(2) process with unit innovation variance.
pub fn ar2_stationary_variance(a1: f64, a2: f64) -> f64 {
    (1.0 - a2) / ((1.0 + a2) * ((1.0 - a2).powi(2) - a1 * a1))
}

fn tilt_offset(c: usize, channels: usize) -> f64 {
    if channels > 1 {
        c as f64 / (channels - 1) as f64 - 0.5
    } else {
        0.0
    }
}

const BURN_IN: usize = 128;

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.n_real == 0 || self.n_fake == 0 {
            return bad("synthetic counts must be at least 1 per class");
        }
        if self.paired && self.n_real != self.n_fake {
            return bad("paired generation needs n_real == n_fake");
        }
        if self.min_frames == 0 || self.min_frames > self.max_frames {
            return bad("frame range must satisfy 1 <= min_frames <= max_frames");
        }
        if self.channels == 0 {
            return bad("channels must be positive");
        }
        if !(0.0..1.0).contains(&self.pole_radius) {
            return bad("pole_radius must lie in [0, 1)");
        }
        let (lo, hi) = self.resonance;
        if !(0.0 <= lo && lo <= hi && hi <= 0.5) {
            return bad("resonance band must satisfy 0 <= low <= high <= 0.5");
        }
        if !(self.amplitude >= 0.0 && self.tilt >= 0.0 && self.frame_rate > 0) {
            return bad("amplitude and tilt must be non-negative, frame_rate positive");
        }
        if !(0.0..=1.0).contains(&self.window_frac) || !(0.0..=1.0).contains(&self.channel_frac) {
            return bad("window_frac and channel_frac must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("n_real", self.n_real);
        kv.set("n_fake", self.n_fake);
        kv.set("min_frames", self.min_frames);
        kv.set("max_frames", self.max_frames);
        kv.set("channels", self.channels);
        kv.set("amplitude", self.amplitude);
        kv.set("artifact_freq", self.artifact_freq);
        kv.set("window_frac", self.window_frac);
        kv.set("channel_frac", self.channel_frac);
        kv.set("pole_radius", self.pole_radius);
        kv.set("resonance_low", self.resonance.0);
        kv.set("resonance_high", self.resonance.1);
        kv.set("tilt", self.tilt);
        kv.set("paired", self.paired);
        kv.set("frame_rate", self.frame_rate);
        kv
    }

    /// Applies `kv` (keys relative to the synthetic-data section) on top of `self`.
    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        for (k, v) in kv.iter() {
            match k {
                "n_real" => self.n_real = parse_value(k, v)?,
                "n_fake" => self.n_fake = parse_value(k, v)?,
                "min_frames" => self.min_frames = parse_value(k, v)?,
                "max_frames" => self.max_frames = parse_value(k, v)?,
                "channels" => self.channels = parse_value(k, v)?,
                "amplitude" => self.amplitude = parse_value(k, v)?,
                "artifact_freq" => self.artifact_freq = parse_value(k, v)?,
                "window_frac" => self.window_frac = parse_value(k, v)?,
                "channel_frac" => self.channel_frac = parse_value(k, v)?,
                "pole_radius" => self.pole_radius = parse_value(k, v)?,
                "resonance_low" => self.resonance.0 = parse_value(k, v)?,
                "resonance_high" => self.resonance.1 = parse_value(k, v)?,
                "tilt" => self.tilt = parse_value(k, v)?,
                "paired" => self.paired = parse_value(k, v)?,
                "frame_rate" => self.frame_rate = parse_value(k, v)?,
                _ => return unknown_key(&format!("synth.{k}")),
            }
        }
        Ok(())
    }

    /// Unit-variance AR(2) noise with a random per-utterance tilt gain.
    /// Returns the features and each channel's stationary standard deviation.
    fn real_features(&self, frames: usize, rng: &mut ChaCha8Rng) -> (Tensor, Vec<f64>) {
        let c_n = self.channels;
        let tau = if self.tilt > 0.0 { rng.random_range(-self.tilt..=self.tilt) } else { 0.0 };
        let mut x = Tensor::zeros([frames, c_n]);
        let mut gains = Vec::with_capacity(c_n);
        for c in 0..c_n {
            let (a1, a2) = ar2_coefficients(self.pole_radius, channel_frequency(c, c_n, self.resonance));
            let scale = 1.0 / ar2_stationary_variance(a1, a2).sqrt();
            let gain = (tau * tilt_offset(c, c_n)).exp();
            gains.push(gain);
            let (mut p1, mut p2) = (0.0, 0.0);
            for t in 0..BURN_IN + frames {
                let e: f64 = rng.sample(StandardNormal);
                let v = a1 * p1 + a2 * p2 + scale * e;
                p2 = p1;
                p1 = v;
                if t >= BURN_IN {
                    x.data_mut()[(t - BURN_IN) * c_n + c] = gain * v;
                }
            }
        }
        (x, gains)
    }

    /// Adds a sinusoid on a random channel subset inside a random window.
    /// Returns the window start and chosen channels.
    fn add_artifact(&self, x: &mut Tensor, stds: &[f64], rng: &mut ChaCha8Rng) -> (usize, Vec<usize>) {
        let (frames, c_n) = x.dims2();
        let width = ((self.window_frac * frames as f64).ceil() as usize).clamp(1, frames);
        let count = ((self.channel_frac * c_n as f64).ceil() as usize).clamp(1, c_n);
        let start = rng.random_range(0..=frames - width);
        let mut chans = sample(rng, c_n, count).into_vec();
        chans.sort_unstable();
        let phase = rng.random_range(0.0..2.0 * PI);
        for &c in &chans {
            let std = stds[c];
            for t in 0..width {
                let s = (2.0 * PI * self.artifact_freq * t as f64 + phase).sin();
                x.data_mut()[(start + t) * c_n + c] += self.amplitude * std * s;
            }
        }
        (start, chans)
    }

    fn utterance_rng(seed: u64, index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index as u64);
        rng
    }

    /// Generates records in memory: reals first, then fakes. Each utterance has
    /// its own RNG stream, so output is independent of thread count.
    pub fn generate(&self, seed: u64) -> Result<Vec<FeatureRecord>> {
        self.validate()?;
        let total = self.n_real + self.n_fake;
        let records = (0..total)
            .into_par_iter()
            .map(|i| {
                let fake = i >= self.n_real;
                // Paired fakes replay the matched real utterance's stream.
                let base = if fake && self.paired { i - self.n_real } else { i };
                let mut rng = Self::utterance_rng(seed, base);
                let frames = rng.random_range(self.min_frames..=self.max_frames);
                let (mut x, stds) = self.real_features(frames, &mut rng);
                if fake {
                    let mut art = Self::utterance_rng(seed ^ 0xA57F_AC7D, i);
                    self.add_artifact(&mut x, &stds, &mut art);
                }
                let label = if fake { Label::Fake } else { Label::Real };
                FeatureRecord {
                    id: format!("{label}_{i:06}"),
                    label,
                    features: x,
                    frame_rate: self.frame_rate,
                }
            })
            .collect();
        Ok(records)
    }

    /// Channel-wise closed-form variance of real features, averaged over tilt draws.
    pub fn expected_variance(&self, c: usize) -> f64 {
        let k = 2.0 * self.tilt * tilt_offset(c, self.channels);
        if k.abs() < 1e-12 {
            1.0
        } else {
            k.sinh() / k
        }
    }
}

/// Writes records as feature files under `dir` plus `dir/manifest.tsv`.
pub fn write_dataset(records: &[FeatureRecord], dir: &Path, frame_rate: u32) -> Result<Manifest> {
    fs::create_dir_all(dir.join("features"))?;
    let entries = records
        .iter()
        .map(|r| {
            let rel = PathBuf::from("features").join(format!("{}.fmfe", r.id));
            write_feature_file(&dir.join(&rel), &r.features)?;
            Ok(ManifestEntry {
                id: r.id.clone(),
                path: rel,
                label: r.label,
                frames: r.frames(),
                channels: r.features.cols(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        frame_rate,
        entries,
        root: dir.to_path_buf(),
    };
    manifest.write(&dir.join("manifest.tsv"))?;
    Ok(manifest)
}

pub fn synth_dataset(spec: &SynthSpec, seed: u64, dir: &Path) -> Result<Manifest> {
    write_dataset(&spec.generate(seed)?, dir, spec.frame_rate)
}

/// Train/dev/test splits drawn from one seed, each class-balanced.
pub struct Splits {
    pub train: Vec<FeatureRecord>,
    pub dev: Vec<FeatureRecord>,
    pub test: Vec<FeatureRecord>,
}

pub fn synth_splits(spec: &SynthSpec, sizes: [usize; 3], seed: u64) -> Result<Splits> {
    let mut parts = sizes.iter().enumerate().map(|(k, &n)| {
        let s = SynthSpec {
            n_real: n / 2,
            n_fake: n - n / 2,
            paired: spec.paired && n % 2 == 0,
            ..*spec
        };
        s.generate(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k as u64 + 1))
    });
    Ok(Splits {
        train: parts.next().unwrap()?,
        dev: parts.next().unwrap()?,
        test: parts.next().unwrap()?,
    })
}

pub const DEFAULT_BUCKET_EDGES: [f64; 4] = [3.0, 4.0, 5.0, 6.0];

/// Index of the left-closed, right-open bucket holding `duration`.
pub fn bucket_index(duration: f64, edges: &[f64]) -> usize {
    edges.partition_point(|&e| e <= duration)
}

pub fn bucket_label(i: usize, edges: &[f64]) -> String {
    match i {
        0 => format!("<{}s", edges[0]),
        i if i == edges.len() => format!(">={}s", edges[i - 1]),
        i => format!("{}-{}s", edges[i - 1], edges[i]),
    }
}

/// Partitions entry indices by duration into `edges.len() + 1` buckets.
pub fn bucket_by_duration(manifest: &Manifest, edges: &[f64]) -> Vec<Vec<usize>> {
    let mut buckets = vec![Vec::new(); edges.len() + 1];
    for (i, e) in manifest.entries.iter().enumerate() {
        buckets[bucket_index(manifest.duration_s(e), edges)].push(i);
    }
    buckets
}
