//! End-to-end detector: input projection, encoder, pooling and classifier head.
//!
//! Class 0 is bona fide speech, class 1 is fake. The detection score is
//! `logit_fake - logit_real`; larger means more likely fake.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::{parse_value, unknown_key, KeyValues};
use crate::encoders::{BlockConfig, Encoder, Variant};
use crate::error::{Error, Result};
use crate::nn::{Ctx, Linear};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

pub const REAL: usize = 0;
pub const FAKE: usize = 1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub head_hidden: usize,
    pub block: BlockConfig,
}

impl ModelConfig {
    pub fn new(input_dim: usize, variant: Variant, d_model: usize, n_blocks: usize) -> Self {
        Self {
            input_dim,
            head_hidden: 80,
            block: BlockConfig::new(variant, d_model, n_blocks),
        }
    }

    pub fn to_kv(&self) -> KeyValues {
        let b = &self.block;
        let m = &b.mamba;
        let a = &b.ablation;
        let mut kv = KeyValues::new();
        kv.set("input_dim", self.input_dim);
        kv.set("head_hidden", self.head_hidden);
        kv.set("variant", b.variant);
        kv.set("d_model", b.d_model);
        kv.set("n_blocks", b.n_blocks);
        kv.set("ffn_mult", b.ffn_mult);
        kv.set("mhsa_heads", b.mhsa_heads);
        kv.set("conv_kernel", b.conv_kernel);
        kv.set("dropout", b.dropout);
        kv.set("double_residual", b.double_residual);
        kv.set("tie_weights", b.tie_weights);
        kv.set("mamba.expand", m.expand);
        kv.set("mamba.d_state", m.d_state);
        kv.set("mamba.conv_width", m.conv_width);
        kv.set("mamba.dt_rank", m.dt_rank);
        kv.set("mamba.use_skip", m.use_skip);
        kv.set("mamba.dt_min", m.dt_min);
        kv.set("mamba.dt_max", m.dt_max);
        kv.set("ablation.disable_pre_ln", a.disable_pre_ln);
        kv.set("ablation.disable_ffn", a.disable_ffn);
        kv.set("ablation.disable_bidirectional", a.disable_bidirectional);
        kv.set("ablation.disable_pooling", a.disable_pooling);
        kv
    }

    /// Applies `kv` (keys relative to the model section) on top of `self`.
    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        for (k, v) in kv.iter() {
            let b = &mut self.block;
            match k {
                "input_dim" => self.input_dim = parse_value(k, v)?,
                "head_hidden" => self.head_hidden = parse_value(k, v)?,
                "variant" => b.variant = v.parse()?,
                "d_model" => b.d_model = parse_value(k, v)?,
                "n_blocks" => b.n_blocks = parse_value(k, v)?,
                "ffn_mult" => b.ffn_mult = parse_value(k, v)?,
                "mhsa_heads" => b.mhsa_heads = parse_value(k, v)?,
                "conv_kernel" => b.conv_kernel = parse_value(k, v)?,
                "dropout" => b.dropout = parse_value(k, v)?,
                "double_residual" => b.double_residual = parse_value(k, v)?,
                "tie_weights" => b.tie_weights = parse_value(k, v)?,
                "mamba.expand" => b.mamba.expand = parse_value(k, v)?,
                "mamba.d_state" => b.mamba.d_state = parse_value(k, v)?,
                "mamba.conv_width" => b.mamba.conv_width = parse_value(k, v)?,
                "mamba.dt_rank" => b.mamba.dt_rank = parse_value(k, v)?,
                "mamba.use_skip" => b.mamba.use_skip = parse_value(k, v)?,
                "mamba.dt_min" => b.mamba.dt_min = parse_value(k, v)?,
                "mamba.dt_max" => b.mamba.dt_max = parse_value(k, v)?,
                "ablation.disable_pre_ln" => b.ablation.disable_pre_ln = parse_value(k, v)?,
                "ablation.disable_ffn" => b.ablation.disable_ffn = parse_value(k, v)?,
                "ablation.disable_bidirectional" => b.ablation.disable_bidirectional = parse_value(k, v)?,
                "ablation.disable_pooling" => b.ablation.disable_pooling = parse_value(k, v)?,
                _ => return unknown_key(&format!("model.{k}")),
            }
        }
        self.block.mamba.d_model = self.block.d_model;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.head_hidden == 0 {
            return Err(Error::Config("input_dim and head_hidden must be positive".into()));
        }
        self.block.validate()
    }

    pub fn num_params(&self) -> usize {
        let d = self.block.d_model;
        let pool = if self.block.ablation.disable_pooling { 0 } else { d + 1 };
        Linear::num_params(self.input_dim, d, true)
            + Encoder::num_params(&self.block)
            + pool
            + Linear::num_params(d, self.head_hidden, true)
            + Linear::num_params(self.head_hidden, 2, true)
    }
}

/// Softmax-over-time pooling with a learned scoring vector.
#[derive(Clone, Debug)]
pub struct AttentionPool {
    w: ParamId,
    b: ParamId,
}

impl AttentionPool {
    fn build<R: rand::Rng>(store: &mut ParamStore, d: usize, rng: &mut R) -> Self {
        Self {
            w: store.uniform("pool.w", [d, 1], 1.0 / (d as f64).sqrt(), rng),
            b: store.zeros("pool.b", [1]),
        }
    }

    /// Pooling weights over frames, shape `1×T`.
    pub fn weights(&self, g: &mut Graph<'_>, h: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let e = g.matmul(h, w)?;
        let e = g.add_row(e, b)?;
        let e = g.transpose(e);
        Ok(g.softmax_rows(e))
    }

    pub fn forward(&self, g: &mut Graph<'_>, h: Var) -> Result<Var> {
        let a = self.weights(g, h)?;
        g.matmul(a, h)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    pub logits: [f64; 2],
    pub score: f64,
}

impl Prediction {
    pub fn from_logits(l: &Tensor) -> Self {
        let logits = [l.data()[REAL], l.data()[FAKE]];
        Self {
            logits,
            score: logits[1] - logits[0],
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    proj: Linear,
    encoder: Encoder,
    pool: Option<AttentionPool>,
    head_hidden: Linear,
    head_out: Linear,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let d = cfg.block.d_model;
        let proj = Linear::build(&mut params, "proj", cfg.input_dim, d, true, &mut rng);
        let encoder = Encoder::build(&mut params, "enc", cfg.block, &mut rng)?;
        let pool = (!cfg.block.ablation.disable_pooling).then(|| AttentionPool::build(&mut params, d, &mut rng));
        let head_hidden = Linear::build(&mut params, "head.hidden", d, cfg.head_hidden, true, &mut rng);
        let head_out = Linear::build(&mut params, "head.out", cfg.head_hidden, 2, true, &mut rng);
        Ok(Self {
            cfg,
            params,
            proj,
            encoder,
            pool,
            head_hidden,
            head_out,
        })
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (t, c) = x.dims2();
        if x.shape().len() != 2 || c != self.cfg.input_dim || t == 0 {
            return Err(Error::ShapeMismatch {
                op: "model input",
                left: x.shape().to_vec(),
                right: vec![0, self.cfg.input_dim],
            });
        }
        Ok(())
    }

    /// Frame-level encoder output, `T×D`.
    pub fn encode(&self, g: &mut Graph<'_>, x: &Tensor, ctx: &mut Ctx<'_>) -> Result<Var> {
        self.check_input(x)?;
        let x = g.constant(x.clone());
        let h = self.proj.forward(g, x)?;
        self.encoder.forward(g, h, ctx)
    }

    /// Utterance embedding, `1×D`.
    pub fn embed(&self, g: &mut Graph<'_>, x: &Tensor, ctx: &mut Ctx<'_>) -> Result<Var> {
        let h = self.encode(g, x, ctx)?;
        match &self.pool {
            Some(p) => p.forward(g, h),
            None => Ok(g.mean_rows(h)),
        }
    }

    /// Class logits, `1×2`.
    pub fn forward(&self, g: &mut Graph<'_>, x: &Tensor, ctx: &mut Ctx<'_>) -> Result<Var> {
        let s = self.embed(g, x, ctx)?;
        let h = self.head_hidden.forward(g, s)?;
        let h = g.silu(h);
        let logits = self.head_out.forward(g, h)?;
        g.check_finite(logits, "logits")?;
        Ok(logits)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Prediction> {
        let mut g = Graph::inference(&self.params);
        let l = self.forward(&mut g, x, &mut Ctx::eval())?;
        Ok(Prediction::from_logits(g.value(l)))
    }

    pub fn pool_weights(&self, x: &Tensor) -> Result<Option<Tensor>> {
        let Some(pool) = &self.pool else {
            return Ok(None);
        };
        let mut g = Graph::inference(&self.params);
        let h = self.encode(&mut g, x, &mut Ctx::eval())?;
        let a = pool.weights(&mut g, h)?;
        Ok(Some(g.value(a).clone()))
    }

    pub fn to_checkpoint(&self, extra: &KeyValues) -> Checkpoint {
        let mut kv = KeyValues::new();
        kv.extend_prefixed("model", &self.cfg.to_kv());
        for (k, v) in extra.iter() {
            kv.set(k, v);
        }
        Checkpoint {
            header: kv.to_text(),
            tensors: self.params.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect(),
        }
    }

    pub fn save(&self, path: &Path, extra: &KeyValues) -> Result<()> {
        self.to_checkpoint(extra).save(path)
    }

    /// Rebuilds a model from a checkpoint; every parameter must be present exactly once.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, KeyValues)> {
        let header = KeyValues::parse(&ck.header)?;
        let mut cfg = ModelConfig::new(1, Variant::PnBiMamba, 1, 1);
        cfg.apply(&header.section("model"))?;
        let mut model = Self::new(cfg, 0)?;
        if ck.tensors.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                model.params.len(),
                ck.tensors.len()
            )));
        }
        for (name, t) in &ck.tensors {
            model.params.set(name, t.clone()).map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        Ok((model, header))
    }

    pub fn load(path: &Path) -> Result<(Self, KeyValues)> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}
