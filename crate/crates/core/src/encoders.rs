//! Encoder stacks: three BiMamba block layouts plus Transformer and Conformer baselines.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::mamba::{BiMambaUnit, MambaConfig};
use crate::nn::{maybe_norm, Ctx, FeedForward, LayerNorm, Linear};
use crate::tensor::{Graph, ParamId, ParamStore, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Post-norm: BiMamba replaces self-attention in a Transformer layer.
    TransBiMamba,
    /// Macaron layout: BiMamba replaces self-attention in a Conformer layer.
    ConBiMamba,
    /// Pre-norm layout with the forward branch on normalized input.
    PnBiMamba,
    Transformer,
    Conformer,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::TransBiMamba,
        Variant::ConBiMamba,
        Variant::PnBiMamba,
        Variant::Transformer,
        Variant::Conformer,
    ];

    pub fn uses_mamba(self) -> bool {
        matches!(self, Variant::TransBiMamba | Variant::ConBiMamba | Variant::PnBiMamba)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::TransBiMamba => "trans_bimamba",
            Variant::ConBiMamba => "con_bimamba",
            Variant::PnBiMamba => "pn_bimamba",
            Variant::Transformer => "transformer",
            Variant::Conformer => "conformer",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    /// Accepts `-` or `_` as the word separator.
    fn from_str(s: &str) -> Result<Self> {
        let name = s.replace('-', "_");
        Variant::ALL
            .into_iter()
            .find(|v| v.to_string() == name)
            .ok_or_else(|| Error::Config(format!("unknown encoder variant {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Ablation {
    pub disable_pre_ln: bool,
    pub disable_ffn: bool,
    pub disable_bidirectional: bool,
    /// Read by the pipeline: mean pooling instead of attention pooling.
    pub disable_pooling: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockConfig {
    pub variant: Variant,
    pub d_model: usize,
    pub n_blocks: usize,
    pub ffn_mult: usize,
    pub mhsa_heads: usize,
    /// Depthwise kernel width of the Conformer convolution module.
    pub conv_kernel: usize,
    /// Mamba hyper-parameters; `d_model` here is overridden by the block width.
    pub mamba: MambaConfig,
    pub dropout: f64,
    /// Pre-norm layout: add the un-normalized sum back after the second norm
    /// (`merged = LN(resid) + resid`, `out = FFN(merged) + LN(resid)`). When
    /// false the block is a standard pre-norm layer, `out = resid + FFN(LN(resid))`.
    pub double_residual: bool,
    pub tie_weights: bool,
    pub ablation: Ablation,
}

impl BlockConfig {
    pub fn new(variant: Variant, d_model: usize, n_blocks: usize) -> Self {
        Self {
            variant,
            d_model,
            n_blocks,
            ffn_mult: 4,
            mhsa_heads: 4,
            conv_kernel: 31,
            mamba: MambaConfig::new(d_model),
            dropout: 0.1,
            double_residual: true,
            tie_weights: false,
            ablation: Ablation::default(),
        }
    }

    pub fn mamba_cfg(&self) -> MambaConfig {
        MambaConfig {
            d_model: self.d_model,
            ..self.mamba
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.n_blocks == 0 || self.ffn_mult == 0 {
            return bad("d_model, n_blocks and ffn_mult must be positive".into());
        }
        if !self.variant.uses_mamba() && (self.mhsa_heads == 0 || self.d_model % self.mhsa_heads != 0) {
            return bad(format!("d_model {} not divisible by {} heads", self.d_model, self.mhsa_heads));
        }
        if self.conv_kernel % 2 == 0 {
            return bad("conv_kernel must be odd".into());
        }
        if self.mamba.conv_width == 0 || self.mamba.expand == 0 || self.mamba.d_state == 0 {
            return bad("mamba conv_width, expand and d_state must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

/// Multi-head self-attention with biased projections.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl SelfAttention {
    pub fn build<R: Rng>(store: &mut ParamStore, prefix: &str, d: usize, heads: usize, rng: &mut R) -> Self {
        let mut lin = |n: &str| Linear::build(store, &format!("{prefix}.{n}"), d, d, true, rng);
        Self {
            q: lin("q"),
            k: lin("k"),
            v: lin("v"),
            o: lin("o"),
            heads,
        }
    }

    fn num_params(d: usize) -> usize {
        4 * Linear::num_params(d, d, true)
    }

    pub fn forward(&self, g: &mut Graph<'_>, h: Var) -> Result<Var> {
        let q = self.q.forward(g, h)?;
        let k = self.k.forward(g, h)?;
        let v = self.v.forward(g, h)?;
        let a = g.attention(q, k, v, self.heads)?;
        self.o.forward(g, a)
    }
}

#[derive(Clone, Debug)]
enum Mixer {
    BiMamba(BiMambaUnit),
    Attention(SelfAttention),
}

impl Mixer {
    fn build<R: Rng>(store: &mut ParamStore, prefix: &str, cfg: &BlockConfig, rng: &mut R) -> Self {
        if cfg.variant.uses_mamba() {
            Mixer::BiMamba(BiMambaUnit::build(
                store,
                &format!("{prefix}.bimamba"),
                cfg.mamba_cfg(),
                !cfg.ablation.disable_bidirectional,
                !cfg.ablation.disable_pre_ln,
                cfg.tie_weights,
                rng,
            ))
        } else {
            Mixer::Attention(SelfAttention::build(store, &format!("{prefix}.mhsa"), cfg.d_model, cfg.mhsa_heads, rng))
        }
    }

    fn num_params(cfg: &BlockConfig) -> usize {
        if cfg.variant.uses_mamba() {
            BiMambaUnit::num_params(
                &cfg.mamba_cfg(),
                !cfg.ablation.disable_bidirectional,
                !cfg.ablation.disable_pre_ln,
                cfg.tie_weights,
            )
        } else {
            SelfAttention::num_params(cfg.d_model)
        }
    }

    fn forward(&self, g: &mut Graph<'_>, raw: Var, normed: Var) -> Result<Var> {
        match self {
            Mixer::BiMamba(m) => m.forward(g, raw, normed),
            Mixer::Attention(a) => a.forward(g, normed),
        }
    }
}

/// `LN → Linear(D→2D) → GLU → centered depthwise conv → LN → SiLU → Linear(D→D)`.
#[derive(Clone, Debug)]
pub struct ConvModule {
    norm_in: Option<LayerNorm>,
    pointwise_in: Linear,
    dw_w: ParamId,
    dw_b: ParamId,
    norm_mid: LayerNorm,
    pointwise_out: Linear,
    kernel: usize,
}

impl ConvModule {
    fn build<R: Rng>(store: &mut ParamStore, prefix: &str, cfg: &BlockConfig, rng: &mut R) -> Self {
        let d = cfg.d_model;
        let k = cfg.conv_kernel;
        Self {
            norm_in: (!cfg.ablation.disable_pre_ln).then(|| LayerNorm::build(store, &format!("{prefix}.norm_in"), d)),
            pointwise_in: Linear::build(store, &format!("{prefix}.pw_in"), d, 2 * d, true, rng),
            dw_w: store.uniform(format!("{prefix}.dw.w"), [k, d], 1.0 / (k as f64).sqrt(), rng),
            dw_b: store.zeros(format!("{prefix}.dw.b"), [d]),
            norm_mid: LayerNorm::build(store, &format!("{prefix}.norm_mid"), d),
            pointwise_out: Linear::build(store, &format!("{prefix}.pw_out"), d, d, true, rng),
            kernel: k,
        }
    }

    fn num_params(cfg: &BlockConfig) -> usize {
        let d = cfg.d_model;
        let pre = if cfg.ablation.disable_pre_ln { 0 } else { 2 * d };
        pre + Linear::num_params(d, 2 * d, true) + cfg.conv_kernel * d + d + 2 * d + Linear::num_params(d, d, true)
    }

    fn forward(&self, g: &mut Graph<'_>, h: Var, ctx: &mut Ctx<'_>) -> Result<Var> {
        let x = maybe_norm(&self.norm_in, g, h)?;
        let x = self.pointwise_in.forward(g, x)?;
        let x = g.glu(x)?;
        let (w, b) = (g.param(self.dw_w), g.param(self.dw_b));
        let x = g.depthwise_conv(x, w, b, self.kernel / 2)?;
        let x = self.norm_mid.forward(g, x)?;
        let x = g.silu(x);
        let x = self.pointwise_out.forward(g, x)?;
        Ok(ctx.dropout(g, x))
    }
}

/// Feed-forward with its own optional pre-norm, used in the macaron layout.
#[derive(Clone, Debug)]
struct NormedFfn {
    norm: Option<LayerNorm>,
    ffn: FeedForward,
}

impl NormedFfn {
    fn build<R: Rng>(store: &mut ParamStore, prefix: &str, cfg: &BlockConfig, rng: &mut R) -> Self {
        Self {
            norm: (!cfg.ablation.disable_pre_ln).then(|| LayerNorm::build(store, &format!("{prefix}.norm"), cfg.d_model)),
            ffn: FeedForward::build(store, prefix, cfg.d_model, cfg.ffn_mult, rng),
        }
    }

    fn num_params(cfg: &BlockConfig) -> usize {
        let pre = if cfg.ablation.disable_pre_ln { 0 } else { 2 * cfg.d_model };
        pre + FeedForward::num_params(cfg.d_model, cfg.ffn_mult)
    }

    fn forward(&self, g: &mut Graph<'_>, h: Var, ctx: &mut Ctx<'_>) -> Result<Var> {
        let x = maybe_norm(&self.norm, g, h)?;
        self.ffn.forward(g, x, ctx)
    }
}

/// Post-norm layer: `mid = LN(h + Mix(h))`, `out = LN(mid + FFN(mid))`.
#[derive(Clone, Debug)]
pub struct PostNormBlock {
    mixer: Mixer,
    norm1: LayerNorm,
    ffn: Option<FeedForward>,
    norm2: LayerNorm,
}

impl PostNormBlock {
    fn build<R: Rng>(store: &mut ParamStore, prefix: &str, cfg: &BlockConfig, rng: &mut R) -> Self {
        let d = cfg.d_model;
        Self {
            mixer: Mixer::build(store, prefix, cfg, rng),
            norm1: LayerNorm::build(store, &format!("{prefix}.norm1"), d),
            ffn: (!cfg.ablation.disable_ffn).then(|| FeedForward::build(store, &format!("{prefix}.ffn"), d, cfg.ffn_mult, rng)),
            norm2: LayerNorm::build(store, &format!("{prefix}.norm2"), d),
        }
    }

    fn num_params(cfg: &BlockConfig) -> usize {
        let ffn = if cfg.ablation.disable_ffn { 0 } else { FeedForward::num_params(cfg.d_model, cfg.ffn_mult) };
        Mixer::num_params(cfg) + 4 * cfg.d_model + ffn
    }

    fn forward(&self, g: &mut Graph<'_>, h: Var, ctx: &mut Ctx<'_>) -> Result<Var> {
        let m = self.mixer.forward(g, h, h)?;
        let m = ctx.dropout(g, m);
        let s = g.add(h, m)?;
        let mid = self.norm1.forward(g, s)?;
        let Some(ffn) = &self.ffn else {
            return Ok(mid);
        };
        let f = ffn.forward(g, mid, ctx)?;
        let s = g.add(mid, f)?;
        self.norm2.forward(g, s)
    }
}

/// Macaron layer: half-step FFN, mixer, convolution module, half-step FFN, norm.
#[derive(Clone, Debug)]
pub struct MacaronBlock {
    ffn1: Option<NormedFfn>,
    mix_norm: Option<LayerNorm>,
    mixer: Mixer,
    conv: ConvModule,
    ffn2: Option<NormedFfn>,
    out_norm: LayerNorm,
}

impl MacaronBlock {
    fn build<R: Rng>(store: &mut ParamStore, prefix: &str, cfg: &BlockConfig, rng: &mut R) -> Self {
        let ffn = !cfg.ablation.disable_ffn;
        let ffn1 = ffn.then(|| NormedFfn::build(store, &format!("{prefix}.ffn1"), cfg, rng));
        let mix_norm = (!cfg.ablation.disable_pre_ln).then(|| LayerNorm::build(store, &format!("{prefix}.mix_norm"), cfg.d_model));
        let mixer = Mixer::build(store, prefix, cfg, rng);
        let conv = ConvModule::build(store, &format!("{prefix}.conv"), cfg, rng);
        let ffn2 = ffn.then(|| NormedFfn::build(store, &format!("{prefix}.ffn2"), cfg, rng));
        let out_norm = LayerNorm::build(store, &format!("{prefix}.out_norm"), cfg.d_model);
        Self { ffn1, mix_norm, mixer, conv, ffn2, out_norm }
    }

    fn num_params(cfg: &BlockConfig) -> usize {
        let d = cfg.d_model;
        let ffn = if cfg.ablation.disable_ffn { 0 } else { 2 * NormedFfn::num_params(cfg) };
        let mix_norm = if cfg.ablation.disable_pre_ln { 0 } else { 2 * d };
        ffn + mix_norm + Mixer::num_params(cfg) + ConvModule::num_params(cfg) + 2 * d
    }

    fn half_ffn(ffn: &Option<NormedFfn>, g: &mut Graph<'_>, h: Var, ctx: &mut Ctx<'_>) -> Result<Var> {
        match ffn {
            Some(f) => {
                let y = f.forward(g, h, ctx)?;
                let y = g.scale(y, 0.5);
                g.add(h, y)
            }
            None => Ok(h),
        }
    }

    fn forward(&self, g: &mut Graph<'_>, h: Var, ctx: &mut Ctx<'_>) -> Result<Var> {
        let h = Self::half_ffn(&self.ffn1, g, h, ctx)?;
        let x = maybe_norm(&self.mix_norm, g, h)?;
        let m = self.mixer.forward(g, x, x)?;
        let m = ctx.dropout(g, m);
        let h = g.add(h, m)?;
        let c = self.conv.forward(g, h, ctx)?;
        let h = g.add(h, c)?;
        let h = Self::half_ffn(&self.ffn2, g, h, ctx)?;
        self.out_norm.forward(g, h)
    }
}

/// Pre-norm BiMamba layer.
#[derive(Clone, Debug)]
pub struct PreNormBlock {
    norm1: Option<LayerNorm>,
    bimamba: BiMambaUnit,
    norm2: Option<LayerNorm>,
    ffn: Option<FeedForward>,
    double_residual: bool,
}

impl PreNormBlock {
    fn build<R: Rng>(store: &mut ParamStore, prefix: &str, cfg: &BlockConfig, rng: &mut R) -> Self {
        let d = cfg.d_model;
        let norms = !cfg.ablation.disable_pre_ln;
        let norm1 = norms.then(|| LayerNorm::build(store, &format!("{prefix}.norm1"), d));
        let Mixer::BiMamba(bimamba) = Mixer::build(store, prefix, cfg, rng) else {
            unreachable!("pre-norm block always mixes with BiMamba")
        };
        let norm2 = norms.then(|| LayerNorm::build(store, &format!("{prefix}.norm2"), d));
        let ffn = (!cfg.ablation.disable_ffn).then(|| FeedForward::build(store, &format!("{prefix}.ffn"), d, cfg.ffn_mult, rng));
        Self {
            norm1,
            bimamba,
            norm2,
            ffn,
            double_residual: cfg.double_residual,
        }
    }

    fn num_params(cfg: &BlockConfig) -> usize {
        let norms = if cfg.ablation.disable_pre_ln { 0 } else { 4 * cfg.d_model };
        let ffn = if cfg.ablation.disable_ffn { 0 } else { FeedForward::num_params(cfg.d_model, cfg.ffn_mult) };
        norms + Mixer::num_params(cfg) + ffn
    }

    fn forward(&self, g: &mut Graph<'_>, h: Var, ctx: &mut Ctx<'_>) -> Result<Var> {
        let normed = maybe_norm(&self.norm1, g, h)?;
        let mixed = self.bimamba.forward(g, h, normed)?;
        let mixed = ctx.dropout(g, mixed);
        let resid = g.add(mixed, h)?;
        let normed = maybe_norm(&self.norm2, g, resid)?;
        if !self.double_residual {
            let Some(ffn) = &self.ffn else {
                return Ok(resid);
            };
            let f = ffn.forward(g, normed, ctx)?;
            return g.add(resid, f);
        }
        let merged = g.add(normed, resid)?;
        let Some(ffn) = &self.ffn else {
            return Ok(merged);
        };
        let f = ffn.forward(g, merged, ctx)?;
        g.add(f, normed)
    }
}

#[derive(Clone, Debug)]
pub enum Block {
    PostNorm(PostNormBlock),
    Macaron(MacaronBlock),
    PreNorm(PreNormBlock),
}

impl Block {
    pub fn build<R: Rng>(store: &mut ParamStore, prefix: &str, cfg: &BlockConfig, rng: &mut R) -> Self {
        match cfg.variant {
            Variant::TransBiMamba | Variant::Transformer => Block::PostNorm(PostNormBlock::build(store, prefix, cfg, rng)),
            Variant::ConBiMamba | Variant::Conformer => Block::Macaron(MacaronBlock::build(store, prefix, cfg, rng)),
            Variant::PnBiMamba => Block::PreNorm(PreNormBlock::build(store, prefix, cfg, rng)),
        }
    }

    pub fn num_params(cfg: &BlockConfig) -> usize {
        match cfg.variant {
            Variant::TransBiMamba | Variant::Transformer => PostNormBlock::num_params(cfg),
            Variant::ConBiMamba | Variant::Conformer => MacaronBlock::num_params(cfg),
            Variant::PnBiMamba => PreNormBlock::num_params(cfg),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, h: Var, ctx: &mut Ctx<'_>) -> Result<Var> {
        match self {
            Block::PostNorm(b) => b.forward(g, h, ctx),
            Block::Macaron(b) => b.forward(g, h, ctx),
            Block::PreNorm(b) => b.forward(g, h, ctx),
        }
    }
}

/// A stack of identical-layout blocks.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: BlockConfig,
    pub blocks: Vec<Block>,
}

impl Encoder {
    pub fn build<R: Rng>(store: &mut ParamStore, prefix: &str, cfg: BlockConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let blocks = (0..cfg.n_blocks)
            .map(|i| Block::build(store, &format!("{prefix}.{i}"), &cfg, rng))
            .collect();
        Ok(Self { cfg, blocks })
    }

    pub fn num_params(cfg: &BlockConfig) -> usize {
        cfg.n_blocks * Block::num_params(cfg)
    }

    pub fn forward(&self, g: &mut Graph<'_>, h: Var, ctx: &mut Ctx<'_>) -> Result<Var> {
        let mut h = h;
        for block in &self.blocks {
            h = block.forward(g, h, ctx)?;
            g.check_finite(h, "encoder block")?;
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nn::LN_EPS;
    use crate::tensor::{layer_norm_rows, Tensor};

    fn cfg(variant: Variant) -> BlockConfig {
        let mut c = BlockConfig::new(variant, 8, 2);
        c.mamba.d_state = 4;
        c.conv_kernel = 5;
        c.mhsa_heads = 2;
        c
    }

    fn seq(t: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new([t, d], (0..t * d).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    fn ln(x: &Tensor) -> Tensor {
        let d = x.cols();
        let (out, _, _) = layer_norm_rows(x.data(), d, &vec![1.0; d], &vec![0.0; d], LN_EPS);
        Tensor::new(x.shape().to_vec(), out).unwrap()
    }

    fn run(store: &ParamStore, block: &Block, h: &Tensor) -> Tensor {
        let mut g = Graph::inference(store);
        let x = g.constant(h.clone());
        let y = block.forward(&mut g, x, &mut Ctx::eval()).unwrap();
        g.value(y).clone()
    }

    fn zero_outputs(store: &mut ParamStore) {
        let names: Vec<String> = store.iter().map(|(_, p)| p.name.clone()).collect();
        for name in names {
            let out_proj = name.contains(".out.w")
                || name.contains(".down.")
                || name.contains(".pw_out.")
                || name.contains(".o.");
            if out_proj {
                store.zero_prefix(&name);
            }
        }
    }

    #[test]
    fn zeroed_pre_norm_block_reduces_to_second_norm() {
        let c = cfg(Variant::PnBiMamba);
        let mut store = ParamStore::new();
        let block = Block::build(&mut store, "b", &c, &mut ChaCha8Rng::seed_from_u64(1));
        zero_outputs(&mut store);
        let h = seq(6, 8, 2);
        assert!(run(&store, &block, &h).max_abs_diff(&ln(&h)) < 1e-12);
    }

    #[test]
    fn zeroed_post_norm_block_is_double_norm() {
        for v in [Variant::TransBiMamba, Variant::Transformer] {
            let c = cfg(v);
            let mut store = ParamStore::new();
            let block = Block::build(&mut store, "b", &c, &mut ChaCha8Rng::seed_from_u64(3));
            zero_outputs(&mut store);
            let h = seq(5, 8, 4);
            assert!(run(&store, &block, &h).max_abs_diff(&ln(&ln(&h))) < 1e-12, "{v}");
        }
    }

    #[test]
    fn zeroed_macaron_block_is_single_norm() {
        for v in [Variant::ConBiMamba, Variant::Conformer] {
            let c = cfg(v);
            let mut store = ParamStore::new();
            let block = Block::build(&mut store, "b", &c, &mut ChaCha8Rng::seed_from_u64(5));
            zero_outputs(&mut store);
            let h = seq(7, 8, 6);
            assert!(run(&store, &block, &h).max_abs_diff(&ln(&h)) < 1e-12, "{v}");
        }
    }

    /// Recomputes the pre-norm block from its pieces, one residual at a time.
    fn pre_norm_trace(store: &ParamStore, b: &PreNormBlock, h: &Tensor) -> Tensor {
        let mut g = Graph::inference(store);
        let x = g.constant(h.clone());
        let ctx = &mut Ctx::eval();
        let pre = maybe_norm(&b.norm1, &mut g, x).unwrap();
        let mixed = b.bimamba.forward(&mut g, x, pre).unwrap();
        let mixed = g.value(mixed).clone();
        let resid = mixed.add(h).unwrap();
        let normed = match &b.norm2 {
            Some(_) => ln(&resid),
            None => resid.clone(),
        };
        let merged = normed.add(&resid).unwrap();
        match &b.ffn {
            Some(ffn) => {
                let v = g.constant(merged);
                let f = ffn.forward(&mut g, v, ctx).unwrap();
                g.value(f).add(&normed).unwrap()
            }
            None => merged,
        }
    }

    #[test]
    fn pre_norm_block_matches_residual_trace() {
        for disable_ffn in [false, true] {
            let mut c = cfg(Variant::PnBiMamba);
            c.ablation.disable_ffn = disable_ffn;
            let mut store = ParamStore::new();
            let block = Block::build(&mut store, "b", &c, &mut ChaCha8Rng::seed_from_u64(7));
            let Block::PreNorm(pn) = &block else { unreachable!() };
            let h = seq(9, 8, 8);
            let got = run(&store, &block, &h);
            assert!(got.max_abs_diff(&pre_norm_trace(&store, pn, &h)) < 1e-12);
        }
    }

    #[test]
    fn standard_pre_norm_layout_differs_from_double_residual() {
        let mut c = cfg(Variant::PnBiMamba);
        let mut store = ParamStore::new();
        let block = Block::build(&mut store, "b", &c, &mut ChaCha8Rng::seed_from_u64(9));
        let h = seq(4, 8, 10);
        let a = run(&store, &block, &h);
        c.double_residual = false;
        let mut store2 = ParamStore::new();
        let block2 = Block::build(&mut store2, "b", &c, &mut ChaCha8Rng::seed_from_u64(9));
        assert!(run(&store2, &block2, &h).max_abs_diff(&a) > 1e-6);
    }

    #[test]
    fn analytic_parameter_counts_match_store() {
        for v in Variant::ALL {
            for flags in 0..8u8 {
                let mut c = cfg(v);
                c.ablation.disable_pre_ln = flags & 1 != 0;
                c.ablation.disable_ffn = flags & 2 != 0;
                c.ablation.disable_bidirectional = flags & 4 != 0;
                let mut store = ParamStore::new();
                Encoder::build(&mut store, "enc", c, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
                assert_eq!(store.numel(), Encoder::num_params(&c), "{v} flags {flags}");
            }
        }
    }

    #[test]
    fn attention_baselines_reject_indivisible_heads() {
        let mut c = cfg(Variant::Transformer);
        c.mhsa_heads = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
        }
        assert!("mamba".parse::<Variant>().is_err());
    }
}
