//! Gated Mamba unit and its bidirectional wrapper.

use rand::Rng;

use crate::error::Result;
use crate::nn::{maybe_norm, LayerNorm, Linear};
use crate::ssm::{SelectiveSsm, SsmConfig};
use crate::tensor::{Graph, ParamId, ParamStore, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MambaConfig {
    pub d_model: usize,
    /// Expansion factor: `E = expand · d_model`.
    pub expand: usize,
    pub d_state: usize,
    pub conv_width: usize,
    /// Rank of the Δ projection; 0 picks `ceil(d_model / 16)`.
    pub dt_rank: usize,
    pub use_skip: bool,
    pub dt_min: f64,
    pub dt_max: f64,
}

impl MambaConfig {
    pub fn new(d_model: usize) -> Self {
        Self {
            d_model,
            expand: 2,
            d_state: 16,
            conv_width: 4,
            dt_rank: 0,
            use_skip: true,
            dt_min: 1e-3,
            dt_max: 1e-1,
        }
    }

    pub fn inner(&self) -> usize {
        self.expand * self.d_model
    }

    pub fn ssm(&self) -> SsmConfig {
        SsmConfig {
            channels: self.inner(),
            state: self.d_state,
            dt_rank: if self.dt_rank == 0 { self.d_model.div_ceil(16) } else { self.dt_rank },
            use_skip: self.use_skip,
            dt_min: self.dt_min,
            dt_max: self.dt_max,
        }
    }
}

/// `out = (SSM(SiLU(conv(h W_x))) ⊙ SiLU(h W_z)) W_y`, causal in time.
#[derive(Clone, Debug)]
pub struct MambaUnit {
    pub cfg: MambaConfig,
    pub in_x: Linear,
    pub in_z: Linear,
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub ssm: SelectiveSsm,
    pub out: Linear,
}

impl MambaUnit {
    pub fn build<R: Rng>(store: &mut ParamStore, prefix: &str, cfg: MambaConfig, rng: &mut R) -> Self {
        let (d, e, k) = (cfg.d_model, cfg.inner(), cfg.conv_width);
        let in_x = Linear::build(store, &format!("{prefix}.in_x"), d, e, false, rng);
        let in_z = Linear::build(store, &format!("{prefix}.in_z"), d, e, false, rng);
        let bound = 1.0 / (k as f64).sqrt();
        let conv_w = store.uniform(format!("{prefix}.conv.w"), [k, e], bound, rng);
        let conv_b = store.zeros(format!("{prefix}.conv.b"), [e]);
        let ssm = SelectiveSsm::build(store, &format!("{prefix}.ssm"), cfg.ssm(), rng);
        let out = Linear::build(store, &format!("{prefix}.out"), e, d, false, rng);
        Self { cfg, in_x, in_z, conv_w, conv_b, ssm, out }
    }

    pub fn num_params(cfg: &MambaConfig) -> usize {
        let (d, e, k) = (cfg.d_model, cfg.inner(), cfg.conv_width);
        3 * d * e + k * e + e + SelectiveSsm::num_params(&cfg.ssm())
    }

    pub fn forward(&self, g: &mut Graph<'_>, h: Var) -> Result<Var> {
        let x = self.in_x.forward(g, h)?;
        let z = self.in_z.forward(g, h)?;
        let (w, b) = (g.param(self.conv_w), g.param(self.conv_b));
        let x = g.depthwise_conv(x, w, b, self.cfg.conv_width - 1)?;
        let x = g.silu(x);
        let y = self.ssm.forward(g, x)?;
        let gate = g.silu(z);
        let y = g.mul(y, gate)?;
        let out = self.out.forward(g, y)?;
        g.check_finite(out, "mamba")?;
        Ok(out)
    }
}

/// Time-reversal of a `T×D` sequence.
pub fn flip(g: &mut Graph<'_>, x: Var) -> Var {
    g.flip_rows(x)
}

/// Forward unit on the pre-normalized input plus a time-reversed unit on the
/// raw input; the two outputs are summed.
#[derive(Clone, Debug)]
pub struct BiMambaUnit {
    pub forward_unit: MambaUnit,
    /// `None` when the backward branch is ablated.
    pub backward_unit: Option<MambaUnit>,
    /// `None` when pre-normalization is ablated.
    pub backward_norm: Option<LayerNorm>,
    pub tied: bool,
}

impl BiMambaUnit {
    pub fn build<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        cfg: MambaConfig,
        bidirectional: bool,
        backward_norm: bool,
        tie_weights: bool,
        rng: &mut R,
    ) -> Self {
        let forward_unit = MambaUnit::build(store, &format!("{prefix}.fwd"), cfg, rng);
        let backward_unit = bidirectional.then(|| {
            if tie_weights {
                forward_unit.clone()
            } else {
                MambaUnit::build(store, &format!("{prefix}.bwd"), cfg, rng)
            }
        });
        let backward_norm =
            (bidirectional && backward_norm).then(|| LayerNorm::build(store, &format!("{prefix}.bwd_norm"), cfg.d_model));
        Self {
            forward_unit,
            backward_unit,
            backward_norm,
            tied: tie_weights,
        }
    }

    pub fn num_params(cfg: &MambaConfig, bidirectional: bool, backward_norm: bool, tie_weights: bool) -> usize {
        let unit = MambaUnit::num_params(cfg);
        let mut n = unit;
        if bidirectional {
            n += if tie_weights { 0 } else { unit };
            if backward_norm {
                n += 2 * cfg.d_model;
            }
        }
        n
    }

    /// `raw` feeds the backward branch; `pre_normed` feeds the forward branch.
    pub fn forward(&self, g: &mut Graph<'_>, raw: Var, pre_normed: Var) -> Result<Var> {
        let fwd = self.forward_unit.forward(g, pre_normed)?;
        let Some(unit) = &self.backward_unit else {
            return Ok(fwd);
        };
        let rev = flip(g, raw);
        let rev = maybe_norm(&self.backward_norm, g, rev)?;
        let rev = unit.forward(g, rev)?;
        let bwd = flip(g, rev);
        g.add(fwd, bwd)
    }
}
