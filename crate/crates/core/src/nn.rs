//! Small parameterized layers shared by the encoder blocks.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Graph, ParamId, ParamStore, Var};

pub const LN_EPS: f64 = 1e-5;

/// Per-pass settings: dropout is active only when an RNG is supplied.
pub struct Ctx<'r> {
    pub dropout: f64,
    pub rng: Option<&'r mut ChaCha8Rng>,
}

impl<'r> Ctx<'r> {
    pub fn eval() -> Self {
        Self { dropout: 0.0, rng: None }
    }

    pub fn train(dropout: f64, rng: &'r mut ChaCha8Rng) -> Self {
        Self { dropout, rng: Some(rng) }
    }

    pub fn dropout(&mut self, g: &mut Graph<'_>, x: Var) -> Var {
        match self.rng.as_deref_mut() {
            Some(rng) if self.dropout > 0.0 => g.dropout(x, self.dropout, rng),
            _ => x,
        }
    }
}

/// `y = x W (+ b)` with `W: in × out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn build<R: Rng>(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool, rng: &mut R) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        let w = store.uniform(format!("{name}.w"), [d_in, d_out], bound, rng);
        let b = bias.then(|| store.zeros(format!("{name}.b"), [d_out]));
        Self { w, b }
    }

    pub fn num_params(d_in: usize, d_out: usize, bias: bool) -> usize {
        d_in * d_out + if bias { d_out } else { 0 }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Affine layer normalization over the feature axis.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn build(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.full(format!("{name}.gamma"), [dim], 1.0),
            beta: store.zeros(format!("{name}.beta"), [dim]),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta, LN_EPS)
    }
}

/// Optional norm: `None` passes the input through (ablated).
pub fn maybe_norm(norm: &Option<LayerNorm>, g: &mut Graph<'_>, x: Var) -> Result<Var> {
    match norm {
        Some(n) => n.forward(g, x),
        None => Ok(x),
    }
}

/// `Linear(D→mD) → SiLU → Linear(mD→D)`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn build<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, mult: usize, rng: &mut R) -> Self {
        Self {
            up: Linear::build(store, &format!("{name}.up"), dim, dim * mult, true, rng),
            down: Linear::build(store, &format!("{name}.down"), dim * mult, dim, true, rng),
        }
    }

    pub fn num_params(dim: usize, mult: usize) -> usize {
        Linear::num_params(dim, dim * mult, true) + Linear::num_params(dim * mult, dim, true)
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, ctx: &mut Ctx<'_>) -> Result<Var> {
        let h = self.up.forward(g, x)?;
        let h = g.silu(h);
        let h = ctx.dropout(g, h);
        let y = self.down.forward(g, h)?;
        Ok(ctx.dropout(g, y))
    }
}
