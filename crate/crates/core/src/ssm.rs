//! State-space mathematics: zero-order-hold discretization, the discrete
//! recurrence, its equivalent convolution kernel, and the input-selective scan.
//!
//! The continuous system is `g'(t) = A g(t) + B x(t)`, `y(t) = C g(t)`. After
//! discretization with step Δ the recurrence is `g_t = A_d g_{t-1} + B_d x_t`
//! with read-out `y_t = C g_t`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::kernels::wide_fn;
use crate::tensor::{exp_fast, CustomOp, Graph, ParamId, ParamStore, Tensor, Var};

/// Continuous-time evolution matrix, dense or diagonal.
#[derive(Clone, Debug, PartialEq)]
pub enum StateMatrix {
    Diagonal(Vec<f64>),
    /// Row-major `n × n`.
    Dense(Vec<f64>),
}

impl StateMatrix {
    pub fn dim(&self) -> usize {
        match self {
            Self::Diagonal(d) => d.len(),
            Self::Dense(m) => (m.len() as f64).sqrt().round() as usize,
        }
    }

    fn apply(&self, g: &[f64], out: &mut [f64]) {
        match self {
            Self::Diagonal(d) => {
                for i in 0..d.len() {
                    out[i] = d[i] * g[i];
                }
            }
            Self::Dense(m) => {
                let n = g.len();
                for i in 0..n {
                    out[i] = (0..n).map(|j| m[i * n + j] * g[j]).sum();
                }
            }
        }
    }
}

/// Continuous single-input single-output state-space parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct LtiParams {
    pub a: StateMatrix,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub delta: f64,
}

/// Discrete parameters `(A_d, B_d, C)` ready for scanning.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteLti {
    pub a_d: StateMatrix,
    pub b_d: Vec<f64>,
    pub c: Vec<f64>,
}

/// `(e^x - 1) / x`, continuous at zero.
pub fn expm1_over_x(x: f64) -> f64 {
    if x.abs() < 1e-10 {
        1.0 + x / 2.0
    } else {
        x.exp_m1() / x
    }
}

/// Zero-order hold: `A_d = exp(ΔA)`, `B_d = (ΔA)^{-1}(exp(ΔA) - I) ΔB`.
///
/// The diagonal path uses the `(e^x - 1)/x` limit for zero entries; the dense
/// path solves against `ΔA` and fails when it is singular.
pub fn discretize_zoh(p: &LtiParams) -> Result<DiscreteLti> {
    if !(p.delta > 0.0) {
        return Err(Error::InvalidArgument(format!("delta must be positive, got {}", p.delta)));
    }
    let n = p.a.dim();
    if p.b.len() != n || p.c.len() != n {
        return Err(Error::InvalidArgument(format!(
            "state dim {n} but B has {} and C has {} entries",
            p.b.len(),
            p.c.len()
        )));
    }
    let dt = p.delta;
    match &p.a {
        StateMatrix::Diagonal(a) => {
            let a_d = a.iter().map(|&ai| (dt * ai).exp()).collect();
            let b_d = a.iter().zip(&p.b).map(|(&ai, &bi)| expm1_over_x(dt * ai) * dt * bi).collect();
            Ok(DiscreteLti {
                a_d: StateMatrix::Diagonal(a_d),
                b_d,
                c: p.c.clone(),
            })
        }
        StateMatrix::Dense(a) => {
            let da: Vec<f64> = a.iter().map(|v| v * dt).collect();
            let e = dense::expm(&da, n);
            let mut rhs = e.clone();
            for i in 0..n {
                rhs[i * n + i] -= 1.0;
            }
            let db: Vec<f64> = p.b.iter().map(|v| v * dt).collect();
            let rhs_b = dense::matvec(&rhs, &db, n);
            let b_d = dense::solve(&da, &rhs_b, n).ok_or_else(|| {
                Error::InvalidArgument("singular ΔA in dense zero-order hold".to_string())
            })?;
            Ok(DiscreteLti {
                a_d: StateMatrix::Dense(e),
                b_d,
                c: p.c.clone(),
            })
        }
    }
}

/// Sequential recurrence from `g_0 = 0`.
pub fn scan_recurrent(p: &DiscreteLti, x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::InvalidArgument("scan over an empty sequence".to_string()));
    }
    let n = p.b_d.len();
    let mut g = vec![0.0; n];
    let mut next = vec![0.0; n];
    let mut y = Vec::with_capacity(x.len());
    for (t, &xt) in x.iter().enumerate() {
        p.a_d.apply(&g, &mut next);
        for i in 0..n {
            next[i] += p.b_d[i] * xt;
        }
        std::mem::swap(&mut g, &mut next);
        if !g.iter().all(|v| v.is_finite()) {
            return Err(Error::ScanDiverged { timestep: t });
        }
        y.push(p.c.iter().zip(&g).map(|(c, s)| c * s).sum());
    }
    Ok(y)
}

/// Convolution kernel `K_d = (C B_d, C A_d B_d, …, C A_d^{M-1} B_d)`.
pub fn conv_kernel(p: &DiscreteLti, m: usize) -> Vec<f64> {
    let n = p.b_d.len();
    let mut v = p.b_d.clone();
    let mut next = vec![0.0; n];
    let mut k = Vec::with_capacity(m);
    for _ in 0..m {
        k.push(p.c.iter().zip(&v).map(|(c, s)| c * s).sum());
        p.a_d.apply(&v, &mut next);
        std::mem::swap(&mut v, &mut next);
    }
    k
}

/// Causal convolution `y = x * K_d`, equal to [`scan_recurrent`] for any
/// time-invariant parameterization.
pub fn kernel_convolution(p: &DiscreteLti, x: &[f64]) -> Vec<f64> {
    let k = conv_kernel(p, x.len());
    (0..x.len())
        .map(|t| (0..=t).map(|j| k[j] * x[t - j]).sum())
        .collect()
}

mod dense {
    pub fn matmul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
        let mut c = vec![0.0; n * n];
        for i in 0..n {
            for k in 0..n {
                let aik = a[i * n + k];
                for j in 0..n {
                    c[i * n + j] += aik * b[k * n + j];
                }
            }
        }
        c
    }

    pub fn matvec(a: &[f64], x: &[f64], n: usize) -> Vec<f64> {
        (0..n).map(|i| (0..n).map(|j| a[i * n + j] * x[j]).sum()).collect()
    }

    /// Scaling and squaring with a degree-18 Taylor series.
    pub fn expm(a: &[f64], n: usize) -> Vec<f64> {
        let norm = (0..n)
            .map(|i| (0..n).map(|j| a[i * n + j].abs()).sum::<f64>())
            .fold(0.0, f64::max);
        let s = if norm > 0.5 { (norm / 0.5).log2().ceil() as i32 } else { 0 };
        let scale = 0.5f64.powi(s);
        let x: Vec<f64> = a.iter().map(|v| v * scale).collect();
        let mut result = vec![0.0; n * n];
        let mut term = vec![0.0; n * n];
        for i in 0..n {
            result[i * n + i] = 1.0;
            term[i * n + i] = 1.0;
        }
        for k in 1..=18 {
            term = matmul(&term, &x, n);
            for v in &mut term {
                *v /= k as f64;
            }
            for (r, t) in result.iter_mut().zip(&term) {
                *r += t;
            }
        }
        for _ in 0..s {
            result = matmul(&result, &result, n);
        }
        result
    }

    /// Gaussian elimination with partial pivoting. `None` when singular.
    pub fn solve(a: &[f64], b: &[f64], n: usize) -> Option<Vec<f64>> {
        let mut m = a.to_vec();
        let mut x = b.to_vec();
        let scale = a.iter().fold(0.0f64, |s, v| s.max(v.abs())).max(f64::MIN_POSITIVE);
        for col in 0..n {
            let piv = (col..n).max_by(|&i, &j| m[i * n + col].abs().total_cmp(&m[j * n + col].abs()))?;
            if m[piv * n + col].abs() <= 1e-13 * scale {
                return None;
            }
            if piv != col {
                for j in 0..n {
                    m.swap(piv * n + j, col * n + j);
                }
                x.swap(piv, col);
            }
            for r in col + 1..n {
                let f = m[r * n + col] / m[col * n + col];
                for j in col..n {
                    m[r * n + j] -= f * m[col * n + j];
                }
                x[r] -= f * x[col];
            }
        }
        for col in (0..n).rev() {
            let s: f64 = (col + 1..n).map(|j| m[col * n + j] * x[j]).sum();
            x[col] = (x[col] - s) / m[col * n + col];
        }
        Some(x)
    }
}

/// Raw inputs of one selective scan, all row-major.
///
/// `u, delta: T×E`, `a_log: E×N` (A = −exp(A_log)), `b, c: T×N`, `d: E`.
pub struct ScanInputs<'a> {
    pub u: &'a [f64],
    pub delta: &'a [f64],
    pub a_log: &'a [f64],
    pub b: &'a [f64],
    pub c: &'a [f64],
    pub d: Option<&'a [f64]>,
    pub channels: usize,
    pub state: usize,
}

/// Dot product with four partial sums.
#[inline(always)]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut lanes = [0.0; 4];
    let (ac, bc) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ar, br) = (ac.remainder(), bc.remainder());
    for (x, y) in ac.zip(bc) {
        for l in 0..4 {
            lanes[l] += x[l] * y[l];
        }
    }
    let mut s = (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]);
    for (x, y) in ar.iter().zip(br) {
        s += x * y;
    }
    s
}

/// Saved forward quantities for the scan backward: the decay `exp(Δ_t A)` and
/// the state `g_t` for every step.
pub struct ScanTrace {
    decay: Vec<f64>,
    states: Vec<f64>,
}

wide_fn! {
fn scan_forward_body(inp: &ScanInputs<'_>, a: &[f64], y: &mut [f64], trace: Option<&mut ScanTrace>) -> Result<()> {
    let (e_dim, n_dim) = (inp.channels, inp.state);
    let t_len = inp.u.len() / e_dim;
    let en = e_dim * n_dim;
    let mut trace = trace;
    let mut g = vec![0.0; en];
    let mut decay = vec![0.0; en];
    let mut drive = vec![0.0; en];
    for t in 0..t_len {
        let bt = &inp.b[t * n_dim..(t + 1) * n_dim];
        let ct = &inp.c[t * n_dim..(t + 1) * n_dim];
        let dt_row = &inp.delta[t * e_dim..(t + 1) * e_dim];
        let u_row = &inp.u[t * e_dim..(t + 1) * e_dim];
        for (e, (&dt, &ut)) in dt_row.iter().zip(u_row).enumerate() {
            let du = dt * ut;
            let rows = e * n_dim..(e + 1) * n_dim;
            for ((z, dr), (&av, &bv)) in decay[rows.clone()].iter_mut().zip(&mut drive[rows.clone()]).zip(a[rows].iter().zip(bt)) {
                *z = dt * av;
                *dr = du * bv;
            }
        }
        for z in decay.iter_mut() {
            *z = exp_fast(*z);
        }
        for ((gk, &z), &dr) in g.iter_mut().zip(&decay).zip(&drive) {
            *gk = z * *gk + dr;
        }
        let y_row = &mut y[t * e_dim..(t + 1) * e_dim];
        for (e, ye) in y_row.iter_mut().enumerate() {
            *ye = dot(ct, &g[e * n_dim..(e + 1) * n_dim]);
        }
        if let Some(d) = inp.d {
            for ((ye, &dv), &ut) in y_row.iter_mut().zip(d).zip(u_row) {
                *ye += dv * ut;
            }
        }
        if let Some(tr) = trace.as_deref_mut() {
            tr.decay.extend_from_slice(&decay);
            tr.states.extend_from_slice(&g);
        }
        if !y_row.iter().all(|v| v.is_finite()) {
            return Err(Error::ScanDiverged { timestep: t });
        }
    }
    Ok(())
}
}

/// Time-varying diagonal recurrence
/// `g_t = exp(Δ_t A) ⊙ g_{t-1} + Δ_t B_t u_t`, `y_t = C_t g_t + D ⊙ u_t`.
///
/// Uses the Euler form `Δ_t B_t` for the input matrix. Every `Δ_t` must be
/// non-negative, which the softplus parameterization guarantees.
pub fn selective_scan_forward(inp: &ScanInputs<'_>, keep_trace: bool) -> Result<(Vec<f64>, Option<ScanTrace>)> {
    let (e_dim, n_dim) = (inp.channels, inp.state);
    let t_len = inp.u.len() / e_dim;
    let a: Vec<f64> = inp.a_log.iter().map(|v| -v.exp()).collect();
    let mut y = vec![0.0; t_len * e_dim];
    let mut trace = keep_trace.then(|| ScanTrace {
        decay: Vec::with_capacity(t_len * e_dim * n_dim),
        states: Vec::with_capacity(t_len * e_dim * n_dim),
    });
    scan_forward_body(inp, &a, &mut y, trace.as_mut())?;
    Ok((y, trace))
}

type ScanGrads = (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Option<Vec<f64>>);

wide_fn! {
fn scan_backward_body(inp: &ScanInputs<'_>, a: &[f64], trace: &ScanTrace, dy: &[f64]) -> ScanGrads {
    let (e_dim, n_dim) = (inp.channels, inp.state);
    let t_len = inp.u.len() / e_dim;
    let en = e_dim * n_dim;
    let mut du = vec![0.0; inp.u.len()];
    let mut ddelta = vec![0.0; inp.delta.len()];
    let mut da = vec![0.0; a.len()];
    let mut db = vec![0.0; inp.b.len()];
    let mut dc = vec![0.0; inp.c.len()];
    let mut dd = inp.d.map(|d| vec![0.0; d.len()]);
    let zeros = vec![0.0; en];
    // dg carries ∂L/∂g_t back through the decay.
    let mut dg = vec![0.0; en];
    let mut gk = vec![0.0; n_dim];
    let mut d_decay = vec![0.0; n_dim];
    for t in (0..t_len).rev() {
        let bt = &inp.b[t * n_dim..(t + 1) * n_dim];
        let ct = &inp.c[t * n_dim..(t + 1) * n_dim];
        let gt = &trace.states[t * en..(t + 1) * en];
        let prev_all = if t > 0 { &trace.states[(t - 1) * en..t * en] } else { &zeros[..] };
        let decay_t = &trace.decay[t * en..(t + 1) * en];
        let dc_t = &mut dc[t * n_dim..(t + 1) * n_dim];
        let db_t = &mut db[t * n_dim..(t + 1) * n_dim];
        for e in 0..e_dim {
            let idx = t * e_dim + e;
            let gy = dy[idx];
            let dt = inp.delta[idx];
            let ut = inp.u[idx];
            if let (Some(d), Some(dd)) = (inp.d, dd.as_mut()) {
                dd[e] += gy * ut;
                du[idx] += gy * d[e];
            }
            let rows = e * n_dim..(e + 1) * n_dim;
            let (g_e, prev, dec, a_e) = (&gt[rows.clone()], &prev_all[rows.clone()], &decay_t[rows.clone()], &a[rows.clone()]);
            let dg_e = &mut dg[rows.clone()];
            let da_e = &mut da[rows];
            let dtu = dt * ut;
            for n in 0..n_dim {
                dc_t[n] += gy * g_e[n];
                gk[n] = dg_e[n] + gy * ct[n];
                // ∂L/∂(Δa) through exp(Δa) = decay.
                d_decay[n] = gk[n] * prev[n] * dec[n];
                da_e[n] += d_decay[n] * dt;
                db_t[n] += gk[n] * dtu;
                dg_e[n] = gk[n] * dec[n];
            }
            ddelta[idx] += dot(&d_decay, a_e) + ut * dot(&gk, bt);
            du[idx] += dt * dot(&gk, bt);
        }
    }
    // A = −exp(A_log) ⇒ ∂A/∂A_log = A
    let da_log = da.iter().zip(a).map(|(g, av)| g * av).collect();
    (du, ddelta, da_log, db, dc, dd)
}
}

/// Gradients `(du, ddelta, da_log, db, dc, dd)` of [`selective_scan_forward`].
pub fn selective_scan_backward(inp: &ScanInputs<'_>, trace: &ScanTrace, dy: &[f64]) -> ScanGrads {
    let a: Vec<f64> = inp.a_log.iter().map(|v| -v.exp()).collect();
    scan_backward_body(inp, &a, trace, dy)
}

struct SelectiveScanOp {
    channels: usize,
    state: usize,
    has_skip: bool,
    trace: Option<ScanTrace>,
}

impl CustomOp for SelectiveScanOp {
    fn name(&self) -> &'static str {
        "selective_scan"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let trace = self
            .trace
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("selective scan recorded without trace".to_string()))?;
        let inp = ScanInputs {
            u: inputs[0].data(),
            delta: inputs[1].data(),
            a_log: inputs[2].data(),
            b: inputs[3].data(),
            c: inputs[4].data(),
            d: self.has_skip.then(|| inputs[5].data()),
            channels: self.channels,
            state: self.state,
        };
        let (du, ddelta, da, db, dc, dd) = selective_scan_backward(&inp, trace, grad.data());
        let mut out = vec![
            Some(Tensor::new(inputs[0].shape(), du)?),
            Some(Tensor::new(inputs[1].shape(), ddelta)?),
            Some(Tensor::new(inputs[2].shape(), da)?),
            Some(Tensor::new(inputs[3].shape(), db)?),
            Some(Tensor::new(inputs[4].shape(), dc)?),
        ];
        if let Some(dd) = dd {
            out.push(Some(Tensor::new(inputs[5].shape(), dd)?));
        }
        for (o, &n) in out.iter_mut().zip(needs) {
            if !n {
                *o = None;
            }
        }
        Ok(out)
    }
}

/// Records a selective scan on the tape. Shapes: `u, delta: T×E`,
/// `a_log: E×N`, `b, c: T×N`, `d: E`.
pub fn selective_scan(g: &mut Graph<'_>, u: Var, delta: Var, a_log: Var, b: Var, c: Var, d: Option<Var>) -> Result<Var> {
    let (t_len, e_dim) = g.value(u).dims2();
    let n_dim = g.value(a_log).cols();
    let check = |name: &str, got: &[usize], want: [usize; 2]| -> Result<()> {
        let n: usize = got.iter().product();
        let ok = if got.len() == 2 { got == want } else { n == want[0] * want[1] && want[0] == 1 };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("selective_scan {name}: {got:?} vs expected {want:?}")))
        }
    };
    check("delta", g.shape(delta), [t_len, e_dim])?;
    check("a_log", g.shape(a_log), [e_dim, n_dim])?;
    check("b", g.shape(b), [t_len, n_dim])?;
    check("c", g.shape(c), [t_len, n_dim])?;
    if let Some(d) = d {
        check("d", g.shape(d), [1, e_dim])?;
    }
    let keep = g.grad_enabled();
    let (y, trace) = {
        let inp = ScanInputs {
            u: g.value(u).data(),
            delta: g.value(delta).data(),
            a_log: g.value(a_log).data(),
            b: g.value(b).data(),
            c: g.value(c).data(),
            d: d.map(|d| g.value(d).data()),
            channels: e_dim,
            state: n_dim,
        };
        selective_scan_forward(&inp, keep)?
    };
    let mut inputs = vec![u, delta, a_log, b, c];
    inputs.extend(d);
    let op = SelectiveScanOp {
        channels: e_dim,
        state: n_dim,
        has_skip: d.is_some(),
        trace,
    };
    Ok(g.custom(&inputs, Tensor::new([t_len, e_dim], y)?, Box::new(op)))
}

/// Hyper-parameters of the selective state-space layer.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmConfig {
    /// Expanded channel count E.
    pub channels: usize,
    /// State size N_M per channel.
    pub state: usize,
    /// Rank of the Δ projection.
    pub dt_rank: usize,
    pub use_skip: bool,
    pub dt_min: f64,
    pub dt_max: f64,
}

/// Parameters producing Δ_t, B_t, C_t from the input and the diagonal A.
#[derive(Clone, Debug)]
pub struct SelectiveSsm {
    pub cfg: SsmConfig,
    /// `E × (R + 2N)`: columns split into Δ-rank input, B_t, C_t.
    pub x_proj: ParamId,
    /// `R × E`
    pub dt_proj: ParamId,
    /// `E`
    pub dt_bias: ParamId,
    /// `E × N`
    pub a_log: ParamId,
    pub skip: Option<ParamId>,
}

/// Inverse of softplus, used to place initial step sizes.
pub fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

impl SelectiveSsm {
    pub fn build<R: Rng>(store: &mut ParamStore, prefix: &str, cfg: SsmConfig, rng: &mut R) -> Self {
        let (e, n, r) = (cfg.channels, cfg.state, cfg.dt_rank);
        let x_proj = store.uniform(format!("{prefix}.x_proj"), [e, r + 2 * n], 1.0 / (e as f64).sqrt(), rng);
        let dt_proj = store.uniform(format!("{prefix}.dt_proj"), [r, e], 1.0 / (r as f64).sqrt(), rng);
        let (lo, hi) = (cfg.dt_min.ln(), cfg.dt_max.ln());
        let bias: Vec<f64> = (0..e)
            .map(|_| inverse_softplus(rng.random_range(lo..=hi).exp()))
            .collect();
        let dt_bias = store.add(format!("{prefix}.dt_bias"), Tensor::vector(bias));
        let a_log_data = (0..e).flat_map(|_| (1..=n).map(|k| (k as f64).ln())).collect();
        let a_log = store.add(format!("{prefix}.a_log"), Tensor::new([e, n], a_log_data).expect("a_log shape"));
        let skip = cfg.use_skip.then(|| store.full(format!("{prefix}.skip"), [e], 1.0));
        Self {
            cfg,
            x_proj,
            dt_proj,
            dt_bias,
            a_log,
            skip,
        }
    }

    pub fn num_params(cfg: &SsmConfig) -> usize {
        let (e, n, r) = (cfg.channels, cfg.state, cfg.dt_rank);
        e * (r + 2 * n) + r * e + e + e * n + if cfg.use_skip { e } else { 0 }
    }

    /// Input-dependent `(Δ_t, B_t, C_t)`, shapes `T×E`, `T×N`, `T×N`.
    pub fn selection(&self, g: &mut Graph<'_>, x: Var) -> Result<(Var, Var, Var)> {
        let (r, n) = (self.cfg.dt_rank, self.cfg.state);
        let xp = g.param(self.x_proj);
        let x_dbl = g.matmul(x, xp)?;
        let dt_in = g.slice_cols(x_dbl, 0, r)?;
        let b = g.slice_cols(x_dbl, r, r + n)?;
        let c = g.slice_cols(x_dbl, r + n, r + 2 * n)?;
        let w = g.param(self.dt_proj);
        let pre = g.matmul(dt_in, w)?;
        let bias = g.param(self.dt_bias);
        let pre = g.add_row(pre, bias)?;
        Ok((g.softplus(pre), b, c))
    }

    /// `x: T×E` → `y: T×E`.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let (delta, b, c) = self.selection(g, x)?;
        let a_log = g.param(self.a_log);
        let d = self.skip.map(|id| g.param(id));
        selective_scan(g, x, delta, a_log, b, c, d)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::softplus;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_lti(a: f64, b: f64, delta: f64) -> LtiParams {
        LtiParams {
            a: StateMatrix::Diagonal(vec![a]),
            b: vec![b],
            c: vec![1.0],
            delta,
        }
    }

    #[test]
    fn zoh_scalar_zero_pole_uses_limit() {
        let d = discretize_zoh(&scalar_lti(0.0, 1.0, 0.1)).unwrap();
        assert_eq!(d.a_d, StateMatrix::Diagonal(vec![1.0]));
        assert!((d.b_d[0] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn zoh_scalar_stable_pole() {
        let d = discretize_zoh(&scalar_lti(-1.0, 1.0, 0.1)).unwrap();
        let StateMatrix::Diagonal(a) = &d.a_d else { panic!() };
        // closed form: e^{-0.1}, 1 - e^{-0.1}
        assert!((a[0] - 0.904_837_418_035_959_6).abs() < 1e-15);
        assert!((d.b_d[0] - 0.095_162_581_964_040_4).abs() < 1e-15);
    }

    #[test]
    fn zoh_rejects_nonpositive_delta() {
        assert!(discretize_zoh(&scalar_lti(-1.0, 1.0, 0.0)).is_err());
    }

    #[test]
    fn zoh_dense_singular_errors() {
        let p = LtiParams {
            a: StateMatrix::Dense(vec![1.0, 2.0, 2.0, 4.0]),
            b: vec![1.0, 0.0],
            c: vec![1.0, 0.0],
            delta: 0.1,
        };
        assert!(discretize_zoh(&p).is_err());
    }

    #[test]
    fn zoh_dense_diagonal_matches_diagonal_path() {
        let diag = vec![-0.5, -2.0, -0.1];
        let mut dense = vec![0.0; 9];
        for i in 0..3 {
            dense[i * 3 + i] = diag[i];
        }
        let b = vec![1.0, -0.5, 2.0];
        let c = vec![0.3, 0.2, 0.1];
        let a = discretize_zoh(&LtiParams { a: StateMatrix::Diagonal(diag), b: b.clone(), c: c.clone(), delta: 0.3 }).unwrap();
        let d = discretize_zoh(&LtiParams { a: StateMatrix::Dense(dense), b, c, delta: 0.3 }).unwrap();
        let StateMatrix::Diagonal(ad) = &a.a_d else { panic!() };
        let StateMatrix::Dense(dd) = &d.a_d else { panic!() };
        for i in 0..3 {
            assert!((ad[i] - dd[i * 3 + i]).abs() < 1e-14);
            assert!((a.b_d[i] - d.b_d[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn running_sum_recurrence() {
        let p = DiscreteLti {
            a_d: StateMatrix::Diagonal(vec![1.0]),
            b_d: vec![1.0],
            c: vec![1.0],
        };
        assert_eq!(scan_recurrent(&p, &[1.0, 1.0, 1.0]).unwrap(), vec![1.0, 2.0, 3.0]);
        assert_eq!(scan_recurrent(&p, &[0.0; 4]).unwrap(), vec![0.0; 4]);
        assert!(scan_recurrent(&p, &[]).is_err());
    }

    #[test]
    fn kernel_powers() {
        let p = DiscreteLti {
            a_d: StateMatrix::Diagonal(vec![0.5]),
            b_d: vec![1.0],
            c: vec![1.0],
        };
        assert_eq!(conv_kernel(&p, 3), vec![1.0, 0.5, 0.25]);
        assert_eq!(kernel_convolution(&p, &[1.0, 0.0, 0.0]), vec![1.0, 0.5, 0.25]);
    }

    #[test]
    fn stable_state_stays_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 4;
        let p = LtiParams {
            a: StateMatrix::Diagonal((0..n).map(|_| -rng.random_range(0.05..2.0)).collect()),
            b: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
            c: vec![1.0; n],
            delta: 0.1,
        };
        let d = discretize_zoh(&p).unwrap();
        let x: Vec<f64> = (0..10_000).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = scan_recurrent(&d, &x).unwrap();
        // |g_i| ≤ |B_d,i| / (1 - |A_d,i|) for |x| ≤ 1
        let StateMatrix::Diagonal(ad) = &d.a_d else { panic!() };
        let bound: f64 = (0..n).map(|i| d.b_d[i].abs() / (1.0 - ad[i].abs())).sum();
        assert!(y.iter().all(|v| v.abs() <= bound + 1e-9));
    }

    #[test]
    fn inverse_softplus_roundtrip() {
        for y in [0.001, 0.01, 0.1, 1.0] {
            assert!((softplus(inverse_softplus(y)) - y).abs() < 1e-12);
        }
    }

    #[test]
    fn scan_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (t, e, n) = (5, 3, 2);
        let mut store = ParamStore::new();
        let rt = |shape: [usize; 2], lo: f64, hi: f64, rng: &mut ChaCha8Rng| {
            Tensor::new(shape, (0..shape[0] * shape[1]).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
        };
        let ids = [
            store.add("u", rt([t, e], -1.0, 1.0, &mut rng)),
            store.add("delta", rt([t, e], 0.05, 0.8, &mut rng)),
            store.add("a_log", rt([e, n], -0.5, 0.7, &mut rng)),
            store.add("b", rt([t, n], -1.0, 1.0, &mut rng)),
            store.add("c", rt([t, n], -1.0, 1.0, &mut rng)),
            store.add("d", rt([1, e], -1.0, 1.0, &mut rng)),
        ];
        let probe = rt([t, e], -1.0, 1.0, &mut rng);
        let loss = |s: &ParamStore| {
            let mut g = Graph::new(s);
            let v: Vec<Var> = ids.iter().map(|&i| g.param(i)).collect();
            let y = selective_scan(&mut g, v[0], v[1], v[2], v[3], v[4], Some(v[5])).unwrap();
            let p = g.constant(probe.clone());
            let m = g.mul(y, p).unwrap();
            let l = g.sum(m);
            (g.value(l).data()[0], g.backward(l).unwrap())
        };
        let (_, grads) = loss(&store);
        let h = 1e-6;
        for &id in &ids {
            for i in 0..store.get(id).len() {
                let mut sp = store.clone();
                sp.get_mut(id).data_mut()[i] += h;
                let mut sm = store.clone();
                sm.get_mut(id).data_mut()[i] -= h;
                let num = (loss(&sp).0 - loss(&sm).0) / (2.0 * h);
                let ana = grads.get(id).data()[i];
                let rel = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-6);
                assert!(rel < 1e-6, "{}[{i}]: {ana} vs {num}", store.name(id));
            }
        }
    }
}
