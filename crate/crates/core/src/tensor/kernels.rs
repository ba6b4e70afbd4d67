//! Raw numeric kernels shared by the tape ops and the tape-free reference paths.

/// Operand layout for [`gemm`]. `T` marks an operand stored transposed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GemmLayout {
    /// `a: m×k`, `b: k×n`
    NN,
    /// `a` stored `k×m`
    TN,
    /// `b` stored `n×k`
    NT,
}

/// `c (m×n) = op(a) · op(b)`, or `c += ...` when `accumulate` is set.
pub fn gemm(
    layout: GemmLayout,
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    b: &[f64],
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "gemm lhs length");
    assert_eq!(b.len(), k * n, "gemm rhs length");
    assert_eq!(c.len(), m * n, "gemm out length");
    let (rsa, csa) = match layout {
        GemmLayout::TN => (1, m as isize),
        _ => (k as isize, 1),
    };
    let (rsb, csb) = match layout {
        GemmLayout::NT => (1, k as isize),
        _ => (n as isize, 1),
    };
    gemm_strided(m, k, n, a, rsa, csa, b, rsb, csb, c, n as isize, accumulate);
}

/// Strided product used for per-head slices. Callers guarantee the strides stay in bounds.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
    rsc: isize,
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            for i in 0..m {
                for j in 0..n {
                    c[i * rsc as usize + j] = 0.0;
                }
            }
        }
        return;
    }
    let last = |rs: isize, cs: isize, r: usize, cc: usize| (r - 1) as isize * rs + (cc - 1) as isize * cs;
    assert!((last(rsa, csa, m, k) as usize) < a.len());
    assert!((last(rsb, csb, k, n) as usize) < b.len());
    assert!((last(rsc, 1, m, n) as usize) < c.len());
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every strided index inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            1,
        );
    }
}

/// True when the running CPU supports AVX2 and FMA.
pub(crate) fn has_avx2() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma")
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

/// Defines a function whose body is compiled twice, once for the baseline
/// target and once with AVX2/FMA enabled, and picks one at runtime.
macro_rules! wide_fn {
    ($(#[$m:meta])* $vis:vis fn $name:ident($($arg:ident: $ty:ty),* $(,)?) -> $ret:ty $body:block) => {
        $(#[$m])*
        $vis fn $name($($arg: $ty),*) -> $ret {
            #[inline(always)]
            fn body($($arg: $ty),*) -> $ret $body
            #[cfg(target_arch = "x86_64")]
            {
                #[target_feature(enable = "avx2,fma")]
                unsafe fn wide($($arg: $ty),*) -> $ret {
                    body($($arg),*)
                }
                if $crate::tensor::kernels::has_avx2() {
                    // SAFETY: the required CPU features were detected at runtime.
                    return unsafe { wide($($arg),*) };
                }
            }
            body($($arg),*)
        }
    };
}
pub(crate) use wide_fn;

/// `exp(x)` without branches, so loops over it vectorize.
///
/// Cody-Waite reduction to `|r| <= ln2/2` and a degree-12 Taylor polynomial;
/// relative error stays within a few ulp. Inputs are clamped to `[-708, 709]`.
/// NaN propagates.
#[inline(always)]
pub fn exp_fast(x: f64) -> f64 {
    const LOG2E: f64 = std::f64::consts::LOG2_E;
    const LN2_HI: f64 = 6.931_471_803_691_238_2e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    const SHIFT: f64 = 6_755_399_441_055_744.0; // 1.5 · 2^52
    let x = if x < -708.0 { -708.0 } else if x > 709.0 { 709.0 } else { x };
    let shifted = x * LOG2E + SHIFT;
    let k = shifted - SHIFT;
    let r = x - k * LN2_HI - k * LN2_LO;
    let mut p = 1.0 / 479_001_600.0;
    for c in [
        1.0 / 39_916_800.0,
        1.0 / 3_628_800.0,
        1.0 / 362_880.0,
        1.0 / 40_320.0,
        1.0 / 5_040.0,
        1.0 / 720.0,
        1.0 / 120.0,
        1.0 / 24.0,
        1.0 / 6.0,
        0.5,
        1.0,
        1.0,
    ] {
        p = p * r + c;
    }
    let ki = shifted.to_bits().wrapping_sub(SHIFT.to_bits()) as i64;
    p * f64::from_bits(((ki + 1023) as u64) << 52)
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + exp_fast(-x.abs()).ln_1p()
}

#[inline(always)]
pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + exp_fast(-x))
}

wide_fn! {
    pub(crate) fn silu_forward(x: &[f64]) -> Vec<f64> {
        x.iter().map(|&v| v * sigmoid(v)).collect()
    }
}

wide_fn! {
    pub(crate) fn silu_backward(x: &[f64], g: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(g)
            .map(|(&v, &gg)| {
                let s = sigmoid(v);
                gg * (s + v * s * (1.0 - s))
            })
            .collect()
    }
}

wide_fn! {
    pub(crate) fn sigmoid_forward(x: &[f64]) -> Vec<f64> {
        x.iter().map(|&v| sigmoid(v)).collect()
    }
}

wide_fn! {
    /// Softplus gradient: `g · sigmoid(x)`.
    pub(crate) fn sigmoid_times(x: &[f64], g: &[f64]) -> Vec<f64> {
        x.iter().zip(g).map(|(&v, &gg)| gg * sigmoid(v)).collect()
    }
}

/// Per-row normalization. Returns `(out, mean, rstd)`; a row with zero
/// variance and `eps == 0` normalizes to zeros.
pub fn layer_norm_rows(
    x: &[f64],
    cols: usize,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = x.len() / cols;
    let mut out = vec![0.0; x.len()];
    let mut means = Vec::with_capacity(rows);
    let mut rstds = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let denom = var + eps;
        let rstd = if denom > 0.0 { 1.0 / denom.sqrt() } else { 0.0 };
        for c in 0..cols {
            out[r * cols + c] = (row[c] - mean) * rstd * gamma[c] + beta[c];
        }
        means.push(mean);
        rstds.push(rstd);
    }
    (out, means, rstds)
}

/// Depthwise convolution over time with `left_pad` zero frames on the left
/// and `width - 1 - left_pad` on the right. `x: T×E`, `w: width×E`, `b: E`.
/// Tap `j` reads frame `t - left_pad + j`.
pub fn causal_depthwise_conv(
    x: &[f64],
    channels: usize,
    w: &[f64],
    b: &[f64],
    width: usize,
    left_pad: usize,
) -> Vec<f64> {
    let t_len = x.len() / channels;
    let mut out = vec![0.0; x.len()];
    for t in 0..t_len {
        let o = &mut out[t * channels..(t + 1) * channels];
        o.copy_from_slice(b);
        for j in 0..width {
            let src = t as isize - left_pad as isize + j as isize;
            if src < 0 || src >= t_len as isize {
                continue;
            }
            let xs = &x[src as usize * channels..(src as usize + 1) * channels];
            let ws = &w[j * channels..(j + 1) * channels];
            for e in 0..channels {
                o[e] += ws[e] * xs[e];
            }
        }
    }
    out
}

pub(crate) fn depthwise_conv_backward(
    x: &[f64],
    channels: usize,
    w: &[f64],
    width: usize,
    left_pad: usize,
    dout: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let t_len = x.len() / channels;
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; channels];
    for t in 0..t_len {
        let g = &dout[t * channels..(t + 1) * channels];
        for e in 0..channels {
            db[e] += g[e];
        }
        for j in 0..width {
            let src = t as isize - left_pad as isize + j as isize;
            if src < 0 || src >= t_len as isize {
                continue;
            }
            let s = src as usize;
            for e in 0..channels {
                dx[s * channels + e] += w[j * channels + e] * g[e];
                dw[j * channels + e] += x[s * channels + e] * g[e];
            }
        }
    }
    (dx, dw, db)
}

const ATTN_BLOCK: usize = 64;

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Scaled dot-product scores for one head and a block of query rows, softmaxed.
fn head_probs(q: &[f64], k: &[f64], t_len: usize, d: usize, head: usize, dh: usize, r0: usize, rows: usize, probs: &mut [f64]) {
    let scale = 1.0 / (dh as f64).sqrt();
    gemm_strided(
        rows,
        dh,
        t_len,
        &q[r0 * d + head * dh..],
        d as isize,
        1,
        &k[head * dh..],
        1,
        d as isize,
        probs,
        t_len as isize,
        false,
    );
    for r in 0..rows {
        let row = &mut probs[r * t_len..(r + 1) * t_len];
        for v in row.iter_mut() {
            *v *= scale;
        }
        softmax_in_place(row);
    }
}

/// Full attention probability matrices, `heads × T × T`. Quadratic memory;
/// intended for inspection at small `T`.
pub fn attention_probs(q: &[f64], k: &[f64], t_len: usize, d: usize, heads: usize) -> Vec<Vec<f64>> {
    let dh = d / heads;
    (0..heads)
        .map(|h| {
            let mut p = vec![0.0; t_len * t_len];
            head_probs(q, k, t_len, d, h, dh, 0, t_len, &mut p);
            p
        })
        .collect()
}

/// Multi-head softmax attention over `T×D` projections, processed in row
/// blocks so memory stays `O(block · T)`.
pub(crate) fn attention_forward(q: &[f64], k: &[f64], v: &[f64], t_len: usize, d: usize, heads: usize) -> Vec<f64> {
    let dh = d / heads;
    let mut out = vec![0.0; t_len * d];
    let mut probs = vec![0.0; ATTN_BLOCK.min(t_len) * t_len];
    for h in 0..heads {
        let mut r0 = 0;
        while r0 < t_len {
            let rows = ATTN_BLOCK.min(t_len - r0);
            let p = &mut probs[..rows * t_len];
            head_probs(q, k, t_len, d, h, dh, r0, rows, p);
            gemm_strided(
                rows,
                t_len,
                dh,
                p,
                t_len as isize,
                1,
                &v[h * dh..],
                d as isize,
                1,
                &mut out[r0 * d + h * dh..],
                d as isize,
                false,
            );
            r0 += rows;
        }
    }
    out
}

/// Gradients of [`attention_forward`] with respect to `q`, `k`, `v`,
/// recomputing the probabilities block by block.
pub(crate) fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    dout: &[f64],
    t_len: usize,
    d: usize,
    heads: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; t_len * d];
    let mut dk = vec![0.0; t_len * d];
    let mut dv = vec![0.0; t_len * d];
    let blk = ATTN_BLOCK.min(t_len);
    let mut probs = vec![0.0; blk * t_len];
    let mut dp = vec![0.0; blk * t_len];
    for h in 0..heads {
        let mut r0 = 0;
        while r0 < t_len {
            let rows = ATTN_BLOCK.min(t_len - r0);
            let p = &mut probs[..rows * t_len];
            head_probs(q, k, t_len, d, h, dh, r0, rows, p);
            // dV_h += Pᵀ dO
            gemm_strided(
                t_len,
                rows,
                dh,
                p,
                1,
                t_len as isize,
                &dout[r0 * d + h * dh..],
                d as isize,
                1,
                &mut dv[h * dh..],
                d as isize,
                true,
            );
            // dP = dO V_hᵀ
            let dpb = &mut dp[..rows * t_len];
            gemm_strided(
                rows,
                dh,
                t_len,
                &dout[r0 * d + h * dh..],
                d as isize,
                1,
                &v[h * dh..],
                1,
                d as isize,
                dpb,
                t_len as isize,
                false,
            );
            for r in 0..rows {
                let pr = &p[r * t_len..(r + 1) * t_len];
                let dr = &mut dpb[r * t_len..(r + 1) * t_len];
                let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                for (g, &pv) in dr.iter_mut().zip(pr) {
                    *g = pv * (*g - dot) * scale;
                }
            }
            // dQ = dS K_h, dK_h += dSᵀ Q
            gemm_strided(
                rows,
                t_len,
                dh,
                dpb,
                t_len as isize,
                1,
                &k[h * dh..],
                d as isize,
                1,
                &mut dq[r0 * d + h * dh..],
                d as isize,
                false,
            );
            gemm_strided(
                t_len,
                rows,
                dh,
                dpb,
                1,
                t_len as isize,
                &q[r0 * d + h * dh..],
                d as isize,
                1,
                &mut dk[h * dh..],
                d as isize,
                true,
            );
            r0 += rows;
        }
    }
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn gemm_layouts_agree_with_naive() {
        let (m, k, n) = (3, 4, 2);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
        let want = naive(m, k, n, &a, &b);

        let mut c = vec![0.0; m * n];
        gemm(GemmLayout::NN, m, k, n, &a, &b, &mut c, false);
        assert!(c.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-12));

        let at = crate::tensor::Tensor::new([m, k], a.clone()).unwrap().transpose();
        gemm(GemmLayout::TN, m, k, n, at.data(), &b, &mut c, false);
        assert!(c.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-12));

        let bt = crate::tensor::Tensor::new([k, n], b.clone()).unwrap().transpose();
        gemm(GemmLayout::NT, m, k, n, &a, bt.data(), &mut c, false);
        assert!(c.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn exp_fast_tracks_std_exp() {
        let mut worst: f64 = 0.0;
        for i in 0..=200_000 {
            let x = -700.0 + 1400.0 * i as f64 / 200_000.0;
            worst = worst.max((exp_fast(x) / x.exp() - 1.0).abs());
        }
        assert!(worst < 1e-15, "max relative error {worst:e}");
        assert_eq!(exp_fast(0.0), 1.0);
        assert!(exp_fast(f64::NAN).is_nan());
        assert!(exp_fast(-1e6) > 0.0);
        assert!(exp_fast(1e6).is_finite());
    }

    #[test]
    fn softplus_at_zero_is_ln2() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(softplus(100.0), 100.0);
        assert!(softplus(-100.0) > 0.0);
    }

    #[test]
    fn layer_norm_examples() {
        let (out, _, _) = layer_norm_rows(&[5.0; 4], 4, &[1.0; 4], &[0.0; 4], 1e-5);
        assert_eq!(out, vec![0.0; 4]);
        let (out, _, _) = layer_norm_rows(&[1.0, 3.0], 2, &[1.0; 2], &[0.0; 2], 0.0);
        assert_eq!(out, vec![-1.0, 1.0]);
        let (out, _, _) = layer_norm_rows(&[1.0, 7.0, -2.0], 3, &[0.0; 3], &[0.5, 1.5, 2.5], 1e-5);
        assert_eq!(out, vec![0.5, 1.5, 2.5]);
        let (out, _, _) = layer_norm_rows(&[2.0; 3], 3, &[1.0; 3], &[0.0; 3], 0.0);
        assert_eq!(out, vec![0.0; 3]);
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let (t, d, h) = (7, 8, 2);
        let q: Vec<f64> = (0..t * d).map(|i| (i as f64 * 0.13).sin()).collect();
        let k: Vec<f64> = (0..t * d).map(|i| (i as f64 * 0.29).cos()).collect();
        for p in attention_probs(&q, &k, t, d, h) {
            for r in 0..t {
                let s: f64 = p[r * t..(r + 1) * t].iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn blocked_attention_matches_dense() {
        // T larger than one block exercises the row tiling.
        let (t, d, h) = (150, 8, 2);
        let q: Vec<f64> = (0..t * d).map(|i| (i as f64 * 0.013).sin()).collect();
        let k: Vec<f64> = (0..t * d).map(|i| (i as f64 * 0.029).cos()).collect();
        let v: Vec<f64> = (0..t * d).map(|i| (i as f64 * 0.007).sin()).collect();
        let out = attention_forward(&q, &k, &v, t, d, h);
        let probs = attention_probs(&q, &k, t, d, h);
        let dh = d / h;
        for hd in 0..h {
            for r in 0..t {
                for c in 0..dh {
                    let want: f64 = (0..t).map(|s| probs[hd][r * t + s] * v[s * d + hd * dh + c]).sum();
                    assert!((out[r * d + hd * dh + c] - want).abs() < 1e-12);
                }
            }
        }
    }
}
