//! Raw numeric kernels over flat slices. Everything here is shape-unchecked;
//! callers in `graph` validate shapes first.

/// `c = a·b + beta·c` for strided row/column layouts.
///
/// `a` is `m×k`, `b` is `k×n`, `c` is `m×n`; strides are in elements.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_rs: usize,
    a_cs: usize,
    b: &[f64],
    b_rs: usize,
    b_cs: usize,
    beta: f64,
    c: &mut [f64],
    c_rs: usize,
    c_cs: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    let span = |rows: usize, cols: usize, rs: usize, cs: usize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs + (cols - 1) * cs + 1
        }
    };
    assert!(span(m, k, a_rs, a_cs) <= a.len(), "gemm: lhs out of bounds");
    assert!(span(k, n, b_rs, b_cs) <= b.len(), "gemm: rhs out of bounds");
    assert!(span(m, n, c_rs, c_cs) <= c.len(), "gemm: out out of bounds");
    // SAFETY: every index reachable through (rows, cols, strides) was bounds
    // checked above and `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_rs as isize,
            a_cs as isize,
            b.as_ptr(),
            b_rs as isize,
            b_cs as isize,
            beta,
            c.as_mut_ptr(),
            c_rs as isize,
            c_cs as isize,
        );
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    let mut acc = [0.0f64; 4];
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// `y += alpha·x`
#[inline]
pub fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// exp(x) via Cody–Waite reduction and a degree-12 Taylor polynomial.
/// Relative error stays below 1e-14 on the whole f64 range; inputs below
/// -708 return 0. Branch-free apart from selects, so loops vectorize.
#[inline(always)]
pub fn fast_exp(x: f64) -> f64 {
    const LOG2E: f64 = std::f64::consts::LOG2_E;
    const LN2_HI: f64 = 6.931_471_803_691_238_164_9e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_700_02e-10;
    const SHIFT: f64 = 6_755_399_441_055_744.0; // 1.5·2^52
    let xc = x.max(-708.0).min(709.0);
    let shifted = xc * LOG2E + SHIFT;
    let kf = shifted - SHIFT;
    let r = (xc - kf * LN2_HI) - kf * LN2_LO;
    let k = (shifted.to_bits() as i64).wrapping_sub(SHIFT.to_bits() as i64);
    let mut p = 1.0 / 479_001_600.0;
    p = p * r + 1.0 / 39_916_800.0;
    p = p * r + 1.0 / 3_628_800.0;
    p = p * r + 1.0 / 362_880.0;
    p = p * r + 1.0 / 40_320.0;
    p = p * r + 1.0 / 5_040.0;
    p = p * r + 1.0 / 720.0;
    p = p * r + 1.0 / 120.0;
    p = p * r + 1.0 / 24.0;
    p = p * r + 1.0 / 6.0;
    p = p * r + 0.5;
    p = p * r + 1.0;
    p = p * r + 1.0;
    // k in [-1022, 1023] after clamping, so the biased exponent is normal.
    let scale = f64::from_bits(((k + 1023) as u64) << 52);
    let y = if x < -708.0 { 0.0 } else { p * scale };
    if x.is_nan() {
        x
    } else {
        y
    }
}

/// Numerically stable in-place softmax of one contiguous row; returns the
/// row's log-sum-exp.
pub fn softmax_row(row: &mut [f64]) -> f64 {
    #[cfg(target_arch = "x86_64")]
    if avx2() {
        // SAFETY: the required CPU features were detected at runtime.
        return unsafe { softmax_row_avx2(row) };
    }
    softmax_row_generic(row)
}

/// `row[j] = exp(row[j] - shift)`
pub fn exp_shifted_row(row: &mut [f64], shift: f64) {
    #[cfg(target_arch = "x86_64")]
    if avx2() {
        // SAFETY: the required CPU features were detected at runtime.
        unsafe { exp_shifted_avx2(row, shift) };
        return;
    }
    exp_shifted_generic(row, shift);
}

#[cfg(target_arch = "x86_64")]
fn avx2() -> bool {
    std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma")
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn softmax_row_avx2(row: &mut [f64]) -> f64 {
    softmax_row_generic(row)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn exp_shifted_avx2(row: &mut [f64], shift: f64) {
    exp_shifted_generic(row, shift);
}

#[inline(always)]
fn exp_shifted_generic(row: &mut [f64], shift: f64) {
    for v in row.iter_mut() {
        *v = fast_exp(*v - shift);
    }
}

#[inline(always)]
fn softmax_row_generic(row: &mut [f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    exp_shifted_generic(row, max);
    let sum = lane_sum(row);
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
    max + sum.ln()
}

#[inline(always)]
fn lane_sum(x: &[f64]) -> f64 {
    let chunks = x.chunks_exact(4);
    let rem = chunks.remainder();
    let mut acc = [0.0f64; 4];
    for c in chunks {
        acc[0] += c[0];
        acc[1] += c[1];
        acc[2] += c[2];
        acc[3] += c[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for v in rem {
        s += v;
    }
    s
}

/// Output length of a 1-D convolution.
pub fn conv_out_len(t: usize, k: usize, stride: usize, pad: usize) -> usize {
    (t + 2 * pad - k) / stride + 1
}

fn im2col(x: &[f64], cin: usize, t: usize, k: usize, stride: usize, pad: usize, t_out: usize) -> Vec<f64> {
    let mut cols = vec![0.0; cin * k * t_out];
    for c in 0..cin {
        let xs = &x[c * t..(c + 1) * t];
        for kk in 0..k {
            let row = &mut cols[(c * k + kk) * t_out..(c * k + kk + 1) * t_out];
            for (to, v) in row.iter_mut().enumerate() {
                let pos = (to * stride + kk) as isize - pad as isize;
                if pos >= 0 && (pos as usize) < t {
                    *v = xs[pos as usize];
                }
            }
        }
    }
    cols
}

fn col2im_add(dcols: &[f64], dx: &mut [f64], cin: usize, t: usize, k: usize, stride: usize, pad: usize, t_out: usize) {
    for c in 0..cin {
        let dxs = &mut dx[c * t..(c + 1) * t];
        for kk in 0..k {
            let row = &dcols[(c * k + kk) * t_out..(c * k + kk + 1) * t_out];
            for (to, v) in row.iter().enumerate() {
                let pos = (to * stride + kk) as isize - pad as isize;
                if pos >= 0 && (pos as usize) < t {
                    dxs[pos as usize] += v;
                }
            }
        }
    }
}

/// Geometry of a batched 1-D convolution.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub t: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn t_out(&self) -> usize {
        conv_out_len(self.t, self.k, self.stride, self.pad)
    }

    fn direct(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

pub fn conv1d_forward(g: ConvGeom, x: &[f64], w: &[f64], bias: &[f64]) -> Vec<f64> {
    let t_out = g.t_out();
    let ck = g.cin * g.k;
    let mut y = vec![0.0; g.batch * g.cout * t_out];
    for b in 0..g.batch {
        let xb = &x[b * g.cin * g.t..(b + 1) * g.cin * g.t];
        let yb = &mut y[b * g.cout * t_out..(b + 1) * g.cout * t_out];
        for (co, row) in yb.chunks_exact_mut(t_out).enumerate() {
            row.fill(bias[co]);
        }
        let owned;
        let cols: &[f64] = if g.direct() {
            xb
        } else {
            owned = im2col(xb, g.cin, g.t, g.k, g.stride, g.pad, t_out);
            &owned
        };
        gemm(g.cout, ck, t_out, w, ck, 1, cols, t_out, 1, 1.0, yb, t_out, 1);
    }
    y
}

/// Accumulates input, weight and bias gradients of a 1-D convolution.
pub fn conv1d_backward(
    g: ConvGeom,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
    dbias: Option<&mut [f64]>,
) {
    let t_out = g.t_out();
    let ck = g.cin * g.k;
    let mut dx = dx;
    let mut dw = dw;
    if let Some(db) = dbias {
        for b in 0..g.batch {
            let dyb = &dy[b * g.cout * t_out..(b + 1) * g.cout * t_out];
            for (co, row) in dyb.chunks_exact(t_out).enumerate() {
                db[co] += row.iter().sum::<f64>();
            }
        }
    }
    for b in 0..g.batch {
        let xb = &x[b * g.cin * g.t..(b + 1) * g.cin * g.t];
        let dyb = &dy[b * g.cout * t_out..(b + 1) * g.cout * t_out];
        if let Some(dw) = dw.as_deref_mut() {
            let owned;
            let cols: &[f64] = if g.direct() {
                xb
            } else {
                owned = im2col(xb, g.cin, g.t, g.k, g.stride, g.pad, t_out);
                &owned
            };
            // dW += dY · colsᵀ
            gemm(g.cout, t_out, ck, dyb, t_out, 1, cols, 1, t_out, 1.0, dw, ck, 1);
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxb = &mut dx[b * g.cin * g.t..(b + 1) * g.cin * g.t];
            if g.direct() {
                gemm(ck, g.cout, t_out, w, 1, ck, dyb, t_out, 1, 1.0, dxb, t_out, 1);
            } else {
                let mut dcols = vec![0.0; ck * t_out];
                gemm(ck, g.cout, t_out, w, 1, ck, dyb, t_out, 1, 0.0, &mut dcols, t_out, 1);
                col2im_add(&dcols, dxb, g.cin, g.t, g.k, g.stride, g.pad, t_out);
            }
        }
    }
}

/// Query rows per attention tile; a tile of scores stays cache resident.
const ATTN_TILE: usize = 64;

/// Scaled dot-product multi-head attention for one batch item.
///
/// `q`, `k`, `v` and `out` are `[T, D]`. The `[H, T, T]` weights are never
/// stored: `lse` receives each `[H, T]` row's log-sum-exp, from which the
/// backward pass recomputes them tile by tile.
#[allow(clippy::too_many_arguments)]
pub fn attention_forward(q: &[f64], k: &[f64], v: &[f64], t: usize, d: usize, heads: usize, lse: &mut [f64], out: &mut [f64]) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let qs: Vec<f64> = q.iter().map(|x| x * scale).collect();
    let mut s = vec![0.0; ATTN_TILE.min(t) * t];
    for h in 0..heads {
        let o = h * dh;
        for r0 in (0..t).step_by(ATTN_TILE) {
            let rows = ATTN_TILE.min(t - r0);
            let st = &mut s[..rows * t];
            gemm(rows, dh, t, &qs[r0 * d + o..], d, 1, &k[o..], 1, d, 0.0, st, t, 1);
            for (i, row) in st.chunks_exact_mut(t).enumerate() {
                lse[h * t + r0 + i] = softmax_row(row);
            }
            gemm(rows, t, dh, st, t, 1, &v[o..], d, 1, 0.0, &mut out[r0 * d + o..], d, 1);
        }
    }
}

/// Accumulates gradients of [`attention_forward`] into `dq`, `dk`, `dv`.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    lse: &[f64],
    dout: &[f64],
    t: usize,
    d: usize,
    heads: usize,
    dq: &mut [f64],
    dk: &mut [f64],
    dv: &mut [f64],
) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let qs: Vec<f64> = q.iter().map(|x| x * scale).collect();
    let tile = ATTN_TILE.min(t);
    let (mut p, mut ds) = (vec![0.0; tile * t], vec![0.0; tile * t]);
    for h in 0..heads {
        let o = h * dh;
        for r0 in (0..t).step_by(ATTN_TILE) {
            let rows = ATTN_TILE.min(t - r0);
            let (pt, dst) = (&mut p[..rows * t], &mut ds[..rows * t]);
            gemm(rows, dh, t, &qs[r0 * d + o..], d, 1, &k[o..], 1, d, 0.0, pt, t, 1);
            for (i, row) in pt.chunks_exact_mut(t).enumerate() {
                exp_shifted_row(row, lse[h * t + r0 + i]);
            }
            let dot_rows = &dout[r0 * d + o..];
            // dV += Pᵀ·dO
            gemm(t, rows, dh, pt, 1, t, dot_rows, d, 1, 1.0, &mut dv[o..], d, 1);
            // dP = dO·Vᵀ, then dS = P∘(dP − rowsum(P∘dP)), pre-scaled
            gemm(rows, dh, t, dot_rows, d, 1, &v[o..], 1, d, 0.0, dst, t, 1);
            for (drow, prow) in dst.chunks_exact_mut(t).zip(pt.chunks_exact(t)) {
                let inner = dot(prow, drow);
                for (g, p) in drow.iter_mut().zip(prow) {
                    *g = scale * p * (*g - inner);
                }
            }
            gemm(rows, t, dh, dst, t, 1, &k[o..], d, 1, 1.0, &mut dq[r0 * d + o..], d, 1);
            gemm(t, rows, dh, dst, 1, t, &q[r0 * d + o..], d, 1, 1.0, &mut dk[o..], d, 1);
        }
    }
}
