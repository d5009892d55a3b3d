//! Raw numeric kernels behind the graph ops. Everything here works on flat
//! slices; shape bookkeeping lives in `graph.rs`.

/// A strided view of a row-major-or-not matrix operand.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f32],
    pub rs: isize,
    pub cs: isize,
}

impl<'a> MatRef<'a> {
    /// Row-major `rows x cols` matrix, optionally viewed transposed.
    pub fn new(data: &'a [f32], cols: usize, transposed: bool) -> Self {
        if transposed {
            Self {
                data,
                rs: 1,
                cs: cols as isize,
            }
        } else {
            Self {
                data,
                rs: cols as isize,
                cs: 1,
            }
        }
    }
}

/// `c = alpha * a·b + beta * c` with `a: m×k`, `b: k×n`, `c: m×n` row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, alpha: f32, a: MatRef<'_>, b: MatRef<'_>, beta: f32, c: &mut [f32]) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    // SAFETY: operand extents are implied by (m, k, n) and the strides built
    // by `MatRef::new`; callers pass slices of at least that size.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(c_in: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Self {
        let h_out = (h + 2 * pad - k) / stride + 1;
        let w_out = (w + 2 * pad - k) / stride + 1;
        Self {
            c_in,
            h,
            w,
            k,
            stride,
            pad,
            h_out,
            w_out,
        }
    }

    pub fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn col_cols(&self) -> usize {
        self.h_out * self.w_out
    }

    pub fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds one image `[c, h, w]` into `[c*k*k, h_out*w_out]`.
pub(crate) fn im2col(x: &[f32], g: &ConvGeom, cols: &mut [f32]) {
    let hw_out = g.col_cols();
    let pad = g.pad as isize;
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride) as isize + ky as isize - pad;
                    let out_row = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        let shift = kx as isize - pad;
                        for (ox, o) in out_row.iter_mut().enumerate() {
                            let ix = ox as isize + shift;
                            *o = if ix >= 0 && ix < g.w as isize {
                                src[ix as usize]
                            } else {
                                0.0
                            };
                        }
                    } else {
                        for (ox, o) in out_row.iter_mut().enumerate() {
                            let ix = (ox * g.stride) as isize + kx as isize - pad;
                            *o = if ix >= 0 && ix < g.w as isize {
                                src[ix as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `dx`.
pub(crate) fn col2im(cols: &[f32], g: &ConvGeom, dx: &mut [f32]) {
    let hw_out = g.col_cols();
    let pad = g.pad as isize;
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride) as isize + ky as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let in_row = &src[oy * g.w_out..(oy + 1) * g.w_out];
                    for (ox, v) in in_row.iter().enumerate() {
                        let ix = (ox * g.stride) as isize + kx as isize - pad;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Batched 2-d convolution. `x: [n, c_in, h, w]`, `w: [c_out, c_in, k, k]`.
pub(crate) fn conv2d_forward(
    x: &[f32],
    n: usize,
    g: &ConvGeom,
    weight: &[f32],
    bias: Option<&[f32]>,
    c_out: usize,
) -> Vec<f32> {
    let in_len = g.c_in * g.h * g.w;
    let hw = g.col_cols();
    let kdim = g.col_rows();
    let mut out = vec![0.0f32; n * c_out * hw];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0f32; kdim * hw]
    };
    for b in 0..n {
        let xb = &x[b * in_len..(b + 1) * in_len];
        let col_ref: &[f32] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, g, &mut cols);
            &cols
        };
        let ob = &mut out[b * c_out * hw..(b + 1) * c_out * hw];
        if let Some(bias) = bias {
            for (o, chunk) in ob.chunks_mut(hw).enumerate() {
                chunk.fill(bias[o]);
            }
        }
        gemm(
            c_out,
            kdim,
            hw,
            1.0,
            MatRef::new(weight, kdim, false),
            MatRef::new(col_ref, hw, false),
            if bias.is_some() { 1.0 } else { 0.0 },
            ob,
        );
    }
    out
}

/// Gradients of [`conv2d_forward`]. Accumulates into `dw`/`db`; returns `dx`
/// when requested.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    x: &[f32],
    n: usize,
    g: &ConvGeom,
    weight: &[f32],
    c_out: usize,
    dy: &[f32],
    mut dw: Option<&mut [f32]>,
    mut db: Option<&mut [f32]>,
    want_dx: bool,
) -> Option<Vec<f32>> {
    let in_len = g.c_in * g.h * g.w;
    let hw = g.col_cols();
    let kdim = g.col_rows();
    let mut dx = want_dx.then(|| vec![0.0f32; n * in_len]);
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0f32; kdim * hw]
    };
    let mut dcols = if want_dx && !g.is_pointwise() {
        vec![0.0f32; kdim * hw]
    } else {
        Vec::new()
    };
    for b in 0..n {
        let dyb = &dy[b * c_out * hw..(b + 1) * c_out * hw];
        if let Some(db) = db.as_deref_mut() {
            for (o, chunk) in dyb.chunks(hw).enumerate() {
                db[o] += chunk.iter().map(|&v| v as f64).sum::<f64>() as f32;
            }
        }
        let xb = &x[b * in_len..(b + 1) * in_len];
        if let Some(dw) = dw.as_deref_mut() {
            let col_ref: &[f32] = if g.is_pointwise() {
                xb
            } else {
                im2col(xb, g, &mut cols);
                &cols
            };
            // dW += dY · colsᵀ
            gemm(
                c_out,
                hw,
                kdim,
                1.0,
                MatRef::new(dyb, hw, false),
                MatRef::new(col_ref, hw, true),
                1.0,
                dw,
            );
        }
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[b * in_len..(b + 1) * in_len];
            if g.is_pointwise() {
                gemm(
                    kdim,
                    c_out,
                    hw,
                    1.0,
                    MatRef::new(weight, kdim, true),
                    MatRef::new(dyb, hw, false),
                    0.0,
                    dxb,
                );
            } else {
                gemm(
                    kdim,
                    c_out,
                    hw,
                    1.0,
                    MatRef::new(weight, kdim, true),
                    MatRef::new(dyb, hw, false),
                    0.0,
                    &mut dcols,
                );
                col2im(&dcols, g, dxb);
            }
        }
    }
    dx
}

/// Per-(item, group) statistics of group normalization.
pub(crate) struct GroupStats {
    pub mean: Vec<f32>,
    pub rstd: Vec<f32>,
}

pub(crate) fn group_norm_forward(
    x: &[f32],
    dims: (usize, usize, usize, usize),
    groups: usize,
    gamma: &[f32],
    beta: &[f32],
    eps: f32,
) -> (Vec<f32>, GroupStats) {
    let (n, c, h, w) = dims;
    let cpg = c / groups;
    let hw = h * w;
    let group_len = cpg * hw;
    let mut out = vec![0.0f32; x.len()];
    let mut mean = Vec::with_capacity(n * groups);
    let mut rstd = Vec::with_capacity(n * groups);
    for b in 0..n {
        for gi in 0..groups {
            let start = (b * c + gi * cpg) * hw;
            let seg = &x[start..start + group_len];
            let m = seg.iter().map(|&v| v as f64).sum::<f64>() / group_len as f64;
            let var = seg
                .iter()
                .map(|&v| {
                    let d = v as f64 - m;
                    d * d
                })
                .sum::<f64>()
                / group_len as f64;
            let r = 1.0 / (var + eps as f64).sqrt();
            mean.push(m as f32);
            rstd.push(r as f32);
            for ci in 0..cpg {
                let ch = gi * cpg + ci;
                let (ga, be) = (gamma[ch], beta[ch]);
                let off = start + ci * hw;
                for i in off..off + hw {
                    out[i] = ((x[i] as f64 - m) * r) as f32 * ga + be;
                }
            }
        }
    }
    (out, GroupStats { mean, rstd })
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn group_norm_backward(
    x: &[f32],
    dims: (usize, usize, usize, usize),
    groups: usize,
    gamma: &[f32],
    stats: &GroupStats,
    dy: &[f32],
    dgamma: &mut [f32],
    dbeta: &mut [f32],
) -> Vec<f32> {
    let (n, c, h, w) = dims;
    let cpg = c / groups;
    let hw = h * w;
    let m_len = (cpg * hw) as f64;
    let mut dx = vec![0.0f32; x.len()];
    for b in 0..n {
        for gi in 0..groups {
            let si = b * groups + gi;
            let (mean, rstd) = (stats.mean[si] as f64, stats.rstd[si] as f64);
            let start = (b * c + gi * cpg) * hw;
            let mut sum_dxhat = 0.0f64;
            let mut sum_dxhat_xhat = 0.0f64;
            for ci in 0..cpg {
                let ch = gi * cpg + ci;
                let off = start + ci * hw;
                let mut dg = 0.0f64;
                let mut dbt = 0.0f64;
                for i in off..off + hw {
                    let xhat = (x[i] as f64 - mean) * rstd;
                    let d = dy[i] as f64;
                    dg += d * xhat;
                    dbt += d;
                    let dxhat = d * gamma[ch] as f64;
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                }
                dgamma[ch] += dg as f32;
                dbeta[ch] += dbt as f32;
            }
            for ci in 0..cpg {
                let ch = gi * cpg + ci;
                let off = start + ci * hw;
                for i in off..off + hw {
                    let xhat = (x[i] as f64 - mean) * rstd;
                    let dxhat = dy[i] as f64 * gamma[ch] as f64;
                    dx[i] = (rstd / m_len * (m_len * dxhat - sum_dxhat - xhat * sum_dxhat_xhat)) as f32;
                }
            }
        }
    }
    dx
}

/// Bilinear sampling weights for resizing one axis, align-corners=false.
pub(crate) fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f32)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let frac = (src - i0 as f64) as f32;
            (i0, i1, frac)
        })
        .collect()
}
