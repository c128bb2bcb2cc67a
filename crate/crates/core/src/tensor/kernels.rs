//! Raw f64 loop kernels shared by forward evaluation and backward passes.
//!
//! All buffers are row-major. Convolutions use the cross-correlation
//! convention (no kernel flip); `conv_transpose` is the exact adjoint of
//! `conv2d` for matching hyperparameters.

/// C[m,n] = A[m,k] x B[k,n]
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

/// C[m,n] = A[k,m]^T x B[k,n]
pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for p in 0..k {
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

/// C[m,n] = A[m,k] x B[n,k]^T
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for p in 0..k {
                s += arow[p] * brow[p];
            }
            c[i * n + j] = s;
        }
    }
    c
}

pub struct ConvGeom {
    pub ci: usize,
    pub h: usize,
    pub w: usize,
    pub co: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

/// out[o,y,x] = sum_{c,u,v} inp[c, y*s-p+u, x*s-p+v] * ker[o,c,u,v]
pub fn conv2d(inp: &[f64], ker: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut out = vec![0.0; g.co * g.oh * g.ow];
    for o in 0..g.co {
        for c in 0..g.ci {
            let kbase = ((o * g.ci) + c) * g.kh * g.kw;
            let ibase = c * g.h * g.w;
            for y in 0..g.oh {
                for x in 0..g.ow {
                    let mut s = 0.0;
                    for u in 0..g.kh {
                        let iy = (y * g.stride + u) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for v in 0..g.kw {
                            let ix = (x * g.stride + v) as isize - g.pad as isize;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            s += inp[ibase + iy as usize * g.w + ix as usize]
                                * ker[kbase + u * g.kw + v];
                        }
                    }
                    out[(o * g.oh + y) * g.ow + x] += s;
                }
            }
        }
    }
    out
}

/// Adjoint of [`conv2d`] in its input: scatters `gout[co,oh,ow]` back to
/// an input-shaped buffer. Also the forward pass of `conv_transpose2d`.
pub fn conv2d_adjoint_input(gout: &[f64], ker: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut gin = vec![0.0; g.ci * g.h * g.w];
    for o in 0..g.co {
        for c in 0..g.ci {
            let kbase = ((o * g.ci) + c) * g.kh * g.kw;
            let ibase = c * g.h * g.w;
            for y in 0..g.oh {
                for x in 0..g.ow {
                    let go = gout[(o * g.oh + y) * g.ow + x];
                    if go == 0.0 {
                        continue;
                    }
                    for u in 0..g.kh {
                        let iy = (y * g.stride + u) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for v in 0..g.kw {
                            let ix = (x * g.stride + v) as isize - g.pad as isize;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            gin[ibase + iy as usize * g.w + ix as usize]
                                += go * ker[kbase + u * g.kw + v];
                        }
                    }
                }
            }
        }
    }
    gin
}

/// Gradient of [`conv2d`] in its kernels:
/// gker[o,c,u,v] = sum_{y,x} gout[o,y,x] * inp[c, y*s-p+u, x*s-p+v]
pub fn conv2d_grad_kernels(inp: &[f64], gout: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut gker = vec![0.0; g.co * g.ci * g.kh * g.kw];
    for o in 0..g.co {
        for c in 0..g.ci {
            let kbase = ((o * g.ci) + c) * g.kh * g.kw;
            let ibase = c * g.h * g.w;
            for y in 0..g.oh {
                for x in 0..g.ow {
                    let go = gout[(o * g.oh + y) * g.ow + x];
                    if go == 0.0 {
                        continue;
                    }
                    for u in 0..g.kh {
                        let iy = (y * g.stride + u) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for v in 0..g.kw {
                            let ix = (x * g.stride + v) as isize - g.pad as isize;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            gker[kbase + u * g.kw + v]
                                += go * inp[ibase + iy as usize * g.w + ix as usize];
                        }
                    }
                }
            }
        }
    }
    gker
}

/// Backward warp: out[c,r,q] = bilinear sample of `frame` at
/// (r + flow[0,r,q], q + flow[1,r,q]), source clamped to the border.
/// Flow channel 0 is a row displacement, channel 1 a column displacement.
pub fn bilinear_warp(frame: &[f64], flow: &[f64], ch: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; ch * h * w];
    let plane = h * w;
    for r in 0..h {
        for q in 0..w {
            let (r0, r1, fr) = clamp_axis(r as f64 + flow[r * w + q], h);
            let (c0, c1, fc) = clamp_axis(q as f64 + flow[plane + r * w + q], w);
            for c in 0..ch {
                let base = c * plane;
                let v = (1.0 - fr) * (1.0 - fc) * frame[base + r0 * w + c0]
                    + (1.0 - fr) * fc * frame[base + r0 * w + c1]
                    + fr * (1.0 - fc) * frame[base + r1 * w + c0]
                    + fr * fc * frame[base + r1 * w + c1];
                out[base + r * w + q] = v;
            }
        }
    }
    out
}

/// Gradients of [`bilinear_warp`] in the frame and the flow.
///
/// Clamped source coordinates get zero flow gradient (the clamp
/// saturates); at exact integer coordinates the right-sided derivative
/// is used.
pub fn bilinear_warp_grads(
    frame: &[f64],
    flow: &[f64],
    gout: &[f64],
    ch: usize,
    h: usize,
    w: usize,
) -> (Vec<f64>, Vec<f64>) {
    let plane = h * w;
    let mut gframe = vec![0.0; ch * plane];
    let mut gflow = vec![0.0; 2 * plane];
    for r in 0..h {
        for q in 0..w {
            let sr = r as f64 + flow[r * w + q];
            let sc = q as f64 + flow[plane + r * w + q];
            let r_clamped = sr <= 0.0 || sr >= (h - 1) as f64;
            let c_clamped = sc <= 0.0 || sc >= (w - 1) as f64;
            let (r0, r1, fr) = clamp_axis(sr, h);
            let (c0, c1, fc) = clamp_axis(sc, w);
            let mut d_sr = 0.0;
            let mut d_sc = 0.0;
            for c in 0..ch {
                let base = c * plane;
                let go = gout[base + r * w + q];
                if go == 0.0 {
                    continue;
                }
                let f00 = frame[base + r0 * w + c0];
                let f01 = frame[base + r0 * w + c1];
                let f10 = frame[base + r1 * w + c0];
                let f11 = frame[base + r1 * w + c1];
                gframe[base + r0 * w + c0] += go * (1.0 - fr) * (1.0 - fc);
                gframe[base + r0 * w + c1] += go * (1.0 - fr) * fc;
                gframe[base + r1 * w + c0] += go * fr * (1.0 - fc);
                gframe[base + r1 * w + c1] += go * fr * fc;
                d_sr += go * ((1.0 - fc) * (f10 - f00) + fc * (f11 - f01));
                d_sc += go * ((1.0 - fr) * (f01 - f00) + fr * (f11 - f10));
            }
            if !r_clamped {
                gflow[r * w + q] = d_sr;
            }
            if !c_clamped {
                gflow[plane + r * w + q] = d_sc;
            }
        }
    }
    (gframe, gflow)
}

/// Clamps a continuous coordinate to [0, n-1] and splits it into the two
/// bracketing cells plus the interpolation fraction.
fn clamp_axis(s: f64, n: usize) -> (usize, usize, f64) {
    let max = (n - 1) as f64;
    let s = s.clamp(0.0, max);
    let i0 = s.floor();
    let frac = s - i0;
    let i0 = i0 as usize;
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, frac)
}

/// Numerically stable softplus ln(1 + e^x).
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// d softplus / dx = sigmoid(x).
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
