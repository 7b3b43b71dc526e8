//! Raw numeric kernels used by the graph ops. All layouts are row-major;
//! feature maps are `C×H×W` without a batch axis.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_ch: usize,
    pub out_ch: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    fn in_per_group(&self) -> usize {
        self.in_ch / self.groups
    }

    fn out_per_group(&self) -> usize {
        self.out_ch / self.groups
    }
}

/// `c[m,n] = a[m,k] · b[k,n]`
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in row.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// `c[m,n] = a[m,k] · b[n,k]ᵀ`
pub fn matmul_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    c
}

/// `c[k,n] = a[m,k]ᵀ · b[m,n]`
pub fn matmul_at(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

pub fn conv2d_forward(x: &[f64], w: &[f64], bias: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let (ipg, opg) = (g.in_per_group(), g.out_per_group());
    let mut out = vec![0.0; g.out_ch * oh * ow];
    for oc in 0..g.out_ch {
        let grp = oc / opg;
        let plane = &mut out[oc * oh * ow..(oc + 1) * oh * ow];
        if let Some(b) = bias {
            plane.iter_mut().for_each(|v| *v = b[oc]);
        }
        for icl in 0..ipg {
            let ic = grp * ipg + icl;
            let xin = &x[ic * g.h * g.w..(ic + 1) * g.h * g.w];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let wv = w[((oc * ipg + icl) * g.k + ky) * g.k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let xrow = &xin[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let orow = &mut plane[oy * ow..(oy + 1) * ow];
                        for (ox, ov) in orow.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                *ov += wv * xrow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(dx, dw, db)` for a conv2d given the upstream gradient.
pub fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    g: &ConvGeom,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let (ipg, opg) = (g.in_per_group(), g.out_per_group());
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; g.out_ch];
    for oc in 0..g.out_ch {
        let grp = oc / opg;
        let gplane = &gout[oc * oh * ow..(oc + 1) * oh * ow];
        db[oc] = gplane.iter().sum();
        for icl in 0..ipg {
            let ic = grp * ipg + icl;
            let base = ic * g.h * g.w;
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let widx = ((oc * ipg + icl) * g.k + ky) * g.k + kx;
                    let wv = w[widx];
                    let mut acc = 0.0;
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let row = base + iy as usize * g.w;
                        for ox in 0..ow {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            let go = gplane[oy * ow + ox];
                            acc += go * x[row + ix as usize];
                            dx[row + ix as usize] += go * wv;
                        }
                    }
                    dw[widx] += acc;
                }
            }
        }
    }
    (dx, dw, db)
}

/// Transposed convolution with kernel 2 and stride 2. Weight layout is
/// `in×out×2×2`; output is `out×2H×2W`.
pub fn conv_t2_forward(
    x: &[f64],
    w: &[f64],
    bias: &[f64],
    in_ch: usize,
    out_ch: usize,
    h: usize,
    wd: usize,
) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * wd);
    let mut out = vec![0.0; out_ch * oh * ow];
    for oc in 0..out_ch {
        out[oc * oh * ow..(oc + 1) * oh * ow]
            .iter_mut()
            .for_each(|v| *v = bias[oc]);
    }
    for ic in 0..in_ch {
        for oc in 0..out_ch {
            for ky in 0..2 {
                for kx in 0..2 {
                    let wv = w[((ic * out_ch + oc) * 2 + ky) * 2 + kx];
                    for y in 0..h {
                        for xx in 0..wd {
                            out[oc * oh * ow + (2 * y + ky) * ow + 2 * xx + kx] +=
                                wv * x[ic * h * wd + y * wd + xx];
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn conv_t2_backward(
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    in_ch: usize,
    out_ch: usize,
    h: usize,
    wd: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (oh, ow) = (2 * h, 2 * wd);
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; out_ch];
    for (oc, d) in db.iter_mut().enumerate() {
        *d = gout[oc * oh * ow..(oc + 1) * oh * ow].iter().sum();
    }
    for ic in 0..in_ch {
        for oc in 0..out_ch {
            for ky in 0..2 {
                for kx in 0..2 {
                    let widx = ((ic * out_ch + oc) * 2 + ky) * 2 + kx;
                    let wv = w[widx];
                    let mut acc = 0.0;
                    for y in 0..h {
                        for xx in 0..wd {
                            let go = gout[oc * oh * ow + (2 * y + ky) * ow + 2 * xx + kx];
                            let xi = ic * h * wd + y * wd + xx;
                            acc += go * x[xi];
                            dx[xi] += go * wv;
                        }
                    }
                    dw[widx] += acc;
                }
            }
        }
    }
    (dx, dw, db)
}

/// Source index pairs and weights for resizing one axis with half-pixel
/// centers (the `align_corners = false` convention).
pub fn linear_resize_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn bilinear_forward(x: &[f64], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let ty = linear_resize_taps(h, oh);
    let tx = linear_resize_taps(w, ow);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - lx) + src[y0 * w + x1] * lx;
                let bot = src[y1 * w + x0] * (1.0 - lx) + src[y1 * w + x1] * lx;
                out[ch * oh * ow + oy * ow + ox] = top * (1.0 - ly) + bot * ly;
            }
        }
    }
    out
}

pub fn bilinear_backward(
    gout: &[f64],
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let ty = linear_resize_taps(h, oh);
    let tx = linear_resize_taps(w, ow);
    let mut dx = vec![0.0; c * h * w];
    for ch in 0..c {
        let dst = &mut dx[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let go = gout[ch * oh * ow + oy * ow + ox];
                dst[y0 * w + x0] += go * (1.0 - ly) * (1.0 - lx);
                dst[y0 * w + x1] += go * (1.0 - ly) * lx;
                dst[y1 * w + x0] += go * ly * (1.0 - lx);
                dst[y1 * w + x1] += go * ly * lx;
            }
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}
