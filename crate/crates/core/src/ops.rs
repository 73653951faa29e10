//! Neural network operations: each records its backward rule on the graph.
//!
//! Spatial ops accept [N,C,H,W] or an implicit single-sample [C,H,W];
//! reductions accumulate in f64 to keep 32-bit gradient checks meaningful.

use crate::matmul::{matmul, matmul_nt, matmul_tn};
use crate::rng::SplitMix64;
use crate::tensor::{Graph, Tensor};
use crate::{Error, Result};
use rayon::prelude::*;

fn shape_err(context: &'static str, expected: Vec<usize>, got: Vec<usize>) -> Error {
    Error::ShapeMismatch {
        context,
        expected,
        got,
    }
}

/// Splits [N,C,H,W] or [C,H,W] into (n, c, h, w, was_rank3).
fn spatial_dims(shape: &[usize], context: &'static str) -> Result<(usize, usize, usize, usize, bool)> {
    match shape.len() {
        4 => Ok((shape[0], shape[1], shape[2], shape[3], false)),
        3 => Ok((1, shape[0], shape[1], shape[2], true)),
        _ => Err(shape_err(context, vec![0, 0, 0, 0], shape.to_vec())),
    }
}

// ---------------------------------------------------------------------------
// elementwise / structural
// ---------------------------------------------------------------------------

/// Elementwise sum of two same-shape tensors.
pub fn add(g: &mut Graph, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(shape_err("add", a.shape(), b.shape()));
    }
    let out = {
        let av = a.values();
        let bv = b.values();
        Tensor::new(a.shape(), av.iter().zip(bv.iter()).map(|(x, y)| x + y).collect())
    };
    g.touch(&[a, b]);
    if g.wants_grad(&[a, b]) {
        let (ac, bc, oc) = (a.clone(), b.clone(), out.clone());
        g.register(&[a, b], &out, move || {
            let dy = oc.borrow().grad.clone().expect("grad allocated");
            if ac.requires_grad() {
                ac.accum_grad(&dy);
            }
            if bc.requires_grad() {
                bc.accum_grad(&dy);
            }
        });
    }
    Ok(out)
}

/// Elementwise (Hadamard) product of two same-shape tensors.
pub fn mul(g: &mut Graph, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(shape_err("mul", a.shape(), b.shape()));
    }
    let out = {
        let av = a.values();
        let bv = b.values();
        Tensor::new(a.shape(), av.iter().zip(bv.iter()).map(|(x, y)| x * y).collect())
    };
    g.touch(&[a, b]);
    if g.wants_grad(&[a, b]) {
        let (ac, bc, oc) = (a.clone(), b.clone(), out.clone());
        g.register(&[a, b], &out, move || {
            let dy = oc.borrow().grad.clone().expect("grad allocated");
            let av = ac.to_vec();
            let bv = bc.to_vec();
            if ac.requires_grad() {
                let da: Vec<f32> = dy.iter().zip(&bv).map(|(d, v)| d * v).collect();
                ac.accum_grad(&da);
            }
            if bc.requires_grad() {
                let db: Vec<f32> = dy.iter().zip(&av).map(|(d, v)| d * v).collect();
                bc.accum_grad(&db);
            }
        });
    }
    Ok(out)
}

/// Multiplies every element by a constant.
pub fn scale(g: &mut Graph, x: &Tensor, c: f32) -> Result<Tensor> {
    let out = Tensor::new(x.shape(), x.values().iter().map(|v| v * c).collect());
    g.touch(&[x]);
    if g.wants_grad(&[x]) {
        let (xc, oc) = (x.clone(), out.clone());
        g.register(&[x], &out, move || {
            let dy = oc.borrow().grad.clone().expect("grad allocated");
            let dx: Vec<f32> = dy.iter().map(|d| d * c).collect();
            xc.accum_grad(&dx);
        });
    }
    Ok(out)
}

/// 1 - x elementwise.
pub fn one_minus(g: &mut Graph, x: &Tensor) -> Result<Tensor> {
    let out = Tensor::new(x.shape(), x.values().iter().map(|v| 1.0 - v).collect());
    g.touch(&[x]);
    if g.wants_grad(&[x]) {
        let (xc, oc) = (x.clone(), out.clone());
        g.register(&[x], &out, move || {
            let dy = oc.borrow().grad.clone().expect("grad allocated");
            let dx: Vec<f32> = dy.iter().map(|d| -d).collect();
            xc.accum_grad(&dx);
        });
    }
    Ok(out)
}

/// Mean over all entries, as a scalar.
pub fn mean_all(g: &mut Graph, x: &Tensor) -> Result<Tensor> {
    let n = x.numel();
    let s: f64 = x.values().iter().map(|v| *v as f64).sum();
    let out = Tensor::scalar((s / n as f64) as f32);
    g.touch(&[x]);
    if g.wants_grad(&[x]) {
        let (xc, oc) = (x.clone(), out.clone());
        g.register(&[x], &out, move || {
            let dy = oc.borrow().grad.clone().expect("grad allocated")[0];
            let dx = vec![dy / n as f32; n];
            xc.accum_grad(&dx);
        });
    }
    Ok(out)
}

/// Sum over all entries, as a scalar.
pub fn sum_all(g: &mut Graph, x: &Tensor) -> Result<Tensor> {
    let n = x.numel();
    let s: f64 = x.values().iter().map(|v| *v as f64).sum();
    let out = Tensor::scalar(s as f32);
    g.touch(&[x]);
    if g.wants_grad(&[x]) {
        let (xc, oc) = (x.clone(), out.clone());
        g.register(&[x], &out, move || {
            let dy = oc.borrow().grad.clone().expect("grad allocated")[0];
            let dx = vec![dy; n];
            xc.accum_grad(&dx);
        });
    }
    Ok(out)
}

/// Same buffer, new shape.
pub fn reshape(g: &mut Graph, x: &Tensor, shape: Vec<usize>) -> Result<Tensor> {
    let numel: usize = shape.iter().product();
    if numel != x.numel() {
        return Err(shape_err("reshape", shape, x.shape()));
    }
    let out = Tensor::new(shape, x.to_vec());
    g.touch(&[x]);
    if g.wants_grad(&[x]) {
        let (xc, oc) = (x.clone(), out.clone());
        g.register(&[x], &out, move || {
            let dy = oc.borrow().grad.clone().expect("grad allocated");
            xc.accum_grad(&dy);
        });
    }
    Ok(out)
}

/// Mean over the channel axis: [N,K,H,W] -> [N,1,H,W].
pub fn channel_mean(g: &mut Graph, x: &Tensor) -> Result<Tensor> {
    let (n, k, h, w, rank3) = spatial_dims(&x.shape(), "channel_mean")?;
    let hw = h * w;
    let mut vals = vec![0.0f32; n * hw];
    {
        let xs = x.values();
        for ni in 0..n {
            for p in 0..hw {
                let mut s = 0.0f64;
                for c in 0..k {
                    s += xs[(ni * k + c) * hw + p] as f64;
                }
                vals[ni * hw + p] = (s / k as f64) as f32;
            }
        }
    }
    let shape = if rank3 { vec![1, h, w] } else { vec![n, 1, h, w] };
    let out = Tensor::new(shape, vals);
    g.touch(&[x]);
    if g.wants_grad(&[x]) {
        let (xc, oc) = (x.clone(), out.clone());
        g.register(&[x], &out, move || {
            let dy = oc.borrow().grad.clone().expect("grad allocated");
            let mut dx = vec![0.0f32; n * k * hw];
            let inv_k = 1.0 / k as f32;
            for ni in 0..n {
                for c in 0..k {
                    for p in 0..hw {
                        dx[(ni * k + c) * hw + p] = dy[ni * hw + p] * inv_k;
                    }
                }
            }
            xc.accum_grad(&dx);
        });
    }
    Ok(out)
}

/// Concatenates [N,D_i] parts along the feature axis into [N, sum(D_i)].
pub fn concat_cols(g: &mut Graph, parts: &[Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::Contract("concat_cols of zero parts".into()));
    }
    let n = parts[0].shape()[0];
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        let s = p.shape();
        if s.len() != 2 || s[0] != n {
            return Err(shape_err("concat_cols", vec![n, 0], s));
        }
        widths.push(s[1]);
    }
    let total: usize = widths.iter().sum();
    let mut vals = vec![0.0f32; n * total];
    let mut offset = 0;
    for (p, &d) in parts.iter().zip(&widths) {
        let pv = p.values();
        for ni in 0..n {
            vals[ni * total + offset..ni * total + offset + d]
                .copy_from_slice(&pv[ni * d..(ni + 1) * d]);
        }
        offset += d;
    }
    let out = Tensor::new(vec![n, total], vals);
    let refs: Vec<&Tensor> = parts.iter().collect();
    g.touch(&refs);
    if g.wants_grad(&refs) {
        let parts_c: Vec<Tensor> = parts.to_vec();
        let oc = out.clone();
        let widths_c = widths.clone();
        g.register(&refs, &out, move || {
            let dy = oc.borrow().grad.clone().expect("grad allocated");
            let mut offset = 0;
            for (p, &d) in parts_c.iter().zip(&widths_c) {
                if p.requires_grad() {
                    let mut dp = vec![0.0f32; n * d];
                    for ni in 0..n {
                        dp[ni * d..(ni + 1) * d]
                            .copy_from_slice(&dy[ni * total + offset..ni * total + offset + d]);
                    }
                    p.accum_grad(&dp);
                }
                offset += d;
            }
        });
    }
    Ok(out)
}

/// Selects stripe `s` of pooled stripes [N,S,C] -> [N,C].
pub fn stripe_at(g: &mut Graph, pooled: &Tensor, s: usize) -> Result<Tensor> {
    let shape = pooled.shape();
    if shape.len() != 3 {
        return Err(shape_err("stripe_at", vec![0, 0, 0], shape));
    }
    let (n, ns, c) = (shape[0], shape[1], shape[2]);
    if s >= ns {
        return Err(Error::Contract(format!("stripe index {s} out of {ns}")));
    }
    let mut vals = vec![0.0f32; n * c];
    {
        let pv = pooled.values();
        for ni in 0..n {
            vals[ni * c..(ni + 1) * c]
                .copy_from_slice(&pv[(ni * ns + s) * c..(ni * ns + s + 1) * c]);
        }
    }
    let out = Tensor::new(vec![n, c], vals);
    g.touch(&[pooled]);
    if g.wants_grad(&[pooled]) {
        let (pc, oc) = (pooled.clone(), out.clone());
        g.register(&[pooled], &out, move || {
            let dy = oc.borrow().grad.clone().expect("grad allocated");
            let mut dp = vec![0.0f32; n * ns * c];
            for ni in 0..n {
                dp[(ni * ns + s) * c..(ni * ns + s + 1) * c]
                    .copy_from_slice(&dy[ni * c..(ni + 1) * c]);
            }
            pc.accum_grad(&dp);
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// activations
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

fn sigmoid_scalar(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn relu(g: &mut Graph, x: &Tensor) -> Result<Tensor> {
    let out = Tensor::new(x.shape(), x.values().iter().map(|v| v.max(0.0)).collect());
    g.touch(&[x]);
    if g.wants_grad(&[x]) {
        let (xc, oc) = (x.clone(), out.clone());
        g.register(&[x], &out, move || {
            let dy = oc.borrow().grad.clone().expect("grad allocated");
            let xv = xc.to_vec();
            // subgradient 0 at the kink
            let dx: Vec<f32> = dy
                .iter()
                .zip(&xv)
                .map(|(d, v)| if *v > 0.0 { *d } else { 0.0 })
                .collect();
            xc.accum_grad(&dx);
        });
    }
    Ok(out)
}

pub fn sigmoid(g: &mut Graph, x: &Tensor) -> Result<Tensor> {
    let out = Tensor::new(x.shape(), x.values().iter().map(|v| sigmoid_scalar(*v)).collect());
    g.touch(&[x]);
    if g.wants_grad(&[x]) {
        let (xc, oc) = (x.clone(), out.clone());
        g.register(&[x], &out, move || {
            let (dy, yv) = {
                let o = oc.borrow();
                (
                    o.grad.clone().expect("grad allocated"),
                    o.values.clone(),
                )
            };
            let dx: Vec<f32> = dy.iter().zip(&yv).map(|(d, y)| d * y * (1.0 - y)).collect();
            xc.accum_grad(&dx);
        });
    }
    Ok(out)
}

/// Elementwise relu or logistic.
pub fn pointwise_activation(g: &mut Graph, x: &Tensor, kind: Activation) -> Result<Tensor> {
    match kind {
        Activation::Relu => relu(g, x),
        Activation::Sigmoid => sigmoid(g, x),
    }
}

// ---------------------------------------------------------------------------
// convolution
// ---------------------------------------------------------------------------

/// 2d cross-correlation parameters. Kernels are odd-sized in this artifact.
#[derive(Clone)]
pub struct Conv2dParams {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dParams {
    pub fn new(weight: Tensor, bias: Option<Tensor>, stride: usize, padding: usize) -> Result<Self> {
        let ws = weight.shape();
        if ws.len() != 4 {
            return Err(shape_err("conv weight", vec![0, 0, 0, 0], ws));
        }
        if ws[2] % 2 == 0 || ws[3] % 2 == 0 {
            return Err(Error::Contract(format!(
                "conv kernel must be odd-sized, got {}x{}",
                ws[2], ws[3]
            )));
        }
        if stride == 0 {
            return Err(Error::Contract("conv stride must be positive".into()));
        }
        if let Some(b) = &bias {
            if b.shape() != vec![ws[0]] {
                return Err(shape_err("conv bias", vec![ws[0]], b.shape()));
            }
        }
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    /// He-normal initialized conv; bias (when present) starts at zero.
    pub fn he_init(
        rng: &mut SplitMix64,
        out_ch: usize,
        in_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        with_bias: bool,
    ) -> Self {
        let fan_in = (in_ch * kernel * kernel) as f64;
        let std = (2.0 / fan_in).sqrt();
        let n = out_ch * in_ch * kernel * kernel;
        let vals: Vec<f32> = (0..n).map(|_| (rng.gaussian() * std) as f32).collect();
        let weight = Tensor::param(vec![out_ch, in_ch, kernel, kernel], vals);
        let bias = with_bias.then(|| Tensor::param(vec![out_ch], vec![0.0; out_ch]));
        Self::new(weight, bias, stride, padding).expect("valid init")
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }
}

fn im2col(
    xn: &[f32],
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<f32> {
    let l = oh * ow;
    let mut col = vec![0.0f32; c_in * kh * kw * l];
    for c in 0..c_in {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((c * kh + ki) * kw + kj) * l;
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        col[row + oy * ow + ox] = xn[(c * h + iy) * w + ix as usize];
                    }
                }
            }
        }
    }
    col
}

fn col2im_accum(
    dcol: &[f32],
    dxn: &mut [f32],
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    let l = oh * ow;
    for c in 0..c_in {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((c * kh + ki) * kw + kj) * l;
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dxn[(c * h + iy) * w + ix as usize] += dcol[row + oy * ow + ox];
                    }
                }
            }
        }
    }
}

/// Standard cross-correlation over [N,Cin,H,W] (or [Cin,H,W]).
pub fn conv2d(g: &mut Graph, x: &Tensor, p: &Conv2dParams) -> Result<Tensor> {
    let (n, c_in, h, w, rank3) = spatial_dims(&x.shape(), "conv2d input")?;
    let ws = p.weight.shape();
    let (c_out, kh, kw) = (ws[0], ws[2], ws[3]);
    if ws[1] != c_in {
        return Err(shape_err("conv2d channels", ws.clone(), x.shape()));
    }
    let (stride, pad) = (p.stride, p.padding);
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(Error::Geometry(format!(
            "conv2d: input {h}x{w} with pad {pad} smaller than kernel {kh}x{kw}"
        )));
    }
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let l = oh * ow;
    let k_dim = c_in * kh * kw;
    let identity_col = kh == 1 && kw == 1 && stride == 1 && pad == 0;

    let mut out_vals = vec![0.0f32; n * c_out * l];
    {
        let xr = x.values();
        let xs: &[f32] = &xr;
        let wr = p.weight.values();
        let wflat: &[f32] = &wr;
        let bias_vals: Option<Vec<f32>> = p.bias.as_ref().map(|b| b.to_vec());
        let in_len = c_in * h * w;
        out_vals
            .par_chunks_mut(c_out * l)
            .enumerate()
            .for_each(|(ni, yn)| {
                let xn = &xs[ni * in_len..(ni + 1) * in_len];
                let y = if identity_col {
                    matmul(wflat, xn, c_out, k_dim, l)
                } else {
                    let col = im2col(xn, c_in, h, w, kh, kw, stride, pad, oh, ow);
                    matmul(wflat, &col, c_out, k_dim, l)
                };
                yn.copy_from_slice(&y);
                if let Some(b) = &bias_vals {
                    for c in 0..c_out {
                        let bc = b[c];
                        for v in &mut yn[c * l..(c + 1) * l] {
                            *v += bc;
                        }
                    }
                }
            });
    }
    let out_shape = if rank3 {
        vec![c_out, oh, ow]
    } else {
        vec![n, c_out, oh, ow]
    };
    let out = Tensor::new(out_shape, out_vals);

    let mut inputs: Vec<&Tensor> = vec![x, &p.weight];
    if let Some(b) = &p.bias {
        inputs.push(b);
    }
    g.touch(&inputs);
    if g.wants_grad(&inputs) {
        let (xc, wc, oc) = (x.clone(), p.weight.clone(), out.clone());
        let bc = p.bias.clone();
        g.register(&inputs, &out, move || {
            let dy = oc.borrow().grad.clone().expect("grad allocated");
            let in_len = c_in * h * w;
            let want_dx = xc.requires_grad();
            let want_dw = wc.requires_grad();
            let (dw_total, dx_buf) = {
                let xr = xc.borrow();
                let xs: &[f32] = &xr.values;
                let wr = wc.borrow();
                let wflat: &[f32] = &wr.values;
                let mut dx_buf = if want_dx { vec![0.0f32; n * in_len] } else { Vec::new() };
                // per-image partials collected in order, then reduced
                // sequentially: deterministic under any thread count
                let dw_parts: Vec<Vec<f32>> = if want_dx {
                    dx_buf
                        .par_chunks_mut(in_len)
                        .enumerate()
                        .map(|(ni, dxn)| {
                            let xn = &xs[ni * in_len..(ni + 1) * in_len];
                            let dyn_ = &dy[ni * c_out * l..(ni + 1) * c_out * l];
                            let dcol = matmul_tn(wflat, dyn_, c_out, k_dim, l);
                            if identity_col {
                                for (d, s) in dxn.iter_mut().zip(&dcol) {
                                    *d += s;
                                }
                            } else {
                                col2im_accum(&dcol, dxn, c_in, h, w, kh, kw, stride, pad, oh, ow);
                            }
                            if want_dw {
                                if identity_col {
                                    matmul_nt(dyn_, xn, c_out, l, k_dim)
                                } else {
                                    let col = im2col(xn, c_in, h, w, kh, kw, stride, pad, oh, ow);
                                    matmul_nt(dyn_, &col, c_out, l, k_dim)
                                }
                            } else {
                                Vec::new()
                            }
                        })
                        .collect()
                } else {
                    (0..n)
                        .into_par_iter()
                        .map(|ni| {
                            let xn = &xs[ni * in_len..(ni + 1) * in_len];
                            let dyn_ = &dy[ni * c_out * l..(ni + 1) * c_out * l];
                            if identity_col {
                                matmul_nt(dyn_, xn, c_out, l, k_dim)
                            } else {
                                let col = im2col(xn, c_in, h, w, kh, kw, stride, pad, oh, ow);
                                matmul_nt(dyn_, &col, c_out, l, k_dim)
                            }
                        })
                        .collect()
                };
                let dw_total = if want_dw {
                    let mut acc = vec![0.0f32; c_out * k_dim];
                    for part in &dw_parts {
                        for (a, p) in acc.iter_mut().zip(part) {
                            *a += p;
                        }
                    }
                    acc
                } else {
                    Vec::new()
                };
                (dw_total, dx_buf)
            };
            if want_dx {
                xc.accum_grad(&dx_buf);
            }
            if want_dw {
                wc.accum_grad(&dw_total);
            }
            if let Some(b) = &bc {
                if b.requires_grad() {
                    let mut db = vec![0.0f32; c_out];
                    for ni in 0..n {
                        for c in 0..c_out {
                            let mut s = 0.0f64;
                            for v in &dy[(ni * c_out + c) * l..(ni * c_out + c + 1) * l] {
                                s += *v as f64;
                            }
                            db[c] += s as f32;
                        }
                    }
                    b.accum_grad(&db);
                }
            }
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// batch normalization
// ---------------------------------------------------------------------------

/// Batch normalization state: learnable gamma/beta plus running statistics.
#[derive(Clone)]
pub struct BatchNorm2dParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f32,
    pub epsilon: f32,
}

impl BatchNorm2dParams {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::param(vec![channels], vec![1.0; channels]),
            beta: Tensor::param(vec![channels], vec![0.0; channels]),
            running_mean: Tensor::new(vec![channels], vec![0.0; channels]),
            running_var: Tensor::new(vec![channels], vec![1.0; channels]),
            momentum: 0.1,
            epsilon: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.shape()[0]
    }
}

/// Normalizes per channel; training mode uses batch statistics (population
/// variance) and updates running stats, eval mode uses running stats.
pub fn batch_norm2d(g: &mut Graph, x: &Tensor, p: &BatchNorm2dParams, training: bool) -> Result<Tensor> {
    let (n, c, h, w, rank3) = spatial_dims(&x.shape(), "batch_norm2d")?;
    if c != p.channels() {
        return Err(shape_err("batch_norm2d channels", vec![p.channels()], x.shape()));
    }
    let m = n * h * w;
    if training && m <= 1 {
        return Err(Error::Contract(
            "batch_norm2d in training mode needs more than one element per channel".into(),
        ));
    }
    let hw = h * w;
    let eps = p.epsilon;

    // per-channel mean / variance for this pass
    let (mean, var): (Vec<f32>, Vec<f32>) = if training {
        let xs = x.values();
        let mut mean = vec![0.0f32; c];
        let mut var = vec![0.0f32; c];
        for ci in 0..c {
            let mut s = 0.0f64;
            for ni in 0..n {
                for v in &xs[(ni * c + ci) * hw..(ni * c + ci + 1) * hw] {
                    s += *v as f64;
                }
            }
            let mu = s / m as f64;
            let mut sq = 0.0f64;
            for ni in 0..n {
                for v in &xs[(ni * c + ci) * hw..(ni * c + ci + 1) * hw] {
                    let d = *v as f64 - mu;
                    sq += d * d;
                }
            }
            mean[ci] = mu as f32;
            var[ci] = (sq / m as f64) as f32;
        }
        (mean, var)
    } else {
        (p.running_mean.to_vec(), p.running_var.to_vec())
    };

    if training {
        let mom = p.momentum;
        {
            let mut rm = p.running_mean.borrow_mut();
            for (r, b) in rm.values.iter_mut().zip(&mean) {
                *r = (1.0 - mom) * *r + mom * b;
            }
        }
        {
            let mut rv = p.running_var.borrow_mut();
            for (r, b) in rv.values.iter_mut().zip(&var) {
                *r = (1.0 - mom) * *r + mom * b;
            }
        }
    }

    let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let gamma_v = p.gamma.to_vec();
    let beta_v = p.beta.to_vec();
    let mut out_vals = vec![0.0f32; n * c * hw];
    {
        let xs = x.values();
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                let (mu, istd, gm, bt) = (mean[ci], inv_std[ci], gamma_v[ci], beta_v[ci]);
                for i in 0..hw {
                    out_vals[base + i] = (xs[base + i] - mu) * istd * gm + bt;
                }
            }
        }
    }
    let out_shape = if rank3 { vec![c, h, w] } else { vec![n, c, h, w] };
    let out = Tensor::new(out_shape, out_vals);

    let inputs: Vec<&Tensor> = vec![x, &p.gamma, &p.beta];
    g.touch(&inputs);
    g.touch(&[&p.running_mean, &p.running_var]);
    if g.wants_grad(&inputs) {
        let (xc, gc, bc, oc) = (x.clone(), p.gamma.clone(), p.beta.clone(), out.clone());
        g.register(&inputs, &out, move || {
            let dy = oc.borrow().grad.clone().expect("grad allocated");
            let xs = xc.to_vec();
            let gv = gc.to_vec();
            let mut dgamma = vec![0.0f32; c];
            let mut dbeta = vec![0.0f32; c];
            let mut dx = vec![0.0f32; n * c * hw];
            for ci in 0..c {
                let (mu, istd) = (mean[ci] as f64, inv_std[ci] as f64);
                let mut sum_dy = 0.0f64;
                let mut sum_dy_xhat = 0.0f64;
                for ni in 0..n {
                    let base = (ni * c + ci) * hw;
                    for i in 0..hw {
                        let d = dy[base + i] as f64;
                        let xhat = (xs[base + i] as f64 - mu) * istd;
                        sum_dy += d;
                        sum_dy_xhat += d * xhat;
                    }
                }
                dgamma[ci] = sum_dy_xhat as f32;
                dbeta[ci] = sum_dy as f32;
                if xc.requires_grad() {
                    let gmi = gv[ci] as f64 * istd;
                    if training {
                        let mf = m as f64;
                        for ni in 0..n {
                            let base = (ni * c + ci) * hw;
                            for i in 0..hw {
                                let d = dy[base + i] as f64;
                                let xhat = (xs[base + i] as f64 - mu) * istd;
                                dx[base + i] =
                                    (gmi * (d - sum_dy / mf - xhat * sum_dy_xhat / mf)) as f32;
                            }
                        }
                    } else {
                        for ni in 0..n {
                            let base = (ni * c + ci) * hw;
                            for i in 0..hw {
                                dx[base + i] = (gmi * dy[base + i] as f64) as f32;
                            }
                        }
                    }
                }
            }
            if xc.requires_grad() {
                xc.accum_grad(&dx);
            }
            if gc.requires_grad() {
                gc.accum_grad(&dgamma);
            }
            if bc.requires_grad() {
                bc.accum_grad(&dbeta);
            }
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// linear
// ---------------------------------------------------------------------------

/// Wx + b over [N,D] (or a single [D] vector).
pub fn linear(g: &mut Graph, x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let xs_shape = x.shape();
    let ws = weight.shape();
    if ws.len() != 2 {
        return Err(shape_err("linear weight", vec![0, 0], ws));
    }
    let (k, d) = (ws[0], ws[1]);
    let (n, rank1) = match xs_shape.len() {
        1 => (1usize, true),
        2 => (xs_shape[0], false),
        _ => return Err(shape_err("linear input", vec![0, d], xs_shape)),
    };
    let in_d = *xs_shape.last().unwrap();
    if in_d != d {
        return Err(shape_err("linear input dim", vec![n, d], xs_shape));
    }
    if bias.shape() != vec![k] {
        return Err(shape_err("linear bias", vec![k], bias.shape()));
    }
    let mut out_vals = {
        let xv = x.values();
        let wv = weight.values();
        matmul_nt(&xv, &wv, n, d, k)
    };
    {
        let bv = bias.values();
        for ni in 0..n {
            for (o, b) in out_vals[ni * k..(ni + 1) * k].iter_mut().zip(bv.iter()) {
                *o += b;
            }
        }
    }
    let out_shape = if rank1 { vec![k] } else { vec![n, k] };
    let out = Tensor::new(out_shape, out_vals);
    let inputs = [x, weight, bias];
    g.touch(&inputs);
    if g.wants_grad(&inputs) {
        let (xc, wc, bc, oc) = (x.clone(), weight.clone(), bias.clone(), out.clone());
        g.register(&inputs, &out, move || {
            let dy = oc.borrow().grad.clone().expect("grad allocated");
            if xc.requires_grad() {
                let wv = wc.to_vec();
                let dx = matmul(&dy, &wv, n, k, d);
                xc.accum_grad(&dx);
            }
            if wc.requires_grad() {
                let xv = xc.to_vec();
                let dw = matmul_tn(&dy, &xv, n, k, d);
                wc.accum_grad(&dw);
            }
            if bc.requires_grad() {
                let mut db = vec![0.0f32; k];
                for ni in 0..n {
                    for (dbj, dyj) in db.iter_mut().zip(&dy[ni * k..(ni + 1) * k]) {
                        *dbj += dyj;
                    }
                }
                bc.accum_grad(&db);
            }
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// pooling / gating / normalization
// ---------------------------------------------------------------------------

/// Row range of stripe `s` out of `n_stripes` over height `h`:
/// [floor(s*h/n), floor((s+1)*h/n)). The stripes partition [0,h) exactly.
pub fn stripe_bounds(h: usize, n_stripes: usize, s: usize) -> (usize, usize) {
    (s * h / n_stripes, (s + 1) * h / n_stripes)
}

/// Mean over each horizontal stripe: [N,C,H,W] -> [N,S,C] ([C,H,W] -> [S,C]).
pub fn stripe_avg_pool(g: &mut Graph, x: &Tensor, n_stripes: usize) -> Result<Tensor> {
    let (n, c, h, w, rank3) = spatial_dims(&x.shape(), "stripe_avg_pool")?;
    if n_stripes == 0 || n_stripes > h {
        return Err(Error::Geometry(format!(
            "stripe_avg_pool: {n_stripes} stripes over height {h}"
        )));
    }
    let hw = h * w;
    let mut out_vals = vec![0.0f32; n * n_stripes * c];
    {
        let xs = x.values();
        for ni in 0..n {
            for s in 0..n_stripes {
                let (r0, r1) = stripe_bounds(h, n_stripes, s);
                let count = ((r1 - r0) * w) as f64;
                for ci in 0..c {
                    let base = (ni * c + ci) * hw;
                    let mut acc = 0.0f64;
                    for r in r0..r1 {
                        for v in &xs[base + r * w..base + (r + 1) * w] {
                            acc += *v as f64;
                        }
                    }
                    out_vals[(ni * n_stripes + s) * c + ci] = (acc / count) as f32;
                }
            }
        }
    }
    let out_shape = if rank3 {
        vec![n_stripes, c]
    } else {
        vec![n, n_stripes, c]
    };
    let out = Tensor::new(out_shape, out_vals);
    g.touch(&[x]);
    if g.wants_grad(&[x]) {
        let (xc, oc) = (x.clone(), out.clone());
        g.register(&[x], &out, move || {
            let dy = oc.borrow().grad.clone().expect("grad allocated");
            let mut dx = vec![0.0f32; n * c * hw];
            for ni in 0..n {
                for s in 0..n_stripes {
                    let (r0, r1) = stripe_bounds(h, n_stripes, s);
                    let inv = 1.0 / ((r1 - r0) * w) as f32;
                    for ci in 0..c {
                        let d = dy[(ni * n_stripes + s) * c + ci] * inv;
                        let base = (ni * c + ci) * hw;
                        for r in r0..r1 {
                            for v in &mut dx[base + r * w..base + (r + 1) * w] {
                                *v += d;
                            }
                        }
                    }
                }
            }
            xc.accum_grad(&dx);
        });
    }
    Ok(out)
}

/// Multiplies every channel of x by the single-channel map m.
pub fn broadcast_mul(g: &mut Graph, x: &Tensor, m: &Tensor) -> Result<Tensor> {
    let (n, c, h, w, rank3) = spatial_dims(&x.shape(), "broadcast_mul x")?;
    let (mn, mc, mh, mw, _) = spatial_dims(&m.shape(), "broadcast_mul m")?;
    if mn != n || mc != 1 || mh != h || mw != w {
        return Err(shape_err("broadcast_mul", vec![n, 1, h, w], m.shape()));
    }
    let hw = h * w;
    let mut out_vals = vec![0.0f32; n * c * hw];
    {
        let xs = x.values();
        let ms = m.values();
        for ni in 0..n {
            let mbase = ni * hw;
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                for i in 0..hw {
                    out_vals[base + i] = xs[base + i] * ms[mbase + i];
                }
            }
        }
    }
    let out = Tensor::new(if rank3 { vec![c, h, w] } else { vec![n, c, h, w] }, out_vals);
    g.touch(&[x, m]);
    if g.wants_grad(&[x, m]) {
        let (xc, mc_, oc) = (x.clone(), m.clone(), out.clone());
        g.register(&[x, m], &out, move || {
            let dy = oc.borrow().grad.clone().expect("grad allocated");
            if xc.requires_grad() {
                let ms = mc_.to_vec();
                let mut dx = vec![0.0f32; n * c * hw];
                for ni in 0..n {
                    let mbase = ni * hw;
                    for ci in 0..c {
                        let base = (ni * c + ci) * hw;
                        for i in 0..hw {
                            dx[base + i] = dy[base + i] * ms[mbase + i];
                        }
                    }
                }
                xc.accum_grad(&dx);
            }
            if mc_.requires_grad() {
                let xs = xc.to_vec();
                let mut dm = vec![0.0f32; n * hw];
                for ni in 0..n {
                    let mbase = ni * hw;
                    for ci in 0..c {
                        let base = (ni * c + ci) * hw;
                        for i in 0..hw {
                            dm[mbase + i] += dy[base + i] * xs[base + i];
                        }
                    }
                }
                mc_.accum_grad(&dm);
            }
        });
    }
    Ok(out)
}

/// Divides each channel by its spatial l2 norm (plus eps).
pub fn spatial_l2_normalize(g: &mut Graph, x: &Tensor, eps: f32) -> Result<Tensor> {
    if eps <= 0.0 {
        return Err(Error::Contract("spatial_l2_normalize needs eps > 0".into()));
    }
    let (n, c, h, w, rank3) = spatial_dims(&x.shape(), "spatial_l2_normalize")?;
    let hw = h * w;
    let mut norms = vec![0.0f32; n * c];
    let mut out_vals = vec![0.0f32; n * c * hw];
    {
        let xs = x.values();
        for nc in 0..n * c {
            let base = nc * hw;
            let mut acc = 0.0f64;
            for v in &xs[base..base + hw] {
                acc += (*v as f64) * (*v as f64);
            }
            let r = acc.sqrt() as f32;
            norms[nc] = r;
            let inv = 1.0 / (r + eps);
            for i in 0..hw {
                out_vals[base + i] = xs[base + i] * inv;
            }
        }
    }
    let out = Tensor::new(if rank3 { vec![c, h, w] } else { vec![n, c, h, w] }, out_vals);
    g.touch(&[x]);
    if g.wants_grad(&[x]) {
        let (xc, oc) = (x.clone(), out.clone());
        g.register(&[x], &out, move || {
            let dy = oc.borrow().grad.clone().expect("grad allocated");
            let xs = xc.to_vec();
            let mut dx = vec![0.0f32; n * c * hw];
            for nc in 0..n * c {
                let base = nc * hw;
                let r = norms[nc] as f64;
                let denom = r + eps as f64;
                let mut s_dyx = 0.0f64;
                for i in 0..hw {
                    s_dyx += dy[base + i] as f64 * xs[base + i] as f64;
                }
                let second = if r > 1e-20 { s_dyx / (r * denom * denom) } else { 0.0 };
                for i in 0..hw {
                    dx[base + i] =
                        (dy[base + i] as f64 / denom - xs[base + i] as f64 * second) as f32;
                }
            }
            xc.accum_grad(&dx);
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

/// Mean over the batch of -log softmax(logits)[target], max-stabilized.
/// Accepts [N,K] with N targets, or a single [K] vector with one target.
pub fn softmax_cross_entropy(g: &mut Graph, logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
    let shape = logits.shape();
    let (n, k) = match shape.len() {
        1 => (1usize, shape[0]),
        2 => (shape[0], shape[1]),
        _ => return Err(shape_err("softmax_cross_entropy", vec![0, 0], shape)),
    };
    if targets.len() != n {
        return Err(Error::Contract(format!(
            "softmax_cross_entropy: {} targets for batch of {n}",
            targets.len()
        )));
    }
    for (i, t) in targets.iter().enumerate() {
        if *t >= k {
            return Err(Error::Contract(format!(
                "softmax_cross_entropy: target {t} out of range 0..{k} at row {i}"
            )));
        }
    }
    let mut total = 0.0f64;
    {
        let lv = logits.values();
        for ni in 0..n {
            let row = &lv[ni * k..(ni + 1) * k];
            let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
            let mut lse = 0.0f64;
            for v in row {
                lse += (*v as f64 - mx).exp();
            }
            let lse = lse.ln() + mx;
            total += lse - row[targets[ni]] as f64;
        }
    }
    let out = Tensor::scalar((total / n as f64) as f32);
    g.touch(&[logits]);
    if g.wants_grad(&[logits]) {
        let (lc, oc) = (logits.clone(), out.clone());
        let tg: Vec<usize> = targets.to_vec();
        g.register(&[logits], &out, move || {
            let dy = oc.borrow().grad.clone().expect("grad allocated")[0];
            let lv = lc.to_vec();
            let mut dl = vec![0.0f32; n * k];
            let scale = dy / n as f32;
            for ni in 0..n {
                let row = &lv[ni * k..(ni + 1) * k];
                let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
                let mut z = 0.0f64;
                let exps: Vec<f64> = row.iter().map(|v| (*v as f64 - mx).exp()).collect();
                for e in &exps {
                    z += e;
                }
                for j in 0..k {
                    let p = (exps[j] / z) as f32;
                    let ind = if j == tg[ni] { 1.0 } else { 0.0 };
                    dl[ni * k + j] = (p - ind) * scale;
                }
            }
            lc.accum_grad(&dl);
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// augmentation
// ---------------------------------------------------------------------------

/// Reverses the last (width) axis; an involution. Pure value op, no gradient.
pub fn horizontal_flip(x: &Tensor) -> Tensor {
    let shape = x.shape();
    assert!(shape.len() >= 2, "horizontal_flip needs a spatial tensor");
    let w = *shape.last().unwrap();
    let rows = x.numel() / w;
    let xs = x.values();
    let mut vals = vec![0.0f32; x.numel()];
    for r in 0..rows {
        for i in 0..w {
            vals[r * w + i] = xs[r * w + (w - 1 - i)];
        }
    }
    Tensor::new(shape, vals)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::backward_pass;

    fn assert_close(got: &[f32], want: &[f32], tol: f32) {
        assert_eq!(got.len(), want.len());
        for (i, (g, w)) in got.iter().zip(want).enumerate() {
            assert!((g - w).abs() <= tol, "index {i}: got {g}, want {w}");
        }
    }

    #[test]
    fn conv_1x1_identity_kernel_passes_input_through() {
        let mut g = Graph::new();
        // 2 channels, identity mixing matrix
        let w = Tensor::new(vec![2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]);
        let p = Conv2dParams::new(w, None, 1, 0).unwrap();
        let x = Tensor::new(vec![1, 2, 2, 2], (0..8).map(|i| i as f32).collect());
        let y = conv2d(&mut g, &x, &p).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn conv_3x3_ones_with_padding_counts_neighbors() {
        let mut g = Graph::new();
        let w = Tensor::new(vec![1, 1, 3, 3], vec![1.0; 9]);
        let p = Conv2dParams::new(w, None, 1, 1).unwrap();
        let x = Tensor::new(vec![1, 1, 3, 3], vec![1.0; 9]);
        let y = conv2d(&mut g, &x, &p).unwrap();
        let v = y.to_vec();
        assert_eq!(v[4], 9.0); // center sees all nine
        for corner in [0, 2, 6, 8] {
            assert_eq!(v[corner], 4.0);
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut g = Graph::new();
        let w = Tensor::new(vec![1, 3, 1, 1], vec![1.0; 3]);
        let p = Conv2dParams::new(w, None, 1, 0).unwrap();
        let x = Tensor::new(vec![1, 2, 2, 2], vec![0.0; 8]);
        assert!(conv2d(&mut g, &x, &p).is_err());
    }

    #[test]
    fn conv_rejects_even_kernel() {
        let w = Tensor::new(vec![1, 1, 2, 2], vec![1.0; 4]);
        assert!(Conv2dParams::new(w, None, 1, 0).is_err());
    }

    #[test]
    fn batch_norm_standardizes_two_point_channel() {
        let mut g = Graph::new();
        let p = BatchNorm2dParams::new(1);
        // one channel holding values 1 and 3: mean 2, population var 1
        let x = Tensor::new(vec![1, 1, 2, 1], vec![1.0, 3.0]);
        let y = batch_norm2d(&mut g, &x, &p, true).unwrap();
        assert_close(&y.to_vec(), &[-1.0, 1.0], 1e-4);
        // running stats moved toward the batch
        assert_close(&p.running_mean.to_vec(), &[0.2], 1e-6);
        assert_close(&p.running_var.to_vec(), &[0.9 + 0.1], 1e-6);
    }

    #[test]
    fn batch_norm_eval_with_standard_stats_is_identity() {
        let mut g = Graph::new();
        let p = BatchNorm2dParams::new(2);
        let x = Tensor::new(vec![1, 2, 1, 2], vec![0.3, -0.5, 1.25, 2.0]);
        let y = batch_norm2d(&mut g, &x, &p, false).unwrap();
        assert_close(&y.to_vec(), &x.to_vec(), 1e-4);
    }

    #[test]
    fn batch_norm_training_needs_multiple_elements() {
        let mut g = Graph::new();
        let p = BatchNorm2dParams::new(1);
        let x = Tensor::new(vec![1, 1, 1, 1], vec![2.0]);
        assert!(batch_norm2d(&mut g, &x, &p, true).is_err());
    }

    #[test]
    fn relu_splits_sign() {
        let mut g = Graph::new();
        let x = Tensor::new(vec![2], vec![-1.0, 2.0]);
        let y = relu(&mut g, &x).unwrap();
        assert_eq!(y.to_vec(), vec![0.0, 2.0]);
    }

    #[test]
    fn sigmoid_anchor_values() {
        let mut g = Graph::new();
        let x = Tensor::new(vec![2], vec![0.0, 1.0]);
        let y = pointwise_activation(&mut g, &x, Activation::Sigmoid).unwrap();
        let v = y.to_vec();
        assert!((v[0] - 0.5).abs() < 1e-7);
        assert!((v[1] - 0.731059).abs() < 1e-5);
    }

    #[test]
    fn sigmoid_gradient_at_zero_is_quarter() {
        let mut g = Graph::new();
        let x = Tensor::param(vec![1], vec![0.0]);
        let y = sigmoid(&mut g, &x).unwrap();
        backward_pass(&mut g, &y).unwrap();
        assert_close(&x.grad().unwrap(), &[0.25], 1e-6);
    }

    #[test]
    fn linear_identity_and_example() {
        let mut g = Graph::new();
        let w = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let b = Tensor::new(vec![2], vec![0.0, 0.0]);
        let x = Tensor::new(vec![2], vec![3.0, 4.0]);
        let y = linear(&mut g, &x, &w, &b).unwrap();
        assert_eq!(y.to_vec(), vec![3.0, 4.0]);

        let w = Tensor::new(vec![1, 2], vec![1.0, 2.0]);
        let b = Tensor::new(vec![1], vec![1.0]);
        let y = linear(&mut g, &x, &w, &b).unwrap();
        assert_eq!(y.to_vec(), vec![12.0]);
    }

    #[test]
    fn stripe_pool_examples() {
        let mut g = Graph::new();
        // constant map pools to the constant
        let x = Tensor::full(vec![1, 2, 4, 3], 2.5);
        let y = stripe_avg_pool(&mut g, &x, 2).unwrap();
        assert_eq!(y.shape(), vec![1, 2, 2]);
        assert!(y.to_vec().iter().all(|v| (*v - 2.5).abs() < 1e-6));

        // H=8 column 1..8, two stripes
        let x = Tensor::new(vec![1, 1, 8, 1], (1..=8).map(|i| i as f32).collect());
        let y = stripe_avg_pool(&mut g, &x, 2).unwrap();
        assert_close(&y.to_vec(), &[2.5, 6.5], 1e-6);

        // single stripe equals global average pooling
        let x = Tensor::new(vec![1, 1, 4, 2], (1..=8).map(|i| i as f32).collect());
        let y = stripe_avg_pool(&mut g, &x, 1).unwrap();
        assert_close(&y.to_vec(), &[4.5], 1e-6);

        // more stripes than rows is an error
        assert!(stripe_avg_pool(&mut g, &x, 5).is_err());
    }

    #[test]
    fn stripe_bounds_partition_height_exactly() {
        for h in 1..40usize {
            for n in 1..=h {
                let mut covered = 0;
                let mut prev_end = 0;
                for s in 0..n {
                    let (r0, r1) = stripe_bounds(h, n, s);
                    assert_eq!(r0, prev_end, "h={h} n={n} s={s}");
                    assert!(r1 > r0 || r1 == r0, "bounds ordered");
                    covered += r1 - r0;
                    prev_end = r1;
                }
                assert_eq!(prev_end, h);
                assert_eq!(covered, h);
            }
        }
    }

    #[test]
    fn broadcast_mul_examples() {
        let mut g = Graph::new();
        let x = Tensor::new(vec![1, 2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let ones = Tensor::full(vec![1, 1, 1, 2], 1.0);
        let y = broadcast_mul(&mut g, &x, &ones).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());

        let zeros = Tensor::zeros(vec![1, 1, 1, 2]);
        let y = broadcast_mul(&mut g, &x, &zeros).unwrap();
        assert!(y.to_vec().iter().all(|v| *v == 0.0));

        let m = Tensor::new(vec![1, 1, 1, 2], vec![0.5, 1.0]);
        let y = broadcast_mul(&mut g, &x, &m).unwrap();
        assert_close(&y.to_vec(), &[0.5, 2.0, 1.5, 4.0], 1e-6);
    }

    #[test]
    fn l2_normalize_examples() {
        let mut g = Graph::new();
        let x = Tensor::new(vec![1, 1, 1, 2], vec![3.0, 4.0]);
        let y = spatial_l2_normalize(&mut g, &x, 1e-12).unwrap();
        assert_close(&y.to_vec(), &[0.6, 0.8], 1e-6);

        let x = Tensor::new(vec![1, 1, 1, 3], vec![1.0, 0.0, 0.0]);
        let y = spatial_l2_normalize(&mut g, &x, 1e-12).unwrap();
        assert_close(&y.to_vec(), &[1.0, 0.0, 0.0], 1e-6);

        let x = Tensor::zeros(vec![1, 1, 1, 3]);
        let y = spatial_l2_normalize(&mut g, &x, 1e-12).unwrap();
        assert_eq!(y.to_vec(), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn l2_normalize_output_norm_near_one() {
        let mut rng = SplitMix64::new(11);
        for _ in 0..20 {
            let vals: Vec<f32> = (0..24).map(|_| rng.gaussian() as f32).collect();
            let x = Tensor::new(vec![2, 2, 2, 3], vals);
            let mut g = Graph::new();
            let y = spatial_l2_normalize(&mut g, &x, 1e-12).unwrap();
            let yv = y.to_vec();
            for c in 0..4 {
                let norm: f32 = yv[c * 6..(c + 1) * 6].iter().map(|v| v * v).sum::<f32>().sqrt();
                assert!(norm > 1.0 - 1e-3 && norm <= 1.0 + 1e-5, "norm {norm}");
            }
        }
    }

    #[test]
    fn cross_entropy_anchors() {
        let mut g = Graph::new();
        // uniform logits -> ln K
        let x = Tensor::new(vec![4], vec![0.7; 4]);
        let y = softmax_cross_entropy(&mut g, &x, &[2]).unwrap();
        assert!((y.item() - (4.0f32).ln()).abs() < 1e-6);

        // closed form ln(1 + e^-2)
        let x = Tensor::new(vec![2], vec![2.0, 0.0]);
        let y = softmax_cross_entropy(&mut g, &x, &[0]).unwrap();
        assert!((y.item() - 0.126928).abs() < 1e-5);

        // saturated target logit
        let x = Tensor::new(vec![3], vec![30.0, 0.0, 0.0]);
        let y = softmax_cross_entropy(&mut g, &x, &[0]).unwrap();
        assert!(y.item() >= 0.0 && y.item() < 1e-9);

        // out-of-range target
        assert!(softmax_cross_entropy(&mut g, &x, &[3]).is_err());
    }

    #[test]
    fn cross_entropy_nonnegative_on_random_logits() {
        let mut rng = SplitMix64::new(3);
        for _ in 0..100 {
            let k = 2 + rng.below(6);
            let vals: Vec<f32> = (0..k).map(|_| (rng.gaussian() * 3.0) as f32).collect();
            let x = Tensor::new(vec![k], vals);
            let t = rng.below(k);
            let mut g = Graph::new();
            let y = softmax_cross_entropy(&mut g, &x, &[t]).unwrap();
            assert!(y.item() >= 0.0);
        }
    }

    #[test]
    fn flip_is_an_involution_and_swaps_columns() {
        let x = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let f = horizontal_flip(&x);
        assert_eq!(f.to_vec(), vec![2.0, 1.0, 4.0, 3.0]);
        assert_eq!(horizontal_flip(&f).to_vec(), x.to_vec());
    }

    #[test]
    fn channel_mean_averages_across_channels() {
        let mut g = Graph::new();
        let x = Tensor::new(vec![1, 2, 1, 2], vec![2.0, 0.0, 0.0, 4.0]);
        let y = channel_mean(&mut g, &x).unwrap();
        assert_eq!(y.shape(), vec![1, 1, 1, 2]);
        assert_close(&y.to_vec(), &[1.0, 2.0], 1e-6);
    }

    #[test]
    fn concat_and_select_roundtrip() {
        let mut g = Graph::new();
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = Tensor::new(vec![2, 1], vec![5.0, 6.0]);
        let y = concat_cols(&mut g, &[a, b]).unwrap();
        assert_eq!(y.shape(), vec![2, 3]);
        assert_eq!(y.to_vec(), vec![1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);

        let pooled = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let s1 = stripe_at(&mut g, &pooled, 1).unwrap();
        assert_eq!(s1.to_vec(), vec![3.0, 4.0]);
    }
}
