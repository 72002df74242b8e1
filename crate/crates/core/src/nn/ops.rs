//! Raw kernels on flat channel-major `[C, T]` buffers. The tape in
//! [`super::tape`] wires these together; they are also exercised directly by
//! the gradient checks.

use crate::error::{Error, Result};

pub const LEAKY_SLOPE: f64 = 0.2;
pub const INSTANCE_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub c_out: usize,
    pub width: usize,
    pub stride: usize,
    pub padding: usize,
    pub t_in: usize,
    pub t_out: usize,
}

impl ConvGeometry {
    pub fn new(
        c_in: usize,
        c_out: usize,
        width: usize,
        stride: usize,
        padding: usize,
        t_in: usize,
    ) -> Result<Self> {
        if stride == 0 || width == 0 {
            return Err(Error::Shape("conv stride and width must be >= 1".into()));
        }
        let span = t_in + 2 * padding;
        if span < width {
            return Err(Error::Shape(format!(
                "conv input of length {t_in} (padding {padding}) shorter than kernel {width}"
            )));
        }
        Ok(Self {
            c_in,
            c_out,
            width,
            stride,
            padding,
            t_in,
            t_out: (span - width) / stride + 1,
        })
    }

    fn rows(&self) -> usize {
        self.c_in * self.width
    }
}

/// Unfolds `x: [c_in, t_in]` into `[c_in * width, t_out]`.
pub fn im2col(x: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let mut cols = vec![0.0; g.rows() * g.t_out];
    for ci in 0..g.c_in {
        let xrow = &x[ci * g.t_in..(ci + 1) * g.t_in];
        for k in 0..g.width {
            let out = &mut cols[(ci * g.width + k) * g.t_out..(ci * g.width + k + 1) * g.t_out];
            for (t, slot) in out.iter_mut().enumerate() {
                let src = (t * g.stride + k) as isize - g.padding as isize;
                if src >= 0 && (src as usize) < g.t_in {
                    *slot = xrow[src as usize];
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let mut x = vec![0.0; g.c_in * g.t_in];
    for ci in 0..g.c_in {
        let xrow = &mut x[ci * g.t_in..(ci + 1) * g.t_in];
        for k in 0..g.width {
            let src = &cols[(ci * g.width + k) * g.t_out..(ci * g.width + k + 1) * g.t_out];
            for (t, v) in src.iter().enumerate() {
                let dst = (t * g.stride + k) as isize - g.padding as isize;
                if dst >= 0 && (dst as usize) < g.t_in {
                    xrow[dst as usize] += v;
                }
            }
        }
    }
    x
}

/// `c = a * b` for row-major `a: [m, k]`, `b: [k, n]`, with optional
/// transposition expressed through strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices cover every index reachable through the given
    // dimensions and strides; `c` is a distinct, exclusively borrowed buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Cross-correlation with zero padding plus per-channel bias. Returns the
/// output `[c_out, t_out]` and the unfolded input needed by the backward pass.
pub fn conv1d_forward(x: &[f64], kernel: &[f64], bias: &[f64], g: &ConvGeometry) -> (Vec<f64>, Vec<f64>) {
    let cols = im2col(x, g);
    let mut y = vec![0.0; g.c_out * g.t_out];
    for (row, b) in y.chunks_mut(g.t_out).zip(bias) {
        row.fill(*b);
    }
    let k = g.rows();
    gemm(g.c_out, k, g.t_out, kernel, (k, 1), &cols, (g.t_out, 1), &mut y, true);
    (y, cols)
}

pub struct ConvGrads {
    pub input: Vec<f64>,
    pub kernel: Vec<f64>,
    pub bias: Vec<f64>,
}

pub fn conv1d_backward(grad_out: &[f64], cols: &[f64], kernel: &[f64], g: &ConvGeometry) -> ConvGrads {
    let k = g.rows();
    let mut gk = vec![0.0; g.c_out * k];
    gemm(g.c_out, g.t_out, k, grad_out, (g.t_out, 1), cols, (1, g.t_out), &mut gk, false);
    let mut gcols = vec![0.0; k * g.t_out];
    gemm(k, g.c_out, g.t_out, kernel, (1, k), grad_out, (g.t_out, 1), &mut gcols, false);
    let bias = grad_out.chunks(g.t_out).map(|r| r.iter().sum()).collect();
    ConvGrads {
        input: col2im(&gcols, g),
        kernel: gk,
        bias,
    }
}

pub fn leaky_relu(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

pub fn leaky_relu_grad(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        slope
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Repeats each time step `factor` times: `[C, T] -> [C, T * factor]`.
pub fn nearest_upsample(x: &[f64], channels: usize, factor: usize) -> Result<Vec<f64>> {
    if factor < 1 {
        return Err(Error::InvalidInput("upsample factor must be >= 1".into()));
    }
    let t = x.len() / channels;
    let mut y = Vec::with_capacity(x.len() * factor);
    for row in x.chunks(t) {
        for v in row {
            y.extend(std::iter::repeat(*v).take(factor));
        }
    }
    Ok(y)
}

pub fn nearest_upsample_backward(grad_out: &[f64], factor: usize) -> Vec<f64> {
    grad_out.chunks(factor).map(|c| c.iter().sum()).collect()
}

/// Per-channel normalization over time (no affine). Returns the output and
/// the per-channel inverse standard deviation.
pub fn instance_norm(x: &[f64], channels: usize) -> (Vec<f64>, Vec<f64>) {
    let t = x.len() / channels;
    let mut y = Vec::with_capacity(x.len());
    let mut inv_std = Vec::with_capacity(channels);
    for row in x.chunks(t) {
        let mean = row.iter().sum::<f64>() / t as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / t as f64;
        let s = 1.0 / (var + INSTANCE_NORM_EPS).sqrt();
        y.extend(row.iter().map(|v| (v - mean) * s));
        inv_std.push(s);
    }
    (y, inv_std)
}

pub fn instance_norm_backward(grad_out: &[f64], y: &[f64], inv_std: &[f64]) -> Vec<f64> {
    let channels = inv_std.len();
    let t = y.len() / channels;
    let mut gx = Vec::with_capacity(y.len());
    for ((gy, yy), s) in grad_out.chunks(t).zip(y.chunks(t)).zip(inv_std) {
        let mean_g = gy.iter().sum::<f64>() / t as f64;
        let mean_gy = gy.iter().zip(yy).map(|(a, b)| a * b).sum::<f64>() / t as f64;
        gx.extend(gy.iter().zip(yy).map(|(g, v)| s * (g - mean_g - v * mean_gy)));
    }
    gx
}
