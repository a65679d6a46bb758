//! Dense kernels behind the tape operations.
//!
//! Matrix products go through `matrixmultiply`; convolutions are lowered to a
//! single product per call using a channel-major column layout
//! `[C·k, B·L]`. Parallel splits always partition output rows into fixed-size
//! blocks so every output element is produced by one code path.

use crate::par;

const GEMM_BLOCK_ROWS: usize = 32;
const GEMM_PAR_MIN_WORK: usize = 1 << 18;

/// Storage orientation of a gemm operand.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// Stored as written: `rows × cols`, row-major.
    Normal,
    /// Stored transposed: the operand `rows × cols` is read from a `cols × rows` buffer.
    Transposed,
}

/// `c[m×n] = a[m×k] · b[k×n] (+ c if accumulate)`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_layout: Layout,
    b: &[f64],
    b_layout: Layout,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let (rsa, csa) = match a_layout {
        Layout::Normal => (k as isize, 1),
        Layout::Transposed => (1, m as isize),
    };
    let (rsb, csb) = match b_layout {
        Layout::Normal => (n as isize, 1),
        Layout::Transposed => (1, k as isize),
    };
    let beta = if accumulate { 1.0 } else { 0.0 };
    let run = |row0: usize, rows: usize, c_block: &mut [f64]| {
        let a_off = match a_layout {
            Layout::Normal => row0 * k,
            Layout::Transposed => row0,
        };
        // SAFETY: the strides above address only `a[..m*k]`, `b[..k*n]` and
        // the `rows × n` block of `c`, all checked by the assertion.
        unsafe {
            matrixmultiply::dgemm(
                rows,
                k,
                n,
                1.0,
                a.as_ptr().add(a_off),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c_block.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    };
    let c = &mut c[..m * n];
    if m * n * k < GEMM_PAR_MIN_WORK || m <= GEMM_BLOCK_ROWS {
        run(0, m, c);
        return;
    }
    par::for_each_chunk(c, GEMM_BLOCK_ROWS * n, |i, block| {
        run(i * GEMM_BLOCK_ROWS, block.len() / n, block)
    });
}

/// Converts `[B, C, L]` to `[C, B, L]`.
pub fn batch_to_channel_major(x: &[f64], batch: usize, channels: usize, len: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    par::for_each_chunk(&mut out, batch * len, |c, dst| {
        for b in 0..batch {
            let src = &x[(b * channels + c) * len..][..len];
            dst[b * len..][..len].copy_from_slice(src);
        }
    });
    out
}

/// Converts `[C, B, L]` back to `[B, C, L]`.
pub fn channel_to_batch_major(x: &[f64], batch: usize, channels: usize, len: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    par::for_each_chunk(&mut out, channels * len, |b, dst| {
        for c in 0..channels {
            let src = &x[(c * batch + b) * len..][..len];
            dst[c * len..][..len].copy_from_slice(src);
        }
    });
    out
}

/// Geometry of a strided 1-D convolution over a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub len: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_len(&self) -> usize {
        (self.len + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn transposed_out_len(&self) -> usize {
        (self.len - 1) * self.stride + self.kernel
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Column matrix `[C_in·k, B·L_out]` for a cross-correlation.
fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let lout = g.out_len();
    let width = g.batch * lout;
    let mut cols = vec![0.0; g.in_channels * g.kernel * width];
    par::for_each_chunk(&mut cols, width, |row, dst| {
        let (c, t) = (row / g.kernel, row % g.kernel);
        for b in 0..g.batch {
            let src = &x[(b * g.in_channels + c) * g.len..][..g.len];
            let dst = &mut dst[b * lout..][..lout];
            for (l, d) in dst.iter_mut().enumerate() {
                let pos = (l * g.stride + t) as isize - g.padding as isize;
                if pos >= 0 && (pos as usize) < g.len {
                    *d = src[pos as usize];
                }
            }
        }
    });
    cols
}

/// Scatter-adds a column matrix back onto `[B, C_in, L]`.
fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let lout = g.out_len();
    let width = g.batch * lout;
    let mut dx = vec![0.0; g.batch * g.in_channels * g.len];
    par::for_each_chunk(&mut dx, g.in_channels * g.len, |b, dst| {
        for c in 0..g.in_channels {
            let dst = &mut dst[c * g.len..][..g.len];
            for t in 0..g.kernel {
                let src = &cols[(c * g.kernel + t) * width + b * lout..][..lout];
                for (l, &v) in src.iter().enumerate() {
                    let pos = (l * g.stride + t) as isize - g.padding as isize;
                    if pos >= 0 && (pos as usize) < g.len {
                        dst[pos as usize] += v;
                    }
                }
            }
        }
    });
    dx
}

/// Cross-correlation forward. `w` is `[C_out, C_in, k]`; returns `[B, C_out, L_out]`.
pub fn conv1d_forward(x: &[f64], w: &[f64], bias: &[f64], g: &ConvGeom) -> Vec<f64> {
    let lout = g.out_len();
    let width = g.batch * lout;
    let owned;
    let cols: &[f64] = if g.is_pointwise() {
        owned = batch_to_channel_major(x, g.batch, g.in_channels, g.len);
        &owned
    } else {
        owned = im2col(x, g);
        &owned
    };
    let mut out_cm = vec![0.0; g.out_channels * width];
    gemm(
        g.out_channels,
        g.in_channels * g.kernel,
        width,
        w,
        Layout::Normal,
        cols,
        Layout::Normal,
        &mut out_cm,
        false,
    );
    par::for_each_chunk(&mut out_cm, width, |c, row| {
        row.iter_mut().for_each(|v| *v += bias[c]);
    });
    channel_to_batch_major(&out_cm, g.batch, g.out_channels, lout)
}

/// Gradients of [`conv1d_forward`] with respect to input, weights and bias.
pub fn conv1d_backward(
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    g: &ConvGeom,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let lout = g.out_len();
    let width = g.batch * lout;
    let ck = g.in_channels * g.kernel;
    let dout_cm = batch_to_channel_major(dout, g.batch, g.out_channels, lout);
    let cols = if g.is_pointwise() {
        batch_to_channel_major(x, g.batch, g.in_channels, g.len)
    } else {
        im2col(x, g)
    };
    let mut dw = vec![0.0; g.out_channels * ck];
    gemm(
        g.out_channels,
        width,
        ck,
        &dout_cm,
        Layout::Normal,
        &cols,
        Layout::Transposed,
        &mut dw,
        false,
    );
    let db: Vec<f64> = dout_cm
        .chunks(width)
        .map(|row| row.iter().sum::<f64>())
        .collect();
    let mut dcols = vec![0.0; ck * width];
    gemm(
        ck,
        g.out_channels,
        width,
        w,
        Layout::Transposed,
        &dout_cm,
        Layout::Normal,
        &mut dcols,
        false,
    );
    let dx = if g.is_pointwise() {
        channel_to_batch_major(&dcols, g.batch, g.in_channels, g.len)
    } else {
        col2im(&dcols, g)
    };
    (dx, dw, db)
}

/// Transposed convolution forward (no padding). `w` is `[C_in, C_out, k]`;
/// returns `[B, C_out, (L-1)·stride + k]`.
pub fn conv_transpose1d_forward(x: &[f64], w: &[f64], bias: &[f64], g: &ConvGeom) -> Vec<f64> {
    let lout = g.transposed_out_len();
    let width = g.batch * g.len;
    let ok = g.out_channels * g.kernel;
    let x_cm = batch_to_channel_major(x, g.batch, g.in_channels, g.len);
    let mut cols = vec![0.0; ok * width];
    gemm(
        ok,
        g.in_channels,
        width,
        w,
        Layout::Transposed,
        &x_cm,
        Layout::Normal,
        &mut cols,
        false,
    );
    let mut out = vec![0.0; g.batch * g.out_channels * lout];
    par::for_each_chunk(&mut out, g.out_channels * lout, |b, dst| {
        for c in 0..g.out_channels {
            let dst = &mut dst[c * lout..][..lout];
            dst.iter_mut().for_each(|v| *v = bias[c]);
            for t in 0..g.kernel {
                let src = &cols[(c * g.kernel + t) * width + b * g.len..][..g.len];
                for (l, &v) in src.iter().enumerate() {
                    dst[l * g.stride + t] += v;
                }
            }
        }
    });
    out
}

/// Gradients of [`conv_transpose1d_forward`].
pub fn conv_transpose1d_backward(
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    g: &ConvGeom,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let lout = g.transposed_out_len();
    let width = g.batch * g.len;
    let ok = g.out_channels * g.kernel;
    let mut dcols = vec![0.0; ok * width];
    par::for_each_chunk(&mut dcols, width, |row, dst| {
        let (c, t) = (row / g.kernel, row % g.kernel);
        for b in 0..g.batch {
            let src = &dout[(b * g.out_channels + c) * lout..][..lout];
            for l in 0..g.len {
                dst[b * g.len + l] = src[l * g.stride + t];
            }
        }
    });
    let x_cm = batch_to_channel_major(x, g.batch, g.in_channels, g.len);
    let mut dw = vec![0.0; g.in_channels * ok];
    gemm(
        g.in_channels,
        width,
        ok,
        &x_cm,
        Layout::Normal,
        &dcols,
        Layout::Transposed,
        &mut dw,
        false,
    );
    let mut dx_cm = vec![0.0; g.in_channels * width];
    gemm(
        g.in_channels,
        ok,
        width,
        w,
        Layout::Normal,
        &dcols,
        Layout::Normal,
        &mut dx_cm,
        false,
    );
    let dx = channel_to_batch_major(&dx_cm, g.batch, g.in_channels, g.len);
    let mut db = vec![0.0; g.out_channels];
    for b in 0..g.batch {
        for (c, acc) in db.iter_mut().enumerate() {
            *acc += dout[(b * g.out_channels + c) * lout..][..lout]
                .iter()
                .sum::<f64>();
        }
    }
    (dx, dw, db)
}
