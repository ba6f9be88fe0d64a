//! Layer specs and the raw compute kernels behind the tape ops.
//!
//! Convolution goes through explicit patch expansion (im2col) into a matrix
//! product. Accumulation order is row-major sequential per output element, so
//! results are bit-reproducible; rayon only splits work across independent
//! output rows.

use rayon::prelude::*;

use crate::error::{Result, SeidError};

/// Square-kernel convolution description.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub use_bias: bool,
}

impl ConvSpec {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        use_bias: bool,
    ) -> Result<Self> {
        if kernel < 1 || stride < 1 || in_channels < 1 || out_channels < 1 {
            return Err(SeidError::config(format!(
                "invalid conv spec: {in_channels}->{out_channels} k={kernel} s={stride} p={pad}"
            )));
        }
        Ok(ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
            use_bias,
        })
    }

    /// Weight tensor dims: out x in x k x k.
    pub fn weight_dims(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels,
            self.kernel,
            self.kernel,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Average,
    GlobalAverage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolSpec {
    pub kind: PoolKind,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl PoolSpec {
    pub fn max(kernel: usize, stride: usize, pad: usize) -> Self {
        PoolSpec {
            kind: PoolKind::Max,
            kernel,
            stride,
            pad,
        }
    }
    pub fn average(kernel: usize, stride: usize, pad: usize) -> Self {
        PoolSpec {
            kind: PoolKind::Average,
            kernel,
            stride,
            pad,
        }
    }
    /// Always yields 1x1 spatial output; kernel/stride/pad are ignored.
    pub fn global_average() -> Self {
        PoolSpec {
            kind: PoolKind::GlobalAverage,
            kernel: 1,
            stride: 1,
            pad: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Per-channel batch normalization parameters and running statistics.
///
/// gamma/beta are trainable and live in the parameter store; the running
/// statistics here are the only mutable layer state, updated by the trainer.
#[derive(Debug, Clone)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub epsilon: f64,
    pub momentum: f64,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            epsilon: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }
}

/// floor((in + 2*pad - kernel)/stride) + 1
pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = input + 2 * pad;
    if padded < kernel {
        return Err(SeidError::shape(format!(
            "kernel {kernel} larger than padded input {padded}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// C = A(n x k) * B(k x m), rows of C computed independently.
pub fn matmul_nn(a: &[f64], b: &[f64], n: usize, k: usize, m: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), k * m);
    debug_assert_eq!(out.len(), n * m);
    out.par_chunks_mut(m).enumerate().for_each(|(i, row)| {
        row.fill(0.0);
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (r, &bv) in row.iter_mut().zip(brow) {
                *r += av * bv;
            }
        }
    });
}

/// out(k x m) = transpose of a(m x k)
pub fn transpose(a: &[f64], rows: usize, cols: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), rows * cols);
    debug_assert_eq!(out.len(), rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
}

/// Expand one sample (C x H x W) into a (C*k*k) x (oh*ow) patch matrix.
/// Out-of-image positions contribute zero.
pub fn im2col(
    x: &[f64],
    channels: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    col: &mut [f64],
) {
    debug_assert_eq!(col.len(), channels * kernel * kernel * oh * ow);
    let ospatial = oh * ow;
    for c in 0..channels {
        for ki in 0..kernel {
            for kj in 0..kernel {
                let row = (c * kernel + ki) * kernel + kj;
                let dst = &mut col[row * ospatial..(row + 1) * ospatial];
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        dst[oy * ow + ox] = if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w
                        {
                            x[(c * h + iy as usize) * w + ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-accumulate a patch matrix back onto the (C x H x W) image grid.
pub fn col2im(
    col: &[f64],
    channels: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    x_grad: &mut [f64],
) {
    let ospatial = oh * ow;
    for c in 0..channels {
        for ki in 0..kernel {
            for kj in 0..kernel {
                let row = (c * kernel + ki) * kernel + kj;
                let src = &col[row * ospatial..(row + 1) * ospatial];
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix as usize >= w {
                            continue;
                        }
                        x_grad[(c * h + iy as usize) * w + ix as usize] += src[oy * ow + ox];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn out_size_matches_schedule() {
        // stem chain 128 -> 63 -> 31
        assert_eq!(conv_out_size(128, 3, 2, 0).unwrap(), 63);
        assert_eq!(conv_out_size(63, 3, 2, 0).unwrap(), 31);
        assert_eq!(conv_out_size(7, 7, 1, 0).unwrap(), 1);
        // same-pad convs preserve size
        assert_eq!(conv_out_size(128, 3, 1, 1).unwrap(), 128);
        assert_eq!(conv_out_size(31, 1, 1, 0).unwrap(), 31);
    }

    #[test]
    fn out_size_rejects_oversized_kernel() {
        assert!(conv_out_size(2, 5, 1, 1).is_err());
    }

    #[test]
    fn matmul_identity() {
        let a = vec![1.0, 0.0, 0.0, 1.0];
        let b = vec![1.0, 2.0, 3.0, 4.0];
        let mut out = vec![0.0; 4];
        matmul_nn(&a, &b, 2, 2, 2, &mut out);
        assert_eq!(out, b);
    }

    #[test]
    fn matmul_row_times_col() {
        let a = vec![1.0, 2.0];
        let b = vec![3.0, 4.0];
        let mut out = vec![0.0; 1];
        matmul_nn(&a, &b, 1, 2, 1, &mut out);
        assert_eq!(out, vec![11.0]);
    }

    #[test]
    fn im2col_col2im_round_trip_counts() {
        // stride 1, pad 1, 3x3 kernel: col2im of all-ones counts window overlaps
        let (c, h, w) = (1, 3, 3);
        let oh = conv_out_size(h, 3, 1, 1).unwrap();
        let ow = conv_out_size(w, 3, 1, 1).unwrap();
        let col = vec![1.0; c * 9 * oh * ow];
        let mut grad = vec![0.0; c * h * w];
        col2im(&col, c, h, w, 3, 1, 1, oh, ow, &mut grad);
        // center pixel is seen by all 9 windows
        assert_eq!(grad[4], 9.0);
        // corner pixel by 4 windows
        assert_eq!(grad[0], 4.0);
    }
}
