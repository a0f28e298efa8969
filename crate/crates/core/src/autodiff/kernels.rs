//! Forward and backward kernels for the convolution and normalization ops.
//!
//! Work is split over the batch dimension. Per-item partial gradients are
//! reduced serially in batch order so results never depend on thread count.

use rayon::prelude::*;

use super::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub len: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_len: usize,
}

impl ConvGeometry {
    fn patch(&self) -> usize {
        self.in_channels * self.kernel
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeometry, cols: &mut [T]) {
    let lout = g.out_len;
    for c in 0..g.in_channels {
        let row_in = &x[c * g.len..(c + 1) * g.len];
        for j in 0..g.kernel {
            let dst = &mut cols[(c * g.kernel + j) * lout..(c * g.kernel + j + 1) * lout];
            for (t, d) in dst.iter_mut().enumerate() {
                let pos = (t * g.stride + j) as isize - g.padding as isize;
                *d = if pos >= 0 && (pos as usize) < g.len {
                    row_in[pos as usize]
                } else {
                    T::ZERO
                };
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeometry, dx: &mut [T]) {
    let lout = g.out_len;
    for c in 0..g.in_channels {
        let row = &mut dx[c * g.len..(c + 1) * g.len];
        for j in 0..g.kernel {
            let src = &cols[(c * g.kernel + j) * lout..(c * g.kernel + j + 1) * lout];
            for (t, &s) in src.iter().enumerate() {
                let pos = (t * g.stride + j) as isize - g.padding as isize;
                if pos >= 0 && (pos as usize) < g.len {
                    row[pos as usize] += s;
                }
            }
        }
    }
}

pub(crate) fn conv1d_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    g: &ConvGeometry,
) -> Vec<T> {
    let item_out = g.out_channels * g.out_len;
    let mut out = vec![T::ZERO; g.batch * item_out];
    out.par_chunks_mut(item_out)
        .enumerate()
        .for_each(|(b, out_b)| {
            let x_b = &x[b * g.in_channels * g.len..(b + 1) * g.in_channels * g.len];
            let mut cols = vec![T::ZERO; g.patch() * g.out_len];
            im2col(x_b, g, &mut cols);
            T::gemm(
                g.out_channels,
                g.patch(),
                g.out_len,
                w,
                (g.patch() as isize, 1),
                &cols,
                (g.out_len as isize, 1),
                T::ZERO,
                out_b,
            );
            if let Some(bias) = bias {
                for (o, row) in out_b.chunks_mut(g.out_len).enumerate() {
                    row.iter_mut().for_each(|v| *v += bias[o]);
                }
            }
        });
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Vec<T>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

pub(crate) fn conv1d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    grad_out: &[T],
    g: &ConvGeometry,
    need_input: bool,
) -> ConvGrads<T> {
    let item_in = g.in_channels * g.len;
    let item_out = g.out_channels * g.out_len;
    let partials: Vec<(Vec<T>, Vec<T>, Vec<T>)> = (0..g.batch)
        .into_par_iter()
        .map(|b| {
            let x_b = &x[b * item_in..(b + 1) * item_in];
            let dy = &grad_out[b * item_out..(b + 1) * item_out];
            let mut cols = vec![T::ZERO; g.patch() * g.out_len];
            im2col(x_b, g, &mut cols);
            let mut dw = vec![T::ZERO; g.out_channels * g.patch()];
            T::gemm(
                g.out_channels,
                g.out_len,
                g.patch(),
                dy,
                (g.out_len as isize, 1),
                &cols,
                (1, g.out_len as isize),
                T::ZERO,
                &mut dw,
            );
            let db = dy
                .chunks(g.out_len)
                .map(|row| T::from_f64(row.iter().map(|v| v.to_f64()).sum()))
                .collect();
            let mut dx = Vec::new();
            if need_input {
                T::gemm(
                    g.patch(),
                    g.out_channels,
                    g.out_len,
                    w,
                    (1, g.patch() as isize),
                    dy,
                    (g.out_len as isize, 1),
                    T::ZERO,
                    &mut cols,
                );
                dx = vec![T::ZERO; item_in];
                col2im(&cols, g, &mut dx);
            }
            (dx, dw, db)
        })
        .collect();

    let mut grads = ConvGrads {
        input: Vec::with_capacity(if need_input { g.batch * item_in } else { 0 }),
        weight: vec![T::ZERO; g.out_channels * g.patch()],
        bias: vec![T::ZERO; g.out_channels],
    };
    for (dx, dw, db) in partials {
        grads.input.extend_from_slice(&dx);
        grads.weight.iter_mut().zip(&dw).for_each(|(a, &b)| *a += b);
        grads.bias.iter_mut().zip(&db).for_each(|(a, &b)| *a += b);
    }
    grads
}

/// Per-channel statistics of a `[B, C, L]` activation, accumulated in f64.
pub(crate) fn channel_moments<T: Scalar>(x: &[T], shape: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let (b, c, l) = (shape[0], shape[1], shape[2]);
    let m = (b * l) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for bi in 0..b {
            s += x[(bi * c + ch) * l..(bi * c + ch + 1) * l]
                .iter()
                .map(|v| v.to_f64())
                .sum::<f64>();
        }
        let mu = s / m;
        let mut ss = 0.0;
        for bi in 0..b {
            ss += x[(bi * c + ch) * l..(bi * c + ch + 1) * l]
                .iter()
                .map(|v| (v.to_f64() - mu).powi(2))
                .sum::<f64>();
        }
        mean[ch] = mu;
        var[ch] = ss / m;
    }
    (mean, var)
}
