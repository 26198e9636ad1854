//! Batched forward and backward kernels.

use super::layer::LayerSpec;
use super::network::{LossKind, Network};
use crate::gemm::{gemm, MatRef};

/// Activations recorded during a forward pass.
pub(crate) struct Trace {
    pub batch: usize,
    /// `acts[i]` is the batched input of layer `i`; the last entry holds logits.
    pub acts: Vec<Vec<f32>>,
    /// Flat argmax source index per pooled output, for max-pool layers.
    pub pool_argmax: Vec<Vec<u32>>,
}

pub(crate) struct Grads {
    pub input: Option<Vec<f32>>,
    pub layers: Option<Vec<(Vec<f32>, Vec<f32>)>>,
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(spec: &LayerSpec, input: &[usize], output: &[usize]) -> Self {
        let LayerSpec::Conv2d {
            kernel,
            stride,
            padding,
            ..
        } = *spec
        else {
            unreachable!("conv geometry on non-conv layer")
        };
        Self {
            c: input[0],
            h: input[1],
            w: input[2],
            k: kernel,
            stride,
            pad: padding,
            ho: output[1],
            wo: output[2],
        }
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    /// Source pixel for patch row `(ki, kj)` at output `(oh, ow)`, if inside the image.
    #[inline]
    fn source(&self, ki: usize, kj: usize, oh: usize, ow: usize) -> Option<(usize, usize)> {
        let ih = (oh * self.stride + ki).checked_sub(self.pad)?;
        let iw = (ow * self.stride + kj).checked_sub(self.pad)?;
        (ih < self.h && iw < self.w).then_some((ih, iw))
    }

    fn im2col(&self, x: &[f32], cols: &mut [f32]) {
        let n = self.cols();
        for c in 0..self.c {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = &mut cols[((c * self.k + ki) * self.k + kj) * n..][..n];
                    for oh in 0..self.ho {
                        for ow in 0..self.wo {
                            row[oh * self.wo + ow] = match self.source(ki, kj, oh, ow) {
                                Some((ih, iw)) => plane[ih * self.w + iw],
                                None => 0.0,
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im_add(&self, cols: &[f32], dx: &mut [f32]) {
        let n = self.cols();
        for c in 0..self.c {
            let plane = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = &cols[((c * self.k + ki) * self.k + kj) * n..][..n];
                    for oh in 0..self.ho {
                        for ow in 0..self.wo {
                            if let Some((ih, iw)) = self.source(ki, kj, oh, ow) {
                                plane[ih * self.w + iw] += row[oh * self.wo + ow];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn run(net: &Network, xs: &[f32], batch: usize) -> Trace {
    let layers = net.layers();
    let mut acts = Vec::with_capacity(layers.len() + 1);
    let mut pool_argmax = vec![Vec::new(); layers.len()];
    acts.push(xs.to_vec());
    let mut cols = Vec::new();
    for (i, layer) in layers.iter().enumerate() {
        let in_shape = net.shape_at(i);
        let out_shape = net.shape_at(i + 1);
        let in_len: usize = in_shape.iter().product();
        let out_len: usize = out_shape.iter().product();
        let x = acts.last().unwrap();
        let mut y = vec![0.0f32; batch * out_len];
        match layer.spec {
            LayerSpec::Dense { inputs, outputs } => {
                for row in y.chunks_mut(outputs) {
                    row.copy_from_slice(layer.bias.data());
                }
                gemm(
                    1.0,
                    MatRef::row_major(x, batch, inputs),
                    MatRef::row_major(layer.weights.data(), outputs, inputs).t(),
                    1.0,
                    &mut y,
                );
            }
            LayerSpec::Conv2d { out_channels, .. } => {
                let g = ConvGeom::new(&layer.spec, in_shape, out_shape);
                cols.resize(g.rows() * g.cols(), 0.0);
                for s in 0..batch {
                    g.im2col(&x[s * in_len..(s + 1) * in_len], &mut cols);
                    let ys = &mut y[s * out_len..(s + 1) * out_len];
                    for (co, plane) in ys.chunks_mut(g.cols()).enumerate() {
                        plane.fill(layer.bias.data()[co]);
                    }
                    gemm(
                        1.0,
                        MatRef::row_major(layer.weights.data(), out_channels, g.rows()),
                        MatRef::row_major(&cols, g.rows(), g.cols()),
                        1.0,
                        ys,
                    );
                }
            }
            LayerSpec::MaxPool2d { size, stride } => {
                let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
                let (ho, wo) = (out_shape[1], out_shape[2]);
                let mut arg = vec![0u32; batch * out_len];
                for s in 0..batch {
                    for ch in 0..c {
                        let base = s * in_len + ch * h * w;
                        for oh in 0..ho {
                            for ow in 0..wo {
                                let mut best = base + oh * stride * w + ow * stride;
                                for di in 0..size {
                                    for dj in 0..size {
                                        let idx = base + (oh * stride + di) * w + ow * stride + dj;
                                        if x[idx] > x[best] {
                                            best = idx;
                                        }
                                    }
                                }
                                let o = s * out_len + (ch * ho + oh) * wo + ow;
                                y[o] = x[best];
                                arg[o] = best as u32;
                            }
                        }
                    }
                }
                pool_argmax[i] = arg;
            }
            LayerSpec::Relu => {
                for (o, v) in y.iter_mut().zip(x) {
                    *o = v.max(0.0);
                }
            }
            LayerSpec::Flatten => y.copy_from_slice(x),
        }
        acts.push(y);
    }
    Trace {
        batch,
        acts,
        pool_argmax,
    }
}

/// `softmax(z / temperature)` with max subtraction.
pub(crate) fn softmax_into(z: &[f32], temperature: f32, out: &mut [f32]) {
    let max = z.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for (o, v) in out.iter_mut().zip(z) {
        *o = ((v - max) / temperature).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Loss value and class probabilities; writes dLoss/dlogits into `d`.
pub(crate) fn loss_head(
    z: &[f32],
    y: usize,
    loss: LossKind,
    temperature: f32,
    d: &mut [f32],
) -> (f32, Vec<f32>) {
    let mut probs = vec![0.0f32; z.len()];
    softmax_into(z, temperature, &mut probs);
    let value = match loss {
        LossKind::CrossEntropy => {
            let max = z.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let lse: f32 = z
                .iter()
                .map(|v| ((v - max) / temperature).exp())
                .sum::<f32>()
                .ln();
            for (i, (di, p)) in d.iter_mut().zip(&probs).enumerate() {
                let target = if i == y { 1.0 } else { 0.0 };
                *di = (p - target) / temperature;
            }
            lse - (z[y] - max) / temperature
        }
        LossKind::CarliniWagner { kappa } => {
            let (runner_up, best_other) = z.iter().enumerate().filter(|(i, _)| *i != y).fold(
                (usize::MAX, f32::NEG_INFINITY),
                |acc, (i, v)| {
                    if *v > acc.1 {
                        (i, *v)
                    } else {
                        acc
                    }
                },
            );
            let margin = z[y] - best_other;
            d.fill(0.0);
            if margin > -kappa {
                d[y] = 1.0;
                d[runner_up] = -1.0;
                margin
            } else {
                -kappa
            }
        }
    };
    (value, probs)
}

pub(crate) fn backprop(
    net: &Network,
    trace: &Trace,
    d_logits: Vec<f32>,
    want_input: bool,
    want_weights: bool,
) -> Grads {
    let layers = net.layers();
    let batch = trace.batch;
    let mut weight_grads: Vec<(Vec<f32>, Vec<f32>)> = if want_weights {
        layers
            .iter()
            .map(|l| (vec![0.0; l.weights().len()], vec![0.0; l.bias().len()]))
            .collect()
    } else {
        Vec::new()
    };
    let first_trainable = net.trainable_indices()[0];
    let mut delta = d_logits;
    let mut cols = Vec::new();
    let mut dcols = Vec::new();
    for i in (0..layers.len()).rev() {
        let layer = &layers[i];
        let x = &trace.acts[i];
        let in_shape = net.shape_at(i);
        let out_shape = net.shape_at(i + 1);
        let in_len: usize = in_shape.iter().product();
        let out_len: usize = out_shape.iter().product();
        let need_dx = want_input || i > first_trainable;
        if !need_dx && !(want_weights && layer.is_trainable()) {
            break;
        }
        let mut dx = if need_dx {
            vec![0.0f32; batch * in_len]
        } else {
            Vec::new()
        };
        match layer.spec {
            LayerSpec::Dense { inputs, outputs } => {
                if want_weights {
                    let (dw, db) = &mut weight_grads[i];
                    gemm(
                        1.0,
                        MatRef::row_major(&delta, batch, outputs).t(),
                        MatRef::row_major(x, batch, inputs),
                        0.0,
                        dw,
                    );
                    for row in delta.chunks(outputs) {
                        for (b, d) in db.iter_mut().zip(row) {
                            *b += d;
                        }
                    }
                }
                if need_dx {
                    gemm(
                        1.0,
                        MatRef::row_major(&delta, batch, outputs),
                        MatRef::row_major(layer.weights().data(), outputs, inputs),
                        0.0,
                        &mut dx,
                    );
                }
            }
            LayerSpec::Conv2d { out_channels, .. } => {
                let g = ConvGeom::new(&layer.spec, in_shape, out_shape);
                let (rows, ncols) = (g.rows(), g.cols());
                cols.resize(rows * ncols, 0.0);
                dcols.resize(rows * ncols, 0.0);
                for s in 0..batch {
                    let dy = &delta[s * out_len..(s + 1) * out_len];
                    if want_weights {
                        g.im2col(&x[s * in_len..(s + 1) * in_len], &mut cols);
                        let (dw, db) = &mut weight_grads[i];
                        gemm(
                            1.0,
                            MatRef::row_major(dy, out_channels, ncols),
                            MatRef::row_major(&cols, rows, ncols).t(),
                            1.0,
                            dw,
                        );
                        for (b, plane) in db.iter_mut().zip(dy.chunks(ncols)) {
                            *b += plane.iter().sum::<f32>();
                        }
                    }
                    if need_dx {
                        gemm(
                            1.0,
                            MatRef::row_major(layer.weights().data(), out_channels, rows).t(),
                            MatRef::row_major(dy, out_channels, ncols),
                            0.0,
                            &mut dcols,
                        );
                        g.col2im_add(&dcols, &mut dx[s * in_len..(s + 1) * in_len]);
                    }
                }
            }
            LayerSpec::MaxPool2d { .. } => {
                for (src, d) in trace.pool_argmax[i].iter().zip(&delta) {
                    dx[*src as usize] += d;
                }
            }
            LayerSpec::Relu => {
                for ((o, d), v) in dx.iter_mut().zip(&delta).zip(x) {
                    *o = if *v > 0.0 { *d } else { 0.0 };
                }
            }
            LayerSpec::Flatten => dx.copy_from_slice(&delta),
        }
        delta = dx;
    }
    Grads {
        input: want_input.then_some(delta),
        layers: want_weights.then_some(weight_grads),
    }
}
