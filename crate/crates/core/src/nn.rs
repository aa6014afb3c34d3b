//! Dense kernels with hand-written backward passes. Feature maps are stored
//! channel-major (`[channel][row][col]`) in flat slices.

pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MapShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl MapShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        MapShape {
            channels,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }
}

/// Valid output range `[lo, hi)` along one axis for kernel offset `k` with
/// padding `pad` under stride-1 "same" convolution.
#[inline]
fn valid_range(len: usize, k: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k);
    let hi = (len + pad).saturating_sub(k).min(len);
    (lo, hi.max(lo))
}

/// Stride-1 convolution with symmetric zero padding `kernel / 2`, so the
/// output keeps the input's spatial size. `weight` is `[out][in][k][k]`.
pub fn conv2d_forward(
    input: &[f64],
    shape: MapShape,
    weight: &[f64],
    bias: &[f64],
    out_channels: usize,
    kernel: usize,
) -> Vec<f64> {
    let pad = kernel / 2;
    let (h, w) = (shape.height, shape.width);
    let plane = shape.plane();
    let mut out = vec![0.0; out_channels * plane];
    for co in 0..out_channels {
        let o = &mut out[co * plane..(co + 1) * plane];
        o.iter_mut().for_each(|v| *v = bias[co]);
        for ci in 0..shape.channels {
            let x = &input[ci * plane..(ci + 1) * plane];
            for ky in 0..kernel {
                let (y0, y1) = valid_range(h, ky, pad);
                for kx in 0..kernel {
                    let wv = weight[((co * shape.channels + ci) * kernel + ky) * kernel + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (x0, x1) = valid_range(w, kx, pad);
                    for y in y0..y1 {
                        let sy = y + ky - pad;
                        let orow = &mut o[y * w + x0..y * w + x1];
                        let xrow = &x[sy * w + x0 + kx - pad..sy * w + x1 + kx - pad];
                        for (ov, xv) in orow.iter_mut().zip(xrow) {
                            *ov += wv * xv;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates weight and bias gradients and returns the input gradient.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    input: &[f64],
    shape: MapShape,
    weight: &[f64],
    out_channels: usize,
    kernel: usize,
    grad_out: &[f64],
    grad_weight: &mut [f64],
    grad_bias: &mut [f64],
    need_input_grad: bool,
) -> Vec<f64> {
    let pad = kernel / 2;
    let (h, w) = (shape.height, shape.width);
    let plane = shape.plane();
    let mut grad_in = if need_input_grad {
        vec![0.0; shape.len()]
    } else {
        Vec::new()
    };
    for co in 0..out_channels {
        let go = &grad_out[co * plane..(co + 1) * plane];
        grad_bias[co] += go.iter().sum::<f64>();
        for ci in 0..shape.channels {
            let x = &input[ci * plane..(ci + 1) * plane];
            for ky in 0..kernel {
                let (y0, y1) = valid_range(h, ky, pad);
                for kx in 0..kernel {
                    let widx = ((co * shape.channels + ci) * kernel + ky) * kernel + kx;
                    let wv = weight[widx];
                    let (x0, x1) = valid_range(w, kx, pad);
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let sy = y + ky - pad;
                        let grow = &go[y * w + x0..y * w + x1];
                        let src = sy * w + x0 + kx - pad;
                        let xrow = &x[src..src + (x1 - x0)];
                        for (g, xv) in grow.iter().zip(xrow) {
                            acc += g * xv;
                        }
                        if need_input_grad {
                            let gi = &mut grad_in[ci * plane + src..ci * plane + src + (x1 - x0)];
                            for (d, g) in gi.iter_mut().zip(grow) {
                                *d += wv * g;
                            }
                        }
                    }
                    grad_weight[widx] += acc;
                }
            }
        }
    }
    grad_in
}

pub fn leaky_relu_inplace(x: &mut [f64]) {
    for v in x.iter_mut() {
        if *v < 0.0 {
            *v *= LEAKY_SLOPE;
        }
    }
}

/// Backward through leaky ReLU given the activation output (sign is preserved).
pub fn leaky_relu_backward_inplace(grad: &mut [f64], activated: &[f64]) {
    for (g, a) in grad.iter_mut().zip(activated) {
        if *a < 0.0 {
            *g *= LEAKY_SLOPE;
        }
    }
}

/// 2x2 max pooling with stride 2; trailing odd rows/columns are dropped.
/// Returns the pooled map and the flat argmax index of each output cell.
pub fn maxpool2_forward(input: &[f64], shape: MapShape) -> (Vec<f64>, Vec<usize>, MapShape) {
    let out_shape = MapShape::new(shape.channels, shape.height / 2, shape.width / 2);
    let mut out = Vec::with_capacity(out_shape.len());
    let mut arg = Vec::with_capacity(out_shape.len());
    let plane = shape.plane();
    for c in 0..shape.channels {
        for y in 0..out_shape.height {
            for x in 0..out_shape.width {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = 0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let i = c * plane + (2 * y + dy) * shape.width + 2 * x + dx;
                        if input[i] > best {
                            best = input[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    (out, arg, out_shape)
}

pub fn maxpool2_backward(grad_out: &[f64], argmax: &[usize], input_len: usize) -> Vec<f64> {
    let mut grad = vec![0.0; input_len];
    for (g, &i) in grad_out.iter().zip(argmax) {
        grad[i] += g;
    }
    grad
}

/// `y = W x + b` with `W` stored `[out][in]`.
pub fn linear_forward(x: &[f64], weight: &[f64], bias: &[f64], out_dim: usize) -> Vec<f64> {
    let in_dim = x.len();
    (0..out_dim)
        .map(|o| {
            let row = &weight[o * in_dim..(o + 1) * in_dim];
            bias[o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
        })
        .collect()
}

/// Accumulates parameter gradients and returns `dL/dx`.
pub fn linear_backward(
    x: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    grad_weight: &mut [f64],
    grad_bias: &mut [f64],
) -> Vec<f64> {
    let in_dim = x.len();
    let mut grad_in = vec![0.0; in_dim];
    for (o, &g) in grad_out.iter().enumerate() {
        grad_bias[o] += g;
        if g == 0.0 {
            continue;
        }
        let row = &weight[o * in_dim..(o + 1) * in_dim];
        let grow = &mut grad_weight[o * in_dim..(o + 1) * in_dim];
        for i in 0..in_dim {
            grow[i] += g * x[i];
            grad_in[i] += g * row[i];
        }
    }
    grad_in
}
