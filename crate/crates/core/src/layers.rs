//! Layers with hand-written backward passes.

use std::cell::Cell;

use rand::Rng;

use crate::params::Parameterized;
use crate::tensor::{matmul, matmul_a_bt, matmul_at_b_acc, sigmoid, Nhwc, Tensor};

/// Uniform He-style fan-in initialization.
pub fn he_uniform<R: Rng>(rng: &mut R, data: &mut [f64], fan_in: usize, gain: f64) {
    let bound = gain * (6.0 / fan_in.max(1) as f64).sqrt();
    for v in data.iter_mut() {
        *v = rng.gen_range(-bound..bound);
    }
}

/// Stride-1 "same" convolution with optional row mask.
///
/// Kernel taps in rows at or beyond `live_rows` are structurally zero: they are skipped
/// in every pass and zeroed again by [`Parameterized::constrain`]. With
/// `live_rows = kh / 2 + 1` only rows at or above the center contribute.
#[derive(Clone, Debug)]
pub struct Conv2d {
    /// Layout `[kh, kw, cin, cout]`.
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub kh: usize,
    pub kw: usize,
    pub cin: usize,
    pub cout: usize,
    pub live_rows: usize,
}

/// Cached im2col matrix for the backward pass.
#[derive(Clone, Debug)]
pub struct ConvTape {
    cols: Vec<f64>,
    n: usize,
    h: usize,
    w: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        name: &str,
        kh: usize,
        kw: usize,
        cin: usize,
        cout: usize,
        masked: bool,
        with_bias: bool,
        rng: &mut R,
    ) -> Self {
        let live_rows = if masked { kh / 2 + 1 } else { kh };
        let mut weight = Tensor::zeros(format!("{name}.weight"), &[kh, kw, cin, cout]);
        let live = live_rows * kw * cin * cout;
        he_uniform(rng, &mut weight.data[..live], live_rows * kw * cin, 1.0);
        let bias = with_bias.then(|| Tensor::zeros(format!("{name}.bias"), &[cout]));
        Self {
            weight,
            bias,
            kh,
            kw,
            cin,
            cout,
            live_rows,
        }
    }

    fn live_k(&self) -> usize {
        self.live_rows * self.kw * self.cin
    }

    fn live_weight(&self) -> &[f64] {
        &self.weight.data[..self.live_k() * self.cout]
    }

    fn im2col(&self, x: &Nhwc) -> Vec<f64> {
        assert_eq!(x.c, self.cin, "conv input channel mismatch");
        let k = self.live_k();
        let rows = x.n * x.h * x.w;
        let (ph, pw) = ((self.kh / 2) as isize, (self.kw / 2) as isize);
        let mut cols = vec![0.0; rows * k];
        for n in 0..x.n {
            for y in 0..x.h {
                for xx in 0..x.w {
                    let r = (n * x.h + y) * x.w + xx;
                    let dst = &mut cols[r * k..(r + 1) * k];
                    for ky in 0..self.live_rows {
                        let iy = y as isize + ky as isize - ph;
                        if iy < 0 || iy >= x.h as isize {
                            continue;
                        }
                        for kx in 0..self.kw {
                            let ix = xx as isize + kx as isize - pw;
                            if ix < 0 || ix >= x.w as isize {
                                continue;
                            }
                            let off = (ky * self.kw + kx) * self.cin;
                            dst[off..off + self.cin]
                                .copy_from_slice(x.pixel(n, iy as usize, ix as usize));
                        }
                    }
                }
            }
        }
        cols
    }

    pub fn forward(&self, x: &Nhwc) -> (Nhwc, ConvTape) {
        let cols = self.im2col(x);
        let rows = x.n * x.h * x.w;
        let mut out = Nhwc::zeros(x.n, x.h, x.w, self.cout);
        matmul(&cols, self.live_weight(), &mut out.data, rows, self.live_k(), self.cout);
        if let Some(b) = &self.bias {
            for px in out.data.chunks_mut(self.cout) {
                for (o, bv) in px.iter_mut().zip(&b.data) {
                    *o += bv;
                }
            }
        }
        let tape = ConvTape {
            cols,
            n: x.n,
            h: x.h,
            w: x.w,
        };
        (out, tape)
    }

    /// Accumulates parameter gradients into `grads`; returns the input gradient when asked.
    pub fn backward(
        &self,
        tape: &ConvTape,
        dout: &Nhwc,
        grads: &mut Conv2d,
        need_input: bool,
    ) -> Option<Nhwc> {
        let rows = tape.n * tape.h * tape.w;
        let k = self.live_k();
        matmul_at_b_acc(
            &tape.cols,
            &dout.data,
            &mut grads.weight.data[..k * self.cout],
            rows,
            k,
            self.cout,
        );
        if let Some(gb) = grads.bias.as_mut() {
            for px in dout.data.chunks(self.cout) {
                for (g, d) in gb.data.iter_mut().zip(px) {
                    *g += d;
                }
            }
        }
        if !need_input {
            return None;
        }
        let mut dcols = vec![0.0; rows * k];
        matmul_a_bt(&dout.data, self.live_weight(), &mut dcols, rows, self.cout, k);
        let mut dx = Nhwc::zeros(tape.n, tape.h, tape.w, self.cin);
        let (ph, pw) = ((self.kh / 2) as isize, (self.kw / 2) as isize);
        for n in 0..tape.n {
            for y in 0..tape.h {
                for xx in 0..tape.w {
                    let r = (n * tape.h + y) * tape.w + xx;
                    let src = &dcols[r * k..(r + 1) * k];
                    for ky in 0..self.live_rows {
                        let iy = y as isize + ky as isize - ph;
                        if iy < 0 || iy >= tape.h as isize {
                            continue;
                        }
                        for kx in 0..self.kw {
                            let ix = xx as isize + kx as isize - pw;
                            if ix < 0 || ix >= tape.w as isize {
                                continue;
                            }
                            let off = (ky * self.kw + kx) * self.cin;
                            let dst = dx.pixel_mut(n, iy as usize, ix as usize);
                            for (d, s) in dst.iter_mut().zip(&src[off..off + self.cin]) {
                                *d += s;
                            }
                        }
                    }
                }
            }
        }
        Some(dx)
    }

    /// True when every masked tap is exactly zero.
    pub fn mask_holds(&self) -> bool {
        self.weight.data[self.live_k() * self.cout..]
            .iter()
            .all(|v| *v == 0.0)
    }
}

impl Parameterized for Conv2d {
    fn params(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.weight];
        if let Some(b) = &self.bias {
            v.push(b);
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.weight];
        if let Some(b) = self.bias.as_mut() {
            v.push(b);
        }
        v
    }

    fn constrain(&mut self) {
        let live = self.live_k() * self.cout;
        self.weight.data[live..].fill(0.0);
    }

    fn param_count(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, |b| b.len())
    }
}

/// Affine map `y = W x + b` with `W` stored `[out, in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new<R: Rng>(name: &str, in_dim: usize, out_dim: usize, gain: f64, rng: &mut R) -> Self {
        let mut weight = Tensor::zeros(format!("{name}.weight"), &[out_dim, in_dim]);
        he_uniform(rng, &mut weight.data, in_dim, gain);
        Self {
            weight,
            bias: Tensor::zeros(format!("{name}.bias"), &[out_dim]),
        }
    }

    pub fn zeros(name: &str, in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: Tensor::zeros(format!("{name}.weight"), &[out_dim, in_dim]),
            bias: Tensor::zeros(format!("{name}.bias"), &[out_dim]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape[0]
    }

    /// Rows of `x` are inputs; returns `m × out`.
    pub fn forward_batch(&self, x: &[f64], m: usize) -> Vec<f64> {
        let (i, o) = (self.in_dim(), self.out_dim());
        assert_eq!(x.len(), m * i, "linear input width mismatch");
        let mut y = vec![0.0; m * o];
        matmul_a_bt(x, &self.weight.data, &mut y, m, i, o);
        for row in y.chunks_mut(o) {
            for (v, b) in row.iter_mut().zip(&self.bias.data) {
                *v += b;
            }
        }
        y
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.forward_batch(x, 1)
    }

    pub fn backward_batch(&self, x: &[f64], dy: &[f64], m: usize, grads: &mut Linear) -> Vec<f64> {
        let (i, o) = (self.in_dim(), self.out_dim());
        matmul_at_b_acc(dy, x, &mut grads.weight.data, m, o, i);
        for row in dy.chunks(o) {
            for (g, d) in grads.bias.data.iter_mut().zip(row) {
                *g += d;
            }
        }
        let mut dx = vec![0.0; m * i];
        matmul(dy, &self.weight.data, &mut dx, m, o, i);
        dx
    }
}

impl Parameterized for Linear {
    fn params(&self) -> Vec<&Tensor> {
        vec![&self.weight, &self.bias]
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Which statistics a normalization layer uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Statistics of the current batch; used while training.
    Batch,
    /// Frozen running averages.
    Running,
}

/// Batch normalization whose statistics are kept separately for every grid row.
///
/// Means and variances are taken per (row, channel) over the batch and the columns,
/// never across rows, so the layer cannot leak information between rows.
#[derive(Clone, Debug)]
pub struct RowBatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Clone, Debug)]
pub struct NormTape {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    mode: NormMode,
    batch_mean: Vec<f64>,
    batch_var: Vec<f64>,
    count: usize,
}

impl RowBatchNorm {
    pub fn new(name: &str, rows: usize, channels: usize) -> Self {
        Self {
            gamma: Tensor::filled(format!("{name}.gamma"), &[channels], 1.0),
            beta: Tensor::zeros(format!("{name}.beta"), &[channels]),
            running_mean: Tensor::zeros(format!("{name}.running_mean"), &[rows, channels]),
            running_var: Tensor::filled(format!("{name}.running_var"), &[rows, channels], 1.0),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn rows(&self) -> usize {
        self.running_mean.shape[0]
    }

    pub fn forward(&self, x: &Nhwc, mode: NormMode) -> (Nhwc, NormTape) {
        let c = x.c;
        assert_eq!(c, self.gamma.len(), "norm channel mismatch");
        assert_eq!(x.h, self.rows(), "norm row count mismatch");
        let groups = x.h * c;
        let count = x.n * x.w;
        let (mean, var) = match mode {
            NormMode::Batch => {
                let mut mean = vec![0.0; groups];
                let mut var = vec![0.0; groups];
                for n in 0..x.n {
                    for y in 0..x.h {
                        for xx in 0..x.w {
                            let px = x.pixel(n, y, xx);
                            for (m, v) in mean[y * c..(y + 1) * c].iter_mut().zip(px) {
                                *m += v;
                            }
                        }
                    }
                }
                for m in mean.iter_mut() {
                    *m /= count as f64;
                }
                for n in 0..x.n {
                    for y in 0..x.h {
                        for xx in 0..x.w {
                            let px = x.pixel(n, y, xx);
                            for ch in 0..c {
                                let d = px[ch] - mean[y * c + ch];
                                var[y * c + ch] += d * d;
                            }
                        }
                    }
                }
                for v in var.iter_mut() {
                    *v /= count as f64;
                }
                (mean, var)
            }
            NormMode::Running => (self.running_mean.data.clone(), self.running_var.data.clone()),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut xhat = vec![0.0; x.data.len()];
        let mut out = Nhwc::zeros(x.n, x.h, x.w, c);
        for n in 0..x.n {
            for y in 0..x.h {
                for xx in 0..x.w {
                    let o = x.offset(n, y, xx);
                    for ch in 0..c {
                        let g = y * c + ch;
                        let xh = (x.data[o + ch] - mean[g]) * inv_std[g];
                        xhat[o + ch] = xh;
                        out.data[o + ch] = self.gamma.data[ch] * xh + self.beta.data[ch];
                    }
                }
            }
        }
        let tape = NormTape {
            xhat,
            inv_std,
            mode,
            batch_mean: mean,
            batch_var: var,
            count,
        };
        (out, tape)
    }

    pub fn backward(&self, tape: &NormTape, dy: &Nhwc, grads: &mut RowBatchNorm) -> Nhwc {
        let c = dy.c;
        let groups = dy.h * c;
        let mut dx = Nhwc::zeros(dy.n, dy.h, dy.w, c);
        let mut sum_dxh = vec![0.0; groups];
        let mut sum_dxh_xh = vec![0.0; groups];
        for n in 0..dy.n {
            for y in 0..dy.h {
                for xx in 0..dy.w {
                    let o = dy.offset(n, y, xx);
                    for ch in 0..c {
                        let d = dy.data[o + ch];
                        let xh = tape.xhat[o + ch];
                        grads.gamma.data[ch] += d * xh;
                        grads.beta.data[ch] += d;
                        let dxh = d * self.gamma.data[ch];
                        sum_dxh[y * c + ch] += dxh;
                        sum_dxh_xh[y * c + ch] += dxh * xh;
                    }
                }
            }
        }
        let cnt = tape.count as f64;
        for n in 0..dy.n {
            for y in 0..dy.h {
                for xx in 0..dy.w {
                    let o = dy.offset(n, y, xx);
                    for ch in 0..c {
                        let g = y * c + ch;
                        let dxh = dy.data[o + ch] * self.gamma.data[ch];
                        dx.data[o + ch] = match tape.mode {
                            NormMode::Running => dxh * tape.inv_std[g],
                            NormMode::Batch => {
                                tape.inv_std[g]
                                    * (dxh
                                        - sum_dxh[g] / cnt
                                        - tape.xhat[o + ch] * sum_dxh_xh[g] / cnt)
                            }
                        };
                    }
                }
            }
        }
        dx
    }

    /// Fold the batch statistics recorded in `tape` into the running averages.
    pub fn update_running(&mut self, tape: &NormTape) {
        if tape.mode != NormMode::Batch {
            return;
        }
        let m = self.momentum;
        let unbias = if tape.count > 1 {
            tape.count as f64 / (tape.count as f64 - 1.0)
        } else {
            1.0
        };
        for (r, b) in self.running_mean.data.iter_mut().zip(&tape.batch_mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in self.running_var.data.iter_mut().zip(&tape.batch_var) {
            *r = (1.0 - m) * *r + m * b * unbias;
        }
    }
}

impl Parameterized for RowBatchNorm {
    fn params(&self) -> Vec<&Tensor> {
        vec![&self.gamma, &self.beta]
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.gamma, &mut self.beta]
    }
    fn buffers(&self) -> Vec<&Tensor> {
        vec![&self.running_mean, &self.running_var]
    }
    fn buffers_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.running_mean, &mut self.running_var]
    }
}

thread_local! {
    static RELU_MARGIN: Cell<Option<f64>> = const { Cell::new(None) };
}

/// Run `f` and report the smallest `|input|` any `relu` on this thread saw meanwhile.
pub fn relu_margin<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let outer = RELU_MARGIN.with(|m| m.replace(Some(f64::INFINITY)));
    let out = f();
    let seen = RELU_MARGIN.with(|m| m.replace(outer)).unwrap_or(f64::INFINITY);
    if let Some(o) = outer {
        RELU_MARGIN.with(|m| m.set(Some(o.min(seen))));
    }
    (out, seen)
}

pub fn relu(x: &Nhwc) -> Nhwc {
    RELU_MARGIN.with(|m| {
        if let Some(cur) = m.get() {
            m.set(Some(x.data.iter().fold(cur, |a, v| a.min(v.abs()))));
        }
    });
    let data = x.data.iter().map(|&v| if v < 0.0 { 0.0 } else { v }).collect();
    Nhwc::from_vec(x.n, x.h, x.w, x.c, data)
}

pub fn relu_backward(pre: &Nhwc, dy: &Nhwc) -> Nhwc {
    let data = dy
        .data
        .iter()
        .zip(&pre.data)
        .map(|(&d, &p)| if p > 0.0 { d } else { 0.0 })
        .collect();
    Nhwc::from_vec(dy.n, dy.h, dy.w, dy.c, data)
}

/// Gated activation: `tanh(first half) ⊙ sigmoid(second half)` over channels.
pub fn gate(x: &Nhwc) -> Nhwc {
    assert!(x.c % 2 == 0, "gated activation needs an even channel count");
    let g = x.c / 2;
    let mut y = Nhwc::zeros(x.n, x.h, x.w, g);
    for (src, dst) in x.data.chunks(x.c).zip(y.data.chunks_mut(g)) {
        for j in 0..g {
            dst[j] = src[j].tanh() * sigmoid(src[g + j]);
        }
    }
    y
}

pub fn gate_backward(x: &Nhwc, dy: &Nhwc) -> Nhwc {
    let g = x.c / 2;
    let mut dx = Nhwc::zeros(x.n, x.h, x.w, x.c);
    for ((src, d), dst) in x
        .data
        .chunks(x.c)
        .zip(dy.data.chunks(g))
        .zip(dx.data.chunks_mut(x.c))
    {
        for j in 0..g {
            let t = src[j].tanh();
            let s = sigmoid(src[g + j]);
            dst[j] = d[j] * (1.0 - t * t) * s;
            dst[g + j] = d[j] * t * s * (1.0 - s);
        }
    }
    dx
}

/// 2×2 average pooling with stride 2; odd trailing rows/columns are dropped.
pub fn avg_pool2(x: &Nhwc) -> Nhwc {
    let (h, w) = (x.h / 2, x.w / 2);
    let mut y = Nhwc::zeros(x.n, h, w, x.c);
    for n in 0..x.n {
        for oy in 0..h {
            for ox in 0..w {
                let o = y.offset(n, oy, ox);
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let src = x.pixel(n, 2 * oy + dy, 2 * ox + dx);
                    for (d, s) in y.data[o..o + x.c].iter_mut().zip(src) {
                        *d += 0.25 * s;
                    }
                }
            }
        }
    }
    y
}

pub fn avg_pool2_backward(input_shape: (usize, usize, usize, usize), dy: &Nhwc) -> Nhwc {
    let (n, h, w, c) = input_shape;
    let mut dx = Nhwc::zeros(n, h, w, c);
    for b in 0..n {
        for oy in 0..dy.h {
            for ox in 0..dy.w {
                let g = dy.pixel(b, oy, ox);
                for (ddy, ddx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let dst = dx.pixel_mut(b, 2 * oy + ddy, 2 * ox + ddx);
                    for (d, s) in dst.iter_mut().zip(g) {
                        *d += 0.25 * s;
                    }
                }
            }
        }
    }
    dx
}

/// Spatial mean per item; returns `n × c`.
pub fn global_avg_pool(x: &Nhwc) -> Vec<f64> {
    let mut out = vec![0.0; x.n * x.c];
    let inv = 1.0 / (x.h * x.w) as f64;
    for n in 0..x.n {
        let dst = &mut out[n * x.c..(n + 1) * x.c];
        for px in x.item(n).chunks(x.c) {
            for (d, s) in dst.iter_mut().zip(px) {
                *d += s;
            }
        }
        for d in dst.iter_mut() {
            *d *= inv;
        }
    }
    out
}

pub fn global_avg_pool_backward(input_shape: (usize, usize, usize, usize), dy: &[f64]) -> Nhwc {
    let (n, h, w, c) = input_shape;
    let inv = 1.0 / (h * w) as f64;
    let mut dx = Nhwc::zeros(n, h, w, c);
    let l = h * w * c;
    for b in 0..n {
        let g = &dy[b * c..(b + 1) * c];
        for px in dx.data[b * l..(b + 1) * l].chunks_mut(c) {
            for (d, s) in px.iter_mut().zip(g) {
                *d = s * inv;
            }
        }
    }
    dx
}
