//! Minimal CPU building blocks for the toy networks: 3x3 dilated
//! convolutions lowered to `sgemm`, SiLU, Adam, and named tensor tables.
//!
//! Activations are channel-major `C x H x W` `f32` buffers for one sample.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(name: impl Into<String>, dims: Vec<usize>) -> Self {
        let n = dims.iter().product();
        Tensor { name: name.into(), dims, data: vec![0.0; n] }
    }

    pub fn from_data(name: impl Into<String>, dims: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Tensor { name: name.into(), dims, data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// An ordered set of named tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TensorTable {
    tensors: Vec<Tensor>,
}

impl TensorTable {
    pub fn new(tensors: Vec<Tensor>) -> Self {
        TensorTable { tensors }
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn push(&mut self, t: Tensor) {
        self.tensors.push(t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn require(&self, name: &str, dims: &[usize]) -> Result<&Tensor> {
        let t = self.get(name).ok_or_else(|| Error::Malformed(format!("missing tensor `{name}`")))?;
        if t.dims != dims {
            return Err(Error::Malformed(format!("tensor `{name}` has dims {:?}, expected {dims:?}", t.dims)));
        }
        Ok(t)
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> TensorTable {
        TensorTable { tensors: self.tensors.iter().map(|t| Tensor::zeros(t.name.clone(), t.dims.clone())).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    pub fn fill_zero(&mut self) {
        for t in &mut self.tensors {
            t.data.fill(0.0);
        }
    }

    pub fn add_assign(&mut self, other: &TensorTable) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f32) {
        for t in &mut self.tensors {
            t.data.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn norm(&self) -> f64 {
        self.tensors.iter().flat_map(|t| &t.data).map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
    }
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn silu(x: f32) -> f32 {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad(x: f32) -> f32 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// `C = A * B + beta * C` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!((m - 1) * rsc + (n - 1) * csc < c.len());
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::sgemm(
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
            rsc as isize,
            csc as isize,
        );
    }
}

/// Geometry of a 3x3 "same" convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub in_ch: usize,
    pub out_ch: usize,
    pub dilation: usize,
    pub height: usize,
    pub width: usize,
}

impl ConvShape {
    pub fn weight_len(&self) -> usize {
        self.out_ch * self.in_ch * 9
    }

    fn hw(&self) -> usize {
        self.height * self.width
    }
}

fn im2col(input: &[f32], s: &ConvShape, cols: &mut [f32]) {
    let (h, w, hw, d) = (s.height, s.width, s.hw(), s.dilation as isize);
    for ci in 0..s.in_ch {
        let plane = &input[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                let (dy, dx) = ((ky as isize - 1) * d, (kx as isize - 1) * d);
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).clamp(0, w as isize) as usize;
                for y in 0..h {
                    let out = &mut row[y * w..(y + 1) * w];
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize || x0 >= x1 {
                        out.fill(0.0);
                        continue;
                    }
                    out[..x0].fill(0.0);
                    out[x1..].fill(0.0);
                    let src = sy as usize * w;
                    let sx0 = (x0 as isize + dx) as usize;
                    out[x0..x1].copy_from_slice(&plane[src + sx0..src + sx0 + (x1 - x0)]);
                }
            }
        }
    }
}

fn col2im_add(dcols: &[f32], s: &ConvShape, dinput: &mut [f32]) {
    let (h, w, hw, d) = (s.height, s.width, s.hw(), s.dilation as isize);
    for ci in 0..s.in_ch {
        let plane = &mut dinput[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &dcols[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                let (dy, dx) = ((ky as isize - 1) * d, (kx as isize - 1) * d);
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).clamp(0, w as isize) as usize;
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = sy as usize * w;
                    let sx0 = (x0 as isize + dx) as usize;
                    let target = &mut plane[src + sx0..src + sx0 + (x1 - x0)];
                    for (t, g) in target.iter_mut().zip(&row[y * w + x0..y * w + x1]) {
                        *t += g;
                    }
                }
            }
        }
    }
}

/// Forward pass; returns the output and the lowered input needed by
/// [`conv_backward`].
pub fn conv_forward(weight: &[f32], bias: &[f32], input: &[f32], s: &ConvShape) -> (Vec<f32>, Vec<f32>) {
    let hw = s.hw();
    let k = s.in_ch * 9;
    let mut cols = vec![0.0; k * hw];
    im2col(input, s, &mut cols);
    let mut out = vec![0.0; s.out_ch * hw];
    for (o, b) in bias.iter().enumerate() {
        out[o * hw..(o + 1) * hw].fill(*b);
    }
    gemm(s.out_ch, k, hw, weight, (k, 1), &cols, (hw, 1), 1.0, &mut out, (hw, 1));
    (out, cols)
}

/// Accumulates weight and bias gradients; returns the input gradient when
/// asked for.
pub fn conv_backward(
    weight: &[f32],
    cols: &[f32],
    dout: &[f32],
    s: &ConvShape,
    dweight: &mut [f32],
    dbias: &mut [f32],
    need_input_grad: bool,
) -> Option<Vec<f32>> {
    let hw = s.hw();
    let k = s.in_ch * 9;
    gemm(s.out_ch, hw, k, dout, (hw, 1), cols, (1, hw), 1.0, dweight, (k, 1));
    for (o, db) in dbias.iter_mut().enumerate() {
        *db += dout[o * hw..(o + 1) * hw].iter().sum::<f32>();
    }
    if !need_input_grad {
        return None;
    }
    let mut dcols = vec![0.0; k * hw];
    gemm(k, s.out_ch, hw, weight, (1, k), dout, (hw, 1), 0.0, &mut dcols, (hw, 1));
    let mut dinput = vec![0.0; s.in_ch * hw];
    col2im_add(&dcols, s, &mut dinput);
    Some(dinput)
}

/// `y = W x + b` for a dense layer with `W` stored `[out, in]`.
pub fn linear(weight: &[f32], bias: Option<&[f32]>, x: &[f32], out_dim: usize) -> Vec<f32> {
    let in_dim = x.len();
    (0..out_dim)
        .map(|o| {
            let row = &weight[o * in_dim..(o + 1) * in_dim];
            row.iter().zip(x).map(|(a, b)| a * b).sum::<f32>() + bias.map_or(0.0, |b| b[o])
        })
        .collect()
}

/// Accumulates `dW += dy x^T`, `db += dy` and returns `W^T dy`.
pub fn linear_backward(weight: &[f32], x: &[f32], dy: &[f32], dweight: &mut [f32], dbias: Option<&mut [f32]>) -> Vec<f32> {
    let in_dim = x.len();
    let mut dx = vec![0.0; in_dim];
    for (o, &g) in dy.iter().enumerate() {
        let row = &weight[o * in_dim..(o + 1) * in_dim];
        let drow = &mut dweight[o * in_dim..(o + 1) * in_dim];
        for i in 0..in_dim {
            drow[i] += g * x[i];
            dx[i] += g * row[i];
        }
    }
    if let Some(db) = dbias {
        for (b, g) in db.iter_mut().zip(dy) {
            *b += g;
        }
    }
    dx
}

/// Standard transformer-style sinusoidal embedding of a timestep.
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f32> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin() as f32;
        out[half + i] = arg.cos() as f32;
    }
    out
}

/// Adam with optional global-norm gradient clipping.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
    pub clip_norm: Option<f32>,
    step: u32,
    m: TensorTable,
    v: TensorTable,
}

impl Adam {
    pub fn new(params: &TensorTable, learning_rate: f32) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: Some(1.0),
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn step(&mut self, params: &mut TensorTable, grads: &TensorTable, lr_scale: f32) {
        self.step += 1;
        let clip = match self.clip_norm {
            Some(max) => {
                let n = grads.norm() as f32;
                if n > max {
                    max / n
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let b1c = 1.0 - self.beta1.powi(self.step as i32);
        let b2c = 1.0 - self.beta2.powi(self.step as i32);
        let lr = self.learning_rate * lr_scale;
        for (((p, g), m), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
        {
            for i in 0..p.data.len() {
                let gi = g.data[i] * clip;
                m.data[i] = self.beta1 * m.data[i] + (1.0 - self.beta1) * gi;
                v.data[i] = self.beta2 * v.data[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m.data[i] / b1c;
                let vh = v.data[i] / b2c;
                p.data[i] -= lr * mh / (vh.sqrt() + self.epsilon);
            }
        }
    }
}

/// He-style uniform initialisation driven by a caller-provided generator.
pub fn init_uniform(data: &mut [f32], fan_in: usize, rng: &mut impl rand::Rng) {
    let bound = (6.0 / fan_in as f32).sqrt() * 0.5;
    for v in data {
        *v = rng.random_range(-bound..bound);
    }
}
