//! Hourglass merge network with hand-written forward and backward passes.
//!
//! Tensors are channel-major (`C×H×W`) f64. Convolutions run as im2col
//! followed by a dense matrix product.

use super::maps::{ConfidenceMap, LabelMap, ProjectedStack};
use super::MvpmError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Layer widths and input encoding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub classes: usize,
    /// Widths of the first encoder block, second encoder block (also the
    /// bottleneck) and the last decoder block.
    pub widths: [usize; 3],
    /// Depth channel divisor in meters.
    pub depth_scale: f64,
    /// Bottleneck dropout rate used during training.
    pub dropout: f64,
}

/// Small widths sized for the 40×32 benchmark.
impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            widths: [8, 12, 8],
            ..Self::new(crate::simulator::NUM_CLASSES)
        }
    }
}

impl NetworkConfig {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            widths: [32, 64, 16],
            depth_scale: 5.0,
            dropout: 0.0,
        }
    }

    /// Per slot: C probabilities, scaled depth and a validity flag.
    pub fn input_channels(&self) -> usize {
        4 * (self.classes + 2)
    }

    fn layers(&self) -> [ConvShape; 6] {
        let [w1, w2, w3] = self.widths;
        [
            ConvShape::new(self.input_channels(), w1, 3),
            ConvShape::new(w1, w2, 3),
            ConvShape::new(w2, w2, 3),
            ConvShape::new(2 * w2, w1, 3),
            ConvShape::new(2 * w1, w3, 3),
            ConvShape::new(w3, self.classes, 1),
        ]
    }

    pub fn parameter_count(&self) -> usize {
        self.layers().iter().map(|l| l.params()).sum()
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvShape {
    cin: usize,
    cout: usize,
    k: usize,
}

impl ConvShape {
    fn new(cin: usize, cout: usize, k: usize) -> Self {
        Self { cin, cout, k }
    }
    fn fan_in(&self) -> usize {
        self.cin * self.k * self.k
    }
    fn params(&self) -> usize {
        self.cout * self.fan_in() + self.cout
    }
}

/// Channel-major dense tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }
    fn hw(&self) -> usize {
        self.h * self.w
    }
}

/// Encodes a stack as network input, zero-padded to multiples of four.
pub fn encode_stack(stack: &ProjectedStack, depth_scale: f64) -> Tensor {
    let (w, h, c) = (stack.width(), stack.height(), stack.classes());
    let (ph, pw) = (h.div_ceil(4) * 4, w.div_ceil(4) * 4);
    let mut t = Tensor::zeros(4 * (c + 2), ph, pw);
    let plane = ph * pw;
    for (s, slot) in stack.slots.iter().enumerate() {
        let base = s * (c + 2);
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if !slot.is_valid(i) {
                    continue;
                }
                let o = y * pw + x;
                for (k, &p) in slot.probabilities(i).iter().enumerate() {
                    t.data[(base + k) * plane + o] = p as f64;
                }
                t.data[(base + c) * plane + o] = slot.depth(i) as f64 / depth_scale;
                t.data[(base + c + 1) * plane + o] = 1.0;
            }
        }
    }
    t
}

/// Per-pixel labels and loss mask in the padded input plane.
#[derive(Clone, Debug, PartialEq)]
pub struct Target {
    pub labels: Vec<u8>,
    pub mask: Vec<bool>,
}

impl Target {
    /// Loss is taken where both the label map and slot 0 are valid.
    pub fn new(stack: &ProjectedStack, labels: &LabelMap) -> Result<Self, MvpmError> {
        let (w, h) = (stack.width(), stack.height());
        if labels.width() != w || labels.height() != h {
            return Err(MvpmError::DimensionMismatch("labels vs stack".into()));
        }
        let (ph, pw) = (h.div_ceil(4) * 4, w.div_ceil(4) * 4);
        let mut out = Self {
            labels: vec![0; ph * pw],
            mask: vec![false; ph * pw],
        };
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                out.labels[y * pw + x] = labels.get(i);
                out.mask[y * pw + x] = stack.slots[0].is_valid(i);
            }
        }
        if !out.mask.iter().any(|m| *m) {
            return Err(MvpmError::NoValidPixels);
        }
        Ok(out)
    }

    fn valid_count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeNetwork {
    pub config: NetworkConfig,
    params: Vec<f64>,
}

/// Activations kept for the backward pass.
struct Cache {
    col0: Vec<f64>,
    z1: Tensor,
    a1: Tensor,
    col1: Vec<f64>,
    z2: Tensor,
    a2: Tensor,
    col2: Vec<f64>,
    z3: Tensor,
    a3: Tensor,
    drop: Option<Vec<f64>>,
    col3: Vec<f64>,
    z4: Tensor,
    a4: Tensor,
    col4: Vec<f64>,
    z5: Tensor,
    a5: Tensor,
    logits: Tensor,
}

impl MergeNetwork {
    /// He-normal weights, zero biases.
    pub fn init(config: NetworkConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(config.parameter_count());
        for l in config.layers() {
            let normal = Normal::new(0.0, (2.0 / l.fan_in() as f64).sqrt()).expect("positive std");
            params.extend((0..l.cout * l.fan_in()).map(|_| normal.sample(&mut rng)));
            params.extend(std::iter::repeat_n(0.0, l.cout));
        }
        Self { config, params }
    }

    pub fn zeros(config: NetworkConfig) -> Self {
        let params = vec![0.0; config.parameter_count()];
        Self { config, params }
    }

    pub fn from_params(config: NetworkConfig, params: Vec<f64>) -> Result<Self, MvpmError> {
        let want = config.parameter_count();
        if params.len() != want {
            return Err(MvpmError::ParameterCount {
                got: params.len(),
                want,
            });
        }
        Ok(Self { config, params })
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn layer_slices(&self) -> Vec<(ConvShape, usize)> {
        let mut off = 0;
        self.config
            .layers()
            .into_iter()
            .map(|l| {
                let o = off;
                off += l.params();
                (l, o)
            })
            .collect()
    }

    fn check_input(&self, x: &Tensor) -> Result<(), MvpmError> {
        if x.c != self.config.input_channels() || !x.h.is_multiple_of(4) || !x.w.is_multiple_of(4) {
            return Err(MvpmError::DimensionMismatch(format!(
                "input {}x{}x{} for a {}-channel network",
                x.c,
                x.h,
                x.w,
                self.config.input_channels()
            )));
        }
        Ok(())
    }

    fn forward_cached(&self, x0: &Tensor, drop: Option<Vec<f64>>) -> Cache {
        let ls = self.layer_slices();
        let p = &self.params;
        let (col0, z1) = conv_forward(x0, ls[0].0, &p[ls[0].1..]);
        let a1 = elu(&z1);
        let p1 = avg_pool(&a1);
        let (col1, z2) = conv_forward(&p1, ls[1].0, &p[ls[1].1..]);
        let a2 = elu(&z2);
        let p2 = avg_pool(&a2);
        let (col2, z3) = conv_forward(&p2, ls[2].0, &p[ls[2].1..]);
        let a3 = elu(&z3);
        let d3 = match &drop {
            Some(mask) => {
                let mut t = a3.clone();
                t.data.iter_mut().zip(mask).for_each(|(v, m)| *v *= m);
                t
            }
            None => a3.clone(),
        };
        let c3 = concat(&upsample(&d3), &a2);
        let (col3, z4) = conv_forward(&c3, ls[3].0, &p[ls[3].1..]);
        let a4 = elu(&z4);
        let c4 = concat(&upsample(&a4), &a1);
        let (col4, z5) = conv_forward(&c4, ls[4].0, &p[ls[4].1..]);
        let a5 = elu(&z5);
        let (_, logits) = conv_forward(&a5, ls[5].0, &p[ls[5].1..]);
        Cache {
            col0,
            z1,
            a1,
            col1,
            z2,
            a2,
            col2,
            z3,
            a3,
            drop,
            col3,
            z4,
            a4,
            col4,
            z5,
            a5,
            logits,
        }
    }

    /// Raw logits (`C×H×W`) for an encoded input.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor, MvpmError> {
        self.check_input(x)?;
        Ok(self.forward_cached(x, None).logits)
    }

    /// Softmax confidence in the stack's own (unpadded) plane.
    pub fn confidence(&self, stack: &ProjectedStack) -> Result<ConfidenceMap, MvpmError> {
        let x = encode_stack(stack, self.config.depth_scale);
        let logits = self.logits(&x)?;
        let (w, h, c) = (stack.width(), stack.height(), self.config.classes);
        if stack.classes() != c {
            return Err(MvpmError::DimensionMismatch("stack classes".into()));
        }
        let plane = logits.hw();
        let mut data = Vec::with_capacity(w * h * c);
        let mut row = vec![0.0; c];
        for y in 0..h {
            for x in 0..w {
                let o = y * logits.w + x;
                for (k, r) in row.iter_mut().enumerate() {
                    *r = logits.data[k * plane + o];
                }
                softmax_in_place(&mut row);
                data.extend(row.iter().map(|&v| v as f32));
            }
        }
        Ok(ConfidenceMap::from_parts_unchecked(w, h, c, data, vec![true; w * h]))
    }

    /// Mean masked cross-entropy.
    pub fn loss(&self, x: &Tensor, target: &Target) -> Result<f64, MvpmError> {
        let logits = self.logits(x)?;
        Ok(cross_entropy(&logits, target, None))
    }

    /// Loss and its gradient with respect to every parameter.
    pub fn loss_and_gradient(&self, x: &Tensor, target: &Target) -> Result<(f64, Vec<f64>), MvpmError> {
        self.check_input(x)?;
        Ok(self.backward(self.forward_cached(x, None), target))
    }

    /// Like [`MergeNetwork::loss_and_gradient`] with bottleneck dropout drawn
    /// from `rng`.
    pub(crate) fn loss_and_gradient_dropout(
        &self,
        x: &Tensor,
        target: &Target,
        rng: &mut ChaCha8Rng,
    ) -> (f64, Vec<f64>) {
        let rate = self.config.dropout;
        let mask = (rate > 0.0).then(|| {
            let n = self.config.widths[1] * (x.h / 4) * (x.w / 4);
            let keep = 1.0 / (1.0 - rate);
            (0..n)
                .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
                .collect()
        });
        self.backward(self.forward_cached(x, mask), target)
    }

    fn backward(&self, cache: Cache, target: &Target) -> (f64, Vec<f64>) {
        let ls = self.layer_slices();
        let p = &self.params;
        let mut grad = vec![0.0; p.len()];
        let mut g_logits = Tensor::zeros(cache.logits.c, cache.logits.h, cache.logits.w);
        let loss = cross_entropy(&cache.logits, target, Some(&mut g_logits));

        let g_a5 = conv_backward(&g_logits, &cache.a5.data, ls[5], p, &mut grad);
        let g_z5 = elu_backward(&g_a5, &cache.z5, &cache.a5);
        let g_c4 = conv_backward(&g_z5, &cache.col4, ls[4], p, &mut grad);
        let (g_u4, mut g_a1) = split_channels(&g_c4, cache.a4.c);
        let g_a4 = upsample_backward(&g_u4);
        let g_z4 = elu_backward(&g_a4, &cache.z4, &cache.a4);
        let g_c3 = conv_backward(&g_z4, &cache.col3, ls[3], p, &mut grad);
        let (g_u3, mut g_a2) = split_channels(&g_c3, cache.a3.c);
        let mut g_a3 = upsample_backward(&g_u3);
        if let Some(mask) = &cache.drop {
            g_a3.data.iter_mut().zip(mask).for_each(|(g, m)| *g *= m);
        }
        let g_z3 = elu_backward(&g_a3, &cache.z3, &cache.a3);
        let g_p2 = conv_backward(&g_z3, &cache.col2, ls[2], p, &mut grad);
        add_in_place(&mut g_a2, &avg_pool_backward(&g_p2));
        let g_z2 = elu_backward(&g_a2, &cache.z2, &cache.a2);
        let g_p1 = conv_backward(&g_z2, &cache.col1, ls[1], p, &mut grad);
        add_in_place(&mut g_a1, &avg_pool_backward(&g_p1));
        let g_z1 = elu_backward(&g_a1, &cache.z1, &cache.a1);
        conv_weight_grad(&g_z1, &cache.col0, ls[0], &mut grad);
        (loss, grad)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}

fn cross_entropy(logits: &Tensor, target: &Target, mut grad: Option<&mut Tensor>) -> f64 {
    let plane = logits.hw();
    let c = logits.c;
    let n = target.valid_count().max(1) as f64;
    let mut row = vec![0.0; c];
    let mut loss = 0.0;
    for o in 0..plane {
        if !target.mask[o] {
            continue;
        }
        for (k, r) in row.iter_mut().enumerate() {
            *r = logits.data[k * plane + o];
        }
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        let y = target.labels[o] as usize;
        loss += lse - row[y];
        if let Some(g) = grad.as_deref_mut() {
            for (k, &r) in row.iter().enumerate() {
                let pk = (r - lse).exp();
                g.data[k * plane + o] = (pk - if k == y { 1.0 } else { 0.0 }) / n;
            }
        }
    }
    loss / n
}

fn im2col(x: &Tensor, k: usize) -> Vec<f64> {
    let (h, w) = (x.h, x.w);
    let hw = h * w;
    if k == 1 {
        return x.data.clone();
    }
    let pad = (k / 2) as isize;
    let mut col = vec![0.0; x.c * k * k * hw];
    for ci in 0..x.c {
        let src = &x.data[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = (w as isize - dx.max(0)) as usize;
                    let s_off = sy as usize * w;
                    for xx in x_lo..x_hi {
                        dst[y * w + xx] = src[s_off + (xx as isize + dx) as usize];
                    }
                }
            }
        }
    }
    col
}

fn col2im(col: &[f64], c: usize, h: usize, w: usize, k: usize) -> Tensor {
    let hw = h * w;
    if k == 1 {
        return Tensor {
            c,
            h,
            w,
            data: col.to_vec(),
        };
    }
    let pad = (k / 2) as isize;
    let mut out = Tensor::zeros(c, h, w);
    for ci in 0..c {
        let dst = &mut out.data[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = (w as isize - dx.max(0)) as usize;
                    let s_off = sy as usize * w;
                    for xx in x_lo..x_hi {
                        dst[s_off + (xx as isize + dx) as usize] += src[y * w + xx];
                    }
                }
            }
        }
    }
    out
}

/// `c = a·b (+ c if accumulate)` for row-major `a: m×k` (or its transpose)
/// and `b: k×n` (or its transpose).
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], accumulate: bool) {
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices cover every index reachable through the given
    // dimensions and strides, checked by the assertion above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn conv_forward(x: &Tensor, l: ConvShape, p: &[f64]) -> (Vec<f64>, Tensor) {
    debug_assert_eq!(x.c, l.cin);
    let hw = x.hw();
    let col = im2col(x, l.k);
    let kk = l.fan_in();
    let mut out = Tensor::zeros(l.cout, x.h, x.w);
    for (co, chunk) in out.data.chunks_exact_mut(hw).enumerate() {
        chunk.fill(p[l.cout * kk + co]);
    }
    gemm(
        l.cout,
        kk,
        hw,
        &p[..l.cout * kk],
        false,
        &col,
        false,
        &mut out.data,
        true,
    );
    (col, out)
}

fn conv_weight_grad(g_out: &Tensor, col: &[f64], (l, off): (ConvShape, usize), grad: &mut [f64]) {
    let hw = g_out.hw();
    let kk = l.fan_in();
    let (gw, gb) = grad[off..off + l.params()].split_at_mut(l.cout * kk);
    gemm(l.cout, hw, kk, &g_out.data, false, col, true, gw, true);
    for (co, b) in gb.iter_mut().enumerate() {
        *b += g_out.data[co * hw..(co + 1) * hw].iter().sum::<f64>();
    }
}

/// Accumulates weight gradients and returns the input gradient.
fn conv_backward(g_out: &Tensor, col: &[f64], (l, off): (ConvShape, usize), p: &[f64], grad: &mut [f64]) -> Tensor {
    let hw = g_out.hw();
    let kk = l.fan_in();
    conv_weight_grad(g_out, col, (l, off), grad);
    let mut g_col = vec![0.0; kk * hw];
    gemm(
        kk,
        l.cout,
        hw,
        &p[off..off + l.cout * kk],
        true,
        &g_out.data,
        false,
        &mut g_col,
        false,
    );
    col2im(&g_col, l.cin, g_out.h, g_out.w, l.k)
}

fn elu(z: &Tensor) -> Tensor {
    Tensor {
        c: z.c,
        h: z.h,
        w: z.w,
        data: z.data.iter().map(|&v| if v > 0.0 { v } else { v.exp_m1() }).collect(),
    }
}

fn elu_backward(g: &Tensor, z: &Tensor, a: &Tensor) -> Tensor {
    let data = g
        .data
        .iter()
        .zip(&z.data)
        .zip(&a.data)
        .map(|((&g, &z), &a)| if z > 0.0 { g } else { g * (a + 1.0) })
        .collect();
    Tensor {
        c: g.c,
        h: g.h,
        w: g.w,
        data,
    }
}

fn avg_pool(x: &Tensor) -> Tensor {
    let (h2, w2) = (x.h / 2, x.w / 2);
    let mut out = Tensor::zeros(x.c, h2, w2);
    for c in 0..x.c {
        let src = &x.data[c * x.hw()..];
        for y in 0..h2 {
            for xx in 0..w2 {
                let i = 2 * y * x.w + 2 * xx;
                out.data[c * h2 * w2 + y * w2 + xx] = 0.25 * (src[i] + src[i + 1] + src[i + x.w] + src[i + x.w + 1]);
            }
        }
    }
    out
}

fn avg_pool_backward(g: &Tensor) -> Tensor {
    let (h, w) = (g.h * 2, g.w * 2);
    let mut out = Tensor::zeros(g.c, h, w);
    for c in 0..g.c {
        for y in 0..h {
            for x in 0..w {
                out.data[c * h * w + y * w + x] = 0.25 * g.data[c * g.hw() + (y / 2) * g.w + x / 2];
            }
        }
    }
    out
}

fn upsample(x: &Tensor) -> Tensor {
    let (h, w) = (x.h * 2, x.w * 2);
    let mut out = Tensor::zeros(x.c, h, w);
    for c in 0..x.c {
        for y in 0..h {
            for xx in 0..w {
                out.data[c * h * w + y * w + xx] = x.data[c * x.hw() + (y / 2) * x.w + xx / 2];
            }
        }
    }
    out
}

fn upsample_backward(g: &Tensor) -> Tensor {
    let (h2, w2) = (g.h / 2, g.w / 2);
    let mut out = Tensor::zeros(g.c, h2, w2);
    for c in 0..g.c {
        for y in 0..g.h {
            for x in 0..g.w {
                out.data[c * h2 * w2 + (y / 2) * w2 + x / 2] += g.data[c * g.hw() + y * g.w + x];
            }
        }
    }
    out
}

fn concat(a: &Tensor, b: &Tensor) -> Tensor {
    let mut data = a.data.clone();
    data.extend_from_slice(&b.data);
    Tensor {
        c: a.c + b.c,
        h: a.h,
        w: a.w,
        data,
    }
}

fn split_channels(g: &Tensor, first: usize) -> (Tensor, Tensor) {
    let cut = first * g.hw();
    (
        Tensor {
            c: first,
            h: g.h,
            w: g.w,
            data: g.data[..cut].to_vec(),
        },
        Tensor {
            c: g.c - first,
            h: g.h,
            w: g.w,
            data: g.data[cut..].to_vec(),
        },
    )
}

fn add_in_place(a: &mut Tensor, b: &Tensor) {
    a.data.iter_mut().zip(&b.data).for_each(|(x, y)| *x += y);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mvpm::AugmentedMap;
    use crate::rig::CameraId;
    use rand::Rng;

    fn small_config(classes: usize) -> NetworkConfig {
        NetworkConfig {
            classes,
            widths: [4, 6, 5],
            depth_scale: 5.0,
            dropout: 0.0,
        }
    }

    fn random_stack(w: usize, h: usize, c: usize, seed: u64) -> ProjectedStack {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let slots: Vec<AugmentedMap> = (0..4)
            .map(|_| {
                let mut data = Vec::new();
                let mut valid = Vec::new();
                for _ in 0..w * h {
                    let raw: Vec<f32> = (0..c).map(|_| rng.random::<f32>() + 0.05).collect();
                    let s: f32 = raw.iter().sum();
                    data.extend(raw.iter().map(|v| v / s));
                    data.push(rng.random_range(0.5..4.0));
                    valid.push(rng.random::<f64>() > 0.2);
                }
                AugmentedMap::new(w, h, c, data, valid).unwrap()
            })
            .collect();
        ProjectedStack {
            target: CameraId::Op,
            order: CameraId::Op.slot_order(),
            slots: slots.try_into().unwrap(),
        }
    }

    fn random_target(stack: &ProjectedStack, seed: u64) -> Target {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = stack.width() * stack.height();
        let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..stack.classes() as u8)).collect();
        let lm = LabelMap::new(stack.width(), stack.height(), stack.classes(), labels).unwrap();
        Target::new(stack, &lm).unwrap()
    }

    #[test]
    fn zero_weights_give_uniform_softmax() {
        let stack = random_stack(8, 8, 3, 1);
        let net = MergeNetwork::zeros(small_config(3));
        let conf = net.confidence(&stack).unwrap();
        assert!(conf.data().iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-7));
        let t = random_target(&stack, 2);
        let loss = net.loss(&encode_stack(&stack, 5.0), &t).unwrap();
        assert!((loss - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_are_reproducible() {
        let stack = random_stack(10, 6, 4, 3);
        let net = MergeNetwork::init(small_config(4), 9);
        let a = net.confidence(&stack).unwrap();
        let b = MergeNetwork::init(small_config(4), 9).confidence(&stack).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.width(), a.height()), (10, 6));
        for i in 0..a.pixel_count() {
            let s: f64 = a.pixel(i).iter().map(|&p| p as f64).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn large_correct_logits_drive_loss_to_zero() {
        let logits = Tensor {
            c: 2,
            h: 1,
            w: 2,
            data: vec![50.0, -50.0, -50.0, 50.0],
        };
        let t = Target {
            labels: vec![0, 1],
            mask: vec![true, true],
        };
        assert!(cross_entropy(&logits, &t, None) < 1e-20);
    }

    #[test]
    fn im2col_and_col2im_are_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor {
            c: 2,
            h: 4,
            w: 5,
            data: (0..40).map(|_| rng.random::<f64>()).collect(),
        };
        let y: Vec<f64> = (0..2 * 9 * 20).map(|_| rng.random::<f64>()).collect();
        let lhs: f64 = im2col(&x, 3).iter().zip(&y).map(|(a, b)| a * b).sum();
        let back = col2im(&y, 2, 4, 5, 3);
        let rhs: f64 = back.data.iter().zip(&x.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let stack = random_stack(8, 8, 3, 5);
        let target = random_target(&stack, 6);
        let x = encode_stack(&stack, 5.0);
        let mut net = MergeNetwork::init(small_config(3), 7);
        // Non-zero biases so every bias gradient path is exercised.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for v in net.params_mut() {
            *v += rng.random_range(-0.05..0.05);
        }
        let (_, grad) = net.loss_and_gradient(&x, &target).unwrap();
        let eps = 1e-4;
        let mut worst = 0.0f64;
        for (i, &g) in grad.iter().enumerate() {
            let orig = net.params()[i];
            net.params_mut()[i] = orig + eps;
            let lp = net.loss(&x, &target).unwrap();
            net.params_mut()[i] = orig - eps;
            let lm = net.loss(&x, &target).unwrap();
            net.params_mut()[i] = orig;
            let fd = (lp - lm) / (2.0 * eps);
            let rel = (fd - g).abs() / fd.abs().max(g.abs()).max(1e-6);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let net = MergeNetwork::zeros(small_config(3));
        assert!(net.logits(&Tensor::zeros(5, 8, 8)).is_err());
        assert!(MergeNetwork::from_params(small_config(3), vec![0.0; 3]).is_err());
    }
}
