//! Layer kernels with explicit forward caches and backward passes.
//! All tensors are single samples in CHW layout.

use super::params::{Grads, ParamStore};
use super::Tensor;

fn sgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the stride pairs describe row-major or transposed views that lie
    // within the given slices; `c` is an exclusive m x n row-major buffer.
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
            n as isize,
            1,
        );
    }
}

/// 3x3 (padding 1) or 1x1 convolution.
#[derive(Debug, Clone)]
pub struct Conv {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub weight: usize,
    pub bias: usize,
}

pub struct ConvCache {
    /// im2col matrix for 3x3, the input itself for 1x1.
    cols: Vec<f32>,
    height: usize,
    width: usize,
}

fn im2col3(x: &Tensor) -> Vec<f32> {
    let (h, w) = (x.height, x.width);
    let n = h * w;
    let mut cols = vec![0.0f32; x.channels * 9 * n];
    for ci in 0..x.channels {
        let src = &x.data[ci * n..(ci + 1) * n];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[(ci * 9 + ky * 3 + kx) * n..(ci * 9 + ky * 3 + kx + 1) * n];
                let xs = if kx == 0 { 1 } else { 0 };
                let xe = if kx == 2 { w - 1 } else { w };
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let sy = sy as usize;
                    let s0 = sy * w + xs + kx - 1;
                    row[y * w + xs..y * w + xe].copy_from_slice(&src[s0..s0 + (xe - xs)]);
                }
            }
        }
    }
    cols
}

fn col2im3(cols: &[f32], channels: usize, h: usize, w: usize) -> Vec<f32> {
    let n = h * w;
    let mut out = vec![0.0f32; channels * n];
    for ci in 0..channels {
        let dst = &mut out[ci * n..(ci + 1) * n];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[(ci * 9 + ky * 3 + kx) * n..(ci * 9 + ky * 3 + kx + 1) * n];
                let xs = if kx == 0 { 1 } else { 0 };
                let xe = if kx == 2 { w - 1 } else { w };
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let s0 = sy as usize * w + xs + kx - 1;
                    for (d, v) in dst[s0..s0 + (xe - xs)].iter_mut().zip(&row[y * w + xs..y * w + xe]) {
                        *d += v;
                    }
                }
            }
        }
    }
    out
}

impl Conv {
    pub fn register(store: &mut ParamStore, name: &str, cin: usize, cout: usize, kernel: usize) -> Self {
        let fan_in = cin * kernel * kernel;
        let weight = store.add_kaiming(&format!("{name}.weight"), vec![cout, cin, kernel, kernel], fan_in);
        let bias = store.add_const(&format!("{name}.bias"), vec![cout], 0.0);
        Self {
            in_channels: cin,
            out_channels: cout,
            kernel,
            weight,
            bias,
        }
    }

    fn k(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn forward(&self, p: &ParamStore, x: &Tensor) -> (Tensor, ConvCache) {
        debug_assert_eq!(x.channels, self.in_channels);
        let n = x.height * x.width;
        let cols = if self.kernel == 3 { im2col3(x) } else { x.data.clone() };
        let bias = p.data(self.bias);
        let mut out = vec![0.0f32; self.out_channels * n];
        for (o, chunk) in out.chunks_exact_mut(n).enumerate() {
            chunk.fill(bias[o]);
        }
        let k = self.k();
        sgemm(self.out_channels, k, n, p.data(self.weight), (k, 1), &cols, (n, 1), 1.0, &mut out);
        (
            Tensor {
                channels: self.out_channels,
                height: x.height,
                width: x.width,
                data: out,
            },
            ConvCache {
                cols,
                height: x.height,
                width: x.width,
            },
        )
    }

    pub fn backward(&self, p: &ParamStore, cache: &ConvCache, dy: &Tensor, grads: &mut Grads) -> Tensor {
        let n = cache.height * cache.width;
        let k = self.k();
        {
            let gb = grads.get_mut(self.bias);
            for (o, chunk) in dy.data.chunks_exact(n).enumerate() {
                gb[o] += chunk.iter().sum::<f32>();
            }
        }
        sgemm(self.out_channels, n, k, &dy.data, (n, 1), &cache.cols, (1, n), 1.0, grads.get_mut(self.weight));
        let mut dcols = vec![0.0f32; k * n];
        sgemm(k, self.out_channels, n, p.data(self.weight), (1, k), &dy.data, (n, 1), 0.0, &mut dcols);
        let data = if self.kernel == 3 {
            col2im3(&dcols, self.in_channels, cache.height, cache.width)
        } else {
            dcols
        };
        Tensor {
            channels: self.in_channels,
            height: cache.height,
            width: cache.width,
            data,
        }
    }
}

/// Group normalization (statistics per sample and channel group) followed by ReLU.
#[derive(Debug, Clone)]
pub struct GroupNormRelu {
    pub channels: usize,
    pub groups: usize,
    pub gamma: usize,
    pub beta: usize,
}

pub struct NormCache {
    xhat: Vec<f32>,
    inv_std: Vec<f32>,
    /// Post-activation output, used for the ReLU mask.
    out: Vec<f32>,
}

const NORM_EPS: f32 = 1e-5;

fn group_count(channels: usize) -> usize {
    (1..=8).rev().find(|g| channels.is_multiple_of(*g)).unwrap_or(1)
}

impl GroupNormRelu {
    pub fn register(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            channels,
            groups: group_count(channels),
            gamma: store.add_const(&format!("{name}.gamma"), vec![channels], 1.0),
            beta: store.add_const(&format!("{name}.beta"), vec![channels], 0.0),
        }
    }

    pub fn forward(&self, p: &ParamStore, x: Tensor) -> (Tensor, NormCache) {
        let n = x.height * x.width;
        let cg = self.channels / self.groups;
        let m = (cg * n) as f64;
        let gamma = p.data(self.gamma);
        let beta = p.data(self.beta);
        let mut xhat = x.data;
        let mut inv_std = Vec::with_capacity(self.groups);
        let mut out = vec![0.0f32; xhat.len()];
        for g in 0..self.groups {
            let block = &mut xhat[g * cg * n..(g + 1) * cg * n];
            let mean = block.iter().map(|v| *v as f64).sum::<f64>() / m;
            let var = block.iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>() / m;
            let is = (1.0 / (var + NORM_EPS as f64).sqrt()) as f32;
            let mean = mean as f32;
            for v in block.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
            for c in g * cg..(g + 1) * cg {
                let (ga, be) = (gamma[c], beta[c]);
                for (o, xh) in out[c * n..(c + 1) * n].iter_mut().zip(&xhat[c * n..(c + 1) * n]) {
                    *o = (ga * xh + be).max(0.0);
                }
            }
        }
        let t = Tensor {
            channels: x.channels,
            height: x.height,
            width: x.width,
            data: out.clone(),
        };
        (t, NormCache { xhat, inv_std, out })
    }

    pub fn backward(&self, p: &ParamStore, cache: &NormCache, mut dy: Tensor, grads: &mut Grads) -> Tensor {
        let n = dy.height * dy.width;
        let cg = self.channels / self.groups;
        let m = (cg * n) as f32;
        for (d, o) in dy.data.iter_mut().zip(&cache.out) {
            if *o <= 0.0 {
                *d = 0.0;
            }
        }
        let gamma = p.data(self.gamma);
        {
            let (gg, gb) = grads.get_pair_mut(self.gamma, self.beta);
            for c in 0..self.channels {
                let d = &dy.data[c * n..(c + 1) * n];
                let xh = &cache.xhat[c * n..(c + 1) * n];
                gg[c] += d.iter().zip(xh).map(|(a, b)| a * b).sum::<f32>();
                gb[c] += d.iter().sum::<f32>();
            }
        }
        for g in 0..self.groups {
            let mut s1 = 0.0f64;
            let mut s2 = 0.0f64;
            for c in g * cg..(g + 1) * cg {
                for (d, xh) in dy.data[c * n..(c + 1) * n].iter_mut().zip(&cache.xhat[c * n..(c + 1) * n]) {
                    *d *= gamma[c];
                    s1 += *d as f64;
                    s2 += (*d * xh) as f64;
                }
            }
            let (s1, s2) = ((s1 / m as f64) as f32, (s2 / m as f64) as f32);
            let is = cache.inv_std[g];
            let range = g * cg * n..(g + 1) * cg * n;
            for (d, xh) in dy.data[range.clone()].iter_mut().zip(&cache.xhat[range]) {
                *d = is * (*d - s1 - xh * s2);
            }
        }
        dy
    }
}

/// 2x2 max pooling with stride 2.
pub fn maxpool2(x: &Tensor) -> (Tensor, Vec<u32>) {
    let (h, w) = (x.height / 2, x.width / 2);
    let mut out = vec![0.0f32; x.channels * h * w];
    let mut arg = vec![0u32; out.len()];
    for c in 0..x.channels {
        let base = c * x.height * x.width;
        for y in 0..h {
            for xx in 0..w {
                let i0 = base + 2 * y * x.width + 2 * xx;
                let cands = [i0, i0 + 1, i0 + x.width, i0 + x.width + 1];
                let mut best = cands[0];
                for &i in &cands[1..] {
                    if x.data[i] > x.data[best] {
                        best = i;
                    }
                }
                let o = c * h * w + y * w + xx;
                out[o] = x.data[best];
                arg[o] = best as u32;
            }
        }
    }
    (
        Tensor {
            channels: x.channels,
            height: h,
            width: w,
            data: out,
        },
        arg,
    )
}

pub fn maxpool2_backward(dy: &Tensor, arg: &[u32], in_h: usize, in_w: usize) -> Tensor {
    let mut dx = vec![0.0f32; dy.channels * in_h * in_w];
    for (g, a) in dy.data.iter().zip(arg) {
        dx[*a as usize] += g;
    }
    Tensor {
        channels: dy.channels,
        height: in_h,
        width: in_w,
        data: dx,
    }
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2(x: &Tensor) -> Tensor {
    let (h, w) = (x.height * 2, x.width * 2);
    let mut out = vec![0.0f32; x.channels * h * w];
    for c in 0..x.channels {
        for y in 0..h {
            let src = &x.data[c * x.height * x.width + (y / 2) * x.width..][..x.width];
            let dst = &mut out[c * h * w + y * w..][..w];
            for (xx, d) in dst.iter_mut().enumerate() {
                *d = src[xx / 2];
            }
        }
    }
    Tensor {
        channels: x.channels,
        height: h,
        width: w,
        data: out,
    }
}

pub fn upsample2_backward(dy: &Tensor) -> Tensor {
    let (h, w) = (dy.height / 2, dy.width / 2);
    let mut dx = vec![0.0f32; dy.channels * h * w];
    for c in 0..dy.channels {
        for y in 0..dy.height {
            for x in 0..dy.width {
                dx[c * h * w + (y / 2) * w + x / 2] += dy.data[c * dy.height * dy.width + y * dy.width + x];
            }
        }
    }
    Tensor {
        channels: dy.channels,
        height: h,
        width: w,
        data: dx,
    }
}

pub fn concat(a: &Tensor, b: &Tensor) -> Tensor {
    debug_assert_eq!((a.height, a.width), (b.height, b.width));
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Tensor {
        channels: a.channels + b.channels,
        height: a.height,
        width: a.width,
        data,
    }
}

pub fn split(d: Tensor, first_channels: usize) -> (Tensor, Tensor) {
    let n = d.height * d.width;
    let mut data = d.data;
    let rest = data.split_off(first_channels * n);
    (
        Tensor {
            channels: first_channels,
            height: d.height,
            width: d.width,
            data,
        },
        Tensor {
            channels: d.channels - first_channels,
            height: d.height,
            width: d.width,
            data: rest,
        },
    )
}
