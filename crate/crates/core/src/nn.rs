//! Minimal dense and convolutional layers with hand-written backward passes.
//!
//! All parameters of a network live in one flat `f64` buffer described by a
//! [`ParamSet`]. Layers are plain offset descriptors into that buffer, so a
//! gradient is just another buffer of the same length.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.numel()
    }
}

/// Named tensors packed into one flat buffer.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    pub specs: Vec<TensorSpec>,
    pub values: Vec<f64>,
}

impl ParamSet {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn zeros_like(&self) -> Vec<f64> {
        vec![0.0; self.values.len()]
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.specs
            .iter()
            .find(|s| s.name == name)
            .map(|s| &self.values[s.range()])
    }

    /// Overwrites every tensor whose name appears in `other` with matching shape.
    pub fn copy_matching(&mut self, other: &ParamSet) -> usize {
        let mut n = 0;
        for spec in &self.specs {
            if let Some(src) = other.specs.iter().find(|s| s.name == spec.name && s.shape == spec.shape) {
                self.values[spec.range()].copy_from_slice(&other.values[src.range()]);
                n += 1;
            }
        }
        n
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Registers tensors and hands out layer descriptors.
#[derive(Debug, Default)]
pub struct ParamBuilder {
    specs: Vec<TensorSpec>,
    fan_in: Vec<usize>,
    len: usize,
}

impl ParamBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, name: String, shape: Vec<usize>, fan_in: usize) -> usize {
        let offset = self.len;
        let spec = TensorSpec { name, shape, offset };
        self.len += spec.numel();
        self.specs.push(spec);
        self.fan_in.push(fan_in);
        offset
    }

    pub fn linear(&mut self, name: &str, inp: usize, out: usize) -> Linear {
        let w = self.push(format!("{name}.weight"), vec![out, inp], inp);
        let b = self.push(format!("{name}.bias"), vec![out], inp);
        Linear { inp, out, w, b }
    }

    pub fn conv(&mut self, name: &str, in_ch: usize, out_ch: usize, in_size: usize) -> Conv2d {
        let fan_in = in_ch * KERNEL * KERNEL;
        let w = self.push(format!("{name}.weight"), vec![out_ch, in_ch, KERNEL, KERNEL], fan_in);
        let b = self.push(format!("{name}.bias"), vec![out_ch], fan_in);
        Conv2d {
            in_ch,
            out_ch,
            in_size,
            out_size: (in_size + 2 * PAD - KERNEL) / STRIDE + 1,
            w,
            b,
        }
    }

    pub fn layout(self) -> (Vec<TensorSpec>, usize) {
        (self.specs, self.len)
    }

    /// Uniform `[-1/√fan_in, 1/√fan_in]` initialization for every tensor.
    pub fn build<R: Rng>(self, rng: &mut R) -> ParamSet {
        let mut values = vec![0.0; self.len];
        for (spec, fan_in) in self.specs.iter().zip(&self.fan_in) {
            let bound = 1.0 / (*fan_in as f64).sqrt();
            for v in &mut values[spec.range()] {
                *v = rng.random_range(-bound..bound);
            }
        }
        ParamSet {
            specs: self.specs,
            values,
        }
    }
}

/// `y = W x + b` with `W` stored row-major as `[out][inp]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub inp: usize,
    pub out: usize,
    w: usize,
    b: usize,
}

impl Linear {
    pub fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.inp {
            return Err(Error::Shape {
                expected: self.inp,
                actual: x.len(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, p: &[f64], x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.inp);
        let w = &p[self.w..self.w + self.inp * self.out];
        let b = &p[self.b..self.b + self.out];
        w.chunks_exact(self.inp)
            .zip(b)
            .map(|(row, bias)| bias + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
            .collect()
    }

    /// Accumulates parameter gradients into `g` and returns `dL/dx`.
    pub fn backward(&self, p: &[f64], x: &[f64], gy: &[f64], g: &mut [f64]) -> Vec<f64> {
        let mut gx = vec![0.0; self.inp];
        let w = &p[self.w..self.w + self.inp * self.out];
        for (o, &go) in gy.iter().enumerate() {
            if go == 0.0 {
                continue;
            }
            g[self.b + o] += go;
            let row = o * self.inp;
            let gw = &mut g[self.w + row..self.w + row + self.inp];
            for (gwi, xi) in gw.iter_mut().zip(x) {
                *gwi += go * xi;
            }
            for (gxi, wi) in gx.iter_mut().zip(&w[row..row + self.inp]) {
                *gxi += go * wi;
            }
        }
        gx
    }
}

const KERNEL: usize = 3;
const STRIDE: usize = 2;
const PAD: usize = 1;

/// 3×3, stride-2, zero-padded convolution over square `[ch][size][size]` maps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conv2d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub in_size: usize,
    pub out_size: usize,
    w: usize,
    b: usize,
}

impl Conv2d {
    pub fn out_len(&self) -> usize {
        self.out_ch * self.out_size * self.out_size
    }

    fn taps(&self, oy: usize, ox: usize) -> impl Iterator<Item = (usize, usize, usize, usize)> + '_ {
        (0..KERNEL).flat_map(move |ky| {
            (0..KERNEL).filter_map(move |kx| {
                let iy = (oy * STRIDE + ky) as isize - PAD as isize;
                let ix = (ox * STRIDE + kx) as isize - PAD as isize;
                let n = self.in_size as isize;
                (iy >= 0 && ix >= 0 && iy < n && ix < n).then_some((ky, kx, iy as usize, ix as usize))
            })
        })
    }

    pub fn forward(&self, p: &[f64], x: &[f64]) -> Vec<f64> {
        let (n, m) = (self.in_size, self.out_size);
        let mut y = vec![0.0; self.out_len()];
        for oc in 0..self.out_ch {
            let bias = p[self.b + oc];
            for oy in 0..m {
                for ox in 0..m {
                    let mut acc = bias;
                    for (ky, kx, iy, ix) in self.taps(oy, ox) {
                        for ic in 0..self.in_ch {
                            let wi = self.w + ((oc * self.in_ch + ic) * KERNEL + ky) * KERNEL + kx;
                            acc += p[wi] * x[(ic * n + iy) * n + ix];
                        }
                    }
                    y[(oc * m + oy) * m + ox] = acc;
                }
            }
        }
        y
    }

    pub fn backward(&self, p: &[f64], x: &[f64], gy: &[f64], g: &mut [f64]) -> Vec<f64> {
        let (n, m) = (self.in_size, self.out_size);
        let mut gx = vec![0.0; self.in_ch * n * n];
        for oc in 0..self.out_ch {
            for oy in 0..m {
                for ox in 0..m {
                    let go = gy[(oc * m + oy) * m + ox];
                    if go == 0.0 {
                        continue;
                    }
                    g[self.b + oc] += go;
                    for (ky, kx, iy, ix) in self.taps(oy, ox) {
                        for ic in 0..self.in_ch {
                            let wi = self.w + ((oc * self.in_ch + ic) * KERNEL + ky) * KERNEL + kx;
                            let xi = (ic * n + iy) * n + ix;
                            g[wi] += go * x[xi];
                            gx[xi] += go * p[wi];
                        }
                    }
                }
            }
        }
        gx
    }
}

pub fn tanh_inplace(v: &mut [f64]) {
    for x in v {
        *x = x.tanh();
    }
}

/// Backward through `y = tanh(x)` given the activations `y`.
pub fn tanh_backward(y: &[f64], gy: &[f64]) -> Vec<f64> {
    y.iter().zip(gy).map(|(y, g)| g * (1.0 - y * y)).collect()
}

pub fn add_assign(acc: &mut [f64], v: &[f64]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}
