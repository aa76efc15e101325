//! Dense and convolution layers with explicit backward passes.
//!
//! Parameters are flat row-major `Vec<f64>` so optimisers and checkpoints can
//! treat every tensor alike.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, ArrayViewMut2};
use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    /// `out_dim x in_dim`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Dense {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    /// Uniform(-1/sqrt(in), 1/sqrt(in)) for weights and biases.
    pub fn uniform<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let mut d = Dense::zeros(in_dim, out_dim);
        d.weight.iter_mut().for_each(|w| *w = rng.random_range(-bound..bound));
        d.bias.iter_mut().for_each(|b| *b = rng.random_range(-bound..bound));
        d
    }

    /// He-uniform weights, zero biases.
    pub fn he<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = (6.0 / in_dim as f64).sqrt();
        let mut d = Dense::zeros(in_dim, out_dim);
        d.weight.iter_mut().for_each(|w| *w = rng.random_range(-bound..bound));
        d
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_dim);
        self.weight
            .chunks_exact(self.in_dim)
            .zip(&self.bias)
            .map(|(row, b)| b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
            .collect()
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&self, x: &[f64], dy: &[f64], gw: &mut [f64], gb: &mut [f64]) -> Vec<f64> {
        let mut dx = vec![0.0; self.in_dim];
        for (o, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            gb[o] += g;
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            let grow = &mut gw[o * self.in_dim..(o + 1) * self.in_dim];
            for i in 0..self.in_dim {
                grow[i] += g * x[i];
                dx[i] += g * row[i];
            }
        }
        dx
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// 3x3 convolution, stride 2, zero padding 1.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Conv3x3 {
    pub c_in: usize,
    pub c_out: usize,
    /// `c_out x (c_in * 9)`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

pub(crate) fn conv_out(n: usize) -> usize {
    (n - 1) / 2 + 1
}

impl Conv3x3 {
    pub fn he<R: Rng + ?Sized>(c_in: usize, c_out: usize, rng: &mut R) -> Self {
        let fan_in = c_in * 9;
        let bound = (6.0 / fan_in as f64).sqrt();
        Conv3x3 {
            c_in,
            c_out,
            weight: (0..c_out * fan_in).map(|_| rng.random_range(-bound..bound)).collect(),
            bias: vec![0.0; c_out],
        }
    }

    /// im2col for a `c_in x n x n` input: `(c_in * 9) x (m * m)`, `m = conv_out(n)`.
    pub fn im2col(&self, x: &[f64], n: usize) -> Array2<f64> {
        let m = conv_out(n);
        let mut cols = Array2::zeros((self.c_in * 9, m * m));
        for c in 0..self.c_in {
            let plane = &x[c * n * n..(c + 1) * n * n];
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = c * 9 + ky * 3 + kx;
                    let mut dst = cols.row_mut(row);
                    for oy in 0..m {
                        let iy = (2 * oy + ky) as isize - 1;
                        if iy < 0 || iy >= n as isize {
                            continue;
                        }
                        for ox in 0..m {
                            let ix = (2 * ox + kx) as isize - 1;
                            if ix < 0 || ix >= n as isize {
                                continue;
                            }
                            dst[oy * m + ox] = plane[iy as usize * n + ix as usize];
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: &Array2<f64>, n: usize) -> Vec<f64> {
        let m = conv_out(n);
        let mut dx = vec![0.0; self.c_in * n * n];
        for c in 0..self.c_in {
            let plane = &mut dx[c * n * n..(c + 1) * n * n];
            for ky in 0..3 {
                for kx in 0..3 {
                    let src = dcols.row(c * 9 + ky * 3 + kx);
                    for oy in 0..m {
                        let iy = (2 * oy + ky) as isize - 1;
                        if iy < 0 || iy >= n as isize {
                            continue;
                        }
                        for ox in 0..m {
                            let ix = (2 * ox + kx) as isize - 1;
                            if ix < 0 || ix >= n as isize {
                                continue;
                            }
                            plane[iy as usize * n + ix as usize] += src[oy * m + ox];
                        }
                    }
                }
            }
        }
        dx
    }

    fn weight_view(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.c_out, self.c_in * 9), &self.weight).expect("weight shape")
    }

    /// Pre-activation output `c_out x m x m`, flattened.
    pub fn forward_cols(&self, cols: &Array2<f64>) -> Vec<f64> {
        let mut y = self.weight_view().dot(cols);
        for (mut row, b) in y.rows_mut().into_iter().zip(&self.bias) {
            row.mapv_inplace(|v| v + b);
        }
        y.into_raw_vec_and_offset().0
    }

    /// Accumulates parameter gradients from `dy` (`c_out x m*m`); returns the
    /// input gradient when `n` is given.
    pub fn backward(
        &self,
        cols: &Array2<f64>,
        dy: &[f64],
        gw: &mut [f64],
        gb: &mut [f64],
        n: Option<usize>,
    ) -> Option<Vec<f64>> {
        let p = cols.ncols();
        let dy = ArrayView2::from_shape((self.c_out, p), dy).expect("grad shape");
        let mut gw = ArrayViewMut2::from_shape((self.c_out, self.c_in * 9), gw).expect("grad shape");
        general_mat_mul(1.0, &dy, &cols.t(), 1.0, &mut gw);
        for (g, row) in gb.iter_mut().zip(dy.rows()) {
            *g += row.sum();
        }
        n.map(|n| {
            let dcols = self.weight_view().t().dot(&dy);
            self.col2im(&dcols, n)
        })
    }
}

pub(crate) fn relu_in_place(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = x.max(0.0));
}

/// Zeroes `grad` where the forward pre-activation was not positive.
pub(crate) fn relu_backward(pre: &[f64], grad: &mut [f64]) {
    for (g, &z) in grad.iter_mut().zip(pre) {
        if z <= 0.0 {
            *g = 0.0;
        }
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
