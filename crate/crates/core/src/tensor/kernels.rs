//! Raw numeric kernels shared by the tape and the off-tape fast paths.

use super::Tensor;
use crate::error::{Error, Result};

/// `[m,k] x [k,n] -> [m,n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k, n) = check_matmul(a, b)?;
    let mut out = vec![0.0; m * n];
    matmul_into(a.data(), b.data(), &mut out, m, k, n);
    Ok(Tensor::raw(vec![m, n], out))
}

fn check_matmul(a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize)> {
    if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::shape(
            "matmul",
            format!("{:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    Ok((a.shape()[0], a.shape()[1], b.shape()[1]))
}

/// Accumulating row-major product `out += a * b`.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `a * b^T` for `a: [m,k]`, `b: [n,k]`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[1] {
        return Err(Error::shape(
            "matmul_nt",
            format!("{:?} x {:?}^T", a.shape(), b.shape()),
        ));
    }
    matmul(a, &transpose(b)?)
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    if a.ndim() != 2 {
        return Err(Error::shape("transpose", format!("{:?}", a.shape())));
    }
    let (r, c) = (a.shape()[0], a.shape()[1]);
    let src = a.data();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = src[i * c + j];
        }
    }
    Ok(Tensor::raw(vec![c, r], out))
}

/// Geometry of a 2-D convolution over NCHW input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], weight: &[usize], stride: usize, padding: usize) -> Result<Self> {
        if input.len() != 4 || weight.len() != 4 || input[1] != weight[1] || stride == 0 {
            return Err(Error::shape(
                "conv2d",
                format!("input {input:?}, weight {weight:?}, stride {stride}"),
            ));
        }
        let (h, w) = (input[2] + 2 * padding, input[3] + 2 * padding);
        if weight[2] > h || weight[3] > w {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {weight:?} larger than padded input {input:?}"),
            ));
        }
        Ok(Self {
            batch: input[0],
            in_ch: input[1],
            height: input[2],
            width: input[3],
            out_ch: weight[0],
            kh: weight[2],
            kw: weight[3],
            stride,
            padding,
            out_h: (h - weight[2]) / stride + 1,
            out_w: (w - weight[3]) / stride + 1,
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_ch, self.out_h, self.out_w]
    }

    fn patch_len(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Source pixel for a column entry, or `None` inside the zero padding.
    #[inline]
    fn source(&self, row: usize, pos: usize) -> Option<(usize, usize, usize)> {
        let c = row / (self.kh * self.kw);
        let r = row % (self.kh * self.kw);
        let (ki, kj) = (r / self.kw, r % self.kw);
        let (oi, oj) = (pos / self.out_w, pos % self.out_w);
        let i = (oi * self.stride + ki) as isize - self.padding as isize;
        let j = (oj * self.stride + kj) as isize - self.padding as isize;
        if i < 0 || j < 0 || i >= self.height as isize || j >= self.width as isize {
            None
        } else {
            Some((c, i as usize, j as usize))
        }
    }
}

/// Unfolds one image `[C,H,W]` into columns `[C*kh*kw, out_h*out_w]`.
fn im2col(g: &ConvGeometry, image: &[f64]) -> Vec<f64> {
    let (rows, cols) = (g.patch_len(), g.positions());
    let mut out = vec![0.0; rows * cols];
    for row in 0..rows {
        for pos in 0..cols {
            if let Some((c, i, j)) = g.source(row, pos) {
                out[row * cols + pos] = image[(c * g.height + i) * g.width + j];
            }
        }
    }
    out
}

/// Folds column gradients back onto one image, accumulating overlaps.
fn col2im(g: &ConvGeometry, cols_data: &[f64], image: &mut [f64]) {
    let (rows, cols) = (g.patch_len(), g.positions());
    for row in 0..rows {
        for pos in 0..cols {
            if let Some((c, i, j)) = g.source(row, pos) {
                image[(c * g.height + i) * g.width + j] += cols_data[row * cols + pos];
            }
        }
    }
}

/// Convolution without bias via im2col + GEMM.
pub fn conv2d(input: &Tensor, weight: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let g = ConvGeometry::new(input.shape(), weight.shape(), stride, padding)?;
    let img_len = g.in_ch * g.height * g.width;
    let out_len = g.out_ch * g.positions();
    let mut out = vec![0.0; g.batch * out_len];
    for n in 0..g.batch {
        let cols = im2col(&g, &input.data()[n * img_len..(n + 1) * img_len]);
        matmul_into(
            weight.data(),
            &cols,
            &mut out[n * out_len..(n + 1) * out_len],
            g.out_ch,
            g.patch_len(),
            g.positions(),
        );
    }
    Ok(Tensor::raw(g.output_shape(), out))
}

/// Gradients of [`conv2d`] with respect to input and weight.
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<(Tensor, Tensor)> {
    let g = ConvGeometry::new(input.shape(), weight.shape(), stride, padding)?;
    let img_len = g.in_ch * g.height * g.width;
    let out_len = g.out_ch * g.positions();
    let (pl, np) = (g.patch_len(), g.positions());
    let w_t = transpose(&weight.reshape(&[g.out_ch, pl])?)?;
    let mut grad_in = vec![0.0; input.len()];
    let mut grad_w = vec![0.0; weight.len()];
    for n in 0..g.batch {
        let go = &grad_out.data()[n * out_len..(n + 1) * out_len];
        let cols = im2col(&g, &input.data()[n * img_len..(n + 1) * img_len]);
        // dW += dOut [O, P] * cols^T [P, CKK]
        let cols_t = transpose(&Tensor::raw(vec![pl, np], cols))?;
        matmul_into(go, cols_t.data(), &mut grad_w, g.out_ch, np, pl);
        // dcols = W^T [CKK, O] * dOut [O, P]
        let mut dcols = vec![0.0; pl * np];
        matmul_into(w_t.data(), go, &mut dcols, pl, g.out_ch, np);
        col2im(&g, &dcols, &mut grad_in[n * img_len..(n + 1) * img_len]);
    }
    Ok((
        Tensor::raw(input.shape().to_vec(), grad_in),
        Tensor::raw(weight.shape().to_vec(), grad_w),
    ))
}
