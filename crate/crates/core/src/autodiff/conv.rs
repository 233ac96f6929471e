//! Cross-correlation kernels (im2col + GEMM).

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kh) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kw) / self.stride + 1
    }

    fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.out_height() * self.out_width()
    }

    /// 1×1, stride 1, no padding: the input plane already is the column matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }
}

/// `c = a · b + beta · c` for row-major operands, with optional transposes.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths match the (m, k, n) extents checked above, and the
    // strides address exactly those row-major layouts.
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

fn im2col(plane: &[f64], g: &ConvGeometry, cols: &mut [f64]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let (h, w) = (g.height as isize, g.width as isize);
    for c in 0..g.channels {
        let src = &plane[c * g.height * g.width..(c + 1) * g.height * g.width];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let y = (oy * g.stride + i) as isize - g.padding as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if y < 0 || y >= h {
                        line.fill(0.0);
                        continue;
                    }
                    let src_row = &src[y as usize * g.width..(y as usize + 1) * g.width];
                    for (ox, out) in line.iter_mut().enumerate() {
                        let x = (ox * g.stride + j) as isize - g.padding as isize;
                        *out = if x < 0 || x >= w { 0.0 } else { src_row[x as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeometry, plane: &mut [f64]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let (h, w) = (g.height as isize, g.width as isize);
    for c in 0..g.channels {
        let dst = &mut plane[c * g.height * g.width..(c + 1) * g.height * g.width];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let y = (oy * g.stride + i) as isize - g.padding as isize;
                    if y < 0 || y >= h {
                        continue;
                    }
                    let dst_row = &mut dst[y as usize * g.width..(y as usize + 1) * g.width];
                    for ox in 0..ow {
                        let x = (ox * g.stride + j) as isize - g.padding as isize;
                        if x >= 0 && x < w {
                            dst_row[x as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn geometry(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<ConvGeometry> {
    let (_, c, h, w) = input.dims4("conv2d")?;
    let (k, wc, kh, kw) = weight.dims4("conv2d")?;
    if wc != c {
        return Err(Error::shape(
            "conv2d",
            format!("input has {c} channels, weight expects {wc}"),
        ));
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
    }
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(Error::shape("conv2d", "kernel larger than padded input"));
    }
    if let Some(b) = bias {
        if b.shape() != [k] {
            return Err(Error::shape(
                "conv2d",
                format!("bias shape {:?}, expected [{k}]", b.shape()),
            ));
        }
    }
    Ok(ConvGeometry {
        channels: c,
        height: h,
        width: w,
        kh,
        kw,
        stride,
        padding,
    })
}

pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let g = geometry(input, weight, bias, stride, padding)?;
    let n = input.shape()[0];
    let k = weight.shape()[0];
    let (rows, cols_n) = (g.col_rows(), g.col_cols());
    let plane = g.channels * g.height * g.width;
    let mut out = vec![0.0; n * k * cols_n];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; rows * cols_n] };
    for s in 0..n {
        let x = &input.data()[s * plane..(s + 1) * plane];
        let dst = &mut out[s * k * cols_n..(s + 1) * k * cols_n];
        if let Some(b) = bias {
            for (row, &bv) in dst.chunks_mut(cols_n).zip(b.data()) {
                row.fill(bv);
            }
        }
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        if g.is_pointwise() {
            gemm(k, rows, cols_n, weight.data(), false, x, false, beta, dst);
        } else {
            im2col(x, &g, &mut cols);
            gemm(k, rows, cols_n, weight.data(), false, &cols, false, beta, dst);
        }
    }
    Tensor::from_parts(vec![n, k, g.out_height(), g.out_width()], out).ensure_finite("conv2d")
}

pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    padding: usize,
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
) -> Result<ConvGrads> {
    let g = geometry(input, weight, None, stride, padding)?;
    let n = input.shape()[0];
    let k = weight.shape()[0];
    let (rows, cols_n) = (g.col_rows(), g.col_cols());
    let plane = g.channels * g.height * g.width;
    let mut dx = need_input.then(|| vec![0.0; input.len()]);
    let mut dw = need_weight.then(|| vec![0.0; weight.len()]);
    let mut db = need_bias.then(|| vec![0.0; k]);
    let mut cols = vec![0.0; rows * cols_n];
    for s in 0..n {
        let dy = &grad_out.data()[s * k * cols_n..(s + 1) * k * cols_n];
        if let Some(db) = db.as_mut() {
            for (acc, row) in db.iter_mut().zip(dy.chunks(cols_n)) {
                *acc += row.iter().sum::<f64>();
            }
        }
        let x = &input.data()[s * plane..(s + 1) * plane];
        if let Some(dw) = dw.as_mut() {
            if g.is_pointwise() {
                gemm(k, cols_n, rows, dy, false, x, true, 1.0, dw);
            } else {
                im2col(x, &g, &mut cols);
                gemm(k, cols_n, rows, dy, false, &cols, true, 1.0, dw);
            }
        }
        if let Some(dx) = dx.as_mut() {
            let dst = &mut dx[s * plane..(s + 1) * plane];
            if g.is_pointwise() {
                gemm(rows, k, cols_n, weight.data(), true, dy, false, 0.0, dst);
            } else {
                gemm(rows, k, cols_n, weight.data(), true, dy, false, 0.0, &mut cols);
                col2im(&cols, &g, dst);
            }
        }
    }
    let finish = |v: Option<Vec<f64>>, shape: &[usize]| -> Result<Option<Tensor>> {
        v.map(|d| Tensor::from_parts(shape.to_vec(), d).ensure_finite("conv2d backward"))
            .transpose()
    };
    Ok(ConvGrads {
        input: finish(dx, input.shape())?,
        weight: finish(dw, weight.shape())?,
        bias: finish(db, &[k])?,
    })
}
