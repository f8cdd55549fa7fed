//! Raw numeric kernels shared by the differentiable ops: a strided GEMM
//! wrapper and im2col-based grouped convolution over up to three spatial
//! axes.

use super::tensor::Float;
use crate::error::{invalid, Result};

/// `C = alpha * A·B + beta * C` with arbitrary row/column strides (in
/// elements). Shapes: A is m×k, B is k×n, C is m×n.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[Float],
    (rsa, csa): (usize, usize),
    b: &[Float],
    (rsb, csb): (usize, usize),
    beta: Float,
    c: &mut [Float],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let span = |rows: usize, cols: usize, rs: usize, cs: usize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs + (cols - 1) * cs + 1
        }
    };
    assert!(span(m, k, rsa, csa) <= a.len(), "gemm: A out of bounds");
    assert!(span(k, n, rsb, csb) <= b.len(), "gemm: B out of bounds");
    assert!(span(m, n, rsc, csc) <= c.len(), "gemm: C out of bounds");
    // SAFETY: the three assertions above guarantee every element addressed
    // through the given strides lies inside the corresponding slice, and C
    // is uniquely borrowed.
    unsafe {
        #[cfg(not(feature = "f64"))]
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
        #[cfg(feature = "f64")]
        matrixmultiply::dgemm(
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

/// Stride, dilation, zero padding (per spatial axis) and channel groups of a
/// convolution. Axes are ordered (depth, height, width); lower-rank
/// convolutions only use the trailing axes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvParams {
    pub stride: [usize; 3],
    pub dilation: [usize; 3],
    pub padding: [usize; 3],
    pub groups: usize,
}

impl Default for ConvParams {
    fn default() -> Self {
        Self {
            stride: [1; 3],
            dilation: [1; 3],
            padding: [0; 3],
            groups: 1,
        }
    }
}

/// Resolved geometry of one convolution call, with every tensor viewed as
/// 5-D (`[N, C, D, H, W]`).
#[derive(Clone, Debug)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub cin: usize,
    pub cout: usize,
    pub groups: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub output: [usize; 3],
    pub stride: [usize; 3],
    pub dilation: [usize; 3],
    pub padding: [usize; 3],
}

impl ConvDims {
    pub fn new(x: [usize; 5], w: [usize; 5], p: &ConvParams) -> Result<Self> {
        let [n, cin, d, h, wd] = x;
        let [cout, cin_g, kd, kh, kw] = w;
        if p.groups == 0 || cin % p.groups != 0 || cout % p.groups != 0 {
            return Err(invalid!(
                "conv: {cin} input / {cout} output channels not divisible by {} groups",
                p.groups
            ));
        }
        if cin / p.groups != cin_g {
            return Err(invalid!(
                "conv: weight expects {cin_g} channels per group, input provides {}",
                cin / p.groups
            ));
        }
        let input = [d, h, wd];
        let kernel = [kd, kh, kw];
        let mut output = [0; 3];
        for ax in 0..3 {
            if p.stride[ax] == 0 || p.dilation[ax] == 0 {
                return Err(invalid!("conv: stride and dilation must be positive"));
            }
            let span = p.dilation[ax] * (kernel[ax] - 1) + 1;
            let padded = input[ax] + 2 * p.padding[ax];
            if padded < span {
                return Err(invalid!(
                    "conv: padded length {padded} shorter than dilated kernel span {span}"
                ));
            }
            output[ax] = (padded - span) / p.stride[ax] + 1;
        }
        Ok(Self {
            n,
            cin,
            cout,
            groups: p.groups,
            input,
            kernel,
            output,
            stride: p.stride,
            dilation: p.dilation,
            padding: p.padding,
        })
    }

    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }

    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }

    fn kvol(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Rows of the im2col matrix for one group.
    fn rows(&self) -> usize {
        self.cin_g() * self.kvol()
    }

    fn in_vol(&self) -> usize {
        self.input.iter().product()
    }

    pub fn out_vol(&self) -> usize {
        self.output.iter().product()
    }

    fn is_pointwise(&self) -> bool {
        self.kvol() == 1 && self.stride == [1; 3] && self.padding == [0; 3]
    }

    /// Fills `cols` (`rows × out_vol`) with the receptive-field patches of
    /// one sample and one group.
    fn im2col(&self, x_n: &[Float], g: usize, cols: &mut [Float]) {
        let [o0, o1, o2] = self.output;
        let [i0, i1, i2] = self.input;
        let [k0, k1, k2] = self.kernel;
        let p = self.out_vol();
        let cin_g = self.cin_g();
        for c in 0..cin_g {
            let xc = &x_n[(g * cin_g + c) * self.in_vol()..][..self.in_vol()];
            for a in 0..k0 {
                for b in 0..k1 {
                    for e in 0..k2 {
                        let row = ((c * k0 + a) * k1 + b) * k2 + e;
                        let dst = &mut cols[row * p..][..p];
                        for z in 0..o0 {
                            let iz = (z * self.stride[0] + a * self.dilation[0]) as isize
                                - self.padding[0] as isize;
                            let zbase = z * o1 * o2;
                            if iz < 0 || iz >= i0 as isize {
                                dst[zbase..zbase + o1 * o2].fill(0.0);
                                continue;
                            }
                            for y in 0..o1 {
                                let iy = (y * self.stride[1] + b * self.dilation[1]) as isize
                                    - self.padding[1] as isize;
                                let ybase = zbase + y * o2;
                                if iy < 0 || iy >= i1 as isize {
                                    dst[ybase..ybase + o2].fill(0.0);
                                    continue;
                                }
                                let src = &xc[(iz as usize * i1 + iy as usize) * i2..][..i2];
                                for (xo, d) in dst[ybase..ybase + o2].iter_mut().enumerate() {
                                    let ix = (xo * self.stride[2] + e * self.dilation[2]) as isize
                                        - self.padding[2] as isize;
                                    *d = if ix < 0 || ix >= i2 as isize {
                                        0.0
                                    } else {
                                        src[ix as usize]
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`]: scatters-adds `cols` into `dx_n`.
    fn col2im(&self, cols: &[Float], g: usize, dx_n: &mut [Float]) {
        let [o0, o1, o2] = self.output;
        let [i0, i1, i2] = self.input;
        let [k0, k1, k2] = self.kernel;
        let p = self.out_vol();
        let cin_g = self.cin_g();
        let in_vol = self.in_vol();
        for c in 0..cin_g {
            let dxc = &mut dx_n[(g * cin_g + c) * in_vol..][..in_vol];
            for a in 0..k0 {
                for b in 0..k1 {
                    for e in 0..k2 {
                        let row = ((c * k0 + a) * k1 + b) * k2 + e;
                        let src = &cols[row * p..][..p];
                        for z in 0..o0 {
                            let iz = (z * self.stride[0] + a * self.dilation[0]) as isize
                                - self.padding[0] as isize;
                            if iz < 0 || iz >= i0 as isize {
                                continue;
                            }
                            for y in 0..o1 {
                                let iy = (y * self.stride[1] + b * self.dilation[1]) as isize
                                    - self.padding[1] as isize;
                                if iy < 0 || iy >= i1 as isize {
                                    continue;
                                }
                                let dst = &mut dxc[(iz as usize * i1 + iy as usize) * i2..][..i2];
                                let base = (z * o1 + y) * o2;
                                for xo in 0..o2 {
                                    let ix = (xo * self.stride[2] + e * self.dilation[2]) as isize
                                        - self.padding[2] as isize;
                                    if ix >= 0 && ix < i2 as isize {
                                        dst[ix as usize] += src[base + xo];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &[Float], w: &[Float], bias: Option<&[Float]>) -> Vec<Float> {
        let p = self.out_vol();
        let rows = self.rows();
        let cout_g = self.cout_g();
        let in_sample = self.cin * self.in_vol();
        let mut y = vec![0.0; self.n * self.cout * p];
        let mut cols = if self.is_pointwise() {
            Vec::new()
        } else {
            vec![0.0; rows * p]
        };
        for n in 0..self.n {
            let x_n = &x[n * in_sample..][..in_sample];
            let y_n = &mut y[n * self.cout * p..][..self.cout * p];
            for g in 0..self.groups {
                let b_mat: &[Float] = if self.is_pointwise() {
                    &x_n[g * rows * p..][..rows * p]
                } else {
                    self.im2col(x_n, g, &mut cols);
                    &cols
                };
                gemm(
                    cout_g,
                    rows,
                    p,
                    &w[g * cout_g * rows..][..cout_g * rows],
                    (rows, 1),
                    b_mat,
                    (p, 1),
                    0.0,
                    &mut y_n[g * cout_g * p..][..cout_g * p],
                    (p, 1),
                );
            }
            if let Some(bias) = bias {
                for (co, chunk) in y_n.chunks_exact_mut(p).enumerate() {
                    let b = bias[co];
                    chunk.iter_mut().for_each(|v| *v += b);
                }
            }
        }
        y
    }

    /// Returns `(dx, dw, db)`; each is only computed when requested.
    pub fn backward(
        &self,
        x: &[Float],
        w: &[Float],
        dy: &[Float],
        need: (bool, bool, bool),
    ) -> (Option<Vec<Float>>, Option<Vec<Float>>, Option<Vec<Float>>) {
        let (need_dx, need_dw, need_db) = need;
        let p = self.out_vol();
        let rows = self.rows();
        let cout_g = self.cout_g();
        let in_sample = self.cin * self.in_vol();
        let mut dx = need_dx.then(|| vec![0.0; x.len()]);
        let mut dw = need_dw.then(|| vec![0.0; w.len()]);
        let pointwise = self.is_pointwise();
        let mut cols = if pointwise || !need_dw {
            Vec::new()
        } else {
            vec![0.0; rows * p]
        };
        let mut dcols = if need_dx { vec![0.0; rows * p] } else { Vec::new() };
        if need_dx || need_dw {
            for n in 0..self.n {
                let x_n = &x[n * in_sample..][..in_sample];
                let dy_n = &dy[n * self.cout * p..][..self.cout * p];
                for g in 0..self.groups {
                    let dy_g = &dy_n[g * cout_g * p..][..cout_g * p];
                    if let Some(dw) = dw.as_mut() {
                        let b_mat: &[Float] = if pointwise {
                            &x_n[g * rows * p..][..rows * p]
                        } else {
                            self.im2col(x_n, g, &mut cols);
                            &cols
                        };
                        // dW_g += dY_g · colsᵀ
                        gemm(
                            cout_g,
                            p,
                            rows,
                            dy_g,
                            (p, 1),
                            b_mat,
                            (1, p),
                            1.0,
                            &mut dw[g * cout_g * rows..][..cout_g * rows],
                            (rows, 1),
                        );
                    }
                    if let Some(dx) = dx.as_mut() {
                        let dx_n = &mut dx[n * in_sample..][..in_sample];
                        let w_g = &w[g * cout_g * rows..][..cout_g * rows];
                        if pointwise {
                            gemm(
                                rows,
                                cout_g,
                                p,
                                w_g,
                                (1, rows),
                                dy_g,
                                (p, 1),
                                1.0,
                                &mut dx_n[g * rows * p..][..rows * p],
                                (p, 1),
                            );
                        } else {
                            gemm(
                                rows,
                                cout_g,
                                p,
                                w_g,
                                (1, rows),
                                dy_g,
                                (p, 1),
                                0.0,
                                &mut dcols,
                                (p, 1),
                            );
                            self.col2im(&dcols, g, dx_n);
                        }
                    }
                }
            }
        }
        let db = need_db.then(|| {
            let mut db = vec![0.0; self.cout];
            for n in 0..self.n {
                for (co, acc) in db.iter_mut().enumerate() {
                    let chunk = &dy[(n * self.cout + co) * p..][..p];
                    *acc += chunk.iter().sum::<Float>();
                }
            }
            db
        });
        (dx, dw, db)
    }
}
