//! Cross-correlation kernels behind the `conv2d` graph op.
//!
//! Forward and both backward passes lower to GEMM via im2col / col2im. Work
//! is parallelized over batch images only; every floating-point reduction
//! happens in a fixed sequential order, so results do not depend on the
//! number of worker threads.

use rayon::prelude::*;

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        n: usize,
        cin: usize,
        h: usize,
        w: usize,
        cout: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        ConvGeom {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        }
    }

    fn ckk(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn ohw(&self) -> usize {
        self.oh * self.ow
    }

    /// 1×1 stride-1 unpadded convs skip im2col entirely: the column matrix
    /// is the input plane itself.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Row-major GEMM: C = alpha·A·B + beta·C with explicit strides so
/// transposed views need no copies.
#[allow(clippy::too_many_arguments)]
fn dgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
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

/// Expands one image into the column matrix (cin·kh·kw) × (oh·ow).
fn im2col(g: &ConvGeom, image: &[f64], col: &mut [f64]) {
    let ohw = g.ohw();
    let mut row = 0;
    for ci in 0..g.cin {
        let plane = &image[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let dst = &mut col[row * ohw..(row + 1) * ohw];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let dst_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        dst_row.fill(0.0);
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-adds a column-matrix gradient back into one image gradient.
fn col2im_add(g: &ConvGeom, col: &[f64], image: &mut [f64]) {
    let ohw = g.ohw();
    let mut row = 0;
    for ci in 0..g.cin {
        let plane = &mut image[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let src = &col[row * ohw..(row + 1) * ohw];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let src_row = &src[oy * g.ow..(oy + 1) * g.ow];
                    for (ox, &s) in src_row.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst_row[ix as usize] += s;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

pub(crate) fn forward(g: &ConvGeom, input: &[f64], weight: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let (ckk, ohw) = (g.ckk(), g.ohw());
    let in_stride = g.cin * g.h * g.w;
    let mut out = vec![0.0; g.n * g.cout * ohw];
    out.par_chunks_mut(g.cout * ohw)
        .enumerate()
        .for_each(|(i, out_n)| {
            match bias {
                Some(b) => {
                    for co in 0..g.cout {
                        out_n[co * ohw..(co + 1) * ohw].fill(b[co]);
                    }
                }
                None => out_n.fill(0.0),
            }
            let image = &input[i * in_stride..(i + 1) * in_stride];
            if g.is_pointwise() {
                dgemm(g.cout, ckk, ohw, weight, ckk as isize, 1, image, ohw as isize, 1, 1.0, out_n);
            } else {
                let mut col = vec![0.0; ckk * ohw];
                im2col(g, image, &mut col);
                dgemm(g.cout, ckk, ohw, weight, ckk as isize, 1, &col, ohw as isize, 1, 1.0, out_n);
            }
        });
    out
}

pub(crate) fn backward_input(g: &ConvGeom, weight: &[f64], gout: &[f64]) -> Vec<f64> {
    let (ckk, ohw) = (g.ckk(), g.ohw());
    let in_stride = g.cin * g.h * g.w;
    let mut dinput = vec![0.0; g.n * in_stride];
    dinput
        .par_chunks_mut(in_stride)
        .enumerate()
        .for_each(|(i, dx)| {
            let dy = &gout[i * g.cout * ohw..(i + 1) * g.cout * ohw];
            if g.is_pointwise() {
                // dX = Wᵀ · dY lands directly on the image layout.
                dgemm(ckk, g.cout, ohw, weight, 1, ckk as isize, dy, ohw as isize, 1, 0.0, dx);
            } else {
                let mut dcol = vec![0.0; ckk * ohw];
                dgemm(
                    ckk,
                    g.cout,
                    ohw,
                    weight,
                    1,
                    ckk as isize,
                    dy,
                    ohw as isize,
                    1,
                    0.0,
                    &mut dcol,
                );
                col2im_add(g, &dcol, dx);
            }
        });
    dinput
}

pub(crate) fn backward_weight(g: &ConvGeom, input: &[f64], gout: &[f64]) -> Vec<f64> {
    let (ckk, ohw) = (g.ckk(), g.ohw());
    let in_stride = g.cin * g.h * g.w;
    // Per-image partials computed in parallel, then reduced in batch order so
    // the accumulated weight gradient is independent of scheduling.
    let partials: Vec<Vec<f64>> = (0..g.n)
        .into_par_iter()
        .map(|i| {
            let image = &input[i * in_stride..(i + 1) * in_stride];
            let dy = &gout[i * g.cout * ohw..(i + 1) * g.cout * ohw];
            let mut dw = vec![0.0; g.cout * ckk];
            if g.is_pointwise() {
                dgemm(g.cout, ohw, ckk, dy, ohw as isize, 1, image, 1, ohw as isize, 0.0, &mut dw);
            } else {
                let mut col = vec![0.0; ckk * ohw];
                im2col(g, image, &mut col);
                dgemm(g.cout, ohw, ckk, dy, ohw as isize, 1, &col, 1, ohw as isize, 0.0, &mut dw);
            }
            dw
        })
        .collect();
    let mut dweight = vec![0.0; g.cout * ckk];
    for partial in partials {
        for (d, p) in dweight.iter_mut().zip(&partial) {
            *d += p;
        }
    }
    dweight
}

pub(crate) fn backward_bias(g: &ConvGeom, gout: &[f64]) -> Vec<f64> {
    let ohw = g.ohw();
    let mut db = vec![0.0; g.cout];
    db.par_iter_mut().enumerate().for_each(|(co, d)| {
        let mut acc = 0.0;
        for i in 0..g.n {
            let base = (i * g.cout + co) * ohw;
            acc += gout[base..base + ohw].iter().sum::<f64>();
        }
        *d = acc;
    });
    db
}
