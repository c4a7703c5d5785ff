//! 2D convolution via im2col + GEMM. 1D convolution is the `H = 1` case.
//!
//! Padding is "same-style" everywhere: along an axis of length `L` with
//! stride `s` and kernel `k` the output has `ceil(L / s)` positions and the
//! total padding `max((out - 1) * s + k - L, 0)` is split with the smaller
//! half on the leading side.

use crate::error::{NdError, Result};
use crate::float::{gemm, Float, Mat};

/// Output length and leading pad for one axis.
pub fn same_padding(len: usize, kernel: usize, stride: usize) -> (usize, usize) {
    let out = len.div_ceil(stride);
    let needed = ((out - 1) * stride + kernel).saturating_sub(len);
    (out, needed / 2)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn same(
        input: [usize; 4],
        cout: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
    ) -> Result<Self> {
        let [n, cin, h, w] = input;
        if kernel.0 == 0 || kernel.1 == 0 || stride.0 == 0 || stride.1 == 0 {
            return Err(NdError::InvalidArgument("kernel and stride must be positive".into()));
        }
        let (ho, pad_top) = same_padding(h, kernel.0, stride.0);
        let (wo, pad_left) = same_padding(w, kernel.1, stride.1);
        Ok(Self {
            n,
            cin,
            h,
            w,
            cout,
            kh: kernel.0,
            kw: kernel.1,
            sh: stride.0,
            sw: stride.1,
            pad_top,
            pad_left,
            ho,
            wo,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn out_positions(&self) -> usize {
        self.ho * self.wo
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.n, self.cout, self.ho, self.wo]
    }

    /// Input index feeding output `(oy, ox)` at kernel tap `(ky, kx)`.
    #[inline]
    fn src(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let iy = (oy * self.sh + ky).checked_sub(self.pad_top)?;
        let ix = (ox * self.sw + kx).checked_sub(self.pad_left)?;
        (iy < self.h && ix < self.w).then_some((iy, ix))
    }
}

/// Columns `[cin*kh*kw, n*ho*wo]`.
pub fn im2col<F: Float>(x: &[F], g: &ConvGeom) -> Vec<F> {
    let p = g.out_positions();
    let np = g.n * p;
    let mut cols = vec![F::zero(); g.patch_len() * np];
    for c in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * np..(row + 1) * np];
                for n in 0..g.n {
                    let plane = &x[(n * g.cin + c) * g.h * g.w..][..g.h * g.w];
                    for oy in 0..g.ho {
                        for ox in 0..g.wo {
                            if let Some((iy, ix)) = g.src(oy, ox, ky, kx) {
                                dst[n * p + oy * g.wo + ox] = plane[iy * g.w + ix];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<F: Float>(cols: &[F], g: &ConvGeom, dx: &mut [F]) {
    let p = g.out_positions();
    let np = g.n * p;
    for c in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * np..(row + 1) * np];
                for n in 0..g.n {
                    let plane = &mut dx[(n * g.cin + c) * g.h * g.w..][..g.h * g.w];
                    for oy in 0..g.ho {
                        for ox in 0..g.wo {
                            if let Some((iy, ix)) = g.src(oy, ox, ky, kx) {
                                plane[iy * g.w + ix] += src[n * p + oy * g.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<F: Float>(x: &[F], w: &[F], b: Option<&[F]>, g: &ConvGeom) -> Vec<F> {
    let p = g.out_positions();
    let np = g.n * p;
    let cols = im2col(x, g);
    let mut mat = vec![F::zero(); g.cout * np];
    gemm(
        Mat::new(w, g.cout, g.patch_len()),
        Mat::new(&cols, g.patch_len(), np),
        &mut mat,
        false,
    );
    let mut out = vec![F::zero(); g.n * g.cout * p];
    for co in 0..g.cout {
        let bias = b.map_or(F::zero(), |b| b[co]);
        for n in 0..g.n {
            let src = &mat[co * np + n * p..][..p];
            let dst = &mut out[(n * g.cout + co) * p..][..p];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s + bias;
            }
        }
    }
    out
}

pub struct ConvGrads<F> {
    pub dx: Option<Vec<F>>,
    pub dw: Option<Vec<F>>,
    pub db: Option<Vec<F>>,
}

pub fn conv2d_backward<F: Float>(
    x: &[F],
    w: &[F],
    dy: &[F],
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> ConvGrads<F> {
    let p = g.out_positions();
    let np = g.n * p;
    let k = g.patch_len();
    // dy [n, cout, p] -> [cout, n*p]
    let mut dmat = vec![F::zero(); g.cout * np];
    for n in 0..g.n {
        for co in 0..g.cout {
            dmat[co * np + n * p..][..p].copy_from_slice(&dy[(n * g.cout + co) * p..][..p]);
        }
    }
    let db = need_db.then(|| {
        (0..g.cout)
            .map(|co| dmat[co * np..(co + 1) * np].iter().copied().sum())
            .collect()
    });
    let dw = need_dw.then(|| {
        let cols = im2col(x, g);
        let mut dw = vec![F::zero(); g.cout * k];
        gemm(
            Mat::new(&dmat, g.cout, np),
            Mat::new(&cols, k, np).t(),
            &mut dw,
            false,
        );
        dw
    });
    let dx = need_dx.then(|| {
        let mut dcols = vec![F::zero(); k * np];
        gemm(
            Mat::new(w, g.cout, k).t(),
            Mat::new(&dmat, g.cout, np),
            &mut dcols,
            false,
        );
        let mut dx = vec![F::zero(); g.n * g.cin * g.h * g.w];
        col2im(&dcols, g, &mut dx);
        dx
    });
    ConvGrads { dx, dw, db }
}
