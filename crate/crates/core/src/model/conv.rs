//! 3D convolution by im2col + GEMM, with the matching backward pass.

use serde::{Deserialize, Serialize};

/// Geometry of one convolution stage; padding is `kernel / 2` on every side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub in_dims: [usize; 3],
    pub out_dims: [usize; 3],
}

impl ConvGeom {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        in_dims: [usize; 3],
    ) -> Option<Self> {
        if kernel == 0 || stride == 0 || in_channels == 0 || out_channels == 0 {
            return None;
        }
        let pad = kernel / 2;
        let mut out_dims = [0; 3];
        for a in 0..3 {
            let padded = in_dims[a] + 2 * pad;
            if padded < kernel {
                return None;
            }
            out_dims[a] = (padded - kernel) / stride + 1;
        }
        Some(Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            in_dims,
            out_dims,
        })
    }

    pub fn pad(&self) -> usize {
        self.kernel / 2
    }

    /// Rows of the column matrix: `in_channels * kernel³`.
    pub fn col_rows(&self) -> usize {
        self.in_channels * self.kernel.pow(3)
    }

    /// Output voxels per channel.
    pub fn out_len(&self) -> usize {
        self.out_dims.iter().product()
    }

    pub fn in_len(&self) -> usize {
        self.in_dims.iter().product()
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.col_rows()
    }

    /// Flat input voxel index for every (kernel offset, output voxel) pair,
    /// `usize::MAX` where the kernel hits padding. Laid out like one channel
    /// block of the column matrix.
    pub fn taps(&self) -> Vec<usize> {
        let mut taps = Vec::with_capacity(self.kernel.pow(3) * self.out_len());
        self.for_each_tap(|src| taps.push(src));
        taps
    }

    fn for_each_tap(&self, mut f: impl FnMut(usize)) {
        let k = self.kernel;
        let pad = self.pad() as isize;
        let s = self.stride as isize;
        let [d, h, w] = self.in_dims.map(|x| x as isize);
        let [od, oh, ow] = self.out_dims;
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    for z in 0..od {
                        let iz = z as isize * s + kd as isize - pad;
                        for y in 0..oh {
                            let iy = y as isize * s + kh as isize - pad;
                            for x in 0..ow {
                                let ix = x as isize * s + kw as isize - pad;
                                let src = if iz < 0
                                    || iz >= d
                                    || iy < 0
                                    || iy >= h
                                    || ix < 0
                                    || ix >= w
                                {
                                    usize::MAX
                                } else {
                                    ((iz * h + iy) * w + ix) as usize
                                };
                                f(src);
                            }
                        }
                    }
                }
            }
        }
    }

    /// Unfolds `input` (`in_channels x in_len`) into `col` (`col_rows x out_len`).
    pub fn im2col<T: Copy + Into<f64>>(&self, taps: &[usize], input: &[T], col: &mut Vec<f64>) {
        let k3 = self.kernel.pow(3);
        let p_len = self.out_len();
        let in_len = self.in_len();
        col.clear();
        col.resize(self.col_rows() * p_len, 0.0);
        for ci in 0..self.in_channels {
            let chan = &input[ci * in_len..(ci + 1) * in_len];
            let dst = &mut col[ci * k3 * p_len..(ci + 1) * k3 * p_len];
            for (d, &src) in dst.iter_mut().zip(taps) {
                if src != usize::MAX {
                    *d = chan[src].into();
                }
            }
        }
    }

    /// Folds column gradients back onto the input grid (adjoint of `im2col`).
    pub fn col2im(&self, taps: &[usize], dcol: &[f64], dinput: &mut [f64]) {
        let k3 = self.kernel.pow(3);
        let p_len = self.out_len();
        let in_len = self.in_len();
        dinput.iter_mut().for_each(|v| *v = 0.0);
        for ci in 0..self.in_channels {
            let chan = &mut dinput[ci * in_len..(ci + 1) * in_len];
            let src_block = &dcol[ci * k3 * p_len..(ci + 1) * k3 * p_len];
            for (&g, &dst) in src_block.iter().zip(taps) {
                if dst != usize::MAX {
                    chan[dst] += g;
                }
            }
        }
    }
}

/// `c = a · b + beta · c` on row-major matrices; `a` is `m x k` (or `k x m`
/// when `trans_a`), `b` is `k x n` (or `n x k` when `trans_b`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if trans_a {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: slice lengths checked above match the strides passed.
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
