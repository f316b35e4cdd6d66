//! 3-D convolution (im2col + gemm) and nearest-neighbour upsampling on
//! `[N, C, D, H, W]` tensors.

use crate::error::{invalid, shape_err, Result};
use crate::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ConvGeom {
    cin: usize,
    dims: [usize; 3],
    k: usize,
    stride: usize,
    pad: usize,
    out: [usize; 3],
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.cin * self.k * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.out.iter().product()
    }

    fn in_volume(&self) -> usize {
        self.dims.iter().product()
    }

    /// Visits every (column-row, column, input offset) triple that reads a
    /// valid (non-padding) input voxel.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let [d, h, w] = self.dims;
        let [od, oh, ow] = self.out;
        let k = self.k;
        let cols = self.col_cols();
        for c in 0..self.cin {
            for kz in 0..k {
                for ky in 0..k {
                    for kx in 0..k {
                        let row = ((c * k + kz) * k + ky) * k + kx;
                        for z in 0..od {
                            let iz = (z * self.stride + kz) as isize - self.pad as isize;
                            if iz < 0 || iz >= d as isize {
                                continue;
                            }
                            for y in 0..oh {
                                let iy = (y * self.stride + ky) as isize - self.pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let in_base = ((c * d + iz as usize) * h + iy as usize) * w;
                                let col_base = row * cols + (z * oh + y) * ow;
                                for x in 0..ow {
                                    let ix = (x * self.stride + kx) as isize - self.pad as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    f(col_base + x, in_base + ix as usize, row);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn im2col<T: Scalar>(&self, input: &[T], cols: &mut [T]) {
        cols.iter_mut().for_each(|v| *v = T::zero());
        self.for_each_tap(|ci, ii, _| cols[ci] = input[ii]);
    }

    fn col2im<T: Scalar>(&self, cols: &[T], grad_in: &mut [T]) {
        self.for_each_tap(|ci, ii, _| grad_in[ii] += cols[ci]);
    }
}

impl<T: Scalar> Tensor<T> {
    /// Cubic-kernel 3-D convolution. `weight` is `[Cout, Cin, k, k, k]`,
    /// `bias` is `[Cout]`.
    pub fn conv3d(&self, weight: &Tensor<T>, bias: Option<&Tensor<T>>, stride: usize, pad: usize) -> Result<Tensor<T>> {
        let xs = self.shape();
        let ws = weight.shape();
        if xs.len() != 5 || ws.len() != 5 {
            return shape_err("conv3d", format!("x {xs:?}, w {ws:?}"));
        }
        let (n, cin) = (xs[0], xs[1]);
        let (cout, k) = (ws[0], ws[2]);
        if ws[1] != cin || ws[3] != k || ws[4] != k {
            return shape_err("conv3d", format!("x {xs:?}, w {ws:?}"));
        }
        if stride == 0 || k == 0 {
            return invalid("conv3d", "stride and kernel must be positive");
        }
        if let Some(b) = bias {
            if b.shape() != [cout] {
                return shape_err("conv3d", format!("bias {:?} for {cout} channels", b.shape()));
            }
        }
        let dims = [xs[2], xs[3], xs[4]];
        let mut out = [0usize; 3];
        for i in 0..3 {
            if dims[i] + 2 * pad < k {
                return shape_err("conv3d", format!("kernel {k} larger than padded input {xs:?}"));
            }
            out[i] = (dims[i] + 2 * pad - k) / stride + 1;
        }
        let geom = ConvGeom {
            cin,
            dims,
            k,
            stride,
            pad,
            out,
        };
        let (rows, cols) = (geom.col_rows(), geom.col_cols());
        let in_vol = cin * geom.in_volume();
        let x = self.to_vec();
        let w = weight.to_vec();
        let mut y = vec![T::zero(); n * cout * cols];
        let mut colbuf = vec![T::zero(); rows * cols];
        for s in 0..n {
            geom.im2col(&x[s * in_vol..(s + 1) * in_vol], &mut colbuf);
            let ys = &mut y[s * cout * cols..(s + 1) * cout * cols];
            if let Some(b) = bias {
                for (plane, &bv) in ys.chunks_mut(cols).zip(b.data().iter()) {
                    plane.iter_mut().for_each(|v| *v = bv);
                }
            }
            T::gemm(
                cout,
                rows,
                cols,
                T::one(),
                &w,
                (rows as isize, 1),
                &colbuf,
                (cols as isize, 1),
                T::one(),
                ys,
                (cols as isize, 1),
            );
        }
        let mut parents = vec![self, weight];
        if let Some(b) = bias {
            parents.push(b);
        }
        let has_bias = bias.is_some();
        let out_shape = vec![n, cout, out[0], out[1], out[2]];
        Ok(Tensor::from_op(y, out_shape, &parents, move |g, need| {
            let mut gx = need[0].then(|| vec![T::zero(); n * in_vol]);
            let mut gw = need[1].then(|| vec![T::zero(); cout * rows]);
            let mut colbuf = vec![T::zero(); rows * cols];
            for s in 0..n {
                let gs = &g[s * cout * cols..(s + 1) * cout * cols];
                if let Some(gw) = gw.as_mut() {
                    geom.im2col(&x[s * in_vol..(s + 1) * in_vol], &mut colbuf);
                    T::gemm(
                        cout,
                        cols,
                        rows,
                        T::one(),
                        gs,
                        (cols as isize, 1),
                        &colbuf,
                        (1, cols as isize),
                        T::one(),
                        gw,
                        (rows as isize, 1),
                    );
                }
                if let Some(gx) = gx.as_mut() {
                    T::gemm(
                        rows,
                        cout,
                        cols,
                        T::one(),
                        &w,
                        (1, rows as isize),
                        gs,
                        (cols as isize, 1),
                        T::zero(),
                        &mut colbuf,
                        (cols as isize, 1),
                    );
                    geom.col2im(&colbuf, &mut gx[s * in_vol..(s + 1) * in_vol]);
                }
            }
            let mut grads = vec![gx, gw];
            if has_bias {
                grads.push(need[2].then(|| {
                    let mut gb = vec![T::zero(); cout];
                    for (i, plane) in g.chunks(cols).enumerate() {
                        gb[i % cout] += plane.iter().copied().sum::<T>();
                    }
                    gb
                }));
            }
            grads
        }))
    }

    /// Nearest-neighbour ×2 upsampling of the three spatial axes.
    pub fn upsample_nearest2x(&self) -> Result<Tensor<T>> {
        let xs = self.shape();
        if xs.len() != 5 {
            return shape_err("upsample_nearest2x", format!("{xs:?}"));
        }
        let planes = xs[0] * xs[1];
        let [d, h, w] = [xs[2], xs[3], xs[4]];
        let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
        let src_of = move |p: usize, z: usize, y: usize, x: usize| ((p * d + z / 2) * h + y / 2) * w + x / 2;
        let out = {
            let src = self.data();
            let mut out = Vec::with_capacity(planes * od * oh * ow);
            for p in 0..planes {
                for z in 0..od {
                    for y in 0..oh {
                        for x in 0..ow {
                            out.push(src[src_of(p, z, y, x)]);
                        }
                    }
                }
            }
            out
        };
        let in_len = self.numel();
        Ok(Tensor::from_op(
            out,
            vec![xs[0], xs[1], od, oh, ow],
            &[self],
            move |g, _| {
                let mut gx = vec![T::zero(); in_len];
                let mut i = 0;
                for p in 0..planes {
                    for z in 0..od {
                        for y in 0..oh {
                            for x in 0..ow {
                                gx[src_of(p, z, y, x)] += g[i];
                                i += 1;
                            }
                        }
                    }
                }
                vec![Some(gx)]
            },
        ))
    }
}
