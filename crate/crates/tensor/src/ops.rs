//! Differentiable tensor operations.
//!
//! Shapes must match exactly: the only broadcasting is the explicit
//! per-channel and per-sample helpers below.

use crate::error::{invalid, shape_err, Result};
use crate::{Scalar, Tensor};

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

fn map_unary<T: Scalar>(
    x: &Tensor<T>,
    f: impl Fn(T) -> T,
    df: impl Fn(T, T) -> T + Send + Sync + 'static,
) -> Tensor<T> {
    let xs = x.to_vec();
    let out: Vec<T> = xs.iter().map(|&v| f(v)).collect();
    let saved_out = out.clone();
    Tensor::from_op(out, x.shape().to_vec(), &[x], move |g, _| {
        let gx = g
            .iter()
            .zip(xs.iter().zip(&saved_out))
            .map(|(&g, (&x, &y))| g * df(x, y))
            .collect();
        vec![Some(gx)]
    })
}

impl<T: Scalar> Tensor<T> {
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("add", self, other)?;
        let out = {
            let (a, b) = (self.data(), other.data());
            a.iter().zip(b.iter()).map(|(&x, &y)| x + y).collect()
        };
        Ok(Tensor::from_op(out, self.shape().to_vec(), &[self, other], |g, _| {
            vec![Some(g.to_vec()), Some(g.to_vec())]
        }))
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("sub", self, other)?;
        let out = {
            let (a, b) = (self.data(), other.data());
            a.iter().zip(b.iter()).map(|(&x, &y)| x - y).collect()
        };
        Ok(Tensor::from_op(out, self.shape().to_vec(), &[self, other], |g, _| {
            vec![Some(g.to_vec()), Some(g.iter().map(|&v| -v).collect())]
        }))
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("mul", self, other)?;
        let (a, b) = (self.to_vec(), other.to_vec());
        let out = a.iter().zip(&b).map(|(&x, &y)| x * y).collect();
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            &[self, other],
            move |g, need| {
                vec![
                    need[0].then(|| g.iter().zip(&b).map(|(&g, &y)| g * y).collect()),
                    need[1].then(|| g.iter().zip(&a).map(|(&g, &x)| g * x).collect()),
                ]
            },
        ))
    }

    pub fn scale(&self, s: T) -> Tensor<T> {
        let out = self.data().iter().map(|&v| v * s).collect();
        Tensor::from_op(out, self.shape().to_vec(), &[self], move |g, _| {
            vec![Some(g.iter().map(|&v| v * s).collect())]
        })
    }

    pub fn add_scalar(&self, s: T) -> Tensor<T> {
        let out = self.data().iter().map(|&v| v + s).collect();
        Tensor::from_op(out, self.shape().to_vec(), &[self], |g, _| vec![Some(g.to_vec())])
    }

    pub fn neg(&self) -> Tensor<T> {
        self.scale(-T::one())
    }

    pub fn silu(&self) -> Tensor<T> {
        map_unary(
            self,
            |x| x / (T::one() + (-x).exp()),
            |x, _| {
                let s = T::one() / (T::one() + (-x).exp());
                s * (T::one() + x * (T::one() - s))
            },
        )
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        map_unary(self, |x| T::one() / (T::one() + (-x).exp()), |_, y| y * (T::one() - y))
    }

    pub fn square(&self) -> Tensor<T> {
        let two = T::one() + T::one();
        map_unary(self, |x| x * x, move |x, _| two * x)
    }

    pub fn sum(&self) -> Tensor<T> {
        let n = self.numel();
        let total = self.data().iter().copied().sum();
        Tensor::from_op(vec![total], vec![1], &[self], move |g, _| vec![Some(vec![g[0]; n])])
    }

    pub fn mean(&self) -> Tensor<T> {
        let n = self.numel();
        let inv = T::one() / T::from_usize(n.max(1)).unwrap();
        let total: T = self.data().iter().copied().sum();
        Tensor::from_op(vec![total * inv], vec![1], &[self], move |g, _| {
            vec![Some(vec![g[0] * inv; n])]
        })
    }

    /// Mean squared error over all elements.
    pub fn mse(&self, target: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("mse", self, target)?;
        let n = self.numel();
        let diff: Vec<T> = {
            let (a, b) = (self.data(), target.data());
            a.iter().zip(b.iter()).map(|(&x, &y)| x - y).collect()
        };
        let inv = T::one() / T::from_usize(n.max(1)).unwrap();
        let loss = diff.iter().map(|&d| d * d).sum::<T>() * inv;
        let two = T::one() + T::one();
        Ok(Tensor::from_op(vec![loss], vec![1], &[self, target], move |g, need| {
            let ga: Vec<T> = diff.iter().map(|&d| two * d * inv * g[0]).collect();
            let gb = need[1].then(|| ga.iter().map(|&v| -v).collect());
            vec![need[0].then_some(ga), gb]
        }))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return shape_err("reshape", format!("{:?} -> {:?}", self.shape(), shape));
        }
        Ok(Tensor::from_op(self.to_vec(), shape.to_vec(), &[self], |g, _| {
            vec![Some(g.to_vec())]
        }))
    }

    /// General axis permutation: `out.shape[i] = self.shape[axes[i]]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor<T>> {
        let nd = self.ndim();
        let mut seen = vec![false; nd];
        if axes.len() != nd || axes.iter().any(|&a| a >= nd || std::mem::replace(&mut seen[a], true)) {
            return invalid("permute", format!("axes {axes:?} for rank {nd}"));
        }
        let in_shape = self.shape().to_vec();
        let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
        let src_index = permute_index_map(&in_shape, axes);
        let out = {
            let d = self.data();
            src_index.iter().map(|&i| d[i]).collect()
        };
        Ok(Tensor::from_op(out, out_shape, &[self], move |g, _| {
            let mut gx = vec![T::zero(); g.len()];
            for (o, &i) in src_index.iter().enumerate() {
                gx[i] = g[o];
            }
            vec![Some(gx)]
        }))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&self) -> Result<Tensor<T>> {
        let nd = self.ndim();
        if nd < 2 {
            return invalid("transpose_last", "rank < 2");
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 1, nd - 2);
        self.permute(&axes)
    }

    /// `[m,k] @ [k,n]` or batched `[b,m,k] @ [b,k,n]`.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (sa, sb) = (self.shape(), other.shape());
        let (batch, m, k, n) = match (sa.len(), sb.len()) {
            (2, 2) if sa[1] == sb[0] => (1, sa[0], sa[1], sb[1]),
            (3, 3) if sa[0] == sb[0] && sa[2] == sb[1] => (sa[0], sa[1], sa[2], sb[2]),
            _ => return shape_err("matmul", format!("{sa:?} @ {sb:?}")),
        };
        let out_shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let (a, b) = (self.to_vec(), other.to_vec());
        let mut out = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                &a[i * m * k..(i + 1) * m * k],
                (k as isize, 1),
                &b[i * k * n..(i + 1) * k * n],
                (n as isize, 1),
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
                (n as isize, 1),
            );
        }
        Ok(Tensor::from_op(out, out_shape, &[self, other], move |g, need| {
            let ga = need[0].then(|| {
                let mut ga = vec![T::zero(); batch * m * k];
                for i in 0..batch {
                    // dA = dC @ B^T
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        &g[i * m * n..(i + 1) * m * n],
                        (n as isize, 1),
                        &b[i * k * n..(i + 1) * k * n],
                        (1, n as isize),
                        T::zero(),
                        &mut ga[i * m * k..(i + 1) * m * k],
                        (k as isize, 1),
                    );
                }
                ga
            });
            let gb = need[1].then(|| {
                let mut gb = vec![T::zero(); batch * k * n];
                for i in 0..batch {
                    // dB = A^T @ dC
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        &a[i * m * k..(i + 1) * m * k],
                        (1, k as isize),
                        &g[i * m * n..(i + 1) * m * n],
                        (n as isize, 1),
                        T::zero(),
                        &mut gb[i * k * n..(i + 1) * k * n],
                        (n as isize, 1),
                    );
                }
                gb
            });
            vec![ga, gb]
        }))
    }

    /// `x @ w^T + b` over the last axis; `w` is `[out, in]`.
    pub fn linear(&self, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let xs = self.shape();
        let (Some(&fan_in), [fan_out, w_in]) = (xs.last(), w.shape()) else {
            return shape_err("linear", format!("x {:?}, w {:?}", xs, w.shape()));
        };
        let (fan_out, w_in) = (*fan_out, *w_in);
        if fan_in != w_in {
            return shape_err("linear", format!("x {:?}, w {:?}", xs, w.shape()));
        }
        if let Some(b) = b {
            if b.shape() != [fan_out] {
                return shape_err("linear", format!("bias {:?} for {fan_out} outputs", b.shape()));
            }
        }
        let rows = self.numel() / fan_in.max(1);
        let mut out_shape = xs.to_vec();
        *out_shape.last_mut().unwrap() = fan_out;
        let (x, wv) = (self.to_vec(), w.to_vec());
        let mut out = vec![T::zero(); rows * fan_out];
        if let Some(b) = b {
            let bv = b.data();
            for r in 0..rows {
                out[r * fan_out..(r + 1) * fan_out].copy_from_slice(&bv);
            }
        }
        T::gemm(
            rows,
            fan_in,
            fan_out,
            T::one(),
            &x,
            (fan_in as isize, 1),
            &wv,
            (1, fan_in as isize),
            T::one(),
            &mut out,
            (fan_out as isize, 1),
        );
        let mut parents = vec![self, w];
        if let Some(b) = b {
            parents.push(b);
        }
        let has_bias = b.is_some();
        Ok(Tensor::from_op(out, out_shape, &parents, move |g, need| {
            let gx = need[0].then(|| {
                let mut gx = vec![T::zero(); rows * fan_in];
                T::gemm(
                    rows,
                    fan_out,
                    fan_in,
                    T::one(),
                    g,
                    (fan_out as isize, 1),
                    &wv,
                    (fan_in as isize, 1),
                    T::zero(),
                    &mut gx,
                    (fan_in as isize, 1),
                );
                gx
            });
            let gw = need[1].then(|| {
                let mut gw = vec![T::zero(); fan_out * fan_in];
                T::gemm(
                    fan_out,
                    rows,
                    fan_in,
                    T::one(),
                    g,
                    (1, fan_out as isize),
                    &x,
                    (fan_in as isize, 1),
                    T::zero(),
                    &mut gw,
                    (fan_in as isize, 1),
                );
                gw
            });
            let mut grads = vec![gx, gw];
            if has_bias {
                grads.push(need[2].then(|| {
                    let mut gb = vec![T::zero(); fan_out];
                    for row in g.chunks(fan_out) {
                        gb.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
                    }
                    gb
                }));
            }
            grads
        }))
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Result<Tensor<T>> {
        let Some(&width) = self.shape().last() else {
            return invalid("softmax", "rank-0 tensor");
        };
        if width == 0 {
            return invalid("softmax", "empty last axis");
        }
        let mut out = self.to_vec();
        for row in out.chunks_mut(width) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        let y = out.clone();
        Ok(Tensor::from_op(out, self.shape().to_vec(), &[self], move |g, _| {
            let mut gx = vec![T::zero(); g.len()];
            for ((gx, g), y) in gx.chunks_mut(width).zip(g.chunks(width)).zip(y.chunks(width)) {
                let dot: T = g.iter().zip(y).map(|(&a, &b)| a * b).sum();
                for i in 0..width {
                    gx[i] = y[i] * (g[i] - dot);
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Rows `indices[i]` of a 2-D table; gradients scatter-add back.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor<T>> {
        let [rows, width] = self.shape() else {
            return shape_err("gather_rows", format!("table {:?}", self.shape()));
        };
        let (rows, width) = (*rows, *width);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return invalid("gather_rows", format!("index {bad} >= {rows}"));
        }
        let out = {
            let d = self.data();
            indices
                .iter()
                .flat_map(|&i| d[i * width..(i + 1) * width].iter().copied())
                .collect()
        };
        let idx = indices.to_vec();
        Ok(Tensor::from_op(
            out,
            vec![indices.len(), width],
            &[self],
            move |g, _| {
                let mut gt = vec![T::zero(); rows * width];
                for (r, &i) in idx.iter().enumerate() {
                    for c in 0..width {
                        gt[i * width + c] += g[r * width + c];
                    }
                }
                vec![Some(gt)]
            },
        ))
    }

    /// Concatenates along `axis`.
    pub fn concat(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let Some(first) = parts.first() else {
            return invalid("concat", "no inputs");
        };
        let nd = first.ndim();
        if axis >= nd {
            return invalid("concat", format!("axis {axis} for rank {nd}"));
        }
        for p in parts {
            let ok = p.ndim() == nd
                && p.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return shape_err("concat", format!("{:?} vs {:?}", p.shape(), first.shape()));
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let widths: Vec<usize> = parts.iter().map(|p| p.shape()[axis] * inner).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * total);
        let datas: Vec<_> = parts.iter().map(|p| p.data()).collect();
        for o in 0..outer {
            for (d, &w) in datas.iter().zip(&widths) {
                out.extend_from_slice(&d[o * w..(o + 1) * w]);
            }
        }
        drop(datas);
        let mut shape = first.shape().to_vec();
        shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
        Ok(Tensor::from_op(out, shape, parts, move |g, need| {
            let mut offset = 0;
            widths
                .iter()
                .zip(need)
                .map(|(&w, &need)| {
                    let start = offset;
                    offset += w;
                    need.then(|| {
                        let mut gp = Vec::with_capacity(outer * w);
                        for o in 0..outer {
                            let base = o * total + start;
                            gp.extend_from_slice(&g[base..base + w]);
                        }
                        gp
                    })
                })
                .collect()
        }))
    }

    /// Forward value of `replacement`, gradient passed to `self` unchanged
    /// (straight-through estimator). `replacement` receives no gradient.
    pub fn straight_through(&self, replacement: &Tensor<T>) -> Result<Tensor<T>> {
        if self.shape() != replacement.shape() {
            return shape_err(
                "straight_through",
                format!("{:?} vs {:?}", self.shape(), replacement.shape()),
            );
        }
        let out = replacement.to_vec();
        Ok(Tensor::from_op(out, self.shape().to_vec(), &[self], |g, _| {
            vec![Some(g.to_vec())]
        }))
    }

    /// Scales each leading-axis slice `x[i]` by `s[i]`.
    pub fn mul_per_sample(&self, s: &[T]) -> Result<Tensor<T>> {
        let n = self.shape().first().copied().unwrap_or(0);
        if s.len() != n {
            return shape_err("mul_per_sample", format!("{} scales for batch {n}", s.len()));
        }
        let inner = self.numel() / n.max(1);
        let scales = s.to_vec();
        let out = {
            let d = self.data();
            d.chunks(inner.max(1))
                .zip(&scales)
                .flat_map(|(row, &k)| row.iter().map(move |&v| v * k))
                .collect()
        };
        Ok(Tensor::from_op(out, self.shape().to_vec(), &[self], move |g, _| {
            let gx = g
                .chunks(inner.max(1))
                .zip(&scales)
                .flat_map(|(row, &k)| row.iter().map(move |&v| v * k))
                .collect();
            vec![Some(gx)]
        }))
    }

    /// `x[n, c, ...] + b[n, c]`, the per-sample channel bias used for
    /// conditioning feature maps on an embedding.
    pub fn add_channel_bias(&self, b: &Tensor<T>) -> Result<Tensor<T>> {
        let xs = self.shape();
        if xs.len() < 2 || b.shape() != [xs[0], xs[1]] {
            return shape_err("add_channel_bias", format!("x {:?}, b {:?}", xs, b.shape()));
        }
        let planes = xs[0] * xs[1];
        let inner = self.numel() / planes.max(1);
        let out = {
            let (x, bv) = (self.data(), b.data());
            x.chunks(inner.max(1))
                .zip(bv.iter())
                .flat_map(|(row, &bias)| row.iter().map(move |&v| v + bias))
                .collect()
        };
        Ok(Tensor::from_op(out, xs.to_vec(), &[self, b], move |g, need| {
            let gb = need[1].then(|| g.chunks(inner.max(1)).map(|row| row.iter().copied().sum()).collect());
            vec![need[0].then(|| g.to_vec()), gb]
        }))
    }
}

/// For each flat output index of a permutation, the flat source index.
fn permute_index_map(in_shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let nd = in_shape.len();
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let total: usize = in_shape.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; nd];
    for _ in 0..total {
        map.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
        for d in (0..nd).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    map
}
