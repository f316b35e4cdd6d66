use crate::error::{invalid, shape_err, Result};
use crate::{Scalar, Tensor};

impl<T: Scalar> Tensor<T> {
    /// Group normalization over `[N, C, ...]` with per-channel affine
    /// parameters `gamma`, `beta` of shape `[C]`.
    pub fn group_norm(&self, groups: usize, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
        let xs = self.shape();
        if xs.len() < 2 {
            return shape_err("group_norm", format!("{xs:?}"));
        }
        let (n, c) = (xs[0], xs[1]);
        if groups == 0 || c % groups != 0 {
            return invalid("group_norm", format!("{groups} groups do not divide {c} channels"));
        }
        if gamma.shape() != [c] || beta.shape() != [c] {
            return shape_err(
                "group_norm",
                format!("affine {:?}/{:?} for {c} channels", gamma.shape(), beta.shape()),
            );
        }
        let spatial = self.numel() / (n * c).max(1);
        let cpg = c / groups;
        let group_len = cpg * spatial;
        let eps = T::from_f64_lossy(eps);
        let inv_len = T::one() / T::from_usize(group_len).unwrap();

        let x = self.to_vec();
        let (gm, bt) = (gamma.to_vec(), beta.to_vec());
        let mut xhat = vec![T::zero(); x.len()];
        let mut rstd = vec![T::zero(); n * groups];
        for (gi, (xg, hg)) in x.chunks(group_len).zip(xhat.chunks_mut(group_len)).enumerate() {
            let mean = xg.iter().copied().sum::<T>() * inv_len;
            let var = xg.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_len;
            let r = T::one() / (var + eps).sqrt();
            rstd[gi] = r;
            hg.iter_mut().zip(xg).for_each(|(h, &v)| *h = (v - mean) * r);
        }
        let chan_of = move |i: usize| (i / spatial) % c;
        let out = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| h * gm[chan_of(i)] + bt[chan_of(i)])
            .collect();

        Ok(Tensor::from_op(
            out,
            xs.to_vec(),
            &[self, gamma, beta],
            move |g, need| {
                let gx = need[0].then(|| {
                    let mut gx = vec![T::zero(); g.len()];
                    for gi in 0..n * groups {
                        let range = gi * group_len..(gi + 1) * group_len;
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for i in range.clone() {
                            let dh = g[i] * gm[chan_of(i)];
                            mean_dh += dh;
                            mean_dh_h += dh * xhat[i];
                        }
                        mean_dh *= inv_len;
                        mean_dh_h *= inv_len;
                        for i in range {
                            let dh = g[i] * gm[chan_of(i)];
                            gx[i] = rstd[gi] * (dh - mean_dh - xhat[i] * mean_dh_h);
                        }
                    }
                    gx
                });
                let gg = need[1].then(|| {
                    let mut gg = vec![T::zero(); c];
                    for (i, (&gv, &h)) in g.iter().zip(&xhat).enumerate() {
                        gg[chan_of(i)] += gv * h;
                    }
                    gg
                });
                let gb = need[2].then(|| {
                    let mut gb = vec![T::zero(); c];
                    for (i, &gv) in g.iter().enumerate() {
                        gb[chan_of(i)] += gv;
                    }
                    gb
                });
                vec![gx, gg, gb]
            },
        ))
    }
}
