//! Raw slice kernels behind the graph operations.

use super::Scalar;

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Strides of `shape` viewed inside `out`, zero on broadcast axes.
pub(crate) fn bcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let s = strides(shape);
    shape
        .iter()
        .zip(out)
        .zip(s)
        .map(|((&d, &o), st)| if d == 1 && o != 1 { 0 } else { st })
        .collect()
}

/// Visits every output position of a broadcast pair with the matching
/// operand offsets, in row-major output order.
pub(crate) fn for_each_bcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let rank = out.len();
    let total: usize = out.iter().product();
    if total == 0 {
        return;
    }
    let inner = out[rank - 1];
    let (ia_step, ib_step) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    let mut o = 0;
    while o < total {
        let (mut a, mut b) = (oa, ob);
        for _ in 0..inner {
            f(o, a, b);
            o += 1;
            a += ia_step;
            b += ib_step;
        }
        // advance the odometer over the outer axes
        let mut ax = rank - 1;
        loop {
            if ax == 0 {
                return;
            }
            ax -= 1;
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            oa -= sa[ax] * out[ax];
            ob -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    /// Valid output column range for kernel column `kx`.
    fn col_range(&self, kx: usize) -> (usize, usize) {
        let off = kx as isize - self.pad as isize;
        let s = self.stride as isize;
        let lo = if off < 0 { ((-off) + s - 1) / s } else { 0 };
        let last = self.w as isize - 1 - off;
        if last < 0 {
            return (0, 0);
        }
        let hi = (last / s + 1).min(self.wo as isize);
        (lo as usize, hi.max(lo) as usize)
    }

    fn in_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
        (iy >= 0 && (iy as usize) < self.h).then_some(iy as usize)
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(x: &[T], w: &[T], b: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let (cin_g, cout_g) = (g.cin / g.groups, g.cout / g.groups);
    let plane_in = g.h * g.w;
    let plane_out = g.ho * g.wo;
    let mut out = vec![T::zero(); g.n * g.cout * plane_out];
    for n in 0..g.n {
        for oc in 0..g.cout {
            let grp = oc / cout_g;
            let o0 = (n * g.cout + oc) * plane_out;
            let out_plane = &mut out[o0..o0 + plane_out];
            if let Some(b) = b {
                out_plane.iter_mut().for_each(|v| *v = b[oc]);
            }
            for icg in 0..cin_g {
                let ic = grp * cin_g + icg;
                let i0 = (n * g.cin + ic) * plane_in;
                let in_plane = &x[i0..i0 + plane_in];
                for ky in 0..g.k {
                    for kx in 0..g.k {
                        let wv = w[((oc * cin_g + icg) * g.k + ky) * g.k + kx];
                        let (lo, hi) = g.col_range(kx);
                        if lo >= hi {
                            continue;
                        }
                        for oy in 0..g.ho {
                            let Some(iy) = g.in_row(oy, ky) else { continue };
                            let row_in = &in_plane[iy * g.w..(iy + 1) * g.w];
                            let row_out = &mut out_plane[oy * g.wo..(oy + 1) * g.wo];
                            let base = lo * g.stride + kx - g.pad;
                            if g.stride == 1 {
                                for (o, &i) in row_out[lo..hi].iter_mut().zip(&row_in[base..base + (hi - lo)]) {
                                    *o += wv * i;
                                }
                            } else {
                                for (j, o) in row_out[lo..hi].iter_mut().enumerate() {
                                    *o += wv * row_in[base + j * g.stride];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns (grad_input, grad_weight, grad_bias); each only when requested.
#[allow(clippy::type_complexity)]
pub(crate) fn conv2d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    gout: &[T],
    g: &ConvGeom,
    need_x: bool,
    need_w: bool,
    need_b: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let (cin_g, cout_g) = (g.cin / g.groups, g.cout / g.groups);
    let plane_in = g.h * g.w;
    let plane_out = g.ho * g.wo;
    let mut gx = need_x.then(|| vec![T::zero(); x.len()]);
    let mut gw = need_w.then(|| vec![T::zero(); w.len()]);
    let gb = need_b.then(|| {
        let mut gb = vec![T::zero(); g.cout];
        for n in 0..g.n {
            for (oc, acc) in gb.iter_mut().enumerate() {
                let o0 = (n * g.cout + oc) * plane_out;
                *acc += gout[o0..o0 + plane_out].iter().copied().sum::<T>();
            }
        }
        gb
    });
    if !need_x && !need_w {
        return (gx, gw, gb);
    }
    for n in 0..g.n {
        for oc in 0..g.cout {
            let grp = oc / cout_g;
            let o0 = (n * g.cout + oc) * plane_out;
            let gplane = &gout[o0..o0 + plane_out];
            for icg in 0..cin_g {
                let ic = grp * cin_g + icg;
                let i0 = (n * g.cin + ic) * plane_in;
                for ky in 0..g.k {
                    for kx in 0..g.k {
                        let widx = ((oc * cin_g + icg) * g.k + ky) * g.k + kx;
                        let wv = w[widx];
                        let (lo, hi) = g.col_range(kx);
                        if lo >= hi {
                            continue;
                        }
                        let mut wacc = T::zero();
                        for oy in 0..g.ho {
                            let Some(iy) = g.in_row(oy, ky) else { continue };
                            let grow = &gplane[oy * g.wo..(oy + 1) * g.wo];
                            let base = i0 + iy * g.w + lo * g.stride + kx - g.pad;
                            if let Some(gx) = gx.as_mut() {
                                if g.stride == 1 {
                                    for (d, &gv) in gx[base..base + (hi - lo)].iter_mut().zip(&grow[lo..hi]) {
                                        *d += wv * gv;
                                    }
                                } else {
                                    for (j, &gv) in grow[lo..hi].iter().enumerate() {
                                        gx[base + j * g.stride] += wv * gv;
                                    }
                                }
                            }
                            if gw.is_some() {
                                if g.stride == 1 {
                                    for (&xv, &gv) in x[base..base + (hi - lo)].iter().zip(&grow[lo..hi]) {
                                        wacc += xv * gv;
                                    }
                                } else {
                                    for (j, &gv) in grow[lo..hi].iter().enumerate() {
                                        wacc += x[base + j * g.stride] * gv;
                                    }
                                }
                            }
                        }
                        if let Some(gw) = gw.as_mut() {
                            gw[widx] += wacc;
                        }
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

/// Batched `[batch, m, k] x [batch|1, k, n]` product.
pub(crate) fn matmul<T: Scalar>(
    a: &[T],
    b: &[T],
    batch: usize,
    shared_b: bool,
    m: usize,
    k: usize,
    n: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); batch * m * n];
    for bi in 0..batch {
        let a0 = bi * m * k;
        let b0 = if shared_b { 0 } else { bi * k * n };
        for i in 0..m {
            let orow = &mut out[(bi * m + i) * n..(bi * m + i + 1) * n];
            for kk in 0..k {
                let av = a[a0 + i * k + kk];
                if av == T::zero() {
                    continue;
                }
                let brow = &b[b0 + kk * n..b0 + (kk + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul_backward<T: Scalar>(
    a: &[T],
    b: &[T],
    gout: &[T],
    batch: usize,
    shared_b: bool,
    m: usize,
    k: usize,
    n: usize,
    need_a: bool,
    need_b: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let mut ga = need_a.then(|| vec![T::zero(); a.len()]);
    let mut gb = need_b.then(|| vec![T::zero(); b.len()]);
    for bi in 0..batch {
        let a0 = bi * m * k;
        let b0 = if shared_b { 0 } else { bi * k * n };
        for i in 0..m {
            let grow = &gout[(bi * m + i) * n..(bi * m + i + 1) * n];
            for kk in 0..k {
                let brow = &b[b0 + kk * n..b0 + (kk + 1) * n];
                if let Some(ga) = ga.as_mut() {
                    ga[a0 + i * k + kk] += grow.iter().zip(brow).map(|(&g, &bv)| g * bv).sum::<T>();
                }
                if let Some(gb) = gb.as_mut() {
                    let av = a[a0 + i * k + kk];
                    for (d, &g) in gb[b0 + kk * n..b0 + (kk + 1) * n].iter_mut().zip(grow) {
                        *d += av * g;
                    }
                }
            }
        }
    }
    (ga, gb)
}

/// Source taps for 2x bilinear upsampling with half-pixel centers.
pub(crate) fn upsample_taps(len: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * len)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub(crate) fn upsample2x_forward<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); planes * ho * wo];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let ly = T::lit(ly);
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let lx = T::lit(lx);
                let top = src[y0 * w + x0] * (T::one() - lx) + src[y0 * w + x1] * lx;
                let bot = src[y1 * w + x0] * (T::one() - lx) + src[y1 * w + x1] * lx;
                dst[oy * wo + ox] = top * (T::one() - ly) + bot * ly;
            }
        }
    }
    out
}

pub(crate) fn upsample2x_backward<T: Scalar>(gout: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let (ho, wo) = (2 * h, 2 * w);
    let mut gx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let g = &gout[p * ho * wo..(p + 1) * ho * wo];
        let dst = &mut gx[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let ly = T::lit(ly);
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let lx = T::lit(lx);
                let gv = g[oy * wo + ox];
                dst[y0 * w + x0] += gv * (T::one() - ly) * (T::one() - lx);
                dst[y0 * w + x1] += gv * (T::one() - ly) * lx;
                dst[y1 * w + x0] += gv * ly * (T::one() - lx);
                dst[y1 * w + x1] += gv * ly * lx;
            }
        }
    }
    gx
}

/// Splits `shape` around `axis` into (outer, extent, inner).
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn permute<T: Scalar>(x: &[T], shape: &[usize], axes: &[usize]) -> (Vec<T>, Vec<usize>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let zero = vec![0; out_shape.len()];
    let mut out = vec![T::zero(); x.len()];
    for_each_bcast(&out_shape, &src_strides, &zero, |o, i, _| out[o] = x[i]);
    (out, out_shape)
}

/// Inverse of an axis permutation.
pub(crate) fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bcast_visits_in_output_order() {
        let out = [2, 3];
        let sa = bcast_strides(&[2, 1], &out);
        let sb = bcast_strides(&[1, 3], &out);
        let mut seen = vec![];
        for_each_bcast(&out, &sa, &sb, |o, a, b| seen.push((o, a, b)));
        assert_eq!(
            seen,
            vec![(0, 0, 0), (1, 0, 1), (2, 0, 2), (3, 1, 0), (4, 1, 1), (5, 1, 2)]
        );
    }

    #[test]
    fn permute_transposes() {
        let x: Vec<f64> = (0..6).map(f64::from).collect();
        let (y, s) = permute(&x, &[2, 3], &[1, 0]);
        assert_eq!(s, vec![3, 2]);
        assert_eq!(y, vec![0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
    }

    #[test]
    fn strided_conv_column_range() {
        let g = ConvGeom {
            n: 1,
            cin: 1,
            h: 5,
            w: 5,
            cout: 1,
            k: 3,
            stride: 2,
            pad: 1,
            groups: 1,
            ho: 3,
            wo: 3,
        };
        assert_eq!(g.col_range(0), (1, 3));
        assert_eq!(g.col_range(1), (0, 3));
        assert_eq!(g.col_range(2), (0, 2));
    }
}
