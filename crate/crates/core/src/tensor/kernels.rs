//! Forward and backward kernels shared by [`Tensor`] and the tape.

use super::{broadcast_shapes, broadcast_strides, strides, Tensor};
use crate::error::{Error, Result};

/// Visits every element of `shape` in row-major order, yielding the flat
/// offsets into two operands laid out with `sa` and `sb` strides.
fn for_each_offset(shape: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize)) {
    let n: usize = shape.iter().product();
    if n == 0 {
        return;
    }
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for _ in 0..n {
        f(oa, ob);
        let mut d = rank;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < shape[d] {
                break;
            }
            oa -= sa[d] * shape[d];
            ob -= sb[d] * shape[d];
            idx[d] = 0;
        }
    }
}

pub(crate) fn broadcast_binary(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor {
            shape: a.shape.clone(),
            data,
        });
    }
    let shape = broadcast_shapes(op, &a.shape, &b.shape)?;
    let sa = broadcast_strides(&a.shape, &shape);
    let sb = broadcast_strides(&b.shape, &shape);
    let mut data = Vec::with_capacity(shape.iter().product());
    for_each_offset(&shape, &sa, &sb, |ia, ib| data.push(f(a.data[ia], b.data[ib])));
    Ok(Tensor { shape, data })
}

/// Sums `grad` (shaped like a broadcast result) back down to `shape`.
pub(crate) fn sum_to_shape(grad: &Tensor, shape: &[usize]) -> Tensor {
    if grad.shape == shape {
        return grad.clone();
    }
    let mut out = Tensor::zeros(shape);
    let st = broadcast_strides(shape, &grad.shape);
    let sg = strides(&grad.shape);
    for_each_offset(&grad.shape, &sg, &st, |ig, io| out.data[io] += grad.data[ig]);
    out
}

struct BatchPlan {
    out_shape: Vec<usize>,
    offsets: Vec<(usize, usize)>,
    m: usize,
    k: usize,
    n: usize,
}

fn batch_plan(a: &[usize], b: &[usize]) -> Result<BatchPlan> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::shape("matmul", a, b));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(Error::shape("matmul", a, b));
    }
    let ab = &a[..a.len() - 2];
    let bb = &b[..b.len() - 2];
    let batch = broadcast_shapes("matmul", ab, bb).map_err(|_| Error::shape("matmul", a, b))?;
    let sa = broadcast_strides(ab, &batch);
    let sb = broadcast_strides(bb, &batch);
    let mut offsets = Vec::new();
    if batch.is_empty() {
        offsets.push((0, 0));
    } else {
        for_each_offset(&batch, &sa, &sb, |ia, ib| offsets.push((ia * m * k, ib * k * n)));
    }
    let mut out_shape = batch;
    out_shape.extend([m, n]);
    Ok(BatchPlan {
        out_shape,
        offsets,
        m,
        k,
        n,
    })
}

pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let plan = batch_plan(&a.shape, &b.shape)?;
    let (m, k, n) = (plan.m, plan.k, plan.n);
    let mut out = vec![0.0; plan.offsets.len() * m * n];
    for (bi, &(oa, ob)) in plan.offsets.iter().enumerate() {
        let c = &mut out[bi * m * n..(bi + 1) * m * n];
        for i in 0..m {
            let crow = &mut c[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = a.data[oa + i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &b.data[ob + p * n..ob + (p + 1) * n];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += aip * bv;
                }
            }
        }
    }
    Ok(Tensor {
        shape: plan.out_shape,
        data: out,
    })
}

/// Gradients of `a @ b` given the output gradient.
pub(crate) fn matmul_backward(a: &Tensor, b: &Tensor, grad: &Tensor) -> (Tensor, Tensor) {
    let plan = batch_plan(&a.shape, &b.shape).expect("shapes validated in forward");
    let (m, k, n) = (plan.m, plan.k, plan.n);
    let mut ga = Tensor::zeros(&a.shape);
    let mut gb = Tensor::zeros(&b.shape);
    for (bi, &(oa, ob)) in plan.offsets.iter().enumerate() {
        let g = &grad.data[bi * m * n..(bi + 1) * m * n];
        for i in 0..m {
            let grow = &g[i * n..(i + 1) * n];
            for p in 0..k {
                let brow = &b.data[ob + p * n..ob + (p + 1) * n];
                let dot: f64 = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                ga.data[oa + i * k + p] += dot;
                let aip = a.data[oa + i * k + p];
                if aip != 0.0 {
                    let gbrow = &mut gb.data[ob + p * n..ob + (p + 1) * n];
                    for (gv, &gg) in gbrow.iter_mut().zip(grow) {
                        *gv += aip * gg;
                    }
                }
            }
        }
    }
    (ga, gb)
}

fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::InvalidAxis {
            axis,
            rank: shape.len(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

pub(crate) fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = axis_split(&x.shape, axis)?;
    let mut out = vec![0.0; x.data.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = f64::NEG_INFINITY;
            for j in 0..len {
                max = max.max(x.data[base + j * inner]);
            }
            let mut sum = 0.0;
            for j in 0..len {
                let e = (x.data[base + j * inner] - max).exp();
                out[base + j * inner] = e;
                sum += e;
            }
            for j in 0..len {
                out[base + j * inner] /= sum;
            }
        }
    }
    Ok(Tensor {
        shape: x.shape.clone(),
        data: out,
    })
}

pub(crate) fn softmax_backward(y: &Tensor, grad: &Tensor, axis: usize) -> Tensor {
    let (outer, len, inner) = axis_split(&y.shape, axis).expect("axis validated in forward");
    let mut gx = vec![0.0; y.data.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let dot: f64 = (0..len)
                .map(|j| grad.data[base + j * inner] * y.data[base + j * inner])
                .sum();
            for j in 0..len {
                let at = base + j * inner;
                gx[at] = y.data[at] * (grad.data[at] - dot);
            }
        }
    }
    Tensor {
        shape: y.shape.clone(),
        data: gx,
    }
}

pub(crate) fn sum_axis(x: &Tensor, axis: usize, keepdim: bool) -> Result<Tensor> {
    let (outer, len, inner) = axis_split(&x.shape, axis)?;
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for j in 0..len {
            let src = &x.data[(o * len + j) * inner..(o * len + j + 1) * inner];
            let dst = &mut out[o * inner..(o + 1) * inner];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    let mut shape = x.shape.clone();
    if keepdim {
        shape[axis] = 1;
    } else {
        shape.remove(axis);
    }
    Ok(Tensor { shape, data: out })
}

pub(crate) fn permute(x: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let rank = x.shape.len();
    let mut seen = vec![false; rank];
    if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::InvalidInput(format!(
            "invalid permutation {perm:?} for rank {rank}"
        )));
    }
    let shape: Vec<usize> = perm.iter().map(|&p| x.shape[p]).collect();
    let src = strides(&x.shape);
    let permuted: Vec<usize> = perm.iter().map(|&p| src[p]).collect();
    let unit = strides(&shape);
    let mut data = vec![0.0; x.data.len()];
    for_each_offset(&shape, &unit, &permuted, |io, ii| data[io] = x.data[ii]);
    Ok(Tensor { shape, data })
}

pub(crate) fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Normalizes over the last axis; returns the output and per-row `1/σ`.
pub(crate) fn layer_norm(x: &Tensor, eps: f64) -> Result<(Tensor, Vec<f64>)> {
    let d = *x
        .shape
        .last()
        .ok_or(Error::InvalidAxis { axis: 0, rank: 0 })?;
    let rows = x.data.len() / d.max(1);
    let mut out = vec![0.0; x.data.len()];
    let mut inv_std = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x.data[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + eps).sqrt();
        for (o, v) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
            *o = (v - mean) * is;
        }
        inv_std.push(is);
    }
    Ok((
        Tensor {
            shape: x.shape.clone(),
            data: out,
        },
        inv_std,
    ))
}

pub(crate) fn layer_norm_backward(y: &Tensor, inv_std: &[f64], grad: &Tensor) -> Tensor {
    let d = *y.shape.last().unwrap();
    let mut gx = vec![0.0; y.data.len()];
    for (r, &is) in inv_std.iter().enumerate() {
        let yr = &y.data[r * d..(r + 1) * d];
        let gr = &grad.data[r * d..(r + 1) * d];
        let mean_g = gr.iter().sum::<f64>() / d as f64;
        let mean_gy = gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / d as f64;
        for ((o, g), yv) in gx[r * d..(r + 1) * d].iter_mut().zip(gr).zip(yr) {
            *o = is * (g - mean_g - yv * mean_gy);
        }
    }
    Tensor {
        shape: y.shape.clone(),
        data: gx,
    }
}

pub(crate) fn index_select(x: &Tensor, axis: usize, indices: &[usize]) -> Result<Tensor> {
    let (outer, len, inner) = axis_split(&x.shape, axis)?;
    if let Some(&bad) = indices.iter().find(|&&i| i >= len) {
        return Err(Error::InvalidInput(format!(
            "index {bad} out of range for axis {axis} of extent {len}"
        )));
    }
    let mut data = Vec::with_capacity(outer * indices.len() * inner);
    for o in 0..outer {
        for &i in indices {
            let start = (o * len + i) * inner;
            data.extend_from_slice(&x.data[start..start + inner]);
        }
    }
    let mut shape = x.shape.clone();
    shape[axis] = indices.len();
    Ok(Tensor { shape, data })
}

pub(crate) fn index_select_backward(
    shape: &[usize],
    axis: usize,
    indices: &[usize],
    grad: &Tensor,
) -> Tensor {
    let (outer, len, inner) = axis_split(shape, axis).expect("validated in forward");
    let mut gx = Tensor::zeros(shape);
    let k = indices.len();
    for o in 0..outer {
        for (slot, &i) in indices.iter().enumerate() {
            let src = &grad.data[(o * k + slot) * inner..(o * k + slot + 1) * inner];
            let dst = &mut gx.data[(o * len + i) * inner..(o * len + i + 1) * inner];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    gx
}

pub(crate) fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidInput("concat of zero tensors".into()))?;
    let rank = first.shape.len();
    if axis >= rank {
        return Err(Error::InvalidAxis { axis, rank });
    }
    for p in parts {
        let same_rank = p.shape.len() == rank;
        if !same_rank || (0..rank).any(|d| d != axis && p.shape[d] != first.shape[d]) {
            return Err(Error::shape("concat", &first.shape, &p.shape));
        }
    }
    let outer: usize = first.shape[..axis].iter().product();
    let inner: usize = first.shape[axis + 1..].iter().product();
    let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape[axis] * inner;
            data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
        }
    }
    let mut shape = first.shape.clone();
    shape[axis] = total;
    Ok(Tensor { shape, data })
}

/// Result of sampling a `[H, W, C]` grid at continuous `(x, y)` positions.
#[derive(Clone, Debug)]
pub struct BilinearSample {
    /// `[K, C]` sampled values, zero where out of bounds.
    pub values: Tensor,
    /// `true` where the coordinate fell inside `[0, W-1] x [0, H-1]`.
    pub in_bounds: Vec<bool>,
}

struct Corner {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    tx: f64,
    ty: f64,
}

fn corner(x: f64, y: f64, h: usize, w: usize) -> Option<Corner> {
    if !(x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64) {
        return None;
    }
    let x0 = (x.floor() as usize).min(w.saturating_sub(2));
    let y0 = (y.floor() as usize).min(h.saturating_sub(2));
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    Some(Corner {
        x0,
        x1,
        y0,
        y1,
        tx: x - x0 as f64,
        ty: y - y0 as f64,
    })
}

fn grid_dims(grid: &Tensor, coords: &Tensor) -> Result<(usize, usize, usize, usize)> {
    if grid.shape.len() != 3 || coords.shape.len() != 2 || coords.shape[1] != 2 {
        return Err(Error::shape("bilinear_sample", &grid.shape, &coords.shape));
    }
    let (h, w, c) = (grid.shape[0], grid.shape[1], grid.shape[2]);
    if h == 0 || w == 0 {
        return Err(Error::InvalidInput("empty sampling grid".into()));
    }
    Ok((h, w, c, coords.shape[0]))
}

pub(crate) fn bilinear_sample(grid: &Tensor, coords: &Tensor) -> Result<BilinearSample> {
    let (h, w, c, k) = grid_dims(grid, coords)?;
    let mut values = vec![0.0; k * c];
    let mut in_bounds = vec![false; k];
    for p in 0..k {
        let Some(cr) = corner(coords.data[2 * p], coords.data[2 * p + 1], h, w) else {
            continue;
        };
        in_bounds[p] = true;
        let weights = [
            ((cr.y0, cr.x0), (1.0 - cr.tx) * (1.0 - cr.ty)),
            ((cr.y0, cr.x1), cr.tx * (1.0 - cr.ty)),
            ((cr.y1, cr.x0), (1.0 - cr.tx) * cr.ty),
            ((cr.y1, cr.x1), cr.tx * cr.ty),
        ];
        let out = &mut values[p * c..(p + 1) * c];
        for ((yy, xx), wgt) in weights {
            if wgt == 0.0 {
                continue;
            }
            let cell = &grid.data[(yy * w + xx) * c..(yy * w + xx + 1) * c];
            for (o, v) in out.iter_mut().zip(cell) {
                *o += wgt * v;
            }
        }
    }
    Ok(BilinearSample {
        values: Tensor {
            shape: vec![k, c],
            data: values,
        },
        in_bounds,
    })
}

pub(crate) fn bilinear_backward(grid: &Tensor, coords: &Tensor, grad: &Tensor) -> (Tensor, Tensor) {
    let (h, w, c, k) = grid_dims(grid, coords).expect("validated in forward");
    let mut gg = Tensor::zeros(&grid.shape);
    let mut gc = Tensor::zeros(&coords.shape);
    let cell = |yy: usize, xx: usize| &grid.data[(yy * w + xx) * c..(yy * w + xx + 1) * c];
    for p in 0..k {
        let Some(cr) = corner(coords.data[2 * p], coords.data[2 * p + 1], h, w) else {
            continue;
        };
        let g = &grad.data[p * c..(p + 1) * c];
        let weights = [
            ((cr.y0, cr.x0), (1.0 - cr.tx) * (1.0 - cr.ty)),
            ((cr.y0, cr.x1), cr.tx * (1.0 - cr.ty)),
            ((cr.y1, cr.x0), (1.0 - cr.tx) * cr.ty),
            ((cr.y1, cr.x1), cr.tx * cr.ty),
        ];
        for ((yy, xx), wgt) in weights {
            let dst = &mut gg.data[(yy * w + xx) * c..(yy * w + xx + 1) * c];
            for (d, gv) in dst.iter_mut().zip(g) {
                *d += wgt * gv;
            }
        }
        let (v00, v01, v10, v11) = (cell(cr.y0, cr.x0), cell(cr.y0, cr.x1), cell(cr.y1, cr.x0), cell(cr.y1, cr.x1));
        let (mut dx, mut dy) = (0.0, 0.0);
        for ch in 0..c {
            let dvdx = (1.0 - cr.ty) * (v01[ch] - v00[ch]) + cr.ty * (v11[ch] - v10[ch]);
            let dvdy = (1.0 - cr.tx) * (v10[ch] - v00[ch]) + cr.tx * (v11[ch] - v01[ch]);
            dx += g[ch] * dvdx;
            dy += g[ch] * dvdy;
        }
        // Degenerate axes (extent 1) have no interpolation direction.
        gc.data[2 * p] = if w > 1 { dx } else { 0.0 };
        gc.data[2 * p + 1] = if h > 1 { dy } else { 0.0 };
    }
    (gg, gc)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_permutation() {
        let v = t(&[3, 1], &[1.0, -2.0, 0.5]);
        assert_eq!(matmul(&Tensor::eye(3), &v).unwrap(), v);
        let a = t(&[2, 2], &[1., 2., 3., 4.]);
        let p = t(&[2, 2], &[0., 1., 1., 0.]);
        assert_eq!(matmul(&a, &p).unwrap().data(), &[2., 1., 4., 3.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn batched_matmul_broadcasts_rhs() {
        let a = Tensor::from_fn(&[2, 2, 3], |i| i as f64);
        let b = Tensor::from_fn(&[3, 2], |i| (i as f64) - 2.0);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 2, 2]);
        for batch in 0..2 {
            let ab = Tensor::new(&[2, 3], a.data()[batch * 6..batch * 6 + 6].to_vec()).unwrap();
            let cb = matmul(&ab, &b).unwrap();
            assert_eq!(&c.data()[batch * 4..batch * 4 + 4], cb.data());
        }
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let s = softmax(&t(&[3], &[0., 0., 0.]), 0).unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = softmax(&t(&[2], &[1000., 0.]), 0).unwrap();
        assert!((s.data()[0] - 1.0).abs() < 1e-15);
        assert!(s.data()[1] >= 0.0 && s.data()[1] < 1e-300);
    }

    #[test]
    fn softmax_middle_axis() {
        let x = Tensor::from_fn(&[2, 3, 4], |i| ((i * 7919) % 13) as f64 * 0.3);
        let s = softmax(&x, 1).unwrap();
        for o in 0..2 {
            for i in 0..4 {
                let sum: f64 = (0..3).map(|j| s.get(&[o, j, i])).sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bilinear_lattice_midpoint_and_out_of_bounds() {
        let grid = Tensor::from_fn(&[5, 6, 2], |i| i as f64);
        let s = bilinear_sample(&grid, &t(&[1, 2], &[2.0, 3.0])).unwrap();
        assert_eq!(s.values.data(), &[grid.get(&[3, 2, 0]), grid.get(&[3, 2, 1])]);
        assert!(s.in_bounds[0]);

        let g = t(&[2, 2, 1], &[0., 0., 4., 4.]);
        let s = bilinear_sample(&g, &t(&[1, 2], &[0.5, 0.5])).unwrap();
        assert_eq!(s.values.data(), &[2.0]);

        let s = bilinear_sample(&grid, &t(&[1, 2], &[-5.0, -5.0])).unwrap();
        assert_eq!(s.values.data(), &[0.0, 0.0]);
        assert!(!s.in_bounds[0]);
    }

    #[test]
    fn bilinear_exact_on_far_edge() {
        let grid = Tensor::from_fn(&[3, 4, 1], |i| (i * i) as f64);
        let s = bilinear_sample(&grid, &t(&[1, 2], &[3.0, 2.0])).unwrap();
        assert_eq!(s.values.data(), &[grid.get(&[2, 3, 0])]);
    }

    #[test]
    fn sum_to_shape_reduces_broadcast_axes() {
        let g = Tensor::ones(&[4, 5, 3]);
        let r = sum_to_shape(&g, &[5, 1]);
        assert_eq!(r.shape(), &[5, 1]);
        assert!(r.data().iter().all(|&v| v == 12.0));
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let (y, _) = layer_norm(&Tensor::full(&[2, 8], 3.5), 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }
}
