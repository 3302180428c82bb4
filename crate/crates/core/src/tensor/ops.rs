//! Elementwise, reduction, matrix and layout operations on tape variables.

use super::tape::Var;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

fn same_shape<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{op}: operand shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `out[m,n] (+)= a[m,k] · b[k,n]` on raw row-major buffers.
///
/// The gemm kernels accumulate in f64 whatever `S` is and round once on the
/// way out.
pub(crate) fn gemm<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    let b: Vec<f64> = b.iter().map(|x| x.as_f64()).collect();
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for (t, o) in acc.iter_mut().zip(row.iter()) {
            *t = o.as_f64();
        }
        for p in 0..k {
            let av = a[i * k + p].as_f64();
            if av == 0.0 {
                continue;
            }
            for (t, &bv) in acc.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *t += av * bv;
            }
        }
        for (o, &t) in row.iter_mut().zip(&acc) {
            *o = S::of(t);
        }
    }
}

/// `out[m,n] += aᵀ · b` where `a` is stored `[k,m]` and `b` is `[k,n]`.
pub(crate) fn gemm_tn<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    let mut acc: Vec<f64> = out[..m * n].iter().map(|x| x.as_f64()).collect();
    let mut brow = vec![0.0f64; n];
    for p in 0..k {
        for (t, x) in brow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
            *t = x.as_f64();
        }
        for i in 0..m {
            let av = a[p * m + i].as_f64();
            if av == 0.0 {
                continue;
            }
            for (t, &bv) in acc[i * n..(i + 1) * n].iter_mut().zip(&brow) {
                *t += av * bv;
            }
        }
    }
    for (o, t) in out.iter_mut().zip(acc) {
        *o = S::of(t);
    }
}

/// `out[m,n] += a · bᵀ` where `a` is `[m,k]` and `b` is stored `[n,k]`.
pub(crate) fn gemm_nt<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    let b: Vec<f64> = b.iter().map(|x| x.as_f64()).collect();
    for i in 0..m {
        let arow: Vec<f64> = a[i * k..(i + 1) * k].iter().map(|x| x.as_f64()).collect();
        for j in 0..n {
            let acc: f64 = arow.iter().zip(&b[j * k..(j + 1) * k]).map(|(x, y)| x * y).sum();
            out[i * n + j] = S::of(out[i * n + j].as_f64() + acc);
        }
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

pub(crate) fn permute_buf<S: Scalar>(data: &[S], shape: &[usize], axes: &[usize]) -> Vec<S> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let nd = shape.len();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; nd];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for d in (0..nd).rev() {
            idx[d] += 1;
            offset += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}

impl<'t, S: Scalar> Var<'t, S> {
    pub fn add(self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "add")?;
        let out = a.zip_map(&b, |x, y| x + y)?;
        self.tape().record(&[self, other], out, |ctx| {
            Ok(vec![Some(ctx.gout.to_vec()), Some(ctx.gout.to_vec())])
        })
    }

    pub fn sub(self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "sub")?;
        let out = a.zip_map(&b, |x, y| x - y)?;
        self.tape().record(&[self, other], out, |ctx| {
            Ok(vec![
                Some(ctx.gout.to_vec()),
                Some(ctx.gout.iter().map(|&g| -g).collect()),
            ])
        })
    }

    pub fn mul(self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "mul")?;
        let out = a.zip_map(&b, |x, y| x * y)?;
        self.tape().record(&[self, other], out, |ctx| {
            let (a, b) = (ctx.inputs[0].data(), ctx.inputs[1].data());
            let da = ctx.needs[0].then(|| ctx.gout.iter().zip(b).map(|(&g, &y)| g * y).collect());
            let db = ctx.needs[1].then(|| ctx.gout.iter().zip(a).map(|(&g, &x)| g * x).collect());
            Ok(vec![da, db])
        })
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'t, S>> {
        let c = S::of(c);
        let out = self.value().map(|x| x + c);
        self.tape()
            .record(&[self], out, |ctx| Ok(vec![Some(ctx.gout.to_vec())]))
    }

    pub fn scale(self, c: f64) -> Result<Var<'t, S>> {
        let c = S::of(c);
        let out = self.value().map(|x| x * c);
        self.tape().record(&[self], out, move |ctx| {
            Ok(vec![Some(ctx.gout.iter().map(|&g| g * c).collect())])
        })
    }

    pub fn square(self) -> Result<Var<'t, S>> {
        let out = self.value().map(|x| x * x);
        self.tape().record(&[self], out, |ctx| {
            let two = S::of(2.0);
            let x = ctx.inputs[0].data();
            Ok(vec![Some(
                ctx.gout.iter().zip(x).map(|(&g, &x)| g * two * x).collect(),
            )])
        })
    }

    pub fn sqrt(self) -> Result<Var<'t, S>> {
        let x = self.value();
        if let Some(pos) = x.data().iter().position(|&v| v < S::zero()) {
            return Err(Error::Domain(format!(
                "sqrt of negative value {} at index {pos}",
                x.data()[pos]
            )));
        }
        let out = x.map(|v| v.sqrt());
        self.tape().record(&[self], out, |ctx| {
            let half = S::of(0.5);
            let y = ctx.output.data();
            Ok(vec![Some(
                ctx.gout.iter().zip(y).map(|(&g, &y)| g * half / y).collect(),
            )])
        })
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(self) -> Result<Var<'t, S>> {
        let x = self.value();
        let out = Tensor::scalar(x.sum());
        let n = x.len();
        self.tape()
            .record(&[self], out, move |ctx| Ok(vec![Some(vec![ctx.gout[0]; n])]))
    }

    pub fn mean(self) -> Result<Var<'t, S>> {
        let n = self.value().len();
        self.sum()?.scale(1.0 / n as f64)
    }

    /// Matrix product. `a` is `[.., m, k]`; `b` is `[.., k, n]` with the same
    /// leading extents, or a plain `[k, n]` matrix broadcast over them.
    pub fn matmul(self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape(format!("matmul needs rank ≥ 2, got {sa:?} and {sb:?}")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(Error::shape(format!("matmul inner extents differ: {sa:?} · {sb:?}")));
        }
        let batch_a = &sa[..sa.len() - 2];
        let batch_b = &sb[..sb.len() - 2];
        let broadcast_b = batch_b.is_empty();
        if !broadcast_b && batch_a != batch_b {
            return Err(Error::shape(format!("matmul batch extents differ: {sa:?} · {sb:?}")));
        }
        let batch: usize = batch_a.iter().product();
        let mut out = vec![S::zero(); batch * m * n];
        for bi in 0..batch {
            let boff = if broadcast_b { 0 } else { bi * k * n };
            gemm(
                &a.data()[bi * m * k..(bi + 1) * m * k],
                &b.data()[boff..boff + k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        self.tape().add_macs((batch * m * k * n) as u64);
        let mut shape = batch_a.to_vec();
        shape.extend([m, n]);
        let out = Tensor::new(&shape, out)?;
        self.tape().record(&[self, other], out, move |ctx| {
            let (a, b) = (ctx.inputs[0].data(), ctx.inputs[1].data());
            let g = ctx.gout;
            let da = ctx.needs[0].then(|| {
                let mut da = vec![S::zero(); a.len()];
                for bi in 0..batch {
                    let boff = if broadcast_b { 0 } else { bi * k * n };
                    gemm_nt(
                        &g[bi * m * n..(bi + 1) * m * n],
                        &b[boff..boff + k * n],
                        &mut da[bi * m * k..(bi + 1) * m * k],
                        m,
                        n,
                        k,
                    );
                }
                da
            });
            let db = ctx.needs[1].then(|| {
                let mut db = vec![S::zero(); b.len()];
                for bi in 0..batch {
                    let boff = if broadcast_b { 0 } else { bi * k * n };
                    gemm_tn(
                        &a[bi * m * k..(bi + 1) * m * k],
                        &g[bi * m * n..(bi + 1) * m * n],
                        &mut db[boff..boff + k * n],
                        k,
                        m,
                        n,
                    );
                }
                db
            });
            Ok(vec![da, db])
        })
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, S>> {
        let out = self.value().reshaped(shape)?;
        self.tape()
            .record(&[self], out, |ctx| Ok(vec![Some(ctx.gout.to_vec())]))
    }

    /// Reorders axes; output axis `i` is input axis `axes[i]`.
    pub fn permute(self, axes: &[usize]) -> Result<Var<'t, S>> {
        let x = self.value();
        let nd = x.ndim();
        let mut seen = vec![false; nd];
        if axes.len() != nd || axes.iter().any(|&a| a >= nd || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape(format!("invalid permutation {axes:?} for rank {nd}")));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| x.shape()[a]).collect();
        let out = Tensor::new(&out_shape, permute_buf(x.data(), x.shape(), axes))?;
        let mut inverse = vec![0; nd];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        self.tape().record(&[self], out, move |ctx| {
            Ok(vec![Some(permute_buf(ctx.gout, ctx.output.shape(), &inverse))])
        })
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t, S>> {
        let x = self.value();
        let shape = x.shape();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape(format!(
                "narrow({axis}, {start}, {len}) out of range for {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let full = shape[axis];
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let total = x.len();
        let out = Tensor::new(&out_shape, out)?;
        self.tape().record(&[self], out, move |ctx| {
            let mut g = vec![S::zero(); total];
            for o in 0..outer {
                let base = (o * full + start) * inner;
                g[base..base + len * inner]
                    .copy_from_slice(&ctx.gout[o * len * inner..(o + 1) * len * inner]);
            }
            Ok(vec![Some(g)])
        })
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t, S>], axis: usize) -> Result<Var<'t, S>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat of zero tensors"))?;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let shape0 = values[0].shape().to_vec();
        if axis >= shape0.len() {
            return Err(Error::shape(format!("concat axis {axis} for rank {}", shape0.len())));
        }
        for v in &values[1..] {
            let s = v.shape();
            let ok = s.len() == shape0.len()
                && s.iter()
                    .zip(&shape0)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::shape(format!(
                    "concat along {axis}: {:?} vs {:?}",
                    shape0, s
                )));
            }
        }
        let outer: usize = shape0[..axis].iter().product();
        let inner: usize = shape0[axis + 1..].iter().product();
        let widths: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        let total_w: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * total_w * inner);
        for o in 0..outer {
            for (v, &w) in values.iter().zip(&widths) {
                out.extend_from_slice(&v.data()[o * w * inner..(o + 1) * w * inner]);
            }
        }
        let mut out_shape = shape0.clone();
        out_shape[axis] = total_w;
        let out = Tensor::new(&out_shape, out)?;
        first.tape().record(parts, out, move |ctx| {
            let mut grads: Vec<Vec<S>> = widths
                .iter()
                .map(|&w| Vec::with_capacity(outer * w * inner))
                .collect();
            let mut off = 0;
            for _ in 0..outer {
                for (g, &w) in grads.iter_mut().zip(&widths) {
                    g.extend_from_slice(&ctx.gout[off..off + w * inner]);
                    off += w * inner;
                }
            }
            Ok(grads.into_iter().map(Some).collect())
        })
    }
}
