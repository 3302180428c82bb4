use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    /// Tanh approximation: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
    Gelu,
    Relu,
    Sigmoid,
}

const GELU_COEFF: f64 = 0.044715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

impl<'t, S: Scalar> Var<'t, S> {
    pub fn activation(self, kind: Activation) -> Result<Var<'t, S>> {
        let x = self.value();
        let c = S::of(SQRT_2_OVER_PI);
        let a = S::of(GELU_COEFF);
        let half = S::of(0.5);
        let one = S::one();
        let out = match kind {
            Activation::Gelu => x.map(|v| half * v * (one + (c * (v + a * v * v * v)).tanh())),
            Activation::Relu => x.map(|v| v.max(S::zero())),
            Activation::Sigmoid => x.map(|v| one / (one + (-v).exp())),
        };
        self.tape().record(&[self], out, move |ctx| {
            let xs = ctx.inputs[0].data();
            let ys = ctx.output.data();
            let g: Vec<S> = match kind {
                Activation::Gelu => xs
                    .iter()
                    .zip(ctx.gout)
                    .map(|(&v, &g)| {
                        let t = (c * (v + a * v * v * v)).tanh();
                        let dinner = c * (one + S::of(3.0) * a * v * v);
                        g * (half * (one + t) + half * v * (one - t * t) * dinner)
                    })
                    .collect(),
                Activation::Relu => xs
                    .iter()
                    .zip(ctx.gout)
                    .map(|(&v, &g)| if v > S::zero() { g } else { S::zero() })
                    .collect(),
                Activation::Sigmoid => ys
                    .iter()
                    .zip(ctx.gout)
                    .map(|(&y, &g)| g * y * (one - y))
                    .collect(),
            };
            Ok(vec![Some(g)])
        })
    }

    pub fn gelu(self) -> Result<Var<'t, S>> {
        self.activation(Activation::Gelu)
    }

    pub fn relu(self) -> Result<Var<'t, S>> {
        self.activation(Activation::Relu)
    }

    pub fn sigmoid(self) -> Result<Var<'t, S>> {
        self.activation(Activation::Sigmoid)
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(self, axis: usize) -> Result<Var<'t, S>> {
        let x = self.value();
        let shape = x.shape();
        if axis >= shape.len() {
            return Err(Error::shape(format!("softmax axis {axis} for shape {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![S::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let m = (0..len).map(|k| x.data()[at(k)]).fold(S::neg_infinity(), S::max);
                let mut total = S::zero();
                for k in 0..len {
                    let e = (x.data()[at(k)] - m).exp();
                    out[at(k)] = e;
                    total = total + e;
                }
                for k in 0..len {
                    out[at(k)] = out[at(k)] / total;
                }
            }
        }
        let out = Tensor::new(shape, out)?;
        self.tape().record(&[self], out, move |ctx| {
            let y = ctx.output.data();
            let mut g = vec![S::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * len + k) * inner + i;
                    let dot: S = (0..len).map(|k| ctx.gout[at(k)] * y[at(k)]).sum();
                    for k in 0..len {
                        g[at(k)] = y[at(k)] * (ctx.gout[at(k)] - dot);
                    }
                }
            }
            Ok(vec![Some(g)])
        })
    }

    /// Normalizes each vector along the last axis, then applies `gamma`, `beta`.
    pub fn layernorm(self, gamma: Var<'t, S>, beta: Var<'t, S>, eps: f64) -> Result<Var<'t, S>> {
        if !(eps > 0.0) {
            return Err(Error::Contract(format!("layernorm eps must be positive, got {eps}")));
        }
        let x = self.value();
        let c = *x.shape().last().expect("rank ≥ 1");
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::shape(format!(
                "layernorm over {c} channels with gamma {:?}, beta {:?}",
                gamma.shape(),
                beta.shape()
            )));
        }
        let (gv, bv) = (gamma.value(), beta.value());
        let inv_c = S::of(1.0 / c as f64);
        let eps = S::of(eps);
        let rows = x.len() / c;
        let mut xhat = vec![S::zero(); x.len()];
        let mut inv_std = vec![S::zero(); rows];
        let mut out = vec![S::zero(); x.len()];
        for r in 0..rows {
            let row = &x.data()[r * c..(r + 1) * c];
            let mean = row.iter().copied().sum::<S>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_c;
            let is = S::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for k in 0..c {
                let h = (row[k] - mean) * is;
                xhat[r * c + k] = h;
                out[r * c + k] = h * gv.data()[k] + bv.data()[k];
            }
        }
        let out = Tensor::new(x.shape(), out)?;
        self.tape().record(&[self, gamma, beta], out, move |ctx| {
            let gam = ctx.inputs[1].data();
            let g = ctx.gout;
            let dx = ctx.needs[0].then(|| {
                let mut dx = vec![S::zero(); g.len()];
                for r in 0..rows {
                    let gr = &g[r * c..(r + 1) * c];
                    let hr = &xhat[r * c..(r + 1) * c];
                    let dh: Vec<S> = gr.iter().zip(gam).map(|(&a, &b)| a * b).collect();
                    let mean_dh = dh.iter().copied().sum::<S>() * inv_c;
                    let mean_dh_h = dh.iter().zip(hr).map(|(&a, &b)| a * b).sum::<S>() * inv_c;
                    for k in 0..c {
                        dx[r * c + k] = inv_std[r] * (dh[k] - mean_dh - hr[k] * mean_dh_h);
                    }
                }
                dx
            });
            let mut dgamma = vec![S::zero(); c];
            let mut dbeta = vec![S::zero(); c];
            for r in 0..rows {
                for k in 0..c {
                    dgamma[k] = dgamma[k] + g[r * c + k] * xhat[r * c + k];
                    dbeta[k] = dbeta[k] + g[r * c + k];
                }
            }
            Ok(vec![dx, Some(dgamma), Some(dbeta)])
        })
    }

    /// Affine map over the last axis: `x · W + b` with `W: [C_in, C_out]`.
    pub fn linear(self, weight: Var<'t, S>, bias: Option<Var<'t, S>>) -> Result<Var<'t, S>> {
        let x = self.value();
        let wv = weight.value();
        let cin = *x.shape().last().expect("rank ≥ 1");
        let (wi, cout) = match wv.shape() {
            [a, b] => (*a, *b),
            s => return Err(Error::shape(format!("linear weight must be 2-D, got {s:?}"))),
        };
        if wi != cin {
            return Err(Error::shape(format!(
                "linear: input width {cin} vs weight {:?}",
                wv.shape()
            )));
        }
        if let Some(b) = bias {
            if b.shape() != [cout] {
                return Err(Error::shape(format!("linear bias {:?} for width {cout}", b.shape())));
            }
        }
        let rows = x.len() / cin;
        let mut out = vec![S::zero(); rows * cout];
        if let Some(b) = bias {
            let b = b.value();
            for row in out.chunks_mut(cout) {
                row.copy_from_slice(b.data());
            }
        }
        crate::tensor::ops::gemm(x.data(), wv.data(), &mut out, rows, cin, cout);
        self.tape().add_macs((rows * cin * cout) as u64);
        let mut shape = x.shape().to_vec();
        *shape.last_mut().expect("rank ≥ 1") = cout;
        let out = Tensor::new(&shape, out)?;
        let mut inputs = vec![self, weight];
        inputs.extend(bias);
        self.tape().record(&inputs, out, move |ctx| {
            let (xd, wd, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.gout);
            let dx = ctx.needs[0].then(|| {
                let mut dx = vec![S::zero(); xd.len()];
                crate::tensor::ops::gemm_nt(g, wd, &mut dx, rows, cout, cin);
                dx
            });
            let dw = ctx.needs[1].then(|| {
                let mut dw = vec![S::zero(); wd.len()];
                crate::tensor::ops::gemm_tn(xd, g, &mut dw, cin, rows, cout);
                dw
            });
            let mut grads = vec![dx, dw];
            if ctx.inputs.len() == 3 {
                let mut db = vec![S::zero(); cout];
                for row in g.chunks(cout) {
                    for (d, &v) in db.iter_mut().zip(row) {
                        *d = *d + v;
                    }
                }
                grads.push(Some(db));
            }
            Ok(grads)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn activation_points() {
        let tape = Tape::<f64>::no_grad();
        let x = tape.constant(Tensor::from_f64(&[3], &[-1.0, 0.0, 2.0]).unwrap());
        assert_eq!(x.relu().unwrap().value().data(), &[0.0, 0.0, 2.0]);
        assert_eq!(x.sigmoid().unwrap().value().data()[1], 0.5);
        assert_eq!(x.gelu().unwrap().value().data()[1], 0.0);
    }

    #[test]
    fn softmax_symmetric_and_shift_invariant() {
        let tape = Tape::<f64>::no_grad();
        let z = tape.constant(Tensor::zeros(&[2]).unwrap());
        assert_eq!(z.softmax(0).unwrap().value().data(), &[0.5, 0.5]);
        let x = tape.constant(Tensor::from_f64(&[2, 3], &[0.1, -2.0, 3.0, 1.0, 1.5, -0.25]).unwrap());
        let a = x.softmax(1).unwrap().value();
        let b = x.add_scalar(17.5).unwrap().softmax(1).unwrap().value();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-15);
        for row in a.data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layernorm_cases() {
        let tape = Tape::<f64>::no_grad();
        let ones = tape.constant(Tensor::ones(&[2]).unwrap());
        let zeros = tape.constant(Tensor::zeros(&[2]).unwrap());
        let c = tape.constant(Tensor::full(&[1, 1, 2], 3.0).unwrap());
        assert_eq!(c.layernorm(ones, zeros, 1e-5).unwrap().value().data(), &[0.0, 0.0]);
        let t = tape.constant(Tensor::from_f64(&[1, 1, 2], &[1.0, -1.0]).unwrap());
        let y = t.layernorm(ones, zeros, 1e-12).unwrap().value();
        assert!((y.data()[0] - 1.0).abs() < 1e-10 && (y.data()[1] + 1.0).abs() < 1e-10);
        let five = tape.constant(Tensor::full(&[2], 5.0).unwrap());
        assert_eq!(t.layernorm(zeros, five, 1e-5).unwrap().value().data(), &[5.0, 5.0]);
        assert!(t.layernorm(ones, zeros, 0.0).is_err());
    }

    #[test]
    fn linear_cases() {
        let tape = Tape::<f64>::no_grad();
        let x = tape.constant(Tensor::from_f64(&[1, 2], &[1.0, 1.0]).unwrap());
        let w = tape.constant(Tensor::from_f64(&[2, 1], &[1.0, 1.0]).unwrap());
        let b = tape.constant(Tensor::from_f64(&[1], &[0.5]).unwrap());
        assert_eq!(x.linear(w, Some(b)).unwrap().value().data(), &[2.5]);
        let eye = tape.constant(Tensor::from_f64(&[2, 2], &[1., 0., 0., 1.]).unwrap());
        assert_eq!(x.linear(eye, None).unwrap().value().data(), &[1.0, 1.0]);
        assert!(x.linear(b, None).is_err());
    }
}
