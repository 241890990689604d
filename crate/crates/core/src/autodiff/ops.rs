use super::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Exact GELU, `x·Φ(x)` with `Φ` from the error function.
#[inline]
pub fn gelu_scalar<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    x * half * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

#[inline]
fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let cdf = half * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * half).exp() * T::of(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

fn check_output<T: Scalar>(op: &'static str, v: &[T]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn matrix_dims(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        [c] => Ok((1, *c)),
        _ => Err(Error::Shape(format!("expected a matrix, got {shape:?}"))),
    }
}

impl<T: Scalar> Tape<T> {
    /// `a · bᵀ` for `a: [n, k]` and `b: [m, k]`; the result is `[n, m]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = matrix_dims(self.shape(a))?;
        let (m, kb) = matrix_dims(self.shape(b))?;
        if k != kb {
            return Err(Error::Shape(format!("matmul_nt inner dims {k} vs {kb}")));
        }
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = vec![T::zero(); n * m];
        for i in 0..n {
            let ar = &av[i * k..(i + 1) * k];
            for j in 0..m {
                let br = &bv[j * k..(j + 1) * k];
                let mut acc = T::zero();
                for t in 0..k {
                    acc = acc + ar[t] * br[t];
                }
                out[i * m + j] = acc;
            }
        }
        check_output("matmul", &out)?;
        let ng = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(vec![n, m], out, Op::MatMulNt { a, b, n, k, m }, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!("add {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let out: Vec<T> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| *x + *y).collect();
        check_output("add", &out)?;
        let ng = self.needs_grad(a) || self.needs_grad(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Add { a, b }, ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!("mul {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let out: Vec<T> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| *x * *y).collect();
        check_output("mul", &out)?;
        let ng = self.needs_grad(a) || self.needs_grad(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Mul { a, b }, ng))
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, c) = matrix_dims(self.shape(x))?;
        if self.value(bias).len() != c {
            return Err(Error::Shape(format!(
                "bias of length {} for {c} columns",
                self.value(bias).len()
            )));
        }
        let bv = self.value(bias);
        let out: Vec<T> = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, v)| *v + bv[i % c])
            .collect();
        check_output("add_bias", &out)?;
        let ng = self.needs_grad(x) || self.needs_grad(bias);
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::AddBias { x, bias }, ng))
    }

    /// Adds a `[seq, d]` table to every length-`seq` block of rows of `x`.
    pub fn add_tiled(&mut self, x: Var, p: Var) -> Result<Var> {
        let (rows, d) = matrix_dims(self.shape(x))?;
        let (seq, dp) = matrix_dims(self.shape(p))?;
        if d != dp || seq == 0 || rows % seq != 0 {
            return Err(Error::Shape(format!(
                "add_tiled {:?} with table {:?}",
                self.shape(x),
                self.shape(p)
            )));
        }
        let pv = self.value(p);
        let block = seq * d;
        let out: Vec<T> = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, v)| *v + pv[i % block])
            .collect();
        check_output("add_tiled", &out)?;
        let ng = self.needs_grad(x) || self.needs_grad(p);
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::AddTiled { x, p }, ng))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if !xv.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "gelu" });
        }
        let out: Vec<T> = xv.iter().map(|v| gelu_scalar(*v)).collect();
        check_output("gelu", &out)?;
        let ng = self.needs_grad(x);
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::Gelu { x }, ng))
    }

    /// Row-wise normalization over the last dimension followed by a
    /// per-column affine map.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps < 0.0 {
            return Err(Error::InvalidArgument(format!("layernorm eps {eps} < 0")));
        }
        let (rows, c) = matrix_dims(self.shape(x))?;
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::Shape(format!(
                "layernorm affine params must have length {c}"
            )));
        }
        let eps = T::of(eps);
        let cf = T::of(c as f64);
        let xv = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut xhat = vec![T::zero(); rows * c];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * c];
        for r in 0..rows {
            let row = &xv[r * c..(r + 1) * c];
            let mean = row.iter().copied().sum::<T>() / cf;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / cf;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + b[j];
            }
        }
        check_output("layernorm", &out)?;
        let ng = self.needs_grad(x) || self.needs_grad(gamma) || self.needs_grad(beta);
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Scaled dot-product multi-head self-attention.
    ///
    /// `q`, `k` and `v` are `[batch * seq, d]`; each consecutive block of
    /// `seq` rows is one sequence and `d` is split evenly across `heads`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, seq: usize, heads: usize) -> Result<Var> {
        let (rows, d) = matrix_dims(self.shape(q))?;
        if self.shape(k) != self.shape(q) || self.shape(v) != self.shape(q) {
            return Err(Error::Shape("attention q/k/v shapes differ".into()));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Shape(format!(
                "embedding dim {d} not divisible by {heads} heads"
            )));
        }
        if seq == 0 || rows % seq != 0 {
            return Err(Error::Shape(format!("{rows} rows is not a multiple of seq {seq}")));
        }
        let batch = rows / seq;
        let dh = d / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        let mut out = vec![T::zero(); rows * d];
        let mut logits = vec![T::zero(); seq];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..seq {
                    let qi = &qv[(b * seq + i) * d + off..][..dh];
                    let mut max = T::neg_infinity();
                    for j in 0..seq {
                        let kj = &kv[(b * seq + j) * d + off..][..dh];
                        let mut s = T::zero();
                        for t in 0..dh {
                            s = s + qi[t] * kj[t];
                        }
                        logits[j] = s * scale;
                        max = max.max(logits[j]);
                    }
                    let mut z = T::zero();
                    for l in logits.iter_mut() {
                        *l = (*l - max).exp();
                        z = z + *l;
                    }
                    let p = &mut probs[((b * heads + h) * seq + i) * seq..][..seq];
                    for j in 0..seq {
                        p[j] = logits[j] / z;
                    }
                    let oi = &mut out[(b * seq + i) * d + off..][..dh];
                    for j in 0..seq {
                        let vj = &vv[(b * seq + j) * d + off..][..dh];
                        for t in 0..dh {
                            oi[t] = oi[t] + p[j] * vj[t];
                        }
                    }
                }
            }
        }
        check_output("attention", &out)?;
        let ng = self.needs_grad(q) || self.needs_grad(k) || self.needs_grad(v);
        let shape = self.shape(q).to_vec();
        Ok(self.push(
            shape,
            out,
            Op::Attention {
                q,
                k,
                v,
                seq,
                heads,
                probs,
            },
            ng,
        ))
    }

    /// Averages each block of `seq` rows: `[batch * seq, d]` to `[batch, d]`.
    pub fn mean_pool(&mut self, x: Var, seq: usize) -> Result<Var> {
        let (rows, d) = matrix_dims(self.shape(x))?;
        if seq == 0 || rows % seq != 0 {
            return Err(Error::Shape(format!("{rows} rows is not a multiple of seq {seq}")));
        }
        let batch = rows / seq;
        let inv = T::of(1.0 / seq as f64);
        let xv = self.value(x);
        let mut out = vec![T::zero(); batch * d];
        for b in 0..batch {
            for t in 0..seq {
                let row = &xv[(b * seq + t) * d..][..d];
                for j in 0..d {
                    out[b * d + j] = out[b * d + j] + row[j];
                }
            }
            for j in 0..d {
                out[b * d + j] = out[b * d + j] * inv;
            }
        }
        check_output("mean_pool", &out)?;
        let ng = self.needs_grad(x);
        Ok(self.push(vec![batch, d], out, Op::MeanPool { x, seq }, ng))
    }

    /// Mean softmax cross-entropy over the rows of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (rows, c) = matrix_dims(self.shape(logits))?;
        if labels.len() != rows || rows == 0 {
            return Err(Error::Shape(format!("{} labels for {rows} logit rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::InvalidArgument(format!("label {bad} >= {c} classes")));
        }
        let lv = self.value(logits);
        let mut probs = vec![T::zero(); rows * c];
        let mut loss = T::zero();
        for r in 0..rows {
            let row = &lv[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|v| (*v - max).exp()).sum();
            let logz = z.ln() + max;
            for j in 0..c {
                probs[r * c + j] = (row[j] - logz).exp();
            }
            loss = loss + logz - row[labels[r]];
        }
        let out = vec![loss / T::of(rows as f64)];
        check_output("cross_entropy", &out)?;
        let ng = self.needs_grad(logits);
        Ok(self.push(
            vec![1],
            out,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            ng,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = vec![self.value(x).iter().copied().sum::<T>()];
        check_output("sum", &out)?;
        let ng = self.needs_grad(x);
        Ok(self.push(vec![1], out, Op::Sum { x }, ng))
    }
}

fn accumulate<T: Scalar>(
    tape: &Tape<T>,
    grads: &mut [Option<Vec<T>>],
    target: Var,
    f: impl FnOnce(&mut [T]),
) {
    if !tape.needs_grad(target) {
        return;
    }
    let len = tape.value(target).len();
    let g = grads[target.0].get_or_insert_with(|| vec![T::zero(); len]);
    f(g);
}

pub(super) fn backprop<T: Scalar>(tape: &Tape<T>, idx: usize, up: &[T], grads: &mut [Option<Vec<T>>]) {
    let node = tape.node(super::Var(idx));
    match &node.op {
        Op::Leaf => {}
        Op::MatMulNt { a, b, n, k, m } => {
            let (n, k, m) = (*n, *k, *m);
            let bv = tape.value(*b);
            accumulate(tape, grads, *a, |ga| {
                for i in 0..n {
                    let gi = &mut ga[i * k..(i + 1) * k];
                    for j in 0..m {
                        let u = up[i * m + j];
                        let br = &bv[j * k..(j + 1) * k];
                        for t in 0..k {
                            gi[t] = gi[t] + u * br[t];
                        }
                    }
                }
            });
            let av = tape.value(*a);
            accumulate(tape, grads, *b, |gb| {
                for i in 0..n {
                    let ar = &av[i * k..(i + 1) * k];
                    for j in 0..m {
                        let u = up[i * m + j];
                        let gj = &mut gb[j * k..(j + 1) * k];
                        for t in 0..k {
                            gj[t] = gj[t] + u * ar[t];
                        }
                    }
                }
            });
        }
        Op::Add { a, b } => {
            for target in [*a, *b] {
                accumulate(tape, grads, target, |g| {
                    for (gi, u) in g.iter_mut().zip(up) {
                        *gi = *gi + *u;
                    }
                });
            }
        }
        Op::Mul { a, b } => {
            let (av, bv) = (tape.value(*a), tape.value(*b));
            accumulate(tape, grads, *a, |g| {
                for i in 0..g.len() {
                    g[i] = g[i] + up[i] * bv[i];
                }
            });
            accumulate(tape, grads, *b, |g| {
                for i in 0..g.len() {
                    g[i] = g[i] + up[i] * av[i];
                }
            });
        }
        Op::AddBias { x, bias } => {
            accumulate(tape, grads, *x, |g| {
                for (gi, u) in g.iter_mut().zip(up) {
                    *gi = *gi + *u;
                }
            });
            let c = tape.value(*bias).len();
            accumulate(tape, grads, *bias, |g| {
                for (i, u) in up.iter().enumerate() {
                    g[i % c] = g[i % c] + *u;
                }
            });
        }
        Op::AddTiled { x, p } => {
            accumulate(tape, grads, *x, |g| {
                for (gi, u) in g.iter_mut().zip(up) {
                    *gi = *gi + *u;
                }
            });
            let block = tape.value(*p).len();
            accumulate(tape, grads, *p, |g| {
                for (i, u) in up.iter().enumerate() {
                    g[i % block] = g[i % block] + *u;
                }
            });
        }
        Op::Gelu { x } => {
            let xv = tape.value(*x);
            accumulate(tape, grads, *x, |g| {
                for i in 0..g.len() {
                    g[i] = g[i] + up[i] * gelu_grad(xv[i]);
                }
            });
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let c = tape.value(*gamma).len();
            let rows = rstd.len();
            let gv = tape.value(*gamma);
            accumulate(tape, grads, *gamma, |g| {
                for r in 0..rows {
                    for j in 0..c {
                        g[j] = g[j] + up[r * c + j] * xhat[r * c + j];
                    }
                }
            });
            accumulate(tape, grads, *beta, |g| {
                for r in 0..rows {
                    for j in 0..c {
                        g[j] = g[j] + up[r * c + j];
                    }
                }
            });
            let cf = T::of(c as f64);
            accumulate(tape, grads, *x, |g| {
                let mut dxhat = vec![T::zero(); c];
                for r in 0..rows {
                    let mut mean_d = T::zero();
                    let mut mean_dx = T::zero();
                    for j in 0..c {
                        dxhat[j] = up[r * c + j] * gv[j];
                        mean_d = mean_d + dxhat[j];
                        mean_dx = mean_dx + dxhat[j] * xhat[r * c + j];
                    }
                    mean_d = mean_d / cf;
                    mean_dx = mean_dx / cf;
                    for j in 0..c {
                        g[r * c + j] =
                            g[r * c + j] + rstd[r] * (dxhat[j] - mean_d - xhat[r * c + j] * mean_dx);
                    }
                }
            });
        }
        Op::Attention {
            q,
            k,
            v,
            seq,
            heads,
            probs,
        } => {
            let (seq, heads) = (*seq, *heads);
            let d = tape.shape(*q)[1];
            let rows = tape.value(*q).len() / d;
            let batch = rows / seq;
            let dh = d / heads;
            let scale = T::of(1.0 / (dh as f64).sqrt());
            let (qv, kv, vv) = (tape.value(*q), tape.value(*k), tape.value(*v));
            let mut dq = vec![T::zero(); rows * d];
            let mut dk = vec![T::zero(); rows * d];
            let mut dv = vec![T::zero(); rows * d];
            let mut dp = vec![T::zero(); seq];
            for b in 0..batch {
                for h in 0..heads {
                    let off = h * dh;
                    for i in 0..seq {
                        let p = &probs[((b * heads + h) * seq + i) * seq..][..seq];
                        let ui = &up[(b * seq + i) * d + off..][..dh];
                        let mut dot = T::zero();
                        for j in 0..seq {
                            let vj = &vv[(b * seq + j) * d + off..][..dh];
                            let mut s = T::zero();
                            for t in 0..dh {
                                s = s + ui[t] * vj[t];
                            }
                            dp[j] = s;
                            dot = dot + s * p[j];
                            let dvj = &mut dv[(b * seq + j) * d + off..][..dh];
                            for t in 0..dh {
                                dvj[t] = dvj[t] + p[j] * ui[t];
                            }
                        }
                        let qi = &qv[(b * seq + i) * d + off..][..dh];
                        for j in 0..seq {
                            let ds = p[j] * (dp[j] - dot) * scale;
                            let kj = &kv[(b * seq + j) * d + off..][..dh];
                            let dqi = &mut dq[(b * seq + i) * d + off..][..dh];
                            for t in 0..dh {
                                dqi[t] = dqi[t] + ds * kj[t];
                            }
                            let dkj = &mut dk[(b * seq + j) * d + off..][..dh];
                            for t in 0..dh {
                                dkj[t] = dkj[t] + ds * qi[t];
                            }
                        }
                    }
                }
            }
            for (target, src) in [(*q, dq), (*k, dk), (*v, dv)] {
                accumulate(tape, grads, target, |g| {
                    for (gi, s) in g.iter_mut().zip(&src) {
                        *gi = *gi + *s;
                    }
                });
            }
        }
        Op::MeanPool { x, seq } => {
            let seq = *seq;
            let d = tape.shape(*x)[1];
            let inv = T::of(1.0 / seq as f64);
            accumulate(tape, grads, *x, |g| {
                for (i, gi) in g.iter_mut().enumerate() {
                    let b = i / (seq * d);
                    let j = i % d;
                    *gi = *gi + up[b * d + j] * inv;
                }
            });
        }
        Op::CrossEntropy {
            logits,
            labels,
            probs,
        } => {
            let rows = labels.len();
            let c = probs.len() / rows;
            let scale = up[0] / T::of(rows as f64);
            accumulate(tape, grads, *logits, |g| {
                for r in 0..rows {
                    for j in 0..c {
                        let target = if labels[r] == j { T::one() } else { T::zero() };
                        g[r * c + j] = g[r * c + j] + (probs[r * c + j] - target) * scale;
                    }
                }
            });
        }
        Op::Sum { x } => {
            accumulate(tape, grads, *x, |g| {
                for gi in g.iter_mut() {
                    *gi = *gi + up[0];
                }
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    /// Φ(1) by composite Simpson quadrature of the standard normal density.
    fn normal_cdf_quadrature(x: f64) -> f64 {
        let n = 20_000;
        let h = x / n as f64;
        let pdf = |t: f64| (-t * t / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let mut s = pdf(0.0) + pdf(x);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * pdf(i as f64 * h);
        }
        0.5 + s * h / 3.0
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu_scalar(0.0f64), 0.0);
        assert!((gelu_scalar(10.0f64) - 10.0).abs() < 1e-6);
        let expected = normal_cdf_quadrature(1.0);
        assert!((gelu_scalar(1.0f64) - expected).abs() < 1e-12);
        assert!((gelu_scalar(1.0f64) - 0.841345).abs() < 1e-6);
    }

    #[test]
    fn gelu_rejects_non_finite() {
        let mut tape = Tape::<f64>::new();
        // Leaves are validated, so sneak a NaN in through an overflowing product.
        let big = tape.constant(vec![1], vec![1e200]).unwrap();
        assert!(tape.mul(big, big).is_err());
    }

    fn ln(x: &[f64], eps: f64) -> Vec<f64> {
        let mut tape = Tape::<f64>::new();
        let c = x.len();
        let xv = tape.constant(vec![1, c], x.to_vec()).unwrap();
        let g = tape.constant(vec![c], vec![1.0; c]).unwrap();
        let b = tape.constant(vec![c], vec![0.0; c]).unwrap();
        let y = tape.layernorm(xv, g, b, eps).unwrap();
        tape.value(y).to_vec()
    }

    #[test]
    fn layernorm_examples() {
        assert_eq!(ln(&[3.0, 3.0, 3.0], 1e-5), vec![0.0, 0.0, 0.0]);
        assert_eq!(ln(&[1.0, -1.0], 0.0), vec![1.0, -1.0]);
        let y = ln(&[0.0, 2.0, 4.0], 1e-12);
        // mean 2, population std sqrt(8/3)
        let s = 2.0 / (8.0f64 / 3.0).sqrt();
        assert!((y[0] + s).abs() < 1e-9 && y[1].abs() < 1e-12 && (y[2] - s).abs() < 1e-9);
        assert!((s - 1.224745).abs() < 1e-6);
    }

    #[test]
    fn layernorm_shape_mismatch() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let g = tape.constant(vec![2], vec![1.0; 2]).unwrap();
        let b = tape.constant(vec![3], vec![0.0; 3]).unwrap();
        assert!(tape.layernorm(x, g, b, 1e-5).is_err());
    }

    #[test]
    fn attention_single_token_returns_value() {
        let mut tape = Tape::<f64>::new();
        let q = tape.constant(vec![1, 4], vec![0.3, -1.0, 2.0, 0.1]).unwrap();
        let k = tape.constant(vec![1, 4], vec![1.0, 0.5, -0.2, 0.0]).unwrap();
        let v = tape.constant(vec![1, 4], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let o = tape.attention(q, k, v, 1, 2).unwrap();
        assert_eq!(tape.value(o), &[5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn attention_identical_keys_average_values() {
        let mut tape = Tape::<f64>::new();
        let q = tape.constant(vec![3, 2], vec![0.1, 0.2, -3.0, 1.0, 2.0, 2.0]).unwrap();
        let k = tape.constant(vec![3, 2], vec![1.0, -1.0, 1.0, -1.0, 1.0, -1.0]).unwrap();
        let v = tape.constant(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 8.0, 0.0]).unwrap();
        let o = tape.attention(q, k, v, 3, 1).unwrap();
        for row in tape.value(o).chunks(2) {
            assert!((row[0] - 4.0).abs() < 1e-12);
            assert!((row[1] - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_two_tokens_matches_scalar_loop() {
        // q, k, v are 2 tokens x 2 dims, one head.
        let qd = [0.5, -0.25, 1.5, 0.75];
        let kd = [-1.0, 0.4, 0.3, 0.9];
        let vd = [2.0, -1.0, 0.5, 3.0];
        let scale = 1.0 / 2f64.sqrt();
        let mut expected = [0.0; 4];
        for i in 0..2 {
            let s0 = (qd[i * 2] * kd[0] + qd[i * 2 + 1] * kd[1]) * scale;
            let s1 = (qd[i * 2] * kd[2] + qd[i * 2 + 1] * kd[3]) * scale;
            let p0 = 1.0 / (1.0 + (s1 - s0).exp());
            let p1 = 1.0 - p0;
            expected[i * 2] = p0 * vd[0] + p1 * vd[2];
            expected[i * 2 + 1] = p0 * vd[1] + p1 * vd[3];
        }
        let mut tape = Tape::<f64>::new();
        let q = tape.constant(vec![2, 2], qd.to_vec()).unwrap();
        let k = tape.constant(vec![2, 2], kd.to_vec()).unwrap();
        let v = tape.constant(vec![2, 2], vd.to_vec()).unwrap();
        let o = tape.attention(q, k, v, 2, 1).unwrap();
        for (a, e) in tape.value(o).iter().zip(expected) {
            assert!((a - e).abs() < 1e-14);
        }
    }

    #[test]
    fn attention_rejects_indivisible_heads() {
        let mut tape = Tape::<f64>::new();
        let q = tape.constant(vec![1, 3], vec![0.0; 3]).unwrap();
        assert!(tape.attention(q, q, q, 1, 2).is_err());
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut tape = Tape::<f64>::new();
        let l = Tensor::new(vec![2, 4], vec![0.0; 8]).unwrap().with_requires_grad(true);
        let lv = tape.leaf(&l).unwrap();
        let loss = tape.cross_entropy(lv, &[1, 3]).unwrap();
        assert!((tape.value(loss)[0] - 4f64.ln()).abs() < 1e-14);
        let g = tape.backward(loss).unwrap();
        let gl = g.get(lv).unwrap();
        assert!((gl[1] - (0.25 - 1.0) / 2.0).abs() < 1e-15);
        assert!((gl[0] - 0.125).abs() < 1e-15);
    }
}
