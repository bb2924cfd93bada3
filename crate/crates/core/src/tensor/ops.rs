//! Forward kernels and their vector-Jacobian products.

use super::{Float, Op, Tensor};
use crate::error::{Error, Result};

#[inline]
pub(crate) fn dot<T: Float>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            lanes[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (x, y) in ra.iter().zip(rb) {
        tail += *x * *y;
    }
    ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3])) + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7])) + tail
}

/// `y += alpha * x`
#[inline]
pub(crate) fn axpy<T: Float>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * *xi;
    }
}

#[inline]
fn sigmoid<T: Float>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn shape_err<T: Float>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn as_matrix<T: Float>(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        s => Err(Error::Shape {
            op,
            lhs: s.to_vec(),
            rhs: vec![],
        }),
    }
}

impl<T: Float> Tensor<T> {
    /// Matrix product `a[m×k] · b[k×n]`.
    pub fn matmul(&self, b: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, k) = as_matrix(self, "matmul")?;
        let (k2, n) = as_matrix(b, "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", self, b));
        }
        let (ad, bd) = (self.data(), b.data());
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                axpy(ad[i * k + p], &bd[p * n..(p + 1) * n], row);
            }
        }
        drop((ad, bd));
        Ok(Tensor::from_op(
            out,
            vec![m, n],
            Op::MatMul {
                a: self.clone(),
                b: b.clone(),
            },
        ))
    }

    /// Linear map `x · wᵀ` for `x[…×k]` and a weight `w[n×k]` stored
    /// output-major.
    pub fn linear(&self, w: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, k) = as_matrix(w, "linear")?;
        if self.last_dim() != k || self.shape().is_empty() {
            return Err(shape_err("linear", self, w));
        }
        let m = self.rows();
        let (xd, wd) = (self.data(), w.data());
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let xi = &xd[i * k..(i + 1) * k];
            for (o, slot) in out[i * n..(i + 1) * n].iter_mut().enumerate() {
                *slot = dot(xi, &wd[o * k..(o + 1) * k]);
            }
        }
        drop((xd, wd));
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        Ok(Tensor::from_op(
            out,
            shape,
            Op::Linear {
                x: self.clone(),
                w: w.clone(),
            },
        ))
    }

    pub fn add(&self, b: &Tensor<T>) -> Result<Tensor<T>> {
        if self.shape() != b.shape() {
            return Err(shape_err("add", self, b));
        }
        let out = self.data().iter().zip(b.data().iter()).map(|(x, y)| *x + *y).collect();
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            Op::Add {
                a: self.clone(),
                b: b.clone(),
            },
        ))
    }

    /// Elementwise product.
    pub fn mul(&self, b: &Tensor<T>) -> Result<Tensor<T>> {
        if self.shape() != b.shape() {
            return Err(shape_err("mul", self, b));
        }
        let out = self.data().iter().zip(b.data().iter()).map(|(x, y)| *x * *y).collect();
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            Op::Mul {
                a: self.clone(),
                b: b.clone(),
            },
        ))
    }

    pub fn scale(&self, factor: T) -> Tensor<T> {
        let out = self.data().iter().map(|x| *x * factor).collect();
        Tensor::from_op(
            out,
            self.shape().to_vec(),
            Op::Scale {
                a: self.clone(),
                factor,
            },
        )
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum(&self) -> Tensor<T> {
        let s = self.data().iter().copied().sum();
        Tensor::from_op(vec![s], vec![], Op::Sum { a: self.clone() })
    }

    pub fn mean(&self) -> Tensor<T> {
        let n = T::lit(self.numel() as f64);
        self.sum().scale(T::one() / n)
    }

    /// Rows of a matrix picked by index; rows may repeat.
    pub fn index_rows(&self, rows: &[usize]) -> Result<Tensor<T>> {
        let (r, c) = as_matrix(self, "index_rows")?;
        let d = self.data();
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            if i >= r {
                return Err(Error::Index {
                    what: "index_rows",
                    index: i,
                    bound: r,
                });
            }
            out.extend_from_slice(&d[i * c..(i + 1) * c]);
        }
        drop(d);
        Ok(Tensor::from_op(
            out,
            vec![rows.len(), c],
            Op::IndexRows {
                src: self.clone(),
                rows: rows.to_vec(),
            },
        ))
    }

    /// `out[n_rows×c]` with `out[rows[i]] += self[i]`; untouched rows are zero.
    pub fn scatter_rows(&self, rows: &[usize], n_rows: usize) -> Result<Tensor<T>> {
        let (r, c) = as_matrix(self, "scatter_rows")?;
        if r != rows.len() {
            return Err(Error::Shape {
                op: "scatter_rows",
                lhs: self.shape().to_vec(),
                rhs: vec![rows.len()],
            });
        }
        let d = self.data();
        let mut out = vec![T::zero(); n_rows * c];
        for (i, &dst) in rows.iter().enumerate() {
            if dst >= n_rows {
                return Err(Error::Index {
                    what: "scatter_rows",
                    index: dst,
                    bound: n_rows,
                });
            }
            axpy(T::one(), &d[i * c..(i + 1) * c], &mut out[dst * c..(dst + 1) * c]);
        }
        drop(d);
        Ok(Tensor::from_op(
            out,
            vec![n_rows, c],
            Op::ScatterRows {
                src: self.clone(),
                rows: rows.to_vec(),
            },
        ))
    }

    /// Multiply row `i` of `self[m×n]` by `col[i]`.
    pub fn scale_rows(&self, col: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, n) = as_matrix(self, "scale_rows")?;
        if col.numel() != m {
            return Err(shape_err("scale_rows", self, col));
        }
        let (xd, cd) = (self.data(), col.data());
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            out.extend(xd[i * n..(i + 1) * n].iter().map(|v| *v * cd[i]));
        }
        drop((xd, cd));
        Ok(Tensor::from_op(
            out,
            vec![m, n],
            Op::ScaleRows {
                x: self.clone(),
                col: col.clone(),
            },
        ))
    }

    /// Divide each trailing vector by its sum.
    pub fn row_normalize(&self) -> Tensor<T> {
        let n = self.last_dim();
        let d = self.data();
        let mut out = Vec::with_capacity(d.len());
        for row in d.chunks(n.max(1)) {
            let s: T = row.iter().copied().sum();
            out.extend(row.iter().map(|v| *v / s));
        }
        drop(d);
        Tensor::from_op(out, self.shape().to_vec(), Op::RowNormalize { a: self.clone() })
    }

    /// Flat gather: `out[j] = self.flat[idx[j]]`, reshaped to `shape`.
    pub fn gather(&self, idx: &[usize], shape: &[usize]) -> Result<Tensor<T>> {
        if shape.iter().product::<usize>() != idx.len() {
            return Err(Error::Shape {
                op: "gather",
                lhs: shape.to_vec(),
                rhs: vec![idx.len()],
            });
        }
        let d = self.data();
        let mut out = Vec::with_capacity(idx.len());
        for &i in idx {
            out.push(*d.get(i).ok_or(Error::Index {
                what: "gather",
                index: i,
                bound: d.len(),
            })?);
        }
        drop(d);
        Ok(Tensor::from_op(
            out,
            shape.to_vec(),
            Op::Gather {
                a: self.clone(),
                idx: idx.to_vec(),
            },
        ))
    }
}

/// Softmax over the last axis, stabilised by subtracting the row maximum.
pub fn softmax<T: Float>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let n = x.last_dim();
    if n == 0 || x.shape().is_empty() {
        return Err(Error::Shape {
            op: "softmax",
            lhs: x.shape().to_vec(),
            rhs: vec![],
        });
    }
    let d = x.data();
    let mut out = Vec::with_capacity(d.len());
    for row in d.chunks(n) {
        softmax_row_into(row, &mut out);
    }
    drop(d);
    Ok(Tensor::from_op(out, x.shape().to_vec(), Op::Softmax { a: x.clone() }))
}

fn softmax_row_into<T: Float>(row: &[T], out: &mut Vec<T>) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let start = out.len();
    let mut total = T::zero();
    for v in row {
        let e = (*v - max).exp();
        total += e;
        out.push(e);
    }
    for v in &mut out[start..] {
        *v /= total;
    }
}

/// Elementwise `x · sigmoid(x)`.
pub fn silu<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    let out = x.data().iter().map(|v| *v * sigmoid(*v)).collect();
    Tensor::from_op(out, x.shape().to_vec(), Op::Silu { a: x.clone() })
}

/// `x / sqrt(mean(x²) + eps) · weight` over each trailing vector.
pub fn rmsnorm<T: Float>(x: &Tensor<T>, weight: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    let d = x.last_dim();
    if weight.numel() != d || d == 0 || x.shape().is_empty() {
        return Err(shape_err("rmsnorm", x, weight));
    }
    let (xd, wd) = (x.data(), weight.data());
    let mut out = Vec::with_capacity(xd.len());
    let mut inv_rms = Vec::with_capacity(x.rows());
    let dn = T::lit(d as f64);
    for row in xd.chunks(d) {
        let ms = row.iter().map(|v| *v * *v).sum::<T>() / dn;
        let r = T::one() / (ms + eps).sqrt();
        inv_rms.push(r);
        out.extend(row.iter().zip(wd.iter()).map(|(v, w)| *v * r * *w));
    }
    drop((xd, wd));
    Ok(Tensor::from_op(
        out,
        x.shape().to_vec(),
        Op::RmsNorm {
            x: x.clone(),
            w: weight.clone(),
            inv_rms,
        },
    ))
}

/// Mean over rows of `-log softmax(logits)[target]`.
pub fn cross_entropy<T: Float>(logits: &Tensor<T>, targets: &[usize]) -> Result<Tensor<T>> {
    let (t, v) = as_matrix(logits, "cross_entropy")?;
    if targets.len() != t {
        return Err(Error::Shape {
            op: "cross_entropy",
            lhs: logits.shape().to_vec(),
            rhs: vec![targets.len()],
        });
    }
    if t == 0 {
        return Err(Error::Empty("cross_entropy over zero rows".into()));
    }
    if let Some(&bad) = targets.iter().find(|&&y| y >= v) {
        return Err(Error::Index {
            what: "cross_entropy target",
            index: bad,
            bound: v,
        });
    }
    let d = logits.data();
    let mut probs = Vec::with_capacity(t * v);
    let mut loss = T::zero();
    for (row, &y) in d.chunks(v).zip(targets) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|z| (*z - max).exp()).sum::<T>().ln() + max;
        loss += lse - row[y];
        probs.extend(row.iter().map(|z| (*z - lse).exp()));
    }
    drop(d);
    let loss = loss / T::lit(t as f64);
    Ok(Tensor::from_op(
        vec![loss],
        vec![],
        Op::CrossEntropy {
            logits: logits.clone(),
            targets: targets.to_vec(),
            probs,
        },
    ))
}

/// Rotary position embedding on `x[T×(heads·head_dim)]`, rotating
/// interleaved pairs `(2i, 2i+1)` of each head by `pos · base^(-2i/head_dim)`.
pub fn rope<T: Float>(x: &Tensor<T>, n_heads: usize, base: f64) -> Result<Tensor<T>> {
    let (t, d) = as_matrix(x, "rope")?;
    if n_heads == 0 || d % n_heads != 0 || !(d / n_heads).is_multiple_of(2) {
        return Err(Error::Shape {
            op: "rope",
            lhs: x.shape().to_vec(),
            rhs: vec![n_heads],
        });
    }
    let hd = d / n_heads;
    let half = hd / 2;
    let mut cos = Vec::with_capacity(t * half);
    let mut sin = Vec::with_capacity(t * half);
    for pos in 0..t {
        for i in 0..half {
            let theta = pos as f64 * base.powf(-2.0 * i as f64 / hd as f64);
            cos.push(T::lit(theta.cos()));
            sin.push(T::lit(theta.sin()));
        }
    }
    let out = rotate(&x.data(), &cos, &sin, t, d, hd, false);
    Ok(Tensor::from_op(
        out,
        vec![t, d],
        Op::Rope {
            x: x.clone(),
            cos,
            sin,
            head_dim: hd,
        },
    ))
}

fn rotate<T: Float>(src: &[T], cos: &[T], sin: &[T], t: usize, d: usize, hd: usize, inverse: bool) -> Vec<T> {
    let half = hd / 2;
    let mut out = vec![T::zero(); src.len()];
    for pos in 0..t {
        for h in 0..d / hd {
            for i in 0..half {
                let base = pos * d + h * hd + 2 * i;
                let (c, s) = (cos[pos * half + i], sin[pos * half + i]);
                let s = if inverse { -s } else { s };
                let (a, b) = (src[base], src[base + 1]);
                out[base] = a * c - b * s;
                out[base + 1] = a * s + b * c;
            }
        }
    }
    out
}

/// Causal multi-head scaled dot-product attention over `q, k, v[T×d]`.
pub fn causal_attention<T: Float>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, n_heads: usize) -> Result<Tensor<T>> {
    let (t, d) = as_matrix(q, "attention")?;
    if k.shape() != q.shape() {
        return Err(shape_err("attention", q, k));
    }
    if v.shape() != q.shape() {
        return Err(shape_err("attention", q, v));
    }
    if n_heads == 0 || d % n_heads != 0 {
        return Err(Error::Shape {
            op: "attention",
            lhs: q.shape().to_vec(),
            rhs: vec![n_heads],
        });
    }
    let hd = d / n_heads;
    let scale = T::one() / T::lit(hd as f64).sqrt();
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut probs = vec![T::zero(); n_heads * t * t];
    let mut out = vec![T::zero(); t * d];
    let mut scores = Vec::with_capacity(t);
    for h in 0..n_heads {
        let off = h * hd;
        for i in 0..t {
            scores.clear();
            let qi = &qd[i * d + off..i * d + off + hd];
            for j in 0..=i {
                scores.push(dot(qi, &kd[j * d + off..j * d + off + hd]) * scale);
            }
            let p = &mut probs[(h * t + i) * t..(h * t + i) * t + i + 1];
            let mut tmp = Vec::with_capacity(i + 1);
            softmax_row_into(&scores, &mut tmp);
            p.copy_from_slice(&tmp);
            let oi = &mut out[i * d + off..i * d + off + hd];
            for (j, pj) in p.iter().enumerate() {
                axpy(*pj, &vd[j * d + off..j * d + off + hd], oi);
            }
        }
    }
    drop((qd, kd, vd));
    Ok(Tensor::from_op(
        out,
        vec![t, d],
        Op::CausalAttention {
            q: q.clone(),
            k: k.clone(),
            v: v.clone(),
            n_heads,
            probs,
        },
    ))
}

/// Gradient contributions of `node`'s inputs given the output gradient `g`.
/// Only inputs that require gradients are returned.
pub(super) fn backward_op<T: Float>(node: &Tensor<T>, g: &[T]) -> Vec<(Tensor<T>, Vec<T>)> {
    let mut out = Vec::with_capacity(3);
    let mut push = |t: &Tensor<T>, f: &mut dyn FnMut() -> Vec<T>| {
        if t.requires_grad() {
            out.push((t.clone(), f()));
        }
    };
    match &node.0.op {
        Op::Leaf => {}
        Op::MatMul { a, b } => {
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            push(a, &mut || {
                let bd = b.data();
                let mut da = vec![T::zero(); m * k];
                for i in 0..m {
                    let gi = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        da[i * k + p] = dot(gi, &bd[p * n..(p + 1) * n]);
                    }
                }
                da
            });
            push(b, &mut || {
                let ad = a.data();
                let mut db = vec![T::zero(); k * n];
                for i in 0..m {
                    let gi = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        axpy(ad[i * k + p], gi, &mut db[p * n..(p + 1) * n]);
                    }
                }
                db
            });
        }
        Op::Linear { x, w } => {
            let (n, k) = (w.shape()[0], w.shape()[1]);
            let m = x.rows();
            push(x, &mut || {
                let wd = w.data();
                let mut dx = vec![T::zero(); m * k];
                for i in 0..m {
                    let dxi = &mut dx[i * k..(i + 1) * k];
                    for o in 0..n {
                        let go = g[i * n + o];
                        if go != T::zero() {
                            axpy(go, &wd[o * k..(o + 1) * k], dxi);
                        }
                    }
                }
                dx
            });
            push(w, &mut || {
                let xd = x.data();
                let mut dw = vec![T::zero(); n * k];
                for i in 0..m {
                    let xi = &xd[i * k..(i + 1) * k];
                    for o in 0..n {
                        let go = g[i * n + o];
                        if go != T::zero() {
                            axpy(go, xi, &mut dw[o * k..(o + 1) * k]);
                        }
                    }
                }
                dw
            });
        }
        Op::Add { a, b } => {
            push(a, &mut || g.to_vec());
            push(b, &mut || g.to_vec());
        }
        Op::Mul { a, b } => {
            push(a, &mut || g.iter().zip(b.data().iter()).map(|(x, y)| *x * *y).collect());
            push(b, &mut || g.iter().zip(a.data().iter()).map(|(x, y)| *x * *y).collect());
        }
        Op::Scale { a, factor } => push(a, &mut || g.iter().map(|x| *x * *factor).collect()),
        Op::Sum { a } => push(a, &mut || vec![g[0]; a.numel()]),
        Op::Silu { a } => push(a, &mut || {
            a.data()
                .iter()
                .zip(g)
                .map(|(x, gi)| {
                    let s = sigmoid(*x);
                    *gi * s * (T::one() + *x * (T::one() - s))
                })
                .collect()
        }),
        Op::Softmax { a } => {
            let n = a.last_dim();
            push(a, &mut || {
                let y = node.data();
                let mut dx = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(n).zip(g.chunks(n)) {
                    let s = dot(yr, gr);
                    dx.extend(yr.iter().zip(gr).map(|(yi, gi)| *yi * (*gi - s)));
                }
                dx
            });
        }
        Op::RmsNorm { x, w, inv_rms } => {
            let d = x.last_dim();
            let dn = T::lit(d as f64);
            push(x, &mut || {
                let (xd, wd) = (x.data(), w.data());
                let mut dx = Vec::with_capacity(xd.len());
                for ((xr, gr), r) in xd.chunks(d).zip(g.chunks(d)).zip(inv_rms) {
                    let gw_x: T = xr
                        .iter()
                        .zip(gr)
                        .zip(wd.iter())
                        .map(|((xi, gi), wi)| *gi * *wi * *xi)
                        .sum();
                    let c = *r * *r * *r * gw_x / dn;
                    dx.extend(
                        xr.iter()
                            .zip(gr)
                            .zip(wd.iter())
                            .map(|((xi, gi), wi)| *r * *gi * *wi - c * *xi),
                    );
                }
                dx
            });
            push(w, &mut || {
                let xd = x.data();
                let mut dw = vec![T::zero(); d];
                for ((xr, gr), r) in xd.chunks(d).zip(g.chunks(d)).zip(inv_rms) {
                    for ((acc, xi), gi) in dw.iter_mut().zip(xr).zip(gr) {
                        *acc += *gi * *xi * *r;
                    }
                }
                dw
            });
        }
        Op::CrossEntropy { logits, targets, probs } => {
            let v = logits.shape()[1];
            let scale = g[0] / T::lit(targets.len() as f64);
            push(logits, &mut || {
                let mut dl: Vec<T> = probs.iter().map(|p| *p * scale).collect();
                for (row, &y) in targets.iter().enumerate() {
                    dl[row * v + y] -= scale;
                }
                dl
            });
        }
        Op::IndexRows { src, rows } => {
            let c = src.shape()[1];
            push(src, &mut || {
                let mut ds = vec![T::zero(); src.numel()];
                for (i, &r) in rows.iter().enumerate() {
                    axpy(T::one(), &g[i * c..(i + 1) * c], &mut ds[r * c..(r + 1) * c]);
                }
                ds
            });
        }
        Op::ScatterRows { src, rows } => {
            let c = src.shape()[1];
            push(src, &mut || {
                let mut ds = Vec::with_capacity(src.numel());
                for &r in rows {
                    ds.extend_from_slice(&g[r * c..(r + 1) * c]);
                }
                ds
            });
        }
        Op::ScaleRows { x, col } => {
            let n = x.shape()[1];
            push(x, &mut || {
                let cd = col.data();
                g.chunks(n)
                    .zip(cd.iter())
                    .flat_map(|(gr, c)| gr.iter().map(move |gi| *gi * *c))
                    .collect()
            });
            push(col, &mut || {
                let xd = x.data();
                xd.chunks(n).zip(g.chunks(n)).map(|(xr, gr)| dot(xr, gr)).collect()
            });
        }
        Op::RowNormalize { a } => {
            let n = a.last_dim();
            push(a, &mut || {
                let (ad, y) = (a.data(), node.data());
                let mut da = Vec::with_capacity(ad.len());
                for ((ar, yr), gr) in ad.chunks(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                    let s: T = ar.iter().copied().sum();
                    let gy = dot(gr, yr);
                    da.extend(gr.iter().map(|gi| (*gi - gy) / s));
                }
                da
            });
        }
        Op::Gather { a, idx } => push(a, &mut || {
            let mut da = vec![T::zero(); a.numel()];
            for (j, &i) in idx.iter().enumerate() {
                da[i] += g[j];
            }
            da
        }),
        Op::Rope { x, cos, sin, head_dim } => {
            let (t, d) = (x.shape()[0], x.shape()[1]);
            push(x, &mut || rotate(g, cos, sin, t, d, *head_dim, true));
        }
        Op::CausalAttention {
            q,
            k,
            v,
            n_heads,
            probs,
        } => {
            let (t, d) = (q.shape()[0], q.shape()[1]);
            let hd = d / n_heads;
            let scale = T::one() / T::lit(hd as f64).sqrt();
            let (qd, kd, vd) = (q.data(), k.data(), v.data());
            let mut dq = vec![T::zero(); t * d];
            let mut dk = vec![T::zero(); t * d];
            let mut dv = vec![T::zero(); t * d];
            let mut dp = Vec::with_capacity(t);
            for h in 0..*n_heads {
                let off = h * hd;
                for i in 0..t {
                    let gi = &g[i * d + off..i * d + off + hd];
                    let p = &probs[(h * t + i) * t..(h * t + i) * t + i + 1];
                    dp.clear();
                    for (j, pj) in p.iter().enumerate() {
                        dp.push(dot(gi, &vd[j * d + off..j * d + off + hd]));
                        axpy(*pj, gi, &mut dv[j * d + off..j * d + off + hd]);
                    }
                    let s = dot(p, &dp);
                    let qi = &qd[i * d + off..i * d + off + hd];
                    for (j, pj) in p.iter().enumerate() {
                        let ds = *pj * (dp[j] - s) * scale;
                        if ds == T::zero() {
                            continue;
                        }
                        axpy(
                            ds,
                            &kd[j * d + off..j * d + off + hd],
                            &mut dq[i * d + off..i * d + off + hd],
                        );
                        axpy(ds, qi, &mut dk[j * d + off..j * d + off + hd]);
                    }
                }
            }
            drop((qd, kd, vd));
            push(q, &mut || std::mem::take(&mut dq));
            push(k, &mut || std::mem::take(&mut dk));
            push(v, &mut || std::mem::take(&mut dv));
        }
    }
    out
}
