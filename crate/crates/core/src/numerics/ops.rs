//! Differentiable ops recorded on a [`Tape`].

use super::real::{gemm, Real};
use super::tape::{Tape, Var};
use super::tensor::{as_matrix, Tensor};
use crate::error::{Error, Result};

/// √(2/π) and the cubic coefficient of the tanh-form GELU.
pub const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
pub const GELU_CUBIC: f64 = 0.044_715;

/// Statistics reported alongside the cross-entropy loss.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CrossEntropyStats {
    pub loss: f64,
    pub correct: usize,
    pub counted: usize,
}

impl CrossEntropyStats {
    pub fn accuracy(&self) -> f64 {
        if self.counted == 0 {
            0.0
        } else {
            self.correct as f64 / self.counted as f64
        }
    }
}

/// Tanh-approximation GELU, evaluated as `x·σ(2u)` with
/// `u = √(2/π)(x + 0.044715x³)` (equal to `½x(1 + tanh u)`).
pub fn gelu_scalar<T: Real>(x: T) -> T {
    let u = T::lit(GELU_SQRT_2_OVER_PI) * (x + T::lit(GELU_CUBIC) * x * x * x);
    x / (T::one() + (-(u + u)).exp())
}

fn gelu_grad_scalar<T: Real>(x: T) -> T {
    let c = T::lit(GELU_SQRT_2_OVER_PI);
    let k = T::lit(GELU_CUBIC);
    let u = c * (x + k * x * x * x);
    let s = T::one() / (T::one() + (-(u + u)).exp());
    let du = c * (T::one() + T::lit(3.0) * k * x * x);
    s + x * s * (T::one() - s) * (du + du)
}

pub fn softplus_scalar<T: Real>(x: T) -> T {
    // log(1 + e^x) without overflow
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn softplus_inverse(y: f64) -> f64 {
    assert!(y > 0.0);
    y + (-(-y).exp_m1()).ln()
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Real> Tape<T> {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("shapes differ: {:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    /// `a[m×k] @ b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = as_matrix("matmul", self.value(a))?;
        let (k2, n) = as_matrix("matmul", self.value(b))?;
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                format!("inner extents differ: {:?} x {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, T::one(), self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        self.custom(
            "matmul",
            Tensor::from_parts(vec![m, n], out),
            &[a, b],
            Box::new(move |inp, _out, g, needs| {
                let ga = needs[0].then(|| {
                    let mut d = vec![T::zero(); m * k];
                    gemm(m, n, k, T::one(), g, false, inp[1].data(), true, &mut d, false);
                    d
                });
                let gb = needs[1].then(|| {
                    let mut d = vec![T::zero(); k * n];
                    gemm(k, m, n, T::one(), inp[0].data(), true, g, false, &mut d, false);
                    d
                });
                vec![ga, gb]
            }),
        )
    }

    /// `a[m×k] @ b[n×k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = as_matrix("matmul_nt", self.value(a))?;
        let (n, k2) = as_matrix("matmul_nt", self.value(b))?;
        if k != k2 {
            return Err(Error::dim(
                "matmul_nt",
                format!("inner extents differ: {:?} x {:?}ᵀ", self.shape(a), self.shape(b)),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, T::one(), self.value(a).data(), false, self.value(b).data(), true, &mut out, false);
        self.custom(
            "matmul_nt",
            Tensor::from_parts(vec![m, n], out),
            &[a, b],
            Box::new(move |inp, _out, g, needs| {
                let ga = needs[0].then(|| {
                    let mut d = vec![T::zero(); m * k];
                    gemm(m, n, k, T::one(), g, false, inp[1].data(), false, &mut d, false);
                    d
                });
                let gb = needs[1].then(|| {
                    let mut d = vec![T::zero(); n * k];
                    gemm(n, m, k, T::one(), g, true, inp[0].data(), false, &mut d, false);
                    d
                });
                vec![ga, gb]
            }),
        )
    }

    /// Per-head `alpha · a[h] @ b[h]` (or `b[h]ᵀ` when `trans_b`).
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool, alpha: f64) -> Result<Var> {
        let (h, m, k) = match self.shape(a) {
            &[h, m, k] => (h, m, k),
            s => return Err(Error::dim("bmm", format!("expected rank 3, got {s:?}"))),
        };
        let (h2, k2, n) = match (self.shape(b), trans_b) {
            (&[h, n, k], true) => (h, k, n),
            (&[h, k, n], false) => (h, k, n),
            (s, _) => return Err(Error::dim("bmm", format!("expected rank 3, got {s:?}"))),
        };
        if h != h2 || k != k2 {
            return Err(Error::dim(
                "bmm",
                format!("incompatible {:?} x {:?} (trans_b={trans_b})", self.shape(a), self.shape(b)),
            ));
        }
        let alpha = T::lit(alpha);
        let mut out = vec![T::zero(); h * m * n];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for hh in 0..h {
                gemm(
                    m,
                    k,
                    n,
                    alpha,
                    &av[hh * m * k..],
                    false,
                    &bv[hh * k * n..],
                    trans_b,
                    &mut out[hh * m * n..],
                    false,
                );
            }
        }
        self.custom(
            "bmm",
            Tensor::from_parts(vec![h, m, n], out),
            &[a, b],
            Box::new(move |inp, _out, g, needs| {
                let (av, bv) = (inp[0].data(), inp[1].data());
                let ga = needs[0].then(|| {
                    let mut d = vec![T::zero(); h * m * k];
                    for hh in 0..h {
                        // dA = g · op(B)ᵀ
                        gemm(m, n, k, alpha, &g[hh * m * n..], false, &bv[hh * k * n..], !trans_b, &mut d[hh * m * k..], false);
                    }
                    d
                });
                let gb = needs[1].then(|| {
                    let mut d = vec![T::zero(); h * k * n];
                    for hh in 0..h {
                        if trans_b {
                            // B stored n×k: dB = gᵀ · A
                            gemm(n, m, k, alpha, &g[hh * m * n..], true, &av[hh * m * k..], false, &mut d[hh * k * n..], false);
                        } else {
                            gemm(k, m, n, alpha, &av[hh * m * k..], true, &g[hh * m * n..], false, &mut d[hh * k * n..], false);
                        }
                    }
                    d
                });
                vec![ga, gb]
            }),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x + *y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.custom(
            "add",
            Tensor::from_parts(shape, out),
            &[a, b],
            Box::new(|_inp, _out, g, needs| vec![needs[0].then(|| g.to_vec()), needs[1].then(|| g.to_vec())]),
        )
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x * *y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.custom(
            "mul",
            Tensor::from_parts(shape, out),
            &[a, b],
            Box::new(|inp, _out, g, needs| {
                let ga = needs[0].then(|| g.iter().zip(inp[1].data()).map(|(g, y)| *g * *y).collect());
                let gb = needs[1].then(|| g.iter().zip(inp[0].data()).map(|(g, x)| *g * *x).collect());
                vec![ga, gb]
            }),
        )
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let s = T::lit(s);
        let v = self.value(a);
        let out = Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|x| *x * s).collect());
        self.custom(
            "scale",
            out,
            &[a],
            Box::new(move |_inp, _out, g, _| vec![Some(g.iter().map(|g| *g * s).collect())]),
        )
    }

    fn unary(
        &mut self,
        op: &'static str,
        a: Var,
        f: impl Fn(T) -> T,
        df: impl Fn(T) -> T + 'static,
    ) -> Result<Var> {
        let v = self.value(a);
        let out = Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|x| f(*x)).collect());
        self.custom(
            op,
            out,
            &[a],
            Box::new(move |inp, _out, g, _| {
                vec![Some(g.iter().zip(inp[0].data()).map(|(g, x)| *g * df(*x)).collect())]
            }),
        )
    }

    /// Tanh-approximation GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary("gelu", a, gelu_scalar, gelu_grad_scalar)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(
            "relu",
            a,
            |x| x.max(T::zero()),
            |x| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary("softplus", a, softplus_scalar, sigmoid)
    }

    /// Root-mean-square normalisation along the last axis, times `gain`.
    pub fn rmsnorm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let d = *self.shape(x).last().unwrap();
        if self.shape(gain) != [d] {
            return Err(Error::dim(
                "rmsnorm",
                format!("gain shape {:?} for last extent {d}", self.shape(gain)),
            ));
        }
        let eps = T::lit(eps);
        let dt = T::lit(d as f64);
        let (rows, _) = self.value(x).rows_cols();
        let xv = self.value(x).data();
        let gv = self.value(gain).data();
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let ms = row.iter().map(|v| *v * *v).sum::<T>() / dt;
            let inv = T::one() / (ms + eps).sqrt();
            for ((o, v), g) in out[r * d..(r + 1) * d].iter_mut().zip(row).zip(gv) {
                *o = *v * inv * *g;
            }
        }
        let shape = self.shape(x).to_vec();
        self.custom(
            "rmsnorm",
            Tensor::from_parts(shape, out),
            &[x, gain],
            Box::new(move |inp, _out, g, needs| {
                let xv = inp[0].data();
                let gv = inp[1].data();
                let mut dx = needs[0].then(|| vec![T::zero(); xv.len()]);
                let mut dg = needs[1].then(|| vec![T::zero(); d]);
                for r in 0..rows {
                    let row = &xv[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let ms = row.iter().map(|v| *v * *v).sum::<T>() / dt;
                    let inv = T::one() / (ms + eps).sqrt();
                    if let Some(dg) = dg.as_mut() {
                        for ((acc, v), go) in dg.iter_mut().zip(row).zip(gr) {
                            *acc += *v * inv * *go;
                        }
                    }
                    if let Some(dx) = dx.as_mut() {
                        let dot: T = row.iter().zip(gr).zip(gv).map(|((v, go), gn)| *v * *go * *gn).sum();
                        let coef = inv * inv * inv * dot / dt;
                        for (((o, v), go), gn) in dx[r * d..(r + 1) * d].iter_mut().zip(row).zip(gr).zip(gv) {
                            *o = inv * *gn * *go - *v * coef;
                        }
                    }
                }
                vec![dx, dg]
            }),
        )
    }

    /// Rows of `table[V×d]` selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let (v, d) = as_matrix("embedding", self.value(table))?;
        if ids.is_empty() {
            return Err(Error::dim("embedding", "empty id list"));
        }
        if let Some(bad) = ids.iter().find(|&&i| i as usize >= v) {
            return Err(Error::Index {
                op: "embedding",
                detail: format!("token id {bad} outside vocabulary of {v}"),
            });
        }
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i as usize * d..(i as usize + 1) * d]);
        }
        let ids = ids.to_vec();
        self.custom(
            "embedding",
            Tensor::from_parts(vec![ids.len(), d], out),
            &[table],
            Box::new(move |_inp, _out, g, _| {
                let mut dt = vec![T::zero(); v * d];
                for (r, &i) in ids.iter().enumerate() {
                    let dst = &mut dt[i as usize * d..(i as usize + 1) * d];
                    dst.iter_mut().zip(&g[r * d..(r + 1) * d]).for_each(|(a, b)| *a += *b);
                }
                vec![Some(dt)]
            }),
        )
    }

    /// Adds `bias` (`[h×n×n]` or `[n×n]`, optional) to `logits[h×n×n]`,
    /// masks keys after the query and normalises each row.
    pub fn biased_causal_softmax(&mut self, logits: Var, bias: Option<Var>) -> Result<Var> {
        let (h, n) = match self.shape(logits) {
            &[h, n, n2] if n == n2 => (h, n),
            s => {
                return Err(Error::dim(
                    "biased_causal_softmax",
                    format!("expected [h×n×n], got {s:?}"),
                ))
            }
        };
        let bias_heads = match bias.map(|b| self.shape(b).to_vec()) {
            None => 0,
            Some(s) if s == [h, n, n] => h,
            Some(s) if s == [n, n] => 1,
            Some(s) => {
                return Err(Error::dim(
                    "biased_causal_softmax",
                    format!("bias shape {s:?} does not match logits [{h}×{n}×{n}]"),
                ))
            }
        };
        let lv = self.value(logits).data();
        let bv = bias.map(|b| self.value(b).data());
        let mut out = vec![T::zero(); h * n * n];
        let mut row = vec![T::zero(); n];
        for hh in 0..h {
            for i in 0..n {
                let base = (hh * n + i) * n;
                let bbase = if bias_heads == 1 { i * n } else { base };
                let mut mx = T::neg_infinity();
                for j in 0..=i {
                    let z = lv[base + j] + bv.map_or(T::zero(), |b| b[bbase + j]);
                    row[j] = z;
                    mx = mx.max(z);
                }
                let mut s = T::zero();
                for z in &mut row[..=i] {
                    *z = (*z - mx).exp();
                    s += *z;
                }
                for j in 0..=i {
                    out[base + j] = row[j] / s;
                }
            }
        }
        let mut parents = vec![logits];
        parents.extend(bias);
        self.custom(
            "biased_causal_softmax",
            Tensor::from_parts(vec![h, n, n], out),
            &parents,
            Box::new(move |_inp, out, g, needs| {
                let p = out.data();
                let mut dz = vec![T::zero(); h * n * n];
                for r in 0..h * n {
                    let i = r % n;
                    let base = r * n;
                    let dot: T = (0..=i).map(|j| g[base + j] * p[base + j]).sum();
                    for j in 0..=i {
                        dz[base + j] = p[base + j] * (g[base + j] - dot);
                    }
                }
                let mut res = Vec::with_capacity(2);
                let db = (needs.len() > 1 && needs[1]).then(|| {
                    if bias_heads == 1 {
                        let mut acc = vec![T::zero(); n * n];
                        for hh in 0..h {
                            acc.iter_mut()
                                .zip(&dz[hh * n * n..(hh + 1) * n * n])
                                .for_each(|(a, b)| *a += *b);
                        }
                        acc
                    } else {
                        dz.clone()
                    }
                });
                res.push(needs[0].then_some(dz));
                if needs.len() > 1 {
                    res.push(db);
                }
                res
            }),
        )
    }

    /// Mean negative log-likelihood of `targets` over rows where `mask` is set.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[u32],
        mask: &[bool],
    ) -> Result<(Var, CrossEntropyStats)> {
        let (n, v) = as_matrix("cross_entropy", self.value(logits))?;
        if targets.len() != n || mask.len() != n {
            return Err(Error::dim(
                "cross_entropy",
                format!("{n} rows but {} targets and {} mask entries", targets.len(), mask.len()),
            ));
        }
        if let Some(bad) = targets.iter().find(|&&t| t as usize >= v) {
            return Err(Error::Index {
                op: "cross_entropy",
                detail: format!("target {bad} outside [0, {v})"),
            });
        }
        let lv = self.value(logits).data();
        let counted = mask.iter().filter(|&&m| m).count();
        let mut total = T::zero();
        let mut correct = 0;
        let mut probs = vec![T::zero(); n * v];
        for r in 0..n {
            if !mask[r] {
                continue;
            }
            let row = &lv[r * v..(r + 1) * v];
            let (mut arg, mut mx) = (0, row[0]);
            for (j, &z) in row.iter().enumerate().skip(1) {
                if z > mx {
                    mx = z;
                    arg = j;
                }
            }
            if arg == targets[r] as usize {
                correct += 1;
            }
            let mut s = T::zero();
            for (pj, &z) in probs[r * v..(r + 1) * v].iter_mut().zip(row) {
                *pj = (z - mx).exp();
                s += *pj;
            }
            probs[r * v..(r + 1) * v].iter_mut().for_each(|p| *p /= s);
            total += s.ln() + mx - row[targets[r] as usize];
        }
        let denom = T::lit(counted.max(1) as f64);
        let loss = total / denom;
        let stats = CrossEntropyStats {
            loss: loss.as_f64(),
            correct,
            counted,
        };
        let targets = targets.to_vec();
        let mask = mask.to_vec();
        let var = self.custom(
            "cross_entropy",
            Tensor::scalar(loss),
            &[logits],
            Box::new(move |_inp, _out, g, _| {
                let scale = g[0] / denom;
                let mut d = probs.clone();
                for r in 0..n {
                    let row = &mut d[r * v..(r + 1) * v];
                    if mask[r] {
                        row[targets[r] as usize] -= T::one();
                        row.iter_mut().for_each(|x| *x *= scale);
                    } else {
                        row.iter_mut().for_each(|x| *x = T::zero());
                    }
                }
                vec![Some(d)]
            }),
        )?;
        Ok((var, stats))
    }

    /// Rows `start..start+len` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = as_matrix("slice_rows", self.value(x))?;
        if len == 0 || start + len > rows {
            return Err(Error::dim(
                "slice_rows",
                format!("rows {start}..{} of {rows}", start + len),
            ));
        }
        let out = self.value(x).data()[start * cols..(start + len) * cols].to_vec();
        self.custom(
            "slice_rows",
            Tensor::from_parts(vec![len, cols], out),
            &[x],
            Box::new(move |_inp, _out, g, _| {
                let mut d = vec![T::zero(); rows * cols];
                d[start * cols..(start + len) * cols].copy_from_slice(g);
                vec![Some(d)]
            }),
        )
    }

    /// Stacks matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let mut sizes = Vec::with_capacity(parts.len());
        let mut cols = None;
        for &p in parts {
            let (r, c) = as_matrix("concat_rows", self.value(p))?;
            if *cols.get_or_insert(c) != c {
                return Err(Error::dim("concat_rows", "column counts differ"));
            }
            sizes.push(r * c);
        }
        let cols = cols.ok_or_else(|| Error::dim("concat_rows", "no inputs"))?;
        let mut out = Vec::with_capacity(sizes.iter().sum());
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let rows = out.len() / cols;
        self.custom(
            "concat_rows",
            Tensor::from_parts(vec![rows, cols], out),
            parts,
            Box::new(move |_inp, _out, g, needs| {
                let mut off = 0;
                sizes
                    .iter()
                    .zip(needs)
                    .map(|(&s, &need)| {
                        let chunk = need.then(|| g[off..off + s].to_vec());
                        off += s;
                        chunk
                    })
                    .collect()
            }),
        )
    }

    /// `[n×(h·dh)]` → `[h×n×dh]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let (n, d) = as_matrix("split_heads", self.value(x))?;
        if heads == 0 || d % heads != 0 {
            return Err(Error::dim("split_heads", format!("{d} columns over {heads} heads")));
        }
        let dh = d / heads;
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); n * d];
        for t in 0..n {
            for h in 0..heads {
                out[(h * n + t) * dh..(h * n + t + 1) * dh].copy_from_slice(&xv[t * d + h * dh..t * d + (h + 1) * dh]);
            }
        }
        self.custom(
            "split_heads",
            Tensor::from_parts(vec![heads, n, dh], out),
            &[x],
            Box::new(move |_inp, _out, g, _| {
                let mut dx = vec![T::zero(); n * d];
                for t in 0..n {
                    for h in 0..heads {
                        dx[t * d + h * dh..t * d + (h + 1) * dh].copy_from_slice(&g[(h * n + t) * dh..(h * n + t + 1) * dh]);
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    /// `[h×n×dh]` → `[n×(h·dh)]`.
    pub fn merge_heads(&mut self, x: Var) -> Result<Var> {
        let (heads, n, dh) = match self.shape(x) {
            &[h, n, dh] => (h, n, dh),
            s => return Err(Error::dim("merge_heads", format!("expected rank 3, got {s:?}"))),
        };
        let d = heads * dh;
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); n * d];
        for t in 0..n {
            for h in 0..heads {
                out[t * d + h * dh..t * d + (h + 1) * dh].copy_from_slice(&xv[(h * n + t) * dh..(h * n + t + 1) * dh]);
            }
        }
        self.custom(
            "merge_heads",
            Tensor::from_parts(vec![n, d], out),
            &[x],
            Box::new(move |_inp, _out, g, _| {
                let mut dx = vec![T::zero(); n * d];
                for t in 0..n {
                    for h in 0..heads {
                        dx[(h * n + t) * dh..(h * n + t + 1) * dh].copy_from_slice(&g[t * d + h * dh..t * d + (h + 1) * dh]);
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Rotary embedding of each head's `dh`-vector in `x[T×(h·dh)]`, row `t`
    /// rotated for position `positions[t]`.
    pub fn rope(&mut self, x: Var, positions: &[usize], heads: usize, base: f64) -> Result<Var> {
        let (rows, d) = as_matrix("rope", self.value(x))?;
        if positions.len() != rows {
            return Err(Error::dim(
                "rope",
                format!("{rows} rows but {} positions", positions.len()),
            ));
        }
        if heads == 0 || d % heads != 0 || !(d / heads).is_multiple_of(2) {
            return Err(Error::dim(
                "rope",
                format!("head dimension of {d} columns over {heads} heads must be even"),
            ));
        }
        let dh = d / heads;
        let (cos, sin) = rope_tables::<T>(positions, dh, base);
        let half = dh / 2;
        let rotate = move |src: &[T], dst: &mut [T], sign: T| {
            for t in 0..rows {
                for h in 0..heads {
                    for i in 0..half {
                        let (c, s) = (cos[t * half + i], sin[t * half + i] * sign);
                        let o = t * d + h * dh + 2 * i;
                        let (x0, x1) = (src[o], src[o + 1]);
                        dst[o] = x0 * c - x1 * s;
                        dst[o + 1] = x0 * s + x1 * c;
                    }
                }
            }
        };
        let mut out = vec![T::zero(); rows * d];
        rotate(self.value(x).data(), &mut out, T::one());
        self.custom(
            "rope",
            Tensor::from_parts(vec![rows, d], out),
            &[x],
            Box::new(move |_inp, _out, g, _| {
                let mut dx = vec![T::zero(); rows * d];
                rotate(g, &mut dx, -T::one());
                vec![Some(dx)]
            }),
        )
    }
}

/// cos/sin of `position · base^(−2i/dim)` for `i < dim/2`, one row per position.
pub(crate) fn rope_tables<T: Real>(positions: &[usize], dim: usize, base: f64) -> (Vec<T>, Vec<T>) {
    let half = dim / 2;
    let mut cos = Vec::with_capacity(positions.len() * half);
    let mut sin = Vec::with_capacity(positions.len() * half);
    for &p in positions {
        for i in 0..half {
            let angle = p as f64 * base.powf(-2.0 * i as f64 / dim as f64);
            cos.push(T::lit(angle.cos()));
            sin.push(T::lit(angle.sin()));
        }
    }
    (cos, sin)
}

/// `(gelu(x·W) ⊙ x·V)·Wout`.
pub fn geglu_ffn<T: Real>(tape: &mut Tape<T>, x: Var, w: Var, v: Var, w_out: Var) -> Result<Var> {
    let gate = tape.matmul(x, w)?;
    let gate = tape.gelu(gate)?;
    let lin = tape.matmul(x, v)?;
    let h = tape.mul(gate, lin)?;
    tape.matmul(h, w_out)
}
