use std::sync::Arc;

use super::rotation::{rodrigues, rodrigues_vjp};
use super::tape::{JointChain, Op, Tape, Var};
use super::{shape_err, SparseMatrix, Tensor, TensorError};

type Res = Result<Var, TensorError>;

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], v: Var, n: usize) -> &'a mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; n])
}

fn mat3_mul(a: &[f64], b: &[f64]) -> [f64; 9] {
    let mut out = [0.0; 9];
    for i in 0..3 {
        for j in 0..3 {
            out[3 * i + j] = a[3 * i] * b[j] + a[3 * i + 1] * b[3 + j] + a[3 * i + 2] * b[6 + j];
        }
    }
    out
}

fn mat3_vec(a: &[f64], v: &[f64]) -> [f64; 3] {
    [
        a[0] * v[0] + a[1] * v[1] + a[2] * v[2],
        a[3] * v[0] + a[4] * v[1] + a[5] * v[2],
        a[6] * v[0] + a[7] * v[1] + a[8] * v[2],
    ]
}

fn mat3t_vec(a: &[f64], v: &[f64]) -> [f64; 3] {
    [
        a[0] * v[0] + a[3] * v[1] + a[6] * v[2],
        a[1] * v[0] + a[4] * v[1] + a[7] * v[2],
        a[2] * v[0] + a[5] * v[1] + a[8] * v[2],
    ]
}

impl Tape {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err(op, format!("{:?} vs {:?}", sa, sb)));
        }
        Ok(())
    }

    fn rows_of(&self, op: &'static str, a: Var, width: usize) -> Result<usize, TensorError> {
        let s = self.value(a).shape();
        if s.len() != 2 || s[1] != width {
            return Err(shape_err(op, format!("expected [n, {width}], got {:?}", s)));
        }
        Ok(s[0])
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let x = self.value(a);
        let out = Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
            .expect("shape preserved");
        self.record(out, op, &[a])
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        let data = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &q)| f(p, q))
            .collect();
        let out = Tensor::new(x.shape().to_vec(), data).expect("shape preserved");
        self.record(out, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Res {
        self.same_shape("add", a, b)?;
        Ok(self.zip(a, b, Op::Add(a, b), |p, q| p + q))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Res {
        self.same_shape("sub", a, b)?;
        Ok(self.zip(a, b, Op::Sub(a, b), |p, q| p - q))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Res {
        self.same_shape("mul", a, b)?;
        Ok(self.zip(a, b, Op::Mul(a, b), |p, q| p * q))
    }

    pub fn scalar_mul(&mut self, a: Var, s: f64) -> Res {
        if !s.is_finite() {
            return Err(TensorError::NonFinite {
                context: "scalar_mul factor".into(),
                index: 0,
            });
        }
        Ok(self.map(a, Op::ScalarMul(a, s), |v| v * s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Res {
        Ok(self.map(a, Op::AddScalar(a), |v| v + s))
    }

    /// Adds the same 3-vector to every row of an `[n, 3]` tensor.
    pub fn translate_rows(&mut self, a: Var, offset: [f64; 3]) -> Res {
        self.rows_of("translate_rows", a, 3)?;
        let x = self.value(a);
        let mut data = x.data().to_vec();
        for r in data.chunks_exact_mut(3) {
            r[0] += offset[0];
            r[1] += offset[1];
            r[2] += offset[2];
        }
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.record(out, Op::TranslateRows(a), &[a]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Res {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{:?} x {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let dst = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let s = x[i * k + p];
                if s == 0.0 {
                    continue;
                }
                for (d, &v) in dst.iter_mut().zip(&y[p * n..(p + 1) * n]) {
                    *d += s * v;
                }
            }
        }
        let out = Tensor::matrix(m, n, out)?;
        Ok(self.record(out, Op::Matmul(a, b), &[a, b]))
    }

    pub fn relu(&mut self, a: Var) -> Res {
        Ok(self.map(a, Op::Relu(a), |v| if v > 0.0 { v } else { 0.0 }))
    }

    /// `min(x, 0)`; the subgradient at exactly zero is taken as 0.
    pub fn clamp_max_zero(&mut self, a: Var) -> Res {
        Ok(self.map(a, Op::ClampMaxZero(a), |v| if v < 0.0 { v } else { 0.0 }))
    }

    pub fn square(&mut self, a: Var) -> Res {
        Ok(self.map(a, Op::Square(a), |v| v * v))
    }

    pub fn sqrt(&mut self, a: Var) -> Res {
        if let Some(i) = self.value(a).data().iter().position(|&v| v < 0.0) {
            return Err(shape_err(
                "sqrt",
                format!("negative input at flat index {i}"),
            ));
        }
        Ok(self.map(a, Op::Sqrt(a), f64::sqrt))
    }

    pub fn sum(&mut self, a: Var) -> Res {
        let s = self.value(a).data().iter().sum();
        Ok(self.record(Tensor::scalar(s), Op::Sum(a), &[a]))
    }

    pub fn mean(&mut self, a: Var) -> Res {
        let x = self.value(a);
        if x.numel() == 0 {
            return Err(shape_err("mean", "empty input"));
        }
        let s = x.data().iter().sum::<f64>() / x.numel() as f64;
        Ok(self.record(Tensor::scalar(s), Op::Mean(a), &[a]))
    }

    /// Selects rows by index. Works on `[n, d]` matrices and `[n]` vectors.
    pub fn gather_rows(&mut self, a: Var, index: Arc<[usize]>) -> Res {
        let x = self.value(a);
        if x.rank() == 0 {
            return Err(shape_err("gather_rows", "scalar input"));
        }
        let (n, c) = (x.rows(), x.cols());
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index.iter() {
            if i >= n {
                return Err(TensorError::Index {
                    op: "gather_rows",
                    index: i,
                    len: n,
                });
            }
            data.extend_from_slice(&x.data()[i * c..(i + 1) * c]);
        }
        let mut shape = x.shape().to_vec();
        shape[0] = index.len();
        let out = Tensor::new(shape, data)?;
        Ok(self.record(out, Op::GatherRows(a, index), &[a]))
    }

    /// Stacks tensors along the first axis.
    pub fn concat(&mut self, parts: &[Var]) -> Res {
        let Some(&first) = parts.first() else {
            return Err(shape_err("concat", "no inputs"));
        };
        let tail = self.value(first).shape()[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let x = self.value(p);
            if x.rank() == 0 || x.shape()[1..] != tail[..] {
                return Err(shape_err(
                    "concat",
                    format!(
                        "{:?} incompatible with trailing shape {:?}",
                        x.shape(),
                        tail
                    ),
                ));
            }
            rows += x.shape()[0];
            data.extend_from_slice(x.data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let out = Tensor::new(shape, data)?;
        Ok(self.record(out, Op::Concat(parts.to_vec()), parts))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Res {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.record(out, Op::Reshape(a), &[a]))
    }

    /// Euclidean norm of each row: `[n, d] -> [n]`.
    pub fn norm_rows(&mut self, a: Var) -> Res {
        let x = self.value(a);
        if x.rank() != 2 {
            return Err(shape_err(
                "norm_rows",
                format!("expected [n, d], got {:?}", x.shape()),
            ));
        }
        let c = x.cols();
        let data = x
            .data()
            .chunks_exact(c)
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let out = Tensor::vector(data);
        Ok(self.record(out, Op::NormRows(a), &[a]))
    }

    pub fn cross_rows(&mut self, a: Var, b: Var) -> Res {
        let n = self.rows_of("cross_rows", a, 3)?;
        let m = self.rows_of("cross_rows", b, 3)?;
        if n != m {
            return Err(shape_err("cross_rows", format!("{n} rows vs {m} rows")));
        }
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let mut data = vec![0.0; 3 * n];
        for i in 0..n {
            let (p, q) = (&x[3 * i..3 * i + 3], &y[3 * i..3 * i + 3]);
            data[3 * i] = p[1] * q[2] - p[2] * q[1];
            data[3 * i + 1] = p[2] * q[0] - p[0] * q[2];
            data[3 * i + 2] = p[0] * q[1] - p[1] * q[0];
        }
        let out = Tensor::matrix(n, 3, data)?;
        Ok(self.record(out, Op::CrossRows(a, b), &[a, b]))
    }

    /// Row-wise dot product: `[n, d] · [n, d] -> [n]`.
    pub fn dot_rows(&mut self, a: Var, b: Var) -> Res {
        self.same_shape("dot_rows", a, b)?;
        let x = self.value(a);
        if x.rank() != 2 {
            return Err(shape_err(
                "dot_rows",
                format!("expected [n, d], got {:?}", x.shape()),
            ));
        }
        let c = x.cols();
        let y = self.value(b);
        let data = x
            .data()
            .chunks_exact(c)
            .zip(y.data().chunks_exact(c))
            .map(|(p, q)| p.iter().zip(q).map(|(u, v)| u * v).sum())
            .collect();
        let out = Tensor::vector(data);
        Ok(self.record(out, Op::DotRows(a, b), &[a, b]))
    }

    /// `x / max(|x|, eps)` per row of an `[n, 3]` tensor.
    pub fn normalize_rows(&mut self, a: Var, eps: f64) -> Res {
        let n = self.rows_of("normalize_rows", a, 3)?;
        let x = self.value(a).data();
        let mut data = vec![0.0; 3 * n];
        for i in 0..n {
            let r = &x[3 * i..3 * i + 3];
            let len = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt().max(eps);
            for j in 0..3 {
                data[3 * i + j] = r[j] / len;
            }
        }
        let out = Tensor::matrix(n, 3, data)?;
        Ok(self.record(out, Op::NormalizeRows(a, eps), &[a]))
    }

    /// Axis-angle rows to row-major rotation matrices: `[k, 3] -> [k, 9]`.
    pub fn batched_rodrigues(&mut self, a: Var) -> Res {
        let k = self.rows_of("batched_rodrigues", a, 3)?;
        let x = self.value(a);
        let mut data = Vec::with_capacity(9 * k);
        for i in 0..k {
            data.extend_from_slice(&rodrigues(x.vec3(i)));
        }
        let out = Tensor::matrix(k, 9, data)?;
        Ok(self.record(out, Op::BatchedRodrigues(a), &[a]))
    }

    /// Constant sparse matrix times `[cols, d]`.
    pub fn sparse_matmul(&mut self, m: Arc<SparseMatrix>, a: Var) -> Res {
        let x = self.value(a);
        if x.rank() != 2 || x.rows() != m.cols() {
            return Err(shape_err(
                "sparse_matmul",
                format!("[{}, {}] x {:?}", m.rows(), m.cols(), x.shape()),
            ));
        }
        let w = x.cols();
        let out = Tensor::matrix(m.rows(), w, m.apply(x.data(), w))?;
        Ok(self.record(out, Op::SparseMatmul(m, a), &[a]))
    }

    /// Row-wise softmax restricted to `mask`; masked-out entries are 0.
    pub fn softmax_rows(&mut self, a: Var, mask: Arc<[bool]>) -> Res {
        let x = self.value(a);
        if x.rank() != 2 || mask.len() != x.numel() {
            return Err(shape_err(
                "softmax_rows",
                format!("input {:?} with mask of {}", x.shape(), mask.len()),
            ));
        }
        let c = x.cols();
        let mut data = vec![0.0; x.numel()];
        for (i, row) in x.data().chunks_exact(c).enumerate() {
            let m = &mask[i * c..(i + 1) * c];
            let mx = row
                .iter()
                .zip(m)
                .filter(|(_, &on)| on)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            if mx == f64::NEG_INFINITY {
                return Err(shape_err(
                    "softmax_rows",
                    format!("row {i} has an empty mask"),
                ));
            }
            let dst = &mut data[i * c..(i + 1) * c];
            let mut z = 0.0;
            for j in 0..c {
                if m[j] {
                    dst[j] = (row[j] - mx).exp();
                    z += dst[j];
                }
            }
            for v in dst.iter_mut() {
                *v /= z;
            }
        }
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.record(out, Op::SoftmaxRows(a), &[a]))
    }

    /// Rest-relative global joint transforms from local rotations:
    /// `[k, 9] -> [k, 12]`, each row holding a row-major 3×3 rotation
    /// followed by a translation. A joint at rest yields the identity.
    pub fn kinematic_chain(&mut self, rotations: Var, chain: Arc<JointChain>) -> Res {
        let k = self.rows_of("kinematic_chain", rotations, 9)?;
        if k != chain.len() {
            return Err(shape_err(
                "kinematic_chain",
                format!("{k} rotations for {} joints", chain.len()),
            ));
        }
        let r = self.value(rotations).data();
        let mut out = vec![0.0; 12 * k];
        for &j in chain.order() {
            let rj = &r[9 * j..9 * j + 9];
            let jp = chain.joints()[j];
            let rjp = mat3_vec(rj, &jp);
            let u = [jp[0] - rjp[0], jp[1] - rjp[1], jp[2] - rjp[2]];
            let (rot, t) = match chain.parents()[j] {
                Some(p) => {
                    let (head, tail) = out.split_at(12 * p + 9);
                    let rp = &head[12 * p..12 * p + 9];
                    let tp = &tail[..3];
                    let ru = mat3_vec(rp, &u);
                    (
                        mat3_mul(rp, rj),
                        [ru[0] + tp[0], ru[1] + tp[1], ru[2] + tp[2]],
                    )
                }
                None => {
                    let mut m = [0.0; 9];
                    m.copy_from_slice(rj);
                    (m, u)
                }
            };
            out[12 * j..12 * j + 9].copy_from_slice(&rot);
            out[12 * j + 9..12 * j + 12].copy_from_slice(&t);
        }
        let out = Tensor::matrix(k, 12, out)?;
        Ok(self.record(out, Op::KinematicChain(rotations, chain), &[rotations]))
    }

    /// Linear blend skinning. For vertex `i`:
    /// `v'_i = p_i + Σ_k w_ik ((R_k − I) p_i + t_k)`, which equals
    /// `Σ_k w_ik G_k p_i` for convex weights and is exact at rest.
    pub fn skin(&mut self, positions: Var, transforms: Var, weights: Var) -> Res {
        let n = self.rows_of("skin", positions, 3)?;
        let k = self.rows_of("skin", transforms, 12)?;
        let ws = self.value(weights).shape();
        if ws != [n, k] {
            return Err(shape_err(
                "skin",
                format!("weights {:?} for {n} vertices and {k} joints", ws),
            ));
        }
        let p = self.value(positions).data();
        let g = self.value(transforms).data();
        let w = self.value(weights).data();
        let mut out = p.to_vec();
        for i in 0..n {
            let pi = &p[3 * i..3 * i + 3];
            let mut acc = [0.0; 3];
            for j in 0..k {
                let wij = w[i * k + j];
                if wij == 0.0 {
                    continue;
                }
                let gj = &g[12 * j..12 * j + 12];
                let rp = mat3_vec(&gj[..9], pi);
                for c in 0..3 {
                    acc[c] += wij * (rp[c] - pi[c] + gj[9 + c]);
                }
            }
            for c in 0..3 {
                out[3 * i + c] += acc[c];
            }
        }
        let out = Tensor::matrix(n, 3, out)?;
        Ok(self.record(
            out,
            Op::Skin {
                positions,
                transforms,
                weights,
            },
            &[positions, transforms, weights],
        ))
    }

    pub(super) fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| self.nodes[v.0].value.data();
        let n_of = |v: Var| self.nodes[v.0].value.numel();
        let out = self.nodes[id].value.data();
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for (v, sign) in [(*a, 1.0), (*b, 1.0)] {
                    if rg(v) {
                        let s = slot(grads, v, g.len());
                        s.iter_mut().zip(g).for_each(|(d, x)| *d += sign * x);
                    }
                }
            }
            Op::Sub(a, b) => {
                for (v, sign) in [(*a, 1.0), (*b, -1.0)] {
                    if rg(v) {
                        let s = slot(grads, v, g.len());
                        s.iter_mut().zip(g).for_each(|(d, x)| *d += sign * x);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if rg(a) {
                    let y = val(b);
                    let s = slot(grads, a, g.len());
                    for i in 0..g.len() {
                        s[i] += g[i] * y[i];
                    }
                }
                if rg(b) {
                    let x = val(a);
                    let s = slot(grads, b, g.len());
                    for i in 0..g.len() {
                        s[i] += g[i] * x[i];
                    }
                }
            }
            Op::ScalarMul(a, f) => {
                let s = slot(grads, *a, g.len());
                s.iter_mut().zip(g).for_each(|(d, x)| *d += f * x);
            }
            Op::AddScalar(a) | Op::TranslateRows(a) | Op::Reshape(a) => {
                let s = slot(grads, *a, g.len());
                s.iter_mut().zip(g).for_each(|(d, x)| *d += x);
            }
            Op::Matmul(a, b) => {
                let (a, b) = (*a, *b);
                let sa = self.nodes[a.0].value.shape();
                let sb = self.nodes[b.0].value.shape();
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (x, y) = (val(a), val(b));
                if rg(a) {
                    let s = slot(grads, a, m * k);
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let yp = &y[p * n..(p + 1) * n];
                            s[i * k + p] += gi.iter().zip(yp).map(|(u, v)| u * v).sum::<f64>();
                        }
                    }
                }
                if rg(b) {
                    let s = slot(grads, b, k * n);
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let xv = x[i * k + p];
                            if xv == 0.0 {
                                continue;
                            }
                            for (d, gv) in s[p * n..(p + 1) * n].iter_mut().zip(gi) {
                                *d += xv * gv;
                            }
                        }
                    }
                }
            }
            Op::Relu(a) => {
                let x = val(*a);
                let s = slot(grads, *a, g.len());
                for i in 0..g.len() {
                    if x[i] > 0.0 {
                        s[i] += g[i];
                    }
                }
            }
            Op::ClampMaxZero(a) => {
                let x = val(*a);
                let s = slot(grads, *a, g.len());
                for i in 0..g.len() {
                    if x[i] < 0.0 {
                        s[i] += g[i];
                    }
                }
            }
            Op::Square(a) => {
                let x = val(*a);
                let s = slot(grads, *a, g.len());
                for i in 0..g.len() {
                    s[i] += 2.0 * x[i] * g[i];
                }
            }
            Op::Sqrt(a) => {
                let s = slot(grads, *a, g.len());
                for i in 0..g.len() {
                    s[i] += g[i] / (2.0 * out[i]);
                }
            }
            Op::Sum(a) => {
                let n = n_of(*a);
                let s = slot(grads, *a, n);
                s.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::Mean(a) => {
                let n = n_of(*a);
                let gv = g[0] / n as f64;
                let s = slot(grads, *a, n);
                s.iter_mut().for_each(|d| *d += gv);
            }
            Op::GatherRows(a, index) => {
                let src = &self.nodes[a.0].value;
                let c = src.cols();
                let s = slot(grads, *a, src.numel());
                for (r, &i) in index.iter().enumerate() {
                    for j in 0..c {
                        s[i * c + j] += g[r * c + j];
                    }
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = n_of(p);
                    if rg(p) {
                        let s = slot(grads, p, n);
                        s.iter_mut()
                            .zip(&g[off..off + n])
                            .for_each(|(d, x)| *d += x);
                    }
                    off += n;
                }
            }
            Op::NormRows(a) => {
                let src = &self.nodes[a.0].value;
                let c = src.cols();
                let x = src.data();
                let s = slot(grads, *a, src.numel());
                for i in 0..g.len() {
                    if out[i] == 0.0 {
                        continue;
                    }
                    let f = g[i] / out[i];
                    for j in 0..c {
                        s[i * c + j] += f * x[i * c + j];
                    }
                }
            }
            Op::CrossRows(a, b) => {
                let (a, b) = (*a, *b);
                let (x, y) = (val(a), val(b));
                let n = g.len() / 3;
                // d(p×q) against g: dp = q×g, dq = g×p
                if rg(a) {
                    let s = slot(grads, a, 3 * n);
                    for i in 0..n {
                        let (q, gi) = (&y[3 * i..3 * i + 3], &g[3 * i..3 * i + 3]);
                        s[3 * i] += q[1] * gi[2] - q[2] * gi[1];
                        s[3 * i + 1] += q[2] * gi[0] - q[0] * gi[2];
                        s[3 * i + 2] += q[0] * gi[1] - q[1] * gi[0];
                    }
                }
                if rg(b) {
                    let s = slot(grads, b, 3 * n);
                    for i in 0..n {
                        let (p, gi) = (&x[3 * i..3 * i + 3], &g[3 * i..3 * i + 3]);
                        s[3 * i] += gi[1] * p[2] - gi[2] * p[1];
                        s[3 * i + 1] += gi[2] * p[0] - gi[0] * p[2];
                        s[3 * i + 2] += gi[0] * p[1] - gi[1] * p[0];
                    }
                }
            }
            Op::DotRows(a, b) => {
                let (a, b) = (*a, *b);
                let c = self.nodes[a.0].value.cols();
                let (x, y) = (val(a), val(b));
                if rg(a) {
                    let s = slot(grads, a, x.len());
                    for i in 0..g.len() {
                        for j in 0..c {
                            s[i * c + j] += g[i] * y[i * c + j];
                        }
                    }
                }
                if rg(b) {
                    let s = slot(grads, b, y.len());
                    for i in 0..g.len() {
                        for j in 0..c {
                            s[i * c + j] += g[i] * x[i * c + j];
                        }
                    }
                }
            }
            Op::NormalizeRows(a, eps) => {
                let x = val(*a);
                let n = x.len() / 3;
                let s = slot(grads, *a, x.len());
                for i in 0..n {
                    let r = &x[3 * i..3 * i + 3];
                    let gi = &g[3 * i..3 * i + 3];
                    let len = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
                    if len > *eps {
                        let u = &out[3 * i..3 * i + 3];
                        let ug = u[0] * gi[0] + u[1] * gi[1] + u[2] * gi[2];
                        for j in 0..3 {
                            s[3 * i + j] += (gi[j] - u[j] * ug) / len;
                        }
                    } else {
                        for j in 0..3 {
                            s[3 * i + j] += gi[j] / eps;
                        }
                    }
                }
            }
            Op::BatchedRodrigues(a) => {
                let src = &self.nodes[a.0].value;
                let k = src.rows();
                let s = slot(grads, *a, 3 * k);
                for i in 0..k {
                    let d = rodrigues_vjp(src.vec3(i), &g[9 * i..9 * i + 9]);
                    for j in 0..3 {
                        s[3 * i + j] += d[j];
                    }
                }
            }
            Op::SparseMatmul(m, a) => {
                let w = self.nodes[a.0].value.cols();
                let n = n_of(*a);
                let s = slot(grads, *a, n);
                m.apply_transpose_into(g, w, s);
            }
            Op::SoftmaxRows(a) => {
                let c = self.nodes[a.0].value.cols();
                let s = slot(grads, *a, out.len());
                for (i, (w, gi)) in out.chunks_exact(c).zip(g.chunks_exact(c)).enumerate() {
                    let wg: f64 = w.iter().zip(gi).map(|(u, v)| u * v).sum();
                    for j in 0..c {
                        s[i * c + j] += w[j] * (gi[j] - wg);
                    }
                }
            }
            Op::KinematicChain(rot, chain) => {
                let r = val(*rot);
                let k = chain.len();
                let mut g_rot_glob: Vec<[f64; 9]> = (0..k)
                    .map(|j| {
                        let mut m = [0.0; 9];
                        m.copy_from_slice(&g[12 * j..12 * j + 9]);
                        m
                    })
                    .collect();
                let mut g_t: Vec<[f64; 3]> = (0..k)
                    .map(|j| [g[12 * j + 9], g[12 * j + 10], g[12 * j + 11]])
                    .collect();
                let s = slot(grads, *rot, 9 * k);
                for &j in chain.order().iter().rev() {
                    let rj = &r[9 * j..9 * j + 9];
                    let jp = chain.joints()[j];
                    let rjp = mat3_vec(rj, &jp);
                    let u = [jp[0] - rjp[0], jp[1] - rjp[1], jp[2] - rjp[2]];
                    let (gr, gt) = (g_rot_glob[j], g_t[j]);
                    let (mut g_local, g_u) = match chain.parents()[j] {
                        Some(p) => {
                            let rp = &out[12 * p..12 * p + 9];
                            // Rg_j = Rg_p R_j;  t_j = Rg_p u_j + t_p
                            let mut gp = g_rot_glob[p];
                            for a in 0..3 {
                                for b in 0..3 {
                                    let mut acc = gt[a] * u[b];
                                    for c in 0..3 {
                                        acc += gr[3 * a + c] * rj[3 * b + c];
                                    }
                                    gp[3 * a + b] += acc;
                                }
                            }
                            g_rot_glob[p] = gp;
                            for c in 0..3 {
                                g_t[p][c] += gt[c];
                            }
                            let mut gl = [0.0; 9];
                            for a in 0..3 {
                                for b in 0..3 {
                                    gl[3 * a + b] =
                                        (0..3).map(|c| rp[3 * c + a] * gr[3 * c + b]).sum();
                                }
                            }
                            (gl, mat3t_vec(rp, &gt))
                        }
                        None => (gr, gt),
                    };
                    // u = J − R J
                    for a in 0..3 {
                        for b in 0..3 {
                            g_local[3 * a + b] -= g_u[a] * jp[b];
                        }
                    }
                    for (d, v) in s[9 * j..9 * j + 9].iter_mut().zip(g_local) {
                        *d += v;
                    }
                }
            }
            Op::Skin {
                positions,
                transforms,
                weights,
            } => {
                let (pv, tv, wv) = (*positions, *transforms, *weights);
                let p = val(pv);
                let tr = val(tv);
                let w = val(wv);
                let n = p.len() / 3;
                let k = tr.len() / 12;
                if rg(pv) {
                    let s = slot(grads, pv, 3 * n);
                    for i in 0..n {
                        let gi = &g[3 * i..3 * i + 3];
                        let mut acc = [gi[0], gi[1], gi[2]];
                        for j in 0..k {
                            let wij = w[i * k + j];
                            if wij == 0.0 {
                                continue;
                            }
                            let rt = mat3t_vec(&tr[12 * j..12 * j + 9], gi);
                            for c in 0..3 {
                                acc[c] += wij * (rt[c] - gi[c]);
                            }
                        }
                        for c in 0..3 {
                            s[3 * i + c] += acc[c];
                        }
                    }
                }
                if rg(tv) {
                    let s = slot(grads, tv, 12 * k);
                    for i in 0..n {
                        let gi = &g[3 * i..3 * i + 3];
                        let pi = &p[3 * i..3 * i + 3];
                        for j in 0..k {
                            let wij = w[i * k + j];
                            if wij == 0.0 {
                                continue;
                            }
                            let sj = &mut s[12 * j..12 * j + 12];
                            for a in 0..3 {
                                let wg = wij * gi[a];
                                for b in 0..3 {
                                    sj[3 * a + b] += wg * pi[b];
                                }
                                sj[9 + a] += wg;
                            }
                        }
                    }
                }
                if rg(wv) {
                    let s = slot(grads, wv, n * k);
                    for i in 0..n {
                        let gi = &g[3 * i..3 * i + 3];
                        let pi = &p[3 * i..3 * i + 3];
                        for j in 0..k {
                            let gj = &tr[12 * j..12 * j + 12];
                            let rp = mat3_vec(&gj[..9], pi);
                            s[i * k + j] += (0..3)
                                .map(|c| gi[c] * (rp[c] - pi[c] + gj[9 + c]))
                                .sum::<f64>();
                        }
                    }
                }
            }
        }
    }
}
