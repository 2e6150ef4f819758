use super::{contract_err, dim_err, numel, Result, Tensor};

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(dim_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn rank2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(dim_err(op, format!("expected a matrix, got shape {s:?}"))),
    }
}

/// `out[i, j] = sum_k a[i, k] * b[j, k]` for row-major `a: m x k`, `b: n x k`.
fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        let or = &mut out[i * n..(i + 1) * n];
        for (j, o) in or.iter_mut().enumerate() {
            let br = &b[j * k..(j + 1) * k];
            *o = ar.iter().zip(br).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `out[i, j] = sum_k a[i, k] * b[k, j]` for `a: m x k`, `b: k x n`.
fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let or = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let br = &b[kk * n..(kk + 1) * n];
            or.iter_mut().zip(br).for_each(|(o, y)| *o += av * y);
        }
    }
    out
}

/// `out[i, j] = sum_k a[k, i] * b[k, j]` for `a: k x m`, `b: k x n`.
fn matmul_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for kk in 0..k {
        let br = &b[kk * n..(kk + 1) * n];
        for i in 0..m {
            let av = a[kk * m + i];
            if av == 0.0 {
                continue;
            }
            out[i * n..(i + 1) * n].iter_mut().zip(br).for_each(|(o, y)| *o += av * y);
        }
    }
    out
}

fn transpose_data(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        check_same("add", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a + b).collect();
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            "add",
            vec![self.clone(), other.clone()],
            Box::new(|g, _| vec![Some(g.to_vec()), Some(g.to_vec())]),
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        check_same("sub", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a - b).collect();
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            "sub",
            vec![self.clone(), other.clone()],
            Box::new(|g, _| vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())]),
        ))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        check_same("mul", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a * b).collect();
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            "mul",
            vec![self.clone(), other.clone()],
            Box::new(|g, p| {
                let ga = p[0].is_tracked().then(|| g.iter().zip(p[1].data()).map(|(g, b)| g * b).collect());
                let gb = p[1].is_tracked().then(|| g.iter().zip(p[0].data()).map(|(g, a)| g * a).collect());
                vec![ga, gb]
            }),
        ))
    }

    pub fn scale(&self, k: f64) -> Tensor {
        self.affine(k, 0.0)
    }

    /// `k * x + c` elementwise.
    pub fn affine(&self, k: f64, c: f64) -> Tensor {
        let data = self.data().iter().map(|v| k * v + c).collect();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            "affine",
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(g.iter().map(|v| k * v).collect())]),
        )
    }

    /// `x[n, d] + bias[d]` for a matrix `x`.
    pub fn add_row_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let (n, d) = rank2("add_row_bias", self)?;
        if bias.shape() != [d] {
            return Err(dim_err("add_row_bias", format!("input {:?}, bias {:?}", self.shape(), bias.shape())));
        }
        let b = bias.data();
        let data = self.data().chunks(d).flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y)).collect();
        Ok(Tensor::from_op(
            data,
            vec![n, d],
            "add_row_bias",
            vec![self.clone(), bias.clone()],
            Box::new(move |g, _| {
                let mut gb = vec![0.0; d];
                for row in g.chunks(d) {
                    gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                vec![Some(g.to_vec()), Some(gb)]
            }),
        ))
    }

    pub fn sum(&self) -> Tensor {
        let n = self.numel();
        let s = self.data().iter().sum();
        Tensor::from_op(vec![s], vec![1], "sum", vec![self.clone()], Box::new(move |g, _| vec![Some(vec![g[0]; n])]))
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel() as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn relu(&self) -> Tensor {
        let data = self.data().iter().map(|v| v.max(0.0)).collect();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            "relu",
            vec![self.clone()],
            Box::new(|g, p| {
                vec![Some(g.iter().zip(p[0].data()).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect())]
            }),
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.contains(&0) || numel(shape) != self.numel() {
            return Err(dim_err("reshape", format!("{:?} cannot become {shape:?}", self.shape())));
        }
        Ok(Tensor::from_op(
            self.to_vec(),
            shape.to_vec(),
            "reshape",
            vec![self.clone()],
            Box::new(|g, _| vec![Some(g.to_vec())]),
        ))
    }

    /// Matrix transpose.
    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = rank2("transpose", self)?;
        Ok(Tensor::from_op(
            transpose_data(self.data(), r, c),
            vec![c, r],
            "transpose",
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(transpose_data(g, c, r))]),
        ))
    }

    /// `self: m x k` times `other: k x n`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = rank2("matmul", self)?;
        let (k2, n) = rank2("matmul", other)?;
        if k != k2 {
            return Err(dim_err("matmul", format!("{:?} x {:?}", self.shape(), other.shape())));
        }
        Ok(Tensor::from_op(
            matmul_nn(self.data(), other.data(), m, k, n),
            vec![m, n],
            "matmul",
            vec![self.clone(), other.clone()],
            Box::new(move |g, p| {
                // dA = G B^T, dB = A^T G
                let ga = p[0].is_tracked().then(|| matmul_nt(g, p[1].data(), m, n, k));
                let gb = p[1].is_tracked().then(|| matmul_tn(p[0].data(), g, m, k, n));
                vec![ga, gb]
            }),
        ))
    }

    /// `x: n x d_in`, `weight: d_out x d_in`, optional `bias: d_out`.
    /// Without a bias this is `x * weight^T`.
    pub fn linear(&self, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let (n, din) = rank2("linear", self)?;
        let (dout, din2) = rank2("linear", weight)?;
        if din != din2 {
            return Err(dim_err("linear", format!("input {:?}, weight {:?}", self.shape(), weight.shape())));
        }
        if let Some(b) = bias {
            if b.shape() != [dout] {
                return Err(dim_err("linear", format!("weight {:?}, bias {:?}", weight.shape(), b.shape())));
            }
        }
        let mut data = matmul_nt(self.data(), weight.data(), n, din, dout);
        if let Some(b) = bias {
            for row in data.chunks_mut(dout) {
                row.iter_mut().zip(b.data()).for_each(|(o, b)| *o += b);
            }
        }
        let mut parents = vec![self.clone(), weight.clone()];
        parents.extend(bias.cloned());
        Ok(Tensor::from_op(
            data,
            vec![n, dout],
            "linear",
            parents,
            Box::new(move |g, p| {
                let gx = p[0].is_tracked().then(|| matmul_nn(g, p[1].data(), n, dout, din));
                let gw = p[1].is_tracked().then(|| matmul_tn(g, p[0].data(), n, dout, din));
                let mut out = vec![gx, gw];
                if p.len() == 3 {
                    let mut gb = vec![0.0; dout];
                    for row in g.chunks(dout) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    out.push(Some(gb));
                }
                out
            }),
        ))
    }

    /// Joins tensors along `axis`; every other extent must agree.
    pub fn concat(tensors: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = tensors.first().ok_or_else(|| contract_err("concat", "no tensors given"))?;
        let rank = first.rank();
        if axis >= rank {
            return Err(dim_err("concat", format!("axis {axis} out of range for rank {rank}")));
        }
        for t in tensors {
            let ok = t.rank() == rank
                && t.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(dim_err("concat", format!("{:?} vs {:?} on axis {axis}", first.shape(), t.shape())));
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let widths: Vec<usize> = tensors.iter().map(|t| t.shape()[axis] * inner).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (t, w) in tensors.iter().zip(&widths) {
                data.extend_from_slice(&t.data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = tensors.iter().map(|t| t.shape()[axis]).sum();
        Ok(Tensor::from_op(
            data,
            shape,
            "concat",
            tensors.to_vec(),
            Box::new(move |g, p| {
                let mut offset = 0;
                let mut out = Vec::with_capacity(p.len());
                for (t, w) in p.iter().zip(&widths) {
                    let piece = t.is_tracked().then(|| {
                        let mut v = Vec::with_capacity(outer * w);
                        for o in 0..outer {
                            let start = o * total + offset;
                            v.extend_from_slice(&g[start..start + w]);
                        }
                        v
                    });
                    offset += w;
                    out.push(piece);
                }
                out
            }),
        ))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        if axis >= self.rank() || len == 0 || start + len > self.shape()[axis] {
            return Err(dim_err(
                "narrow",
                format!("range {start}..{} on axis {axis} of {:?}", start + len, self.shape()),
            ));
        }
        let shape = self.shape().to_vec();
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let full = shape[axis] * inner;
        let (off, w) = (start * inner, len * inner);
        let mut data = Vec::with_capacity(outer * w);
        for o in 0..outer {
            data.extend_from_slice(&self.data()[o * full + off..o * full + off + w]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let n = self.numel();
        Ok(Tensor::from_op(
            data,
            out_shape,
            "narrow",
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; n];
                for o in 0..outer {
                    gx[o * full + off..o * full + off + w].copy_from_slice(&g[o * w..(o + 1) * w]);
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Rows of a matrix picked by index; repeated indices are allowed.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor> {
        let (r, d) = rank2("gather_rows", self)?;
        if indices.is_empty() {
            return Err(contract_err("gather_rows", "empty index list"));
        }
        if let Some(bad) = indices.iter().find(|&&i| i >= r) {
            return Err(contract_err("gather_rows", format!("row {bad} out of range for {r} rows")));
        }
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(&self.data()[i * d..(i + 1) * d]);
        }
        let idx = indices.to_vec();
        Ok(Tensor::from_op(
            data,
            vec![indices.len(), d],
            "gather_rows",
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; r * d];
                for (row, &i) in idx.iter().enumerate() {
                    gx[i * d..(i + 1) * d].iter_mut().zip(&g[row * d..(row + 1) * d]).for_each(|(a, b)| *a += b);
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Row-wise softmax of a square score matrix where row `i` only sees
    /// columns `0..=i`; masked entries are exactly zero.
    pub fn causal_softmax(&self) -> Result<Tensor> {
        let (n, m) = rank2("causal_softmax", self)?;
        if n != m {
            return Err(dim_err("causal_softmax", format!("expected square scores, got {:?}", self.shape())));
        }
        let x = self.data();
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            let row = &x[i * n..i * n + i + 1];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let out = &mut data[i * n..i * n + i + 1];
            let mut z = 0.0;
            for (o, v) in out.iter_mut().zip(row) {
                *o = (v - mx).exp();
                z += *o;
            }
            out.iter_mut().for_each(|o| *o /= z);
        }
        let y = data.clone();
        Ok(Tensor::from_op(
            data,
            vec![n, n],
            "causal_softmax",
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; n * n];
                for i in 0..n {
                    let yr = &y[i * n..i * n + i + 1];
                    let gr = &g[i * n..i * n + i + 1];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..=i {
                        gx[i * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Layer normalization over the last axis of a matrix with an affine
    /// `gamma` / `beta` of that width.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let (n, d) = rank2("layer_norm", self)?;
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(dim_err(
                "layer_norm",
                format!("input {:?}, gamma {:?}, beta {:?}", self.shape(), gamma.shape(), beta.shape()),
            ));
        }
        let x = self.data();
        let mut xhat = vec![0.0; n * d];
        let mut inv_std = vec![0.0; n];
        for i in 0..n {
            let row = &x[i * d..(i + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..d {
                xhat[i * d + j] = (row[j] - mu) * is;
            }
        }
        let (gm, bt) = (gamma.data(), beta.data());
        let data = xhat.chunks(d).flat_map(|r| (0..d).map(move |j| r[j] * gm[j] + bt[j])).collect();
        Ok(Tensor::from_op(
            data,
            vec![n, d],
            "layer_norm",
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g, p| {
                let gm = p[1].data();
                let mut gx = vec![0.0; n * d];
                let mut gg = vec![0.0; d];
                let mut gb = vec![0.0; d];
                for i in 0..n {
                    let gr = &g[i * d..(i + 1) * d];
                    let xr = &xhat[i * d..(i + 1) * d];
                    let mut sum_dy = 0.0;
                    let mut sum_dy_x = 0.0;
                    for j in 0..d {
                        gg[j] += gr[j] * xr[j];
                        gb[j] += gr[j];
                        let dy = gr[j] * gm[j];
                        sum_dy += dy;
                        sum_dy_x += dy * xr[j];
                    }
                    let k = inv_std[i] / d as f64;
                    for j in 0..d {
                        let dy = gr[j] * gm[j];
                        gx[i * d + j] = k * (d as f64 * dy - sum_dy - xr[j] * sum_dy_x);
                    }
                }
                vec![Some(gx), Some(gg), Some(gb)]
            }),
        ))
    }

    /// Weighted negative log-likelihood of logits rows:
    /// `sum_i w_i * -log softmax(x_i)[t_i]`, returned as a scalar.
    pub fn weighted_nll(&self, targets: &[usize], weights: &[f64]) -> Result<Tensor> {
        let (n, v) = rank2("weighted_nll", self)?;
        if targets.len() != n || weights.len() != n {
            return Err(dim_err(
                "weighted_nll",
                format!("{n} rows, {} targets, {} weights", targets.len(), weights.len()),
            ));
        }
        if let Some(t) = targets.iter().find(|&&t| t >= v) {
            return Err(contract_err("weighted_nll", format!("target {t} outside vocabulary of {v}")));
        }
        let x = self.data();
        let mut probs = vec![0.0; n * v];
        let mut loss = 0.0;
        for i in 0..n {
            let row = &x[i * v..(i + 1) * v];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|r| (r - mx).exp()).sum();
            let lse = mx + z.ln();
            for j in 0..v {
                probs[i * v + j] = (row[j] - lse).exp();
            }
            if weights[i] != 0.0 {
                loss += weights[i] * (lse - row[targets[i]]);
            }
        }
        let t = targets.to_vec();
        let w = weights.to_vec();
        Ok(Tensor::from_op(
            vec![loss],
            vec![1],
            "weighted_nll",
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; n * v];
                for i in 0..n {
                    if w[i] == 0.0 {
                        continue;
                    }
                    let k = g[0] * w[i];
                    for j in 0..v {
                        gx[i * v + j] = k * probs[i * v + j];
                    }
                    gx[i * v + t[i]] -= k;
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Row-wise cosine similarity of two `n x d` matrices, giving `n` values.
    /// Norms below `eps` are replaced by `eps`.
    pub fn cosine_similarity_rows(&self, other: &Tensor, eps: f64) -> Result<Tensor> {
        check_same("cosine_similarity", self, other)?;
        let (n, d) = rank2("cosine_similarity", self)?;
        let (a, b) = (self.data(), other.data());
        let mut dots = vec![0.0; n];
        let mut sa = vec![0.0; n];
        let mut sb = vec![0.0; n];
        let mut out = vec![0.0; n];
        let eps2 = eps * eps;
        for i in 0..n {
            let (ar, br) = (&a[i * d..(i + 1) * d], &b[i * d..(i + 1) * d]);
            dots[i] = ar.iter().zip(br).map(|(x, y)| x * y).sum();
            sa[i] = ar.iter().map(|x| x * x).sum();
            sb[i] = br.iter().map(|x| x * x).sum();
            // sqrt of the product keeps cos(a, a) == 1 exactly.
            out[i] = dots[i] / (sa[i].max(eps2) * sb[i].max(eps2)).sqrt();
        }
        Ok(Tensor::from_op(
            out,
            vec![n],
            "cosine_similarity",
            vec![self.clone(), other.clone()],
            Box::new(move |g, p| {
                let (a, b) = (p[0].data(), p[1].data());
                let mut ga = vec![0.0; n * d];
                let mut gb = vec![0.0; n * d];
                for i in 0..n {
                    let na = sa[i].sqrt();
                    let nb = sb[i].sqrt();
                    let ra = na.max(eps);
                    let rb = nb.max(eps);
                    let inv = 1.0 / (ra * rb);
                    // d(1/ra)/da = -a / (ra^2 na) when the norm is unclamped
                    let ka = if na > eps { dots[i] / (ra * ra * rb * na) } else { 0.0 };
                    let kb = if nb > eps { dots[i] / (ra * rb * rb * nb) } else { 0.0 };
                    for j in 0..d {
                        let (x, y) = (a[i * d + j], b[i * d + j]);
                        ga[i * d + j] = g[i] * (y * inv - ka * x);
                        gb[i * d + j] = g[i] * (x * inv - kb * y);
                    }
                }
                vec![Some(ga), Some(gb)]
            }),
        ))
    }

    /// Cosine similarity of two vectors as a one-element tensor.
    pub fn cosine_similarity(&self, other: &Tensor, eps: f64) -> Result<Tensor> {
        if self.rank() != 1 || other.rank() != 1 {
            return Err(dim_err("cosine_similarity", format!("{:?} vs {:?}", self.shape(), other.shape())));
        }
        let d = self.numel();
        self.reshape(&[1, d])?.cosine_similarity_rows(&other.reshape(&[1, other.numel()])?, eps)
    }
}

/// Plain-value cosine similarity, `dot / (max(|a|, eps) * max(|b|, eps))`.
pub fn cosine_similarity(a: &[f64], b: &[f64], eps: f64) -> f64 {
    assert_eq!(a.len(), b.len(), "cosine_similarity: length mismatch");
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let sa: f64 = a.iter().map(|x| x * x).sum();
    let sb: f64 = b.iter().map(|x| x * x).sum();
    dot / (sa.max(eps * eps) * sb.max(eps * eps)).sqrt()
}
