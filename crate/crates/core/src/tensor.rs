//! Dense row-major `f64` arrays and the numeric kernels built on them.
//!
//! Tensors are immutable once built. The payload sits behind an `Arc`, so
//! cloning a tensor (and therefore a record or a block) never copies data.

use std::fmt;
use std::sync::Arc;

use crate::error::{shape_err, Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Arc<[f64]>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.dims)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", &self.data[..])?;
        }
        Ok(())
    }
}

fn check_dims(dims: &[usize]) -> Result<usize> {
    if dims.is_empty() {
        return Err(shape_err!("tensor needs at least one dimension"));
    }
    if dims.iter().any(|&d| d == 0) {
        return Err(shape_err!("zero extent in dims {dims:?}"));
    }
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| shape_err!("dims {dims:?} overflow"))
}

impl Tensor {
    /// Build a tensor, checking that `data.len()` matches `dims`.
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n = check_dims(&dims)?;
        if n != data.len() {
            return Err(shape_err!(
                "dims {dims:?} need {n} values, got {}",
                data.len()
            ));
        }
        Ok(Tensor {
            dims,
            data: data.into(),
        })
    }

    /// Same as [`Tensor::new`] but also rejects NaN and infinities. Use for
    /// anything read from outside the process.
    pub fn from_external(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric(format!(
                "non-finite value {} at flat index {pos}",
                data[pos]
            )));
        }
        Self::new(dims, data)
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let n = check_dims(dims).expect("valid dims");
        Tensor {
            dims: dims.to_vec(),
            data: vec![0.0; n].into(),
        }
    }

    pub fn filled(dims: &[usize], value: f64) -> Self {
        let n = check_dims(dims).expect("valid dims");
        Tensor {
            dims: dims.to_vec(),
            data: vec![value; n].into(),
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            dims: vec![1],
            data: vec![value].into(),
        }
    }

    pub fn vector(values: Vec<f64>) -> Self {
        let n = values.len().max(1);
        let values = if values.is_empty() { vec![0.0] } else { values };
        Tensor {
            dims: vec![n],
            data: values.into(),
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Tensor {
            dims: vec![n, n],
            data: data.into(),
        }
    }

    /// Build a matrix from a closure over `(row, col)`.
    pub fn from_fn2(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Tensor::new(vec![rows, cols], data).expect("valid dims")
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.to_vec()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    /// Logical payload size used by the block manager's accounting.
    pub fn size_bytes(&self) -> usize {
        self.data.len() * std::mem::size_of::<f64>()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, dims: Vec<usize>) -> Result<Self> {
        let n = check_dims(&dims)?;
        if n != self.len() {
            return Err(shape_err!("cannot reshape {:?} into {dims:?}", self.dims));
        }
        Ok(Tensor {
            dims,
            data: self.data.clone(),
        })
    }

    fn expect_matrix(&self, what: &str) -> Result<(usize, usize)> {
        match self.dims[..] {
            [r, c] => Ok((r, c)),
            _ => Err(shape_err!("{what}: expected a matrix, got dims {:?}", self.dims)),
        }
    }

    pub fn rows(&self) -> usize {
        self.dims[0]
    }

    pub fn cols(&self) -> usize {
        if self.dims.len() >= 2 {
            self.dims[1]
        } else {
            1
        }
    }

    /// Element `(i, j)` of a matrix.
    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dims[1] + j]
    }

    /// Number of records along the leading axis.
    pub fn num_records(&self) -> usize {
        self.dims[0]
    }

    /// Slice `index` along the leading axis, dropping that axis. A 1-D
    /// tensor yields a one-element vector.
    pub fn record(&self, index: usize) -> Result<Tensor> {
        if index >= self.dims[0] {
            return Err(shape_err!(
                "record {index} out of range for leading extent {}",
                self.dims[0]
            ));
        }
        let inner: Vec<usize> = if self.dims.len() == 1 {
            vec![1]
        } else {
            self.dims[1..].to_vec()
        };
        let stride: usize = inner.iter().product();
        let start = index * stride;
        Tensor::new(inner, self.data[start..start + stride].to_vec())
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| shape_err!("cannot stack zero tensors"))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.dims != first.dims {
                return Err(shape_err!(
                    "stack: dims {:?} differ from {:?}",
                    t.dims,
                    first.dims
                ));
            }
            data.extend_from_slice(&t.data);
        }
        let mut dims = vec![items.len()];
        dims.extend_from_slice(&first.dims);
        Tensor::new(dims, data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.dims != other.dims {
            return Err(shape_err!(
                "elementwise op on {:?} and {:?}",
                self.dims,
                other.dims
            ));
        }
        Ok(Tensor {
            dims: self.dims.clone(),
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    /// `self + s * other`.
    pub fn axpy(&self, s: f64, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + s * b)
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.len() != other.len() {
            return Err(shape_err!(
                "dot of {:?} and {:?}",
                self.dims,
                other.dims
            ));
        }
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| a * b)
            .sum())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn norm_fro(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn norm_l1(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.dims != other.dims {
            return Err(shape_err!(
                "diff of {:?} and {:?}",
                self.dims,
                other.dims
            ));
        }
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.expect_matrix("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(vec![c, r], out)
    }

    /// Rotate a matrix by 180 degrees.
    pub fn rot180(&self) -> Result<Tensor> {
        self.expect_matrix("rot180")?;
        let mut data = self.data.to_vec();
        data.reverse();
        Tensor::new(self.dims.clone(), data)
    }

    /// Columns `start..end` of a matrix.
    pub fn col_range(&self, start: usize, end: usize) -> Result<Tensor> {
        let (r, c) = self.expect_matrix("col_range")?;
        if start >= end || end > c {
            return Err(shape_err!("column range {start}..{end} of {c} columns"));
        }
        let w = end - start;
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&self.data[i * c + start..i * c + end]);
        }
        Tensor::new(vec![r, w], out)
    }

    /// Concatenate matrices with equal row counts side by side.
    pub fn hcat(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err!("hcat of zero matrices"))?;
        let r = first.expect_matrix("hcat")?.0;
        let mut total = 0;
        for p in parts {
            let (pr, pc) = p.expect_matrix("hcat")?;
            if pr != r {
                return Err(shape_err!("hcat: row counts {pr} and {r} differ"));
            }
            total += pc;
        }
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for p in parts {
                let pc = p.dims[1];
                out.extend_from_slice(&p.data[i * pc..(i + 1) * pc]);
            }
        }
        Tensor::new(vec![r, total], out)
    }
}

/// Matrix product `a · b`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.expect_matrix("matmul lhs")?;
    let (k2, n) = b.expect_matrix("matmul rhs")?;
    if k != k2 {
        return Err(shape_err!("matmul inner dims {k} vs {k2}"));
    }
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = ad[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `aᵀ · b` without materializing the transpose.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (k, m) = a.expect_matrix("matmul_tn lhs")?;
    let (k2, n) = b.expect_matrix("matmul_tn rhs")?;
    if k != k2 {
        return Err(shape_err!("matmul_tn inner dims {k} vs {k2}"));
    }
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let brow = &bd[p * n..(p + 1) * n];
        for i in 0..m {
            let api = ad[p * m + i];
            if api == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += api * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.expect_matrix("matmul_nt lhs")?;
    let (n, k2) = b.expect_matrix("matmul_nt rhs")?;
    if k != k2 {
        return Err(shape_err!("matmul_nt inner dims {k} vs {k2}"));
    }
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &bd[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    Tensor::new(vec![m, n], out)
}

fn check_kernel(image: &Tensor, kernel: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let (h, w) = image.expect_matrix("convolution image")?;
    let (p, q) = kernel.expect_matrix("convolution kernel")?;
    if p > h || q > w {
        return Err(shape_err!("kernel {p}x{q} larger than image {h}x{w}"));
    }
    if p % 2 == 0 || q % 2 == 0 {
        return Err(shape_err!("kernel extents must be odd, got {p}x{q}"));
    }
    Ok((h, w, p, q))
}

/// Linear 2-D convolution with zero padding, cropped to the image size.
pub fn convolve2d_same(image: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let (h, w, p, q) = check_kernel(image, kernel)?;
    let (cp, cq) = (p / 2, q / 2);
    let img = image.data();
    let ker = kernel.data();
    let mut out = vec![0.0; h * w];
    // out[i][j] = sum_{a,b} img[i + cp - a][j + cq - b] * ker[a][b]
    for i in 0..h {
        let a_lo = (i + cp + 1).saturating_sub(h);
        let a_hi = (i + cp).min(p - 1);
        for j in 0..w {
            let b_lo = (j + cq + 1).saturating_sub(w);
            let b_hi = (j + cq).min(q - 1);
            let mut acc = 0.0;
            for a in a_lo..=a_hi {
                let irow = (i + cp - a) * w;
                let krow = a * q;
                for b in b_lo..=b_hi {
                    acc += img[irow + j + cq - b] * ker[krow + b];
                }
            }
            out[i * w + j] = acc;
        }
    }
    Tensor::new(vec![h, w], out)
}

/// Adjoint of [`convolve2d_same`]: correlation with zero padding.
pub fn correlate2d_same(image: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let (h, w, p, q) = check_kernel(image, kernel)?;
    let (cp, cq) = (p / 2, q / 2);
    let img = image.data();
    let ker = kernel.data();
    let mut out = vec![0.0; h * w];
    // out[i][j] = sum_{a,b} img[i - cp + a][j - cq + b] * ker[a][b]
    for i in 0..h {
        let a_lo = cp.saturating_sub(i);
        let a_hi = (h + cp - 1 - i).min(p - 1);
        for j in 0..w {
            let b_lo = cq.saturating_sub(j);
            let b_hi = (w + cq - 1 - j).min(q - 1);
            let mut acc = 0.0;
            for a in a_lo..=a_hi {
                let irow = (i + a - cp) * w;
                let krow = a * q;
                for b in b_lo..=b_hi {
                    acc += img[irow + j + b - cq] * ker[krow + b];
                }
            }
            out[i * w + j] = acc;
        }
    }
    Tensor::new(vec![h, w], out)
}

/// Thin singular value decomposition `m = U · diag(s) · Vᵀ`.
#[derive(Debug, Clone)]
pub struct Svd {
    /// r × k with k = min(r, c); orthonormal columns.
    pub u: Tensor,
    /// Non-negative, non-increasing, length k.
    pub s: Vec<f64>,
    /// c × k; orthonormal columns.
    pub v: Tensor,
}

impl Svd {
    pub fn reconstruct(&self) -> Result<Tensor> {
        let k = self.s.len();
        let us = Tensor::from_fn2(self.u.rows(), k, |i, j| self.u.at(i, j) * self.s[j]);
        matmul_nt(&us, &self.v)
    }
}

const JACOBI_MAX_SWEEPS: usize = 80;

/// One-sided (Hestenes) Jacobi SVD.
pub fn svd(m: &Tensor) -> Result<Svd> {
    let (r, c) = m.expect_matrix("svd")?;
    if !m.is_finite() {
        return Err(Error::numeric("svd input contains non-finite values"));
    }
    if r < c {
        let t = svd(&m.transpose()?)?;
        return Ok(Svd {
            u: t.v,
            s: t.s,
            v: t.u,
        });
    }
    // r >= c: orthogonalize the c columns of m.
    let md = m.data();
    let mut cols: Vec<Vec<f64>> = (0..c)
        .map(|j| (0..r).map(|i| md[i * c + j]).collect())
        .collect();
    let mut vcols: Vec<Vec<f64>> = (0..c)
        .map(|j| {
            let mut e = vec![0.0; c];
            e[j] = 1.0;
            e
        })
        .collect();

    let negligible = f64::EPSILON * (r.max(c) as f64) * m.norm_fro();
    let negligible_sq = negligible * negligible;
    // Dot products of length-r columns carry about sqrt(r) ulps of rounding.
    let orth_tol = f64::EPSILON * (r as f64).sqrt().max(1.0);
    let mut converged = c < 2;
    for _ in 0..JACOBI_MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        for i in 0..c - 1 {
            for j in i + 1..c {
                let (alpha, beta, gamma) = {
                    let (ci, cj) = (&cols[i], &cols[j]);
                    let mut a = 0.0;
                    let mut b = 0.0;
                    let mut g = 0.0;
                    for (x, y) in ci.iter().zip(cj) {
                        a += x * x;
                        b += y * y;
                        g += x * y;
                    }
                    (a, b, g)
                };
                if gamma == 0.0
                    || alpha.min(beta) <= negligible_sq
                    || gamma.abs() <= orth_tol * (alpha * beta).sqrt()
                {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let cs = 1.0 / (1.0 + t * t).sqrt();
                let sn = cs * t;
                rotate_pair(&mut cols, i, j, cs, sn);
                rotate_pair(&mut vcols, i, j, cs, sn);
            }
        }
        converged = !rotated;
    }
    if !converged {
        return Err(Error::numeric("Jacobi SVD did not converge"));
    }

    let norms: Vec<f64> = cols
        .iter()
        .map(|col| col.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));

    let mut s = Vec::with_capacity(c);
    let mut ucols: Vec<Vec<f64>> = Vec::with_capacity(c);
    let mut vsorted: Vec<Vec<f64>> = Vec::with_capacity(c);
    let mut deficient = Vec::new();
    for (slot, &j) in order.iter().enumerate() {
        s.push(norms[j]);
        vsorted.push(vcols[j].clone());
        if norms[j] > negligible && norms[j] > 0.0 {
            ucols.push(cols[j].iter().map(|v| v / norms[j]).collect());
        } else {
            ucols.push(vec![0.0; r]);
            deficient.push(slot);
        }
    }
    complete_basis(&mut ucols, &deficient);

    let u = Tensor::from_fn2(r, c, |i, j| ucols[j][i]);
    let v = Tensor::from_fn2(c, c, |i, j| vsorted[j][i]);
    Ok(Svd { u, s, v })
}

fn rotate_pair(cols: &mut [Vec<f64>], i: usize, j: usize, cs: f64, sn: f64) {
    let (lo, hi) = cols.split_at_mut(j);
    let (ci, cj) = (&mut lo[i], &mut hi[0]);
    for (x, y) in ci.iter_mut().zip(cj.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = cs * a - sn * b;
        *y = sn * a + cs * b;
    }
}

/// Fill the listed columns with unit vectors orthogonal to every other column
/// (modified Gram-Schmidt over the standard basis).
fn complete_basis(cols: &mut [Vec<f64>], slots: &[usize]) {
    if slots.is_empty() {
        return;
    }
    let n = cols[0].len();
    let mut candidate = 0;
    for &slot in slots {
        while candidate < n {
            let mut e = vec![0.0; n];
            e[candidate] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for (k, other) in cols.iter().enumerate() {
                    if k == slot || other.iter().all(|&v| v == 0.0) {
                        continue;
                    }
                    let proj: f64 = e.iter().zip(other).map(|(a, b)| a * b).sum();
                    for (x, y) in e.iter_mut().zip(other) {
                        *x -= proj * y;
                    }
                }
            }
            let norm = e.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-8 {
                cols[slot] = e.into_iter().map(|v| v / norm).collect();
                break;
            }
        }
    }
}

/// Inverse of a symmetric positive definite matrix via Cholesky.
pub fn spd_inverse(m: &Tensor) -> Result<Tensor> {
    let (n, c) = m.expect_matrix("spd_inverse")?;
    if n != c {
        return Err(shape_err!("spd_inverse of non-square {n}x{c}"));
    }
    let a = m.data();
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[i * n + j];
            for k in 0..j {
                sum -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if sum <= 0.0 || !sum.is_finite() {
                    return Err(Error::numeric("matrix is not positive definite"));
                }
                l[i * n + i] = sum.sqrt();
            } else {
                l[i * n + j] = sum / l[j * n + j];
            }
        }
    }
    // Solve L Lᵀ X = I column by column.
    let mut inv = vec![0.0; n * n];
    let mut y = vec![0.0; n];
    for col in 0..n {
        for i in 0..n {
            let mut sum = if i == col { 1.0 } else { 0.0 };
            for k in 0..i {
                sum -= l[i * n + k] * y[k];
            }
            y[i] = sum / l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut sum = y[i];
            for k in i + 1..n {
                sum -= l[k * n + i] * inv[k * n + col];
            }
            inv[i * n + col] = sum / l[i * n + i];
        }
    }
    Tensor::new(vec![n, n], inv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::from_fn2(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Direct quadruple loop with explicit bounds checks.
    fn conv_oracle(img: &Tensor, k: &Tensor) -> Tensor {
        let (h, w) = (img.rows(), img.cols());
        let (p, q) = (k.rows(), k.cols());
        Tensor::from_fn2(h, w, |i, j| {
            let mut acc = 0.0;
            for a in 0..p {
                for b in 0..q {
                    let y = i as isize + (p / 2) as isize - a as isize;
                    let x = j as isize + (q / 2) as isize - b as isize;
                    if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                        acc += img.at(y as usize, x as usize) * k.at(a, b);
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn matmul_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = random_matrix(&mut rng, 3, 4);
        assert_eq!(matmul(&Tensor::identity(3), &b).unwrap(), b);
        let z = matmul(&b, &Tensor::zeros(&[4, 2])).unwrap();
        assert_eq!(z.max_abs(), 0.0);
        let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let v = Tensor::matrix(2, 1, vec![5.0, 6.0]).unwrap();
        assert_eq!(matmul(&a, &v).unwrap().data(), &[17.0, 39.0]);
        assert!(matches!(matmul(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn transposed_products_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_matrix(&mut rng, 5, 3);
        let b = random_matrix(&mut rng, 5, 4);
        let c = random_matrix(&mut rng, 6, 3);
        let tn = matmul_tn(&a, &b).unwrap();
        let reference = matmul(&a.transpose().unwrap(), &b).unwrap();
        assert!(tn.max_abs_diff(&reference).unwrap() < 1e-14);
        let nt = matmul_nt(&a, &c).unwrap();
        let reference = matmul(&a, &c.transpose().unwrap()).unwrap();
        assert!(nt.max_abs_diff(&reference).unwrap() < 1e-14);
    }

    #[test]
    fn matmul_is_associative() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let a = random_matrix(&mut rng, 4, 5);
            let b = random_matrix(&mut rng, 5, 3);
            let c = random_matrix(&mut rng, 3, 6);
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            let rel = left.sub(&right).unwrap().norm_fro() / left.norm_fro();
            assert!(rel < 1e-12, "rel {rel}");
        }
    }

    #[test]
    fn convolution_identity_and_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = random_matrix(&mut rng, 7, 9);
        let mut delta = vec![0.0; 15];
        delta[7] = 1.0;
        let delta = Tensor::matrix(3, 5, delta).unwrap();
        assert_eq!(convolve2d_same(&img, &delta).unwrap(), img);
        assert_eq!(correlate2d_same(&img, &delta).unwrap(), img);
        let k = random_matrix(&mut rng, 3, 3);
        let zero = convolve2d_same(&Tensor::zeros(&[7, 9]), &k).unwrap();
        assert_eq!(zero.max_abs(), 0.0);
    }

    #[test]
    fn ramp_box_matches_loop_oracle() {
        let ramp = Tensor::from_fn2(4, 4, |i, j| (i * 4 + j) as f64);
        let boxk = Tensor::filled(&[3, 3], 1.0 / 9.0);
        let out = convolve2d_same(&ramp, &boxk).unwrap();
        let expected = conv_oracle(&ramp, &boxk);
        assert!(out.max_abs_diff(&expected).unwrap() < 1e-14);
        // Corner: (0 + 1 + 4 + 5) / 9; interior (1,1): (0+1+2+4+5+6+8+9+10)/9 = 5.
        assert!((out.at(0, 0) - 10.0 / 9.0).abs() < 1e-14);
        assert!((out.at(1, 1) - 5.0).abs() < 1e-14);
    }

    #[test]
    fn random_kernels_match_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (h, w, p, q) in [(8, 8, 3, 3), (9, 6, 5, 1), (5, 7, 5, 7), (10, 4, 1, 3)] {
            let img = random_matrix(&mut rng, h, w);
            let k = random_matrix(&mut rng, p, q);
            let out = convolve2d_same(&img, &k).unwrap();
            assert!(out.max_abs_diff(&conv_oracle(&img, &k)).unwrap() < 1e-13);
            let corr = correlate2d_same(&img, &k).unwrap();
            let via_rot = conv_oracle(&img, &k.rot180().unwrap());
            assert!(corr.max_abs_diff(&via_rot).unwrap() < 1e-13);
        }
    }

    #[test]
    fn correlation_is_adjoint_of_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..10 {
            let x = random_matrix(&mut rng, 8, 8);
            let y = random_matrix(&mut rng, 8, 8);
            let k = random_matrix(&mut rng, 5, 3);
            let lhs = convolve2d_same(&x, &k).unwrap().dot(&y).unwrap();
            let rhs = x.dot(&correlate2d_same(&y, &k).unwrap()).unwrap();
            let scale = x.norm_fro() * y.norm_fro() * k.norm_fro();
            assert!((lhs - rhs).abs() <= 1e-12 * scale);
        }
    }

    #[test]
    fn symmetric_kernel_correlation_equals_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let img = random_matrix(&mut rng, 6, 6);
        let k = Tensor::from_fn2(3, 3, |i, j| 1.0 / (1.0 + (i as f64 - 1.0).abs() + (j as f64 - 1.0).abs()));
        let a = convolve2d_same(&img, &k).unwrap();
        let b = correlate2d_same(&img, &k).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-15);
    }

    #[test]
    fn kernel_shape_errors() {
        let img = Tensor::zeros(&[4, 4]);
        assert!(convolve2d_same(&img, &Tensor::zeros(&[5, 3])).is_err());
        assert!(convolve2d_same(&img, &Tensor::zeros(&[2, 3])).is_err());
        assert!(correlate2d_same(&img, &Tensor::zeros(&[3, 5])).is_err());
    }

    fn orthonormality_err(m: &Tensor) -> f64 {
        let g = matmul_tn(m, m).unwrap();
        g.sub(&Tensor::identity(g.rows())).unwrap().max_abs()
    }

    #[test]
    fn svd_diagonal_and_zero() {
        let d = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 3.0]).unwrap();
        let out = svd(&d).unwrap();
        assert!((out.s[0] - 3.0).abs() < 1e-15 && (out.s[1] - 1.0).abs() < 1e-15);
        let z = svd(&Tensor::zeros(&[3, 2])).unwrap();
        assert_eq!(z.s, vec![0.0, 0.0]);
        assert!(orthonormality_err(&z.u) < 1e-12);
        assert!(orthonormality_err(&z.v) < 1e-12);
    }

    #[test]
    fn svd_reconstructs_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for (r, c) in [(6, 4), (4, 6), (10, 10), (1, 5), (7, 1)] {
            let m = random_matrix(&mut rng, r, c);
            let out = svd(&m).unwrap();
            let err = out.reconstruct().unwrap().sub(&m).unwrap().norm_fro();
            assert!(err <= 1e-10 * m.norm_fro(), "{r}x{c}: {err}");
            assert!(out.s.windows(2).all(|w| w[0] >= w[1]));
            assert!(out.s.iter().all(|&v| v >= 0.0));
            assert!(orthonormality_err(&out.u) <= 1e-10);
            assert!(orthonormality_err(&out.v) <= 1e-10);
        }
    }

    #[test]
    fn svd_rank_deficient_has_orthonormal_factors() {
        let u = Tensor::matrix(5, 1, vec![1.0, 2.0, 0.0, -1.0, 0.5]).unwrap();
        let v = Tensor::matrix(4, 1, vec![0.5, -1.0, 2.0, 1.0]).unwrap();
        let m = matmul_nt(&u, &v).unwrap();
        let out = svd(&m).unwrap();
        assert!(out.s[1] <= 1e-14 * out.s[0]);
        assert!(orthonormality_err(&out.u) <= 1e-10);
        assert!(orthonormality_err(&out.v) <= 1e-10);
        let err = out.reconstruct().unwrap().sub(&m).unwrap().norm_fro();
        assert!(err <= 1e-10 * m.norm_fro());
    }

    #[test]
    fn svd_rejects_non_finite() {
        let m = Tensor::matrix(1, 2, vec![1.0, f64::NAN]).unwrap();
        assert!(matches!(svd(&m), Err(Error::Numeric { .. })));
    }

    #[test]
    fn spd_inverse_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random_matrix(&mut rng, 6, 6);
        let spd = matmul_tn(&a, &a)
            .unwrap()
            .add(&Tensor::identity(6))
            .unwrap();
        let inv = spd_inverse(&spd).unwrap();
        let id = matmul(&spd, &inv).unwrap();
        assert!(id.sub(&Tensor::identity(6)).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn external_input_rejects_nan() {
        assert!(Tensor::from_external(vec![2], vec![1.0, f64::INFINITY]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn record_and_stack_round_trip() {
        let t = Tensor::new(vec![3, 2, 2], (0..12).map(f64::from).collect()).unwrap();
        let recs: Vec<Tensor> = (0..3).map(|i| t.record(i).unwrap()).collect();
        assert_eq!(recs[1].data(), &[4.0, 5.0, 6.0, 7.0]);
        assert_eq!(Tensor::stack(&recs).unwrap(), t);
    }
}
