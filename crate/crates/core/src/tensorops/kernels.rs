//! Forward and backward kernels. All reductions run in a fixed loop order so
//! results are bitwise reproducible for a given input.

use super::Tensor;
use crate::model::Accumulate;
use crate::error::{Error, Result};

pub const LN_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Strided read-only matrix operand.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rs: usize,
    pub cs: usize,
}

impl<'a> MatRef<'a> {
    pub fn row_major(data: &'a [f64], cols: usize) -> Self {
        MatRef { data, rs: cols, cs: 1 }
    }

    /// Transposed view of a row-major `rows × cols` matrix.
    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        MatRef { data, rs: 1, cs: cols }
    }

    fn fits(&self, rows: usize, cols: usize) -> bool {
        rows == 0 || cols == 0 || (rows - 1) * self.rs + (cols - 1) * self.cs < self.data.len()
    }
}

/// `C = alpha·A·B + beta·C` with `A: m×k`, `B: k×n`, `C: m×n` row stride `c_rs`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    acc: Accumulate,
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: MatRef<'_>,
    b: MatRef<'_>,
    beta: f64,
    c: &mut [f64],
    c_rs: usize,
) {
    assert!(a.fits(m, k), "gemm: A operand out of bounds");
    assert!(b.fits(k, n), "gemm: B operand out of bounds");
    assert!(
        m == 0 || n == 0 || (m - 1) * c_rs + n <= c.len(),
        "gemm: C operand out of bounds"
    );
    if m == 0 || n == 0 {
        return;
    }
    if acc == Accumulate::F32 {
        return gemm_f32(m, k, n, alpha, a, b, beta, c, c_rs);
    }
    // SAFETY: the asserts above bound every index touched for the given
    // dimensions and strides; `c` is exclusively borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            c_rs as isize,
            1,
        );
    }
}

/// `f32` copy of a strided operand with the strides to read it by. Dense
/// spans keep their layout; sparse ones (one head of a fused buffer) are
/// packed row-major.
fn to_f32(x: MatRef<'_>, rows: usize, cols: usize) -> (Vec<f32>, usize, usize) {
    let span = (rows - 1) * x.rs + (cols - 1) * x.cs + 1;
    if span <= 2 * rows * cols {
        return (x.data[..span].iter().map(|&v| v as f32).collect(), x.rs, x.cs);
    }
    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        out.extend((0..cols).map(|j| x.data[i * x.rs + j * x.cs] as f32));
    }
    (out, cols, 1)
}

#[allow(clippy::too_many_arguments)]
fn gemm_f32(m: usize, k: usize, n: usize, alpha: f64, a: MatRef<'_>, b: MatRef<'_>, beta: f64, c: &mut [f64], c_rs: usize) {
    if k == 0 {
        for row in c.chunks_mut(c_rs).take(m) {
            row[..n].iter_mut().for_each(|v| *v *= beta);
        }
        return;
    }
    let (a32, a_rs, a_cs) = to_f32(a, m, k);
    let (b32, b_rs, b_cs) = to_f32(b, k, n);
    let mut c32: Vec<f32> = Vec::with_capacity(m * n);
    // SAFETY: `a32`/`b32` cover every index the strides reach for these
    // dimensions; `c32` has room for `m × n` and with beta 0 sgemm writes
    // every element without reading it.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha as f32,
            a32.as_ptr(),
            a_rs as isize,
            a_cs as isize,
            b32.as_ptr(),
            b_rs as isize,
            b_cs as isize,
            0.0,
            c32.as_mut_ptr(),
            n as isize,
            1,
        );
        c32.set_len(m * n);
    }
    for (i, src) in c32.chunks_exact(n).enumerate() {
        let dst = &mut c[i * c_rs..][..n];
        if beta == 0.0 {
            for (d, s) in dst.iter_mut().zip(src) {
                *d = f64::from(*s);
            }
        } else {
            for (d, s) in dst.iter_mut().zip(src) {
                *d = beta * *d + f64::from(*s);
            }
        }
    }
}

fn expect_matrix(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    if t.shape.len() != 2 {
        return Err(Error::contract(format!(
            "{what}: expected a matrix, got shape {:?}",
            t.shape
        )));
    }
    Ok((t.shape[0], t.shape[1]))
}

pub fn matmul_fwd(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = expect_matrix(a, "matmul lhs")?;
    let (k2, n) = expect_matrix(b, "matmul rhs")?;
    if k != k2 {
        return Err(Error::contract(format!(
            "matmul: {m}x{k} by {k2}x{n} not conformable"
        )));
    }
    let mut c = Tensor::zeros(&[m, n]);
    gemm(
        Accumulate::F64,
        m,
        k,
        n,
        1.0,
        MatRef::row_major(&a.data, k),
        MatRef::row_major(&b.data, n),
        0.0,
        &mut c.data,
        n,
    );
    Ok(c)
}

/// Returns `(dA, dB) = (dC·Bᵀ, Aᵀ·dC)`.
pub fn matmul_bwd(dc: &Tensor, a: &Tensor, b: &Tensor) -> Result<(Tensor, Tensor)> {
    let (m, k) = expect_matrix(a, "matmul lhs")?;
    let (k2, n) = expect_matrix(b, "matmul rhs")?;
    let (m2, n2) = expect_matrix(dc, "matmul grad")?;
    if k != k2 || m != m2 || n != n2 {
        return Err(Error::contract("matmul_bwd: shapes not conformable"));
    }
    let mut da = Tensor::zeros(&[m, k]);
    let mut db = Tensor::zeros(&[k, n]);
    gemm(
        Accumulate::F64,
        m,
        n,
        k,
        1.0,
        MatRef::row_major(&dc.data, n),
        MatRef::transposed(&b.data, n),
        0.0,
        &mut da.data,
        k,
    );
    gemm(
        Accumulate::F64,
        k,
        m,
        n,
        1.0,
        MatRef::transposed(&a.data, k),
        MatRef::row_major(&dc.data, n),
        0.0,
        &mut db.data,
        n,
    );
    Ok((da, db))
}

/// Per-row statistics kept from the LayerNorm forward pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LnStats {
    pub mean: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub(crate) fn layernorm_rows(
    x: &[f64],
    d: usize,
    gamma: &[f64],
    beta: &[f64],
    y: &mut [f64],
) -> LnStats {
    let rows = x.len() / d;
    let mut stats = LnStats {
        mean: Vec::with_capacity(rows),
        rstd: Vec::with_capacity(rows),
    };
    for (xr, yr) in x.chunks_exact(d).zip(y.chunks_exact_mut(d)) {
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + LN_EPS).sqrt();
        for j in 0..d {
            yr[j] = (xr[j] - mean) * rstd * gamma[j] + beta[j];
        }
        stats.mean.push(mean);
        stats.rstd.push(rstd);
    }
    stats
}

/// Writes `dx` and accumulates into `dgamma` / `dbeta`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn layernorm_rows_bwd(
    dy: &[f64],
    x: &[f64],
    d: usize,
    stats: &LnStats,
    gamma: &[f64],
    dx: &mut [f64],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) {
    let mut dxhat = vec![0.0; d];
    for (r, ((dyr, xr), dxr)) in dy
        .chunks_exact(d)
        .zip(x.chunks_exact(d))
        .zip(dx.chunks_exact_mut(d))
        .enumerate()
    {
        let mean = stats.mean[r];
        let rstd = stats.rstd[r];
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for j in 0..d {
            let xhat = (xr[j] - mean) * rstd;
            dxhat[j] = dyr[j] * gamma[j];
            sum_dxhat += dxhat[j];
            sum_dxhat_xhat += dxhat[j] * xhat;
            dgamma[j] += dyr[j] * xhat;
            dbeta[j] += dyr[j];
        }
        let mean_dxhat = sum_dxhat / d as f64;
        let mean_dxhat_xhat = sum_dxhat_xhat / d as f64;
        for j in 0..d {
            let xhat = (xr[j] - mean) * rstd;
            dxr[j] = rstd * (dxhat[j] - mean_dxhat - xhat * mean_dxhat_xhat);
        }
    }
}

pub fn layernorm_fwd(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<(Tensor, LnStats)> {
    let d = x.cols();
    if gamma.len() != d || beta.len() != d {
        return Err(Error::contract("layernorm: affine parameters must match row width"));
    }
    let mut y = Tensor::zeros(&x.shape);
    let stats = layernorm_rows(&x.data, d, &gamma.data, &beta.data, &mut y.data);
    Ok((y, stats))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layernorm_bwd(
    dy: &Tensor,
    x: &Tensor,
    stats: &LnStats,
    gamma: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let d = x.cols();
    if dy.shape != x.shape || gamma.len() != d || stats.mean.len() != x.rows() {
        return Err(Error::contract("layernorm_bwd: shapes not conformable"));
    }
    let mut dx = Tensor::zeros(&x.shape);
    let mut dgamma = Tensor::zeros(&[d]);
    let mut dbeta = Tensor::zeros(&[d]);
    layernorm_rows_bwd(
        &dy.data,
        &x.data,
        d,
        stats,
        &gamma.data,
        &mut dx.data,
        &mut dgamma.data,
        &mut dbeta.data,
    );
    Ok((dx, dgamma, dbeta))
}

/// `tanh` of the GELU inner argument.
#[inline]
pub(crate) fn gelu_tanh(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_K * x * x * x);
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + gelu_tanh(x))
}

/// Derivative of GELU given `t = gelu_tanh(x)`.
#[inline]
pub(crate) fn gelu_grad_with(x: f64, t: f64) -> f64 {
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

#[inline]
pub(crate) fn gelu_grad(x: f64) -> f64 {
    gelu_grad_with(x, gelu_tanh(x))
}

pub fn gelu_fwd(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    y.precision = super::Precision::Wide;
    y.data.iter_mut().for_each(|v| *v = gelu(*v));
    y
}

pub fn gelu_bwd(dy: &Tensor, x: &Tensor) -> Result<Tensor> {
    if dy.shape != x.shape {
        return Err(Error::contract("gelu_bwd: shape mismatch"));
    }
    let data = dy
        .data
        .iter()
        .zip(&x.data)
        .map(|(g, v)| g * gelu_grad(*v))
        .collect();
    Tensor::new(x.shape.clone(), data)
}

/// Softmax of one row in place, restricted to the first `valid` entries;
/// the rest are set to zero.
#[inline]
pub(crate) fn softmax_row(row: &mut [f64], valid: usize) {
    let max = row[..valid]
        .iter()
        .fold(f64::NEG_INFINITY, |m, &v| if v > m { v } else { m });
    let mut sum = 0.0;
    for v in row[..valid].iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    row[..valid].iter_mut().for_each(|v| *v *= inv);
    row[valid..].iter_mut().for_each(|v| *v = 0.0);
}

/// `dx = y ⊙ (dy − Σ dy⊙y)` for one row, over the first `valid` entries.
#[inline]
pub(crate) fn softmax_row_bwd(dy: &[f64], y: &[f64], dx: &mut [f64], valid: usize) {
    let dot: f64 = dy[..valid].iter().zip(&y[..valid]).map(|(a, b)| a * b).sum();
    for j in 0..valid {
        dx[j] = y[j] * (dy[j] - dot);
    }
    dx[valid..].iter_mut().for_each(|v| *v = 0.0);
}

pub fn softmax_fwd(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    y.precision = super::Precision::Wide;
    let d = x.cols();
    for row in y.data.chunks_exact_mut(d) {
        softmax_row(row, d);
    }
    y
}

pub fn softmax_bwd(dy: &Tensor, y: &Tensor) -> Result<Tensor> {
    if dy.shape != y.shape {
        return Err(Error::contract("softmax_bwd: shape mismatch"));
    }
    let d = y.cols();
    let mut dx = Tensor::zeros(&y.shape);
    for ((g, yr), out) in dy
        .data
        .chunks_exact(d)
        .zip(y.data.chunks_exact(d))
        .zip(dx.data.chunks_exact_mut(d))
    {
        softmax_row_bwd(g, yr, out, d);
    }
    Ok(dx)
}

pub fn embedding_fwd(table: &Tensor, ids: &[u32]) -> Result<Tensor> {
    let (vocab, d) = expect_matrix(table, "embedding table")?;
    let mut out = Tensor::zeros(&[ids.len(), d]);
    for (row, &id) in out.data.chunks_exact_mut(d).zip(ids) {
        let id = id as usize;
        if id >= vocab {
            return Err(Error::contract(format!("token {id} outside vocabulary {vocab}")));
        }
        row.copy_from_slice(&table.data[id * d..(id + 1) * d]);
    }
    Ok(out)
}

/// Scatter-adds rows of `dout` into a `vocab × d` gradient table.
pub fn embedding_bwd(dout: &Tensor, ids: &[u32], vocab: usize) -> Result<Tensor> {
    let d = dout.cols();
    if dout.rows() != ids.len() {
        return Err(Error::contract("embedding_bwd: one gradient row per id"));
    }
    let mut dtable = Tensor::zeros(&[vocab, d]);
    for (row, &id) in dout.data.chunks_exact(d).zip(ids) {
        let id = id as usize;
        if id >= vocab {
            return Err(Error::contract(format!("token {id} outside vocabulary {vocab}")));
        }
        for (acc, g) in dtable.data[id * d..(id + 1) * d].iter_mut().zip(row) {
            *acc += g;
        }
    }
    Ok(dtable)
}

pub(crate) fn cross_entropy_rows(logits: &[f64], vocab: usize, targets: &[u32]) -> f64 {
    let mut total = 0.0;
    for (row, &t) in logits.chunks_exact(vocab).zip(targets) {
        let max = row
            .iter()
            .fold(f64::NEG_INFINITY, |m, &v| if v > m { v } else { m });
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[t as usize];
    }
    total / targets.len() as f64
}

/// `dlogits = scale · (softmax(logits) − onehot(targets)) / n`.
pub(crate) fn cross_entropy_rows_bwd(
    logits: &[f64],
    vocab: usize,
    targets: &[u32],
    scale: f64,
    dlogits: &mut [f64],
) {
    let coef = scale / targets.len() as f64;
    for ((row, out), &t) in logits
        .chunks_exact(vocab)
        .zip(dlogits.chunks_exact_mut(vocab))
        .zip(targets)
    {
        out.copy_from_slice(row);
        softmax_row(out, vocab);
        out[t as usize] -= 1.0;
        out.iter_mut().for_each(|v| *v *= coef);
    }
}

fn check_targets(logits: &Tensor, targets: &[u32]) -> Result<usize> {
    let (n, vocab) = expect_matrix(logits, "logits")?;
    if n != targets.len() || n == 0 {
        return Err(Error::contract("cross_entropy: one target per logit row"));
    }
    if targets.iter().any(|&t| t as usize >= vocab) {
        return Err(Error::contract("cross_entropy: target outside vocabulary"));
    }
    Ok(vocab)
}

/// Mean token negative log-likelihood in nats.
pub fn cross_entropy_fwd(logits: &Tensor, targets: &[u32]) -> Result<f64> {
    let vocab = check_targets(logits, targets)?;
    Ok(cross_entropy_rows(&logits.data, vocab, targets))
}

pub fn cross_entropy_bwd(logits: &Tensor, targets: &[u32], scale: f64) -> Result<Tensor> {
    let vocab = check_targets(logits, targets)?;
    let mut d = Tensor::zeros(&logits.shape);
    cross_entropy_rows_bwd(&logits.data, vocab, targets, scale, &mut d.data);
    Ok(d)
}
