//! Raw fp64 kernels.
//!
//! Every output row is produced by a single thread with a fixed summation
//! order, so results are bitwise identical for any worker count and a row's
//! value never depends on the other rows in the batch.

use rayon::prelude::*;

const ROW_CHUNK: usize = 8;
const PAR_THRESHOLD: usize = 1 << 15;

/// `out[m, n] = a[m, k] · b[k, n]`.
///
/// Each output element is `((0 + a₀b₀) + a₁b₁) + …` in `k` order regardless
/// of blocking or instruction set, so every dispatch path agrees bitwise.
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * n];
    if m == 0 || n == 0 {
        return out;
    }
    let avx2 = has_avx2();
    let rows = |(chunk_idx, chunk): (usize, &mut [f64])| {
        let first = chunk_idx * ROW_CHUNK;
        let a_rows = &a[first * k..(first + chunk.len() / n) * k];
        #[cfg(target_arch = "x86_64")]
        if avx2 {
            // SAFETY: the CPU supports AVX2, checked at runtime above.
            unsafe { matmul_block_avx2(a_rows, b, chunk, k, n) };
            return;
        }
        let _ = avx2;
        matmul_block(a_rows, b, chunk, k, n);
    };
    if m * k * n >= PAR_THRESHOLD {
        out.par_chunks_mut(ROW_CHUNK * n).enumerate().for_each(rows);
    } else {
        out.chunks_mut(ROW_CHUNK * n).enumerate().for_each(rows);
    }
    out
}

fn has_avx2() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        std::arch::is_x86_feature_detected!("avx2")
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn matmul_block_avx2(a: &[f64], b: &[f64], out: &mut [f64], k: usize, n: usize) {
    matmul_block(a, b, out, k, n)
}

const MR: usize = 4;
const NR: usize = 8;

/// Register-blocked product of a few rows of `a` with all of `b`.
#[inline(always)]
fn matmul_block(a: &[f64], b: &[f64], out: &mut [f64], k: usize, n: usize) {
    let m = out.len() / n;
    let mut i = 0;
    while i + MR <= m {
        let mut j = 0;
        while j + NR <= n {
            let mut acc = [[0.0f64; NR]; MR];
            for kk in 0..k {
                let bv: &[f64; NR] = b[kk * n + j..kk * n + j + NR].try_into().expect("NR wide");
                for (r, acc_row) in acc.iter_mut().enumerate() {
                    let av = a[(i + r) * k + kk];
                    for c in 0..NR {
                        acc_row[c] += av * bv[c];
                    }
                }
            }
            for (r, acc_row) in acc.iter().enumerate() {
                out[(i + r) * n + j..(i + r) * n + j + NR].copy_from_slice(acc_row);
            }
            j += NR;
        }
        if j < n {
            for r in i..i + MR {
                matmul_row_tail(&a[r * k..(r + 1) * k], b, &mut out[r * n..(r + 1) * n], j, n);
            }
        }
        i += MR;
    }
    for r in i..m {
        matmul_row_tail(&a[r * k..(r + 1) * k], b, &mut out[r * n..(r + 1) * n], 0, n);
    }
}

/// Columns `from..n` of one output row.
#[inline(always)]
fn matmul_row_tail(a_row: &[f64], b: &[f64], out_row: &mut [f64], from: usize, n: usize) {
    for (kk, &aik) in a_row.iter().enumerate() {
        let b_row = &b[kk * n + from..(kk + 1) * n];
        for (o, &bv) in out_row[from..].iter_mut().zip(b_row) {
            *o += aik * bv;
        }
    }
}

pub(crate) fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

/// Column-sum of a `[rows, cols]` buffer.
pub(crate) fn sum_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for row in x.chunks(cols) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

/// Shape bookkeeping for multi-head causal attention over `[batch, seq, d]`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct AttnDims {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub d: usize,
}

impl AttnDims {
    fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    fn scale(&self) -> f64 {
        1.0 / (self.head_dim() as f64).sqrt()
    }

    fn gather(&self, x: &[f64], b: usize, h: usize) -> Vec<f64> {
        let dh = self.head_dim();
        let mut out = Vec::with_capacity(self.seq * dh);
        for t in 0..self.seq {
            let base = (b * self.seq + t) * self.d + h * dh;
            out.extend_from_slice(&x[base..base + dh]);
        }
        out
    }

    fn scatter(&self, dst: &mut [f64], src: &[f64], b: usize, h: usize) {
        let dh = self.head_dim();
        for t in 0..self.seq {
            let base = (b * self.seq + t) * self.d + h * dh;
            dst[base..base + dh].copy_from_slice(&src[t * dh..(t + 1) * dh]);
        }
    }
}

/// Returns `(output, probs)` where `probs` is `[batch, heads, seq, seq]` with
/// zeros above the diagonal.
pub(crate) fn causal_attention(q: &[f64], k: &[f64], v: &[f64], dims: AttnDims) -> (Vec<f64>, Vec<f64>) {
    let (t_len, dh, scale) = (dims.seq, dims.head_dim(), dims.scale());
    let per_head: Vec<(Vec<f64>, Vec<f64>)> = (0..dims.batch * dims.heads)
        .into_par_iter()
        .map(|bh| {
            let (b, h) = (bh / dims.heads, bh % dims.heads);
            let (qh, kh, vh) = (dims.gather(q, b, h), dims.gather(k, b, h), dims.gather(v, b, h));
            let mut probs = vec![0.0; t_len * t_len];
            let mut out = vec![0.0; t_len * dh];
            for i in 0..t_len {
                let qi = &qh[i * dh..(i + 1) * dh];
                let row = &mut probs[i * t_len..(i + 1) * t_len];
                let mut max = f64::NEG_INFINITY;
                for j in 0..=i {
                    let kj = &kh[j * dh..(j + 1) * dh];
                    let s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                    row[j] = s;
                    max = max.max(s);
                }
                let mut z = 0.0;
                for p in row.iter_mut().take(i + 1) {
                    *p = (*p - max).exp();
                    z += *p;
                }
                for p in row.iter_mut().take(i + 1) {
                    *p /= z;
                }
                let oi = &mut out[i * dh..(i + 1) * dh];
                for j in 0..=i {
                    let vj = &vh[j * dh..(j + 1) * dh];
                    for (o, &vv) in oi.iter_mut().zip(vj) {
                        *o += row[j] * vv;
                    }
                }
            }
            (out, probs)
        })
        .collect();

    let mut out = vec![0.0; q.len()];
    let mut probs = Vec::with_capacity(dims.batch * dims.heads * t_len * t_len);
    for (bh, (o, p)) in per_head.into_iter().enumerate() {
        dims.scatter(&mut out, &o, bh / dims.heads, bh % dims.heads);
        probs.extend_from_slice(&p);
    }
    (out, probs)
}

/// Gradients `(dq, dk, dv)` of causal attention given the cached probabilities.
pub(crate) fn causal_attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    d_out: &[f64],
    dims: AttnDims,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (t_len, dh, scale) = (dims.seq, dims.head_dim(), dims.scale());
    let per_head: Vec<[Vec<f64>; 3]> = (0..dims.batch * dims.heads)
        .into_par_iter()
        .map(|bh| {
            let (b, h) = (bh / dims.heads, bh % dims.heads);
            let (qh, kh, vh) = (dims.gather(q, b, h), dims.gather(k, b, h), dims.gather(v, b, h));
            let doh = dims.gather(d_out, b, h);
            let p = &probs[bh * t_len * t_len..(bh + 1) * t_len * t_len];
            let mut dq = vec![0.0; t_len * dh];
            let mut dk = vec![0.0; t_len * dh];
            let mut dv = vec![0.0; t_len * dh];
            let mut ds = vec![0.0; t_len];
            for i in 0..t_len {
                let doi = &doh[i * dh..(i + 1) * dh];
                let prow = &p[i * t_len..(i + 1) * t_len];
                let mut dot = 0.0;
                for j in 0..=i {
                    let vj = &vh[j * dh..(j + 1) * dh];
                    let dp: f64 = doi.iter().zip(vj).map(|(a, b)| a * b).sum();
                    ds[j] = dp;
                    dot += dp * prow[j];
                    for (g, &o) in dv[j * dh..(j + 1) * dh].iter_mut().zip(doi) {
                        *g += prow[j] * o;
                    }
                }
                for j in 0..=i {
                    let dsij = prow[j] * (ds[j] - dot) * scale;
                    let (kj, qi) = (&kh[j * dh..(j + 1) * dh], &qh[i * dh..(i + 1) * dh]);
                    for (g, &kv) in dq[i * dh..(i + 1) * dh].iter_mut().zip(kj) {
                        *g += dsij * kv;
                    }
                    for (g, &qv) in dk[j * dh..(j + 1) * dh].iter_mut().zip(qi) {
                        *g += dsij * qv;
                    }
                }
            }
            [dq, dk, dv]
        })
        .collect();

    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    for (bh, [gq, gk, gv]) in per_head.into_iter().enumerate() {
        let (b, h) = (bh / dims.heads, bh % dims.heads);
        dims.scatter(&mut dq, &gq, b, h);
        dims.scatter(&mut dk, &gk, b, h);
        dims.scatter(&mut dv, &gv, b, h);
    }
    (dq, dk, dv)
}
