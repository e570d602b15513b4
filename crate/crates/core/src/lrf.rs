//! Low-rank factorization of convolution kernels.
//!
//! A kernel `(OC, IC, KS, KS)` is laid out as a `(IC*KS) x (OC*KS)` matrix,
//! decomposed by one-sided Jacobi SVD and truncated to its top `k` singular
//! triplets as `P = U_k sqrt(S_k)`, `Q = sqrt(S_k) V_k^T`.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

const MAX_SWEEPS: usize = 80;

#[derive(Clone, Debug, PartialEq)]
pub struct WeightMatrix {
    pub matrix: Tensor,
    /// `(OC, IC, KS, KS)`
    pub source_shape: [usize; 4],
}

/// Lays a conv kernel out as a matrix: element `(ic*KS + kh, oc*KS + kw)`
/// holds `w[oc, ic, kh, kw]`.
pub fn to_matrix(conv_weight: &Tensor) -> Result<WeightMatrix> {
    let [oc, ic, kh, kw] = match *conv_weight.shape() {
        [a, b, c, d] => [a, b, c, d],
        _ => {
            return Err(Error::InvalidArgument(format!(
                "expected a 4-D conv kernel, got shape {:?}",
                conv_weight.shape()
            )))
        }
    };
    if kh != kw {
        return Err(Error::InvalidArgument(format!(
            "non-square kernel {kh}x{kw}"
        )));
    }
    let ks = kh;
    let (rows, cols) = (ic * ks, oc * ks);
    let w = conv_weight.data();
    let mut m = vec![0.0; rows * cols];
    for o in 0..oc {
        for i in 0..ic {
            for h in 0..ks {
                for k in 0..ks {
                    m[(i * ks + h) * cols + o * ks + k] = w[((o * ic + i) * ks + h) * ks + k];
                }
            }
        }
    }
    Ok(WeightMatrix {
        matrix: Tensor::new(vec![rows, cols], m)?,
        source_shape: [oc, ic, ks, ks],
    })
}

/// Inverse of [`to_matrix`].
pub fn from_matrix(matrix: &Tensor, source_shape: [usize; 4]) -> Result<Tensor> {
    let [oc, ic, ks, _] = source_shape;
    let (rows, cols) = matrix.dims2()?;
    if rows != ic * ks || cols != oc * ks || source_shape[3] != ks {
        return Err(Error::ShapeMismatch {
            layer: "from_matrix".into(),
            expected: vec![ic * ks, oc * ks],
            actual: matrix.shape().to_vec(),
        });
    }
    let m = matrix.data();
    let mut w = vec![0.0; oc * ic * ks * ks];
    for o in 0..oc {
        for i in 0..ic {
            for h in 0..ks {
                for k in 0..ks {
                    w[((o * ic + i) * ks + h) * ks + k] = m[(i * ks + h) * cols + o * ks + k];
                }
            }
        }
    }
    Tensor::new(source_shape.to_vec(), w)
}

impl WeightMatrix {
    pub fn to_conv(&self) -> Result<Tensor> {
        from_matrix(&self.matrix, self.source_shape)
    }
}

/// Full SVD `m = U diag(S) V^T` with `U: r x r`, `V: c x c` and `S` of length
/// `min(r, c)`, descending.
#[derive(Clone, Debug)]
pub struct Svd {
    pub u: Tensor,
    pub s: Vec<f64>,
    pub v: Tensor,
}

/// One-sided (Hestenes) Jacobi SVD.
pub fn svd(m: &Tensor) -> Result<Svd> {
    let (r, c) = m.dims2()?;
    if !m.is_finite() {
        return Err(Error::InvalidArgument("svd input has non-finite entries".into()));
    }
    if r < c {
        let t = svd(&m.transpose2()?)?;
        return Ok(Svd {
            u: t.v,
            s: t.s,
            v: t.u,
        });
    }
    // Tall case: orthogonalize the c columns of m (stored column-major).
    let mut a = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            a[j * r + i] = m.data()[i * c + j];
        }
    }
    let mut v = vec![0.0; c * c];
    for j in 0..c {
        v[j * c + j] = 1.0;
    }
    let tol = 1e-15;
    let mut converged = false;
    let mut residual = 0.0;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        residual = 0.0f64;
        for p in 0..c {
            for q in p + 1..c {
                let (alpha, beta, gamma) = {
                    let (cp, cq) = (&a[p * r..(p + 1) * r], &a[q * r..(q + 1) * r]);
                    let mut al = 0.0;
                    let mut be = 0.0;
                    let mut ga = 0.0;
                    for (x, y) in cp.iter().zip(cq) {
                        al += x * x;
                        be += y * y;
                        ga += x * y;
                    }
                    (al, be, ga)
                };
                let scale = (alpha * beta).sqrt();
                if scale == 0.0 {
                    continue;
                }
                let off = gamma.abs() / scale;
                residual = residual.max(off);
                if off <= tol {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let cs = 1.0 / (1.0 + t * t).sqrt();
                let sn = cs * t;
                rotate(&mut a, r, p, q, cs, sn);
                rotate(&mut v, c, p, q, cs, sn);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::SvdNoConvergence {
            sweeps: MAX_SWEEPS,
            residual,
        });
    }
    let norms: Vec<f64> = (0..c)
        .map(|j| a[j * r..(j + 1) * r].iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]).then(x.cmp(&y)));
    let s: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    let cutoff = s.first().copied().unwrap_or(0.0) * 1e-13;

    // Columns of U, as rows of `ucols` for contiguous access.
    let mut ucols: Vec<Vec<f64>> = Vec::with_capacity(r);
    for (rank, &j) in order.iter().enumerate() {
        if s[rank] > cutoff && s[rank] > 0.0 {
            ucols.push(a[j * r..(j + 1) * r].iter().map(|x| x / s[rank]).collect());
        } else {
            break;
        }
    }
    complete_basis(&mut ucols, r);

    let mut u = vec![0.0; r * r];
    for (j, col) in ucols.iter().enumerate() {
        for i in 0..r {
            u[i * r + j] = col[i];
        }
    }
    let mut vm = vec![0.0; c * c];
    for (new, &j) in order.iter().enumerate() {
        for i in 0..c {
            vm[i * c + new] = v[j * c + i];
        }
    }
    Ok(Svd {
        u: Tensor::new(vec![r, r], u)?,
        s,
        v: Tensor::new(vec![c, c], vm)?,
    })
}

/// Rotates columns `p` and `q` of a column-major matrix with `n` rows.
fn rotate(x: &mut [f64], n: usize, p: usize, q: usize, cs: f64, sn: f64) {
    let (lo, hi) = x.split_at_mut(q * n);
    let cp = &mut lo[p * n..(p + 1) * n];
    let cq = &mut hi[..n];
    for (a, b) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xa, xb) = (*a, *b);
        *a = cs * xa - sn * xb;
        *b = sn * xa + cs * xb;
    }
}

/// Extends orthonormal vectors to a basis of R^n with Gram-Schmidt over the
/// standard basis (two passes for numerical orthogonality).
fn complete_basis(cols: &mut Vec<Vec<f64>>, n: usize) {
    let mut e = 0;
    while cols.len() < n && e < n {
        let mut cand = vec![0.0; n];
        cand[e] = 1.0;
        e += 1;
        for _ in 0..2 {
            for col in cols.iter() {
                let d: f64 = col.iter().zip(&cand).map(|(a, b)| a * b).sum();
                for (x, c) in cand.iter_mut().zip(col) {
                    *x -= d * c;
                }
            }
        }
        let norm = cand.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            cand.iter_mut().for_each(|x| *x /= norm);
            cols.push(cand);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorPair {
    /// `r x k`
    pub p: Tensor,
    /// `k x c`
    pub q: Tensor,
    pub sigma: Vec<f64>,
}

impl FactorPair {
    pub fn k(&self) -> usize {
        self.sigma.len()
    }
}

/// Keeps the top `k` singular triplets (clamped to the matrix rank bound),
/// split symmetrically as `U sqrt(S)` and `sqrt(S) V^T`, with each retained
/// left singular vector's largest-magnitude entry made non-negative.
pub fn truncate(svd: &Svd, k: usize) -> Result<FactorPair> {
    let r = svd.u.shape()[0];
    let c = svd.v.shape()[0];
    let max_k = r.min(c);
    if k == 0 {
        return Err(Error::InvalidArgument("rank k must be at least 1".into()));
    }
    let k = if k > max_k {
        warn!("rank {k} exceeds min({r}, {c}); clamped to {max_k}");
        max_k
    } else {
        k
    };
    let mut p = vec![0.0; r * k];
    let mut q = vec![0.0; k * c];
    for j in 0..k {
        let root = svd.s[j].sqrt();
        let mut pivot = 0.0f64;
        for i in 0..r {
            let x = svd.u.at2(i, j);
            if x.abs() > pivot.abs() {
                pivot = x;
            }
        }
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for i in 0..r {
            p[i * k + j] = sign * svd.u.at2(i, j) * root;
        }
        for i in 0..c {
            q[j * c + i] = sign * svd.v.at2(i, j) * root;
        }
    }
    Ok(FactorPair {
        p: Tensor::new(vec![r, k], p)?,
        q: Tensor::new(vec![k, c], q)?,
        sigma: svd.s[..k].to_vec(),
    })
}

/// SVD followed by [`truncate`].
pub fn factorize(m: &Tensor, k: usize) -> Result<FactorPair> {
    truncate(&svd(m)?, k)
}

/// Reorders and re-signs the components of `f` to line up with `reference`.
///
/// Components are matched greedily by the absolute cosine between their
/// stacked `[p_j; q_j]` vectors, highest first, then flipped so each matched
/// pair has a non-negative cosine. `P * Q` is unchanged. Nearby matrices get
/// nearby factors this way, which a per-matrix sign rule cannot promise when
/// singular values are close together.
pub fn align(f: &FactorPair, reference: &FactorPair) -> Result<FactorPair> {
    let (r, k) = f.p.dims2()?;
    let c = f.q.shape()[1];
    if reference.p.shape() != f.p.shape() || reference.q.shape() != f.q.shape() {
        return Err(Error::ShapeMismatch {
            layer: "align reference".into(),
            expected: f.p.shape().to_vec(),
            actual: reference.p.shape().to_vec(),
        });
    }
    let stacked = |x: &FactorPair, j: usize| -> Vec<f64> {
        let mut v: Vec<f64> = (0..r).map(|i| x.p.at2(i, j)).collect();
        v.extend((0..c).map(|i| x.q.at2(j, i)));
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|a| *a /= norm);
        }
        v
    };
    let mine: Vec<Vec<f64>> = (0..k).map(|j| stacked(f, j)).collect();
    let theirs: Vec<Vec<f64>> = (0..k).map(|j| stacked(reference, j)).collect();
    let mut pairs = Vec::with_capacity(k * k);
    for (i, a) in mine.iter().enumerate() {
        for (j, b) in theirs.iter().enumerate() {
            let cos: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            pairs.push((cos, i, j));
        }
    }
    pairs.sort_by(|a, b| b.0.abs().total_cmp(&a.0.abs()).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut source_of = vec![usize::MAX; k];
    let mut sign = vec![1.0; k];
    let mut used = vec![false; k];
    let mut left = k;
    for (cos, i, j) in pairs {
        if left == 0 {
            break;
        }
        if used[i] || source_of[j] != usize::MAX {
            continue;
        }
        used[i] = true;
        source_of[j] = i;
        sign[j] = if cos < 0.0 { -1.0 } else { 1.0 };
        left -= 1;
    }
    let mut p = vec![0.0; r * k];
    let mut q = vec![0.0; k * c];
    for j in 0..k {
        let (i, s) = (source_of[j], sign[j]);
        for row in 0..r {
            p[row * k + j] = s * f.p.at2(row, i);
        }
        for col in 0..c {
            q[j * c + col] = s * f.q.at2(i, col);
        }
    }
    Ok(FactorPair {
        p: Tensor::new(vec![r, k], p)?,
        q: Tensor::new(vec![k, c], q)?,
        sigma: source_of.iter().map(|&i| f.sigma[i]).collect(),
    })
}

/// `P * Q`
pub fn reconstruct(f: &FactorPair) -> Result<Tensor> {
    let (r, k) = f.p.dims2()?;
    let (k2, c) = f.q.dims2()?;
    if k != k2 {
        return Err(Error::ShapeMismatch {
            layer: "reconstruct".into(),
            expected: vec![k, c],
            actual: f.q.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; r * c];
    gemm(f.p.data(), false, f.q.data(), false, r, k, c, &mut out, false);
    Tensor::new(vec![r, c], out)
}
