#![allow(dead_code)]

use astgcrn_core::Tensor;
use rand::Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn random(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn to_mat(t: &Tensor) -> Mat {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    (0..r).map(|i| t.data()[i * c..(i + 1) * c].to_vec()).collect()
}

pub fn from_mat(m: &Mat) -> Tensor {
    let (r, c) = (m.len(), m[0].len());
    Tensor::new(&[r, c], m.iter().flatten().copied().collect()).unwrap()
}

pub fn mat_mul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            for p in 0..k {
                out[i][j] += a[i][p] * b[p][j];
            }
        }
    }
    out
}

pub fn softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

pub fn ref_adjacency(e: &Mat) -> Mat {
    let n = e.len();
    (0..n)
        .map(|i| {
            let logits: Vec<f64> = (0..n).map(|j| e[i].iter().zip(&e[j]).map(|(a, b)| a * b).sum()).collect();
            softmax_row(&logits)
        })
        .collect()
}

pub fn ref_cheb(l: &Mat, depth: usize) -> Vec<Mat> {
    let n = l.len();
    let eye: Mat = (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    let mut out = vec![eye];
    if depth > 1 {
        out.push(l.clone());
    }
    for k in 2..depth {
        let p = mat_mul(l, &out[k - 1]);
        let next = (0..n).map(|i| (0..n).map(|j| 2.0 * p[i][j] - out[k - 2][i][j]).collect()).collect();
        out.push(next);
    }
    out
}

/// Graph convolution with each node's kernel `Psi_n = sum_d E[n,d] W[d]`
/// written out. `x[b][n][c]`, `w[d][k][ci][co]`, `bias[d][co]`.
pub fn ref_agc(
    x: &[Mat],
    stack: &[Mat],
    e: &Mat,
    w: &Tensor,
    bias: Option<&Tensor>,
) -> Vec<Mat> {
    let (d, k, c_in, c_out) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let n = e.len();
    x.iter()
        .map(|xb| {
            (0..n)
                .map(|node| {
                    let mut psi = vec![vec![vec![0.0; c_out]; c_in]; k];
                    for (kk, psi_k) in psi.iter_mut().enumerate() {
                        for (ci, row) in psi_k.iter_mut().enumerate() {
                            for (co, v) in row.iter_mut().enumerate() {
                                *v = (0..d).map(|j| e[node][j] * w.at(&[j, kk, ci, co])).sum();
                            }
                        }
                    }
                    (0..c_out)
                        .map(|co| {
                            let mut acc: f64 = match bias {
                                Some(b) => (0..d).map(|j| e[node][j] * b.at(&[j, co])).sum(),
                                None => 0.0,
                            };
                            for kk in 0..k {
                                for m in 0..n {
                                    for ci in 0..c_in {
                                        acc += stack[kk][node][m] * xb[m][ci] * psi[kk][ci][co];
                                    }
                                }
                            }
                            acc
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// `B x N x C` tensor as nested vectors.
pub fn to_batches(t: &Tensor) -> Vec<Mat> {
    let (b, n, c) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    (0..b)
        .map(|bi| (0..n).map(|ni| (0..c).map(|ci| t.at(&[bi, ni, ci])).collect()).collect())
        .collect()
}

pub fn from_batches(v: &[Mat]) -> Tensor {
    let (b, n, c) = (v.len(), v[0].len(), v[0][0].len());
    Tensor::new(&[b, n, c], v.iter().flatten().flatten().copied().collect()).unwrap()
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn join(a: &[Mat], b: &[Mat]) -> Vec<Mat> {
    a.iter()
        .zip(b)
        .map(|(ab, bb)| ab.iter().zip(bb).map(|(r1, r2)| r1.iter().chain(r2).copied().collect()).collect())
        .collect()
}

fn map2(a: &[Mat], b: &[Mat], f: impl Fn(f64, f64) -> f64) -> Vec<Mat> {
    a.iter()
        .zip(b)
        .map(|(ab, bb)| ab.iter().zip(bb).map(|(r1, r2)| r1.iter().zip(r2).map(|(x, y)| f(*x, *y)).collect()).collect())
        .collect()
}

/// Gate weights and biases as stored: `(W, b)` for update, reset, candidate.
pub struct RefCell<'a> {
    pub update: (&'a Tensor, &'a Tensor),
    pub reset: (&'a Tensor, &'a Tensor),
    pub candidate: (&'a Tensor, &'a Tensor),
}

pub fn ref_gcrn_step(x: &[Mat], h: &[Mat], stack: &[Mat], e: &Mat, cell: &RefCell) -> Vec<Mat> {
    let xh = join(x, h);
    let pre_z = ref_agc(&xh, stack, e, cell.update.0, Some(cell.update.1));
    let pre_r = ref_agc(&xh, stack, e, cell.reset.0, Some(cell.reset.1));
    let rh = map2(&pre_r, h, |r, hv| sig(r) * hv);
    let pre_c = ref_agc(&join(x, &rh), stack, e, cell.candidate.0, Some(cell.candidate.1));
    // h' = z h + (1 - z) tanh(c)
    let mut out = h.to_vec();
    for b in 0..h.len() {
        for n in 0..h[b].len() {
            for c in 0..h[b][n].len() {
                let z = sig(pre_z[b][n][c]);
                out[b][n][c] = z * h[b][n][c] + (1.0 - z) * pre_c[b][n][c].tanh();
            }
        }
    }
    out
}

/// Reference multi-head attention along time for one sequence `x: T x C`.
pub fn ref_mha_sequence(x: &Mat, wq: &Mat, wk: &Mat, wv: &Mat, wo: &Mat, heads: usize) -> Mat {
    let q = mat_mul(x, wq);
    let k = mat_mul(x, wk);
    let v = mat_mul(x, wv);
    let t = x.len();
    let d = wq[0].len() / heads;
    let dv = wv[0].len() / heads;
    let mut merged = vec![vec![0.0; heads * dv]; t];
    for h in 0..heads {
        for i in 0..t {
            let logits: Vec<f64> = (0..t)
                .map(|j| (0..d).map(|c| q[i][h * d + c] * k[j][h * d + c]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let w = softmax_row(&logits);
            for c in 0..dv {
                merged[i][h * dv + c] = (0..t).map(|j| w[j] * v[j][h * dv + c]).sum();
            }
        }
    }
    mat_mul(&merged, wo)
}

/// (MAE, RMSE, MAPE%) with MAPE over entries with |truth| >= 1e-3.
pub fn ref_metrics(pred: &[f64], truth: &[f64]) -> (f64, f64, f64) {
    let n = pred.len() as f64;
    let mae = pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / n;
    let rmse = (pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n).sqrt();
    let kept: Vec<f64> = pred
        .iter()
        .zip(truth)
        .filter(|(_, t)| t.abs() >= 1e-3)
        .map(|(p, t)| ((p - t) / t).abs())
        .collect();
    let mape = if kept.is_empty() { f64::NAN } else { 100.0 * kept.iter().sum::<f64>() / kept.len() as f64 };
    (mae, rmse, mape)
}
