//! Brute-force reference implementations and the equivalence suites run by
//! `astgcrn oracle`.
//!
//! The references use explicit index loops over plain tensors and share no
//! code with the graph operations they check.

use crate::attention::{
    attention_block, multi_head_attention, query_dilution, AttentionParams, InformerSelection, QueryMode,
    TransformerBlockParams, DEFAULT_PE_BASE,
};
use crate::autodiff::{sigmoid, Graph};
use crate::error::{Error, Result};
use crate::gradcheck::finite_diff_check;
use crate::graph_conv::{adaptive_adjacency, agc_forward, cheb_stack};
use crate::model::{l1_loss, AttentionVariant, ForwardTrace, Model, ModelConfig};
use crate::param::ParamStore;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;

pub const SUITES: [&str; 4] = ["agc", "attention", "chebyshev", "gradients"];

fn uniform(shape: &[usize], rng: &mut impl Rng) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn max_diff(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::dim("oracle comparison", a.shape(), b.shape()));
    }
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max))
}

/// `softmax(E E^T)` row by row.
pub fn naive_adjacency(e: &Tensor) -> Tensor {
    let (n, d) = (e.shape()[0], e.shape()[1]);
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        let mut logits = vec![0.0; n];
        for (j, l) in logits.iter_mut().enumerate() {
            for k in 0..d {
                *l += e.at(&[i, k]) * e.at(&[j, k]);
            }
        }
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        for j in 0..n {
            out[i * n + j] = (logits[j] - m).exp() / z;
        }
    }
    Tensor::new(&[n, n], out).expect("square")
}

fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    Tensor::from_fn(&[m, n], |i| (0..k).map(|p| a.at(&[i[0], p]) * b.at(&[p, i[1]])).sum()).expect("shape")
}

/// `[I, L, 2L T_1 - T_0, ...]` by the three-term recurrence.
pub fn naive_cheb_stack(l: &Tensor, depth: usize) -> Vec<Tensor> {
    let n = l.shape()[0];
    let mut out = vec![Tensor::eye(n).expect("n >= 1")];
    if depth > 1 {
        out.push(l.clone());
    }
    while out.len() < depth {
        let k = out.len();
        let prod = naive_matmul(l, &out[k - 1]);
        let next = Tensor::from_fn(&[n, n], |i| 2.0 * prod.at(i) - out[k - 2].at(i)).expect("shape");
        out.push(next);
    }
    out
}

/// Adaptive graph convolution that materializes each node's kernel
/// `sum_d E[n,d] W[d]` and bias before applying it. `x: B x N x C_in`.
pub fn naive_agc(x: &Tensor, stack: &[Tensor], e: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Tensor {
    let (b, n, c_in) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (d, k, c_out) = (w.shape()[0], w.shape()[1], w.shape()[3]);
    let mut out = Tensor::zeros(&[b, n, c_out]).expect("shape");
    for node in 0..n {
        let kernel = Tensor::from_fn(&[k, c_in, c_out], |i| {
            (0..d).map(|j| e.at(&[node, j]) * w.at(&[j, i[0], i[1], i[2]])).sum()
        })
        .expect("shape");
        let node_bias: Vec<f64> = (0..c_out)
            .map(|o| bias.map_or(0.0, |bt| (0..d).map(|j| e.at(&[node, j]) * bt.at(&[j, o])).sum()))
            .collect();
        for batch in 0..b {
            for o in 0..c_out {
                let mut acc = node_bias[o];
                for (kk, t) in stack.iter().enumerate() {
                    for m in 0..n {
                        for ci in 0..c_in {
                            acc += t.at(&[node, m]) * x.at(&[batch, m, ci]) * kernel.at(&[kk, ci, o]);
                        }
                    }
                }
                out.set(&[batch, node, o], acc);
            }
        }
    }
    out
}

/// One gate's factorized weight and bias.
pub struct NaiveGate<'a> {
    pub weight: &'a Tensor,
    pub bias: &'a Tensor,
}

fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    let (bs, n, ca, cb) = (a.shape()[0], a.shape()[1], a.shape()[2], b.shape()[2]);
    Tensor::from_fn(&[bs, n, ca + cb], |i| {
        if i[2] < ca {
            a.at(&[i[0], i[1], i[2]])
        } else {
            b.at(&[i[0], i[1], i[2] - ca])
        }
    })
    .expect("shape")
}

/// One recurrent step: `z, r` from `[x, h]`, candidate from `[x, r*h]`,
/// `h' = z*h + (1-z)*candidate`.
pub fn naive_gcrn_step(
    x: &Tensor,
    h: &Tensor,
    stack: &[Tensor],
    e: &Tensor,
    update: NaiveGate,
    reset: NaiveGate,
    candidate: NaiveGate,
) -> Tensor {
    let joined = concat_channels(x, h);
    let z = naive_agc(&joined, stack, e, update.weight, Some(update.bias)).map(sigmoid);
    let r = naive_agc(&joined, stack, e, reset.weight, Some(reset.bias)).map(sigmoid);
    let gated = Tensor::from_fn(h.shape(), |i| r.at(i) * h.at(i)).expect("shape");
    let c = naive_agc(&concat_channels(x, &gated), stack, e, candidate.weight, Some(candidate.bias)).map(f64::tanh);
    Tensor::from_fn(h.shape(), |i| z.at(i) * h.at(i) + (1.0 - z.at(i)) * c.at(i)).expect("shape")
}

/// Single-head scaled dot-product attention for `q: T x d`, `k: T x d`,
/// `v: T x d_v`.
pub fn naive_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Tensor {
    let (t, d, dv) = (q.shape()[0], q.shape()[1], v.shape()[1]);
    let mut out = Tensor::zeros(&[t, dv]).expect("shape");
    for i in 0..t {
        let logits: Vec<f64> = (0..t)
            .map(|j| (0..d).map(|c| q.at(&[i, c]) * k.at(&[j, c])).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        for c in 0..dv {
            let acc: f64 = (0..t).map(|j| (logits[j] - m).exp() / z * v.at(&[j, c])).sum();
            out.set(&[i, c], acc);
        }
    }
    out
}

/// Multi-head attention over the time axis of `h: B x N x T x C`, head by
/// head and slice by slice.
pub fn naive_multi_head(h: &Tensor, wq: &Tensor, wk: &Tensor, wv: &Tensor, wo: &Tensor, heads: usize) -> Tensor {
    let (b, n, t, c) = (h.shape()[0], h.shape()[1], h.shape()[2], h.shape()[3]);
    let d = wq.shape()[1] / heads;
    let dv = wv.shape()[1] / heads;
    let mut out = Tensor::zeros(&[b, n, t, c]).expect("shape");
    for bi in 0..b {
        for ni in 0..n {
            let x = Tensor::from_fn(&[t, c], |i| h.at(&[bi, ni, i[0], i[1]])).expect("shape");
            let mut merged = Tensor::zeros(&[t, heads * dv]).expect("shape");
            for head in 0..heads {
                let cols = |w: &Tensor, width: usize| {
                    Tensor::from_fn(&[c, width], |i| w.at(&[i[0], head * width + i[1]])).expect("shape")
                };
                let q = naive_matmul(&x, &cols(wq, d));
                let k = naive_matmul(&x, &cols(wk, d));
                let v = naive_matmul(&x, &cols(wv, dv));
                let a = naive_attention(&q, &k, &v);
                for ti in 0..t {
                    for j in 0..dv {
                        merged.set(&[ti, head * dv + j], a.at(&[ti, j]));
                    }
                }
            }
            let y = naive_matmul(&merged, wo);
            for ti in 0..t {
                for ci in 0..c {
                    out.set(&[bi, ni, ti, ci], y.at(&[ti, ci]));
                }
            }
        }
    }
    out
}

/// Max-minus-mean of every query's scaled logits over all keys.
pub fn naive_dilution(q: &Tensor, k: &Tensor) -> Vec<f64> {
    let (t, d) = (q.shape()[0], q.shape()[1]);
    (0..t)
        .map(|i| {
            let logits: Vec<f64> = (0..k.shape()[0])
                .map(|j| (0..d).map(|c| q.at(&[i, c]) * k.at(&[j, c])).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            m - logits.iter().sum::<f64>() / logits.len() as f64
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub suite: &'static str,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Default)]
pub struct OracleReport {
    pub checks: Vec<CheckOutcome>,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<10} {:<44} {:<6} detail", "suite", "check", "result");
        for c in &self.checks {
            let verdict = if c.passed { "PASS" } else { "FAIL" };
            let _ = writeln!(s, "{:<10} {:<44} {:<6} {}", c.suite, c.name, verdict, c.detail);
        }
        let failed = self.checks.iter().filter(|c| !c.passed).count();
        let _ = writeln!(s, "{} checks, {} failed", self.checks.len(), failed);
        s
    }

    fn push(&mut self, suite: &'static str, name: impl Into<String>, passed: bool, detail: impl Into<String>) {
        self.checks.push(CheckOutcome {
            suite,
            name: name.into(),
            passed,
            detail: detail.into(),
        });
    }

    fn push_tol(&mut self, suite: &'static str, name: &str, diff: f64, tol: f64) {
        self.push(suite, name, diff <= tol, format!("max |diff| {diff:.3e} (tol {tol:.0e})"));
    }
}

/// Runs one suite by name, or all of them for `"all"`.
pub fn run_suite(name: &str) -> Result<OracleReport> {
    let mut report = OracleReport::default();
    match name {
        "all" => {
            for s in SUITES {
                report.checks.extend(run_suite(s)?.checks);
            }
        }
        "agc" => agc_suite(&mut report)?,
        "attention" => attention_suite(&mut report)?,
        "chebyshev" => chebyshev_suite(&mut report)?,
        "gradients" => gradient_suite(&mut report)?,
        other => {
            return Err(Error::Config(format!(
                "unknown suite '{other}'; available: {}, all",
                SUITES.join(", ")
            )))
        }
    }
    Ok(report)
}

fn chebyshev_suite(report: &mut OracleReport) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut exact_k2 = true;
    let (mut third, mut recurrence) = (0.0f64, 0.0f64);
    for n in 1..=8 {
        let e = uniform(&[n, 3], &mut rng)?;
        let l = naive_adjacency(&e);
        let mut g = Graph::new();
        let lv = g.input(l.clone())?;
        let k2 = cheb_stack(&mut g, lv, 2)?;
        exact_k2 &= g.value(k2.slices[0]) == &Tensor::eye(n)? && g.value(k2.slices[1]) == &l;
        let k3 = cheb_stack(&mut g, lv, 3)?;
        let l2 = naive_matmul(&l, &l);
        let expect = Tensor::from_fn(&[n, n], |i| 2.0 * l2.at(i) - if i[0] == i[1] { 1.0 } else { 0.0 })?;
        third = third.max(max_diff(g.value(k3.slices[2]), &expect)?);
        let k5 = cheb_stack(&mut g, lv, 5)?;
        for (s, t) in k5.slices.iter().zip(naive_cheb_stack(&l, 5)) {
            recurrence = recurrence.max(max_diff(g.value(*s), &t)?);
        }
    }
    report.push("chebyshev", "K=2 stack equals [I, L]", exact_k2, "bitwise");
    report.push_tol("chebyshev", "K=3 third slice equals 2L^2 - I", third, 1e-12);
    report.push_tol("chebyshev", "K=5 matches explicit recurrence", recurrence, 1e-12);
    Ok(())
}

fn agc_suite(report: &mut OracleReport) -> Result<()> {
    let mut worst = 0.0f64;
    let mut adjacency = 0.0f64;
    for case in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + case);
        let n = rng.gen_range(1..=7);
        let b = rng.gen_range(1..=3);
        let (c_in, c_out) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
        let (k, d) = (rng.gen_range(1..=4), rng.gen_range(1..=5));
        let with_bias = rng.gen_bool(0.7);
        let x = uniform(&[b, n, c_in], &mut rng)?;
        let e = uniform(&[n, d], &mut rng)?;
        let w = uniform(&[d, k, c_in, c_out], &mut rng)?;
        let bias = uniform(&[d, c_out], &mut rng)?;

        let mut g = Graph::new();
        let (xv, ev, wv) = (g.input(x.clone())?, g.input(e.clone())?, g.input(w.clone())?);
        let bv = if with_bias { Some(g.input(bias.clone())?) } else { None };
        let a = adaptive_adjacency(&mut g, ev)?;
        let stack = cheb_stack(&mut g, a, k)?;
        let out = agc_forward(&mut g, xv, &stack, ev, wv, bv)?;

        let l = naive_adjacency(&e);
        adjacency = adjacency.max(max_diff(g.value(a), &l)?);
        let slices = naive_cheb_stack(&l, k);
        let expect = naive_agc(&x, &slices, &e, &w, with_bias.then_some(&bias));
        worst = worst.max(max_diff(g.value(out), &expect)?);
    }
    report.push_tol("agc", "adjacency matches row softmax (50 shapes)", adjacency, 1e-12);
    report.push_tol("agc", "agc_forward matches per-node loop (50 shapes)", worst, 1e-10);
    Ok(())
}

fn attention_suite(report: &mut OracleReport) -> Result<()> {
    let mut degenerate = 0.0f64;
    let mut mhsa = 0.0f64;
    let mut dilution = 0.0f64;
    let mut time_mean_exact = true;
    for case in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + case);
        let heads = rng.gen_range(1..=2);
        let c = heads * rng.gen_range(1..=3);
        let (b, n, t) = (rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(1..=6));
        let h = uniform(&[b, n, t, c], &mut rng)?;
        let mut store = ParamStore::new();
        let block = TransformerBlockParams::new(&mut store, "block", c, heads, rng.gen_range(1..=6), &mut rng)?;

        let mut g = Graph::new();
        let hv = g.input(h.clone())?;
        let bound = block.bind(&mut g, &store)?;
        let dense = attention_block(&mut g, hv, &bound, &QueryMode::Dense, DEFAULT_PE_BASE)?.out;
        let full = QueryMode::ProbSparse {
            selection: InformerSelection::full(t, case),
            frozen: None,
        };
        let sparse = attention_block(&mut g, hv, &bound, &full, DEFAULT_PE_BASE)?.out;
        degenerate = degenerate.max(max_diff(g.value(dense), g.value(sparse))?);

        let att = bound.attention;
        let out = multi_head_attention(&mut g, hv, &att, &QueryMode::Dense)?.out;
        let p = block.attention;
        let expect = naive_multi_head(&h, store.value(p.query), store.value(p.key), store.value(p.value), store.value(p.output), heads);
        mhsa = mhsa.max(max_diff(g.value(out), &expect)?);

        let q = uniform(&[t, 3], &mut rng)?;
        let k = uniform(&[t, 3], &mut rng)?;
        let all: Vec<usize> = (0..t).collect();
        let got = query_dilution(&q, &k, &all)?;
        for (a, e) in got.iter().zip(naive_dilution(&q, &k)) {
            dilution = dilution.max((a - e).abs());
        }

        time_mean_exact &= zero_query_key_gives_time_mean(&mut rng)?;
    }
    report.push_tol("attention", "informer u=T,U=T equals transformer (20 cases)", degenerate, 1e-10);
    report.push("attention", "zero W_q, W_k gives time-mean of V", time_mean_exact, "bitwise");
    report.push_tol("attention", "multi-head matches per-head loop", mhsa, 1e-10);
    report.push_tol("attention", "dilution matches full enumeration", dilution, 1e-12);
    Ok(())
}

/// With zero query and key projections every weight is `1/T`, so each time
/// step receives the time-mean of V, then the output projection. Inputs and
/// weights are small integers and `T` is a power of two, so every
/// intermediate is exact and the comparison can be bitwise whatever the
/// summation order.
fn zero_query_key_gives_time_mean(rng: &mut impl Rng) -> Result<bool> {
    let heads = rng.gen_range(1..=2);
    let c = heads * rng.gen_range(1..=3);
    let (b, n, t) = (rng.gen_range(1..=2), rng.gen_range(1..=3), 1usize << rng.gen_range(0..=3));
    let mut ints = |shape: &[usize], r: i32| -> Result<Tensor> {
        let len = shape.iter().product();
        Tensor::new(shape, (0..len).map(|_| f64::from(rng.gen_range(-r..=r))).collect())
    };
    let h = ints(&[b, n, t, c], 3)?;
    let wv = ints(&[c, c], 2)?;
    let wo = ints(&[c, c], 2)?;
    let mut store = ParamStore::new();
    let p = AttentionParams::new(&mut store, "mhsa", c, heads, &mut ChaCha8Rng::seed_from_u64(0))?;
    *store.value_mut(p.query) = Tensor::zeros(&[c, c])?;
    *store.value_mut(p.key) = Tensor::zeros(&[c, c])?;
    *store.value_mut(p.value) = wv.clone();
    *store.value_mut(p.output) = wo.clone();
    let mut g = Graph::new();
    let hv = g.input(h.clone())?;
    let bound = p.bind(&mut g, &store)?;
    let out = multi_head_attention(&mut g, hv, &bound, &QueryMode::Dense)?.out;

    let mut expect = Tensor::zeros(&[b, n, t, c])?;
    for bi in 0..b {
        for ni in 0..n {
            let mut mean_v = vec![0.0; c];
            for ti in 0..t {
                for (j, m) in mean_v.iter_mut().enumerate() {
                    let v: f64 = (0..c).map(|ci| h.at(&[bi, ni, ti, ci]) * wv.at(&[ci, j])).sum();
                    *m += v / t as f64;
                }
            }
            for ti in 0..t {
                for o in 0..c {
                    let y: f64 = (0..c).map(|j| mean_v[j] * wo.at(&[j, o])).sum();
                    expect.set(&[bi, ni, ti, o], y);
                }
            }
        }
    }
    Ok(g.value(out) == &expect)
}

/// Toy configuration for end-to-end gradient checks.
pub fn toy_config(attention: AttentionVariant, seed: u64) -> ModelConfig {
    ModelConfig {
        nodes: 4,
        input_channels: 1,
        hidden: 8,
        input_steps: 3,
        horizon: 3,
        cheb_depth: 2,
        embed_dim: 3,
        layers: 2,
        attention,
        heads: 2,
        ffn_dim: 8,
        seed,
        ..ModelConfig::default()
    }
}

/// Finite-difference check of every parameter of `model` under the L1 loss.
/// The ProbSparse selection is frozen at its value for the unperturbed
/// parameters.
pub fn model_gradient_check(
    model: &mut Model,
    x: &Tensor,
    target: &Tensor,
    step: f64,
    rtol: f64,
) -> Result<crate::gradcheck::GradCheckReport> {
    let mut trace = ForwardTrace::default();
    model.predict_traced(x, &mut trace)?;
    trace.freeze_selection = true;
    let mut store = std::mem::take(&mut model.store);
    let result = finite_diff_check(&mut store, step, rtol, |g, s| {
        let xv = g.constant(x.clone())?;
        let mut t = trace.clone();
        let pred = model.forward_with(s, g, xv, &mut t)?;
        let tv = g.constant(target.clone())?;
        l1_loss(g, pred, tv)
    });
    model.store = store;
    result
}

/// Inputs and targets for [`model_gradient_check`]. Each target sits
/// between 0.1 and 0.5 away from the model's unperturbed prediction, on a
/// random side, so the L1 loss stays small and far from its kink.
pub fn toy_batch(model: &Model, batch: usize, seed: u64) -> Result<(Tensor, Tensor)> {
    let c = &model.config;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = uniform(&[batch, c.input_steps, c.nodes, c.input_channels], &mut rng)?;
    let pred = model.predict(&x)?;
    let shifted = pred
        .data()
        .iter()
        .map(|p| {
            let offset = rng.gen_range(0.1..0.5);
            if rng.gen_bool(0.5) {
                p + offset
            } else {
                p - offset
            }
        })
        .collect();
    Ok((x, Tensor::new(pred.shape(), shifted)?))
}

fn gradient_suite(report: &mut OracleReport) -> Result<()> {
    for variant in AttentionVariant::ALL {
        let config = toy_config(variant, 3);
        let mut model = Model::new(config, None)?;
        let (x, y) = toy_batch(&model, 2, 5)?;
        let r = model_gradient_check(&mut model, &x, &y, 1e-5, 1e-4)?;
        let detail = match r.failing().next() {
            Some(p) => format!("{} params, worst {} at {:.3e}", r.params.len(), p.name, p.max_rel_error),
            None => format!("{} params, max rel err {:.3e}", r.params.len(), r.max_rel_error()),
        };
        report.push("gradients", format!("end-to-end finite differences ({variant})"), r.passed(), detail);
    }
    Ok(())
}
