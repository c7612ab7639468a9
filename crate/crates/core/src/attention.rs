//! Global temporal attention over encoder outputs.
//!
//! Every `(batch, node)` slice of a `B x N x T x C` input is an independent
//! length-`T` sequence; no attention crosses nodes.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const DEFAULT_PE_BASE: f64 = 1000.0;

/// `softmax(Q K^T / sqrt(d)) V` over the last two axes, returning the output
/// and the attention weights.
pub fn scaled_dot_attention_weights(g: &mut Graph, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let (qs, ks, vs) = (g.shape(q).to_vec(), g.shape(k).to_vec(), g.shape(v).to_vec());
    let r = qs.len();
    if r < 2 || ks.len() != r || vs.len() != r || qs[r - 1] != ks[r - 1] || ks[r - 2] != vs[r - 2] || qs[..r - 2] != ks[..r - 2] {
        return Err(Error::dim("scaled_dot_attention", &qs, &ks));
    }
    let d = qs[r - 1] as f64;
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scaled = g.scale(scores, 1.0 / d.sqrt())?;
    let weights = g.softmax(scaled)?;
    let out = g.matmul(weights, v)?;
    Ok((out, weights))
}

pub fn scaled_dot_attention(g: &mut Graph, q: Var, k: Var, v: Var) -> Result<Var> {
    scaled_dot_attention_weights(g, q, k, v).map(|(o, _)| o)
}

/// Projection weights for multi-head attention. Heads are packed along the
/// projection axis: `W_q, W_k: C x (h*d)`, `W_v: C x (h*d_v)`,
/// `W_o: (h*d_v) x C`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    pub output: ParamId,
    pub heads: usize,
    pub head_dim: usize,
    pub value_dim: usize,
}

impl AttentionParams {
    /// `d = d_v = C / heads`.
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        if heads == 0 || !channels.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "{channels} channels cannot be split into {heads} heads"
            )));
        }
        let d = channels / heads;
        let b_in = 1.0 / (channels as f64).sqrt();
        let query = store.register_uniform(format!("{name}.query"), &[channels, heads * d], b_in, rng)?;
        let key = store.register_uniform(format!("{name}.key"), &[channels, heads * d], b_in, rng)?;
        let value = store.register_uniform(format!("{name}.value"), &[channels, heads * d], b_in, rng)?;
        let b_out = 1.0 / ((heads * d) as f64).sqrt();
        let output = store.register_uniform(format!("{name}.output"), &[heads * d, channels], b_out, rng)?;
        Ok(AttentionParams {
            query,
            key,
            value,
            output,
            heads,
            head_dim: d,
            value_dim: d,
        })
    }

    pub fn bind(&self, g: &mut Graph, store: &ParamStore) -> Result<BoundAttention> {
        Ok(BoundAttention {
            query: g.param(store, self.query)?,
            key: g.param(store, self.key)?,
            value: g.param(store, self.value)?,
            output: g.param(store, self.output)?,
            heads: self.heads,
            head_dim: self.head_dim,
            value_dim: self.value_dim,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundAttention {
    pub query: Var,
    pub key: Var,
    pub value: Var,
    pub output: Var,
    pub heads: usize,
    pub head_dim: usize,
    pub value_dim: usize,
}

/// ProbSparse query selection settings for sequences of one length.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InformerSelection {
    /// Queries that receive full attention.
    pub top_u: usize,
    /// Keys sampled per `(slice, head)` when scoring queries.
    pub sample_count: usize,
    pub seed: u64,
}

impl InformerSelection {
    /// `u = clamp(ceil(c ln T), 1, T)` and `U = clamp(ceil(T ln T), 1, T)`.
    pub fn for_length(len: usize, factor: f64, seed: u64) -> Self {
        let ln = (len as f64).ln();
        let clamp = |v: f64| (v.ceil().max(1.0) as usize).min(len.max(1));
        InformerSelection {
            top_u: clamp(factor * ln),
            sample_count: clamp(len as f64 * ln),
            seed,
        }
    }

    /// Full selection; reduces ProbSparse attention to dense attention.
    pub fn full(len: usize, seed: u64) -> Self {
        InformerSelection {
            top_u: len,
            sample_count: len,
            seed,
        }
    }

    pub fn validate(&self, len: usize) -> Result<()> {
        if self.top_u < 1 || self.top_u > len {
            return Err(Error::Config(format!("top-u must lie in 1..={len}, got {}", self.top_u)));
        }
        if self.sample_count < 1 || self.sample_count > len {
            return Err(Error::Config(format!(
                "key sample count must lie in 1..={len}, got {}",
                self.sample_count
            )));
        }
        Ok(())
    }

    /// Key indices scored for one `(slice, head)` sequence.
    pub fn sampled_keys(&self, len: usize, stream: u64) -> Vec<usize> {
        if self.sample_count >= len {
            return (0..len).collect();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        let mut keys = rand::seq::index::sample(&mut rng, len, self.sample_count).into_vec();
        keys.sort_unstable();
        keys
    }
}

/// Query sparsity measure: for each query, the max minus the mean of its
/// scaled logits over the sampled keys. Unsampled keys are excluded from both.
pub fn query_dilution(q: &Tensor, k: &Tensor, keys: &[usize]) -> Result<Vec<f64>> {
    let (qs, ks) = (q.shape(), k.shape());
    if qs.len() != 2 || ks.len() != 2 || qs[1] != ks[1] {
        return Err(Error::dim("query_dilution", qs, ks));
    }
    if keys.is_empty() {
        return Err(Error::Config("query dilution needs at least one sampled key".into()));
    }
    if keys.iter().any(|&j| j >= ks[0]) {
        return Err(Error::Config(format!("sampled key out of range for {} keys", ks[0])));
    }
    Ok(dilution_rows(q.data(), k.data(), qs[0], qs[1], keys))
}

fn dilution_rows(q: &[f64], k: &[f64], rows: usize, d: usize, keys: &[usize]) -> Vec<f64> {
    let scale = 1.0 / (d as f64).sqrt();
    let mut logits = vec![0.0; keys.len()];
    (0..rows)
        .map(|i| {
            let qi = &q[i * d..(i + 1) * d];
            for (slot, &j) in logits.iter_mut().zip(keys) {
                let kj = &k[j * d..(j + 1) * d];
                *slot = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            // mean of (max - s) equals max - mean(s) and is exactly zero on ties
            logits.iter().map(|s| max - s).sum::<f64>() / keys.len() as f64
        })
        .collect()
}

/// Indices of the `u` largest scores, ties to the lower index.
pub fn top_u_indices(scores: &[f64], u: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(u);
    order
}

/// How queries are chosen for full attention.
#[derive(Clone, Debug)]
pub enum QueryMode {
    Dense,
    ProbSparse {
        selection: InformerSelection,
        /// Reuse a previously computed selection mask instead of scoring.
        frozen: Option<Vec<bool>>,
    },
}

#[derive(Clone, Debug)]
pub struct AttentionOutput {
    pub out: Var,
    /// `(B*N*h) x T x T` attention weights of the dense computation.
    pub weights: Var,
    /// Per-row selection mask in `(B*N*h) x T` order for ProbSparse mode.
    pub keep: Option<Vec<bool>>,
}

fn split_heads(g: &mut Graph, x: Var, slices: usize, len: usize, heads: usize, dim: usize) -> Result<Var> {
    let r = g.reshape(x, &[slices, len, heads, dim])?;
    let p = g.permute(r, &[0, 2, 1, 3])?;
    g.reshape(p, &[slices * heads, len, dim])
}

/// Multi-head self-attention over the time axis of `h: B x N x T x C`.
pub fn multi_head_attention(g: &mut Graph, h: Var, p: &BoundAttention, mode: &QueryMode) -> Result<AttentionOutput> {
    let hs = g.shape(h).to_vec();
    let (qs, os) = (g.shape(p.query).to_vec(), g.shape(p.output).to_vec());
    if hs.len() != 4 || qs[0] != hs[3] || os[1] != hs[3] {
        return Err(Error::dim("multi_head_attention", &hs, &qs));
    }
    if qs[1] != p.heads * p.head_dim || os[0] != p.heads * p.value_dim {
        return Err(Error::Config(format!(
            "projection widths {qs:?}/{os:?} do not match {} heads of {}/{}",
            p.heads, p.head_dim, p.value_dim
        )));
    }
    let (b, n, t, c) = (hs[0], hs[1], hs[2], hs[3]);
    let slices = b * n;
    let q = g.matmul(h, p.query)?;
    let k = g.matmul(h, p.key)?;
    let v = g.matmul(h, p.value)?;
    let q = split_heads(g, q, slices, t, p.heads, p.head_dim)?;
    let k = split_heads(g, k, slices, t, p.heads, p.head_dim)?;
    let v = split_heads(g, v, slices, t, p.heads, p.value_dim)?;

    let (dense, weights) = scaled_dot_attention_weights(g, q, k, v)?;
    let (context, keep) = match mode {
        QueryMode::Dense => (dense, None),
        QueryMode::ProbSparse { selection, frozen } => {
            selection.validate(t)?;
            let rows = slices * p.heads;
            let keep = match frozen {
                Some(mask) if mask.len() == rows * t => mask.clone(),
                Some(mask) => {
                    return Err(Error::Contract(format!(
                        "frozen selection has {} rows, expected {}",
                        mask.len(),
                        rows * t
                    )))
                }
                None => select_queries(g.value(q), g.value(k), rows, t, p.head_dim, selection),
            };
            if keep.iter().all(|&k| k) {
                (dense, Some(keep))
            } else {
                let lazy = g.mean_axis(v, 1)?;
                (g.select_rows(dense, lazy, keep.clone())?, Some(keep))
            }
        }
    };

    let merged = g.reshape(context, &[slices, p.heads, t, p.value_dim])?;
    let merged = g.permute(merged, &[0, 2, 1, 3])?;
    let merged = g.reshape(merged, &[b, n, t, p.heads * p.value_dim])?;
    let out = g.matmul(merged, p.output)?;
    debug_assert_eq!(g.shape(out), &[b, n, t, c]);
    Ok(AttentionOutput { out, weights, keep })
}

fn select_queries(q: &Tensor, k: &Tensor, rows: usize, t: usize, d: usize, sel: &InformerSelection) -> Vec<bool> {
    let mut keep = vec![false; rows * t];
    for s in 0..rows {
        let block = s * t * d..(s + 1) * t * d;
        let keys = sel.sampled_keys(t, s as u64);
        let scores = dilution_rows(&q.data()[block.clone()], &k.data()[block], t, d, &keys);
        for i in top_u_indices(&scores, sel.top_u) {
            keep[s * t + i] = true;
        }
    }
    keep
}

pub fn multi_head_self_attention(g: &mut Graph, h: Var, p: &BoundAttention) -> Result<Var> {
    multi_head_attention(g, h, p, &QueryMode::Dense).map(|o| o.out)
}

/// Top-u queries get full attention; the remaining rows take the mean of V.
pub fn prob_sparse_attention(g: &mut Graph, h: Var, p: &BoundAttention, selection: &InformerSelection) -> Result<Var> {
    let mode = QueryMode::ProbSparse {
        selection: *selection,
        frozen: None,
    };
    multi_head_attention(g, h, p, &mode).map(|o| o.out)
}

/// Fixed sinusoidal encoding, `T x C`:
/// `PE[t, 2c] = sin(t / base^(2c/C))`, `PE[t, 2c+1] = cos(t / base^(2c/C))`.
pub fn positional_encoding(len: usize, channels: usize, base: f64) -> Result<Tensor> {
    if channels == 0 || len == 0 {
        return Err(Error::Config("positional encoding needs T >= 1 and C >= 1".into()));
    }
    Tensor::from_fn(&[len, channels], |i| {
        let (t, j) = (i[0] as f64, i[1]);
        let pair = (j / 2) as f64;
        let angle = t / base.powf(2.0 * pair / channels as f64);
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Attention plus a two-layer feed-forward network, each wrapped in a
/// residual connection and layer normalization.
#[derive(Clone, Copy, Debug)]
pub struct TransformerBlockParams {
    pub attention: AttentionParams,
    pub ffn1: ParamId,
    pub ffn1_bias: ParamId,
    pub ffn2: ParamId,
    pub ffn2_bias: ParamId,
    pub norm1_gain: ParamId,
    pub norm1_bias: ParamId,
    pub norm2_gain: ParamId,
    pub norm2_bias: ParamId,
}

impl TransformerBlockParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        heads: usize,
        ffn_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if ffn_dim == 0 {
            return Err(Error::Config("feed-forward width must be >= 1".into()));
        }
        let attention = AttentionParams::new(store, &format!("{name}.attention"), channels, heads, rng)?;
        let b1 = 1.0 / (channels as f64).sqrt();
        let b2 = 1.0 / (ffn_dim as f64).sqrt();
        Ok(TransformerBlockParams {
            attention,
            ffn1: store.register_uniform(format!("{name}.ffn1.weight"), &[channels, ffn_dim], b1, rng)?,
            ffn1_bias: store.register_uniform(format!("{name}.ffn1.bias"), &[ffn_dim], b1, rng)?,
            ffn2: store.register_uniform(format!("{name}.ffn2.weight"), &[ffn_dim, channels], b2, rng)?,
            ffn2_bias: store.register_uniform(format!("{name}.ffn2.bias"), &[channels], b2, rng)?,
            norm1_gain: store.register(format!("{name}.norm1.gain"), Tensor::ones(&[channels])?)?,
            norm1_bias: store.register(format!("{name}.norm1.bias"), Tensor::zeros(&[channels])?)?,
            norm2_gain: store.register(format!("{name}.norm2.gain"), Tensor::ones(&[channels])?)?,
            norm2_bias: store.register(format!("{name}.norm2.bias"), Tensor::zeros(&[channels])?)?,
        })
    }

    pub fn bind(&self, g: &mut Graph, store: &ParamStore) -> Result<BoundTransformer> {
        Ok(BoundTransformer {
            attention: self.attention.bind(g, store)?,
            ffn1: g.param(store, self.ffn1)?,
            ffn1_bias: g.param(store, self.ffn1_bias)?,
            ffn2: g.param(store, self.ffn2)?,
            ffn2_bias: g.param(store, self.ffn2_bias)?,
            norm1_gain: g.param(store, self.norm1_gain)?,
            norm1_bias: g.param(store, self.norm1_bias)?,
            norm2_gain: g.param(store, self.norm2_gain)?,
            norm2_bias: g.param(store, self.norm2_bias)?,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundTransformer {
    pub attention: BoundAttention,
    pub ffn1: Var,
    pub ffn1_bias: Var,
    pub ffn2: Var,
    pub ffn2_bias: Var,
    pub norm1_gain: Var,
    pub norm1_bias: Var,
    pub norm2_gain: Var,
    pub norm2_bias: Var,
}

/// Result of a block forward pass; `keep` is the ProbSparse mask, if any.
#[derive(Clone, Debug)]
pub struct BlockOutput {
    pub out: Var,
    pub keep: Option<Vec<bool>>,
}

pub fn attention_block(g: &mut Graph, h: Var, p: &BoundTransformer, mode: &QueryMode, pe_base: f64) -> Result<BlockOutput> {
    let hs = g.shape(h).to_vec();
    if hs.len() != 4 {
        return Err(Error::dim("transformer_block", &hs, &[0, 0, 0, 0]));
    }
    let pe = g.constant(positional_encoding(hs[2], hs[3], pe_base)?)?;
    let with_pos = g.add_trailing(h, pe)?;
    let attn = multi_head_attention(g, with_pos, &p.attention, mode)?;
    let res1 = g.add(with_pos, attn.out)?;
    let x = g.layer_norm(res1, p.norm1_gain, p.norm1_bias, LAYER_NORM_EPS)?;
    let f = g.matmul(x, p.ffn1)?;
    let f = g.add_trailing(f, p.ffn1_bias)?;
    let f = g.relu(f)?;
    let f = g.matmul(f, p.ffn2)?;
    let f = g.add_trailing(f, p.ffn2_bias)?;
    let res2 = g.add(x, f)?;
    let out = g.layer_norm(res2, p.norm2_gain, p.norm2_bias, LAYER_NORM_EPS)?;
    Ok(BlockOutput { out, keep: attn.keep })
}

pub fn transformer_block(g: &mut Graph, h: Var, p: &BoundTransformer) -> Result<Var> {
    attention_block(g, h, p, &QueryMode::Dense, DEFAULT_PE_BASE).map(|o| o.out)
}

/// Transformer block with ProbSparse attention in place of dense attention.
pub fn informer_block(g: &mut Graph, h: Var, p: &BoundTransformer, selection: &InformerSelection) -> Result<Var> {
    let mode = QueryMode::ProbSparse {
        selection: *selection,
        frozen: None,
    };
    attention_block(g, h, p, &mode, DEFAULT_PE_BASE).map(|o| o.out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn zero_queries_average_values() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::zeros(&[3, 2]).unwrap()).unwrap();
        let k = g.constant(t(&[3, 2], &[1., 2., -1., 0.5, 3., 3.])).unwrap();
        let v = g.constant(t(&[3, 2], &[1., 10., 2., 20., 6., 60.])).unwrap();
        let out = scaled_dot_attention(&mut g, q, k, v).unwrap();
        for row in g.value(out).data().chunks(2) {
            assert!((row[0] - 3.0).abs() < 1e-12 && (row[1] - 30.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_step_returns_value_row() {
        let mut g = Graph::new();
        let q = g.constant(t(&[1, 2], &[4., -7.])).unwrap();
        let k = g.constant(t(&[1, 2], &[0.3, 0.9])).unwrap();
        let v = g.constant(t(&[1, 3], &[5., 6., 7.])).unwrap();
        let out = scaled_dot_attention(&mut g, q, k, v).unwrap();
        assert_eq!(g.value(out).data(), &[5., 6., 7.]);
    }

    #[test]
    fn two_by_two_hand_case() {
        // Q = [[1,0],[0,2]], K = [[1,1],[0,1]], V = [[1,2],[3,4]], d = 2
        let mut g = Graph::new();
        let q = g.constant(t(&[2, 2], &[1., 0., 0., 2.])).unwrap();
        let k = g.constant(t(&[2, 2], &[1., 1., 0., 1.])).unwrap();
        let v = g.constant(t(&[2, 2], &[1., 2., 3., 4.])).unwrap();
        let out = scaled_dot_attention(&mut g, q, k, v).unwrap();
        let s = 2f64.sqrt();
        // row 0 logits [1/s, 0]; row 1 logits [2/s, 2/s]
        let w0 = (1.0 / s).exp() / ((1.0 / s).exp() + 1.0);
        let want = [w0 * 1. + (1. - w0) * 3., w0 * 2. + (1. - w0) * 4., 2., 3.];
        for (a, b) in g.value(out).data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn mismatched_key_width_rejected() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::zeros(&[2, 3]).unwrap()).unwrap();
        let k = g.constant(Tensor::zeros(&[2, 2]).unwrap()).unwrap();
        let v = g.constant(Tensor::zeros(&[2, 2]).unwrap()).unwrap();
        assert!(matches!(scaled_dot_attention(&mut g, q, k, v), Err(Error::Dimension { .. })));
    }

    #[test]
    fn positional_encoding_values() {
        let pe = positional_encoding(4, 6, DEFAULT_PE_BASE).unwrap();
        for c in 0..6 {
            assert_eq!(pe.at(&[0, c]), if c % 2 == 0 { 0.0 } else { 1.0 });
        }
        assert!((pe.at(&[1, 0]) - 0.841471).abs() < 1e-6);
        // pair 1 uses 1000^(2/6) = 10
        assert!((pe.at(&[3, 2]) - (0.3f64).sin()).abs() < 1e-12);
        assert!((pe.at(&[3, 3]) - (0.3f64).cos()).abs() < 1e-12);
        assert!(pe.data().iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn informer_defaults() {
        let s = InformerSelection::for_length(12, 1.0, 0);
        assert_eq!(s.top_u, 3);
        assert_eq!(s.sample_count, 12);
        let one = InformerSelection::for_length(1, 1.0, 0);
        assert_eq!((one.top_u, one.sample_count), (1, 1));
        let bad = InformerSelection {
            top_u: 0,
            sample_count: 3,
            seed: 0,
        };
        assert!(matches!(bad.validate(3), Err(Error::Config(_))));
    }

    #[test]
    fn dilution_degenerate_cases() {
        let q = t(&[3, 2], &[0.3, -1.2, 2.0, 0.1, -0.5, 0.5]);
        let k = t(&[3, 2], &[0.7, 0.2, 0.7, 0.2, 0.7, 0.2]);
        let m = query_dilution(&q, &k, &[0, 1, 2]).unwrap();
        assert!(m.iter().all(|&v| v == 0.0));
        let one = query_dilution(&t(&[1, 2], &[3., 4.]), &t(&[1, 2], &[1., -1.]), &[0]).unwrap();
        assert_eq!(one, vec![0.0]);
        assert!(matches!(query_dilution(&q, &k, &[]), Err(Error::Config(_))));
    }

    #[test]
    fn top_u_breaks_ties_low_index_first() {
        assert_eq!(top_u_indices(&[0.0, 0.0, 0.0, 0.0], 2), vec![0, 1]);
        assert_eq!(top_u_indices(&[0.1, 0.5, 0.5, 0.9], 3), vec![3, 1, 2]);
    }

    #[test]
    fn sampled_keys_are_distinct_and_seeded() {
        let s = InformerSelection {
            top_u: 2,
            sample_count: 5,
            seed: 11,
        };
        let a = s.sampled_keys(20, 3);
        assert_eq!(a.len(), 5);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(a, s.sampled_keys(20, 3));
        // sample count at or above the length keeps every key
        assert_eq!(s.sampled_keys(4, 0), vec![0, 1, 2, 3]);
    }

    #[test]
    fn heads_must_divide_channels() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            AttentionParams::new(&mut store, "a", 6, 4, &mut rng),
            Err(Error::Config(_))
        ));
    }
}
