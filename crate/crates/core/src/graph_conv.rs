//! Adaptive adjacency, Chebyshev depth stacks, and graph convolution with
//! node-specific kernels factorized through the node embedding.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;
use rand::Rng;

/// Learnable `N x D_e` node embedding.
#[derive(Clone, Copy, Debug)]
pub struct NodeEmbedding {
    pub id: ParamId,
    pub nodes: usize,
    pub dim: usize,
}

impl NodeEmbedding {
    /// Uniform initialization in `[-1/sqrt(D_e), 1/sqrt(D_e)]`.
    pub fn new(store: &mut ParamStore, name: &str, nodes: usize, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        if nodes == 0 || dim == 0 {
            return Err(Error::Config(format!("node embedding needs N >= 1 and D_e >= 1, got {nodes}x{dim}")));
        }
        let bound = 1.0 / (dim as f64).sqrt();
        let id = store.register_uniform(name, &[nodes, dim], bound, rng)?;
        Ok(NodeEmbedding { id, nodes, dim })
    }
}

/// `softmax(E * E^T)` over rows.
pub fn adaptive_adjacency(g: &mut Graph, embedding: Var) -> Result<Var> {
    if g.shape(embedding).len() != 2 {
        return Err(Error::dim("adaptive_adjacency", g.shape(embedding), &[0, 0]));
    }
    let et = g.transpose(embedding)?;
    let scores = g.matmul(embedding, et)?;
    g.softmax(scores)
}

/// Chebyshev polynomials `[T_0(L), ..., T_{K-1}(L)]` of a square matrix.
#[derive(Clone, Debug)]
pub struct ChebStack {
    pub slices: Vec<Var>,
}

impl ChebStack {
    pub fn depth(&self) -> usize {
        self.slices.len()
    }

    pub fn nodes(&self, g: &Graph) -> usize {
        g.shape(self.slices[0])[0]
    }

    /// The stack as one `K x N x N` value.
    pub fn stacked(&self, g: &mut Graph) -> Result<Var> {
        g.stack(&self.slices, 0)
    }
}

/// `T_0 = I`, `T_1 = L`, `T_{n+1} = 2 L T_n - T_{n-1}`.
pub fn cheb_stack(g: &mut Graph, laplacian: Var, depth: usize) -> Result<ChebStack> {
    if depth < 1 {
        return Err(Error::Config("Chebyshev depth K must be >= 1".into()));
    }
    let s = g.shape(laplacian).to_vec();
    if s.len() != 2 || s[0] != s[1] {
        return Err(Error::dim("cheb_stack", &s, &[s[0], s[0]]));
    }
    let mut slices = vec![g.constant(Tensor::eye(s[0])?)?];
    if depth >= 2 {
        slices.push(laplacian);
    }
    while slices.len() < depth {
        let n = slices.len();
        let prod = g.matmul(laplacian, slices[n - 1])?;
        let twice = g.scale(prod, 2.0)?;
        let next = g.sub(twice, slices[n - 2])?;
        slices.push(next);
    }
    Ok(ChebStack { slices })
}

/// Factorized weights `W: D_e x K x C_in x C_out` and optional bias
/// `b: D_e x C_out`.
#[derive(Clone, Copy, Debug)]
pub struct AgcWeights {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub depth: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl AgcWeights {
    /// Uniform initialization with bound `1/sqrt(K * C_in)`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        embed_dim: usize,
        depth: usize,
        c_in: usize,
        c_out: usize,
        with_bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let bound = 1.0 / ((depth * c_in) as f64).sqrt();
        let weight = store.register_uniform(format!("{name}.weight"), &[embed_dim, depth, c_in, c_out], bound, rng)?;
        let bias = if with_bias {
            Some(store.register_uniform(format!("{name}.bias"), &[embed_dim, c_out], bound, rng)?)
        } else {
            None
        };
        Ok(AgcWeights {
            weight,
            bias,
            depth,
            c_in,
            c_out,
        })
    }
}

/// Propagates `x: B x N x C` through every depth of the stack, giving
/// `N x B x (K * C)` with depth-major channel order.
///
/// The result only depends on the input and the stack, so gates that share
/// an input can share it.
pub fn graph_propagate(g: &mut Graph, x: Var, stack: &ChebStack) -> Result<Var> {
    let xs = g.shape(x).to_vec();
    let n = stack.nodes(g);
    if xs.len() != 3 || xs[1] != n {
        return Err(Error::dim("graph_propagate", &xs, &[0, n, 0]));
    }
    let (b, c) = (xs[0], xs[2]);
    let k = stack.depth();
    let nodes_first = g.permute(x, &[1, 0, 2])?;
    let flat = g.reshape(nodes_first, &[n, b * c])?;
    let mut per_depth = vec![flat];
    for slice in &stack.slices[1..] {
        per_depth.push(g.matmul(*slice, flat)?);
    }
    let stacked = g.stack(&per_depth, 1)?;
    let split = g.reshape(stacked, &[n, k, b, c])?;
    let ordered = g.permute(split, &[0, 2, 1, 3])?;
    g.reshape(ordered, &[n, b, k * c])
}

/// Applies node-specific kernels `E * W` to propagated features
/// `N x B x (K * C_in)`, returning `B x N x C_out` (plus `E * b`).
pub fn node_adaptive_project(
    g: &mut Graph,
    propagated: Var,
    embedding: Var,
    weight: Var,
    bias: Option<Var>,
) -> Result<Var> {
    let ps = g.shape(propagated).to_vec();
    let ws = g.shape(weight).to_vec();
    let es = g.shape(embedding).to_vec();
    if ws.len() != 4 || es.len() != 2 || es[1] != ws[0] || ps.len() != 3 || ps[0] != es[0] || ps[2] != ws[1] * ws[2] {
        return Err(Error::dim("agc_forward", &ps, &ws));
    }
    let (n, d) = (es[0], es[1]);
    let (kc, c_out) = (ws[1] * ws[2], ws[3]);
    let w_flat = g.reshape(weight, &[d, kc * c_out])?;
    let kernels = g.matmul(embedding, w_flat)?;
    let kernels = g.reshape(kernels, &[n, kc, c_out])?;
    let out = g.matmul(propagated, kernels)?;
    let out = g.permute(out, &[1, 0, 2])?;
    match bias {
        Some(b) => {
            let node_bias = g.matmul(embedding, b)?;
            g.add_trailing(out, node_bias)
        }
        None => Ok(out),
    }
}

/// Adaptive graph convolution of `x` (`N x C_in` or `B x N x C_in`).
pub fn agc_forward(
    g: &mut Graph,
    x: Var,
    stack: &ChebStack,
    embedding: Var,
    weight: Var,
    bias: Option<Var>,
) -> Result<Var> {
    let xs = g.shape(x).to_vec();
    let unbatched = xs.len() == 2;
    let xb = if unbatched { g.reshape(x, &[1, xs[0], xs[1]])? } else { x };
    let propagated = graph_propagate(g, xb, stack)?;
    let out = node_adaptive_project(g, propagated, embedding, weight, bias)?;
    if unbatched {
        let s = g.shape(out).to_vec();
        g.reshape(out, &[s[1], s[2]])
    } else {
        Ok(out)
    }
}
