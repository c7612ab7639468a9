//! GRU cell whose gate transforms are adaptive graph convolutions, and the
//! stacked recurrent encoder built from it.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::graph_conv::{graph_propagate, node_adaptive_project, AgcWeights, ChebStack};
use crate::param::ParamStore;
use crate::tensor::Tensor;
use rand::Rng;

/// Weights of one recurrent layer: update gate, reset gate, candidate.
#[derive(Clone, Copy, Debug)]
pub struct GcrnCell {
    pub update: AgcWeights,
    pub reset: AgcWeights,
    pub candidate: AgcWeights,
    pub input_channels: usize,
    pub hidden: usize,
}

impl GcrnCell {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        embed_dim: usize,
        depth: usize,
        input_channels: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let c_in = input_channels + hidden;
        let mut gate = |suffix: &str| {
            AgcWeights::new(store, &format!("{name}.{suffix}"), embed_dim, depth, c_in, hidden, true, rng)
        };
        Ok(GcrnCell {
            update: gate("update")?,
            reset: gate("reset")?,
            candidate: gate("candidate")?,
            input_channels,
            hidden,
        })
    }

    pub fn bind(&self, g: &mut Graph, store: &ParamStore) -> Result<BoundCell> {
        let mut gate = |w: &AgcWeights| -> Result<BoundGate> {
            let bias = w.bias.ok_or_else(|| Error::Contract("gate weights need a bias".into()))?;
            Ok(BoundGate {
                weight: g.param(store, w.weight)?,
                bias: g.param(store, bias)?,
            })
        };
        Ok(BoundCell {
            update: gate(&self.update)?,
            reset: gate(&self.reset)?,
            candidate: gate(&self.candidate)?,
            input_channels: self.input_channels,
            hidden: self.hidden,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundGate {
    pub weight: Var,
    pub bias: Var,
}

/// A [`GcrnCell`] whose parameters are recorded on one graph.
#[derive(Clone, Copy, Debug)]
pub struct BoundCell {
    pub update: BoundGate,
    pub reset: BoundGate,
    pub candidate: BoundGate,
    pub input_channels: usize,
    pub hidden: usize,
}

/// Test hook: replaces the update gate with a constant.
#[derive(Clone, Copy, Debug, Default)]
pub struct CellHooks {
    pub force_update_gate: Option<f64>,
}

/// Intermediate values of one step, exposed for inspection.
#[derive(Clone, Copy, Debug)]
pub struct StepTrace {
    pub hidden: Var,
    pub update: Var,
    pub reset: Var,
    pub candidate: Var,
}

/// Hidden state `B x N x C_out`.
#[derive(Clone, Copy, Debug)]
pub struct GcrnState {
    pub h: Var,
}

impl GcrnState {
    pub fn zeros(g: &mut Graph, batch: usize, nodes: usize, hidden: usize) -> Result<Self> {
        Ok(GcrnState {
            h: g.constant(Tensor::zeros(&[batch, nodes, hidden])?)?,
        })
    }
}

pub fn gcrn_cell_step(
    g: &mut Graph,
    x_t: Var,
    prev: GcrnState,
    cell: &BoundCell,
    stack: &ChebStack,
    embedding: Var,
) -> Result<GcrnState> {
    let trace = gcrn_cell_step_traced(g, x_t, prev, cell, stack, embedding, CellHooks::default())?;
    Ok(GcrnState { h: trace.hidden })
}

pub fn gcrn_cell_step_traced(
    g: &mut Graph,
    x_t: Var,
    prev: GcrnState,
    cell: &BoundCell,
    stack: &ChebStack,
    embedding: Var,
    hooks: CellHooks,
) -> Result<StepTrace> {
    let (xs, hs) = (g.shape(x_t).to_vec(), g.shape(prev.h).to_vec());
    if xs.len() != 3 || hs.len() != 3 || xs[..2] != hs[..2] || xs[2] != cell.input_channels || hs[2] != cell.hidden {
        return Err(Error::dim("gcrn_cell_step", &xs, &hs));
    }
    let h = prev.h;
    let joined = g.concat(&[x_t, h], 2)?;
    let propagated = graph_propagate(g, joined, stack)?;

    let update = match hooks.force_update_gate {
        Some(v) => g.constant(Tensor::full(&hs, v)?)?,
        None => {
            let pre = node_adaptive_project(g, propagated, embedding, cell.update.weight, Some(cell.update.bias))?;
            g.sigmoid(pre)?
        }
    };
    let reset_pre = node_adaptive_project(g, propagated, embedding, cell.reset.weight, Some(cell.reset.bias))?;
    let reset = g.sigmoid(reset_pre)?;

    let gated = g.mul(reset, h)?;
    let joined_reset = g.concat(&[x_t, gated], 2)?;
    let propagated_reset = graph_propagate(g, joined_reset, stack)?;
    let cand_pre = node_adaptive_project(
        g,
        propagated_reset,
        embedding,
        cell.candidate.weight,
        Some(cell.candidate.bias),
    )?;
    let candidate = g.tanh(cand_pre)?;

    // h = z * h_prev + (1 - z) * candidate
    let keep = g.mul(update, h)?;
    let complement = g.one_minus(update)?;
    let fresh = g.mul(complement, candidate)?;
    let hidden = g.add(keep, fresh)?;
    Ok(StepTrace {
        hidden,
        update,
        reset,
        candidate,
    })
}

/// Stacked recurrent encoder sharing one embedding and Chebyshev stack.
#[derive(Clone, Debug)]
pub struct GcrnEncoder {
    pub layers: Vec<GcrnCell>,
}

impl GcrnEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        embed_dim: usize,
        depth: usize,
        input_channels: usize,
        hidden: usize,
        layers: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if layers == 0 {
            return Err(Error::Config("encoder needs at least one layer".into()));
        }
        let cells = (0..layers)
            .map(|l| {
                let c_in = if l == 0 { input_channels } else { hidden };
                GcrnCell::new(store, &format!("{name}.layer{l}"), embed_dim, depth, c_in, hidden, rng)
            })
            .collect::<Result<_>>()?;
        Ok(GcrnEncoder { layers: cells })
    }

    pub fn bind(&self, g: &mut Graph, store: &ParamStore) -> Result<Vec<BoundCell>> {
        self.layers.iter().map(|c| c.bind(g, store)).collect()
    }
}

/// Hidden states of the last layer at every input step, each `B x N x C_out`.
pub fn gcrn_encode_steps(g: &mut Graph, x: Var, layers: &[BoundCell], stack: &ChebStack, embedding: Var) -> Result<Vec<Var>> {
    if layers.is_empty() {
        return Err(Error::Config("encoder needs at least one layer".into()));
    }
    let xs = g.shape(x).to_vec();
    if xs.len() != 4 {
        return Err(Error::dim("gcrn_encode", &xs, &[0, 0, 0, 0]));
    }
    let (batch, steps, nodes) = (xs[0], xs[1], xs[2]);
    let mut inputs = (0..steps).map(|t| g.index(x, 1, t)).collect::<Result<Vec<_>>>()?;
    for cell in layers {
        let mut state = GcrnState::zeros(g, batch, nodes, cell.hidden)?;
        let mut outputs = Vec::with_capacity(steps);
        for &x_t in &inputs {
            state = gcrn_cell_step(g, x_t, state, cell, stack, embedding)?;
            outputs.push(state.h);
        }
        inputs = outputs;
    }
    Ok(inputs)
}

/// Runs the encoder over `x: B x T' x N x C`, returning `B x N x T' x C_out`.
pub fn gcrn_encode(g: &mut Graph, x: Var, layers: &[BoundCell], stack: &ChebStack, embedding: Var) -> Result<Var> {
    let steps = gcrn_encode_steps(g, x, layers, stack, embedding)?;
    g.stack(&steps, 2)
}
