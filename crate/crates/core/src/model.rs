//! End-to-end forecaster: recurrent graph encoder, optional global attention,
//! and a two-layer output head.

use crate::attention::{
    attention_block, multi_head_attention, AttentionParams, InformerSelection, QueryMode, TransformerBlockParams,
    DEFAULT_PE_BASE,
};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::gcrn::{gcrn_encode, GcrnEncoder};
use crate::graph_conv::{adaptive_adjacency, cheb_stack, NodeEmbedding};
use crate::param::{CensusEntry, ParamId, ParamStore};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionVariant {
    /// No attention layer (the STGCRN ablation).
    None,
    Mhsa,
    Transformer,
    Informer,
}

impl AttentionVariant {
    pub const ALL: [AttentionVariant; 4] = [
        AttentionVariant::None,
        AttentionVariant::Mhsa,
        AttentionVariant::Transformer,
        AttentionVariant::Informer,
    ];
}

impl fmt::Display for AttentionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionVariant::None => "none",
            AttentionVariant::Mhsa => "mhsa",
            AttentionVariant::Transformer => "transformer",
            AttentionVariant::Informer => "informer",
        })
    }
}

impl FromStr for AttentionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AttentionVariant::ALL
            .into_iter()
            .find(|v| v.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown attention variant `{s}` (none|mhsa|transformer|informer)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphMode {
    Adaptive,
    Static,
}

impl fmt::Display for GraphMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GraphMode::Adaptive => "adaptive",
            GraphMode::Static => "static",
        })
    }
}

impl FromStr for GraphMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adaptive" => Ok(GraphMode::Adaptive),
            "static" => Ok(GraphMode::Static),
            other => Err(Error::Config(format!("unknown graph mode `{other}` (adaptive|static)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub nodes: usize,
    pub input_channels: usize,
    pub hidden: usize,
    pub input_steps: usize,
    pub horizon: usize,
    pub cheb_depth: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub attention: AttentionVariant,
    pub graph: GraphMode,
    pub heads: usize,
    pub ffn_dim: usize,
    pub informer_factor: f64,
    pub pe_base: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            nodes: 8,
            input_channels: 1,
            hidden: 64,
            input_steps: 12,
            horizon: 12,
            cheb_depth: 2,
            embed_dim: 10,
            layers: 2,
            attention: AttentionVariant::Transformer,
            graph: GraphMode::Adaptive,
            heads: 4,
            ffn_dim: 256,
            informer_factor: 1.0,
            pe_base: DEFAULT_PE_BASE,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("nodes", self.nodes),
            ("input_channels", self.input_channels),
            ("hidden", self.hidden),
            ("input_steps", self.input_steps),
            ("horizon", self.horizon),
            ("embed_dim", self.embed_dim),
            ("layers", self.layers),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be >= 1")));
        }
        if self.cheb_depth < 1 {
            return Err(Error::Config("cheb_depth (K) must be >= 1".into()));
        }
        if self.input_steps != self.horizon {
            return Err(Error::Config(format!(
                "input_steps ({}) must equal horizon ({})",
                self.input_steps, self.horizon
            )));
        }
        if self.attention != AttentionVariant::None && !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden ({}) must be divisible by heads ({})",
                self.hidden, self.heads
            )));
        }
        if !(self.informer_factor > 0.0) || !(self.pe_base > 0.0) {
            return Err(Error::Config("informer_factor and pe_base must be positive".into()));
        }
        Ok(())
    }

    pub fn informer_selection(&self) -> InformerSelection {
        InformerSelection::for_length(self.input_steps, self.informer_factor, self.seed)
    }
}

#[derive(Clone, Copy, Debug)]
pub enum AttentionModule {
    None,
    Mhsa(AttentionParams),
    Block(TransformerBlockParams),
}

/// `fc2(relu(fc1(x)))` applied at every `(node, time)` position.
#[derive(Clone, Copy, Debug)]
pub struct OutputHead {
    pub fc1: ParamId,
    pub fc1_bias: ParamId,
    pub fc2: ParamId,
    pub fc2_bias: ParamId,
}

/// Options and records of one forward pass.
#[derive(Clone, Debug, Default)]
pub struct ForwardTrace {
    /// Reuse `selection` (when present) instead of re-scoring queries.
    pub freeze_selection: bool,
    /// ProbSparse selection mask of the last forward pass.
    pub selection: Option<Vec<bool>>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub embedding: NodeEmbedding,
    pub encoder: GcrnEncoder,
    pub attention: AttentionModule,
    pub head: OutputHead,
    static_adjacency: Option<Tensor>,
}

/// Scales every row to sum to one.
pub fn row_normalize(adjacency: &Tensor) -> Result<Tensor> {
    let s = adjacency.shape();
    if s.len() != 2 || s[0] != s[1] {
        return Err(Error::dim("row_normalize", s, &[s[0], s[0]]));
    }
    let n = s[0];
    let mut out = adjacency.clone();
    for (r, row) in out.data_mut().chunks_mut(n).enumerate() {
        let total: f64 = row.iter().sum();
        if !(total > 0.0) || row.iter().any(|&v| v < 0.0) {
            return Err(Error::Config(format!(
                "adjacency row {r} must be nonnegative with a positive sum"
            )));
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    Ok(out)
}

impl Model {
    /// Builds a model with seeded initialization. `adjacency` is required
    /// for (and only used by) the static graph mode.
    pub fn new(config: ModelConfig, adjacency: Option<&Tensor>) -> Result<Self> {
        config.validate()?;
        let static_adjacency = match (config.graph, adjacency) {
            (GraphMode::Static, Some(a)) => {
                if a.shape() != [config.nodes, config.nodes] {
                    return Err(Error::dim("static adjacency", a.shape(), &[config.nodes, config.nodes]));
                }
                Some(row_normalize(a)?)
            }
            (GraphMode::Static, None) => {
                return Err(Error::Config("static graph mode needs an adjacency matrix".into()))
            }
            (GraphMode::Adaptive, _) => None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let c = &config;
        let embedding = NodeEmbedding::new(&mut store, "node_embedding", c.nodes, c.embed_dim, &mut rng)?;
        let encoder = GcrnEncoder::new(
            &mut store,
            "encoder",
            c.embed_dim,
            c.cheb_depth,
            c.input_channels,
            c.hidden,
            c.layers,
            &mut rng,
        )?;
        let attention = match c.attention {
            AttentionVariant::None => AttentionModule::None,
            AttentionVariant::Mhsa => {
                AttentionModule::Mhsa(AttentionParams::new(&mut store, "attention", c.hidden, c.heads, &mut rng)?)
            }
            AttentionVariant::Transformer | AttentionVariant::Informer => AttentionModule::Block(
                TransformerBlockParams::new(&mut store, "attention", c.hidden, c.heads, c.ffn_dim, &mut rng)?,
            ),
        };
        let bound = 1.0 / (c.hidden as f64).sqrt();
        let head = OutputHead {
            fc1: store.register_uniform("head.fc1.weight", &[c.hidden, c.hidden], bound, &mut rng)?,
            fc1_bias: store.register_uniform("head.fc1.bias", &[c.hidden], bound, &mut rng)?,
            fc2: store.register_uniform("head.fc2.weight", &[c.hidden, 1], bound, &mut rng)?,
            fc2_bias: store.register_uniform("head.fc2.bias", &[1], bound, &mut rng)?,
        };
        Ok(Model {
            config,
            store,
            embedding,
            encoder,
            attention,
            head,
            static_adjacency,
        })
    }

    pub fn static_adjacency(&self) -> Option<&Tensor> {
        self.static_adjacency.as_ref()
    }

    pub fn census(&self) -> Vec<CensusEntry> {
        self.store.census()
    }

    /// Forecast `B x T x N x 1` from `x: B x T' x N x C`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.forward_traced(g, x, &mut ForwardTrace::default())
    }

    /// The encoder output `B x N x T' x C_out`.
    pub fn encode(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.encode_with(&self.store, g, x)
    }

    fn encode_with(&self, store: &ParamStore, g: &mut Graph, x: Var) -> Result<Var> {
        let c = &self.config;
        let xs = g.shape(x).to_vec();
        if xs.len() != 4 || xs[1] != c.input_steps || xs[2] != c.nodes || xs[3] != c.input_channels {
            return Err(Error::dim(
                "forward",
                &xs,
                &[0, c.input_steps, c.nodes, c.input_channels],
            ));
        }
        let e = g.param(store, self.embedding.id)?;
        let laplacian = match &self.static_adjacency {
            Some(a) => g.constant(a.clone())?,
            None => adaptive_adjacency(g, e)?,
        };
        let stack = cheb_stack(g, laplacian, c.cheb_depth)?;
        let cells = self.encoder.bind(g, store)?;
        gcrn_encode(g, x, &cells, &stack, e)
    }

    pub fn forward_traced(&self, g: &mut Graph, x: Var, trace: &mut ForwardTrace) -> Result<Var> {
        self.forward_with(&self.store, g, x, trace)
    }

    /// Forward pass reading parameters from `store`, which must have the
    /// layout of `self.store` (for perturbation checks).
    pub fn forward_with(&self, store: &ParamStore, g: &mut Graph, x: Var, trace: &mut ForwardTrace) -> Result<Var> {
        if store.len() != self.store.len() && !self.store.is_empty() {
            return Err(Error::Contract("parameter store layout does not match the model".into()));
        }
        let c = &self.config;
        let encoded = self.encode_with(store, g, x)?;
        let attended = match &self.attention {
            AttentionModule::None => encoded,
            AttentionModule::Mhsa(p) => {
                let bound = p.bind(g, store)?;
                multi_head_attention(g, encoded, &bound, &QueryMode::Dense)?.out
            }
            AttentionModule::Block(p) => {
                let bound = p.bind(g, store)?;
                let mode = if c.attention == AttentionVariant::Informer {
                    QueryMode::ProbSparse {
                        selection: c.informer_selection(),
                        frozen: if trace.freeze_selection { trace.selection.clone() } else { None },
                    }
                } else {
                    QueryMode::Dense
                };
                let out = attention_block(g, encoded, &bound, &mode, c.pe_base)?;
                trace.selection = out.keep;
                out.out
            }
        };
        let h = &self.head;
        let fc1 = g.param(store, h.fc1)?;
        let fc1_bias = g.param(store, h.fc1_bias)?;
        let fc2 = g.param(store, h.fc2)?;
        let fc2_bias = g.param(store, h.fc2_bias)?;
        let y = g.matmul(attended, fc1)?;
        let y = g.add_trailing(y, fc1_bias)?;
        let y = g.relu(y)?;
        let y = g.matmul(y, fc2)?;
        let y = g.add_trailing(y, fc2_bias)?;
        // B x N x T x 1 -> B x T x N x 1; time position t forecasts horizon t+1
        g.permute(y, &[0, 2, 1, 3])
    }

    /// Inference without keeping the graph.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone())?;
        let y = self.forward(&mut g, xv)?;
        Ok(g.value(y).clone())
    }

    pub fn predict_traced(&self, x: &Tensor, trace: &mut ForwardTrace) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone())?;
        let y = self.forward_traced(&mut g, xv, trace)?;
        Ok(g.value(y).clone())
    }

    /// Records `l1_loss(forward(x), target)` and returns the loss node.
    pub fn loss(&self, g: &mut Graph, x: &Tensor, target: &Tensor) -> Result<Var> {
        let xv = g.constant(x.clone())?;
        let pred = self.forward(g, xv)?;
        let tv = g.constant(target.clone())?;
        l1_loss(g, pred, tv)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_checkpoint(&mut file)?;
        file.flush()?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
        Model::read_checkpoint(&mut file)
    }

    pub fn write_checkpoint(&self, w: &mut impl Write) -> Result<()> {
        let manifest = CheckpointManifest {
            format_version: CHECKPOINT_VERSION,
            payload: PAYLOAD_KIND.to_string(),
            seed: self.config.seed,
            config: self.config.clone(),
            static_adjacency: self.static_adjacency.clone(),
            params: self
                .store
                .iter()
                .map(|p| ParamEntry {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&manifest)?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for p in self.store.iter() {
            for &v in p.value.data() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let version = u32::from_le_bytes(word);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported format version {version}")));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
        r.read_exact(&mut json)?;
        let manifest: CheckpointManifest = serde_json::from_slice(&json)?;
        if manifest.payload != PAYLOAD_KIND {
            return Err(Error::Format(format!("unsupported payload `{}`", manifest.payload)));
        }
        let mut model = Model::new(manifest.config, manifest.static_adjacency.as_ref())?;
        // rebuilt from normalized rows, so this is a no-op up to rounding; keep stored values exactly
        model.static_adjacency = manifest.static_adjacency;
        if model.store.len() != manifest.params.len() {
            return Err(Error::Format("parameter list does not match the configuration".into()));
        }
        let ids: Vec<_> = model.store.ids().collect();
        for (id, entry) in ids.into_iter().zip(&manifest.params) {
            let p = model.store.get(id);
            if p.name != entry.name || p.value.shape() != entry.shape.as_slice() {
                return Err(Error::Format(format!(
                    "parameter `{}` {:?} does not match `{}` {:?}",
                    entry.name,
                    entry.shape,
                    p.name,
                    p.value.shape()
                )));
            }
            for v in model.store.value_mut(id).data_mut() {
                r.read_exact(&mut word)?;
                let x = f32::from_le_bytes(word);
                if !x.is_finite() {
                    return Err(Error::Format(format!("non-finite value in `{}`", entry.name)));
                }
                *v = x as f64;
            }
        }
        if r.read(&mut word)? != 0 {
            return Err(Error::Format("trailing bytes after payload".into()));
        }
        Ok(model)
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ASTGCRN\0";
pub const CHECKPOINT_VERSION: u32 = 1;
const PAYLOAD_KIND: &str = "f32le";

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    format_version: u32,
    payload: String,
    seed: u64,
    config: ModelConfig,
    static_adjacency: Option<Tensor>,
    params: Vec<ParamEntry>,
}

/// Mean absolute error over all elements.
pub fn l1_loss(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    if g.shape(pred) != g.shape(target) {
        return Err(Error::dim("l1_loss", g.shape(pred), g.shape(target)));
    }
    let diff = g.sub(pred, target)?;
    let abs = g.abs(diff)?;
    g.mean(abs)
}
