//! Graph encoders: feature-similarity multi-head attention, spatio-temporal
//! kernel attention at one or several bandwidths, and their sum.
//!
//! Features are `r × n` matrices with one column per node. Kernel attention
//! replaces the query/key similarity by the kernel
//! `exp(-‖p_v − p_w‖² / σ_S² − |t_v − t_w| / σ_T)`, softmaxed row-wise without
//! temperature scaling, and shares that matrix across heads.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::compactor::{EncoderInput, EncoderNode};
use crate::error::{Error, Result};
use crate::graph::{ClassKind, NodeId};
use crate::numcore::{init_uniform, softmax_rows, Activation, Mlp, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelLevel {
    pub sigma_s: f64,
    pub sigma_t: f64,
}

impl KernelLevel {
    /// Equal spatial and temporal bandwidth.
    pub fn tied(sigma: f64) -> Self {
        KernelLevel {
            sigma_s: sigma,
            sigma_t: sigma,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub levels: Vec<KernelLevel>,
    pub heads: usize,
    pub latent_dim: usize,
}

/// Spatial bandwidths of the four-level hierarchy, with `σ_T = σ_S`.
pub const DEFAULT_BANDWIDTHS: [f64; 4] = [0.01, 0.1, 1.0, 10.0];

impl KernelConfig {
    pub fn hierarchy(sigmas: &[f64], heads: usize, latent_dim: usize) -> Self {
        KernelConfig {
            levels: sigmas.iter().map(|s| KernelLevel::tied(*s)).collect(),
            heads,
            latent_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::validation("at least one kernel level is required"));
        }
        if self
            .levels
            .iter()
            .any(|l| !(l.sigma_s > 0.0 && l.sigma_t > 0.0))
        {
            return Err(Error::validation("bandwidths must be positive"));
        }
        if self.heads == 0 || self.latent_dim == 0 || !self.latent_dim.is_multiple_of(self.heads) {
            return Err(Error::validation(format!(
                "latent dim {} must be a positive multiple of heads {}",
                self.latent_dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.latent_dim / self.heads
    }
}

/// Smallest absolute difference between two observation lists.
pub fn temporal_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .flat_map(|x| b.iter().map(move |y| (x - y).abs()))
        .fold(f64::INFINITY, f64::min)
}

/// Spatio-temporal similarity of two observed nodes, in `(0, 1]`.
pub fn kernel(p_v: &[f64; 3], t_v: &[f64], p_w: &[f64; 3], t_w: &[f64], level: &KernelLevel) -> f64 {
    let d2: f64 = p_v.iter().zip(p_w).map(|(a, b)| (a - b) * (a - b)).sum();
    let dt = temporal_distance(t_v, t_w);
    (-d2 / (level.sigma_s * level.sigma_s) - dt / level.sigma_t).exp()
}

/// Positions and observation times of the encoder's columns.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeGeometry {
    pub positions: Vec<[f64; 3]>,
    pub time_obs: Vec<Vec<f64>>,
}

impl NodeGeometry {
    pub fn from_input(input: &EncoderInput) -> Self {
        NodeGeometry {
            positions: input.nodes.iter().map(|n| n.position).collect(),
            time_obs: input.nodes.iter().map(|n| n.timestamps.clone()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn kernel_matrix(&self, level: &KernelLevel) -> Result<Tensor> {
        let n = self.len();
        if n == 0 {
            return Err(Error::shape("kernel over an empty node set"));
        }
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
            for j in 0..i {
                let k = kernel(
                    &self.positions[i],
                    &self.time_obs[i],
                    &self.positions[j],
                    &self.time_obs[j],
                    level,
                );
                data[i * n + j] = k;
                data[j * n + i] = k;
            }
        }
        Tensor::matrix(n, n, data)
    }

    /// Row-softmaxed kernel matrix.
    pub fn attention_weights(&self, level: &KernelLevel) -> Result<Tensor> {
        softmax_rows(&self.kernel_matrix(level)?)
    }

    /// Softmaxed kernels for every level, in order.
    pub fn level_weights(&self, cfg: &KernelConfig) -> Result<Vec<Tensor>> {
        cfg.levels.iter().map(|l| self.attention_weights(l)).collect()
    }
}

/// Projected node features `F` (one column per node, ascending id) with geometry.
#[derive(Clone, Debug)]
pub struct NodeFeatureMatrix {
    pub features: Var,
    pub node_ids: Vec<NodeId>,
    pub geometry: NodeGeometry,
}

/// Per-head query/key/value projections `r → r/k`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MultiHeadAttention {
    pub heads: Vec<AttentionHead>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionHead {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, latent: usize, heads: usize, rng: &mut impl Rng) -> Self {
        let rk = latent / heads;
        let heads = (0..heads)
            .map(|i| AttentionHead {
                query: store.add(format!("{name}.h{i}.query"), init_uniform(rng, rk, latent, latent)),
                key: store.add(format!("{name}.h{i}.key"), init_uniform(rng, rk, latent, latent)),
                value: store.add(format!("{name}.h{i}.value"), init_uniform(rng, rk, latent, latent)),
            })
            .collect();
        MultiHeadAttention { heads }
    }

    pub fn params(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.heads.iter().flat_map(|h| [h.query, h.key, h.value])
    }

    /// Queries from `target` (`r × m`), keys and values from `source`
    /// (`r × n`); returns `r × m`.
    pub fn attend(&self, tape: &mut Tape, store: &ParamStore, target: Var, source: Var) -> Result<Var> {
        let mut outs = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let wq = tape.param(store, head.query);
            let wk = tape.param(store, head.key);
            let wv = tape.param(store, head.value);
            let rk = tape.value(wq).rows() as f64;
            let q = tape.matmul(wq, target)?;
            let k = tape.matmul(wk, source)?;
            let v = tape.matmul(wv, source)?;
            let qt = tape.transpose(q);
            let scores = tape.matmul(qt, k)?;
            let scores = tape.scale(scores, 1.0 / rk.sqrt())?;
            let attn = tape.softmax_rows(scores)?;
            let attn_t = tape.transpose(attn);
            outs.push(tape.matmul(v, attn_t)?);
        }
        tape.concat_rows(&outs)
    }
}

/// Feature-similarity self-attention over the columns of `f`.
pub fn standard_attention(tape: &mut Tape, store: &ParamStore, f: Var, mha: &MultiHeadAttention) -> Result<Var> {
    mha.attend(tape, store, f, f)
}

/// Value projections used by every kernel level.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KernelValues {
    pub heads: Vec<ParamId>,
}

impl KernelValues {
    pub fn new(store: &mut ParamStore, name: &str, latent: usize, heads: usize, rng: &mut impl Rng) -> Self {
        let rk = latent / heads;
        KernelValues {
            heads: (0..heads)
                .map(|i| store.add(format!("{name}.h{i}.value"), init_uniform(rng, rk, latent, latent)))
                .collect(),
        }
    }
}

/// Applies precomputed row-stochastic weights (`n × n`) to each head's values.
pub fn kernel_attention(
    tape: &mut Tape,
    store: &ParamStore,
    f: Var,
    weights: &Tensor,
    values: &KernelValues,
) -> Result<Var> {
    let n = tape.value(f).cols();
    if weights.rows() != n || weights.cols() != n {
        return Err(Error::shape(format!(
            "kernel weights {:?} for {n} nodes",
            weights.shape()
        )));
    }
    let wt = tape.constant(weights.transpose());
    let mut outs = Vec::with_capacity(values.heads.len());
    for &head in &values.heads {
        let wv = tape.param(store, head);
        let v = tape.matmul(wv, f)?;
        outs.push(tape.matmul(v, wt)?);
    }
    tape.concat_rows(&outs)
}

/// `Σ_j MLP_j(kernel_attention at level j)`.
pub fn hierarchical_attention(
    tape: &mut Tape,
    store: &ParamStore,
    f: Var,
    level_weights: &[Tensor],
    values: &KernelValues,
    mlps: &[Mlp],
) -> Result<Var> {
    if level_weights.len() != mlps.len() || mlps.is_empty() {
        return Err(Error::shape(format!(
            "{} kernel levels for {} level MLPs",
            level_weights.len(),
            mlps.len()
        )));
    }
    let mut total: Option<Var> = None;
    for (weights, mlp) in level_weights.iter().zip(mlps) {
        let branch = kernel_attention(tape, store, f, weights, values)?;
        let branch = mlp.forward(tape, store, branch)?;
        total = Some(match total {
            None => branch,
            Some(acc) => tape.add(acc, branch)?,
        });
    }
    Ok(total.expect("at least one level"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub object_dim: usize,
    pub motion_dim: usize,
    pub kernel: KernelConfig,
    /// Depth of the feature-similarity stack.
    pub standard_layers: usize,
    /// Add the feature-similarity branch to the kernel hierarchy.
    pub combine: bool,
}

/// All parameters of the graph encoder.
#[derive(Clone, Debug)]
pub struct GraphEncoder {
    pub config: EncoderConfig,
    pub mlp_static: Mlp,
    pub mlp_dynamic: Mlp,
    pub standard: Vec<MultiHeadAttention>,
    pub kernel_values: KernelValues,
    pub level_mlps: Vec<Mlp>,
    pub mlp_combine: Mlp,
}

impl GraphEncoder {
    pub fn new(config: EncoderConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        config.kernel.validate()?;
        if config.standard_layers == 0 {
            return Err(Error::validation("standard_layers must be at least 1"));
        }
        let r = config.kernel.latent_dim;
        let k = config.kernel.heads;
        let mlp_static = Mlp::new(store, "enc.mlp_static", &[config.object_dim, r, r], Activation::Identity, rng)?;
        let mlp_dynamic = Mlp::new(
            store,
            "enc.mlp_dynamic",
            &[config.object_dim + config.motion_dim, r, r],
            Activation::Identity,
            rng,
        )?;
        let standard = (0..config.standard_layers)
            .map(|i| MultiHeadAttention::new(store, &format!("enc.standard{i}"), r, k, rng))
            .collect();
        let kernel_values = KernelValues::new(store, "enc.kernel", r, k, rng);
        let level_mlps = (0..config.kernel.levels.len())
            .map(|j| Mlp::new(store, &format!("enc.level{j}"), &[r, r], Activation::Identity, rng))
            .collect::<Result<Vec<_>>>()?;
        let mlp_combine = Mlp::new(store, "enc.mlp_combine", &[r, r], Activation::Identity, rng)?;
        Ok(GraphEncoder {
            config,
            mlp_static,
            mlp_dynamic,
            standard,
            kernel_values,
            level_mlps,
            mlp_combine,
        })
    }

    /// Projects static nodes through the static MLP and dynamic nodes through
    /// the dynamic MLP, columns in node-id order.
    pub fn project_nodes(&self, tape: &mut Tape, store: &ParamStore, input: &EncoderInput) -> Result<NodeFeatureMatrix> {
        project_nodes(tape, store, input, &self.mlp_static, &self.mlp_dynamic)
    }

    pub fn hierarchical(&self, tape: &mut Tape, store: &ParamStore, f: Var, level_weights: &[Tensor]) -> Result<Var> {
        hierarchical_attention(tape, store, f, level_weights, &self.kernel_values, &self.level_mlps)
    }

    pub fn standard_stack(&self, tape: &mut Tape, store: &ParamStore, f: Var) -> Result<Var> {
        self.standard
            .iter()
            .try_fold(f, |h, mha| standard_attention(tape, store, h, mha))
    }

    /// Kernel hierarchy plus `MLP_comb` of the feature-similarity stack
    /// (the latter omitted when `combine` is off).
    pub fn combined_encoding(&self, tape: &mut Tape, store: &ParamStore, f: Var, level_weights: &[Tensor]) -> Result<Var> {
        let hier = self.hierarchical(tape, store, f, level_weights)?;
        if !self.config.combine {
            return Ok(hier);
        }
        let std = self.standard_stack(tape, store, f)?;
        let std = self.mlp_combine.forward(tape, store, std)?;
        tape.add(hier, std)
    }

    /// Full encoder pass; `level_weights` may be precomputed with
    /// [`NodeGeometry::level_weights`].
    pub fn encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        input: &EncoderInput,
        level_weights: Option<&[Tensor]>,
    ) -> Result<Var> {
        let f = self.project_nodes(tape, store, input)?;
        let owned;
        let weights = match level_weights {
            Some(w) => w,
            None => {
                owned = f.geometry.level_weights(&self.config.kernel)?;
                &owned
            }
        };
        self.combined_encoding(tape, store, f.features, weights)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut out: Vec<ParamId> = self.mlp_static.params().chain(self.mlp_dynamic.params()).collect();
        for mha in &self.standard {
            out.extend(mha.params());
        }
        out.extend(self.kernel_values.heads.iter().copied());
        for m in &self.level_mlps {
            out.extend(m.params());
        }
        out.extend(self.mlp_combine.params());
        out
    }
}

fn feature_block(nodes: &[&EncoderNode]) -> Result<Tensor> {
    Tensor::from_columns(&nodes.iter().map(|n| n.feature.clone()).collect::<Vec<_>>())
}

pub fn project_nodes(
    tape: &mut Tape,
    store: &ParamStore,
    input: &EncoderInput,
    mlp_static: &Mlp,
    mlp_dynamic: &Mlp,
) -> Result<NodeFeatureMatrix> {
    if input.is_empty() {
        return Err(Error::shape("cannot encode an empty graph"));
    }
    let (statics, dynamics): (Vec<(usize, &EncoderNode)>, Vec<(usize, &EncoderNode)>) = input
        .nodes
        .iter()
        .enumerate()
        .partition(|(_, n)| n.kind == ClassKind::Static);

    let mut blocks = Vec::new();
    let mut order = Vec::with_capacity(input.len());
    for (group, mlp) in [(&statics, mlp_static), (&dynamics, mlp_dynamic)] {
        if group.is_empty() {
            continue;
        }
        let nodes: Vec<&EncoderNode> = group.iter().map(|(_, n)| *n).collect();
        let width = mlp.in_dim(store);
        if let Some(bad) = nodes.iter().find(|n| n.feature.len() != width) {
            return Err(Error::shape(format!(
                "node {} has feature width {}, projection expects {width}",
                bad.node_id,
                bad.feature.len()
            )));
        }
        let x = tape.constant(feature_block(&nodes)?);
        blocks.push(mlp.forward(tape, store, x)?);
        order.extend(group.iter().map(|(i, _)| *i));
    }
    let joined = if blocks.len() == 1 { blocks[0] } else { tape.concat_cols(&blocks)? };
    // column c of `joined` holds node order[c]; invert to node order
    let mut perm = vec![0; order.len()];
    for (c, &node_pos) in order.iter().enumerate() {
        perm[node_pos] = c;
    }
    let features = if perm.iter().enumerate().all(|(i, &p)| i == p) {
        joined
    } else {
        tape.select_cols(joined, &perm)?
    };
    Ok(NodeFeatureMatrix {
        features,
        node_ids: input.nodes.iter().map(|n| n.node_id).collect(),
        geometry: NodeGeometry::from_input(input),
    })
}
