//! Graph-transformer encoder: stacked self-attention layers over the
//! initial embedding matrix, a graph residual, mean fusion into a single
//! graph vector, and the two unsupervised pre-training objectives.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Matrix, ParamId, ParameterStore, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::GraphInstance;
use crate::wl::GraphFeatures;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResidualMode {
    /// Add `H0` to the output of every layer.
    Raw,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub hidden_size: usize,
    pub heads: usize,
    pub layers: usize,
    pub hidden_dropout: f64,
    pub attention_dropout: f64,
    pub residual: ResidualMode,
    pub wl_iterations: usize,
    /// Divide the fused sum by the real node count instead of `k_max`.
    pub fusion_divide_by_valid: bool,
    /// Keep padding rows out of every attention distribution.
    pub mask_padding: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            hidden_size: 32,
            heads: 2,
            layers: 2,
            hidden_dropout: 0.5,
            attention_dropout: 0.3,
            residual: ResidualMode::Raw,
            wl_iterations: crate::wl::DEFAULT_WL_ITERATIONS,
            fusion_divide_by_valid: false,
            mask_padding: false,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_size == 0 || self.hidden_size % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "hidden_size must be positive and even, got {}",
                self.hidden_size
            )));
        }
        if self.heads == 0 || self.hidden_size % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "hidden_size {} is not divisible by {} heads",
                self.hidden_size, self.heads
            )));
        }
        for (name, p) in [
            ("hidden_dropout", self.hidden_dropout),
            ("attention_dropout", self.attention_dropout),
        ] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::InvalidArgument(format!("{name} {p} outside [0, 1)")));
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.heads
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerParams {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
}

/// Handles for every encoder weight in a [`ParameterStore`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderParams {
    /// `d_x x d_h`, absent for attribute-free corpora.
    pub attribute_map: Option<ParamId>,
    /// `k_max x d_h`.
    pub weight_map: ParamId,
    pub layers: Vec<LayerParams>,
    /// `d_h x d_x` map used only by attribute reconstruction.
    pub attribute_reconstruction: Option<ParamId>,
}

impl EncoderParams {
    pub fn init(
        store: &mut ParameterStore,
        config: &EncoderConfig,
        k_max: usize,
        d_x: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let d_h = config.hidden_size;
        let attribute_map = (d_x > 0).then(|| store.insert_glorot("embed.attribute", d_x, d_h, rng));
        let weight_map = store.insert_glorot("embed.neighborhood", k_max, d_h, rng);
        let layers = (0..config.layers)
            .map(|l| LayerParams {
                query: store.insert_glorot(format!("layer{l}.query"), d_h, d_h, rng),
                key: store.insert_glorot(format!("layer{l}.key"), d_h, d_h, rng),
                value: store.insert_glorot(format!("layer{l}.value"), d_h, d_h, rng),
            })
            .collect();
        let attribute_reconstruction =
            (d_x > 0).then(|| store.insert_glorot("pretrain.attribute_reconstruction", d_h, d_x, rng));
        EncoderParams {
            attribute_map,
            weight_map,
            layers,
            attribute_reconstruction,
        }
    }

    pub fn from_store(store: &ParameterStore, config: &EncoderConfig) -> Result<Self> {
        let get = |name: String| {
            store
                .find(&name)
                .ok_or_else(|| Error::InvalidData(format!("checkpoint lacks parameter {name}")))
        };
        Ok(EncoderParams {
            attribute_map: store.find("embed.attribute"),
            weight_map: get("embed.neighborhood".into())?,
            layers: (0..config.layers)
                .map(|l| {
                    Ok(LayerParams {
                        query: get(format!("layer{l}.query"))?,
                        key: get(format!("layer{l}.key"))?,
                        value: get(format!("layer{l}.value"))?,
                    })
                })
                .collect::<Result<_>>()?,
            attribute_reconstruction: store.find("pretrain.attribute_reconstruction"),
        })
    }
}

/// Encoder parameters placed on one tape.
#[derive(Debug, Clone)]
pub struct EncoderVars {
    attribute_map: Option<Var>,
    weight_map: Var,
    layers: Vec<(Var, Var, Var)>,
    attribute_reconstruction: Option<Var>,
}

impl EncoderVars {
    pub fn bind(tape: &mut Tape, store: &ParameterStore, params: &EncoderParams) -> Self {
        EncoderVars {
            attribute_map: params.attribute_map.map(|p| tape.param(store, p)),
            weight_map: tape.param(store, params.weight_map),
            layers: params
                .layers
                .iter()
                .map(|l| (tape.param(store, l.query), tape.param(store, l.key), tape.param(store, l.value)))
                .collect(),
            attribute_reconstruction: params.attribute_reconstruction.map(|p| tape.param(store, p)),
        }
    }
}

/// Train-time dropout with inverse scaling. Evaluation passes `None`.
#[derive(Debug, Clone)]
pub struct Dropout {
    rng: ChaCha8Rng,
    hidden: f64,
    attention: f64,
}

impl Dropout {
    pub fn new(seed: u64, hidden: f64, attention: f64) -> Self {
        Dropout {
            rng: ChaCha8Rng::seed_from_u64(seed),
            hidden,
            attention,
        }
    }

    pub fn from_config(seed: u64, config: &EncoderConfig) -> Self {
        Self::new(seed, config.hidden_dropout, config.attention_dropout)
    }

    fn apply(&mut self, tape: &mut Tape, x: Var, rate: f64) -> Result<Var> {
        if rate <= 0.0 {
            return Ok(x);
        }
        let (rows, cols) = tape.shape(x);
        let keep = 1.0 - rate;
        let data = (0..rows * cols)
            .map(|_| if self.rng.gen_bool(keep) { 1.0 / keep } else { 0.0 })
            .collect();
        let mask = tape.constant(Matrix::from_vec(rows, cols, data)?);
        tape.mul(x, mask)
    }
}

/// `H0` on the tape: `W W_w + P (+ X W_x)`, padding rows exactly zero.
pub fn initial_embeddings_on_tape(tape: &mut Tape, vars: &EncoderVars, features: &GraphFeatures) -> Result<Var> {
    let weights = tape.constant(features.weights.clone());
    let mut h = tape.matmul(weights, vars.weight_map)?;
    let positional = tape.constant(features.positional.clone());
    h = tape.add(h, positional)?;
    if let (Some(x), Some(map)) = (&features.attributes, vars.attribute_map) {
        let x = tape.constant(x.clone());
        let ex = tape.matmul(x, map)?;
        h = tape.add(h, ex)?;
    }
    Ok(h)
}

/// One graph-transformer layer: per-head `softmax(Q K^T / sqrt(d_head)) V`,
/// heads concatenated, plus the residual source when given.
#[allow(clippy::too_many_arguments)]
pub fn transformer_layer(
    tape: &mut Tape,
    h_prev: Var,
    (w_q, w_k, w_v): (Var, Var, Var),
    residual: Option<Var>,
    heads: usize,
    padding_mask: Option<Var>,
    dropout: Option<&mut Dropout>,
) -> Result<Var> {
    let (_, d_h) = tape.shape(h_prev);
    if heads == 0 || d_h % heads != 0 {
        return Err(Error::InvalidArgument(format!("{d_h} columns cannot split into {heads} heads")));
    }
    let q = tape.matmul(h_prev, w_q)?;
    let k = tape.matmul(h_prev, w_k)?;
    let v = tape.matmul(h_prev, w_v)?;
    let head_dim = d_h / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();

    let mut dropout = dropout;
    let mut outputs = Vec::with_capacity(heads);
    for head in 0..heads {
        let start = head * head_dim;
        let qh = tape.slice_cols(q, start, head_dim)?;
        let kh = tape.slice_cols(k, start, head_dim)?;
        let vh = tape.slice_cols(v, start, head_dim)?;
        let scores = tape.matmul_t(qh, kh)?;
        let mut scores = tape.scale(scores, scale);
        if let Some(mask) = padding_mask {
            scores = tape.add(scores, mask)?;
        }
        let mut attn = tape.row_softmax(scores);
        if let Some(d) = dropout.as_deref_mut() {
            attn = d.apply(tape, attn, d.attention)?;
        }
        outputs.push(tape.matmul(attn, vh)?);
    }
    let mut out = tape.concat_cols(&outputs)?;
    if let Some(d) = dropout.as_deref_mut() {
        out = d.apply(tape, out, d.hidden)?;
    }
    match residual {
        Some(r) => tape.add(out, r),
        None => Ok(out),
    }
}

const MASKED_SCORE: f64 = -1e9;

/// Runs the layer stack and returns the final `k_max x d_h` node states.
pub fn encode_nodes(
    tape: &mut Tape,
    vars: &EncoderVars,
    features: &GraphFeatures,
    config: &EncoderConfig,
    mut dropout: Option<&mut Dropout>,
) -> Result<Var> {
    let h0 = initial_embeddings_on_tape(tape, vars, features)?;
    let k = features.weights.rows();
    let padding_mask = (config.mask_padding && features.valid_count < k).then(|| {
        let mut m = Matrix::zeros(k, k);
        for i in 0..k {
            for j in features.valid_count..k {
                m[(i, j)] = MASKED_SCORE;
            }
        }
        tape.constant(m)
    });
    let residual = match config.residual {
        ResidualMode::Raw => Some(h0),
        ResidualMode::None => None,
    };
    let mut h = h0;
    for &layer in &vars.layers {
        h = transformer_layer(
            tape,
            h,
            layer,
            residual,
            config.heads,
            padding_mask,
            dropout.as_deref_mut(),
        )?;
    }
    Ok(h)
}

/// Graph representation `z`: mean of the final node states over all `k_max`
/// rows, padding included, as a `1 x d_h` row.
pub fn encode_graph(
    tape: &mut Tape,
    vars: &EncoderVars,
    features: &GraphFeatures,
    config: &EncoderConfig,
    dropout: Option<&mut Dropout>,
) -> Result<Var> {
    let h = encode_nodes(tape, vars, features, config, dropout)?;
    let z = tape.mean_rows(h);
    if config.fusion_divide_by_valid && features.valid_count > 0 {
        let k = features.weights.rows() as f64;
        Ok(tape.scale(z, k / features.valid_count as f64))
    } else {
        Ok(z)
    }
}

/// Structure-recovery target: `w(v_i, v_j) / max(1, weighted degree of v_i)`
/// for the real nodes in canonical order, zero on the diagonal.
pub fn structure_target(graph: &GraphInstance, features: &GraphFeatures) -> Matrix {
    let n = features.valid_count;
    let mut t = Matrix::zeros(n, n);
    for (i, &v) in features.order.iter().enumerate() {
        let denom = graph.weighted_degree(v).max(1.0);
        for (j, &u) in features.order.iter().enumerate() {
            if i != j {
                t[(i, j)] = graph.weight(v, u) / denom;
            }
        }
    }
    t
}

/// Unsupervised loss of one graph: attribute reconstruction MSE over real
/// nodes (skipped without attributes) plus the MSE between pairwise cosine
/// similarities of final node states and the structure target over distinct
/// real node pairs.
pub fn pretrain_loss_on_tape(
    tape: &mut Tape,
    vars: &EncoderVars,
    graph: &GraphInstance,
    features: &GraphFeatures,
    config: &EncoderConfig,
    dropout: Option<&mut Dropout>,
) -> Result<Var> {
    let n = features.valid_count;
    let h = encode_nodes(tape, vars, features, config, dropout)?;
    let real = tape.slice_rows(h, 0, n)?;
    let mut terms = Vec::new();

    if let (Some(x), Some(map)) = (&features.attributes, vars.attribute_reconstruction) {
        let d_x = x.cols();
        let target = Matrix::from_vec(n, d_x, x.data()[..n * d_x].to_vec())?;
        let target = tape.constant(target);
        let rec = tape.matmul(real, map)?;
        let diff = tape.sub(rec, target)?;
        let sq = tape.square(diff);
        let total = tape.sum(sq);
        terms.push(tape.scale(total, 1.0 / (n * d_x).max(1) as f64));
    }

    if n > 1 {
        let unit = tape.row_normalize(real);
        let cos = tape.matmul_t(unit, unit)?;
        let target = tape.constant(structure_target(graph, features));
        let diff = tape.sub(cos, target)?;
        let mut off_diagonal = Matrix::filled(n, n, 1.0);
        for i in 0..n {
            off_diagonal[(i, i)] = 0.0;
        }
        let off_diagonal = tape.constant(off_diagonal);
        let diff = tape.mul(diff, off_diagonal)?;
        let sq = tape.square(diff);
        let total = tape.sum(sq);
        terms.push(tape.scale(total, 1.0 / (n * (n - 1)) as f64));
    }

    let mut loss = match terms.first() {
        Some(&t) => t,
        None => {
            let zero = tape.constant(Matrix::scalar(0.0));
            // Keep the loss connected to the parameters so backward is valid.
            let s = tape.sum(real);
            let s = tape.scale(s, 0.0);
            return tape.add(s, zero);
        }
    };
    for &t in &terms[1..] {
        loss = tape.add(loss, t)?;
    }
    Ok(loss)
}

/// Mean pre-training loss over a batch of graphs.
pub fn pretrain_losses(
    tape: &mut Tape,
    vars: &EncoderVars,
    batch: &[(&GraphInstance, &GraphFeatures)],
    config: &EncoderConfig,
    mut dropout: Option<&mut Dropout>,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty pre-training batch".into()));
    }
    let mut total: Option<Var> = None;
    for &(g, f) in batch {
        let l = pretrain_loss_on_tape(tape, vars, g, f, config, dropout.as_deref_mut())?;
        total = Some(match total {
            Some(t) => tape.add(t, l)?,
            None => l,
        });
    }
    Ok(tape.scale(total.expect("non-empty batch"), 1.0 / batch.len() as f64))
}
