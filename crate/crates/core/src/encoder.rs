//! History encoder: maps a variable-length context to `4M`-wide tokens.

use ndarray::{Array1, Array2};
use rand::Rng;

use crate::error::{Error, Result};
use crate::neural::{
    encoding_matrix, Graph, ModelConfig, ParamId, ParamStore, TransformerBlock, Var,
};
use crate::sequences::EventSequence;
use crate::transform::TimeCodec;

/// Context features that do not depend on parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedContext {
    pub types: Vec<usize>,
    /// Codec-transformed deltas.
    pub deltas: Vec<f64>,
    /// Raw arrival times from the start of the context.
    pub arrivals: Vec<f64>,
    pub num_types: usize,
}

impl EncodedContext {
    pub fn new(ctx: &EventSequence, codec: &TimeCodec) -> Result<Self> {
        if ctx.is_empty() {
            return Err(Error::InvalidArgument("context must not be empty".into()));
        }
        Ok(Self {
            types: ctx.types().to_vec(),
            deltas: codec.encode_all(ctx.deltas())?,
            arrivals: ctx.arrival_times(),
            num_types: ctx.num_types(),
        })
    }

    pub fn len(&self) -> usize {
        self.types.len()
    }

    pub fn is_empty(&self) -> bool {
        self.types.is_empty()
    }

    pub fn last_arrival(&self) -> f64 {
        self.arrivals.last().copied().unwrap_or(0.0)
    }
}

/// Encoder output as graph variables, for training.
#[derive(Debug, Clone, Copy)]
pub struct ContextVars {
    pub tokens: Var,
    pub last_arrival: f64,
}

/// Encoder output as plain values, for sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextEmbedding {
    pub tokens: Array2<f64>,
    /// The last token.
    pub summary: Array1<f64>,
    pub last_arrival: f64,
}

impl ContextEmbedding {
    pub fn to_vars(&self, g: &mut Graph) -> ContextVars {
        ContextVars {
            tokens: g.input(self.tokens.clone()),
            last_arrival: self.last_arrival,
        }
    }
}

pub(crate) fn one_hot(types: &[usize], num_types: usize) -> Array2<f64> {
    let mut m = Array2::zeros((types.len(), num_types));
    for (r, &k) in types.iter().enumerate() {
        m[[r, k]] = 1.0;
    }
    m
}

#[derive(Debug, Clone)]
pub struct HistoryEncoder {
    type_embed: ParamId,
    blocks: Vec<TransformerBlock>,
    embed: usize,
    num_types: usize,
}

impl HistoryEncoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let type_embed = store.add_uniform(
            "encoder.type_embed",
            cfg.num_types,
            cfg.embed,
            cfg.num_types,
            rng,
        );
        let blocks = (0..cfg.layers)
            .map(|l| {
                TransformerBlock::new(
                    store,
                    &format!("encoder.block{l}"),
                    cfg.width(),
                    cfg.heads,
                    cfg.ff,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            type_embed,
            blocks,
            embed: cfg.embed,
            num_types: cfg.num_types,
        })
    }

    /// Per event: `[type embedding | enc(delta) | enc(arrival) | enc(index)]`,
    /// then self-attention blocks.
    pub fn forward(&self, g: &mut Graph, ctx: &EncodedContext) -> Result<ContextVars> {
        if ctx.is_empty() {
            return Err(Error::InvalidArgument("context must not be empty".into()));
        }
        if ctx.num_types != self.num_types {
            return Err(Error::Shape(format!(
                "context has K={}, encoder expects {}",
                ctx.num_types, self.num_types
            )));
        }
        let m = self.embed;
        let onehot = g.input(one_hot(&ctx.types, self.num_types));
        let table = g.param(self.type_embed);
        let type_part = g.matmul(onehot, table)?;
        let delta_part = g.input(encoding_matrix(&ctx.deltas, m)?);
        let arrival_part = g.input(encoding_matrix(&ctx.arrivals, m)?);
        let index: Vec<f64> = (1..=ctx.len()).map(|i| i as f64).collect();
        let index_part = g.input(encoding_matrix(&index, m)?);
        let mut h = g.concat_cols(&[type_part, delta_part, arrival_part, index_part])?;
        for block in &self.blocks {
            h = block.forward(g, h, None)?;
        }
        Ok(ContextVars {
            tokens: h,
            last_arrival: ctx.last_arrival(),
        })
    }

    pub fn embed(&self, store: &ParamStore, ctx: &EncodedContext) -> Result<ContextEmbedding> {
        let mut g = Graph::new(store);
        let vars = self.forward(&mut g, ctx)?;
        let tokens = g.value(vars.tokens).clone();
        if tokens.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("context embedding".into()));
        }
        let summary = tokens.row(tokens.nrows() - 1).to_owned();
        Ok(ContextEmbedding {
            tokens,
            summary,
            last_arrival: vars.last_arrival,
        })
    }
}

/// Encodes `ctx` with the given encoder weights.
pub fn encode_history(
    ctx: &EventSequence,
    codec: &TimeCodec,
    encoder: &HistoryEncoder,
    store: &ParamStore,
) -> Result<ContextEmbedding> {
    encoder.embed(store, &EncodedContext::new(ctx, codec)?)
}
