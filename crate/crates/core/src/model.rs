//! A trained or freshly initialized CDiff model: network, weights, time
//! codec and noise schedule.

use crate::diffusion::{loss_graph, CDiffNet, LossNoise, TrainingExample};
use crate::encoder::{ContextEmbedding, EncodedContext};
use crate::error::{Error, Result};
use crate::neural::{Gradients, Graph, ModelConfig, ParamStore};
use crate::schedule::{cosine_schedule, DiffusionSchedule};
use crate::sequences::EventSequence;
use crate::transform::TimeCodec;

#[derive(Debug, Clone)]
pub struct CDiffModel {
    pub net: CDiffNet,
    pub params: ParamStore,
    pub codec: TimeCodec,
    pub schedule: DiffusionSchedule,
    /// Events generated per round when forecasting into an interval.
    pub interval_n: usize,
}

impl CDiffModel {
    pub fn new(config: ModelConfig, codec: TimeCodec) -> Result<Self> {
        let mut params = ParamStore::new();
        let net = CDiffNet::new(&config, &mut params)?;
        let schedule = cosine_schedule(config.steps)?;
        Ok(Self {
            interval_n: config.horizon,
            net,
            params,
            codec,
            schedule,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.net.config
    }

    pub fn embed_context(&self, ctx: &EventSequence) -> Result<ContextEmbedding> {
        if ctx.num_types() != self.config().num_types {
            return Err(Error::Shape(format!(
                "context has K={}, model expects {}",
                ctx.num_types(),
                self.config().num_types
            )));
        }
        self.net
            .encoder
            .embed(&self.params, &EncodedContext::new(ctx, &self.codec)?)
    }

    pub fn loss_value(&self, ex: &TrainingExample, noise: &LossNoise) -> Result<f64> {
        let mut g = Graph::new(&self.params);
        let terms = loss_graph(&mut g, &self.net, &self.schedule, ex, noise)?;
        Ok(g.scalar(terms.total))
    }

    /// Loss and its gradient with respect to every parameter.
    pub fn loss_and_grad(
        &self,
        ex: &TrainingExample,
        noise: &LossNoise,
    ) -> Result<(f64, Gradients)> {
        let mut g = Graph::new(&self.params);
        let terms = loss_graph(&mut g, &self.net, &self.schedule, ex, noise)?;
        let loss = g.scalar(terms.total);
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss {loss}")));
        }
        Ok((loss, g.backward(terms.total)?))
    }
}
