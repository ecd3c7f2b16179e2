//! Cross-diffusion over (transformed time, event type) sequences.
//!
//! Times follow a Gaussian forward process, types a uniform-noise
//! multinomial one. The reverse process couples the two: the type denoiser
//! predicts `e_0` from `(x_t, e_t)` and the result is mixed with the forward
//! kernel; the time denoiser predicts the injected noise from `x_t` and the
//! freshly sampled types.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::encoder::{one_hot, ContextEmbedding, ContextVars, EncodedContext, HistoryEncoder};
use crate::error::{Error, Result};
use crate::model::CDiffModel;
use crate::neural::{
    encoding_matrix, DenoiseOrder, Graph, LayerNorm, Linear, ModelConfig, ParamId, ParamStore,
    TransformerBlock, Var,
};
use crate::rng::seeded;
use crate::schedule::DiffusionSchedule;
use crate::sequences::ForecastTask;
use crate::transform::TimeCodec;

/// `(x_t, e_t)` at diffusion step `t`. Types are stored as indices; see
/// [`NoisyState::one_hot`].
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyState {
    pub x: Vec<f64>,
    pub e: Vec<usize>,
    pub t: usize,
    pub num_types: usize,
}

impl NoisyState {
    pub fn one_hot(&self) -> Array2<f64> {
        one_hot(&self.e, self.num_types)
    }
}

/// Per-position categorical distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct TypeDistribution {
    pub probs: Array2<f64>,
}

impl TypeDistribution {
    pub fn new(probs: Array2<f64>) -> Result<Self> {
        for (i, row) in probs.rows().into_iter().enumerate() {
            let sum = row.sum();
            if (sum - 1.0).abs() > 1e-9 || row.iter().any(|&p| p.is_nan() || p < 0.0) {
                return Err(Error::Domain(format!(
                    "row {i} is not a distribution (sum {sum})"
                )));
            }
        }
        Ok(Self { probs })
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.probs.row(i).to_vec()
    }

    pub fn len(&self) -> usize {
        self.probs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.nrows() == 0
    }
}

/// Inverse-CDF draw from `probs` with a uniform `u` in [0, 1).
pub fn sample_categorical(probs: &[f64], u: f64) -> usize {
    let total: f64 = probs.iter().sum();
    let target = u * total;
    let mut acc = 0.0;
    for (k, &p) in probs.iter().enumerate() {
        acc += p;
        if target < acc {
            return k;
        }
    }
    // Rounding can leave `target` at the very top; take the last non-zero.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

pub fn forward_time_with(x0: &[f64], eps: &[f64], t: usize, sched: &DiffusionSchedule) -> Vec<f64> {
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect()
}

/// Draws `x_t ~ q(x_t | x_0)`; returns `(x_t, eps)`.
pub fn forward_time(
    x0: &[f64],
    t: usize,
    sched: &DiffusionSchedule,
    rng: &mut impl Rng,
) -> Result<(Vec<f64>, Vec<f64>)> {
    sched.check_step(t)?;
    let eps: Vec<f64> = (0..x0.len()).map(|_| rng.sample(StandardNormal)).collect();
    Ok((forward_time_with(x0, &eps, t, sched), eps))
}

/// Row distribution of `q(e_t | e_0)`: `alpha_bar_t * e_0 + (1 - alpha_bar_t) / K`.
pub fn forward_type_marginal(
    e0: usize,
    num_types: usize,
    t: usize,
    sched: &DiffusionSchedule,
) -> Vec<f64> {
    let ab = sched.alpha_bar(t);
    let floor = (1.0 - ab) / num_types as f64;
    (0..num_types)
        .map(|k| if k == e0 { ab + floor } else { floor })
        .collect()
}

pub fn forward_type_with(
    e0: &[usize],
    num_types: usize,
    t: usize,
    sched: &DiffusionSchedule,
    uniforms: &[f64],
) -> Vec<usize> {
    e0.iter()
        .zip(uniforms)
        .map(|(&k, &u)| sample_categorical(&forward_type_marginal(k, num_types, t, sched), u))
        .collect()
}

/// Draws `e_t ~ q(e_t | e_0)` per position.
pub fn forward_type(
    e0: &[usize],
    num_types: usize,
    t: usize,
    sched: &DiffusionSchedule,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    sched.check_step(t)?;
    if let Some(&k) = e0.iter().find(|&&k| k >= num_types) {
        return Err(Error::Domain(format!("type {k} outside [0, {num_types})")));
    }
    let u: Vec<f64> = (0..e0.len()).map(|_| rng.random::<f64>()).collect();
    Ok(forward_type_with(e0, num_types, t, sched, &u))
}

/// Weighted-sum combination for a reverse jump from `t` to `t_next < t`:
/// `[a e_t + (1-a)/K] * [abar_next e_hat0 + (1-abar_next)/K]`, normalized,
/// with `a = abar_t / abar_next`. For `t_next = t - 1`, `a = alpha_t`.
pub fn type_mixture_between(
    e_t: usize,
    e_hat0: &[f64],
    t: usize,
    t_next: usize,
    sched: &DiffusionSchedule,
) -> Result<Vec<f64>> {
    let k = e_hat0.len();
    if e_t >= k {
        return Err(Error::Domain(format!("type {e_t} outside [0, {k})")));
    }
    let sum: f64 = e_hat0.iter().sum();
    if (sum - 1.0).abs() > 1e-6 || e_hat0.iter().any(|&p| p < 0.0) {
        return Err(Error::Domain(format!(
            "predicted e_0 row is not a distribution (sum {sum})"
        )));
    }
    if t_next >= t || t > sched.steps() {
        return Err(Error::InvalidArgument(format!(
            "invalid jump {t} -> {t_next}"
        )));
    }
    let ab_next = sched.alpha_bar(t_next);
    let a = sched.alpha_bar(t) / ab_next;
    let kf = k as f64;
    let mut theta: Vec<f64> = e_hat0
        .iter()
        .enumerate()
        .map(|(j, &p)| {
            let kernel = if j == e_t { a } else { 0.0 } + (1.0 - a) / kf;
            kernel * (ab_next * p + (1.0 - ab_next) / kf)
        })
        .collect();
    let norm: f64 = theta.iter().sum();
    theta.iter_mut().for_each(|v| *v /= norm);
    Ok(theta)
}

/// `pi_theta` for one position at `2 <= t <= T`; with the true one-hot
/// `e_0` this is the posterior `q(e_{t-1} | e_t, e_0)`.
pub fn type_mixture(
    e_t: usize,
    e_hat0: &[f64],
    t: usize,
    sched: &DiffusionSchedule,
) -> Result<Vec<f64>> {
    if t < 2 || t > sched.steps() {
        return Err(Error::InvalidArgument(format!(
            "type_mixture needs 2 <= t <= {}, got {t}",
            sched.steps()
        )));
    }
    type_mixture_between(e_t, e_hat0, t, t - 1, sched)
}

/// Posterior rows `q(e_{t-1} | e_t, e_0)` for a whole sequence (any t >= 1).
pub fn type_posterior(
    e_t: &[usize],
    e0: &[usize],
    num_types: usize,
    t: usize,
    sched: &DiffusionSchedule,
) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((e_t.len(), num_types));
    for (i, (&et, &k)) in e_t.iter().zip(e0).enumerate() {
        let mut target = vec![0.0; num_types];
        target[k] = 1.0;
        let row = type_mixture_between(et, &target, t, t - 1, sched)?;
        out.row_mut(i).assign(&ndarray::Array1::from(row));
    }
    Ok(out)
}

/// `mu = (x_t - beta_t eps / sqrt(1 - abar_t)) / sqrt(alpha_t)`.
pub fn mu_from_eps(x_t: &[f64], eps: &[f64], t: usize, sched: &DiffusionSchedule) -> Vec<f64> {
    let beta = sched.beta(t);
    let coef = beta / (1.0 - sched.alpha_bar(t)).sqrt();
    let inv = 1.0 / sched.alpha(t).sqrt();
    x_t.iter()
        .zip(eps)
        .map(|(x, e)| (x - coef * e) * inv)
        .collect()
}

pub fn kl_divergence(q: &[f64], p: &[f64]) -> f64 {
    q.iter()
        .zip(p)
        .filter(|(q, _)| **q > 0.0)
        .map(|(q, p)| q * (q / p).ln())
        .sum()
}

/// Transformer denoiser shared by the type and time heads. Tokens are
/// `[type embedding | enc(x) | enc(t)]` plus an encoding of `i + y_N`.
#[derive(Debug, Clone)]
pub struct Denoiser {
    type_embed: ParamId,
    type_width: usize,
    time_width: usize,
    step_width: usize,
    layers: Vec<(TransformerBlock, TransformerBlock)>,
    norm: LayerNorm,
    head: Linear,
    num_types: usize,
}

impl Denoiser {
    fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: &ModelConfig,
        type_width: usize,
        time_width: usize,
        out: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let width = cfg.width();
        let type_embed = store.add_uniform(
            format!("{name}.type_embed"),
            cfg.num_types,
            type_width,
            cfg.num_types,
            rng,
        );
        let layers = (0..cfg.layers)
            .map(|l| {
                let sa = TransformerBlock::new(
                    store,
                    &format!("{name}.layer{l}.self"),
                    width,
                    cfg.heads,
                    cfg.ff,
                    rng,
                )?;
                let ca = TransformerBlock::new(
                    store,
                    &format!("{name}.layer{l}.cross"),
                    width,
                    cfg.heads,
                    cfg.ff,
                    rng,
                )?;
                Ok((sa, ca))
            })
            .collect::<Result<_>>()?;
        let norm = LayerNorm::new(store, &format!("{name}.norm"), width);
        let head = Linear::new(store, &format!("{name}.head"), width, out, rng);
        Ok(Self {
            type_embed,
            type_width,
            time_width,
            step_width: width - type_width - time_width,
            layers,
            norm,
            head,
            num_types: cfg.num_types,
        })
    }

    pub fn head(&self) -> &Linear {
        &self.head
    }

    /// `x = None` or `types = None` feeds zeros in place of that modality.
    pub fn forward(
        &self,
        g: &mut Graph,
        n: usize,
        x: Option<&[f64]>,
        types: Option<&[usize]>,
        t: usize,
        ctx: ContextVars,
    ) -> Result<Var> {
        let type_part = match types {
            Some(e) => {
                if e.len() != n {
                    return Err(Error::Shape(format!("{} types for horizon {n}", e.len())));
                }
                let oh = g.input(one_hot(e, self.num_types));
                let table = g.param(self.type_embed);
                g.matmul(oh, table)?
            }
            None => g.input(Array2::zeros((n, self.type_width))),
        };
        let time_part = match x {
            Some(x) => {
                if x.len() != n {
                    return Err(Error::Shape(format!("{} times for horizon {n}", x.len())));
                }
                g.input(encoding_matrix(x, self.time_width)?)
            }
            None => g.input(Array2::zeros((n, self.time_width))),
        };
        let step_part = g.input(encoding_matrix(&vec![t as f64; n], self.step_width)?);
        let h = g.concat_cols(&[type_part, time_part, step_part])?;
        let index: Vec<f64> = (1..=n).map(|i| i as f64 + ctx.last_arrival).collect();
        let width = self.type_width + self.time_width + self.step_width;
        let pos = g.input(encoding_matrix(&index, width)?);
        let mut h = g.add(h, pos)?;
        for (sa, ca) in &self.layers {
            h = sa.forward(g, h, None)?;
            h = ca.forward(g, h, Some(ctx.tokens))?;
        }
        let h = self.norm.forward(g, h)?;
        self.head.forward(g, h)
    }
}

/// Encoder `f`, type denoiser `phi` and time denoiser `eps`.
#[derive(Debug, Clone)]
pub struct CDiffNet {
    pub config: ModelConfig,
    pub encoder: HistoryEncoder,
    pub type_net: Denoiser,
    pub time_net: Denoiser,
}

impl CDiffNet {
    /// Registers all parameters in `store`, initialized from `config.seed`.
    pub fn new(config: &ModelConfig, store: &mut ParamStore) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(config.seed);
        let m = config.embed;
        let encoder = HistoryEncoder::new(store, config, &mut rng)?;
        let type_net = Denoiser::new(store, "phi", config, 2 * m, m, config.num_types, &mut rng)?;
        let time_net = Denoiser::new(store, "eps", config, m, 2 * m, 1, &mut rng)?;
        Ok(Self {
            config: config.clone(),
            encoder,
            type_net,
            time_net,
        })
    }

    pub fn order(&self) -> DenoiseOrder {
        self.config.order
    }

    /// Logits of `e_hat_0`. Ignores `x_t` in independent mode.
    pub fn e0_logits(
        &self,
        g: &mut Graph,
        x_t: &[f64],
        e_t: &[usize],
        t: usize,
        ctx: ContextVars,
    ) -> Result<Var> {
        let x = (self.order() != DenoiseOrder::Independent).then_some(x_t);
        self.type_net.forward(g, e_t.len(), x, Some(e_t), t, ctx)
    }

    /// Predicted noise, `n x 1`. Ignores the types in independent mode.
    pub fn eps(
        &self,
        g: &mut Graph,
        x_t: &[f64],
        e_cond: &[usize],
        t: usize,
        ctx: ContextVars,
    ) -> Result<Var> {
        let e = (self.order() != DenoiseOrder::Independent).then_some(e_cond);
        self.time_net.forward(g, x_t.len(), Some(x_t), e, t, ctx)
    }
}

/// Frozen randomness for one loss evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct LossNoise {
    pub t: usize,
    pub eps: Vec<f64>,
    /// Uniforms for drawing `e_t ~ q(e_t | e_0)`.
    pub forward_u: Vec<f64>,
    /// Uniforms for the cross draw of `e_{t-1}` (type-first orders).
    pub cross_u: Vec<f64>,
    /// Normals for the cross draw of `x_{t-1}` (time-first order).
    pub cross_z: Vec<f64>,
}

impl LossNoise {
    /// Draws `t ~ Uniform{1..T}` and all per-position noise.
    pub fn draw(n: usize, sched: &DiffusionSchedule, rng: &mut impl Rng) -> Self {
        let t = rng.random_range(1..=sched.steps());
        Self::draw_at(t, n, rng)
    }

    pub fn draw_at(t: usize, n: usize, rng: &mut impl Rng) -> Self {
        Self {
            t,
            eps: (0..n).map(|_| rng.sample(StandardNormal)).collect(),
            forward_u: (0..n).map(|_| rng.random::<f64>()).collect(),
            cross_u: (0..n).map(|_| rng.random::<f64>()).collect(),
            cross_z: (0..n).map(|_| rng.sample(StandardNormal)).collect(),
        }
    }
}

/// A forecast task with the time codec already applied.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub context: EncodedContext,
    pub x0: Vec<f64>,
    pub e0: Vec<usize>,
}

impl TrainingExample {
    pub fn new(task: &ForecastTask, codec: &TimeCodec) -> Result<Self> {
        Ok(Self {
            context: EncodedContext::new(&task.context, codec)?,
            x0: codec.encode_all(task.target.deltas())?,
            e0: task.target.types().to_vec(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct LossTerms {
    pub total: Var,
    pub type_term: Var,
    pub time_term: Var,
    /// What the first denoiser handed to the second.
    pub cross: CrossSample,
}

/// The sample one denoiser passes to the other during training: `e_{t-1}`
/// for the type-first orders, `x_{t-1}` for time-first. Backpropagation
/// treats it as a constant.
#[derive(Debug, Clone, PartialEq)]
pub enum CrossSample {
    Types(Vec<usize>),
    Times(Vec<f64>),
}

/// Type loss as a graph: KL to the posterior for `t >= 2`, cross-entropy of
/// the true types at `t = 1`. Returns the loss and the `pi_theta` rows.
#[allow(clippy::too_many_arguments)]
fn type_term_graph(
    g: &mut Graph,
    net: &CDiffNet,
    sched: &DiffusionSchedule,
    e0: &[usize],
    e_t: &[usize],
    x_in: &[f64],
    t: usize,
    ctx: ContextVars,
) -> Result<(Var, Array2<f64>)> {
    let k = net.config.num_types;
    let kf = k as f64;
    let logits = net.e0_logits(g, x_in, e_t, t, ctx)?;
    let e_hat0 = g.softmax(logits);
    let ab_prev = sched.alpha_bar(t - 1);
    let scaled = g.scale(e_hat0, ab_prev);
    let second = g.add_scalar(scaled, (1.0 - ab_prev) / kf);
    let alpha = sched.alpha(t);
    let kernel = one_hot(e_t, k).mapv(|v| alpha * v + (1.0 - alpha) / kf);
    let kernel = g.input(kernel);
    let theta = g.mul(kernel, second)?;
    let pi = g.row_normalize(theta);
    let log_pi = g.log(pi);
    let pi_values = g.value(pi).clone();
    let loss = if t >= 2 {
        let post = type_posterior(e_t, e0, k, t, sched)?;
        let entropy_part: f64 = post.iter().filter(|&&q| q > 0.0).map(|q| q * q.ln()).sum();
        let post = g.input(post);
        let cross = g.mul(post, log_pi)?;
        let cross = g.sum(cross);
        let neg = g.scale(cross, -1.0);
        g.add_scalar(neg, entropy_part)
    } else {
        let target = g.input(one_hot(e0, k));
        let picked = g.mul(target, log_pi)?;
        let picked = g.sum(picked);
        g.scale(picked, -1.0)
    };
    Ok((loss, pi_values))
}

/// `||eps - eps_theta||^2` as a graph; also returns the predicted noise.
fn time_term_graph(
    g: &mut Graph,
    net: &CDiffNet,
    x_t: &[f64],
    eps: &[f64],
    e_cond: &[usize],
    t: usize,
    ctx: ContextVars,
) -> Result<(Var, Vec<f64>)> {
    let pred = net.eps(g, x_t, e_cond, t, ctx)?;
    let pred_values = g.value(pred).column(0).to_vec();
    let target = g.input(Array2::from_shape_vec((eps.len(), 1), eps.to_vec()).expect("column"));
    let diff = g.sub(pred, target)?;
    let sq = g.mul(diff, diff)?;
    Ok((g.sum(sq), pred_values))
}

/// Single-timestep objective for one example under frozen noise.
pub fn loss_graph(
    g: &mut Graph,
    net: &CDiffNet,
    sched: &DiffusionSchedule,
    ex: &TrainingExample,
    noise: &LossNoise,
) -> Result<LossTerms> {
    loss_graph_with(g, net, sched, ex, noise, None)
}

/// As [`loss_graph`], but with the cross sample supplied instead of drawn.
pub fn loss_graph_with(
    g: &mut Graph,
    net: &CDiffNet,
    sched: &DiffusionSchedule,
    ex: &TrainingExample,
    noise: &LossNoise,
    cross: Option<&CrossSample>,
) -> Result<LossTerms> {
    let n = net.config.horizon;
    if ex.x0.len() != n || ex.e0.len() != n {
        return Err(Error::Shape(format!(
            "target length {} does not match horizon {n}",
            ex.x0.len()
        )));
    }
    let t = noise.t;
    sched.check_step(t)?;
    let k = net.config.num_types;
    let ctx = net.encoder.forward(g, &ex.context)?;
    let x_t = forward_time_with(&ex.x0, &noise.eps, t, sched);
    let e_t = forward_type_with(&ex.e0, k, t, sched, &noise.forward_u);

    let (type_term, time_term, cross) = match net.order() {
        DenoiseOrder::TypeFirst | DenoiseOrder::Independent => {
            let (type_term, pi) = type_term_graph(g, net, sched, &ex.e0, &e_t, &x_t, t, ctx)?;
            let e_prev = match cross {
                Some(CrossSample::Types(e)) => e.clone(),
                Some(CrossSample::Times(_)) => {
                    return Err(Error::InvalidArgument(
                        "expected a type cross sample".into(),
                    ))
                }
                None => pi
                    .rows()
                    .into_iter()
                    .zip(&noise.cross_u)
                    .map(|(row, &u)| sample_categorical(row.as_slice().expect("row"), u))
                    .collect(),
            };
            let (time_term, _) = time_term_graph(g, net, &x_t, &noise.eps, &e_prev, t, ctx)?;
            (type_term, time_term, CrossSample::Types(e_prev))
        }
        DenoiseOrder::TimeFirst => {
            let (time_term, eps_hat) = time_term_graph(g, net, &x_t, &noise.eps, &e_t, t, ctx)?;
            let x_prev = match cross {
                Some(CrossSample::Times(x)) => x.clone(),
                Some(CrossSample::Types(_)) => {
                    return Err(Error::InvalidArgument(
                        "expected a time cross sample".into(),
                    ))
                }
                None => {
                    let mut x_prev = mu_from_eps(&x_t, &eps_hat, t, sched);
                    if t > 1 {
                        let sd = sched.beta(t).sqrt();
                        x_prev
                            .iter_mut()
                            .zip(&noise.cross_z)
                            .for_each(|(x, z)| *x += sd * z);
                    }
                    x_prev
                }
            };
            let (type_term, _) = type_term_graph(g, net, sched, &ex.e0, &e_t, &x_prev, t, ctx)?;
            (type_term, time_term, CrossSample::Times(x_prev))
        }
    };
    let total = g.add(type_term, time_term)?;
    Ok(LossTerms {
        total,
        type_term,
        time_term,
        cross,
    })
}

fn check_state(model: &CDiffModel, x_t: &[f64], e: &[usize], t: usize) -> Result<()> {
    model.schedule.check_step(t)?;
    if x_t.len() != e.len() {
        return Err(Error::Shape(format!(
            "{} times but {} types",
            x_t.len(),
            e.len()
        )));
    }
    if let Some(&k) = e.iter().find(|&&k| k >= model.config().num_types) {
        return Err(Error::Shape(format!("type {k} outside the model's K")));
    }
    Ok(())
}

/// `e_hat_0 = softmax(phi(e_t, x_t, t, s_c))`.
pub fn predict_e0(
    model: &CDiffModel,
    x_t: &[f64],
    e_t: &[usize],
    t: usize,
    ctx: &ContextEmbedding,
) -> Result<TypeDistribution> {
    check_state(model, x_t, e_t, t)?;
    let mut g = Graph::new(&model.params);
    let ctx = ctx.to_vars(&mut g);
    let logits = model.net.e0_logits(&mut g, x_t, e_t, t, ctx)?;
    let p = g.softmax(logits);
    TypeDistribution::new(g.value(p).clone())
}

/// `eps_theta(x_t, e, t, s_c)`.
pub fn predict_eps(
    model: &CDiffModel,
    x_t: &[f64],
    e_cond: &[usize],
    t: usize,
    ctx: &ContextEmbedding,
) -> Result<Vec<f64>> {
    check_state(model, x_t, e_cond, t)?;
    let mut g = Graph::new(&model.params);
    let ctx = ctx.to_vars(&mut g);
    let pred = model.net.eps(&mut g, x_t, e_cond, t, ctx)?;
    Ok(g.value(pred).column(0).to_vec())
}

/// Reverse-step mean `mu_theta(x_t, e_{t-1}, t, s_c)`.
pub fn denoise_mu(
    model: &CDiffModel,
    x_t: &[f64],
    e_prev: &[usize],
    t: usize,
    ctx: &ContextEmbedding,
) -> Result<Vec<f64>> {
    let eps = predict_eps(model, x_t, e_prev, t, ctx)?;
    Ok(mu_from_eps(x_t, &eps, t, &model.schedule))
}

/// KL between the true posterior and `pi_theta`, summed over positions.
pub fn loss_type(
    model: &CDiffModel,
    e0: &[usize],
    e_t: &[usize],
    x_t: &[f64],
    t: usize,
    ctx: &ContextEmbedding,
) -> Result<f64> {
    check_state(model, x_t, e_t, t)?;
    if t < 2 {
        return Err(Error::InvalidArgument("loss_type needs t >= 2".into()));
    }
    let mut g = Graph::new(&model.params);
    let ctx = ctx.to_vars(&mut g);
    let (loss, _) = type_term_graph(&mut g, &model.net, &model.schedule, e0, e_t, x_t, t, ctx)?;
    Ok(g.scalar(loss))
}

/// Noise-prediction error at step `t` with a fresh draw of `eps`.
pub fn loss_time(
    model: &CDiffModel,
    x0: &[f64],
    t: usize,
    e_prev: &[usize],
    ctx: &ContextEmbedding,
    rng: &mut impl Rng,
) -> Result<f64> {
    check_state(model, x0, e_prev, t)?;
    let (x_t, eps) = forward_time(x0, t, &model.schedule, rng)?;
    let mut g = Graph::new(&model.params);
    let ctx = ctx.to_vars(&mut g);
    let (loss, _) = time_term_graph(&mut g, &model.net, &x_t, &eps, e_prev, t, ctx)?;
    Ok(g.scalar(loss))
}

/// Full objective for one task with `t ~ Uniform{1..T}`.
pub fn loss_total(model: &CDiffModel, task: &ForecastTask, rng: &mut impl Rng) -> Result<f64> {
    if task.horizon_n() != Some(model.config().horizon) {
        return Err(Error::InvalidArgument(format!(
            "task horizon {:?} does not match model horizon {}",
            task.horizon_n(),
            model.config().horizon
        )));
    }
    let ex = TrainingExample::new(task, &model.codec)?;
    let noise = LossNoise::draw(ex.x0.len(), &model.schedule, rng);
    model.loss_value(&ex, &noise)
}
