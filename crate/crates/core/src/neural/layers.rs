use ndarray::Array2;
use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

/// Sinusoidal encoding of a scalar: component `i` (1-based) is
/// `cos(y / 10000^((i-1)/D))` for odd `i` and `sin(y / 10000^(i/D))` for even `i`.
pub fn positional_encoding(y: f64, dim: usize) -> Result<Vec<f64>> {
    if dim < 2 || !dim.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "positional encoding width {dim} must be even and >= 2"
        )));
    }
    Ok((1..=dim)
        .map(|i| {
            if i % 2 == 1 {
                (y / 10000f64.powf((i - 1) as f64 / dim as f64)).cos()
            } else {
                (y / 10000f64.powf(i as f64 / dim as f64)).sin()
            }
        })
        .collect())
}

/// One encoding row per value.
pub fn encoding_matrix(values: &[f64], dim: usize) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((values.len(), dim));
    for (r, &y) in values.iter().enumerate() {
        for (c, v) in positional_encoding(y, dim)?.into_iter().enumerate() {
            out[[r, c]] = v;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add_uniform(format!("{name}.weight"), fan_in, fan_out, fan_in, rng);
        let bias = Some(store.add_zeros(format!("{name}.bias"), 1, fan_out));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn without_bias(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add_uniform(format!("{name}.weight"), fan_in, fan_out, fan_in, rng);
        Self {
            weight,
            bias: None,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            gamma: store.add_ones(format!("{name}.gamma"), 1, width),
            beta: store.add_zeros(format!("{name}.beta"), 1, width),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
    heads: usize,
    width: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(Error::InvalidArgument(format!(
                "width {width} not divisible into {heads} heads"
            )));
        }
        Ok(Self {
            query: Linear::new(store, &format!("{name}.q"), width, width, rng),
            // A key bias only shifts each score row by a constant, which the
            // softmax cancels.
            key: Linear::without_bias(store, &format!("{name}.k"), width, width, rng),
            value: Linear::new(store, &format!("{name}.v"), width, width, rng),
            out: Linear::new(store, &format!("{name}.o"), width, width, rng),
            heads,
            width,
        })
    }

    pub fn out_projection(&self) -> &Linear {
        &self.out
    }

    /// Scaled dot-product attention of `queries` onto `memory`.
    pub fn forward(&self, g: &mut Graph, queries: Var, memory: Var) -> Result<Var> {
        let q = self.query.forward(g, queries)?;
        let k = self.key.forward(g, memory)?;
        let v = self.value.forward(g, memory)?;
        let head_dim = self.width / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * head_dim, head_dim)?;
            let kh = g.slice_cols(k, h * head_dim, head_dim)?;
            let vh = g.slice_cols(v, h * head_dim, head_dim)?;
            let kt = g.transpose(kh);
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, scale);
            let weights = g.softmax(scores);
            heads.push(g.matmul(weights, vh)?);
        }
        let joined = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)?
        };
        self.out.forward(g, joined)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), width, hidden, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, width, rng),
        }
    }

    pub fn down_projection(&self) -> &Linear {
        &self.down
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.up.forward(g, x)?;
        let h = g.gelu(h);
        self.down.forward(g, h)
    }
}

/// Pre-norm block: `x + Attn(LN(x), kv)` then `h + FF(LN(h))`. Attends to
/// itself when `kv` is `None`.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    attn_norm: LayerNorm,
    attn: MultiHeadAttention,
    ff_norm: LayerNorm,
    ff: FeedForward,
    width: usize,
}

impl TransformerBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            attn_norm: LayerNorm::new(store, &format!("{name}.attn_norm"), width),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), width, heads, rng)?,
            ff_norm: LayerNorm::new(store, &format!("{name}.ff_norm"), width),
            ff: FeedForward::new(store, &format!("{name}.ff"), width, hidden, rng),
            width,
        })
    }

    /// The two parameters whose zeroing turns the block into the identity.
    pub fn residual_outputs(&self) -> [&Linear; 2] {
        [self.attn.out_projection(), self.ff.down_projection()]
    }

    pub fn forward(&self, g: &mut Graph, x: Var, kv: Option<Var>) -> Result<Var> {
        if g.shape(x).1 != self.width {
            return Err(Error::Shape(format!(
                "block width {} got input width {}",
                self.width,
                g.shape(x).1
            )));
        }
        if let Some(kv) = kv {
            if g.shape(kv).1 != self.width {
                return Err(Error::Shape(format!(
                    "block width {} got memory width {}",
                    self.width,
                    g.shape(kv).1
                )));
            }
        }
        let normed = self.attn_norm.forward(g, x)?;
        let memory = kv.unwrap_or(normed);
        let attended = self.attn.forward(g, normed, memory)?;
        let h = g.add(x, attended)?;
        let normed = self.ff_norm.forward(g, h)?;
        let fed = self.ff.forward(g, normed)?;
        g.add(h, fed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::gradcheck::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn encoding_at_zero() {
        assert_eq!(
            positional_encoding(0.0, 4).unwrap(),
            vec![1.0, 0.0, 1.0, 0.0]
        );
        assert!(positional_encoding(0.0, 3).is_err());
    }

    #[test]
    fn encoding_first_component_at_pi() {
        let v = positional_encoding(std::f64::consts::PI, 6).unwrap();
        assert!((v[0] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn encoding_is_bounded() {
        for i in -200..200 {
            let y = i as f64 * 7.3;
            assert!(positional_encoding(y, 16)
                .unwrap()
                .iter()
                .all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    fn toy_block(rng: &mut ChaCha8Rng) -> (ParamStore, TransformerBlock) {
        let mut store = ParamStore::new();
        let block = TransformerBlock::new(&mut store, "blk", 8, 2, 12, rng).unwrap();
        (store, block)
    }

    #[test]
    fn zero_residual_branches_give_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (mut store, block) = toy_block(&mut rng);
        for lin in block.residual_outputs() {
            store.get_mut(lin.weight).value.fill(0.0);
            store.get_mut(lin.bias.unwrap()).value.fill(0.0);
        }
        let x = Array2::from_shape_fn((3, 8), |(r, c)| (r * 8 + c) as f64 * 0.1 - 1.0);
        let mem = Array2::from_shape_fn((5, 8), |(r, c)| ((r + c) % 3) as f64);
        let mut g = Graph::new(&store);
        let xv = g.input(x.clone());
        let mv = g.input(mem);
        let out_self = block.forward(&mut g, xv, None).unwrap();
        let out_cross = block.forward(&mut g, xv, Some(mv)).unwrap();
        assert_eq!(g.value(out_self), &x);
        assert_eq!(g.value(out_cross), &x);
    }

    #[test]
    fn output_length_follows_queries() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (store, block) = toy_block(&mut rng);
        let mut g = Graph::new(&store);
        let x = g.input(Array2::ones((2, 8)));
        let mem = g.input(Array2::ones((7, 8)));
        let out = block.forward(&mut g, x, Some(mem)).unwrap();
        assert_eq!(g.shape(out), (2, 8));
        let bad = g.input(Array2::ones((7, 6)));
        assert!(block.forward(&mut g, x, Some(bad)).is_err());
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (mut store, block) = toy_block(&mut rng);
        let x = Array2::from_shape_fn((2, 8), |(r, c)| ((r * 5 + c * 3) % 7) as f64 * 0.3 - 0.9);
        let mem = Array2::from_shape_fn((3, 8), |(r, c)| ((r * 2 + c) % 5) as f64 * 0.25 - 0.5);
        let err = grad_check(
            |g| {
                let xv = g.input(x.clone());
                let mv = g.input(mem.clone());
                let h = block.forward(g, xv, None)?;
                let y = block.forward(g, h, Some(mv))?;
                let sq = g.mul(y, y)?;
                Ok(g.sum(sq))
            },
            &mut store,
        )
        .unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }
}
