//! Self-attention over spatial positions.
//!
//! Query, key and value are 1×1 convolutions of the input. The attention map
//! `softmax(queryᵀ · key)` has one row per output position and one column per
//! key position; each value channel is re-weighted by it, projected by a
//! final 1×1 convolution, scaled by the learnable gain γ and added back to
//! the input. γ starts at zero, so a fresh layer is the identity.

use super::conv::{conv2d, Conv, ConvSpec};
use super::{join, Ctx, Init, ParamDecl};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

/// Query/key width for `channels` input channels: `channels / 8`, at least 1.
pub fn attention_channels(channels: usize) -> usize {
    (channels / 8).max(1)
}

/// Tape handles for one attention layer's parameters.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub query: (Var, Var),
    pub key: (Var, Var),
    pub value: (Var, Var),
    pub output: (Var, Var),
    pub gamma: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionOutput {
    pub out: Var,
    /// `[N, HW, HW]`; row `i` holds the weights output position `i` puts on
    /// every key position.
    pub map: Var,
}

pub fn self_attention(tape: &mut Tape, x: Var, p: &AttentionVars) -> Result<AttentionOutput> {
    let sx = tape.shape(x).to_vec();
    if sx.len() != 4 {
        return Err(Error::dim("self_attention", format!("input {sx:?}")));
    }
    let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
    let ck = attention_channels(c);
    let hw = h * w;
    let qk_spec = ConvSpec::same(c, ck, 1)?;
    let cc_spec = ConvSpec::same(c, c, 1)?;
    let q = conv2d(tape, x, &qk_spec, p.query.0, Some(p.query.1))?;
    let k = conv2d(tape, x, &qk_spec, p.key.0, Some(p.key.1))?;
    let v = conv2d(tape, x, &cc_spec, p.value.0, Some(p.value.1))?;
    let q = tape.reshape(q, vec![n, ck, hw])?;
    let k = tape.reshape(k, vec![n, ck, hw])?;
    let v = tape.reshape(v, vec![n, c, hw])?;
    let energy = tape.batch_matmul(q, k, true, false)?;
    let map = tape.softmax(energy, 2)?;
    let mixed = tape.batch_matmul(v, map, false, true)?;
    let mixed = tape.reshape(mixed, vec![n, c, h, w])?;
    let projected = conv2d(tape, mixed, &cc_spec, p.output.0, Some(p.output.1))?;
    let scaled = tape.mul_scalar_var(projected, p.gamma)?;
    let out = tape.add(x, scaled)?;
    Ok(AttentionOutput { out, map })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub prefix: String,
    pub channels: usize,
}

impl Attention {
    pub fn new(prefix: impl Into<String>, channels: usize) -> Self {
        Attention {
            prefix: prefix.into(),
            channels,
        }
    }

    fn convs(&self) -> Result<[Conv; 4]> {
        let c = self.channels;
        let ck = attention_channels(c);
        Ok([
            Conv::new(join(&self.prefix, "query"), ConvSpec::same(c, ck, 1)?),
            Conv::new(join(&self.prefix, "key"), ConvSpec::same(c, ck, 1)?),
            Conv::new(join(&self.prefix, "value"), ConvSpec::same(c, c, 1)?),
            Conv::new(join(&self.prefix, "output"), ConvSpec::same(c, c, 1)?),
        ])
    }

    pub fn declare(&self, out: &mut Vec<ParamDecl>, std: f64) -> Result<()> {
        for conv in self.convs()? {
            conv.declare(out, std);
        }
        out.push(ParamDecl::param(join(&self.prefix, "gamma"), vec![1], Init::Zeros));
        Ok(())
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<AttentionOutput> {
        let pair = |ctx: &Ctx<'_>, name: &str| -> Result<(Var, Var)> {
            let base = join(&self.prefix, name);
            Ok((ctx.var(&join(&base, "w"))?, ctx.var(&join(&base, "b"))?))
        };
        let vars = AttentionVars {
            query: pair(ctx, "query")?,
            key: pair(ctx, "key")?,
            value: pair(ctx, "value")?,
            output: pair(ctx, "output")?,
            gamma: ctx.var(&join(&self.prefix, "gamma"))?,
        };
        self_attention(ctx.tape, x, &vars)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_vec, rng_from_seed};
    use crate::tensor::Tensor;

    fn random_vars(tape: &mut Tape, c: usize, gamma: f64, seed: u64) -> AttentionVars {
        let mut rng = rng_from_seed(seed);
        let ck = attention_channels(c);
        let mut t = |shape: Vec<usize>| {
            let n = shape.iter().product();
            tape.constant(Tensor::new(shape, normal_vec(&mut rng, n)).unwrap())
        };
        let query = (t(vec![ck, c, 1, 1]), t(vec![ck]));
        let key = (t(vec![ck, c, 1, 1]), t(vec![ck]));
        let value = (t(vec![c, c, 1, 1]), t(vec![c]));
        let output = (t(vec![c, c, 1, 1]), t(vec![c]));
        let gamma = tape.constant(Tensor::scalar(gamma));
        AttentionVars { query, key, value, output, gamma }
    }

    #[test]
    fn channel_rule() {
        assert_eq!(attention_channels(4), 1);
        assert_eq!(attention_channels(16), 2);
        assert_eq!(attention_channels(63), 7);
    }

    #[test]
    fn zero_gamma_is_exact_identity() {
        let mut tape = Tape::new();
        let mut rng = rng_from_seed(5);
        let data = normal_vec(&mut rng, 2 * 8 * 3 * 3);
        let x = tape.constant(Tensor::new(vec![2, 8, 3, 3], data.clone()).unwrap());
        let vars = random_vars(&mut tape, 8, 0.0, 9);
        let out = self_attention(&mut tape, x, &vars).unwrap();
        assert_eq!(tape.data(out.out), data.as_slice());
    }

    #[test]
    fn attention_rows_are_distributions() {
        let mut tape = Tape::new();
        let mut rng = rng_from_seed(6);
        let x = tape.constant(Tensor::new(vec![1, 4, 3, 3], normal_vec(&mut rng, 36)).unwrap());
        let vars = random_vars(&mut tape, 4, 0.5, 10);
        let out = self_attention(&mut tape, x, &vars).unwrap();
        assert_eq!(tape.shape(out.map), &[1, 9, 9]);
        for row in tape.data(out.map).chunks(9) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        assert_eq!(tape.shape(out.out), &[1, 4, 3, 3]);
    }
}
