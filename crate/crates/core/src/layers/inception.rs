//! Inception block with a residual connection.
//!
//! Four parallel branches (1×1; 3×3; 5×5; 3×3 max-pool followed by 1×1),
//! each followed by ReLU, are concatenated along channels and added to the
//! input (or to a 1×1 projection of it when channel counts differ).

use super::conv::{conv2d, Conv, ConvSpec};
use super::{join, Ctx, ParamDecl};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

const BRANCH_NAMES: [&str; 4] = ["b1x1", "b3x3", "b5x5", "bpool"];
const BRANCH_KERNELS: [usize; 4] = [1, 3, 5, 1];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Output channels of the 1×1, 3×3, 5×5 and pool branches.
    pub branch_channels: [usize; 4],
}

impl BlockSpec {
    pub fn new(in_channels: usize, out_channels: usize, branch_channels: [usize; 4]) -> Result<Self> {
        let spec = BlockSpec {
            in_channels,
            out_channels,
            branch_channels,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Splits `out_channels` evenly across the four branches.
    pub fn even(in_channels: usize, out_channels: usize) -> Result<Self> {
        if !out_channels.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "inception block output {out_channels} not divisible by 4"
            )));
        }
        Self::new(in_channels, out_channels, [out_channels / 4; 4])
    }

    pub fn validate(&self) -> Result<()> {
        let total: usize = self.branch_channels.iter().sum();
        if total != self.out_channels {
            return Err(Error::Config(format!(
                "branch channels {:?} sum to {total}, block declares {}",
                self.branch_channels, self.out_channels
            )));
        }
        if self.branch_channels.contains(&0) || self.in_channels == 0 {
            return Err(Error::Config("inception branch with zero channels".into()));
        }
        Ok(())
    }

    pub fn has_projection(&self) -> bool {
        self.in_channels != self.out_channels
    }

    fn branch_spec(&self, i: usize) -> Result<ConvSpec> {
        ConvSpec::same(self.in_channels, self.branch_channels[i], BRANCH_KERNELS[i])
    }

    fn projection_spec(&self) -> Result<ConvSpec> {
        ConvSpec::same(self.in_channels, self.out_channels, 1)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BlockVars {
    /// (weight, bias) per branch, in 1×1, 3×3, 5×5, pool order.
    pub branches: [(Var, Var); 4],
    pub projection: Option<(Var, Var)>,
}

pub fn inception_residual_block(tape: &mut Tape, x: Var, spec: &BlockSpec, p: &BlockVars) -> Result<Var> {
    spec.validate()?;
    let sx = tape.shape(x);
    if sx.len() != 4 || sx[1] != spec.in_channels {
        return Err(Error::dim(
            "inception_residual_block",
            format!("input {sx:?}, block expects {} channels", spec.in_channels),
        ));
    }
    if spec.has_projection() != p.projection.is_some() {
        return Err(Error::Config(
            "residual projection present iff channel counts differ".into(),
        ));
    }
    let mut outs = Vec::with_capacity(4);
    for (i, &(w, b)) in p.branches.iter().enumerate() {
        let src = if i == 3 { tape.max_pool2d(x, 3, 1, 1)? } else { x };
        let y = conv2d(tape, src, &spec.branch_spec(i)?, w, Some(b))?;
        outs.push(tape.relu(y)?);
    }
    let merged = tape.concat_channels(&outs)?;
    let residual = match p.projection {
        Some((w, b)) => conv2d(tape, x, &spec.projection_spec()?, w, Some(b))?,
        None => x,
    };
    tape.add(merged, residual)
}

#[derive(Debug, Clone, PartialEq)]
pub struct InceptionBlock {
    pub prefix: String,
    pub spec: BlockSpec,
}

impl InceptionBlock {
    pub fn new(prefix: impl Into<String>, spec: BlockSpec) -> Self {
        InceptionBlock {
            prefix: prefix.into(),
            spec,
        }
    }

    fn convs(&self) -> Result<(Vec<Conv>, Option<Conv>)> {
        let branches = (0..4)
            .map(|i| Ok(Conv::new(join(&self.prefix, BRANCH_NAMES[i]), self.spec.branch_spec(i)?)))
            .collect::<Result<Vec<_>>>()?;
        let projection = if self.spec.has_projection() {
            Some(Conv::new(join(&self.prefix, "proj"), self.spec.projection_spec()?))
        } else {
            None
        };
        Ok((branches, projection))
    }

    pub fn declare(&self, out: &mut Vec<ParamDecl>, std: f64) -> Result<()> {
        let (branches, projection) = self.convs()?;
        for c in branches.iter().chain(projection.iter()) {
            c.declare(out, std);
        }
        Ok(())
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let pair = |ctx: &Ctx<'_>, base: String| -> Result<(Var, Var)> {
            Ok((ctx.var(&join(&base, "w"))?, ctx.var(&join(&base, "b"))?))
        };
        let mut branches = Vec::with_capacity(4);
        for name in BRANCH_NAMES {
            branches.push(pair(ctx, join(&self.prefix, name))?);
        }
        let projection = if self.spec.has_projection() {
            Some(pair(ctx, join(&self.prefix, "proj"))?)
        } else {
            None
        };
        let vars = BlockVars {
            branches: [branches[0], branches[1], branches[2], branches[3]],
            projection,
        };
        inception_residual_block(ctx.tape, x, &self.spec, &vars)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_vec, rng_from_seed};
    use crate::tensor::Tensor;

    #[test]
    fn branch_sum_must_match_output() {
        assert!(matches!(BlockSpec::new(8, 16, [4, 4, 4, 3]), Err(Error::Config(_))));
        assert!(BlockSpec::even(8, 16).is_ok());
        assert!(BlockSpec::even(8, 15).is_err());
    }

    #[test]
    fn zero_branches_with_identity_residual_is_identity() {
        let spec = BlockSpec::even(16, 16).unwrap();
        let mut tape = Tape::new();
        let mut rng = rng_from_seed(1);
        let data = normal_vec(&mut rng, 16 * 64);
        let x = tape.constant(Tensor::new(vec![1, 16, 8, 8], data.clone()).unwrap());
        let mut branches = Vec::new();
        for (i, k) in BRANCH_KERNELS.iter().enumerate() {
            let w = tape.constant(Tensor::zeros(&[spec.branch_channels[i], 16, *k, *k]));
            let b = tape.constant(Tensor::zeros(&[spec.branch_channels[i]]));
            branches.push((w, b));
        }
        let vars = BlockVars {
            branches: [branches[0], branches[1], branches[2], branches[3]],
            projection: None,
        };
        let y = inception_residual_block(&mut tape, x, &spec, &vars).unwrap();
        assert_eq!(tape.shape(y), &[1, 16, 8, 8]);
        assert_eq!(tape.data(y), data.as_slice());
    }
}
