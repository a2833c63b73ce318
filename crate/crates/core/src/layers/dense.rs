use super::{join, Ctx, Init, ParamDecl};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

/// `x [N,F] · W [F,O] + b [O]`.
pub fn dense(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let (sx, sw) = (tape.shape(x), tape.shape(w));
    if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[0] {
        return Err(Error::dim("dense", format!("input {sx:?}, weight {sw:?}")));
    }
    let y = tape.matmul(x, w)?;
    tape.add_channel_bias(y, b)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub prefix: String,
    pub inputs: usize,
    pub outputs: usize,
}

impl Dense {
    pub fn new(prefix: impl Into<String>, inputs: usize, outputs: usize) -> Self {
        Dense {
            prefix: prefix.into(),
            inputs,
            outputs,
        }
    }

    pub fn declare(&self, out: &mut Vec<ParamDecl>, std: f64) {
        out.push(ParamDecl::param(
            join(&self.prefix, "w"),
            vec![self.inputs, self.outputs],
            Init::TruncatedNormal(std),
        ));
        out.push(ParamDecl::param(join(&self.prefix, "b"), vec![self.outputs], Init::Zeros));
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let w = ctx.var(&join(&self.prefix, "w"))?;
        let b = ctx.var(&join(&self.prefix, "b"))?;
        dense(ctx.tape, x, w, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn identity_weight_zero_bias() {
        let mut tape = Tape::new();
        let data = vec![0.5, -1.0, 2.0, 3.0, 0.0, -0.25];
        let x = tape.constant(Tensor::new(vec![2, 3], data.clone()).unwrap());
        let mut eye = vec![0.0; 9];
        (0..3).for_each(|i| eye[i * 3 + i] = 1.0);
        let w = tape.constant(Tensor::new(vec![3, 3], eye).unwrap());
        let b = tape.constant(Tensor::zeros(&[3]));
        let y = dense(&mut tape, x, w, b).unwrap();
        assert_eq!(tape.data(y), data.as_slice());
    }

    #[test]
    fn hand_example() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap());
        let w = tape.constant(Tensor::new(vec![2, 1], vec![2.0, 3.0]).unwrap());
        let b = tape.constant(Tensor::from_vec(vec![1.0]));
        let y = dense(&mut tape, x, w, b).unwrap();
        assert_eq!(tape.data(y), &[6.0]);
    }

    #[test]
    fn mismatched_features() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 3]));
        let w = tape.constant(Tensor::zeros(&[2, 1]));
        let b = tape.constant(Tensor::zeros(&[1]));
        assert!(dense(&mut tape, x, w, b).is_err());
    }
}
