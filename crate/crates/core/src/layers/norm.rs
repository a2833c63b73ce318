use super::{join, Ctx, Init, ParamDecl};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Batch-norm behaviour for one forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NormMode {
    /// Normalise with batch statistics and blend them into the running
    /// statistics with weight `momentum` (0 leaves them untouched).
    Train { momentum: f64 },
    /// Normalise with the running statistics.
    Infer,
}

impl NormMode {
    pub fn train() -> Self {
        NormMode::Train { momentum: BN_MOMENTUM }
    }

    pub fn is_train(&self) -> bool {
        matches!(self, NormMode::Train { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

/// Batch normalisation over axis 1 of `[N,C,...]`.
///
/// Train mode uses biased batch variance for normalisation and blends the
/// unbiased variance into `stats`.
pub fn batchnorm(tape: &mut Tape, x: Var, gamma: Var, beta: Var, mode: NormMode, stats: &mut RunningStats) -> Result<Var> {
    match mode {
        NormMode::Train { momentum } => {
            let (out, batch) = tape.batchnorm_train(x, gamma, beta, BN_EPS)?;
            if momentum > 0.0 {
                let correction = batch.count as f64 / (batch.count as f64 - 1.0).max(1.0);
                for c in 0..stats.mean.len() {
                    stats.mean[c] = (1.0 - momentum) * stats.mean[c] + momentum * batch.mean[c];
                    stats.var[c] = (1.0 - momentum) * stats.var[c] + momentum * batch.var[c] * correction;
                }
            }
            Ok(out)
        }
        NormMode::Infer => tape.batchnorm_infer(x, gamma, beta, &stats.mean, &stats.var, BN_EPS),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub prefix: String,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new(prefix: impl Into<String>, channels: usize) -> Self {
        BatchNorm {
            prefix: prefix.into(),
            channels,
        }
    }

    pub fn declare(&self, out: &mut Vec<ParamDecl>, std: f64) {
        let c = vec![self.channels];
        out.push(ParamDecl::param(join(&self.prefix, "gamma"), c.clone(), Init::TruncatedNormalAroundOne(std)));
        out.push(ParamDecl::param(join(&self.prefix, "beta"), c.clone(), Init::Zeros));
        out.push(ParamDecl::buffer(join(&self.prefix, "running_mean"), c.clone(), Init::Zeros));
        out.push(ParamDecl::buffer(join(&self.prefix, "running_var"), c, Init::Ones));
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let gamma = ctx.var(&join(&self.prefix, "gamma"))?;
        let beta = ctx.var(&join(&self.prefix, "beta"))?;
        let mean_key = join(&self.prefix, "running_mean");
        let var_key = join(&self.prefix, "running_var");
        let fetch = |ctx: &Ctx<'_>, key: &str| -> Result<Vec<f64>> {
            ctx.buffers
                .get(key)
                .map(|t| t.data().to_vec())
                .ok_or_else(|| Error::Config(format!("missing buffer {key}")))
        };
        let mut stats = RunningStats {
            mean: fetch(ctx, &mean_key)?,
            var: fetch(ctx, &var_key)?,
        };
        let out = batchnorm(ctx.tape, x, gamma, beta, ctx.mode, &mut stats)?;
        if let NormMode::Train { momentum } = ctx.mode {
            if momentum > 0.0 {
                ctx.buffers.insert(mean_key, Tensor::from_vec(stats.mean));
                ctx.buffers.insert(var_key, Tensor::from_vec(stats.var));
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn affine(tape: &mut Tape, c: usize, g: f64, b: f64) -> (Var, Var) {
        (
            tape.constant(Tensor::full(&[c], g)),
            tape.constant(Tensor::full(&[c], b)),
        )
    }

    #[test]
    fn constant_channel_maps_to_beta() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[4, 2, 3, 3], 2.5));
        let (g, b) = affine(&mut tape, 2, 1.7, 0.3);
        let mut stats = RunningStats::new(2);
        let y = batchnorm(&mut tape, x, g, b, NormMode::train(), &mut stats).unwrap();
        assert!(tape.data(y).iter().all(|&v| (v - 0.3).abs() < 1e-12));
    }

    #[test]
    fn standardised_input_passes_through() {
        let mut tape = Tape::new();
        // per channel: values ±1 give mean 0, biased var 1
        let data = vec![1.0, -1.0, -1.0, 1.0];
        let x = tape.constant(Tensor::new(vec![2, 2], data.clone()).unwrap());
        let (g, b) = affine(&mut tape, 2, 1.0, 0.0);
        let mut stats = RunningStats::new(2);
        let y = batchnorm(&mut tape, x, g, b, NormMode::train(), &mut stats).unwrap();
        for (o, i) in tape.data(y).iter().zip(&data) {
            assert!((o - i).abs() < 1e-5);
        }
    }

    #[test]
    fn running_stats_update_and_infer() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2, 1], vec![1.0, 3.0]).unwrap());
        let (g, b) = affine(&mut tape, 1, 1.0, 0.0);
        let mut stats = RunningStats::new(1);
        batchnorm(&mut tape, x, g, b, NormMode::train(), &mut stats).unwrap();
        assert!((stats.mean[0] - 0.2).abs() < 1e-12);
        // unbiased var 2.0: 0.9 * 1 + 0.1 * 2
        assert!((stats.var[0] - 1.1).abs() < 1e-12);
        let y = batchnorm(&mut tape, x, g, b, NormMode::Infer, &mut stats).unwrap();
        let expect = (1.0 - 0.2) / (1.1f64 + BN_EPS).sqrt();
        assert!((tape.data(y)[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn zero_momentum_freezes_stats() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2, 1], vec![1.0, 3.0]).unwrap());
        let (g, b) = affine(&mut tape, 1, 1.0, 0.0);
        let mut stats = RunningStats::new(1);
        batchnorm(&mut tape, x, g, b, NormMode::Train { momentum: 0.0 }, &mut stats).unwrap();
        assert_eq!(stats, RunningStats::new(1));
    }

    #[test]
    fn batch_of_one_in_train_mode_fails() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 2, 2]));
        let (g, b) = affine(&mut tape, 2, 1.0, 0.0);
        let mut stats = RunningStats::new(2);
        assert!(matches!(
            batchnorm(&mut tape, x, g, b, NormMode::train(), &mut stats),
            Err(Error::Contract(_))
        ));
        assert!(batchnorm(&mut tape, x, g, b, NormMode::Infer, &mut stats).is_ok());
    }
}
