use std::collections::BTreeMap;

use super::{DiscriminatorConfig, NetworkParams, INIT_STD};
use crate::error::{Error, Result};
use crate::layers::{BatchNorm, Conv, ConvSpec, Ctx, Dense, NormMode, ParamDecl};
use crate::tensor::{Tape, Tensor, Var};

const LEAK: f64 = 0.2;

/// Four stride-2 3×3 convolutions (leaky ReLU, batch norm on layers 2-4),
/// then a dense layer and a sigmoid.
pub(crate) struct DiscriminatorArch {
    cfg: DiscriminatorConfig,
    convs: Vec<Conv>,
    norms: Vec<Option<BatchNorm>>,
    head: Dense,
}

impl DiscriminatorArch {
    pub(crate) fn new(cfg: &DiscriminatorConfig) -> Result<Self> {
        cfg.validate()?;
        let b = cfg.base_channels;
        let widths = [1, b, 2 * b, 4 * b, 8 * b];
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        for i in 0..4 {
            convs.push(Conv::new(format!("conv{}", i + 1), ConvSpec::down(widths[i], widths[i + 1], 3)?));
            norms.push((i > 0).then(|| BatchNorm::new(format!("bn{}", i + 1), widths[i + 1])));
        }
        let final_side = cfg.image_size / 16;
        Ok(DiscriminatorArch {
            cfg: *cfg,
            convs,
            norms,
            head: Dense::new("head", 8 * b * final_side * final_side, 1),
        })
    }

    pub(crate) fn declare(&self) -> Result<Vec<ParamDecl>> {
        let mut d = Vec::new();
        for (c, n) in self.convs.iter().zip(&self.norms) {
            c.declare(&mut d, INIT_STD);
            if let Some(n) = n {
                n.declare(&mut d, INIT_STD);
            }
        }
        self.head.declare(&mut d, INIT_STD);
        Ok(d)
    }

    fn forward(&self, ctx: &mut Ctx<'_>, x: Var, features_only: bool) -> Result<DiscriminatorOutput> {
        let s = self.cfg.image_size;
        let xs = ctx.tape.shape(x).to_vec();
        if xs.len() != 4 || xs[1] != 1 || xs[2] != s || xs[3] != s {
            return Err(Error::dim(
                "discriminate",
                format!("input {xs:?}, expected [N, 1, {s}, {s}]"),
            ));
        }
        let n = xs[0];
        let mut h = x;
        let mut features = None;
        for (i, (conv, norm)) in self.convs.iter().zip(&self.norms).enumerate() {
            h = conv.forward(ctx, h)?;
            if let Some(norm) = norm {
                h = norm.forward(ctx, h)?;
            }
            h = ctx.tape.leaky_relu(h, LEAK)?;
            if i + 1 == self.cfg.feature_tap_layer {
                let width = ctx.tape.value(h).len() / n;
                features = Some(ctx.tape.reshape(h, vec![n, width])?);
                if features_only {
                    break;
                }
            }
        }
        let features = features.expect("tap layer validated in 1..=4");
        if features_only {
            return Ok(DiscriminatorOutput { prob: None, logit: None, features });
        }
        let width = ctx.tape.value(h).len() / n;
        let flat = ctx.tape.reshape(h, vec![n, width])?;
        let logit = self.head.forward(ctx, flat)?;
        let prob = ctx.tape.sigmoid(logit)?;
        Ok(DiscriminatorOutput {
            prob: Some(prob),
            logit: Some(logit),
            features,
        })
    }
}

/// Tape handles from one discriminator pass. `prob`/`logit` are `[N,1]`;
/// `features` is `[N, F]`, the flattened tap-layer activations.
#[derive(Debug, Clone, Copy)]
pub struct DiscriminatorOutput {
    pub prob: Option<Var>,
    pub logit: Option<Var>,
    pub features: Var,
}

/// Discriminator forward pass. With `features_only` the layers after the
/// feature tap are skipped and `prob` is `None`.
pub fn discriminator_forward(
    tape: &mut Tape,
    cfg: &DiscriminatorConfig,
    vars: &BTreeMap<String, Var>,
    buffers: &mut BTreeMap<String, Tensor>,
    mode: NormMode,
    x: Var,
    features_only: bool,
) -> Result<DiscriminatorOutput> {
    let arch = DiscriminatorArch::new(cfg)?;
    let mut ctx = Ctx { tape, vars, buffers, mode };
    arch.forward(&mut ctx, x, features_only)
}

/// Inference-mode pass returning `(prob [N,1], features [N,F])`.
pub fn discriminate(params: &NetworkParams, x: &Tensor) -> Result<(Tensor, Tensor)> {
    let cfg = params.discriminator_config()?;
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, false);
    let mut buffers = params.buffers.clone();
    let xv = tape.constant(x.clone());
    let out = discriminator_forward(&mut tape, cfg, &vars, &mut buffers, NormMode::Infer, xv, false)?;
    let prob = tape.value(out.prob.expect("full pass")).clone();
    let features = tape.value(out.features).clone();
    Ok((prob, features))
}
