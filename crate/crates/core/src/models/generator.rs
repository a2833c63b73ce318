//! Generator topology.
//!
//! With S the image size, b the base width and g = S/8:
//!
//! ```text
//! z ─ dense ─ reshape [4b,g,g] ─ BN ─ ReLU ────────────────┐
//!                                                          concat ─ inception(→4b)
//! x ─ conv s2 (b) ─ lrelu ─ conv s2 (2b) ─ BN ─ lrelu      │   (iagan only)
//!     ─ attention ─ 2×2 avg-pool [2b,g,g] ─────────────────┘
//!
//! ─ up(4b→2b) ─ BN ─ ReLU ─ inception ─ attention          (S/4)
//! ─ up(2b→b)  ─ BN ─ ReLU ─ inception                      (S/2)
//! ─ up(b→b/2) ─ BN ─ ReLU ─ inception                      (S)
//! ─ conv 3×3 (→1) ─ tanh
//! ```
//!
//! The noise-only variant drops the encoder branch and the concatenation.

use std::collections::BTreeMap;

use super::{GeneratorConfig, NetworkParams, Variant, INIT_STD};
use crate::error::{Error, Result};
use crate::layers::{
    Attention, BatchNorm, BlockSpec, Conv, ConvSpec, Ctx, Dense, InceptionBlock, NormMode, ParamDecl,
};
use crate::tensor::{Tape, Tensor, Var};

const LEAK: f64 = 0.2;

pub(crate) struct Stage {
    up: Conv,
    bn: BatchNorm,
    block: InceptionBlock,
    attention: Option<Attention>,
}

pub(crate) struct Encoder {
    conv1: Conv,
    conv2: Conv,
    bn2: BatchNorm,
    attention: Attention,
}

pub(crate) struct GeneratorArch {
    cfg: GeneratorConfig,
    grid: usize,
    z_channels: usize,
    z_dense: Dense,
    z_bn: BatchNorm,
    encoder: Option<Encoder>,
    fuse: InceptionBlock,
    stages: Vec<Stage>,
    out: Conv,
}

impl GeneratorArch {
    pub(crate) fn new(cfg: &GeneratorConfig) -> Result<Self> {
        cfg.validate()?;
        let b = cfg.base_channels;
        let grid = cfg.image_size / 8;
        let z_channels = 4 * b;
        let encoder = match cfg.variant {
            Variant::Iagan => Some(Encoder {
                conv1: Conv::new("enc.conv1", ConvSpec::down(1, b, 3)?),
                conv2: Conv::new("enc.conv2", ConvSpec::down(b, 2 * b, 3)?),
                bn2: BatchNorm::new("enc.bn2", 2 * b),
                attention: Attention::new("enc.attn", 2 * b),
            }),
            Variant::Dcgan => None,
        };
        let fused = z_channels + if encoder.is_some() { 2 * b } else { 0 };
        let widths = [4 * b, 2 * b, b, b / 2];
        let mut stages = Vec::new();
        for i in 0..3 {
            let (cin, cout) = (widths[i], widths[i + 1]);
            let name = format!("up{}", i + 1);
            stages.push(Stage {
                up: Conv::new(format!("{name}.conv"), ConvSpec::up(cin, cout, 3)?),
                bn: BatchNorm::new(format!("{name}.bn"), cout),
                block: InceptionBlock::new(format!("{name}.block"), BlockSpec::even(cout, cout)?),
                attention: (i == 0).then(|| Attention::new(format!("{name}.attn"), cout)),
            });
        }
        Ok(GeneratorArch {
            cfg: *cfg,
            grid,
            z_channels,
            z_dense: Dense::new("z.dense", cfg.z_dim, z_channels * grid * grid),
            z_bn: BatchNorm::new("z.bn", z_channels),
            encoder,
            fuse: InceptionBlock::new("fuse", BlockSpec::even(fused, 4 * b)?),
            stages,
            out: Conv::new("out.conv", ConvSpec::same(b / 2, 1, 3)?),
        })
    }

    pub(crate) fn declare(&self) -> Result<Vec<ParamDecl>> {
        let mut d = Vec::new();
        self.z_dense.declare(&mut d, INIT_STD);
        self.z_bn.declare(&mut d, INIT_STD);
        if let Some(e) = &self.encoder {
            e.conv1.declare(&mut d, INIT_STD);
            e.conv2.declare(&mut d, INIT_STD);
            e.bn2.declare(&mut d, INIT_STD);
            e.attention.declare(&mut d, INIT_STD)?;
        }
        self.fuse.declare(&mut d, INIT_STD)?;
        for s in &self.stages {
            s.up.declare(&mut d, INIT_STD);
            s.bn.declare(&mut d, INIT_STD);
            s.block.declare(&mut d, INIT_STD)?;
            if let Some(a) = &s.attention {
                a.declare(&mut d, INIT_STD)?;
            }
        }
        self.out.declare(&mut d, INIT_STD);
        Ok(d)
    }

    fn forward(&self, ctx: &mut Ctx<'_>, z: Var, cond: Option<Var>) -> Result<Var> {
        let zs = ctx.tape.shape(z).to_vec();
        if zs.len() != 2 || zs[1] != self.cfg.z_dim {
            return Err(Error::dim(
                "generate",
                format!("latent shape {zs:?}, expected [N, {}]", self.cfg.z_dim),
            ));
        }
        let n = zs[0];
        let s = self.cfg.image_size;
        let h = self.z_dense.forward(ctx, z)?;
        let h = ctx.tape.reshape(h, vec![n, self.z_channels, self.grid, self.grid])?;
        let h = self.z_bn.forward(ctx, h)?;
        let mut h = ctx.tape.relu(h)?;
        match (&self.encoder, cond) {
            (Some(enc), Some(x)) => {
                let xs = ctx.tape.shape(x);
                if xs != [n, 1, s, s] {
                    return Err(Error::Contract(format!(
                        "conditioning batch {xs:?} does not match [{n}, 1, {s}, {s}]"
                    )));
                }
                let e = enc.conv1.forward(ctx, x)?;
                let e = ctx.tape.leaky_relu(e, LEAK)?;
                let e = enc.conv2.forward(ctx, e)?;
                let e = enc.bn2.forward(ctx, e)?;
                let e = ctx.tape.leaky_relu(e, LEAK)?;
                let e = enc.attention.forward(ctx, e)?.out;
                let e = ctx.tape.avg_pool2d(e, 2)?;
                h = ctx.tape.concat_channels(&[h, e])?;
            }
            (None, None) => {}
            (Some(_), None) => {
                return Err(Error::Contract("iagan generator needs a conditioning image batch".into()))
            }
            (None, Some(_)) => {
                return Err(Error::Contract("dcgan generator takes no conditioning images".into()))
            }
        }
        let mut h = self.fuse.forward(ctx, h)?;
        for st in &self.stages {
            h = st.up.forward(ctx, h)?;
            h = st.bn.forward(ctx, h)?;
            h = ctx.tape.relu(h)?;
            h = st.block.forward(ctx, h)?;
            if let Some(a) = &st.attention {
                h = a.forward(ctx, h)?.out;
            }
        }
        let h = self.out.forward(ctx, h)?;
        ctx.tape.tanh(h)
    }
}

/// Generator forward pass on an existing tape. `vars` come from
/// [`NetworkParams::bind`]; train-mode batch norm updates `buffers`.
pub fn generator_forward(
    tape: &mut Tape,
    cfg: &GeneratorConfig,
    vars: &BTreeMap<String, Var>,
    buffers: &mut BTreeMap<String, Tensor>,
    mode: NormMode,
    z: Var,
    cond: Option<Var>,
) -> Result<Var> {
    let arch = GeneratorArch::new(cfg)?;
    let mut ctx = Ctx { tape, vars, buffers, mode };
    arch.forward(&mut ctx, z, cond)
}

/// Inference-mode generation: `z [N, z_dim]`, optional `cond [N,1,S,S]`.
pub fn generate(params: &NetworkParams, z: &Tensor, cond: Option<&Tensor>) -> Result<Tensor> {
    let cfg = params.generator_config()?;
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, false);
    let mut buffers = params.buffers.clone();
    let zv = tape.constant(z.clone());
    let cv = cond.map(|c| tape.constant(c.clone()));
    let out = generator_forward(&mut tape, cfg, &vars, &mut buffers, NormMode::Infer, zv, cv)?;
    let mut t = tape.value(out).clone();
    t.requires_grad = false;
    Ok(t)
}
