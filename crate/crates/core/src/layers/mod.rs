//! Network building blocks.
//!
//! Each block comes in two forms: a free function over tape variables (the
//! operation itself) and a small layer struct that declares its parameters
//! by name and looks them up from a [`Ctx`] during a forward pass.

mod activation;
mod attention;
mod conv;
mod dense;
mod inception;
mod norm;

pub use activation::{activation, Activation};
pub use attention::{attention_channels, self_attention, Attention, AttentionOutput, AttentionVars};
pub use conv::{conv2d, conv2d_transpose, Conv, ConvSpec};
pub use dense::{dense, Dense};
pub use inception::{inception_residual_block, BlockSpec, BlockVars, InceptionBlock};
pub use norm::{batchnorm, BatchNorm, NormMode, RunningStats, BN_EPS, BN_MOMENTUM};

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// How a declared parameter is initialised.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Normal(0, std) truncated at ±2 std.
    TruncatedNormal(f64),
    /// Normal(1, std) truncated at ±2 std, for batch-norm gains.
    TruncatedNormalAroundOne(f64),
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamDecl {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    /// Buffers (running statistics) are stored with the network but never
    /// receive gradients.
    pub buffer: bool,
}

impl ParamDecl {
    pub fn param(name: String, shape: Vec<usize>, init: Init) -> Self {
        ParamDecl { name, shape, init, buffer: false }
    }

    pub fn buffer(name: String, shape: Vec<usize>, init: Init) -> Self {
        ParamDecl { name, shape, init, buffer: true }
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Everything a layer needs during a forward pass.
pub struct Ctx<'a> {
    pub tape: &'a mut Tape,
    pub vars: &'a BTreeMap<String, Var>,
    pub buffers: &'a mut BTreeMap<String, Tensor>,
    pub mode: NormMode,
}

impl Ctx<'_> {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }
}
