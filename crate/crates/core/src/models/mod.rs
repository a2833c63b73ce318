//! Generator and discriminator assembly, initialisation and checkpoints.

mod checkpoint;
mod discriminator;
mod generator;

pub use checkpoint::{checkpoint_meta, load_checkpoint, save_checkpoint, MANIFEST_FILE};
pub use discriminator::{discriminate, discriminator_forward, DiscriminatorOutput};
pub use generator::{generate, generator_forward};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::layers::{Init, ParamDecl};
use crate::rng::{rng_from_seed, truncated_normal};
use crate::tensor::{Tape, Tensor, Var};

/// Standard deviation of the truncated-normal weight initialisation.
pub const INIT_STD: f64 = 0.02;

pub const SUPPORTED_SIZES: [usize; 4] = [16, 32, 64, 128];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    /// Noise plus an encoded conditioning image.
    Iagan,
    /// Noise only.
    Dcgan,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Iagan => "iagan",
            Variant::Dcgan => "dcgan",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iagan" => Ok(Variant::Iagan),
            "dcgan" => Ok(Variant::Dcgan),
            other => Err(Error::Config(format!("unknown generator variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GeneratorConfig {
    pub image_size: usize,
    pub z_dim: usize,
    pub base_channels: usize,
    pub variant: Variant,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            image_size: 32,
            z_dim: 120,
            base_channels: 32,
            variant: Variant::Iagan,
            seed: 0,
        }
    }
}

fn validate_size(size: usize) -> Result<()> {
    if !SUPPORTED_SIZES.contains(&size) {
        return Err(Error::Config(format!(
            "image size {size} not in {SUPPORTED_SIZES:?}"
        )));
    }
    Ok(())
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        validate_size(self.image_size)?;
        if self.z_dim == 0 {
            return Err(Error::Config("z_dim must be at least 1".into()));
        }
        if self.base_channels == 0 || !self.base_channels.is_multiple_of(8) {
            return Err(Error::Config(format!(
                "generator base_channels {} must be a positive multiple of 8",
                self.base_channels
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DiscriminatorConfig {
    pub image_size: usize,
    pub base_channels: usize,
    /// Convolution layer (1..=4) whose activations serve as features.
    pub feature_tap_layer: usize,
    pub seed: u64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            image_size: 32,
            base_channels: 32,
            feature_tap_layer: 3,
            seed: 0,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        validate_size(self.image_size)?;
        if self.base_channels == 0 {
            return Err(Error::Config("discriminator base_channels must be positive".into()));
        }
        if !(1..=4).contains(&self.feature_tap_layer) {
            return Err(Error::Config(format!(
                "feature tap layer {} not in 1..=4",
                self.feature_tap_layer
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    Generator(GeneratorConfig),
    Discriminator(DiscriminatorConfig),
}

impl Architecture {
    /// Seed-independent description of the topology. Loading a checkpoint
    /// into a different topology is refused by comparing fingerprints.
    pub fn fingerprint(&self) -> String {
        match self {
            Architecture::Generator(c) => format!(
                "generator-v1 variant={} size={} z_dim={} base={}",
                c.variant, c.image_size, c.z_dim, c.base_channels
            ),
            Architecture::Discriminator(c) => format!(
                "discriminator-v1 size={} base={} tap={}",
                c.image_size, c.base_channels, c.feature_tap_layer
            ),
        }
    }

    pub fn parse_fingerprint(s: &str) -> Result<Self> {
        let mut words = s.split_whitespace();
        let kind = words.next().unwrap_or_default();
        let mut kv = BTreeMap::new();
        for w in words {
            let (k, v) = w
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("bad fingerprint field {w:?}")))?;
            kv.insert(k, v);
        }
        let num = |key: &str| -> Result<usize> {
            kv.get(key)
                .ok_or_else(|| Error::Config(format!("fingerprint lacks {key}")))?
                .parse()
                .map_err(|_| Error::Config(format!("fingerprint field {key} is not a number")))
        };
        let arch = match kind {
            "generator-v1" => Architecture::Generator(GeneratorConfig {
                image_size: num("size")?,
                z_dim: num("z_dim")?,
                base_channels: num("base")?,
                variant: kv
                    .get("variant")
                    .ok_or_else(|| Error::Config("fingerprint lacks variant".into()))?
                    .parse()?,
                seed: 0,
            }),
            "discriminator-v1" => Architecture::Discriminator(DiscriminatorConfig {
                image_size: num("size")?,
                base_channels: num("base")?,
                feature_tap_layer: num("tap")?,
                seed: 0,
            }),
            other => return Err(Error::Config(format!("unknown architecture {other:?}"))),
        };
        if arch.fingerprint() != s.trim() {
            return Err(Error::Config(format!("non-canonical fingerprint {s:?}")));
        }
        Ok(arch)
    }

    fn declarations(&self) -> Result<Vec<ParamDecl>> {
        match self {
            Architecture::Generator(c) => generator::GeneratorArch::new(c)?.declare(),
            Architecture::Discriminator(c) => discriminator::DiscriminatorArch::new(c)?.declare(),
        }
    }
}

/// Named learnable tensors and buffers of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub arch: Architecture,
    pub params: BTreeMap<String, Tensor>,
    pub buffers: BTreeMap<String, Tensor>,
}

impl NetworkParams {
    fn initialise(arch: Architecture, seed: u64) -> Result<Self> {
        let mut rng = rng_from_seed(seed);
        let mut params = BTreeMap::new();
        let mut buffers = BTreeMap::new();
        for decl in arch.declarations()? {
            let n: usize = decl.shape.iter().product();
            let data = match decl.init {
                Init::TruncatedNormal(std) => (0..n).map(|_| truncated_normal(&mut rng, std)).collect(),
                Init::TruncatedNormalAroundOne(std) => {
                    (0..n).map(|_| 1.0 + truncated_normal(&mut rng, std)).collect()
                }
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
            };
            let t = Tensor::new(decl.shape, data)?;
            let target = if decl.buffer { &mut buffers } else { &mut params };
            if target.insert(decl.name.clone(), t).is_some() {
                return Err(Error::Config(format!("duplicate parameter {}", decl.name)));
            }
        }
        Ok(NetworkParams { arch, params, buffers })
    }

    pub fn fingerprint(&self) -> String {
        self.arch.fingerprint()
    }

    pub fn generator_config(&self) -> Result<&GeneratorConfig> {
        match &self.arch {
            Architecture::Generator(c) => Ok(c),
            Architecture::Discriminator(_) => Err(Error::Contract("expected generator weights".into())),
        }
    }

    pub fn discriminator_config(&self) -> Result<&DiscriminatorConfig> {
        match &self.arch {
            Architecture::Discriminator(c) => Ok(c),
            Architecture::Generator(_) => Err(Error::Contract("expected discriminator weights".into())),
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Records every learnable tensor on `tape`, as differentiable leaves
    /// when `trainable`, as constants otherwise.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BTreeMap<String, Var> {
        self.params
            .iter()
            .map(|(name, t)| {
                let v = if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect()
    }

    /// Checks every tensor against the declared shapes of `arch`.
    pub fn validate(&self) -> Result<()> {
        let decls = self.arch.declarations()?;
        let (np, nb) = decls.iter().fold((0, 0), |(p, b), d| if d.buffer { (p, b + 1) } else { (p + 1, b) });
        if np != self.params.len() || nb != self.buffers.len() {
            return Err(Error::Config(format!(
                "expected {np} parameters and {nb} buffers, found {} and {}",
                self.params.len(),
                self.buffers.len()
            )));
        }
        for d in decls {
            let map = if d.buffer { &self.buffers } else { &self.params };
            let t = map
                .get(&d.name)
                .ok_or_else(|| Error::Config(format!("missing tensor {}", d.name)))?;
            if t.shape() != d.shape.as_slice() {
                return Err(Error::Config(format!(
                    "{} has shape {:?}, architecture needs {:?}",
                    d.name,
                    t.shape(),
                    d.shape
                )));
            }
        }
        Ok(())
    }
}

pub fn init_generator(cfg: &GeneratorConfig) -> Result<NetworkParams> {
    cfg.validate()?;
    NetworkParams::initialise(Architecture::Generator(*cfg), cfg.seed)
}

pub fn init_discriminator(cfg: &DiscriminatorConfig) -> Result<NetworkParams> {
    cfg.validate()?;
    NetworkParams::initialise(Architecture::Discriminator(*cfg), cfg.seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_gives_identical_weights() {
        let cfg = GeneratorConfig { image_size: 16, base_channels: 8, z_dim: 8, ..Default::default() };
        assert_eq!(init_generator(&cfg).unwrap(), init_generator(&cfg).unwrap());
        let other = GeneratorConfig { seed: 1, ..cfg };
        assert_ne!(init_generator(&cfg).unwrap(), init_generator(&other).unwrap());
    }

    #[test]
    fn encoder_branch_adds_parameters() {
        let iagan = GeneratorConfig { image_size: 16, base_channels: 8, z_dim: 8, ..Default::default() };
        let dcgan = GeneratorConfig { variant: Variant::Dcgan, ..iagan };
        assert!(init_generator(&iagan).unwrap().param_count() > init_generator(&dcgan).unwrap().param_count());
    }

    #[test]
    fn unsupported_sizes_rejected() {
        let cfg = GeneratorConfig { image_size: 48, ..Default::default() };
        assert!(matches!(init_generator(&cfg), Err(Error::Config(_))));
        let cfg = DiscriminatorConfig { feature_tap_layer: 5, ..Default::default() };
        assert!(init_discriminator(&cfg).is_err());
    }

    #[test]
    fn fingerprints_parse_back() {
        let g = Architecture::Generator(GeneratorConfig::default());
        let d = Architecture::Discriminator(DiscriminatorConfig::default());
        for a in [g, d] {
            let parsed = Architecture::parse_fingerprint(&a.fingerprint()).unwrap();
            assert_eq!(parsed.fingerprint(), a.fingerprint());
        }
        assert!(Architecture::parse_fingerprint("generator-v1 size=32").is_err());
    }
}
