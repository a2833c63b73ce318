//! Resolved run configuration: defaults, then `run.cfg`, then `--set`
//! overrides, then dedicated flags.

use std::fs;
use std::path::Path;

use crate::anogan::{Conditioning, SearchConfig, ZOptimizer};
use crate::error::{Error, Result};
use crate::kv;
use crate::models::{DiscriminatorConfig, GeneratorConfig, Variant};
use crate::rng::derive_seed;
use crate::tensor::AdamConfig;
use crate::training::{EncoderInput, GeneratorLoss, TrainConfig};

pub const RUN_CONFIG_FILE: &str = "run.cfg";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub size: usize,
    pub classes: String,
    pub per_class: usize,
    pub test_per_class: usize,
    pub base_channels: usize,
    pub disc_channels: usize,
    pub z_dim: usize,
    pub feature_tap_layer: usize,
    pub lr_d: f64,
    pub lr_g: f64,
    pub beta1: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// 0 means no cap beyond `epochs`.
    pub max_steps: usize,
    pub generator_loss: GeneratorLoss,
    pub label_smoothing: bool,
    pub encoder_input: EncoderInput,
    /// Sample mosaic cadence in steps; 0 disables mosaics.
    pub sample_every: usize,
    pub search_iterations: usize,
    pub lambda: f64,
    pub search_step: f64,
    pub z_optimizer: ZOptimizer,
    pub restarts: usize,
    pub conditioning: Conditioning,
    pub score_batch: usize,
    pub gan_copies: usize,
    pub traditional_copies: usize,
    pub table_arithmetic: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            size: 32,
            classes: "normal,pneumonia_like,covid_like".into(),
            per_class: 200,
            test_per_class: 50,
            base_channels: 8,
            disc_channels: 8,
            z_dim: 64,
            feature_tap_layer: 3,
            lr_d: 2e-4,
            lr_g: 2e-4,
            beta1: 0.5,
            batch_size: 32,
            epochs: 100_000,
            max_steps: 2000,
            generator_loss: GeneratorLoss::NonSaturating,
            label_smoothing: false,
            encoder_input: EncoderInput::Real,
            sample_every: 100,
            search_iterations: 100,
            lambda: 0.2,
            search_step: 0.01,
            z_optimizer: ZOptimizer::Adam,
            restarts: 1,
            conditioning: Conditioning::TestImage,
            score_batch: 64,
            gan_copies: crate::augment::GAN_COPIES,
            traditional_copies: crate::augment::TRADITIONAL_COPIES,
            table_arithmetic: false,
        }
    }
}

macro_rules! run_fields {
    ($m:ident) => {
        $m!(
            seed, size, classes, per_class, test_per_class, base_channels, disc_channels, z_dim, feature_tap_layer,
            lr_d, lr_g, beta1, batch_size, epochs, max_steps, generator_loss, label_smoothing, encoder_input,
            sample_every, search_iterations, lambda, search_step, z_optimizer, restarts, conditioning, score_batch,
            gan_copies, traditional_copies, table_arithmetic
        )
    };
}

impl RunConfig {
    pub fn to_text(&self, command: &str) -> String {
        let mut pairs: Vec<(&str, String)> = Vec::new();
        macro_rules! emit {
            ($($f:ident),*) => { $( pairs.push((stringify!($f), self.$f.to_string())); )* };
        }
        run_fields!(emit);
        format!("# resolved config for `{command}`\n{}", kv::render(pairs))
    }

    /// Applies `key = value` pairs on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut map = kv::parse(text)?;
        macro_rules! read {
            ($($f:ident),*) => { $( kv::take(&mut map, stringify!($f), &mut self.$f)?; )* };
        }
        run_fields!(read);
        kv::reject_unknown(&map, "run config")
    }

    /// Applies one `key=value` override.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        if !assignment.contains('=') {
            return Err(Error::Config(format!("override {assignment:?} is not key=value")));
        }
        self.apply_text(assignment)
    }

    pub fn load_into(&mut self, path: &Path) -> Result<()> {
        self.apply_text(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn save(&self, path: &Path, command: &str) -> Result<()> {
        fs::write(path, self.to_text(command)).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config(0).validate()?;
        self.search_config().validate()?;
        self.generator_config(Variant::Dcgan, 0).validate()?;
        self.discriminator_config(0).validate()?;
        if self.score_batch == 0 {
            return Err(Error::Config("score_batch must be positive".into()));
        }
        Ok(())
    }

    pub fn generator_config(&self, variant: Variant, seed: u64) -> GeneratorConfig {
        GeneratorConfig {
            image_size: self.size,
            z_dim: self.z_dim,
            base_channels: self.base_channels,
            variant,
            seed: derive_seed(seed, "generator_init"),
        }
    }

    pub fn discriminator_config(&self, seed: u64) -> DiscriminatorConfig {
        DiscriminatorConfig {
            image_size: self.size,
            base_channels: self.disc_channels,
            feature_tap_layer: self.feature_tap_layer,
            seed: derive_seed(seed, "discriminator_init"),
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { beta1: self.beta1, ..AdamConfig::default() }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            lr_d: self.lr_d,
            lr_g: self.lr_g,
            batch_size: self.batch_size,
            epochs: self.epochs,
            max_steps: (self.max_steps > 0).then_some(self.max_steps),
            z_dim: self.z_dim,
            seed: derive_seed(seed, "train"),
            generator_loss: self.generator_loss,
            encoder_input: self.encoder_input,
            label_smoothing: self.label_smoothing,
            adam: self.adam(),
        }
    }

    pub fn search_config(&self) -> SearchConfig {
        SearchConfig {
            iterations: self.search_iterations,
            lambda: self.lambda,
            seed: derive_seed(self.seed, "score"),
            step_size: self.search_step,
            optimizer: self.z_optimizer,
            restarts: self.restarts,
            conditioning: self.conditioning,
            ..SearchConfig::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_roundtrip_and_overrides() {
        let mut c = RunConfig { lr_d: 3e-4, table_arithmetic: true, ..Default::default() };
        let text = c.to_text("train");
        let mut back = RunConfig::default();
        back.apply_text(&text).unwrap();
        assert_eq!(back, c);
        c.set("z_optimizer=gradient_descent").unwrap();
        assert_eq!(c.z_optimizer, ZOptimizer::GradientDescent);
        assert!(c.set("no_such_key=1").is_err());
        assert!(c.set("seed").is_err());
    }
}
