//! Adversarial training: one discriminator update, then one generator update,
//! per batch.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::layers::NormMode;
use crate::models::{
    discriminator_forward, generator_forward, init_discriminator, init_generator, DiscriminatorConfig,
    GeneratorConfig, NetworkParams, Variant,
};
use crate::rng::{derive_indexed, derive_seed, normal_vec, rng_from_seed, shuffle, uniform};
use crate::tensor::{adam_step, AdamConfig, AdamState, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GeneratorLoss {
    /// Minimise `-log D(G(z))`.
    NonSaturating,
    /// Minimise `log(1 - D(G(z)))`.
    Minimax,
}

impl fmt::Display for GeneratorLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GeneratorLoss::NonSaturating => "non_saturating",
            GeneratorLoss::Minimax => "minimax",
        })
    }
}

impl FromStr for GeneratorLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "non_saturating" => Ok(GeneratorLoss::NonSaturating),
            "minimax" => Ok(GeneratorLoss::Minimax),
            other => Err(Error::Config(format!("unknown generator loss {other:?}"))),
        }
    }
}

/// What the encoder branch of an image-conditioned generator sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderInput {
    /// The real batch the discriminator sees in the same step.
    Real,
    /// Seeded uniform noise in [-1, 1].
    Random,
}

impl fmt::Display for EncoderInput {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EncoderInput::Real => "real",
            EncoderInput::Random => "random",
        })
    }
}

impl FromStr for EncoderInput {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "real" => Ok(EncoderInput::Real),
            "random" => Ok(EncoderInput::Random),
            other => Err(Error::Config(format!("unknown encoder input {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr_d: f64,
    pub lr_g: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stops training after this many steps, even mid-epoch.
    pub max_steps: Option<usize>,
    pub z_dim: usize,
    pub seed: u64,
    pub generator_loss: GeneratorLoss,
    pub encoder_input: EncoderInput,
    /// Real label 0.9 instead of 1.
    pub label_smoothing: bool,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_d: 4e-4,
            lr_g: 1e-4,
            batch_size: 32,
            epochs: 250,
            max_steps: None,
            z_dim: 120,
            seed: 0,
            generator_loss: GeneratorLoss::NonSaturating,
            encoder_input: EncoderInput::Real,
            label_smoothing: false,
            adam: AdamConfig { beta1: 0.5, beta2: 0.999, eps: 1e-8 },
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, lr) in [("lr_d", self.lr_d), ("lr_g", self.lr_g)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {lr}")));
            }
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2 for batch norm".into()));
        }
        if self.z_dim == 0 {
            return Err(Error::Config("z_dim must be at least 1".into()));
        }
        Ok(())
    }

    pub fn real_label(&self) -> f64 {
        if self.label_smoothing {
            0.9
        } else {
            1.0
        }
    }

    /// Steps in one epoch over `n` images. Incomplete trailing batches are
    /// dropped; a dataset smaller than one batch trains on a single batch of
    /// all its images.
    pub fn steps_per_epoch(&self, n: usize) -> usize {
        if n < self.batch_size {
            usize::from(n >= 2)
        } else {
            n / self.batch_size
        }
    }
}

/// Generator and discriminator with their optimiser states.
#[derive(Debug, Clone, PartialEq)]
pub struct GanState {
    pub generator: NetworkParams,
    pub discriminator: NetworkParams,
    pub opt_g: AdamState,
    pub opt_d: AdamState,
}

impl GanState {
    pub fn new(generator: NetworkParams, discriminator: NetworkParams, adam: AdamConfig) -> Result<Self> {
        let g = generator.generator_config()?;
        let d = discriminator.discriminator_config()?;
        if g.image_size != d.image_size {
            return Err(Error::Config(format!(
                "generator size {} differs from discriminator size {}",
                g.image_size, d.image_size
            )));
        }
        Ok(GanState { generator, discriminator, opt_g: AdamState::new(adam), opt_d: AdamState::new(adam) })
    }

    pub fn init(g: &GeneratorConfig, d: &DiscriminatorConfig, adam: AdamConfig) -> Result<Self> {
        Self::new(init_generator(g)?, init_discriminator(d)?, adam)
    }
}

/// Discriminator outputs and losses of one training step. The losses are
/// the mean binary cross-entropies of these exact vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub d_loss: f64,
    pub g_loss: f64,
    /// D(real) during the discriminator update.
    pub d_real: Vec<f64>,
    /// D(fake) during the discriminator update.
    pub d_fake: Vec<f64>,
    /// D(fake) under the updated discriminator, during the generator update.
    pub d_fake_g: Vec<f64>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn grads_of(tape: &Tape, vars: &BTreeMap<String, Var>) -> BTreeMap<String, Vec<f64>> {
    vars.iter()
        .filter_map(|(name, &v)| tape.grad(v).map(|g| (name.clone(), g.to_vec())))
        .collect()
}

fn finite_loss(value: f64, what: &str, probs: &[f64]) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} = {value}; discriminator outputs {probs:?}")))
    }
}

/// One discriminator update on `real` (label 1, or 0.9 when smoothed) and
/// `fake` (label 0). Returns `(loss, D(real), D(fake))`.
pub fn discriminator_step(
    d: &mut NetworkParams,
    opt: &mut AdamState,
    real: &Tensor,
    fake: &Tensor,
    cfg: &TrainConfig,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let dcfg = *d.discriminator_config()?;
    if real.shape() != fake.shape() {
        return Err(Error::dim("discriminator_step", format!("real {:?}, fake {:?}", real.shape(), fake.shape())));
    }
    let mut tape = Tape::new();
    let vars = d.bind(&mut tape, true);
    let rv = tape.constant(real.clone());
    let fv = tape.constant(fake.clone());
    let pr = discriminator_forward(&mut tape, &dcfg, &vars, &mut d.buffers, NormMode::train(), rv, false)?
        .prob
        .expect("full pass");
    let pf = discriminator_forward(&mut tape, &dcfg, &vars, &mut d.buffers, NormMode::train(), fv, false)?
        .prob
        .expect("full pass");
    let lr = tape.bce(pr, cfg.real_label())?;
    let lf = tape.bce(pf, 0.0)?;
    let loss = tape.add(lr, lf)?;
    let value = tape.data(loss)[0];
    let (d_real, d_fake) = (tape.data(pr).to_vec(), tape.data(pf).to_vec());
    finite_loss(value, "discriminator loss", &[d_real.clone(), d_fake.clone()].concat())?;
    tape.backward(loss)?;
    adam_step(&mut d.params, &grads_of(&tape, &vars), opt, cfg.lr_d)?;
    Ok((value, d_real, d_fake))
}

pub(crate) fn noise_images(shape: &[usize], seed: u64) -> Result<Tensor> {
    let mut rng = rng_from_seed(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| uniform(&mut rng, -1.0, 1.0)).collect())
}

/// Latent batch for step `step` of a run seeded with `seed`.
pub fn step_latents(seed: u64, step: u64, n: usize, z_dim: usize) -> Result<Tensor> {
    let mut rng = rng_from_seed(derive_indexed(seed, "z", step));
    Tensor::new(vec![n, z_dim], normal_vec(&mut rng, n * z_dim))
}

/// One full step: fakes from the current generator, a discriminator update,
/// then a generator update against the updated discriminator.
pub fn gan_train_step(state: &mut GanState, real: &Tensor, step: u64, cfg: &TrainConfig) -> Result<StepResult> {
    let gcfg = *state.generator.generator_config()?;
    let dcfg = *state.discriminator.discriminator_config()?;
    let s = gcfg.image_size;
    let rs = real.shape();
    if rs.len() != 4 || rs[1] != 1 || rs[2] != s || rs[3] != s || rs[0] < 2 {
        return Err(Error::dim("gan_train_step", format!("real batch {rs:?} for image size {s}")));
    }
    if real.data().iter().any(|v| !(-1.0..=1.0).contains(v)) {
        return Err(Error::Contract("real batch must lie in [-1, 1]".into()));
    }
    if cfg.z_dim != gcfg.z_dim {
        return Err(Error::Config(format!("train z_dim {} vs generator z_dim {}", cfg.z_dim, gcfg.z_dim)));
    }
    let n = rs[0];
    let z = step_latents(cfg.seed, step, n, gcfg.z_dim)?;
    let cond = match (gcfg.variant, cfg.encoder_input) {
        (Variant::Iagan, EncoderInput::Real) => Some(real.clone()),
        (Variant::Iagan, EncoderInput::Random) => Some(noise_images(rs, derive_indexed(cfg.seed, "encoder_noise", step))?),
        (Variant::Dcgan, _) => None,
    };

    let mut tape = Tape::new();
    let gvars = state.generator.bind(&mut tape, true);
    let zv = tape.constant(z);
    let cv = cond.map(|c| tape.constant(c));
    let fake = generator_forward(&mut tape, &gcfg, &gvars, &mut state.generator.buffers, NormMode::train(), zv, cv)?;
    let fake_values = tape.value(fake).clone();

    let (d_loss, d_real, d_fake) =
        discriminator_step(&mut state.discriminator, &mut state.opt_d, real, &fake_values, cfg)?;

    let dvars = state.discriminator.bind(&mut tape, false);
    let mut dbuf = state.discriminator.buffers.clone();
    let frozen = NormMode::Train { momentum: 0.0 };
    let p = discriminator_forward(&mut tape, &dcfg, &dvars, &mut dbuf, frozen, fake, false)?
        .prob
        .expect("full pass");
    let loss = match cfg.generator_loss {
        GeneratorLoss::NonSaturating => tape.bce(p, 1.0)?,
        GeneratorLoss::Minimax => {
            let l = tape.bce(p, 0.0)?;
            tape.neg(l)?
        }
    };
    let g_loss = tape.data(loss)[0];
    let d_fake_g = tape.data(p).to_vec();
    finite_loss(g_loss, "generator loss", &d_fake_g)?;
    tape.backward(loss)?;
    adam_step(&mut state.generator.params, &grads_of(&tape, &gvars), &mut state.opt_g, cfg.lr_g)?;
    Ok(StepResult { d_loss, g_loss, d_real, d_fake, d_fake_g })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub d_loss: f64,
    pub g_loss: f64,
    pub d_real_mean: f64,
    pub d_fake_mean: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    /// `(epoch, reference)` for every checkpoint a hook reported.
    pub checkpoints: Vec<(usize, String)>,
}

pub const TRAIN_LOG_HEADER: &str = "step,epoch,d_loss,g_loss,d_real_mean,d_fake_mean";

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(TRAIN_LOG_HEADER);
        out.push('\n');
        for r in &self.steps {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.step, r.epoch, r.d_loss, r.g_loss, r.d_real_mean, r.d_fake_mean
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Callbacks during [`train`]. Both default to doing nothing.
pub trait TrainHooks {
    fn on_step(&mut self, _record: &StepRecord, _state: &GanState) -> Result<()> {
        Ok(())
    }

    /// Called after every epoch with `last` set on the final one. A returned
    /// reference is recorded in the log's checkpoint list.
    fn on_epoch_end(&mut self, _epoch: usize, _last: bool, _state: &GanState) -> Result<Option<String>> {
        Ok(None)
    }
}

pub struct NoHooks;

impl TrainHooks for NoHooks {}

/// Trains on `images [N,1,S,S]` (one class) with seeded epoch shuffles.
pub fn train(images: &Tensor, mut state: GanState, cfg: &TrainConfig, hooks: &mut dyn TrainHooks) -> Result<(GanState, TrainLog)> {
    cfg.validate()?;
    let shape = images.shape();
    if shape.len() != 4 || shape[0] == 0 {
        return Err(Error::Config(format!("training set must be a non-empty [N,1,S,S] batch, got {shape:?}")));
    }
    let n = shape[0];
    let per_epoch = cfg.steps_per_epoch(n);
    if per_epoch == 0 {
        return Err(Error::Config("training set needs at least 2 images".into()));
    }
    let batch = cfg.batch_size.min(n);
    let total = cfg.epochs * per_epoch;
    let total = cfg.max_steps.map_or(total, |m| m.min(total));
    let epochs = total.div_ceil(per_epoch);
    let mut log = TrainLog::default();
    let mut step = 0usize;
    let shuffle_seed = derive_seed(cfg.seed, "shuffle");
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..n).collect();
        shuffle(&mut rng_from_seed(derive_indexed(shuffle_seed, "epoch", epoch as u64)), &mut order);
        for b in 0..per_epoch {
            if step == total {
                break;
            }
            let parts = order[b * batch..(b + 1) * batch]
                .iter()
                .map(|&i| images.select(i))
                .collect::<Result<Vec<_>>>()?;
            let real = Tensor::stack(&parts)?;
            let r = gan_train_step(&mut state, &real, step as u64, cfg)?;
            let record = StepRecord {
                step,
                epoch,
                d_loss: r.d_loss,
                g_loss: r.g_loss,
                d_real_mean: mean(&r.d_real),
                d_fake_mean: mean(&r.d_fake),
            };
            hooks.on_step(&record, &state)?;
            log.steps.push(record);
            step += 1;
        }
        if let Some(reference) = hooks.on_epoch_end(epoch, epoch + 1 == epochs, &state)? {
            log.checkpoints.push((epoch, reference));
        }
    }
    Ok((state, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::bce;

    fn tiny(variant: Variant) -> GanState {
        let g = GeneratorConfig { image_size: 16, z_dim: 4, base_channels: 8, variant, seed: 1 };
        let d = DiscriminatorConfig { image_size: 16, base_channels: 4, feature_tap_layer: 3, seed: 2 };
        GanState::init(&g, &d, TrainConfig::default().adam).unwrap()
    }

    fn cfg() -> TrainConfig {
        TrainConfig { batch_size: 4, z_dim: 4, epochs: 1, ..Default::default() }
    }

    fn batch(n: usize, value: f64) -> Tensor {
        Tensor::full(&[n, 1, 16, 16], value)
    }

    #[test]
    fn losses_rederive_from_reported_outputs() {
        for loss in [GeneratorLoss::NonSaturating, GeneratorLoss::Minimax] {
            let mut state = tiny(Variant::Iagan);
            let c = TrainConfig { generator_loss: loss, ..cfg() };
            let r = gan_train_step(&mut state, &batch(4, 0.5), 0, &c).unwrap();
            assert_eq!(r.d_loss, bce(&r.d_real, 1.0) + bce(&r.d_fake, 0.0));
            let expected = match loss {
                GeneratorLoss::NonSaturating => bce(&r.d_fake_g, 1.0),
                GeneratorLoss::Minimax => -bce(&r.d_fake_g, 0.0),
            };
            assert_eq!(r.g_loss, expected);
        }
    }

    #[test]
    fn steps_per_epoch_arithmetic() {
        let c = TrainConfig::default();
        assert_eq!(c.steps_per_epoch(96), 3);
        assert_eq!(c.steps_per_epoch(100), 3);
        assert_eq!(c.steps_per_epoch(10), 1);
        assert_eq!(c.steps_per_epoch(1), 0);
    }

    #[test]
    fn equal_seeds_give_identical_logs() {
        let data = Tensor::stack(&[batch(4, 0.2), batch(4, -0.3)]).unwrap();
        let run = || train(&data, tiny(Variant::Dcgan), &TrainConfig { epochs: 2, ..cfg() }, &mut NoHooks).unwrap();
        let (a, la) = run();
        let (b, lb) = run();
        assert_eq!(la, lb);
        assert_eq!(a, b);
        assert_eq!(la.steps.len(), 4);
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut state = tiny(Variant::Iagan);
        assert!(gan_train_step(&mut state, &batch(4, 1.5), 0, &cfg()).is_err());
        assert!(gan_train_step(&mut state, &batch(1, 0.0), 0, &cfg()).is_err());
        let empty_cfg = TrainConfig { batch_size: 1, ..cfg() };
        assert!(matches!(empty_cfg.validate(), Err(Error::Config(_))));
    }
}
