//! Anomaly scores by latent-space search against a frozen generator and
//! discriminator.
//!
//! For a test image `x` the search minimises
//! `L(z) = (1 - λ)·Σ|x - G(z)| + λ·Σ|f(x) - f(G(z))|` over `z`, where `f` is
//! the discriminator feature tap, and reports the same expression at the
//! returned `z` as the anomaly score.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::layers::NormMode;
use crate::models::{discriminator_forward, generator_forward, NetworkParams, Variant};
use crate::rng::{derive_indexed, derive_seed, normal_vec, rng_from_seed};
use crate::tensor::{adam_step, AdamConfig, AdamState, Tape, Tensor};
use crate::training::noise_images;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ZOptimizer {
    GradientDescent,
    Adam,
}

impl fmt::Display for ZOptimizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ZOptimizer::GradientDescent => "gradient_descent",
            ZOptimizer::Adam => "adam",
        })
    }
}

impl FromStr for ZOptimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gradient_descent" | "gd" => Ok(ZOptimizer::GradientDescent),
            "adam" => Ok(ZOptimizer::Adam),
            other => Err(Error::Config(format!("unknown z optimizer {other:?}"))),
        }
    }
}

/// What an image-conditioned generator's encoder sees during search.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Conditioning {
    /// The image being scored.
    TestImage,
    /// Seeded uniform noise in [-1, 1].
    Noise,
}

impl fmt::Display for Conditioning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Conditioning::TestImage => "test_image",
            Conditioning::Noise => "noise",
        })
    }
}

impl FromStr for Conditioning {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "test_image" => Ok(Conditioning::TestImage),
            "noise" => Ok(Conditioning::Noise),
            other => Err(Error::Config(format!("unknown conditioning {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchConfig {
    pub iterations: usize,
    pub lambda: f64,
    /// Base seed; each image derives its own.
    pub seed: u64,
    pub step_size: f64,
    pub optimizer: ZOptimizer,
    pub track_best: bool,
    /// Independent searches per image; the one with the lowest loss is kept.
    pub restarts: usize,
    pub conditioning: Conditioning,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            iterations: 800,
            lambda: 0.2,
            seed: 0,
            step_size: 0.01,
            optimizer: ZOptimizer::Adam,
            track_best: true,
            restarts: 1,
            conditioning: Conditioning::TestImage,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        if self.iterations == 0 || self.restarts == 0 {
            return Err(Error::Config("iterations and restarts must be at least 1".into()));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config(format!("step size must be positive, got {}", self.step_size)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyResult {
    pub score: f64,
    pub residual: f64,
    pub discrimination: f64,
    pub lambda: f64,
    pub z: Vec<f64>,
    /// Loss at the iterate of every iteration, before its update.
    pub trajectory: Vec<f64>,
    pub seed: u64,
    /// Restart that produced `z`.
    pub restart: usize,
    /// Encoder input used, for image-conditioned generators.
    pub conditioning: Option<Conditioning>,
}

impl AnomalyResult {
    /// Running minimum of the trajectory.
    pub fn best_so_far(&self) -> Vec<f64> {
        let mut best = f64::INFINITY;
        self.trajectory
            .iter()
            .map(|&l| {
                best = best.min(l);
                best
            })
            .collect()
    }

    /// The score recomposed from the stored losses.
    pub fn recomposed(&self) -> f64 {
        mapping_loss(self.residual, self.discrimination, self.lambda)
    }
}

/// `Σ|x - gx|`.
pub fn residual_loss(x: &Tensor, gx: &Tensor) -> Result<f64> {
    if x.shape() != gx.shape() {
        return Err(Error::dim("residual_loss", format!("{:?} vs {:?}", x.shape(), gx.shape())));
    }
    Ok(x.data().iter().zip(gx.data()).map(|(a, b)| (a - b).abs()).sum())
}

/// `Σ|f(x) - f(gx)|` with `f` the discriminator feature tap.
pub fn discrimination_loss(x: &Tensor, gx: &Tensor, d: &NetworkParams) -> Result<f64> {
    let fx = features(d, x)?;
    let fg = features(d, gx)?;
    if fx.shape() != fg.shape() {
        return Err(Error::Contract(format!("feature shapes {:?} vs {:?}", fx.shape(), fg.shape())));
    }
    Ok(fx.data().iter().zip(fg.data()).map(|(a, b)| (a - b).abs()).sum())
}

/// `(1 - λ)·residual + λ·discrimination`.
pub fn mapping_loss(residual: f64, discrimination: f64, lambda: f64) -> f64 {
    (1.0 - lambda) * residual + lambda * discrimination
}

/// Inference-mode discriminator features `[N, F]`.
pub fn features(d: &NetworkParams, x: &Tensor) -> Result<Tensor> {
    let cfg = d.discriminator_config()?;
    let mut tape = Tape::new();
    let vars = d.bind(&mut tape, false);
    let mut buffers = d.buffers.clone();
    let xv = tape.constant(x.clone());
    let out = discriminator_forward(&mut tape, cfg, &vars, &mut buffers, NormMode::Infer, xv, true)?;
    Ok(tape.value(out.features).clone())
}

/// Per-image seed for the image called `id`.
pub fn image_seed(seed: u64, id: &str) -> u64 {
    derive_seed(seed, id)
}

fn check_pair(g: &NetworkParams, d: &NetworkParams) -> Result<usize> {
    let gc = g.generator_config()?;
    let dc = d.discriminator_config()?;
    if gc.image_size != dc.image_size {
        return Err(Error::Config(format!(
            "generator size {} vs discriminator size {}",
            gc.image_size, dc.image_size
        )));
    }
    Ok(gc.image_size)
}

struct Eval {
    residual: Vec<f64>,
    discrimination: Vec<f64>,
    grad: Option<Vec<f64>>,
}

/// Evaluates the mapping loss of every image at `z` and optionally its
/// gradient with respect to `z`. Images are independent: batch norm runs on
/// running statistics.
fn evaluate(
    g: &NetworkParams,
    d: &NetworkParams,
    x: &Tensor,
    fx: &Tensor,
    cond: Option<&Tensor>,
    z: &Tensor,
    lambda: f64,
    want_grad: bool,
) -> Result<Eval> {
    let gcfg = g.generator_config()?;
    let dcfg = d.discriminator_config()?;
    let mut tape = Tape::new();
    let gvars = g.bind(&mut tape, false);
    let dvars = d.bind(&mut tape, false);
    let mut gbuf = g.buffers.clone();
    let mut dbuf = d.buffers.clone();
    let zv = if want_grad { tape.param(z.clone()) } else { tape.constant(z.clone()) };
    let cv = cond.map(|c| tape.constant(c.clone()));
    let gx = generator_forward(&mut tape, gcfg, &gvars, &mut gbuf, NormMode::Infer, zv, cv)?;
    let xv = tape.constant(x.clone());
    let diff = tape.sub(xv, gx)?;
    let adiff = tape.abs(diff)?;
    let lr = tape.reduce_sum(adiff, Some(&[1, 2, 3]))?;
    let fg = discriminator_forward(&mut tape, dcfg, &dvars, &mut dbuf, NormMode::Infer, gx, true)?.features;
    let fxv = tape.constant(fx.clone());
    let fdiff = tape.sub(fxv, fg)?;
    let afdiff = tape.abs(fdiff)?;
    let ld = tape.reduce_sum(afdiff, Some(&[1]))?;
    let residual = tape.data(lr).to_vec();
    let discrimination = tape.data(ld).to_vec();
    let grad = if want_grad {
        let a = tape.scale(lr, 1.0 - lambda)?;
        let b = tape.scale(ld, lambda)?;
        let per = tape.add(a, b)?;
        let total = tape.sum_all(per)?;
        tape.backward(total)?;
        Some(tape.grad(zv).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; z.len()]))
    } else {
        None
    };
    Ok(Eval { residual, discrimination, grad })
}

fn initial_latents(seeds: &[u64], restart: usize, z_dim: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(seeds.len() * z_dim);
    for &s in seeds {
        data.extend(normal_vec(&mut rng_from_seed(derive_indexed(s, "z_init", restart as u64)), z_dim));
    }
    Tensor::new(vec![seeds.len(), z_dim], data)
}

fn conditioning_batch(
    g: &NetworkParams,
    x: &Tensor,
    seeds: &[u64],
    how: Conditioning,
) -> Result<(Option<Tensor>, Option<Conditioning>)> {
    if g.generator_config()?.variant != Variant::Iagan {
        return Ok((None, None));
    }
    let cond = match how {
        Conditioning::TestImage => x.clone(),
        Conditioning::Noise => {
            let per = x.len() / seeds.len().max(1);
            let mut data = Vec::with_capacity(x.len());
            for &s in seeds {
                data.extend_from_slice(noise_images(&[per], derive_seed(s, "condition"))?.data());
            }
            Tensor::new(x.shape().to_vec(), data)?
        }
    };
    Ok((Some(cond), Some(how)))
}

/// Latent search for each image of `x [N,1,S,S]`, image `i` seeded with
/// `seeds[i]`. `z_init [N, z_dim]` replaces the seeded Gaussian start of the
/// first restart.
pub fn latent_search_batch(
    x: &Tensor,
    g: &NetworkParams,
    d: &NetworkParams,
    cfg: &SearchConfig,
    seeds: &[u64],
    z_init: Option<&Tensor>,
) -> Result<Vec<AnomalyResult>> {
    cfg.validate()?;
    let s = check_pair(g, d)?;
    let z_dim = g.generator_config()?.z_dim;
    let sh = x.shape();
    if sh.len() != 4 || sh[1] != 1 || sh[2] != s || sh[3] != s {
        return Err(Error::dim("latent_search", format!("images {sh:?} for size {s}")));
    }
    let n = sh[0];
    if seeds.len() != n {
        return Err(Error::Contract(format!("{} seeds for {n} images", seeds.len())));
    }
    if let Some(z0) = z_init {
        if z0.shape() != [n, z_dim] {
            return Err(Error::dim("latent_search", format!("z_init {:?}, expected [{n}, {z_dim}]", z0.shape())));
        }
    }
    let fx = features(d, x)?;
    let (cond, conditioning) = conditioning_batch(g, x, seeds, cfg.conditioning)?;
    let mut results: Vec<Option<AnomalyResult>> = vec![None; n];
    for restart in 0..cfg.restarts {
        let mut z = match (restart, z_init) {
            (0, Some(z0)) => Tensor::new(vec![n, z_dim], z0.data().to_vec())?,
            _ => initial_latents(seeds, restart, z_dim)?,
        };
        let mut trajectories = vec![Vec::with_capacity(cfg.iterations); n];
        let mut best: Vec<(f64, f64, f64, Vec<f64>)> = vec![(f64::INFINITY, 0.0, 0.0, Vec::new()); n];
        let mut adam = AdamState::new(AdamConfig::default());
        for it in 0..cfg.iterations {
            let ev = evaluate(g, d, x, &fx, cond.as_ref(), &z, cfg.lambda, true)?;
            for i in 0..n {
                let loss = mapping_loss(ev.residual[i], ev.discrimination[i], cfg.lambda);
                trajectories[i].push(loss);
                if !loss.is_finite() {
                    return Err(Error::SearchDiverged {
                        iteration: it,
                        detail: format!("image {i}: loss {loss}"),
                        trajectory: std::mem::take(&mut trajectories[i]),
                    });
                }
                if loss < best[i].0 || best[i].3.is_empty() {
                    best[i] = (loss, ev.residual[i], ev.discrimination[i], z.data()[i * z_dim..(i + 1) * z_dim].to_vec());
                }
            }
            let grad = ev.grad.expect("gradient requested");
            match cfg.optimizer {
                ZOptimizer::GradientDescent => {
                    for (v, gv) in z.data_mut().iter_mut().zip(&grad) {
                        *v -= cfg.step_size * gv;
                    }
                }
                ZOptimizer::Adam => {
                    let mut params = BTreeMap::from([("z".to_string(), z)]);
                    adam_step(&mut params, &BTreeMap::from([("z".to_string(), grad)]), &mut adam, cfg.step_size)?;
                    z = params.remove("z").expect("z present");
                }
            }
        }
        if !cfg.track_best {
            let ev = evaluate(g, d, x, &fx, cond.as_ref(), &z, cfg.lambda, false)?;
            for (i, b) in best.iter_mut().enumerate() {
                let loss = mapping_loss(ev.residual[i], ev.discrimination[i], cfg.lambda);
                if !loss.is_finite() {
                    return Err(Error::SearchDiverged {
                        iteration: cfg.iterations,
                        detail: format!("image {i}: final loss {loss}"),
                        trajectory: std::mem::take(&mut trajectories[i]),
                    });
                }
                *b = (loss, ev.residual[i], ev.discrimination[i], z.data()[i * z_dim..(i + 1) * z_dim].to_vec());
            }
        }
        for (i, ((loss, residual, discrimination, zi), traj)) in best.into_iter().zip(trajectories).enumerate() {
            if results[i].as_ref().is_some_and(|r| r.score <= loss) {
                continue;
            }
            results[i] = Some(AnomalyResult {
                score: loss,
                residual,
                discrimination,
                lambda: cfg.lambda,
                z: zi,
                trajectory: traj,
                seed: seeds[i],
                restart,
                conditioning,
            });
        }
    }
    Ok(results.into_iter().map(|r| r.expect("at least one restart")).collect())
}

/// Latent search for one `[1,S,S]` image seeded with `cfg.seed`.
pub fn latent_search(x: &Tensor, g: &NetworkParams, d: &NetworkParams, cfg: &SearchConfig) -> Result<AnomalyResult> {
    latent_search_from(x, g, d, cfg, None)
}

/// As [`latent_search`], starting the first restart from `z_init [z_dim]`.
pub fn latent_search_from(
    x: &Tensor,
    g: &NetworkParams,
    d: &NetworkParams,
    cfg: &SearchConfig,
    z_init: Option<&[f64]>,
) -> Result<AnomalyResult> {
    let batch = as_batch(x)?;
    let z0 = z_init.map(|z| Tensor::new(vec![1, z.len()], z.to_vec())).transpose()?;
    let mut out = latent_search_batch(&batch, g, d, cfg, &[cfg.seed], z0.as_ref())?;
    Ok(out.remove(0))
}

fn as_batch(x: &Tensor) -> Result<Tensor> {
    match x.shape() {
        [1, h, w] => Tensor::new(vec![1, 1, *h, *w], x.data().to_vec()),
        [1, 1, _, _] => Ok(x.clone()),
        other => Err(Error::dim("latent_search", format!("expected one [1,S,S] image, got {other:?}"))),
    }
}

/// A generator/discriminator pair trained on one class.
#[derive(Debug, Clone)]
pub struct ScoringModel {
    pub name: String,
    pub generator: NetworkParams,
    pub discriminator: NetworkParams,
}

/// Sum of one independent search per model. Model `k` searches with seed
/// `derive_indexed(seed, "model", k)`.
pub fn dual_anomaly_score_batch(
    x: &Tensor,
    models: &[ScoringModel],
    cfg: &SearchConfig,
    seeds: &[u64],
) -> Result<Vec<Vec<AnomalyResult>>> {
    if models.is_empty() {
        return Err(Error::Config("scoring needs at least one model".into()));
    }
    let mut per_model = Vec::with_capacity(models.len());
    for (k, m) in models.iter().enumerate() {
        let model_seeds: Vec<u64> = seeds.iter().map(|&s| derive_indexed(s, "model", k as u64)).collect();
        per_model.push(latent_search_batch(x, &m.generator, &m.discriminator, cfg, &model_seeds, None)?);
    }
    Ok((0..seeds.len()).map(|i| per_model.iter().map(|r| r[i].clone()).collect()).collect())
}

/// Single-image form of [`dual_anomaly_score_batch`]; returns the summed
/// score and the per-model results.
pub fn dual_anomaly_score(x: &Tensor, models: &[ScoringModel], cfg: &SearchConfig) -> Result<(f64, Vec<AnomalyResult>)> {
    let mut out = dual_anomaly_score_batch(&as_batch(x)?, models, cfg, &[cfg.seed])?;
    let parts = out.remove(0);
    Ok((parts.iter().map(|r| r.score).sum(), parts))
}

pub const SCORE_HEADER: &str = "image_id,true_label,score,residual,discrimination,iterations,seed";

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRecord {
    pub image_id: String,
    pub true_label: String,
    pub score: f64,
    pub residual: f64,
    pub discrimination: f64,
    pub iterations: usize,
    pub seed: u64,
}

/// Test images to score: `(id, label, [1,S,S] image)`.
pub type LabelledImage = (String, String, Tensor);

/// Scores every image against every model, summing across models. Images
/// are searched `batch` at a time; each image's seed derives from its id.
pub fn score_images(
    images: &[LabelledImage],
    models: &[ScoringModel],
    cfg: &SearchConfig,
    batch: usize,
    mut progress: impl FnMut(usize, usize),
) -> Result<(Vec<ScoreRecord>, Vec<Vec<AnomalyResult>>)> {
    let batch = batch.max(1);
    let mut records = Vec::with_capacity(images.len());
    let mut details = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch) {
        let seeds: Vec<u64> = chunk.iter().map(|(id, _, _)| image_seed(cfg.seed, id)).collect();
        let mut data = Vec::new();
        let mut shape = None;
        for (_, _, img) in chunk {
            let b = as_batch(img)?;
            shape.get_or_insert_with(|| b.shape().to_vec());
            data.extend_from_slice(b.data());
        }
        let mut sh = shape.expect("non-empty chunk");
        sh[0] = chunk.len();
        let x = Tensor::new(sh, data)?;
        for ((parts, (id, label, _)), &seed) in dual_anomaly_score_batch(&x, models, cfg, &seeds)?.into_iter().zip(chunk).zip(&seeds) {
            records.push(ScoreRecord {
                image_id: id.clone(),
                true_label: label.clone(),
                score: parts.iter().map(|r| r.score).sum(),
                residual: parts.iter().map(|r| r.residual).sum(),
                discrimination: parts.iter().map(|r| r.discrimination).sum(),
                iterations: cfg.iterations,
                seed,
            });
            details.push(parts);
        }
        progress(records.len(), images.len());
    }
    Ok((records, details))
}

pub fn scores_to_csv(records: &[ScoreRecord]) -> String {
    let mut out = format!("{SCORE_HEADER}\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.image_id, r.true_label, r.score, r.residual, r.discrimination, r.iterations, r.seed
        ));
    }
    out
}

pub fn scores_from_csv(text: &str) -> Result<Vec<ScoreRecord>> {
    let mut lines = text.lines();
    let mut offset = 0;
    match lines.next() {
        Some(h) if h.trim() == SCORE_HEADER => offset += h.len() + 1,
        _ => return Err(Error::Format { offset: 0, detail: format!("expected header {SCORE_HEADER:?}") }),
    }
    let mut out = Vec::new();
    for line in lines {
        let at = offset;
        offset += line.len() + 1;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |what: &str| Error::Format { offset: at, detail: format!("bad {what} in {line:?}") };
        let cols: Vec<&str> = line.trim().split(',').collect();
        if cols.len() != 7 {
            return Err(bad("column count"));
        }
        out.push(ScoreRecord {
            image_id: cols[0].to_string(),
            true_label: cols[1].to_string(),
            score: cols[2].parse().map_err(|_| bad("score"))?,
            residual: cols[3].parse().map_err(|_| bad("residual"))?,
            discrimination: cols[4].parse().map_err(|_| bad("discrimination"))?,
            iterations: cols[5].parse().map_err(|_| bad("iterations"))?,
            seed: cols[6].parse().map_err(|_| bad("seed"))?,
        });
    }
    Ok(out)
}

pub fn write_scores(records: &[ScoreRecord], path: &Path) -> Result<()> {
    fs::write(path, scores_to_csv(records)).map_err(|e| Error::io(path, e))
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreRecord>> {
    scores_from_csv(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

/// `iteration,loss,best` rows for one search.
pub fn trajectory_csv(result: &AnomalyResult) -> String {
    let mut out = String::from("iteration,loss,best\n");
    for (i, (l, b)) in result.trajectory.iter().zip(result.best_so_far()).enumerate() {
        out.push_str(&format!("{i},{l},{b}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{generate, init_discriminator, init_generator, DiscriminatorConfig, GeneratorConfig};

    fn pair(variant: Variant) -> (NetworkParams, NetworkParams) {
        let g = init_generator(&GeneratorConfig { image_size: 16, z_dim: 8, base_channels: 8, variant, seed: 1 }).unwrap();
        let d = init_discriminator(&DiscriminatorConfig { image_size: 16, base_channels: 4, feature_tap_layer: 3, seed: 2 })
            .unwrap();
        (g, d)
    }

    fn quick(iterations: usize) -> SearchConfig {
        SearchConfig { iterations, seed: 4, ..Default::default() }
    }

    #[test]
    fn loss_formula_cases() {
        assert_eq!(mapping_loss(10.0, 5.0, 0.2), 9.0);
        assert_eq!(mapping_loss(3.25, 7.5, 0.0), 3.25);
        assert_eq!(mapping_loss(3.25, 7.5, 1.0), 7.5);
        let x = Tensor::full(&[1, 4, 4], 0.1);
        let y = Tensor::full(&[1, 4, 4], 0.6);
        assert_eq!(residual_loss(&x, &x).unwrap(), 0.0);
        assert!((residual_loss(&x, &y).unwrap() - 8.0).abs() < 1e-12);
        assert_eq!(residual_loss(&x, &y).unwrap(), residual_loss(&y, &x).unwrap());
        assert!(residual_loss(&x, &Tensor::zeros(&[1, 4, 5])).is_err());
    }

    #[test]
    fn search_is_monotone_and_recomposes() {
        let (g, d) = pair(Variant::Dcgan);
        let x = generate(&g, &Tensor::full(&[1, 8], 0.3), None).unwrap();
        let x = Tensor::new(vec![1, 16, 16], x.into_data()).unwrap();
        let r = latent_search(&x, &g, &d, &quick(15)).unwrap();
        assert_eq!(r.trajectory.len(), 15);
        assert!(r.best_so_far().windows(2).all(|w| w[1] <= w[0]));
        assert!(r.score <= r.trajectory[0]);
        assert_eq!(r.score.to_bits(), r.recomposed().to_bits());
        assert_eq!(r, latent_search(&x, &g, &d, &quick(15)).unwrap());
    }

    #[test]
    fn search_matches_direct_loss_evaluation() {
        let (g, d) = pair(Variant::Iagan);
        let x = Tensor::new(vec![1, 16, 16], (0..256).map(|i| ((i as f64) * 0.37).sin() * 0.8).collect()).unwrap();
        let r = latent_search(&x, &g, &d, &quick(5)).unwrap();
        assert_eq!(r.conditioning, Some(Conditioning::TestImage));
        let xb = as_batch(&x).unwrap();
        let gx = generate(&g, &Tensor::new(vec![1, 8], r.z.clone()).unwrap(), Some(&xb)).unwrap();
        let lr = residual_loss(&xb, &gx).unwrap();
        let ld = discrimination_loss(&xb, &gx, &d).unwrap();
        assert!((lr - r.residual).abs() < 1e-9 * lr.max(1.0));
        assert!((ld - r.discrimination).abs() < 1e-9 * ld.max(1.0));
    }

    #[test]
    fn batching_does_not_change_results() {
        let (g, d) = pair(Variant::Iagan);
        let imgs: Vec<LabelledImage> = (0..3)
            .map(|k| {
                let t = Tensor::new(vec![1, 16, 16], (0..256).map(|i| ((i * (k + 2)) as f64 * 0.11).cos() * 0.7).collect());
                (format!("img{k}"), "a".to_string(), t.unwrap())
            })
            .collect();
        let model = ScoringModel { name: "m".into(), generator: g, discriminator: d };
        let cfg = quick(4);
        let (one, _) = score_images(&imgs, std::slice::from_ref(&model), &cfg, 1, |_, _| {}).unwrap();
        let (all, _) = score_images(&imgs, std::slice::from_ref(&model), &cfg, 3, |_, _| {}).unwrap();
        for (a, b) in one.iter().zip(&all) {
            assert!((a.score - b.score).abs() <= 1e-12 * a.score.abs().max(1.0), "{} vs {}", a.score, b.score);
        }
        assert_eq!(scores_from_csv(&scores_to_csv(&all)).unwrap(), all);
    }

    #[test]
    fn dual_score_sums_parts() {
        let (g, d) = pair(Variant::Dcgan);
        let (g2, d2) = pair(Variant::Iagan);
        let models = [
            ScoringModel { name: "a".into(), generator: g, discriminator: d },
            ScoringModel { name: "b".into(), generator: g2, discriminator: d2 },
        ];
        let x = Tensor::full(&[1, 16, 16], -0.2);
        let (total, parts) = dual_anomaly_score(&x, &models, &quick(3)).unwrap();
        assert_eq!(total, parts[0].score + parts[1].score);
        assert!(parts.iter().all(|p| total >= p.score));
        assert_ne!(parts[0].seed, parts[1].seed);
    }

    #[test]
    fn rejects_bad_config() {
        let (g, d) = pair(Variant::Dcgan);
        let x = Tensor::zeros(&[1, 16, 16]);
        assert!(latent_search(&x, &g, &d, &SearchConfig { lambda: 1.5, ..quick(2) }).is_err());
        assert!(latent_search(&x, &g, &d, &SearchConfig { iterations: 0, ..quick(2) }).is_err());
    }
}
