use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use super::config::RunConfig;
use super::{split_list, with_outputs};
use crate::anogan::{score_images, scores_to_csv, trajectory_csv, read_scores, LabelledImage, ScoreRecord, ScoringModel};
use crate::augment::{
    augment_dcgan, augment_iagan, augment_traditional_set, plan_none, records_from_csv, render, write_augmented,
    AugmentManifest, Counts, IaganArithmetic, Method, SourceImage, MANIFEST_FILE as AUGMENT_MANIFEST,
};
use crate::data::{
    load_image, load_images, make_split, mosaic, save_image, stack, synth_dataset, unstack, PhantomClass,
    PhantomParams, Role, SplitConfig, SplitManifest, SPLIT_FILE,
};
use crate::error::{Error, Result};
use crate::eval::{
    auc, compare_experiments, labelled_scores, metrics_to_csv, operating_point, roc_curve, MetricsRow, MIN_SENS,
    MIN_SPEC,
};
use crate::models::{checkpoint_meta, generate, load_checkpoint, save_checkpoint, NetworkParams, Variant};
use crate::rng::{derive_seed, normal_vec, rng_from_seed};
use crate::tensor::Tensor;
use crate::training::{noise_images, train, EncoderInput, GanState, StepRecord, TrainHooks, TrainLog};

const GENERATOR_DIR: &str = "generator";
const DISCRIMINATOR_DIR: &str = "discriminator";
const TRAIN_LOG_FILE: &str = "train_log.csv";
/// Wall-clock training time, kept apart from the deterministic outputs.
pub const TIMING_FILE: &str = "timing.txt";
const SAMPLES_DIR: &str = "samples";
const SCORES_FILE: &str = "scores.csv";
const MODEL_SCORES_FILE: &str = "model_scores.csv";
const METRICS_FILE: &str = "metrics.csv";
const SAMPLE_GRID: usize = 16;
/// Epochs at which training-progress mosaics are kept.
const EPOCH_MARKS: [usize; 7] = [5, 10, 25, 50, 75, 100, 150];

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn phantom_classes(cfg: &RunConfig) -> Result<Vec<PhantomClass>> {
    split_list(&cfg.classes).iter().map(|c| c.parse()).collect()
}

pub struct SynthOptions {
    pub out: PathBuf,
    pub train_caps: Vec<(String, usize)>,
    pub phantom_spec: Option<PathBuf>,
}

/// Writes phantoms, `phantom.spec` and `split.csv` under `opts.out`.
pub fn synth(cfg: &RunConfig, opts: &SynthOptions) -> Result<SplitManifest> {
    let classes = phantom_classes(cfg)?;
    let params = match &opts.phantom_spec {
        Some(p) => PhantomParams::load(p)?,
        None => PhantomParams::default(),
    };
    with_outputs(&opts.out, "synth", cfg, || {
        if cfg.per_class == 0 {
            eprintln!("warning: --per-class 0 writes an empty dataset");
        }
        let listing =
            synth_dataset(&opts.out, &classes, cfg.per_class, cfg.size, derive_seed(cfg.seed, "phantoms"), &params)?;
        let split_cfg = SplitConfig {
            test_per_class: if cfg.per_class == 0 { 0 } else { cfg.test_per_class },
            train_cap: opts.train_caps.iter().cloned().collect(),
            seed: derive_seed(cfg.seed, "split"),
        };
        let split = make_split(&listing, &split_cfg, "phantoms")?;
        split.save(&opts.out.join(SPLIT_FILE))?;
        Ok(split)
    })
}

fn load_split(data: &Path) -> Result<SplitManifest> {
    SplitManifest::load(&data.join(SPLIT_FILE))
}

/// `(id, image)` pairs of `class` in `role`.
fn split_images(data: &Path, split: &SplitManifest, class: &str, role: Role, size: usize) -> Result<Vec<(String, Tensor)>> {
    let ids = split.ids(class, role);
    if ids.is_empty() {
        return Ok(Vec::new());
    }
    let batch = load_images(data, class, ids, size)?;
    Ok(ids.iter().cloned().zip(unstack(&batch)?).collect())
}

/// Images of `class` listed in an augmented set's manifest.
fn augmented_images(dir: &Path, class: &str, size: usize) -> Result<Vec<(String, Tensor)>> {
    let path = dir.join(AUGMENT_MANIFEST);
    let records = records_from_csv(&fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?)?;
    records
        .iter()
        .filter(|r| r.class == class)
        .map(|r| Ok((r.out_id.clone(), load_image(&dir.join(class).join(format!("{}.pgm", r.out_id)), Some(size))?)))
        .collect()
}

pub struct TrainOptions {
    pub data: PathBuf,
    pub out: PathBuf,
    pub variant: Variant,
    pub class: String,
    /// Augmented set to train on instead of the split's train images.
    pub augmented: Option<PathBuf>,
}

struct SampleHook {
    dir: PathBuf,
    every: usize,
    class: String,
    z: Tensor,
    cond: Option<Tensor>,
    epoch_marks: BTreeSet<usize>,
}

impl SampleHook {
    fn save(&self, state: &GanState, name: &str) -> Result<String> {
        let samples = generate(&state.generator, &self.z, self.cond.as_ref())?;
        let path = self.dir.join(format!("{name}.pgm"));
        save_image(&mosaic(&samples, SAMPLE_GRID / 2)?, &path)?;
        Ok(format!("{SAMPLES_DIR}/{name}.pgm"))
    }
}

impl TrainHooks for SampleHook {
    fn on_step(&mut self, r: &StepRecord, state: &GanState) -> Result<()> {
        if self.every > 0 && r.step.is_multiple_of(self.every) {
            eprintln!(
                "train {}: step {} d_loss {:.4} g_loss {:.4} D(real) {:.3} D(fake) {:.3}",
                self.class, r.step, r.d_loss, r.g_loss, r.d_real_mean, r.d_fake_mean
            );
            self.save(state, &format!("step_{:06}", r.step))?;
        }
        Ok(())
    }

    fn on_epoch_end(&mut self, epoch: usize, last: bool, state: &GanState) -> Result<Option<String>> {
        if last {
            return self.save(state, "final").map(Some);
        }
        if self.epoch_marks.contains(&(epoch + 1)) {
            return self.save(state, &format!("epoch_{:04}", epoch + 1)).map(Some);
        }
        Ok(None)
    }
}

/// Seed shared by every model of one variant and class, so augmentation
/// variants differ only in their training data.
fn model_seed(cfg: &RunConfig, variant: Variant, class: &str) -> u64 {
    derive_seed(cfg.seed, &format!("model:{variant}:{class}"))
}

fn condition_batch(images: &[Tensor], n: usize, size: usize) -> Result<Tensor> {
    let picked: Vec<Tensor> = (0..n).map(|i| images[i % images.len()].clone()).collect();
    stack(&picked, size)
}

/// Trains one GAN and writes its checkpoints, log and sample mosaics.
pub fn train_model(cfg: &RunConfig, opts: &TrainOptions) -> Result<TrainLog> {
    cfg.validate()?;
    let images = match &opts.augmented {
        Some(dir) => augmented_images(dir, &opts.class, cfg.size)?,
        None => split_images(&opts.data, &load_split(&opts.data)?, &opts.class, Role::Train, cfg.size)?,
    };
    if images.len() < 2 {
        return Err(Error::Config(format!("class {:?} has {} training images, need 2", opts.class, images.len())));
    }
    let images: Vec<Tensor> = images.into_iter().map(|(_, t)| t).collect();
    let seed = model_seed(cfg, opts.variant, &opts.class);
    let gcfg = cfg.generator_config(opts.variant, seed);
    let dcfg = cfg.discriminator_config(seed);
    with_outputs(&opts.out, "train", cfg, || {
        let samples = opts.out.join(SAMPLES_DIR);
        mkdir(&samples)?;
        let z = Tensor::new(
            vec![SAMPLE_GRID, cfg.z_dim],
            normal_vec(&mut rng_from_seed(derive_seed(seed, "sample_z")), SAMPLE_GRID * cfg.z_dim),
        )?;
        let cond = match (opts.variant, cfg.encoder_input) {
            (Variant::Dcgan, _) => None,
            (Variant::Iagan, EncoderInput::Real) => Some(condition_batch(&images, SAMPLE_GRID, cfg.size)?),
            (Variant::Iagan, EncoderInput::Random) => {
                Some(noise_images(&[SAMPLE_GRID, 1, cfg.size, cfg.size], derive_seed(seed, "sample_cond"))?)
            }
        };
        let mut hook = SampleHook {
            dir: samples,
            every: cfg.sample_every,
            class: opts.class.clone(),
            z,
            cond,
            epoch_marks: EPOCH_MARKS.into_iter().collect(),
        };
        let state = GanState::init(&gcfg, &dcfg, cfg.adam())?;
        let started = Instant::now();
        let (state, log) = train(&stack(&images, cfg.size)?, state, &cfg.train_config(seed), &mut hook)?;
        let steps = log.steps.len().to_string();
        let variant = opts.variant.to_string();
        let encoder = cfg.encoder_input.to_string();
        let meta = [("class", opts.class.as_str()), ("variant", variant.as_str()), ("steps", steps.as_str()), ("encoder_input", encoder.as_str())];
        save_model(&opts.out, &state.generator, &state.discriminator, &meta)?;
        log.write_csv(&opts.out.join(TRAIN_LOG_FILE))?;
        write(&opts.out.join(TIMING_FILE), &format!("train_seconds {:.3}\n", started.elapsed().as_secs_f64()))?;
        Ok(log)
    })
}

/// Writes a generator/discriminator pair in the layout [`load_model`] reads.
pub fn save_model(dir: &Path, generator: &NetworkParams, discriminator: &NetworkParams, meta: &[(&str, &str)]) -> Result<()> {
    save_checkpoint(generator, &dir.join(GENERATOR_DIR), meta)?;
    save_checkpoint(discriminator, &dir.join(DISCRIMINATOR_DIR), meta)
}

/// A trained model directory as a scoring model, named by its class.
pub fn load_model(dir: &Path) -> Result<ScoringModel> {
    let generator = load_checkpoint(&dir.join(GENERATOR_DIR), None)?;
    let discriminator = load_checkpoint(&dir.join(DISCRIMINATOR_DIR), None)?;
    let meta = checkpoint_meta(&dir.join(GENERATOR_DIR))?;
    let name = meta.get("class").cloned().unwrap_or_else(|| dir.display().to_string());
    Ok(ScoringModel { name, generator, discriminator })
}

pub struct AugmentOptions {
    pub data: PathBuf,
    pub out: PathBuf,
    pub method: Method,
    pub generator: Option<PathBuf>,
    pub class: Option<String>,
    /// Input classes of the image-conditioned method; defaults to all.
    pub inputs: Option<Vec<String>>,
}

fn as_sources(class: &str, images: Vec<(String, Tensor)>) -> Vec<SourceImage> {
    images.into_iter().map(|(id, t)| (class.to_string(), id, t)).collect()
}

/// Writes an augmented copy of a class's training images under `opts.out`.
pub fn augment(cfg: &RunConfig, opts: &AugmentOptions) -> Result<Counts> {
    let split = load_split(&opts.data)?;
    let model = match &opts.generator {
        Some(dir) => Some(load_model(dir)?),
        None => None,
    };
    let target = match (&opts.class, &model) {
        (Some(c), _) => c.clone(),
        (None, Some(m)) => m.name.clone(),
        (None, None) => return Err(Error::Config("augment needs --class or --generator".into())),
    };
    let gan = || -> Result<&NetworkParams> {
        model.as_ref().map(|m| &m.generator).ok_or_else(|| Error::Config(format!("{} augmentation needs --generator", opts.method)))
    };
    let seed = derive_seed(cfg.seed, &format!("augment:{}:{target}", opts.method));
    let originals = as_sources(&target, split_images(&opts.data, &split, &target, Role::Train, cfg.size)?);
    with_outputs(&opts.out, "augment", cfg, || {
        let (manifest, images): (AugmentManifest, Vec<Tensor>) = match opts.method {
            Method::Iagan => {
                let classes = opts.inputs.clone().unwrap_or_else(|| split.classes.keys().cloned().collect());
                let mut inputs = Vec::new();
                for class in &classes {
                    if *class == target {
                        inputs.extend(originals.iter().cloned());
                    } else {
                        for role in [Role::Train, Role::Unused] {
                            inputs.extend(as_sources(class, split_images(&opts.data, &split, class, role, cfg.size)?));
                        }
                    }
                }
                let arithmetic = if cfg.table_arithmetic { IaganArithmetic::Table } else { IaganArithmetic::Prose };
                augment_iagan(gan()?, &target, &inputs, cfg.gan_copies, seed, arithmetic)?
            }
            Method::Dcgan => augment_dcgan(gan()?, &target, &originals, cfg.gan_copies, seed)?,
            Method::Traditional => augment_traditional_set(&target, &originals, cfg.traditional_copies, seed)?,
            Method::None => {
                let ids: Vec<String> = originals.iter().map(|(_, id, _)| id.clone()).collect();
                let manifest = plan_none(&target, &ids);
                manifest.verify(seed)?;
                let sources = originals.iter().map(|(_, id, t)| (id.clone(), t.clone())).collect();
                let images = render(&manifest, &sources, None)?;
                (manifest, images)
            }
        };
        write_augmented(&opts.out, &manifest, &images)?;
        let counts = manifest.counts();
        let (formula, expected) = manifest.formula();
        write(
            &opts.out.join("counts.txt"),
            &format!(
                "method = {}\nclass = {target}\noriginals = {}\ngenerated = {}\ntotal = {}\nformula = {formula} = {expected}\n",
                manifest.method, counts.originals, counts.generated, counts.total
            ),
        )?;
        Ok(counts)
    })
}

pub struct ScoreOptions {
    pub data: PathBuf,
    pub models: Vec<PathBuf>,
    pub role: Role,
    pub classes: Option<Vec<String>>,
    pub out: PathBuf,
    pub trajectories: bool,
}

/// Scores split images against one or more models and writes `scores.csv`.
pub fn score(cfg: &RunConfig, opts: &ScoreOptions) -> Result<Vec<ScoreRecord>> {
    cfg.validate()?;
    let split = load_split(&opts.data)?;
    let classes = opts.classes.clone().unwrap_or_else(|| split.classes.keys().cloned().collect());
    let mut images: Vec<LabelledImage> = Vec::new();
    for class in &classes {
        if !split.classes.contains_key(class) {
            return Err(Error::Config(format!("class {class:?} is not in the split")));
        }
        for (id, t) in split_images(&opts.data, &split, class, opts.role, cfg.size)? {
            images.push((id, class.clone(), t));
        }
    }
    if images.is_empty() {
        return Err(Error::Config(format!("no {} images to score", opts.role)));
    }
    let models = opts.models.iter().map(|d| load_model(d)).collect::<Result<Vec<_>>>()?;
    if models.is_empty() {
        return Err(Error::Config("score needs at least one model".into()));
    }
    let search = cfg.search_config();
    with_outputs(&opts.out, "score", cfg, || {
        let names: Vec<&str> = models.iter().map(|m| m.name.as_str()).collect();
        let (records, details) = score_images(&images, &models, &search, cfg.score_batch, |done, total| {
            eprintln!("score [{}]: {done}/{total}", names.join("+"));
        })?;
        write(&opts.out.join(SCORES_FILE), &scores_to_csv(&records))?;
        let mut parts = String::from("image_id,model,score,residual,discrimination\n");
        for (r, per_model) in records.iter().zip(&details) {
            for (m, a) in models.iter().zip(per_model) {
                writeln!(parts, "{},{},{},{},{}", r.image_id, m.name, a.score, a.residual, a.discrimination).expect("string write");
            }
        }
        write(&opts.out.join(MODEL_SCORES_FILE), &parts)?;
        if opts.trajectories {
            let dir = opts.out.join("trajectories");
            mkdir(&dir)?;
            for (r, per_model) in records.iter().zip(&details) {
                for (m, a) in models.iter().zip(per_model) {
                    write(&dir.join(format!("{}.{}.csv", r.image_id, m.name)), &trajectory_csv(a))?;
                }
            }
        }
        Ok(records)
    })
}

pub struct EvalOptions {
    pub scores: Vec<(String, PathBuf)>,
    pub baseline: Option<(String, PathBuf)>,
    pub positive: Option<String>,
    pub negatives: Option<Vec<String>>,
    pub out: PathBuf,
}

/// Writes `metrics.csv` and one ROC table per experiment.
pub fn evaluate(cfg: &RunConfig, opts: &EvalOptions) -> Result<Vec<MetricsRow>> {
    let mut experiments: Vec<(String, Vec<ScoreRecord>)> = Vec::new();
    for (name, path) in opts.baseline.iter().chain(&opts.scores) {
        if experiments.iter().any(|(n, _)| n == name) {
            return Err(Error::Config(format!("experiment name {name:?} given twice")));
        }
        experiments.push((name.clone(), read_scores(path)?));
    }
    let labels: BTreeSet<String> = experiments.iter().flat_map(|(_, r)| r.iter().map(|r| r.true_label.clone())).collect();
    let positive = match &opts.positive {
        Some(p) => p.clone(),
        None if labels.iter().all(|l| l == "0" || l == "1") => "1".to_string(),
        None => return Err(Error::Config(format!("labels {labels:?} need --positive"))),
    };
    let negatives: Vec<String> = match &opts.negatives {
        Some(n) => n.clone(),
        None => labels.iter().filter(|l| **l != positive).cloned().collect(),
    };
    let neg: Vec<&str> = negatives.iter().map(String::as_str).collect();
    with_outputs(&opts.out, "eval", cfg, || {
        let rows = if opts.baseline.is_some() {
            compare_experiments(&experiments, 0, &positive, &neg)?
        } else {
            experiments
                .iter()
                .map(|(name, records)| {
                    let (_, scores, labels) = labelled_scores(records, &positive, &neg);
                    Ok(MetricsRow {
                        experiment: name.clone(),
                        auc: auc(&scores, &labels)?,
                        p_vs_baseline: None,
                        point: operating_point(&scores, &labels, MIN_SENS, MIN_SPEC)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?
        };
        write(&opts.out.join(METRICS_FILE), &metrics_to_csv(&rows))?;
        for (name, records) in &experiments {
            let (_, scores, labels) = labelled_scores(records, &positive, &neg);
            let roc = roc_curve(&scores, &labels)?;
            let mut text = String::from("threshold,sensitivity,specificity,true_pos,false_pos\n");
            for p in &roc.points {
                writeln!(text, "{},{},{},{},{}", p.threshold, p.sensitivity, p.specificity, p.true_pos, p.false_pos).expect("string write");
            }
            write(&opts.out.join(format!("roc_{name}.csv")), &text)?;
        }
        for r in &rows {
            if let Some(d) = &r.p_vs_baseline {
                if let Some(diag) = &d.diagnostic {
                    eprintln!("warning: {}: {diag}", r.experiment);
                }
            }
        }
        Ok(rows)
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    /// Mean over samples of the smallest mean absolute difference to any
    /// training image, for the real-input run.
    pub real_input: f64,
    pub random_input: f64,
    pub samples: usize,
}

/// Smallest mean absolute difference between `sample` and any of `pool`.
fn nearest_residual(sample: &[f64], pool: &[Tensor]) -> f64 {
    pool.iter()
        .map(|t| t.data().iter().zip(sample).map(|(a, b)| (a - b).abs()).sum::<f64>() / sample.len() as f64)
        .fold(f64::INFINITY, f64::min)
}

const ABLATION_SAMPLES: usize = 64;

/// Trains the image-conditioned GAN on `class` twice, with real and with
/// random encoder inputs, and compares sample realism.
pub fn ablate_random_input(cfg: &RunConfig, data: &Path, out: &Path, class: &str) -> Result<AblationReport> {
    let split = load_split(data)?;
    let train_set: Vec<Tensor> = split_images(data, &split, class, Role::Train, cfg.size)?.into_iter().map(|(_, t)| t).collect();
    if train_set.len() < 2 {
        return Err(Error::Config(format!("class {class:?} has too few training images")));
    }
    with_outputs(out, "ablate-random-input", cfg, || {
        let mut means = Vec::new();
        let mut table = String::from("run,encoder_input,mean_nearest_residual,samples\n");
        for input in [EncoderInput::Real, EncoderInput::Random] {
            let run_cfg = RunConfig { encoder_input: input, ..cfg.clone() };
            let dir = out.join(input.to_string());
            let opts = TrainOptions { data: data.to_path_buf(), out: dir.clone(), variant: Variant::Iagan, class: class.to_string(), augmented: None };
            train_model(&run_cfg, &opts)?;
            let g = load_checkpoint(&dir.join(GENERATOR_DIR), None)?;
            let seed = derive_seed(cfg.seed, "ablation_samples");
            let z = Tensor::new(
                vec![ABLATION_SAMPLES, cfg.z_dim],
                normal_vec(&mut rng_from_seed(derive_seed(seed, "z")), ABLATION_SAMPLES * cfg.z_dim),
            )?;
            let cond = match input {
                EncoderInput::Real => condition_batch(&train_set, ABLATION_SAMPLES, cfg.size)?,
                EncoderInput::Random => noise_images(&[ABLATION_SAMPLES, 1, cfg.size, cfg.size], derive_seed(seed, "cond"))?,
            };
            let samples = generate(&g, &z, Some(&cond))?;
            save_image(&mosaic(&samples, 8)?, &out.join(format!("samples_{input}.pgm")))?;
            let per = cfg.size * cfg.size;
            let mean = samples.data().chunks(per).map(|s| nearest_residual(s, &train_set)).sum::<f64>() / ABLATION_SAMPLES as f64;
            writeln!(table, "{input},{input},{mean},{ABLATION_SAMPLES}").expect("string write");
            means.push(mean);
        }
        write(&out.join("ablation.csv"), &table)?;
        Ok(AblationReport { real_input: means[0], random_input: means[1], samples: ABLATION_SAMPLES })
    })
}

#[derive(Debug, Clone)]
pub struct PipelineReport {
    pub metrics: Vec<MetricsRow>,
    /// Mean summed score per class under the normal- and pneumonia-trained models.
    pub dual_means: BTreeMap<String, f64>,
    pub augmented_counts: BTreeMap<String, Counts>,
}

const NORMAL: &str = "normal";
const PNEUMONIA: &str = "pneumonia_like";
const COVID: &str = "covid_like";
/// Augmentation variants in report order; the first is the baseline.
pub const VARIANTS: [&str; 4] = ["none", "iagan", "dcgan", "traditional"];

impl PipelineReport {
    pub fn auc(&self, experiment: &str) -> Option<f64> {
        self.metrics.iter().find(|r| r.experiment == experiment).map(|r| r.auc)
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{PNEUMONIA}-trained models, {NORMAL} as anomaly:").expect("string write");
        for r in &self.metrics {
            let p = r.p_vs_baseline.as_ref().and_then(|d| d.p_value).map_or("-".to_string(), |p| format!("{p:.4}"));
            writeln!(s, "  {:<12} auc {:.4}  p {p}  sens {:.3} spec {:.3} acc {:.3}", r.experiment, r.auc, r.point.sensitivity, r.point.specificity, r.point.accuracy)
                .expect("string write");
        }
        let mut order: Vec<(&String, &f64)> = self.metrics.iter().map(|r| (&r.experiment, &r.auc)).collect();
        order.sort_by(|a, b| b.1.total_cmp(a.1).then(a.0.cmp(b.0)));
        let names: Vec<&str> = order.iter().map(|(n, _)| n.as_str()).collect();
        writeln!(s, "AUC ordering: {}", names.join(" > ")).expect("string write");
        writeln!(s, "summed {NORMAL} + {PNEUMONIA} model scores:").expect("string write");
        for (c, m) in &self.dual_means {
            writeln!(s, "  {c:<15} mean {m:.4}").expect("string write");
        }
        s
    }
}

/// End-to-end run: phantoms, the four augmentation variants of a
/// pneumonia-like model, a normal model for summed scoring, scores and
/// metrics.
pub fn pipeline(cfg: &RunConfig, out: &Path) -> Result<PipelineReport> {
    cfg.validate()?;
    let classes = phantom_classes(cfg)?;
    for c in [PhantomClass::Normal, PhantomClass::PneumoniaLike, PhantomClass::CovidLike] {
        if !classes.contains(&c) {
            return Err(Error::Config(format!("pipeline needs class {c} in `classes`")));
        }
    }
    with_outputs(out, "pipeline", cfg, || {
        let data = out.join("data");
        synth(cfg, &SynthOptions { out: data.clone(), train_caps: vec![(COVID.into(), 0)], phantom_spec: None })?;
        let models = out.join("models");
        let train = |name: &str, variant: Variant, class: &str, augmented: Option<PathBuf>| {
            let opts = TrainOptions { data: data.clone(), out: models.join(name), variant, class: class.into(), augmented };
            train_model(cfg, &opts)
        };
        train("none", Variant::Dcgan, PNEUMONIA, None)?;
        train("normal", Variant::Dcgan, NORMAL, None)?;
        train("iagan_generator", Variant::Iagan, PNEUMONIA, None)?;

        let mut augmented_counts = BTreeMap::new();
        let sets = out.join("augmented");
        for (variant, generator) in [("iagan", Some("iagan_generator")), ("dcgan", Some("none")), ("traditional", None)] {
            let opts = AugmentOptions {
                data: data.clone(),
                out: sets.join(variant),
                method: variant.parse()?,
                generator: generator.map(|g| models.join(g)),
                class: Some(PNEUMONIA.into()),
                inputs: Some(vec![PNEUMONIA.into(), NORMAL.into()]),
            };
            augmented_counts.insert(variant.to_string(), augment(cfg, &opts)?);
            train(variant, Variant::Dcgan, PNEUMONIA, Some(sets.join(variant)))?;
        }

        let scores = out.join("scores");
        let mut experiments = Vec::new();
        for variant in VARIANTS {
            let opts = ScoreOptions {
                data: data.clone(),
                models: vec![models.join(variant)],
                role: Role::Test,
                classes: Some(vec![NORMAL.into(), PNEUMONIA.into()]),
                out: scores.join(variant),
                trajectories: false,
            };
            score(cfg, &opts)?;
            experiments.push((variant.to_string(), scores.join(variant).join(SCORES_FILE)));
        }
        let dual = score(
            cfg,
            &ScoreOptions {
                data: data.clone(),
                models: vec![models.join("normal"), models.join("none")],
                role: Role::Test,
                classes: None,
                out: scores.join("dual"),
                trajectories: false,
            },
        )?;

        let eval_dir = out.join("eval");
        let metrics = evaluate(
            cfg,
            &EvalOptions {
                baseline: Some(experiments[0].clone()),
                scores: experiments[1..].to_vec(),
                positive: Some(NORMAL.into()),
                negatives: Some(vec![PNEUMONIA.into()]),
                out: eval_dir.clone(),
            },
        )?;
        let csv = metrics_to_csv(&metrics);
        write(&out.join(METRICS_FILE), &csv)?;

        let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for r in &dual {
            let e = sums.entry(r.true_label.clone()).or_default();
            e.0 += r.score;
            e.1 += 1;
        }
        let dual_means: BTreeMap<String, f64> = sums.iter().map(|(c, (s, n))| (c.clone(), s / *n as f64)).collect();
        let mut table = String::from("class,images,mean_score\n");
        for (c, (_, n)) in &sums {
            writeln!(table, "{c},{n},{}", dual_means[c]).expect("string write");
        }
        write(&out.join("dual_scores.csv"), &table)?;
        let report = PipelineReport { metrics, dual_means, augmented_counts };
        write(&out.join("report.txt"), &report.summary())?;
        Ok(report)
    })
}
