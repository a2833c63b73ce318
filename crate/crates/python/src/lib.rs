//! Python bindings: phantoms, GAN training and latent-search scoring, ROC
//! statistics and augmentation count planning.
//!
//! Images cross the boundary as `list[list[float]]` with values in `[-1, 1]`.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use iagan_core::anogan::{latent_search, AnomalyResult, Conditioning, ScoringModel, SearchConfig, ZOptimizer};
use iagan_core::augment::{plan_dcgan, plan_iagan, plan_none, plan_traditional, IaganArithmetic};
use iagan_core::cli::{load_model, save_model};
use iagan_core::data::{synth_phantom, PhantomClass, PhantomParams, PhantomSpec};
use iagan_core::eval;
use iagan_core::models::{generate, DiscriminatorConfig, GeneratorConfig, Variant};
use iagan_core::rng::{derive_seed, normal_vec, rng_from_seed};
use iagan_core::tensor::Tensor;
use iagan_core::training::{train, GanState, NoHooks, TrainConfig};

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for iagan_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(|e| PyValueError::new_err(e.to_string()))
    }
}

fn to_tensor(image: &[Vec<f64>]) -> PyResult<Tensor> {
    let s = image.len();
    if s == 0 || image.iter().any(|row| row.len() != s) {
        return Err(PyValueError::new_err("image must be a non-empty square list of rows"));
    }
    Tensor::new(vec![1, s, s], image.concat()).py()
}

fn to_batch(images: &[Vec<Vec<f64>>]) -> PyResult<Tensor> {
    let mut data = Vec::new();
    let mut side = None;
    for img in images {
        let t = to_tensor(img)?;
        if side.replace(t.shape()[1]).is_some_and(|s| s != t.shape()[1]) {
            return Err(PyValueError::new_err("images differ in size"));
        }
        data.extend_from_slice(t.data());
    }
    let s = side.ok_or_else(|| PyValueError::new_err("no images given"))?;
    Tensor::new(vec![images.len(), 1, s, s], data).py()
}

fn to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    let s = *t.shape().last().unwrap_or(&1);
    t.data().chunks(s.max(1)).map(<[f64]>::to_vec).collect()
}

fn to_images(batch: &Tensor) -> Vec<Vec<Vec<f64>>> {
    let (h, w) = (batch.shape()[2], batch.shape()[3]);
    batch.data().chunks((h * w).max(1)).map(|img| img.chunks(w.max(1)).map(<[f64]>::to_vec).collect()).collect()
}

/// One lung phantom of `class` (`normal`, `pneumonia_like` or `covid_like`).
#[pyfunction]
#[pyo3(signature = (class_name, size=32, seed=0))]
fn phantom(class_name: &str, size: usize, seed: u64) -> PyResult<Vec<Vec<f64>>> {
    let spec = PhantomSpec { class: class_name.parse::<PhantomClass>().py()?, size, seed };
    Ok(to_rows(&synth_phantom(&spec, &PhantomParams::default()).py()?))
}

/// Area under the ROC curve; `labels` mark the positive class.
#[pyfunction]
fn auc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    eval::auc(&scores, &labels).py()
}

/// `(threshold, sensitivity, specificity)` for ascending thresholds.
#[pyfunction]
fn roc_curve(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<Vec<(f64, f64, f64)>> {
    let roc = eval::roc_curve(&scores, &labels).py()?;
    Ok(roc.points.iter().map(|p| (p.threshold, p.sensitivity, p.specificity)).collect())
}

#[pyclass(frozen, get_all, module = "iagan")]
struct DeLong {
    auc_a: f64,
    auc_b: f64,
    variance: f64,
    z: Option<f64>,
    p_value: Option<f64>,
    diagnostic: Option<String>,
}

#[pymethods]
impl DeLong {
    fn __repr__(&self) -> String {
        format!("DeLong(auc_a={}, auc_b={}, z={:?}, p_value={:?})", self.auc_a, self.auc_b, self.z, self.p_value)
    }
}

/// Paired DeLong test of `AUC(a) - AUC(b)` over the same cases.
#[pyfunction]
fn delong_test(scores_a: Vec<f64>, scores_b: Vec<f64>, labels: Vec<bool>) -> PyResult<DeLong> {
    let r = eval::delong_test(&scores_a, &scores_b, &labels).py()?;
    Ok(DeLong { auc_a: r.auc_a, auc_b: r.auc_b, variance: r.variance, z: r.z, p_value: r.p_value, diagnostic: r.diagnostic })
}

/// `(threshold, sensitivity, specificity, accuracy, feasible)` of the best
/// point meeting both minimums.
#[pyfunction]
#[pyo3(signature = (scores, labels, min_sens=eval::MIN_SENS, min_spec=eval::MIN_SPEC))]
fn operating_point(scores: Vec<f64>, labels: Vec<bool>, min_sens: f64, min_spec: f64) -> PyResult<(f64, f64, f64, f64, bool)> {
    let p = eval::operating_point(&scores, &labels, min_sens, min_spec).py()?;
    Ok((p.threshold, p.sensitivity, p.specificity, p.accuracy, p.feasible))
}

/// Plans and verifies an augmented set; returns `(originals, generated, total)`.
///
/// `inputs` are `(class, id)` pairs. Non-image-conditioned methods use only
/// the inputs of `target`; `copies` is samples per input for GAN methods and
/// transforms per image for `traditional`.
#[pyfunction]
#[pyo3(signature = (method, target, inputs, copies, seed=0, table_arithmetic=false))]
fn plan_counts(
    method: &str,
    target: &str,
    inputs: Vec<(String, String)>,
    copies: usize,
    seed: u64,
    table_arithmetic: bool,
) -> PyResult<(usize, usize, usize)> {
    let own: Vec<String> = inputs.iter().filter(|(c, _)| c == target).map(|(_, id)| id.clone()).collect();
    let manifest = match method {
        "iagan" => {
            let arithmetic = if table_arithmetic { IaganArithmetic::Table } else { IaganArithmetic::Prose };
            plan_iagan(target, &inputs, copies, seed, arithmetic)
        }
        "dcgan" => plan_dcgan(target, &own, copies, seed),
        "traditional" => plan_traditional(target, &own, copies, seed),
        "none" => plan_none(target, &own),
        other => return Err(PyValueError::new_err(format!("unknown method {other:?}"))),
    };
    let c = manifest.verify(seed).py()?;
    Ok((c.originals, c.generated, c.total))
}

#[pyclass(frozen, get_all, module = "iagan")]
struct Anomaly {
    score: f64,
    residual: f64,
    discrimination: f64,
    z: Vec<f64>,
    trajectory: Vec<f64>,
}

#[pymethods]
impl Anomaly {
    /// Running minimum of the trajectory.
    fn best_so_far(&self) -> Vec<f64> {
        let mut best = f64::INFINITY;
        self.trajectory.iter().map(|&l| {
            best = best.min(l);
            best
        }).collect()
    }

    fn __repr__(&self) -> String {
        format!("Anomaly(score={}, residual={}, discrimination={})", self.score, self.residual, self.discrimination)
    }
}

impl From<AnomalyResult> for Anomaly {
    fn from(r: AnomalyResult) -> Self {
        Anomaly { score: r.score, residual: r.residual, discrimination: r.discrimination, z: r.z, trajectory: r.trajectory }
    }
}

/// A generator/discriminator pair.
#[pyclass(module = "iagan")]
struct Gan {
    model: ScoringModel,
}

#[pymethods]
impl Gan {
    /// Freshly initialised networks; `variant` is `dcgan` or `iagan`.
    #[new]
    #[pyo3(signature = (name="model", variant="dcgan", size=32, z_dim=64, base_channels=8, disc_channels=8, feature_tap_layer=3, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        name: &str,
        variant: &str,
        size: usize,
        z_dim: usize,
        base_channels: usize,
        disc_channels: usize,
        feature_tap_layer: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let g = GeneratorConfig {
            image_size: size,
            z_dim,
            base_channels,
            variant: variant.parse::<Variant>().py()?,
            seed: derive_seed(seed, "generator_init"),
        };
        let d = DiscriminatorConfig {
            image_size: size,
            base_channels: disc_channels,
            feature_tap_layer,
            seed: derive_seed(seed, "discriminator_init"),
        };
        let state = GanState::init(&g, &d, Default::default()).py()?;
        Ok(Gan { model: ScoringModel { name: name.into(), generator: state.generator, discriminator: state.discriminator } })
    }

    /// Loads a model directory written by `iagan train` or [`Gan::save`].
    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(Gan { model: load_model(&dir).py()? })
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        save_model(&dir, &self.model.generator, &self.model.discriminator, &[("class", self.model.name.as_str())]).py()
    }

    #[getter]
    fn name(&self) -> String {
        self.model.name.clone()
    }

    #[getter]
    fn z_dim(&self) -> PyResult<usize> {
        Ok(self.model.generator.generator_config().py()?.z_dim)
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.model.generator.param_count() + self.model.discriminator.param_count()
    }

    /// Adversarial training on `images`; returns `(d_loss, g_loss)` per step.
    #[pyo3(signature = (images, steps, lr_d=2e-4, lr_g=2e-4, batch_size=32, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        &mut self,
        py: Python<'_>,
        images: Vec<Vec<Vec<f64>>>,
        steps: usize,
        lr_d: f64,
        lr_g: f64,
        batch_size: usize,
        seed: u64,
    ) -> PyResult<Vec<(f64, f64)>> {
        let batch = to_batch(&images)?;
        let z_dim = self.z_dim()?;
        let cfg = TrainConfig {
            lr_d,
            lr_g,
            batch_size,
            epochs: steps.max(1),
            max_steps: Some(steps),
            z_dim,
            seed: derive_seed(seed, "train"),
            ..TrainConfig::default()
        };
        let model = &mut self.model;
        py.detach(|| {
            let state = GanState::new(model.generator.clone(), model.discriminator.clone(), cfg.adam)?;
            let (state, log) = train(&batch, state, &cfg, &mut NoHooks)?;
            model.generator = state.generator;
            model.discriminator = state.discriminator;
            Ok(log.steps.iter().map(|s| (s.d_loss, s.g_loss)).collect())
        })
        .py()
    }

    /// Images for latent codes `z` (one list per image); image-conditioned
    /// generators also need one conditioning image per code.
    #[pyo3(signature = (z, cond=None))]
    fn generate(&self, z: Vec<Vec<f64>>, cond: Option<Vec<Vec<Vec<f64>>>>) -> PyResult<Vec<Vec<Vec<f64>>>> {
        let z_dim = self.z_dim()?;
        if z.is_empty() || z.iter().any(|v| v.len() != z_dim) {
            return Err(PyValueError::new_err(format!("z must be a non-empty list of length-{z_dim} codes")));
        }
        let zt = Tensor::new(vec![z.len(), z_dim], z.concat()).py()?;
        let ct = cond.as_deref().map(to_batch).transpose()?;
        Ok(to_images(&generate(&self.model.generator, &zt, ct.as_ref()).py()?))
    }

    /// `n` seeded standard-normal latent codes.
    #[pyo3(signature = (n, seed=0))]
    fn sample_z(&self, n: usize, seed: u64) -> PyResult<Vec<Vec<f64>>> {
        let z_dim = self.z_dim()?;
        let v = normal_vec(&mut rng_from_seed(seed), n * z_dim);
        Ok(v.chunks(z_dim.max(1)).map(<[f64]>::to_vec).collect())
    }

    /// Anomaly score of `image` by latent search.
    #[pyo3(signature = (image, iterations=100, lam=0.2, step_size=0.01, optimizer="adam", conditioning="test_image", restarts=1, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn score(
        &self,
        py: Python<'_>,
        image: Vec<Vec<f64>>,
        iterations: usize,
        lam: f64,
        step_size: f64,
        optimizer: &str,
        conditioning: &str,
        restarts: usize,
        seed: u64,
    ) -> PyResult<Anomaly> {
        let x = to_tensor(&image)?;
        let cfg = SearchConfig {
            iterations,
            lambda: lam,
            seed,
            step_size,
            optimizer: optimizer.parse::<ZOptimizer>().py()?,
            track_best: true,
            restarts,
            conditioning: conditioning.parse::<Conditioning>().py()?,
        };
        cfg.validate().py()?;
        let m = &self.model;
        Ok(py.detach(|| latent_search(&x, &m.generator, &m.discriminator, &cfg)).py()?.into())
    }

    fn __repr__(&self) -> String {
        format!("Gan(name={:?}, params={})", self.model.name, self.param_count())
    }
}

#[pymodule]
fn iagan(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(phantom, m)?)?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add_function(wrap_pyfunction!(roc_curve, m)?)?;
    m.add_function(wrap_pyfunction!(delong_test, m)?)?;
    m.add_function(wrap_pyfunction!(operating_point, m)?)?;
    m.add_function(wrap_pyfunction!(plan_counts, m)?)?;
    m.add_class::<Gan>()?;
    m.add_class::<Anomaly>()?;
    m.add_class::<DeLong>()?;
    Ok(())
}
