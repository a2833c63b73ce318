//! Training-set augmentation: image-conditioned GAN samples, noise-only GAN
//! samples and random rotate/shift/zoom copies, each with a provenance
//! manifest whose totals are recounted against the method's formula.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::data::{save_image, stack, unstack};
use crate::error::{Error, Result};
use crate::models::{generate, NetworkParams, Variant};
use crate::rng::{derive_indexed, derive_seed, normal_vec, rng_from_seed, uniform};
use crate::tensor::Tensor;

pub const MANIFEST_HEADER: &str = "out_id,class,method,source_id,seed,params";
pub const MANIFEST_FILE: &str = "manifest.csv";

/// GAN samples per training input.
pub const GAN_COPIES: usize = 3;
/// Geometric copies per training image.
pub const TRADITIONAL_COPIES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    None,
    Iagan,
    Dcgan,
    Traditional,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::None, Method::Iagan, Method::Dcgan, Method::Traditional];

    pub fn name(self) -> &'static str {
        match self {
            Method::None => "none",
            Method::Iagan => "iagan",
            Method::Dcgan => "dcgan",
            Method::Traditional => "traditional",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown augmentation method {s:?}")))
    }
}

/// How an image-conditioned manifest counts originals.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IaganArithmetic {
    /// Target-class originals plus `k` samples per input of any class.
    Prose,
    /// Originals of every input class plus `k` samples per input.
    Table,
}

/// One output image and where it came from. Originals carry method
/// `original` and their own id as source.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProvenanceRecord {
    pub out_id: String,
    pub class: String,
    pub method: String,
    pub source_id: String,
    pub seed: u64,
    pub params: String,
}

impl ProvenanceRecord {
    pub fn is_original(&self) -> bool {
        self.method == ORIGINAL
    }
}

const ORIGINAL: &str = "original";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Counts {
    pub originals: usize,
    pub generated: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentManifest {
    pub method: Method,
    pub target_class: String,
    pub copies: usize,
    pub arithmetic: Option<IaganArithmetic>,
    /// Augmentation inputs `(class, id)`; equal to the target originals
    /// except for the image-conditioned method.
    pub inputs: Vec<(String, String)>,
    pub records: Vec<ProvenanceRecord>,
}

/// An image keyed by class and id.
pub type SourceImage = (String, String, Tensor);

fn copy_seed(seed: u64, method: Method, source: &str, j: usize) -> u64 {
    derive_indexed(derive_seed(derive_seed(seed, method.name()), source), "copy", j as u64)
}

fn original(class: &str, id: &str, source_class: &str) -> ProvenanceRecord {
    ProvenanceRecord {
        out_id: id.to_string(),
        class: class.to_string(),
        method: ORIGINAL.into(),
        source_id: id.to_string(),
        seed: 0,
        params: if source_class == class { String::new() } else { format!("source_class={source_class}") },
    }
}

/// Manifest for `k` samples per input of an image-conditioned generator
/// trained on `target`. Inputs of other classes are relabelled as `target`.
pub fn plan_iagan(
    target: &str,
    inputs: &[(String, String)],
    k: usize,
    seed: u64,
    arithmetic: IaganArithmetic,
) -> AugmentManifest {
    let mut records: Vec<ProvenanceRecord> = inputs
        .iter()
        .filter(|(c, _)| arithmetic == IaganArithmetic::Table || c == target)
        .map(|(c, id)| original(target, id, c))
        .collect();
    for (c, id) in inputs {
        for j in 0..k {
            records.push(ProvenanceRecord {
                out_id: format!("{id}_iagan{j}"),
                class: target.to_string(),
                method: Method::Iagan.name().into(),
                source_id: id.clone(),
                seed: copy_seed(seed, Method::Iagan, id, j),
                params: format!("copy={j};source_class={c}"),
            });
        }
    }
    AugmentManifest {
        method: Method::Iagan,
        target_class: target.to_string(),
        copies: k,
        arithmetic: Some(arithmetic),
        inputs: inputs.to_vec(),
        records,
    }
}

/// Manifest for `k` noise-only samples per target training image.
pub fn plan_dcgan(target: &str, ids: &[String], k: usize, seed: u64) -> AugmentManifest {
    plan_per_original(Method::Dcgan, target, ids, k, seed, |_| String::new())
}

/// Manifest for `n` random geometric copies per target training image.
pub fn plan_traditional(target: &str, ids: &[String], n: usize, seed: u64) -> AugmentManifest {
    plan_per_original(Method::Traditional, target, ids, n, seed, |s| Transform::sample(s).to_params())
}

/// The unaugmented training set.
pub fn plan_none(target: &str, ids: &[String]) -> AugmentManifest {
    plan_per_original(Method::None, target, ids, 0, 0, |_| String::new())
}

fn plan_per_original(
    method: Method,
    target: &str,
    ids: &[String],
    k: usize,
    seed: u64,
    params: impl Fn(u64) -> String,
) -> AugmentManifest {
    let mut records: Vec<ProvenanceRecord> = ids.iter().map(|id| original(target, id, target)).collect();
    for id in ids {
        for j in 0..k {
            let s = copy_seed(seed, method, id, j);
            let p = params(s);
            records.push(ProvenanceRecord {
                out_id: format!("{id}_{method}{j}"),
                class: target.to_string(),
                method: method.name().into(),
                source_id: id.clone(),
                seed: s,
                params: if p.is_empty() { format!("copy={j}") } else { format!("copy={j};{p}") },
            });
        }
    }
    AugmentManifest {
        method,
        target_class: target.to_string(),
        copies: k,
        arithmetic: None,
        inputs: ids.iter().map(|id| (target.to_string(), id.clone())).collect(),
        records,
    }
}

impl AugmentManifest {
    pub fn counts(&self) -> Counts {
        let originals = self.records.iter().filter(|r| r.is_original()).count();
        Counts { originals, generated: self.records.len() - originals, total: self.records.len() }
    }

    pub fn generated(&self) -> impl Iterator<Item = &ProvenanceRecord> {
        self.records.iter().filter(|r| !r.is_original())
    }

    /// The formula the total must satisfy, in words and by value.
    pub fn formula(&self) -> (String, usize) {
        let k = self.copies;
        let n_inputs = self.inputs.len();
        let n_target = self.inputs.iter().filter(|(c, _)| *c == self.target_class).count();
        match (self.method, self.arithmetic) {
            (Method::Iagan, Some(IaganArithmetic::Table)) => (format!("({} + 1) x all inputs", k), (k + 1) * n_inputs),
            (Method::Iagan, _) => (format!("target originals + {k} x all inputs"), n_target + k * n_inputs),
            (Method::None, _) => ("target originals".into(), n_target),
            _ => (format!("({k} + 1) x target originals"), (k + 1) * n_target),
        }
    }

    /// Recounts the records: totals against the formula, `k` outputs per
    /// input with the expected seeds, unique output ids, one label.
    pub fn verify(&self, seed: u64) -> Result<Counts> {
        let fail = |m: String| Err(Error::Integrity(format!("{} manifest: {m}", self.method)));
        let counts = self.counts();
        let (words, expected) = self.formula();
        if counts.total != expected {
            return fail(format!("total {} but {words} = {expected}", counts.total));
        }
        let mut seen = BTreeSet::new();
        for r in &self.records {
            if !seen.insert(&r.out_id) {
                return fail(format!("duplicate output id {:?}", r.out_id));
            }
            if r.class != self.target_class {
                return fail(format!("{:?} labelled {:?}, expected {:?}", r.out_id, r.class, self.target_class));
            }
        }
        let inputs: BTreeSet<&str> = self.inputs.iter().map(|(_, id)| id.as_str()).collect();
        let mut per_source: BTreeMap<&str, usize> = BTreeMap::new();
        for r in self.generated() {
            if r.method != self.method.name() {
                return fail(format!("{:?} has method {:?}", r.out_id, r.method));
            }
            if !inputs.contains(r.source_id.as_str()) {
                return fail(format!("{:?} traces to unknown source {:?}", r.out_id, r.source_id));
            }
            let j = per_source.entry(&r.source_id).or_default();
            if r.seed != copy_seed(seed, self.method, &r.source_id, *j) {
                return fail(format!("{:?} seed does not derive from its source", r.out_id));
            }
            if self.method == Method::Traditional && !r.params.ends_with(&Transform::sample(r.seed).to_params()) {
                return fail(format!("{:?} params do not match its seed", r.out_id));
            }
            *j += 1;
        }
        if let Some((src, n)) = per_source.iter().find(|(_, &n)| n != self.copies) {
            return fail(format!("source {src:?} has {n} outputs, expected {}", self.copies));
        }
        if self.copies > 0 && per_source.len() != inputs.len() {
            return fail(format!("{} of {} inputs have outputs", per_source.len(), inputs.len()));
        }
        Ok(counts)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{MANIFEST_HEADER}\n");
        for r in &self.records {
            out.push_str(&format!("{},{},{},{},{},{}\n", r.out_id, r.class, r.method, r.source_id, r.seed, r.params));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Parses manifest rows; the header must match exactly.
pub fn records_from_csv(text: &str) -> Result<Vec<ProvenanceRecord>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(MANIFEST_HEADER) {
        return Err(Error::Format { offset: 0, detail: format!("expected header {MANIFEST_HEADER:?}") });
    }
    let mut offset = MANIFEST_HEADER.len() + 1;
    let mut out = Vec::new();
    for line in lines {
        let at = offset;
        offset += line.len() + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.splitn(6, ',').collect();
        if cols.len() != 6 {
            return Err(Error::Format { offset: at, detail: format!("expected 6 columns in {line:?}") });
        }
        out.push(ProvenanceRecord {
            out_id: cols[0].into(),
            class: cols[1].into(),
            method: cols[2].into(),
            source_id: cols[3].into(),
            seed: cols[4].parse().map_err(|_| Error::Format { offset: at, detail: "bad seed".into() })?,
            params: cols[5].into(),
        });
    }
    Ok(out)
}

/// One random rotate/shift/zoom about the image centre. Shifts are
/// fractions of the image size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transform {
    pub theta_deg: f64,
    pub dx: f64,
    pub dy: f64,
    pub zoom: f64,
}

pub const MAX_ROTATION_DEG: f64 = 20.0;
pub const MAX_SHIFT: f64 = 0.2;
pub const MAX_ZOOM: f64 = 0.2;
pub const FILL: f64 = -1.0;

impl Transform {
    pub const IDENTITY: Transform = Transform { theta_deg: 0.0, dx: 0.0, dy: 0.0, zoom: 1.0 };

    pub fn sample(seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        Transform {
            theta_deg: uniform(&mut rng, -MAX_ROTATION_DEG, MAX_ROTATION_DEG),
            dx: uniform(&mut rng, -MAX_SHIFT, MAX_SHIFT),
            dy: uniform(&mut rng, -MAX_SHIFT, MAX_SHIFT),
            zoom: uniform(&mut rng, 1.0 - MAX_ZOOM, 1.0 + MAX_ZOOM),
        }
    }

    pub fn to_params(&self) -> String {
        format!("theta={};dx={};dy={};zoom={}", self.theta_deg, self.dx, self.dy, self.zoom)
    }

    /// Resamples `[1,H,W]` bilinearly: output pixel `p` takes the input at
    /// `R(-θ)(p - c - shift)/zoom + c`. Outside samples read [`FILL`].
    pub fn apply(&self, image: &Tensor) -> Result<Tensor> {
        let [1, h, w] = image.shape()[..] else {
            return Err(Error::dim("transform", format!("expected [1,H,W], got {:?}", image.shape())));
        };
        if !(self.zoom > 0.0) {
            return Err(Error::Config(format!("zoom must be positive, got {}", self.zoom)));
        }
        let src = image.data();
        let at = |y: isize, x: isize| -> f64 {
            if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                FILL
            } else {
                src[y as usize * w + x as usize]
            }
        };
        let (sin, cos) = self.theta_deg.to_radians().sin_cos();
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let (sx, sy) = (self.dx * w as f64, self.dy * h as f64);
        let mut out = Vec::with_capacity(h * w);
        for oy in 0..h {
            for ox in 0..w {
                let (u, v) = (ox as f64 - cx - sx, oy as f64 - cy - sy);
                let ix = (cos * u + sin * v) / self.zoom + cx;
                let iy = (-sin * u + cos * v) / self.zoom + cy;
                let (x0, y0) = (ix.floor(), iy.floor());
                let (fx, fy) = (ix - x0, iy - y0);
                let (x0, y0) = (x0 as isize, y0 as isize);
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx;
                let bottom = at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx;
                out.push((top * (1.0 - fy) + bottom * fy).clamp(-1.0, 1.0));
            }
        }
        Tensor::new(vec![1, h, w], out)
    }
}

/// `n` random geometric copies of one image, copy `j` seeded from
/// `copy_seed(seed, source_id, j)`.
pub fn augment_traditional(image: &Tensor, source_id: &str, n: usize, seed: u64) -> Result<Vec<Tensor>> {
    (0..n).map(|j| Transform::sample(copy_seed(seed, Method::Traditional, source_id, j)).apply(image)).collect()
}

const GEN_BATCH: usize = 64;

fn check_generator(g: &NetworkParams, variant: Variant, size: usize) -> Result<()> {
    let cfg = g.generator_config()?;
    if cfg.variant != variant {
        return Err(Error::Config(format!("expected a {variant} generator, got {}", cfg.variant)));
    }
    if cfg.image_size != size {
        return Err(Error::Config(format!("generator size {} vs image size {size}", cfg.image_size)));
    }
    Ok(())
}

fn image_size(t: &Tensor) -> Result<usize> {
    match t.shape() {
        [1, h, w] if h == w => Ok(*h),
        other => Err(Error::dim("augment", format!("expected square [1,S,S], got {other:?}"))),
    }
}

/// Renders every generated record of `manifest` from `sources` (keyed by
/// id). Returns images in record order, originals included.
pub fn render(manifest: &AugmentManifest, sources: &BTreeMap<String, Tensor>, generator: Option<&NetworkParams>) -> Result<Vec<Tensor>> {
    let lookup = |id: &str| {
        sources.get(id).ok_or_else(|| Error::Integrity(format!("manifest source {id:?} not supplied")))
    };
    let size = match manifest.records.first() {
        Some(r) => image_size(lookup(&r.source_id)?)?,
        None => return Ok(Vec::new()),
    };
    let mut out: Vec<Option<Tensor>> = vec![None; manifest.records.len()];
    let mut gan_jobs = Vec::new();
    for (i, r) in manifest.records.iter().enumerate() {
        let src = lookup(&r.source_id)?;
        if image_size(src)? != size {
            return Err(Error::dim("augment", format!("{:?} has a different size", r.source_id)));
        }
        if r.is_original() {
            out[i] = Some(src.clone());
        } else if manifest.method == Method::Traditional {
            out[i] = Some(Transform::sample(r.seed).apply(src)?);
        } else {
            gan_jobs.push(i);
        }
    }
    if !gan_jobs.is_empty() {
        let g = generator.ok_or_else(|| Error::Config("GAN augmentation needs a generator".into()))?;
        let variant = if manifest.method == Method::Iagan { Variant::Iagan } else { Variant::Dcgan };
        check_generator(g, variant, size)?;
        let z_dim = g.generator_config()?.z_dim;
        for chunk in gan_jobs.chunks(GEN_BATCH) {
            let mut z = Vec::with_capacity(chunk.len() * z_dim);
            let mut cond = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let r = &manifest.records[i];
                z.extend(normal_vec(&mut rng_from_seed(r.seed), z_dim));
                cond.push(lookup(&r.source_id)?.clone());
            }
            let z = Tensor::new(vec![chunk.len(), z_dim], z)?;
            let cond = stack(&cond, size)?;
            let imgs = generate(g, &z, (variant == Variant::Iagan).then_some(&cond))?;
            for (&i, img) in chunk.iter().zip(unstack(&imgs)?) {
                out[i] = Some(img);
            }
        }
    }
    Ok(out.into_iter().map(|t| t.expect("every record rendered")).collect())
}

/// Plans, renders and verifies an image-conditioned augmentation.
pub fn augment_iagan(
    g: &NetworkParams,
    target: &str,
    inputs: &[SourceImage],
    k: usize,
    seed: u64,
    arithmetic: IaganArithmetic,
) -> Result<(AugmentManifest, Vec<Tensor>)> {
    let keys: Vec<(String, String)> = inputs.iter().map(|(c, id, _)| (c.clone(), id.clone())).collect();
    let manifest = plan_iagan(target, &keys, k, seed, arithmetic);
    finish(manifest, inputs, Some(g), seed)
}

/// Plans, renders and verifies a noise-only GAN augmentation.
pub fn augment_dcgan(g: &NetworkParams, target: &str, originals: &[SourceImage], k: usize, seed: u64) -> Result<(AugmentManifest, Vec<Tensor>)> {
    let ids = target_ids(target, originals)?;
    finish(plan_dcgan(target, &ids, k, seed), originals, Some(g), seed)
}

/// Plans, renders and verifies a geometric augmentation.
pub fn augment_traditional_set(target: &str, originals: &[SourceImage], n: usize, seed: u64) -> Result<(AugmentManifest, Vec<Tensor>)> {
    let ids = target_ids(target, originals)?;
    finish(plan_traditional(target, &ids, n, seed), originals, None, seed)
}

fn target_ids(target: &str, originals: &[SourceImage]) -> Result<Vec<String>> {
    if let Some((c, id, _)) = originals.iter().find(|(c, _, _)| c != target) {
        return Err(Error::Config(format!("{id:?} is {c:?}; only {target:?} images can be augmented this way")));
    }
    Ok(originals.iter().map(|(_, id, _)| id.clone()).collect())
}

fn finish(
    manifest: AugmentManifest,
    inputs: &[SourceImage],
    g: Option<&NetworkParams>,
    seed: u64,
) -> Result<(AugmentManifest, Vec<Tensor>)> {
    manifest.verify(seed)?;
    let sources: BTreeMap<String, Tensor> = inputs.iter().map(|(_, id, t)| (id.clone(), t.clone())).collect();
    let images = render(&manifest, &sources, g)?;
    if let Some(i) = images.iter().position(|t| t.data().iter().any(|v| !(-1.0..=1.0).contains(v))) {
        return Err(Error::Integrity(format!("{:?} has pixels outside [-1, 1]", manifest.records[i].out_id)));
    }
    Ok((manifest, images))
}

/// Writes `<dir>/<class>/<out_id>.pgm` for every record plus the manifest.
pub fn write_augmented(dir: &Path, manifest: &AugmentManifest, images: &[Tensor]) -> Result<()> {
    if images.len() != manifest.records.len() {
        return Err(Error::Integrity(format!("{} images for {} records", images.len(), manifest.records.len())));
    }
    for (r, img) in manifest.records.iter().zip(images) {
        let cdir = dir.join(&r.class);
        fs::create_dir_all(&cdir).map_err(|e| Error::io(&cdir, e))?;
        save_image(img, &cdir.join(format!("{}.pgm", r.out_id)))?;
    }
    manifest.write_csv(&dir.join(MANIFEST_FILE))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(prefix: &str, n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{prefix}{i}")).collect()
    }

    #[test]
    fn traditional_identity_and_range() {
        let img = Tensor::new(vec![1, 8, 8], (0..64).map(|i| ((i as f64) * 0.7).sin()).collect()).unwrap();
        let same = Transform::IDENTITY.apply(&img).unwrap();
        assert!(img.data().iter().zip(same.data()).all(|(a, b)| (a - b).abs() <= 1e-12));
        for t in augment_traditional(&img, "a", 8, 3).unwrap() {
            assert!(t.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
        assert_eq!(augment_traditional(&img, "a", 8, 3).unwrap(), augment_traditional(&img, "a", 8, 3).unwrap());
    }

    #[test]
    fn sampled_transforms_in_range() {
        for s in 0..200 {
            let t = Transform::sample(s);
            assert!(t.theta_deg.abs() <= 20.0 && t.dx.abs() <= 0.2 && t.dy.abs() <= 0.2);
            assert!((0.8..=1.2).contains(&t.zoom));
        }
    }

    #[test]
    fn zero_copies_leaves_originals() {
        let m = plan_dcgan("p", &ids("p", 5), 0, 1);
        assert_eq!(m.verify(1).unwrap(), Counts { originals: 5, generated: 0, total: 5 });
        let inputs: Vec<(String, String)> = ids("p", 4).into_iter().map(|i| ("p".into(), i)).collect();
        assert_eq!(plan_iagan("p", &inputs, 0, 1, IaganArithmetic::Prose).verify(1).unwrap().total, 4);
        assert_eq!(plan_dcgan("p", &ids("p", 5), 1, 1).counts().generated, 5);
    }

    #[test]
    fn tampering_is_detected() {
        let mut m = plan_traditional("p", &ids("p", 3), 8, 2);
        m.verify(2).unwrap();
        assert!(m.verify(3).is_err());
        m.records.pop();
        assert!(matches!(m.verify(2), Err(Error::Integrity(_))));
        let mut m = plan_dcgan("p", &ids("p", 3), 3, 2);
        m.records[4].source_id = "ghost".into();
        assert!(m.verify(2).is_err());
    }

    #[test]
    fn manifest_csv_roundtrip() {
        let m = plan_traditional("p", &ids("p", 2), 2, 5);
        assert_eq!(records_from_csv(&m.to_csv()).unwrap(), m.records);
    }
}
