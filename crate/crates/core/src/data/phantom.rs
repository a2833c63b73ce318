//! Procedural chest-like phantoms.
//!
//! Geometry is defined on the unit square and sampled at pixel centres, so
//! the same seed gives the same anatomy at every size. Lesions come from a
//! random stream separate from the base anatomy: a lesioned phantom and the
//! normal phantom with the same seed differ only inside the lesioned lungs.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::kv;
use crate::rng::{derive_seed, rng_from_seed, uniform, SeededRng};
use crate::tensor::Tensor;
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PhantomClass {
    Normal,
    PneumoniaLike,
    CovidLike,
}

impl PhantomClass {
    pub const ALL: [PhantomClass; 3] = [PhantomClass::Normal, PhantomClass::PneumoniaLike, PhantomClass::CovidLike];

    pub fn name(self) -> &'static str {
        match self {
            PhantomClass::Normal => "normal",
            PhantomClass::PneumoniaLike => "pneumonia_like",
            PhantomClass::CovidLike => "covid_like",
        }
    }
}

impl fmt::Display for PhantomClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PhantomClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PhantomClass::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown phantom class {s:?}")))
    }
}

/// Versioned geometry and intensity constants shared by every phantom.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomParams {
    pub version: u32,
    pub background: f64,
    pub thorax_cx: f64,
    pub thorax_cy: f64,
    pub thorax_rx: f64,
    pub thorax_ry: f64,
    pub thorax_intensity: f64,
    pub lung_offset_x: f64,
    pub lung_cy: f64,
    pub lung_rx: f64,
    pub lung_ry: f64,
    pub lung_intensity: f64,
    /// Uniform jitter of lung centres (unit-square units).
    pub lung_jitter: f64,
    /// Relative uniform jitter of lung radii.
    pub lung_radius_jitter: f64,
    /// Uniform jitter of the lung intensity.
    pub lung_intensity_jitter: f64,
    pub noise_amplitude: f64,
    pub noise_terms: usize,
    pub noise_max_frequency: f64,
    pub blob_sigma_min: f64,
    pub blob_sigma_max: f64,
    pub blob_amplitude_min: f64,
    pub blob_amplitude_max: f64,
    pub pneumonia_blobs_min: usize,
    pub pneumonia_blobs_max: usize,
    /// Lung holding pneumonia-like lesions: 0 left, 1 right, 2 drawn per phantom.
    pub pneumonia_lung: usize,
    pub covid_blobs_min: usize,
    pub covid_blobs_max: usize,
}

impl Default for PhantomParams {
    fn default() -> Self {
        PhantomParams {
            version: 1,
            background: -0.9,
            thorax_cx: 0.5,
            thorax_cy: 0.52,
            thorax_rx: 0.46,
            thorax_ry: 0.44,
            thorax_intensity: 0.45,
            lung_offset_x: 0.19,
            lung_cy: 0.5,
            lung_rx: 0.14,
            lung_ry: 0.28,
            lung_intensity: -0.55,
            lung_jitter: 0.015,
            lung_radius_jitter: 0.06,
            lung_intensity_jitter: 0.05,
            noise_amplitude: 0.05,
            noise_terms: 6,
            noise_max_frequency: 3.0,
            blob_sigma_min: 0.10,
            blob_sigma_max: 0.14,
            blob_amplitude_min: 0.8,
            blob_amplitude_max: 1.0,
            pneumonia_blobs_min: 1,
            pneumonia_blobs_max: 3,
            pneumonia_lung: 1,
            covid_blobs_min: 2,
            covid_blobs_max: 5,
        }
    }
}

macro_rules! phantom_fields {
    ($m:ident) => {
        $m!(
            version, background, thorax_cx, thorax_cy, thorax_rx, thorax_ry, thorax_intensity, lung_offset_x,
            lung_cy, lung_rx, lung_ry, lung_intensity, lung_jitter, lung_radius_jitter, lung_intensity_jitter,
            noise_amplitude, noise_terms, noise_max_frequency, blob_sigma_min, blob_sigma_max, blob_amplitude_min,
            blob_amplitude_max, pneumonia_blobs_min, pneumonia_blobs_max, pneumonia_lung, covid_blobs_min,
            covid_blobs_max
        )
    };
}

impl PhantomParams {
    pub fn to_text(&self) -> String {
        let mut pairs: Vec<(&str, String)> = Vec::new();
        macro_rules! emit {
            ($($f:ident),*) => { $( pairs.push((stringify!($f), format!("{:?}", self.$f))); )* };
        }
        phantom_fields!(emit);
        format!("# phantom spec\n{}", kv::render(pairs))
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut map = kv::parse(text)?;
        let mut p = PhantomParams::default();
        macro_rules! read {
            ($($f:ident),*) => { $( kv::take(&mut map, stringify!($f), &mut p.$f)?; )* };
        }
        phantom_fields!(read);
        kv::reject_unknown(&map, "phantom spec")?;
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != 1 {
            return Err(Error::Config(format!("unsupported phantom spec version {}", self.version)));
        }
        let ordered = [
            (self.blob_sigma_min, self.blob_sigma_max),
            (self.blob_amplitude_min, self.blob_amplitude_max),
            (self.pneumonia_blobs_min as f64, self.pneumonia_blobs_max as f64),
            (self.covid_blobs_min as f64, self.covid_blobs_max as f64),
        ];
        if ordered.iter().any(|(lo, hi)| lo > hi) || self.blob_sigma_min <= 0.0 {
            return Err(Error::Config("phantom ranges must satisfy min <= max".into()));
        }
        if self.pneumonia_lung > 2 {
            return Err(Error::Config(format!("pneumonia_lung must be 0, 1 or 2, got {}", self.pneumonia_lung)));
        }
        if self.covid_blobs_min < 2 || self.pneumonia_blobs_min < 1 {
            return Err(Error::Config("covid-like needs >= 2 blobs and pneumonia-like >= 1".into()));
        }
        Ok(())
    }

    /// Nominal (un-jittered) lung ellipses, left then right.
    pub fn nominal_lungs(&self) -> [Ellipse; 2] {
        [-1.0, 1.0].map(|side| Ellipse {
            cx: self.thorax_cx + side * self.lung_offset_x,
            cy: self.lung_cy,
            rx: self.lung_rx,
            ry: self.lung_ry,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
}

impl Ellipse {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = ((x - self.cx) / self.rx, (y - self.cy) / self.ry);
        dx * dx + dy * dy <= 1.0
    }

    /// Pixel bounding box `(x0, y0, x1, y1)`, inclusive, at `size`.
    pub fn pixel_bounds(&self, size: usize) -> (usize, usize, usize, usize) {
        let s = size as f64;
        let lo = |c: f64, r: f64| (((c - r) * s - 0.5).floor().max(0.0)) as usize;
        let hi = |c: f64, r: f64| (((c + r) * s - 0.5).ceil().min(s - 1.0)) as usize;
        (lo(self.cx, self.rx), lo(self.cy, self.ry), hi(self.cx, self.rx), hi(self.cy, self.ry))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhantomSpec {
    pub class: PhantomClass,
    pub size: usize,
    pub seed: u64,
}

struct Blob {
    lung: usize,
    cx: f64,
    cy: f64,
    sigma: f64,
    amplitude: f64,
}

struct Anatomy {
    lungs: [Ellipse; 2],
    lung_intensity: f64,
    noise: Vec<(f64, f64, f64, f64)>,
}

fn anatomy(p: &PhantomParams, rng: &mut SeededRng) -> Anatomy {
    let mut lungs = p.nominal_lungs();
    for l in &mut lungs {
        l.cx += uniform(rng, -p.lung_jitter, p.lung_jitter);
        l.cy += uniform(rng, -p.lung_jitter, p.lung_jitter);
        l.rx *= 1.0 + uniform(rng, -p.lung_radius_jitter, p.lung_radius_jitter);
        l.ry *= 1.0 + uniform(rng, -p.lung_radius_jitter, p.lung_radius_jitter);
    }
    let lung_intensity = p.lung_intensity + uniform(rng, -p.lung_intensity_jitter, p.lung_intensity_jitter);
    let tau = std::f64::consts::TAU;
    let noise = (0..p.noise_terms)
        .map(|_| {
            let fx = uniform(rng, 0.0, p.noise_max_frequency);
            let fy = uniform(rng, 0.0, p.noise_max_frequency);
            let phase = uniform(rng, 0.0, tau);
            let amp = uniform(rng, -1.0, 1.0) * p.noise_amplitude / (p.noise_terms as f64).sqrt();
            (fx * tau, fy * tau, phase, amp)
        })
        .collect();
    Anatomy { lungs, lung_intensity, noise }
}

/// Uniform point inside the ellipse shrunk by `margin` (relative).
fn point_in(e: &Ellipse, margin: f64, rng: &mut SeededRng) -> (f64, f64) {
    let (rx, ry) = (e.rx * (1.0 - margin), e.ry * (1.0 - margin));
    loop {
        let (u, v) = (uniform(rng, -1.0, 1.0), uniform(rng, -1.0, 1.0));
        if u * u + v * v <= 1.0 {
            return (e.cx + u * rx, e.cy + v * ry);
        }
    }
}

fn lesions(class: PhantomClass, p: &PhantomParams, lungs: &[Ellipse; 2], rng: &mut SeededRng) -> Vec<Blob> {
    let draw = |lung: usize, rng: &mut SeededRng| {
        let (cx, cy) = point_in(&lungs[lung], 0.3, rng);
        Blob {
            lung,
            cx,
            cy,
            sigma: uniform(rng, p.blob_sigma_min, p.blob_sigma_max),
            amplitude: uniform(rng, p.blob_amplitude_min, p.blob_amplitude_max),
        }
    };
    match class {
        PhantomClass::Normal => Vec::new(),
        PhantomClass::PneumoniaLike => {
            let drawn = rng.random_range(0..2);
            let lung = if p.pneumonia_lung == 2 { drawn } else { p.pneumonia_lung };
            let n = rng.random_range(p.pneumonia_blobs_min..=p.pneumonia_blobs_max);
            (0..n).map(|_| draw(lung, rng)).collect()
        }
        PhantomClass::CovidLike => {
            let n = rng.random_range(p.covid_blobs_min..=p.covid_blobs_max);
            // first two blobs pin one lesion to each lung
            (0..n)
                .map(|i| {
                    let lung = if i < 2 { i } else { rng.random_range(0..2) };
                    draw(lung, rng)
                })
                .collect()
        }
    }
}

/// Renders one phantom as `[1, S, S]` in [-1, 1].
pub fn synth_phantom(spec: &PhantomSpec, p: &PhantomParams) -> Result<Tensor> {
    p.validate()?;
    if spec.size == 0 {
        return Err(Error::Config("phantom size must be positive".into()));
    }
    let mut base_rng = rng_from_seed(derive_seed(spec.seed, "anatomy"));
    let a = anatomy(p, &mut base_rng);
    let mut lesion_rng = rng_from_seed(derive_seed(spec.seed, "lesions"));
    let blobs = lesions(spec.class, p, &a.lungs, &mut lesion_rng);
    let thorax = Ellipse { cx: p.thorax_cx, cy: p.thorax_cy, rx: p.thorax_rx, ry: p.thorax_ry };
    let s = spec.size;
    let mut data = Vec::with_capacity(s * s);
    for row in 0..s {
        let y = (row as f64 + 0.5) / s as f64;
        for col in 0..s {
            let x = (col as f64 + 0.5) / s as f64;
            let mut v = if thorax.contains(x, y) { p.thorax_intensity } else { p.background };
            let lung = a.lungs.iter().position(|l| l.contains(x, y));
            if lung.is_some() {
                v = a.lung_intensity;
            }
            if thorax.contains(x, y) {
                v += a.noise.iter().map(|(fx, fy, ph, amp)| amp * (fx * x + fy * y + ph).cos()).sum::<f64>();
            }
            if let Some(li) = lung {
                for b in blobs.iter().filter(|b| b.lung == li) {
                    let d2 = (x - b.cx).powi(2) + (y - b.cy).powi(2);
                    v += b.amplitude * (-d2 / (2.0 * b.sigma * b.sigma)).exp();
                }
            }
            data.push(v.clamp(-1.0, 1.0));
        }
    }
    Tensor::new(vec![1, s, s], data)
}

/// Mean intensity inside the nominal lung ellipses.
pub fn lung_mean(image: &Tensor, p: &PhantomParams) -> Result<f64> {
    let sh = image.shape();
    if sh.len() != 3 || sh[0] != 1 || sh[1] != sh[2] {
        return Err(Error::dim("lung_mean", format!("expected [1,S,S], got {sh:?}")));
    }
    let s = sh[1];
    let lungs = p.nominal_lungs();
    let (mut total, mut count) = (0.0, 0usize);
    for row in 0..s {
        let y = (row as f64 + 0.5) / s as f64;
        for col in 0..s {
            let x = (col as f64 + 0.5) / s as f64;
            if lungs.iter().any(|l| l.contains(x, y)) {
                total += image.data()[row * s + col];
                count += 1;
            }
        }
    }
    Ok(total / count.max(1) as f64)
}

/// The jittered lung ellipses actually drawn for `seed`.
pub fn phantom_lungs(seed: u64, p: &PhantomParams) -> [Ellipse; 2] {
    anatomy(p, &mut rng_from_seed(derive_seed(seed, "anatomy"))).lungs
}
