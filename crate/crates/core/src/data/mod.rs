//! Phantom datasets, image files and split manifests.
//!
//! On disk a dataset is `<root>/<class>/<id>.pgm` plus `split.csv`, and
//! `phantom.spec` when it was synthesised.

mod image;
mod phantom;
mod split;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

pub use image::{decode_pgm, encode_pgm, from_byte, load_image, mosaic, resize_bilinear, save_image, to_byte};
pub use phantom::{lung_mean, phantom_lungs, synth_phantom, Ellipse, PhantomClass, PhantomParams, PhantomSpec};
pub use split::{make_split, ClassSplit, Role, SplitConfig, SplitManifest, SPLIT_HEADER};

use crate::error::{Error, Result};
use crate::rng::{derive_indexed, derive_seed};
use crate::tensor::Tensor;

pub const SPLIT_FILE: &str = "split.csv";
pub const PHANTOM_SPEC_FILE: &str = "phantom.spec";

/// Class name to sorted image ids.
pub type Listing = BTreeMap<String, Vec<String>>;

/// Per-image seed of phantom `index` of `class`.
pub fn phantom_seed(seed: u64, class: PhantomClass, index: usize) -> u64 {
    derive_indexed(derive_seed(seed, class.name()), "phantom", index as u64)
}

pub fn phantom_id(class: PhantomClass, index: usize) -> String {
    format!("{}_{index:05}", class.name())
}

/// Renders `per_class` phantoms per class in memory.
pub fn synth_class(class: PhantomClass, per_class: usize, size: usize, seed: u64, p: &PhantomParams) -> Result<Vec<(String, Tensor)>> {
    (0..per_class)
        .map(|i| {
            let spec = PhantomSpec { class, size, seed: phantom_seed(seed, class, i) };
            Ok((phantom_id(class, i), synth_phantom(&spec, p)?))
        })
        .collect()
}

/// Writes a phantom dataset and its spec file under `root`.
pub fn synth_dataset(
    root: &Path,
    classes: &[PhantomClass],
    per_class: usize,
    size: usize,
    seed: u64,
    p: &PhantomParams,
) -> Result<Listing> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    p.save(&root.join(PHANTOM_SPEC_FILE))?;
    let mut listing = Listing::new();
    for &class in classes {
        let dir = root.join(class.name());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut ids = Vec::with_capacity(per_class);
        for (id, img) in synth_class(class, per_class, size, seed, p)? {
            save_image(&img, &dir.join(format!("{id}.pgm")))?;
            ids.push(id);
        }
        listing.insert(class.name().to_string(), ids);
    }
    Ok(listing)
}

/// Scans `<root>/<class>/` for `.pgm` and `.iagt` files.
pub fn list_dataset(root: &Path) -> Result<Listing> {
    let mut listing = Listing::new();
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let path = entry.path();
        if !path.is_dir() {
            continue;
        }
        let class = entry.file_name().to_string_lossy().into_owned();
        let mut ids = Vec::new();
        for f in fs::read_dir(&path).map_err(|e| Error::io(&path, e))? {
            let f = f.map_err(|e| Error::io(&path, e))?.path();
            let ext = f.extension().and_then(|e| e.to_str());
            if matches!(ext, Some("pgm") | Some("iagt")) {
                if let Some(stem) = f.file_stem() {
                    ids.push(stem.to_string_lossy().into_owned());
                }
            }
        }
        if !ids.is_empty() {
            ids.sort();
            listing.insert(class, ids);
        }
    }
    Ok(listing)
}

fn image_path(root: &Path, class: &str, id: &str) -> Result<std::path::PathBuf> {
    let dir = root.join(class);
    for ext in ["pgm", "iagt"] {
        let p = dir.join(format!("{id}.{ext}"));
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(Error::Config(format!("no image {id:?} in {}", dir.display())))
}

/// Loads the listed images as `[N, 1, S, S]`.
pub fn load_images(root: &Path, class: &str, ids: &[String], size: usize) -> Result<Tensor> {
    let imgs = ids
        .iter()
        .map(|id| load_image(&image_path(root, class, id)?, Some(size)))
        .collect::<Result<Vec<_>>>()?;
    stack(&imgs, size)
}

/// Stacks `[1, S, S]` images into `[N, 1, S, S]`.
pub fn stack(images: &[Tensor], size: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(images.len() * size * size);
    for img in images {
        if img.shape() != [1, size, size] {
            return Err(Error::dim("stack", format!("expected [1,{size},{size}], got {:?}", img.shape())));
        }
        data.extend_from_slice(img.data());
    }
    Tensor::new(vec![images.len(), 1, size, size], data)
}

/// Splits `[N, 1, S, S]` back into `[1, S, S]` images.
pub fn unstack(batch: &Tensor) -> Result<Vec<Tensor>> {
    let sh = batch.shape();
    if sh.len() != 4 || sh[1] != 1 {
        return Err(Error::dim("unstack", format!("expected [N,1,S,S], got {sh:?}")));
    }
    let per = sh[2] * sh[3];
    batch
        .data()
        .chunks(per.max(1))
        .take(sh[0])
        .map(|c| Tensor::new(vec![1, sh[2], sh[3]], c.to_vec()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_roundtrip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let p = PhantomParams::default();
        let listing = synth_dataset(dir.path(), &[PhantomClass::Normal, PhantomClass::CovidLike], 3, 16, 5, &p).unwrap();
        assert_eq!(list_dataset(dir.path()).unwrap(), listing);
        let batch = load_images(dir.path(), "covid_like", &listing["covid_like"], 16).unwrap();
        assert_eq!(batch.shape(), &[3, 1, 16, 16]);
        let mem = synth_class(PhantomClass::CovidLike, 3, 16, 5, &p).unwrap();
        for (img, (_, m)) in unstack(&batch).unwrap().iter().zip(&mem) {
            let worst = img.data().iter().zip(m.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(worst <= 1.0 / 255.0);
        }
        assert_eq!(PhantomParams::load(&dir.path().join(PHANTOM_SPEC_FILE)).unwrap(), p);
    }

    #[test]
    fn lung_mean_separates_classes() {
        let p = PhantomParams::default();
        let stat = |class| -> Vec<f64> {
            synth_class(class, 200, 32, 11, &p).unwrap().iter().map(|(_, t)| lung_mean(t, &p).unwrap()).collect()
        };
        let normal = stat(PhantomClass::Normal);
        for class in [PhantomClass::PneumoniaLike, PhantomClass::CovidLike] {
            let pos = stat(class);
            let mut wins = 0.0;
            for a in &pos {
                for b in &normal {
                    wins += if a > b { 1.0 } else if a == b { 0.5 } else { 0.0 };
                }
            }
            let auc = wins / (pos.len() * normal.len()) as f64;
            eprintln!("{class}: lung-mean auc {auc:.4}");
            assert!(auc > 0.9, "{class}: {auc}");
        }
    }
}
