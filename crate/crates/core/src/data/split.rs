//! Seeded train/test splits and the `split.csv` manifest.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed, shuffle};

pub const SPLIT_HEADER: &str = "id,class,role";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    Train,
    Test,
    /// Held back by a train cap; in neither partition.
    Unused,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Train => "train",
            Role::Test => "test",
            Role::Unused => "unused",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Role::Train),
            "test" => Ok(Role::Test),
            "unused" => Ok(Role::Unused),
            other => Err(Error::Config(format!("unknown split role {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ClassSplit {
    pub train: Vec<String>,
    pub test: Vec<String>,
    pub unused: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitManifest {
    pub classes: BTreeMap<String, ClassSplit>,
    pub seed: u64,
    pub source: String,
}

#[derive(Debug, Clone, Default)]
pub struct SplitConfig {
    pub test_per_class: usize,
    /// Per-class train caps; classes without an entry train on the remainder.
    pub train_cap: BTreeMap<String, usize>,
    pub seed: u64,
}

/// Samples `test_per_class` test ids per class without replacement, then
/// assigns up to the class train cap of the rest to train.
pub fn make_split(listing: &BTreeMap<String, Vec<String>>, cfg: &SplitConfig, source: &str) -> Result<SplitManifest> {
    for class in cfg.train_cap.keys() {
        if !listing.contains_key(class) {
            return Err(Error::Config(format!("train cap for unknown class {class:?}")));
        }
    }
    let mut classes = BTreeMap::new();
    for (class, ids) in listing {
        if ids.len() < cfg.test_per_class {
            return Err(Error::Config(format!(
                "class {class:?} has {} images, fewer than test_per_class {}",
                ids.len(),
                cfg.test_per_class
            )));
        }
        let mut sorted = ids.clone();
        sorted.sort();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config(format!("duplicate id in class {class:?}")));
        }
        let mut rng = rng_from_seed(derive_seed(cfg.seed, class));
        shuffle(&mut rng, &mut sorted);
        let mut rest = sorted.split_off(cfg.test_per_class);
        let cap = cfg.train_cap.get(class).copied().unwrap_or(usize::MAX).min(rest.len());
        let unused = rest.split_off(cap);
        let mut split = ClassSplit { train: rest, test: sorted, unused };
        split.train.sort();
        split.test.sort();
        split.unused.sort();
        classes.insert(class.clone(), split);
    }
    Ok(SplitManifest { classes, seed: cfg.seed, source: source.to_string() })
}

impl SplitManifest {
    pub fn ids(&self, class: &str, role: Role) -> &[String] {
        match self.classes.get(class) {
            Some(s) => match role {
                Role::Train => &s.train,
                Role::Test => &s.test,
                Role::Unused => &s.unused,
            },
            None => &[],
        }
    }

    pub fn count(&self, role: Role) -> usize {
        self.classes.keys().map(|c| self.ids(c, role).len()).sum()
    }

    /// Rows sorted by class, role and id.
    pub fn to_csv(&self) -> String {
        let mut out = format!("# seed={} source={}\n{SPLIT_HEADER}\n", self.seed, self.source);
        for class in self.classes.keys() {
            for role in [Role::Train, Role::Test, Role::Unused] {
                for id in self.ids(class, role) {
                    out.push_str(&format!("{id},{class},{role}\n"));
                }
            }
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut seed = 0;
        let mut source = String::new();
        let mut classes: BTreeMap<String, ClassSplit> = BTreeMap::new();
        let mut header_seen = false;
        let mut offset = 0;
        for line in text.split_inclusive('\n') {
            let row = line.trim_end();
            let at = offset;
            offset += line.len();
            if let Some(meta) = row.strip_prefix('#') {
                for tok in meta.split_whitespace() {
                    match tok.split_once('=') {
                        Some(("seed", v)) => {
                            seed = v.parse().map_err(|_| Error::Format { offset: at, detail: "bad seed".into() })?
                        }
                        Some(("source", v)) => source = v.to_string(),
                        _ => {}
                    }
                }
                continue;
            }
            if row.is_empty() {
                continue;
            }
            if !header_seen {
                if row != SPLIT_HEADER {
                    return Err(Error::Format { offset: at, detail: format!("expected header {SPLIT_HEADER:?}") });
                }
                header_seen = true;
                continue;
            }
            let cols: Vec<&str> = row.split(',').collect();
            let [id, class, role] = cols[..] else {
                return Err(Error::Format { offset: at, detail: format!("expected 3 columns, got {}", cols.len()) });
            };
            let split = classes.entry(class.to_string()).or_default();
            match role.parse::<Role>().map_err(|e| Error::Format { offset: at, detail: e.to_string() })? {
                Role::Train => split.train.push(id.to_string()),
                Role::Test => split.test.push(id.to_string()),
                Role::Unused => split.unused.push(id.to_string()),
            }
        }
        if !header_seen {
            return Err(Error::Format { offset, detail: "missing header".into() });
        }
        let m = SplitManifest { classes, seed, source };
        m.validate()?;
        Ok(m)
    }

    /// Every id appears in exactly one role.
    pub fn validate(&self) -> Result<()> {
        for (class, s) in &self.classes {
            let mut all: Vec<&String> = s.train.iter().chain(&s.test).chain(&s.unused).collect();
            let n = all.len();
            all.sort();
            all.dedup();
            if all.len() != n {
                return Err(Error::Integrity(format!("class {class:?}: an id appears in more than one role")));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_csv(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn listing(counts: &[(&str, usize)]) -> BTreeMap<String, Vec<String>> {
        counts
            .iter()
            .map(|&(c, n)| (c.to_string(), (0..n).map(|i| format!("{c}_{i:05}")).collect()))
            .collect()
    }

    #[test]
    fn dataset_one_structure() {
        let l = listing(&[("pneumonia", 4265), ("normal", 1575)]);
        let cfg = SplitConfig { test_per_class: 500, train_cap: [("normal".to_string(), 0)].into(), seed: 3 };
        let m = make_split(&l, &cfg, "listing").unwrap();
        assert_eq!(m.ids("pneumonia", Role::Train).len(), 3765);
        assert_eq!(m.ids("pneumonia", Role::Test).len(), 500);
        assert_eq!(m.ids("normal", Role::Train).len(), 0);
        assert_eq!(m.ids("normal", Role::Test).len(), 500);
        assert_eq!(m.ids("normal", Role::Unused).len(), 1075);
        m.validate().unwrap();
    }

    #[test]
    fn zero_test_means_all_train() {
        let m = make_split(&listing(&[("a", 7)]), &SplitConfig::default(), "").unwrap();
        assert_eq!(m.ids("a", Role::Train).len(), 7);
        assert!(m.ids("a", Role::Test).is_empty());
    }

    #[test]
    fn deterministic_and_roundtrips() {
        let l = listing(&[("a", 30), ("b", 20)]);
        let cfg = SplitConfig { test_per_class: 10, seed: 9, ..Default::default() };
        let m1 = make_split(&l, &cfg, "phantoms").unwrap();
        assert_eq!(m1, make_split(&l, &cfg, "phantoms").unwrap());
        assert_eq!(SplitManifest::from_csv(&m1.to_csv()).unwrap(), m1);
        let other = make_split(&l, &SplitConfig { seed: 10, ..cfg }, "phantoms").unwrap();
        assert_ne!(m1.ids("a", Role::Test), other.ids("a", Role::Test));
    }

    #[test]
    fn insufficient_images_is_config_error() {
        let cfg = SplitConfig { test_per_class: 5, ..Default::default() };
        assert!(matches!(make_split(&listing(&[("a", 4)]), &cfg, ""), Err(Error::Config(_))));
    }
}
