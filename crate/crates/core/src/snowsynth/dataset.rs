//! Paired dataset directories.
//!
//! ```text
//! dir/
//!   manifest.toml       pairs = ["0000", ...] and a [snow] table of SnowParams
//!   0000_snow.ppm       degraded input
//!   0000_gt.ppm         clean target
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cli::{image_read, image_write};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::SnowParams;

pub const MANIFEST: &str = "manifest.toml";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub pairs: Vec<String>,
    /// Parameters that generated the pairs, when synthetic.
    pub snow: Option<SnowParams>,
}

#[derive(Clone, Debug)]
pub struct Pair {
    pub name: String,
    /// `[1, 3, H, W]` in `[0, 1]`.
    pub snowy: Tensor<f32>,
    pub clean: Tensor<f32>,
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub pairs: Vec<Pair>,
    /// Pairs named by the manifest that could not be read, with the reason.
    pub skipped: Vec<(String, String)>,
}

pub fn snowy_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}_snow.ppm"))
}

pub fn clean_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}_gt.ppm"))
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path)?;
        let m: Manifest =
            toml::from_str(&text).map_err(|e| Error::input(format!("{}: {e}", path.display())))?;
        if let Some(p) = &m.snow {
            p.validate()?;
        }
        Ok(m)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::config(e.to_string()))?;
        fs::write(dir.join(MANIFEST), text)?;
        Ok(())
    }
}

impl Dataset {
    /// Reads every pair listed by the manifest, or every `*_snow.ppm` with a
    /// matching `*_gt.ppm` when there is no manifest. Unreadable pairs are
    /// reported on stderr and recorded in `skipped`.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        if !dir.is_dir() {
            return Err(Error::input(format!("{} is not a directory", dir.display())));
        }
        let names = if dir.join(MANIFEST).exists() {
            Manifest::load(dir)?.pairs
        } else {
            let mut names: Vec<String> = fs::read_dir(dir)?
                .filter_map(|e| e.ok())
                .filter_map(|e| e.file_name().to_str()?.strip_suffix("_snow.ppm").map(str::to_string))
                .collect();
            names.sort();
            names
        };
        let mut ds = Dataset::default();
        for name in names {
            let read = image_read(snowy_path(dir, &name)).and_then(|s| Ok((s, image_read(clean_path(dir, &name))?)));
            match read {
                Ok((snowy, clean)) if snowy.shape() == clean.shape() => ds.pairs.push(Pair { name, snowy, clean }),
                Ok(_) => {
                    eprintln!("warning: skipping {name}: snowy and clean extents differ");
                    ds.skipped.push((name, "extent mismatch".into()));
                }
                Err(e) => {
                    eprintln!("warning: skipping {name}: {e}");
                    ds.skipped.push((name, e.to_string()));
                }
            }
        }
        Ok(ds)
    }

    /// Writes the pairs and a manifest; creates `dir` if needed.
    pub fn save(&self, dir: impl AsRef<Path>, snow: Option<&SnowParams>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        for p in &self.pairs {
            image_write(&p.snowy, snowy_path(dir, &p.name))?;
            image_write(&p.clean, clean_path(dir, &p.name))?;
        }
        Manifest {
            pairs: self.pairs.iter().map(|p| p.name.clone()).collect(),
            snow: snow.cloned(),
        }
        .save(dir)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}
