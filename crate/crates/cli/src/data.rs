//! Phantom datasets on disk: `.vol` pairs listed in a JSON manifest.

use std::fs;
use std::path::{Path, PathBuf};

use convcaps::pipeline::{generate_phantom, read_labels, read_volume, write_labels, write_volume, PhantomSpec, Sample};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Entry {
    /// Relative paths resolve against the manifest's directory.
    pub image: PathBuf,
    pub labels: PathBuf,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub volumes: Vec<Entry>,
    pub classes: usize,
    pub channels: usize,
}

pub struct Volume {
    pub sample: Sample,
    pub spacing: [f64; 3],
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("data manifest {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Io(format!("data manifest {}: {e}", path.display())))
    }

    /// Loads every listed volume, checking it against the manifest.
    pub fn load(&self, path: &Path) -> Result<Vec<Volume>, CliError> {
        let base = path.parent().unwrap_or(Path::new("."));
        let mut out = Vec::with_capacity(self.volumes.len());
        for e in &self.volumes {
            let (image, spacing) = read_volume(base.join(&e.image))
                .map_err(|err| CliError::from_core(err).context(&e.image.display().to_string()))?;
            let (labels, _) = read_labels(base.join(&e.labels))
                .map_err(|err| CliError::from_core(err).context(&e.labels.display().to_string()))?;
            if image.shape()[..3] != labels.shape() {
                return Err(CliError::Io(format!(
                    "{}: image {:?} and labels {:?} differ",
                    e.image.display(),
                    image.shape(),
                    labels.shape()
                )));
            }
            if image.shape()[3] != self.channels {
                return Err(CliError::Io(format!(
                    "{}: {} channels, manifest says {}",
                    e.image.display(),
                    image.shape()[3],
                    self.channels
                )));
            }
            if labels.max_class() as usize >= self.classes {
                return Err(CliError::Io(format!(
                    "{}: label {} outside the manifest's {} classes",
                    e.labels.display(),
                    labels.max_class(),
                    self.classes
                )));
            }
            out.push(Volume {
                sample: Sample { image, labels },
                spacing,
            });
        }
        if out.is_empty() {
            return Err(CliError::Io(format!("data manifest {} lists no volumes", path.display())));
        }
        Ok(out)
    }
}

pub struct GenSpec {
    pub count: usize,
    pub seed: u64,
    pub size: [usize; 3],
    pub classes: usize,
    pub modalities: usize,
    pub noise: f64,
    pub spacing: [f64; 3],
}

/// Writes `phantom_NNN.vol`, `phantom_NNN_labels.vol` and `manifest.json`.
pub fn generate(out: &Path, g: &GenSpec) -> Result<Manifest, CliError> {
    if g.size.iter().any(|&e| e == 0 || e % 8 != 0) {
        return Err(CliError::Usage(format!("size {:?}: extents must be positive multiples of 8", g.size)));
    }
    if g.count == 0 {
        return Err(CliError::Usage("count must be positive".into()));
    }
    fs::create_dir_all(out).map_err(|e| CliError::Io(format!("{}: {e}", out.display())))?;
    let mut volumes = Vec::with_capacity(g.count);
    for i in 0..g.count {
        let seed = g.seed + i as u64;
        let spec = PhantomSpec {
            extents: g.size,
            classes: g.classes,
            modalities: g.modalities,
            noise: g.noise,
            seed,
        };
        let (image, labels) = generate_phantom(&spec).map_err(|e| CliError::Usage(e.to_string()))?;
        let entry = Entry {
            image: PathBuf::from(format!("phantom_{i:03}.vol")),
            labels: PathBuf::from(format!("phantom_{i:03}_labels.vol")),
            seed,
        };
        write_volume(out.join(&entry.image), &image, g.spacing).map_err(CliError::from_core)?;
        write_labels(out.join(&entry.labels), &labels, g.spacing).map_err(CliError::from_core)?;
        volumes.push(entry);
    }
    let manifest = Manifest {
        volumes,
        classes: g.classes,
        channels: g.modalities,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    let path = out.join("manifest.json");
    fs::write(&path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok(manifest)
}
