use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::LabelVolume;
use crate::tensor::{Scalar, Tensor};

/// Per-channel min-max scaling of `[X, Y, Z, M]` to `[0, 1]`. Constant
/// channels map to 0.
pub fn normalize<T: Scalar>(volume: &Tensor<T>) -> Result<Tensor<T>> {
    if !volume.all_finite() {
        return Err(Error::Invalid("cannot normalize a volume with NaN or infinite values".into()));
    }
    let m = *volume.shape().last().unwrap_or(&1);
    let mut lo = vec![T::infinity(); m];
    let mut hi = vec![T::neg_infinity(); m];
    for row in volume.data().chunks_exact(m) {
        for (c, &v) in row.iter().enumerate() {
            lo[c] = lo[c].min(v);
            hi[c] = hi[c].max(v);
        }
    }
    let mut out = volume.clone();
    for row in out.data_mut().chunks_exact_mut(m) {
        for (c, v) in row.iter_mut().enumerate() {
            let range = hi[c] - lo[c];
            *v = if range > T::zero() { (*v - lo[c]) / range } else { T::zero() };
        }
    }
    Ok(out)
}

/// Synthetic head-like volume: nested ellipsoidal shells around a jittered
/// centre, one shell per foreground class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub extents: [usize; 3],
    /// Classes including background.
    pub classes: usize,
    pub modalities: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            extents: [64, 64, 64],
            classes: 4,
            modalities: 2,
            noise: 0.05,
            seed: 0,
        }
    }
}

/// Mean intensity of `class` in `modality`; every modality orders the
/// classes differently.
fn class_mean(class: usize, modality: usize, classes: usize) -> f64 {
    ((class + modality) % classes) as f64 / (classes - 1) as f64
}

/// Volume `[X, Y, Z, M]` normalized to `[0, 1]` and its labels. Class
/// `C-1` is the innermost core, class 1 the outermost shell.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(Tensor<f32>, LabelVolume)> {
    if spec.classes < 2 || spec.classes > 255 {
        return Err(Error::Config(format!("phantom classes = {} must be in 2..=255", spec.classes)));
    }
    if spec.modalities == 0 || spec.extents.contains(&0) {
        return Err(Error::Config("phantom extents and modalities must be positive".into()));
    }
    if spec.noise < 0.0 || !spec.noise.is_finite() {
        return Err(Error::Config(format!("phantom noise = {} must be non-negative", spec.noise)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let ext = spec.extents.map(|e| e as f64);
    let centre = ext.map(|e| e / 2.0 + rng.random_range(-0.1..0.1) * e);
    let radii = ext.map(|e| rng.random_range(0.25..0.4) * e);
    let shells = spec.classes - 1;
    let innermost = radii.iter().fold(f64::INFINITY, |a, &r| a.min(r)) / shells as f64;
    if innermost < 1.0 {
        return Err(Error::Config(format!(
            "extents {:?} too small to nest {shells} shells",
            spec.extents
        )));
    }

    let [nx, ny, nz] = spec.extents;
    let mut labels = LabelVolume::filled(spec.extents, 0);
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                let p = [x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5];
                let rho = (0..3)
                    .map(|a| ((p[a] - centre[a]) / radii[a]).powi(2))
                    .sum::<f64>()
                    .sqrt();
                // shell k spans radii ((k-1)/shells, k/shells] of the outer ellipsoid, counted inwards
                let class = (1..=shells)
                    .rev()
                    .find(|&k| rho <= (shells - k + 1) as f64 / shells as f64)
                    .unwrap_or(0);
                labels.set(x, y, z, class as u8);
            }
        }
    }

    let m = spec.modalities;
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::Config(e.to_string()))?;
    let data: Vec<f32> = labels
        .data()
        .iter()
        .flat_map(|&c| (0..m).map(move |mm| (c as usize, mm)))
        .map(|(c, mm)| (class_mean(c, mm, spec.classes) + noise.sample(&mut rng)) as f32)
        .collect();
    let volume = Tensor::from_vec(&[nx, ny, nz, m], data)?;
    Ok((normalize(&volume)?, labels))
}
