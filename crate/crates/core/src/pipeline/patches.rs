use rand::Rng;

use crate::error::{Error, Result};
use crate::labels::LabelVolume;
use crate::tensor::{Scalar, Tensor};

/// One training example: an image patch `[X, Y, Z, M]` and its labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub labels: LabelVolume,
}

/// Sub-volume of `[X, Y, Z, M]` starting at `corner`.
pub fn crop_volume<T: Scalar>(volume: &Tensor<T>, corner: [usize; 3], size: [usize; 3]) -> Result<Tensor<T>> {
    let s = volume.shape();
    if s.len() != 4 {
        return Err(Error::shape(format!("volume must be [X,Y,Z,M], got {s:?}")));
    }
    if (0..3).any(|a| corner[a] + size[a] > s[a]) {
        return Err(Error::shape(format!("crop {corner:?}+{size:?} exceeds volume {s:?}")));
    }
    let m = s[3];
    let line = size[2] * m;
    let mut data = Vec::with_capacity(size.iter().product::<usize>() * m);
    for x in 0..size[0] {
        for y in 0..size[1] {
            let start = volume.offset(&[corner[0] + x, corner[1] + y, corner[2], 0]);
            data.extend_from_slice(&volume.data()[start..start + line]);
        }
    }
    Tensor::from_vec(&[size[0], size[1], size[2], m], data)
}

/// Draws `n` random patches. With probability `fg_bias` a patch is centred
/// on a random foreground voxel (clamped into the volume), otherwise its
/// corner is uniform.
pub fn sample_patches<R: Rng + ?Sized>(
    volume: &Tensor<f32>,
    labels: &LabelVolume,
    size: [usize; 3],
    n: usize,
    fg_bias: f64,
    rng: &mut R,
) -> Result<Vec<Sample>> {
    let ext = labels.shape();
    if volume.shape()[..3] != ext {
        return Err(Error::shape(format!(
            "volume {:?} and labels {ext:?} differ",
            volume.shape()
        )));
    }
    if (0..3).any(|a| size[a] == 0 || size[a] > ext[a]) {
        return Err(Error::shape(format!("patch {size:?} does not fit volume {ext:?}")));
    }
    if !(0.0..=1.0).contains(&fg_bias) {
        return Err(Error::Invalid(format!("fg_bias = {fg_bias} must be in [0, 1]")));
    }
    let foreground: Vec<usize> = labels
        .data()
        .iter()
        .enumerate()
        .filter_map(|(i, &c)| (c > 0).then_some(i))
        .collect();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let biased = rng.random_bool(fg_bias);
        let corner = if biased && !foreground.is_empty() {
            let v = foreground[rng.random_range(0..foreground.len())];
            let centre = [v / (ext[1] * ext[2]), (v / ext[2]) % ext[1], v % ext[2]];
            [0, 1, 2].map(|a| centre[a].saturating_sub(size[a] / 2).min(ext[a] - size[a]))
        } else {
            [0, 1, 2].map(|a| rng.random_range(0..=ext[a] - size[a]))
        };
        out.push(Sample {
            image: crop_volume(volume, corner, size)?,
            labels: labels.crop(corner, size)?,
        });
    }
    Ok(out)
}
