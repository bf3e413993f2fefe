use rayon::prelude::*;

use super::patches::crop_volume;
use crate::error::{Error, Result};
use crate::labels::LabelVolume;
use crate::model::Network;
use crate::tensor::Tensor;

/// Tile origins along one axis: multiples of `stride`, plus a final tile
/// flush with the end of the volume.
pub fn tile_starts(extent: usize, patch: usize, stride: usize) -> Vec<usize> {
    let last = extent - patch;
    let mut starts: Vec<usize> = (0..=last).step_by(stride.max(1)).collect();
    if starts.last() != Some(&last) {
        starts.push(last);
    }
    starts
}

/// Per-voxel class probabilities `[X, Y, Z, C]`, averaged over every tile
/// covering the voxel.
pub fn sliding_window_probs(net: &Network<f32>, volume: &Tensor<f32>, patch: [usize; 3], overlap: f64) -> Result<Tensor<f32>> {
    let s = volume.shape();
    if s.len() != 4 {
        return Err(Error::shape(format!("volume must be [X,Y,Z,M], got {s:?}")));
    }
    if (0..3).any(|a| patch[a] == 0 || patch[a] > s[a]) {
        return Err(Error::shape(format!("patch {patch:?} does not fit volume {s:?}")));
    }
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::Invalid(format!("overlap = {overlap} must be in [0, 1)")));
    }
    let axes: Vec<Vec<usize>> = (0..3)
        .map(|a| {
            let stride = ((patch[a] as f64) * (1.0 - overlap)).floor() as usize;
            tile_starts(s[a], patch[a], stride)
        })
        .collect();
    let mut tiles = Vec::new();
    for &x in &axes[0] {
        for &y in &axes[1] {
            for &z in &axes[2] {
                tiles.push([x, y, z]);
            }
        }
    }

    let classes = net.config.classes;
    let [nx, ny, nz] = [s[0], s[1], s[2]];
    let mut sum = vec![0.0f32; nx * ny * nz * classes];
    let mut hits = vec![0u32; nx * ny * nz];
    let batch = rayon::current_num_threads().max(1);
    for group in tiles.chunks(batch) {
        let preds: Vec<Tensor<f32>> = group
            .par_iter()
            .map(|&corner| Ok(net.predict(&crop_volume(volume, corner, patch)?)?.seg))
            .collect::<Result<_>>()?;
        // fused in tile order so the result does not depend on scheduling
        for (corner, seg) in group.iter().zip(preds) {
            let p = seg.data();
            for x in 0..patch[0] {
                for y in 0..patch[1] {
                    let src = (x * patch[1] + y) * patch[2];
                    let dst = ((corner[0] + x) * ny + corner[1] + y) * nz + corner[2];
                    for z in 0..patch[2] {
                        hits[dst + z] += 1;
                        let (a, b) = ((dst + z) * classes, (src + z) * classes);
                        sum[a..a + classes]
                            .iter_mut()
                            .zip(&p[b..b + classes])
                            .for_each(|(s, &v)| *s += v);
                    }
                }
            }
        }
    }
    for (row, &n) in sum.chunks_exact_mut(classes).zip(&hits) {
        let n = n as f32;
        row.iter_mut().for_each(|v| *v /= n);
    }
    Tensor::from_vec(&[nx, ny, nz, classes], sum)
}

/// Full-volume segmentation by tiled inference with mean fusion and
/// per-voxel argmax (ties go to the smaller class).
pub fn sliding_window_infer(net: &Network<f32>, volume: &Tensor<f32>, patch: [usize; 3], overlap: f64) -> Result<LabelVolume> {
    let probs = sliding_window_probs(net, volume, patch, overlap)?;
    let s = probs.shape();
    let labels = probs.argmax_last_axis().into_iter().map(|c| c as u8).collect();
    LabelVolume::new([s[0], s[1], s[2]], labels)
}
