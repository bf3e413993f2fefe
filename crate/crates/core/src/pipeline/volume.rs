//! Raw volume files with a JSON sidecar.
//!
//! Samples are stored with the channel varying fastest, then x, then y,
//! then z: linear index `m + M·(x + X·(y + Y·z))`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::LabelVolume;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeHeader {
    pub shape: [usize; 3],
    pub channels: usize,
    /// `"f32le"` for images, `"u8"` for labels.
    pub dtype: String,
    pub spacing: [f64; 3],
}

/// `<path>.json`
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// File order for voxel `(x, y, z)` given in-memory order.
fn file_index(shape: [usize; 3], x: usize, y: usize, z: usize) -> usize {
    x + shape[0] * (y + shape[1] * z)
}

fn write_header(path: &Path, header: &VolumeHeader) -> Result<()> {
    fs::write(sidecar_path(path), serde_json::to_string_pretty(header)? + "\n")?;
    Ok(())
}

fn read_header(path: &Path, dtype: &str) -> Result<VolumeHeader> {
    let text = fs::read_to_string(sidecar_path(path))?;
    let h: VolumeHeader = serde_json::from_str(&text)?;
    if h.dtype != dtype {
        return Err(Error::Format(format!("expected dtype {dtype}, sidecar says {}", h.dtype)));
    }
    if h.shape.contains(&0) || h.channels == 0 {
        return Err(Error::Format(format!("empty volume {:?}x{}", h.shape, h.channels)));
    }
    Ok(h)
}

fn check_len(path: &Path, got: usize, want: usize) -> Result<()> {
    match got.cmp(&want) {
        std::cmp::Ordering::Less => Err(Error::Truncated(format!(
            "{} holds {got} bytes, expected {want}",
            path.display()
        ))),
        std::cmp::Ordering::Greater => Err(Error::Format(format!(
            "{} holds {got} bytes, expected {want}",
            path.display()
        ))),
        std::cmp::Ordering::Equal => Ok(()),
    }
}

pub fn write_volume(path: impl AsRef<Path>, volume: &Tensor<f32>, spacing: [f64; 3]) -> Result<()> {
    let path = path.as_ref();
    let s = volume.shape();
    if s.len() != 4 {
        return Err(Error::shape(format!("volume must be [X,Y,Z,M], got {s:?}")));
    }
    let shape = [s[0], s[1], s[2]];
    let m = s[3];
    let mut bytes = vec![0u8; volume.len() * 4];
    for x in 0..shape[0] {
        for y in 0..shape[1] {
            for z in 0..shape[2] {
                let src = volume.offset(&[x, y, z, 0]);
                let dst = file_index(shape, x, y, z) * m;
                for c in 0..m {
                    let v = volume.data()[src + c].to_le_bytes();
                    bytes[(dst + c) * 4..(dst + c + 1) * 4].copy_from_slice(&v);
                }
            }
        }
    }
    fs::write(path, bytes)?;
    write_header(
        path,
        &VolumeHeader {
            shape,
            channels: m,
            dtype: "f32le".into(),
            spacing,
        },
    )
}

/// Image `[X, Y, Z, M]` and voxel spacing.
pub fn read_volume(path: impl AsRef<Path>) -> Result<(Tensor<f32>, [f64; 3])> {
    let path = path.as_ref();
    let h = read_header(path, "f32le")?;
    let bytes = fs::read(path)?;
    let (shape, m) = (h.shape, h.channels);
    check_len(path, bytes.len(), shape.iter().product::<usize>() * m * 4)?;
    let mut data = vec![0f32; shape.iter().product::<usize>() * m];
    for x in 0..shape[0] {
        for y in 0..shape[1] {
            for z in 0..shape[2] {
                let src = file_index(shape, x, y, z) * m;
                let dst = ((x * shape[1] + y) * shape[2] + z) * m;
                for c in 0..m {
                    let b = &bytes[(src + c) * 4..(src + c + 1) * 4];
                    data[dst + c] = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
                }
            }
        }
    }
    Ok((Tensor::from_vec(&[shape[0], shape[1], shape[2], m], data)?, h.spacing))
}

pub fn write_labels(path: impl AsRef<Path>, labels: &LabelVolume, spacing: [f64; 3]) -> Result<()> {
    let path = path.as_ref();
    let shape = labels.shape();
    let mut bytes = vec![0u8; labels.len()];
    for x in 0..shape[0] {
        for y in 0..shape[1] {
            for z in 0..shape[2] {
                bytes[file_index(shape, x, y, z)] = labels.get(x, y, z);
            }
        }
    }
    fs::write(path, bytes)?;
    write_header(
        path,
        &VolumeHeader {
            shape,
            channels: 1,
            dtype: "u8".into(),
            spacing,
        },
    )
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<(LabelVolume, [f64; 3])> {
    let path = path.as_ref();
    let h = read_header(path, "u8")?;
    if h.channels != 1 {
        return Err(Error::Format(format!("label volume with {} channels", h.channels)));
    }
    let bytes = fs::read(path)?;
    let shape = h.shape;
    check_len(path, bytes.len(), shape.iter().product())?;
    let mut labels = LabelVolume::filled(shape, 0);
    for x in 0..shape[0] {
        for y in 0..shape[1] {
            for z in 0..shape[2] {
                labels.set(x, y, z, bytes[file_index(shape, x, y, z)]);
            }
        }
    }
    Ok((labels, h.spacing))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn x_varies_fastest_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.vol");
        // value encodes (x, y, z, m)
        let data: Vec<f32> = (0..2 * 3 * 4)
            .flat_map(|i| {
                let (x, y, z) = (i / 12, (i / 4) % 3, i % 4);
                [0, 1].map(move |m| (1000 * m + 100 * x + 10 * y + z) as f32)
            })
            .collect();
        let t = Tensor::from_vec(&[2, 3, 4, 2], data).unwrap();
        write_volume(&p, &t, [1.0, 1.0, 2.5]).unwrap();
        let raw = fs::read(&p).unwrap();
        let at = |i: usize| f32::from_le_bytes(raw[4 * i..4 * i + 4].try_into().unwrap());
        assert_eq!(at(0), 0.0);
        assert_eq!(at(1), 1000.0);
        assert_eq!(at(2), 100.0); // x = 1
        assert_eq!(at(4), 10.0); // y = 1
        assert_eq!(at(12), 1.0); // z = 1
        let (back, spacing) = read_volume(&p).unwrap();
        assert_eq!(back, t);
        assert_eq!(spacing, [1.0, 1.0, 2.5]);
    }

    #[test]
    fn dtype_and_length_checked() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.vol");
        let l = LabelVolume::new([2, 2, 2], (0..8).collect()).unwrap();
        write_labels(&p, &l, [1.0; 3]).unwrap();
        assert_eq!(read_labels(&p).unwrap().0, l);
        assert!(matches!(read_volume(&p), Err(Error::Format(_))));
        fs::write(&p, [0u8; 5]).unwrap();
        assert!(matches!(read_labels(&p), Err(Error::Truncated(_))));
    }
}
