use crate::error::{Error, Result};

/// Integer class label per voxel, row-major `[X, Y, Z]`; 0 is background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelVolume {
    shape: [usize; 3],
    data: Vec<u8>,
}

impl LabelVolume {
    pub fn new(shape: [usize; 3], data: Vec<u8>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape(format!("zero extent in label shape {shape:?}")));
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape(format!(
                "label shape {shape:?} needs {} voxels, got {}",
                shape.iter().product::<usize>(),
                data.len()
            )));
        }
        Ok(LabelVolume { shape, data })
    }

    pub fn filled(shape: [usize; 3], class: u8) -> Self {
        LabelVolume {
            shape,
            data: vec![class; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.shape[1] + y) * self.shape[2] + z
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> u8 {
        self.data[self.index(x, y, z)]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, class: u8) {
        let i = self.index(x, y, z);
        self.data[i] = class;
    }

    pub fn max_class(&self) -> u8 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    pub fn count(&self, class: u8) -> usize {
        self.data.iter().filter(|&&c| c == class).count()
    }

    /// Sub-volume starting at `corner` with extents `size`.
    pub fn crop(&self, corner: [usize; 3], size: [usize; 3]) -> Result<Self> {
        for a in 0..3 {
            if corner[a] + size[a] > self.shape[a] {
                return Err(Error::shape(format!(
                    "crop {corner:?}+{size:?} exceeds label volume {:?}",
                    self.shape
                )));
            }
        }
        let mut data = Vec::with_capacity(size.iter().product());
        for x in 0..size[0] {
            for y in 0..size[1] {
                let start = self.index(corner[0] + x, corner[1] + y, corner[2]);
                data.extend_from_slice(&self.data[start..start + size[2]]);
            }
        }
        LabelVolume::new(size, data)
    }
}
